//! Question recommendation for a diagnosed target-domain student.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{diagnose, TargetStates, TargetView};
use crate::cdm::ConceptCtx;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Uniform draw within each bucket.
    #[default]
    Uniform,
    /// Questions whose prediction is closest to 0.5 first.
    Frontier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub question_id: String,
    pub predicted_prob: f64,
    /// (concept id, mastery x 100) for each concept of the question.
    pub mastery_pct: Vec<(String, f64)>,
    pub difficulty_pct: f64,
    pub bucket: Bucket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationList {
    pub student_id: String,
    pub items: Vec<Recommendation>,
    /// A bucket held fewer than x/2 questions and the other bucket filled the gap.
    pub deficit_filled: bool,
}

impl RecommendationList {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Question, concept mastery and difficulty columns.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "student {}", self.student_id);
        let _ = writeln!(
            out,
            "{:<10} {:<22} {:>10} {:>9} {:>8}",
            "question", "concept", "mastery%", "diff%", "bucket"
        );
        for r in &self.items {
            let concept = r.mastery_pct.iter().map(|(c, _)| c.as_str()).collect::<Vec<_>>().join("+");
            let m = r.mastery_pct.iter().map(|(_, m)| format!("{m:.2}")).collect::<Vec<_>>().join("/");
            let bucket = match r.bucket {
                Bucket::Positive => "pos",
                Bucket::Negative => "neg",
            };
            let _ = writeln!(
                out,
                "{:<10} {:<22} {:>10} {:>9.2} {:>8}",
                r.question_id, concept, m, r.difficulty_pct, bucket
            );
        }
        if self.deficit_filled {
            let _ = writeln!(out, "note: one bucket was short; filled from the other");
        }
        out
    }
}

fn pick(candidates: &[(usize, f64)], n: usize, mode: SelectionMode, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match mode {
        SelectionMode::Uniform => {
            let mut idx = sample(rng, candidates.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| candidates[i].0).collect()
        }
        SelectionMode::Frontier => {
            let mut c = candidates.to_vec();
            c.sort_by(|a, b| (a.1 - 0.5).abs().total_cmp(&(b.1 - 0.5).abs()).then(a.0.cmp(&b.0)));
            c.into_iter().take(n).map(|(q, _)| q).collect()
        }
    }
}

/// `x` questions for `student`: half predicted correct, half predicted wrong.
pub fn recommend(
    view: &TargetView<'_>,
    states: &TargetStates,
    student: &str,
    x: usize,
    seed: u64,
    mode: SelectionMode,
) -> Result<RecommendationList> {
    if x < 2 || !x.is_multiple_of(2) {
        return Err(Error::Config(format!("recommendation size must be even and at least 2, got {x}")));
    }
    let u = states
        .state(student)
        .ok_or_else(|| Error::UnknownStudent(student.to_string()))?;
    let n = view.n_questions();
    if n < x {
        return Err(Error::Precondition(format!("question bank has {n} questions, fewer than {x}")));
    }
    let mastery = diagnose(view, states, student)?;
    let preds: Vec<f64> = (0..n).map(|q| view.predict(u, q)).collect();
    let pos: Vec<(usize, f64)> = preds.iter().enumerate().filter(|(_, &p)| p >= 0.5).map(|(q, &p)| (q, p)).collect();
    let neg: Vec<(usize, f64)> = preds.iter().enumerate().filter(|(_, &p)| p < 0.5).map(|(q, &p)| (q, p)).collect();
    let half = x / 2;
    let n_pos = half.min(pos.len()).max(x.saturating_sub(neg.len()));
    let n_neg = x - n_pos;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = pick(&pos, n_pos, mode, &mut rng);
    chosen.extend(pick(&neg, n_neg, mode, &mut rng));

    let ctx = ConceptCtx::from(view.embedding);
    let items = chosen
        .into_iter()
        .map(|q| {
            let p = preds[q];
            Recommendation {
                question_id: view.question_ids[q].clone(),
                predicted_prob: p,
                mastery_pct: view.embedding.question_concepts[q]
                    .iter()
                    .map(|&c| (view.concept_ids[c].clone(), 100.0 * mastery[c]))
                    .collect(),
                difficulty_pct: 100.0 * view.model.difficulty(view.embedding.question_vecs.row(q), &ctx, view.mask(q)),
                bucket: if p >= 0.5 { Bucket::Positive } else { Bucket::Negative },
            }
        })
        .collect();
    Ok(RecommendationList {
        student_id: student.to_string(),
        items,
        deficit_filled: n_pos != half,
    })
}
