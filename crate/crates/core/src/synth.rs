//! Seeded multi-domain populations with known shared and domain-specific abilities.
//!
//! A response is drawn as
//! `Bernoulli(sigmoid(k * (mix * <shared, c> + (1 - mix) * <specific_d, c> - difficulty)))`
//! where `c` is a nonnegative loading of the question's concept onto the
//! ability space (weights sum to one) and `k` is the steepness. Question text
//! carries the concept name and a coarse difficulty tier so that a text encoder
//! can recover both.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, DomainRole, PracticeLog, Question};
use crate::error::{Error, Result};
use crate::linalg::{dot, sigmoid};

const FILLER: [&str; 24] = [
    "solve", "compute", "find", "determine", "value", "given", "show", "which", "following", "each",
    "total", "number", "result", "answer", "expression", "statement", "correct", "choose", "calculate",
    "estimate", "compare", "explain", "consider", "simplify",
];
const TIERS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_source_domains: usize,
    /// 0 or 1.
    pub n_target_domains: usize,
    pub n_students: usize,
    pub questions_per_domain: usize,
    pub concepts_per_domain: usize,
    pub logs_per_student: usize,
    pub ability_dim: usize,
    pub mix_shared: f64,
    pub steepness: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_source_domains: 3,
            n_target_domains: 1,
            n_students: 500,
            questions_per_domain: 100,
            concepts_per_domain: 10,
            logs_per_student: 20,
            ability_dim: 4,
            mix_shared: 0.7,
            steepness: 6.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_students == 0 || self.questions_per_domain == 0 || self.logs_per_student == 0 {
            return Err(Error::Config(
                "synthetic corpus needs students, questions and logs".into(),
            ));
        }
        if self.n_source_domains + self.n_target_domains == 0 {
            return Err(Error::Config("synthetic corpus needs at least one domain".into()));
        }
        if self.n_target_domains > 1 {
            return Err(Error::Config("at most one target domain".into()));
        }
        if self.logs_per_student > self.questions_per_domain {
            return Err(Error::Config(format!(
                "logs per student ({}) exceed questions per domain ({})",
                self.logs_per_student, self.questions_per_domain
            )));
        }
        if self.concepts_per_domain == 0 || self.concepts_per_domain > self.questions_per_domain {
            return Err(Error::Config(
                "concepts per domain must be between 1 and the question count".into(),
            ));
        }
        if self.ability_dim == 0 {
            return Err(Error::Config("ability dimension must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mix_shared) {
            return Err(Error::Config(format!("mix_shared {} not in [0,1]", self.mix_shared)));
        }
        if self.steepness.is_nan() || self.steepness <= 0.0 {
            return Err(Error::Config("steepness must be positive".into()));
        }
        Ok(())
    }

    pub fn domain_ids(&self) -> Vec<(String, DomainRole)> {
        let mut out: Vec<_> = (1..=self.n_source_domains)
            .map(|i| (format!("dom{i:02}"), DomainRole::Source))
            .collect();
        if self.n_target_domains == 1 {
            out.push(("tgt".to_string(), DomainRole::Target));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Sorted student ids; row order of every per-student table.
    pub students: Vec<String>,
    pub shared_ability: Vec<Vec<f64>>,
    pub specific_ability: BTreeMap<String, Vec<Vec<f64>>>,
    /// Per domain, in question order.
    pub difficulty: BTreeMap<String, Vec<f64>>,
    /// Per domain, per concept (sorted concept order) loading on the ability space.
    pub loadings: BTreeMap<String, Vec<Vec<f64>>>,
    /// Per domain, the concept index of each question.
    pub question_concept: BTreeMap<String, Vec<usize>>,
    pub mix_shared: f64,
    pub steepness: f64,
}

impl GroundTruth {
    pub fn student_row(&self, id: &str) -> Option<usize> {
        self.students.binary_search_by(|s| s.as_str().cmp(id)).ok()
    }

    /// Blended ability on the concept of question `q`, before subtracting difficulty.
    pub fn ability_on(&self, student: usize, domain: &str, q: usize) -> f64 {
        let c = self.question_concept[domain][q];
        let load = &self.loadings[domain][c];
        self.mix_shared * dot(&self.shared_ability[student], load)
            + (1.0 - self.mix_shared) * dot(&self.specific_ability[domain][student], load)
    }

    pub fn probability(&self, student: usize, domain: &str, q: usize) -> f64 {
        sigmoid(self.steepness * (self.ability_on(student, domain, q) - self.difficulty[domain][q]))
    }

    pub fn mean_shared(&self, student: usize) -> f64 {
        let a = &self.shared_ability[student];
        a.iter().sum::<f64>() / a.len() as f64
    }
}

fn pad_width(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len()
}

/// Generates every domain of `config` plus its ground truth; a pure function of `(config, seed)`.
pub fn generate(config: &SynthConfig, seed: u64) -> Result<(Vec<DomainDataset>, GroundTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = config.ability_dim;
    let sw = pad_width(config.n_students).max(4);
    let students: Vec<String> = (0..config.n_students).map(|i| format!("stu{i:0sw$}")).collect();
    let shared: Vec<Vec<f64>> = (0..config.n_students)
        .map(|_| (0..g).map(|_| rng.gen::<f64>()).collect())
        .collect();

    let qw = pad_width(config.questions_per_domain).max(3);
    let kw = pad_width(config.concepts_per_domain).max(2);
    let mut datasets = Vec::new();
    let mut truth = GroundTruth {
        students: students.clone(),
        shared_ability: shared,
        specific_ability: BTreeMap::new(),
        difficulty: BTreeMap::new(),
        loadings: BTreeMap::new(),
        question_concept: BTreeMap::new(),
        mix_shared: config.mix_shared,
        steepness: config.steepness,
    };

    for (domain_id, role) in config.domain_ids() {
        let specific: Vec<Vec<f64>> = (0..config.n_students)
            .map(|_| (0..g).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let loadings: Vec<Vec<f64>> = (0..config.concepts_per_domain)
            .map(|_| {
                let raw: Vec<f64> = (0..g).map(|_| rng.gen::<f64>().powi(3) + 0.01).collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / total).collect()
            })
            .collect();
        let concept_names: Vec<String> = (0..config.concepts_per_domain)
            .map(|k| format!("{domain_id}k{k:0kw$}"))
            .collect();
        let mut difficulty = Vec::with_capacity(config.questions_per_domain);
        let mut question_concept = Vec::with_capacity(config.questions_per_domain);
        let mut questions = Vec::with_capacity(config.questions_per_domain);
        for q in 0..config.questions_per_domain {
            let c = q % config.concepts_per_domain;
            let d: f64 = rng.gen();
            let tier = ((d * TIERS as f64) as usize).min(TIERS - 1);
            let f1 = FILLER[rng.gen_range(0..FILLER.len())];
            let f2 = FILLER[rng.gen_range(0..FILLER.len())];
            questions.push(Question {
                question_id: format!("q{q:0qw$}"),
                domain_id: domain_id.clone(),
                concept_ids: vec![concept_names[c].clone()],
                text: format!("{f1} {} tier{tier} {f2}", concept_names[c]),
            });
            difficulty.push(d);
            question_concept.push(c);
        }
        truth.specific_ability.insert(domain_id.clone(), specific);
        truth.loadings.insert(domain_id.clone(), loadings);
        truth.difficulty.insert(domain_id.clone(), difficulty);
        truth.question_concept.insert(domain_id.clone(), question_concept);

        let mut logs = Vec::with_capacity(config.n_students * config.logs_per_student);
        for (s, sid) in students.iter().enumerate() {
            let mut picked = sample(&mut rng, config.questions_per_domain, config.logs_per_student).into_vec();
            picked.sort_unstable();
            for q in picked {
                let p = truth.probability(s, &domain_id, q);
                let score = u8::from(rng.gen::<f64>() < p);
                logs.push(PracticeLog {
                    student_id: sid.clone(),
                    question_id: questions[q].question_id.clone(),
                    score,
                    domain_id: domain_id.clone(),
                });
            }
        }
        datasets.push(DomainDataset::new(domain_id, role, questions, logs)?);
    }
    Ok((datasets, truth))
}

pub fn export_truth(truth: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(truth)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn import_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_source_domains: 2,
            n_target_domains: 1,
            n_students: 40,
            questions_per_domain: 30,
            concepts_per_domain: 5,
            logs_per_student: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, ta) = generate(&small(), 7).unwrap();
        let (b, tb) = generate(&small(), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate(&small(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shapes_and_roles() {
        let (ds, truth) = generate(&small(), 1).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds[2].role, DomainRole::Target);
        for d in &ds {
            assert_eq!(d.students.len(), 40);
            assert_eq!(d.logs.len(), 400);
            assert_eq!(d.concepts.len(), 5);
            for q in &d.questions {
                assert!(q.text.contains(&q.concept_ids[0]));
            }
            // concept order in truth tables matches the dataset's sorted order
            for (qi, q) in d.questions.iter().enumerate() {
                let c = truth.question_concept[&d.domain_id][qi];
                assert_eq!(d.concepts[c], q.concept_ids[0]);
            }
        }
        for a in truth.shared_ability.iter().flatten() {
            assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn rejects_empty_requests() {
        for cfg in [
            SynthConfig { n_students: 0, ..small() },
            SynthConfig { questions_per_domain: 0, ..small() },
            SynthConfig { logs_per_student: 0, ..small() },
            SynthConfig { mix_shared: 1.5, ..small() },
        ] {
            assert!(generate(&cfg, 0).is_err());
        }
    }

    #[test]
    fn ability_equal_to_difficulty_gives_half() {
        let (_, mut truth) = generate(&SynthConfig { mix_shared: 1.0, ..small() }, 3).unwrap();
        let load = truth.loadings["dom01"][truth.question_concept["dom01"][0]].clone();
        let level = dot(&truth.shared_ability[0], &load);
        truth.difficulty.get_mut("dom01").unwrap()[0] = level;
        assert!((truth.probability(0, "dom01", 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pure_shared_mix_is_domain_invariant() {
        let (_, mut truth) = generate(&SynthConfig { mix_shared: 1.0, ..small() }, 5).unwrap();
        // same loading and difficulty in two domains -> same probability
        let load = truth.loadings["dom01"][0].clone();
        truth.loadings.get_mut("dom02").unwrap()[0] = load;
        let q1 = truth.question_concept["dom01"].iter().position(|&c| c == 0).unwrap();
        let q2 = truth.question_concept["dom02"].iter().position(|&c| c == 0).unwrap();
        truth.difficulty.get_mut("dom02").unwrap()[q2] = truth.difficulty["dom01"][q1];
        for s in 0..40 {
            assert_eq!(truth.probability(s, "dom01", q1), truth.probability(s, "dom02", q2));
        }
    }

    #[test]
    fn raising_ability_never_lowers_probability() {
        let (_, mut truth) = generate(&small(), 9).unwrap();
        for s in 0..10 {
            for q in 0..30 {
                let before = truth.probability(s, "dom02", q);
                for g in 0..truth.shared_ability[s].len() {
                    truth.shared_ability[s][g] += 0.05;
                    assert!(truth.probability(s, "dom02", q) >= before);
                    truth.shared_ability[s][g] -= 0.05;
                    truth.specific_ability.get_mut("dom02").unwrap()[s][g] += 0.05;
                    assert!(truth.probability(s, "dom02", q) >= before);
                    truth.specific_ability.get_mut("dom02").unwrap()[s][g] -= 0.05;
                }
            }
        }
    }

    #[test]
    fn empirical_accuracy_matches_analytic_mean() {
        let cfg = SynthConfig {
            n_source_domains: 1,
            n_target_domains: 0,
            n_students: 600,
            questions_per_domain: 40,
            concepts_per_domain: 8,
            logs_per_student: 20,
            ..SynthConfig::default()
        };
        let (ds, truth) = generate(&cfg, 21).unwrap();
        let d = &ds[0];
        assert!(d.logs.len() >= 10_000);
        let qidx = d.question_index();
        let (mut hits, mut expected) = (0.0, 0.0);
        for log in &d.logs {
            let s = truth.student_row(&log.student_id).unwrap();
            expected += truth.probability(s, &d.domain_id, qidx[log.question_id.as_str()]);
            hits += log.score as f64;
        }
        let n = d.logs.len() as f64;
        assert!((hits / n - expected / n).abs() <= 0.02);
    }

    #[test]
    fn truth_export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (_, truth) = generate(&small(), 7).unwrap();
        let path = dir.path().join("truth.json");
        export_truth(&truth, &path).unwrap();
        assert_eq!(import_truth(&path).unwrap(), truth);
        let again = dir.path().join("again.json");
        export_truth(&generate(&small(), 7).unwrap().1, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
        assert!(export_truth(&truth, dir.path().join("missing/truth.json")).is_err());
    }
}
