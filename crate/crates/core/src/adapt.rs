//! Stage 2: zero-shot adaptation to the target domain.
//!
//! Target states start as the mean of a student's shared states, early birds
//! are refined on their real logs, their logs are copied onto the most similar
//! unseen students (peers found through specific states in a reference source
//! domain), and unseen students are fine-tuned on those simulated logs. The
//! diagnosis model itself stays frozen throughout.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cdm::{ConceptCtx, DiagnosticModel};
use crate::data::{DomainDataset, PracticeLog, TargetSplit};
use crate::embed::DomainEmbedding;
use crate::error::{Error, Result};
use crate::linalg::{all_finite, cosine, Matrix};
use crate::optim::Adam;
use crate::par::{map_chunks, Exec, CHUNK};
use crate::pretrain::PretrainedBundle;

/// Per-student target-domain states.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetStates {
    pub domain_id: String,
    /// Sorted student ids, one per row of `states`.
    pub students: Vec<String>,
    pub states: Matrix,
    pub refined: Vec<bool>,
}

impl TargetStates {
    pub fn row_of(&self, student: &str) -> Option<usize> {
        self.students.binary_search_by(|s| s.as_str().cmp(student)).ok()
    }

    pub fn state(&self, student: &str) -> Option<&[f64]> {
        self.row_of(student).map(|r| self.states.row(r))
    }
}

/// Average of each student's shared states over the source domains where they have one.
pub fn init_target_states(bundle: &PretrainedBundle, domain_id: &str, target_students: &[String]) -> Result<TargetStates> {
    let mut students = target_students.to_vec();
    students.sort();
    students.dedup();
    let dim = bundle.heads.dim();
    let mut states = Matrix::zeros(students.len(), dim);
    let mut missing = Vec::new();
    for (row, sid) in students.iter().enumerate() {
        let Some(per_domain) = bundle.states.get(sid).filter(|m| !m.is_empty()) else {
            missing.push(sid.clone());
            continue;
        };
        let out = states.row_mut(row);
        for s in per_domain.values() {
            out.iter_mut().zip(&s.sha).for_each(|(a, b)| *a += b);
        }
        let n = per_domain.len() as f64;
        out.iter_mut().for_each(|a| *a /= n);
    }
    if !missing.is_empty() {
        return Err(Error::Precondition(format!(
            "{} target student(s) have no source-domain state: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    Ok(TargetStates {
        domain_id: domain_id.to_string(),
        refined: vec![false; students.len()],
        students,
        states,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Fraction of the logs held out for early stopping.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            batch_size: 256,
            epochs: 30,
            patience: 5,
            holdout: 0.1,
            seed: 0,
        }
    }
}

/// What a fine-tuning call did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub epochs_run: usize,
    pub n_train: usize,
    pub n_holdout: usize,
    pub best_holdout_mse: Option<f64>,
    pub skipped: bool,
}

/// Frozen pieces needed to predict in the target domain.
pub struct TargetView<'a> {
    pub model: &'a DiagnosticModel,
    pub embedding: &'a DomainEmbedding,
    pub question_ids: Vec<String>,
    pub concept_ids: Vec<String>,
    masks: Vec<Vec<f64>>,
    questions: HashMap<String, usize>,
}

impl<'a> TargetView<'a> {
    pub fn new(model: &'a DiagnosticModel, embedding: &'a DomainEmbedding, dataset: &DomainDataset) -> Self {
        let question_ids: Vec<String> = dataset.questions.iter().map(|q| q.question_id.clone()).collect();
        Self {
            model,
            embedding,
            masks: (0..embedding.question_vecs.rows()).map(|q| embedding.question_mask(q)).collect(),
            questions: question_ids.iter().enumerate().map(|(i, q)| (q.clone(), i)).collect(),
            question_ids,
            concept_ids: dataset.concepts.clone(),
        }
    }

    pub fn question(&self, id: &str) -> Result<usize> {
        self.questions
            .get(id)
            .copied()
            .ok_or_else(|| Error::Validation(format!("unknown target question `{id}`")))
    }

    pub fn n_questions(&self) -> usize {
        self.masks.len()
    }

    pub fn predict(&self, state: &[f64], question: usize) -> f64 {
        self.model.forward(
            state,
            self.embedding.question_vecs.row(question),
            &ConceptCtx::from(self.embedding),
            &self.masks[question],
        )
    }

    pub fn mask(&self, question: usize) -> &[f64] {
        &self.masks[question]
    }
}

#[derive(Clone, Copy)]
struct Obs {
    slot: usize,
    question: usize,
    y: f64,
}

fn holdout_mse(view: &TargetView<'_>, params: &[f64], dim: usize, set: &[Obs]) -> f64 {
    set.iter()
        .map(|o| {
            let r = o.y - view.predict(&params[o.slot * dim..(o.slot + 1) * dim], o.question);
            r * r
        })
        .sum::<f64>()
        / set.len() as f64
}

/// Minimizes the squared residual over `logs`, updating only the rows that
/// appear in them; every other row is left bit-identical.
fn finetune_rows(
    view: &TargetView<'_>,
    states: &mut TargetStates,
    logs: &[(usize, usize, f64)],
    config: &FinetuneConfig,
    exec: Exec,
    stage: &'static str,
) -> Result<FinetuneOutcome> {
    let dim = states.states.cols();
    let mut rows: Vec<usize> = logs.iter().map(|l| l.0).collect();
    rows.sort_unstable();
    rows.dedup();
    let slot: HashMap<usize, usize> = rows.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let mut params: Vec<f64> = rows.iter().flat_map(|&r| states.states.row(r).to_vec()).collect();

    let mut obs: Vec<Obs> = logs
        .iter()
        .map(|&(r, q, y)| Obs {
            slot: slot[&r],
            question: q,
            y,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    obs.shuffle(&mut rng);
    let mut n_hold = (config.holdout * obs.len() as f64).floor() as usize;
    if n_hold >= obs.len() {
        n_hold = 0;
    }
    let (hold, train) = obs.split_at(n_hold);
    let (hold, mut train) = (hold.to_vec(), train.to_vec());

    let mut opt = Adam::new(params.len(), config.lr);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stale = 0;
    let mut epochs_run = 0;
    let scratch_len = view.model.n_params();
    for epoch in 1..=config.epochs {
        epochs_run = epoch;
        train.shuffle(&mut rng);
        for batch in train.chunks(config.batch_size.max(1)) {
            let w = 1.0 / batch.len() as f64;
            let parts = map_chunks(batch, CHUNK, exec, |chunk| {
                let mut scratch = vec![0.0; scratch_len];
                chunk
                    .iter()
                    .map(|o| {
                        let mut g = vec![0.0; dim];
                        view.model.accumulate(
                            &params[o.slot * dim..(o.slot + 1) * dim],
                            view.embedding.question_vecs.row(o.question),
                            &ConceptCtx::from(view.embedding),
                            view.mask(o.question),
                            o.y,
                            w,
                            &mut scratch,
                            Some(&mut g),
                        );
                        (o.slot, g)
                    })
                    .collect::<Vec<_>>()
            });
            let mut grad = vec![0.0; params.len()];
            for (s, g) in parts.into_iter().flatten() {
                grad[s * dim..(s + 1) * dim].iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            if !all_finite(&grad) {
                return Err(Error::Divergence {
                    stage,
                    epoch,
                    detail: "non-finite state gradient".into(),
                });
            }
            opt.step(&mut params, &grad);
        }
        if !all_finite(&params) {
            return Err(Error::Divergence {
                stage,
                epoch,
                detail: "non-finite state".into(),
            });
        }
        if hold.is_empty() {
            continue;
        }
        let v = holdout_mse(view, &params, dim, &hold);
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if config.patience > 0 && stale >= config.patience {
                break;
            }
        }
    }
    let best_mse = best.as_ref().map(|(v, _)| *v);
    if let Some((_, p)) = best {
        params = p;
    }
    if config.epochs > 0 {
        for (i, &r) in rows.iter().enumerate() {
            states.states.row_mut(r).copy_from_slice(&params[i * dim..(i + 1) * dim]);
            states.refined[r] = true;
        }
    }
    Ok(FinetuneOutcome {
        epochs_run,
        n_train: train.len(),
        n_holdout: hold.len(),
        best_holdout_mse: best_mse,
        skipped: false,
    })
}

fn resolve_logs(view: &TargetView<'_>, states: &TargetStates, logs: impl Iterator<Item = (String, String, u8)>) -> Result<Vec<(usize, usize, f64)>> {
    logs.map(|(s, q, y)| {
        let r = states.row_of(&s).ok_or_else(|| Error::UnknownStudent(s.clone()))?;
        Ok((r, view.question(&q)?, y as f64))
    })
    .collect()
}

/// Refines early-bird rows on their real target logs.
pub fn finetune_early_birds(
    view: &TargetView<'_>,
    states: &mut TargetStates,
    split: &TargetSplit,
    config: &FinetuneConfig,
    exec: Exec,
) -> Result<FinetuneOutcome> {
    if split.early_bird_logs.is_empty() {
        return Err(Error::Precondition("no early-bird logs to refine on".into()));
    }
    let logs = resolve_logs(
        view,
        states,
        split
            .early_bird_logs
            .iter()
            .map(|l| (l.student_id.clone(), l.question_id.clone(), l.score)),
    )?;
    finetune_rows(view, states, &logs, config, exec, "early-bird fine-tune")
}

/// Source domain whose specific state is most cosine-similar to `target_state`.
pub fn pick_reference_domain(bundle: &PretrainedBundle, target_state: &[f64], early_bird_id: &str) -> Result<String> {
    let per_domain = bundle
        .states
        .get(early_bird_id)
        .filter(|m| !m.is_empty())
        .ok_or_else(|| Error::Precondition(format!("early bird `{early_bird_id}` has no source-domain state")))?;
    let mut best: Option<(&String, f64)> = None;
    // BTreeMap order: a later domain must beat the score strictly, so ties keep the smaller id
    for (domain, s) in per_domain {
        let c = cosine(target_state, &s.spe);
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((domain, c));
        }
    }
    Ok(best.expect("non-empty").0.clone())
}

/// Top-`p` unseen students by cosine of specific states in `domain`.
pub fn peer_set(
    bundle: &PretrainedBundle,
    early_bird_id: &str,
    domain: &str,
    unseen_ids: &[String],
    p: usize,
) -> Result<Vec<(String, f64)>> {
    if p == 0 {
        return Err(Error::Config("peer count must be at least 1".into()));
    }
    let anchor = bundle
        .state(early_bird_id, domain)
        .ok_or_else(|| Error::Precondition(format!("early bird `{early_bird_id}` has no state in domain {domain}")))?;
    let mut scored: Vec<(String, f64)> = unseen_ids
        .iter()
        .filter_map(|id| bundle.state(id, domain).map(|s| (id.clone(), cosine(&anchor.spe, &s.spe))))
        .collect();
    // by value, so -0.0 and 0.0 tie
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(p);
    Ok(scored)
}

/// Peer set of one early bird together with the reference domain it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerMatch {
    pub early_bird_id: String,
    pub reference_domain: String,
    pub peers: Vec<(String, f64)>,
}

/// Reference domain and peer set for every early bird, in early-bird id order.
pub fn match_peers(
    bundle: &PretrainedBundle,
    states: &TargetStates,
    split: &TargetSplit,
    p: usize,
    exec: Exec,
) -> Result<Vec<PeerMatch>> {
    let mut ebs = split.early_bird_ids.clone();
    ebs.sort();
    map_chunks(&ebs, 8, exec, |chunk| {
        chunk
            .iter()
            .map(|eb| {
                let u = states.state(eb).ok_or_else(|| Error::UnknownStudent(eb.clone()))?;
                let reference_domain = pick_reference_domain(bundle, u, eb)?;
                let peers = peer_set(bundle, eb, &reference_domain, &split.unseen_ids, p)?;
                Ok(PeerMatch {
                    early_bird_id: eb.clone(),
                    reference_domain,
                    peers,
                })
            })
            .collect::<Result<Vec<_>>>()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()
    .map(|v| v.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedLog {
    pub student_id: String,
    pub question_id: String,
    pub score: u8,
    pub donor_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimulatedLogSet {
    /// Sorted by (student, question).
    pub logs: Vec<SimulatedLog>,
    pub reference_domains: BTreeMap<String, String>,
}

impl SimulatedLogSet {
    pub fn len(&self) -> usize {
        self.logs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logs.is_empty()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(["student_id", "question_id", "score", "donor_id", "similarity"])
            .and_then(|_| {
                self.logs.iter().try_for_each(|l| {
                    w.write_record([
                        l.student_id.as_str(),
                        l.question_id.as_str(),
                        &l.score.to_string(),
                        l.donor_id.as_str(),
                        &l.similarity.to_string(),
                    ])
                })
            })
            .map_err(|e| Error::Validation(format!("csv: {e}")))?;
        w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_csv()?;
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }
}

/// Copies each early bird's target logs onto its peers. A (peer, question)
/// pair produced by several donors keeps the most similar donor, then the smaller donor id.
pub fn simulate_logs(early_bird_logs: &[PracticeLog], matches: &[PeerMatch]) -> SimulatedLogSet {
    let mut by_donor: HashMap<&str, Vec<&PracticeLog>> = HashMap::new();
    for l in early_bird_logs {
        by_donor.entry(l.student_id.as_str()).or_default().push(l);
    }
    let mut kept: BTreeMap<(String, String), SimulatedLog> = BTreeMap::new();
    let mut reference_domains = BTreeMap::new();
    for m in matches {
        reference_domains.insert(m.early_bird_id.clone(), m.reference_domain.clone());
        let Some(donor_logs) = by_donor.get(m.early_bird_id.as_str()) else {
            continue;
        };
        for (peer, sim) in &m.peers {
            for l in donor_logs {
                let cand = SimulatedLog {
                    student_id: peer.clone(),
                    question_id: l.question_id.clone(),
                    score: l.score,
                    donor_id: m.early_bird_id.clone(),
                    similarity: *sim,
                };
                let key = (peer.clone(), l.question_id.clone());
                match kept.get(&key) {
                    Some(old) if old.similarity > cand.similarity => {}
                    Some(old) if old.similarity == cand.similarity && old.donor_id <= cand.donor_id => {}
                    _ => {
                        kept.insert(key, cand);
                    }
                }
            }
        }
    }
    SimulatedLogSet {
        logs: kept.into_values().collect(),
        reference_domains,
    }
}

/// Fine-tunes unseen rows on simulated logs. Empty input is a no-op reported as skipped.
pub fn finetune_cold_start(
    view: &TargetView<'_>,
    states: &mut TargetStates,
    simulated: &SimulatedLogSet,
    config: &FinetuneConfig,
    exec: Exec,
) -> Result<FinetuneOutcome> {
    if simulated.is_empty() {
        return Ok(FinetuneOutcome {
            epochs_run: 0,
            n_train: 0,
            n_holdout: 0,
            best_holdout_mse: None,
            skipped: true,
        });
    }
    let logs = resolve_logs(
        view,
        states,
        simulated
            .logs
            .iter()
            .map(|l| (l.student_id.clone(), l.question_id.clone(), l.score)),
    )?;
    finetune_rows(view, states, &logs, config, exec, "cold-start fine-tune")
}

/// Per-concept mastery of `student` in the target domain.
pub fn diagnose(view: &TargetView<'_>, states: &TargetStates, student: &str) -> Result<Vec<f64>> {
    let u = states
        .state(student)
        .ok_or_else(|| Error::UnknownStudent(student.to_string()))?;
    Ok(view.model.mastery(u, &ConceptCtx::from(view.embedding)))
}
