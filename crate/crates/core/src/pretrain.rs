//! Stage 1: pre-training across source domains with decoupled student states.
//!
//! Each source domain `k` owns a student embedding table. Two dense heads shared
//! by all domains project a row `u^k` into a shared state `tanh(W_sha u^k + b_sha)`
//! and a specific state `tanh(W_spe u^k + b_spe)`. The objective is the sum of
//! two regularizers over a mini-batch of logs drawn from all source domains:
//!
//! * shared: for every domain `k`, the mean residual of the shared state from
//!   `k` over all batch logs (any domain) of students present in `k`, minus
//!   `lambda_adv` times its mean residual over the batch logs of domain `k`;
//! * specific: for every domain `k`, the mean over its batch logs of the
//!   residual of the specific state from `k`, minus `lambda_adv` times the mean
//!   residual of the same student's specific states from the other domains.
//!
//! Residuals are squared and bounded in `[0, 1]`, so the negative terms cannot
//! run away.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cdm::{CdmKind, ConceptCtx, DiagnosticModel, ModelShape};
use crate::data::DomainDataset;
use crate::embed::{init_student_vecs, DomainEmbedding, TextEncoder};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, Matrix};
use crate::optim::Adam;
use crate::par::{map_chunks, Exec, CHUNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StateKind {
    Shared,
    Specific,
}

/// The two decoupling heads, stored flat as `[W_sha, b_sha, W_spe, b_spe]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupleHeads {
    dim: usize,
    params: Vec<f64>,
}

impl DecoupleHeads {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (3.0 / dim as f64).sqrt();
        let mut params = vec![0.0; 2 * (dim * dim + dim)];
        for kind in [StateKind::Shared, StateKind::Specific] {
            let start = Self::offset(dim, kind);
            for w in &mut params[start..start + dim * dim] {
                *w = rng.gen_range(-a..=a);
            }
        }
        Self { dim, params }
    }

    pub fn from_parts(dim: usize, w_sha: &[f64], b_sha: &[f64], w_spe: &[f64], b_spe: &[f64]) -> Result<Self> {
        if w_sha.len() != dim * dim || w_spe.len() != dim * dim || b_sha.len() != dim || b_spe.len() != dim {
            return Err(Error::Dimension(format!("decoupling heads must be {dim}x{dim} plus bias")));
        }
        let mut params = Vec::with_capacity(2 * (dim * dim + dim));
        params.extend_from_slice(w_sha);
        params.extend_from_slice(b_sha);
        params.extend_from_slice(w_spe);
        params.extend_from_slice(b_spe);
        if !all_finite(&params) {
            return Err(Error::NonFinite("decoupling heads".into()));
        }
        Ok(Self { dim, params })
    }

    fn offset(dim: usize, kind: StateKind) -> usize {
        match kind {
            StateKind::Shared => 0,
            StateKind::Specific => dim * dim + dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn named_params(&self) -> BTreeMap<String, Vec<f64>> {
        let d = self.dim;
        let mut out = BTreeMap::new();
        for (kind, name) in [(StateKind::Shared, "sha"), (StateKind::Specific, "spe")] {
            let o = Self::offset(d, kind);
            out.insert(format!("heads.{name}.weight"), self.params[o..o + d * d].to_vec());
            out.insert(format!("heads.{name}.bias"), self.params[o + d * d..o + d * d + d].to_vec());
        }
        out
    }

    pub fn from_named_params(dim: usize, named: &BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let get = |k: &str| {
            named
                .get(k)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks parameter `{k}`")))
        };
        Self::from_parts(
            dim,
            get("heads.sha.weight")?,
            get("heads.sha.bias")?,
            get("heads.spe.weight")?,
            get("heads.spe.bias")?,
        )
    }

    pub fn apply(&self, kind: StateKind, u: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let o = Self::offset(d, kind);
        (0..d)
            .map(|r| {
                let w = &self.params[o + r * d..o + (r + 1) * d];
                (self.params[o + d * d + r] + crate::linalg::dot(w, u)).tanh()
            })
            .collect()
    }

    /// Splits a student embedding into its shared and specific states.
    pub fn decouple(&self, u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if u.len() != self.dim {
            return Err(Error::Dimension(format!(
                "student vector has length {}, heads expect {}",
                u.len(),
                self.dim
            )));
        }
        Ok((self.apply(StateKind::Shared, u), self.apply(StateKind::Specific, u)))
    }

    /// Backprop `g_out` through the head that produced `out` from `u`.
    fn backward(&self, kind: StateKind, u: &[f64], out: &[f64], g_out: &[f64], g_params: &mut [f64], g_u: &mut [f64]) {
        let d = self.dim;
        let o = Self::offset(d, kind);
        for r in 0..d {
            let da = g_out[r] * (1.0 - out[r] * out[r]);
            if da == 0.0 {
                continue;
            }
            g_params[o + d * d + r] += da;
            let row = o + r * d;
            for j in 0..d {
                g_params[row + j] += da * u[j];
                g_u[j] += self.params[row + j] * da;
            }
        }
    }
}

/// One response inside the indexed source corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRef {
    /// Global student index.
    pub student: usize,
    pub domain: usize,
    pub question: usize,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey {
    pub student: usize,
    pub domain: usize,
    pub kind: StateKind,
}

/// A weighted squared-residual term: `weight * (y - M(state, question))^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub state: StateKey,
    pub log: LogRef,
    pub weight: f64,
}

/// Which (student, domain) pairs carry a state, and the row of that state.
#[derive(Debug, Clone, PartialEq)]
pub struct Presence {
    rows: Vec<Vec<Option<u32>>>,
}

impl Presence {
    /// `rows[domain][student]`.
    pub fn new(rows: Vec<Vec<Option<u32>>>) -> Self {
        Self { rows }
    }

    pub fn n_domains(&self) -> usize {
        self.rows.len()
    }

    #[inline]
    pub fn row(&self, student: usize, domain: usize) -> Option<usize> {
        self.rows[domain][student].map(|r| r as usize)
    }

    #[inline]
    pub fn has(&self, student: usize, domain: usize) -> bool {
        self.rows[domain][student].is_some()
    }
}

fn ensure_batch(batch: &[LogRef]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    Ok(())
}

/// Terms of the shared-state regularizer for one batch.
pub fn shared_terms(batch: &[LogRef], presence: &Presence, lambda_adv: f64) -> Result<Vec<Term>> {
    ensure_batch(batch)?;
    let mut terms = Vec::new();
    for k in 0..presence.n_domains() {
        let cross: Vec<&LogRef> = batch.iter().filter(|l| presence.has(l.student, k)).collect();
        if !cross.is_empty() {
            let w = 1.0 / cross.len() as f64;
            terms.extend(cross.iter().map(|&&log| Term {
                state: StateKey {
                    student: log.student,
                    domain: k,
                    kind: StateKind::Shared,
                },
                log,
                weight: w,
            }));
        }
        if lambda_adv != 0.0 {
            let own: Vec<&LogRef> = batch.iter().filter(|l| l.domain == k).collect();
            if !own.is_empty() {
                let w = -lambda_adv / own.len() as f64;
                terms.extend(own.iter().map(|&&log| Term {
                    state: StateKey {
                        student: log.student,
                        domain: k,
                        kind: StateKind::Shared,
                    },
                    log,
                    weight: w,
                }));
            }
        }
    }
    Ok(terms)
}

/// Terms of the specific-state regularizer for one batch.
pub fn specific_terms(batch: &[LogRef], presence: &Presence, lambda_adv: f64) -> Result<Vec<Term>> {
    ensure_batch(batch)?;
    let mut terms = Vec::new();
    for k in 0..presence.n_domains() {
        let own: Vec<&LogRef> = batch.iter().filter(|l| l.domain == k).collect();
        if own.is_empty() {
            continue;
        }
        let n = own.len() as f64;
        for &&log in &own {
            terms.push(Term {
                state: StateKey {
                    student: log.student,
                    domain: k,
                    kind: StateKind::Specific,
                },
                log,
                weight: 1.0 / n,
            });
            if lambda_adv == 0.0 {
                continue;
            }
            let others: Vec<usize> = (0..presence.n_domains())
                .filter(|&i| i != k && presence.has(log.student, i))
                .collect();
            let w = -lambda_adv / (n * others.len().max(1) as f64);
            terms.extend(others.into_iter().map(|i| Term {
                state: StateKey {
                    student: log.student,
                    domain: i,
                    kind: StateKind::Specific,
                },
                log,
                weight: w,
            }));
        }
    }
    Ok(terms)
}

fn weighted_residuals(terms: &[Term], predict: impl Fn(&StateKey, &LogRef) -> f64) -> f64 {
    terms
        .iter()
        .map(|t| {
            let r = t.log.y - predict(&t.state, &t.log);
            t.weight * r * r
        })
        .sum()
}

/// Shared-state regularizer value under an arbitrary predictor.
pub fn loss_sha(
    batch: &[LogRef],
    presence: &Presence,
    lambda_adv: f64,
    predict: impl Fn(&StateKey, &LogRef) -> f64,
) -> Result<f64> {
    Ok(weighted_residuals(&shared_terms(batch, presence, lambda_adv)?, predict))
}

/// Specific-state regularizer value under an arbitrary predictor.
pub fn loss_spe(
    batch: &[LogRef],
    presence: &Presence,
    lambda_adv: f64,
    predict: impl Fn(&StateKey, &LogRef) -> f64,
) -> Result<f64> {
    Ok(weighted_residuals(&specific_terms(batch, presence, lambda_adv)?, predict))
}

/// Source domains indexed for training: embeddings, student rows and logs.
#[derive(Debug, Clone)]
pub struct SourceIndex {
    pub domain_ids: Vec<String>,
    pub embeddings: Vec<DomainEmbedding>,
    /// Global sorted student ids.
    pub students: Vec<String>,
    /// Per domain, the global index of each row.
    pub domain_students: Vec<Vec<usize>>,
    pub presence: Presence,
    pub logs: Vec<Vec<LogRef>>,
}

impl SourceIndex {
    pub fn build(sources: &[DomainDataset], encoder: &dyn TextEncoder) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Precondition("pre-training needs at least one source domain".into()));
        }
        let students: Vec<String> = sources
            .iter()
            .flat_map(|d| d.students.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let global: HashMap<&str, usize> = students.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut embeddings = Vec::new();
        let mut domain_students = Vec::new();
        let mut rows = Vec::new();
        let mut logs = Vec::new();
        for (k, d) in sources.iter().enumerate() {
            if d.logs.is_empty() {
                return Err(Error::Precondition(format!("source domain {} has no logs", d.domain_id)));
            }
            embeddings.push(DomainEmbedding::build(d, encoder)?);
            let ids: Vec<usize> = d.students.iter().map(|s| global[s.as_str()]).collect();
            let mut r = vec![None; students.len()];
            for (row, &g) in ids.iter().enumerate() {
                r[g] = Some(row as u32);
            }
            let qidx = d.question_index();
            logs.push(
                d.logs
                    .iter()
                    .map(|l| LogRef {
                        student: global[l.student_id.as_str()],
                        domain: k,
                        question: qidx[l.question_id.as_str()],
                        y: l.score as f64,
                    })
                    .collect(),
            );
            domain_students.push(ids);
            rows.push(r);
        }
        Ok(Self {
            domain_ids: sources.iter().map(|d| d.domain_id.clone()).collect(),
            embeddings,
            students,
            domain_students,
            presence: Presence::new(rows),
            logs,
        })
    }

    pub fn n_domains(&self) -> usize {
        self.domain_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub kind: CdmKind,
    pub dim: usize,
    pub hidden: [usize; 2],
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_adv: f64,
    /// Epochs without validation improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            kind: CdmKind::NeuralCd,
            dim: 64,
            hidden: [512, 256],
            lr: 0.002,
            batch_size: 256,
            epochs: 30,
            lambda_adv: 0.1,
            patience: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Mutable training state: model, heads and one embedding table per source domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: DiagnosticModel,
    pub heads: DecoupleHeads,
    pub tables: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: f64,
    pub model: Vec<f64>,
    pub heads: Vec<f64>,
    pub tables: Vec<Matrix>,
}

impl TrainState {
    pub fn state(&self, index: &SourceIndex, key: &StateKey) -> Vec<f64> {
        let row = index
            .presence
            .row(key.student, key.domain)
            .expect("state requested for absent student");
        self.heads.apply(key.kind, self.tables[key.domain].row(row))
    }

    /// Prediction of the state `key` on the question of `log`.
    pub fn predict(&self, index: &SourceIndex, key: &StateKey, log: &LogRef) -> f64 {
        let s = self.state(index, key);
        let e = &index.embeddings[log.domain];
        let mask = e.question_mask(log.question);
        self.model.forward(&s, e.question_vecs.row(log.question), &ConceptCtx::from(e), &mask)
    }

    /// Loss and exact gradient of the weighted terms with respect to every trainable parameter.
    pub fn gradient(&self, index: &SourceIndex, terms: &[Term], exec: Exec) -> BatchGradient {
        let dim = self.heads.dim();
        let keys: Vec<StateKey> = terms.iter().map(|t| t.state).collect::<BTreeSet<_>>().into_iter().collect();
        let slot: HashMap<StateKey, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let states: Vec<Vec<f64>> = map_chunks(&keys, CHUNK, exec, |chunk| {
            chunk.iter().map(|k| self.state(index, k)).collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect();
        let masks: Vec<Vec<Vec<f64>>> = index
            .embeddings
            .iter()
            .map(|e| (0..e.question_vecs.rows()).map(|q| e.question_mask(q)).collect())
            .collect();

        let n_params = self.model.n_params();
        let partials = map_chunks(terms, CHUNK, exec, |chunk| {
            let mut loss = 0.0;
            let mut gp = vec![0.0; n_params];
            let mut gs: Vec<(usize, Vec<f64>)> = Vec::with_capacity(chunk.len());
            for t in chunk {
                let s = slot[&t.state];
                let e = &index.embeddings[t.log.domain];
                let mut gu = vec![0.0; dim];
                let p = self.model.accumulate(
                    &states[s],
                    e.question_vecs.row(t.log.question),
                    &ConceptCtx::from(e),
                    &masks[t.log.domain][t.log.question],
                    t.log.y,
                    t.weight,
                    &mut gp,
                    Some(&mut gu),
                );
                let r = t.log.y - p;
                loss += t.weight * r * r;
                gs.push((s, gu));
            }
            (loss, gp, gs)
        });

        let mut loss = 0.0;
        let mut g_model = vec![0.0; n_params];
        let mut g_states = vec![vec![0.0; dim]; keys.len()];
        for (l, gp, gs) in partials {
            loss += l;
            g_model.iter_mut().zip(&gp).for_each(|(a, b)| *a += b);
            for (s, g) in gs {
                g_states[s].iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }

        let slots: Vec<usize> = (0..keys.len()).collect();
        let head_parts = map_chunks(&slots, CHUNK, exec, |chunk| {
            let mut gh = vec![0.0; self.heads.params().len()];
            let mut rows = Vec::with_capacity(chunk.len());
            for &s in chunk {
                let k = keys[s];
                let row = index.presence.row(k.student, k.domain).expect("present");
                let mut gu = vec![0.0; dim];
                self.heads.backward(k.kind, self.tables[k.domain].row(row), &states[s], &g_states[s], &mut gh, &mut gu);
                rows.push((k.domain, row, gu));
            }
            (gh, rows)
        });
        let mut g_heads = vec![0.0; self.heads.params().len()];
        let mut g_tables: Vec<Matrix> = self.tables.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
        for (gh, rows) in head_parts {
            g_heads.iter_mut().zip(&gh).for_each(|(a, b)| *a += b);
            for (d, row, g) in rows {
                g_tables[d].row_mut(row).iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
        BatchGradient {
            loss,
            model: g_model,
            heads: g_heads,
            tables: g_tables,
        }
    }

    /// Decoupling objective (shared + specific regularizers) on a batch.
    pub fn decoupling_loss(&self, index: &SourceIndex, batch: &[LogRef], lambda_adv: f64, exec: Exec) -> Result<f64> {
        let terms = decoupling_terms(batch, &index.presence, lambda_adv)?;
        let parts = map_chunks(&terms, CHUNK, exec, |chunk| {
            chunk
                .iter()
                .map(|t| {
                    let r = t.log.y - self.predict(index, &t.state, &t.log);
                    t.weight * r * r
                })
                .sum::<f64>()
        });
        Ok(parts.into_iter().sum())
    }
}

pub fn decoupling_terms(batch: &[LogRef], presence: &Presence, lambda_adv: f64) -> Result<Vec<Term>> {
    let mut terms = shared_terms(batch, presence, lambda_adv)?;
    terms.extend(specific_terms(batch, presence, lambda_adv)?);
    Ok(terms)
}

/// Optimizer state for a [`TrainState`].
pub struct Optimizers {
    model: Adam,
    heads: Adam,
    tables: Vec<Adam>,
}

impl Optimizers {
    pub fn new(state: &TrainState, lr: f64) -> Self {
        Self {
            model: Adam::new(state.model.n_params(), lr),
            heads: Adam::new(state.heads.params().len(), lr),
            tables: state.tables.iter().map(|t| Adam::new(t.as_slice().len(), lr)).collect(),
        }
    }

    /// One Adam step on everything followed by the monotonicity projection.
    pub fn step(&mut self, state: &mut TrainState, grad: &BatchGradient) {
        self.model.step(state.model.params_mut(), &grad.model);
        self.heads.step(state.heads.params_mut(), &grad.heads);
        for ((opt, table), g) in self.tables.iter_mut().zip(&mut state.tables).zip(&grad.tables) {
            opt.step(table.as_mut_slice(), g.as_slice());
        }
        state.model.project_monotone();
    }
}

/// Shared and specific state of one student in one source domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoupledState {
    pub sha: Vec<f64>,
    pub spe: Vec<f64>,
}

/// Frozen result of pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedBundle {
    pub config: PretrainConfig,
    pub model: DiagnosticModel,
    pub heads: DecoupleHeads,
    pub source_domains: Vec<String>,
    /// Per source domain: row student ids and the embedding table.
    pub embeddings: BTreeMap<String, (Vec<String>, Matrix)>,
    /// student id -> domain id -> states; present exactly where the student has logs.
    pub states: BTreeMap<String, BTreeMap<String, DecoupledState>>,
    pub history: Vec<EpochStats>,
}

impl PretrainedBundle {
    pub fn from_state(config: PretrainConfig, index: &SourceIndex, state: TrainState, history: Vec<EpochStats>) -> Self {
        let mut states: BTreeMap<String, BTreeMap<String, DecoupledState>> = BTreeMap::new();
        let mut embeddings = BTreeMap::new();
        for (k, did) in index.domain_ids.iter().enumerate() {
            let table = &state.tables[k];
            let ids: Vec<String> = index.domain_students[k].iter().map(|&g| index.students[g].clone()).collect();
            for (row, sid) in ids.iter().enumerate() {
                let (sha, spe) = state.heads.decouple(table.row(row)).expect("dims");
                states
                    .entry(sid.clone())
                    .or_default()
                    .insert(did.clone(), DecoupledState { sha, spe });
            }
            embeddings.insert(did.clone(), (ids, table.clone()));
        }
        Self {
            config,
            model: state.model,
            heads: state.heads,
            source_domains: index.domain_ids.clone(),
            embeddings,
            states,
            history,
        }
    }

    pub fn state(&self, student: &str, domain: &str) -> Option<&DecoupledState> {
        self.states.get(student)?.get(domain)
    }
}

/// Two random logs per (student, domain) go to validation when the student keeps at least one for training.
pub fn validation_split(index: &SourceIndex, rng: &mut ChaCha8Rng) -> (Vec<LogRef>, Vec<LogRef>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for logs in &index.logs {
        let mut by_student: BTreeMap<usize, Vec<LogRef>> = BTreeMap::new();
        for l in logs {
            by_student.entry(l.student).or_default().push(*l);
        }
        for (_, mut ls) in by_student {
            if ls.len() >= 3 {
                ls.shuffle(rng);
                val.extend_from_slice(&ls[..2]);
                train.extend_from_slice(&ls[2..]);
            } else {
                train.extend(ls);
            }
        }
    }
    (train, val)
}

pub fn init_state(index: &SourceIndex, config: &PretrainConfig, k_max: usize) -> Result<TrainState> {
    let shape = ModelShape {
        kind: config.kind,
        dim: config.dim,
        k_max,
        hidden: config.hidden,
    };
    let model = DiagnosticModel::new(shape, config.seed ^ 0x6d6f_6465_6c00)?;
    let heads = DecoupleHeads::new(config.dim, config.seed ^ 0x6865_6164_7300);
    let tables = index
        .domain_students
        .iter()
        .enumerate()
        .map(|(k, ids)| init_student_vecs(ids.len(), config.dim, config.seed.wrapping_add(1 + k as u64)))
        .collect();
    Ok(TrainState { model, heads, tables })
}

fn validate_config(config: &PretrainConfig) -> Result<()> {
    if config.dim == 0 || config.batch_size == 0 {
        return Err(Error::Config("dimension and batch size must be positive".into()));
    }
    if config.lr.is_nan() || config.lr <= 0.0 || !config.lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {}", config.lr)));
    }
    if config.lambda_adv.is_nan() || config.lambda_adv < 0.0 {
        return Err(Error::Config("lambda_adv must be nonnegative".into()));
    }
    Ok(())
}

/// Runs stage 1 and returns the frozen bundle.
pub fn pretrain(index: &SourceIndex, config: &PretrainConfig, k_max: usize, exec: Exec) -> Result<PretrainedBundle> {
    validate_config(config)?;
    let max_k = index.embeddings.iter().map(|e| e.n_concepts()).max().unwrap_or(0);
    if max_k > k_max {
        return Err(Error::Config(format!("k_max {k_max} below source concept count {max_k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut train, val) = validation_split(index, &mut rng);
    let mut state = init_state(index, config, k_max)?;
    let mut opt = Optimizers::new(&state, config.lr);
    let mut history = Vec::new();
    let mut best: Option<(f64, TrainState)> = None;
    let mut stale = 0;

    for epoch in 1..=config.epochs {
        train.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in train.chunks(config.batch_size) {
            let terms = decoupling_terms(batch, &index.presence, config.lambda_adv)?;
            let grad = state.gradient(index, &terms, exec);
            if !grad.loss.is_finite() || !all_finite(&grad.model) || !all_finite(&grad.heads) {
                return Err(Error::Divergence {
                    stage: "pretrain",
                    epoch,
                    detail: format!("batch {} loss {}", batches + 1, grad.loss),
                });
            }
            opt.step(&mut state, &grad);
            total += grad.loss;
            batches += 1;
        }
        let train_loss = total / batches.max(1) as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(state.decoupling_loss(index, &val, config.lambda_adv, exec)?)
        };
        if let Some(v) = val_loss {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    stage: "pretrain",
                    epoch,
                    detail: format!("validation loss {v}"),
                });
            }
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, state.clone()));
                stale = 0;
            } else {
                stale += 1;
                if config.patience > 0 && stale >= config.patience {
                    break;
                }
            }
        }
    }
    let final_state = best.map(|(_, s)| s).unwrap_or(state);
    Ok(PretrainedBundle::from_state(config.clone(), index, final_state, history))
}
