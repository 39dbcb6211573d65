//! ACC / AUC / RMSE, Spearman correlation, the Random and Oracle reference rows
//! and the experiment report.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cdm::{CdmKind, ConceptCtx, DiagnosticModel, ModelShape};
use crate::data::DomainDataset;
use crate::embed::{init_student_vecs, DomainEmbedding};
use crate::error::{Error, Result};
use crate::linalg::all_finite;
use crate::optim::Adam;
use crate::par::{map_chunks, Exec, CHUNK};

fn check_pair(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Precondition("no predictions to score".into()));
    }
    if !all_finite(preds) {
        return Err(Error::NonFinite("prediction".into()));
    }
    Ok(())
}

/// Fraction of predictions on the right side of 0.5 (0.5 itself counts as class 1).
pub fn acc(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels)?;
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p >= 0.5) == (y >= 0.5))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn rmse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels)?;
    let se: f64 = preds.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok((se / preds.len() as f64).sqrt())
}

/// 1-based ranks with ties sharing the mean rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney concordance with half credit for tied pairs.
pub fn auc(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels)?;
    let n_pos = labels.iter().filter(|&&y| y >= 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined);
    }
    let ranks = average_ranks(preds);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y >= 0.5).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Precondition("correlation of a constant series".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    if !all_finite(b) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Unseen,
    EarlyBird,
    All,
}

impl std::fmt::Display for Cohort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Cohort::Unseen => "unseen",
            Cohort::EarlyBird => "early_bird",
            Cohort::All => "all",
        })
    }
}

/// One scored row of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub cohort: Cohort,
    pub n_logs: usize,
    pub acc: f64,
    pub auc: f64,
    pub rmse: f64,
    pub config_digest: String,
}

impl EvalReport {
    pub fn score(name: &str, cohort: Cohort, preds: &[f64], labels: &[f64], config_digest: &str) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            cohort,
            n_logs: preds.len(),
            acc: acc(preds, labels)?,
            auc: auc(preds, labels)?,
            rmse: rmse(preds, labels)?,
            config_digest: config_digest.to_string(),
        })
    }
}

/// Uniform(0, 1) predictions scored against `labels`.
pub fn random_baseline(labels: &[f64], seed: u64, cohort: Cohort, config_digest: &str) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let preds: Vec<f64> = labels.iter().map(|_| rng.gen::<f64>()).collect();
    EvalReport::score("Random", cohort, &preds, labels, config_digest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub target_domain: String,
    pub cdm: CdmKind,
    pub corpus_digest: String,
    pub config_digest: String,
    pub rows: Vec<EvalReport>,
}

impl ExperimentReport {
    pub fn row(&self, name: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "target {}  cdm {}", self.target_domain, self.cdm);
        let _ = writeln!(
            out,
            "{:<8} {:<10} {:>8} {:>8} {:>8} {:>8}",
            "model", "cohort", "n_logs", "ACC", "AUC", "RMSE"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<8} {:<10} {:>8} {:>8.4} {:>8.4} {:>8.4}",
                r.name,
                r.cohort.to_string(),
                r.n_logs,
                r.acc,
                r.auc,
                r.rmse
            );
        }
        out
    }
}

/// Hyperparameters of the plain (non-decoupled) reference model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub kind: CdmKind,
    pub dim: usize,
    pub hidden: [usize; 2],
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub seed: u64,
}

#[derive(Clone, Copy)]
struct Obs {
    student: usize,
    question: usize,
    y: f64,
}

fn oracle_predict(model: &DiagnosticModel, table: &crate::linalg::Matrix, emb: &DomainEmbedding, masks: &[Vec<f64>], o: &Obs) -> f64 {
    model.forward(table.row(o.student), emb.question_vecs.row(o.question), &ConceptCtx::from(emb), &masks[o.question])
}

/// Trains a plain CDM on real target logs and scores its test split.
pub fn oracle_mode(
    target: &DomainDataset,
    emb: &DomainEmbedding,
    config: &OracleConfig,
    exec: Exec,
    config_digest: &str,
) -> Result<EvalReport> {
    let [ftr, fva, fte] = config.split;
    if ftr.min(fva).min(fte) < 0.0 || ((ftr + fva + fte) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("oracle split fractions {:?} must be nonnegative and sum to 1", config.split)));
    }
    let sidx = target.student_index();
    let qidx = target.question_index();
    let mut obs: Vec<Obs> = target
        .logs
        .iter()
        .map(|l| Obs {
            student: sidx[l.student_id.as_str()],
            question: qidx[l.question_id.as_str()],
            y: l.score as f64,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    obs.shuffle(&mut rng);
    let n = obs.len();
    let n_tr = (ftr * n as f64).round() as usize;
    let n_va = (fva * n as f64).round() as usize;
    if n_tr == 0 || n_tr + n_va >= n {
        return Err(Error::Precondition(format!("{n} target logs are too few for the oracle split")));
    }
    let (mut train, rest) = (obs[..n_tr].to_vec(), &obs[n_tr..]);
    let (val, test) = rest.split_at(n_va);

    let shape = ModelShape {
        kind: config.kind,
        dim: config.dim,
        k_max: emb.n_concepts(),
        hidden: config.hidden,
    };
    let mut model = DiagnosticModel::new(shape, config.seed ^ 0x6f72_6163_6c65)?;
    let mut table = init_student_vecs(target.students.len(), config.dim, config.seed.wrapping_add(17));
    let masks: Vec<Vec<f64>> = (0..emb.question_vecs.rows()).map(|q| emb.question_mask(q)).collect();
    let mut opt_m = Adam::new(model.n_params(), config.lr);
    let mut opt_u = Adam::new(table.as_slice().len(), config.lr);
    let mut best: Option<(f64, DiagnosticModel, crate::linalg::Matrix)> = None;
    let mut stale = 0;
    let dim = config.dim;
    let mse = |model: &DiagnosticModel, table: &crate::linalg::Matrix, set: &[Obs]| {
        set.iter()
            .map(|o| {
                let r = o.y - oracle_predict(model, table, emb, &masks, o);
                r * r
            })
            .sum::<f64>()
            / set.len() as f64
    };
    for epoch in 1..=config.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(config.batch_size.max(1)) {
            let w = 1.0 / batch.len() as f64;
            let parts = map_chunks(batch, CHUNK, exec, |chunk| {
                let mut gp = vec![0.0; model.n_params()];
                let mut gu = Vec::with_capacity(chunk.len());
                for o in chunk {
                    let mut g = vec![0.0; dim];
                    model.accumulate(
                        table.row(o.student),
                        emb.question_vecs.row(o.question),
                        &ConceptCtx::from(emb),
                        &masks[o.question],
                        o.y,
                        w,
                        &mut gp,
                        Some(&mut g),
                    );
                    gu.push((o.student, g));
                }
                (gp, gu)
            });
            let mut gp = vec![0.0; model.n_params()];
            let mut gt = vec![0.0; table.as_slice().len()];
            for (p, us) in parts {
                gp.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
                for (s, g) in us {
                    gt[s * dim..(s + 1) * dim].iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
            }
            if !all_finite(&gp) || !all_finite(&gt) {
                return Err(Error::Divergence {
                    stage: "oracle",
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            opt_m.step(model.params_mut(), &gp);
            opt_u.step(table.as_mut_slice(), &gt);
            model.project_monotone();
        }
        if val.is_empty() {
            continue;
        }
        let v = mse(&model, &table, val);
        if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
            best = Some((v, model.clone(), table.clone()));
            stale = 0;
        } else {
            stale += 1;
            if config.patience > 0 && stale >= config.patience {
                break;
            }
        }
    }
    if let Some((_, m, t)) = best {
        model = m;
        table = t;
    }
    let preds: Vec<f64> = test.iter().map(|o| oracle_predict(&model, &table, emb, &masks, o)).collect();
    let labels: Vec<f64> = test.iter().map(|o| o.y).collect();
    EvalReport::score("Oracle", Cohort::All, &preds, &labels, config_digest)
}
