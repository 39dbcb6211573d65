//! JSON checkpoint: metadata, named parameter arrays, decoupled source states
//! and, after adaptation, the target-domain states.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{FinetuneConfig, FinetuneOutcome, TargetStates};
use crate::cdm::{DiagnosticModel, ModelShape};
use crate::data::DomainRole;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::pretrain::{DecoupleHeads, DecoupledState, EpochStats, PretrainConfig, PretrainedBundle};

pub const FORMAT_VERSION: u32 = 1;
const EMBEDDING_PREFIX: &str = "embedding.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub id: String,
    pub role: DomainRole,
    pub students: usize,
    pub questions: usize,
    pub concepts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub seed: u64,
    /// Student-state dimension.
    pub dim: usize,
    pub k_max: usize,
    pub hyperparams: PretrainConfig,
    pub domains: Vec<DomainEntry>,
    pub source_domains: Vec<String>,
    /// Student id of each row of every `embedding.<domain>` table.
    pub embedding_rows: BTreeMap<String, Vec<String>>,
    pub corpus_digest: String,
    pub config_digest: String,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetStateRecord {
    pub state: Vec<f64>,
    pub refined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub domain_id: String,
    pub config_digest: String,
    pub early_bird_fraction: f64,
    pub peer_count: usize,
    pub early_bird_finetune: FinetuneConfig,
    pub cold_start_finetune: FinetuneConfig,
    pub early_bird_outcome: FinetuneOutcome,
    pub cold_start_outcome: FinetuneOutcome,
    pub early_bird_ids: Vec<String>,
    pub unseen_ids: Vec<String>,
    pub reference_domains: BTreeMap<String, String>,
    pub n_simulated: usize,
    pub students: BTreeMap<String, TargetStateRecord>,
}

impl TargetRecord {
    pub fn states(&self, dim: usize) -> Result<TargetStates> {
        let students: Vec<String> = self.students.keys().cloned().collect();
        let mut states = Matrix::zeros(students.len(), dim);
        let mut refined = Vec::with_capacity(students.len());
        for (row, rec) in self.students.values().enumerate() {
            if rec.state.len() != dim {
                return Err(Error::Dimension(format!("target state of length {}, expected {dim}", rec.state.len())));
            }
            states.row_mut(row).copy_from_slice(&rec.state);
            refined.push(rec.refined);
        }
        Ok(TargetStates {
            domain_id: self.domain_id.clone(),
            students,
            states,
            refined,
        })
    }

    pub fn record_states(states: &TargetStates) -> BTreeMap<String, TargetStateRecord> {
        states
            .students
            .iter()
            .enumerate()
            .map(|(row, s)| {
                (
                    s.clone(),
                    TargetStateRecord {
                        state: states.states.row(row).to_vec(),
                        refined: states.refined[row],
                    },
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Vec<f64>>,
    pub states: BTreeMap<String, BTreeMap<String, DecoupledState>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_states: Option<TargetRecord>,
}

impl Checkpoint {
    pub fn from_bundle(
        bundle: &PretrainedBundle,
        k_max: usize,
        domains: Vec<DomainEntry>,
        corpus_digest: String,
        config_digest: String,
    ) -> Self {
        let mut params = bundle.model.named_params();
        params.extend(bundle.heads.named_params());
        let mut embedding_rows = BTreeMap::new();
        for (d, (ids, table)) in &bundle.embeddings {
            params.insert(format!("{EMBEDDING_PREFIX}{d}"), table.as_slice().to_vec());
            embedding_rows.insert(d.clone(), ids.clone());
        }
        Self {
            meta: CheckpointMeta {
                format: FORMAT_VERSION,
                seed: bundle.config.seed,
                dim: bundle.config.dim,
                k_max,
                hyperparams: bundle.config.clone(),
                domains,
                source_domains: bundle.source_domains.clone(),
                embedding_rows,
                corpus_digest,
                config_digest,
                history: bundle.history.clone(),
            },
            params,
            states: bundle.states.clone(),
            target_states: None,
        }
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            kind: self.meta.hyperparams.kind,
            dim: self.meta.dim,
            k_max: self.meta.k_max,
            hidden: self.meta.hyperparams.hidden,
        }
    }

    pub fn model(&self) -> Result<DiagnosticModel> {
        DiagnosticModel::from_named_params(self.shape(), &self.params)
    }

    /// Rebuilds the frozen stage-1 bundle and checks that every array has the declared shape.
    pub fn bundle(&self) -> Result<PretrainedBundle> {
        if self.meta.format != FORMAT_VERSION {
            return Err(Error::Validation(format!("unsupported checkpoint format {}", self.meta.format)));
        }
        let dim = self.meta.dim;
        let model = self.model()?;
        let heads = DecoupleHeads::from_named_params(dim, &self.params)?;
        let mut embeddings = BTreeMap::new();
        for d in &self.meta.source_domains {
            let ids = self
                .meta
                .embedding_rows
                .get(d)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks student rows of domain {d}")))?;
            let key = format!("{EMBEDDING_PREFIX}{d}");
            let flat = self
                .params
                .get(&key)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks parameter `{key}`")))?;
            if flat.len() != ids.len() * dim {
                return Err(Error::Dimension(format!("`{key}` has {} values for {} rows", flat.len(), ids.len())));
            }
            embeddings.insert(d.clone(), (ids.clone(), Matrix::from_vec(ids.len(), dim, flat.clone())));
        }
        for (s, per) in &self.states {
            for (d, st) in per {
                if st.sha.len() != dim || st.spe.len() != dim {
                    return Err(Error::Dimension(format!("state of {s} in {d} is not {dim}-dimensional")));
                }
            }
        }
        Ok(PretrainedBundle {
            config: self.meta.hyperparams.clone(),
            model,
            heads,
            source_domains: self.meta.source_domains.clone(),
            embeddings,
            states: self.states.clone(),
            history: self.meta.history.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)
            .map_err(|e| Error::record(path.display().to_string(), e.line(), e.to_string()))?;
        ck.bundle()?;
        Ok(ck)
    }
}
