//! Run configuration shared by every pipeline command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::FinetuneConfig;
use crate::cdm::CdmKind;
use crate::error::{Error, Result};
use crate::metrics::OracleConfig;
use crate::pretrain::PretrainConfig;
use crate::recommend::SelectionMode;
use crate::synth::SynthConfig;

/// Learning rates accepted without `lr_override`.
pub const LR_CHOICES: [f64; 4] = [0.001, 0.002, 0.02, 0.05];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageEpochs {
    pub pretrain: usize,
    pub early_bird: usize,
    pub cold_start: usize,
    pub oracle: usize,
}

impl Default for StageEpochs {
    fn default() -> Self {
        Self {
            pretrain: 30,
            early_bird: 30,
            cold_start: 30,
            oracle: 30,
        }
    }
}

impl StageEpochs {
    pub fn all(n: usize) -> Self {
        Self {
            pretrain: n,
            early_bird: n,
            cold_start: n,
            oracle: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    /// Defaults to the single target domain of the corpus.
    pub target_domain: Option<String>,
    pub cdm: CdmKind,
    pub dim: usize,
    pub hidden: [usize; 2],
    pub lr: f64,
    /// Accept a learning rate outside [`LR_CHOICES`].
    pub lr_override: bool,
    pub batch_size: usize,
    pub epochs: StageEpochs,
    pub patience: usize,
    pub lambda_adv: f64,
    pub early_bird_fraction: f64,
    pub peer_count: usize,
    pub x: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub deterministic: bool,
    /// Train the Oracle reference row during `eval`.
    pub oracle: bool,
    pub recommend_mode: SelectionMode,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus"),
            target_domain: None,
            cdm: CdmKind::NeuralCd,
            dim: 64,
            hidden: [512, 256],
            lr: 0.002,
            lr_override: false,
            batch_size: 256,
            epochs: StageEpochs::default(),
            patience: 5,
            lambda_adv: 0.1,
            early_bird_fraction: 0.01,
            peer_count: 50,
            x: 6,
            seed: 0,
            out: PathBuf::from("out"),
            deterministic: false,
            oracle: true,
            recommend_mode: SelectionMode::Uniform,
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small-network settings suited to the synthetic corpus.
    pub fn desk_scale() -> Self {
        Self {
            hidden: [64, 32],
            early_bird_fraction: 0.05,
            peer_count: 20,
            ..Self::default()
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.hidden.contains(&0) {
            return bad("dimension and hidden sizes must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !self.lr_override && !LR_CHOICES.contains(&self.lr) {
            return bad(format!(
                "learning rate {} not in {:?}; set lr_override to use it anyway",
                self.lr, LR_CHOICES
            ));
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return bad(format!("lambda_adv must be nonnegative, got {}", self.lambda_adv));
        }
        if !(self.early_bird_fraction > 0.0 && self.early_bird_fraction <= 1.0) {
            return bad(format!(
                "early-bird fraction must lie in (0, 1], got {}",
                self.early_bird_fraction
            ));
        }
        if self.peer_count == 0 {
            return bad("peer count must be at least 1".into());
        }
        if self.x < 2 || !self.x.is_multiple_of(2) {
            return bad(format!("recommendation size must be even and at least 2, got {}", self.x));
        }
        Ok(())
    }

    /// SHA-256 of the settings that define the experiment; paths and the
    /// determinism switch are left out so relocated reruns share a digest.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.corpus = PathBuf::new();
        c.out = PathBuf::new();
        c.deterministic = false;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            kind: self.cdm,
            dim: self.dim,
            hidden: self.hidden,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs.pretrain,
            lambda_adv: self.lambda_adv,
            patience: self.patience,
            seed: self.seed,
        }
    }

    pub fn early_bird_finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs.early_bird,
            patience: self.patience,
            holdout: 0.1,
            seed: self.seed.wrapping_add(101),
        }
    }

    pub fn cold_start_finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.epochs.cold_start,
            seed: self.seed.wrapping_add(202),
            ..self.early_bird_finetune()
        }
    }

    pub fn oracle_config(&self) -> OracleConfig {
        OracleConfig {
            kind: self.cdm,
            dim: self.dim,
            hidden: self.hidden,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs.oracle,
            patience: self.patience,
            split: [0.7, 0.1, 0.2],
            seed: self.seed.wrapping_add(303),
        }
    }

    pub fn split_seed(&self) -> u64 {
        self.seed.wrapping_add(404)
    }

    pub fn random_seed(&self) -> u64 {
        self.seed.wrapping_add(505)
    }
}
