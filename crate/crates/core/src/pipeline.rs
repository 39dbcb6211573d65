//! End-to-end commands: synthesize, pre-train, adapt, evaluate, recommend.
//!
//! Each step is a function of `(config, corpus, checkpoint)`; the CLI only adds
//! file handling around them.

use std::fs;
use std::path::{Path, PathBuf};

use crate::adapt::{
    finetune_cold_start, finetune_early_birds, init_target_states, match_peers, simulate_logs, SimulatedLogSet,
    TargetStates, TargetView,
};
use crate::checkpoint::{Checkpoint, DomainEntry, TargetRecord};
use crate::config::RunConfig;
use crate::data::{corpus_digest, load_corpus, make_target_split, write_corpus, DomainDataset, DomainRole, TargetSplit};
use crate::embed::{DomainEmbedding, HashingEncoder};
use crate::error::{Error, Result};
use crate::metrics::{oracle_mode, random_baseline, Cohort, EvalReport, ExperimentReport};
use crate::par::Exec;
use crate::pretrain::{pretrain, SourceIndex};
use crate::recommend::{recommend, RecommendationList};
use crate::synth::{export_truth, generate};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const ADAPTED_FILE: &str = "adapted.json";
pub const SIMULATED_FILE: &str = "simulated_logs.csv";
pub const REPORT_JSON: &str = "eval.json";
pub const REPORT_TEXT: &str = "eval.txt";
pub const TRUTH_FILE: &str = "truth.json";
pub const CONFIG_FILE: &str = "config.json";

/// A loaded corpus and its digest.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub datasets: Vec<DomainDataset>,
    pub digest: String,
}

impl Corpus {
    pub fn new(datasets: Vec<DomainDataset>) -> Self {
        let digest = corpus_digest(&datasets);
        Self { datasets, digest }
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(load_corpus(dir)?))
    }

    pub fn sources(&self) -> Vec<DomainDataset> {
        self.datasets.iter().filter(|d| d.role == DomainRole::Source).cloned().collect()
    }

    /// The requested target domain, or the only one when `id` is `None`.
    pub fn target(&self, id: Option<&str>) -> Result<&DomainDataset> {
        let targets: Vec<&DomainDataset> = self.datasets.iter().filter(|d| d.role == DomainRole::Target).collect();
        match id {
            Some(id) => targets
                .into_iter()
                .find(|d| d.domain_id == id)
                .ok_or_else(|| Error::Validation(format!("corpus has no target domain `{id}`"))),
            None => match targets.as_slice() {
                [one] => Ok(one),
                [] => Err(Error::Validation("corpus has no target domain".into())),
                _ => Err(Error::Config("corpus has several target domains; pass --target-domain".into())),
            },
        }
    }

    /// Largest concept count over every domain, target included.
    pub fn k_max(&self) -> usize {
        self.datasets.iter().map(|d| d.concepts.len()).max().unwrap_or(0)
    }

    pub fn entries(&self) -> Vec<DomainEntry> {
        self.datasets
            .iter()
            .map(|d| DomainEntry {
                id: d.domain_id.clone(),
                role: d.role,
                students: d.students.len(),
                questions: d.questions.len(),
                concepts: d.concepts.len(),
            })
            .collect()
    }
}

fn exec(config: &RunConfig) -> Exec {
    Exec::from_deterministic(config.deterministic)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes a synthetic corpus, its ground truth and a matching run config to `config.out`.
pub fn run_synth(config: &RunConfig) -> Result<PathBuf> {
    let (datasets, truth) = generate(&config.synth, config.synth.seed)?;
    let dir = config.out.clone();
    write_corpus(&datasets, &dir)?;
    export_truth(&truth, dir.join(TRUTH_FILE))?;
    let run = RunConfig {
        corpus: dir.clone(),
        out: dir.join("run"),
        synth: config.synth.clone(),
        ..config.clone()
    };
    write(&dir.join(CONFIG_FILE), run.to_json()?)?;
    Ok(dir)
}

/// Stage 1 over every source domain of the corpus.
pub fn run_pretrain(config: &RunConfig, corpus: &Corpus) -> Result<Checkpoint> {
    config.validate()?;
    let encoder = HashingEncoder::new(config.dim)?;
    let sources = corpus.sources();
    let index = SourceIndex::build(&sources, &encoder)?;
    let k_max = corpus.k_max();
    let bundle = pretrain(&index, &config.pretrain_config(), k_max, exec(config))?;
    Ok(Checkpoint::from_bundle(&bundle, k_max, corpus.entries(), corpus.digest.clone(), config.digest()))
}

fn check_corpus(checkpoint: &Checkpoint, corpus: &Corpus) -> Result<()> {
    if checkpoint.meta.corpus_digest != corpus.digest {
        return Err(Error::Validation(format!(
            "checkpoint was trained on corpus {} but the given corpus digests to {}",
            short(&checkpoint.meta.corpus_digest),
            short(&corpus.digest)
        )));
    }
    Ok(())
}

fn short(d: &str) -> &str {
    &d[..d.len().min(12)]
}

/// Intermediate states of one adaptation run, kept for inspection.
#[derive(Debug, Clone)]
pub struct AdaptRun {
    pub checkpoint: Checkpoint,
    pub split: TargetSplit,
    pub simulated: SimulatedLogSet,
    /// Mean-of-shared-states initialization.
    pub initial: TargetStates,
    /// After early-bird refinement, before the cold-start fine-tune.
    pub refined: TargetStates,
    pub adapted: TargetStates,
}

/// Stage 2: initialize, refine early birds, simulate peer logs, fine-tune unseen students.
pub fn run_adapt(config: &RunConfig, corpus: &Corpus, checkpoint: &Checkpoint) -> Result<AdaptRun> {
    config.validate()?;
    check_corpus(checkpoint, corpus)?;
    let bundle = checkpoint.bundle()?;
    let target = corpus.target(config.target_domain.as_deref())?;
    let encoder = HashingEncoder::new(checkpoint.meta.dim)?;
    let emb = DomainEmbedding::build(target, &encoder)?;
    let view = TargetView::new(&bundle.model, &emb, target);
    let split = make_target_split(target, config.early_bird_fraction, config.split_seed())?;
    let ex = exec(config);

    let initial = init_target_states(&bundle, &target.domain_id, &target.students)?;
    let mut states = initial.clone();
    let eb_cfg = config.early_bird_finetune();
    let eb_outcome = finetune_early_birds(&view, &mut states, &split, &eb_cfg, ex)?;
    let refined = states.clone();
    let matches = match_peers(&bundle, &states, &split, config.peer_count, ex)?;
    let simulated = simulate_logs(&split.early_bird_logs, &matches);
    let cs_cfg = config.cold_start_finetune();
    let cs_outcome = finetune_cold_start(&view, &mut states, &simulated, &cs_cfg, ex)?;

    let mut out = checkpoint.clone();
    out.target_states = Some(TargetRecord {
        domain_id: target.domain_id.clone(),
        config_digest: config.digest(),
        early_bird_fraction: config.early_bird_fraction,
        peer_count: config.peer_count,
        early_bird_finetune: eb_cfg,
        cold_start_finetune: cs_cfg,
        early_bird_outcome: eb_outcome,
        cold_start_outcome: cs_outcome,
        early_bird_ids: split.early_bird_ids.clone(),
        unseen_ids: split.unseen_ids.clone(),
        reference_domains: simulated.reference_domains.clone(),
        n_simulated: simulated.len(),
        students: TargetRecord::record_states(&states),
    });
    Ok(AdaptRun {
        checkpoint: out,
        split,
        simulated,
        initial,
        refined,
        adapted: states,
    })
}

fn adapted(checkpoint: &Checkpoint) -> Result<&TargetRecord> {
    checkpoint
        .target_states
        .as_ref()
        .ok_or_else(|| Error::Precondition("checkpoint has no target states; run `adapt` first".into()))
}

/// Predictions and labels on every real target log of `students`.
pub fn score_cohort(view: &TargetView<'_>, states: &TargetStates, target: &DomainDataset, students: &[String]) -> Result<(Vec<f64>, Vec<f64>)> {
    let wanted: std::collections::HashSet<&str> = students.iter().map(String::as_str).collect();
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for l in target.logs.iter().filter(|l| wanted.contains(l.student_id.as_str())) {
        let u = states
            .state(&l.student_id)
            .ok_or_else(|| Error::UnknownStudent(l.student_id.clone()))?;
        preds.push(view.predict(u, view.question(&l.question_id)?));
        labels.push(l.score as f64);
    }
    if preds.is_empty() {
        return Err(Error::Precondition("no held-out logs for the evaluated cohort".into()));
    }
    Ok((preds, labels))
}

/// Scores unseen students on their real target logs, plus the Random and Oracle rows.
pub fn run_eval(config: &RunConfig, corpus: &Corpus, checkpoint: &Checkpoint) -> Result<ExperimentReport> {
    config.validate()?;
    check_corpus(checkpoint, corpus)?;
    let record = adapted(checkpoint)?;
    let target = corpus.target(Some(&record.domain_id))?;
    let model = checkpoint.model()?;
    let encoder = HashingEncoder::new(checkpoint.meta.dim)?;
    let emb = DomainEmbedding::build(target, &encoder)?;
    let view = TargetView::new(&model, &emb, target);
    let states = record.states(checkpoint.meta.dim)?;
    let digest = config.digest();

    let (preds, labels) = score_cohort(&view, &states, target, &record.unseen_ids)?;
    let mut rows = vec![EvalReport::score("Zero", Cohort::Unseen, &preds, &labels, &digest)?];
    rows.push(random_baseline(&labels, config.random_seed(), Cohort::Unseen, &digest)?);
    if config.oracle {
        rows.push(oracle_mode(target, &emb, &config.oracle_config(), exec(config), &digest)?);
    }
    Ok(ExperimentReport {
        target_domain: target.domain_id.clone(),
        cdm: checkpoint.meta.hyperparams.kind,
        corpus_digest: corpus.digest.clone(),
        config_digest: digest,
        rows,
    })
}

pub fn run_recommend(config: &RunConfig, corpus: &Corpus, checkpoint: &Checkpoint, student: &str) -> Result<RecommendationList> {
    config.validate()?;
    check_corpus(checkpoint, corpus)?;
    let record = adapted(checkpoint)?;
    let target = corpus.target(Some(&record.domain_id))?;
    let model = checkpoint.model()?;
    let encoder = HashingEncoder::new(checkpoint.meta.dim)?;
    let emb = DomainEmbedding::build(target, &encoder)?;
    let view = TargetView::new(&model, &emb, target);
    let states = record.states(checkpoint.meta.dim)?;
    recommend(&view, &states, student, config.x, config.seed, config.recommend_mode)
}

/// Writes the artifacts of one command into `config.out`.
pub fn save_checkpoint(config: &RunConfig, file: &str, checkpoint: &Checkpoint) -> Result<PathBuf> {
    ensure_dir(&config.out)?;
    let path = config.out.join(file);
    checkpoint.save(&path)?;
    Ok(path)
}

pub fn save_simulated(config: &RunConfig, simulated: &SimulatedLogSet) -> Result<PathBuf> {
    ensure_dir(&config.out)?;
    let path = config.out.join(SIMULATED_FILE);
    simulated.write_csv(&path)?;
    Ok(path)
}

pub fn save_report(config: &RunConfig, report: &ExperimentReport) -> Result<(PathBuf, PathBuf)> {
    ensure_dir(&config.out)?;
    let json = config.out.join(REPORT_JSON);
    let text = config.out.join(REPORT_TEXT);
    write(&json, report.to_json()?)?;
    write(&text, report.to_text())?;
    Ok((json, text))
}
