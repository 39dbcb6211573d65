use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zerocd_core::cdm::CdmKind;
use zerocd_core::checkpoint::Checkpoint;
use zerocd_core::config::{RunConfig, StageEpochs};
use zerocd_core::pipeline::{self, Corpus, ADAPTED_FILE, CHECKPOINT_FILE};
use zerocd_core::Error;

/// Zero-shot cognitive diagnosis across domains.
#[derive(Parser, Debug)]
#[command(name = "zerocd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-domain corpus with ground truth.
    Synth,
    /// Pre-train on the source domains and write a checkpoint.
    Pretrain,
    /// Adapt a pre-trained checkpoint to the target domain.
    Adapt,
    /// Score unseen students plus the Random and Oracle rows.
    Eval,
    /// Recommend questions for one target-domain student.
    Recommend {
        #[arg(long)]
        student: String,
    },
}

#[derive(Args, Debug)]
struct Flags {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Corpus directory.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Checkpoint to read instead of the default one in the output directory.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    target_domain: Option<String>,
    #[arg(long, global = true)]
    cdm: Option<CdmKind>,
    #[arg(long, global = true)]
    peer_count: Option<usize>,
    #[arg(long, global = true)]
    early_bird_frac: Option<f64>,
    #[arg(long, global = true)]
    lambda_adv: Option<f64>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Epochs for every training stage.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Recommendation list size (even).
    #[arg(long, global = true)]
    x: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single-threaded execution for bit-identical reruns.
    #[arg(long, global = true)]
    deterministic: bool,
}

fn build_config(flags: &Flags, synth: bool) -> Result<RunConfig, Error> {
    let mut c = match &flags.config {
        Some(path) => RunConfig::from_file(path)?,
        None if synth => RunConfig::desk_scale(),
        None => RunConfig::default(),
    };
    if let Some(v) = &flags.corpus {
        c.corpus = v.clone();
    }
    if let Some(v) = flags.seed {
        if synth {
            c.synth.seed = v;
        } else {
            c.seed = v;
        }
    }
    if let Some(v) = &flags.target_domain {
        c.target_domain = Some(v.clone());
    }
    if let Some(v) = flags.cdm {
        c.cdm = v;
    }
    if let Some(v) = flags.peer_count {
        c.peer_count = v;
    }
    if let Some(v) = flags.early_bird_frac {
        c.early_bird_fraction = v;
    }
    if let Some(v) = flags.lambda_adv {
        c.lambda_adv = v;
    }
    if let Some(v) = flags.lr {
        c.lr = v;
    }
    if let Some(v) = flags.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = flags.epochs {
        c.epochs = StageEpochs::all(v);
    }
    if let Some(v) = flags.x {
        c.x = v;
    }
    if let Some(v) = &flags.out {
        c.out = v.clone();
    }
    c.deterministic |= flags.deterministic;
    c.validate()?;
    if synth {
        c.synth.validate()?;
    }
    Ok(c)
}

fn checkpoint_path(flags: &Flags, config: &RunConfig, default: &str) -> PathBuf {
    flags.checkpoint.clone().unwrap_or_else(|| config.out.join(default))
}

fn run(cli: &Cli) -> Result<(), Error> {
    let config = build_config(&cli.flags, matches!(cli.command, Command::Synth))?;
    match &cli.command {
        Command::Synth => {
            let dir = pipeline::run_synth(&config)?;
            println!("corpus written to {}", dir.display());
        }
        Command::Pretrain => {
            let corpus = Corpus::load(&config.corpus)?;
            let ck = pipeline::run_pretrain(&config, &corpus)?;
            let path = pipeline::save_checkpoint(&config, CHECKPOINT_FILE, &ck)?;
            let last = ck.meta.history.last();
            println!(
                "pre-trained {} on {} source domain(s), {} epoch(s); checkpoint {}",
                ck.meta.hyperparams.kind,
                ck.meta.source_domains.len(),
                last.map_or(0, |h| h.epoch),
                path.display()
            );
        }
        Command::Adapt => {
            let corpus = Corpus::load(&config.corpus)?;
            let ck = Checkpoint::load(checkpoint_path(&cli.flags, &config, CHECKPOINT_FILE))?;
            let run = pipeline::run_adapt(&config, &corpus, &ck)?;
            let path = pipeline::save_checkpoint(&config, ADAPTED_FILE, &run.checkpoint)?;
            let csv = pipeline::save_simulated(&config, &run.simulated)?;
            let rec = run.checkpoint.target_states.as_ref().expect("adapted");
            if rec.cold_start_outcome.skipped {
                eprintln!("warning: no simulated logs; unseen students keep their averaged states");
            }
            println!(
                "adapted {}: {} early bird(s), {} unseen, {} simulated log(s)",
                rec.domain_id,
                rec.early_bird_ids.len(),
                rec.unseen_ids.len(),
                rec.n_simulated
            );
            println!("checkpoint {}\nsimulated logs {}", path.display(), csv.display());
        }
        Command::Eval => {
            let corpus = Corpus::load(&config.corpus)?;
            let ck = Checkpoint::load(checkpoint_path(&cli.flags, &config, ADAPTED_FILE))?;
            let report = pipeline::run_eval(&config, &corpus, &ck)?;
            pipeline::save_report(&config, &report)?;
            print!("{}", report.to_text());
        }
        Command::Recommend { student } => {
            let corpus = Corpus::load(&config.corpus)?;
            let ck = Checkpoint::load(checkpoint_path(&cli.flags, &config, ADAPTED_FILE))?;
            let list = pipeline::run_recommend(&config, &corpus, &ck, student)?;
            let path = config.out.join(format!("recommend_{}.json", sanitize(student)));
            std::fs::create_dir_all(&config.out).map_err(|e| io_error(&config.out, e))?;
            std::fs::write(&path, list.to_json()?).map_err(|e| io_error(&path, e))?;
            print!("{}", list.to_text());
        }
    }
    Ok(())
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        e if e.is_numeric() => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
