//! Command-line front end. Exit codes: 0 ok, 2 config, 3 I/O, 4 numeric abort.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use himix::config::RunConfig;
use himix::corpus::{build_corpus, corpus_hash, Manifest};
use himix::eval;
use himix::model::Detector;
use himix::pipeline::{self, Study, CHECKPOINT_FILE, LOG_FILE};
use himix::{Error, Result};

#[derive(Parser)]
#[command(name = "himix", version, about = "Desk-scale synthetic image detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines); defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Scoring {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Split name or prefix group; defaults to the config's `eval.split`.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the procedural corpus and print its content hash.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretext pretraining then detection training.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip backbone pretraining.
        #[arg(long)]
        no_pretext: bool,
        /// Module switch such as `mda=off`; repeatable.
        #[arg(long = "toggle")]
        toggles: Vec<String>,
    },
    /// Per-family report, optionally with a threshold calibrated at a target FPR.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
        #[arg(long)]
        calibrate_fpr: Option<f64>,
        /// Split whose reals set the threshold; defaults to the evaluated split.
        #[arg(long)]
        calibrate_on: Option<String>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Module-toggle grid, alpha sweep and data-fraction sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to some studies (toggles, alpha, data); repeatable.
        #[arg(long = "study")]
        studies: Vec<String>,
    },
    /// Accuracy and AP under blur and compression.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter counts and forward throughput.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-sample scores as CSV.
    ExportLogits {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fused features projected on their principal components.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn refuse(path: &Path) -> Error {
    Error::io(
        path,
        std::io::Error::new(std::io::ErrorKind::AlreadyExists, "already exists; pass --force to overwrite"),
    )
}

/// Create `dir`, refusing a non-empty existing one unless forced.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let empty = dir.is_dir() && fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_none();
        if !empty && !force {
            return Err(refuse(dir));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(refuse(path));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn split_of(scoring: &Scoring, cfg: &RunConfig) -> String {
    scoring.split.clone().unwrap_or_else(|| cfg.eval_split().to_string())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenCorpus { common, out } => {
            let cfg = load_config(&common)?;
            prepare_dir(&out, common.force)?;
            build_corpus(&cfg.corpus(), &out)?;
            cfg.write_resolved(&out)?;
            println!("{}", corpus_hash(&out)?);
        }
        Cmd::Train {
            common,
            corpus,
            out,
            no_pretext,
            toggles,
        } => {
            let mut cfg = load_config(&common)?;
            let mut t = cfg.toggles();
            for a in &toggles {
                t.apply(a).map_err(|e| Error::Config(e.to_string()))?;
            }
            cfg.set_toggles(t);
            if no_pretext {
                cfg.set("pretext.enabled", "off")?;
            }
            cfg.validate()?;
            Manifest::load(&corpus)?;
            prepare_dir(&out, common.force)?;
            cfg.write_resolved(&out)?;
            let data = pipeline::load_train_data(&corpus)?;
            let log_path = out.join(LOG_FILE);
            let mut log = BufWriter::new(fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
            let result = pipeline::train_run(&cfg, &data, None, &mut log);
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            let run = result?;
            let ckpt = out.join(CHECKPOINT_FILE);
            run.detector.save(&ckpt)?;
            if let Some(p) = &run.pretext {
                eprintln!("pretext held-out accuracy {}", eval::sig6(p.heldout_accuracy));
            }
            if let Some(l) = run.summary.epoch_losses.last() {
                eprintln!("final epoch loss {}", eval::sig6(*l));
            }
            println!("{}", pipeline::file_hash(&ckpt)?);
        }
        Cmd::Eval {
            common,
            scoring,
            calibrate_fpr,
            calibrate_on,
            out,
        } => {
            let cfg = load_config(&common)?;
            let split = split_of(&scoring, &cfg);
            if calibrate_on.is_some() && calibrate_fpr.is_none() {
                return Err(Error::Config("--calibrate-on needs --calibrate-fpr".into()));
            }
            let det = Detector::load(&scoring.checkpoint)?;
            let on = calibrate_on.unwrap_or_else(|| split.clone());
            let (report, _, warnings) =
                pipeline::evaluate_split(&det, &scoring.corpus, &split, calibrate_fpr.map(|f| (f, on.as_str())))?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            match out {
                Some(p) => write_file(&p, &report.to_csv(), common.force)?,
                None => print!("{}", report.to_csv()),
            }
        }
        Cmd::Ablate {
            common,
            corpus,
            out,
            studies,
        } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            let studies = if studies.is_empty() {
                Study::ALL.to_vec()
            } else {
                studies.iter().map(|s| Study::parse(s)).collect::<Result<_>>()?
            };
            Manifest::load(&corpus)?;
            prepare_dir(&out, common.force)?;
            cfg.write_resolved(&out)?;
            let rows = pipeline::ablate(&cfg, &corpus, &studies, &mut std::io::stderr())?;
            for (name, csv) in pipeline::ablation_csvs(&rows) {
                write_file(&out.join(format!("{name}.csv")), &csv, true)?;
            }
        }
        Cmd::Robustness { common, scoring, out } => {
            let cfg = load_config(&common)?;
            let det = Detector::load(&scoring.checkpoint)?;
            let manifest = Manifest::load(&scoring.corpus)?;
            let samples = eval::load_split(&scoring.corpus, &manifest, &split_of(&scoring, &cfg))?;
            let rows = eval::robustness_sweep(&det, &samples, &cfg.robustness_grid())?;
            write_file(&out, &eval::robustness_csv(&rows), common.force)?;
        }
        Cmd::Bench {
            common,
            checkpoint,
            corpus,
            split,
            out,
        } => {
            let cfg = load_config(&common)?;
            let det = Detector::load(&checkpoint)?;
            let images = pipeline::split_images(&corpus, split.as_deref().unwrap_or(cfg.eval_split()))?;
            let (n, warmup) = cfg.bench();
            let report = eval::bench_forward(&det, &images, n, warmup)?;
            match out {
                Some(p) => write_file(&p, &report.to_csv(), common.force)?,
                None => print!("{}", report.to_csv()),
            }
        }
        Cmd::ExportLogits { common, scoring, out } => {
            let cfg = load_config(&common)?;
            let det = Detector::load(&scoring.checkpoint)?;
            let manifest = Manifest::load(&scoring.corpus)?;
            let samples = eval::load_split(&scoring.corpus, &manifest, &split_of(&scoring, &cfg))?;
            let records = eval::score_samples(&det, &samples, None)?;
            write_file(&out, &eval::logits_csv(&records), common.force)?;
        }
        Cmd::ExportFeatures { common, scoring, out } => {
            let cfg = load_config(&common)?;
            let det = Detector::load(&scoring.checkpoint)?;
            let manifest = Manifest::load(&scoring.corpus)?;
            let samples = eval::load_split(&scoring.corpus, &manifest, &split_of(&scoring, &cfg))?;
            let scored = eval::score_with_features(&det, &samples)?;
            let csv = eval::features_pca_csv(&scored, cfg.pca_k(), cfg.stage_seed("eval"))?;
            write_file(&out, &csv, common.force)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
