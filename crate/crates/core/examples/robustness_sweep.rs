//! Accuracy and AP of a briefly trained detector under blur and the
//! block-DCT compression proxy.
//!
//! cargo run --release --example robustness_sweep

use himix::config::RunConfig;
use himix::corpus::{build_corpus, Manifest};
use himix::eval::{load_split, robustness_csv, robustness_sweep};
use himix::perturb::Perturbation;
use himix::pipeline::{load_train_data, train_run};

fn main() -> himix::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.set("corpus.train_real", "160")?;
    cfg.set("corpus.train_fake", "160")?;
    cfg.set("corpus.eval_per_family", "40")?;
    cfg.set("train.epochs", "2")?;
    cfg.set("pretext.epochs", "1")?;
    let dir = tempfile::tempdir().expect("temp dir");
    build_corpus(&cfg.corpus(), dir.path())?;
    let run = train_run(&cfg, &load_train_data(dir.path())?, None, &mut std::io::sink())?;

    let samples = load_split(dir.path(), &Manifest::load(dir.path())?, "eval-A")?;
    let rows = robustness_sweep(&run.detector, &samples, &Perturbation::default_grid())?;
    print!("{}", robustness_csv(&rows));
    Ok(())
}
