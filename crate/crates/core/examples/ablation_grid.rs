//! The eight module-toggle arms on a small corpus, one seed, as CSV.
//!
//! cargo run --release --example ablation_grid

use himix::config::RunConfig;
use himix::corpus::build_corpus;
use himix::pipeline::{ablate, ablation_csvs, Study};

fn main() -> himix::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.set("corpus.train_real", "128")?;
    cfg.set("corpus.train_fake", "128")?;
    cfg.set("corpus.eval_per_family", "40")?;
    cfg.set("train.epochs", "2")?;
    cfg.set("pretext.epochs", "1")?;
    let dir = tempfile::tempdir().expect("temp dir");
    build_corpus(&cfg.corpus(), dir.path())?;
    let rows = ablate(&cfg, dir.path(), &[Study::Toggles], &mut std::io::stderr())?;
    for (name, csv) in ablation_csvs(&rows) {
        println!("== {name}.csv");
        print!("{csv}");
    }
    Ok(())
}
