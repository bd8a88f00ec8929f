//! Score and feature exports plus the throughput report, from a checkpoint
//! saved to disk and loaded back.
//!
//! cargo run --release --example export_and_bench

use himix::config::RunConfig;
use himix::corpus::{build_corpus, Manifest};
use himix::eval::{bench_forward, features_pca_csv, load_split, logits_csv, score_samples, score_with_features};
use himix::model::Detector;
use himix::pipeline::{file_hash, load_train_data, train_run};

fn main() -> himix::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.set("corpus.train_real", "96")?;
    cfg.set("corpus.train_fake", "96")?;
    cfg.set("corpus.eval_per_family", "10")?;
    cfg.set("train.epochs", "1")?;
    cfg.set("pretext.enabled", "off")?;
    let dir = tempfile::tempdir().expect("temp dir");
    build_corpus(&cfg.corpus(), dir.path())?;
    let run = train_run(&cfg, &load_train_data(dir.path())?, None, &mut std::io::sink())?;
    let ckpt = dir.path().join("checkpoint.hxc");
    run.detector.save(&ckpt)?;
    println!("checkpoint sha256 {}", file_hash(&ckpt)?);
    let det = Detector::load(&ckpt)?;

    let samples = load_split(dir.path(), &Manifest::load(dir.path())?, "eval")?;
    let logits = logits_csv(&score_samples(&det, &samples, None)?);
    println!("{}", logits.lines().take(4).collect::<Vec<_>>().join("\n"));
    let features = features_pca_csv(&score_with_features(&det, &samples)?, 2, cfg.stage_seed("eval"))?;
    println!("{}", features.lines().take(4).collect::<Vec<_>>().join("\n"));

    let images: Vec<_> = samples.into_iter().map(|s| s.image).collect();
    print!("{}", bench_forward(&det, &images, 32, 4)?.to_csv());
    Ok(())
}
