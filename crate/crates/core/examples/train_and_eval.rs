//! Full pipeline at reduced scale: corpus, pretext pretraining, detection
//! training, then a per-family report with a threshold calibrated on
//! family-A reals.
//!
//! cargo run --release --example train_and_eval [train-per-class] [epochs]

use himix::config::RunConfig;
use himix::corpus::build_corpus;
use himix::pipeline::{evaluate_split, load_train_data, train_run};

fn main() -> himix::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n = args.get(1).map(String::as_str).unwrap_or("300");
    let epochs = args.get(2).map(String::as_str).unwrap_or("3");
    let mut cfg = RunConfig::default();
    cfg.set("corpus.train_real", n)?;
    cfg.set("corpus.train_fake", n)?;
    cfg.set("corpus.eval_per_family", "100")?;
    cfg.set("train.epochs", epochs)?;
    cfg.set("pretext.epochs", "2")?;

    let dir = tempfile::tempdir().expect("temp dir");
    build_corpus(&cfg.corpus(), dir.path())?;
    let data = load_train_data(dir.path())?;
    let mut log = Vec::new();
    let run = train_run(&cfg, &data, None, &mut log)?;
    if let Some(p) = &run.pretext {
        println!("pretext held-out accuracy {:.3}", p.heldout_accuracy);
    }
    println!("epoch losses {:.4?}", run.summary.epoch_losses);

    let (report, _, warnings) = evaluate_split(&run.detector, dir.path(), "eval", Some((0.01, "eval-A")))?;
    for w in warnings {
        println!("warning: {w}");
    }
    print!("{}", report.to_csv());
    Ok(())
}
