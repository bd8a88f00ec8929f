//! Generate a small corpus, list its splits and print the content hash.
//!
//! cargo run --release --example procedural_corpus

use himix::config::RunConfig;
use himix::corpus::{build_corpus, corpus_hash, gen_fake, gen_real_from_seed, Family, FakeParams, RealParams};

fn main() -> himix::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.set("corpus.train_real", "40")?;
    cfg.set("corpus.train_fake", "40")?;
    cfg.set("corpus.eval_per_family", "10")?;
    let dir = tempfile::tempdir().expect("temp dir");
    let manifest = build_corpus(&cfg.corpus(), dir.path())?;
    for (split, idx) in manifest.splits() {
        println!("{split:8} {} images", idx.len());
    }
    println!("hash {}", corpus_hash(dir.path())?);

    // a real image and one fake per family from the same seed
    let real = gen_real_from_seed(3, 64)?;
    println!("real: blur sigma {}", RealParams::from_seed(3).sigma());
    for f in Family::ALL {
        let fake = gen_fake(f, 3, 64, &FakeParams::default())?;
        let mse: f64 = real
            .pixels()
            .iter()
            .zip(fake.pixels())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / real.pixels().len() as f64;
        println!("family {f}: mean squared difference to the real {mse:.2e}");
    }
    Ok(())
}
