//! Mixed real/fake batches and the bimodal Beta(0.1, 0.1) mixing weight.
//!
//! cargo run --release --example mixup_batches

use himix::augment::{compose_batch, sample_lambda, MixupConfig, Provenance};
use himix::corpus::{gen_fake, gen_real_from_seed, Family, FakeParams};
use himix::rng::stream;

fn main() -> himix::Result<()> {
    let reals: Vec<_> = (0..8).map(|s| gen_real_from_seed(s, 64)).collect::<Result<_, _>>()?;
    let fakes: Vec<_> = (0..8).map(|s| gen_fake(Family::A, 100 + s, 64, &FakeParams::default())).collect::<Result<_, _>>()?;
    let cfg = MixupConfig::default();
    let mut rng = stream(7, "example.batch", 0);
    let batch = compose_batch(&reals.iter().collect::<Vec<_>>(), &fakes.iter().collect::<Vec<_>>(), 16, &cfg, 8, &mut rng)?;
    for s in &batch {
        let tag = match s.provenance {
            Provenance::Natural => "real".to_string(),
            Provenance::Synthetic => "fake".to_string(),
            Provenance::Mixed => format!("mixed, lambda {:.3}", s.lambda.unwrap()),
            Provenance::Control => "control".to_string(),
        };
        println!("label {}  {tag}", s.label);
    }

    let mut hist = [0usize; 10];
    let mut rng = stream(7, "example.lambda", 0);
    for _ in 0..100_000 {
        let l = sample_lambda(0.1, &mut rng)?;
        hist[((l * 10.0) as usize).min(9)] += 1;
    }
    println!("lambda histogram over tenths: {hist:?}");
    Ok(())
}
