//! Accuracy, AP, ECE and a threshold calibrated at 1% FPR on synthetic scores.
//!
//! cargo run --release --example metrics_report

use himix::metrics::{accuracy, average_precision, ece, threshold_at_fpr, tpr_rfpr_at, ScoreRecord, ECE_BINS};
use himix::rng::stream;
use rand::Rng;

fn main() -> himix::Result<()> {
    let mut rng = stream(3, "example.scores", 0);
    let records: Vec<ScoreRecord> = (0..2000)
        .map(|i| {
            let label = (i % 2) as u8;
            let center = if label == 1 { 0.7 } else { 0.3 };
            let s: f64 = (center + 0.2 * (rng.random::<f64>() - 0.5) * 2.0).clamp(0.0, 1.0);
            ScoreRecord::new(format!("{i:05}"), label, s, if label == 1 { "A" } else { "none" })
        })
        .collect();
    println!("acc@0.5 {:.4}", accuracy(&records, 0.5)?);
    println!("AP      {:.4}", average_precision(&records)?);
    println!("ECE     {:.4}", ece(&records, ECE_BINS)?);
    let reals: Vec<f64> = records.iter().filter(|r| r.label == 0).map(|r| r.score).collect();
    let tau = threshold_at_fpr(&reals, 0.01)?;
    let rates = tpr_rfpr_at(&records, tau);
    println!("tau@1%  {tau:.4}  TPR {:?}  RFPR {:?}", rates.tpr, rates.rfpr);
    Ok(())
}
