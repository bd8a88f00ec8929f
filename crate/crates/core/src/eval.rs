//! Evaluation harness: scoring manifest splits, per-family reports with
//! optional low-FPR calibration, robustness sweeps, exports and throughput.
//!
//! Every float written to CSV goes through [`sig6`] (six significant
//! digits).

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::corpus::{load_entry_image, Label, Manifest};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{self, ScoreRecord, ECE_BINS};
use crate::model::Detector;
use crate::pca::pca;
use crate::perturb::{perturb, Perturbation};

/// `%.6g`-style formatting: six significant digits, trailing zeros dropped,
/// scientific notation outside `[1e-5, 1e6)`.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim(mantissa.to_string()))
    }
}

fn opt6(x: Option<f64>) -> String {
    x.map(sig6).unwrap_or_default()
}

/// A manifest entry with its decoded image.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub label: u8,
    pub family: String,
    pub split: String,
    pub image: Image,
}

/// Load every entry of `split` (an exact split name or a prefix group such
/// as `eval`), in manifest order.
pub fn load_split(corpus_dir: &Path, manifest: &Manifest, split: &str) -> Result<Vec<Sample>> {
    let idx = manifest.select(split)?;
    idx.par_iter()
        .map(|&i| {
            let e = &manifest.entries[i];
            Ok(Sample {
                id: e.path.clone(),
                label: (e.label == Label::Fake) as u8,
                family: e.family.map(|f| f.to_string()).unwrap_or_else(|| "none".into()),
                split: e.split.clone(),
                image: load_entry_image(corpus_dir, e)?,
            })
        })
        .collect()
}

fn record(s: &Sample, score: f64) -> ScoreRecord {
    ScoreRecord::new(s.id.clone(), s.label, score, s.family.clone())
}

/// Score samples in parallel; output order follows `samples`.
pub fn score_samples(det: &Detector, samples: &[Sample], perturbation: Option<Perturbation>) -> Result<Vec<ScoreRecord>> {
    samples
        .par_iter()
        .map(|s| {
            let score = match perturbation {
                Some(p) => det.score(&perturb(&s.image, p)?)?,
                None => det.score(&s.image)?,
            };
            Ok(record(s, score))
        })
        .collect()
}

pub fn score_with_features(det: &Detector, samples: &[Sample]) -> Result<Vec<(ScoreRecord, Vec<f64>)>> {
    samples
        .par_iter()
        .map(|s| {
            let (score, f) = det.score_and_features(&s.image)?;
            Ok((record(s, score), f))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamilyRow {
    /// Generator family of the fakes in this split.
    pub family: String,
    pub split: String,
    pub n: usize,
    pub acc: f64,
    pub ap: f64,
    pub ece: f64,
    pub tpr: Option<f64>,
    pub rfpr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub split: String,
    pub target_fpr: f64,
    pub samples: usize,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<FamilyRow>,
    pub mean_acc: f64,
    pub mean_ap: f64,
    pub ece: f64,
    pub calibration: Option<Calibration>,
    /// Rates at τ over all records.
    pub tpr: Option<f64>,
    pub rfpr: Option<f64>,
}

/// Calibrate τ on the real scores of `records` at `target_fpr`.
pub fn calibrate(records: &[ScoreRecord], split: &str, target_fpr: f64) -> Result<Calibration> {
    let reals: Vec<f64> = records.iter().filter(|r| r.label == 0).map(|r| r.score).collect();
    let tau = metrics::threshold_at_fpr(&reals, target_fpr)?;
    Ok(Calibration {
        split: split.to_string(),
        target_fpr,
        samples: reals.len(),
        tau,
    })
}

/// One row per distinct split among `samples` (in first-seen order) plus
/// the arithmetic means; rates at τ when a calibration is given.
pub fn evaluate(samples: &[Sample], records: &[ScoreRecord], calibration: Option<Calibration>) -> Result<EvalReport> {
    if samples.len() != records.len() || records.is_empty() {
        return Err(Error::InvalidArgument("records do not match samples".into()));
    }
    let mut splits: Vec<&str> = Vec::new();
    for s in samples {
        if !splits.contains(&s.split.as_str()) {
            splits.push(&s.split);
        }
    }
    let tau = calibration.as_ref().map(|c| c.tau);
    let mut rows = Vec::new();
    for split in splits {
        let group: Vec<ScoreRecord> = samples
            .iter()
            .zip(records)
            .filter(|(s, _)| s.split == split)
            .map(|(_, r)| r.clone())
            .collect();
        let family = group
            .iter()
            .find(|r| r.label == 1)
            .map(|r| r.family.clone())
            .unwrap_or_else(|| "none".into());
        let rates = tau.map(|t| metrics::tpr_rfpr_at(&group, t));
        rows.push(FamilyRow {
            family,
            split: split.to_string(),
            n: group.len(),
            acc: metrics::accuracy(&group, 0.5)?,
            ap: metrics::average_precision(&group)?,
            ece: metrics::ece(&group, ECE_BINS)?,
            tpr: rates.and_then(|r| r.tpr),
            rfpr: rates.and_then(|r| r.rfpr),
        });
    }
    let k = rows.len() as f64;
    let rates = tau.map(|t| metrics::tpr_rfpr_at(records, t));
    Ok(EvalReport {
        mean_acc: rows.iter().map(|r| r.acc).sum::<f64>() / k,
        mean_ap: rows.iter().map(|r| r.ap).sum::<f64>() / k,
        ece: metrics::ece(records, ECE_BINS)?,
        rows,
        calibration,
        tpr: rates.and_then(|r| r.tpr),
        rfpr: rates.and_then(|r| r.rfpr),
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let tau = self.calibration.as_ref().map(|c| c.tau);
        let mut out = String::from("row,split,n,acc,ap,ece,tau,tpr,rfpr\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.family,
                r.split,
                r.n,
                sig6(r.acc),
                sig6(r.ap),
                sig6(r.ece),
                opt6(tau),
                opt6(r.tpr),
                opt6(r.rfpr)
            );
        }
        let n: usize = self.rows.iter().map(|r| r.n).sum();
        let _ = writeln!(
            out,
            "mean,all,{n},{},{},{},{},{},{}",
            sig6(self.mean_acc),
            sig6(self.mean_ap),
            sig6(self.ece),
            opt6(tau),
            opt6(self.tpr),
            opt6(self.rfpr)
        );
        out
    }
}

pub fn logits_csv(records: &[ScoreRecord]) -> String {
    let mut out = String::from("id,label,score,family\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{}", r.id, r.label, sig6(r.score), r.family);
    }
    out
}

/// Project fused features onto their top-`k` principal components.
pub fn features_pca_csv(scored: &[(ScoreRecord, Vec<f64>)], k: usize, seed: u64) -> Result<String> {
    let rows: Vec<Vec<f64>> = scored.iter().map(|(_, f)| f.clone()).collect();
    let p = pca(&rows, k, seed)?;
    let mut out = String::from("id,label,family");
    for j in 1..=k {
        let _ = write!(out, ",pc{j}");
    }
    out.push('\n');
    for ((r, _), proj) in scored.iter().zip(&p.projected) {
        let _ = write!(out, "{},{},{}", r.id, r.label, r.family);
        for v in proj {
            let _ = write!(out, ",{}", sig6(*v));
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustRow {
    pub perturbation: Perturbation,
    pub acc: f64,
    pub ap: f64,
}

pub fn robustness_sweep(det: &Detector, samples: &[Sample], grid: &[Perturbation]) -> Result<Vec<RobustRow>> {
    grid.iter()
        .map(|&p| {
            let recs = score_samples(det, samples, Some(p))?;
            Ok(RobustRow {
                perturbation: p,
                acc: metrics::accuracy(&recs, 0.5)?,
                ap: metrics::average_precision(&recs)?,
            })
        })
        .collect()
}

pub fn robustness_csv(rows: &[RobustRow]) -> String {
    let mut out = String::from("kind,level,acc,ap\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.perturbation.kind(),
            sig6(r.perturbation.level()),
            sig6(r.acc),
            sig6(r.ap)
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub params_total: usize,
    pub params_trainable: usize,
    pub images: usize,
    pub seconds: f64,
    pub images_per_sec: f64,
}

/// Sequential single-image forward throughput over `n` images (cycling
/// through `images`) after `warmup` untimed passes.
pub fn bench_forward(det: &Detector, images: &[Image], n: usize, warmup: usize) -> Result<BenchReport> {
    if n == 0 || images.is_empty() {
        return Err(Error::InvalidArgument("bench needs n >= 1 and at least one image".into()));
    }
    for i in 0..warmup {
        det.score(&images[i % images.len()])?;
    }
    let start = Instant::now();
    for i in 0..n {
        std::hint::black_box(det.score(&images[i % images.len()])?);
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(BenchReport {
        params_total: det.total_count(),
        params_trainable: det.trainable_count(),
        images: n,
        seconds,
        images_per_sec: n as f64 / seconds,
    })
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        format!(
            "params_total,params_trainable,images,seconds,images_per_sec\n{},{},{},{},{}\n",
            self.params_total,
            self.params_trainable,
            self.images,
            sig6(self.seconds),
            sig6(self.images_per_sec)
        )
    }
}
