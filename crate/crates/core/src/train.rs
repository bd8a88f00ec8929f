//! Adam, the detection training loop and backbone pretraining.
//!
//! A step builds one graph per sample (in parallel), backpropagates the
//! single-sample BCE, then sums the per-sample gradients in batch order and
//! divides by the batch size. That is exactly the gradient of the batch-mean
//! BCE, and the fixed summation order keeps runs bit-reproducible.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde_json::json;

use crate::augment::{compose_batch, LabeledSample, MixupConfig, MixupMode};
use crate::autodiff::Graph;
use crate::encoder;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::Detector;
use crate::params::{ParamStore, FROZEN_PREFIX};
use crate::rng::stream;
use crate::tensor::Tensor;

pub type Grads = BTreeMap<String, Vec<f64>>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update of every tensor named in `grads`.
pub fn adam_step(params: &mut ParamStore, grads: &Grads, state: &mut AdamState, hyper: &AdamConfig) -> Result<()> {
    for (name, g) in grads {
        let n = params.get(name)?.numel();
        if g.len() != n {
            return Err(Error::shape("adam_step", &[n], &[g.len()]));
        }
        for moments in [&state.m, &state.v] {
            if let Some(buf) = moments.get(name) {
                if buf.len() != n {
                    return Err(Error::shape("adam_step", &[n], &[buf.len()]));
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (name, g) in grads {
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let w = params.get_mut(name)?.data_mut();
        for i in 0..g.len() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            w[i] -= hyper.lr * mh / (vh.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mixup: MixupConfig,
    /// Share of the training pool used (data-size study).
    pub data_fraction: f64,
    /// Grid of the patch-shuffle control augmentation.
    pub shuffle_grid: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 10,
            seed: 7,
            mixup: MixupConfig::default(),
            data_fraction: 1.0,
            shuffle_grid: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data_fraction {} outside (0, 1]",
                self.data_fraction
            )));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.mixup.validate()
    }
}

/// Loss, correct count and summed trainable gradients of one batch.
pub struct BatchResult {
    pub loss: f64,
    pub correct: usize,
    pub grads: Grads,
    /// Per-sample losses, in batch order.
    pub losses: Vec<f64>,
}

/// Forward and backward every sample of `batch` and average the gradients.
pub fn batch_gradients(det: &Detector, batch: &[LabeledSample]) -> Result<BatchResult> {
    let per_sample: Vec<(f64, bool, Grads)> = batch
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let p = det.params.bind(&mut g, true);
            let f = det.forward(&mut g, &p, &s.image)?;
            let y = s.label as f64;
            let loss = g.bce(f.prob, &[y])?;
            let value = g.value(loss).item();
            let prob = g.value(f.prob).item();
            g.backward(loss)?;
            Ok((value, (prob >= 0.5) == (s.label == 1), p.grads(&g)))
        })
        .collect::<Result<_>>()?;
    let b = batch.len() as f64;
    let mut grads: Grads = BTreeMap::new();
    let mut losses = Vec::with_capacity(batch.len());
    let mut correct = 0;
    for (loss, ok, sample) in per_sample {
        losses.push(loss);
        correct += ok as usize;
        for (name, g) in sample {
            match grads.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    grads.values_mut().for_each(|g| g.iter_mut().for_each(|x| *x /= b));
    Ok(BatchResult {
        loss: losses.iter().sum::<f64>() / b,
        correct,
        grads,
        losses,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    /// Loss of the very first batch, before any update.
    pub initial_loss: f64,
    /// Mean batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub epoch_accuracies: Vec<f64>,
}

/// Leading `ceil(fraction · n)` entries of a seeded permutation of `0..n`,
/// but never fewer than `min`.
fn subset(n: usize, fraction: f64, min: usize, seed: u64, tag: &str) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if fraction >= 1.0 {
        return idx;
    }
    idx.shuffle(&mut stream(seed, tag, 0));
    let keep = ((fraction * n as f64).ceil() as usize).max(min).min(n);
    idx.truncate(keep);
    idx
}

/// Train the trainable parameters of `det` on real and fake pools.
///
/// Each epoch shuffles both pools and walks them in consecutive chunks of
/// `ceil(b/2)` reals and `b - ceil(b/2)` fakes; every chunk pair is handed
/// to [`compose_batch`] as that step's pools. One JSON line per step goes
/// to `log`.
pub fn train_detector(
    det: &mut Detector,
    reals: &[Image],
    fakes: &[Image],
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut mixup = cfg.mixup;
    if !det.config.toggles.mda {
        mixup.mode = MixupMode::Off;
    }
    let n_real = cfg.batch_size.div_ceil(2);
    let n_fake = cfg.batch_size - n_real;
    let real_pool = subset(reals.len(), cfg.data_fraction, n_real, cfg.seed, "train.subset.real");
    let fake_pool = subset(fakes.len(), cfg.data_fraction, n_fake, cfg.seed, "train.subset.fake");
    if real_pool.len() < n_real || fake_pool.len() < n_fake {
        return Err(Error::InvalidArgument(format!(
            "training pools ({} real, {} fake) smaller than one batch",
            real_pool.len(),
            fake_pool.len()
        )));
    }
    let steps_per_epoch = (real_pool.len() / n_real).min(fake_pool.len() / n_fake);
    let mut state = AdamState::default();
    let mut summary = TrainSummary::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut r = real_pool.clone();
        let mut f = fake_pool.clone();
        r.shuffle(&mut stream(cfg.seed, "train.shuffle.real", epoch as u64));
        f.shuffle(&mut stream(cfg.seed, "train.shuffle.fake", epoch as u64));
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch_idx in 0..steps_per_epoch {
            let rp: Vec<&Image> = r[batch_idx * n_real..(batch_idx + 1) * n_real]
                .iter()
                .map(|&i| &reals[i])
                .collect();
            let fp: Vec<&Image> = f[batch_idx * n_fake..(batch_idx + 1) * n_fake]
                .iter()
                .map(|&i| &fakes[i])
                .collect();
            let mut rng = stream(cfg.seed, "train.batch", step as u64);
            let batch = compose_batch(&rp, &fp, cfg.batch_size, &mixup, cfg.shuffle_grid, &mut rng)?;
            let res = batch_gradients(det, &batch)?;
            if !res.loss.is_finite() {
                let dump = json!({
                    "event": "diverged",
                    "step": step,
                    "epoch": epoch,
                    "batch": batch_idx,
                    "loss": res.loss.to_string(),
                    "labels": batch.iter().map(|s| s.label).collect::<Vec<_>>(),
                    "lambdas": batch.iter().map(|s| s.lambda).collect::<Vec<_>>(),
                    "sample_losses": res.losses.iter().map(|l| l.to_string()).collect::<Vec<_>>(),
                });
                writeln!(log, "{dump}").map_err(|e| Error::io("<train log>", e))?;
                return Err(Error::Diverged {
                    step,
                    batch: batch_idx,
                    loss: res.loss,
                });
            }
            if step == 0 {
                summary.initial_loss = res.loss;
            }
            let acc = res.correct as f64 / batch.len() as f64;
            writeln!(
                log,
                "{}",
                json!({"step": step, "epoch": epoch, "loss": res.loss, "acc": acc})
            )
            .map_err(|e| Error::io("<train log>", e))?;
            adam_step(&mut det.params, &res.grads, &mut state, &cfg.adam)?;
            loss_sum += res.loss;
            correct += res.correct;
            seen += batch.len();
            step += 1;
        }
        summary.epoch_losses.push(loss_sum / steps_per_epoch.max(1) as f64);
        summary.epoch_accuracies.push(correct as f64 / seen.max(1) as f64);
    }
    summary.steps = step;
    Ok(summary)
}

pub const PRETEXT_W: &str = "pretext.w";
pub const PRETEXT_B: &str = "pretext.b";

#[derive(Clone, Debug, PartialEq)]
pub struct PretextConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Share of the labeled reals kept aside to measure accuracy.
    pub holdout_fraction: f64,
}

impl Default for PretextConfig {
    fn default() -> Self {
        PretextConfig {
            epochs: 3,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 7,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretextReport {
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub epoch_losses: Vec<f64>,
    pub heldout_accuracy: f64,
}

/// Pretext classification: blur class of a real image from the last
/// layer's CLS token through a linear layer.
fn pretext_logits(g: &mut Graph, p: &crate::params::BoundParams, det: &Detector, image: &Image) -> Result<crate::autodiff::Var> {
    let e = &det.config.encoder;
    let pass = encoder::forward_collect(g, p, e, image, false)?;
    let cls = g.row(pass.last, 0)?;
    let cls = g.reshape(cls, &[1, e.embed_dim])?;
    let z = g.matmul(cls, p.get(PRETEXT_W)?)?;
    g.add_bias(z, p.get(PRETEXT_B)?)
}

/// Train the backbone of `det` on blur-class prediction over labeled
/// reals, then round it to checkpoint precision. The trailing
/// `holdout_fraction` of `samples` is only used for the reported accuracy.
/// Afterwards the backbone stays frozen: detection training never touches
/// `frozen.*` tensors.
pub fn pretrain_backbone(
    det: &mut Detector,
    samples: &[(Image, usize)],
    classes: usize,
    cfg: &PretextConfig,
    log: &mut dyn Write,
) -> Result<PretextReport> {
    let holdout = ((samples.len() as f64) * cfg.holdout_fraction).round() as usize;
    let (train, held) = samples.split_at(samples.len() - holdout);
    if train.len() < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "{} pretext samples, fewer than one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let d = det.config.encoder.embed_dim;
    let mut store = ParamStore::new();
    for (n, t) in det.params.iter().filter(|(n, _)| n.starts_with(FROZEN_PREFIX)) {
        store.insert(n.clone(), t.clone());
    }
    let mut rng = stream(cfg.seed, "pretext.init", 0);
    let sd = (1.0 / d as f64).sqrt();
    let w = (0..d * classes).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
    store.insert(PRETEXT_W, Tensor::matrix(d, classes, w)?);
    store.insert(PRETEXT_B, Tensor::zeros(&[classes]));
    let mut probe = Detector {
        config: det.config.clone(),
        params: store,
    };

    let mut state = AdamState::default();
    let mut report = PretextReport {
        train_samples: train.len(),
        heldout_samples: held.len(),
        ..PretextReport::default()
    };
    let steps = train.len() / cfg.batch_size;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(cfg.seed, "pretext.shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        for chunk in order.chunks_exact(cfg.batch_size).take(steps) {
            let per: Vec<(f64, Grads)> = chunk
                .par_iter()
                .map(|&i| {
                    let (img, label) = &train[i];
                    let mut g = Graph::new();
                    let p = probe.params.bind_with(&mut g, |_| true);
                    let logits = pretext_logits(&mut g, &p, &probe, img)?;
                    let loss = g.cross_entropy(logits, &[*label])?;
                    let v = g.value(loss).item();
                    g.backward(loss)?;
                    Ok((v, p.grads(&g)))
                })
                .collect::<Result<_>>()?;
            let b = chunk.len() as f64;
            let mut grads: Grads = BTreeMap::new();
            let mut loss = 0.0;
            for (l, gs) in per {
                loss += l / b;
                for (n, g) in gs {
                    let acc = grads.entry(n).or_insert_with(|| vec![0.0; g.len()]);
                    acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x / b);
                }
            }
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    batch: step % steps.max(1),
                    loss,
                });
            }
            writeln!(log, "{}", json!({"phase": "pretext", "step": step, "epoch": epoch, "loss": loss}))
                .map_err(|e| Error::io("<train log>", e))?;
            adam_step(&mut probe.params, &grads, &mut state, &cfg.adam)?;
            loss_sum += loss;
            step += 1;
        }
        report.epoch_losses.push(loss_sum / steps as f64);
    }

    let hits: Vec<bool> = held
        .par_iter()
        .map(|(img, label)| {
            let mut g = Graph::new();
            let p = probe.params.bind(&mut g, false);
            let logits = pretext_logits(&mut g, &p, &probe, img)?;
            let row = g.value(logits).data();
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            Ok(best == *label)
        })
        .collect::<Result<_>>()?;
    report.heldout_accuracy = if hits.is_empty() {
        f64::NAN
    } else {
        hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
    };

    probe.params.round_to_f32();
    det.adopt_backbone(&probe.params)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::model::ModelConfig;
    use crate::params::ParamKind;
    use crate::rng::rng_from_seed;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vals.to_vec()));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(&[1.0, -2.0, 3.0]);
        let mut st = AdamState::default();
        let g: Grads = [("w".to_string(), vec![0.0; 3])].into();
        adam_step(&mut s, &g, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0, -2.0, 3.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_with_unit_gradient() {
        let h = AdamConfig::default();
        let mut s = store(&[0.5, 0.5]);
        let mut st = AdamState::default();
        let g: Grads = [("w".to_string(), vec![1.0, 1.0])].into();
        adam_step(&mut s, &g, &mut st, &h).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let want = 0.5 - h.lr * 1.0 / (1.0 + h.eps);
        for &v in s.get("w").unwrap().data() {
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = store(&[1.0, 2.0]);
        let g: Grads = [("w".to_string(), vec![1.0])].into();
        assert!(adam_step(&mut s, &g, &mut AdamState::default(), &AdamConfig::default()).is_err());
    }

    #[test]
    fn hundred_steps_are_reproducible() {
        let run = || {
            let mut s = store(&[0.3, -0.7, 1.1, 2.0]);
            let mut st = AdamState::default();
            let mut rng = rng_from_seed(5);
            for _ in 0..100 {
                let g: Grads = [("w".to_string(), (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())].into();
                adam_step(&mut s, &g, &mut st, &AdamConfig::default()).unwrap();
            }
            s.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                embed_dim: 8,
                layers: 2,
                heads: 2,
                patch_size: 4,
                image_size: 16,
                mlp_dim: 12,
                selected_layers: vec![1, 2],
                lora_rank: 2,
                lora_alpha: 4.0,
                ..EncoderConfig::default()
            },
            scales: vec![2, 4],
            cgf_hidden: 8,
            head_hidden: 4,
            ..ModelConfig::default()
        }
    }

    fn pools() -> (Vec<Image>, Vec<Image>) {
        let mut rng = rng_from_seed(3);
        let mut img = |bias: f32| {
            let px = (0..3 * 16 * 16).map(|_| (bias + 0.2 * rng.random::<f32>()).min(1.0)).collect();
            Image::new(3, 16, 16, px).unwrap()
        };
        let reals = (0..8).map(|_| img(0.1)).collect();
        let fakes = (0..8).map(|_| img(0.7)).collect();
        (reals, fakes)
    }

    #[test]
    fn training_touches_only_trainable_tensors_and_is_deterministic() {
        let (reals, fakes) = pools();
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut det = Detector::init(tiny_model(), 1).unwrap();
            let before = det.clone();
            let mut log = Vec::new();
            let summary = train_detector(&mut det, &reals, &fakes, &cfg, &mut log).unwrap();
            (before, det, summary, log)
        };
        let (before, after, summary, log) = run();
        assert_eq!(summary.steps, 8);
        assert_eq!(String::from_utf8(log.clone()).unwrap().lines().count(), 8);
        for (name, t) in before.params.iter() {
            let now = after.params.get(name).unwrap();
            if crate::params::kind_of(name) == ParamKind::Trainable {
                assert_ne!(now, t, "{name} did not move");
            } else {
                assert_eq!(now, t, "{name} changed");
            }
        }
        let (_, again, _, log2) = run();
        assert_eq!(again.params.encode(), after.params.encode());
        assert_eq!(log, log2);
    }

    #[test]
    fn pretext_updates_only_the_backbone() {
        let (reals, _) = pools();
        let samples: Vec<(Image, usize)> = reals.into_iter().enumerate().map(|(i, x)| (x, i % 4)).collect();
        let mut det = Detector::init(tiny_model(), 2).unwrap();
        let before = det.clone();
        let cfg = PretextConfig {
            epochs: 1,
            batch_size: 4,
            holdout_fraction: 0.25,
            ..PretextConfig::default()
        };
        let rep = pretrain_backbone(&mut det, &samples, 4, &cfg, &mut std::io::sink()).unwrap();
        assert_eq!((rep.train_samples, rep.heldout_samples), (6, 2));
        assert!(!det.params.contains(PRETEXT_W));
        for (name, t) in before.params.iter() {
            let now = det.params.get(name).unwrap();
            if name.starts_with(FROZEN_PREFIX) {
                assert_ne!(now, t, "{name} did not move");
                assert!(now.data().iter().all(|&v| v as f32 as f64 == v));
            } else {
                assert_eq!(now, t);
            }
        }
    }
}
