//! Mixup-driven distributional augmentation.
//!
//! A mixed sample `λ·x_fake + (1−λ)·x_real` is always labelled fake, with
//! `λ ~ Beta(α, α)` drawn independently for every mixed sample. Two control
//! augmentations (real–real mixup labelled fake, and patch shuffling) share
//! the same batch slots so ablation arms have identical batch composition.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixupMode {
    RealFake,
    RealRealControl,
    PatchShuffleControl,
    Off,
}

impl fmt::Display for MixupMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixupMode::RealFake => "real-fake",
            MixupMode::RealRealControl => "real-real-control",
            MixupMode::PatchShuffleControl => "patch-shuffle-control",
            MixupMode::Off => "off",
        })
    }
}

impl FromStr for MixupMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "real-fake" => MixupMode::RealFake,
            "real-real-control" => MixupMode::RealRealControl,
            "patch-shuffle-control" => MixupMode::PatchShuffleControl,
            "off" => MixupMode::Off,
            other => return Err(Error::Config(format!("unknown mixup mode `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixupConfig {
    pub alpha: f64,
    /// Share of label-1 batch slots filled by augmented samples.
    pub mix_fraction: f64,
    pub mode: MixupMode,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            alpha: 0.1,
            mix_fraction: 0.5,
            mode: MixupMode::RealFake,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("mixup alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.mix_fraction) {
            return Err(Error::Config(format!(
                "mixup fraction must lie in [0, 1], got {}",
                self.mix_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Natural,
    Synthetic,
    Mixed,
    Control,
}

#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub image: Image,
    /// 0 = real, 1 = fake.
    pub label: u8,
    pub provenance: Provenance,
    /// Interpolation weight for mixed and mixup-control samples.
    pub lambda: Option<f64>,
}

/// `ln X` for `X ~ Gamma(shape, 1)`: Marsaglia–Tsang, with the
/// `Gamma(a) = Gamma(a + 1) · U^{1/a}` boost for `shape < 1`, carried out in
/// log space so tiny shapes do not underflow.
fn ln_gamma_variate(shape: f64, rng: &mut Rng) -> f64 {
    let (a, boost) = if shape < 1.0 { (shape + 1.0, true) } else { (shape, false) };
    let d = a - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    let ln_x = loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.random();
        if u > 0.0 && u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            break (d * v).ln();
        }
    };
    if boost {
        // random::<f64>() lies in [0, 1); 1 - u lies in (0, 1].
        let u: f64 = 1.0 - rng.random::<f64>();
        ln_x + u.ln() / shape
    } else {
        ln_x
    }
}

/// Draw `λ ~ Beta(α, α)` on the open interval. `λ = X / (X + Y)` with
/// independent Gamma(α) variates; draws where `λ` or `1 − λ` round to an
/// endpoint are rejected and redrawn, which keeps the sampler symmetric.
pub fn sample_lambda(alpha: f64, rng: &mut Rng) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
    }
    loop {
        let lx = ln_gamma_variate(alpha, rng);
        let ly = ln_gamma_variate(alpha, rng);
        // X / (X + Y) = 1 / (1 + exp(ln Y − ln X))
        let lambda = 1.0 / (1.0 + (ly - lx).exp());
        if lambda > 0.0 && lambda < 1.0 && 1.0 - lambda < 1.0 {
            return Ok(lambda);
        }
    }
}

fn blend(a: &Image, b: &Image, weight_b: f64) -> Result<Image> {
    if !a.same_shape(b) {
        return Err(Error::shape("mixup", &a.dims(), &b.dims()));
    }
    let px = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&pa, &pb)| ((1.0 - weight_b) * pa as f64 + weight_b * pb as f64) as f32)
        .collect();
    let [c, h, w] = a.dims();
    Image::new(c, h, w, px)
}

/// `λ·x_fake + (1−λ)·x_real`, labelled fake.
pub fn mixup(x_real: &Image, x_fake: &Image, lambda: f64) -> Result<LabeledSample> {
    Ok(LabeledSample {
        image: blend(x_real, x_fake, lambda)?,
        label: 1,
        provenance: Provenance::Mixed,
        lambda: Some(lambda),
    })
}

/// Control: `λ·x2 + (1−λ)·x1` of two real images, labelled fake.
pub fn real_real_mixup(x1: &Image, x2: &Image, lambda: f64) -> Result<LabeledSample> {
    Ok(LabeledSample {
        image: blend(x1, x2, lambda)?,
        label: 1,
        provenance: Provenance::Control,
        lambda: Some(lambda),
    })
}

/// Rearrange a `grid×grid` partition of the image so that output patch `i`
/// is input patch `perm[i]`.
pub fn permute_patches(x: &Image, grid: usize, perm: &[usize]) -> Result<Image> {
    let [c, h, w] = x.dims();
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} does not divide into a {grid}x{grid} patch grid"
        )));
    }
    if perm.len() != grid * grid {
        return Err(Error::shape("permute_patches", &[grid * grid], &[perm.len()]));
    }
    let (ph, pw) = (h / grid, w / grid);
    let mut out = x.clone();
    for (dst, &src) in perm.iter().enumerate() {
        let (dy, dx) = ((dst / grid) * ph, (dst % grid) * pw);
        let (sy, sx) = ((src / grid) * ph, (src % grid) * pw);
        for ch in 0..c {
            for y in 0..ph {
                for xx in 0..pw {
                    out.set(ch, dy + y, dx + xx, x.get(ch, sy + y, sx + xx));
                }
            }
        }
    }
    Ok(out)
}

/// Control: uniformly random patch permutation. The label is kept from the
/// source image.
pub fn patch_shuffle(x: &Image, label: u8, grid: usize, rng: &mut Rng) -> Result<LabeledSample> {
    let mut perm: Vec<usize> = (0..grid * grid).collect();
    for i in (1..perm.len()).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    Ok(LabeledSample {
        image: permute_patches(x, grid, &perm)?,
        label,
        provenance: Provenance::Control,
        lambda: None,
    })
}

/// Pick `n` indices from `0..pool` without replacement (cycling through
/// fresh permutations when `n > pool`).
fn draw_indices(pool: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut idx: Vec<usize> = (0..pool).collect();
        let take = (n - out.len()).min(pool);
        for i in 0..take {
            let j = rng.random_range(i..pool);
            idx.swap(i, j);
        }
        out.extend_from_slice(&idx[..take]);
    }
    out
}

/// Number of label-1 slots taken by augmented samples.
pub fn mixed_slots(n_fake: usize, config: &MixupConfig) -> usize {
    if config.mode == MixupMode::Off {
        0
    } else {
        ((n_fake as f64) * config.mix_fraction).round() as usize
    }
}

/// Balanced batch: `batch_size / 2` reals (rounded up), the rest label 1. A
/// `mix_fraction` share of the label-1 slots holds augmented samples, each
/// with its own `λ`; the remainder are plain fakes. Reals come first.
pub fn compose_batch(
    reals: &[&Image],
    fakes: &[&Image],
    batch_size: usize,
    config: &MixupConfig,
    patch_grid: usize,
    rng: &mut Rng,
) -> Result<Vec<LabeledSample>> {
    if reals.is_empty() || fakes.is_empty() {
        return Err(Error::InvalidArgument("compose_batch needs nonempty real and fake pools".into()));
    }
    if batch_size < 2 {
        return Err(Error::InvalidArgument("batch size must be at least 2".into()));
    }
    config.validate()?;
    let n_real = batch_size.div_ceil(2);
    let n_fake = batch_size - n_real;
    let real_idx = draw_indices(reals.len(), n_real, rng);
    let fake_idx = draw_indices(fakes.len(), n_fake, rng);
    let n_mixed = mixed_slots(n_fake, config);

    let mut batch = Vec::with_capacity(batch_size);
    for &i in &real_idx {
        batch.push(LabeledSample {
            image: reals[i].clone(),
            label: 0,
            provenance: Provenance::Natural,
            lambda: None,
        });
    }
    for (slot, &i) in fake_idx.iter().enumerate() {
        let fake = fakes[i];
        let sample = if slot < n_mixed {
            match config.mode {
                MixupMode::RealFake => {
                    let partner = reals[rng.random_range(0..reals.len())];
                    let lambda = sample_lambda(config.alpha, rng)?;
                    mixup(partner, fake, lambda)?
                }
                MixupMode::RealRealControl => {
                    let a = reals[rng.random_range(0..reals.len())];
                    let b = reals[rng.random_range(0..reals.len())];
                    let lambda = sample_lambda(config.alpha, rng)?;
                    real_real_mixup(a, b, lambda)?
                }
                MixupMode::PatchShuffleControl => patch_shuffle(fake, 1, patch_grid, rng)?,
                MixupMode::Off => unreachable!("no augmented slots when mixup is off"),
            }
        } else {
            LabeledSample {
                image: fake.clone(),
                label: 1,
                provenance: Provenance::Synthetic,
                lambda: None,
            }
        };
        batch.push(sample);
    }
    Ok(batch)
}
