//! Test-time degradations for robustness sweeps.
//!
//! `Blur(σ)` is the separable Gaussian used by the corpus (radius `⌈3σ⌉`,
//! reflect padding). `Compress(q)` stands in for a lossy codec: each 8×8
//! block of each channel is DCT transformed, quantized with step
//! `COMPRESS_STEP_SCALE · (11 - q)`, inverted and clamped to `[0, 1]`.
//! `q = 10` is the finest level.

use std::fmt;
use std::str::FromStr;

use crate::dct::quantize_plane;
use crate::error::{Error, Result};
use crate::filters::gaussian_blur_plane;
use crate::image::Image;

/// Step per quality level. At `q = 10` the rounding error stays well under
/// `1e-3` per pixel on corpus images.
pub const COMPRESS_STEP_SCALE: f64 = 5e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perturbation {
    Blur(f64),
    Compress(u8),
}

impl Perturbation {
    pub fn kind(&self) -> &'static str {
        match self {
            Perturbation::Blur(_) => "blur",
            Perturbation::Compress(_) => "compress",
        }
    }

    pub fn level(&self) -> f64 {
        match *self {
            Perturbation::Blur(s) => s,
            Perturbation::Compress(q) => q as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Perturbation::Blur(s) if !(s >= 0.0 && s.is_finite()) => {
                Err(Error::InvalidArgument(format!("blur sigma {s} must be finite and >= 0")))
            }
            Perturbation::Compress(q) if !(1..=10).contains(&q) => {
                Err(Error::InvalidArgument(format!("compression level {q} outside 1..=10")))
            }
            _ => Ok(()),
        }
    }

    /// The default sweep: blur σ ∈ {0, 1, 2, 3}, compression q ∈ {10, 7, 4, 1}.
    pub fn default_grid() -> Vec<Perturbation> {
        let mut g: Vec<_> = [0.0, 1.0, 2.0, 3.0].into_iter().map(Perturbation::Blur).collect();
        g.extend([10, 7, 4, 1].into_iter().map(Perturbation::Compress));
        g
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::Blur(s) => write!(f, "blur:{s}"),
            Perturbation::Compress(q) => write!(f, "compress:{q}"),
        }
    }
}

impl FromStr for Perturbation {
    type Err = Error;

    /// `blur:σ` or `compress:q`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("perturbation '{s}' is not blur:σ or compress:q"));
        let (kind, level) = s.trim().split_once(':').ok_or_else(bad)?;
        let p = match kind.trim() {
            "blur" => Perturbation::Blur(level.trim().parse().map_err(|_| bad())?),
            "compress" => Perturbation::Compress(level.trim().parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        p.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(p)
    }
}

pub fn perturb(image: &Image, p: Perturbation) -> Result<Image> {
    p.validate()?;
    let (c, h, w) = (image.channels(), image.height(), image.width());
    match p {
        Perturbation::Blur(s) if s == 0.0 => Ok(image.clone()),
        Perturbation::Blur(s) => {
            let mut v = image.to_f64();
            for plane in v.chunks_mut(h * w) {
                gaussian_blur_plane(plane, h, w, s);
            }
            Image::from_f64_clamped(c, h, w, &v)
        }
        Perturbation::Compress(q) => {
            if h % 8 != 0 || w % 8 != 0 {
                return Err(Error::InvalidArgument(format!(
                    "{h}x{w} image does not tile into 8x8 blocks"
                )));
            }
            let step = COMPRESS_STEP_SCALE * (11 - q) as f64;
            let mut v = image.to_f64();
            for plane in v.chunks_mut(h * w) {
                quantize_plane(plane, h, w, step);
            }
            Image::from_f64_clamped(c, h, w, &v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_fake, gen_real_from_seed, FakeParams, Family};

    #[test]
    fn zero_blur_is_identity_and_constants_survive() {
        let img = gen_real_from_seed(3, 64).unwrap();
        assert_eq!(perturb(&img, Perturbation::Blur(0.0)).unwrap(), img);
        let flat = Image::filled(3, 16, 16, 0.375);
        let out = perturb(&flat, Perturbation::Blur(2.5)).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 0.375).abs() < 1e-6));
    }

    #[test]
    fn finest_compression_stays_within_1e_3() {
        let mut worst = 0f32;
        for s in 0..20 {
            let imgs = [
                gen_real_from_seed(s, 64).unwrap(),
                gen_fake(Family::A, s, 64, &FakeParams::default()).unwrap(),
            ];
            for img in imgs {
                let out = perturb(&img, Perturbation::Compress(10)).unwrap();
                for (a, b) in img.pixels().iter().zip(out.pixels()) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        assert!(worst < 1e-3, "max deviation {worst}");
    }

    #[test]
    fn stronger_levels_distort_more() {
        let img = gen_real_from_seed(9, 64).unwrap();
        let err = |p| {
            let out = perturb(&img, p).unwrap();
            img.pixels().iter().zip(out.pixels()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>()
        };
        assert!(err(Perturbation::Compress(1)) > err(Perturbation::Compress(10)));
        assert!(err(Perturbation::Blur(3.0)) > err(Perturbation::Blur(1.0)));
    }

    #[test]
    fn parsing_and_validation() {
        assert_eq!("blur:1.5".parse::<Perturbation>().unwrap(), Perturbation::Blur(1.5));
        assert_eq!("compress:4".parse::<Perturbation>().unwrap(), Perturbation::Compress(4));
        assert!("compress:0".parse::<Perturbation>().is_err());
        assert!("blur:-1".parse::<Perturbation>().is_err());
        assert!("jpeg:3".parse::<Perturbation>().is_err());
        assert_eq!(Perturbation::default_grid().len(), 8);
    }
}
