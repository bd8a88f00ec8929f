//! Procedural real/fake image corpus with a JSON-lines manifest.
//!
//! Real images are Gaussian-blurred white noise (σ ∈ {0.5, 1, 2, 4}) plus a
//! faint linear luminance ramp. Fake families each add one generator
//! artifact to a real-style base:
//!
//! * `A`: base rendered at half resolution, nearest-neighbour upsampled ×2.
//! * `B`: 8×8 block DCT with coefficients quantized to a fixed step.
//! * `C`: additive periodic grid (4 px period, 0.03 amplitude).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dct;
use crate::error::{Error, Result};
use crate::filters::gaussian_blur_plane;
use crate::image::{read_image, write_image, Image};
use crate::rng::{derive_seed, rng_from_seed};

pub const BLUR_SIGMAS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const CHANNELS: usize = 3;
const NOISE_AMPLITUDE: f64 = 0.3;
const RAMP_AMPLITUDE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    A,
    B,
    C,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::A, Family::B, Family::C];
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::A => "A",
            Family::B => "B",
            Family::C => "C",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Family::A),
            "B" | "b" => Ok(Family::B),
            "C" | "c" => Ok(Family::C),
            other => Err(Error::InvalidArgument(format!("unknown generator family `{other}`"))),
        }
    }
}

/// Generation parameters of a real image, all drawn from its seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RealParams {
    pub sigma_index: usize,
    pub angle: f64,
}

impl RealParams {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = rng_from_seed(derive_seed(seed, "real-params", 0));
        RealParams {
            sigma_index: rng.random_range(0..BLUR_SIGMAS.len()),
            angle: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    pub fn sigma(&self) -> f64 {
        BLUR_SIGMAS[self.sigma_index]
    }
}

fn real_planes(seed: u64, sigma: f64, angle: f64, size: usize) -> Vec<f64> {
    let mut rng = rng_from_seed(derive_seed(seed, "real-noise", 0));
    let n = size * size;
    let mut out = Vec::with_capacity(CHANNELS * n);
    let (ca, sa) = (angle.cos(), angle.sin());
    for _ in 0..CHANNELS {
        let mut plane: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        gaussian_blur_plane(&mut plane, size, size, sigma);
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 + 0.5) / size as f64 - 0.5;
                let v = (y as f64 + 0.5) / size as f64 - 0.5;
                let p = &mut plane[y * size + x];
                *p = 0.5 + NOISE_AMPLITUDE * *p + RAMP_AMPLITUDE * (u * ca + v * sa);
            }
        }
        out.extend(plane);
    }
    out
}

/// Blurred white noise plus a low-amplitude linear luminance gradient.
pub fn gen_real(seed: u64, sigma: f64, angle: f64, size: usize) -> Result<Image> {
    if !BLUR_SIGMAS.contains(&sigma) {
        return Err(Error::InvalidArgument(format!(
            "blur sigma {sigma} not in {BLUR_SIGMAS:?}"
        )));
    }
    Image::from_f64_clamped(CHANNELS, size, size, &real_planes(seed, sigma, angle, size))
}

/// Real image with σ and ramp angle drawn from the seed.
pub fn gen_real_from_seed(seed: u64, size: usize) -> Result<Image> {
    let p = RealParams::from_seed(seed);
    gen_real(seed, p.sigma(), p.angle, size)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FakeParams {
    /// DCT quantization step for family B.
    pub dct_step: f64,
    /// Peak amplitude of the family C grid.
    pub grid_amplitude: f64,
    /// Period of the family C grid in pixels.
    pub grid_period: usize,
}

impl Default for FakeParams {
    fn default() -> Self {
        FakeParams {
            dct_step: 0.08,
            grid_amplitude: 0.03,
            grid_period: 4,
        }
    }
}

pub fn gen_fake(family: Family, seed: u64, size: usize, params: &FakeParams) -> Result<Image> {
    let p = RealParams::from_seed(seed);
    let values = match family {
        Family::A => {
            if size % 2 != 0 {
                return Err(Error::InvalidArgument(format!("size {size} is odd")));
            }
            let half = size / 2;
            let base = real_planes(seed, p.sigma(), p.angle, half);
            upsample_nearest(&base, half)
        }
        Family::B => {
            if params.dct_step <= 0.0 {
                return Err(Error::InvalidArgument("dct step must be positive".into()));
            }
            let mut base = real_planes(seed, p.sigma(), p.angle, size);
            // Quantize the clamped image, as a codec would see it.
            base.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0) as f32 as f64);
            for plane in base.chunks_mut(size * size) {
                dct::quantize_plane(plane, size, size, params.dct_step);
            }
            base
        }
        Family::C => {
            let mut base = real_planes(seed, p.sigma(), p.angle, size);
            let period = params.grid_period as f64;
            for plane in base.chunks_mut(size * size) {
                for y in 0..size {
                    for x in 0..size {
                        let gx = (std::f64::consts::TAU * x as f64 / period).cos();
                        let gy = (std::f64::consts::TAU * y as f64 / period).cos();
                        plane[y * size + x] += params.grid_amplitude * 0.5 * (gx + gy);
                    }
                }
            }
            base
        }
    };
    Image::from_f64_clamped(CHANNELS, size, size, &values)
}

fn upsample_nearest(planes: &[f64], half: usize) -> Vec<f64> {
    let size = 2 * half;
    let mut out = Vec::with_capacity(CHANNELS * size * size);
    for plane in planes.chunks(half * half) {
        for y in 0..size {
            for x in 0..size {
                out.push(plane[(y / 2) * half + x / 2]);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub image_size: usize,
    pub train_real: usize,
    pub train_fake: usize,
    pub train_family: Family,
    pub eval_per_family: usize,
    pub fake: FakeParams,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 7,
            image_size: 64,
            train_real: 2000,
            train_fake: 2000,
            train_family: Family::A,
            eval_per_family: 500,
            fake: FakeParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub path: String,
    pub label: Label,
    #[serde(with = "family_field")]
    pub family: Option<Family>,
    pub seed: u64,
    pub split: String,
}

mod family_field {
    use super::Family;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(f: &Option<Family>, s: S) -> Result<S::Ok, S::Error> {
        match f {
            None => s.serialize_str("none"),
            Some(f) => s.serialize_str(&f.to_string()),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Family>, D::Error> {
        let s = String::deserialize(d)?;
        if s == "none" {
            return Ok(None);
        }
        s.parse().map(Some).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<Entry>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TRAIN_SPLIT: &str = "train";

pub fn eval_split_name(family: Family) -> String {
    format!("eval-{family}")
}

impl Manifest {
    /// Splits in first-appearance order with their entry indices.
    pub fn splits(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            out.entry(e.split.clone()).or_default().push(i);
        }
        out
    }

    /// Entries of split `name`, or of every `name-*` split when `name` is a
    /// group prefix (e.g. `eval` selects `eval-A`, `eval-B`, `eval-C`).
    pub fn select(&self, name: &str) -> Result<Vec<usize>> {
        let prefix = format!("{name}-");
        let idx: Vec<usize> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == name || e.split.starts_with(&prefix))
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            return Err(Error::InvalidArgument(format!("no entries in split `{name}`")));
        }
        Ok(idx)
    }

    pub fn check_invariants(&self) -> Result<()> {
        for e in &self.entries {
            let ok = match e.label {
                Label::Real => e.family.is_none(),
                Label::Fake => e.family.is_some(),
            };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "{}: label {:?} inconsistent with family {:?}",
                    e.path, e.label, e.family
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::Json {
                    path: path.to_path_buf(),
                    source: e,
                })
            })
            .collect::<Result<Vec<Entry>>>()?;
        let m = Manifest { entries };
        m.check_invariants()?;
        Ok(m)
    }

    pub fn load(corpus_dir: &Path) -> Result<Self> {
        let path = corpus_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Manifest::from_jsonl(&text, &path)
    }
}

/// Plan the default corpus layout without touching the filesystem.
pub fn plan_corpus(config: &CorpusConfig) -> Manifest {
    let mut entries = Vec::new();
    let mut add = |split: &str, label: Label, family: Option<Family>, n: usize| {
        let kind = match family {
            None => "real".to_string(),
            Some(f) => format!("fake{f}"),
        };
        let tag = format!("{split}/{kind}");
        for i in 0..n {
            entries.push(Entry {
                path: format!("images/{split}/{kind}_{i:05}.hxt"),
                label,
                family,
                seed: derive_seed(config.seed, &tag, i as u64),
                split: split.to_string(),
            });
        }
    };
    add(TRAIN_SPLIT, Label::Real, None, config.train_real);
    add(TRAIN_SPLIT, Label::Fake, Some(config.train_family), config.train_fake);
    for f in Family::ALL {
        let split = eval_split_name(f);
        add(&split, Label::Real, None, config.eval_per_family);
        add(&split, Label::Fake, Some(f), config.eval_per_family);
    }
    Manifest { entries }
}

pub fn render_entry(entry: &Entry, config: &CorpusConfig) -> Result<Image> {
    match entry.family {
        None => gen_real_from_seed(entry.seed, config.image_size),
        Some(f) => gen_fake(f, entry.seed, config.image_size, &config.fake),
    }
}

/// Render every image and write the manifest under `out`.
pub fn build_corpus(config: &CorpusConfig, out: &Path) -> Result<Manifest> {
    let manifest = plan_corpus(config);
    let dirs: std::collections::BTreeSet<PathBuf> = manifest
        .entries
        .iter()
        .filter_map(|e| out.join(&e.path).parent().map(Path::to_path_buf))
        .collect();
    for d in dirs {
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    manifest.entries.par_iter().try_for_each(|e| {
        let img = render_entry(e, config)?;
        write_image(&out.join(&e.path), &img)
    })?;
    let mpath = out.join(MANIFEST_FILE);
    let mut f = fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
    f.write_all(manifest.to_jsonl().as_bytes())
        .map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// SHA-256 over the manifest bytes followed by every image file in manifest order.
pub fn corpus_hash(corpus_dir: &Path) -> Result<String> {
    let mpath = corpus_dir.join(MANIFEST_FILE);
    let mbytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = Manifest::from_jsonl(&String::from_utf8_lossy(&mbytes), &mpath)?;
    let mut h = Sha256::new();
    h.update(&mbytes);
    for e in &manifest.entries {
        let p = corpus_dir.join(&e.path);
        h.update(fs::read(&p).map_err(|err| Error::io(&p, err))?);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn load_entry_image(corpus_dir: &Path, entry: &Entry) -> Result<Image> {
    read_image(&corpus_dir.join(&entry.path))
}
