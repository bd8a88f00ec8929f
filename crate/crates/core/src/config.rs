//! Flat `key = value` run configuration.
//!
//! Grammar: one `key = value` per line, `#` starts a comment, blank lines
//! are ignored, no sections. Every key has a default (see [`KEYS`]); an
//! unknown key is an error. Values are stored in canonical form, so
//! serializing and re-parsing yields the same configuration.
//!
//! Randomness: `seed` drives everything. The corpus uses it directly;
//! model initialization, pretext training, detection training and
//! evaluation each use `derive_seed(seed, tag, 0)` with the tags `init`,
//! `pretext`, `train` and `eval`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::augment::{MixupConfig, MixupMode};
use crate::corpus::{CorpusConfig, Family, FakeParams};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{parse_switch, ModelConfig, Toggles};
use crate::perturb::Perturbation;
use crate::rng::derive_seed;
use crate::train::{AdamConfig, PretextConfig, TrainConfig};

pub const RESOLVED_FILE: &str = "resolved.cfg";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Switch,
    Family,
    Mode,
    IntList,
    FloatList,
    Perturbations,
    Text,
}

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    kind: Kind,
    pub doc: &'static str,
}

const fn spec(key: &'static str, default: &'static str, kind: Kind, doc: &'static str) -> KeySpec {
    KeySpec { key, default, kind, doc }
}

pub static KEYS: &[KeySpec] = &[
    spec("seed", "7", Kind::Int, "master seed; corpus uses it as is, other stages derive sub-seeds"),
    spec("corpus.image_size", "64", Kind::Int, "image side length in pixels"),
    spec("corpus.train_real", "2000", Kind::Int, "real images in the train split"),
    spec("corpus.train_fake", "2000", Kind::Int, "fake images in the train split"),
    spec("corpus.train_family", "A", Kind::Family, "generator family seen in training"),
    spec("corpus.eval_per_family", "500", Kind::Int, "reals and fakes per eval-<family> split (each)"),
    spec("corpus.dct_step", "0.08", Kind::Float, "family B block-DCT quantization step"),
    spec("corpus.grid_amplitude", "0.03", Kind::Float, "family C periodic grid amplitude"),
    spec("corpus.grid_period", "4", Kind::Int, "family C grid period in pixels"),
    spec("encoder.embed_dim", "64", Kind::Int, "token width d"),
    spec("encoder.layers", "6", Kind::Int, "transformer blocks L"),
    spec("encoder.heads", "4", Kind::Int, "attention heads (must divide d)"),
    spec("encoder.patch_size", "8", Kind::Int, "patch side p"),
    spec("encoder.mlp_dim", "128", Kind::Int, "hidden width of the block MLP"),
    spec("encoder.selected_layers", "2,4,6", Kind::IntList, "1-based layers feeding fusion"),
    spec("lora.rank", "8", Kind::Int, "adapter rank r"),
    spec("lora.alpha", "16", Kind::Float, "adapter scale numerator (scale = alpha / rank)"),
    spec("fusion.scales", "2,4,8", Kind::IntList, "region pooling window sizes in patches"),
    spec("fusion.cgf_hidden", "64", Kind::Int, "hidden width of the granularity-fusion MLP"),
    spec("head.hidden", "32", Kind::Int, "hidden width of the classifier head"),
    spec("module.mda", "on", Kind::Switch, "mixup augmentation"),
    spec("module.lora", "on", Kind::Switch, "LoRA adapters"),
    spec("module.hirp", "on", Kind::Switch, "region pooling stream"),
    spec("module.clf", "on", Kind::Switch, "cross-layer fusion (off: last selected layer)"),
    spec("module.cgf", "on", Kind::Switch, "cross-granularity fusion (off: fixed 1/2 average)"),
    spec("mixup.alpha", "0.1", Kind::Float, "Beta(alpha, alpha) for the mixing weight"),
    spec("mixup.fraction", "0.5", Kind::Float, "share of label-1 batch slots holding augmented samples"),
    spec("mixup.mode", "real-fake", Kind::Mode, "real-fake | real-real-control | patch-shuffle-control | off"),
    spec("pretext.enabled", "on", Kind::Switch, "pretrain the backbone on blur classification"),
    spec("pretext.epochs", "3", Kind::Int, "pretext epochs"),
    spec("pretext.lr", "0.001", Kind::Float, "pretext Adam learning rate"),
    spec("pretext.batch", "32", Kind::Int, "pretext batch size"),
    spec("pretext.holdout", "0.1", Kind::Float, "share of train reals held out for pretext accuracy"),
    spec("train.lr", "0.001", Kind::Float, "Adam learning rate"),
    spec("train.batch", "32", Kind::Int, "batch size (half real, half label 1)"),
    spec("train.epochs", "10", Kind::Int, "detection epochs"),
    spec("train.beta1", "0.9", Kind::Float, "Adam first-moment decay"),
    spec("train.beta2", "0.999", Kind::Float, "Adam second-moment decay"),
    spec("train.eps", "1e-8", Kind::Float, "Adam epsilon"),
    spec("train.data_fraction", "1", Kind::Float, "share of the train split used"),
    spec("eval.split", "eval", Kind::Text, "split (or prefix group) scored by eval and exports"),
    spec("eval.pca_k", "2", Kind::Int, "principal components in the feature export"),
    spec("robustness.grid", "blur:0,blur:1,blur:2,blur:3,compress:10,compress:7,compress:4,compress:1", Kind::Perturbations, "perturbations of the robustness sweep"),
    spec("bench.images", "64", Kind::Int, "timed forward passes"),
    spec("bench.warmup", "8", Kind::Int, "untimed warmup passes"),
    spec("ablate.seeds", "7", Kind::IntList, "seeds each ablation arm is trained with"),
    spec("ablate.alphas", "0.05,0.1,0.5,1,2", Kind::FloatList, "mixup alphas of the alpha sweep"),
    spec("ablate.fractions", "0.01,0.04,0.2,0.5,1", Kind::FloatList, "train fractions of the data-size sweep"),
];

fn find(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == key)
}

fn bad(key: &str, value: &str, why: &str) -> Error {
    Error::Config(format!("{key} = {value}: {why}"))
}

fn canon_float(key: &str, v: &str) -> Result<String> {
    let x: f64 = v.parse().map_err(|_| bad(key, v, "not a number"))?;
    if !x.is_finite() {
        return Err(bad(key, v, "not finite"));
    }
    Ok(format!("{x:?}").trim_end_matches(".0").to_string())
}

fn canon_int(key: &str, v: &str) -> Result<String> {
    let x: u64 = v.parse().map_err(|_| bad(key, v, "not a nonnegative integer"))?;
    Ok(x.to_string())
}

fn list<'a>(v: &'a str) -> impl Iterator<Item = &'a str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn canonical(spec: &KeySpec, v: &str) -> Result<String> {
    let key = spec.key;
    let v = v.trim();
    Ok(match spec.kind {
        Kind::Int => canon_int(key, v)?,
        Kind::Float => canon_float(key, v)?,
        Kind::Switch => {
            let on = parse_switch(v).map_err(|_| bad(key, v, "expected on or off"))?;
            if on { "on" } else { "off" }.to_string()
        }
        Kind::Family => v.parse::<Family>().map_err(|e| bad(key, v, &e.to_string()))?.to_string(),
        Kind::Mode => v.parse::<MixupMode>().map_err(|e| bad(key, v, &e.to_string()))?.to_string(),
        Kind::IntList => list(v).map(|x| canon_int(key, x)).collect::<Result<Vec<_>>>()?.join(","),
        Kind::FloatList => list(v).map(|x| canon_float(key, x)).collect::<Result<Vec<_>>>()?.join(","),
        Kind::Perturbations => list(v)
            .map(|x| x.parse::<Perturbation>().map(|p| p.to_string()))
            .collect::<Result<Vec<_>>>()?
            .join(","),
        Kind::Text => {
            if v.is_empty() || v.contains(char::is_whitespace) {
                return Err(bad(key, v, "expected one word"));
            }
            v.to_string()
        }
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = KEYS
            .iter()
            .map(|k| (k.key, canonical(k, k.default).expect("defaults are valid")))
            .collect();
        RunConfig { values }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got '{line}'", lineno + 1))
            })?;
            let key = key.trim();
            if seen.contains(&key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            seen.push(key.to_string());
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = find(key).ok_or_else(|| Error::UnknownKey(key.to_string()))?;
        self.values.insert(spec.key, canonical(spec, value)?);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownKey(key.to_string()))
    }

    /// Every key in table order with its documentation.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved run configuration\n");
        for k in KEYS {
            let _ = writeln!(out, "\n# {} (default {})", k.doc, k.default);
            let _ = writeln!(out, "{} = {}", k.key, self.values[k.key]);
        }
        out
    }

    /// Short content hash of the canonical form.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for k in KEYS {
            h.update(format!("{}={}\n", k.key, self.values[k.key]));
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_FILE);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }

    fn int(&self, key: &str) -> usize {
        self.values[key].parse().expect("canonical integer")
    }

    fn float(&self, key: &str) -> f64 {
        self.values[key].parse().expect("canonical float")
    }

    fn switch(&self, key: &str) -> bool {
        self.values[key] == "on"
    }

    fn ints(&self, key: &str) -> Vec<usize> {
        list(&self.values[key]).map(|x| x.parse().expect("canonical integer")).collect()
    }

    fn floats(&self, key: &str) -> Vec<f64> {
        list(&self.values[key]).map(|x| x.parse().expect("canonical float")).collect()
    }

    pub fn seed(&self) -> u64 {
        self.values["seed"].parse().expect("canonical integer")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.values.insert("seed", seed.to_string());
    }

    pub fn stage_seed(&self, tag: &str) -> u64 {
        derive_seed(self.seed(), tag, 0)
    }

    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.seed(),
            image_size: self.int("corpus.image_size"),
            train_real: self.int("corpus.train_real"),
            train_fake: self.int("corpus.train_fake"),
            train_family: self.values["corpus.train_family"].parse().expect("canonical family"),
            eval_per_family: self.int("corpus.eval_per_family"),
            fake: FakeParams {
                dct_step: self.float("corpus.dct_step"),
                grid_amplitude: self.float("corpus.grid_amplitude"),
                grid_period: self.int("corpus.grid_period"),
            },
        }
    }

    pub fn toggles(&self) -> Toggles {
        Toggles {
            mda: self.switch("module.mda"),
            lora: self.switch("module.lora"),
            hirp: self.switch("module.hirp"),
            clf: self.switch("module.clf"),
            cgf: self.switch("module.cgf"),
        }
    }

    pub fn set_toggles(&mut self, t: Toggles) {
        for name in Toggles::NAMES {
            let on = t.get(name).expect("known toggle");
            self.values.insert(find(&format!("module.{name}")).unwrap().key, if on { "on" } else { "off" }.into());
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                embed_dim: self.int("encoder.embed_dim"),
                layers: self.int("encoder.layers"),
                heads: self.int("encoder.heads"),
                patch_size: self.int("encoder.patch_size"),
                image_size: self.int("corpus.image_size"),
                channels: crate::corpus::CHANNELS,
                mlp_dim: self.int("encoder.mlp_dim"),
                selected_layers: self.ints("encoder.selected_layers"),
                lora_rank: self.int("lora.rank"),
                lora_alpha: self.float("lora.alpha"),
            },
            scales: self.ints("fusion.scales"),
            cgf_hidden: self.int("fusion.cgf_hidden"),
            head_hidden: self.int("head.hidden"),
            toggles: self.toggles(),
        }
    }

    pub fn mixup(&self) -> MixupConfig {
        MixupConfig {
            alpha: self.float("mixup.alpha"),
            mix_fraction: self.float("mixup.fraction"),
            mode: self.values["mixup.mode"].parse().expect("canonical mode"),
        }
    }

    pub fn pretext_enabled(&self) -> bool {
        self.switch("pretext.enabled")
    }

    pub fn pretext(&self) -> PretextConfig {
        PretextConfig {
            epochs: self.int("pretext.epochs"),
            batch_size: self.int("pretext.batch"),
            adam: AdamConfig {
                lr: self.float("pretext.lr"),
                ..AdamConfig::default()
            },
            seed: self.stage_seed("pretext"),
            holdout_fraction: self.float("pretext.holdout"),
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig {
                lr: self.float("train.lr"),
                beta1: self.float("train.beta1"),
                beta2: self.float("train.beta2"),
                eps: self.float("train.eps"),
            },
            batch_size: self.int("train.batch"),
            epochs: self.int("train.epochs"),
            seed: self.stage_seed("train"),
            mixup: self.mixup(),
            data_fraction: self.float("train.data_fraction"),
            shuffle_grid: self.int("corpus.image_size") / self.int("encoder.patch_size").max(1),
        }
    }

    pub fn eval_split(&self) -> &str {
        &self.values["eval.split"]
    }

    pub fn pca_k(&self) -> usize {
        self.int("eval.pca_k")
    }

    pub fn robustness_grid(&self) -> Vec<Perturbation> {
        list(&self.values["robustness.grid"])
            .map(|p| p.parse().expect("canonical perturbation"))
            .collect()
    }

    pub fn bench(&self) -> (usize, usize) {
        (self.int("bench.images"), self.int("bench.warmup"))
    }

    pub fn ablate_seeds(&self) -> Vec<u64> {
        self.ints("ablate.seeds").into_iter().map(|s| s as u64).collect()
    }

    pub fn ablate_alphas(&self) -> Vec<f64> {
        self.floats("ablate.alphas")
    }

    pub fn ablate_fractions(&self) -> Vec<f64> {
        self.floats("ablate.fractions")
    }

    /// Cross-key checks beyond per-value parsing.
    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train().validate()?;
        let p = self.pretext();
        if p.batch_size == 0 || !(0.0..1.0).contains(&p.holdout_fraction) {
            return Err(Error::Config("pretext.batch must be positive and pretext.holdout in [0, 1)".into()));
        }
        if self.corpus().image_size % 2 != 0 {
            return Err(Error::Config("corpus.image_size must be even".into()));
        }
        if self.ablate_seeds().is_empty() {
            return Err(Error::Config("ablate.seeds is empty".into()));
        }
        if self.pca_k() == 0 {
            return Err(Error::Config("eval.pca_k must be positive".into()));
        }
        Ok(())
    }
}
