//! The full detector: encoder, fusion and head over one parameter store.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{self, HarConfig};
use crate::head;
use crate::image::Image;
use crate::params::{BoundParams, ParamKind, ParamStore};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const ARCH_TENSOR: &str = "meta.arch";
const ARCH_VERSION: f64 = 1.0;

/// Module switches of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Toggles {
    pub mda: bool,
    pub lora: bool,
    pub hirp: bool,
    pub clf: bool,
    pub cgf: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            mda: true,
            lora: true,
            hirp: true,
            clf: true,
            cgf: true,
        }
    }
}

impl Toggles {
    pub const NAMES: [&'static str; 5] = ["mda", "lora", "hirp", "clf", "cgf"];

    pub fn cls_only() -> Self {
        Toggles {
            hirp: false,
            clf: false,
            cgf: false,
            ..Toggles::default()
        }
    }

    fn slot(&mut self, name: &str) -> Result<&mut bool> {
        Ok(match name {
            "mda" => &mut self.mda,
            "lora" => &mut self.lora,
            "hirp" => &mut self.hirp,
            "clf" => &mut self.clf,
            "cgf" => &mut self.cgf,
            _ => return Err(Error::Config(format!("unknown module toggle '{name}'"))),
        })
    }

    pub fn get(&self, name: &str) -> Result<bool> {
        let mut copy = *self;
        copy.slot(name).map(|b| *b)
    }

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        *self.slot(name)? = on;
        Ok(())
    }

    /// Apply `name=on|off` (also accepts `true/false`, `1/0`).
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (name, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("toggle '{assignment}' is not name=on|off")))?;
        let on = parse_switch(value.trim())?;
        self.set(name.trim(), on)
    }

    fn as_array(&self) -> [bool; 5] {
        [self.mda, self.lora, self.hirp, self.clf, self.cgf]
    }

    fn from_array(a: [bool; 5]) -> Self {
        Toggles {
            mda: a[0],
            lora: a[1],
            hirp: a[2],
            clf: a[3],
            cgf: a[4],
        }
    }

    /// The eight arms of the combined ablation table, in table order.
    pub fn ablation_arms() -> Vec<Toggles> {
        const T: bool = true;
        const F: bool = false;
        [
            [F, T, F, F, F],
            [F, T, T, T, T],
            [T, F, T, T, T],
            [T, T, F, F, F],
            [T, T, T, F, F],
            [T, T, T, T, F],
            [T, T, T, F, T],
            [T, T, T, T, T],
        ]
        .into_iter()
        .map(Toggles::from_array)
        .collect()
    }
}

pub fn parse_switch(value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("'{value}' is not on/off"))),
    }
}

impl fmt::Display for Toggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Toggles::NAMES
            .iter()
            .zip(self.as_array())
            .map(|(n, on)| format!("{n}={}", if on { "on" } else { "off" }))
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Toggles {
    type Err = Error;

    /// Comma-separated assignments applied on top of the all-on default.
    fn from_str(s: &str) -> Result<Self> {
        let mut t = Toggles::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            t.apply(part)?;
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub scales: Vec<usize>,
    pub cgf_hidden: usize,
    pub head_hidden: usize,
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        ModelConfig {
            cgf_hidden: encoder.embed_dim,
            encoder,
            scales: vec![2, 4, 8],
            head_hidden: head::DEFAULT_HIDDEN,
            toggles: Toggles::default(),
        }
    }
}

impl ModelConfig {
    pub fn har(&self) -> HarConfig {
        HarConfig {
            scales: self.scales.clone(),
            hirp: self.toggles.hirp,
            clf: self.toggles.clf,
            cgf: self.toggles.cgf,
            cgf_hidden: self.cgf_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.har().validate(self.encoder.grid())?;
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form trainable count: LoRA (when enabled) + fusion + head.
    pub fn trainable_census(&self) -> usize {
        let e = &self.encoder;
        let lora = if self.toggles.lora { e.lora_param_count() } else { 0 };
        lora + self.har().param_count(e.selected_layers.len(), e.embed_dim)
            + head::head_param_count(e.embed_dim, self.head_hidden)
    }

    /// Closed-form total count: frozen backbone plus trainable.
    pub fn total_census(&self) -> usize {
        self.encoder.backbone_param_count() + self.trainable_census()
    }

    fn encode_arch(&self) -> Tensor {
        let e = &self.encoder;
        let mut v = vec![
            ARCH_VERSION,
            e.embed_dim as f64,
            e.layers as f64,
            e.heads as f64,
            e.patch_size as f64,
            e.image_size as f64,
            e.channels as f64,
            e.mlp_dim as f64,
            e.lora_rank as f64,
            e.lora_alpha,
            self.cgf_hidden as f64,
            self.head_hidden as f64,
        ];
        v.extend(self.toggles.as_array().map(|b| b as u8 as f64));
        v.push(self.scales.len() as f64);
        v.extend(self.scales.iter().map(|&s| s as f64));
        v.push(e.selected_layers.len() as f64);
        v.extend(e.selected_layers.iter().map(|&s| s as f64));
        Tensor::vector(v)
    }

    fn decode_arch(t: &Tensor) -> Result<Self> {
        let bad = || Error::InvalidArgument("malformed meta.arch tensor".into());
        let mut it = t.data().iter().copied();
        if it.next() != Some(ARCH_VERSION) {
            return Err(bad());
        }
        let mut real = || it.next().ok_or_else(bad);
        let mut vals = Vec::new();
        // eight integer fields, then lora_alpha, then the rest are integers
        for _ in 0..8 {
            vals.push(real()?);
        }
        let lora_alpha = real()?;
        let mut int = || -> Result<usize> {
            let x = real()?;
            if x < 0.0 || x.fract() != 0.0 {
                return Err(bad());
            }
            Ok(x as usize)
        };
        let cgf_hidden = int()?;
        let head_hidden = int()?;
        let mut flags = [false; 5];
        for f in flags.iter_mut() {
            *f = int()? == 1;
        }
        let ns = int()?;
        let scales = (0..ns).map(|_| int()).collect::<Result<Vec<_>>>()?;
        let nl = int()?;
        let selected_layers = (0..nl).map(|_| int()).collect::<Result<Vec<_>>>()?;
        if vals.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
            return Err(bad());
        }
        let u: Vec<usize> = vals.iter().map(|&x| x as usize).collect();
        let (embed_dim, layers, heads, patch_size, image_size, channels, mlp_dim, lora_rank) =
            (u[0], u[1], u[2], u[3], u[4], u[5], u[6], u[7]);
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                embed_dim,
                layers,
                heads,
                patch_size,
                image_size,
                channels,
                mlp_dim,
                selected_layers,
                lora_rank,
                lora_alpha,
            },
            scales,
            cgf_hidden,
            head_hidden,
            toggles: Toggles::from_array(flags),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything one forward pass produces.
pub struct Forward {
    /// Probability of "fake", `[1]`.
    pub prob: Var,
    pub logit: Var,
    /// Fused representation fed to the head, `[d]`.
    pub features: Var,
    pub weights: fusion::FusionWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Detector {
    /// Random initialization; each parameter group draws from its own
    /// sub-stream of `seed` so toggling one module leaves the others alone.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let e = &config.encoder;
        let mut params = ParamStore::new();
        encoder::init_backbone(e, &mut stream(seed, "init.backbone", 0), &mut params);
        if config.toggles.lora {
            encoder::init_lora(e, &mut stream(seed, "init.lora", 0), &mut params);
        }
        fusion::init_fusion(
            &config.har(),
            e.selected_layers.len(),
            e.embed_dim,
            &mut stream(seed, "init.fusion", 0),
            &mut params,
        );
        head::init_head(e.embed_dim, config.head_hidden, &mut stream(seed, "init.head", 0), &mut params);
        params.insert(ARCH_TENSOR, config.encode_arch());
        Ok(Detector { config, params })
    }

    /// Replace the backbone (`frozen.*`) with another detector's.
    pub fn adopt_backbone(&mut self, backbone: &ParamStore) -> Result<()> {
        for (name, t) in backbone.iter().filter(|(n, _)| n.starts_with(crate::params::FROZEN_PREFIX)) {
            let own = self.params.get_mut(name)?;
            if own.shape() != t.shape() {
                return Err(Error::shape("adopt_backbone", own.shape(), t.shape()));
            }
            *own = t.clone();
        }
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.params.count(ParamKind::Trainable)
    }

    pub fn total_count(&self) -> usize {
        self.params.count_params()
    }

    /// Build the full forward graph for one image.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, image: &Image) -> Result<Forward> {
        let e = &self.config.encoder;
        let pass = encoder::forward_collect(g, p, e, image, self.config.toggles.lora)?;
        let har = fusion::har_forward(g, p, &self.config.har(), &pass.selected, e.grid())?;
        let logit = head::head_logit(g, p, har.fused)?;
        let prob = g.sigmoid(logit)?;
        Ok(Forward {
            prob,
            logit,
            features: har.fused,
            weights: har.weights,
        })
    }

    /// Inference-only score of one image.
    pub fn score(&self, image: &Image) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let f = self.forward(&mut g, &p, image)?;
        Ok(g.value(f.prob).item())
    }

    /// Score and fused feature vector of one image.
    pub fn score_and_features(&self, image: &Image) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let f = self.forward(&mut g, &p, image)?;
        Ok((g.value(f.prob).item(), g.value(f.features).data().to_vec()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let params = ParamStore::load(path)?;
        Detector::from_params(params)
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let config = ModelConfig::decode_arch(params.get(ARCH_TENSOR)?)?;
        let reference = Detector::init(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape("checkpoint", got.shape(), t.shape()));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} tensors, architecture expects {}",
                params.len(),
                reference.params.len()
            )));
        }
        Ok(Detector { config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_census_is_exact() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.trainable_census(), 29996);
        let det = Detector::init(cfg.clone(), 7).unwrap();
        assert_eq!(det.trainable_count(), 29996);
        assert_eq!(det.total_count(), cfg.total_census());
    }

    #[test]
    fn census_follows_toggles() {
        for arm in Toggles::ablation_arms() {
            let cfg = ModelConfig {
                toggles: arm,
                ..ModelConfig::default()
            };
            let det = Detector::init(cfg.clone(), 1).unwrap();
            assert_eq!(det.trainable_count(), cfg.trainable_census(), "{arm}");
        }
        assert_eq!(Toggles::ablation_arms().len(), 8);
    }

    #[test]
    fn toggle_parsing() {
        let t: Toggles = "mda=off, cgf=0".parse().unwrap();
        assert!(!t.mda && !t.cgf && t.lora && t.hirp && t.clf);
        assert_eq!(t.to_string().parse::<Toggles>().unwrap(), t);
        assert!("nope=on".parse::<Toggles>().is_err());
        assert!("mda=maybe".parse::<Toggles>().is_err());
    }

    #[test]
    fn checkpoint_restores_architecture() {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                embed_dim: 16,
                layers: 2,
                heads: 2,
                patch_size: 8,
                image_size: 32,
                mlp_dim: 24,
                selected_layers: vec![1, 2],
                ..EncoderConfig::default()
            },
            scales: vec![2, 4],
            cgf_hidden: 16,
            head_hidden: 8,
            toggles: "clf=off".parse().unwrap(),
        };
        let det = Detector::init(cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hxc");
        det.save(&path).unwrap();
        let back = Detector::load(&path).unwrap();
        assert_eq!(back.config, det.config);
        let img = Image::filled(3, 32, 32, 0.25);
        let (a, b) = (det.score(&img).unwrap(), back.score(&img).unwrap());
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}
