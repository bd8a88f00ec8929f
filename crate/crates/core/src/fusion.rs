//! Hierarchical artifact-aware fusion of encoder tokens.
//!
//! Three stages, each a softmax-normalized convex combination:
//! region pooling turns a layer's patch grid into one region token by
//! averaging inside `s×s` windows, taking the elementwise max over windows,
//! and mixing scales with `softmax(β̂)`; cross-layer fusion blends a token
//! type across the selected layers with `softmax(aᵗ)`; cross-granularity
//! fusion blends the fused CLS and region vectors with weights predicted by
//! a two-layer GELU MLP.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, ReduceKind, Var};
use crate::encoder::LayerOutput;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BETA: &str = "har.beta";
pub const A_CLS: &str = "har.a_cls";
pub const A_REG: &str = "har.a_reg";
pub const CGF_W1: &str = "har.cgf.w1";
pub const CGF_B1: &str = "har.cgf.b1";
pub const CGF_W2: &str = "har.cgf.w2";
pub const CGF_B2: &str = "har.cgf.b2";

/// Which fusion stages run. With region pooling off only the CLS stream
/// exists; with cross-layer fusion off each stream uses the last selected
/// layer; with cross-granularity fusion off (and pooling on) the streams
/// are averaged with fixed weights ½.
#[derive(Clone, Debug, PartialEq)]
pub struct HarConfig {
    pub scales: Vec<usize>,
    pub hirp: bool,
    pub clf: bool,
    pub cgf: bool,
    pub cgf_hidden: usize,
}

impl HarConfig {
    pub fn new(embed_dim: usize) -> Self {
        HarConfig {
            scales: vec![2, 4, 8],
            hirp: true,
            clf: true,
            cgf: true,
            cgf_hidden: embed_dim,
        }
    }

    pub fn validate(&self, grid: usize) -> Result<()> {
        if self.hirp {
            if self.scales.is_empty() {
                return Err(Error::Config("hirp needs at least one window scale".into()));
            }
            if let Some(s) = self.scales.iter().find(|&&s| s == 0 || grid % s != 0) {
                return Err(Error::Config(format!(
                    "window scale {s} does not tile the {grid}x{grid} patch grid"
                )));
            }
        }
        if self.cgf && self.hirp && self.cgf_hidden == 0 {
            return Err(Error::Config("cgf_hidden must be positive".into()));
        }
        Ok(())
    }

    fn uses_cgf(&self) -> bool {
        self.hirp && self.cgf
    }

    /// Trainable fusion parameters for `layers` selected layers of width `d`.
    pub fn param_count(&self, layers: usize, d: usize) -> usize {
        let mut n = 0;
        if self.hirp {
            n += self.scales.len();
        }
        if self.clf {
            n += layers;
            if self.hirp {
                n += layers;
            }
        }
        if self.uses_cgf() {
            let h = self.cgf_hidden;
            n += 2 * d * h + h + h * 2 + 2;
        }
        n
    }
}

/// Scale and layer logits start at zero (uniform weights); the CGF MLP gets
/// Gaussian weights with variance `1/fan_in` and zero biases.
pub fn init_fusion(cfg: &HarConfig, layers: usize, d: usize, rng: &mut Rng, store: &mut ParamStore) {
    if cfg.hirp {
        store.insert(BETA, Tensor::zeros(&[cfg.scales.len()]));
    }
    if cfg.clf {
        store.insert(A_CLS, Tensor::zeros(&[layers]));
        if cfg.hirp {
            store.insert(A_REG, Tensor::zeros(&[layers]));
        }
    }
    if cfg.uses_cgf() {
        let h = cfg.cgf_hidden;
        let mut gauss = |rows: usize, cols: usize| {
            let sd = (1.0 / rows as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::matrix(rows, cols, data).expect("sizes agree")
        };
        store.insert(CGF_W1, gauss(2 * d, h));
        store.insert(CGF_W2, gauss(h, 2));
        store.insert(CGF_B1, Tensor::zeros(&[h]));
        store.insert(CGF_B2, Tensor::zeros(&[2]));
    }
}

/// `softmax(logits)ᵀ · rows`: logits `[n]`, rows `[n, d]`, result `[d]`.
fn weighted_rows(g: &mut Graph, logits: Var, rows: Var) -> Result<Var> {
    let n = g.try_value(logits)?.numel();
    let w = g.softmax(logits, 0)?;
    let w = g.reshape(w, &[1, n])?;
    let out = g.matmul(w, rows)?;
    let d = g.value(out).numel();
    g.reshape(out, &[d])
}

/// Region token of a single window scale: mean inside each `s×s` window of
/// the `grid×grid` patch layout, then the elementwise max over windows.
pub fn hirp_scale(g: &mut Graph, patches: Var, grid: usize, s: usize) -> Result<Var> {
    let pooled = g.grid_avg_pool(patches, grid, grid, s)?;
    g.reduce(ReduceKind::Max, pooled, 0)
}

/// Region pooling of `patches` (`[grid², d]`) over several window scales,
/// mixed with `softmax(beta)`.
pub fn hirp(g: &mut Graph, patches: Var, grid: usize, scales: &[usize], beta: Var) -> Result<Var> {
    let n = g.try_value(patches)?.shape()[0];
    if n != grid * grid {
        return Err(Error::InvalidArgument(format!(
            "{n} patches do not form a {grid}x{grid} grid"
        )));
    }
    if g.value(beta).numel() != scales.len() {
        return Err(Error::shape("hirp", g.shape(beta), &[scales.len()]));
    }
    let per_scale = scales
        .iter()
        .map(|&s| hirp_scale(g, patches, grid, s))
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.stack(&per_scale)?;
    weighted_rows(g, beta, stacked)
}

/// Softmax-weighted sum of same-type tokens (each `[d]`) across layers.
pub fn cross_layer_fuse(g: &mut Graph, tokens: &[Var], logits: Var) -> Result<Var> {
    if g.try_value(logits)?.numel() != tokens.len() {
        return Err(Error::shape("cross_layer_fuse", g.shape(logits), &[tokens.len()]));
    }
    let stacked = g.stack(tokens)?;
    weighted_rows(g, logits, stacked)
}

/// Graph handles of the CGF MLP.
#[derive(Clone, Copy, Debug)]
pub struct CgfVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl CgfVars {
    pub fn from_params(p: &BoundParams) -> Result<Self> {
        Ok(CgfVars {
            w1: p.get(CGF_W1)?,
            b1: p.get(CGF_B1)?,
            w2: p.get(CGF_W2)?,
            b2: p.get(CGF_B2)?,
        })
    }
}

/// Cross-granularity fusion. Returns the fused vector `[d]` and the weight
/// pair `(w_cls, w_reg)` as a `[2]` tensor.
pub fn cgf(g: &mut Graph, z_cls: Var, z_reg: Var, p: CgfVars) -> Result<(Var, Var)> {
    let d = g.try_value(z_cls)?.numel();
    if g.try_value(z_reg)?.numel() != d {
        return Err(Error::shape("cgf", g.shape(z_cls), g.shape(z_reg)));
    }
    let both = g.stack(&[z_cls, z_reg])?;
    let flat = g.reshape(both, &[1, 2 * d])?;
    let h = g.matmul(flat, p.w1)?;
    let h = g.add_bias(h, p.b1)?;
    let h = g.gelu(h)?;
    let logits = g.matmul(h, p.w2)?;
    let logits = g.add_bias(logits, p.b2)?;
    let logits = g.reshape(logits, &[2])?;
    let w = g.softmax(logits, 0)?;
    let w_row = g.reshape(w, &[1, 2])?;
    let fused = g.matmul(w_row, both)?;
    Ok((g.reshape(fused, &[d])?, w))
}

/// Every normalized weight family of one fusion pass, for inspection.
#[derive(Clone, Debug, Default)]
pub struct FusionWeights {
    pub scale: Option<Var>,
    pub layer_cls: Option<Var>,
    pub layer_reg: Option<Var>,
    pub granularity: Option<Var>,
}

pub struct HarOutput {
    pub fused: Var,
    pub weights: FusionWeights,
}

/// Compose pooling, cross-layer fusion and cross-granularity fusion over
/// the selected layers' outputs, honoring the stage toggles in `cfg`.
pub fn har_forward(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &HarConfig,
    outputs: &[LayerOutput],
    grid: usize,
) -> Result<HarOutput> {
    let last = outputs
        .last()
        .ok_or_else(|| Error::InvalidArgument("har_forward needs at least one layer".into()))?;
    let mut weights = FusionWeights::default();

    let cls_tokens: Vec<Var> = outputs.iter().map(|o| o.cls).collect();
    let z_cls = if cfg.clf {
        let a = p.get(A_CLS)?;
        weights.layer_cls = Some(g.softmax(a, 0)?);
        cross_layer_fuse(g, &cls_tokens, a)?
    } else {
        last.cls
    };
    if !cfg.hirp {
        return Ok(HarOutput { fused: z_cls, weights });
    }

    let beta = p.get(BETA)?;
    weights.scale = Some(g.softmax(beta, 0)?);
    let z_reg = if cfg.clf {
        let reg = outputs
            .iter()
            .map(|o| hirp(g, o.patches, grid, &cfg.scales, beta))
            .collect::<Result<Vec<_>>>()?;
        let a = p.get(A_REG)?;
        weights.layer_reg = Some(g.softmax(a, 0)?);
        cross_layer_fuse(g, &reg, a)?
    } else {
        hirp(g, last.patches, grid, &cfg.scales, beta)?
    };

    let fused = if cfg.cgf {
        let (f, w) = cgf(g, z_cls, z_reg, CgfVars::from_params(p)?)?;
        weights.granularity = Some(w);
        f
    } else {
        let s = g.add(z_cls, z_reg)?;
        g.scale(s, 0.5)?
    };
    Ok(HarOutput { fused, weights })
}
