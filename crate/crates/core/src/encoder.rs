//! Toy Vision Transformer with frozen base weights and per-projection LoRA
//! adapters on the query, key and value maps.
//!
//! Tokens are row vectors, so a projection reads `x·W + b` and the adapted
//! projection is `x·W + b + (α/r)·(x·A)·B` with `A: d×r`, `B: r×d`. `B`
//! starts at zero, so an untrained adapter leaves the frozen output intact.
//! Blocks are pre-layernorm: `x + Attn(LN(x))`, then `h + MLP(LN(h))`.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub mlp_dim: usize,
    /// 1-based, strictly increasing.
    pub selected_layers: Vec<usize>,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 64,
            layers: 6,
            heads: 4,
            patch_size: 8,
            image_size: 64,
            channels: 3,
            mlp_dim: 128,
            selected_layers: vec![2, 4, 6],
            lora_rank: 8,
            lora_alpha: 16.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.layers == 0 || self.mlp_dim == 0 || self.channels == 0 {
            return bad("layers, mlp_dim and channels must be positive".into());
        }
        if self.selected_layers.is_empty()
            || self.selected_layers.windows(2).any(|w| w[0] >= w[1])
            || self.selected_layers[0] == 0
            || *self.selected_layers.last().unwrap() > self.layers
        {
            return bad(format!(
                "selected_layers {:?} must be strictly increasing within 1..={}",
                self.selected_layers, self.layers
            ));
        }
        if self.lora_alpha <= 0.0 {
            return bad("lora_alpha must be positive".into());
        }
        Ok(())
    }

    /// Side length of the patch grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    /// `2 · 3 · L · d · r`.
    pub fn lora_param_count(&self) -> usize {
        2 * 3 * self.layers * self.embed_dim * self.lora_rank
    }

    pub fn backbone_param_count(&self) -> usize {
        let (d, m) = (self.embed_dim, self.mlp_dim);
        let embed = self.patch_dim() * d + d + d + (self.num_patches() + 1) * d;
        let block = 2 * 2 * d + 4 * (d * d + d) + (d * m + m) + (m * d + d);
        embed + self.layers * block
    }
}

fn layer_prefix(layer: usize) -> String {
    format!("frozen.vit.l{layer}")
}

fn gaussian(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Randomly initialized backbone (`frozen.vit.*`).
pub fn init_backbone(cfg: &EncoderConfig, rng: &mut Rng, store: &mut ParamStore) {
    let (d, m) = (cfg.embed_dim, cfg.mlp_dim);
    let pd = cfg.patch_dim();
    store.insert("frozen.vit.patch.w", gaussian(rng, &[pd, d], (1.0 / pd as f64).sqrt()));
    store.insert("frozen.vit.patch.b", Tensor::zeros(&[d]));
    store.insert("frozen.vit.cls", gaussian(rng, &[d], 0.02));
    store.insert("frozen.vit.pos", gaussian(rng, &[cfg.num_patches() + 1, d], 0.02));
    let sd = (1.0 / d as f64).sqrt();
    for l in 1..=cfg.layers {
        let p = layer_prefix(l);
        for ln in ["ln1", "ln2"] {
            store.insert(format!("{p}.{ln}.g"), Tensor::full(&[d], 1.0));
            store.insert(format!("{p}.{ln}.b"), Tensor::zeros(&[d]));
        }
        for proj in ["q", "k", "v", "o"] {
            store.insert(format!("{p}.attn.w{proj}"), gaussian(rng, &[d, d], sd));
            store.insert(format!("{p}.attn.b{proj}"), Tensor::zeros(&[d]));
        }
        store.insert(format!("{p}.mlp.w1"), gaussian(rng, &[d, m], sd));
        store.insert(format!("{p}.mlp.b1"), Tensor::zeros(&[m]));
        store.insert(format!("{p}.mlp.w2"), gaussian(rng, &[m, d], (1.0 / m as f64).sqrt()));
        store.insert(format!("{p}.mlp.b2"), Tensor::zeros(&[d]));
    }
}

pub fn lora_name(layer: usize, proj: char, factor: char) -> String {
    format!("lora.l{layer}.{proj}.{factor}")
}

/// LoRA adapters (`lora.*`): `A` Gaussian, `B` zero.
pub fn init_lora(cfg: &EncoderConfig, rng: &mut Rng, store: &mut ParamStore) {
    let (d, r) = (cfg.embed_dim, cfg.lora_rank);
    for l in 1..=cfg.layers {
        for proj in ['q', 'k', 'v'] {
            store.insert(lora_name(l, proj, 'a'), gaussian(rng, &[d, r], (1.0 / d as f64).sqrt()));
            store.insert(lora_name(l, proj, 'b'), Tensor::zeros(&[r, d]));
        }
    }
}

/// Flatten non-overlapping `p×p` patches (row-major over the patch grid;
/// features ordered channel, row, column) into `[N, C·p·p]`.
pub fn patchify(cfg: &EncoderConfig, image: &Image) -> Result<Tensor> {
    let expected = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.dims() != expected {
        return Err(Error::shape("patch_embed", &image.dims(), &expected));
    }
    let (p, grid) = (cfg.patch_size, cfg.grid());
    let mut data = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..cfg.channels {
                for y in 0..p {
                    for x in 0..p {
                        data.push(image.get(c, gy * p + y, gx * p + x) as f64);
                    }
                }
            }
        }
    }
    Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], data)
}

/// `[CLS; patches·W + b] + pos`, shape `[N + 1, d]`.
pub fn patch_embed(g: &mut Graph, p: &BoundParams, cfg: &EncoderConfig, image: &Image) -> Result<Var> {
    let patches = g.constant(patchify(cfg, image)?);
    let proj = g.matmul(patches, p.get("frozen.vit.patch.w")?)?;
    let proj = g.add_bias(proj, p.get("frozen.vit.patch.b")?)?;
    let cls = g.reshape(p.get("frozen.vit.cls")?, &[1, cfg.embed_dim])?;
    let tokens = g.concat_rows(&[cls, proj])?;
    g.add(tokens, p.get("frozen.vit.pos")?)
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Query/key/value projection with an optional low-rank update.
fn adapted_projection(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &EncoderConfig,
    u: Var,
    layer: usize,
    proj: char,
    lora: bool,
) -> Result<Var> {
    let pre = layer_prefix(layer);
    let base = linear(
        g,
        u,
        p.get(&format!("{pre}.attn.w{proj}"))?,
        p.get(&format!("{pre}.attn.b{proj}"))?,
    )?;
    if !lora || cfg.lora_rank == 0 {
        return Ok(base);
    }
    let ua = g.matmul(u, p.get(&lora_name(layer, proj, 'a'))?)?;
    let uab = g.matmul(ua, p.get(&lora_name(layer, proj, 'b'))?)?;
    let delta = g.scale(uab, cfg.lora_scale())?;
    g.add(base, delta)
}

/// Scaled dot-product attention over `heads` column groups of already
/// projected `q`, `k`, `v` (each `[T, d]`). Returns `[T, d]`.
pub fn multi_head_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = g.try_value(q)?.shape()[1];
    if d % heads != 0 {
        return Err(Error::InvalidArgument(format!("{d} columns do not split into {heads} heads")));
    }
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores, 1)?;
        outs.push(g.matmul(attn, vh)?);
    }
    g.concat_cols(&outs)
}

/// Attention sublayer of block `layer` (1-based): `x + Attn(LN1(x))`, with
/// LoRA-adapted query/key/value projections when `lora` is set.
pub fn attention_with_lora(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &EncoderConfig,
    tokens: Var,
    layer: usize,
    lora: bool,
) -> Result<Var> {
    if layer == 0 || layer > cfg.layers {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} outside 1..={}",
            cfg.layers
        )));
    }
    let pre = layer_prefix(layer);
    let u = g.layer_norm(
        tokens,
        p.get(&format!("{pre}.ln1.g"))?,
        p.get(&format!("{pre}.ln1.b"))?,
        LN_EPS,
    )?;
    let q = adapted_projection(g, p, cfg, u, layer, 'q', lora)?;
    let k = adapted_projection(g, p, cfg, u, layer, 'k', lora)?;
    let v = adapted_projection(g, p, cfg, u, layer, 'v', lora)?;
    let heads = multi_head_attention(g, q, k, v, cfg.heads)?;
    let o = linear(
        g,
        heads,
        p.get(&format!("{pre}.attn.wo"))?,
        p.get(&format!("{pre}.attn.bo"))?,
    )?;
    g.add(tokens, o)
}

/// Full transformer block: attention sublayer followed by `h + MLP(LN2(h))`.
pub fn transformer_block(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &EncoderConfig,
    tokens: Var,
    layer: usize,
    lora: bool,
) -> Result<Var> {
    let h = attention_with_lora(g, p, cfg, tokens, layer, lora)?;
    let pre = layer_prefix(layer);
    let u = g.layer_norm(
        h,
        p.get(&format!("{pre}.ln2.g"))?,
        p.get(&format!("{pre}.ln2.b"))?,
        LN_EPS,
    )?;
    let m = linear(g, u, p.get(&format!("{pre}.mlp.w1"))?, p.get(&format!("{pre}.mlp.b1"))?)?;
    let m = g.gelu(m)?;
    let m = linear(g, m, p.get(&format!("{pre}.mlp.w2"))?, p.get(&format!("{pre}.mlp.b2"))?)?;
    g.add(h, m)
}

/// CLS token and patch tokens of one encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    /// `[d]`
    pub cls: Var,
    /// `[N, d]`
    pub patches: Var,
}

pub struct EncoderPass {
    pub selected: Vec<LayerOutput>,
    /// Tokens after the last block, `[N + 1, d]`.
    pub last: Var,
}

/// Run the encoder and collect the selected layers' outputs.
pub fn forward_collect(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &EncoderConfig,
    image: &Image,
    lora: bool,
) -> Result<EncoderPass> {
    let mut x = patch_embed(g, p, cfg, image)?;
    let n = cfg.num_patches();
    let mut selected = Vec::with_capacity(cfg.selected_layers.len());
    let stop = *cfg.selected_layers.last().unwrap_or(&cfg.layers);
    let stop = stop.max(cfg.layers);
    for layer in 1..=stop {
        x = transformer_block(g, p, cfg, x, layer, lora)?;
        if cfg.selected_layers.contains(&layer) {
            let cls = g.row(x, 0)?;
            let patches = g.slice_rows(x, 1, n)?;
            selected.push(LayerOutput { cls, patches });
        }
    }
    Ok(EncoderPass { selected, last: x })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 8,
            layers: 2,
            heads: 2,
            patch_size: 4,
            image_size: 8,
            channels: 3,
            mlp_dim: 12,
            selected_layers: vec![1, 2],
            lora_rank: 2,
            lora_alpha: 4.0,
        }
    }

    fn image(seed: u64, size: usize) -> Image {
        let mut r = rng_from_seed(seed);
        Image::new(3, size, size, (0..3 * size * size).map(|_| r.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn default_geometry() {
        let c = EncoderConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 64);
        assert_eq!(c.lora_param_count(), 18432);
        assert_eq!(c.lora_scale(), 2.0);
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::default();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::default();
        c.selected_layers = vec![4, 2];
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::default();
        c.selected_layers = vec![7];
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_image_and_weights_give_positional_embeddings() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        init_backbone(&cfg, &mut rng_from_seed(1), &mut store);
        *store.get_mut("frozen.vit.patch.w").unwrap() = Tensor::zeros(&[cfg.patch_dim(), 8]);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let t = patch_embed(&mut g, &p, &cfg, &Image::filled(3, 8, 8, 0.0)).unwrap();
        let pos = store.get("frozen.vit.pos").unwrap().data();
        let cls = store.get("frozen.vit.cls").unwrap().data();
        let out = g.value(t).data();
        for c in 0..8 {
            assert_eq!(out[c], cls[c] + pos[c]);
        }
        assert_eq!(&out[8..], &pos[8..]);
    }

    #[test]
    fn patch_permutation_is_equivariant_without_positions() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        init_backbone(&cfg, &mut rng_from_seed(2), &mut store);
        *store.get_mut("frozen.vit.pos").unwrap() = Tensor::zeros(&[cfg.num_patches() + 1, 8]);
        let img = image(3, 8);
        let perm = [2usize, 0, 3, 1];
        let shuffled = crate::augment::permute_patches(&img, 2, &perm).unwrap();
        let embed = |im: &Image| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let t = patch_embed(&mut g, &p, &cfg, im).unwrap();
            g.value(t).data().to_vec()
        };
        let (a, b) = (embed(&img), embed(&shuffled));
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(b[(dst + 1) * 8..(dst + 2) * 8], a[(src + 1) * 8..(src + 2) * 8]);
        }
        assert!(patchify(&cfg, &image(1, 16)).is_err());
    }

    #[test]
    fn single_token_attention_returns_value_row() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(1, 4, vec![0.3, -1.0, 2.0, 0.1]).unwrap());
        let k = g.constant(Tensor::matrix(1, 4, vec![1.0, 0.5, -0.5, 4.0]).unwrap());
        let v = g.constant(Tensor::matrix(1, 4, vec![7.0, -3.0, 0.25, 1.5]).unwrap());
        let out = multi_head_attention(&mut g, q, k, v, 2).unwrap();
        assert_eq!(g.value(out).data(), &[7.0, -3.0, 0.25, 1.5]);
    }

    #[test]
    fn zero_b_matches_frozen_attention_bitwise() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(4);
        init_backbone(&cfg, &mut rng, &mut store);
        init_lora(&cfg, &mut rng, &mut store);
        let run = |lora: bool| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let x = patch_embed(&mut g, &p, &cfg, &image(5, 8)).unwrap();
            let y = attention_with_lora(&mut g, &p, &cfg, x, 1, lora).unwrap();
            g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn selected_layers_and_freeze_contract() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(6);
        init_backbone(&cfg, &mut rng, &mut store);
        init_lora(&cfg, &mut rng, &mut store);
        // a nonzero B so gradients reach A as well
        for l in 1..=2 {
            for proj in ['q', 'k', 'v'] {
                let t = store.get_mut(&lora_name(l, proj, 'b')).unwrap();
                t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * (i as f64).sin());
            }
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let pass = forward_collect(&mut g, &p, &cfg, &image(7, 8), true).unwrap();
        assert_eq!(pass.selected.len(), 2);
        let s = g.sum_all(pass.last).unwrap();
        let sq = g.mul(pass.last, pass.last).unwrap();
        let s2 = g.sum_all(sq).unwrap();
        let loss = g.add(s, s2).unwrap();
        g.backward(loss).unwrap();
        for name in store.names() {
            let v = p.get(name).unwrap();
            if name.starts_with("frozen.") {
                assert!(g.grad(v).is_none(), "{name} received a gradient");
            } else {
                let gr = g.grad(v).unwrap();
                assert!(gr.data().iter().any(|&x| x != 0.0), "{name} has zero gradient");
            }
        }
    }

    #[test]
    fn lora_layer_passes_gradcheck() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(8);
        init_backbone(&cfg, &mut rng, &mut store);
        init_lora(&cfg, &mut rng, &mut store);
        let img = image(9, 8);
        let names = [lora_name(1, 'q', 'a'), lora_name(1, 'v', 'a'), lora_name(1, 'k', 'b')];
        let mut params: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        params[2].data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * (i as f64 * 0.7).cos());
        let err = crate::gradcheck::grad_check(
            |g, vars| {
                let mut p = store.bind(g, false);
                for (n, &v) in names.iter().zip(vars) {
                    p.insert(n.clone(), v);
                }
                let x = patch_embed(g, &p, &cfg, &img)?;
                let y = attention_with_lora(g, &p, &cfg, x, 1, true)?;
                let y2 = g.mul(y, y)?;
                g.sum_all(y2)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn backbone_census_matches_store() {
        let cfg = EncoderConfig::default();
        let mut store = ParamStore::new();
        init_backbone(&cfg, &mut rng_from_seed(0), &mut store);
        assert_eq!(store.count_params(), cfg.backbone_param_count());
    }
}
