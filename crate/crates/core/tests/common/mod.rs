//! Checks shared by the property tests and the acceptance report. Every
//! oracle here is written independently of the library code it judges.

#![allow(dead_code)]

use himix::augment::{mixup, sample_lambda};
use himix::autodiff::{Graph, ReduceKind, Var};
use himix::encoder::{self, EncoderConfig};
use himix::fusion::{self, CgfVars, HarConfig};
use himix::gradcheck::grad_check_with_floor;
use himix::image::Image;
use himix::metrics::{self, ScoreRecord};
use himix::model::{Detector, ModelConfig, Toggles};
use himix::params::{kind_of, ParamKind};
use himix::rng::{rng_from_seed, Rng};
use himix::tensor::Tensor;
use himix::Result;
use rand::Rng as _;
use rand_distr::StandardNormal;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with_floor(f, params, eps, GRAD_FLOOR)
}

pub fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

pub fn rand_image(rng: &mut Rng, size: usize) -> Image {
    Image::new(3, size, size, (0..3 * size * size).map(|_| rng.random::<f32>()).collect()).unwrap()
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output coordinate matters.
fn project(g: &mut Graph, out: Var, r: &Tensor) -> Result<Var> {
    let r = g.constant(r.clone().reshape(g.shape(out))?);
    let m = g.mul(out, r)?;
    g.sum_all(m)
}

type Case = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One `(name, function, inputs)` per primitive op, drawn from `seed`.
pub fn primitive_cases(seed: u64) -> Vec<(&'static str, Case, Vec<Tensor>)> {
    let mut rng = rng_from_seed(seed);
    let (m, k, n) = (3, 4, 5);
    let mut t = |s: &[usize]| rand_tensor(&mut rng, s);
    let r_mn = t(&[m * n]);
    let r_mk = t(&[m * k]);
    let r_m = t(&[m]);
    let r_k = t(&[k]);
    let r_2mk = t(&[2 * m * k]);
    let r_mix = t(&[m * (k + n)]);
    let r_pool = t(&[4 * 3]);
    let mut cases: Vec<(&'static str, Case, Vec<Tensor>)> = Vec::new();
    macro_rules! case {
        ($name:expr, $inputs:expr, |$g:ident, $v:ident| $body:expr) => {{
            cases.push(($name, Box::new(move |$g: &mut Graph, $v: &[Var]| $body), $inputs));
        }};
    }
    {
        let r = r_mn.clone();
        case!("matmul", vec![t(&[m, k]), t(&[k, n])], |g, v| {
            let o = g.matmul(v[0], v[1])?;
            project(g, o, &r)
        });
    }
    for (name, which) in [("add", 0), ("mul", 1)] {
        let r = r_mk.clone();
        case!(name, vec![t(&[m, k]), t(&[m, k])], |g, v| {
            let o = if which == 0 { g.add(v[0], v[1])? } else { g.mul(v[0], v[1])? };
            project(g, o, &r)
        });
    }
    {
        let r = r_mk.clone();
        case!("scale", vec![t(&[m, k])], |g, v| {
            let o = g.scale(v[0], -1.7)?;
            project(g, o, &r)
        });
    }
    {
        let r = r_mk.clone();
        case!("add_bias", vec![t(&[m, k]), t(&[k])], |g, v| {
            let o = g.add_bias(v[0], v[1])?;
            project(g, o, &r)
        });
    }
    for (name, which) in [("relu", 0), ("gelu", 1), ("sigmoid", 2)] {
        let r = r_mk.clone();
        // keep relu inputs away from its kink
        let mut x = t(&[m, k]);
        if which == 0 {
            x.data_mut().iter_mut().for_each(|v| *v += 0.1 * v.signum());
        }
        case!(name, vec![x], |g, v| {
            let o = match which {
                0 => g.relu(v[0])?,
                1 => g.gelu(v[0])?,
                _ => g.sigmoid(v[0])?,
            };
            project(g, o, &r)
        });
    }
    for (name, axis) in [("softmax_rows", 1), ("softmax_cols", 0)] {
        let r = r_mk.clone();
        case!(name, vec![t(&[m, k])], |g, v| {
            let o = g.softmax(v[0], axis)?;
            project(g, o, &r)
        });
    }
    for (name, kind, axis) in [
        ("reduce_mean", ReduceKind::Mean, 0),
        ("reduce_max", ReduceKind::Max, 1),
        ("reduce_sum", ReduceKind::Sum, 1),
    ] {
        let r = if axis == 0 { r_k.clone() } else { r_m.clone() };
        case!(name, vec![t(&[m, k])], |g, v| {
            let o = g.reduce(kind, v[0], axis)?;
            project(g, o, &r)
        });
    }
    case!("sum_all", vec![t(&[m, k])], |g, v| g.sum_all(v[0]));
    {
        let r = r_mk.clone();
        case!("layer_norm", vec![t(&[m, k]), t(&[k]), t(&[k])], |g, v| {
            let o = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, o, &r)
        });
    }
    {
        let r = r_mk.clone();
        case!("transpose", vec![t(&[k, m])], |g, v| {
            let o = g.transpose(v[0])?;
            project(g, o, &r)
        });
    }
    {
        let r = r_mk.clone();
        case!("reshape", vec![t(&[k, m])], |g, v| {
            let o = g.reshape(v[0], &[m, k])?;
            project(g, o, &r)
        });
    }
    {
        let r = r_mk.clone();
        case!("slice_cols", vec![t(&[m, k + 2])], |g, v| {
            let o = g.slice_cols(v[0], 1, k)?;
            project(g, o, &r)
        });
    }
    {
        let r = r_mix.clone();
        case!("concat_cols", vec![t(&[m, k]), t(&[m, n])], |g, v| {
            let o = g.concat_cols(&[v[0], v[1]])?;
            project(g, o, &r)
        });
    }
    {
        let r = r_mk.clone();
        case!("slice_rows", vec![t(&[m + 2, k])], |g, v| {
            let o = g.slice_rows(v[0], 2, m)?;
            project(g, o, &r)
        });
    }
    {
        let r = r_k.clone();
        case!("row", vec![t(&[m, k])], |g, v| {
            let o = g.row(v[0], 1)?;
            project(g, o, &r)
        });
    }
    {
        let r = r_2mk.clone();
        case!("concat_rows", vec![t(&[m, k]), t(&[m, k])], |g, v| {
            let o = g.concat_rows(&[v[0], v[1]])?;
            project(g, o, &r)
        });
    }
    {
        let r = r_2mk.clone();
        case!("stack", vec![t(&[m, k]), t(&[m, k])], |g, v| {
            let o = g.stack(&[v[0], v[1]])?;
            project(g, o, &r)
        });
    }
    {
        let r = r_pool.clone();
        case!("grid_avg_pool", vec![t(&[16, 3])], |g, v| {
            let o = g.grid_avg_pool(v[0], 4, 4, 2)?;
            project(g, o, &r)
        });
    }
    {
        let labels: Vec<f64> = (0..m).map(|i| (i % 2) as f64).collect();
        case!("bce", vec![t(&[m])], |g, v| {
            let p = g.sigmoid(v[0])?;
            g.bce(p, &labels)
        });
    }
    {
        let targets: Vec<usize> = (0..m).map(|i| i % k).collect();
        case!("cross_entropy", vec![t(&[m, k])], |g, v| g.cross_entropy(v[0], &targets));
    }
    cases
}

pub fn tiny_model_config() -> ModelConfig {
    let encoder = EncoderConfig {
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
    };
    ModelConfig {
        encoder,
        scales: vec![1, 2],
        cgf_hidden: 6,
        head_hidden: 5,
        toggles: Toggles::default(),
    }
}

/// Tiny detector with every trainable tensor randomized (LoRA B and the
/// fusion logits start at zero otherwise).
pub fn randomized_tiny_detector(seed: u64) -> Detector {
    let mut det = Detector::init(tiny_model_config(), seed).unwrap();
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    let names: Vec<String> = det
        .params
        .iter()
        .filter(|(n, _)| kind_of(n) == ParamKind::Trainable)
        .map(|(n, _)| n.clone())
        .collect();
    for n in names {
        let t = det.params.get_mut(&n).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = 0.5 * rng.sample::<f64, _>(StandardNormal));
    }
    det
}

/// One transformer block with LoRA, differentiated with respect to the LoRA
/// factors and the block input.
pub fn encoder_layer_error(seed: u64) -> Result<f64> {
    let det = randomized_tiny_detector(seed);
    let cfg = det.config.encoder.clone();
    let mut rng = rng_from_seed(seed.wrapping_add(1));
    let x = rand_tensor(&mut rng, &[cfg.num_patches() + 1, cfg.embed_dim]);
    let r = rand_tensor(&mut rng, &[(cfg.num_patches() + 1) * cfg.embed_dim]);
    let names: Vec<String> = ['q', 'k', 'v']
        .into_iter()
        .flat_map(|p| [encoder::lora_name(1, p, 'a'), encoder::lora_name(1, p, 'b')])
        .collect();
    let mut inputs: Vec<Tensor> = names.iter().map(|n| det.params.get(n).unwrap().clone()).collect();
    inputs.push(x);
    grad_check(
        |g, v| {
            let mut p = det.params.bind(g, false);
            for (n, &var) in names.iter().zip(v) {
                p.insert(n.clone(), var);
            }
            let y = encoder::transformer_block(g, &p, &cfg, v[names.len()], 1, true)?;
            project(g, y, &r)
        },
        &inputs,
        GRAD_EPS,
    )
}

/// Full encoder, fusion and head with BCE loss, differentiated with respect
/// to every trainable tensor.
pub fn full_model_error(seed: u64) -> Result<f64> {
    let det = randomized_tiny_detector(seed);
    let mut rng = rng_from_seed(seed.wrapping_add(2));
    let img = rand_image(&mut rng, det.config.encoder.image_size);
    let label = (seed % 2) as f64;
    let names: Vec<String> = det
        .params
        .iter()
        .filter(|(n, _)| kind_of(n) == ParamKind::Trainable)
        .map(|(n, _)| n.clone())
        .collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| det.params.get(n).unwrap().clone()).collect();
    grad_check(
        |g, v| {
            let mut p = det.params.bind(g, false);
            for (n, &var) in names.iter().zip(v) {
                p.insert(n.clone(), var);
            }
            let f = det.forward(g, &p, &img)?;
            let prob = g.reshape(f.prob, &[1])?;
            g.bce(prob, &[label])
        },
        &inputs,
        GRAD_EPS,
    )
}

/// Worst relative error per check over `seeds`.
pub fn gradient_suite(seeds: std::ops::Range<u64>) -> Vec<(String, f64)> {
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut note = |name: &str, e: f64| match worst.iter_mut().find(|(n, _)| n == name) {
        Some((_, w)) => *w = w.max(e),
        None => worst.push((name.to_string(), e)),
    };
    for seed in seeds {
        for (name, f, inputs) in primitive_cases(seed) {
            note(name, grad_check(f, &inputs, GRAD_EPS).unwrap_or(f64::INFINITY));
        }
        note("encoder_layer_lora", encoder_layer_error(seed).unwrap_or(f64::INFINITY));
        note("fusion_and_head", full_model_error(seed).unwrap_or(f64::INFINITY));
    }
    worst
}

// ---------- metric oracles ----------

pub fn oracle_accuracy(labels: &[u8], scores: &[f64], thr: f64) -> f64 {
    let mut right = 0;
    for i in 0..labels.len() {
        let predicted = if scores[i] >= thr { 1 } else { 0 };
        if predicted == labels[i] {
            right += 1;
        }
    }
    right as f64 / labels.len() as f64
}

/// Precision at each positive, ranking by score then id, with a plain
/// selection sort.
pub fn oracle_ap(ids: &[String], labels: &[u8], scores: &[f64]) -> f64 {
    let n = labels.len();
    let mut used = vec![false; n];
    let mut order = Vec::new();
    for _ in 0..n {
        let mut best: Option<usize> = None;
        for j in 0..n {
            if used[j] {
                continue;
            }
            best = match best {
                None => Some(j),
                Some(b) if scores[j] > scores[b] || (scores[j] == scores[b] && ids[j] < ids[b]) => Some(j),
                keep => keep,
            };
        }
        used[best.unwrap()] = true;
        order.push(best.unwrap());
    }
    let (mut tp, mut total, mut pos) = (0.0, 0.0, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1.0;
            total += tp / (rank as f64 + 1.0);
            pos += 1.0;
        }
    }
    total / pos
}

pub fn oracle_ece(labels: &[u8], scores: &[f64], bins: usize) -> f64 {
    let n = labels.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let members: Vec<usize> = (0..labels.len())
            .filter(|&i| {
                let s = scores[i];
                (s >= lo && s < hi) || (b == bins - 1 && s >= hi)
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut conf = 0.0;
        let mut acc = 0.0;
        for &i in &members {
            let s = scores[i];
            conf += if s >= 0.5 { s } else { 1.0 - s };
            acc += if (s >= 0.5) == (labels[i] == 1) { 1.0 } else { 0.0 };
        }
        let m = members.len() as f64;
        total += (m / n) * (conf / m - acc / m).abs();
    }
    total
}

pub fn oracle_rates(labels: &[u8], scores: &[f64], tau: f64) -> (Option<f64>, Option<f64>) {
    let (mut fp, mut reals, mut tp, mut fakes) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..labels.len() {
        let flagged = scores[i] >= tau;
        if labels[i] == 1 {
            fakes += 1.0;
            if flagged {
                tp += 1.0;
            }
        } else {
            reals += 1.0;
            if flagged {
                fp += 1.0;
            }
        }
    }
    let tpr = if fakes > 0.0 { Some(tp / fakes) } else { None };
    let rfpr = if reals > 0.0 { Some(fp / reals) } else { None };
    (tpr, rfpr)
}

/// Random scored instance of size 2..=200 with both classes present and
/// some deliberate score ties.
pub fn random_instance(rng: &mut Rng) -> Vec<ScoreRecord> {
    let n = rng.random_range(2..=200usize);
    let coarse = rng.random_bool(0.3);
    let mut recs: Vec<ScoreRecord> = (0..n)
        .map(|i| {
            let label = rng.random_bool(0.5) as u8;
            let s: f64 = rng.random();
            let s = if coarse { (s * 10.0).floor() / 10.0 } else { s };
            ScoreRecord::new(format!("s{:03}", rng.random_range(0..1000)) + &format!("-{i}"), label, s, "A")
        })
        .collect();
    recs[0].label = 0;
    recs[1].label = 1;
    recs
}

pub struct MetricReport {
    pub acc_mismatches: usize,
    pub ap_mismatches: usize,
    pub ece_max_diff: f64,
    pub rate_mismatches: usize,
}

pub fn metric_oracle_suite(instances: usize, seed: u64) -> MetricReport {
    let mut rng = rng_from_seed(seed);
    let mut rep = MetricReport {
        acc_mismatches: 0,
        ap_mismatches: 0,
        ece_max_diff: 0.0,
        rate_mismatches: 0,
    };
    for _ in 0..instances {
        let recs = random_instance(&mut rng);
        let ids: Vec<String> = recs.iter().map(|r| r.id.clone()).collect();
        let labels: Vec<u8> = recs.iter().map(|r| r.label).collect();
        let scores: Vec<f64> = recs.iter().map(|r| r.score).collect();
        let thr: f64 = if rng.random_bool(0.5) { 0.5 } else { rng.random() };
        if metrics::accuracy(&recs, thr).unwrap() != oracle_accuracy(&labels, &scores, thr) {
            rep.acc_mismatches += 1;
        }
        if metrics::average_precision(&recs).unwrap() != oracle_ap(&ids, &labels, &scores) {
            rep.ap_mismatches += 1;
        }
        let d = (metrics::ece(&recs, 10).unwrap() - oracle_ece(&labels, &scores, 10)).abs();
        rep.ece_max_diff = rep.ece_max_diff.max(d);
        let r = metrics::tpr_rfpr_at(&recs, thr);
        if (r.tpr, r.rfpr) != oracle_rates(&labels, &scores, thr) {
            rep.rate_mismatches += 1;
        }
    }
    rep
}

/// Count instances whose AP changes under a random strictly increasing map.
pub fn ap_invariance_failures(instances: usize, seed: u64) -> usize {
    let mut rng = rng_from_seed(seed);
    let mut failures = 0;
    for _ in 0..instances {
        let recs = random_instance(&mut rng);
        let a = rng.random_range(0.1..5.0);
        let b = rng.random_range(-3.0..3.0);
        let kind = rng.random_range(0..3);
        let mapped: Vec<ScoreRecord> = recs
            .iter()
            .map(|r| {
                let s = match kind {
                    0 => a * r.score + b,
                    1 => (a * r.score).exp(),
                    _ => (r.score + 0.1).powf(3.0) - b,
                };
                ScoreRecord { score: s, ..r.clone() }
            })
            .collect();
        if metrics::average_precision(&recs).unwrap() != metrics::average_precision(&mapped).unwrap() {
            failures += 1;
        }
    }
    failures
}

// ---------- fusion oracles ----------

/// Region pooling by explicit window loops.
pub fn oracle_hirp(patches: &[f64], grid: usize, d: usize, scales: &[usize], beta: &[f64]) -> Vec<f64> {
    let mx = beta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = beta.iter().map(|b| (b - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut out = vec![0.0; d];
    for (si, &s) in scales.iter().enumerate() {
        let mut best = vec![f64::NEG_INFINITY; d];
        for wy in (0..grid).step_by(s) {
            for wx in (0..grid).step_by(s) {
                for c in 0..d {
                    let mut sum = 0.0;
                    for y in wy..wy + s {
                        for x in wx..wx + s {
                            sum += patches[(y * grid + x) * d + c];
                        }
                    }
                    best[c] = best[c].max(sum / (s * s) as f64);
                }
            }
        }
        for c in 0..d {
            out[c] += e[si] / z * best[c];
        }
    }
    out
}

pub fn hirp_max_error(instances: usize, seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let grid = [2usize, 4, 8][rng.random_range(0..3)];
        let scales: Vec<usize> = [1usize, 2, 4, 8].into_iter().filter(|s| grid % s == 0 && rng.random_bool(0.7)).collect();
        let scales = if scales.is_empty() { vec![grid] } else { scales };
        let d = rng.random_range(1..6);
        let patches = rand_tensor(&mut rng, &[grid * grid, d]);
        let beta = rand_tensor(&mut rng, &[scales.len()]);
        let mut g = Graph::new();
        let pv = g.constant(patches.clone());
        let bv = g.constant(beta.clone());
        let got = fusion::hirp(&mut g, pv, grid, &scales, bv).unwrap();
        let want = oracle_hirp(patches.data(), grid, d, &scales, beta.data());
        for (a, b) in g.value(got).data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Largest |Σw − 1| over every normalized weight family of random tiny
/// detectors on random images.
pub fn weight_sum_error(instances: usize, seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let det = randomized_tiny_detector(seed.wrapping_add(i as u64));
        let img = rand_image(&mut rng, det.config.encoder.image_size);
        let mut g = Graph::new();
        let p = det.params.bind(&mut g, false);
        let f = det.forward(&mut g, &p, &img).unwrap();
        let w = f.weights;
        for v in [w.scale, w.layer_cls, w.layer_reg, w.granularity].into_iter().flatten() {
            let s: f64 = g.value(v).data().iter().sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    worst
}

/// Count of cgf outputs falling outside the coordinatewise hull of its two
/// inputs (with 1e-12 slack), over random instances.
pub fn cgf_convexity_violations(instances: usize, seed: u64) -> usize {
    let mut rng = rng_from_seed(seed);
    let mut bad = 0;
    for _ in 0..instances {
        let d = rng.random_range(1..8);
        let h = rng.random_range(1..6);
        let zc = rand_tensor(&mut rng, &[d]);
        let zr = rand_tensor(&mut rng, &[d]);
        let mut g = Graph::new();
        let vars = CgfVars {
            w1: g.constant(rand_tensor(&mut rng, &[2 * d, h])),
            b1: g.constant(rand_tensor(&mut rng, &[h])),
            w2: g.constant(rand_tensor(&mut rng, &[h, 2])),
            b2: g.constant(rand_tensor(&mut rng, &[2])),
        };
        let (a, b) = (g.constant(zc.clone()), g.constant(zr.clone()));
        let (fused, w) = fusion::cgf(&mut g, a, b, vars).unwrap();
        let wv = g.value(w).data();
        if wv.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (wv[0] + wv[1] - 1.0).abs() > 1e-12 {
            bad += 1;
            continue;
        }
        for (j, &y) in g.value(fused).data().iter().enumerate() {
            let lo = zc.data()[j].min(zr.data()[j]) - 1e-12;
            let hi = zc.data()[j].max(zr.data()[j]) + 1e-12;
            if y < lo || y > hi {
                bad += 1;
                break;
            }
        }
    }
    bad
}

pub fn default_har_config() -> HarConfig {
    HarConfig::new(64)
}

// ---------- mixup ----------

pub struct MixupReport {
    pub endpoints_exact: bool,
    pub convexity_violations: usize,
    pub tail_empirical: f64,
    pub tail_oracle: f64,
}

/// `P(λ < 0.1 ∨ λ > 0.9)` for `Beta(a, a)` by Simpson quadrature after the
/// substitution `x = t^{1/a}`, which removes the endpoint singularity.
pub fn beta_tail_oracle(a: f64) -> f64 {
    let ln_b = 2.0 * libm::lgamma(a) - libm::lgamma(2.0 * a);
    let upper = 0.1f64.powf(a);
    let n = 20_000;
    let h = upper / n as f64;
    let f = |t: f64| {
        let x = t.powf(1.0 / a);
        (1.0 - x).powf(a - 1.0) / a
    };
    let mut s = f(0.0) + f(upper);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let lower_tail = s * h / 3.0 / ln_b.exp();
    2.0 * lower_tail
}

pub fn mixup_suite(triples: usize, draws: usize, seed: u64) -> MixupReport {
    let mut rng = rng_from_seed(seed);
    let mut endpoints_exact = true;
    let mut convexity_violations = 0;
    for _ in 0..triples {
        let size = 8;
        let a = rand_image(&mut rng, size);
        let b = rand_image(&mut rng, size);
        let lambda: f64 = rng.random();
        let m = mixup(&a, &b, lambda).unwrap();
        for ((&x, &y), &z) in a.pixels().iter().zip(b.pixels()).zip(m.image.pixels()) {
            if z < x.min(y) || z > x.max(y) {
                convexity_violations += 1;
            }
        }
        if m.label != 1 {
            convexity_violations += 1;
        }
        endpoints_exact &= mixup(&a, &b, 0.0).unwrap().image == a && mixup(&a, &b, 1.0).unwrap().image == b;
    }
    let tail = (0..draws)
        .filter(|_| {
            let l = sample_lambda(0.1, &mut rng).unwrap();
            !(0.1..=0.9).contains(&l)
        })
        .count();
    MixupReport {
        endpoints_exact,
        convexity_violations,
        tail_empirical: tail as f64 / draws as f64,
        tail_oracle: beta_tail_oracle(0.1),
    }
}

// ---------- zero-init identity ----------

/// Count of images where the LoRA path with all B factors zero differs in
/// any bit from the plain frozen forward.
pub fn zero_init_mismatches(images: usize, seed: u64) -> usize {
    let det = Detector::init(ModelConfig::default(), seed).unwrap();
    let mut rng = rng_from_seed(seed);
    let cfg = &det.config.encoder;
    (0..images)
        .filter(|_| {
            let img = rand_image(&mut rng, cfg.image_size);
            let run = |lora: bool| {
                let mut g = Graph::new();
                let p = det.params.bind(&mut g, false);
                let pass = encoder::forward_collect(&mut g, &p, cfg, &img, lora).unwrap();
                let mut out: Vec<u64> = g.value(pass.last).data().iter().map(|v| v.to_bits()).collect();
                for o in &pass.selected {
                    out.extend(g.value(o.patches).data().iter().map(|v| v.to_bits()));
                }
                out
            };
            run(true) != run(false)
        })
        .count()
}
