//! Classifier head: two ReLU layers, a scalar output and a sigmoid.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const HEAD_PREFIX: &str = "head.";
pub const DEFAULT_HIDDEN: usize = 32;

const NAMES: [(&str, &str); 3] = [("head.w1", "head.b1"), ("head.w2", "head.b2"), ("head.w3", "head.b3")];

fn dims(d: usize, hidden: usize) -> [(usize, usize); 3] {
    [(d, hidden), (hidden, hidden), (hidden, 1)]
}

pub fn head_param_count(d: usize, hidden: usize) -> usize {
    dims(d, hidden).iter().map(|(i, o)| i * o + o).sum()
}

/// He-style Gaussian weights, zero biases.
pub fn init_head(d: usize, hidden: usize, rng: &mut Rng, store: &mut ParamStore) {
    for ((w, b), (fan_in, fan_out)) in NAMES.iter().zip(dims(d, hidden)) {
        let sd = (2.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        store.insert(*w, Tensor::matrix(fan_in, fan_out, data).expect("sizes agree"));
        store.insert(*b, Tensor::zeros(&[fan_out]));
    }
}

/// Pre-sigmoid logit for a feature vector `z` (`[d]`); result is `[1]`.
pub fn head_logit(g: &mut Graph, p: &BoundParams, z: Var) -> Result<Var> {
    let d = g.try_value(z)?.numel();
    let mut h = g.reshape(z, &[1, d])?;
    for (i, (w, b)) in NAMES.iter().enumerate() {
        h = g.matmul(h, p.get(w)?)?;
        h = g.add_bias(h, p.get(b)?)?;
        if i < 2 {
            h = g.relu(h)?;
        }
    }
    g.reshape(h, &[1])
}

/// Probability of "fake", strictly inside (0, 1) for finite inputs.
pub fn head_forward(g: &mut Graph, p: &BoundParams, z: Var) -> Result<Var> {
    let logit = head_logit(g, p, z)?;
    g.sigmoid(logit)
}
