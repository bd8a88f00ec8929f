//! Deterministic principal component projection.
//!
//! Components come from power iteration with deflation on the sample
//! covariance, started from a seeded random vector. Each component's sign is
//! fixed so its first coordinate with magnitude above `1e-12` is positive.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

const MAX_ITERS: usize = 10_000;
const TOL: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit vectors, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component.
    pub variances: Vec<f64>,
    /// One row of `k` coordinates per input row.
    pub projected: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn fix_sign(v: &mut [f64]) {
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

pub fn pca(rows: &[Vec<f64>], k: usize, seed: u64) -> Result<Pca> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::InvalidArgument("PCA of zero rows".into()));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument("PCA rows differ in length".into()));
    }
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={d}")));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x / n as f64);
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += r[i] * r[j] / n as f64;
            }
        }
    }
    let mut rng = rng_from_seed(seed);
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..MAX_ITERS {
            let mut w: Vec<f64> = cov.iter().map(|row| dot(row, &v)).collect();
            // keep the iterate orthogonal to earlier components
            for c in &components {
                let p = dot(&w, c);
                w.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
            let norm = normalize(&mut w);
            if norm == 0.0 {
                break;
            }
            let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let flipped: f64 = w.iter().zip(&v).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
            v = w;
            lambda = norm;
            if delta.min(flipped) < TOL {
                break;
            }
        }
        fix_sign(&mut v);
        // deflate
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        variances.push(lambda);
    }
    let projected = centered
        .iter()
        .map(|r| components.iter().map(|c| dot(r, c)).collect())
        .collect();
    Ok(Pca {
        mean,
        components,
        variances,
        projected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn gaussian_2d(angle: f64, n: usize) -> Vec<Vec<f64>> {
        let mut rng = rng_from_seed(21);
        let (c, s) = (angle.cos(), angle.sin());
        (0..n)
            .map(|_| {
                let a: f64 = 3.0 * rng.sample::<f64, _>(StandardNormal);
                let b: f64 = 0.5 * rng.sample::<f64, _>(StandardNormal);
                vec![1.0 + a * c - b * s, -2.0 + a * s + b * c]
            })
            .collect()
    }

    #[test]
    fn recovers_known_axis() {
        let angle = 30f64.to_radians();
        let p = pca(&gaussian_2d(angle, 5000), 2, 1).unwrap();
        let c = &p.components[0];
        let cos = (c[0] * angle.cos() + c[1] * angle.sin()).abs();
        assert!(cos.acos().to_degrees() < 1.0);
        assert!(c[0] > 0.0);
        assert!(p.variances[0] >= p.variances[1]);
    }

    #[test]
    fn projection_is_centered_and_ordered() {
        let p = pca(&gaussian_2d(1.0, 400), 2, 2).unwrap();
        for j in 0..2 {
            let mean: f64 = p.projected.iter().map(|r| r[j]).sum::<f64>() / 400.0;
            assert!(mean.abs() < 1e-9);
        }
        let var = |j: usize| p.projected.iter().map(|r| r[j] * r[j]).sum::<f64>();
        assert!(var(0) >= var(1));
        assert!(pca(&gaussian_2d(1.0, 10), 3, 0).is_err());
    }

    #[test]
    fn deterministic() {
        let rows = gaussian_2d(0.3, 100);
        assert_eq!(pca(&rows, 2, 5).unwrap(), pca(&rows, 2, 5).unwrap());
    }
}
