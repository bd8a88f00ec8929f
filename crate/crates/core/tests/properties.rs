mod common;

use himix::augment::{compose_batch, mixup, MixupConfig, MixupMode, Provenance};
use himix::autodiff::Graph;
use himix::metrics::{self, threshold_at_fpr};
use himix::rng::rng_from_seed;
use himix::tensor::Tensor;
use proptest::prelude::*;

use common::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in (1usize..6, 1usize..9).prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let s = g.softmax(v, 1).unwrap();
        let (r, c) = x.dims2().unwrap();
        for i in 0..r {
            let row = &g.value(s).data()[i * c..(i + 1) * c];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 || p == 0.0));
        }
    }

    #[test]
    fn matmul_matches_triple_loop(
        (a, b) in (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(m, k, n)| (matrix(m, k), matrix(k, n)))
    ) {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        let (m, k) = a.dims2().unwrap();
        let n = b.dims2().unwrap().1;
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.data()[i * k + t] * b.data()[t * n + j];
                }
                prop_assert!((g.value(c).data()[i * n + j] - s).abs() <= 1e-12 * (1.0 + s.abs()));
            }
        }
    }

    #[test]
    fn lowering_target_fpr_never_lowers_tau(
        scores in prop::collection::vec(0.0f64..1.0, 1..300),
        t1 in 0.0f64..1.0,
        t2 in 0.0f64..1.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let tau_lo = threshold_at_fpr(&scores, lo).unwrap();
        let tau_hi = threshold_at_fpr(&scores, hi).unwrap();
        prop_assert!(tau_lo >= tau_hi);
        let fpr = scores.iter().filter(|&&s| s >= tau_lo).count() as f64 / scores.len() as f64;
        prop_assert!(fpr <= lo + 1e-9);
    }

    #[test]
    fn mixup_is_pixelwise_convex(seed in any::<u64>(), lambda in 0.0f64..=1.0) {
        let mut rng = rng_from_seed(seed);
        let a = rand_image(&mut rng, 8);
        let b = rand_image(&mut rng, 8);
        let m = mixup(&a, &b, lambda).unwrap();
        prop_assert_eq!(m.label, 1);
        for ((&x, &y), &z) in a.pixels().iter().zip(b.pixels()).zip(m.image.pixels()) {
            prop_assert!(x.min(y) <= z && z <= x.max(y));
        }
    }

    #[test]
    fn composed_batches_are_balanced(seed in any::<u64>(), fraction in 0.0f64..=1.0, b in 2usize..40) {
        let mut rng = rng_from_seed(seed);
        let reals: Vec<_> = (0..5).map(|_| rand_image(&mut rng, 8)).collect();
        let fakes: Vec<_> = (0..5).map(|_| rand_image(&mut rng, 8)).collect();
        let cfg = MixupConfig { alpha: 0.1, mix_fraction: fraction, mode: MixupMode::RealFake };
        let batch = compose_batch(&reals.iter().collect::<Vec<_>>(), &fakes.iter().collect::<Vec<_>>(), b, &cfg, 2, &mut rng).unwrap();
        prop_assert_eq!(batch.len(), b);
        let n_real = batch.iter().filter(|s| s.label == 0).count();
        prop_assert_eq!(n_real, b.div_ceil(2));
        let mixed = batch.iter().filter(|s| s.provenance == Provenance::Mixed).count();
        prop_assert_eq!(mixed, ((b / 2) as f64 * fraction).round() as usize);
        for s in batch.iter().filter(|s| s.provenance == Provenance::Mixed) {
            let l = s.lambda.unwrap();
            prop_assert!(l > 0.0 && l < 1.0);
        }
    }
}

#[test]
fn metrics_match_loop_oracles_on_1000_instances() {
    let r = metric_oracle_suite(1000, 11);
    assert_eq!(r.acc_mismatches, 0);
    assert_eq!(r.ap_mismatches, 0);
    assert_eq!(r.rate_mismatches, 0);
    assert!(r.ece_max_diff <= 1e-12, "{}", r.ece_max_diff);
}

#[test]
fn ap_depends_only_on_ranking() {
    assert_eq!(ap_invariance_failures(100, 12), 0);
}

#[test]
fn ap_matches_worked_example() {
    // ranks: fake, real, fake -> (1 + 2/3) / 2
    let recs = vec![
        metrics::ScoreRecord::new("a", 1, 0.9, "A"),
        metrics::ScoreRecord::new("b", 0, 0.8, "none"),
        metrics::ScoreRecord::new("c", 1, 0.7, "A"),
    ];
    assert!((metrics::average_precision(&recs).unwrap() - 5.0 / 6.0).abs() < 1e-15);
}

#[test]
fn region_pooling_matches_window_loops() {
    let e = hirp_max_error(200, 13);
    assert!(e <= 1e-12, "{e}");
}

#[test]
fn fusion_weights_are_normalized() {
    let e = weight_sum_error(50, 14);
    assert!(e <= 1e-9, "{e}");
}

#[test]
fn granularity_fusion_is_convex() {
    assert_eq!(cgf_convexity_violations(10_000, 15), 0);
}

#[test]
fn mixup_contract() {
    let r = mixup_suite(10_000, 100_000, 16);
    assert!(r.endpoints_exact);
    assert_eq!(r.convexity_violations, 0);
    assert!((r.tail_empirical - r.tail_oracle).abs() <= 0.02, "{} vs {}", r.tail_empirical, r.tail_oracle);
}

#[test]
fn beta_oracle_is_sane() {
    // Beta(1, 1) is uniform: the two tails hold 0.2
    assert!((beta_tail_oracle(1.0) - 0.2).abs() < 1e-9);
    // Beta(0.5, 0.5) is the arcsine law: 2 * (2/pi) * asin(sqrt(0.1))
    let want = 4.0 / std::f64::consts::PI * 0.1f64.sqrt().asin();
    assert!((beta_tail_oracle(0.5) - want).abs() < 1e-6);
}

#[test]
fn zero_b_factors_leave_the_encoder_unchanged() {
    assert_eq!(zero_init_mismatches(50, 17), 0);
}
