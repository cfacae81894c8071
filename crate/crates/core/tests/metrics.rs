//! Evaluation protocol against hand-computed values and independent oracles.

use clearflow_core::metrics::{
    align_scale_shift, depth_metrics, evaluate_depth_sequence, normal_metrics, rank_methods, AlignSpace, EvalConfig,
};
use clearflow_core::Video;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

#[test]
fn hand_example() {
    // gt = [1, 1], pred = [1.04, 1.30]:
    //   ratios 1.04 and 1.30 -> one of two under 1.05
    //   REL = (0.04 + 0.30) / 2 = 0.17
    //   RMSE = sqrt((0.04^2 + 0.30^2) / 2) = sqrt(0.0458) m
    let m = depth_metrics(&[1.04, 1.30], &[1.0, 1.0], &[true, true]).unwrap();
    let rmse_cm = 100.0 * (0.0458f64).sqrt();
    assert!((m.delta_105 - 50.0).abs() < TOL);
    assert!((m.delta_110 - 50.0).abs() < TOL);
    assert!((m.delta_125 - 50.0).abs() < TOL);
    // f32 inputs: 1.04 and 1.30 are not exactly representable
    assert!((m.rel - 17.0).abs() < 1e-5, "{}", m.rel);
    assert!((m.rmse_cm - rmse_cm).abs() < 1e-5, "{} vs {rmse_cm}", m.rmse_cm);
    assert!((m.rmse_cm - 21.401).abs() < 1e-3);
}

#[test]
fn hand_example_in_f64_exact_inputs() {
    // Dyadic stand-ins: gt = [1, 1], pred = [1.0625, 1.25].
    let m = depth_metrics(&[1.0625, 1.25], &[1.0, 1.0], &[true, true]).unwrap();
    assert!((m.rel - 15.625).abs() < TOL);
    let rmse = 100.0 * ((0.0625f64.powi(2) + 0.25f64.powi(2)) / 2.0).sqrt();
    assert!((m.rmse_cm - rmse).abs() < TOL);
    assert_eq!((m.delta_105, m.delta_110, m.delta_125), (0.0, 50.0, 50.0));
}

/// Uncentred normal equations solved by Cramer's rule.
fn direct_solve(p: &[f64], g: &[f64]) -> (f64, f64) {
    let n = p.len() as f64;
    let (sp, sg) = (p.iter().sum::<f64>(), g.iter().sum::<f64>());
    let spp = p.iter().map(|v| v * v).sum::<f64>();
    let spg = p.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
    let det = spp * n - sp * sp;
    ((spg * n - sp * sg) / det, (spp * sg - sp * spg) / det)
}

#[test]
fn alignment_matches_direct_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..50 {
        let n = rng.random_range(3..400);
        let p: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f32> = p.iter().map(|&v| 0.7 * v + 1.9 + rng.random_range(-0.2..0.2)).collect();
        let mask: Vec<bool> = (0..n).map(|i| i < 2 || rng.random_bool(0.8)).collect();
        let (a, aligned) = align_scale_shift(&p, &g, &mask).unwrap();
        let (pm, gm): (Vec<f64>, Vec<f64>) = (0..n).filter(|&i| mask[i]).map(|i| (p[i] as f64, g[i] as f64)).unzip();
        let (s, b) = direct_solve(&pm, &gm);
        assert!(
            (a.scale - s).abs() < 1e-9 * (1.0 + s.abs()),
            "case {case}: {} vs {s}",
            a.scale
        );
        assert!(
            (a.shift - b).abs() < 1e-9 * (1.0 + b.abs()),
            "case {case}: {} vs {b}",
            a.shift
        );
        assert_eq!(a.count, pm.len());
        for i in 0..n {
            assert!((aligned[i] as f64 - (s * p[i] as f64 + b)).abs() < 1e-5);
        }
    }
}

fn scene(n: usize, seed: u64) -> (Vec<f32>, Vec<f32>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // grid-valued disparities keep a * p + b exact in f32
    let pred: Vec<f32> = (0..n).map(|_| rng.random_range(-512i32..512) as f32 / 1024.0).collect();
    let depth: Vec<f32> = pred
        .iter()
        .map(|&p| 1.0 / (0.8 + 0.9 * p + rng.random_range(-0.05..0.05)))
        .collect();
    let valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.9)).collect();
    (pred, depth, valid)
}

fn depth_columns(pred: &[f32], depth: &[f32], valid: &[bool], space: AlignSpace) -> [f64; 5] {
    let n = pred.len();
    let cfg = EvalConfig {
        align_space: space,
        depth_range: None,
    };
    let p = Video::new(1, 1, n, 1, pred.to_vec()).unwrap();
    let g = Video::new(1, 1, n, 1, depth.to_vec()).unwrap();
    evaluate_depth_sequence("s", &p, &g, valid, &cfg)
        .unwrap()
        .metrics
        .unwrap()
        .columns()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn protocol_is_affine_invariant(
        seed in 0u64..10_000,
        a_exp in -2i32..4,
        a_frac in 0u32..4,
        b in -64i32..64,
        depth_space in any::<bool>(),
    ) {
        let (pred, depth, valid) = scene(257, seed);
        let a = (1.0 + a_frac as f32 / 4.0) * 2f32.powi(a_exp);
        let b = b as f32 / 16.0;
        let moved: Vec<f32> = pred.iter().map(|&p| a * p + b).collect();
        let space = if depth_space { AlignSpace::Depth } else { AlignSpace::Disparity };
        let x = depth_columns(&pred, &depth, &valid, space);
        let y = depth_columns(&moved, &depth, &valid, space);
        for (u, v) in x.iter().zip(&y) {
            prop_assert!((u - v).abs() < TOL, "{x:?} vs {y:?}");
        }
    }

    #[test]
    fn delta_is_monotone_and_errors_vanish_only_on_equality(
        values in prop::collection::vec((0.3f32..1.5, 0.3f32..1.5), 1..64),
    ) {
        let (p, g): (Vec<f32>, Vec<f32>) = values.into_iter().unzip();
        let mask = vec![true; p.len()];
        let m = depth_metrics(&p, &g, &mask).unwrap();
        prop_assert!(m.delta_105 <= m.delta_110 && m.delta_110 <= m.delta_125);
        let equal = p == g;
        prop_assert_eq!(m.rel == 0.0, equal);
        prop_assert_eq!(m.rmse_cm == 0.0, equal);
        let same = depth_metrics(&g, &g, &mask).unwrap();
        prop_assert_eq!((same.rel, same.rmse_cm, same.delta_105), (0.0, 0.0, 100.0));
    }
}

/// Average position of each method over all orderings consistent with
/// every metric, one metric at a time.
fn brute_force_ranks(values: &[Vec<f64>], hib: &[bool]) -> Vec<f64> {
    let m = values.len();
    let perms: Vec<Vec<usize>> = {
        let mut out = Vec::new();
        let mut p: Vec<usize> = (0..m).collect();
        permute(&mut p, 0, &mut out);
        out
    };
    let mut total = vec![0.0; m];
    for (j, &h) in hib.iter().enumerate() {
        let better_or_equal = |a: usize, b: usize| {
            if h {
                values[a][j] >= values[b][j]
            } else {
                values[a][j] <= values[b][j]
            }
        };
        let consistent: Vec<&Vec<usize>> = perms
            .iter()
            .filter(|p| p.windows(2).all(|w| better_or_equal(w[0], w[1])))
            .collect();
        for p in &consistent {
            for (pos, &idx) in p.iter().enumerate() {
                total[idx] += (pos + 1) as f64 / consistent.len() as f64;
            }
        }
    }
    total.iter().map(|t| t / hib.len() as f64).collect()
}

fn permute(p: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == p.len() {
        out.push(p.clone());
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, out);
        p.swap(k, i);
    }
}

#[test]
fn ranks_match_brute_force_on_three_methods() {
    let hib = [true, true, true, false, false];
    let values = vec![
        vec![38.2, 60.1, 90.0, 9.7, 12.0],
        vec![35.0, 60.1, 92.5, 10.1, 11.0],
        vec![20.0, 41.0, 80.0, 15.0, 11.0],
    ];
    let got = rank_methods(&values, &hib).unwrap();
    let want = brute_force_ranks(&values, &hib);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let values: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..5).map(|_| rng.random_range(0..4) as f64).collect())
            .collect();
        let got = rank_methods(&values, &hib).unwrap();
        let want = brute_force_ranks(&values, &hib);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{values:?}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn dominant_method_ranks_first_and_ties_share() {
    let hib = [true, false];
    let r = rank_methods(&[vec![9.0, 1.0], vec![5.0, 2.0], vec![1.0, 3.0]], &hib).unwrap();
    assert_eq!(r, vec![1.0, 2.0, 3.0]);
    let r = rank_methods(&[vec![4.0, 1.0], vec![4.0, 1.0]], &hib).unwrap();
    assert_eq!(r[0], r[1]);
    assert!(rank_methods(&[vec![1.0, 1.0]], &hib).is_err());
}

#[test]
fn normal_angles_against_closed_form() {
    // pred tilted by known angles about x from gt = +z
    let angles_deg = [0.0f64, 10.0, 20.0, 25.0, 40.0, 90.0];
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for a in angles_deg {
        let r = a.to_radians();
        pred.extend([0.0, r.sin() as f32, r.cos() as f32]);
        gt.extend([0.0, 0.0, 1.0]);
    }
    let m = normal_metrics(&pred, &gt, &[true; 6]).unwrap().unwrap();
    let mean = angles_deg.iter().sum::<f64>() / 6.0;
    assert!((m.mean_deg - mean).abs() < 1e-4, "{} vs {mean}", m.mean_deg);
    assert!((m.median_deg - 20.0).abs() < 1e-4);
    assert!((m.within_11_25 - 100.0 * 2.0 / 6.0).abs() < TOL);
    assert!((m.within_22_5 - 100.0 * 3.0 / 6.0).abs() < TOL);
    assert!((m.within_30 - 100.0 * 4.0 / 6.0).abs() < TOL);
}
