//! Flow-matching interpolation, Euler denoising with an oracle velocity,
//! and complementary-weight stitching.

use clearflow_core::inference::{denoise_from, denoise_segment, initial_noise, plan_segments, stitch, VelocityModel};
use clearflow_core::trainer::make_training_example;
use clearflow_core::{Result, Tensor, Video};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `u = x1 - x0` regardless of the state: the straight-path velocity.
struct Oracle {
    v: Tensor,
}

impl VelocityModel for Oracle {
    fn velocity(&self, _x_t: &Tensor, _x_c: &Tensor, _t: f32) -> Result<Tensor> {
        Ok(self.v.clone())
    }
}

fn oracle_for(x1: &Tensor, x0: &Tensor) -> Oracle {
    Oracle {
        v: make_training_example(x1, 0.5, x0).unwrap().1,
    }
}

const SHAPE: [usize; 4] = [3, 2, 2, 4];

#[test]
fn oracle_velocity_recovers_target_exactly_on_a_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // values on a 1/1024 grid make x1 - x0 exact in f32
    let grid = |rng: &mut ChaCha8Rng| Tensor::from_fn(&SHAPE, |_| rng.random_range(-4096i32..4096) as f32 / 1024.0);
    let x_c = Tensor::zeros(&[3, 2, 2, 8]);
    for _ in 0..20 {
        let (x1, x0) = (grid(&mut rng), grid(&mut rng));
        let oracle = oracle_for(&x1, &x0);
        for k in [1, 5, 25] {
            let out = denoise_from(&x_c, x0.clone(), k, &oracle).unwrap();
            assert!(out.bit_eq(&x1), "K = {k}: max diff {}", out.max_abs_diff(&x1).unwrap());
        }
    }
}

#[test]
fn oracle_velocity_recovers_gaussian_targets() {
    let x_c = Tensor::zeros(&[3, 2, 2, 8]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x1 = Tensor::uniform(&SHAPE, -1.0, 1.0, &mut rng);
    let x0 = initial_noise(&SHAPE, 7);
    let oracle = oracle_for(&x1, &x0);
    for k in [1, 5, 25] {
        let out = denoise_segment(&x_c, &SHAPE, k, 7, &oracle).unwrap();
        // only the f32 rounding of x1 - x0 remains
        let d = out.max_abs_diff(&x1).unwrap();
        assert!(d <= 1e-6, "K = {k}: {d}");
    }
}

#[test]
fn denoising_is_seed_deterministic() {
    let x_c = Tensor::zeros(&[3, 2, 2, 8]);
    let oracle = Oracle {
        v: Tensor::full(&SHAPE, 0.25),
    };
    let a = denoise_segment(&x_c, &SHAPE, 5, 3, &oracle).unwrap();
    let b = denoise_segment(&x_c, &SHAPE, 5, 3, &oracle).unwrap();
    let c = denoise_segment(&x_c, &SHAPE, 5, 4, &oracle).unwrap();
    assert!(a.bit_eq(&b));
    assert!(!a.bit_eq(&c));
    assert!(denoise_segment(&x_c, &SHAPE, 0, 3, &oracle).is_err());
}

#[test]
fn interpolation_endpoints_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let x1 = Tensor::randn(&[17], 2.0, &mut rng);
        let x0 = Tensor::randn(&[17], 1.0, &mut rng);
        assert!(make_training_example(&x1, 0.0, &x0).unwrap().0.bit_eq(&x0));
        assert!(make_training_example(&x1, 1.0, &x0).unwrap().0.bit_eq(&x1));
    }
}

/// Independent coverage count: windows covering each frame.
fn coverage(windows: &[(usize, usize)], total: usize) -> Vec<usize> {
    let mut c = vec![0; total];
    for &(s, e) in windows {
        for f in c.iter_mut().take(e).skip(s) {
            *f += 1;
        }
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn stitch_weights_sum_to_one(total in 1usize..200, seg_q in 1usize..8, ov_q in 1usize..4) {
        let segment = 4 * seg_q + 1;
        let overlap = 4 * ov_q;
        if 2 * overlap > segment {
            prop_assert!(plan_segments(total, segment, overlap).is_err());
            return Ok(());
        }
        let plan = plan_segments(total, segment, overlap).unwrap();
        let cov = coverage(&plan.windows, total);
        prop_assert!(cov.iter().all(|&c| (1..=2).contains(&c)), "{cov:?}");
        prop_assert_eq!(plan.windows.first().unwrap().0, 0);
        prop_assert_eq!(plan.windows.last().unwrap().1, total);
        let mut sum = vec![0.0f64; total];
        for (&(s, e), w) in plan.windows.iter().zip(&plan.weights) {
            prop_assert_eq!(w.len(), e - s);
            for f in s..e {
                sum[f] += w[f - s] as f64;
            }
        }
        for (f, s) in sum.iter().enumerate() {
            prop_assert!((s - 1.0).abs() < 1e-6, "frame {}: {}", f, s);
        }
    }

    #[test]
    fn agreeing_windows_pass_through(total in 22usize..120, seed in 0u64..1000) {
        let plan = plan_segments(total, 21, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = Video::from_fn(total, 2, 3, 1, |_, _, _, _| rng.random_range(-1.0f32..1.0));
        let segments: Vec<Video> = plan
            .windows
            .iter()
            .map(|&(s, e)| truth.slice_frames(s, e - s).unwrap())
            .collect();
        let out = stitch(&plan, &segments).unwrap();
        prop_assert_eq!(out.data(), truth.data());
    }
}

#[test]
fn single_frame_video_is_one_window() {
    let plan = plan_segments(1, 21, 8).unwrap();
    assert_eq!(plan.windows, vec![(0, 1)]);
    let v = Video::filled(1, 2, 2, 1, 0.3);
    assert_eq!(stitch(&plan, std::slice::from_ref(&v)).unwrap().data(), v.data());
}

#[test]
fn overlap_blend_uses_ramp_weights() {
    // two windows over 34 frames: [0, 21) and [13, 34), overlap of 8
    let plan = plan_segments(34, 21, 8).unwrap();
    assert_eq!(plan.windows, vec![(0, 21), (13, 34)]);
    let a = Video::filled(21, 1, 1, 1, 0.0);
    let b = Video::filled(21, 1, 1, 1, 9.0);
    let out = stitch(&plan, &[a, b]).unwrap();
    for f in 13..21 {
        let w_in = (f - 13 + 1) as f32 / 9.0;
        assert!((out.at(f, 0, 0, 0) - 9.0 * w_in).abs() < 1e-6);
    }
    assert_eq!(out.at(12, 0, 0, 0), 0.0);
    assert_eq!(out.at(21, 0, 0, 0), 9.0);
}
