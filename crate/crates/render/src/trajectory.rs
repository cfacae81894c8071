//! Circular camera orbits with a sinusoidal height perturbation.
//!
//! Pose `k` of `F` sits at azimuth `2 pi k / F` on a horizontal circle of
//! radius `R` about the centre, at height
//! `base_height + amp * sin(2 pi freq k / F)` above it, looking at the centre.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RenderError, Result};
use crate::geometry::Vec3;
use crate::scene::SceneSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraTrajectory {
    pub poses: Vec<CameraPose>,
    pub center: [f64; 3],
    pub radius: f64,
    pub base_height: f64,
    pub perturb_amp: f64,
    pub perturb_freq: f64,
    /// `+1` counter-clockwise seen from above, `-1` clockwise.
    pub direction: f64,
    pub seed: u64,
}

impl CameraTrajectory {
    pub fn frames(&self) -> usize {
        self.poses.len()
    }
}

/// Builds the orbit. The seed only picks the direction of travel; pose 0 is
/// always at azimuth 0.
pub fn sample_trajectory(
    center: [f64; 3],
    radius: f64,
    base_height: f64,
    frames: usize,
    perturb_amp: f64,
    perturb_freq: f64,
    seed: u64,
) -> Result<CameraTrajectory> {
    if frames == 0 || frames % 4 != 1 {
        return Err(RenderError::Trajectory(format!(
            "frame count {frames} must satisfy F = 1 (mod 4)"
        )));
    }
    if !(radius > 0.0) || !(perturb_amp >= 0.0) || !perturb_freq.is_finite() || !base_height.is_finite() {
        return Err(RenderError::Trajectory(format!(
            "radius {radius} must be positive and amplitude {perturb_amp} non-negative"
        )));
    }
    if radius.hypot(base_height) <= perturb_amp {
        return Err(RenderError::Trajectory(
            "perturbation could reach the orbit centre".into(),
        ));
    }
    let direction = if ChaCha8Rng::seed_from_u64(seed).random::<bool>() {
        1.0
    } else {
        -1.0
    };
    let c = Vec3::from(center);
    let tau = std::f64::consts::TAU;
    let poses = (0..frames)
        .map(|k| {
            let phase = k as f64 / frames as f64;
            let az = direction * tau * phase;
            let h = base_height + perturb_amp * (tau * perturb_freq * phase).sin();
            let p = c + Vec3::new(radius * az.cos(), radius * az.sin(), h);
            CameraPose {
                position: [p.x, p.y, p.z],
                look_at: center,
                up: [0.0, 0.0, 1.0],
            }
        })
        .collect();
    Ok(CameraTrajectory {
        poses,
        center,
        radius,
        base_height,
        perturb_amp,
        perturb_freq,
        direction,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    pub frames: usize,
    /// Orbit radius as a multiple of the scene extent.
    pub radius_factor: [f64; 2],
    pub min_radius: f64,
    /// Camera height above the orbit centre.
    pub height: [f64; 2],
    /// Perturbation amplitude as a fraction of the radius.
    pub amp_fraction: [f64; 2],
    pub freq: [f64; 2],
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            frames: 21,
            radius_factor: [1.6, 2.2],
            min_radius: 0.45,
            height: [0.2, 0.4],
            amp_fraction: [0.0, 0.2],
            freq: [0.5, 2.0],
        }
    }
}

/// Radius of the smallest sphere about the asset centroid enclosing every
/// asset's bounding sphere, together with that centroid.
pub fn scene_extent(scene: &SceneSpec) -> Result<(Vec3, f64)> {
    scene.validate()?;
    let centers: Vec<Vec3> = scene.placements.iter().map(|p| p.pose.translation()).collect();
    let c = centers.iter().sum::<Vec3>() / centers.len() as f64;
    let mut extent: f64 = 0.0;
    for (p, x) in scene.placements.iter().zip(&centers) {
        extent = extent.max((x - c).norm() + p.asset.shape()?.bounding_radius());
    }
    Ok((c, extent))
}

/// Draws an orbit around the geometric centre of the assets.
pub fn orbit_for_scene(scene: &SceneSpec, config: &TrajectoryConfig, seed: u64) -> Result<CameraTrajectory> {
    let (c, extent) = scene_extent(scene)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |r: [f64; 2]| {
        if r[1] > r[0] {
            rng.random_range(r[0]..=r[1])
        } else {
            r[0]
        }
    };
    let radius = (u(config.radius_factor) * extent).max(config.min_radius);
    if radius <= extent {
        return Err(RenderError::Trajectory(format!(
            "orbit radius {radius:.3} must exceed the scene extent {extent:.3}"
        )));
    }
    let height = u(config.height);
    let amp = u(config.amp_fraction) * radius;
    let freq = u(config.freq);
    sample_trajectory([c.x, c.y, c.z], radius, height, config.frames, amp, freq, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unperturbed_circle() {
        let t = sample_trajectory([0.1, -0.2, 0.3], 2.0, 0.0, 9, 0.0, 1.0, 4).unwrap();
        for p in &t.poses {
            let d = Vec3::from(p.position) - Vec3::from(t.center);
            assert!((d.norm() - 2.0).abs() < 1e-12);
            assert_eq!(p.position[2], 0.3);
        }
    }

    #[test]
    fn phase_zero_position() {
        for seed in 0..4 {
            let t = sample_trajectory([0.0; 3], 3.0, 0.7, 5, 0.2, 1.0, seed).unwrap();
            assert_eq!(t.poses[0].position, [3.0, 0.0, 0.7]);
        }
    }

    #[test]
    fn frame_count_rule() {
        assert!(sample_trajectory([0.0; 3], 1.0, 0.0, 20, 0.0, 1.0, 0).is_err());
        assert!(sample_trajectory([0.0; 3], 1.0, 0.0, 0, 0.0, 1.0, 0).is_err());
        assert!(sample_trajectory([0.0; 3], 1.0, 0.0, 1, 0.0, 1.0, 0).is_ok());
    }
}
