//! Synthetic training data for transparent-object depth and normals:
//! procedural tabletop scenes, perturbed orbit trajectories and a Whitted
//! ray tracer.

// Config checks use `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod geometry;
pub mod scene;
pub mod tracer;
pub mod trajectory;

pub use error::{RenderError, Result};
pub use scene::{generate_scene, sample_scene, settle, AssetBank, SceneConfig, SceneSpec, SettleConfig};
pub use tracer::{render_sequence, RenderConfig, ScenePair};
pub use trajectory::{orbit_for_scene, sample_trajectory, CameraTrajectory, TrajectoryConfig};
