//! Euler integration of the learned velocity field from noise, and
//! arbitrary-length inference by stitching overlapping segments.
//!
//! Segments start every `F_seg - O` frames and the last one is end-aligned.
//! When end alignment would make three windows cover the same frame, the
//! second-to-last window is dropped, so an overlap may exceed `O` but every
//! frame is covered by at most two windows. In an overlap of `L` frames the
//! incoming window gets weight `(j + 1) / (L + 1)` at overlap frame `j` and the
//! outgoing window the complement.
//!
//! Depth segments are each normalized to their own affine disparity frame,
//! so by default every incoming depth segment is least-squares aligned
//! (scale and shift) to the already stitched frames before blending.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Conditioning};
use crate::codec::{self, Packing};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::Target;
use crate::video::Video;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub steps: usize,
    pub segment: usize,
    pub overlap: usize,
    pub seed: u64,
    pub target: Target,
    /// Align each incoming depth segment to the stitched result first.
    pub align_segments: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            segment: 21,
            overlap: 8,
            seed: 0,
            target: Target::Depth,
            align_segments: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        if self.steps == 0 {
            return bad("steps", "must be at least 1".into());
        }
        if self.segment == 0 || !(self.segment - 1).is_multiple_of(4) {
            return bad("segment", format!("{} must satisfy F = 4N + 1", self.segment));
        }
        if self.overlap == 0 || 2 * self.overlap > self.segment || !self.overlap.is_multiple_of(4) {
            return bad(
                "overlap",
                format!(
                    "{} must be a positive multiple of 4 at most half the segment length {}",
                    self.overlap, self.segment
                ),
            );
        }
        Ok(())
    }
}

/// Windows `[start, end)` and, per window, the weight of each of its frames.
#[derive(Clone, Debug, PartialEq)]
pub struct StitchPlan {
    pub total: usize,
    pub windows: Vec<(usize, usize)>,
    pub weights: Vec<Vec<f32>>,
}

pub fn plan_segments(total: usize, segment: usize, overlap: usize) -> Result<StitchPlan> {
    if total < 1 {
        return Err(Error::InvalidArgument("video must have at least one frame".into()));
    }
    // beyond half a segment, windows two apart would overlap too
    if segment == 0 || 2 * overlap > segment {
        return Err(Error::InvalidArgument(format!(
            "overlap {overlap} must be at most half of segment {segment}"
        )));
    }
    if total <= segment {
        return Ok(StitchPlan {
            total,
            windows: vec![(0, total)],
            weights: vec![vec![1.0; total]],
        });
    }
    let stride = segment - overlap;
    let mut starts = vec![0usize];
    while starts.last().unwrap() + segment < total {
        let next = starts.last().unwrap() + stride;
        if next + segment >= total {
            break;
        }
        starts.push(next);
    }
    let last = total - segment;
    // drop windows the end-aligned one would triple-cover
    while starts.len() >= 2 && last < starts[starts.len() - 2] + segment {
        starts.pop();
    }
    starts.push(last);
    let windows: Vec<(usize, usize)> = starts.iter().map(|&s| (s, s + segment)).collect();
    let mut weights: Vec<Vec<f32>> = windows.iter().map(|_| vec![1.0; segment]).collect();
    for i in 1..windows.len() {
        let (s_in, _) = windows[i];
        let (s_out, e_out) = windows[i - 1];
        let len = e_out - s_in;
        for j in 0..len {
            let w_in = (j + 1) as f32 / (len + 1) as f32;
            weights[i][j] = w_in;
            weights[i - 1][s_in + j - s_out] = 1.0 - w_in;
        }
    }
    Ok(StitchPlan {
        total,
        windows,
        weights,
    })
}

/// Blends per-window predictions. In an overlap the result is
/// `a + w_in * (b - a)`, so agreeing windows pass through unchanged.
pub fn stitch(plan: &StitchPlan, segments: &[Video]) -> Result<Video> {
    if segments.len() != plan.windows.len() {
        return Err(Error::InvalidArgument(format!(
            "{} segments for a plan with {} windows",
            segments.len(),
            plan.windows.len()
        )));
    }
    let first = &segments[0];
    let (h, w, c) = (first.height(), first.width(), first.channels());
    for (seg, &(s, e)) in segments.iter().zip(&plan.windows) {
        if seg.frames() != e - s || seg.height() != h || seg.width() != w || seg.channels() != c {
            return Err(Error::shape("stitch", &[e - s, h, w, c], &seg.shape()));
        }
    }
    let mut out = Video::zeros(plan.total, h, w, c);
    let mut filled_to = 0;
    for (i, (seg, &(s, e))) in segments.iter().zip(&plan.windows).enumerate() {
        for f in s..e {
            let src = seg.frame(f - s);
            let dst = out.frame_mut(f);
            if f < filled_to {
                let w_in = plan.weights[i][f - s];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += w_in * (b - *d);
                }
            } else {
                dst.copy_from_slice(src);
            }
        }
        filled_to = e;
    }
    Ok(out)
}

/// A velocity field over single-clip latents shaped `[T, h, w, C]`.
pub trait VelocityModel {
    fn velocity(&self, x_t: &Tensor, x_c: &Tensor, t: f32) -> Result<Tensor>;
}

impl VelocityModel for Backbone {
    fn velocity(&self, x_t: &Tensor, x_c: &Tensor, t: f32) -> Result<Tensor> {
        self.predict_velocity(x_t, x_c, t, Conditioning::Null)
    }
}

/// The backbone with a fixed non-null conditioning.
pub struct Conditioned<'a> {
    pub model: &'a Backbone,
    pub cond: Conditioning,
}

impl VelocityModel for Conditioned<'_> {
    fn velocity(&self, x_t: &Tensor, x_c: &Tensor, t: f32) -> Result<Tensor> {
        self.model.predict_velocity(x_t, x_c, t, self.cond)
    }
}

/// The starting noise for a target latent of `shape`.
pub fn initial_noise(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `K` uniform Euler steps of `dx/dt = u(x, x_c, t)` from `t = 0` to `t = 1`,
/// starting at `x_0 = initial_noise(target_shape, seed)`. The state is
/// accumulated in `f64` and rounded once at the end.
pub fn denoise_segment(
    x_c: &Tensor,
    target_shape: &[usize],
    steps: usize,
    seed: u64,
    model: &dyn VelocityModel,
) -> Result<Tensor> {
    denoise_from(x_c, initial_noise(target_shape, seed), steps, model)
}

pub fn denoise_from(x_c: &Tensor, x0: Tensor, steps: usize, model: &dyn VelocityModel) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::InvalidArgument("at least one denoising step is required".into()));
    }
    if x_c.rank() != 4 || x0.rank() != 4 || x_c.shape()[..3] != x0.shape()[..3] {
        return Err(Error::shape("denoise_segment", x0.shape(), x_c.shape()));
    }
    let shape = x0.shape().to_vec();
    let mut x: Vec<f64> = x0.data().iter().map(|&v| v as f64).collect();
    let mut cur = x0;
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = (k as f64 * dt) as f32;
        let u = model.velocity(&cur, x_c, t)?;
        if u.shape() != shape.as_slice() {
            return Err(Error::shape("denoise_segment", &shape, u.shape()));
        }
        for (xi, &ui) in x.iter_mut().zip(u.data()) {
            *xi += dt * ui as f64;
        }
        cur = Tensor::new(shape.clone(), x.iter().map(|&v| v as f32).collect())?;
    }
    if !cur.is_finite() {
        return Err(Error::NonFinite("denoised latent".into()));
    }
    Ok(cur)
}

#[derive(Clone, Debug)]
pub struct InferenceOutput {
    /// Normalized disparity (1 channel) or unit normals (3 channels).
    pub prediction: Video,
    pub plan: StitchPlan,
    /// Mean renormalization displacement in normal mode.
    pub renorm_displacement: Option<f64>,
}

/// Runs the model over an RGB video in `[0, 1]`.
pub fn infer_video(
    rgb: &Video,
    config: &InferenceConfig,
    model: &dyn VelocityModel,
    rgb_packing: Packing,
    target_packing: Packing,
) -> Result<InferenceOutput> {
    config.validate()?;
    if rgb.channels() != 3 || rgb_packing.channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "expected an RGB video, got {} channels",
            rgb.channels()
        )));
    }
    if target_packing.channels != config.target.channels() {
        return Err(Error::Config {
            key: "target".into(),
            msg: format!(
                "target/checkpoint mismatch: `{}` needs {} channels, the model predicts {}",
                config.target,
                config.target.channels(),
                target_packing.channels
            ),
        });
    }
    let patch = rgb_packing.patch;
    if !rgb.height().is_multiple_of(patch) || !rgb.width().is_multiple_of(patch) {
        return Err(Error::InvalidShape {
            op: "infer_video",
            msg: format!(
                "height and width must be divisible by patch {patch}, got {}x{}",
                rgb.height(),
                rgb.width()
            ),
        });
    }
    let plan = plan_segments(rgb.frames(), config.segment, config.overlap)?;
    let signal = codec::rgb_to_signal(rgb);
    let mut segments = Vec::with_capacity(plan.windows.len());
    for &(s, e) in &plan.windows {
        let len = e - s;
        let padded = 4 * (len - 1).div_ceil(4) + 1;
        let mut clip = signal.slice_frames(s, len)?;
        if padded > len {
            let last = clip.slice_frames(len - 1, 1)?;
            let mut parts = vec![clip];
            parts.extend(std::iter::repeat_n(last, padded - len));
            clip = Video::concat_frames(&parts)?;
        }
        let lat_c = codec::encode(&clip, patch)?;
        let [t_lat, gh, gw, _] = lat_c.shape() else {
            unreachable!("latents are rank 4")
        };
        let shape = [*t_lat, *gh, *gw, target_packing.c_lat()];
        let x = denoise_segment(&lat_c.data, &shape, config.steps, config.seed, model)?;
        let lat = codec::LatentGrid {
            packing: target_packing,
            frames: padded,
            height: rgb.height(),
            width: rgb.width(),
            data: x,
        };
        segments.push(codec::decode(&lat)?.slice_frames(0, len)?);
    }
    if config.target == Target::Depth && config.align_segments {
        align_segments(&plan, &mut segments)?;
    }
    let stitched = stitch(&plan, &segments)?;
    let (prediction, renorm_displacement) = match config.target {
        Target::Depth => (stitched, None),
        Target::Normal => {
            let (n, d) = codec::signal_to_normals(&stitched)?;
            log::debug!("normal renormalization displacement {d:.3e}");
            (n, Some(d))
        }
    };
    if !prediction.is_finite() {
        return Err(Error::NonFinite("inference output".into()));
    }
    Ok(InferenceOutput {
        prediction,
        plan,
        renorm_displacement,
    })
}

/// Maps each segment after the first onto its predecessor's affine frame
/// using a least-squares fit over their shared frames.
fn align_segments(plan: &StitchPlan, segments: &mut [Video]) -> Result<()> {
    for i in 1..segments.len() {
        let (s_in, _) = plan.windows[i];
        let (s_out, e_out) = plan.windows[i - 1];
        let n = segments[i].frame_len();
        let a = &segments[i].data()[..(e_out - s_in) * n];
        let b = &segments[i - 1].data()[(s_in - s_out) * n..(e_out - s_out) * n];
        let (mut sa, mut sb, mut saa, mut sab) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (x as f64, y as f64);
            sa += x;
            sb += y;
            saa += x * x;
            sab += x * y;
        }
        let m = a.len() as f64;
        let det = m * saa - sa * sa;
        let (scale, shift) = if det.abs() > 1e-12 * m * m {
            let s = (m * sab - sa * sb) / det;
            (s, (sb - s * sa) / m)
        } else {
            (1.0, (sb - sa) / m)
        };
        for v in segments[i].data_mut() {
            *v = (scale * *v as f64 + shift) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_window_when_it_fits() {
        let p = plan_segments(21, 21, 8).unwrap();
        assert_eq!(p.windows, vec![(0, 21)]);
        assert!(p.weights[0].iter().all(|&w| w == 1.0));
    }

    #[test]
    fn two_windows_for_34_frames() {
        let p = plan_segments(34, 21, 8).unwrap();
        assert_eq!(p.windows, vec![(0, 21), (13, 34)]);
        for f in 13..21 {
            let s = p.weights[0][f] + p.weights[1][f - 13];
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(p.weights[1][0] < p.weights[1][7]);
    }

    #[test]
    fn never_more_than_two_windows_per_frame() {
        for total in 1..120 {
            let p = plan_segments(total, 21, 8).unwrap();
            assert_eq!(p.windows[0].0, 0);
            assert_eq!(p.windows.last().unwrap().1, total);
            for f in 0..total {
                let cover: Vec<usize> = (0..p.windows.len())
                    .filter(|&i| (p.windows[i].0..p.windows[i].1).contains(&f))
                    .collect();
                assert!((1..=2).contains(&cover.len()), "total {total} frame {f}");
                let s: f32 = cover.iter().map(|&i| p.weights[i][f - p.windows[i].0]).sum();
                if cover.len() == 2 {
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_frames_is_an_error() {
        assert!(plan_segments(0, 21, 8).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = InferenceConfig {
            overlap: 6,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("overlap"));
        assert!(InferenceConfig::default().validate().is_ok());
    }
}
