//! Exact, invertible packing of pixel videos into latent grids, plus the
//! depth/disparity and normal signal conversions used as model targets.
//!
//! Frame 0 is packed on its own (the remaining group slots are zero), then
//! frames `1..F` go in groups of four. Inside a group every `p x p` patch of
//! every frame is flattened into the channel axis with layout
//! `((slot * p + dy) * p + dx) * C + c`, so changing frame `k` only touches
//! latent time index `ceil(k / 4)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::video::Video;

pub const TEMPORAL_GROUP: usize = 4;
pub const DEFAULT_PATCH: usize = 8;
/// Normalized disparity written to invalid pixels.
pub const INVALID_DISPARITY: f32 = -1.0;
/// Normal signal written to invalid pixels.
pub const INVALID_NORMAL: [f32; 3] = [0.0, 0.0, -1.0];

/// Describes how a video maps onto a latent grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Packing {
    pub patch: usize,
    pub group: usize,
    pub first_frame_solo: bool,
    /// Pixel channels `C`.
    pub channels: usize,
}

impl Packing {
    pub fn new(patch: usize, channels: usize) -> Self {
        Self {
            patch,
            group: TEMPORAL_GROUP,
            first_frame_solo: true,
            channels,
        }
    }

    pub fn c_lat(&self) -> usize {
        self.channels * self.patch * self.patch * self.group
    }

    pub fn t_lat(&self, frames: usize) -> usize {
        1 + (frames - 1) / self.group
    }

    /// Checks the frame count and spatial divisibility constraints.
    pub fn check(&self, frames: usize, height: usize, width: usize, channels: usize) -> Result<()> {
        if self.group != TEMPORAL_GROUP || !self.first_frame_solo || self.patch == 0 {
            return Err(Error::InvalidArgument(format!("unsupported packing {self:?}")));
        }
        if frames == 0 || !(frames - 1).is_multiple_of(self.group) {
            return Err(Error::InvalidShape {
                op: "encode",
                msg: format!("frame count must satisfy F = 4N + 1, got F = {frames}"),
            });
        }
        if !height.is_multiple_of(self.patch) || !width.is_multiple_of(self.patch) || height == 0 || width == 0 {
            return Err(Error::InvalidShape {
                op: "encode",
                msg: format!(
                    "height and width must be divisible by patch {}, got {height}x{width}",
                    self.patch
                ),
            });
        }
        if channels != self.channels {
            return Err(Error::InvalidShape {
                op: "encode",
                msg: format!("packing expects {} channels, video has {channels}", self.channels),
            });
        }
        Ok(())
    }
}

/// Packed latent: `data` has shape `[t_lat, H / p, W / p, c_lat]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub packing: Packing,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Tensor,
}

impl LatentGrid {
    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    /// Reinterprets a tensor of the right shape as a latent with this grid's
    /// packing and pixel extent.
    pub fn with_data(&self, data: Tensor) -> Result<LatentGrid> {
        if data.shape() != self.data.shape() {
            return Err(Error::shape("latent", self.data.shape(), data.shape()));
        }
        Ok(LatentGrid { data, ..self.clone() })
    }
}

/// Latent time index and group slot for frame `k`.
#[inline]
fn slot_of(k: usize, group: usize) -> (usize, usize) {
    if k == 0 {
        (0, 0)
    } else {
        (1 + (k - 1) / group, (k - 1) % group)
    }
}

pub fn encode(video: &Video, patch: usize) -> Result<LatentGrid> {
    let [f, h, w, c] = video.shape();
    let packing = Packing::new(patch, c);
    packing.check(f, h, w, c)?;
    let (t_lat, gh, gw, c_lat) = (packing.t_lat(f), h / patch, w / patch, packing.c_lat());
    let mut data = vec![0.0f32; t_lat * gh * gw * c_lat];
    for k in 0..f {
        let (ti, slot) = slot_of(k, packing.group);
        let frame = video.frame(k);
        for y in 0..h {
            let (gy, dy) = (y / patch, y % patch);
            for x in 0..w {
                let (gx, dx) = (x / patch, x % patch);
                let src = (y * w + x) * c;
                let dst = ((ti * gh + gy) * gw + gx) * c_lat + ((slot * patch + dy) * patch + dx) * c;
                data[dst..dst + c].copy_from_slice(&frame[src..src + c]);
            }
        }
    }
    Ok(LatentGrid {
        packing,
        frames: f,
        height: h,
        width: w,
        data: Tensor::new(vec![t_lat, gh, gw, c_lat], data)?,
    })
}

pub fn decode(latent: &LatentGrid) -> Result<Video> {
    let p = latent.packing;
    let (f, h, w, c) = (latent.frames, latent.height, latent.width, p.channels);
    p.check(f, h, w, c)?;
    let (gh, gw, c_lat) = (h / p.patch, w / p.patch, p.c_lat());
    let expect = [p.t_lat(f), gh, gw, c_lat];
    if latent.data.shape() != expect {
        return Err(Error::shape("decode", &expect, latent.data.shape()));
    }
    let src = latent.data.data();
    let mut out = Video::zeros(f, h, w, c);
    for k in 0..f {
        let (ti, slot) = slot_of(k, p.group);
        let frame = out.frame_mut(k);
        for y in 0..h {
            let (gy, dy) = (y / p.patch, y % p.patch);
            for x in 0..w {
                let (gx, dx) = (x / p.patch, x % p.patch);
                let s = ((ti * gh + gy) * gw + gx) * c_lat + ((slot * p.patch + dy) * p.patch + dx) * c;
                let d = (y * w + x) * c;
                frame[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    Ok(out)
}

/// Single-channel disparity normalized per sequence onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityVideo {
    pub video: Video,
    pub d_min: f32,
    pub d_max: f32,
    pub mask: Vec<bool>,
}

/// `disparity = 1 / depth` on valid pixels, min-max mapped onto `[-1, 1]` over
/// the whole sequence. A single distinct disparity maps to 0.
pub fn depth_to_normalized_disparity(depth: &Video, mask: &[bool]) -> Result<DisparityVideo> {
    if depth.channels() != 1 {
        return Err(Error::InvalidShape {
            op: "depth_to_normalized_disparity",
            msg: format!("depth must have 1 channel, got {}", depth.channels()),
        });
    }
    if mask.len() != depth.data().len() {
        return Err(Error::shape(
            "depth_to_normalized_disparity",
            &[depth.data().len()],
            &[mask.len()],
        ));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (&d, &m) in depth.data().iter().zip(mask) {
        if m {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Data(format!("valid pixel with non-positive depth {d}")));
            }
            let disp = 1.0 / d as f64;
            lo = lo.min(disp);
            hi = hi.max(disp);
        }
    }
    if lo > hi {
        return Err(Error::Data("sequence has no valid depth pixels".into()));
    }
    let range = hi - lo;
    let data = depth
        .data()
        .iter()
        .zip(mask)
        .map(|(&d, &m)| {
            if !m {
                INVALID_DISPARITY
            } else if range == 0.0 {
                0.0
            } else {
                (2.0 * (1.0 / d as f64 - lo) / range - 1.0) as f32
            }
        })
        .collect();
    Ok(DisparityVideo {
        video: Video::new(depth.frames(), depth.height(), depth.width(), 1, data)?,
        d_min: lo as f32,
        d_max: hi as f32,
        mask: mask.to_vec(),
    })
}

/// Inverse of [`depth_to_normalized_disparity`] on valid pixels; invalid
/// pixels get depth 0.
pub fn normalized_disparity_to_depth(disp: &DisparityVideo) -> Video {
    let (lo, hi) = (disp.d_min as f64, disp.d_max as f64);
    let data = disp
        .video
        .data()
        .iter()
        .zip(&disp.mask)
        .map(|(&n, &m)| {
            if !m {
                0.0
            } else {
                let d = lo + (n as f64 + 1.0) * 0.5 * (hi - lo);
                (1.0 / d) as f32
            }
        })
        .collect();
    Video::new(disp.video.frames(), disp.video.height(), disp.video.width(), 1, data).expect("same shape as input")
}

/// Camera-space normals to the 3-channel model signal. Zero vectors mark
/// invalid pixels and become [`INVALID_NORMAL`].
pub fn normals_to_signal(normals: &Video) -> Result<Video> {
    if normals.channels() != 3 {
        return Err(Error::InvalidShape {
            op: "normals_to_signal",
            msg: format!("normals must have 3 channels, got {}", normals.channels()),
        });
    }
    let mut out = normals.clone();
    for px in out.data_mut().chunks_mut(3) {
        if px.iter().all(|&v| v == 0.0) {
            px.copy_from_slice(&INVALID_NORMAL);
        }
    }
    Ok(out)
}

/// Renormalizes a decoded 3-channel signal to unit vectors. Returns the
/// normals and the mean displacement `| n - n / |n| |` over pixels.
pub fn signal_to_normals(signal: &Video) -> Result<(Video, f64)> {
    if signal.channels() != 3 {
        return Err(Error::InvalidShape {
            op: "signal_to_normals",
            msg: format!("signal must have 3 channels, got {}", signal.channels()),
        });
    }
    let mut out = signal.clone();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for px in out.data_mut().chunks_mut(3) {
        let n = px.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if n < 1e-12 {
            px.copy_from_slice(&INVALID_NORMAL);
            total += 1.0;
        } else {
            total += (n - 1.0).abs();
            for v in px.iter_mut() {
                *v = (*v as f64 / n) as f32;
            }
        }
        count += 1;
    }
    Ok((out, total / count.max(1) as f64))
}

/// RGB in `[0, 1]` to the model's `[-1, 1]` range.
pub fn rgb_to_signal(rgb: &Video) -> Video {
    rgb.map(|v| v * 2.0 - 1.0)
}
