//! Evaluation protocol: global per-sequence scale/shift alignment, depth and
//! normal error statistics, temporal profiles and method ranking.
//!
//! Depth metrics: `REL = mean(|p - g| / g) * 100`,
//! `RMSE = sqrt(mean((p - g)^2)) * 100` (metres to centimetres), `delta_a = % of pixels with max(p/g, g/p) < a`.
//! Aggregation over sequences is an unweighted mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{self, Image};
use crate::video::Video;

pub const DELTA_THRESHOLDS: [f64; 3] = [1.05, 1.10, 1.25];
pub const NORMAL_THRESHOLDS_DEG: [f64; 3] = [11.25, 22.5, 30.0];
/// Aligned disparities are clamped here before inversion to depth.
pub const MIN_DISPARITY: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub scale: f64,
    pub shift: f64,
    pub residual_rms: f64,
    pub count: usize,
}

/// Least-squares `(s, b)` minimizing `sum_mask (s p + b - g)^2` over all
/// masked entries jointly. A constant prediction gets `s = 0`, `b = mean(g)`.
pub fn align_scale_shift(pred: &[f32], gt: &[f32], mask: &[bool]) -> Result<(AlignmentResult, Vec<f32>)> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::shape(
            "align_scale_shift",
            &[pred.len(), gt.len()],
            &[mask.len()],
        ));
    }
    let (mut n, mut sp, mut sg) = (0usize, 0.0f64, 0.0f64);
    for i in (0..pred.len()).filter(|&i| mask[i]) {
        n += 1;
        sp += pred[i] as f64;
        sg += gt[i] as f64;
    }
    if n == 0 {
        return Err(Error::Data("alignment mask is empty".into()));
    }
    let (mp, mg) = (sp / n as f64, sg / n as f64);
    let (mut spp, mut spg) = (0.0f64, 0.0f64);
    for i in (0..pred.len()).filter(|&i| mask[i]) {
        let (dp, dg) = (pred[i] as f64 - mp, gt[i] as f64 - mg);
        spp += dp * dp;
        spg += dp * dg;
    }
    let scale = if spp > 1e-24 * n as f64 * (1.0 + mp * mp) {
        spg / spp
    } else {
        log::warn!("constant prediction over {n} pixels; falling back to scale 0");
        0.0
    };
    let shift = mg - scale * mp;
    let aligned: Vec<f32> = pred.iter().map(|&p| (scale * p as f64 + shift) as f32).collect();
    let mut ss = 0.0f64;
    for i in (0..pred.len()).filter(|&i| mask[i]) {
        let r = scale * pred[i] as f64 + shift - gt[i] as f64;
        ss += r * r;
    }
    Ok((
        AlignmentResult {
            scale,
            shift,
            residual_rms: (ss / n as f64).sqrt(),
            count: n,
        },
        aligned,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rel: f64,
    pub rmse_cm: f64,
    pub delta_105: f64,
    pub delta_110: f64,
    pub delta_125: f64,
    pub count: usize,
}

impl DepthMetrics {
    /// Values in the column order `delta_1.05, delta_1.10, delta_1.25, REL, RMSE`.
    pub fn columns(&self) -> [f64; 5] {
        [self.delta_105, self.delta_110, self.delta_125, self.rel, self.rmse_cm]
    }

    pub const COLUMN_NAMES: [&'static str; 5] = ["delta_1.05", "delta_1.10", "delta_1.25", "REL", "RMSE_cm"];
    /// True where larger is better.
    pub const HIGHER_IS_BETTER: [bool; 5] = [true, true, true, false, false];
}

/// Metric depth statistics over the mask. `None` when the mask is empty.
pub fn depth_metrics(pred: &[f32], gt: &[f32], mask: &[bool]) -> Option<DepthMetrics> {
    let mut n = 0usize;
    let (mut rel, mut se) = (0.0f64, 0.0f64);
    let mut hits = [0usize; 3];
    for i in 0..pred.len().min(gt.len()).min(mask.len()) {
        if !mask[i] {
            continue;
        }
        let (p, g) = (pred[i] as f64, gt[i] as f64);
        n += 1;
        rel += (p - g).abs() / g;
        se += (p - g) * (p - g);
        let ratio = if p > 0.0 { (p / g).max(g / p) } else { f64::INFINITY };
        for (h, &a) in hits.iter_mut().zip(&DELTA_THRESHOLDS) {
            if ratio < a {
                *h += 1;
            }
        }
    }
    if n == 0 {
        return None;
    }
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    Some(DepthMetrics {
        rel: 100.0 * rel / n as f64,
        rmse_cm: 100.0 * (se / n as f64).sqrt(),
        delta_105: pct(hits[0]),
        delta_110: pct(hits[1]),
        delta_125: pct(hits[2]),
        count: n,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignSpace {
    /// Align predicted disparity to inverted GT depth, then invert back.
    #[default]
    Disparity,
    /// Align predictions directly to GT depth.
    Depth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub align_space: AlignSpace,
    /// `Some((near, far))` keeps only GT depths in `[near, far]` metres.
    pub depth_range: Option<(f32, f32)>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            align_space: AlignSpace::Disparity,
            depth_range: Some((0.3, 1.5)),
        }
    }
}

/// `valid && gt in [near, far]`.
pub fn evaluation_mask(gt_depth: &[f32], valid: &[bool], range: Option<(f32, f32)>) -> Vec<bool> {
    gt_depth
        .iter()
        .zip(valid)
        .map(|(&g, &v)| {
            v && g > 0.0
                && match range {
                    Some((lo, hi)) => (lo..=hi).contains(&g),
                    None => true,
                }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub id: String,
    pub alignment: Option<AlignmentResult>,
    pub metrics: Option<DepthMetrics>,
    pub note: Option<String>,
}

/// Aligns a relative prediction to metric GT over the whole sequence and
/// computes depth metrics.
pub fn evaluate_depth_sequence(
    id: &str,
    pred: &Video,
    gt_depth: &Video,
    valid: &[bool],
    config: &EvalConfig,
) -> Result<SequenceReport> {
    if pred.shape() != gt_depth.shape() || pred.channels() != 1 || valid.len() != pred.data().len() {
        return Err(Error::shape(
            "evaluate_depth_sequence",
            &pred.shape(),
            &gt_depth.shape(),
        ));
    }
    let mask = evaluation_mask(gt_depth.data(), valid, config.depth_range);
    if !mask.iter().any(|&m| m) {
        return Ok(SequenceReport {
            id: id.to_owned(),
            alignment: None,
            metrics: None,
            note: Some("no valid pixels inside the evaluation range; skipped".into()),
        });
    }
    let gt = gt_depth.data();
    let alignment = match config.align_space {
        AlignSpace::Disparity => {
            let gt_disp: Vec<f32> = gt
                .iter()
                .map(|&g| if g > 0.0 { (1.0 / g as f64) as f32 } else { 0.0 })
                .collect();
            align_scale_shift(pred.data(), &gt_disp, &mask)?.0
        }
        AlignSpace::Depth => align_scale_shift(pred.data(), gt, &mask)?.0,
    };
    let depth = apply_alignment(pred.data(), &alignment, config.align_space);
    Ok(SequenceReport {
        id: id.to_owned(),
        alignment: Some(alignment),
        metrics: depth_metrics(&depth, gt, &mask),
        note: None,
    })
}

/// Metric depth implied by a fitted alignment. In disparity space the
/// aligned disparity is clamped to [`MIN_DISPARITY`] before inversion.
pub fn apply_alignment(pred: &[f32], a: &AlignmentResult, space: AlignSpace) -> Vec<f32> {
    pred.iter()
        .map(|&p| {
            let v = a.scale * p as f64 + a.shift;
            match space {
                AlignSpace::Disparity => (1.0 / v.max(MIN_DISPARITY)) as f32,
                AlignSpace::Depth => v as f32,
            }
        })
        .collect()
}

/// Unweighted mean over sequences that produced metrics.
pub fn mean_depth_metrics(reports: &[SequenceReport]) -> Option<DepthMetrics> {
    let ms: Vec<&DepthMetrics> = reports.iter().filter_map(|r| r.metrics.as_ref()).collect();
    if ms.is_empty() {
        return None;
    }
    let k = ms.len() as f64;
    let avg = |f: fn(&DepthMetrics) -> f64| ms.iter().map(|m| f(m)).sum::<f64>() / k;
    Some(DepthMetrics {
        rel: avg(|m| m.rel),
        rmse_cm: avg(|m| m.rmse_cm),
        delta_105: avg(|m| m.delta_105),
        delta_110: avg(|m| m.delta_110),
        delta_125: avg(|m| m.delta_125),
        count: ms.iter().map(|m| m.count).sum(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalReport {
    pub mean_deg: f64,
    pub median_deg: f64,
    pub within_11_25: f64,
    pub within_22_5: f64,
    pub within_30: f64,
    pub count: usize,
}

impl NormalReport {
    pub const COLUMN_NAMES: [&'static str; 5] = ["mean", "median", "11.25", "22.5", "30"];
    pub const HIGHER_IS_BETTER: [bool; 5] = [false, false, true, true, true];

    pub fn columns(&self) -> [f64; 5] {
        [
            self.mean_deg,
            self.median_deg,
            self.within_11_25,
            self.within_22_5,
            self.within_30,
        ]
    }
}

/// Angular error statistics between normal fields (`[.., 3]` interleaved).
/// Non-unit vectors are renormalized; zero vectors are excluded. The median
/// of an even count is the lower middle value.
pub fn normal_metrics(pred: &[f32], gt: &[f32], mask: &[bool]) -> Result<Option<NormalReport>> {
    if pred.len() != gt.len() || pred.len() != 3 * mask.len() {
        return Err(Error::shape(
            "normal_metrics",
            &[pred.len(), gt.len()],
            &[3 * mask.len()],
        ));
    }
    let mut angles = Vec::new();
    let mut renormalized = 0usize;
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let p = &pred[3 * i..3 * i + 3];
        let g = &gt[3 * i..3 * i + 3];
        let np = p.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let ng = g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if np == 0.0 || ng == 0.0 {
            continue;
        }
        if (np - 1.0).abs() > 1e-3 || (ng - 1.0).abs() > 1e-3 {
            renormalized += 1;
        }
        let dot: f64 = p.iter().zip(g).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / (np * ng);
        angles.push(dot.clamp(-1.0, 1.0).acos().to_degrees());
    }
    if renormalized > 0 {
        log::warn!("renormalized {renormalized} non-unit normals before comparison");
    }
    if angles.is_empty() {
        return Ok(None);
    }
    let n = angles.len();
    let mean = angles.iter().sum::<f64>() / n as f64;
    let within = |thr: f64| 100.0 * angles.iter().filter(|&&a| a < thr).count() as f64 / n as f64;
    let (w1, w2, w3) = (
        within(NORMAL_THRESHOLDS_DEG[0]),
        within(NORMAL_THRESHOLDS_DEG[1]),
        within(NORMAL_THRESHOLDS_DEG[2]),
    );
    angles.sort_by(f64::total_cmp);
    Ok(Some(NormalReport {
        mean_deg: mean,
        median_deg: angles[(n - 1) / 2],
        within_11_25: w1,
        within_22_5: w2,
        within_30: w3,
        count: n,
    }))
}

/// Stacks row `row` of every frame: a `frames x width` single-channel image.
pub fn temporal_profile(video: &Video, row: usize) -> Result<Image> {
    if row >= video.height() {
        return Err(Error::InvalidArgument(format!(
            "profile row {row} outside height {}",
            video.height()
        )));
    }
    if video.channels() != 1 {
        return Err(Error::InvalidArgument(format!(
            "temporal profiles need a single-channel video, got {} channels",
            video.channels()
        )));
    }
    let w = video.width();
    let mut data = Vec::with_capacity(video.frames() * w);
    for k in 0..video.frames() {
        let f = video.frame(k);
        data.extend_from_slice(&f[row * w..(row + 1) * w]);
    }
    Image::new(w, video.frames(), 1, data)
}

/// False-color rendering of a profile for PNG output.
pub fn colorize_profile(profile: &Image) -> Result<Image> {
    imageio::colorize(&profile.data, profile.width, profile.height, |_| true)
}

/// RMS of frame-to-frame differences down a profile's columns, over columns
/// where `keep(frame, x)` holds for both frames.
pub fn profile_jitter(profile: &Image, keep: impl Fn(usize, usize) -> bool) -> Option<f64> {
    let w = profile.width;
    let (mut ss, mut n) = (0.0f64, 0usize);
    for k in 1..profile.height {
        for x in 0..w {
            if keep(k - 1, x) && keep(k, x) {
                let d = profile.data[k * w + x] as f64 - profile.data[(k - 1) * w + x] as f64;
                ss += d * d;
                n += 1;
            }
        }
    }
    (n > 0).then(|| (ss / n as f64).sqrt())
}

/// Per-metric competition ranks (1 = best, ties share the mean rank),
/// averaged per method. `values[m][j]` is metric `j` of method `m`.
pub fn rank_methods(values: &[Vec<f64>], higher_is_better: &[bool]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument("ranking needs at least two methods".into()));
    }
    let k = higher_is_better.len();
    if values.iter().any(|v| v.len() != k) {
        return Err(Error::InvalidArgument(format!("every method needs {k} metric values")));
    }
    let m = values.len();
    let mut total = vec![0.0f64; m];
    for (j, &hib) in higher_is_better.iter().enumerate() {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            let (x, y) = (values[a][j], values[b][j]);
            if hib {
                y.total_cmp(&x)
            } else {
                x.total_cmp(&y)
            }
        });
        let mut i = 0;
        while i < m {
            let mut e = i + 1;
            while e < m && values[order[e]][j] == values[order[i]][j] {
                e += 1;
            }
            let shared = (i + 1 + e) as f64 / 2.0;
            for &idx in &order[i..e] {
                total[idx] += shared;
            }
            i = e;
        }
    }
    Ok(total.into_iter().map(|t| t / k as f64).collect())
}
