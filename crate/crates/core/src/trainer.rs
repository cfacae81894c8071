//! Flow-matching fine-tuning of the trainable parameters with the
//! image/video co-training sampler.
//!
//! Per step: draw `F = 4N + 1` with `N` uniform on the support, assemble a
//! batch of `F`-frame clips (image-set samples only when `F == 1`), draw
//! `t ~ U(0, 1)` per sample and `x_0 ~ N(0, I)`, regress
//! `u(Concat(x_t, x_c), c, t)` onto `v = x_1 - x_0` with
//! `x_t = t x_1 + (1 - t) x_0`, and take one AdamW step.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig, Conditioning};
use crate::checkpoint::{Checkpoint, TensorMap};
use crate::codec::{self, Packing};
use crate::error::{Error, Result};
use crate::lora::{ParamVisitor, Trainables};
use crate::optim::{adamw_step, AdamWConfig, Moments, OptimizerState, ParamUpdate};
use crate::tensor::Tensor;
use crate::video::Video;

/// What the model learns to produce from RGB.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[default]
    Depth,
    Normal,
}

impl Target {
    pub fn channels(self) -> usize {
        match self {
            Target::Depth => 1,
            Target::Normal => 3,
        }
    }
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Target::Depth => "depth",
            Target::Normal => "normal",
        })
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(Target::Depth),
            "normal" => Ok(Target::Normal),
            other => Err(Error::InvalidArgument(format!(
                "unknown target `{other}` (depth|normal)"
            ))),
        }
    }
}

/// Which pool a training sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Video,
    Image,
}

/// One rendered sequence: RGB in `[0, 1]`, metric depth (0 = no hit),
/// camera-space normals (zero = no hit) and the validity mask.
#[derive(Clone, Debug)]
pub struct SequencePair {
    pub id: String,
    pub rgb: Video,
    pub depth: Video,
    pub normal: Video,
    pub mask: Vec<bool>,
    pub tag: Option<usize>,
}

impl SequencePair {
    pub fn frames(&self) -> usize {
        self.rgb.frames()
    }

    pub fn check(&self) -> Result<()> {
        let [f, h, w, c] = self.rgb.shape();
        let ok = c == 3
            && self.depth.shape() == [f, h, w, 1]
            && self.normal.shape() == [f, h, w, 3]
            && self.mask.len() == f * h * w;
        if !ok {
            return Err(Error::Data(format!(
                "sequence `{}`: inconsistent shapes rgb {:?} depth {:?} normal {:?} mask {}",
                self.id,
                self.rgb.shape(),
                self.depth.shape(),
                self.normal.shape(),
                self.mask.len()
            )));
        }
        Ok(())
    }

    pub fn clip_mask(&self, start: usize, len: usize) -> &[bool] {
        let n = self.rgb.height() * self.rgb.width();
        &self.mask[start * n..(start + len) * n]
    }

    /// Model-space target for frames `start..start + len`.
    pub fn target_signal(&self, target: Target, start: usize, len: usize) -> Result<Video> {
        match target {
            Target::Depth => {
                let depth = self.depth.slice_frames(start, len)?;
                let mask = self.clip_mask(start, len);
                if !mask.iter().any(|&m| m) {
                    return Ok(depth.map(|_| codec::INVALID_DISPARITY));
                }
                Ok(codec::depth_to_normalized_disparity(&depth, mask)?.video)
            }
            Target::Normal => codec::normals_to_signal(&self.normal.slice_frames(start, len)?),
        }
    }
}

/// Video-set and image-set pools. Image-set entries are single frames.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub video: Vec<SequencePair>,
    pub image: Vec<SequencePair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Support of `N` in `F = 4N + 1`.
    pub n_support: Vec<usize>,
    /// Mixing weights of (video set, image set) when `F == 1`.
    pub dataset_weights: [f32; 2],
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_support: (0..=5).collect(),
            dataset_weights: [1.0, 1.0],
        }
    }
}

/// `F = 4N + 1` with `N` drawn uniformly from the support.
pub fn sample_frame_count<R: Rng + ?Sized>(support: &[usize], rng: &mut R) -> usize {
    4 * support[rng.random_range(0..support.len())] + 1
}

/// `x_t = t x_1 + (1 - t) x_0` and `v = x_1 - x_0`.
pub fn make_training_example(x1: &Tensor, t: f32, x0: &Tensor) -> Result<(Tensor, Tensor)> {
    if x1.shape() != x0.shape() {
        return Err(Error::shape("make_training_example", x1.shape(), x0.shape()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("timestep {t} outside [0, 1]")));
    }
    let (a, b) = (x1.data(), x0.data());
    let xt = if t == 1.0 {
        x1.clone()
    } else if t == 0.0 {
        x0.clone()
    } else {
        Tensor::from_fn(x1.shape(), |i| t * a[i] + (1.0 - t) * b[i])
    };
    let v = Tensor::from_fn(x1.shape(), |i| a[i] - b[i]);
    Ok((xt, v))
}

/// A batch of same-length clips, already packed into latents.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub frames: usize,
    pub ids: Vec<String>,
    pub sources: Vec<Source>,
    /// `[B, T, h, w, C_rgb]`
    pub x1_c: Tensor,
    /// `[B, T, h, w, C_target]`
    pub x1_d: Tensor,
    pub t: Vec<f32>,
    pub x0: Tensor,
    pub conds: Vec<Conditioning>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Batched `(x_t, v_target)`.
    pub fn example(&self) -> Result<(Tensor, Tensor)> {
        let per = self.x1_d.numel() / self.len().max(1);
        let (a, b) = (self.x1_d.data(), self.x0.data());
        let mut xt = Vec::with_capacity(a.len());
        for (i, &t) in self.t.iter().enumerate() {
            let r = i * per..(i + 1) * per;
            let x1 = Tensor::new(vec![per], a[r.clone()].to_vec())?;
            let x0 = Tensor::new(vec![per], b[r].to_vec())?;
            xt.extend_from_slice(make_training_example(&x1, t, &x0)?.0.data());
        }
        let v = Tensor::from_fn(self.x1_d.shape(), |i| a[i] - b[i]);
        Ok((Tensor::new(self.x1_d.shape().to_vec(), xt)?, v))
    }
}

/// A velocity model that can run on the autodiff graph.
pub trait FlowModel {
    fn forward(
        &self,
        g: &mut Graph,
        x_t: Var,
        x_c: Var,
        ts: &[f32],
        conds: &[Conditioning],
        rec: &mut Trainables,
    ) -> Result<Var>;
}

impl FlowModel for Backbone {
    fn forward(
        &self,
        g: &mut Graph,
        x_t: Var,
        x_c: Var,
        ts: &[f32],
        conds: &[Conditioning],
        rec: &mut Trainables,
    ) -> Result<Var> {
        Backbone::forward(self, g, x_t, x_c, ts, conds, rec)
    }
}

/// Mean squared error between predicted and target velocity. Returns the
/// loss node; numerical failures carry the batch composition.
pub fn loss(g: &mut Graph, batch: &TrainBatch, model: &dyn FlowModel, rec: &mut Trainables) -> Result<Var> {
    let diag = |e: Error| -> Error {
        if e.is_numerical() {
            Error::NonFinite(format!(
                "{e}; batch F={} ids={:?} t={:?}",
                batch.frames, batch.ids, batch.t
            ))
        } else {
            e
        }
    };
    let (xt, v) = batch.example()?;
    let xt = g.constant(xt);
    let xc = g.constant(batch.x1_c.clone());
    let v = g.constant(v);
    let u = model.forward(g, xt, xc, &batch.t, &batch.conds, rec).map_err(diag)?;
    let l = g.mse(u, v).map_err(diag)?;
    if !g.value(l).is_finite() {
        return Err(diag(Error::NonFinite("loss".into())));
    }
    Ok(l)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub target: Target,
    pub patch: usize,
    pub sampler: SamplerConfig,
    pub optimizer: AdamWConfig,
    pub model: BackboneConfig,
    pub checkpoint_every: u64,
    pub use_scene_tags: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 8,
            seed: 0,
            target: Target::Depth,
            patch: codec::DEFAULT_PATCH,
            sampler: SamplerConfig::default(),
            optimizer: AdamWConfig::default(),
            model: BackboneConfig::default(),
            checkpoint_every: 1000,
            use_scene_tags: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.sampler.n_support.is_empty() {
            return bad("sampler.n_support", "must not be empty".into());
        }
        if self.sampler.dataset_weights.iter().any(|w| !(*w >= 0.0))
            || self.sampler.dataset_weights.iter().sum::<f32>() <= 0.0
        {
            return bad(
                "sampler.dataset_weights",
                "weights must be non-negative and not all zero".into(),
            );
        }
        if self.patch == 0 {
            return bad("patch", "must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optimizer", format!("lr must be positive and betas in [0, 1): {o:?}"));
        }
        self.model.validate()
    }

    /// Sets the model's channel counts and positional extents for clips of up
    /// to `max_frames` frames at `height x width`.
    pub fn fit_model_to(&mut self, max_frames: usize, height: usize, width: usize) {
        let rgb = Packing::new(self.patch, 3);
        let tgt = Packing::new(self.patch, self.target.channels());
        self.model.out_channels = tgt.c_lat();
        self.model.in_channels = tgt.c_lat() + rgb.c_lat();
        self.model.max_t = tgt.t_lat(max_frames);
        self.model.max_h = height / self.patch;
        self.model.max_w = width / self.patch;
    }
}

/// Everything a checkpoint records about how a model was built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub model: BackboneConfig,
    pub target: Target,
    pub rgb_packing: Packing,
    pub target_packing: Packing,
    pub seed: u64,
    pub merged: bool,
    pub optimizer: AdamWConfig,
}

/// Weights plus optimizer moments and step counter.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub backbone: Backbone,
    pub optimizer: OptimizerState,
    pub meta: ModelMeta,
}

impl ModelState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            backbone: Backbone::new(config.model.clone(), config.seed)?,
            optimizer: OptimizerState::new(config.optimizer),
            meta: ModelMeta {
                model: config.model.clone(),
                target: config.target,
                rgb_packing: Packing::new(config.patch, 3),
                target_packing: Packing::new(config.patch, config.target.channels()),
                seed: config.seed,
                merged: false,
                optimizer: config.optimizer,
            },
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.optimizer.step, serde_json::to_value(&self.meta)?);
        ck.sections = self.backbone.to_sections();
        let (mut m, mut v) = (TensorMap::new(), TensorMap::new());
        for (name, mo) in &self.optimizer.moments {
            m.insert(name.clone(), mo.m.clone());
            v.insert(name.clone(), mo.v.clone());
        }
        if !m.is_empty() {
            ck.sections.insert("optim.m".into(), m);
            ck.sections.insert("optim.v".into(), v);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(ck.meta.clone())?;
        let backbone = Backbone::from_sections(meta.model.clone(), &ck.sections)?;
        let mut optimizer = OptimizerState::new(meta.optimizer);
        optimizer.step = ck.step;
        if let (Some(m), Some(v)) = (ck.section("optim.m"), ck.section("optim.v")) {
            for (name, mt) in m {
                let vt = v
                    .get(name)
                    .ok_or_else(|| Error::Format(format!("second moment for `{name}` missing")))?;
                optimizer.moments.insert(
                    name.clone(),
                    Moments {
                        m: mt.clone(),
                        v: vt.clone(),
                    },
                );
            }
        }
        Ok(Self {
            backbone,
            optimizer,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// One row of the append-only metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub frames: usize,
    pub loss: f32,
    pub lr: f32,
    pub video_samples: usize,
    pub image_samples: usize,
}

/// Picks the frame count and clips for one step.
pub fn assemble_batch(config: &TrainConfig, data: &TrainData, rng: &mut ChaCha8Rng) -> Result<TrainBatch> {
    let b = config.batch_size;
    let mut frames = sample_frame_count(&config.sampler.n_support, rng);
    if data.video.is_empty() {
        if data.image.is_empty() {
            return Err(Error::Data("training data has no sequences".into()));
        }
        // image-only training: every batch is a single-frame batch
        frames = 1;
    }
    let longest = data.video.iter().map(SequencePair::frames).max().unwrap_or(0);
    if frames > 1 && longest < frames {
        return Err(Error::Data(format!(
            "sampler drew F = {frames} but the longest video has {longest} frames; \
             F > 1 batches are drawn from the video set only"
        )));
    }
    let [wv, wi] = config.sampler.dataset_weights;
    let mut ids = Vec::with_capacity(b);
    let mut sources = Vec::with_capacity(b);
    let mut rgb = Vec::with_capacity(b);
    let mut tgt = Vec::with_capacity(b);
    let mut conds = Vec::with_capacity(b);
    let eligible: Vec<&SequencePair> = data.video.iter().filter(|s| s.frames() >= frames).collect();
    for _ in 0..b {
        let from_image =
            frames == 1 && !data.image.is_empty() && (eligible.is_empty() || rng.random::<f32>() * (wv + wi) < wi);
        let (seq, source) = if from_image {
            (&data.image[rng.random_range(0..data.image.len())], Source::Image)
        } else {
            (eligible[rng.random_range(0..eligible.len())], Source::Video)
        };
        let start = rng.random_range(0..=seq.frames() - frames);
        let clip = seq.rgb.slice_frames(start, frames)?;
        rgb.push(codec::encode(&codec::rgb_to_signal(&clip), config.patch)?.data);
        tgt.push(codec::encode(&seq.target_signal(config.target, start, frames)?, config.patch)?.data);
        ids.push(format!("{}@{start}", seq.id));
        sources.push(source);
        conds.push(match (config.use_scene_tags, seq.tag) {
            (true, Some(t)) => Conditioning::SceneTag(t),
            _ => Conditioning::Null,
        });
    }
    let x1_c = stack(&rgb)?;
    let x1_d = stack(&tgt)?;
    let t: Vec<f32> = (0..b).map(|_| rng.random::<f32>()).collect();
    let x0 = Tensor::randn(x1_d.shape(), 1.0, rng);
    Ok(TrainBatch {
        frames,
        ids,
        sources,
        x1_c,
        x1_d,
        t,
        x0,
        conds,
    })
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to stack".into()))?;
    let mut data = Vec::with_capacity(first.numel() * parts.len());
    for p in parts {
        if p.shape() != first.shape() {
            return Err(Error::shape("stack", first.shape(), p.shape()));
        }
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

/// RNG for a given step, so a resumed run draws exactly what an
/// uninterrupted one would.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

/// Runs one optimization step and returns its log row.
pub fn train_step(state: &mut ModelState, config: &TrainConfig, data: &TrainData) -> Result<LogRow> {
    let step = state.optimizer.step;
    let mut rng = step_rng(config.seed, step);
    let batch = assemble_batch(config, data, &mut rng)?;
    let mut g = Graph::new();
    let mut rec = Trainables::new();
    let l = loss(&mut g, &batch, &state.backbone, &mut rec)?;
    let loss_value = g.value(l).item()?;
    let mut grads = g.backward(l)?;
    let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, v) in &rec.vars {
        let gt = grads
            .take(*v)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for `{name}`")))?;
        by_name.insert(name.clone(), gt);
    }
    drop(g);

    let mut params: Vec<(String, Tensor)> = Vec::new();
    state.backbone.visit(&mut |name, t, trainable| {
        if trainable {
            params.push((name.to_owned(), t.clone()));
        }
    });
    {
        let mut updates = Vec::with_capacity(params.len());
        for (name, p) in params.iter_mut() {
            let g = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("trainable `{name}` did not take part")))?;
            updates.push(ParamUpdate {
                name: name.as_str(),
                param: p,
                grad: g,
            });
        }
        adamw_step(&mut updates, &mut state.optimizer).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m}; batch F={} ids={:?}", batch.frames, batch.ids)),
            e => e,
        })?;
    }
    let mut fresh: BTreeMap<String, Tensor> = params.into_iter().collect();
    state.backbone.visit_mut(&mut |name, t, trainable| {
        if trainable {
            if let Some(n) = fresh.remove(name) {
                *t = n;
            }
        }
    });
    let image_samples = batch.sources.iter().filter(|s| **s == Source::Image).count();
    Ok(LogRow {
        step: state.optimizer.step,
        frames: batch.frames,
        loss: loss_value,
        lr: config.optimizer.lr,
        video_samples: batch.len() - image_samples,
        image_samples,
    })
}

/// Where training writes its log and checkpoints.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
    }

    pub fn latest_path(&self) -> PathBuf {
        self.dir.join("checkpoints").join("latest.ckpt")
    }
}

/// Trains until `config.steps` optimizer steps have been taken (counting
/// steps already in `state`). With an output directory, rows are appended
/// to `metrics.csv` and checkpoints written atomically.
pub fn train(
    state: &mut ModelState,
    config: &TrainConfig,
    data: &TrainData,
    out: Option<&TrainOutput>,
    mut on_step: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    config.validate()?;
    for s in data.video.iter().chain(&data.image) {
        s.check()?;
    }
    if let Some(s) = data.image.iter().find(|s| s.frames() != 1) {
        return Err(Error::Data(format!(
            "image-set entry `{}` has {} frames; image sets hold single frames",
            s.id,
            s.frames()
        )));
    }
    let mut writer = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let path = o.log_path();
            let fresh = !path.exists();
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some(csv::WriterBuilder::new().has_headers(fresh).from_writer(f))
        }
        None => None,
    };
    let mut rows = Vec::new();
    while state.optimizer.step < config.steps {
        let row = train_step(state, config, data)?;
        if let Some(w) = writer.as_mut() {
            w.serialize(&row)
                .map_err(|e| Error::Data(format!("metrics log: {e}")))?;
            w.flush().map_err(|e| Error::Data(format!("metrics log: {e}")))?;
        }
        on_step(&row);
        let step = row.step;
        rows.push(row);
        if let Some(o) = out {
            let every = config.checkpoint_every;
            if (every > 0 && step % every == 0) || step == config.steps {
                let ck = state.to_checkpoint()?;
                ck.save(&o.checkpoint_path(step))?;
                ck.save(&o.latest_path())?;
            }
        }
    }
    Ok(rows)
}

/// Reads a metrics log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Mean of the first and last `window` values.
pub fn smoothed_endpoints(values: &[f32], window: usize) -> Option<(f64, f64)> {
    let w = window.min(values.len());
    if w == 0 {
        return None;
    }
    let mean = |s: &[f32]| s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
    Some((mean(&values[..w]), mean(&values[values.len() - w..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_endpoints() {
        assert_eq!(sample_frame_count(&[0], &mut step_rng(0, 0)), 1);
        assert_eq!(sample_frame_count(&[5], &mut step_rng(0, 0)), 21);
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let x1 = Tensor::from_fn(&[5], |i| i as f32 * 0.37 - 0.4);
        let x0 = Tensor::from_fn(&[5], |i| 1.3 - i as f32);
        let (xt, _) = make_training_example(&x1, 1.0, &x0).unwrap();
        assert!(xt.bit_eq(&x1));
        let (xt, _) = make_training_example(&x1, 0.0, &x0).unwrap();
        assert!(xt.bit_eq(&x0));
        let (xt, v) = make_training_example(&Tensor::scalar(4.0), 0.5, &Tensor::scalar(2.0)).unwrap();
        assert_eq!((xt.item().unwrap(), v.item().unwrap()), (3.0, 2.0));
        assert!(make_training_example(&x1, 0.5, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn smoothing_windows() {
        let v = [4.0, 2.0, 1.0, 1.0];
        assert_eq!(smoothed_endpoints(&v, 2), Some((3.0, 1.0)));
        assert_eq!(smoothed_endpoints(&[], 2), None);
    }
}
