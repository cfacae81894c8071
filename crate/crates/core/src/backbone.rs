//! Compact diffusion transformer predicting a velocity latent from the
//! channel concatenation of the noisy target latent and the clean RGB latent.
//!
//! Tokens are the `t_lat * h * w` latent cells of a clip; every block runs
//! pre-norm joint self-attention over all of them followed by an MLP, both
//! modulated (shift/scale) by the timestep plus conditioning vector.
//!
//! The readout is `u = a(c) * x_t + (1 + s(c)) * head(h)`, where `a` and `s`
//! are per-channel vectors produced from the conditioning vector `c` by a
//! zero-initialized projection. The head is zero-initialized too, so an
//! untrained model predicts zero velocity. The skip path lets the model form
//! `(x_hat - x_t) / (1 - t)`-style estimates without pushing the full noisy
//! latent through the `model_dim` bottleneck.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::TensorMap;
use crate::error::{Error, Result};
use crate::lora::{self, ParamVisitor, Projection, Trainables};
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub n_blocks: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Noisy target latent channels plus RGB latent channels.
    pub in_channels: usize,
    /// Target latent channels.
    pub out_channels: usize,
    pub max_t: usize,
    pub max_h: usize,
    pub max_w: usize,
    pub time_freqs: usize,
    pub n_tags: usize,
    pub lora_rank: usize,
    pub lora_alpha: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            model_dim: 192,
            n_heads: 6,
            mlp_ratio: 4,
            in_channels: 256 + 768,
            out_channels: 256,
            max_t: 6,
            max_h: 8,
            max_w: 8,
            time_freqs: 32,
            n_tags: 8,
            lora_rank: 16,
            lora_alpha: 16.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        if self.model_dim == 0 || self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return bad(
                "model.model_dim",
                format!(
                    "{} must be a positive multiple of n_heads = {}",
                    self.model_dim, self.n_heads
                ),
            );
        }
        if self.n_blocks == 0 {
            return bad("model.n_blocks", "must be at least 1".into());
        }
        if self.mlp_ratio == 0 {
            return bad("model.mlp_ratio", "must be at least 1".into());
        }
        if self.out_channels == 0 || self.in_channels <= self.out_channels {
            return bad(
                "model.in_channels",
                format!(
                    "{} must exceed out_channels = {} (target plus RGB latent)",
                    self.in_channels, self.out_channels
                ),
            );
        }
        if self.max_t == 0 || self.max_h == 0 || self.max_w == 0 {
            return bad("model.max_t", "positional table extents must be positive".into());
        }
        if self.time_freqs == 0 {
            return bad("model.time_freqs", "must be at least 1".into());
        }
        if self.lora_rank > self.model_dim {
            return bad(
                "model.lora_rank",
                format!("{} exceeds model_dim = {}", self.lora_rank, self.model_dim),
            );
        }
        Ok(())
    }

    pub fn max_tokens(&self) -> usize {
        self.max_t * self.max_h * self.max_w
    }
}

/// Replacement for a text embedding: a learned null vector or a scene tag.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    #[default]
    Null,
    SceneTag(usize),
}

#[derive(Clone, Debug)]
struct Block {
    ada: Projection,
    q: Projection,
    k: Projection,
    v: Projection,
    o: Projection,
    fc1: Projection,
    fc2: Projection,
}

impl Block {
    fn projections(&self) -> [&Projection; 7] {
        [&self.ada, &self.q, &self.k, &self.v, &self.o, &self.fc1, &self.fc2]
    }

    fn projections_mut(&mut self) -> [&mut Projection; 7] {
        [
            &mut self.ada,
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.o,
            &mut self.fc1,
            &mut self.fc2,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    time1: Projection,
    time2: Projection,
    null_embed: Tensor,
    tag_table: Tensor,
    pos_t: Tensor,
    pos_h: Tensor,
    pos_w: Tensor,
    input: Projection,
    blocks: Vec<Block>,
    final_ada: Projection,
    head: Projection,
    skip: Projection,
}

/// Names of LoRA-wrapped projections inside each block.
pub const LORA_TARGETS: [&str; 6] = ["q", "k", "v", "o", "fc1", "fc2"];

impl Backbone {
    /// Random frozen base, trainable input/head/skip, LoRA on every target.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut net = Self::skeleton(config, seed)?;
        if net.config.lora_rank > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            let (r, alpha) = (net.config.lora_rank, net.config.lora_alpha);
            for b in &mut net.blocks {
                for p in [&mut b.q, &mut b.k, &mut b.v, &mut b.o, &mut b.fc1, &mut b.fc2] {
                    lora::wrap(p, r, alpha, &mut rng)?;
                }
            }
        }
        Ok(net)
    }

    fn skeleton(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.model_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut proj = |name: String, din, dout| Projection::init(name, din, dout, true, &mut rng);
        let time1 = proj("time.fc1".into(), 2 * c.time_freqs, d);
        let time2 = proj("time.fc2".into(), d, d);
        let mut blocks = Vec::with_capacity(c.n_blocks);
        for i in 0..c.n_blocks {
            let n = |s: &str| format!("blocks.{i}.{s}");
            blocks.push(Block {
                ada: proj(n("ada"), d, 4 * d),
                q: proj(n("q"), d, d),
                k: proj(n("k"), d, d),
                v: proj(n("v"), d, d),
                o: proj(n("o"), d, d),
                fc1: proj(n("fc1"), d, c.mlp_ratio * d),
                fc2: proj(n("fc2"), c.mlp_ratio * d, d),
            });
        }
        let final_ada = proj("final.ada".into(), d, 2 * d);
        let mut input = proj("input".into(), c.in_channels, d);
        input.trainable = true;
        let mut head = Projection::zeros("head", d, c.out_channels, true);
        head.trainable = true;
        let mut skip = Projection::zeros("skip", d, 2 * c.out_channels, true);
        skip.trainable = true;
        let null_embed = Tensor::randn(&[d], 0.5, &mut rng);
        let tag_table = Tensor::randn(&[c.n_tags.max(1), d], 0.5, &mut rng);
        let pos_t = Tensor::randn(&[c.max_t, d], 0.5, &mut rng);
        let pos_h = Tensor::randn(&[c.max_h, d], 0.5, &mut rng);
        let pos_w = Tensor::randn(&[c.max_w, d], 0.5, &mut rng);
        Ok(Self {
            config,
            time1,
            time2,
            null_embed,
            tag_table,
            pos_t,
            pos_h,
            pos_w,
            input,
            blocks,
            final_ada,
            head,
            skip,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Sinusoidal features `[sin(2 pi f_i t), cos(2 pi f_i t)]` with
    /// frequencies spaced geometrically over `[0.5, 4]` cycles per unit time.
    pub fn time_features(&self, t: f32) -> Result<Vec<f32>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [0, 1]")));
        }
        let n = self.config.time_freqs;
        let mut out = Vec::with_capacity(2 * n);
        let freqs: Vec<f64> = (0..n)
            .map(|i| {
                let u = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                0.5 * 8f64.powf(u)
            })
            .collect();
        for f in &freqs {
            out.push((std::f64::consts::TAU * f * t as f64).sin() as f32);
        }
        for f in &freqs {
            out.push((std::f64::consts::TAU * f * t as f64).cos() as f32);
        }
        Ok(out)
    }

    /// The `model_dim` timestep embedding fed to the modulation layers.
    pub fn embed_timestep(&self, t: f32) -> Result<Tensor> {
        let feats = Tensor::new(vec![1, 2 * self.config.time_freqs], self.time_features(t)?)?;
        let mut g = Graph::new();
        let mut rec = Trainables::new();
        let x = g.constant(feats);
        let e = self.time_embed(&mut g, x, &mut rec)?;
        g.value(e).reshape(&[self.config.model_dim])
    }

    fn time_embed(&self, g: &mut Graph, feats: Var, rec: &mut Trainables) -> Result<Var> {
        let h = self.time1.forward(g, feats, rec)?;
        let h = g.silu(h)?;
        self.time2.forward(g, h, rec)
    }

    fn cond_vector(&self, cond: Conditioning) -> Result<Vec<f32>> {
        match cond {
            Conditioning::Null => Ok(self.null_embed.data().to_vec()),
            Conditioning::SceneTag(i) if i < self.config.n_tags => {
                let d = self.config.model_dim;
                Ok(self.tag_table.data()[i * d..(i + 1) * d].to_vec())
            }
            Conditioning::SceneTag(i) => Err(Error::InvalidArgument(format!(
                "scene tag {i} outside the {}-entry table",
                self.config.n_tags
            ))),
        }
    }

    /// Frozen positional embedding for a `t x h x w` token grid, `[N, D]`.
    fn positions(&self, t: usize, h: usize, w: usize) -> Result<Tensor> {
        let c = &self.config;
        if t > c.max_t || h > c.max_h || w > c.max_w {
            return Err(Error::InvalidShape {
                op: "predict_velocity",
                msg: format!(
                    "token grid {t}x{h}x{w} exceeds positional tables {}x{}x{}",
                    c.max_t, c.max_h, c.max_w
                ),
            });
        }
        let d = c.model_dim;
        let (pt, ph, pw) = (self.pos_t.data(), self.pos_h.data(), self.pos_w.data());
        Ok(Tensor::from_fn(&[t * h * w, d], |i| {
            let (n, j) = (i / d, i % d);
            let (ti, yi, xi) = (n / (h * w), (n / w) % h, n % w);
            pt[ti * d + j] + ph[yi * d + j] + pw[xi * d + j]
        }))
    }

    /// Batched forward on the graph. `x_t` is `[B, T, h, w, out_channels]`,
    /// `x_c` is `[B, T, h, w, in_channels - out_channels]`; the result has
    /// the shape of `x_t`.
    pub fn forward(
        &self,
        g: &mut Graph,
        x_t: Var,
        x_c: Var,
        ts: &[f32],
        conds: &[Conditioning],
        rec: &mut Trainables,
    ) -> Result<Var> {
        let c = &self.config;
        let (st, sc) = (g.shape(x_t).to_vec(), g.shape(x_c).to_vec());
        if st.len() != 5 || sc.len() != 5 || st[..4] != sc[..4] {
            return Err(Error::shape("predict_velocity", &st, &sc));
        }
        if st[4] != c.out_channels || st[4] + sc[4] != c.in_channels {
            return Err(Error::InvalidShape {
                op: "predict_velocity",
                msg: format!(
                    "latent channels {} + {} do not match the model ({} + {})",
                    st[4],
                    sc[4],
                    c.out_channels,
                    c.in_channels - c.out_channels
                ),
            });
        }
        let (b, n) = (st[0], st[1] * st[2] * st[3]);
        if ts.len() != b || conds.len() != b {
            return Err(Error::InvalidArgument(format!(
                "batch of {b} latents with {} timesteps and {} conditionings",
                ts.len(),
                conds.len()
            )));
        }
        let d = c.model_dim;

        // conditioning vector per sample: time embedding + tag/null embedding
        let mut feats = Vec::with_capacity(b * 2 * c.time_freqs);
        let mut cvec = Vec::with_capacity(b * d);
        for (&t, &cond) in ts.iter().zip(conds) {
            feats.extend(self.time_features(t)?);
            cvec.extend(self.cond_vector(cond)?);
        }
        let feats = g.constant(Tensor::new(vec![b, 2 * c.time_freqs], feats)?);
        let temb = self.time_embed(g, feats, rec)?;
        let cemb = g.constant(Tensor::new(vec![b, d], cvec)?);
        let cond = g.add(temb, cemb)?;
        let cond_act = g.silu(cond)?;

        let x = g.concat_channel(&[x_t, x_c])?;
        let x = g.reshape(x, &[b, n, c.in_channels])?;
        let h = self.input.forward(g, x, rec)?;
        let pos = g.constant(self.positions(st[1], st[2], st[3])?);
        let mut h = g.add(h, pos)?;

        for blk in &self.blocks {
            h = self.block(g, blk, h, cond_act, b, n, rec)?;
        }

        let m = self.final_ada.forward(g, cond_act, rec)?;
        let m = g.reshape(m, &[b, 1, 2 * d])?;
        let shift = g.slice(m, 2, 0, d)?;
        let scale = g.slice(m, 2, d, d)?;
        let hn = modulate(g, h, shift, scale)?;
        let out = self.head.forward(g, hn, rec)?;

        let co = c.out_channels;
        let s = self.skip.forward(g, cond_act, rec)?;
        let s = g.reshape(s, &[b, 1, 2 * co])?;
        let a = g.slice(s, 2, 0, co)?;
        let gain = g.slice(s, 2, co, co)?;
        let gain = g.add_scalar(gain, 1.0)?;
        let xt_tokens = g.reshape(x_t, &[b, n, co])?;
        let skip = g.mul(a, xt_tokens)?;
        let out = g.mul(gain, out)?;
        let u = g.add(skip, out)?;
        g.reshape(u, &st)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph,
        blk: &Block,
        x: Var,
        cond_act: Var,
        b: usize,
        n: usize,
        rec: &mut Trainables,
    ) -> Result<Var> {
        let c = &self.config;
        let (d, nh) = (c.model_dim, c.n_heads);
        let dh = d / nh;
        let m = blk.ada.forward(g, cond_act, rec)?;
        let m = g.reshape(m, &[b, 1, 4 * d])?;
        let part = |g: &mut Graph, i: usize| g.slice(m, 2, i * d, d);
        let (shift1, scale1, shift2, scale2) = (part(g, 0)?, part(g, 1)?, part(g, 2)?, part(g, 3)?);

        let h = modulate(g, x, shift1, scale1)?;
        let heads = |g: &mut Graph, p: &Projection, rec: &mut Trainables| -> Result<Var> {
            let y = p.forward(g, h, rec)?;
            let y = g.reshape(y, &[b, n, nh, dh])?;
            g.permute(y, &[0, 2, 1, 3])
        };
        let q = heads(g, &blk.q, rec)?;
        let k = heads(g, &blk.k, rec)?;
        let v = heads(g, &blk.v, rec)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, 1.0 / (dh as f32).sqrt())?;
        let attn = g.softmax(scores)?;
        let o = g.matmul(attn, v)?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b, n, d])?;
        let o = blk.o.forward(g, o, rec)?;
        let x = g.add(x, o)?;

        let h = modulate(g, x, shift2, scale2)?;
        let h = blk.fc1.forward(g, h, rec)?;
        let h = g.gelu(h)?;
        let h = blk.fc2.forward(g, h, rec)?;
        g.add(x, h)
    }

    /// Single-sample velocity for latent tensors shaped `[T, h, w, C]`.
    pub fn predict_velocity(&self, x_t: &Tensor, x_c: &Tensor, t: f32, cond: Conditioning) -> Result<Tensor> {
        if x_t.rank() != 4 || x_c.rank() != 4 || x_t.shape()[..3] != x_c.shape()[..3] {
            return Err(Error::shape("predict_velocity", x_t.shape(), x_c.shape()));
        }
        let mut g = Graph::new();
        let mut rec = Trainables::new();
        let mut with_batch = |t: &Tensor| {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.reshape(&s).map(|t| g.constant(t))
        };
        let xt = with_batch(x_t)?;
        let xc = with_batch(x_c)?;
        let u = self.forward(&mut g, xt, xc, &[t], &[cond], &mut rec)?;
        g.value(u).reshape(x_t.shape())
    }

    fn projections(&self) -> Vec<&Projection> {
        let mut v = vec![&self.time1, &self.time2, &self.input];
        for b in &self.blocks {
            v.extend(b.projections());
        }
        v.extend([&self.final_ada, &self.head, &self.skip]);
        v
    }

    fn projections_mut(&mut self) -> Vec<&mut Projection> {
        let mut v = vec![&mut self.time1, &mut self.time2, &mut self.input];
        for b in &mut self.blocks {
            v.extend(b.projections_mut());
        }
        v.extend([&mut self.final_ada, &mut self.head, &mut self.skip]);
        v
    }

    /// Folds every adapter into its base weight.
    pub fn merge_adapters(&mut self) -> Result<usize> {
        let mut n = 0;
        for p in self.projections_mut() {
            if p.adapter.is_some() || p.is_merged() {
                lora::merge(p)?;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Lora("model has no adapters to merge".into()));
        }
        Ok(n)
    }

    pub fn has_adapters(&self) -> bool {
        self.projections().iter().any(|p| p.adapter.is_some())
    }

    /// Parameter counts: (frozen base, trainable).
    pub fn param_counts(&self) -> (usize, usize) {
        let (mut base, mut train) = (0, 0);
        self.visit(&mut |_, t, trainable| {
            if trainable {
                train += t.numel();
            } else {
                base += t.numel();
            }
        });
        (base, train)
    }

    /// Splits parameters into checkpoint sections: `base` (frozen), `adapter`
    /// (LoRA factors) and `heads` (fully trained input/head/skip).
    pub fn to_sections(&self) -> BTreeMap<String, TensorMap> {
        let mut out: BTreeMap<String, TensorMap> = BTreeMap::new();
        self.visit(&mut |name, t, trainable| {
            out.entry(section_of(name, trainable).into())
                .or_default()
                .insert(name.to_owned(), t.clone());
        });
        out
    }

    /// Rebuilds a model from checkpoint sections. Projections with entries in
    /// the `adapter` section get adapters; everything else must be present.
    pub fn from_sections(config: BackboneConfig, sections: &BTreeMap<String, TensorMap>) -> Result<Self> {
        let mut net = Self::skeleton(config, 0)?;
        let empty = TensorMap::new();
        let adapters = sections.get("adapter").unwrap_or(&empty);
        let alpha = net.config.lora_alpha;
        for p in net.projections_mut() {
            let a = adapters.get(&format!("{}.lora_a", p.name));
            let b = adapters.get(&format!("{}.lora_b", p.name));
            match (a, b) {
                (Some(a), Some(b)) => {
                    let rank = a.shape()[0];
                    if a.shape() != [rank, p.d_in()] || b.shape() != [p.d_out(), rank] {
                        return Err(Error::Format(format!("adapter `{}` has mismatched shapes", p.name)));
                    }
                    p.adapter = Some(lora::LoraAdapter {
                        a: a.clone(),
                        b: b.clone(),
                        rank,
                        alpha,
                        target: p.name.clone(),
                    });
                }
                (None, None) => {}
                _ => return Err(Error::Format(format!("adapter `{}` is missing a factor", p.name))),
            }
        }
        let mut missing = Vec::new();
        net.visit_mut(&mut |name, t, trainable| {
            let sec = section_of(name, trainable);
            match sections.get(sec).and_then(|m| m.get(name)) {
                Some(src) if src.shape() == t.shape() => *t = src.clone(),
                Some(src) => missing.push(format!("{name} (shape {:?}, expected {:?})", src.shape(), t.shape())),
                None => missing.push(name.to_owned()),
            }
        });
        if !missing.is_empty() {
            return Err(Error::Format(format!(
                "checkpoint lacks tensors: {}",
                missing.join(", ")
            )));
        }
        Ok(net)
    }

    #[cfg(any(test, feature = "testkit"))]
    #[doc(hidden)]
    pub fn head_mut(&mut self) -> &mut Projection {
        &mut self.head
    }
}

fn section_of(name: &str, trainable: bool) -> &'static str {
    if name.ends_with(".lora_a") || name.ends_with(".lora_b") {
        "adapter"
    } else if trainable {
        "heads"
    } else {
        "base"
    }
}

/// `layer_norm(x) * (1 + scale) + shift` with per-sample `[B, 1, D]` factors.
fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS)?;
    let s = g.add_scalar(scale, 1.0)?;
    let y = g.mul(n, s)?;
    g.add(y, shift)
}

impl ParamVisitor for Backbone {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        f("embed.null", &self.null_embed, false);
        f("embed.tags", &self.tag_table, false);
        f("pos.t", &self.pos_t, false);
        f("pos.h", &self.pos_h, false);
        f("pos.w", &self.pos_w, false);
        for p in self.projections() {
            p.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        f("embed.null", &mut self.null_embed, false);
        f("embed.tags", &mut self.tag_table, false);
        f("pos.t", &mut self.pos_t, false);
        f("pos.h", &mut self.pos_h, false);
        f("pos.w", &mut self.pos_w, false);
        for p in self.projections_mut() {
            p.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            n_blocks: 2,
            model_dim: 16,
            n_heads: 2,
            mlp_ratio: 2,
            in_channels: 12,
            out_channels: 4,
            max_t: 3,
            max_h: 2,
            max_w: 2,
            time_freqs: 8,
            n_tags: 8,
            lora_rank: 4,
            lora_alpha: 4.0,
        }
    }

    #[test]
    fn config_errors_name_the_key() {
        let e = BackboneConfig {
            model_dim: 10,
            n_heads: 3,
            ..tiny()
        }
        .validate()
        .unwrap_err()
        .to_string();
        assert!(e.contains("model.model_dim"), "{e}");
    }

    #[test]
    fn untrained_model_predicts_zero_with_matching_shape() {
        let net = Backbone::new(tiny(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xt = Tensor::uniform(&[2, 2, 2, 4], -3.0, 3.0, &mut rng);
        let xc = Tensor::uniform(&[2, 2, 2, 8], -3.0, 3.0, &mut rng);
        let u = net.predict_velocity(&xt, &xc, 0.3, Conditioning::Null).unwrap();
        assert_eq!(u.shape(), xt.shape());
        assert!(u.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn latent_mismatch_is_an_error() {
        let net = Backbone::new(tiny(), 1).unwrap();
        let xt = Tensor::zeros(&[2, 2, 2, 4]);
        let xc = Tensor::zeros(&[1, 2, 2, 8]);
        assert!(net.predict_velocity(&xt, &xc, 0.3, Conditioning::Null).is_err());
    }

    #[test]
    fn timestep_embedding_contract() {
        let net = Backbone::new(BackboneConfig::default(), 3).unwrap();
        let a = net.embed_timestep(0.3).unwrap();
        assert!(a.bit_eq(&net.embed_timestep(0.3).unwrap()));
        let e0 = net.embed_timestep(0.0).unwrap();
        let e1 = net.embed_timestep(1.0).unwrap();
        assert!(e0.max_abs_diff(&e1).unwrap() > 0.0);
        assert!(net.embed_timestep(1.2).is_err());
        assert!(net.embed_timestep(-0.1).is_err());
        let mut worst = 0.0f64;
        for i in 0..=999 {
            let t = i as f32 / 1000.0;
            let (p, q) = (net.embed_timestep(t).unwrap(), net.embed_timestep(t + 1e-3).unwrap());
            let d: f64 = p
                .data()
                .iter()
                .zip(q.data())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(d);
        }
        assert!(worst < 0.1, "max step {worst}");
    }

    #[test]
    fn sections_round_trip() {
        let mut net = Backbone::new(tiny(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        *net.head_mut() = {
            let mut h = Projection::init("head", 16, 4, true, &mut rng);
            h.trainable = true;
            h
        };
        let secs = net.to_sections();
        assert!(secs["adapter"].keys().all(|k| k.contains(".lora_")));
        assert!(secs["heads"].contains_key("head.weight"));
        let back = Backbone::from_sections(tiny(), &secs).unwrap();
        let xt = Tensor::uniform(&[1, 2, 2, 4], -1.0, 1.0, &mut rng);
        let xc = Tensor::uniform(&[1, 2, 2, 8], -1.0, 1.0, &mut rng);
        let a = net.predict_velocity(&xt, &xc, 0.5, Conditioning::SceneTag(3)).unwrap();
        let b = back.predict_velocity(&xt, &xc, 0.5, Conditioning::SceneTag(3)).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.data().iter().any(|&v| v != 0.0));
    }
}
