//! Linear projections with optional low-rank adapters.
//!
//! A projection computes `y = x W^T + bias` with `W` stored `[d_out, d_in]`.
//! Wrapping adds `(alpha / r) * (x A^T) B^T` with `A: [r, d_in]` drawn
//! Gaussian and `B: [d_out, r]` zero, so a fresh adapter changes nothing.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Records graph handles of trainable tensors created during a forward pass.
#[derive(Debug, Default)]
pub struct Trainables {
    pub vars: Vec<(String, Var)>,
}

impl Trainables {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Puts `t` on the graph; trainable tensors become gradient leaves and are
/// recorded under `name`.
pub fn bind(g: &mut Graph, name: &str, t: &Tensor, trainable: bool, rec: &mut Trainables) -> Var {
    if trainable {
        let v = g.leaf(t.clone(), true);
        rec.vars.push((name.to_owned(), v));
        v
    } else {
        g.constant(t.clone())
    }
}

/// Visits named tensors: `(name, tensor, trainable)`.
pub trait ParamVisitor {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, bool));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool));
}

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f32,
    pub target: String,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    /// `(alpha / r) * B A`, shaped like the wrapped weight.
    pub fn delta(&self) -> Tensor {
        let (d_out, d_in, r) = (self.b.shape()[0], self.a.shape()[1], self.rank);
        let s = self.scaling() as f64;
        let (a, b) = (self.a.data(), self.b.data());
        Tensor::from_fn(&[d_out, d_in], |idx| {
            let (o, i) = (idx / d_in, idx % d_in);
            let acc: f64 = (0..r).map(|k| b[o * r + k] as f64 * a[k * d_in + i] as f64).sum();
            (s * acc) as f32
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

#[derive(Clone, Debug)]
pub struct Projection {
    pub name: String,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    /// Train the full weight and bias (used for the input and output heads).
    pub trainable: bool,
    pub adapter: Option<LoraAdapter>,
    merged: bool,
}

impl Projection {
    pub fn new(name: impl Into<String>, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let name = name.into();
        if weight.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "projection",
                msg: format!("`{name}` weight must be [d_out, d_in], got {:?}", weight.shape()),
            });
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                return Err(Error::shape("projection", weight.shape(), b.shape()));
            }
        }
        Ok(Self {
            name,
            weight,
            bias,
            trainable: false,
            adapter: None,
            merged: false,
        })
    }

    /// Uniform `±1/sqrt(d_in)` weights, zero bias.
    pub fn init<R: Rng + ?Sized>(name: impl Into<String>, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f32).sqrt();
        let w = Tensor::uniform(&[d_out, d_in], -bound, bound, rng);
        let b = bias.then(|| Tensor::zeros(&[d_out]));
        Self::new(name, w, b).expect("shapes are consistent by construction")
    }

    pub fn zeros(name: impl Into<String>, d_in: usize, d_out: usize, bias: bool) -> Self {
        let b = bias.then(|| Tensor::zeros(&[d_out]));
        Self::new(name, Tensor::zeros(&[d_out, d_in]), b).expect("shapes are consistent by construction")
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn forward(&self, g: &mut Graph, x: Var, rec: &mut Trainables) -> Result<Var> {
        let w = bind(g, &format!("{}.weight", self.name), &self.weight, self.trainable, rec);
        let mut y = g.matmul_nt(x, w)?;
        if let Some(b) = &self.bias {
            let bv = bind(g, &format!("{}.bias", self.name), b, self.trainable, rec);
            y = g.add(y, bv)?;
        }
        if let Some(ad) = &self.adapter {
            let a = bind(g, &format!("{}.lora_a", self.name), &ad.a, true, rec);
            let b = bind(g, &format!("{}.lora_b", self.name), &ad.b, true, rec);
            let h = g.matmul_nt(x, a)?;
            let d = g.matmul_nt(h, b)?;
            let d = g.scale(d, ad.scaling())?;
            y = g.add(y, d)?;
        }
        Ok(y)
    }

    pub fn base_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }
}

impl ParamVisitor for Projection {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        f(&format!("{}.weight", self.name), &self.weight, self.trainable);
        if let Some(b) = &self.bias {
            f(&format!("{}.bias", self.name), b, self.trainable);
        }
        if let Some(ad) = &self.adapter {
            f(&format!("{}.lora_a", self.name), &ad.a, true);
            f(&format!("{}.lora_b", self.name), &ad.b, true);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        f(&format!("{}.weight", self.name), &mut self.weight, self.trainable);
        if let Some(b) = &mut self.bias {
            f(&format!("{}.bias", self.name), b, self.trainable);
        }
        if let Some(ad) = &mut self.adapter {
            f(&format!("{}.lora_a", self.name), &mut ad.a, true);
            f(&format!("{}.lora_b", self.name), &mut ad.b, true);
        }
    }
}

/// Attaches a rank-`r` adapter. `A ~ N(0, 1/r)`, `B = 0`.
pub fn wrap<R: Rng + ?Sized>(proj: &mut Projection, r: usize, alpha: f32, rng: &mut R) -> Result<()> {
    let (d_in, d_out) = (proj.d_in(), proj.d_out());
    if r < 1 || r > d_in.min(d_out) {
        return Err(Error::Lora(format!(
            "rank {r} out of range 1..={} for `{}` ({d_out}x{d_in})",
            d_in.min(d_out),
            proj.name
        )));
    }
    if proj.adapter.is_some() {
        return Err(Error::Lora(format!("`{}` already has an adapter", proj.name)));
    }
    if proj.merged {
        return Err(Error::Lora(format!("`{}` already merged", proj.name)));
    }
    proj.adapter = Some(LoraAdapter {
        a: Tensor::randn(&[r, d_in], 1.0 / (r as f32).sqrt(), rng),
        b: Tensor::zeros(&[d_out, r]),
        rank: r,
        alpha,
        target: proj.name.clone(),
    });
    Ok(())
}

/// Folds the adapter into the base weight: `W' = W + (alpha / r) B A`.
pub fn merge(proj: &mut Projection) -> Result<()> {
    if proj.merged {
        return Err(Error::Lora(format!("`{}` already merged", proj.name)));
    }
    let ad = proj
        .adapter
        .take()
        .ok_or_else(|| Error::Lora(format!("`{}` has no adapter to merge", proj.name)))?;
    let delta = ad.delta();
    let w = proj.weight.data_mut();
    for (wi, di) in w.iter_mut().zip(delta.data()) {
        *wi += di;
    }
    proj.merged = true;
    Ok(())
}
