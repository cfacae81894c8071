//! Test-only oracles shared by unit, integration and acceptance tests.
//!
//! Nothing here is used by the pipeline itself. The reference ops are naive
//! `f64` loops written independently of the tape kernels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_REL_TOL: f64 = 1e-3;
/// Gradient components smaller than this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-2;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;
type Reference = dyn Fn(&[Vec<f64>]) -> Vec<f64>;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub op: &'static str,
    pub worst_rel_err: f64,
    pub forward_max_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < GRAD_REL_TOL && self.forward_max_err <= 1e-5
    }
}

fn tape(inputs: &[Tensor], build: &Build, weights: Option<&Tensor>) -> (Tensor, Vec<Tensor>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let value = g.value(out).clone();
    let Some(weights) = weights else {
        return (value, Vec::new());
    };
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).expect("weights match output");
    let loss = g.sum(prod).expect("sum");
    let grads = g.backward(loss).expect("backward");
    let gs = vars.iter().map(|v| grads.get(*v).unwrap().clone()).collect();
    (value, gs)
}

/// Compares the tape against the `f64` reference: forward values, then the
/// gradient of `sum(w * op(x))` against central differences of the reference.
fn check(name: &'static str, inputs: Vec<Tensor>, build: &Build, reference: &Reference, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (probe, _) = tape(&inputs, build, None);
    let weights = Tensor::uniform(probe.shape(), -1.0, 1.0, &mut rng);
    let (out, grads) = tape(&inputs, build, Some(&weights));

    let x64: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let ref_out = reference(&x64);
    assert_eq!(ref_out.len(), out.numel(), "{name}: reference output size");
    let forward_max_err = out
        .data()
        .iter()
        .zip(&ref_out)
        .map(|(&a, &b)| (a as f64 - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max);

    let w64: Vec<f64> = weights.data().iter().map(|&v| v as f64).collect();
    let loss = |x: &[Vec<f64>]| -> f64 { reference(x).iter().zip(&w64).map(|(a, b)| a * b).sum() };
    let mut worst = 0.0f64;
    for k in 0..x64.len() {
        for i in 0..x64[k].len() {
            let mut plus = x64.clone();
            plus[k][i] += FD_STEP;
            let mut minus = x64.clone();
            minus[k][i] -= FD_STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            let a = grads[k].data()[i] as f64;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(err);
        }
    }
    GradCheck {
        op: name,
        worst_rel_err: worst,
        forward_max_err,
    }
}

// ---- naive f64 reference ops -------------------------------------------------

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = flat % shape[d];
        flat /= shape[d];
    }
    idx
}

fn ravel(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &s)| acc * s + i)
}

/// Index into a right-aligned broadcast operand.
fn bcast_index(out_idx: &[usize], shape: &[usize]) -> usize {
    let off = out_idx.len() - shape.len();
    let idx: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(d, &s)| if s == 1 { 0 } else { out_idx[d + off] })
        .collect();
    ravel(&idx, shape)
}

pub fn ref_broadcast(
    a: &[f64],
    sa: &[usize],
    b: &[f64],
    sb: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> (Vec<f64>, Vec<usize>) {
    let n = sa.len().max(sb.len());
    let get = |s: &[usize], d: usize| if d + s.len() >= n { s[d + s.len() - n] } else { 1 };
    let out: Vec<usize> = (0..n).map(|d| get(sa, d).max(get(sb, d))).collect();
    let numel: usize = out.iter().product();
    let vals = (0..numel)
        .map(|i| {
            let idx = unravel(i, &out);
            f(a[bcast_index(&idx, sa)], b[bcast_index(&idx, sb)])
        })
        .collect();
    (vals, out)
}

/// `a[batch, m, k] @ b` where `b` is `[k, n]` (shared) or `[batch, k, n]`,
/// or their transposes when `trans_b`.
#[allow(clippy::too_many_arguments)]
pub fn ref_matmul(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared: bool,
    trans_b: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let boff = if shared { 0 } else { bi * k * n };
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    let bv = if trans_b {
                        b[boff + j * k + kk]
                    } else {
                        b[boff + kk * n + j]
                    };
                    s += a[bi * m * k + i * k + kk] * bv;
                }
                out[bi * m * n + i * n + j] = s;
            }
        }
    }
    out
}

pub fn ref_layer_norm(x: &[f64], d: usize, eps: f64) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            row.iter()
                .map(move |v| (v - mean) / (var + eps).sqrt())
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn ref_softmax(x: &[f64], d: usize) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|row| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            row.iter().map(move |v| v.exp() / z).collect::<Vec<_>>()
        })
        .collect()
}

pub fn ref_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn ref_silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn ref_permute(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    (0..x.len())
        .map(|i| {
            let oi = unravel(i, &out_shape);
            let mut ii = vec![0; shape.len()];
            for (d, &p) in perm.iter().enumerate() {
                ii[p] = oi[d];
            }
            x[ravel(&ii, shape)]
        })
        .collect()
}

// ---- the op catalogue ---------------------------------------------------------

fn rand_t(shape: &[usize], scale: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -scale, scale, rng)
}

/// Runs the finite-difference check for every differentiable op plus a random
/// three-layer MLP.
pub fn gradient_checks() -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut results = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor>, build: Box<Build>, reference: Box<Reference>| {
        let seed = 100 + results.len() as u64;
        results.push(check(name, inputs, build.as_ref(), reference.as_ref(), seed));
    };

    run(
        "add",
        vec![rand_t(&[2, 3, 4], 3.0, &mut rng), rand_t(&[3, 1], 3.0, &mut rng)],
        Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
        Box::new(|x| ref_broadcast(&x[0], &[2, 3, 4], &x[1], &[3, 1], |a, b| a + b).0),
    );
    run(
        "sub",
        vec![rand_t(&[4], 3.0, &mut rng), rand_t(&[2, 4], 3.0, &mut rng)],
        Box::new(|g, v| g.sub(v[0], v[1]).unwrap()),
        Box::new(|x| ref_broadcast(&x[0], &[4], &x[1], &[2, 4], |a, b| a - b).0),
    );
    run(
        "mul",
        vec![rand_t(&[2, 1, 4], 3.0, &mut rng), rand_t(&[3, 4], 3.0, &mut rng)],
        Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
        Box::new(|x| ref_broadcast(&x[0], &[2, 1, 4], &x[1], &[3, 4], |a, b| a * b).0),
    );
    run(
        "scale",
        vec![rand_t(&[5], 3.0, &mut rng)],
        Box::new(|g, v| g.scale(v[0], -1.7).unwrap()),
        Box::new(|x| x[0].iter().map(|v| v * -1.7f32 as f64).collect()),
    );
    run(
        "add_scalar",
        vec![rand_t(&[5], 3.0, &mut rng)],
        Box::new(|g, v| g.add_scalar(v[0], 0.3).unwrap()),
        Box::new(|x| x[0].iter().map(|v| v + 0.3f32 as f64).collect()),
    );
    run(
        "matmul",
        vec![rand_t(&[2, 3, 4], 2.0, &mut rng), rand_t(&[4, 5], 2.0, &mut rng)],
        Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
        Box::new(|x| ref_matmul(&x[0], &x[1], 2, 3, 4, 5, true, false)),
    );
    run(
        "matmul_batched",
        vec![rand_t(&[2, 3, 4], 2.0, &mut rng), rand_t(&[2, 4, 2], 2.0, &mut rng)],
        Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
        Box::new(|x| ref_matmul(&x[0], &x[1], 2, 3, 4, 2, false, false)),
    );
    run(
        "matmul_nt",
        vec![rand_t(&[2, 3, 4], 2.0, &mut rng), rand_t(&[2, 5, 4], 2.0, &mut rng)],
        Box::new(|g, v| g.matmul_nt(v[0], v[1]).unwrap()),
        Box::new(|x| ref_matmul(&x[0], &x[1], 2, 3, 4, 5, false, true)),
    );
    run(
        "matmul_nt_shared",
        vec![rand_t(&[3, 4], 2.0, &mut rng), rand_t(&[5, 4], 2.0, &mut rng)],
        Box::new(|g, v| g.matmul_nt(v[0], v[1]).unwrap()),
        Box::new(|x| ref_matmul(&x[0], &x[1], 1, 3, 4, 5, true, true)),
    );
    run(
        "layer_norm",
        vec![rand_t(&[3, 6], 3.0, &mut rng)],
        Box::new(|g, v| g.layer_norm(v[0], 1e-5).unwrap()),
        Box::new(|x| ref_layer_norm(&x[0], 6, 1e-5f32 as f64)),
    );
    run(
        "softmax",
        vec![rand_t(&[3, 5], 3.0, &mut rng)],
        Box::new(|g, v| g.softmax(v[0]).unwrap()),
        Box::new(|x| ref_softmax(&x[0], 5)),
    );
    run(
        "gelu",
        vec![rand_t(&[12], 4.0, &mut rng)],
        Box::new(|g, v| g.gelu(v[0]).unwrap()),
        Box::new(|x| x[0].iter().map(|&v| ref_gelu(v)).collect()),
    );
    run(
        "silu",
        vec![rand_t(&[12], 4.0, &mut rng)],
        Box::new(|g, v| g.silu(v[0]).unwrap()),
        Box::new(|x| x[0].iter().map(|&v| ref_silu(v)).collect()),
    );
    run(
        "reshape",
        vec![rand_t(&[2, 6], 3.0, &mut rng)],
        Box::new(|g, v| g.reshape(v[0], &[3, 4]).unwrap()),
        Box::new(|x| x[0].clone()),
    );
    run(
        "permute",
        vec![rand_t(&[2, 3, 4], 3.0, &mut rng)],
        Box::new(|g, v| g.permute(v[0], &[2, 0, 1]).unwrap()),
        Box::new(|x| ref_permute(&x[0], &[2, 3, 4], &[2, 0, 1])),
    );
    run(
        "concat",
        vec![rand_t(&[2, 3], 3.0, &mut rng), rand_t(&[2, 2], 3.0, &mut rng)],
        Box::new(|g, v| g.concat_channel(&[v[0], v[1]]).unwrap()),
        Box::new(|x| {
            (0..2)
                .flat_map(|r| {
                    x[0][r * 3..r * 3 + 3]
                        .iter()
                        .chain(&x[1][r * 2..r * 2 + 2])
                        .copied()
                        .collect::<Vec<_>>()
                })
                .collect()
        }),
    );
    run(
        "slice",
        vec![rand_t(&[3, 4, 2], 3.0, &mut rng)],
        Box::new(|g, v| g.slice(v[0], 1, 1, 2).unwrap()),
        Box::new(|x| {
            let mut out = Vec::new();
            for i in 0..3 {
                for j in 1..3 {
                    for k in 0..2 {
                        out.push(x[0][ravel(&[i, j, k], &[3, 4, 2])]);
                    }
                }
            }
            out
        }),
    );
    run(
        "sum",
        vec![rand_t(&[7], 3.0, &mut rng)],
        Box::new(|g, v| g.sum(v[0]).unwrap()),
        Box::new(|x| vec![x[0].iter().sum()]),
    );
    run(
        "mean",
        vec![rand_t(&[7], 3.0, &mut rng)],
        Box::new(|g, v| g.mean(v[0]).unwrap()),
        Box::new(|x| vec![x[0].iter().sum::<f64>() / 7.0]),
    );
    run(
        "mse",
        vec![rand_t(&[2, 3], 3.0, &mut rng), rand_t(&[2, 3], 3.0, &mut rng)],
        Box::new(|g, v| g.mse(v[0], v[1]).unwrap()),
        Box::new(|x| vec![x[0].iter().zip(&x[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 6.0]),
    );
    run(
        "mlp3",
        vec![
            rand_t(&[4, 5], 1.0, &mut rng),
            rand_t(&[5, 8], 0.8, &mut rng),
            rand_t(&[8], 0.5, &mut rng),
            rand_t(&[8, 8], 0.6, &mut rng),
            rand_t(&[8, 3], 0.6, &mut rng),
        ],
        Box::new(|g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.add(h, v[2]).unwrap();
            let h = g.gelu(h).unwrap();
            let h = g.matmul(h, v[3]).unwrap();
            let h = g.layer_norm(h, 1e-5).unwrap();
            let h = g.silu(h).unwrap();
            g.matmul(h, v[4]).unwrap()
        }),
        Box::new(|x| {
            let h = ref_matmul(&x[0], &x[1], 1, 4, 5, 8, true, false);
            let h = ref_broadcast(&h, &[4, 8], &x[2], &[8], |a, b| a + b).0;
            let h: Vec<f64> = h.iter().map(|&v| ref_gelu(v)).collect();
            let h = ref_matmul(&h, &x[3], 1, 4, 8, 8, true, false);
            let h = ref_layer_norm(&h, 8, 1e-5f32 as f64);
            let h: Vec<f64> = h.iter().map(|&v| ref_silu(v)).collect();
            ref_matmul(&h, &x[4], 1, 4, 8, 3, true, false)
        }),
    );
    results
}

/// A small synthetic sequence: a tilted plane seen by a slowly drifting
/// camera. RGB is a deterministic function of depth and normal, the top-left
/// pixel of every frame is invalid.
pub fn toy_sequence(id: &str, frames: usize, height: usize, width: usize, seed: u64) -> crate::trainer::SequencePair {
    use crate::video::Video;
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tilt_x, tilt_y) = (rng.random_range(-0.4f32..0.4), rng.random_range(-0.4f32..0.4));
    let base = rng.random_range(0.6f32..1.1);
    let drift = rng.random_range(-0.01f32..0.01);
    let depth_at = |k: usize, y: usize, x: usize| {
        let u = x as f32 / width as f32 - 0.5;
        let v = y as f32 / height as f32 - 0.5;
        base + tilt_x * u * 0.5 + tilt_y * v * 0.5 + drift * k as f32
    };
    let invalid = |y: usize, x: usize| y == 0 && x == 0;
    let depth = Video::from_fn(frames, height, width, 1, |k, y, x, _| {
        if invalid(y, x) {
            0.0
        } else {
            depth_at(k, y, x)
        }
    });
    let n = {
        let (a, b) = (-tilt_x * 0.5, -tilt_y * 0.5);
        let len = (a * a + b * b + 1.0).sqrt();
        [a / len, b / len, 1.0 / len]
    };
    let normal = Video::from_fn(
        frames,
        height,
        width,
        3,
        |_, y, x, c| if invalid(y, x) { 0.0 } else { n[c] },
    );
    let rgb = Video::from_fn(frames, height, width, 3, |k, y, x, c| {
        let d = depth_at(k, y, x);
        let shade = [1.2 - d * 0.8, 0.5 + 0.5 * n[0], 0.5 + 0.5 * n[1]][c];
        shade.clamp(0.0, 1.0)
    });
    let mask = (0..frames * height * width)
        .map(|i| !invalid((i / width) % height, i % width))
        .collect();
    crate::trainer::SequencePair {
        id: id.to_owned(),
        rgb,
        depth,
        normal,
        mask,
        tag: Some((seed % 8) as usize),
    }
}
