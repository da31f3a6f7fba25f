//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates forward passes, so it is independent of
//! the backward rules it validates. [`op_suite`] runs it over every
//! differentiable operation of [`Graph`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Element, Graph, Result, Tensor, Var};

/// Worst relative error observed over all checked coordinates.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Floor on the denominator of the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Compares analytic and numeric gradients of a scalar function of `inputs`.
///
/// `f` builds the computation on a fresh graph given one leaf per input and
/// must return a scalar.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for j in 0..inputs[i].len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[j].as_f64();
            let denom = REL_ERR_FLOOR.max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        checked,
    })
}

/// Result of checking one operation over several random instances.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Random simplex per pixel along axis 1 of an `[N, C, H, W]` shape.
fn distribution(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let mut t = uniform(rng, &shape, 0.05, 1.0);
    let d = t.data_mut();
    for i in 0..n {
        for p in 0..hw {
            let s: f64 = (0..c).map(|k| d[(i * c + k) * hw + p]).sum();
            for k in 0..c {
                d[(i * c + k) * hw + p] /= s;
            }
        }
    }
    t
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Reduces an arbitrary-shape output to a scalar through a fixed random projection.
fn project(g: &mut Graph<f64>, out: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let r = g.constant(uniform(rng, &shape, -1.0, 1.0));
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

fn case(op: &'static str, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Builder) {
    let seed: u64 = rng.gen();
    let proj = move |g: &mut Graph<f64>, out: Var| -> Result<Var> {
        project(g, out, &mut ChaCha8Rng::seed_from_u64(seed))
    };
    let n = rng.gen_range(1..3);
    let c = rng.gen_range(1..4);
    let h = rng.gen_range(2..6);
    let w = rng.gen_range(2..6);
    let s4 = [n, c, h, w];
    match op {
        "add" | "sub" | "mul" => {
            let inputs = vec![uniform(rng, &s4, -2.0, 2.0), uniform(rng, &s4, -2.0, 2.0)];
            let f: Builder = Box::new(move |g, v| {
                let out = match op {
                    "add" => g.add(v[0], v[1])?,
                    "sub" => g.sub(v[0], v[1])?,
                    _ => g.mul(v[0], v[1])?,
                };
                proj(g, out)
            });
            (inputs, f)
        }
        "mul_channel" => {
            let inputs = vec![uniform(rng, &[n, 1, h, w], -1.0, 1.0), uniform(rng, &s4, -2.0, 2.0)];
            (inputs, Box::new(move |g, v| {
                let out = g.mul_channel(v[0], v[1])?;
                proj(g, out)
            }))
        }
        "affine" => {
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            (vec![uniform(rng, &s4, -2.0, 2.0)], Box::new(move |g, v| {
                let out = g.affine(v[0], a, b);
                proj(g, out)
            }))
        }
        "relu" => {
            // Keep entries away from the kink.
            let mut x = uniform(rng, &s4, 0.05, 2.0);
            for v in x.data_mut() {
                if rng.gen_bool(0.5) {
                    *v = -*v;
                }
            }
            (vec![x], Box::new(move |g, v| {
                let out = g.relu(v[0]);
                proj(g, out)
            }))
        }
        "sigmoid" => (vec![uniform(rng, &s4, -4.0, 4.0)], Box::new(move |g, v| {
            let out = g.sigmoid(v[0]);
            proj(g, out)
        })),
        "matmul" => {
            let (m, k, nn) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
            let inputs = vec![uniform(rng, &[m, k], -2.0, 2.0), uniform(rng, &[k, nn], -2.0, 2.0)];
            (inputs, Box::new(move |g, v| {
                let out = g.matmul(v[0], v[1])?;
                proj(g, out)
            }))
        }
        "conv2d" => {
            let cout = rng.gen_range(1..4);
            let stride = rng.gen_range(1..3);
            let (h, w) = (rng.gen_range(3..7), rng.gen_range(3..7));
            let inputs = vec![
                uniform(rng, &[n, c, h, w], -1.0, 1.0),
                uniform(rng, &[cout, c, 3, 3], -1.0, 1.0),
                uniform(rng, &[cout], -1.0, 1.0),
            ];
            (inputs, Box::new(move |g, v| {
                let out = g.conv2d(v[0], v[1], v[2], stride, 1)?;
                proj(g, out)
            }))
        }
        "group_norm" => {
            let groups = rng.gen_range(1..3);
            let c = groups * rng.gen_range(1..3);
            let inputs = vec![
                uniform(rng, &[n, c, h, w], -2.0, 2.0),
                uniform(rng, &[c], 0.5, 1.5),
                uniform(rng, &[c], -0.5, 0.5),
            ];
            (inputs, Box::new(move |g, v| {
                let out = g.group_norm(v[0], v[1], v[2], groups, 1e-5)?;
                proj(g, out)
            }))
        }
        "resize" => {
            let (oh, ow) = (rng.gen_range(1..9), rng.gen_range(1..9));
            (vec![uniform(rng, &s4, -1.0, 1.0)], Box::new(move |g, v| {
                let out = g.resize(v[0], oh, ow)?;
                proj(g, out)
            }))
        }
        "crop" => {
            let (ch, cw) = (rng.gen_range(1..=h), rng.gen_range(1..=w));
            let (top, left) = (rng.gen_range(0..=h - ch), rng.gen_range(0..=w - cw));
            (vec![uniform(rng, &s4, -1.0, 1.0)], Box::new(move |g, v| {
                let out = g.crop(v[0], top, left, ch, cw)?;
                proj(g, out)
            }))
        }
        "pad" => {
            let (oh, ow) = (h + rng.gen_range(0..3), w + rng.gen_range(0..3));
            let (top, left) = (rng.gen_range(0..=oh - h), rng.gen_range(0..=ow - w));
            (vec![uniform(rng, &s4, -1.0, 1.0)], Box::new(move |g, v| {
                let out = g.pad(v[0], oh, ow, top, left)?;
                proj(g, out)
            }))
        }
        "slice_batch" => {
            let n = rng.gen_range(2..4);
            let start = rng.gen_range(0..n);
            let len = rng.gen_range(1..=n - start);
            (vec![uniform(rng, &[n, c, h, w], -1.0, 1.0)], Box::new(move |g, v| {
                let out = g.slice_batch(v[0], start, len)?;
                proj(g, out)
            }))
        }
        "softmax" => {
            let temp = rng.gen_range(0.5..2.0);
            (vec![uniform(rng, &s4, -3.0, 3.0)], Box::new(move |g, v| {
                let out = g.softmax(v[0], temp)?;
                proj(g, out)
            }))
        }
        "kl_divergence" => {
            let c = c + 1;
            let inputs = vec![distribution(rng, [n, c, h, w]), distribution(rng, [n, c, h, w])];
            (inputs, Box::new(move |g, v| {
                let out = g.kl_divergence(v[0], v[1])?;
                proj(g, out)
            }))
        }
        "cross_entropy" => {
            let c = c + 1;
            let temp = rng.gen_range(0.5..2.0);
            let labels: Vec<u8> = (0..n * h * w)
                .map(|_| {
                    if rng.gen_bool(0.15) {
                        crate::IGNORE_LABEL
                    } else {
                        rng.gen_range(0..c) as u8
                    }
                })
                .collect();
            let weights: Vec<f64> = (0..n * h * w).map(|_| rng.gen_range(0.1..1.0)).collect();
            (vec![uniform(rng, &[n, c, h, w], -3.0, 3.0)], Box::new(move |g, v| {
                g.cross_entropy(v[0], &labels, Some(&weights), temp)
            }))
        }
        "sum" => (vec![uniform(rng, &s4, -1.0, 1.0)], Box::new(|g, v| {
            let s = g.sum(v[0]);
            let sq = g.mul(s, s)?;
            Ok(sq)
        })),
        "mean" => (vec![uniform(rng, &s4, -1.0, 1.0)], Box::new(|g, v| {
            let s = g.mean(v[0]);
            let sq = g.mul(s, s)?;
            Ok(sq)
        })),
        other => panic!("no gradient case for {other}"),
    }
}

/// Every differentiable operation on [`Graph`].
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "mul_channel",
    "affine",
    "relu",
    "sigmoid",
    "matmul",
    "conv2d",
    "group_norm",
    "resize",
    "crop",
    "pad",
    "slice_batch",
    "softmax",
    "kl_divergence",
    "cross_entropy",
    "sum",
    "mean",
];

/// Checks each op in [`DIFFERENTIABLE_OPS`] on `instances` random inputs.
pub fn op_suite(seed: u64, instances: usize, step: f64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DIFFERENTIABLE_OPS
        .iter()
        .map(|&op| {
            let mut worst = 0.0f64;
            for _ in 0..instances {
                let (inputs, f) = case(op, &mut rng);
                worst = worst.max(check(&inputs, step, f)?.max_rel_err);
            }
            Ok(OpReport {
                op,
                instances,
                max_rel_err: worst,
            })
        })
        .collect()
}
