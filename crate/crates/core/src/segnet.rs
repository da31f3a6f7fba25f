//! Tiny segmentation network: a shared strided-conv encoder feeding a class
//! head and a one-channel scale-attention head.

use std::fmt;
use std::str::FromStr;

use dapass_tensor::{Element, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamSnapshot, ParamStore};

const GN_GROUPS: usize = 4;
const GN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "b1-toy")]
    B1Toy,
    #[serde(rename = "b2-toy")]
    B2Toy,
}

impl Variant {
    pub fn widths(self) -> [usize; 3] {
        match self {
            Variant::B1Toy => [16, 32, 64],
            Variant::B2Toy => [24, 48, 96],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::B1Toy => "b1-toy",
            Variant::B2Toy => "b2-toy",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "b1-toy" => Ok(Variant::B1Toy),
            "b2-toy" => Ok(Variant::B2Toy),
            other => Err(Error::Config(format!("unknown model variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// 8 (three stride-2 blocks) or 4 (last block keeps resolution).
    pub output_stride: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::B1Toy,
            output_stride: 8,
            classes: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_stride != 4 && self.output_stride != 8 {
            return Err(Error::Config(format!(
                "output_stride must be 4 or 8, got {}",
                self.output_stride
            )));
        }
        if self.classes < 2 || self.classes > 254 {
            return Err(Error::Config(format!("classes must be in [2, 254], got {}", self.classes)));
        }
        Ok(())
    }

    fn strides(&self) -> [usize; 3] {
        if self.output_stride == 8 {
            [2, 2, 2]
        } else {
            [2, 2, 1]
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.variant.widths()[2]
    }
}

/// Graph handles of a model's parameters, in [`ParamStore`] order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Outputs of one forward pass, all on the stride-`o` grid.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub features: Var,
    pub logits: Var,
    /// Pre-sigmoid scale attention, one channel.
    pub attn_logit: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Element> SegModel<T> {
    /// Kaiming-uniform (fan-in) conv weights, zero biases, unit/zero norm affine.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let kaiming = |shape: [usize; 4], rng: &mut ChaCha8Rng| {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let bound = (6.0 / fan_in).sqrt();
            Tensor::from_fn(shape, |_| T::cast(rng.gen_range(-bound..bound)))
        };
        let mut cin = 3;
        for (i, &width) in config.variant.widths().iter().enumerate() {
            params.push(format!("encoder.{i}.conv.weight"), kaiming([width, cin, 3, 3], &mut rng));
            params.push(format!("encoder.{i}.conv.bias"), Tensor::zeros([width]));
            params.push(format!("encoder.{i}.norm.weight"), Tensor::full([width], T::one()));
            params.push(format!("encoder.{i}.norm.bias"), Tensor::zeros([width]));
            cin = width;
        }
        params.push("seg_head.weight", kaiming([config.classes, cin, 1, 1], &mut rng));
        params.push("seg_head.bias", Tensor::zeros([config.classes]));
        params.push("attn_head.weight", kaiming([1, cin, 1, 1], &mut rng));
        params.push("attn_head.bias", Tensor::zeros([1]));
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn output_stride(&self) -> usize {
        self.config.output_stride
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Places every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.bind_params(g, &self.params, trainable)
    }

    /// Places an alternative parameter set (same architecture) on `g`.
    pub fn bind_params(&self, g: &mut Graph<T>, params: &ParamStore<T>, trainable: bool) -> Bound {
        Bound {
            vars: params.tensors().map(|t| g.leaf(t.clone(), trainable)).collect(),
        }
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let o = self.config.output_stride;
        if h == 0 || w == 0 || h % o != 0 || w % o != 0 {
            return Err(Error::IndivisibleInput { h, w, stride: o });
        }
        Ok(())
    }

    /// Runs encoder and both heads on `x: [N, 3, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Outputs> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != 3 {
            return Err(Error::Invalid(format!("expected 3 input channels, got {c}")));
        }
        self.check_input(h, w)?;
        let v = &bound.vars;
        let mut feat = x;
        for (i, &stride) in self.config.strides().iter().enumerate() {
            let base = i * 4;
            feat = g.conv2d(feat, v[base], v[base + 1], stride, 1)?;
            feat = g.group_norm(feat, v[base + 2], v[base + 3], GN_GROUPS, GN_EPS)?;
            feat = g.relu(feat);
        }
        let logits = g.conv2d(feat, v[12], v[13], 1, 0)?;
        let attn_logit = g.conv2d(feat, v[14], v[15], 1, 0)?;
        Ok(Outputs {
            features: feat,
            logits,
            attn_logit,
        })
    }

    /// Forward pass without gradient tracking, returning plain tensors.
    pub fn infer(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, xv)?;
        Ok((
            g.value(out.features).clone(),
            g.value(out.logits).clone(),
            g.value(out.attn_logit).clone(),
        ))
    }

    /// Reads accumulated gradients for `bound` off `g` (zeros where unreached).
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Grads<T> {
        Grads(
            bound
                .vars
                .iter()
                .zip(self.params.tensors())
                .map(|(&v, p)| {
                    g.grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
                })
                .collect(),
        )
    }

    pub fn snapshot(&self, tag: impl Into<String>, iteration: u64) -> ParamSnapshot<T> {
        ParamSnapshot {
            tag: tag.into(),
            iteration,
            params: self.params.clone(),
        }
    }

    /// Overwrites parameters with `snap`; fails without modification on any mismatch.
    pub fn restore(&mut self, snap: &ParamSnapshot<T>) -> Result<()> {
        self.params.check_compatible(&snap.params)?;
        self.params = snap.params.clone();
        Ok(())
    }

    /// A model of the same architecture carrying the snapshot's parameters.
    pub fn with_snapshot(&self, snap: &ParamSnapshot<T>) -> Result<Self> {
        let mut m = self.clone();
        m.restore(snap)?;
        Ok(m)
    }
}
