//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Values live in [`Tensor`]; differentiable computations are recorded on a
//! [`Graph`] and differentiated with [`Graph::backward`]. The free functions
//! below are eager, graph-free conveniences over the same kernels.

mod element;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

/// Label value excluded from every loss and metric.
pub const IGNORE_LABEL: u8 = 255;

/// Target of a [`bilinear_resize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeTarget {
    /// Multiply both spatial dims by `num / den`; the result must be integral.
    Ratio(usize, usize),
    Shape(usize, usize),
}

impl ResizeTarget {
    pub fn output_dims(self, h: usize, w: usize) -> Result<(usize, usize)> {
        match self {
            ResizeTarget::Shape(oh, ow) if oh > 0 && ow > 0 => Ok((oh, ow)),
            ResizeTarget::Shape(..) => error::invalid("bilinear_resize", "empty target shape"),
            ResizeTarget::Ratio(num, den) => {
                if num == 0 || den == 0 {
                    return error::invalid("bilinear_resize", "ratio must be positive");
                }
                if (h * num) % den != 0 || (w * num) % den != 0 {
                    return error::invalid(
                        "bilinear_resize",
                        format!("{h}x{w} scaled by {num}/{den} is not an integer size"),
                    );
                }
                Ok((h * num / den, w * num / den))
            }
        }
    }
}

/// Eager bilinear resize of an `[N, C, H, W]` tensor (align-corners = false).
pub fn bilinear_resize<T: Element>(x: &Tensor<T>, target: ResizeTarget) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = target.output_dims(h, w)?;
    Tensor::new(
        [n, c, oh, ow],
        kernels::resize_forward(x.data(), n * c, (h, w), (oh, ow)),
    )
}

/// Channel-axis softmax of an `[N, C, H, W]` tensor.
pub fn softmax<T: Element>(logits: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let y = g.softmax(x, temperature)?;
    Ok(g.value(y).clone())
}

/// Per-pixel `sum_c p_c ln(p_c / q_c)` as an `[N, 1, H, W]` tensor.
pub fn kl_divergence<T: Element>(p: &Tensor<T>, q: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (pv, qv) = (g.constant(p.clone()), g.constant(q.clone()));
    let out = g.kl_divergence(pv, qv)?;
    Ok(g.value(out).clone())
}

/// Temperature-scaled, optionally weighted cross entropy (see [`Graph::cross_entropy`]).
pub fn softmax_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[u8],
    weights: Option<&[T]>,
    temperature: T,
) -> Result<T> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let loss = g.cross_entropy(x, labels, weights, temperature)?;
    Ok(g.value(loss).item())
}
