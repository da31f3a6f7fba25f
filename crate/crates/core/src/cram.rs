//! Cross-resolution attention: grid-aligned context/detail crops, masked
//! scale-attention fusion of the two predictions, and the two-branch loss.
//!
//! Geometry: a context crop covers `s·h_L × s·w_L` image pixels and is
//! downsampled by `s` to `h_L × w_L`. A detail region of `h_H × w_H` is
//! chosen inside that low-resolution crop on the stride-`o` grid; the
//! detail branch sees the full-resolution pixels under it
//! (`s·h_H × s·w_H`), so its prediction lands on the upsampled context grid
//! of size `(s·h_L/o) × (s·w_L/o)` without resampling.

use dapass_tensor::{bilinear_resize, Element, Graph, ResizeTarget, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panosynth::LabelMap;
use crate::segnet::{Bound, SegModel};

/// Rectangle `[top, bottom) x [left, right)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CropSpec {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
    /// `s` for context crops, 1 for detail crops.
    pub scale: usize,
    /// Size after resampling by `1/scale`.
    pub out_size: (usize, usize),
}

impl CropSpec {
    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }
}

fn crop_err<T>(msg: String) -> Result<T> {
    Err(Error::Crop(msg))
}

/// Number of grid positions `0, step, 2·step, …` for a window of `len` inside `extent`.
fn grid_positions(extent: usize, len: usize, step: usize) -> usize {
    (extent - len) / step + 1
}

/// Every valid top-left corner of a context crop.
pub fn valid_context_corners(h: usize, w: usize, s: usize, o: usize, h_l: usize, w_l: usize) -> Vec<(usize, usize)> {
    let k = s * o;
    if s * h_l > h || s * w_l > w {
        return Vec::new();
    }
    let rows = grid_positions(h, s * h_l, k);
    let cols = grid_positions(w, s * w_l, k);
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r * k, c * k)))
        .collect()
}

/// Samples a context crop whose corners lie on the `k = s·o` grid.
pub fn sample_context_crop(
    h: usize,
    w: usize,
    s: usize,
    o: usize,
    h_l: usize,
    w_l: usize,
    rng: &mut impl Rng,
) -> Result<CropSpec> {
    if s == 0 || o == 0 || h_l == 0 || w_l == 0 {
        return crop_err("scale, stride and crop size must be positive".into());
    }
    let k = s * o;
    if s * h_l > h || s * w_l > w {
        return crop_err(format!("context {}x{} exceeds image {h}x{w}", s * h_l, s * w_l));
    }
    if h % k != 0 || w % k != 0 || h_l % o != 0 || w_l % o != 0 {
        return crop_err(format!("image {h}x{w} / crop {h_l}x{w_l} not aligned to grid {k}"));
    }
    let top = k * rng.gen_range(0..grid_positions(h, s * h_l, k));
    let left = k * rng.gen_range(0..grid_positions(w, s * w_l, k));
    Ok(CropSpec {
        top,
        bottom: top + s * h_l,
        left,
        right: left + s * w_l,
        scale: s,
        out_size: (h_l, w_l),
    })
}

/// Samples a detail region inside the low-resolution context crop, aligned to `o`.
pub fn sample_detail_crop(
    context: &CropSpec,
    h_h: usize,
    w_h: usize,
    o: usize,
    rng: &mut impl Rng,
) -> Result<CropSpec> {
    let (h_l, w_l) = context.out_size;
    if h_h == 0 || w_h == 0 || h_h > h_l || w_h > w_l {
        return crop_err(format!("detail {h_h}x{w_h} does not fit context {h_l}x{w_l}"));
    }
    if h_h % o != 0 || w_h % o != 0 {
        return crop_err(format!("detail {h_h}x{w_h} not aligned to stride {o}"));
    }
    let top = o * rng.gen_range(0..grid_positions(h_l, h_h, o));
    let left = o * rng.gen_range(0..grid_positions(w_l, w_h, o));
    Ok(CropSpec {
        top,
        bottom: top + h_h,
        left,
        right: left + w_h,
        scale: 1,
        out_size: (h_h, w_h),
    })
}

/// Offset of the detail prediction inside the fused grid, in cells.
pub fn detail_grid_offset(detail: &CropSpec, s: usize, o: usize) -> Result<(usize, usize)> {
    if (s * detail.top) % o != 0 || (s * detail.left) % o != 0 {
        return crop_err(format!("detail corner ({}, {}) off the stride-{o} grid", detail.top, detail.left));
    }
    Ok((s * detail.top / o, s * detail.left / o))
}

/// Image-space rectangle of the full-resolution detail input.
pub fn detail_image_region(context: &CropSpec, detail: &CropSpec) -> CropSpec {
    let s = context.scale;
    CropSpec {
        top: context.top + s * detail.top,
        bottom: context.top + s * detail.bottom,
        left: context.left + s * detail.left,
        right: context.left + s * detail.right,
        scale: 1,
        out_size: (s * detail.height(), s * detail.width()),
    }
}

/// Graph values entering the fusion.
#[derive(Clone, Copy, Debug)]
pub struct FusionInputs {
    /// Context logits `[1, C, h_L/o, w_L/o]`.
    pub y_lr: Var,
    /// Detail logits `[1, C, s·h_H/o, s·w_H/o]`.
    pub y_hr: Var,
    /// Post-sigmoid attention `[1, 1, h_L/o, w_L/o]`.
    pub a_lr: Var,
    /// Detail region in low-resolution context coordinates.
    pub detail: CropSpec,
}

/// `ζ((1 − a′) ⊙ ŷ_LR, s) + ζ(a′, s) ⊙ pad(ŷ_HR)`, with `a′` zero outside the detail region.
pub fn fuse<T: Element>(g: &mut Graph<T>, inputs: &FusionInputs, s: usize, o: usize) -> Result<Var> {
    let (n, c, gh, gw) = g.value(inputs.y_lr).dims4()?;
    let a_shape = g.value(inputs.a_lr).dims4()?;
    if a_shape != (n, 1, gh, gw) {
        return Err(Error::Invalid(format!(
            "attention {a_shape:?} does not match context grid {gh}x{gw}"
        )));
    }
    let d = inputs.detail;
    if d.top % o != 0 || d.left % o != 0 || d.bottom % o != 0 || d.right % o != 0 || d.bottom > gh * o || d.right > gw * o {
        return Err(Error::Invalid(format!("detail region {d:?} not on the {gh}x{gw} grid")));
    }
    let (ft, fl) = detail_grid_offset(&d, s, o)?;
    let (dh, dw) = (s * d.height() / o, s * d.width() / o);
    let hr_shape = g.value(inputs.y_hr).dims4()?;
    if hr_shape != (n, c, dh, dw) {
        return Err(Error::Invalid(format!(
            "detail logits {hr_shape:?}, expected ({n}, {c}, {dh}, {dw})"
        )));
    }
    let mut mask = Tensor::<T>::zeros([n, 1, gh, gw]);
    for i in 0..n {
        for y in d.top / o..d.bottom / o {
            for x in d.left / o..d.right / o {
                mask.data_mut()[(i * gh + y) * gw + x] = T::one();
            }
        }
    }
    let mask = g.constant(mask);
    let a_masked = g.mul(inputs.a_lr, mask)?;
    let keep = g.one_minus(a_masked);
    let context = g.mul_channel(keep, inputs.y_lr)?;
    let context = g.resize(context, s * gh, s * gw)?;
    let a_up = g.resize(a_masked, s * gh, s * gw)?;
    let hr = g.pad(inputs.y_hr, s * gh, s * gw, ft, fl)?;
    let detail = g.mul_channel(a_up, hr)?;
    Ok(g.add(context, detail)?)
}

/// Pseudo-labels with per-pixel quality weights for one branch.
#[derive(Clone, Copy, Debug)]
pub struct BranchTargets<'a, T> {
    pub labels: &'a [u8],
    pub weights: Option<&'a [T]>,
}

/// `(1 − λ_d)·CE(fused) + λ_d·CE(detail)`; both logit maps are bilinearly
/// upsampled by `upsample` before the loss.
pub fn cram_loss<T: Element>(
    g: &mut Graph<T>,
    fused: Var,
    detail: Var,
    fused_targets: BranchTargets<'_, T>,
    detail_targets: BranchTargets<'_, T>,
    lambda_d: f64,
    temperature: f64,
    upsample: usize,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda_d) {
        return Err(Error::Invalid(format!("lambda_d must be in [0, 1], got {lambda_d}")));
    }
    let mut branch = |logits: Var, t: BranchTargets<'_, T>| -> Result<Var> {
        let (_, _, h, w) = g.value(logits).dims4()?;
        let up = if upsample == 1 {
            logits
        } else {
            g.resize(logits, h * upsample, w * upsample)?
        };
        Ok(g.cross_entropy(up, t.labels, t.weights, T::cast(temperature))?)
    };
    let ce_fused = branch(fused, fused_targets)?;
    let ce_detail = branch(detail, detail_targets)?;
    let a = g.scale(ce_fused, T::cast(1.0 - lambda_d));
    let b = g.scale(ce_detail, T::cast(lambda_d));
    Ok(g.add(a, b)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CramConfig {
    pub enabled: bool,
    /// Context downsampling factor `s`.
    pub scale: usize,
    pub lambda_d: f64,
    pub temperature: f64,
    /// `[h_L, w_L]` after downsampling.
    pub context: [usize; 2],
    /// `[h_H, w_H]` in low-resolution context coordinates.
    pub detail: [usize; 2],
}

impl Default for CramConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            scale: 2,
            lambda_d: 0.3,
            temperature: 1.0,
            context: [32, 64],
            detail: [16, 32],
        }
    }
}

impl CramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::Config("cram.scale must be a positive integer".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_d) {
            return Err(Error::Config(format!("cram.lambda_d must be in [0, 1], got {}", self.lambda_d)));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("cram.temperature must be positive".into()));
        }
        if self.detail[0] > self.context[0] || self.detail[1] > self.context[1] {
            return Err(Error::Config("cram.detail must fit inside cram.context".into()));
        }
        Ok(())
    }
}

/// One training image for the crop-and-fuse loss.
#[derive(Clone, Copy, Debug)]
pub struct CramItem<'a> {
    pub image: &'a Tensor<f32>,
    pub labels: &'a LabelMap,
    pub weights: Option<&'a [f32]>,
}

fn crop_image(image: &Tensor<f32>, r: &CropSpec) -> Result<Tensor<f32>> {
    let (_, c, _, w) = image.dims4()?;
    let (h_out, w_out) = (r.height(), r.width());
    let mut out = Vec::with_capacity(c * h_out * w_out);
    let hw = image.shape()[2] * w;
    for ch in 0..c {
        for y in r.top..r.bottom {
            let row = ch * hw + y * w;
            out.extend_from_slice(&image.data()[row + r.left..row + r.right]);
        }
    }
    Ok(Tensor::new([1, c, h_out, w_out], out)?)
}

fn crop_weights(weights: &[f32], w: usize, r: &CropSpec) -> Vec<f32> {
    let mut out = Vec::with_capacity(r.height() * r.width());
    for y in r.top..r.bottom {
        out.extend_from_slice(&weights[y * w + r.left..y * w + r.right]);
    }
    out
}

/// Sampled crops for one item.
#[derive(Clone, Copy, Debug)]
pub struct CramCrops {
    pub context: CropSpec,
    pub detail: CropSpec,
}

/// Builds the averaged crop-and-fuse loss for a batch on `g`.
pub fn batch_loss(
    model: &SegModel<f32>,
    g: &mut Graph<f32>,
    bound: &Bound,
    items: &[CramItem<'_>],
    cfg: &CramConfig,
    rng: &mut impl Rng,
) -> Result<Var> {
    let o = model.output_stride();
    let s = cfg.scale;
    let mut inputs = Vec::with_capacity(items.len() * 2);
    let mut crops = Vec::with_capacity(items.len());
    for item in items {
        let (_, _, h, w) = item.image.dims4()?;
        let context = sample_context_crop(h, w, s, o, cfg.context[0], cfg.context[1], rng)?;
        let detail = sample_detail_crop(&context, cfg.detail[0], cfg.detail[1], o, rng)?;
        crops.push(CramCrops { context, detail });
        let ctx = crop_image(item.image, &context)?;
        inputs.push(bilinear_resize(&ctx, ResizeTarget::Ratio(1, s))?);
    }
    for (item, c) in items.iter().zip(&crops) {
        inputs.push(crop_image(item.image, &detail_image_region(&c.context, &c.detail))?);
    }
    let b = items.len();
    // Context and detail inputs share a shape only when s·h_H = h_L; otherwise run separately.
    let same = inputs[0].shape() == inputs[b].shape();
    let (ctx_out, det_out) = if same {
        let refs: Vec<&Tensor<f32>> = inputs.iter().collect();
        let x = g.constant(Tensor::stack(&refs)?);
        let out = model.forward(g, bound, x)?;
        ((out.logits, out.attn_logit, 0), (out.logits, b))
    } else {
        let cx: Vec<&Tensor<f32>> = inputs[..b].iter().collect();
        let dx: Vec<&Tensor<f32>> = inputs[b..].iter().collect();
        let xc = g.constant(Tensor::stack(&cx)?);
        let xd = g.constant(Tensor::stack(&dx)?);
        let oc = model.forward(g, bound, xc)?;
        let od = model.forward(g, bound, xd)?;
        ((oc.logits, oc.attn_logit, 0), (od.logits, 0))
    };
    let mut total: Option<Var> = None;
    for (i, (item, c)) in items.iter().zip(&crops).enumerate() {
        let y_lr = g.slice_batch(ctx_out.0, ctx_out.2 + i, 1)?;
        let a_logit = g.slice_batch(ctx_out.1, ctx_out.2 + i, 1)?;
        let a_lr = g.sigmoid(a_logit);
        let y_hr = g.slice_batch(det_out.0, det_out.1 + i, 1)?;
        let fused = fuse(
            g,
            &FusionInputs {
                y_lr,
                y_hr,
                a_lr,
                detail: c.detail,
            },
            s,
            o,
        )?;
        let w = item.labels.w;
        let ctx_labels = item.labels.crop(c.context.top, c.context.left, c.context.height(), c.context.width());
        let region = detail_image_region(&c.context, &c.detail);
        let det_labels = item.labels.crop(region.top, region.left, region.height(), region.width());
        let ctx_w = item.weights.map(|wt| crop_weights(wt, w, &c.context));
        let det_w = item.weights.map(|wt| crop_weights(wt, w, &region));
        let loss = cram_loss(
            g,
            fused,
            y_hr,
            BranchTargets {
                labels: &ctx_labels.data,
                weights: ctx_w.as_deref(),
            },
            BranchTargets {
                labels: &det_labels.data,
                weights: det_w.as_deref(),
            },
            cfg.lambda_d,
            cfg.temperature,
            o,
        )?;
        total = Some(match total {
            None => loss,
            Some(t) => g.add(t, loss)?,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("empty batch".into()))?;
    Ok(g.scale(total, 1.0 / b as f32))
}

/// Whole-image fused prediction: the full image downsampled by `s` is the
/// context, the full-resolution image is the detail, and attention is unmasked.
/// Returns logits at full image resolution.
pub fn predict_fused(model: &SegModel<f32>, image: &Tensor<f32>, s: usize) -> Result<Tensor<f32>> {
    let (_, _, h, w) = image.dims4()?;
    let o = model.output_stride();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let lr = bilinear_resize(image, ResizeTarget::Ratio(1, s))?;
    let (lh, lw) = (lr.shape()[2], lr.shape()[3]);
    model.check_input(lh, lw)?;
    let xl = g.constant(lr);
    let xh = g.constant(image.clone());
    let ol = model.forward(&mut g, &bound, xl)?;
    let oh = model.forward(&mut g, &bound, xh)?;
    let a_lr = g.sigmoid(ol.attn_logit);
    let fused = fuse(
        &mut g,
        &FusionInputs {
            y_lr: ol.logits,
            y_hr: oh.logits,
            a_lr,
            detail: CropSpec {
                top: 0,
                bottom: lh,
                left: 0,
                right: lw,
                scale: 1,
                out_size: (lh, lw),
            },
        },
        s,
        o,
    )?;
    let up = g.resize(fused, h, w)?;
    Ok(g.value(up).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn context_corners_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let c = sample_context_crop(64, 128, 2, 4, 16, 32, &mut rng).unwrap();
            assert_eq!(c.top % 8, 0);
            assert_eq!(c.left % 8, 0);
            assert_eq!(c.bottom - c.top, 32);
            assert!(c.bottom <= 64 && c.right <= 128);
        }
    }

    #[test]
    fn unit_scale_context_is_plain_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = sample_context_crop(32, 32, 1, 8, 16, 16, &mut rng).unwrap();
        assert_eq!((c.height(), c.width()), c.out_size);
        let img = Tensor::from_fn([1, 3, 32, 32], |i| i as f32);
        let crop = crop_image(&img, &c).unwrap();
        let resized = bilinear_resize(&crop, ResizeTarget::Ratio(1, 1)).unwrap();
        assert_eq!(crop, resized);
    }

    #[test]
    fn oversized_crops_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_context_crop(32, 64, 2, 4, 32, 32, &mut rng).is_err());
        let c = sample_context_crop(64, 128, 2, 4, 16, 32, &mut rng).unwrap();
        assert!(sample_detail_crop(&c, 20, 8, 4, &mut rng).is_err());
    }

    #[test]
    fn maximal_detail_covers_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = sample_context_crop(64, 128, 2, 4, 16, 32, &mut rng).unwrap();
        let d = sample_detail_crop(&c, 16, 32, 4, &mut rng).unwrap();
        assert_eq!((d.top, d.bottom, d.left, d.right), (0, 16, 0, 32));
    }

    #[test]
    fn zero_attention_is_pure_context() {
        let mut g = Graph::<f64>::new();
        let y_lr = g.constant(Tensor::from_fn([1, 2, 4, 8], |i| (i as f64).sin()));
        let y_hr = g.constant(Tensor::from_fn([1, 2, 4, 8], |i| (i as f64).cos()));
        let a_lr = g.constant(Tensor::zeros([1, 1, 4, 8]));
        let detail = CropSpec {
            top: 0,
            bottom: 8,
            left: 8,
            right: 24,
            scale: 1,
            out_size: (8, 16),
        };
        let fused = fuse(&mut g, &FusionInputs { y_lr, y_hr, a_lr, detail }, 2, 4).unwrap();
        let expect = bilinear_resize(g.value(y_lr), ResizeTarget::Ratio(2, 1)).unwrap();
        assert_eq!(g.value(fused), &expect);
    }

    #[test]
    fn lambda_bounds() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new([1, 2, 1, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap());
        let b = g.constant(Tensor::new([1, 2, 1, 2], vec![0.5, 0.0, 1.0, -1.0]).unwrap());
        let labels = [0u8, 1];
        let t = BranchTargets { labels: &labels, weights: None };
        let ce_a = dapass_tensor::softmax_cross_entropy(g.value(a), &labels, None, 1.0).unwrap();
        let ce_b = dapass_tensor::softmax_cross_entropy(g.value(b), &labels, None, 1.0).unwrap();
        let l0 = cram_loss(&mut g, a, b, t, t, 0.0, 1.0, 1).unwrap();
        let l1 = cram_loss(&mut g, a, b, t, t, 1.0, 1.0, 1).unwrap();
        assert_eq!(g.value(l0).item(), ce_a);
        assert_eq!(g.value(l1).item(), ce_b);
        assert!(cram_loss(&mut g, a, b, t, t, 1.5, 1.0, 1).is_err());
        assert!(cram_loss(&mut g, a, b, t, t, -0.1, 1.0, 1).is_err());
    }
}
