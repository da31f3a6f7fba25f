use dapass_tensor::{
    bilinear_resize, kl_divergence, softmax, softmax_cross_entropy, Graph, ResizeTarget, Tensor,
    TensorError, IGNORE_LABEL,
};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn kl_identity_is_zero() {
    let p = t(&[1, 3, 1, 2], &[0.2, 0.5, 0.3, 0.3, 0.5, 0.2]);
    let kl = kl_divergence(&p, &p).unwrap();
    assert!(kl.data().iter().all(|&v| v.abs() < 1e-15));
}

#[test]
fn kl_hand_value() {
    let p = t(&[1, 2, 1, 1], &[0.5, 0.5]);
    let q = t(&[1, 2, 1, 1], &[0.25, 0.75]);
    let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    let kl = kl_divergence(&p, &q).unwrap();
    assert!((kl.item() - expected).abs() < 1e-12);
    assert!((kl.item() - 0.14384).abs() < 1e-5);
}

#[test]
fn kl_zero_support_term_vanishes() {
    let p = t(&[1, 2, 1, 1], &[1.0, 0.0]);
    assert_eq!(kl_divergence(&p, &p).unwrap().item(), 0.0);
}

#[test]
fn kl_identity_is_exact_for_tiny_entries() {
    // Saturated softmax outputs go far below the log clamp.
    let p = t(&[1, 3, 1, 1], &[1e-30, 1e-14, 1.0 - 1e-14]);
    assert_eq!(kl_divergence(&p, &p).unwrap().item(), 0.0);
    let logits = t(&[1, 4, 1, 2], &[40.0, -40.0, 0.0, 3.0, -35.0, 1.0, 2.0, -2.0]);
    let s = softmax(&logits, 1.0).unwrap();
    assert!(kl_divergence(&s, &s).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn kl_rejects_bad_inputs() {
    let p = t(&[1, 2, 1, 1], &[1.0, 0.0]);
    let q = t(&[1, 2, 1, 2], &[0.5, 0.5, 0.5, 0.5]);
    assert!(matches!(kl_divergence(&p, &q), Err(TensorError::ShapeMismatch { .. })));
    let neg = t(&[1, 2, 1, 1], &[1.5, -0.5]);
    assert!(matches!(kl_divergence(&neg, &p), Err(TensorError::Invalid { .. })));
}

#[test]
fn cross_entropy_confident_prediction_is_zero() {
    let mut logits = vec![0.0; 8 * 4];
    let labels = [0u8, 3, 7, 5];
    for (p, &l) in labels.iter().enumerate() {
        logits[l as usize * 4 + p] = 1e4;
    }
    let x = t(&[1, 8, 2, 2], &logits);
    let loss = softmax_cross_entropy(&x, &labels, None, 1.0).unwrap();
    assert!(loss.abs() < 1e-12);
}

#[test]
fn cross_entropy_uniform_is_ln_c() {
    let x = Tensor::<f64>::zeros([2, 8, 3, 3]);
    let labels: Vec<u8> = (0..18).map(|i| (i % 8) as u8).collect();
    let loss = softmax_cross_entropy(&x, &labels, None, 1.0).unwrap();
    assert!((loss - 8f64.ln()).abs() < 1e-12);
    assert!((loss - 2.0794).abs() < 1e-4);
}

#[test]
fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_fn([1, 4, 2, 2], |i| i as f64 * 0.1));
    let loss = g.cross_entropy(x, &[IGNORE_LABEL; 4], None, 1.0).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);
    g.backward(loss).unwrap();
    let grad = g.grad(x).map(|t| t.data().to_vec()).unwrap_or_default();
    assert!(grad.iter().all(|&v| v == 0.0));
}

#[test]
fn cross_entropy_errors() {
    let x = Tensor::<f64>::zeros([1, 3, 1, 2]);
    assert!(matches!(
        softmax_cross_entropy(&x, &[0, 3], None, 1.0),
        Err(TensorError::LabelOutOfRange { label: 3, classes: 3 })
    ));
    assert!(softmax_cross_entropy(&x, &[0, 1], None, 0.0).is_err());
    assert!(softmax_cross_entropy(&x, &[0, 1], None, -1.0).is_err());
}

#[test]
fn cross_entropy_temperature_and_weights() {
    let x = t(&[1, 2, 1, 2], &[2.0, 0.0, 0.0, 1.0]);
    let labels = [0u8, 1];
    let w = [0.5, 2.0];
    let temp = 2.0;
    let nll = |a: f64, b: f64| -> f64 { -(a / temp - ((a / temp).exp() + (b / temp).exp()).ln()) };
    let expected = (0.5 * nll(2.0, 0.0) + 2.0 * nll(1.0, 0.0)) / 2.0;
    let loss = softmax_cross_entropy(&x, &labels, Some(&w), temp).unwrap();
    assert!((loss - expected).abs() < 1e-12);
}

#[test]
fn resize_preserves_constants() {
    let x = Tensor::<f64>::full([1, 2, 6, 10], 3.25);
    for target in [
        ResizeTarget::Ratio(2, 1),
        ResizeTarget::Ratio(1, 2),
        ResizeTarget::Ratio(3, 2),
        ResizeTarget::Shape(7, 13),
    ] {
        let y = bilinear_resize(&x, target).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.25).abs() < 1e-12), "{target:?}");
    }
}

/// Direct align-corners=false bilinear formula, evaluated per output pixel.
fn bilinear_oracle(src: &[Vec<f64>], oh: usize, ow: usize) -> Vec<Vec<f64>> {
    let (ih, iw) = (src.len(), src[0].len());
    let coord = |o: usize, i: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * i as f64 / n_out as f64 - 0.5).max(0.0);
        let lo = s.floor() as usize;
        let lo = lo.min(i - 1);
        let hi = (lo + 1).min(i - 1);
        (lo, hi, s - lo as f64)
    };
    (0..oh)
        .map(|y| {
            (0..ow)
                .map(|x| {
                    let (y0, y1, fy) = coord(y, ih, oh);
                    let (x0, x1, fx) = coord(x, iw, ow);
                    (1.0 - fy) * ((1.0 - fx) * src[y0][x0] + fx * src[y0][x1])
                        + fy * ((1.0 - fx) * src[y1][x0] + fx * src[y1][x1])
                })
                .collect()
        })
        .collect()
}

#[test]
fn resize_upsample_matches_oracle() {
    let x = t(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]);
    let y = bilinear_resize(&x, ResizeTarget::Ratio(2, 1)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 4, 4]);
    let oracle = bilinear_oracle(&[vec![0.0, 1.0], vec![2.0, 3.0]], 4, 4);
    for r in 0..4 {
        for c in 0..4 {
            assert!((y.data()[r * 4 + c] - oracle[r][c]).abs() < 1e-12);
        }
    }
    // First row hand values: [0, 0.25, 0.75, 1].
    assert_eq!(&y.data()[0..4], &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn resize_rejects_fractional_output() {
    let x = Tensor::<f64>::zeros([1, 1, 3, 4]);
    assert!(bilinear_resize(&x, ResizeTarget::Ratio(1, 2)).is_err());
}

#[test]
fn backward_quadratic() {
    let mut g = Graph::<f64>::new();
    let theta = g.param(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(theta, theta).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(theta).unwrap().data(), &[2.0, 4.0]);
    // Repeated calls accumulate.
    g.backward(loss).unwrap();
    assert_eq!(g.grad(theta).unwrap().data(), &[4.0, 8.0]);
    g.zero_grad();
    assert!(g.grad(theta).is_none());
}

#[test]
fn backward_disconnected_leaf_gets_no_gradient() {
    let mut g = Graph::<f64>::new();
    let theta = g.param(t(&[2], &[1.0, 2.0]));
    let other = g.param(t(&[2], &[3.0, 4.0]));
    let loss = g.sum(other);
    g.backward(loss).unwrap();
    assert!(g.grad(theta).map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let theta = g.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(theta), Err(TensorError::NonScalarLoss(_))));
}

fn arb_logits() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..5, 1usize..7).prop_flat_map(|(c, hw)| {
        (Just(c), Just(hw), prop::collection::vec(-20.0f64..20.0, c * hw))
    })
}

fn arb_distributions() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    (2usize..6).prop_flat_map(|c| {
        (
            Just(c),
            prop::collection::vec(0.01f64..1.0, c),
            prop::collection::vec(0.01f64..1.0, c),
        )
    })
}

fn normalise(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant((c, hw, data) in arb_logits(), shift in -50.0f64..50.0) {
        let x = Tensor::new([1, c, 1, hw], data).unwrap();
        let p = softmax(&x, 1.0).unwrap();
        for px in 0..hw {
            let s: f64 = (0..c).map(|k| p.data()[k * hw + px]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        let shifted = softmax(&x.map(|v| v + shift), 1.0).unwrap();
        for (a, b) in p.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn resize_is_linear(
        a in prop::collection::vec(-1.0f64..1.0, 2 * 6 * 8),
        b in prop::collection::vec(-1.0f64..1.0, 2 * 6 * 8),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
        up in any::<bool>(),
    ) {
        let target = if up { ResizeTarget::Ratio(2, 1) } else { ResizeTarget::Ratio(1, 2) };
        let x = Tensor::new([1, 2, 6, 8], a).unwrap();
        let y = Tensor::new([1, 2, 6, 8], b).unwrap();
        let combo = x.zip_map(&y, "combo", |p, q| alpha * p + beta * q).unwrap();
        let lhs = bilinear_resize(&combo, target).unwrap();
        let rx = bilinear_resize(&x, target).unwrap();
        let ry = bilinear_resize(&y, target).unwrap();
        for i in 0..lhs.len() {
            prop_assert!((lhs.data()[i] - (alpha * rx.data()[i] + beta * ry.data()[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_partition_of_unity(a in prop::collection::vec(0.0f64..1.0, 8 * 12)) {
        let x = Tensor::new([1, 1, 8, 12], a).unwrap();
        let comp = x.map(|v| 1.0 - v);
        let r1 = bilinear_resize(&x, ResizeTarget::Ratio(1, 2)).unwrap();
        let r2 = bilinear_resize(&comp, ResizeTarget::Ratio(1, 2)).unwrap();
        for i in 0..r1.len() {
            prop_assert!((r1.data()[i] + r2.data()[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_only_on_equality((c, p, q) in arb_distributions()) {
        let (p, q) = (normalise(&p), normalise(&q));
        let pt = Tensor::new([1, c, 1, 1], p.clone()).unwrap();
        let qt = Tensor::new([1, c, 1, 1], q.clone()).unwrap();
        let kl = kl_divergence(&pt, &qt).unwrap().item();
        prop_assert!(kl >= -1e-12);
        let max_diff = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if max_diff > 1e-3 {
            prop_assert!(kl > 0.0);
        }
        prop_assert!(kl_divergence(&pt, &pt).unwrap().item().abs() < 1e-12);
    }
}
