use std::collections::BTreeSet;

use dapass_core::cram::{
    cram_loss, detail_grid_offset, fuse, sample_context_crop, sample_detail_crop, valid_context_corners,
    BranchTargets, CropSpec, FusionInputs,
};
use dapass_tensor::{gradcheck, softmax_cross_entropy, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bilinear sample of channel `c` of `[1, C, h, w]` at output pixel (y, x)
/// of an `s`-times upsampling, half-pixel centres, edge clamped.
fn bilinear_at(t: &Tensor<f64>, c: usize, s: usize, y: usize, x: usize) -> f64 {
    let (h, w) = (t.shape()[2], t.shape()[3]);
    let coord = |d: usize, n: usize| {
        let src = ((d as f64 + 0.5) / s as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let (y0, y1, fy) = coord(y, h);
    let (x0, x1, fx) = coord(x, w);
    let at = |yy: usize, xx: usize| t.data()[(c * h + yy) * w + xx];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Direct per-pixel evaluation of the fusion rule.
fn oracle(y_lr: &Tensor<f64>, y_hr: &Tensor<f64>, a: &Tensor<f64>, d: &CropSpec, s: usize, o: usize) -> Tensor<f64> {
    let (c, gh, gw) = (y_lr.shape()[1], y_lr.shape()[2], y_lr.shape()[3]);
    let (dh, dw) = (y_hr.shape()[2], y_hr.shape()[3]);
    let inside = |y: usize, x: usize| y >= d.top / o && y < d.bottom / o && x >= d.left / o && x < d.right / o;
    let masked = Tensor::from_fn([1, 1, gh, gw], |i| {
        let (y, x) = (i / gw, i % gw);
        if inside(y, x) {
            a.data()[i]
        } else {
            0.0
        }
    });
    let ctx = Tensor::from_fn([1, c, gh, gw], |i| {
        let p = i % (gh * gw);
        (1.0 - masked.data()[p]) * y_lr.data()[i]
    });
    let (fh, fw) = (s * gh, s * gw);
    let (ot, ol) = (s * d.top / o, s * d.left / o);
    Tensor::from_fn([1, c, fh, fw], |i| {
        let ch = i / (fh * fw);
        let (y, x) = ((i / fw) % fh, i % fw);
        let hr = if y >= ot && y < ot + dh && x >= ol && x < ol + dw {
            y_hr.data()[(ch * dh + y - ot) * dw + x - ol]
        } else {
            0.0
        };
        bilinear_at(&ctx, ch, s, y, x) + bilinear_at(&masked, 0, s, y, x) * hr
    })
}

struct Instance {
    y_lr: Tensor<f64>,
    y_hr: Tensor<f64>,
    a: Tensor<f64>,
    detail: CropSpec,
    s: usize,
    o: usize,
}

/// Random 8×16 context grid with a 4×8-cell detail region (s = 2, o = 4).
fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let (s, o, c) = (2, 4, 3);
    let (h_l, w_l) = (32, 64);
    let ctx = CropSpec {
        top: 0,
        bottom: s * h_l,
        left: 0,
        right: s * w_l,
        scale: s,
        out_size: (h_l, w_l),
    };
    let detail = sample_detail_crop(&ctx, 16, 32, o, rng).unwrap();
    let (gh, gw) = (h_l / o, w_l / o);
    let (dh, dw) = (s * 16 / o, s * 32 / o);
    let mut r = |n: usize| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
    let y_lr = Tensor::new([1, c, gh, gw], r(c * gh * gw)).unwrap();
    let y_hr = Tensor::new([1, c, dh, dw], r(c * dh * dw)).unwrap();
    let a = Tensor::new([1, 1, gh, gw], r(gh * gw).iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()).unwrap();
    Instance { y_lr, y_hr, a, detail, s, o }
}

fn run_fuse(inst: &Instance) -> (Graph<f64>, FusionInputs, dapass_tensor::Var) {
    let mut g = Graph::new();
    let y_lr = g.param(inst.y_lr.clone());
    let y_hr = g.param(inst.y_hr.clone());
    let a_lr = g.param(inst.a.clone());
    let inputs = FusionInputs {
        y_lr,
        y_hr,
        a_lr,
        detail: inst.detail,
    };
    let fused = fuse(&mut g, &inputs, inst.s, inst.o).unwrap();
    (g, inputs, fused)
}

#[test]
fn fusion_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let inst = instance(&mut rng);
        let (g, _, fused) = run_fuse(&inst);
        let expect = oracle(&inst.y_lr, &inst.y_hr, &inst.a, &inst.detail, inst.s, inst.o);
        let got = g.value(fused);
        assert_eq!(got.shape(), expect.shape());
        let err = got.data().iter().zip(expect.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "max error {err}");
    }
}

#[test]
fn constant_logits_are_preserved() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let mut inst = instance(&mut rng);
        let c = rng.gen_range(-3.0..3.0);
        inst.y_lr = Tensor::full(inst.y_lr.shape().to_vec(), c);
        inst.y_hr = Tensor::full(inst.y_hr.shape().to_vec(), c);
        let (g, _, fused) = run_fuse(&inst);
        let d = inst.detail;
        let gw = inst.a.shape()[3];
        let fw = 2 * gw;
        // Bilinear ζ(a′) reaches one pixel past the padded detail block, where
        // the padded detail logits are zero; everywhere else the value is c.
        let masked = Tensor::from_fn(inst.a.shape().to_vec(), |i| {
            let (y, x) = (i / gw, i % gw);
            if y >= d.top / 4 && y < d.bottom / 4 && x >= d.left / 4 && x < d.right / 4 {
                inst.a.data()[i]
            } else {
                0.0
            }
        });
        for (i, v) in g.value(fused).data().iter().enumerate() {
            let (y, x) = ((i / fw) % 16, i % fw);
            let in_block = y >= 2 * d.top / 4 && y < 2 * d.bottom / 4 && x >= 2 * d.left / 4 && x < 2 * d.right / 4;
            if in_block || bilinear_at(&masked, 0, 2, y, x) == 0.0 {
                assert!((v - c).abs() < 1e-12, "pixel ({y}, {x}): {v} vs {c}");
            }
        }
        // With the detail term equal to c wherever ζ(a′) is nonzero the
        // partition of unity ζ(1 − a′) + ζ(a′) = 1 gives c exactly.
        let mut g = Graph::<f64>::new();
        let a = g.constant(masked.clone());
        let keep = g.one_minus(a);
        let lr = g.constant(Tensor::full(inst.y_lr.shape().to_vec(), c));
        let ctx = g.mul_channel(keep, lr).unwrap();
        let ctx = g.resize(ctx, 16, 32).unwrap();
        let a_up = g.resize(a, 16, 32).unwrap();
        let hr = g.constant(Tensor::full([1, 3, 16, 32], c));
        let det = g.mul_channel(a_up, hr).unwrap();
        let out = g.add(ctx, det).unwrap();
        assert!(g.value(out).data().iter().all(|v| (v - c).abs() < 1e-12));
    }
}

#[test]
fn zero_attention_is_pure_context() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut inst = instance(&mut rng);
    inst.a = Tensor::zeros(inst.a.shape().to_vec());
    let (g, _, fused) = run_fuse(&inst);
    let up = dapass_tensor::bilinear_resize(&inst.y_lr, dapass_tensor::ResizeTarget::Shape(16, 32)).unwrap();
    assert_eq!(g.value(fused), &up);
}

#[test]
fn attention_outside_detail_has_no_effect() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inst = instance(&mut rng);
    let (mut g, inputs, fused) = run_fuse(&inst);
    let loss = g.sum(fused);
    g.backward(loss).unwrap();
    let grad = g.grad(inputs.a_lr).unwrap();
    let gw = inst.a.shape()[3];
    let d = inst.detail;
    for (i, v) in grad.data().iter().enumerate() {
        let (y, x) = (i / gw, i % gw);
        let inside = y >= d.top / 4 && y < d.bottom / 4 && x >= d.left / 4 && x < d.right / 4;
        if !inside {
            assert_eq!(*v, 0.0, "cell ({y}, {x})");
        }
    }
    // Changing attention outside the region leaves the output bit-identical.
    let mut perturbed = instance(&mut ChaCha8Rng::seed_from_u64(13));
    for (i, v) in perturbed.a.data_mut().iter_mut().enumerate() {
        let (y, x) = (i / gw, i % gw);
        if !(y >= d.top / 4 && y < d.bottom / 4 && x >= d.left / 4 && x < d.right / 4) {
            *v = 0.5;
        }
    }
    let (g2, _, fused2) = run_fuse(&perturbed);
    assert_eq!(g.value(fused), g2.value(fused2));
}

#[test]
fn fusion_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..5 {
        let inst = instance(&mut rng);
        let proj: Vec<f64> = (0..3 * 16 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let detail = inst.detail;
        let report = gradcheck::check(&[inst.y_lr.clone(), inst.y_hr.clone(), inst.a.clone()], 1e-5, |g, v| {
            let fused = fuse(
                g,
                &FusionInputs {
                    y_lr: v[0],
                    y_hr: v[1],
                    a_lr: v[2],
                    detail,
                },
                2,
                4,
            )
            .expect("fuse");
            let w = g.constant(Tensor::new([1, 3, 16, 32], proj.clone())?);
            let prod = g.mul(fused, w)?;
            Ok(g.sum(prod))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}

#[test]
fn raising_attention_moves_toward_detail() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let mut inst = instance(&mut rng);
        let (lo, hi) = (rng.gen_range(-2.0..0.0), rng.gen_range(0.5..2.0));
        inst.y_lr = Tensor::full(inst.y_lr.shape().to_vec(), lo);
        inst.y_hr = Tensor::full(inst.y_hr.shape().to_vec(), hi);
        let d = inst.detail;
        let gw = inst.a.shape()[3];
        let (cy, cx) = (rng.gen_range(d.top / 4..d.bottom / 4), rng.gen_range(d.left / 4..d.right / 4));
        let (g0, _, f0) = run_fuse(&inst);
        inst.a.data_mut()[cy * gw + cx] += 0.05;
        let (g1, _, f1) = run_fuse(&inst);
        // Fused pixels over the raised cell move toward the detail value.
        let (fw, y, x) = (2 * gw, 2 * cy, 2 * cx);
        for (yy, xx) in [(y, x), (y + 1, x + 1)] {
            let i = yy * fw + xx;
            let (before, after) = (g0.value(f0).data()[i], g1.value(f1).data()[i]);
            assert!((hi - after).abs() < (hi - before).abs(), "{before} -> {after}");
        }
    }
}

#[test]
fn context_corner_distribution_covers_valid_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let expect: BTreeSet<(usize, usize)> = valid_context_corners(64, 128, 2, 4, 16, 32).into_iter().collect();
    let seen: BTreeSet<(usize, usize)> = (0..1000)
        .map(|_| {
            let c = sample_context_crop(64, 128, 2, 4, 16, 32, &mut rng).unwrap();
            (c.top, c.left)
        })
        .collect();
    assert_eq!(seen, expect);
    // Analytic set: multiples of 8 with the 32×64 window inside the image.
    assert_eq!(expect.len(), 5 * 9);
}

#[test]
fn detail_regions_land_on_grid_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..1000 {
        let ctx = sample_context_crop(64, 256, 2, 8, 32, 64, &mut rng).unwrap();
        let d = sample_detail_crop(&ctx, 16, 32, 8, &mut rng).unwrap();
        for b in [d.top, d.bottom, d.left, d.right] {
            assert_eq!(b % 8, 0);
        }
        let (ot, ol) = detail_grid_offset(&d, 2, 8).unwrap();
        assert_eq!((2 * d.top) % 8, 0);
        assert!(ot + 2 * d.height() / 8 <= 2 * 32 / 8);
        assert!(ol + 2 * d.width() / 8 <= 2 * 64 / 8);
    }
}

#[test]
fn weighted_loss_on_two_pixels() {
    let mut g = Graph::<f64>::new();
    let fused_logits = Tensor::new([1, 2, 1, 2], vec![2.0, -1.0, 0.0, 1.0]).unwrap();
    let detail_logits = Tensor::new([1, 2, 1, 2], vec![0.5, 0.0, -0.5, 3.0]).unwrap();
    let labels = [0u8, 1];
    let q = [0.9, 0.6];
    let ce = |z: [f64; 2], k: usize| -(z[k] - (z[0].exp() + z[1].exp()).ln());
    let ce1 = (0.9 * ce([2.0, 0.0], 0) + 0.6 * ce([-1.0, 1.0], 1)) / 2.0;
    let ce2 = (0.9 * ce([0.5, -0.5], 0) + 0.6 * ce([0.0, 3.0], 1)) / 2.0;
    let f = g.param(fused_logits.clone());
    let d = g.param(detail_logits.clone());
    let t = BranchTargets {
        labels: &labels,
        weights: Some(&q),
    };
    let loss = cram_loss(&mut g, f, d, t, t, 0.3, 1.0, 1).unwrap();
    assert!((g.value(loss).item() - (0.7 * ce1 + 0.3 * ce2)).abs() < 1e-12);
    assert!((softmax_cross_entropy(&fused_logits, &labels, Some(&q), 1.0).unwrap() - ce1).abs() < 1e-12);
}
