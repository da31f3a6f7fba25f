use std::sync::OnceLock;

use dapass_core::config::TrainConfig;
use dapass_core::optim::poly_lr;
use dapass_core::panosynth::{gen_source, gen_target, withhold_labels, LabelStore, Split, UnlabeledImage};
use dapass_core::segnet::SegModel;
use dapass_core::trainer::*;

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.source.iters = 40;
    cfg.source.batch = 4;
    cfg.train.total_iters = 12;
    cfg.train.batch = 2;
    cfg.train.metrics_every = 1;
    cfg.train.base_lr = 6e-4;
    cfg.pcgd.tau = 4;
    cfg.pcgd.top_p = 25.0;
    cfg
}

struct Fixture {
    teacher: SegModel<f32>,
    images: Vec<UnlabeledImage>,
    labels: LabelStore,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = small_config();
        let src = gen_source(&cfg.scene, Split::Train, 16).unwrap();
        let (teacher, _) = pretrain_source(&cfg, &src).unwrap();
        let (images, labels) = withhold_labels(gen_target(&cfg.scene, Split::Train, 8).unwrap());
        Fixture { teacher, images, labels }
    })
}

#[test]
fn pretraining_is_deterministic() {
    let mut cfg = small_config();
    cfg.source.iters = 5;
    let src = gen_source(&cfg.scene, Split::Train, 6).unwrap();
    let (a, ha) = pretrain_source(&cfg, &src).unwrap();
    let (b, hb) = pretrain_source(&cfg, &src).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(ha.last().unwrap().loss, hb.last().unwrap().loss);
    assert_eq!(ha.len(), 5);
}

#[test]
fn adaptation_is_bit_reproducible() {
    let f = fixture();
    let cfg = small_config();
    let a = adapt(&f.teacher, &f.images, &cfg).unwrap();
    let b = adapt(&f.teacher, &f.images, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.records, b.records);
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(adapt(&f.teacher, &f.images, &other).unwrap().history, a.history);
}

#[test]
fn lr_trace_follows_poly_schedule() {
    let f = fixture();
    let cfg = small_config();
    let out = adapt(&f.teacher, &f.images, &cfg).unwrap();
    let (warm, main): (Vec<_>, Vec<_>) = out.history.iter().partition(|r| r.phase == "warmup");
    assert_eq!(warm.len(), cfg.pcgd.tau);
    assert_eq!(main.len(), cfg.train.total_iters);
    for r in warm {
        assert_eq!(r.lr, poly_lr(cfg.train.base_lr, r.iteration, cfg.pcgd.tau, 0.9).unwrap());
    }
    for r in &main {
        assert_eq!(r.lr, poly_lr(cfg.train.base_lr, r.iteration, cfg.train.total_iters, 0.9).unwrap());
    }
    // Paths alternate, starting with A.
    for r in &main {
        let expect = if r.iteration % 2 == 0 { "path_a" } else { "path_b" };
        assert_eq!(r.phase, expect);
    }
    let last = main.last().unwrap();
    assert_eq!(last.path_a_steps, 6);
    assert_eq!(last.path_b_steps + last.skipped_steps, 6);
}

#[test]
fn losses_are_finite() {
    let f = fixture();
    for arm in [Arm::Unweighted, Arm::PcgdFull, Arm::PcgdCram] {
        let cfg = arm.configure(&small_config());
        let out = adapt(&f.teacher, &f.images, &cfg).unwrap();
        for r in &out.history {
            assert!(r.loss.is_finite() || (r.phase == "path_b" && r.skipped_steps > 0), "{arm:?} {r:?}");
            if let Some(inner) = r.inner_loss {
                assert!(inner.is_finite());
            }
        }
    }
}

#[test]
fn adaptation_never_reads_target_labels() {
    let f = fixture();
    let before = f.labels.reads();
    for arm in [Arm::Unweighted, Arm::PcgdCram] {
        adapt(&f.teacher, &f.images, &arm.configure(&small_config())).unwrap();
    }
    assert_eq!(f.labels.reads(), before);
}

#[test]
fn evaluation_reads_each_label_once() {
    let cfg = small_config();
    let (images, labels) = withhold_labels(gen_target(&cfg.scene, Split::Val, 3).unwrap());
    let r = evaluate_target(&fixture().teacher, &images, &labels, Inference::Single).unwrap();
    assert_eq!(labels.reads(), 3);
    assert!((0.0..=1.0).contains(&r.miou));
}

#[test]
fn cram_switch_changes_the_loss_path() {
    let f = fixture();
    let base = small_config();
    let plain = adapt(&f.teacher, &f.images, &Arm::PcgdFull.configure(&base)).unwrap();
    let cram = adapt(&f.teacher, &f.images, &Arm::PcgdCram.configure(&base)).unwrap();
    // Warm-up is shared; the adaptation losses differ.
    let warm = |h: &[MetricRow]| h.iter().filter(|r| r.phase == "warmup").cloned().collect::<Vec<_>>();
    assert_eq!(warm(&plain.history), warm(&cram.history));
    let first = |h: &[MetricRow]| h.iter().find(|r| r.phase == "path_a").unwrap().loss;
    assert_ne!(first(&plain.history), first(&cram.history));
    assert_eq!(Inference::for_config(&Arm::PcgdFull.configure(&base)), Inference::Single);
    assert_eq!(Inference::for_config(&Arm::PcgdCram.configure(&base)), Inference::Fused { scale: 2 });
}

#[test]
fn arms_configure_expected_switches() {
    let base = TrainConfig::default();
    let flags = |a: Arm| {
        let c = a.configure(&base);
        (c.pcgd.enabled, c.pcgd.path_a, c.pcgd.path_b, c.cram.enabled)
    };
    assert_eq!(flags(Arm::Unweighted), (false, true, true, false));
    assert_eq!(flags(Arm::WithoutPathA), (true, false, true, false));
    assert_eq!(flags(Arm::WithoutPathB), (true, true, false, false));
    assert_eq!(flags(Arm::PcgdFull), (true, true, true, false));
    assert_eq!(flags(Arm::PcgdCram), (true, true, true, true));
    let names: Vec<_> = Arm::TABLE.iter().map(|a| a.name()).collect();
    assert_eq!(names, ["Source-Only", "Unweighted Pseudo-Labels", "w/o Path A", "w/o Path B", "PCGD"]);
}

#[test]
fn single_path_arms_only_take_their_path() {
    let f = fixture();
    for (arm, phase) in [(Arm::WithoutPathA, "path_b"), (Arm::WithoutPathB, "path_a")] {
        let out = adapt(&f.teacher, &f.images, &arm.configure(&small_config())).unwrap();
        assert!(out.history.iter().filter(|r| r.phase != "warmup").all(|r| r.phase == phase));
    }
    let out = adapt(&f.teacher, &f.images, &Arm::Unweighted.configure(&small_config())).unwrap();
    assert!(out.history.iter().all(|r| r.phase == "self_train"));
    assert!(out.records.is_empty());
}

#[test]
fn median_over_seeds() {
    let r = |seed, miou| ArmResult {
        arm: Arm::PcgdFull,
        seed,
        miou,
        minority_miou: 0.0,
        majority_miou: 0.0,
    };
    let rs = [r(0, 0.5), r(1, 0.2), r(2, 0.9)];
    assert_eq!(median_by(&rs, Arm::PcgdFull, |x| x.miou), Some(0.5));
    assert_eq!(median_by(&rs[..2], Arm::PcgdFull, |x| x.miou), Some(0.35));
    assert_eq!(median_by(&rs, Arm::SourceOnly, |x| x.miou), None);
}

#[test]
fn metrics_csv_has_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    let out = adapt(&fixture().teacher, &fixture().images, &small_config()).unwrap();
    write_metrics(&path, &out.history).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("iteration,phase,loss"));
    assert_eq!(lines.count(), out.history.len());
}
