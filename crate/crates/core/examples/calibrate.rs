//! Runs the ablation arms on the synthetic benchmark and prints per-class detail.
//!
//! Usage: `calibrate [config.toml] [all|none|arm,arm..] [seeds]`. The source
//! model is cached next to the config as `<config>.teacher.ckpt`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use dapass_core::config::{load_config, TrainConfig};
use dapass_core::eval::ConfusionMatrix;
use dapass_core::io::{load_checkpoint, save_checkpoint, Checkpoint};
use dapass_core::panosynth::{gen_source, gen_target, withhold_labels, Split};
use dapass_core::trainer::{self, Arm, Inference};

fn pct(v: &[Option<f64>]) -> String {
    v.iter().map(|x| format!("{:5.1}", x.unwrap_or(f64::NAN) * 100.0)).collect::<Vec<_>>().join(" ")
}

fn main() -> dapass_core::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let (cfg, cache) = match args.get(1) {
        Some(p) => (load_config(Path::new(p))?, PathBuf::from(format!("{p}.teacher.ckpt"))),
        None => (TrainConfig::default(), PathBuf::from("/tmp/default.teacher.ckpt")),
    };
    let src_val = gen_source(&cfg.scene, Split::Val, cfg.data.source_val)?;
    let tgt_train_full = gen_target(&cfg.scene, Split::Train, cfg.data.target_train)?;
    let (tgt_train, train_store) = withhold_labels(tgt_train_full);
    let (tgt_val, store) = withhold_labels(gen_target(&cfg.scene, Split::Val, cfg.data.target_val)?);
    let teacher = if cache.is_file() {
        load_checkpoint::<f32>(&cache)?.into_model()?
    } else {
        let t0 = Instant::now();
        let src_train = gen_source(&cfg.scene, Split::Train, cfg.data.source_train)?;
        let (teacher, hist) = trainer::pretrain_source(&cfg, &src_train)?;
        eprintln!("pretrain {:?} final loss {:.4}", t0.elapsed(), hist.last().unwrap().loss);
        save_checkpoint(&Checkpoint::from_model(&teacher, "source", 0, None), &cache)?;
        teacher
    };
    let sv = trainer::evaluate_samples(&teacher, &src_val, Inference::Single)?;
    let tv = trainer::evaluate_target(&teacher, &tgt_val, &store, Inference::Single)?;
    eprintln!("source val {:.2} target {:.2} (min {:.2})", sv.miou * 100.0, tv.miou * 100.0, tv.minority_miou * 100.0);
    eprintln!("                     classes  ceil chai door flor sofa tabl wall wind");
    eprintln!("{:>28} {}", "source val", pct(&sv.per_class));
    eprintln!("{:>28} {}", "Source-Only", pct(&tv.per_class));

    let arms: Vec<Arm> = match args.get(2).map(String::as_str) {
        Some("none") => vec![],
        None | Some("all") => Arm::ALL.to_vec(),
        Some(list) => list
            .split(',')
            .map(|a| match a {
                "unweighted" => Arm::Unweighted,
                "noa" => Arm::WithoutPathA,
                "nob" => Arm::WithoutPathB,
                "pcgd" => Arm::PcgdFull,
                "cram" => Arm::PcgdCram,
                other => panic!("unknown arm {other}"),
            })
            .collect(),
    };
    let seeds: Vec<u64> = args.get(3).map_or(vec![0], |s| s.split(',').map(|x| x.parse().unwrap()).collect());
    let pool = trainer::prepare_targets(&teacher, &tgt_train, cfg.pcgd.confidence_floor)?;
    for &seed in &seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        let t0 = Instant::now();
        let (theta_tau, _) = trainer::warmup(&pool, &c)?;
        let records = trainer::score_targets(&pool, &theta_tau)?;
        let split = trainer::split_targets(&pool, &records, c.pcgd.top_p)?;
        // Pseudo-label quality of each half of the split (diagnostic only).
        for (name, idx) in [("consistent PL", &split.consistent), ("inconsistent PL", &split.inconsistent)] {
            let mut cm = ConfusionMatrix::new(8);
            for &i in idx.iter() {
                let pred = &pool.items[i].pseudo.labels;
                let mut gt = train_store.get(&pool.ids[i]).unwrap().clone();
                for (g, &p) in gt.data.iter_mut().zip(&pred.data) {
                    if p == 255 {
                        *g = 255;
                    }
                }
                cm.accumulate(pred, &gt)?;
            }
            let r = dapass_core::eval::iou_report(&cm, &dapass_core::panosynth::MINORITY_CLASSES);
            eprintln!("{:>28} {}  mIoU {:.2}", name, pct(&r.per_class), r.miou * 100.0);
        }
        eprintln!("seed {seed} split {:?}", t0.elapsed());
        for &arm in &arms {
            let t0 = Instant::now();
            let ac = arm.configure(&c);
            let s = if matches!(arm, Arm::Unweighted) { None } else { Some(&split) };
            let out = trainer::adapt_prepared(&pool, s, &ac)?;
            let r = trainer::evaluate_target(&out.model, &tgt_val, &store, Inference::for_config(&ac))?;
            eprintln!(
                "{:>28} {}  mIoU {:.2} min {:.2} ({:.0?})",
                format!("{} s{seed}", arm.name()),
                pct(&r.per_class),
                r.miou * 100.0,
                r.minority_miou * 100.0,
                t0.elapsed()
            );
        }
    }
    Ok(())
}
