//! `dapass`: data generation, source pretraining, adaptation, evaluation,
//! ablation and sensitivity sweeps.
//!
//! Every command writes its effective config into `--out` and ends with one
//! `dapass-summary` line on stdout. Exit status: 0 success, 1 bad input or
//! precondition, 2 internal invariant violation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dapass_core::config::{echo_config, load_config, TrainConfig};
use dapass_core::io::{self, Checkpoint};
use dapass_core::panosynth::{gen_source, gen_target, Domain, Split, CLASS_NAMES};
use dapass_core::pcgd::write_records;
use dapass_core::segnet::SegModel;
use dapass_core::trainer::{self, median_by, Arm, Inference, TargetEval};
use dapass_core::Error;
use log::info;

#[derive(Parser)]
#[command(name = "dapass", version, about = "Source-free panoramic segmentation adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source and target datasets.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Supervised training on the source domain.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Adapt a source checkpoint to unlabeled target images.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Source model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a checkpoint against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset split directory name.
        #[arg(long, default_value = "target-val")]
        split: String,
        /// Inference mode; by default taken from the checkpoint's run config.
        #[arg(long, value_enum)]
        inference: Option<InferenceArg>,
        /// Also write side-by-side prediction/ground-truth images.
        #[arg(long)]
        render: bool,
    },
    /// Run the ablation arms over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Add the PCGD + CRAM arm.
        #[arg(long)]
        with_cram: bool,
    },
    /// Grid over top-P and warm-up length.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,15,20")]
        top_p: Vec<f64>,
        /// Warm-up lengths as fractions of the total iterations.
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
        tau_ratio: Vec<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum InferenceArg {
    Single,
    Fused,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Tensor(_) | Error::Diverged { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn precondition(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CmdResult = Result<Vec<(String, String)>, Failure>;

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn effective_config(common: &Common) -> Result<TrainConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    echo_config(&cfg, &common.out)?;
    Ok(cfg)
}

fn require_dir(path: &Path) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(precondition(format!("missing directory {}", path.display())))
    }
}

fn load_model(path: &Path) -> Result<(SegModel<f32>, Checkpoint<f32>), Failure> {
    if !path.is_file() {
        return Err(precondition(format!("missing checkpoint {}", path.display())));
    }
    let ckpt: Checkpoint<f32> = io::load_checkpoint(path)?;
    Ok((ckpt.clone().into_model()?, ckpt))
}

fn check_model(cfg: &TrainConfig, model: &SegModel<f32>) -> Result<(), Failure> {
    if model.config() != &cfg.model {
        return Err(precondition(format!(
            "checkpoint model {:?} differs from configured model {:?}",
            model.config(),
            cfg.model
        )));
    }
    Ok(())
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn gen_data(common: &Common) -> CmdResult {
    let mut cfg = effective_config(common)?;
    if let Some(seed) = common.seed {
        cfg.scene.seed = seed;
        echo_config(&cfg, &common.out)?;
    }
    let d = &cfg.data;
    let sets = [
        (Domain::Source, Split::Train, d.source_train),
        (Domain::Source, Split::Val, d.source_val),
        (Domain::Target, Split::Train, d.target_train),
        (Domain::Target, Split::Val, d.target_val),
    ];
    let mut total = 0;
    for (domain, split, n) in sets {
        if n == 0 {
            continue;
        }
        let samples = match domain {
            Domain::Source => gen_source(&cfg.scene, split, n)?,
            Domain::Target => gen_target(&cfg.scene, split, n)?,
        };
        io::write_split(&io::split_dir(&common.out, domain, split), &samples)?;
        info!("wrote {n} {domain}-{split} samples");
        total += n;
    }
    Ok(vec![kv("samples", total)])
}

fn pretrain(common: &Common, data: &Path) -> CmdResult {
    let cfg = effective_config(common)?;
    let train_dir = io::split_dir(data, Domain::Source, Split::Train);
    require_dir(&train_dir)?;
    let train = io::read_split(&train_dir)?;
    let (model, history) = trainer::pretrain_source(&cfg, &train)?;
    let ckpt = Checkpoint::from_model(&model, "source", cfg.source.iters as u64, Some(cfg.to_toml()?));
    let path = common.out.join("source.ckpt");
    io::save_checkpoint(&ckpt, &path)?;
    trainer::write_metrics(&common.out.join("metrics.csv"), &history)?;
    let mut summary = vec![
        kv("checkpoint", path.display()),
        kv("final_loss", format!("{:.6}", history.last().map_or(f64::NAN, |r| r.loss))),
    ];
    let val_dir = io::split_dir(data, Domain::Source, Split::Val);
    if val_dir.is_dir() {
        let report = trainer::evaluate_samples(&model, &io::read_split(&val_dir)?, Inference::Single)?;
        report.write_csv(&common.out.join("source_val_iou.csv"), &CLASS_NAMES)?;
        summary.push(kv("source_val_miou", pct(report.miou)));
    }
    Ok(summary)
}

fn adapt(common: &Common, data: &Path, checkpoint: &Path) -> CmdResult {
    let cfg = effective_config(common)?;
    let (teacher, _) = load_model(checkpoint)?;
    check_model(&cfg, &teacher)?;
    let dir = io::split_dir(data, Domain::Target, Split::Train);
    require_dir(&dir)?;
    let images = io::read_unlabeled(&dir)?;
    let out = trainer::adapt(&teacher, &images, &cfg)?;
    let ckpt = Checkpoint::from_model(&out.model, "adapted", cfg.train.total_iters as u64, Some(cfg.to_toml()?));
    let path = common.out.join("adapted.ckpt");
    io::save_checkpoint(&ckpt, &path)?;
    trainer::write_metrics(&common.out.join("metrics.csv"), &out.history)?;
    if !out.records.is_empty() {
        write_records(&common.out.join("consistency.jsonl"), &out.records)?;
    }
    Ok(vec![
        kv("checkpoint", path.display()),
        kv("final_loss", format!("{:.6}", out.history.last().map_or(f64::NAN, |r| r.loss))),
    ])
}

fn eval(
    common: &Common,
    data: &Path,
    checkpoint: &Path,
    split: &str,
    inference: Option<InferenceArg>,
    render: bool,
) -> CmdResult {
    let base = effective_config(common)?;
    let (model, ckpt) = load_model(checkpoint)?;
    let run_cfg = match &ckpt.meta.config {
        Some(text) => TrainConfig::from_toml(text)?,
        None => base,
    };
    let inference = match inference {
        Some(InferenceArg::Single) => Inference::Single,
        Some(InferenceArg::Fused) => Inference::Fused {
            scale: run_cfg.cram.scale,
        },
        None => Inference::for_config(&run_cfg),
    };
    let dir = data.join(split);
    require_dir(&dir)?;
    let samples = io::read_split(&dir)?;
    let report = trainer::evaluate_samples(&model, &samples, inference)?;
    report.write_csv(&common.out.join("iou.csv"), &CLASS_NAMES)?;
    let mut stderr = std::io::stderr();
    report
        .print(&mut stderr, &CLASS_NAMES)
        .map_err(|e| precondition(e.to_string()))?;
    if render {
        let vis = common.out.join("predictions");
        fs::create_dir_all(&vis).map_err(|e| precondition(format!("{}: {e}", vis.display())))?;
        for s in &samples {
            let pred = trainer::predict(&model, &s.image, inference)?;
            io::write_comparison(&vis.join(format!("{}.ppm", s.id)), &pred, &s.label)?;
        }
    }
    Ok(vec![
        kv("miou", pct(report.miou)),
        kv("minority_miou", pct(report.minority_miou)),
        kv("majority_miou", pct(report.majority_miou)),
    ])
}

fn target_sets(data: &Path) -> Result<TargetData, Failure> {
    let train = io::split_dir(data, Domain::Target, Split::Train);
    let val = io::split_dir(data, Domain::Target, Split::Val);
    require_dir(&train)?;
    require_dir(&val)?;
    Ok(TargetData {
        train: io::read_unlabeled(&train)?,
        val: io::read_unlabeled(&val)?,
        labels: io::read_label_store(&val)?,
    })
}

struct TargetData {
    train: Vec<dapass_core::panosynth::UnlabeledImage>,
    val: Vec<dapass_core::panosynth::UnlabeledImage>,
    labels: dapass_core::panosynth::LabelStore,
}

fn ablate(common: &Common, data: &Path, checkpoint: &Path, seeds: &[u64], with_cram: bool) -> CmdResult {
    let cfg = effective_config(common)?;
    let (teacher, _) = load_model(checkpoint)?;
    check_model(&cfg, &teacher)?;
    let t = target_sets(data)?;
    let arms: Vec<Arm> = if with_cram {
        Arm::ALL.to_vec()
    } else {
        Arm::TABLE.to_vec()
    };
    let eval = TargetEval {
        images: &t.val,
        labels: &t.labels,
    };
    let results = trainer::run_arms(&teacher, &t.train, &eval, &cfg, &arms, seeds)?;
    let path = common.out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| precondition(e.to_string()))?;
    w.write_record(["arm", "seed", "miou", "minority_miou", "majority_miou"])
        .map_err(|e| precondition(e.to_string()))?;
    for r in &results {
        w.write_record([
            r.arm.name().to_string(),
            r.seed.to_string(),
            pct(r.miou),
            pct(r.minority_miou),
            pct(r.majority_miou),
        ])
        .map_err(|e| precondition(e.to_string()))?;
    }
    w.flush().map_err(|e| precondition(e.to_string()))?;
    let mut table = String::new();
    let _ = writeln!(table, "{:<26} {:>8} {:>10} {:>10}", "arm", "mIoU", "minority", "majority");
    for &arm in &arms {
        let m = |f: fn(&trainer::ArmResult) -> f64| median_by(&results, arm, f).map_or(f64::NAN, |v| v * 100.0);
        let _ = writeln!(
            table,
            "{:<26} {:>8.2} {:>10.2} {:>10.2}",
            arm.name(),
            m(|r| r.miou),
            m(|r| r.minority_miou),
            m(|r| r.majority_miou)
        );
    }
    eprint!("{table}");
    Ok(vec![kv("arms", arms.len()), kv("seeds", seeds.len()), kv("table", path.display())])
}

fn sweep(common: &Common, data: &Path, checkpoint: &Path, top_p: &[f64], tau_ratio: &[f64]) -> CmdResult {
    let cfg = effective_config(common)?;
    let (teacher, _) = load_model(checkpoint)?;
    check_model(&cfg, &teacher)?;
    let total = cfg.train.total_iters;
    let taus = tau_ratio
        .iter()
        .map(|&r| {
            if (0.0..=1.0).contains(&r) {
                Ok((r * total as f64).round() as usize)
            } else {
                Err(precondition(format!("tau ratio {r} outside [0, 1]")))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let t = target_sets(data)?;
    let eval = TargetEval {
        images: &t.val,
        labels: &t.labels,
    };
    let rows = trainer::run_sweep(&teacher, &t.train, &eval, &cfg, top_p, &taus)?;
    let path = common.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| precondition(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| precondition(e.to_string()))?;
    }
    w.flush().map_err(|e| precondition(e.to_string()))?;
    let spread = rows.iter().map(|r| r.miou).fold(f64::NEG_INFINITY, f64::max)
        - rows.iter().map(|r| r.miou).fold(f64::INFINITY, f64::min);
    Ok(vec![kv("rows", rows.len()), kv("spread", pct(spread)), kv("table", path.display())])
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("DAPASS_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| precondition(format!("DAPASS_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| precondition(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> (&'static str, CmdResult) {
    if let Err(e) = configure_threads() {
        return ("init", Err(e));
    }
    match &cli.command {
        Command::GenData { common } => ("gen-data", gen_data(common)),
        Command::Pretrain { common, data } => ("pretrain", pretrain(common, data)),
        Command::Adapt {
            common,
            data,
            checkpoint,
        } => ("adapt", adapt(common, data, checkpoint)),
        Command::Eval {
            common,
            data,
            checkpoint,
            split,
            inference,
            render,
        } => ("eval", eval(common, data, checkpoint, split, *inference, *render)),
        Command::Ablate {
            common,
            data,
            checkpoint,
            seeds,
            with_cram,
        } => ("ablate", ablate(common, data, checkpoint, seeds, *with_cram)),
        Command::Sweep {
            common,
            data,
            checkpoint,
            top_p,
            tau_ratio,
        } => ("sweep", sweep(common, data, checkpoint, top_p, tau_ratio)),
    }
}

fn quote(v: &str) -> String {
    if v.contains([' ', '"', '=']) {
        format!("{v:?}")
    } else {
        v.to_string()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (name, result) = run(&cli);
    match result {
        Ok(fields) => {
            let rest: String = fields.iter().map(|(k, v)| format!(" {k}={}", quote(v))).collect();
            println!("dapass-summary command={name} status=ok{rest}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            println!(
                "dapass-summary command={name} status=error exit={} message={}",
                f.code,
                quote(&f.message)
            );
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dapass_tensor::TensorError;

    #[test]
    fn internal_failures_exit_two() {
        let diverged = Failure::from(Error::Diverged { iteration: 3, loss: f64::NAN });
        assert_eq!(diverged.code, 2);
        let tensor = Failure::from(Error::Tensor(TensorError::DataLength { len: 1, shape: vec![2] }));
        assert_eq!(tensor.code, 2);
        assert_eq!(Failure::from(Error::Config("bad".into())).code, 1);
        assert_eq!(Failure::from(Error::Format("bad".into())).code, 1);
    }
}
