//! Source pretraining, the self-training warm-up used for scoring, the
//! adaptation loop, inference, and the ablation/sweep runners.
//!
//! Adaptation only ever sees [`UnlabeledImage`]s; target ground truth is
//! reachable solely through a [`LabelStore`] passed to evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use dapass_tensor::{bilinear_resize, Graph, ResizeTarget, Tensor, Var};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::TrainConfig;
use crate::cram::{self, CramConfig, CramItem};
use crate::error::{Error, Result};
use crate::eval::{iou_report, ConfusionMatrix, IouReport};
use crate::optim::{poly_lr, AdamW, Optimizer, StepOutcome};
use crate::panosynth::{pixel_shares, LabelMap, LabelStore, Sample, UnlabeledImage, MINORITY_CLASSES};
use crate::params::{Grads, ParamSnapshot, ParamStore};
use crate::pcgd::{
    self, bilevel_step, build_class_pools, descriptor, neighbor_complete, ClassPool, ConsistencyRecord, Labeled,
    NeighborIndex, PoolCandidate,
};
use crate::segnet::{Bound, SegModel};

/// Loss values above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e3;

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub phase: String,
    pub loss: f64,
    pub inner_loss: Option<f64>,
    pub lr: f64,
    pub path_a_steps: usize,
    pub path_b_steps: usize,
    pub skipped_steps: usize,
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const WARMUP_STREAM: u64 = 1;
const ADAPT_STREAM: u64 = 2;
const SOURCE_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug)]
enum LossMode<'a> {
    Full,
    Cram(&'a CramConfig),
}

/// Full-image cross entropy with logits upsampled to input resolution.
fn full_image_loss(model: &SegModel<f32>, g: &mut Graph<f32>, bound: &Bound, items: &[CramItem<'_>]) -> Result<Var> {
    let images: Vec<&Tensor<f32>> = items.iter().map(|i| i.image).collect();
    let x = g.constant(Tensor::stack(&images)?);
    let out = model.forward(g, bound, x)?;
    let (_, _, h, w) = images[0].dims4()?;
    let up = g.resize(out.logits, h, w)?;
    let labels: Vec<u8> = items.iter().flat_map(|i| i.labels.data.iter().copied()).collect();
    let weights: Option<Vec<f32>> = if items.iter().all(|i| i.weights.is_some()) {
        Some(items.iter().flat_map(|i| i.weights.unwrap().iter().copied()).collect())
    } else {
        None
    };
    Ok(g.cross_entropy(up, &labels, weights.as_deref(), 1.0)?)
}

fn loss_and_grads(
    arch: &SegModel<f32>,
    params: &ParamStore<f32>,
    items: &[CramItem<'_>],
    mode: LossMode<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Grads<f32>)> {
    let mut g = Graph::new();
    let bound = arch.bind_params(&mut g, params, true);
    let loss = match mode {
        LossMode::Full => full_image_loss(arch, &mut g, &bound, items)?,
        LossMode::Cram(c) => cram::batch_loss(arch, &mut g, &bound, items, c, rng)?,
    };
    let value = g.value(loss).item() as f64;
    g.backward(loss)?;
    Ok((value, arch.grads(&g, &bound)))
}

fn check_loss(iteration: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Diverged { iteration, loss });
    }
    Ok(())
}

fn item<'a>(l: &'a Labeled, weighted: bool) -> CramItem<'a> {
    CramItem {
        image: &l.image,
        labels: &l.pseudo.labels,
        weights: weighted.then_some(&l.pseudo.confidence[..]),
    }
}

fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.gen_range(0..n)).collect()
}

fn should_log(t: usize, total: usize, every: usize) -> bool {
    t % every == 0 || t + 1 == total
}

/// Supervised pretraining on labelled source images; returns the frozen
/// source model and its loss history.
pub fn pretrain_source(cfg: &TrainConfig, train: &[Sample]) -> Result<(SegModel<f32>, Vec<MetricRow>)> {
    if train.is_empty() {
        return Err(Error::Invalid("source training set is empty".into()));
    }
    let mut model = SegModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let arch = model.clone();
    let mut opt = AdamW::new(cfg.train.adamw(), model.params());
    let mut rng = stream(cfg.seed, SOURCE_STREAM);
    let s = &cfg.source;
    let mut history = Vec::new();
    for t in 0..s.iters {
        let lr = poly_lr(s.lr, t, s.iters, cfg.train.poly_power)?;
        let idx = sample_indices(&mut rng, train.len(), s.batch);
        let items: Vec<CramItem<'_>> = idx
            .iter()
            .map(|&i| CramItem {
                image: &train[i].image,
                labels: &train[i].label,
                weights: None,
            })
            .collect();
        let (loss, grads) = loss_and_grads(&arch, model.params(), &items, LossMode::Full, &mut rng)?;
        check_loss(t, loss)?;
        opt.step(model.params_mut(), &grads, lr)?;
        if should_log(t, s.iters, cfg.train.metrics_every) {
            debug!("source iter {t}: loss {loss:.4} lr {lr:.2e}");
            history.push(MetricRow {
                iteration: t,
                phase: "source".into(),
                loss,
                inner_loss: None,
                lr,
                path_a_steps: 0,
                path_b_steps: 0,
                skipped_steps: 0,
            });
        }
    }
    Ok((model, history))
}

/// Target images with teacher pseudo-labels and features, computed once.
pub struct TargetPool {
    pub teacher: SegModel<f32>,
    pub ids: Vec<String>,
    pub items: Vec<Labeled>,
    pub features: Vec<Tensor<f32>>,
}

pub fn prepare_targets(teacher: &SegModel<f32>, images: &[UnlabeledImage], floor: f64) -> Result<TargetPool> {
    if images.is_empty() {
        return Err(Error::Invalid("no target images".into()));
    }
    let outs: Vec<pcgd::TeacherOutput> = images
        .par_iter()
        .map(|im| pcgd::teacher_pass(teacher, &im.image, floor as f32))
        .collect::<Result<_>>()?;
    let mut items = Vec::with_capacity(images.len());
    let mut features = Vec::with_capacity(images.len());
    for (im, out) in images.iter().zip(outs) {
        items.push(Labeled {
            image: im.image.clone(),
            pseudo: out.pseudo,
        });
        features.push(out.features);
    }
    Ok(TargetPool {
        teacher: teacher.clone(),
        ids: images.iter().map(|i| i.id.clone()).collect(),
        items,
        features,
    })
}

/// `Θ^τ` from τ iterations of unweighted pseudo-label self-training from the teacher.
pub fn warmup(pool: &TargetPool, cfg: &TrainConfig) -> Result<(ParamSnapshot<f32>, Vec<MetricRow>)> {
    let tau = cfg.pcgd.tau;
    let arch = &pool.teacher;
    let mut params = arch.params().clone();
    let mut opt = AdamW::new(cfg.train.adamw(), &params);
    let mut rng = stream(cfg.seed, WARMUP_STREAM);
    let mut history = Vec::new();
    for t in 0..tau {
        let lr = poly_lr(cfg.train.base_lr, t, tau, cfg.train.poly_power)?;
        let idx = sample_indices(&mut rng, pool.items.len(), cfg.train.batch);
        let items: Vec<_> = idx.iter().map(|&i| item(&pool.items[i], false)).collect();
        let (loss, grads) = loss_and_grads(arch, &params, &items, LossMode::Full, &mut rng)?;
        check_loss(t, loss)?;
        opt.step(&mut params, &grads, lr)?;
        if should_log(t, tau, cfg.train.metrics_every) {
            history.push(MetricRow {
                iteration: t,
                phase: "warmup".into(),
                loss,
                inner_loss: None,
                lr,
                path_a_steps: 0,
                path_b_steps: 0,
                skipped_steps: 0,
            });
        }
    }
    Ok((
        ParamSnapshot {
            tag: "theta_tau".into(),
            iteration: tau as u64,
            params,
        },
        history,
    ))
}

/// Consistency records in pool order, plus the split as pool indices.
#[derive(Clone, Debug)]
pub struct SplitState {
    pub records: Vec<ConsistencyRecord>,
    pub consistent: Vec<usize>,
    pub inconsistent: Vec<usize>,
}

/// Raw consistency records (unsplit), in pool order.
pub fn score_targets(pool: &TargetPool, theta_tau: &ParamSnapshot<f32>) -> Result<Vec<ConsistencyRecord>> {
    let m_tau = pool.teacher.with_snapshot(theta_tau)?;
    let inputs: Vec<(&str, &Tensor<f32>)> = pool
        .ids
        .iter()
        .zip(&pool.items)
        .map(|(id, l)| (id.as_str(), &l.image))
        .collect();
    pcgd::score_all(&pool.teacher, &m_tau, inputs)
}

pub fn split_targets(pool: &TargetPool, records: &[ConsistencyRecord], top_p: f64) -> Result<SplitState> {
    let mut records = records.to_vec();
    let (con, incon) = pcgd::split_sets(&mut records, top_p)?;
    let pos: BTreeMap<&str, usize> = pool.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let to_idx = |ids: &[String]| ids.iter().map(|id| pos[id.as_str()]).collect::<Vec<_>>();
    let consistent = to_idx(&con);
    if consistent.is_empty() {
        return Err(Error::EmptyConsistentSet(format!("top-P {top_p}% of {} images", records.len())));
    }
    Ok(SplitState {
        consistent,
        inconsistent: to_idx(&incon),
        records,
    })
}

/// Everything Path A and Path B draw from.
struct PcgdBank {
    con: Vec<Labeled>,
    pools: BTreeMap<u8, ClassPool>,
    /// Neighbor (index into `con`) for every pool item.
    neighbor: Vec<usize>,
    /// Pseudo-label classes of every pool item.
    classes: Vec<BTreeSet<u8>>,
    shares: Vec<f64>,
}

fn build_bank(pool: &TargetPool, split: &SplitState, cfg: &TrainConfig) -> Result<PcgdBank> {
    let classes = pool.teacher.classes();
    let con: Vec<Labeled> = split.consistent.iter().map(|&i| pool.items[i].clone()).collect();
    let candidates: Vec<PoolCandidate<'_>> = split
        .consistent
        .iter()
        .map(|&i| PoolCandidate {
            record: &split.records[i],
            labels: &pool.items[i].pseudo.labels,
        })
        .collect();
    let pools = build_class_pools(&candidates, cfg.pcgd.top_k)?;
    let descs: Vec<Vec<f64>> = pool
        .items
        .par_iter()
        .zip(&pool.features)
        .map(|(l, f)| descriptor(f, &l.pseudo.labels, classes))
        .collect::<Result<_>>()?;
    let mut index = NeighborIndex::new();
    for (k, &i) in split.consistent.iter().enumerate() {
        index.insert(pool.ids[i].clone(), k, descs[i].clone())?;
    }
    let neighbor = descs
        .iter()
        .map(|d| pcgd::retrieve_neighbor(d, &index).map(|(_, k)| k))
        .collect::<Result<_>>()?;
    let shares = pixel_shares(con.iter().map(|l| &l.pseudo.labels), classes);
    debug!(
        "pools: {:?}",
        pools.iter().map(|(c, p)| (*c, p.entries.len())).collect::<Vec<_>>()
    );
    Ok(PcgdBank {
        con,
        pools,
        neighbor,
        classes: pool.items.iter().map(|l| l.pseudo.labels.classes()).collect(),
        shares,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DenoisePath {
    A,
    B,
}

/// Result of an adaptation run.
pub struct AdaptOutput {
    pub model: SegModel<f32>,
    pub history: Vec<MetricRow>,
    pub records: Vec<ConsistencyRecord>,
}

/// Full adaptation from the frozen source model on unlabeled target images.
pub fn adapt(teacher: &SegModel<f32>, target: &[UnlabeledImage], cfg: &TrainConfig) -> Result<AdaptOutput> {
    cfg.validate()?;
    let pool = prepare_targets(teacher, target, cfg.pcgd.confidence_floor)?;
    if !cfg.pcgd.enabled {
        return adapt_prepared(&pool, None, cfg);
    }
    let (theta_tau, mut warm_history) = warmup(&pool, cfg)?;
    let records = score_targets(&pool, &theta_tau)?;
    let split = split_targets(&pool, &records, cfg.pcgd.top_p)?;
    info!(
        "split: {} consistent / {} inconsistent",
        split.consistent.len(),
        split.inconsistent.len()
    );
    let mut out = adapt_prepared(&pool, Some(&split), cfg)?;
    warm_history.append(&mut out.history);
    out.history = warm_history;
    Ok(out)
}

/// Second phase from the teacher weights: alternating Path A / Path B with a
/// split, or plain pseudo-label self-training without one.
pub fn adapt_prepared(pool: &TargetPool, split: Option<&SplitState>, cfg: &TrainConfig) -> Result<AdaptOutput> {
    let arch = &pool.teacher;
    let mut params = arch.params().clone();
    let mut opt = AdamW::new(cfg.train.adamw(), &params);
    let mut rng = stream(cfg.seed, ADAPT_STREAM);
    let total = cfg.train.total_iters;
    let batch = cfg.train.batch;
    let mode = if cfg.cram.enabled {
        LossMode::Cram(&cfg.cram)
    } else {
        LossMode::Full
    };
    let pcgd_on = cfg.pcgd.enabled && split.is_some();
    let weighted = pcgd_on && cfg.pcgd.weighted;
    let bank = match split.filter(|_| pcgd_on) {
        Some(s) => Some(build_bank(pool, s, cfg)?),
        None => None,
    };
    let (mut a_steps, mut b_steps, mut skipped) = (0, 0, 0);
    let mut history = Vec::new();
    for t in 0..total {
        let lr = poly_lr(cfg.train.base_lr, t, total, cfg.train.poly_power)?;
        let mut inner_loss = None;
        let (phase, loss, outcome) = match &bank {
            None => {
                let idx = sample_indices(&mut rng, pool.items.len(), batch);
                let items: Vec<_> = idx.iter().map(|&i| item(&pool.items[i], false)).collect();
                let (loss, grads) = loss_and_grads(arch, &params, &items, mode, &mut rng)?;
                check_loss(t, loss)?;
                ("self_train", loss, opt.step(&mut params, &grads, lr)?)
            }
            Some(bank) => {
                let path = match (cfg.pcgd.path_a, cfg.pcgd.path_b) {
                    (true, true) if t % 2 == 0 => DenoisePath::A,
                    (true, true) => DenoisePath::B,
                    (true, false) => DenoisePath::A,
                    _ => DenoisePath::B,
                };
                match path {
                    DenoisePath::A => {
                        let noisy = split.map(|s| &s.inconsistent[..]).filter(|s| !s.is_empty());
                        let idx: Vec<usize> = match noisy {
                            Some(ids) => (0..batch).map(|_| *ids.choose(&mut rng).unwrap()).collect(),
                            None => sample_indices(&mut rng, pool.items.len(), batch),
                        };
                        let completed: Vec<Labeled> = idx
                            .iter()
                            .map(|&i| {
                                neighbor_complete(
                                    &bank.con[bank.neighbor[i]],
                                    &bank.classes[i],
                                    &bank.pools,
                                    &bank.con,
                                    &mut rng,
                                )
                            })
                            .collect::<Result<_>>()?;
                        let inner_items: Vec<_> = idx.iter().map(|&i| item(&pool.items[i], weighted)).collect();
                        let outer_items: Vec<_> = completed.iter().map(|l| item(l, weighted)).collect();
                        let mut rng_in = ChaCha8Rng::seed_from_u64(rng.gen());
                        let mut rng_out = ChaCha8Rng::seed_from_u64(rng.gen());
                        let out = bilevel_step(
                            &mut params,
                            |p| loss_and_grads(arch, p, &inner_items, mode, &mut rng_in),
                            |p| loss_and_grads(arch, p, &outer_items, mode, &mut rng_out),
                            cfg.pcgd.alpha,
                            lr,
                            &mut opt,
                        )?;
                        check_loss(t, out.outer_loss)?;
                        inner_loss = Some(out.inner_loss);
                        a_steps += 1;
                        ("path_a", out.outer_loss, out.step)
                    }
                    DenoisePath::B => {
                        let idx = sample_indices(&mut rng, pool.items.len(), batch);
                        let mut augmented = Vec::with_capacity(batch);
                        for &i in &idx {
                            match pcgd::balance_sample(
                                &pool.items[i],
                                &bank.pools,
                                &bank.con,
                                &MINORITY_CLASSES,
                                &bank.shares,
                                &mut rng,
                            )? {
                                Some((l, _)) => augmented.push(l),
                                None => break,
                            }
                        }
                        if augmented.len() < batch {
                            skipped += 1;
                            ("path_b", f64::NAN, StepOutcome::Skipped)
                        } else {
                            let items: Vec<_> = augmented.iter().map(|l| item(l, weighted)).collect();
                            let (loss, grads) = loss_and_grads(arch, &params, &items, mode, &mut rng)?;
                            check_loss(t, loss)?;
                            b_steps += 1;
                            ("path_b", loss, opt.step(&mut params, &grads, lr)?)
                        }
                    }
                }
            }
        };
        if outcome == StepOutcome::Skipped && phase != "path_b" {
            skipped += 1;
        }
        if should_log(t, total, cfg.train.metrics_every) {
            debug!("adapt iter {t} {phase}: loss {loss:.4} lr {lr:.2e}");
            history.push(MetricRow {
                iteration: t,
                phase: phase.into(),
                loss,
                inner_loss,
                lr,
                path_a_steps: a_steps,
                path_b_steps: b_steps,
                skipped_steps: skipped,
            });
        }
    }
    let mut model = arch.clone();
    *model.params_mut() = params;
    Ok(AdaptOutput {
        model,
        history,
        records: split.map(|s| s.records.clone()).unwrap_or_default(),
    })
}

/// How a model turns an image into full-resolution logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Inference {
    /// One pass at native resolution.
    Single,
    /// Whole-image context/detail fusion at the given scale.
    Fused { scale: usize },
}

impl Inference {
    pub fn for_config(cfg: &TrainConfig) -> Self {
        if cfg.cram.enabled {
            Inference::Fused { scale: cfg.cram.scale }
        } else {
            Inference::Single
        }
    }
}

pub fn predict_logits(model: &SegModel<f32>, image: &Tensor<f32>, inference: Inference) -> Result<Tensor<f32>> {
    match inference {
        Inference::Single => {
            let (_, logits, _) = model.infer(image)?;
            let (_, _, h, w) = image.dims4()?;
            Ok(bilinear_resize(&logits, ResizeTarget::Shape(h, w))?)
        }
        Inference::Fused { scale } => cram::predict_fused(model, image, scale),
    }
}

pub fn predict(model: &SegModel<f32>, image: &Tensor<f32>, inference: Inference) -> Result<LabelMap> {
    let logits = predict_logits(model, image, inference)?;
    Ok(pcgd::argmax_labels(&logits, f32::NEG_INFINITY)?.labels)
}

/// mIoU report over `(image, ground truth)` pairs.
pub fn evaluate_pairs<'a>(
    model: &SegModel<f32>,
    pairs: &[(&'a Tensor<f32>, &'a LabelMap)],
    inference: Inference,
) -> Result<IouReport> {
    let classes = model.classes();
    let cm = pairs
        .par_iter()
        .map(|(x, gt)| {
            let mut cm = ConfusionMatrix::new(classes);
            cm.accumulate(&predict(model, x, inference)?, gt)?;
            Ok::<_, Error>(cm)
        })
        .try_reduce(
            || ConfusionMatrix::new(classes),
            |mut a, b| {
                a.merge(&b);
                Ok(a)
            },
        )?;
    Ok(iou_report(&cm, &MINORITY_CLASSES))
}

pub fn evaluate_samples(model: &SegModel<f32>, samples: &[Sample], inference: Inference) -> Result<IouReport> {
    let pairs: Vec<_> = samples.iter().map(|s| (&s.image, &s.label)).collect();
    evaluate_pairs(model, &pairs, inference)
}

/// Evaluates on target images, reading ground truth from the label store.
pub fn evaluate_target(
    model: &SegModel<f32>,
    images: &[UnlabeledImage],
    labels: &LabelStore,
    inference: Inference,
) -> Result<IouReport> {
    let pairs = images
        .iter()
        .map(|im| {
            labels
                .get(&im.id)
                .map(|l| (&im.image, l))
                .ok_or_else(|| Error::Invalid(format!("no ground truth for {}", im.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_pairs(model, &pairs, inference)
}

/// Ablation arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Arm {
    SourceOnly,
    Unweighted,
    WithoutPathA,
    WithoutPathB,
    PcgdFull,
    PcgdCram,
}

impl Arm {
    /// The denoising ablation suite.
    pub const TABLE: [Arm; 5] = [
        Arm::SourceOnly,
        Arm::Unweighted,
        Arm::WithoutPathA,
        Arm::WithoutPathB,
        Arm::PcgdFull,
    ];
    pub const ALL: [Arm; 6] = [
        Arm::SourceOnly,
        Arm::Unweighted,
        Arm::WithoutPathA,
        Arm::WithoutPathB,
        Arm::PcgdFull,
        Arm::PcgdCram,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::SourceOnly => "Source-Only",
            Arm::Unweighted => "Unweighted Pseudo-Labels",
            Arm::WithoutPathA => "w/o Path A",
            Arm::WithoutPathB => "w/o Path B",
            Arm::PcgdFull => "PCGD",
            Arm::PcgdCram => "PCGD + CRAM",
        }
    }

    /// The arm's configuration derived from `base`.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.cram.enabled = self == Arm::PcgdCram;
        cfg.pcgd.enabled = !matches!(self, Arm::SourceOnly | Arm::Unweighted);
        cfg.pcgd.path_a = self != Arm::WithoutPathA;
        cfg.pcgd.path_b = self != Arm::WithoutPathB;
        cfg
    }

    fn uses_split(self) -> bool {
        !matches!(self, Arm::SourceOnly | Arm::Unweighted)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub miou: f64,
    pub minority_miou: f64,
    pub majority_miou: f64,
}

/// Labeled target validation data for the runners.
pub struct TargetEval<'a> {
    pub images: &'a [UnlabeledImage],
    pub labels: &'a LabelStore,
}

/// Runs `arms` for each seed; the warm-up and split are shared by the arms of a seed.
pub fn run_arms(
    teacher: &SegModel<f32>,
    train: &[UnlabeledImage],
    val: &TargetEval<'_>,
    base: &TrainConfig,
    arms: &[Arm],
    seeds: &[u64],
) -> Result<Vec<ArmResult>> {
    base.validate()?;
    let pool = prepare_targets(teacher, train, base.pcgd.confidence_floor)?;
    let mut results = Vec::new();
    for &seed in seeds {
        let mut seed_cfg = base.clone();
        seed_cfg.seed = seed;
        let split = if arms.iter().any(|a| a.uses_split()) {
            let (theta_tau, _) = warmup(&pool, &seed_cfg)?;
            let records = score_targets(&pool, &theta_tau)?;
            Some(split_targets(&pool, &records, base.pcgd.top_p)?)
        } else {
            None
        };
        for &arm in arms {
            let cfg = arm.configure(&seed_cfg);
            let (model, inference) = match arm {
                Arm::SourceOnly => (teacher.clone(), Inference::Single),
                _ => {
                    let s = if arm.uses_split() { split.as_ref() } else { None };
                    (adapt_prepared(&pool, s, &cfg)?.model, Inference::for_config(&cfg))
                }
            };
            let r = evaluate_target(&model, val.images, val.labels, inference)?;
            info!("seed {seed} {}: mIoU {:.2}", arm.name(), r.miou * 100.0);
            results.push(ArmResult {
                arm,
                seed,
                miou: r.miou,
                minority_miou: r.minority_miou,
                majority_miou: r.majority_miou,
            });
        }
    }
    Ok(results)
}

/// Median over seeds of one arm's metric.
pub fn median_by(results: &[ArmResult], arm: Arm, f: impl Fn(&ArmResult) -> f64) -> Option<f64> {
    let mut v: Vec<f64> = results.iter().filter(|r| r.arm == arm).map(f).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub top_p: f64,
    pub tau: usize,
    pub miou: f64,
    pub minority_miou: f64,
}

/// Grid over top-P and warm-up length; each warm-up is shared across P.
pub fn run_sweep(
    teacher: &SegModel<f32>,
    train: &[UnlabeledImage],
    val: &TargetEval<'_>,
    base: &TrainConfig,
    top_ps: &[f64],
    taus: &[usize],
) -> Result<Vec<SweepRow>> {
    let pool = prepare_targets(teacher, train, base.pcgd.confidence_floor)?;
    let mut rows = Vec::new();
    for &tau in taus {
        let mut cfg = base.clone();
        cfg.pcgd.enabled = true;
        cfg.pcgd.tau = tau;
        cfg.validate()?;
        let (theta_tau, _) = warmup(&pool, &cfg)?;
        let records = score_targets(&pool, &theta_tau)?;
        for &p in top_ps {
            cfg.pcgd.top_p = p;
            let split = split_targets(&pool, &records, p)?;
            let model = adapt_prepared(&pool, Some(&split), &cfg)?.model;
            let r = evaluate_target(&model, val.images, val.labels, Inference::for_config(&cfg))?;
            info!("sweep P={p} tau={tau}: mIoU {:.2}", r.miou * 100.0);
            rows.push(SweepRow {
                top_p: p,
                tau,
                miou: r.miou,
                minority_miou: r.minority_miou,
            });
        }
    }
    Ok(rows)
}
