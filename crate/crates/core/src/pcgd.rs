//! Confidence-guided denoising: teacher pseudo-labels, consistency scoring
//! between two parameter snapshots, the consistent/inconsistent split,
//! per-class donor pools, style/layout neighbor retrieval, copy-paste
//! augmentation, and the first-order bi-level step.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use dapass_tensor::{bilinear_resize, softmax, Element, ResizeTarget, Tensor, IGNORE_LABEL};
use log::{debug, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::optim::{Optimizer, StepOutcome};
use crate::panosynth::LabelMap;
use crate::params::{Grads, ParamSnapshot, ParamStore};
use crate::segnet::SegModel;

/// Teacher label map with per-pixel confidence (max softmax probability).
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub labels: LabelMap,
    pub confidence: Vec<f32>,
}

/// Hard argmax and confidence per pixel of `probs: [1, C, H, W]`; pixels
/// under `floor` get the ignore label.
pub fn argmax_labels(probs: &Tensor<f32>, floor: f32) -> Result<PseudoLabel> {
    let (_, c, h, w) = probs.dims4()?;
    let hw = h * w;
    let p = probs.data();
    let mut labels = Vec::with_capacity(hw);
    let mut confidence = Vec::with_capacity(hw);
    for i in 0..hw {
        let (mut best, mut conf) = (0usize, p[i]);
        for k in 1..c {
            if p[k * hw + i] > conf {
                best = k;
                conf = p[k * hw + i];
            }
        }
        labels.push(if conf < floor { IGNORE_LABEL } else { best as u8 });
        confidence.push(conf);
    }
    Ok(PseudoLabel {
        labels: LabelMap::new(h, w, labels)?,
        confidence,
    })
}

/// Teacher pass over one image: full-resolution pseudo-label plus stride-`o` features.
#[derive(Clone, Debug)]
pub struct TeacherOutput {
    pub pseudo: PseudoLabel,
    pub features: Tensor<f32>,
    pub logits: Tensor<f32>,
}

pub fn teacher_pass(teacher: &SegModel<f32>, image: &Tensor<f32>, floor: f32) -> Result<TeacherOutput> {
    let (features, logits, _) = teacher.infer(image)?;
    let (_, _, h, w) = image.dims4()?;
    let up = bilinear_resize(&logits, ResizeTarget::Shape(h, w))?;
    let pseudo = argmax_labels(&softmax(&up, 1.0)?, floor)?;
    Ok(TeacherOutput {
        pseudo,
        features,
        logits,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Assignment {
    Consistent,
    Inconsistent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRecord {
    pub id: String,
    pub cs: f64,
    /// Keyed by class id; only classes that win the θ⁰ argmax somewhere.
    pub per_class: BTreeMap<u8, f64>,
    pub assignment: Assignment,
}

/// `−Σ KL(p₀ ‖ p_τ)` over the grid, and per-class sums over pixels where
/// `argmax p₀ = c`. Inputs are probabilities `[1, C, h, w]`.
pub fn score_from_probs<T: Element>(p0: &Tensor<T>, p_tau: &Tensor<T>) -> Result<(f64, BTreeMap<u8, f64>)> {
    let kl = dapass_tensor::kl_divergence(p0, p_tau)?;
    let (_, c, h, w) = p0.dims4()?;
    let hw = h * w;
    let mut total = 0.0;
    let mut per_class = BTreeMap::new();
    for i in 0..hw {
        let mut best = 0;
        for k in 1..c {
            if p0.data()[k * hw + i] > p0.data()[best * hw + i] {
                best = k;
            }
        }
        let d = kl.data()[i].as_f64();
        total += d;
        *per_class.entry(best as u8).or_insert(0.0) += d;
    }
    for v in per_class.values_mut() {
        *v = -*v;
    }
    Ok((-total, per_class))
}

/// Scores one image under two snapshots of the same architecture.
pub fn consistency_score(
    arch: &SegModel<f32>,
    theta0: &ParamSnapshot<f32>,
    theta_tau: &ParamSnapshot<f32>,
    id: &str,
    image: &Tensor<f32>,
) -> Result<ConsistencyRecord> {
    let m0 = arch.with_snapshot(theta0)?;
    let mt = arch.with_snapshot(theta_tau)?;
    score_image(&m0, &mt, id, image)
}

fn score_image(m0: &SegModel<f32>, mt: &SegModel<f32>, id: &str, image: &Tensor<f32>) -> Result<ConsistencyRecord> {
    let (_, l0, _) = m0.infer(image)?;
    let (_, lt, _) = mt.infer(image)?;
    let p0: Tensor<f64> = softmax(&l0, 1.0)?.cast();
    let pt: Tensor<f64> = softmax(&lt, 1.0)?.cast();
    let (cs, per_class) = score_from_probs(&p0, &pt)?;
    Ok(ConsistencyRecord {
        id: id.to_string(),
        cs,
        per_class,
        assignment: Assignment::Inconsistent,
    })
}

/// Scores a set of images in parallel; output order follows the input.
pub fn score_all<'a>(
    theta0: &SegModel<f32>,
    theta_tau: &SegModel<f32>,
    images: impl IntoParallelIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<Vec<ConsistencyRecord>> {
    theta0.params().check_compatible(theta_tau.params())?;
    images
        .into_par_iter()
        .map(|(id, x)| score_image(theta0, theta_tau, id, x))
        .collect()
}

/// Marks the top `ceil(P·N/100)` records by CS (ties by id) consistent.
pub fn split_sets(records: &mut [ConsistencyRecord], p: f64) -> Result<(Vec<String>, Vec<String>)> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::Invalid(format!("top-P must be in (0, 100], got {p}")));
    }
    if records.is_empty() {
        return Err(Error::EmptyConsistentSet("no consistency records".into()));
    }
    let n = records.len();
    let keep = ((p / 100.0 * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[b].cs.total_cmp(&records[a].cs).then_with(|| records[a].id.cmp(&records[b].id)));
    let (mut con, mut incon) = (Vec::with_capacity(keep), Vec::with_capacity(n - keep));
    for (rank, &i) in order.iter().enumerate() {
        let r = &mut records[i];
        if rank < keep {
            r.assignment = Assignment::Consistent;
            con.push(r.id.clone());
        } else {
            r.assignment = Assignment::Inconsistent;
            incon.push(r.id.clone());
        }
    }
    Ok((con, incon))
}

/// One pool member: index into the caller's consistent-sample list.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub index: usize,
    pub id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPool {
    pub class: u8,
    pub entries: Vec<PoolEntry>,
}

/// Candidate for pooling: its record and its pseudo-label.
pub struct PoolCandidate<'a> {
    pub record: &'a ConsistencyRecord,
    pub labels: &'a LabelMap,
}

/// Top-`k` consistent images per class by per-class score. An image is
/// eligible for class `c` when its pseudo-label contains `c` and it has a
/// per-class score for `c`.
pub fn build_class_pools(candidates: &[PoolCandidate<'_>], k: usize) -> Result<BTreeMap<u8, ClassPool>> {
    if k == 0 {
        return Err(Error::Invalid("pool size K must be at least 1".into()));
    }
    let mut pools: BTreeMap<u8, Vec<PoolEntry>> = BTreeMap::new();
    for (index, cand) in candidates.iter().enumerate() {
        for c in cand.labels.classes() {
            if let Some(&score) = cand.record.per_class.get(&c) {
                pools.entry(c).or_default().push(PoolEntry {
                    index,
                    id: cand.record.id.clone(),
                    score,
                });
            }
        }
    }
    Ok(pools
        .into_iter()
        .map(|(class, mut entries)| {
            entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
            entries.truncate(k);
            (class, ClassPool { class, entries })
        })
        .collect())
}

pub const LAYOUT_ROWS: usize = 4;
pub const LAYOUT_COLS: usize = 8;

fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        let u = 1.0 / (v.len() as f64).sqrt();
        v.iter_mut().for_each(|x| *x = u);
    }
}

/// Channel means and standard deviations of `features: [1, F, h, w]`.
pub fn style_descriptor(features: &Tensor<f32>) -> Result<Vec<f64>> {
    let (_, f, h, w) = features.dims4()?;
    let hw = h * w;
    let mut out = vec![0.0; 2 * f];
    for ch in 0..f {
        let xs = &features.data()[ch * hw..(ch + 1) * hw];
        let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / hw as f64;
        out[ch] = mean;
        out[f + ch] = var.sqrt();
    }
    l2_normalize(&mut out);
    Ok(out)
}

/// Per-class pixel fractions on a 4×8 grid of cells, ignore pixels excluded.
pub fn layout_descriptor(labels: &LabelMap, classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; LAYOUT_ROWS * LAYOUT_COLS * classes];
    let mut cell_px = vec![0usize; LAYOUT_ROWS * LAYOUT_COLS];
    for y in 0..labels.h {
        let r = y * LAYOUT_ROWS / labels.h;
        for x in 0..labels.w {
            let cell = r * LAYOUT_COLS + x * LAYOUT_COLS / labels.w;
            cell_px[cell] += 1;
            let l = labels.at(y, x);
            if (l as usize) < classes {
                out[cell * classes + l as usize] += 1.0;
            }
        }
    }
    for (cell, &n) in cell_px.iter().enumerate() {
        if n > 0 {
            out[cell * classes..(cell + 1) * classes].iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    l2_normalize(&mut out);
    out
}

/// Style ⊕ layout, each half unit-norm.
pub fn descriptor(features: &Tensor<f32>, labels: &LabelMap, classes: usize) -> Result<Vec<f64>> {
    let mut d = style_descriptor(features)?;
    d.extend(layout_descriptor(labels, classes));
    Ok(d)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Descriptors of the consistent set, kept sorted by id.
#[derive(Clone, Debug, Default)]
pub struct NeighborIndex {
    entries: Vec<(String, usize, Vec<f64>)>,
    dim: Option<usize>,
}

impl NeighborIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a consistent image; `index` is the caller's handle for it.
    pub fn insert(&mut self, id: impl Into<String>, index: usize, desc: Vec<f64>) -> Result<()> {
        match self.dim {
            Some(d) if d != desc.len() => {
                return Err(Error::Invalid(format!("descriptor length {} != {d}", desc.len())));
            }
            _ => self.dim = Some(desc.len()),
        }
        let id = id.into();
        let at = self.entries.partition_point(|(e, _, _)| *e < id);
        self.entries.insert(at, (id, index, desc));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Most cosine-similar entry; the smallest id wins ties.
    pub fn nearest(&self, query: &[f64]) -> Result<(&str, usize, f64)> {
        if Some(query.len()) != self.dim {
            return Err(Error::Invalid("query descriptor has the wrong length or index is empty".into()));
        }
        let mut best: Option<(&str, usize, f64)> = None;
        for (id, index, d) in &self.entries {
            let s = cosine(query, d);
            if best.map_or(true, |(_, _, b)| s > b) {
                best = Some((id, *index, s));
            }
        }
        best.ok_or_else(|| Error::Invalid("empty neighbor index".into()))
    }
}

/// Nearest consistent image for a query descriptor.
pub fn retrieve_neighbor<'a>(query: &[f64], index: &'a NeighborIndex) -> Result<(&'a str, usize)> {
    index.nearest(query).map(|(id, i, _)| (id, i))
}

/// An image with its pseudo-label, as used for pasting.
#[derive(Clone, Debug)]
pub struct Labeled {
    pub image: Tensor<f32>,
    pub pseudo: PseudoLabel,
}

/// Pastes the donor's pixels of `class` onto `base` (image, label, confidence).
pub fn paste_class(base: &mut Labeled, donor: &Labeled, class: u8) -> Result<usize> {
    if base.image.shape() != donor.image.shape() {
        return Err(Error::Invalid(format!(
            "paste between {:?} and {:?}",
            base.image.shape(),
            donor.image.shape()
        )));
    }
    let (_, c, h, w) = base.image.dims4()?;
    let hw = h * w;
    let mut pasted = 0;
    for i in 0..hw {
        if donor.pseudo.labels.data[i] == class {
            base.pseudo.labels.data[i] = class;
            base.pseudo.confidence[i] = donor.pseudo.confidence[i];
            for ch in 0..c {
                base.image.data_mut()[ch * hw + i] = donor.image.data()[ch * hw + i];
            }
            pasted += 1;
        }
    }
    Ok(pasted)
}

/// Fills in classes the query has but `con` lacks, one donor per class
/// drawn uniformly from that class's pool, pasted in ascending class order.
pub fn neighbor_complete(
    con: &Labeled,
    query_classes: &BTreeSet<u8>,
    pools: &BTreeMap<u8, ClassPool>,
    donors: &[Labeled],
    rng: &mut impl Rng,
) -> Result<Labeled> {
    let present = con.pseudo.labels.classes();
    let mut out = con.clone();
    for &c in query_classes.difference(&present) {
        match pools.get(&c).filter(|p| !p.entries.is_empty()) {
            Some(pool) => {
                let entry = &pool.entries[rng.gen_range(0..pool.entries.len())];
                paste_class(&mut out, &donors[entry.index], c)?;
            }
            None => debug!("no pool for missing class {c}, skipped"),
        }
    }
    Ok(out)
}

/// Picks a minority class with a non-empty pool, weighted by `1 / share`
/// where `share` is the class's pixel share in the consistent pseudo-labels.
pub fn sample_minority_class(
    pools: &BTreeMap<u8, ClassPool>,
    minority: &[usize],
    shares: &[f64],
    rng: &mut impl Rng,
) -> Option<u8> {
    let eligible: Vec<(u8, f64)> = minority
        .iter()
        .filter_map(|&c| {
            let pool = pools.get(&(c as u8))?;
            let share = shares.get(c).copied().unwrap_or(0.0);
            (!pool.entries.is_empty() && share > 0.0).then_some((c as u8, 1.0 / share))
        })
        .collect();
    if eligible.is_empty() {
        return None;
    }
    let total: f64 = eligible.iter().map(|(_, w)| w).sum();
    let mut r = rng.gen_range(0.0..total);
    for &(c, w) in &eligible {
        if r < w {
            return Some(c);
        }
        r -= w;
    }
    eligible.last().map(|&(c, _)| c)
}

/// Builds one class-balancing sample: a minority donor pasted onto `base`.
/// Returns `None` when every minority pool is empty.
pub fn balance_sample(
    base: &Labeled,
    pools: &BTreeMap<u8, ClassPool>,
    donors: &[Labeled],
    minority: &[usize],
    shares: &[f64],
    rng: &mut impl Rng,
) -> Result<Option<(Labeled, u8)>> {
    let Some(c) = sample_minority_class(pools, minority, shares, rng) else {
        warn!("all minority pools empty, balance step skipped");
        return Ok(None);
    };
    let pool = &pools[&c];
    let entry = &pool.entries[rng.gen_range(0..pool.entries.len())];
    let mut out = base.clone();
    paste_class(&mut out, &donors[entry.index], c)?;
    Ok(Some((out, c)))
}

/// Loss value and gradients at a given parameter set.
pub type LossGrad<T> = (f64, Grads<T>);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilevelOutcome {
    pub inner_loss: f64,
    pub outer_loss: f64,
    pub step: StepOutcome,
}

/// First-order bi-level update: `Θ_inner = Θ − α∇L_in(Θ)`, then the outer
/// gradient taken at `Θ_inner` is handed to `opt` for `Θ` with rate `eta`.
pub fn bilevel_step<T: Element>(
    params: &mut ParamStore<T>,
    mut inner: impl FnMut(&ParamStore<T>) -> Result<LossGrad<T>>,
    mut outer: impl FnMut(&ParamStore<T>) -> Result<LossGrad<T>>,
    alpha: f64,
    eta: f64,
    opt: &mut impl Optimizer<T>,
) -> Result<BilevelOutcome> {
    let (inner_loss, g_in) = inner(params)?;
    if !inner_loss.is_finite() || !g_in.all_finite() {
        warn!("bilevel: non-finite inner loss {inner_loss}, step skipped");
        return Ok(BilevelOutcome {
            inner_loss,
            outer_loss: f64::NAN,
            step: StepOutcome::Skipped,
        });
    }
    let mut theta_inner = params.clone();
    theta_inner.sgd_update(&g_in, T::cast(alpha));
    let (outer_loss, g_out) = outer(&theta_inner)?;
    let step = opt.step(params, &g_out, eta)?;
    Ok(BilevelOutcome {
        inner_loss,
        outer_loss,
        step,
    })
}

pub fn write_records(path: &Path, records: &[ConsistencyRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).at(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").at(path)?;
    }
    w.flush().at(path)
}

pub fn read_records(path: &Path) -> Result<Vec<ConsistencyRecord>> {
    let r = BufReader::new(File::open(path).at(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.at(path)?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Sgd;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(id: &str, cs: f64) -> ConsistencyRecord {
        ConsistencyRecord {
            id: id.into(),
            cs,
            per_class: BTreeMap::new(),
            assignment: Assignment::Inconsistent,
        }
    }

    #[test]
    fn split_sizes() {
        for (p, expect) in [(10.0, 10), (15.0, 15), (1.0, 1), (100.0, 100), (0.5, 1)] {
            let mut rs: Vec<_> = (0..100).map(|i| record(&format!("{i:03}"), -(i as f64))).collect();
            let (c, ic) = split_sets(&mut rs, p).unwrap();
            assert_eq!(c.len(), expect);
            assert_eq!(ic.len(), 100 - expect);
        }
        let mut rs = vec![record("a", 0.0)];
        assert!(split_sets(&mut rs, 0.0).is_err());
        assert!(split_sets(&mut rs, 100.5).is_err());
    }

    #[test]
    fn split_tie_break_by_id() {
        let mut rs: Vec<_> = ["d", "b", "a", "c"].iter().map(|id| record(id, -1.0)).collect();
        let (c, _) = split_sets(&mut rs, 50.0).unwrap();
        assert_eq!(c, vec!["a", "b"]);
    }

    #[test]
    fn argmax_floor() {
        let probs = Tensor::new([1, 2, 1, 2], vec![0.9f32, 0.15, 0.1, 0.15]).unwrap();
        let pl = argmax_labels(&probs, 0.2).unwrap();
        assert_eq!(pl.labels.data, vec![0, IGNORE_LABEL]);
    }

    #[test]
    fn quadratic_bilevel() {
        let mut p = ParamStore::new();
        p.push("theta", Tensor::scalar(1.0f64));
        let quad = |c: f64| {
            move |ps: &ParamStore<f64>| -> Result<LossGrad<f64>> {
                let t = ps.get("theta").unwrap().item();
                Ok((0.5 * (t - c).powi(2), Grads(vec![Tensor::scalar(t - c)])))
            }
        };
        let out = bilevel_step(&mut p, quad(0.0), quad(2.0), 0.5, 0.1, &mut Sgd).unwrap();
        assert_eq!(out.step, StepOutcome::Applied);
        assert!((p.get("theta").unwrap().item() - 1.15).abs() < 1e-12);
    }

    #[test]
    fn layout_is_unit_norm() {
        let lm = LabelMap::new(4, 8, (0..32).map(|i| (i % 3) as u8).collect()).unwrap();
        let d = layout_descriptor(&lm, 8);
        assert_eq!(d.len(), 4 * 8 * 8);
        assert!((d.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn minority_sampling_skips_empty_pools() {
        let mut pools = BTreeMap::new();
        pools.insert(
            2,
            ClassPool {
                class: 2,
                entries: vec![PoolEntry {
                    index: 0,
                    id: "x".into(),
                    score: 0.0,
                }],
            },
        );
        pools.insert(4, ClassPool { class: 4, entries: vec![] });
        let shares = vec![0.1; 8];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(sample_minority_class(&pools, &[1, 2, 4], &shares, &mut rng), Some(2));
        }
        assert_eq!(sample_minority_class(&BTreeMap::new(), &[1], &shares, &mut rng), None);
    }
}
