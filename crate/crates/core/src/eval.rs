//! Confusion-matrix segmentation metrics.

use std::io::Write;
use std::path::Path;

use dapass_tensor::IGNORE_LABEL;
use serde::Serialize;

use crate::error::{Error, IoContext, Result};
use crate::panosynth::LabelMap;

/// `counts[g * C + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair; ignore pixels are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.h, pred.w) != (gt.h, gt.w) {
            return Err(Error::Invalid(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.h, pred.w, gt.h, gt.w
            )));
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= self.classes || p >= self.classes {
                return Err(Error::Invalid(format!("label {g}/{p} outside {} classes", self.classes)));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IouReport {
    /// `None` for classes with zero union.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub minority_miou: f64,
    pub majority_miou: f64,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-class IoU and group means; zero-union classes are left out of every mean.
pub fn iou_report(cm: &ConfusionMatrix, minority: &[usize]) -> IouReport {
    let c = cm.classes;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let fn_: u64 = (0..c).map(|p| cm.get(k, p)).sum::<u64>() - tp;
            let fp: u64 = (0..c).map(|g| cm.get(g, k)).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present = |k: usize| per_class[k].map(|v| (k, v));
    IouReport {
        miou: mean_of((0..c).filter_map(present).map(|(_, v)| v)),
        minority_miou: mean_of((0..c).filter_map(present).filter(|(k, _)| minority.contains(k)).map(|(_, v)| v)),
        majority_miou: mean_of((0..c).filter_map(present).filter(|(k, _)| !minority.contains(k)).map(|(_, v)| v)),
        per_class,
    }
}

impl IouReport {
    /// `class,iou` rows followed by summary rows.
    pub fn write_csv(&self, path: &Path, names: &[&str]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["class", "iou"])?;
        for (k, v) in self.per_class.iter().enumerate() {
            let name = names.get(k).map_or_else(|| k.to_string(), |s| s.to_string());
            w.write_record([name, v.map_or_else(String::new, |v| format!("{v:.6}"))])?;
        }
        w.write_record(["mIoU".to_string(), format!("{:.6}", self.miou)])?;
        w.write_record(["minority_mIoU".to_string(), format!("{:.6}", self.minority_miou)])?;
        w.write_record(["majority_mIoU".to_string(), format!("{:.6}", self.majority_miou)])?;
        w.flush().at(path)?;
        Ok(())
    }

    pub fn print(&self, out: &mut impl Write, names: &[&str]) -> std::io::Result<()> {
        for (k, v) in self.per_class.iter().enumerate() {
            let name = names.get(k).copied().unwrap_or("?");
            match v {
                Some(v) => writeln!(out, "{name:>10}  {:6.2}", v * 100.0)?,
                None => writeln!(out, "{name:>10}     --")?,
            }
        }
        writeln!(out, "{:>10}  {:6.2}", "mIoU", self.miou * 100.0)
    }
}
