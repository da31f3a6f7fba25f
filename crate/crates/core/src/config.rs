//! Run configuration: one TOML document with a section per concern. Every
//! field has a default, so an empty file is a complete configuration.
//! Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cram::CramConfig;
use crate::error::{Error, IoContext, Result};
use crate::optim::AdamWConfig;
use crate::panosynth::SceneSpec;
use crate::segnet::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_val: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source_train: 400,
            source_val: 100,
            target_train: 200,
            target_val: 100,
        }
    }
}

/// Supervised source pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    pub lr: f64,
    pub iters: usize,
    pub batch: usize,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            iters: 1500,
            batch: 8,
        }
    }
}

/// Optimization protocol for adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub adam_betas: [f64; 2],
    pub batch: usize,
    pub total_iters: usize,
    pub metrics_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 6e-5,
            poly_power: 0.9,
            weight_decay: 1e-4,
            adam_eps: 1e-8,
            adam_betas: [0.9, 0.999],
            batch: 4,
            total_iters: 1200,
            metrics_every: 50,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_betas[0],
            beta2: self.adam_betas[1],
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcgdConfig {
    /// Off: plain pseudo-label self-training on every target image.
    pub enabled: bool,
    /// Percentage of images kept as the consistent set.
    pub top_p: f64,
    /// Warm-up iterations before scoring.
    pub tau: usize,
    pub top_k: usize,
    /// Inner (plain SGD) step size of the bi-level update.
    pub alpha: f64,
    /// Pseudo-label pixels below this teacher confidence are ignored.
    pub confidence_floor: f64,
    pub path_a: bool,
    pub path_b: bool,
    /// Weight the loss by teacher confidence.
    pub weighted: bool,
}

impl Default for PcgdConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            top_p: 10.0,
            tau: 600,
            top_k: 15,
            alpha: 1e-4,
            confidence_floor: 0.2,
            path_a: true,
            path_b: true,
            weighted: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub scene: SceneSpec,
    pub data: DataConfig,
    pub source: SourceConfig,
    pub train: OptimConfig,
    pub pcgd: PcgdConfig,
    pub cram: CramConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            scene: SceneSpec::default(),
            data: DataConfig::default(),
            source: SourceConfig::default(),
            train: OptimConfig::default(),
            pcgd: PcgdConfig::default(),
            cram: CramConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        self.cram.validate()?;
        let t = &self.train;
        positive("train.base_lr", t.base_lr)?;
        positive("train.poly_power", t.poly_power)?;
        positive("train.weight_decay", t.weight_decay)?;
        positive("train.adam_eps", t.adam_eps)?;
        for b in t.adam_betas {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.adam_betas must lie in [0, 1), got {b}")));
            }
        }
        positive("source.lr", self.source.lr)?;
        for (name, v) in [
            ("train.batch", t.batch),
            ("train.total_iters", t.total_iters),
            ("train.metrics_every", t.metrics_every),
            ("source.batch", self.source.batch),
            ("source.iters", self.source.iters),
            ("pcgd.top_k", self.pcgd.top_k),
            ("data.source_train", self.data.source_train),
            ("data.target_train", self.data.target_train),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let p = &self.pcgd;
        if !(p.top_p > 0.0 && p.top_p <= 100.0) {
            return Err(Error::Config(format!("pcgd.top_p must be in (0, 100], got {}", p.top_p)));
        }
        if p.tau > t.total_iters {
            return Err(Error::Config(format!(
                "pcgd.tau ({}) exceeds train.total_iters ({})",
                p.tau, t.total_iters
            )));
        }
        if p.alpha < 0.0 {
            return Err(Error::Config("pcgd.alpha must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&p.confidence_floor) {
            return Err(Error::Config("pcgd.confidence_floor must be in [0, 1)".into()));
        }
        if p.enabled && !p.path_a && !p.path_b {
            return Err(Error::Config("pcgd needs at least one of path_a / path_b".into()));
        }
        if self.cram.enabled {
            let k = self.cram.scale * self.model.output_stride;
            let [h, w] = self.scene.target_size;
            let [hl, wl] = self.cram.context;
            if h % k != 0 || w % k != 0 || self.cram.scale * hl > h || self.cram.scale * wl > w {
                return Err(Error::Config(format!(
                    "cram context {hl}x{wl} at scale {} does not tile a {h}x{w} target on grid {k}",
                    self.cram.scale
                )));
            }
            let o = self.model.output_stride;
            if hl % o != 0 || wl % o != 0 || self.cram.detail[0] % o != 0 || self.cram.detail[1] % o != 0 {
                return Err(Error::Config(format!("cram crop sizes must be multiples of output stride {o}")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).at(path)?;
    TrainConfig::from_toml(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes the effective configuration as `config.toml` under `dir`.
pub fn echo_config(cfg: &TrainConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?).at(&path)
}
