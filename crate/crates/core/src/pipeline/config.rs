use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowobjectives::LossConfig;
use crate::model::ModelConfig;
use crate::samplers::SamplerKind;
use crate::toyecho::DEFAULT_NOISE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_videos: usize,
    /// Inclusive range of raw sequence lengths.
    pub f_min: usize,
    pub f_max: usize,
    pub ef_min: f64,
    pub ef_max: f64,
    pub noise_sigma: f64,
    /// Relative per-video jitter of the ellipse semi-axes, so the cavity size
    /// has to be read from the observed frame.
    pub geometry_jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_videos: 512,
            f_min: 4,
            f_max: 8,
            ef_min: 0.1,
            ef_max: 0.8,
            noise_sigma: DEFAULT_NOISE,
            geometry_jitter: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate, annealed to `lr_min` on a cosine.
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Proportion of valid frames masked out of the conditioning video.
    pub pmf: f64,
    /// Probability of dropping all conditioning for a sample (guidance training).
    pub cond_dropout: f64,
    /// Save a checkpoint every this many epochs; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 4,
            lr: 1e-3,
            lr_min: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            pmf: 1.0,
            cond_dropout: 0.0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Items drawn from the head of the dataset; 0 evaluates all of them.
    pub n_items: usize,
    /// Candidates per item for rejection sampling; 1 disables it.
    pub rs_k: usize,
    pub tau: f64,
    /// Masked proportion of the conditioning video; the surviving frames are
    /// the leading ones, starting at end-diastole.
    pub pmf: f64,
    pub gen_ef_min: f64,
    pub gen_ef_max: f64,
    pub gen_min_gap: f64,
    pub sampler: SamplerKind,
    pub bench_iters: usize,
    pub cfg_guidance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_items: 128,
            rs_k: 1,
            tau: crate::toyecho::DEFAULT_TAU,
            pmf: 1.0,
            gen_ef_min: 0.15,
            gen_ef_max: 0.7,
            gen_min_gap: crate::evalbench::GEN_MIN_GAP,
            sampler: SamplerKind::OneStep,
            bench_iters: 100,
            cfg_guidance: 2.0,
        }
    }
}

/// Everything a run needs; serialized as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// The original model's scale: 32 frames, four-level network, learning
    /// rate 5e-5, batch 2, 1000 epochs. Not CPU-trainable.
    pub fn full_scale() -> Self {
        let model = ModelConfig::full_scale();
        RunConfig {
            data: DataConfig {
                f_max: model.frames,
                ..DataConfig::default()
            },
            train: TrainConfig {
                epochs: 1000,
                batch_size: 2,
                lr: 5e-5,
                lr_min: 0.0,
                ..TrainConfig::default()
            },
            model,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let d = &self.data;
        if d.n_videos == 0 {
            return Err(Error::invalid("dataset needs at least one video"));
        }
        if d.f_min < 2 || d.f_min > d.f_max {
            return Err(Error::invalid(format!("invalid length range [{}, {}]", d.f_min, d.f_max)));
        }
        if !(0.0 <= d.ef_min && d.ef_min <= d.ef_max && d.ef_max < 1.0) {
            return Err(Error::invalid(format!("invalid EF range [{}, {}]", d.ef_min, d.ef_max)));
        }
        if !(0.0..0.5).contains(&d.geometry_jitter) || d.noise_sigma < 0.0 {
            return Err(Error::invalid("geometry_jitter must lie in [0, 0.5) and noise_sigma be ≥ 0"));
        }
        let t = &self.train;
        let unit = 0.0..=1.0;
        if t.batch_size == 0 || !(t.lr > 0.0) || t.lr_min < 0.0 || t.lr_min > t.lr {
            return Err(Error::invalid("need batch_size ≥ 1 and 0 ≤ lr_min ≤ lr, lr > 0"));
        }
        if !(unit.contains(&t.beta1) && unit.contains(&t.beta2) && t.adam_eps > 0.0 && t.grad_clip >= 0.0) {
            return Err(Error::invalid("invalid optimizer settings"));
        }
        if !unit.contains(&t.pmf) || !unit.contains(&t.cond_dropout) {
            return Err(Error::invalid("pmf and cond_dropout must lie in [0, 1]"));
        }
        let e = &self.eval;
        if e.rs_k == 0 || !unit.contains(&e.pmf) || !(0.0..=1.0).contains(&e.tau) {
            return Err(Error::invalid("need rs_k ≥ 1 and pmf, tau in [0, 1]"));
        }
        if !(0.0 <= e.gen_ef_min && e.gen_ef_min < e.gen_ef_max && e.gen_ef_max < 1.0) {
            return Err(Error::invalid("invalid Gen EF range"));
        }
        // any source EF must leave room for a request at the minimum gap
        if e.gen_ef_max - e.gen_ef_min < 2.0 * e.gen_min_gap {
            return Err(Error::invalid("Gen EF range is too narrow for the minimum gap"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format {
            what: "run config",
            detail: e.to_string(),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format {
            what: "run config",
            detail: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Fails unless `other` describes the same network.
    pub fn check_compatible(&self, other: &RunConfig) -> Result<()> {
        if self.model != other.model {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint model {:?} differs from configured {:?}",
                other.model, self.model
            )));
        }
        Ok(())
    }
}
