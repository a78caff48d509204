use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::data::Dataset;
use super::derive_seed;
use crate::autodiff::{Graph, ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::flowobjectives::{objective_loss, pick_objective, sample_timesteps, FlowSample, Objective, TimestepPair};
use crate::model::Model;
use crate::seqcond::{build_masked_conditioning, ConditioningSet};

const INIT_STREAM: u64 = 0x1717;
const TRAIN_STREAM: u64 = 0x7A17;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParameterSet,
    pub v: ParameterSet,
    /// Updates applied so far.
    pub step: u64,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParameterSet,
    pub adam: AdamState,
    /// Epochs completed.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: &Model, seed: u64) -> Self {
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, INIT_STREAM)));
        TrainState {
            adam: AdamState {
                m: params.zeros_like(),
                v: params.zeros_like(),
                step: 0,
            },
            params,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, TRAIN_STREAM)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based index of the epoch just finished.
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_mlf: Option<f64>,
    pub mean_mmf: Option<f64>,
    pub mean_rec: Option<f64>,
    pub linear_steps: usize,
    pub meanflow_steps: usize,
    pub lr: f64,
    /// Batch-mean loss of every step, in order.
    pub step_losses: Vec<f64>,
}

fn cosine_lr(cfg: &RunConfig, step: u64, total: u64) -> f64 {
    let t = &cfg.train;
    let progress = (step as f64 / total.max(1) as f64).min(1.0);
    t.lr_min + 0.5 * (t.lr - t.lr_min) * (1.0 + (PI * progress).cos())
}

fn adam_update(cfg: &RunConfig, state: &mut TrainState, grads: &ParameterSet, lr: f64) -> Result<()> {
    let t = &cfg.train;
    state.adam.step += 1;
    let k = state.adam.step as i32;
    let (c1, c2) = (1.0 - t.beta1.powi(k), 1.0 - t.beta2.powi(k));
    for (name, p) in state.params.iter_mut() {
        let g = grads.require(name)?;
        let m = state
            .adam
            .m
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("optimizer state lacks {name}")))?;
        for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = t.beta1 * *mi + (1.0 - t.beta1) * gi;
        }
        let m = state.adam.m.require(name)?.data().to_vec();
        let v = state
            .adam
            .v
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("optimizer state lacks {name}")))?;
        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = t.beta2 * *vi + (1.0 - t.beta2) * gi * gi;
        }
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(&m).zip(v.data()) {
            *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + t.adam_eps);
        }
    }
    Ok(())
}

fn clip(grads: &mut ParameterSet, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

struct Accum {
    sum: f64,
    n: usize,
}

impl Accum {
    fn push(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }

    fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Trains from `state` until `until_epoch` epochs are complete. The learning
/// rate schedule always spans `cfg.train.epochs`, so stopping early and
/// resuming follows the same trajectory. With `checkpoint` set, a snapshot
/// is written every `checkpoint_every` epochs and after the last one.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    state: &mut TrainState,
    until_epoch: usize,
    checkpoint: Option<&Path>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let model = Model::new(cfg.model.clone())?;
    model.check_params(&state.params)?;
    let t = &cfg.train;
    let until_epoch = until_epoch.min(t.epochs);
    let steps_per_epoch = data.len().div_ceil(t.batch_size) as u64;
    let total_steps = steps_per_epoch * t.epochs as u64;
    let mut logs = Vec::new();
    while state.epoch < until_epoch {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut state.rng);
        let (mut total, mut mlf, mut mmf, mut rec) = (
            Accum { sum: 0.0, n: 0 },
            Accum { sum: 0.0, n: 0 },
            Accum { sum: 0.0, n: 0 },
            Accum { sum: 0.0, n: 0 },
        );
        let (mut linear_steps, mut meanflow_steps) = (0, 0);
        let mut step_losses = Vec::with_capacity(steps_per_epoch as usize);
        let mut lr = t.lr;
        for (step, batch) in order.chunks(t.batch_size).enumerate() {
            let objective = pick_objective(&mut state.rng, cfg.loss.p_linear)?;
            let batch_seed: u64 = state.rng.random();
            let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
            let mut grads = state.params.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let x = &data.videos[i];
                let masked = build_masked_conditioning(x, t.pmf, &mut rng)?;
                let mut c = ConditioningSet::new(masked.x_m, data.entries[i].ef, x.padding().to_vec(), masked.observed)?;
                if t.cond_dropout > 0.0 && rng.random::<f64>() < t.cond_dropout {
                    c = c.unconditional();
                }
                let eps = Tensor::randn(x.frames().shape(), &mut rng);
                let pair = sample_timesteps(&mut rng, cfg.loss.ratio_equal)?;
                let pair = match objective {
                    Objective::MaskedLinearFlow => TimestepPair::instantaneous(pair.t)?,
                    Objective::MaskedMeanFlow => pair,
                };
                let fs = FlowSample::new(x.frames().clone(), eps, pair)?;
                let mut g = Graph::new();
                let bound = model.bind(&mut g, &state.params, true)?;
                let loss = objective_loss(&mut g, &bound, &fs, &c, &cfg.loss, objective)?;
                let value = g.value(loss.total).item()?;
                if !value.is_finite() {
                    let ids: Vec<&str> = batch.iter().map(|&j| data.entries[j].id.as_str()).collect();
                    log::error!(
                        "non-finite loss at epoch {epoch} step {step}: batch seed {batch_seed}, objective {objective:?}, items {ids:?}, offending {}",
                        data.entries[i].id
                    );
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step,
                        batch_seed,
                    });
                }
                grads.add_scaled(&g.grad(loss.total)?, scale)?;
                batch_loss += scale * value;
                mlf.push(loss.mlf);
                mmf.push(loss.mmf);
                rec.push(loss.rec);
            }
            if !grads.is_finite() {
                log::error!("non-finite gradient at epoch {epoch} step {step}: batch seed {batch_seed}");
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    batch_seed,
                });
            }
            match objective {
                Objective::MaskedLinearFlow => linear_steps += 1,
                Objective::MaskedMeanFlow => meanflow_steps += 1,
            }
            clip(&mut grads, t.grad_clip);
            lr = cosine_lr(cfg, state.adam.step, total_steps);
            adam_update(cfg, state, &grads, lr)?;
            total.push(Some(batch_loss));
            step_losses.push(batch_loss);
        }
        state.epoch = epoch;
        let log_entry = EpochLog {
            epoch,
            mean_loss: total.mean().unwrap_or(0.0),
            mean_mlf: mlf.mean(),
            mean_mmf: mmf.mean(),
            mean_rec: rec.mean(),
            linear_steps,
            meanflow_steps,
            lr,
            step_losses,
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.5} (mlf {}, mmf {}, rec {}) linear steps {linear_steps}, meanflow steps {meanflow_steps}, lr {lr:.2e}",
            t.epochs,
            log_entry.mean_loss,
            fmt_opt(log_entry.mean_mlf),
            fmt_opt(log_entry.mean_mmf),
            fmt_opt(log_entry.mean_rec),
        );
        logs.push(log_entry);
        if let Some(path) = checkpoint {
            let scheduled = t.checkpoint_every > 0 && epoch.is_multiple_of(t.checkpoint_every);
            if scheduled || epoch == until_epoch {
                Checkpoint {
                    config: cfg.clone(),
                    state: state.clone(),
                }
                .save(path)?;
                log::debug!("checkpoint written to {}", path.display());
            }
        }
    }
    Ok(logs)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.5}"))
}
