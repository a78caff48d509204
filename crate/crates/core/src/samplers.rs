//! Generators: one-step and interval MeanFlow sampling, Euler integration of
//! the instantaneous velocity, and classifier-free guided Euler.
//!
//! Every sampler integrates from noise at `t = 1` to data at `t = 0`. The
//! noise is drawn from a ChaCha8 stream seeded by the request, so a seed,
//! field and conditioning fully determine the output. Padded frames are
//! zeroed in the returned video.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::flowobjectives::PointMassField;
use crate::model::Model;
use crate::seqcond::{ConditioningSet, PaddedVideo};

/// Anything that can be queried for a mean velocity `u(x_t, r, t; c)`.
/// Instantaneous velocities are queried with `r = t`.
pub trait VelocityField {
    fn eval(&self, x_t: &Tensor, r: f64, t: f64, c: &ConditioningSet) -> Result<Tensor>;

    /// Shape of one video, `F×C×H×W`.
    fn video_shape(&self, c: &ConditioningSet) -> Vec<usize> {
        c.x_m().shape().to_vec()
    }
}

/// A trained (or freshly initialised) network.
#[derive(Clone, Copy)]
pub struct Network<'a> {
    pub model: &'a Model,
    pub params: &'a ParameterSet,
}

impl<'a> Network<'a> {
    pub fn new(model: &'a Model, params: &'a ParameterSet) -> Self {
        Network { model, params }
    }
}

impl VelocityField for Network<'_> {
    fn eval(&self, x_t: &Tensor, r: f64, t: f64, c: &ConditioningSet) -> Result<Tensor> {
        self.model.forward(self.params, x_t, r, t, c)
    }
}

impl VelocityField for PointMassField {
    fn eval(&self, x_t: &Tensor, _r: f64, t: f64, _c: &ConditioningSet) -> Result<Tensor> {
        PointMassField::eval(self, x_t, t)
    }
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn eval(&self, x_t: &Tensor, r: f64, t: f64, c: &ConditioningSet) -> Result<Tensor> {
        (**self).eval(x_t, r, t, c)
    }

    fn video_shape(&self, c: &ConditioningSet) -> Vec<usize> {
        (**self).video_shape(c)
    }
}

/// Wraps a field and counts its invocations.
pub struct Counted<F> {
    inner: F,
    calls: Cell<usize>,
}

impl<F> Counted<F> {
    pub fn new(inner: F) -> Self {
        Counted {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<F: VelocityField> VelocityField for Counted<F> {
    fn eval(&self, x_t: &Tensor, r: f64, t: f64, c: &ConditioningSet) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.eval(x_t, r, t, c)
    }

    fn video_shape(&self, c: &ConditioningSet) -> Vec<usize> {
        self.inner.video_shape(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    pub c: ConditioningSet,
    pub seed: u64,
    pub steps: usize,
    /// Guidance scale; only read by [`sample_cfg`].
    pub guidance: f64,
}

impl SampleRequest {
    pub fn one_step(c: ConditioningSet, seed: u64) -> Self {
        SampleRequest {
            c,
            seed,
            steps: 1,
            guidance: 1.0,
        }
    }
}

/// `ε ~ N(0, I)` from a ChaCha8 stream seeded with `seed`.
pub fn draw_noise(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn finish(x: Tensor, c: &ConditioningSet) -> Result<PaddedVideo> {
    PaddedVideo::with_zeroed_padding(x, c.padding().to_vec())
}

/// `x_r = x_t − (t−r)·u(x_t, r, t)`.
fn interval_step<F: VelocityField + ?Sized>(
    field: &F,
    x: &Tensor,
    r: f64,
    t: f64,
    c: &ConditioningSet,
) -> Result<Tensor> {
    let u = field.eval(x, r, t, c)?;
    let h = t - r;
    x.zip_map(&u, "interval_step", |xv, uv| xv - h * uv)
}

/// `x = ε − u(ε, 0, 1)`.
pub fn sample_one_step<F: VelocityField + ?Sized>(field: &F, req: &SampleRequest) -> Result<PaddedVideo> {
    if req.steps != 1 {
        return Err(Error::invalid(format!("one-step sampling requested with {} steps", req.steps)));
    }
    sample_interval(field, &req.c, &[1.0, 0.0], req.seed)
}

/// Chains interval steps along a strictly decreasing grid from 1 to 0.
pub fn sample_interval<F: VelocityField + ?Sized>(
    field: &F,
    c: &ConditioningSet,
    t_grid: &[f64],
    seed: u64,
) -> Result<PaddedVideo> {
    validate_grid(t_grid)?;
    let mut x = draw_noise(&field.video_shape(c), seed);
    for w in t_grid.windows(2) {
        x = interval_step(field, &x, w[1], w[0], c)?;
    }
    finish(x, c)
}

fn validate_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.len() < 2 || t_grid[0] != 1.0 || *t_grid.last().unwrap() != 0.0 {
        return Err(Error::invalid(format!("time grid must run from 1 to 0, got {t_grid:?}")));
    }
    if t_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("time grid must be strictly decreasing"));
    }
    Ok(())
}

/// Uniform grid `1, 1 − 1/n, …, 0`.
pub fn uniform_grid(n_steps: usize) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(Error::invalid("need at least one step"));
    }
    Ok((0..=n_steps)
        .map(|k| (n_steps - k) as f64 / n_steps as f64)
        .collect())
}

/// Euler integration of `v(x_t, t) = u(x_t, t, t)` from 1 to 0.
pub fn sample_euler_linear<F: VelocityField + ?Sized>(
    field: &F,
    c: &ConditioningSet,
    n_steps: usize,
    seed: u64,
) -> Result<PaddedVideo> {
    let grid = uniform_grid(n_steps)?;
    let mut x = draw_noise(&field.video_shape(c), seed);
    for w in grid.windows(2) {
        let (t, next) = (w[0], w[1]);
        let v = field.eval(&x, t, t, c)?;
        let dt = t - next;
        x = x.zip_map(&v, "euler_step", |xv, vv| xv - dt * vv)?;
    }
    finish(x, c)
}

/// Guided Euler: each step combines a conditional and an unconditional
/// pass as `g·v_c + (1−g)·v_u` (= `v_u + g(v_c − v_u)`).
pub fn sample_cfg<F: VelocityField + ?Sized>(
    field: &F,
    c: &ConditioningSet,
    guidance: f64,
    n_steps: usize,
    seed: u64,
) -> Result<PaddedVideo> {
    if !(guidance >= 0.0 && guidance.is_finite()) {
        return Err(Error::invalid(format!("guidance {guidance} must be ≥ 0")));
    }
    let grid = uniform_grid(n_steps)?;
    let uncond = c.unconditional();
    let mut x = draw_noise(&field.video_shape(c), seed);
    for w in grid.windows(2) {
        let (t, next) = (w[0], w[1]);
        let v_c = field.eval(&x, t, t, c)?;
        let v_u = field.eval(&x, t, t, &uncond)?;
        let v = v_c.zip_map(&v_u, "cfg", |a, b| guidance * a + (1.0 - guidance) * b)?;
        let dt = t - next;
        x = x.zip_map(&v, "cfg_step", |xv, vv| xv - dt * vv)?;
    }
    finish(x, c)
}

/// A sampler choice, as configured for evaluation and benchmarking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerKind {
    OneStep,
    Interval { grid: Vec<f64> },
    Euler { steps: usize },
    Cfg { guidance: f64, steps: usize },
}

impl SamplerKind {
    pub fn run<F: VelocityField + ?Sized>(&self, field: &F, c: &ConditioningSet, seed: u64) -> Result<PaddedVideo> {
        match self {
            SamplerKind::OneStep => sample_one_step(field, &SampleRequest::one_step(c.clone(), seed)),
            SamplerKind::Interval { grid } => sample_interval(field, c, grid, seed),
            SamplerKind::Euler { steps } => sample_euler_linear(field, c, *steps, seed),
            SamplerKind::Cfg { guidance, steps } => sample_cfg(field, c, *guidance, *steps, seed),
        }
    }

    /// Network evaluations per generated video.
    pub fn evaluations(&self) -> usize {
        match self {
            SamplerKind::OneStep => 1,
            SamplerKind::Interval { grid } => grid.len().saturating_sub(1),
            SamplerKind::Euler { steps } => *steps,
            SamplerKind::Cfg { steps, .. } => 2 * steps,
        }
    }

    pub fn label(&self) -> String {
        match self {
            SamplerKind::OneStep => "meanflow-1".to_string(),
            SamplerKind::Interval { grid } => format!("meanflow-{}", grid.len().saturating_sub(1)),
            SamplerKind::Euler { steps } => format!("euler-{steps}"),
            SamplerKind::Cfg { guidance, steps } => format!("cfg-{steps}-g{guidance}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::seqcond::temporal_normalize;

    fn conditioning(valid: usize, seed: u64) -> (PaddedVideo, ConditioningSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<Tensor> = (0..valid).map(|_| Tensor::randn(&[1, 4, 4], &mut rng)).collect();
        let v = temporal_normalize(&frames, 6).unwrap();
        let c = ConditioningSet::from_video(&v, 0.4, &[0]).unwrap();
        (v, c)
    }

    /// `a` when conditioned, `b` on the null conditioning.
    struct TwoConstants(f64, f64);

    impl VelocityField for TwoConstants {
        fn eval(&self, x_t: &Tensor, _r: f64, _t: f64, c: &ConditioningSet) -> Result<Tensor> {
            let k = if c.phi().is_some() { self.0 } else { self.1 };
            Ok(Tensor::full(x_t.shape(), k))
        }
    }

    fn valid_part(v: &PaddedVideo) -> Vec<f64> {
        v.valid_indices().flat_map(|i| v.frames().outer_slice(i).to_vec()).collect()
    }

    #[test]
    fn zero_initialised_network_returns_noise() {
        let cfg = ModelConfig {
            channels: vec![4, 8],
            frames: 6,
            height: 4,
            width: 4,
            embed_dim: 8,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg).unwrap();
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let (_, c) = conditioning(6, 1);
        let net = Network::new(&model, &params);
        let out = sample_one_step(&net, &SampleRequest::one_step(c.clone(), 5)).unwrap();
        assert_eq!(out.frames(), &draw_noise(&[6, 1, 4, 4], 5));
        for n in [1, 3] {
            let e = sample_euler_linear(&net, &c, n, 5).unwrap();
            assert_eq!(e.frames(), &draw_noise(&[6, 1, 4, 4], 5));
        }
    }

    #[test]
    fn point_mass_oracle_is_recovered_by_every_sampler() {
        let (v, c) = conditioning(6, 2);
        let field = PointMassField::new(v.frames().clone());
        let one = sample_one_step(&field, &SampleRequest::one_step(c.clone(), 3)).unwrap();
        assert!(one.frames().max_abs_diff(v.frames()).unwrap() <= 1e-9);
        for n in [1, 4, 24] {
            let grid = uniform_grid(n).unwrap();
            let out = sample_interval(&field, &c, &grid, 3).unwrap();
            assert!(out.frames().max_abs_diff(v.frames()).unwrap() <= 1e-9, "grid {n}");
            let e = sample_euler_linear(&field, &c, n, 3).unwrap();
            assert!(e.frames().max_abs_diff(v.frames()).unwrap() <= 1e-9, "euler {n}");
        }
        let uneven = sample_interval(&field, &c, &[1.0, 0.9, 0.35, 0.01, 0.0], 3).unwrap();
        assert!(uneven.frames().max_abs_diff(v.frames()).unwrap() <= 1e-9);
    }

    #[test]
    fn one_step_equals_single_interval_bitwise() {
        let (v, c) = conditioning(4, 4);
        let field = PointMassField::new(v.frames().scale(0.3));
        let a = sample_one_step(&field, &SampleRequest::one_step(c.clone(), 9)).unwrap();
        let b = sample_interval(&field, &c, &[1.0, 0.0], 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, sample_one_step(&field, &SampleRequest::one_step(c, 9)).unwrap());
    }

    #[test]
    fn padding_is_copied_and_zeroed() {
        let (v, c) = conditioning(3, 5);
        let out = sample_one_step(&TwoConstants(0.5, 0.0), &SampleRequest::one_step(c.clone(), 1)).unwrap();
        assert_eq!(out.padding(), v.padding());
        for i in 3..6 {
            assert!(out.frames().outer_slice(i).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn euler_is_exact_on_constant_fields() {
        let (_, c) = conditioning(6, 6);
        let field = TwoConstants(0.7, 0.0);
        let reference = sample_euler_linear(&field, &c, 1, 2).unwrap();
        let expected = draw_noise(&[6, 1, 4, 4], 2).map(|e| e - 0.7);
        assert_eq!(reference.frames(), &expected);
        for n in [2, 7, 25] {
            let out = sample_euler_linear(&field, &c, n, 2).unwrap();
            assert!(out.frames().max_abs_diff(&expected).unwrap() < 1e-12);
        }
    }

    #[test]
    fn cfg_combination_examples() {
        let (_, c) = conditioning(6, 7);
        let field = TwoConstants(0.8, 0.2);
        let noise = draw_noise(&[6, 1, 4, 4], 3);
        // g = 2: per-step velocity b + 2(a − b)
        let g2 = sample_cfg(&field, &c, 2.0, 1, 3).unwrap();
        let expected = noise.map(|e| e - (0.2 + 2.0 * (0.8 - 0.2)));
        assert!(g2.frames().max_abs_diff(&expected).unwrap() < 1e-15);
        // g = 1 collapses to the conditional Euler sampler
        for n in [1, 5] {
            assert_eq!(sample_cfg(&field, &c, 1.0, n, 3).unwrap(), sample_euler_linear(&field, &c, n, 3).unwrap());
        }
        // g = 0 follows the unconditional trajectory
        let g0 = sample_cfg(&field, &c, 0.0, 4, 3).unwrap();
        let uncond = sample_euler_linear(&field, &c.unconditional(), 4, 3).unwrap();
        assert_eq!(valid_part(&g0), valid_part(&uncond));
        assert!(sample_cfg(&field, &c, -1.0, 4, 3).is_err());
    }

    #[test]
    fn invocation_counts() {
        let (_, c) = conditioning(6, 8);
        let field = Counted::new(TwoConstants(0.1, 0.0));
        sample_one_step(&field, &SampleRequest::one_step(c.clone(), 0)).unwrap();
        assert_eq!(field.calls(), 1);
        let field = Counted::new(TwoConstants(0.1, 0.0));
        sample_cfg(&field, &c, 1.5, 25, 0).unwrap();
        assert_eq!(field.calls(), 50);
        assert_eq!(SamplerKind::Cfg { guidance: 1.5, steps: 25 }.evaluations(), 50);
    }

    #[test]
    fn malformed_requests_are_rejected() {
        let (_, c) = conditioning(6, 9);
        let f = TwoConstants(0.0, 0.0);
        for grid in [vec![1.0], vec![0.9, 0.0], vec![1.0, 0.1], vec![1.0, 0.5, 0.6, 0.0]] {
            assert!(sample_interval(&f, &c, &grid, 0).is_err(), "{grid:?}");
        }
        assert!(sample_euler_linear(&f, &c, 0, 0).is_err());
        let mut req = SampleRequest::one_step(c, 0);
        req.steps = 2;
        assert!(sample_one_step(&f, &req).is_err());
    }

    #[test]
    fn refinement_on_a_random_network_stays_finite() {
        let cfg = ModelConfig {
            channels: vec![4, 8],
            frames: 6,
            height: 4,
            width: 4,
            embed_dim: 8,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = model.init_params(&mut rng);
        for (_, t) in params.iter_mut() {
            *t = t.add(&Tensor::randn(t.shape(), &mut rng).scale(0.2)).unwrap();
        }
        let (_, c) = conditioning(5, 10);
        let net = Network::new(&model, &params);
        let one = sample_interval(&net, &c, &[1.0, 0.0], 1).unwrap();
        let two = sample_interval(&net, &c, &[1.0, 0.5, 0.0], 1).unwrap();
        assert!(one.frames().is_finite() && two.frames().is_finite());
        assert_ne!(one, two);
    }

    #[test]
    fn sampler_kind_serialises() {
        let k = SamplerKind::Cfg { guidance: 2.0, steps: 25 };
        let s = serde_json::to_string(&k).unwrap();
        assert_eq!(serde_json::from_str::<SamplerKind>(&s).unwrap(), k);
    }
}
