//! Training objectives: linear interpolation, the MeanFlow regression target
//! (via one JVP through the network), the masked adaptive MeanFlow loss,
//! the masked reconstruction regulariser, masked linear flow matching, and
//! the per-batch objective alternation.
//!
//! Losses are built on a [`Graph`] so their parameter gradients come from a
//! single reverse sweep. Every loss is normalised per video by
//! `α = 1/(Σ lm · C·H·W)` and ignores padded frames entirely.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ConditionalVelocity;
use crate::seqcond::{alpha, ConditioningSet, LossMask};

/// `(1−t)·x + t·eps`.
pub fn interpolate(x: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
    }
    x.zip_map(eps, "interpolate", |a, b| (1.0 - t) * a + t * b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepPair {
    pub r: f64,
    pub t: f64,
}

impl TimestepPair {
    pub fn new(r: f64, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&r) || !(0.0..=1.0).contains(&t) || r > t {
            return Err(Error::invalid(format!("need 0 ≤ r ≤ t ≤ 1, got r = {r}, t = {t}")));
        }
        Ok(TimestepPair { r, t })
    }

    /// The pair used by the linear objective, `r = t`.
    pub fn instantaneous(t: f64) -> Result<Self> {
        Self::new(t, t)
    }
}

/// Draws `(r, t)`: with probability `ratio_equal` a single uniform `t` with
/// `r = t`, otherwise two independent uniforms sorted ascending.
pub fn sample_timesteps<R: Rng + ?Sized>(rng: &mut R, ratio_equal: f64) -> Result<TimestepPair> {
    if !(0.0..=1.0).contains(&ratio_equal) {
        return Err(Error::invalid(format!("ratio_equal = {ratio_equal} outside [0, 1]")));
    }
    if rng.random::<f64>() < ratio_equal {
        let t = rng.random::<f64>();
        return Ok(TimestepPair { r: t, t });
    }
    let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
    Ok(TimestepPair {
        r: a.min(b),
        t: a.max(b),
    })
}

/// One training draw: data `x`, noise `eps`, the interpolant `x_t` and the
/// conditional velocity `v = eps − x`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x: Tensor,
    pub eps: Tensor,
    pub x_t: Tensor,
    pub pair: TimestepPair,
    pub v: Tensor,
}

impl FlowSample {
    pub fn new(x: Tensor, eps: Tensor, pair: TimestepPair) -> Result<Self> {
        let x_t = interpolate(&x, &eps, pair.t)?;
        let v = eps.sub(&x)?;
        Ok(FlowSample { x, eps, x_t, pair, v })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Exponent of the adaptive weight.
    pub h: f64,
    /// Keeps the adaptive weight finite at zero error.
    pub eps_w: f64,
    pub lambda_rec: f64,
    /// Probability of the linear objective for a batch.
    pub p_linear: f64,
    /// Fraction of MeanFlow pairs drawn with `r = t`.
    pub ratio_equal: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            h: 1.0,
            eps_w: 1e-3,
            lambda_rec: 1.0,
            p_linear: 0.75,
            ratio_equal: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !(self.h >= 0.0 && self.h.is_finite()) {
            return Err(Error::invalid(format!("h = {} must be a finite value ≥ 0", self.h)));
        }
        if !(self.eps_w > 0.0 && self.eps_w.is_finite()) {
            return Err(Error::invalid(format!("eps_w = {} must be positive", self.eps_w)));
        }
        if !(self.lambda_rec >= 0.0 && self.lambda_rec.is_finite()) {
            return Err(Error::invalid(format!("lambda_rec = {} must be ≥ 0", self.lambda_rec)));
        }
        if !unit.contains(&self.p_linear) || !unit.contains(&self.ratio_equal) {
            return Err(Error::invalid("p_linear and ratio_equal must lie in [0, 1]"));
        }
        Ok(())
    }

    /// `(s + eps_w)^(−h)` for a masked squared error norm `s`.
    pub fn adaptive_weight(&self, sq_norm: f64) -> f64 {
        (sq_norm + self.eps_w).powf(-self.h)
    }
}

/// Output of [`meanflow_target`], all nodes on the caller's graph.
#[derive(Clone, Copy, Debug)]
pub struct MeanFlowTarget {
    /// Network prediction `u(x_t, r, t; c)`; carries parameter gradients.
    pub u_pred: Var,
    /// `sg(v − I)`.
    pub u_tgt: Var,
    /// `I = (t−r)·du/dt` along the trajectory.
    pub i_term: Var,
}

/// Evaluates the network and its total time derivative in one JVP over
/// `(x_t, r, t)` with tangents `(v, 0, 1)`; the conditioning stays fixed.
pub fn meanflow_target<M>(g: &mut Graph, model: &M, fs: &FlowSample, c: &ConditioningSet) -> Result<MeanFlowTarget>
where
    M: ConditionalVelocity + ?Sized,
{
    let TimestepPair { r, t } = fs.pair;
    let x_t = g.constant(fs.x_t.clone());
    let rv = g.scalar(r);
    let tv = g.scalar(t);
    let dx = g.constant(fs.v.clone());
    let dr = g.scalar(0.0);
    let dt = g.scalar(1.0);
    let (u_pred, dudt) = g.jvp(&[x_t, rv, tv], &[dx, dr, dt], |g| model.velocity(g, x_t, rv, tv, c))?;
    let i_term = g.scale(dudt, t - r)?;
    let v = g.constant(fs.v.clone());
    let target = g.sub(v, i_term)?;
    let u_tgt = g.stop_gradient(target)?;
    Ok(MeanFlowTarget { u_pred, u_tgt, i_term })
}

/// `v(x_t, t) = u(x_t, t, t)`: the instantaneous velocity used by the
/// linear objective and the Euler samplers.
pub fn instantaneous_velocity<M>(g: &mut Graph, model: &M, x_t: &Tensor, t: f64, c: &ConditioningSet) -> Result<Var>
where
    M: ConditionalVelocity + ?Sized,
{
    let x = g.constant(x_t.clone());
    let rv = g.scalar(t);
    let tv = g.scalar(t);
    model.velocity(g, x, rv, tv, c)
}

fn frame_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [_, c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::invalid(format!("expected an F×C×H×W tensor, got {shape:?}"))),
    }
}

/// `‖M⊙e‖²` as a graph node.
fn masked_sq_norm(g: &mut Graph, e: Var, mask: &LossMask) -> Result<Var> {
    let (c, h, w) = frame_dims(g.shape(e))?;
    if g.shape(e)[0] != mask.values().len() {
        return Err(Error::ShapeMismatch {
            op: "loss mask",
            lhs: g.shape(e).to_vec(),
            rhs: vec![mask.values().len()],
        });
    }
    let m = g.constant(mask.broadcast(c, h, w));
    let me = g.mul(m, e)?;
    let sq = g.mul(me, me)?;
    g.sum(sq)
}

fn check_same(g: &Graph, a: Var, b: Var, op: &'static str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// `α` for the frame shape of `like` under `mask`.
pub fn alpha_for(mask: &LossMask, like: &Tensor) -> Result<f64> {
    let (c, h, w) = frame_dims(like.shape())?;
    alpha(mask, c, h, w)
}

/// Adaptive masked MeanFlow loss `sg(w)·α‖M⊙e‖²` with
/// `w = (‖M⊙e‖² + eps_w)^(−h)`.
pub fn loss_mmf_adaptive(
    g: &mut Graph,
    u_pred: Var,
    u_tgt: Var,
    mask: &LossMask,
    alpha: f64,
    cfg: &LossConfig,
) -> Result<Var> {
    check_same(g, u_pred, u_tgt, "loss_mmf_adaptive")?;
    let e = g.sub(u_pred, u_tgt)?;
    let s = masked_sq_norm(g, e, mask)?;
    let w = cfg.adaptive_weight(g.value(s).item()?);
    g.scale(s, alpha * w)
}

/// Reconstruction regulariser `α‖M⊙(x̂ − x)‖²` with
/// `x̂ = x_t − t·(u_pred + sg(I))`.
#[allow(clippy::too_many_arguments)]
pub fn loss_rec(
    g: &mut Graph,
    u_pred: Var,
    i_term: Var,
    x_t: &Tensor,
    x: &Tensor,
    t: f64,
    mask: &LossMask,
    alpha: f64,
) -> Result<Var> {
    check_same(g, u_pred, i_term, "loss_rec")?;
    x_t.expect_same_shape(x, "loss_rec")?;
    if g.shape(u_pred) != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_rec",
            lhs: g.shape(u_pred).to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let i_sg = g.stop_gradient(i_term)?;
    let u_total = g.add(u_pred, i_sg)?;
    let step = g.scale(u_total, t)?;
    let xt = g.constant(x_t.clone());
    let x_hat = g.sub(xt, step)?;
    let xv = g.constant(x.clone());
    let e = g.sub(x_hat, xv)?;
    let s = masked_sq_norm(g, e, mask)?;
    g.scale(s, alpha)
}

/// Masked linear flow loss `α‖M⊙(v_pred − (eps − x))‖²`.
pub fn loss_mlf(g: &mut Graph, v_pred: Var, eps: &Tensor, x: &Tensor, mask: &LossMask, alpha: f64) -> Result<Var> {
    let v = eps.sub(x)?;
    if g.shape(v_pred) != v.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_mlf",
            lhs: g.shape(v_pred).to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let vt = g.constant(v);
    let e = g.sub(v_pred, vt)?;
    let s = masked_sq_norm(g, e, mask)?;
    g.scale(s, alpha)
}

/// `L_MMF_adapt + λ_rec·L_rec`.
pub fn rmmf(g: &mut Graph, mmf: Var, rec: Var, lambda_rec: f64) -> Result<Var> {
    let weighted = g.scale(rec, lambda_rec)?;
    g.add(mmf, weighted)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    MaskedLinearFlow,
    MaskedMeanFlow,
}

/// Bernoulli choice of the objective for one batch.
pub fn pick_objective<R: Rng + ?Sized>(rng: &mut R, p_linear: f64) -> Result<Objective> {
    if !(0.0..=1.0).contains(&p_linear) {
        return Err(Error::invalid(format!("p_linear = {p_linear} outside [0, 1]")));
    }
    Ok(if rng.random::<f64>() < p_linear {
        Objective::MaskedLinearFlow
    } else {
        Objective::MaskedMeanFlow
    })
}

/// Scalar loss node plus the values of its parts, for logging.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveLoss {
    pub total: Var,
    pub mmf: Option<f64>,
    pub rec: Option<f64>,
    pub mlf: Option<f64>,
}

/// Builds the full loss for one video under `objective`. The linear
/// objective queries the same network with `r = t`.
pub fn objective_loss<M>(
    g: &mut Graph,
    model: &M,
    fs: &FlowSample,
    c: &ConditioningSet,
    cfg: &LossConfig,
    objective: Objective,
) -> Result<ObjectiveLoss>
where
    M: ConditionalVelocity + ?Sized,
{
    let mask = LossMask::from_padding(c.padding());
    let a = alpha_for(&mask, &fs.x)?;
    match objective {
        Objective::MaskedLinearFlow => {
            let v_pred = instantaneous_velocity(g, model, &fs.x_t, fs.pair.t, c)?;
            let total = loss_mlf(g, v_pred, &fs.eps, &fs.x, &mask, a)?;
            Ok(ObjectiveLoss {
                total,
                mmf: None,
                rec: None,
                mlf: Some(g.value(total).item()?),
            })
        }
        Objective::MaskedMeanFlow => {
            let tgt = meanflow_target(g, model, fs, c)?;
            let mmf = loss_mmf_adaptive(g, tgt.u_pred, tgt.u_tgt, &mask, a, cfg)?;
            let rec = loss_rec(g, tgt.u_pred, tgt.i_term, &fs.x_t, &fs.x, fs.pair.t, &mask, a)?;
            let total = rmmf(g, mmf, rec, cfg.lambda_rec)?;
            Ok(ObjectiveLoss {
                total,
                mmf: Some(g.value(mmf).item()?),
                rec: Some(g.value(rec).item()?),
                mlf: None,
            })
        }
    }
}

/// Closed-form mean velocity of a point mass at `x_star`:
/// `u(x_t, r, t) = (x_t − x*)/t`, independent of `r` and of conditioning.
#[derive(Clone, Debug)]
pub struct PointMassField {
    pub x_star: Tensor,
}

impl PointMassField {
    pub fn new(x_star: Tensor) -> Self {
        PointMassField { x_star }
    }

    /// Numeric evaluation, `t > 0`.
    pub fn eval(&self, x_t: &Tensor, t: f64) -> Result<Tensor> {
        if t <= 0.0 {
            return Err(Error::invalid("point-mass field is singular at t = 0"));
        }
        x_t.zip_map(&self.x_star, "point_mass", |x, s| (x - s) / t)
    }
}

impl ConditionalVelocity for PointMassField {
    fn velocity(&self, g: &mut Graph, x_t: Var, _r: Var, t: Var, _c: &ConditioningSet) -> Result<Var> {
        let xs = g.constant(self.x_star.clone());
        let d = g.sub(x_t, xs)?;
        let inv_t = g.recip(t)?;
        g.mul(d, inv_t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::seqcond::{temporal_normalize, PaddedVideo};
    use crate::ParameterSet;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct ConstantModel(f64);

    impl ConditionalVelocity for ConstantModel {
        fn velocity(&self, g: &mut Graph, x_t: Var, _r: Var, _t: Var, _c: &ConditioningSet) -> Result<Var> {
            Ok(g.constant(Tensor::full(g.shape(x_t), self.0)))
        }
    }

    struct IdentityModel;

    impl ConditionalVelocity for IdentityModel {
        fn velocity(&self, g: &mut Graph, x_t: Var, _r: Var, _t: Var, _c: &ConditioningSet) -> Result<Var> {
            g.scale(x_t, 1.0)
        }
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            channels: vec![4, 8],
            frames: 4,
            in_channels: 1,
            height: 4,
            width: 4,
            embed_dim: 8,
            seed: 0,
        }
    }

    fn random_video(shape: [usize; 4], valid: usize, rng: &mut ChaCha8Rng) -> PaddedVideo {
        let frames: Vec<Tensor> = (0..valid)
            .map(|_| Tensor::randn(&shape[1..], rng))
            .collect();
        temporal_normalize(&frames, shape[0]).unwrap()
    }

    fn perturbed_params(model: &Model, rng: &mut ChaCha8Rng) -> ParameterSet {
        let mut p = model.init_params(rng);
        for (_, t) in p.iter_mut() {
            let noise = Tensor::randn(t.shape(), rng).scale(0.2);
            *t = t.add(&noise).unwrap();
        }
        p
    }

    fn setup(valid: usize, seed: u64) -> (PaddedVideo, ConditioningSet, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tiny_config().video_shape();
        let v = random_video(shape, valid, &mut rng);
        let c = ConditioningSet::from_video(&v, 0.5, &[0]).unwrap();
        let eps = Tensor::randn(&shape, &mut rng);
        (v, c, eps)
    }

    #[test]
    fn interpolation_examples() {
        let x = Tensor::from_vec(vec![0.0, 1.0]);
        let e = Tensor::from_vec(vec![2.0, 3.0]);
        assert_eq!(interpolate(&x, &e, 0.0).unwrap(), x);
        assert_eq!(interpolate(&x, &e, 1.0).unwrap(), e);
        assert_eq!(interpolate(&x, &e, 0.25).unwrap().data()[0], 0.5);
        assert!(interpolate(&x, &Tensor::zeros(&[3]), 0.5).is_err());
    }

    #[test]
    fn timestep_sampling_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let p = sample_timesteps(&mut rng, 1.0).unwrap();
            assert_eq!(p.r, p.t);
            let q = sample_timesteps(&mut rng, 0.0).unwrap();
            assert!(q.r <= q.t);
        }
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let p = sample_timesteps(&mut rng, 0.0).unwrap();
                p.t - p.r
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0 / 3.0).abs() <= 0.01, "mean gap {mean}");
        assert!(sample_timesteps(&mut rng, 1.5).is_err());
    }

    #[test]
    fn objective_alternation_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let linear = (0..n)
            .filter(|_| pick_objective(&mut rng, 0.75).unwrap() == Objective::MaskedLinearFlow)
            .count();
        assert!((linear as f64 / n as f64 - 0.75).abs() <= 0.01);
        assert!((0..100).all(|_| pick_objective(&mut rng, 1.0).unwrap() == Objective::MaskedLinearFlow));
        assert!((0..100).all(|_| pick_objective(&mut rng, 0.0).unwrap() == Objective::MaskedMeanFlow));
    }

    #[test]
    fn target_collapses_to_v_when_r_equals_t() {
        let model = Model::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = perturbed_params(&model, &mut rng);
        let (v, c, eps) = setup(3, 3);
        let fs = FlowSample::new(v.frames().clone(), eps, TimestepPair::instantaneous(0.4).unwrap()).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, &params, true).unwrap();
        let tgt = meanflow_target(&mut g, &bound, &fs, &c).unwrap();
        assert_eq!(g.value(tgt.u_tgt), &fs.v);
        assert!(g.value(tgt.i_term).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_model_has_zero_time_derivative() {
        let (v, c, eps) = setup(4, 4);
        let fs = FlowSample::new(v.frames().clone(), eps, TimestepPair::new(0.2, 0.9).unwrap()).unwrap();
        let mut g = Graph::new();
        let tgt = meanflow_target(&mut g, &ConstantModel(1.5), &fs, &c).unwrap();
        assert_eq!(g.value(tgt.u_tgt), &fs.v);
    }

    #[test]
    fn identity_model_target_matches_hand_chain_rule() {
        let (v, c, eps) = setup(4, 5);
        let (r, t) = (0.3, 0.8);
        let fs = FlowSample::new(v.frames().clone(), eps, TimestepPair::new(r, t).unwrap()).unwrap();
        let mut g = Graph::new();
        let tgt = meanflow_target(&mut g, &IdentityModel, &fs, &c).unwrap();
        let expected = fs.v.scale(1.0 - t + r);
        assert!(g.value(tgt.u_tgt).max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn point_mass_field_is_its_own_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (v, c, eps) = setup(4, 6);
        let field = PointMassField::new(v.frames().clone());
        for _ in 0..20 {
            let pair = sample_timesteps(&mut rng, 0.0).unwrap();
            let pair = TimestepPair::new(pair.r, pair.t.max(0.05)).unwrap();
            let fs = FlowSample::new(v.frames().clone(), eps.clone(), pair).unwrap();
            let mut g = Graph::new();
            let tgt = meanflow_target(&mut g, &field, &fs, &c).unwrap();
            let diff = g.value(tgt.u_pred).max_abs_diff(g.value(tgt.u_tgt)).unwrap();
            assert!(diff < 1e-9, "diff {diff}");
        }
    }

    #[test]
    fn adaptive_loss_examples() {
        let mask = LossMask::from_padding(&[false]);
        let cfg = LossConfig {
            h: 2.0,
            ..LossConfig::default()
        };
        let mut g = Graph::new();
        let u = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let z = g.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let l = loss_mmf_adaptive(&mut g, u, z, &mask, 1.0, &cfg).unwrap();
        let expected = (1.0f64 + 1e-3).powi(-2);
        assert!((g.value(l).item().unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.998).abs() < 1e-3);

        let same = loss_mmf_adaptive(&mut g, u, u, &mask, 1.0, &cfg).unwrap();
        assert_eq!(g.value(same).item().unwrap(), 0.0);

        let (vid, c, eps) = setup(3, 7);
        let mask = LossMask::from_padding(c.padding());
        let a = alpha_for(&mask, vid.frames()).unwrap();
        let p = g.constant(eps.clone());
        let q = g.constant(vid.frames().clone());
        let h0 = LossConfig {
            h: 0.0,
            ..LossConfig::default()
        };
        let adaptive = loss_mmf_adaptive(&mut g, p, q, &mask, a, &h0).unwrap();
        let plain = loss_mlf(&mut g, p, vid.frames(), &Tensor::zeros(eps.shape()), &mask, a).unwrap();
        // both reduce to α‖M⊙(eps − x)‖²
        let diff = g.value(adaptive).item().unwrap() - g.value(plain).item().unwrap();
        assert!(diff.abs() < 1e-12);
    }

    #[test]
    fn reconstruction_loss_examples() {
        let (vid, c, eps) = setup(3, 8);
        let mask = LossMask::from_padding(c.padding());
        let a = alpha_for(&mask, vid.frames()).unwrap();
        let x = vid.frames();
        let mut g = Graph::new();
        let zeros = g.constant(Tensor::zeros(x.shape()));
        let junk = g.constant(Tensor::full(x.shape(), 3.0));
        let at_zero = loss_rec(&mut g, junk, zeros, x, x, 0.0, &mask, a).unwrap();
        assert_eq!(g.value(at_zero).item().unwrap(), 0.0);

        let l = loss_rec(&mut g, zeros, zeros, &eps, x, 1.0, &mask, a).unwrap();
        let m = mask.broadcast(1, 4, 4);
        let expected = a * eps.sub(x).unwrap().mul(&m).unwrap().sq_norm();
        assert!((g.value(l).item().unwrap() - expected).abs() < 1e-12);

        // exact transport: u + I equals the true velocity over [0, t]
        let fs = FlowSample::new(x.clone(), eps.clone(), TimestepPair::new(0.2, 0.7).unwrap()).unwrap();
        let v = g.constant(fs.v.clone());
        let exact = loss_rec(&mut g, v, zeros, &fs.x_t, x, 0.7, &mask, a).unwrap();
        assert!(g.value(exact).item().unwrap() < 1e-28);
    }

    #[test]
    fn linear_loss_examples() {
        let (vid, c, eps) = setup(2, 9);
        let mask = LossMask::from_padding(c.padding());
        let a = alpha_for(&mask, vid.frames()).unwrap();
        let x = vid.frames();
        let mut g = Graph::new();
        let v = g.constant(eps.sub(x).unwrap());
        let l = loss_mlf(&mut g, v, &eps, x, &mask, a).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);

        // eps − x = 1 on valid frames, v_pred = 0 → loss = 1
        let ones_on_valid = mask.broadcast(1, 4, 4);
        let zero = g.constant(Tensor::zeros(x.shape()));
        let l = loss_mlf(&mut g, zero, &ones_on_valid, &Tensor::zeros(x.shape()), &mask, a).unwrap();
        assert!((g.value(l).item().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rmmf_examples() {
        let mut g = Graph::new();
        let a = g.scalar(0.4);
        let b = g.scalar(0.2);
        let l = rmmf(&mut g, a, b, 1.0).unwrap();
        assert!((g.value(l).item().unwrap() - 0.6).abs() < 1e-15);
        let l0 = rmmf(&mut g, a, b, 0.0).unwrap();
        assert_eq!(g.value(l0).item().unwrap(), 0.4);
        let z = g.scalar(0.0);
        let lz = rmmf(&mut g, z, z, 1.0).unwrap();
        assert_eq!(g.value(lz).item().unwrap(), 0.0);
    }

    fn mmf_grad(cached: bool, cfg: &LossConfig) -> (ParameterSet, f64) {
        let model = Model::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = perturbed_params(&model, &mut rng);
        let (vid, c, eps) = setup(3, 11);
        let fs = FlowSample::new(vid.frames().clone(), eps, TimestepPair::new(0.25, 0.75).unwrap()).unwrap();
        let mask = LossMask::from_padding(c.padding());
        let a = alpha_for(&mask, &fs.x).unwrap();

        let mut g = Graph::new();
        let bound = model.bind(&mut g, &params, true).unwrap();
        let tgt = meanflow_target(&mut g, &bound, &fs, &c).unwrap();
        let loss = if cached {
            let frozen = g.value(tgt.u_tgt).clone();
            let mut g2 = Graph::new();
            let bound2 = model.bind(&mut g2, &params, true).unwrap();
            let x_t = g2.constant(fs.x_t.clone());
            let (r, t) = (g2.scalar(0.25), g2.scalar(0.75));
            let u = bound2.velocity(&mut g2, x_t, r, t, &c).unwrap();
            let target = g2.constant(frozen);
            let l = loss_mmf_adaptive(&mut g2, u, target, &mask, a, cfg).unwrap();
            return (g2.grad(l).unwrap(), g2.value(l).item().unwrap());
        } else {
            loss_mmf_adaptive(&mut g, tgt.u_pred, tgt.u_tgt, &mask, a, cfg).unwrap()
        };
        (g.grad(loss).unwrap(), g.value(loss).item().unwrap())
    }

    #[test]
    fn cached_and_live_targets_give_identical_gradients() {
        let cfg = LossConfig {
            h: 2.0,
            ..LossConfig::default()
        };
        let (live, l1) = mmf_grad(false, &cfg);
        let (cached, l2) = mmf_grad(true, &cfg);
        assert_eq!(l1, l2);
        let scale = live.iter().map(|(_, t)| t.sq_norm()).sum::<f64>().sqrt();
        assert!(scale > 0.0);
        assert!(live.max_abs_diff(&cached).unwrap() <= 1e-10 * scale.max(1.0));
    }

    #[test]
    fn adaptive_gradient_is_weight_times_base_gradient() {
        let cfg = LossConfig {
            h: 1.5,
            ..LossConfig::default()
        };
        let (adaptive, loss) = mmf_grad(false, &cfg);
        let base_cfg = LossConfig {
            h: 0.0,
            ..LossConfig::default()
        };
        let (base, base_loss) = mmf_grad(false, &base_cfg);
        let alpha_inv = 1.0 / alpha(&LossMask::from_padding(&[false, false, false, true]), 1, 4, 4).unwrap();
        let w = cfg.adaptive_weight(base_loss * alpha_inv);
        assert!((loss - w * base_loss).abs() <= 1e-14 * loss.abs().max(1.0));
        for (name, g) in adaptive.iter() {
            let expected = base.get(name).unwrap().scale(w);
            let tol = 1e-12 * expected.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
            assert!(g.max_abs_diff(&expected).unwrap() <= tol, "{name}");
        }
    }

    #[test]
    fn equal_per_element_error_gives_equal_loss_for_any_length() {
        let shape = [8, 1, 4, 4];
        let mut losses = Vec::new();
        for valid in [2usize, 4, 8] {
            let padding: Vec<bool> = (0..8).map(|i| i >= valid).collect();
            let mask = LossMask::from_padding(&padding);
            let a = alpha(&mask, 1, 4, 4).unwrap();
            let mut g = Graph::new();
            let u = g.constant(Tensor::full(&shape, 0.3));
            let z = g.constant(Tensor::zeros(&shape));
            // the adaptive weight sees the unnormalised norm, so compare at h = 0
            let cfg = LossConfig {
                h: 0.0,
                ..LossConfig::default()
            };
            let l = loss_mmf_adaptive(&mut g, u, z, &mask, a, &cfg).unwrap();
            let lin = loss_mlf(&mut g, u, &Tensor::zeros(&shape), &Tensor::zeros(&shape), &mask, a).unwrap();
            let rec = loss_rec(&mut g, u, z, &Tensor::zeros(&shape), &Tensor::zeros(&shape), 1.0, &mask, a).unwrap();
            losses.push([
                g.value(lin).item().unwrap(),
                g.value(rec).item().unwrap(),
                g.value(l).item().unwrap(),
            ]);
        }
        for l in &losses[1..] {
            for k in 0..3 {
                assert!((l[k] - losses[0][k]).abs() <= 1e-12, "{losses:?}");
            }
        }
    }

    #[test]
    fn objective_loss_reports_parts() {
        let model = Model::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = perturbed_params(&model, &mut rng);
        let (vid, c, eps) = setup(3, 13);
        let fs = FlowSample::new(vid.frames().clone(), eps, TimestepPair::new(0.1, 0.6).unwrap()).unwrap();
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, &params, true).unwrap();
        let mf = objective_loss(&mut g, &bound, &fs, &c, &cfg, Objective::MaskedMeanFlow).unwrap();
        let total = g.value(mf.total).item().unwrap();
        assert!((total - mf.mmf.unwrap() - mf.rec.unwrap()).abs() < 1e-12);
        assert!(mf.mlf.is_none());
        let lin = objective_loss(&mut g, &bound, &fs, &c, &cfg, Objective::MaskedLinearFlow).unwrap();
        assert!(lin.mlf.unwrap() > 0.0 && lin.mmf.is_none());
        let grads = g.grad(mf.total).unwrap();
        assert!(grads.is_finite());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn padded_content_never_changes_losses(seed in 0u64..1000, valid in 1usize..4, t in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [4usize, 1, 4, 4];
            let vid = random_video(shape, valid, &mut rng);
            let mask = vid.loss_mask();
            let a = alpha_for(&mask, vid.frames()).unwrap();
            let eps = Tensor::randn(&shape, &mut rng);
            let u = Tensor::randn(&shape, &mut rng);
            let i = Tensor::randn(&shape, &mut rng);
            let garble = |base: &Tensor, rng: &mut ChaCha8Rng| {
                let mut out = base.clone();
                for f in valid..4 {
                    for x in out.outer_slice_mut(f) {
                        *x = rand::Rng::random_range(rng, -1e3..1e3);
                    }
                }
                out
            };
            let eval = |u: &Tensor, i: &Tensor, eps: &Tensor, x: &Tensor| -> [f64; 3] {
                let mut g = Graph::new();
                let (uv, iv) = (g.constant(u.clone()), g.constant(i.clone()));
                let tgt = g.constant(x.clone());
                let m = loss_mmf_adaptive(&mut g, uv, tgt, &mask, a, &LossConfig::default()).unwrap();
                let r = loss_rec(&mut g, uv, iv, eps, x, t, &mask, a).unwrap();
                let l = loss_mlf(&mut g, uv, eps, x, &mask, a).unwrap();
                [g.value(m).item().unwrap(), g.value(r).item().unwrap(), g.value(l).item().unwrap()]
            };
            let clean = eval(&u, &i, &eps, vid.frames());
            let dirty = eval(
                &garble(&u, &mut rng),
                &garble(&i, &mut rng),
                &garble(&eps, &mut rng),
                &garble(vid.frames(), &mut rng),
            );
            for k in 0..3 {
                prop_assert!((clean[k] - dirty[k]).abs() <= 1e-10 * clean[k].abs().max(1e-300));
            }
        }
    }
}
