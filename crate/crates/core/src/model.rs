//! Small conditional spatio-temporal U-Net predicting the mean velocity
//! `u(x_t, r, t; x_m, φ, p)`.
//!
//! Frames are processed as a batch by 3×3 spatial convolutions; temporal
//! mixing happens through per-pixel self-attention across the frame axis,
//! with padded frames masked out as keys. Conditioning enters as follows:
//!
//! * `x_m` and a per-frame padding indicator are concatenated to `x_t` as
//!   extra input channels;
//! * `r`, `t` and `φ` are sinusoidally embedded and summed, together with an
//!   embedding of each frame's phase within the valid span (0 at the first
//!   frame, 1 at the last), then projected by a small MLP into a per-frame
//!   bias added after the input convolution;
//! * a missing `φ` (unconditional pass) uses a learned null embedding.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::seqcond::ConditioningSet;

/// Large negative logit for masked attention keys; `exp` underflows to 0.
const MASKED_LOGIT: f64 = -1e9;
const MAX_FREQUENCY: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature channels per resolution level.
    pub channels: Vec<usize>,
    /// Temporal capacity `F`.
    pub frames: usize,
    /// Channels of a video frame.
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Width of the sinusoidal embeddings; must be even.
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: vec![16, 32],
            frames: 8,
            in_channels: 1,
            height: 16,
            width: 16,
            embed_dim: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Reference configuration at the size of the original latent model
    /// (four levels, 32 frames of 4×28×28 latents). Far too large for CPU
    /// training; kept for documentation and shape checks.
    pub fn full_scale() -> Self {
        ModelConfig {
            channels: vec![128, 128, 256, 256],
            frames: 32,
            in_channels: 4,
            height: 32,
            width: 32,
            embed_dim: 128,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::invalid("model needs at least one level with nonzero channels"));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!("embed_dim {} must be even", self.embed_dim)));
        }
        if self.frames == 0 || self.in_channels == 0 {
            return Err(Error::invalid("frames and in_channels must be positive"));
        }
        let scale = 1usize << (self.channels.len() - 1);
        if !self.height.is_multiple_of(scale) || !self.width.is_multiple_of(scale) || self.height == 0 || self.width == 0 {
            return Err(Error::invalid(format!(
                "{}×{} frames cannot be halved {} times",
                self.height,
                self.width,
                self.channels.len() - 1
            )));
        }
        Ok(())
    }

    fn hidden_dim(&self) -> usize {
        2 * self.embed_dim
    }

    /// Shape of one video tensor, `F×C×H×W`.
    pub fn video_shape(&self) -> [usize; 4] {
        [self.frames, self.in_channels, self.height, self.width]
    }
}

/// Geometric frequencies from 1 to [`MAX_FREQUENCY`].
fn frequencies(dim: usize) -> Vec<f64> {
    let half = dim / 2;
    if half == 1 {
        return vec![1.0];
    }
    (0..half)
        .map(|j| MAX_FREQUENCY.powf(j as f64 / (half - 1) as f64))
        .collect()
}

/// Interleaved `[sin(ω₀v), cos(ω₀v), sin(ω₁v), …]` at geometric frequencies.
pub fn timestep_embed(value: f64, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("embedding dim {dim} must be even")));
    }
    let data = frequencies(dim)
        .into_iter()
        .flat_map(|w| [(w * value).sin(), (w * value).cos()])
        .collect();
    Ok(Tensor::from_vec(data))
}

/// Graph version of [`timestep_embed`] for a scalar node, so the embedding
/// is differentiable in `value`.
fn embed_node(g: &mut Graph, value: Var, dim: usize) -> Result<Var> {
    let half = dim / 2;
    let freqs = g.constant(Tensor::from_vec(frequencies(dim)));
    let arg = g.mul(value, freqs)?;
    let s = g.sin(arg)?;
    let c = g.cos(arg)?;
    let s = g.reshape(s, &[half, 1])?;
    let c = g.reshape(c, &[half, 1])?;
    let both = g.concat(&[s, c], 1)?;
    g.reshape(both, &[dim])
}

/// A network that can be evaluated on a graph.
pub trait ConditionalVelocity {
    /// Predicted (mean) velocity for `x_t` over `[r, t]`; `r` and `t` are
    /// scalar nodes.
    fn velocity(&self, g: &mut Graph, x_t: Var, r: Var, t: Var, c: &ConditioningSet) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Name and shape of every parameter tensor.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let cfg = &self.config;
        let (d, e) = (cfg.embed_dim, cfg.hidden_dim());
        let ch = &cfg.channels;
        let c0 = ch[0];
        let mut shapes = vec![
            ("embed.null_phi".to_string(), vec![d]),
            ("embed.fc1.w".to_string(), vec![d, e]),
            ("embed.fc1.b".to_string(), vec![e]),
            ("embed.fc2.w".to_string(), vec![e, c0]),
            ("embed.fc2.b".to_string(), vec![c0]),
            ("conv_in.w".to_string(), vec![c0, 2 * cfg.in_channels + 1, 3, 3]),
            ("conv_in.b".to_string(), vec![c0]),
        ];
        for (l, &c) in ch.iter().enumerate() {
            if l > 0 {
                shapes.push((format!("down{l}.w"), vec![c, ch[l - 1], 3, 3]));
                shapes.push((format!("down{l}.b"), vec![c]));
            }
            shapes.push((format!("res{l}.w"), vec![c, c, 3, 3]));
            shapes.push((format!("res{l}.b"), vec![c]));
            shapes.push((format!("film.res{l}.w"), vec![e, 2 * c]));
            shapes.push((format!("film.res{l}.b"), vec![2 * c]));
            for proj in ["q", "k", "v", "o"] {
                shapes.push((format!("attn{l}.{proj}"), vec![c, c]));
            }
        }
        for l in 0..ch.len() - 1 {
            shapes.push((format!("up{l}.w"), vec![ch[l], ch[l + 1], 1, 1]));
            shapes.push((format!("up{l}.b"), vec![ch[l]]));
            shapes.push((format!("dec{l}.w"), vec![ch[l], ch[l], 3, 3]));
            shapes.push((format!("dec{l}.b"), vec![ch[l]]));
            shapes.push((format!("film.dec{l}.w"), vec![e, 2 * ch[l]]));
            shapes.push((format!("film.dec{l}.b"), vec![2 * ch[l]]));
        }
        shapes.push(("conv_out.w".to_string(), vec![cfg.in_channels, c0, 3, 3]));
        shapes.push(("conv_out.b".to_string(), vec![cfg.in_channels]));
        shapes
    }

    /// Fan-in scaled normal weights, zero biases, identity modulation and a
    /// zero output layer.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet {
        let mut params = ParameterSet::new();
        for (name, shape) in self.param_shapes() {
            let t = if name.ends_with(".b") || name.starts_with("conv_out") || name.starts_with("film.") {
                Tensor::zeros(&shape)
            } else if name == "embed.null_phi" {
                Tensor::randn(&shape, rng)
            } else {
                let fan_in: usize = match shape.len() {
                    4 => shape[1] * shape[2] * shape[3],
                    _ => shape[0],
                };
                Tensor::randn(&shape, rng).scale(1.0 / (fan_in as f64).sqrt())
            };
            params.insert(name, t);
        }
        params
    }

    /// Checks that `params` matches this architecture.
    pub fn check_params(&self, params: &ParameterSet) -> Result<()> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape) in shapes {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Places `params` on `g`. With `trainable`, [`Graph::grad`] reports
    /// gradients for them.
    pub fn bind<'m>(&'m self, g: &mut Graph, params: &ParameterSet, trainable: bool) -> Result<BoundModel<'m>> {
        self.check_params(params)?;
        Ok(BoundModel {
            model: self,
            vars: g.bind(params, trainable),
        })
    }

    /// Plain inference: `u(x_t, r, t; c)` as a tensor.
    pub fn forward(
        &self,
        params: &ParameterSet,
        x_t: &Tensor,
        r: f64,
        t: f64,
        c: &ConditioningSet,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, params, false)?;
        let x = g.constant(x_t.clone());
        let (rv, tv) = (g.scalar(r), g.scalar(t));
        let out = bound.velocity(&mut g, x, rv, tv, c)?;
        Ok(g.value(out).clone())
    }
}

/// A [`Model`] whose parameters live on a particular graph.
pub struct BoundModel<'m> {
    model: &'m Model,
    vars: HashMap<String, Var>,
}

impl BoundModel<'_> {
    fn p(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn conv(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let y = g.conv2d(x, self.p(&format!("{name}.w")))?;
        let c = g.shape(self.p(&format!("{name}.b")))[0];
        let b = g.reshape(self.p(&format!("{name}.b")), &[1, c, 1, 1])?;
        g.add(y, b)
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let y = g.matmul(x, self.p(&format!("{name}.w")))?;
        g.add(y, self.p(&format!("{name}.b")))
    }

    /// Self-attention across frames at every pixel; `key_bias` is `[1, 1, F]`.
    fn temporal_attention(&self, g: &mut Graph, h: Var, key_bias: Var, level: usize) -> Result<Var> {
        let s = g.shape(h).to_vec();
        let (f, c, hh, ww) = (s[0], s[1], s[2], s[3]);
        let pixels = hh * ww;
        let tok = g.permute(h, &[2, 3, 0, 1])?;
        let tok = g.reshape(tok, &[pixels * f, c])?;
        let proj = |g: &mut Graph, which: &str| -> Result<Var> {
            let y = g.matmul(tok, self.p(&format!("attn{level}.{which}")))?;
            g.reshape(y, &[pixels, f, c])
        };
        let q = proj(g, "q")?;
        let k = proj(g, "k")?;
        let v = proj(g, "v")?;
        let kt = g.permute(k, &[0, 2, 1])?;
        let scores = g.batch_matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (c as f64).sqrt())?;
        let scores = g.add(scores, key_bias)?;
        let att = g.softmax(scores)?;
        let mixed = g.batch_matmul(att, v)?;
        let mixed = g.reshape(mixed, &[pixels * f, c])?;
        let out = g.matmul(mixed, self.p(&format!("attn{level}.o")))?;
        let out = g.reshape(out, &[hh, ww, f, c])?;
        let out = g.permute(out, &[2, 3, 0, 1])?;
        g.add(h, out)
    }

    /// Per-frame scale and shift of a block's features from the shared
    /// conditioning state: `h·(1 + scale) + shift`.
    fn film(&self, g: &mut Graph, h: Var, cond: Var, name: &str) -> Result<Var> {
        let (f, c) = (g.shape(h)[0], g.shape(h)[1]);
        let ss = self.linear(g, cond, &format!("film.{name}"))?;
        let ss = g.reshape(ss, &[f, 2 * c, 1, 1])?;
        let scale = g.slice(ss, 1, 0, c)?;
        let shift = g.slice(ss, 1, c, c)?;
        let modulated = g.mul(h, scale)?;
        let h = g.add(h, modulated)?;
        g.add(h, shift)
    }

    /// Per-frame conditioning state `[F, E]` from the (r, t, φ, phase)
    /// embeddings, and the input bias `[F, C0, 1, 1]` derived from it.
    fn conditioning(&self, g: &mut Graph, r: Var, t: Var, c: &ConditioningSet) -> Result<(Var, Var)> {
        let cfg = &self.model.config;
        let d = cfg.embed_dim;
        let er = embed_node(g, r, d)?;
        let et = embed_node(g, t, d)?;
        let ephi = match c.phi() {
            Some(phi) => g.constant(timestep_embed(phi, d)?),
            None => self.p("embed.null_phi"),
        };
        let e = g.add(er, et)?;
        let e = g.add(e, ephi)?;
        let phase = g.constant(phase_embeddings(c.padding(), d)?);
        let e = g.add(phase, e)?; // [F, D]
        let h = self.linear(g, e, "embed.fc1")?;
        let state = g.silu(h)?;
        let bias = self.linear(g, state, "embed.fc2")?;
        let bias = g.reshape(bias, &[cfg.frames, cfg.channels[0], 1, 1])?;
        Ok((state, bias))
    }
}

/// Embedding of each valid frame's position within the valid span; zero
/// rows for padded frames.
fn phase_embeddings(padding: &[bool], dim: usize) -> Result<Tensor> {
    let valid = padding.iter().filter(|&&p| !p).count();
    let denom = valid.saturating_sub(1).max(1) as f64;
    let mut data = Vec::with_capacity(padding.len() * dim);
    for (k, &p) in padding.iter().enumerate() {
        if p {
            data.extend(std::iter::repeat_n(0.0, dim));
        } else {
            data.extend_from_slice(timestep_embed(k as f64 / denom, dim)?.data());
        }
    }
    Tensor::new(vec![padding.len(), dim], data)
}

fn padding_channel(padding: &[bool], h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(padding.len() * h * w);
    for &p in padding {
        data.extend(std::iter::repeat_n(if p { 1.0 } else { 0.0 }, h * w));
    }
    Tensor::new(vec![padding.len(), 1, h, w], data).expect("consistent shape")
}

impl ConditionalVelocity for BoundModel<'_> {
    fn velocity(&self, g: &mut Graph, x_t: Var, r: Var, t: Var, c: &ConditioningSet) -> Result<Var> {
        let cfg = &self.model.config;
        let shape = cfg.video_shape();
        if g.shape(x_t) != shape || c.x_m().shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "model.forward",
                lhs: g.shape(x_t).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let levels = cfg.channels.len();
        let x_m = g.constant(c.x_m().clone());
        let p_ch = g.constant(padding_channel(c.padding(), cfg.height, cfg.width));
        let key_bias: Vec<f64> = c
            .padding()
            .iter()
            .map(|&p| if p { MASKED_LOGIT } else { 0.0 })
            .collect();
        let key_bias = g.constant(Tensor::new(vec![1, 1, cfg.frames], key_bias)?);

        let input = g.concat(&[x_t, x_m, p_ch], 1)?;
        let mut h = self.conv(g, input, "conv_in")?;
        let (cond, bias) = self.conditioning(g, r, t, c)?;
        h = g.add(h, bias)?;
        h = g.silu(h)?;

        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            if l > 0 {
                h = g.avg_pool2(h)?;
                h = self.conv(g, h, &format!("down{l}"))?;
                h = g.silu(h)?;
            }
            let branch = self.conv(g, h, &format!("res{l}"))?;
            let branch = self.film(g, branch, cond, &format!("res{l}"))?;
            let branch = g.silu(branch)?;
            h = g.add(h, branch)?;
            h = self.temporal_attention(g, h, key_bias, l)?;
            skips.push(h);
        }
        for l in (0..levels - 1).rev() {
            h = g.upsample2(h)?;
            h = self.conv(g, h, &format!("up{l}"))?;
            h = g.add(h, skips[l])?;
            h = g.silu(h)?;
            h = self.conv(g, h, &format!("dec{l}"))?;
            h = self.film(g, h, cond, &format!("dec{l}"))?;
            h = g.silu(h)?;
        }
        self.conv(g, h, "conv_out")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcond::{temporal_normalize, PaddedVideo};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            channels: vec![4, 8],
            frames: 4,
            in_channels: 1,
            height: 8,
            width: 8,
            embed_dim: 8,
            seed: 0,
        }
    }

    fn video(cfg: &ModelConfig, valid: usize, rng: &mut ChaCha8Rng) -> PaddedVideo {
        let frames: Vec<Tensor> = (0..valid)
            .map(|_| Tensor::randn(&[cfg.in_channels, cfg.height, cfg.width], rng))
            .collect();
        temporal_normalize(&frames, cfg.frames).unwrap()
    }

    fn randomized(model: &Model, rng: &mut ChaCha8Rng) -> ParameterSet {
        let mut p = model.init_params(rng);
        for (_, t) in p.iter_mut() {
            let noise = Tensor::randn(t.shape(), rng).scale(0.3);
            *t = t.add(&noise).unwrap();
        }
        p
    }

    #[test]
    fn zero_initialized_output_layer_gives_zero_velocity() {
        let cfg = small_config();
        let model = Model::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = model.init_params(&mut rng);
        let v = video(&cfg, 3, &mut rng);
        let c = ConditioningSet::from_video(&v, 0.5, &[0]).unwrap();
        let x = Tensor::randn(&cfg.video_shape(), &mut rng);
        let u = model.forward(&params, &x, 0.2, 0.9, &c).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_config();
        let model = Model::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = randomized(&model, &mut rng);
        let v = video(&cfg, 4, &mut rng);
        let c = ConditioningSet::from_video(&v, 0.3, &[1]).unwrap();
        let x = Tensor::randn(&cfg.video_shape(), &mut rng);
        let a = model.forward(&params, &x, 0.1, 0.7, &c).unwrap();
        let b = model.forward(&params, &x, 0.1, 0.7, &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &cfg.video_shape());
    }

    #[test]
    fn padded_frames_do_not_leak_into_valid_outputs() {
        let cfg = ModelConfig {
            frames: 6,
            ..small_config()
        };
        let model = Model::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = randomized(&model, &mut rng);
        let v = video(&cfg, 3, &mut rng);
        let c = ConditioningSet::from_video(&v, 0.6, &[0]).unwrap();
        let x = Tensor::randn(&cfg.video_shape(), &mut rng);
        // swap the contents of padded frames 3 and 5
        let mut swapped = x.clone();
        let (f3, f5) = (x.outer_slice(3).to_vec(), x.outer_slice(5).to_vec());
        swapped.outer_slice_mut(3).copy_from_slice(&f5);
        swapped.outer_slice_mut(5).copy_from_slice(&f3);
        let a = model.forward(&params, &x, 0.2, 0.8, &c).unwrap();
        let b = model.forward(&params, &swapped, 0.2, 0.8, &c).unwrap();
        for i in 0..3 {
            assert_eq!(a.outer_slice(i), b.outer_slice(i), "valid frame {i} changed");
        }
        assert_ne!(a.outer_slice(3), b.outer_slice(3));
    }

    #[test]
    fn same_seed_gives_identical_params() {
        let model = Model::new(ModelConfig::default()).unwrap();
        let a = model.init_params(&mut ChaCha8Rng::seed_from_u64(9));
        let b = model.init_params(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn default_parameter_count_matches_closed_form() {
        let cfg = ModelConfig::default();
        let model = Model::new(cfg).unwrap();
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        // D = 32, hidden E = 64, channels 16/32, one input channel.
        let (d, e, c0, c1, cin) = (32, 64, 16, 32, 1);
        let embed = d + d * e + e + e * c0 + c0;
        let conv_in = c0 * (2 * cin + 1) * 9 + c0;
        let film = |c: usize| e * 2 * c + 2 * c;
        let level0 = c0 * c0 * 9 + c0 + 4 * c0 * c0 + film(c0);
        let level1 = c1 * c0 * 9 + c1 + c1 * c1 * 9 + c1 + 4 * c1 * c1 + film(c1);
        let decoder = c0 * c1 + c0 + c0 * c0 * 9 + c0 + film(c0);
        let conv_out = cin * c0 * 9 + cin;
        let expected = embed + conv_in + level0 + level1 + decoder + conv_out;
        assert_eq!(params.num_scalars(), expected);
    }

    #[test]
    fn embedding_examples() {
        let e0 = timestep_embed(0.0, 16).unwrap();
        for pair in e0.data().chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        let a = timestep_embed(0.3, 16).unwrap();
        let b = timestep_embed(0.7, 16).unwrap();
        assert!(a.sub(&b).unwrap().sq_norm().sqrt() >= 0.1);
        assert_eq!(a, timestep_embed(0.3, 16).unwrap());
        assert!(timestep_embed(0.3, 7).is_err());
    }

    #[test]
    fn graph_embedding_matches_numeric_embedding() {
        let mut g = Graph::new();
        let v = g.scalar(0.37);
        let e = embed_node(&mut g, v, 12).unwrap();
        let expected = timestep_embed(0.37, 12).unwrap();
        assert!(g.value(e).max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let odd = ModelConfig {
            embed_dim: 7,
            ..ModelConfig::default()
        };
        assert!(Model::new(odd).is_err());
        let empty = ModelConfig {
            channels: vec![],
            ..ModelConfig::default()
        };
        assert!(Model::new(empty).is_err());
        let indivisible = ModelConfig {
            height: 15,
            ..ModelConfig::default()
        };
        assert!(Model::new(indivisible).is_err());
        assert!(Model::new(ModelConfig::full_scale()).is_ok());
    }

    #[test]
    fn mismatched_params_are_rejected() {
        let model = Model::new(small_config()).unwrap();
        let other = Model::new(ModelConfig::default()).unwrap();
        let params = other.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        assert!(matches!(model.bind(&mut g, &params, false), Err(Error::ConfigMismatch(_))));
    }
}
