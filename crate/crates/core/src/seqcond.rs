//! Variable-length sequence handling: temporal normalization to a fixed
//! capacity, padding vectors, masked conditioning videos, loss masks and the
//! per-video normalizer α.
//!
//! Videos are `F×C×H×W` tensors. A padding vector marks each of the `F`
//! slots as valid (`false`) or padded (`true`); padding is always a
//! contiguous tail.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Fixed-capacity video plus its padding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedVideo {
    frames: Tensor,
    padding: Vec<bool>,
}

impl PaddedVideo {
    /// Validates shape, that padded frames are zero and that at least one
    /// frame is valid.
    pub fn new(frames: Tensor, padding: Vec<bool>) -> Result<Self> {
        check_video_shape(&frames, padding.len())?;
        if padding.iter().all(|&p| p) {
            return Err(Error::AllPadded);
        }
        for (i, _) in padding.iter().enumerate().filter(|(_, &p)| p) {
            if frames.outer_slice(i).iter().any(|&v| v != 0.0) {
                return Err(Error::invalid(format!("padded frame {i} is not all-zero")));
            }
        }
        Ok(PaddedVideo { frames, padding })
    }

    /// Builds a video, zeroing whatever content the padded slots carry.
    pub fn with_zeroed_padding(mut frames: Tensor, padding: Vec<bool>) -> Result<Self> {
        check_video_shape(&frames, padding.len())?;
        for (i, &p) in padding.iter().enumerate() {
            if p {
                frames.outer_slice_mut(i).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Self::new(frames, padding)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn padding(&self) -> &[bool] {
        &self.padding
    }

    pub fn capacity(&self) -> usize {
        self.padding.len()
    }

    pub fn f_valid(&self) -> usize {
        self.padding.iter().filter(|&&p| !p).count()
    }

    /// `(C, H, W)` of a single frame.
    pub fn frame_dims(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[1], s[2], s[3])
    }

    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.padding.iter().enumerate().filter(|(_, &p)| !p).map(|(i, _)| i)
    }

    pub fn loss_mask(&self) -> LossMask {
        LossMask::from_padding(&self.padding)
    }

    pub fn frame(&self, index: usize) -> Result<Tensor> {
        self.frames.outer(index)
    }
}

fn check_video_shape(frames: &Tensor, capacity: usize) -> Result<()> {
    let s = frames.shape();
    if s.len() != 4 || s[0] != capacity || capacity == 0 {
        return Err(Error::ShapeMismatch {
            op: "padded_video",
            lhs: s.to_vec(),
            rhs: vec![capacity],
        });
    }
    Ok(())
}

/// The model's conditioning triple: masked video, EF and padding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningSet {
    x_m: Tensor,
    /// EF as a fraction; `None` selects the learned null embedding.
    phi: Option<f64>,
    padding: Vec<bool>,
    observed: Vec<bool>,
}

impl ConditioningSet {
    /// `observed[i]` marks frames of `x_m` that carry real content.
    pub fn new(x_m: Tensor, phi: f64, padding: Vec<bool>, observed: Vec<bool>) -> Result<Self> {
        check_video_shape(&x_m, padding.len())?;
        if !(0.0..=1.0).contains(&phi) || !phi.is_finite() {
            return Err(Error::invalid(format!("EF {phi} outside [0, 1]")));
        }
        if observed.len() != padding.len() {
            return Err(Error::invalid("observed mask length differs from padding"));
        }
        if observed.iter().zip(&padding).any(|(&o, &p)| o && p) {
            return Err(Error::invalid("a padded frame cannot be observed"));
        }
        if !observed.iter().any(|&o| o) {
            return Err(Error::invalid("conditioning needs at least one observed frame"));
        }
        for (i, &o) in observed.iter().enumerate() {
            if !o && x_m.outer_slice(i).iter().any(|&v| v != 0.0) {
                return Err(Error::invalid(format!("masked frame {i} of x_m is not zero")));
            }
        }
        Ok(ConditioningSet {
            x_m,
            phi: Some(phi),
            padding,
            observed,
        })
    }

    /// Conditioning built from `video` keeping only the frames in `keep`.
    pub fn from_video(video: &PaddedVideo, phi: f64, keep: &[usize]) -> Result<Self> {
        let mut observed = vec![false; video.capacity()];
        for &k in keep {
            if k >= video.capacity() || video.padding()[k] {
                return Err(Error::invalid(format!("frame {k} is not a valid frame")));
            }
            observed[k] = true;
        }
        let x_m = zero_unobserved(video.frames(), &observed);
        Self::new(x_m, phi, video.padding().to_vec(), observed)
    }

    /// The null-conditioning counterpart used for classifier-free guidance:
    /// `x_m` zeroed and EF replaced by the learned null embedding.
    pub fn unconditional(&self) -> Self {
        ConditioningSet {
            x_m: Tensor::zeros(self.x_m.shape()),
            phi: None,
            padding: self.padding.clone(),
            observed: vec![false; self.padding.len()],
        }
    }

    pub fn with_phi(&self, phi: f64) -> Result<Self> {
        Self::new(self.x_m.clone(), phi, self.padding.clone(), self.observed.clone())
    }

    pub fn x_m(&self) -> &Tensor {
        &self.x_m
    }

    pub fn phi(&self) -> Option<f64> {
        self.phi
    }

    pub fn padding(&self) -> &[bool] {
        &self.padding
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn capacity(&self) -> usize {
        self.padding.len()
    }

    pub fn f_valid(&self) -> usize {
        self.padding.iter().filter(|&&p| !p).count()
    }
}

fn zero_unobserved(frames: &Tensor, observed: &[bool]) -> Tensor {
    let mut x_m = frames.clone();
    for (i, &o) in observed.iter().enumerate() {
        if !o {
            x_m.outer_slice_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    x_m
}

/// Temporal loss mask `LM = 1 − p`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossMask {
    lm: Vec<f64>,
}

impl LossMask {
    pub fn from_padding(padding: &[bool]) -> Self {
        LossMask {
            lm: padding.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.lm
    }

    pub fn valid_frames(&self) -> usize {
        self.lm.iter().filter(|&&v| v != 0.0).count()
    }

    /// `LM` replicated over `C×H×W`, giving a mask `M` of shape `F×C×H×W`.
    pub fn broadcast(&self, c: usize, h: usize, w: usize) -> Tensor {
        let plane = c * h * w;
        let mut data = Vec::with_capacity(self.lm.len() * plane);
        for &v in &self.lm {
            data.extend(std::iter::repeat_n(v, plane));
        }
        Tensor::new(vec![self.lm.len(), c, h, w], data).expect("mask shape is consistent")
    }
}

/// Source indices kept when mapping `f` raw frames onto `capacity` slots:
/// indices `round(i·(f−1)/(F−1))`, which keep the first and last frames.
pub fn downsample_indices(f: usize, capacity: usize) -> Vec<usize> {
    if capacity == 1 {
        return vec![0];
    }
    (0..capacity)
        .map(|i| ((i * (f - 1)) as f64 / (capacity - 1) as f64).round() as usize)
        .collect()
}

/// Maps `raw` frames (each `C×H×W`) onto exactly `capacity` slots: uniform
/// downsampling when there are too many, zero tail padding otherwise.
pub fn temporal_normalize(raw: &[Tensor], capacity: usize) -> Result<PaddedVideo> {
    let first = raw
        .first()
        .ok_or_else(|| Error::invalid("temporal_normalize of an empty sequence"))?;
    if capacity == 0 {
        return Err(Error::invalid("capacity must be at least 1"));
    }
    if first.ndim() != 3 {
        return Err(Error::invalid(format!(
            "frames must be C×H×W, got {:?}",
            first.shape()
        )));
    }
    let f = raw.len();
    let (chosen, padding): (Vec<&Tensor>, Vec<bool>) = if f > capacity {
        (
            downsample_indices(f, capacity).into_iter().map(|i| &raw[i]).collect(),
            vec![false; capacity],
        )
    } else {
        let mut padding = vec![false; f];
        padding.resize(capacity, true);
        (raw.iter().collect(), padding)
    };
    let zero = Tensor::zeros(first.shape());
    let mut slots: Vec<Tensor> = chosen.into_iter().cloned().collect();
    slots.resize(capacity, zero);
    PaddedVideo::new(Tensor::stack(&slots)?, padding)
}

/// Frames of a masked conditioning video and which of them stayed observed.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedFrames {
    pub x_m: Tensor,
    pub observed: Vec<bool>,
}

/// Zeroes `ceil(pmf·f_valid)` valid frames, chosen uniformly at random, but
/// always leaves at least one observed frame. `pmf = 1` is the hardest
/// setting: a single surviving frame.
pub fn build_masked_conditioning<R: Rng + ?Sized>(
    x: &PaddedVideo,
    pmf: f64,
    rng: &mut R,
) -> Result<MaskedFrames> {
    if !(0.0..=1.0).contains(&pmf) {
        return Err(Error::invalid(format!("pmf {pmf} outside [0, 1]")));
    }
    let valid: Vec<usize> = x.valid_indices().collect();
    let n_mask = ((pmf * valid.len() as f64).ceil() as usize).min(valid.len() - 1);
    let mut observed: Vec<bool> = x.padding().iter().map(|&p| !p).collect();
    for pick in sample(rng, valid.len(), n_mask) {
        observed[valid[pick]] = false;
    }
    Ok(MaskedFrames {
        x_m: zero_unobserved(x.frames(), &observed),
        observed,
    })
}

/// `α = 1 / (Σ LM · C · H · W)`: makes every video contribute equally.
pub fn alpha(lm: &LossMask, c: usize, h: usize, w: usize) -> Result<f64> {
    let valid: f64 = lm.values().iter().sum();
    if valid < 1.0 {
        return Err(Error::AllPadded);
    }
    Ok(1.0 / (valid * (c * h * w) as f64))
}

/// Conditioning for temporal upsampling by an integer factor.
#[derive(Clone, Debug, PartialEq)]
pub struct Upsampling {
    pub x_m: Tensor,
    pub padding: Vec<bool>,
    pub observed: Vec<bool>,
}

/// Places the valid frames of `x` at stride `factor`; the slots in between
/// are valid but unobserved, so the model has to synthesize them.
pub fn interleave_for_upsampling(x: &PaddedVideo, factor: usize, capacity: usize) -> Result<Upsampling> {
    if factor == 0 {
        return Err(Error::invalid("upsampling factor must be at least 1"));
    }
    let f = x.f_valid();
    let needed = f * factor - (factor - 1);
    if needed > capacity {
        return Err(Error::CapacityExceeded { needed, capacity });
    }
    let (c, h, w) = x.frame_dims();
    let mut x_m = Tensor::zeros(&[capacity, c, h, w]);
    let mut observed = vec![false; capacity];
    for (j, src) in x.valid_indices().enumerate() {
        let dst = j * factor;
        x_m.outer_slice_mut(dst).copy_from_slice(x.frames().outer_slice(src));
        observed[dst] = true;
    }
    let mut padding = vec![false; needed];
    padding.resize(capacity, true);
    Ok(Upsampling {
        x_m,
        padding,
        observed,
    })
}
