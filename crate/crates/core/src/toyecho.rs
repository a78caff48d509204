//! Synthetic echo-like videos: a pulsating ellipse (dark cavity inside a
//! bright ring) with exactly controllable area–length EF, plus the
//! area–length proxy and a threshold segmentation used to read EF back from
//! generated frames.
//!
//! Intensities live in `[0, 1]` image space (before speckle). The long axis
//! of the cavity is vertical and constant over the cycle; only the short
//! semi-axis contracts, so EF is exactly `1 − (b_es/b_ed)²`.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CAVITY_LEVEL: f64 = 0.15;
pub const RING_LEVEL: f64 = 1.0;
pub const BACKGROUND_LEVEL: f64 = 0.7;
pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_NOISE: f64 = 0.1;

const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseVideoSpec {
    pub ef: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Long (vertical) semi-axis in pixels, constant over the cycle.
    pub a: f64,
    /// Short semi-axis at end-diastole.
    pub b_ed: f64,
    /// Thickness of the bright wall around the cavity.
    pub ring_width: f64,
    /// Log-space standard deviation of the multiplicative speckle.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl EllipseVideoSpec {
    /// Geometry scaled to the frame size, default speckle.
    pub fn new(ef: f64, frames: usize, height: usize, width: usize, seed: u64) -> Self {
        let (h, w) = (height as f64, width as f64);
        EllipseVideoSpec {
            ef,
            frames,
            height,
            width,
            a: 0.34 * h,
            b_ed: 0.25 * w,
            ring_width: (0.08 * h.min(w)).max(1.5),
            noise_sigma: DEFAULT_NOISE,
            seed,
        }
    }

    pub fn b_es(&self) -> f64 {
        self.b_ed * (1.0 - self.ef).sqrt()
    }

    /// Short semi-axis of frame `k`, cosine-eased from ED to ES.
    pub fn b_at(&self, k: usize) -> f64 {
        let s = k as f64 / (self.frames - 1) as f64;
        let ease = 0.5 * (1.0 - (PI * s).cos());
        self.b_ed + (self.b_es() - self.b_ed) * ease
    }

    fn center(&self) -> (f64, f64) {
        ((self.height as f64 - 1.0) / 2.0, (self.width as f64 - 1.0) / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ef) {
            return Err(Error::invalid(format!("ef = {} outside [0, 1)", self.ef)));
        }
        if self.frames < 2 {
            return Err(Error::invalid("a toy video needs at least an ED and an ES frame"));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::invalid("frames must be at least 4×4"));
        }
        if !(self.a > 0.0 && self.b_ed > 0.0 && self.b_ed <= self.a) {
            return Err(Error::invalid(format!(
                "need 0 < b_ed ≤ a, got a = {}, b_ed = {}",
                self.a, self.b_ed
            )));
        }
        if !(self.ring_width >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("ring width and noise must be non-negative"));
        }
        let (cy, cx) = self.center();
        let (ry, rx) = (self.a + self.ring_width, self.b_ed + self.ring_width);
        // pixel centres run from 0 to H−1; the frame edge is half a pixel out
        if ry > cy + 0.5 || rx > cx + 0.5 {
            return Err(Error::EllipseOutOfFrame(format!(
                "outer semi-axes ({ry}, {rx}) exceed half-frame ({}, {})",
                cy + 0.5,
                cx + 0.5
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyVideo {
    /// `f×1×H×W`, image space.
    pub frames: Tensor,
    /// Area–length EF of the continuous ED and ES ellipses.
    pub true_ef: f64,
}

fn inside(dy: f64, dx: f64, ry: f64, rx: f64) -> bool {
    rx > 0.0 && ry > 0.0 && (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0
}

pub fn generate_toy_video(spec: &EllipseVideoSpec) -> Result<ToyVideo> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let (cy, cx) = spec.center();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let speckle = if spec.noise_sigma > 0.0 {
        let s = spec.noise_sigma;
        Some(LogNormal::new(-0.5 * s * s, s).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    let offsets: Vec<f64> = (0..SUPERSAMPLE)
        .map(|i| (i as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5)
        .collect();
    let per_pixel = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut data = Vec::with_capacity(spec.frames * h * w);
    for k in 0..spec.frames {
        let b = spec.b_at(k);
        let (oy, ox) = (spec.a + spec.ring_width, b + spec.ring_width);
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for &sy in &offsets {
                    for &sx in &offsets {
                        let (dy, dx) = (i as f64 + sy - cy, j as f64 + sx - cx);
                        acc += if inside(dy, dx, spec.a, b) {
                            CAVITY_LEVEL
                        } else if inside(dy, dx, oy, ox) {
                            RING_LEVEL
                        } else {
                            BACKGROUND_LEVEL
                        };
                    }
                }
                let mut v = acc / per_pixel;
                if let Some(d) = &speckle {
                    v *= d.sample(&mut rng);
                }
                data.push(v);
            }
        }
    }
    let frames = Tensor::new(vec![spec.frames, 1, h, w], data)?;
    let area = |b: f64| PI * spec.a * b;
    let length = 2.0 * spec.a;
    let true_ef = ef_from_area_length(area(spec.b_ed), length, area(spec.b_es()), length)?;
    Ok(ToyVideo { frames, true_ef })
}

/// Binary cavity mask on an `H×W` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMask {
    height: usize,
    width: usize,
    pixels: Vec<bool>,
    pixel_area: f64,
}

impl SegMask {
    pub fn new(height: usize, width: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "SegMask::new",
                lhs: vec![height, width],
                rhs: vec![pixels.len()],
            });
        }
        Ok(SegMask {
            height,
            width,
            pixels,
            pixel_area: 1.0,
        })
    }

    /// Same mask with a different physical pixel area.
    pub fn with_pixel_area(mut self, pixel_area: f64) -> Result<Self> {
        if !(pixel_area > 0.0 && pixel_area.is_finite()) {
            return Err(Error::invalid(format!("pixel area {pixel_area} must be positive")));
        }
        self.pixel_area = pixel_area;
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    pub fn pixel_area(&self) -> f64 {
        self.pixel_area
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.pixels[i * self.width + j]
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Nearest-neighbour upscaling by an integer factor.
    pub fn upscale(&self, factor: usize) -> SegMask {
        let (h, w) = (self.height * factor, self.width * factor);
        let pixels = (0..h * w)
            .map(|idx| self.get(idx / w / factor, idx % w / factor))
            .collect();
        SegMask {
            height: h,
            width: w,
            pixels,
            pixel_area: self.pixel_area,
        }
    }
}

/// Pixels whose centre lies inside the cavity of frame `k`.
pub fn analytic_mask(spec: &EllipseVideoSpec, k: usize) -> Result<SegMask> {
    spec.validate()?;
    if k >= spec.frames {
        return Err(Error::invalid(format!("frame {k} out of range for {} frames", spec.frames)));
    }
    let (cy, cx) = spec.center();
    let b = spec.b_at(k);
    let pixels = (0..spec.height * spec.width)
        .map(|idx| {
            let (i, j) = (idx / spec.width, idx % spec.width);
            inside(i as f64 - cy, j as f64 - cx, spec.a, b)
        })
        .collect();
    SegMask::new(spec.height, spec.width, pixels)
}

/// Cavity area and long-axis length.
///
/// `L` is the extent of the pixel centres along the first principal axis of
/// their coordinates, plus one pixel. When the coordinate covariance is
/// diagonal the axis is taken axis-aligned (rows on a tie).
pub fn area_and_length(mask: &SegMask) -> Result<(f64, f64)> {
    let coords: Vec<(f64, f64)> = (0..mask.height * mask.width)
        .filter(|&idx| mask.pixels[idx])
        .map(|idx| ((idx / mask.width) as f64, (idx % mask.width) as f64))
        .collect();
    if coords.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = coords.len() as f64;
    let area = n * mask.pixel_area;
    let (my, mx) = coords
        .iter()
        .fold((0.0, 0.0), |(sy, sx), &(y, x)| (sy + y / n, sx + x / n));
    let (mut syy, mut sxx, mut sxy) = (0.0, 0.0, 0.0);
    for &(y, x) in &coords {
        let (dy, dx) = (y - my, x - mx);
        syy += dy * dy;
        sxx += dx * dx;
        sxy += dy * dx;
    }
    let scale = (syy + sxx).max(f64::MIN_POSITIVE);
    let axis = if sxy.abs() <= 1e-9 * scale {
        if syy >= sxx {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        }
    } else {
        // leading eigenvector of [[syy, sxy], [sxy, sxx]]
        let tr = syy + sxx;
        let det = syy * sxx - sxy * sxy;
        let lambda = tr / 2.0 + ((tr * tr / 4.0 - det).max(0.0)).sqrt();
        let (vy, vx) = (sxy, lambda - syy);
        let norm = (vy * vy + vx * vx).sqrt();
        (vy / norm, vx / norm)
    };
    let (lo, hi) = coords.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(y, x)| {
        let p = y * axis.0 + x * axis.1;
        (lo.min(p), hi.max(p))
    });
    let length = (hi - lo + 1.0) * mask.pixel_area.sqrt();
    Ok((area, length))
}

/// `1 − (L_ED/L_ES)·(A_ES/A_ED)²`, i.e. `1 − V_ES/V_ED` with
/// `V = 8A²/(3πL)`.
pub fn ef_from_area_length(a_ed: f64, l_ed: f64, a_es: f64, l_es: f64) -> Result<f64> {
    if !(a_ed > 0.0 && a_es > 0.0) {
        return Err(Error::EmptyMask);
    }
    if !(l_ed > 0.0 && l_es > 0.0) {
        return Err(Error::invalid("long-axis length must be positive"));
    }
    Ok(1.0 - (l_ed / l_es) * (a_es / a_ed).powi(2))
}

/// Area–length EF from ED and ES cavity masks.
pub fn proxy_ef(mask_ed: &SegMask, mask_es: &SegMask) -> Result<f64> {
    let (a_ed, l_ed) = area_and_length(mask_ed)?;
    let (a_es, l_es) = area_and_length(mask_es)?;
    ef_from_area_length(a_ed, l_ed, a_es, l_es)
}

/// Largest 4-connected component of pixels below `tau` that does not touch
/// the frame border. `frame` is `H×W` (or `1×H×W`) in image space.
pub fn segment_threshold(frame: &Tensor, tau: f64) -> Result<SegMask> {
    let (h, w) = match frame.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => return Err(Error::invalid(format!("expected an H×W frame, got {s:?}"))),
    };
    if !frame.is_finite() {
        return Err(Error::NonFinite { op: "segment_threshold" });
    }
    let below: Vec<bool> = frame.data().iter().map(|&v| v < tau).collect();
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<Vec<usize>> = None;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !below[start] || label[start] != usize::MAX {
            continue;
        }
        let mut members = Vec::new();
        let mut touches_border = false;
        label[start] = start;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            members.push(idx);
            let (i, j) = (idx / w, idx % w);
            if i == 0 || j == 0 || i == h - 1 || j == w - 1 {
                touches_border = true;
            }
            let mut visit = |n: usize| {
                if below[n] && label[n] == usize::MAX {
                    label[n] = start;
                    queue.push_back(n);
                }
            };
            if i > 0 {
                visit(idx - w);
            }
            if i + 1 < h {
                visit(idx + w);
            }
            if j > 0 {
                visit(idx - 1);
            }
            if j + 1 < w {
                visit(idx + 1);
            }
        }
        // ties keep the first component in raster order
        if !touches_border && best.as_ref().is_none_or(|b| members.len() > b.len()) {
            best = Some(members);
        }
    }
    let members = best.ok_or(Error::NoComponent)?;
    let mut pixels = vec![false; h * w];
    for idx in members {
        pixels[idx] = true;
    }
    SegMask::new(h, w, pixels)
}

/// Sørensen–Dice overlap of two masks on the same grid.
pub fn dice(a: &SegMask, b: &SegMask) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::ShapeMismatch {
            op: "dice",
            lhs: vec![a.height, a.width],
            rhs: vec![b.height, b.width],
        });
    }
    let both = a.pixels.iter().zip(&b.pixels).filter(|(x, y)| **x && **y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(2.0 * both as f64 / total as f64)
}
