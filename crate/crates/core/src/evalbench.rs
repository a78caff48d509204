//! EF adherence statistics, rejection sampling, frame quality metrics and
//! the sampling-throughput benchmark.
//!
//! EF is a fraction everywhere in the API; serialized reports carry it in
//! percent (fields suffixed `_pct`).

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::samplers::{SamplerKind, VelocityField};
use crate::seqcond::{ConditioningSet, PaddedVideo};

/// Minimum gap between a Gen request and the source EF.
pub const GEN_MIN_GAP: f64 = 0.05;
pub const WARMUP_ITERS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Rec,
    Gen,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Rec => "rec",
            Task::Gen => "gen",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rec" => Ok(Task::Rec),
            "gen" => Ok(Task::Gen),
            other => Err(Error::invalid(format!("unknown task `{other}` (expected rec or gen)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdherenceRecord {
    pub id: String,
    pub task: Task,
    pub source_ef: f64,
    pub requested_ef: f64,
    pub observed_ef: f64,
}

impl AdherenceRecord {
    pub fn new(id: impl Into<String>, task: Task, source_ef: f64, requested_ef: f64, observed_ef: f64) -> Result<Self> {
        if !(source_ef.is_finite() && requested_ef.is_finite() && observed_ef.is_finite()) {
            return Err(Error::invalid("adherence record values must be finite"));
        }
        if task == Task::Gen && (requested_ef - source_ef).abs() < GEN_MIN_GAP - 1e-12 {
            return Err(Error::invalid(format!(
                "Gen request {requested_ef} is within {GEN_MIN_GAP} of the source EF {source_ef}"
            )));
        }
        Ok(AdherenceRecord {
            id: id.into(),
            task,
            source_ef,
            requested_ef,
            observed_ef,
        })
    }

    pub fn abs_error(&self) -> f64 {
        (self.observed_ef - self.requested_ef).abs()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adherence {
    pub n: usize,
    /// `None` when undefined (fewer than two records or no spread in the
    /// requested values).
    pub r2: Option<f64>,
    pub mae: f64,
    pub rmse: f64,
}

/// `1 − SS_res/SS_tot` with `target` as the regression target.
pub fn r_squared(target: &[f64], predicted: &[f64]) -> Result<f64> {
    if target.len() != predicted.len() {
        return Err(Error::ShapeMismatch {
            op: "r_squared",
            lhs: vec![target.len()],
            rhs: vec![predicted.len()],
        });
    }
    if target.len() < 2 {
        return Err(Error::UndefinedR2("fewer than two records"));
    }
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedR2("requested values have zero variance"));
    }
    let ss_res: f64 = target.iter().zip(predicted).map(|(y, p)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn ef_adherence(records: &[AdherenceRecord]) -> Result<Adherence> {
    if records.is_empty() {
        return Err(Error::invalid("no adherence records"));
    }
    let n = records.len() as f64;
    let requested: Vec<f64> = records.iter().map(|r| r.requested_ef).collect();
    let observed: Vec<f64> = records.iter().map(|r| r.observed_ef).collect();
    let mae = records.iter().map(AdherenceRecord::abs_error).sum::<f64>() / n;
    let rmse = (records.iter().map(|r| r.abs_error().powi(2)).sum::<f64>() / n).sqrt();
    Ok(Adherence {
        n: records.len(),
        r2: r_squared(&requested, &observed).ok(),
        mae,
        rmse,
    })
}

/// Seed of the `i`-th rejection-sampling candidate; candidate 0 reuses the
/// base seed so `k = 1` is plain sampling.
pub fn candidate_seed(base: u64, i: usize) -> u64 {
    base ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RejectionOutcome {
    pub video: PaddedVideo,
    pub observed_ef: f64,
    pub abs_error: f64,
    pub seed: u64,
    /// Candidates whose EF could not be estimated.
    pub failures: usize,
}

/// Draws `k` candidates and keeps the one whose estimated EF is closest to
/// the request. Ties keep the earliest candidate.
pub fn rejection_sample<F, E>(
    field: &F,
    sampler: &SamplerKind,
    c: &ConditioningSet,
    requested_ef: f64,
    k: usize,
    base_seed: u64,
    mut estimator: E,
) -> Result<RejectionOutcome>
where
    F: VelocityField + ?Sized,
    E: FnMut(&PaddedVideo) -> Result<f64>,
{
    if k == 0 {
        return Err(Error::invalid("rejection sampling needs k ≥ 1"));
    }
    let mut best: Option<RejectionOutcome> = None;
    let mut failures = 0;
    for i in 0..k {
        let seed = candidate_seed(base_seed, i);
        let video = sampler.run(field, c, seed)?;
        let observed = match estimator(&video) {
            Ok(ef) if ef.is_finite() => ef,
            _ => {
                failures += 1;
                continue;
            }
        };
        let err = (observed - requested_ef).abs();
        if best.as_ref().is_none_or(|b| err < b.abs_error) {
            best = Some(RejectionOutcome {
                video,
                observed_ef: observed,
                abs_error: err,
                seed,
                failures: 0,
            });
        }
    }
    let mut out = best.ok_or(Error::EstimatorFailed(k))?;
    out.failures = failures;
    Ok(out)
}

fn frame_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        s => Err(Error::invalid(format!("expected an H×W frame, got {s:?}"))),
    }
}

pub const SSIM_WINDOW: usize = 7;

/// Mean SSIM over all 7×7 windows (uniform weights, data range 1,
/// `C1 = 0.01²`, `C2 = 0.03²`).
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "ssim")?;
    let (h, w) = frame_dims(a)?;
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::invalid(format!("frames must be at least {k}×{k} for SSIM")));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (x, y) = (a.data(), b.data());
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - k {
        for j in 0..=w - k {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..k {
                let row = (i + di) * w + j;
                for idx in row..row + k {
                    let (p, q) = (x[idx], y[idx]);
                    sx += p;
                    sy += q;
                    sxx += p * p;
                    syy += q * q;
                    sxy += p * q;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cov = sxy / n - mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Peak signal-to-noise ratio for data range 1; infinite for identical
/// inputs.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mse = a.sub(b)?.sq_norm() / a.numel() as f64;
    Ok(10.0 * (1.0 / mse).log10())
}

pub fn mae(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.sub(b)?.data().iter().map(|d| d.abs()).sum::<f64>() / a.numel() as f64)
}

pub fn rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((a.sub(b)?.sq_norm() / a.numel() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub ssim: f64,
    pub psnr: f64,
    pub mae: f64,
    pub rmse: f64,
}

/// Frame metrics averaged over the valid frames of two videos in image
/// space (`F×1×H×W`, values nominally in `[0, 1]`).
pub fn video_quality(a: &PaddedVideo, b: &Tensor) -> Result<Quality> {
    a.frames().expect_same_shape(b, "video_quality")?;
    let mut q = Quality::default();
    let mut n = 0.0;
    for i in a.valid_indices() {
        let (fa, fb) = (a.frames().outer(i)?, b.outer(i)?);
        let channels = fa.shape()[0];
        for ch in 0..channels {
            let (pa, pb) = (fa.outer(ch)?, fb.outer(ch)?);
            q.ssim += ssim(&pa, &pb)?;
            q.psnr += psnr(&pa, &pb)?.min(100.0);
            q.mae += mae(&pa, &pb)?;
            q.rmse += rmse(&pa, &pb)?;
            n += 1.0;
        }
    }
    Ok(Quality {
        ssim: q.ssim / n,
        psnr: q.psnr / n,
        mae: q.mae / n,
        rmse: q.rmse / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub iterations: usize,
    pub total_seconds: f64,
    pub videos_per_second: f64,
}

/// Runs `sample` [`WARMUP_ITERS`] times untimed, then `n_iter` times timed.
pub fn throughput_bench<S>(mut sample: S, n_iter: usize) -> Result<Throughput>
where
    S: FnMut() -> Result<()>,
{
    if n_iter == 0 {
        return Err(Error::invalid("throughput bench needs at least one iteration"));
    }
    for _ in 0..WARMUP_ITERS {
        sample()?;
    }
    let start = Instant::now();
    for _ in 0..n_iter {
        sample()?;
    }
    let total = start.elapsed().as_secs_f64();
    Ok(Throughput {
        iterations: n_iter,
        total_seconds: total,
        videos_per_second: n_iter as f64 / total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub id: String,
    pub task: Task,
    pub source_ef_pct: f64,
    pub requested_ef_pct: f64,
    pub observed_ef_pct: f64,
    pub abs_error_pct: f64,
}

impl From<&AdherenceRecord> for RecordRow {
    fn from(r: &AdherenceRecord) -> Self {
        RecordRow {
            id: r.id.clone(),
            task: r.task,
            source_ef_pct: 100.0 * r.source_ef,
            requested_ef_pct: 100.0 * r.requested_ef,
            observed_ef_pct: 100.0 * r.observed_ef,
            abs_error_pct: 100.0 * r.abs_error(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub task: Task,
    pub sampler: String,
    pub rejection_k: usize,
    pub n_records: usize,
    /// Items whose generated video could not be segmented.
    pub n_failed: usize,
    pub r2: Option<f64>,
    pub mae_pct: f64,
    pub rmse_pct: f64,
    pub quality: Option<Quality>,
    pub throughput: Option<Throughput>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub summary: ReportSummary,
    pub records: Vec<RecordRow>,
}

impl MetricReport {
    pub fn new(
        task: Task,
        sampler: &SamplerKind,
        rejection_k: usize,
        records: &[AdherenceRecord],
        n_failed: usize,
        quality: Option<Quality>,
    ) -> Result<Self> {
        let stats = ef_adherence(records)?;
        Ok(MetricReport {
            summary: ReportSummary {
                task,
                sampler: sampler.label(),
                rejection_k,
                n_records: records.len(),
                n_failed,
                r2: stats.r2,
                mae_pct: 100.0 * stats.mae,
                rmse_pct: 100.0 * stats.rmse,
                quality,
                throughput: None,
            },
            records: records.iter().map(RecordRow::from).collect(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            what: "metric report",
            detail: e.to_string(),
        })
    }

    /// One CSV row per record.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.records {
            w.serialize(row).map_err(|e| Error::Format {
                what: "metric csv",
                detail: e.to_string(),
            })?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format {
            what: "metric csv",
            detail: e.to_string(),
        })?;
        String::from_utf8(bytes).map_err(|e| Error::Format {
            what: "metric csv",
            detail: e.to_string(),
        })
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [("json", self.to_json()?), ("csv", self.to_csv()?)] {
            let path = dir.join(format!("{stem}.{ext}"));
            let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(body.as_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
