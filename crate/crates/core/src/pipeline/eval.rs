use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::data::{to_image, Dataset};
use super::derive_seed;
use crate::error::{Error, Result};
use crate::evalbench::{rejection_sample, video_quality, AdherenceRecord, MetricReport, Quality, Task};
use crate::samplers::VelocityField;
use crate::seqcond::{ConditioningSet, PaddedVideo};
use crate::toyecho::{proxy_ef, segment_threshold};

const EVAL_STREAM: u64 = 0xE7A1;

/// Reads EF off a generated video: threshold-segment its first and last
/// valid frames (end-diastole and end-systole) and apply the area–length
/// proxy.
pub fn segmentation_estimator(tau: f64) -> impl Fn(&PaddedVideo) -> Result<f64> {
    move |v: &PaddedVideo| {
        let first = v.valid_indices().next().ok_or(Error::AllPadded)?;
        let last = v.valid_indices().last().ok_or(Error::AllPadded)?;
        let ed = segment_threshold(&to_image(&v.frames().outer(first)?), tau)?;
        let es = segment_threshold(&to_image(&v.frames().outer(last)?), tau)?;
        proxy_ef(&ed, &es)
    }
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: MetricReport,
    /// Items excluded because no candidate could be segmented, with the reason.
    pub failures: Vec<(String, String)>,
}

fn gen_request(cfg: &RunConfig, source: f64, rng: &mut ChaCha8Rng) -> f64 {
    let e = &cfg.eval;
    loop {
        let ef = rng.random_range(e.gen_ef_min..=e.gen_ef_max);
        if (ef - source).abs() >= e.gen_min_gap {
            return ef;
        }
    }
}

/// Number of leading valid frames kept in the conditioning video.
fn kept_frames(f_valid: usize, pmf: f64) -> usize {
    let masked = ((pmf * f_valid as f64).ceil() as usize).min(f_valid - 1);
    f_valid - masked
}

/// Conditions on the leading frames of each item (end-diastole first) and
/// either its true EF (Rec) or a conflicting one (Gen), samples, reads the
/// EF back with `estimator` and aggregates adherence.
pub fn evaluate<F, E>(field: &F, cfg: &RunConfig, data: &Dataset, task: Task, mut estimator: E) -> Result<EvalOutcome>
where
    F: VelocityField + ?Sized,
    E: FnMut(&PaddedVideo) -> Result<f64>,
{
    cfg.validate()?;
    let e = &cfg.eval;
    let n = if e.n_items == 0 { data.len() } else { e.n_items.min(data.len()) };
    let base = derive_seed(cfg.seed, EVAL_STREAM);
    let mut records = Vec::with_capacity(n);
    let mut failures = Vec::new();
    let mut quality = Quality::default();
    for i in 0..n {
        let entry = &data.entries[i];
        let x = &data.videos[i];
        let item_seed = derive_seed(base, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
        let requested = match task {
            Task::Rec => entry.ef,
            Task::Gen => gen_request(cfg, entry.ef, &mut rng),
        };
        let keep: Vec<usize> = x.valid_indices().take(kept_frames(x.f_valid(), e.pmf)).collect();
        let c = ConditioningSet::from_video(x, requested, &keep)?;
        let mut candidate = 0;
        let outcome = rejection_sample(field, &e.sampler, &c, requested, e.rs_k, rng.random(), |v| {
            candidate += 1;
            let ef = estimator(v);
            match &ef {
                Ok(ef) => log::debug!("{}: sample {candidate}/{} EF {ef:.4}", entry.id, e.rs_k),
                Err(err) => log::debug!("{}: sample {candidate}/{} failed: {err}", entry.id, e.rs_k),
            }
            ef
        });
        let outcome = match outcome {
            Ok(o) => o,
            Err(err @ Error::EstimatorFailed(_)) => {
                log::warn!("{}: excluded, {err}", entry.id);
                failures.push((entry.id.clone(), err.to_string()));
                continue;
            }
            Err(err) => return Err(err),
        };
        if task == Task::Rec {
            let generated = PaddedVideo::with_zeroed_padding(to_image(outcome.video.frames()), outcome.video.padding().to_vec())?;
            let q = video_quality(&generated, &to_image(x.frames()))?;
            quality.ssim += q.ssim;
            quality.psnr += q.psnr;
            quality.mae += q.mae;
            quality.rmse += q.rmse;
        }
        records.push(AdherenceRecord::new(
            entry.id.clone(),
            task,
            entry.ef,
            requested,
            outcome.observed_ef,
        )?);
    }
    let quality = (task == Task::Rec && !records.is_empty()).then(|| {
        let k = records.len() as f64;
        Quality {
            ssim: quality.ssim / k,
            psnr: quality.psnr / k,
            mae: quality.mae / k,
            rmse: quality.rmse / k,
        }
    });
    let report = MetricReport::new(task, &e.sampler, e.rs_k, &records, failures.len(), quality)?;
    log::info!(
        "{task}: {} items, {} failed, R² {}, MAE {:.2}%, RMSE {:.2}%",
        records.len(),
        failures.len(),
        report.summary.r2.map_or_else(|| "undefined".into(), |r| format!("{r:.3}")),
        report.summary.mae_pct,
        report.summary.rmse_pct
    );
    Ok(EvalOutcome { report, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::pipeline::data::generate_dataset;
    use crate::pipeline::load_dataset;
    use crate::samplers::Counted;

    /// Produces a video whose every pixel equals the requested EF.
    struct Oracle;

    impl VelocityField for Oracle {
        fn eval(&self, x_t: &Tensor, _r: f64, _t: f64, c: &ConditioningSet) -> Result<Tensor> {
            let phi = c.phi().unwrap();
            Ok(x_t.map(|v| v - phi))
        }
    }

    fn mean_pixel(v: &PaddedVideo) -> Result<f64> {
        let f = v.frames().outer(0)?;
        Ok(f.sum() / f.numel() as f64)
    }

    fn setup(n: usize) -> (RunConfig, Dataset, tempfile::TempDir) {
        let mut cfg = RunConfig::default();
        cfg.data.n_videos = n;
        cfg.eval.n_items = 0;
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, dir.path()).unwrap();
        let data = load_dataset(&cfg, dir.path()).unwrap();
        (cfg, data, dir)
    }

    #[test]
    fn oracle_sampler_is_perfect() {
        let (cfg, data, _dir) = setup(12);
        for task in [Task::Rec, Task::Gen] {
            let out = evaluate(&Oracle, &cfg, &data, task, mean_pixel).unwrap();
            assert!((out.report.summary.r2.unwrap() - 1.0).abs() < 1e-12);
            assert!(out.report.summary.mae_pct < 1e-10);
        }
    }

    #[test]
    fn gen_requests_keep_their_distance() {
        let (cfg, data, _dir) = setup(40);
        let out = evaluate(&Oracle, &cfg, &data, Task::Gen, mean_pixel).unwrap();
        for r in &out.report.records {
            assert!((r.requested_ef_pct - r.source_ef_pct).abs() >= 5.0 - 1e-9);
            assert!((15.0..=70.0).contains(&r.requested_ef_pct));
        }
    }

    #[test]
    fn rejection_sampling_draws_k_candidates() {
        let (mut cfg, data, _dir) = setup(5);
        cfg.eval.rs_k = 3;
        let field = Counted::new(Oracle);
        let mut calls = 0;
        evaluate(&field, &cfg, &data, Task::Gen, |v| {
            calls += 1;
            mean_pixel(v)
        })
        .unwrap();
        assert_eq!((calls, field.calls()), (15, 15));
    }

    #[test]
    fn segmentation_failures_are_counted_and_excluded() {
        let (cfg, data, _dir) = setup(6);
        let mut i = 0;
        let out = evaluate(&Oracle, &cfg, &data, Task::Rec, |v| {
            i += 1;
            if i % 3 == 0 {
                Err(Error::NoComponent)
            } else {
                mean_pixel(v)
            }
        })
        .unwrap();
        assert_eq!(out.report.summary.n_failed, 2);
        assert_eq!(out.report.summary.n_records, 4);
        assert_eq!(out.failures.len(), 2);
    }

    #[test]
    fn estimator_reads_true_videos() {
        let (cfg, data, _dir) = setup(30);
        let est = segmentation_estimator(cfg.eval.tau);
        let mut err = 0.0;
        for (e, v) in data.entries.iter().zip(&data.videos) {
            err += (est(v).unwrap() - e.ef).abs();
        }
        assert!(err / 30.0 < 0.06, "mean abs error {}", err / 30.0);
    }

    #[test]
    fn kept_frames_follow_pmf() {
        assert_eq!(kept_frames(10, 1.0), 1);
        assert_eq!(kept_frames(10, 0.5), 5);
        assert_eq!(kept_frames(10, 0.0), 10);
        assert_eq!(kept_frames(1, 1.0), 1);
    }
}
