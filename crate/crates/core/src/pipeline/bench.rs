use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalbench::throughput_bench;
use crate::samplers::{Counted, SamplerKind, VelocityField};
use crate::seqcond::ConditioningSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub sampler: String,
    pub steps: usize,
    /// Network evaluations per generated video, as counted.
    pub evaluations: usize,
    pub iterations: usize,
    pub total_seconds: f64,
    pub videos_per_second: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    /// Throughput of the 1-step sampler over the 25-step Euler sampler.
    pub speedup_1_vs_25: f64,
}

impl BenchTable {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            what: "bench table",
            detail: e.to_string(),
        })
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<16} {:>5} {:>6} {:>10} {:>10}\n", "sampler", "steps", "evals", "seconds", "vid/s");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:>5} {:>6} {:>10.3} {:>10.2}\n",
                r.sampler, r.steps, r.evaluations, r.total_seconds, r.videos_per_second
            ));
        }
        out.push_str(&format!("1-step vs 25-step speedup: {:.1}x\n", self.speedup_1_vs_25));
        out
    }
}

fn bench_row<F: VelocityField + ?Sized>(
    field: &F,
    c: &ConditioningSet,
    sampler: SamplerKind,
    steps: usize,
    iterations: usize,
) -> Result<BenchRow> {
    let counted = Counted::new(field);
    sampler.run(&counted, c, 0)?;
    let evaluations = counted.calls();
    let mut seed = 0;
    let t = throughput_bench(
        || {
            seed += 1;
            sampler.run(field, c, seed).map(drop)
        },
        iterations,
    )?;
    log::info!("{}: {:.2} vid/s", sampler.label(), t.videos_per_second);
    Ok(BenchRow {
        sampler: sampler.label(),
        steps,
        evaluations,
        iterations,
        total_seconds: t.total_seconds,
        videos_per_second: t.videos_per_second,
    })
}

/// Times 1-step MeanFlow against 25-step Euler and, with `cfg_guidance`,
/// 25-step guided sampling, all on the same network.
pub fn bench_samplers<F: VelocityField + ?Sized>(
    field: &F,
    c: &ConditioningSet,
    iterations: usize,
    cfg_guidance: Option<f64>,
) -> Result<BenchTable> {
    let mut rows = vec![
        bench_row(field, c, SamplerKind::OneStep, 1, iterations)?,
        bench_row(field, c, SamplerKind::Euler { steps: 25 }, 25, iterations)?,
    ];
    if let Some(guidance) = cfg_guidance {
        rows.push(bench_row(field, c, SamplerKind::Cfg { guidance, steps: 25 }, 25, iterations)?);
    }
    let speedup_1_vs_25 = rows[0].videos_per_second / rows[1].videos_per_second;
    Ok(BenchTable { rows, speedup_1_vs_25 })
}
