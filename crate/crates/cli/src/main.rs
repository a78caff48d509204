//! `lvfm`: generate toy echo data, train the masked MeanFlow model, sample
//! videos, evaluate EF adherence and benchmark sampler throughput.
//!
//! Log verbosity follows `RUST_LOG` (default `info`).

mod frames;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lvfm_core::evalbench::Task;
use lvfm_core::model::Model;
use lvfm_core::pipeline::{
    bench_samplers, evaluate, generate_dataset, load_dataset, segmentation_estimator, train, to_model, Checkpoint,
    RunConfig, TrainState,
};
use lvfm_core::samplers::{uniform_grid, Counted, Network, SamplerKind};
use lvfm_core::seqcond::{temporal_normalize, ConditioningSet};
use lvfm_core::toyecho::{generate_toy_video, EllipseVideoSpec};
use lvfm_core::Tensor;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const CONFIG_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "lvfm", version, about = "One-step masked MeanFlow generation of echo-like videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand; flags override the config file.
#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Proportion of valid frames masked out of the conditioning video.
    #[arg(long)]
    pmf: Option<f64>,
    /// Adaptive-weight exponent.
    #[arg(long)]
    h: Option<f64>,
    #[arg(long = "lambda-rec")]
    lambda_rec: Option<f64>,
    #[arg(long = "p-linear")]
    p_linear: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Rec,
    Gen,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Rec => Task::Rec,
            TaskArg::Gen => Task::Gen,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a toy dataset (videos plus manifest.jsonl).
    Datagen {
        #[command(flatten)]
        common: Common,
        /// Number of videos (overrides the config).
        #[arg(long)]
        videos: Option<usize>,
    },
    /// Train on a dataset, writing config.toml and checkpoint.bin to --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop once this many epochs are complete; the learning-rate
        /// schedule still spans all epochs, so a later --resume continues
        /// the same trajectory.
        #[arg(long)]
        until: Option<usize>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate one video and write PNG frames, a GIF and an M-mode strip.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Requested EF as a fraction.
        #[arg(long, default_value_t = 0.5)]
        ef: f64,
        /// Valid frames in the generated video (at most the capacity).
        #[arg(long)]
        frames: Option<usize>,
        /// Sampling steps; 1 is the one-step sampler.
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// Take the observed end-diastolic frame from this dataset item
        /// instead of a fresh toy ellipse.
        #[arg(long, requires = "data")]
        item: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Nearest-neighbour magnification of written images.
        #[arg(long, default_value_t = 8)]
        scale: u32,
    },
    /// Measure EF adherence on a dataset and write metrics as JSON and CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "gen")]
        task: TaskArg,
        /// Candidates per item for rejection sampling.
        #[arg(long)]
        rs: Option<usize>,
        /// Sampling steps; 1 is the one-step sampler.
        #[arg(long)]
        steps: Option<usize>,
        /// Items to evaluate; 0 means all.
        #[arg(long)]
        items: Option<usize>,
    },
    /// Time 1-step against 25-step sampling (and guided sampling).
    Bench {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to time; a freshly initialised network otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        /// Skip the guided-sampling row.
        #[arg(long)]
        no_cfg: bool,
    },
}

fn load_config(common: &Common, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, base) {
        (Some(path), _) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        (None, Some(base)) => base,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(pmf) = common.pmf {
        cfg.train.pmf = pmf;
        cfg.eval.pmf = pmf;
    }
    if let Some(h) = common.h {
        cfg.loss.h = h;
    }
    if let Some(l) = common.lambda_rec {
        cfg.loss.lambda_rec = l;
    }
    if let Some(p) = common.p_linear {
        cfg.loss.p_linear = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sampler_for(steps: usize) -> Result<SamplerKind> {
    Ok(match steps {
        0 => bail!("--steps must be at least 1"),
        1 => SamplerKind::OneStep,
        n => SamplerKind::Interval { grid: uniform_grid(n)? },
    })
}

/// Loads a checkpoint and merges command-line settings into its config.
fn load_checkpoint(path: &Path, common: &Common) -> Result<(RunConfig, Checkpoint)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = load_config(common, Some(ck.config.clone()))?;
    cfg.check_compatible(&ck.config)?;
    Ok((cfg, ck))
}

fn write_json(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn cmd_datagen(common: &Common, videos: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common, None)?;
    if let Some(n) = videos {
        cfg.data.n_videos = n;
    }
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    generate_dataset(&cfg, &dir)?;
    println!("wrote {} videos to {}", cfg.data.n_videos, dir.display());
    Ok(())
}

fn cmd_train(common: &Common, data: &Path, epochs: Option<usize>, until: Option<usize>, resume: Option<&Path>) -> Result<()> {
    let (cfg, mut state) = match resume {
        Some(path) => {
            let (mut cfg, ck) = load_checkpoint(path, common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            (cfg, ck.state)
        }
        None => {
            let mut cfg = load_config(common, None)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let model = Model::new(cfg.model.clone())?;
            let state = TrainState::new(&model, cfg.seed);
            (cfg, state)
        }
    };
    let dataset = load_dataset(&cfg, data)?;
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    cfg.save(&cfg.out_dir.join(CONFIG_FILE))?;
    let ck_path = cfg.out_dir.join(CHECKPOINT_FILE);
    let logs = train(&cfg, &dataset, &mut state, until.unwrap_or(cfg.train.epochs), Some(&ck_path))?;
    let lines: Vec<String> = logs
        .iter()
        .map(serde_json::to_string)
        .collect::<Result<_, _>>()?;
    let log_path = cfg.out_dir.join("train_log.jsonl");
    let mut existing = std::fs::read_to_string(&log_path).unwrap_or_default();
    if resume.is_none() {
        existing.clear();
    }
    for l in lines {
        existing.push_str(&l);
        existing.push('\n');
    }
    std::fs::write(&log_path, existing).with_context(|| format!("writing {}", log_path.display()))?;
    if let Some(last) = logs.last() {
        println!("epoch {}: loss {:.5}", last.epoch, last.mean_loss);
    }
    println!("checkpoint: {}", ck_path.display());
    Ok(())
}

struct SampleArgs<'a> {
    checkpoint: &'a Path,
    ef: f64,
    frames: Option<usize>,
    steps: usize,
    item: Option<usize>,
    data: Option<&'a Path>,
    scale: u32,
}

fn cmd_sample(common: &Common, a: SampleArgs<'_>) -> Result<()> {
    let (cfg, ck) = load_checkpoint(a.checkpoint, common)?;
    let m = &cfg.model;
    let f = a.frames.unwrap_or(m.frames);
    if f == 0 || f > m.frames {
        bail!("--frames must lie in 1..={}", m.frames);
    }
    let seed = cfg.seed;
    // the observed frame: a dataset item's first frame or a fresh toy ellipse
    let ed = match (a.item, a.data) {
        (Some(i), Some(dir)) => {
            let ds = load_dataset(&cfg, dir)?;
            let v = ds.videos.get(i).with_context(|| format!("dataset has {} items", ds.len()))?;
            v.frame(0)?
        }
        _ => {
            let spec = EllipseVideoSpec::new(0.5, 2, m.height, m.width, seed);
            to_model(&generate_toy_video(&spec)?.frames.outer(0)?)
        }
    };
    let raw: Vec<Tensor> = (0..f)
        .map(|k| if k == 0 { ed.clone() } else { Tensor::zeros(ed.shape()) })
        .collect();
    let video = temporal_normalize(&raw, m.frames)?;
    let c = ConditioningSet::from_video(&video, a.ef, &[0])?;
    let model = Model::new(m.clone())?;
    model.check_params(&ck.state.params)?;
    let field = Counted::new(Network::new(&model, &ck.state.params));
    let sampler = sampler_for(a.steps)?;
    let out = sampler.run(&field, &c, seed)?;
    log::info!("model invocations: {}", field.calls());
    let dir = cfg.out_dir.clone();
    let written = frames::write_video(&out, &dir, a.scale)?;
    let estimate = segmentation_estimator(cfg.eval.tau)(&out);
    match estimate {
        Ok(ef) => println!("requested EF {:.1}%, read back {:.1}%", 100.0 * a.ef, 100.0 * ef),
        Err(e) => println!("requested EF {:.1}%, could not segment: {e}", 100.0 * a.ef),
    }
    println!("wrote {written} frames to {}", dir.display());
    Ok(())
}

fn cmd_eval(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    task: Task,
    rs: Option<usize>,
    steps: Option<usize>,
    items: Option<usize>,
) -> Result<()> {
    let (mut cfg, ck) = load_checkpoint(checkpoint, common)?;
    if let Some(k) = rs {
        cfg.eval.rs_k = k;
    }
    if let Some(s) = steps {
        cfg.eval.sampler = sampler_for(s)?;
    }
    if let Some(n) = items {
        cfg.eval.n_items = n;
    }
    cfg.validate()?;
    let dataset = load_dataset(&cfg, data)?;
    let model = Model::new(cfg.model.clone())?;
    let field = Network::new(&model, &ck.state.params);
    let out = evaluate(&field, &cfg, &dataset, task, segmentation_estimator(cfg.eval.tau))?;
    let stem = match task {
        Task::Rec => "metrics_rec",
        Task::Gen => "metrics_gen",
    };
    out.report.write(&cfg.out_dir, stem)?;
    let s = &out.report.summary;
    println!(
        "{task} ({}, k={}): n={} failed={} R²={} MAE={:.2}% RMSE={:.2}%",
        s.sampler,
        s.rejection_k,
        s.n_records,
        s.n_failed,
        s.r2.map_or_else(|| "undefined".to_string(), |r| format!("{r:.3}")),
        s.mae_pct,
        s.rmse_pct
    );
    if let Some(q) = &s.quality {
        println!("SSIM={:.3} PSNR={:.2} dB", q.ssim, q.psnr);
    }
    Ok(())
}

fn cmd_bench(common: &Common, checkpoint: Option<&Path>, iters: Option<usize>, no_cfg: bool) -> Result<()> {
    let (cfg, params) = match checkpoint {
        Some(path) => {
            let (cfg, ck) = load_checkpoint(path, common)?;
            (cfg, ck.state.params)
        }
        None => {
            let cfg = load_config(common, None)?;
            let model = Model::new(cfg.model.clone())?;
            let params = TrainState::new(&model, cfg.seed).params;
            (cfg, params)
        }
    };
    let m = &cfg.model;
    let model = Model::new(m.clone())?;
    let spec = EllipseVideoSpec::new(0.5, m.frames, m.height, m.width, cfg.seed);
    let toy = generate_toy_video(&spec)?;
    let raw: Vec<Tensor> = (0..m.frames).map(|k| toy.frames.outer(k).map(|t| to_model(&t))).collect::<Result<_, _>>()?;
    let video = temporal_normalize(&raw, m.frames)?;
    let c = ConditioningSet::from_video(&video, 0.5, &[0])?;
    let field = Network::new(&model, &params);
    let guidance = (!no_cfg).then_some(cfg.eval.cfg_guidance);
    let table = bench_samplers(&field, &c, iters.unwrap_or(cfg.eval.bench_iters), guidance)?;
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    write_json(&cfg.out_dir.join("bench.json"), &table.to_json()?)?;
    print!("{}", table.to_table());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Datagen { common, videos } => cmd_datagen(common, *videos),
        Command::Train {
            common,
            data,
            epochs,
            until,
            resume,
        } => cmd_train(common, data, *epochs, *until, resume.as_deref()),
        Command::Sample {
            common,
            checkpoint,
            ef,
            frames,
            steps,
            item,
            data,
            scale,
        } => cmd_sample(
            common,
            SampleArgs {
                checkpoint,
                ef: *ef,
                frames: *frames,
                steps: *steps,
                item: *item,
                data: data.as_deref(),
                scale: *scale,
            },
        ),
        Command::Eval {
            common,
            checkpoint,
            data,
            task,
            rs,
            steps,
            items,
        } => cmd_eval(common, checkpoint, data, (*task).into(), *rs, *steps, *items),
        Command::Bench {
            common,
            checkpoint,
            iters,
            no_cfg,
        } => cmd_bench(common, checkpoint.as_deref(), *iters, *no_cfg),
    }
}
