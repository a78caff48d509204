use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{read_tensor, write_tensor};
use super::config::RunConfig;
use super::derive_seed;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seqcond::{temporal_normalize, PaddedVideo};
use crate::toyecho::{generate_toy_video, EllipseVideoSpec};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const VIDEO_DIR: &str = "videos";
const DATA_STREAM: u64 = 0xDA7A;

/// One line of the dataset index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub ef: f64,
    /// Raw sequence length before temporal normalisation.
    pub f: usize,
    pub seed: u64,
    pub a: f64,
    pub b_ed: f64,
    /// Path of the frame file, relative to the dataset directory.
    pub file: String,
}

impl ManifestEntry {
    pub fn spec(&self, cfg: &RunConfig) -> EllipseVideoSpec {
        let mut spec = EllipseVideoSpec::new(self.ef, self.f, cfg.model.height, cfg.model.width, self.seed);
        spec.a = self.a;
        spec.b_ed = self.b_ed;
        spec.noise_sigma = cfg.data.noise_sigma;
        spec
    }
}

/// Image-space `[0, 1]` frames to the model's `[−1, 1]` space.
pub fn to_model(t: &Tensor) -> Tensor {
    t.map(|v| 2.0 * v - 1.0)
}

pub fn to_image(t: &Tensor) -> Tensor {
    t.map(|v| 0.5 * (v + 1.0))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Writes `cfg.data.n_videos` toy videos and their manifest into `dir`.
pub fn generate_dataset(cfg: &RunConfig, dir: &Path) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    if cfg.model.in_channels != 1 {
        return Err(Error::invalid("toy videos have a single channel"));
    }
    let d = &cfg.data;
    let videos = dir.join(VIDEO_DIR);
    std::fs::create_dir_all(&videos).map_err(|e| Error::io(&videos, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, DATA_STREAM));
    let mut entries = Vec::with_capacity(d.n_videos);
    for i in 0..d.n_videos {
        let ef = rng.random_range(d.ef_min..=d.ef_max);
        let f = rng.random_range(d.f_min..=d.f_max);
        let seed = rng.random::<u64>();
        let mut jitter = || 1.0 + d.geometry_jitter * (2.0 * rng.random::<f64>() - 1.0);
        let base = EllipseVideoSpec::new(ef, f, cfg.model.height, cfg.model.width, seed);
        let entry = ManifestEntry {
            id: format!("toy-{i:05}"),
            ef,
            f,
            seed,
            a: base.a * jitter(),
            b_ed: base.b_ed * jitter(),
            file: format!("{VIDEO_DIR}/toy-{i:05}.bin"),
        };
        let video = generate_toy_video(&entry.spec(cfg))?;
        let path = dir.join(&entry.file);
        let mut w = create(&path)?;
        write_tensor(&mut w, &video.frames).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        entries.push(entry);
    }
    let path = dir.join(MANIFEST_FILE);
    let mut w = create(&path)?;
    for e in &entries {
        let line = serde_json::to_string(e).map_err(|err| Error::Format {
            what: "manifest",
            detail: err.to_string(),
        })?;
        writeln!(w, "{line}").map_err(|err| Error::io(&path, err))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    log::info!("wrote {} videos to {}", entries.len(), dir.display());
    Ok(entries)
}

/// A loaded dataset: manifest plus videos in model space, normalised to the
/// model's temporal capacity.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub videos: Vec<PaddedVideo>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_dataset(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let reader = BufReader::new(File::open(&path).map_err(|e| Error::io(&path, e))?);
    let mut entries = Vec::new();
    let mut videos = Vec::new();
    let (c, h, w) = (cfg.model.in_channels, cfg.model.height, cfg.model.width);
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "manifest",
            detail: e.to_string(),
        })?;
        let file = dir.join(&entry.file);
        let mut r = BufReader::new(File::open(&file).map_err(|e| Error::io(&file, e))?);
        let frames = read_tensor(&mut r).map_err(|e| Error::io(&file, e))?;
        if frames.shape() != [entry.f, c, h, w] {
            return Err(Error::ConfigMismatch(format!(
                "{} has shape {:?}, expected {:?}",
                entry.id,
                frames.shape(),
                [entry.f, c, h, w]
            )));
        }
        let raw: Vec<Tensor> = (0..entry.f).map(|k| frames.outer(k).map(|t| to_model(&t))).collect::<Result<_>>()?;
        videos.push(temporal_normalize(&raw, cfg.model.frames)?);
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(Error::invalid(format!("{} lists no videos", path.display())));
    }
    Ok(Dataset {
        dir: dir.to_path_buf(),
        entries,
        videos,
    })
}
