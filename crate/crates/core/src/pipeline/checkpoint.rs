//! Versioned little-endian checkpoint format.
//!
//! ```text
//! magic      8 bytes  "LVFMCKPT"
//! version    u32
//! config     u64 length + UTF-8 TOML of the RunConfig
//! epoch      u64      epochs completed
//! adam_step  u64      optimizer updates applied
//! rng        32-byte seed, u64 stream, u128 word position (ChaCha8)
//! n_params   u64
//! per parameter, in name order:
//!   name     u32 length + UTF-8
//!   value, adam m, adam v as tensors
//! tensor:    u32 rank, rank × u64 dims, then f64 values
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::config::RunConfig;
use super::train::{AdamState, TrainState};
use crate::autodiff::{ParameterSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LVFMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Largest rank or name length accepted when reading; guards against
/// allocating from garbage.
const SANITY_LIMIT: u64 = 1 << 32;

fn bad(detail: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, detail.into())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u128(r: &mut impl Read) -> io::Result<u128> {
    let mut b = [0u8; 16];
    r.read_exact(&mut b)?;
    Ok(u128::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, len: u64) -> io::Result<Vec<u8>> {
    if len > SANITY_LIMIT {
        return Err(bad(format!("implausible length {len}")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub(crate) fn write_tensor(w: &mut impl Write, t: &Tensor) -> io::Result<()> {
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_tensor(r: &mut impl Read) -> io::Result<Tensor> {
    let rank = read_u32(r)?;
    if rank > 16 {
        return Err(bad(format!("implausible tensor rank {rank}")));
    }
    let shape: Vec<usize> = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<io::Result<_>>()?;
    let numel = shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
    let numel = numel.filter(|&n| n <= SANITY_LIMIT).ok_or_else(|| bad("implausible tensor size"))?;
    let bytes = read_bytes(r, numel * 8)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

/// A resumable snapshot of training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn to_writer(&self, w: &mut impl Write) -> Result<()> {
        let io = |e| Error::io("<checkpoint>", e);
        let config = self.config.to_toml()?;
        let s = &self.state;
        let put = |w: &mut dyn Write, bytes: &[u8]| w.write_all(bytes).map_err(io);
        put(w, CHECKPOINT_MAGIC)?;
        put(w, &CHECKPOINT_VERSION.to_le_bytes())?;
        put(w, &(config.len() as u64).to_le_bytes())?;
        put(w, config.as_bytes())?;
        put(w, &(s.epoch as u64).to_le_bytes())?;
        put(w, &s.adam.step.to_le_bytes())?;
        put(w, &s.rng.get_seed())?;
        put(w, &s.rng.get_stream().to_le_bytes())?;
        put(w, &s.rng.get_word_pos().to_le_bytes())?;
        put(w, &(s.params.len() as u64).to_le_bytes())?;
        for (name, value) in s.params.iter() {
            put(w, &(name.len() as u32).to_le_bytes())?;
            put(w, name.as_bytes())?;
            write_tensor(w, value).map_err(io)?;
            write_tensor(w, s.adam.m.require(name)?).map_err(io)?;
            write_tensor(w, s.adam.v.require(name)?).map_err(io)?;
        }
        Ok(())
    }

    pub fn from_reader(r: &mut impl Read) -> Result<Self> {
        let io = |e| Error::io("<checkpoint>", e);
        let format = |detail: String| Error::Format {
            what: "checkpoint",
            detail,
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(format("bad magic bytes".into()));
        }
        let version = read_u32(r).map_err(io)?;
        if version != CHECKPOINT_VERSION {
            return Err(format(format!("unsupported version {version}")));
        }
        let len = read_u64(r).map_err(io)?;
        let text = String::from_utf8(read_bytes(r, len).map_err(io)?).map_err(|e| format(e.to_string()))?;
        let config = RunConfig::from_toml(&text)?;
        let epoch = read_u64(r).map_err(io)? as usize;
        let step = read_u64(r).map_err(io)?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed).map_err(io)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(read_u64(r).map_err(io)?);
        rng.set_word_pos(read_u128(r).map_err(io)?);
        let n = read_u64(r).map_err(io)?;
        let (mut params, mut m, mut v) = (ParameterSet::new(), ParameterSet::new(), ParameterSet::new());
        for _ in 0..n {
            let len = read_u32(r).map_err(io)?;
            let name = String::from_utf8(read_bytes(r, len as u64).map_err(io)?).map_err(|e| format(e.to_string()))?;
            params.insert(name.clone(), read_tensor(r).map_err(io)?);
            m.insert(name.clone(), read_tensor(r).map_err(io)?);
            v.insert(name, read_tensor(r).map_err(io)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(io)? != 0 {
            return Err(format("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config,
            state: TrainState {
                params,
                adam: AdamState { m, v, step },
                epoch,
                rng,
            },
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut w = BufWriter::new(File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
        self.to_writer(&mut w)?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        Self::from_reader(&mut r).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use rand::Rng;

    fn checkpoint() -> Checkpoint {
        let config = RunConfig::default();
        let model = Model::new(config.model.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut state = TrainState::new(&model, 3);
        for (_, t) in state.adam.m.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random());
        }
        state.epoch = 4;
        state.adam.step = 17;
        let _: u64 = state.rng.random();
        Checkpoint { config, state }
    }

    #[test]
    fn round_trips_exactly() {
        let ck = checkpoint();
        let mut buf = Vec::new();
        ck.to_writer(&mut buf).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), CHECKPOINT_VERSION);
        let back = Checkpoint::from_reader(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.state.params, ck.state.params);
        assert_eq!(back.state.adam, ck.state.adam);
        assert_eq!(back.state.epoch, 4);
        assert_eq!(back.state.rng, ck.state.rng);
        let mut again = Vec::new();
        back.to_writer(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_corruption() {
        let mut buf = Vec::new();
        checkpoint().to_writer(&mut buf).unwrap();
        let mut wrong_version = buf.clone();
        wrong_version[8] = 99;
        assert!(matches!(Checkpoint::from_reader(&mut wrong_version.as_slice()), Err(Error::Format { .. })));
        let mut wrong_magic = buf.clone();
        wrong_magic[0] = b'X';
        assert!(Checkpoint::from_reader(&mut wrong_magic.as_slice()).is_err());
        let truncated = &buf[..buf.len() - 3];
        assert!(Checkpoint::from_reader(&mut &truncated[..]).is_err());
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(Checkpoint::from_reader(&mut trailing.as_slice()).is_err());
    }

    #[test]
    fn save_and_load_via_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/ck.bin");
        let ck = checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.state.params, ck.state.params);
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
