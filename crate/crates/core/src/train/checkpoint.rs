//! Checkpoint container: weights, optimizer moments, RNG state and both
//! configs in one checksummed binary file. Writes are atomic
//! (temp-then-rename) and round-trips are bit-exact.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};

use super::adam::Moments;
use super::{TrainConfig, TrainState};

const MAGIC: &[u8; 4] = b"CSCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: u64,
    rng_seed: [u8; 32],
    rng_stream: u64,
    rng_word_pos_hi: u64,
    rng_word_pos_lo: u64,
    running: BTreeMap<String, f64>,
}

fn push_tensors(out: &mut Vec<u8>, tensors: &BTreeMap<String, ArrayD<f64>>) {
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, a) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
        for &d in a.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let std = a.as_standard_layout();
        for &v in std.as_slice().expect("standard layout") {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptedCheckpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensors(&mut self) -> Result<BTreeMap<String, ArrayD<f64>>> {
        let count = self.u64()? as usize;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let name_len = self.u64()? as usize;
            let name = String::from_utf8(self.take(name_len)?.to_vec())
                .map_err(|_| Error::CorruptedCheckpoint("non-utf8 tensor name".into()))?;
            let ndim = self.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = self.take(n * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.insert(
                name,
                ArrayD::from_shape_vec(IxDyn(&shape), data)
                    .map_err(|e| Error::CorruptedCheckpoint(e.to_string()))?,
            );
        }
        Ok(out)
    }
}

/// Serialize weights + state + configs and write atomically.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    weights: &ModelWeights,
    state: &TrainState,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<()> {
    let path = path.as_ref();
    let meta = Meta {
        model_config: model_config.clone(),
        train_config: train_config.clone(),
        step: state.step,
        rng_seed: state.rng.get_seed(),
        rng_stream: state.rng.get_stream(),
        rng_word_pos_hi: (state.rng.get_word_pos() >> 64) as u64,
        rng_word_pos_lo: state.rng.get_word_pos() as u64,
        running: state.running.clone(),
    };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::msg(e.to_string()))?;

    let mut body = Vec::new();
    body.extend_from_slice(MAGIC);
    body.extend_from_slice(&VERSION.to_le_bytes());
    body.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    body.extend_from_slice(&meta_json);
    push_tensors(&mut body, &weights.params);
    let m_map: BTreeMap<String, ArrayD<f64>> =
        state.moments.iter().map(|(k, (m, _))| (k.clone(), m.clone())).collect();
    let v_map: BTreeMap<String, ArrayD<f64>> =
        state.moments.iter().map(|(k, (_, v))| (k.clone(), v.clone())).collect();
    push_tensors(&mut body, &m_map);
    push_tensors(&mut body, &v_map);

    let crc = crc32fast::hash(&body);
    body.extend_from_slice(&crc.to_le_bytes());

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&body)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Everything a checkpoint holds.
pub struct Checkpoint {
    pub weights: ModelWeights,
    pub state: TrainState,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
}

/// Load and verify a checkpoint. When `expected` is given, the stored
/// weights must match that config's parameter shapes.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    if bytes.len() < 12 {
        return Err(Error::CorruptedCheckpoint("file too small".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::CorruptedCheckpoint("checksum mismatch".into()));
    }

    let mut cur = Cursor { bytes: body, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::CorruptedCheckpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let meta_len = cur.u64()? as usize;
    let meta: Meta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| Error::CorruptedCheckpoint(format!("meta: {e}")))?;

    let params = cur.tensors()?;
    let m_map = cur.tensors()?;
    let v_map = cur.tensors()?;
    let mut moments = Moments::new();
    for (k, m) in m_map {
        let v = v_map
            .get(&k)
            .ok_or_else(|| Error::CorruptedCheckpoint(format!("moment {k} missing v")))?
            .clone();
        moments.insert(k, (m, v));
    }

    let weights = ModelWeights { params };
    let config = meta.model_config.clone();
    weights.matches_config(&config)?;
    if let Some(exp) = expected {
        weights.matches_config(exp)?;
    }

    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(meta.rng_seed);
    rng.set_stream(meta.rng_stream);
    rng.set_word_pos(((meta.rng_word_pos_hi as u128) << 64) | meta.rng_word_pos_lo as u128);

    Ok(Checkpoint {
        weights,
        state: TrainState {
            step: meta.step,
            moments,
            rng,
            running: meta.running,
        },
        model_config: meta.model_config,
        train_config: meta.train_config,
    })
}
