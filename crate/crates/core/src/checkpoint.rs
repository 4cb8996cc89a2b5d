//! DCVC checkpoint files.
//!
//! Layout, little-endian:
//!
//! ```text
//! "DCVC" | u32 version
//! u32 len | UTF-8 key = value block (training config plus run metadata)
//! u32 tensor count
//! per tensor: u32 name len | name | u32 ndim | u32 dims... | f32 data
//! ```
//!
//! Parameters are stored as `f32`. [`Checkpoint::from_model`] rounds them at
//! capture time, so a model rebuilt from a loaded file predicts exactly what
//! the in-memory checkpoint predicts.

use std::fs;
use std::path::Path;

use crate::config::{parse_kv, KvEntry, TrainConfig};
use crate::error::{Error, Result};
use crate::features::Reader;
use crate::model::Model;
use crate::quality::RemapStats;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DCVC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Epoch (1-based) whose parameters are stored.
    pub epoch: usize,
    pub best_val_srocc: f64,
    /// Validation-split raw-score statistics at the stored epoch and the
    /// training label range; used to remap predictions of single clips.
    pub remap: RemapStats,
    pub params: Vec<(String, Tensor)>,
}

const META_KEYS: [&str; 6] = ["epoch", "best_val_srocc", "q_mean", "q_std", "label_min", "label_max"];

fn round_f32(t: &Tensor) -> Tensor {
    t.map(|x| f64::from(x as f32))
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &TrainConfig, epoch: usize, best_val_srocc: f64, remap: RemapStats) -> Self {
        Self {
            config: config.clone(),
            epoch,
            best_val_srocc,
            remap,
            params: model.store.iter().map(|(n, t)| (n.to_string(), round_f32(t))).collect(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model.clone(), self.config.seed)?;
        model.store.load_named(self.params.clone())?;
        Ok(model)
    }

    pub fn label_range(&self) -> (f64, f64) {
        (self.remap.s_min, self.remap.s_max)
    }

    fn config_block(&self) -> String {
        let mut text = self.config.to_kv_text();
        text.push_str(&format!("epoch = {}\n", self.epoch));
        text.push_str(&format!("best_val_srocc = {}\n", self.best_val_srocc));
        text.push_str(&format!("q_mean = {}\n", self.remap.q_mean));
        text.push_str(&format!("q_std = {}\n", self.remap.q_std));
        text.push_str(&format!("label_min = {}\n", self.remap.s_min));
        text.push_str(&format!("label_max = {}\n", self.remap.s_max));
        text
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let block = self.config_block();
        buf.extend_from_slice(&(block.len() as u32).to_le_bytes());
        buf.extend_from_slice(block.as_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let malformed = |detail: String| Error::Malformed {
            path: path.to_path_buf(),
            detail,
        };
        let mut r = Reader::new(bytes, path);
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: CHECKPOINT_MAGIC,
                found: [magic[0], magic[1], magic[2], magic[3]],
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let len = r.u32("config length")? as usize;
        let block = std::str::from_utf8(r.take(len, "config block")?)
            .map_err(|e| malformed(format!("config block is not UTF-8: {e}")))?
            .to_string();
        let entries = parse_kv(&block)?;
        let (meta, rest): (Vec<KvEntry>, Vec<KvEntry>) =
            entries.into_iter().partition(|e| META_KEYS.contains(&e.key.as_str()));
        let mut config = TrainConfig::default();
        config.apply(&rest)?;
        let meta_value = |key: &str| -> Result<&str> {
            meta.iter()
                .find(|e| e.key == key)
                .map(|e| e.value.as_str())
                .ok_or_else(|| malformed(format!("config block lacks {key}")))
        };
        let parse_f = |key: &str| -> Result<f64> {
            meta_value(key)?
                .parse()
                .map_err(|e| malformed(format!("{key}: {e}")))
        };
        let epoch = meta_value("epoch")?
            .parse()
            .map_err(|e| malformed(format!("epoch: {e}")))?;

        let count = r.u32("tensor count")? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|e| malformed(format!("tensor {i} name is not UTF-8: {e}")))?
                .to_string();
            let ndim = r.u32("tensor rank")? as usize;
            if ndim == 0 || ndim > 4 {
                return Err(malformed(format!("tensor {name} has rank {ndim}")));
            }
            let shape = (0..ndim).map(|_| r.dim("tensor dimension")).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            if numel.saturating_mul(4) > r.remaining() {
                return Err(Error::Truncated {
                    path: path.to_path_buf(),
                    detail: format!("tensor {name} needs {numel} floats"),
                });
            }
            let raw = r.take(numel * 4, "tensor data")?;
            let mut data = Vec::with_capacity(numel);
            for (j, c) in raw.chunks_exact(4).enumerate() {
                let x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                if !x.is_finite() {
                    return Err(Error::NonFinite {
                        path: path.to_path_buf(),
                        location: format!("tensor {name}, element {j}"),
                    });
                }
                data.push(f64::from(x));
            }
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(malformed(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            config,
            epoch,
            best_val_srocc: parse_f("best_val_srocc")?,
            remap: RemapStats {
                q_mean: parse_f("q_mean")?,
                q_std: parse_f("q_std")?,
                s_min: parse_f("label_min")?,
                s_max: parse_f("label_max")?,
            },
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}
