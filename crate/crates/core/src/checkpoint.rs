//! Binary training checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "D2CK"  u32 version
//! model:  u32 feature_dim, u32 num_classes, u32 kernel_size, u32 dilation,
//!         f64 leaky_slope, u64 seed
//! params: u32 count, then per array u32 rows, u32 cols, rows·cols f64
//! adam:   u64 step, first moments, second moments (same array format)
//! ema:    u64 updates, u32 len, len f64
//! u64 iteration
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::EmaRef;
use crate::model::{ModelConfig, ModelParams, NUM_PARAM_ARRAYS};
use crate::train::OptimizerState;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"D2CK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub ema: EmaRef,
    pub iteration: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn params(&mut self, p: &ModelParams) {
        self.u32(NUM_PARAM_ARRAYS);
        for m in p.arrays() {
            self.u32(m.rows());
            self.u32(m.cols());
            for &v in m.as_slice() {
                self.f64(v);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(
                self.bytes.len(),
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn params(&mut self, config: &ModelConfig, what: &str) -> Result<ModelParams> {
        let at = self.pos;
        let count = self.u32(what)?;
        if count != NUM_PARAM_ARRAYS {
            return Err(self.err(at, format!("{what}: {count} arrays, expected {NUM_PARAM_ARRAYS}")));
        }
        let mut out = ModelParams::zeros(config);
        for (dst, name) in out.arrays_mut().into_iter().zip(ModelParams::names()) {
            let at = self.pos;
            let rows = self.u32(name)?;
            let cols = self.u32(name)?;
            if (rows, cols) != dst.shape() {
                return Err(self.err(
                    at,
                    format!("{what} {name}: shape {rows}x{cols}, config implies {:?}", dst.shape()),
                ));
            }
            let values = (0..rows * cols)
                .map(|_| self.f64(name))
                .collect::<Result<Vec<_>>>()?;
            *dst = Matrix::new(rows, cols, values)?;
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(&CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION as usize);
        let m = &self.model;
        w.u32(m.feature_dim);
        w.u32(m.num_classes);
        w.u32(m.kernel_size);
        w.u32(m.dilation);
        w.f64(m.leaky_slope);
        w.u64(m.seed);
        w.params(&self.params);
        w.u64(self.optimizer.step);
        w.params(&self.optimizer.first_moment);
        w.params(&self.optimizer.second_moment);
        w.u64(self.ema.iteration);
        w.u32(self.ema.x_ref.len());
        for &v in &self.ema.x_ref {
            w.f64(v);
        }
        w.u64(self.iteration);
        w.0
    }

    /// Parses a checkpoint image; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.err(0, format!("bad magic {magic:?}, expected \"D2CK\"")));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(r.err(4, format!("unsupported version {version}")));
        }
        let config_at = r.pos;
        let model = ModelConfig {
            feature_dim: r.u32("model config")?,
            num_classes: r.u32("model config")?,
            kernel_size: r.u32("model config")?,
            dilation: r.u32("model config")?,
            leaky_slope: r.f64("model config")?,
            seed: r.u64("model config")?,
        };
        model
            .validate()
            .map_err(|e| r.err(config_at, format!("invalid model config: {e}")))?;
        let params = r.params(&model, "parameters")?;
        let step = r.u64("optimizer step")?;
        let first_moment = r.params(&model, "first moments")?;
        let second_moment = r.params(&model, "second moments")?;
        let ema_iteration = r.u64("reference embedding")?;
        let len_at = r.pos;
        let len = r.u32("reference embedding")?;
        if len != model.embedding_dim() {
            return Err(r.err(
                len_at,
                format!("reference embedding of width {len}, expected {}", model.embedding_dim()),
            ));
        }
        let x_ref = (0..len)
            .map(|_| r.f64("reference embedding"))
            .collect::<Result<Vec<_>>>()?;
        let iteration = r.u64("iteration")?;
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            model,
            params,
            optimizer: OptimizerState {
                first_moment,
                second_moment,
                step,
            },
            ema: EmaRef {
                x_ref,
                iteration: ema_iteration,
            },
            iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}
