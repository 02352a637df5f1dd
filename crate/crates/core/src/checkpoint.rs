//! Versioned binary checkpoints.
//!
//! Little-endian throughout:
//!
//! ```text
//! "CMCK" | u16 version
//! u32 len | train config (TOML)
//! u32 len | model config (TOML)
//! [u8; 32] SHA-256 of the two config blocks
//! u32 epoch | f64 best_metric
//! scheduler: f64 lr, factor, threshold, best | u32 patience, bad_epochs, reductions
//! adam: f64 beta1, beta2, eps | u64 step
//! u8 element width (4 or 8) | u32 parameter count
//! per parameter: u16 name len | name | u32 ndim | u32 dims… | values
//! first moments, then second moments, in parameter order (values only)
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{self, TrainConfig};
use crate::error::{CmtaError, LoadError, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamState, PlateauScheduler};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub train_config: TrainConfig,
    pub model: Model<F>,
    pub adam: AdamState<F>,
    pub scheduler: PlateauScheduler,
    pub epoch: u32,
    pub best_metric: f64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| CmtaError::config("value exceeds u32"))?;
        self.bytes(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn string(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.bytes(s.as_bytes());
        Ok(())
    }
    fn values<F: Real>(&mut self, t: &Tensor<F>) {
        for &v in t.data() {
            if F::BYTES == 4 {
                self.bytes(&(v.to_f64() as f32).to_le_bytes());
            } else {
                self.f64(v.to_f64());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], LoadError> {
        if self.pos + n > self.buf.len() {
            return Err(LoadError::Truncated {
                expected: self.pos + n,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> std::result::Result<u16, LoadError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }
    fn u32(&mut self) -> std::result::Result<usize, LoadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")) as usize)
    }
    fn u64(&mut self) -> std::result::Result<u64, LoadError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn f64(&mut self) -> std::result::Result<f64, LoadError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn string(&mut self) -> std::result::Result<String, LoadError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| LoadError::Header(e.to_string()))
    }
    fn values<F: Real>(&mut self, shape: &[usize], width: u8) -> std::result::Result<Tensor<F>, LoadError> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * width as usize)?;
        let start = self.pos - raw.len();
        let mut data = Vec::with_capacity(n);
        for (i, chunk) in raw.chunks_exact(width as usize).enumerate() {
            let v = if width == 4 {
                f32::from_le_bytes(chunk.try_into().expect("4")) as f64
            } else {
                f64::from_le_bytes(chunk.try_into().expect("8"))
            };
            if !v.is_finite() {
                return Err(LoadError::NonFinite { index: start + i * width as usize });
            }
            data.push(F::from_f64(v));
        }
        Tensor::new(shape.to_vec(), data).map_err(|e| LoadError::Header(e.to_string()))
    }
}

fn model_toml(cfg: &ModelConfig) -> Result<String> {
    config::to_toml(cfg)
}

impl<F: Real> Checkpoint<F> {
    pub fn config_hash(&self) -> Result<[u8; 32]> {
        let text = config::to_toml(&self.train_config)? + &model_toml(&self.model.config)?;
        Ok(config::config_hash(&text))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.bytes(&CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.string(&config::to_toml(&self.train_config)?)?;
        w.string(&model_toml(&self.model.config)?)?;
        w.bytes(&self.config_hash()?);
        w.u32(self.epoch as usize)?;
        w.f64(self.best_metric);
        let s = &self.scheduler;
        for v in [s.lr, s.factor, s.threshold, s.best] {
            w.f64(v);
        }
        for v in [s.patience, s.bad_epochs, s.reductions] {
            w.u32(v as usize)?;
        }
        let a = &self.adam;
        for v in [a.beta1, a.beta2, a.eps] {
            w.f64(v);
        }
        w.u64(a.step);
        w.bytes(&[F::BYTES]);
        let store = &self.model.store;
        w.u32(store.len())?;
        for (name, t) in store.names().iter().zip(store.tensors()) {
            w.u16(u16::try_from(name.len()).map_err(|_| CmtaError::config("parameter name too long"))?);
            w.bytes(name.as_bytes());
            w.u32(t.shape().len())?;
            for &d in t.shape() {
                w.u32(d)?;
            }
            w.values(t);
        }
        for t in a.m.iter().chain(&a.v) {
            w.values(t);
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, LoadError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4");
        if magic != CHECKPOINT_MAGIC {
            return Err(LoadError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(LoadError::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let header = |e: CmtaError| LoadError::Header(e.to_string());
        let train_text = r.string()?;
        let model_text = r.string()?;
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32");
        if hash != config::config_hash(&(train_text.clone() + &model_text)) {
            return Err(LoadError::Header("config hash mismatch".into()));
        }
        let train_config: TrainConfig = config::from_toml(&train_text).map_err(header)?;
        let model_config: ModelConfig = config::from_toml(&model_text).map_err(header)?;
        let epoch = r.u32()? as u32;
        let best_metric = r.f64()?;
        let (lr, factor, threshold, best) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let (patience, bad_epochs, reductions) = (r.u32()? as u32, r.u32()? as u32, r.u32()? as u32);
        let scheduler = PlateauScheduler {
            factor,
            patience,
            threshold,
            lr,
            best,
            bad_epochs,
            reductions,
        };
        let (beta1, beta2, eps, step) = (r.f64()?, r.f64()?, r.f64()?, r.u64()?);
        let width = r.take(1)?[0];
        if width != 4 && width != 8 {
            return Err(LoadError::Header(format!("element width {width}")));
        }
        // Layout comes from the config; values are overwritten below.
        let mut model: Model<F> = Model::init(model_config, &mut ChaCha8Rng::seed_from_u64(0)).map_err(header)?;
        let count = r.u32()?;
        let mut names = Vec::with_capacity(count);
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u16()? as usize;
            names.push(String::from_utf8(r.take(n)?.to_vec()).map_err(|e| LoadError::Header(e.to_string()))?);
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
            tensors.push(r.values(&shape, width)?);
        }
        let shapes: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape().to_vec()).collect();
        model.store.load_from(&names, tensors).map_err(header)?;
        let moments = |r: &mut Reader| -> std::result::Result<Vec<Tensor<F>>, LoadError> {
            shapes.iter().map(|s| r.values(s, width)).collect()
        };
        let m = moments(&mut r)?;
        let v = moments(&mut r)?;
        if r.pos != bytes.len() {
            return Err(LoadError::Header(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            train_config,
            model,
            adam: AdamState {
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            },
            scheduler,
            epoch,
            best_metric,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| CmtaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CmtaError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|source| CmtaError::Load {
            path: path.to_path_buf(),
            source,
        })
    }
}
