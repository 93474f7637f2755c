//! Binary checkpoint container.
//!
//! All integers little-endian:
//!
//! ```text
//! magic    8 bytes  "MP4SRCK1"
//! version  u32      1
//! hlen     u64      length of the JSON header
//! header   hlen bytes of UTF-8 JSON (CheckpointHeader)
//! count    u32      number of tensor records
//! record   repeated `count` times:
//!   nlen   u16, name (nlen bytes UTF-8)
//!   kind   u8       0 weight, 1 bias, 2 norm, 3 embedding
//!   ndim   u8, dims (ndim × u32)
//!   data   product(dims) × f32
//! ```
//!
//! Parameters come first in model order. Adam moments, when present, follow
//! as `adam.m/<name>` and `adam.v/<name>` for every parameter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::TrainConfig;
use crate::dataio::DataError;
use crate::m2se::{M2seParams, ModelConfig, ParamId, ParamKind, ParamStore};
use crate::numkernel::rng::Rng;
use crate::numkernel::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MP4SRCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `pretrain`, `finetune` or `e2e`.
    pub stage: String,
    /// Epochs completed.
    pub epoch: usize,
    pub best_metric: Option<f64>,
    pub train_config: TrainConfig,
    pub model: ModelConfig,
    /// Generator state to resume from.
    pub rng: Option<Rng>,
    /// Optimizer steps taken so far.
    pub adam_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
    pub adam: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn new<T: Real>(header: CheckpointHeader, params: &M2seParams<T>, adam: Option<&AdamState<T>>) -> Self {
        Self { header, params: params.store.cast(), adam: adam.map(AdamState::cast) }
    }

    pub fn model<T: Real>(&self) -> Result<M2seParams<T>, DataError> {
        M2seParams::from_store(self.header.model.clone(), &self.params.cast())
            .map_err(|e| DataError::Format { item: None, msg: e.to_string() })
    }

    pub fn adam_state<T: Real>(&self) -> Option<AdamState<T>> {
        self.adam.as_ref().map(AdamState::cast)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut records: Vec<(String, ParamKind, &Tensor<f32>)> =
            self.params.iter().map(|(_, p)| (p.name.clone(), p.kind, &p.value)).collect();
        if let Some(adam) = &self.adam {
            for (prefix, moments) in [(ADAM_M, &adam.m), (ADAM_V, &adam.v)] {
                for ((_, p), t) in self.params.iter().zip(moments) {
                    records.push((format!("{prefix}{}", p.name), p.kind, t));
                }
            }
        }
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, kind, t) in records {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(kind.code());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u64()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| r.err(&format!("bad header: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| r.err("tensor name is not UTF-8"))?.to_string();
            let kind = ParamKind::from_code(r.u8()?).ok_or_else(|| r.err(&format!("bad kind for {name}")))?;
            let ndim = r.u8()? as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4).map_err(|_| r.err(&format!("truncated tensor {name}")))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(dims, data).map_err(|e| r.err(&e.to_string()))?;
            if let Some(base) = name.strip_prefix(ADAM_M) {
                m.push((base.to_string(), t));
            } else if let Some(base) = name.strip_prefix(ADAM_V) {
                v.push((base.to_string(), t));
            } else {
                if params.id(&name).is_some() {
                    return Err(r.err(&format!("duplicate tensor {name}")));
                }
                params.add(name, kind, t);
            }
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after last tensor"));
        }
        let adam = if m.is_empty() && v.is_empty() {
            None
        } else {
            let order = |list: Vec<(String, Tensor<f32>)>| -> Result<Vec<Tensor<f32>>, DataError> {
                if list.len() != params.len() {
                    return Err(r.err("optimizer moments do not cover every parameter"));
                }
                list.into_iter()
                    .enumerate()
                    .map(|(k, (name, t))| {
                        let p = params.get(ParamId(k));
                        if p.name != name || p.value.shape() != t.shape() {
                            Err(r.err(&format!("optimizer moment {name} does not match parameter {}", p.name)))
                        } else {
                            Ok(t)
                        }
                    })
                    .collect()
            };
            Some(AdamState { step: header.adam_step, m: order(m)?, v: order(v)? })
        };
        Ok(Checkpoint { header, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> DataError {
        DataError::Format { item: None, msg: format!("checkpoint at byte {}: {msg}", self.pos) }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::rng::seeded;
    use rand::Rng as _;

    fn sample() -> Checkpoint {
        let cfg = TrainConfig { d_0: 8, d_a: 4, n_experts: 2, n_layers: 1, max_len: 5, ..Default::default() };
        let params = M2seParams::<f32>::init(cfg.model_config(6, 5), &mut seeded(1)).unwrap();
        let mut adam = AdamState::new(&params.store);
        adam.step = 17;
        adam.m[3].data_mut()[0] = 0.25;
        adam.v[4].data_mut()[1] = 1e-9;
        let mut rng = seeded(9);
        let _: u64 = rng.random();
        let header = CheckpointHeader {
            stage: "pretrain".into(),
            epoch: 3,
            best_metric: Some(0.125),
            model: params.config.clone(),
            train_config: cfg,
            rng: Some(rng),
            adam_step: 17,
        };
        Checkpoint::new(header, &params, Some(&adam))
    }

    #[test]
    fn byte_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], b"MP4SRCK1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let model: M2seParams<f32> = back.model().unwrap();
        assert_eq!(model.store, ck.params);
        let mut r1 = ck.header.rng.clone().unwrap();
        let mut r2 = back.header.rng.unwrap();
        assert_eq!(r1.random::<u64>(), r2.random::<u64>());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(Checkpoint::load(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut ver = bytes;
        ver[8] = 2;
        assert!(Checkpoint::from_bytes(&ver).is_err());
    }

    #[test]
    fn model_layout_mismatch_is_reported() {
        let mut ck = sample();
        ck.header.model.n_layers = 2;
        assert!(ck.model::<f32>().is_err());
    }
}
