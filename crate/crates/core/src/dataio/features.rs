//! Binary feature store.
//!
//! Little-endian layout:
//!
//! ```text
//! magic     "MP4SRFS1"   8 bytes
//! version   u32 = 1
//! count     u32          number of items
//! d         u32          feature width
//! per item:
//!   id_len  u16, id bytes (UTF-8)
//!   n_text  u8 (1..=10), n_image u8 (1..=10)
//!   n_text  × d f32, row-major
//!   n_image × d f32, row-major
//! ```
//!
//! Each item therefore occupies `2 + id_len + 2 + 4·d·(n_text + n_image)` bytes.

use std::collections::HashMap;
use std::path::Path;

use super::{DataError, InteractionDataset};
use crate::numkernel::{Real, Tensor};

pub const FEATURE_MAGIC: &[u8; 8] = b"MP4SRFS1";
const VERSION: u32 = 1;
/// Upper bound on sentences and on images per item.
pub const MAX_ROWS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ItemFeatures {
    pub id: String,
    pub n_text: usize,
    /// `n_text × d`, row-major.
    pub text: Vec<f32>,
    pub n_image: usize,
    /// `n_image × d`, row-major.
    pub image: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub d: usize,
    pub items: Vec<ItemFeatures>,
}

impl FeatureStore {
    pub fn validate(&self) -> Result<(), DataError> {
        for it in &self.items {
            check_item(it, self.d)?;
        }
        Ok(())
    }

    pub fn encoded_len(&self) -> usize {
        20 + self
            .items
            .iter()
            .map(|it| 2 + it.id.len() + 2 + 4 * self.d * (it.n_text + it.n_image))
            .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DataError> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.items.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for it in &self.items {
            let id = it.id.as_bytes();
            let len = u16::try_from(id.len()).map_err(|_| DataError::Format {
                item: Some(it.id.clone()),
                msg: "id longer than 65535 bytes".into(),
            })?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(id);
            out.push(it.n_text as u8);
            out.push(it.n_image as u8);
            for v in it.text.iter().chain(&it.image) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, None)?;
        if magic != FEATURE_MAGIC {
            return Err(DataError::Format { item: None, msg: "bad magic".into() });
        }
        let version = r.u32(None)?;
        if version != VERSION {
            return Err(DataError::Format {
                item: None,
                msg: format!("unknown version {version}"),
            });
        }
        let count = r.u32(None)? as usize;
        let d = r.u32(None)? as usize;
        if d == 0 {
            return Err(DataError::Format { item: None, msg: "d = 0".into() });
        }
        let mut items = Vec::with_capacity(count.min(1 << 20));
        for k in 0..count {
            let len = u16::from_le_bytes(r.take(2, None)?.try_into().unwrap()) as usize;
            let id = std::str::from_utf8(r.take(len, None)?)
                .map_err(|_| DataError::Format {
                    item: Some(format!("#{k}")),
                    msg: "id is not UTF-8".into(),
                })?
                .to_string();
            let counts = r.take(2, Some(&id))?;
            let (n_text, n_image) = (counts[0] as usize, counts[1] as usize);
            let text = r.floats(n_text * d, &id)?;
            let image = r.floats(n_image * d, &id)?;
            let it = ItemFeatures { id, n_text, text, n_image, image };
            check_item(&it, d)?;
            items.push(it);
        }
        if r.pos != bytes.len() {
            return Err(DataError::Format {
                item: None,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { d, items })
    }

    /// Feature matrices indexed like the dataset's items (slot 0 is a zero
    /// placeholder for padding).
    pub fn align<T: Real>(&self, ds: &InteractionDataset) -> Result<FeatureTable<T>, DataError> {
        let by_id: HashMap<&str, &ItemFeatures> = self.items.iter().map(|it| (it.id.as_str(), it)).collect();
        let mut text = vec![Tensor::zeros(&[1, self.d])];
        let mut image = vec![Tensor::zeros(&[1, self.d])];
        for id in ds.item_ids.iter().skip(1) {
            let it = by_id.get(id.as_str()).ok_or_else(|| DataError::MissingFeatures {
                item: id.clone(),
                modality: "text or image",
            })?;
            let conv = |v: &[f32], n| Tensor::new(vec![n, self.d], v.iter().map(|&x| T::of(x as f64)).collect()).expect("validated");
            text.push(conv(&it.text, it.n_text));
            image.push(conv(&it.image, it.n_image));
        }
        Ok(FeatureTable { d: self.d, text, image })
    }
}

fn check_item(it: &ItemFeatures, d: usize) -> Result<(), DataError> {
    let fail = |msg: String| DataError::Format { item: Some(it.id.clone()), msg };
    if it.n_text == 0 {
        return Err(DataError::MissingFeatures { item: it.id.clone(), modality: "text" });
    }
    if it.n_image == 0 {
        return Err(DataError::MissingFeatures { item: it.id.clone(), modality: "image" });
    }
    if it.n_text > MAX_ROWS || it.n_image > MAX_ROWS {
        return Err(fail(format!("{} text / {} image rows exceed {MAX_ROWS}", it.n_text, it.n_image)));
    }
    if it.text.len() != it.n_text * d || it.image.len() != it.n_image * d {
        return Err(fail("row data does not match d".into()));
    }
    if !it.text.iter().chain(&it.image).all(|v| v.is_finite()) {
        return Err(fail("non-finite feature value".into()));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, item: Option<&str>) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::Format {
                item: item.map(str::to_string),
                msg: "truncated file".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, item: Option<&str>) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, item)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize, item: &str) -> Result<Vec<f32>, DataError> {
        let raw = self.take(4 * n, Some(item))?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load_feature_store(path: impl AsRef<Path>) -> Result<FeatureStore, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    FeatureStore::from_bytes(&bytes)
}

pub fn write_feature_store(store: &FeatureStore, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    std::fs::write(path, store.to_bytes()?).map_err(|e| DataError::io(path, e))
}

/// Per-item feature matrices in the scalar type of a run.
#[derive(Debug, Clone)]
pub struct FeatureTable<T> {
    pub d: usize,
    pub text: Vec<Tensor<T>>,
    pub image: Vec<Tensor<T>>,
}

impl<T: Real> FeatureTable<T> {
    pub fn n_items(&self) -> usize {
        self.text.len() - 1
    }
}
