//! Binary checkpoint files.
//!
//! Layout (little-endian): magic `UCKP`, version `u32`, tensor count `u32`,
//! then per tensor a `u16` name length, the UTF-8 name, a `u8` rank, one
//! `u32` per dimension and the `f32` payload. A CRC-32 of everything after
//! the 12-byte header closes the file.
//!
//! Metadata travels as ordinary tensors: `meta.model` holds the model
//! configuration, `meta.progress` the training position, and
//! `adam.m.<name>` / `adam.v.<name>` the optimizer moments.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numeric::{ParamStore, ParamTensor};
use crate::trainer::Adam;

pub const MAGIC: &[u8; 4] = b"UCKP";
pub const VERSION: u32 = 1;
const HEADER: usize = 12;

const META_MODEL: &str = "meta.model";
const META_PROGRESS: &str = "meta.progress";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// How far a model has come.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Initialized = 0,
    Pretrained = 1,
    Finetuned = 2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: u32,
    pub best_metric: f32,
    pub best_epoch: u32,
    pub stage: Stage,
}

impl Default for Progress {
    fn default() -> Self {
        Self {
            epoch: 0,
            best_metric: 0.0,
            best_epoch: 0,
            stage: Stage::Initialized,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<ParamTensor>,
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", *pos)))?;
    let out = &bytes[*pos..end];
    *pos = end;
    Ok(out)
}

fn u32_at(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().expect("4 bytes")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name().as_bytes();
            let len =
                u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {}", t.name())))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(u8::try_from(t.shape().len()).map_err(|_| Error::Format("tensor rank above 255".into()))?);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Format("dimension above u32".into()))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[HEADER..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER + 4 {
            return Err(Error::Format("checkpoint shorter than its header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut pos = 4;
        let version = u32_at(bytes, &mut pos)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = u32_at(bytes, &mut pos)? as usize;
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[HEADER..body_end]) != stored {
            return Err(Error::Format("checkpoint CRC mismatch".into()));
        }
        let body = &bytes[..body_end];
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(take(body, &mut pos, 2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(take(body, &mut pos, len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = take(body, &mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32_at(body, &mut pos)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(
                body,
                &mut pos,
                n.checked_mul(4)
                    .ok_or_else(|| Error::Format("tensor too large".into()))?,
            )?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(ParamTensor::from_values(name, &shape, values).map_err(|e| Error::Format(e.to_string()))?);
        }
        if pos != body_end {
            return Err(Error::Format(format!(
                "{} trailing bytes before the CRC",
                body_end - pos
            )));
        }
        Ok(Self { tensors })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name() == name)
    }

    /// Model tensors in store order, then optimizer moments, then metadata.
    pub fn capture(model: &Model, adam: Option<&Adam>, progress: Progress) -> Result<Self> {
        let mut tensors: Vec<ParamTensor> = model
            .params
            .iter()
            .map(|(_, t)| ParamTensor::from_values(t.name(), t.shape(), t.values.clone()))
            .collect::<Result<_>>()?;
        if let Some(adam) = adam {
            for (prefix, moments) in [(ADAM_M, &adam.m), (ADAM_V, &adam.v)] {
                for (id, t) in model.params.iter() {
                    if let Some(values) = moments.get(&id) {
                        tensors.push(ParamTensor::from_values(
                            format!("{prefix}{}", t.name()),
                            t.shape(),
                            values.clone(),
                        )?);
                    }
                }
            }
        }
        tensors.push(ParamTensor::from_values(META_MODEL, &[8], model.config.to_meta())?);
        tensors.push(ParamTensor::from_values(
            META_PROGRESS,
            &[5],
            vec![
                progress.epoch as f32,
                progress.best_metric,
                progress.best_epoch as f32,
                adam.map_or(0.0, |a| a.t as f32),
                progress.stage as u8 as f32,
            ],
        )?);
        Ok(Self { tensors })
    }

    /// Rebuilds the model, the optimizer state (if any moments were saved)
    /// and the training position.
    pub fn restore(&self) -> Result<(Model, Option<Adam>, Progress)> {
        let meta = self
            .get(META_MODEL)
            .ok_or_else(|| Error::Format("checkpoint lacks model metadata".into()))?;
        let config = ModelConfig::from_meta(&meta.values)?;
        let progress_t = self
            .get(META_PROGRESS)
            .ok_or_else(|| Error::Format("checkpoint lacks progress metadata".into()))?;
        let p = &progress_t.values;
        if p.len() != 5 {
            return Err(Error::Format("progress metadata has the wrong length".into()));
        }
        let stage = match p[4] as u8 {
            0 => Stage::Initialized,
            1 => Stage::Pretrained,
            2 => Stage::Finetuned,
            s => return Err(Error::Format(format!("unknown stage {s}"))),
        };
        let progress = Progress {
            epoch: p[0] as u32,
            best_metric: p[1],
            best_epoch: p[2] as u32,
            stage,
        };
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for t in &self.tensors {
            let name = t.name();
            if let Some(rest) = name.strip_prefix(ADAM_M) {
                m.push((rest.to_string(), t.values.clone()));
            } else if let Some(rest) = name.strip_prefix(ADAM_V) {
                v.push((rest.to_string(), t.values.clone()));
            } else if !name.starts_with("meta.") {
                params.insert(t.clone())?;
            }
        }
        let model = Model::from_params(config, params, stage != Stage::Initialized)?;
        let adam = if m.is_empty() && v.is_empty() {
            None
        } else {
            let mut adam = Adam::new(0.0);
            adam.t = p[3] as u64;
            for (list, dst) in [(m, &mut adam.m), (v, &mut adam.v)] {
                for (name, values) in list {
                    let id = model
                        .params
                        .id(&name)
                        .ok_or_else(|| Error::Format(format!("optimizer state for unknown tensor `{name}`")))?;
                    if values.len() != model.params.get(id).len() {
                        return Err(Error::Format(format!(
                            "optimizer state for `{name}` has the wrong size"
                        )));
                    }
                    dst.insert(id, values);
                }
            }
            Some(adam)
        };
        Ok((model, adam, progress))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::ParamId;

    fn model() -> Model {
        let config = ModelConfig {
            d_w: 5,
            d_v: 4,
            experts: 2,
            layers: 1,
            heads: 2,
            d_ff: 6,
            n_max: 4,
            dropout: 0.1,
        };
        Model::new(config, 3).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut m = model();
        let ids: Vec<ParamId> = m.params.ids().collect();
        for &id in &ids {
            m.params.get_mut(id).grad.fill(0.25);
        }
        let mut adam = Adam::new(1e-3);
        adam.step(&mut m.params, &ids);
        let progress = Progress {
            epoch: 3,
            best_metric: 0.125,
            best_epoch: 2,
            stage: Stage::Pretrained,
        };
        let ck = Checkpoint::capture(&m, Some(&adam), progress).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let (m2, adam2, p2) = back.restore().unwrap();
        assert_eq!(p2, progress);
        let adam2 = adam2.unwrap();
        assert_eq!(adam2.t, 1);
        assert_eq!(adam2.m, adam.m);
        assert!(m2.pretrained);
        for (id, t) in m.params.iter() {
            assert_eq!(m2.params.get(id).values, t.values);
        }
        let again = Checkpoint::capture(&m2, Some(&adam2), p2).unwrap();
        assert_eq!(again.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let ck = Checkpoint::capture(&model(), None, Progress::default()).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Format(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint::capture(&model(), None, Progress::default()).unwrap();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"UCKP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize,
            ck.tensors.len()
        );
        let first = &ck.tensors[0];
        let len = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        assert_eq!(&bytes[14..14 + len], first.name().as_bytes());
        assert_eq!(bytes[14 + len] as usize, first.shape().len());
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(&bytes[12..bytes.len() - 4]));
        let (restored, adam, _) = ck.restore().unwrap();
        assert!(adam.is_none());
        assert!(!restored.pretrained);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = Checkpoint::capture(&model(), None, Progress::default()).unwrap();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(matches!(
            Checkpoint::load(&dir.path().join("none")),
            Err(Error::Io { .. })
        ));
    }
}
