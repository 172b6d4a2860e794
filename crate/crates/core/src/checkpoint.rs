//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MARS" | version u32 | config_len u64 | config utf-8 bytes
//! epoch u64 | global_step u64
//! rng seed [u8; 32] | rng word_pos u128 | rng stream u64
//! params:  count u64, then per tensor: ndims u64, dims u64..., data f64...
//! masks:   count u64, then per mask: name_len u64, name, len u64, logits f64...
//! adam_t u64 | adam_m tensors | adam_v tensors (same tensor encoding)
//! ```
//!
//! Everything is written in a fixed order, so save -> load -> save is
//! byte-identical, and a restored trainer resumes the exact metric trace.
//! Writes go through a temp file and an atomic rename.

use std::fs;
use std::path::Path;

use crate::rng::{Rng, RngState};
use crate::trainer::Trainer;
use crate::{DenseTensor, Error, Result};

const MAGIC: &[u8; 4] = b"MARS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub epoch: u64,
    pub global_step: u64,
    pub rng: RngState,
    pub params: Vec<DenseTensor>,
    pub masks: Vec<(String, Vec<f64>)>,
    pub adam_m: Vec<DenseTensor>,
    pub adam_v: Vec<DenseTensor>,
    pub adam_t: u64,
}

impl Checkpoint {
    /// Snapshot a trainer plus the experiment config that rebuilds its model.
    pub fn capture(trainer: &Trainer, config_text: String) -> Self {
        Checkpoint {
            config_text,
            epoch: trainer.epoch as u64,
            global_step: trainer.global_step,
            rng: trainer.rng.state(),
            params: trainer
                .model
                .param_tensors()
                .into_iter()
                .cloned()
                .collect(),
            masks: trainer
                .model
                .masks
                .iter()
                .map(|(_, m)| (m.name.clone(), m.logits.clone()))
                .collect(),
            adam_m: trainer.adam.m.clone(),
            adam_v: trainer.adam.v.clone(),
            adam_t: trainer.adam.t,
        }
    }

    /// Overwrite a freshly built model's parameters and mask logits. The
    /// model must have been rebuilt from this checkpoint's config.
    pub fn apply_to_model(&self, model: &mut crate::model::TensorizedModel) -> Result<()> {
        {
            let mut params = model.param_tensors_mut();
            if params.len() != self.params.len() {
                return Err(Error::Format {
                    file: "checkpoint".into(),
                    reason: format!(
                        "{} parameter tensors, model has {}",
                        self.params.len(),
                        params.len()
                    ),
                });
            }
            for (slot, saved) in params.iter_mut().zip(&self.params) {
                if slot.dims() != saved.dims() {
                    return Err(Error::Format {
                        file: "checkpoint".into(),
                        reason: format!(
                            "parameter dims {:?} do not match model dims {:?}",
                            saved.dims(),
                            slot.dims()
                        ),
                    });
                }
                **slot = saved.clone();
            }
        }
        if model.masks.len() != self.masks.len() {
            return Err(Error::Format {
                file: "checkpoint".into(),
                reason: format!(
                    "{} masks, model has {}",
                    self.masks.len(),
                    model.masks.len()
                ),
            });
        }
        let ids: Vec<usize> = model.masks.iter().map(|(id, _)| id).collect();
        for (id, (_, logits)) in ids.into_iter().zip(&self.masks) {
            model.masks.set_logits(id, logits.clone())?;
        }
        Ok(())
    }

    /// Overwrite a freshly built trainer with this checkpoint's state. The
    /// trainer must have been constructed from the same config.
    pub fn restore_into(&self, trainer: &mut Trainer) -> Result<()> {
        self.apply_to_model(&mut trainer.model)?;
        trainer.adam.m = self.adam_m.clone();
        trainer.adam.v = self.adam_v.clone();
        trainer.adam.t = self.adam_t;
        trainer.rng = Rng::restore(&self.rng);
        trainer.epoch = self.epoch as usize;
        trainer.global_step = self.global_step;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = self.config_text.as_bytes();
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(config);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.global_step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        write_tensors(&mut out, &self.params);
        out.extend_from_slice(&(self.masks.len() as u64).to_le_bytes());
        for (name, logits) in &self.masks {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u64).to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(logits.len() as u64).to_le_bytes());
            for v in logits {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.adam_t.to_le_bytes());
        write_tensors(&mut out, &self.adam_m);
        write_tensors(&mut out, &self.adam_v);
        out
    }

    pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            file,
        };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(r.fail("bad magic; not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let config_len = r.u64()? as usize;
        let config_text = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|e| r.fail(format!("config is not utf-8: {e}")))?;
        let epoch = r.u64()?;
        let global_step = r.u64()?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let stream = r.u64()?;
        let params = read_tensors(&mut r)?;
        let mask_count = r.u64()? as usize;
        let mut masks = Vec::with_capacity(mask_count);
        for _ in 0..mask_count {
            let name_len = r.u64()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| r.fail(format!("mask name is not utf-8: {e}")))?;
            let len = r.u64()? as usize;
            let mut logits = Vec::with_capacity(len);
            for _ in 0..len {
                logits.push(r.f64()?);
            }
            masks.push((name, logits));
        }
        let adam_t = r.u64()?;
        let adam_m = read_tensors(&mut r)?;
        let adam_v = read_tensors(&mut r)?;
        if r.pos != bytes.len() {
            return Err(r.fail(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config_text,
            epoch,
            global_step,
            rng: RngState {
                seed,
                word_pos,
                stream,
            },
            params,
            masks,
            adam_m,
            adam_v,
            adam_t,
        })
    }

    /// Atomic save: write to a temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("ckpt.tmp");
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let bytes = fs::read(path).map_err(|e| Error::Format {
            file: name.clone(),
            reason: format!("cannot read: {e}"),
        })?;
        Self::from_bytes(&bytes, &name)
    }
}

fn write_tensors(out: &mut Vec<u8>, tensors: &[DenseTensor]) {
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.ndim() as u64).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            file: self.file.to_string(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_tensors(r: &mut Reader) -> Result<Vec<DenseTensor>> {
    let count = r.u64()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let ndims = r.u64()? as usize;
        if ndims == 0 || ndims > 16 {
            return Err(r.fail(format!("implausible tensor rank {ndims}")));
        }
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(r.u64()? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64()?);
        }
        tensors.push(DenseTensor::new(dims, data).map_err(|e| r.fail(e.to_string()))?);
    }
    Ok(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        Checkpoint {
            config_text: "[train]\nseed = 3\n".into(),
            epoch: 2,
            global_step: 940,
            rng: RngState {
                seed: [7u8; 32],
                word_pos: 123_456_789_012,
                stream: 1,
            },
            params: vec![
                DenseTensor::from_fn(&[2, 3], |i| (i[0] * 3 + i[1]) as f64 * 0.25),
                DenseTensor::scalar(-1.5),
            ],
            masks: vec![("layer0.r1".into(), vec![0.25, -0.5, 1e-9])],
            adam_m: vec![DenseTensor::zeros(&[2, 3]), DenseTensor::zeros(&[1])],
            adam_v: vec![DenseTensor::ones(&[2, 3]), DenseTensor::zeros(&[1])],
            adam_t: 940,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact_and_stable() {
        let cp = sample_checkpoint();
        let bytes = cp.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes, "test").unwrap();
        assert_eq!(loaded, cp);
        assert_eq!(loaded.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = sample_checkpoint().to_bytes();
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes, "test").unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = sample_checkpoint().to_bytes();
        bytes[4] = 99;
        let err = Checkpoint::from_bytes(&bytes, "test").unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let bytes = sample_checkpoint().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 1], "test").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut padded = bytes.clone();
        padded.push(0);
        let err = Checkpoint::from_bytes(&padded, "test").unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn save_load_save_produces_identical_bytes() {
        let dir = std::env::temp_dir().join(format!("mars-ckpt-test-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let cp = sample_checkpoint();
        cp.save(&path).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        loaded.save(&path).unwrap();
        let second = fs::read(&path).unwrap();
        assert_eq!(first, second);
    }
}
