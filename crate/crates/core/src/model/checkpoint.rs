//! Binary checkpoint: magic, version, config block and hash, named f32
//! tensors, then optional optimizer moments, slot states and progress.

use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, PolicyNet};
use crate::lin_attn::MemoryState;
use crate::numerics::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"CNAVCKPT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

/// Where a training run stands: the next batch to run is `batch` of `epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub epoch: u32,
    pub batch: u64,
    pub global_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Full resolved run configuration, if the run had one.
    pub run_config: String,
    /// Fingerprint of everything a resumed run must agree on.
    pub identity: String,
    pub params: Vec<(String, Tensor<f32>)>,
    pub moments: Option<AdamMoments>,
    /// Per-slot carried state; `None` entries are idle slots.
    pub slots: Option<Vec<Option<MemoryState<f32>>>>,
    pub progress: Option<Progress>,
}

impl Checkpoint {
    pub fn from_net<F: Scalar>(net: &PolicyNet<F>, run_config: &str) -> Checkpoint {
        Checkpoint {
            model: *net.config(),
            run_config: run_config.to_string(),
            identity: String::new(),
            params: net.named_params().map(|(n, t)| (n.to_string(), t.cast())).collect(),
            moments: None,
            slots: None,
            progress: None,
        }
    }

    pub fn to_net<F: Scalar>(&self) -> Result<PolicyNet<F>, ModelError> {
        PolicyNet::from_named(
            self.model,
            self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        self.write_into(&mut w).expect("writing to a Vec cannot fail");
        w
    }

    fn write_into(&self, w: &mut Vec<u8>) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u16::<LittleEndian>(VERSION)?;
        let text = self.model.to_text();
        write_str(w, &text)?;
        w.write_all(&Sha256::digest(text.as_bytes()))?;
        write_str(w, &self.run_config)?;
        write_str(w, &self.identity)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, t) in &self.params {
            write_str(w, name)?;
            write_tensor(w, t)?;
        }
        match &self.moments {
            None => w.write_u8(0)?,
            Some(m) => {
                w.write_u8(1)?;
                w.write_u64::<LittleEndian>(m.step)?;
                for t in m.m.iter().chain(&m.v) {
                    write_tensor(w, t)?;
                }
            }
        }
        match &self.slots {
            None => w.write_u8(0)?,
            Some(slots) => {
                w.write_u8(1)?;
                w.write_u32::<LittleEndian>(slots.len() as u32)?;
                for s in slots {
                    match s {
                        None => w.write_u8(0)?,
                        Some(s) => {
                            w.write_u8(1)?;
                            s.write_to(&self.model.attention, w)?;
                        }
                    }
                }
            }
        }
        match &self.progress {
            None => w.write_u8(0)?,
            Some(p) => {
                w.write_u8(1)?;
                w.write_u32::<LittleEndian>(p.epoch)?;
                w.write_u64::<LittleEndian>(p.batch)?;
                w.write_u64::<LittleEndian>(p.global_step)?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!(
                "format version {version}, this build reads {VERSION}"
            )));
        }
        let text = r.string()?;
        let hash = r.take(32)?;
        if hash != Sha256::digest(text.as_bytes()).as_slice() {
            return Err(ModelError::Checkpoint("config hash does not match config block".into()));
        }
        let model = ModelConfig::from_text(&text)?;
        let run_config = r.string()?;
        let identity = r.string()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            params.push((name, r.tensor()?));
        }
        let moments = if r.flag()? {
            let step = r.u64()?;
            let m = (0..n).map(|_| r.tensor()).collect::<Result<_, _>>()?;
            let v = (0..n).map(|_| r.tensor()).collect::<Result<_, _>>()?;
            Some(AdamMoments { step, m, v })
        } else {
            None
        };
        let slots = if r.flag()? {
            let count = r.u32()? as usize;
            let mut slots = Vec::with_capacity(count);
            for _ in 0..count {
                if r.flag()? {
                    let start = r.pos;
                    let mut rest = &r.buf[r.pos..];
                    let before = rest.len();
                    let s = MemoryState::read_from(model.n_layers, &model.attention, &mut rest)
                        .map_err(|e| ModelError::Checkpoint(format!("slot state at byte {start}: {e}")))?;
                    r.pos += before - rest.len();
                    slots.push(Some(s));
                } else {
                    slots.push(None);
                }
            }
            Some(slots)
        } else {
            None
        };
        let progress = if r.flag()? {
            Some(Progress {
                epoch: r.u32()?,
                batch: r.u64()?,
                global_step: r.u64()?,
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} trailing bytes at byte {}",
                bytes.len() - r.pos,
                r.pos
            )));
        }
        Ok(Checkpoint {
            model,
            run_config,
            identity,
            params,
            moments,
            slots,
            progress,
        })
    }

    /// Write through a temporary file and rename into place.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint, ModelError> {
        let bytes = std::fs::read(path)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn write_str(w: &mut Vec<u8>, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn write_tensor(w: &mut Vec<u8>, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_u8(t.rank() as u8)?;
    for &d in t.shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &x in t.data() {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Checkpoint(format!(
                "truncated: wanted {n} bytes at byte {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool, ModelError> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(ModelError::Checkpoint(format!("bad flag byte {b} at byte {at}"))),
        }
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(self.take(2)?.read_u16::<LittleEndian>().expect("2 bytes"))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(self.take(4)?.read_u32::<LittleEndian>().expect("4 bytes"))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(self.take(8)?.read_u64::<LittleEndian>().expect("8 bytes"))
    }

    fn string(&mut self) -> Result<String, ModelError> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| ModelError::Checkpoint(format!("invalid utf-8 at byte {at}")))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>, ModelError> {
        let at = self.pos;
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(&shape, data).map_err(|e| ModelError::Checkpoint(format!("tensor at byte {at}: {e}")))
    }
}
