//! Stream file layout, little-endian:
//!
//! ```text
//! "CONS" u16 version
//! u32 env_len, env bytes, u32 length, u8 radius, u8 n_objects,
//! u64 master_seed, u64 env_index, u64 goal_seed
//! length × { u32 t, u8 goal, window bytes, u8 prev_action, u8 expert, u8 flags }
//! ```

use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use super::{DataError, StreamDataset, StreamHeader, StreamRecord};

pub const MAGIC: &[u8; 4] = b"CONS";
pub const FORMAT_VERSION: u16 = 1;

const REACHED: u8 = 1;
const NEW_TASK: u8 = 2;

fn record_size(radius: usize) -> usize {
    8 + (2 * radius + 1).pow(2)
}

pub(crate) fn encode(ds: &StreamDataset) -> Vec<u8> {
    let h = &ds.header;
    let rs = record_size(h.window_radius as usize);
    let mut w = Vec::with_capacity(48 + h.env.len() + rs * ds.records.len());
    w.extend_from_slice(MAGIC);
    w.write_u16::<LittleEndian>(h.version).unwrap();
    w.write_u32::<LittleEndian>(h.env.len() as u32).unwrap();
    w.extend_from_slice(&h.env);
    w.write_u32::<LittleEndian>(h.length).unwrap();
    w.push(h.window_radius);
    w.push(h.n_objects);
    w.write_u64::<LittleEndian>(h.master_seed).unwrap();
    w.write_u64::<LittleEndian>(h.env_index).unwrap();
    w.write_u64::<LittleEndian>(h.goal_seed).unwrap();
    for r in &ds.records {
        w.write_u32::<LittleEndian>(r.t).unwrap();
        w.push(r.goal_id);
        w.extend_from_slice(&r.window);
        w.push(r.prev_action);
        w.push(r.expert_action);
        w.push((r.reached_goal as u8 * REACHED) | (r.new_task as u8 * NEW_TASK));
    }
    w
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        if self.buf.len() - self.pos < n {
            return Err(DataError::Decode {
                pos: self.pos,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, DataError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, DataError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<StreamDataset, DataError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(DataError::Decode {
            pos: 0,
            detail: "bad magic".into(),
        });
    }
    let version = c.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(DataError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let env_len = c.u32("env length")? as usize;
    let env = c.take(env_len, "env")?.to_vec();
    let header = StreamHeader {
        version,
        env,
        length: c.u32("stream length")?,
        window_radius: c.u8("radius")?,
        n_objects: c.u8("object count")?,
        master_seed: c.u64("master seed")?,
        env_index: c.u64("env index")?,
        goal_seed: c.u64("goal seed")?,
    };
    let rs = record_size(header.window_radius as usize);
    let body = bytes.len() - c.pos;
    if !body.is_multiple_of(rs) {
        let whole = c.pos + (body / rs) * rs;
        return Err(DataError::Decode {
            pos: whole,
            detail: format!("partial record: {} stray bytes", body % rs),
        });
    }
    if body / rs != header.length as usize {
        return Err(DataError::Integrity(format!(
            "header declares {} records, file holds {}",
            header.length,
            body / rs
        )));
    }
    let w = rs - 8;
    let mut records = Vec::with_capacity(header.length as usize);
    let mut prev_goal = None;
    for i in 0..header.length as usize {
        let at = c.pos;
        let t = c.u32("t")?;
        let goal_id = c.u8("goal")?;
        let window = c.take(w, "window")?.to_vec();
        let prev_action = c.u8("previous action")?;
        let expert_action = c.u8("expert action")?;
        let flags = c.u8("flags")?;
        if t as usize != i {
            return Err(DataError::Decode {
                pos: at,
                detail: format!("record {i} has t = {t}"),
            });
        }
        if flags & !(REACHED | NEW_TASK) != 0 || expert_action > 3 || goal_id >= header.n_objects {
            return Err(DataError::Decode {
                pos: at,
                detail: format!("record {i} out of range"),
            });
        }
        let new_task = flags & NEW_TASK != 0;
        if new_task != (prev_goal != Some(goal_id)) {
            return Err(DataError::Integrity(format!(
                "record {i}: new-task flag disagrees with the goal sequence"
            )));
        }
        prev_goal = Some(goal_id);
        records.push(StreamRecord {
            t,
            goal_id,
            window,
            prev_action,
            expert_action,
            reached_goal: flags & REACHED != 0,
            new_task,
        });
    }
    Ok(StreamDataset { header, records })
}

pub fn write_dataset(ds: &StreamDataset, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, encode(ds)).map_err(|e| DataError::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<StreamDataset, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode(&bytes)
}
