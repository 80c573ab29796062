//! Slot-affine segment loader.
//!
//! Slot `s` walks one stream in windows of `T` records until the stream is
//! exhausted, then takes the next unassigned stream and flags
//! `fresh_stream`. The first record of a slot's batch `b + 1` is therefore
//! the successor of the last record of its batch `b`, unless the slot is
//! fresh.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, StreamDataset};
use crate::maze::derive_seed;
use crate::model::SegmentInputs;

/// Time-major slice of `batch` slots × `steps` records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentBatch {
    pub epoch: u32,
    pub index: u64,
    pub inputs: SegmentInputs,
    /// Expert action per row.
    pub targets: Vec<u8>,
    /// False on padding and idle slots.
    pub mask: Vec<bool>,
    pub fresh_stream: Vec<bool>,
    /// Stream position in the loader's list, `None` for an idle slot.
    pub streams: Vec<Option<usize>>,
    /// `t` of each slot's first record.
    pub start_t: Vec<Option<u32>>,
}

impl SegmentBatch {
    pub fn slots(&self) -> usize {
        self.inputs.batch
    }

    pub fn steps(&self) -> usize {
        self.inputs.steps
    }

    pub fn active_rows(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Loader<'a> {
    streams: &'a [StreamDataset],
    slots: usize,
    seg_len: usize,
    seed: u64,
    window: usize,
}

impl<'a> Loader<'a> {
    pub fn new(streams: &'a [StreamDataset], slots: usize, seg_len: usize, seed: u64) -> Result<Self, DataError> {
        if streams.is_empty() || slots == 0 || seg_len == 0 {
            return Err(DataError::Config("loader needs streams, slots >= 1 and T >= 1".into()));
        }
        let radius = streams[0].header.window_radius;
        if streams.iter().any(|s| s.header.window_radius != radius) {
            return Err(DataError::Config("streams disagree on window radius".into()));
        }
        if let Some(s) = streams.iter().find(|s| s.len() < seg_len) {
            return Err(DataError::Config(format!(
                "segment length {seg_len} exceeds stream length {}",
                s.len()
            )));
        }
        Ok(Loader {
            streams,
            slots,
            seg_len,
            seed,
            window: (2 * radius as usize + 1).pow(2),
        })
    }

    pub fn streams(&self) -> &'a [StreamDataset] {
        self.streams
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn seg_len(&self) -> usize {
        self.seg_len
    }

    /// Stream visiting order of `epoch`.
    pub fn order(&self, epoch: u32) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.streams.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "epoch-order", epoch as u64));
        order.shuffle(&mut rng);
        order
    }

    pub fn epoch(&self, epoch: u32) -> EpochIter<'a> {
        EpochIter {
            loader: *self,
            epoch,
            order: self.order(epoch),
            next_stream: 0,
            cursor: vec![None; self.slots],
            index: 0,
        }
    }

    /// Batches in `epoch`, counted without materializing them.
    pub fn batches_in_epoch(&self, epoch: u32) -> u64 {
        let mut lanes = vec![0usize; self.slots];
        let per_stream: Vec<usize> = self
            .order(epoch)
            .iter()
            .map(|&i| self.streams[i].len().div_ceil(self.seg_len))
            .collect();
        let mut next = 0;
        let mut batches = 0u64;
        loop {
            for lane in lanes.iter_mut() {
                if *lane == 0 && next < per_stream.len() {
                    *lane = per_stream[next];
                    next += 1;
                }
            }
            if lanes.iter().all(|&l| l == 0) {
                return batches;
            }
            for lane in lanes.iter_mut() {
                *lane = lane.saturating_sub(1);
            }
            batches += 1;
        }
    }
}

pub struct EpochIter<'a> {
    loader: Loader<'a>,
    epoch: u32,
    order: Vec<usize>,
    next_stream: usize,
    /// Per slot: (stream, next record position).
    cursor: Vec<Option<(usize, usize)>>,
    index: u64,
}

impl Iterator for EpochIter<'_> {
    type Item = SegmentBatch;

    fn next(&mut self) -> Option<SegmentBatch> {
        let l = self.loader;
        let (b, t_len, w) = (l.slots, l.seg_len, l.window);
        let mut fresh = vec![false; b];
        for (s, c) in self.cursor.iter_mut().enumerate() {
            if c.is_none() && self.next_stream < self.order.len() {
                *c = Some((self.order[self.next_stream], 0));
                self.next_stream += 1;
                fresh[s] = true;
            }
        }
        if self.cursor.iter().all(Option::is_none) {
            return None;
        }
        let rows = b * t_len;
        let mut inputs = SegmentInputs {
            batch: b,
            steps: t_len,
            windows: vec![0; rows * w],
            goals: vec![0; rows],
            prev_actions: vec![0; rows],
        };
        let mut targets = vec![0; rows];
        let mut mask = vec![false; rows];
        let mut streams = vec![None; b];
        let mut start_t = vec![None; b];
        for s in 0..b {
            let Some((stream, pos)) = self.cursor[s] else { continue };
            let recs = &l.streams[stream].records;
            streams[s] = Some(stream);
            start_t[s] = Some(recs[pos].t);
            for t in 0..t_len {
                let Some(r) = recs.get(pos + t) else { break };
                let row = t * b + s;
                inputs.windows[row * w..(row + 1) * w].copy_from_slice(&r.window);
                inputs.goals[row] = r.goal_id;
                inputs.prev_actions[row] = r.prev_action;
                targets[row] = r.expert_action;
                mask[row] = true;
            }
            let next = pos + t_len;
            self.cursor[s] = (next < recs.len()).then_some((stream, next));
        }
        let batch = SegmentBatch {
            epoch: self.epoch,
            index: self.index,
            inputs,
            targets,
            mask,
            fresh_stream: fresh,
            streams,
            start_t,
        };
        self.index += 1;
        Some(batch)
    }
}
