//! Per-weight task ownership and the compact mask encoding.
//!
//! Every prunable weight carries one owner byte: `0` is free, `t` means the
//! weight survived pruning for task `t` and is frozen from then on. Because
//! task `t` sees every weight owned by tasks `1..=t`, a single owner index
//! per weight replaces one bit per task, and the serialized form needs only
//! `ceil(log2(states))` bits per entry.

use std::fmt;

use crate::error::{PackError, Result};

/// 1-based task identifier. Owner value `0` is reserved for free weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(u8);

impl TaskId {
    pub fn new(id: u8) -> Result<Self> {
        if id == 0 {
            return Err(PackError::Lookup("task ids start at 1".into()));
        }
        Ok(Self(id))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub(crate) fn index(self) -> usize {
        self.0 as usize - 1
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const FREE: u8 = 0;
pub const MAX_TASKS: usize = 255;

/// One boolean per weight, grouped by prunable layer.
pub type LayerMasks = Vec<Vec<bool>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Training,
    Retraining,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OwnershipMap {
    layers: Vec<Vec<u8>>,
    task_count: u8,
}

impl OwnershipMap {
    /// All-free map with one array per prunable layer.
    pub fn new(layer_sizes: &[usize]) -> Self {
        Self {
            layers: layer_sizes.iter().map(|&n| vec![FREE; n]).collect(),
            task_count: 0,
        }
    }

    /// Rebuild from raw owner arrays, validating the owner range.
    pub fn from_layers(layers: Vec<Vec<u8>>, task_count: u8) -> Result<Self> {
        if let Some(&bad) = layers.iter().flatten().find(|&&o| o > task_count) {
            return Err(PackError::input(format!(
                "owner {bad} exceeds task count {task_count}"
            )));
        }
        Ok(Self { layers, task_count })
    }

    pub fn layers(&self) -> &[Vec<u8>] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &[u8] {
        &self.layers[i]
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn task_count(&self) -> u8 {
        self.task_count
    }

    pub fn free_count(&self) -> usize {
        self.layers.iter().flatten().filter(|&&o| o == FREE).count()
    }

    /// Allocate the next task id.
    pub fn register_task(&mut self) -> Result<TaskId> {
        if self.task_count as usize >= MAX_TASKS {
            return Err(PackError::Capacity(format!(
                "at most {MAX_TASKS} tasks fit in one-byte owners"
            )));
        }
        self.task_count += 1;
        TaskId::new(self.task_count)
    }

    fn check_task(&self, t: TaskId) -> Result<()> {
        if t.get() > self.task_count {
            return Err(PackError::Lookup(format!(
                "task {t} is not registered ({} tasks)",
                self.task_count
            )));
        }
        Ok(())
    }

    fn masks(&self, pred: impl Fn(u8) -> bool) -> LayerMasks {
        self.layers
            .iter()
            .map(|l| l.iter().map(|&o| pred(o)).collect())
            .collect()
    }

    /// Weights that task `t` reads at inference: owners `1..=t`.
    pub fn inference_mask(&self, t: TaskId) -> Result<LayerMasks> {
        self.check_task(t)?;
        let t = t.get();
        Ok(self.masks(|o| o != FREE && o <= t))
    }

    /// Weights active in the forward pass while task `t` trains: free
    /// weights plus everything owned by earlier tasks.
    pub fn training_active_mask(&self, t: TaskId) -> Result<LayerMasks> {
        self.check_task(t)?;
        self.ensure_open(t)?;
        let t = t.get();
        Ok(self.masks(|o| o == FREE || o < t))
    }

    fn ensure_open(&self, t: TaskId) -> Result<()> {
        if self.layers.iter().flatten().any(|&o| o >= t.get()) {
            return Err(PackError::state(format!(
                "task {t} already owns weights or later tasks exist; it cannot re-enter training"
            )));
        }
        Ok(())
    }

    /// Weights an optimizer step may touch: free weights while training,
    /// the task's own survivors while retraining.
    pub fn update_mask(&self, t: TaskId, phase: Phase) -> Result<LayerMasks> {
        self.check_task(t)?;
        match phase {
            Phase::Training => {
                self.ensure_open(t)?;
                Ok(self.masks(|o| o == FREE))
            }
            Phase::Retraining => {
                let t = t.get();
                Ok(self.masks(|o| o == t))
            }
        }
    }

    /// Assign `indices` of one layer to task `t`. Validates the whole set
    /// before writing anything.
    pub fn commit_survivors(&mut self, t: TaskId, layer: usize, indices: &[usize]) -> Result<()> {
        self.check_task(t)?;
        let owners = self
            .layers
            .get(layer)
            .ok_or_else(|| PackError::Lookup(format!("no prunable layer {layer}")))?;
        for &i in indices {
            match owners.get(i) {
                None => {
                    return Err(PackError::input(format!(
                        "index {i} outside layer {layer} of {} weights",
                        owners.len()
                    )))
                }
                Some(&o) if o != FREE => {
                    return Err(PackError::OwnershipViolation(format!(
                        "layer {layer} index {i} already owned by task {o}"
                    )))
                }
                _ => {}
            }
        }
        let owners = &mut self.layers[layer];
        for &i in indices {
            owners[i] = t.get();
        }
        Ok(())
    }

    /// Owner values present, ascending. This is the state table of the encoding.
    pub fn states(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &o in self.layers.iter().flatten() {
            seen[o as usize] = true;
        }
        (0..=255u8).filter(|&o| seen[o as usize]).collect()
    }

    pub fn encode(&self) -> EncodedMask {
        let states = self.states();
        let bits = bits_per_entry(states.len());
        let mut code = [0u8; 256];
        for (c, &s) in states.iter().enumerate() {
            code[s as usize] = c as u8;
        }
        let total = self.total();
        let mut bytes = vec![0u8; packed_len(total, bits)];
        let mut bit = 0usize;
        for &o in self.layers.iter().flatten() {
            write_bits(&mut bytes, bit, bits, code[o as usize]);
            bit += bits;
        }
        EncodedMask {
            bits_per_entry: bits as u8,
            states,
            layer_sizes: self.layer_sizes(),
            task_count: self.task_count,
            bytes,
        }
    }

    pub fn decode(enc: &EncodedMask) -> Result<Self> {
        enc.validate()?;
        let bits = enc.bits_per_entry as usize;
        let mut bit = 0usize;
        let mut layers = Vec::with_capacity(enc.layer_sizes.len());
        for &n in &enc.layer_sizes {
            let mut owners = Vec::with_capacity(n);
            for _ in 0..n {
                let c = read_bits(&enc.bytes, bit, bits) as usize;
                let owner = *enc.states.get(c).ok_or_else(|| {
                    PackError::format(
                        (bit / 8) as u64,
                        format!("code {c} outside state table of {}", enc.states.len()),
                    )
                })?;
                owners.push(owner);
                bit += bits;
            }
            layers.push(owners);
        }
        Self::from_layers(layers, enc.task_count)
    }
}

/// Bit-packed ownership map. Entries are `bits_per_entry` wide, packed
/// little-endian: entry `i` starts at bit `i * bits`, lowest bits first.
/// `states[c]` is the owner value for code `c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedMask {
    pub bits_per_entry: u8,
    pub states: Vec<u8>,
    pub layer_sizes: Vec<usize>,
    pub task_count: u8,
    pub bytes: Vec<u8>,
}

impl EncodedMask {
    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn total_entries(&self) -> usize {
        self.layer_sizes.iter().sum()
    }

    fn validate(&self) -> Result<()> {
        let bits = self.bits_per_entry as usize;
        if bits != bits_per_entry(self.states.len()) {
            return Err(PackError::format(
                0,
                format!(
                    "{bits} bits per entry declared for {} states",
                    self.states.len()
                ),
            ));
        }
        let need = self.total_entries() as u128 * bits as u128;
        let have = self.bytes.len() as u128 * 8;
        if need > have {
            return Err(PackError::format(
                self.bytes.len() as u64,
                format!(
                    "{} entries of {bits} bits need {need} bits but the stream holds {have}",
                    self.total_entries()
                ),
            ));
        }
        Ok(())
    }
}

/// `ceil(log2(states))`, at least 1.
pub fn bits_per_entry(states: usize) -> usize {
    if states <= 2 {
        1
    } else {
        (usize::BITS - (states - 1).leading_zeros()) as usize
    }
}

fn packed_len(entries: usize, bits: usize) -> usize {
    (entries * bits).div_ceil(8)
}

/// Bytes needed to store the owner of `param_count` weights among `state_count` states.
pub fn overhead_bytes(param_count: u64, state_count: usize) -> u64 {
    (param_count * bits_per_entry(state_count) as u64).div_ceil(8)
}

fn write_bits(bytes: &mut [u8], start: usize, width: usize, value: u8) {
    for k in 0..width {
        if (value >> k) & 1 == 1 {
            let b = start + k;
            bytes[b / 8] |= 1 << (b % 8);
        }
    }
}

fn read_bits(bytes: &[u8], start: usize, width: usize) -> u8 {
    let mut v = 0u8;
    for k in 0..width {
        let b = start + k;
        v |= ((bytes[b / 8] >> (b % 8)) & 1) << k;
    }
    v
}
