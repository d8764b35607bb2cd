//! Single-file binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "PKNT" | version u16 | layers u32 | tasks u32 | flags u8 | seed u64
//! input rank u32, dims u32...
//! per layer: kind u8, spec fields, weight f32s, bias f32s, bn gain/beta/mean/var
//! pending filter prunes: per prunable layer, one byte per unit
//! ownership: task count u8, bits u8, states u16 + bytes, layer sizes, packed stream
//! per task: name (u32 len + utf-8), classes u32, state u8, ratio, head, private biases
//! crc32 of everything above
//! ```

use std::fs;
use std::path::Path;

use crate::error::{PackError, Result};
use crate::lifecycle::{
    BnParams, Head, Layer, NetworkOptions, PackedNetwork, TaskRecord, TaskState,
};
use crate::packed::{EncodedMask, OwnershipMap, TaskId};
use crate::tensor::{BnStats, LayerSpec, Tensor};

pub const MAGIC: &[u8; 4] = b"PKNT";
pub const VERSION: u16 = 1;

const FLAG_BIASES_FROZEN: u8 = 1;
const FLAG_BN_FROZEN: u8 = 2;
const FLAG_SEPARATE_BIAS: u8 = 4;
const FLAG_FILTER_MODE: u8 = 8;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn floats(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(PackError::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4).ok_or_else(|| self.err("size overflow"))?,
            what,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn tensor(&mut self, shape: Vec<usize>, what: &str) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = self.floats(n, what)?;
        Tensor::new(shape, data).map_err(|e| self.err(e.to_string()))
    }
    fn err(&self, msg: impl Into<String>) -> PackError {
        PackError::format(self.pos as u64, msg)
    }
}

fn write_spec(w: &mut Writer, spec: &LayerSpec) {
    match *spec {
        LayerSpec::Linear {
            in_features,
            out_features,
            has_bias,
        } => {
            w.u8(0);
            w.u32(in_features);
            w.u32(out_features);
            w.u8(has_bias as u8);
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            has_bias,
        } => {
            w.u8(1);
            for v in [in_channels, out_channels, kernel, stride, padding] {
                w.u32(v);
            }
            w.u8(has_bias as u8);
        }
        LayerSpec::BatchNorm { channels } => {
            w.u8(2);
            w.u32(channels);
        }
        LayerSpec::Relu => w.u8(3),
        LayerSpec::MaxPool2x2 => w.u8(4),
        LayerSpec::Flatten => w.u8(5),
    }
}

fn read_spec(r: &mut Reader) -> Result<LayerSpec> {
    let at = r.pos;
    Ok(match r.u8("layer kind")? {
        0 => LayerSpec::Linear {
            in_features: r.u32("linear inputs")?,
            out_features: r.u32("linear outputs")?,
            has_bias: r.u8("bias flag")? != 0,
        },
        1 => LayerSpec::Conv2d {
            in_channels: r.u32("conv channels")?,
            out_channels: r.u32("conv filters")?,
            kernel: r.u32("conv kernel")?,
            stride: r.u32("conv stride")?,
            padding: r.u32("conv padding")?,
            has_bias: r.u8("bias flag")? != 0,
        },
        2 => LayerSpec::BatchNorm {
            channels: r.u32("batchnorm channels")?,
        },
        3 => LayerSpec::Relu,
        4 => LayerSpec::MaxPool2x2,
        5 => LayerSpec::Flatten,
        k => {
            return Err(PackError::format(
                at as u64,
                format!("unknown layer kind {k}"),
            ))
        }
    })
}

/// Length of the bias (or batch-norm shift) a layer carries, if any.
fn bias_len(spec: &LayerSpec) -> Option<usize> {
    match *spec {
        LayerSpec::Linear {
            has_bias: true,
            out_features,
            ..
        } => Some(out_features),
        LayerSpec::Conv2d {
            has_bias: true,
            out_channels,
            ..
        } => Some(out_channels),
        LayerSpec::BatchNorm { channels } => Some(channels),
        _ => None,
    }
}

pub fn to_bytes(net: &PackedNetwork) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u32(net.layers.len());
    w.u32(net.tasks.len());
    let mut flags = 0;
    if net.biases_frozen {
        flags |= FLAG_BIASES_FROZEN;
    }
    if net.batchnorm_frozen {
        flags |= FLAG_BN_FROZEN;
    }
    if net.options.separate_bias {
        flags |= FLAG_SEPARATE_BIAS;
    }
    if net.options.filter_mode {
        flags |= FLAG_FILTER_MODE;
    }
    w.u8(flags);
    w.u64(net.seed);
    w.u32(net.input_shape.len());
    net.input_shape.iter().for_each(|&d| w.u32(d));

    for l in &net.layers {
        write_spec(&mut w, &l.spec);
        if let Some(t) = &l.weight {
            w.floats(t.data());
        }
        if let Some(t) = &l.bias {
            w.floats(t.data());
        }
        if let Some(bn) = &l.bn {
            w.floats(bn.gain.data());
            w.floats(bn.beta.data());
            w.floats(&bn.stats.running_mean);
            w.floats(&bn.stats.running_var);
        }
    }
    for units in &net.pending_pruned {
        units.iter().for_each(|&b| w.u8(b as u8));
    }

    let enc = net.ownership.encode();
    w.u8(enc.task_count);
    w.u8(enc.bits_per_entry);
    w.u16(enc.states.len() as u16);
    w.bytes(&enc.states);
    w.u32(enc.layer_sizes.len());
    enc.layer_sizes.iter().for_each(|&n| w.u64(n as u64));
    w.u64(enc.bytes.len() as u64);
    w.bytes(&enc.bytes);

    for t in &net.tasks {
        w.u32(t.name.len());
        w.bytes(t.name.as_bytes());
        w.u32(t.classes);
        w.u8(t.state.code());
        match t.ratio {
            Some(r) => {
                w.u8(1);
                w.f64(r);
            }
            None => w.u8(0),
        }
        w.floats(t.head.weight.data());
        w.floats(t.head.bias.data());
        match &t.private_biases {
            Some(pb) => {
                w.u8(1);
                for b in pb.iter().flatten() {
                    w.floats(b.data());
                }
            }
            None => w.u8(0),
        }
    }
    let crc = crc32fast::hash(&w.buf);
    w.buf.extend_from_slice(&crc.to_le_bytes());
    w.buf
}

pub fn from_bytes(bytes: &[u8]) -> Result<PackedNetwork> {
    if bytes.len() < 10 {
        return Err(PackError::format(
            bytes.len() as u64,
            "file too short for a header",
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(PackError::format(0, "bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(PackError::format(
            4,
            format!("unsupported version {version}"),
        ));
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    if crc32fast::hash(&bytes[..body_len]) != stored {
        return Err(PackError::format(
            body_len as u64,
            "checksum mismatch (truncated or corrupt file)",
        ));
    }
    let mut r = Reader {
        buf: &bytes[..body_len],
        pos: 6,
    };
    let layer_count = r.u32("layer count")?;
    let task_count = r.u32("task count")?;
    let flags = r.u8("flags")?;
    let seed = r.u64("seed")?;
    let rank = r.u32("input rank")?;
    let input_shape = (0..rank)
        .map(|_| r.u32("input extent"))
        .collect::<Result<Vec<_>>>()?;

    let mut layers = Vec::with_capacity(layer_count.min(1 << 16));
    for _ in 0..layer_count {
        let spec = read_spec(&mut r)?;
        let weight = match spec.weight_shape() {
            Some(s) => Some(r.tensor(s, "weights")?),
            None => None,
        };
        let bias = match (&spec, bias_len(&spec)) {
            (LayerSpec::BatchNorm { .. }, _) | (_, None) => None,
            (_, Some(n)) => Some(r.tensor(vec![n], "bias")?),
        };
        let bn = match spec {
            LayerSpec::BatchNorm { channels } => Some(BnParams {
                gain: r.tensor(vec![channels], "batchnorm gain")?,
                beta: r.tensor(vec![channels], "batchnorm shift")?,
                stats: BnStats {
                    running_mean: r.floats(channels, "running mean")?,
                    running_var: r.floats(channels, "running variance")?,
                },
            }),
            _ => None,
        };
        layers.push(Layer {
            spec,
            weight,
            bias,
            bn,
        });
    }
    let options = NetworkOptions {
        separate_bias: flags & FLAG_SEPARATE_BIAS != 0,
        filter_mode: flags & FLAG_FILTER_MODE != 0,
    };
    let at = r.pos;
    let mut net = PackedNetwork::assemble(layers, input_shape, options, seed)
        .map_err(|e| PackError::format(at as u64, format!("inconsistent layer stack: {e}")))?;
    net.biases_frozen = flags & FLAG_BIASES_FROZEN != 0;
    net.batchnorm_frozen = flags & FLAG_BN_FROZEN != 0;
    for p in 0..net.pending_pruned.len() {
        for u in 0..net.pending_pruned[p].len() {
            net.pending_pruned[p][u] = r.u8("pending prune flag")? != 0;
        }
    }

    let map_tasks = r.u8("ownership task count")?;
    let bits = r.u8("bits per entry")?;
    let state_count = r.u16("state count")? as usize;
    let states = r.take(state_count, "state table")?.to_vec();
    let nsizes = r.u32("ownership layer count")?;
    let layer_sizes = (0..nsizes)
        .map(|_| r.u64("ownership layer size").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let nbytes = r.u64("mask length")? as usize;
    let enc = EncodedMask {
        bits_per_entry: bits,
        states,
        layer_sizes,
        task_count: map_tasks,
        bytes: r.take(nbytes, "mask stream")?.to_vec(),
    };
    let at = r.pos as u64;
    let ownership = OwnershipMap::decode(&enc).map_err(|e| match e {
        PackError::Format { message, .. } => PackError::format(at, message),
        other => PackError::format(at, other.to_string()),
    })?;
    if ownership.layer_sizes() != net.ownership.layer_sizes() {
        return Err(PackError::format(
            at,
            "ownership map does not match the layer stack",
        ));
    }
    if ownership.task_count() as usize != task_count {
        return Err(PackError::format(
            at,
            "ownership task count disagrees with header",
        ));
    }
    net.ownership = ownership;

    let features = net.feature_dim;
    for k in 0..task_count {
        let len = r.u32("task name length")?;
        let name = String::from_utf8(r.take(len, "task name")?.to_vec())
            .map_err(|_| r.err("task name is not utf-8"))?;
        let classes = r.u32("class count")?;
        let at = r.pos;
        let state = TaskState::from_code(r.u8("task state")?)
            .ok_or_else(|| PackError::format(at as u64, "unknown task state"))?;
        let ratio = match r.u8("ratio flag")? {
            0 => None,
            _ => Some(r.f64("ratio")?),
        };
        let head = Head {
            weight: r.tensor(vec![classes, features], "head weights")?,
            bias: r.tensor(vec![classes], "head bias")?,
        };
        let private_biases = match r.u8("private bias flag")? {
            0 => None,
            _ => Some(
                net.layers
                    .iter()
                    .map(|l| match bias_len(&l.spec) {
                        Some(n) => r.tensor(vec![n], "private bias").map(Some),
                        None => Ok(None),
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        net.tasks.push(TaskRecord {
            id: TaskId::new(k as u8 + 1)?,
            name,
            classes,
            state,
            ratio,
            head,
            private_biases,
        });
    }
    if r.pos != body_len {
        return Err(r.err("trailing bytes before checksum"));
    }
    Ok(net)
}

pub fn save(net: &PackedNetwork, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PackedNetwork> {
    from_bytes(&fs::read(path)?)
}

/// Dense single-task network: weights outside task `t`'s view are stored as
/// zeros and every kept weight belongs to the one task.
pub fn export_network(net: &PackedNetwork, t: TaskId) -> Result<PackedNetwork> {
    let rec = net.task(t)?;
    let masks = net.task_mask(t)?;
    let mut layers = net.layers.clone();
    for (p, &li) in net.prunable.iter().enumerate() {
        let w = layers[li].weight.as_mut().unwrap();
        for (v, &keep) in w.data_mut().iter_mut().zip(&masks[p]) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    if let Some(pb) = &rec.private_biases {
        for (l, b) in layers.iter_mut().zip(pb) {
            if let Some(b) = b {
                match &mut l.bn {
                    Some(bn) => bn.beta = b.clone(),
                    None => l.bias = Some(b.clone()),
                }
            }
        }
    }
    let mut out = PackedNetwork::assemble(
        layers,
        net.input_shape.clone(),
        NetworkOptions::default(),
        net.seed,
    )?;
    let owners: Vec<Vec<u8>> = masks
        .iter()
        .map(|m| m.iter().map(|&k| k as u8).collect())
        .collect();
    out.ownership = OwnershipMap::from_layers(owners, 1)?;
    out.biases_frozen = true;
    out.batchnorm_frozen = true;
    out.tasks.push(TaskRecord {
        id: TaskId::new(1)?,
        name: rec.name.clone(),
        classes: rec.classes,
        state: TaskState::Frozen,
        ratio: rec.ratio,
        head: rec.head.clone(),
        private_biases: None,
    });
    Ok(out)
}

pub fn export_task(net: &PackedNetwork, t: TaskId, path: &Path) -> Result<()> {
    save(&export_network(net, t)?, path)
}
