//! Magnitude pruning, filter pruning and parameter-budget accounting.

use serde::{Deserialize, Serialize};

use crate::error::{PackError, Result};
use crate::lifecycle::{PackedNetwork, TaskState};
use crate::packed::{OwnershipMap, FREE};
use crate::tensor::{Tape, Tensor, Var};

/// Weights removed from one layer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PruneDecision {
    /// Flat indices, ascending.
    pub pruned: Vec<usize>,
    pub eligible: usize,
}

impl PruneDecision {
    pub fn pruned_count(&self) -> usize {
        self.pruned.len()
    }

    pub fn retained(&self) -> usize {
        self.eligible - self.pruned.len()
    }
}

/// Number of weights a ratio removes from `eligible` candidates.
pub fn prune_count(ratio: f64, eligible: usize) -> usize {
    ((ratio * eligible as f64).floor() as usize).min(eligible)
}

/// Select the `floor(ratio * E)` eligible entries of smallest magnitude.
/// Ties go to the smaller flat index.
pub fn magnitude_select(values: &Tensor, eligible: &[bool], ratio: f64) -> Result<PruneDecision> {
    if eligible.len() != values.len() {
        return Err(PackError::dim(format!(
            "eligibility mask of {} bits for {} values",
            eligible.len(),
            values.len()
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(PackError::input(format!(
            "pruning ratio {ratio} outside [0, 1]"
        )));
    }
    let data = values.data();
    let mut cand: Vec<usize> = (0..data.len()).filter(|&i| eligible[i]).collect();
    let k = prune_count(ratio, cand.len());
    let e = cand.len();
    cand.sort_by(|&a, &b| data[a].abs().total_cmp(&data[b].abs()).then(a.cmp(&b)));
    let mut pruned = cand[..k].to_vec();
    pruned.sort_unstable();
    Ok(PruneDecision {
        pruned,
        eligible: e,
    })
}

/// Zero the selected entries; everything else keeps its bits.
pub fn apply_prune(values: &mut Tensor, decision: &PruneDecision) -> Result<()> {
    let n = values.len();
    if let Some(&bad) = decision.pruned.iter().find(|&&i| i >= n) {
        return Err(PackError::dim(format!(
            "pruned index {bad} outside {n} values"
        )));
    }
    let data = values.data_mut();
    for &i in &decision.pruned {
        data[i] = 0.0;
    }
    Ok(())
}

/// Parameter counts by owner. `owned[k]` belongs to task `k + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub owned: Vec<u64>,
    pub free: u64,
    pub total: u64,
}

pub fn budget_report(map: &OwnershipMap) -> BudgetLedger {
    // four interleaved tables so runs of one owner don't serialize on a counter
    let mut lanes = [[0u64; 256]; 4];
    for layer in map.layers() {
        let chunks = layer.chunks_exact(4);
        for &o in chunks.remainder() {
            lanes[0][o as usize] += 1;
        }
        for c in chunks {
            lanes[0][c[0] as usize] += 1;
            lanes[1][c[1] as usize] += 1;
            lanes[2][c[2] as usize] += 1;
            lanes[3][c[3] as usize] += 1;
        }
    }
    let hist: Vec<u64> = (0..256).map(|k| lanes.iter().map(|l| l[k]).sum()).collect();
    BudgetLedger {
        owned: hist[1..=map.task_count() as usize].to_vec(),
        free: hist[FREE as usize],
        total: map.total() as u64,
    }
}

/// Forward pass of one batch kept on its tape, with handles to every
/// prunable layer's output.
pub struct ActivationTrace {
    tape: Tape,
    taps: Vec<Var>,
    loss: Var,
    differentiated: bool,
}

impl ActivationTrace {
    pub(crate) fn new(tape: Tape, taps: Vec<Var>, loss: Var) -> Self {
        Self {
            tape,
            taps,
            loss,
            differentiated: false,
        }
    }

    pub fn backward(&mut self) -> Result<()> {
        self.tape.backward(self.loss)?;
        self.differentiated = true;
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.taps.len()
    }

    pub fn activation(&self, p: usize) -> &Tensor {
        self.tape.value(self.taps[p])
    }

    pub fn gradient(&self, p: usize) -> Option<&[f32]> {
        self.differentiated
            .then(|| self.tape.grad(self.taps[p]))
            .flatten()
    }
}

/// Per prunable layer, per unit: `|mean over batch and positions of a * dL/da|`,
/// scaled to unit L2 norm within the layer.
pub fn taylor_filter_scores(trace: &ActivationTrace) -> Result<Vec<Vec<f32>>> {
    if !trace.differentiated {
        return Err(PackError::state(
            "filter scores need a backward pass over the traced batch",
        ));
    }
    let mut out = Vec::with_capacity(trace.layer_count());
    for p in 0..trace.layer_count() {
        let a = trace.activation(p);
        let zeros;
        let g = match trace.gradient(p) {
            Some(g) => g,
            None => {
                zeros = vec![0.0; a.len()];
                &zeros
            }
        };
        let (batch, units) = (a.shape()[0], a.shape()[1]);
        let spatial = a.len() / (batch * units);
        let mut raw = vec![0.0f64; units];
        for n in 0..batch {
            for (u, r) in raw.iter_mut().enumerate() {
                let off = (n * units + u) * spatial;
                for s in 0..spatial {
                    *r += a.data()[off + s] as f64 * g[off + s] as f64;
                }
            }
        }
        let count = (batch * spatial) as f64;
        let raw: Vec<f64> = raw.iter().map(|r| (r / count).abs()).collect();
        let norm = raw.iter().map(|r| r * r).sum::<f64>().sqrt();
        out.push(
            raw.iter()
                .map(|&r| if norm > 0.0 { (r / norm) as f32 } else { 0.0 })
                .collect(),
        );
    }
    Ok(out)
}

/// Prune the `n` lowest-scored units among those the open task may still
/// remove. Returns the `(layer, unit)` pairs removed, in score order.
pub fn filter_prune_step(
    net: &mut PackedNetwork,
    scores: &[Vec<f32>],
    n: usize,
) -> Result<Vec<(usize, usize)>> {
    if scores.len() != net.prunable.len() {
        return Err(PackError::dim(format!(
            "scores for {} layers, network has {} prunable layers",
            scores.len(),
            net.prunable.len()
        )));
    }
    let mut cand = Vec::new();
    for (p, s) in scores.iter().enumerate() {
        if s.len() != net.units(p) {
            return Err(PackError::dim(format!(
                "layer {p}: {} scores for {} units",
                s.len(),
                net.units(p)
            )));
        }
        for (u, &v) in s.iter().enumerate() {
            if net.unit_owner(p, u) == FREE && !net.pending_pruned[p][u] {
                cand.push((v, p, u));
            }
        }
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if n >= cand.len() {
        return Err(PackError::input(format!(
            "cannot prune {n} of {} remaining units",
            cand.len()
        )));
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let units: Vec<(usize, usize)> = cand[..n].iter().map(|&(_, p, u)| (p, u)).collect();
    prune_filters(net, &units)?;
    Ok(units)
}

/// Remove specific units of the open task: zero their weights and bias,
/// zero the weights other open-task units read from them, and zero the
/// matching columns of the open task's head. The units stay free.
pub fn prune_filters(net: &mut PackedNetwork, units: &[(usize, usize)]) -> Result<()> {
    if !net.options.filter_mode {
        return Err(PackError::state(
            "filter pruning requires a network built in filter mode",
        ));
    }
    let ti = net
        .tasks
        .iter()
        .position(|r| r.state == TaskState::Training)
        .ok_or_else(|| PackError::state("filter pruning needs a task in training"))?;
    for &(p, u) in units {
        if p >= net.prunable.len() || u >= net.units(p) {
            return Err(PackError::Lookup(format!(
                "no unit {u} in prunable layer {p}"
            )));
        }
        let owner = net.unit_owner(p, u);
        if owner != FREE {
            return Err(PackError::OwnershipViolation(format!(
                "unit {u} of layer {p} belongs to task {owner}"
            )));
        }
    }
    let last = net.prunable.len() - 1;
    for &(p, u) in units {
        net.pending_pruned[p][u] = true;
        let span = net.unit_span(p);
        let li = net.prunable[p];
        let layer = &mut net.layers[li];
        layer.weight.as_mut().unwrap().data_mut()[u * span..(u + 1) * span].fill(0.0);
        if let Some(b) = layer.bias.as_mut() {
            b.data_mut()[u] = 0.0;
        }
        if let Some(pb) = net.tasks[ti].private_biases.as_mut() {
            if let Some(b) = pb[li].as_mut() {
                b.data_mut()[u] = 0.0;
            }
        }
        if p < last {
            let q = p + 1;
            let readers: Vec<usize> = (0..net.ownership.layer(q).len())
                .filter(|&i| {
                    net.ownership.layer(q)[i] == FREE
                        && net.source_unit(q, net.weight_input(q, i)) == u
                })
                .collect();
            let w = net.layers[net.prunable[q]].weight.as_mut().unwrap();
            for i in readers {
                w.data_mut()[i] = 0.0;
            }
        } else {
            let f = net.feature_dim;
            let cols: Vec<usize> = (0..f).filter(|&j| net.feature_unit(j) == u).collect();
            let head = &mut net.tasks[ti].head.weight;
            let classes = head.shape()[0];
            for c in 0..classes {
                for &j in &cols {
                    head.data_mut()[c * f + j] = 0.0;
                }
            }
        }
    }
    Ok(())
}
