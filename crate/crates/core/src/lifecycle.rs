//! The packing controller: train, prune, retrain and freeze one task at a
//! time, then serve masked inference for any task packed so far.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stream, Dataset};
use crate::error::{PackError, Result};
use crate::packed::{LayerMasks, OwnershipMap, Phase, TaskId, FREE};
use crate::pruner;
use crate::tensor::{sgd_masked_step, BnMode, BnStats, LayerSpec, Tape, Tensor, Var};

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

const INIT_STREAM: u64 = 10;
const HEAD_STREAM: u64 = 11;
const SHUFFLE_STREAM: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Training,
    PrunedRetraining,
    Frozen,
}

impl TaskState {
    pub fn code(self) -> u8 {
        match self {
            TaskState::Training => 0,
            TaskState::PrunedRetraining => 1,
            TaskState::Frozen => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(TaskState::Training),
            1 => Some(TaskState::PrunedRetraining),
            2 => Some(TaskState::Frozen),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gain: Tensor,
    pub beta: Tensor,
    pub stats: BnStats,
}

/// One backbone layer and whatever parameters its kind carries.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub bn: Option<BnParams>,
}

/// Task-private classifier reading the backbone features.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub id: TaskId,
    pub name: String,
    pub classes: usize,
    pub state: TaskState,
    pub ratio: Option<f64>,
    pub head: Head,
    /// Separate-bias mode only: per backbone layer, this task's copy of the
    /// layer bias (conv/linear) or batch-norm shift.
    pub private_biases: Option<Vec<Option<Tensor>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr: f32,
    pub decay: f32,
    pub decay_epoch: usize,
    pub retrain_epochs: usize,
    pub retrain_lr: f32,
    pub batch_size: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 4,
            lr: 0.05,
            decay: 0.1,
            decay_epoch: 2,
            retrain_epochs: 2,
            retrain_lr: 0.005,
            batch_size: 32,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.retrain_epochs > self.epochs {
            return Err(PackError::input(format!(
                "retrain epochs {} exceed training epochs {}",
                self.retrain_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(PackError::input("batch size must be positive"));
        }
        if !(self.lr.is_finite() && self.retrain_lr.is_finite() && self.decay.is_finite()) {
            return Err(PackError::input("learning rates must be finite"));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f32 {
        if epoch >= self.decay_epoch {
            self.lr * self.decay
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkOptions {
    pub separate_bias: bool,
    /// Prune whole output units instead of individual weights.
    pub filter_mode: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedNetwork {
    pub(crate) input_shape: Vec<usize>,
    pub(crate) layers: Vec<Layer>,
    pub(crate) prunable: Vec<usize>,
    pub(crate) ownership: OwnershipMap,
    pub(crate) tasks: Vec<TaskRecord>,
    pub(crate) biases_frozen: bool,
    pub(crate) batchnorm_frozen: bool,
    pub(crate) options: NetworkOptions,
    pub(crate) seed: u64,
    pub(crate) feature_dim: usize,
    /// Prunable-layer indices whose free weights may train; `None` is all.
    pub(crate) trainable_layers: Option<Vec<usize>>,
    /// Filter mode: units pruned during the open task, awaiting commit.
    pub(crate) pending_pruned: Vec<Vec<bool>>,
}

/// What one forward pass reads and which parameter groups receive gradients.
struct Pass<'a> {
    task: usize,
    masks: Option<&'a LayerMasks>,
    bn_mode: BnMode,
    learn: bool,
    /// Differentiate through the input so every activation gets a gradient.
    trace: bool,
}

struct Recorded {
    logits: Var,
    weights: Vec<Option<Var>>,
    biases: Vec<Option<Var>>,
    gains: Vec<Option<Var>>,
    betas: Vec<Option<Var>>,
    head_w: Var,
    head_b: Var,
    /// Output of each prunable layer, before any normalization.
    taps: Vec<Var>,
    stats: Vec<Option<BnStats>>,
}

impl PackedNetwork {
    /// Fresh network with He-uniform weights and zero biases.
    pub fn new(
        backbone: Vec<LayerSpec>,
        input_shape: Vec<usize>,
        options: NetworkOptions,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = stream(seed, INIT_STREAM);
        let mut layers = Vec::with_capacity(backbone.len());
        for spec in backbone {
            let weight = spec.weight_shape().map(|shape| {
                let bound = (6.0 / spec.fan_in() as f32).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(shape, data).expect("weight shape")
            });
            let bias = match spec {
                LayerSpec::Linear { has_bias: true, .. }
                | LayerSpec::Conv2d { has_bias: true, .. } => {
                    Some(Tensor::zeros(vec![spec.units().unwrap()]))
                }
                _ => None,
            };
            let bn = match spec {
                LayerSpec::BatchNorm { channels } if channels > 0 => Some(BnParams {
                    gain: Tensor::filled(vec![channels], 1.0),
                    beta: Tensor::zeros(vec![channels]),
                    stats: BnStats::new(channels),
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
        Self::assemble(layers, input_shape, options, seed)
    }

    /// Validate a layer stack and derive the bookkeeping around it.
    pub(crate) fn assemble(
        layers: Vec<Layer>,
        input_shape: Vec<usize>,
        options: NetworkOptions,
        seed: u64,
    ) -> Result<Self> {
        let mut shape = input_shape.clone();
        for l in &layers {
            shape = l.spec.output_shape(&shape)?;
        }
        if shape.len() != 1 {
            return Err(PackError::dim(format!(
                "backbone must end in a flat feature vector, got {shape:?}"
            )));
        }
        let prunable: Vec<usize> = (0..layers.len())
            .filter(|&i| layers[i].spec.is_prunable())
            .collect();
        if prunable.is_empty() {
            return Err(PackError::input("backbone has no prunable layers"));
        }
        let sizes: Vec<usize> = prunable
            .iter()
            .map(|&i| layers[i].weight.as_ref().map_or(0, Tensor::len))
            .collect();
        let net = Self {
            pending_pruned: prunable
                .iter()
                .map(|&i| vec![false; layers[i].spec.units().unwrap()])
                .collect(),
            input_shape,
            prunable,
            ownership: OwnershipMap::new(&sizes),
            tasks: Vec::new(),
            biases_frozen: false,
            batchnorm_frozen: false,
            options,
            seed,
            feature_dim: shape[0],
            trainable_layers: None,
            layers,
        };
        if options.filter_mode {
            net.check_unit_chain()?;
        }
        Ok(net)
    }

    /// Filter mode traces each layer's inputs back to the previous prunable
    /// layer's units, so input widths must divide evenly into units.
    fn check_unit_chain(&self) -> Result<()> {
        for p in 1..self.prunable.len() {
            let width = self.input_width(p);
            let prev = self.units(p - 1);
            if !width.is_multiple_of(prev) {
                return Err(PackError::dim(format!(
                    "prunable layer {p} reads {width} inputs that do not map onto {prev} units"
                )));
            }
        }
        if !self
            .feature_dim
            .is_multiple_of(self.units(self.prunable.len() - 1))
        {
            return Err(PackError::dim(
                "features do not map onto the last layer's units",
            ));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    /// Backbone index of each prunable layer.
    pub fn prunable_layers(&self) -> &[usize] {
        &self.prunable
    }

    pub fn ownership(&self) -> &OwnershipMap {
        &self.ownership
    }

    pub fn tasks(&self) -> &[TaskRecord] {
        &self.tasks
    }

    pub fn task(&self, t: TaskId) -> Result<&TaskRecord> {
        self.tasks
            .get(t.index())
            .ok_or_else(|| PackError::Lookup(format!("unknown task {t}")))
    }

    pub fn task_by_name(&self, name: &str) -> Result<&TaskRecord> {
        self.tasks
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| PackError::Lookup(format!("unknown task {name:?}")))
    }

    pub fn biases_frozen(&self) -> bool {
        self.biases_frozen
    }

    pub fn batchnorm_frozen(&self) -> bool {
        self.batchnorm_frozen
    }

    pub fn options(&self) -> NetworkOptions {
        self.options
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Raw weight access that bypasses ownership. For tests and tooling.
    pub fn layer_weight_mut(&mut self, layer: usize) -> Option<&mut Tensor> {
        self.layers.get_mut(layer)?.weight.as_mut()
    }

    pub fn prunable_count(&self) -> usize {
        self.ownership.total()
    }

    /// Restrict new-task training to the free weights of these prunable
    /// layers; the head always trains. `None` lifts the restriction.
    pub fn set_trainable_layers(&mut self, layers: Option<Vec<usize>>) -> Result<()> {
        if let Some(bad) = layers.iter().flatten().find(|&&p| p >= self.prunable.len()) {
            return Err(PackError::Lookup(format!(
                "no prunable layer {bad} (network has {})",
                self.prunable.len()
            )));
        }
        self.trainable_layers = layers;
        Ok(())
    }

    pub fn trainable_layers(&self) -> Option<&[usize]> {
        self.trainable_layers.as_deref()
    }

    /// Bytes of task-private bias storage in separate-bias mode.
    pub fn private_bias_bytes(&self) -> u64 {
        self.tasks
            .iter()
            .filter_map(|r| r.private_biases.as_ref())
            .flatten()
            .flatten()
            .map(|b| 4 * b.len() as u64)
            .sum()
    }

    pub(crate) fn units(&self, p: usize) -> usize {
        self.layers[self.prunable[p]].spec.units().unwrap()
    }

    pub(crate) fn input_width(&self, p: usize) -> usize {
        match self.layers[self.prunable[p]].spec {
            LayerSpec::Conv2d { in_channels, .. } => in_channels,
            LayerSpec::Linear { in_features, .. } => in_features,
            _ => unreachable!("prunable layers are conv or linear"),
        }
    }

    /// Weights per output unit of prunable layer `p`.
    pub(crate) fn unit_span(&self, p: usize) -> usize {
        self.ownership.layer(p).len() / self.units(p)
    }

    /// Owner of a unit; all weights of a unit share one owner in filter mode.
    pub(crate) fn unit_owner(&self, p: usize, u: usize) -> u8 {
        self.ownership.layer(p)[u * self.unit_span(p)]
    }

    /// Unit of prunable layer `p - 1` feeding input index `j` of layer `p`.
    pub(crate) fn source_unit(&self, p: usize, j: usize) -> usize {
        j / (self.input_width(p) / self.units(p - 1))
    }

    /// Input index read by flat weight `i` of prunable layer `p`.
    pub(crate) fn weight_input(&self, p: usize, i: usize) -> usize {
        match self.layers[self.prunable[p]].spec {
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => (i % (in_channels * kernel * kernel)) / (kernel * kernel),
            LayerSpec::Linear { in_features, .. } => i % in_features,
            _ => unreachable!("prunable layers are conv or linear"),
        }
    }

    /// Last-layer unit feeding feature `j`.
    pub(crate) fn feature_unit(&self, j: usize) -> usize {
        let last = self.prunable.len() - 1;
        j / (self.feature_dim / self.units(last))
    }

    fn open_task(&self) -> Option<&TaskRecord> {
        self.tasks.iter().find(|r| r.state != TaskState::Frozen)
    }

    fn expect_state(&self, t: TaskId, want: TaskState, op: &str) -> Result<usize> {
        let rec = self.task(t)?;
        if rec.state != want {
            return Err(PackError::state(format!(
                "{op} needs task {t} in state {want:?}, found {:?}",
                rec.state
            )));
        }
        Ok(t.index())
    }

    /// Register a new task with a fresh private head.
    pub fn add_task(&mut self, name: &str, classes: usize) -> Result<TaskId> {
        if let Some(open) = self.open_task() {
            return Err(PackError::state(format!(
                "task {} ({}) is still {:?}; freeze it before adding another",
                open.id, open.name, open.state
            )));
        }
        if classes < 2 {
            return Err(PackError::input(format!(
                "task needs at least 2 classes, got {classes}"
            )));
        }
        if self.tasks.iter().any(|r| r.name == name) {
            return Err(PackError::input(format!(
                "task name {name:?} already in use"
            )));
        }
        if self.ownership.free_count() == 0 {
            return Err(PackError::Capacity(
                "no free parameters remain for a new task".into(),
            ));
        }
        let mut ownership = self.ownership.clone();
        let id = ownership.register_task()?;
        let mut rng = stream(self.seed, HEAD_STREAM + ((id.get() as u64) << 8));
        let bound = 1.0 / (self.feature_dim as f32).sqrt();
        let mut uniform =
            |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let head = Head {
            weight: Tensor::new(
                vec![classes, self.feature_dim],
                uniform(classes * self.feature_dim),
            )?,
            bias: Tensor::new(vec![classes], uniform(classes))?,
        };
        let private_biases = (self.options.separate_bias && id.get() > 1).then(|| {
            self.layers
                .iter()
                .map(|l| match (&l.bias, &l.bn) {
                    (Some(b), _) => Some(b.clone()),
                    (None, Some(bn)) => Some(bn.beta.clone()),
                    _ => None,
                })
                .collect()
        });
        self.ownership = ownership;
        self.tasks.push(TaskRecord {
            id,
            name: name.to_string(),
            classes,
            state: TaskState::Training,
            ratio: None,
            head,
            private_biases,
        });
        for p in &mut self.pending_pruned {
            p.iter_mut().for_each(|b| *b = false);
        }
        Ok(id)
    }

    /// Masked SGD over the free weights; prior tasks are only read.
    pub fn train_task(
        &mut self,
        t: TaskId,
        data: &Dataset,
        schedule: &TrainSchedule,
    ) -> Result<()> {
        let ti = self.expect_state(t, TaskState::Training, "train")?;
        schedule.validate()?;
        self.check_data(ti, data)?;
        let active = self.ownership.training_active_mask(t)?;
        let mut update = self.ownership.update_mask(t, Phase::Training)?;
        if let Some(keep) = &self.trainable_layers {
            for (p, m) in update.iter_mut().enumerate() {
                if !keep.contains(&p) {
                    m.iter_mut().for_each(|b| *b = false);
                }
            }
        }
        let mut head_mask = vec![true; self.tasks[ti].head.weight.len()];
        if self.options.filter_mode {
            self.mask_dead_inputs(&mut update, &mut head_mask, false);
        }
        let unit_mask = self.bias_unit_masks(false);
        for epoch in 0..schedule.epochs {
            let lr = schedule.lr_at(epoch);
            let order = self.epoch_order(t, 0, epoch, data.len());
            for rows in order.chunks(schedule.batch_size) {
                self.sgd_step(ti, data, rows, &active, &update, &head_mask, &unit_mask, lr)?;
            }
        }
        Ok(())
    }

    /// One-shot magnitude pruning of the task's free weights, then commit
    /// the survivors to `t`. In filter mode, commits every unit not already
    /// removed by [`pruner::filter_prune_step`].
    pub fn prune_task(&mut self, t: TaskId, ratio: f64) -> Result<()> {
        let ti = self.expect_state(t, TaskState::Training, "prune")?;
        if !(0.0..=1.0).contains(&ratio) {
            return Err(PackError::input(format!(
                "pruning ratio {ratio} outside [0, 1]"
            )));
        }
        let eligible = self.ownership.update_mask(t, Phase::Training)?;
        let mut layers = self.layers.clone();
        let mut ownership = self.ownership.clone();
        let mut recorded_ratio = ratio;
        if self.options.filter_mode {
            let (mut total, mut cut) = (0usize, 0usize);
            for p in 0..self.prunable.len() {
                let span = self.unit_span(p);
                let survivors: Vec<usize> = (0..ownership.layer(p).len())
                    .filter(|&i| eligible[p][i] && !self.pending_pruned[p][i / span])
                    .collect();
                total += eligible[p].iter().filter(|&&b| b).count();
                cut += eligible[p].iter().filter(|&&b| b).count() - survivors.len();
                ownership.commit_survivors(t, p, &survivors)?;
            }
            if total > 0 {
                recorded_ratio = cut as f64 / total as f64;
            }
        } else {
            for (p, &li) in self.prunable.iter().enumerate() {
                let w = layers[li].weight.as_mut().unwrap();
                let decision = pruner::magnitude_select(w, &eligible[p], ratio)?;
                pruner::apply_prune(w, &decision)?;
                let mut pruned = vec![false; w.len()];
                decision.pruned.iter().for_each(|&i| pruned[i] = true);
                let survivors: Vec<usize> = (0..w.len())
                    .filter(|&i| eligible[p][i] && !pruned[i])
                    .collect();
                ownership.commit_survivors(t, p, &survivors)?;
            }
        }
        self.layers = layers;
        self.ownership = ownership;
        let rec = &mut self.tasks[ti];
        rec.ratio = Some(recorded_ratio);
        rec.state = TaskState::PrunedRetraining;
        Ok(())
    }

    /// Fine-tune the task's surviving weights at constant rate, then freeze it.
    pub fn retrain_task(
        &mut self,
        t: TaskId,
        data: &Dataset,
        schedule: &TrainSchedule,
    ) -> Result<()> {
        let ti = self.expect_state(t, TaskState::PrunedRetraining, "retrain")?;
        schedule.validate()?;
        self.check_data(ti, data)?;
        let active = self.ownership.inference_mask(t)?;
        let mut update = self.ownership.update_mask(t, Phase::Retraining)?;
        let mut head_mask = vec![true; self.tasks[ti].head.weight.len()];
        if self.options.filter_mode {
            self.mask_dead_inputs(&mut update, &mut head_mask, true);
        }
        let unit_mask = self.bias_unit_masks(true);
        for epoch in 0..schedule.retrain_epochs {
            let order = self.epoch_order(t, 1, epoch, data.len());
            for rows in order.chunks(schedule.batch_size) {
                self.sgd_step(
                    ti,
                    data,
                    rows,
                    &active,
                    &update,
                    &head_mask,
                    &unit_mask,
                    schedule.retrain_lr,
                )?;
            }
        }
        self.freeze(t)
    }

    /// Mark a retrained task frozen without further optimization.
    pub fn freeze(&mut self, t: TaskId) -> Result<()> {
        let ti = self.expect_state(t, TaskState::PrunedRetraining, "freeze")?;
        self.tasks[ti].state = TaskState::Frozen;
        if t.get() == 1 {
            self.biases_frozen = true;
            self.batchnorm_frozen = true;
        }
        Ok(())
    }

    /// Filter mode: a unit is dead if `filter_prune_step` removed it from
    /// the open task or, once pruning is committed, if it stayed free.
    fn unit_dead(&self, p: usize, u: usize, retraining: bool) -> bool {
        if retraining {
            self.unit_owner(p, u) == FREE
        } else {
            self.pending_pruned[p][u]
        }
    }

    /// Filter mode: dead units' weights, weights reading from dead units and
    /// head columns of dead last-layer units stay at zero.
    fn mask_dead_inputs(&self, update: &mut LayerMasks, head_mask: &mut [bool], retraining: bool) {
        for p in 0..self.prunable.len() {
            let span = self.unit_span(p);
            for i in 0..update[p].len() {
                if !update[p][i] {
                    continue;
                }
                let reads_dead = p > 0
                    && self.unit_dead(
                        p - 1,
                        self.source_unit(p, self.weight_input(p, i)),
                        retraining,
                    );
                if reads_dead || (!retraining && self.pending_pruned[p][i / span]) {
                    update[p][i] = false;
                }
            }
        }
        let last = self.prunable.len() - 1;
        for (k, m) in head_mask.iter_mut().enumerate() {
            if self.unit_dead(last, self.feature_unit(k % self.feature_dim), retraining) {
                *m = false;
            }
        }
    }

    /// Per backbone layer with a bias, which units may update. In filter
    /// mode, dead units keep their zero bias.
    fn bias_unit_masks(&self, retraining: bool) -> Vec<Option<Vec<bool>>> {
        self.layers
            .iter()
            .enumerate()
            .map(|(li, l)| {
                let b = l.bias.as_ref()?;
                let mut m = vec![true; b.len()];
                if self.options.filter_mode {
                    if let Some(p) = self.prunable.iter().position(|&x| x == li) {
                        for (u, bit) in m.iter_mut().enumerate() {
                            *bit = !self.unit_dead(p, u, retraining);
                        }
                    }
                }
                Some(m)
            })
            .collect()
    }

    fn check_data(&self, ti: usize, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(PackError::input("empty dataset"));
        }
        if data.sample_shape() != self.input_shape.as_slice() {
            return Err(PackError::dim(format!(
                "samples of shape {:?} for a network expecting {:?}",
                data.sample_shape(),
                self.input_shape
            )));
        }
        let classes = self.tasks[ti].classes;
        if data.classes != classes {
            return Err(PackError::input(format!(
                "dataset has {} classes but task {} has {classes}",
                data.classes,
                ti + 1
            )));
        }
        Ok(())
    }

    fn epoch_order(&self, t: TaskId, phase: u64, epoch: usize, n: usize) -> Vec<usize> {
        let tag = SHUFFLE_STREAM + ((t.get() as u64) << 8) + (phase << 16) + ((epoch as u64) << 20);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(self.seed, tag));
        order
    }

    fn bias_trainable(&self, ti: usize) -> bool {
        if self.tasks[ti].private_biases.is_some() {
            true
        } else {
            !self.biases_frozen
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn sgd_step(
        &mut self,
        ti: usize,
        data: &Dataset,
        rows: &[usize],
        active: &LayerMasks,
        update: &LayerMasks,
        head_mask: &[bool],
        unit_mask: &[Option<Vec<bool>>],
        lr: f32,
    ) -> Result<()> {
        let (x, labels) = data.batch(rows)?;
        let bn_mode = if self.batchnorm_frozen {
            BnMode::Eval
        } else {
            BnMode::Train
        };
        let mut tape = Tape::new();
        let rec = self.record(
            &mut tape,
            x,
            &Pass {
                task: ti,
                masks: Some(active),
                bn_mode,
                learn: true,
                trace: false,
            },
        )?;
        let loss = tape.softmax_xent(rec.logits, &labels)?;
        tape.backward(loss)?;

        let bias_ok = self.bias_trainable(ti);
        let bn_ok = !self.batchnorm_frozen;
        let private = self.tasks[ti].private_biases.is_some();
        for (p, &li) in self.prunable.iter().enumerate() {
            if let (Some(v), Some(w)) = (rec.weights[li], self.layers[li].weight.as_mut()) {
                if let Some(g) = tape.grad(v) {
                    sgd_masked_step(w, g, lr, &update[p])?;
                }
            }
        }
        for li in 0..self.layers.len() {
            if let Some(v) = rec.biases[li] {
                if let (Some(g), true) = (tape.grad(v), bias_ok) {
                    let mask = unit_mask[li].as_deref().unwrap();
                    let target = if private {
                        self.tasks[ti].private_biases.as_mut().unwrap()[li]
                            .as_mut()
                            .unwrap()
                    } else {
                        self.layers[li].bias.as_mut().unwrap()
                    };
                    sgd_masked_step(target, g, lr, mask)?;
                }
            }
            if let Some(v) = rec.gains[li] {
                if let (Some(g), true) = (tape.grad(v), bn_ok) {
                    let gain = &mut self.layers[li].bn.as_mut().unwrap().gain;
                    sgd_masked_step(gain, g, lr, &vec![true; g.len()])?;
                }
            }
            if let Some(v) = rec.betas[li] {
                let ok = if private { true } else { bias_ok && bn_ok };
                if let (Some(g), true) = (tape.grad(v), ok) {
                    let target = if private {
                        self.tasks[ti].private_biases.as_mut().unwrap()[li]
                            .as_mut()
                            .unwrap()
                    } else {
                        &mut self.layers[li].bn.as_mut().unwrap().beta
                    };
                    sgd_masked_step(target, g, lr, &vec![true; g.len()])?;
                }
            }
        }
        if bn_mode == BnMode::Train {
            for (li, s) in rec.stats.into_iter().enumerate() {
                if let Some(s) = s {
                    self.layers[li].bn.as_mut().unwrap().stats = s;
                }
            }
        }
        let head = &mut self.tasks[ti].head;
        if let Some(g) = tape.grad(rec.head_w) {
            sgd_masked_step(&mut head.weight, g, lr, head_mask)?;
        }
        if let Some(g) = tape.grad(rec.head_b) {
            sgd_masked_step(&mut head.bias, g, lr, &vec![true; g.len()])?;
        }
        Ok(())
    }

    /// Build the forward graph for one batch.
    fn record(&self, tape: &mut Tape, x: Tensor, pass: &Pass) -> Result<Recorded> {
        let n = self.layers.len();
        let task = &self.tasks[pass.task];
        let private = task.private_biases.as_ref();
        let learn_bias = pass.learn && self.bias_trainable(pass.task);
        let learn_bn = pass.learn && !self.batchnorm_frozen;
        let mut weights = vec![None; n];
        let mut biases = vec![None; n];
        let mut gains = vec![None; n];
        let mut betas = vec![None; n];
        let mut stats_out = vec![None; n];
        let mut taps = Vec::with_capacity(self.prunable.len());
        let leaf = |tape: &mut Tape, t: Tensor, learn: bool| {
            if learn {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        let mut h = if pass.trace {
            tape.param(x)
        } else {
            tape.constant(x)
        };
        let mut p = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            let own_bias = private.and_then(|pb| pb[li].as_ref());
            h = match &layer.spec {
                LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. } => {
                    let in_subset = match &self.trainable_layers {
                        Some(keep) => keep.contains(&p),
                        None => true,
                    };
                    let learn_w =
                        pass.learn && (in_subset || task.state == TaskState::PrunedRetraining);
                    let w = leaf(tape, layer.weight.clone().unwrap(), learn_w);
                    weights[li] = Some(w);
                    let w = match pass.masks {
                        Some(m) => tape.mask(w, &m[p])?,
                        None => w,
                    };
                    let b = own_bias
                        .or(layer.bias.as_ref())
                        .map(|b| leaf(tape, b.clone(), learn_bias));
                    biases[li] = b;
                    let y = match layer.spec {
                        LayerSpec::Conv2d {
                            stride, padding, ..
                        } => tape.conv2d(h, w, b, stride, padding)?,
                        _ => tape.linear(h, w, b)?,
                    };
                    taps.push(y);
                    p += 1;
                    y
                }
                LayerSpec::BatchNorm { .. } => {
                    let bn = layer.bn.as_ref().unwrap();
                    let gain = leaf(tape, bn.gain.clone(), learn_bn);
                    let beta_src = own_bias.unwrap_or(&bn.beta);
                    let learn_beta = if own_bias.is_some() {
                        pass.learn
                    } else {
                        learn_bn && learn_bias
                    };
                    let beta = leaf(tape, beta_src.clone(), learn_beta);
                    gains[li] = Some(gain);
                    betas[li] = Some(beta);
                    let mut stats = bn.stats.clone();
                    let y = tape.batchnorm(
                        h,
                        gain,
                        beta,
                        &mut stats,
                        pass.bn_mode,
                        BN_MOMENTUM,
                        BN_EPS,
                    )?;
                    stats_out[li] = Some(stats);
                    y
                }
                LayerSpec::Relu => tape.relu(h),
                LayerSpec::MaxPool2x2 => tape.maxpool2x2(h)?,
                LayerSpec::Flatten => tape.flatten(h),
            };
        }
        let head_w = leaf(tape, task.head.weight.clone(), pass.learn);
        let head_b = leaf(tape, task.head.bias.clone(), pass.learn);
        Ok(Recorded {
            logits: tape.linear(h, head_w, Some(head_b))?,
            weights,
            biases,
            gains,
            betas,
            head_w,
            head_b,
            taps,
            stats: stats_out,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(PackError::dim(format!(
                "input of shape {:?} for a network expecting [B, {:?}]",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Mask a task sees at inference. A task still training also reads the
    /// free weights it is currently fitting.
    pub fn task_mask(&self, t: TaskId) -> Result<LayerMasks> {
        match self.task(t)?.state {
            TaskState::Training => self.ownership.training_active_mask(t),
            _ => self.ownership.inference_mask(t),
        }
    }

    /// Logits of task `t`: weights masked to the task's view, batch norm in
    /// eval mode, task `t`'s head.
    pub fn infer(&self, t: TaskId, x: &Tensor) -> Result<Tensor> {
        let mask = self.task_mask(t)?;
        self.forward(t, x, Some(&mask))
    }

    /// Logits through task `t`'s head with every weight active.
    pub fn forward_unmasked(&self, t: TaskId, x: &Tensor) -> Result<Tensor> {
        self.task(t)?;
        self.forward(t, x, None)
    }

    fn forward(&self, t: TaskId, x: &Tensor, masks: Option<&LayerMasks>) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let rec = self.record(
            &mut tape,
            x.clone(),
            &Pass {
                task: t.index(),
                masks,
                bn_mode: BnMode::Eval,
                learn: false,
                trace: false,
            },
        )?;
        Ok(tape.value(rec.logits).clone())
    }

    /// Deterministic logits for regression comparison.
    pub fn snapshot(&self, t: TaskId, probes: &Tensor) -> Result<Tensor> {
        self.infer(t, probes)
    }

    /// Forward and loss for one batch in the task's training view, kept on
    /// the tape so activation gradients can be read back.
    pub fn trace(
        &self,
        t: TaskId,
        x: &Tensor,
        labels: &[usize],
    ) -> Result<pruner::ActivationTrace> {
        self.check_input(x)?;
        let mask = self.task_mask(t)?;
        let mut tape = Tape::new();
        let bn_mode = if self.batchnorm_frozen {
            BnMode::Eval
        } else {
            BnMode::Train
        };
        let rec = self.record(
            &mut tape,
            x.clone(),
            &Pass {
                task: t.index(),
                masks: Some(&mask),
                bn_mode,
                learn: false,
                trace: true,
            },
        )?;
        let taps = rec.taps.clone();
        let loss = tape.softmax_xent(rec.logits, labels)?;
        Ok(pruner::ActivationTrace::new(tape, taps, loss))
    }

    /// Top-1 error in percent over a dataset, evaluated in chunks.
    pub fn error_rate(&self, t: TaskId, data: &Dataset, exec: crate::exec::Exec) -> Result<f32> {
        let chunk = 256;
        let starts: Vec<usize> = (0..data.len()).step_by(chunk).collect();
        let wrong = exec.map(&starts, |&s| -> Result<usize> {
            let e = (s + chunk).min(data.len());
            let x = data.inputs.slice_rows(s, e)?;
            let logits = self.infer(t, &x)?;
            Ok(argmax_rows(&logits)
                .iter()
                .zip(&data.labels[s..e])
                .filter(|(p, l)| p != l)
                .count())
        });
        let wrong: usize = wrong
            .into_iter()
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        Ok(100.0 * wrong as f32 / data.len() as f32)
    }

    /// Mean cross-entropy of task `t` over a dataset.
    pub fn loss(&self, t: TaskId, data: &Dataset) -> Result<f32> {
        let chunk = 256;
        let mut total = 0.0f64;
        for s in (0..data.len()).step_by(chunk) {
            let e = (s + chunk).min(data.len());
            let logits = self.infer(t, &data.inputs.slice_rows(s, e)?)?;
            let l = crate::tensor::softmax_xent(&logits, &data.labels[s..e])?;
            total += l as f64 * (e - s) as f64;
        }
        Ok((total / data.len() as f64) as f32)
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
