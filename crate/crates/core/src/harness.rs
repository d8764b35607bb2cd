//! Experiment orchestration: packing sequences over synthetic tasks and the
//! ordering, pruning-ratio, layer-subset and bias studies built on them.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, Generator, TaskData, TaskDatasetSpec};
use crate::error::{PackError, Result};
use crate::exec::Exec;
use crate::lifecycle::{NetworkOptions, PackedNetwork, TrainSchedule};
use crate::packed::{overhead_bytes, TaskId, FREE};
use crate::pruner::{budget_report, filter_prune_step, prune_count, taylor_filter_scores};
use crate::report::{Cell, ReportRow};
use crate::tensor::{LayerSpec, Tensor};

pub fn default_backbone() -> Vec<LayerSpec> {
    let conv = |i, o| LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        stride: 1,
        padding: 1,
        has_bias: true,
    };
    vec![
        conv(1, 8),
        LayerSpec::BatchNorm { channels: 8 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        conv(8, 16),
        LayerSpec::BatchNorm { channels: 16 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Flatten,
        LayerSpec::Linear {
            in_features: 400,
            out_features: 64,
            has_bias: true,
        },
        LayerSpec::Relu,
    ]
}

/// Three gratings tasks over disjoint orientation bands.
pub fn default_tasks() -> Vec<TaskDatasetSpec> {
    (0..3)
        .map(|k| TaskDatasetSpec {
            name: format!("gratings{}", k + 1),
            generator: Generator::Gratings {
                band_start: 60.0 * k as f32,
                band_width: 60.0,
                frequency: 3.0,
                phase_jitter: 0.5,
                noise: 0.3,
            },
            classes: 5,
            train_samples: 2000,
            eval_samples: 1000,
            input_shape: [1, 20, 20],
            seed: 100 + k as u64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: Vec<LayerSpec>,
    pub input_shape: [usize; 3],
    pub tasks: Vec<TaskDatasetSpec>,
    /// Order in which `tasks` are packed; `None` is the listed order.
    pub ordering: Option<Vec<usize>>,
    /// Pruning ratio for the task packed at each position.
    pub ratios: Vec<f64>,
    pub schedule: TrainSchedule,
    pub seeds: Vec<u64>,
    pub separate_bias: bool,
    /// Prunable-layer indices that new tasks may train; `None` is all.
    pub trainable_layers: Option<Vec<usize>>,
    pub filter_pruning: bool,
    /// Samples used to rank units in filter-pruning mode.
    pub filter_batch: usize,
    /// Eval inputs per task used for zero-forgetting snapshots.
    pub probe_count: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            backbone: default_backbone(),
            input_shape: [1, 20, 20],
            tasks: default_tasks(),
            ordering: None,
            ratios: vec![0.5, 0.75, 0.75],
            schedule: TrainSchedule::default(),
            seeds: vec![0],
            separate_bias: false,
            trainable_layers: None,
            filter_pruning: false,
            filter_batch: 128,
            probe_count: 256,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| PackError::input(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ordering(&self) -> Vec<usize> {
        self.ordering
            .clone()
            .unwrap_or_else(|| (0..self.tasks.len()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tasks.len();
        if n == 0 {
            return Err(PackError::input("config lists no tasks"));
        }
        let mut seen = vec![false; n];
        let ord = self.ordering();
        for &i in &ord {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(PackError::input(format!(
                    "ordering {ord:?} is not a permutation of 0..{n}"
                )));
            }
        }
        if ord.len() != n {
            return Err(PackError::input(format!(
                "ordering {ord:?} is not a permutation of 0..{n}"
            )));
        }
        if self.ratios.len() != n {
            return Err(PackError::input(format!(
                "{} ratios for {n} tasks",
                self.ratios.len()
            )));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(PackError::input(format!(
                "pruning ratio {r} outside [0, 1]"
            )));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.input_shape != self.input_shape {
                return Err(PackError::input(format!(
                    "task {} has input shape {:?}, network expects {:?}",
                    t.name, t.input_shape, self.input_shape
                )));
            }
            if self.tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(PackError::input(format!(
                    "duplicate task name {:?}",
                    t.name
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(PackError::input("config lists no seeds"));
        }
        if self.probe_count == 0 {
            return Err(PackError::input("probe count must be positive"));
        }
        self.schedule.validate()
    }

    pub fn options(&self) -> NetworkOptions {
        NetworkOptions {
            separate_bias: self.separate_bias,
            filter_mode: self.filter_pruning,
        }
    }

    pub fn build_network(&self, seed: u64) -> Result<PackedNetwork> {
        let mut net = PackedNetwork::new(
            self.backbone.clone(),
            self.input_shape.to_vec(),
            self.options(),
            seed,
        )?;
        net.set_trainable_layers(self.trainable_layers.clone())?;
        Ok(net)
    }

    pub fn task_spec(&self, name: &str) -> Result<&TaskDatasetSpec> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| PackError::Lookup(format!("config has no task {name:?}")))
    }
}

/// Data for a task under a given run seed. The run seed perturbs the
/// spec seed so repeated runs see fresh samples.
pub fn task_data(spec: &TaskDatasetSpec, run_seed: u64) -> Result<TaskData> {
    let mut s = spec.clone();
    s.seed = spec
        .seed
        .wrapping_add(run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    generate_dataset(&s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub exec: Exec,
    /// Record wall-clock time per task. Off by default so reports stay
    /// byte-identical between runs.
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub ordering: String,
    pub task: String,
    pub position: usize,
    pub ratio: f64,
    /// Top-1 eval error (percent) at the end of the sequence.
    pub error: f32,
    pub pre_prune_error: f32,
    pub post_prune_error: f32,
    pub post_retrain_error: f32,
    pub owned_params: u64,
    pub free_params: u64,
    pub total_params: u64,
    pub mask_overhead_bytes: u64,
    pub bias_overhead_bytes: u64,
    pub zero_forgetting: bool,
    pub wall_ms: Option<f64>,
}

impl ReportRow for MetricsRow {
    fn columns() -> &'static [&'static str] {
        &[
            "seed",
            "ordering",
            "task",
            "position",
            "ratio",
            "error",
            "pre_prune_error",
            "post_prune_error",
            "post_retrain_error",
            "owned_params",
            "free_params",
            "total_params",
            "mask_overhead_bytes",
            "bias_overhead_bytes",
            "zero_forgetting",
            "wall_ms",
        ]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            self.seed.into(),
            self.ordering.as_str().into(),
            self.task.as_str().into(),
            self.position.into(),
            self.ratio.into(),
            self.error.into(),
            self.pre_prune_error.into(),
            self.post_prune_error.into(),
            self.post_retrain_error.into(),
            self.owned_params.into(),
            self.free_params.into(),
            self.total_params.into(),
            self.mask_overhead_bytes.into(),
            self.bias_overhead_bytes.into(),
            self.zero_forgetting.into(),
            self.wall_ms.into(),
        ]
    }
}

/// Eval errors around one task's prune.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseErrors {
    pub pre_prune: f32,
    pub post_prune: f32,
    pub post_retrain: f32,
    pub post_prune_loss: f32,
    pub post_retrain_loss: f32,
}

/// Add, train, prune and retrain one task. A ratio of zero prunes nothing,
/// so retraining is skipped and the task is frozen as trained.
pub fn pack_task(
    net: &mut PackedNetwork,
    name: &str,
    data: &TaskData,
    ratio: f64,
    cfg: &ExperimentConfig,
    exec: Exec,
) -> Result<(TaskId, PhaseErrors)> {
    let t = net.add_task(name, data.train.classes)?;
    net.train_task(t, &data.train, &cfg.schedule)?;
    let pre_prune = net.error_rate(t, &data.eval, exec)?;
    if net.options().filter_mode {
        filter_prune(net, t, data, ratio, cfg.filter_batch)?;
    }
    net.prune_task(t, ratio)?;
    let post_prune = net.error_rate(t, &data.eval, exec)?;
    let post_prune_loss = net.loss(t, &data.eval)?;
    if ratio > 0.0 {
        net.retrain_task(t, &data.train, &cfg.schedule)?;
    } else {
        net.freeze(t)?;
    }
    let post_retrain = net.error_rate(t, &data.eval, exec)?;
    let post_retrain_loss = net.loss(t, &data.eval)?;
    Ok((
        t,
        PhaseErrors {
            pre_prune,
            post_prune,
            post_retrain,
            post_prune_loss,
            post_retrain_loss,
        },
    ))
}

/// Rank the open task's free units on one batch and remove the weakest
/// `floor(ratio * free units)`, keeping at least one. Call before
/// [`PackedNetwork::prune_task`] on a filter-mode network.
pub fn filter_prune(
    net: &mut PackedNetwork,
    t: TaskId,
    data: &TaskData,
    ratio: f64,
    batch: usize,
) -> Result<()> {
    let b = data.train.head(batch.max(1))?;
    let mut trace = net.trace(t, &b.inputs, &b.labels)?;
    trace.backward()?;
    let scores = taylor_filter_scores(&trace)?;
    let free_units: usize = (0..net.prunable_layers().len())
        .map(|p| {
            (0..net.units(p))
                .filter(|&u| net.unit_owner(p, u) == FREE)
                .count()
        })
        .sum();
    let n = prune_count(ratio, free_units).min(free_units.saturating_sub(1));
    filter_prune_step(net, &scores, n)?;
    Ok(())
}

fn ordering_label(cfg: &ExperimentConfig, ord: &[usize]) -> String {
    ord.iter()
        .map(|&i| cfg.tasks[i].name.as_str())
        .collect::<Vec<_>>()
        .join(">")
}

/// Pack every task in `ordering`, checking after each addition that all
/// earlier tasks still produce bitwise-identical logits on their probes.
pub fn run_sequence(
    cfg: &ExperimentConfig,
    seed: u64,
    ordering: &[usize],
    opts: RunOptions,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let mut net = cfg.build_network(seed)?;
    let data: Vec<TaskData> = cfg
        .tasks
        .iter()
        .map(|s| task_data(s, seed))
        .collect::<Result<_>>()?;
    let label = ordering_label(cfg, ordering);
    let mut snapshots: Vec<(TaskId, usize, Tensor)> = Vec::new();
    let mut rows = Vec::with_capacity(ordering.len());
    for (pos, &ti) in ordering.iter().enumerate() {
        let spec = &cfg.tasks[ti];
        let started = Instant::now();
        let (t, phases) = pack_task(
            &mut net,
            &spec.name,
            &data[ti],
            cfg.ratios[pos],
            cfg,
            opts.exec,
        )
        .map_err(|e| context(e, &spec.name))?;
        let wall = started.elapsed().as_secs_f64() * 1e3;
        for (prev, prev_ti, snap) in &snapshots {
            let probes = probes(&data[*prev_ti], cfg.probe_count)?;
            if !net.snapshot(*prev, &probes)?.bit_eq(snap) {
                return Err(PackError::Forgetting(format!(
                    "task {} changed after packing {}",
                    cfg.tasks[*prev_ti].name, spec.name
                )));
            }
        }
        snapshots.push((
            t,
            ti,
            net.snapshot(t, &probes(&data[ti], cfg.probe_count)?)?,
        ));
        let ledger = budget_report(net.ownership());
        rows.push(MetricsRow {
            seed,
            ordering: label.clone(),
            task: spec.name.clone(),
            position: pos + 1,
            ratio: cfg.ratios[pos],
            error: f32::NAN,
            pre_prune_error: phases.pre_prune,
            post_prune_error: phases.post_prune,
            post_retrain_error: phases.post_retrain,
            owned_params: ledger.owned[t.get() as usize - 1],
            free_params: ledger.free,
            total_params: ledger.total,
            mask_overhead_bytes: 0,
            bias_overhead_bytes: 0,
            zero_forgetting: true,
            wall_ms: opts.timing.then_some(wall),
        });
    }
    let map = net.ownership();
    let mask_bytes = overhead_bytes(map.total() as u64, map.states().len());
    for (row, (t, ti, _)) in rows.iter_mut().zip(&snapshots) {
        row.error = net.error_rate(*t, &data[*ti].eval, opts.exec)?;
        row.mask_overhead_bytes = mask_bytes;
        row.bias_overhead_bytes = net.private_bias_bytes();
    }
    Ok(rows)
}

fn context(e: PackError, task: &str) -> PackError {
    match e {
        PackError::State(m) => PackError::State(format!("{task}: {m}")),
        PackError::Input(m) => PackError::Input(format!("{task}: {m}")),
        other => other,
    }
}

fn probes(data: &TaskData, n: usize) -> Result<Tensor> {
    Ok(data.eval.head(n)?.inputs)
}

/// The configured sequence for every configured seed.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let ord = cfg.ordering();
    let runs = opts.exec.map(&cfg.seeds, |&s| {
        run_sequence(
            cfg,
            s,
            &ord,
            RunOptions {
                exec: Exec::Sequential,
                ..opts
            },
        )
    });
    Ok(runs.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut cur: Vec<usize> = (0..n).collect();
    let mut out = vec![cur.clone()];
    loop {
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
        cur.swap(i - 1, j);
        cur[i..].reverse();
        out.push(cur.clone());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingRow {
    pub ordering: String,
    pub task: String,
    pub position: usize,
    pub mean_error: f32,
    pub runs: usize,
}

impl ReportRow for OrderingRow {
    fn columns() -> &'static [&'static str] {
        &["ordering", "task", "position", "mean_error", "runs"]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            self.ordering.as_str().into(),
            self.task.as_str().into(),
            self.position.into(),
            self.mean_error.into(),
            self.runs.into(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRow {
    pub task: String,
    pub position: usize,
    pub mean_error: f32,
    pub runs: usize,
}

impl ReportRow for PositionRow {
    fn columns() -> &'static [&'static str] {
        &["task", "position", "mean_error", "runs"]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            self.task.as_str().into(),
            self.position.into(),
            self.mean_error.into(),
            self.runs.into(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderingStudy {
    pub runs: Vec<MetricsRow>,
    /// One row per (ordering, task), averaged over seeds.
    pub by_ordering: Vec<OrderingRow>,
    /// Mean error of each task at each position, plus `"*"` rows pooling all tasks.
    pub by_position: Vec<PositionRow>,
}

impl OrderingStudy {
    pub fn mean_at(&self, task: &str, position: usize) -> Option<f32> {
        self.by_position
            .iter()
            .find(|r| r.task == task && r.position == position)
            .map(|r| r.mean_error)
    }
}

fn mean(xs: impl IntoIterator<Item = f32>) -> (f32, usize) {
    let (s, n) = xs
        .into_iter()
        .fold((0.0f64, 0usize), |(s, n), x| (s + x as f64, n + 1));
    (
        if n == 0 {
            f32::NAN
        } else {
            (s / n as f64) as f32
        },
        n,
    )
}

pub fn run_ordering_study(cfg: &ExperimentConfig, opts: RunOptions) -> Result<OrderingStudy> {
    cfg.validate()?;
    let n = cfg.tasks.len();
    let jobs: Vec<(Vec<usize>, u64)> = permutations(n)
        .into_iter()
        .flat_map(|o| cfg.seeds.iter().map(move |&s| (o.clone(), s)))
        .collect();
    let inner = RunOptions {
        exec: Exec::Sequential,
        ..opts
    };
    let runs = opts
        .exec
        .map(&jobs, |(o, s)| run_sequence(cfg, *s, o, inner));
    let runs: Vec<MetricsRow> = runs.into_iter().collect::<Result<Vec<_>>>()?.concat();
    let mut by_ordering = Vec::new();
    for o in permutations(n) {
        let label = ordering_label(cfg, &o);
        for (pos, &ti) in o.iter().enumerate() {
            let name = &cfg.tasks[ti].name;
            let (m, k) = mean(
                runs.iter()
                    .filter(|r| r.ordering == label && &r.task == name)
                    .map(|r| r.error),
            );
            by_ordering.push(OrderingRow {
                ordering: label.clone(),
                task: name.clone(),
                position: pos + 1,
                mean_error: m,
                runs: k,
            });
        }
    }
    let mut by_position = Vec::new();
    for name in cfg.tasks.iter().map(|t| t.name.as_str()).chain(["*"]) {
        for pos in 1..=n {
            let (m, k) = mean(
                runs.iter()
                    .filter(|r| (name == "*" || r.task == name) && r.position == pos)
                    .map(|r| r.error),
            );
            by_position.push(PositionRow {
                task: name.to_string(),
                position: pos,
                mean_error: m,
                runs: k,
            });
        }
    }
    Ok(OrderingStudy {
        runs,
        by_ordering,
        by_position,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub seed: u64,
    pub task: String,
    pub ratio: f64,
    pub pre_prune_error: f32,
    pub post_prune_error: f32,
    pub post_retrain_error: f32,
    pub post_prune_loss: f32,
    pub post_retrain_loss: f32,
}

impl ReportRow for RatioRow {
    fn columns() -> &'static [&'static str] {
        &[
            "seed",
            "task",
            "ratio",
            "pre_prune_error",
            "post_prune_error",
            "post_retrain_error",
            "post_prune_loss",
            "post_retrain_loss",
        ]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            self.seed.into(),
            self.task.as_str().into(),
            self.ratio.into(),
            self.pre_prune_error.into(),
            self.post_prune_error.into(),
            self.post_retrain_error.into(),
            self.post_prune_loss.into(),
            self.post_retrain_loss.into(),
        ]
    }
}

pub const STUDY_RATIOS: [f64; 3] = [0.5, 0.75, 0.9];

/// Pack the first task at its configured ratio, then pack the second task
/// at each study ratio from that same starting point.
pub fn run_ratio_study(
    cfg: &ExperimentConfig,
    ratios: &[f64],
    opts: RunOptions,
) -> Result<Vec<RatioRow>> {
    cfg.validate()?;
    let ord = cfg.ordering();
    if ord.len() < 2 {
        return Err(PackError::input("the ratio study needs at least two tasks"));
    }
    let (first, second) = (&cfg.tasks[ord[0]], &cfg.tasks[ord[1]]);
    let runs = opts.exec.map(&cfg.seeds, |&seed| -> Result<Vec<RatioRow>> {
        let mut base = cfg.build_network(seed)?;
        let d1 = task_data(first, seed)?;
        pack_task(
            &mut base,
            &first.name,
            &d1,
            cfg.ratios[0],
            cfg,
            Exec::Sequential,
        )?;
        let d2 = task_data(second, seed)?;
        ratios
            .iter()
            .map(|&r| {
                let mut net = base.clone();
                let (_, ph) = pack_task(&mut net, &second.name, &d2, r, cfg, Exec::Sequential)?;
                Ok(RatioRow {
                    seed,
                    task: second.name.clone(),
                    ratio: r,
                    pre_prune_error: ph.pre_prune,
                    post_prune_error: ph.post_prune,
                    post_retrain_error: ph.post_retrain,
                    post_prune_loss: ph.post_prune_loss,
                    post_retrain_loss: ph.post_retrain_loss,
                })
            })
            .collect()
    });
    Ok(runs.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub seed: u64,
    pub task: String,
    pub layers: String,
    pub error: f32,
}

impl ReportRow for LayerRow {
    fn columns() -> &'static [&'static str] {
        &["seed", "task", "layers", "error"]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            self.seed.into(),
            self.task.as_str().into(),
            self.layers.as_str().into(),
            self.error.into(),
        ]
    }
}

/// Named trainable-layer sets: classifier only, fully connected only, all.
pub fn default_layer_sets(cfg: &ExperimentConfig) -> Vec<(String, Option<Vec<usize>>)> {
    let fc: Vec<usize> = cfg
        .backbone
        .iter()
        .filter(|l| l.is_prunable())
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::Linear { .. }))
        .map(|(p, _)| p)
        .collect();
    vec![
        ("classifier".into(), Some(Vec::new())),
        ("fc".into(), Some(fc)),
        ("all".into(), None),
    ]
}

/// Pack the first task, then train the second with only the named layers'
/// free weights trainable. No pruning follows.
pub fn run_layer_ablation(
    cfg: &ExperimentConfig,
    sets: &[(String, Option<Vec<usize>>)],
    opts: RunOptions,
) -> Result<Vec<LayerRow>> {
    cfg.validate()?;
    let ord = cfg.ordering();
    if ord.len() < 2 {
        return Err(PackError::input(
            "the layer ablation needs at least two tasks",
        ));
    }
    let (first, second) = (&cfg.tasks[ord[0]], &cfg.tasks[ord[1]]);
    let runs = opts.exec.map(&cfg.seeds, |&seed| -> Result<Vec<LayerRow>> {
        let mut base = cfg.build_network(seed)?;
        base.set_trainable_layers(None)?;
        let d1 = task_data(first, seed)?;
        pack_task(
            &mut base,
            &first.name,
            &d1,
            cfg.ratios[0],
            cfg,
            Exec::Sequential,
        )?;
        let d2 = task_data(second, seed)?;
        sets.iter()
            .map(|(label, layers)| {
                let mut net = base.clone();
                net.set_trainable_layers(layers.clone())?;
                let t = net.add_task(&second.name, d2.train.classes)?;
                net.train_task(t, &d2.train, &cfg.schedule)?;
                Ok(LayerRow {
                    seed,
                    task: second.name.clone(),
                    layers: label.clone(),
                    error: net.error_rate(t, &d2.eval, Exec::Sequential)?,
                })
            })
            .collect()
    });
    Ok(runs.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub seed: u64,
    pub task: String,
    pub position: usize,
    pub shared_error: f32,
    pub separate_error: f32,
    pub abs_diff: f32,
    pub separate_bias_bytes: u64,
}

impl ReportRow for BiasRow {
    fn columns() -> &'static [&'static str] {
        &[
            "seed",
            "task",
            "position",
            "shared_error",
            "separate_error",
            "abs_diff",
            "separate_bias_bytes",
        ]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            self.seed.into(),
            self.task.as_str().into(),
            self.position.into(),
            self.shared_error.into(),
            self.separate_error.into(),
            self.abs_diff.into(),
            self.separate_bias_bytes.into(),
        ]
    }
}

/// The configured sequence twice per seed: shared biases, then private ones.
pub fn run_bias_ablation(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Vec<BiasRow>> {
    let shared = ExperimentConfig {
        separate_bias: false,
        ..cfg.clone()
    };
    let separate = ExperimentConfig {
        separate_bias: true,
        ..cfg.clone()
    };
    let a = run_experiment(&shared, opts)?;
    let b = run_experiment(&separate, opts)?;
    Ok(a.iter()
        .zip(&b)
        .map(|(x, y)| BiasRow {
            seed: x.seed,
            task: x.task.clone(),
            position: x.position,
            shared_error: x.error,
            separate_error: y.error,
            abs_diff: (x.error - y.error).abs(),
            separate_bias_bytes: y.bias_overhead_bytes,
        })
        .collect())
}
