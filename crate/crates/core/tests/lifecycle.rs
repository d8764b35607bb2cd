use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskpack_core::data::Dataset;
use taskpack_core::lifecycle::TaskState;
use taskpack_core::packed::FREE;
use taskpack_core::pruner::budget_report;
use taskpack_core::tensor::{LayerSpec, Tensor};
use taskpack_core::{NetworkOptions, PackError, PackedNetwork, TaskId, TrainSchedule};

fn backbone() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 4,
            kernel: 3,
            stride: 1,
            padding: 1,
            has_bias: true,
        },
        LayerSpec::BatchNorm { channels: 4 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Flatten,
        LayerSpec::Linear {
            in_features: 64,
            out_features: 12,
            has_bias: true,
        },
        LayerSpec::Relu,
    ]
}

fn net(options: NetworkOptions) -> PackedNetwork {
    PackedNetwork::new(backbone(), vec![1, 8, 8], options, 7).unwrap()
}

/// Random inputs whose label is decided by the sign of a fixed projection.
fn dataset(seed: u64, n: usize, classes: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut data = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s: f32 = x.iter().zip(&proj).map(|(a, b)| a * b).sum();
        let l = ((s * 1.5 + classes as f32 / 2.0).floor().max(0.0) as usize).min(classes - 1);
        labels.push(l);
        data.extend(x);
    }
    Dataset::new(
        Tensor::new(vec![n, 1, 8, 8], data).unwrap(),
        labels,
        classes,
    )
    .unwrap()
}

fn probes(seed: u64, n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        vec![n, 1, 8, 8],
        (0..n * 64).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn schedule() -> TrainSchedule {
    TrainSchedule {
        epochs: 2,
        lr: 0.05,
        decay: 0.1,
        decay_epoch: 1,
        retrain_epochs: 1,
        retrain_lr: 0.01,
        batch_size: 16,
    }
}

fn full_task(net: &mut PackedNetwork, name: &str, data: &Dataset, ratio: f64) -> TaskId {
    let t = net.add_task(name, data.classes).unwrap();
    net.train_task(t, data, &schedule()).unwrap();
    net.prune_task(t, ratio).unwrap();
    net.retrain_task(t, data, &schedule()).unwrap();
    t
}

fn bn_and_bias_bytes(net: &PackedNetwork) -> Vec<u32> {
    let mut out = Vec::new();
    for l in net.layers() {
        for t in [&l.bias].into_iter().flatten() {
            out.extend(t.data().iter().map(|v| v.to_bits()));
        }
        if let Some(bn) = &l.bn {
            for v in bn
                .gain
                .data()
                .iter()
                .chain(bn.beta.data())
                .chain(&bn.stats.running_mean)
                .chain(&bn.stats.running_var)
            {
                out.push(v.to_bits());
            }
        }
    }
    out
}

#[test]
fn zero_forgetting_across_later_tasks() {
    let mut n = net(NetworkOptions::default());
    let p = probes(99, 32);
    let t1 = full_task(&mut n, "a", &dataset(1, 96, 3), 0.5);
    let snap1 = n.snapshot(t1, &p).unwrap();
    let frozen = bn_and_bias_bytes(&n);
    let t2 = full_task(&mut n, "b", &dataset(2, 96, 4), 0.75);
    assert!(n.snapshot(t1, &p).unwrap().bit_eq(&snap1));
    let snap2 = n.snapshot(t2, &p).unwrap();
    full_task(&mut n, "c", &dataset(3, 96, 2), 0.75);
    assert!(n.snapshot(t1, &p).unwrap().bit_eq(&snap1));
    assert!(n.snapshot(t2, &p).unwrap().bit_eq(&snap2));
    assert_eq!(bn_and_bias_bytes(&n), frozen);
}

#[test]
fn masking_equals_physical_zeroing() {
    let mut n = net(NetworkOptions::default());
    let t1 = full_task(&mut n, "a", &dataset(1, 64, 3), 0.5);
    full_task(&mut n, "b", &dataset(2, 64, 3), 0.5);
    let p = probes(5, 8);
    let masked = n.infer(t1, &p).unwrap();
    let mut zeroed = n.clone();
    let masks = n.ownership().inference_mask(t1).unwrap();
    // zero every weight task 1 does not own, then run with every weight live
    for (k, &li) in n.prunable_layers().iter().enumerate() {
        let w = zeroed.layer_weight_mut(li).unwrap();
        for (v, &keep) in w.data_mut().iter_mut().zip(&masks[k]) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    assert!(zeroed.forward_unmasked(t1, &p).unwrap().bit_eq(&masked));
}

#[test]
fn single_task_infer_is_unmasked_forward_after_full_commit() {
    let mut n = net(NetworkOptions::default());
    let t = full_task(&mut n, "a", &dataset(1, 64, 3), 0.0);
    assert_eq!(n.ownership().free_count(), 0);
    let p = probes(3, 8);
    assert!(n
        .infer(t, &p)
        .unwrap()
        .bit_eq(&n.forward_unmasked(t, &p).unwrap()));
}

#[test]
fn state_machine_rejects_out_of_order_calls() {
    let mut n = net(NetworkOptions::default());
    let d = dataset(1, 32, 3);
    assert_eq!(n.add_task("a", 3).unwrap(), TaskId::new(1).unwrap());
    assert!(matches!(n.add_task("b", 3), Err(PackError::State(_))));
    let t = TaskId::new(1).unwrap();
    assert!(matches!(
        n.retrain_task(t, &d, &schedule()),
        Err(PackError::State(_))
    ));
    let before = n.clone();
    assert!(matches!(n.prune_task(t, 1.5), Err(PackError::Input(_))));
    assert_eq!(n, before);
    n.prune_task(t, 0.5).unwrap();
    assert!(matches!(
        n.train_task(t, &d, &schedule()),
        Err(PackError::State(_))
    ));
    assert!(matches!(n.prune_task(t, 0.5), Err(PackError::State(_))));
    assert!(matches!(
        n.infer(TaskId::new(2).unwrap(), &probes(0, 1)),
        Err(PackError::Lookup(_))
    ));
    let empty = Dataset::new(Tensor::zeros(vec![1, 1, 8, 8]), vec![0], 3).unwrap();
    n.retrain_task(t, &empty, &schedule()).unwrap();
    assert_eq!(n.task(t).unwrap().state, TaskState::Frozen);
    assert!(n.biases_frozen() && n.batchnorm_frozen());
}

#[test]
fn capacity_error_when_no_free_weights() {
    let mut n = net(NetworkOptions::default());
    full_task(&mut n, "a", &dataset(1, 32, 3), 0.0);
    assert!(matches!(n.add_task("b", 3), Err(PackError::Capacity(_))));
}

#[test]
fn zero_epochs_leave_weights_unchanged() {
    let mut n = net(NetworkOptions::default());
    let t = n.add_task("a", 3).unwrap();
    let before = n.clone();
    let s = TrainSchedule {
        epochs: 0,
        retrain_epochs: 0,
        ..schedule()
    };
    n.train_task(t, &dataset(1, 32, 3), &s).unwrap();
    assert_eq!(n, before);
}

#[test]
fn prune_commits_survivors_and_counts_exactly() {
    let mut n = net(NetworkOptions::default());
    let d = dataset(1, 64, 3);
    let t = n.add_task("a", 3).unwrap();
    n.train_task(t, &d, &schedule()).unwrap();
    n.prune_task(t, 0.5).unwrap();
    let sizes: Vec<usize> = n.ownership().layer_sizes();
    let b = budget_report(n.ownership());
    let expect_free: u64 = sizes.iter().map(|&s| (s / 2) as u64).sum();
    assert_eq!(b.free, expect_free);
    assert_eq!(b.owned[0] + b.free, b.total);
    // every free weight is exactly zero after pruning
    for (k, &li) in n.prunable_layers().iter().enumerate() {
        let w = n.layers()[li].weight.as_ref().unwrap();
        for (v, &o) in w.data().iter().zip(n.ownership().layer(k)) {
            if o == FREE {
                assert_eq!(v.to_bits(), 0);
            }
        }
    }
}

#[test]
fn retraining_changes_own_snapshot() {
    let mut n = net(NetworkOptions::default());
    let d = dataset(1, 64, 3);
    let t = n.add_task("a", 3).unwrap();
    n.train_task(t, &d, &schedule()).unwrap();
    n.prune_task(t, 0.5).unwrap();
    let p = probes(2, 8);
    let before = n.snapshot(t, &p).unwrap();
    n.retrain_task(t, &d, &schedule()).unwrap();
    assert!(!n.snapshot(t, &p).unwrap().bit_eq(&before));
}

#[test]
fn separate_biases_are_private_and_counted() {
    let mut n = net(NetworkOptions {
        separate_bias: true,
        filter_mode: false,
    });
    let p = probes(4, 16);
    let t1 = full_task(&mut n, "a", &dataset(1, 64, 3), 0.5);
    let s1 = n.snapshot(t1, &p).unwrap();
    let t2 = full_task(&mut n, "b", &dataset(2, 64, 3), 0.5);
    assert!(n.snapshot(t1, &p).unwrap().bit_eq(&s1));
    let private = n.task(t2).unwrap().private_biases.as_ref().unwrap();
    // conv bias 4 + bn beta 4 + linear bias 12
    let len: usize = private.iter().flatten().map(|b| b.len()).sum();
    assert_eq!(len, 20);
    assert_eq!(n.private_bias_bytes(), 80);
    assert!(n.task(t1).unwrap().private_biases.is_none());
}

#[test]
fn classifier_only_training_touches_no_backbone_weight() {
    let mut n = net(NetworkOptions::default());
    full_task(&mut n, "a", &dataset(1, 64, 3), 0.5);
    n.set_trainable_layers(Some(vec![])).unwrap();
    let before: Vec<Tensor> = n.layers().iter().filter_map(|l| l.weight.clone()).collect();
    let t = n.add_task("b", 3).unwrap();
    n.train_task(t, &dataset(2, 64, 3), &schedule()).unwrap();
    let after: Vec<Tensor> = n.layers().iter().filter_map(|l| l.weight.clone()).collect();
    assert!(before.iter().zip(&after).all(|(a, b)| a.bit_eq(b)));
    assert!(n.set_trainable_layers(Some(vec![9])).is_err());
}
