//! Central finite-difference checks of every tape operation.
//!
//! Each case builds `loss = sum(R ⊙ f(inputs))` for a fixed random `R`,
//! so gradients are non-trivial even for normalizing layers. The oracle
//! perturbs one input element at a time and re-runs the forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskpack_core::tensor::{BnMode, BnStats, Tape, Tensor, Var};

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-5;
/// Denominator floor for components whose true gradient is near zero.
const FLOOR: f64 = 1e-3;
const INSTANCES: u64 = 20;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero so ReLU kinks sit far from every probe.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let m = rng.random_range(0.05..1.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
    .unwrap()
}

/// Distinct values spaced 0.01 apart so max-pool winners never flip under a probe.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn weighted_loss(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Var {
    let flat = tape.flatten(y);
    let cols = tape.value(flat).shape()[1];
    let w = tape.constant(Tensor::new(vec![1, cols], weights.data()[..cols].to_vec()).unwrap());
    let proj = tape.linear(flat, w, None).unwrap();
    tape.sum(proj)
}

fn eval(inputs: &[Tensor<f64>], build: &Build) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let value = tape.value(loss).data()[0];
    tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect();
    (value, grads)
}

fn check(name: &str, inputs: Vec<Tensor<f64>>, build: &Build) {
    let (_, analytic) = eval(&inputs, build);
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus, build).0 - eval(&minus, build).0) / (2.0 * STEP);
            let a = analytic[k][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            assert!(
                rel <= REL_TOL,
                "{name}: input {k} element {i}: analytic {a} vs numeric {numeric} (rel {rel:e})"
            );
        }
    }
}

fn for_instances(seed: u64, mut f: impl FnMut(&mut ChaCha8Rng)) {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + i);
        f(&mut rng);
    }
}

#[test]
fn linear_gradients() {
    for_instances(1, |rng| {
        let x = random_tensor(rng, &[3, 4]);
        let w = random_tensor(rng, &[2, 4]);
        let b = random_tensor(rng, &[2]);
        let r = random_tensor(rng, &[6]);
        check("linear", vec![x, w, b], &move |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
            weighted_loss(t, y, &r)
        });
    });
}

#[test]
fn conv2d_gradients() {
    for_instances(2, |rng| {
        let x = random_tensor(rng, &[2, 2, 5, 5]);
        let k = random_tensor(rng, &[3, 2, 3, 3]);
        let b = random_tensor(rng, &[3]);
        let r = random_tensor(rng, &[2 * 3 * 25]);
        check("conv2d pad1", vec![x, k, b], &move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
            weighted_loss(t, y, &r)
        });
    });
}

#[test]
fn strided_conv2d_gradients() {
    for_instances(3, |rng| {
        let x = random_tensor(rng, &[1, 2, 5, 5]);
        let k = random_tensor(rng, &[2, 2, 3, 3]);
        let r = random_tensor(rng, &[2 * 2 * 2]);
        check("conv2d stride2", vec![x, k], &move |t, v| {
            let y = t.conv2d(v[0], v[1], None, 2, 0).unwrap();
            weighted_loss(t, y, &r)
        });
    });
}

#[test]
fn batchnorm_train_gradients() {
    for_instances(4, |rng| {
        let x = random_tensor(rng, &[4, 3, 2, 2]);
        let gain = random_tensor(rng, &[3]);
        let bias = random_tensor(rng, &[3]);
        let r = random_tensor(rng, &[48]);
        check("batchnorm train", vec![x, gain, bias], &move |t, v| {
            let mut stats = BnStats::new(3);
            let y = t
                .batchnorm(v[0], v[1], v[2], &mut stats, BnMode::Train, 0.1, 1e-5)
                .unwrap();
            weighted_loss(t, y, &r)
        });
    });
}

#[test]
fn batchnorm_eval_gradients() {
    for_instances(5, |rng| {
        let x = random_tensor(rng, &[3, 4]);
        let gain = random_tensor(rng, &[4]);
        let bias = random_tensor(rng, &[4]);
        let mean: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..2.0)).collect();
        let r = random_tensor(rng, &[12]);
        check("batchnorm eval", vec![x, gain, bias], &move |t, v| {
            let mut stats = BnStats {
                running_mean: mean.clone(),
                running_var: var.clone(),
            };
            let y = t
                .batchnorm(v[0], v[1], v[2], &mut stats, BnMode::Eval, 0.1, 1e-5)
                .unwrap();
            weighted_loss(t, y, &r)
        });
    });
}

#[test]
fn relu_gradients() {
    for_instances(6, |rng| {
        let x = off_kink(rng, &[2, 5]);
        let r = random_tensor(rng, &[10]);
        check("relu", vec![x], &move |t, v| {
            let y = t.relu(v[0]);
            weighted_loss(t, y, &r)
        });
    });
}

#[test]
fn maxpool_gradients() {
    for_instances(7, |rng| {
        let x = distinct(rng, &[2, 2, 4, 4]);
        let r = random_tensor(rng, &[16]);
        check("maxpool2x2", vec![x], &move |t, v| {
            let y = t.maxpool2x2(v[0]).unwrap();
            weighted_loss(t, y, &r)
        });
    });
}

#[test]
fn flatten_and_mask_gradients() {
    for_instances(8, |rng| {
        let x = random_tensor(rng, &[2, 3, 2]);
        let mask: Vec<bool> = (0..12).map(|_| rng.random_bool(0.6)).collect();
        let r = random_tensor(rng, &[12]);
        check("flatten+mask", vec![x], &move |t, v| {
            let m = t.mask(v[0], &mask).unwrap();
            weighted_loss(t, m, &r)
        });
    });
}

#[test]
fn softmax_xent_gradients() {
    for_instances(9, |rng| {
        let logits = random_tensor(rng, &[4, 5]);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        check("softmax_xent", vec![logits], &move |t, v| {
            t.softmax_xent(v[0], &labels).unwrap()
        });
    });
}

fn stack_loss<T: taskpack_core::tensor::Scalar>(
    t: &mut Tape<T>,
    v: &[Var],
    labels: &[usize],
) -> Var {
    let mut stats = BnStats::new(2);
    let c = t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
    let bn = t
        .batchnorm(
            c,
            v[3],
            v[4],
            &mut stats,
            BnMode::Train,
            T::from_f64(0.1),
            T::from_f64(1e-5),
        )
        .unwrap();
    let r = t.relu(bn);
    let p = t.maxpool2x2(r).unwrap();
    let f = t.flatten(p);
    let logits = t.linear(f, v[5], Some(v[6])).unwrap();
    t.softmax_xent(logits, labels).unwrap()
}

fn stack_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    vec![
        random_tensor(rng, &[3, 1, 4, 4]),
        random_tensor(rng, &[2, 1, 3, 3]),
        random_tensor(rng, &[2]),
        random_tensor(rng, &[2]),
        random_tensor(rng, &[2]),
        random_tensor(rng, &[3, 8]),
        random_tensor(rng, &[3]),
    ]
}

#[test]
fn full_stack_gradients_f64() {
    let labels = [0usize, 2, 1];
    for_instances(10, |rng| {
        let inputs = stack_inputs(rng);
        check("conv-bn-relu-pool-linear-xent", inputs, &move |t, v| {
            stack_loss(t, v, &labels)
        });
    });
}

/// Same stack in 32-bit: norm-wise agreement within 1e-3 at step 1e-3.
///
/// A 1e-3 probe can straddle a ReLU or max-pool switch; such instances are
/// detected in 64-bit (wide and narrow probes disagree) and skipped.
#[test]
fn full_stack_gradients_f32() {
    let labels = [0usize, 2, 1];
    let run = |inputs: &[Tensor<f32>]| -> (f32, Vec<Vec<f32>>) {
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = stack_loss(&mut tape, &vars, &labels);
        let value = tape.value(loss).data()[0];
        tape.backward(loss).unwrap();
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).unwrap().to_vec())
            .collect();
        (value, grads)
    };
    let build: &Build = &move |t, v| stack_loss(t, v, &labels);
    let probe64 = |inputs: &[Tensor<f64>], k: usize, i: usize, h: f64| {
        let mut p = inputs.to_vec();
        p[k].data_mut()[i] += h;
        let mut m = inputs.to_vec();
        m[k].data_mut()[i] -= h;
        (eval(&p, build).0 - eval(&m, build).0) / (2.0 * h)
    };
    let mut checked = 0;
    for_instances(11, |rng| {
        let wide = stack_inputs(rng);
        let inputs: Vec<Tensor<f32>> = wide.iter().map(|t| t.cast()).collect();
        let (_, analytic) = run(&inputs);
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        let mut straddles = false;
        for (k, input) in inputs.iter().enumerate() {
            for i in 0..input.len() {
                let (coarse, fine) = (probe64(&wide, k, i, 1e-3), probe64(&wide, k, i, 1e-5));
                if (coarse - fine).abs() > 1e-2 * fine.abs().max(1e-2) {
                    straddles = true;
                }
                let h = 1e-3f32;
                let mut p = inputs.clone();
                p[k].data_mut()[i] += h;
                let mut m = inputs.clone();
                m[k].data_mut()[i] -= h;
                let n = ((run(&p).0 - run(&m).0) / (2.0 * h)) as f64;
                diff += (analytic[k][i] as f64 - n).powi(2);
                norm += n * n;
            }
        }
        if straddles {
            return;
        }
        checked += 1;
        let rel = diff.sqrt() / norm.sqrt().max(1e-12);
        assert!(rel <= 1e-3, "f32 stack: relative gradient error {rel:e}");
    });
    assert!(checked >= 15, "only {checked} kink-free instances");
}
