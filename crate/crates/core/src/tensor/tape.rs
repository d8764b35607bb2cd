use super::kernels::{
    batchnorm_backward, batchnorm_forward_cached, conv2d_backward, conv2d_forward, linear_backward,
    linear_forward, maxpool2x2_indexed, softmax_xent_probs, BnCache, BnMode, BnStats,
};
use super::{Scalar, Tensor};
use crate::error::{PackError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: BnCache<T>,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Mask {
        x: Var,
        mask: Vec<bool>,
    },
    Add(Var, Var),
    Sum(Var),
    Square(Var),
    SoftmaxXent {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation. Nodes are stored in
/// creation order, so every operation's inputs precede it.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable or otherwise differentiated input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = linear_forward(
            self.value(x),
            self.value(w),
            b.map(|b| &self.nodes[b.0].value),
        )?;
        let rg = self.needs(&[Some(x), Some(w), b]);
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let y = conv2d_forward(
            self.value(x),
            self.value(k),
            b.map(|b| &self.nodes[b.0].value),
            stride,
            pad,
        )?;
        let rg = self.needs(&[Some(x), Some(k), b]);
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        stats: &mut BnStats<T>,
        mode: BnMode,
        momentum: T,
        eps: T,
    ) -> Result<Var> {
        let (y, cache) = batchnorm_forward_cached(
            self.value(x),
            self.value(gain),
            self.value(bias),
            stats,
            mode,
            momentum,
            eps,
        )?;
        let rg = self.needs(&[Some(x), Some(gain), Some(bias)]);
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gain,
                bias,
                cache,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = super::kernels::relu(self.value(x));
        let rg = self.needs(&[Some(x)]);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = maxpool2x2_indexed(self.value(x))?;
        let rg = self.needs(&[Some(x)]);
        Ok(self.push(y, Op::MaxPool { x, argmax }, rg))
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let y = super::kernels::flatten(self.value(x));
        let rg = self.needs(&[Some(x)]);
        self.push(y, Op::Reshape(x), rg)
    }

    /// Zero every entry whose mask bit is clear. Selection rather than
    /// multiplication, so masked entries are exactly `+0.0`.
    pub fn mask(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(PackError::dim(format!(
                "mask of {} bits for tensor of {} elements",
                mask.len(),
                xv.len()
            )));
        }
        let y = Tensor::new(xv.shape().to_vec(), apply_mask(xv.data(), mask))?;
        let rg = self.needs(&[Some(x)]);
        Ok(self.push(
            y,
            Op::Mask {
                x,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(PackError::dim(format!(
                "add: incompatible shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let y = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(&[Some(a), Some(b)]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        let rg = self.needs(&[Some(x)]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let y = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| v * v).collect(),
        )
        .expect("square preserves shape");
        let rg = self.needs(&[Some(x)]);
        self.push(y, Op::Square(x), rg)
    }

    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = softmax_xent_probs(self.value(logits), labels)?;
        let rg = self.needs(&[Some(logits)]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients from earlier sweeps are
    /// discarded; contributions to shared inputs accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(PackError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        self.nodes[loss.0].value.grad = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(dy) = node.value.grad() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let wants = |v: Var| before[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let g = linear_backward(&before[x.0].value, &before[w.0].value, dy, wants(*x));
                    if let Some(dx) = g.dx {
                        give(before, *x, dx);
                    }
                    give(before, *w, g.dw);
                    if let Some(b) = b {
                        give(before, *b, g.db);
                    }
                }
                Op::Conv2d {
                    x,
                    k,
                    b,
                    stride,
                    pad,
                } => {
                    let g = conv2d_backward(
                        &before[x.0].value,
                        &before[k.0].value,
                        dy,
                        *stride,
                        *pad,
                        wants(*x),
                    )?;
                    if let Some(dx) = g.dx {
                        give(before, *x, dx);
                    }
                    give(before, *k, g.dk);
                    if let Some(b) = b {
                        give(before, *b, g.db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gain,
                    bias,
                    cache,
                } => {
                    let g = batchnorm_backward(
                        node.value.shape(),
                        before[gain.0].value.data(),
                        cache,
                        dy,
                    );
                    give(before, *x, g.dx);
                    give(before, *gain, g.dgain);
                    give(before, *bias, g.dbias);
                }
                Op::Relu(x) => {
                    let xv = before[x.0].value.data();
                    let dx = xv
                        .iter()
                        .zip(dy)
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    give(before, *x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![T::zero(); before[x.0].value.len()];
                    for (&src, &g) in argmax.iter().zip(dy) {
                        dx[src] = dx[src] + g;
                    }
                    give(before, *x, dx);
                }
                Op::Reshape(x) => {
                    give(before, *x, dy.to_vec());
                }
                Op::Mask { x, mask } => {
                    give(before, *x, apply_mask(dy, mask));
                }
                Op::Add(a, b) => {
                    give(before, *a, dy.to_vec());
                    give(before, *b, dy.to_vec());
                }
                Op::Sum(x) => {
                    let n = before[x.0].value.len();
                    give(before, *x, vec![dy[0]; n]);
                }
                Op::Square(x) => {
                    let two = T::from_f64(2.0);
                    let dx = before[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&v, &g)| two * v * g)
                        .collect();
                    give(before, *x, dx);
                }
                Op::SoftmaxXent {
                    logits,
                    probs,
                    labels,
                } => {
                    let classes = before[logits.0].value.shape()[1];
                    let scale = dy[0] / T::from_f64(labels.len() as f64);
                    let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (n, &l) in labels.iter().enumerate() {
                        dx[n * classes + l] = dx[n * classes + l] - scale;
                    }
                    give(before, *logits, dx);
                }
            }
        }
        Ok(())
    }
}

fn give<T: Scalar>(nodes: &mut [Node<T>], v: Var, g: Vec<T>) {
    let node = &mut nodes[v.0];
    if node.requires_grad {
        node.value.accumulate_grad(g);
    }
}

pub(crate) fn apply_mask<T: Scalar>(data: &[T], mask: &[bool]) -> Vec<T> {
    data.iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v } else { T::zero() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::new(vec![3], vec![1., -2., 5.]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1., 1., 1.]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::new(vec![2], vec![1., 2.]).unwrap());
        let sq = tape.square(x);
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2., 4.]);
    }

    #[test]
    fn shared_inputs_accumulate() {
        // loss = sum(x) + sum(x^2): d/dx = 1 + 2x
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![2], vec![1., 3.]).unwrap());
        let a = tape.sum(x);
        let sq = tape.square(x);
        let b = tape.sum(sq);
        let loss = tape.add(a, b).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3., 7.]);
        // a second sweep starts from fresh gradients
        tape.backward(b).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2., 6.]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![1, 2], vec![1., 2.]).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 2], vec![1., 1.]).unwrap());
        let y = tape.linear(x, w, None).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1., 1.]);
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::new(vec![2], vec![1., 2.]).unwrap());
        assert!(matches!(tape.backward(x), Err(PackError::Usage(_))));
    }

    #[test]
    fn mask_blocks_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::new(vec![3], vec![-1., 2., 3.]).unwrap());
        let m = tape.mask(x, &[true, false, true]).unwrap();
        assert_eq!(tape.value(m).data(), &[-1., 0., 3.]);
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1., 0., 1.]);
    }
}
