//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! Nodes are appended in execution order, so the tape is topologically
//! sorted by construction and `backward` visits each node once in reverse.

use super::kernels::{self, ConvGeometry, MatRef};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Reshape(Var),
    Sum(Var),
    SquaredErrorSum(Var, Var),
    SpatialSoftmax { x: Var, temperature: f64 },
    GaussianKl { mu: Var, sigma: Var },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MatMul(a, b)
            | Op::SquaredErrorSum(a, b) => vec![a, b],
            Op::Conv2d { x, w, b, .. } => vec![x, w, b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Sigmoid(a) | Op::Tanh(a) | Op::Exp(a) | Op::Reshape(a) | Op::Sum(a) => {
                vec![a]
            }
            Op::SpatialSoftmax { x, .. } => vec![x],
            Op::GaussianKl { mu, sigma } => vec![mu, sigma],
        }
    }
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    op: Op,
    tracked: bool,
}

/// The computation record: every operation node with its inputs and the
/// rule needed to push gradients back through it.
pub struct Tape<E: Scalar = f32> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same_shape<E: Scalar>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<E>, op: Op) -> Var {
        let tracked = match op {
            Op::Leaf => value.requires_grad(),
            _ => op.inputs().iter().any(|i| self.nodes[i.0].tracked),
        };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn derived(&self, shape: Vec<usize>, data: Vec<E>) -> Tensor<E> {
        Tensor::new(shape, data).expect("op kernels preserve shape invariants")
    }

    /// Records a leaf; it participates in differentiation iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, t: Tensor<E>) -> Var {
        self.push(t.with_grad(), Op::Leaf)
    }

    pub fn constant(&mut self, mut t: Tensor<E>) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(E, E) -> E) -> Vec<E> {
        self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect()
    }

    fn map(&self, a: Var, f: impl Fn(E) -> E) -> Vec<E> {
        self.value(a).data().iter().map(|&x| f(x)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("add", self.value(a), self.value(b))?;
        let t = self.derived(self.value(a).shape().to_vec(), self.zip_map(a, b, |x, y| x + y));
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("sub", self.value(a), self.value(b))?;
        let t = self.derived(self.value(a).shape().to_vec(), self.zip_map(a, b, |x, y| x - y));
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("mul", self.value(a), self.value(b))?;
        let t = self.derived(self.value(a).shape().to_vec(), self.zip_map(a, b, |x, y| x * y));
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let c = E::from_f64(factor);
        let t = self.derived(self.value(a).shape().to_vec(), self.map(a, |x| x * c));
        self.push(t, Op::Scale(a, factor))
    }

    /// Adds a bias vector along the last axis of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x).shape(), self.value(bias).shape());
        let n = *xs.last().unwrap_or(&0);
        if bs.len() != 1 || bs[0] != n {
            return Err(Error::shape("add_row", format!("bias {bs:?} does not match rows of {xs:?}")));
        }
        let b = self.value(bias).data();
        let data = self.value(x).data().chunks(n).flat_map(|row| row.iter().zip(b).map(|(&v, &bv)| v + bv)).collect();
        let t = self.derived(xs.to_vec(), data);
        Ok(self.push(t, Op::AddRow(x, bias)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data =
            kernels::matmul(MatRef::plain(self.value(a).data(), k), MatRef::plain(self.value(b).data(), n), m, k, n);
        let t = self.derived(vec![m, n], data);
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// Fully-connected layer: `x·w + b` with `w` shaped `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    /// 2D convolution. `x`: `[B, C, H, W]`, `w`: `[O, C, K, K]`, `b`: `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("input {xs:?}, kernel {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape("conv2d", format!("input has {} channels but kernel expects {}", xs[1], ws[1])));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("conv2d", format!("bias {bs:?} for {} output channels", ws[0])));
        }
        if stride == 0 {
            return Err(Error::param("stride", "must be positive"));
        }
        let geom = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            out_channels: ws[0],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        let t = self.derived(vec![geom.batch, geom.out_channels, geom.out_height(), geom.out_width()], data);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.derived(self.value(a).shape().to_vec(), self.map(a, |x| x.max(E::zero())));
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.map(a, |x| {
            let v = x.as_f64();
            E::from_f64(1.0 / (1.0 + (-v).exp()))
        });
        let t = self.derived(self.value(a).shape().to_vec(), data);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.derived(self.value(a).shape().to_vec(), self.map(a, |x| x.tanh()));
        self.push(t, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.derived(self.value(a).shape().to_vec(), self.map(a, |x| x.exp()));
        self.push(t, Op::Exp(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        let t = Tensor::scalar(E::from_f64(s));
        self.push(t, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// `Σ (a - b)²` as a scalar.
    pub fn squared_error_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("squared_error_sum", self.value(a), self.value(b))?;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum();
        Ok(self.push(Tensor::scalar(E::from_f64(s)), Op::SquaredErrorSum(a, b)))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.squared_error_sum(a, b)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Expected feature coordinates per channel. `x`: `[B, C, H, W]` →
    /// `[B, 2C]`, interleaved `(x̄, ȳ)` in `[-1, 1]`.
    pub fn spatial_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::param("temperature", format!("must be positive, got {temperature}")));
        }
        let xs = self.value(x).shape();
        if xs.len() != 4 {
            return Err(Error::shape("spatial_softmax", format!("expected [B,C,H,W], got {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let data = kernels::spatial_softmax_forward(self.value(x).data(), b, c, h, w, temperature);
        let t = self.derived(vec![b, 2 * c], data);
        Ok(self.push(t, Op::SpatialSoftmax { x, temperature }))
    }

    /// Closed-form `KL(N(mu, diag sigma²) ‖ N(0, I))`, summed over all elements.
    pub fn gaussian_kl(&mut self, mu: Var, sigma: Var) -> Result<Var> {
        check_same_shape("gaussian_kl", self.value(mu), self.value(sigma))?;
        let kl = gaussian_kl_sum(self.value(mu).data(), self.value(sigma).data())?;
        Ok(self.push(Tensor::scalar(E::from_f64(kl)), Op::GaussianKl { mu, sigma }))
    }

    /// Propagates d(loss)/d(node) back to every tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!("backward requires a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].tracked {
            return Ok(Gradients { grads, shapes: self.shapes() });
        }
        grads[loss.0] = Some(vec![E::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        Ok(Gradients { grads, shapes: self.shapes() })
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        self.nodes.iter().map(|n| n.value.shape().to_vec()).collect()
    }

    fn accumulate(&self, grads: &mut [Option<Vec<E>>], target: Var, delta: Vec<E>) {
        if !self.nodes[target.0].tracked {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e = *e + d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect());
                self.accumulate(grads, b, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect());
            }
            Op::Scale(a, c) => {
                let c = E::from_f64(c);
                self.accumulate(grads, a, g.iter().map(|&v| v * c).collect());
            }
            Op::AddRow(x, bias) => {
                let n = self.value(bias).numel();
                self.accumulate(grads, x, g.to_vec());
                if self.nodes[bias.0].tracked {
                    let mut acc = vec![0.0f64; n];
                    for row in g.chunks(n) {
                        acc.iter_mut().zip(row).for_each(|(s, &v)| *s += v.as_f64());
                    }
                    self.accumulate(grads, bias, acc.into_iter().map(E::from_f64).collect());
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].tracked {
                    let bt = MatRef::transposed(self.value(b).data(), n);
                    self.accumulate(grads, a, kernels::matmul(MatRef::plain(g, n), bt, m, n, k));
                }
                if self.nodes[b.0].tracked {
                    let at = MatRef::transposed(self.value(a).data(), k);
                    self.accumulate(grads, b, kernels::matmul(at, MatRef::plain(g, n), k, m, n));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(self.value(x).data(), self.value(w).data(), g, &geom);
                self.accumulate(grads, x, dx);
                self.accumulate(grads, w, dw);
                self.accumulate(grads, b, db);
            }
            Op::Relu(a) => {
                let av = self.value(a).data();
                let d = g.iter().zip(av).map(|(&gi, &x)| if x > E::zero() { gi } else { E::zero() }).collect();
                self.accumulate(grads, a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.iter().zip(out).map(|(&gi, &y)| gi * y * (E::one() - y)).collect();
                self.accumulate(grads, a, d);
            }
            Op::Tanh(a) => {
                let d = g.iter().zip(out).map(|(&gi, &y)| gi * (E::one() - y * y)).collect();
                self.accumulate(grads, a, d);
            }
            Op::Exp(a) => {
                let d = g.iter().zip(out).map(|(&gi, &y)| gi * y).collect();
                self.accumulate(grads, a, d);
            }
            Op::Reshape(a) => self.accumulate(grads, a, g.to_vec()),
            Op::Sum(a) => {
                let n = self.value(a).numel();
                self.accumulate(grads, a, vec![g[0]; n]);
            }
            Op::SquaredErrorSum(a, b) => {
                let two_g = g[0].as_f64() * 2.0;
                let diff: Vec<f64> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(&x, &y)| two_g * (x.as_f64() - y.as_f64()))
                    .collect();
                self.accumulate(grads, a, diff.iter().map(|&d| E::from_f64(d)).collect());
                self.accumulate(grads, b, diff.iter().map(|&d| E::from_f64(-d)).collect());
            }
            Op::SpatialSoftmax { x, temperature } => {
                let s = self.value(x).shape();
                let d = kernels::spatial_softmax_backward(self.value(x).data(), g, s[0], s[1], s[2], s[3], temperature);
                self.accumulate(grads, x, d);
            }
            Op::GaussianKl { mu, sigma } => {
                let g0 = g[0].as_f64();
                let dmu = self.value(mu).data().iter().map(|&m| E::from_f64(g0 * m.as_f64())).collect();
                let dsig = self
                    .value(sigma)
                    .data()
                    .iter()
                    .map(|&s| {
                        let s = s.as_f64();
                        E::from_f64(g0 * (s - 1.0 / s))
                    })
                    .collect();
                self.accumulate(grads, mu, dmu);
                self.accumulate(grads, sigma, dsig);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<E: Scalar = f32> {
    grads: Vec<Option<Vec<E>>>,
    shapes: Vec<Vec<usize>>,
}

impl<E: Scalar> Gradients<E> {
    /// Total derivative of the loss with respect to `v`; zeros when `v`
    /// has no path to the loss.
    pub fn get(&self, v: Var) -> Tensor<E> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn has_path(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

pub(crate) fn gaussian_kl_sum<E: Scalar>(mu: &[E], sigma: &[E]) -> Result<f64> {
    let mut kl = 0.0;
    for (&m, &s) in mu.iter().zip(sigma) {
        let (m, s) = (m.as_f64(), s.as_f64());
        if !(s > 0.0) {
            return Err(Error::param("sigma", format!("must be strictly positive, got {s}")));
        }
        kl += m * m + s * s - (s * s).ln() - 1.0;
    }
    Ok(0.5 * kl)
}
