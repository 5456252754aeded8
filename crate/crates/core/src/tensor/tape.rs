use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{self, sigmoid, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle of a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    tape: u32,
    index: u32,
}

enum Op {
    Leaf { shape: Vec<usize> },
    MatMul { a: Tensor, b: Tensor, m: usize, k: usize, n: usize },
    Conv2d { input: Tensor, kernel: Tensor, geom: ConvGeom },
    ChannelBias { input: Option<NodeId>, bias: Option<NodeId>, shape: Vec<usize> },
    Relu { input: Tensor },
    Sigmoid { of: Option<NodeId>, out: Tensor },
    Add { a: Option<NodeId>, b: Option<NodeId> },
    Sub { a: Option<NodeId>, b: Option<NodeId> },
    Mul { a: Tensor, b: Tensor },
    Scale { a: Option<NodeId>, factor: f64 },
    Sum { a: Option<NodeId>, shape: Vec<usize>, axes: Vec<usize>, factor: f64 },
    Narrow { a: Option<NodeId>, shape: Vec<usize>, axis: usize, start: usize, len: usize },
    Reshape { a: Option<NodeId> },
    Pointwise { a: Option<NodeId>, local_grad: Vec<f64> },
}

struct Node {
    op: Op,
}

/// Append-only record of differentiable operations.
///
/// Ops take `&self`; results carry a node handle whenever any input does.
/// Inputs without a handle are treated as constants and nothing is recorded
/// for purely constant computations.
pub struct Tape {
    id: u32,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves reachable from a loss.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_node: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        t.node().and_then(|n| self.by_node.get(&n))
    }

    pub fn get_node(&self, n: NodeId) -> Option<&Tensor> {
        self.by_node.get(&n)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn checked_axes(op: &str, shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!("{op}: repeated axis in {axes:?}")));
    }
    if let Some(&bad) = sorted.iter().find(|&&a| a >= shape.len()) {
        return Err(Error::invalid(format!("{op}: axis {bad} out of range for shape {shape:?}")));
    }
    Ok(sorted)
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn owns(&self, n: NodeId) -> bool {
        n.tape == self.id && (n.index as usize) < self.len()
    }

    fn push(&self, op: Op) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        let index = u32::try_from(nodes.len()).expect("tape overflow");
        nodes.push(Node { op });
        NodeId { tape: self.id, index }
    }

    fn record(&self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Option<NodeId>], op: impl FnOnce() -> Op) -> Tensor {
        let out = Tensor::from_parts(shape, data);
        if inputs.iter().any(Option::is_some) {
            let id = self.push(op());
            out.with_node(id)
        } else {
            out
        }
    }

    /// Registers `t` as a differentiable leaf when it requires grad; otherwise
    /// returns it unchanged as a constant.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        if !t.requires_grad() {
            return t.detach();
        }
        let id = self.push(Op::Leaf { shape: t.shape().to_vec() });
        t.detach().with_node(id)
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(format!("matmul: cannot multiply {:?} by {:?}", a.shape(), b.shape())));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        Ok(self.record(vec![m, n], data, &[a.node(), b.node()], || Op::MatMul {
            a: a.clone(),
            b: b.clone(),
            m,
            k,
            n,
        }))
    }

    pub fn conv2d(&self, input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        if input.rank() != 4 || kernel.rank() != 4 || input.shape()[1] != kernel.shape()[1] {
            return Err(Error::shape(format!(
                "conv2d: input {:?} incompatible with kernel {:?}",
                input.shape(),
                kernel.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be at least 1"));
        }
        let (s, ks) = (input.shape(), kernel.shape());
        let geom = ConvGeom {
            batch: s[0],
            cin: s[1],
            h: s[2],
            w: s[3],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
        };
        if geom.kh > geom.h + 2 * pad || geom.kw > geom.w + 2 * pad {
            return Err(Error::shape(format!(
                "conv2d: kernel {:?} larger than padded input {:?} (pad {pad})",
                ks, s
            )));
        }
        let data = kernels::conv2d_forward(&geom, input.data(), kernel.data());
        let shape = vec![geom.batch, geom.cout, geom.out_h(), geom.out_w()];
        Ok(self.record(shape, data, &[input.node(), kernel.node()], || Op::Conv2d {
            input: input.clone(),
            kernel: kernel.clone(),
            geom,
        }))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[B, C, ...]` tensor.
    pub fn add_channel_bias(&self, input: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if input.rank() < 2 || bias.shape() != [input.shape()[1]] {
            return Err(Error::shape(format!(
                "channel bias {:?} does not match input {:?}",
                bias.shape(),
                input.shape()
            )));
        }
        let channels = input.shape()[1];
        let plane: usize = input.shape()[2..].iter().product();
        let mut data = input.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bias.data()[(i / plane) % channels];
        }
        Ok(self.record(input.shape().to_vec(), data, &[input.node(), bias.node()], || Op::ChannelBias {
            input: input.node(),
            bias: bias.node(),
            shape: input.shape().to_vec(),
        }))
    }

    pub fn relu(&self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.record(a.shape().to_vec(), data, &[a.node()], || Op::Relu { input: a.clone() })
    }

    pub fn sigmoid(&self, a: &Tensor) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|&x| sigmoid(x)).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data.clone());
        self.record(a.shape().to_vec(), data, &[a.node()], || Op::Sigmoid { of: a.node(), out })
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let data = zip_map(a, b, |x, y| x + y);
        Ok(self.record(a.shape().to_vec(), data, &[a.node(), b.node()], || Op::Add { a: a.node(), b: b.node() }))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("sub", a, b)?;
        let data = zip_map(a, b, |x, y| x - y);
        Ok(self.record(a.shape().to_vec(), data, &[a.node(), b.node()], || Op::Sub { a: a.node(), b: b.node() }))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mul", a, b)?;
        let data = zip_map(a, b, |x, y| x * y);
        Ok(self.record(a.shape().to_vec(), data, &[a.node(), b.node()], || Op::Mul { a: a.clone(), b: b.clone() }))
    }

    pub fn scale(&self, a: &Tensor, factor: f64) -> Tensor {
        let data = a.data().iter().map(|&x| x * factor).collect();
        self.record(a.shape().to_vec(), data, &[a.node()], || Op::Scale { a: a.node(), factor })
    }

    pub fn add_scalar(&self, a: &Tensor, value: f64) -> Tensor {
        let data = a.data().iter().map(|&x| x + value).collect();
        self.record(a.shape().to_vec(), data, &[a.node()], || Op::Scale { a: a.node(), factor: 1.0 })
    }

    pub fn sum(&self, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
        self.reduce("sum", a, axes, false)
    }

    pub fn mean(&self, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
        self.reduce("mean", a, axes, true)
    }

    pub fn sum_all(&self, a: &Tensor) -> Tensor {
        let axes: Vec<usize> = (0..a.rank()).collect();
        self.reduce("sum", a, &axes, false).expect("all axes are valid")
    }

    pub fn mean_all(&self, a: &Tensor) -> Tensor {
        let axes: Vec<usize> = (0..a.rank()).collect();
        self.reduce("mean", a, &axes, true).expect("all axes are valid")
    }

    fn reduce(&self, op: &str, a: &Tensor, axes: &[usize], mean: bool) -> Result<Tensor> {
        let axes = checked_axes(op, a.shape(), axes)?;
        let (shape, mut data) = kernels::reduce_sum(a.shape(), a.data(), &axes);
        let count: usize = axes.iter().map(|&d| a.shape()[d]).product();
        let factor = if mean { 1.0 / count as f64 } else { 1.0 };
        if mean {
            data.iter_mut().for_each(|v| *v *= factor);
        }
        Ok(self.record(shape, data, &[a.node()], || Op::Sum {
            a: a.node(),
            shape: a.shape().to_vec(),
            axes,
            factor,
        }))
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&self, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= a.rank() || len == 0 || start + len > a.shape()[axis] {
            return Err(Error::shape(format!(
                "narrow: range {start}..{} of axis {axis} invalid for {:?}",
                start + len,
                a.shape()
            )));
        }
        let outer: usize = a.shape()[..axis].iter().product();
        let inner: usize = a.shape()[axis + 1..].iter().product();
        let extent = a.shape()[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        Ok(self.record(shape, data, &[a.node()], || Op::Narrow {
            a: a.node(),
            shape: a.shape().to_vec(),
            axis,
            start,
            len,
        }))
    }

    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let r = a.reshape(shape)?;
        Ok(self.record(shape.to_vec(), r.data().to_vec(), &[a.node()], || Op::Reshape { a: a.node() }))
    }

    /// Elementwise sigmoid focal loss of `logits` against binary `targets`,
    /// multiplied by a constant `mask`. Masked entries contribute zero loss
    /// and receive exactly zero gradient.
    pub fn sigmoid_focal(
        &self,
        logits: &Tensor,
        targets: &Tensor,
        mask: &Tensor,
        gamma: f64,
        alpha: f64,
    ) -> Result<Tensor> {
        same_shape("sigmoid_focal", logits, targets)?;
        same_shape("sigmoid_focal", logits, mask)?;
        let n = logits.numel();
        let mut value = Vec::with_capacity(n);
        let mut local_grad = Vec::with_capacity(n);
        for i in 0..n {
            let (x, t, m) = (logits.data()[i], targets.data()[i], mask.data()[i]);
            if m == 0.0 {
                value.push(0.0);
                local_grad.push(0.0);
                continue;
            }
            let (l, g) = focal_term(x, t, gamma, alpha);
            value.push(m * l);
            local_grad.push(m * g);
        }
        Ok(self.record(logits.shape().to_vec(), value, &[logits.node()], || Op::Pointwise {
            a: logits.node(),
            local_grad,
        }))
    }

    /// Elementwise smooth-L1 (β = 1) between `pred` and a constant `target`,
    /// multiplied by a constant `mask`.
    pub fn smooth_l1(&self, pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
        same_shape("smooth_l1", pred, target)?;
        same_shape("smooth_l1", pred, mask)?;
        let n = pred.numel();
        let mut value = Vec::with_capacity(n);
        let mut local_grad = Vec::with_capacity(n);
        for i in 0..n {
            let m = mask.data()[i];
            let d = pred.data()[i] - target.data()[i];
            if m == 0.0 {
                value.push(0.0);
                local_grad.push(0.0);
            } else if d.abs() < 1.0 {
                value.push(m * 0.5 * d * d);
                local_grad.push(m * d);
            } else {
                value.push(m * (d.abs() - 0.5));
                local_grad.push(m * d.signum());
            }
        }
        Ok(self.record(pred.shape().to_vec(), value, &[pred.node()], || Op::Pointwise {
            a: pred.node(),
            local_grad,
        }))
    }

    /// Reverse-mode accumulation from a scalar `loss`. The tape is left intact,
    /// so calling this twice yields identical gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::Tape(format!("backward needs a scalar loss, got shape {:?}", loss.shape())));
        }
        let root = match loss.node() {
            Some(n) if self.owns(n) => n,
            _ => return Err(Error::Tape("loss is not a node of this tape".into())),
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.index as usize + 1];
        grads[root.index as usize] = Some(vec![1.0]);
        let mut out = Gradients::default();
        let id = self.id;
        let node_id = |index: usize| NodeId { tape: id, index: index as u32 };

        for index in (0..=root.index as usize).rev() {
            let Some(g) = grads[index].take() else { continue };
            let mut push = |target: Option<NodeId>, grad: Vec<f64>| {
                if let Some(t) = target {
                    accumulate(&mut grads[t.index as usize], grad);
                }
            };
            match &nodes[index].op {
                Op::Leaf { shape } => {
                    out.by_node.insert(node_id(index), Tensor::from_parts(shape.clone(), g));
                }
                Op::MatMul { a, b, m, k, n } => {
                    if a.node().is_some() {
                        let mut ga = vec![0.0; m * k];
                        kernels::gemm(*m, *n, *k, &g, (*n, 1), b.data(), (1, *n), 0.0, &mut ga);
                        push(a.node(), ga);
                    }
                    if b.node().is_some() {
                        let mut gb = vec![0.0; k * n];
                        kernels::gemm(*k, *m, *n, a.data(), (1, *k), &g, (*n, 1), 0.0, &mut gb);
                        push(b.node(), gb);
                    }
                }
                Op::Conv2d { input, kernel, geom } => {
                    let (gi, gk) = kernels::conv2d_backward(
                        geom,
                        input.data(),
                        kernel.data(),
                        &g,
                        input.node().is_some(),
                        kernel.node().is_some(),
                    );
                    if let Some(gi) = gi {
                        push(input.node(), gi);
                    }
                    if let Some(gk) = gk {
                        push(kernel.node(), gk);
                    }
                }
                Op::ChannelBias { input, bias, shape } => {
                    if bias.is_some() {
                        let channels = shape[1];
                        let plane: usize = shape[2..].iter().product();
                        let mut gb = vec![0.0; channels];
                        for (i, v) in g.iter().enumerate() {
                            gb[(i / plane) % channels] += v;
                        }
                        push(*bias, gb);
                    }
                    push(*input, g);
                }
                Op::Relu { input } => {
                    let gi = g.iter().zip(input.data()).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect();
                    push(input.node(), gi);
                }
                Op::Sigmoid { of, out } => {
                    let gi = g.iter().zip(out.data()).map(|(&g, &y)| g * y * (1.0 - y)).collect();
                    push(*of, gi);
                }
                Op::Add { a, b } => {
                    if b.is_some() {
                        push(*b, g.clone());
                    }
                    push(*a, g);
                }
                Op::Sub { a, b } => {
                    if b.is_some() {
                        push(*b, g.iter().map(|v| -v).collect());
                    }
                    push(*a, g);
                }
                Op::Mul { a, b } => {
                    if a.node().is_some() {
                        push(a.node(), g.iter().zip(b.data()).map(|(g, y)| g * y).collect());
                    }
                    if b.node().is_some() {
                        push(b.node(), g.iter().zip(a.data()).map(|(g, x)| g * x).collect());
                    }
                }
                Op::Scale { a, factor } => {
                    let f = *factor;
                    push(*a, if f == 1.0 { g } else { g.iter().map(|v| v * f).collect() });
                }
                Op::Sum { a, shape, axes, factor } => {
                    push(*a, kernels::reduce_broadcast(shape, axes, &g, *factor));
                }
                Op::Narrow { a, shape, axis, start, len } => {
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let extent = shape[*axis];
                    let mut gi = vec![0.0; shape.iter().product()];
                    for o in 0..outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        let base = (o * extent + start) * inner;
                        gi[base..base + len * inner].copy_from_slice(src);
                    }
                    push(*a, gi);
                }
                Op::Reshape { a } => push(*a, g),
                Op::Pointwise { a, local_grad } => {
                    push(*a, g.iter().zip(local_grad).map(|(g, l)| g * l).collect());
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, grad: Vec<f64>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(&grad).for_each(|(e, g)| *e += g),
        None => *slot = Some(grad),
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Focal loss value and d/dlogit for one entry. `t` is 1 for a positive, 0 otherwise.
pub(crate) fn focal_term(x: f64, t: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let log_p = -softplus(-x);
    let log_q = -softplus(x);
    let q = sigmoid(-x);
    if t > 0.5 {
        let w = q.powf(gamma);
        (-alpha * w * log_p, alpha * w * (gamma * p * log_p - q))
    } else {
        let w = p.powf(gamma);
        (-(1.0 - alpha) * w * log_q, (1.0 - alpha) * w * (p - gamma * q * log_q))
    }
}
