use super::resize::ResizePlan;
use super::{check_finite, Tensor};
use crate::error::{bail, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Resize(Var, ResizePlan),
    Concat(Vec<Var>, usize),
    SliceCols(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Transpose(Var),
    L2NormalizeRows(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations in execution order, which is also a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when nothing flowed into `v`.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(shape),
        }
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const K: f64 = 0.044_715;
    let u = C * (x + K * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x);
    (y, dy)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn finish(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[Var],
        op: Op,
    ) -> Result<Var> {
        check_finite(op_name, &data)?;
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::from_parts(shape, data), rg, op))
    }

    /// Records a leaf. Gradients are accumulated for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies a value into a new constant leaf; no gradient flows through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, p) = self.value(b).dims2()?;
        if k != k2 {
            bail!(Dimension, "matmul {}x{} by {}x{}", m, k, k2, p);
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, p);
        self.finish("matmul", vec![m, p], out, &[a, b], Op::MatMul(a, b))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            bail!(
                Dimension,
                "{}: shapes {:?} and {:?} differ",
                op,
                self.value(a).shape(),
                self.value(b).shape()
            );
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.finish("add", shape, out, &[a, b], Op::Add(a, b))
    }

    /// Adds a length-`C` bias to every row of an `R×C` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if self.value(bias).numel() != c {
            bail!(
                Dimension,
                "add_row: bias of {} values for {} columns",
                self.value(bias).numel(),
                c
            );
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..r {
            for (o, bv) in out[i * c..(i + 1) * c].iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.finish("add_row", vec![r, c], out, &[a, bias], Op::AddRow(a, bias))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "hadamard")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.finish("hadamard", shape, out, &[a, b], Op::Hadamard(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.value(a).shape().to_vec();
        self.finish("scale", shape, out, &[a], Op::Scale(a, s))
    }

    fn unary(&mut self, a: Var, name: &'static str, f: fn(f64) -> f64, op: Op) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.finish(name, shape, out, &[a], op)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "gelu", |x| gelu_parts(x).0, Op::Gelu(a))
    }

    /// Softmax over the last axis (each row of the matrix view).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(super::softmax(&x[i * c..(i + 1) * c])?);
        }
        let shape = self.value(a).shape().to_vec();
        self.finish("softmax", shape, out, &[a], Op::SoftmaxRows(a))
    }

    /// Per-row standardization over features followed by `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            bail!(Contract, "layer_norm eps must be positive, got {}", eps);
        }
        let (r, c) = self.value(x).dims2()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            bail!(Dimension, "layer_norm affine parameters must have {} values", c);
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        self.finish(
            "layer_norm",
            vec![r, c],
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn resize_linear(&mut self, x: Var, target_dim: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let plan = ResizePlan::new(c, target_dim)?;
        if plan.is_identity() {
            let rg = self.rg(&[x]);
            let value = self.value(x).reshape(vec![r, c])?;
            return Ok(self.push(value, rg, Op::Resize(x, plan)));
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; r * target_dim];
        for i in 0..r {
            plan.apply_row(
                &xs[i * c..(i + 1) * c],
                &mut out[i * target_dim..(i + 1) * target_dim],
            );
        }
        self.finish("resize_linear", vec![r, target_dim], out, &[x], Op::Resize(x, plan))
    }

    /// Concatenates 2-D values along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            bail!(Dimension, "concat of nothing");
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.value(p).dims2())
            .collect::<Result<_>>()?;
        let (shape, out) = match axis {
            0 => {
                let c = dims[0].1;
                if dims.iter().any(|d| d.1 != c) {
                    bail!(Dimension, "concat axis 0: column counts differ {:?}", dims);
                }
                let mut out = Vec::new();
                for &p in parts {
                    out.extend_from_slice(self.value(p).data());
                }
                (vec![dims.iter().map(|d| d.0).sum(), c], out)
            }
            1 => {
                let r = dims[0].0;
                if dims.iter().any(|d| d.0 != r) {
                    bail!(Dimension, "concat axis 1: row counts differ {:?}", dims);
                }
                let total: usize = dims.iter().map(|d| d.1).sum();
                let mut out = Vec::with_capacity(r * total);
                for i in 0..r {
                    for (&p, d) in parts.iter().zip(&dims) {
                        out.extend_from_slice(&self.value(p).data()[i * d.1..(i + 1) * d.1]);
                    }
                }
                (vec![r, total], out)
            }
            _ => bail!(Dimension, "concat axis {} unsupported", axis),
        };
        self.finish("concat", shape, out, parts, Op::Concat(parts.to_vec(), axis))
    }

    /// Columns `[start, end)` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start >= end || end > c {
            bail!(Dimension, "slice_cols [{}, {}) of {} columns", start, end, c);
        }
        let w = end - start;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&xs[i * c + start..i * c + end]);
        }
        self.finish("slice_cols", vec![r, w], out, &[x], Op::SliceCols(x, start))
    }

    /// Mean over an axis of a 2-D value, keeping it as a length-1 axis.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let xs = self.value(x).data();
        let (shape, out) = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, v) in out.iter_mut().zip(&xs[i * c..(i + 1) * c]) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= r as f64);
                (vec![1, c], out)
            }
            1 => {
                let out = (0..r)
                    .map(|i| xs[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
                    .collect();
                (vec![r, 1], out)
            }
            _ => bail!(Dimension, "mean_axis axis {} unsupported", axis),
        };
        self.finish("mean_axis", shape, out, &[x], Op::MeanAxis(x, axis))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.finish("sum", vec![], vec![s], &[x], Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.finish("mean", vec![], vec![s], &[x], Op::MeanAll(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let out = transpose_raw(self.value(x).data(), r, c);
        self.finish("transpose", vec![c, r], out, &[x], Op::Transpose(x))
    }

    /// Scales each row to unit Euclidean norm. A zero row is a non-finite error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let xs = self.value(x).data();
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let shape = self.value(x).shape().to_vec();
        self.finish("l2_normalize", shape, out, &[x], Op::L2NormalizeRows(x, norms))
    }

    /// Mean softmax cross-entropy of `R×C` logits against per-row class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.value(logits).dims2()?;
        if targets.len() != r {
            bail!(Dimension, "cross_entropy: {} targets for {} rows", targets.len(), r);
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            bail!(Data, "cross_entropy target {} out of range for {} classes", t, c);
        }
        let xs = self.value(logits).data();
        let mut probs = Vec::with_capacity(r * c);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &xs[i * c..(i + 1) * c];
            loss += super::log_sum_exp(row) - row[t];
            probs.extend(super::softmax(row)?);
        }
        loss /= r as f64;
        self.finish(
            "cross_entropy",
            vec![],
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Reverse pass from a scalar `loss`, accumulating into every input that
    /// requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            bail!(Contract, "loss is not on this tape");
        }
        if self.value(loss).numel() != 1 {
            bail!(
                Contract,
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            );
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, p) = self.value(*b).dims2()?;
                if self.requires_grad(*a) {
                    let bt = transpose_raw(self.value(*b).data(), k, p);
                    self.acc(grads, *a, matmul_raw(g, &bt, m, p, k));
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    self.acc(grads, *b, matmul_raw(&at, g, k, m, p));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::AddRow(a, bias) => {
                self.acc(grads, *a, g.to_vec());
                if self.requires_grad(*bias) {
                    let c = self.value(*bias).numel();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    self.acc(grads, *bias, gb);
                }
            }
            Op::Hadamard(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                self.acc(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.iter().map(|v| v * s).collect()),
            Op::Tanh(a) => {
                self.acc(grads, *a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect())
            }
            Op::Sigmoid(a) => {
                self.acc(grads, *a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.acc(
                    grads,
                    *a,
                    g.iter().zip(x).map(|(g, &x)| g * gelu_parts(x).1).collect(),
                )
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = node.value.dims2()?;
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = node.value.dims2()?;
                let gam = self.value(*gamma).data();
                if self.requires_grad(*gamma) {
                    let mut gg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                    self.acc(grads, *gamma, gg);
                }
                if self.requires_grad(*beta) {
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    self.acc(grads, *beta, gb);
                }
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; r * c];
                    let cf = c as f64;
                    for i in 0..r {
                        let dh: Vec<f64> = (0..c).map(|j| g[i * c + j] * gam[j]).collect();
                        let h = &xhat[i * c..(i + 1) * c];
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] =
                                inv_std[i] / cf * (cf * dh[j] - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Resize(x, plan) => {
                let (r, _) = node.value.dims2()?;
                let (src, dst) = (plan.src(), plan.dst());
                let mut gx = vec![0.0; r * src];
                for i in 0..r {
                    plan.adjoint_row(&g[i * dst..(i + 1) * dst], &mut gx[i * src..(i + 1) * src]);
                }
                self.acc(grads, *x, gx);
            }
            Op::Concat(parts, axis) => {
                let (r, total) = node.value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).dims2()?;
                    let piece = if *axis == 0 {
                        g[offset * total..(offset + pr) * total].to_vec()
                    } else {
                        let mut v = Vec::with_capacity(pr * pc);
                        for i in 0..r {
                            v.extend_from_slice(&g[i * total + offset..i * total + offset + pc]);
                        }
                        v
                    };
                    offset += if *axis == 0 { pr } else { pc };
                    self.acc(grads, p, piece);
                }
            }
            Op::SliceCols(x, start) => {
                let (r, c) = self.value(*x).dims2()?;
                let w = node.value.cols();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.acc(grads, *x, gx);
            }
            Op::MeanAxis(x, axis) => {
                let (r, c) = self.value(*x).dims2()?;
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = if *axis == 0 {
                            g[j] / r as f64
                        } else {
                            g[i] / c as f64
                        };
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::SumAll(x) => self.acc(grads, *x, vec![g[0]; self.value(*x).numel()]),
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2()?;
                self.acc(grads, *x, transpose_raw(g, c, r));
            }
            Op::L2NormalizeRows(x, norms) => {
                let (r, c) = node.value.dims2()?;
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (r, c) = self.value(*logits).dims2()?;
                let scale = g[0] / r as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gx[i * c + t] -= scale;
                }
                self.acc(grads, *logits, gx);
            }
        }
        Ok(())
    }
}
