//! Operation tape and the reverse sweep over it.
//!
//! Every operation appends one node; node ids are dense indices into the
//! tape, so inputs always precede their consumers and a plain reverse
//! iteration is a valid topological order for the backward pass.

use super::params::{ParamGrads, ParamId, ParamSet};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Added to each vector norm in [`Tape::cosine_similarity`].
pub const COSINE_NORM_EPS: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The differentiable primitive set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    /// `[m,k]x[k,n] -> [m,n]`, `[k]x[k,n] -> [n]`, `[m,k]x[k] -> [m]`.
    MatMul,
    /// Elementwise, identical shapes.
    Add,
    /// Elementwise, identical shapes.
    Multiply,
    Tanh,
    Sigmoid,
    /// Flattens and joins any number of inputs into one vector.
    Concat,
    /// Contiguous range `start..start + len` of the flattened input.
    Slice { start: usize, len: usize },
    /// Sum of all entries, shape `[1]`.
    Sum,
    /// Max-shifted `log(sum(exp(x)))`, shape `[1]`.
    LogSumExp,
    /// Two equal-length inputs, shape `[1]`.
    CosineSimilarity,
    /// Row `row` of a 2-D input.
    PickRow { row: usize },
}

impl OpKind {
    fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Multiply => "multiply",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Concat => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Sum => "sum",
            OpKind::LogSumExp => "log_sum_exp",
            OpKind::CosineSimilarity => "cosine_similarity",
            OpKind::PickRow { .. } => "pick_row",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Concat(Vec<usize>),
    Slice { src: usize, start: usize },
    Sum(usize),
    LogSumExp(usize),
    Cosine(usize, usize),
    PickRow { src: usize, row: usize },
    StopGradient,
}

#[derive(Clone, Debug)]
struct Node<T> {
    shape: Vec<usize>,
    /// `None` for parameter leaves, whose values live in the [`ParamSet`].
    value: Option<Vec<T>>,
    op: Op,
    requires_grad: bool,
}

/// Result of [`Tape::backward`]: gradients for every node on the tape that
/// the loss depends on, plus accumulated parameter gradients.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: ParamGrads<T>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a non-parameter node. Unreachable nodes
    /// (and parameter leaves) yield `None`.
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(id)
    }

    pub fn params(&self) -> &ParamGrads<T> {
        &self.params
    }
}

pub struct Tape<'p, T> {
    params: Option<&'p ParamSet<T>>,
    nodes: Vec<Node<T>>,
    stop_replay: Option<Vec<Vec<T>>>,
    stop_record: Vec<Vec<T>>,
}

impl<'p, T: Real> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `(rows, cols)` of a matmul operand; vectors are rows on the left and
/// columns on the right.
fn as_matrix(shape: &[usize], left: bool) -> Option<(usize, usize)> {
    match shape {
        [k] if left => Some((1, *k)),
        [k] => Some((*k, 1)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl<'p, T: Real> Tape<'p, T> {
    /// A tape with no parameter set; only leaves and constants are available.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            stop_replay: None,
            stop_record: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamSet<T>) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    /// Replays recorded stop-gradient outputs instead of computing them, so a
    /// perturbed re-evaluation holds blocked values fixed. Used by the
    /// finite-difference checker.
    pub(crate) fn replay_stops(&mut self, values: Vec<Vec<T>>) {
        self.stop_replay = Some(values);
    }

    pub(crate) fn take_stop_record(&mut self) -> Vec<Vec<T>> {
        std::mem::take(&mut self.stop_record)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self
                .params
                .expect("parameter node implies a parameter set")
                .tensor(*id)
                .data(),
            (_, Some(value)) => value,
            (_, None) => unreachable!("non-parameter nodes always hold a value"),
        }
    }

    /// Value of a single-entry node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("tape nodes hold well-formed tensors")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Differentiable input that is not a parameter.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.data().to_vec(), Op::Constant, false)
    }

    pub fn constant_vec(&mut self, values: Vec<T>) -> Var {
        self.constant(Tensor::vector(values))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let params = self.params.expect("tape has no parameter set");
        let p = params.get(id);
        self.nodes.push(Node {
            shape: p.tensor.shape().to_vec(),
            value: None,
            op: Op::Param(id),
            requires_grad: p.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Generic entry point over the primitive set.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::MatMul | OpKind::Add | OpKind::Multiply | OpKind::CosineSimilarity => Some(2),
            OpKind::Concat => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(Error::invalid(
                    kind.name(),
                    format!("expects {n} inputs, got {}", inputs.len()),
                ));
            }
        }
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Multiply => self.mul(inputs[0], inputs[1]),
            OpKind::Tanh => Ok(self.tanh(inputs[0])),
            OpKind::Sigmoid => Ok(self.sigmoid(inputs[0])),
            OpKind::Concat => self.concat(inputs),
            OpKind::Slice { start, len } => self.slice(inputs[0], start, len),
            OpKind::Sum => Ok(self.sum(inputs[0])),
            OpKind::LogSumExp => Ok(self.log_sum_exp(inputs[0])),
            OpKind::CosineSimilarity => self.cosine_similarity(inputs[0], inputs[1]),
            OpKind::PickRow { row } => self.pick_row(inputs[0], row),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || shape_err("matmul", &sa, &sb);
        if sa.len() == 1 && sb.len() == 1 {
            return Err(err());
        }
        let (m, k) = as_matrix(&sa, true).ok_or_else(err)?;
        let (k2, n) = as_matrix(&sb, false).ok_or_else(err)?;
        if k != k2 {
            return Err(err());
        }
        let out_shape = match (sa.len(), sb.len()) {
            (1, _) => vec![n],
            (_, 1) => vec![m],
            _ => vec![m, n],
        };
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(out_shape, out, Op::MatMul(a.0, b.0), rg))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(self.shape(a).to_vec(), out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("multiply", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.needs(&[a.0]);
        self.push(self.shape(a).to_vec(), out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let rg = self.needs(&ids);
        let n = out.len();
        Ok(self.push(vec![n], out, Op::Concat(ids), rg))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let total = self.value(a).len();
        if len == 0 || start + len > total {
            return Err(shape_err("slice", self.shape(a), &[start, len]));
        }
        let out = self.value(a)[start..start + len].to_vec();
        let rg = self.needs(&[a.0]);
        Ok(self.push(vec![len], out, Op::Slice { src: a.0, start }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.needs(&[a.0]);
        self.push(vec![1], vec![s], Op::Sum(a.0), rg)
    }

    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let s = log_sum_exp(self.value(a));
        let rg = self.needs(&[a.0]);
        self.push(vec![1], vec![s], Op::LogSumExp(a.0), rg)
    }

    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(shape_err("cosine_similarity", self.shape(a), self.shape(b)));
        }
        let eps = T::of(COSINE_NORM_EPS);
        let dot: T = av.iter().zip(bv).map(|(&x, &y)| x * y).sum();
        let na = norm(av) + eps;
        let nb = norm(bv) + eps;
        let c = dot / (na * nb);
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(vec![1], vec![c], Op::Cosine(a.0, b.0), rg))
    }

    pub fn pick_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [rows, cols] = shape[..] else {
            return Err(shape_err("pick_row", &shape, &[row]));
        };
        if row >= rows {
            return Err(Error::invalid(
                "pick_row",
                format!("row {row} out of range for shape {shape:?}"),
            ));
        }
        let out = self.value(a)[row * cols..(row + 1) * cols].to_vec();
        let rg = self.needs(&[a.0]);
        Ok(self.push(vec![cols], out, Op::PickRow { src: a.0, row }, rg))
    }

    /// Identity forward; the backward pass propagates nothing through it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let value = match self.stop_replay.as_mut() {
            Some(replay) if !replay.is_empty() => {
                let v = replay.remove(0);
                assert_eq!(v.len(), self.value(a).len(), "stop-gradient replay out of sync");
                v
            }
            _ => self.value(a).to_vec(),
        };
        self.stop_record.push(value.clone());
        self.push(shape, value, Op::StopGradient, false)
    }

    // Composites used throughout the model.

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let n = self.value(a).len();
        let shape = self.shape(a).to_vec();
        let c = self.constant(Tensor::filled(&shape, factor));
        debug_assert_eq!(n, self.value(c).len());
        self.mul(a, c)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::one())?;
        self.add(a, nb)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ones = self.constant(Tensor::filled(&shape, T::one()));
        self.sub(ones, a)
    }

    /// Single entry `index` of the flattened input, shape `[1]`.
    pub fn entry(&mut self, a: Var, index: usize) -> Result<Var> {
        self.slice(a, index, 1)
    }

    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::invalid("add", "no terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let mut params = match self.params {
            Some(p) => ParamGrads::new(p),
            None => ParamGrads::new(&ParamSet::new()),
        };
        let nodes = self.sweep(loss, &mut params)?;
        Ok(Gradients { nodes, params })
    }

    /// Reverse sweep that adds parameter gradients into `grads`, for
    /// accumulating over a batch.
    pub fn backward_into(&self, loss: Var, grads: &mut ParamGrads<T>) -> Result<()> {
        self.sweep(loss, grads).map(|_| ())
    }

    fn sweep(&self, loss: Var, pgrads: &mut ParamGrads<T>) -> Result<Vec<Option<Vec<T>>>> {
        if self.nodes[loss.0].value.as_ref().map_or(true, |v| v.len() != 1) {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        fn acc<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut [T] {
            grads[id].get_or_insert_with(|| vec![T::zero(); len])
        }

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs = |i: usize| self.nodes[i].requires_grad;
            match &node.op {
                Op::Leaf | Op::Constant | Op::StopGradient => {}
                Op::Param(pid) => {
                    let buf = pgrads.buffer(*pid, g.len());
                    for (b, &v) in buf.iter_mut().zip(&g) {
                        *b += v;
                    }
                }
                &Op::MatMul(a, b) => {
                    let (m, k) = as_matrix(&self.nodes[a].shape, true).unwrap();
                    let (_, n) = as_matrix(&self.nodes[b].shape, false).unwrap();
                    let (av, bv) = (self.value(Var(a)), self.value(Var(b)));
                    if needs(a) {
                        let ga = acc(&mut grads, a, m * k);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                let s: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                                ga[i * k + p] += s;
                            }
                        }
                    }
                    if needs(b) {
                        let gb = acc(&mut grads, b, k * n);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = av[i * k + p];
                                if aip == T::zero() {
                                    continue;
                                }
                                for (o, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += aip * x;
                                }
                            }
                        }
                    }
                }
                &Op::Add(a, b) => {
                    for src in [a, b] {
                        if needs(src) {
                            let gs = acc(&mut grads, src, g.len());
                            for (o, &x) in gs.iter_mut().zip(&g) {
                                *o += x;
                            }
                        }
                    }
                }
                &Op::Mul(a, b) => {
                    for (src, other) in [(a, b), (b, a)] {
                        if needs(src) {
                            let ov = self.value(Var(other));
                            let gs = acc(&mut grads, src, g.len());
                            for ((o, &x), &y) in gs.iter_mut().zip(&g).zip(ov) {
                                *o += x * y;
                            }
                        }
                    }
                }
                &Op::Tanh(a) => {
                    let y = node.value.as_ref().unwrap();
                    let gs = acc(&mut grads, a, g.len());
                    for ((o, &x), &yv) in gs.iter_mut().zip(&g).zip(y) {
                        *o += x * (T::one() - yv * yv);
                    }
                }
                &Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap();
                    let gs = acc(&mut grads, a, g.len());
                    for ((o, &x), &yv) in gs.iter_mut().zip(&g).zip(y) {
                        *o += x * yv * (T::one() - yv);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(Var(p)).len();
                        if needs(p) {
                            let gs = acc(&mut grads, p, len);
                            for (o, &x) in gs.iter_mut().zip(&g[offset..offset + len]) {
                                *o += x;
                            }
                        }
                        offset += len;
                    }
                }
                &Op::Slice { src, start } => {
                    let len = self.value(Var(src)).len();
                    let gs = acc(&mut grads, src, len);
                    for (o, &x) in gs[start..start + g.len()].iter_mut().zip(&g) {
                        *o += x;
                    }
                }
                &Op::Sum(a) => {
                    let len = self.value(Var(a)).len();
                    let gs = acc(&mut grads, a, len);
                    for o in gs.iter_mut() {
                        *o += g[0];
                    }
                }
                &Op::LogSumExp(a) => {
                    let out = node.value.as_ref().unwrap()[0];
                    let xs = self.value(Var(a));
                    let gs = acc(&mut grads, a, xs.len());
                    for (o, &x) in gs.iter_mut().zip(xs) {
                        *o += g[0] * (x - out).exp();
                    }
                }
                &Op::Cosine(a, b) => {
                    let (av, bv) = (self.value(Var(a)), self.value(Var(b)));
                    let eps = T::of(COSINE_NORM_EPS);
                    let (ra, rb) = (norm(av), norm(bv));
                    let denom = (ra + eps) * (rb + eps);
                    let c = node.value.as_ref().unwrap()[0];
                    for (src, x, y, r) in [(a, av, bv, ra), (b, bv, av, rb)] {
                        if !needs(src) {
                            continue;
                        }
                        // d cos / dx = y / D - cos * x / (|x| (|x| + eps))
                        let radial = if r > T::zero() {
                            c / (r * (r + eps))
                        } else {
                            T::zero()
                        };
                        let gs = acc(&mut grads, src, x.len());
                        for ((o, &xi), &yi) in gs.iter_mut().zip(x).zip(y) {
                            *o += g[0] * (yi / denom - radial * xi);
                        }
                    }
                }
                &Op::PickRow { src, row } => {
                    let cols = g.len();
                    // Scatter embedding rows straight into the parameter
                    // buffer instead of materializing a dense table gradient.
                    if let Op::Param(pid) = self.nodes[src].op {
                        let numel = self.value(Var(src)).len();
                        let buf = pgrads.buffer(pid, numel);
                        for (o, &x) in buf[row * cols..(row + 1) * cols].iter_mut().zip(&g) {
                            *o += x;
                        }
                    } else {
                        let len = self.value(Var(src)).len();
                        let gs = acc(&mut grads, src, len);
                        for (o, &x) in gs[row * cols..(row + 1) * cols].iter_mut().zip(&g) {
                            *o += x;
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if matches!(node.op, Op::Param(_)) {
                *g = None;
            }
        }
        Ok(grads)
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Max-shifted log-sum-exp. All-`-inf` input yields `-inf`.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}
