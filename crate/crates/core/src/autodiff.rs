//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is a flat tape of operation nodes; insertion order is the
//! topological order, and [`Graph::backward`] walks the tape in exact reverse
//! insertion order, so gradients are deterministic for a fixed graph. Graphs
//! are built per training step and discarded. A graph and its tensors are
//! confined to one worker; independent graphs may run in parallel.

use thiserror::Error;

/// Dense row-major tensor value. Rank 0 (`shape = []`) is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "tensor values length {} does not match shape {:?}",
            values.len(),
            shape
        );
        Tensor { shape, values }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], values: vec![v] }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor { shape: vec![values.len()], values }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![0.0; n] }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![1.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Scalar payload. Panics if the tensor is not rank 0.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor {:?}", self.shape);
        self.values[0]
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.values[r * c..(r + 1) * c]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in one [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: unsupported shape {shape:?}")]
    BadShape { op: &'static str, shape: Vec<usize> },
    #[error("backward: loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("finite differences: step must be positive, got {0}")]
    BadStep(f64),
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    BadAxis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of range {len}")]
    BadIndex { op: &'static str, index: usize, len: usize },
    #[error("{op}: empty input list")]
    EmptyInputs { op: &'static str },
}

type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    Scale(f64),
    Exp,
    Log,
    Tanh,
    Relu,
    Sqrt,
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    Sum,
    Mean,
    EuclideanNorm,
    SquaredNorm,
    SumAxis { axis: usize },
    Concat { axis: usize },
    SliceRows { start: usize, len: usize },
    Broadcast { n: usize },
    GatherRows { indices: Vec<usize> },
    Reshape,
    StopGradient,
}

struct Node {
    op: Op,
    inputs: Vec<TensorId>,
    value: Tensor,
    grad: Vec<f64>,
    frozen: bool,
}

/// Tape of operations. Node ids are insertion indices; every input precedes
/// its consumer.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<TensorId>, value: Tensor, frozen: bool) -> TensorId {
        let n = value.len();
        self.nodes.push(Node { op, inputs, value, grad: vec![0.0; n], frozen });
        TensorId(self.nodes.len() - 1)
    }

    /// Differentiable leaf (parameter or input).
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(Op::Leaf, vec![], value, false)
    }

    /// Leaf that never accumulates gradient. Gradients still flow through
    /// operations that consume it to their other inputs.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(Op::Leaf, vec![], value, true)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the latest [`Graph::backward`] pass.
    pub fn grad(&self, id: TensorId) -> Tensor {
        let node = &self.nodes[id.0];
        Tensor::new(node.value.shape.to_vec(), node.grad.clone())
    }

    fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        op: Op,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let values = va.values.iter().zip(&vb.values).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(va.shape.clone(), values);
        Ok(self.push(op, vec![a, b], out, false))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("add", Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("sub", Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("mul", Op::Mul, a, b, |x, y| x * y)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(
            &self.nodes[a.0].value.values,
            &self.nodes[b.0].value.values,
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Op::MatMul, vec![a, b], Tensor::new(vec![m, n], out), false))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = &self.nodes[a.0].value;
        let out = Tensor::new(v.shape.clone(), v.values.iter().map(|x| c * x).collect());
        self.push(Op::Scale(c), vec![a], out, false)
    }

    fn unary_elementwise(&mut self, op: Op, a: TensorId, f: impl Fn(f64) -> f64) -> TensorId {
        let v = &self.nodes[a.0].value;
        let out = Tensor::new(v.shape.clone(), v.values.iter().map(|x| f(*x)).collect());
        self.push(op, vec![a], out, false)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary_elementwise(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        self.unary_elementwise(Op::Log, a, f64::ln)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        self.unary_elementwise(Op::Tanh, a, f64::tanh)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary_elementwise(Op::Relu, a, |x| if x > 0.0 { x } else { 0.0 })
    }

    /// Elementwise square root. The derivative at exactly zero is defined as
    /// zero (subgradient convention, same as [`Graph::euclidean_norm`]).
    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        self.unary_elementwise(Op::Sqrt, a, f64::sqrt)
    }

    fn check_axis(&self, op: &'static str, a: TensorId, axis: usize) -> Result<()> {
        let rank = self.shape(a).len().max(1);
        if axis >= rank {
            return Err(AutodiffError::BadAxis { op, axis, shape: self.shape(a).to_vec() });
        }
        Ok(())
    }

    /// Softmax along `axis` with max-subtraction. Rank 1 uses axis 0; rank 2
    /// supports axis 0 (columns) and 1 (rows).
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.check_axis("softmax", a, axis)?;
        let v = &self.nodes[a.0].value;
        let out = map_slices(v, axis, |slice, out| {
            let m = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, x) in out.iter_mut().zip(slice) {
                *o = (x - m).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        });
        Ok(self.push(Op::Softmax { axis }, vec![a], out, false))
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.check_axis("log_softmax", a, axis)?;
        let v = &self.nodes[a.0].value;
        let out = map_slices(v, axis, |slice, out| {
            let m = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + slice.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for (o, x) in out.iter_mut().zip(slice) {
                *o = x - lse;
            }
        });
        Ok(self.push(Op::LogSoftmax { axis }, vec![a], out, false))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].value.values.iter().sum();
        self.push(Op::Sum, vec![a], Tensor::scalar(s), false)
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.values.iter().sum();
        let m = s / v.len() as f64;
        self.push(Op::Mean, vec![a], Tensor::scalar(m), false)
    }

    /// Euclidean norm of all elements, as a scalar. Gradient at the origin is
    /// defined as zero.
    pub fn euclidean_norm(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].value.values.iter().map(|x| x * x).sum();
        self.push(Op::EuclideanNorm, vec![a], Tensor::scalar(s.sqrt()), false)
    }

    pub fn squared_norm(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].value.values.iter().map(|x| x * x).sum();
        self.push(Op::SquaredNorm, vec![a], Tensor::scalar(s), false)
    }

    /// Sum of a rank-2 tensor along `axis` (0 collapses rows, 1 collapses
    /// columns), yielding a vector.
    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(AutodiffError::BadShape { op: "sum_axis", shape: s });
        }
        self.check_axis("sum_axis", a, axis)?;
        let (r, c) = (s[0], s[1]);
        let v = &self.nodes[a.0].value.values;
        let out = if axis == 0 {
            let mut acc = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    acc[j] += v[i * c + j];
                }
            }
            Tensor::vector(acc)
        } else {
            let mut acc = vec![0.0; r];
            for i in 0..r {
                acc[i] = v[i * c..(i + 1) * c].iter().sum();
            }
            Tensor::vector(acc)
        };
        Ok(self.push(Op::SumAxis { axis }, vec![a], out, false))
    }

    /// Concatenate along `axis`. Rank-1 inputs concatenate end to end
    /// (axis 0); rank-2 inputs stack rows (axis 0) or columns (axis 1).
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(AutodiffError::EmptyInputs { op: "concat" });
        }
        let first = self.shape(inputs[0]).to_vec();
        match first.len() {
            1 => {
                if axis != 0 {
                    return Err(AutodiffError::BadAxis { op: "concat", axis, shape: first });
                }
                let mut values = Vec::new();
                for &id in inputs {
                    let s = self.shape(id);
                    if s.len() != 1 {
                        return Err(AutodiffError::ShapeMismatch {
                            op: "concat",
                            lhs: first,
                            rhs: s.to_vec(),
                        });
                    }
                    values.extend_from_slice(&self.nodes[id.0].value.values);
                }
                let t = Tensor::vector(values);
                Ok(self.push(Op::Concat { axis }, inputs.to_vec(), t, false))
            }
            2 => {
                if axis > 1 {
                    return Err(AutodiffError::BadAxis { op: "concat", axis, shape: first });
                }
                let fixed = first[1 - axis];
                for &id in inputs {
                    let s = self.shape(id);
                    if s.len() != 2 || s[1 - axis] != fixed {
                        return Err(AutodiffError::ShapeMismatch {
                            op: "concat",
                            lhs: first,
                            rhs: s.to_vec(),
                        });
                    }
                }
                let total: usize = inputs.iter().map(|&id| self.shape(id)[axis]).sum();
                let (rows, cols) =
                    if axis == 0 { (total, fixed) } else { (fixed, total) };
                let mut values = vec![0.0; rows * cols];
                if axis == 0 {
                    let mut off = 0;
                    for &id in inputs {
                        let v = &self.nodes[id.0].value.values;
                        values[off..off + v.len()].copy_from_slice(v);
                        off += v.len();
                    }
                } else {
                    let mut col_off = 0;
                    for &id in inputs {
                        let t = &self.nodes[id.0].value;
                        let w = t.shape[1];
                        for i in 0..rows {
                            values[i * cols + col_off..i * cols + col_off + w]
                                .copy_from_slice(&t.values[i * w..(i + 1) * w]);
                        }
                        col_off += w;
                    }
                }
                let t = Tensor::new(vec![rows, cols], values);
                Ok(self.push(Op::Concat { axis }, inputs.to_vec(), t, false))
            }
            _ => Err(AutodiffError::BadShape { op: "concat", shape: first }),
        }
    }

    /// Contiguous row slice of a rank-2 tensor, or element range of a vector.
    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        match s.len() {
            1 => {
                if start + len > s[0] {
                    return Err(AutodiffError::BadIndex {
                        op: "slice",
                        index: start + len,
                        len: s[0],
                    });
                }
                let v = self.nodes[a.0].value.values[start..start + len].to_vec();
                Ok(self.push(Op::SliceRows { start, len }, vec![a], Tensor::vector(v), false))
            }
            2 => {
                let (r, c) = (s[0], s[1]);
                if start + len > r {
                    return Err(AutodiffError::BadIndex { op: "slice", index: start + len, len: r });
                }
                let v = self.nodes[a.0].value.values[start * c..(start + len) * c].to_vec();
                Ok(self.push(
                    Op::SliceRows { start, len },
                    vec![a],
                    Tensor::new(vec![len, c], v),
                    false,
                ))
            }
            _ => Err(AutodiffError::BadShape { op: "slice", shape: s }),
        }
    }

    /// Leading-dimension expansion: scalar -> `[n]`, vector `[d]` -> `[n, d]`.
    pub fn broadcast(&mut self, a: TensorId, n: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        let v = &self.nodes[a.0].value;
        match s.len() {
            0 => {
                let t = Tensor::vector(vec![v.values[0]; n]);
                Ok(self.push(Op::Broadcast { n }, vec![a], t, false))
            }
            1 => {
                let d = s[0];
                let mut values = Vec::with_capacity(n * d);
                for _ in 0..n {
                    values.extend_from_slice(&v.values);
                }
                Ok(self.push(
                    Op::Broadcast { n },
                    vec![a],
                    Tensor::new(vec![n, d], values),
                    false,
                ))
            }
            _ => Err(AutodiffError::BadShape { op: "broadcast", shape: s }),
        }
    }

    /// Gather rows of a rank-2 tensor by index (duplicates allowed). Backward
    /// scatter-adds into the source rows.
    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(AutodiffError::BadShape { op: "gather_rows", shape: s });
        }
        let (r, c) = (s[0], s[1]);
        let mut values = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(AutodiffError::BadIndex { op: "gather_rows", index: i, len: r });
            }
            values.extend_from_slice(self.nodes[a.0].value.row(i));
        }
        let t = Tensor::new(vec![indices.len(), c], values);
        Ok(self.push(Op::GatherRows { indices: indices.to_vec() }, vec![a], t, false))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let v = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != v.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape.clone(),
                rhs: shape,
            });
        }
        let t = Tensor::new(shape, v.values.clone());
        Ok(self.push(Op::Reshape, vec![a], t, false))
    }

    /// Identity in value, zero in gradient: backward propagates nothing
    /// through this node.
    pub fn stop_gradient(&mut self, a: TensorId) -> TensorId {
        let v = self.nodes[a.0].value.clone();
        self.push(Op::StopGradient, vec![a], v, false)
    }

    /// Reset all gradient accumulators to zero.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Reverse sweep from a scalar `loss`. Every non-frozen node reachable
    /// from the loss receives `d loss / d node`; visits nodes in exact
    /// reverse insertion order.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.zero_grads();
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            self.backward_node(i);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize) {
        // Inputs always precede node i, so split at i for disjoint borrows.
        let (before, after) = self.nodes.split_at_mut(i);
        let node = &after[0];
        if matches!(node.op, Op::Leaf) {
            return;
        }
        let upstream = &node.grad;
        if upstream.iter().all(|g| *g == 0.0) {
            return;
        }
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add => {
                for &inp in &node.inputs {
                    accumulate(before, inp, |g, _| {
                        for (gi, ui) in g.iter_mut().zip(upstream) {
                            *gi += ui;
                        }
                    });
                }
            }
            Op::Sub => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                accumulate(before, a, |g, _| {
                    for (gi, ui) in g.iter_mut().zip(upstream) {
                        *gi += ui;
                    }
                });
                accumulate(before, b, |g, _| {
                    for (gi, ui) in g.iter_mut().zip(upstream) {
                        *gi -= ui;
                    }
                });
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let va = before[a.0].value.values.clone();
                let vb = before[b.0].value.values.clone();
                accumulate(before, a, |g, _| {
                    for ((gi, ui), bi) in g.iter_mut().zip(upstream).zip(&vb) {
                        *gi += ui * bi;
                    }
                });
                accumulate(before, b, |g, _| {
                    for ((gi, ui), ai) in g.iter_mut().zip(upstream).zip(&va) {
                        *gi += ui * ai;
                    }
                });
            }
            Op::MatMul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let m = before[a.0].value.shape[0];
                let k = before[a.0].value.shape[1];
                let n = before[b.0].value.shape[1];
                let va = before[a.0].value.values.clone();
                let vb = before[b.0].value.values.clone();
                // dA[i,p] += sum_j dC[i,j] * B[p,j]
                accumulate(before, a, |g, _| {
                    for i in 0..m {
                        for j in 0..n {
                            let u = upstream[i * n + j];
                            if u == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                g[i * k + p] += u * vb[p * n + j];
                            }
                        }
                    }
                });
                // dB[p,j] += sum_i A[i,p] * dC[i,j]
                accumulate(before, b, |g, _| {
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = va[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                g[p * n + j] += a_ip * upstream[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Scale(c) => {
                let c = *c;
                accumulate(before, node.inputs[0], |g, _| {
                    for (gi, ui) in g.iter_mut().zip(upstream) {
                        *gi += c * ui;
                    }
                });
            }
            Op::Exp => {
                let y = &node.value.values;
                accumulate(before, node.inputs[0], |g, _| {
                    for ((gi, ui), yi) in g.iter_mut().zip(upstream).zip(y) {
                        *gi += ui * yi;
                    }
                });
            }
            Op::Log => {
                accumulate(before, node.inputs[0], |g, v| {
                    for ((gi, ui), xi) in g.iter_mut().zip(upstream).zip(&v.values) {
                        *gi += ui / xi;
                    }
                });
            }
            Op::Tanh => {
                let y = &node.value.values;
                accumulate(before, node.inputs[0], |g, _| {
                    for ((gi, ui), yi) in g.iter_mut().zip(upstream).zip(y) {
                        *gi += ui * (1.0 - yi * yi);
                    }
                });
            }
            Op::Relu => {
                accumulate(before, node.inputs[0], |g, v| {
                    for ((gi, ui), xi) in g.iter_mut().zip(upstream).zip(&v.values) {
                        if *xi > 0.0 {
                            *gi += ui;
                        }
                    }
                });
            }
            Op::Sqrt => {
                let y = &node.value.values;
                accumulate(before, node.inputs[0], |g, _| {
                    for ((gi, ui), yi) in g.iter_mut().zip(upstream).zip(y) {
                        if *yi > 0.0 {
                            *gi += ui * 0.5 / yi;
                        }
                    }
                });
            }
            Op::Softmax { axis } => {
                let (axis, y) = (*axis, &node.value);
                accumulate(before, node.inputs[0], |g, _| {
                    softmax_backward(y, axis, upstream, g);
                });
            }
            Op::LogSoftmax { axis } => {
                let (axis, y) = (*axis, &node.value);
                accumulate(before, node.inputs[0], |g, _| {
                    log_softmax_backward(y, axis, upstream, g);
                });
            }
            Op::Sum => {
                let u = upstream[0];
                accumulate(before, node.inputs[0], |g, _| {
                    for gi in g.iter_mut() {
                        *gi += u;
                    }
                });
            }
            Op::Mean => {
                let u = upstream[0];
                accumulate(before, node.inputs[0], |g, _| {
                    let inv = 1.0 / g.len() as f64;
                    for gi in g.iter_mut() {
                        *gi += u * inv;
                    }
                });
            }
            Op::EuclideanNorm => {
                let u = upstream[0];
                let norm = node.value.values[0];
                accumulate(before, node.inputs[0], |g, v| {
                    if norm > 0.0 {
                        for (gi, xi) in g.iter_mut().zip(&v.values) {
                            *gi += u * xi / norm;
                        }
                    }
                });
            }
            Op::SquaredNorm => {
                let u = upstream[0];
                accumulate(before, node.inputs[0], |g, v| {
                    for (gi, xi) in g.iter_mut().zip(&v.values) {
                        *gi += u * 2.0 * xi;
                    }
                });
            }
            Op::SumAxis { axis } => {
                let axis = *axis;
                accumulate(before, node.inputs[0], |g, v| {
                    let (r, c) = (v.shape[0], v.shape[1]);
                    if axis == 0 {
                        for i in 0..r {
                            for j in 0..c {
                                g[i * c + j] += upstream[j];
                            }
                        }
                    } else {
                        for i in 0..r {
                            for j in 0..c {
                                g[i * c + j] += upstream[i];
                            }
                        }
                    }
                });
            }
            Op::Concat { axis } => {
                let rank = node.value.shape.len();
                if rank == 1 || *axis == 0 {
                    let mut off = 0;
                    for &inp in &node.inputs {
                        let len = before[inp.0].value.len();
                        let chunk = &upstream[off..off + len];
                        accumulate(before, inp, |g, _| {
                            for (gi, ui) in g.iter_mut().zip(chunk) {
                                *gi += ui;
                            }
                        });
                        off += len;
                    }
                } else {
                    let rows = node.value.shape[0];
                    let cols = node.value.shape[1];
                    let mut col_off = 0;
                    for &inp in &node.inputs {
                        let w = before[inp.0].value.shape[1];
                        accumulate(before, inp, |g, _| {
                            for i in 0..rows {
                                for j in 0..w {
                                    g[i * w + j] += upstream[i * cols + col_off + j];
                                }
                            }
                        });
                        col_off += w;
                    }
                }
            }
            Op::SliceRows { start, .. } => {
                let start = *start;
                accumulate(before, node.inputs[0], |g, v| {
                    let width = if v.shape.len() == 2 { v.shape[1] } else { 1 };
                    let off = start * width;
                    for (i, ui) in upstream.iter().enumerate() {
                        g[off + i] += ui;
                    }
                });
            }
            Op::Broadcast { n } => {
                let n = *n;
                accumulate(before, node.inputs[0], |g, _| {
                    let d = g.len();
                    for rep in 0..n {
                        for j in 0..d {
                            g[j] += upstream[rep * d + j];
                        }
                    }
                });
            }
            Op::GatherRows { indices } => {
                accumulate(before, node.inputs[0], |g, v| {
                    let c = v.shape[1];
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            g[i * c + j] += upstream[k * c + j];
                        }
                    }
                });
            }
            Op::Reshape => {
                accumulate(before, node.inputs[0], |g, _| {
                    for (gi, ui) in g.iter_mut().zip(upstream) {
                        *gi += ui;
                    }
                });
            }
        }
    }
}

/// Add into the gradient of `id` unless it is a frozen leaf.
fn accumulate(before: &mut [Node], id: TensorId, f: impl FnOnce(&mut [f64], &Tensor)) {
    let target = &mut before[id.0];
    if !target.frozen {
        f(&mut target.grad, &target.value);
    }
}

/// Cache-friendly `C[m,n] += A[m,k] * B[k,n]` (ikj order), overwriting C.
fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    c.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..m {
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// Apply `f(slice, out)` over every 1-D slice of `t` along `axis`.
fn map_slices(t: &Tensor, axis: usize, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
    match t.shape.len() {
        0 | 1 => {
            let mut out = vec![0.0; t.len()];
            f(&t.values, &mut out);
            Tensor::new(t.shape.clone(), out)
        }
        2 => {
            let (r, c) = (t.shape[0], t.shape[1]);
            let mut out = vec![0.0; r * c];
            if axis == 1 {
                for i in 0..r {
                    f(&t.values[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
                }
            } else {
                let mut col = vec![0.0; r];
                let mut res = vec![0.0; r];
                for j in 0..c {
                    for i in 0..r {
                        col[i] = t.values[i * c + j];
                    }
                    f(&col, &mut res);
                    for i in 0..r {
                        out[i * c + j] = res[i];
                    }
                }
            }
            Tensor::new(t.shape.clone(), out)
        }
        _ => panic!("softmax: rank > 2 unsupported"),
    }
}

fn softmax_backward(y: &Tensor, axis: usize, upstream: &[f64], grad: &mut [f64]) {
    let apply = |ys: &[f64], us: &[f64], gs: &mut [f64]| {
        let dot: f64 = ys.iter().zip(us).map(|(y, u)| y * u).sum();
        for ((g, y), u) in gs.iter_mut().zip(ys).zip(us) {
            *g += y * (u - dot);
        }
    };
    for_each_slice(y, axis, upstream, grad, apply);
}

fn log_softmax_backward(y: &Tensor, axis: usize, upstream: &[f64], grad: &mut [f64]) {
    let apply = |ys: &[f64], us: &[f64], gs: &mut [f64]| {
        let total: f64 = us.iter().sum();
        for ((g, y), u) in gs.iter_mut().zip(ys).zip(us) {
            *g += u - y.exp() * total;
        }
    };
    for_each_slice(y, axis, upstream, grad, apply);
}

fn for_each_slice(
    y: &Tensor,
    axis: usize,
    upstream: &[f64],
    grad: &mut [f64],
    apply: impl Fn(&[f64], &[f64], &mut [f64]),
) {
    match y.shape.len() {
        0 | 1 => apply(&y.values, upstream, grad),
        2 => {
            let (r, c) = (y.shape[0], y.shape[1]);
            if axis == 1 {
                for i in 0..r {
                    apply(
                        &y.values[i * c..(i + 1) * c],
                        &upstream[i * c..(i + 1) * c],
                        &mut grad[i * c..(i + 1) * c],
                    );
                }
            } else {
                let mut ys = vec![0.0; r];
                let mut us = vec![0.0; r];
                let mut gs = vec![0.0; r];
                for j in 0..c {
                    for i in 0..r {
                        ys[i] = y.values[i * c + j];
                        us[i] = upstream[i * c + j];
                        gs[i] = 0.0;
                    }
                    apply(&ys, &us, &mut gs);
                    for i in 0..r {
                        grad[i * c + j] += gs[i];
                    }
                }
            }
        }
        _ => unreachable!(),
    }
}

/// Max relative error between the analytic gradient of `f` at `x` and central
/// finite differences with step `h`:
/// `max_i |analytic_i - central_i| / (|central_i| + 1e-12)`.
///
/// `f` must be scalar-valued and twice differentiable at `x`; points where it
/// is not (e.g. a norm at the origin) are the caller's responsibility.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId>,
{
    if h <= 0.0 {
        return Err(AutodiffError::BadStep(h));
    }
    let mut g = Graph::new();
    let xid = g.leaf(x.clone());
    let out = f(&mut g, xid)?;
    if !g.value(out).is_scalar() {
        return Err(AutodiffError::NonScalarLoss(g.value(out).shape().to_vec()));
    }
    g.backward(out)?;
    let analytic = g.grad(xid);

    let eval = |values: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let xid = g.leaf(Tensor::new(x.shape().to_vec(), values.to_vec()));
        let out = f(&mut g, xid)?;
        Ok(g.value(out).item())
    };

    let mut max_err: f64 = 0.0;
    let mut perturbed = x.values().to_vec();
    for i in 0..perturbed.len() {
        let orig = perturbed[i];
        perturbed[i] = orig + h;
        let fp = eval(&perturbed)?;
        perturbed[i] = orig - h;
        let fm = eval(&perturbed)?;
        perturbed[i] = orig;
        let central = (fp - fm) / (2.0 * h);
        let err = (analytic.values()[i] - central).abs() / (central.abs() + 1e-12);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).values(), &[0.5, 0.5]);
    }

    #[test]
    fn euclidean_norm_three_four_five() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.0, 4.0]));
        let n = g.euclidean_norm(x);
        assert_eq!(g.value(n).item(), 5.0);
    }

    #[test]
    fn shape_mismatch_reports_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch { op: "add", lhs: vec![2], rhs: vec![3] }
        );
    }

    #[test]
    fn stop_gradient_value_cancels_gradient_blocked() {
        // loss = (x - sg(x))^2 at x = 2: value 0, d loss/dx = 0.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let sg = g.stop_gradient(x);
        let d = g.sub(x, sg).unwrap();
        let loss = g.mul(d, d).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).item(), 0.0);
    }

    #[test]
    fn stop_gradient_product_rule_blocked_branch() {
        // loss = x * sg(x) at x = 3: d loss/dx = 3.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let sg = g.stop_gradient(x);
        let loss = g.mul(x, sg).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).item(), 3.0);
    }

    #[test]
    fn stop_gradient_passes_values_through() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let s = g.softmax(x, 0).unwrap();
        let sg = g.stop_gradient(s);
        assert_eq!(g.value(sg).values(), g.value(s).values());
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).values(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_through_stop_gradient_only_gives_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, -2.0]));
        let sg = g.stop_gradient(x);
        let loss = g.squared_norm(sg);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).values(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn frozen_leaf_gets_no_gradient_but_flow_continues() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let w = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]));
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).values(), &[0.0, 0.0]);
        assert_eq!(g.grad(x).values(), &[3.0, 4.0]);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        // Random 3-layer MLP scalar output vs central differences.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let dims = [4usize, 5, 3, 1];
        let mut weights = Vec::new();
        for win in dims.windows(2) {
            let (i, o) = (win[0], win[1]);
            let w: Vec<f64> = (0..i * o).map(|_| rng.gen_range(-0.8..0.8)).collect();
            weights.push(Tensor::matrix(i, o, w));
        }
        let x = Tensor::matrix(1, 4, (0..4).map(|_| rng.gen_range(0.1..2.0)).collect());
        let f = |g: &mut Graph, xid: TensorId| -> Result<TensorId> {
            let mut h = xid;
            for w in &weights {
                let wid = g.constant(w.clone());
                let lin = g.matmul(h, wid)?;
                h = g.tanh(lin);
            }
            Ok(g.sum(h))
        };
        let err = finite_difference_check(f, &x, 1e-5).unwrap();
        assert!(err <= 1e-6, "finite-difference error {err} too large");
    }

    #[test]
    fn finite_difference_on_sum_of_squares() {
        let x = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let err = finite_difference_check(
            |g, xid| {
                let sq = g.mul(xid, xid)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "error {err}");
    }

    #[test]
    fn finite_difference_on_constant_is_zero() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = finite_difference_check(
            |g, xid| {
                let c = g.constant(Tensor::scalar(4.0));
                let _ = xid;
                Ok(g.scale(c, 1.0))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn finite_difference_rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        let r = finite_difference_check(|g, x| Ok(g.sum(x)), &x, 0.0);
        assert!(matches!(r, Err(AutodiffError::BadStep(_))));
    }

    #[test]
    fn backward_deterministic_bit_identical() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::matrix(3, 4, vals.clone()));
            let t = g.tanh(x);
            let s = g.softmax(t, 1).unwrap();
            let l = g.log_softmax(s, 0).unwrap();
            let m = g.mul(l, t).unwrap();
            let loss = g.mean(m);
            g.backward(loss).unwrap();
            g.grad(x).values().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let mut g = Graph::new();
        let table = g.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let picked = g.gather_rows(table, &[0, 2, 0]).unwrap();
        assert_eq!(g.value(picked).values(), &[1.0, 2.0, 5.0, 6.0, 1.0, 2.0]);
        let loss = g.sum(picked);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(table).values(), &[2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_axis1_roundtrip_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 1, vec![1.0, 2.0]));
        let b = g.leaf(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).values(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = g.constant(Tensor::matrix(2, 3, vec![1.0, 10.0, 100.0, 1.0, 10.0, 100.0]));
        let m = g.mul(c, w).unwrap();
        let loss = g.sum(m);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).values(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).values(), &[10.0, 100.0, 10.0, 100.0]);
    }

    #[test]
    fn broadcast_sums_gradient_over_leading_dim() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = g.broadcast(v, 3).unwrap();
        assert_eq!(g.value(b).shape(), &[3, 2]);
        let loss = g.sum(b);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(v).values(), &[3.0, 3.0]);
    }

    #[test]
    fn column_softmax_columns_sum_to_one() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(3, 2, vec![1.0, -1.0, 0.5, 2.0, -0.3, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s);
        for j in 0..2 {
            let col: f64 = (0..3).map(|i| v.values()[i * 2 + j]).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
    }
}
