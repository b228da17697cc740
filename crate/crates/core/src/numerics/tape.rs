//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in strictly decreasing index order, so
//! gradient accumulation order is fixed and results are bit-reproducible.
//! Parameters live in a [`ParamStore`]; the first use of a parameter inside a
//! graph materializes it as a leaf, and [`Gradients::param_grads`] maps leaf
//! gradients back to parameter ids.

use std::collections::HashMap;

use super::tensor::{matmul_raw, transpose_raw, Tensor};
use crate::error::{contract_err, shape_err, Result};

pub type ParamId = usize;

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Panics on duplicate names, which is a
    /// model-construction bug.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| &self.values[id])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (i, n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Silu(Var),
    Gelu(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, f64),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<Option<usize>>),
    Reshape(Var),
    GroupMean(Var, usize),
    DepthwiseConv1d(Var, Var),
    /// Scalar-valued op whose local gradient was computed in the forward pass.
    ScalarFn(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    param_vars: HashMap<ParamId, Var>,
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'p> Graph<'p> {
    /// A graph without parameters, for standalone tensor math.
    pub fn new() -> Graph<'static> {
        Graph {
            params: None,
            param_vars: HashMap::new(),
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            param_vars: HashMap::new(),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self
            .params
            .expect("graph has no parameter store")
            .get(id)
            .clone();
        let v = self.input(value);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.row_len())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[a])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(shape_err!(
                "matmul needs matrices, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(shape_err!("matmul inner dims {k} vs {k2}"));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(shape_err!("transpose needs a matrix, got {:?}", self.shape(a)));
        }
        let (m, n) = self.dims2(a);
        let data = transpose_raw(self.value(a).data(), m, n);
        let value = Tensor::new(vec![n, m], data)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `a[i, :] + row` for every row `i`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if self.value(row).numel() != n {
            return Err(shape_err!("add_row: row of {} vs width {n}", self.value(row).numel()));
        }
        let mut data = self.value(a).data().to_vec();
        let r = self.value(row).data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r[j];
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    /// `a[i, :] * row` for every row `i`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if self.value(row).numel() != n {
            return Err(shape_err!("mul_row: row of {} vs width {n}", self.value(row).numel()));
        }
        let mut data = self.value(a).data().to_vec();
        let r = self.value(row).data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= r[j];
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::MulRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
        })
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    /// Row-wise softmax over the last axis with max subtraction.
    ///
    /// `mask[i * cols + j] == false` excludes entry `j` of row `i`; excluded
    /// entries get probability exactly 0. A row with no valid entry is a
    /// contract violation.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(shape_err!("softmax mask has {} entries, want {}", mask.len(), m * n));
            }
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let valid = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
            let mut mx = f64::NEG_INFINITY;
            for j in (0..n).filter(|&j| valid(j)) {
                mx = mx.max(x[i * n + j]);
            }
            if mx == f64::NEG_INFINITY {
                return Err(contract_err!("softmax row {i} is fully masked"));
            }
            let mut z = 0.0;
            for j in (0..n).filter(|&j| valid(j)) {
                let e = (x[i * n + j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for v in &mut out[i * n..(i + 1) * n] {
                *v /= z;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a);
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax(a), &[a]))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(a);
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let (mean, inv_std) = row_stats(row, eps);
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv_std;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm(a, eps), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Concatenation along the feature (last) axis of 2-D tensors.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let m = self.dims2(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p);
            if pm != m {
                return Err(shape_err!("concat_cols rows {pm} vs {m}"));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Concatenation along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(shape_err!(
                    "concat_rows trailing dims {:?} vs {:?}",
                    &self.shape(p)[1..],
                    tail
                ));
            }
            rows += self.shape(p)[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if start + len > n {
            return Err(shape_err!("slice_cols {start}+{len} > {n}"));
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        let value = Tensor::new(vec![m, len], data)?;
        Ok(self.push(value, Op::SliceCols(a, start), &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).narrow_rows(start, len)?;
        Ok(self.push(value, Op::SliceRows(a, start), &[a]))
    }

    /// Builds a new tensor from leading-axis rows of `a`; `None` yields a
    /// zero row.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<Option<usize>>) -> Result<Var> {
        let t = self.value(a);
        let (m, w) = (t.rows(), t.row_len());
        let mut data = Vec::with_capacity(indices.len() * w);
        for idx in &indices {
            match *idx {
                Some(i) if i < m => data.extend_from_slice(t.row(i)),
                Some(i) => return Err(shape_err!("gather row {i} out of range {m}")),
                None => data.extend(std::iter::repeat_n(0.0, w)),
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::GatherRows(a, indices), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Averages consecutive groups of `group` rows: `[N*group, C] -> [N, C]`.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Result<Var> {
        let (m, c) = self.dims2(a);
        if group == 0 || m % group != 0 {
            return Err(shape_err!("group_mean: {m} rows not divisible by {group}"));
        }
        let x = self.value(a).data();
        let groups = m / group;
        let mut data = vec![0.0; groups * c];
        for g in 0..groups {
            for r in 0..group {
                let row = &x[(g * group + r) * c..(g * group + r + 1) * c];
                for j in 0..c {
                    data[g * c + j] += row[j];
                }
            }
        }
        let inv = 1.0 / group as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(vec![groups, c], data)?;
        Ok(self.push(value, Op::GroupMean(a, group), &[a]))
    }

    /// Per-channel temporal convolution with odd kernel `[k, C]` and zero
    /// padding that preserves length.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, c) = self.dims2(x);
        let (k, wc) = self.dims2(w);
        if wc != c || k % 2 == 0 {
            return Err(shape_err!("depthwise kernel [{k},{wc}] for {c} channels"));
        }
        let pad = k / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            for j in 0..k {
                let src = ti + j;
                if src < pad || src - pad >= t {
                    continue;
                }
                let s = src - pad;
                for ch in 0..c {
                    out[ti * c + ch] += wv[j * c + ch] * xv[s * c + ch];
                }
            }
        }
        let value = Tensor::new(vec![t, c], out)?;
        Ok(self.push(value, Op::DepthwiseConv1d(x, w), &[x, w]))
    }

    /// Records a scalar-valued function of `input` whose gradient has
    /// already been computed.
    pub fn scalar_fn(&mut self, input: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.shape(input) {
            return Err(shape_err!("scalar_fn grad shape {:?} vs input {:?}", grad.shape(), self.shape(input)));
        }
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn(input, grad), &[input]))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.propagate(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.iter().map(|(&p, &v)| (p, v)).collect(),
        })
    }

    fn propagate(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|ga| {
                    let bt = transpose_raw(bv, k, n);
                    let d = matmul_raw(gy, &bt, m, n, k);
                    add_into(ga, &d);
                });
                acc(*b, &|gb| {
                    let at = transpose_raw(av, m, k);
                    let d = matmul_raw(&at, gy, k, m, n);
                    add_into(gb, &d);
                });
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims2(*a);
                acc(*a, &|ga| add_into(ga, &transpose_raw(gy, n, m)));
            }
            Op::Add(a, b) => {
                acc(*a, &|ga| add_into(ga, gy));
                acc(*b, &|gb| add_into(gb, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &|ga| add_into(ga, gy));
                acc(*b, &|gb| gb.iter_mut().zip(gy).for_each(|(g, &d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|ga| {
                    for i in 0..ga.len() {
                        ga[i] += gy[i] * bv[i];
                    }
                });
                acc(*b, &|gb| {
                    for i in 0..gb.len() {
                        gb[i] += gy[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = self.dims2(*a).1;
                acc(*a, &|ga| add_into(ga, gy));
                acc(*row, &|gr| {
                    for (i, &d) in gy.iter().enumerate() {
                        gr[i % n] += d;
                    }
                });
            }
            Op::MulRow(a, row) => {
                let n = self.dims2(*a).1;
                let av = self.value(*a).data();
                let rv = self.value(*row).data();
                acc(*a, &|ga| {
                    for (i, &d) in gy.iter().enumerate() {
                        ga[i] += d * rv[i % n];
                    }
                });
                acc(*row, &|gr| {
                    for (i, &d) in gy.iter().enumerate() {
                        gr[i % n] += d * av[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|ga| ga.iter_mut().zip(gy).for_each(|(g, &d)| *g += c * d)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &|ga| add_into(ga, gy)),
            Op::Sigmoid(a) => acc(*a, &|ga| {
                for i in 0..ga.len() {
                    ga[i] += gy[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Silu(a) => {
                let x = self.value(*a).data();
                acc(*a, &|ga| {
                    for i in 0..ga.len() {
                        let s = sigmoid(x[i]);
                        ga[i] += gy[i] * (s + x[i] * s * (1.0 - s));
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(*a, &|ga| {
                    for i in 0..ga.len() {
                        let xi = x[i];
                        let th = (GELU_C * (xi + 0.044715 * xi * xi * xi)).tanh();
                        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * xi * xi);
                        let d = 0.5 * (1.0 + th) + 0.5 * xi * (1.0 - th * th) * dinner;
                        ga[i] += gy[i] * d;
                    }
                });
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                acc(*a, &|ga| {
                    for i in 0..ga.len() {
                        let s = if x[i] > 0.0 {
                            1.0
                        } else if x[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        ga[i] += gy[i] * s;
                    }
                });
            }
            Op::Softmax(a) => {
                let (m, n) = self.dims2(*a);
                acc(*a, &|ga| {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dot: f64 = y[r.clone()].iter().zip(&gy[r.clone()]).map(|(p, d)| p * d).sum();
                        for j in r {
                            ga[j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (m, n) = self.dims2(*a);
                acc(*a, &|ga| {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let s: f64 = gy[r.clone()].iter().sum();
                        for j in r {
                            ga[j] += gy[j] - y[j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm(a, eps) => {
                let (m, n) = self.dims2(*a);
                let x = self.value(*a).data();
                acc(*a, &|ga| {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let (_, inv_std) = row_stats(&x[r.clone()], *eps);
                        let g = &gy[r.clone()];
                        let xh = &y[r.clone()];
                        let mg = g.iter().sum::<f64>() / n as f64;
                        let mgx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            ga[i * n + j] += inv_std * (g[j] - mg - xh[j] * mgx);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|ga| ga.iter_mut().for_each(|g| *g += gy[0])),
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let total = node.value.row_len();
                let mut off = 0;
                for &p in parts {
                    let w = self.dims2(p).1;
                    acc(p, &|gp| {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += gy[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &|gp| add_into(gp, &gy[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.dims2(*a);
                let len = node.value.row_len();
                acc(*a, &|ga| {
                    for i in 0..m {
                        for j in 0..len {
                            ga[i * n + start + j] += gy[i * len + j];
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let w = self.value(*a).row_len();
                acc(*a, &|ga| add_into(&mut ga[start * w..start * w + gy.len()], gy));
            }
            Op::GatherRows(a, indices) => {
                let w = self.value(*a).row_len();
                acc(*a, &|ga| {
                    for (r, idx) in indices.iter().enumerate() {
                        if let Some(i) = *idx {
                            add_into(&mut ga[i * w..(i + 1) * w], &gy[r * w..(r + 1) * w]);
                        }
                    }
                });
            }
            Op::GroupMean(a, group) => {
                let c = self.dims2(*a).1;
                let inv = 1.0 / *group as f64;
                acc(*a, &|ga| {
                    for (r, chunk) in ga.chunks_mut(c).enumerate() {
                        let g = r / group;
                        for j in 0..c {
                            chunk[j] += inv * gy[g * c + j];
                        }
                    }
                });
            }
            Op::DepthwiseConv1d(x, w) => {
                let (t, c) = self.dims2(*x);
                let k = self.dims2(*w).0;
                let pad = k / 2;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for ti in 0..t {
                        for j in 0..k {
                            let src = ti + j;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            f(ti, j, src - pad);
                        }
                    }
                };
                acc(*x, &|gx| {
                    taps(&mut |ti, j, s| {
                        for ch in 0..c {
                            gx[s * c + ch] += wv[j * c + ch] * gy[ti * c + ch];
                        }
                    })
                });
                acc(*w, &|gw| {
                    taps(&mut |ti, j, s| {
                        for ch in 0..c {
                            gw[j * c + ch] += xv[s * c + ch] * gy[ti * c + ch];
                        }
                    })
                });
            }
            Op::ScalarFn(a, local) => {
                acc(*a, &|ga| {
                    for (g, &l) in ga.iter_mut().zip(local.data()) {
                        *g += gy[0] * l;
                    }
                });
            }
        }
    }
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Graph::new()
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient per parameter used in the graph, sorted by parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .param_vars
            .iter()
            .filter_map(|&(p, v)| self.get(v).map(|g| (p, g.clone())))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Numerically stable `ln(sum(exp(xs)))`; `-inf` for an empty or all `-inf`
/// input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// `ln(exp(a) + exp(b))`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
