//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward operation as a node holding its value and
//! the handles of its inputs. Nodes are appended in evaluation order, so a
//! single reverse sweep over the node list is a valid topological order for
//! [`Graph::backward`].

use std::collections::BTreeMap;

use super::value::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for a user-defined op: `(grad_out, inputs, output) -> grad per input`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor> + Send + Sync>;

/// Elementwise operation kinds exposed through [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Sigmoid,
    Relu,
    Add,
    Hadamard,
    Scale(f64),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    MeanRows(Var),
    BroadcastRows(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Custom(Vec<Var>, BackwardFn),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn check2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::dim(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.rows(), t.cols()))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows_value(t: &Tensor) -> Tensor {
    let c = t.cols().max(1);
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

/// `a · bᵀ` without materializing the transpose.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &bd[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out).expect("shape")
}

/// `aᵀ · b` without materializing the transpose.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let br = &bd[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![k, n], out).expect("shape")
}

impl Graph {
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

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf)
    }

    /// Trainable leaf registered under `name`. Binding the same name twice
    /// returns the original handle.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.push("param", value.clone(), Op::Leaf)?;
        self.params.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = check2d("matmul", va)?;
        let (k2, n) = check2d("matmul", vb)?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        check2d("transpose", self.value(a))?;
        let value = self.value(a).transpose();
        self.push("transpose", value, Op::Transpose(a))
    }

    /// Sum of equal shapes, or `m×n + 1×n` with the row broadcast down.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let value = va.zip_map(vb, |x, y| x + y)?;
            return self.push("add", value, Op::Add(a, b));
        }
        let (m, n) = check2d("add", va)?;
        let (r, c) = check2d("add", vb)?;
        if r != 1 || c != n {
            return Err(Error::dim("add", format!("{m}x{n} plus {r}x{c}")));
        }
        let bias = vb.data();
        let data = va
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(vec![m, n], data)?;
        self.push("add", value, Op::AddRow(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x - y)
            .map_err(|_| Error::dim("sub", "shapes differ"))?;
        self.push("sub", value, Op::Sub(a, b))
    }

    /// Hadamard product of equal shapes, or an `m×1` column scaling every
    /// column of an `m×n` operand (either argument order).
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let value = va.zip_map(vb, |x, y| x * y)?;
            return self.push("hadamard", value, Op::Mul(a, b));
        }
        let (col, mat) = match (va.shape(), vb.shape()) {
            ([m, 1], [m2, _]) if m == m2 => (a, b),
            ([m, _], [m2, 1]) if m == m2 => (b, a),
            (sa, sb) => {
                return Err(Error::dim("hadamard", format!("{sa:?} vs {sb:?}")));
            }
        };
        let (vc, vm) = (self.value(col), self.value(mat));
        let n = vm.cols();
        let data = vm
            .data()
            .chunks(n)
            .zip(vc.data())
            .flat_map(|(row, &s)| row.iter().map(move |x| s * x))
            .collect();
        let value = Tensor::new(vm.shape().to_vec(), data)?;
        self.push("hadamard", value, Op::MulCol(col, mat))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| factor * x);
        self.push("scale", value, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push("relu", value, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::abs);
        self.push("abs", value, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        self.push("square", value, Op::Square(a))
    }

    pub fn elementwise(&mut self, kind: Elementwise, inputs: &[Var]) -> Result<Var> {
        match (kind, inputs) {
            (Elementwise::Sigmoid, [a]) => self.sigmoid(*a),
            (Elementwise::Relu, [a]) => self.relu(*a),
            (Elementwise::Scale(f), [a]) => self.scale(*a, f),
            (Elementwise::Add, [a, b]) => self.add(*a, *b),
            (Elementwise::Hadamard, [a, b]) => self.hadamard(*a, *b),
            (kind, inputs) => Err(Error::Contract(format!(
                "{kind:?} takes a different arity than {}",
                inputs.len()
            ))),
        }
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = check2d("softmax_rows", self.value(a))?;
        if c == 0 {
            return Err(Error::dim("softmax_rows", "zero columns"));
        }
        let value = softmax_rows_value(self.value(a));
        self.push("softmax_rows", value, Op::SoftmaxRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        for v in &values {
            check2d("concat_rows", v)?;
        }
        let value = Tensor::concat_rows(&values)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        check2d("slice_rows", self.value(a))?;
        let value = self.value(a).slice_rows(start, end)?;
        self.push("slice_rows", value, Op::SliceRows(a, start))
    }

    /// Column means of an `m×n` matrix as `1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = check2d("mean_rows", self.value(a))?;
        if m == 0 {
            return Err(Error::dim("mean_rows", "no rows"));
        }
        let mut data = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            for (d, x) in data.iter_mut().zip(row) {
                *d += x;
            }
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        let value = Tensor::new(vec![1, n], data)?;
        self.push("mean_rows", value, Op::MeanRows(a))
    }

    /// Repeats a `1×n` row `m` times.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let (r, n) = check2d("broadcast_rows", self.value(a))?;
        if r != 1 {
            return Err(Error::dim("broadcast_rows", format!("expected 1 row, got {r}")));
        }
        let row = self.value(a).data().to_vec();
        let data = (0..m).flat_map(|_| row.iter().copied()).collect();
        let value = Tensor::new(vec![m, n], data)?;
        self.push("broadcast_rows", value, Op::BroadcastRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", value, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a))
    }

    /// Records a user-defined op whose forward value was computed by the caller.
    pub fn custom(&mut self, name: &'static str, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Result<Var> {
        self.push(name, value, Op::Custom(inputs.to_vec(), backward))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let out = &node.value;
            let mut contributions: Vec<(Var, Tensor)> = Vec::new();
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    contributions.push((*a, matmul_nt(&gout, self.value(*b))));
                    contributions.push((*b, matmul_tn(self.value(*a), &gout)));
                }
                Op::Transpose(a) => contributions.push((*a, gout.transpose())),
                Op::Add(a, b) => {
                    contributions.push((*a, gout.clone()));
                    contributions.push((*b, gout));
                }
                Op::Sub(a, b) => {
                    contributions.push((*b, gout.map(|g| -g)));
                    contributions.push((*a, gout));
                }
                Op::AddRow(a, b) => {
                    let n = gout.cols();
                    let mut gb = vec![0.0; n];
                    for row in gout.data().chunks(n) {
                        for (d, g) in gb.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    contributions.push((*b, Tensor::new(vec![1, n], gb)?));
                    contributions.push((*a, gout));
                }
                Op::Mul(a, b) => {
                    contributions.push((*a, gout.zip_map(self.value(*b), |g, y| g * y)?));
                    contributions.push((*b, gout.zip_map(self.value(*a), |g, x| g * x)?));
                }
                Op::MulCol(col, mat) => {
                    let (vc, vm) = (self.value(*col), self.value(*mat));
                    let n = vm.cols();
                    let gc: Vec<f64> = gout
                        .data()
                        .chunks(n)
                        .zip(vm.data().chunks(n))
                        .map(|(g, x)| g.iter().zip(x).map(|(g, x)| g * x).sum())
                        .collect();
                    let gm: Vec<f64> = gout
                        .data()
                        .chunks(n)
                        .zip(vc.data())
                        .flat_map(|(g, &s)| g.iter().map(move |g| g * s))
                        .collect();
                    contributions.push((*col, Tensor::new(vc.shape().to_vec(), gc)?));
                    contributions.push((*mat, Tensor::new(vm.shape().to_vec(), gm)?));
                }
                Op::Scale(a, f) => contributions.push((*a, gout.map(|g| f * g))),
                Op::Sigmoid(a) => {
                    contributions.push((*a, gout.zip_map(out, |g, s| g * s * (1.0 - s))?));
                }
                Op::Relu(a) => {
                    let g = gout.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })?;
                    contributions.push((*a, g));
                }
                Op::Abs(a) => {
                    let g = gout.zip_map(self.value(*a), |g, x| g * sign(x))?;
                    contributions.push((*a, g));
                }
                Op::Square(a) => {
                    let g = gout.zip_map(self.value(*a), |g, x| 2.0 * g * x)?;
                    contributions.push((*a, g));
                }
                Op::SoftmaxRows(a) => {
                    let c = out.cols();
                    let mut data = Vec::with_capacity(out.len());
                    for (y, g) in out.data().chunks(c).zip(gout.data().chunks(c)) {
                        let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                        data.extend(y.iter().zip(g).map(|(y, g)| y * (g - dot)));
                    }
                    contributions.push((*a, Tensor::new(out.shape().to_vec(), data)?));
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        contributions.push((*p, gout.slice_rows(start, start + rows)?));
                        start += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let c = src.cols();
                    let mut data = vec![0.0; src.len()];
                    data[start * c..start * c + gout.len()].copy_from_slice(gout.data());
                    contributions.push((*a, Tensor::new(src.shape().to_vec(), data)?));
                }
                Op::MeanRows(a) => {
                    let src = self.value(*a);
                    let m = src.rows() as f64;
                    let row: Vec<f64> = gout.data().iter().map(|g| g / m).collect();
                    let data = (0..src.rows()).flat_map(|_| row.iter().copied()).collect();
                    contributions.push((*a, Tensor::new(src.shape().to_vec(), data)?));
                }
                Op::BroadcastRows(a) => {
                    let n = gout.cols();
                    let mut data = vec![0.0; n];
                    for row in gout.data().chunks(n) {
                        for (d, g) in data.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    contributions.push((*a, Tensor::new(vec![1, n], data)?));
                }
                Op::Sum(a) => {
                    let g = gout.item()?;
                    contributions.push((*a, Tensor::full(self.value(*a).shape().to_vec(), g)));
                }
                Op::Mean(a) => {
                    let src = self.value(*a);
                    let g = gout.item()? / src.len() as f64;
                    contributions.push((*a, Tensor::full(src.shape().to_vec(), g)));
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    contributions.push((*a, gout.reshape(shape)?));
                }
                Op::Custom(inputs, backward) => {
                    let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let gs = backward(&gout, &values, out);
                    if gs.len() != inputs.len() {
                        return Err(Error::Contract("custom backward arity".into()));
                    }
                    for (v, g) in inputs.iter().zip(gs) {
                        if g.shape() != self.value(*v).shape() {
                            return Err(Error::Contract("custom backward shape".into()));
                        }
                        contributions.push((*v, g));
                    }
                }
            }
            for (v, g) in contributions {
                accumulate(&mut grads[v.0], g);
            }
        }

        let shapes = self.nodes[..=loss.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.params.clone(),
        })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => prev.zip_map(&g, |a, b| a + b).expect("gradient shapes agree"),
    });
}

/// Result of [`Graph::backward`]: gradients of the loss w.r.t. every leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient w.r.t. `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            Some(None) => Tensor::zeros(self.shapes[v.0].clone()),
            // Nodes created after the loss cannot reach it.
            None => Tensor::zeros(Vec::<usize>::new()),
        }
    }

    /// Gradients keyed by parameter name for every bound parameter.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &v)| (name.clone(), self.wrt(v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sigmoid_and_relu_points() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[0.0, -3.0, 3.0]])).unwrap();
        let s = g.sigmoid(x).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn column_broadcast_with_ones_is_identity() {
        let mut g = Graph::new();
        let e = g.constant(t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]])).unwrap();
        let a = g.constant(Tensor::ones(vec![2, 1])).unwrap();
        let out = g.hadamard(a, e).unwrap();
        assert_eq!(g.value(out), g.value(e));
        let swapped = g.hadamard(e, a).unwrap();
        assert_eq!(g.value(swapped), g.value(e));
    }

    #[test]
    fn incompatible_shapes_are_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(vec![3, 2])).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
        assert!(matches!(g.hadamard(a, b), Err(Error::Dimension { .. })));
        assert!(matches!(g.matmul(a, a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_single_column_and_symmetric_rows() {
        let mut g = Graph::new();
        let a = g.constant(t(&[&[3.0], &[-7.0]])).unwrap();
        let s = g.softmax_rows(a).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 1.0]);
        let b = g.constant(t(&[&[0.0, 0.0]])).unwrap();
        let s = g.softmax_rows(b).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let mut g = Graph::new();
        let a = g.constant(t(&[&[1000.0, 1000.5]])).unwrap();
        let s = g.softmax_rows(a).unwrap();
        let v = g.value(s).data();
        // 1/(1+e^{0.5}) evaluated independently of the max-shift path.
        let expected0 = 1.0 / (1.0 + 0.5f64.exp());
        assert!((v[0] - expected0).abs() < 1e-15);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[&[1e200]])).unwrap();
        assert!(matches!(g.square(a), Err(Error::NonFinite { op: "square" })));
        assert!(g.constant(t(&[&[f64::NAN]])).is_err());
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let p = g.param("p", &Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap()).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(p), Tensor::ones(vec![2, 3]));
    }

    #[test]
    fn grad_of_self_hadamard_is_twice_value() {
        let mut g = Graph::new();
        let pv = t(&[&[1.0, -2.0], &[0.25, 3.0]]);
        let p = g.param("p", &pv).unwrap();
        let sq = g.hadamard(p, p).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(p), pv.map(|x| 2.0 * x));
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let mut g = Graph::new();
        let p = g.param("p", &Tensor::ones(vec![1, 2])).unwrap();
        let q = g.param("q", &Tensor::ones(vec![3, 1])).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(q), Tensor::zeros(vec![3, 1]));
        assert_eq!(grads.params().len(), 2);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let p = g.param("p", &Tensor::ones(vec![1, 2])).unwrap();
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn binding_twice_reuses_the_leaf() {
        let mut g = Graph::new();
        let a = g.param("w", &Tensor::ones(vec![1, 1])).unwrap();
        let b = g.param("w", &Tensor::zeros(vec![1, 1])).unwrap();
        assert_eq!(a, b);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn elementwise_dispatch() {
        let mut g = Graph::new();
        let a = g.constant(t(&[&[2.0]])).unwrap();
        let s = g.elementwise(Elementwise::Scale(3.0), &[a]).unwrap();
        assert_eq!(g.value(s).data(), &[6.0]);
        assert!(g.elementwise(Elementwise::Add, &[a]).is_err());
    }
}
