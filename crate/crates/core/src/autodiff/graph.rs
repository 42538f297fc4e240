//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] records every operation of one forward pass. Node ids are
//! assigned in creation order, which is a topological order of the DAG, so
//! the backward sweep just walks the tape from the root downwards. Nodes that
//! do not depend on any gradient-carrying leaf are marked inert and never
//! receive a gradient.

use crate::autodiff::tensor::{log_softmax_rows, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { input: Var, weight: Var, bias: Var },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Activate(Var, Activation),
    /// 1 where the input is positive, 0 elsewhere. Locally constant.
    StepMask,
    Exp(Var),
    LogSoftmax(Var),
    PickPerRow(Var, Vec<usize>),
    Sum(Var),
    SumRows(Var),
    BroadcastCols(Var),
    RepeatRows(Var, usize),
    GroupSumRows(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    tracked: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that gradients can be taken with respect to.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(Op::Leaf, value, true)
    }

    /// Leaf excluded from differentiation (data, channel noise, labels).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(Op::Leaf, value, false)
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        Ok(self.push_unchecked(op, value, tracked))
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).expect_matrix(op)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// `input · weight + bias`, with `bias` broadcast over rows.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (_, d_in) = self.matrix(input, "affine")?;
        let (w_in, d_out) = self.matrix(weight, "affine")?;
        if d_in != w_in || self.value(bias).len() != d_out {
            return Err(Error::shape(
                "affine",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.shape(input),
                    self.shape(weight),
                    self.shape(bias)
                ),
            ));
        }
        let out = self
            .value(input)
            .matmul(self.value(weight))?
            .add_row(self.value(bias))?;
        self.push(
            Op::Affine { input, weight, bias },
            out,
            "affine",
            &[input, weight, bias],
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), out, "matmul", &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), out, "add", &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), out, "sub", &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), out, "mul", &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        self.push(Op::Scale(a, c), out, "scale", &[a])
    }

    /// Adds the constant `c` to every entry.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::Offset(a), out, "offset", &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let out = match kind {
            Activation::Relu => self.value(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Activation::Tanh => self.value(a).map(f64::tanh),
        };
        self.push(Op::Activate(a, kind), out, "activation", &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Tanh)
    }

    /// Derivative of the activation, evaluated from the pre-activation
    /// `pre` and the recorded activation output `post`. The result stays
    /// differentiable: for tanh it is `1 - post²`, for relu it is the
    /// locally constant step mask (`relu'(0) = 0`).
    pub fn activation_derivative(&mut self, pre: Var, post: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => {
                let out = self.value(pre).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.push(Op::StepMask, out, "step_mask", &[pre])
            }
            Activation::Tanh => {
                let sq = self.mul(post, post)?;
                let neg = self.scale(sq, -1.0)?;
                self.offset(neg, 1.0)
            }
        }
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out, "exp", &[a])
    }

    pub fn log_softmax(&mut self, logits: Var) -> Result<Var> {
        let (_, c) = self.matrix(logits, "log_softmax")?;
        if c < 2 {
            return Err(Error::shape("log_softmax", "need at least 2 classes"));
        }
        let out = log_softmax_rows(self.value(logits))?;
        self.push(Op::LogSoftmax(logits), out, "log_softmax", &[logits])
    }

    /// Selects `a[i, idx[i]]` from every row, giving an `[n, 1]` column.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix(a, "pick_per_row")?;
        if idx.len() != n {
            return Err(Error::shape(
                "pick_per_row",
                format!("{} indices for {n} rows", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::ClassOutOfRange {
                class: bad,
                classes: c,
            });
        }
        let t = self.value(a);
        let data = idx.iter().enumerate().map(|(i, &j)| t.get(i, j)).collect();
        let out = Tensor::matrix(n, 1, data)?;
        self.push(Op::PickPerRow(a, idx.to_vec()), out, "pick_per_row", &[a])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out, "sum", &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Row sums: `[n, d] -> [n, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (n, _) = self.matrix(a, "sum_rows")?;
        let t = self.value(a);
        let data = (0..n).map(|i| t.row(i).iter().sum()).collect();
        let out = Tensor::matrix(n, 1, data)?;
        self.push(Op::SumRows(a), out, "sum_rows", &[a])
    }

    /// Repeats an `[n, 1]` column across `cols` columns.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let (n, c) = self.matrix(a, "broadcast_cols")?;
        if c != 1 || cols == 0 {
            return Err(Error::shape("broadcast_cols", format!("[{n}, {c}] to {cols} columns")));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(n * cols);
        for i in 0..n {
            data.extend(std::iter::repeat_n(t.get(i, 0), cols));
        }
        let out = Tensor::matrix(n, cols, data)?;
        self.push(Op::BroadcastCols(a), out, "broadcast_cols", &[a])
    }

    /// `[n, d] -> [n·times, d]`, each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (n, d) = self.matrix(a, "repeat_rows")?;
        if times == 0 {
            return Err(Error::shape("repeat_rows", "times must be positive"));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(n * times * d);
        for i in 0..n {
            for _ in 0..times {
                data.extend_from_slice(t.row(i));
            }
        }
        let out = Tensor::matrix(n * times, d, data)?;
        self.push(Op::RepeatRows(a, times), out, "repeat_rows", &[a])
    }

    /// `[n·group, d] -> [n, d]`, summing consecutive blocks of `group` rows.
    pub fn group_sum_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let (rows, d) = self.matrix(a, "group_sum_rows")?;
        if group == 0 || rows % group != 0 {
            return Err(Error::shape(
                "group_sum_rows",
                format!("{rows} rows not divisible into groups of {group}"),
            ));
        }
        let n = rows / group;
        let t = self.value(a);
        let mut data = vec![0.0; n * d];
        for r in 0..rows {
            let out_row = &mut data[(r / group) * d..(r / group + 1) * d];
            for (o, &v) in out_row.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let out = Tensor::matrix(n, d, data)?;
        self.push(Op::GroupSumRows(a, group), out, "group_sum_rows", &[a])
    }

    /// Reverse sweep from a scalar `root`, returning one gradient per entry
    /// of `wrt` (zeros where `root` does not depend on the node). The graph
    /// is not modified, so repeated calls give identical results.
    pub fn backward(&self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.backward_all(root)?;
        Ok(wrt
            .iter()
            .map(|v| {
                grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*v)))
            })
            .collect())
    }

    fn backward_all(&self, root: Var) -> Result<Vec<Option<Tensor>>> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut send = |v: Var, contribution: Tensor| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Affine { input, weight, bias } => {
                if self.nodes[input.0].tracked {
                    send(*input, g.matmul_bt(self.value(*weight))?);
                }
                if self.nodes[weight.0].tracked {
                    send(*weight, self.value(*input).matmul_at(g)?);
                }
                if self.nodes[bias.0].tracked {
                    let sums = g.column_sums();
                    let shaped = Tensor::new(self.shape(*bias).to_vec(), sums.into_data())?;
                    send(*bias, shaped);
                }
            }
            Op::MatMul(a, b) => {
                if self.nodes[a.0].tracked {
                    send(*a, g.matmul_bt(self.value(*b))?);
                }
                if self.nodes[b.0].tracked {
                    send(*b, self.value(*a).matmul_at(g)?);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(self.value(*b), |x, y| x * y));
                send(*b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::Scale(a, c) => send(*a, g.map(|x| c * x)),
            Op::Offset(a) => send(*a, g.clone()),
            Op::Activate(a, Activation::Relu) => {
                send(
                    *a,
                    g.zip_map(self.value(*a), |x, pre| if pre > 0.0 { x } else { 0.0 }),
                );
            }
            Op::Activate(a, Activation::Tanh) => {
                send(*a, g.zip_map(&node.value, |x, t| x * (1.0 - t * t)));
            }
            Op::StepMask => {}
            Op::Exp(a) => send(*a, g.zip_map(&node.value, |x, e| x * e)),
            Op::LogSoftmax(a) => {
                let (n, c) = (node.value.rows(), node.value.cols());
                let mut out = g.clone();
                for r in 0..n {
                    let gs: f64 = g.row(r).iter().sum();
                    let row = &mut out.data_mut()[r * c..(r + 1) * c];
                    for (o, &lp) in row.iter_mut().zip(node.value.row(r)) {
                        *o -= lp.exp() * gs;
                    }
                }
                send(*a, out);
            }
            Op::PickPerRow(a, idx) => {
                let mut out = Tensor::zeros(self.shape(*a));
                let c = out.cols();
                for (r, &j) in idx.iter().enumerate() {
                    out.data_mut()[r * c + j] = g.data()[r];
                }
                send(*a, out);
            }
            Op::Sum(a) => send(*a, Tensor::full(self.shape(*a), g.item())),
            Op::SumRows(a) => {
                let (n, d) = (self.value(*a).rows(), self.value(*a).cols());
                let mut data = Vec::with_capacity(n * d);
                for r in 0..n {
                    data.extend(std::iter::repeat_n(g.data()[r], d));
                }
                send(*a, Tensor::matrix(n, d, data)?);
            }
            Op::BroadcastCols(a) => {
                let n = g.rows();
                let data = (0..n).map(|r| g.row(r).iter().sum()).collect();
                send(*a, Tensor::matrix(n, 1, data)?);
            }
            Op::RepeatRows(a, times) => {
                let (n, d) = (self.value(*a).rows(), self.value(*a).cols());
                let mut data = vec![0.0; n * d];
                for r in 0..g.rows() {
                    let dst = &mut data[(r / times) * d..(r / times + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                send(*a, Tensor::matrix(n, d, data)?);
            }
            Op::GroupSumRows(a, group) => {
                let (rows, d) = (self.value(*a).rows(), self.value(*a).cols());
                let mut data = Vec::with_capacity(rows * d);
                for r in 0..rows {
                    data.extend_from_slice(g.row(r / group));
                }
                send(*a, Tensor::matrix(rows, d, data)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn affine_identity_and_zero_weight() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[vec![1.0, 2.0]]));
        let w = g.leaf(Tensor::identity(2));
        let b = g.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let w0 = g.leaf(Tensor::zeros(&[2, 2]));
        let b2 = g.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let y2 = g.affine(x, w0, b2).unwrap();
        assert_eq!(g.value(y2).data(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_rejects_shape_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[vec![1.0, 2.0, 3.0]]));
        let w = g.leaf(Tensor::identity(2));
        let b = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.affine(x, w, b), Err(Error::Shape { .. })));
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn relu_and_tanh_values() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[vec![-1.0, 0.0, 2.0]]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.leaf(m(&[vec![0.0]]));
        let t = g.tanh(z).unwrap();
        assert_eq!(g.value(t).data(), &[0.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[vec![0.0, 1.0]]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let gx = &g.backward(s, &[x]).unwrap()[0];
        assert_eq!(gx.data(), &[0.0, 1.0]);
    }

    #[test]
    fn log_softmax_symmetric() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[vec![0.0, 0.0]]));
        let l = g.log_softmax(x).unwrap();
        let ln2 = std::f64::consts::LN_2;
        for v in g.value(l).data() {
            assert!((v + ln2).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_rejects_single_class() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[vec![0.0]]));
        assert!(g.log_softmax(x).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[vec![1.0, -2.0, 3.0]]));
        let s = g.sum(x).unwrap();
        let gx = &g.backward(s, &[x]).unwrap()[0];
        assert_eq!(gx.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_scaled_root_gives_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[vec![1.0, 2.0]]));
        let t = g.tanh(x).unwrap();
        let s = g.sum(t).unwrap();
        let z = g.scale(s, 0.0).unwrap();
        let gx = &g.backward(z, &[x]).unwrap()[0];
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[vec![1.0, 2.0]]));
        assert!(matches!(g.backward(x, &[x]), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn backward_is_idempotent() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[vec![0.3, -0.7]]));
        let t = g.tanh(x).unwrap();
        let p = g.mul(t, x).unwrap();
        let s = g.sum(p).unwrap();
        let a = g.backward(s, &[x]).unwrap();
        let b = g.backward(s, &[x]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unrelated_leaf_gets_zeros() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[vec![1.0]]));
        let y = g.leaf(m(&[vec![1.0, 2.0]]));
        let s = g.sum(x).unwrap();
        let gy = &g.backward(s, &[y]).unwrap()[0];
        assert_eq!(gy.shape(), &[1, 2]);
        assert!(gy.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pick_rejects_out_of_range() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[vec![1.0, 2.0]]));
        assert!(matches!(
            g.pick_per_row(x, &[2]),
            Err(Error::ClassOutOfRange { class: 2, classes: 2 })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[vec![1000.0]]));
        assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
    }
}
