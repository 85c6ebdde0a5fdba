//! Tape-based reverse-mode differentiation over `f64` matrices.
//!
//! A [`Graph`] records matrix operations during the forward pass; calling
//! [`Graph::backward`] on a scalar node replays the tape in reverse and
//! accumulates exact derivatives for every input node via the chain rule.
//! Inputs registered with a parameter slot collect their gradients into
//! [`Gradients`], keyed by slot index.
//!
//! Vectors are represented as single-row (`1 x n`) or single-column
//! (`m x 1`) matrices; batches stack one row per batch element.

use crate::error::{Error, Result};
use ndarray::{concatenate, Array2, Axis};

/// Handle to a node in the tape. Cheap to copy; only valid for the graph
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Leaf holding a value; `Some(slot)` marks a trainable parameter.
    Input { param: Option<usize> },
    /// Leaf treated as a constant (no gradient collected).
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `(m x n) + (1 x n)` row broadcast, e.g. bias addition.
    AddRow(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Transpose(usize),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    /// Column slice `[start, end)` of the source node.
    SliceCols(usize, usize, usize),
    /// `(m x n) -> (m x 1)` sum over columns.
    RowSum(usize),
    /// `-> (1 x 1)` sum over all entries.
    SumAll(usize),
    /// `(m x 1) -> (m x n)` tile across columns.
    BroadcastCols(usize),
    /// `(1 x n) -> (m x n)` tile across rows.
    BroadcastRows(usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients of one scalar with respect to every parameter-tagged input,
/// keyed by the parameter slot passed to [`Graph::param`].
#[derive(Debug)]
pub struct Gradients {
    by_slot: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for a slot; slots never touched by the loss get zeros of
    /// the requested shape.
    pub fn get(&self, slot: usize, shape: (usize, usize)) -> Array2<f64> {
        match self.by_slot.get(slot).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }

    pub fn get_ref(&self, slot: usize) -> Option<&Array2<f64>> {
        self.by_slot.get(slot).and_then(|g| g.as_ref())
    }

    pub fn slot_count(&self) -> usize {
        self.by_slot.len()
    }
}

/// Recorded computation. Append-only; node order is the topological order.
pub struct Graph {
    nodes: Vec<Node>,
    param_slots: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_slots: 0,
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of any node.
    pub fn value(&self, v: Var) -> &Array2<f64> {
        self.val(v)
    }

    /// Value of a `1 x 1` node as a plain scalar.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.val(v);
        assert_eq!(a.dim(), (1, 1), "scalar_value on non-scalar node");
        a[(0, 0)]
    }

    /// Register a trainable parameter leaf under `slot`.
    pub fn param(&mut self, slot: usize, value: Array2<f64>) -> Var {
        self.param_slots = self.param_slots.max(slot + 1);
        self.push(value, Op::Input { param: Some(slot) })
    }

    /// Register a non-trainable leaf.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input { param: None })
    }

    /// Register a constant (identical to `input`; named for intent).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.val(a), self.val(b));
        assert_eq!(
            av.ncols(),
            bv.nrows(),
            "matmul shape mismatch: {:?} x {:?}",
            av.dim(),
            bv.dim()
        );
        let value = av.dot(bv);
        self.push(value, Op::MatMul(a.0, b.0))
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, op: fn(usize, usize) -> Op) -> Var {
        let (av, bv) = (self.val(a), self.val(b));
        assert_eq!(av.dim(), bv.dim(), "elementwise shape mismatch");
        let value = match op(a.0, b.0) {
            Op::Add(..) => av + bv,
            Op::Sub(..) => av - bv,
            Op::Mul(..) => av * bv,
            Op::Div(..) => av / bv,
            _ => unreachable!(),
        };
        self.push(value, op(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Div)
    }

    /// `(m x n) + (1 x n)`: add a row vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.val(a), self.val(row));
        assert_eq!(rv.nrows(), 1, "add_row expects a 1 x n row vector");
        assert_eq!(av.ncols(), rv.ncols(), "add_row width mismatch");
        let value = av + rv;
        self.push(value, Op::AddRow(a.0, row.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.val(a) * k;
        self.push(value, Op::Scale(a.0, k))
    }

    fn unary(&mut self, a: Var, op: fn(usize) -> Op) -> Var {
        let value = match op(a.0) {
            Op::Sigmoid(_) => self.val(a).mapv(|x| 1.0 / (1.0 + (-x).exp())),
            Op::Tanh(_) => self.val(a).mapv(f64::tanh),
            Op::Relu(_) => self.val(a).mapv(|x| x.max(0.0)),
            Op::Exp(_) => self.val(a).mapv(f64::exp),
            Op::Ln(_) => self.val(a).mapv(f64::ln),
            Op::Sqrt(_) => self.val(a).mapv(f64::sqrt),
            Op::Square(_) => self.val(a).mapv(|x| x * x),
            _ => unreachable!(),
        };
        self.push(value, op(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.val(a).t().to_owned();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.val(a), self.val(b));
        assert_eq!(av.ncols(), bv.ncols(), "concat_rows width mismatch");
        let value = concatenate(Axis(0), &[av.view(), bv.view()]).expect("concat_rows");
        self.push(value, Op::ConcatRows(a.0, b.0))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.val(a), self.val(b));
        assert_eq!(av.nrows(), bv.nrows(), "concat_cols height mismatch");
        let value = concatenate(Axis(1), &[av.view(), bv.view()]).expect("concat_cols");
        self.push(value, Op::ConcatCols(a.0, b.0))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.val(a);
        assert!(start < end && end <= av.ncols(), "slice_cols out of range");
        let value = av.slice(ndarray::s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a.0, start, end))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let value = av
            .sum_axis(Axis(1))
            .into_shape_with_order((av.nrows(), 1))
            .expect("row_sum shape");
        self.push(value, Op::RowSum(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.val(a).sum());
        self.push(value, Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.val(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `(m x 1) -> (m x n)`.
    pub fn broadcast_cols(&mut self, a: Var, n: usize) -> Var {
        let av = self.val(a);
        assert_eq!(av.ncols(), 1, "broadcast_cols expects m x 1");
        let value = av
            .broadcast((av.nrows(), n))
            .expect("broadcast_cols")
            .to_owned();
        self.push(value, Op::BroadcastCols(a.0))
    }

    /// `(1 x n) -> (m x n)`.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Var {
        let av = self.val(a);
        assert_eq!(av.nrows(), 1, "broadcast_rows expects 1 x n");
        let value = av.broadcast((m, av.ncols())).expect("broadcast_rows").to_owned();
        self.push(value, Op::BroadcastRows(a.0))
    }

    /// Reverse pass from a scalar node. Returns per-parameter-slot gradients;
    /// parameters the loss does not reach are reported as zeros by
    /// [`Gradients::get`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.val(loss).dim() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a scalar (1 x 1) loss node, got {:?}",
                self.val(loss).dim()
            )));
        }
        let mut adjoint: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoint[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            let g = match adjoint[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Input { .. } | Op::Constant => {
                    // restore: leaves keep their accumulated gradient
                    adjoint[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&g);
                    accumulate(&mut adjoint[*a], da);
                    accumulate(&mut adjoint[*b], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoint[*a], g.clone());
                    accumulate(&mut adjoint[*b], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adjoint[*a], g.clone());
                    accumulate(&mut adjoint[*b], -g);
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[*b].value;
                    let db = &g * &self.nodes[*a].value;
                    accumulate(&mut adjoint[*a], da);
                    accumulate(&mut adjoint[*b], db);
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[*b].value;
                    let da = &g / bv;
                    let db = -&g * &self.nodes[*a].value / (bv * bv);
                    accumulate(&mut adjoint[*a], da);
                    accumulate(&mut adjoint[*b], db);
                }
                Op::AddRow(a, r) => {
                    let dr = g
                        .sum_axis(Axis(0))
                        .into_shape_with_order((1, g.ncols()))
                        .expect("add_row grad shape");
                    accumulate(&mut adjoint[*a], g);
                    accumulate(&mut adjoint[*r], dr);
                }
                Op::Scale(a, k) => accumulate(&mut adjoint[*a], &g * *k),
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    accumulate(&mut adjoint[*a], &g * y * &y.mapv(|v| 1.0 - v));
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    accumulate(&mut adjoint[*a], &g * &y.mapv(|v| 1.0 - v * v));
                }
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    accumulate(&mut adjoint[*a], &g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                }
                Op::Exp(a) => {
                    let y = &self.nodes[idx].value;
                    accumulate(&mut adjoint[*a], &g * y);
                }
                Op::Ln(a) => {
                    accumulate(&mut adjoint[*a], &g / &self.nodes[*a].value);
                }
                Op::Sqrt(a) => {
                    let y = &self.nodes[idx].value;
                    accumulate(&mut adjoint[*a], &g * 0.5 / y);
                }
                Op::Square(a) => {
                    accumulate(&mut adjoint[*a], &g * 2.0 * &self.nodes[*a].value);
                }
                Op::Transpose(a) => accumulate(&mut adjoint[*a], g.t().to_owned()),
                Op::ConcatRows(a, b) => {
                    let ra = self.nodes[*a].value.nrows();
                    accumulate(&mut adjoint[*a], g.slice(ndarray::s![..ra, ..]).to_owned());
                    accumulate(&mut adjoint[*b], g.slice(ndarray::s![ra.., ..]).to_owned());
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.ncols();
                    accumulate(&mut adjoint[*a], g.slice(ndarray::s![.., ..ca]).to_owned());
                    accumulate(&mut adjoint[*b], g.slice(ndarray::s![.., ca..]).to_owned());
                }
                Op::SliceCols(a, start, end) => {
                    let mut da = Array2::zeros(self.nodes[*a].value.dim());
                    da.slice_mut(ndarray::s![.., *start..*end]).assign(&g);
                    accumulate(&mut adjoint[*a], da);
                }
                Op::RowSum(a) => {
                    let n = self.nodes[*a].value.ncols();
                    let da = g.broadcast((g.nrows(), n)).expect("row_sum grad").to_owned();
                    accumulate(&mut adjoint[*a], da);
                }
                Op::SumAll(a) => {
                    let da = Array2::from_elem(self.nodes[*a].value.dim(), g[(0, 0)]);
                    accumulate(&mut adjoint[*a], da);
                }
                Op::BroadcastCols(a) => {
                    let da = g
                        .sum_axis(Axis(1))
                        .into_shape_with_order((g.nrows(), 1))
                        .expect("broadcast_cols grad");
                    accumulate(&mut adjoint[*a], da);
                }
                Op::BroadcastRows(a) => {
                    let da = g
                        .sum_axis(Axis(0))
                        .into_shape_with_order((1, g.ncols()))
                        .expect("broadcast_rows grad");
                    accumulate(&mut adjoint[*a], da);
                }
            }
        }

        let mut by_slot: Vec<Option<Array2<f64>>> = (0..self.param_slots).map(|_| None).collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Input { param: Some(slot) } = node.op {
                if let Some(g) = adjoint[idx].take() {
                    accumulate(&mut by_slot[slot], g);
                }
            }
        }
        Ok(Gradients { by_slot })
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &delta,
        None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` with respect to `inputs[which]`.
    fn finite_diff(
        inputs: &[Array2<f64>],
        which: usize,
        f: &dyn Fn(&[Array2<f64>]) -> f64,
    ) -> Array2<f64> {
        let h = 1e-6;
        let mut grad = Array2::zeros(inputs[which].dim());
        for idx in 0..inputs[which].len() {
            let (r, c) = (idx / inputs[which].ncols(), idx % inputs[which].ncols());
            let mut plus = inputs.to_vec();
            plus[which][(r, c)] += h;
            let mut minus = inputs.to_vec();
            minus[which][(r, c)] -= h;
            grad[(r, c)] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grad
    }

    fn check_grads(inputs: Vec<Array2<f64>>, build: &dyn Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |vals: &[Array2<f64>]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals
                .iter()
                .enumerate()
                .map(|(i, v)| g.param(i, v.clone()))
                .collect();
            let out = build(&mut g, &vars);
            g.scalar_value(out)
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, v)| g.param(i, v.clone()))
            .collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        for which in 0..inputs.len() {
            let analytic = grads.get(which, inputs[which].dim());
            let numeric = finite_diff(&inputs, which, &eval);
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                let denom = n.abs().max(1e-3);
                assert!(
                    (a - n).abs() / denom < 1e-5,
                    "gradient mismatch for input {which}: analytic {a}, numeric {n}"
                );
            }
        }
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        check_grads(vec![a, b], &|g, v| {
            let m = g.matmul(v[0], v[1]);
            let s = g.square(m);
            g.sum_all(s)
        });
    }

    #[test]
    fn elementwise_and_broadcast_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 3, 3);
        let b = random_matrix(&mut rng, 3, 3).mapv(|x| x + 2.5); // keep away from 0 for div
        let r = random_matrix(&mut rng, 1, 3);
        check_grads(vec![a, b, r], &|g, v| {
            let d = g.div(v[0], v[1]);
            let m = g.mul(d, v[0]);
            let s = g.add_row(m, v[2]);
            let t = g.tanh(s);
            g.mean_all(t)
        });
    }

    #[test]
    fn nonlinearity_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 2, 5).mapv(|x| x + 1.5); // positive for ln/sqrt
        check_grads(vec![a], &|g, v| {
            let sig = g.sigmoid(v[0]);
            let ex = g.exp(sig);
            let ln = g.ln(ex);
            let sq = g.sqrt(ln);
            let rs = g.row_sum(sq);
            g.sum_all(rs)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_matrix(&mut rng, 3, 2);
        let b = random_matrix(&mut rng, 3, 4);
        let c = random_matrix(&mut rng, 3, 1);
        check_grads(vec![a, b, c], &|g, v| {
            let cat = g.concat_cols(v[0], v[1]);
            let sl = g.slice_cols(cat, 1, 5);
            let bc = g.broadcast_cols(v[2], 4);
            let m = g.mul(sl, bc);
            let t = g.transpose(m);
            let sq = g.square(t);
            g.sum_all(sq)
        });
    }

    #[test]
    fn concat_rows_and_relu_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 2, 3);
        let b = random_matrix(&mut rng, 4, 3);
        check_grads(vec![a, b], &|g, v| {
            let cat = g.concat_rows(v[0], v[1]);
            let r = g.relu(cat);
            let s = g.scale(r, 1.7);
            g.mean_all(s)
        });
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let a = g.input(array![[1.0, 2.0], [3.0, 4.0]]);
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_parameters_get_zero_gradients() {
        let mut g = Graph::new();
        let a = g.param(0, array![[1.0, 2.0]]);
        let _unused = g.param(1, array![[5.0]]);
        let s = g.square(a);
        let loss = g.sum_all(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(1, (1, 1)), array![[0.0f64]]);
        assert_eq!(grads.get(0, (1, 2)), array![[2.0f64, 4.0]]);
    }

    #[test]
    fn gradients_are_linear_in_the_loss() {
        // grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2)
        let mut g = Graph::new();
        let p = g.param(0, array![[0.3, -0.7], [1.1, 0.2]]);
        let sq = g.square(p);
        let l1 = g.sum_all(sq);
        let tn = g.tanh(p);
        let l2 = g.mean_all(tn);
        let a = g.scale(l1, 2.5);
        let b = g.scale(l2, -1.25);
        let combo = g.add(a, b);

        let g1 = g.backward(l1).unwrap().get(0, (2, 2));
        let g2 = g.backward(l2).unwrap().get(0, (2, 2));
        let gc = g.backward(combo).unwrap().get(0, (2, 2));
        let expect = &g1 * 2.5 + &g2 * (-1.25);
        for (x, y) in gc.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_loss_yields_zero_gradients() {
        let mut g = Graph::new();
        let _p = g.param(0, array![[1.0, 2.0]]);
        let c = g.scalar(42.0);
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(0, (1, 2)), Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn shared_subexpression_accumulates_both_paths() {
        // f = sum(x*x) + sum(x), df/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.param(0, array![[3.0, -2.0]]);
        let sq = g.mul(x, x);
        let l1 = g.sum_all(sq);
        let l2 = g.sum_all(x);
        let loss = g.add(l1, l2);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(0, (1, 2)), array![[7.0f64, -3.0]]);
    }
}
