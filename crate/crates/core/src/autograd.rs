//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation applied during one forward pass.
//! [`Tape::backward`] walks the record in reverse and returns the gradient of a
//! scalar (`1×1`) node with respect to every node that requires one. Nodes
//! created with [`Tape::constant`] never receive gradients, and neither does
//! anything computed only from constants.

use crate::losses::ctc_loss_and_grad;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddConst(Var),
    Relu(Var),
    Gelu(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SelectCols(Var, Vec<usize>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// Caches `1/σ` per row; the node value holds the normalized rows.
    LayerNorm(Var, Vec<S>),
    CausalUnfold(Var, usize),
    RowDiff(Var),
    Sum(Var),
    SumSquares(Var),
    /// Caches `∂loss/∂input` computed alongside the forward recursion.
    Ctc(Var, Matrix<S>),
}

#[derive(Debug)]
struct Node<S> {
    value: Matrix<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Matrix<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// `None` when the node does not influence the differentiated scalar or
    /// does not require a gradient.
    pub fn get(&self, var: Var) -> Option<&Matrix<S>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix<S>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<S> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Adds the `1×m` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = broadcast_rows(self.value(a), self.value(row), |x, y| x + y);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by the `1×m` row `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = broadcast_rows(self.value(a), self.value(row), |x, y| x * y);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    /// `a + c` for a constant `c` (masks, positional encodings).
    pub fn add_const(&mut self, a: Var, c: &Matrix<S>) -> Var {
        let value = self.value(a).zip_map(c, |x, y| x + y);
        let ng = self.ng(a);
        self.push(value, Op::AddConst(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(S::zero()));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Gathers the listed columns, in order.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let src = self.value(a);
        let value = Matrix::from_fn(src.rows(), cols.len(), |r, c| src.get(r, cols[c]));
        let ng = self.ng(a);
        self.push(value, Op::SelectCols(a, cols.to_vec()), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<S>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    /// Per-row standardization `(x − mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: S) -> Var {
        let mut value = self.value(a).clone();
        let n = S::from_usize_lossy(value.cols());
        let mut inv_std = Vec::with_capacity(value.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
            let inv = S::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let ng = self.ng(a);
        self.push(value, Op::LayerNorm(a, inv_std), ng)
    }

    /// Row `t` of the result is `[a[t−k+1] | … | a[t]]`, zero-padded before row 0.
    pub fn causal_unfold(&mut self, a: Var, k: usize) -> Var {
        assert!(k >= 1);
        let src = self.value(a);
        let (rows, cols) = src.shape();
        let mut value = Matrix::zeros(rows, cols * k);
        for t in 0..rows {
            for j in 0..k {
                // slot j holds row t - (k - 1 - j)
                let lag = k - 1 - j;
                if t >= lag {
                    value.row_mut(t)[j * cols..(j + 1) * cols].copy_from_slice(src.row(t - lag));
                }
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::CausalUnfold(a, k), ng)
    }

    /// Row `t` of the result is `a[t+1] − a[t]`; `rows − 1` rows.
    pub fn row_diff(&mut self, a: Var) -> Var {
        let src = self.value(a);
        assert!(src.rows() >= 2, "row_diff needs at least two rows");
        let value = Matrix::from_fn(src.rows() - 1, src.cols(), |r, c| {
            src.get(r + 1, c) - src.get(r, c)
        });
        let ng = self.ng(a);
        self.push(value, Op::RowDiff(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).as_slice().iter().map(|&x| x * x).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumSquares(a), ng)
    }

    /// CTC negative log-likelihood of `target` given per-frame log-probabilities
    /// (`T×U`). Infeasible targets yield `+inf` and a zero gradient.
    pub fn ctc_loss(&mut self, log_probs: Var, target: &[usize], blank: usize) -> Var {
        let (loss, grad) = ctc_loss_and_grad(self.value(log_probs), target, blank);
        let ng = self.ng(log_probs);
        self.push(Matrix::scalar(loss), Op::Ctc(log_probs, grad), ng)
    }

    /// Gradients of the scalar `output` with respect to every contributing node.
    pub fn backward(&self, output: Var) -> Gradients<S> {
        assert_eq!(
            self.value(output).shape(),
            (1, 1),
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<Matrix<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(output) {
            return Gradients { grads };
        }
        grads[output.0] = Some(Matrix::scalar(S::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut out: Vec<(Var, Matrix<S>)> = Vec::with_capacity(2);
            let mut send = |target: Var, contribution: Matrix<S>| {
                if self.nodes[target.0].needs_grad {
                    out.push((target, contribution));
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        send(*a, g.matmul_t(self.value(*b)));
                    }
                    if self.ng(*b) {
                        send(*b, self.value(*a).t_matmul(&g));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        send(*a, g.clone());
                    }
                    send(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        send(*a, g.clone());
                    }
                    if self.ng(*b) {
                        send(*b, g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        send(*a, g.zip_map(self.value(*b), |x, y| x * y));
                    }
                    if self.ng(*b) {
                        send(*b, g.zip_map(self.value(*a), |x, y| x * y));
                    }
                }
                Op::Scale(a, s) => send(*a, g.map(|x| x * *s)),
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        send(*row, column_sums(&g));
                    }
                    if self.ng(*a) {
                        send(*a, g.clone());
                    }
                }
                Op::MulRow(a, row) => {
                    let av = self.value(*a);
                    let rv = self.value(*row);
                    if self.ng(*row) {
                        send(*row, column_sums(&g.zip_map(av, |x, y| x * y)));
                    }
                    if self.ng(*a) {
                        send(*a, broadcast_rows(&g, rv, |x, y| x * y));
                    }
                }
                Op::AddConst(a) => send(*a, g.clone()),
                Op::Relu(a) => {
                    send(
                        *a,
                        g.zip_map(self.value(*a), |x, y| if y > S::zero() { x } else { S::zero() }),
                    );
                }
                Op::Gelu(a) => send(*a, g.zip_map(self.value(*a), |x, y| x * gelu_grad(y))),
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut full = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        full.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    send(*a, full);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        if self.ng(p) {
                            send(p, g.slice_cols(offset, cols));
                        }
                        offset += cols;
                    }
                }
                Op::SelectCols(a, cols) => {
                    let (rows, n) = self.value(*a).shape();
                    let mut full = Matrix::zeros(rows, n);
                    for r in 0..rows {
                        for (j, &c) in cols.iter().enumerate() {
                            let cur = full.get(r, c);
                            full.set(r, c, cur + g.get(r, j));
                        }
                    }
                    send(*a, full);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = yr[c] * (gr[c] - dot);
                        }
                    }
                    send(*a, dx);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gsum: S = g.row(r).iter().copied().sum();
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = g.get(r, c) - y.get(r, c).exp() * gsum;
                        }
                    }
                    send(*a, dx);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let n = S::from_usize_lossy(y.cols());
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let g_mean = gr.iter().copied().sum::<S>() / n;
                        let gy_mean = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum::<S>() / n;
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = inv_std[r] * (gr[c] - g_mean - yr[c] * gy_mean);
                        }
                    }
                    send(*a, dx);
                }
                Op::CausalUnfold(a, k) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    for t in 0..rows {
                        for j in 0..*k {
                            let lag = k - 1 - j;
                            if t >= lag {
                                let src = &g.row(t)[j * cols..(j + 1) * cols];
                                for (d, &s) in dx.row_mut(t - lag).iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                    }
                    send(*a, dx);
                }
                Op::RowDiff(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            let v = g.get(r, c);
                            dx.set(r + 1, c, dx.get(r + 1, c) + v);
                            dx.set(r, c, dx.get(r, c) - v);
                        }
                    }
                    send(*a, dx);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    send(*a, Matrix::filled(rows, cols, g.item()));
                }
                Op::SumSquares(a) => {
                    let two_g = S::lit(2.0) * g.item();
                    send(*a, self.value(*a).map(|x| two_g * x));
                }
                Op::Ctc(a, grad) => {
                    let s = g.item();
                    send(*a, grad.map(|x| x * s));
                }
            }
            for (target, contribution) in out {
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn broadcast_rows<S: Scalar>(a: &Matrix<S>, row: &Matrix<S>, f: impl Fn(S, S) -> S) -> Matrix<S> {
    assert_eq!(row.rows(), 1, "broadcast operand must be a single row");
    assert_eq!(a.cols(), row.cols(), "broadcast column mismatch");
    let r = row.row(0);
    Matrix::from_fn(a.rows(), a.cols(), |i, j| f(a.get(i, j), r[j]))
}

fn column_sums<S: Scalar>(m: &Matrix<S>) -> Matrix<S> {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, &x) in out.row_mut(0).iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    out
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let sech2 = S::one() - th * th;
    half * (S::one() + th) + half * x * sech2 * c * (S::one() + S::lit(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_tape_gradients;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn check(inputs: Vec<Matrix<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let report = check_tape_gradients(&inputs, 1e-6, &f);
        assert!(
            report.max_rel_error < 1e-6,
            "gradient mismatch: {report:?}"
        );
    }

    #[test]
    fn matmul_and_transpose_gradients() {
        check(
            vec![rand_matrix(3, 4, 1), rand_matrix(4, 2, 2)],
            |t, v| {
                let p = t.matmul(v[0], v[1]);
                let q = t.transpose(p);
                t.sum_squares(q)
            },
        );
    }

    #[test]
    fn broadcast_and_elementwise_gradients() {
        check(
            vec![rand_matrix(3, 4, 3), rand_matrix(1, 4, 4), rand_matrix(1, 4, 5), rand_matrix(3, 4, 6)],
            |t, v| {
                let a = t.add_row(v[0], v[1]);
                let b = t.mul_row(a, v[2]);
                let c = t.mul(b, v[3]);
                let d = t.sub(c, v[0]);
                let e = t.scale(d, 0.7);
                t.sum_squares(e)
            },
        );
    }

    #[test]
    fn nonlinearity_gradients() {
        check(vec![rand_matrix(3, 5, 7)], |t, v| {
            let a = t.gelu(v[0]);
            let b = t.relu(v[0]);
            let c = t.add(a, b);
            t.sum_squares(c)
        });
    }

    #[test]
    fn softmax_family_gradients() {
        check(vec![rand_matrix(3, 5, 8), rand_matrix(3, 5, 9)], |t, v| {
            let s = t.softmax_rows(v[0]);
            let ls = t.log_softmax_rows(v[0]);
            let a = t.mul(s, v[1]);
            let b = t.mul(ls, v[1]);
            let c = t.add(a, b);
            t.sum(c)
        });
    }

    #[test]
    fn layer_norm_gradient() {
        check(vec![rand_matrix(4, 6, 10), rand_matrix(4, 6, 11)], |t, v| {
            let n = t.layer_norm(v[0], 1e-5);
            let m = t.mul(n, v[1]);
            t.sum(m)
        });
    }

    #[test]
    fn structural_op_gradients() {
        check(vec![rand_matrix(5, 3, 12), rand_matrix(5, 2, 13)], |t, v| {
            let u = t.causal_unfold(v[0], 3);
            let s = t.slice_cols(u, 2, 5);
            let c = t.concat_cols(&[s, v[1]]);
            let sel = t.select_cols(c, &[0, 6, 3, 3]);
            let d = t.row_diff(sel);
            t.sum_squares(d)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(rand_matrix(2, 2, 14));
        let x = tape.leaf(rand_matrix(2, 2, 15));
        let y = tape.matmul(c, x);
        let loss = tape.sum_squares(y);
        let grads = tape.backward(loss);
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn causal_unfold_layout() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]));
        let u = tape.causal_unfold(a, 2);
        assert_eq!(tape.value(u).as_slice(), &[0.0, 1.0, 1.0, 2.0, 2.0, 3.0]);
    }
}
