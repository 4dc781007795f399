//! Minimal reverse-mode automatic differentiation over 2-d f64 arrays.
//!
//! A [`Tape`] records operations eagerly; [`Tape::backward`] walks the record
//! in reverse and accumulates gradients for every node. All math is f64 and
//! single threaded, so results are bit-reproducible across runs.
//!
//! Shapes follow the row convention: a batch is `[n, dim]`, a single vector
//! is `[1, dim]`, a scalar is `[1, 1]`. Shape violations are programming
//! errors and panic; public operations validate dimensions before building a
//! tape.

use ndarray::{concatenate, s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    /// `[n, d] + [1, d]`, broadcasting the row over the first operand.
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Tanh(Var),
    /// Row-wise softmax.
    SoftmaxRows(Var),
    /// Extracts row `i` as a `[1, d]` node.
    SelectRow(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    /// L2-normalizes a single `[1, d]` row.
    NormalizeRow(Var),
    /// Dot product of two `[1, d]` rows, yielding `[1, 1]`.
    Dot(Var, Var),
    /// Elementwise ln(1 + e^x).
    Softplus(Var),
    /// Mean cross-entropy of `[n, c]` logits against one label per row.
    CrossEntropyMean(Var, Vec<usize>),
}

pub struct Tape {
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`; zero arrays are represented as `None` when the
    /// node does not influence the output.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient w.r.t. `v`, materializing zeros for unreachable nodes.
    pub fn wrt_or_zero(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        match self.grads[v.0] {
            Some(ref g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn softplus(x: f64) -> f64 {
    // Stable form: max(x, 0) + ln(1 + e^{-|x|}).
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const NORM_FLOOR: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// Registers an input node. Leaves and parameters are identical on the
    /// tape; callers read gradients only for the nodes they train.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Convenience leaf for a single row vector.
    pub fn leaf_row(&mut self, value: &[f64]) -> Var {
        let arr = Array2::from_shape_vec((1, value.len()), value.to_vec())
            .expect("row shape is consistent by construction");
        self.leaf(arr)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    /// Value of a `[1, 1]` node as a scalar.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[(0, 0)]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].dim(), self.values[b.0].dim(), "add shape");
        let v = &self.values[a.0] + &self.values[b.0];
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (n, d) = self.values[a.0].dim();
        assert_eq!(self.values[row.0].dim(), (1, d), "add_row shape");
        let _ = n;
        let v = &self.values[a.0] + &self.values[row.0];
        self.push(v, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].dim(), self.values[b.0].dim(), "sub shape");
        let v = &self.values[a.0] - &self.values[b.0];
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.values[a.0].mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (_, k1) = self.values[a.0].dim();
        let (k2, _) = self.values[b.0].dim();
        assert_eq!(k1, k2, "matmul inner dimension");
        let v = self.values[a.0].dot(&self.values[b.0]);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.values[a.0].t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(&self.values[a.0]);
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn select_row(&mut self, a: Var, i: usize) -> Var {
        let (n, _) = self.values[a.0].dim();
        assert!(i < n, "select_row index {i} out of {n}");
        let v = self.values[a.0].slice(s![i..i + 1, ..]).to_owned();
        self.push(v, Op::SelectRow(a, i))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = concatenate(Axis(0), &views).expect("row concat shapes");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = concatenate(Axis(1), &views).expect("column concat shapes");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn normalize_row(&mut self, a: Var) -> Var {
        let val = &self.values[a.0];
        assert_eq!(val.dim().0, 1, "normalize_row expects a single row");
        let norm = val.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        let v = val.mapv(|x| x / norm);
        self.push(v, Op::NormalizeRow(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let da = self.values[a.0].dim();
        let db = self.values[b.0].dim();
        assert_eq!(da.0, 1, "dot expects row vectors");
        assert_eq!(da, db, "dot shape");
        let v: f64 = self.values[a.0]
            .iter()
            .zip(self.values[b.0].iter())
            .map(|(x, y)| x * y)
            .sum();
        self.push(Array2::from_elem((1, 1), v), Op::Dot(a, b))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    /// Mean over rows of `-ln softmax(logits)[label]`, computed with the
    /// usual max-shift stabilization. Yields a `[1, 1]` node.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Var {
        let z = &self.values[logits.0];
        let (n, c) = z.dim();
        assert_eq!(labels.len(), n, "one label per logit row");
        assert!(labels.iter().all(|&l| l < c), "label out of class range");
        let mut total = 0.0;
        for (row, &label) in z.rows().into_iter().zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let v = Array2::from_elem((1, 1), total / n as f64);
        self.push(v, Op::CrossEntropyMean(logits, labels.to_vec()))
    }

    /// Backpropagates from a `[1, 1]` output node.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(
            self.values[out.0].dim(),
            (1, 1),
            "backward from non-scalar node"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.values.len()];
        grads[out.0] = Some(Array2::ones((1, 1)));

        fn accumulate(slot: &mut Option<Array2<f64>>, contribution: Array2<f64>) {
            match slot {
                Some(g) => *g += &contribution,
                None => *slot = Some(contribution),
            }
        }

        for idx in (0..self.ops.len()).rev() {
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            match &self.ops[idx] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::AddRow(a, row) => {
                    let row_grad = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[a.0], g);
                    accumulate(&mut grads[row.0], row_grad);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], -g);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads[a.0], g.mapv(|x| x * c));
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.values[b.0].t());
                    let gb = self.values[a.0].t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads[a.0], g.t().to_owned());
                }
                Op::Relu(a) => {
                    let mask = self.values[a.0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads[a.0], g * mask);
                }
                Op::Tanh(a) => {
                    let y = &self.values[idx];
                    accumulate(&mut grads[a.0], g * y.mapv(|v| 1.0 - v * v));
                }
                Op::SoftmaxRows(a) => {
                    // dX = Y * (G - rowsum(G * Y))
                    let y = &self.values[idx];
                    let gy = &g * y;
                    let row_sums = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let adjusted = &g - &row_sums;
                    accumulate(&mut grads[a.0], y * adjusted);
                }
                Op::SelectRow(a, i) => {
                    let mut ga = Array2::zeros(self.values[a.0].dim());
                    ga.slice_mut(s![*i..*i + 1, ..]).assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.values[p.0].dim().0;
                        let slice = g.slice(s![offset..offset + rows, ..]).to_owned();
                        accumulate(&mut grads[p.0], slice);
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.values[p.0].dim().1;
                        let slice = g.slice(s![.., offset..offset + cols]).to_owned();
                        accumulate(&mut grads[p.0], slice);
                        offset += cols;
                    }
                }
                Op::NormalizeRow(a) => {
                    // y = x / r with r = max(|x|, floor):
                    // dx = (g - y (g . y)) / r
                    let x = &self.values[a.0];
                    let y = &self.values[idx];
                    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
                    let gy: f64 = g.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
                    let dx = (&g - &y.mapv(|v| v * gy)).mapv(|v| v / r);
                    accumulate(&mut grads[a.0], dx);
                }
                Op::Dot(a, b) => {
                    let c = g[(0, 0)];
                    accumulate(&mut grads[a.0], self.values[b.0].mapv(|v| v * c));
                    accumulate(&mut grads[b.0], self.values[a.0].mapv(|v| v * c));
                }
                Op::Softplus(a) => {
                    let sig = self.values[a.0].mapv(|x| 1.0 / (1.0 + (-x).exp()));
                    accumulate(&mut grads[a.0], g * sig);
                }
                Op::CrossEntropyMean(logits, labels) => {
                    let scale = g[(0, 0)] / labels.len() as f64;
                    let mut dz = softmax_rows(&self.values[logits.0]);
                    for (mut row, &label) in dz.rows_mut().into_iter().zip(labels) {
                        row[label] -= 1.0;
                    }
                    dz.mapv_inplace(|v| v * scale);
                    accumulate(&mut grads[logits.0], dz);
                }
            }
        }
        Gradients { grads }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Central finite difference of `f` at `x`, one coordinate at a time.
    fn numeric_grad(f: &dyn Fn(&Array2<f64>) -> f64, x: &Array2<f64>, eps: f64) -> Array2<f64> {
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.dim().1, idx % x.dim().1);
            let mut plus = x.clone();
            plus[(r, c)] += eps;
            let mut minus = x.clone();
            minus[(r, c)] -= eps;
            g[(r, c)] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        g
    }

    fn assert_grad_close(analytic: &Array2<f64>, numeric: &Array2<f64>, tol: f64) {
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!(
                ((a - n) / denom).abs() < tol,
                "gradient mismatch: analytic {a} vs numeric {n}"
            );
        }
    }

    fn random_array(rng: &mut ChaCha20Rng, shape: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks the analytic gradient of a scalar-valued graph against finite
    /// differences, where `build` maps the input leaf to the output node.
    fn check_graph(build: impl Fn(&mut Tape, Var) -> Var, x: Array2<f64>) {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let out = build(&mut tape, leaf);
        let grads = tape.backward(out);
        let analytic = grads.wrt_or_zero(leaf, x.dim());

        let f = |input: &Array2<f64>| -> f64 {
            let mut t = Tape::new();
            let l = t.leaf(input.clone());
            let o = build(&mut t, l);
            t.scalar(o)
        };
        let numeric = numeric_grad(&f, &x, 1e-5);
        assert_grad_close(&analytic, &numeric, 1e-5);
    }

    /// Reduces an arbitrary node to a scalar by dotting every row with a
    /// fixed vector and summing via matmul, keeping the graph differentiable.
    fn reduce_to_scalar(tape: &mut Tape, v: Var) -> Var {
        let (n, d) = tape.value(v).dim();
        let w = Array2::from_shape_fn((d, 1), |(i, _)| (i as f64 + 1.0) * 0.3);
        let wv = tape.leaf(w);
        let col = tape.matmul(v, wv); // [n, 1]
        let ones = tape.leaf(Array2::ones((1, n)));
        tape.matmul(ones, col) // [1, 1]
    }

    #[test]
    fn matmul_add_relu_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let w = random_array(&mut rng, (4, 3));
        let b = random_array(&mut rng, (1, 3));
        let x = random_array(&mut rng, (2, 4));
        check_graph(
            move |t, leaf| {
                let wv = t.leaf(w.clone());
                let bv = t.leaf(b.clone());
                let h = t.matmul(leaf, wv);
                let h = t.add_row(h, bv);
                let h = t.relu(h);
                reduce_to_scalar(t, h)
            },
            x,
        );
    }

    #[test]
    fn add_row_gradient_accumulates_over_rows() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let base = random_array(&mut rng, (5, 3));
        let row = random_array(&mut rng, (1, 3));
        // Differentiate with respect to the broadcast row.
        let mut tape = Tape::new();
        let basev = tape.leaf(base.clone());
        let rowv = tape.leaf(row.clone());
        let sum = tape.add_row(basev, rowv);
        let out = reduce_to_scalar(&mut tape, sum);
        let grads = tape.backward(out);
        let analytic = grads.wrt_or_zero(rowv, (1, 3));

        let f = |input: &Array2<f64>| {
            let mut t = Tape::new();
            let bv = t.leaf(base.clone());
            let rv = t.leaf(input.clone());
            let s = t.add_row(bv, rv);
            let o = reduce_to_scalar(&mut t, s);
            t.scalar(o)
        };
        let numeric = numeric_grad(&f, &row, 1e-5);
        assert_grad_close(&analytic, &numeric, 1e-5);
    }

    #[test]
    fn softmax_tanh_transpose_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = random_array(&mut rng, (3, 4));
        check_graph(
            |t, leaf| {
                let tr = t.transpose(leaf);
                let sm = t.softmax_rows(tr);
                let th = t.tanh(sm);
                reduce_to_scalar(t, th)
            },
            x,
        );
    }

    #[test]
    fn normalize_dot_softplus_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = random_array(&mut rng, (1, 6));
        let other = random_array(&mut rng, (1, 6));
        check_graph(
            move |t, leaf| {
                let n = t.normalize_row(leaf);
                let o = t.leaf(other.clone());
                let d = t.dot(n, o);
                t.softplus(d)
            },
            x,
        );
    }

    #[test]
    fn concat_and_select_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = random_array(&mut rng, (2, 3));
        let fixed = random_array(&mut rng, (2, 3));
        check_graph(
            move |t, leaf| {
                let f = t.leaf(fixed.clone());
                let rows = t.concat_rows(&[f, leaf]);
                let cols = t.concat_cols(&[rows, rows]);
                let row = t.select_row(cols, 3);
                let sp = t.softplus(row);
                reduce_to_scalar(t, sp)
            },
            x,
        );
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let logits = random_array(&mut rng, (4, 5));
        let labels = vec![0, 3, 2, 4];
        let mut tape = Tape::new();
        let leaf = tape.leaf(logits.clone());
        let loss = tape.cross_entropy_mean(leaf, &labels);
        let grads = tape.backward(loss);
        let analytic = grads.wrt_or_zero(leaf, logits.dim());

        let labels2 = labels.clone();
        let f = move |input: &Array2<f64>| {
            let mut t = Tape::new();
            let l = t.leaf(input.clone());
            let out = t.cross_entropy_mean(l, &labels2);
            t.scalar(out)
        };
        let numeric = numeric_grad(&f, &logits, 1e-5);
        assert_grad_close(&analytic, &numeric, 1e-5);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_class_count() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Array2::zeros((2, 7)));
        let loss = tape.cross_entropy_mean(logits, &[1, 6]);
        let expected = (7.0f64).ln();
        assert!((tape.scalar(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn sub_scale_gradients_flow_to_both_sides() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[1.0, 2.0]]);
        let b = tape.leaf(array![[0.5, 0.25]]);
        let d = tape.sub(a, b);
        let sc = tape.scale(d, 3.0);
        let out = tape.dot(sc, sc);
        let grads = tape.backward(out);
        // out = 9 * |a-b|^2, d/da = 18 (a-b), d/db = -18 (a-b)
        let ga = grads.wrt(a).unwrap();
        let gb = grads.wrt(b).unwrap();
        assert!((ga[(0, 0)] - 9.0).abs() < 1e-12);
        assert!((ga[(0, 1)] - 31.5).abs() < 1e-12);
        assert!((gb[(0, 0)] + 9.0).abs() < 1e-12);
        assert!((gb[(0, 1)] + 31.5).abs() < 1e-12);
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[1.0, 2.0]]);
        let unused = tape.leaf(array![[5.0]]);
        let out = tape.dot(a, a);
        let grads = tape.backward(out);
        assert!(grads.wrt(unused).is_none());
        assert!(grads.wrt(a).is_some());
    }

    #[test]
    fn reused_node_accumulates_gradient_from_both_uses() {
        // out = x . x with x used twice: gradient is 2x.
        let mut tape = Tape::new();
        let x = tape.leaf(array![[3.0, -2.0]]);
        let out = tape.dot(x, x);
        let g = tape.backward(out);
        let gx = g.wrt(x).unwrap();
        assert_eq!(gx[(0, 0)], 6.0);
        assert_eq!(gx[(0, 1)], -4.0);
    }
}
