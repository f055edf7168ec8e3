//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`]
//! handle. [`Tape::backward`] walks the nodes in exact reverse order of
//! recording and returns a [`Gradients`] table keyed by `Var`.
//!
//! Parameter tensors are registered with [`Tape::param`], which borrows
//! their storage instead of copying it; the tape therefore lives no longer
//! than the model it reads from. Gradients are owned, so they outlive the
//! tape and can be applied to the parameters once it is dropped.
//!
//! All values are matrices (`rows × cols`), batch along rows.

use std::borrow::Cow;

use rand::Rng;

use crate::error::{RcaError, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for [`Tape::custom`]: receives the upstream
/// gradient and the input values, returns one gradient per input.
pub type CustomBackward = Box<dyn Fn(&[f64], &[&[f64]]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Mask(Var, Vec<f64>),
    Concat(Var, Var),
    VStack(Var, Var),
    LogSoftmax(Var),
    Exp(Var),
    LogClamped(Var, f64),
    Sum(Var),
    Gather(Var, Vec<usize>),
    Custom(Vec<Var>, CustomBackward),
}

struct Node<'p> {
    rows: usize,
    cols: usize,
    value: Cow<'p, [f64]>,
    op: Op,
    tracked: bool,
}

/// Ordered record of operations.
///
/// A tape is confined to one thread; build a fresh one per forward pass.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'p, [f64]>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'p> {
        &self.nodes[v.0]
    }

    /// Registers a tensor by reference. It is differentiated iff it
    /// `requires_grad`.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, Cow::Borrowed(t.data()), Op::Leaf, t.requires_grad())
    }

    /// Registers a tensor by reference as a constant, regardless of its
    /// `requires_grad` flag. Used to freeze a component for one phase.
    pub fn frozen(&mut self, t: &'p Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, Cow::Borrowed(t.data()), Op::Leaf, false)
    }

    /// Copies a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, Cow::Owned(t.data().to_vec()), Op::Leaf, requires_grad)
    }

    /// Takes ownership of a tensor as an untracked leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, Cow::Owned(t.into_data()), Op::Leaf, false)
    }

    /// Copies the current value of `v` into an untracked leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (r, c) = (n.rows, n.cols);
        let data = n.value.to_vec();
        self.push(r, c, Cow::Owned(data), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.node(v).tracked
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.to_vec()).expect("node shape covers its value")
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> RcaError {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        RcaError::Dimension {
            op,
            left: vec![ar, ac],
            right: vec![br, bc],
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &aik) in av[i * k..(i + 1) * k].iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bkj) in orow.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(m, n, Cow::Owned(out), Op::MatMul(a, b), tracked))
    }

    /// `a [n×m] + bias [1×m]`, bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        if self.dims(bias) != (1, m) {
            return Err(self.dim_err("add_row", a, bias));
        }
        let bv = self.value(bias);
        let out: Vec<f64> = self
            .value(a)
            .chunks(m.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(x, b)| x + b))
            .collect();
        let tracked = self.is_tracked(a) || self.is_tracked(bias);
        Ok(self.push(n, m, Cow::Owned(out), Op::AddRow(a, bias), tracked))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, record: Op) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(self.dim_err(op, a, b));
        }
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(r, c, Cow::Owned(out), record, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let tracked = self.is_tracked(a);
        self.push(r, c, Cow::Owned(out), op, tracked)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| x * k, Op::Scale(a, k))
    }

    /// `max(0, x)`; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Var {
        // NaN passes through so non-finite inputs surface as a non-finite loss
        self.map(a, |x| if x <= 0.0 { 0.0 } else { x }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    /// `ln(max(x, floor))`. Entries at or below the floor get zero gradient.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        self.map(a, |x| if x <= floor { floor.ln() } else { x.ln() }, Op::LogClamped(a, floor))
    }

    /// Inverted dropout. In training mode each entry is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`;
    /// otherwise `x` is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(RcaError::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let (r, c) = self.dims(x);
        let out: Vec<f64> = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let tracked = self.is_tracked(x);
        Ok(self.push(r, c, Cow::Owned(out), Op::Mask(x, mask), tracked))
    }

    /// Column-wise concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = self.dims(a);
        let (n2, q) = self.dims(b);
        if n != n2 {
            return Err(self.dim_err("concat", a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&av[i * p..(i + 1) * p]);
            out.extend_from_slice(&bv[i * q..(i + 1) * q]);
        }
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(n, p + q, Cow::Owned(out), Op::Concat(a, b), tracked))
    }

    /// Row-wise concatenation: rows of `a` followed by rows of `b`.
    pub fn vstack(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c) = self.dims(a);
        let (m, c2) = self.dims(b);
        if c != c2 {
            return Err(self.dim_err("vstack", a, b));
        }
        let mut out = Vec::with_capacity((n + m) * c);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(n + m, c, Cow::Owned(out), Op::VStack(a, b), tracked))
    }

    /// Row-wise log-softmax, stabilised by subtracting the row maximum.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(a).chunks(c.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        let tracked = self.is_tracked(a);
        self.push(r, c, Cow::Owned(out), Op::LogSoftmax(a), tracked)
    }

    /// Row-wise softmax as `exp(log_softmax(a))`.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ls = self.log_softmax(a);
        self.exp(ls)
    }

    /// Sum of all entries, as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum::<f64>();
        let tracked = self.is_tracked(a);
        self.push(1, 1, Cow::Owned(vec![s]), Op::Sum(a), tracked)
    }

    /// Mean of all entries.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Picks `a[i, index[i]]` for every row, giving an `n×1` column.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if index.len() != r {
            return Err(RcaError::Dimension {
                op: "gather",
                left: vec![r, c],
                right: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= c) {
            return Err(RcaError::Usage(format!("gather index {bad} out of range for {c} columns")));
        }
        let av = self.value(a);
        let out: Vec<f64> = index.iter().enumerate().map(|(i, &j)| av[i * c + j]).collect();
        let tracked = self.is_tracked(a);
        Ok(self.push(r, 1, Cow::Owned(out), Op::Gather(a, index.to_vec()), tracked))
    }

    /// Records an operation with a caller-supplied value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], rows: usize, cols: usize, value: Vec<f64>, backward: CustomBackward) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(RcaError::Dimension {
                op: "custom",
                left: vec![rows, cols],
                right: vec![value.len()],
            });
        }
        let tracked = inputs.iter().any(|&v| self.is_tracked(v));
        Ok(self.push(rows, cols, Cow::Owned(value), Op::Custom(inputs.to_vec(), backward), tracked))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(RcaError::Usage(format!("backward needs a scalar loss, got shape [{r}, {c}]")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = node.cols;
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.is_tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(*a, da);
                }
                if self.is_tracked(*b) {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += aip * gv;
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::AddRow(a, bias) => {
                let m = node.cols;
                acc(*a, g.to_vec());
                let mut db = vec![0.0; m];
                for row in g.chunks(m.max(1)) {
                    for (d, x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                acc(*bias, db);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, k) => acc(*a, g.iter().map(|x| x * k).collect()),
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, g.iter().zip(av).map(|(x, &v)| if v > 0.0 { *x } else { 0.0 }).collect());
            }
            Op::Mask(a, mask) => acc(*a, g.iter().zip(mask).map(|(x, m)| x * m).collect()),
            Op::Concat(a, b) => {
                let p = self.dims(*a).1;
                let q = self.dims(*b).1;
                let w = p + q;
                let mut da = Vec::with_capacity(node.rows * p);
                let mut db = Vec::with_capacity(node.rows * q);
                for row in g.chunks(w.max(1)) {
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::VStack(a, b) => {
                let split = self.value(*a).len();
                acc(*a, g[..split].to_vec());
                acc(*b, g[split..].to_vec());
            }
            Op::LogSoftmax(a) => {
                // d/dx_j = g_j - softmax_j * sum(g)
                let c = node.cols;
                let mut da = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(c.max(1)).zip(node.value.chunks(c.max(1))) {
                    let total: f64 = grow.iter().sum();
                    da.extend(grow.iter().zip(yrow).map(|(gj, yj)| gj - yj.exp() * total));
                }
                acc(*a, da);
            }
            Op::Exp(a) => acc(*a, g.iter().zip(node.value.iter()).map(|(x, y)| x * y).collect()),
            Op::LogClamped(a, floor) => {
                let av = self.value(*a);
                acc(*a, g.iter().zip(av).map(|(x, &v)| if v > *floor { x / v } else { 0.0 }).collect());
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::Gather(a, index) => {
                let c = self.dims(*a).1;
                let mut da = vec![0.0; self.value(*a).len()];
                for (i, (&j, &gv)) in index.iter().zip(g).enumerate() {
                    da[i * c + j] = gv;
                }
                acc(*a, da);
            }
            Op::Custom(inputs, backward) => {
                let values: Vec<&[f64]> = inputs.iter().map(|&v| self.value(v)).collect();
                let deltas = backward(g, &values);
                for (&v, d) in inputs.iter().zip(deltas) {
                    acc(v, d);
                }
            }
        }
    }
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence
    /// the loss or is untracked.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`, zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }

    /// Adds the gradient of `v` into `target.grad`. Untouched leaves still
    /// get a (zero) buffer so every registered tensor ends up populated.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.len()]),
        }
    }
}

/// Maximum relative error between the reverse-mode gradient of `f` at `x`
/// and a central finite difference with step `h`.
///
/// Each coordinate contributes
/// `|auto - numeric| / max(|auto|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.leaf(x, true);
        let loss = f(&mut tape, xv)?;
        let grads = tape.backward(loss)?;
        grads.get_or_zeros(xv, x.len())
    };
    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(probe, false);
        let out = f(&mut tape, xv)?;
        Ok(tape.scalar(out))
    };
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(&mat(&[&[1.0, 2.0], &[3.0, 4.0]]), false);
        let eye = tape.leaf(&mat(&[&[1.0, 0.0], &[0.0, 1.0]]), false);
        let col = tape.leaf(&mat(&[&[5.0], &[6.0]]), false);
        let ai = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(ai), &[1.0, 2.0, 3.0, 4.0]);
        let ac = tape.matmul(a, col).unwrap();
        assert_eq!(tape.value(ac), &[17.0, 39.0]);
        assert_eq!(tape.dims(ac), (2, 1));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]), false);
        let b = tape.leaf(&Tensor::zeros(vec![2, 3]), false);
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            RcaError::Dimension { op, left, right } => {
                assert_eq!(op, "matmul");
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matmul_grad_is_column_sum_of_b() {
        // d/da sum(a·b) = 1 · bᵀ: every row of the gradient is the row sums of b.
        let b = mat(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let a = mat(&[&[0.3, -0.2], &[1.1, 0.7]]);
        let mut tape = Tape::new();
        let av = tape.leaf(&a, true);
        let bv = tape.leaf(&b, false);
        let p = tape.matmul(av, bv).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(av).unwrap(), &[6.0, 15.0, 6.0, 15.0]);
        assert!(g.get(bv).is_none());
    }

    #[test]
    fn relu_forward_and_kink() {
        let mut tape = Tape::new();
        let x = tape.leaf(&mat(&[&[-1.0, 0.0, 2.0]]), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_identity_on_positive() {
        let mut tape = Tape::new();
        let x = tape.leaf(&mat(&[&[0.5, 3.0, 7.25]]), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.5, 3.0, 7.25]);
    }

    #[test]
    fn log_softmax_symmetric_and_overflow_safe() {
        let mut tape = Tape::new();
        let x = tape.leaf(&mat(&[&[0.0, 0.0], &[1000.0, 0.0]]), false);
        let y = tape.log_softmax(x);
        let v = tape.value(y);
        let ln2 = std::f64::consts::LN_2;
        assert!((v[0] + ln2).abs() < 1e-15 && (v[1] + ln2).abs() < 1e-15);
        assert!(v[2].abs() < 1e-12);
        assert!((v[3] + 1000.0).abs() < 1e-9);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn concat_rows_and_split() {
        let mut tape = Tape::new();
        let a = tape.leaf(&mat(&[&[1.0], &[2.0]]), true);
        let b = tape.leaf(&mat(&[&[3.0], &[4.0]]), true);
        let c = tape.concat(a, b).unwrap();
        assert_eq!(tape.value(c), &[1.0, 3.0, 2.0, 4.0]);
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.get(b).unwrap(), &[1.0, 1.0]);

        let empty = tape.leaf(&Tensor::zeros(vec![2, 0]), false);
        let same = tape.concat(a, empty).unwrap();
        assert_eq!(tape.value(same), tape.value(a));

        let three = tape.leaf(&Tensor::zeros(vec![3, 1]), false);
        assert!(matches!(tape.concat(a, three), Err(RcaError::Dimension { .. })));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(&mat(&[&[1.0, -2.0, 3.5]]), false);
        let y = tape.dropout(x, 0.0, &mut rng, true).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let z = tape.dropout(x, 0.4, &mut rng, false).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
        assert!(matches!(tape.dropout(x, 1.0, &mut rng, true), Err(RcaError::Config(_))));
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2, 2]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0), true);
        let sq = tape.mul(x, x).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn reused_tensor_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&mat(&[&[2.0, 5.0]]), true);
        let a = tape.scale(x, 3.0);
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2, 2]), true);
        assert!(matches!(tape.backward(x), Err(RcaError::Usage(_))));
    }

    #[test]
    fn backward_twice_doubles_grad() {
        let mut t = Tensor::from_rows(&[[1.0, -2.0]]).unwrap().with_grad();
        let mut tape = Tape::new();
        let x = tape.param(&t);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        drop(tape);
        g1.accumulate_into(x, &mut t).unwrap();
        g2.accumulate_into(x, &mut t).unwrap();
        assert_eq!(t.grad().unwrap(), &[4.0, -8.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&mat(&[&[2.0]]), true);
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn grad_check_constant_is_zero() {
        let x = mat(&[&[0.1, 0.2, 0.3]]);
        let err = grad_check(|t, _| Ok(t.constant(Tensor::scalar(4.2))), &x, 1e-5).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn gather_rejects_bad_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2, 2]), false);
        assert!(tape.gather(x, &[0, 2]).is_err());
        assert!(tape.gather(x, &[0]).is_err());
    }
}
