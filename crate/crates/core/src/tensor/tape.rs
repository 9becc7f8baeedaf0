use std::f64::consts::{LN_2, PI, SQRT_2};
use std::rc::Rc;

use rayon::prelude::*;

use super::{ParamId, ParamStore, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Sparse linear map from source rows to output blocks; used for hash grid
/// interpolation. Output `(r, g)` covers columns `g*w .. (g+1)*w` where `w`
/// is the source width.
#[derive(Debug, Clone)]
pub struct GatherPlan<S> {
    pub out_rows: usize,
    pub blocks: usize,
    /// CSR offsets, length `out_rows * blocks + 1`.
    pub offsets: Vec<usize>,
    pub entries: Vec<(u32, S)>,
}

impl<S: Scalar> GatherPlan<S> {
    pub fn new(out_rows: usize, blocks: usize) -> Self {
        GatherPlan {
            out_rows,
            blocks,
            offsets: vec![0],
            entries: Vec::new(),
        }
    }

    /// Appends the corner list of the next `(row, block)` cell.
    pub fn push_cell(&mut self, corners: impl IntoIterator<Item = (u32, S)>) {
        self.entries.extend(corners);
        self.offsets.push(self.entries.len());
    }

    pub fn cell(&self, r: usize, g: usize) -> &[(u32, S)] {
        let i = r * self.blocks + g;
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Applies the map to a plain source table.
    pub fn apply(&self, src: &[S], width: usize) -> Vec<S> {
        assert_eq!(self.offsets.len(), self.out_rows * self.blocks + 1);
        let cols = self.blocks * width;
        let mut out = vec![S::zero(); self.out_rows * cols];
        for r in 0..self.out_rows {
            for g in 0..self.blocks {
                let dst = &mut out[r * cols + g * width..r * cols + (g + 1) * width];
                for &(row, w) in self.cell(r, g) {
                    let s = &src[row as usize * width..(row as usize + 1) * width];
                    for d in 0..width {
                        dst[d] = dst[d] + w * s[d];
                    }
                }
            }
        }
        out
    }
}

enum Op<S> {
    Leaf,
    Param {
        id: ParamId,
        rows: Option<Vec<usize>>,
    },
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, S),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    NegLog2(Var),
    Clamp(Var, S, S),
    LowerBound(Var, S),
    Sum(Var),
    SumCols(Var),
    RepeatEach(Var, usize),
    Concat(Vec<Var>),
    Slice(Var, usize),
    StraightThrough(Var),
    Sign(Var),
    Gather(Var, Rc<GatherPlan<S>>),
    Interval([Var; 4]),
    HashRate(Var),
}

/// Records a forward computation so gradients can be pulled back to the
/// parameters that produced it.
pub struct Tape<S> {
    values: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
    ste: SteMode<S>,
}

/// Forward value and gradient carrier of every straight-through node of a
/// pass, in creation order.
#[derive(Debug, Clone, Default)]
pub struct SteReference<S> {
    nodes: Vec<(Vec<S>, Vec<S>)>,
}

impl<S> SteReference<S> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

enum SteMode<S> {
    Off,
    Record(SteReference<S>),
    Linearize {
        reference: SteReference<S>,
        next: usize,
    },
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

const PAR_THRESHOLD: usize = 1 << 15;

pub(crate) fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp_() / (2.0 * PI).sqrt()
}

/// Mass of N(0,1) on `[lo, hi]`, evaluated on the tail that avoids
/// cancellation.
pub(crate) fn std_normal_interval(lo: f64, hi: f64) -> f64 {
    if lo > 0.0 {
        0.5 * (libm::erfc(lo / SQRT_2) - libm::erfc(hi / SQRT_2))
    } else {
        0.5 * (libm::erfc(-hi / SQRT_2) - libm::erfc(-lo / SQRT_2))
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            ste: SteMode::Off,
        }
    }

    /// A tape that remembers the forward value and carrier of each
    /// straight-through node; see [`Tape::ste_reference`].
    pub fn recording_ste() -> Self {
        Tape {
            ste: SteMode::Record(SteReference::default()),
            ..Self::new()
        }
    }

    /// A tape on which the k-th straight-through node evaluates to
    /// `forward_k + carrier - carrier_k`, using the k-th node of `reference`.
    /// Finite differences on such a tape measure the gradient the
    /// straight-through estimator assigns.
    pub fn linearized(reference: SteReference<S>) -> Self {
        Tape {
            ste: SteMode::Linearize { reference, next: 0 },
            ..Self::new()
        }
    }

    /// Nodes recorded so far by a [`Tape::recording_ste`] tape.
    pub fn ste_reference(&self) -> Option<&SteReference<S>> {
        match &self.ste {
            SteMode::Record(r) => Some(r),
            _ => None,
        }
    }

    /// Forward value of a straight-through node under the current mode.
    fn ste_value(&mut self, forward: Vec<S>, carrier: &[S]) -> Vec<S> {
        match &mut self.ste {
            SteMode::Off => forward,
            SteMode::Record(r) => {
                r.nodes.push((forward.clone(), carrier.to_vec()));
                forward
            }
            SteMode::Linearize { reference, next } => {
                let (f0, c0) = &reference.nodes[*next];
                *next += 1;
                assert_eq!(
                    f0.len(),
                    carrier.len(),
                    "reference pass has a different shape"
                );
                f0.iter()
                    .zip(c0)
                    .zip(carrier)
                    .map(|((&f, &c0), &c)| f + (c - c0))
                    .collect()
            }
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.values[v.0].shape()
    }

    /// The scalar held by a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> S {
        self.values[v.0].values[0]
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        debug_assert!(value.grad.is_none());
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// A constant input; receives no gradient.
    pub fn leaf(&mut self, mut t: Tensor<S>) -> Var {
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let mut t = store.value(id).clone();
        t.grad = None;
        self.push(t, Op::Param { id, rows: None })
    }

    /// Selected rows of a parameter table, in the given order.
    pub fn param_rows(&mut self, store: &ParamStore<S>, id: ParamId, rows: &[usize]) -> Var {
        let src = store.value(id);
        let mut values = Vec::with_capacity(rows.len() * src.cols);
        for &r in rows {
            values.extend_from_slice(src.row(r));
        }
        let t = Tensor::new(rows.len(), src.cols, values);
        self.push(
            t,
            Op::Param {
                id,
                rows: Some(rows.to_vec()),
            },
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (l, r) = (self.shape(a), self.shape(b));
        if l != r {
            return Err(TensorError::Shape {
                op,
                left: l,
                right: r,
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let values = ta
            .values
            .iter()
            .zip(&tb.values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.rows, ta.cols, values);
        self.push(t, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let ta = &self.values[a.0];
        let t = Tensor::new(ta.rows, ta.cols, ta.values.iter().map(|&x| f(x)).collect());
        self.push(t, op)
    }

    /// `a (B×K) · b (K×N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.cols, tb.rows, "matmul inner dimension");
        let (m, k, n) = (ta.rows, ta.cols, tb.cols);
        let mut out = vec![S::zero(); m * n];
        if m * n > 0 {
            S::gemm(
                m,
                k,
                n,
                (&ta.values, k as isize, 1),
                (&tb.values, n as isize, 1),
                &mut out,
            );
        }
        let t = Tensor::new(ta.rows, tb.cols, out);
        self.push(t, Op::MatMul(a, b))
    }

    /// Adds a `1 × C` bias to each row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[bias.0]);
        assert_eq!(tb.rows, 1, "bias must be a row");
        assert_eq!(ta.cols, tb.cols, "bias width");
        let mut values = ta.values.clone();
        for row in values.chunks_mut(ta.cols.max(1)) {
            for (v, &b) in row.iter_mut().zip(&tb.values) {
                *v = *v + b;
            }
        }
        let t = Tensor::new(ta.rows, ta.cols, values);
        self.push(t, Op::AddRow(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: S, shift: S) -> Var {
        self.map(a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        self.affine(a, s, S::zero())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(S::zero()), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh_(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| x.sigmoid_(), Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, |x| x.softplus_(), Op::Softplus(a))
    }

    /// `-log2(a)`, elementwise.
    pub fn neg_log2(&mut self, a: Var) -> Var {
        self.map(a, |x| -x.ln_() / S::c(LN_2), Op::NegLog2(a))
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        self.map(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    /// `max(a, bound)`. Below the bound the gradient still passes when it
    /// would push the value back up, so this is a straight-through node.
    pub fn lower_bound(&mut self, a: Var, bound: S) -> Var {
        let ta = &self.values[a.0];
        let (rows, cols) = (ta.rows, ta.cols);
        let forward = ta.values.iter().map(|&x| x.max(bound)).collect();
        let carrier = std::mem::take(&mut self.values[a.0].values);
        let values = self.ste_value(forward, &carrier);
        self.values[a.0].values = carrier;
        self.push(Tensor::new(rows, cols, values), Op::LowerBound(a, bound))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0]
            .values
            .iter()
            .fold(S::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Row sums: `B × C -> B × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ta = &self.values[a.0];
        let values = (0..ta.rows)
            .map(|r| ta.row(r).iter().fold(S::zero(), |acc, &x| acc + x))
            .collect();
        let t = Tensor::new(ta.rows, 1, values);
        self.push(t, Op::SumCols(a))
    }

    /// Row means: `B × C -> B × 1`.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let c = self.values[a.0].cols;
        let s = self.sum_cols(a);
        self.scale(s, S::one() / S::c(c as f64))
    }

    /// Repeats every column `n` times in place: `[a, b] -> [a, a, b, b]`.
    pub fn repeat_each(&mut self, a: Var, n: usize) -> Var {
        let ta = &self.values[a.0];
        let mut values = Vec::with_capacity(ta.len() * n);
        for &x in &ta.values {
            values.extend(std::iter::repeat_n(x, n));
        }
        let t = Tensor::new(ta.rows, ta.cols * n, values);
        self.push(t, Op::RepeatEach(a, n))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.values[parts[0].0].rows;
        let cols: usize = parts.iter().map(|p| self.values[p.0].cols).sum();
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let t = &self.values[p.0];
                assert_eq!(t.rows, rows, "concat row count");
                values.extend_from_slice(t.row(r));
            }
        }
        self.push(Tensor::new(rows, cols, values), Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.values[a.0].cols_range(start, end);
        self.push(t, Op::Slice(a, start))
    }

    /// Output equals `forward_value`; the gradient goes entirely to
    /// `grad_carrier`.
    pub fn straight_through(
        &mut self,
        forward_value: Var,
        grad_carrier: Var,
    ) -> Result<Var, TensorError> {
        self.same_shape("straight_through", forward_value, grad_carrier)?;
        let (rows, cols) = self.shape(forward_value);
        let forward = self.values[forward_value.0].values.clone();
        let carrier = std::mem::take(&mut self.values[grad_carrier.0].values);
        let values = self.ste_value(forward, &carrier);
        self.values[grad_carrier.0].values = carrier;
        Ok(self.push(
            Tensor::new(rows, cols, values),
            Op::StraightThrough(grad_carrier),
        ))
    }

    /// `sign(a)` with `sign(0) = +1`; identity gradient.
    pub fn sign_ste(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let carrier = std::mem::take(&mut self.values[a.0].values);
        let forward = carrier
            .iter()
            .map(|&x| if x >= S::zero() { S::one() } else { -S::one() })
            .collect();
        let values = self.ste_value(forward, &carrier);
        self.values[a.0].values = carrier;
        self.push(Tensor::new(rows, cols, values), Op::Sign(a))
    }

    pub fn gather(&mut self, src: Var, plan: Rc<GatherPlan<S>>) -> Var {
        let ts = &self.values[src.0];
        let values = plan.apply(&ts.values, ts.cols);
        let t = Tensor::new(plan.out_rows, plan.blocks * ts.cols, values);
        self.push(t, Op::Gather(src, plan))
    }

    /// Probability mass of `N(mu, sigma²)` on `[x - q/2, x + q/2]`, elementwise,
    /// without flooring.
    pub fn interval_prob(&mut self, x: Var, q: Var, mu: Var, sigma: Var) -> Var {
        for v in [q, mu, sigma] {
            assert_eq!(self.shape(x), self.shape(v), "interval_prob shapes");
        }
        let (tx, tq, tm, ts) = (
            &self.values[x.0],
            &self.values[q.0],
            &self.values[mu.0],
            &self.values[sigma.0],
        );
        let values = (0..tx.len())
            .map(|i| {
                let (xv, qv, mv, sv) = (
                    tx.values[i].to_f64_(),
                    tq.values[i].to_f64_(),
                    tm.values[i].to_f64_(),
                    ts.values[i].to_f64_(),
                );
                let hi = (xv + 0.5 * qv - mv) / sv;
                let lo = (xv - 0.5 * qv - mv) / sv;
                S::from_f64_(std_normal_interval(lo, hi))
            })
            .collect();
        let t = Tensor::new(tx.rows, tx.cols, values);
        self.push(t, Op::Interval([x, q, mu, sigma]))
    }

    /// Binary-entropy bit cost of a ±1 table given the empirical frequency of
    /// `+1`; the frequency is clamped to `[2^-16, 1 - 2^-16]`.
    pub fn hash_rate(&mut self, bits: Var) -> Var {
        let tb = &self.values[bits.0];
        let (plus, total) = plus_count(&tb.values);
        let r = binary_rate(plus, total);
        self.push(Tensor::scalar(S::from_f64_(r)), Op::HashRate(bits))
    }

    /// Reverse pass from a `1 × 1` loss. Parameter gradients are written
    /// into the store; parameters not reached get zero gradients.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<S>) -> Result<(), TensorError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let out = &self.values[i];
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Param { id, rows } => {
                    let p = store.get_mut(*id);
                    let cols = p.tensor.cols;
                    let n = p.tensor.len();
                    let pg = p.tensor.grad.get_or_insert_with(|| vec![S::zero(); n]);
                    match rows {
                        None => {
                            for (a, &b) in pg.iter_mut().zip(&g) {
                                *a = *a + b;
                            }
                            p.touched.iter_mut().for_each(|t| *t = true);
                        }
                        Some(rows) => {
                            for (k, &r) in rows.iter().enumerate() {
                                let dst = &mut pg[r * cols..(r + 1) * cols];
                                for (a, &b) in dst.iter_mut().zip(&g[k * cols..(k + 1) * cols]) {
                                    *a = *a + b;
                                }
                                p.touched[r] = true;
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                    let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                    let da = matmul_grad_lhs(&g, &tb.values, m, k, n);
                    let db = matmul_grad_rhs(&ta.values, &g, m, k, n);
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::AddRow(a, bias) => {
                    let cols = out.cols;
                    let mut db = vec![S::zero(); cols];
                    for row in g.chunks(cols.max(1)) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d = *d + x;
                        }
                    }
                    accumulate(&mut grads, *bias, &db);
                    accumulate(&mut grads, *a, &g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let neg: Vec<S> = g.iter().map(|&x| -x).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                    let da: Vec<S> = g.iter().zip(&tb.values).map(|(&x, &y)| x * y).collect();
                    let db: Vec<S> = g.iter().zip(&ta.values).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::Affine(a, s) => {
                    let da: Vec<S> = g.iter().map(|&x| x * *s).collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Relu(a) => {
                    let ta = &self.values[a.0];
                    let da: Vec<S> = g
                        .iter()
                        .zip(&ta.values)
                        .map(|(&x, &v)| if v > S::zero() { x } else { S::zero() })
                        .collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Tanh(a) => {
                    let da: Vec<S> = g
                        .iter()
                        .zip(&out.values)
                        .map(|(&x, &y)| x * (S::one() - y * y))
                        .collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<S> = g
                        .iter()
                        .zip(&out.values)
                        .map(|(&x, &y)| x * y * (S::one() - y))
                        .collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Softplus(a) => {
                    let ta = &self.values[a.0];
                    let da: Vec<S> = g
                        .iter()
                        .zip(&ta.values)
                        .map(|(&x, &v)| x * v.sigmoid_())
                        .collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::NegLog2(a) => {
                    let ta = &self.values[a.0];
                    let da: Vec<S> = g
                        .iter()
                        .zip(&ta.values)
                        .map(|(&x, &v)| -x / (v * S::c(LN_2)))
                        .collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Clamp(a, lo, hi) => {
                    let ta = &self.values[a.0];
                    let da: Vec<S> = g
                        .iter()
                        .zip(&ta.values)
                        .map(|(&x, &v)| if v > *lo && v < *hi { x } else { S::zero() })
                        .collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::LowerBound(a, bound) => {
                    let ta = &self.values[a.0];
                    let da: Vec<S> = g
                        .iter()
                        .zip(&ta.values)
                        .map(|(&x, &v)| {
                            if v >= *bound || x < S::zero() {
                                x
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Sum(a) => {
                    let n = self.values[a.0].len();
                    accumulate(&mut grads, *a, &vec![g[0]; n]);
                }
                Op::SumCols(a) => {
                    let ta = &self.values[a.0];
                    let mut da = Vec::with_capacity(ta.len());
                    for &x in &g {
                        da.extend(std::iter::repeat_n(x, ta.cols));
                    }
                    accumulate(&mut grads, *a, &da);
                }
                Op::RepeatEach(a, n) => {
                    let da: Vec<S> = g
                        .chunks(*n)
                        .map(|c| c.iter().fold(S::zero(), |acc, &x| acc + x))
                        .collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Concat(parts) => {
                    let cols = out.cols;
                    let mut offset = 0;
                    for p in parts {
                        let w = self.values[p.0].cols;
                        let mut dp = Vec::with_capacity(out.rows * w);
                        for r in 0..out.rows {
                            dp.extend_from_slice(&g[r * cols + offset..r * cols + offset + w]);
                        }
                        accumulate(&mut grads, *p, &dp);
                        offset += w;
                    }
                }
                Op::Slice(a, start) => {
                    let ta = &self.values[a.0];
                    let w = out.cols;
                    let mut da = vec![S::zero(); ta.len()];
                    for r in 0..ta.rows {
                        da[r * ta.cols + start..r * ta.cols + start + w]
                            .copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    accumulate(&mut grads, *a, &da);
                }
                Op::StraightThrough(carrier) => accumulate(&mut grads, *carrier, &g),
                Op::Sign(a) => accumulate(&mut grads, *a, &g),
                Op::Gather(src, plan) => {
                    let ts = &self.values[src.0];
                    let w = ts.cols;
                    let cols = out.cols;
                    let mut ds = vec![S::zero(); ts.len()];
                    for r in 0..plan.out_rows {
                        for blk in 0..plan.blocks {
                            let go = &g[r * cols + blk * w..r * cols + (blk + 1) * w];
                            for &(row, wt) in plan.cell(r, blk) {
                                let dst = &mut ds[row as usize * w..(row as usize + 1) * w];
                                for d in 0..w {
                                    dst[d] = dst[d] + wt * go[d];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *src, &ds);
                }
                Op::Interval([x, q, mu, sigma]) => {
                    let n = out.len();
                    let (mut dx, mut dq, mut dm, mut ds) = (
                        vec![S::zero(); n],
                        vec![S::zero(); n],
                        vec![S::zero(); n],
                        vec![S::zero(); n],
                    );
                    let (tx, tq, tm, ts) = (
                        &self.values[x.0],
                        &self.values[q.0],
                        &self.values[mu.0],
                        &self.values[sigma.0],
                    );
                    for i in 0..n {
                        let gi = g[i].to_f64_();
                        let (xv, qv, mv, sv) = (
                            tx.values[i].to_f64_(),
                            tq.values[i].to_f64_(),
                            tm.values[i].to_f64_(),
                            ts.values[i].to_f64_(),
                        );
                        let hi = (xv + 0.5 * qv - mv) / sv;
                        let lo = (xv - 0.5 * qv - mv) / sv;
                        let (ph, pl) = (std_normal_pdf(hi), std_normal_pdf(lo));
                        let d_x = (ph - pl) / sv;
                        dx[i] = S::from_f64_(gi * d_x);
                        dm[i] = S::from_f64_(-gi * d_x);
                        dq[i] = S::from_f64_(gi * 0.5 * (ph + pl) / sv);
                        ds[i] = S::from_f64_(-gi * (ph * hi - pl * lo) / sv);
                    }
                    accumulate(&mut grads, *x, &dx);
                    accumulate(&mut grads, *q, &dq);
                    accumulate(&mut grads, *mu, &dm);
                    accumulate(&mut grads, *sigma, &ds);
                }
                Op::HashRate(bits) => {
                    let tb = &self.values[bits.0];
                    let (plus, total) = plus_count(&tb.values);
                    let d = binary_rate_grad(plus, total) * 0.5 * g[0].to_f64_();
                    accumulate(&mut grads, *bits, &vec![S::from_f64_(d); tb.len()]);
                }
            }
        }

        for p in store.iter_mut() {
            if p.tensor.grad.is_none() {
                p.tensor.grad = Some(vec![S::zero(); p.tensor.len()]);
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, g: &[S]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// `M+` as a real number, so the cost stays differentiable along the
/// straight-through path.
fn plus_count<S: Scalar>(bits: &[S]) -> (f64, f64) {
    let plus = bits.iter().map(|&b| 0.5 * (b.to_f64_() + 1.0)).sum::<f64>();
    (plus, bits.len() as f64)
}

pub const HF_MIN: f64 = 1.0 / 65536.0;

pub fn clamp_frequency(h: f64) -> f64 {
    h.clamp(HF_MIN, 1.0 - HF_MIN)
}

/// `M+ (-log2 h) + M- (-log2 (1 - h))` with `h = M+ / total` clamped.
pub fn binary_rate(plus: f64, total: f64) -> f64 {
    if total == 0.0 {
        return 0.0;
    }
    let h = clamp_frequency(plus / total);
    let minus = total - plus;
    -(plus * h.log2() + minus * (1.0 - h).log2())
}

/// d/dM+ of [`binary_rate`]; the terms from differentiating `h` cancel, so
/// this holds on the clamped branch too.
fn binary_rate_grad(plus: f64, total: f64) -> f64 {
    if total == 0.0 {
        return 0.0;
    }
    let h = clamp_frequency(plus / total);
    ((1.0 - h) / h).log2()
}

fn matmul_forward<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    if n == 0 {
        return out;
    }
    // Every output accumulates over `k` in index order, so blocking does not
    // change the result.
    const BLOCK: usize = 16;
    let row = |(r, dst): (usize, &mut [S])| {
        let ar = &a[r * k..(r + 1) * k];
        let mut j0 = 0;
        while j0 + BLOCK <= n {
            let mut acc = [S::zero(); BLOCK];
            for (kk, &av) in ar.iter().enumerate() {
                if av == S::zero() {
                    continue;
                }
                let br = &b[kk * n + j0..kk * n + j0 + BLOCK];
                for t in 0..BLOCK {
                    acc[t] = acc[t] + av * br[t];
                }
            }
            dst[j0..j0 + BLOCK].copy_from_slice(&acc);
            j0 += BLOCK;
        }
        if j0 < n {
            let tail = &mut dst[j0..];
            for (kk, &av) in ar.iter().enumerate() {
                if av == S::zero() {
                    continue;
                }
                for (d, &bv) in tail.iter_mut().zip(&b[kk * n + j0..(kk + 1) * n]) {
                    *d = *d + av * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `dA = dY · Bᵀ`.
fn matmul_grad_lhs<S: Scalar>(g: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut da = vec![S::zero(); m * k];
    if m * k > 0 {
        S::gemm(m, n, k, (g, n as isize, 1), (b, 1, n as isize), &mut da);
    }
    da
}

/// `dB = Aᵀ · dY`.
fn matmul_grad_rhs<S: Scalar>(a: &[S], g: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut db = vec![S::zero(); k * n];
    if k * n > 0 {
        S::gemm(k, m, n, (a, 1, k as isize), (g, n as isize, 1), &mut db);
    }
    db
}

/// Plain matrix product used by inference paths that need no tape.
pub(crate) fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    matmul_forward(a, b, m, k, n)
}
