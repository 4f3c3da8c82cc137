//! Dense two-dimensional tensors and a reverse-mode tape.
//!
//! Every value is a row-major `rows × cols` matrix of `f64`; vectors are
//! `1 × n` and a batch of vectors is `batch × n`. The [`Tape`] records each
//! primitive as it is applied, so node order is already topological and
//! [`Tape::backward`] simply walks it in reverse.

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    data: Array2<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            data: Array2::zeros((rows, cols)),
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            data: Array2::from_elem((rows, cols), value),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::Dimension {
                op: "from_vec",
                left: [rows, cols],
                right: [1, values.len()],
            });
        }
        let data = Array2::from_shape_vec((rows, cols), values).expect("length checked");
        Ok(Tensor { data })
    }

    /// A `1 × n` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor::from_vec(1, n, values).expect("row shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::row(vec![value])
    }

    pub fn identity(n: usize) -> Self {
        Tensor {
            data: Array2::eye(n),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let mut data = Array2::zeros((rows, cols));
        for v in data.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
        Tensor { data }
    }

    pub fn from_array(data: Array2<f64>) -> Self {
        if data.is_standard_layout() {
            Tensor { data }
        } else {
            Tensor {
                data: data.as_standard_layout().into_owned(),
            }
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        let (r, c) = self.data.dim();
        [r, c]
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[[row, col]]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[[row, col]] = value;
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[[0, 0]]
    }

    pub fn row_slice(&self, row: usize) -> &[f64] {
        let cols = self.cols();
        &self.as_slice()[row * cols..(row + 1) * cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("tensors are kept in standard layout")
    }

    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        self.data
            .as_slice_mut()
            .expect("tensors are kept in standard layout")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.as_slice().to_vec()
    }

    pub fn array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            data: self.data.mapv(f),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    /// Adds a `1 × n` row to every row.
    AddRow(Var, Var),
    Mul(Var, Var),
    /// Scales every row by the matching entry of an `m × 1` column.
    MulCol(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Sqrt(Var),
    Ln(Var),
    ClampMin(Var, f64),
    Concat(Var, Var),
    Slice(Var, usize, usize),
    Gather(Var, Vec<usize>),
    SoftmaxXent {
        logits: Var,
        targets: Vec<Option<usize>>,
        scale: f64,
        probs: Array2<f64>,
    },
    KlStdNormal(Var, Var),
    WeightedSum(Var, Vec<f64>),
    Sum(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations in execution order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// `None` when the node is unreachable from the root or does not require a gradient.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.clone())
            .map(Tensor::from_array)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .map(Tensor::from_array)
    }
}

fn shape_of(a: &Array2<f64>) -> [usize; 2] {
    let (r, c) = a.dim();
    [r, c]
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn arr(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.data.clone(), Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.data, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor::from_array(self.nodes[v.0].value.clone())
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        shape_of(self.arr(v))
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.arr(v)[[0, 0]]
    }

    pub fn row_values(&self, v: Var, row: usize) -> &[f64] {
        let a = self.arr(v);
        let cols = a.ncols();
        &a.as_slice().expect("standard layout")[row * cols..(row + 1) * cols]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let value = self.arr(a).dot(self.arr(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`, the affine-map orientation used for `W x` with row-batched `x`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[1] {
            return Err(Error::Dimension {
                op: "matmul_nt",
                left: sa,
                right: sb,
            });
        }
        let value = self.arr(a).dot(&self.arr(b).t());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.arr(a) + self.arr(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr[0] != 1 || sr[1] != sa[1] {
            return Err(Error::Dimension {
                op: "add_row",
                left: sa,
                right: sr,
            });
        }
        let value = self.arr(a) + self.arr(row);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.arr(a) * self.arr(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc[1] != 1 || sc[0] != sa[0] {
            return Err(Error::Dimension {
                op: "mul_col",
                left: sa,
                right: sc,
            });
        }
        let value = self.arr(a) * self.arr(col);
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(value, Op::MulCol(a, col), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.arr(a) * k;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.arr(a).mapv(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    /// Column-wise concatenation: `a` fills the leading columns.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] {
            return Err(Error::Dimension {
                op: "concat",
                left: sa,
                right: sb,
            });
        }
        let value = ndarray::concatenate(Axis(1), &[self.arr(a).view(), self.arr(b).view()])
            .expect("row counts checked");
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// Columns `start..end`.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a);
        if start > end || end > sa[1] {
            return Err(Error::Dimension {
                op: "slice",
                left: sa,
                right: [start, end],
            });
        }
        let value = self.arr(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(value, Op::Slice(a, start, end), rg))
    }

    /// Row lookup: output row `k` is `table[ids[k]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let [rows, cols] = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange {
                what: "embedding",
                index: bad,
                size: rows,
            });
        }
        let src = self.arr(table);
        let mut value = Array2::zeros((ids.len(), cols));
        for (k, &id) in ids.iter().enumerate() {
            value.row_mut(k).assign(&src.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(value, Op::Gather(table, ids.to_vec()), rg))
    }

    /// `scale · Σ_rows −log softmax(logits_row)[target_row]`, skipping rows whose target is `None`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        scale: f64,
    ) -> Result<Var> {
        let [rows, classes] = self.shape(logits);
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                left: [rows, classes],
                right: [targets.len(), 1],
            });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= classes) {
            return Err(Error::IndexOutOfRange {
                what: "target class",
                index: *bad,
                size: classes,
            });
        }
        let x = self.arr(logits);
        let mut probs = Array2::zeros((rows, classes));
        let mut loss = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            let row = x.row(r);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0;
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row.iter()) {
                *p = (v - max).exp();
                z += *p;
            }
            probs.row_mut(r).mapv_inplace(|p| p / z);
            loss += z.ln() + max - row[t];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Array2::from_elem((1, 1), scale * loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                scale,
                probs,
            },
            rg,
        ))
    }

    /// Row-wise `0.5 · Σ (μ² + σ² − ln σ² − 1)`, an `m × 1` column.
    pub fn kl_standard_normal(&mut self, mu: Var, sigma2: Var) -> Result<Var> {
        self.same_shape("kl_standard_normal", mu, sigma2)?;
        let (m, s2) = (self.arr(mu), self.arr(sigma2));
        let mut value = Array2::zeros((m.nrows(), 1));
        Zip::from(value.rows_mut())
            .and(m.rows())
            .and(s2.rows())
            .for_each(|mut out, mr, sr| {
                let kl: f64 = mr
                    .iter()
                    .zip(sr.iter())
                    .map(|(&u, &s)| u * u + s - s.ln() - 1.0)
                    .sum();
                out[0] = 0.5 * kl;
            });
        let rg = self.rg(mu) || self.rg(sigma2);
        Ok(self.push(value, Op::KlStdNormal(mu, sigma2), rg))
    }

    /// `Σ_r w_r · Σ_c a[r, c]` as a scalar.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let sa = self.shape(a);
        if weights.len() != sa[0] {
            return Err(Error::Dimension {
                op: "weighted_sum",
                left: sa,
                right: [weights.len(), 1],
            });
        }
        let total: f64 = self
            .arr(a)
            .rows()
            .into_iter()
            .zip(weights)
            .map(|(r, w)| w * r.sum())
            .sum();
        let rg = self.rg(a);
        Ok(self.push(
            Array2::from_elem((1, 1), total),
            Op::WeightedSum(a, weights.to_vec()),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.arr(a).sum();
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a), rg)
    }

    /// Sum of several `1 × 1` nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let Some(&first) = iter.next() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        let mut acc = first;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar root. Each node is visited once, newest first.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.shape(root);
        if shape != [1, 1] {
            return Err(Error::NonScalarRoot(shape));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.dot(&self.arr(*b).t()));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], self.arr(*a).t().dot(&g));
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.dot(self.arr(*b)));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], g.t().dot(self.arr(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        accumulate(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], &g * self.arr(*b));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], &g * self.arr(*a));
                    }
                }
                Op::MulCol(a, col) => {
                    if self.rg(*col) {
                        let gc = (&g * self.arr(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        accumulate(&mut grads[col.0], gc);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], &g * self.arr(*col));
                    }
                }
                Op::Scale(a, k) => accumulate(&mut grads[a.0], g * *k),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads[a.0], d);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                    accumulate(&mut grads[a.0], d);
                }
                Op::Exp(a) => accumulate(&mut grads[a.0], g * &node.value),
                Op::Sqrt(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= 0.5 / y);
                    accumulate(&mut grads[a.0], d);
                }
                Op::Ln(a) => accumulate(&mut grads[a.0], g / self.arr(*a)),
                Op::ClampMin(a, floor) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.arr(*a))
                        .for_each(|d, &x| {
                            if x < *floor {
                                *d = 0.0;
                            }
                        });
                    accumulate(&mut grads[a.0], d);
                }
                Op::Concat(a, b) => {
                    let split = self.shape(*a)[1];
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.slice(s![.., ..split]).to_owned());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], g.slice(s![.., split..]).to_owned());
                    }
                }
                Op::Slice(a, start, end) => {
                    let mut d = Array2::zeros(self.arr(*a).dim());
                    d.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads[a.0], d);
                }
                Op::Gather(table, ids) => {
                    let slot = grads[table.0].get_or_insert_with(|| Array2::zeros(self.arr(*table).dim()));
                    for (k, &id) in ids.iter().enumerate() {
                        let mut dst = slot.row_mut(id);
                        dst += &g.row(k);
                    }
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    scale,
                    probs,
                } => {
                    let k = g[[0, 0]] * scale;
                    let mut d = Array2::zeros(probs.dim());
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        let mut dr = d.row_mut(r);
                        dr.assign(&probs.row(r));
                        dr[t] -= 1.0;
                        dr *= k;
                    }
                    accumulate(&mut grads[logits.0], d);
                }
                Op::KlStdNormal(mu, sigma2) => {
                    if self.rg(*mu) {
                        accumulate(&mut grads[mu.0], self.arr(*mu) * &g);
                    }
                    if self.rg(*sigma2) {
                        let d = self.arr(*sigma2).mapv(|s| 0.5 * (1.0 - 1.0 / s)) * &g;
                        accumulate(&mut grads[sigma2.0], d);
                    }
                }
                Op::WeightedSum(a, weights) => {
                    let cols = self.shape(*a)[1];
                    let k = g[[0, 0]];
                    let mut d = Array2::zeros((weights.len(), cols));
                    for (mut row, w) in d.rows_mut().into_iter().zip(weights) {
                        row.fill(k * w);
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::Sum(a) => {
                    let d = Array2::from_elem(self.arr(*a).dim(), g[[0, 0]]);
                    accumulate(&mut grads[a.0], d);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Numerically stable `log softmax` of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

    /// Contract the output with fixed random weights so every element feeds the scalar.
    fn scalar_out(tape: &mut Tape, inputs: &[Tensor], f: &Build) -> (Var, Vec<Var>) {
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = f(tape, &vars).unwrap();
        let [r, c] = tape.shape(out);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = tape.constant(Tensor::uniform(r, c, 1.0, &mut rng));
        let prod = tape.mul(out, w).unwrap();
        (tape.sum(prod), vars)
    }

    fn eval(inputs: &[Tensor], f: &Build) -> f64 {
        let mut tape = Tape::new();
        let (root, _) = scalar_out(&mut tape, inputs, f);
        tape.scalar_value(root)
    }

    fn check(inputs: Vec<Tensor>, f: &Build) {
        let mut tape = Tape::new();
        let (root, vars) = scalar_out(&mut tape, &inputs, f);
        let grads = tape.backward(root).unwrap();
        let h = 1e-6;
        for (k, v) in vars.iter().enumerate() {
            let g = grads.get(*v).unwrap_or_else(|| Tensor::zeros(inputs[k].rows(), inputs[k].cols()));
            for idx in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].as_slice_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[k].as_slice_mut()[idx] -= h;
                let fd = (eval(&plus, f) - eval(&minus, f)) / (2.0 * h);
                let an = g.as_slice()[idx];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(err < 1e-5, "input {k}[{idx}]: analytic {an}, numeric {fd}");
            }
        }
    }

    fn rand(r: usize, c: usize, seed: u64) -> Tensor {
        Tensor::uniform(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn positive(r: usize, c: usize, seed: u64) -> Tensor {
        rand(r, c, seed).map(|v| v.abs() + 0.5)
    }

    #[test]
    fn matmul_grads() {
        check(vec![rand(3, 4, 1), rand(4, 2, 2)], &|t, v| t.matmul(v[0], v[1]));
        check(vec![rand(3, 4, 1), rand(5, 4, 2)], &|t, v| t.matmul_nt(v[0], v[1]));
    }

    #[test]
    fn elementwise_grads() {
        check(vec![rand(2, 3, 1), rand(2, 3, 2)], &|t, v| t.add(v[0], v[1]));
        check(vec![rand(2, 3, 1), rand(2, 3, 2)], &|t, v| t.mul(v[0], v[1]));
        check(vec![rand(4, 3, 1), rand(1, 3, 2)], &|t, v| t.add_row(v[0], v[1]));
        check(vec![rand(4, 3, 1), rand(4, 1, 2)], &|t, v| t.mul_col(v[0], v[1]));
        check(vec![rand(2, 3, 3)], &|t, v| Ok(t.scale(v[0], -1.7)));
    }

    #[test]
    fn nonlinearity_grads() {
        check(vec![rand(2, 5, 4)], &|t, v| Ok(t.sigmoid(v[0])));
        check(vec![rand(2, 5, 4)], &|t, v| Ok(t.tanh(v[0])));
        check(vec![rand(2, 5, 4)], &|t, v| Ok(t.exp(v[0])));
        check(vec![positive(2, 5, 4)], &|t, v| Ok(t.sqrt(v[0])));
        check(vec![positive(2, 5, 4)], &|t, v| Ok(t.ln(v[0])));
        // every value sits away from the floor, so the gradient passes through
        check(vec![positive(2, 5, 4)], &|t, v| Ok(t.clamp_min(v[0], 0.1)));
    }

    #[test]
    fn clamp_blocks_gradient_below_floor() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::row(vec![-1.0, 2.0]));
        let y = tape.clamp_min(x, 0.0);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap().get(x).unwrap();
        assert_eq!(g.to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn structural_grads() {
        check(vec![rand(3, 2, 5), rand(3, 4, 6)], &|t, v| t.concat(v[0], v[1]));
        check(vec![rand(3, 6, 5)], &|t, v| t.slice(v[0], 2, 5));
        check(vec![rand(5, 3, 7)], &|t, v| t.gather(v[0], &[4, 0, 4, 2]));
        check(vec![rand(3, 4, 8)], &|t, v| Ok(t.sum(v[0])));
        check(vec![rand(3, 4, 8)], &|t, v| t.weighted_sum(v[0], &[0.5, 0.0, 2.0]));
    }

    #[test]
    fn loss_grads() {
        check(vec![rand(3, 5, 9)], &|t, v| t.softmax_cross_entropy(v[0], &[Some(1), None, Some(4)], 0.5));
        check(vec![rand(3, 4, 10), positive(3, 4, 11)], &|t, v| t.kl_standard_normal(v[0], v[1]));
    }

    #[test]
    fn shared_node_accumulates() {
        // x used twice: d/dx Σ x·x = 2x
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::row(vec![1.5, -2.0]));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y);
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap().to_vec(), vec![3.0, -4.0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::zeros(2, 3));
        let b = tape.param(&Tensor::zeros(2, 3));
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.slice(a, 2, 4).is_err());
        assert!(tape.gather(a, &[2]).is_err());
        assert!(tape.softmax_cross_entropy(a, &[Some(3), None], 1.0).is_err());
        assert!(matches!(tape.backward(a), Err(Error::NonScalarRoot([2, 3]))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::row(vec![1.0, 2.0]));
        let x = tape.param(&Tensor::row(vec![3.0, 4.0]));
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn log_softmax_is_stable() {
        let l = log_softmax(&[1000.0, 1000.0]);
        assert!((l[0] - (0.5f64).ln()).abs() < 1e-12);
        let p = softmax(&[-1e4, 0.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
