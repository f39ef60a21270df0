//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every forward op appends a node holding its output value and the handles
//! of its parents. Nodes are only ever appended, so the tape is topologically
//! ordered by construction and [`Tape::backward`] is a single reverse sweep.

use crate::autodiff::param::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatVec(Var, Var),
    VecMat(Var, Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Var),
    ScalarMul(Var, Var),
    AddScalar(Var, Var),
    Affine(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var, usize),
    LogSoftmax(Var),
    L2Normalize(Var, usize),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Row(Var, usize),
    SliceRows(Var, usize),
    Slice(Var, usize),
    Sum(Var),
    Pick(Var, usize),
}

struct Node<T> {
    op: Op<T>,
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor<T>>,
    needs_grad: bool,
}

/// Guard against division by zero in L2 normalization.
const L2_FLOOR: f64 = 1e-12;

/// Records a forward computation for later differentiation.
pub struct Tape<'p, T: Real> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    recording: bool,
}

/// Iterates the 1-D lanes of `shape` along `axis` as (offset, stride, len).
fn lanes(shape: &[usize], axis: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    (0..outer).flat_map(move |o| (0..stride).map(move |i| (o * len * stride + i, stride, len)))
}

fn softmax_lane<T: Real>(x: &[T], out: &mut [T], off: usize, stride: usize, len: usize) {
    let mut m = T::neg_infinity();
    for k in 0..len {
        m = m.max(x[off + k * stride]);
    }
    let mut s = T::zero();
    for k in 0..len {
        let e = (x[off + k * stride] - m).exp();
        out[off + k * stride] = e;
        s = s + e;
    }
    for k in 0..len {
        out[off + k * stride] = out[off + k * stride] / s;
    }
}

/// Overflow-safe logistic function.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Stable `log Σ exp(x)`.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

/// Numerically stable softmax of a slice.
pub fn softmax<T: Real>(xs: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); xs.len()];
    softmax_lane(xs, &mut out, 0, 1, xs.len());
    out
}

impl<'p, T: Real> Tape<'p, T> {
    /// A recording tape bound to a parameter store.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params: Some(params), nodes: Vec::new(), param_vars: vec![None; params.len()], recording: true }
    }

    /// A recording tape with no parameters (constants only).
    pub fn detached() -> Self {
        Self { params: None, nodes: Vec::new(), param_vars: Vec::new(), recording: true }
    }

    /// A tape that computes values but refuses `backward`.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        let mut t = Self::new(params);
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("param node without store").value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.value(v).item()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, parents: &[Var]) -> Var {
        let needs_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { op, value: Some(value), needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op: Op::Constant, value: Some(value), needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None, needs_grad: self.recording });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() }
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{op}: expected a matrix, got {s:?}"))),
        }
    }

    fn rank1(&self, op: &'static str, v: Var) -> Result<usize> {
        match self.shape(v) {
            [n] => Ok(*n),
            s => Err(Error::Shape(format!("{op}: expected a vector, got {s:?}"))),
        }
    }

    /// `W x` for `W: [m, n]`, `x: [n]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, n) = self.rank2("matvec", w)?;
        if self.rank1("matvec", x)? != n {
            return Err(self.mismatch("matvec", w, x));
        }
        let (wv, xv) = (self.value(w).data(), self.value(x).data());
        let out: Vec<T> = (0..m)
            .map(|i| wv[i * n..(i + 1) * n].iter().zip(xv).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
            .collect();
        Ok(self.push(Op::MatVec(w, x), Tensor::vector(out), &[w, x]))
    }

    /// `xᵀ M` for `x: [m]`, `M: [m, n]`, i.e. a weighted sum of the rows of `M`.
    pub fn vecmat(&mut self, x: Var, m: Var) -> Result<Var> {
        let (r, c) = self.rank2("vecmat", m)?;
        if self.rank1("vecmat", x)? != r {
            return Err(self.mismatch("vecmat", x, m));
        }
        let (xv, mv) = (self.value(x).data(), self.value(m).data());
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            let a = xv[i];
            for (o, &b) in out.iter_mut().zip(&mv[i * c..(i + 1) * c]) {
                *o = *o + a * b;
            }
        }
        Ok(self.push(Op::VecMat(x, m), Tensor::vector(out), &[x, m]))
    }

    /// `A B` for `A: [m, k]`, `B: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for l in 0..k {
                let x = av[i * k + l];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &y) in orow.iter_mut().zip(&bv[l * n..(l + 1) * n]) {
                    *o = *o + x * y;
                }
            }
        }
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out)?, &[a, b]))
    }

    /// `A Bᵀ` for `A: [m, k]`, `B: [n, k]`: applies a `[n, k]` weight to every row of `A`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul_bt", a)?;
        let (n, k2) = self.rank2("matmul_bt", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul_bt", a, b));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = ar.iter().zip(&bv[j * k..(j + 1) * k]).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            }
        }
        Ok(self.push(Op::MatMulBt(a, b), Tensor::matrix(m, n, out)?, &[a, b]))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(op, out, &[a, b]))
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

    /// Sum of several same-shaped nodes, left to right.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or_else(|| Error::InvalidArgument("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    fn row_broadcast(&mut self, name: &'static str, m: Var, r: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (rows, cols) = self.rank2(name, m)?;
        if self.rank1(name, r)? != cols {
            return Err(self.mismatch(name, m, r));
        }
        let rv = self.value(r).data();
        let data = self.value(m).data().iter().enumerate().map(|(i, &x)| f(x, rv[i % cols])).collect();
        Ok(self.push(op, Tensor::matrix(rows, cols, data)?, &[m, r]))
    }

    /// Adds the vector `r` to every row of `m`.
    pub fn add_row(&mut self, m: Var, r: Var) -> Result<Var> {
        self.row_broadcast("add_row", m, r, |x, y| x + y, Op::AddRow(m, r))
    }

    /// Multiplies every row of `m` elementwise by `r`.
    pub fn mul_row(&mut self, m: Var, r: Var) -> Result<Var> {
        self.row_broadcast("mul_row", m, r, |x, y| x * y, Op::MulRow(m, r))
    }

    /// Scales row `i` of `m` by `w[i]`.
    pub fn scale_rows(&mut self, m: Var, w: Var) -> Result<Var> {
        let (rows, cols) = self.rank2("scale_rows", m)?;
        if self.rank1("scale_rows", w)? != rows {
            return Err(self.mismatch("scale_rows", m, w));
        }
        let wv = self.value(w).data();
        let data = self.value(m).data().iter().enumerate().map(|(i, &x)| x * wv[i / cols]).collect();
        Ok(self.push(Op::ScaleRows(m, w), Tensor::matrix(rows, cols, data)?, &[m, w]))
    }

    /// `s · x` for a one-element `s`.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(self.mismatch("scalar_mul", s, x));
        }
        let sv = self.item(s);
        let out = self.value(x).map(|v| sv * v);
        Ok(self.push(Op::ScalarMul(s, x), out, &[s, x]))
    }

    /// `x + s` for a one-element `s`, broadcast over `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(self.mismatch("add_scalar", x, s));
        }
        let sv = self.item(s);
        let out = self.value(x).map(|v| v + sv);
        Ok(self.push(Op::AddScalar(x, s), out, &[x, s]))
    }

    /// `scale · x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(Op::Affine(x, scale), out, &[x])
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::zero())
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(Op::Tanh(x), out, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), out, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(Op::Exp(x), out, &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.ln());
        self.push(Op::Log(x), out, &[x])
    }

    /// Softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::Shape(format!("softmax: axis {axis} out of range for {:?}", xv.shape())));
        }
        let mut out = Tensor::zeros(xv.shape());
        for (off, stride, len) in lanes(xv.shape(), axis) {
            softmax_lane(xv.data(), out.data_mut(), off, stride, len);
        }
        Ok(self.push(Op::Softmax(x, axis), out, &[x]))
    }

    /// Log-softmax of a vector via log-sum-exp.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.rank1("log_softmax", x)?;
        let xv = self.value(x);
        let lse = log_sum_exp(xv.data());
        let out = xv.map(|v| v - lse);
        Ok(self.push(Op::LogSoftmax(x), out, &[x]))
    }

    /// `x / ‖x‖₂` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::Shape(format!("l2_normalize: axis {axis} out of range for {:?}", xv.shape())));
        }
        let floor = T::from_f64c(L2_FLOOR);
        let mut out = Tensor::zeros(xv.shape());
        for (off, stride, len) in lanes(xv.shape(), axis) {
            let n = (0..len).map(|k| xv.data()[off + k * stride].powi(2)).sum::<T>().sqrt().max(floor);
            for k in 0..len {
                out.data_mut()[off + k * stride] = xv.data()[off + k * stride] / n;
            }
        }
        Ok(self.push(Op::L2Normalize(x, axis), out, &[x]))
    }

    /// Concatenates vectors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &x in xs {
            self.rank1("concat", x)?;
            data.extend_from_slice(self.value(x).data());
        }
        if data.is_empty() {
            return Err(Error::InvalidArgument("concat of nothing".into()));
        }
        Ok(self.push(Op::Concat(xs.to_vec()), Tensor::vector(data), xs))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::InvalidArgument("stack_rows of nothing".into()))?;
        let n = self.rank1("stack_rows", first)?;
        let mut data = Vec::with_capacity(n * xs.len());
        for &x in xs {
            if self.rank1("stack_rows", x)? != n {
                return Err(self.mismatch("stack_rows", first, x));
            }
            data.extend_from_slice(self.value(x).data());
        }
        Ok(self.push(Op::StackRows(xs.to_vec()), Tensor::matrix(xs.len(), n, data)?, xs))
    }

    /// Row `i` of a matrix as a vector (embedding lookup).
    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let (r, _) = self.rank2("row", m)?;
        if i >= r {
            return Err(Error::TokenOutOfRange { index: i, size: r });
        }
        let out = Tensor::vector(self.value(m).row(i).to_vec());
        Ok(self.push(Op::Row(m, i), out, &[m]))
    }

    /// Embedding lookup; alias of [`Tape::row`].
    pub fn lookup(&mut self, table: Var, index: usize) -> Result<Var> {
        self.row(table, index)
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, m: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.rank2("slice_rows", m)?;
        if start >= end || end > r {
            return Err(Error::Shape(format!("slice_rows: bad range {start}..{end} for {r} rows")));
        }
        let data = self.value(m).data()[start * c..end * c].to_vec();
        Ok(self.push(Op::SliceRows(m, start), Tensor::matrix(end - start, c, data)?, &[m]))
    }

    /// Elements `start..end` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let n = self.rank1("slice", x)?;
        if start >= end || end > n {
            return Err(Error::Shape(format!("slice: bad range {start}..{end} for length {n}")));
        }
        let data = self.value(x).data()[start..end].to_vec();
        Ok(self.push(Op::Slice(x, start), Tensor::vector(data), &[x]))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    /// Element `i` of a vector as a `[1]` tensor.
    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var> {
        let n = self.rank1("pick", x)?;
        if i >= n {
            return Err(Error::TokenOutOfRange { index: i, size: n });
        }
        let v = self.value(x).data()[i];
        Ok(self.push(Op::Pick(x, i), Tensor::scalar(v), &[x]))
    }

    /// Reverse sweep from a scalar `root`. Returns dRoot/dParam for every
    /// parameter reached; unreached parameters are `None`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::NotRecording);
        }
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let n_params = self.params.map(|p| p.len()).unwrap_or(0);
        let mut out = Gradients::empty(n_params);
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(rv.shape(), T::one()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(id) = node.op {
                out.grads[id.0] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.as_ref().expect("derived node without value");
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatVec(w, x) => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                let n = xv.len();
                if let Some(gw) = self.acc(grads, *w) {
                    for (r, &gi) in gd.iter().enumerate() {
                        for (a, &b) in gw[r * n..(r + 1) * n].iter_mut().zip(xv.data()) {
                            *a = *a + gi * b;
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &gi) in gd.iter().enumerate() {
                        for (a, &b) in gx.iter_mut().zip(&wv.data()[r * n..(r + 1) * n]) {
                            *a = *a + gi * b;
                        }
                    }
                }
            }
            Op::VecMat(x, m) => {
                let (xv, mv) = (self.value(*x), self.value(*m));
                let c = mv.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, a) in gx.iter_mut().enumerate() {
                        *a = *a + mv.row(r).iter().zip(gd).fold(T::zero(), |s, (&p, &q)| s + p * q);
                    }
                }
                if let Some(gm) = self.acc(grads, *m) {
                    for (r, &xi) in xv.data().iter().enumerate() {
                        for (a, &gj) in gm[r * c..(r + 1) * c].iter_mut().zip(gd) {
                            *a = *a + xi * gj;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for l in 0..k {
                            let s = gd[i * n..(i + 1) * n]
                                .iter()
                                .zip(&bv.data()[l * n..(l + 1) * n])
                                .fold(T::zero(), |s, (&p, &q)| s + p * q);
                            ga[i * k + l] = ga[i * k + l] + s;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..m {
                        for l in 0..k {
                            let x = av.data()[i * k + l];
                            for (q, &p) in gb[l * n..(l + 1) * n].iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                                *q = *q + x * p;
                            }
                        }
                    }
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = gd[i * n + j];
                            for (q, &p) in ga[i * k..(i + 1) * k].iter_mut().zip(&bv.data()[j * k..(j + 1) * k]) {
                                *q = *q + gij * p;
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = gd[i * n + j];
                            for (q, &p) in gb[j * k..(j + 1) * k].iter_mut().zip(&av.data()[i * k..(i + 1) * k]) {
                                *q = *q + gij * p;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, |k| gd[k]);
                self.acc_map(grads, *b, |k| gd[k]);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, |k| gd[k]);
                self.acc_map(grads, *b, |k| -gd[k]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc_map(grads, *a, |k| gd[k] * bv[k]);
                self.acc_map(grads, *b, |k| gd[k] * av[k]);
            }
            Op::AddRow(m, r) => {
                let c = self.value(*r).len();
                self.acc_map(grads, *m, |k| gd[k]);
                if let Some(gr) = self.acc(grads, *r) {
                    for (k, &x) in gd.iter().enumerate() {
                        gr[k % c] = gr[k % c] + x;
                    }
                }
            }
            Op::MulRow(m, r) => {
                let (mv, rv) = (self.value(*m).data(), self.value(*r).data());
                let c = rv.len();
                self.acc_map(grads, *m, |k| gd[k] * rv[k % c]);
                if let Some(gr) = self.acc(grads, *r) {
                    for (k, &x) in gd.iter().enumerate() {
                        gr[k % c] = gr[k % c] + x * mv[k];
                    }
                }
            }
            Op::ScaleRows(m, w) => {
                let (mv, wv) = (self.value(*m), self.value(*w).data());
                let c = mv.cols();
                self.acc_map(grads, *m, |k| gd[k] * wv[k / c]);
                if let Some(gw) = self.acc(grads, *w) {
                    for (k, &x) in gd.iter().enumerate() {
                        gw[k / c] = gw[k / c] + x * mv.data()[k];
                    }
                }
            }
            Op::ScalarMul(s, x) => {
                let (sv, xv) = (self.item(*s), self.value(*x).data());
                self.acc_map(grads, *x, |k| gd[k] * sv);
                if let Some(gs) = self.acc(grads, *s) {
                    gs[0] = gs[0] + gd.iter().zip(xv).fold(T::zero(), |a, (&p, &q)| a + p * q);
                }
            }
            Op::AddScalar(x, s) => {
                self.acc_map(grads, *x, |k| gd[k]);
                if let Some(gs) = self.acc(grads, *s) {
                    gs[0] = gs[0] + gd.iter().copied().sum();
                }
            }
            Op::Affine(x, scale) => self.acc_map(grads, *x, |k| gd[k] * *scale),
            Op::Tanh(x) => {
                let y = out.data();
                self.acc_map(grads, *x, |k| gd[k] * (T::one() - y[k] * y[k]));
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                self.acc_map(grads, *x, |k| gd[k] * y[k] * (T::one() - y[k]));
            }
            Op::Exp(x) => {
                let y = out.data();
                self.acc_map(grads, *x, |k| gd[k] * y[k]);
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, |k| gd[k] / xv[k]);
            }
            Op::Softmax(x, axis) => {
                let y = out.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (off, stride, len) in lanes(out.shape(), *axis) {
                        let dot = (0..len).map(|k| y[off + k * stride] * gd[off + k * stride]).sum::<T>();
                        for k in 0..len {
                            let p = off + k * stride;
                            gx[p] = gx[p] + y[p] * (gd[p] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = out.data();
                let total: T = gd.iter().copied().sum();
                self.acc_map(grads, *x, |k| gd[k] - y[k].exp() * total);
            }
            Op::L2Normalize(x, axis) => {
                let (xv, y) = (self.value(*x).data(), out.data());
                let floor = T::from_f64c(L2_FLOOR);
                if let Some(gx) = self.acc(grads, *x) {
                    for (off, stride, len) in lanes(out.shape(), *axis) {
                        let n = (0..len).map(|k| xv[off + k * stride].powi(2)).sum::<T>().sqrt();
                        if n < floor {
                            for k in 0..len {
                                let p = off + k * stride;
                                gx[p] = gx[p] + gd[p] / floor;
                            }
                            continue;
                        }
                        let dot = (0..len).map(|k| y[off + k * stride] * gd[off + k * stride]).sum::<T>();
                        for k in 0..len {
                            let p = off + k * stride;
                            gx[p] = gx[p] + (gd[p] - y[p] * dot) / n;
                        }
                    }
                }
            }
            Op::Concat(xs) | Op::StackRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    self.acc_map(grads, x, |k| gd[off + k]);
                    off += n;
                }
            }
            Op::Row(m, r) => {
                let c = out.len();
                if let Some(gm) = self.acc(grads, *m) {
                    for (a, &b) in gm[r * c..(r + 1) * c].iter_mut().zip(gd) {
                        *a = *a + b;
                    }
                }
            }
            Op::SliceRows(m, start) => {
                let c = out.cols();
                if let Some(gm) = self.acc(grads, *m) {
                    for (a, &b) in gm[start * c..].iter_mut().zip(gd) {
                        *a = *a + b;
                    }
                }
            }
            Op::Slice(x, start) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (a, &b) in gx[*start..].iter_mut().zip(gd) {
                        *a = *a + b;
                    }
                }
            }
            Op::Sum(x) => self.acc_map(grads, *x, |_| gd[0]),
            Op::Pick(x, idx) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx[*idx] = gx[*idx] + gd[0];
                }
            }
        }
    }

    /// Gradient buffer of `v`, created zeroed on first use; `None` when `v`
    /// does not lead to any parameter.
    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let shape = self.value(v).shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut())
    }

    fn acc_map(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl Fn(usize) -> T) {
        if let Some(gv) = self.acc(grads, v) {
            for (k, a) in gv.iter_mut().enumerate() {
                *a = *a + f(k);
            }
        }
    }
}
