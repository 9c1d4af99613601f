use std::cell::{Cell, Ref, RefCell};

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

type Derivative = Box<dyn Fn(f64) -> f64>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Tanh(Var),
    Map(Var, Derivative),
    RmsNorm(Var, f64),
    Softmax(Var),
    MaskedSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Vec<(Var, Vec<usize>)>),
    ScaleRows(Var, Var),
    GatherElems(Var, Vec<usize>),
    CrossEntropy(Var, Vec<Option<usize>>),
    Sum(Var),
    Reshape(Var),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations so adjoints can be replayed in reverse.
///
/// Nodes are appended in evaluation order, so parents always precede
/// children. A tape supports exactly one backward pass; a second call to
/// [`Tape::gradients`] fails with a contract error.
pub struct Tape<'a> {
    nodes: RefCell<Vec<Node<'a>>>,
    consumed: Cell<bool>,
}

/// Gradients for the requested leaves, in request order.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
    reached: Vec<bool>,
}

impl Gradients {
    pub fn get(&self, i: usize) -> &Tensor {
        &self.grads[i]
    }

    /// False when the loss does not depend on the i-th leaf (its gradient is all zeros).
    pub fn reached(&self, i: usize) -> bool {
        self.reached[i]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        self.grads
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.tensor())
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Value<'a>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push_owned(&self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.requires_grad(p));
        self.push(Value::Owned(value), op, requires_grad)
    }

    /// Owned leaf.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Value::Owned(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Borrowed, differentiable leaf; parameters are never copied onto the tape.
    pub fn param(&self, value: &'a Tensor) -> Var {
        self.push(Value::Borrowed(value), Op::Leaf, true)
    }

    /// Borrowed leaf that takes no gradient.
    pub fn frozen(&self, value: &'a Tensor) -> Var {
        self.push(Value::Borrowed(value), Op::Leaf, false)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let val = self.value(v);
        match val.shape() {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::dim(op, other, &[])),
        }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push_owned(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a` (m×k) and `b` (n×k).
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", &[m, k], &[n, k2]));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push_owned(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), &[a, b]))
    }

    fn zip_with(
        &self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            if va.shape() != vb.shape() {
                return Err(Error::dim(op_name, va.shape(), vb.shape()));
            }
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(va.shape().to_vec(), data)?
        };
        Ok(self.push_owned(out, op, &[a, b]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn map_values(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.map_values(a, |x| x * c);
        self.push_owned(out, Op::Scale(a, c), &[a])
    }

    pub fn silu(&self, a: Var) -> Var {
        let out = self.map_values(a, |x| x * kernels::sigmoid(x));
        self.push_owned(out, Op::Silu(a), &[a])
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.map_values(a, f64::tanh);
        self.push_owned(out, Op::Tanh(a), &[a])
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map(
        &self,
        a: Var,
        f: impl Fn(f64) -> f64,
        derivative: impl Fn(f64) -> f64 + 'static,
    ) -> Var {
        let out = self.map_values(a, f);
        self.push_owned(out, Op::Map(a, Box::new(derivative)), &[a])
    }

    /// Parameter-free RMS normalisation of each row.
    pub fn rms_norm(&self, a: Var, eps: f64) -> Var {
        let out = {
            let va = self.value(a);
            let cols = va.cols();
            let mut data = va.data().to_vec();
            for row in data.chunks_mut(cols) {
                let inv = rms_inverse(row, eps);
                row.iter_mut().for_each(|x| *x *= inv);
            }
            Tensor {
                shape: va.shape().to_vec(),
                data,
            }
        };
        self.push_owned(out, Op::RmsNorm(a, eps), &[a])
    }

    fn check_finite(&self, a: Var, what: &str) -> Result<()> {
        if self.value(a).is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} input is not finite")))
        }
    }

    /// Row-wise softmax over the trailing dimension.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        self.check_finite(a, "softmax")?;
        let out = {
            let va = self.value(a);
            let cols = va.cols();
            let mut data = vec![0.0; va.len()];
            for (src, dst) in va.data().chunks(cols).zip(data.chunks_mut(cols)) {
                kernels::softmax(src, dst);
            }
            Tensor {
                shape: va.shape().to_vec(),
                data,
            }
        };
        Ok(self.push_owned(out, Op::Softmax(a), &[a]))
    }

    /// Row-wise softmax where only entries with `keep` set participate; the rest are 0.
    /// Every row must keep at least one entry.
    pub fn masked_softmax(&self, a: Var, keep: &[bool]) -> Result<Var> {
        self.check_finite(a, "masked_softmax")?;
        let out = {
            let va = self.value(a);
            if keep.len() != va.len() {
                return Err(Error::dim("masked_softmax", va.shape(), &[keep.len()]));
            }
            let cols = va.cols();
            let mut data = vec![0.0; va.len()];
            for ((src, dst), k) in va
                .data()
                .chunks(cols)
                .zip(data.chunks_mut(cols))
                .zip(keep.chunks(cols))
            {
                if !k.iter().any(|&b| b) {
                    return Err(Error::Domain("masked_softmax row keeps no entries".into()));
                }
                kernels::masked_softmax(src, k, dst);
            }
            Tensor {
                shape: va.shape().to_vec(),
                data,
            }
        };
        Ok(self.push_owned(out, Op::MaskedSoftmax(a), &[a]))
    }

    /// Causal row-wise softmax of a square score matrix (row i sees columns ≤ i).
    pub fn causal_softmax(&self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "causal_softmax")?;
        if m != n {
            return Err(Error::dim("causal_softmax", &[m, n], &[m, m]));
        }
        let keep: Vec<bool> = (0..m * n).map(|i| i % n <= i / n).collect();
        self.masked_softmax(a, &keep)
    }

    pub fn gather_rows(&self, a: Var, rows: &[usize]) -> Result<Var> {
        let out = {
            let va = self.value(a);
            let n = va.rows();
            let cols = va.cols();
            let mut data = Vec::with_capacity(rows.len() * cols);
            for &r in rows {
                if r >= n {
                    return Err(Error::Index {
                        what: "gather_rows",
                        index: r,
                        bound: n,
                    });
                }
                data.extend_from_slice(va.row(r));
            }
            Tensor::new(vec![rows.len(), cols], data)?
        };
        Ok(self.push_owned(out, Op::GatherRows(a, rows.to_vec()), &[a]))
    }

    /// Sums each part's rows into the given destination rows of an `nrows × cols` zero matrix.
    pub fn scatter_rows(
        &self,
        parts: Vec<(Var, Vec<usize>)>,
        nrows: usize,
        cols: usize,
    ) -> Result<Var> {
        let mut data = vec![0.0; nrows * cols];
        for (v, rows) in &parts {
            let val = self.value(*v);
            if val.cols() != cols || val.rows() != rows.len() {
                return Err(Error::dim("scatter_rows", val.shape(), &[rows.len(), cols]));
            }
            for (src, &dst) in rows.iter().enumerate() {
                if dst >= nrows {
                    return Err(Error::Index {
                        what: "scatter_rows",
                        index: dst,
                        bound: nrows,
                    });
                }
                for (o, &x) in data[dst * cols..(dst + 1) * cols]
                    .iter_mut()
                    .zip(val.row(src))
                {
                    *o += x;
                }
            }
        }
        let parents: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        let out = Tensor::new(vec![nrows, cols], data)?;
        Ok(self.push_owned(out, Op::ScatterRows(parts), &parents))
    }

    /// Multiplies row `i` of `a` by `s[i]`.
    pub fn scale_rows(&self, a: Var, s: Var) -> Result<Var> {
        let out = {
            let (va, vs) = (self.value(a), self.value(s));
            if vs.len() != va.rows() {
                return Err(Error::dim("scale_rows", va.shape(), vs.shape()));
            }
            let cols = va.cols();
            let mut data = va.data().to_vec();
            for (row, &f) in data.chunks_mut(cols).zip(vs.data()) {
                row.iter_mut().for_each(|x| *x *= f);
            }
            Tensor {
                shape: va.shape().to_vec(),
                data,
            }
        };
        Ok(self.push_owned(out, Op::ScaleRows(a, s), &[a, s]))
    }

    /// Picks flat elements of `a` into a vector.
    pub fn gather_elems(&self, a: Var, flat: &[usize]) -> Result<Var> {
        let out = {
            let va = self.value(a);
            let mut data = Vec::with_capacity(flat.len());
            for &i in flat {
                data.push(*va.data().get(i).ok_or(Error::Index {
                    what: "gather_elems",
                    index: i,
                    bound: va.len(),
                })?);
            }
            Tensor::new(vec![flat.len()], data)?
        };
        Ok(self.push_owned(out, Op::GatherElems(a, flat.to_vec()), &[a]))
    }

    /// Mean next-token cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        self.check_finite(logits, "cross_entropy")?;
        let out = {
            let vl = self.value(logits);
            let (rows, v) = (vl.rows(), vl.cols());
            if rows != targets.len() {
                return Err(Error::dim("cross_entropy", vl.shape(), &[targets.len()]));
            }
            let mut total = 0.0;
            let mut count = 0usize;
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = *t {
                    if t >= v {
                        return Err(Error::Index {
                            what: "cross_entropy target",
                            index: t,
                            bound: v,
                        });
                    }
                    total += kernels::neg_log_softmax_at(vl.row(r), t);
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::Domain("cross_entropy has no target rows".into()));
            }
            Tensor::scalar(total / count as f64)
        };
        Ok(self.push_owned(out, Op::CrossEntropy(logits, targets.to_vec()), &[logits]))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_owned(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push_owned(out, Op::Reshape(a), &[a]))
    }

    /// Reverse-mode adjoints of scalar `loss` with respect to `wrt`.
    ///
    /// Consumes the tape: a second call returns a contract error.
    pub fn gradients(&self, loss: Var, wrt: &[Var]) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::Contract(
                "tape already consumed by a previous backward pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.tensor().len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                nodes[loss.0].value.tensor().shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Vec::with_capacity(wrt.len());
        let mut reached = Vec::with_capacity(wrt.len());
        for &v in wrt {
            let shape = nodes[v.0].value.tensor().shape().to_vec();
            match grads.get_mut(v.0).and_then(Option::take) {
                Some(g) if nodes[v.0].requires_grad => {
                    out.push(Tensor { shape, data: g });
                    reached.push(true);
                }
                _ => {
                    out.push(Tensor::zeros(shape));
                    reached.push(false);
                }
            }
        }
        Ok(Gradients {
            grads: out,
            reached,
        })
    }
}

fn rms_inverse(row: &[f64], eps: f64) -> f64 {
    let ms = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
    1.0 / (ms + eps).sqrt()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn backprop(nodes: &[Node<'_>], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.tensor();
    let wants = |v: Var| nodes[v.0].requires_grad;
    let out = nodes[i].value.tensor();

    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            if wants(*a) {
                kernels::matmul_nt_acc_wide(g, vb.data(), accumulate(grads, *a, m * k), m, n, k);
            }
            if wants(*b) {
                kernels::matmul_tn_acc(va.data(), g, accumulate(grads, *b, k * n), m, k, n);
            }
        }
        Op::MatMulNt(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
            if wants(*a) {
                // da = g · b
                let da = accumulate(grads, *a, m * k);
                for r in 0..m {
                    let g_row = &g[r * n..(r + 1) * n];
                    let da_row = &mut da[r * k..(r + 1) * k];
                    for (j, &gv) in g_row.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        for (d, &bv) in da_row.iter_mut().zip(&vb.data()[j * k..(j + 1) * k]) {
                            *d += gv * bv;
                        }
                    }
                }
            }
            if wants(*b) {
                // db = gᵀ · a
                kernels::matmul_tn_acc(g, va.data(), accumulate(grads, *b, n * k), m, n, k);
            }
        }
        Op::Add(a, b) => {
            for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                if wants(v) {
                    let d = accumulate(grads, v, g.len());
                    d.iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x);
                }
            }
        }
        Op::Sub(a, b) => {
            for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                if wants(v) {
                    let d = accumulate(grads, v, g.len());
                    d.iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x);
                }
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if wants(*a) {
                let d = accumulate(grads, *a, g.len());
                for ((d, &x), &y) in d.iter_mut().zip(g).zip(vb.data()) {
                    *d += x * y;
                }
            }
            if wants(*b) {
                let d = accumulate(grads, *b, g.len());
                for ((d, &x), &y) in d.iter_mut().zip(g).zip(va.data()) {
                    *d += x * y;
                }
            }
        }
        Op::Scale(a, c) => {
            let d = accumulate(grads, *a, g.len());
            d.iter_mut().zip(g).for_each(|(d, &x)| *d += c * x);
        }
        Op::Silu(a) => {
            let va = val(*a);
            let d = accumulate(grads, *a, g.len());
            for ((d, &x), &gv) in d.iter_mut().zip(va.data()).zip(g) {
                let s = kernels::sigmoid(x);
                *d += gv * s * (1.0 + x * (1.0 - s));
            }
        }
        Op::Tanh(a) => {
            let d = accumulate(grads, *a, g.len());
            for ((d, &y), &gv) in d.iter_mut().zip(out.data()).zip(g) {
                *d += gv * (1.0 - y * y);
            }
        }
        Op::Map(a, deriv) => {
            let va = val(*a);
            let d = accumulate(grads, *a, g.len());
            for ((d, &x), &gv) in d.iter_mut().zip(va.data()).zip(g) {
                *d += gv * deriv(x);
            }
        }
        Op::RmsNorm(a, eps) => {
            let va = val(*a);
            let cols = va.cols();
            let d = accumulate(grads, *a, g.len());
            for ((x, gr), dr) in va
                .data()
                .chunks(cols)
                .zip(g.chunks(cols))
                .zip(d.chunks_mut(cols))
            {
                let inv = rms_inverse(x, *eps);
                let gx = kernels::dot(gr, x);
                let coef = inv * inv * inv * gx / cols as f64;
                for ((dv, &xv), &gv) in dr.iter_mut().zip(x).zip(gr) {
                    *dv += inv * gv - coef * xv;
                }
            }
        }
        Op::Softmax(a) | Op::MaskedSoftmax(a) => {
            let cols = out.cols();
            let d = accumulate(grads, *a, g.len());
            for ((y, gr), dr) in out
                .data()
                .chunks(cols)
                .zip(g.chunks(cols))
                .zip(d.chunks_mut(cols))
            {
                let gy = kernels::dot(gr, y);
                for ((dv, &yv), &gv) in dr.iter_mut().zip(y).zip(gr) {
                    *dv += yv * (gv - gy);
                }
            }
        }
        Op::GatherRows(a, rows) => {
            let va = val(*a);
            let cols = va.cols();
            let d = accumulate(grads, *a, va.len());
            for (src, &dst) in rows.iter().enumerate() {
                for (dv, &gv) in d[dst * cols..(dst + 1) * cols]
                    .iter_mut()
                    .zip(&g[src * cols..(src + 1) * cols])
                {
                    *dv += gv;
                }
            }
        }
        Op::ScatterRows(parts) => {
            let cols = out.cols();
            for (v, rows) in parts {
                if !wants(*v) {
                    continue;
                }
                let d = accumulate(grads, *v, rows.len() * cols);
                for (src, &dst) in rows.iter().enumerate() {
                    for (dv, &gv) in d[src * cols..(src + 1) * cols]
                        .iter_mut()
                        .zip(&g[dst * cols..(dst + 1) * cols])
                    {
                        *dv += gv;
                    }
                }
            }
        }
        Op::ScaleRows(a, s) => {
            let (va, vs) = (val(*a), val(*s));
            let cols = va.cols();
            if wants(*a) {
                let d = accumulate(grads, *a, va.len());
                for ((dr, gr), &f) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(vs.data()) {
                    dr.iter_mut().zip(gr).for_each(|(dv, &gv)| *dv += gv * f);
                }
            }
            if wants(*s) {
                let d = accumulate(grads, *s, vs.len());
                for ((dv, gr), ar) in d.iter_mut().zip(g.chunks(cols)).zip(va.data().chunks(cols)) {
                    *dv += kernels::dot(gr, ar);
                }
            }
        }
        Op::GatherElems(a, flat) => {
            let len = val(*a).len();
            let d = accumulate(grads, *a, len);
            for (&idx, &gv) in flat.iter().zip(g) {
                d[idx] += gv;
            }
        }
        Op::CrossEntropy(logits, targets) => {
            let vl = val(*logits);
            let cols = vl.cols();
            let count = targets.iter().filter(|t| t.is_some()).count() as f64;
            let scale = g[0] / count;
            let d = accumulate(grads, *logits, vl.len());
            let mut probs = vec![0.0; cols];
            for (r, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                kernels::softmax(vl.row(r), &mut probs);
                let dr = &mut d[r * cols..(r + 1) * cols];
                for (dv, &p) in dr.iter_mut().zip(&probs) {
                    *dv += scale * p;
                }
                dr[t] -= scale;
            }
        }
        Op::Sum(a) => {
            let len = val(*a).len();
            let d = accumulate(grads, *a, len);
            d.iter_mut().for_each(|dv| *dv += g[0]);
        }
        Op::Reshape(a) => {
            let d = accumulate(grads, *a, g.len());
            d.iter_mut().zip(g).for_each(|(dv, &gv)| *dv += gv);
        }
    }
}
