use crate::error::{Error, Result};

use super::{numel, ParamId, ParamStore, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<F> {
    Owned(Vec<F>),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Scale(Var, f64),
    Softmax(Var, usize),
    LogSumExp(Var, Option<usize>),
    Sum(Var),
    AddN(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    StackColumns(Vec<Var>),
    Column(Var, usize),
    SliceRows(Var, usize),
    Unfold { x: Var, window: usize, left: usize },
    MaxColumns(Var, Vec<usize>),
    Pick(Var, usize),
    GatherColumns(Var, Vec<usize>),
}

struct Node<F> {
    op: Op,
    shape: Vec<usize>,
    value: Value<F>,
    needs_grad: bool,
}

/// A tape of operations recorded during one forward pass.
///
/// Nodes are appended in execution order, so the tape is always in
/// topological order and [`Graph::backward`] visits each node once, from the
/// last to the first.
pub struct Graph<'p, F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    params: Option<&'p ParamStore<F>>,
    bound: Vec<Option<Var>>,
}

/// Result of a backward pass.
pub struct Gradients<F> {
    params: Vec<(ParamId, Vec<F>)>,
    leaves: Vec<(Var, Vec<F>)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradients of every bound parameter that requires them, in binding order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[F]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    /// Gradient of a leaf created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&[F]> {
        self.leaves
            .iter()
            .find(|(l, _)| *l == v)
            .map(|(_, g)| g.as_slice())
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [m] => (*m, 1),
        [m, n] => (*m, *n),
        _ => (shape[0], numel(&shape[1..])),
    }
}

fn matmul_into<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Vec<F>>, len: usize, f: impl FnOnce(&mut [F])) {
    let buf = slot.get_or_insert_with(|| vec![F::zero(); len]);
    f(buf);
}

impl<F: Scalar> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    /// A graph without parameters, for free-standing computations.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            bound: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<F>) -> Self {
        Graph {
            nodes: Vec::with_capacity(1024),
            params: Some(params),
            bound: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<F>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            op,
            shape,
            value: Value::Owned(data),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self
                .params
                .expect("parameter node without store")
                .get(*id)
                .data(),
        }
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::dim("constant", shape, &[data.len()]));
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), data, false))
    }

    /// Leaf node holding a copy of `t`; gradients are reported through
    /// [`Gradients::wrt`] when `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    /// Binds a stored parameter. Binding the same id twice returns the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let t = store.get(id);
        self.nodes.push(Node {
            op: Op::Param,
            shape: t.shape().to_vec(),
            value: Value::Param(id),
            needs_grad: t.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.0] = Some(v);
        v
    }

    /// Matrix product. `b` may be a vector, in which case it is treated as a
    /// single column and the result is a vector.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.is_empty() || sb.len() > 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let mut out = vec![F::zero(); m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatMul(a, b), shape, out, ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(op, self.shape(a).to_vec(), out, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`m` vector to every column of an `m × n` matrix (or to
    /// an `m`-vector).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sb.len() != 1 || sx.is_empty() || sx.len() > 2 || sx[0] != sb[0] {
            return Err(Error::dim("add_bias", &sx, &sb));
        }
        let (m, n) = dims2(&sx);
        let bv = self.value(bias);
        let mut out = self.value(x).to_vec();
        for i in 0..m {
            for o in &mut out[i * n..(i + 1) * n] {
                *o += bv[i];
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(Op::AddBias(x, bias), sx, out, ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F, op: Op) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let ng = self.ng(x);
        self.push(op, self.shape(x).to_vec(), out, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, F::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).iter().find(|v| !v.exp().is_finite()) {
            return Err(Error::Domain {
                op: "exp",
                detail: format!("overflow at input {v}"),
            });
        }
        Ok(self.unary(x, F::exp, Op::Exp(x)))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).iter().find(|v| !(**v > F::zero())) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {v}"),
            });
        }
        Ok(self.unary(x, F::ln, Op::Log(x)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cf = F::of(c);
        self.unary(x, |v| v * cf, Op::Scale(x, c))
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, stride) = axis_layout("softmax", &shape, axis)?;
        let xv = self.value(x);
        let mut out = vec![F::zero(); xv.len()];
        for o in 0..outer {
            for s in 0..stride {
                let idx = |i: usize| o * len * stride + i * stride + s;
                let max = (0..len)
                    .map(|i| xv[idx(i)])
                    .fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for i in 0..len {
                    let e = (xv[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    z += e;
                }
                for i in 0..len {
                    out[idx(i)] = out[idx(i)] / z;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Op::Softmax(x, axis), shape, out, ng))
    }

    /// Log-sum-exp reduction along `axis`, or over every element when `None`.
    pub fn logsumexp(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let xv = self.value(x);
        let lse = |it: &mut dyn Iterator<Item = F>| -> F {
            let vals: Vec<F> = it.collect();
            let max = vals.iter().copied().fold(F::neg_infinity(), F::max);
            if max == F::neg_infinity() {
                return max;
            }
            max + vals.iter().map(|&v| (v - max).exp()).sum::<F>().ln()
        };
        let (out, out_shape) = match axis {
            None => (vec![lse(&mut xv.iter().copied())], Vec::new()),
            Some(axis) => {
                let (outer, len, stride) = axis_layout("logsumexp", &shape, axis)?;
                let mut out = Vec::with_capacity(outer * stride);
                for o in 0..outer {
                    for s in 0..stride {
                        out.push(lse(&mut (0..len)
                            .map(|i| xv[o * len * stride + i * stride + s])));
                    }
                }
                let mut out_shape = shape.clone();
                out_shape.remove(axis);
                (out, out_shape)
            }
        };
        let ng = self.ng(x);
        Ok(self.push(Op::LogSumExp(x, axis), out_shape, out, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(Op::Sum(x), Vec::new(), vec![s], ng)
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("add_n of nothing".into()))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![F::zero(); numel(&shape)];
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(Error::dim("add_n", &shape, self.shape(x)));
            }
            for (o, &v) in out.iter_mut().zip(self.value(x)) {
                *o += v;
            }
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(Op::AddN(xs.to_vec()), shape, out, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("transpose", &shape, &[]));
        }
        let (m, n) = (shape[0], shape[1]);
        let xv = self.value(x);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Op::Transpose(x), vec![n, m], out, ng))
    }

    /// Reinterprets the row-major buffer under a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(Op::Reshape(x), shape.to_vec(), out, ng))
    }

    /// Concatenation along the first axis. Inputs are all vectors, or all
    /// matrices with the same column count.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim("concat", self.shape(first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(x));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(Op::Concat(xs.to_vec()), shape, out, ng))
    }

    /// Builds an `m × n` matrix whose columns are the given `m`-vectors.
    pub fn stack_columns(&mut self, cols: &[Var]) -> Result<Var> {
        let first = *cols
            .first()
            .ok_or_else(|| Error::Contract("stack_columns of nothing".into()))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() != 1 {
            return Err(Error::dim("stack_columns", &s0, &[]));
        }
        let (m, n) = (s0[0], cols.len());
        let mut out = vec![F::zero(); m * n];
        for (j, &c) in cols.iter().enumerate() {
            if self.shape(c) != s0.as_slice() {
                return Err(Error::dim("stack_columns", &s0, self.shape(c)));
            }
            for (i, &v) in self.value(c).iter().enumerate() {
                out[i * n + j] = v;
            }
        }
        let ng = cols.iter().any(|&c| self.ng(c));
        Ok(self.push(Op::StackColumns(cols.to_vec()), vec![m, n], out, ng))
    }

    /// Column `j` of a matrix, as a vector.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || j >= shape[1] {
            return Err(Error::dim("column", &shape, &[j]));
        }
        let (m, n) = (shape[0], shape[1]);
        let xv = self.value(x);
        let out = (0..m).map(|i| xv[i * n + j]).collect();
        let ng = self.ng(x);
        Ok(self.push(Op::Column(x, j), vec![m], out, ng))
    }

    /// Rows `start..start + len` of a vector or matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || len == 0 || start + len > shape[0] {
            return Err(Error::dim("slice_rows", &shape, &[start, len]));
        }
        let (_, n) = dims2(&shape);
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let ng = self.ng(x);
        Ok(self.push(Op::SliceRows(x, start), out_shape, out, ng))
    }

    /// Sliding-window unfolding of a `d × N` matrix into `(window·d) × N`:
    /// column `t` stacks input columns `t - left .. t - left + window`, with
    /// zeros outside `0..N`.
    pub fn unfold(&mut self, x: Var, window: usize, left: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || window == 0 || left >= window {
            return Err(Error::dim("unfold", &shape, &[window, left]));
        }
        let (d, n) = (shape[0], shape[1]);
        let xv = self.value(x);
        let mut out = vec![F::zero(); window * d * n];
        for k in 0..window {
            for t in 0..n {
                let src = t as isize - left as isize + k as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                for i in 0..d {
                    out[(k * d + i) * n + t] = xv[i * n + src as usize];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Op::Unfold { x, window, left },
            vec![window * d, n],
            out,
            ng,
        ))
    }

    /// Row-wise maximum over the columns of a matrix. Ties go to the lowest
    /// column.
    pub fn max_columns(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("max_columns", &shape, &[]));
        }
        let (m, n) = (shape[0], shape[1]);
        let xv = self.value(x);
        let mut arg = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            out.push(row[best]);
        }
        let ng = self.ng(x);
        Ok(self.push(Op::MaxColumns(x, arg), vec![m], out, ng))
    }

    /// Single element at a flat row-major index.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let len = self.value(x).len();
        if index >= len {
            return Err(Error::dim("pick", self.shape(x), &[index]));
        }
        let v = self.value(x)[index];
        let ng = self.ng(x);
        Ok(self.push(Op::Pick(x, index), Vec::new(), vec![v], ng))
    }

    /// Selects columns of an `m × V` matrix by index.
    pub fn gather_columns(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || indices.is_empty() {
            return Err(Error::dim("gather_columns", &shape, &[indices.len()]));
        }
        let (m, v) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&j| j >= v) {
            return Err(Error::dim("gather_columns", &shape, &[bad]));
        }
        let k = indices.len();
        let xv = self.value(x);
        let mut out = vec![F::zero(); m * k];
        for i in 0..m {
            for (c, &j) in indices.iter().enumerate() {
                out[i * k + c] = xv[i * v + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Op::GatherColumns(x, indices.to_vec()),
            vec![m, k],
            out,
            ng,
        ))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);
        let mut params = Vec::new();
        let mut leaves = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => leaves.push((Var(i), g)),
                Op::Param => {
                    if let Value::Param(id) = node.value {
                        params.push((id, g));
                    }
                }
                op => self.propagate(op, i, &g, &mut grads),
            }
        }
        params.sort_by_key(|(id, _)| *id);
        leaves.sort_by_key(|(v, _)| *v);
        Ok(Gradients { params, leaves })
    }

    fn propagate(&self, op: &Op, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let out_val = self.value(Var(i));
        let len = |v: Var| numel(self.shape(v));
        match op {
            Op::Leaf | Op::Param => unreachable!(),
            Op::MatMul(a, b) => {
                let sa = self.shape(*a);
                let (m, k) = (sa[0], sa[1]);
                let n = g.len() / m;
                if self.ng(*a) {
                    let bv = self.value(*b);
                    accumulate(&mut grads[a.0], m * k, |ga| {
                        for r in 0..m {
                            for p in 0..k {
                                let mut s = F::zero();
                                for c in 0..n {
                                    s += g[r * n + c] * bv[p * n + c];
                                }
                                ga[r * k + p] += s;
                            }
                        }
                    });
                }
                if self.ng(*b) {
                    let av = self.value(*a);
                    accumulate(&mut grads[b.0], k * n, |gb| {
                        for r in 0..m {
                            for p in 0..k {
                                let arp = av[r * k + p];
                                if arp == F::zero() {
                                    continue;
                                }
                                for c in 0..n {
                                    gb[p * n + c] += arp * g[r * n + c];
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) {
                    -F::one()
                } else {
                    F::one()
                };
                if self.ng(*a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
                    });
                }
                if self.ng(*b) {
                    accumulate(&mut grads[b.0], g.len(), |gb| {
                        gb.iter_mut().zip(g).for_each(|(x, &y)| *x += sign * y)
                    });
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = self.value(*b);
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        for ((x, &y), &w) in ga.iter_mut().zip(g).zip(bv) {
                            *x += y * w;
                        }
                    });
                }
                if self.ng(*b) {
                    let av = self.value(*a);
                    accumulate(&mut grads[b.0], g.len(), |gb| {
                        for ((x, &y), &w) in gb.iter_mut().zip(g).zip(av) {
                            *x += y * w;
                        }
                    });
                }
            }
            Op::AddBias(x, b) => {
                if self.ng(*x) {
                    accumulate(&mut grads[x.0], g.len(), |gx| {
                        gx.iter_mut().zip(g).for_each(|(p, &q)| *p += q)
                    });
                }
                if self.ng(*b) {
                    let m = len(*b);
                    let n = g.len() / m;
                    accumulate(&mut grads[b.0], m, |gb| {
                        for r in 0..m {
                            gb[r] += g[r * n..(r + 1) * n].iter().copied().sum::<F>();
                        }
                    });
                }
            }
            Op::Tanh(x) => accumulate(&mut grads[x.0], g.len(), |gx| {
                for ((p, &q), &y) in gx.iter_mut().zip(g).zip(out_val) {
                    *p += q * (F::one() - y * y);
                }
            }),
            Op::Sigmoid(x) => accumulate(&mut grads[x.0], g.len(), |gx| {
                for ((p, &q), &y) in gx.iter_mut().zip(g).zip(out_val) {
                    *p += q * y * (F::one() - y);
                }
            }),
            Op::Exp(x) => accumulate(&mut grads[x.0], g.len(), |gx| {
                for ((p, &q), &y) in gx.iter_mut().zip(g).zip(out_val) {
                    *p += q * y;
                }
            }),
            Op::Log(x) => {
                let xv = self.value(*x);
                accumulate(&mut grads[x.0], g.len(), |gx| {
                    for ((p, &q), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *p += q / v;
                    }
                })
            }
            Op::Scale(x, c) => {
                let c = F::of(*c);
                accumulate(&mut grads[x.0], g.len(), |gx| {
                    gx.iter_mut().zip(g).for_each(|(p, &q)| *p += q * c)
                })
            }
            Op::Softmax(x, axis) => {
                let (outer, n, stride) =
                    axis_layout("softmax", self.shape(*x), *axis).expect("checked in forward");
                accumulate(&mut grads[x.0], g.len(), |gx| {
                    for o in 0..outer {
                        for s in 0..stride {
                            let idx = |k: usize| o * n * stride + k * stride + s;
                            let dot: F = (0..n).map(|k| g[idx(k)] * out_val[idx(k)]).sum();
                            for k in 0..n {
                                gx[idx(k)] += out_val[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                })
            }
            Op::LogSumExp(x, axis) => {
                let xv = self.value(*x);
                let total = xv.len();
                match axis {
                    None => accumulate(&mut grads[x.0], total, |gx| {
                        for (p, &v) in gx.iter_mut().zip(xv) {
                            *p += g[0] * (v - out_val[0]).exp();
                        }
                    }),
                    Some(axis) => {
                        let (outer, n, stride) = axis_layout("logsumexp", self.shape(*x), *axis)
                            .expect("checked in forward");
                        accumulate(&mut grads[x.0], total, |gx| {
                            for o in 0..outer {
                                for s in 0..stride {
                                    let oi = o * stride + s;
                                    for k in 0..n {
                                        let idx = o * n * stride + k * stride + s;
                                        gx[idx] += g[oi] * (xv[idx] - out_val[oi]).exp();
                                    }
                                }
                            }
                        })
                    }
                }
            }
            Op::Sum(x) => accumulate(&mut grads[x.0], len(*x), |gx| {
                gx.iter_mut().for_each(|p| *p += g[0])
            }),
            Op::AddN(xs) => {
                for x in xs {
                    if self.ng(*x) {
                        accumulate(&mut grads[x.0], g.len(), |gx| {
                            gx.iter_mut().zip(g).for_each(|(p, &q)| *p += q)
                        });
                    }
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (m, n) = (s[0], s[1]);
                accumulate(&mut grads[x.0], m * n, |gx| {
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] += g[c * m + r];
                        }
                    }
                })
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], g.len(), |gx| {
                gx.iter_mut().zip(g).for_each(|(p, &q)| *p += q)
            }),
            Op::Concat(xs) => {
                let mut off = 0;
                for x in xs {
                    let l = len(*x);
                    if self.ng(*x) {
                        accumulate(&mut grads[x.0], l, |gx| {
                            gx.iter_mut()
                                .zip(&g[off..off + l])
                                .for_each(|(p, &q)| *p += q)
                        });
                    }
                    off += l;
                }
            }
            Op::StackColumns(cols) => {
                let n = cols.len();
                for (j, c) in cols.iter().enumerate() {
                    if self.ng(*c) {
                        let m = len(*c);
                        accumulate(&mut grads[c.0], m, |gc| {
                            for r in 0..m {
                                gc[r] += g[r * n + j];
                            }
                        });
                    }
                }
            }
            Op::Column(x, j) => {
                let s = self.shape(*x);
                let (m, n) = (s[0], s[1]);
                accumulate(&mut grads[x.0], m * n, |gx| {
                    for r in 0..m {
                        gx[r * n + j] += g[r];
                    }
                })
            }
            Op::SliceRows(x, start) => {
                let (_, n) = dims2(self.shape(*x));
                let off = start * n;
                accumulate(&mut grads[x.0], len(*x), |gx| {
                    gx[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(p, &q)| *p += q)
                })
            }
            Op::Unfold { x, window, left } => {
                let s = self.shape(*x);
                let (d, n) = (s[0], s[1]);
                accumulate(&mut grads[x.0], d * n, |gx| {
                    for k in 0..*window {
                        for t in 0..n {
                            let src = t as isize - *left as isize + k as isize;
                            if src < 0 || src >= n as isize {
                                continue;
                            }
                            for r in 0..d {
                                gx[r * n + src as usize] += g[(k * d + r) * n + t];
                            }
                        }
                    }
                })
            }
            Op::MaxColumns(x, arg) => {
                let n = self.shape(*x)[1];
                accumulate(&mut grads[x.0], len(*x), |gx| {
                    for (r, &c) in arg.iter().enumerate() {
                        gx[r * n + c] += g[r];
                    }
                })
            }
            Op::Pick(x, index) => {
                accumulate(&mut grads[x.0], len(*x), |gx| gx[*index] += g[0])
            }
            Op::GatherColumns(x, indices) => {
                let s = self.shape(*x);
                let (m, v) = (s[0], s[1]);
                let k = indices.len();
                accumulate(&mut grads[x.0], m * v, |gx| {
                    for r in 0..m {
                        for (c, &j) in indices.iter().enumerate() {
                            gx[r * v + j] += g[r * k + c];
                        }
                    }
                })
            }
        }
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner stride).
fn axis_layout(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(op, shape, &[axis]));
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(g: &mut Graph<'_, f64>, shape: &[usize], data: &[f64]) -> Var {
        g.leaf(&Tensor::new(shape, data.to_vec()).unwrap().with_requires_grad(true))
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f32>::new();
        let i = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = g.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
        let b = g.constant(&[2, 1], vec![0.0, 5.0]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[0.0]);
        assert_eq!(g.shape(c), &[1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn elementwise_basics() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(&[1], vec![0.0]).unwrap();
        let t = g.tanh(z);
        let s = g.sigmoid(z);
        assert_eq!(g.scalar(t), 0.0);
        assert_eq!(g.scalar(s), 0.5);

        let neg = g.constant(&[2], vec![1.0, -1.0]).unwrap();
        assert!(matches!(g.log(neg), Err(Error::Domain { .. })));
        let big = g.constant(&[1], vec![1000.0]).unwrap();
        assert!(matches!(g.exp(big), Err(Error::Domain { .. })));

        let a = g.constant(&[2], vec![1.0, 2.0]).unwrap();
        let b = g.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&[3], vec![0.0; 3]).unwrap();
        let s = g.softmax(x, 0).unwrap();
        for &v in g.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = g.constant(&[2], vec![1000.0, 1000.0]).unwrap();
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s), &[0.5, 0.5]);

        let x = g.constant(&[2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let rows = g.softmax(x, 1).unwrap();
        let v = g.value(rows);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-6 && (v[2] + v[3] - 1.0).abs() < 1e-6);
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut g = Graph::<f64>::new();
        let x = vec_leaf(&mut g, &[3], &[1.0, -2.0, 4.0]);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = vec_leaf(&mut g, &[], &[3.0]);
        let sq = g.mul(x, x).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = vec_leaf(&mut g, &[2], &[1.0, 2.0]);
        let y = g.tanh(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn parameters_accumulate_across_backward_calls() {
        let mut store = ParamStore::<f64>::new();
        let w = store.insert(
            "w",
            Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_requires_grad(true),
        );
        let frozen = store.insert("frozen", Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let grads = {
            let mut g = Graph::with_params(&store);
            let wv = g.param(w);
            let fv = g.param(frozen);
            let p = g.mul(wv, fv).unwrap();
            let l = g.sum(p);
            g.backward(l).unwrap()
        };
        assert!(grads.param(frozen).is_none());
        store.accumulate(&grads).unwrap();
        store.accumulate(&grads).unwrap();
        assert_eq!(store.get(w).grad().unwrap(), &[6.0, 8.0]);
        assert!(store.get(frozen).grad().is_none());
    }

    #[test]
    fn unfold_pads_with_zeros() {
        let mut g = Graph::<f32>::new();
        let e = g.constant(&[2, 1], vec![7.0, 8.0]).unwrap();
        let u = g.unfold(e, 3, 1).unwrap();
        assert_eq!(g.shape(u), &[6, 1]);
        assert_eq!(g.value(u), &[0.0, 0.0, 7.0, 8.0, 0.0, 0.0]);
    }

    #[test]
    fn max_columns_picks_row_maxima() {
        let mut g = Graph::<f32>::new();
        let h = g.constant(&[2, 2], vec![1.0, 3.0, 4.0, 2.0]).unwrap();
        let m = g.max_columns(h).unwrap();
        assert_eq!(g.value(m), &[3.0, 4.0]);
    }

    /// Central-difference check of `build` on leaves with the given shapes.
    /// The output is contracted with fixed weights so upstream gradients
    /// are not all ones.
    fn fd_check(
        shapes: &[&[usize]],
        data: &[f64],
        build: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
    ) -> f64 {
        let h = 1e-3;
        let value = |inputs: &[Vec<f64>]| -> (f64, Vec<Vec<f64>>) {
            let mut g = Graph::<f64>::new();
            let vars: Vec<Var> = shapes
                .iter()
                .zip(inputs)
                .map(|(s, d)| vec_leaf(&mut g, s, d))
                .collect();
            let out = build(&mut g, &vars).unwrap();
            let n = g.value(out).len();
            let w: Vec<f64> = (0..n).map(|i| 0.5 + 0.25 * ((i * 7) % 5) as f64).collect();
            let wv = g.constant(g.shape(out).to_vec().as_slice(), w).unwrap();
            let prod = g.mul(out, wv).unwrap();
            let loss = g.sum(prod);
            let grads = g.backward(loss).unwrap();
            let gs = vars
                .iter()
                .zip(inputs)
                .map(|(v, d)| grads.wrt(*v).map_or(vec![0.0; d.len()], <[f64]>::to_vec))
                .collect();
            (g.scalar(loss), gs)
        };
        let mut inputs = Vec::new();
        let mut offset = 0;
        for s in shapes {
            let n = numel(s);
            inputs.push(data[offset..offset + n].to_vec());
            offset += n;
        }
        let (_, analytic) = value(&inputs);
        let mut worst = 0.0f64;
        for i in 0..inputs.len() {
            for k in 0..inputs[i].len() {
                let orig = inputs[i][k];
                inputs[i][k] = orig + h;
                let plus = value(&inputs).0;
                inputs[i][k] = orig - h;
                let minus = value(&inputs).0;
                inputs[i][k] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic[i][k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn matmul_gradient_is_row_sums_of_b() {
        let mut g = Graph::<f64>::new();
        let a = vec_leaf(&mut g, &[3, 4], &[0.1; 12]);
        let bd: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let b = g.constant(&[4, 2], bd.clone()).unwrap();
        let c = g.matmul(a, b).unwrap();
        let l = g.sum(c);
        let grads = g.backward(l).unwrap();
        let ga = grads.wrt(a).unwrap();
        for r in 0..3 {
            for p in 0..4 {
                assert_eq!(ga[r * 4 + p], bd[2 * p] + bd[2 * p + 1]);
            }
        }
    }

    #[test]
    fn tanh_derivative_at_point_three() {
        let err = fd_check(&[&[1]], &[0.3], |g, v| Ok(g.tanh(v[0])));
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn softmax_matches_f64_recomputation() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = g.softmax(x, 0).unwrap();
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        for (i, &v) in g.value(s).iter().enumerate() {
            assert!((v as f64 - ((i + 1) as f64).exp() / z).abs() < 1e-7);
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.leaf(&Tensor::from_fn(&[3, 4], |i| (i as f32 * 0.37).sin()).with_requires_grad(true));
            let w = g.constant(&[2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.9, -0.4]).unwrap();
            let y = g.matmul(w, x).unwrap();
            let y = g.tanh(y);
            let s = g.softmax(y, 1).unwrap();
            let l = g.logsumexp(s, None).unwrap();
            let grads = g.backward(l).unwrap();
            grads.wrt(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        #[test]
        fn every_op_matches_finite_differences(
            d in proptest::collection::vec(-2.0f64..2.0, 40),
            p in proptest::collection::vec(0.5f64..2.0, 6),
        ) {
            let tol = 1e-4;
            let m34: &[usize] = &[3, 4];
            let m42: &[usize] = &[4, 2];
            let v3: &[usize] = &[3];
            let v4: &[usize] = &[4];
            let checks: Vec<(&str, f64)> = vec![
                ("matmul", fd_check(&[m34, m42], &d, |g, v| g.matmul(v[0], v[1]))),
                ("matvec", fd_check(&[m34, v4], &d, |g, v| g.matmul(v[0], v[1]))),
                ("add", fd_check(&[m34, m34], &d, |g, v| g.add(v[0], v[1]))),
                ("sub", fd_check(&[m34, m34], &d, |g, v| g.sub(v[0], v[1]))),
                ("mul", fd_check(&[m34, m34], &d, |g, v| g.mul(v[0], v[1]))),
                ("add_bias", fd_check(&[m34, v3], &d, |g, v| g.add_bias(v[0], v[1]))),
                ("tanh", fd_check(&[m34], &d, |g, v| Ok(g.tanh(v[0])))),
                ("sigmoid", fd_check(&[m34], &d, |g, v| Ok(g.sigmoid(v[0])))),
                ("exp", fd_check(&[m34], &d, |g, v| g.exp(v[0]))),
                ("log", fd_check(&[&[6]], &p, |g, v| g.log(v[0]))),
                ("scale", fd_check(&[m34], &d, |g, v| Ok(g.scale(v[0], -1.7)))),
                ("softmax0", fd_check(&[m34], &d, |g, v| g.softmax(v[0], 0))),
                ("softmax1", fd_check(&[m34], &d, |g, v| g.softmax(v[0], 1))),
                ("lse", fd_check(&[m34], &d, |g, v| g.logsumexp(v[0], None))),
                ("lse0", fd_check(&[m34], &d, |g, v| g.logsumexp(v[0], Some(0)))),
                ("lse1", fd_check(&[m34], &d, |g, v| g.logsumexp(v[0], Some(1)))),
                ("add_n", fd_check(&[v4, v4, v4], &d, |g, v| g.add_n(v))),
                ("transpose", fd_check(&[m34], &d, |g, v| g.transpose(v[0]))),
                ("reshape", fd_check(&[m34], &d, |g, v| g.reshape(v[0], &[12]))),
                ("concat", fd_check(&[m34, &[2, 4]], &d, |g, v| g.concat(v))),
                ("stack", fd_check(&[v3, v3], &d, |g, v| g.stack_columns(v))),
                ("column", fd_check(&[m34], &d, |g, v| g.column(v[0], 2))),
                ("slice", fd_check(&[m34], &d, |g, v| g.slice_rows(v[0], 1, 2))),
                ("unfold", fd_check(&[m34], &d, |g, v| g.unfold(v[0], 3, 1))),
                ("max", fd_check(&[m34], &d, |g, v| g.max_columns(v[0]))),
                ("pick", fd_check(&[m34], &d, |g, v| g.pick(v[0], 5))),
                ("gather", fd_check(&[m34], &d, |g, v| g.gather_columns(v[0], &[3, 0, 3]))),
            ];
            for (name, err) in checks {
                proptest::prop_assert!(err < tol, "{} relative error {}", name, err);
            }
        }

        #[test]
        fn softmax_is_shift_invariant(
            d in proptest::collection::vec(-5.0f32..5.0, 4),
            c in -50.0f32..50.0,
        ) {
            let mut g = Graph::<f32>::new();
            let x = g.constant(&[4], d.clone()).unwrap();
            let y = g.constant(&[4], d.iter().map(|v| v + c).collect()).unwrap();
            let (a, b) = (g.softmax(x, 0).unwrap(), g.softmax(y, 0).unwrap());
            for (p, q) in g.value(a).iter().zip(g.value(b)) {
                proptest::prop_assert!((p - q).abs() < 1e-6);
            }
        }
    }
}
