use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a reduction: the input shape with adjacent axes of the same
/// kind merged into runs, so group indices are computed rather than stored.
#[derive(Debug)]
struct ReduceMap {
    /// `(extent, reduced)` per run, outermost first; never empty.
    runs: Vec<(usize, bool)>,
    groups: usize,
    count: usize,
}

impl ReduceMap {
    /// Calls `f(element, group, len, reduced)` for each maximal stretch of
    /// the innermost run: `len` consecutive elements starting at `element`
    /// map to `group` when `reduced`, else to `group..group + len`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, bool)) {
        let k = self.runs.len();
        let mut stride = vec![0usize; k];
        let mut s = 1;
        for r in (0..k).rev() {
            if !self.runs[r].1 {
                stride[r] = s;
                s *= self.runs[r].0;
            }
        }
        let (last, last_reduced) = self.runs[k - 1];
        let outer: usize = self.runs[..k - 1].iter().map(|r| r.0).product();
        let mut idx = vec![0usize; k - 1];
        let mut base = 0usize;
        for o in 0..outer {
            f(o * last, base, last, last_reduced);
            for d in (0..k - 1).rev() {
                idx[d] += 1;
                base += stride[d];
                if idx[d] < self.runs[d].0 {
                    break;
                }
                base -= stride[d] * idx[d];
                idx[d] = 0;
            }
        }
    }

    /// Calls `f(element, group)` for every input element in storage order.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        self.for_each_run(|e0, g0, len, reduced| {
            for j in 0..len {
                f(e0 + j, if reduced { g0 } else { g0 + j });
            }
        });
    }

    /// Repeats each group value over its elements (the broadcast inverse of
    /// a reduction).
    fn broadcast<T: Copy>(&self, groups: &[T], len: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(len);
        self.for_each_run(|_, g0, n, reduced| {
            if reduced {
                out.extend(std::iter::repeat_n(groups[g0], n));
            } else {
                out.extend_from_slice(&groups[g0..g0 + n]);
            }
        });
        out
    }

    /// Sums elements into their groups.
    fn sum_into<T: Scalar>(&self, data: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.groups];
        self.for_each_run(|e0, g0, n, reduced| {
            let src = &data[e0..e0 + n];
            if reduced {
                out[g0] = src.iter().fold(out[g0], |a, &v| a + v);
            } else {
                for (o, &v) in out[g0..g0 + n].iter_mut().zip(src) {
                    *o = *o + v;
                }
            }
        });
        out
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Exp(Var),
    Log(Var),
    LogFloor(Var, T),
    Relu(Var),
    Sqrt(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var, ReduceMap),
    Mean(Var, ReduceMap),
    Variance(Var, ReduceMap, Vec<T>),
    Expand(Var, ReduceMap),
    Softmax(Var),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::LogFloor(..) => "log_floor",
            Op::Relu(..) => "relu",
            Op::Sqrt(..) => "sqrt",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Variance(..) => "var",
            Op::Expand(..) => "expand",
            Op::Softmax(..) => "softmax",
            Op::ConcatRows(..) => "concat_rows",
            Op::SelectRows(..) => "select_rows",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so the record is always a valid
/// topological order and [`Tape::backward`] simply walks it in reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `var`, if `var` required one
    /// and the root depends on it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`], but a leaf the root does not depend on gets
    /// a zero gradient of the right shape.
    pub fn get_or_zeros(&self, var: Var, tape: &Tape<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| tape.value(var).zeros_like())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn reduce_map(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, ReduceMap)> {
    let rank = shape.len();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::invalid(format!(
                "axis {a} out of range for shape {shape:?}"
            )));
        }
        if reduced[a] {
            return Err(Error::invalid(format!("axis {a} listed twice")));
        }
        reduced[a] = true;
    }
    let count: usize = axes.iter().map(|&a| shape[a]).product();
    if count == 0 {
        return Err(Error::invalid(format!(
            "empty reduction over axes {axes:?} of shape {shape:?}"
        )));
    }
    let out_shape: Vec<usize> = (0..rank)
        .filter(|&d| !reduced[d])
        .map(|d| shape[d])
        .collect();
    let mut runs: Vec<(usize, bool)> = Vec::new();
    for d in 0..rank {
        match runs.last_mut() {
            Some(run) if run.1 == reduced[d] => run.0 *= shape[d],
            _ => runs.push((shape[d], reduced[d])),
        }
    }
    if runs.is_empty() {
        runs.push((1, false));
    }
    let groups = out_shape.iter().product();
    Ok((out_shape, ReduceMap { runs, groups, count }))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a value onto the tape with no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !T::all_finite(value.data()) {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(out, op, &[a, b])
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push(out, op, &[x])
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::exp, Op::Exp(x))
    }

    /// Natural logarithm; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::invalid("log of non-positive value"));
        }
        self.unary(x, T::ln, Op::Log(x))
    }

    /// `ln(max(x, floor))`, the guarded logarithm used inside losses.
    pub fn log_floor(&mut self, x: Var, floor: T) -> Result<Var> {
        self.unary(x, |v| v.max(floor).ln(), Op::LogFloor(x, floor))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// Square root. The derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(Error::invalid("sqrt of negative value"));
        }
        self.unary(x, T::sqrt, Op::Sqrt(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            va.data(),
            (k as isize, 1),
            vb.data(),
            (n as isize, 1),
            &mut out,
        );
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 2 {
            return Err(Error::invalid(format!("transpose of rank-{} tensor", s.len())));
        }
        let (r, c) = (s[0], s[1]);
        let d = v.data();
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(d[i * c + j]);
            }
        }
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Sum over `axes`; reduced axes are removed from the shape.
    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let (shape, rm) = reduce_map(self.value(x).shape(), axes)?;
        let out = rm.sum_into(self.value(x).data());
        self.push(Tensor::from_parts(shape, out), Op::Sum(x, rm), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.sum(x, &axes)
    }

    /// Mean over `axes`. Accumulation is shifted by the first element of each
    /// group so that a constant group yields its value exactly.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let (shape, rm) = reduce_map(self.value(x).shape(), axes)?;
        let out = shifted_means(self.value(x).data(), &rm);
        self.push(Tensor::from_parts(shape, out), Op::Mean(x, rm), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.mean(x, &axes)
    }

    /// Population variance (divide by N) over `axes`.
    pub fn var(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let (shape, rm) = reduce_map(self.value(x).shape(), axes)?;
        let d = self.value(x).data();
        let means = shifted_means(d, &rm);
        let mut out = vec![T::zero(); rm.groups];
        rm.for_each(|e, g| {
            let c = d[e] - means[g];
            out[g] = out[g] + c * c;
        });
        let n = T::from_usize(rm.count).unwrap();
        for v in &mut out {
            *v = *v / n;
        }
        self.push(
            Tensor::from_parts(shape, out),
            Op::Variance(x, rm, means),
            &[x],
        )
    }

    /// Broadcasts `x` to `shape` by repeating it along `axes`; the inverse
    /// of reducing `shape` over `axes`.
    pub fn expand(&mut self, x: Var, shape: &[usize], axes: &[usize]) -> Result<Var> {
        let (reduced_shape, rm) = reduce_map(shape, axes)?;
        let v = self.value(x);
        if v.shape() != reduced_shape.as_slice() {
            return Err(shape_err("expand", v.shape(), &reduced_shape));
        }
        let out = rm.broadcast(v.data(), shape.iter().product());
        self.push(Tensor::from_parts(shape.to_vec(), out), Op::Expand(x, rm), &[x])
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let c = match v.shape().last() {
            Some(&c) if c >= 1 => c,
            _ => return Err(Error::invalid("softmax needs a non-empty last axis")),
        };
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks_exact(c) {
            out.extend(softmax_row(row));
        }
        let shape = v.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x), &[x])
    }

    /// Concatenates along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of nothing"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() == 0 || v.shape()[1..] != tail[..] {
                return Err(shape_err("concat_rows", self.value(*first).shape(), v.shape()));
            }
            rows += v.shape()[0];
            out.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(
            Tensor::from_parts(shape, out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Gathers rows (axis 0) in the given order; repeats are allowed.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if v.rank() == 0 {
            return Err(Error::invalid("select_rows on a scalar"));
        }
        let n = v.shape()[0];
        let width = v.len() / n.max(1);
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n {
                return Err(Error::invalid(format!("row {r} out of range {n}")));
            }
            out.extend_from_slice(&v.data()[r * width..(r + 1) * width]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = rows.len();
        self.push(
            Tensor::from_parts(shape, out),
            Op::SelectRows(x, rows.to_vec()),
            &[x],
        )
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward from non-scalar root of shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients {
                grads: grads.into_iter().map(|_| None).collect(),
            });
        }
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) if node.requires_grad => {
                        Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a = *a + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                if need(*b) {
                    self.accumulate(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    let c = g.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, *a, c);
                }
                if need(*b) {
                    let c = g.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, *b, c);
                }
            }
            Op::Div(a, b) => {
                let yb = val(*b);
                if need(*a) {
                    let c = g.iter().zip(yb).map(|(&g, &y)| g / y).collect();
                    self.accumulate(grads, *a, c);
                }
                if need(*b) {
                    let c = g
                        .iter()
                        .zip(out)
                        .zip(yb)
                        .map(|((&g, &q), &y)| -g * q / y)
                        .collect();
                    self.accumulate(grads, *b, c);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.iter().map(|&g| g * c).collect());
            }
            Op::Exp(x) => {
                let c = g.iter().zip(out).map(|(&g, &y)| g * y).collect();
                self.accumulate(grads, *x, c);
            }
            Op::Log(x) => {
                let c = g.iter().zip(val(*x)).map(|(&g, &v)| g / v).collect();
                self.accumulate(grads, *x, c);
            }
            Op::LogFloor(x, floor) => {
                let c = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| if v > *floor { g / v } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, c);
            }
            Op::Relu(x) => {
                let c = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, c);
            }
            Op::Sqrt(x) => {
                let two = T::one() + T::one();
                let c = g
                    .iter()
                    .zip(out)
                    .map(|(&g, &y)| if y > T::zero() { g / (two * y) } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, c);
            }
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if need(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g, (n as isize, 1), val(*b), (1, n as isize), &mut da);
                    self.accumulate(grads, *a, da);
                }
                if need(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, val(*a), (1, k as isize), g, (n as isize, 1), &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                let s = self.nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x, rm) => {
                self.accumulate(grads, *x, rm.broadcast(g, val(*x).len()));
            }
            Op::Mean(x, rm) => {
                let n = T::from_usize(rm.count).unwrap();
                let scaled: Vec<T> = g.iter().map(|&v| v / n).collect();
                self.accumulate(grads, *x, rm.broadcast(&scaled, val(*x).len()));
            }
            Op::Variance(x, rm, means) => {
                let two_over_n = (T::one() + T::one()) / T::from_usize(rm.count).unwrap();
                let xv = val(*x);
                let mut c = Vec::with_capacity(xv.len());
                rm.for_each(|e, k| c.push(g[k] * two_over_n * (xv[e] - means[k])));
                self.accumulate(grads, *x, c);
            }
            Op::Expand(x, rm) => self.accumulate(grads, *x, rm.sum_into(g)),
            Op::Softmax(x) => {
                let cols = *node.value.shape().last().unwrap();
                let mut dx = Vec::with_capacity(out.len());
                for (yr, gr) in out.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&y, &g)| a + y * g);
                    dx.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if need(p) {
                        self.accumulate(grads, p, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::SelectRows(x, rows) => {
                let xv = &self.nodes[x.0].value;
                let width = xv.len() / xv.shape()[0].max(1);
                let mut dx = vec![T::zero(); xv.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..width {
                        dx[r * width + j] = dx[r * width + j] + g[i * width + j];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

/// Group means accumulated relative to each group's first element, so a
/// constant group yields its value exactly.
fn shifted_means<T: Scalar>(d: &[T], rm: &ReduceMap) -> Vec<T> {
    let mut first: Vec<Option<T>> = vec![None; rm.groups];
    let mut acc = vec![T::zero(); rm.groups];
    rm.for_each(|e, g| {
        let x0 = *first[g].get_or_insert(d[e]);
        acc[g] = acc[g] + (d[e] - x0);
    });
    let n = T::from_usize(rm.count).unwrap();
    acc.iter()
        .zip(first)
        .map(|(&a, x0)| x0.map_or(T::zero(), |x0| x0 + a / n))
        .collect()
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T]) -> impl Iterator<Item = T> + '_ {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let denom = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
    row.iter().map(move |&v| (v - max).exp() / denom)
}

/// `c = a · b` with `a` `m × k` and `b` `k × n`, each given with
/// (row stride, column stride); `c` is row-major and overwritten.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every strided access: each operand
    // is a dense m×k / k×n / m×n buffer addressed either row- or
    // column-major.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            T::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn binary_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn mul_by_zeros_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 5.0]));
        let z = tape.constant(Tensor::zeros(&[3]));
        let y = tape.mul(x, z).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(tape.log(x).is_err());
        let y = tape.log_floor(x, 1e-12).unwrap();
        assert!((tape.value(y).data()[1] - (1e-12f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn matmul_identity_and_known_product() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let ib = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(ib).data(), &[5.0, 6.0, 7.0, 8.0]);
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
        let bad = tape.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        assert!(tape.matmul(a, bad).is_err());
    }

    #[test]
    fn reductions_on_constant_and_ramp() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[4], &[2.0; 4]));
        let m = tape.mean_all(c).unwrap();
        let v = tape.var(c, &[0]).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), 2.0);
        assert_eq!(tape.value(v).item().unwrap(), 0.0);

        let r = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let v = tape.var(r, &[0]).unwrap();
        assert!((tape.value(v).item().unwrap() - 1.25).abs() < 1e-15);
    }

    #[test]
    fn variance_of_inexact_constant_is_exactly_zero() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[3], &[0.1, 0.1, 0.1]));
        let v = tape.var(c, &[0]).unwrap();
        assert_eq!(tape.value(v).item().unwrap(), 0.0);
    }

    #[test]
    fn reduce_over_middle_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let m = tape.mean(x, &[1]).unwrap();
        assert_eq!(tape.shape(m), &[2, 2]);
        assert_eq!(tape.value(m).data(), &[2.0, 3.0, 8.0, 9.0]);
        let e = tape.expand(m, &[2, 3, 2], &[1]).unwrap();
        assert_eq!(tape.value(e).data()[4], 2.0);
        assert_eq!(tape.value(e).data()[11], 9.0);
    }

    #[test]
    fn empty_reduction_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[2, 0]));
        assert!(tape.mean(x, &[1]).is_err());
        let y = tape.constant(Tensor::<f64>::zeros(&[2]));
        assert!(tape.mean(y, &[3]).is_err());
    }

    #[test]
    fn mean_grad_is_one_over_n() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[4], &[1.0, 5.0, -2.0, 0.5]));
        let m = tape.mean_all(x).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(x).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.constant(t(&[2], &[1000.0, 0.0]));
        let s = tape.softmax(big).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300);

        let x = tape.constant(t(&[3], &[2.0, 0.0, 0.0]));
        let s = tape.softmax(x).unwrap();
        let denom = 2f64.exp() + 2.0;
        let expect = [2f64.exp() / denom, 1.0 / denom, 1.0 / denom];
        for (p, e) in tape.value(s).data().iter().zip(expect) {
            assert!((p - e).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum_all(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 3]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[0.3, -1.0]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[1000.0]));
        assert!(matches!(tape.exp(x), Err(Error::NonFinite("exp"))));
    }

    #[test]
    fn constants_record_no_backward_rule() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.add(a, a).unwrap();
        assert!(!tape.requires_grad(b));
        let s = tape.sum_all(b).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none());
    }

    #[test]
    fn select_and_concat_rows() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(t(&[1, 2], &[5.0, 6.0]));
        let c = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[3, 2]);
        let s = tape.select_rows(c, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(s).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let total = tape.sum_all(s).unwrap();
        let g = tape.backward(total).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0]);
    }
}
