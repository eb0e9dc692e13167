use super::{Array, DiffError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Matmul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Logistic(Var),
    Softplus(Var),
    Abs(Var),
    Asin(Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    Maximum(Var, Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    MaxAxis { x: Var, arg: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    SortLast { x: Var, perm: Vec<usize> },
    PermuteLast { x: Var, sorted: Var },
    CumMaxLast { x: Var, arg: Vec<usize> },
    UnionLength { left: Var, right: Var, blocks: Vec<(usize, usize, usize)> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Broadcast(Var),
    Reshape(Var),
    GatherRows { x: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of array computations supporting reverse-mode
/// differentiation. Append order is a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<usize>,
    param_grads: Vec<Array>,
    branch: Option<u64>,
}

const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// Split `shape` around `axis` into (outer, mid, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

fn last_split(a: &Array) -> (usize, usize) {
    let l = *a.shape().last().unwrap_or(&1);
    let rows = if l == 0 { 0 } else { a.len() / l };
    (rows, l)
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: extents and strides describe in-bounds views of `a`, `b` and `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Index mapping for right-aligned broadcasting of `from` into `to`.
fn broadcast_map(from: &[usize], to: &[usize]) -> Option<Vec<usize>> {
    if from.len() > to.len() {
        return None;
    }
    let offset = to.len() - from.len();
    let mut in_strides = vec![0usize; to.len()];
    let mut stride = 1usize;
    for d in (0..from.len()).rev() {
        let (fd, td) = (from[d], to[d + offset]);
        if fd == td {
            in_strides[d + offset] = if fd == 1 { 0 } else { stride };
        } else if fd != 1 {
            return None;
        }
        stride *= fd;
    }
    let total: usize = to.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; to.len()];
    for _ in 0..total {
        map.push(counter.iter().zip(&in_strides).map(|(c, s)| c * s).sum());
        for d in (0..to.len()).rev() {
            counter[d] += 1;
            if counter[d] < to[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    Some(map)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Start recording which side of every kink (relu, max, sort order, ...)
    /// each evaluated element falls on.
    pub fn track_branches(&mut self) {
        self.branch = Some(FNV_OFFSET);
    }

    /// Fingerprint of the branch pattern seen so far, if tracking.
    pub fn branch_signature(&self) -> Option<u64> {
        self.branch
    }

    fn mix(&mut self, v: u64) {
        if let Some(h) = self.branch.as_mut() {
            *h = (*h ^ v).wrapping_mul(FNV_PRIME);
        }
    }

    fn tracking(&self) -> bool {
        self.branch.is_some()
    }

    fn push(&mut self, value: Array, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Constant, &[])
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array::scalar(value))
    }

    /// Register a trainable leaf. Its gradient accumulates across
    /// [`Tape::backward`] calls until [`Tape::zero_grad`].
    pub fn param(&mut self, value: Array) -> Var {
        let zeros = Array::zeros(value.shape());
        self.nodes.push(Node { value, op: Op::Param, requires_grad: true });
        let id = self.nodes.len() - 1;
        self.params.push(id);
        self.param_grads.push(zeros);
        Var(id)
    }

    /// Copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn params(&self) -> Vec<Var> {
        self.params.iter().map(|&i| Var(i)).collect()
    }

    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.params.iter().position(|&i| i == v.0).map(|p| &self.param_grads[p])
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.param_grads {
            g.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DiffError::ShapeMismatch { op, left: sa.to_vec(), right: sb.to_vec() });
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Array {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Array::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("div", a, b)?;
        let out = self.zip(a, b, |p, q| p / q);
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    /// Elementwise maximum. Ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("elementwise-max", a, b)?;
        let out = self.zip(a, b, f64::max);
        if self.tracking() {
            let states: Vec<u64> = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(p, q)| if p > q { 0 } else if p < q { 1 } else { 2 })
                .collect();
            states.into_iter().for_each(|s| self.mix(s));
        }
        Ok(self.push(out, Op::Maximum(a, b), &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch { op: "matmul", left: sa, right: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
        );
        let out = Array::new(vec![m, n], data)?;
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).map(f);
        self.push(out, op, &[x])
    }

    fn mix_signs(&mut self, x: Var, pivot: f64) {
        if self.tracking() {
            let states: Vec<u64> = self
                .value(x)
                .data()
                .iter()
                .map(|&p| if p > pivot { 0 } else if p < pivot { 1 } else { 2 })
                .collect();
            states.into_iter().for_each(|s| self.mix(s));
        }
    }

    /// `max(x, 0)`, with derivative 0 at the origin.
    pub fn relu(&mut self, x: Var) -> Var {
        self.mix_signs(x, 0.0);
        self.unary(x, Op::Relu(x), |p| p.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, DiffError> {
        if !self.value(x).all_finite() {
            return Err(DiffError::NonFinite { op: "exp" });
        }
        Ok(self.unary(x, Op::Exp(x), f64::exp))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, DiffError> {
        if !self.value(x).all_finite() {
            return Err(DiffError::NonFinite { op: "log" });
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    /// Square root; the derivative at 0 is taken to be 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.mix_signs(x, 0.0);
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |p| p * p)
    }

    pub fn logistic(&mut self, x: Var) -> Var {
        self.unary(x, Op::Logistic(x), logistic)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.mix_signs(x, 0.0);
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn asin(&mut self, x: Var) -> Result<Var, DiffError> {
        if self.value(x).data().iter().any(|p| !(-1.0..=1.0).contains(p)) {
            return Err(DiffError::InvalidArgument {
                op: "asin",
                reason: "input outside [-1, 1]".into(),
            });
        }
        Ok(self.unary(x, Op::Asin(x), f64::asin))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |p| p * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |p| p + c)
    }

    /// `max(x, c)`; the gradient passes only where `x > c`.
    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        self.mix_signs(x, c);
        self.unary(x, Op::ClampMin(x, c), |p| p.max(c))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(), DiffError> {
        if axis >= self.shape(x).len() {
            return Err(DiffError::InvalidShape {
                op,
                shape: self.shape(x).to_vec(),
                reason: format!("no axis {axis}"),
            });
        }
        Ok(())
    }

    fn reduced_shape(&self, x: Var, axis: usize) -> Vec<usize> {
        let mut s = self.shape(x).to_vec();
        s.remove(axis);
        s
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        self.check_axis("sum-reduce", x, axis)?;
        let (outer, mid, inner) = axis_split(self.shape(x), axis);
        let xs = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xs[base + i];
                }
            }
        }
        let out = Array::new(self.reduced_shape(x, axis), out)?;
        Ok(self.push(out, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        self.check_axis("mean-reduce", x, axis)?;
        let (outer, mid, inner) = axis_split(self.shape(x), axis);
        if mid == 0 {
            return Err(DiffError::InvalidShape {
                op: "mean-reduce",
                shape: self.shape(x).to_vec(),
                reason: "empty axis".into(),
            });
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xs[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= mid as f64);
        let out = Array::new(self.reduced_shape(x, axis), out)?;
        Ok(self.push(out, Op::MeanAxis { x, axis }, &[x]))
    }

    /// Maximum along `axis`. Ties route the gradient to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        self.check_axis("max-reduce", x, axis)?;
        let (outer, mid, inner) = axis_split(self.shape(x), axis);
        if mid == 0 {
            return Err(DiffError::InvalidShape {
                op: "max-reduce",
                shape: self.shape(x).to_vec(),
                reason: "empty axis".into(),
            });
        }
        let xs = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        let mut tied = vec![false; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    let slot = o * inner + i;
                    let val = xs[base + i];
                    if m == 0 || val > out[slot] {
                        out[slot] = val;
                        arg[slot] = base + i;
                        tied[slot] = false;
                    } else if val == out[slot] {
                        tied[slot] = true;
                    }
                }
            }
        }
        if self.tracking() {
            for (a, t) in arg.iter().zip(&tied) {
                self.mix(*a as u64 * 2 + *t as u64);
            }
        }
        let out = Array::new(self.reduced_shape(x, axis), out)?;
        Ok(self.push(out, Op::MaxAxis { x, arg }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().sum();
        self.push(Array::scalar(total), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, DiffError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(DiffError::InvalidShape {
                op: "mean-reduce",
                shape: self.shape(x).to_vec(),
                reason: "empty".into(),
            });
        }
        let total: f64 = self.value(x).data().iter().sum();
        Ok(self.push(Array::scalar(total / n as f64), Op::MeanAll(x), &[x]))
    }

    /// Ascending sort along the last axis. The permutation is kept on the
    /// node so that [`Tape::permute_like`] can reorder companion arrays.
    pub fn sort_last(&mut self, x: Var) -> Var {
        let (rows, l) = last_split(self.value(x));
        let xs = self.value(x).data();
        let mut perm = Vec::with_capacity(rows * l);
        let mut out = Vec::with_capacity(rows * l);
        let mut idx: Vec<usize> = Vec::with_capacity(l);
        let mut ties = Vec::new();
        for r in 0..rows {
            let row = &xs[r * l..(r + 1) * l];
            idx.clear();
            idx.extend(0..l);
            idx.sort_by(|&i, &j| row[i].total_cmp(&row[j]));
            for (j, &i) in idx.iter().enumerate() {
                perm.push(i);
                out.push(row[i]);
                if j > 0 && row[i] == row[idx[j - 1]] {
                    ties.push((r * l + j) as u64);
                }
            }
        }
        if self.tracking() {
            let p: Vec<u64> = perm.iter().map(|&i| i as u64).collect();
            p.into_iter().for_each(|v| self.mix(v));
            ties.into_iter().for_each(|v| self.mix(v | 1 << 63));
        }
        let out = Array::new(self.shape(x).to_vec(), out).expect("same size");
        self.push(out, Op::SortLast { x, perm }, &[x])
    }

    /// Reorder `x` along its last axis with the permutation of an earlier
    /// [`Tape::sort_last`] node.
    pub fn permute_like(&mut self, x: Var, sorted: Var) -> Result<Var, DiffError> {
        let Op::SortLast { perm, .. } = &self.nodes[sorted.0].op else {
            return Err(DiffError::InvalidArgument {
                op: "permute",
                reason: "reference node is not a sort".into(),
            });
        };
        self.same_shape("permute", x, sorted)?;
        let (rows, l) = last_split(self.value(x));
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(rows * l);
        for r in 0..rows {
            for j in 0..l {
                out.push(xs[r * l + perm[r * l + j]]);
            }
        }
        let out = Array::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(out, Op::PermuteLast { x, sorted }, &[x]))
    }

    /// Running maximum along the last axis. Ties keep the earlier index.
    pub fn cummax_last(&mut self, x: Var) -> Var {
        let (rows, l) = last_split(self.value(x));
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(rows * l);
        let mut arg = Vec::with_capacity(rows * l);
        let mut states = Vec::new();
        for r in 0..rows {
            let mut best = f64::NEG_INFINITY;
            let mut at = r * l;
            for j in 0..l {
                let v = xs[r * l + j];
                if j == 0 || v > best {
                    best = v;
                    at = r * l + j;
                    states.push(0u64);
                } else if v == best {
                    states.push(2);
                } else {
                    states.push(1);
                }
                out.push(best);
                arg.push(at);
            }
        }
        if self.tracking() {
            states.into_iter().for_each(|s| self.mix(s));
        }
        let out = Array::new(self.shape(x).to_vec(), out).expect("same size");
        self.push(out, Op::CumMaxLast { x, arg }, &[x])
    }

    /// Total length of the union of the intervals `[left_j, right_j]` along
    /// the last axis; intervals with `right <= left` are empty. Returns the
    /// input shape without its last axis.
    ///
    /// Each maximal run of overlapping intervals contributes its own
    /// `end - start`, so an endpoint buried inside another interval never
    /// enters the arithmetic.
    pub fn union_length(&mut self, left: Var, right: Var) -> Result<Var, DiffError> {
        self.same_shape("union-length", left, right)?;
        let shape = self.shape(left).to_vec();
        let (rows, l) = last_split(self.value(left));
        let (ls, rs) = (self.value(left).data(), self.value(right).data());
        let mut out = Vec::with_capacity(rows);
        let mut blocks = Vec::new();
        let mut states = Vec::new();
        let mut idx: Vec<usize> = Vec::with_capacity(l);
        for r in 0..rows {
            let base = r * l;
            idx.clear();
            for j in 0..l {
                let (a, b) = (ls[base + j], rs[base + j]);
                if b > a {
                    idx.push(base + j);
                } else if b == a {
                    states.push(1 << 62 | (base + j) as u64);
                }
            }
            idx.sort_by(|&i, &j| ls[i].total_cmp(&ls[j]));
            let mut total = 0.0;
            let mut open: Option<(usize, usize)> = None;
            for (n, &i) in idx.iter().enumerate() {
                if n > 0 && ls[i] == ls[idx[n - 1]] {
                    states.push(1 << 61 | i as u64);
                }
                match open {
                    Some((s, e)) if ls[i] < rs[e] => {
                        if rs[i] > rs[e] {
                            open = Some((s, i));
                        } else if rs[i] == rs[e] {
                            states.push(1 << 60 | i as u64);
                        }
                    }
                    Some((s, e)) => {
                        if ls[i] == rs[e] {
                            states.push(1 << 59 | i as u64);
                        }
                        total += rs[e] - ls[s];
                        blocks.push((r, s, e));
                        open = Some((i, i));
                    }
                    None => open = Some((i, i)),
                }
            }
            if let Some((s, e)) = open {
                total += rs[e] - ls[s];
                blocks.push((r, s, e));
            }
            out.push(total);
        }
        if self.tracking() {
            let marks: Vec<u64> = blocks.iter().map(|&(_, s, e)| (s as u64) << 32 | e as u64).collect();
            marks.into_iter().chain(states).for_each(|v| self.mix(v));
        }
        let out = Array::new(shape[..shape.len().saturating_sub(1)].to_vec(), out)?;
        Ok(self.push(out, Op::UnionLength { left, right, blocks }, &[left, right]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = *inputs.first().ok_or(DiffError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total_mid = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total_mid += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total_mid * inner);
        for o in 0..outer {
            for &v in inputs {
                let mid = self.shape(v)[axis];
                let chunk = mid * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total_mid;
        let out = Array::new(shape, out)?;
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, DiffError> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if start > end || end > shape[axis] {
            return Err(DiffError::InvalidShape {
                op: "slice",
                shape,
                reason: format!("range {start}..{end} on axis {axis}"),
            });
        }
        let (outer, mid, inner) = axis_split(&shape, axis);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&xs[(o * mid + start) * inner..(o * mid + end) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let out = Array::new(new_shape, out)?;
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Numpy-style broadcast of `x` (right-aligned, size-1 dims expand).
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let from = self.shape(x).to_vec();
        let map = broadcast_map(&from, shape).ok_or_else(|| DiffError::ShapeMismatch {
            op: "broadcast",
            left: from.clone(),
            right: shape.to_vec(),
        })?;
        let xs = self.value(x).data();
        let out = map.iter().map(|&i| xs[i]).collect();
        let out = Array::new(shape.to_vec(), out)?;
        Ok(self.push(out, Op::Broadcast(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Rows of `x` (first axis) at `idx`, repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let value = self.value(x);
        let rows = value.rows();
        if value.ndim() == 0 {
            return Err(DiffError::InvalidShape {
                op: "gather",
                shape: vec![],
                reason: "scalar has no rows".into(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(DiffError::InvalidArgument {
                op: "gather",
                reason: format!("row {bad} out of range for {rows} rows"),
            });
        }
        let out = value.select_rows(idx);
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    // Composite helpers.

    /// `x · w + b` for `x: [B, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, DiffError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let shape = self.shape(y).to_vec();
                let bb = self.broadcast(b, &shape)?;
                self.add(y, bb)
            }
            None => Ok(y),
        }
    }

    /// Elementwise combination of `x: [B, n]` with a row vector `r: [n]`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        let rb = self.broadcast(r, &shape)?;
        self.mul(x, rb)
    }

    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        let rb = self.broadcast(r, &shape)?;
        self.add(x, rb)
    }

    /// Scale each row of `x: [B, n]` by `s: [B]`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        let col = self.reshape(s, &[shape[0], 1])?;
        let sb = self.broadcast(col, &shape)?;
        self.mul(x, sb)
    }

    /// Reverse sweep from the scalar `root`; gradients of registered
    /// parameters are added to their accumulators.
    pub fn backward(&mut self, root: Var) -> Result<(), DiffError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(DiffError::NotScalar { shape: rv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Param = self.nodes[i].op {
                let p = self.params.iter().position(|&j| j == i).expect("registered");
                for (acc, gi) in self.param_grads[p].data_mut().iter_mut().zip(&g) {
                    *acc += gi;
                }
                continue;
            }
            self.propagate(i, g, &mut grads);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn zip_grad(&self, g: &[f64], v: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        g.iter().zip(self.value(v).data()).map(|(&gi, &x)| f(gi, x)).collect()
    }

    fn propagate(&self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.iter().map(|x| -x).collect());
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let ga = self.zip_grad(&g, *b, |gi, y| gi * y);
                let gb = self.zip_grad(&g, *a, |gi, x| gi * x);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                let ga: Vec<f64> = g.iter().zip(bv).map(|(gi, y)| gi / y).collect();
                let gb = g
                    .iter()
                    .zip(self.value(*a).data())
                    .zip(bv)
                    .map(|((gi, x), y)| -gi * x / (y * y))
                    .collect();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let ga = gemm(m, n, k, &g, (n as isize, 1), self.value(*b).data(), (1, n as isize));
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = gemm(k, m, n, self.value(*a).data(), (1, k as isize), &g, (n as isize, 1));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Relu(x) => {
                let gx = self.zip_grad(&g, *x, |gi, p| if p > 0.0 { gi } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = g.iter().zip(out.data()).map(|(gi, y)| gi * y).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Log(x) => {
                let gx = self.zip_grad(&g, *x, |gi, p| gi / p);
                self.accumulate(grads, *x, gx);
            }
            Op::Sqrt(x) => {
                let gx = g
                    .iter()
                    .zip(out.data())
                    .map(|(gi, y)| if *y > 0.0 { gi / (2.0 * y) } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Square(x) => {
                let gx = self.zip_grad(&g, *x, |gi, p| 2.0 * p * gi);
                self.accumulate(grads, *x, gx);
            }
            Op::Logistic(x) => {
                let gx = g.iter().zip(out.data()).map(|(gi, y)| gi * y * (1.0 - y)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let gx = self.zip_grad(&g, *x, |gi, p| gi * logistic(p));
                self.accumulate(grads, *x, gx);
            }
            Op::Abs(x) => {
                let gx = self.zip_grad(&g, *x, |gi, p| {
                    if p > 0.0 {
                        gi
                    } else if p < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Asin(x) => {
                let gx = self.zip_grad(&g, *x, |gi, p| {
                    let s = 1.0 - p * p;
                    if s > 0.0 {
                        gi / s.sqrt()
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.iter().map(|gi| gi * c).collect());
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(grads, *x, g),
            Op::ClampMin(x, c) => {
                let gx = self.zip_grad(&g, *x, |gi, p| if p > *c { gi } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for j in 0..g.len() {
                    if av[j] >= bv[j] {
                        ga[j] = g[j];
                    } else {
                        gb[j] = g[j];
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, mid, inner) = axis_split(self.shape(*x), *axis);
                let scale = if matches!(self.nodes[i].op, Op::MeanAxis { .. }) {
                    1.0 / mid as f64
                } else {
                    1.0
                };
                let mut gx = vec![0.0; outer * mid * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        for k in 0..inner {
                            gx[(o * mid + m) * inner + k] = g[o * inner + k] * scale;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MaxAxis { x, arg, .. } | Op::CumMaxLast { x, arg } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (slot, &src) in arg.iter().enumerate() {
                    gx[src] += g[slot];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::UnionLength { left, right, blocks } => {
                let n = self.value(*left).len();
                let (mut gl, mut gr) = (vec![0.0; n], vec![0.0; n]);
                for &(r, s, e) in blocks {
                    gl[s] -= g[r];
                    gr[e] += g[r];
                }
                self.accumulate(grads, *left, gl);
                self.accumulate(grads, *right, gr);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::SortLast { x, perm } => {
                let gx = scatter_perm(&g, perm, last_split(out).1);
                self.accumulate(grads, *x, gx);
            }
            Op::PermuteLast { x, sorted } => {
                let Op::SortLast { perm, .. } = &self.nodes[sorted.0].op else { unreachable!() };
                let gx = scatter_perm(&g, perm, last_split(out).1);
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let total_mid = out.shape()[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let mid = self.shape(v)[*axis];
                    let mut gv = Vec::with_capacity(outer * mid * inner);
                    for o in 0..outer {
                        let start = (o * total_mid + offset) * inner;
                        gv.extend_from_slice(&g[start..start + mid * inner]);
                    }
                    offset += mid;
                    self.accumulate(grads, v, gv);
                }
            }
            Op::Slice { x, axis, start } => {
                let xshape = self.shape(*x);
                let (outer, mid, inner) = axis_split(xshape, *axis);
                let width = out.shape()[*axis];
                let mut gx = vec![0.0; outer * mid * inner];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    gx[dst..dst + width * inner]
                        .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Broadcast(x) => {
                let map = broadcast_map(self.shape(*x), out.shape()).expect("validated");
                let mut gx = vec![0.0; self.value(*x).len()];
                for (slot, &src) in map.iter().enumerate() {
                    gx[src] += g[slot];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, idx } => {
                let cols = self.value(*x).cols();
                let mut gx = vec![0.0; self.value(*x).len()];
                for (r, &src) in idx.iter().enumerate() {
                    let d = &mut gx[src * cols..(src + 1) * cols];
                    d.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(a, b)| *a += b);
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

fn scatter_perm(g: &[f64], perm: &[usize], l: usize) -> Vec<f64> {
    let mut gx = vec![0.0; g.len()];
    if l == 0 {
        return gx;
    }
    for (slot, &src) in perm.iter().enumerate() {
        let row = slot / l;
        gx[row * l + src] += g[slot];
    }
    gx
}

/// Numerically stable `1 / (1 + e^{-x})`.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}
