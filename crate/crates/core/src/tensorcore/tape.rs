use std::sync::Arc;

use super::conv::{col2im, im2col, ConvGeom};
use super::tensor::numel;
use super::{Real, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
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
    MulScalar(Var, T),
    MaxScalar(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Abs(Var),
    Sum(Var, Vec<usize>),
    Mean(Var, Vec<usize>),
    Variance(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode differentiation tape.
///
/// Every primitive appends one node; nodes are stored in creation order, so
/// the node list is already a topological order and [`Tape::backward`] walks
/// it once in reverse.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`, or `None` when no path connects it to the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when `v` did not participate.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

/// Numpy-style broadcast of two shapes (right-aligned).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?} (dim {i}: {da} vs {db})")));
        };
    }
    Ok(out)
}

/// For every element of `full` in row-major order, the flat offset of the
/// corresponding element in the broadcast-compatible `small` shape.
fn broadcast_offsets(full: &[usize], small: &[usize]) -> Vec<usize> {
    let rank = full.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1usize;
    for i in (0..small.len()).rev() {
        let fi = i + rank - small.len();
        strides[fi] = if small[i] == 1 { 0 } else { s };
        s *= small[i];
    }
    let n = numel(full);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < full[d] {
                break;
            }
            off -= strides[d] * full[d];
            idx[d] = 0;
        }
    }
    out
}

/// Sum `grad` (shaped `full`) down to `small` over broadcast axes.
fn reduce_to<T: Real>(grad: &Tensor<T>, small: &[usize]) -> Tensor<T> {
    if grad.shape() == small {
        return grad.clone();
    }
    let offs = broadcast_offsets(grad.shape(), small);
    let mut out = vec![T::zero(); numel(small)];
    for (g, &o) in grad.data().iter().zip(&offs) {
        out[o] = out[o] + *g;
    }
    Tensor::new(small, out).expect("reduced shape")
}

fn keepdim_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

fn check_axes(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<Vec<usize>, TensorError> {
    let mut v = axes.to_vec();
    v.sort_unstable();
    v.dedup();
    if v.iter().any(|&a| a >= shape.len()) {
        return Err(TensorError::InvalidAttr {
            op,
            detail: format!("axes {axes:?} out of range for shape {shape:?}"),
        });
    }
    Ok(v)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Trainable leaf sharing storage with an existing tensor.
    pub fn param_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: a new leaf carrying `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.constant_shared(value)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>()
        } else {
            let shape = broadcast_shape(name, va.shape(), vb.shape())?;
            let oa = broadcast_offsets(&shape, va.shape());
            let ob = broadcast_offsets(&shape, vb.shape());
            let (da, db) = (va.data(), vb.data());
            let out = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect::<Vec<_>>();
            let needs = self.ng(a) || self.ng(b);
            return Ok(self.push(Tensor::new(&shape, out)?, op, needs));
        };
        let shape = va.shape().to_vec();
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&shape, data)?, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.nodes[a.0].value.map(f);
        let needs = self.ng(a);
        self.push(out, op, needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -T::one())
    }

    /// Elementwise `max(x, c)`; the hinge used by variance regularizers.
    pub fn max_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| if x > c { x } else { c }, Op::MaxScalar(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let z = T::zero();
        self.unary(a, |x| if x > z { x } else { z }, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        self.unary(
            a,
            |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.mul(a, a)
    }

    fn last_axis_rows(&self, a: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let shape = self.shape(a);
        match shape.last() {
            Some(&d) if d > 0 => Ok((numel(shape) / d, d)),
            _ => Err(shape_err(op, format!("needs a non-empty last axis, got {shape:?}"))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let (rows, d) = self.last_axis_rows(a, "softmax")?;
        let src = &self.nodes[a.0].value;
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let x = &src.data()[r * d..(r + 1) * d];
            let m = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(x) {
                *o = (v - m).exp();
                s = s + *o;
            }
            for o in &mut out[r * d..(r + 1) * d] {
                *o = *o / s;
            }
        }
        let shape = src.shape().to_vec();
        let needs = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(a), needs))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let (rows, d) = self.last_axis_rows(a, "log_softmax")?;
        let src = &self.nodes[a.0].value;
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let x = &src.data()[r * d..(r + 1) * d];
            let m = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let s = x.iter().fold(T::zero(), |s, &v| s + (v - m).exp());
            let lse = m + s.ln();
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(x) {
                *o = v - lse;
            }
        }
        let shape = src.shape().to_vec();
        let needs = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSoftmax(a), needs))
    }

    /// 2-D matrix product `[m,k] @ [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} @ {sb:?}: inner dims must agree on rank-2 operands")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.nodes[a.0].value.data(),
            k as isize,
            1,
            self.nodes[b.0].value.data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("expects rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.ng(a);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), needs))
    }

    /// 2-D convolution (cross-correlation), NCHW input, OIHW weight.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        if stride == 0 {
            return Err(TensorError::InvalidAttr {
                op: "conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err("conv2d", format!("input {sx:?} and weight {sw:?} must both be rank 4")));
        }
        if sx[1] != sw[1] {
            return Err(shape_err(
                "conv2d",
                format!("input channels {} do not match weight channels {}", sx[1], sw[1]),
            ));
        }
        if let Some(b) = b {
            let sb = self.shape(b);
            if sb != [sw[0]] {
                return Err(shape_err("conv2d", format!("bias {sb:?} must be [{}]", sw[0])));
            }
        }
        let geom = ConvGeom::new(sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], stride, padding)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {sw:?} larger than padded input {sx:?}")))?;
        let cols = im2col(self.nodes[x.0].value.data(), &geom);
        let (ckk, p, o) = (geom.ckk(), geom.out_positions(), geom.out_c);
        let mut out = vec![T::zero(); geom.n * o * p];
        let wdata = self.nodes[w.0].value.data();
        for n in 0..geom.n {
            T::gemm(
                o,
                ckk,
                p,
                T::one(),
                wdata,
                ckk as isize,
                1,
                &cols[n * ckk * p..],
                p as isize,
                1,
                T::zero(),
                &mut out[n * o * p..],
                p as isize,
                1,
            );
        }
        if let Some(b) = b {
            let bd = self.nodes[b.0].value.data();
            for n in 0..geom.n {
                for (oc, &bv) in bd.iter().enumerate() {
                    let base = (n * o + oc) * p;
                    for v in &mut out[base..base + p] {
                        *v = *v + bv;
                    }
                }
            }
        }
        let shape = [geom.n, o, geom.out_h, geom.out_w];
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        // Columns are only needed to differentiate w.r.t. the weight.
        let cols = if self.ng(w) { cols } else { Vec::new() };
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv2d { x, w, b, geom, cols }, needs))
    }

    fn reduce_common(&mut self, name: &'static str, a: Var, axes: &[usize], keepdim: bool) -> Result<(Vec<usize>, Vec<usize>, Vec<T>), TensorError> {
        let shape = self.shape(a).to_vec();
        let axes = check_axes(name, &shape, axes)?;
        let kd = keepdim_shape(&shape, &axes);
        let offs = broadcast_offsets(&shape, &kd);
        let mut out = vec![T::zero(); numel(&kd)];
        for (&v, &o) in self.nodes[a.0].value.data().iter().zip(&offs) {
            out[o] = out[o] + v;
        }
        let out_shape = if keepdim {
            kd
        } else {
            shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        Ok((axes, out_shape, out))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var, TensorError> {
        let (axes, shape, out) = self.reduce_common("sum", a, axes, keepdim)?;
        let needs = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Sum(a, axes), needs))
    }

    pub fn mean(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var, TensorError> {
        let (axes, shape, mut out) = self.reduce_common("mean", a, axes, keepdim)?;
        let count = self.reduced_count(a, &axes);
        if count == 0 {
            return Err(shape_err("mean", "reduction over an empty axis".into()));
        }
        let inv = T::one() / T::from_f64(count as f64);
        out.iter_mut().for_each(|v| *v = *v * inv);
        let needs = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mean(a, axes), needs))
    }

    /// Population variance (divides by the reduced element count).
    pub fn variance(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var, TensorError> {
        let (axes, shape, sums) = self.reduce_common("variance", a, axes, keepdim)?;
        let count = self.reduced_count(a, &axes);
        if count == 0 {
            return Err(shape_err("variance", "reduction over an empty axis".into()));
        }
        let inv = T::one() / T::from_f64(count as f64);
        let src = self.shape(a).to_vec();
        let kd = keepdim_shape(&src, &axes);
        let offs = broadcast_offsets(&src, &kd);
        let mut out = vec![T::zero(); sums.len()];
        for (&v, &o) in self.nodes[a.0].value.data().iter().zip(&offs) {
            let d = v - sums[o] * inv;
            out[o] = out[o] + d * d;
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let needs = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Variance(a, axes), needs))
    }

    fn reduced_count(&self, a: Var, axes: &[usize]) -> usize {
        let s = self.shape(a);
        axes.iter().map(|&i| s[i]).product()
    }

    /// Sum over every element, producing a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes, false)
    }

    /// Mean over every element, producing a scalar.
    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes, false)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAttr {
                op: "concat",
                detail: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{s:?} incompatible with {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.nodes[v.0].value.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(inputs.to_vec(), axis), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = (*self.nodes[a.0].value).clone().reshaped(shape)?;
        let needs = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(TensorError::InvalidAttr {
                op: "narrow",
                detail: format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let needs = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Narrow { x: a, axis, start }, needs))
    }

    /// Reverse pass from a scalar root.
    ///
    /// The tape is left untouched, so calling this twice yields identical
    /// gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, TensorError> {
        let rs = self.shape(root);
        if numel(rs) != 1 {
            return Err(TensorError::NonScalarRoot { shape: rs.to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rs, T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = grads[i].take().filter(|_| matches!(node.op, Op::Leaf));
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        let val = |v: Var| -> &Tensor<T> { &self.nodes[v.0].value };
        let zip_map = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Tensor<T> {
            let data = g.data().iter().zip(a.data()).map(|(&gv, &x)| f(gv, x)).collect();
            Tensor::new(g.shape(), data).expect("grad shape")
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, reduce_to(g, val(*a).shape()));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, reduce_to(g, val(*b).shape()));
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, reduce_to(g, val(*a).shape()));
                }
                if self.ng(*b) {
                    let neg = g.map(|x| -x);
                    self.accumulate(grads, *b, reduce_to(&neg, val(*b).shape()));
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(self.nodes[i].op, Op::Div(..));
                let (va, vb) = (val(*a), val(*b));
                let shape = g.shape();
                let oa = broadcast_offsets(shape, va.shape());
                let ob = broadcast_offsets(shape, vb.shape());
                if self.ng(*a) {
                    let d: Vec<T> = g
                        .data()
                        .iter()
                        .zip(&ob)
                        .map(|(&gv, &j)| if is_div { gv / vb.data()[j] } else { gv * vb.data()[j] })
                        .collect();
                    let full = Tensor::new(shape, d).expect("grad shape");
                    self.accumulate(grads, *a, reduce_to(&full, va.shape()));
                }
                if self.ng(*b) {
                    let d: Vec<T> = g
                        .data()
                        .iter()
                        .zip(oa.iter().zip(&ob))
                        .map(|(&gv, (&ia, &jb))| {
                            let x = va.data()[ia];
                            if is_div {
                                let y = vb.data()[jb];
                                -gv * x / (y * y)
                            } else {
                                gv * x
                            }
                        })
                        .collect();
                    let full = Tensor::new(shape, d).expect("grad shape");
                    self.accumulate(grads, *b, reduce_to(&full, vb.shape()));
                }
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulScalar(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::MaxScalar(a, c) => {
                let c = *c;
                let d = zip_map(val(*a), &|gv, x| if x > c { gv } else { T::zero() });
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = zip_map(val(*a), &|gv, x| if x > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let c = T::from_f64(GELU_C);
                let k = T::from_f64(GELU_A);
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let d = zip_map(val(*a), &|gv, x| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                    gv * (half * (T::one() + t) + half * x * dt)
                });
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = zip_map(val(*a), &|gv, x| gv / x);
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = zip_map(out, &|gv, y| gv * y);
                self.accumulate(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let two = T::from_f64(2.0);
                let d = zip_map(out, &|gv, y| gv / (two * y));
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = zip_map(val(*a), &|gv, x| {
                    if x > T::zero() {
                        gv
                    } else if x < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let d = *out.shape().last().expect("softmax rank");
                let mut gx = vec![T::zero(); g.numel()];
                for r in 0..g.numel() / d {
                    let y = &out.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot = y.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for j in 0..d {
                        gx[r * d + j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(g.shape(), gx).expect("grad shape"));
            }
            Op::LogSoftmax(a) => {
                let d = *out.shape().last().expect("log_softmax rank");
                let mut gx = vec![T::zero(); g.numel()];
                for r in 0..g.numel() / d {
                    let y = &out.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let s = gr.iter().fold(T::zero(), |s, &b| s + b);
                    for j in 0..d {
                        gx[r * d + j] = gr[j] - y[j].exp() * s;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(g.shape(), gx).expect("grad shape"));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.ng(*a) {
                    // ga = g @ bᵀ
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, vb.data(), 1, n as isize, T::zero(), &mut ga, k as isize, 1);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], ga).expect("grad shape"));
                }
                if self.ng(*b) {
                    // gb = aᵀ @ g
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), va.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), &mut gb, n as isize, 1);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], gb).expect("grad shape"));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(&[c, r], gx).expect("grad shape"));
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (ckk, p, o) = (geom.ckk(), geom.out_positions(), geom.out_c);
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut gb = vec![T::zero(); o];
                        for n in 0..geom.n {
                            for (oc, acc) in gb.iter_mut().enumerate() {
                                let base = (n * o + oc) * p;
                                *acc = g.data()[base..base + p].iter().fold(*acc, |s, &v| s + v);
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(&[o], gb).expect("grad shape"));
                    }
                }
                if self.ng(*w) {
                    // gw = Σ_n g_n [o,p] @ cols_nᵀ [p,ckk]
                    let mut gw = vec![T::zero(); o * ckk];
                    for n in 0..geom.n {
                        T::gemm(
                            o,
                            p,
                            ckk,
                            T::one(),
                            &g.data()[n * o * p..],
                            p as isize,
                            1,
                            &cols[n * ckk * p..],
                            1,
                            p as isize,
                            T::one(),
                            &mut gw,
                            ckk as isize,
                            1,
                        );
                    }
                    self.accumulate(grads, *w, Tensor::new(val(*w).shape(), gw).expect("grad shape"));
                }
                if self.ng(*x) {
                    // dcols_n = wᵀ [ckk,o] @ g_n [o,p]
                    let wd = val(*w).data();
                    let mut dcols = vec![T::zero(); geom.n * ckk * p];
                    for n in 0..geom.n {
                        T::gemm(
                            ckk,
                            o,
                            p,
                            T::one(),
                            wd,
                            1,
                            ckk as isize,
                            &g.data()[n * o * p..],
                            p as isize,
                            1,
                            T::zero(),
                            &mut dcols[n * ckk * p..],
                            p as isize,
                            1,
                        );
                    }
                    let gx = col2im(&dcols, geom);
                    self.accumulate(grads, *x, Tensor::new(val(*x).shape(), gx).expect("grad shape"));
                }
            }
            Op::Sum(a, axes) | Op::Mean(a, axes) | Op::Variance(a, axes) => {
                let src = val(*a);
                let kd = keepdim_shape(src.shape(), axes);
                let offs = broadcast_offsets(src.shape(), &kd);
                let count = axes.iter().map(|&ax| src.shape()[ax]).product::<usize>();
                let inv = T::one() / T::from_f64(count as f64);
                let gd = g.data();
                let gx: Vec<T> = match &self.nodes[i].op {
                    Op::Sum(..) => offs.iter().map(|&o| gd[o]).collect(),
                    Op::Mean(..) => offs.iter().map(|&o| gd[o] * inv).collect(),
                    _ => {
                        let mut means = vec![T::zero(); numel(&kd)];
                        for (&v, &o) in src.data().iter().zip(&offs) {
                            means[o] = means[o] + v;
                        }
                        let two = T::from_f64(2.0);
                        src.data()
                            .iter()
                            .zip(&offs)
                            .map(|(&v, &o)| gd[o] * two * (v - means[o] * inv) * inv)
                            .collect()
                    }
                };
                self.accumulate(grads, *a, Tensor::new(src.shape(), gx).expect("grad shape"));
            }
            Op::Concat(inputs, axis) => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let sv = val(v).shape();
                    let len = sv[*axis];
                    if self.ng(v) {
                        let mut gx = Vec::with_capacity(numel(sv));
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gx.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.accumulate(grads, v, Tensor::new(sv, gx).expect("grad shape"));
                    }
                    offset += len;
                }
            }
            Op::Reshape(a) => {
                let gx = g.clone().reshaped(val(*a).shape()).expect("grad shape");
                self.accumulate(grads, *a, gx);
            }
            Op::Narrow { x, axis, start } => {
                let sx = val(*x).shape();
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[axis + 1..].iter().product();
                let len = g.shape()[*axis];
                let mut gx = vec![T::zero(); numel(sx)];
                for o in 0..outer {
                    let dst = (o * sx[*axis] + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(sx, gx).expect("grad shape"));
            }
        }
    }
}
