use std::cell::RefCell;
use std::fmt;

use crate::scalar::Scalar;

use super::{AutodiffError, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Primitive recorded on the tape.
#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Add,
    Sub,
    Mul,
    MatMul,
    Conv2d { padding: usize },
    Relu,
    Tanh,
    Silu,
    Exp,
    Log,
    Softplus,
    Sum,
    Mean,
    Reshape,
    Concat { axis: usize },
    Scale(T),
    SquaredError,
    Transpose,
}

struct Entry<T> {
    op: Op<T>,
    inputs: Vec<usize>,
    output: usize,
}

struct Inner<T> {
    nodes: Vec<Tensor<T>>,
    entries: Vec<Entry<T>>,
}

/// Define-by-run gradient tape.
///
/// Every value created through a [`Var`] lives in the tape's arena. An entry is
/// recorded only when at least one input requires a gradient, so inference on
/// constant parameters costs no bookkeeping beyond the arena itself.
pub struct Tape<T> {
    inner: RefCell<Inner<T>>,
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("entries", &inner.entries.len())
            .finish()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { inner: RefCell::new(Inner { nodes: Vec::new(), entries: Vec::new() }) }
    }

    /// Adds a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(tensor);
        Var { tape: self, id: inner.nodes.len() - 1 }
    }

    /// Adds a trainable leaf.
    pub fn param(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    /// Number of recorded primitive applications.
    pub fn len(&self) -> usize {
        self.inner.borrow().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let value = {
            let inner = self.inner.borrow();
            let tensors: Vec<&Tensor<T>> = parts.iter().map(|v| &inner.nodes[v.id]).collect();
            concat_values(&tensors, axis)?
        };
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        self.record(Op::Concat { axis }, &ids, value, "concat")
    }

    fn record(&self, op: Op<T>, inputs: &[usize], value: Tensor<T>, name: &'static str) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let mut inner = self.inner.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| inner.nodes[i].requires_grad());
        inner.nodes.push(value.with_requires_grad(requires_grad));
        let output = inner.nodes.len() - 1;
        if requires_grad {
            inner.entries.push(Entry { op, inputs: inputs.to_vec(), output });
        }
        Ok(Var { tape: self, id: output })
    }

    /// Reverse pass from a scalar root.
    ///
    /// Clears every gradient slot, then fills the slot of each node that
    /// requires a gradient and lies upstream of `root`. Fan-out contributions
    /// are summed. Calling it again with another root replaces the slots.
    pub fn backward(&self, root: Var<'_, T>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        let root_node = &inner.nodes[root.id];
        if root_node.numel() != 1 {
            return Err(AutodiffError::NonScalarRoot(root_node.shape().to_vec()));
        }
        if !root_node.requires_grad() {
            return Err(AutodiffError::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; inner.nodes.len()];
        grads[root.id] = Some(vec![T::one()]);

        let Inner { nodes, entries } = &mut *inner;
        for entry in entries.iter().rev() {
            if entry.output > root.id {
                continue;
            }
            let Some(g) = grads[entry.output].take() else { continue };
            let contributions = backprop(entry, nodes, &g);
            for (slot, contrib) in entry.inputs.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                if !nodes[*slot].requires_grad() {
                    continue;
                }
                match &mut grads[*slot] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += *c),
                    empty => *empty = Some(contrib),
                }
            }
            grads[entry.output] = Some(g);
        }
        for (node, grad) in nodes.iter_mut().zip(grads) {
            let keep = node.requires_grad() && grad.is_some();
            node.set_grad(if keep { grad } else { None });
        }
        Ok(())
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Snapshot of the value, including its gradient slot.
    pub fn tensor(&self) -> Tensor<T> {
        self.tape.inner.borrow().nodes[self.id].clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape().to_vec()
    }

    pub fn data(&self) -> Vec<T> {
        self.tape.inner.borrow().nodes[self.id].data().to_vec()
    }

    pub fn item(&self) -> T {
        self.tape.inner.borrow().nodes[self.id].data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad()
    }

    /// Gradient from the most recent [`Tape::backward`], if this node received one.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        node.grad().map(|g| Tensor::new(node.shape().to_vec(), g.to_vec()).expect("grad shape"))
    }

    fn unary(self, op: Op<T>, name: &'static str, f: impl Fn(T) -> T) -> Result<Self> {
        let value = self.tape.inner.borrow().nodes[self.id].map(f);
        self.tape.record(op, &[self.id], value, name)
    }

    fn binary(self, rhs: Self, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        let value = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id], &inner.nodes[rhs.id]);
            if a.shape() != b.shape() {
                return Err(AutodiffError::Shape {
                    op: name,
                    detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
                });
            }
            a.zip_map(b, f)?
        };
        self.tape.record(op, &[self.id, rhs.id], value, name)
    }

    pub fn add(self, rhs: Self) -> Result<Self> {
        self.binary(rhs, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(self, rhs: Self) -> Result<Self> {
        self.binary(rhs, Op::Sub, "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Self) -> Result<Self> {
        self.binary(rhs, Op::Mul, "mul", |a, b| a * b)
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(self, rhs: Self) -> Result<Self> {
        let value = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id], &inner.nodes[rhs.id]);
            let (m, k, n) = match (a.shape(), b.shape()) {
                (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
                (sa, sb) => {
                    return Err(AutodiffError::Shape {
                        op: "matmul",
                        detail: format!("cannot multiply {sa:?} by {sb:?}"),
                    })
                }
            };
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, k, n, T::one(), a.data(), (k as isize, 1), b.data(), (n as isize, 1), T::zero(), &mut out, (n as isize, 1));
            Tensor::new(vec![m, n], out)?
        };
        self.tape.record(Op::MatMul, &[self.id, rhs.id], value, "matmul")
    }

    /// 2-D cross-correlation with zero padding and unit stride.
    ///
    /// `self` is `[B, Cin, H, W]`, `weight` is `[Cout, Cin, kh, kw]`, the
    /// optional `bias` is `[Cout]`. Output is `[B, Cout, H+2p-kh+1, W+2p-kw+1]`.
    pub fn conv2d(self, weight: Self, bias: Option<Self>, padding: usize) -> Result<Self> {
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id];
            let w = &inner.nodes[weight.id];
            let b = bias.map(|b| &inner.nodes[b.id]);
            let geom = ConvGeom::new(x.shape(), w.shape(), b.map(|b| b.shape()), padding)?;
            geom.forward(x.data(), w.data(), b.map(|b| b.data()))
        };
        let mut inputs = vec![self.id, weight.id];
        inputs.extend(bias.map(|b| b.id));
        self.tape.record(Op::Conv2d { padding }, &inputs, value, "conv2d")
    }

    pub fn relu(self) -> Result<Self> {
        self.unary(Op::Relu, "relu", |v| v.max(T::zero()))
    }

    pub fn tanh(self) -> Result<Self> {
        self.unary(Op::Tanh, "tanh", |v| v.tanh())
    }

    pub fn silu(self) -> Result<Self> {
        self.unary(Op::Silu, "silu", |v| v * sigmoid(v))
    }

    pub fn exp(self) -> Result<Self> {
        self.unary(Op::Exp, "exp", |v| v.exp())
    }

    pub fn log(self) -> Result<Self> {
        {
            let inner = self.tape.inner.borrow();
            if let Some(bad) = inner.nodes[self.id].data().iter().find(|&&v| v <= T::zero()) {
                return Err(AutodiffError::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        self.unary(Op::Log, "log", |v| v.ln())
    }

    /// `ln(1 + eˣ)`, evaluated without overflow. `-softplus(-x)` is log-sigmoid.
    pub fn softplus(self) -> Result<Self> {
        self.unary(Op::Softplus, "softplus", softplus)
    }

    pub fn sum(self) -> Result<Self> {
        let value = Tensor::scalar(self.tape.inner.borrow().nodes[self.id].data().iter().copied().sum());
        self.tape.record(Op::Sum, &[self.id], value, "sum")
    }

    pub fn mean(self) -> Result<Self> {
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id];
            Tensor::scalar(x.data().iter().copied().sum::<T>() / T::of(x.numel() as f64))
        };
        self.tape.record(Op::Mean, &[self.id], value, "mean")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id];
            x.reshaped(shape.to_vec()).map_err(|_| AutodiffError::Shape {
                op: "reshape",
                detail: format!("{:?} into {shape:?}", x.shape()),
            })?
        };
        self.tape.record(Op::Reshape, &[self.id], value, "reshape")
    }

    /// Multiplication by a constant scalar.
    pub fn scale(self, c: T) -> Result<Self> {
        self.unary(Op::Scale(c), "scale", |v| c * v)
    }

    /// `mean((self - target)²)` over all elements.
    pub fn squared_error(self, target: Self) -> Result<Self> {
        let value = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id], &inner.nodes[target.id]);
            if a.shape() != b.shape() {
                return Err(AutodiffError::Shape {
                    op: "squared_error",
                    detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
                });
            }
            let s: T = a.data().iter().zip(b.data()).map(|(&p, &q)| (p - q) * (p - q)).sum();
            Tensor::scalar(s / T::of(a.numel() as f64))
        };
        self.tape.record(Op::SquaredError, &[self.id, target.id], value, "squared_error")
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(self) -> Result<Self> {
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id];
            let &[r, c] = x.shape() else {
                return Err(AutodiffError::Shape {
                    op: "transpose",
                    detail: format!("expected a matrix, got {:?}", x.shape()),
                });
            };
            transpose(x.data(), r, c)
        };
        self.tape.record(Op::Transpose, &[self.id], value, "transpose")
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

fn transpose<T: Scalar>(data: &[T], r: usize, c: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose shape")
}

fn concat_values<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or(AutodiffError::Shape { op: "concat", detail: "no inputs".into() })?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(AutodiffError::Shape {
            op: "concat",
            detail: format!("axis {axis} out of range for rank {rank}"),
        });
    }
    for p in parts {
        let ok = p.shape().len() == rank
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(AutodiffError::Shape {
                op: "concat",
                detail: format!("{:?} vs {:?} along axis {axis}", p.shape(), first.shape()),
            });
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.numel() / outer;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, data)
}

/// Shape bookkeeping shared by the convolution forward and backward passes.
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], bias: Option<&[usize]>, pad: usize) -> Result<Self> {
        let err = |detail: String| AutodiffError::Shape { op: "conv2d", detail };
        let (&[batch, cin, h, wd], &[cout, cin2, kh, kw]) = (x, w) else {
            return Err(err(format!("expected 4-D input and weight, got {x:?} and {w:?}")));
        };
        if cin != cin2 {
            return Err(err(format!("input has {cin} channels, weight expects {cin2}")));
        }
        if let Some(b) = bias {
            if b != [cout] {
                return Err(err(format!("bias shape {b:?}, expected [{cout}]")));
            }
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(err(format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})")));
        }
        Ok(Self { batch, cin, h, w: wd, cout, kh, kw, pad, ho: h + 2 * pad - kh + 1, wo: wd + 2 * pad - kw + 1 })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one batch item into a `[Cin·kh·kw, Ho·Wo]` column matrix.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.p();
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = oy as isize + i as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = ox as isize + j as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters columns back, summing overlaps.
    fn col2im<T: Scalar>(&self, cols: &[T], gx: &mut [T]) {
        let p = self.p();
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = oy as isize + i as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut gx[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = ox as isize + j as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward<T: Scalar>(&self, x: &[T], w: &[T], bias: Option<&[T]>) -> Tensor<T> {
        let (k, p) = (self.k(), self.p());
        let in_item = self.cin * self.h * self.w;
        let out_item = self.cout * p;
        let mut out = vec![T::zero(); self.batch * out_item];
        let mut cols = vec![T::zero(); k * p];
        for b in 0..self.batch {
            self.im2col(&x[b * in_item..(b + 1) * in_item], &mut cols);
            let dst = &mut out[b * out_item..(b + 1) * out_item];
            if let Some(bias) = bias {
                for (co, chunk) in dst.chunks_mut(p).enumerate() {
                    chunk.fill(bias[co]);
                }
            }
            T::gemm(self.cout, k, p, T::one(), w, (k as isize, 1), &cols, (p as isize, 1), T::one(), dst, (p as isize, 1));
        }
        Tensor::new(vec![self.batch, self.cout, self.ho, self.wo], out).expect("conv output shape")
    }

    fn backward<T: Scalar>(&self, x: &[T], w: &[T], g: &[T], with_bias: bool) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
        let (k, p) = (self.k(), self.p());
        let in_item = self.cin * self.h * self.w;
        let out_item = self.cout * p;
        let mut gx = vec![T::zero(); x.len()];
        let mut gw = vec![T::zero(); w.len()];
        let mut gb = with_bias.then(|| vec![T::zero(); self.cout]);
        let mut cols = vec![T::zero(); k * p];
        let mut gcols = vec![T::zero(); k * p];
        for b in 0..self.batch {
            let gout = &g[b * out_item..(b + 1) * out_item];
            self.im2col(&x[b * in_item..(b + 1) * in_item], &mut cols);
            // gw += gout · colsᵀ
            T::gemm(self.cout, p, k, T::one(), gout, (p as isize, 1), &cols, (1, p as isize), T::one(), &mut gw, (k as isize, 1));
            // gcols = wᵀ · gout
            T::gemm(k, self.cout, p, T::one(), w, (1, k as isize), gout, (p as isize, 1), T::zero(), &mut gcols, (p as isize, 1));
            self.col2im(&gcols, &mut gx[b * in_item..(b + 1) * in_item]);
            if let Some(gb) = gb.as_mut() {
                for (co, chunk) in gout.chunks(p).enumerate() {
                    gb[co] += chunk.iter().copied().sum();
                }
            }
        }
        (gx, gw, gb)
    }
}

/// Vector-Jacobian products for one entry. Returns one optional gradient per input.
fn backprop<T: Scalar>(entry: &Entry<T>, nodes: &[Tensor<T>], g: &[T]) -> Vec<Option<Vec<T>>> {
    let input = |i: usize| &nodes[entry.inputs[i]];
    let out = &nodes[entry.output];
    let wants = |i: usize| input(i).requires_grad();
    let elementwise = |f: &dyn Fn(usize) -> T| -> Vec<T> { (0..g.len()).map(f).collect() };

    match &entry.op {
        Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        Op::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
        Op::Mul => {
            let (a, b) = (input(0).data(), input(1).data());
            vec![
                wants(0).then(|| elementwise(&|i| g[i] * b[i])),
                wants(1).then(|| elementwise(&|i| g[i] * a[i])),
            ]
        }
        Op::MatMul => {
            let (a, b) = (input(0), input(1));
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let ga = wants(0).then(|| {
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, T::one(), g, (n as isize, 1), b.data(), (1, n as isize), T::zero(), &mut ga, (k as isize, 1));
                ga
            });
            let gb = wants(1).then(|| {
                let mut gb = vec![T::zero(); k * n];
                T::gemm(k, m, n, T::one(), a.data(), (1, k as isize), g, (n as isize, 1), T::zero(), &mut gb, (n as isize, 1));
                gb
            });
            vec![ga, gb]
        }
        Op::Conv2d { padding } => {
            let bias = entry.inputs.get(2).map(|&i| nodes[i].shape());
            let geom = ConvGeom::new(input(0).shape(), input(1).shape(), bias, *padding).expect("validated in forward");
            let (gx, gw, gb) = geom.backward(input(0).data(), input(1).data(), g, bias.is_some());
            let mut res = vec![wants(0).then_some(gx), wants(1).then_some(gw)];
            if bias.is_some() {
                res.push(gb);
            }
            res
        }
        Op::Relu => {
            let x = input(0).data();
            vec![Some(elementwise(&|i| if x[i] > T::zero() { g[i] } else { T::zero() }))]
        }
        Op::Tanh => {
            let y = out.data();
            vec![Some(elementwise(&|i| g[i] * (T::one() - y[i] * y[i])))]
        }
        Op::Silu => {
            let x = input(0).data();
            vec![Some(elementwise(&|i| {
                let s = sigmoid(x[i]);
                g[i] * s * (T::one() + x[i] * (T::one() - s))
            }))]
        }
        Op::Exp => {
            let y = out.data();
            vec![Some(elementwise(&|i| g[i] * y[i]))]
        }
        Op::Log => {
            let x = input(0).data();
            vec![Some(elementwise(&|i| g[i] / x[i]))]
        }
        Op::Softplus => {
            let x = input(0).data();
            vec![Some(elementwise(&|i| g[i] * sigmoid(x[i])))]
        }
        Op::Sum => vec![Some(vec![g[0]; input(0).numel()])],
        Op::Mean => {
            let n = input(0).numel();
            vec![Some(vec![g[0] / T::of(n as f64); n])]
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Concat { axis } => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let mut res: Vec<Option<Vec<T>>> = entry
                .inputs
                .iter()
                .map(|&i| nodes[i].requires_grad().then(|| Vec::with_capacity(nodes[i].numel())))
                .collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (slot, &i) in res.iter_mut().zip(&entry.inputs) {
                    let chunk = nodes[i].numel() / outer;
                    if let Some(v) = slot {
                        v.extend_from_slice(&g[offset..offset + chunk]);
                    }
                    offset += chunk;
                }
            }
            res
        }
        Op::Scale(c) => vec![Some(g.iter().map(|&v| *c * v).collect())],
        Op::SquaredError => {
            let (a, b) = (input(0).data(), input(1).data());
            let k = T::of(2.0) * g[0] / T::of(a.len() as f64);
            let d: Vec<T> = a.iter().zip(b).map(|(&p, &q)| k * (p - q)).collect();
            let neg = wants(1).then(|| d.iter().map(|&v| -v).collect());
            vec![wants(0).then_some(d), neg]
        }
        Op::Transpose => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            vec![Some(transpose(g, r, c).into_data())]
        }
    }
}
