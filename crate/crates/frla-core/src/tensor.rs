//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! Everything in the training pipeline is expressed through [`Tape`] ops:
//! the tape records each operation eagerly (define-by-run), stores every
//! forward value in an arena, and replays the recorded nodes in reverse to
//! accumulate gradients. Operations whose inputs require no gradient are
//! executed but not recorded, so frozen-teacher subgraphs cost nothing in
//! the backward pass.
//!
//! A [`Tensor`] is a plain owned value container (model parameters, batches,
//! bank rows). It enters a tape via [`Tape::watch`] or [`Tape::constant`]
//! and receives its gradient back through [`Tape::grad`].

use crate::error::{Error, Result};

/// Clamp floor applied inside `log_clamped`; keeps logs of tiny
/// joint-distribution cells finite.
pub const EPS_LOG: f64 = 1e-12;

/// Default central-difference step for gradient checking.
pub const FD_STEP: f64 = 1e-5;

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    expected,
                    values.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.values.len(), "grad length mismatch");
        }
        self.grad = grad;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle into a [`Tape`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Elementwise operation kinds accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Div,
    MaxWithScalar,
    LogClamped,
    Relu,
    Exp,
}

/// Second operand of [`Tape::elementwise`].
#[derive(Debug, Clone, Copy)]
pub enum Operand {
    Tensor(TensorId),
    Scalar(f64),
    None,
}

#[derive(Debug, Clone)]
struct ConvDims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    h_out: usize,
    w_out: usize,
}

/// Recorded operation node: kind, input references, output reference.
/// Forward context (saved values) lives in the arena itself.
#[derive(Debug, Clone)]
enum Op {
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    AddConst { a: TensorId },
    MulConst { a: TensorId, c: f64 },
    MaxScalar { a: TensorId, c: f64 },
    LogClamped { a: TensorId, eps: f64 },
    Relu { a: TensorId },
    Exp { a: TensorId },
    Sqrt { a: TensorId },
    Matmul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Transpose { a: TensorId, rows: usize, cols: usize },
    Conv2d { input: TensorId, kernel: TensorId, dims: ConvDims },
    GlobalAvgPool { a: TensorId, b: usize, h: usize, w: usize, d: usize },
    SoftmaxAxis { a: TensorId, axis: usize },
    SumAll { a: TensorId },
    Reshape { a: TensorId },
    NchwToNhwc { a: TensorId, n: usize, c: usize, h: usize, w: usize },
    ScaleRows { x: TensorId, s: TensorId, rows: usize, cols: usize },
    RepeatInterleave { s: TensorId, times: usize },
    GatherRows { x: TensorId, indices: Vec<usize>, cols: usize },
}

struct Slot {
    values: Vec<f64>,
    shape: Vec<usize>,
    needs_grad: bool,
}

struct Node {
    op: Op,
    out: TensorId,
}

/// Wengert tape: eager recording, reverse replay.
///
/// Topological order holds by construction (an op's inputs must already be
/// on the tape), and a backward pass visits each recorded node exactly once
/// in reverse order. A tape is single-threaded; tensors themselves may move
/// freely between threads.
#[derive(Default)]
pub struct Tape {
    slots: Vec<Slot>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, needs_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let id = TensorId(self.slots.len());
        self.slots.push(Slot {
            values,
            shape,
            needs_grad,
        });
        self.grads.push(None);
        id
    }

    fn record(&mut self, op: Op, values: Vec<f64>, shape: Vec<usize>, needs_grad: bool) -> TensorId {
        let out = self.push(values, shape, needs_grad);
        // Nodes that cannot receive gradient are not recorded; the forward
        // value is kept, the backward sweep never sees them.
        if needs_grad {
            self.nodes.push(Node { op, out });
        }
        out
    }

    /// Registers a tensor on the tape, honoring its `requires_grad` flag.
    /// The tape keeps its own copy of the values.
    pub fn watch(&mut self, t: &Tensor) -> TensorId {
        self.push(t.values.clone(), t.shape.clone(), t.requires_grad)
    }

    /// Registers a tensor's values as a gradient-free constant.
    pub fn constant_of(&mut self, t: &Tensor) -> TensorId {
        self.push(t.values.clone(), t.shape.clone(), false)
    }

    /// Registers values that never receive gradient.
    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(
                "Tape::constant",
                format!("shape {:?} vs {} values", shape, values.len()),
            ));
        }
        Ok(self.push(values, shape, false))
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.push(vec![v], vec![1], false)
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.slots[id.0].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.slots[id.0].shape
    }

    pub fn needs_grad(&self, id: TensorId) -> bool {
        self.slots[id.0].needs_grad
    }

    /// Reads a single-element tensor.
    pub fn scalar(&self, id: TensorId) -> Result<f64> {
        let v = self.value(id);
        if v.len() != 1 {
            return Err(Error::usage(
                "Tape::scalar",
                format!("tensor has {} elements", v.len()),
            ));
        }
        Ok(v[0])
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Copies the accumulated gradient for `id` into `t.grad` (zeros when no
    /// gradient flowed), so the owning tensor holds dRoot/dTensor after
    /// backward.
    pub fn export_grad(&self, id: TensorId, t: &mut Tensor) {
        let g = match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.slots[id.0].values.len()],
        };
        t.set_grad(Some(g));
    }

    // ── elementwise ─────────────────────────────────────────────────────

    /// Dispatching form of the elementwise ops. Binary kinds take a tensor
    /// or scalar operand; unary kinds take `Operand::None`.
    pub fn elementwise(&mut self, kind: ElemOp, a: TensorId, b: Operand) -> Result<TensorId> {
        match (kind, b) {
            (ElemOp::Add, Operand::Tensor(b)) => self.add(a, b),
            (ElemOp::Sub, Operand::Tensor(b)) => self.sub(a, b),
            (ElemOp::Mul, Operand::Tensor(b)) => self.mul(a, b),
            (ElemOp::Div, Operand::Tensor(b)) => self.div(a, b),
            (ElemOp::Add, Operand::Scalar(c)) => Ok(self.add_const(a, c)),
            (ElemOp::Sub, Operand::Scalar(c)) => Ok(self.add_const(a, -c)),
            (ElemOp::Mul, Operand::Scalar(c)) => Ok(self.mul_const(a, c)),
            (ElemOp::Div, Operand::Scalar(c)) => Ok(self.mul_const(a, 1.0 / c)),
            (ElemOp::MaxWithScalar, Operand::Scalar(c)) => Ok(self.max_with_scalar(a, c)),
            (ElemOp::LogClamped, Operand::None) => Ok(self.log_clamped(a)),
            (ElemOp::Relu, Operand::None) => Ok(self.relu(a)),
            (ElemOp::Exp, Operand::None) => Ok(self.exp(a)),
            (kind, _) => Err(Error::usage(
                "elementwise",
                format!("operand does not fit op kind {:?}", kind),
            )),
        }
    }

    fn binary_shape_check(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb && self.slots[b.0].values.len() != 1 {
            return Err(Error::shape(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    /// a + b; b may be a single-element tensor broadcast over a.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_shape_check("add", a, b)?;
        let (av, bv) = (&self.slots[a.0].values, &self.slots[b.0].values);
        let out = if bv.len() == 1 {
            av.iter().map(|x| x + bv[0]).collect()
        } else {
            av.iter().zip(bv).map(|(x, y)| x + y).collect()
        };
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let shape = self.slots[a.0].shape.clone();
        Ok(self.record(Op::Add { a, b }, out, shape, needs))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_shape_check("sub", a, b)?;
        let (av, bv) = (&self.slots[a.0].values, &self.slots[b.0].values);
        let out = if bv.len() == 1 {
            av.iter().map(|x| x - bv[0]).collect()
        } else {
            av.iter().zip(bv).map(|(x, y)| x - y).collect()
        };
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let shape = self.slots[a.0].shape.clone();
        Ok(self.record(Op::Sub { a, b }, out, shape, needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_shape_check("mul", a, b)?;
        let (av, bv) = (&self.slots[a.0].values, &self.slots[b.0].values);
        let out = if bv.len() == 1 {
            av.iter().map(|x| x * bv[0]).collect()
        } else {
            av.iter().zip(bv).map(|(x, y)| x * y).collect()
        };
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let shape = self.slots[a.0].shape.clone();
        Ok(self.record(Op::Mul { a, b }, out, shape, needs))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_shape_check("div", a, b)?;
        let (av, bv) = (&self.slots[a.0].values, &self.slots[b.0].values);
        let out = if bv.len() == 1 {
            av.iter().map(|x| x / bv[0]).collect()
        } else {
            av.iter().zip(bv).map(|(x, y)| x / y).collect()
        };
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let shape = self.slots[a.0].shape.clone();
        Ok(self.record(Op::Div { a, b }, out, shape, needs))
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> TensorId {
        let out = self.slots[a.0].values.iter().map(|x| x + c).collect();
        let needs = self.needs_grad(a);
        let shape = self.slots[a.0].shape.clone();
        self.record(Op::AddConst { a }, out, shape, needs)
    }

    pub fn mul_const(&mut self, a: TensorId, c: f64) -> TensorId {
        let out = self.slots[a.0].values.iter().map(|x| x * c).collect();
        let needs = self.needs_grad(a);
        let shape = self.slots[a.0].shape.clone();
        self.record(Op::MulConst { a, c }, out, shape, needs)
    }

    /// max(x, c) elementwise; gradient passes only where x > c.
    pub fn max_with_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let out = self.slots[a.0].values.iter().map(|x| x.max(c)).collect();
        let needs = self.needs_grad(a);
        let shape = self.slots[a.0].shape.clone();
        self.record(Op::MaxScalar { a, c }, out, shape, needs)
    }

    /// ln(max(x, EPS_LOG)); zero gradient through the clamp boundary.
    pub fn log_clamped(&mut self, a: TensorId) -> TensorId {
        self.log_clamped_eps(a, EPS_LOG)
    }

    pub fn log_clamped_eps(&mut self, a: TensorId, eps: f64) -> TensorId {
        let out = self.slots[a.0].values.iter().map(|x| x.max(eps).ln()).collect();
        let needs = self.needs_grad(a);
        let shape = self.slots[a.0].shape.clone();
        self.record(Op::LogClamped { a, eps }, out, shape, needs)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let out = self.slots[a.0].values.iter().map(|x| x.max(0.0)).collect();
        let needs = self.needs_grad(a);
        let shape = self.slots[a.0].shape.clone();
        self.record(Op::Relu { a }, out, shape, needs)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let out = self.slots[a.0].values.iter().map(|x| x.exp()).collect();
        let needs = self.needs_grad(a);
        let shape = self.slots[a.0].shape.clone();
        self.record(Op::Exp { a }, out, shape, needs)
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        let out = self.slots[a.0].values.iter().map(|x| x.sqrt()).collect();
        let needs = self.needs_grad(a);
        let shape = self.slots[a.0].shape.clone();
        self.record(Op::Sqrt { a }, out, shape, needs)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// [m×k]·[k×n] matrix product.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} by {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.slots[a.0].values;
        let bv = &self.slots[b.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for (kk, &x) in av[i * k..(i + 1) * k].iter().enumerate() {
                let brow = &bv[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.record(Op::Matmul { a, b, m, k, n }, out, vec![m, n], needs))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", sa)));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let av = &self.slots[a.0].values;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = av[i * cols + j];
            }
        }
        let needs = self.needs_grad(a);
        Ok(self.record(Op::Transpose { a, rows, cols }, out, vec![cols, rows], needs))
    }

    /// Valid (unpadded) cross-correlation over [B×C_in×H×W] with kernel
    /// [C_out×C_in×kh×kw].
    pub fn conv2d(&mut self, input: TensorId, kernel: TensorId, stride: usize) -> Result<TensorId> {
        let si = self.shape(input);
        let sk = self.shape(kernel);
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {:?}, kernel {:?}", si, sk)));
        }
        if stride == 0 {
            return Err(Error::usage("conv2d", "stride must be positive"));
        }
        let (batch, c_in, h, w) = (si[0], si[1], si[2], si[3]);
        let (c_out, kc, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {} input channels, input has {}", kc, c_in),
            ));
        }
        if kh > h || kw > w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} larger than input {}x{}", kh, kw, h, w),
            ));
        }
        let h_out = (h - kh) / stride + 1;
        let w_out = (w - kw) / stride + 1;
        let dims = ConvDims {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            h_out,
            w_out,
        };
        let iv = &self.slots[input.0].values;
        let kv = &self.slots[kernel.0].values;
        let mut out = vec![0.0; batch * c_out * h_out * w_out];
        for bi in 0..batch {
            for co in 0..c_out {
                let kbase = co * c_in * kh * kw;
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc = 0.0;
                        for ci in 0..c_in {
                            let ibase = ((bi * c_in + ci) * h + oy * stride) * w + ox * stride;
                            let kcbase = kbase + ci * kh * kw;
                            for u in 0..kh {
                                let irow = ibase + u * w;
                                let krow = kcbase + u * kw;
                                for v in 0..kw {
                                    acc += iv[irow + v] * kv[krow + v];
                                }
                            }
                        }
                        out[((bi * c_out + co) * h_out + oy) * w_out + ox] = acc;
                    }
                }
            }
        }
        let needs = self.needs_grad(input) || self.needs_grad(kernel);
        let shape = vec![batch, c_out, h_out, w_out];
        Ok(self.record(Op::Conv2d { input, kernel, dims }, out, shape, needs))
    }

    /// Mean over the spatial axes of a [B×H×W×D] map, producing [B×D].
    pub fn global_avg_pool(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{:?}", sa)));
        }
        let (b, h, w, d) = (sa[0], sa[1], sa[2], sa[3]);
        let av = &self.slots[a.0].values;
        let inv = 1.0 / (h * w) as f64;
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for p in 0..h * w {
                let base = (bi * h * w + p) * d;
                let orow = &mut out[bi * d..(bi + 1) * d];
                for di in 0..d {
                    orow[di] += av[base + di];
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let needs = self.needs_grad(a);
        Ok(self.record(Op::GlobalAvgPool { a, b, h, w, d }, out, vec![b, d], needs))
    }

    /// Numerically stable softmax along `axis`; slices sum to 1.
    pub fn softmax_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::usage(
                "softmax_axis",
                format!("axis {} out of range for shape {:?}", axis, sa),
            ));
        }
        let av = self.slots[a.0].values.clone();
        let mut out = av;
        for_each_lane(&sa, axis, |offsets| {
            let mx = offsets.iter().map(|&o| out[o]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &o in offsets {
                let e = (out[o] - mx).exp();
                out[o] = e;
                sum += e;
            }
            for &o in offsets {
                out[o] /= sum;
            }
        });
        let needs = self.needs_grad(a);
        Ok(self.record(Op::SoftmaxAxis { a, axis }, out, sa, needs))
    }

    /// Sum of all elements, producing a scalar tensor.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.slots[a.0].values.iter().sum();
        let needs = self.needs_grad(a);
        self.record(Op::SumAll { a }, vec![s], vec![1], needs)
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let n: usize = shape.iter().product();
        if n != self.slots[a.0].values.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(a), shape),
            ));
        }
        let out = self.slots[a.0].values.clone();
        let needs = self.needs_grad(a);
        Ok(self.record(Op::Reshape { a }, out, shape, needs))
    }

    /// [N×C×H×W] -> [N×H×W×C] layout change.
    pub fn nchw_to_nhwc(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 4 {
            return Err(Error::shape("nchw_to_nhwc", format!("{:?}", sa)));
        }
        let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let av = &self.slots[a.0].values;
        let mut out = vec![0.0; av.len()];
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        out[((ni * h + hi) * w + wi) * c + ci] =
                            av[((ni * c + ci) * h + hi) * w + wi];
                    }
                }
            }
        }
        let needs = self.needs_grad(a);
        Ok(self.record(Op::NchwToNhwc { a, n, c, h, w }, out, vec![n, h, w, c], needs))
    }

    /// out[i, :] = x[i, :] * s[i] for a [rows×cols] matrix and length-rows
    /// scale vector.
    pub fn scale_rows(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let sx = self.shape(x);
        let ss = self.shape(s);
        if sx.len() != 2 || ss.len() != 1 || ss[0] != sx[0] {
            return Err(Error::shape(
                "scale_rows",
                format!("matrix {:?}, scales {:?}", sx, ss),
            ));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let xv = &self.slots[x.0].values;
        let sv = &self.slots[s.0].values;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let f = sv[i];
            for j in 0..cols {
                out[i * cols + j] = xv[i * cols + j] * f;
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(s);
        Ok(self.record(Op::ScaleRows { x, s, rows, cols }, out, vec![rows, cols], needs))
    }

    /// Repeats each element of a length-n vector `times` times in place
    /// order: [a,b] -> [a,a,b,b] for times=2.
    pub fn repeat_interleave(&mut self, s: TensorId, times: usize) -> Result<TensorId> {
        let ss = self.shape(s);
        if ss.len() != 1 {
            return Err(Error::shape("repeat_interleave", format!("{:?}", ss)));
        }
        let n = ss[0];
        let sv = &self.slots[s.0].values;
        let mut out = Vec::with_capacity(n * times);
        for &v in sv {
            out.extend(std::iter::repeat_n(v, times));
        }
        let needs = self.needs_grad(s);
        Ok(self.record(Op::RepeatInterleave { s, times }, out, vec![n * times], needs))
    }

    /// Gathers rows of a [n×cols] matrix in the given order (differentiable;
    /// backward scatter-adds).
    pub fn gather_rows(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::shape("gather_rows", format!("{:?}", sx)));
        }
        let (n, cols) = (sx[0], sx[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                op: "gather_rows",
                detail: format!("row {} out of range 0..{}", bad, n),
            });
        }
        let xv = &self.slots[x.0].values;
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&xv[i * cols..(i + 1) * cols]);
        }
        let needs = self.needs_grad(x);
        let shape = vec![indices.len(), cols];
        Ok(self.record(
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
                cols,
            },
            out,
            shape,
            needs,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar root. Gradients accumulate
    /// additively across multiple uses of a tensor.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.slots[root.0].values.len() != 1 {
            return Err(Error::usage(
                "backward",
                format!("root has {} elements, expected 1", self.slots[root.0].values.len()),
            ));
        }
        self.accumulate(root, &[1.0]);
        for idx in (0..self.nodes.len()).rev() {
            let out = self.nodes[idx].out;
            let Some(g) = self.grads[out.0].take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            self.backward_op(&op, out, &g);
            self.grads[out.0] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, g: &[f64]) {
        if !self.slots[id.0].needs_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            None => self.grads[id.0] = Some(g.to_vec()),
        }
    }

    fn backward_op(&mut self, op: &Op, out: TensorId, g: &[f64]) {
        match op {
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                if self.slots[b.0].values.len() == 1 {
                    self.accumulate(*b, &[g.iter().sum()]);
                } else {
                    self.accumulate(*b, g);
                }
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, g);
                if self.slots[b.0].values.len() == 1 {
                    self.accumulate(*b, &[-g.iter().sum::<f64>()]);
                } else {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.accumulate(*b, &neg);
                }
            }
            Op::Mul { a, b } => {
                let av = self.slots[a.0].values.clone();
                let bv = self.slots[b.0].values.clone();
                if bv.len() == 1 {
                    let ga: Vec<f64> = g.iter().map(|x| x * bv[0]).collect();
                    self.accumulate(*a, &ga);
                    let gb: f64 = g.iter().zip(&av).map(|(x, y)| x * y).sum();
                    self.accumulate(*b, &[gb]);
                } else {
                    let ga: Vec<f64> = g.iter().zip(&bv).map(|(x, y)| x * y).collect();
                    self.accumulate(*a, &ga);
                    let gb: Vec<f64> = g.iter().zip(&av).map(|(x, y)| x * y).collect();
                    self.accumulate(*b, &gb);
                }
            }
            Op::Div { a, b } => {
                let av = self.slots[a.0].values.clone();
                let bv = self.slots[b.0].values.clone();
                if bv.len() == 1 {
                    let inv = 1.0 / bv[0];
                    let ga: Vec<f64> = g.iter().map(|x| x * inv).collect();
                    self.accumulate(*a, &ga);
                    let gb: f64 = g
                        .iter()
                        .zip(&av)
                        .map(|(x, y)| -x * y * inv * inv)
                        .sum();
                    self.accumulate(*b, &[gb]);
                } else {
                    let ga: Vec<f64> = g.iter().zip(&bv).map(|(x, y)| x / y).collect();
                    self.accumulate(*a, &ga);
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(av.iter().zip(&bv))
                        .map(|(x, (n, d))| -x * n / (d * d))
                        .collect();
                    self.accumulate(*b, &gb);
                }
            }
            Op::AddConst { a } => self.accumulate(*a, g),
            Op::MulConst { a, c } => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.accumulate(*a, &ga);
            }
            Op::MaxScalar { a, c } => {
                let av = self.slots[a.0].values.clone();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&av)
                    .map(|(x, v)| if *v > *c { *x } else { 0.0 })
                    .collect();
                self.accumulate(*a, &ga);
            }
            Op::LogClamped { a, eps } => {
                let av = self.slots[a.0].values.clone();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&av)
                    .map(|(x, v)| if *v > *eps { *x / *v } else { 0.0 })
                    .collect();
                self.accumulate(*a, &ga);
            }
            Op::Relu { a } => {
                let av = self.slots[a.0].values.clone();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&av)
                    .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                    .collect();
                self.accumulate(*a, &ga);
            }
            Op::Exp { a } => {
                // the saved forward output is the derivative
                let ov = self.slots[out.0].values.clone();
                let ga: Vec<f64> = g.iter().zip(&ov).map(|(x, y)| x * y).collect();
                self.accumulate(*a, &ga);
            }
            Op::Sqrt { a } => {
                let ov = self.slots[out.0].values.clone();
                let ga: Vec<f64> = g.iter().zip(&ov).map(|(x, y)| 0.5 * x / y).collect();
                self.accumulate(*a, &ga);
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.reachable(*a) {
                    let bv = self.slots[b.0].values.clone();
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bv[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            ga[i * k + kk] = acc;
                        }
                    }
                    self.accumulate(*a, &ga);
                }
                if self.reachable(*b) {
                    let av = self.slots[a.0].values.clone();
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let x = av[i * k + kk];
                            if x != 0.0 {
                                let brow = &mut gb[kk * n..(kk + 1) * n];
                                for j in 0..n {
                                    brow[j] += x * grow[j];
                                }
                            }
                        }
                    }
                    self.accumulate(*b, &gb);
                }
            }
            Op::Transpose { a, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let mut ga = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        ga[i * cols + j] = g[j * rows + i];
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::Conv2d { input, kernel, dims } => {
                let d = dims.clone();
                let want_input = self.reachable(*input);
                let want_kernel = self.reachable(*kernel);
                let iv = self.slots[input.0].values.clone();
                let kv = self.slots[kernel.0].values.clone();
                let mut gi = vec![0.0; iv.len()];
                let mut gk = vec![0.0; kv.len()];
                for bi in 0..d.batch {
                    for co in 0..d.c_out {
                        let kbase = co * d.c_in * d.kh * d.kw;
                        for oy in 0..d.h_out {
                            for ox in 0..d.w_out {
                                let go = g[((bi * d.c_out + co) * d.h_out + oy) * d.w_out + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for ci in 0..d.c_in {
                                    let ibase =
                                        ((bi * d.c_in + ci) * d.h + oy * d.stride) * d.w + ox * d.stride;
                                    let kcbase = kbase + ci * d.kh * d.kw;
                                    for u in 0..d.kh {
                                        let irow = ibase + u * d.w;
                                        let krow = kcbase + u * d.kw;
                                        for v in 0..d.kw {
                                            if want_input {
                                                gi[irow + v] += go * kv[krow + v];
                                            }
                                            if want_kernel {
                                                gk[krow + v] += go * iv[irow + v];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_input {
                    self.accumulate(*input, &gi);
                }
                if want_kernel {
                    self.accumulate(*kernel, &gk);
                }
            }
            Op::GlobalAvgPool { a, b, h, w, d } => {
                let (b, h, w, d) = (*b, *h, *w, *d);
                let inv = 1.0 / (h * w) as f64;
                let mut ga = vec![0.0; b * h * w * d];
                for bi in 0..b {
                    for p in 0..h * w {
                        let base = (bi * h * w + p) * d;
                        for di in 0..d {
                            ga[base + di] = g[bi * d + di] * inv;
                        }
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::SoftmaxAxis { a, axis } => {
                let y = self.slots[out.0].values.clone();
                let shape = self.slots[out.0].shape.clone();
                let mut ga = vec![0.0; y.len()];
                for_each_lane(&shape, *axis, |offsets| {
                    let dot: f64 = offsets.iter().map(|&o| g[o] * y[o]).sum();
                    for &o in offsets {
                        ga[o] = y[o] * (g[o] - dot);
                    }
                });
                self.accumulate(*a, &ga);
            }
            Op::SumAll { a } => {
                let n = self.slots[a.0].values.len();
                let ga = vec![g[0]; n];
                self.accumulate(*a, &ga);
            }
            Op::Reshape { a } => self.accumulate(*a, g),
            Op::NchwToNhwc { a, n, c, h, w } => {
                let (n, c, h, w) = (*n, *c, *h, *w);
                let mut ga = vec![0.0; n * c * h * w];
                for ni in 0..n {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                ga[((ni * c + ci) * h + hi) * w + wi] =
                                    g[((ni * h + hi) * w + wi) * c + ci];
                            }
                        }
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::ScaleRows { x, s, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let xv = self.slots[x.0].values.clone();
                let sv = self.slots[s.0].values.clone();
                if self.reachable(*x) {
                    let mut gx = vec![0.0; rows * cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[i * cols + j] = g[i * cols + j] * sv[i];
                        }
                    }
                    self.accumulate(*x, &gx);
                }
                if self.reachable(*s) {
                    let mut gs = vec![0.0; rows];
                    for i in 0..rows {
                        let mut acc = 0.0;
                        for j in 0..cols {
                            acc += g[i * cols + j] * xv[i * cols + j];
                        }
                        gs[i] = acc;
                    }
                    self.accumulate(*s, &gs);
                }
            }
            Op::RepeatInterleave { s, times } => {
                let n = self.slots[s.0].values.len();
                let mut gs = vec![0.0; n];
                for i in 0..n {
                    let mut acc = 0.0;
                    for t in 0..*times {
                        acc += g[i * times + t];
                    }
                    gs[i] = acc;
                }
                self.accumulate(*s, &gs);
            }
            Op::GatherRows { x, indices, cols } => {
                let n = self.slots[x.0].values.len();
                let mut gx = vec![0.0; n];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..*cols {
                        gx[i * cols + j] += g[r * cols + j];
                    }
                }
                self.accumulate(*x, &gx);
            }
        }
    }

    /// True when gradient can flow into `id`.
    fn reachable(&self, id: TensorId) -> bool {
        self.slots[id.0].needs_grad
    }
}

/// Invokes `f` with the flat offsets of every 1-D lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut offsets = vec![0usize; len];
    for o in 0..outer {
        for i in 0..inner {
            for (l, off) in offsets.iter_mut().enumerate() {
                *off = o * len * inner + l * inner + i;
            }
            f(&offsets);
        }
    }
}

/// Max relative error between the reverse-mode gradient of `f` at `x` and a
/// central finite difference with step `h`.
///
/// `f` builds a scalar from the given tape input; it is evaluated once under
/// autodiff and 2·numel(x) more times for the differences. The denominator
/// of the relative error is max(|g_ad|, |g_fd|, 1e-8).
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let mut watched = x.clone();
    watched = watched.with_grad();
    let xid = tape.watch(&watched);
    let root = f(&mut tape, xid)?;
    if tape.value(root).len() != 1 {
        return Err(Error::usage(
            "finite_difference_check",
            "f must produce a scalar",
        ));
    }
    tape.backward(root)?;
    let g_ad: Vec<f64> = match tape.grad(xid) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.numel()],
    };

    let eval = |values: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.constant(values.to_vec(), x.shape().to_vec())?;
        let r = f(&mut t, id)?;
        t.scalar(r)
    };

    let mut max_rel = 0.0f64;
    let mut vals = x.values().to_vec();
    for i in 0..vals.len() {
        let orig = vals[i];
        vals[i] = orig + h;
        let fp = eval(&vals)?;
        vals[i] = orig - h;
        let fm = eval(&vals)?;
        vals[i] = orig;
        let g_fd = (fp - fm) / (2.0 * h);
        let denom = g_ad[i].abs().max(g_fd.abs()).max(1e-8);
        max_rel = max_rel.max((g_ad[i] - g_fd).abs() / denom);
    }
    Ok(max_rel)
}
