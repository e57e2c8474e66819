//! Dense `f64` tensors with a tape-based reverse-mode differentiator.
//!
//! A [`Graph`] records every executed op in order. Values are immutable once
//! recorded, so [`Graph::backward`] can replay the tape in exact reverse and
//! accumulate gradients additively into every node that feeds the loss.
//!
//! The operator set is deliberately closed: convolution, affine maps, the
//! handful of activations the detector needs, reductions, and elementwise
//! arithmetic. Ops defined elsewhere in the crate (RoIAlign, the detection
//! losses) plug in through [`Backward`] and [`Graph::apply`].

use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch, expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("{op}: reduction over empty axis")]
    EmptyAxis { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

fn shape_err(op: &'static str, expected: impl fmt::Debug, found: impl fmt::Debug) -> TensorError {
    TensorError::Shape {
        op,
        expected: format!("{expected:?}"),
        found: format!("{found:?}"),
    }
}

/// Row-major n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("Tensor::new", n, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a recorded op sees during the reverse pass.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub needs_grad: Vec<bool>,
    pub output: &'a Tensor,
    pub grad_output: &'a [f64],
}

/// Vector-Jacobian product of a recorded op.
///
/// Returns one entry per input, `None` where no gradient is needed.
pub trait Backward {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>;

    /// How far the inputs sit from the nearest non-differentiable point of
    /// this op; `None` for ops that are smooth everywhere.
    fn kink_distance(&self, _inputs: &[&Tensor]) -> Option<f64> {
        None
    }
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Single-threaded operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            inputs: vec![],
            op: None,
            requires_grad: false,
        })
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            inputs: vec![],
            op: None,
            requires_grad: true,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `output = op(inputs)`; `output` must already be computed.
    pub fn apply(&mut self, op: Box<dyn Backward>, inputs: &[Var], output: Tensor) -> Result<Var> {
        if !output.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Node {
            value: output,
            inputs: inputs.to_vec(),
            op: Some(op),
            requires_grad,
        }))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(op) = &node.op {
                if node.requires_grad {
                    let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                    let ctx = BackwardCtx {
                        inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                        needs_grad: needs,
                        output: &node.value,
                        grad_output: &g,
                    };
                    let input_grads = op.backward(&ctx);
                    for (inp, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !self.nodes[inp.0].requires_grad {
                            continue;
                        }
                        match &mut grads[inp.0] {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Smallest distance of any recorded op's inputs from one of its kinks
    /// (infinite when no op has kinks).
    pub fn kink_distance(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| {
                let op = n.op.as_ref()?;
                let inputs: Vec<&Tensor> = n.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                op.kink_distance(&inputs)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Gradient of the last `backward` loss with respect to `v`; zeros when unreachable.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape.clone();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor { shape, data: g.clone() },
            None => Tensor::zeros(&shape),
        }
    }
}

// ---------------------------------------------------------------------------
// dense kernels

/// `out[m,n] += a[m,k] * b[k,n]`
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc(m, k, n, a, (k, 1), b, (n, 1), out);
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc(m, k, n, a, (k, 1), b, (1, k), out);
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc(k, m, n, a, (1, k), b, (n, 1), out);
}

/// `out[m,n] += A[m,k] * B[k,n]` with (row, column) strides for `A` and `B`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    out: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!((m - 1) * sa.0 + (k - 1) * sa.1 < a.len());
    assert!((k - 1) * sb.0 + (n - 1) * sb.1 < b.len());
    assert!(m * n <= out.len());
    // SAFETY: the asserts keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// conv2d

/// Stride, zero padding, and dilation per (height, width) axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
        }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec {
            stride: (stride, stride),
            padding: (padding, padding),
            dilation: (1, 1),
        }
    }

    /// Output extent along one axis, or `None` when the kernel does not fit.
    pub fn output_len(input: usize, kernel: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
        let span = dil * (kernel - 1) + 1;
        let padded = input + 2 * pad;
        if stride == 0 || kernel == 0 || span > padded {
            return None;
        }
        Some((padded - span) / stride + 1)
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// Source index for column row `r` and output position `(oy, ox)`, if inside the input.
    #[inline]
    fn src(&self, ci: usize, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy * self.spec.stride.0 + ky * self.spec.dilation.0) as isize - self.spec.padding.0 as isize;
        let x = (ox * self.spec.stride.1 + kx * self.spec.dilation.1) as isize - self.spec.padding.1 as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            return None;
        }
        Some((ci * self.h + y as usize) * self.w + x as usize)
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.p();
        let mut col = vec![0.0; self.k() * p];
        for ci in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let row = &mut col[r * p..(r + 1) * p];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some(s) = self.src(ci, ky, kx, oy, ox) {
                                row[oy * self.ow + ox] = x[s];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let p = self.p();
        let mut x = vec![0.0; self.c_in * self.h * self.w];
        for ci in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let row = &col[r * p..(r + 1) * p];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some(s) = self.src(ci, ky, kx, oy, ox) {
                                x[s] += row[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

struct Conv2dOp {
    geom: ConvGeom,
    c_out: usize,
    has_bias: bool,
}

impl Backward for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = &self.geom;
        let (k, p) = (g.k(), g.p());
        let dout = ctx.grad_output;
        let weight = ctx.inputs[1].data();
        let mut out = Vec::with_capacity(3);
        if ctx.needs_grad[0] {
            let mut dcol = vec![0.0; k * p];
            matmul_at_acc(weight, dout, &mut dcol, self.c_out, k, p);
            out.push(Some(g.col2im(&dcol)));
        } else {
            out.push(None);
        }
        if ctx.needs_grad[1] {
            let col = g.im2col(ctx.inputs[0].data());
            let mut dw = vec![0.0; self.c_out * k];
            matmul_bt_acc(dout, &col, &mut dw, self.c_out, p, k);
            out.push(Some(dw));
        } else {
            out.push(None);
        }
        if self.has_bias {
            if ctx.needs_grad[2] {
                out.push(Some(dout.chunks(p).map(|r| r.iter().sum()).collect()));
            } else {
                out.push(None);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// affine and elementwise ops

struct LinearOp {
    n: usize,
    d_in: usize,
    d_out: usize,
    has_bias: bool,
}

impl Backward for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let dy = ctx.grad_output;
        let x = ctx.inputs[0].data();
        let w = ctx.inputs[1].data();
        let mut out = Vec::with_capacity(3);
        out.push(ctx.needs_grad[0].then(|| {
            let mut dx = vec![0.0; self.n * self.d_in];
            matmul_acc(dy, w, &mut dx, self.n, self.d_out, self.d_in);
            dx
        }));
        out.push(ctx.needs_grad[1].then(|| {
            let mut dw = vec![0.0; self.d_out * self.d_in];
            matmul_at_acc(dy, x, &mut dw, self.n, self.d_out, self.d_in);
            dw
        }));
        if self.has_bias {
            out.push(ctx.needs_grad[2].then(|| {
                let mut db = vec![0.0; self.d_out];
                for row in dy.chunks(self.d_out) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                db
            }));
        }
        out
    }
}

#[derive(Clone, Copy)]
enum Unary {
    Relu,
    Sigmoid,
    Scale(f64),
}

struct UnaryOp(Unary);

impl Backward for UnaryOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Scale(_) => "scale",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = ctx.grad_output;
        let dx = match self.0 {
            Unary::Relu => ctx.inputs[0]
                .data()
                .iter()
                .zip(g)
                .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                .collect(),
            Unary::Sigmoid => ctx
                .output
                .data()
                .iter()
                .zip(g)
                .map(|(s, g)| g * s * (1.0 - s))
                .collect(),
            Unary::Scale(c) => g.iter().map(|g| g * c).collect(),
        };
        vec![Some(dx)]
    }

    fn kink_distance(&self, inputs: &[&Tensor]) -> Option<f64> {
        match self.0 {
            Unary::Relu => Some(inputs[0].data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()))),
            _ => None,
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryOp(Binary);

impl Backward for BinaryOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = ctx.grad_output;
        match self.0 {
            Binary::Add => vec![
                ctx.needs_grad[0].then(|| g.to_vec()),
                ctx.needs_grad[1].then(|| g.to_vec()),
            ],
            Binary::Sub => vec![
                ctx.needs_grad[0].then(|| g.to_vec()),
                ctx.needs_grad[1].then(|| g.iter().map(|v| -v).collect()),
            ],
            Binary::Mul => {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                vec![
                    ctx.needs_grad[0].then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                    ctx.needs_grad[1].then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
                ]
            }
        }
    }
}

struct SoftmaxOp {
    cols: usize,
}

impl Backward for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let s = ctx.output.data();
        let g = ctx.grad_output;
        let mut dx = vec![0.0; s.len()];
        for ((srow, grow), drow) in s
            .chunks(self.cols)
            .zip(g.chunks(self.cols))
            .zip(dx.chunks_mut(self.cols))
        {
            let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
            for ((d, s), g) in drow.iter_mut().zip(srow).zip(grow) {
                *d = s * (g - dot);
            }
        }
        vec![Some(dx)]
    }
}

/// Mean over one axis; `outer × axis × inner` layout.
struct MeanAxisOp {
    outer: usize,
    axis: usize,
    inner: usize,
}

impl Backward for MeanAxisOp {
    fn name(&self) -> &'static str {
        "mean_pool"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = ctx.grad_output;
        let inv = 1.0 / self.axis as f64;
        let mut dx = vec![0.0; self.outer * self.axis * self.inner];
        for o in 0..self.outer {
            for a in 0..self.axis {
                for i in 0..self.inner {
                    dx[(o * self.axis + a) * self.inner + i] = g[o * self.inner + i] * inv;
                }
            }
        }
        vec![Some(dx)]
    }
}

struct SumOp {
    scale: f64,
}

impl Backward for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = ctx.grad_output[0] * self.scale;
        vec![Some(vec![g; ctx.inputs[0].numel()])]
    }
}

struct ReshapeOp;

impl Backward for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![Some(ctx.grad_output.to_vec())]
    }
}

struct TransposeOp {
    rows: usize,
    cols: usize,
}

impl Backward for TransposeOp {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        // output is [cols, rows]
        vec![Some(transpose(ctx.grad_output, self.cols, self.rows))]
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

struct GatherRowsOp {
    indices: Vec<usize>,
    row_len: usize,
    rows: usize,
}

impl Backward for GatherRowsOp {
    fn name(&self) -> &'static str {
        "gather_rows"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; self.rows * self.row_len];
        for (k, &r) in self.indices.iter().enumerate() {
            let src = &ctx.grad_output[k * self.row_len..(k + 1) * self.row_len];
            dx[r * self.row_len..(r + 1) * self.row_len]
                .iter_mut()
                .zip(src)
                .for_each(|(a, b)| *a += b);
        }
        vec![Some(dx)]
    }
}

// ---------------------------------------------------------------------------
// graph-level op constructors

impl Graph {
    /// 2-D cross-correlation of `x[C_in,H,W]` with `weight[C_out,C_in,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 3 {
            return Err(shape_err("conv2d", "[C_in, H, W]", xs));
        }
        if ws.len() != 4 || ws[1] != xs[0] {
            return Err(shape_err("conv2d", format!("[C_out, {}, kh, kw]", xs[0]), ws));
        }
        if spec.stride.0 == 0 || spec.stride.1 == 0 || spec.dilation.0 == 0 || spec.dilation.1 == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride and dilation must be >= 1".into(),
            });
        }
        let (c_out, c_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let oh = Conv2dSpec::output_len(xs[1], kh, spec.stride.0, spec.padding.0, spec.dilation.0);
        let ow = Conv2dSpec::output_len(xs[2], kw, spec.stride.1, spec.padding.1, spec.dilation.1);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(shape_err("conv2d", "kernel fitting the padded input", (xs, ws)));
        };
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return Err(shape_err("conv2d bias", [c_out], self.value(b).shape()));
            }
        }
        let geom = ConvGeom {
            c_in,
            h: xs[1],
            w: xs[2],
            kh,
            kw,
            oh,
            ow,
            spec,
        };
        let p = geom.p();
        let col = geom.im2col(self.value(x).data());
        let mut out = vec![0.0; c_out * p];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (row, bias) in out.chunks_mut(p).zip(bv) {
                row.fill(*bias);
            }
        }
        matmul_acc(self.value(weight).data(), &col, &mut out, c_out, geom.k(), p);
        let output = Tensor::new(vec![c_out, oh, ow], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.apply(
            Box::new(Conv2dOp {
                geom,
                c_out,
                has_bias: bias.is_some(),
            }),
            &inputs,
            output,
        )
    }

    /// `x[n,in] · weight[out,in]ᵀ + bias[out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 2 {
            return Err(shape_err("linear", "[n, in]", xs));
        }
        if ws.len() != 2 || ws[1] != xs[1] {
            return Err(shape_err("linear", format!("[out, {}]", xs[1]), ws));
        }
        let (n, d_in, d_out) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * d_out];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            if bv.len() != d_out {
                return Err(shape_err("linear bias", [d_out], self.value(b).shape()));
            }
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bv);
            }
        }
        matmul_bt_acc(
            self.value(x).data(),
            self.value(weight).data(),
            &mut out,
            n,
            d_in,
            d_out,
        );
        let output = Tensor::new(vec![n, d_out], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.apply(
            Box::new(LinearOp {
                n,
                d_in,
                d_out,
                has_bias: bias.is_some(),
            }),
            &inputs,
            output,
        )
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| match kind {
                Unary::Relu => v.max(0.0),
                Unary::Sigmoid => sigmoid(v),
                Unary::Scale(c) => v * c,
            })
            .collect();
        let output = Tensor::new(xv.shape().to_vec(), data)?;
        self.apply(Box::new(UnaryOp(kind)), &[x], output)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::Scale(c))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("elementwise", av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            })
            .collect();
        let output = Tensor::new(av.shape().to_vec(), data)?;
        self.apply(Box::new(BinaryOp(kind)), &[a, b], output)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = *xv.shape().last().unwrap_or(&0);
        if cols == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let output = Tensor::new(xv.shape().to_vec(), data)?;
        self.apply(Box::new(SoftmaxOp { cols }), &[x], output)
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err("mean_pool", format!("axis < {}", shape.len()), axis));
        }
        let len = shape[axis];
        if len == 0 {
            return Err(TensorError::EmptyAxis { op: "mean_pool" });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &xv[(o * len + a) * inner..(o * len + a + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let output = Tensor::new(oshape, out)?;
        self.apply(
            Box::new(MeanAxisOp {
                outer,
                axis: len,
                inner,
            }),
            &[x],
            output,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.apply(Box::new(SumOp { scale: 1.0 }), &[x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "mean" });
        }
        let s: f64 = self.value(x).data().iter().sum();
        let scale = 1.0 / n as f64;
        self.apply(Box::new(SumOp { scale }), &[x], Tensor::scalar(s * scale))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let output = self.value(x).reshaped(shape)?;
        self.apply(Box::new(ReshapeOp), &[x], output)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 {
            return Err(shape_err("transpose", "2-D", xv.shape()));
        }
        let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
        let output = Tensor::new(vec![cols, rows], transpose(xv.data(), rows, cols))?;
        self.apply(Box::new(TransposeOp { rows, cols }), &[x], output)
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let Some((&rows, rest)) = xv.shape().split_first() else {
            return Err(shape_err("gather_rows", "at least 1-D", xv.shape()));
        };
        let row_len: usize = rest.iter().product();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("index < {rows}"), bad));
        }
        let mut data = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            data.extend_from_slice(&xv.data()[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(rest);
        let output = Tensor::new(shape, data)?;
        self.apply(
            Box::new(GatherRowsOp {
                indices: indices.to_vec(),
                row_len,
                rows,
            }),
            &[x],
            output,
        )
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

// ---------------------------------------------------------------------------
// finite-difference verification

/// Largest `|analytic − numeric| / max(1, |analytic|)` over every coordinate of
/// every input, using central differences of step `eps`.
///
/// `f` must build a scalar from the supplied input vars. Callers are
/// responsible for keeping the check away from non-differentiable points
/// (ReLU zeros, the smooth-L1 kink).
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[i];
            work[ti].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_multi`].
pub fn grad_check<F>(f: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_multi(|g, vs| f(g, vs[0]), std::slice::from_ref(input), eps)
}
