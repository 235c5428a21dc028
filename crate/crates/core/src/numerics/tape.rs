//! Dynamic reverse-mode automatic differentiation.
//!
//! Every forward operation appends a node to a [`Tape`]. Nodes are created
//! after their inputs, so walking the node list backwards visits the graph in
//! reverse topological order and touches each node exactly once.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnKind {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
}

/// Geometry of a "same"-padded, stride-1 1-D convolution over a batch of
/// equal-length sequences laid out item-major as `[batch * steps, channels]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv1dGeom {
    pub batch: usize,
    pub steps: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

/// Geometry of a strided 2-D convolution over `[batch * height * width, channels]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2dGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad.0 - self.kernel.0) / self.stride.0 + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad.1 - self.kernel.1) / self.stride.1 + 1
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(BinKind, usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Unary(UnKind, usize),
    SumAll(usize),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    SliceCols { a: usize, start: usize },
    Gather { table: usize, ids: Vec<usize> },
    StackTime { parts: Vec<usize>, batch: usize },
    TimeSlice { a: usize, steps: usize, t: usize },
    RepeatRows { a: usize, times: usize },
    SegmentSoftmax { a: usize, len: usize },
    WeightedPool { w: usize, x: usize, len: usize },
    Conv1d { x: usize, w: usize, geom: Conv1dGeom, cols: Vec<f64> },
    Conv2d { x: usize, w: usize, geom: Conv2dGeom, cols: Vec<f64> },
    LstmCell { gates: usize, c_prev: usize, cache: Vec<f64> },
    GruCell { xg: usize, hg: usize, h_prev: usize, cache: Vec<f64> },
    BceWithLogits { x: usize, targets: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Binary(BinKind::Add, ..) => "add",
            Op::Binary(BinKind::Sub, ..) => "sub",
            Op::Binary(BinKind::Mul, ..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(UnKind::Tanh, _) => "tanh",
            Op::Unary(UnKind::Sigmoid, _) => "sigmoid",
            Op::Unary(UnKind::Relu, _) => "relu",
            Op::Unary(UnKind::Exp, _) => "exp",
            Op::Unary(UnKind::Log, _) => "log",
            Op::SumAll(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Gather { .. } => "gather",
            Op::StackTime { .. } => "stack_time",
            Op::TimeSlice { .. } => "time_slice",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::WeightedPool { .. } => "weighted_pool",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::LstmCell { .. } => "lstm_cell",
            Op::GruCell { .. } => "gru_cell",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_ids: RefCell<HashMap<String, usize>>,
    param_order: RefCell<Vec<(usize, String)>>,
    first_non_finite: RefCell<Option<(usize, &'static str)>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

const SMALL: usize = 8;

// Four partial sums in a fixed order, so the result does not depend on the
// vector width the loop is compiled for.
#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline(always)]
fn axpy(c: &mut [f64], alpha: f64, b: &[f64]) {
    for (cv, &bv) in c.iter_mut().zip(b) {
        *cv += alpha * bv;
    }
}

// Skinny products (few rows or a short inner dimension) are dominated by
// packing overhead in the blocked kernel; these loops stream the operands
// once instead.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn small_gemm_body(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if beta == 0.0 {
        c[..m * n].fill(0.0);
    } else if beta != 1.0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
    }
    if csb == 1 {
        if m <= SMALL {
            for p in 0..k {
                let brow = &b[p * rsb..p * rsb + n];
                for i in 0..m {
                    let av = a[i * rsa + p * csa];
                    if av != 0.0 {
                        axpy(&mut c[i * n..(i + 1) * n], av, brow);
                    }
                }
            }
        } else {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * rsa + p * csa];
                    if av != 0.0 {
                        axpy(crow, av, &b[p * rsb..p * rsb + n]);
                    }
                }
            }
        }
    } else {
        for j in 0..n {
            let bcol = &b[j * csb..j * csb + k];
            for i in 0..m {
                c[i * n + j] += dot(&a[i * rsa..i * rsa + k], bcol);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn small_gemm_avx2(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    small_gemm_body(m, k, n, a, sa, b, sb, beta, c);
}

#[allow(clippy::too_many_arguments)]
fn small_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { small_gemm_avx2(m, k, n, a, sa, b, sb, beta, c) };
        return;
    }
    small_gemm_body(m, k, n, a, sa, b, sb, beta, c);
}

// c = a·b + beta·c with arbitrary strides on a and b; c is dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if (m <= SMALL || k <= SMALL) && (csb == 1 || (rsb == 1 && csa == 1)) {
        small_gemm(m, k, n, a, (rsa, csa), b, (rsb, csb), beta, c);
        return;
    }
    // SAFETY: bounds are asserted above (in debug) and guaranteed by callers,
    // which only pass dense buffers whose shapes were validated.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if !value.is_finite() {
            let mut first = self.first_non_finite.borrow_mut();
            if first.is_none() {
                *first = Some((id, op.name()));
            }
        }
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self, id }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Describes the first node whose value contained NaN or ±∞, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.first_non_finite.borrow().map(|(id, op)| {
            let nodes = self.nodes.borrow();
            let name = self
                .param_order
                .borrow()
                .iter()
                .find(|(pid, _)| *pid == id)
                .map(|(_, n)| format!(" (parameter {n})"))
                .unwrap_or_default();
            format!("node #{id} op {op} shape {:?}{name}", nodes[id].value.shape())
        })
    }

    /// A value that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf that is not backed by a stored parameter.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter. Repeated requests for the same name
    /// return the same node, so every use accumulates into one gradient.
    pub fn param(&self, store: &ParameterStore, name: &str) -> Result<Var<'_>> {
        if let Some(&id) = self.param_ids.borrow().get(name) {
            return Ok(Var { tape: self, id });
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?
            .clone();
        let var = self.push(value, Op::Leaf, true);
        self.param_ids.borrow_mut().insert(name.to_string(), var.id);
        self.param_order.borrow_mut().push((var.id, name.to_string()));
        Ok(var)
    }

    pub fn value(&self, v: Var<'_>) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    fn dims(&self, id: usize) -> (usize, usize) {
        self.nodes.borrow()[id].value.dims2()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let (rows, _) = self.dims(first.id);
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.dims(p.id);
            if r != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape_of(first.id),
                    rhs: self.shape_of(p.id),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        {
            let nodes = self.nodes.borrow();
            let mut offset = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let src = nodes[p.id].value.data();
                for r in 0..rows {
                    out[r * total + offset..r * total + offset + w]
                        .copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                offset += w;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(ids),
            needs,
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather<'t>(&'t self, table: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
        let (rows, cols) = self.dims(table.id);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Vocabulary {
                id: bad,
                max: rows - 1,
            });
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.id].value;
            for &i in ids {
                out.extend_from_slice(t.row(i));
            }
        }
        let needs = self.needs(&[table.id]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), cols], out),
            Op::Gather {
                table: table.id,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Interleaves per-step `[batch, C]` tensors into an item-major
    /// `[batch * steps, C]` sequence.
    pub fn stack_time<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("stack of zero steps"))?;
        let (batch, cols) = self.dims(first.id);
        let steps = parts.len();
        let mut out = vec![0.0; batch * steps * cols];
        {
            let nodes = self.nodes.borrow();
            for (t, p) in parts.iter().enumerate() {
                let v = &nodes[p.id].value;
                if v.dims2() != (batch, cols) {
                    return Err(Error::Dimension {
                        op: "stack_time",
                        lhs: vec![batch, cols],
                        rhs: v.shape().to_vec(),
                    });
                }
                for b in 0..batch {
                    let dst = (b * steps + t) * cols;
                    out[dst..dst + cols].copy_from_slice(v.row(b));
                }
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        Ok(self.push(
            Tensor::from_parts(vec![batch * steps, cols], out),
            Op::StackTime { parts: ids, batch },
            needs,
        ))
    }

    pub fn conv1d<'t>(&'t self, x: Var<'t>, w: Var<'t>, geom: Conv1dGeom) -> Result<Var<'t>> {
        let Conv1dGeom {
            batch,
            steps,
            in_ch,
            out_ch,
            kernel,
        } = geom;
        if kernel % 2 == 0 {
            return Err(Error::contract("conv1d kernel width must be odd"));
        }
        if self.dims(x.id) != (batch * steps, in_ch) {
            return Err(Error::Dimension {
                op: "conv1d input",
                lhs: vec![batch * steps, in_ch],
                rhs: self.shape_of(x.id),
            });
        }
        if self.nodes.borrow()[w.id].value.numel() != kernel * in_ch * out_ch {
            return Err(Error::Dimension {
                op: "conv1d weight",
                lhs: vec![kernel, in_ch, out_ch],
                rhs: self.shape_of(w.id),
            });
        }
        let pad = kernel / 2;
        let width = kernel * in_ch;
        let rows = batch * steps;
        let mut cols = vec![0.0; rows * width];
        let mut out = vec![0.0; rows * out_ch];
        {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.id].value.data();
            for b in 0..batch {
                for t in 0..steps {
                    let row = b * steps + t;
                    for j in 0..kernel {
                        let src_t = t + j;
                        if src_t < pad || src_t - pad >= steps {
                            continue;
                        }
                        let src = (b * steps + src_t - pad) * in_ch;
                        let dst = row * width + j * in_ch;
                        cols[dst..dst + in_ch].copy_from_slice(&xd[src..src + in_ch]);
                    }
                }
            }
            let wd = nodes[w.id].value.data();
            gemm(rows, width, out_ch, &cols, (width, 1), wd, (out_ch, 1), 0.0, &mut out);
        }
        let needs = self.needs(&[x.id, w.id]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, out_ch], out),
            Op::Conv1d {
                x: x.id,
                w: w.id,
                geom,
                cols,
            },
            needs,
        ))
    }

    pub fn conv2d<'t>(&'t self, x: Var<'t>, w: Var<'t>, geom: Conv2dGeom) -> Result<Var<'t>> {
        let Conv2dGeom {
            batch,
            height,
            width,
            in_ch,
            out_ch,
            kernel: (kh, kw),
            stride: (sh, sw),
            pad: (ph, pw),
        } = geom;
        if self.dims(x.id) != (batch * height * width, in_ch) {
            return Err(Error::Dimension {
                op: "conv2d input",
                lhs: vec![batch * height * width, in_ch],
                rhs: self.shape_of(x.id),
            });
        }
        if self.nodes.borrow()[w.id].value.numel() != kh * kw * in_ch * out_ch {
            return Err(Error::Dimension {
                op: "conv2d weight",
                lhs: vec![kh, kw, in_ch, out_ch],
                rhs: self.shape_of(w.id),
            });
        }
        if height + 2 * ph < kh || width + 2 * pw < kw {
            return Err(Error::EmptyInput("conv2d input smaller than kernel".into()));
        }
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let patch = kh * kw * in_ch;
        let rows = batch * oh * ow;
        let mut cols = vec![0.0; rows * patch];
        let mut out = vec![0.0; rows * out_ch];
        {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.id].value.data();
            for b in 0..batch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = (b * oh + oy) * ow + ox;
                        for i in 0..kh {
                            let iy = oy * sh + i;
                            if iy < ph || iy - ph >= height {
                                continue;
                            }
                            for j in 0..kw {
                                let ix = ox * sw + j;
                                if ix < pw || ix - pw >= width {
                                    continue;
                                }
                                let src = ((b * height + iy - ph) * width + ix - pw) * in_ch;
                                let dst = row * patch + (i * kw + j) * in_ch;
                                cols[dst..dst + in_ch].copy_from_slice(&xd[src..src + in_ch]);
                            }
                        }
                    }
                }
            }
            let wd = nodes[w.id].value.data();
            gemm(rows, patch, out_ch, &cols, (patch, 1), wd, (out_ch, 1), 0.0, &mut out);
        }
        let needs = self.needs(&[x.id, w.id]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, out_ch], out),
            Op::Conv2d {
                x: x.id,
                w: w.id,
                geom,
                cols,
            },
            needs,
        ))
    }

    /// Fused LSTM cell. `gates` holds pre-activations `[i | f | g | o]`
    /// (`[batch, 4H]`); the result is `[h | c]` (`[batch, 2H]`).
    pub fn lstm_cell<'t>(&'t self, gates: Var<'t>, c_prev: Var<'t>) -> Result<Var<'t>> {
        let (batch, four_h) = self.dims(gates.id);
        let hidden = four_h / 4;
        if four_h % 4 != 0 || self.dims(c_prev.id) != (batch, hidden) {
            return Err(Error::Dimension {
                op: "lstm_cell",
                lhs: self.shape_of(gates.id),
                rhs: self.shape_of(c_prev.id),
            });
        }
        let mut out = vec![0.0; batch * 2 * hidden];
        let mut cache = vec![0.0; batch * hidden * 5];
        {
            let nodes = self.nodes.borrow();
            let g = nodes[gates.id].value.data();
            let cp = nodes[c_prev.id].value.data();
            for b in 0..batch {
                let gr = &g[b * four_h..(b + 1) * four_h];
                for j in 0..hidden {
                    let i = sigmoid(gr[j]);
                    let f = sigmoid(gr[hidden + j]);
                    let gg = gr[2 * hidden + j].tanh();
                    let o = sigmoid(gr[3 * hidden + j]);
                    let c = f * cp[b * hidden + j] + i * gg;
                    let tc = c.tanh();
                    out[b * 2 * hidden + j] = o * tc;
                    out[b * 2 * hidden + hidden + j] = c;
                    let k = (b * hidden + j) * 5;
                    cache[k..k + 5].copy_from_slice(&[i, f, gg, o, tc]);
                }
            }
        }
        let needs = self.needs(&[gates.id, c_prev.id]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, 2 * hidden], out),
            Op::LstmCell {
                gates: gates.id,
                c_prev: c_prev.id,
                cache,
            },
            needs,
        ))
    }

    /// Fused GRU cell. `xg` and `hg` are the input and recurrent projections,
    /// each `[r | u | n]`; the candidate uses `tanh(x_n + r ⊙ h_n)`.
    pub fn gru_cell<'t>(&'t self, xg: Var<'t>, hg: Var<'t>, h_prev: Var<'t>) -> Result<Var<'t>> {
        let (batch, three_h) = self.dims(xg.id);
        let hidden = three_h / 3;
        if three_h % 3 != 0
            || self.dims(hg.id) != (batch, three_h)
            || self.dims(h_prev.id) != (batch, hidden)
        {
            return Err(Error::Dimension {
                op: "gru_cell",
                lhs: self.shape_of(xg.id),
                rhs: self.shape_of(hg.id),
            });
        }
        let mut out = vec![0.0; batch * hidden];
        let mut cache = vec![0.0; batch * hidden * 3];
        {
            let nodes = self.nodes.borrow();
            let xd = nodes[xg.id].value.data();
            let hd = nodes[hg.id].value.data();
            let hp = nodes[h_prev.id].value.data();
            for b in 0..batch {
                for j in 0..hidden {
                    let base = b * three_h;
                    let r = sigmoid(xd[base + j] + hd[base + j]);
                    let u = sigmoid(xd[base + hidden + j] + hd[base + hidden + j]);
                    let n = (xd[base + 2 * hidden + j] + r * hd[base + 2 * hidden + j]).tanh();
                    out[b * hidden + j] = (1.0 - u) * n + u * hp[b * hidden + j];
                    let k = (b * hidden + j) * 3;
                    cache[k..k + 3].copy_from_slice(&[r, u, n]);
                }
            }
        }
        let needs = self.needs(&[xg.id, hg.id, h_prev.id]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, hidden], out),
            Op::GruCell {
                xg: xg.id,
                hg: hg.id,
                h_prev: h_prev.id,
                cache,
            },
            needs,
        ))
    }

    /// Softmax within consecutive segments of `len` entries. Entries whose
    /// `valid` flag is false get weight exactly zero; every segment needs at
    /// least one valid entry.
    pub fn segment_softmax<'t>(&'t self, a: Var<'t>, len: usize, valid: &[bool]) -> Result<Var<'t>> {
        let n = self.nodes.borrow()[a.id].value.numel();
        if len == 0 || n % len != 0 || valid.len() != n {
            return Err(Error::Dimension {
                op: "segment_softmax",
                lhs: vec![n],
                rhs: vec![len, valid.len()],
            });
        }
        let mut out = vec![0.0; n];
        {
            let nodes = self.nodes.borrow();
            let e = nodes[a.id].value.data();
            for s in 0..n / len {
                let range = s * len..(s + 1) * len;
                let max = range
                    .clone()
                    .filter(|&i| valid[i])
                    .map(|i| e[i])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::contract(format!("segment {s} has no valid entries")));
                }
                let mut z = 0.0;
                for i in range.clone() {
                    if valid[i] {
                        out[i] = (e[i] - max).exp();
                        z += out[i];
                    }
                }
                for v in &mut out[range] {
                    *v /= z;
                }
            }
        }
        let shape = self.shape_of(a.id);
        let needs = self.needs(&[a.id]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::SegmentSoftmax { a: a.id, len },
            needs,
        ))
    }

    /// Per-segment weighted row sum: `out[b] = Σ_l w[b·len + l] · x[b·len + l]`.
    pub fn weighted_pool<'t>(&'t self, w: Var<'t>, x: Var<'t>, len: usize) -> Result<Var<'t>> {
        let n = self.nodes.borrow()[w.id].value.numel();
        let (rows, cols) = self.dims(x.id);
        if len == 0 || rows != n || n % len != 0 {
            return Err(Error::Dimension {
                op: "weighted_pool",
                lhs: self.shape_of(w.id),
                rhs: self.shape_of(x.id),
            });
        }
        let batch = n / len;
        let mut out = vec![0.0; batch * cols];
        {
            let nodes = self.nodes.borrow();
            let wd = nodes[w.id].value.data();
            let xd = nodes[x.id].value.data();
            for b in 0..batch {
                let dst = &mut out[b * cols..(b + 1) * cols];
                for l in 0..len {
                    let r = b * len + l;
                    let wv = wd[r];
                    for (d, &xv) in dst.iter_mut().zip(&xd[r * cols..(r + 1) * cols]) {
                        *d += wv * xv;
                    }
                }
            }
        }
        let needs = self.needs(&[w.id, x.id]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, cols], out),
            Op::WeightedPool {
                w: w.id,
                x: x.id,
                len,
            },
            needs,
        ))
    }

    /// Elementwise binary cross-entropy between `sigmoid(x)` and constant targets.
    pub fn bce_with_logits<'t>(&'t self, x: Var<'t>, targets: &[f64]) -> Result<Var<'t>> {
        let shape = self.shape_of(x.id);
        let out: Vec<f64> = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.id].value.data();
            if xd.len() != targets.len() {
                return Err(Error::Dimension {
                    op: "bce_with_logits",
                    lhs: shape,
                    rhs: vec![targets.len()],
                });
            }
            xd.iter()
                .zip(targets)
                .map(|(&v, &y)| v.max(0.0) - v * y + (-v.abs()).exp().ln_1p())
                .collect()
        };
        let needs = self.needs(&[x.id]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BceWithLogits {
                x: x.id,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of every parameter leaf
    /// reached are written into `store`; parameters not on the tape get zeros.
    pub fn backward(&self, loss: Var<'_>, store: &mut ParameterStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.zero_grads();
        for (id, name) in self.param_order.borrow().iter() {
            if let Some(g) = &grads[*id] {
                store.set_grad(name, g.clone())?;
            }
        }
        Ok(())
    }

    /// Raw gradient of `loss` with respect to every node that needs one.
    pub fn gradients(&self, loss: Var<'_>) -> Result<Vec<Option<Vec<f64>>>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(grads)
    }
}

fn acc<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = nodes[a].value.dims2();
            let (_, n) = nodes[b].value.dims2();
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            if let Some(ga) = acc(nodes, grads, a) {
                gemm(m, n, k, g, (n, 1), bv, (1, n), 1.0, ga);
            }
            if let Some(gb) = acc(nodes, grads, b) {
                gemm(k, m, n, av, (1, k), g, (n, 1), 1.0, gb);
            }
        }
        &Op::Binary(kind, a, b) => {
            let (ra, ca) = nodes[a].value.dims2();
            let (rb, cb) = nodes[b].value.dims2();
            let (rows, cols) = out.dims2();
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            let ia = |i: usize, j: usize| (if ra == 1 { 0 } else { i }) * ca + if ca == 1 { 0 } else { j };
            let ib = |i: usize, j: usize| (if rb == 1 { 0 } else { i }) * cb + if cb == 1 { 0 } else { j };
            if let Some(ga) = acc(nodes, grads, a) {
                if (ra, ca) == (rows, cols) && kind != BinKind::Mul {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                } else {
                    for i in 0..rows {
                        for j in 0..cols {
                            let s = g[i * cols + j];
                            ga[ia(i, j)] += match kind {
                                BinKind::Add | BinKind::Sub => s,
                                BinKind::Mul => s * bv[ib(i, j)],
                            };
                        }
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, b) {
                for i in 0..rows {
                    for j in 0..cols {
                        let s = g[i * cols + j];
                        gb[ib(i, j)] += match kind {
                            BinKind::Add => s,
                            BinKind::Sub => -s,
                            BinKind::Mul => s * av[ia(i, j)],
                        };
                    }
                }
            }
        }
        &Op::Scale(a, c) => {
            if let Some(ga) = acc(nodes, grads, a) {
                for (d, &s) in ga.iter_mut().zip(g) {
                    *d += c * s;
                }
            }
        }
        &Op::AddScalar(a) | &Op::Reshape(a) => {
            if let Some(ga) = acc(nodes, grads, a) {
                for (d, &s) in ga.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        &Op::Unary(kind, a) => {
            let x = nodes[a].value.data();
            let y = out.data();
            if let Some(ga) = acc(nodes, grads, a) {
                for i in 0..ga.len() {
                    ga[i] += g[i]
                        * match kind {
                            UnKind::Tanh => 1.0 - y[i] * y[i],
                            UnKind::Sigmoid => y[i] * (1.0 - y[i]),
                            UnKind::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnKind::Exp => y[i],
                            UnKind::Log => 1.0 / x[i],
                        };
                }
            }
        }
        &Op::SumAll(a) => {
            if let Some(ga) = acc(nodes, grads, a) {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::ConcatCols(parts) => {
            let (rows, total) = out.dims2();
            let mut offset = 0;
            for &p in parts {
                let (_, w) = nodes[p].value.dims2();
                if let Some(gp) = acc(nodes, grads, p) {
                    for r in 0..rows {
                        for c in 0..w {
                            gp[r * w + c] += g[r * total + offset + c];
                        }
                    }
                }
                offset += w;
            }
        }
        &Op::SliceCols { a, start } => {
            let (rows, w) = out.dims2();
            let (_, cols) = nodes[a].value.dims2();
            if let Some(ga) = acc(nodes, grads, a) {
                for r in 0..rows {
                    for c in 0..w {
                        ga[r * cols + start + c] += g[r * w + c];
                    }
                }
            }
        }
        Op::Gather { table, ids } => {
            let (_, cols) = nodes[*table].value.dims2();
            if let Some(gt) = acc(nodes, grads, *table) {
                for (k, &i) in ids.iter().enumerate() {
                    for c in 0..cols {
                        gt[i * cols + c] += g[k * cols + c];
                    }
                }
            }
        }
        Op::StackTime { parts, batch } => {
            let steps = parts.len();
            let (_, cols) = out.dims2();
            for (t, &p) in parts.iter().enumerate() {
                if let Some(gp) = acc(nodes, grads, p) {
                    for b in 0..*batch {
                        let src = (b * steps + t) * cols;
                        for c in 0..cols {
                            gp[b * cols + c] += g[src + c];
                        }
                    }
                }
            }
        }
        &Op::TimeSlice { a, steps, t } => {
            let (batch, cols) = out.dims2();
            if let Some(ga) = acc(nodes, grads, a) {
                for b in 0..batch {
                    let dst = (b * steps + t) * cols;
                    for c in 0..cols {
                        ga[dst + c] += g[b * cols + c];
                    }
                }
            }
        }
        &Op::RepeatRows { a, times } => {
            let (batch, cols) = nodes[a].value.dims2();
            if let Some(ga) = acc(nodes, grads, a) {
                for b in 0..batch {
                    for k in 0..times {
                        let src = (b * times + k) * cols;
                        for c in 0..cols {
                            ga[b * cols + c] += g[src + c];
                        }
                    }
                }
            }
        }
        &Op::SegmentSoftmax { a, len } => {
            let y = out.data();
            if let Some(ga) = acc(nodes, grads, a) {
                for s in 0..y.len() / len {
                    let range = s * len..(s + 1) * len;
                    let dot: f64 = range.clone().map(|i| y[i] * g[i]).sum();
                    for i in range {
                        ga[i] += y[i] * (g[i] - dot);
                    }
                }
            }
        }
        &Op::WeightedPool { w, x, len } => {
            let (rows, cols) = nodes[x].value.dims2();
            let wd = nodes[w].value.data();
            let xd = nodes[x].value.data();
            if let Some(gw) = acc(nodes, grads, w) {
                for r in 0..rows {
                    let b = r / len;
                    gw[r] += xd[r * cols..(r + 1) * cols]
                        .iter()
                        .zip(&g[b * cols..(b + 1) * cols])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
            }
            if let Some(gx) = acc(nodes, grads, x) {
                for r in 0..rows {
                    let b = r / len;
                    for c in 0..cols {
                        gx[r * cols + c] += wd[r] * g[b * cols + c];
                    }
                }
            }
        }
        Op::Conv1d { x, w, geom, cols } => {
            let Conv1dGeom {
                batch,
                steps,
                in_ch,
                out_ch,
                kernel,
            } = *geom;
            let width = kernel * in_ch;
            let rows = batch * steps;
            if let Some(gw) = acc(nodes, grads, *w) {
                gemm(width, rows, out_ch, cols, (1, width), g, (out_ch, 1), 1.0, gw);
            }
            if nodes[*x].needs_grad {
                let wd = nodes[*w].value.data();
                let mut gcol = vec![0.0; rows * width];
                gemm(rows, out_ch, width, g, (out_ch, 1), wd, (1, out_ch), 0.0, &mut gcol);
                let pad = kernel / 2;
                let gx = acc(nodes, grads, *x).expect("needs_grad checked");
                for b in 0..batch {
                    for t in 0..steps {
                        let row = b * steps + t;
                        for j in 0..kernel {
                            let src_t = t + j;
                            if src_t < pad || src_t - pad >= steps {
                                continue;
                            }
                            let dst = (b * steps + src_t - pad) * in_ch;
                            let src = row * width + j * in_ch;
                            for c in 0..in_ch {
                                gx[dst + c] += gcol[src + c];
                            }
                        }
                    }
                }
            }
        }
        Op::Conv2d { x, w, geom, cols } => {
            let Conv2dGeom {
                batch,
                height,
                width,
                in_ch,
                out_ch,
                kernel: (kh, kw),
                stride: (sh, sw),
                pad: (ph, pw),
            } = *geom;
            let (oh, ow) = (geom.out_height(), geom.out_width());
            let patch = kh * kw * in_ch;
            let rows = batch * oh * ow;
            if let Some(gw) = acc(nodes, grads, *w) {
                gemm(patch, rows, out_ch, cols, (1, patch), g, (out_ch, 1), 1.0, gw);
            }
            if nodes[*x].needs_grad {
                let wd = nodes[*w].value.data();
                let mut gcol = vec![0.0; rows * patch];
                gemm(rows, out_ch, patch, g, (out_ch, 1), wd, (1, out_ch), 0.0, &mut gcol);
                let gx = acc(nodes, grads, *x).expect("needs_grad checked");
                for b in 0..batch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let row = (b * oh + oy) * ow + ox;
                            for i in 0..kh {
                                let iy = oy * sh + i;
                                if iy < ph || iy - ph >= height {
                                    continue;
                                }
                                for j in 0..kw {
                                    let ix = ox * sw + j;
                                    if ix < pw || ix - pw >= width {
                                        continue;
                                    }
                                    let dst = ((b * height + iy - ph) * width + ix - pw) * in_ch;
                                    let src = row * patch + (i * kw + j) * in_ch;
                                    for c in 0..in_ch {
                                        gx[dst + c] += gcol[src + c];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::LstmCell {
            gates,
            c_prev,
            cache,
        } => {
            let (batch, two_h) = out.dims2();
            let hidden = two_h / 2;
            let cp = nodes[*c_prev].value.data();
            let mut d_gates = vec![0.0; batch * 4 * hidden];
            let mut d_cprev = vec![0.0; batch * hidden];
            for b in 0..batch {
                for j in 0..hidden {
                    let k = (b * hidden + j) * 5;
                    let [i, f, gg, o, tc] = [cache[k], cache[k + 1], cache[k + 2], cache[k + 3], cache[k + 4]];
                    let gh = g[b * two_h + j];
                    let gc = g[b * two_h + hidden + j];
                    let dc = gc + gh * o * (1.0 - tc * tc);
                    let base = b * 4 * hidden;
                    d_gates[base + j] = dc * gg * i * (1.0 - i);
                    d_gates[base + hidden + j] = dc * cp[b * hidden + j] * f * (1.0 - f);
                    d_gates[base + 2 * hidden + j] = dc * i * (1.0 - gg * gg);
                    d_gates[base + 3 * hidden + j] = gh * tc * o * (1.0 - o);
                    d_cprev[b * hidden + j] = dc * f;
                }
            }
            if let Some(gg) = acc(nodes, grads, *gates) {
                for (d, s) in gg.iter_mut().zip(&d_gates) {
                    *d += s;
                }
            }
            if let Some(gc) = acc(nodes, grads, *c_prev) {
                for (d, s) in gc.iter_mut().zip(&d_cprev) {
                    *d += s;
                }
            }
        }
        Op::GruCell {
            xg,
            hg,
            h_prev,
            cache,
        } => {
            let (batch, hidden) = out.dims2();
            let hd = nodes[*hg].value.data();
            let hp = nodes[*h_prev].value.data();
            let mut d_x = vec![0.0; batch * 3 * hidden];
            let mut d_h = vec![0.0; batch * 3 * hidden];
            let mut d_prev = vec![0.0; batch * hidden];
            for b in 0..batch {
                for j in 0..hidden {
                    let k = (b * hidden + j) * 3;
                    let (r, u, n) = (cache[k], cache[k + 1], cache[k + 2]);
                    let gv = g[b * hidden + j];
                    let base = b * 3 * hidden;
                    let hn = hd[base + 2 * hidden + j];
                    d_prev[b * hidden + j] = gv * u;
                    let du = gv * (hp[b * hidden + j] - n) * u * (1.0 - u);
                    let dn = gv * (1.0 - u) * (1.0 - n * n);
                    let dr = dn * hn * r * (1.0 - r);
                    d_x[base + j] = dr;
                    d_h[base + j] = dr;
                    d_x[base + hidden + j] = du;
                    d_h[base + hidden + j] = du;
                    d_x[base + 2 * hidden + j] = dn;
                    d_h[base + 2 * hidden + j] = dn * r;
                }
            }
            for (target, delta) in [(*xg, &d_x), (*hg, &d_h), (*h_prev, &d_prev)] {
                if let Some(gt) = acc(nodes, grads, target) {
                    for (d, s) in gt.iter_mut().zip(delta.iter()) {
                        *d += s;
                    }
                }
            }
        }
        Op::BceWithLogits { x, targets } => {
            let xd = nodes[*x].value.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..gx.len() {
                    gx[i] += g[i] * (sigmoid(xd[i]) - targets[i]);
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the node's value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.data().to_vec()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn dims2(&self) -> (usize, usize) {
        self.tape.dims(self.id)
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let tape = self.tape;
        let (m, k) = tape.dims(self.id);
        let (k2, n) = tape.dims(other.id);
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = tape.nodes.borrow();
            gemm(
                m,
                k,
                n,
                nodes[self.id].value.data(),
                (k, 1),
                nodes[other.id].value.data(),
                (n, 1),
                0.0,
                &mut out,
            );
        }
        let needs = tape.needs(&[self.id, other.id]);
        Ok(tape.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(self.id, other.id),
            needs,
        ))
    }

    fn binary(self, other: Var<'t>, kind: BinKind) -> Result<Var<'t>> {
        let tape = self.tape;
        let sa = self.shape();
        let sb = other.shape();
        let (ra, ca) = tape.dims(self.id);
        let (rb, cb) = tape.dims(other.id);
        let (Some(rows), Some(cols)) = (broadcast_dim(ra, rb), broadcast_dim(ca, cb)) else {
            return Err(Error::Dimension {
                op: match kind {
                    BinKind::Add => "add",
                    BinKind::Sub => "sub",
                    BinKind::Mul => "mul",
                },
                lhs: sa,
                rhs: sb,
            });
        };
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let out = {
            let nodes = tape.nodes.borrow();
            let av = nodes[self.id].value.data();
            let bv = nodes[other.id].value.data();
            if (ra, ca) == (rb, cb) {
                av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
            } else {
                let mut out = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    let ar = if ra == 1 { 0 } else { i };
                    let br = if rb == 1 { 0 } else { i };
                    for j in 0..cols {
                        let x = av[ar * ca + if ca == 1 { 0 } else { j }];
                        let y = bv[br * cb + if cb == 1 { 0 } else { j }];
                        out.push(f(x, y));
                    }
                }
                out
            }
        };
        let shape = if sa == sb || ((ra, ca) == (rows, cols) && sa.len() >= 2) {
            sa
        } else if (rb, cb) == (rows, cols) && sb.len() >= 2 {
            sb
        } else if (rows, cols) == (ra, ca) {
            sa
        } else if (rows, cols) == (rb, cb) {
            sb
        } else {
            vec![rows, cols]
        };
        let needs = tape.needs(&[self.id, other.id]);
        Ok(tape.push(
            Tensor::from_parts(shape, out),
            Op::Binary(kind, self.id, other.id),
            needs,
        ))
    }

    /// Elementwise sum. Shapes must match, or one side must broadcast along
    /// an axis of length one (scalar, row vector, or column vector).
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Mul)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let tape = self.tape;
        let v = self.value();
        let shape = v.shape().to_vec();
        let out = v.into_data().into_iter().map(|x| x * c).collect();
        let needs = tape.needs(&[self.id]);
        tape.push(Tensor::from_parts(shape, out), Op::Scale(self.id, c), needs)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let tape = self.tape;
        let v = self.value();
        let shape = v.shape().to_vec();
        let out = v.into_data().into_iter().map(|x| x + c).collect();
        let needs = tape.needs(&[self.id]);
        tape.push(Tensor::from_parts(shape, out), Op::AddScalar(self.id), needs)
    }

    fn unary(self, kind: UnKind) -> Var<'t> {
        let tape = self.tape;
        let v = self.value();
        let shape = v.shape().to_vec();
        let out = v
            .into_data()
            .into_iter()
            .map(|x| match kind {
                UnKind::Tanh => x.tanh(),
                UnKind::Sigmoid => sigmoid(x),
                UnKind::Relu => x.max(0.0),
                UnKind::Exp => x.exp(),
                UnKind::Log => x.ln(),
            })
            .collect();
        let needs = tape.needs(&[self.id]);
        tape.push(Tensor::from_parts(shape, out), Op::Unary(kind, self.id), needs)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(UnKind::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnKind::Sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(UnKind::Relu)
    }

    /// Fails when any result would overflow to infinity.
    pub fn exp(self) -> Result<Var<'t>> {
        {
            let nodes = self.tape.nodes.borrow();
            if let Some(&x) = nodes[self.id].value.data().iter().find(|x| x.exp().is_infinite() || x.is_nan()) {
                return Err(Error::Domain {
                    op: "exp",
                    detail: format!("argument {x} overflows"),
                });
            }
        }
        Ok(self.unary(UnKind::Exp))
    }

    /// Fails on non-positive arguments.
    pub fn log(self) -> Result<Var<'t>> {
        {
            let nodes = self.tape.nodes.borrow();
            if let Some(&x) = nodes[self.id].value.data().iter().find(|&&x| !(x > 0.0)) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("argument {x} is not positive"),
                });
            }
        }
        Ok(self.unary(UnKind::Log))
    }

    pub fn sum(self) -> Var<'t> {
        let tape = self.tape;
        let s = tape.nodes.borrow()[self.id].value.sum();
        let needs = tape.needs(&[self.id]);
        tape.push(Tensor::scalar(s), Op::SumAll(self.id), needs)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.tape.nodes.borrow()[self.id].value.numel();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let tape = self.tape;
        let v = self.value().reshape(shape)?;
        let needs = tape.needs(&[self.id]);
        Ok(tape.push(v, Op::Reshape(self.id), needs))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let tape = self.tape;
        let (rows, cols) = tape.dims(self.id);
        if start + len > cols || len == 0 {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: self.shape(),
                rhs: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(rows * len);
        {
            let nodes = tape.nodes.borrow();
            let d = nodes[self.id].value.data();
            for r in 0..rows {
                out.extend_from_slice(&d[r * cols + start..r * cols + start + len]);
            }
        }
        let needs = tape.needs(&[self.id]);
        Ok(tape.push(
            Tensor::from_parts(vec![rows, len], out),
            Op::SliceCols { a: self.id, start },
            needs,
        ))
    }

    /// Rows `b * steps + t` for every item `b` of an item-major sequence.
    pub fn time_slice(self, steps: usize, t: usize) -> Result<Var<'t>> {
        let tape = self.tape;
        let (rows, cols) = tape.dims(self.id);
        if steps == 0 || rows % steps != 0 || t >= steps {
            return Err(Error::Dimension {
                op: "time_slice",
                lhs: self.shape(),
                rhs: vec![steps, t],
            });
        }
        let batch = rows / steps;
        let mut out = Vec::with_capacity(batch * cols);
        {
            let nodes = tape.nodes.borrow();
            let v = &nodes[self.id].value;
            for b in 0..batch {
                out.extend_from_slice(v.row(b * steps + t));
            }
        }
        let needs = tape.needs(&[self.id]);
        Ok(tape.push(
            Tensor::from_parts(vec![batch, cols], out),
            Op::TimeSlice {
                a: self.id,
                steps,
                t,
            },
            needs,
        ))
    }

    /// Repeats each row `times` times consecutively.
    pub fn repeat_rows(self, times: usize) -> Var<'t> {
        let tape = self.tape;
        let (rows, cols) = tape.dims(self.id);
        let mut out = Vec::with_capacity(rows * times * cols);
        {
            let nodes = tape.nodes.borrow();
            let v = &nodes[self.id].value;
            for b in 0..rows {
                for _ in 0..times {
                    out.extend_from_slice(v.row(b));
                }
            }
        }
        let needs = tape.needs(&[self.id]);
        tape.push(
            Tensor::from_parts(vec![rows * times, cols], out),
            Op::RepeatRows { a: self.id, times },
            needs,
        )
    }
}
