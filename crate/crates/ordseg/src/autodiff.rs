//! A minimal reverse-mode differentiation engine over dense `f64` arrays.
//!
//! Graphs are built eagerly on a [`Tape`] arena; [`Var`] handles are copyable
//! indices into it. Node indices only ever reference earlier nodes, so the
//! graph is acyclic by construction and a single reverse sweep visits nodes
//! in topological order.
//!
//! The op set is exactly what the losses and the desk-scale segmenter need:
//! elementwise arithmetic, ReLU/abs/exp/log, reductions, per-pixel softmax,
//! a fused neighbor-pair bilinear form, and the convolution/pooling/
//! upsampling/concat ops of the encoder-decoder. Convolutions run as
//! shift-and-accumulate row kernels over flat slices.
//!
//! Kink conventions: the derivative of `relu` at exactly 0 is 0, of `abs` at
//! 0 is 0, and of clamped logs at their boundaries is 0.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, IxDyn};

use crate::error::{Error, Result};
use crate::model::softmax_kernel;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    AddScalar(usize),
    Scale(usize, f64),
    MulConst(usize, Arc<ArrayD<f64>>),
    Relu(usize),
    Abs(usize),
    Square(usize),
    Exp(usize),
    LnClamped(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    SelectPlane(usize, usize),
    Softmax(usize),
    Csnp(usize, Arc<Array2<f64>>),
    Conv2d { input: usize, weight: usize, bias: usize, pad: usize },
    AvgPool2(usize),
    Upsample2(usize),
    ConcatC(usize, usize),
    ChwToHwc(usize),
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Constant => "constant",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Neg(..) => "neg",
        Op::AddScalar(..) => "add_scalar",
        Op::Scale(..) => "scale",
        Op::MulConst(..) => "mul_const",
        Op::Relu(..) => "relu",
        Op::Abs(..) => "abs",
        Op::Square(..) => "square",
        Op::Exp(..) => "exp",
        Op::LnClamped(..) => "ln_clamped",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SelectPlane(..) => "select_plane",
        Op::Softmax(..) => "softmax",
        Op::Csnp(..) => "csnp",
        Op::Conv2d { .. } => "conv2d",
        Op::AvgPool2(..) => "avg_pool2",
        Op::Upsample2(..) => "upsample2",
        Op::ConcatC(..) => "concat_channels",
        Op::ChwToHwc(..) => "chw_to_hwc",
    }
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Arena holding one computation graph. Confine a tape to one thread;
/// independent tapes may run concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<ArrayD<f64>>>>,
    backward_done: Cell<bool>,
}

/// Handle to one node of a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
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

    fn push(&self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        self.grads.borrow_mut().push(None);
        Var { tape: self, idx: nodes.len() - 1 }
    }

    /// A differentiable input (parameter, logits).
    pub fn leaf(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input (targets, masks, frozen fields).
    pub fn constant(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    /// A 0-dimensional constant.
    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    fn with_nodes<R>(&self, f: impl FnOnce(&[Node]) -> R) -> R {
        f(&self.nodes.borrow())
    }

    fn requires(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }

    /// The gradient accumulated on `var` by [`Tape::backward`], if any.
    pub fn grad(&self, var: Var<'_>) -> Option<ArrayD<f64>> {
        self.grads.borrow()[var.idx].clone()
    }

    /// Clears all gradients so another backward pass may run.
    pub fn zero_grads(&self) {
        for g in self.grads.borrow_mut().iter_mut() {
            *g = None;
        }
        self.backward_done.set(false);
    }

    /// Reverse sweep from a scalar loss node. Populates gradients on every
    /// reachable differentiable node. A second call without
    /// [`Tape::zero_grads`] is rejected.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Usage("loss node belongs to a different tape".into()));
        }
        if self.backward_done.get() {
            return Err(Error::Usage(
                "backward already ran on this tape; call zero_grads to reset".into(),
            ));
        }
        self.backward_done.set(true);
        let nodes = self.nodes.borrow();
        if nodes[loss.idx].value.ndim() != 0 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.idx].value.shape()
            )));
        }
        let mut grads = self.grads.borrow_mut();
        grads[loss.idx] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));

        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !nodes[idx].requires_grad {
                continue;
            }
            if g.iter().any(|v| v.is_nan()) {
                return Err(Error::Numeric(format!(
                    "NaN gradient flowing into '{}' (node {idx})",
                    op_name(&nodes[idx].op)
                )));
            }
            propagate(&nodes, &mut grads, idx, &g);
            grads[idx] = Some(g);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<ArrayD<f64>>], nodes: &[Node], idx: usize, delta: ArrayD<f64>) {
    if !nodes[idx].requires_grad {
        return;
    }
    match &mut grads[idx] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<ArrayD<f64>>], idx: usize, g: &ArrayD<f64>) {
    match &nodes[idx].op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, -g.clone());
        }
        Op::Mul(a, b) => {
            accumulate(grads, nodes, *a, g * &nodes[*b].value);
            accumulate(grads, nodes, *b, g * &nodes[*a].value);
        }
        Op::Neg(a) => accumulate(grads, nodes, *a, -g.clone()),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g * *c),
        Op::MulConst(a, m) => accumulate(grads, nodes, *a, g * m.as_ref()),
        Op::Relu(a) => {
            let mut d = g.clone();
            d.zip_mut_with(&nodes[*a].value, |gi, &x| {
                if x <= 0.0 {
                    *gi = 0.0;
                }
            });
            accumulate(grads, nodes, *a, d);
        }
        Op::Abs(a) => {
            let mut d = g.clone();
            d.zip_mut_with(&nodes[*a].value, |gi, &x| {
                *gi *= if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            });
            accumulate(grads, nodes, *a, d);
        }
        Op::Square(a) => {
            let d = 2.0 * g * &nodes[*a].value;
            accumulate(grads, nodes, *a, d);
        }
        Op::Exp(a) => accumulate(grads, nodes, *a, g * &nodes[idx].value),
        Op::LnClamped(a, lo, hi) => {
            let mut d = g.clone();
            d.zip_mut_with(&nodes[*a].value, |gi, &x| {
                if x > *lo && x < *hi {
                    *gi /= x;
                } else {
                    *gi = 0.0;
                }
            });
            accumulate(grads, nodes, *a, d);
        }
        Op::Sum(a) => {
            let gv = g[[]];
            accumulate(grads, nodes, *a, ArrayD::from_elem(nodes[*a].value.raw_dim(), gv));
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            let gv = g[[]] / n;
            accumulate(grads, nodes, *a, ArrayD::from_elem(nodes[*a].value.raw_dim(), gv));
        }
        Op::SelectPlane(a, k) => {
            let mut d = ArrayD::zeros(nodes[*a].value.raw_dim());
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            {
                let mut d3 = d.view_mut().into_dimensionality::<ndarray::Ix3>().unwrap();
                d3.index_axis_mut(Axis(2), *k).assign(&g2);
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::Softmax(a) => {
            let p = nodes[idx].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let (h, w, k) = p.dim();
            let mut d = Array3::<f64>::zeros((h, w, k));
            let ps = p.as_slice().unwrap();
            let gs = g3.as_slice().unwrap();
            let ds = d.as_slice_mut().unwrap();
            for pix in 0..h * w {
                let base = pix * k;
                let mut dot = 0.0;
                for c in 0..k {
                    dot += gs[base + c] * ps[base + c];
                }
                for c in 0..k {
                    ds[base + c] = ps[base + c] * (gs[base + c] - dot);
                }
            }
            accumulate(grads, nodes, *a, d.into_dyn());
        }
        Op::Csnp(a, cost) => {
            let p = nodes[*a].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let (h, w, k) = p.dim();
            let n_pairs = h * (w - 1) + (h - 1) * w;
            if n_pairs == 0 {
                return;
            }
            let scale = g[[]] / n_pairs as f64;
            let ps = p.as_slice().unwrap();
            let mut d = Array3::<f64>::zeros((h, w, k));
            let ds = d.as_slice_mut().unwrap();
            let mut s = vec![0.0; k];
            for i in 0..h {
                for j in 0..w {
                    s.iter_mut().for_each(|x| *x = 0.0);
                    let add_neighbor = |ni: usize, nj: usize, s: &mut Vec<f64>| {
                        let base = (ni * w + nj) * k;
                        for (c, sc) in s.iter_mut().enumerate() {
                            *sc += ps[base + c];
                        }
                    };
                    if i > 0 {
                        add_neighbor(i - 1, j, &mut s);
                    }
                    if i + 1 < h {
                        add_neighbor(i + 1, j, &mut s);
                    }
                    if j > 0 {
                        add_neighbor(i, j - 1, &mut s);
                    }
                    if j + 1 < w {
                        add_neighbor(i, j + 1, &mut s);
                    }
                    let base = (i * w + j) * k;
                    for r in 0..k {
                        let mut acc = 0.0;
                        for (c, sc) in s.iter().enumerate() {
                            acc += cost[(r, c)] * sc;
                        }
                        ds[base + r] = scale * acc;
                    }
                }
            }
            accumulate(grads, nodes, *a, d.into_dyn());
        }
        Op::Conv2d { input, weight, bias, pad } => {
            conv2d_backward(nodes, grads, *input, *weight, *bias, *pad, g);
        }
        Op::AvgPool2(a) => {
            let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let (c, oh, ow) = g3.dim();
            let mut d = Array3::<f64>::zeros((c, oh * 2, ow * 2));
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let gv = g3[(ch, y, x)] * 0.25;
                        d[(ch, 2 * y, 2 * x)] = gv;
                        d[(ch, 2 * y, 2 * x + 1)] = gv;
                        d[(ch, 2 * y + 1, 2 * x)] = gv;
                        d[(ch, 2 * y + 1, 2 * x + 1)] = gv;
                    }
                }
            }
            accumulate(grads, nodes, *a, d.into_dyn());
        }
        Op::Upsample2(a) => {
            let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let (c, oh, ow) = g3.dim();
            let (ih, iw) = (oh / 2, ow / 2);
            let mut d = Array3::<f64>::zeros((c, ih, iw));
            for ch in 0..c {
                for y in 0..ih {
                    for x in 0..iw {
                        d[(ch, y, x)] = g3[(ch, 2 * y, 2 * x)]
                            + g3[(ch, 2 * y, 2 * x + 1)]
                            + g3[(ch, 2 * y + 1, 2 * x)]
                            + g3[(ch, 2 * y + 1, 2 * x + 1)];
                    }
                }
            }
            accumulate(grads, nodes, *a, d.into_dyn());
        }
        Op::ConcatC(a, b) => {
            let ca = nodes[*a].value.shape()[0];
            let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let ga = g3.slice(ndarray::s![..ca, .., ..]).to_owned();
            let gb = g3.slice(ndarray::s![ca.., .., ..]).to_owned();
            accumulate(grads, nodes, *a, ga.into_dyn());
            accumulate(grads, nodes, *b, gb.into_dyn());
        }
        Op::ChwToHwc(a) => {
            let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            // permuted_axes keeps the permuted memory order; the conv
            // kernels need standard layout.
            let d = g3.permuted_axes([2, 0, 1]).as_standard_layout().into_owned();
            accumulate(grads, nodes, *a, d.into_dyn());
        }
    }
}

/// Zero-padded same-size convolution as shift-and-accumulate row kernels.
/// `x`: `[cin, h, w]` flat, `wt`: `[cout, cin, kh, kw]` flat.
fn conv2d_forward_kernel(
    x: &[f64],
    wt: &[f64],
    b: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros((cout, h, w));
    let os = out.as_slice_mut().unwrap();
    for o in 0..cout {
        let out_base = o * h * w;
        os[out_base..out_base + h * w].fill(b[o]);
        for i in 0..cin {
            let in_base = i * h * w;
            for dy in 0..kh {
                for dx in 0..kw {
                    let wv = wt[((o * cin + i) * kh + dy) * kw + dx];
                    if wv == 0.0 {
                        continue;
                    }
                    // out[y][x] += wv * x[y + dy - pad][x + dx - pad]
                    let y_lo = pad.saturating_sub(dy);
                    let y_hi = (h + pad - dy).min(h);
                    let x_lo = pad.saturating_sub(dx);
                    let x_hi = (w + pad - dx).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in y_lo..y_hi {
                        let src = in_base + (y + dy - pad) * w + (x_lo + dx - pad);
                        let dst = out_base + y * w + x_lo;
                        let len = x_hi - x_lo;
                        let (src_row, dst_row) = (&x[src..src + len], &mut os[dst..dst + len]);
                        for (d, s) in dst_row.iter_mut().zip(src_row) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    nodes: &[Node],
    grads: &mut [Option<ArrayD<f64>>],
    input: usize,
    weight: usize,
    bias: usize,
    pad: usize,
    g: &ArrayD<f64>,
) {
    let xv = nodes[input].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let wv4 = nodes[weight].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let (cin, h, w) = xv.dim();
    let (cout, _, kh, kw) = wv4.dim();
    let x = xv.as_slice().unwrap();
    let wt = wv4.as_slice().unwrap();
    let gs = g3.as_slice().unwrap();

    if nodes[bias].requires_grad {
        let mut db = Array1::<f64>::zeros(cout);
        for o in 0..cout {
            db[o] = gs[o * h * w..(o + 1) * h * w].iter().sum();
        }
        accumulate(grads, nodes, bias, db.into_dyn());
    }
    if nodes[weight].requires_grad {
        let mut dw = Array4::<f64>::zeros((cout, cin, kh, kw));
        let dws = dw.as_slice_mut().unwrap();
        for o in 0..cout {
            let g_base = o * h * w;
            for i in 0..cin {
                let in_base = i * h * w;
                for dy in 0..kh {
                    for dx in 0..kw {
                        let y_lo = pad.saturating_sub(dy);
                        let y_hi = (h + pad - dy).min(h);
                        let x_lo = pad.saturating_sub(dx);
                        let x_hi = (w + pad - dx).min(w);
                        if x_lo >= x_hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for y in y_lo..y_hi {
                            let src = in_base + (y + dy - pad) * w + (x_lo + dx - pad);
                            let dst = g_base + y * w + x_lo;
                            let len = x_hi - x_lo;
                            let (xb, gb) = (&x[src..src + len], &gs[dst..dst + len]);
                            for (xi, gi) in xb.iter().zip(gb) {
                                acc += xi * gi;
                            }
                        }
                        dws[((o * cin + i) * kh + dy) * kw + dx] = acc;
                    }
                }
            }
        }
        accumulate(grads, nodes, weight, dw.into_dyn());
    }
    if nodes[input].requires_grad {
        let mut dx = Array3::<f64>::zeros((cin, h, w));
        let dxs = dx.as_slice_mut().unwrap();
        for o in 0..cout {
            let g_base = o * h * w;
            for i in 0..cin {
                let in_base = i * h * w;
                for dy in 0..kh {
                    for dx2 in 0..kw {
                        let wv = wt[((o * cin + i) * kh + dy) * kw + dx2];
                        if wv == 0.0 {
                            continue;
                        }
                        let y_lo = pad.saturating_sub(dy);
                        let y_hi = (h + pad - dy).min(h);
                        let x_lo = pad.saturating_sub(dx2);
                        let x_hi = (w + pad - dx2).min(w);
                        if x_lo >= x_hi {
                            continue;
                        }
                        // dx[y + dy - pad][x + dx2 - pad] += wv * g[y][x]
                        for y in y_lo..y_hi {
                            let dst = in_base + (y + dy - pad) * w + (x_lo + dx2 - pad);
                            let src = g_base + y * w + x_lo;
                            let len = x_hi - x_lo;
                            let (g_row, dx_row) =
                                (&gs[src..src + len], &mut dxs[dst..dst + len]);
                            for (d, gv) in dx_row.iter_mut().zip(g_row) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
        }
        accumulate(grads, nodes, input, dx.into_dyn());
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Clone of the node's value array.
    pub fn value(&self) -> ArrayD<f64> {
        self.tape.with_nodes(|n| n[self.idx].value.clone())
    }

    /// The node's shape without cloning the data.
    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_nodes(|n| n[self.idx].value.shape().to_vec())
    }

    /// Value of a 0-dimensional node.
    pub fn scalar_value(&self) -> f64 {
        self.tape.with_nodes(|n| n[self.idx].value[[]])
    }

    fn unary(&self, value: ArrayD<f64>, op: Op) -> Var<'t> {
        let req = self.tape.requires(self.idx);
        self.tape.push(value, op, req)
    }

    fn binary(&self, other: Var<'t>, value: ArrayD<f64>, op: Op) -> Var<'t> {
        let req = self.tape.requires(self.idx) || self.tape.requires(other.idx);
        self.tape.push(value, op, req)
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        let v = self.tape.with_nodes(|n| &n[self.idx].value + &n[other.idx].value);
        self.binary(other, v, Op::Add(self.idx, other.idx))
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        let v = self.tape.with_nodes(|n| &n[self.idx].value - &n[other.idx].value);
        self.binary(other, v, Op::Sub(self.idx, other.idx))
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        let v = self.tape.with_nodes(|n| &n[self.idx].value * &n[other.idx].value);
        self.binary(other, v, Op::Mul(self.idx, other.idx))
    }

    pub fn neg(&self) -> Var<'t> {
        let v = self.tape.with_nodes(|n| -&n[self.idx].value);
        self.unary(v, Op::Neg(self.idx))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.tape.with_nodes(|n| &n[self.idx].value + c);
        self.unary(v, Op::AddScalar(self.idx))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.tape.with_nodes(|n| &n[self.idx].value * c);
        self.unary(v, Op::Scale(self.idx, c))
    }

    /// Elementwise product with a constant array of the same shape.
    pub fn mul_const(&self, m: Arc<ArrayD<f64>>) -> Var<'t> {
        let v = self.tape.with_nodes(|n| &n[self.idx].value * m.as_ref());
        self.unary(v, Op::MulConst(self.idx, m))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.tape.with_nodes(|n| n[self.idx].value.mapv(|x| x.max(0.0)));
        self.unary(v, Op::Relu(self.idx))
    }

    pub fn abs(&self) -> Var<'t> {
        let v = self.tape.with_nodes(|n| n[self.idx].value.mapv(f64::abs));
        self.unary(v, Op::Abs(self.idx))
    }

    pub fn square(&self) -> Var<'t> {
        let v = self.tape.with_nodes(|n| n[self.idx].value.mapv(|x| x * x));
        self.unary(v, Op::Square(self.idx))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.tape.with_nodes(|n| n[self.idx].value.mapv(f64::exp));
        self.unary(v, Op::Exp(self.idx))
    }

    /// `ln(clamp(x, lo, hi))`; gradient is zero outside the open interval.
    pub fn ln_clamped(&self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.tape.with_nodes(|n| n[self.idx].value.mapv(|x| x.clamp(lo, hi).ln()));
        self.unary(v, Op::LnClamped(self.idx, lo, hi))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = self
            .tape
            .with_nodes(|n| ArrayD::from_elem(IxDyn(&[]), n[self.idx].value.sum()));
        self.unary(v, Op::Sum(self.idx))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.tape.with_nodes(|n| {
            let val = &n[self.idx].value;
            ArrayD::from_elem(IxDyn(&[]), val.sum() / val.len() as f64)
        });
        self.unary(v, Op::Mean(self.idx))
    }

    /// Extracts class plane `k` (0-based) from an `H x W x K` node.
    pub fn select_plane(&self, k: usize) -> Var<'t> {
        let v = self.tape.with_nodes(|n| {
            let v3 = n[self.idx].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            v3.index_axis(Axis(2), k).to_owned().into_dyn()
        });
        self.unary(v, Op::SelectPlane(self.idx, k))
    }

    /// Per-pixel softmax along the last axis of an `H x W x K` node.
    pub fn softmax(&self) -> Var<'t> {
        let v = self.tape.with_nodes(|n| {
            let v3 = n[self.idx].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            softmax_kernel(&v3.to_owned()).into_dyn()
        });
        self.unary(v, Op::Softmax(self.idx))
    }

    /// Fused neighbor-pair bilinear form: the mean over unordered 4-neighbor
    /// pixel pairs of `p(a)^T C p(b)`. Returns a 0-dimensional node; 0 for
    /// single-pixel grids.
    pub fn csnp(&self, cost: Arc<Array2<f64>>) -> Var<'t> {
        let total = self.tape.with_nodes(|n| {
            let p = n[self.idx].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let (h, w, k) = p.dim();
            let n_pairs = h * (w - 1) + (h - 1) * w;
            if n_pairs == 0 {
                return 0.0;
            }
            let mut total = 0.0;
            for i in 0..h {
                for j in 0..w {
                    if j + 1 < w {
                        total += bilinear(&p, &cost, (i, j), (i, j + 1), k);
                    }
                    if i + 1 < h {
                        total += bilinear(&p, &cost, (i, j), (i + 1, j), k);
                    }
                }
            }
            total / n_pairs as f64
        });
        self.unary(
            ArrayD::from_elem(IxDyn(&[]), total),
            Op::Csnp(self.idx, cost),
        )
    }

    /// Zero-padded same-size convolution: input `Cin x H x W`, weight
    /// `Cout x Cin x kh x kw` (odd kernel), bias `Cout`.
    pub fn conv2d(&self, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let (out, pad) = self.tape.with_nodes(|n| {
            let x = n[self.idx].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let w4 = n[weight.idx].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let b = n[bias.idx].value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let (cin, h, wd) = x.dim();
            let (cout, cin_w, kh, kw) = w4.dim();
            assert_eq!(cin, cin_w, "conv2d channel mismatch");
            assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d needs odd kernels");
            let pad = kh / 2;
            let out = conv2d_forward_kernel(
                x.as_slice().unwrap(),
                w4.as_slice().unwrap(),
                b.as_slice().unwrap(),
                cin,
                h,
                wd,
                cout,
                kh,
                kw,
                pad,
            );
            (out, pad)
        });
        let req = self.tape.requires(self.idx)
            || self.tape.requires(weight.idx)
            || self.tape.requires(bias.idx);
        self.tape.push(
            out.into_dyn(),
            Op::Conv2d { input: self.idx, weight: weight.idx, bias: bias.idx, pad },
            req,
        )
    }

    /// 2x2 average pooling of a `C x H x W` node; H and W must be even.
    pub fn avg_pool2(&self) -> Var<'t> {
        let out = self.tape.with_nodes(|n| {
            let x = n[self.idx].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let (c, h, w) = x.dim();
            assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dimensions");
            let mut out = Array3::<f64>::zeros((c, h / 2, w / 2));
            for ch in 0..c {
                for y in 0..h / 2 {
                    for x0 in 0..w / 2 {
                        out[(ch, y, x0)] = 0.25
                            * (x[(ch, 2 * y, 2 * x0)]
                                + x[(ch, 2 * y, 2 * x0 + 1)]
                                + x[(ch, 2 * y + 1, 2 * x0)]
                                + x[(ch, 2 * y + 1, 2 * x0 + 1)]);
                    }
                }
            }
            out
        });
        self.unary(out.into_dyn(), Op::AvgPool2(self.idx))
    }

    /// Nearest-neighbor 2x upsampling of a `C x H x W` node.
    pub fn upsample2(&self) -> Var<'t> {
        let out = self.tape.with_nodes(|n| {
            let x = n[self.idx].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let (c, h, w) = x.dim();
            let mut out = Array3::<f64>::zeros((c, 2 * h, 2 * w));
            for ch in 0..c {
                for y in 0..2 * h {
                    for x0 in 0..2 * w {
                        out[(ch, y, x0)] = x[(ch, y / 2, x0 / 2)];
                    }
                }
            }
            out
        });
        self.unary(out.into_dyn(), Op::Upsample2(self.idx))
    }

    /// Concatenation along the channel axis of two `C x H x W` nodes.
    pub fn concat_channels(&self, other: Var<'t>) -> Var<'t> {
        let v = self.tape.with_nodes(|n| {
            let a = n[self.idx].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let b = n[other.idx].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            ndarray::concatenate(Axis(0), &[a, b]).unwrap()
        });
        self.binary(other, v.into_dyn(), Op::ConcatC(self.idx, other.idx))
    }

    /// Layout change `C x H x W` -> `H x W x C` (for handing logits to the
    /// losses).
    pub fn chw_to_hwc(&self) -> Var<'t> {
        let v = self.tape.with_nodes(|n| {
            let x = n[self.idx].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            x.permuted_axes([1, 2, 0]).as_standard_layout().into_owned()
        });
        self.unary(v.into_dyn(), Op::ChwToHwc(self.idx))
    }
}

fn bilinear(
    p: &ndarray::ArrayView3<'_, f64>,
    cost: &Array2<f64>,
    a: (usize, usize),
    b: (usize, usize),
    k: usize,
) -> f64 {
    let mut total = 0.0;
    for r in 0..k {
        let pa = p[(a.0, a.1, r)];
        if pa == 0.0 {
            continue;
        }
        for s in 0..k {
            let c = cost[(r, s)];
            if c != 0.0 {
                total += pa * c * p[(b.0, b.1, s)];
            }
        }
    }
    total
}

/// Outcome of one finite-difference verification.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub step: f64,
    pub worst_index: usize,
    pub tol_rel: f64,
    pub passed: bool,
}

/// Differences below this count as zero-gradient agreement regardless of
/// relative error.
pub const GRADCHECK_ABS_FALLBACK: f64 = 1e-8;

/// Central-difference check of `analytic_grad` against `loss_fn` around
/// `point`. `loss_fn` must be deterministic; two evaluations at the base
/// point are compared bitwise to verify that.
pub fn finite_diff_check(
    loss_fn: impl Fn(&[f64]) -> f64,
    analytic_grad: &[f64],
    point: &[f64],
    h: f64,
    tol_rel: f64,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(Error::Config(format!("step h must be positive, got {h}")));
    }
    if analytic_grad.len() != point.len() {
        return Err(Error::Usage(format!(
            "gradient has {} coordinates, point has {}",
            analytic_grad.len(),
            point.len()
        )));
    }
    let base1 = loss_fn(point);
    let base2 = loss_fn(point);
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::Oracle(format!(
            "loss_fn is not deterministic: {base1} vs {base2} at the same point"
        )));
    }

    let mut x = point.to_vec();
    let mut max_abs = 0.0_f64;
    let mut max_rel = 0.0_f64;
    let mut worst = 0usize;
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = loss_fn(&x);
        x[i] = orig - h;
        let fm = loss_fn(&x);
        x[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let abs_err = (fd - analytic_grad[i]).abs();
        let rel_err = if abs_err <= GRADCHECK_ABS_FALLBACK {
            0.0
        } else {
            abs_err / fd.abs().max(analytic_grad[i].abs())
        };
        if rel_err > max_rel || (rel_err == max_rel && abs_err > max_abs) {
            worst = i;
        }
        max_abs = max_abs.max(abs_err);
        max_rel = max_rel.max(rel_err);
    }
    Ok(GradCheckReport {
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        step: h,
        worst_index: worst,
        tol_rel,
        passed: max_rel <= tol_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn dyn1(v: &[f64]) -> ArrayD<f64> {
        arr1(v).into_dyn()
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(dyn1(&[3.0]));
        let loss = x.square().sum();
        assert_eq!(loss.scalar_value(), 9.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap()[[0]], 6.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(dyn1(&[1.0, -2.0, 5.0]));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), dyn1(&[1.0, 1.0, 1.0]));
    }

    #[test]
    fn repeated_backward_is_rejected_until_reset() {
        let tape = Tape::new();
        let x = tape.leaf(dyn1(&[2.0]));
        let loss = x.square().sum();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Usage(_))));
        tape.zero_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap()[[0]], 4.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(dyn1(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn softmax_ce_gradient_identity() {
        // d(CE)/d(logits) = p - one_hot for CE of softmax vs a one-hot target.
        let tape = Tape::new();
        let logits = tape.leaf(ndarray::arr3(&[[[0.3, -0.7, 1.1]]]).into_dyn());
        let target = ndarray::arr3(&[[[0.0, 1.0, 0.0]]]).into_dyn();
        let probs = logits.softmax();
        let ce = probs
            .ln_clamped(crate::model::PROB_CLAMP_MIN, 1.0)
            .mul_const(Arc::new(target.clone()))
            .sum()
            .neg();
        tape.backward(ce).unwrap();
        let g = tape.grad(logits).unwrap();
        let p = probs.value();
        for c in 0..3 {
            let expected = p[[0, 0, c]] - target[[0, 0, c]];
            assert!((g[[0, 0, c]] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(dyn1(&[0.4, -1.2, 2.0]));
        let a = x.square().sum();
        let b = x.relu().sum();
        let combined = a.add(b);
        tape.backward(combined).unwrap();
        let g_combined = tape.grad(x).unwrap();

        let tape_a = Tape::new();
        let xa = tape_a.leaf(dyn1(&[0.4, -1.2, 2.0]));
        tape_a.backward(xa.square().sum()).unwrap();
        let tape_b = Tape::new();
        let xb = tape_b.leaf(dyn1(&[0.4, -1.2, 2.0]));
        tape_b.backward(xb.relu().sum()).unwrap();
        let expected = tape_a.grad(xa).unwrap() + tape_b.grad(xb).unwrap();
        assert_eq!(g_combined, expected);
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let point = [1.0, -2.0, 0.5];
        let grad: Vec<f64> = point.iter().map(|x| 2.0 * x).collect();
        let report = finite_diff_check(
            |x| x.iter().map(|v| v * v).sum(),
            &grad,
            &point,
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(report.passed, "max_rel_error = {}", report.max_rel_error);
        assert!(report.max_rel_error < 1e-7);
    }

    #[test]
    fn finite_diff_detects_wrong_gradient() {
        let point = [1.0, 2.0];
        let wrong = [2.0, 1.0];
        let report =
            finite_diff_check(|x| x.iter().map(|v| v * v).sum(), &wrong, &point, 1e-5, 1e-4)
                .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn finite_diff_rejects_nondeterminism() {
        use std::cell::Cell;
        let counter = Cell::new(0.0);
        let err = finite_diff_check(
            |_| {
                counter.set(counter.get() + 1.0);
                counter.get()
            },
            &[0.0],
            &[1.0],
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
    }

    #[test]
    fn nan_in_backward_is_reported() {
        let tape = Tape::new();
        let x = tape.leaf(dyn1(&[-1.0]));
        // ln of a negative value clamped to the floor gives a finite value,
        // so force a NaN through 0 * inf instead.
        let inf = tape.constant(dyn1(&[f64::INFINITY]));
        let zero = tape.constant(dyn1(&[0.0]));
        let nan = inf.mul(zero); // value NaN
        let loss = x.mul(nan).sum();
        let result = tape.backward(loss);
        assert!(matches!(result, Err(Error::Numeric(_))));
    }

    #[test]
    fn conv2d_matches_hand_computation() {
        let tape = Tape::new();
        // 1x2x2 input, 1x1x1x1 weight = 2, bias = 1: out = 2x + 1.
        let x = tape.leaf(ndarray::arr3(&[[[1.0, 2.0], [3.0, 4.0]]]).into_dyn());
        let w = tape.leaf(ndarray::Array4::from_elem((1, 1, 1, 1), 2.0).into_dyn());
        let b = tape.leaf(arr1(&[1.0]).into_dyn());
        let y = x.conv2d(w, b);
        assert_eq!(
            y.value(),
            ndarray::arr3(&[[[3.0, 5.0], [7.0, 9.0]]]).into_dyn()
        );
        let loss = y.sum();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap()[[0]], 4.0);
        assert_eq!(tape.grad(w).unwrap()[[0, 0, 0, 0]], 10.0);
        assert_eq!(
            tape.grad(x).unwrap(),
            ndarray::arr3(&[[[2.0, 2.0], [2.0, 2.0]]]).into_dyn()
        );
    }

    #[test]
    fn conv2d_3x3_matches_direct_convolution() {
        // Cross-check the row kernels against a straightforward quadruple
        // loop on a random-ish instance, values and input gradient both.
        let (cin, cout, h, w) = (2, 3, 5, 4);
        let x = Array3::from_shape_fn((cin, h, w), |(c, y, x)| {
            ((c * 31 + y * 7 + x * 3) % 13) as f64 * 0.17 - 0.7
        });
        let wt = Array4::from_shape_fn((cout, cin, 3, 3), |(o, i, dy, dx)| {
            ((o * 17 + i * 11 + dy * 5 + dx * 2) % 9) as f64 * 0.21 - 0.8
        });
        let b = Array1::from_shape_fn(cout, |o| o as f64 * 0.3 - 0.2);

        let mut expected = Array3::<f64>::zeros((cout, h, w));
        for o in 0..cout {
            for y in 0..h {
                for x0 in 0..w {
                    let mut acc = b[o];
                    for i in 0..cin {
                        for dy in 0..3usize {
                            for dx in 0..3usize {
                                let yy = y as isize + dy as isize - 1;
                                let xx = x0 as isize + dx as isize - 1;
                                if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                                    acc += x[(i, yy as usize, xx as usize)] * wt[(o, i, dy, dx)];
                                }
                            }
                        }
                    }
                    expected[(o, y, x0)] = acc;
                }
            }
        }

        let tape = Tape::new();
        let xv = tape.leaf(x.clone().into_dyn());
        let wv = tape.leaf(wt.clone().into_dyn());
        let bv = tape.leaf(b.clone().into_dyn());
        let out = xv.conv2d(wv, bv);
        let out_val = out.value();
        for (a, e) in out_val.iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-12);
        }

        // Gradient check via finite differences on a scalar readout.
        let loss = out.square().sum();
        tape.backward(loss).unwrap();
        let gx = tape.grad(xv).unwrap();
        let point: Vec<f64> = x.iter().copied().collect();
        let grad: Vec<f64> = gx.iter().copied().collect();
        let report = finite_diff_check(
            |flat| {
                let xi = Array3::from_shape_vec((cin, h, w), flat.to_vec()).unwrap();
                let t = Tape::new();
                let xv = t.leaf(xi.into_dyn());
                let wv = t.constant(wt.clone().into_dyn());
                let bv = t.constant(b.clone().into_dyn());
                xv.conv2d(wv, bv).square().sum().scalar_value()
            },
            &grad,
            &point,
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "max_rel_error = {}", report.max_rel_error);
    }

    #[test]
    fn pool_and_upsample_round_trip_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(ndarray::Array3::from_shape_fn((1, 4, 4), |(_, i, j)| (i * 4 + j) as f64).into_dyn());
        let loss = x.avg_pool2().upsample2().sum();
        tape.backward(loss).unwrap();
        // Every input pixel contributes 0.25 to each of the 4 upsampled
        // copies of its pooled cell.
        let g = tape.grad(x).unwrap();
        assert!(g.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }
}
