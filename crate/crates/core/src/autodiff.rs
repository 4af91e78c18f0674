//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape. Every op pushes a node holding its
//! value and, when any input is tracked, a closure mapping the output
//! gradient to input gradients. Untracked subgraphs (constants, frozen
//! parameters) carry no closures and cost nothing at backward time.
//!
//! Spatial tensors use channels-last layout: `(N, H, W, C)` or `(H, W, C)`.

use std::cell::RefCell;
use std::ops::Range;
use std::rc::Rc;

use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    tracked: bool,
}

/// Rectangular read from a `(H, W, C)` source, in source coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub top: i64,
    pub left: i64,
    pub height: usize,
    pub width: usize,
}

/// One patch read: which source (index into the `sources` slice) and where.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchRequest {
    pub source: usize,
    pub top: i64,
    pub left: i64,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    reads: RefCell<Vec<(usize, Window)>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence the loss.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(Rc::new(value), Vec::new(), None, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(Rc::new(value), Vec::new(), None, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every window read from `source` through [`Graph::patches`].
    pub fn reads_of(&self, source: Var<'_>) -> Vec<Window> {
        self.reads
            .borrow()
            .iter()
            .filter(|(id, _)| *id == source.id)
            .map(|(_, w)| *w)
            .collect()
    }

    fn push_raw(
        &self,
        value: Rc<Tensor>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        tracked: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward: if tracked { backward } else { None },
            tracked,
        });
        Var { graph: self, id }
    }

    fn push<'g>(&'g self, value: Tensor, parents: &[Var<'g>], backward: BackwardFn) -> Var<'g> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let tracked = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].tracked)
        };
        self.push_raw(Rc::new(value), ids, Some(backward), tracked)
    }

    fn is_tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        if !nodes[loss.id].tracked {
            return Grads { grads };
        }
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let parent_grads = backward(&grad);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].tracked {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            // leaves keep their gradient; interior gradients are consumed
            if node.parents.is_empty() {
                grads[id] = Some(grad);
            }
        }
        Grads { grads }
    }
}

/// `c = a * b` (+ `c` when `accumulate`) for row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices sized for the given dims and strides.
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
            if accumulate { 1.0 } else { 0.0 },
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

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let k = self.kh * self.kw * self.c;
        let mut cols = vec![0.0; self.n * self.ho * self.wo * k];
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = ((b * self.ho + oy) * self.wo + ox) * k;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
                        if iy < 0 || iy >= self.h as i64 {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as i64 - self.pad as i64;
                            if ix < 0 || ix >= self.w as i64 {
                                continue;
                            }
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.c;
                            let dst = row + (ky * self.kw + kx) * self.c;
                            cols[dst..dst + self.c].copy_from_slice(&x[src..src + self.c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let k = self.kh * self.kw * self.c;
        let mut x = vec![0.0; self.n * self.h * self.w * self.c];
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = ((b * self.ho + oy) * self.wo + ox) * k;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
                        if iy < 0 || iy >= self.h as i64 {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as i64 - self.pad as i64;
                            if ix < 0 || ix >= self.w as i64 {
                                continue;
                            }
                            let dst = ((b * self.h + iy as usize) * self.w + ix as usize) * self.c;
                            let src = row + (ky * self.kw + kx) * self.c;
                            for ch in 0..self.c {
                                x[dst + ch] += cols[src + ch];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Per-axis linear interpolation taps, `align_corners = false`.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

fn resize_forward(
    x: &[f64],
    (n, h, w, c): (usize, usize, usize, usize),
    ty: &[(usize, usize, f64)],
    tx: &[(usize, usize, f64)],
) -> Vec<f64> {
    let (ho, wo) = (ty.len(), tx.len());
    let mut out = vec![0.0; n * ho * wo * c];
    for b in 0..n {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let o = ((b * ho + oy) * wo + ox) * c;
                let taps = [
                    (y0, x0, (1.0 - ly) * (1.0 - lx)),
                    (y0, x1, (1.0 - ly) * lx),
                    (y1, x0, ly * (1.0 - lx)),
                    (y1, x1, ly * lx),
                ];
                for (yy, xx, wt) in taps {
                    let s = ((b * h + yy) * w + xx) * c;
                    for ch in 0..c {
                        out[o + ch] += wt * x[s + ch];
                    }
                }
            }
        }
    }
    out
}

fn resize_backward(
    g: &[f64],
    (n, h, w, c): (usize, usize, usize, usize),
    ty: &[(usize, usize, f64)],
    tx: &[(usize, usize, f64)],
) -> Vec<f64> {
    let (ho, wo) = (ty.len(), tx.len());
    let mut dx = vec![0.0; n * h * w * c];
    for b in 0..n {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let o = ((b * ho + oy) * wo + ox) * c;
                let taps = [
                    (y0, x0, (1.0 - ly) * (1.0 - lx)),
                    (y0, x1, (1.0 - ly) * lx),
                    (y1, x0, ly * (1.0 - lx)),
                    (y1, x1, ly * lx),
                ];
                for (yy, xx, wt) in taps {
                    let s = ((b * h + yy) * w + xx) * c;
                    for ch in 0..c {
                        dx[s + ch] += wt * g[o + ch];
                    }
                }
            }
        }
    }
    dx
}

type Taps = Vec<(i64, i64, f64)>;

/// Nonzero taps of a 3x3 stencil as `(dy, dx, weight)` offsets from the center.
fn stencil_taps(kernel: &[[f64; 3]; 3]) -> Taps {
    let mut taps = Vec::new();
    for (r, row) in kernel.iter().enumerate() {
        for (c, &k) in row.iter().enumerate() {
            if k != 0.0 {
                taps.push((r as i64 - 1, c as i64 - 1, k));
            }
        }
    }
    taps
}

/// Output positions where every nonzero tap lands inside an `h x w` grid.
fn stencil_valid_range(taps: &[(i64, i64, f64)], h: usize, w: usize) -> (Range<i64>, Range<i64>) {
    let (mut y_lo, mut y_hi, mut x_lo, mut x_hi) = (0i64, h as i64, 0i64, w as i64);
    for &(dy, dx, _) in taps {
        y_lo = y_lo.max(-dy);
        y_hi = y_hi.min(h as i64 - dy);
        x_lo = x_lo.max(-dx);
        x_hi = x_hi.min(w as i64 - dx);
    }
    (y_lo..y_hi.max(y_lo), x_lo..x_hi.max(x_lo))
}

#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.graph.is_tracked(self.id)
    }

    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let (xc, yc) = (x.clone(), y.clone());
        let out = (*y).clone();
        self.graph.push(
            out,
            &[self],
            Box::new(move |g| {
                let mut d = g.clone();
                for ((dv, &xv), &yv) in d.data_mut().iter_mut().zip(xc.data()).zip(yc.data()) {
                    *dv *= df(xv, yv);
                }
                vec![Some(d)]
            }),
        )
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(f64::abs, |x, _| x.signum() * (x != 0.0) as u8 as f64)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(self) -> Var<'g> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        self.unary(move |x| s * x, move |_, _| s)
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        self.graph.push(
            a.zip_map(&b, |x, y| x + y),
            &[self, other],
            Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        self.graph.push(
            a.zip_map(&b, |x, y| x - y),
            &[self, other],
            Box::new(|g| vec![Some(g.clone()), Some(g.map(|x| -x))]),
        )
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        self.graph.push(
            a.zip_map(&b, |x, y| x * y),
            &[self, other],
            Box::new(move |g| vec![Some(g.zip_map(&b, |d, y| d * y)), Some(g.zip_map(&a, |d, x| d * x))]),
        )
    }

    /// `self - target` for a constant target.
    pub fn sub_const(self, target: &Tensor) -> Var<'g> {
        let a = self.value();
        assert_eq!(a.shape(), target.shape(), "sub_const: shape mismatch");
        self.graph.push(
            a.zip_map(target, |x, y| x - y),
            &[self],
            Box::new(|g| vec![Some(g.clone())]),
        )
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(self, factor: &Tensor) -> Var<'g> {
        let a = self.value();
        assert_eq!(a.shape(), factor.shape(), "mul_const: shape mismatch");
        let f = factor.clone();
        self.graph.push(
            a.zip_map(factor, |x, y| x * y),
            &[self],
            Box::new(move |g| vec![Some(g.zip_map(&f, |d, y| d * y))]),
        )
    }

    pub fn sum(self) -> Var<'g> {
        let a = self.value();
        let shape = a.shape().to_vec();
        self.graph.push(
            Tensor::scalar(a.sum()),
            &[self],
            Box::new(move |g| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let a = self.value();
        let old = a.shape().to_vec();
        let out = (*a).clone().reshape(shape).expect("reshape: element count mismatch");
        self.graph.push(
            out,
            &[self],
            Box::new(move |g| vec![Some(g.clone().with_shape(&old))]),
        )
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert!(a.ndim() == 2 && b.ndim() == 2, "matmul needs rank-2 operands");
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), &mut out, false);
        let (need_a, need_b) = (self.is_tracked(), other.is_tracked());
        self.graph.push(
            Tensor::from_vec(&[m, n], out).expect("matmul shape"),
            &[self, other],
            Box::new(move |g| {
                let da = need_a.then(|| {
                    let mut d = vec![0.0; m * k];
                    // g (m,n) * b^T (n,k)
                    gemm(m, n, k, g.data(), (n as isize, 1), b.data(), (1, n as isize), &mut d, false);
                    Tensor::from_vec(&[m, k], d).expect("matmul grad")
                });
                let db = need_b.then(|| {
                    let mut d = vec![0.0; k * n];
                    // a^T (k,m) * g (m,n)
                    gemm(k, m, n, a.data(), (1, k as isize), g.data(), (n as isize, 1), &mut d, false);
                    Tensor::from_vec(&[k, n], d).expect("matmul grad")
                });
                vec![da, db]
            }),
        )
    }

    /// Adds a `(K,)` row vector to every row of an `(M, K)` matrix.
    pub fn add_row(self, bias: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), bias.value());
        let k = *a.shape().last().expect("add_row on scalar");
        assert_eq!(b.len(), k, "add_row: bias length");
        let mut out = (*a).clone();
        for row in out.data_mut().chunks_mut(k) {
            for (x, y) in row.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        let bshape = b.shape().to_vec();
        self.graph.push(
            out,
            &[self, bias],
            Box::new(move |g| {
                let mut db = vec![0.0; k];
                for row in g.data().chunks(k) {
                    for (d, x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                vec![Some(g.clone()), Some(Tensor::from_vec(&bshape, db).expect("bias grad"))]
            }),
        )
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].shape()[0];
        let widths: Vec<usize> = values
            .iter()
            .map(|v| {
                assert_eq!(v.ndim(), 2, "concat_cols needs rank-2 parts");
                assert_eq!(v.shape()[0], rows, "concat_cols: row mismatch");
                v.shape()[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = r * total;
            for (v, &w) in values.iter().zip(&widths) {
                out[off..off + w].copy_from_slice(&v.data()[r * w..(r + 1) * w]);
                off += w;
            }
        }
        parts[0].graph.push(
            Tensor::from_vec(&[rows, total], out).expect("concat"),
            parts,
            Box::new(move |g| {
                let mut grads = Vec::with_capacity(widths.len());
                let mut start = 0;
                for &w in &widths {
                    let mut d = vec![0.0; rows * w];
                    for r in 0..rows {
                        let src = r * total + start;
                        d[r * w..(r + 1) * w].copy_from_slice(&g.data()[src..src + w]);
                    }
                    grads.push(Some(Tensor::from_vec(&[rows, w], d).expect("concat grad")));
                    start += w;
                }
                grads
            }),
        )
    }

    /// Columns `range` of a rank-2 tensor.
    pub fn slice_cols(self, range: Range<usize>) -> Var<'g> {
        let a = self.value();
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        assert!(range.end <= cols && range.start <= range.end);
        let w = range.len();
        let mut out = vec![0.0; rows * w];
        for r in 0..rows {
            out[r * w..(r + 1) * w].copy_from_slice(&a.data()[r * cols + range.start..r * cols + range.end]);
        }
        self.graph.push(
            Tensor::from_vec(&[rows, w], out).expect("slice"),
            &[self],
            Box::new(move |g| {
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + range.start..r * cols + range.end]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                vec![Some(Tensor::from_vec(&[rows, cols], d).expect("slice grad"))]
            }),
        )
    }

    /// Rows `index` of a rank-2 tensor (repeats allowed).
    pub fn gather_rows(self, index: &[usize]) -> Var<'g> {
        let a = self.value();
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![0.0; index.len() * cols];
        for (o, &i) in index.iter().enumerate() {
            out[o * cols..(o + 1) * cols].copy_from_slice(&a.data()[i * cols..(i + 1) * cols]);
        }
        let index = index.to_vec();
        self.graph.push(
            Tensor::from_vec(&[index.len(), cols], out).expect("gather"),
            &[self],
            Box::new(move |g| {
                let mut d = vec![0.0; rows * cols];
                for (o, &i) in index.iter().enumerate() {
                    for c in 0..cols {
                        d[i * cols + c] += g.data()[o * cols + c];
                    }
                }
                vec![Some(Tensor::from_vec(&[rows, cols], d).expect("gather grad"))]
            }),
        )
    }

    /// Columnwise max over each row range; an empty range yields a zero row.
    pub fn segment_max(self, segments: &[Range<usize>]) -> Var<'g> {
        let a = self.value();
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![0.0; segments.len() * cols];
        let mut argmax = vec![usize::MAX; segments.len() * cols];
        for (s, seg) in segments.iter().enumerate() {
            for c in 0..cols {
                let mut best = f64::NEG_INFINITY;
                for r in seg.clone() {
                    let v = a.data()[r * cols + c];
                    if v > best {
                        best = v;
                        argmax[s * cols + c] = r;
                    }
                }
                if argmax[s * cols + c] != usize::MAX {
                    out[s * cols + c] = best;
                }
            }
        }
        self.graph.push(
            Tensor::from_vec(&[segments.len(), cols], out).expect("segment_max"),
            &[self],
            Box::new(move |g| {
                let mut d = vec![0.0; rows * cols];
                for (o, &r) in argmax.iter().enumerate() {
                    if r != usize::MAX {
                        d[r * cols + o % cols] += g.data()[o];
                    }
                }
                vec![Some(Tensor::from_vec(&[rows, cols], d).expect("segment_max grad"))]
            }),
        )
    }

    /// 2-D convolution (cross-correlation), `x: (N,H,W,C)`, `w: (KH,KW,C,CO)`.
    pub fn conv2d(self, weight: Var<'g>, stride: usize, pad: usize) -> Var<'g> {
        let (x, w) = (self.value(), weight.value());
        assert_eq!(x.ndim(), 4, "conv2d input must be (N,H,W,C)");
        assert_eq!(w.ndim(), 4, "conv2d weight must be (KH,KW,C,CO)");
        let (n, h, wd, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kh, kw, c2, co) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        assert_eq!(c, c2, "conv2d channel mismatch");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d kernel larger than input");
        let geom = ConvGeom {
            n,
            h,
            w: wd,
            c,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let rows = n * geom.ho * geom.wo;
        let k = kh * kw * c;
        let cols: Rc<Vec<f64>> = if geom.is_pointwise() {
            Rc::new(x.data().to_vec())
        } else {
            Rc::new(geom.im2col(x.data()))
        };
        let mut out = vec![0.0; rows * co];
        gemm(rows, k, co, &cols, (k as isize, 1), w.data(), (co as isize, 1), &mut out, false);
        let out_shape = [n, geom.ho, geom.wo, co];
        let (need_x, need_w) = (self.is_tracked(), weight.is_tracked());
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        self.graph.push(
            Tensor::from_vec(&out_shape, out).expect("conv2d"),
            &[self, weight],
            Box::new(move |g| {
                let dx = need_x.then(|| {
                    let mut dcols = vec![0.0; rows * k];
                    gemm(rows, co, k, g.data(), (co as isize, 1), w.data(), (1, co as isize), &mut dcols, false);
                    let data = if geom.is_pointwise() { dcols } else { geom.col2im(&dcols) };
                    Tensor::from_vec(&xs, data).expect("conv2d dx")
                });
                let dw = need_w.then(|| {
                    let mut d = vec![0.0; k * co];
                    gemm(k, rows, co, &cols, (1, k as isize), g.data(), (co as isize, 1), &mut d, false);
                    Tensor::from_vec(&ws, d).expect("conv2d dw")
                });
                vec![dx, dw]
            }),
        )
    }

    /// Adds a per-channel bias to a channels-last tensor of any rank.
    pub fn add_channel_bias(self, bias: Var<'g>) -> Var<'g> {
        self.add_row(bias)
    }

    /// Max pooling over `(N,H,W,C)`; padded cells never win.
    pub fn max_pool2d(self, kernel: usize, stride: usize, pad: usize) -> Var<'g> {
        let x = self.value();
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let mut out = vec![0.0; n * ho * wo * c];
        let mut arg = vec![0usize; n * ho * wo * c];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if ix < 0 || ix >= w as i64 {
                                    continue;
                                }
                                let i = ((b * h + iy as usize) * w + ix as usize) * c + ch;
                                if x.data()[i] > best {
                                    best = x.data()[i];
                                    best_i = i;
                                }
                            }
                        }
                        let o = ((b * ho + oy) * wo + ox) * c + ch;
                        out[o] = best;
                        arg[o] = best_i;
                    }
                }
            }
        }
        let xs = x.shape().to_vec();
        let len = x.len();
        self.graph.push(
            Tensor::from_vec(&[n, ho, wo, c], out).expect("max_pool2d"),
            &[self],
            Box::new(move |g| {
                let mut d = vec![0.0; len];
                for (o, &i) in arg.iter().enumerate() {
                    d[i] += g.data()[o];
                }
                vec![Some(Tensor::from_vec(&xs, d).expect("max_pool2d grad"))]
            }),
        )
    }

    /// Bilinear resize of `(N,H,W,C)` to `(N,out_h,out_w,C)`, half-pixel centers.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Var<'g> {
        let x = self.value();
        let dims = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let ty = bilinear_taps(dims.1, out_h);
        let tx = bilinear_taps(dims.2, out_w);
        let out = resize_forward(x.data(), dims, &ty, &tx);
        let xs = x.shape().to_vec();
        self.graph.push(
            Tensor::from_vec(&[dims.0, out_h, out_w, dims.3], out).expect("resize"),
            &[self],
            Box::new(move |g| {
                let d = resize_backward(g.data(), dims, &ty, &tx);
                vec![Some(Tensor::from_vec(&xs, d).expect("resize grad"))]
            }),
        )
    }

    /// Reads fixed-size windows from `(H,W,C)` sources into `(N, ph, pw, C)`.
    ///
    /// Cells outside a source read as zero and receive no gradient. Every
    /// window is recorded on the graph, see [`Graph::reads_of`].
    pub fn patches(sources: &[Var<'g>], requests: &[PatchRequest], ph: usize, pw: usize) -> Var<'g> {
        assert!(!sources.is_empty(), "patches needs a source");
        let graph = sources[0].graph;
        let values: Vec<Rc<Tensor>> = sources.iter().map(|s| s.value()).collect();
        let c = values[0].shape()[2];
        for v in &values {
            assert_eq!(v.ndim(), 3, "patch source must be (H,W,C)");
            assert_eq!(v.shape()[2], c, "patch sources must share channels");
        }
        let n = requests.len();
        let mut out = vec![0.0; n * ph * pw * c];
        {
            let mut reads = graph.reads.borrow_mut();
            for (i, req) in requests.iter().enumerate() {
                let src = &values[req.source];
                let (h, w) = (src.shape()[0] as i64, src.shape()[1] as i64);
                reads.push((
                    sources[req.source].id,
                    Window { top: req.top, left: req.left, height: ph, width: pw },
                ));
                for py in 0..ph {
                    let y = req.top + py as i64;
                    if y < 0 || y >= h {
                        continue;
                    }
                    for px in 0..pw {
                        let x = req.left + px as i64;
                        if x < 0 || x >= w {
                            continue;
                        }
                        let s = ((y * w + x) as usize) * c;
                        let o = ((i * ph + py) * pw + px) * c;
                        out[o..o + c].copy_from_slice(&src.data()[s..s + c]);
                    }
                }
            }
        }
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let tracked: Vec<bool> = sources.iter().map(|s| s.is_tracked()).collect();
        let requests = requests.to_vec();
        graph.push(
            Tensor::from_vec(&[n, ph, pw, c], out).expect("patches"),
            sources,
            Box::new(move |g| {
                let mut grads: Vec<Option<Tensor>> = shapes
                    .iter()
                    .zip(&tracked)
                    .map(|(s, &t)| t.then(|| Tensor::zeros(s)))
                    .collect();
                for (i, req) in requests.iter().enumerate() {
                    let Some(dst) = grads[req.source].as_mut() else { continue };
                    let (h, w) = (shapes[req.source][0] as i64, shapes[req.source][1] as i64);
                    let dd = dst.data_mut();
                    for py in 0..ph {
                        let y = req.top + py as i64;
                        if y < 0 || y >= h {
                            continue;
                        }
                        for px in 0..pw {
                            let x = req.left + px as i64;
                            if x < 0 || x >= w {
                                continue;
                            }
                            let s = ((y * w + x) as usize) * c;
                            let o = ((i * ph + py) * pw + px) * c;
                            for ch in 0..c {
                                dd[s + ch] += g.data()[o + ch];
                            }
                        }
                    }
                }
                grads
            }),
        )
    }

    /// Sum of absolute 3x3 stencil responses over `(N,H,W,C)`.
    ///
    /// Responses are evaluated only where every nonzero tap is inside the
    /// grid, so no padding enters the sum.
    pub fn stencil_l1(self, kernels: &[[[f64; 3]; 3]]) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.ndim(), 4, "stencil_l1 input must be (N,H,W,C)");
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let taps: Vec<Taps> = kernels.iter().map(stencil_taps).collect();
        let idx = move |b: usize, y: i64, xx: i64, ch: usize| ((b * h + y as usize) * w + xx as usize) * c + ch;
        let mut total = 0.0;
        let mut signs: Vec<(Taps, Vec<f64>)> = Vec::new();
        for t in &taps {
            let (ry, rx) = stencil_valid_range(t, h, w);
            let mut s = Vec::with_capacity(n * ry.clone().count() * rx.clone().count() * c);
            for b in 0..n {
                for y in ry.clone() {
                    for xx in rx.clone() {
                        for ch in 0..c {
                            let r: f64 = t.iter().map(|&(dy, dx, k)| k * x.data()[idx(b, y + dy, xx + dx, ch)]).sum();
                            total += r.abs();
                            s.push(r.signum() * (r != 0.0) as u8 as f64);
                        }
                    }
                }
            }
            signs.push((t.clone(), s));
        }
        let xs = x.shape().to_vec();
        self.graph.push(
            Tensor::scalar(total),
            &[self],
            Box::new(move |g| {
                let gv = g.item();
                let mut d = Tensor::zeros(&xs);
                let dd = d.data_mut();
                for (t, s) in &signs {
                    let (ry, rx) = stencil_valid_range(t, h, w);
                    let mut it = s.iter();
                    for b in 0..n {
                        for y in ry.clone() {
                            for xx in rx.clone() {
                                for ch in 0..c {
                                    let sg = *it.next().expect("sign count");
                                    if sg == 0.0 {
                                        continue;
                                    }
                                    for &(dy, dx, k) in t {
                                        dd[idx(b, y + dy, xx + dx, ch)] += gv * sg * k;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Fused LSTM cell. `gates` is `(N, 4d)` pre-activations ordered
    /// input, forget, candidate, output; returns `(N, 2d)` as `[h | c]`.
    pub fn lstm_cell(gates: Var<'g>, cell: Var<'g>) -> Var<'g> {
        let (gv, cv) = (gates.value(), cell.value());
        let (n, d4) = (gv.shape()[0], gv.shape()[1]);
        let d = d4 / 4;
        assert_eq!(cv.shape(), &[n, d], "lstm_cell: cell shape");
        let mut act = vec![0.0; n * d4];
        let mut out = vec![0.0; n * 2 * d];
        for r in 0..n {
            for j in 0..d {
                let pre = |q: usize| gv.data()[r * d4 + q * d + j];
                let (i, f, gg, o) = (sigmoid(pre(0)), sigmoid(pre(1)), pre(2).tanh(), sigmoid(pre(3)));
                let c_new = f * cv.data()[r * d + j] + i * gg;
                out[r * 2 * d + j] = o * c_new.tanh();
                out[r * 2 * d + d + j] = c_new;
                act[r * d4 + j] = i;
                act[r * d4 + d + j] = f;
                act[r * d4 + 2 * d + j] = gg;
                act[r * d4 + 3 * d + j] = o;
            }
        }
        let out_t = Tensor::from_vec(&[n, 2 * d], out).expect("lstm");
        let c_new: Vec<f64> = (0..n * d).map(|q| out_t.data()[(q / d) * 2 * d + d + q % d]).collect();
        gates.graph.push(
            out_t,
            &[gates, cell],
            Box::new(move |g| {
                let mut dgates = vec![0.0; n * d4];
                let mut dcell = vec![0.0; n * d];
                for r in 0..n {
                    for j in 0..d {
                        let a = |q: usize| act[r * d4 + q * d + j];
                        let (i, f, gg, o) = (a(0), a(1), a(2), a(3));
                        let c = c_new[r * d + j];
                        let tc = c.tanh();
                        let dh = g.data()[r * 2 * d + j];
                        let dc = g.data()[r * 2 * d + d + j] + dh * o * (1.0 - tc * tc);
                        let c_prev = cv.data()[r * d + j];
                        dgates[r * d4 + j] = dc * gg * i * (1.0 - i);
                        dgates[r * d4 + d + j] = dc * c_prev * f * (1.0 - f);
                        dgates[r * d4 + 2 * d + j] = dc * i * (1.0 - gg * gg);
                        dgates[r * d4 + 3 * d + j] = dh * tc * o * (1.0 - o);
                        dcell[r * d + j] = dc * f;
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[n, d4], dgates).expect("lstm dg")),
                    Some(Tensor::from_vec(&[n, d], dcell).expect("lstm dc")),
                ]
            }),
        )
    }
}

pub mod check {
    //! Central finite-difference gradient checking used across the crate's tests.

    use super::*;

    /// `||a - n|| / max(||a||, ||n||)` over the whole gradient tensor; 0 when both vanish.
    pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let scale = analytic.sq_norm().sqrt().max(numeric.sq_norm().sqrt());
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    /// Analytic and numeric gradient of `f` at each input in `inputs`.
    pub fn gradients(
        inputs: &[Tensor],
        f: impl for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
        step: f64,
    ) -> Vec<(Tensor, Tensor)> {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&g, &vars);
        let grads = g.backward(loss);
        let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
        let eval = |ins: &[Tensor]| {
            let g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            f(&g, &vars).value().item()
        };
        let mut out = Vec::new();
        for (k, a) in analytic.into_iter().enumerate() {
            let mut numeric = Tensor::zeros(inputs[k].shape());
            for i in 0..inputs[k].len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += step;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= step;
                numeric.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * step);
            }
            out.push((a, numeric));
        }
        out
    }

    pub fn assert_grads(
        inputs: &[Tensor],
        f: impl for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
    ) {
        for (k, (a, n)) in gradients(inputs, f, 1e-5).iter().enumerate() {
            let err = relative_error(a, n);
            assert!(err < 1e-6, "input {k}: relative error {err:e}\nanalytic {a:?}\nnumeric {n:?}");
        }
    }
}
