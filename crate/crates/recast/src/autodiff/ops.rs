//! The closed primitive set and its reverse-mode rules.
//!
//! Every operation computes eagerly and records a node when any input is
//! attached to a graph. Broadcasting for binary elementwise ops is
//! rank-preserving: shapes must have equal rank and each axis must match or
//! be 1 on one side.

use std::sync::Arc;

use crate::autodiff::graph::{node_id, record};
use crate::autodiff::tensor::{strides, Tensor};
use crate::error::{Error, Result};

#[derive(Clone)]
pub(crate) struct Saved {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
    pub parent: Option<usize>,
}

impl Saved {
    fn of(t: &Tensor) -> Self {
        Saved {
            shape: t.shape().to_vec(),
            data: t.data_arc(),
            parent: node_id(t),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnKind {
    /// saves output
    Exp,
    /// saves input
    Log,
    /// saves output
    Sqrt,
    /// saves input
    Abs,
    /// saves input
    Swish,
}

pub(crate) enum Op {
    Leaf,
    Binary {
        kind: BinKind,
        a: Saved,
        b: Saved,
        out_shape: Vec<usize>,
    },
    Unary {
        kind: UnKind,
        saved: Arc<Vec<f64>>,
        parent: usize,
    },
    AddScalar {
        parent: usize,
    },
    MulScalar {
        c: f64,
        parent: usize,
    },
    /// y = c - x
    ScalarSub {
        parent: usize,
    },
    Matmul {
        a: Saved,
        b: Saved,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Saved,
        w: Saved,
        bias_parent: Option<usize>,
        out_hw: (usize, usize),
    },
    SumAll {
        in_shape: Vec<usize>,
        parent: usize,
        scale: f64,
    },
    SumLast {
        in_shape: Vec<usize>,
        parent: usize,
        scale: f64,
    },
    Reshape {
        in_shape: Vec<usize>,
        parent: usize,
    },
    BroadcastTo {
        in_shape: Vec<usize>,
        out_shape: Vec<usize>,
        parent: usize,
    },
    Concat {
        axis: usize,
        parts: Vec<Saved>,
        out_shape: Vec<usize>,
    },
    GatherRows {
        in_shape: Vec<usize>,
        indices: Vec<usize>,
        parent: usize,
    },
    AvgPool2 {
        in_shape: Vec<usize>,
        parent: usize,
    },
    Upsample2 {
        in_shape: Vec<usize>,
        parent: usize,
    },
}

// ---------------------------------------------------------------------------
// broadcasting helpers
// ---------------------------------------------------------------------------

fn bcast_out_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("rank mismatch: {:?} vs {:?}", a, b),
        });
    }
    a.iter()
        .zip(b.iter())
        .map(|(&da, &db)| {
            if da == db || da == 1 || db == 1 {
                Ok(da.max(db))
            } else {
                Err(Error::ShapeMismatch {
                    op,
                    detail: format!("incompatible dims: {:?} vs {:?}", a, b),
                })
            }
        })
        .collect()
}

/// Strides into `shape` when iterated over `out_shape`, 0 on broadcast axes.
fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(s.iter())
        .zip(out_shape.iter())
        .map(|((&d, &st), &od)| if d == od { st } else { debug_assert_eq!(d, 1); 0 })
        .collect()
}

/// Visit each output element, yielding linear offsets into both operands.
fn zip_bcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out_shape.iter().product();
    if out_shape.is_empty() {
        f(0, 0, 0);
        return;
    }
    let sa = bcast_strides(a_shape, out_shape);
    let sb = bcast_strides(b_shape, out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    for io in 0..n {
        f(io, ia, ib);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Sum `g` (laid out as `out_shape`) down to `target_shape`.
fn reduce_to(g: &[f64], out_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    let tn: usize = target_shape.iter().product();
    let mut out = vec![0.0; tn.max(1)];
    let st = bcast_strides(target_shape, out_shape);
    if out_shape.is_empty() {
        out[0] = g[0];
        return out;
    }
    let mut idx = vec![0usize; out_shape.len()];
    let mut it = 0usize;
    for (io, &gv) in g.iter().enumerate() {
        let _ = io;
        out[it] += gv;
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            it += st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            it -= st[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// backward dispatch
// ---------------------------------------------------------------------------

impl Op {
    /// Vector-Jacobian products: gradient contributions per attached parent.
    pub(crate) fn backward(&self, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let mut out = Vec::new();
        match self {
            Op::Leaf => {}
            Op::Binary { kind, a, b, out_shape } => {
                if a.parent.is_some() {
                    let mut ga = vec![0.0; g.len()];
                    match kind {
                        BinKind::Add | BinKind::Sub => ga.copy_from_slice(g),
                        BinKind::Mul => zip_bcast(out_shape, &a.shape, &b.shape, |io, _, ib| {
                            ga[io] = g[io] * b.data[ib];
                        }),
                        BinKind::Div => zip_bcast(out_shape, &a.shape, &b.shape, |io, _, ib| {
                            ga[io] = g[io] / b.data[ib];
                        }),
                    }
                    out.push((a.parent.unwrap(), reduce_to(&ga, out_shape, &a.shape)));
                }
                if b.parent.is_some() {
                    let mut gb = vec![0.0; g.len()];
                    match kind {
                        BinKind::Add => gb.copy_from_slice(g),
                        BinKind::Sub => {
                            for (o, gv) in gb.iter_mut().zip(g.iter()) {
                                *o = -gv;
                            }
                        }
                        BinKind::Mul => zip_bcast(out_shape, &a.shape, &b.shape, |io, ia, _| {
                            gb[io] = g[io] * a.data[ia];
                        }),
                        BinKind::Div => zip_bcast(out_shape, &a.shape, &b.shape, |io, ia, ib| {
                            gb[io] = -g[io] * a.data[ia] / (b.data[ib] * b.data[ib]);
                        }),
                    }
                    out.push((b.parent.unwrap(), reduce_to(&gb, out_shape, &b.shape)));
                }
            }
            Op::Unary { kind, saved, parent } => {
                let gx: Vec<f64> = match kind {
                    UnKind::Exp => g.iter().zip(saved.iter()).map(|(g, y)| g * y).collect(),
                    UnKind::Log => g.iter().zip(saved.iter()).map(|(g, x)| g / x).collect(),
                    UnKind::Sqrt => g.iter().zip(saved.iter()).map(|(g, y)| 0.5 * g / y).collect(),
                    UnKind::Abs => g
                        .iter()
                        .zip(saved.iter())
                        .map(|(g, x)| if *x >= 0.0 { *g } else { -*g })
                        .collect(),
                    UnKind::Swish => g
                        .iter()
                        .zip(saved.iter())
                        .map(|(g, x)| {
                            let s = sigmoid(*x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect(),
                };
                out.push((*parent, gx));
            }
            Op::AddScalar { parent } => out.push((*parent, g.to_vec())),
            Op::MulScalar { c, parent } => {
                out.push((*parent, g.iter().map(|gv| gv * c).collect()))
            }
            Op::ScalarSub { parent } => out.push((*parent, g.iter().map(|gv| -gv).collect())),
            Op::Matmul { a, b, m, k, n } => {
                if let Some(p) = a.parent {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..*m {
                        for j in 0..*n {
                            let gv = g[i * n + j];
                            for q in 0..*k {
                                ga[i * k + q] += gv * b.data[q * n + j];
                            }
                        }
                    }
                    out.push((p, ga));
                }
                if let Some(p) = b.parent {
                    let mut gb = vec![0.0; k * n];
                    for i in 0..*m {
                        for q in 0..*k {
                            let av = a.data[i * k + q];
                            for j in 0..*n {
                                gb[q * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    out.push((p, gb));
                }
            }
            Op::Conv2d { x, w, bias_parent, out_hw } => {
                let (cin, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
                let (cout, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
                let (oh, ow) = *out_hw;
                let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
                if let Some(p) = x.parent {
                    let mut gx = vec![0.0; cin * h * wd];
                    for o in 0..cout {
                        for i in 0..oh {
                            for j in 0..ow {
                                let gv = g[(o * oh + i) * ow + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for c in 0..cin {
                                    for u in 0..kh {
                                        let xi = (i + u).wrapping_sub(ph);
                                        if xi >= h {
                                            continue;
                                        }
                                        for v in 0..kw {
                                            let xj = (j + v).wrapping_sub(pw);
                                            if xj >= wd {
                                                continue;
                                            }
                                            gx[(c * h + xi) * wd + xj] +=
                                                gv * w.data[((o * cin + c) * kh + u) * kw + v];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    out.push((p, gx));
                }
                if let Some(p) = w.parent {
                    let mut gw = vec![0.0; cout * cin * kh * kw];
                    for o in 0..cout {
                        for c in 0..cin {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let mut acc = 0.0;
                                    for i in 0..oh {
                                        let xi = (i + u).wrapping_sub(ph);
                                        if xi >= h {
                                            continue;
                                        }
                                        for j in 0..ow {
                                            let xj = (j + v).wrapping_sub(pw);
                                            if xj >= wd {
                                                continue;
                                            }
                                            acc += g[(o * oh + i) * ow + j]
                                                * x.data[(c * h + xi) * wd + xj];
                                        }
                                    }
                                    gw[((o * cin + c) * kh + u) * kw + v] = acc;
                                }
                            }
                        }
                    }
                    out.push((p, gw));
                }
                if let Some(p) = bias_parent {
                    let mut gb = vec![0.0; cout];
                    for o in 0..cout {
                        let mut acc = 0.0;
                        for i in 0..oh {
                            for j in 0..ow {
                                acc += g[(o * oh + i) * ow + j];
                            }
                        }
                        gb[o] = acc;
                    }
                    out.push((*p, gb));
                }
            }
            Op::SumAll { in_shape, parent, scale } => {
                let n: usize = in_shape.iter().product();
                out.push((*parent, vec![g[0] * scale; n]));
            }
            Op::SumLast { in_shape, parent, scale } => {
                let m = *in_shape.last().unwrap();
                let rows = in_shape[..in_shape.len() - 1].iter().product::<usize>();
                let mut gx = vec![0.0; rows * m];
                for r in 0..rows {
                    let gv = g[r] * scale;
                    for c in 0..m {
                        gx[r * m + c] = gv;
                    }
                }
                out.push((*parent, gx));
            }
            Op::Reshape { in_shape, parent } => {
                let _ = in_shape;
                out.push((*parent, g.to_vec()));
            }
            Op::BroadcastTo { in_shape, out_shape, parent } => {
                out.push((*parent, reduce_to(g, out_shape, in_shape)));
            }
            Op::Concat { axis, parts, out_shape } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0usize;
                for part in parts {
                    let len_axis = part.shape[*axis];
                    if let Some(p) = part.parent {
                        let mut gp = vec![0.0; part.shape.iter().product()];
                        for r in 0..outer {
                            for a in 0..len_axis {
                                let src = (r * total_axis + offset + a) * inner;
                                let dst = (r * len_axis + a) * inner;
                                gp[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                            }
                        }
                        out.push((p, gp));
                    }
                    offset += len_axis;
                }
            }
            Op::GatherRows { in_shape, indices, parent } => {
                let row: usize = in_shape[1..].iter().product();
                let mut gx = vec![0.0; in_shape.iter().product()];
                for (k, &i) in indices.iter().enumerate() {
                    for c in 0..row {
                        gx[i * row + c] += g[k * row + c];
                    }
                }
                out.push((*parent, gx));
            }
            Op::AvgPool2 { in_shape, parent } => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = g[(ch * oh + i) * ow + j] * 0.25;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    gx[(ch * h + 2 * i + di) * w + 2 * j + dj] = gv;
                                }
                            }
                        }
                    }
                }
                out.push((*parent, gx));
            }
            Op::Upsample2 { in_shape, parent } => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (h * 2, w * 2);
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            gx[(ch * h + i / 2) * w + j / 2] += g[(ch * oh + i) * ow + j];
                        }
                    }
                }
                out.push((*parent, gx));
            }
        }
        out
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

// ---------------------------------------------------------------------------
// forward ops
// ---------------------------------------------------------------------------

impl Tensor {
    fn binary(&self, other: &Tensor, kind: BinKind, name: &'static str) -> Result<Tensor> {
        let out_shape = bcast_out_shape(name, self.shape(), other.shape())?;
        let n: usize = out_shape.iter().product();
        let mut data = vec![0.0; n.max(1)];
        let (a, b) = (self.data(), other.data());
        zip_bcast(&out_shape, self.shape(), other.shape(), |io, ia, ib| {
            data[io] = match kind {
                BinKind::Add => a[ia] + b[ib],
                BinKind::Sub => a[ia] - b[ib],
                BinKind::Mul => a[ia] * b[ib],
                BinKind::Div => a[ia] / b[ib],
            };
        });
        record(
            Op::Binary {
                kind,
                a: Saved::of(self),
                b: Saved::of(other),
                out_shape: out_shape.clone(),
            },
            &[self, other],
            out_shape,
            data,
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Div, "div")
    }

    fn unary(&self, kind: UnKind) -> Result<Tensor> {
        let data: Vec<f64> = match kind {
            UnKind::Exp => self.data().iter().map(|x| x.exp()).collect(),
            UnKind::Log => self.data().iter().map(|x| x.ln()).collect(),
            UnKind::Sqrt => self.data().iter().map(|x| x.sqrt()).collect(),
            UnKind::Abs => self.data().iter().map(|x| x.abs()).collect(),
            UnKind::Swish => self.data().iter().map(|x| x * sigmoid(*x)).collect(),
        };
        let saved = match kind {
            // output-saving kinds
            UnKind::Exp | UnKind::Sqrt => Arc::new(data.clone()),
            UnKind::Log | UnKind::Abs | UnKind::Swish => self.data_arc(),
        };
        let parent = node_id(self);
        record(
            Op::Unary {
                kind,
                saved,
                parent: parent.unwrap_or(0),
            },
            &[self],
            self.shape().to_vec(),
            data,
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(UnKind::Exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary(UnKind::Log)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary(UnKind::Sqrt)
    }

    pub fn abs(&self) -> Result<Tensor> {
        self.unary(UnKind::Abs)
    }

    /// x * sigmoid(x).
    pub fn swish(&self) -> Result<Tensor> {
        self.unary(UnKind::Swish)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|x| x + c).collect();
        record(
            Op::AddScalar {
                parent: node_id(self).unwrap_or(0),
            },
            &[self],
            self.shape().to_vec(),
            data,
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|x| x * c).collect();
        record(
            Op::MulScalar {
                c,
                parent: node_id(self).unwrap_or(0),
            },
            &[self],
            self.shape().to_vec(),
            data,
        )
    }

    /// c - x, elementwise.
    pub fn scalar_sub(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|x| c - x).collect();
        record(
            Op::ScalarSub {
                parent: node_id(self).unwrap_or(0),
            },
            &[self],
            self.shape().to_vec(),
            data,
        )
    }

    /// [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (a, b) = (self.data(), other.data());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for q in 0..k {
                let av = a[i * k + q];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += av * b[q * n + j];
                }
            }
        }
        record(
            Op::Matmul {
                a: Saved::of(self),
                b: Saved::of(other),
                m,
                k,
                n,
            },
            &[self, other],
            vec![m, n],
            data,
        )
    }

    /// 2-D convolution, stride 1, zero padding preserving spatial dims.
    /// self: [Cin,H,W], weight: [Cout,Cin,kh,kw] (odd kernels), bias: [Cout].
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {:?}, weight {:?}", xs, ws),
            });
        }
        let (kh, kw) = (ws[2], ws[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel dims must be odd, got {}x{}", kh, kw),
            });
        }
        if bias.shape() != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias {:?} vs Cout {}", bias.shape(), ws[0]),
            });
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let cout = ws[0];
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let (x, w, b) = (self.data(), weight.data(), bias.data());
        let mut data = vec![0.0; cout * h * wd];
        for o in 0..cout {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for u in 0..kh {
                            let xi = (i + u).wrapping_sub(ph);
                            if xi >= h {
                                continue;
                            }
                            let xrow = (c * h + xi) * wd;
                            let wrow = ((o * cin + c) * kh + u) * kw;
                            for v in 0..kw {
                                let xj = (j + v).wrapping_sub(pw);
                                if xj >= wd {
                                    continue;
                                }
                                acc += w[wrow + v] * x[xrow + xj];
                            }
                        }
                    }
                    data[(o * h + i) * wd + j] = acc;
                }
            }
        }
        record(
            Op::Conv2d {
                x: Saved::of(self),
                w: Saved::of(weight),
                bias_parent: node_id(bias),
                out_hw: (h, wd),
            },
            &[self, weight, bias],
            vec![cout, h, wd],
            data,
        )
    }

    /// Sum of all elements -> rank-0 scalar.
    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        record(
            Op::SumAll {
                in_shape: self.shape().to_vec(),
                parent: node_id(self).unwrap_or(0),
                scale: 1.0,
            },
            &[self],
            vec![],
            vec![s],
        )
    }

    /// Mean of all elements -> rank-0 scalar.
    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        let s: f64 = self.data().iter().sum::<f64>() / n;
        record(
            Op::SumAll {
                in_shape: self.shape().to_vec(),
                parent: node_id(self).unwrap_or(0),
                scale: 1.0 / n,
            },
            &[self],
            vec![],
            vec![s],
        )
    }

    fn reduce_last(&self, mean: bool) -> Result<Tensor> {
        if self.shape().is_empty() {
            return Err(Error::ShapeMismatch {
                op: "sum_last",
                detail: "rank-0 tensor has no last axis".into(),
            });
        }
        let m = *self.shape().last().unwrap();
        let rows: usize = self.shape()[..self.shape().len() - 1].iter().product();
        let scale = if mean { 1.0 / m as f64 } else { 1.0 };
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            data[r] = self.data()[r * m..(r + 1) * m].iter().sum::<f64>() * scale;
        }
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = 1;
        record(
            Op::SumLast {
                in_shape: self.shape().to_vec(),
                parent: node_id(self).unwrap_or(0),
                scale,
            },
            &[self],
            out_shape,
            data,
        )
    }

    /// Sum over the last axis, keeping it as size 1.
    pub fn sum_last(&self) -> Result<Tensor> {
        self.reduce_last(false)
    }

    /// Mean over the last axis, keeping it as size 1.
    pub fn mean_last(&self) -> Result<Tensor> {
        self.reduce_last(true)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(), shape),
            });
        }
        record(
            Op::Reshape {
                in_shape: self.shape().to_vec(),
                parent: node_id(self).unwrap_or(0),
            },
            &[self],
            shape.to_vec(),
            self.data().to_vec(),
        )
    }

    /// Stretch axes of size 1 up to `shape` (same rank).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let out_shape = bcast_out_shape("broadcast_to", self.shape(), shape)?;
        if out_shape != shape {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                detail: format!("{:?} cannot broadcast to {:?}", self.shape(), shape),
            });
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n.max(1)];
        let src = self.data();
        zip_bcast(shape, self.shape(), shape, |io, ia, _| data[io] = src[ia]);
        record(
            Op::BroadcastTo {
                in_shape: self.shape().to_vec(),
                out_shape: shape.to_vec(),
                parent: node_id(self).unwrap_or(0),
            },
            &[self],
            shape.to_vec(),
            data,
        )
    }

    /// Concatenate along `axis`; all other dims must match.
    pub fn concat(axis: usize, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                detail: "no parts".into(),
            });
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(Error::ShapeMismatch {
                op: "concat",
                detail: format!("axis {} out of rank {}", axis, rank),
            });
        }
        let mut out_shape = parts[0].shape().to_vec();
        for p in &parts[1..] {
            if p.shape().len() != rank {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: "rank mismatch across parts".into(),
                });
            }
            for (ax, (&d, &d0)) in p.shape().iter().zip(parts[0].shape().iter()).enumerate() {
                if ax != axis && d != d0 {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        detail: format!("dim {} differs: {} vs {}", ax, d, d0),
                    });
                }
            }
            out_shape[axis] += p.shape()[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total_axis = out_shape[axis];
        let mut data = vec![0.0; out_shape.iter().product()];
        let mut offset = 0usize;
        for p in parts {
            let len_axis = p.shape()[axis];
            for r in 0..outer {
                for a in 0..len_axis {
                    let dst = (r * total_axis + offset + a) * inner;
                    let src = (r * len_axis + a) * inner;
                    data[dst..dst + inner].copy_from_slice(&p.data()[src..src + inner]);
                }
            }
            offset += len_axis;
        }
        record(
            Op::Concat {
                axis,
                parts: parts.iter().map(|p| Saved::of(p)).collect(),
                out_shape: out_shape.clone(),
            },
            parts,
            out_shape,
            data,
        )
    }

    /// Select rows (axis 0) by index, e.g. timestep lookup into a table.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.shape().is_empty() {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                detail: "rank-0 tensor has no rows".into(),
            });
        }
        let nrows = self.shape()[0];
        let row: usize = self.shape()[1..].iter().product();
        for &i in indices {
            if i >= nrows {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows",
                    index: i,
                    max: nrows - 1,
                });
            }
        }
        let mut data = vec![0.0; indices.len() * row];
        for (k, &i) in indices.iter().enumerate() {
            data[k * row..(k + 1) * row].copy_from_slice(&self.data()[i * row..(i + 1) * row]);
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[0] = indices.len();
        record(
            Op::GatherRows {
                in_shape: self.shape().to_vec(),
                indices: indices.to_vec(),
                parent: node_id(self).unwrap_or(0),
            },
            &[self],
            out_shape,
            data,
        )
    }

    /// 2x2 average pooling on [C,H,W]; H and W must be even.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "avg_pool2",
                detail: format!("need [C,2h,2w], got {:?}", s),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.data();
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let base = (ch * h + 2 * i) * w + 2 * j;
                    data[(ch * oh + i) * ow + j] =
                        0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
                }
            }
        }
        record(
            Op::AvgPool2 {
                in_shape: s.to_vec(),
                parent: node_id(self).unwrap_or(0),
            },
            &[self],
            vec![c, oh, ow],
            data,
        )
    }

    /// Nearest-neighbor 2x upsampling on [C,H,W].
    pub fn upsample2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "upsample2",
                detail: format!("need [C,H,W], got {:?}", s),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * 2, w * 2);
        let x = self.data();
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    data[(ch * oh + i) * ow + j] = x[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        record(
            Op::Upsample2 {
                in_shape: s.to_vec(),
                parent: node_id(self).unwrap_or(0),
            },
            &[self],
            vec![c, oh, ow],
            data,
        )
    }
}

/// Group normalization over axis 0 channels, composed from primitives so the
/// reverse pass needs no dedicated rule. gamma/beta are per-channel [C].
pub fn group_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    eps: f64,
) -> Result<Tensor> {
    let s = x.shape().to_vec();
    if s.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "group_norm",
            detail: "rank-0 input".into(),
        });
    }
    let c = s[0];
    if groups == 0 || c % groups != 0 {
        return Err(Error::ShapeMismatch {
            op: "group_norm",
            detail: format!("{} channels not divisible into {} groups", c, groups),
        });
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "group_norm",
            detail: format!(
                "gamma {:?} / beta {:?} vs {} channels",
                gamma.shape(),
                beta.shape(),
                c
            ),
        });
    }
    let spatial: usize = s[1..].iter().product();
    let per_group = (c / groups) * spatial;

    let xg = x.reshape(&[groups, per_group])?;
    let mu = xg.mean_last()?;
    let centered = xg.sub(&mu)?;
    let var = centered.mul(&centered)?.mean_last()?;
    let norm = centered.div(&var.add_scalar(eps)?.sqrt()?)?;

    let per_channel = norm.reshape(&[c, spatial])?;
    let g2 = gamma.reshape(&[c, 1])?;
    let b2 = beta.reshape(&[c, 1])?;
    per_channel.mul(&g2)?.add(&b2)?.reshape(&s)
}
