//! Forward and vector-Jacobian kernels for every node kind.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::linalg::gemm;

/// Node kinds. Every op works on rank-1 or rank-2 tensors; rank-1 shapes
/// read as single rows.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input(String),
    Add,
    Sub,
    Mul,
    /// `a · b` for `m × k` and `k × n` operands.
    MatMul,
    Transpose,
    Exp,
    Log,
    Relu,
    Sqrt,
    Reciprocal,
    Scale(f64),
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// Row-wise softmax.
    Softmax,
    /// Row-wise log-softmax.
    LogSoftmax,
    Sum,
    Mean,
    /// Column-wise concatenation of operands with equal row counts.
    Concat,
    SliceRows {
        start: usize,
        len: usize,
    },
    RowL2Normalize,
    FrobeniusSq,
    /// Elementwise `log(exp(a) + exp(b))`.
    LogAddExp,
    /// Elementwise first component of the two-way softmax over `(a, b)`.
    Gate,
    /// Row `i` of the output is `reshape(m_i, d × d) · v_i`.
    BatchMatVec,
    /// Adds a single row to every row of the first operand.
    AddRow,
    RepeatRows(usize),
    /// Stacks `±context` neighbour frames column-wise. Rows are frame-major
    /// (`t · batch + i`) over `frames` frames; edges replicate.
    ContextStack {
        context: usize,
        frames: usize,
    },
    /// Elementwise `cos(acos(c) + m)` with the easy-margin fallback
    /// `c − m·sin m` once `acos(c) + m` passes π.
    AngularMargin(f64),
    /// Identity forward, zero gradient.
    Detach,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Relu => "relu",
            Op::Sqrt => "sqrt",
            Op::Reciprocal => "reciprocal",
            Op::Scale(_) => "scale",
            Op::Clamp { .. } => "clamp",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log-softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Concat => "concat",
            Op::SliceRows { .. } => "slice",
            Op::RowL2Normalize => "row-l2-normalize",
            Op::FrobeniusSq => "frobenius-sq",
            Op::LogAddExp => "log-add-exp",
            Op::Gate => "gate",
            Op::BatchMatVec => "batch-matvec",
            Op::AddRow => "add-row",
            Op::RepeatRows(_) => "repeat-rows",
            Op::ContextStack { .. } => "context-stack",
            Op::AngularMargin(_) => "angular-margin",
            Op::Detach => "detach",
        }
    }

    pub fn arity(&self) -> Option<usize> {
        match self {
            Op::Input(_) => Some(0),
            Op::Concat => None,
            Op::Add
            | Op::Sub
            | Op::Mul
            | Op::MatMul
            | Op::LogAddExp
            | Op::Gate
            | Op::BatchMatVec
            | Op::AddRow => Some(2),
            _ => Some(1),
        }
    }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Two-way softmax: `(e^a, e^b) / (e^a + e^b)`, shifted by the max logit.
pub(crate) fn softmax2(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let s = ea + eb;
    (ea / s, eb / s)
}

fn angular_margin(c: f64, m: f64) -> (f64, f64) {
    let c = c.clamp(-1.0, 1.0);
    let (sin_m, cos_m) = m.sin_cos();
    if c > -cos_m {
        let s2 = 1.0 - c * c;
        if s2 > 1e-24 {
            let s = s2.sqrt();
            (c * cos_m - s * sin_m, cos_m + c / s * sin_m)
        } else {
            (c * cos_m, cos_m)
        }
    } else {
        (c - m * sin_m, 1.0)
    }
}

struct Ctx<'a> {
    node: usize,
    op: &'a Op,
}

impl Ctx<'_> {
    fn shape_err(&self, detail: String) -> Error {
        Error::Shape {
            node: self.node,
            op: self.op.name(),
            detail,
        }
    }

    fn same_shape(&self, a: &Tensor, b: &Tensor) -> Result<()> {
        if a.len() != b.len() || a.dims2() != b.dims2() {
            return Err(self.shape_err(format!(
                "operands {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn with_data(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("shape preserved")
}

pub(crate) fn forward(node: usize, op: &Op, xs: &[&Tensor]) -> Result<Tensor> {
    let cx = Ctx { node, op };
    let out = match op {
        Op::Input(_) => unreachable!("inputs are bound, not computed"),
        Op::Add => {
            cx.same_shape(xs[0], xs[1])?;
            zip_map(xs[0], xs[1], |a, b| a + b)
        }
        Op::Sub => {
            cx.same_shape(xs[0], xs[1])?;
            zip_map(xs[0], xs[1], |a, b| a - b)
        }
        Op::Mul => {
            cx.same_shape(xs[0], xs[1])?;
            zip_map(xs[0], xs[1], |a, b| a * b)
        }
        Op::LogAddExp => {
            cx.same_shape(xs[0], xs[1])?;
            zip_map(xs[0], xs[1], log_add_exp)
        }
        Op::Gate => {
            cx.same_shape(xs[0], xs[1])?;
            zip_map(xs[0], xs[1], |a, b| softmax2(a, b).0)
        }
        Op::MatMul => {
            let (m, k) = xs[0].dims2();
            let (k2, n) = xs[1].dims2();
            if k != k2 {
                return Err(cx.shape_err(format!(
                    "inner dimensions {:?} · {:?}",
                    xs[0].shape(),
                    xs[1].shape()
                )));
            }
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, xs[0].data(), false, xs[1].data(), false, &mut c);
            Tensor::matrix(m, n, c)
        }
        Op::Transpose => {
            let (r, c) = xs[0].dims2();
            let d = xs[0].data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            Tensor::matrix(c, r, out)
        }
        Op::Exp => xs[0].map(f64::exp),
        Op::Log => xs[0].map(f64::ln),
        Op::Relu => xs[0].map(|v| v.max(0.0)),
        Op::Sqrt => xs[0].map(f64::sqrt),
        Op::Reciprocal => xs[0].map(|v| 1.0 / v),
        Op::Scale(s) => xs[0].map(|v| v * s),
        Op::Clamp { lo, hi } => xs[0].map(|v| v.clamp(*lo, *hi)),
        Op::Detach => xs[0].clone(),
        Op::AngularMargin(m) => xs[0].map(|c| angular_margin(c, *m).0),
        Op::Softmax | Op::LogSoftmax => {
            let (r, c) = xs[0].dims2();
            let mut out = xs[0].data().to_vec();
            for row in out.chunks_mut(c) {
                let (arg, mx) = row
                    .iter()
                    .cloned()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |a, (i, v)| if v > a.1 { (i, v) } else { a });
                // Sum over the non-max entries separately so that
                // `ln(1 + rest)` keeps full precision when `rest` is tiny.
                let rest: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != arg)
                    .map(|(_, v)| (v - mx).exp())
                    .sum();
                if *op == Op::Softmax {
                    row.iter_mut().for_each(|v| *v = (*v - mx).exp() / (1.0 + rest));
                } else {
                    let log_norm = rest.ln_1p();
                    row.iter_mut().for_each(|v| *v = (*v - mx) - log_norm);
                }
            }
            debug_assert_eq!(out.len(), r * c);
            with_data(xs[0].shape(), out)
        }
        Op::Sum => Tensor::scalar(xs[0].data().iter().sum()),
        Op::Mean => Tensor::scalar(xs[0].data().iter().sum::<f64>() / xs[0].len() as f64),
        Op::FrobeniusSq => Tensor::scalar(xs[0].data().iter().map(|v| v * v).sum()),
        Op::Concat => {
            let rows = xs[0].rows();
            if let Some(bad) = xs.iter().find(|x| x.rows() != rows) {
                return Err(cx.shape_err(format!(
                    "row counts differ: {:?} vs {:?}",
                    xs[0].shape(),
                    bad.shape()
                )));
            }
            let cols: usize = xs.iter().map(|x| x.cols()).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for x in xs {
                    out.extend_from_slice(x.row(r));
                }
            }
            Tensor::matrix(rows, cols, out)
        }
        Op::SliceRows { start, len } => {
            let (r, c) = xs[0].dims2();
            if *len == 0 || start + len > r {
                return Err(cx.shape_err(format!(
                    "rows {start}..{} out of {r}",
                    start + len
                )));
            }
            Tensor::matrix(*len, c, xs[0].data()[start * c..(start + len) * c].to_vec())
        }
        Op::RowL2Normalize => {
            let (_, c) = xs[0].dims2();
            let mut out = xs[0].data().to_vec();
            for (i, row) in out.chunks_mut(c).enumerate() {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(n > 0.0) {
                    return Err(Error::ZeroRow {
                        node,
                        op: op.name(),
                        row: i,
                    });
                }
                row.iter_mut().for_each(|v| *v /= n);
            }
            with_data(xs[0].shape(), out)
        }
        Op::AddRow => {
            let (r, c) = xs[0].dims2();
            if xs[1].len() != c {
                return Err(cx.shape_err(format!(
                    "row of {:?} does not fit {:?}",
                    xs[1].shape(),
                    xs[0].shape()
                )));
            }
            let b = xs[1].data();
            let mut out = xs[0].data().to_vec();
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
            }
            debug_assert_eq!(out.len(), r * c);
            with_data(xs[0].shape(), out)
        }
        Op::RepeatRows(n) => {
            if xs[0].rows() != 1 {
                return Err(cx.shape_err(format!("expected one row, got {:?}", xs[0].shape())));
            }
            let c = xs[0].cols();
            Tensor::matrix(*n, c, xs[0].data().repeat(*n))
        }
        Op::ContextStack { context, frames } => {
            let (r, c) = xs[0].dims2();
            if *frames == 0 || r % frames != 0 {
                return Err(cx.shape_err(format!("{r} rows do not split into {frames} frames")));
            }
            let b = r / frames;
            let width = 2 * context + 1;
            let src = xs[0].data();
            let mut out = vec![0.0; r * width * c];
            for t in 0..*frames {
                for k in 0..width {
                    let ts = (t + k).saturating_sub(*context).min(frames - 1);
                    for i in 0..b {
                        let dst = (t * b + i) * width * c + k * c;
                        let s = (ts * b + i) * c;
                        out[dst..dst + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
            Tensor::matrix(r, width * c, out)
        }
        Op::BatchMatVec => {
            let (b, dd) = xs[0].dims2();
            let (b2, d) = xs[1].dims2();
            if b != b2 || dd != d * d {
                return Err(cx.shape_err(format!(
                    "matrices {:?} do not match vectors {:?}",
                    xs[0].shape(),
                    xs[1].shape()
                )));
            }
            let (m, v) = (xs[0].data(), xs[1].data());
            let mut out = vec![0.0; b * d];
            for i in 0..b {
                let vi = &v[i * d..(i + 1) * d];
                for r in 0..d {
                    let mrow = &m[i * dd + r * d..i * dd + (r + 1) * d];
                    out[i * d + r] = mrow.iter().zip(vi).map(|(a, b)| a * b).sum();
                }
            }
            Tensor::matrix(b, d, out)
        }
    };
    Ok(out)
}

/// Gradient contributions for each parent given the upstream gradient `g`.
/// `None` means the parent receives nothing from this node.
pub(crate) fn backward(op: &Op, xs: &[&Tensor], y: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
    match op {
        Op::Input(_) | Op::Detach => vec![None; xs.len()],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
        Op::Mul => vec![
            Some(zip_map(g, xs[1], |a, b| a * b)),
            Some(zip_map(g, xs[0], |a, b| a * b)),
        ],
        Op::LogAddExp => {
            let ga: Vec<f64> = (0..g.len())
                .map(|i| g.data()[i] * sigmoid(xs[0].data()[i] - xs[1].data()[i]))
                .collect();
            let gb: Vec<f64> = (0..g.len())
                .map(|i| g.data()[i] * sigmoid(xs[1].data()[i] - xs[0].data()[i]))
                .collect();
            vec![
                Some(with_data(xs[0].shape(), ga)),
                Some(with_data(xs[1].shape(), gb)),
            ]
        }
        Op::Gate => {
            let ga: Vec<f64> = y
                .data()
                .iter()
                .zip(g.data())
                .map(|(&s, &gg)| gg * s * (1.0 - s))
                .collect();
            let gb = ga.iter().map(|v| -v).collect();
            vec![
                Some(with_data(xs[0].shape(), ga)),
                Some(with_data(xs[1].shape(), gb)),
            ]
        }
        Op::MatMul => {
            let (m, k) = xs[0].dims2();
            let (_, n) = xs[1].dims2();
            let mut ga = vec![0.0; m * k];
            gemm(m, n, k, g.data(), false, xs[1].data(), true, &mut ga);
            let mut gb = vec![0.0; k * n];
            gemm(k, m, n, xs[0].data(), true, g.data(), false, &mut gb);
            vec![
                Some(with_data(xs[0].shape(), ga)),
                Some(with_data(xs[1].shape(), gb)),
            ]
        }
        Op::Transpose => {
            let (r, c) = g.dims2();
            let d = g.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            vec![Some(with_data(xs[0].shape(), out))]
        }
        Op::Exp => vec![Some(zip_map(g, y, |a, b| a * b))],
        Op::Log => vec![Some(zip_map(g, xs[0], |a, b| a / b))],
        Op::Relu => vec![Some(zip_map(g, xs[0], |a, x| if x > 0.0 { a } else { 0.0 }))],
        Op::Sqrt => vec![Some(zip_map(g, y, |a, s| a / (2.0 * s)))],
        Op::Reciprocal => vec![Some(zip_map(g, y, |a, r| -a * r * r))],
        Op::Scale(s) => vec![Some(g.map(|v| v * s))],
        Op::Clamp { lo, hi } => vec![Some(zip_map(g, xs[0], |a, x| {
            if x < *lo || x > *hi {
                0.0
            } else {
                a
            }
        }))],
        Op::AngularMargin(m) => vec![Some(zip_map(g, xs[0], |a, c| {
            a * angular_margin(c, *m).1
        }))],
        Op::Softmax => {
            let c = y.cols();
            let mut out = vec![0.0; y.len()];
            for ((o, yr), gr) in out
                .chunks_mut(c)
                .zip(y.data().chunks(c))
                .zip(g.data().chunks(c))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    o[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(with_data(xs[0].shape(), out))]
        }
        Op::LogSoftmax => {
            let c = y.cols();
            let mut out = vec![0.0; y.len()];
            for ((o, yr), gr) in out
                .chunks_mut(c)
                .zip(y.data().chunks(c))
                .zip(g.data().chunks(c))
            {
                let total: f64 = gr.iter().sum();
                for j in 0..c {
                    o[j] = gr[j] - yr[j].exp() * total;
                }
            }
            vec![Some(with_data(xs[0].shape(), out))]
        }
        Op::Sum => vec![Some(Tensor::filled(xs[0].shape(), g.item()))],
        Op::Mean => vec![Some(Tensor::filled(
            xs[0].shape(),
            g.item() / xs[0].len() as f64,
        ))],
        Op::FrobeniusSq => vec![Some(xs[0].map(|v| 2.0 * g.item() * v))],
        Op::Concat => {
            let rows = g.rows();
            let total = g.cols();
            let mut offset = 0;
            xs.iter()
                .map(|x| {
                    let c = x.cols();
                    let mut out = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        let base = r * total + offset;
                        out.extend_from_slice(&g.data()[base..base + c]);
                    }
                    offset += c;
                    Some(with_data(x.shape(), out))
                })
                .collect()
        }
        Op::SliceRows { start, .. } => {
            let c = xs[0].cols();
            let mut out = vec![0.0; xs[0].len()];
            out[start * c..start * c + g.len()].copy_from_slice(g.data());
            vec![Some(with_data(xs[0].shape(), out))]
        }
        Op::RowL2Normalize => {
            let c = y.cols();
            let mut out = vec![0.0; y.len()];
            for (r, o) in out.chunks_mut(c).enumerate() {
                let x = xs[0].row(r);
                let yr = y.row(r);
                let gr = g.row(r);
                let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    o[j] = (gr[j] - yr[j] * dot) / n;
                }
            }
            vec![Some(with_data(xs[0].shape(), out))]
        }
        Op::AddRow => {
            let c = g.cols();
            let mut gb = vec![0.0; c];
            for row in g.data().chunks(c) {
                gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            vec![Some(g.clone()), Some(with_data(xs[1].shape(), gb))]
        }
        Op::RepeatRows(_) => {
            let c = g.cols();
            let mut gx = vec![0.0; c];
            for row in g.data().chunks(c) {
                gx.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            vec![Some(with_data(xs[0].shape(), gx))]
        }
        Op::ContextStack { context, frames } => {
            let (r, c) = xs[0].dims2();
            let b = r / frames;
            let width = 2 * context + 1;
            let gd = g.data();
            let mut out = vec![0.0; r * c];
            for t in 0..*frames {
                for k in 0..width {
                    let ts = (t + k).saturating_sub(*context).min(frames - 1);
                    for i in 0..b {
                        let src = (t * b + i) * width * c + k * c;
                        let dst = (ts * b + i) * c;
                        for j in 0..c {
                            out[dst + j] += gd[src + j];
                        }
                    }
                }
            }
            vec![Some(with_data(xs[0].shape(), out))]
        }
        Op::BatchMatVec => {
            let (b, dd) = xs[0].dims2();
            let d = xs[1].cols();
            let (m, v, gd) = (xs[0].data(), xs[1].data(), g.data());
            let mut gm = vec![0.0; b * dd];
            let mut gv = vec![0.0; b * d];
            for i in 0..b {
                for r in 0..d {
                    let gr = gd[i * d + r];
                    for c in 0..d {
                        gm[i * dd + r * d + c] = gr * v[i * d + c];
                        gv[i * d + c] += m[i * dd + r * d + c] * gr;
                    }
                }
            }
            vec![
                Some(with_data(xs[0].shape(), gm)),
                Some(with_data(xs[1].shape(), gv)),
            ]
        }
    }
}

pub(crate) fn check_arity(node: usize, op: &Op, n: usize) -> Result<()> {
    match op.arity() {
        Some(a) if a != n => Err(Error::Shape {
            node,
            op: op.name(),
            detail: format!("expects {a} operands, got {n}"),
        }),
        None if n == 0 => Err(Error::Shape {
            node,
            op: op.name(),
            detail: "needs at least one operand".into(),
        }),
        _ => Ok(()),
    }
}
