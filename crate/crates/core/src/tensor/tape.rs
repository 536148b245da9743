use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{Tensor, MASK_NEG};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum UnKind {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
}

enum Record {
    Matmul { a: Tensor, b: Tensor, out: Tensor },
    Transpose { x: Tensor, out: Tensor },
    Bin { kind: BinKind, a: Tensor, b: Tensor, out: Tensor },
    Un { kind: UnKind, x: Tensor, out: Tensor },
    Scale { x: Tensor, c: f64, out: Tensor },
    MulScalar { x: Tensor, s: Tensor, out: Tensor },
    Softmax { x: Tensor, out: Tensor, axis: usize },
    LogSoftmax { x: Tensor, out: Tensor, axis: usize },
    Concat { xs: Vec<Tensor>, out: Tensor, axis: usize },
    BroadcastCols { x: Tensor, out: Tensor },
    MaskDiag { x: Tensor, out: Tensor },
    GatherRows { table: Tensor, ids: Vec<usize>, out: Tensor },
    Pick { x: Tensor, index: usize, out: Tensor },
    SliceRows { x: Tensor, start: usize, out: Tensor },
    SliceCol { x: Tensor, col: usize, out: Tensor },
    Sum { x: Tensor, out: Tensor },
}

/// Execution record for one forward pass. Operations are methods on the
/// tape; an operation is recorded only when at least one input requires a
/// gradient, so constant-only subgraphs cost nothing at backward time.
#[derive(Default)]
pub struct Tape {
    records: RefCell<Vec<Record>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

fn out_like(x: &Tensor, data: Vec<f64>, requires: bool) -> Tensor {
    let t = Tensor::constant(x.shape(), data).expect("out_like");
    set_requires(&t, requires);
    t
}

fn set_requires(t: &Tensor, requires: bool) {
    t.inner.borrow_mut().requires_grad = requires;
}

fn debug_check_finite(op: &'static str, t: &Tensor) {
    debug_assert!(t.is_finite(), "{op} produced a non-finite value");
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn num_records(&self) -> usize {
        self.records.borrow().len()
    }

    fn push(&self, r: Record) {
        self.records.borrow_mut().push(r);
    }

    /// Matrix product. `a` must be rank-2 `[p, q]`; `b` may be `[q, r]` or a
    /// rank-1 `[q]` column, giving a rank-1 `[p]` result.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 {
            return Err(shape_err("matmul", a, b));
        }
        let (p, q) = a.dims2();
        let (bq, r) = b.dims2();
        if q != bq {
            return Err(shape_err("matmul", a, b));
        }
        let data = matmul_raw(&a.data(), &b.data(), p, q, r);
        let shape = if b.rank() == 1 { vec![p] } else { vec![p, r] };
        let requires = a.requires_grad() || b.requires_grad();
        let out = Tensor::constant(shape, data)?;
        set_requires(&out, requires);
        debug_check_finite("matmul", &out);
        if requires {
            self.push(Record::Matmul {
                a: a.clone(),
                b: b.clone(),
                out: out.clone(),
            });
        }
        Ok(out)
    }

    pub fn transpose(&self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dims2();
        let xd = x.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xd[i * c + j];
            }
        }
        drop(xd);
        let out = Tensor::constant(vec![c, r], data)?;
        set_requires(&out, x.requires_grad());
        if x.requires_grad() {
            self.push(Record::Transpose {
                x: x.clone(),
                out: out.clone(),
            });
        }
        Ok(out)
    }

    fn bin(&self, kind: BinKind, op: &'static str, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(shape_err(op, a, b));
        }
        let data: Vec<f64> = {
            let ad = a.data();
            let bd = b.data();
            ad.iter()
                .zip(bd.iter())
                .map(|(x, y)| match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                })
                .collect()
        };
        let requires = a.requires_grad() || b.requires_grad();
        let out = out_like(a, data, requires);
        debug_check_finite(op, &out);
        if requires {
            self.push(Record::Bin {
                kind,
                a: a.clone(),
                b: b.clone(),
                out: out.clone(),
            });
        }
        Ok(out)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.bin(BinKind::Add, "add", a, b)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.bin(BinKind::Sub, "sub", a, b)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.bin(BinKind::Mul, "mul", a, b)
    }

    fn un(&self, kind: UnKind, x: &Tensor) -> Tensor {
        let data: Vec<f64> = x
            .data()
            .iter()
            .map(|&v| match kind {
                UnKind::Relu => v.max(0.0),
                UnKind::Sigmoid => sigmoid(v),
                UnKind::Tanh => v.tanh(),
                UnKind::Exp => v.exp(),
            })
            .collect();
        let out = out_like(x, data, x.requires_grad());
        debug_check_finite("activation", &out);
        if x.requires_grad() {
            self.push(Record::Un {
                kind,
                x: x.clone(),
                out: out.clone(),
            });
        }
        out
    }

    pub fn relu(&self, x: &Tensor) -> Tensor {
        self.un(UnKind::Relu, x)
    }

    pub fn sigmoid(&self, x: &Tensor) -> Tensor {
        self.un(UnKind::Sigmoid, x)
    }

    pub fn tanh(&self, x: &Tensor) -> Tensor {
        self.un(UnKind::Tanh, x)
    }

    pub fn exp(&self, x: &Tensor) -> Tensor {
        self.un(UnKind::Exp, x)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, x: &Tensor, c: f64) -> Tensor {
        let data = x.data().iter().map(|v| v * c).collect();
        let out = out_like(x, data, x.requires_grad());
        if x.requires_grad() {
            self.push(Record::Scale {
                x: x.clone(),
                c,
                out: out.clone(),
            });
        }
        out
    }

    /// Multiply every element by a single-element tensor; gradients flow to
    /// both operands.
    pub fn mul_scalar(&self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(shape_err("mul_scalar", x, s));
        }
        let sv = s.elem(0);
        let data = x.data().iter().map(|v| v * sv).collect();
        let requires = x.requires_grad() || s.requires_grad();
        let out = out_like(x, data, requires);
        if requires {
            self.push(Record::MulScalar {
                x: x.clone(),
                s: s.clone(),
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Softmax along `axis` (0 = down each column, 1 = along each row),
    /// computed with max subtraction.
    pub fn softmax(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let (r, c) = x.dims2();
        let mut data = x.to_vec();
        softmax_raw(&mut data, r, c, axis, false)?;
        let out = out_like(x, data, x.requires_grad());
        debug_check_finite("softmax", &out);
        if x.requires_grad() {
            self.push(Record::Softmax {
                x: x.clone(),
                out: out.clone(),
                axis,
            });
        }
        Ok(out)
    }

    /// Numerically stable fused log-softmax along `axis`.
    pub fn log_softmax(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let (r, c) = x.dims2();
        let mut data = x.to_vec();
        softmax_raw(&mut data, r, c, axis, true)?;
        let out = out_like(x, data, x.requires_grad());
        debug_check_finite("log_softmax", &out);
        if x.requires_grad() {
            self.push(Record::LogSoftmax {
                x: x.clone(),
                out: out.clone(),
                axis,
            });
        }
        Ok(out)
    }

    /// Concatenate along `axis`. Rank-1 inputs act as columns for axis 1.
    pub fn concat(&self, xs: &[Tensor], axis: usize) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        if axis > 1 {
            return Err(Error::contract(format!("concat axis {axis} out of range")));
        }
        let (r0, c0) = xs[0].dims2();
        for x in &xs[1..] {
            let (r, c) = x.dims2();
            let compatible = if axis == 0 { c == c0 } else { r == r0 };
            if !compatible {
                return Err(shape_err("concat", &xs[0], x));
            }
        }
        let requires = xs.iter().any(|x| x.requires_grad());
        let out = if axis == 0 {
            let rows: usize = xs.iter().map(|x| x.dims2().0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for x in xs {
                data.extend_from_slice(&x.data());
            }
            let rank1 = xs.iter().all(|x| x.rank() == 1);
            let shape = if rank1 { vec![rows] } else { vec![rows, c0] };
            Tensor::constant(shape, data)?
        } else {
            let cols: usize = xs.iter().map(|x| x.dims2().1).sum();
            let mut data = vec![0.0; r0 * cols];
            let mut col_off = 0;
            for x in xs {
                let (_, c) = x.dims2();
                let xd = x.data();
                for i in 0..r0 {
                    for j in 0..c {
                        data[i * cols + col_off + j] = xd[i * c + j];
                    }
                }
                col_off += c;
            }
            Tensor::constant(vec![r0, cols], data)?
        };
        set_requires(&out, requires);
        if requires {
            self.push(Record::Concat {
                xs: xs.to_vec(),
                out: out.clone(),
                axis,
            });
        }
        Ok(out)
    }

    /// Repeat a column vector `[r]` or `[r, 1]` across `m` columns.
    pub fn broadcast_cols(&self, x: &Tensor, m: usize) -> Result<Tensor> {
        let (r, c) = x.dims2();
        if c != 1 {
            return Err(Error::contract(format!(
                "broadcast_cols expects a column, got shape {:?}",
                x.shape()
            )));
        }
        let xd = x.data();
        let mut data = vec![0.0; r * m];
        for i in 0..r {
            for j in 0..m {
                data[i * m + j] = xd[i];
            }
        }
        drop(xd);
        let out = Tensor::constant(vec![r, m], data)?;
        set_requires(&out, x.requires_grad());
        if x.requires_grad() {
            self.push(Record::BroadcastCols {
                x: x.clone(),
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Replace the diagonal of a square matrix with [`MASK_NEG`] so a
    /// subsequent softmax assigns it exactly zero weight.
    pub fn mask_diag(&self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dims2();
        if r != c || x.rank() != 2 {
            return Err(Error::contract(format!(
                "mask_diag expects a square matrix, got {:?}",
                x.shape()
            )));
        }
        let mut data = x.to_vec();
        for i in 0..r {
            data[i * c + i] = MASK_NEG;
        }
        let out = Tensor::constant(vec![r, c], data)?;
        set_requires(&out, x.requires_grad());
        if x.requires_grad() {
            self.push(Record::MaskDiag {
                x: x.clone(),
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Select rows of `table` by index, e.g. an embedding lookup. Gradients
    /// scatter-add back into the selected rows.
    pub fn gather_rows(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (v, e) = table.dims2();
        if table.rank() != 2 {
            return Err(Error::contract(format!(
                "gather_rows expects a matrix table, got {:?}",
                table.shape()
            )));
        }
        let td = table.data();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::contract(format!(
                    "gather_rows: index {id} out of range for table with {v} rows"
                )));
            }
            data.extend_from_slice(&td[id * e..(id + 1) * e]);
        }
        drop(td);
        let out = Tensor::constant(vec![ids.len(), e], data)?;
        set_requires(&out, table.requires_grad());
        if table.requires_grad() {
            self.push(Record::GatherRows {
                table: table.clone(),
                ids: ids.to_vec(),
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Select a single element by flat index, as a `[1]` scalar.
    pub fn pick(&self, x: &Tensor, index: usize) -> Result<Tensor> {
        if index >= x.numel() {
            return Err(Error::contract(format!(
                "pick: index {index} out of range for {} elements",
                x.numel()
            )));
        }
        let out = Tensor::constant(vec![1], vec![x.elem(index)])?;
        set_requires(&out, x.requires_grad());
        if x.requires_grad() {
            self.push(Record::Pick {
                x: x.clone(),
                index,
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Rows `[start, start + len)`; keeps the input's rank.
    pub fn slice_rows(&self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = x.dims2();
        if start + len > r {
            return Err(Error::contract(format!(
                "slice_rows: rows [{start}, {}) out of range for {r} rows",
                start + len
            )));
        }
        let data = x.data()[start * c..(start + len) * c].to_vec();
        let shape = if x.rank() == 1 {
            vec![len]
        } else {
            vec![len, c]
        };
        let out = Tensor::constant(shape, data)?;
        set_requires(&out, x.requires_grad());
        if x.requires_grad() {
            self.push(Record::SliceRows {
                x: x.clone(),
                start,
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Column `col` of a matrix as a rank-1 vector.
    pub fn slice_col(&self, x: &Tensor, col: usize) -> Result<Tensor> {
        let (r, c) = x.dims2();
        if col >= c {
            return Err(Error::contract(format!(
                "slice_col: column {col} out of range for {c} columns"
            )));
        }
        let xd = x.data();
        let data: Vec<f64> = (0..r).map(|i| xd[i * c + col]).collect();
        drop(xd);
        let out = Tensor::constant(vec![r], data)?;
        set_requires(&out, x.requires_grad());
        if x.requires_grad() {
            self.push(Record::SliceCol {
                x: x.clone(),
                col,
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&self, x: &Tensor) -> Tensor {
        let s: f64 = x.data().iter().sum();
        let out = Tensor::constant(vec![1], vec![s]).expect("sum");
        set_requires(&out, x.requires_grad());
        if x.requires_grad() {
            self.push(Record::Sum {
                x: x.clone(),
                out: out.clone(),
            });
        }
        out
    }

    /// Reverse sweep from a scalar loss. Contributions of this call are
    /// added into the `grad` buffer of every tensor that requires a
    /// gradient; repeated calls without [`Tensor::zero_grad`] accumulate.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        // Per-call local adjoints keep repeated backward calls exact: the
        // persistent grad buffers are only written at the end.
        let mut local: HashMap<usize, (Tensor, Vec<f64>)> = HashMap::new();
        local.insert(loss.key(), (loss.clone(), vec![1.0]));

        let records = self.records.borrow();
        for rec in records.iter().rev() {
            step_backward(rec, &mut local);
        }
        drop(records);

        for (_, (tensor, adj)) in local {
            if tensor.requires_grad() {
                tensor.accumulate_grad(&adj);
            }
        }
        Ok(())
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            let orow = &mut out[i * r..(i + 1) * r];
            for j in 0..r {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// In-place (log-)softmax over rows (axis 1) or columns (axis 0).
pub(crate) fn softmax_raw(
    data: &mut [f64],
    r: usize,
    c: usize,
    axis: usize,
    log: bool,
) -> Result<()> {
    if axis > 1 {
        return Err(Error::contract(format!("softmax axis {axis} out of range")));
    }
    let (slices, len, stride, base_stride) = if axis == 0 {
        (c, r, c, 1) // one slice per column, elements stride by c
    } else {
        (r, c, 1, c) // one slice per row, contiguous
    };
    for s in 0..slices {
        let base = s * base_stride;
        let mut max = f64::NEG_INFINITY;
        for i in 0..len {
            max = max.max(data[base + i * stride]);
        }
        let mut z = 0.0;
        for i in 0..len {
            z += (data[base + i * stride] - max).exp();
        }
        if log {
            let lz = z.ln();
            for i in 0..len {
                let idx = base + i * stride;
                data[idx] = data[idx] - max - lz;
            }
        } else {
            for i in 0..len {
                let idx = base + i * stride;
                data[idx] = (data[idx] - max).exp() / z;
            }
        }
    }
    Ok(())
}

fn adjoint_mut<'a>(
    local: &'a mut HashMap<usize, (Tensor, Vec<f64>)>,
    t: &Tensor,
) -> &'a mut Vec<f64> {
    let entry = local
        .entry(t.key())
        .or_insert_with(|| (t.clone(), vec![0.0; t.numel()]));
    &mut entry.1
}

fn take_out_adj(local: &HashMap<usize, (Tensor, Vec<f64>)>, out: &Tensor) -> Option<Vec<f64>> {
    local.get(&out.key()).map(|(_, adj)| adj.clone())
}

fn step_backward(rec: &Record, local: &mut HashMap<usize, (Tensor, Vec<f64>)>) {
    match rec {
        Record::Matmul { a, b, out } => {
            let Some(d_out) = take_out_adj(local, out) else {
                return;
            };
            let (p, q) = a.dims2();
            let (_, r) = b.dims2();
            {
                // dA += dOut · B^T
                let bd = b.data();
                let da = adjoint_mut(local, a);
                for i in 0..p {
                    for k in 0..q {
                        let mut acc = 0.0;
                        for j in 0..r {
                            acc += d_out[i * r + j] * bd[k * r + j];
                        }
                        da[i * q + k] += acc;
                    }
                }
            }
            {
                // dB += A^T · dOut
                let ad = a.data();
                let db = adjoint_mut(local, b);
                for k in 0..q {
                    for i in 0..p {
                        let aik = ad[i * q + k];
                        if aik == 0.0 {
                            continue;
                        }
                        for j in 0..r {
                            db[k * r + j] += aik * d_out[i * r + j];
                        }
                    }
                }
            }
        }
        Record::Transpose { x, out } => {
            let Some(d_out) = take_out_adj(local, out) else {
                return;
            };
            let (r, c) = x.dims2();
            let dx = adjoint_mut(local, x);
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] += d_out[j * r + i];
                }
            }
        }
        Record::Bin { kind, a, b, out } => {
            let Some(d_out) = take_out_adj(local, out) else {
                return;
            };
            match kind {
                BinKind::Add => {
                    for (g, d) in adjoint_mut(local, a).iter_mut().zip(&d_out) {
                        *g += d;
                    }
                    for (g, d) in adjoint_mut(local, b).iter_mut().zip(&d_out) {
                        *g += d;
                    }
                }
                BinKind::Sub => {
                    for (g, d) in adjoint_mut(local, a).iter_mut().zip(&d_out) {
                        *g += d;
                    }
                    for (g, d) in adjoint_mut(local, b).iter_mut().zip(&d_out) {
                        *g -= d;
                    }
                }
                BinKind::Mul => {
                    {
                        let bd = b.to_vec();
                        let da = adjoint_mut(local, a);
                        for i in 0..d_out.len() {
                            da[i] += d_out[i] * bd[i];
                        }
                    }
                    {
                        let ad = a.to_vec();
                        let db = adjoint_mut(local, b);
                        for i in 0..d_out.len() {
                            db[i] += d_out[i] * ad[i];
                        }
                    }
                }
            }
        }
        Record::Un { kind, x, out } => {
            let Some(d_out) = take_out_adj(local, out) else {
                return;
            };
            let xd = x.to_vec();
            let od = out.to_vec();
            let dx = adjoint_mut(local, x);
            for i in 0..d_out.len() {
                let d = match kind {
                    UnKind::Relu => {
                        if xd[i] > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    UnKind::Sigmoid => od[i] * (1.0 - od[i]),
                    UnKind::Tanh => 1.0 - od[i] * od[i],
                    UnKind::Exp => od[i],
                };
                dx[i] += d_out[i] * d;
            }
        }
        Record::Scale { x, c, out } => {
            let Some(d_out) = take_out_adj(local, out) else {
                return;
            };
            let dx = adjoint_mut(local, x);
            for i in 0..d_out.len() {
                dx[i] += d_out[i] * c;
            }
        }
        Record::MulScalar { x, s, out } => {
            let Some(d_out) = take_out_adj(local, out) else {
                return;
            };
            let sv = s.elem(0);
            let xd = x.to_vec();
            {
                let dx = adjoint_mut(local, x);
                for i in 0..d_out.len() {
                    dx[i] += d_out[i] * sv;
                }
            }
            let ds = adjoint_mut(local, s);
            ds[0] += d_out
                .iter()
                .zip(&xd)
                .map(|(d, xv)| d * xv)
                .sum::<f64>();
        }
        Record::Softmax { x, out, axis } => {
            let Some(d_out) = take_out_adj(local, out) else {
                return;
            };
            let (r, c) = x.dims2();
            let p = out.to_vec();
            let dx = adjoint_mut(local, x);
            for_each_slice(r, c, *axis, |idx| {
                let dot: f64 = idx.iter().map(|&i| d_out[i] * p[i]).sum();
                for &i in idx {
                    dx[i] += p[i] * (d_out[i] - dot);
                }
            });
        }
        Record::LogSoftmax { x, out, axis } => {
            let Some(d_out) = take_out_adj(local, out) else {
                return;
            };
            let (r, c) = x.dims2();
            let logp = out.to_vec();
            let dx = adjoint_mut(local, x);
            for_each_slice(r, c, *axis, |idx| {
                let total: f64 = idx.iter().map(|&i| d_out[i]).sum();
                for &i in idx {
                    dx[i] += d_out[i] - logp[i].exp() * total;
                }
            });
        }
        Record::Concat { xs, out, axis } => {
            let Some(d_out) = take_out_adj(local, out) else {
                return;
            };
            if *axis == 0 {
                let mut off = 0;
                for x in xs {
                    let n = x.numel();
                    if x.requires_grad() {
                        let dx = adjoint_mut(local, x);
                        for i in 0..n {
                            dx[i] += d_out[off + i];
                        }
                    }
                    off += n;
                }
            } else {
                let (r, total_c) = out.dims2();
                let mut col_off = 0;
                for x in xs {
                    let (_, c) = x.dims2();
                    if x.requires_grad() {
                        let dx = adjoint_mut(local, x);
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] += d_out[i * total_c + col_off + j];
                            }
                        }
                    }
                    col_off += c;
                }
            }
        }
        Record::BroadcastCols { x, out } => {
            let Some(d_out) = take_out_adj(local, out) else {
                return;
            };
            let (r, m) = out.dims2();
            let dx = adjoint_mut(local, x);
            for i in 0..r {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += d_out[i * m + j];
                }
                dx[i] += acc;
            }
        }
        Record::MaskDiag { x, out } => {
            let Some(d_out) = take_out_adj(local, out) else {
                return;
            };
            let (r, c) = x.dims2();
            let dx = adjoint_mut(local, x);
            for i in 0..r {
                for j in 0..c {
                    if i != j {
                        dx[i * c + j] += d_out[i * c + j];
                    }
                }
            }
        }
        Record::GatherRows { table, ids, out } => {
            let Some(d_out) = take_out_adj(local, out) else {
                return;
            };
            let (_, e) = table.dims2();
            let dt = adjoint_mut(local, table);
            for (row, &id) in ids.iter().enumerate() {
                for j in 0..e {
                    dt[id * e + j] += d_out[row * e + j];
                }
            }
        }
        Record::Pick { x, index, out } => {
            let Some(d_out) = take_out_adj(local, out) else {
                return;
            };
            adjoint_mut(local, x)[*index] += d_out[0];
        }
        Record::SliceRows { x, start, out } => {
            let Some(d_out) = take_out_adj(local, out) else {
                return;
            };
            let (_, c) = x.dims2();
            let dx = adjoint_mut(local, x);
            for (i, d) in d_out.iter().enumerate() {
                dx[start * c + i] += d;
            }
        }
        Record::SliceCol { x, col, out } => {
            let Some(d_out) = take_out_adj(local, out) else {
                return;
            };
            let (r, c) = x.dims2();
            let dx = adjoint_mut(local, x);
            for i in 0..r {
                dx[i * c + col] += d_out[i];
            }
        }
        Record::Sum { x, out } => {
            let Some(d_out) = take_out_adj(local, out) else {
                return;
            };
            let dx = adjoint_mut(local, x);
            for g in dx.iter_mut() {
                *g += d_out[0];
            }
        }
    }
}

fn for_each_slice(r: usize, c: usize, axis: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = Vec::new();
    if axis == 0 {
        for j in 0..c {
            idx.clear();
            idx.extend((0..r).map(|i| i * c + j));
            f(&idx);
        }
    } else {
        for i in 0..r {
            idx.clear();
            idx.extend((0..c).map(|j| i * c + j));
            f(&idx);
        }
    }
}
