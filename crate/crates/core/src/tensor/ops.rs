//! Generic differentiable kernels and their tape shorthands.

use std::sync::Arc;

use super::gemm::{gemm, Mat};
use super::{Kernel, NdBuffer, Tape, Var};
use crate::error::{Error, Result};
use crate::par;

pub(crate) fn want(wants: &[bool], i: usize, f: impl FnOnce() -> NdBuffer) -> Option<NdBuffer> {
    wants.get(i).copied().unwrap_or(false).then(f)
}

fn expect_rank2(name: &str, b: &NdBuffer) -> Result<(usize, usize)> {
    match b.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::dim(format!("{name} expects a rank-2 operand, got {s:?}"))),
    }
}

/// Rows per partial sum when reducing over rows. Fixed so that the
/// association order is independent of the thread count.
const REDUCE_CHUNK: usize = 2048;

/// Deterministic column reduction: `out[k, :] = sum_i f(i)` accumulated in
/// fixed-size row chunks whose partials are combined in chunk order.
pub(crate) fn chunked_accumulate<F>(rows: usize, out_len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let chunks = rows.div_ceil(REDUCE_CHUNK);
    let partials = par::map_range(chunks, |c| {
        let mut acc = vec![0.0; out_len];
        for i in c * REDUCE_CHUNK..((c + 1) * REDUCE_CHUNK).min(rows) {
            f(i, &mut acc);
        }
        acc
    });
    let mut out = vec![0.0; out_len];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------

/// `[.. x K] x [K x N] -> [.. x N]`; leading extents of the left operand
/// are treated as rows.
pub struct MatMul;

pub fn matmul(a: &NdBuffer, b: &NdBuffer) -> Result<NdBuffer> {
    MatMul.forward(&[a, b])
}

impl Kernel for MatMul {
    fn name(&self) -> &str {
        "matmul"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k) = (a.rows(), a.cols());
        let (k2, n) = expect_rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(Mat::new(a.data(), m, k), Mat::new(b.data(), k, n), 0.0, &mut out);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().expect("rank") = n;
        NdBuffer::new(&shape, out)
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k) = (a.rows(), a.cols());
        let n = b.shape()[1];
        let gm = Mat::new(g.data(), m, n);
        let da = want(wants, 0, || {
            let mut out = vec![0.0; m * k];
            gemm(gm, Mat::new(b.data(), k, n).t(), 0.0, &mut out);
            NdBuffer::new(a.shape(), out).expect("shape")
        });
        let db = want(wants, 1, || {
            let mut out = vec![0.0; k * n];
            gemm(Mat::new(a.data(), m, k).t(), gm, 0.0, &mut out);
            NdBuffer::new(&[k, n], out).expect("shape")
        });
        Ok(vec![da, db])
    }
}

/// Adds a `[C]` bias to every row of `[.. x C]`.
pub struct AddBias;

impl Kernel for AddBias {
    fn name(&self) -> &str {
        "add_bias"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let (x, b) = (inputs[0], inputs[1]);
        if b.len() != x.cols() {
            return Err(Error::dim(format!(
                "bias {:?} does not match rows of {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let mut out = x.clone();
        let bd = b.data();
        let c = bd.len();
        par::for_each_row(out.data_mut(), c, |_, row| {
            for (r, bb) in row.iter_mut().zip(bd) {
                *r += bb;
            }
        });
        Ok(out)
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let b = inputs[1];
        let c = b.len();
        let gd = g.data();
        let db = want(wants, 1, || {
            let out = chunked_accumulate(g.len() / c, c, |i, acc| {
                for (a, v) in acc.iter_mut().zip(&gd[i * c..(i + 1) * c]) {
                    *a += v;
                }
            });
            NdBuffer::new(b.shape(), out).expect("shape")
        });
        Ok(vec![want(wants, 0, || g.clone()), db])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Elementwise binary operation on equal shapes.
pub struct Elementwise(pub Binary);

impl Kernel for Elementwise {
    fn name(&self) -> &str {
        match self.0 {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let (a, b) = (inputs[0], inputs[1]);
        a.same_shape(b)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| match self.0 {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            })
            .collect();
        NdBuffer::new(a.shape(), data)
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let zip = |x: &NdBuffer| {
            let data = g.data().iter().zip(x.data()).map(|(gi, xi)| gi * xi).collect();
            NdBuffer::new(g.shape(), data).expect("shape")
        };
        Ok(match self.0 {
            Binary::Add => vec![want(wants, 0, || g.clone()), want(wants, 1, || g.clone())],
            Binary::Sub => vec![want(wants, 0, || g.clone()), want(wants, 1, || g.map(|v| -v))],
            Binary::Mul => vec![want(wants, 0, || zip(b)), want(wants, 1, || zip(a))],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Scale(f64),
}

pub struct Pointwise(pub Unary);

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Kernel for Pointwise {
    fn name(&self) -> &str {
        match self.0 {
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Scale(_) => "scale",
        }
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let x = inputs[0];
        Ok(match self.0 {
            Unary::Relu => x.map(|v| v.max(0.0)),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Scale(c) => x.map(|v| c * v),
        })
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let x = inputs[0];
        let gx = want(wants, 0, || {
            let data: Vec<f64> = match self.0 {
                Unary::Relu => g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect(),
                Unary::Sigmoid => g
                    .data()
                    .iter()
                    .zip(output.data())
                    .map(|(gi, s)| gi * s * (1.0 - s))
                    .collect(),
                Unary::Scale(c) => g.data().iter().map(|gi| c * gi).collect(),
            };
            NdBuffer::new(x.shape(), data).expect("shape")
        });
        Ok(vec![gx])
    }
}

/// Elementwise `clamp(softplus(x), lo, hi)`.
#[derive(Clone, Copy, Debug)]
pub struct SoftplusClamped {
    lo: f64,
    hi: f64,
}

impl SoftplusClamped {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::config(format!(
                "softplus clamp band needs 0 < lo < hi, got lo={lo}, hi={hi}"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn eval(&self, x: f64) -> f64 {
        softplus(x).clamp(self.lo, self.hi)
    }
}

pub fn softplus_clamped(x: &NdBuffer, lo: f64, hi: f64) -> Result<NdBuffer> {
    let k = SoftplusClamped::new(lo, hi)?;
    Ok(x.map(|v| k.eval(v)))
}

impl Kernel for SoftplusClamped {
    fn name(&self) -> &str {
        "softplus_clamped"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        Ok(inputs[0].map(|v| self.eval(v)))
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let x = inputs[0];
        let gx = want(wants, 0, || {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(gi, &xi)| {
                    let s = softplus(xi);
                    if s < self.lo || s > self.hi {
                        0.0
                    } else {
                        gi * sigmoid(xi)
                    }
                })
                .collect();
            NdBuffer::new(x.shape(), data).expect("shape")
        });
        Ok(vec![gx])
    }
}

/// Multiplies a buffer by a one-element scalar operand.
pub struct MulScalar;

impl Kernel for MulScalar {
    fn name(&self) -> &str {
        "mul_scalar"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let (x, s) = (inputs[0], inputs[1]);
        if s.len() != 1 {
            return Err(Error::dim(format!("scalar operand has shape {:?}", s.shape())));
        }
        let s = s.item();
        Ok(x.map(|v| v * s))
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let (x, s) = (inputs[0], inputs[1]);
        let sv = s.item();
        Ok(vec![
            want(wants, 0, || g.map(|v| v * sv)),
            want(wants, 1, || NdBuffer::scalar(dot(g.data(), x.data()))),
        ])
    }
}

/// Concatenates `[N x C_i]` operands along the last axis.
pub struct ConcatCols;

impl Kernel for ConcatCols {
    fn name(&self) -> &str {
        "concat_cols"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let rows = inputs[0].rows();
        if inputs.iter().any(|b| b.rows() != rows) {
            return Err(Error::dim(format!(
                "concat operands disagree on rows: {:?}",
                inputs.iter().map(|b| b.shape().to_vec()).collect::<Vec<_>>()
            )));
        }
        let total: usize = inputs.iter().map(|b| b.cols()).sum();
        let mut out = vec![0.0; rows * total];
        par::for_each_row(&mut out, total, |i, row| {
            let mut off = 0;
            for b in inputs {
                let c = b.cols();
                row[off..off + c].copy_from_slice(b.row(i));
                off += c;
            }
        });
        NdBuffer::new(&[rows, total], out)
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let mut off = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (j, b) in inputs.iter().enumerate() {
            let c = b.cols();
            grads.push(want(wants, j, || {
                let mut out = vec![0.0; b.len()];
                par::for_each_row(&mut out, c, |i, row| {
                    row.copy_from_slice(&g.row(i)[off..off + c]);
                });
                NdBuffer::new(b.shape(), out).expect("shape")
            }));
            off += c;
        }
        Ok(grads)
    }
}

/// Selects columns `start..start + len` of a `[N x C]` operand.
pub struct SliceCols {
    pub start: usize,
    pub len: usize,
}

impl Kernel for SliceCols {
    fn name(&self) -> &str {
        "slice_cols"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let x = inputs[0];
        if self.start + self.len > x.cols() || self.len == 0 {
            return Err(Error::dim(format!(
                "column slice {}..{} outside {:?}",
                self.start,
                self.start + self.len,
                x.shape()
            )));
        }
        let mut out = vec![0.0; x.rows() * self.len];
        par::for_each_row(&mut out, self.len, |i, row| {
            row.copy_from_slice(&x.row(i)[self.start..self.start + self.len]);
        });
        NdBuffer::new(&[x.rows(), self.len], out)
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let x = inputs[0];
        let c = x.cols();
        Ok(vec![want(wants, 0, || {
            let mut out = vec![0.0; x.len()];
            par::for_each_row(&mut out, c, |i, row| {
                row[self.start..self.start + self.len].copy_from_slice(g.row(i));
            });
            NdBuffer::new(x.shape(), out).expect("shape")
        })])
    }
}

/// `out[n, :] = x[index[n], :]` over rows of `[R x C]`.
pub struct GatherRows {
    pub index: Arc<Vec<usize>>,
}

impl Kernel for GatherRows {
    fn name(&self) -> &str {
        "gather_rows"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let x = inputs[0];
        let (r, c) = (x.rows(), x.cols());
        if let Some(bad) = self.index.iter().find(|&&i| i >= r) {
            return Err(Error::index(format!("gather row {bad} outside {r} rows")));
        }
        let mut out = vec![0.0; self.index.len() * c];
        par::for_each_row(&mut out, c, |n, row| row.copy_from_slice(x.row(self.index[n])));
        NdBuffer::new(&[self.index.len(), c], out)
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let x = inputs[0];
        Ok(vec![want(wants, 0, || {
            let mut out = NdBuffer::zeros(x.shape());
            for (n, &i) in self.index.iter().enumerate() {
                for (o, v) in out.row_mut(i).iter_mut().zip(g.row(n)) {
                    *o += v;
                }
            }
            out
        })])
    }
}

/// Ordered scatter-add of `[N x C]` rows into `[R x C]`.
///
/// Entries are grouped by destination row and each destination sums its
/// entries in ascending input position, so the result is bit-reproducible
/// and independent of input order among distinct values' positions.
pub struct ScatterAddRows {
    out_shape: Vec<usize>,
    /// CSR: destination row -> entry positions, ascending.
    offsets: Vec<usize>,
    entries: Vec<usize>,
    n_inputs: usize,
}

impl ScatterAddRows {
    /// `out_shape` is the full output shape; its leading extents enumerate rows.
    pub fn new(out_shape: &[usize], index: &[usize]) -> Result<Self> {
        let cols = *out_shape.last().ok_or_else(|| Error::dim("empty output shape"))?;
        let rows = out_shape.iter().product::<usize>() / cols.max(1);
        let mut counts = vec![0usize; rows + 1];
        for (n, &r) in index.iter().enumerate() {
            if r >= rows {
                return Err(Error::index(format!(
                    "scatter entry {n} targets row {r} outside {rows} rows"
                )));
            }
            counts[r + 1] += 1;
        }
        for i in 0..rows {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut entries = vec![0; index.len()];
        for (n, &r) in index.iter().enumerate() {
            entries[fill[r]] = n;
            fill[r] += 1;
        }
        Ok(Self {
            out_shape: out_shape.to_vec(),
            offsets: counts,
            entries,
            n_inputs: index.len(),
        })
    }

    /// Number of entries landing in each destination row.
    pub fn counts(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

impl Kernel for ScatterAddRows {
    fn name(&self) -> &str {
        "scatter_add"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let v = inputs[0];
        let c = *self.out_shape.last().expect("shape");
        if v.rows() != self.n_inputs || v.cols() != c {
            return Err(Error::dim(format!(
                "scatter values {:?} do not match {} entries of width {c}",
                v.shape(),
                self.n_inputs
            )));
        }
        let mut out = NdBuffer::zeros(&self.out_shape);
        par::for_each_row(out.data_mut(), c, |r, row| {
            for &n in &self.entries[self.offsets[r]..self.offsets[r + 1]] {
                for (o, x) in row.iter_mut().zip(v.row(n)) {
                    *o += x;
                }
            }
        });
        Ok(out)
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let v = inputs[0];
        Ok(vec![want(wants, 0, || {
            let c = v.cols();
            let mut dest = vec![0usize; self.n_inputs];
            for r in 0..self.offsets.len() - 1 {
                for &n in &self.entries[self.offsets[r]..self.offsets[r + 1]] {
                    dest[n] = r;
                }
            }
            let mut out = vec![0.0; v.len()];
            par::for_each_row(&mut out, c, |n, row| row.copy_from_slice(g.row(dest[n])));
            NdBuffer::new(v.shape(), out).expect("shape")
        })])
    }
}

/// Scatter-add of per-entry rows into cells of a `[H x W x C]` target.
pub fn scatter_add(
    target: &NdBuffer,
    indices: &[(usize, usize)],
    values: &NdBuffer,
) -> Result<NdBuffer> {
    let (h, w) = match target.shape() {
        &[h, w, _] => (h, w),
        s => return Err(Error::dim(format!("scatter target must be [H x W x C], got {s:?}"))),
    };
    let mut flat = Vec::with_capacity(indices.len());
    for (n, &(r, c)) in indices.iter().enumerate() {
        if r >= h || c >= w {
            return Err(Error::index(format!(
                "scatter entry {n} at ({r}, {c}) outside {h}x{w}"
            )));
        }
        flat.push(r * w + c);
    }
    let k = ScatterAddRows::new(target.shape(), &flat)?;
    let mut out = k.forward(&[values])?;
    out.add_assign(target);
    Ok(out)
}

/// Multiplies row `n` by a constant `scales[n]`.
pub struct RowScale {
    pub scales: Arc<Vec<f64>>,
}

impl Kernel for RowScale {
    fn name(&self) -> &str {
        "row_scale"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let x = inputs[0];
        if x.rows() != self.scales.len() {
            return Err(Error::dim(format!(
                "{} row scales for {:?}",
                self.scales.len(),
                x.shape()
            )));
        }
        let mut out = x.clone();
        let c = x.cols();
        par::for_each_row(out.data_mut(), c, |i, row| {
            let s = self.scales[i];
            row.iter_mut().for_each(|v| *v *= s);
        });
        Ok(out)
    }

    fn backward(
        &self,
        _inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        Ok(vec![want(wants, 0, || {
            let mut out = g.clone();
            let c = g.cols();
            par::for_each_row(out.data_mut(), c, |i, row| {
                let s = self.scales[i];
                row.iter_mut().for_each(|v| *v *= s);
            });
            out
        })])
    }
}

pub struct Reshape(pub Vec<usize>);

impl Kernel for Reshape {
    fn name(&self) -> &str {
        "reshape"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        inputs[0].clone().reshape(&self.0)
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let shape = inputs[0].shape().to_vec();
        Ok(vec![want(wants, 0, || g.clone().reshape(&shape).expect("shape"))])
    }
}

/// Row-wise softmax over the last axis.
pub struct SoftmaxRows;

/// Saturated (`+inf`) entries share all of the mass.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::INFINITY {
        let n = row.iter().filter(|&&v| v == m).count() as f64;
        row.iter_mut().for_each(|v| *v = if *v == m { 1.0 / n } else { 0.0 });
        return;
    }
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

impl Kernel for SoftmaxRows {
    fn name(&self) -> &str {
        "softmax"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let mut out = inputs[0].clone();
        let c = out.cols();
        par::for_each_row(out.data_mut(), c, |_, row| softmax_in_place(row));
        Ok(out)
    }

    fn backward(
        &self,
        _inputs: &[&NdBuffer],
        output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        Ok(vec![want(wants, 0, || {
            let mut out = vec![0.0; g.len()];
            let c = g.cols();
            par::for_each_row(&mut out, c, |i, row| {
                let (s, gi) = (output.row(i), g.row(i));
                let inner = dot(s, gi);
                for ((r, sv), gv) in row.iter_mut().zip(s).zip(gi) {
                    *r = sv * (gv - inner);
                }
            });
            NdBuffer::new(g.shape(), out).expect("shape")
        })])
    }
}

/// Sum of all elements, as a one-element buffer.
pub struct SumAll;

impl Kernel for SumAll {
    fn name(&self) -> &str {
        "sum"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        Ok(NdBuffer::scalar(inputs[0].sum()))
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        Ok(vec![want(wants, 0, || NdBuffer::filled(inputs[0].shape(), g.item()))])
    }
}

/// Weighted sum of scalar operands: `sum_i c_i * x_i` for one-element inputs.
pub struct WeightedScalarSum(pub Vec<f64>);

impl Kernel for WeightedScalarSum {
    fn name(&self) -> &str {
        "weighted_scalar_sum"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        if inputs.len() != self.0.len() || inputs.iter().any(|b| b.len() != 1) {
            return Err(Error::dim("weighted scalar sum needs one-element operands"));
        }
        Ok(NdBuffer::scalar(
            inputs.iter().zip(&self.0).map(|(b, c)| c * b.item()).sum(),
        ))
    }

    fn backward(
        &self,
        _inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        Ok(self
            .0
            .iter()
            .enumerate()
            .map(|(i, c)| want(wants, i, || NdBuffer::scalar(c * g.item())))
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Sampling

/// Clamp-to-edge bilinear read of a `[H x W x C]` plane at continuous
/// `(u, v)` = (column, row); texel centers sit on integer coordinates.
/// Returns the four taps as `(row, col, weight)` and the partial derivatives
/// of the weights w.r.t. `u` and `v`.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTaps {
    pub taps: [(usize, usize, f64); 4],
    /// d weight / du for each tap (0 when `u` is clamped).
    pub du: [f64; 4],
    pub dv: [f64; 4],
}

pub fn bilinear_taps(h: usize, w: usize, u: f64, v: f64) -> BilinearTaps {
    let (uc, u_free) = clamp_coord(u, w);
    let (vc, v_free) = clamp_coord(v, h);
    let u0 = (uc.floor() as usize).min(w - 1);
    let v0 = (vc.floor() as usize).min(h - 1);
    let u1 = (u0 + 1).min(w - 1);
    let v1 = (v0 + 1).min(h - 1);
    let fu = uc - u0 as f64;
    let fv = vc - v0 as f64;
    let su = if u_free { 1.0 } else { 0.0 };
    let sv = if v_free { 1.0 } else { 0.0 };
    BilinearTaps {
        taps: [
            (v0, u0, (1.0 - fu) * (1.0 - fv)),
            (v0, u1, fu * (1.0 - fv)),
            (v1, u0, (1.0 - fu) * fv),
            (v1, u1, fu * fv),
        ],
        du: [-(1.0 - fv) * su, (1.0 - fv) * su, -fv * su, fv * su],
        dv: [-(1.0 - fu) * sv, -fu * sv, (1.0 - fu) * sv, fu * sv],
    }
}

fn clamp_coord(x: f64, extent: usize) -> (f64, bool) {
    let hi = (extent - 1) as f64;
    if x <= 0.0 {
        (0.0, false)
    } else if x >= hi {
        (hi, false)
    } else {
        (x, true)
    }
}

/// Bilinear sample of a `[H x W x C]` plane at one point.
pub fn bilinear_sample(plane: &NdBuffer, uv: [f64; 2]) -> Result<Vec<f64>> {
    let (h, w, c) = plane_dims(plane)?;
    let t = bilinear_taps(h, w, uv[0], uv[1]);
    let mut out = vec![0.0; c];
    for &(r, q, wt) in &t.taps {
        axpy(wt, &plane.data()[(r * w + q) * c..(r * w + q + 1) * c], &mut out);
    }
    Ok(out)
}

pub(crate) fn plane_dims(plane: &NdBuffer) -> Result<(usize, usize, usize)> {
    match plane.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::dim(format!("expected an [H x W x C] plane, got {s:?}"))),
    }
}

/// Batched bilinear sampling: `uv` is `[N x 2K]` holding K points per row,
/// each offset by the constant per-row `base` point. Output `[N x K*C]`.
pub struct BilinearSample {
    pub base: Option<Arc<Vec<[f64; 2]>>>,
}

impl BilinearSample {
    fn point(&self, uvd: &NdBuffer, n: usize, k: usize) -> (f64, f64) {
        let row = uvd.row(n);
        let (mut u, mut v) = (row[2 * k], row[2 * k + 1]);
        if let Some(base) = &self.base {
            u += base[n][0];
            v += base[n][1];
        }
        (u, v)
    }
}

impl Kernel for BilinearSample {
    fn name(&self) -> &str {
        "bilinear_sample"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let (plane, uv) = (inputs[0], inputs[1]);
        let (h, w, c) = plane_dims(plane)?;
        if uv.rank() != 2 || uv.cols() % 2 != 0 {
            return Err(Error::dim(format!("sample points must be [N x 2K], got {:?}", uv.shape())));
        }
        let n = uv.rows();
        if self.base.as_ref().is_some_and(|b| b.len() != n) {
            return Err(Error::dim("base points do not match sample rows"));
        }
        let k = uv.cols() / 2;
        let pd = plane.data();
        let mut out = vec![0.0; n * k * c];
        par::for_each_row(&mut out, k * c, |i, row| {
            for kk in 0..k {
                let (u, v) = self.point(uv, i, kk);
                let t = bilinear_taps(h, w, u, v);
                let dst = &mut row[kk * c..(kk + 1) * c];
                for &(r, q, wt) in &t.taps {
                    axpy(wt, &pd[(r * w + q) * c..(r * w + q + 1) * c], dst);
                }
            }
        });
        NdBuffer::new(&[n, k * c], out)
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let (plane, uv) = (inputs[0], inputs[1]);
        let (h, w, c) = plane_dims(plane)?;
        let n = uv.rows();
        let k = uv.cols() / 2;
        let pd = plane.data();
        let dplane = want(wants, 0, || {
            let mut out = NdBuffer::zeros(plane.shape());
            let od = out.data_mut();
            for i in 0..n {
                let gi = g.row(i);
                for kk in 0..k {
                    let (u, v) = self.point(uv, i, kk);
                    let t = bilinear_taps(h, w, u, v);
                    for &(r, q, wt) in &t.taps {
                        axpy(wt, &gi[kk * c..(kk + 1) * c], &mut od[(r * w + q) * c..(r * w + q + 1) * c]);
                    }
                }
            }
            out
        });
        let duv = want(wants, 1, || {
            let mut out = vec![0.0; uv.len()];
            par::for_each_row(&mut out, 2 * k, |i, row| {
                let gi = g.row(i);
                for kk in 0..k {
                    let (u, v) = self.point(uv, i, kk);
                    let t = bilinear_taps(h, w, u, v);
                    let gk = &gi[kk * c..(kk + 1) * c];
                    let (mut su, mut sv) = (0.0, 0.0);
                    for (tap, (&dwu, &dwv)) in t.taps.iter().zip(t.du.iter().zip(&t.dv)) {
                        let f = dot(gk, &pd[(tap.0 * w + tap.1) * c..(tap.0 * w + tap.1 + 1) * c]);
                        su += dwu * f;
                        sv += dwv * f;
                    }
                    row[2 * kk] = su;
                    row[2 * kk + 1] = sv;
                }
            });
            NdBuffer::new(uv.shape(), out).expect("shape")
        });
        Ok(vec![dplane, duv])
    }
}

/// `out[n, :] = sum_k w[n, k] * s[n, k*C..(k+1)*C]`.
pub struct WeightedSumK;

impl Kernel for WeightedSumK {
    fn name(&self) -> &str {
        "weighted_sum_k"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let (wts, s) = (inputs[0], inputs[1]);
        let (n, k) = expect_rank2("weighted_sum_k", wts)?;
        if s.rows() != n || s.cols() % k != 0 {
            return Err(Error::dim(format!(
                "weights {:?} incompatible with samples {:?}",
                wts.shape(),
                s.shape()
            )));
        }
        let c = s.cols() / k;
        let mut out = vec![0.0; n * c];
        par::for_each_row(&mut out, c, |i, row| {
            let (wi, si) = (wts.row(i), s.row(i));
            for kk in 0..k {
                axpy(wi[kk], &si[kk * c..(kk + 1) * c], row);
            }
        });
        NdBuffer::new(&[n, c], out)
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let (wts, s) = (inputs[0], inputs[1]);
        let k = wts.cols();
        let c = s.cols() / k;
        let dw = want(wants, 0, || {
            let mut out = vec![0.0; wts.len()];
            par::for_each_row(&mut out, k, |i, row| {
                let (gi, si) = (g.row(i), s.row(i));
                for (kk, r) in row.iter_mut().enumerate() {
                    *r = dot(gi, &si[kk * c..(kk + 1) * c]);
                }
            });
            NdBuffer::new(wts.shape(), out).expect("shape")
        });
        let ds = want(wants, 1, || {
            let mut out = vec![0.0; s.len()];
            par::for_each_row(&mut out, k * c, |i, row| {
                let (gi, wi) = (g.row(i), wts.row(i));
                for kk in 0..k {
                    for (r, gv) in row[kk * c..(kk + 1) * c].iter_mut().zip(gi) {
                        *r = wi[kk] * gv;
                    }
                }
            });
            NdBuffer::new(s.shape(), out).expect("shape")
        });
        Ok(vec![dw, ds])
    }
}

// ---------------------------------------------------------------------------
// Tape shorthands

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(MatMul, &[a, b])
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(AddBias, &[x, b])
    }

    /// `x W + b` on `[N x K]` rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Elementwise(Binary::Add), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Elementwise(Binary::Sub), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Elementwise(Binary::Mul), &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Pointwise(Unary::Relu), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Pointwise(Unary::Sigmoid), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Pointwise(Unary::Scale(c)), &[x])
    }

    pub fn softplus_clamped(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(SoftplusClamped::new(lo, hi)?, &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.apply(MulScalar, &[x, s])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(ConcatCols, parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(SliceCols { start, len }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        self.apply(GatherRows { index }, &[x])
    }

    pub fn row_scale(&mut self, x: Var, scales: Arc<Vec<f64>>) -> Result<Var> {
        self.apply(RowScale { scales }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Reshape(shape.to_vec()), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.apply(SoftmaxRows, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.apply(SumAll, &[x])
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.apply(WeightedScalarSum(terms.iter().map(|t| t.1).collect()), &vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn buf(shape: &[usize], data: &[f64]) -> NdBuffer {
        NdBuffer::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let id = buf(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let col = buf(&[2, 1], &[3.0, 4.0]);
        assert_eq!(matmul(&id, &col).unwrap().data(), &[3.0, 4.0]);
        let p = matmul(&buf(&[1, 1], &[2.0]), &buf(&[1, 1], &[5.0])).unwrap();
        assert_eq!(p.data(), &[10.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&NdBuffer::zeros(&[2, 3]), &NdBuffer::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn softplus_clamped_values() {
        let x = buf(&[3], &[0.0, -100.0, 3.0]);
        let y = softplus_clamped(&x, 0.1, 10.0).unwrap();
        assert!((y.data()[0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(y.data()[1], 0.1);
        // log(1 + e^3)
        assert!((y.data()[2] - 3.048_587_351_573_742).abs() < 1e-12);
        assert!(softplus_clamped(&x, 1.0, 1.0).is_err());
        assert!(softplus_clamped(&x, 2.0, 1.0).is_err());
    }

    #[test]
    fn softplus_clamped_gradient_zero_outside_band() {
        let k = SoftplusClamped::new(0.1, 10.0).unwrap();
        let x = buf(&[3], &[-100.0, 0.0, 100.0]);
        let y = k.forward(&[&x]).unwrap();
        let g = k.backward(&[&x], &y, &NdBuffer::filled(&[3], 1.0), &[true]).unwrap();
        let g = g[0].as_ref().unwrap();
        assert_eq!(g.data()[0], 0.0);
        assert!((g.data()[1] - 0.5).abs() < 1e-15);
        assert_eq!(g.data()[2], 0.0);
    }

    #[test]
    fn bilinear_lattice_midpoint_and_clamp() {
        // 4x5 plane, one channel, value = 10*row + col
        let data: Vec<f64> = (0..4).flat_map(|r| (0..5).map(move |c| (10 * r + c) as f64)).collect();
        let plane = buf(&[4, 5, 1], &data);
        assert_eq!(bilinear_sample(&plane, [2.0, 3.0]).unwrap(), vec![32.0]);
        let two = buf(&[1, 2, 1], &[0.0, 1.0]);
        assert_eq!(bilinear_sample(&two, [0.5, 0.0]).unwrap(), vec![0.5]);
        assert_eq!(bilinear_sample(&plane, [-5.0, -5.0]).unwrap(), vec![0.0]);
        assert_eq!(bilinear_sample(&plane, [99.0, 99.0]).unwrap(), vec![34.0]);
    }

    #[test]
    fn scatter_add_single_and_colliding() {
        let target = NdBuffer::zeros(&[2, 2, 2]);
        let one = scatter_add(&target, &[(1, 0)], &buf(&[1, 2], &[3.0, 4.0])).unwrap();
        assert_eq!(one.data(), &[0.0, 0.0, 0.0, 0.0, 3.0, 4.0, 0.0, 0.0]);
        let two = scatter_add(&target, &[(0, 1), (0, 1)], &buf(&[2, 2], &[1.0, 2.0, 10.0, 20.0])).unwrap();
        assert_eq!(two.row(1), &[11.0, 22.0]);
    }

    #[test]
    fn scatter_add_reports_offending_entry() {
        let err = scatter_add(&NdBuffer::zeros(&[2, 2, 1]), &[(0, 0), (2, 1)], &NdBuffer::zeros(&[2, 1]))
            .unwrap_err();
        assert!(matches!(err, Error::Index(_)));
        assert!(err.to_string().contains("entry 1 at (2, 1)"));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = buf(&[2, 3], &[1.0, 2.0, 3.0, -1000.0, 0.0, 1000.0]);
        let y = SoftmaxRows.forward(&[&x]).unwrap();
        for i in 0..2 {
            assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }
}
