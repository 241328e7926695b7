use super::Tensor;
use crate::error::{dim_err, Result};

/// `out[m×n] = a[m×k] · b[k×n]`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `out[m×k] = g[m×n] · b[k×n]ᵀ`
fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `out[k×n] = a[m×k]ᵀ · g[m×n]`
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Interprets a 1-D tensor as a single row.
fn as_rows(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [n] => Ok((1, *n)),
        [m, n] => Ok((*m, *n)),
        s => dim_err(format!("{op}: expected 1-D or 2-D input, got shape {s:?}")),
    }
}

fn unary(
    x: &Tensor,
    op: &'static str,
    f: impl Fn(f64) -> f64,
    backward: super::BackwardFn,
) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(x.shape().to_vec(), data, op, vec![x.clone()], backward)
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return dim_err(format!(
                "matmul: inner dimensions differ for shapes {:?} and {:?}",
                self.shape(),
                other.shape()
            ));
        }
        let data = mm(&self.data(), &other.data(), m, k, n);
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            "matmul",
            vec![self.clone(), other.clone()],
            Box::new(move |p, g| {
                let ga = p[0]
                    .requires_grad()
                    .then(|| mm_nt(g, &p[1].data(), m, n, k));
                let gb = p[1]
                    .requires_grad()
                    .then(|| mm_tn(&p[0].data(), g, m, k, n));
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "add",
            vec![self.clone(), other.clone()],
            Box::new(|_, g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "sub",
            vec![self.clone(), other.clone()],
            Box::new(|_, g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "mul",
            vec![self.clone(), other.clone()],
            Box::new(|p, g| {
                let ga = p[0].requires_grad().then(|| {
                    g.iter().zip(p[1].data().iter()).map(|(g, b)| g * b).collect()
                });
                let gb = p[1].requires_grad().then(|| {
                    g.iter().zip(p[0].data().iter()).map(|(g, a)| g * a).collect()
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, k: f64) -> Tensor {
        unary(
            self,
            "scale",
            |v| v * k,
            Box::new(move |_, g| vec![Some(g.iter().map(|v| v * k).collect())]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(
            self,
            "add_scalar",
            |v| v + c,
            Box::new(|_, g| vec![Some(g.to_vec())]),
        )
    }

    /// Adds `bias[n]` to every row of `self[m×n]`.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("add_row")?;
        if bias.shape() != [n] {
            return dim_err(format!(
                "add_row: bias shape {:?} does not match row width of {:?}",
                bias.shape(),
                self.shape()
            ));
        }
        let mut data = self.to_vec();
        {
            let b = bias.data();
            for row in data.chunks_mut(n) {
                row.iter_mut().zip(b.iter()).for_each(|(x, b)| *x += b);
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            "add_row",
            vec![self.clone(), bias.clone()],
            Box::new(move |p, g| {
                let gb = p[1].requires_grad().then(|| {
                    let mut acc = vec![0.0; n];
                    for row in g.chunks(n) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    acc
                });
                vec![Some(g.to_vec()), gb]
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let src = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![n, m],
            data,
            "transpose",
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = g[j * m + i];
                    }
                }
                vec![Some(out)]
            }),
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return dim_err("concat: no inputs");
        };
        let rank = first.shape().len();
        if axis >= rank {
            return dim_err(format!("concat: axis {axis} out of range for rank {rank}"));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != rank
                || s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return dim_err(format!(
                    "concat: shape {:?} incompatible with {:?} along axis {axis}",
                    s,
                    first.shape()
                ));
            }
        }
        let (outer, _, inner) = around_axis(first.shape(), axis);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        {
            let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (d, &w) in datas.iter().zip(&widths) {
                    data.extend_from_slice(&d[o * w..(o + 1) * w]);
                }
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        Ok(Tensor::from_op(
            shape,
            data,
            "concat",
            parts.to_vec(),
            Box::new(move |p, g| {
                let mut out: Vec<Vec<f64>> =
                    widths.iter().map(|w| Vec::with_capacity(outer * w)).collect();
                for o in 0..outer {
                    let mut off = o * total;
                    for (buf, &w) in out.iter_mut().zip(&widths) {
                        buf.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                out.into_iter()
                    .zip(p)
                    .map(|(buf, t)| t.requires_grad().then_some(buf))
                    .collect()
            }),
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank {
            return dim_err(format!("slice: axis {axis} out of range for rank {rank}"));
        }
        let len = self.shape()[axis];
        if start >= end || end > len {
            return dim_err(format!(
                "slice: range {start}..{end} invalid for axis {axis} of shape {:?}",
                self.shape()
            ));
        }
        let (outer, _, inner) = around_axis(self.shape(), axis);
        let full = len * inner;
        let (lo, hi) = (start * inner, end * inner);
        let src = self.data();
        let mut data = Vec::with_capacity(outer * (hi - lo));
        for o in 0..outer {
            data.extend_from_slice(&src[o * full + lo..o * full + hi]);
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape[axis] = end - start;
        Ok(Tensor::from_op(
            shape,
            data,
            "slice",
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut out = vec![0.0; outer * full];
                let w = hi - lo;
                for o in 0..outer {
                    out[o * full + lo..o * full + hi].copy_from_slice(&g[o * w..(o + 1) * w]);
                }
                vec![Some(out)]
            }),
        ))
    }

    /// Gathers rows (first axis) by index; repeated indices are allowed and
    /// their gradients add.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        if rank == 0 || indices.is_empty() {
            return dim_err("select_rows: need a non-scalar tensor and at least one index");
        }
        let rows = self.shape()[0];
        let width = self.numel() / rows;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return dim_err(format!("select_rows: index {bad} out of range for {rows} rows"));
        }
        let src = self.data();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            shape,
            data,
            "select_rows",
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut out = vec![0.0; rows * width];
                for (k, &i) in idx.iter().enumerate() {
                    out[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&g[k * width..(k + 1) * width])
                        .for_each(|(o, v)| *o += v);
                }
                vec![Some(out)]
            }),
        ))
    }

    /// `out[b] = self[b, cols[b]]` for a `[B×A]` tensor.
    pub fn pick(&self, cols: &[usize]) -> Result<Tensor> {
        let (b, a) = self.dims2("pick")?;
        if cols.len() != b {
            return dim_err(format!("pick: {} indices for {b} rows", cols.len()));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= a) {
            return dim_err(format!("pick: column {bad} out of range for width {a}"));
        }
        let src = self.data();
        let data = cols.iter().enumerate().map(|(r, &c)| src[r * a + c]).collect();
        drop(src);
        let cols = cols.to_vec();
        Ok(Tensor::from_op(
            vec![b],
            data,
            "pick",
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut out = vec![0.0; b * a];
                for (r, &c) in cols.iter().enumerate() {
                    out[r * a + c] = g[r];
                }
                vec![Some(out)]
            }),
        ))
    }

    /// Repeats a `[B]` vector across `n` columns, giving `[B×n]`.
    pub fn broadcast_cols(&self, n: usize) -> Result<Tensor> {
        let [b] = *self.shape() else {
            return dim_err(format!("broadcast_cols: expected 1-D input, got {:?}", self.shape()));
        };
        if n == 0 {
            return dim_err("broadcast_cols: zero columns");
        }
        let data = self.data().iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        Ok(Tensor::from_op(
            vec![b, n],
            data,
            "broadcast_cols",
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(g.chunks(n).map(|r| r.iter().sum()).collect())]),
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != self.numel() {
            return dim_err(format!("reshape: {:?} -> {shape:?}", self.shape()));
        }
        Ok(Tensor::from_op(
            shape,
            self.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.to_vec())]),
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![],
            vec![s],
            "sum",
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![],
            vec![s / n as f64],
            "mean",
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(vec![g[0] / n as f64; n])]),
        )
    }

    pub fn exp(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v.exp()).collect();
        let saved = out.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            "exp",
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(g.iter().zip(&saved).map(|(g, y)| g * y).collect())]),
        )
    }

    /// Natural logarithm; non-positive entries give `-inf`/NaN as in `f64::ln`.
    pub fn log(&self) -> Tensor {
        unary(
            self,
            "log",
            f64::ln,
            Box::new(|p, g| {
                vec![Some(g.iter().zip(p[0].data().iter()).map(|(g, x)| g / x).collect())]
            }),
        )
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&self) -> Tensor {
        unary(
            self,
            "relu",
            |v| if v > 0.0 { v } else { 0.0 },
            Box::new(|p, g| {
                vec![Some(
                    g.iter()
                        .zip(p[0].data().iter())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    /// Row-wise softmax with max subtraction. 1-D input is one row.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = as_rows(self, "softmax_rows")?;
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let saved = out.clone();
        debug_assert_eq!(saved.len(), m * n);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            "softmax_rows",
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; g.len()];
                for ((gx, y), g) in gx.chunks_mut(n).zip(saved.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                    for ((o, y), g) in gx.iter_mut().zip(y).zip(g) {
                        *o = y * (g - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Row-wise `x - logsumexp(x)`, stabilised by the row maximum.
    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let (_, n) = as_rows(self, "log_softmax_rows")?;
        let mut out = self.to_vec();
        let mut probs = vec![0.0; out.len()];
        for (row, prow) in out.chunks_mut(n).zip(probs.chunks_mut(n)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (v, p) in row.iter_mut().zip(prow.iter_mut()) {
                *v -= lse;
                *p = v.exp();
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            "log_softmax_rows",
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; g.len()];
                for ((gx, p), g) in gx.chunks_mut(n).zip(probs.chunks(n)).zip(g.chunks(n)) {
                    let total: f64 = g.iter().sum();
                    for ((o, p), g) in gx.iter_mut().zip(p).zip(g) {
                        *o = g - p * total;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by `k`.
    /// With `k != 1` the recorded backward rule is deliberately wrong, which
    /// makes this the fault-injection point for the gradient checker.
    pub fn grad_scale(&self, k: f64) -> Tensor {
        unary(
            self,
            "grad_scale",
            |v| v,
            Box::new(move |_, g| vec![Some(g.iter().map(|v| v * k).collect())]),
        )
    }
}
