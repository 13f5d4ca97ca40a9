//! Forward operations and their vector-Jacobian products.
//!
//! Every constructor validates shapes, computes the forward value eagerly and
//! records an `Op` plus parent handles; `backprop_node` replays the matching
//! VJP. Broadcast rules are deliberately narrow: elementwise same-shape, a
//! single row over the leading axis, or a scalar.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// rhs is one row repeated over the rows of lhs
    Row,
    Scalar,
}

pub(crate) enum Op {
    Leaf,
    MatMul,
    Add(Broadcast),
    Mul,
    Scale(f64),
    Tanh,
    Relu,
    Sigmoid,
    Ln,
    SoftmaxLast,
    LayerNorm { eps: f64 },
    Embedding { ids: Vec<usize> },
    Conv2d { stride: usize, pad: usize },
    GlobalAvgPool,
    BceWithLogits { targets: Vec<f64> },
    CrossEntropyLogits { targets: Vec<usize> },
    GatherRows { ids: Vec<usize> },
    ScatterCols { ids: Vec<usize> },
    AdditiveScores,
    ConcatCols,
    ConcatRows,
    SliceCols { from: usize },
    SliceRows { from: usize },
    Transpose2d,
    Reshape,
    Sum,
}

// ── matmul kernels ───────────────────────────────────────────────────

/// C[m,n] = A[m,k] · B[k,n]
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] · B[k,n]ᵀ
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                s += av * bv;
            }
            c[i * k + p] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += aip * bv;
            }
        }
    }
    c
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let shape = t.shape();
    if shape.len() != 2 {
        return Err(TensorError::InvalidShape {
            op,
            expected: "a rank-2 tensor",
            got: shape,
        });
    }
    Ok((shape[0], shape[1]))
}

/// Rows × last-axis view used by softmax/layer-norm style ops.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap();
    (shape.iter().product::<usize>() / cols, cols)
}

impl Tensor {
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(rhs, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let data = self.with_data(|a| rhs.with_data(|b| mm_nn(a, b, m, k, n)));
        Ok(Tensor::make(
            data,
            vec![m, n],
            vec![self.clone(), rhs.clone()],
            Op::MatMul,
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let ls = self.shape();
        let rs = rhs.shape();
        let bcast = if ls == rs {
            Broadcast::Same
        } else if rs == [1] {
            Broadcast::Scalar
        } else {
            let cols = *ls.last().unwrap();
            let row_like = rs == [cols] || rs == [1, cols];
            if row_like && self.numel() % cols == 0 {
                Broadcast::Row
            } else {
                return Err(TensorError::ShapeMismatch {
                    op: "add",
                    left: ls,
                    right: rs,
                });
            }
        };
        let data = self.with_data(|a| {
            rhs.with_data(|b| match bcast {
                Broadcast::Same => a.iter().zip(b.iter()).map(|(x, y)| x + y).collect(),
                Broadcast::Scalar => a.iter().map(|x| x + b[0]).collect(),
                Broadcast::Row => {
                    let cols = b.len();
                    a.iter()
                        .enumerate()
                        .map(|(i, x)| x + b[i % cols])
                        .collect()
                }
            })
        });
        Ok(Tensor::make(
            data,
            ls,
            vec![self.clone(), rhs.clone()],
            Op::Add(bcast),
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let data = self.with_data(|a| {
            rhs.with_data(|b| a.iter().zip(b.iter()).map(|(x, y)| x * y).collect())
        });
        Ok(Tensor::make(
            data,
            self.shape(),
            vec![self.clone(), rhs.clone()],
            Op::Mul,
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| x * factor).collect());
        Tensor::make(data, self.shape(), vec![self.clone()], Op::Scale(factor))
    }

    pub fn tanh(&self) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| x.tanh()).collect());
        Tensor::make(data, self.shape(), vec![self.clone()], Op::Tanh)
    }

    pub fn relu(&self) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| x.max(0.0)).collect());
        Tensor::make(data, self.shape(), vec![self.clone()], Op::Relu)
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| sigmoid(*x)).collect());
        Tensor::make(data, self.shape(), vec![self.clone()], Op::Sigmoid)
    }

    /// Natural log; inputs must be strictly positive.
    pub fn ln(&self) -> Result<Tensor> {
        let ok = self.with_data(|a| a.iter().all(|x| x.is_finite() && *x > 0.0));
        if !ok {
            return Err(TensorError::NumericDomain { op: "ln" });
        }
        let data = self.with_data(|a| a.iter().map(|x| x.ln()).collect());
        Ok(Tensor::make(data, self.shape(), vec![self.clone()], Op::Ln))
    }

    /// Softmax over the last axis, numerically stabilized by the row max.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let finite = self.with_data(|a| a.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(TensorError::NumericDomain { op: "softmax" });
        }
        let shape = self.shape();
        let (rows, cols) = rows_cols(&shape);
        let data = self.with_data(|a| {
            let mut out = vec![0.0; a.len()];
            for r in 0..rows {
                let row = &a[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let orow = &mut out[r * cols..(r + 1) * cols];
                let mut sum = 0.0;
                for (o, &x) in orow.iter_mut().zip(row.iter()) {
                    *o = (x - max).exp();
                    sum += *o;
                }
                for o in orow.iter_mut() {
                    *o /= sum;
                }
            }
            out
        });
        Ok(Tensor::make(
            data,
            shape,
            vec![self.clone()],
            Op::SoftmaxLast,
        ))
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (m, n) = dims2(self, "transpose2d")?;
        let data = self.with_data(|a| {
            let mut out = vec![0.0; a.len()];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a[i * n + j];
                }
            }
            out
        });
        Ok(Tensor::make(
            data,
            vec![n, m],
            vec![self.clone()],
            Op::Transpose2d,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                expected: "a shape with matching element count",
                got: shape.to_vec(),
            });
        }
        Ok(Tensor::make(
            self.data(),
            shape.to_vec(),
            vec![self.clone()],
            Op::Reshape,
        ))
    }

    pub fn concat_cols(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, p) = dims2(self, "concat_cols")?;
        let (m2, q) = dims2(rhs, "concat_cols")?;
        if m != m2 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let data = self.with_data(|a| {
            rhs.with_data(|b| {
                let mut out = Vec::with_capacity(m * (p + q));
                for i in 0..m {
                    out.extend_from_slice(&a[i * p..(i + 1) * p]);
                    out.extend_from_slice(&b[i * q..(i + 1) * q]);
                }
                out
            })
        });
        Ok(Tensor::make(
            data,
            vec![m, p + q],
            vec![self.clone(), rhs.clone()],
            Op::ConcatCols,
        ))
    }

    pub fn concat_rows(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, n) = dims2(self, "concat_rows")?;
        let (m2, n2) = dims2(rhs, "concat_rows")?;
        if n != n2 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let data = self.with_data(|a| {
            rhs.with_data(|b| {
                let mut out = Vec::with_capacity((m + m2) * n);
                out.extend_from_slice(a);
                out.extend_from_slice(b);
                out
            })
        });
        Ok(Tensor::make(
            data,
            vec![m + m2, n],
            vec![self.clone(), rhs.clone()],
            Op::ConcatRows,
        ))
    }

    pub fn slice_rows(&self, from: usize, to: usize) -> Result<Tensor> {
        let (m, n) = dims2(self, "slice_rows")?;
        if from >= to || to > m {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: to,
                bound: m,
            });
        }
        let data = self.with_data(|a| a[from * n..to * n].to_vec());
        Ok(Tensor::make(
            data,
            vec![to - from, n],
            vec![self.clone()],
            Op::SliceRows { from },
        ))
    }

    pub fn slice_cols(&self, from: usize, to: usize) -> Result<Tensor> {
        let (m, n) = dims2(self, "slice_cols")?;
        if from >= to || to > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: to,
                bound: n,
            });
        }
        let w = to - from;
        let data = self.with_data(|a| {
            let mut out = Vec::with_capacity(m * w);
            for i in 0..m {
                out.extend_from_slice(&a[i * n + from..i * n + to]);
            }
            out
        });
        Ok(Tensor::make(
            data,
            vec![m, w],
            vec![self.clone()],
            Op::SliceCols { from },
        ))
    }

    pub fn sum(&self) -> Tensor {
        let total = self.with_data(|a| a.iter().sum());
        Tensor::make(vec![total], vec![1], vec![self.clone()], Op::Sum)
    }

    /// out[i] = self[i, ids[i]] for a rank-2 tensor; result has shape [rows].
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (m, n) = dims2(self, "gather_rows")?;
        if ids.len() != m {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                expected: "one index per row",
                got: vec![ids.len()],
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                bound: n,
            });
        }
        let data = self.with_data(|a| {
            ids.iter()
                .enumerate()
                .map(|(i, &j)| a[i * n + j])
                .collect()
        });
        Ok(Tensor::make(
            data,
            vec![m],
            vec![self.clone()],
            Op::GatherRows { ids: ids.to_vec() },
        ))
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

/// Row lookup: table is [vocab, width], output is [ids.len(), width].
pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let shape = table.shape();
    if shape.len() != 2 {
        return Err(TensorError::InvalidShape {
            op: "embedding",
            expected: "a rank-2 table",
            got: shape,
        });
    }
    let (vocab, width) = (shape[0], shape[1]);
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(TensorError::IndexOutOfRange {
            op: "embedding",
            index: bad,
            bound: vocab,
        });
    }
    if ids.is_empty() {
        return Err(TensorError::InvalidShape {
            op: "embedding",
            expected: "a non-empty id list",
            got: vec![0],
        });
    }
    let data = table.with_data(|t| {
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&t[i * width..(i + 1) * width]);
        }
        out
    });
    Ok(Tensor::make(
        data,
        vec![ids.len(), width],
        vec![table.clone()],
        Op::Embedding { ids: ids.to_vec() },
    ))
}

/// Layer normalization over the last axis with learnable gain and shift.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let shape = x.shape();
    let (rows, cols) = rows_cols(&shape);
    if gamma.shape() != [cols] || beta.shape() != [cols] {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            left: shape,
            right: gamma.shape(),
        });
    }
    let data = x.with_data(|a| {
        gamma.with_data(|g| {
            beta.with_data(|b| {
                let mut out = vec![0.0; a.len()];
                for r in 0..rows {
                    let row = &a[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let orow = &mut out[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        orow[j] = (row[j] - mean) * inv * g[j] + b[j];
                    }
                }
                out
            })
        })
    });
    Ok(Tensor::make(
        data,
        shape,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Op::LayerNorm { eps },
    ))
}

/// 2-D convolution over a [channels, h, w] input with an
/// [out_channels, channels, kh, kw] kernel and per-channel bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 3 {
        return Err(TensorError::InvalidShape {
            op: "conv2d",
            expected: "input of rank 3 [c, h, w]",
            got: xs,
        });
    }
    if ws.len() != 4 || ws[1] != xs[0] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: xs,
            right: ws,
        });
    }
    let (cin, h, w) = (xs[0], xs[1], xs[2]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    if bias.shape() != [cout] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: vec![cout],
            right: bias.shape(),
        });
    }
    if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
        return Err(TensorError::InvalidShape {
            op: "conv2d",
            expected: "kernel no larger than padded input and stride >= 1",
            got: vec![kh, kw],
        });
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let data = x.with_data(|xd| {
        weight.with_data(|wd| {
            bias.with_data(|bd| {
                let mut out = vec![0.0; cout * oh * ow];
                for o in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bd[o];
                            for c in 0..cin {
                                for u in 0..kh {
                                    let iy = (oy * stride + u) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let xrow = &xd[c * h * w + iy as usize * w..];
                                    let wrow = &wd[((o * cin + c) * kh + u) * kw..];
                                    for v in 0..kw {
                                        let ix = (ox * stride + v) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc += xrow[ix as usize] * wrow[v];
                                    }
                                }
                            }
                            out[(o * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
                out
            })
        })
    });
    Ok(Tensor::make(
        data,
        vec![cout, oh, ow],
        vec![x.clone(), weight.clone(), bias.clone()],
        Op::Conv2d { stride, pad },
    ))
}

/// Spatial mean per channel: [c, h, w] -> [1, c].
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(TensorError::InvalidShape {
            op: "global_avg_pool",
            expected: "input of rank 3 [c, h, w]",
            got: xs,
        });
    }
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let plane = h * w;
    let data = x.with_data(|xd| {
        (0..c)
            .map(|ch| xd[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect()
    });
    Ok(Tensor::make(
        data,
        vec![1, c],
        vec![x.clone()],
        Op::GlobalAvgPool,
    ))
}

/// Mean binary cross-entropy on logits, fused with the sigmoid for stability.
pub fn bce_with_logits(logits: &Tensor, targets: &[f64]) -> Result<Tensor> {
    if logits.numel() != targets.len() {
        return Err(TensorError::InvalidShape {
            op: "bce_with_logits",
            expected: "one target per logit",
            got: vec![targets.len()],
        });
    }
    let finite = logits.with_data(|a| a.iter().all(|x| x.is_finite()));
    if !finite {
        return Err(TensorError::NumericDomain {
            op: "bce_with_logits",
        });
    }
    let n = targets.len() as f64;
    let loss = logits.with_data(|z| {
        z.iter()
            .zip(targets.iter())
            .map(|(&z, &y)| z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln())
            .sum::<f64>()
            / n
    });
    Ok(Tensor::make(
        vec![loss],
        vec![1],
        vec![logits.clone()],
        Op::BceWithLogits {
            targets: targets.to_vec(),
        },
    ))
}

/// Mean negative log-likelihood on logits [rows, classes], fused with
/// log-softmax for stability.
pub fn cross_entropy_logits(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (rows, cols) = dims2(logits, "cross_entropy")?;
    if targets.len() != rows {
        return Err(TensorError::InvalidShape {
            op: "cross_entropy",
            expected: "one target per row",
            got: vec![targets.len()],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
        return Err(TensorError::IndexOutOfRange {
            op: "cross_entropy",
            index: bad,
            bound: cols,
        });
    }
    let finite = logits.with_data(|a| a.iter().all(|x| x.is_finite()));
    if !finite {
        return Err(TensorError::NumericDomain { op: "cross_entropy" });
    }
    let loss = logits.with_data(|a| {
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &a[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        total / rows as f64
    });
    Ok(Tensor::make(
        vec![loss],
        vec![1],
        vec![logits.clone()],
        Op::CrossEntropyLogits {
            targets: targets.to_vec(),
        },
    ))
}

/// Additive-attention scores: out[i, j] = Σ_d v[d] · tanh(keys[j, d] + queries[i, d]).
pub fn additive_scores(keys: &Tensor, queries: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, d) = dims2(keys, "additive_scores")?;
    let (t, d2) = dims2(queries, "additive_scores")?;
    if d != d2 || v.shape() != [d] {
        return Err(TensorError::ShapeMismatch {
            op: "additive_scores",
            left: keys.shape(),
            right: queries.shape(),
        });
    }
    let data = keys.with_data(|kd| {
        queries.with_data(|qd| {
            v.with_data(|vd| {
                let mut out = vec![0.0; t * n];
                for i in 0..t {
                    let qrow = &qd[i * d..(i + 1) * d];
                    for j in 0..n {
                        let krow = &kd[j * d..(j + 1) * d];
                        let mut s = 0.0;
                        for ((&kv, &qv), &vv) in krow.iter().zip(qrow.iter()).zip(vd.iter()) {
                            s += vv * (kv + qv).tanh();
                        }
                        out[i * n + j] = s;
                    }
                }
                out
            })
        })
    });
    Ok(Tensor::make(
        data,
        vec![t, n],
        vec![keys.clone(), queries.clone(), v.clone()],
        Op::AdditiveScores,
    ))
}

/// Scatter attention mass onto vocabulary ids: out[i, ids[j]] += attn[i, j].
pub fn scatter_cols(attn: &Tensor, ids: &[usize], vocab: usize) -> Result<Tensor> {
    let (t, m) = dims2(attn, "scatter_cols")?;
    if ids.len() != m {
        return Err(TensorError::InvalidShape {
            op: "scatter_cols",
            expected: "one vocab id per attention column",
            got: vec![ids.len()],
        });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(TensorError::IndexOutOfRange {
            op: "scatter_cols",
            index: bad,
            bound: vocab,
        });
    }
    let data = attn.with_data(|a| {
        let mut out = vec![0.0; t * vocab];
        for i in 0..t {
            let arow = &a[i * m..(i + 1) * m];
            let orow = &mut out[i * vocab..(i + 1) * vocab];
            for (j, &w) in arow.iter().enumerate() {
                orow[ids[j]] += w;
            }
        }
        out
    });
    Ok(Tensor::make(
        data,
        vec![t, vocab],
        vec![attn.clone()],
        Op::ScatterCols { ids: ids.to_vec() },
    ))
}

// ── backward dispatch ────────────────────────────────────────────────

/// Applies the VJP for one node, pushing contributions into each parent.
/// Deltas are staged in temporaries so a tensor appearing as both parents
/// (e.g. `mul(x, x)`) accumulates twice without aliasing borrows.
pub(crate) fn backprop_node(node: &Tensor, gout: &[f64]) {
    let inner = node.inner.borrow();
    let parents = inner.parents.clone();
    let mut deltas: Vec<(usize, Vec<f64>)> = Vec::new();

    let wants = |idx: usize| {
        let p = parents[idx].inner.borrow();
        p.requires_grad || p.needs_grad
    };

    match &inner.op {
        Op::Leaf => {}
        Op::MatMul => {
            let a = parents[0].inner.borrow();
            let b = parents[1].inner.borrow();
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = b.shape[1];
            if wants(0) {
                deltas.push((0, mm_nt(gout, &b.data, m, n, k)));
            }
            if wants(1) {
                deltas.push((1, mm_tn(&a.data, gout, m, k, n)));
            }
        }
        Op::Add(bcast) => {
            if wants(0) {
                deltas.push((0, gout.to_vec()));
            }
            if wants(1) {
                let rlen = parents[1].inner.borrow().data.len();
                let d = match bcast {
                    Broadcast::Same => gout.to_vec(),
                    Broadcast::Scalar => vec![gout.iter().sum()],
                    Broadcast::Row => {
                        let mut d = vec![0.0; rlen];
                        for (i, &g) in gout.iter().enumerate() {
                            d[i % rlen] += g;
                        }
                        d
                    }
                };
                deltas.push((1, d));
            }
        }
        Op::Mul => {
            if wants(0) {
                let b = parents[1].inner.borrow();
                deltas.push((0, gout.iter().zip(b.data.iter()).map(|(g, y)| g * y).collect()));
            }
            if wants(1) {
                let a = parents[0].inner.borrow();
                deltas.push((1, gout.iter().zip(a.data.iter()).map(|(g, x)| g * x).collect()));
            }
        }
        Op::Scale(factor) => {
            if wants(0) {
                deltas.push((0, gout.iter().map(|g| g * factor).collect()));
            }
        }
        Op::Tanh => {
            if wants(0) {
                let y = &inner.data;
                deltas.push((0, gout.iter().zip(y.iter()).map(|(g, y)| g * (1.0 - y * y)).collect()));
            }
        }
        Op::Relu => {
            if wants(0) {
                let x = parents[0].inner.borrow();
                deltas.push((
                    0,
                    gout.iter()
                        .zip(x.data.iter())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                ));
            }
        }
        Op::Sigmoid => {
            if wants(0) {
                let y = &inner.data;
                deltas.push((0, gout.iter().zip(y.iter()).map(|(g, y)| g * y * (1.0 - y)).collect()));
            }
        }
        Op::Ln => {
            if wants(0) {
                let x = parents[0].inner.borrow();
                deltas.push((0, gout.iter().zip(x.data.iter()).map(|(g, x)| g / x).collect()));
            }
        }
        Op::SoftmaxLast => {
            if wants(0) {
                let y = &inner.data;
                let cols = *inner.shape.last().unwrap();
                let rows = y.len() / cols;
                let mut d = vec![0.0; y.len()];
                for r in 0..rows {
                    let yrow = &y[r * cols..(r + 1) * cols];
                    let grow = &gout[r * cols..(r + 1) * cols];
                    let dot: f64 = yrow.iter().zip(grow.iter()).map(|(y, g)| y * g).sum();
                    let drow = &mut d[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                deltas.push((0, d));
            }
        }
        Op::LayerNorm { eps } => {
            let x = parents[0].inner.borrow();
            let gamma = parents[1].inner.borrow();
            let cols = *inner.shape.last().unwrap();
            let rows = x.data.len() / cols;
            let mut dx = vec![0.0; x.data.len()];
            let mut dgamma = vec![0.0; cols];
            let mut dbeta = vec![0.0; cols];
            for r in 0..rows {
                let xrow = &x.data[r * cols..(r + 1) * cols];
                let grow = &gout[r * cols..(r + 1) * cols];
                let mean = xrow.iter().sum::<f64>() / cols as f64;
                let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * inv).collect();
                let dxhat: Vec<f64> = grow
                    .iter()
                    .zip(gamma.data.iter())
                    .map(|(g, gm)| g * gm)
                    .collect();
                let mean_dxhat = dxhat.iter().sum::<f64>() / cols as f64;
                let mean_dxhat_xhat =
                    dxhat.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                let dxrow = &mut dx[r * cols..(r + 1) * cols];
                for j in 0..cols {
                    dxrow[j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    dgamma[j] += grow[j] * xhat[j];
                    dbeta[j] += grow[j];
                }
            }
            drop(x);
            drop(gamma);
            if wants(0) {
                deltas.push((0, dx));
            }
            if wants(1) {
                deltas.push((1, dgamma));
            }
            if wants(2) {
                deltas.push((2, dbeta));
            }
        }
        Op::Embedding { ids } => {
            if wants(0) {
                let table = parents[0].inner.borrow();
                let width = table.shape[1];
                let mut d = vec![0.0; table.data.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let grow = &gout[r * width..(r + 1) * width];
                    let drow = &mut d[id * width..(id + 1) * width];
                    for (dv, gv) in drow.iter_mut().zip(grow.iter()) {
                        *dv += gv;
                    }
                }
                drop(table);
                deltas.push((0, d));
            }
        }
        Op::Conv2d { stride, pad } => {
            let x = parents[0].inner.borrow();
            let wt = parents[1].inner.borrow();
            let (cin, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
            let (cout, kh, kw) = (wt.shape[0], wt.shape[2], wt.shape[3]);
            let (oh, ow) = (inner.shape[1], inner.shape[2]);
            let mut dx = vec![0.0; x.data.len()];
            let mut dw = vec![0.0; wt.data.len()];
            let mut db = vec![0.0; cout];
            for o in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = gout[(o * oh + oy) * ow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        db[o] += g;
                        for c in 0..cin {
                            for u in 0..kh {
                                let iy = (oy * stride + u) as isize - *pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for v in 0..kw {
                                    let ix = (ox * stride + v) as isize - *pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = c * h * w + iy as usize * w + ix as usize;
                                    let wi = ((o * cin + c) * kh + u) * kw + v;
                                    dw[wi] += g * x.data[xi];
                                    dx[xi] += g * wt.data[wi];
                                }
                            }
                        }
                    }
                }
            }
            drop(x);
            drop(wt);
            if wants(0) {
                deltas.push((0, dx));
            }
            if wants(1) {
                deltas.push((1, dw));
            }
            if wants(2) {
                deltas.push((2, db));
            }
        }
        Op::GlobalAvgPool => {
            if wants(0) {
                let x = parents[0].inner.borrow();
                let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
                let plane = (h * w) as f64;
                let mut d = vec![0.0; x.data.len()];
                for ch in 0..c {
                    let g = gout[ch] / plane;
                    for v in d[ch * h * w..(ch + 1) * h * w].iter_mut() {
                        *v = g;
                    }
                }
                drop(x);
                deltas.push((0, d));
            }
        }
        Op::BceWithLogits { targets } => {
            if wants(0) {
                let z = parents[0].inner.borrow();
                let n = targets.len() as f64;
                let g = gout[0];
                deltas.push((
                    0,
                    z.data
                        .iter()
                        .zip(targets.iter())
                        .map(|(&z, &y)| g * (sigmoid(z) - y) / n)
                        .collect(),
                ));
            }
        }
        Op::CrossEntropyLogits { targets } => {
            if wants(0) {
                let z = parents[0].inner.borrow();
                let cols = z.shape[1];
                let rows = z.shape[0];
                let g = gout[0] / rows as f64;
                let mut d = vec![0.0; z.data.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &z.data[r * cols..(r + 1) * cols];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    let drow = &mut d[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let p = (row[j] - max).exp() / sum;
                        drow[j] = g * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                drop(z);
                deltas.push((0, d));
            }
        }
        Op::GatherRows { ids } => {
            if wants(0) {
                let x = parents[0].inner.borrow();
                let cols = x.shape[1];
                let mut d = vec![0.0; x.data.len()];
                for (i, &j) in ids.iter().enumerate() {
                    d[i * cols + j] += gout[i];
                }
                drop(x);
                deltas.push((0, d));
            }
        }
        Op::ScatterCols { ids } => {
            if wants(0) {
                let a = parents[0].inner.borrow();
                let m = a.shape[1];
                let t = a.shape[0];
                let vocab = inner.shape[1];
                let mut d = vec![0.0; a.data.len()];
                for i in 0..t {
                    let grow = &gout[i * vocab..(i + 1) * vocab];
                    let drow = &mut d[i * m..(i + 1) * m];
                    for (j, dv) in drow.iter_mut().enumerate() {
                        *dv = grow[ids[j]];
                    }
                }
                drop(a);
                deltas.push((0, d));
            }
        }
        Op::AdditiveScores => {
            let keys = parents[0].inner.borrow();
            let queries = parents[1].inner.borrow();
            let v = parents[2].inner.borrow();
            let (n, d) = (keys.shape[0], keys.shape[1]);
            let t = queries.shape[0];
            let mut dk = vec![0.0; keys.data.len()];
            let mut dq = vec![0.0; queries.data.len()];
            let mut dv = vec![0.0; d];
            for i in 0..t {
                let qrow = &queries.data[i * d..(i + 1) * d];
                let dqrow = &mut dq[i * d..(i + 1) * d];
                for j in 0..n {
                    let g = gout[i * n + j];
                    if g == 0.0 {
                        continue;
                    }
                    let krow = &keys.data[j * d..(j + 1) * d];
                    let dkrow = &mut dk[j * d..(j + 1) * d];
                    for p in 0..d {
                        let th = (krow[p] + qrow[p]).tanh();
                        dv[p] += g * th;
                        let c = g * v.data[p] * (1.0 - th * th);
                        dkrow[p] += c;
                        dqrow[p] += c;
                    }
                }
            }
            drop(keys);
            drop(queries);
            drop(v);
            if wants(0) {
                deltas.push((0, dk));
            }
            if wants(1) {
                deltas.push((1, dq));
            }
            if wants(2) {
                deltas.push((2, dv));
            }
        }
        Op::ConcatCols => {
            let p = parents[0].inner.borrow().shape[1];
            let q = parents[1].inner.borrow().shape[1];
            let m = inner.shape[0];
            if wants(0) {
                let mut d = vec![0.0; m * p];
                for i in 0..m {
                    d[i * p..(i + 1) * p].copy_from_slice(&gout[i * (p + q)..i * (p + q) + p]);
                }
                deltas.push((0, d));
            }
            if wants(1) {
                let mut d = vec![0.0; m * q];
                for i in 0..m {
                    d[i * q..(i + 1) * q]
                        .copy_from_slice(&gout[i * (p + q) + p..(i + 1) * (p + q)]);
                }
                deltas.push((1, d));
            }
        }
        Op::ConcatRows => {
            let top = parents[0].inner.borrow().data.len();
            if wants(0) {
                deltas.push((0, gout[..top].to_vec()));
            }
            if wants(1) {
                deltas.push((1, gout[top..].to_vec()));
            }
        }
        Op::SliceRows { from } => {
            if wants(0) {
                let x = parents[0].inner.borrow();
                let n = x.shape[1];
                let mut d = vec![0.0; x.data.len()];
                d[from * n..from * n + gout.len()].copy_from_slice(gout);
                drop(x);
                deltas.push((0, d));
            }
        }
        Op::SliceCols { from } => {
            if wants(0) {
                let x = parents[0].inner.borrow();
                let n = x.shape[1];
                let m = x.shape[0];
                let w = inner.shape[1];
                let mut d = vec![0.0; x.data.len()];
                for i in 0..m {
                    d[i * n + from..i * n + from + w].copy_from_slice(&gout[i * w..(i + 1) * w]);
                }
                drop(x);
                deltas.push((0, d));
            }
        }
        Op::Transpose2d => {
            if wants(0) {
                let (n, m) = (inner.shape[0], inner.shape[1]);
                let mut d = vec![0.0; gout.len()];
                for i in 0..n {
                    for j in 0..m {
                        d[j * n + i] = gout[i * m + j];
                    }
                }
                deltas.push((0, d));
            }
        }
        Op::Reshape => {
            if wants(0) {
                deltas.push((0, gout.to_vec()));
            }
        }
        Op::Sum => {
            if wants(0) {
                let len = parents[0].inner.borrow().data.len();
                deltas.push((0, vec![gout[0]; len]));
            }
        }
    }

    drop(inner);
    for (idx, delta) in deltas {
        parents[idx].accumulate_grad(&delta);
    }
}
