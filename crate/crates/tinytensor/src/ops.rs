//! Differentiable operations.
//!
//! Each op computes its forward value eagerly and records a backward rule
//! capturing whatever it needs. Outputs are checked for NaN/Inf; an op that
//! would produce a non-finite value fails instead.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{BackwardArgs, Tensor};

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

pub(crate) fn transpose_data<S: Scalar>(data: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

pub(crate) fn matmul_data<S: Scalar>(
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|args: &BackwardArgs<S>| {
                vec![Some(args.grad.to_vec()), Some(args.grad.to_vec())]
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|args: &BackwardArgs<S>| {
                vec![
                    Some(args.grad.to_vec()),
                    Some(args.grad.iter().map(|&g| -g).collect()),
                ]
            }),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|args: &BackwardArgs<S>| {
                let a = args.parents[0].data();
                let b = args.parents[1].data();
                vec![
                    args.needs[0].then(|| {
                        args.grad.iter().zip(b).map(|(&g, &bv)| g * bv).collect()
                    }),
                    args.needs[1].then(|| {
                        args.grad.iter().zip(a).map(|(&g, &av)| g * av).collect()
                    }),
                ]
            }),
        )
    }

    /// Elementwise quotient.
    pub fn div(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("div", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a / b)
            .collect();
        Tensor::from_op(
            "div",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|args: &BackwardArgs<S>| {
                let a = args.parents[0].data();
                let b = args.parents[1].data();
                vec![
                    args.needs[0].then(|| {
                        args.grad.iter().zip(b).map(|(&g, &bv)| g / bv).collect()
                    }),
                    args.needs[1].then(|| {
                        args.grad
                            .iter()
                            .zip(a.iter().zip(b))
                            .map(|(&g, (&av, &bv))| -g * av / (bv * bv))
                            .collect()
                    }),
                ]
            }),
        )
    }

    pub fn neg(&self) -> Result<Tensor<S>> {
        self.scale(-S::one())
    }

    /// Multiply every element by a compile-time constant.
    pub fn scale(&self, c: S) -> Result<Tensor<S>> {
        let data = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<S>| {
                vec![Some(args.grad.iter().map(|&g| g * c).collect())]
            }),
        )
    }

    /// Add a constant to every element.
    pub fn offset(&self, c: S) -> Result<Tensor<S>> {
        let data = self.data().iter().map(|&v| v + c).collect();
        Tensor::from_op(
            "offset",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<S>| vec![Some(args.grad.to_vec())]),
        )
    }

    /// Multiply by a one-element tensor, broadcasting it over all elements.
    pub fn scale_by(&self, s: &Tensor<S>) -> Result<Tensor<S>> {
        if s.numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "scale_by",
                detail: format!("scale factor must be one element, got {:?}", s.shape()),
            });
        }
        let sv = s.data()[0];
        let data = self.data().iter().map(|&v| v * sv).collect();
        Tensor::from_op(
            "scale_by",
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            Box::new(|args: &BackwardArgs<S>| {
                let x = args.parents[0].data();
                let sv = args.parents[1].data()[0];
                vec![
                    args.needs[0]
                        .then(|| args.grad.iter().map(|&g| g * sv).collect()),
                    args.needs[1].then(|| {
                        vec![args
                            .grad
                            .iter()
                            .zip(x)
                            .map(|(&g, &xv)| g * xv)
                            .fold(S::zero(), |acc, v| acc + v)]
                    }),
                ]
            }),
        )
    }

    /// Add a length-`d` vector to every row of an `[n, d]` matrix.
    pub fn add_bias(&self, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, d) = (self.rows(), self.cols());
        if bias.numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                detail: format!("matrix {:?} vs bias {:?}", self.shape(), bias.shape()),
            });
        }
        let mut data = self.data().to_vec();
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] += bias.data()[c];
            }
        }
        Tensor::from_op(
            "add_bias",
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |args: &BackwardArgs<S>| {
                let mut db = vec![S::zero(); d];
                for r in 0..n {
                    for c in 0..d {
                        db[c] += args.grad[r * d + c];
                    }
                }
                vec![Some(args.grad.to_vec()), Some(db)]
            }),
        )
    }

    /// Standard matrix product `[m, k] x [k, n]`.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.rank() != 2 || other.rank() != 2 || self.cols() != other.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape(), other.shape()),
            });
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let data = matmul_data(self.data(), other.data(), m, k, n);
        Tensor::from_op(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |args: &BackwardArgs<S>| {
                let a = args.parents[0].data();
                let b = args.parents[1].data();
                vec![
                    args.needs[0].then(|| {
                        // dA = G * B^T
                        let bt = transpose_data(b, k, n);
                        matmul_data(args.grad, &bt, m, n, k)
                    }),
                    args.needs[1].then(|| {
                        // dB = A^T * G
                        let at = transpose_data(a, m, k);
                        matmul_data(&at, args.grad, k, m, n)
                    }),
                ]
            }),
        )
    }

    /// Product with the transposed right operand: `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_nt(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.rank() != 2 || other.rank() != 2 || self.cols() != other.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("{:?} x {:?}^T", self.shape(), other.shape()),
            });
        }
        let (m, k, n) = (self.rows(), self.cols(), other.rows());
        let bt = transpose_data(other.data(), n, k);
        let data = matmul_data(self.data(), &bt, m, k, n);
        Tensor::from_op(
            "matmul_nt",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |args: &BackwardArgs<S>| {
                let a = args.parents[0].data();
                let b = args.parents[1].data();
                vec![
                    // dA = G * B
                    args.needs[0].then(|| matmul_data(args.grad, b, m, n, k)),
                    // dB = G^T * A
                    args.needs[1].then(|| {
                        let gt = transpose_data(args.grad, m, n);
                        matmul_data(&gt, a, n, m, k)
                    }),
                ]
            }),
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor<S>> {
        let one = S::one();
        let data: Vec<S> = self
            .data()
            .iter()
            .map(|&v| one / (one + (-v).exp()))
            .collect();
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<S>| {
                vec![Some(
                    args.grad
                        .iter()
                        .zip(args.out)
                        .map(|(&g, &y)| g * y * (S::one() - y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn relu(&self) -> Result<Tensor<S>> {
        let data = self
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        Tensor::from_op(
            "relu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<S>| {
                let x = args.parents[0].data();
                vec![Some(
                    args.grad
                        .iter()
                        .zip(x)
                        .map(|(&g, &xv)| if xv > S::zero() { g } else { S::zero() })
                        .collect(),
                )]
            }),
        )
    }

    /// Elementwise absolute value (subgradient 0 at the origin).
    pub fn abs(&self) -> Result<Tensor<S>> {
        let data = self.data().iter().map(|&v| v.abs()).collect();
        Tensor::from_op(
            "abs",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<S>| {
                let x = args.parents[0].data();
                vec![Some(
                    args.grad
                        .iter()
                        .zip(x)
                        .map(|(&g, &xv)| g * S::from_f64(sign(xv.to_f64_lossy())))
                        .collect(),
                )]
            }),
        )
    }

    /// Softmax along the given axis (1 = within each row, 0 = within each
    /// column; rank-1 tensors use axis 0).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>> {
        self.softmax_impl(axis, false)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<S>> {
        self.softmax_impl(axis, true)
    }

    fn softmax_impl(&self, axis: usize, log: bool) -> Result<Tensor<S>> {
        let (rows, cols, row_major) = match (self.rank(), axis) {
            (1, 0) => (1, self.numel(), true),
            (2, 1) => (self.rows(), self.cols(), true),
            (2, 0) => (self.cols(), self.rows(), false),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax",
                    detail: format!("axis {} on shape {:?}", axis, self.shape()),
                })
            }
        };
        let src = if row_major {
            self.data().to_vec()
        } else {
            transpose_data(self.data(), self.rows(), self.cols())
        };
        let mut out = vec![S::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for &v in row {
                z += (v - m).exp();
            }
            let lz = z.ln() + m;
            for c in 0..cols {
                out[r * cols + c] = if log {
                    row[c] - lz
                } else {
                    (row[c] - lz).exp()
                };
            }
        }
        let data = if row_major {
            out
        } else {
            transpose_data(&out, self.cols(), self.rows())
        };
        let name: &'static str = if log { "log_softmax" } else { "softmax" };
        Tensor::from_op(
            name,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<S>| {
                let (g, y) = if row_major {
                    (args.grad.to_vec(), args.out.to_vec())
                } else {
                    let (r0, c0) = (args.parents[0].rows(), args.parents[0].cols());
                    (
                        transpose_data(args.grad, r0, c0),
                        transpose_data(args.out, r0, c0),
                    )
                };
                let mut dx = vec![S::zero(); g.len()];
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    if log {
                        let gsum = gr.iter().cloned().fold(S::zero(), |a, v| a + v);
                        for c in 0..cols {
                            dx[r * cols + c] = gr[c] - yr[c].exp() * gsum;
                        }
                    } else {
                        let dot = gr
                            .iter()
                            .zip(yr)
                            .map(|(&gv, &yv)| gv * yv)
                            .fold(S::zero(), |a, v| a + v);
                        for c in 0..cols {
                            dx[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                }
                let dx = if row_major {
                    dx
                } else {
                    let (r0, c0) = (args.parents[0].rows(), args.parents[0].cols());
                    transpose_data(&dx, c0, r0)
                };
                vec![Some(dx)]
            }),
        )
    }

    /// Per-row normalization of an `[n, d]` matrix to zero mean and unit
    /// variance, then an affine map with `gain` and `bias` (both length `d`).
    pub fn layer_norm(&self, gain: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, d) = (self.rows(), self.cols());
        if gain.numel() != d || bias.numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    self.shape(),
                    gain.shape(),
                    bias.shape()
                ),
            });
        }
        let eps = S::from_f64(1e-12);
        let dn = S::from_f64(d as f64);
        let mut data = vec![S::zero(); n * d];
        let mut xhat = vec![S::zero(); n * d];
        let mut inv_sigma = vec![S::zero(); n];
        for r in 0..n {
            let row = &self.data()[r * d..(r + 1) * d];
            let mean = row.iter().cloned().fold(S::zero(), |a, v| a + v) / dn;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .fold(S::zero(), |a, v| a + v)
                / dn;
            let isd = S::one() / (var + eps).sqrt();
            inv_sigma[r] = isd;
            for c in 0..d {
                let xh = (row[c] - mean) * isd;
                xhat[r * d + c] = xh;
                data[r * d + c] = xh * gain.data()[c] + bias.data()[c];
            }
        }
        Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |args: &BackwardArgs<S>| {
                let gain = args.parents[1].data();
                let mut dx = vec![S::zero(); n * d];
                let mut dgain = vec![S::zero(); d];
                let mut dbias = vec![S::zero(); d];
                for r in 0..n {
                    let g = &args.grad[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut ghat_mean = S::zero();
                    let mut ghat_xhat_mean = S::zero();
                    for c in 0..d {
                        let gh = g[c] * gain[c];
                        ghat_mean += gh;
                        ghat_xhat_mean += gh * xh[c];
                        dgain[c] += g[c] * xh[c];
                        dbias[c] += g[c];
                    }
                    ghat_mean = ghat_mean / dn;
                    ghat_xhat_mean = ghat_xhat_mean / dn;
                    for c in 0..d {
                        let gh = g[c] * gain[c];
                        dx[r * d + c] = (gh - ghat_mean - xh[c] * ghat_xhat_mean) * inv_sigma[r];
                    }
                }
                vec![Some(dx), Some(dgain), Some(dbias)]
            }),
        )
    }

    /// Gather rows of `self` (an embedding table `[V, d]`) by index.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor<S>> {
        let (v, d) = (self.rows(), self.cols());
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embed",
                    index: id,
                    limit: v,
                });
            }
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&self.data()[id * d..(id + 1) * d]);
        }
        let ids_owned = ids.to_vec();
        let n = ids.len();
        Tensor::from_op(
            "embed",
            vec![n, d],
            data,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<S>| {
                let mut dt = vec![S::zero(); v * d];
                for (row, &id) in ids_owned.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += args.grad[row * d + c];
                    }
                }
                vec![Some(dt)]
            }),
        )
    }

    /// Rows `[start, start+len)`.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Tensor<S>> {
        let (n, d) = (self.rows(), self.cols());
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "narrow_rows",
                index: start + len,
                limit: n,
            });
        }
        let data = self.data()[start * d..(start + len) * d].to_vec();
        let shape = if self.rank() == 1 {
            vec![len]
        } else {
            vec![len, d]
        };
        Tensor::from_op(
            "narrow_rows",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<S>| {
                let mut dx = vec![S::zero(); n * d];
                dx[start * d..(start + len) * d].copy_from_slice(args.grad);
                vec![Some(dx)]
            }),
        )
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor<S>> {
        let (n, d) = (self.rows(), self.cols());
        if self.rank() != 2 || start + len > d {
            return Err(TensorError::IndexOutOfRange {
                op: "narrow_cols",
                index: start + len,
                limit: d,
            });
        }
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&self.data()[r * d + start..r * d + start + len]);
        }
        Tensor::from_op(
            "narrow_cols",
            vec![n, len],
            data,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<S>| {
                let mut dx = vec![S::zero(); n * d];
                for r in 0..n {
                    dx[r * d + start..r * d + start + len]
                        .copy_from_slice(&args.grad[r * len..(r + 1) * len]);
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Reinterpret the same row-major data under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(), shape),
            });
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<S>| vec![Some(args.grad.to_vec())]),
        )
    }

    /// Repeat each row `u` times: `[n, d] -> [n*u, d]`.
    pub fn repeat_rows(&self, u: usize) -> Result<Tensor<S>> {
        if u == 0 {
            return Err(TensorError::EmptyInput { op: "repeat_rows" });
        }
        let (n, d) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(n * u * d);
        for r in 0..n {
            let row = &self.data()[r * d..(r + 1) * d];
            for _ in 0..u {
                data.extend_from_slice(row);
            }
        }
        Tensor::from_op(
            "repeat_rows",
            vec![n * u, d],
            data,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<S>| {
                let mut dx = vec![S::zero(); n * d];
                for r in 0..n {
                    for k in 0..u {
                        let src = &args.grad[(r * u + k) * d..(r * u + k + 1) * d];
                        for c in 0..d {
                            dx[r * d + c] += src[c];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn sum_all(&self) -> Result<Tensor<S>> {
        let total = self.data().iter().cloned().fold(S::zero(), |a, v| a + v);
        let numel = self.numel();
        let shape = self.shape().to_vec();
        Tensor::from_op(
            "sum_all",
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<S>| {
                let _ = &shape;
                vec![Some(vec![args.grad[0]; numel])]
            }),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor<S>> {
        if self.numel() == 0 {
            return Err(TensorError::EmptyInput { op: "mean_all" });
        }
        let inv = S::one() / S::from_f64(self.numel() as f64);
        self.sum_all()?.scale(inv)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `self` (`[n, vocab]` logits).
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor<S>> {
        let (n, v) = (self.rows(), self.cols());
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{} logit rows vs {} targets", n, targets.len()),
            });
        }
        if n == 0 {
            return Err(TensorError::EmptyInput { op: "cross_entropy" });
        }
        for &t in targets {
            if t >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    limit: v,
                });
            }
        }
        let mut loss = S::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &self.data()[r * v..(r + 1) * v];
            let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&x| (x - m).exp()).fold(S::zero(), |a, b| a + b);
            loss += z.ln() + m - row[t];
        }
        loss = loss / S::from_f64(n as f64);
        let targets_owned = targets.to_vec();
        Tensor::from_op(
            "cross_entropy",
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<S>| {
                let logits = args.parents[0].data();
                let inv_n = S::one() / S::from_f64(n as f64);
                let mut dx = vec![S::zero(); n * v];
                for (r, &t) in targets_owned.iter().enumerate() {
                    let row = &logits[r * v..(r + 1) * v];
                    let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
                    let z: S = row.iter().map(|&x| (x - m).exp()).fold(S::zero(), |a, b| a + b);
                    for c in 0..v {
                        let p = (row[c] - m).exp() / z;
                        let indicator = if c == t { S::one() } else { S::zero() };
                        dx[r * v + c] = args.grad[0] * inv_n * (p - indicator);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Concatenate along rows.
pub fn concat_rows<S: Scalar>(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(TensorError::EmptyInput { op: "concat_rows" });
    }
    let d = parts[0].cols();
    let mut total = 0;
    for p in parts {
        if p.cols() != d {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                detail: format!("column counts differ: {} vs {}", d, p.cols()),
            });
        }
        total += p.rows();
    }
    let mut data = Vec::with_capacity(total * d);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let sizes: Vec<usize> = parts.iter().map(|p| p.rows() * d).collect();
    Tensor::from_op(
        "concat_rows",
        vec![total, d],
        data,
        parts.to_vec(),
        Box::new(move |args: &BackwardArgs<S>| {
            let mut out = Vec::with_capacity(sizes.len());
            let mut offset = 0;
            for &sz in &sizes {
                out.push(Some(args.grad[offset..offset + sz].to_vec()));
                offset += sz;
            }
            out
        }),
    )
}

/// Concatenate along columns.
pub fn concat_cols<S: Scalar>(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(TensorError::EmptyInput { op: "concat_cols" });
    }
    let n = parts[0].rows();
    let mut total = 0;
    for p in parts {
        if p.rows() != n {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                detail: format!("row counts differ: {} vs {}", n, p.rows()),
            });
        }
        total += p.cols();
    }
    let mut data = Vec::with_capacity(n * total);
    for r in 0..n {
        for p in parts {
            let c = p.cols();
            data.extend_from_slice(&p.data()[r * c..(r + 1) * c]);
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
    Tensor::from_op(
        "concat_cols",
        vec![n, total],
        data,
        parts.to_vec(),
        Box::new(move |args: &BackwardArgs<S>| {
            let mut grads: Vec<Vec<S>> = widths.iter().map(|&w| Vec::with_capacity(n * w)).collect();
            for r in 0..n {
                let mut offset = 0;
                for (i, &w) in widths.iter().enumerate() {
                    grads[i].extend_from_slice(&args.grad[r * total + offset..r * total + offset + w]);
                    offset += w;
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    )
}

/// Boolean attention mask over `[queries, keys]`; `true` means the query may
/// attend to that key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        AttnMask { rows, cols, data }
    }

    pub fn causal(n: usize) -> Self {
        Self::new(n, n, |q, k| k <= q)
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, |_, _| true)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.data[q * self.cols + k]
    }
}

/// Scaled dot-product attention with a boolean mask.
///
/// Masked-out positions get exactly zero attention weight. A query row whose
/// keys are all masked is rejected.
pub fn masked_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: &AttnMask,
) -> Result<Tensor<S>> {
    let (tq, d) = (q.rows(), q.cols());
    let tk = k.rows();
    if k.cols() != d || v.rows() != tk {
        return Err(TensorError::ShapeMismatch {
            op: "masked_attention",
            detail: format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        });
    }
    if mask.rows() != tq || mask.cols() != tk {
        return Err(TensorError::ShapeMismatch {
            op: "masked_attention",
            detail: format!("mask {}x{} vs {}x{}", mask.rows(), mask.cols(), tq, tk),
        });
    }
    for r in 0..tq {
        if (0..tk).all(|c| !mask.allowed(r, c)) {
            return Err(TensorError::AllMasked { row: r });
        }
    }
    let scale = S::from_f64(1.0 / (d as f64).sqrt());
    let scores = q.matmul_nt(k)?.scale(scale)?;
    let masked = mask_fill(&scores, mask)?;
    let weights = masked.softmax(1)?;
    weights.matmul(v)
}

/// Replace masked-out score entries with a large negative constant so softmax
/// assigns them exactly zero weight.
fn mask_fill<S: Scalar>(scores: &Tensor<S>, mask: &AttnMask) -> Result<Tensor<S>> {
    let (n, d) = (scores.rows(), scores.cols());
    let fill = S::from_f64(-1e30);
    let mut data = scores.data().to_vec();
    let mut keep = vec![true; n * d];
    for r in 0..n {
        for c in 0..d {
            if !mask.allowed(r, c) {
                data[r * d + c] = fill;
                keep[r * d + c] = false;
            }
        }
    }
    Tensor::from_op(
        "mask_fill",
        scores.shape().to_vec(),
        data,
        vec![scores.clone()],
        Box::new(move |args: &BackwardArgs<S>| {
            vec![Some(
                args.grad
                    .iter()
                    .zip(&keep)
                    .map(|(&g, &k)| if k { g } else { S::zero() })
                    .collect(),
            )]
        }),
    )
}
