//! Differentiable tensor operations and their backward rules.

use super::{record, Tensor, TensorError, TensorResult};
use std::rc::Rc;

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus_scalar(x: f64) -> f64 {
    // log(1 + e^x) without overflow for large |x|
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tensor {
    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let x = self.to_vec();
        let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let out = Tensor::new(&self.shape(), y.clone()).expect("unary preserves shape");
        let xs = Rc::new(x);
        let ys = Rc::new(y);
        record(
            &[self],
            &out,
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(xs.iter().zip(ys.iter()))
                    .map(|(gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect()]
            }),
        );
        out
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    /// x * sigmoid(x), the smooth base activation used throughout the models.
    pub fn silu(&self) -> Tensor {
        self.unary(
            |x| x * sigmoid_scalar(x),
            |x, _| {
                let s = sigmoid_scalar(x);
                s + x * s * (1.0 - s)
            },
        )
    }

    pub fn tanh_act(&self) -> Tensor {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn abs_t(&self) -> Tensor {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(
            move |x| if x >= 0.0 { x } else { slope * x },
            move |x, _| if x >= 0.0 { 1.0 } else { slope },
        )
    }

    pub fn softplus(&self) -> Tensor {
        self.unary(softplus_scalar, |x, _| sigmoid_scalar(x))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        // (da, db) factors at (a, b)
        df: impl Fn(f64, f64) -> (f64, f64) + 'static,
    ) -> TensorResult<Tensor> {
        let scalar_rhs = other.numel() == 1 && self.numel() != 1;
        if !scalar_rhs && self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let a = self.to_vec();
        let b = other.to_vec();
        let y: Vec<f64> = if scalar_rhs {
            a.iter().map(|&av| f(av, b[0])).collect()
        } else {
            a.iter().zip(&b).map(|(&av, &bv)| f(av, bv)).collect()
        };
        let out = Tensor::new(self.shape(), y)?;
        let ar = Rc::new(a);
        let br = Rc::new(b);
        record(
            &[self, other],
            &out,
            Box::new(move |g| {
                let mut ga = vec![0.0; ar.len()];
                let mut gb = vec![0.0; br.len()];
                if br.len() == 1 && ar.len() != 1 {
                    let bv = br[0];
                    let mut acc = 0.0;
                    for i in 0..ar.len() {
                        let (da, db) = df(ar[i], bv);
                        ga[i] = g[i] * da;
                        acc += g[i] * db;
                    }
                    gb[0] = acc;
                } else {
                    for i in 0..ar.len() {
                        let (da, db) = df(ar[i], br[i]);
                        ga[i] = g[i] * da;
                        gb[i] = g[i] * db;
                    }
                }
                vec![ga, gb]
            }),
        );
        Ok(out)
    }

    /// Elementwise sum; `other` may be a one-element tensor (scalar broadcast).
    pub fn add(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.binary(other, "add", |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |a, b| (b, a))
    }

    /// Add a length-m vector to every row of an (n, m) tensor.
    pub fn add_rowvec(&self, v: &Tensor) -> TensorResult<Tensor> {
        let (_, m) = dims2(self, "add_rowvec")?;
        if v.numel() != m {
            return Err(TensorError::ShapeMismatch {
                op: "add_rowvec",
                left: self.shape().to_vec(),
                right: v.shape().to_vec(),
            });
        }
        let a = self.to_vec();
        let vv = v.to_vec();
        let mut y = a.clone();
        for row in y.chunks_mut(m) {
            for (yv, bv) in row.iter_mut().zip(&vv) {
                *yv += bv;
            }
        }
        let out = Tensor::new(self.shape(), y)?;
        record(
            &[self, v],
            &out,
            Box::new(move |g| {
                let mut gv = vec![0.0; m];
                for row in g.chunks(m) {
                    for (acc, gi) in gv.iter_mut().zip(row) {
                        *acc += gi;
                    }
                }
                vec![g.to_vec(), gv]
            }),
        );
        Ok(out)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> TensorResult<Tensor> {
        let (n, k) = dims2(self, "matmul")?;
        let (k2, m) = dims2(other, "matmul")?;
        if k != k2 {
            return Err(TensorError::InnerDim(k, k2));
        }
        let a = self.to_vec();
        let b = other.to_vec();
        let y = mm(&a, &b, n, k, m);
        let out = Tensor::new(&[n, m], y)?;
        let ar = Rc::new(a);
        let br = Rc::new(b);
        record(
            &[self, other],
            &out,
            Box::new(move |g| {
                // dA = g . B^T ; dB = A^T . g
                vec![mm_nt(g, &br, n, m, k), mm_tn(&ar, g, n, k, m)]
            }),
        );
        Ok(out)
    }

    /// `self (n x k)` times `other^T` where `other` is `(m x k)` — the hot
    /// path for row-major weight application (contiguous dot products).
    pub fn matmul_nt(&self, other: &Tensor) -> TensorResult<Tensor> {
        let (n, k) = dims2(self, "matmul_nt")?;
        let (m, k2) = dims2(other, "matmul_nt")?;
        if k != k2 {
            return Err(TensorError::InnerDim(k, k2));
        }
        let a = self.to_vec();
        let b = other.to_vec();
        let y = mm_nt(&a, &b, n, k, m);
        let out = Tensor::new(&[n, m], y)?;
        let ar = Rc::new(a);
        let br = Rc::new(b);
        record(
            &[self, other],
            &out,
            Box::new(move |g| {
                // dA = g . B ; dB = g^T . A
                vec![mm(g, &br, n, m, k), mm_tn(g, &ar, n, m, k)]
            }),
        );
        Ok(out)
    }

    pub fn reshape(&self, shape: &[usize]) -> TensorResult<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::ReshapeCount {
                from: self.shape().to_vec(),
                to: shape.to_vec(),
            });
        }
        let out = Tensor::new(shape, self.to_vec())?;
        record(&[self], &out, Box::new(move |g| vec![g.to_vec()]));
        Ok(out)
    }

    /// Reorder axes; `perm[i]` names the source axis that becomes axis `i`.
    pub fn permute(&self, perm: &[usize]) -> TensorResult<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::BadPermutation {
                perm: perm.to_vec(),
                shape: self.shape().to_vec(),
            });
        }
        let src_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
        let fwd = permute_index_map(&src_shape, perm);
        let src = self.data();
        let y: Vec<f64> = fwd.iter().map(|&i| src[i]).collect();
        drop(src);
        let out = Tensor::new(&out_shape, y)?;
        let inv = Rc::new(fwd);
        let n = self.numel();
        record(
            &[self],
            &out,
            Box::new(move |g| {
                let mut gx = vec![0.0; n];
                for (j, &i) in inv.iter().enumerate() {
                    gx[i] = g[j];
                }
                vec![gx]
            }),
        );
        Ok(out)
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let out = Tensor::scalar(s);
        let n = self.numel();
        record(&[self], &out, Box::new(move |g| vec![vec![g[0]; n]]));
        out
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        let out = Tensor::scalar(s / n as f64);
        record(
            &[self],
            &out,
            Box::new(move |g| vec![vec![g[0] / n as f64; n]]),
        );
        out
    }

    /// Gather `out[i] = src[map[i]]`, with `-1` entries producing zero
    /// (virtual zero padding). Backward scatter-adds into the source.
    pub(crate) fn gather_map(&self, map: Rc<Vec<i64>>, out_shape: &[usize]) -> Tensor {
        debug_assert_eq!(out_shape.iter().product::<usize>(), map.len());
        let src = self.data();
        let y: Vec<f64> = map
            .iter()
            .map(|&i| if i >= 0 { src[i as usize] } else { 0.0 })
            .collect();
        drop(src);
        let out = Tensor::new(out_shape, y).expect("gather shape consistent");
        let n = self.numel();
        let m = Rc::clone(&map);
        record(
            &[self],
            &out,
            Box::new(move |g| {
                let mut gx = vec![0.0; n];
                for (j, &i) in m.iter().enumerate() {
                    if i >= 0 {
                        gx[i as usize] += g[j];
                    }
                }
                vec![gx]
            }),
        );
        out
    }

    /// Gather variant that flags its output for patch-buffer accounting.
    pub(crate) fn gather_map_tracked(&self, map: Rc<Vec<i64>>, out_shape: &[usize]) -> Tensor {
        let src = self.data();
        let y: Vec<f64> = map
            .iter()
            .map(|&i| if i >= 0 { src[i as usize] } else { 0.0 })
            .collect();
        drop(src);
        let out = Tensor::new_tracked(out_shape.to_vec(), y);
        let n = self.numel();
        let m = Rc::clone(&map);
        record(
            &[self],
            &out,
            Box::new(move |g| {
                let mut gx = vec![0.0; n];
                for (j, &i) in m.iter().enumerate() {
                    if i >= 0 {
                        gx[i as usize] += g[j];
                    }
                }
                vec![gx]
            }),
        );
        out
    }

    /// Row-wise layer normalization with learned gain and bias:
    /// `y = gain * (x - mean) / sqrt(var + eps) + bias`, statistics per row.
    pub fn layer_norm_rows(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> TensorResult<Tensor> {
        let (n, d) = dims2(self, "layer_norm_rows")?;
        if gain.numel() != d || bias.numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm_rows",
                left: vec![n, d],
                right: gain.shape().to_vec(),
            });
        }
        let x = self.to_vec();
        let gn = gain.to_vec();
        let bs = bias.to_vec();
        let mut y = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut ivar = vec![0.0; n];
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let iv = 1.0 / (var + eps).sqrt();
            ivar[r] = iv;
            for c in 0..d {
                let xh = (row[c] - mean) * iv;
                xhat[r * d + c] = xh;
                y[r * d + c] = gn[c] * xh + bs[c];
            }
        }
        let out = Tensor::new(&[n, d], y)?;
        let xhat = Rc::new(xhat);
        let ivar = Rc::new(ivar);
        let gn = Rc::new(gn);
        record(
            &[self, gain, bias],
            &out,
            Box::new(move |g| {
                let mut gx = vec![0.0; n * d];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for r in 0..n {
                    let iv = ivar[r];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    // dxhat = g * gain; standard layernorm backward per row
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for c in 0..d {
                        let dxh = gr[c] * gn[c];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh[c];
                        ggain[c] += gr[c] * xh[c];
                        gbias[c] += gr[c];
                    }
                    let inv_d = 1.0 / d as f64;
                    for c in 0..d {
                        let dxh = gr[c] * gn[c];
                        gx[r * d + c] =
                            iv * (dxh - inv_d * sum_dxhat - xh[c] * inv_d * sum_dxhat_xhat);
                    }
                }
                vec![gx, ggain, gbias]
            }),
        );
        Ok(out)
    }
}

/// Concatenate along `axis`; all other dimensions must agree.
pub fn concat(axis: usize, parts: &[&Tensor]) -> TensorResult<Tensor> {
    if parts.is_empty() {
        return Err(TensorError::Concat("empty input list".into()));
    }
    let rank = parts[0].shape().len();
    if axis >= rank {
        return Err(TensorError::Concat(format!(
            "axis {axis} out of range for rank {rank}"
        )));
    }
    let mut out_shape = parts[0].shape().to_vec();
    let mut axis_total = 0;
    for p in parts {
        if p.shape().len() != rank {
            return Err(TensorError::Concat("rank mismatch".into()));
        }
        for (ax, (&a, &b)) in p.shape().iter().zip(parts[0].shape()).enumerate() {
            if ax != axis && a != b {
                return Err(TensorError::Concat(format!(
                    "shape {:?} incompatible with {:?} along axis {axis}",
                    p.shape(),
                    parts[0].shape()
                )));
            }
        }
        axis_total += p.shape()[axis];
    }
    out_shape[axis] = axis_total;

    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut y = vec![0.0; out_shape.iter().product()];
    let mut offset = 0;
    let mut spans = Vec::with_capacity(parts.len());
    for p in parts {
        let pa = p.shape()[axis];
        let src = p.data();
        for o in 0..outer {
            let dst_start = (o * axis_total + offset) * inner;
            let src_start = o * pa * inner;
            y[dst_start..dst_start + pa * inner]
                .copy_from_slice(&src[src_start..src_start + pa * inner]);
        }
        spans.push((offset, pa));
        offset += pa;
    }
    let out = Tensor::new(&out_shape, y)?;
    let refs: Vec<&Tensor> = parts.to_vec();
    record(
        &refs,
        &out,
        Box::new(move |g| {
            spans
                .iter()
                .map(|&(off, pa)| {
                    let mut gp = vec![0.0; outer * pa * inner];
                    for o in 0..outer {
                        let src_start = (o * axis_total + off) * inner;
                        let dst_start = o * pa * inner;
                        gp[dst_start..dst_start + pa * inner]
                            .copy_from_slice(&g[src_start..src_start + pa * inner]);
                    }
                    gp
                })
                .collect()
        }),
    );
    Ok(out)
}

fn dims2(t: &Tensor, op: &'static str) -> TensorResult<(usize, usize)> {
    match t.shape() {
        [n, k] => Ok((*n, *k)),
        other => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: other.to_vec(),
        }),
    }
}

/// C (n x m) = A (n x k) . B (k x m), cache-friendly ikj order.
fn mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C (n x m) = A (n x k) . B^T where B is (m x k); contiguous dot products.
fn mm_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            crow[j] = acc;
        }
    }
    c
}

/// C (k x m) = A^T . B where A is (n x k), B is (n x m).
fn mm_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[kk * m..(kk + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// For each output position (row-major over the permuted shape), the source
/// index in the original layout.
fn permute_index_map(src_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = src_shape.len();
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let mut src = 0;
        for (ax, &i) in idx.iter().enumerate() {
            src += i * src_strides[perm[ax]];
        }
        map.push(src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}
