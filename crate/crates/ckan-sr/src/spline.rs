//! Clamped uniform B-spline bases on a fixed interval.
//!
//! Every learnable scalar function in the network is a linear combination of
//! these basis functions. Evaluation returns only the local support window:
//! at any point exactly `degree + 1` basis functions can be nonzero, so both
//! the forward pass and the gradient touch that many coefficients per input.

use crate::counters;
use crate::tensor::{record, Tensor, TensorError, TensorResult};
use std::rc::Rc;
use thiserror::Error;

pub const DEFAULT_DEGREE: usize = 3;
pub const DEFAULT_NUM_BASIS: usize = 8;
pub const DEFAULT_RANGE: (f64, f64) = (-2.0, 2.0);

#[derive(Debug, Error)]
pub enum SplineError {
    #[error("need at least degree+1 basis functions, got {num_basis} for degree {degree}")]
    TooFewBasis { degree: usize, num_basis: usize },
    #[error("degree {0} exceeds the supported maximum {MAX_DEGREE}")]
    DegreeTooLarge(usize),
    #[error("invalid range [{lo}, {hi}]")]
    BadRange { lo: f64, hi: f64 },
}

/// B-spline basis of a given degree on `[lo, hi]` with a clamped uniform knot
/// vector: the boundary knots repeat `degree + 1` times so the basis sums to
/// one on the whole closed interval, including both endpoints.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    degree: usize,
    num_basis: usize,
    lo: f64,
    hi: f64,
    knots: Vec<f64>,
}

impl SplineBasis {
    pub fn new(degree: usize, num_basis: usize, lo: f64, hi: f64) -> Result<Self, SplineError> {
        if degree > MAX_DEGREE {
            return Err(SplineError::DegreeTooLarge(degree));
        }
        if num_basis < degree + 1 {
            return Err(SplineError::TooFewBasis { degree, num_basis });
        }
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(SplineError::BadRange { lo, hi });
        }
        let spans = num_basis - degree;
        let step = (hi - lo) / spans as f64;
        let mut knots = Vec::with_capacity(num_basis + degree + 1);
        for j in 0..num_basis + degree + 1 {
            knots.push(if j <= degree {
                lo
            } else if j >= num_basis {
                hi
            } else {
                lo + (j - degree) as f64 * step
            });
        }
        Ok(SplineBasis {
            degree,
            num_basis,
            lo,
            hi,
            knots,
        })
    }

    pub fn default_basis() -> SplineBasis {
        SplineBasis::new(
            DEFAULT_DEGREE,
            DEFAULT_NUM_BASIS,
            DEFAULT_RANGE.0,
            DEFAULT_RANGE.1,
        )
        .expect("default configuration is valid")
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Knot span index for a clamped input, in `degree..num_basis-1`.
    fn span(&self, xc: f64) -> usize {
        let spans = self.num_basis - self.degree;
        let step = (self.hi - self.lo) / spans as f64;
        let k = ((xc - self.lo) / step) as usize;
        self.degree + k.min(spans - 1)
    }

    /// Evaluate the support window at `x` (clamped to the range) into
    /// `vals[0..=degree]`. Returns the index of the first basis function in
    /// the window. Does not touch the instrumentation counters; batch callers
    /// account for their evaluations in bulk.
    pub(crate) fn eval_into(&self, x: f64, vals: &mut [f64]) -> usize {
        let xc = x.clamp(self.lo, self.hi);
        let k = self.span(xc);
        basis_funs(&self.knots, k, self.degree, xc, vals);
        k - self.degree
    }

    /// Window values and derivatives at `x`. Inputs outside the range clamp,
    /// so their derivative with respect to `x` is zero.
    pub(crate) fn eval_with_derivative_into(
        &self,
        x: f64,
        vals: &mut [f64],
        ders: &mut [f64],
    ) -> usize {
        let xc = x.clamp(self.lo, self.hi);
        let k = self.span(xc);
        let p = self.degree;
        basis_funs(&self.knots, k, p, xc, vals);
        if x < self.lo || x > self.hi {
            ders[..=p].fill(0.0);
            return k - p;
        }
        if p == 0 {
            ders[0] = 0.0;
            return k;
        }
        // Degree-lowering derivative: B'_{i,p} = p * (B_{i,p-1} / (t_{i+p} - t_i)
        // - B_{i+1,p-1} / (t_{i+p+1} - t_{i+1})), empty spans contributing zero.
        let mut lower = [0.0; MAX_DEGREE];
        basis_funs(&self.knots, k, p - 1, xc, &mut lower);
        let t = &self.knots;
        for w in 0..=p {
            let i = k - p + w;
            let mut d = 0.0;
            let den1 = t[i + p] - t[i];
            if den1 > 0.0 && w > 0 {
                d += lower[w - 1] / den1;
            }
            let den2 = t[i + p + 1] - t[i + 1];
            if den2 > 0.0 && w < p {
                d -= lower[w] / den2;
            }
            ders[w] = p as f64 * d;
        }
        k - p
    }

    /// Single-point evaluation: `(first_index, window values)`.
    pub fn eval(&self, x: f64) -> (usize, Vec<f64>) {
        let mut vals = vec![0.0; self.degree + 1];
        let first = self.eval_into(x, &mut vals);
        counters::incr(counters::SPLINE_BASIS_EVALS, (self.degree + 1) as u64);
        (first, vals)
    }

    /// Dense evaluation of all `num_basis` functions at `x`; zero outside the
    /// support window. Convenience for inspection, not a hot path.
    pub fn eval_dense(&self, x: f64) -> Vec<f64> {
        let (first, vals) = self.eval(x);
        let mut out = vec![0.0; self.num_basis];
        out[first..first + vals.len()].copy_from_slice(&vals);
        out
    }

    /// Batched spline application. `x` is `(n, d_in)`, `coeffs` is
    /// `(d_in, num_basis, d_out)`, output is `(n, d_out)` with
    /// `y[r][o] = sum_i sum_m coeffs[i][m][o] * B_m(x[r][i])`.
    pub fn apply(&self, x: &Tensor, coeffs: &Tensor) -> TensorResult<Tensor> {
        let (n, d_in) = match x.shape() {
            [n, d] => (*n, *d),
            s => {
                return Err(TensorError::Rank {
                    op: "spline_apply",
                    expected: 2,
                    shape: s.to_vec(),
                })
            }
        };
        let (d_out, coeff_ok) = match coeffs.shape() {
            [ci, m, o] => (*o, *ci == d_in && *m == self.num_basis),
            _ => (0, false),
        };
        if !coeff_ok {
            return Err(TensorError::ShapeMismatch {
                op: "spline_apply",
                left: x.shape().to_vec(),
                right: coeffs.shape().to_vec(),
            });
        }
        let p = self.degree;
        let xs = x.to_vec();
        let cs = coeffs.to_vec();
        let mut y = vec![0.0; n * d_out];
        let mut vals = [0.0; MAX_DEGREE + 1];
        for r in 0..n {
            let yrow = &mut y[r * d_out..(r + 1) * d_out];
            for i in 0..d_in {
                let first = self.eval_into(xs[r * d_in + i], &mut vals);
                for w in 0..=p {
                    let b = vals[w];
                    if b == 0.0 {
                        continue;
                    }
                    let crow = &cs[(i * self.num_basis + first + w) * d_out..][..d_out];
                    for (yv, cv) in yrow.iter_mut().zip(crow) {
                        *yv += b * cv;
                    }
                }
            }
        }
        counters::incr(
            counters::SPLINE_BASIS_EVALS,
            (n * d_in * (p + 1)) as u64,
        );
        let out = Tensor::new(&[n, d_out], y)?;
        let basis = self.clone();
        let xs = Rc::new(xs);
        let cs = Rc::new(cs);
        record(
            &[x, coeffs],
            &out,
            Box::new(move |g| {
                let num_basis = basis.num_basis;
                let mut gx = vec![0.0; n * d_in];
                let mut gc = vec![0.0; d_in * num_basis * d_out];
                let mut vals = [0.0; MAX_DEGREE + 1];
                let mut ders = [0.0; MAX_DEGREE + 1];
                for r in 0..n {
                    let grow = &g[r * d_out..(r + 1) * d_out];
                    for i in 0..d_in {
                        let first =
                            basis.eval_with_derivative_into(xs[r * d_in + i], &mut vals, &mut ders);
                        let mut dx = 0.0;
                        for w in 0..=p {
                            let cidx = (i * num_basis + first + w) * d_out;
                            let crow = &cs[cidx..cidx + d_out];
                            let gcrow = &mut gc[cidx..cidx + d_out];
                            let b = vals[w];
                            let db = ders[w];
                            let mut dot = 0.0;
                            for o in 0..d_out {
                                dot += crow[o] * grow[o];
                                gcrow[o] += b * grow[o];
                            }
                            dx += db * dot;
                        }
                        gx[r * d_in + i] = dx;
                    }
                }
                vec![gx, gc]
            }),
        );
        Ok(out)
    }
}

/// Highest degree the fixed-size evaluation buffers accommodate.
pub const MAX_DEGREE: usize = 7;

/// The triangular basis-function scheme: fills `vals[0..=p]` with
/// `B_{k-p..=k, p}(x)` for a span index `k` satisfying `t_k <= x <= t_{k+1}`
/// with `t_k < t_{k+1}`. Numerically safe for any such span.
fn basis_funs(knots: &[f64], k: usize, p: usize, x: f64, vals: &mut [f64]) {
    debug_assert!(p <= MAX_DEGREE);
    let mut left = [0.0; MAX_DEGREE + 1];
    let mut right = [0.0; MAX_DEGREE + 1];
    vals[0] = 1.0;
    for j in 1..=p {
        left[j] = x - knots[k + 1 - j];
        right[j] = knots[k + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = vals[r] / (right[r + 1] + left[j - r]);
            vals[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        vals[j] = saved;
    }
}
