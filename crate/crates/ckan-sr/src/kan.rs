//! KAN layers: a factorized linear map on the activated input plus a bank of
//! learnable per-dimension splines, combined under row-wise LayerNorm.
//!
//! The linear weight is never stored densely as a parameter. It is a sum
//! `W = sum_jk a_jk * M_jk` over fixed rank-one basis matrices
//! `M_jk = u_j v_k^T`, with only the small coefficient grid `a` learnable.
//! The basis vectors come from Gram-Schmidt over seeded Gaussian draws, so a
//! seed fully determines the layer.

use crate::counters;
use crate::spline::SplineBasis;
use crate::tensor::{Tensor, TensorError, TensorResult};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::cell::RefCell;
use thiserror::Error;

/// Variance guard inside LayerNorm.
pub const LN_EPS: f64 = 1e-5;

/// Default cap on the factorization ranks.
pub const DEFAULT_MAX_RANK: usize = 8;

#[derive(Debug, Error)]
pub enum KanError {
    #[error("layer width {0} is degenerate: per-row normalization needs at least 2 outputs")]
    DegenerateWidth(usize),
    #[error("a network needs at least one dimension in its chain")]
    EmptyDims,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `k` orthonormal rows of length `n` (k <= n), from Gram-Schmidt over
/// Gaussian draws. Two projection passes keep the result orthonormal to
/// machine precision.
fn orthonormal_rows(k: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    assert!(k <= n, "cannot fit {k} orthonormal vectors in dimension {n}");
    let mut rows: Vec<f64> = Vec::with_capacity(k * n);
    let mut count = 0;
    while count < k {
        let mut w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for r in 0..count {
                let prev = &rows[r * n..(r + 1) * n];
                let dot: f64 = w.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (wi, pi) in w.iter_mut().zip(prev) {
                    *wi -= dot * pi;
                }
            }
        }
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // degenerate draw; probability ~0 but cheap to guard
        }
        rows.extend(w.iter().map(|a| a / norm));
        count += 1;
    }
    rows
}

/// Linear map factorized over fixed rank-one bases; only `a` learns.
pub struct FactorizedLinear {
    d_in: usize,
    d_out: usize,
    rank_p: usize,
    rank_s: usize,
    /// Learnable mixing coefficients, shape (rank_p, rank_s).
    a: Tensor,
    /// Fixed orthonormal output-side vectors, shape (rank_p, d_out).
    u: Tensor,
    /// Fixed orthonormal input-side vectors, shape (rank_s, d_in).
    v: Tensor,
    /// Optional densely materialized weight, refreshed on demand. Never used
    /// by `apply` (the factorized path is cheaper at these ranks); it exists
    /// for inspection and for the cache-consistency contract.
    cached_w: RefCell<Option<Vec<f64>>>,
}

impl FactorizedLinear {
    /// Ranks default to `min(8, d_out, d_in)`; `a` is Gaussian with scale
    /// `0.1 * sqrt(d_out / (rank_p * rank_s))` so that `W x` has magnitude
    /// around 0.1 for unit-variance inputs (small-gain fan-in scaling).
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> FactorizedLinear {
        let rank = DEFAULT_MAX_RANK.min(d_in).min(d_out);
        FactorizedLinear::with_ranks(d_in, d_out, rank, rank, rng)
    }

    pub fn with_ranks(
        d_in: usize,
        d_out: usize,
        rank_p: usize,
        rank_s: usize,
        rng: &mut ChaCha8Rng,
    ) -> FactorizedLinear {
        let u = orthonormal_rows(rank_p, d_out, rng);
        let v = orthonormal_rows(rank_s, d_in, rng);
        let std_a = 0.1 * (d_out as f64 / (rank_p * rank_s) as f64).sqrt();
        let a: Vec<f64> = (0..rank_p * rank_s)
            .map(|_| std_a * rng.sample::<f64, _>(StandardNormal))
            .collect();
        FactorizedLinear {
            d_in,
            d_out,
            rank_p,
            rank_s,
            a: Tensor::param(&[rank_p, rank_s], a).expect("sized above"),
            u: Tensor::new(&[rank_p, d_out], u).expect("sized above"),
            v: Tensor::new(&[rank_s, d_in], v).expect("sized above"),
            cached_w: RefCell::new(None),
        }
    }

    /// Build from explicit bases (tests and special configurations). `u` is
    /// (rank_p, d_out), `v` is (rank_s, d_in), `a` is (rank_p, rank_s).
    pub fn with_bases(a: Tensor, u: Tensor, v: Tensor) -> TensorResult<FactorizedLinear> {
        let (rank_p, d_out) = match u.shape() {
            [r, d] => (*r, *d),
            s => {
                return Err(TensorError::Rank {
                    op: "with_bases",
                    expected: 2,
                    shape: s.to_vec(),
                })
            }
        };
        let (rank_s, d_in) = match v.shape() {
            [r, d] => (*r, *d),
            s => {
                return Err(TensorError::Rank {
                    op: "with_bases",
                    expected: 2,
                    shape: s.to_vec(),
                })
            }
        };
        if a.shape() != [rank_p, rank_s] {
            return Err(TensorError::ShapeMismatch {
                op: "with_bases",
                left: a.shape().to_vec(),
                right: vec![rank_p, rank_s],
            });
        }
        Ok(FactorizedLinear {
            d_in,
            d_out,
            rank_p,
            rank_s,
            a,
            u,
            v,
            cached_w: RefCell::new(None),
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn ranks(&self) -> (usize, usize) {
        (self.rank_p, self.rank_s)
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn bases(&self) -> (&Tensor, &Tensor) {
        (&self.u, &self.v)
    }

    /// The dense weight `W = sum_jk a_jk u_j v_k^T` as a (d_out, d_in)
    /// tensor, differentiable with respect to `a` only.
    pub fn materialize_weight(&self) -> TensorResult<Tensor> {
        // W = U^T . A . V
        self.u.permute(&[1, 0])?.matmul(&self.a)?.matmul(&self.v)
    }

    /// Recompute and store the dense weight. The cache is a convenience
    /// snapshot; mutating `a` afterwards stales it until the next refresh.
    pub fn refresh_cached_weight(&self) -> TensorResult<()> {
        let w = crate::tensor::no_grad(|| self.materialize_weight())?;
        *self.cached_w.borrow_mut() = Some(w.to_vec());
        Ok(())
    }

    pub fn cached_weight(&self) -> Option<Vec<f64>> {
        self.cached_w.borrow().clone()
    }

    pub fn clear_cached_weight(&self) {
        *self.cached_w.borrow_mut() = None;
    }

    /// `y = x W^T` for `x` of shape (n, d_in), computed through the factors:
    /// `((x V^T) A^T) U`, never materializing `W`.
    pub fn apply(&self, x: &Tensor) -> TensorResult<Tensor> {
        x.matmul_nt(&self.v)?.matmul_nt(&self.a)?.matmul(&self.u)
    }

    /// Multiply-accumulates `apply` performs per input row.
    pub fn macs_per_row(&self) -> u64 {
        (self.d_in * self.rank_s + self.rank_s * self.rank_p + self.rank_p * self.d_out) as u64
    }
}

/// One KAN layer: `y = LayerNorm(W sigma(x) + phi(x))` with sigma = silu and
/// phi the per-dimension spline bank (coefficients start at zero, so a fresh
/// layer is a mild linear map).
pub struct KanLayer {
    d_in: usize,
    d_out: usize,
    linear: FactorizedLinear,
    basis: SplineBasis,
    /// Spline bank, shape (d_in, num_basis, d_out), zero-initialized.
    coeffs: Tensor,
    gain: Tensor,
    bias: Tensor,
}

impl KanLayer {
    pub fn new(
        d_in: usize,
        d_out: usize,
        basis: &SplineBasis,
        rng: &mut ChaCha8Rng,
    ) -> Result<KanLayer, KanError> {
        if d_out < 2 {
            return Err(KanError::DegenerateWidth(d_out));
        }
        let linear = FactorizedLinear::new(d_in, d_out, rng);
        let coeffs = Tensor::param(
            &[d_in, basis.num_basis(), d_out],
            vec![0.0; d_in * basis.num_basis() * d_out],
        )?;
        Ok(KanLayer {
            d_in,
            d_out,
            linear,
            basis: basis.clone(),
            coeffs,
            gain: Tensor::param(&[d_out], vec![1.0; d_out])?,
            bias: Tensor::param(&[d_out], vec![0.0; d_out])?,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn linear(&self) -> &FactorizedLinear {
        &self.linear
    }

    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    pub fn coeffs(&self) -> &Tensor {
        &self.coeffs
    }

    pub fn gain(&self) -> &Tensor {
        &self.gain
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// The spline contribution `phi(x)` alone, shape (n, d_out).
    pub fn spline_term(&self, x: &Tensor) -> TensorResult<Tensor> {
        self.basis.apply(x, &self.coeffs)
    }

    pub fn forward(&self, x: &Tensor) -> TensorResult<Tensor> {
        let pre = self.linear.apply(&x.silu())?.add(&self.spline_term(x)?)?;
        pre.layer_norm_rows(&self.gain, &self.bias, LN_EPS)
    }

    /// Learnable tensors in fixed serialization order.
    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.linear.a.clone(),
            self.coeffs.clone(),
            self.gain.clone(),
            self.bias.clone(),
        ]
    }

    /// Non-learnable state (the frozen factorization bases), in fixed
    /// serialization order. Needed to reconstruct the layer exactly.
    pub fn fixed_tensors(&self) -> Vec<Tensor> {
        let (u, v) = self.linear.bases();
        vec![u.clone(), v.clone()]
    }

    pub fn macs_per_row(&self) -> u64 {
        let spline = self.d_in * (self.basis.degree() + 1) * self.d_out;
        self.linear.macs_per_row() + spline as u64
    }
}

/// A chain of KAN layers with matching interface dims. An empty chain (one
/// entry in `dims`) is the identity.
pub struct KanNetwork {
    layers: Vec<KanLayer>,
    d_in: usize,
    d_out: usize,
}

impl KanNetwork {
    pub fn new(
        dims: &[usize],
        basis: &SplineBasis,
        rng: &mut ChaCha8Rng,
    ) -> Result<KanNetwork, KanError> {
        if dims.is_empty() {
            return Err(KanError::EmptyDims);
        }
        let layers = dims
            .windows(2)
            .map(|w| KanLayer::new(w[0], w[1], basis, rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(KanNetwork {
            layers,
            d_in: dims[0],
            d_out: *dims.last().expect("non-empty"),
        })
    }

    /// The default patch projector: two layers, K -> K -> c_out.
    pub fn default_for(
        k: usize,
        c_out: usize,
        basis: &SplineBasis,
        rng: &mut ChaCha8Rng,
    ) -> Result<KanNetwork, KanError> {
        KanNetwork::new(&[k, k, c_out], basis, rng)
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn layers(&self) -> &[KanLayer] {
        &self.layers
    }

    pub fn forward(&self, x: &Tensor) -> TensorResult<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Forward that also bumps the KAN projection MAC counter; the patch
    /// projector calls this so measured counters match the cost model.
    pub fn forward_counted(&self, x: &Tensor) -> TensorResult<Tensor> {
        let rows = x.shape().first().copied().unwrap_or(0) as u64;
        counters::incr(counters::PROJ_KAN_MACS, rows * self.macs_per_row());
        self.forward(x)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn fixed_tensors(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| l.fixed_tensors()).collect()
    }

    pub fn macs_per_row(&self) -> u64 {
        self.layers.iter().map(|l| l.macs_per_row()).sum()
    }
}
