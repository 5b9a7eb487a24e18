//! The patch-function convolution operator.
//!
//! A feature map is unfolded into per-pixel receptive-field vectors (im2col
//! columns), every vector is mapped by a projector, and the results are laid
//! back onto the output grid. With a linear projector this is exactly a
//! standard convolution; with a KAN projector each patch passes through the
//! spline network instead. Chunked execution processes contiguous bands of
//! output pixels so the live patch buffer never exceeds
//! `B * K * chunk_pixels` elements, without changing any output value.

use crate::counters;
use crate::kan::KanNetwork;
use crate::spline::SplineBasis;
use crate::tensor::{concat, Tensor, TensorError, TensorResult};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;
use thiserror::Error;

pub const DEFAULT_CHUNK_PIXELS: usize = 4096;

#[derive(Debug, Error)]
pub enum CkanError {
    #[error("{h}x{w} input collapses to empty output under kernel {kernel:?} stride {stride:?} padding {padding:?} dilation {dilation:?}")]
    Geometry {
        h: usize,
        w: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        dilation: (usize, usize),
    },
    #[error("projector maps {proj_in} -> {proj_out}, geometry needs {k} -> {c_out}")]
    ProjectorDims {
        proj_in: usize,
        proj_out: usize,
        k: usize,
        c_out: usize,
    },
    #[error("chunk_pixels must be at least 1")]
    BadChunk,
    #[error("expected a rank-4 (B,C,H,W) input, got shape {0:?}")]
    BadInput(Vec<usize>),
    #[error("input has {got} channels, geometry expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("kernel, stride and dilation must be positive")]
    BadKernel,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type CkanResult<T> = Result<T, CkanError>;

/// Spatial geometry of one operator application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl ConvGeometry {
    pub fn square(c_in: usize, c_out: usize, k: usize, s: usize, p: usize) -> ConvGeometry {
        ConvGeometry {
            c_in,
            c_out,
            kernel: (k, k),
            stride: (s, s),
            padding: (p, p),
            dilation: (1, 1),
        }
    }

    /// Patch vector length `K = c_in * k_h * k_w`.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel.0 * self.kernel.1
    }
}

fn axis_out(extent: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
    let span = extent as isize + 2 * p as isize - (d * (k - 1)) as isize - 1;
    if span < 0 {
        return None;
    }
    Some(span as usize / s + 1)
}

/// Output height/width, pixel count `L`, and patch length `K` for an input of
/// the given size: `out = floor((extent + 2p - d(k-1) - 1) / s + 1)` per axis.
pub fn output_dims(h: usize, w: usize, g: &ConvGeometry) -> CkanResult<(usize, usize, usize, usize)> {
    if g.kernel.0 == 0
        || g.kernel.1 == 0
        || g.stride.0 == 0
        || g.stride.1 == 0
        || g.dilation.0 == 0
        || g.dilation.1 == 0
    {
        return Err(CkanError::BadKernel);
    }
    let geometry_err = || CkanError::Geometry {
        h,
        w,
        kernel: g.kernel,
        stride: g.stride,
        padding: g.padding,
        dilation: g.dilation,
    };
    let h_out = axis_out(h, g.kernel.0, g.stride.0, g.padding.0, g.dilation.0)
        .filter(|&v| v >= 1)
        .ok_or_else(geometry_err)?;
    let w_out = axis_out(w, g.kernel.1, g.stride.1, g.padding.1, g.dilation.1)
        .filter(|&v| v >= 1)
        .ok_or_else(geometry_err)?;
    Ok((h_out, w_out, h_out * w_out, g.patch_len()))
}

/// The per-patch map: either a dense linear weight (ordinary convolution via
/// im2col) or a KAN network applied to every patch row.
pub enum Projector {
    /// `weight` is (c_out, K); optional bias of length c_out.
    Linear { weight: Tensor, bias: Option<Tensor> },
    Kan(KanNetwork),
}

impl Projector {
    pub fn in_dim(&self) -> usize {
        match self {
            Projector::Linear { weight, .. } => weight.shape()[1],
            Projector::Kan(net) => net.d_in(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Projector::Linear { weight, .. } => weight.shape()[0],
            Projector::Kan(net) => net.d_out(),
        }
    }

    /// Learnable tensors in fixed serialization order.
    pub fn params(&self) -> Vec<Tensor> {
        match self {
            Projector::Linear { weight, bias } => {
                let mut p = vec![weight.clone()];
                if let Some(b) = bias {
                    p.push(b.clone());
                }
                p
            }
            Projector::Kan(net) => net.params(),
        }
    }

    /// Non-learnable state tensors; empty for the linear projector.
    pub fn fixed_tensors(&self) -> Vec<Tensor> {
        match self {
            Projector::Linear { .. } => Vec::new(),
            Projector::Kan(net) => net.fixed_tensors(),
        }
    }

    fn project_rows(&self, rows: &Tensor) -> TensorResult<Tensor> {
        match self {
            Projector::Linear { weight, bias } => {
                let n = rows.shape()[0] as u64;
                let (c_out, k) = (weight.shape()[0] as u64, weight.shape()[1] as u64);
                counters::incr(counters::PROJ_LINEAR_MACS, n * k * c_out);
                let y = rows.matmul_nt(weight)?;
                match bias {
                    Some(b) => y.add_rowvec(b),
                    None => Ok(y),
                }
            }
            Projector::Kan(net) => net.forward_counted(rows),
        }
    }

    /// Multiply-accumulates performed per patch row.
    pub fn macs_per_row(&self) -> u64 {
        match self {
            Projector::Linear { weight, .. } => (weight.shape()[0] * weight.shape()[1]) as u64,
            Projector::Kan(net) => net.macs_per_row(),
        }
    }
}

/// One operator instance: geometry, memory budget, and the patch projector.
pub struct CkanConfig {
    pub geom: ConvGeometry,
    pub chunk_pixels: usize,
    pub projector: Projector,
}

impl CkanConfig {
    pub fn new(geom: ConvGeometry, chunk_pixels: usize, projector: Projector) -> CkanResult<CkanConfig> {
        if chunk_pixels == 0 {
            return Err(CkanError::BadChunk);
        }
        let k = geom.patch_len();
        if projector.in_dim() != k || projector.out_dim() != geom.c_out {
            return Err(CkanError::ProjectorDims {
                proj_in: projector.in_dim(),
                proj_out: projector.out_dim(),
                k,
                c_out: geom.c_out,
            });
        }
        Ok(CkanConfig {
            geom,
            chunk_pixels,
            projector,
        })
    }

    /// Linear-mode operator from explicit weight (c_out, K) and optional bias.
    pub fn linear(
        geom: ConvGeometry,
        chunk_pixels: usize,
        weight: Tensor,
        bias: Option<Tensor>,
    ) -> CkanResult<CkanConfig> {
        CkanConfig::new(geom, chunk_pixels, Projector::Linear { weight, bias })
    }

    /// KAN-mode operator with the default two-layer K -> K -> c_out network.
    pub fn kan(
        geom: ConvGeometry,
        chunk_pixels: usize,
        basis: &SplineBasis,
        rng: &mut ChaCha8Rng,
    ) -> CkanResult<CkanConfig> {
        let net = KanNetwork::default_for(geom.patch_len(), geom.c_out, basis, rng)
            .map_err(|_| CkanError::ProjectorDims {
                proj_in: geom.patch_len(),
                proj_out: geom.c_out,
                k: geom.patch_len(),
                c_out: geom.c_out,
            })?;
        CkanConfig::new(geom, chunk_pixels, Projector::Kan(net))
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.projector.params()
    }

    pub fn fixed_tensors(&self) -> Vec<Tensor> {
        self.projector.fixed_tensors()
    }
}

/// Unfolded receptive fields for a contiguous range of output pixels.
///
/// Stored physically as one (B * range_len, K) row-major tensor — exactly the
/// layout the projector consumes — so the live buffer is a single tracked
/// allocation of `B * K * range_len` elements. The logical (B, K, L) view is
/// available through `as_bkl`.
pub struct PatchMatrix {
    rows: Tensor,
    b: usize,
    k: usize,
    l_full: usize,
    h_out: usize,
    w_out: usize,
    range: (usize, usize),
}

impl PatchMatrix {
    /// Patch rows, shape (B * range_len, K); row `b * range_len + i` holds
    /// the receptive field of output pixel `range.0 + i` in batch element `b`.
    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn batch(&self) -> usize {
        self.b
    }

    pub fn patch_len(&self) -> usize {
        self.k
    }

    /// Total output pixels of the full grid (not just this range).
    pub fn l(&self) -> usize {
        self.l_full
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h_out, self.w_out)
    }

    pub fn range(&self) -> (usize, usize) {
        self.range
    }

    pub fn range_len(&self) -> usize {
        self.range.1 - self.range.0
    }

    /// The (B, K, range_len) column view (a fresh untracked tensor).
    pub fn as_bkl(&self) -> TensorResult<Tensor> {
        self.rows
            .reshape(&[self.b, self.range_len(), self.k])?
            .permute(&[0, 2, 1])
    }

    /// One patch column: the receptive field of absolute output pixel `l`.
    pub fn column(&self, b: usize, l: usize) -> Vec<f64> {
        assert!(l >= self.range.0 && l < self.range.1, "pixel {l} outside unfolded range");
        let row = b * self.range_len() + (l - self.range.0);
        self.rows.data()[row * self.k..(row + 1) * self.k].to_vec()
    }
}

fn check_input(x: &Tensor, g: &ConvGeometry) -> CkanResult<(usize, usize, usize)> {
    let (b, c, h, w) = match x.shape() {
        [b, c, h, w] => (*b, *c, *h, *w),
        s => return Err(CkanError::BadInput(s.to_vec())),
    };
    if c != g.c_in {
        return Err(CkanError::ChannelMismatch {
            expected: g.c_in,
            got: c,
        });
    }
    Ok((b, h, w))
}

/// Unfold the receptive fields of output pixels `range.0..range.1` (row-major
/// over the output grid). Padding positions gather the virtual zero. Column
/// entries are ordered channel-major, then kernel-row-major.
pub fn unfold_range(x: &Tensor, g: &ConvGeometry, range: (usize, usize)) -> CkanResult<PatchMatrix> {
    let (b, h, w) = check_input(x, g)?;
    let (h_out, w_out, l, k) = output_dims(h, w, g)?;
    let (start, end) = range;
    assert!(start <= end && end <= l, "range {range:?} outside 0..{l}");
    let rl = end - start;
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let (dh, dw) = g.dilation;
    let mut map = Vec::with_capacity(b * rl * k);
    for bi in 0..b {
        for li in start..end {
            let oh = li / w_out;
            let ow = li % w_out;
            let ih0 = (oh * sh) as isize - ph as isize;
            let iw0 = (ow * sw) as isize - pw as isize;
            for c in 0..g.c_in {
                let plane = ((bi * g.c_in + c) * h) as isize;
                for ki in 0..kh {
                    let ih = ih0 + (ki * dh) as isize;
                    if ih < 0 || ih >= h as isize {
                        map.extend(std::iter::repeat_n(-1i64, kw));
                        continue;
                    }
                    let row_base = (plane + ih) * w as isize;
                    for kj in 0..kw {
                        let iw = iw0 + (kj * dw) as isize;
                        map.push(if iw >= 0 && iw < w as isize {
                            (row_base + iw) as i64
                        } else {
                            -1
                        });
                    }
                }
            }
        }
    }
    counters::incr(counters::UNFOLD_ELEMS, (b * rl * k) as u64);
    let rows = x.gather_map_tracked(Rc::new(map), &[b * rl, k]);
    Ok(PatchMatrix {
        rows,
        b,
        k,
        l_full: l,
        h_out,
        w_out,
        range,
    })
}

/// Unfold the full output grid.
pub fn unfold(x: &Tensor, g: &ConvGeometry) -> CkanResult<PatchMatrix> {
    let (_, h, w) = check_input(x, g)?;
    let (_, _, l, _) = output_dims(h, w, g)?;
    unfold_range(x, g, (0, l))
}

/// Apply the projector to every patch; result is (B, c_out, range_len).
pub fn project_patches(u: &PatchMatrix, cfg: &CkanConfig) -> CkanResult<Tensor> {
    let z = cfg.projector.project_rows(u.rows())?;
    let c_out = cfg.geom.c_out;
    Ok(z
        .reshape(&[u.batch(), u.range_len(), c_out])?
        .permute(&[0, 2, 1])?)
}

/// Lay projected columns (B, c_out, L) onto the output grid: a pure reshape,
/// because column order is row-major over the grid.
pub fn fold_spatial(z: &Tensor, h_out: usize, w_out: usize) -> CkanResult<Tensor> {
    let (b, c) = match z.shape() {
        [b, c, l] if *l == h_out * w_out => (*b, *c),
        s => {
            return Err(CkanError::Tensor(TensorError::ShapeMismatch {
                op: "fold_spatial",
                left: s.to_vec(),
                right: vec![h_out, w_out],
            }))
        }
    };
    Ok(z.reshape(&[b, c, h_out, w_out])?)
}

/// The full operator: unfold -> project -> fold in one pass over all pixels.
pub fn ckan_forward(x: &Tensor, cfg: &CkanConfig) -> CkanResult<Tensor> {
    let u = unfold(x, &cfg.geom)?;
    let z = project_patches(&u, cfg)?;
    let (h_out, w_out) = u.grid();
    drop(u);
    fold_spatial(&z, h_out, w_out)
}

/// The same operator over contiguous output-pixel bands of at most
/// `chunk_pixels` columns. Identical output; the live patch buffer stays
/// within `B * K * min(chunk_pixels, L)` elements because each band's
/// unfolded rows are dropped before the next band is gathered.
pub fn ckan_forward_chunked(x: &Tensor, cfg: &CkanConfig) -> CkanResult<Tensor> {
    let (_, h, w) = check_input(x, &cfg.geom)?;
    let (h_out, w_out, l, _) = output_dims(h, w, &cfg.geom)?;
    let step = cfg.chunk_pixels.min(l);
    let mut parts = Vec::with_capacity(l.div_ceil(step));
    let mut start = 0;
    while start < l {
        let end = (start + step).min(l);
        let u = unfold_range(x, &cfg.geom, (start, end))?;
        let z = project_patches(&u, cfg)?;
        drop(u);
        parts.push(z);
        start = end;
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let z = concat(2, &refs)?;
    fold_spatial(&z, h_out, w_out)
}

/// Closed-form operation counts for one forward pass, matching what the
/// instrumentation counters measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    /// Elements gathered by unfold: `B * K * L`.
    pub unfold_elems: u64,
    /// Projection multiply-accumulates: `B * L * K * c_out` in linear mode,
    /// `B * L * sum_layers(linear factor MACs + spline window MACs)` in KAN
    /// mode.
    pub proj_macs: u64,
    /// Peak live patch-buffer elements: `B * K * min(chunk_pixels, L)`.
    pub peak_patch_elems: u64,
}

impl CostModel {
    pub fn total(&self) -> u64 {
        self.unfold_elems + self.proj_macs
    }
}

pub fn cost_model(cfg: &CkanConfig, b: usize, h: usize, w: usize) -> CkanResult<CostModel> {
    let (_, _, l, k) = output_dims(h, w, &cfg.geom)?;
    Ok(CostModel {
        unfold_elems: (b * k * l) as u64,
        proj_macs: (b * l) as u64 * cfg.projector.macs_per_row(),
        peak_patch_elems: (b * k * cfg.chunk_pixels.min(l)) as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::no_grad;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct convolution: the plain quadruple-loop definition with zero
    /// padding, independent of unfold/fold entirely.
    fn reference_conv(
        x: &[f64],
        wgt: &[f64],
        bias: Option<&[f64]>,
        b: usize,
        g: &ConvGeometry,
        h: usize,
        w: usize,
    ) -> Vec<f64> {
        let (h_out, w_out, _, _) = output_dims(h, w, g).unwrap();
        let (kh, kw) = g.kernel;
        let mut y = vec![0.0; b * g.c_out * h_out * w_out];
        for bi in 0..b {
            for co in 0..g.c_out {
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = bias.map_or(0.0, |bv| bv[co]);
                        for ci in 0..g.c_in {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (oh * g.stride.0 + ki * g.dilation.0) as isize
                                        - g.padding.0 as isize;
                                    let iw = (ow * g.stride.1 + kj * g.dilation.1) as isize
                                        - g.padding.1 as isize;
                                    if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    let xi = ((bi * g.c_in + ci) * h + ih as usize) * w
                                        + iw as usize;
                                    let wi = ((co * g.c_in + ci) * kh + ki) * kw + kj;
                                    acc += x[xi] * wgt[wi];
                                }
                            }
                        }
                        y[((bi * g.c_out + co) * h_out + oh) * w_out + ow] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn output_dims_known_geometries() {
        let g = ConvGeometry::square(2, 4, 3, 1, 0);
        assert_eq!(output_dims(5, 5, &g).unwrap(), (3, 3, 9, 18));
        let g = ConvGeometry::square(1, 1, 3, 1, 1);
        assert_eq!(output_dims(8, 8, &g).unwrap(), (8, 8, 64, 9));
        let g = ConvGeometry::square(1, 1, 3, 2, 1);
        assert_eq!(output_dims(7, 7, &g).unwrap().0, 4);
        let g = ConvGeometry::square(1, 1, 5, 1, 0);
        assert!(matches!(
            output_dims(2, 8, &g),
            Err(CkanError::Geometry { .. })
        ));
    }

    #[test]
    fn unfold_single_patch_is_the_whole_image() {
        let g = ConvGeometry::square(1, 1, 3, 1, 0);
        let x = Tensor::new(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let u = unfold(&x, &g).unwrap();
        assert_eq!(u.l(), 1);
        assert_eq!(u.column(0, 0), (1..=9).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn unfold_zero_input_gives_zero_columns() {
        let g = ConvGeometry::square(2, 1, 3, 1, 1);
        let u = unfold(&Tensor::zeros(&[1, 2, 4, 4]), &g).unwrap();
        assert!(u.rows().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unfold_matches_nested_loop_gather() {
        let mut r = rng(50);
        let g = ConvGeometry::square(2, 1, 3, 1, 1);
        let x = rand_tensor(&[1, 2, 5, 5], &mut r);
        let xd = x.to_vec();
        let u = unfold(&x, &g).unwrap();
        let (h_out, w_out, l, _) = output_dims(5, 5, &g).unwrap();
        assert_eq!((h_out, w_out), u.grid());
        for li in 0..l {
            let col = u.column(0, li);
            let (oh, ow) = (li / w_out, li % w_out);
            let mut idx = 0;
            for c in 0..2usize {
                for ki in 0..3usize {
                    for kj in 0..3usize {
                        let ih = (oh + ki) as isize - 1;
                        let iw = (ow + kj) as isize - 1;
                        let want = if (0..5).contains(&ih) && (0..5).contains(&iw) {
                            xd[(c * 5 + ih as usize) * 5 + iw as usize]
                        } else {
                            0.0
                        };
                        assert_eq!(col[idx], want, "pixel {li} entry {idx}");
                        idx += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn bkl_view_matches_columns() {
        let mut r = rng(51);
        let g = ConvGeometry::square(2, 1, 3, 1, 0);
        let x = rand_tensor(&[2, 2, 5, 5], &mut r);
        let u = unfold(&x, &g).unwrap();
        let bkl = u.as_bkl().unwrap();
        assert_eq!(bkl.shape(), &[2, 18, 9]);
        let d = bkl.to_vec();
        for b in 0..2 {
            for l in 0..9 {
                let col = u.column(b, l);
                for k in 0..18 {
                    assert_eq!(d[(b * 18 + k) * 9 + l], col[k]);
                }
            }
        }
    }

    #[test]
    fn linear_ones_weight_sums_columns() {
        let mut r = rng(52);
        let g = ConvGeometry::square(2, 1, 3, 1, 0);
        let x = rand_tensor(&[1, 2, 4, 4], &mut r);
        let cfg = CkanConfig::linear(
            g,
            DEFAULT_CHUNK_PIXELS,
            Tensor::new(&[1, 18], vec![1.0; 18]).unwrap(),
            None,
        )
        .unwrap();
        let u = unfold(&x, &g).unwrap();
        let z = no_grad(|| project_patches(&u, &cfg)).unwrap().to_vec();
        for l in 0..u.l() {
            let want: f64 = u.column(0, l).iter().sum();
            assert!((z[l] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_mode_equals_direct_convolution() {
        let mut r = rng(53);
        let g = ConvGeometry::square(3, 4, 3, 1, 1);
        let x = rand_tensor(&[1, 3, 8, 8], &mut r);
        let wgt = rand_tensor(&[4, 27], &mut r);
        let bias = rand_tensor(&[4], &mut r);
        let cfg = CkanConfig::linear(g, DEFAULT_CHUNK_PIXELS, wgt.detach(), Some(bias.detach()))
            .unwrap();
        let y = no_grad(|| ckan_forward(&x, &cfg)).unwrap();
        let want = reference_conv(
            &x.to_vec(),
            &wgt.to_vec(),
            Some(&bias.to_vec()),
            1,
            &g,
            8,
            8,
        );
        let got = y.to_vec();
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn fold_is_row_major_and_value_preserving() {
        let z = Tensor::new(&[1, 1, 9], (0..9).map(|i| i as f64).collect()).unwrap();
        let y = fold_spatial(&z, 3, 3).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.to_vec(), z.to_vec());
        assert!(fold_spatial(&z, 2, 3).is_err());
    }

    #[test]
    fn k1_identity_projection_round_trips() {
        let mut r = rng(54);
        let g = ConvGeometry::square(3, 3, 1, 1, 0);
        let x = rand_tensor(&[2, 3, 4, 4], &mut r);
        let eye = {
            let mut m = vec![0.0; 9];
            for i in 0..3 {
                m[i * 3 + i] = 1.0;
            }
            Tensor::new(&[3, 3], m).unwrap()
        };
        let cfg = CkanConfig::linear(g, DEFAULT_CHUNK_PIXELS, eye, None).unwrap();
        let y = no_grad(|| ckan_forward(&x, &cfg)).unwrap();
        let (a, b) = (x.to_vec(), y.to_vec());
        for (av, bv) in a.iter().zip(&b) {
            assert!((av - bv).abs() < 1e-12);
        }
    }

    #[test]
    fn kan_mode_zero_init_broadcasts_layernorm_bias() {
        let mut r = rng(55);
        let basis = SplineBasis::default_basis();
        let g = ConvGeometry::square(2, 3, 3, 1, 1);
        let cfg = CkanConfig::kan(g, DEFAULT_CHUNK_PIXELS, &basis, &mut r).unwrap();
        if let Projector::Kan(net) = &cfg.projector {
            for layer in net.layers() {
                layer.linear().a().set_data(vec![0.0; layer.linear().a().numel()]);
            }
            net.layers()[1]
                .bias()
                .set_data(vec![0.5, -0.25, 1.0]);
        }
        let y = no_grad(|| ckan_forward(&Tensor::zeros(&[1, 2, 4, 4]), &cfg)).unwrap();
        let d = y.to_vec();
        for (c, want) in [0.5, -0.25, 1.0].iter().enumerate() {
            for px in 0..16 {
                assert!((d[c * 16 + px] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chunked_equals_full_for_all_required_chunk_sizes() {
        let mut r = rng(56);
        let basis = SplineBasis::default_basis();
        let g = ConvGeometry::square(2, 3, 3, 1, 1);
        let x = rand_tensor(&[2, 2, 6, 6], &mut r);
        let mut cfg = CkanConfig::kan(g, 1, &basis, &mut r).unwrap();
        for p in cfg.params() {
            p.set_data((0..p.numel()).map(|_| r.random_range(-0.3..0.3)).collect());
        }
        let full = no_grad(|| ckan_forward(&x, &cfg)).unwrap().to_vec();
        let l = 36;
        for chunk in [1, 2, l - 1, l, l + 7] {
            cfg.chunk_pixels = chunk;
            let chunked = no_grad(|| ckan_forward_chunked(&x, &cfg)).unwrap().to_vec();
            for (a, b) in chunked.iter().zip(&full) {
                assert!((a - b).abs() < 1e-12, "chunk={chunk}");
            }
        }
    }

    #[test]
    fn single_chunk_is_bitwise_identical_to_full() {
        let mut r = rng(62);
        let basis = SplineBasis::default_basis();
        let g = ConvGeometry::square(2, 3, 3, 1, 1);
        let x = rand_tensor(&[1, 2, 5, 5], &mut r);
        let cfg = CkanConfig::kan(g, 25, &basis, &mut r).unwrap();
        for p in cfg.params() {
            p.set_data((0..p.numel()).map(|_| r.random_range(-0.3..0.3)).collect());
        }
        let full = no_grad(|| ckan_forward(&x, &cfg)).unwrap().to_vec();
        let chunked = no_grad(|| ckan_forward_chunked(&x, &cfg)).unwrap().to_vec();
        let same_bits = full
            .iter()
            .zip(&chunked)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same_bits);
    }

    #[test]
    fn peak_patch_buffer_obeys_chunk_bound_exactly() {
        let _guard = counters::lock();
        let mut r = rng(57);
        let g = ConvGeometry::square(2, 2, 3, 1, 1);
        let x = rand_tensor(&[2, 2, 6, 6], &mut r);
        let wgt = rand_tensor(&[2, 18], &mut r);
        let l = 36;
        let k = 18;
        for chunk in [1usize, 4, 16, 36, 50] {
            let cfg = CkanConfig::linear(g, chunk, wgt.detach(), None).unwrap();
            counters::reset();
            no_grad(|| ckan_forward_chunked(&x, &cfg)).unwrap();
            let want = (2 * k * chunk.min(l)) as u64;
            assert_eq!(counters::get(counters::PATCH_PEAK), want, "chunk={chunk}");
        }
    }

    #[test]
    fn unfold_counter_is_bkl_exact_and_chunking_free() {
        let _guard = counters::lock();
        let mut r = rng(58);
        let g = ConvGeometry::square(3, 2, 3, 2, 1);
        let x = rand_tensor(&[2, 3, 9, 9], &mut r);
        let (_, _, l, k) = output_dims(9, 9, &g).unwrap();
        let wgt = rand_tensor(&[2, k], &mut r);
        let cfg = CkanConfig::linear(g, 7, wgt.detach(), None).unwrap();

        counters::reset();
        no_grad(|| ckan_forward(&x, &cfg)).unwrap();
        let full = counters::snapshot();
        assert_eq!(full[counters::UNFOLD_ELEMS], (2 * k * l) as u64);

        counters::reset();
        no_grad(|| ckan_forward_chunked(&x, &cfg)).unwrap();
        let chunked = counters::snapshot();
        assert_eq!(chunked[counters::UNFOLD_ELEMS], (2 * k * l) as u64);
        assert_eq!(
            chunked[counters::PROJ_LINEAR_MACS],
            full[counters::PROJ_LINEAR_MACS]
        );
    }

    #[test]
    fn cost_model_matches_measured_counters() {
        let _guard = counters::lock();
        let mut r = rng(59);
        let basis = SplineBasis::default_basis();
        let g = ConvGeometry::square(2, 3, 3, 1, 1);
        let x = rand_tensor(&[2, 2, 6, 6], &mut r);

        let cfg = CkanConfig::kan(g, 16, &basis, &mut r).unwrap();
        let model = cost_model(&cfg, 2, 6, 6).unwrap();
        counters::reset();
        no_grad(|| ckan_forward_chunked(&x, &cfg)).unwrap();
        assert_eq!(counters::get(counters::UNFOLD_ELEMS), model.unfold_elems);
        assert_eq!(counters::get(counters::PROJ_KAN_MACS), model.proj_macs);
        assert_eq!(counters::get(counters::PATCH_PEAK), model.peak_patch_elems);

        let wgt = rand_tensor(&[3, 18], &mut r);
        let lin = CkanConfig::linear(g, 64, wgt, None).unwrap();
        let model = cost_model(&lin, 2, 6, 6).unwrap();
        assert_eq!(model.unfold_elems, (2 * 18 * 36) as u64);
        assert_eq!(model.proj_macs, (2 * 36 * 18 * 3) as u64);
        counters::reset();
        no_grad(|| ckan_forward(&x, &lin)).unwrap();
        assert_eq!(counters::get(counters::PROJ_LINEAR_MACS), model.proj_macs);
    }

    #[test]
    fn translation_covariance_on_interior() {
        let mut r = rng(60);
        let g = ConvGeometry::square(1, 2, 3, 1, 0);
        let base = rand_tensor(&[1, 1, 8, 8], &mut r);
        let bd = base.to_vec();
        // shift right by one pixel (wrapping column dropped)
        let mut shifted = vec![0.0; 64];
        for row in 0..8 {
            for col in 1..8 {
                shifted[row * 8 + col] = bd[row * 8 + col - 1];
            }
        }
        let wgt = rand_tensor(&[2, 9], &mut r);
        let cfg = CkanConfig::linear(g, DEFAULT_CHUNK_PIXELS, wgt, None).unwrap();
        let y0 = no_grad(|| ckan_forward(&base, &cfg)).unwrap().to_vec();
        let xs = Tensor::new(&[1, 1, 8, 8], shifted).unwrap();
        let y1 = no_grad(|| ckan_forward(&xs, &cfg)).unwrap().to_vec();
        // output grid is 6x6; compare interior columns 1.. of shifted against
        // columns ..5 of base
        for c in 0..2 {
            for row in 0..6 {
                for col in 1..6 {
                    let a = y1[(c * 6 + row) * 6 + col];
                    let b = y0[(c * 6 + row) * 6 + col - 1];
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradients_flow_through_the_full_chain() {
        let mut r = rng(61);
        let basis = SplineBasis::default_basis();
        let g = ConvGeometry::square(2, 2, 3, 1, 1);
        let cfg = CkanConfig::kan(g, 9, &basis, &mut r).unwrap();
        for p in cfg.params() {
            p.set_data((0..p.numel()).map(|_| r.random_range(-0.3..0.3)).collect());
        }
        let xs: Vec<f64> = (0..50).map(|_| r.random_range(-1.0..1.0)).collect();
        let x = Tensor::param(&[1, 2, 5, 5], xs).unwrap();

        for chunked in [false, true] {
            let run = |inp: &Tensor| -> Tensor {
                let y = if chunked {
                    ckan_forward_chunked(inp, &cfg).unwrap()
                } else {
                    ckan_forward(inp, &cfg).unwrap()
                };
                let flat = y.reshape(&[y.numel()]).unwrap();
                flat.mul(&flat).unwrap().sum_all()
            };
            x.zero_grad();
            for p in cfg.params() {
                p.zero_grad();
            }
            run(&x).backward().unwrap();

            let h = 1e-5;
            let mut targets = cfg.params();
            targets.push(x.clone());
            for t in &targets {
                let grad = t.grad_or_zeros();
                let base = t.to_vec();
                let stride = (base.len() / 6).max(1);
                for i in (0..base.len()).step_by(stride) {
                    let mut plus = base.clone();
                    plus[i] += h;
                    t.set_data(plus);
                    let fp = no_grad(|| run(&x).item());
                    let mut minus = base.clone();
                    minus[i] -= h;
                    t.set_data(minus);
                    let fm = no_grad(|| run(&x).item());
                    t.set_data(base.clone());
                    let fd = (fp - fm) / (2.0 * h);
                    let rel = (grad[i] - fd).abs() / grad[i].abs().max(1.0);
                    assert!(
                        rel < 1e-5,
                        "chunked={chunked} idx {i}: analytic {} vs fd {fd}",
                        grad[i]
                    );
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn unfold_shapes_follow_the_formula(
            h in 3usize..9,
            w in 3usize..9,
            c_in in 1usize..3,
            k in 1usize..4,
            s in 1usize..3,
            p in 0usize..2,
        ) {
            let g = ConvGeometry::square(c_in, 1, k, s, p);
            prop_assume!(output_dims(h, w, &g).is_ok());
            let (h_out, w_out, l, kk) = output_dims(h, w, &g).unwrap();
            let x = Tensor::zeros(&[1, c_in, h, w]);
            let u = unfold(&x, &g).unwrap();
            prop_assert_eq!(u.grid(), (h_out, w_out));
            prop_assert_eq!(u.l(), l);
            prop_assert_eq!(u.patch_len(), kk);
            prop_assert_eq!(u.rows().shape(), &[l, kk]);
        }
    }
}
