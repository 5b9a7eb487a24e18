//! Named runtime oracle checks, exposed through the CLI `selftest` command.
//!
//! Every check recomputes its reference independently of the code under
//! test (direct quadruple-loop convolution, central finite differences,
//! closed-form metric values), so a passing run certifies the installed
//! binary, not the test suite that built it. `break_fold` deliberately
//! corrupts the operator output inside the convolution check to prove the
//! oracle fails loudly when spatial reassembly is wrong.

use crate::ckan::{
    ckan_forward, ckan_forward_chunked, cost_model, output_dims, CkanConfig, ConvGeometry,
};
use crate::counters;
use crate::data::ImageBuffer;
use crate::kan::KanLayer;
use crate::metrics::{psnr_from_mse, ssim_y};
use crate::spline::SplineBasis;
use crate::tensor::{no_grad, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Default)]
pub struct SelftestOptions {
    /// Run only checks whose name contains this substring.
    pub filter: Option<String>,
    /// Inject a one-element corruption into the operator output inside the
    /// convolution check; the run must then fail.
    pub break_fold: bool,
}

pub struct Check {
    pub name: &'static str,
    pub run: fn(&SelftestOptions) -> Result<String, String>,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Plain quadruple-loop convolution with zero padding; shares nothing with
/// the unfold/project/fold pipeline.
fn reference_conv(
    x: &[f64],
    wgt: &[f64],
    bias: Option<&[f64]>,
    b: usize,
    g: &ConvGeometry,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let (h_out, w_out, _, _) = output_dims(h, w, g).expect("valid geometry");
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
                                let xi = ((bi * g.c_in + ci) * h + ih as usize) * w + iw as usize;
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

fn linear_cfg(g: ConvGeometry, chunk: usize, r: &mut ChaCha8Rng) -> CkanConfig {
    let k = g.patch_len();
    let w = Tensor::new(&[g.c_out, k], rand_vec(g.c_out * k, r)).expect("sized");
    let b = Tensor::new(&[g.c_out], rand_vec(g.c_out, r)).expect("sized");
    CkanConfig::linear(g, chunk, w, Some(b)).expect("dims consistent")
}

fn conv_equivalence(opts: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(0x5e1f_7e57);
    let grid = [
        (1, 1, 0, 1, 7, 9),
        (3, 1, 1, 1, 8, 8),
        (3, 2, 1, 1, 9, 7),
        (5, 1, 2, 1, 10, 10),
        (3, 1, 0, 2, 11, 9),
        (2, 2, 0, 1, 8, 6),
        (4, 3, 2, 1, 12, 10),
        (3, 1, 2, 2, 9, 11),
    ];
    let mut worst = 0.0f64;
    for (idx, &(k, s, p, d, h, w)) in grid.iter().enumerate() {
        let mut g = ConvGeometry::square(2, 3, k, s, p);
        g.dilation = (d, d);
        let cfg = linear_cfg(g, 16, &mut r);
        let x_data = rand_vec(2 * 2 * h * w, &mut r);
        let x = Tensor::new(&[2, 2, h, w], x_data.clone()).expect("sized");
        let mut got = no_grad(|| ckan_forward(&x, &cfg)).map_err(|e| e.to_string())?.to_vec();
        if opts.break_fold && idx == 0 {
            got[0] += 1e-3;
        }
        let (wt, bt) = match &cfg.projector {
            crate::ckan::Projector::Linear { weight, bias } => {
                (weight.to_vec(), bias.as_ref().map(|b| b.to_vec()))
            }
            _ => unreachable!("linear_cfg builds linear projectors"),
        };
        let want = reference_conv(&x_data, &wt, bt.as_deref(), 2, &cfg.geom, h, w);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst <= 1e-10 {
        Ok(format!("8 geometries, max |op - direct conv| = {worst:.3e}"))
    } else {
        Err(format!("max |op - direct conv| = {worst:.3e} > 1e-10"))
    }
}

fn chunk_invariance(_: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(0xc4a2);
    let g = ConvGeometry::square(3, 4, 3, 1, 1);
    let (h, w) = (9, 11);
    let l = h * w;
    let x = Tensor::new(&[2, 3, h, w], rand_vec(2 * 3 * h * w, &mut r)).expect("sized");
    let mut cfg = linear_cfg(g, l, &mut r);
    let full = no_grad(|| ckan_forward(&x, &cfg)).map_err(|e| e.to_string())?.to_vec();
    let mut worst = 0.0f64;
    for chunk in [1, 2, l - 1, l, l + 7] {
        cfg.chunk_pixels = chunk;
        let banded = no_grad(|| ckan_forward_chunked(&x, &cfg))
            .map_err(|e| e.to_string())?
            .to_vec();
        for (a, b) in banded.iter().zip(&full) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst <= 1e-12 {
        Ok(format!("chunks {{1, 2, L-1, L, L+7}}, max deviation = {worst:.3e}"))
    } else {
        Err(format!("max deviation across chunk sizes = {worst:.3e} > 1e-12"))
    }
}

fn memory_bound(_: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(0x3e30);
    let g = ConvGeometry::square(3, 5, 3, 1, 1);
    let (b, h, w) = (2, 12, 10);
    let x = Tensor::new(&[b, 3, h, w], rand_vec(b * 3 * h * w, &mut r)).expect("sized");
    let mut lines = Vec::new();
    for chunk in [1usize, 7, 40, 200] {
        let cfg = linear_cfg(g, chunk, &mut r);
        let model = cost_model(&cfg, b, h, w).map_err(|e| e.to_string())?;
        let guard = counters::lock();
        counters::reset();
        no_grad(|| ckan_forward_chunked(&x, &cfg)).map_err(|e| e.to_string())?;
        let peak = counters::get(counters::PATCH_PEAK);
        drop(guard);
        if peak != model.peak_patch_elems {
            return Err(format!(
                "chunk {chunk}: peak {peak} != model {}",
                model.peak_patch_elems
            ));
        }
        lines.push(format!("chunk {chunk}: peak {peak}"));
    }
    Ok(lines.join(", "))
}

fn unfold_count(_: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(0x0f01d);
    let g = ConvGeometry::square(2, 3, 3, 2, 1);
    let (b, h, w) = (3, 13, 9);
    let x = Tensor::new(&[b, 2, h, w], rand_vec(b * 2 * h * w, &mut r)).expect("sized");
    let cfg = linear_cfg(g, 11, &mut r);
    let model = cost_model(&cfg, b, h, w).map_err(|e| e.to_string())?;
    let guard = counters::lock();
    counters::reset();
    no_grad(|| ckan_forward(&x, &cfg)).map_err(|e| e.to_string())?;
    let full = (
        counters::get(counters::UNFOLD_ELEMS),
        counters::get(counters::PROJ_LINEAR_MACS),
    );
    counters::reset();
    no_grad(|| ckan_forward_chunked(&x, &cfg)).map_err(|e| e.to_string())?;
    let banded = (
        counters::get(counters::UNFOLD_ELEMS),
        counters::get(counters::PROJ_LINEAR_MACS),
    );
    drop(guard);
    if full.0 != model.unfold_elems || full.1 != model.proj_macs {
        return Err(format!(
            "full pass measured {full:?}, model ({}, {})",
            model.unfold_elems, model.proj_macs
        ));
    }
    if banded != full {
        return Err(format!("banded pass measured {banded:?}, full pass {full:?}"));
    }
    Ok(format!(
        "unfold elements = {} = B*K*L, projection MACs = {}, banded identical",
        full.0, full.1
    ))
}

/// Central-difference gradient comparison over every parameter of `loss`.
fn fd_check(params: &[Tensor], loss: &dyn Fn() -> f64, grads: &[Vec<f64>]) -> Result<f64, String> {
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for (p, g) in params.iter().zip(grads) {
        let base = p.to_vec();
        for j in 0..base.len() {
            let mut up = base.clone();
            up[j] += eps;
            p.set_data(up);
            let f1 = loss();
            let mut dn = base.clone();
            dn[j] -= eps;
            p.set_data(dn);
            let f0 = loss();
            p.set_data(base.clone());
            let fd = (f1 - f0) / (2.0 * eps);
            let denom = fd.abs().max(g[j].abs()).max(1e-8);
            worst = worst.max((fd - g[j]).abs() / denom);
        }
    }
    Ok(worst)
}

fn gradient_linear(_: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(0x9d01);
    let g = ConvGeometry::square(2, 2, 3, 1, 1);
    let k = g.patch_len();
    let w = Tensor::param(&[g.c_out, k], rand_vec(g.c_out * k, &mut r)).expect("sized");
    let b = Tensor::param(&[g.c_out], rand_vec(g.c_out, &mut r)).expect("sized");
    let cfg = CkanConfig::linear(g, 8, w.clone(), Some(b.clone())).expect("dims consistent");
    let x = Tensor::new(&[1, 2, 5, 4], rand_vec(40, &mut r)).expect("sized");
    let run = || {
        let y = ckan_forward(&x, &cfg).expect("valid geometry");
        y.mul(&y).expect("same shape").mean_all()
    };
    w.zero_grad();
    b.zero_grad();
    run().backward().map_err(|e| e.to_string())?;
    let grads = [w.grad_or_zeros(), b.grad_or_zeros()];
    let loss = || no_grad(|| run().item());
    let worst = fd_check(&[w.clone(), b.clone()], &loss, &grads)?;
    if worst < 1e-5 {
        Ok(format!("weight+bias, max relative error = {worst:.3e}"))
    } else {
        Err(format!("max relative gradient error = {worst:.3e} >= 1e-5"))
    }
}

fn gradient_kan(_: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(0xaba1);
    let basis = SplineBasis::default_basis();
    let layer = KanLayer::new(4, 3, &basis, &mut r).map_err(|e| e.to_string())?;
    let x = Tensor::new(&[5, 4], rand_vec(20, &mut r)).expect("sized");
    let params = layer.params();
    let run = || {
        let y = layer.forward(&x).expect("dims match");
        y.mul(&y).expect("same shape").mean_all()
    };
    for p in &params {
        p.zero_grad();
    }
    run().backward().map_err(|e| e.to_string())?;
    let grads: Vec<Vec<f64>> = params.iter().map(|p| p.grad_or_zeros()).collect();
    let loss = || no_grad(|| run().item());
    let worst = fd_check(&params, &loss, &grads)?;
    if worst < 1e-5 {
        Ok(format!(
            "{} parameters through mixing/spline/norm, max relative error = {worst:.3e}",
            params.iter().map(|p| p.numel()).sum::<usize>()
        ))
    } else {
        Err(format!("max relative gradient error = {worst:.3e} >= 1e-5"))
    }
}

fn spline_partition_of_unity(_: &SelftestOptions) -> Result<String, String> {
    let basis = SplineBasis::default_basis();
    let (lo, hi) = basis.range();
    let p = basis.degree();
    let mut worst = 0.0f64;
    let n = 1000;
    for i in 0..n {
        let x = lo + (hi - lo) * (i as f64 + 0.5) / n as f64;
        let dense = basis.eval_dense(x);
        let sum: f64 = dense.iter().sum();
        worst = worst.max((sum - 1.0).abs());
        let nonzero = dense.iter().filter(|v| v.abs() > 0.0).count();
        if nonzero > p + 1 {
            return Err(format!("{nonzero} nonzero bases at x = {x}, window is {}", p + 1));
        }
    }
    if worst <= 1e-12 {
        Ok(format!("{n} points, max |sum - 1| = {worst:.3e}, window <= {}", p + 1))
    } else {
        Err(format!("max |sum - 1| = {worst:.3e} > 1e-12"))
    }
}

fn metric_psnr(_: &SelftestOptions) -> Result<String, String> {
    let at_hundredth = psnr_from_mse(0.01, 1.0).map_err(|e| e.to_string())?;
    if at_hundredth.db != 20.0 {
        return Err(format!("psnr at mse 0.01 gave {} dB, want exactly 20", at_hundredth.db));
    }
    // independent scalar evaluation on a known pair
    let a = ImageBuffer::constant(4, 4, 0.5);
    let b = ImageBuffer::constant(4, 4, 0.6);
    let got = crate::metrics::psnr(a.data(), b.data(), 1.0).map_err(|e| e.to_string())?;
    let want = 10.0 * (1.0f64 / (0.1f64 * 0.1)).log10();
    if (got.db - want).abs() > 1e-8 {
        return Err(format!("uniform-offset pair gave {} dB, want {want}", got.db));
    }
    Ok(format!("mse 0.01 -> 20 dB exactly; uniform pair {:.6} dB", got.db))
}

fn metric_ssim(_: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(0x551_3);
    let data = (0..3 * 16 * 16).map(|_| r.random_range(0.0..1.0)).collect();
    let img = ImageBuffer::new(16, 16, data).map_err(|e| e.to_string())?;
    let self_sim = ssim_y(&img, &img).map_err(|e| e.to_string())?;
    if self_sim != 1.0 {
        return Err(format!("ssim(x, x) = {self_sim}, want exactly 1"));
    }
    let mut shifted = img.data().to_vec();
    for v in &mut shifted {
        *v = (*v * 0.9 + 0.05).clamp(0.0, 1.0);
    }
    let other = ImageBuffer::new(16, 16, shifted).map_err(|e| e.to_string())?;
    let ab = ssim_y(&img, &other).map_err(|e| e.to_string())?;
    let ba = ssim_y(&other, &img).map_err(|e| e.to_string())?;
    if ab.to_bits() != ba.to_bits() {
        return Err(format!("asymmetric: {ab} vs {ba}"));
    }
    Ok(format!("ssim(x, x) = 1 exactly, symmetric ({ab:.6})"))
}

fn loss_softplus(_: &SelftestOptions) -> Result<String, String> {
    // softplus(-z) must equal -ln(sigmoid(z)) where the naive form is stable
    for z in [-30.0, -3.0, -0.1, 0.0, 0.1, 3.0, 30.0] {
        let t = Tensor::new(&[1], vec![z]).expect("sized");
        let stable = t.neg().softplus().item();
        let naive = -(1.0f64 / (1.0 + (-z).exp())).ln();
        if (stable - naive).abs() > 1e-10 {
            return Err(format!("z = {z}: softplus form {stable} vs -ln(sigmoid) {naive}"));
        }
    }
    // and must stay finite where the naive form overflows
    for z in [-1000.0, 1000.0] {
        let t = Tensor::new(&[1], vec![z]).expect("sized");
        let stable = t.neg().softplus().item();
        if !stable.is_finite() {
            return Err(format!("z = {z}: non-finite value {stable}"));
        }
    }
    Ok("matches -ln(sigmoid) to 1e-10, finite at |z| = 1000".to_string())
}

pub fn checks() -> Vec<Check> {
    vec![
        Check { name: "conv-equivalence", run: conv_equivalence },
        Check { name: "chunk-invariance", run: chunk_invariance },
        Check { name: "memory-bound", run: memory_bound },
        Check { name: "unfold-count", run: unfold_count },
        Check { name: "gradient-linear", run: gradient_linear },
        Check { name: "gradient-kan", run: gradient_kan },
        Check { name: "spline-partition-of-unity", run: spline_partition_of_unity },
        Check { name: "metric-psnr", run: metric_psnr },
        Check { name: "metric-ssim", run: metric_ssim },
        Check { name: "loss-softplus", run: loss_softplus },
    ]
}

/// Run all checks matching the filter; outcomes preserve registry order.
pub fn run_selftest(opts: &SelftestOptions) -> Vec<CheckOutcome> {
    checks()
        .into_iter()
        .filter(|c| {
            opts.filter
                .as_deref()
                .is_none_or(|f| c.name.contains(f))
        })
        .map(|c| match (c.run)(opts) {
            Ok(detail) => CheckOutcome { name: c.name, passed: true, detail },
            Err(detail) => CheckOutcome { name: c.name, passed: false, detail },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_clean() {
        let outcomes = run_selftest(&SelftestOptions::default());
        assert_eq!(outcomes.len(), checks().len());
        for o in &outcomes {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
    }

    #[test]
    fn filter_selects_by_substring() {
        let opts = SelftestOptions {
            filter: Some("metric".into()),
            ..Default::default()
        };
        let outcomes = run_selftest(&opts);
        let names: Vec<_> = outcomes.iter().map(|o| o.name).collect();
        assert_eq!(names, vec!["metric-psnr", "metric-ssim"]);
    }

    #[test]
    fn break_fold_makes_conv_check_fail() {
        let opts = SelftestOptions {
            filter: Some("conv-equivalence".into()),
            break_fold: true,
        };
        let outcomes = run_selftest(&opts);
        assert_eq!(outcomes.len(), 1);
        assert!(!outcomes[0].passed);
        // the rest of the suite is untouched by the fault knob
        let rest = SelftestOptions {
            filter: Some("chunk".into()),
            break_fold: true,
        };
        assert!(run_selftest(&rest).iter().all(|o| o.passed));
    }
}
