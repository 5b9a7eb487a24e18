//! Measured-versus-modeled cost sweeps for the operator.
//!
//! Each row runs one banded forward pass under `no_grad` with the counter
//! registry locked, then compares the measured unfold volume, projection
//! MACs, and peak patch-buffer occupancy against the closed-form model.
//! Across the chunk sweep the peak must scale linearly in the band size,
//! which the report quantifies with a least-squares fit.

use crate::ckan::{ckan_forward_chunked, cost_model, output_dims, CkanConfig, ConvGeometry};
use crate::counters;
use crate::tensor::{no_grad, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
    /// Band sizes to sweep; clamped to L per the operator contract.
    pub chunks: Vec<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch: 1,
            c_in: 3,
            c_out: 8,
            kernel: 3,
            height: 32,
            width: 32,
            chunks: vec![1, 4, 16, 64, 256, 1024],
            seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub chunk: usize,
    /// min(chunk, L): the effective band the model predicts from.
    pub band: usize,
    pub peak_measured: u64,
    pub peak_model: u64,
    pub unfold_measured: u64,
    pub unfold_model: u64,
    pub macs_measured: u64,
    pub macs_model: u64,
    pub wall_ms: f64,
}

impl BenchRow {
    pub fn exact(&self) -> bool {
        self.peak_measured == self.peak_model
            && self.unfold_measured == self.unfold_model
            && self.macs_measured == self.macs_model
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Least-squares fit of measured peak against the effective band size.
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub l: usize,
    pub k: usize,
}

/// Ordinary least squares y = slope * x + intercept, plus R^2.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return (0.0, my, if syy == 0.0 { 1.0 } else { 0.0 });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}

pub fn run_bench(cfg: &BenchConfig) -> crate::ckan::CkanResult<BenchReport> {
    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
    let g = ConvGeometry::square(cfg.c_in, cfg.c_out, cfg.kernel, 1, cfg.kernel / 2);
    let k = g.patch_len();
    let (_, _, l, _) = output_dims(cfg.height, cfg.width, &g)?;
    let n = cfg.batch * cfg.c_in * cfg.height * cfg.width;
    let x = Tensor::new(
        &[cfg.batch, cfg.c_in, cfg.height, cfg.width],
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .expect("sized");
    let w = Tensor::new(
        &[cfg.c_out, k],
        (0..cfg.c_out * k).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .expect("sized");

    let mut rows = Vec::with_capacity(cfg.chunks.len());
    for &chunk in &cfg.chunks {
        let op = CkanConfig::linear(g, chunk.max(1), w.clone(), None)?;
        let model = cost_model(&op, cfg.batch, cfg.height, cfg.width)?;
        let guard = counters::lock();
        counters::reset();
        let t0 = Instant::now();
        no_grad(|| ckan_forward_chunked(&x, &op))?;
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        let peak = counters::get(counters::PATCH_PEAK);
        let unfold = counters::get(counters::UNFOLD_ELEMS);
        let macs = counters::get(counters::PROJ_LINEAR_MACS);
        drop(guard);
        rows.push(BenchRow {
            chunk,
            band: chunk.min(l).max(1),
            peak_measured: peak,
            peak_model: model.peak_patch_elems,
            unfold_measured: unfold,
            unfold_model: model.unfold_elems,
            macs_measured: macs,
            macs_model: model.proj_macs,
            wall_ms,
        });
    }
    // distinct effective bands only, so clamped duplicates don't skew the fit
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for row in &rows {
        let x = row.band as f64;
        if pts.iter().all(|(px, _)| *px != x) {
            pts.push((x, row.peak_measured as f64));
        }
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let (slope, intercept, r2) = linear_fit(&xs, &ys);
    Ok(BenchReport {
        rows,
        slope,
        intercept,
        r2,
        l,
        k,
    })
}

/// Markdown table of a report, used by the CLI bench command.
pub fn report_table(rep: &BenchReport) -> String {
    let mut out = String::new();
    out.push_str("| chunk | band | peak | model | unfold | macs | exact | ms |\n");
    out.push_str("|---:|---:|---:|---:|---:|---:|:---:|---:|\n");
    for r in &rep.rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {:.2} |\n",
            r.chunk,
            r.band,
            r.peak_measured,
            r.peak_model,
            r.unfold_measured,
            r.macs_measured,
            if r.exact() { "yes" } else { "NO" },
            r.wall_ms,
        ));
    }
    out.push_str(&format!(
        "\npeak = {:.3} * band + {:.3}, R^2 = {:.6} (L = {}, K = {})\n",
        rep.slope, rep.intercept, rep.r2, rep.l, rep.k
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_exact_line() {
        let xs = [1.0, 2.0, 5.0, 9.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.5 * x + 2.0).collect();
        let (m, b, r2) = linear_fit(&xs, &ys);
        assert!((m - 3.5).abs() < 1e-12);
        assert!((b - 2.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_matches_model_exactly_and_scales_linearly() {
        let rep = run_bench(&BenchConfig::default()).unwrap();
        for row in &rep.rows {
            assert!(row.exact(), "row {:?}", row);
        }
        assert!(rep.r2 > 0.999, "R^2 = {}", rep.r2);
        // slope is B * K elements per band pixel
        assert!((rep.slope - rep.k as f64).abs() / (rep.k as f64) < 1e-6);
    }

    #[test]
    fn table_lists_every_row() {
        let rep = run_bench(&BenchConfig {
            chunks: vec![2, 8],
            height: 12,
            width: 12,
            ..BenchConfig::default()
        })
        .unwrap();
        let table = report_table(&rep);
        assert_eq!(table.lines().filter(|l| l.starts_with("| ")).count(), 3);
        assert!(table.contains("R^2"));
    }
}
