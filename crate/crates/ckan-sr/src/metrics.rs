//! Image quality metrics on the luminance plane, plus the evaluation report.
//!
//! PSNR uses MAX = 1 and reports infinity for identical inputs. SSIM follows
//! the 11x11 Gaussian (sigma 1.5) valid-window convention with C1 = 0.01^2
//! and C2 = 0.03^2. MS-SSIM uses the standard five scale weights, dropping
//! scales the image cannot support and renormalizing the rest.

use crate::data::ImageBuffer;
use crate::objectives::{perceptual_loss, ObjectiveError, PerceptualExtractor};
use crate::tensor::no_grad;
use std::fmt::Write as _;
use thiserror::Error;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("image shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("signal lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("max_val must be positive and finite, got {0}")]
    BadMaxVal(f64),
    #[error("image {h}x{w} is smaller than the {min}x{min} analysis window")]
    TooSmall { h: usize, w: usize, min: usize },
    #[error("bad metrics csv: {0}")]
    BadCsv(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

pub type MetricResult<T> = Result<T, MetricError>;

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> MetricResult<()> {
    if a.height != b.height || a.width != b.width {
        return Err(MetricError::ShapeMismatch(
            a.height, a.width, b.height, b.width,
        ));
    }
    Ok(())
}

/// BT.601 luminance plane.
pub fn to_luminance(img: &ImageBuffer) -> Vec<f64> {
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    (0..r.len())
        .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
        .collect()
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

/// PSNR value plus the identical-input sentinel flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    pub identical: bool,
}

/// 10 log10(max^2 / mse); zero error maps to the infinity sentinel.
pub fn psnr_from_mse(mse: f64, max_val: f64) -> MetricResult<Psnr> {
    if !(max_val > 0.0) || !max_val.is_finite() {
        return Err(MetricError::BadMaxVal(max_val));
    }
    if mse == 0.0 {
        return Ok(Psnr {
            db: f64::INFINITY,
            identical: true,
        });
    }
    Ok(Psnr {
        db: 10.0 * (max_val * max_val / mse).log10(),
        identical: false,
    })
}

pub fn psnr(a: &[f64], b: &[f64], max_val: f64) -> MetricResult<Psnr> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    psnr_from_mse(mse(a, b), max_val)
}

pub fn psnr_y(a: &ImageBuffer, b: &ImageBuffer) -> MetricResult<f64> {
    check_dims(a, b)?;
    Ok(psnr(&to_luminance(a), &to_luminance(b), 1.0)?.db)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid-region filter with the SSIM window; output is
/// (h - 10) x (w - 10).
fn filter_valid(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let win = gaussian_window();
    let ow = w - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = win
                .iter()
                .enumerate()
                .map(|(k, &t)| t * plane[y * w + x + k])
                .sum();
        }
    }
    let oh = h - SSIM_WINDOW + 1;
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = win
                .iter()
                .enumerate()
                .map(|(k, &t)| t * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM and mean contrast-structure term over the valid map.
fn ssim_stats(a: &[f64], b: &[f64], h: usize, w: usize) -> MetricResult<(f64, f64)> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmall {
            h,
            w,
            min: SSIM_WINDOW,
        });
    }
    let mu_a = filter_valid(a, h, w);
    let mu_b = filter_valid(b, h, w);
    let aa = filter_valid(&a.iter().map(|v| v * v).collect::<Vec<_>>(), h, w);
    let bb = filter_valid(&b.iter().map(|v| v * v).collect::<Vec<_>>(), h, w);
    let ab = filter_valid(
        &a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>(),
        h,
        w,
    );
    let mut ssim_acc = 0.0;
    let mut cs_acc = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let l = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
        let cs = (2.0 * cov + SSIM_C2) / (va + vb + SSIM_C2);
        ssim_acc += l * cs;
        cs_acc += cs;
    }
    let n = mu_a.len() as f64;
    Ok((ssim_acc / n, cs_acc / n))
}

fn ssim_planes(a: &[f64], b: &[f64], h: usize, w: usize) -> MetricResult<f64> {
    Ok(ssim_stats(a, b, h, w)?.0)
}

pub fn ssim_y(a: &ImageBuffer, b: &ImageBuffer) -> MetricResult<f64> {
    check_dims(a, b)?;
    ssim_planes(&to_luminance(a), &to_luminance(b), a.height, a.width)
}

/// 2x2 average pool, cropping odd edges.
fn downsample_2x(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = 0.25
                * (plane[2 * y * w + 2 * x]
                    + plane[2 * y * w + 2 * x + 1]
                    + plane[(2 * y + 1) * w + 2 * x]
                    + plane[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (out, oh, ow)
}

/// Multi-scale SSIM on luminance planes. Scales whose pooled size falls
/// under the window are dropped and the remaining weights renormalized; the
/// finest scales contribute contrast-structure only, the coarsest kept scale
/// contributes full SSIM.
pub fn ms_ssim_planes(a: &[f64], b: &[f64], h: usize, w: usize) -> MetricResult<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmall {
            h,
            w,
            min: SSIM_WINDOW,
        });
    }
    let mut cur_a = a.to_vec();
    let mut cur_b = b.to_vec();
    let (mut ch, mut cw) = (h, w);
    let mut cs_means = Vec::new();
    let mut last_ssim = 0.0;
    for scale in 0..MS_SSIM_WEIGHTS.len() {
        let (ssim_m, cs_m) = ssim_stats(&cur_a, &cur_b, ch, cw)?;
        last_ssim = ssim_m;
        cs_means.push(cs_m);
        let last_scale = scale + 1 == MS_SSIM_WEIGHTS.len()
            || ch / 2 < SSIM_WINDOW
            || cw / 2 < SSIM_WINDOW;
        if last_scale {
            break;
        }
        let (na, nh, nw) = downsample_2x(&cur_a, ch, cw);
        let (nb, _, _) = downsample_2x(&cur_b, ch, cw);
        (cur_a, cur_b, ch, cw) = (na, nb, nh, nw);
    }
    let kept = cs_means.len();
    let wsum: f64 = MS_SSIM_WEIGHTS[..kept].iter().sum();
    let mut value = 1.0;
    for (j, &cs) in cs_means.iter().enumerate() {
        let wgt = MS_SSIM_WEIGHTS[j] / wsum;
        let term = if j + 1 == kept { last_ssim } else { cs };
        // negative structure terms are clamped before the power
        value *= term.max(0.0).powf(wgt);
    }
    Ok(value)
}

pub fn ms_ssim_y(a: &ImageBuffer, b: &ImageBuffer) -> MetricResult<f64> {
    check_dims(a, b)?;
    ms_ssim_planes(&to_luminance(a), &to_luminance(b), a.height, a.width)
}

/// Frozen-pyramid feature distance (lower is better).
pub fn perceptual_distance(
    extractor: &PerceptualExtractor,
    a: &ImageBuffer,
    b: &ImageBuffer,
) -> MetricResult<f64> {
    check_dims(a, b)?;
    let d = no_grad(|| perceptual_loss(extractor, &a.to_tensor(), &b.to_tensor()))?;
    Ok(d.item())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub msssim_y: f64,
    pub perc_dist: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
}

pub fn evaluate_pair(
    extractor: &PerceptualExtractor,
    name: &str,
    sr: &ImageBuffer,
    hr: &ImageBuffer,
) -> MetricResult<MetricRow> {
    Ok(MetricRow {
        name: name.to_string(),
        psnr_y: psnr_y(sr, hr)?,
        ssim_y: ssim_y(sr, hr)?,
        msssim_y: ms_ssim_y(sr, hr)?,
        perc_dist: perceptual_distance(extractor, sr, hr)?,
    })
}

/// Per-image rows plus an arithmetic MEAN row (infinities propagate).
pub fn evaluate_set(
    extractor: &PerceptualExtractor,
    pairs: &[(String, ImageBuffer, ImageBuffer)],
) -> MetricResult<MetricReport> {
    let mut rows = Vec::with_capacity(pairs.len());
    for (name, sr, hr) in pairs {
        rows.push(evaluate_pair(extractor, name, sr, hr)?);
    }
    if rows.is_empty() {
        return Err(MetricError::BadCsv("no rows to evaluate".into()));
    }
    let n = rows.len() as f64;
    let mean = MetricRow {
        name: "MEAN".into(),
        psnr_y: rows.iter().map(|r| r.psnr_y).sum::<f64>() / n,
        ssim_y: rows.iter().map(|r| r.ssim_y).sum::<f64>() / n,
        msssim_y: rows.iter().map(|r| r.msssim_y).sum::<f64>() / n,
        perc_dist: rows.iter().map(|r| r.perc_dist).sum::<f64>() / n,
    };
    Ok(MetricReport { rows, mean })
}

pub const CSV_HEADER: &str = "image,psnr_y,ssim_y,msssim_y,perc_dist";

fn fmt_metric(v: f64) -> String {
    // Display round-trips f64 exactly and prints infinity as "inf"
    format!("{v}")
}

pub fn report_to_csv(report: &MetricReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{CSV_HEADER}");
    for row in report.rows.iter().chain(std::iter::once(&report.mean)) {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.name,
            fmt_metric(row.psnr_y),
            fmt_metric(row.ssim_y),
            fmt_metric(row.msssim_y),
            fmt_metric(row.perc_dist)
        );
    }
    out
}

fn parse_row(line: &str, lineno: usize) -> MetricResult<MetricRow> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 5 {
        return Err(MetricError::BadCsv(format!(
            "line {lineno}: expected 5 fields, got {}",
            fields.len()
        )));
    }
    let num = |s: &str| -> MetricResult<f64> {
        s.parse()
            .map_err(|_| MetricError::BadCsv(format!("line {lineno}: bad number {s:?}")))
    };
    Ok(MetricRow {
        name: fields[0].to_string(),
        psnr_y: num(fields[1])?,
        ssim_y: num(fields[2])?,
        msssim_y: num(fields[3])?,
        perc_dist: num(fields[4])?,
    })
}

pub fn report_from_csv(text: &str) -> MetricResult<MetricReport> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        other => {
            return Err(MetricError::BadCsv(format!(
                "bad header: {:?}",
                other.map(|(_, h)| h)
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(parse_row(line, i + 1)?);
    }
    let mean = rows.pop().ok_or_else(|| MetricError::BadCsv("no rows".into()))?;
    if mean.name != "MEAN" {
        return Err(MetricError::BadCsv(format!(
            "last row must be MEAN, got {:?}",
            mean.name
        )));
    }
    if rows.is_empty() {
        return Err(MetricError::BadCsv("no per-image rows".into()));
    }
    Ok(MetricReport { rows, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gaussian_blur, synthetic_image};

    fn lum_pair(seed: u64, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let a = synthetic_image(seed, h, w, 40 + seed);
        let b = gaussian_blur(&a, 1.0).unwrap();
        (to_luminance(&a), to_luminance(&b))
    }

    #[test]
    fn luminance_weights_are_bt601() {
        let img = ImageBuffer::new(1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(to_luminance(&img), vec![0.299]);
        let img = ImageBuffer::new(1, 1, vec![0.2, 0.4, 0.6]).unwrap();
        let want = 0.299 * 0.2 + 0.587 * 0.4 + 0.114 * 0.6;
        assert!((to_luminance(&img)[0] - want).abs() < 1e-15);
    }

    #[test]
    fn psnr_hits_twenty_db_exactly_at_mse_hundredth() {
        let p = psnr_from_mse(0.01, 1.0).unwrap();
        assert_eq!(p.db, 20.0);
        assert!(!p.identical);

        let a = vec![0.25; 64];
        let same = psnr(&a, &a, 1.0).unwrap();
        assert_eq!(same.db, f64::INFINITY);
        assert!(same.identical);

        assert!(psnr_from_mse(0.01, 0.0).is_err());
        assert!(psnr(&a, &a[..5], 1.0).is_err());
    }

    #[test]
    fn psnr_matches_scalar_reference() {
        let a = [0.1, 0.5, 0.9, 0.3];
        let b = [0.2, 0.4, 0.95, 0.3];
        let diff2: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 4.0;
        let want = -10.0 * diff2.log10();
        assert!((psnr(&a, &b, 1.0).unwrap().db - want).abs() < 1e-9);
        // max_val enters as 20 log10(max)
        let scaled = psnr(&a, &b, 2.0).unwrap().db;
        assert!((scaled - (want + 20.0 * 2.0f64.log10())).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_monotonically_with_noise_amplitude() {
        let base = vec![0.5; 256];
        let mut prev = f64::INFINITY;
        for k in 1..6 {
            let amp = k as f64 * 0.02;
            let noisy: Vec<f64> = base
                .iter()
                .enumerate()
                .map(|(i, v)| v + amp * if i % 2 == 0 { 1.0 } else { -1.0 })
                .collect();
            let db = psnr(&base, &noisy, 1.0).unwrap().db;
            assert!(db < prev, "amp {amp}: {db} !< {prev}");
            prev = db;
        }
    }

    // independent 2-D windowed implementation used as the oracle
    fn naive_ssim_stats(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
        let win1 = gaussian_window();
        let mut win = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
        for y in 0..SSIM_WINDOW {
            for x in 0..SSIM_WINDOW {
                win[y][x] = win1[y] * win1[x];
            }
        }
        let (mut ssim_acc, mut cs_acc, mut n) = (0.0, 0.0, 0.0);
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wv = win[dy][dx];
                        let av = a[(y0 + dy) * w + x0 + dx];
                        let bv = b[(y0 + dy) * w + x0 + dx];
                        ma += wv * av;
                        mb += wv * bv;
                        maa += wv * av * av;
                        mbb += wv * bv * bv;
                        mab += wv * av * bv;
                    }
                }
                let (va, vb, cov) = (maa - ma * ma, mbb - mb * mb, mab - ma * mb);
                let l = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
                let cs = (2.0 * cov + SSIM_C2) / (va + vb + SSIM_C2);
                ssim_acc += l * cs;
                cs_acc += cs;
                n += 1.0;
            }
        }
        (ssim_acc / n, cs_acc / n)
    }

    #[test]
    fn ssim_matches_naive_two_dimensional_oracle() {
        let (a, b) = lum_pair(0, 20, 17);
        let got = ssim_planes(&a, &b, 20, 17).unwrap();
        let (want, _) = naive_ssim_stats(&a, &b, 20, 17);
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let (a, _) = lum_pair(1, 16, 16);
        let s = ssim_planes(&a, &a, 16, 16).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric() {
        let (a, b) = lum_pair(3, 16, 19);
        let ab = ssim_planes(&a, &b, 16, 19).unwrap();
        let ba = ssim_planes(&b, &a, 16, 19).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn constant_offset_pair_matches_scalar_reference() {
        let a = vec![0.25; 12 * 12];
        let b = vec![0.75; 12 * 12];
        let got = ssim_planes(&a, &b, 12, 12).unwrap();
        // zero variance everywhere: cs = 1, l constant over the map
        let want = (2.0 * 0.25 * 0.75 + SSIM_C1) / (0.25 * 0.25 + 0.75 * 0.75 + SSIM_C1);
        assert!(got < 1.0);
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        let (naive, _) = naive_ssim_stats(&a, &b, 12, 12);
        assert!((got - naive).abs() < 1e-8);
    }

    #[test]
    fn ms_ssim_degenerates_to_ssim_at_one_scale() {
        // 16px pools to 8 which is under the window, so one scale is kept
        let (a, b) = lum_pair(4, 16, 16);
        let ms = ms_ssim_planes(&a, &b, 16, 16).unwrap();
        let single = ssim_planes(&a, &b, 16, 16).unwrap();
        assert!((ms - single).abs() < 1e-15);
    }

    #[test]
    fn ssim_degrades_with_stronger_blur() {
        let img = synthetic_image(0, 32, 32, 50);
        let mild = gaussian_blur(&img, 0.6).unwrap();
        let strong = gaussian_blur(&img, 2.0).unwrap();
        let s_mild = ssim_y(&img, &mild).unwrap();
        let s_strong = ssim_y(&img, &strong).unwrap();
        assert!(s_mild < 1.0);
        assert!(s_strong < s_mild);
        let m_mild = ms_ssim_y(&img, &mild).unwrap();
        let m_strong = ms_ssim_y(&img, &strong).unwrap();
        assert!(m_strong < m_mild && m_mild < 1.0);
        let p_mild = psnr_y(&img, &mild).unwrap();
        let p_strong = psnr_y(&img, &strong).unwrap();
        assert!(p_strong < p_mild);
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let a = vec![0.5; 100];
        assert!(matches!(
            ssim_planes(&a, &a, 10, 10),
            Err(MetricError::TooSmall { min: 11, .. })
        ));
    }

    #[test]
    fn ms_ssim_matches_naive_composition() {
        let (a, b) = lum_pair(2, 48, 48);
        let got = ms_ssim_planes(&a, &b, 48, 48).unwrap();

        // 48 -> 24 -> 12 -> (6 too small): three scales kept
        let (mut ca, mut cb, mut ch, mut cw) = (a.clone(), b.clone(), 48usize, 48usize);
        let mut cs = Vec::new();
        let mut last = 0.0;
        for _ in 0..3 {
            let (s, c) = naive_ssim_stats(&ca, &cb, ch, cw);
            last = s;
            cs.push(c);
            if ch / 2 >= 11 && cw / 2 >= 11 {
                let (na, nh, nw) = downsample_2x(&ca, ch, cw);
                let (nb, _, _) = downsample_2x(&cb, ch, cw);
                (ca, cb, ch, cw) = (na, nb, nh, nw);
            }
        }
        let wsum: f64 = MS_SSIM_WEIGHTS[..3].iter().sum();
        let mut want = 1.0;
        for (j, c) in cs.iter().enumerate() {
            let term = if j == 2 { last } else { *c };
            want *= term.max(0.0).powf(MS_SSIM_WEIGHTS[j] / wsum);
        }
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        assert!(got > 0.0 && got < 1.0);

        let one = ms_ssim_planes(&a, &a, 48, 48).unwrap();
        assert!((one - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perceptual_distance_is_zero_iff_identical_inputs() {
        let ex = PerceptualExtractor::new(11);
        let a = synthetic_image(3, 16, 16, 60);
        let b = synthetic_image(4, 16, 16, 61);
        assert_eq!(perceptual_distance(&ex, &a, &a).unwrap(), 0.0);
        let ab = perceptual_distance(&ex, &a, &b).unwrap();
        assert!(ab > 0.0);
        // squared feature gaps make the distance symmetric
        let ba = perceptual_distance(&ex, &b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn report_csv_round_trips_including_infinities() {
        let rows = vec![
            MetricRow {
                name: "a.ppm".into(),
                psnr_y: f64::INFINITY,
                ssim_y: 1.0,
                msssim_y: 1.0,
                perc_dist: 0.0,
            },
            MetricRow {
                name: "b.ppm".into(),
                psnr_y: 27.123456789,
                ssim_y: 0.91234,
                msssim_y: 0.95,
                perc_dist: 0.0123,
            },
        ];
        let mean = MetricRow {
            name: "MEAN".into(),
            psnr_y: f64::INFINITY,
            ssim_y: 0.95617,
            msssim_y: 0.975,
            perc_dist: 0.00615,
        };
        let report = MetricReport { rows, mean };
        let csv = report_to_csv(&report);
        assert!(csv.starts_with("image,psnr_y,ssim_y,msssim_y,perc_dist\n"));
        assert!(csv.contains("a.ppm,inf,1,1,0\n"));
        let back = report_from_csv(&csv).unwrap();
        assert_eq!(report, back);

        assert!(report_from_csv("bogus\n").is_err());
        assert!(report_from_csv(CSV_HEADER).is_err());
        let no_mean = format!("{CSV_HEADER}\nx,1,1,1,1\n");
        assert!(report_from_csv(&no_mean).is_err());
    }

    #[test]
    fn evaluate_set_builds_mean_row() {
        let ex = PerceptualExtractor::new(12);
        let hr = synthetic_image(0, 16, 16, 70);
        let sr1 = gaussian_blur(&hr, 0.7).unwrap();
        let pairs = vec![
            ("one".to_string(), sr1, hr.clone()),
            ("two".to_string(), hr.clone(), hr.clone()),
        ];
        let report = evaluate_set(&ex, &pairs).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.mean.name, "MEAN");
        assert_eq!(report.mean.psnr_y, f64::INFINITY);
        let want = (report.rows[0].ssim_y + report.rows[1].ssim_y) / 2.0;
        assert!((report.mean.ssim_y - want).abs() < 1e-15);
    }
}
