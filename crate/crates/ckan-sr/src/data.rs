//! Image I/O and dataset plumbing: binary PPM, Catmull-Rom resampling, the
//! degradation model, patch sampling, synthetic scenes, and manifests.
//!
//! Images are RGB, channel-major f64 planes in [0, 1]. Every random step is
//! driven by an explicit seed so dataset builds are byte-reproducible.

use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a binary PPM: magic {0:?}")]
    BadMagic(String),
    #[error("malformed PPM header: {0}")]
    BadHeader(String),
    #[error("only maxval 255 is supported, got {0}")]
    UnsupportedMaxval(u32),
    #[error("raster truncated: expected {want} bytes, found {got}")]
    Truncated { want: usize, got: usize },
    #[error("bad image dims: {0}")]
    BadDims(String),
    #[error("sample {index} = {value} outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("scale factor must be at least 2, got {0}")]
    BadScale(usize),
    #[error("patch geometry: {0}")]
    BadPatch(String),
    #[error("manifest line {line}: {msg}")]
    BadManifest { line: usize, msg: String },
}

pub type DataResult<T> = Result<T, DataError>;

/// RGB image, channel-major rows (`data[c*h*w + y*w + x]`), values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> DataResult<ImageBuffer> {
        if height == 0 || width == 0 {
            return Err(DataError::BadDims(format!("{height}x{width}")));
        }
        if data.len() != 3 * height * width {
            return Err(DataError::BadDims(format!(
                "expected {} samples for {height}x{width}, got {}",
                3 * height * width,
                data.len()
            )));
        }
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(DataError::OutOfRange { index, value });
            }
        }
        Ok(ImageBuffer {
            height,
            width,
            data,
        })
    }

    /// Builds from raw samples, clamping into [0, 1]. For pipeline stages
    /// (resampling, noise) whose intermediate values may overshoot.
    pub fn from_unclamped(height: usize, width: usize, mut data: Vec<f64>) -> DataResult<ImageBuffer> {
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        ImageBuffer::new(height, width, data)
    }

    pub fn constant(height: usize, width: usize, value: f64) -> ImageBuffer {
        ImageBuffer::new(height, width, vec![value; 3 * height * width]).expect("in range")
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> DataResult<ImageBuffer> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(DataError::BadDims(format!(
                "crop {h}x{w}@({y0},{x0}) from {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                let row = (c * self.height + y0 + y) * self.width + x0;
                out.extend_from_slice(&self.data[row..row + w]);
            }
        }
        ImageBuffer::new(h, w, out)
    }

    /// (1, 3, H, W) tensor view of the image.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 3, self.height, self.width], self.data.clone()).expect("sized")
    }

    /// Clamps a (1, 3, H, W) tensor back into an image.
    pub fn from_tensor(t: &Tensor) -> DataResult<ImageBuffer> {
        match t.shape() {
            [1, 3, h, w] => ImageBuffer::from_unclamped(*h, *w, t.to_vec()),
            s => Err(DataError::BadDims(format!("tensor shape {s:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// binary PPM (P6, maxval 255)

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn token(&mut self) -> DataResult<&'a str> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(DataError::BadHeader("unexpected end of header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| DataError::BadHeader("non-ascii header token".into()))
    }

    fn number(&mut self, what: &str) -> DataResult<u32> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| DataError::BadHeader(format!("bad {what}: {tok:?}")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> DataResult<ImageBuffer> {
    let mut sc = HeaderScanner { bytes, pos: 0 };
    let magic = sc.token()?;
    if magic != "P6" {
        return Err(DataError::BadMagic(magic.into()));
    }
    let w = sc.number("width")? as usize;
    let h = sc.number("height")? as usize;
    let maxval = sc.number("maxval")?;
    if maxval != 255 {
        return Err(DataError::UnsupportedMaxval(maxval));
    }
    // exactly one whitespace byte separates the header from the raster
    if sc.pos >= bytes.len() || !bytes[sc.pos].is_ascii_whitespace() {
        return Err(DataError::BadHeader("missing raster separator".into()));
    }
    sc.pos += 1;
    if h == 0 || w == 0 {
        return Err(DataError::BadDims(format!("{h}x{w}")));
    }
    let want = 3 * h * w;
    let raster = &bytes[sc.pos..];
    if raster.len() < want {
        return Err(DataError::Truncated {
            want,
            got: raster.len(),
        });
    }
    let mut data = vec![0.0; want];
    let hw = h * w;
    for (i, px) in raster[..want].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * hw + i] = px[c] as f64 / 255.0;
        }
    }
    ImageBuffer::new(h, w, data)
}

pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    let hw = img.height * img.width;
    for i in 0..hw {
        for c in 0..3 {
            let v = (img.data[c * hw + i] * 255.0).round().clamp(0.0, 255.0) as u8;
            out.push(v);
        }
    }
    out
}

pub fn load_ppm(path: &Path) -> DataResult<ImageBuffer> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn save_ppm(path: &Path, img: &ImageBuffer) -> DataResult<()> {
    Ok(std::fs::write(path, encode_ppm(img))?)
}

// ---------------------------------------------------------------------------
// resampling and degradation

/// Catmull-Rom kernel (bicubic with a = -0.5). Zero outside |t| < 2 and an
/// exact partition of unity, so constants and linear ramps pass through.
fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * (t * t * t - 5.0 * t * t + 8.0 * t - 4.0)
    } else {
        0.0
    }
}

/// One separable pass along the contiguous axis of `src` laid out as
/// (rows, src_len) -> (rows, dst_len). Edge samples clamp.
fn resample_axis(src: &[f64], rows: usize, src_len: usize, dst_len: usize) -> Vec<f64> {
    let scale = src_len as f64 / dst_len as f64;
    // (clamped tap indices, weights) are shared by every row
    let taps: Vec<([usize; 4], [f64; 4])> = (0..dst_len)
        .map(|d| {
            let center = (d as f64 + 0.5) * scale - 0.5;
            let base = center.floor() as isize - 1;
            let mut idx = [0usize; 4];
            let mut wt = [0.0f64; 4];
            for (k, (i, w)) in idx.iter_mut().zip(wt.iter_mut()).enumerate() {
                let s = base + k as isize;
                *i = s.clamp(0, src_len as isize - 1) as usize;
                *w = cubic_weight(center - s as f64);
            }
            (idx, wt)
        })
        .collect();
    let mut out = vec![0.0; rows * dst_len];
    for r in 0..rows {
        let row = &src[r * src_len..(r + 1) * src_len];
        let dst = &mut out[r * dst_len..(r + 1) * dst_len];
        for (d, (idx, wt)) in taps.iter().enumerate() {
            dst[d] = idx
                .iter()
                .zip(wt)
                .map(|(&i, &w)| w * row[i])
                .sum();
        }
    }
    out
}

fn transpose_plane(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[x * h + y] = src[y * w + x];
        }
    }
    out
}

/// Separable center-aligned bicubic resample to `out_h` x `out_w`.
/// Overshoot is clamped back to [0, 1].
pub fn bicubic_resample(img: &ImageBuffer, out_h: usize, out_w: usize) -> DataResult<ImageBuffer> {
    if out_h == 0 || out_w == 0 {
        return Err(DataError::BadDims(format!("{out_h}x{out_w}")));
    }
    let (h, w) = (img.height, img.width);
    let mut out = Vec::with_capacity(3 * out_h * out_w);
    for c in 0..3 {
        let rows = resample_axis(img.channel(c), h, w, out_w);
        let cols = transpose_plane(&rows, h, out_w);
        let resized = resample_axis(&cols, out_w, h, out_h);
        out.extend(transpose_plane(&resized, out_w, out_h));
    }
    ImageBuffer::from_unclamped(out_h, out_w, out)
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

fn blur_axis(src: &[f64], rows: usize, len: usize, taps: &[f64]) -> Vec<f64> {
    let radius = taps.len() / 2;
    let mut out = vec![0.0; rows * len];
    for r in 0..rows {
        let row = &src[r * len..(r + 1) * len];
        let dst = &mut out[r * len..(r + 1) * len];
        for (x, d) in dst.iter_mut().enumerate() {
            *d = taps
                .iter()
                .enumerate()
                .map(|(k, &t)| {
                    let s = (x + k) as isize - radius as isize;
                    t * row[s.clamp(0, len as isize - 1) as usize]
                })
                .sum();
        }
    }
    out
}

/// Separable edge-clamped Gaussian blur.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> DataResult<ImageBuffer> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(DataError::BadDims(format!("blur sigma {sigma}")));
    }
    let taps = gaussian_taps(sigma);
    let (h, w) = (img.height, img.width);
    let mut out = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let rows = blur_axis(img.channel(c), h, w, &taps);
        let cols = transpose_plane(&rows, h, w);
        let blurred = blur_axis(&cols, w, h, &taps);
        out.extend(transpose_plane(&blurred, w, h));
    }
    ImageBuffer::from_unclamped(h, w, out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradeConfig {
    pub scale: usize,
    pub blur_sigma: Option<f64>,
    pub noise_std: Option<f64>,
    pub seed: u64,
}

impl DegradeConfig {
    pub fn clean(scale: usize) -> DegradeConfig {
        DegradeConfig {
            scale,
            blur_sigma: None,
            noise_std: None,
            seed: 0,
        }
    }
}

/// HR -> LR: optional blur, bicubic downscale by `scale`, optional seeded
/// Gaussian noise, clamp. The HR image is first cropped so both extents
/// divide evenly by the scale.
pub fn degrade(hr: &ImageBuffer, cfg: &DegradeConfig) -> DataResult<ImageBuffer> {
    let s = cfg.scale;
    if s < 2 {
        return Err(DataError::BadScale(s));
    }
    if hr.height < s || hr.width < s {
        return Err(DataError::BadDims(format!(
            "{}x{} is smaller than one {s}x{s} cell",
            hr.height, hr.width
        )));
    }
    let (ch, cw) = (hr.height - hr.height % s, hr.width - hr.width % s);
    let cropped;
    let mut img = if (ch, cw) == (hr.height, hr.width) {
        hr
    } else {
        cropped = hr.crop(0, 0, ch, cw)?;
        &cropped
    };
    let blurred;
    if let Some(sigma) = cfg.blur_sigma {
        blurred = gaussian_blur(img, sigma)?;
        img = &blurred;
    }
    let mut lr = bicubic_resample(img, ch / s, cw / s)?;
    if let Some(std) = cfg.noise_std {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(DataError::BadDims(format!("noise std {std}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let noisy: Vec<f64> = lr
            .data
            .iter()
            .map(|v| v + std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        lr = ImageBuffer::from_unclamped(lr.height, lr.width, noisy)?;
    }
    Ok(lr)
}

// ---------------------------------------------------------------------------
// patch sampling

#[derive(Debug, Clone)]
pub struct PatchPair {
    pub hr: ImageBuffer,
    pub lr: ImageBuffer,
    pub y0: usize,
    pub x0: usize,
}

/// Samples aligned patch pairs: seeded top-left corners on multiples of the
/// scale, HR crop, then the LR side is the degradation of exactly that crop.
/// Each patch draws its own noise sub-seed from `rng`, so a fixed stream
/// reproduces the same pairs bit for bit.
pub fn extract_patch_pairs(
    hr: &ImageBuffer,
    cfg: &DegradeConfig,
    patch: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> DataResult<Vec<PatchPair>> {
    let scale = cfg.scale;
    if scale < 2 {
        return Err(DataError::BadScale(scale));
    }
    if patch % scale != 0 || patch == 0 {
        return Err(DataError::BadPatch(format!(
            "patch {patch} not a positive multiple of scale {scale}"
        )));
    }
    if hr.height < patch || hr.width < patch {
        return Err(DataError::BadPatch(format!(
            "patch {patch} exceeds image {}x{}",
            hr.height, hr.width
        )));
    }
    let (ymax, xmax) = ((hr.height - patch) / scale, (hr.width - patch) / scale);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let y0 = scale * rng.random_range(0..=ymax);
        let x0 = scale * rng.random_range(0..=xmax);
        let sub = DegradeConfig {
            seed: rng.random::<u64>(),
            ..*cfg
        };
        let hr_patch = hr.crop(y0, x0, patch, patch)?;
        let lr_patch = degrade(&hr_patch, &sub)?;
        pairs.push(PatchPair {
            hr: hr_patch,
            lr: lr_patch,
            y0,
            x0,
        });
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// synthetic scenes

/// Mean absolute discrete Laplacian of the luminance interior; a texture
/// floor that rejects near-flat images.
pub fn mean_abs_laplacian(img: &ImageBuffer) -> f64 {
    let (h, w) = (img.height, img.width);
    if h < 3 || w < 3 {
        return 0.0;
    }
    let lum: Vec<f64> = (0..h * w)
        .map(|i| {
            0.299 * img.channel(0)[i] + 0.587 * img.channel(1)[i] + 0.114 * img.channel(2)[i]
        })
        .collect();
    let mut acc = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = lum[y * w + x];
            let around = lum[(y - 1) * w + x] + lum[(y + 1) * w + x] + lum[y * w + x - 1]
                + lum[y * w + x + 1];
            acc += (4.0 * c - around).abs();
        }
    }
    acc / ((h - 2) * (w - 2)) as f64
}

const TEXTURE_FLOOR: f64 = 0.01;

fn sinusoid_scene(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let cycles: f64 = rng.random_range(3.0..8.0);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let omega = std::f64::consts::TAU * cycles / w.max(h) as f64;
    let (dx, dy) = (theta.cos(), theta.sin());
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let shift = c as f64 * rng.random_range(0.2..0.6);
        for y in 0..h {
            for x in 0..w {
                let t = omega * (x as f64 * dx + y as f64 * dy) + phase + shift;
                data.push(0.5 + 0.45 * t.sin());
            }
        }
    }
    ImageBuffer::new(h, w, data).expect("in range")
}

fn checkerboard_scene(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let cell = rng.random_range(3..=9usize);
    let mut colors = [[0.0f64; 3]; 2];
    loop {
        for col in &mut colors {
            for ch in col.iter_mut() {
                *ch = rng.random_range(0.05..0.95);
            }
        }
        let lum = |c: &[f64; 3]| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        if (lum(&colors[0]) - lum(&colors[1])).abs() >= 0.4 {
            break;
        }
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let parity = (y / cell + x / cell) % 2;
                data.push(colors[parity][c]);
            }
        }
    }
    ImageBuffer::new(h, w, data).expect("in range")
}

fn filtered_noise_scene(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let taps = gaussian_taps(1.0);
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        let plane: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let rows = blur_axis(&plane, h, w, &taps);
        let cols = transpose_plane(&rows, h, w);
        let smooth = transpose_plane(&blur_axis(&cols, w, h, &taps), w, h);
        let (lo, hi) = smooth
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| {
                (l.min(v), u.max(v))
            });
        let span = (hi - lo).max(1e-9);
        data.extend(smooth.iter().map(|v| 0.1 + 0.8 * (v - lo) / span));
    }
    ImageBuffer::from_unclamped(h, w, data).expect("in range")
}

fn texture_scene(h: usize, w: usize, kind: u32, rng: &mut ChaCha8Rng) -> ImageBuffer {
    match kind % 3 {
        0 => sinusoid_scene(h, w, rng),
        1 => checkerboard_scene(h, w, rng),
        _ => filtered_noise_scene(h, w, rng),
    }
}

/// Paints `texture` over `base` inside one randomly placed rectangle or
/// ellipse, leaving a hard region boundary.
fn overlay_region(base: &mut ImageBuffer, texture: &ImageBuffer, rng: &mut ChaCha8Rng) {
    let (h, w) = (base.height, base.width);
    let rh = rng.random_range(h / 5..=h / 2).max(2).min(h);
    let rw = rng.random_range(w / 5..=w / 2).max(2).min(w);
    let y0 = rng.random_range(0..=h - rh);
    let x0 = rng.random_range(0..=w - rw);
    let elliptic = rng.random_range(0..2u32) == 1;
    let (cy, cx) = (y0 as f64 + rh as f64 / 2.0, x0 as f64 + rw as f64 / 2.0);
    let (ry, rx) = (rh as f64 / 2.0, rw as f64 / 2.0);
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            if elliptic {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                if dy * dy + dx * dx > 1.0 {
                    continue;
                }
            }
            for c in 0..3 {
                base.data[(c * h + y) * w + x] = texture.get(c, y, x);
            }
        }
    }
}

/// Deterministic synthetic scene for a dataset slot. Each scene is a
/// composite: a full-frame base texture with several hard-edged rectangular
/// or elliptic regions painted over it, where base and regions each carry an
/// oriented sinusoid, a checkerboard, or low-pass noise. The region
/// boundaries give every image sharp, learnable structure in addition to the
/// textures themselves; any draw below the texture floor is redrawn from a
/// bumped stream.
pub fn synthetic_image(index: u64, h: usize, w: usize, seed: u64) -> ImageBuffer {
    for attempt in 0..16u64 {
        let stream = seed
            ^ (index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
            ^ (attempt.wrapping_mul(0xD1B5_4A32_D192_ED03));
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        // Base kind rotates with the slot so the corpus stays balanced; the
        // overlays cycle through the remaining kinds before going random.
        let base_kind = (index % 3) as u32;
        let mut img = texture_scene(h, w, base_kind, &mut rng);
        let regions = rng.random_range(3..=6u32);
        for r in 0..regions {
            let kind = if r < 2 {
                base_kind + 1 + r
            } else {
                rng.random_range(0..3u32)
            };
            let texture = texture_scene(h, w, kind, &mut rng);
            overlay_region(&mut img, &texture, &mut rng);
        }
        if mean_abs_laplacian(&img) > TEXTURE_FLOOR {
            return img;
        }
    }
    // 16 misses in a row would mean the generators are broken
    unreachable!("texture floor unreachable after redraws");
}

// ---------------------------------------------------------------------------
// manifests

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub hr: PathBuf,
    pub lr: Option<PathBuf>,
}

/// One entry per line: `hr_path` or `hr_path<TAB>lr_path`. `#` starts a
/// comment; blank lines are skipped. Paths are taken verbatim.
pub fn parse_manifest(text: &str) -> DataResult<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let hr = parts.next().unwrap_or_default().trim();
        if hr.is_empty() {
            return Err(DataError::BadManifest {
                line: i + 1,
                msg: "empty hr path".into(),
            });
        }
        let lr = match parts.next() {
            Some(p) if !p.trim().is_empty() => Some(PathBuf::from(p.trim())),
            Some(_) => {
                return Err(DataError::BadManifest {
                    line: i + 1,
                    msg: "empty lr path after tab".into(),
                })
            }
            None => None,
        };
        if parts.next().is_some() {
            return Err(DataError::BadManifest {
                line: i + 1,
                msg: "more than two fields".into(),
            });
        }
        entries.push(ManifestEntry {
            hr: PathBuf::from(hr),
            lr,
        });
    }
    Ok(entries)
}

pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::from("# hr_path[<TAB>lr_path]\n");
    for e in entries {
        match &e.lr {
            Some(lr) => {
                let _ = writeln!(out, "{}\t{}", e.hr.display(), lr.display());
            }
            None => {
                let _ = writeln!(out, "{}", e.hr.display());
            }
        }
    }
    out
}

pub fn load_manifest(path: &Path) -> DataResult<Vec<ManifestEntry>> {
    parse_manifest(&std::fs::read_to_string(path)?)
}
