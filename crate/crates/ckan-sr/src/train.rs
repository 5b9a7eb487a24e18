//! Two-stage training: content pretraining, then adversarial fine-tuning
//! with perception-guarded early stopping.
//!
//! Determinism contract: (seed, config, dataset) fixes every logged number.
//! Epoch streams are derived from the seed and a global epoch counter, not
//! from live RNG state, so a run split by a checkpoint continues bit-exactly
//! and an adversarial run with zero adversarial weight walks the generator
//! along the pretraining trajectory.

use crate::data::{degrade, extract_patch_pairs, DataError, DegradeConfig, ImageBuffer};
use crate::metrics::{ms_ssim_y, perceptual_distance, psnr_y, MetricError};
use crate::models::{Discriminator, Generator, GeneratorConfig, ModelError};
use crate::objectives::{
    discriminator_loss, generator_loss, LossWeights, ObjectiveError, PerceptualExtractor,
};
use crate::spline::{SplineBasis, DEFAULT_DEGREE, DEFAULT_NUM_BASIS, DEFAULT_RANGE};
use crate::tensor::{no_grad, Tensor, TensorError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKAN";
pub const CHECKPOINT_VERSION: u32 = 1;
/// A discriminator epoch averaging below this loss is flagged as collapsed.
pub const COLLAPSE_FLOOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("non-finite loss at stage {stage} epoch {epoch} step {step}; first bad parameter group: {group}")]
    NonFinite {
        stage: &'static str,
        epoch: u64,
        step: u64,
        group: String,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint config hash {found:#x} does not match current config {expected:#x}")]
    HashMismatch { found: u64, expected: u64 },
    #[error("checkpoint truncated or corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type TrainResult<T> = Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Adversarial,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: u64,
    pub patches_per_epoch: u64,
    pub patch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub psnr_guard_delta: f64,
    pub generator: GeneratorConfig,
    /// Band size for the operators inside the generator; validation frames
    /// run through the banded forward pass, so this caps its patch-buffer
    /// memory. None keeps the operator default.
    pub chunk_pixels: Option<usize>,
    /// When set, `latest.ckpt` (and `best.ckpt` on improvement) are written
    /// there after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn pretrain_default() -> TrainConfig {
        TrainConfig {
            stage: Stage::Pretrain,
            epochs: 10,
            patches_per_epoch: 200,
            patch_size: 64,
            lr_g: 1e-4,
            lr_d: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            weights: LossWeights::pretrain(),
            seed: 7,
            psnr_guard_delta: 0.5,
            generator: GeneratorConfig::default(),
            chunk_pixels: None,
            checkpoint_dir: None,
        }
    }

    pub fn adversarial_default() -> TrainConfig {
        TrainConfig {
            stage: Stage::Adversarial,
            weights: LossWeights::gan(),
            ..TrainConfig::pretrain_default()
        }
    }

    pub fn validate(&self) -> TrainResult<()> {
        if self.epochs == 0 || self.patches_per_epoch == 0 {
            return Err(TrainError::BadConfig(
                "epochs and patches_per_epoch must be at least 1".into(),
            ));
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(TrainError::BadConfig(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::BadConfig("betas must lie in [0, 1)".into()));
        }
        if self.chunk_pixels == Some(0) {
            return Err(TrainError::BadConfig("chunk_pixels must be positive".into()));
        }
        if self.patch_size == 0 || self.patch_size % self.generator.upscale_factor != 0 {
            return Err(TrainError::BadConfig(format!(
                "patch_size {} must be a positive multiple of the scale {}",
                self.patch_size, self.generator.upscale_factor
            )));
        }
        self.weights
            .validate()
            .map_err(|e| TrainError::BadConfig(e.to_string()))?;
        if self.stage == Stage::Pretrain && self.weights.adversarial != 0.0 {
            return Err(TrainError::BadConfig(
                "pretraining must use a zero adversarial weight".into(),
            ));
        }
        self.generator
            .validate()
            .map_err(|e| TrainError::BadConfig(e.to_string()))?;
        Ok(())
    }
}

/// In-memory dataset: training HR images plus a held-out validation set.
/// Validation LR inputs are always the clean bicubic degradation.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train_hr: Vec<ImageBuffer>,
    pub val_hr: Vec<ImageBuffer>,
    pub degrade_cfg: DegradeConfig,
}

impl Dataset {
    fn validate(&self, patch: usize) -> TrainResult<()> {
        if self.train_hr.is_empty() || self.val_hr.is_empty() {
            return Err(TrainError::BadConfig(
                "dataset needs at least one training and one validation image".into(),
            ));
        }
        for img in &self.train_hr {
            if img.height < patch || img.width < patch {
                return Err(TrainError::BadConfig(format!(
                    "training image {}x{} smaller than patch {patch}",
                    img.height, img.width
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// optimizer

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Adaptive-moment optimizer over a fixed parameter list.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Adam {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            params,
            m,
            v,
        }
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// One update from the parameters' current gradients (missing = zero).
    pub fn step(&mut self) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let g = p.grad_or_zeros();
            let mut data = p.to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let gj = g[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                data[j] -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
            p.set_data(data);
        }
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            t: self.t,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn restore(&mut self, state: AdamState) -> TrainResult<()> {
        if state.m.len() != self.params.len() || state.v.len() != self.params.len() {
            return Err(TrainError::Corrupt(
                "optimizer state does not match parameter list".into(),
            ));
        }
        for (i, p) in self.params.iter().enumerate() {
            if state.m[i].len() != p.numel() || state.v[i].len() != p.numel() {
                return Err(TrainError::Corrupt(format!(
                    "optimizer moment {i} has wrong length"
                )));
            }
        }
        self.t = state.t;
        self.m = state.m;
        self.v = state.v;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// early stopping

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopState {
    pub baseline_psnr: f64,
    pub best_perc: f64,
}

impl EarlyStopState {
    pub fn new(baseline_psnr: f64) -> EarlyStopState {
        EarlyStopState {
            baseline_psnr,
            best_perc: f64::INFINITY,
        }
    }
}

/// Accepts a checkpoint only when perceptual distance strictly improves and
/// PSNR stays within the guard of the pretrained baseline.
pub fn early_stop_update(
    state: &mut EarlyStopState,
    psnr_y: f64,
    perc_dist: f64,
    guard_delta: f64,
) -> bool {
    if perc_dist < state.best_perc && psnr_y >= state.baseline_psnr - guard_delta {
        state.best_perc = perc_dist;
        true
    } else {
        false
    }
}

// ---------------------------------------------------------------------------
// logging

/// One JSONL record; step records carry losses, epoch records carry
/// validation metrics, absent values serialize as null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub epoch: u64,
    pub step: Option<u64>,
    pub l_g: Option<f64>,
    pub l_d: Option<f64>,
    pub l_pix: Option<f64>,
    pub l_perc: Option<f64>,
    pub l_adv: Option<f64>,
    pub psnr_y: Option<f64>,
    pub msssim_y: Option<f64>,
    pub perc_dist: Option<f64>,
}

impl LogRecord {
    fn blank(stage: Stage, epoch: u64) -> LogRecord {
        LogRecord {
            stage: stage.as_str().to_string(),
            epoch,
            step: None,
            l_g: None,
            l_d: None,
            l_pix: None,
            l_perc: None,
            l_adv: None,
            psnr_y: None,
            msssim_y: None,
            perc_dist: None,
        }
    }
}

pub fn log_to_jsonl(records: &[LogRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("plain fields"));
        out.push('\n');
    }
    out
}

pub fn log_from_jsonl(text: &str) -> TrainResult<Vec<LogRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Corrupt(format!("log line: {e}"))))
        .collect()
}

// ---------------------------------------------------------------------------
// checkpointing

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hash of everything the parameter layout depends on.
pub fn config_hash(cfg: &GeneratorConfig) -> u64 {
    let canon = format!(
        "g:{},{},{},{};spline:{},{},{},{}",
        cfg.base_channels,
        cfg.num_residual_blocks,
        cfg.upscale_factor,
        cfg.ckan_blocks,
        DEFAULT_DEGREE,
        DEFAULT_NUM_BASIS,
        DEFAULT_RANGE.0,
        DEFAULT_RANGE.1,
    );
    fnv1a(canon.as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub gen_config: GeneratorConfig,
    pub stage: Stage,
    /// Total generator epochs across both stages.
    pub epoch: u64,
    /// Epochs completed within `stage`.
    pub stage_epoch: u64,
    pub baseline_psnr: f64,
    pub best_perc: f64,
    pub best_psnr: f64,
    pub gen: Vec<Vec<f64>>,
    /// Frozen factorization bases; stored so reconstruction does not depend
    /// on replaying the original init stream.
    pub gen_fixed: Vec<Vec<f64>>,
    pub adam_g: AdamState,
    pub disc: Option<Vec<Vec<f64>>>,
    pub adam_d: Option<AdamState>,
}

fn blobs_of(params: &[Tensor]) -> Vec<Vec<f64>> {
    params.iter().map(|p| p.to_vec()).collect()
}

fn apply_blobs(params: &[Tensor], blobs: &[Vec<f64>]) -> TrainResult<()> {
    if params.len() != blobs.len() {
        return Err(TrainError::Corrupt(format!(
            "expected {} parameter blocks, found {}",
            params.len(),
            blobs.len()
        )));
    }
    for (p, b) in params.iter().zip(blobs) {
        if p.numel() != b.len() {
            return Err(TrainError::Corrupt(format!(
                "parameter block length {} does not match tensor {}",
                b.len(),
                p.numel()
            )));
        }
        p.set_data(b.clone());
    }
    Ok(())
}

impl Checkpoint {
    pub fn capture(
        cfg: &TrainConfig,
        gen: &Generator,
        adam_g: &Adam,
        disc: Option<(&Discriminator, &Adam)>,
        epoch: u64,
        stage_epoch: u64,
        baseline_psnr: f64,
        best_perc: f64,
        best_psnr: f64,
    ) -> Checkpoint {
        Checkpoint {
            config_hash: config_hash(&cfg.generator),
            gen_config: cfg.generator,
            stage: cfg.stage,
            epoch,
            stage_epoch,
            baseline_psnr,
            best_perc,
            best_psnr,
            gen: blobs_of(&gen.params()),
            gen_fixed: blobs_of(&gen.fixed_tensors()),
            adam_g: adam_g.state(),
            disc: disc.map(|(d, _)| blobs_of(&d.params())),
            adam_d: disc.map(|(_, a)| a.state()),
        }
    }

    /// Rebuilds the generator this checkpoint was captured from. The init
    /// stream seed is irrelevant: every parameter and frozen basis is
    /// overwritten from the stored blocks.
    pub fn build_generator(&self) -> TrainResult<Generator> {
        let basis = default_basis();
        let gen = Generator::new(self.gen_config, &basis, &mut stream(0, TAG_GEN))?;
        apply_blobs(&gen.params(), &self.gen)?;
        apply_blobs(&gen.fixed_tensors(), &self.gen_fixed)?;
        Ok(gen)
    }
}

fn default_basis() -> SplineBasis {
    SplineBasis::default_basis()
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Writer {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn blob(&mut self, b: &[f64]) {
        self.u64(b.len() as u64);
        for v in b {
            self.f64(*v);
        }
    }
    fn blobs(&mut self, bs: &[Vec<f64>]) {
        self.u64(bs.len() as u64);
        for b in bs {
            self.blob(b);
        }
    }
    fn adam(&mut self, s: &AdamState) {
        self.u64(s.t);
        self.blobs(&s.m);
        self.blobs(&s.v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> TrainResult<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(TrainError::Corrupt(format!(
                "unexpected end of file at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> TrainResult<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> TrainResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> TrainResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> TrainResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn blob(&mut self) -> TrainResult<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > self.buf.len() / 8 + 1 {
            return Err(TrainError::Corrupt(format!("implausible block length {n}")));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
    fn blobs(&mut self) -> TrainResult<Vec<Vec<f64>>> {
        let n = self.u64()? as usize;
        if n > 1 << 20 {
            return Err(TrainError::Corrupt(format!("implausible block count {n}")));
        }
        (0..n).map(|_| self.blob()).collect()
    }
    fn adam(&mut self) -> TrainResult<AdamState> {
        Ok(AdamState {
            t: self.u64()?,
            m: self.blobs()?,
            v: self.blobs()?,
        })
    }
}

pub fn checkpoint_save(path: &Path, ck: &Checkpoint) -> TrainResult<()> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(ck.config_hash);
    w.u8(match ck.stage {
        Stage::Pretrain => 0,
        Stage::Adversarial => 1,
    });
    w.u64(ck.epoch);
    w.u64(ck.stage_epoch);
    w.f64(ck.baseline_psnr);
    w.f64(ck.best_perc);
    w.f64(ck.best_psnr);
    w.u32(ck.gen_config.base_channels as u32);
    w.u32(ck.gen_config.num_residual_blocks as u32);
    w.u32(ck.gen_config.upscale_factor as u32);
    w.u8(ck.gen_config.ckan_blocks as u8);
    w.blobs(&ck.gen);
    w.blobs(&ck.gen_fixed);
    w.adam(&ck.adam_g);
    match (&ck.disc, &ck.adam_d) {
        (Some(d), Some(a)) => {
            w.u8(1);
            w.blobs(d);
            w.adam(a);
        }
        _ => w.u8(0),
    }
    std::fs::write(path, &w.buf)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> TrainResult<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(TrainError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let stored_hash = r.u64()?;
    let stage = match r.u8()? {
        0 => Stage::Pretrain,
        1 => Stage::Adversarial,
        other => return Err(TrainError::Corrupt(format!("unknown stage tag {other}"))),
    };
    let epoch = r.u64()?;
    let stage_epoch = r.u64()?;
    let baseline_psnr = r.f64()?;
    let best_perc = r.f64()?;
    let best_psnr = r.f64()?;
    let gen_config = GeneratorConfig {
        base_channels: r.u32()? as usize,
        num_residual_blocks: r.u32()? as usize,
        upscale_factor: r.u32()? as usize,
        ckan_blocks: r.u8()? != 0,
    };
    let expected = config_hash(&gen_config);
    if stored_hash != expected {
        return Err(TrainError::HashMismatch {
            found: stored_hash,
            expected,
        });
    }
    let gen = r.blobs()?;
    let gen_fixed = r.blobs()?;
    let adam_g = r.adam()?;
    let (disc, adam_d) = if r.u8()? == 1 {
        (Some(r.blobs()?), Some(r.adam()?))
    } else {
        (None, None)
    };
    if r.pos != bytes.len() {
        return Err(TrainError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config_hash: stored_hash,
        gen_config,
        stage,
        epoch,
        stage_epoch,
        baseline_psnr,
        best_perc,
        best_psnr,
        gen,
        gen_fixed,
        adam_g,
        disc,
        adam_d,
    })
}

// ---------------------------------------------------------------------------
// training loops

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

const TAG_GEN: u64 = 1;
const TAG_DISC: u64 = 2;
const TAG_EPOCH_BASE: u64 = 0x100;

/// Validation metrics of a generator over the held-out set: mean
/// (psnr_y, msssim_y, perc_dist) against the clean bicubic degradation.
pub fn validate_generator(
    gen: &Generator,
    data: &Dataset,
    extractor: &PerceptualExtractor,
) -> TrainResult<(f64, f64, f64)> {
    let s = data.degrade_cfg.scale;
    let clean = DegradeConfig::clean(s);
    let (mut psnr_acc, mut ms_acc, mut perc_acc) = (0.0, 0.0, 0.0);
    for hr in &data.val_hr {
        let (ch, cw) = (hr.height - hr.height % s, hr.width - hr.width % s);
        let hr_c = hr.crop(0, 0, ch, cw)?;
        let lr = degrade(&hr_c, &clean)?;
        // banded forward: full frames are the memory-heavy inputs, and the
        // banded pass is exactly equal to the full one
        let sr_t = no_grad(|| gen.forward_chunked(&lr.to_tensor()))?;
        let sr = ImageBuffer::from_tensor(&sr_t)?;
        psnr_acc += psnr_y(&sr, &hr_c)?;
        ms_acc += ms_ssim_y(&sr, &hr_c)?;
        perc_acc += perceptual_distance(extractor, &sr, &hr_c)?;
    }
    let n = data.val_hr.len() as f64;
    Ok((psnr_acc / n, ms_acc / n, perc_acc / n))
}

/// Mean PSNR-Y of plain bicubic upscaling over the validation set.
pub fn bicubic_baseline_psnr(data: &Dataset) -> TrainResult<f64> {
    let s = data.degrade_cfg.scale;
    let clean = DegradeConfig::clean(s);
    let mut acc = 0.0;
    for hr in &data.val_hr {
        let (ch, cw) = (hr.height - hr.height % s, hr.width - hr.width % s);
        let hr_c = hr.crop(0, 0, ch, cw)?;
        let lr = degrade(&hr_c, &clean)?;
        let up = crate::data::bicubic_resample(&lr, ch, cw)?;
        acc += psnr_y(&up, &hr_c)?;
    }
    Ok(acc / data.val_hr.len() as f64)
}

fn first_nonfinite_group(groups: &[(String, Vec<Tensor>)]) -> String {
    for (name, params) in groups {
        for p in params {
            if !p.is_finite() {
                return name.clone();
            }
            if let Some(g) = p.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return name.clone();
                }
            }
        }
    }
    "none (loss arithmetic)".to_string()
}

fn ensure_finite(
    value: f64,
    groups: &[(String, Vec<Tensor>)],
    stage: Stage,
    epoch: u64,
    step: u64,
) -> TrainResult<()> {
    if value.is_finite() {
        return Ok(());
    }
    Err(TrainError::NonFinite {
        stage: stage.as_str(),
        epoch,
        step,
        group: first_nonfinite_group(groups),
    })
}

fn save_epoch_checkpoints(
    cfg: &TrainConfig,
    latest: &Checkpoint,
    best: Option<&Checkpoint>,
) -> TrainResult<()> {
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        checkpoint_save(&dir.join("latest.ckpt"), latest)?;
        if let Some(b) = best {
            checkpoint_save(&dir.join("best.ckpt"), b)?;
        }
    }
    Ok(())
}

/// Everything a finished stage hands back: the log, the last checkpoint,
/// the best checkpoint under the stage's selection rule, and any warnings.
#[derive(Debug)]
pub struct TrainRun {
    pub log: Vec<LogRecord>,
    pub final_ckpt: Checkpoint,
    pub best_ckpt: Checkpoint,
    pub warnings: Vec<String>,
}

fn draw_pair(
    data: &Dataset,
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> TrainResult<(Tensor, Tensor)> {
    let idx = rng.random_range(0..data.train_hr.len());
    let pair = extract_patch_pairs(&data.train_hr[idx], &data.degrade_cfg, patch, 1, rng)?
        .pop()
        .expect("count = 1");
    Ok((pair.lr.to_tensor(), pair.hr.to_tensor()))
}

/// Content pretraining. `resume` continues a previous run of the same
/// config; epochs already done count toward `cfg.epochs`.
pub fn pretrain(
    cfg: &TrainConfig,
    data: &Dataset,
    resume: Option<Checkpoint>,
) -> TrainResult<TrainRun> {
    if cfg.stage != Stage::Pretrain {
        return Err(TrainError::BadConfig("config stage is not pretrain".into()));
    }
    cfg.validate()?;
    data.validate(cfg.patch_size)?;
    let basis = default_basis();
    let expected_hash = config_hash(&cfg.generator);

    let (mut gen, mut adam_g, start_epoch, mut best_psnr) = match resume {
        Some(ck) => {
            if ck.config_hash != expected_hash {
                return Err(TrainError::HashMismatch {
                    found: ck.config_hash,
                    expected: expected_hash,
                });
            }
            let gen = ck.build_generator()?;
            let mut adam = Adam::new(gen.params(), cfg.lr_g, cfg.beta1, cfg.beta2, cfg.eps_opt);
            adam.restore(ck.adam_g)?;
            (gen, adam, ck.epoch, ck.best_psnr)
        }
        None => {
            let mut rng = stream(cfg.seed, TAG_GEN);
            let gen = Generator::new(cfg.generator, &basis, &mut rng)?;
            let adam = Adam::new(gen.params(), cfg.lr_g, cfg.beta1, cfg.beta2, cfg.eps_opt);
            (gen, adam, 0, f64::NEG_INFINITY)
        }
    };
    if let Some(c) = cfg.chunk_pixels {
        gen.set_chunk_pixels(c);
    }
    let gen = gen;
    let extractor = PerceptualExtractor::default_eval();
    let groups = gen.param_groups();

    let mut log = Vec::new();
    let mut best_ckpt: Option<Checkpoint> = None;
    let mut latest: Option<Checkpoint> = None;
    for e in start_epoch..cfg.epochs {
        let epoch_no = e + 1;
        let mut erng = stream(cfg.seed, TAG_EPOCH_BASE + e);
        for s in 0..cfg.patches_per_epoch {
            let (lr_t, hr_t) = draw_pair(data, cfg.patch_size, &mut erng)?;
            let sr = gen.forward(&lr_t)?;
            let (loss, bd) = generator_loss(&cfg.weights, &extractor, &sr, &hr_t, None)?;
            ensure_finite(bd.total, &groups, cfg.stage, epoch_no, s)?;
            adam_g.zero_grads();
            loss.backward()?;
            adam_g.step();
            log.push(LogRecord {
                step: Some(s),
                l_g: Some(bd.total),
                l_pix: Some(bd.pixel),
                l_perc: Some(bd.perceptual),
                ..LogRecord::blank(cfg.stage, epoch_no)
            });
        }
        let (psnr, msssim, perc) = validate_generator(&gen, data, &extractor)?;
        log.push(LogRecord {
            psnr_y: Some(psnr),
            msssim_y: Some(msssim),
            perc_dist: Some(perc),
            ..LogRecord::blank(cfg.stage, epoch_no)
        });
        let improved = psnr > best_psnr;
        if improved {
            best_psnr = psnr;
        }
        let ck = Checkpoint::capture(
            cfg, &gen, &adam_g, None, epoch_no, epoch_no, psnr, f64::INFINITY, best_psnr,
        );
        if improved {
            best_ckpt = Some(ck.clone());
        }
        save_epoch_checkpoints(cfg, &ck, best_ckpt.as_ref().filter(|_| improved))?;
        latest = Some(ck);
    }
    let final_ckpt = latest.expect("epochs >= 1 after resume check");
    let best_ckpt = best_ckpt.unwrap_or_else(|| final_ckpt.clone());
    Ok(TrainRun {
        log,
        final_ckpt,
        best_ckpt,
        warnings: Vec::new(),
    })
}

/// Adversarial fine-tuning from a pretrained checkpoint: each step updates
/// the discriminator on (real, detached fake), then the generator through
/// the updated discriminator. Early stopping accepts only
/// perception-improving, PSNR-guarded epochs.
pub fn adversarial_train(
    cfg: &TrainConfig,
    init: Checkpoint,
    data: &Dataset,
) -> TrainResult<TrainRun> {
    if cfg.stage != Stage::Adversarial {
        return Err(TrainError::BadConfig(
            "config stage is not adversarial".into(),
        ));
    }
    cfg.validate()?;
    data.validate(cfg.patch_size)?;
    let expected_hash = config_hash(&cfg.generator);
    if init.config_hash != expected_hash {
        return Err(TrainError::HashMismatch {
            found: init.config_hash,
            expected: expected_hash,
        });
    }

    let mut gen = init.build_generator()?;
    if let Some(c) = cfg.chunk_pixels {
        gen.set_chunk_pixels(c);
    }
    let gen = gen;
    let mut adam_g = Adam::new(gen.params(), cfg.lr_g, cfg.beta1, cfg.beta2, cfg.eps_opt);
    adam_g.restore(init.adam_g.clone())?;

    let mut drng = stream(cfg.seed, TAG_DISC);
    let disc = Discriminator::new(&mut drng);
    let mut adam_d = Adam::new(disc.params(), cfg.lr_d, cfg.beta1, cfg.beta2, cfg.eps_opt);
    if let (Some(blobs), Some(state)) = (&init.disc, &init.adam_d) {
        apply_blobs(&disc.params(), blobs)?;
        adam_d.restore(state.clone())?;
    }

    let extractor = PerceptualExtractor::default_eval();
    let g_groups = gen.param_groups();
    let d_groups = disc.param_groups();

    // resuming the same stage keeps its counters; a fresh stage starts at 0
    let start_local = if init.stage == Stage::Adversarial {
        init.stage_epoch
    } else {
        0
    };
    let base_global = init.epoch - start_local;
    let baseline_psnr = if init.baseline_psnr.is_finite() {
        init.baseline_psnr
    } else {
        validate_generator(&gen, data, &extractor)?.0
    };
    let mut early = EarlyStopState::new(baseline_psnr);
    if init.stage == Stage::Adversarial && init.best_perc.is_finite() {
        early.best_perc = init.best_perc;
    }

    let mut log = Vec::new();
    let mut warnings = Vec::new();
    let mut best_ckpt: Option<Checkpoint> = None;
    let mut latest: Option<Checkpoint> = None;
    let mut best_psnr = init.best_psnr;
    for e in start_local..cfg.epochs {
        let global = base_global + e;
        let epoch_no = global + 1;
        let mut erng = stream(cfg.seed, TAG_EPOCH_BASE + global);
        let mut d_losses = Vec::with_capacity(cfg.patches_per_epoch as usize);
        for s in 0..cfg.patches_per_epoch {
            let (lr_t, hr_t) = draw_pair(data, cfg.patch_size, &mut erng)?;

            // discriminator first, on the current generator's output
            let fake = no_grad(|| gen.forward(&lr_t))?;
            let z_real = disc.forward(&hr_t)?;
            let z_fake = disc.forward(&fake)?;
            let l_d = discriminator_loss(&z_real, &z_fake);
            let l_d_val = l_d.item();
            ensure_finite(l_d_val, &d_groups, cfg.stage, epoch_no, s)?;
            adam_d.zero_grads();
            l_d.backward()?;
            adam_d.step();
            d_losses.push(l_d_val);

            // generator through the just-updated discriminator
            let sr = gen.forward(&lr_t)?;
            let logits = if cfg.weights.adversarial > 0.0 {
                Some(disc.forward(&sr)?)
            } else {
                None
            };
            let (l_g, bd) = generator_loss(&cfg.weights, &extractor, &sr, &hr_t, logits.as_ref())?;
            ensure_finite(bd.total, &g_groups, cfg.stage, epoch_no, s)?;
            adam_g.zero_grads();
            l_g.backward()?;
            adam_g.step();

            log.push(LogRecord {
                step: Some(s),
                l_g: Some(bd.total),
                l_d: Some(l_d_val),
                l_pix: Some(bd.pixel),
                l_perc: Some(bd.perceptual),
                l_adv: bd.adversarial,
                ..LogRecord::blank(cfg.stage, epoch_no)
            });
        }
        if d_losses.iter().all(|&v| v < COLLAPSE_FLOOR) {
            warnings.push(format!(
                "epoch {epoch_no}: discriminator loss stayed below {COLLAPSE_FLOOR} all epoch (collapse)"
            ));
        }
        let (psnr, msssim, perc) = validate_generator(&gen, data, &extractor)?;
        log.push(LogRecord {
            psnr_y: Some(psnr),
            msssim_y: Some(msssim),
            perc_dist: Some(perc),
            ..LogRecord::blank(cfg.stage, epoch_no)
        });
        let new_best = early_stop_update(&mut early, psnr, perc, cfg.psnr_guard_delta);
        if psnr > best_psnr {
            best_psnr = psnr;
        }
        let ck = Checkpoint::capture(
            cfg,
            &gen,
            &adam_g,
            Some((&disc, &adam_d)),
            epoch_no,
            e + 1,
            baseline_psnr,
            early.best_perc,
            best_psnr,
        );
        if new_best {
            best_ckpt = Some(ck.clone());
        }
        save_epoch_checkpoints(cfg, &ck, best_ckpt.as_ref().filter(|_| new_best))?;
        latest = Some(ck);
    }
    let final_ckpt = latest.ok_or_else(|| {
        TrainError::BadConfig(format!(
            "stage already at {} of {} epochs",
            start_local, cfg.epochs
        ))
    })?;
    let best_ckpt = best_ckpt.unwrap_or_else(|| final_ckpt.clone());
    Ok(TrainRun {
        log,
        final_ckpt,
        best_ckpt,
        warnings,
    })
}
