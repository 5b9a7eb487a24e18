//! Training objectives: pixel, perceptual, and adversarial losses.
//!
//! All logits stay in pre-sigmoid space; the non-saturating GAN terms use
//! `softplus` so probabilities are never materialized (no log-of-sigmoid
//! underflow). The perceptual distance runs both images through a small
//! frozen random conv pyramid and sums per-stage mean squared feature gaps.

use crate::ckan::{ckan_forward, CkanConfig, CkanError, ConvGeometry, DEFAULT_CHUNK_PIXELS};
use crate::tensor::{Tensor, TensorError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Fixed seed for the evaluation extractor so perceptual distances are
/// comparable across runs and tools regardless of the training seed.
pub const PERC_EXTRACTOR_SEED: u64 = 0x00C0_FFEE;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("loss weights must be non-negative and not all zero")]
    BadWeights,
    #[error("adversarial weight is positive but no fake logits were supplied")]
    MissingLogits,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Ckan(#[from] CkanError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type ObjResult<T> = Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pixel: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

impl LossWeights {
    /// Adversarial-stage mix.
    pub fn gan() -> LossWeights {
        LossWeights {
            pixel: 1e-2,
            perceptual: 1.0,
            adversarial: 1e-3,
        }
    }

    /// Content-only pretraining mix.
    pub fn pretrain() -> LossWeights {
        LossWeights {
            pixel: 1.0,
            perceptual: 1e-2,
            adversarial: 0.0,
        }
    }

    pub fn validate(&self) -> ObjResult<()> {
        let ws = [self.pixel, self.perceptual, self.adversarial];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) || ws.iter().all(|w| *w == 0.0) {
            return Err(ObjectiveError::BadWeights);
        }
        Ok(())
    }
}

/// Frozen random 3-stage conv pyramid (3 -> 8 -> 16 -> 32, stride 2).
///
/// Weights never require gradients; the same seed always rebuilds the same
/// feature space. Stage weights in the distance are all 1.
pub struct PerceptualExtractor {
    stages: Vec<CkanConfig>,
}

impl PerceptualExtractor {
    pub fn new(seed: u64) -> PerceptualExtractor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [3usize, 8, 16, 32];
        let stages = widths
            .windows(2)
            .map(|wd| {
                let geom = ConvGeometry::square(wd[0], wd[1], 3, 2, 1);
                let k = geom.patch_len();
                let std = (2.0 / k as f64).sqrt();
                let w: Vec<f64> = (0..geom.c_out * k)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let weight = Tensor::new(&[geom.c_out, k], w).expect("sized");
                CkanConfig::linear(geom, DEFAULT_CHUNK_PIXELS, weight, None).expect("dims")
            })
            .collect();
        PerceptualExtractor { stages }
    }

    pub fn default_eval() -> PerceptualExtractor {
        PerceptualExtractor::new(PERC_EXTRACTOR_SEED)
    }

    /// Activated feature maps after every stage, coarsest last.
    pub fn features(&self, x: &Tensor) -> ObjResult<Vec<Tensor>> {
        let mut maps = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for stage in &self.stages {
            h = ckan_forward(&h, stage)?.silu();
            maps.push(h.clone());
        }
        Ok(maps)
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> ObjResult<()> {
    if a.shape() != b.shape() {
        return Err(ObjectiveError::ShapeMismatch(
            a.shape().to_vec(),
            b.shape().to_vec(),
        ));
    }
    Ok(())
}

/// Mean absolute error over all elements.
pub fn pixel_loss(sr: &Tensor, hr: &Tensor) -> ObjResult<Tensor> {
    check_same_shape(sr, hr)?;
    Ok(sr.sub(hr)?.abs_t().mean_all())
}

/// Sum over stages of the mean squared feature difference. The reference
/// image is detached; gradients flow only through `sr`.
pub fn perceptual_loss(
    extractor: &PerceptualExtractor,
    sr: &Tensor,
    hr: &Tensor,
) -> ObjResult<Tensor> {
    check_same_shape(sr, hr)?;
    let fs = extractor.features(sr)?;
    let fh = extractor.features(&hr.detach())?;
    let mut total: Option<Tensor> = None;
    for (a, b) in fs.iter().zip(&fh) {
        let d = a.sub(b)?;
        let term = d.mul(&d)?.mean_all();
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("pyramid is non-empty"))
}

/// Non-saturating generator term: mean softplus(-z) over fake logits.
pub fn adversarial_loss_g(fake_logits: &Tensor) -> Tensor {
    fake_logits.neg().softplus().mean_all()
}

/// Discriminator objective: mean softplus(-z_real) + mean softplus(z_fake).
pub fn discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Tensor {
    real_logits
        .neg()
        .softplus()
        .mean_all()
        .add(&fake_logits.softplus().mean_all())
        .expect("scalars")
}

/// Scalar components of a generator loss, recorded for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub pixel: f64,
    pub perceptual: f64,
    pub adversarial: Option<f64>,
}

/// Weighted generator objective. Zero-weight terms are skipped entirely so
/// the recorded graph with `adversarial = 0` is identical to the content
/// loss graph, not merely numerically close.
pub fn generator_loss(
    weights: &LossWeights,
    extractor: &PerceptualExtractor,
    sr: &Tensor,
    hr: &Tensor,
    fake_logits: Option<&Tensor>,
) -> ObjResult<(Tensor, LossBreakdown)> {
    weights.validate()?;
    let mut total: Option<Tensor> = None;
    let mut add_term = |t: Tensor, w: f64| -> ObjResult<f64> {
        let raw = t.item();
        let scaled = t.scale(w);
        total = Some(match total.take() {
            Some(acc) => acc.add(&scaled)?,
            None => scaled,
        });
        Ok(raw)
    };
    let mut pix = 0.0;
    let mut perc = 0.0;
    if weights.pixel > 0.0 {
        pix = add_term(pixel_loss(sr, hr)?, weights.pixel)?;
    }
    if weights.perceptual > 0.0 {
        perc = add_term(perceptual_loss(extractor, sr, hr)?, weights.perceptual)?;
    }
    let mut adv = None;
    if weights.adversarial > 0.0 {
        let logits = fake_logits.ok_or(ObjectiveError::MissingLogits)?;
        adv = Some(add_term(adversarial_loss_g(logits), weights.adversarial)?);
    }
    let total = total.expect("validated weights have a positive term");
    Ok((
        total.clone(),
        LossBreakdown {
            total: total.item(),
            pixel: pix,
            perceptual: perc,
            adversarial: adv,
        },
    ))
}

/// Pretraining objective: the generator loss at the content-only mix.
pub fn content_loss(
    extractor: &PerceptualExtractor,
    sr: &Tensor,
    hr: &Tensor,
) -> ObjResult<(Tensor, LossBreakdown)> {
    generator_loss(&LossWeights::pretrain(), extractor, sr, hr, None)
}
