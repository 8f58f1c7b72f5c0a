//! FixMatch-style representation learning on feature vectors.
//!
//! Weak augmentation adds small Gaussian noise; strong augmentation adds
//! larger noise and then zeroes coordinates at random. Pseudo-labels are
//! predicted from weak views and trained against on strong views.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Encoder, GradMode, Grads, Head, Targets};
use crate::sampling::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_sigma: 0.1,
            strong_sigma: 0.5,
            mask_prob: 0.2,
        }
    }
}

impl AugmentConfig {
    /// No noise and no masking: both views equal the input.
    pub fn identity() -> Self {
        Self {
            weak_sigma: 0.0,
            strong_sigma: 0.0,
            mask_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weak_sigma >= 0.0 && self.weak_sigma.is_finite()) {
            return Err(Error::invalid("weak_sigma", "must be finite and >= 0"));
        }
        if !(self.strong_sigma >= self.weak_sigma && self.strong_sigma.is_finite()) {
            return Err(Error::invalid("strong_sigma", "must be finite and >= weak_sigma"));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::invalid("mask_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn add_noise<R: Rng + ?Sized>(x: &mut [f64], sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    let noise = Normal::new(0.0, sigma).expect("sigma validated");
    for v in x {
        *v += noise.sample(rng);
    }
}

/// Weak view of a row-major batch: additive `N(0, weak_sigma^2)` noise.
pub fn weak_augment_batch<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let mut out = x.to_vec();
    add_noise(&mut out, cfg.weak_sigma, rng);
    out
}

/// Strong view of a row-major batch: `N(0, strong_sigma^2)` noise, then each
/// coordinate zeroed independently with probability `mask_prob`.
pub fn strong_augment_batch<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let mut out = x.to_vec();
    add_noise(&mut out, cfg.strong_sigma, rng);
    if cfg.mask_prob > 0.0 {
        for v in &mut out {
            if rng.random::<f64>() < cfg.mask_prob {
                *v = 0.0;
            }
        }
    }
    out
}

pub fn weak_augment<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    weak_augment_batch(x, cfg, rng)
}

pub fn strong_augment<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    strong_augment_batch(x, cfg, rng)
}

/// A predicted class for an unlabeled example. `class` is 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub class: usize,
    pub confidence: f64,
    pub accepted: bool,
}

fn validate_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid("tau", format!("must lie in [0, 1], got {tau}")));
    }
    Ok(())
}

/// Pseudo-labels from already computed logits (row-major `n x K`).
pub fn pseudo_labels_from_logits(logits: &[f64], k: usize, tau: f64) -> Vec<PseudoLabel> {
    logits
        .chunks_exact(k)
        .map(|row| {
            let p = nn::softmax(row);
            let class = nn::argmax(&p);
            let confidence = p[class];
            PseudoLabel {
                class,
                confidence,
                accepted: confidence >= tau,
            }
        })
        .collect()
}

/// Pseudo-labels for a batch of unlabeled rows, predicted on weak views.
/// Reads parameters only.
pub fn pseudo_label_batch<R: Rng + ?Sized>(
    encoder: &Encoder,
    head: &Head,
    u: &[f64],
    tau: f64,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<PseudoLabel>> {
    validate_tau(tau)?;
    let n = u.len() / encoder.input_dim();
    let weak = weak_augment_batch(u, cfg, rng);
    let z = encoder.encode_batch(&weak, n);
    let logits = head.logits_batch(&z, n);
    Ok(pseudo_labels_from_logits(&logits, head.num_classes(), tau))
}

pub fn pseudo_label<R: Rng + ?Sized>(
    encoder: &Encoder,
    head: &Head,
    u: &[f64],
    tau: f64,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<PseudoLabel> {
    Ok(pseudo_label_batch(encoder, head, u, tau, cfg, rng)?[0])
}

/// `L_x`: mean cross entropy of weak views of labeled rows through `(g, h_r)`.
pub fn supervised_loss<R: Rng + ?Sized>(
    g: &Encoder,
    h_r: &Head,
    labeled: &Batch,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(f64, Grads)> {
    let labels = labeled
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("labeled_batch", "supervised loss needs labels"))?;
    let x = weak_augment_batch(&labeled.features, cfg, rng);
    nn::cross_entropy_and_grads(g, h_r, &x, Targets::Hard(labels), GradMode::Full)
}

/// `L_u`: cross entropy of strong views against accepted pseudo-labels,
/// averaged over the whole batch so rejected rows count as zero.
pub fn unlabeled_loss<R: Rng + ?Sized>(
    g: &Encoder,
    h_r: &Head,
    unlabeled: &Batch,
    pseudo: &[PseudoLabel],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(f64, Grads)> {
    if pseudo.len() != unlabeled.len() {
        return Err(Error::Shape(format!(
            "{} pseudo-labels for {} unlabeled rows",
            pseudo.len(),
            unlabeled.len()
        )));
    }
    let x = strong_augment_batch(&unlabeled.features, cfg, rng);
    let labels: Vec<usize> = pseudo.iter().map(|p| p.class).collect();
    let accepted: Vec<bool> = pseudo.iter().map(|p| p.accepted).collect();
    nn::cross_entropy_and_grads(
        g,
        h_r,
        &x,
        Targets::Masked {
            labels: &labels,
            accepted: &accepted,
        },
        GradMode::Full,
    )
}

/// Fraction of accepted pseudo-labels.
pub fn acceptance_rate(pseudo: &[PseudoLabel]) -> f64 {
    if pseudo.is_empty() {
        return 0.0;
    }
    pseudo.iter().filter(|p| p.accepted).count() as f64 / pseudo.len() as f64
}
