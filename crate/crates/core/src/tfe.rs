//! Tail-class feature enhancement.
//!
//! The classifier head is trained on class-balanced labeled examples whose
//! representations are, with a class-dependent probability, convexly blended
//! with the representation of a random unlabeled example. The blended
//! feature keeps the labeled example's class. Head classes (many labeled
//! examples) are rarely blended; tail classes almost always are.

use rand::Rng;

use crate::datagen::{ClassDistribution, Dataset};
use crate::error::{Error, Result};
use crate::nn::{self, Encoder, Head, OptState, Targets};
use crate::sampling::{self, SamplerKind};
use crate::ssl::{self, AugmentConfig};

/// `P_k = (N_1 - N_k) / N_1`.
pub fn blend_probability(n1: usize, nk: usize) -> Result<f64> {
    if nk < 1 || nk > n1 {
        return Err(Error::invalid(
            "nk",
            format!("class count {nk} must lie in 1..={n1}"),
        ));
    }
    Ok((n1 - nk) as f64 / n1 as f64)
}

fn validate_mu(mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::invalid("mu", format!("must lie in [0, 1], got {mu}")));
    }
    Ok(())
}

/// Fusion factor `lambda ~ Uniform(mu, 1)`; exactly 1 when `mu == 1`.
pub fn sample_fusion_factor<R: Rng + ?Sized>(mu: f64, rng: &mut R) -> Result<f64> {
    validate_mu(mu)?;
    Ok(mu + (1.0 - mu) * rng.random::<f64>())
}

/// Ablation switches. All off in the shipped method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TfeFlags {
    /// Blend every slot (`P_k = 1` for all classes).
    pub force_blend: bool,
    /// Mix the label too: `lambda * y + (1 - lambda) * pseudo(u)`.
    pub label_blending: bool,
    /// Blend raw inputs before encoding instead of representations.
    pub input_level: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfeConfig {
    pub mu: f64,
    pub blend_probs: Vec<f64>,
    pub labeled_counts: ClassDistribution,
    pub flags: TfeFlags,
}

impl TfeConfig {
    /// Blend probabilities from the labeled counts, with class 1 as the head.
    pub fn new(mu: f64, labeled_counts: ClassDistribution) -> Result<Self> {
        validate_mu(mu)?;
        let n1 = labeled_counts.counts()[0];
        let blend_probs = labeled_counts
            .counts()
            .iter()
            .map(|&nk| blend_probability(n1, nk))
            .collect::<Result<_>>()?;
        Ok(Self {
            mu,
            blend_probs,
            labeled_counts,
            flags: TfeFlags::default(),
        })
    }

    /// Never blends: class-balanced classifier retraining on plain features,
    /// consuming randomness exactly like the blending configuration.
    pub fn never_blend(mu: f64, labeled_counts: ClassDistribution) -> Result<Self> {
        let mut cfg = Self::new(mu, labeled_counts)?;
        cfg.blend_probs.iter_mut().for_each(|p| *p = 0.0);
        Ok(cfg)
    }

    pub fn with_flags(mut self, flags: TfeFlags) -> Self {
        self.flags = flags;
        self
    }

    pub fn effective_probability(&self, class: usize) -> f64 {
        if self.flags.force_blend {
            1.0
        } else {
            self.blend_probs[class]
        }
    }
}

/// The random choices behind one TFE batch, before any encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct TfePlan {
    pub dim: usize,
    pub x_indices: Vec<usize>,
    pub u_indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub blended_mask: Vec<bool>,
    /// Drawn for every slot; only used where `blended_mask` is set.
    pub lambdas: Vec<f64>,
    /// Strongly augmented labeled inputs, `B x d`.
    pub x_inputs: Vec<f64>,
    /// Strongly augmented unlabeled inputs, `B x d`.
    pub u_inputs: Vec<f64>,
}

impl TfePlan {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Inputs mixed before encoding, for the input-level ablation.
    pub fn input_blend(&self) -> Vec<f64> {
        let mut out = self.x_inputs.clone();
        for b in 0..self.len() {
            if self.blended_mask[b] {
                let lam = self.lambdas[b];
                let (xs, us) = (b * self.dim, (b + 1) * self.dim);
                for (o, u) in out[xs..us].iter_mut().zip(&self.u_inputs[xs..us]) {
                    *o = lam * *o + (1.0 - lam) * u;
                }
            }
        }
        out
    }
}

/// Blended classifier training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendedBatch {
    pub feature_dim: usize,
    /// Row-major `B x feature_dim`.
    pub features: Vec<f64>,
    /// Class of each slot's labeled source.
    pub labels: Vec<usize>,
    pub blended_mask: Vec<bool>,
    pub lambdas: Vec<f64>,
    /// Mixed label distributions; only under the label-blending ablation.
    pub soft_targets: Option<Vec<f64>>,
}

impl BlendedBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn targets(&self) -> Targets<'_> {
        match &self.soft_targets {
            Some(p) => Targets::Soft(p),
            None => Targets::Hard(&self.labels),
        }
    }
}

/// Draws the labeled/unlabeled pairs, blend decisions, fusion factors and
/// strong views for `batch` slots.
///
/// Per slot the draw order is fixed: labeled example (class-balanced),
/// unlabeled example (random), blend coin, fusion factor. The unlabeled
/// example and the fusion factor are drawn even when the slot does not blend.
pub fn plan_tfe_batch<R: Rng + ?Sized>(
    x_set: &Dataset,
    u_set: &Dataset,
    cfg: &TfeConfig,
    aug: &AugmentConfig,
    batch: usize,
    rng: &mut R,
) -> Result<TfePlan> {
    let labels_all = x_set
        .labels()
        .ok_or_else(|| Error::invalid("x_set", "TFE needs a labeled set"))?;
    if u_set.is_empty() {
        return Err(Error::invalid("u_set", "TFE needs a non-empty unlabeled set"));
    }
    if cfg.blend_probs.len() != x_set.num_classes() {
        return Err(Error::Shape(format!(
            "{} blend probabilities for {} classes",
            cfg.blend_probs.len(),
            x_set.num_classes()
        )));
    }
    let mut x_indices = Vec::with_capacity(batch);
    let mut u_indices = Vec::with_capacity(batch);
    let mut labels = Vec::with_capacity(batch);
    let mut blended_mask = Vec::with_capacity(batch);
    let mut lambdas = Vec::with_capacity(batch);
    for _ in 0..batch {
        let xi = sampling::sample_indices(x_set, &SamplerKind::ClassBalanced, 1, rng)?[0];
        let uj = sampling::sample_indices(u_set, &SamplerKind::Random, 1, rng)?[0];
        let y = labels_all[xi];
        let coin: f64 = rng.random();
        let lam = sample_fusion_factor(cfg.mu, rng)?;
        x_indices.push(xi);
        u_indices.push(uj);
        labels.push(y);
        // `coin < P` blends with probability exactly P and never when P = 0.
        blended_mask.push(coin < cfg.effective_probability(y));
        lambdas.push(lam);
    }
    let gather = |set: &Dataset, idx: &[usize]| -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * set.dim());
        for &i in idx {
            out.extend_from_slice(set.row(i));
        }
        out
    };
    let x_inputs = ssl::strong_augment_batch(&gather(x_set, &x_indices), aug, rng);
    let u_inputs = ssl::strong_augment_batch(&gather(u_set, &u_indices), aug, rng);
    Ok(TfePlan {
        dim: x_set.dim(),
        x_indices,
        u_indices,
        labels,
        blended_mask,
        lambdas,
        x_inputs,
        u_inputs,
    })
}

fn blended_rows(plan: &TfePlan) -> Vec<usize> {
    (0..plan.len()).filter(|&b| plan.blended_mask[b]).collect()
}

fn gather_rows(data: &[f64], width: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&data[r * width..(r + 1) * width]);
    }
    out
}

/// Encodes a plan with `encoder` (the momentum encoder in the shipped method).
///
/// `label_head` supplies pseudo-labels for the unlabeled partners and is
/// required only under the label-blending ablation.
pub fn realize_plan(
    plan: &TfePlan,
    encoder: &Encoder,
    cfg: &TfeConfig,
    label_head: Option<&Head>,
) -> Result<BlendedBatch> {
    let n = plan.len();
    let fd = encoder.feature_dim();
    let rows = blended_rows(plan);
    let u_feats = encoder.encode_batch(&gather_rows(&plan.u_inputs, plan.dim, &rows), rows.len());
    let features = if cfg.flags.input_level {
        encoder.encode_batch(&plan.input_blend(), n)
    } else {
        let mut z = encoder.encode_batch(&plan.x_inputs, n);
        for (r, &b) in rows.iter().enumerate() {
            let lam = plan.lambdas[b];
            for (zv, uv) in z[b * fd..(b + 1) * fd].iter_mut().zip(&u_feats[r * fd..(r + 1) * fd]) {
                *zv = lam * *zv + (1.0 - lam) * uv;
            }
        }
        z
    };
    let soft_targets = if cfg.flags.label_blending {
        let head = label_head.ok_or_else(|| {
            Error::invalid("label_head", "label blending needs a head for pseudo-labels")
        })?;
        let k = head.num_classes();
        let pseudo: Vec<usize> = head
            .logits_batch(&u_feats, rows.len())
            .chunks_exact(k)
            .map(nn::argmax)
            .collect();
        let mut soft = vec![0.0; n * k];
        for b in 0..n {
            soft[b * k + plan.labels[b]] = 1.0;
        }
        for (r, &b) in rows.iter().enumerate() {
            let lam = plan.lambdas[b];
            let row = &mut soft[b * k..(b + 1) * k];
            row.iter_mut().for_each(|p| *p *= lam);
            row[pseudo[r]] += 1.0 - lam;
        }
        Some(soft)
    } else {
        None
    };
    Ok(BlendedBatch {
        feature_dim: fd,
        features,
        labels: plan.labels.clone(),
        blended_mask: plan.blended_mask.clone(),
        lambdas: plan.lambdas.clone(),
        soft_targets,
    })
}

/// Builds one TFE classifier batch with features from `xi`.
#[allow(clippy::too_many_arguments)]
pub fn tfe_batch<R: Rng + ?Sized>(
    x_set: &Dataset,
    u_set: &Dataset,
    xi: &Encoder,
    cfg: &TfeConfig,
    aug: &AugmentConfig,
    batch: usize,
    label_head: Option<&Head>,
    rng: &mut R,
) -> Result<BlendedBatch> {
    let plan = plan_tfe_batch(x_set, u_set, cfg, aug, batch, rng)?;
    realize_plan(&plan, xi, cfg, label_head)
}

/// One Adam step on `h_c` over a blended batch; returns the pre-step `L_c`.
pub fn classifier_step(h_c: &mut Head, opt: &mut OptState, blended: &BlendedBatch) -> Result<f64> {
    if blended.is_empty() {
        return Err(Error::invalid("blended", "empty classifier batch"));
    }
    let (loss, grads, _) = nn::head_cross_entropy_and_grads(h_c, &blended.features, blended.targets(), false)?;
    opt.step(h_c, &grads);
    Ok(loss)
}

/// The stop-gradient ablation: `L_c` is computed on features from the
/// online encoder `g` and its gradient updates both `h_c` and `g`.
pub fn classifier_step_through_encoder(
    g: &mut Encoder,
    opt_g: &mut OptState,
    h_c: &mut Head,
    opt_c: &mut OptState,
    plan: &TfePlan,
    cfg: &TfeConfig,
) -> Result<f64> {
    let n = plan.len();
    let fd = g.feature_dim();
    let mut enc_grads = g.zeros_like();
    let (loss, head_grads) = if cfg.flags.input_level {
        let cache = g.forward_cached(&plan.input_blend(), n);
        let blended = cache.output().to_vec();
        let (loss, hg, gz) = nn::head_cross_entropy_and_grads(h_c, &blended, Targets::Hard(&plan.labels), true)?;
        g.backward(&cache, &gz.expect("requested"), &mut enc_grads);
        (loss, hg)
    } else {
        let x_cache = g.forward_cached(&plan.x_inputs, n);
        let u_cache = g.forward_cached(&plan.u_inputs, n);
        let mut z = x_cache.output().to_vec();
        for b in 0..n {
            if plan.blended_mask[b] {
                let lam = plan.lambdas[b];
                for (zv, uv) in z[b * fd..(b + 1) * fd].iter_mut().zip(&u_cache.output()[b * fd..(b + 1) * fd]) {
                    *zv = lam * *zv + (1.0 - lam) * uv;
                }
            }
        }
        let (loss, hg, gz) = nn::head_cross_entropy_and_grads(h_c, &z, Targets::Hard(&plan.labels), true)?;
        let gz = gz.expect("requested");
        let mut gx = gz.clone();
        let mut gu = vec![0.0; gz.len()];
        for b in 0..n {
            if plan.blended_mask[b] {
                let lam = plan.lambdas[b];
                for j in b * fd..(b + 1) * fd {
                    gx[j] = lam * gz[j];
                    gu[j] = (1.0 - lam) * gz[j];
                }
            }
        }
        g.backward(&x_cache, &gx, &mut enc_grads);
        g.backward(&u_cache, &gu, &mut enc_grads);
        (loss, hg)
    };
    opt_c.step(h_c, &head_grads);
    opt_g.step(g, &enc_grads);
    Ok(loss)
}
