//! Run configuration. Every field has a documented default; sections mirror
//! the pipeline stages.

use serde::{Deserialize, Serialize};

use crate::datagen::{ImbalanceSpec, MixtureSpec};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamConfig};
use crate::ssl::AugmentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Co-learning: warm-up, then TFE classifier plus classifier pseudo-labels.
    Cossl,
    /// Plain FixMatch-style training of `(g, h_r)`.
    Vanilla,
    /// Vanilla training followed by classifier retraining on the frozen encoder.
    Crt,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Cossl => "cossl",
            Mode::Vanilla => "vanilla",
            Mode::Crt => "crt",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cossl" => Ok(Mode::Cossl),
            "vanilla" => Ok(Mode::Vanilla),
            "crt" => Ok(Mode::Crt),
            other => Err(Error::invalid("mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// Which encoder a role reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderChoice {
    /// The momentum encoder `xi`.
    Ema,
    /// The online encoder `g`.
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub k: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub pool_per_class: usize,
    pub n1: usize,
    pub m1: usize,
    pub gamma_l: f64,
    pub gamma_u: f64,
    /// Examples per class in the uniform test set.
    pub test_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            k: 10,
            dim: 16,
            separation: 3.0,
            noise_sigma: 1.0,
            pool_per_class: 3000,
            n1: 150,
            m1: 1500,
            gamma_l: 100.0,
            gamma_u: 100.0,
            test_per_class: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub feature_dim: usize,
    pub activation: Activation,
    /// Adam learning rate of `(g, h_r)`.
    pub lr: f64,
    /// Adam learning rate of `h_c`.
    pub lr_classifier: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            hidden: 64,
            feature_dim: 32,
            activation: Activation::Relu,
            lr: adam.lr,
            lr_classifier: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        }
    }
}

impl ModelConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn adam_classifier(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_classifier,
            ..self.adam()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    /// Confidence threshold for accepting a pseudo-label.
    pub tau: f64,
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub mask_prob: f64,
    /// Encoder used for pseudo-labels before co-learning starts.
    pub warmup_pl_encoder: EncoderChoice,
}

impl Default for SslConfig {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        Self {
            tau: 0.95,
            weak_sigma: aug.weak_sigma,
            strong_sigma: aug.strong_sigma,
            mask_prob: aug.mask_prob,
            warmup_pl_encoder: EncoderChoice::Ema,
        }
    }
}

impl SslConfig {
    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            weak_sigma: self.weak_sigma,
            strong_sigma: self.strong_sigma,
            mask_prob: self.mask_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TfeSection {
    /// Lower bound of the fusion-factor interval.
    pub mu: f64,
    /// Ablation: blend every slot regardless of class.
    pub force_blend: bool,
    /// Ablation: blend labels with the unlabeled partner's pseudo-label.
    pub label_blending: bool,
    /// Ablation: blend raw inputs instead of representations.
    pub input_level_blend: bool,
}

impl Default for TfeSection {
    fn default() -> Self {
        Self {
            mu: 0.6,
            force_blend: false,
            label_blending: false,
            input_level_blend: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CosslConfig {
    pub mode: Mode,
    pub seed: u64,
    pub total_steps: u64,
    pub steps_per_epoch: u64,
    pub batch: usize,
    /// Fraction of steps spent in plain SSL before co-learning starts.
    pub warmup_fraction: f64,
    pub ema_momentum: f64,
    /// Update the momentum encoder after the `(g, h_r)` step instead of before it.
    pub ema_after_update: bool,
    /// Ablation: let the classifier loss update the online encoder.
    pub allow_grad: bool,
    /// Ablation: pseudo-labels from `h_r` instead of `h_c` during co-learning.
    pub pl_from_hr: bool,
    /// Epochs of classifier retraining in `crt` mode.
    pub crt_epochs: u64,
    /// Retrain the classifier with feature blending in `crt` mode.
    pub crt_use_tfe: bool,
    /// Encoder evaluated (and frozen for retraining) in `vanilla`/`crt` modes.
    pub vanilla_eval_encoder: EncoderChoice,
}

impl Default for CosslConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Cossl,
            seed: 0,
            total_steps: 20_000,
            steps_per_epoch: 200,
            batch: 64,
            warmup_fraction: 0.8,
            ema_momentum: 0.999,
            ema_after_update: false,
            allow_grad: false,
            pl_from_hr: false,
            crt_epochs: 20,
            crt_use_tfe: false,
            vanilla_eval_encoder: EncoderChoice::Online,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of final epochs averaged into the reported metric.
    pub tail_epochs: usize,
    pub sweep: bool,
    pub sweep_gammas: Vec<f64>,
    /// Size of the largest class in each shifted test set.
    pub sweep_cap: usize,
    /// Unknown-distribution rows compensate toward a uniform prior.
    pub pc_unknown_uniform: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tail_epochs: 20,
            sweep: false,
            sweep_gammas: vec![64.0, 16.0, 4.0, 1.0, -4.0, -16.0, -64.0],
            sweep_cap: 1000,
            pc_unknown_uniform: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub ssl: SslConfig,
    pub tfe: TfeSection,
    pub cossl: CosslConfig,
    pub eval: EvalConfig,
}

fn range_check(name: &str, ok: bool, legal: &str, got: impl std::fmt::Display) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be {legal}, got {got}")))
    }
}

fn unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        range_check("data.k", d.k >= 2, ">= 2", d.k)?;
        range_check("data.dim", d.dim >= 1, ">= 1", d.dim)?;
        range_check("data.separation", d.separation > 0.0 && d.separation.is_finite(), "> 0", d.separation)?;
        range_check("data.noise_sigma", d.noise_sigma > 0.0 && d.noise_sigma.is_finite(), "> 0", d.noise_sigma)?;
        range_check("data.n1", d.n1 >= 1, ">= 1", d.n1)?;
        range_check("data.m1", d.m1 >= 1, ">= 1", d.m1)?;
        range_check("data.gamma_l", d.gamma_l >= 1.0 && d.gamma_l.is_finite(), ">= 1", d.gamma_l)?;
        range_check("data.gamma_u", d.gamma_u >= 1.0 && d.gamma_u.is_finite(), ">= 1", d.gamma_u)?;
        range_check("data.test_per_class", d.test_per_class >= 1, ">= 1", d.test_per_class)?;
        let needed = d.n1 + d.m1 + d.test_per_class;
        range_check(
            "data.pool_per_class",
            d.pool_per_class >= needed,
            &format!(">= n1 + m1 + test_per_class = {needed}"),
            d.pool_per_class,
        )?;

        let m = &self.model;
        range_check("model.hidden", m.hidden >= 1, ">= 1", m.hidden)?;
        range_check("model.feature_dim", m.feature_dim >= 1, ">= 1", m.feature_dim)?;
        range_check("model.lr", m.lr >= 0.0 && m.lr.is_finite(), ">= 0", m.lr)?;
        range_check("model.lr_classifier", m.lr_classifier >= 0.0 && m.lr_classifier.is_finite(), ">= 0", m.lr_classifier)?;
        range_check("model.beta1", (0.0..1.0).contains(&m.beta1), "in [0, 1)", m.beta1)?;
        range_check("model.beta2", (0.0..1.0).contains(&m.beta2), "in [0, 1)", m.beta2)?;
        range_check("model.eps", m.eps > 0.0, "> 0", m.eps)?;

        let s = &self.ssl;
        range_check("ssl.tau", unit(s.tau), "in [0, 1]", s.tau)?;
        range_check("ssl.weak_sigma", s.weak_sigma >= 0.0 && s.weak_sigma.is_finite(), ">= 0", s.weak_sigma)?;
        range_check(
            "ssl.strong_sigma",
            s.strong_sigma >= s.weak_sigma && s.strong_sigma.is_finite(),
            ">= ssl.weak_sigma",
            s.strong_sigma,
        )?;
        range_check("ssl.mask_prob", unit(s.mask_prob), "in [0, 1]", s.mask_prob)?;

        range_check("tfe.mu", unit(self.tfe.mu), "in [0, 1]", self.tfe.mu)?;

        let c = &self.cossl;
        range_check("cossl.total_steps", c.total_steps >= 1, ">= 1", c.total_steps)?;
        range_check("cossl.steps_per_epoch", c.steps_per_epoch >= 1, ">= 1", c.steps_per_epoch)?;
        range_check("cossl.batch", c.batch >= 1, ">= 1", c.batch)?;
        range_check("cossl.warmup_fraction", unit(c.warmup_fraction), "in [0, 1]", c.warmup_fraction)?;
        range_check("cossl.ema_momentum", (0.0..1.0).contains(&c.ema_momentum), "in [0, 1)", c.ema_momentum)?;
        range_check("cossl.crt_epochs", c.crt_epochs >= 1, ">= 1", c.crt_epochs)?;

        let e = &self.eval;
        range_check("eval.tail_epochs", e.tail_epochs >= 1, ">= 1", e.tail_epochs)?;
        range_check("eval.sweep_cap", e.sweep_cap >= 1, ">= 1", e.sweep_cap)?;
        if e.sweep {
            let held = d.pool_per_class - d.n1 - d.m1;
            range_check(
                "eval.sweep_cap",
                e.sweep_cap <= held,
                &format!("<= pool_per_class - n1 - m1 = {held}"),
                e.sweep_cap,
            )?;
        }
        for &g in &e.sweep_gammas {
            range_check("eval.sweep_gammas", g.abs() >= 1.0 && g.is_finite(), "|gamma| >= 1", g)?;
        }
        Ok(())
    }

    pub fn mixture(&self) -> MixtureSpec {
        MixtureSpec {
            k: self.data.k,
            d: self.data.dim,
            separation: self.data.separation,
            noise_sigma: self.data.noise_sigma,
            pool_per_class: self.data.pool_per_class,
        }
    }

    pub fn imbalance(&self) -> ImbalanceSpec {
        ImbalanceSpec {
            n1: self.data.n1,
            m1: self.data.m1,
            gamma_l: self.data.gamma_l,
            gamma_u: self.data.gamma_u,
            k: self.data.k,
        }
    }

    /// Number of epochs `train` evaluates for the configured mode.
    pub fn epochs(&self) -> u64 {
        self.cossl.total_steps.div_ceil(self.cossl.steps_per_epoch)
    }

    /// First step at which co-learning is active.
    pub fn warmup_boundary(&self) -> u64 {
        let b = (self.cossl.warmup_fraction * self.cossl.total_steps as f64).round() as u64;
        b.min(self.cossl.total_steps)
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::AllowGrad => self.cossl.allow_grad = true,
            Ablation::PlFromHr => self.cossl.pl_from_hr = true,
            Ablation::NoBlendProb => self.tfe.force_blend = true,
            Ablation::LabelBlending => self.tfe.label_blending = true,
            Ablation::InputLevelBlend => self.tfe.input_level_blend = true,
        }
    }
}

/// Degraded variants of the co-learning method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Classifier loss gradients flow into the encoder.
    AllowGrad,
    /// Pseudo-labels come from `h_r` instead of `h_c`.
    PlFromHr,
    /// Every slot is blended (`P_k = 1`).
    NoBlendProb,
    /// Labels are blended with pseudo-labels.
    LabelBlending,
    /// Raw inputs are blended instead of representations.
    InputLevelBlend,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::AllowGrad,
        Ablation::PlFromHr,
        Ablation::NoBlendProb,
        Ablation::LabelBlending,
        Ablation::InputLevelBlend,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Ablation::AllowGrad => "allow_grad",
            Ablation::PlFromHr => "pl_from_hr",
            Ablation::NoBlendProb => "no_blend_prob",
            Ablation::LabelBlending => "label_blending",
            Ablation::InputLevelBlend => "input_level_blend",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| {
                let tags: Vec<&str> = Ablation::ALL.iter().map(|a| a.tag()).collect();
                Error::invalid("ablation", format!("unknown ablation `{s}` (expected one of {})", tags.join(", ")))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        assert_eq!(TrainConfig::default().warmup_boundary(), 16_000);
        assert_eq!(TrainConfig::default().epochs(), 100);
    }

    #[test]
    fn mu_out_of_range_names_field() {
        let mut c = TrainConfig::default();
        c.tfe.mu = 1.5;
        match c.validate() {
            Err(Error::InvalidParameter { name, reason }) => {
                assert_eq!(name, "tfe.mu");
                assert!(reason.contains("[0, 1]"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ablation_tags_roundtrip() {
        for a in Ablation::ALL {
            assert_eq!(a.tag().parse::<Ablation>().unwrap(), a);
        }
        assert!("bogus".parse::<Ablation>().is_err());
    }
}
