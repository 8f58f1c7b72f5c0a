//! The co-learning training loop and its baselines.
//!
//! A run starts with plain FixMatch-style steps on `(g, h_r)`. Once the
//! warm-up boundary is crossed every step also trains a separate classifier
//! head `h_c` on blended momentum-encoder features, and pseudo-labels come
//! from `(xi, h_c)`. The two heads never exchange gradients: `h_c` sees only
//! `L_c`, and `(g, h_r)` see only `L_x + L_u`.

use crate::config::{EncoderChoice, Mode, TrainConfig};
use crate::datagen::{self, ClassDistribution, Dataset};
use crate::error::{Error, Result};
use crate::eval::{self, EvalResult};
use crate::nn::{self, EmaState, Encoder, Head, OptState, Params};
use crate::rng::{self, RunRngs};
use crate::sampling::{self, SamplerKind};
use crate::ssl::{self, AugmentConfig, PseudoLabel};
use crate::tfe::{self, TfeConfig, TfeFlags};

/// Training and evaluation sets of one run.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    /// Class-balanced test set.
    pub test: Dataset,
    /// Pool examples outside both training splits, for shifted test sets.
    pub holdout: Dataset,
    pub labeled_counts: ClassDistribution,
}

impl TrainData {
    /// Builds the synthetic long-tailed benchmark described by `cfg`.
    pub fn synthetic(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.cossl.seed;
        let pool = datagen::make_mixture_pool(&cfg.mixture(), seed)?;
        let imb = cfg.imbalance();
        let labeled_counts = imb.labeled_counts()?;
        let splits = datagen::carve_splits(&pool, &labeled_counts, &imb.unlabeled_counts()?, seed)?;
        let test = datagen::build_test_set(
            &splits.remainder,
            &ClassDistribution::uniform(cfg.data.test_per_class, cfg.data.k)?,
            seed,
        )?;
        Ok(Self {
            labeled: splits.labeled,
            unlabeled: splits.unlabeled,
            test,
            holdout: splits.remainder,
            labeled_counts,
        })
    }

    /// Wraps externally prepared sets.
    pub fn new(labeled: Dataset, unlabeled: Dataset, test: Dataset, holdout: Dataset) -> Result<Self> {
        let counts = labeled
            .class_counts()
            .ok_or_else(|| Error::invalid("labeled", "labels must be visible"))?;
        Ok(Self {
            labeled_counts: ClassDistribution::new(counts)?,
            labeled,
            unlabeled,
            test,
            holdout,
        })
    }

    /// Empirical class prior of the labeled set.
    pub fn labeled_prior(&self) -> Vec<f64> {
        self.labeled_counts.prior()
    }
}

/// Sub-steps of a training iteration, reported to step observers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// `L_c` computed and `h_c` updated.
    Classifier,
    /// Pseudo-labels generated for the unlabeled batch.
    PseudoLabel,
    /// Momentum encoder updated.
    Ema,
    /// `L_x + L_u` computed and `(g, h_r)` updated.
    Representation,
}

/// Per-step losses and pseudo-label diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub l_x: f64,
    pub l_u: f64,
    pub l_c: Option<f64>,
    pub accepted: usize,
    pub accepted_correct: usize,
    pub batch: usize,
}

/// Everything a run mutates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub g: Encoder,
    pub h_r: Head,
    pub h_c: Head,
    pub ema: EmaState,
    pub opt_g: OptState,
    pub opt_hr: OptState,
    pub opt_hc: OptState,
    pub step: u64,
    pub rngs: RunRngs,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, input_dim: usize, k: usize) -> Result<Self> {
        let mut rngs = RunRngs::new(cfg.cossl.seed);
        let m = &cfg.model;
        let g = Encoder::init(input_dim, m.hidden, m.feature_dim, m.activation, &mut rngs.init);
        let h_r = Head::init(m.feature_dim, k, &mut rngs.init);
        // Untouched until co-learning starts, so it enters that phase as a
        // freshly initialized head.
        let h_c = Head::init(m.feature_dim, k, &mut rngs.classifier_init);
        let ema = EmaState::new(&g, cfg.cossl.ema_momentum)?;
        Ok(Self {
            opt_g: OptState::new(&g, m.adam()),
            opt_hr: OptState::new(&h_r, m.adam()),
            opt_hc: OptState::new(&h_c, m.adam_classifier()),
            g,
            h_r,
            h_c,
            ema,
            step: 0,
            rngs,
        })
    }

    /// Checksums of `(g, h_r, h_c, xi)`.
    pub fn checksums(&self) -> ParamChecksums {
        ParamChecksums {
            g: self.g.checksum(),
            h_r: self.h_r.checksum(),
            h_c: self.h_c.checksum(),
            xi: self.ema.shadow.checksum(),
        }
    }

    /// Saves every parameter set under stable names.
    pub fn to_checkpoint(&self, mode: Mode) -> nn::Checkpoint {
        let mut c = nn::Checkpoint::default();
        c.meta.insert("mode".into(), mode.to_string());
        c.meta.insert("step".into(), self.step.to_string());
        c.push_encoder("g", &self.g);
        c.push_encoder("xi", &self.ema.shadow);
        c.push_head("h_r", &self.h_r);
        c.push_head("h_c", &self.h_c);
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamChecksums {
    pub g: u64,
    pub h_r: u64,
    pub h_c: u64,
    pub xi: u64,
}

/// The step functions and the fixed data they draw from.
pub struct Trainer<'a> {
    pub cfg: &'a TrainConfig,
    pub data: &'a TrainData,
    pub tfe: TfeConfig,
    pub aug: AugmentConfig,
}

fn no_observer(_: Phase, _: &TrainState) {}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, data: &'a TrainData) -> Result<Self> {
        cfg.validate()?;
        let flags = TfeFlags {
            force_blend: cfg.tfe.force_blend,
            label_blending: cfg.tfe.label_blending,
            input_level: cfg.tfe.input_level_blend,
        };
        let tfe = TfeConfig::new(cfg.tfe.mu, data.labeled_counts.clone())?.with_flags(flags);
        Ok(Self {
            cfg,
            data,
            tfe,
            aug: cfg.ssl.augment(),
        })
    }

    pub fn init_state(&self) -> Result<TrainState> {
        TrainState::new(self.cfg, self.data.labeled.dim(), self.data.labeled.num_classes())
    }

    /// Pseudo-labels plus the representation update shared by both phases.
    fn representation_update(
        &self,
        state: &mut TrainState,
        pl_head: PlHead,
        observe: &mut dyn FnMut(Phase, &TrainState),
    ) -> Result<StepReport> {
        let b = self.cfg.cossl.batch;
        let x = sampling::sample_batch(&self.data.labeled, &SamplerKind::Random, b, &mut state.rngs.labeled)?;
        let u = sampling::sample_batch(&self.data.unlabeled, &SamplerKind::Random, b, &mut state.rngs.unlabeled)?;

        let pl_encoder = match pl_head {
            PlHead::Representation(EncoderChoice::Online) => &state.g,
            _ => &state.ema.shadow,
        };
        let head = match pl_head {
            PlHead::Classifier => &state.h_c,
            PlHead::Representation(_) => &state.h_r,
        };
        let pseudo = ssl::pseudo_label_batch(pl_encoder, head, &u.features, self.cfg.ssl.tau, &self.aug, &mut state.rngs.augment)?;
        let (accepted, accepted_correct) = pseudo_label_quality(&pseudo, &u, &self.data.unlabeled);
        observe(Phase::PseudoLabel, state);

        if !self.cfg.cossl.ema_after_update {
            state.ema.update(&state.g);
            observe(Phase::Ema, state);
        }

        let step = state.step;
        let (l_x, mut grads) = ssl::supervised_loss(&state.g, &state.h_r, &x, &self.aug, &mut state.rngs.augment)
            .map_err(|e| e.at_step(step))?;
        let (l_u, grads_u) = ssl::unlabeled_loss(&state.g, &state.h_r, &u, &pseudo, &self.aug, &mut state.rngs.augment)
            .map_err(|e| e.at_step(step))?;
        grads.accumulate(&grads_u);
        let enc_grads = grads.encoder.expect("full gradient mode");
        state.opt_g.step(&mut state.g, &enc_grads);
        state.opt_hr.step(&mut state.h_r, &grads.head);
        if !(state.g.all_finite() && state.h_r.all_finite()) {
            return Err(Error::NumericalFailure {
                step,
                detail: format!("parameters diverged (L_x = {l_x}, L_u = {l_u})"),
            });
        }
        observe(Phase::Representation, state);

        if self.cfg.cossl.ema_after_update {
            state.ema.update(&state.g);
            observe(Phase::Ema, state);
        }
        state.step += 1;
        Ok(StepReport {
            l_x,
            l_u,
            l_c: None,
            accepted,
            accepted_correct,
            batch: b,
        })
    }

    /// One plain SSL step. `h_c` is not touched.
    pub fn warmup_step(&self, state: &mut TrainState) -> Result<StepReport> {
        self.warmup_step_observed(state, &mut no_observer)
    }

    pub fn warmup_step_observed(
        &self,
        state: &mut TrainState,
        observe: &mut dyn FnMut(Phase, &TrainState),
    ) -> Result<StepReport> {
        self.representation_update(state, PlHead::Representation(self.cfg.ssl.warmup_pl_encoder), observe)
    }

    /// One co-learning step: classifier update on a TFE batch, pseudo-labels
    /// from `(xi, h_c)`, momentum update, then the `(g, h_r)` update.
    pub fn cossl_step(&self, state: &mut TrainState) -> Result<StepReport> {
        self.cossl_step_observed(state, &mut no_observer)
    }

    pub fn cossl_step_observed(
        &self,
        state: &mut TrainState,
        observe: &mut dyn FnMut(Phase, &TrainState),
    ) -> Result<StepReport> {
        let step = state.step;
        let b = self.cfg.cossl.batch;
        let plan = tfe::plan_tfe_batch(&self.data.labeled, &self.data.unlabeled, &self.tfe, &self.aug, b, &mut state.rngs.tfe)?;
        let l_c = if self.cfg.cossl.allow_grad {
            tfe::classifier_step_through_encoder(
                &mut state.g,
                &mut state.opt_g,
                &mut state.h_c,
                &mut state.opt_hc,
                &plan,
                &self.tfe,
            )
        } else {
            let blended = tfe::realize_plan(&plan, &state.ema.shadow, &self.tfe, Some(&state.h_c))?;
            tfe::classifier_step(&mut state.h_c, &mut state.opt_hc, &blended)
        }
        .map_err(|e| e.at_step(step))?;
        observe(Phase::Classifier, state);

        let pl_head = if self.cfg.cossl.pl_from_hr {
            PlHead::Representation(EncoderChoice::Ema)
        } else {
            PlHead::Classifier
        };
        let mut report = self.representation_update(state, pl_head, observe)?;
        report.l_c = Some(l_c);
        Ok(report)
    }

    /// Whether the step about to run is a co-learning step.
    pub fn is_cossl_step(&self, step: u64) -> bool {
        self.cfg.cossl.mode == Mode::Cossl && step >= self.cfg.warmup_boundary()
    }

    /// Runs whichever step `state.step` calls for.
    pub fn step(&self, state: &mut TrainState) -> Result<StepReport> {
        self.step_observed(state, &mut no_observer)
    }

    pub fn step_observed(
        &self,
        state: &mut TrainState,
        observe: &mut dyn FnMut(Phase, &TrainState),
    ) -> Result<StepReport> {
        if self.is_cossl_step(state.step) {
            self.cossl_step_observed(state, observe)
        } else {
            self.warmup_step_observed(state, observe)
        }
    }

    /// The encoder/head pair that is evaluated after the current step.
    pub fn eval_model<'s>(&self, state: &'s TrainState) -> (&'s Encoder, &'s Head) {
        if self.cfg.cossl.mode == Mode::Cossl && state.step > self.cfg.warmup_boundary() {
            (&state.ema.shadow, &state.h_c)
        } else {
            let enc = match self.cfg.cossl.vanilla_eval_encoder {
                EncoderChoice::Ema => &state.ema.shadow,
                EncoderChoice::Online => &state.g,
            };
            (enc, &state.h_r)
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum PlHead {
    Classifier,
    Representation(EncoderChoice),
}

fn pseudo_label_quality(pseudo: &[PseudoLabel], u: &sampling::Batch, set: &Dataset) -> (usize, usize) {
    let truth = set.hidden_truth();
    let mut accepted = 0;
    let mut correct = 0;
    for (p, &i) in pseudo.iter().zip(&u.indices) {
        if p.accepted {
            accepted += 1;
            if truth.is_some_and(|t| t[i] == p.class) {
                correct += 1;
            }
        }
    }
    (accepted, correct)
}

/// One row of the per-epoch history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub l_x: Option<f64>,
    pub l_u: Option<f64>,
    pub l_c: Option<f64>,
    pub eval: EvalResult,
    pub pseudo_accept_rate: Option<f64>,
    pub pseudo_precision: Option<f64>,
}

#[derive(Default)]
struct EpochAccumulator {
    steps: usize,
    l_x: f64,
    l_u: f64,
    l_c: f64,
    l_c_steps: usize,
    accepted: usize,
    correct: usize,
    seen: usize,
}

impl EpochAccumulator {
    fn add(&mut self, r: &StepReport) {
        self.steps += 1;
        self.l_x += r.l_x;
        self.l_u += r.l_u;
        if let Some(c) = r.l_c {
            self.l_c += c;
            self.l_c_steps += 1;
        }
        self.accepted += r.accepted;
        self.correct += r.accepted_correct;
        self.seen += r.batch;
    }

    fn finish(self, epoch: u64, eval: EvalResult) -> EpochMetrics {
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        EpochMetrics {
            epoch,
            l_x: mean(self.l_x, self.steps),
            l_u: mean(self.l_u, self.steps),
            l_c: mean(self.l_c, self.l_c_steps),
            eval,
            pseudo_accept_rate: mean(self.accepted as f64, self.seen),
            pseudo_precision: mean(self.correct as f64, self.accepted),
        }
    }
}

/// The model a run hands over for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalModel {
    pub encoder: Encoder,
    pub head: Head,
    /// Class prior the head was effectively trained under; the source side
    /// of post-compensation.
    pub training_prior: Vec<f64>,
}

impl EvalModel {
    pub fn to_checkpoint(&self) -> nn::Checkpoint {
        let mut c = nn::Checkpoint::default();
        c.push_encoder("eval.encoder", &self.encoder);
        c.push_head("eval.head", &self.head);
        let prior: Vec<String> = self.training_prior.iter().map(|p| format!("{p:?}")).collect();
        c.meta.insert("eval.training_prior".into(), prior.join(","));
        c
    }

    pub fn from_checkpoint(c: &nn::Checkpoint) -> Result<Self> {
        let encoder = c.encoder("eval.encoder")?;
        let head = c.head("eval.head")?;
        let prior = c
            .meta
            .get("eval.training_prior")
            .ok_or_else(|| Error::invalid("checkpoint", "missing `eval.training_prior`"))?;
        let training_prior = prior
            .split(',')
            .map(|p| p.parse::<f64>().map_err(|e| Error::invalid("checkpoint", e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            encoder,
            head,
            training_prior,
        })
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EvalModel,
    pub history: Vec<EpochMetrics>,
    pub state: TrainState,
    /// Mean over the last `tail_epochs` epochs of the averaged class recall.
    pub final_avg_class_recall: f64,
    /// Per-class recall averaged over the same epochs.
    pub final_per_class_recall: Vec<f64>,
}

impl TrainOutcome {
    pub fn tail_recall(&self, classes: &[usize]) -> f64 {
        classes.iter().map(|&c| self.final_per_class_recall[c]).sum::<f64>() / classes.len() as f64
    }
}

fn summarize(history: &[EpochMetrics], tail: usize) -> Result<(f64, Vec<f64>)> {
    let tail = tail.min(history.len());
    let acr: Vec<f64> = history.iter().map(|h| h.eval.averaged_class_recall).collect();
    let final_acr = eval::last_k_average(&acr, tail)?;
    let k = history[0].eval.per_class_recall.len();
    let per_class = (0..k)
        .map(|c| {
            let series: Vec<f64> = history.iter().map(|h| h.eval.per_class_recall[c]).collect();
            eval::last_k_average(&series, tail)
        })
        .collect::<Result<_>>()?;
    Ok((final_acr, per_class))
}

/// Trains in the configured mode, evaluating on the uniform test set after
/// every epoch. `on_epoch` sees each history row as it is produced.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let trainer = Trainer::new(cfg, data)?;
    let mut state = trainer.init_state()?;
    let mut history = Vec::new();
    let total = cfg.cossl.total_steps;
    let per_epoch = cfg.cossl.steps_per_epoch;
    let mut epoch = 0;
    while state.step < total {
        let mut acc = EpochAccumulator::default();
        let end = (state.step + per_epoch).min(total);
        while state.step < end {
            let r = trainer.step(&mut state)?;
            acc.add(&r);
        }
        epoch += 1;
        let (enc, head) = trainer.eval_model(&state);
        let result = eval::evaluate(enc, head, &data.test, None)?;
        let row = acc.finish(epoch, result);
        on_epoch(&row);
        history.push(row);
    }

    let model = match cfg.cossl.mode {
        Mode::Cossl => EvalModel {
            encoder: state.ema.shadow.clone(),
            head: state.h_c.clone(),
            training_prior: uniform(data.labeled.num_classes()),
        },
        Mode::Vanilla | Mode::Crt => {
            let (enc, head) = trainer.eval_model(&state);
            EvalModel {
                encoder: enc.clone(),
                head: head.clone(),
                training_prior: data.labeled_prior(),
            }
        }
    };

    let (final_avg_class_recall, final_per_class_recall) = summarize(&history, cfg.eval.tail_epochs)?;
    let outcome = TrainOutcome {
        model,
        history,
        state,
        final_avg_class_recall,
        final_per_class_recall,
    };
    if cfg.cossl.mode == Mode::Crt {
        crt_stage(cfg, data, outcome, on_epoch)
    } else {
        Ok(outcome)
    }
}

/// Second stage of the two-stage baseline: freezes the encoder of a finished
/// run, retrains a fresh head with [`crt_retrain`], and appends the
/// retraining epochs to the history. The summary covers those epochs.
pub fn crt_stage(
    cfg: &TrainConfig,
    data: &TrainData,
    base: TrainOutcome,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let TrainOutcome {
        model, mut history, state, ..
    } = base;
    let first_epoch = history.last().map_or(0, |h| h.epoch);
    let mut rng = rng::stream(cfg.cossl.seed, rng::Role::Tfe);
    let crt = CrtConfig::from_train_config(cfg);
    let head = crt_retrain(
        &model.encoder,
        &data.labeled,
        Some(&data.unlabeled),
        &crt,
        &mut rng,
        |e, head| {
            let row = EpochMetrics {
                epoch: first_epoch + e,
                l_x: None,
                l_u: None,
                l_c: None,
                eval: eval::evaluate(&model.encoder, head, &data.test, None)?,
                pseudo_accept_rate: None,
                pseudo_precision: None,
            };
            on_epoch(&row);
            history.push(row);
            Ok(())
        },
    )?;
    let model = EvalModel {
        encoder: model.encoder,
        head,
        training_prior: uniform(data.labeled.num_classes()),
    };
    let tail = cfg.eval.tail_epochs.min(crt.epochs as usize).max(1);
    let (final_avg_class_recall, final_per_class_recall) = summarize(&history, tail)?;
    Ok(TrainOutcome {
        model,
        history,
        state,
        final_avg_class_recall,
        final_per_class_recall,
    })
}

fn uniform(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

/// Settings of a classifier retraining pass on a frozen encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct CrtConfig {
    pub epochs: u64,
    pub steps_per_epoch: u64,
    pub batch: usize,
    pub use_tfe: bool,
    pub mu: f64,
    pub aug: AugmentConfig,
    pub adam: nn::AdamConfig,
}

impl CrtConfig {
    pub fn from_train_config(cfg: &TrainConfig) -> Self {
        Self {
            epochs: cfg.cossl.crt_epochs,
            steps_per_epoch: cfg.cossl.steps_per_epoch,
            batch: cfg.cossl.batch,
            use_tfe: cfg.cossl.crt_use_tfe,
            mu: cfg.tfe.mu,
            aug: cfg.ssl.augment(),
            adam: cfg.model.adam_classifier(),
        }
    }
}

/// Trains a freshly initialized head on the frozen `encoder` with
/// class-balanced batches, optionally blended with unlabeled features.
/// `on_epoch(epoch, head)` runs after each epoch (1-based).
pub fn crt_retrain<R: rand::Rng + ?Sized>(
    encoder: &Encoder,
    labeled: &Dataset,
    unlabeled: Option<&Dataset>,
    cfg: &CrtConfig,
    rng: &mut R,
    mut on_epoch: impl FnMut(u64, &Head) -> Result<()>,
) -> Result<Head> {
    let counts = ClassDistribution::new(
        labeled
            .class_counts()
            .ok_or_else(|| Error::invalid("labeled", "labels must be visible"))?,
    )?;
    let (tfe_cfg, partners) = if cfg.use_tfe {
        let u = unlabeled.ok_or_else(|| Error::invalid("unlabeled", "TFE retraining needs an unlabeled set"))?;
        (TfeConfig::new(cfg.mu, counts)?, u)
    } else {
        (TfeConfig::never_blend(cfg.mu, counts)?, unlabeled.unwrap_or(labeled))
    };
    let mut head = Head::init(encoder.feature_dim(), labeled.num_classes(), rng);
    let mut opt = OptState::new(&head, cfg.adam);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            let blended = tfe::tfe_batch(labeled, partners, encoder, &tfe_cfg, &cfg.aug, cfg.batch, None, rng)?;
            tfe::classifier_step(&mut head, &mut opt, &blended).map_err(|e| e.at_step(step))?;
            step += 1;
        }
        on_epoch(epoch, &head)?;
    }
    Ok(head)
}

pub const METRICS_SCHEMA: &str = "# cossl-metrics v1";

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Writes the schema line and column header of the metrics CSV.
pub fn write_metrics_header<W: std::io::Write>(mut out: W) -> std::io::Result<()> {
    writeln!(out, "{METRICS_SCHEMA}")?;
    writeln!(
        out,
        "epoch,L_x,L_u,L_c,uniform_acc,avg_class_recall,pseudo_accept_rate,pseudo_precision"
    )
}

/// Writes one metrics CSV row; missing values are empty fields.
pub fn write_metrics_row<W: std::io::Write>(h: &EpochMetrics, mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "{},{},{},{},{:.6},{:.6},{},{}",
        h.epoch,
        opt_field(h.l_x),
        opt_field(h.l_u),
        opt_field(h.l_c),
        h.eval.overall_accuracy,
        h.eval.averaged_class_recall,
        opt_field(h.pseudo_accept_rate),
        opt_field(h.pseudo_precision)
    )
}

/// Writes the per-epoch history as CSV.
pub fn write_metrics_csv<W: std::io::Write>(history: &[EpochMetrics], mut out: W) -> std::io::Result<()> {
    write_metrics_header(&mut out)?;
    for h in history {
        write_metrics_row(h, &mut out)?;
    }
    Ok(())
}
