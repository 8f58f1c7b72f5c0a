//! Accuracy, class recall, post-compensation and shifted-distribution sweeps.

use std::io::Write;

use crate::datagen::{self, Dataset};
use crate::error::{Error, Result};
use crate::nn::{self, Encoder, Head};

/// Metrics of one model on one labeled test set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub overall_accuracy: f64,
    pub per_class_recall: Vec<f64>,
    pub averaged_class_recall: f64,
    pub gamma_test: f64,
    pub pc_applied: bool,
}

/// Training and assumed test class priors for post-compensation.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorPair {
    p_source: Vec<f64>,
    p_target: Vec<f64>,
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(name, "entries must be finite and non-negative"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(name, format!("must sum to 1, sums to {sum}")));
    }
    Ok(())
}

impl PriorPair {
    pub fn new(p_source: Vec<f64>, p_target: Vec<f64>) -> Result<Self> {
        if p_source.len() != p_target.len() {
            return Err(Error::Shape(format!(
                "source prior has {} classes, target {}",
                p_source.len(),
                p_target.len()
            )));
        }
        check_distribution("p_source", &p_source)?;
        check_distribution("p_target", &p_target)?;
        if let Some(c) = p_source.iter().position(|&p| p == 0.0) {
            return Err(Error::invalid(
                "p_source",
                format!("class {} has zero prior; its log is undefined", c + 1),
            ));
        }
        Ok(Self { p_source, p_target })
    }

    pub fn p_source(&self) -> &[f64] {
        &self.p_source
    }

    pub fn p_target(&self) -> &[f64] {
        &self.p_target
    }

    fn offsets(&self) -> Vec<f64> {
        self.p_target
            .iter()
            .zip(&self.p_source)
            .map(|(t, s)| t.ln() - s.ln())
            .collect()
    }
}

/// `logit_k + ln p_target(k) - ln p_source(k)`.
pub fn post_compensate(logits: &[f64], pair: &PriorPair) -> Vec<f64> {
    logits
        .iter()
        .zip(pair.offsets())
        .map(|(l, o)| l + o)
        .collect()
}

/// Metrics from predictions and true labels (both 0-based).
pub fn metrics_from_predictions(predictions: &[usize], labels: &[usize], k: usize) -> Result<EvalResult> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    if let Some(c) = totals.iter().position(|&t| t == 0) {
        return Err(Error::EmptyClass { class: c + 1 });
    }
    let per_class_recall: Vec<f64> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| h as f64 / t as f64)
        .collect();
    let averaged_class_recall = per_class_recall.iter().sum::<f64>() / k as f64;
    let overall_accuracy = hits.iter().sum::<usize>() as f64 / labels.len() as f64;
    Ok(EvalResult {
        overall_accuracy,
        per_class_recall,
        averaged_class_recall,
        gamma_test: 1.0,
        pc_applied: false,
    })
}

/// Predicted classes of `(encoder, head)` on every test row.
pub fn predict(encoder: &Encoder, head: &Head, test: &Dataset, pc: Option<&PriorPair>) -> Vec<usize> {
    let z = encoder.encode_batch(test.features(), test.len());
    let logits = head.logits_batch(&z, test.len());
    logits
        .chunks_exact(head.num_classes())
        .map(|row| match pc {
            Some(pair) => nn::argmax(&post_compensate(row, pair)),
            None => nn::argmax(row),
        })
        .collect()
}

/// Accuracy and class recalls of `(encoder, head)` on a labeled test set.
pub fn evaluate(encoder: &Encoder, head: &Head, test: &Dataset, pc: Option<&PriorPair>) -> Result<EvalResult> {
    let labels = test
        .labels()
        .ok_or_else(|| Error::invalid("test", "evaluation needs labels"))?;
    if let Some(pair) = pc {
        if pair.p_source.len() != head.num_classes() {
            return Err(Error::Shape("prior pair and head disagree on K".into()));
        }
    }
    let preds = predict(encoder, head, test, pc);
    let mut r = metrics_from_predictions(&preds, labels, head.num_classes())?;
    r.pc_applied = pc.is_some();
    Ok(r)
}

/// Arithmetic mean of the last `k` entries.
pub fn last_k_average(history: &[f64], k: usize) -> Result<f64> {
    if k == 0 || history.len() < k {
        return Err(Error::invalid(
            "k",
            format!("need 1 <= k <= {} history entries, got {k}", history.len()),
        ));
    }
    Ok(history[history.len() - k..].iter().sum::<f64>() / k as f64)
}

/// Whether the test distribution is available to the evaluator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcMode {
    /// Test prior unknown. Optionally compensate toward a uniform target.
    Unknown { uniform_pc: bool },
    /// Compensate toward the true class distribution of each test set.
    Known,
}

/// One row per test ratio plus the column-wise mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<EvalResult>,
    pub mean: EvalResult,
}

/// Evaluates a model over test sets drawn from `pool` with shifted class
/// distributions, the largest class holding `cap` examples.
///
/// `p_source` is the class prior the head was effectively trained under.
#[allow(clippy::too_many_arguments)]
pub fn shifted_sweep(
    encoder: &Encoder,
    head: &Head,
    pool: &Dataset,
    gammas: &[f64],
    cap: usize,
    p_source: &[f64],
    mode: PcMode,
    seed: u64,
) -> Result<SweepTable> {
    if gammas.is_empty() {
        return Err(Error::invalid("gammas", "sweep needs at least one ratio"));
    }
    let k = head.num_classes();
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let counts = datagen::shifted_counts_for_cap(cap, gamma, k)?;
        let test = datagen::build_test_set(pool, &counts, seed)?;
        let pair = match mode {
            PcMode::Unknown { uniform_pc: false } => None,
            PcMode::Unknown { uniform_pc: true } => {
                Some(PriorPair::new(p_source.to_vec(), vec![1.0 / k as f64; k])?)
            }
            PcMode::Known => Some(PriorPair::new(p_source.to_vec(), counts.prior())?),
        };
        let mut r = evaluate(encoder, head, &test, pair.as_ref())?;
        r.gamma_test = gamma;
        rows.push(r);
    }
    let n = rows.len() as f64;
    let mean_of = |f: &dyn Fn(&EvalResult) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean = EvalResult {
        overall_accuracy: mean_of(&|r| r.overall_accuracy),
        per_class_recall: (0..k).map(|c| mean_of(&|r| r.per_class_recall[c])).collect(),
        averaged_class_recall: mean_of(&|r| r.averaged_class_recall),
        gamma_test: f64::NAN,
        pc_applied: rows.iter().any(|r| r.pc_applied),
    };
    Ok(SweepTable { rows, mean })
}

pub const SWEEP_SCHEMA: &str = "# cossl-sweep v1";

impl SweepTable {
    /// CSV with a schema comment line, one row per ratio, and a `mean` row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let k = self.mean.per_class_recall.len();
        writeln!(out, "{SWEEP_SCHEMA}")?;
        let recalls: Vec<String> = (1..=k).map(|c| format!("recall_{c}")).collect();
        writeln!(out, "gamma,overall_acc,avg_class_recall,{},pc_applied", recalls.join(","))?;
        let write_row = |out: &mut W, label: String, r: &EvalResult| -> std::io::Result<()> {
            let recalls: Vec<String> = r.per_class_recall.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(
                out,
                "{label},{:.6},{:.6},{},{}",
                r.overall_accuracy,
                r.averaged_class_recall,
                recalls.join(","),
                r.pc_applied
            )
        };
        for r in &self.rows {
            write_row(&mut out, format!("{}", r.gamma_test), r)?;
        }
        write_row(&mut out, "mean".to_string(), &self.mean)
    }
}
