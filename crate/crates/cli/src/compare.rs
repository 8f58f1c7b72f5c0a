//! Mean and standard deviation of run summaries, grouped by mode.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Result;

use crate::run::{self, RunSummary};

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub label: String,
    pub seeds: Vec<u64>,
    /// `(metric, mean, std)` rows.
    pub metrics: Vec<(&'static str, f64, f64)>,
}

fn metrics_of(s: &RunSummary) -> Vec<(&'static str, Option<f64>)> {
    vec![
        ("avg_class_recall", Some(s.avg_class_recall)),
        ("tail_recall", Some(s.tail_recall)),
        ("final_uniform_acc", Some(s.final_uniform_acc)),
        ("sweep_mean_acc", s.sweep_mean_acc),
        ("sweep_known_mean_acc", s.sweep_known_mean_acc),
    ]
}

/// Groups summaries by label and reduces every metric present in all of
/// a group's runs.
pub fn group(summaries: &[(String, RunSummary)]) -> Vec<GroupStats> {
    let mut groups: BTreeMap<&str, Vec<&RunSummary>> = BTreeMap::new();
    for (label, s) in summaries {
        groups.entry(label).or_default().push(s);
    }
    groups
        .into_iter()
        .map(|(label, runs)| {
            let names = metrics_of(runs[0]);
            let metrics = names
                .iter()
                .enumerate()
                .filter_map(|(i, (name, _))| {
                    let values: Option<Vec<f64>> = runs.iter().map(|r| metrics_of(r)[i].1).collect();
                    values.map(|v| {
                        let (m, s) = mean_std(&v);
                        (*name, m, s)
                    })
                })
                .collect();
            GroupStats {
                label: label.to_string(),
                seeds: runs.iter().map(|r| r.seed).collect(),
                metrics,
            }
        })
        .collect()
}

/// Reads `summary.json` from each directory, labelled by run mode.
pub fn load(dirs: &[PathBuf]) -> Result<Vec<(String, RunSummary)>> {
    dirs.iter()
        .map(|d| {
            let s = run::read_summary(d)?;
            Ok((s.mode.to_string(), s))
        })
        .collect()
}

/// Plain-text table, values in percentage points.
pub fn render(groups: &[GroupStats]) -> String {
    let mut out = String::new();
    for g in groups {
        let _ = writeln!(out, "{} (n = {}, seeds {:?})", g.label, g.seeds.len(), g.seeds);
        for (name, m, s) in &g.metrics {
            let _ = writeln!(out, "  {name:<22} {:>7.2} ± {:.2}", 100.0 * m, 100.0 * s);
        }
    }
    out
}
