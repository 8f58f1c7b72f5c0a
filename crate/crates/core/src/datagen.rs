//! Synthetic class-imbalanced benchmark construction.
//!
//! A Gaussian mixture stands in for an image pool. Long-tailed labeled and
//! unlabeled splits are carved from it with exponentially decaying per-class
//! counts, and shifted test sets reuse the same decay law in either
//! direction.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Role};

/// Per-class example counts for a `K`-class set, class 1 first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDistribution {
    counts: Vec<usize>,
}

impl ClassDistribution {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::invalid(
                "counts",
                format!("need at least 2 classes, got {}", counts.len()),
            ));
        }
        Ok(Self { counts })
    }

    pub fn uniform(per_class: usize, k: usize) -> Result<Self> {
        Self::new(vec![per_class; k])
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Normalized class prior. Returns zeros for an empty distribution.
    pub fn prior(&self) -> Vec<f64> {
        let total = self.total();
        if total == 0 {
            return vec![0.0; self.k()];
        }
        self.counts
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect()
    }

    pub fn reversed(&self) -> Self {
        let mut counts = self.counts.clone();
        counts.reverse();
        Self { counts }
    }

    pub fn is_non_increasing(&self) -> bool {
        self.counts.windows(2).all(|w| w[0] >= w[1])
    }

    pub fn is_non_decreasing(&self) -> bool {
        self.counts.windows(2).all(|w| w[0] <= w[1])
    }

    /// True when every class has at least one example, as training splits require.
    pub fn all_positive(&self) -> bool {
        self.counts.iter().all(|&c| c >= 1)
    }
}

/// Shape of a long-tailed labeled/unlabeled training pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub n1: usize,
    pub m1: usize,
    pub gamma_l: f64,
    pub gamma_u: f64,
    pub k: usize,
}

impl ImbalanceSpec {
    pub fn labeled_counts(&self) -> Result<ClassDistribution> {
        long_tail_counts(self.n1, self.gamma_l, self.k)
    }

    pub fn unlabeled_counts(&self) -> Result<ClassDistribution> {
        long_tail_counts(self.m1, self.gamma_u, self.k)
    }
}

/// Floors `value`, snapping to the nearest integer first when the product
/// is an integer up to rounding noise (1500 * 150^-1 must give 10, not 9).
fn snapped_floor(value: f64) -> usize {
    let nearest = value.round();
    let v = if (value - nearest).abs() <= 1e-9 * value.abs().max(1.0) {
        nearest
    } else {
        value.floor()
    };
    v.max(0.0) as usize
}

fn validate_decay(base: usize, gamma: f64, k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::invalid("k", format!("need k >= 2, got {k}")));
    }
    if base < 1 {
        return Err(Error::invalid("base", "need base >= 1"));
    }
    if !gamma.is_finite() || gamma < 1.0 {
        return Err(Error::invalid("gamma", format!("need gamma >= 1, got {gamma}")));
    }
    Ok(())
}

/// `N_j = floor(base * gamma^{-(j-1)/(k-1)})`, clamped to at least one example.
pub fn long_tail_counts(base: usize, gamma: f64, k: usize) -> Result<ClassDistribution> {
    validate_decay(base, gamma, k)?;
    let counts = (0..k)
        .map(|j| {
            if j == 0 {
                return base;
            }
            let exponent = -(j as f64) / (k as f64 - 1.0);
            snapped_floor(base as f64 * gamma.powf(exponent)).max(1)
        })
        .collect();
    ClassDistribution::new(counts)
}

/// Test-side counts for a signed imbalance ratio.
///
/// Positive ratios decay from `base` exactly like [`long_tail_counts`].
/// Negative ratios grow from `base` (now the smallest class, class 1):
/// `floor(base * |gamma|^{(j-1)/(k-1)})`.
pub fn shifted_test_counts(base: usize, gamma_signed: f64, k: usize) -> Result<ClassDistribution> {
    if !gamma_signed.is_finite() || gamma_signed.abs() < 1.0 {
        return Err(Error::invalid(
            "gamma",
            format!("need |gamma| >= 1, got {gamma_signed}"),
        ));
    }
    if gamma_signed > 0.0 {
        return long_tail_counts(base, gamma_signed, k);
    }
    let gamma = gamma_signed.abs();
    validate_decay(base, gamma, k)?;
    let counts = (0..k)
        .map(|j| {
            let exponent = j as f64 / (k as f64 - 1.0);
            snapped_floor(base as f64 * gamma.powf(exponent)).max(1)
        })
        .collect();
    ClassDistribution::new(counts)
}

/// Shifted test counts bounded by a per-class cap, so the largest class
/// holds `cap` examples whichever way the ratio points.
///
/// The negative branch is the exact reverse of the positive one, which keeps
/// the `gamma` and `-gamma` rows of a sweep comparable class for class.
pub fn shifted_counts_for_cap(cap: usize, gamma_signed: f64, k: usize) -> Result<ClassDistribution> {
    if !gamma_signed.is_finite() || gamma_signed.abs() < 1.0 {
        return Err(Error::invalid(
            "gamma",
            format!("need |gamma| >= 1, got {gamma_signed}"),
        ));
    }
    let forward = long_tail_counts(cap, gamma_signed.abs(), k)?;
    Ok(if gamma_signed > 0.0 {
        forward
    } else {
        forward.reversed()
    })
}

/// Parameters of the synthetic Gaussian mixture pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub k: usize,
    pub d: usize,
    /// Distance between any two class centroids (exact when `k <= d`).
    pub separation: f64,
    pub noise_sigma: f64,
    pub pool_per_class: usize,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::invalid("k", "need at least one class"));
        }
        if self.d < 1 {
            return Err(Error::invalid("d", "need a positive feature dimension"));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::invalid("separation", "must be positive and finite"));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma", "must be positive and finite"));
        }
        if self.pool_per_class < 1 {
            return Err(Error::invalid("pool_per_class", "must be positive"));
        }
        Ok(())
    }
}

/// Feature vectors with per-example class labels.
///
/// Labels can be hidden: an unlabeled pool keeps its ground truth for
/// diagnostics, but [`Dataset::labels`] reports `None` and the class index
/// is unavailable, so training code cannot read it by accident.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    truth: Option<Vec<usize>>,
    visible: bool,
    class_index: Vec<Vec<usize>>,
}

impl Dataset {
    /// A labeled set. `labels` are 0-based class indices.
    pub fn labeled(dim: usize, num_classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        Self::build(dim, num_classes, features, Some(labels), true)
    }

    /// An unlabeled set whose ground truth is retained for diagnostics only.
    pub fn unlabeled_with_truth(
        dim: usize,
        num_classes: usize,
        features: Vec<f64>,
        truth: Vec<usize>,
    ) -> Result<Self> {
        Self::build(dim, num_classes, features, Some(truth), false)
    }

    /// An unlabeled set with no known ground truth.
    pub fn unlabeled(dim: usize, num_classes: usize, features: Vec<f64>) -> Result<Self> {
        Self::build(dim, num_classes, features, None, false)
    }

    fn build(
        dim: usize,
        num_classes: usize,
        features: Vec<f64>,
        truth: Option<Vec<usize>>,
        visible: bool,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "feature dimension must be positive"));
        }
        if num_classes == 0 {
            return Err(Error::invalid("num_classes", "need at least one class"));
        }
        if !features.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} feature values is not a multiple of dimension {dim}",
                features.len()
            )));
        }
        let n = features.len() / dim;
        let mut class_index = vec![Vec::new(); num_classes];
        if let Some(labels) = &truth {
            if labels.len() != n {
                return Err(Error::Shape(format!(
                    "{} labels for {n} examples",
                    labels.len()
                )));
            }
            for (i, &y) in labels.iter().enumerate() {
                if y >= num_classes {
                    return Err(Error::invalid(
                        "label",
                        format!("class {} outside 1..={num_classes}", y + 1),
                    ));
                }
                class_index[y].push(i);
            }
        }
        Ok(Self {
            dim,
            num_classes,
            features,
            truth,
            visible,
            class_index,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Training-visible labels; `None` for unlabeled sets.
    pub fn labels(&self) -> Option<&[usize]> {
        if self.visible {
            self.truth.as_deref()
        } else {
            None
        }
    }

    /// Ground truth of an unlabeled set. Diagnostics only.
    pub fn hidden_truth(&self) -> Option<&[usize]> {
        if self.visible {
            None
        } else {
            self.truth.as_deref()
        }
    }

    /// Indices of class `c` (0-based); `None` when labels are not visible.
    pub fn class_members(&self, c: usize) -> Option<&[usize]> {
        if self.visible && self.truth.is_some() {
            self.class_index.get(c).map(Vec::as_slice)
        } else {
            None
        }
    }

    /// Per-class counts of the visible labels.
    pub fn class_counts(&self) -> Option<Vec<usize>> {
        self.labels()?;
        Some(self.class_index.iter().map(Vec::len).collect())
    }

    /// Copies the given rows into a new set with the chosen label visibility.
    pub fn subset(&self, indices: &[usize], visible: bool) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        let truth = self
            .truth
            .as_ref()
            .map(|t| indices.iter().map(|&i| t[i]).collect::<Vec<_>>());
        Self::build(self.dim, self.num_classes, features, truth, visible)
            .expect("subset of a valid dataset is valid")
    }

    /// Writes one example per line: `class<TAB>f1,f2,...`, with 1-based
    /// classes and class 0 for examples whose label is not visible.
    pub fn export<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let labels = self.labels();
        for i in 0..self.len() {
            let class = labels.map_or(0, |l| l[i] + 1);
            write!(out, "{class}\t")?;
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    out.write_all(b",")?;
                }
                write!(out, "{v}")?;
            }
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads the [`Dataset::export`] format. A file with only class 0 rows
    /// becomes an unlabeled set; mixing 0 and labeled rows is rejected.
    pub fn import<R: BufRead>(input: R, num_classes: usize) -> Result<Dataset> {
        let mut dim = None;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut any_unlabeled = false;
        for (lineno, line) in input.lines().enumerate() {
            let line_no = lineno + 1;
            let line = line.map_err(|e| Error::Format {
                what: "split file",
                line: line_no,
                reason: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| Error::Format {
                what: "split file",
                line: line_no,
                reason,
            };
            let (class, values) = line
                .split_once('\t')
                .ok_or_else(|| bad("missing tab separator".into()))?;
            let class: usize = class
                .trim()
                .parse()
                .map_err(|e| bad(format!("bad class index: {e}")))?;
            let row: Vec<f64> = values
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("bad feature value: {e}")))?;
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(bad(format!("expected {d} features, got {}", row.len())))
                }
                _ => {}
            }
            if class > num_classes {
                return Err(bad(format!("class {class} outside 0..={num_classes}")));
            }
            if class == 0 {
                any_unlabeled = true;
            } else {
                labels.push(class - 1);
            }
            features.extend(row);
        }
        let dim = dim.ok_or(Error::Format {
            what: "split file",
            line: 0,
            reason: "no examples".into(),
        })?;
        match (any_unlabeled, labels.is_empty()) {
            (true, true) => Dataset::unlabeled(dim, num_classes, features),
            (false, _) => Dataset::labeled(dim, num_classes, features, labels),
            (true, false) => Err(Error::Format {
                what: "split file",
                line: 0,
                reason: "mixes labeled and unlabeled rows".into(),
            }),
        }
    }
}

/// Deterministic centroids with pairwise distance `separation`.
///
/// When `k <= d` the centroids are the scaled vertices of a randomly rotated
/// regular simplex; otherwise they are random directions on a sphere of the
/// same radius.
fn centroids(spec: &MixtureSpec, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let radius = spec.separation / std::f64::consts::SQRT_2;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.k);
    for _ in 0..spec.k {
        let mut v: Vec<f64> = (0..spec.d).map(|_| StandardNormal.sample(rng)).collect();
        if basis.len() < spec.d {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(b).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        basis.push(v);
    }
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|a| a * radius).collect())
        .collect()
}

/// The class centroids [`make_mixture_pool`] uses for `(spec, seed)`.
pub fn mixture_centroids(spec: &MixtureSpec, seed: u64) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut rng = rng::stream(seed, Role::Pool);
    Ok(centroids(spec, &mut rng))
}

/// Draws `pool_per_class` examples per class, grouped by class.
pub fn make_mixture_pool(spec: &MixtureSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::stream(seed, Role::Pool);
    let centers = centroids(spec, &mut rng);
    let n = spec.k * spec.pool_per_class;
    let mut features = Vec::with_capacity(n * spec.d);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.pool_per_class {
            for &mu in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(mu + spec.noise_sigma * z);
            }
            labels.push(c);
        }
    }
    Dataset::labeled(spec.d, spec.k, features, labels)
}

/// Disjoint long-tailed training splits plus everything left over.
#[derive(Debug, Clone)]
pub struct Splits {
    /// Labeled set with visible labels.
    pub labeled: Dataset,
    /// Unlabeled set; ground truth hidden.
    pub unlabeled: Dataset,
    /// Unused pool examples, labels visible, for building test sets.
    pub remainder: Dataset,
}

fn shuffled_members(pool: &Dataset, rng: &mut rng::Rng) -> Result<Vec<Vec<usize>>> {
    (0..pool.num_classes())
        .map(|c| {
            let mut members = pool
                .class_members(c)
                .ok_or_else(|| Error::invalid("pool", "pool labels must be visible"))?
                .to_vec();
            members.shuffle(rng);
            Ok(members)
        })
        .collect()
}

/// Randomly selects `labeled[c]` and `unlabeled[c]` disjoint examples per class.
pub fn carve_splits(
    pool: &Dataset,
    labeled: &ClassDistribution,
    unlabeled: &ClassDistribution,
    seed: u64,
) -> Result<Splits> {
    let k = pool.num_classes();
    if labeled.k() != k || unlabeled.k() != k {
        return Err(Error::Shape(format!(
            "pool has {k} classes, splits have {} and {}",
            labeled.k(),
            unlabeled.k()
        )));
    }
    let mut rng = rng::stream(seed, Role::Split);
    let members = shuffled_members(pool, &mut rng)?;
    let (mut xs, mut us, mut rest) = (Vec::new(), Vec::new(), Vec::new());
    for (c, m) in members.iter().enumerate() {
        let (nl, nu) = (labeled.counts()[c], unlabeled.counts()[c]);
        if nl + nu > m.len() {
            return Err(Error::InsufficientPool {
                class: c + 1,
                requested: nl + nu,
                available: m.len(),
            });
        }
        xs.extend_from_slice(&m[..nl]);
        us.extend_from_slice(&m[nl..nl + nu]);
        rest.extend_from_slice(&m[nl + nu..]);
    }
    Ok(Splits {
        labeled: pool.subset(&xs, true),
        unlabeled: pool.subset(&us, false),
        remainder: pool.subset(&rest, true),
    })
}

/// A labeled test set with exactly `counts[c]` examples of class `c`.
pub fn build_test_set(pool: &Dataset, counts: &ClassDistribution, seed: u64) -> Result<Dataset> {
    if counts.k() != pool.num_classes() {
        return Err(Error::Shape(format!(
            "pool has {} classes, counts have {}",
            pool.num_classes(),
            counts.k()
        )));
    }
    let mut rng = rng::stream(seed, Role::TestSet);
    let members = shuffled_members(pool, &mut rng)?;
    let mut chosen = Vec::with_capacity(counts.total());
    for (c, m) in members.iter().enumerate() {
        let want = counts.counts()[c];
        if want > m.len() {
            return Err(Error::InsufficientPool {
                class: c + 1,
                requested: want,
                available: m.len(),
            });
        }
        chosen.extend_from_slice(&m[..want]);
    }
    Ok(pool.subset(&chosen, true))
}
