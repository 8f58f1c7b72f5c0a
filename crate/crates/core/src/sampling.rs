//! Batch samplers: instance-uniform, class-balanced, and class-imbalanced
//! toward a target distribution. All sample with replacement.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::Distribution;

use crate::datagen::Dataset;
use crate::error::{Error, Result};

/// How a batch picks its examples.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplerKind {
    /// Every example equally likely.
    Random,
    /// A class uniformly over the non-empty classes, then an example within it.
    ClassBalanced,
    /// A class from `target`, then an example within it.
    ClassImbalanced { target: Vec<f64> },
}

impl SamplerKind {
    pub fn class_imbalanced(target: Vec<f64>) -> Result<Self> {
        if target.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("target", "probabilities must be finite and non-negative"));
        }
        let sum: f64 = target.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("target", format!("must sum to 1, sums to {sum}")));
        }
        Ok(SamplerKind::ClassImbalanced { target })
    }
}

/// Gathered examples from one sampler call.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub dim: usize,
    /// Row indices into the source set.
    pub indices: Vec<usize>,
    /// Row-major `indices.len() x dim`.
    pub features: Vec<f64>,
    /// Visible labels of the source set, if any.
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn gather(set: &Dataset, indices: Vec<usize>) -> Self {
        let mut features = Vec::with_capacity(indices.len() * set.dim());
        for &i in &indices {
            features.extend_from_slice(set.row(i));
        }
        let labels = set
            .labels()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Batch {
            dim: set.dim(),
            indices,
            features,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn members(set: &Dataset, c: usize) -> Result<&[usize]> {
    set.class_members(c)
        .ok_or_else(|| Error::invalid("set", "class-aware sampling needs visible labels"))
}

/// Draws `batch` row indices from `set`.
pub fn sample_indices<R: Rng + ?Sized>(
    set: &Dataset,
    kind: &SamplerKind,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if set.is_empty() {
        return Err(Error::invalid("set", "cannot sample from an empty set"));
    }
    match kind {
        SamplerKind::Random => Ok((0..batch).map(|_| rng.random_range(0..set.len())).collect()),
        SamplerKind::ClassBalanced => {
            let mut classes = Vec::with_capacity(set.num_classes());
            for c in 0..set.num_classes() {
                if !members(set, c)?.is_empty() {
                    classes.push(c);
                }
            }
            Ok((0..batch)
                .map(|_| {
                    let c = classes[rng.random_range(0..classes.len())];
                    let m = set.class_members(c).expect("checked above");
                    m[rng.random_range(0..m.len())]
                })
                .collect())
        }
        SamplerKind::ClassImbalanced { target } => {
            if target.len() != set.num_classes() {
                return Err(Error::Shape(format!(
                    "target has {} classes, set has {}",
                    target.len(),
                    set.num_classes()
                )));
            }
            for (c, &p) in target.iter().enumerate() {
                if p > 0.0 && members(set, c)?.is_empty() {
                    return Err(Error::EmptyClass { class: c + 1 });
                }
            }
            let dist = WeightedIndex::new(target)
                .map_err(|e| Error::invalid("target", e.to_string()))?;
            Ok((0..batch)
                .map(|_| {
                    let c = dist.sample(rng);
                    let m = set.class_members(c).expect("checked above");
                    m[rng.random_range(0..m.len())]
                })
                .collect())
        }
    }
}

/// Draws a batch of `batch` examples from `set`.
pub fn sample_batch<R: Rng + ?Sized>(
    set: &Dataset,
    kind: &SamplerKind,
    batch: usize,
    rng: &mut R,
) -> Result<Batch> {
    let indices = sample_indices(set, kind, batch, rng)?;
    Ok(Batch::gather(set, indices))
}

/// Normalized label histogram over all given batches.
pub fn empirical_class_frequencies<'a, I>(batches: I, k: usize) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a Batch>,
{
    let mut hist = vec![0usize; k];
    for b in batches {
        let labels = b
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid("batch", "frequencies need labels"))?;
        for &y in labels {
            if y >= k {
                return Err(Error::invalid("label", format!("class {} outside 1..={k}", y + 1)));
            }
            hist[y] += 1;
        }
    }
    let total: usize = hist.iter().sum();
    if total == 0 {
        return Ok(vec![0.0; k]);
    }
    Ok(hist.into_iter().map(|h| h as f64 / total as f64).collect())
}
