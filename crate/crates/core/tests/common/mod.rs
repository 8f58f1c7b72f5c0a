//! Independent reference implementations used as test oracles.
//!
//! Everything here is written with plain index loops and shares no code
//! with the crate's batched kernels.

#![allow(dead_code, clippy::needless_range_loop)]

use cossl_core::datagen::{self, ClassDistribution, Dataset, MixtureSpec, Splits};
use cossl_core::nn::{Activation, Encoder, Head, Linear, Params};

pub fn act(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Relu => v.max(0.0),
        Activation::Tanh => v.tanh(),
    }
}

fn linear_row(l: &Linear, x: &[f64]) -> Vec<f64> {
    (0..l.out_dim)
        .map(|o| {
            let mut s = l.bias[o];
            for i in 0..l.in_dim {
                s += l.weight[o * l.in_dim + i] * x[i];
            }
            s
        })
        .collect()
}

/// Pre-activations of every encoder layer for one input row.
pub fn pre_activations(g: &Encoder, x: &[f64]) -> Vec<Vec<f64>> {
    let mut h = x.to_vec();
    let mut out = Vec::new();
    for l in &g.layers {
        let pre = linear_row(l, &h);
        h = pre.iter().map(|&v| act(g.activation, v)).collect();
        out.push(pre);
    }
    out
}

pub fn encode_row(g: &Encoder, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for l in &g.layers {
        h = linear_row(l, &h).into_iter().map(|v| act(g.activation, v)).collect();
    }
    h
}

pub fn logits_row(h: &Head, z: &[f64]) -> Vec<f64> {
    linear_row(&h.layer, z)
}

/// `-log softmax(logits)[y]`.
pub fn nll(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[y]
}

/// Mean cross entropy over `n` rows; rows with `accepted[i] == false` add 0.
pub fn masked_loss(g: &Encoder, h: &Head, x: &[f64], labels: &[usize], accepted: &[bool]) -> f64 {
    let d = g.layers[0].in_dim;
    let n = labels.len();
    let mut s = 0.0;
    for i in 0..n {
        if accepted[i] {
            s += nll(&logits_row(h, &encode_row(g, &x[i * d..(i + 1) * d])), labels[i]);
        }
    }
    s / n as f64
}

/// Mean cross entropy of a head on fixed representations.
pub fn head_loss(h: &Head, z: &[f64], labels: &[usize]) -> f64 {
    let fd = h.layer.in_dim;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| nll(&logits_row(h, &z[i * fd..(i + 1) * fd]), y))
        .sum::<f64>()
        / labels.len() as f64
}

/// Central finite-difference gradient of `f` at `p`, tensor by tensor.
pub fn numeric_grad<P: Params + Clone>(p: &P, eps: f64, f: impl Fn(&P) -> f64) -> Vec<Vec<f64>> {
    let shapes: Vec<usize> = p.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::new();
    for (ti, &len) in shapes.iter().enumerate() {
        let mut g = vec![0.0; len];
        for (j, gj) in g.iter_mut().enumerate() {
            let mut plus = p.clone();
            plus.tensors_mut()[ti][j] += eps;
            let mut minus = p.clone();
            minus.tensors_mut()[ti][j] -= eps;
            *gj = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// Largest per-tensor relative error `|a - n| / max(|a|, |n|)` in the L2 norm.
pub fn max_relative_error<P: Params>(analytic: &P, numeric: &[Vec<f64>]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    analytic
        .tensors()
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
            let scale = norm(a).max(norm(n));
            if scale < 1e-12 {
                0.0
            } else {
                norm(&diff) / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Pearson statistic of observed counts against expected probabilities.
pub fn chi_square(observed: &[usize], expected_p: &[f64]) -> f64 {
    let n: usize = observed.iter().sum();
    observed
        .iter()
        .zip(expected_p)
        .map(|(&o, &p)| {
            let e = p * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum()
}

/// Upper 0.999 quantile of the chi-square distribution.
pub fn chi_square_critical(df: usize) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    ChiSquared::new(df as f64).unwrap().inverse_cdf(0.999)
}

/// A small long-tailed benchmark: K=10, d=8, labeled 100..1, unlabeled 400..4.
pub fn small_splits(seed: u64) -> Splits {
    let spec = MixtureSpec {
        k: 10,
        d: 8,
        separation: 3.0,
        noise_sigma: 1.0,
        pool_per_class: 700,
    };
    let pool = datagen::make_mixture_pool(&spec, seed).unwrap();
    let labeled = datagen::long_tail_counts(100, 100.0, 10).unwrap();
    let unlabeled = datagen::long_tail_counts(400, 100.0, 10).unwrap();
    datagen::carve_splits(&pool, &labeled, &unlabeled, seed).unwrap()
}

pub fn counts_of(set: &Dataset) -> ClassDistribution {
    ClassDistribution::new(set.class_counts().unwrap()).unwrap()
}

pub struct GradientErrors {
    pub l_x: f64,
    pub l_u: f64,
    pub l_c: f64,
}

fn kink_free(g: &Encoder, x: &[f64], margin: f64) -> bool {
    let d = g.layers[0].in_dim;
    g.activation != Activation::Relu
        || x.chunks_exact(d)
            .all(|row| pre_activations(g, row).iter().flatten().all(|v| v.abs() > margin))
}

/// Checks the analytic gradients of `L_x`, `L_u` and `L_c` on one random
/// small instance against central differences of the reference losses.
pub fn gradient_instance(seed: u64, activation: Activation) -> GradientErrors {
    use cossl_core::nn::{self, Targets};
    use cossl_core::sampling::Batch;
    use cossl_core::ssl::{self, AugmentConfig, PseudoLabel};
    use cossl_core::tfe::{self, TfeConfig};
    use rand::{Rng, SeedableRng};

    const EPS: f64 = 1e-5;
    let (d, hidden, fd, k, n) = (4, 6, 5, 3, 6);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let aug = AugmentConfig::identity();

    // Redraw until no ReLU pre-activation sits within reach of the kink.
    let (g, h, x, u) = loop {
        let g = Encoder::init(d, hidden, fd, activation, &mut rng);
        let h = Head::init(fd, k, &mut rng);
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let u: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        if kink_free(&g, &x, 1e-3) && kink_free(&g, &u, 1e-3) {
            break (g, h, x, u);
        }
    };
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();

    // L_x
    let batch = Batch {
        dim: d,
        indices: (0..n).collect(),
        features: x.clone(),
        labels: Some(labels.clone()),
    };
    let all = vec![true; n];
    let (lx, grads) = ssl::supervised_loss(&g, &h, &batch, &aug, &mut rng).unwrap();
    assert!((lx - masked_loss(&g, &h, &x, &labels, &all)).abs() < 1e-12);
    let ng = numeric_grad(&g, EPS, |gp| masked_loss(gp, &h, &x, &labels, &all));
    let nh = numeric_grad(&h, EPS, |hp| masked_loss(&g, hp, &x, &labels, &all));
    let l_x = max_relative_error(grads.encoder.as_ref().unwrap(), &ng).max(max_relative_error(&grads.head, &nh));

    // L_u with a random acceptance mask, at least one row accepted
    let mut accepted: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    accepted[0] = true;
    let pseudo: Vec<PseudoLabel> = (0..n)
        .map(|i| PseudoLabel {
            class: labels[(i + 1) % n],
            confidence: 1.0,
            accepted: accepted[i],
        })
        .collect();
    let pl: Vec<usize> = pseudo.iter().map(|p| p.class).collect();
    let ubatch = Batch {
        dim: d,
        indices: (0..n).collect(),
        features: u.clone(),
        labels: None,
    };
    let (lu, grads) = ssl::unlabeled_loss(&g, &h, &ubatch, &pseudo, &aug, &mut rng).unwrap();
    assert!((lu - masked_loss(&g, &h, &u, &pl, &accepted)).abs() < 1e-12);
    let ng = numeric_grad(&g, EPS, |gp| masked_loss(gp, &h, &u, &pl, &accepted));
    let nh = numeric_grad(&h, EPS, |hp| masked_loss(&g, hp, &u, &pl, &accepted));
    let l_u = max_relative_error(grads.encoder.as_ref().unwrap(), &ng).max(max_relative_error(&grads.head, &nh));

    // L_c on a TFE batch encoded by a frozen encoder
    let counts = datagen::long_tail_counts(20, 10.0, k).unwrap();
    let mut lab_labels = Vec::new();
    for (c, &m) in counts.counts().iter().enumerate() {
        lab_labels.extend(std::iter::repeat_n(c, m));
    }
    let lab_x: Vec<f64> = (0..lab_labels.len() * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let lab = Dataset::labeled(d, k, lab_x, lab_labels).unwrap();
    let unl = Dataset::unlabeled(d, k, u.clone()).unwrap();
    let cfg = TfeConfig::new(0.6, counts).unwrap();
    let plan = tfe::plan_tfe_batch(&lab, &unl, &cfg, &aug, n, &mut rng).unwrap();
    let blended = tfe::realize_plan(&plan, &g, &cfg, None).unwrap();
    for b in 0..n {
        let zx = encode_row(&g, &plan.x_inputs[b * d..(b + 1) * d]);
        let zu = encode_row(&g, &plan.u_inputs[b * d..(b + 1) * d]);
        for j in 0..fd {
            let want = if plan.blended_mask[b] {
                plan.lambdas[b] * zx[j] + (1.0 - plan.lambdas[b]) * zu[j]
            } else {
                zx[j]
            };
            assert!((blended.features[b * fd + j] - want).abs() < 1e-12);
        }
    }
    let (lc, hg, _) = nn::head_cross_entropy_and_grads(&h, &blended.features, Targets::Hard(&blended.labels), false).unwrap();
    assert!((lc - head_loss(&h, &blended.features, &blended.labels)).abs() < 1e-12);
    let nh = numeric_grad(&h, EPS, |hp| head_loss(hp, &blended.features, &blended.labels));
    let l_c = max_relative_error(&hg, &nh);

    GradientErrors { l_x, l_u, l_c }
}

/// Parameter checksums recorded around every sub-step of a run.
#[derive(Debug, Default)]
pub struct DecouplingAudit {
    /// Sub-steps that changed a parameter set outside their contract.
    pub violations: Vec<String>,
    /// Co-learning steps in which `h_c` moved.
    pub classifier_updates: usize,
    pub steps: u64,
}

/// Runs `steps` steps and checks which parameter sets each sub-step mutates:
/// the classifier phase only `h_c`, the momentum update only `xi`, the
/// representation phase only `(g, h_r)`, pseudo-labeling nothing, and no
/// warm-up step touches `h_c`.
pub fn audit_decoupling(cfg: &cossl_core::TrainConfig, data: &cossl_core::TrainData) -> DecouplingAudit {
    use cossl_core::train::{Phase, TrainState, Trainer};

    let trainer = Trainer::new(cfg, data).unwrap();
    let mut state = trainer.init_state().unwrap();
    let mut audit = DecouplingAudit::default();
    while state.step < cfg.cossl.total_steps {
        let step = state.step;
        let colearning = trainer.is_cossl_step(step);
        let mut prev = state.checksums();
        let start_hc = prev.h_c;
        let mut classifier_moved = false;
        let mut observe = |phase: Phase, s: &TrainState| {
            let now = s.checksums();
            let moved = [
                ("g", now.g != prev.g),
                ("h_r", now.h_r != prev.h_r),
                ("h_c", now.h_c != prev.h_c),
                ("xi", now.xi != prev.xi),
            ];
            let allowed: &[&str] = match phase {
                Phase::Classifier => &["h_c"],
                Phase::PseudoLabel => &[],
                Phase::Ema => &["xi"],
                Phase::Representation => &["g", "h_r"],
            };
            for (name, changed) in moved {
                if changed && !allowed.contains(&name) {
                    audit.violations.push(format!("step {step}: {phase:?} changed {name}"));
                }
            }
            if phase == Phase::Classifier && now.h_c != prev.h_c {
                classifier_moved = true;
            }
            prev = now;
        };
        trainer.step_observed(&mut state, &mut observe).unwrap();
        if classifier_moved {
            audit.classifier_updates += 1;
        }
        if !colearning && state.checksums().h_c != start_hc {
            audit.violations.push(format!("warm-up step {step} changed h_c"));
        }
    }
    audit.steps = state.step;
    audit
}

/// A co-learning configuration on the small benchmark, `steps` long with the
/// second half co-learning.
pub fn small_config(steps: u64) -> cossl_core::TrainConfig {
    let mut cfg = cossl_core::TrainConfig::default();
    cfg.data.dim = 8;
    cfg.data.pool_per_class = 700;
    cfg.data.n1 = 100;
    cfg.data.m1 = 400;
    cfg.data.test_per_class = 50;
    cfg.model.hidden = 16;
    cfg.model.feature_dim = 8;
    cfg.cossl.total_steps = steps;
    cfg.cossl.steps_per_epoch = 10;
    cfg.cossl.batch = 16;
    cfg.cossl.warmup_fraction = 0.5;
    cfg.cossl.crt_epochs = 2;
    cfg.eval.tail_epochs = 2;
    cfg
}

/// Chi-square statistic and 0.999 critical value for the class marginal of
/// `draws` sampler draws against `expected`.
pub fn sampler_chi_square(
    set: &Dataset,
    kind: &cossl_core::SamplerKind,
    expected: &[f64],
    draws: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = cossl_core::rng::from_seed(seed);
    let idx = cossl_core::sampling::sample_indices(set, kind, draws, &mut rng).unwrap();
    let labels = set.labels().unwrap();
    let mut observed = vec![0usize; set.num_classes()];
    for i in idx {
        observed[labels[i]] += 1;
    }
    (chi_square(&observed, expected), chi_square_critical(expected.len() - 1))
}
