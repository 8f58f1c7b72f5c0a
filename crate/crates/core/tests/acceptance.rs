//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Criteria 8, 9, 10 and 12 share the same five paired-seed runs.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use cossl_core::datagen::{self, Dataset};
use cossl_core::eval::{self, PcMode, PriorPair};
use cossl_core::nn::{self, Activation, EmaState, Encoder, Params};
use cossl_core::ssl::AugmentConfig;
use cossl_core::tfe::{self, TfeConfig};
use cossl_core::train::{self, TrainData, TrainOutcome};
use cossl_core::{rng, Mode, SamplerKind, TrainConfig};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, id: u32, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(d) if elapsed > budget => Err(format!("{d}; took {elapsed:.2?}, budget {budget:.2?}")),
            r => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if result.is_err() {
            self.failures += 1;
        }
        println!("criterion {id:>2} [{tag}] {name} ({elapsed:.2?}): {detail}");
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TAIL: [usize; 3] = [7, 8, 9];

struct SeedRuns {
    seed: u64,
    data: TrainData,
    vanilla: TrainOutcome,
    crt: TrainOutcome,
    cossl: TrainOutcome,
    cossl_csv: Vec<u8>,
    slowest: Duration,
}

fn benchmark_config(seed: u64, mode: Mode) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.cossl.seed = seed;
    cfg.cossl.mode = mode;
    cfg
}

fn metrics_csv(out: &TrainOutcome) -> Vec<u8> {
    let mut buf = Vec::new();
    train::write_metrics_csv(&out.history, &mut buf).unwrap();
    buf
}

fn run_seed(seed: u64) -> SeedRuns {
    let cfg = benchmark_config(seed, Mode::Vanilla);
    let data = TrainData::synthetic(&cfg).unwrap();
    let t = Instant::now();
    let vanilla = train::train(&cfg, &data, |_| {}).unwrap();
    let vanilla_time = t.elapsed();
    let t = Instant::now();
    let crt_cfg = benchmark_config(seed, Mode::Crt);
    let crt = train::crt_stage(&crt_cfg, &data, vanilla.clone(), |_| {}).unwrap();
    let crt_time = vanilla_time + t.elapsed();
    let t = Instant::now();
    let cossl = train::train(&benchmark_config(seed, Mode::Cossl), &data, |_| {}).unwrap();
    let cossl_time = t.elapsed();
    SeedRuns {
        seed,
        cossl_csv: metrics_csv(&cossl),
        data,
        vanilla,
        crt,
        cossl,
        slowest: vanilla_time.max(crt_time).max(cossl_time),
    }
}

fn points(x: f64) -> f64 {
    100.0 * x
}

fn main() {
    let mut suite = Suite { failures: 0 };

    suite.run(1, "split construction", Duration::from_millis(1), || {
        let a = datagen::long_tail_counts(1500, 150.0, 10).map_err(|e| e.to_string())?;
        let b = datagen::long_tail_counts(150, 100.0, 100).map_err(|e| e.to_string())?;
        // floor(1500 * 150^(-j/9)) computed offline
        let golden = [1500, 859, 492, 282, 161, 92, 53, 30, 17, 10];
        check(
            a.counts() == golden && b.counts()[0] == 150 && b.counts()[99] == 1,
            format!("{:?}; K=100 head {} tail {}", a.counts(), b.counts()[0], b.counts()[99]),
        )
    });

    suite.run(2, "blend-probability law", Duration::from_secs(5), || {
        let counts = datagen::long_tail_counts(150, 100.0, 10).unwrap();
        let mut labels = Vec::new();
        for (c, &n) in counts.counts().iter().enumerate() {
            labels.extend(std::iter::repeat_n(c, n));
        }
        let x = Dataset::labeled(2, 10, vec![0.0; labels.len() * 2], labels).unwrap();
        let u = Dataset::unlabeled(2, 10, vec![0.0; 200]).unwrap();
        let cfg = TfeConfig::new(0.6, counts.clone()).unwrap();
        let n1 = counts.counts()[0] as f64;
        let expected: Vec<f64> = counts.counts().iter().map(|&n| (n1 - n as f64) / n1).collect();
        let mut r = rng::from_seed(7);
        let (mut slots, mut blended) = (vec![0usize; 10], vec![0usize; 10]);
        // 10^4 slots per class
        while slots.iter().any(|&s| s < 10_000) {
            let plan = tfe::plan_tfe_batch(&x, &u, &cfg, &AugmentConfig::identity(), 1000, &mut r).unwrap();
            for (y, b) in plan.labels.iter().zip(&plan.blended_mask) {
                slots[*y] += 1;
                blended[*y] += usize::from(*b);
            }
        }
        let freq: Vec<f64> = (0..10).map(|c| blended[c] as f64 / slots[c] as f64).collect();
        let worst = (0..10).map(|c| (freq[c] - expected[c]).abs()).fold(0.0, f64::max);
        check(
            blended[0] == 0 && worst <= 0.02,
            format!("max |freq - P_k| = {worst:.4}, head blends = {}", blended[0]),
        )
    });

    suite.run(3, "label preservation", Duration::from_secs(10), || {
        let mut total = 0usize;
        let mut kept = 0usize;
        for seed in 0..100u64 {
            let s = common::small_splits(seed % 5);
            let cfg = TfeConfig::new(0.6, common::counts_of(&s.labeled)).unwrap();
            let g = Encoder::init(8, 16, 8, Activation::Relu, &mut rng::from_seed(seed));
            let mut r = rng::from_seed(1000 + seed);
            let plan = tfe::plan_tfe_batch(&s.labeled, &s.unlabeled, &cfg, &AugmentConfig::default(), 1000, &mut r).unwrap();
            let out = tfe::realize_plan(&plan, &g, &cfg, None).unwrap();
            let truth = s.labeled.labels().unwrap();
            for b in 0..out.len() {
                total += 1;
                kept += usize::from(out.labels[b] == truth[plan.x_indices[b]]);
            }
        }
        check(total == 100_000 && kept == total, format!("{kept}/{total} outputs keep the labeled class"))
    });

    suite.run(4, "momentum encoder exactness", Duration::from_secs(1), || {
        let cfg = common::small_config(200);
        let data = TrainData::synthetic(&cfg).unwrap();
        let trainer = train::Trainer::new(&cfg, &data).unwrap();
        let mut state = trainer.init_state().unwrap();
        let mut oracle = state.g.clone();
        let m = cfg.cossl.ema_momentum;
        while state.step < cfg.cossl.total_steps {
            trainer
                .step_observed(&mut state, &mut |phase, s| {
                    if phase == train::Phase::Ema {
                        for (a, b) in oracle.tensors_mut().into_iter().zip(s.g.tensors()) {
                            for (x, g) in a.iter_mut().zip(b) {
                                *x = m * *x + (1.0 - m) * g;
                            }
                        }
                    }
                })
                .unwrap();
        }
        let replay = max_abs(&oracle, &state.ema.shadow);

        let mut r = rng::from_seed(11);
        let start = Encoder::init(4, 6, 3, Activation::Tanh, &mut r);
        let constant = Encoder::init(4, 6, 3, Activation::Tanh, &mut r);
        let mut ema = EmaState::new(&start, 0.999).unwrap();
        for _ in 0..1000 {
            ema.update(&constant);
        }
        let decay = 0.999f64.powi(1000);
        let mut closed = 0.0f64;
        for ((x, a), c) in ema.shadow.tensors().iter().zip(start.tensors()).zip(constant.tensors()) {
            for j in 0..x.len() {
                closed = closed.max((x[j] - (c[j] + decay * (a[j] - c[j]))).abs());
            }
        }
        check(
            replay <= 1e-10 && closed <= 1e-12,
            format!("replay error {replay:.2e}, closed-form error {closed:.2e}"),
        )
    });

    suite.run(5, "gradient correctness", Duration::from_secs(30), || {
        let mut worst = [0.0f64; 3];
        for i in 0..20u64 {
            let act = if i % 2 == 0 { Activation::Relu } else { Activation::Tanh };
            let e = common::gradient_instance(500 + i, act);
            worst[0] = worst[0].max(e.l_x);
            worst[1] = worst[1].max(e.l_u);
            worst[2] = worst[2].max(e.l_c);
        }
        check(
            worst.iter().all(|&w| w < 1e-4),
            format!(
                "max relative error L_x {:.2e}, L_u {:.2e}, L_c {:.2e}",
                worst[0], worst[1], worst[2]
            ),
        )
    });

    suite.run(6, "stop-gradient contract", Duration::from_secs(120), || {
        let mut cfg = TrainConfig::default();
        cfg.cossl.total_steps = 200;
        cfg.cossl.warmup_fraction = 0.5;
        let data = TrainData::synthetic(&cfg).unwrap();
        let clean = common::audit_decoupling(&cfg, &data);
        cfg.cossl.allow_grad = true;
        let leaky = common::audit_decoupling(&cfg, &data);
        let detected = leaky.violations.iter().filter(|v| v.contains("Classifier changed g")).count();
        check(
            clean.violations.is_empty() && clean.classifier_updates == 100 && detected == 100,
            format!(
                "{} violations over {} steps ({} classifier updates); allow_grad flagged in {detected} steps",
                clean.violations.len(),
                clean.steps,
                clean.classifier_updates
            ),
        )
    });

    suite.run(7, "sampler laws", Duration::from_secs(10), || {
        let cfg = TrainConfig::default();
        let data = TrainData::synthetic(&cfg).unwrap();
        let set = &data.labeled;
        let counts = common::counts_of(set);
        let total = counts.total() as f64;
        let proportional: Vec<f64> = counts.counts().iter().map(|&c| c as f64 / total).collect();
        let target: Vec<f64> = proportional.iter().rev().cloned().collect();
        let imbalanced = SamplerKind::class_imbalanced(target.clone()).unwrap();
        let (a, crit) = common::sampler_chi_square(set, &SamplerKind::ClassBalanced, &[0.1; 10], 100_000, 21);
        let (b, _) = common::sampler_chi_square(set, &SamplerKind::Random, &proportional, 100_000, 22);
        let (c, _) = common::sampler_chi_square(set, &imbalanced, &target, 100_000, 23);
        check(
            a < crit && b < crit && c < crit,
            format!("chi2 balanced {a:.2}, random {b:.2}, imbalanced {c:.2}; critical {crit:.2}"),
        )
    });

    let mut runs: Vec<SeedRuns> = Vec::new();
    suite.run(8, "directional benefit over vanilla", Duration::from_secs(3600), || {
        for &seed in &SEEDS {
            runs.push(run_seed(seed));
        }
        let mut wins = 0;
        let (mut gain, mut tail_gain) = (0.0, 0.0);
        for r in &runs {
            let d = r.cossl.final_avg_class_recall - r.vanilla.final_avg_class_recall;
            let t = r.cossl.tail_recall(&TAIL) - r.vanilla.tail_recall(&TAIL);
            println!(
                "    seed {}: vanilla {:.2}  cRT {:.2}  CoSSL {:.2}  | tail vanilla {:.2}  CoSSL {:.2}",
                r.seed,
                points(r.vanilla.final_avg_class_recall),
                points(r.crt.final_avg_class_recall),
                points(r.cossl.final_avg_class_recall),
                points(r.vanilla.tail_recall(&TAIL)),
                points(r.cossl.tail_recall(&TAIL)),
            );
            wins += usize::from(d > 0.0);
            gain += d;
            tail_gain += t;
        }
        let n = runs.len() as f64;
        let (gain, tail_gain) = (points(gain / n), points(tail_gain / n));
        let slowest = runs.iter().map(|r| r.slowest).max().unwrap_or_default();
        check(
            wins >= 4 && gain >= 3.0 && tail_gain >= 5.0 && slowest <= Duration::from_secs(600),
            format!(
                "CoSSL wins {wins}/5, mean gain {gain:+.2} points, tail gain {tail_gain:+.2} points, slowest run {slowest:.1?}"
            ),
        )
    });

    suite.run(9, "two-stage ordering", Duration::from_secs(1), || {
        let ordered = runs
            .iter()
            .filter(|r| {
                r.cossl.final_avg_class_recall >= r.crt.final_avg_class_recall
                    && r.crt.final_avg_class_recall >= r.vanilla.final_avg_class_recall
            })
            .count();
        check(
            runs.len() == 5 && ordered >= 3,
            format!("CoSSL >= cRT >= vanilla in {ordered}/{} seeds", runs.len()),
        )
    });

    suite.run(10, "shifted sweep", Duration::from_secs(60), || {
        let r = runs.first().ok_or("no trained model")?;
        let cfg = TrainConfig::default();
        let gammas = cfg.eval.sweep_gammas.clone();
        let model = &r.cossl.model;
        let sweep = |mode| {
            eval::shifted_sweep(&model.encoder, &model.head, &r.data.holdout, &gammas, cfg.eval.sweep_cap, &model.training_prior, mode, 0)
                .unwrap()
        };
        let unknown = sweep(PcMode::Unknown { uniform_pc: false });
        let known = sweep(PcMode::Known);
        let mut csv = Vec::new();
        unknown.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let shape_ok = lines.len() == 2 + gammas.len() + 1
            && lines[0] == eval::SWEEP_SCHEMA
            && lines[1].starts_with("gamma,overall_acc,avg_class_recall,recall_1,")
            && lines.last().unwrap().starts_with("mean,")
            && lines[2..].iter().all(|l| l.split(',').count() == 3 + 10 + 1);
        let reverses_ok = gammas.iter().all(|&g| {
            datagen::shifted_counts_for_cap(cfg.eval.sweep_cap, g, 10).unwrap().reversed()
                == datagen::shifted_counts_for_cap(cfg.eval.sweep_cap, -g, 10).unwrap()
        });
        let (ku, kk) = (unknown.mean.overall_accuracy, known.mean.overall_accuracy);
        check(
            shape_ok && reverses_ok && kk >= ku,
            format!(
                "{} rows + mean, reverses exact: {reverses_ok}; mean accuracy unknown {:.2}, known {:.2}",
                unknown.rows.len(),
                points(ku),
                points(kk)
            ),
        )
    });

    suite.run(11, "post-compensation identity", Duration::from_secs(1), || {
        let mut r = rng::from_seed(99);
        let mut same = 0;
        for _ in 0..10_000 {
            let logits: Vec<f64> = (0..10).map(|_| r.random_range(-10.0..10.0)).collect();
            let w: Vec<f64> = (0..10).map(|_| r.random_range(0.001..1.0)).collect();
            let s: f64 = w.iter().sum();
            let p: Vec<f64> = w.iter().map(|x| x / s).collect();
            let pair = PriorPair::new(p.clone(), p).unwrap();
            same += usize::from(nn::argmax(&eval::post_compensate(&logits, &pair)) == nn::argmax(&logits));
        }
        check(same == 10_000, format!("{same}/10000 argmax unchanged"))
    });

    suite.run(12, "determinism", Duration::from_secs(600), || {
        let r = runs.first().ok_or("no reference run")?;
        let again = train::train(&benchmark_config(r.seed, Mode::Cossl), &r.data, |_| {}).unwrap();
        let csv = metrics_csv(&again);
        check(
            csv == r.cossl_csv,
            format!("metrics.csv {} bytes, byte-identical: {}", csv.len(), csv == r.cossl_csv),
        )
    });

    if suite.failures > 0 {
        println!("{} acceptance criteria failed", suite.failures);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}

fn max_abs<P: Params>(a: &P, b: &P) -> f64 {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}
