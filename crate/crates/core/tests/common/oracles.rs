#![allow(dead_code)]

//! Independent reference implementations and the randomized checks built on
//! them, shared by the property tests and the acceptance run.

use cell_core::dna_search::{discretize, softmax4, OperationAssignment, ThetaFitness};
use cell_core::genome_search::{mutate, MutationConfig};
use cell_core::interactions::OperationKind;
use cell_core::metrics::{auc, logloss};
use cell_core::optim::{AdamConfig, AdamState, RdaConfig, RdaState};
use cell_core::pairs::all_pairs;
use rand::Rng as _;

use super::rng;

/// Result of one randomized check.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }

    pub fn assert_ok(&self) {
        assert!(self.passed, "{}", self.detail);
    }
}

/// Pairwise count of correctly ordered (positive, negative) pairs, ties worth half.
pub fn auc_bruteforce(preds: &[f64], labels: &[u8]) -> f64 {
    let mut twice = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (a, &la) in labels.iter().enumerate() {
        if la == 1 {
            pos += 1;
        } else {
            neg += 1;
        }
        if la != 1 {
            continue;
        }
        for (b, &lb) in labels.iter().enumerate() {
            if lb != 0 {
                continue;
            }
            if preds[a] > preds[b] {
                twice += 2;
            } else if preds[a] == preds[b] {
                twice += 1;
            }
        }
    }
    twice as f64 / 2.0 / (pos as f64 * neg as f64)
}

/// Mean of `-(y ln p + (1 - y) ln(1 - p))` with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn logloss_direct(preds: &[f64], labels: &[u8]) -> f64 {
    let mut total = 0.0;
    for (&p, &y) in preds.iter().zip(labels) {
        let p = p.max(1e-7).min(1.0 - 1e-7);
        let y = y as f64;
        total += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    total / preds.len() as f64
}

/// Closed-form RDA iterate after the gradient sequence `grads`.
pub fn rda_direct(init: f64, grads: &[f64], cfg: &RdaConfig) -> f64 {
    let t = grads.len() as f64;
    let shifted = init - cfg.gamma * grads.iter().sum::<f64>();
    let h = cfg.c * cfg.gamma.sqrt() * (t * cfg.gamma).powf(cfg.mu);
    if shifted.abs() <= h {
        0.0
    } else {
        shifted.signum() * (shifted.abs() - h)
    }
}

/// Random scores with many ties and both classes present.
pub fn random_scored(r: &mut cell_core::util::Rng, n: usize) -> (Vec<f64>, Vec<u8>) {
    let levels = r.random_range(1..=n.max(2));
    let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
    labels[0] = 0;
    labels[n - 1] = 1;
    let preds = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
    (preds, labels)
}

/// Rank-based AUC against the pairwise oracle, bit for bit.
pub fn check_auc(cases: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    for case in 0..cases {
        let n = r.random_range(2..=200);
        let (preds, labels) = random_scored(&mut r, n);
        let fast = auc(&preds, &labels).unwrap();
        let slow = auc_bruteforce(&preds, &labels);
        if fast != slow {
            return Outcome::new(false, format!("case {case} (n={n}): rank {fast} vs pairwise {slow}"));
        }
    }
    Outcome::new(true, format!("{cases} cases, n <= 200, exact"))
}

/// Library Logloss against direct summation.
pub fn check_logloss(cases: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = r.random_range(1..=200);
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let preds: Vec<f64> = (0..n)
            .map(|_| match r.random_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                _ => r.random::<f64>(),
            })
            .collect();
        let diff = (logloss(&preds, &labels).unwrap() - logloss_direct(&preds, &labels)).abs();
        worst = worst.max(diff);
    }
    Outcome::new(worst <= 1e-12, format!("{cases} cases, max |diff| {worst:.1e}"))
}

/// RDA iterates against the closed form, and exact-zero iff within threshold.
pub fn check_rda(tuples: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for case in 0..tuples {
        let cfg = RdaConfig {
            gamma: 10f64.powf(r.random_range(-4.0..-1.0)),
            c: r.random_range(0.0..2.0),
            mu: r.random_range(0.0..1.5),
        };
        let dim = r.random_range(1..6);
        let steps = r.random_range(1..40);
        let init: Vec<f64> = (0..dim).map(|_| r.random_range(-0.05..0.05)).collect();
        let grads: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..dim).map(|_| r.random_range(-3.0..3.0)).collect())
            .collect();
        let mut state = RdaState::new(cfg, init.clone());
        let mut params = init.clone();
        for g in &grads {
            state.step(&mut params, g).unwrap();
        }
        let h = cfg.c * cfg.gamma.sqrt() * (steps as f64 * cfg.gamma).powf(cfg.mu);
        for k in 0..dim {
            let seq: Vec<f64> = grads.iter().map(|g| g[k]).collect();
            let expect = rda_direct(init[k], &seq, &cfg);
            worst = worst.max((params[k] - expect).abs());
            let shifted = init[k] - cfg.gamma * seq.iter().sum::<f64>();
            if (params[k] == 0.0) != (shifted.abs() <= h) {
                return Outcome::new(
                    false,
                    format!("tuple {case}: value {} but |shifted| {} vs h {h}", params[k], shifted.abs()),
                );
            }
        }
    }
    Outcome::new(
        worst <= 1e-12,
        format!("{tuples} tuples, max |diff| {worst:.1e}, truncation iff threshold"),
    )
}

/// Adam with zero gradients and no decay leaves parameters bit-identical for every t.
pub fn check_adam_identity(seed: u64) -> Outcome {
    let mut r = rng(seed);
    for case in 0..100 {
        let n = r.random_range(1..50);
        let cfg = AdamConfig {
            learning_rate: r.random_range(1e-4..1.0),
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new("identity", cfg, n);
        let start: Vec<f64> = (0..n).map(|_| r.random_range(-10.0..10.0)).collect();
        let mut params = start.clone();
        let zeros = vec![0.0; n];
        for _ in 0..200 {
            state.step(&mut params, &zeros).unwrap();
        }
        if params != start {
            return Outcome::new(false, format!("case {case}: parameters moved"));
        }
    }
    Outcome::new(true, "100 groups x 200 zero-gradient steps are the identity")
}

/// Empirical mutation rate over at least `checks` pair checks with |beta|
/// forced below lambda, plus the per-event guards. Interleaved pairs above
/// lambda must never mutate.
pub fn check_mutation_stats(checks: usize, seed: u64) -> Outcome {
    let m = 6;
    let dim = 4;
    let all = all_pairs(m);
    let pairs = all.len();
    let cfg = MutationConfig {
        lambda: 0.1,
        sigma: 5.0,
        tau: 1,
        seed,
    };
    let mut r = rng(seed);
    let mut assignment = OperationAssignment::random(m, dim, &mut r);
    let mut fired = 0usize;
    let mut done = 0usize;
    let mut step = 0u64;
    while done < checks {
        let beta: Vec<f64> = (0..pairs)
            .map(|k| {
                let small = r.random_range(-0.0999..0.0999);
                if k % 2 == 0 { small } else { 0.1 + r.random::<f64>() }
            })
            .collect();
        let (next, events) = mutate(&assignment, &beta, &cfg, step, &mut r);
        for e in &events {
            let k = all.iter().position(|p| p.i == e.i && p.j == e.j).unwrap();
            if e.beta != beta[k] || !(e.beta.abs() < cfg.lambda) || e.new == e.old || e.old != assignment.kinds[k] {
                return Outcome::new(false, format!("invalid event {e:?}"));
            }
            if next.kinds[k] != e.new {
                return Outcome::new(false, format!("event {e:?} not applied"));
            }
        }
        fired += events.len();
        done += pairs.div_ceil(2);
        assignment = next;
        step += 1;
    }
    let p = 1.0 / cfg.sigma;
    let rate = fired as f64 / done as f64;
    let sd = (p * (1.0 - p) / done as f64).sqrt();
    let z = (rate - p) / sd;
    Outcome::new(
        z.abs() <= 3.0,
        format!("{fired}/{done} = {rate:.5} vs 1/sigma = {p}, z = {z:.2}"),
    )
}

/// Mixing coefficients sum to one and argmax ignores uniform shifts and
/// strictly increasing transforms.
pub fn check_softmax_discretize(cases: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let scale = 10f64.powf(r.random_range(-3.0..3.0));
        let m = r.random_range(2..7);
        let values: Vec<[f64; 4]> = (0..all_pairs(m).len())
            .map(|_| std::array::from_fn(|_| r.random_range(-scale..scale)))
            .collect();
        for v in &values {
            let s: f64 = softmax4(v).iter().sum();
            worst = worst.max((s - 1.0).abs());
        }
        let theta = ThetaFitness {
            m,
            values: values.clone(),
        };
        let shift = r.random_range(-10.0..10.0) * scale;
        let shifted = ThetaFitness {
            m,
            values: values.iter().map(|v| v.map(|x| x + shift)).collect(),
        };
        let squashed = ThetaFitness {
            m,
            values: values.iter().map(|v| v.map(|x| (x / scale).tanh() * 3.0 + 1.0)).collect(),
        };
        let base: Vec<OperationKind> = discretize(&theta);
        if discretize(&shifted) != base || discretize(&squashed) != base {
            return Outcome::new(false, format!("case {case}: discretize changed under a monotone map"));
        }
    }
    Outcome::new(
        worst <= 1e-12,
        format!("{cases} cases, max |sum - 1| {worst:.1e}, argmax invariant"),
    )
}

/// Mixing sums of recorded fitness snapshots.
pub fn max_mixing_error<'a>(thetas: impl IntoIterator<Item = &'a Vec<[f64; 4]>>) -> f64 {
    let mut worst: f64 = 0.0;
    for values in thetas {
        for v in values {
            worst = worst.max((softmax4(v).iter().sum::<f64>() - 1.0).abs());
        }
    }
    worst
}
