#![allow(dead_code)]

pub mod gradients;
pub mod oracles;

use cell_core::dataset::{Dataset, Instance};
use cell_core::embedding::EmbeddingTable;
use cell_core::util::{seeded, Rng};
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;
/// Smallest |pre-activation| a gradient-check trial may contain.
pub const RELU_MARGIN: f64 = 1e-3;

pub fn rng(seed: u64) -> Rng {
    seeded(seed)
}

pub fn random_dataset(rng: &mut Rng, cards: &[usize], n: usize) -> Dataset {
    let instances = (0..n)
        .map(|k| Instance {
            label: (k % 2) as u8,
            fields: cards.iter().map(|&c| rng.random_range(0..c as u32)).collect(),
        })
        .collect();
    Dataset::new("random", cards.to_vec(), instances).unwrap()
}

pub fn fill_uniform(xs: &mut [f64], rng: &mut Rng, scale: f64) {
    for x in xs {
        *x = rng.random_range(-scale..scale);
    }
}

pub fn randomize_table(table: &mut EmbeddingTable, rng: &mut Rng, scale: f64) {
    for t in &mut table.tables {
        fill_uniform(t, rng, scale);
    }
}

/// `|a - n| / max(|a|, |n|, 1e-5)`; the floor absorbs roundoff on vanishing gradients.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Collects central-difference comparisons for one model.
pub struct GradCheck {
    pub label: String,
    pub checked: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl GradCheck {
    pub fn new(label: impl Into<String>) -> Self {
        GradCheck {
            label: label.into(),
            checked: 0,
            worst: 0.0,
            failures: Vec::new(),
        }
    }

    /// Compares `analytic` with the central difference of `loss` along the
    /// coordinate that `coord` exposes.
    pub fn coord<M: Clone>(
        &mut self,
        name: impl FnOnce() -> String,
        model: &M,
        analytic: f64,
        coord: impl Fn(&mut M) -> &mut f64,
        loss: impl Fn(&M) -> f64,
    ) {
        let mut plus = model.clone();
        *coord(&mut plus) += FD_STEP;
        let mut minus = model.clone();
        *coord(&mut minus) -= FD_STEP;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        self.worst = self.worst.max(e);
        if e > REL_TOL {
            self.failures
                .push(format!("{}: analytic {analytic:e}, numeric {numeric:e}, rel {e:e}", name()));
        }
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        self.worst = self.worst.max(other.worst);
        self.failures.extend(other.failures);
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn assert_ok(&self) {
        assert!(
            self.passed(),
            "{}: {} of {} coordinates failed, first: {:?}",
            self.label,
            self.failures.len(),
            self.checked,
            self.failures.first()
        );
    }
}

/// A pipeline configuration small enough for debug-build tests.
pub fn small_config(seed: u64) -> cell_core::PipelineConfig {
    let mut cfg = cell_core::PipelineConfig::default();
    cfg.seed = seed;
    cfg.synthetic.m = 4;
    cfg.synthetic.n_categories = 40;
    cfg.synthetic.dim = 4;
    cfg.synthetic.c1_pairs = vec![(0, 1)];
    cfg.synthetic.c2_pairs = vec![(2, 3)];
    cfg.synthetic.n_instances = 1200;
    cfg.synthetic.seed = seed;
    cfg.embedding_dim = 4;
    cfg.dna_epochs = 2;
    cfg.dna_batch_size = 64;
    cfg.genome_epochs = 2;
    cfg.genome_batch_size = 64;
    cfg.tau = 5;
    cfg.snapshot_every = 5;
    cfg.mlp_width = 16;
    cfg.final_epochs = 2;
    cfg.final_batch_size = 64;
    cfg
}
