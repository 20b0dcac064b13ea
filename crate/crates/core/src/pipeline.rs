//! End-to-end driver: data, the three stages, ablations and resumption.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{generate_synthetic, load_csv, split, Dataset, GroundTruth, SyntheticConfig};
use crate::dna_search::{run_dna_search, DnaConfig, OperationAssignment};
use crate::embedding::EmbeddingTable;
use crate::error::{CellError, Result};
use crate::genome_search::{run_genome_search, GenomeConfig, MutationConfig};
use crate::metrics::EvalReport;
use crate::model_functioning::{train_final, FinalModel, FunctioningConfig};
use crate::optim::{AdamConfig, RdaConfig};
use crate::pairs::pair_count;
use crate::util::{derive_seed, seeded};

/// Flat configuration; every key is optional in JSON and falls back to its default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Training CSV; when absent the synthetic generator is used.
    pub train_path: Option<PathBuf>,
    /// Held-out CSV; when absent `test_fraction` of the data is held out.
    pub test_path: Option<PathBuf>,
    /// Fields per CSV row; inferred from the first row when absent.
    pub num_fields: Option<usize>,
    pub synthetic: SyntheticConfig,
    pub test_fraction: f64,
    /// Share of the training data used for stage-III early stopping.
    pub val_fraction: f64,
    pub seed: u64,
    pub embedding_dim: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    /// Stage I learning rate, also the unrolling step `xi`.
    pub dna_learning_rate: f64,
    pub dna_weight_decay: f64,
    pub dna_val_fraction: f64,
    pub dna_epochs: usize,
    pub dna_patience: usize,
    pub dna_batch_size: usize,
    pub second_order: bool,
    pub hvp_epsilon: f64,

    /// RDA step `gamma`.
    pub gamma: f64,
    /// RDA threshold scale `c`.
    pub c: f64,
    /// RDA threshold exponent `mu`.
    pub mu: f64,
    /// Mutation threshold on `|beta|`.
    pub lambda: f64,
    /// Inverse mutation probability.
    pub sigma: f64,
    /// Steps between mutation checks.
    pub tau: u64,
    pub genome_learning_rate: f64,
    pub genome_weight_decay: f64,
    pub genome_epochs: usize,
    pub genome_patience: usize,
    pub genome_batch_size: usize,
    pub normalize_interactions: bool,
    /// Steps between stage-II gene-map frames; 0 means every `tau` steps.
    pub snapshot_every: u64,

    pub mlp_depth: usize,
    pub mlp_width: usize,
    pub final_learning_rate: f64,
    pub final_weight_decay: f64,
    pub final_epochs: usize,
    pub final_patience: usize,
    pub final_batch_size: usize,
    pub warm_start_ff: bool,
    pub fresh_embeddings: bool,

    /// Assign a seeded random operation to every pair instead of searching.
    pub skip_dna: bool,
    /// Keep every feature and pair with relevance 1 and never mutate.
    pub skip_genome: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            train_path: None,
            test_path: None,
            num_fields: None,
            synthetic: SyntheticConfig::default(),
            test_fraction: 1.0 / 6.0,
            val_fraction: 0.1,
            seed: 2023,
            embedding_dim: 8,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            dna_learning_rate: 1e-3,
            dna_weight_decay: 1e-3,
            dna_val_fraction: 0.5,
            dna_epochs: 10,
            dna_patience: 3,
            dna_batch_size: 256,
            second_order: false,
            hvp_epsilon: 0.01,
            gamma: 1e-3,
            c: 0.5,
            mu: 0.8,
            lambda: 0.1,
            sigma: 5.0,
            tau: 100,
            genome_learning_rate: 1e-3,
            genome_weight_decay: 1e-3,
            genome_epochs: 10,
            genome_patience: 2,
            genome_batch_size: 256,
            normalize_interactions: false,
            snapshot_every: 0,
            mlp_depth: 2,
            mlp_width: 400,
            final_learning_rate: 1e-3,
            final_weight_decay: 1e-3,
            final_epochs: 10,
            final_patience: 2,
            final_batch_size: 256,
            warm_start_ff: false,
            fresh_embeddings: false,
            skip_dna: false,
            skip_genome: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CellError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CellError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn adam(&self, lr: f64, wd: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: wd,
        }
    }

    pub fn dna_config(&self) -> DnaConfig {
        DnaConfig {
            embedding_dim: self.embedding_dim,
            adam: self.adam(self.dna_learning_rate, self.dna_weight_decay),
            val_fraction: self.dna_val_fraction,
            max_epochs: self.dna_epochs,
            patience: self.dna_patience,
            second_order: self.second_order,
            hvp_epsilon: self.hvp_epsilon,
            batch_size: self.dna_batch_size,
            seed: derive_seed(self.seed, 101),
        }
    }

    pub fn genome_config(&self) -> GenomeConfig {
        GenomeConfig {
            adam: self.adam(self.genome_learning_rate, self.genome_weight_decay),
            rda: RdaConfig {
                gamma: self.gamma,
                c: self.c,
                mu: self.mu,
            },
            mutation: MutationConfig {
                lambda: self.lambda,
                sigma: self.sigma,
                tau: self.tau,
                seed: derive_seed(self.seed, 103),
            },
            max_epochs: self.genome_epochs,
            patience: self.genome_patience,
            batch_size: self.genome_batch_size,
            seed: derive_seed(self.seed, 102),
            normalize_interactions: self.normalize_interactions,
            snapshot_every: self.snapshot_every,
        }
    }

    pub fn functioning_config(&self) -> FunctioningConfig {
        FunctioningConfig {
            depth: self.mlp_depth,
            width: self.mlp_width,
            adam: self.adam(self.final_learning_rate, self.final_weight_decay),
            max_epochs: self.final_epochs,
            patience: self.final_patience,
            batch_size: self.final_batch_size,
            seed: derive_seed(self.seed, 104),
            warm_start_ff: self.warm_start_ff,
            fresh_embeddings: self.fresh_embeddings,
        }
    }

    /// Checks every sub-configuration and that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        if self.train_path.is_none() {
            self.synthetic.validate()?;
        }
        for p in self.train_path.iter().chain(&self.test_path) {
            if !p.exists() {
                return Err(CellError::Config(format!("data file {} does not exist", p.display())));
            }
        }
        let frac_ok = |f: f64| (0.0..1.0).contains(&f);
        if !frac_ok(self.test_fraction) || !frac_ok(self.val_fraction) || self.test_fraction + self.val_fraction >= 1.0 {
            return Err(CellError::Config("test_fraction and val_fraction must lie in [0, 1) and sum below 1".into()));
        }
        if !(self.adam_beta1 >= 0.0 && self.adam_beta1 < 1.0 && self.adam_beta2 >= 0.0 && self.adam_beta2 < 1.0) {
            return Err(CellError::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(CellError::Config("adam_eps must be positive".into()));
        }
        self.dna_config().validate()?;
        self.genome_config().validate()?;
        self.functioning_config().validate()
    }
}

/// The data a pipeline run trains and evaluates on.
#[derive(Debug, Clone)]
pub struct PipelineData {
    /// Training data for all three stages.
    pub train: Dataset,
    /// Stage-III early-stopping data.
    pub val: Dataset,
    pub test: Option<Dataset>,
    pub ground_truth: Option<GroundTruth>,
}

fn infer_fields(path: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(path).map_err(|e| CellError::io(path, e))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).ok_or(CellError::Empty)?;
    Ok(first.split(',').count().saturating_sub(1))
}

/// Loads or generates the data and carves out validation and test sets.
pub fn prepare_data(cfg: &PipelineConfig) -> Result<PipelineData> {
    let (full, ground_truth) = match &cfg.train_path {
        Some(path) => {
            let m = match cfg.num_fields {
                Some(m) => m,
                None => infer_fields(path)?,
            };
            (load_csv(path, m)?, None)
        }
        None => {
            let (ds, gt) = generate_synthetic(&cfg.synthetic)?;
            (ds, Some(gt))
        }
    };
    let (pool, test) = match &cfg.test_path {
        Some(path) => {
            let test = load_csv(path, full.num_fields())?;
            let mut cards = full.field_cardinalities.clone();
            for (c, t) in cards.iter_mut().zip(&test.field_cardinalities) {
                *c = (*c).max(*t);
            }
            (full.with_cardinalities(&cards)?, Some(test.with_cardinalities(&cards)?))
        }
        None if cfg.test_fraction > 0.0 => {
            let (tr, _, te) = split(&full, (1.0 - cfg.test_fraction, 0.0, cfg.test_fraction), derive_seed(cfg.seed, 1))?;
            (tr, (!te.is_empty()).then_some(te))
        }
        None => (full, None),
    };
    let (train, val, _) = split(&pool, (1.0 - cfg.val_fraction, cfg.val_fraction, 0.0), derive_seed(cfg.seed, 2))?;
    let (train, val) = if train.is_empty() { (val.clone(), val) } else { (train, val) };
    Ok(PipelineData {
        train,
        val,
        test,
        ground_truth,
    })
}

fn base_checkpoint(cfg: &PipelineConfig, table: EmbeddingTable, assignment: OperationAssignment) -> Checkpoint {
    Checkpoint {
        stage: 1,
        config: serde_json::to_value(cfg).expect("config serializes"),
        table,
        assignment,
        theta: None,
        pair_weights: None,
        alpha: None,
        beta: None,
        norm: None,
        final_model: None,
        dna_history: None,
        genome_history: None,
        events: Vec::new(),
        functioning_history: None,
    }
}

/// Stage I, or the seeded random wiring when `skip_dna` is set.
pub fn run_stage_one(cfg: &PipelineConfig, train: &Dataset) -> Result<Checkpoint> {
    let stage = || -> Result<Checkpoint> {
        if cfg.skip_dna {
            let dim = cfg.embedding_dim;
            let m = train.num_fields();
            let table = EmbeddingTable::init(&train.field_cardinalities, dim, derive_seed(cfg.seed, 110))?;
            let assignment = OperationAssignment::random(m, dim, &mut seeded(derive_seed(cfg.seed, 111)));
            return Ok(base_checkpoint(cfg, table, assignment));
        }
        let out = run_dna_search(train, &cfg.dna_config())?;
        let mut ck = base_checkpoint(cfg, out.model.table.clone(), out.assignment);
        ck.theta = Some(out.model.theta.clone());
        ck.pair_weights = Some(out.model.weights.values.clone());
        ck.dna_history = Some(out.history);
        Ok(ck)
    };
    stage().map_err(|e| e.in_stage("dna search"))
}

/// Stage II on top of a stage-I checkpoint, or unit relevance when `skip_genome` is set.
pub fn run_stage_two(cfg: &PipelineConfig, train: &Dataset, prev: &Checkpoint) -> Result<Checkpoint> {
    let stage = || -> Result<Checkpoint> {
        let mut ck = prev.clone();
        ck.stage = 2;
        ck.config = serde_json::to_value(cfg).expect("config serializes");
        ck.final_model = None;
        ck.functioning_history = None;
        let m = prev.assignment.m;
        if cfg.skip_genome {
            ck.alpha = Some(vec![1.0; m]);
            ck.beta = Some(vec![1.0; pair_count(m)]);
            ck.norm = None;
            ck.genome_history = None;
            ck.events = Vec::new();
            return Ok(ck);
        }
        let out = run_genome_search(train, prev.table.clone(), prev.assignment.clone(), &cfg.genome_config())?;
        ck.table = out.model.table;
        ck.assignment = out.model.assignment;
        ck.alpha = Some(out.model.alpha);
        ck.beta = Some(out.model.beta);
        ck.norm = out.model.norm;
        ck.genome_history = Some(out.history);
        ck.events = out.events;
        Ok(ck)
    };
    stage().map_err(|e| e.in_stage("genome search"))
}

/// Stage III on top of a stage-II checkpoint.
pub fn run_stage_three(cfg: &PipelineConfig, data: &PipelineData, prev: &Checkpoint) -> Result<Checkpoint> {
    let stage = || -> Result<Checkpoint> {
        let (Some(alpha), Some(beta)) = (&prev.alpha, &prev.beta) else {
            return Err(CellError::Checkpoint("stage III needs relevance from stage II".into()));
        };
        let (model, history) = train_final(
            &data.train,
            &data.val,
            prev.table.clone(),
            alpha,
            beta,
            &prev.assignment,
            &cfg.functioning_config(),
        )?;
        let mut ck = prev.clone();
        ck.stage = 3;
        ck.config = serde_json::to_value(cfg).expect("config serializes");
        ck.final_model = Some(model);
        ck.functioning_history = Some(history);
        Ok(ck)
    };
    stage().map_err(|e| e.in_stage("model functioning"))
}

/// Checkpoints produced by a run, one per executed stage.
#[derive(Debug, Clone, Default)]
pub struct PipelineRun {
    pub checkpoints: Vec<Checkpoint>,
}

impl PipelineRun {
    pub fn last(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    pub fn final_model(&self) -> Option<&FinalModel> {
        self.last().and_then(|c| c.final_model.as_ref())
    }
}

/// Runs the stages after `from` (or from scratch) through stage `until`.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    data: &PipelineData,
    from: Option<Checkpoint>,
    until: u8,
) -> Result<PipelineRun> {
    cfg.validate()?;
    if !(1..=3).contains(&until) {
        return Err(CellError::Config(format!("stage must be 1, 2 or 3, got {until}")));
    }
    let start = from.as_ref().map_or(0, |c| c.stage);
    if start >= until {
        return Err(CellError::Config(format!(
            "checkpoint is already at stage {start}, nothing to run up to stage {until}"
        )));
    }
    if let Some(ck) = &from {
        if ck.table.cardinalities.len() != data.train.num_fields() {
            return Err(CellError::Shape("checkpoint and dataset disagree on the number of fields".into()));
        }
    }
    let mut run = PipelineRun::default();
    let mut prev = from;
    for stage in start + 1..=until {
        let ck = match stage {
            1 => run_stage_one(cfg, &data.train)?,
            2 => run_stage_two(cfg, &data.train, prev.as_ref().expect("stage I output"))?,
            _ => run_stage_three(cfg, data, prev.as_ref().expect("stage II output"))?,
        };
        run.checkpoints.push(ck.clone());
        prev = Some(ck);
    }
    Ok(run)
}

/// Evaluates a final model on a dataset.
pub fn evaluate(model: &FinalModel, ds: &Dataset) -> Result<EvalReport> {
    let preds = model.predict_dataset(ds)?;
    EvalReport::compute(&preds, &ds.labels())
}

/// Runs `f` on a pool of `threads` workers, or on the ambient pool when `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| CellError::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Worker count from `CELL_THREADS`, if set.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("CELL_THREADS") {
        Err(_) => Ok(None),
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| CellError::Config(format!("CELL_THREADS must be a positive integer, got {s:?}"))),
    }
}
