//! Stage I: operation fitness search.
//!
//! Every pair carries a softmax-mixed interaction over the four operations,
//! `g_bar = sum_k softmax(theta)_k * g_k(f_i, f_j)`, and the linkage response is
//! `sigmoid(sum_{i<j} w_ij * sum(g_bar(f_i, f_j)))`. The fitness `theta` is the
//! upper-level variable, trained on a held-out stream; weights, embeddings and
//! feed-forward parameters are trained on the training stream. At the end each
//! pair keeps its argmax operation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{batches, split, Batch, Dataset, Instance};
use crate::embedding::{EmbeddingGrad, EmbeddingOptimizer, EmbeddingTable};
use crate::error::{CellError, Result};
use crate::genemap::{snapshot, GeneMapFrame, StageState};
use crate::interactions::{op_backward_into, op_forward, FFParams, OperationKind, OpTape, ALL_KINDS};
use crate::metrics::instance_logloss;
use crate::optim::{AdamConfig, AdamState};
use crate::pairs::{all_pairs, pair_count, Pair};
use crate::util::{derive_seed, seeded, sigmoid, uniform_vec, Rng};

/// Instances per gradient work unit. Fixed so that floating-point reduction
/// order never depends on the number of worker threads.
pub(crate) const GRAD_CHUNK: usize = 32;

pub const THETA_INIT: f64 = 0.01;

/// Operation fitness: four values per pair, in operation-code order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaFitness {
    pub m: usize,
    pub values: Vec<[f64; 4]>,
}

impl ThetaFitness {
    pub fn init(m: usize, rng: &mut Rng) -> Self {
        let flat = uniform_vec(rng, 4 * pair_count(m), THETA_INIT);
        ThetaFitness {
            m,
            values: flat.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
        }
    }

    pub fn zeros(m: usize) -> Self {
        ThetaFitness {
            m,
            values: vec![[0.0; 4]; pair_count(m)],
        }
    }

    pub fn mixing(&self) -> Vec<[f64; 4]> {
        self.values.iter().map(softmax4).collect()
    }
}

/// Softmax over one pair's four fitness values.
pub fn softmax4(theta: &[f64; 4]) -> [f64; 4] {
    let max = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = theta.map(|t| (t - max).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// Convex combination of the four operation outputs with softmax(theta) weights.
pub fn mixed_interaction(theta_pair: &[f64; 4], op_outputs: &[Vec<f64>; 4]) -> Vec<f64> {
    let pi = softmax4(theta_pair);
    let dim = op_outputs[0].len();
    let mut out = vec![0.0; dim];
    for (k, o) in op_outputs.iter().enumerate() {
        for (acc, v) in out.iter_mut().zip(o) {
            *acc += pi[k] * v;
        }
    }
    out
}

/// Per-pair argmax of the fitness; ties go to the lowest operation code.
pub fn discretize(theta: &ThetaFitness) -> Vec<OperationKind> {
    theta
        .values
        .iter()
        .map(|v| {
            let mut best = 0;
            for k in 1..4 {
                if v[k] > v[best] {
                    best = k;
                }
            }
            ALL_KINDS[best]
        })
        .collect()
}

/// Scalar weight per pair in the linkage response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairWeights {
    pub values: Vec<f64>,
}

/// Feed-forward parameters of both parameterized candidates for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFf {
    pub product_ff: FFParams,
    pub concat_ff: FFParams,
}

impl PairFf {
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        PairFf {
            product_ff: FFParams::init(OperationKind::ProductFF, dim, rng).expect("ff kind"),
            concat_ff: FFParams::init(OperationKind::ConcatFF, dim, rng).expect("ff kind"),
        }
    }

    fn zeros_like(&self) -> Self {
        PairFf {
            product_ff: FFParams::zeros(self.product_ff.in_dim, self.product_ff.dim),
            concat_ff: FFParams::zeros(self.concat_ff.in_dim, self.concat_ff.dim),
        }
    }

    pub fn get(&self, kind: OperationKind) -> Option<&FFParams> {
        match kind {
            OperationKind::ProductFF => Some(&self.product_ff),
            OperationKind::ConcatFF => Some(&self.concat_ff),
            _ => None,
        }
    }

    fn get_mut(&mut self, kind: OperationKind) -> Option<&mut FFParams> {
        match kind {
            OperationKind::ProductFF => Some(&mut self.product_ff),
            OperationKind::ConcatFF => Some(&mut self.concat_ff),
            _ => None,
        }
    }
}

/// One operation per pair, with the feed-forward parameters that operation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct OperationAssignment {
    pub m: usize,
    pub dim: usize,
    pub kinds: Vec<OperationKind>,
    pub ff: Vec<Option<FFParams>>,
}

impl OperationAssignment {
    /// Builds an assignment, creating fresh feed-forward parameters where needed.
    pub fn fresh(m: usize, dim: usize, kinds: Vec<OperationKind>, rng: &mut Rng) -> Self {
        let ff = kinds.iter().map(|&k| FFParams::init(k, dim, rng)).collect();
        OperationAssignment { m, dim, kinds, ff }
    }

    /// Uniformly random operation per pair.
    pub fn random(m: usize, dim: usize, rng: &mut Rng) -> Self {
        use rand::Rng as _;
        let kinds = (0..pair_count(m))
            .map(|_| ALL_KINDS[rng.random_range(0..4)])
            .collect();
        Self::fresh(m, dim, kinds, rng)
    }

    pub fn pairs(&self) -> Vec<Pair> {
        all_pairs(self.m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinds.len() != pair_count(self.m) || self.ff.len() != self.kinds.len() {
            return Err(CellError::Shape(format!(
                "assignment covers {} pairs, m={} needs {}",
                self.kinds.len(),
                self.m,
                pair_count(self.m)
            )));
        }
        for (p, (&k, ff)) in self.kinds.iter().zip(&self.ff).enumerate() {
            let ok = match ff {
                Some(params) => params.matches(k, self.dim),
                None => !k.needs_ff(),
            };
            if !ok {
                return Err(CellError::Shape(format!(
                    "pair {p}: feed-forward params inconsistent with {k}"
                )));
            }
        }
        Ok(())
    }
}

/// The stage-I model.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkageModel {
    pub table: EmbeddingTable,
    pub weights: PairWeights,
    pub theta: ThetaFitness,
    pub bank: Vec<PairFf>,
}

/// Gradients of the mean batch Logloss of a [`LinkageModel`].
#[derive(Debug, Clone)]
pub struct LinkageGrads {
    pub theta: Vec<[f64; 4]>,
    pub weights: Vec<f64>,
    pub embeddings: EmbeddingGrad,
    pub bank: Vec<PairFf>,
}

impl LinkageGrads {
    fn zeros(model: &LinkageModel) -> Self {
        LinkageGrads {
            theta: vec![[0.0; 4]; model.theta.values.len()],
            weights: vec![0.0; model.weights.values.len()],
            embeddings: EmbeddingGrad::new(model.table.dim),
            bank: model.bank.iter().map(PairFf::zeros_like).collect(),
        }
    }

    fn merge(&mut self, other: &LinkageGrads) {
        for (a, b) in self.theta.iter_mut().zip(&other.theta) {
            for k in 0..4 {
                a[k] += b[k];
            }
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        self.embeddings.merge(&other.embeddings);
        for (a, b) in self.bank.iter_mut().zip(&other.bank) {
            a.product_ff.add_scaled(&b.product_ff, 1.0);
            a.concat_ff.add_scaled(&b.concat_ff, 1.0);
        }
    }
}

struct PairTrace {
    tapes: [OpTape; 4],
    sums: [f64; 4],
    mixing: [f64; 4],
    mixed: f64,
}

impl LinkageModel {
    /// Weights start at one, fitness uniform in +-0.01, embeddings Gaussian(0, 0.01).
    pub fn init(cardinalities: &[usize], dim: usize, seed: u64) -> Result<Self> {
        let m = cardinalities.len();
        let table = EmbeddingTable::init(cardinalities, dim, derive_seed(seed, 10))?;
        let mut rng = seeded(derive_seed(seed, 11));
        let theta = ThetaFitness::init(m, &mut rng);
        let bank = (0..pair_count(m)).map(|_| PairFf::init(dim, &mut rng)).collect();
        Ok(LinkageModel {
            table,
            weights: PairWeights {
                values: vec![1.0; pair_count(m)],
            },
            theta,
            bank,
        })
    }

    pub fn num_fields(&self) -> usize {
        self.table.num_fields()
    }

    fn trace_pair(&self, p: usize, fi: &[f64], fj: &[f64]) -> Result<PairTrace> {
        let mut outs: Vec<(f64, OpTape)> = Vec::with_capacity(4);
        for kind in ALL_KINDS {
            let (o, tape) = op_forward(kind, fi, fj, self.bank[p].get(kind))?;
            outs.push((o.iter().sum(), tape));
        }
        let mixing = softmax4(&self.theta.values[p]);
        let sums = [outs[0].0, outs[1].0, outs[2].0, outs[3].0];
        let mixed: f64 = (0..4).map(|k| mixing[k] * sums[k]).sum();
        let mut it = outs.into_iter().map(|(_, t)| t);
        let tapes = [
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
        ];
        Ok(PairTrace {
            tapes,
            sums,
            mixing,
            mixed,
        })
    }

    fn forward(&self, inst: &Instance) -> Result<(f64, Vec<PairTrace>)> {
        let rows = self.table.lookup(inst)?;
        let pairs = all_pairs(self.num_fields());
        let mut z = 0.0;
        let mut traces = Vec::with_capacity(pairs.len());
        for (p, pair) in pairs.iter().enumerate() {
            let tr = self.trace_pair(p, rows[pair.i], rows[pair.j])?;
            if !tr.mixed.is_finite() {
                return Err(CellError::NonFinite(format!(
                    "mixed interaction of pair ({}, {})",
                    pair.i, pair.j
                )));
            }
            z += self.weights.values[p] * tr.mixed;
            traces.push(tr);
        }
        Ok((z, traces))
    }

    /// Pre-sigmoid linkage response.
    pub fn logit(&self, inst: &Instance) -> Result<f64> {
        Ok(self.forward(inst)?.0)
    }

    /// Linkage response for each instance.
    pub fn linkage_response<'a>(&self, instances: impl IntoIterator<Item = &'a Instance>) -> Result<Vec<f64>> {
        instances
            .into_iter()
            .map(|inst| self.logit(inst).map(sigmoid))
            .collect()
    }

    /// Mean Logloss over the instances at `indices`.
    pub fn loss(&self, ds: &Dataset, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Err(CellError::Empty);
        }
        let parts: Vec<Result<f64>> = indices
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut s = 0.0;
                for &k in chunk {
                    let inst = &ds.instances[k];
                    s += instance_logloss(sigmoid(self.logit(inst)?), inst.label);
                }
                Ok(s)
            })
            .collect();
        let mut total = 0.0;
        for p in parts {
            total += p?;
        }
        Ok(total / indices.len() as f64)
    }

    fn chunk_grads(&self, ds: &Dataset, chunk: &[usize], inv_b: f64) -> Result<(f64, LinkageGrads)> {
        let pairs = all_pairs(self.num_fields());
        let dim = self.table.dim;
        let mut g = LinkageGrads::zeros(self);
        let mut loss = 0.0;
        let mut upstream = vec![0.0; dim];
        let mut dfields = vec![0.0; self.num_fields() * dim];
        for &k in chunk {
            let inst = &ds.instances[k];
            let (z, traces) = self.forward(inst)?;
            dfields.iter_mut().for_each(|v| *v = 0.0);
            let yhat = sigmoid(z);
            loss += instance_logloss(yhat, inst.label);
            let r = (yhat - f64::from(inst.label)) * inv_b;
            for (p, (pair, tr)) in pairs.iter().zip(&traces).enumerate() {
                let w = self.weights.values[p];
                g.weights[p] += r * tr.mixed;
                for kk in 0..4 {
                    g.theta[p][kk] += r * w * tr.mixing[kk] * (tr.sums[kk] - tr.mixed);
                    let coef = r * w * tr.mixing[kk];
                    upstream.iter_mut().for_each(|u| *u = coef);
                    let kind = ALL_KINDS[kk];
                    let (g_i, g_j) = field_pair_mut(&mut dfields, dim, pair);
                    op_backward_into(
                        kind,
                        &tr.tapes[kk],
                        &upstream,
                        self.bank[p].get(kind),
                        g_i,
                        g_j,
                        g.bank[p].get_mut(kind),
                    )?;
                }
            }
            for (field, &idx) in inst.fields.iter().enumerate() {
                g.embeddings.add(field, idx, &dfields[field * dim..(field + 1) * dim], 1.0);
            }
        }
        Ok((loss, g))
    }

    /// Mean Logloss over `indices` and its exact gradient.
    pub fn loss_and_grads(&self, ds: &Dataset, indices: &[usize]) -> Result<(f64, LinkageGrads)> {
        if indices.is_empty() {
            return Err(CellError::Empty);
        }
        let inv_b = 1.0 / indices.len() as f64;
        let parts: Vec<Result<(f64, LinkageGrads)>> = indices
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| self.chunk_grads(ds, chunk, inv_b))
            .collect();
        let mut total = LinkageGrads::zeros(self);
        let mut loss = 0.0;
        for part in parts {
            let (l, g) = part?;
            loss += l;
            total.merge(&g);
        }
        Ok((loss * inv_b, total))
    }

    /// Gradient of the mean batch Logloss with respect to the fitness only.
    /// Needs no backward pass through the operations.
    pub fn theta_grad(&self, ds: &Dataset, indices: &[usize]) -> Result<Vec<[f64; 4]>> {
        if indices.is_empty() {
            return Err(CellError::Empty);
        }
        let inv_b = 1.0 / indices.len() as f64;
        let parts: Vec<Result<Vec<[f64; 4]>>> = indices
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut g = vec![[0.0; 4]; self.theta.values.len()];
                for &k in chunk {
                    let inst = &ds.instances[k];
                    let (z, traces) = self.forward(inst)?;
                    let r = (sigmoid(z) - f64::from(inst.label)) * inv_b;
                    for (p, tr) in traces.iter().enumerate() {
                        let w = self.weights.values[p];
                        for kk in 0..4 {
                            g[p][kk] += r * w * tr.mixing[kk] * (tr.sums[kk] - tr.mixed);
                        }
                    }
                }
                Ok(g)
            })
            .collect();
        let mut total = vec![[0.0; 4]; self.theta.values.len()];
        for part in parts {
            for (a, b) in total.iter_mut().zip(part?) {
                for kk in 0..4 {
                    a[kk] += b[kk];
                }
            }
        }
        Ok(total)
    }

    /// Discrete assignment from the current fitness, carrying over the
    /// feed-forward parameters of each chosen operation.
    pub fn assignment(&self) -> OperationAssignment {
        let kinds = discretize(&self.theta);
        let ff = kinds
            .iter()
            .zip(&self.bank)
            .map(|(&k, bank)| bank.get(k).cloned())
            .collect();
        OperationAssignment {
            m: self.num_fields(),
            dim: self.table.dim,
            kinds,
            ff,
        }
    }

    fn shifted(&self, dw: &[f64], demb: &EmbeddingGrad, scale: f64) -> LinkageModel {
        let mut m = self.clone();
        for (w, d) in m.weights.values.iter_mut().zip(dw) {
            *w += scale * d;
        }
        m.table.add_sparse(demb, scale);
        m
    }
}

/// Gradient of the validation loss after one unrolled training step,
/// `d/dtheta L_val(w - xi dL_train/dw, f - xi dL_train/df, theta)`.
///
/// The second-order term is a central finite-difference Hessian-vector
/// product with step `hvp_epsilon / |grad_{w',f'} L_val|`.
pub fn unrolled_theta_grad(
    model: &LinkageModel,
    train: &Dataset,
    train_idx: &[usize],
    val: &Dataset,
    val_idx: &[usize],
    xi: f64,
    hvp_epsilon: f64,
) -> Result<Vec<[f64; 4]>> {
    let (_, gt) = model.loss_and_grads(train, train_idx)?;
    let unrolled = model.shifted(&gt.weights, &gt.embeddings, -xi);
    let (_, gv) = unrolled.loss_and_grads(val, val_idx)?;
    let norm = (gv.weights.iter().map(|v| v * v).sum::<f64>() + gv.embeddings.sq_norm()).sqrt();
    if norm == 0.0 || xi == 0.0 {
        return Ok(gv.theta);
    }
    let eps = hvp_epsilon / norm;
    let plus = model.shifted(&gv.weights, &gv.embeddings, eps);
    let minus = model.shifted(&gv.weights, &gv.embeddings, -eps);
    let (_, gp) = plus.loss_and_grads(train, train_idx)?;
    let (_, gm) = minus.loss_and_grads(train, train_idx)?;
    let mut out = gv.theta;
    for (p, o) in out.iter_mut().enumerate() {
        for k in 0..4 {
            o[k] -= xi * (gp.theta[p][k] - gm.theta[p][k]) / (2.0 * eps);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnaConfig {
    pub embedding_dim: usize,
    /// Adam settings; the learning rate doubles as the unrolling step `xi`.
    pub adam: AdamConfig,
    pub val_fraction: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub second_order: bool,
    pub hvp_epsilon: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DnaConfig {
    fn default() -> Self {
        DnaConfig {
            embedding_dim: 8,
            adam: AdamConfig::default(),
            val_fraction: 0.5,
            max_epochs: 10,
            patience: 3,
            second_order: false,
            hvp_epsilon: 0.01,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl DnaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(CellError::Config(format!(
                "dna val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(CellError::Config("dna learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.embedding_dim == 0 {
            return Err(CellError::Config(
                "dna batch_size, max_epochs and embedding_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One per-epoch convergence check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnaCheck {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub theta: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DnaHistory {
    pub checks: Vec<DnaCheck>,
    pub frames: Vec<GeneMapFrame>,
}

#[derive(Debug, Clone)]
pub struct DnaOutcome {
    pub model: LinkageModel,
    pub assignment: OperationAssignment,
    pub history: DnaHistory,
}

impl DnaOutcome {
    pub fn theta(&self) -> &ThetaFitness {
        &self.model.theta
    }
}

struct BatchCycle<'a> {
    ds: &'a Dataset,
    size: usize,
    seed: u64,
    round: u64,
    queue: Vec<Batch>,
}

impl<'a> BatchCycle<'a> {
    fn new(ds: &'a Dataset, size: usize, seed: u64) -> Self {
        BatchCycle {
            ds,
            size,
            seed,
            round: 0,
            queue: Vec::new(),
        }
    }

    fn next(&mut self) -> Result<Batch> {
        if self.queue.is_empty() {
            let mut b = batches(self.ds, self.size, Some(derive_seed(self.seed, self.round)))?;
            b.reverse();
            self.queue = b;
            self.round += 1;
        }
        Ok(self.queue.pop().expect("non-empty"))
    }
}

fn non_finite(stage: &str, epoch: usize, step: u64, what: &str, value: f64) -> CellError {
    CellError::NonFinite(format!("{stage} {what} = {value} at epoch {epoch}, step {step}"))
}

/// Runs the operation search to convergence on `train` (split internally into
/// training and validation streams).
pub fn run_dna_search(train: &Dataset, cfg: &DnaConfig) -> Result<DnaOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CellError::Empty);
    }
    let (tr, va, _) = split(
        train,
        (1.0 - cfg.val_fraction, cfg.val_fraction, 0.0),
        derive_seed(cfg.seed, 20),
    )?;
    let (tr, va) = match (tr.is_empty(), va.is_empty()) {
        (false, false) => (tr, va),
        // Too small to split: both streams see everything.
        _ => (train.clone(), train.clone()),
    };

    let mut model = LinkageModel::init(&train.field_cardinalities, cfg.embedding_dim, cfg.seed)?;
    let decay = cfg.adam;
    let mut theta_opt = AdamState::new("theta", decay.without_decay(), model.theta.values.len() * 4);
    let mut w_opt = AdamState::new("pair weights", decay, model.weights.values.len());
    let mut emb_opt = EmbeddingOptimizer::new(&model.table, decay);
    let mut bank_opt: Vec<(AdamState, AdamState)> = model
        .bank
        .iter()
        .enumerate()
        .map(|(p, b)| {
            (
                AdamState::new(format!("product_ff[{p}]"), decay, b.product_ff.num_params()),
                AdamState::new(format!("concat_ff[{p}]"), decay, b.concat_ff.num_params()),
            )
        })
        .collect();

    let val_all: Vec<usize> = (0..va.len()).collect();
    let mut val_cycle = BatchCycle::new(&va, cfg.batch_size, derive_seed(cfg.seed, 21));
    let mut history = DnaHistory::default();
    history.frames.push(snapshot(StageState::Dna { theta: &model.theta }, 0));

    let mut step: u64 = 0;
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    for epoch in 0..cfg.max_epochs {
        let mut loss_sum = 0.0;
        let epoch_batches = batches(&tr, cfg.batch_size, Some(derive_seed(cfg.seed, 1000 + epoch as u64)))?;
        let n_batches = epoch_batches.len();
        for batch in epoch_batches {
            let vb = val_cycle.next()?;
            let theta_grad = if cfg.second_order {
                unrolled_theta_grad(
                    &model,
                    &tr,
                    &batch.indices,
                    &va,
                    &vb.indices,
                    cfg.adam.learning_rate,
                    cfg.hvp_epsilon,
                )?
            } else {
                model.theta_grad(&va, &vb.indices)?
            };
            theta_opt.step(model.theta.values.as_flattened_mut(), theta_grad.as_flattened())?;

            let (loss, g) = model.loss_and_grads(&tr, &batch.indices)?;
            if !loss.is_finite() {
                return Err(non_finite("dna search", epoch, step, "train loss", loss));
            }
            loss_sum += loss;
            w_opt.step(&mut model.weights.values, &g.weights)?;
            emb_opt.step(&mut model.table, &g.embeddings)?;
            for ((params, grads), (po, co)) in model.bank.iter_mut().zip(&g.bank).zip(&mut bank_opt) {
                step_ff(po, &mut params.product_ff, &grads.product_ff)?;
                step_ff(co, &mut params.concat_ff, &grads.concat_ff)?;
            }
            step += 1;
        }
        let val_loss = model.loss(&va, &val_all)?;
        if !val_loss.is_finite() {
            return Err(non_finite("dna search", epoch, step, "validation loss", val_loss));
        }
        history.checks.push(DnaCheck {
            epoch,
            step,
            train_loss: loss_sum / n_batches as f64,
            val_loss,
            theta: model.theta.values.clone(),
        });
        history.frames.push(snapshot(StageState::Dna { theta: &model.theta }, step));
        if val_loss < best {
            best = val_loss;
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience {
            break;
        }
    }
    let assignment = model.assignment();
    Ok(DnaOutcome {
        model,
        assignment,
        history,
    })
}

/// Disjoint mutable views of the gradient rows of `pair.i` and `pair.j` (i < j).
pub(crate) fn field_pair_mut<'a>(buf: &'a mut [f64], dim: usize, pair: &Pair) -> (&'a mut [f64], &'a mut [f64]) {
    let (lo, hi) = buf.split_at_mut(pair.j * dim);
    (&mut lo[pair.i * dim..(pair.i + 1) * dim], &mut hi[..dim])
}

/// Adam step on a feed-forward layer viewed as `[weight..., bias...]`.
pub(crate) fn step_ff(state: &mut AdamState, params: &mut FFParams, grad: &FFParams) -> Result<()> {
    let mut flat: Vec<f64> = params.weight.iter().chain(&params.bias).copied().collect();
    let g: Vec<f64> = grad.weight.iter().chain(&grad.bias).copied().collect();
    state.step(&mut flat, &g)?;
    let nw = params.weight.len();
    params.weight.copy_from_slice(&flat[..nw]);
    params.bias.copy_from_slice(&flat[nw..]);
    Ok(())
}
