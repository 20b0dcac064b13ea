//! Stage II: sparse relevance search with operation mutation.
//!
//! The genome response is
//! `sigmoid(sum_i alpha_i * sum(f_i) + sum_{i<j} beta_ij * sum(g_ij(f_i, f_j)))`
//! with each pair's operation fixed by stage I. Embeddings and active
//! feed-forward layers follow Adam; `alpha`, `beta` follow RDA, whose
//! soft-thresholding drives irrelevant coordinates to exactly zero. Every `tau`
//! steps a pair with `|beta| < lambda` swaps its operation with probability
//! `1 / sigma`.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{batches, Dataset, Instance};
use crate::dna_search::{field_pair_mut, step_ff, OperationAssignment, GRAD_CHUNK};
use crate::embedding::{EmbeddingGrad, EmbeddingOptimizer, EmbeddingTable};
use crate::error::{CellError, Result};
use crate::genemap::{snapshot, GeneMapFrame, StageState};
use crate::interactions::{op_backward_into, op_forward, FFParams, OperationKind, OpTape, ALL_KINDS};
use crate::metrics::instance_logloss;
use crate::optim::{AdamConfig, AdamState, RdaConfig, RdaState};
use crate::pairs::{all_pairs, Pair};
use crate::util::{derive_seed, seeded, sigmoid, uniform_vec, Rng};

pub const RELEVANCE_INIT: f64 = 0.01;
const NORM_EPS: f64 = 1e-5;
const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MutationConfig {
    /// Relevance threshold `lambda` on `|beta|`.
    pub lambda: f64,
    /// Inverse mutation probability `sigma`.
    pub sigma: f64,
    /// Optimizer steps between checks.
    pub tau: u64,
    pub seed: u64,
}

impl Default for MutationConfig {
    fn default() -> Self {
        MutationConfig {
            lambda: 0.1,
            sigma: 5.0,
            tau: 100,
            seed: 0,
        }
    }
}

impl MutationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.sigma >= 1.0) || self.tau == 0 {
            return Err(CellError::Config(format!(
                "mutation needs lambda >= 0, sigma >= 1, tau >= 1 (got {}, {}, {})",
                self.lambda, self.sigma, self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationEvent {
    pub step: u64,
    pub i: usize,
    pub j: usize,
    pub old: OperationKind,
    pub new: OperationKind,
    pub beta: f64,
}

/// JSON-lines rendering of a mutation log.
pub fn events_to_jsonl(events: &[MutationEvent]) -> String {
    events
        .iter()
        .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
        .collect()
}

/// Mutation check for every pair: pairs with `|beta| < lambda` switch, with
/// probability `1 / sigma`, to an operation drawn uniformly from the other three.
/// Mutated pairs get fresh feed-forward parameters when the new operation needs them.
pub fn mutate(
    assignment: &OperationAssignment,
    beta: &[f64],
    cfg: &MutationConfig,
    step: u64,
    rng: &mut Rng,
) -> (OperationAssignment, Vec<MutationEvent>) {
    let mut out = assignment.clone();
    let mut events = Vec::new();
    let p = 1.0 / cfg.sigma;
    for (k, pair) in all_pairs(assignment.m).into_iter().enumerate() {
        if beta[k].abs() >= cfg.lambda {
            continue;
        }
        if rng.random::<f64>() >= p {
            continue;
        }
        let old = assignment.kinds[k];
        let others: Vec<OperationKind> = ALL_KINDS.into_iter().filter(|&g| g != old).collect();
        let new = others[rng.random_range(0..others.len())];
        out.kinds[k] = new;
        out.ff[k] = FFParams::init(new, assignment.dim, rng);
        events.push(MutationEvent {
            step,
            i: pair.i,
            j: pair.j,
            old,
            new,
            beta: beta[k],
        });
    }
    (out, events)
}

/// Batch standardization of the per-pair interaction scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionNorm {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// The stage-II model.
#[derive(Debug, Clone, PartialEq)]
pub struct GenomeModel {
    pub table: EmbeddingTable,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub assignment: OperationAssignment,
    pub norm: Option<InteractionNorm>,
}

#[derive(Debug, Clone)]
pub struct GenomeGrads {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub embeddings: EmbeddingGrad,
    pub ff: Vec<Option<FFParams>>,
    /// Batch mean and variance of the interaction scalars (normalized models only).
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

struct InstTrace {
    field_sums: Vec<f64>,
    pair_sums: Vec<f64>,
    tapes: Vec<OpTape>,
}

impl GenomeModel {
    pub fn new(
        table: EmbeddingTable,
        assignment: OperationAssignment,
        alpha: Vec<f64>,
        beta: Vec<f64>,
        normalize: bool,
    ) -> Result<Self> {
        assignment.validate()?;
        if alpha.len() != assignment.m || beta.len() != assignment.kinds.len() {
            return Err(CellError::Shape(format!(
                "relevance sizes {} / {} do not match m={}",
                alpha.len(),
                beta.len(),
                assignment.m
            )));
        }
        if table.num_fields() != assignment.m || table.dim != assignment.dim {
            return Err(CellError::Shape("embedding table does not match assignment".into()));
        }
        let p = beta.len();
        Ok(GenomeModel {
            table,
            alpha,
            beta,
            assignment,
            norm: normalize.then(|| InteractionNorm {
                running_mean: vec![0.0; p],
                running_var: vec![1.0; p],
            }),
        })
    }

    fn trace(&self, inst: &Instance) -> Result<InstTrace> {
        let rows = self.table.lookup(inst)?;
        let field_sums = rows.iter().map(|r| r.iter().sum()).collect();
        let pairs = all_pairs(self.assignment.m);
        let mut pair_sums = Vec::with_capacity(pairs.len());
        let mut tapes = Vec::with_capacity(pairs.len());
        for (p, pair) in pairs.iter().enumerate() {
            let (o, tape) = op_forward(
                self.assignment.kinds[p],
                rows[pair.i],
                rows[pair.j],
                self.assignment.ff[p].as_ref(),
            )?;
            let e: f64 = o.iter().sum();
            if !e.is_finite() {
                return Err(CellError::NonFinite(format!(
                    "interaction of pair ({}, {})",
                    pair.i, pair.j
                )));
            }
            pair_sums.push(e);
            tapes.push(tape);
        }
        Ok(InstTrace {
            field_sums,
            pair_sums,
            tapes,
        })
    }

    fn logit_from(&self, tr: &InstTrace, stats: Option<(&[f64], &[f64])>) -> f64 {
        let mut z: f64 = self.alpha.iter().zip(&tr.field_sums).map(|(a, s)| a * s).sum();
        for (p, &e) in tr.pair_sums.iter().enumerate() {
            let e = match stats {
                Some((mean, var)) => (e - mean[p]) / (var[p] + NORM_EPS).sqrt(),
                None => e,
            };
            z += self.beta[p] * e;
        }
        z
    }

    /// Pre-sigmoid genome response (running statistics when normalized).
    pub fn logit(&self, inst: &Instance) -> Result<f64> {
        let tr = self.trace(inst)?;
        let stats = self
            .norm
            .as_ref()
            .map(|n| (n.running_mean.as_slice(), n.running_var.as_slice()));
        Ok(self.logit_from(&tr, stats))
    }

    pub fn genome_response<'a>(&self, instances: impl IntoIterator<Item = &'a Instance>) -> Result<Vec<f64>> {
        instances
            .into_iter()
            .map(|inst| self.logit(inst).map(sigmoid))
            .collect()
    }

    fn traces(&self, ds: &Dataset, indices: &[usize]) -> Result<Vec<InstTrace>> {
        let parts: Vec<Result<Vec<InstTrace>>> = indices
            .par_chunks(GRAD_CHUNK)
            .map(|c| c.iter().map(|&k| self.trace(&ds.instances[k])).collect())
            .collect();
        let mut out = Vec::with_capacity(indices.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Mean Logloss over `indices` and its exact gradient (batch statistics
    /// when normalized).
    pub fn loss_and_grads(&self, ds: &Dataset, indices: &[usize]) -> Result<(f64, GenomeGrads)> {
        if indices.is_empty() {
            return Err(CellError::Empty);
        }
        let b = indices.len();
        let inv_b = 1.0 / b as f64;
        let n_pairs = self.beta.len();
        let traces = self.traces(ds, indices)?;

        let stats = self.norm.as_ref().map(|_| {
            let mut mean = vec![0.0; n_pairs];
            for tr in &traces {
                for (m, e) in mean.iter_mut().zip(&tr.pair_sums) {
                    *m += e;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_b);
            let mut var = vec![0.0; n_pairs];
            for tr in &traces {
                for (p, e) in tr.pair_sums.iter().enumerate() {
                    var[p] += (e - mean[p]).powi(2);
                }
            }
            var.iter_mut().for_each(|v| *v *= inv_b);
            (mean, var)
        });
        let stat_refs = stats.as_ref().map(|(m, v)| (m.as_slice(), v.as_slice()));

        let mut loss = 0.0;
        let mut resid = Vec::with_capacity(b);
        for (tr, &k) in traces.iter().zip(indices) {
            let y = ds.instances[k].label;
            let yhat = sigmoid(self.logit_from(tr, stat_refs));
            loss += instance_logloss(yhat, y);
            resid.push((yhat - f64::from(y)) * inv_b);
        }

        let mut g_alpha = vec![0.0; self.alpha.len()];
        let mut g_beta = vec![0.0; n_pairs];
        // upstream gradient on each raw interaction scalar, [instance][pair]
        let mut d_pair = vec![vec![0.0; n_pairs]; b];
        match stat_refs {
            None => {
                for (n, tr) in traces.iter().enumerate() {
                    let r = resid[n];
                    for (ga, s) in g_alpha.iter_mut().zip(&tr.field_sums) {
                        *ga += r * s;
                    }
                    for p in 0..n_pairs {
                        g_beta[p] += r * tr.pair_sums[p];
                        d_pair[n][p] = r * self.beta[p];
                    }
                }
            }
            Some((mean, var)) => {
                for p in 0..n_pairs {
                    let inv_std = 1.0 / (var[p] + NORM_EPS).sqrt();
                    let xhat: Vec<f64> = traces.iter().map(|t| (t.pair_sums[p] - mean[p]) * inv_std).collect();
                    let dxhat: Vec<f64> = resid.iter().map(|r| r * self.beta[p]).collect();
                    let mean_d = dxhat.iter().sum::<f64>() * inv_b;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(d, x)| d * x).sum::<f64>() * inv_b;
                    for n in 0..b {
                        g_beta[p] += resid[n] * xhat[n];
                        d_pair[n][p] = inv_std * (dxhat[n] - mean_d - xhat[n] * mean_dx);
                    }
                }
                for (n, tr) in traces.iter().enumerate() {
                    for (ga, s) in g_alpha.iter_mut().zip(&tr.field_sums) {
                        *ga += resid[n] * s;
                    }
                }
            }
        }

        let pairs = all_pairs(self.assignment.m);
        let dim = self.table.dim;
        let work: Vec<usize> = (0..b).collect();
        let parts: Vec<Result<(EmbeddingGrad, Vec<Option<FFParams>>)>> = work
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut emb = EmbeddingGrad::new(dim);
                let mut ff: Vec<Option<FFParams>> = self
                    .assignment
                    .ff
                    .iter()
                    .map(|f| f.as_ref().map(|p| FFParams::zeros(p.in_dim, p.dim)))
                    .collect();
                let mut upstream = vec![0.0; dim];
                let mut dfields = vec![0.0; self.alpha.len() * dim];
                for &n in chunk {
                    let inst = &ds.instances[indices[n]];
                    for (field, &a) in self.alpha.iter().enumerate() {
                        dfields[field * dim..(field + 1) * dim].fill(resid[n] * a);
                    }
                    for (p, pair) in pairs.iter().enumerate() {
                        upstream.iter_mut().for_each(|u| *u = d_pair[n][p]);
                        let kind = self.assignment.kinds[p];
                        let (g_i, g_j) = field_pair_mut(&mut dfields, dim, pair);
                        op_backward_into(
                            kind,
                            &traces[n].tapes[p],
                            &upstream,
                            self.assignment.ff[p].as_ref(),
                            g_i,
                            g_j,
                            ff[p].as_mut(),
                        )?;
                    }
                    for (field, &idx) in inst.fields.iter().enumerate() {
                        emb.add(field, idx, &dfields[field * dim..(field + 1) * dim], 1.0);
                    }
                }
                Ok((emb, ff))
            })
            .collect();
        let mut embeddings = EmbeddingGrad::new(dim);
        let mut ff: Vec<Option<FFParams>> = self
            .assignment
            .ff
            .iter()
            .map(|f| f.as_ref().map(|p| FFParams::zeros(p.in_dim, p.dim)))
            .collect();
        for part in parts {
            let (e, f) = part?;
            embeddings.merge(&e);
            for (dst, src) in ff.iter_mut().zip(&f) {
                if let (Some(d), Some(s)) = (dst.as_mut(), src.as_ref()) {
                    d.add_scaled(s, 1.0);
                }
            }
        }
        Ok((
            loss * inv_b,
            GenomeGrads {
                alpha: g_alpha,
                beta: g_beta,
                embeddings,
                ff,
                batch_stats: stats,
            },
        ))
    }

    /// Mean Logloss over `indices` (inference mode).
    pub fn loss(&self, ds: &Dataset, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Err(CellError::Empty);
        }
        let mut total = 0.0;
        for &k in indices {
            let inst = &ds.instances[k];
            total += instance_logloss(sigmoid(self.logit(inst)?), inst.label);
        }
        Ok(total / indices.len() as f64)
    }

    /// Pairs ranked by `|beta|`, largest first; ties keep pair order.
    pub fn ranked_pairs(&self) -> Vec<(Pair, f64)> {
        let mut v: Vec<(Pair, f64)> = all_pairs(self.assignment.m)
            .into_iter()
            .zip(self.beta.iter().copied())
            .collect();
        v.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenomeConfig {
    pub adam: AdamConfig,
    pub rda: RdaConfig,
    pub mutation: MutationConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub normalize_interactions: bool,
    /// Steps between gene-map frames; 0 means every `tau` steps.
    pub snapshot_every: u64,
}

impl Default for GenomeConfig {
    fn default() -> Self {
        GenomeConfig {
            adam: AdamConfig::default(),
            rda: RdaConfig::default(),
            mutation: MutationConfig::default(),
            max_epochs: 10,
            patience: 2,
            batch_size: 256,
            seed: 0,
            normalize_interactions: false,
            snapshot_every: 0,
        }
    }
}

impl GenomeConfig {
    pub fn validate(&self) -> Result<()> {
        self.mutation.validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(CellError::Config("genome batch_size and max_epochs must be positive".into()));
        }
        if !(self.rda.gamma > 0.0) || !(self.rda.c >= 0.0) {
            return Err(CellError::Config("rda needs gamma > 0 and c >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenomeCheck {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenomeHistory {
    pub checks: Vec<GenomeCheck>,
    pub frames: Vec<GeneMapFrame>,
}

#[derive(Debug, Clone)]
pub struct GenomeOutcome {
    pub model: GenomeModel,
    pub events: Vec<MutationEvent>,
    pub history: GenomeHistory,
}

fn ff_states(assignment: &OperationAssignment, adam: AdamConfig) -> Vec<Option<AdamState>> {
    assignment
        .ff
        .iter()
        .enumerate()
        .map(|(p, f)| f.as_ref().map(|f| AdamState::new(format!("ff[{p}]"), adam, f.num_params())))
        .collect()
}

/// Runs the relevance search starting from `table` and the stage-I `assignment`.
pub fn run_genome_search(
    train: &Dataset,
    table: EmbeddingTable,
    assignment: OperationAssignment,
    cfg: &GenomeConfig,
) -> Result<GenomeOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CellError::Empty);
    }
    let m = assignment.m;
    let mut init_rng = seeded(derive_seed(cfg.seed, 30));
    let init = uniform_vec(&mut init_rng, m + assignment.kinds.len(), RELEVANCE_INIT);
    let mut relevance = init.clone();
    let mut model = GenomeModel::new(
        table,
        assignment,
        init[..m].to_vec(),
        init[m..].to_vec(),
        cfg.normalize_interactions,
    )?;
    let mut rda = RdaState::new(cfg.rda, init);
    let mut emb_opt = EmbeddingOptimizer::new(&model.table, cfg.adam);
    let mut ff_opt = ff_states(&model.assignment, cfg.adam);
    let mut mut_rng = seeded(derive_seed(cfg.mutation.seed, 31));
    let snapshot_every = if cfg.snapshot_every == 0 {
        cfg.mutation.tau
    } else {
        cfg.snapshot_every
    };

    let mut history = GenomeHistory::default();
    let mut events = Vec::new();
    let frame = |model: &GenomeModel, step: u64, converged: bool| {
        snapshot(
            StageState::Genome {
                kinds: &model.assignment.kinds,
                alpha: &model.alpha,
                beta: &model.beta,
                converged,
            },
            step,
        )
    };
    history.frames.push(frame(&model, 0, false));

    let mut step: u64 = 0;
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    for epoch in 0..cfg.max_epochs {
        let mut loss_sum = 0.0;
        let epoch_batches = batches(train, cfg.batch_size, Some(derive_seed(cfg.seed, 2000 + epoch as u64)))?;
        let n_batches = epoch_batches.len();
        for batch in epoch_batches {
            let (loss, g) = model.loss_and_grads(train, &batch.indices)?;
            if !loss.is_finite() {
                return Err(CellError::NonFinite(format!(
                    "genome search train loss = {loss} at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += loss;
            emb_opt.step(&mut model.table, &g.embeddings)?;
            for ((params, grad), state) in model.assignment.ff.iter_mut().zip(&g.ff).zip(&mut ff_opt) {
                if let (Some(p), Some(gr), Some(st)) = (params.as_mut(), grad.as_ref(), state.as_mut()) {
                    step_ff(st, p, gr)?;
                }
            }
            let grads: Vec<f64> = g.alpha.iter().chain(&g.beta).copied().collect();
            rda.step(&mut relevance, &grads)?;
            model.alpha.copy_from_slice(&relevance[..m]);
            model.beta.copy_from_slice(&relevance[m..]);
            if let (Some(norm), Some((mean, var))) = (model.norm.as_mut(), g.batch_stats.as_ref()) {
                for p in 0..mean.len() {
                    norm.running_mean[p] = (1.0 - NORM_MOMENTUM) * norm.running_mean[p] + NORM_MOMENTUM * mean[p];
                    norm.running_var[p] = (1.0 - NORM_MOMENTUM) * norm.running_var[p] + NORM_MOMENTUM * var[p];
                }
            }
            step += 1;

            if step % cfg.mutation.tau == 0 {
                let (next, new_events) = mutate(&model.assignment, &model.beta, &cfg.mutation, step, &mut mut_rng);
                for ev in &new_events {
                    let p = crate::pairs::pair_index(m, ev.i, ev.j).expect("valid pair");
                    rda.reset_coordinate(&mut relevance, m + p);
                    model.beta[p] = relevance[m + p];
                    ff_opt[p] = next.ff[p]
                        .as_ref()
                        .map(|f| AdamState::new(format!("ff[{p}]"), cfg.adam, f.num_params()));
                    if let Some(norm) = model.norm.as_mut() {
                        norm.running_mean[p] = 0.0;
                        norm.running_var[p] = 1.0;
                    }
                }
                model.assignment = next;
                events.extend(new_events);
            }
            if step % snapshot_every == 0 {
                history.frames.push(frame(&model, step, false));
            }
        }
        let train_loss = loss_sum / n_batches as f64;
        history.checks.push(GenomeCheck {
            epoch,
            step,
            train_loss,
            alpha: model.alpha.clone(),
            beta: model.beta.clone(),
        });
        if train_loss < best {
            best = train_loss;
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience {
            break;
        }
    }
    let last = frame(&model, step, true);
    if history.frames.last().map(|f| f.iteration) == Some(step) {
        history.frames.pop();
    }
    history.frames.push(last);
    Ok(GenomeOutcome {
        model,
        events,
        history,
    })
}
