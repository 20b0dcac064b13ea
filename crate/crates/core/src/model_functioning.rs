//! Stage III: an MLP over the retained features and interactions, each block
//! scaled by its frozen relevance (`alpha_i * f_i`, `beta_ij * g(f_i, f_j)`).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{batches, Dataset, Instance};
use crate::dna_search::{field_pair_mut, step_ff, OperationAssignment, GRAD_CHUNK};
use crate::embedding::{EmbeddingGrad, EmbeddingOptimizer, EmbeddingTable};
use crate::error::{CellError, Result};
use crate::interactions::{op_backward_into, op_forward, FFParams, OperationKind, OpTape};
use crate::metrics::instance_logloss;
use crate::optim::{AdamConfig, AdamState};
use crate::pairs::{all_pairs, Pair};
use crate::util::{derive_seed, seeded, sigmoid, uniform_vec, Rng};

/// Fully connected layer, `x W + b` with `W` of shape `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Dense {
            weight: Array2::from_shape_vec((fan_in, fan_out), uniform_vec(rng, fan_in * fan_out, limit))
                .expect("shape"),
            bias: Array1::zeros(fan_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Dense {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }
}

/// ReLU hidden layers followed by a single-logit output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

pub struct MlpCache {
    /// Input of each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pres: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn init(in_dim: usize, depth: usize, width: usize, rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut fan_in = in_dim;
        for _ in 0..depth {
            layers.push(Dense::init(fan_in, width, rng));
            fan_in = width;
        }
        layers.push(Dense::init(fan_in, 1, rng));
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array1<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len() - 1);
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let pre = a.dot(&layer.weight) + &layer.bias;
            inputs.push(a);
            if l == last {
                let z = pre.column(0).to_owned();
                return (z, MlpCache { inputs, pres });
            }
            a = pre.mapv(|v| v.max(0.0));
            pres.push(pre);
        }
        unreachable!("mlp has an output layer")
    }

    /// Gradients of `sum_n dz_n * z_n` with respect to every layer and the input.
    pub fn backward(&self, cache: &MlpCache, dz: &Array1<f64>) -> (Vec<Dense>, Array2<f64>) {
        let mut grads: Vec<Dense> = self.layers.iter().map(Dense::zeros_like).collect();
        let mut delta = dz.clone().insert_axis(Axis(1));
        for l in (0..self.layers.len()).rev() {
            grads[l].weight = cache.inputs[l].t().dot(&delta);
            grads[l].bias = delta.sum_axis(Axis(0));
            let mut d_in = delta.dot(&self.layers[l].weight.t());
            if l > 0 {
                d_in.zip_mut_with(&cache.pres[l - 1], |d, &p| {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = d_in;
        }
        (grads, delta)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}

/// A retained interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct RetainedPair {
    pub index: usize,
    pub pair: Pair,
    pub kind: OperationKind,
    pub ff: Option<FFParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalModel {
    pub table: EmbeddingTable,
    /// Frozen relevance of every feature.
    pub alpha: Vec<f64>,
    /// Frozen relevance of every pair.
    pub beta: Vec<f64>,
    /// Fields with `alpha != 0`, ascending.
    pub retained_features: Vec<usize>,
    /// Pairs with `beta != 0`, lexicographic.
    pub retained_pairs: Vec<RetainedPair>,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct FinalGrads {
    pub mlp: Vec<Dense>,
    pub embeddings: EmbeddingGrad,
    /// Per retained pair, aligned with `retained_pairs`.
    pub ff: Vec<Option<FFParams>>,
}

impl FinalModel {
    /// Selects the retained features and pairs and initializes a fresh MLP.
    /// Feed-forward parameters are re-initialized unless `warm_start_ff`.
    pub fn new(
        table: EmbeddingTable,
        alpha: Vec<f64>,
        beta: Vec<f64>,
        assignment: &OperationAssignment,
        depth: usize,
        width: usize,
        warm_start_ff: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        assignment.validate()?;
        let m = assignment.m;
        if alpha.len() != m || beta.len() != assignment.kinds.len() {
            return Err(CellError::Shape("relevance sizes do not match assignment".into()));
        }
        if table.num_fields() != m || table.dim != assignment.dim {
            return Err(CellError::Shape("embedding table does not match assignment".into()));
        }
        let retained_features: Vec<usize> = (0..m).filter(|&i| alpha[i] != 0.0).collect();
        let retained_pairs: Vec<RetainedPair> = all_pairs(m)
            .into_iter()
            .enumerate()
            .filter(|&(p, _)| beta[p] != 0.0)
            .map(|(p, pair)| {
                let kind = assignment.kinds[p];
                let ff = if warm_start_ff {
                    assignment.ff[p].clone()
                } else {
                    FFParams::init(kind, assignment.dim, rng)
                };
                RetainedPair {
                    index: p,
                    pair,
                    kind,
                    ff,
                }
            })
            .collect();
        if retained_features.is_empty() && retained_pairs.is_empty() {
            return Err(CellError::EmptyModel);
        }
        let in_dim = (retained_features.len() + retained_pairs.len()) * table.dim;
        let mlp = Mlp::init(in_dim, depth, width, rng);
        Ok(FinalModel {
            table,
            alpha,
            beta,
            retained_features,
            retained_pairs,
            mlp,
        })
    }

    /// Whether any retained feature or pair reads `field`.
    fn touches(&self, field: usize) -> bool {
        self.retained_features.contains(&field)
            || self.retained_pairs.iter().any(|rp| rp.pair.i == field || rp.pair.j == field)
    }

    pub fn input_dim(&self) -> usize {
        (self.retained_features.len() + self.retained_pairs.len()) * self.table.dim
    }

    fn input_with_tapes(&self, inst: &Instance) -> Result<(Vec<f64>, Vec<OpTape>)> {
        let rows = self.table.lookup(inst)?;
        let mut x = Vec::with_capacity(self.input_dim());
        for &i in &self.retained_features {
            let a = self.alpha[i];
            x.extend(rows[i].iter().map(|v| a * v));
        }
        let mut tapes = Vec::with_capacity(self.retained_pairs.len());
        for rp in &self.retained_pairs {
            let (o, tape) = op_forward(rp.kind, rows[rp.pair.i], rows[rp.pair.j], rp.ff.as_ref())?;
            let b = self.beta[rp.index];
            x.extend(o.iter().map(|v| b * v));
            tapes.push(tape);
        }
        Ok((x, tapes))
    }

    /// `[alpha_i * f_i for retained i] ++ [beta_ij * g(f_i, f_j) for retained (i, j)]`.
    pub fn build_final_input(&self, inst: &Instance) -> Result<Vec<f64>> {
        Ok(self.input_with_tapes(inst)?.0)
    }

    fn input_matrix(&self, instances: &[&Instance]) -> Result<(Array2<f64>, Vec<Vec<OpTape>>)> {
        let d = self.input_dim();
        let parts: Vec<Result<Vec<(Vec<f64>, Vec<OpTape>)>>> = instances
            .par_chunks(GRAD_CHUNK)
            .map(|c| c.iter().map(|inst| self.input_with_tapes(inst)).collect())
            .collect();
        let mut data = Vec::with_capacity(instances.len() * d);
        let mut tapes = Vec::with_capacity(instances.len());
        for part in parts {
            for (x, t) in part? {
                data.extend(x);
                tapes.push(t);
            }
        }
        let x = Array2::from_shape_vec((instances.len(), d), data).expect("rectangular input");
        Ok((x, tapes))
    }

    /// Probabilities for a slice of instances.
    pub fn predict_many(&self, instances: &[&Instance]) -> Result<Vec<f64>> {
        if instances.is_empty() {
            return Ok(Vec::new());
        }
        let (x, _) = self.input_matrix(instances)?;
        let (z, _) = self.mlp.forward(x.view());
        let out: Vec<f64> = z.iter().map(|&v| clamp_open(sigmoid(v))).collect();
        if out.iter().any(|p| !p.is_finite()) {
            return Err(CellError::NonFinite("final model prediction".into()));
        }
        Ok(out)
    }

    pub fn predict(&self, inst: &Instance) -> Result<f64> {
        Ok(self.predict_many(&[inst])?[0])
    }

    /// Predictions for a whole dataset, in order.
    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(ds.len());
        for chunk in ds.instances.chunks(4096) {
            let refs: Vec<&Instance> = chunk.iter().collect();
            out.extend(self.predict_many(&refs)?);
        }
        Ok(out)
    }

    pub fn loss(&self, ds: &Dataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(CellError::Empty);
        }
        let preds = self.predict_dataset(ds)?;
        Ok(preds
            .iter()
            .zip(&ds.instances)
            .map(|(&p, i)| instance_logloss(p, i.label))
            .sum::<f64>()
            / ds.len() as f64)
    }

    /// Mean Logloss over `indices` and its exact gradient with respect to the
    /// MLP, the embeddings and the retained feed-forward layers.
    pub fn loss_and_grads(&self, ds: &Dataset, indices: &[usize]) -> Result<(f64, FinalGrads)> {
        if indices.is_empty() {
            return Err(CellError::Empty);
        }
        let b = indices.len();
        let inv_b = 1.0 / b as f64;
        let insts: Vec<&Instance> = indices.iter().map(|&k| &ds.instances[k]).collect();
        let (x, tapes) = self.input_matrix(&insts)?;
        let (z, cache) = self.mlp.forward(x.view());
        let mut loss = 0.0;
        let mut dz = Array1::zeros(b);
        for (n, inst) in insts.iter().enumerate() {
            let p = sigmoid(z[n]);
            loss += instance_logloss(p, inst.label);
            dz[n] = (p - f64::from(inst.label)) * inv_b;
        }
        let (mlp_grads, dx) = self.mlp.backward(&cache, &dz);

        let dim = self.table.dim;
        let n_feat = self.retained_features.len();
        let rows: Vec<usize> = (0..b).collect();
        let zero_ff = || -> Vec<Option<FFParams>> {
            self.retained_pairs
                .iter()
                .map(|rp| rp.ff.as_ref().map(|f| FFParams::zeros(f.in_dim, f.dim)))
                .collect()
        };
        let parts: Vec<Result<(EmbeddingGrad, Vec<Option<FFParams>>)>> = rows
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut emb = EmbeddingGrad::new(dim);
                let mut ff = zero_ff();
                let mut upstream = vec![0.0; dim];
                let mut dfields = vec![0.0; self.alpha.len() * dim];
                for &n in chunk {
                    let inst = insts[n];
                    let drow = dx.row(n);
                    dfields.iter_mut().for_each(|v| *v = 0.0);
                    for (slot, &i) in self.retained_features.iter().enumerate() {
                        let a = self.alpha[i];
                        for (d, v) in dfields[i * dim..(i + 1) * dim]
                            .iter_mut()
                            .zip(drow.slice(ndarray::s![slot * dim..(slot + 1) * dim]))
                        {
                            *d += a * v;
                        }
                    }
                    for (q, rp) in self.retained_pairs.iter().enumerate() {
                        let off = (n_feat + q) * dim;
                        let bscale = self.beta[rp.index];
                        for (u, v) in upstream.iter_mut().zip(drow.slice(ndarray::s![off..off + dim])) {
                            *u = bscale * v;
                        }
                        let (g_i, g_j) = field_pair_mut(&mut dfields, dim, &rp.pair);
                        op_backward_into(rp.kind, &tapes[n][q], &upstream, rp.ff.as_ref(), g_i, g_j, ff[q].as_mut())?;
                    }
                    for (field, &idx) in inst.fields.iter().enumerate() {
                        if self.touches(field) {
                            emb.add(field, idx, &dfields[field * dim..(field + 1) * dim], 1.0);
                        }
                    }
                }
                Ok((emb, ff))
            })
            .collect();
        let mut embeddings = EmbeddingGrad::new(dim);
        let mut ff = zero_ff();
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
            FinalGrads {
                mlp: mlp_grads,
                embeddings,
                ff,
            },
        ))
    }
}

fn clamp_open(p: f64) -> f64 {
    p.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctioningConfig {
    /// Number of hidden layers.
    pub depth: usize,
    pub width: usize,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep the stage-II feed-forward parameters instead of re-initializing them.
    pub warm_start_ff: bool,
    /// Re-initialize the embeddings instead of continuing from stage II.
    pub fresh_embeddings: bool,
}

impl Default for FunctioningConfig {
    fn default() -> Self {
        FunctioningConfig {
            depth: 2,
            width: 400,
            adam: AdamConfig::default(),
            max_epochs: 10,
            patience: 2,
            batch_size: 256,
            seed: 0,
            warm_start_ff: false,
            fresh_embeddings: false,
        }
    }
}

impl FunctioningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(CellError::Config("mlp width, batch_size and max_epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctioningCheck {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FunctioningHistory {
    pub checks: Vec<FunctioningCheck>,
    pub best_epoch: usize,
}

fn dense_states(mlp: &Mlp, adam: AdamConfig) -> Vec<(AdamState, AdamState)> {
    mlp.layers
        .iter()
        .enumerate()
        .map(|(l, d)| {
            (
                AdamState::new(format!("mlp[{l}].weight"), adam, d.weight.len()),
                AdamState::new(format!("mlp[{l}].bias"), adam, d.bias.len()),
            )
        })
        .collect()
}

/// Trains the final model with Adam, early-stopping on validation Logloss and
/// returning the best epoch's parameters. `alpha` and `beta` stay frozen.
pub fn train_final(
    train: &Dataset,
    val: &Dataset,
    table: EmbeddingTable,
    alpha: &[f64],
    beta: &[f64],
    assignment: &OperationAssignment,
    cfg: &FunctioningConfig,
) -> Result<(FinalModel, FunctioningHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CellError::Empty);
    }
    let val = if val.is_empty() { train } else { val };
    let table = if cfg.fresh_embeddings {
        EmbeddingTable::init(&table.cardinalities, table.dim, derive_seed(cfg.seed, 40))?
    } else {
        table
    };
    let mut rng = seeded(derive_seed(cfg.seed, 41));
    let mut model = FinalModel::new(
        table,
        alpha.to_vec(),
        beta.to_vec(),
        assignment,
        cfg.depth,
        cfg.width,
        cfg.warm_start_ff,
        &mut rng,
    )?;
    let mut mlp_opt = dense_states(&model.mlp, cfg.adam);
    let mut emb_opt = EmbeddingOptimizer::new(&model.table, cfg.adam);
    let mut ff_opt: Vec<Option<AdamState>> = model
        .retained_pairs
        .iter()
        .map(|rp| {
            rp.ff
                .as_ref()
                .map(|f| AdamState::new(format!("ff[{}]", rp.index), cfg.adam, f.num_params()))
        })
        .collect();

    let mut history = FunctioningHistory::default();
    let mut best: Option<(f64, FinalModel)> = None;
    let mut stale = 0usize;
    let mut step = 0u64;
    for epoch in 0..cfg.max_epochs {
        let mut loss_sum = 0.0;
        let epoch_batches = batches(train, cfg.batch_size, Some(derive_seed(cfg.seed, 3000 + epoch as u64)))?;
        let n_batches = epoch_batches.len();
        for batch in epoch_batches {
            let (loss, g) = model.loss_and_grads(train, &batch.indices)?;
            if !loss.is_finite() {
                return Err(CellError::NonFinite(format!(
                    "model functioning train loss = {loss} at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += loss;
            for ((layer, grad), (wo, bo)) in model.mlp.layers.iter_mut().zip(&g.mlp).zip(&mut mlp_opt) {
                wo.step(
                    layer.weight.as_slice_mut().expect("standard layout"),
                    grad.weight.as_standard_layout().as_slice().expect("standard layout"),
                )?;
                bo.step(
                    layer.bias.as_slice_mut().expect("contiguous"),
                    grad.bias.as_slice().expect("contiguous"),
                )?;
            }
            emb_opt.step(&mut model.table, &g.embeddings)?;
            for ((rp, grad), st) in model.retained_pairs.iter_mut().zip(&g.ff).zip(&mut ff_opt) {
                if let (Some(p), Some(gr), Some(s)) = (rp.ff.as_mut(), grad.as_ref(), st.as_mut()) {
                    step_ff(s, p, gr)?;
                }
            }
            step += 1;
        }
        let val_loss = model.loss(val)?;
        if !val_loss.is_finite() {
            return Err(CellError::NonFinite(format!(
                "model functioning validation loss at epoch {epoch}"
            )));
        }
        history.checks.push(FunctioningCheck {
            epoch,
            step,
            train_loss: loss_sum / n_batches as f64,
            val_loss,
        });
        let improved = best.as_ref().is_none_or(|(b, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, model.clone()));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience {
            break;
        }
    }
    let (_, best_model) = best.expect("at least one epoch");
    Ok((best_model, history))
}
