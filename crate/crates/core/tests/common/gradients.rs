#![allow(dead_code)]

//! Finite-difference checks of every stage's loss gradient, shared by the
//! gradient tests and the acceptance run.

use cell_core::dataset::Dataset;
use cell_core::dna_search::{unrolled_theta_grad, LinkageModel, OperationAssignment};
use cell_core::embedding::EmbeddingTable;
use cell_core::genome_search::GenomeModel;
use cell_core::interactions::{op_backward, op_forward, FFParams, OperationKind, ALL_KINDS};
use cell_core::model_functioning::FinalModel;
use cell_core::pairs::{all_pairs, pair_count};
use cell_core::util::Rng;
use ndarray::Array2;

use super::*;

pub const M: usize = 3;
pub const DIM: usize = 4;
pub const BATCH: usize = 8;
pub const CARDS: [usize; M] = [3, 4, 5];
pub const TRIALS: usize = 50;

fn batch_indices() -> Vec<usize> {
    (0..BATCH).collect()
}

fn randomize_ff(ff: &mut FFParams, rng: &mut Rng) {
    fill_uniform(&mut ff.weight, rng, 0.8);
    fill_uniform(&mut ff.bias, rng, 0.3);
}

fn embedding_coords(
    check: &mut GradCheck,
    tag: &str,
    analytic: impl Fn(usize, u32, usize) -> f64,
    perturbed_loss: impl Fn(usize, usize, f64) -> f64,
) {
    for (f, &card) in CARDS.iter().enumerate() {
        for k in 0..card * DIM {
            let a = analytic(f, (k / DIM) as u32, k % DIM);
            let numeric = (perturbed_loss(f, k, FD_STEP) - perturbed_loss(f, k, -FD_STEP)) / (2.0 * FD_STEP);
            let e = rel_err(a, numeric);
            check.checked += 1;
            check.worst = check.worst.max(e);
            if e > REL_TOL {
                check
                    .failures
                    .push(format!("{tag} embedding[{f}][{k}]: analytic {a:e}, numeric {numeric:e}"));
            }
        }
    }
}

fn min_abs_pre_ops(table: &EmbeddingTable, ds: &Dataset, kinds: &[OperationKind], ff: &[Option<&FFParams>]) -> f64 {
    let pairs = all_pairs(M);
    let mut min = f64::INFINITY;
    for inst in &ds.instances {
        let rows = table.lookup(inst).unwrap();
        for (p, pair) in pairs.iter().enumerate() {
            if let Some(params) = ff[p] {
                let (_, tape) = op_forward(kinds[p], rows[pair.i], rows[pair.j], Some(params)).unwrap();
                min = tape.pre.iter().fold(min, |a, v| a.min(v.abs()));
            }
        }
    }
    min
}

/// Stage I: theta, pair weights, embeddings and both feed-forward banks.
pub fn stage_one_trial(seed: u64) -> Option<GradCheck> {
    let mut rng = rng(seed);
    let ds = random_dataset(&mut rng, &CARDS, BATCH);
    let mut model = LinkageModel::init(&CARDS, DIM, seed).unwrap();
    randomize_table(&mut model.table, &mut rng, 0.7);
    for t in &mut model.theta.values {
        fill_uniform(t, &mut rng, 1.0);
    }
    fill_uniform(&mut model.weights.values, &mut rng, 1.0);
    for b in &mut model.bank {
        randomize_ff(&mut b.product_ff, &mut rng);
        randomize_ff(&mut b.concat_ff, &mut rng);
    }
    let mut margin = f64::INFINITY;
    for kind in [OperationKind::ProductFF, OperationKind::ConcatFF] {
        let kinds = vec![kind; pair_count(M)];
        let ff: Vec<Option<&FFParams>> = model.bank.iter().map(|b| b.get(kind)).collect();
        margin = margin.min(min_abs_pre_ops(&model.table, &ds, &kinds, &ff));
    }
    if margin < RELU_MARGIN {
        return None;
    }
    let idx = batch_indices();
    let loss = |m: &LinkageModel| m.loss_and_grads(&ds, &idx).unwrap().0;
    let (_, g) = model.loss_and_grads(&ds, &idx).unwrap();
    let mut check = GradCheck::new("stage I");
    for p in 0..pair_count(M) {
        for k in 0..4 {
            check.coord(|| format!("theta[{p}][{k}]"), &model, g.theta[p][k], |m| &mut m.theta.values[p][k], loss);
        }
        check.coord(|| format!("w[{p}]"), &model, g.weights[p], |m| &mut m.weights.values[p], loss);
        for k in 0..DIM * DIM {
            check.coord(|| format!("pff[{p}].w[{k}]"), &model, g.bank[p].product_ff.weight[k], |m| &mut m.bank[p].product_ff.weight[k], loss);
        }
        for k in 0..2 * DIM * DIM {
            check.coord(|| format!("cff[{p}].w[{k}]"), &model, g.bank[p].concat_ff.weight[k], |m| &mut m.bank[p].concat_ff.weight[k], loss);
        }
        for k in 0..DIM {
            check.coord(|| format!("pff[{p}].b[{k}]"), &model, g.bank[p].product_ff.bias[k], |m| &mut m.bank[p].product_ff.bias[k], loss);
            check.coord(|| format!("cff[{p}].b[{k}]"), &model, g.bank[p].concat_ff.bias[k], |m| &mut m.bank[p].concat_ff.bias[k], loss);
        }
    }
    embedding_coords(
        &mut check,
        "stage I",
        |f, i, c| g.embeddings.get(f, i).map_or(0.0, |r| r[c]),
        |f, k, h| {
            let mut mm = model.clone();
            mm.table.tables[f][k] += h;
            loss(&mm)
        },
    );
    Some(check)
}

fn genome_model(seed: u64, rng: &mut Rng, normalize: bool) -> GenomeModel {
    let mut table = EmbeddingTable::init(&CARDS, DIM, seed).unwrap();
    randomize_table(&mut table, rng, 0.7);
    let kinds: Vec<OperationKind> = (0..pair_count(M)).map(|p| ALL_KINDS[(p + seed as usize) % 4]).collect();
    let mut assignment = OperationAssignment::fresh(M, DIM, kinds, rng);
    for ff in assignment.ff.iter_mut().flatten() {
        randomize_ff(ff, rng);
    }
    let mut alpha = vec![0.0; M];
    let mut beta = vec![0.0; pair_count(M)];
    fill_uniform(&mut alpha, rng, 1.0);
    fill_uniform(&mut beta, rng, 1.0);
    GenomeModel::new(table, assignment, alpha, beta, normalize).unwrap()
}

/// Stage II: alpha, beta, embeddings and the active feed-forward layers.
pub fn stage_two_trial(seed: u64, normalize: bool) -> Option<GradCheck> {
    let mut rng = rng(seed);
    let ds = random_dataset(&mut rng, &CARDS, BATCH);
    let model = genome_model(seed, &mut rng, normalize);
    let ff: Vec<Option<&FFParams>> = model.assignment.ff.iter().map(|f| f.as_ref()).collect();
    if min_abs_pre_ops(&model.table, &ds, &model.assignment.kinds, &ff) < RELU_MARGIN {
        return None;
    }
    let idx = batch_indices();
    let loss = |m: &GenomeModel| m.loss_and_grads(&ds, &idx).unwrap().0;
    let (_, g) = model.loss_and_grads(&ds, &idx).unwrap();
    let mut check = GradCheck::new(if normalize { "stage II (normalized)" } else { "stage II" });
    for i in 0..M {
        check.coord(|| format!("alpha[{i}]"), &model, g.alpha[i], |m| &mut m.alpha[i], loss);
    }
    for p in 0..pair_count(M) {
        check.coord(|| format!("beta[{p}]"), &model, g.beta[p], |m| &mut m.beta[p], loss);
        if let Some(gf) = &g.ff[p] {
            for k in 0..gf.weight.len() {
                check.coord(|| format!("ff[{p}].w[{k}]"), &model, gf.weight[k], |m| &mut m.assignment.ff[p].as_mut().unwrap().weight[k], loss);
            }
            for k in 0..gf.bias.len() {
                check.coord(|| format!("ff[{p}].b[{k}]"), &model, gf.bias[k], |m| &mut m.assignment.ff[p].as_mut().unwrap().bias[k], loss);
            }
        }
    }
    embedding_coords(
        &mut check,
        "stage II",
        |f, i, c| g.embeddings.get(f, i).map_or(0.0, |r| r[c]),
        |f, k, h| {
            let mut mm = model.clone();
            mm.table.tables[f][k] += h;
            loss(&mm)
        },
    );
    Some(check)
}

fn min_abs_pre_mlp(model: &FinalModel, ds: &Dataset) -> f64 {
    let rows: Vec<f64> = ds
        .instances
        .iter()
        .flat_map(|inst| model.build_final_input(inst).unwrap())
        .collect();
    let mut a = Array2::from_shape_vec((ds.len(), model.input_dim()), rows).unwrap();
    let mut min = f64::INFINITY;
    let hidden = model.mlp.layers.len() - 1;
    for layer in &model.mlp.layers[..hidden] {
        let pre = a.dot(&layer.weight) + &layer.bias;
        min = pre.iter().fold(min, |m, v| m.min(v.abs()));
        a = pre.mapv(|v| v.max(0.0));
    }
    min
}

/// Stage III: MLP layers, embeddings and retained feed-forward layers.
pub fn stage_three_trial(seed: u64) -> Option<GradCheck> {
    let mut rng = rng(seed);
    let ds = random_dataset(&mut rng, &CARDS, BATCH);
    let g2 = genome_model(seed, &mut rng, false);
    let mut model = FinalModel::new(g2.table, g2.alpha, g2.beta, &g2.assignment, 2, 5, true, &mut rng).unwrap();
    for layer in &mut model.mlp.layers {
        fill_uniform(layer.weight.as_slice_mut().unwrap(), &mut rng, 0.8);
        fill_uniform(layer.bias.as_slice_mut().unwrap(), &mut rng, 0.3);
    }
    let kinds: Vec<OperationKind> = model.retained_pairs.iter().map(|r| r.kind).collect();
    let ff: Vec<Option<&FFParams>> = model.retained_pairs.iter().map(|r| r.ff.as_ref()).collect();
    if min_abs_pre_ops(&model.table, &ds, &kinds, &ff) < RELU_MARGIN || min_abs_pre_mlp(&model, &ds) < RELU_MARGIN {
        return None;
    }
    let idx = batch_indices();
    let loss = |m: &FinalModel| m.loss_and_grads(&ds, &idx).unwrap().0;
    let (_, g) = model.loss_and_grads(&ds, &idx).unwrap();
    let mut check = GradCheck::new("stage III");
    for (l, gl) in g.mlp.iter().enumerate() {
        let (rows, cols) = gl.weight.dim();
        for r in 0..rows {
            for c in 0..cols {
                check.coord(|| format!("mlp[{l}].w[{r},{c}]"), &model, gl.weight[[r, c]], |m| &mut m.mlp.layers[l].weight[[r, c]], loss);
            }
        }
        for c in 0..cols {
            check.coord(|| format!("mlp[{l}].b[{c}]"), &model, gl.bias[c], |m| &mut m.mlp.layers[l].bias[c], loss);
        }
    }
    for (q, gf) in g.ff.iter().enumerate() {
        if let Some(gf) = gf {
            for k in 0..gf.weight.len() {
                check.coord(|| format!("ff[{q}].w[{k}]"), &model, gf.weight[k], |m| &mut m.retained_pairs[q].ff.as_mut().unwrap().weight[k], loss);
            }
            for k in 0..gf.bias.len() {
                check.coord(|| format!("ff[{q}].b[{k}]"), &model, gf.bias[k], |m| &mut m.retained_pairs[q].ff.as_mut().unwrap().bias[k], loss);
            }
        }
    }
    embedding_coords(
        &mut check,
        "stage III",
        |f, i, c| g.embeddings.get(f, i).map_or(0.0, |r| r[c]),
        |f, k, h| {
            let mut mm = model.clone();
            mm.table.tables[f][k] += h;
            loss(&mm)
        },
    );
    Some(check)
}

/// Runs `trial` on consecutive seeds until `TRIALS` of them qualify.
pub fn run_trials(label: &str, first_seed: u64, trial: impl Fn(u64) -> Option<GradCheck>) -> (GradCheck, usize) {
    let mut total = GradCheck::new(label);
    let mut accepted = 0;
    let mut seed = first_seed;
    while accepted < TRIALS {
        assert!(seed < first_seed + 50 * TRIALS as u64, "{label}: too few trials clear the ReLU margin");
        if let Some(c) = trial(seed) {
            total.merge(c);
            accepted += 1;
        }
        seed += 1;
    }
    (total, accepted)
}

/// The one-step unrolled theta gradient against central differences of
/// `theta -> L_val(w - xi dL_train/dw, f - xi dL_train/df, theta)`.
pub fn unrolled_trial(seed: u64) -> Option<GradCheck> {
    let mut rng = rng(seed);
    let train = random_dataset(&mut rng, &CARDS, BATCH);
    let val = random_dataset(&mut rng, &CARDS, BATCH);
    let mut model = LinkageModel::init(&CARDS, DIM, seed).unwrap();
    randomize_table(&mut model.table, &mut rng, 0.7);
    for t in &mut model.theta.values {
        fill_uniform(t, &mut rng, 1.0);
    }
    fill_uniform(&mut model.weights.values, &mut rng, 1.0);
    let xi = 0.05;
    let idx = batch_indices();
    let objective = |m: &LinkageModel| {
        let (_, gt) = m.loss_and_grads(&train, &idx).unwrap();
        let mut u = m.clone();
        for (w, d) in u.weights.values.iter_mut().zip(&gt.weights) {
            *w -= xi * d;
        }
        u.table.add_sparse(&gt.embeddings, -xi);
        u.loss_and_grads(&val, &idx).unwrap().0
    };
    let g = unrolled_theta_grad(&model, &train, &idx, &val, &idx, xi, 1e-4).unwrap();
    let mut check = GradCheck::new("unrolled theta");
    for p in 0..pair_count(M) {
        for k in 0..4 {
            check.coord(|| format!("theta[{p}][{k}]"), &model, g[p][k], |m| &mut m.theta.values[p][k], objective);
        }
    }
    Some(check)
}

/// Every operation's backward pass against central differences of
/// `<u, op(f_i, f_j)>`.
pub fn op_trial(seed: u64) -> Option<GradCheck> {
    let mut rng = rng(seed);
    let kind = ALL_KINDS[(seed % 4) as usize];
    let dim = 1 + (seed as usize / 4) % 6;
    let mut fi = vec![0.0; dim];
    let mut fj = vec![0.0; dim];
    let mut u = vec![0.0; dim];
    fill_uniform(&mut fi, &mut rng, 1.0);
    fill_uniform(&mut fj, &mut rng, 1.0);
    fill_uniform(&mut u, &mut rng, 1.0);
    let mut ff = FFParams::init(kind, dim, &mut rng);
    if let Some(p) = ff.as_mut() {
        randomize_ff(p, &mut rng);
    }
    let (_, tape) = op_forward(kind, &fi, &fj, ff.as_ref()).unwrap();
    if tape.pre.iter().any(|v| v.abs() < RELU_MARGIN) {
        return None;
    }
    let g = op_backward(kind, &tape, &u, ff.as_ref()).unwrap();
    #[derive(Clone)]
    struct Point {
        fi: Vec<f64>,
        fj: Vec<f64>,
        ff: Option<FFParams>,
    }
    let point = Point { fi, fj, ff };
    let value = |p: &Point| -> f64 {
        let (o, _) = op_forward(kind, &p.fi, &p.fj, p.ff.as_ref()).unwrap();
        o.iter().zip(&u).map(|(a, b)| a * b).sum()
    };
    let mut check = GradCheck::new(format!("{kind} dim {dim}"));
    for k in 0..dim {
        check.coord(|| format!("f_i[{k}]"), &point, g.f_i[k], |p| &mut p.fi[k], value);
        check.coord(|| format!("f_j[{k}]"), &point, g.f_j[k], |p| &mut p.fj[k], value);
    }
    if let Some(gf) = &g.ff {
        for k in 0..gf.weight.len() {
            check.coord(|| format!("w[{k}]"), &point, gf.weight[k], |p| &mut p.ff.as_mut().unwrap().weight[k], value);
        }
        for k in 0..dim {
            check.coord(|| format!("b[{k}]"), &point, gf.bias[k], |p| &mut p.ff.as_mut().unwrap().bias[k], value);
        }
    }
    Some(check)
}
