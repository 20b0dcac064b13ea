//! Categorical instance data: CSV loading, splitting, batching, the synthetic
//! poly-2 generator and the Information-Value field filter.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CellError, Result};
use crate::interactions::OperationKind;
use crate::util::{derive_seed, seeded};

/// One labelled row: a binary label and one category index per field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub label: u8,
    pub fields: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub field_cardinalities: Vec<usize>,
    pub instances: Vec<Instance>,
}

impl Dataset {
    /// Builds a dataset, checking labels, field counts and index ranges.
    pub fn new(
        name: impl Into<String>,
        field_cardinalities: Vec<usize>,
        instances: Vec<Instance>,
    ) -> Result<Self> {
        let m = field_cardinalities.len();
        if field_cardinalities.iter().any(|&c| c == 0) {
            return Err(CellError::Config("field cardinalities must be positive".into()));
        }
        for (line, inst) in instances.iter().enumerate() {
            if inst.label > 1 {
                return Err(CellError::Parse {
                    line: line + 1,
                    msg: format!("label {} is not binary", inst.label),
                });
            }
            if inst.fields.len() != m {
                return Err(CellError::Schema {
                    line: line + 1,
                    expected: m,
                    found: inst.fields.len(),
                });
            }
            for (field, (&idx, &card)) in inst.fields.iter().zip(&field_cardinalities).enumerate() {
                if idx as usize >= card {
                    return Err(CellError::OutOfRange {
                        field,
                        index: idx as usize,
                        cardinality: card,
                    });
                }
            }
        }
        Ok(Dataset {
            name: name.into(),
            field_cardinalities,
            instances,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Number of fields `m`.
    pub fn num_fields(&self) -> usize {
        self.field_cardinalities.len()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.instances.iter().map(|i| i.label).collect()
    }

    pub fn positive_ratio(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.instances.iter().filter(|i| i.label == 1).count() as f64 / self.len() as f64
    }

    /// A new dataset holding the instances at `indices`, same cardinalities.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Dataset {
        Dataset {
            name: name.into(),
            field_cardinalities: self.field_cardinalities.clone(),
            instances: indices.iter().map(|&k| self.instances[k].clone()).collect(),
        }
    }

    /// Re-labels the dataset with wider cardinalities (e.g. to match a model table).
    pub fn with_cardinalities(mut self, cards: &[usize]) -> Result<Self> {
        if cards.len() != self.num_fields() {
            return Err(CellError::Shape(format!(
                "dataset has {} fields, model expects {}",
                self.num_fields(),
                cards.len()
            )));
        }
        for (field, (&have, &want)) in self.field_cardinalities.iter().zip(cards).enumerate() {
            if have > want {
                return Err(CellError::OutOfRange {
                    field,
                    index: have - 1,
                    cardinality: want,
                });
            }
        }
        self.field_cardinalities = cards.to_vec();
        Ok(self)
    }
}

/// Reads `label,idx_1,...,idx_m` lines. Cardinalities are inferred as max index + 1.
pub fn load_csv(path: impl AsRef<Path>, m: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CellError::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_csv(&text, m, name)
}

pub fn parse_csv(text: &str, m: usize, name: impl Into<String>) -> Result<Dataset> {
    let mut instances = Vec::new();
    let mut cards = vec![0usize; m];
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split(',').collect();
        if tokens.len() != m + 1 {
            return Err(CellError::Schema {
                line: line_no,
                expected: m + 1,
                found: tokens.len(),
            });
        }
        let label: u8 = tokens[0].trim().parse().map_err(|_| CellError::Parse {
            line: line_no,
            msg: format!("bad label {:?}", tokens[0]),
        })?;
        if label > 1 {
            return Err(CellError::Parse {
                line: line_no,
                msg: format!("label {label} is not binary"),
            });
        }
        let mut fields = Vec::with_capacity(m);
        for (f, tok) in tokens[1..].iter().enumerate() {
            let idx: u32 = tok.trim().parse().map_err(|_| CellError::Parse {
                line: line_no,
                msg: format!("bad index {tok:?} in field {f}"),
            })?;
            cards[f] = cards[f].max(idx as usize + 1);
            fields.push(idx);
        }
        instances.push(Instance { label, fields });
    }
    if instances.is_empty() {
        return Err(CellError::Empty);
    }
    Ok(Dataset {
        name: name.into(),
        field_cardinalities: cards,
        instances,
    })
}

pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(ds.len() * (2 + 6 * ds.num_fields()));
    for inst in &ds.instances {
        out.push_str(&inst.label.to_string());
        for idx in &inst.fields {
            out.push(',');
            out.push_str(&idx.to_string());
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| CellError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| CellError::io(path, e))
}

/// Seeded three-way partition. Validation and test sizes are floored; the
/// remainder goes to train.
pub fn split(ds: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if ds.is_empty() {
        return Err(CellError::Empty);
    }
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(CellError::Config(format!(
            "split ratios must be non-negative and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    let n_val = ((n as f64) * b + 1e-9).floor() as usize;
    let n_test = ((n as f64) * c + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    let (train, rest) = order.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok((
        ds.subset(format!("{}-train", ds.name), train),
        ds.subset(format!("{}-val", ds.name), val),
        ds.subset(format!("{}-test", ds.name), test),
    ))
}

/// A mini-batch: positions into the parent dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn instances<'a>(&'a self, ds: &'a Dataset) -> impl Iterator<Item = &'a Instance> + 'a {
        self.indices.iter().map(move |&k| &ds.instances[k])
    }
}

/// One epoch of batches. Without a seed the original order is kept.
pub fn batches(ds: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(CellError::Config("batch size must be at least 1".into()));
    }
    if ds.is_empty() {
        return Err(CellError::Empty);
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut seeded(seed));
    }
    Ok(order
        .chunks(batch_size)
        .map(|c| Batch { indices: c.to_vec() })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Median,
    Fixed(f64),
}

/// Parameters of the planted poly-2 generator. Missing JSON keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Number of fields.
    pub m: usize,
    /// Total category count, spread as evenly as possible over the fields.
    pub n_categories: usize,
    /// Latent vector dimension.
    pub dim: usize,
    /// Pairs whose term is the element-wise sum.
    pub c1_pairs: Vec<(usize, usize)>,
    /// Pairs whose term is the element-wise product.
    pub c2_pairs: Vec<(usize, usize)>,
    /// Noise std as a multiple of the std of the clean score.
    pub noise_std: f64,
    pub threshold_mode: ThresholdMode,
    pub n_instances: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            m: 6,
            n_categories: 4481,
            dim: 8,
            c1_pairs: vec![(0, 2), (1, 3)],
            c2_pairs: vec![(2, 4), (4, 5)],
            noise_std: 0.01,
            threshold_mode: ThresholdMode::Median,
            n_instances: 120_000,
            seed: 2023,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CellError::Config(msg));
        if self.m < 2 {
            return bad(format!("m must be at least 2, got {}", self.m));
        }
        if self.n_categories < self.m {
            return bad(format!(
                "need at least one category per field: N={} < m={}",
                self.n_categories, self.m
            ));
        }
        if self.dim == 0 {
            return bad("latent dim must be positive".into());
        }
        if self.n_instances == 0 {
            return bad("n_instances must be positive".into());
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        if let ThresholdMode::Fixed(t) = self.threshold_mode {
            if !t.is_finite() {
                return bad("fixed threshold must be finite".into());
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(i, j) in self.c1_pairs.iter().chain(&self.c2_pairs) {
            if i == j || i >= self.m || j >= self.m {
                return bad(format!("invalid pair ({i}, {j}) for m={}", self.m));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return bad(format!("pair ({i}, {j}) listed more than once"));
            }
        }
        Ok(())
    }

    /// Per-field category counts: `N / m` each, the first `N % m` fields get one more.
    pub fn cardinalities(&self) -> Vec<usize> {
        let base = self.n_categories / self.m;
        let extra = self.n_categories % self.m;
        (0..self.m).map(|f| base + usize::from(f < extra)).collect()
    }

    /// The same configuration with the sum and product term sets exchanged.
    pub fn switched(&self) -> Self {
        let mut out = self.clone();
        std::mem::swap(&mut out.c1_pairs, &mut out.c2_pairs);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub i: usize,
    pub j: usize,
    pub op_code: u8,
}

/// Everything needed to audit a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pairs: Vec<PlantedPair>,
    pub threshold: f64,
    pub seed: u64,
    pub latents_digest: String,
    pub latent_scheme: String,
    /// Set when every generated label is identical.
    pub degenerate: bool,
    /// `latents[field][category]` is the category's latent vector.
    #[serde(skip)]
    pub latents: Vec<Vec<Vec<f64>>>,
}

impl GroundTruth {
    pub fn planted_kind(&self, i: usize, j: usize) -> Option<OperationKind> {
        let (i, j) = (i.min(j), i.max(j));
        self.pairs
            .iter()
            .find(|p| p.i.min(p.j) == i && p.i.max(p.j) == j)
            .and_then(|p| OperationKind::from_code(p.op_code))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CellError::Config(format!("serializing ground truth: {e}")))?;
        fs::write(path, text + "\n").map_err(|e| CellError::io(path, e))
    }
}

fn elem_sum_pair(kind: OperationKind, a: &[f64], b: &[f64]) -> f64 {
    match kind {
        OperationKind::Sum => a.iter().zip(b).map(|(x, y)| x + y).sum(),
        _ => a.iter().zip(b).map(|(x, y)| x * y).sum(),
    }
}

/// Draws a labelled dataset from the planted poly-2 score
/// `q = sum_{C1} sum(v_i + v_j) + sum_{C2} sum(v_i * v_j) + eps`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let cards = cfg.cardinalities();
    let scale = 1.0 / (cfg.dim as f64).sqrt();

    let mut latent_rng = seeded(derive_seed(cfg.seed, 1));
    let latents: Vec<Vec<Vec<f64>>> = cards
        .iter()
        .map(|&card| {
            (0..card)
                .map(|_| {
                    (0..cfg.dim)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut latent_rng);
                            z * scale
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut digest = Sha256::new();
    for field in &latents {
        for row in field {
            for v in row {
                digest.update(v.to_le_bytes());
            }
        }
    }
    let latents_digest = hex::encode(digest.finalize());

    let mut terms: Vec<(usize, usize, OperationKind)> = Vec::new();
    terms.extend(cfg.c1_pairs.iter().map(|&(i, j)| (i, j, OperationKind::Sum)));
    terms.extend(cfg.c2_pairs.iter().map(|&(i, j)| (i, j, OperationKind::Product)));

    let mut sample_rng = seeded(derive_seed(cfg.seed, 2));
    let mut rows = Vec::with_capacity(cfg.n_instances);
    let mut clean = Vec::with_capacity(cfg.n_instances);
    for _ in 0..cfg.n_instances {
        let fields: Vec<u32> = cards
            .iter()
            .map(|&c| sample_rng.random_range(0..c) as u32)
            .collect();
        let q: f64 = terms
            .iter()
            .map(|&(i, j, kind)| {
                elem_sum_pair(
                    kind,
                    &latents[i][fields[i] as usize],
                    &latents[j][fields[j] as usize],
                )
            })
            .sum();
        rows.push(fields);
        clean.push(q);
    }

    let n = clean.len() as f64;
    let mean = clean.iter().sum::<f64>() / n;
    let std = (clean.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / n).sqrt();
    let noise_scale = cfg.noise_std * std;
    let mut noise_rng = seeded(derive_seed(cfg.seed, 3));
    let scores: Vec<f64> = clean
        .iter()
        .map(|&q| {
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            q + noise_scale * z
        })
        .collect();

    let threshold = match cfg.threshold_mode {
        ThresholdMode::Fixed(t) => t,
        ThresholdMode::Median => median(&scores),
    };
    let instances: Vec<Instance> = rows
        .into_iter()
        .zip(&scores)
        .map(|(fields, &q)| Instance {
            label: u8::from(q >= threshold),
            fields,
        })
        .collect();
    let positives = instances.iter().filter(|i| i.label == 1).count();
    let degenerate = positives == 0 || positives == instances.len();

    let truth = GroundTruth {
        pairs: terms
            .iter()
            .map(|&(i, j, kind)| PlantedPair {
                i,
                j,
                op_code: kind.code(),
            })
            .collect(),
        threshold,
        seed: cfg.seed,
        latents_digest,
        latent_scheme: "seeded standard gaussian scaled by 1/sqrt(dim), one vector per category".into(),
        degenerate,
        latents,
    };
    let ds = Dataset {
        name: format!("synthetic-{}", cfg.seed),
        field_cardinalities: cards,
        instances,
    };
    Ok((ds, truth))
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const IV_SMOOTHING: f64 = 0.5;

/// Information Value of one field: `sum_i (Pos_i - Neg_i) ln(Pos_i / Neg_i)`.
///
/// Categories never observed are skipped; categories observed on one side only
/// get 0.5 added to both of their counts.
pub fn information_value(ds: &Dataset, field: usize) -> Result<f64> {
    if field >= ds.num_fields() {
        return Err(CellError::Config(format!(
            "field {field} out of range for m={}",
            ds.num_fields()
        )));
    }
    let card = ds.field_cardinalities[field];
    let mut pos = vec![0.0f64; card];
    let mut neg = vec![0.0f64; card];
    for inst in &ds.instances {
        let c = inst.fields[field] as usize;
        if inst.label == 1 {
            pos[c] += 1.0;
        } else {
            neg[c] += 1.0;
        }
    }
    let total_pos: f64 = pos.iter().sum();
    let total_neg: f64 = neg.iter().sum();
    if total_pos == 0.0 || total_neg == 0.0 {
        return Err(CellError::SingleClass(format!(
            "information value needs both classes ({total_pos} positives, {total_neg} negatives)"
        )));
    }
    let mut iv = 0.0;
    for (p, n) in pos.into_iter().zip(neg) {
        if p == 0.0 && n == 0.0 {
            continue;
        }
        let (p, n) = if p == 0.0 || n == 0.0 {
            (p + IV_SMOOTHING, n + IV_SMOOTHING)
        } else {
            (p, n)
        };
        let pr = p / total_pos;
        let nr = n / total_neg;
        iv += (pr - nr) * (pr / nr).ln();
    }
    Ok(iv)
}
