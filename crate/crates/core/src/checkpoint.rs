//! Versioned checkpoint container.
//!
//! Layout: the 8-byte magic `CELLCKPT`, a little-endian `u64` header length,
//! a pretty-printed JSON header, then every parameter array as contiguous
//! little-endian `f64` values at the byte offsets the header declares.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dna_search::{DnaHistory, OperationAssignment, ThetaFitness};
use crate::embedding::EmbeddingTable;
use crate::error::{CellError, Result};
use crate::genome_search::{GenomeHistory, InteractionNorm, MutationEvent};
use crate::interactions::{FFParams, OperationKind};
use crate::model_functioning::{Dense, FinalModel, FunctioningHistory, Mlp, RetainedPair};
use crate::pairs::all_pairs;

pub const MAGIC: &[u8; 8] = b"CELLCKPT";
pub const VERSION: u32 = 1;

/// Everything a stage hands to the next one, plus its records.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Last completed stage, 1 to 3.
    pub stage: u8,
    pub config: serde_json::Value,
    pub table: EmbeddingTable,
    pub assignment: OperationAssignment,
    pub theta: Option<ThetaFitness>,
    pub pair_weights: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub norm: Option<InteractionNorm>,
    pub final_model: Option<FinalModel>,
    pub dna_history: Option<DnaHistory>,
    pub genome_history: Option<GenomeHistory>,
    pub events: Vec<MutationEvent>,
    pub functioning_history: Option<FunctioningHistory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    stage: u8,
    config: serde_json::Value,
    m: usize,
    dim: usize,
    cardinalities: Vec<usize>,
    kinds: Vec<OperationKind>,
    has_theta: bool,
    has_pair_weights: bool,
    has_relevance: bool,
    has_norm: bool,
    /// `[fan_in, fan_out]` per layer of the final MLP.
    mlp_layers: Option<Vec<[usize; 2]>>,
    dna_history: Option<DnaHistory>,
    genome_history: Option<GenomeHistory>,
    events: Vec<MutationEvent>,
    functioning_history: Option<FunctioningHistory>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Default)]
struct BlobWriter {
    entries: Vec<ArrayEntry>,
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, name: impl Into<String>, data: &[f64]) {
        self.entries.push(ArrayEntry {
            name: name.into(),
            offset: self.bytes.len() as u64,
            len: data.len() as u64,
        });
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn push_table(&mut self, prefix: &str, table: &EmbeddingTable) {
        for (k, t) in table.tables.iter().enumerate() {
            self.push(format!("{prefix}embedding/{k}"), t);
        }
    }

    fn push_ff(&mut self, name: String, ff: &FFParams) {
        self.push(format!("{name}/weight"), &ff.weight);
        self.push(format!("{name}/bias"), &ff.bias);
    }
}

struct BlobReader<'a> {
    index: HashMap<&'a str, (usize, usize)>,
    bytes: &'a [u8],
}

impl<'a> BlobReader<'a> {
    fn new(entries: &'a [ArrayEntry], bytes: &'a [u8]) -> Result<Self> {
        let mut index = HashMap::new();
        for e in entries {
            let start = e.offset as usize;
            let end = start
                .checked_add(e.len as usize * 8)
                .filter(|&end| end <= bytes.len())
                .ok_or_else(|| CellError::Checkpoint(format!("array {} exceeds the blob", e.name)))?;
            index.insert(e.name.as_str(), (start, end));
        }
        Ok(BlobReader { index, bytes })
    }

    fn take(&self, name: &str, expected: usize) -> Result<Vec<f64>> {
        let &(start, end) = self
            .index
            .get(name)
            .ok_or_else(|| CellError::Checkpoint(format!("missing array {name}")))?;
        if end - start != expected * 8 {
            return Err(CellError::Checkpoint(format!(
                "array {name} holds {} values, expected {expected}",
                (end - start) / 8
            )));
        }
        Ok(self.bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn table(&self, prefix: &str, cards: &[usize], dim: usize) -> Result<EmbeddingTable> {
        let tables = cards
            .iter()
            .enumerate()
            .map(|(k, &c)| self.take(&format!("{prefix}embedding/{k}"), c * dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(EmbeddingTable {
            dim,
            cardinalities: cards.to_vec(),
            tables,
        })
    }

    fn ff(&self, name: &str, kind: OperationKind, dim: usize) -> Result<Option<FFParams>> {
        let Some(in_dim) = kind.ff_in_dim(dim) else {
            return Ok(None);
        };
        Ok(Some(FFParams {
            in_dim,
            dim,
            weight: self.take(&format!("{name}/weight"), in_dim * dim)?,
            bias: self.take(&format!("{name}/bias"), dim)?,
        }))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = self.assignment.m;
        let mut blob = BlobWriter::default();
        blob.push_table("", &self.table);
        for (p, ff) in self.assignment.ff.iter().enumerate() {
            if let Some(ff) = ff {
                blob.push_ff(format!("ff/{p}"), ff);
            }
        }
        if let Some(theta) = &self.theta {
            let flat: Vec<f64> = theta.values.iter().flatten().copied().collect();
            blob.push("theta", &flat);
        }
        if let Some(w) = &self.pair_weights {
            blob.push("pair_weights", w);
        }
        let has_relevance = match (&self.alpha, &self.beta) {
            (Some(a), Some(b)) => {
                blob.push("alpha", a);
                blob.push("beta", b);
                true
            }
            (None, None) => false,
            _ => return Err(CellError::Checkpoint("alpha and beta must be saved together".into())),
        };
        if let Some(norm) = &self.norm {
            blob.push("norm/mean", &norm.running_mean);
            blob.push("norm/var", &norm.running_var);
        }
        let mlp_layers = self.final_model.as_ref().map(|fm| {
            blob.push_table("final/", &fm.table);
            for rp in &fm.retained_pairs {
                if let Some(ff) = &rp.ff {
                    blob.push_ff(format!("final/ff/{}", rp.index), ff);
                }
            }
            fm.mlp
                .layers
                .iter()
                .enumerate()
                .map(|(l, d)| {
                    blob.push(
                        format!("final/mlp/{l}/weight"),
                        d.weight.as_standard_layout().as_slice().expect("standard layout"),
                    );
                    blob.push(format!("final/mlp/{l}/bias"), d.bias.as_slice().expect("contiguous"));
                    [d.weight.nrows(), d.weight.ncols()]
                })
                .collect()
        });
        let header = Header {
            version: VERSION,
            stage: self.stage,
            config: self.config.clone(),
            m,
            dim: self.table.dim,
            cardinalities: self.table.cardinalities.clone(),
            kinds: self.assignment.kinds.clone(),
            has_theta: self.theta.is_some(),
            has_pair_weights: self.pair_weights.is_some(),
            has_relevance,
            has_norm: self.norm.is_some(),
            mlp_layers,
            dna_history: self.dna_history.clone(),
            genome_history: self.genome_history.clone(),
            events: self.events.clone(),
            functioning_history: self.functioning_history.clone(),
            arrays: blob.entries,
        };
        let json = serde_json::to_vec_pretty(&header)
            .map_err(|e| CellError::Checkpoint(format!("header: {e}")))?;
        let mut out = Vec::with_capacity(16 + json.len() + blob.bytes.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob.bytes);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CellError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| CellError::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| CellError::Checkpoint(format!("header: {e}")))?;
        if header.version != VERSION {
            return Err(CellError::Checkpoint(format!(
                "unsupported version {} (expected {VERSION})",
                header.version
            )));
        }
        if !(1..=3).contains(&header.stage) {
            return Err(CellError::Checkpoint(format!("invalid stage {}", header.stage)));
        }
        let blob = BlobReader::new(&header.arrays, &bytes[header_end..])?;
        let (m, dim) = (header.m, header.dim);
        if header.cardinalities.len() != m || header.kinds.len() != all_pairs(m).len() {
            return Err(CellError::Checkpoint("field or pair count mismatch".into()));
        }
        let table = blob.table("", &header.cardinalities, dim)?;
        let ff = header
            .kinds
            .iter()
            .enumerate()
            .map(|(p, &k)| blob.ff(&format!("ff/{p}"), k, dim))
            .collect::<Result<Vec<_>>>()?;
        let assignment = OperationAssignment {
            m,
            dim,
            kinds: header.kinds.clone(),
            ff,
        };
        let n_pairs = assignment.kinds.len();
        let theta = if header.has_theta {
            let flat = blob.take("theta", n_pairs * 4)?;
            Some(ThetaFitness {
                m,
                values: flat
                    .chunks_exact(4)
                    .map(|c| [c[0], c[1], c[2], c[3]])
                    .collect(),
            })
        } else {
            None
        };
        let pair_weights = if header.has_pair_weights {
            Some(blob.take("pair_weights", n_pairs)?)
        } else {
            None
        };
        let (alpha, beta) = if header.has_relevance {
            (Some(blob.take("alpha", m)?), Some(blob.take("beta", n_pairs)?))
        } else {
            (None, None)
        };
        let norm = if header.has_norm {
            Some(InteractionNorm {
                running_mean: blob.take("norm/mean", n_pairs)?,
                running_var: blob.take("norm/var", n_pairs)?,
            })
        } else {
            None
        };
        let final_model = match &header.mlp_layers {
            None => None,
            Some(shapes) => {
                let (Some(a), Some(b)) = (&alpha, &beta) else {
                    return Err(CellError::Checkpoint("final model without relevance".into()));
                };
                let fm_table = blob.table("final/", &header.cardinalities, dim)?;
                let retained_features = (0..m).filter(|&i| a[i] != 0.0).collect();
                let retained_pairs = all_pairs(m)
                    .into_iter()
                    .enumerate()
                    .filter(|&(p, _)| b[p] != 0.0)
                    .map(|(p, pair)| {
                        let kind = assignment.kinds[p];
                        Ok(RetainedPair {
                            index: p,
                            pair,
                            kind,
                            ff: blob.ff(&format!("final/ff/{p}"), kind, dim)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let layers = shapes
                    .iter()
                    .enumerate()
                    .map(|(l, &[fan_in, fan_out])| {
                        let w = blob.take(&format!("final/mlp/{l}/weight"), fan_in * fan_out)?;
                        let bias = blob.take(&format!("final/mlp/{l}/bias"), fan_out)?;
                        Ok(Dense {
                            weight: Array2::from_shape_vec((fan_in, fan_out), w)
                                .map_err(|e| CellError::Checkpoint(e.to_string()))?,
                            bias: Array1::from(bias),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let fm = FinalModel {
                    table: fm_table,
                    alpha: a.clone(),
                    beta: b.clone(),
                    retained_features,
                    retained_pairs,
                    mlp: Mlp { layers },
                };
                if fm.mlp.layers.is_empty() || fm.mlp.in_dim() != fm.input_dim() {
                    return Err(CellError::Checkpoint("mlp input width does not match retained set".into()));
                }
                Some(fm)
            }
        };
        Ok(Checkpoint {
            stage: header.stage,
            config: header.config,
            table,
            assignment,
            theta,
            pair_weights,
            alpha,
            beta,
            norm,
            final_model,
            dna_history: header.dna_history,
            genome_history: header.genome_history,
            events: header.events,
            functioning_history: header.functioning_history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| CellError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| CellError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
