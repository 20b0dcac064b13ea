//! Per-field embedding tables and sparse row gradients.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use crate::dataset::Instance;
use crate::error::{CellError, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::util::seeded;

pub const INIT_STD: f64 = 0.01;

/// `tables[field]` is a row-major `cardinality x dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub cardinalities: Vec<usize>,
    pub tables: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn init(cardinalities: &[usize], dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(CellError::Config("embedding dim must be at least 1".into()));
        }
        let mut rng = seeded(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tables = cardinalities
            .iter()
            .map(|&card| (0..card * dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        Ok(EmbeddingTable {
            dim,
            cardinalities: cardinalities.to_vec(),
            tables,
        })
    }

    pub fn num_fields(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn row(&self, field: usize, index: usize) -> &[f64] {
        &self.tables[field][index * self.dim..(index + 1) * self.dim]
    }

    pub fn row_mut(&mut self, field: usize, index: usize) -> &mut [f64] {
        let dim = self.dim;
        &mut self.tables[field][index * dim..(index + 1) * dim]
    }

    /// Rows addressed by `inst`, one per field.
    pub fn lookup(&self, inst: &Instance) -> Result<Vec<&[f64]>> {
        if inst.fields.len() != self.num_fields() {
            return Err(CellError::Shape(format!(
                "instance has {} fields, table has {}",
                inst.fields.len(),
                self.num_fields()
            )));
        }
        inst.fields
            .iter()
            .enumerate()
            .map(|(field, &idx)| {
                let idx = idx as usize;
                let card = self.cardinalities[field];
                if idx >= card {
                    Err(CellError::OutOfRange {
                        field,
                        index: idx,
                        cardinality: card,
                    })
                } else {
                    Ok(self.row(field, idx))
                }
            })
            .collect()
    }

    /// Checks that every index of `inst` is addressable.
    pub fn check(&self, inst: &Instance) -> Result<()> {
        self.lookup(inst).map(|_| ())
    }

    pub fn is_finite(&self) -> bool {
        self.tables.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * grad` on the touched rows only.
    pub fn add_sparse(&mut self, grad: &EmbeddingGrad, scale: f64) {
        for (k, &(field, row)) in grad.keys.iter().enumerate() {
            let g = grad.row_at(k);
            for (p, gv) in self.row_mut(field, row as usize).iter_mut().zip(g) {
                *p += scale * gv;
            }
        }
    }
}

/// Gradient rows keyed by `(field, index)`, kept in first-touch order so that
/// accumulation is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingGrad {
    pub dim: usize,
    pub keys: Vec<(usize, u32)>,
    pub data: Vec<f64>,
    slots: HashMap<(usize, u32), usize>,
}

impl EmbeddingGrad {
    pub fn new(dim: usize) -> Self {
        EmbeddingGrad {
            dim,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn slot(&mut self, field: usize, index: u32) -> usize {
        if let Some(&s) = self.slots.get(&(field, index)) {
            return s;
        }
        let s = self.keys.len();
        self.keys.push((field, index));
        self.data.extend(std::iter::repeat_n(0.0, self.dim));
        self.slots.insert((field, index), s);
        s
    }

    /// Accumulates `scale * g` into row `(field, index)`.
    pub fn add(&mut self, field: usize, index: u32, g: &[f64], scale: f64) {
        let s = self.slot(field, index);
        let dim = self.dim;
        for (a, b) in self.data[s * dim..(s + 1) * dim].iter_mut().zip(g) {
            *a += scale * b;
        }
    }

    /// Adds `value` to every coordinate of row `(field, index)`.
    pub fn add_constant(&mut self, field: usize, index: u32, value: f64) {
        let s = self.slot(field, index);
        let dim = self.dim;
        for a in &mut self.data[s * dim..(s + 1) * dim] {
            *a += value;
        }
    }

    pub fn row_at(&self, slot: usize) -> &[f64] {
        &self.data[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn get(&self, field: usize, index: u32) -> Option<&[f64]> {
        self.slots.get(&(field, index)).map(|&s| self.row_at(s))
    }

    pub fn merge(&mut self, other: &EmbeddingGrad) {
        for (k, &(f, i)) in other.keys.iter().enumerate() {
            let g = other.row_at(k).to_vec();
            self.add(f, i, &g, 1.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Lazy Adam over an embedding table: one state per field.
#[derive(Debug, Clone)]
pub struct EmbeddingOptimizer {
    states: Vec<AdamState>,
}

impl EmbeddingOptimizer {
    pub fn new(table: &EmbeddingTable, config: AdamConfig) -> Self {
        EmbeddingOptimizer {
            states: table
                .tables
                .iter()
                .enumerate()
                .map(|(f, t)| AdamState::new(format!("embeddings[{f}]"), config, t.len()))
                .collect(),
        }
    }

    /// Updates only the rows present in `grad`.
    pub fn step(&mut self, table: &mut EmbeddingTable, grad: &EmbeddingGrad) -> Result<()> {
        let dim = table.dim;
        for (field, state) in self.states.iter_mut().enumerate() {
            let rows: Vec<(usize, &[f64])> = grad
                .keys
                .iter()
                .enumerate()
                .filter(|(_, &(f, _))| f == field)
                .map(|(slot, &(_, idx))| (idx as usize, grad.row_at(slot)))
                .collect();
            if rows.is_empty() {
                continue;
            }
            state.step_rows(&mut table.tables[field], dim, rows)?;
        }
        Ok(())
    }
}
