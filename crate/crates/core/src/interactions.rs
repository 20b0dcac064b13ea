//! The four binary interaction operations and their exact gradients.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CellError, Result};
use crate::util::{uniform_vec, Rng};

/// Interaction operation. The integer codes are part of the gene-map and
/// checkpoint formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OperationKind {
    /// Element-wise sum.
    Sum = 0,
    /// Element-wise product.
    Product = 1,
    /// Element-wise product followed by a ReLU feed-forward layer.
    ProductFF = 2,
    /// Concatenation followed by a ReLU feed-forward layer.
    ConcatFF = 3,
}

pub const ALL_KINDS: [OperationKind; 4] = [
    OperationKind::Sum,
    OperationKind::Product,
    OperationKind::ProductFF,
    OperationKind::ConcatFF,
];

impl OperationKind {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        ALL_KINDS.get(code as usize).copied()
    }

    pub fn needs_ff(self) -> bool {
        matches!(self, OperationKind::ProductFF | OperationKind::ConcatFF)
    }

    /// Input width of the feed-forward layer, if any.
    pub fn ff_in_dim(self, dim: usize) -> Option<usize> {
        match self {
            OperationKind::ProductFF => Some(dim),
            OperationKind::ConcatFF => Some(2 * dim),
            _ => None,
        }
    }

    /// Scalar values read or written by one forward call (inputs, parameters,
    /// output). Linear in `dim` for the parameter-free kinds, quadratic otherwise.
    pub fn touched_values(self, dim: usize) -> usize {
        match self.ff_in_dim(dim) {
            None => 3 * dim,
            Some(in_dim) => 2 * dim + in_dim * dim + dim + dim,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            OperationKind::Sum => "sum",
            OperationKind::Product => "product",
            OperationKind::ProductFF => "product_ff",
            OperationKind::ConcatFF => "concat_ff",
        }
    }
}

impl Serialize for OperationKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.code())
    }
}

impl<'de> Deserialize<'de> for OperationKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let code = u8::deserialize(d)?;
        OperationKind::from_code(code)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown operation code {code}")))
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Feed-forward layer `ReLU(W^T x + b)`. `weight` is row-major `in_dim x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FFParams {
    pub in_dim: usize,
    pub dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FFParams {
    pub fn zeros(in_dim: usize, dim: usize) -> Self {
        FFParams {
            in_dim,
            dim,
            weight: vec![0.0; in_dim * dim],
            bias: vec![0.0; dim],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init(kind: OperationKind, dim: usize, rng: &mut Rng) -> Option<Self> {
        let in_dim = kind.ff_in_dim(dim)?;
        let limit = (6.0 / (in_dim + dim) as f64).sqrt();
        Some(FFParams {
            in_dim,
            dim,
            weight: uniform_vec(rng, in_dim * dim, limit),
            bias: vec![0.0; dim],
        })
    }

    pub fn matches(&self, kind: OperationKind, dim: usize) -> bool {
        kind.ff_in_dim(dim) == Some(self.in_dim)
            && self.dim == dim
            && self.weight.len() == self.in_dim * dim
            && self.bias.len() == dim
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &FFParams, scale: f64) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += scale * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += scale * b;
        }
    }
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct OpTape {
    pub kind: OperationKind,
    pub f_i: Vec<f64>,
    pub f_j: Vec<f64>,
    /// Input to the feed-forward layer (empty for parameter-free kinds).
    pub ff_input: Vec<f64>,
    /// Pre-activation of the feed-forward layer (empty for parameter-free kinds).
    pub pre: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpGrads {
    pub f_i: Vec<f64>,
    pub f_j: Vec<f64>,
    pub ff: Option<FFParams>,
}

fn check_ff(kind: OperationKind, dim: usize, ff: Option<&FFParams>) -> Result<()> {
    match (kind.needs_ff(), ff) {
        (true, Some(p)) if p.matches(kind, dim) => Ok(()),
        (true, Some(p)) => Err(CellError::Shape(format!(
            "{kind}: feed-forward params are {}x{}, expected {}x{dim}",
            p.in_dim,
            p.dim,
            kind.ff_in_dim(dim).unwrap_or(0)
        ))),
        (true, None) => Err(CellError::Shape(format!("{kind} requires feed-forward params"))),
        (false, Some(_)) => Err(CellError::Shape(format!("{kind} takes no feed-forward params"))),
        (false, None) => Ok(()),
    }
}

/// Applies `kind` to `(f_i, f_j)`. The output always has the input dimension.
pub fn op_forward(
    kind: OperationKind,
    f_i: &[f64],
    f_j: &[f64],
    ff: Option<&FFParams>,
) -> Result<(Vec<f64>, OpTape)> {
    let dim = f_i.len();
    if f_j.len() != dim || dim == 0 {
        return Err(CellError::Shape(format!(
            "operand lengths {} and {} differ or are empty",
            dim,
            f_j.len()
        )));
    }
    check_ff(kind, dim, ff)?;
    let mut tape = OpTape {
        kind,
        f_i: f_i.to_vec(),
        f_j: f_j.to_vec(),
        ff_input: Vec::new(),
        pre: Vec::new(),
    };
    let out = match kind {
        OperationKind::Sum => f_i.iter().zip(f_j).map(|(a, b)| a + b).collect(),
        OperationKind::Product => f_i.iter().zip(f_j).map(|(a, b)| a * b).collect(),
        OperationKind::ProductFF | OperationKind::ConcatFF => {
            let p = ff.expect("checked above");
            let x: Vec<f64> = if kind == OperationKind::ProductFF {
                f_i.iter().zip(f_j).map(|(a, b)| a * b).collect()
            } else {
                f_i.iter().chain(f_j).copied().collect()
            };
            let mut pre = p.bias.clone();
            for (r, &xr) in x.iter().enumerate() {
                let row = &p.weight[r * dim..(r + 1) * dim];
                for (acc, w) in pre.iter_mut().zip(row) {
                    *acc += xr * w;
                }
            }
            let out = pre.iter().map(|&v| v.max(0.0)).collect();
            tape.ff_input = x;
            tape.pre = pre;
            out
        }
    };
    Ok((out, tape))
}

/// Exact gradients of `<upstream, op_forward(...)>`. ReLU'(0) is taken as 0.
pub fn op_backward(
    kind: OperationKind,
    tape: &OpTape,
    upstream: &[f64],
    ff: Option<&FFParams>,
) -> Result<OpGrads> {
    let dim = tape.f_i.len();
    let mut g = OpGrads {
        f_i: vec![0.0; dim],
        f_j: vec![0.0; dim],
        ff: ff.map(|p| FFParams::zeros(p.in_dim, p.dim)),
    };
    op_backward_into(kind, tape, upstream, ff, &mut g.f_i, &mut g.f_j, g.ff.as_mut())?;
    Ok(g)
}

/// Like [`op_backward`] but adds the gradients into caller buffers.
pub fn op_backward_into(
    kind: OperationKind,
    tape: &OpTape,
    upstream: &[f64],
    ff: Option<&FFParams>,
    g_i: &mut [f64],
    g_j: &mut [f64],
    g_ff: Option<&mut FFParams>,
) -> Result<()> {
    if tape.kind != kind {
        return Err(CellError::Shape(format!(
            "tape recorded {} but backward called for {kind}",
            tape.kind
        )));
    }
    let dim = tape.f_i.len();
    if upstream.len() != dim || g_i.len() != dim || g_j.len() != dim {
        return Err(CellError::Shape(format!(
            "upstream length {} or gradient buffers do not match {dim}",
            upstream.len()
        )));
    }
    check_ff(kind, dim, ff)?;
    match kind {
        OperationKind::Sum => {
            for c in 0..dim {
                g_i[c] += upstream[c];
                g_j[c] += upstream[c];
            }
        }
        OperationKind::Product => {
            for c in 0..dim {
                g_i[c] += upstream[c] * tape.f_j[c];
                g_j[c] += upstream[c] * tape.f_i[c];
            }
        }
        OperationKind::ProductFF | OperationKind::ConcatFF => {
            let p = ff.expect("checked above");
            let dpre: Vec<f64> = upstream
                .iter()
                .zip(&tape.pre)
                .map(|(&u, &z)| if z > 0.0 { u } else { 0.0 })
                .collect();
            let mut g_ff = g_ff;
            if let Some(g) = g_ff.as_deref_mut() {
                if !g.matches(kind, dim) {
                    return Err(CellError::Shape(format!("{kind}: gradient buffer has the wrong shape")));
                }
            }
            for (r, &xr) in tape.ff_input.iter().enumerate() {
                let wrow = &p.weight[r * dim..(r + 1) * dim];
                let mut acc = 0.0;
                for c in 0..dim {
                    acc += wrow[c] * dpre[c];
                }
                if let Some(g) = g_ff.as_deref_mut() {
                    let grow = &mut g.weight[r * dim..(r + 1) * dim];
                    for c in 0..dim {
                        grow[c] += xr * dpre[c];
                    }
                }
                if kind == OperationKind::ProductFF {
                    g_i[r] += acc * tape.f_j[r];
                    g_j[r] += acc * tape.f_i[r];
                } else if r < dim {
                    g_i[r] += acc;
                } else {
                    g_j[r - dim] += acc;
                }
            }
            if let Some(g) = g_ff {
                for c in 0..dim {
                    g.bias[c] += dpre[c];
                }
            }
        }
    }
    Ok(())
}
