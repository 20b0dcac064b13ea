//! Enumeration of unordered field pairs `(i, j)`, `i < j`, in lexicographic order.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
}

impl Pair {
    pub fn new(i: usize, j: usize) -> Self {
        if i < j {
            Pair { i, j }
        } else {
            Pair { i: j, j: i }
        }
    }
}

/// Number of unordered pairs over `m` fields.
pub fn pair_count(m: usize) -> usize {
    m * m.saturating_sub(1) / 2
}

/// All pairs over `m` fields; position in the returned vector is the pair index
/// used by every per-pair parameter vector in the crate.
pub fn all_pairs(m: usize) -> Vec<Pair> {
    let mut out = Vec::with_capacity(pair_count(m));
    for i in 0..m {
        for j in i + 1..m {
            out.push(Pair { i, j });
        }
    }
    out
}

/// Index of `(i, j)` within [`all_pairs`]. Order of the arguments does not matter.
pub fn pair_index(m: usize, i: usize, j: usize) -> Option<usize> {
    let (i, j) = if i < j { (i, j) } else { (j, i) };
    if i == j || j >= m {
        return None;
    }
    // pairs preceding row i: sum_{r<i} (m - 1 - r)
    Some(i * (2 * m - i - 1) / 2 + (j - i - 1))
}
