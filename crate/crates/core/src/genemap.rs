//! Gene maps: `m x m` snapshots of the per-pair operation codes and the
//! relevance of features (diagonal) and interactions (off-diagonal).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dna_search::{discretize, ThetaFitness};
use crate::error::{CellError, Result};
use crate::interactions::OperationKind;
use crate::pairs::all_pairs;

/// Code of a discarded feature or interaction.
pub const DISCARDED: i8 = -1;
/// Code reserved for the diagonal (feature) entries.
pub const FEATURE: i8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Dna,
    Genome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneMapFrame {
    pub iteration: u64,
    pub stage: Stage,
    pub m: usize,
    /// Row-major `m x m`, symmetric.
    pub op_codes: Vec<i8>,
    /// Row-major `m x m`, symmetric, non-negative.
    pub relevance: Vec<f64>,
}

/// What a frame is taken from.
#[derive(Debug, Clone, Copy)]
pub enum StageState<'a> {
    Dna {
        theta: &'a ThetaFitness,
    },
    Genome {
        kinds: &'a [OperationKind],
        alpha: &'a [f64],
        beta: &'a [f64],
        /// Zero relevance means discarded only once the search has converged.
        converged: bool,
    },
}

pub fn snapshot(state: StageState<'_>, iteration: u64) -> GeneMapFrame {
    match state {
        StageState::Dna { theta } => {
            let m = theta.m;
            let kinds = discretize(theta);
            let mut f = GeneMapFrame::blank(m, iteration, Stage::Dna);
            for i in 0..m {
                f.set(i, i, FEATURE, 1.0);
            }
            for (pair, kind) in all_pairs(m).into_iter().zip(kinds) {
                f.set(pair.i, pair.j, kind.code() as i8, 1.0);
            }
            f
        }
        StageState::Genome {
            kinds,
            alpha,
            beta,
            converged,
        } => {
            let m = alpha.len();
            let mut f = GeneMapFrame::blank(m, iteration, Stage::Genome);
            for (i, &a) in alpha.iter().enumerate() {
                let code = if converged && a == 0.0 { DISCARDED } else { FEATURE };
                f.set(i, i, code, a.abs());
            }
            for ((pair, &kind), &b) in all_pairs(m).iter().zip(kinds).zip(beta) {
                let code = if converged && b == 0.0 {
                    DISCARDED
                } else {
                    kind.code() as i8
                };
                f.set(pair.i, pair.j, code, b.abs());
            }
            f
        }
    }
}

impl GeneMapFrame {
    fn blank(m: usize, iteration: u64, stage: Stage) -> Self {
        GeneMapFrame {
            iteration,
            stage,
            m,
            op_codes: vec![DISCARDED; m * m],
            relevance: vec![0.0; m * m],
        }
    }

    fn set(&mut self, i: usize, j: usize, code: i8, rel: f64) {
        let m = self.m;
        self.op_codes[i * m + j] = code;
        self.op_codes[j * m + i] = code;
        self.relevance[i * m + j] = rel;
        self.relevance[j * m + i] = rel;
    }

    pub fn code(&self, i: usize, j: usize) -> i8 {
        self.op_codes[i * self.m + j]
    }

    pub fn relevance_at(&self, i: usize, j: usize) -> f64 {
        self.relevance[i * self.m + j]
    }
}

pub const CSV_HEADER: &str = "iter,i,j,code,relevance";

/// CSV text for a frame sequence: one row per `(iter, i, j)` with `i <= j`.
pub fn frames_to_csv(frames: &[GeneMapFrame]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for f in frames {
        for i in 0..f.m {
            for j in i..f.m {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    f.iteration,
                    i,
                    j,
                    f.code(i, j),
                    f.relevance_at(i, j)
                ));
            }
        }
    }
    out
}

pub fn export_csv(frames: &[GeneMapFrame], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if frames.is_empty() {
        return Err(CellError::Config("no gene-map frames to export".into()));
    }
    fs::write(path, frames_to_csv(frames)).map_err(|e| CellError::io(path, e))
}

/// Parses [`frames_to_csv`] output back into frames tagged with `stage`.
pub fn parse_csv(text: &str, stage: Stage) -> Result<Vec<GeneMapFrame>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => {
            return Err(CellError::Parse {
                line: 1,
                msg: format!("expected header {CSV_HEADER:?}"),
            })
        }
    }
    let mut rows: Vec<(u64, usize, usize, i8, f64)> = Vec::new();
    for (k, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| CellError::Parse {
            line: k + 1,
            msg: msg.to_string(),
        };
        let t: Vec<&str> = line.split(',').collect();
        if t.len() != 5 {
            return Err(bad("expected 5 columns"));
        }
        rows.push((
            t[0].parse().map_err(|_| bad("bad iter"))?,
            t[1].parse().map_err(|_| bad("bad i"))?,
            t[2].parse().map_err(|_| bad("bad j"))?,
            t[3].parse().map_err(|_| bad("bad code"))?,
            t[4].parse().map_err(|_| bad("bad relevance"))?,
        ));
    }
    let mut frames: Vec<GeneMapFrame> = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let iter = rows[start].0;
        let mut end = start;
        while end < rows.len() && rows[end].0 == iter {
            end += 1;
        }
        let m = rows[start..end].iter().map(|r| r.2 + 1).max().unwrap_or(0);
        let mut f = GeneMapFrame::blank(m, iter, stage);
        for &(_, i, j, code, rel) in &rows[start..end] {
            f.set(i, j, code, rel);
        }
        frames.push(f);
        start = end;
    }
    Ok(frames)
}

/// Grey level of an operation code: `50 * (code + 1)`.
pub fn code_pixel(code: i8) -> u8 {
    (50 * (i16::from(code) + 1)).clamp(0, 255) as u8
}

fn pgm(m: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{m} {m}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Binary PGM of the operation codes.
pub fn code_image(frame: &GeneMapFrame) -> Vec<u8> {
    let px: Vec<u8> = frame.op_codes.iter().map(|&c| code_pixel(c)).collect();
    pgm(frame.m, &px)
}

/// Binary PGM of the relevance scaled to the frame maximum.
pub fn relevance_image(frame: &GeneMapFrame) -> Vec<u8> {
    let max = frame.relevance.iter().copied().fold(0.0f64, f64::max);
    let px: Vec<u8> = frame
        .relevance
        .iter()
        .map(|&r| if max > 0.0 { (255.0 * r / max).round() as u8 } else { 0 })
        .collect();
    pgm(frame.m, &px)
}

/// Sibling path holding the relevance map of an image written to `path`.
pub fn relevance_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.relevance.pgm"))
}

/// Writes the code map to `path` and the relevance map to [`relevance_path`].
pub fn export_image(frame: &GeneMapFrame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, code_image(frame)).map_err(|e| CellError::io(path, e))?;
    let rel = relevance_path(path);
    fs::write(&rel, relevance_image(frame)).map_err(|e| CellError::io(&rel, e))
}
