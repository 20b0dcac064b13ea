//! Adam with decoupled weight decay, and regularized dual averaging (RDA)
//! with soft-thresholding.

use serde::{Deserialize, Serialize};

use crate::error::{CellError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

impl AdamConfig {
    pub fn without_decay(self) -> Self {
        AdamConfig {
            weight_decay: 0.0,
            ..self
        }
    }
}

/// Moment accumulators for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub group: String,
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(group: impl Into<String>, config: AdamConfig, len: usize) -> Self {
        AdamState {
            group: group.into(),
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    fn check(&self, params: usize, grads: &[f64]) -> Result<()> {
        if params != self.len() || grads.len() != self.len() {
            return Err(CellError::Shape(format!(
                "adam group {}: state {}, params {params}, grads {}",
                self.group,
                self.len(),
                grads.len()
            )));
        }
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(CellError::NonFinite(format!(
                "gradient of parameter group {} at coordinate {k}",
                self.group
            )));
        }
        Ok(())
    }

    #[inline]
    fn update_one(&mut self, k: usize, p: &mut f64, g: f64, bc1: f64, bc2: f64) {
        let c = &self.config;
        let m = c.beta1 * self.m[k] + (1.0 - c.beta1) * g;
        let v = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g;
        self.m[k] = m;
        self.v[k] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        *p *= 1.0 - c.learning_rate * c.weight_decay;
        *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.t as i32;
        (
            1.0 - self.config.beta1.powi(t),
            1.0 - self.config.beta2.powi(t),
        )
    }

    /// One dense step over the whole group.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.check(params.len(), grads)?;
        self.t += 1;
        let (bc1, bc2) = self.corrections();
        for (k, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            self.update_one(k, p, g, bc1, bc2);
        }
        Ok(())
    }

    /// One lazy step touching only the listed rows of a row-major table.
    /// Untouched rows keep their values and moments bit-for-bit; the step
    /// counter is shared by the whole group.
    pub fn step_rows<'a>(
        &mut self,
        params: &mut [f64],
        row_width: usize,
        rows: impl IntoIterator<Item = (usize, &'a [f64])>,
    ) -> Result<()> {
        if params.len() != self.len() {
            return Err(CellError::Shape(format!(
                "adam group {}: state {}, params {}",
                self.group,
                self.len(),
                params.len()
            )));
        }
        let rows: Vec<(usize, &[f64])> = rows.into_iter().collect();
        for &(row, g) in &rows {
            if g.len() != row_width || (row + 1) * row_width > params.len() {
                return Err(CellError::Shape(format!(
                    "adam group {}: row {row} out of range",
                    self.group
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(CellError::NonFinite(format!(
                    "gradient of parameter group {} at row {row}",
                    self.group
                )));
            }
        }
        self.t += 1;
        let (bc1, bc2) = self.corrections();
        for (row, g) in rows {
            let base = row * row_width;
            for (d, &gd) in g.iter().enumerate() {
                let k = base + d;
                let mut p = params[k];
                self.update_one(k, &mut p, gd, bc1, bc2);
                params[k] = p;
            }
        }
        Ok(())
    }

    /// Forgets the moments of coordinates `range` (used when parameters are re-initialized).
    pub fn reset_range(&mut self, range: std::ops::Range<usize>) {
        for k in range {
            self.m[k] = 0.0;
            self.v[k] = 0.0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdaConfig {
    /// Learning rate `gamma`.
    pub gamma: f64,
    pub c: f64,
    pub mu: f64,
}

impl Default for RdaConfig {
    fn default() -> Self {
        RdaConfig {
            gamma: 1e-3,
            c: 0.5,
            mu: 0.8,
        }
    }
}

impl RdaConfig {
    /// Truncation level `h(t, gamma) = c * gamma^(1/2) * (t * gamma)^mu`.
    pub fn threshold(&self, t: u64) -> f64 {
        self.c * self.gamma.sqrt() * (t as f64 * self.gamma).powf(self.mu)
    }
}

/// `sign(v) * max(|v| - h, 0)`.
#[inline]
pub fn soft_threshold(v: f64, h: f64) -> f64 {
    if v > h {
        v - h
    } else if v < -h {
        v + h
    } else {
        0.0
    }
}

/// Dual-averaging state: the running gradient sum around a fixed initial point.
#[derive(Debug, Clone, PartialEq)]
pub struct RdaState {
    pub config: RdaConfig,
    pub init: Vec<f64>,
    pub grad_sum: Vec<f64>,
    pub t: u64,
}

impl RdaState {
    pub fn new(config: RdaConfig, init: Vec<f64>) -> Self {
        let n = init.len();
        RdaState {
            config,
            init,
            grad_sum: vec![0.0; n],
            t: 0,
        }
    }

    /// Adds `grads` to the running sum and sets every coordinate to
    /// `S_h(init - gamma * sum)` with `h = h(t, gamma)`, `t` counting this step.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.init.len() || grads.len() != self.init.len() {
            return Err(CellError::Shape(format!(
                "rda: state {}, params {}, grads {}",
                self.init.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(CellError::NonFinite(format!("rda gradient at coordinate {k}")));
        }
        self.t += 1;
        let h = self.config.threshold(self.t);
        let gamma = self.config.gamma;
        for (k, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            self.grad_sum[k] += g;
            *p = soft_threshold(self.init[k] - gamma * self.grad_sum[k], h);
        }
        Ok(())
    }

    /// Restores coordinate `k` to its initial value with an empty accumulator.
    pub fn reset_coordinate(&mut self, params: &mut [f64], k: usize) {
        self.grad_sum[k] = 0.0;
        params[k] = self.init[k];
    }
}
