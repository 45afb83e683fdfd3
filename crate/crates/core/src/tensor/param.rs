use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Index of a block inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A named weight matrix with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step_count: u64,
}

impl ParamBlock {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        Self {
            name: name.into(),
            rows,
            cols,
            values: vec![0.0; n],
            grad: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Fills the values with `N(0, std^2)` draws.
    pub fn gaussian_init(&mut self, rng: &mut Rng, std: f64) -> Result<()> {
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::InvalidArgument(format!("init std must be positive, got {std}")));
        }
        let normal = Normal::new(0.0, std).expect("valid std");
        for v in &mut self.values {
            *v = normal.sample(rng);
        }
        Ok(())
    }

    /// One bias-corrected Adam update; the gradient is zeroed afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(i) = self.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                node: i,
                what: format!("gradient of `{}`", self.name),
            });
        }
        self.step_count += 1;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(self.step_count as i32);
        let c2 = 1.0 - b2.powi(self.step_count as i32);
        for i in 0..self.values.len() {
            let g = self.grad[i];
            self.adam_m[i] = b1 * self.adam_m[i] + (1.0 - b1) * g;
            self.adam_v[i] = b2 * self.adam_v[i] + (1.0 - b2) * g * g;
            let m_hat = self.adam_m[i] / c1;
            let v_hat = self.adam_v[i] / c2;
            self.values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            self.grad[i] = 0.0;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// The learnable blocks of one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub blocks: Vec<ParamBlock>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.blocks.push(ParamBlock::zeros(name, rows, cols));
        ParamId(self.blocks.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamBlock {
        &mut self.blocks[id.0]
    }

    pub fn gaussian_init(&mut self, rng: &mut Rng, std: f64) -> Result<()> {
        self.blocks.iter_mut().try_for_each(|b| b.gaussian_init(rng, std))
    }

    pub fn n_values(&self) -> usize {
        self.blocks.iter().map(ParamBlock::len).sum()
    }

    pub fn grad_buffer(&self) -> GradBuffer {
        GradBuffer {
            grads: self.blocks.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Adds `scale * buf` into the block gradients.
    pub fn accumulate(&mut self, buf: &GradBuffer, scale: f64) {
        for (b, g) in self.blocks.iter_mut().zip(&buf.grads) {
            for (a, x) in b.grad.iter_mut().zip(g) {
                *a += scale * x;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for b in &mut self.blocks {
            b.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        self.blocks.iter_mut().try_for_each(|b| b.adam_step(cfg))
    }

    /// All values concatenated in block order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.values.iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for b in &mut self.blocks {
            for v in &mut b.values {
                *v = *it.next().expect("flat length matches");
            }
        }
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn flat(&self) -> Vec<f64> {
        self.grads.iter().flatten().copied().collect()
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}
