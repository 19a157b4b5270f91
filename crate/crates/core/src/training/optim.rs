use super::{OptimizerKind, SparseGrad};
use std::collections::HashMap;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Skipping zero steps keeps parameters bit-identical (including `-0.0`).
fn sub(p: &mut f64, delta: f64) {
    if delta != 0.0 {
        *p -= delta;
    }
}

/// Gradient descent or Adam. Adam keeps per-row moment state for embedding
/// rows, allocated on first touch, and dense state for head parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    rows: HashMap<u32, Moments>,
    dense: Vec<Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            rows: HashMap::new(),
            dense: Vec::new(),
        }
    }

    /// Advances the shared step counter; call once per parameter update.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn update(kind: OptimizerKind, lr: f64, step: u64, state: &mut Moments, params: &mut [f64], grad: &[f64]) {
        match kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    sub(p, lr * g);
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - BETA1.powi(step as i32);
                let c2 = 1.0 - BETA2.powi(step as i32);
                for (i, (p, g)) in params.iter_mut().zip(grad).enumerate() {
                    let m = &mut state.m[i];
                    let v = &mut state.v[i];
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    sub(p, lr * (*m / c1) / ((*v / c2).sqrt() + EPS));
                }
            }
        }
    }

    /// Updates the touched rows of a row-major `V x dim` table.
    pub fn apply_sparse(&mut self, table: &mut [f64], dim: usize, grad: &SparseGrad) {
        let step = self.step.max(1);
        for (&row, g) in &grad.rows {
            let start = row as usize * dim;
            let params = &mut table[start..start + dim];
            let state = self.rows.entry(row).or_insert_with(|| Moments::zeros(dim));
            Self::update(self.kind, self.lr, step, state, params, g);
        }
    }

    /// Updates a dense parameter block identified by `slot`.
    pub fn apply_dense(&mut self, slot: usize, params: &mut [f64], grad: &[f64]) {
        let step = self.step.max(1);
        while self.dense.len() <= slot {
            self.dense.push(Moments::default());
        }
        if self.dense[slot].m.len() != params.len() {
            self.dense[slot] = Moments::zeros(params.len());
        }
        Self::update(self.kind, self.lr, step, &mut self.dense[slot], params, grad);
    }
}
