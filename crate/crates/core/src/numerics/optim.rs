use crate::numerics::{Matrix, ParamStore};

/// AdamW settings. Weight decay is decoupled and applied only to genuine
/// weight matrices (both dimensions > 1), never to biases, norms, or gates.
#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; None disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(5.0),
        }
    }
}

/// AdamW over the trainable entries of a [`ParamStore`].
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update step using the gradients currently accumulated in the
    /// store. Gradients are left untouched; the caller zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        let ids = store.trainable_ids();
        while self.m.len() < store.len() {
            self.m.push(None);
            self.v.push(None);
        }
        self.t += 1;

        let scale = match self.cfg.clip_norm {
            Some(limit) => {
                let total: f64 = ids.iter().map(|&id| store.grad(id).sq_norm()).sum();
                let norm = total.sqrt();
                if norm > limit {
                    limit / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for id in ids {
            let idx = id.0;
            let (rows, cols) = store.value(id).shape();
            let m = self.m[idx].get_or_insert_with(|| Matrix::zeros(rows, cols));
            let v = self.v[idx].get_or_insert_with(|| Matrix::zeros(rows, cols));
            let p = store.get_mut(id);
            let decay = if rows > 1 && cols > 1 { self.cfg.weight_decay } else { 0.0 };
            for i in 0..rows * cols {
                let g = p.grad.as_slice()[i] * scale;
                let mi = self.cfg.beta1 * m.as_slice()[i] + (1.0 - self.cfg.beta1) * g;
                let vi = self.cfg.beta2 * v.as_slice()[i] + (1.0 - self.cfg.beta2) * g * g;
                m.as_mut_slice()[i] = mi;
                v.as_mut_slice()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let w = p.value.as_slice()[i];
                p.value.as_mut_slice()[i] =
                    w - self.cfg.lr * (mhat / (vhat.sqrt() + self.cfg.eps) + decay * w);
            }
        }
    }
}

/// Cosine-annealed learning rate from `lr` down to `lr * floor_frac`.
pub fn cosine_lr(base: f64, step: usize, total: usize, floor_frac: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step.min(total)) as f64 / total as f64;
    let floor = base * floor_frac;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}
