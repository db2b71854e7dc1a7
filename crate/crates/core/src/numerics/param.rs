use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numerics::Matrix;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// A trainable (or frozen) tensor with its gradient accumulator.
///
/// `stop_grad` marks values that must act as constants when consumed by the
/// tape: gradient flowing back through any use of such a value is dropped
/// exactly, so upstream producers accumulate bitwise zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    pub requires_grad: bool,
    pub stop_grad: bool,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Param { value, grad, requires_grad: true, stop_grad: false }
    }
}

/// Flat arena of named parameters. Names are dot-separated paths
/// ("dec.layer0.self_attn.wq") so whole components can be frozen or
/// thawed by prefix.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<Param>,
    names: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Matrix) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let id = self.entries.len();
        self.entries.push(Param::new(value));
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    /// Weight matrix initialized uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)),
    /// fan_in being the input dimension (row count) in this row-major layout.
    pub fn add_weight(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (rows as f64).sqrt();
        let m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound));
        self.add(name, m)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::zeros(rows, cols))
    }

    pub fn add_scalar(&mut self, name: &str, v: f64) -> ParamId {
        self.add(name, Matrix::scalar(v))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.as_slice().len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad = Matrix::zeros(p.value.rows(), p.value.cols());
        }
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        self.entries[id.0].requires_grad = flag;
    }

    /// Freeze everything, then unfreeze parameters whose name starts with
    /// one of the given prefixes. Returns how many parameters are trainable.
    pub fn set_trainable_prefixes(&mut self, prefixes: &[&str]) -> usize {
        let mut n = 0;
        for (i, p) in self.entries.iter_mut().enumerate() {
            let name = &self.names[i];
            p.requires_grad = prefixes.iter().any(|pre| name.starts_with(pre));
            if p.requires_grad {
                n += 1;
            }
        }
        n
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (i, p) in self.entries.iter_mut().enumerate() {
            if self.names[i].starts_with(prefix) {
                p.requires_grad = false;
            }
        }
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.names[i].starts_with(prefix))
            .map(ParamId)
            .collect()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].requires_grad)
            .map(ParamId)
            .collect()
    }

    /// Snapshot of all values, for bitwise freeze-contract checks.
    pub fn snapshot(&self) -> Vec<Matrix> {
        self.entries.iter().map(|p| p.value.clone()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("param store serialization")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut store: ParamStore =
            serde_json::from_str(s).map_err(|e| CoreError::Format(format!("param store: {e}")))?;
        store.index = store
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_bounds_follow_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let id = store.add_weight("w", 16, 8, &mut rng);
        let bound = 1.0 / 4.0;
        assert!(store.value(id).as_slice().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn prefix_freezing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add_weight("enc.w", 4, 4, &mut rng);
        store.add_weight("dec.w", 4, 4, &mut rng);
        let n = store.set_trainable_prefixes(&["dec"]);
        assert_eq!(n, 1);
        assert!(!store.get(store.find("enc.w").unwrap()).requires_grad);
        assert!(store.get(store.find("dec.w").unwrap()).requires_grad);
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add_weight("a.w", 5, 3, &mut rng);
        store.add_scalar("a.gate", 0.12345678901234567);
        let json = store.to_json();
        let back = ParamStore::from_json(&json).unwrap();
        for id in store.ids() {
            assert!(store.value(id).bits_eq(back.value(id)), "value drift for {}", store.name(id));
        }
        assert_eq!(back.find("a.gate"), store.find("a.gate"));
    }
}
