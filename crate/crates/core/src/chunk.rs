//! Action chunks: fixed-horizon action sequences with a validity prefix mask.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// An `h × d_a` block of actions. Valid steps form a non-empty prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    actions: Vec<Vec<f64>>,
    mask: Vec<bool>,
}

impl ActionChunk {
    pub fn new(actions: Vec<Vec<f64>>, mask: Vec<bool>) -> Result<Self> {
        if actions.is_empty() {
            return Err(invalid("chunk must have at least one step"));
        }
        if actions.len() != mask.len() {
            return Err(invalid(format!(
                "chunk has {} steps but mask has {} entries",
                actions.len(),
                mask.len()
            )));
        }
        let dim = actions[0].len();
        if dim == 0 || actions.iter().any(|a| a.len() != dim) {
            return Err(invalid("chunk rows must share a non-zero action dimension"));
        }
        if !mask[0] {
            return Err(invalid("chunk needs at least one valid step"));
        }
        if mask.windows(2).any(|w| !w[0] && w[1]) {
            return Err(invalid("valid steps must form a prefix"));
        }
        if actions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("chunk contains non-finite action entries"));
        }
        Ok(Self { actions, mask })
    }

    /// Chunk with every step valid.
    pub fn full(actions: Vec<Vec<f64>>) -> Result<Self> {
        let mask = vec![true; actions.len()];
        Self::new(actions, mask)
    }

    /// `horizon` steps of the same action, all valid.
    pub fn constant(action: &[f64], horizon: usize) -> Result<Self> {
        Self::full(vec![action.to_vec(); horizon])
    }

    /// First `valid` rows are taken from `actions`; remaining rows are zero and masked.
    pub fn padded(actions: &[Vec<f64>], horizon: usize) -> Result<Self> {
        if actions.is_empty() || actions.len() > horizon {
            return Err(invalid(format!(
                "cannot pad {} actions to horizon {horizon}",
                actions.len()
            )));
        }
        let dim = actions[0].len();
        let mut rows = actions.to_vec();
        rows.resize(horizon, vec![0.0; dim]);
        let mut mask = vec![true; actions.len()];
        mask.resize(horizon, false);
        Self::new(rows, mask)
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn action_dim(&self) -> usize {
        self.actions[0].len()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().take_while(|m| **m).count()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn actions(&self) -> &[Vec<f64>] {
        &self.actions
    }

    pub fn step(&self, k: usize) -> &[f64] {
        &self.actions[k]
    }

    pub fn valid_steps(&self) -> &[Vec<f64>] {
        &self.actions[..self.valid_len()]
    }

    /// Row-major flattening with masked steps zeroed.
    pub fn masked_flat(&self) -> Vec<f64> {
        self.actions
            .iter()
            .zip(&self.mask)
            .flat_map(|(row, &m)| row.iter().map(move |&v| if m { v } else { 0.0 }))
            .collect()
    }

    /// Keeps the first `len` valid steps; the remainder is zeroed and masked.
    pub fn truncated(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.valid_len() {
            return Err(invalid(format!(
                "prefix length {len} outside 1..={}",
                self.valid_len()
            )));
        }
        Self::padded(&self.actions[..len], self.horizon())
    }

    /// Applies `f` to every valid entry; masked entries are left untouched.
    pub fn map_valid(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Result<Self> {
        let actions = self
            .actions
            .iter()
            .zip(&self.mask)
            .enumerate()
            .map(|(k, (row, &m))| {
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| if m { f(k, j, v) } else { v })
                    .collect()
            })
            .collect();
        Self::new(actions, self.mask.clone())
    }
}
