//! Fixed random-Fourier context tokens computed from the environment state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::EnvState;
use crate::error::{Error, Result};

/// `T × d_model` token matrix, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextFeatures {
    pub tokens: Vec<f64>,
    pub count: usize,
    pub d_model: usize,
}

impl ContextFeatures {
    pub fn new(tokens: Vec<f64>, count: usize, d_model: usize) -> Result<Self> {
        if tokens.len() != count * d_model {
            return Err(Error::ShapeMismatch(format!(
                "{} token values for {count} × {d_model}",
                tokens.len()
            )));
        }
        Ok(Self {
            tokens,
            count,
            d_model,
        })
    }

    pub fn token(&self, t: usize) -> &[f64] {
        &self.tokens[t * self.d_model..(t + 1) * self.d_model]
    }

    /// Mean over tokens.
    pub fn pooled(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.d_model];
        for t in 0..self.count {
            for (o, v) in out.iter_mut().zip(self.token(t)) {
                *o += v;
            }
        }
        if self.count > 0 {
            out.iter_mut().for_each(|o| *o /= self.count as f64);
        }
        out
    }
}

/// Token 0 encodes the goal offset `goal − proprio`, token 1 the proprio
/// itself, further tokens repeat the offset at higher frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct Featurizer {
    count: usize,
    d_model: usize,
    /// Per token: `d_model / 2` frequency rows of width `input_dim`.
    freqs: Vec<Vec<f64>>,
    input_dim: usize,
}

impl Featurizer {
    pub fn new(count: usize, d_model: usize, input_dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let freqs = (0..count)
            .map(|t| {
                let s = scale * (1.0 + t as f64 / 2.0);
                (0..d_model / 2 * input_dim)
                    .map(|_| s * normal.sample(&mut rng))
                    .collect()
            })
            .collect();
        Self {
            count,
            d_model,
            freqs,
            input_dim,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn featurize(&self, state: &EnvState) -> Result<ContextFeatures> {
        let d = self.input_dim;
        if state.proprio.len() != d || (!state.goal.is_empty() && state.goal.len() != d) {
            return Err(Error::ShapeMismatch(format!(
                "state dims ({}, {}) do not match featurizer input {d}",
                state.proprio.len(),
                state.goal.len()
            )));
        }
        let offset: Vec<f64> = if state.goal.is_empty() {
            vec![0.0; d]
        } else {
            state.goal.iter().zip(&state.proprio).map(|(g, p)| g - p).collect()
        };
        let half = self.d_model / 2;
        let mut tokens = Vec::with_capacity(self.count * self.d_model);
        for (t, freqs) in self.freqs.iter().enumerate() {
            let x = if t == 1 { &state.proprio } else { &offset };
            let phases: Vec<f64> = (0..half)
                .map(|i| {
                    freqs[i * d..(i + 1) * d]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum()
                })
                .collect();
            tokens.extend(phases.iter().map(|p| p.sin()));
            tokens.extend(phases.iter().map(|p| p.cos()));
        }
        ContextFeatures::new(tokens, self.count, self.d_model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(p: [f64; 2], g: [f64; 2]) -> EnvState {
        EnvState {
            proprio: p.to_vec(),
            goal: g.to_vec(),
            step_index: 0,
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let f = Featurizer::new(2, 8, 2, 2.0, 0);
        let a = f.featurize(&state([0.1, 0.2], [0.6, 0.6])).unwrap();
        let b = Featurizer::new(2, 8, 2, 2.0, 0)
            .featurize(&state([0.1, 0.2], [0.6, 0.6]))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.len(), 16);
        assert!(a.tokens.iter().all(|v| v.abs() <= 1.0));
        // sin² + cos² = 1 per frequency
        for i in 0..4 {
            let s = a.token(0)[i];
            let c = a.token(0)[i + 4];
            assert!((s * s + c * c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_offset_token() {
        let f = Featurizer::new(1, 4, 2, 1.0, 3);
        let c = f.featurize(&state([0.3, 0.3], [0.3, 0.3])).unwrap();
        assert_eq!(c.token(0), &[0.0, 0.0, 1.0, 1.0]);
        assert!(f.featurize(&EnvState {
            proprio: vec![0.0; 3],
            goal: vec![],
            step_index: 0
        })
        .is_err());
    }
}
