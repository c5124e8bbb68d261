//! Reward labeling, chunk slicing, and the JSON Lines dataset format.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chunk::ActionChunk;
use crate::env::{ChunkTransition, Demonstration, EnvState};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardLabeling {
    pub window: usize,
    pub shifted: bool,
    /// Keep failed demonstrations (all low reward) in the dataset.
    pub include_failures: bool,
}

impl Default for RewardLabeling {
    fn default() -> Self {
        Self {
            window: 3,
            shifted: true,
            include_failures: false,
        }
    }
}

/// Sparse success labels: the last `window` steps of a successful demo get the
/// high value, everything else the low value. `shifted` selects `{-1, 1}` over
/// `{0, 1}`. A window longer than the demo is clamped to the demo length.
pub fn label_rewards(demo: &Demonstration, window: usize, shifted: bool) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(invalid("reward window must be at least 1"));
    }
    let low = if shifted { -1.0 } else { 0.0 };
    let len = demo.len();
    let mut rewards = vec![low; len];
    if demo.success {
        let start = len - window.min(len);
        rewards[start..].iter_mut().for_each(|r| *r = 1.0);
    }
    Ok(rewards)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfflineDataset {
    pub transitions: Vec<ChunkTransition>,
    pub h: usize,
    pub gamma: f64,
}

impl OfflineDataset {
    pub fn new(transitions: Vec<ChunkTransition>, h: usize, gamma: f64) -> Result<Self> {
        if h == 0 {
            return Err(invalid("chunk horizon must be at least 1"));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(invalid(format!("gamma {gamma} outside (0, 1)")));
        }
        if let Some(t) = transitions
            .iter()
            .find(|t| t.chunk.horizon() != h || t.rewards.len() != h)
        {
            return Err(invalid(format!(
                "transition horizon {} != dataset horizon {h}",
                t.chunk.horizon()
            )));
        }
        Ok(Self {
            transitions,
            h,
            gamma,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn gamma_h(&self) -> f64 {
        self.gamma.powi(self.h as i32)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        for t in &self.transitions {
            serde_json::to_writer(&mut out, &TransitionRecord::from(t))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path, gamma: f64) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut transitions = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: TransitionRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            transitions.push(record.into_transition()?);
        }
        let h = transitions.first().map_or(1, |t| t.chunk.horizon());
        Self::new(transitions, h, gamma)
    }
}

/// On-disk layout: one JSON object per transition.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransitionRecord {
    state: EnvState,
    chunk: Vec<Vec<f64>>,
    mask: Vec<bool>,
    rewards: Vec<f64>,
    next_state: EnvState,
    terminal: bool,
}

impl From<&ChunkTransition> for TransitionRecord {
    fn from(t: &ChunkTransition) -> Self {
        Self {
            state: t.state.clone(),
            chunk: t.chunk.actions().to_vec(),
            mask: t.chunk.mask().to_vec(),
            rewards: t.rewards.clone(),
            next_state: t.next_state.clone(),
            terminal: t.terminal,
        }
    }
}

impl TransitionRecord {
    fn into_transition(self) -> Result<ChunkTransition> {
        Ok(ChunkTransition {
            state: self.state,
            chunk: ActionChunk::new(self.chunk, self.mask)?,
            rewards: self.rewards,
            next_state: self.next_state,
            terminal: self.terminal,
        })
    }
}

/// Slices every demo into `h`-step windows starting every `stride` steps.
/// Windows running past the end are zero-padded, masked, and marked terminal.
pub fn build_dataset(
    demos: &[Demonstration],
    labeling: &RewardLabeling,
    h: usize,
    stride: usize,
    gamma: f64,
) -> Result<OfflineDataset> {
    if h == 0 || stride == 0 {
        return Err(invalid("h and stride must be at least 1"));
    }
    let mut transitions = Vec::new();
    for demo in demos {
        if demo.states.len() != demo.actions.len() + 1 {
            return Err(invalid("demo must have exactly one more state than actions"));
        }
        if demo.is_empty() || (!demo.success && !labeling.include_failures) {
            continue;
        }
        let rewards = label_rewards(demo, labeling.window, labeling.shifted)?;
        let len = demo.len();
        for start in (0..len).step_by(stride) {
            let end = (start + h).min(len);
            let chunk = ActionChunk::padded(&demo.actions[start..end], h)?;
            let mut r = rewards[start..end].to_vec();
            r.resize(h, 0.0);
            transitions.push(ChunkTransition {
                state: demo.states[start].clone(),
                chunk,
                rewards: r,
                next_state: demo.states[end].clone(),
                terminal: start + h >= len,
            });
        }
    }
    OfflineDataset::new(transitions, h, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_demo(len: usize, success: bool) -> Demonstration {
        let states = (0..=len)
            .map(|i| EnvState {
                proprio: vec![i as f64, 0.0],
                goal: vec![len as f64, 0.0],
                step_index: i,
            })
            .collect();
        let actions = (0..len).map(|i| vec![i as f64, -(i as f64)]).collect();
        Demonstration {
            states,
            actions,
            success,
        }
    }

    #[test]
    fn shifted_labels() {
        let r = label_rewards(&line_demo(10, true), 3, true).unwrap();
        let mut expected = vec![-1.0; 7];
        expected.extend([1.0; 3]);
        assert_eq!(r, expected);

        let r = label_rewards(&line_demo(10, true), 3, false).unwrap();
        let mut expected = vec![0.0; 7];
        expected.extend([1.0; 3]);
        assert_eq!(r, expected);

        let r = label_rewards(&line_demo(10, false), 3, true).unwrap();
        assert_eq!(r, vec![-1.0; 10]);

        // clamp
        let r = label_rewards(&line_demo(2, true), 5, true).unwrap();
        assert_eq!(r, vec![1.0, 1.0]);
        assert!(label_rewards(&line_demo(2, true), 0, true).is_err());
    }

    #[test]
    fn slicing_arithmetic() {
        let labeling = RewardLabeling::default();
        let ds = build_dataset(&[line_demo(10, true)], &labeling, 4, 4, 0.9).unwrap();
        assert_eq!(ds.len(), 3);
        let valid: Vec<usize> = ds.transitions.iter().map(|t| t.chunk.valid_len()).collect();
        assert_eq!(valid, vec![4, 4, 2]);
        let terminal: Vec<bool> = ds.transitions.iter().map(|t| t.terminal).collect();
        assert_eq!(terminal, vec![false, false, true]);
        assert_eq!(ds.transitions[2].rewards, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(ds.transitions[1].next_state.step_index, 8);
        assert_eq!(ds.transitions[2].next_state.step_index, 10);
    }

    #[test]
    fn per_step_chunks() {
        let ds =
            build_dataset(&[line_demo(5, true)], &RewardLabeling::default(), 1, 1, 0.9).unwrap();
        assert_eq!(ds.len(), 5);
        assert!(ds.transitions.iter().all(|t| t.chunk.mask() == [true]));
    }

    #[test]
    fn aligned_demo_needs_no_padding() {
        let ds =
            build_dataset(&[line_demo(8, true)], &RewardLabeling::default(), 4, 4, 0.9).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.transitions.iter().all(|t| t.chunk.valid_len() == 4));
        assert!(ds.transitions[1].terminal);
    }

    #[test]
    fn failures_filtered_by_default() {
        let demos = [line_demo(6, false), line_demo(6, true)];
        let mut labeling = RewardLabeling::default();
        let ds = build_dataset(&demos, &labeling, 3, 3, 0.9).unwrap();
        assert_eq!(ds.len(), 2);
        labeling.include_failures = true;
        let ds = build_dataset(&demos, &labeling, 3, 3, 0.9).unwrap();
        assert_eq!(ds.len(), 4);
        assert!(build_dataset(&[], &labeling, 3, 3, 0.9).unwrap().is_empty());
    }

    #[test]
    fn jsonl_round_trip() {
        let ds =
            build_dataset(&[line_demo(7, true)], &RewardLabeling::default(), 3, 2, 0.98).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        ds.write_jsonl(&path).unwrap();
        let back = OfflineDataset::read_jsonl(&path, 0.98).unwrap();
        assert_eq!(back, ds);
        let first = std::fs::read_to_string(&path).unwrap();
        let keys: serde_json::Value =
            serde_json::from_str(first.lines().next().unwrap()).unwrap();
        for k in ["state", "chunk", "mask", "rewards", "next_state", "terminal"] {
            assert!(keys.get(k).is_some(), "missing {k}");
        }
    }
}
