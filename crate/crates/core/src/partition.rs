//! Block-sequence train/val/test splitting and sliding-window slicing.
//!
//! Frames are grouped into block sequences of 6 consecutive blocks of `k`
//! frames. Within each block sequence, 4 blocks are randomly assigned to
//! training, 1 to validation and 1 to test. Windows of `s_in + s_out`
//! consecutive frames never cross a block boundary, so the splits share no
//! frame. Trailing frames that do not fill a whole block sequence are
//! discarded.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BLOCKS_PER_SEQUENCE: usize = 6;
pub const DEFAULT_BLOCK_SIZE: usize = 47;
pub const DEFAULT_IN_FRAMES: usize = 6;
pub const DEFAULT_OUT_FRAMES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitId {
    Train,
    Val,
    Test,
}

impl SplitId {
    pub const ALL: [SplitId; 3] = [SplitId::Train, SplitId::Val, SplitId::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitId::Train => "train",
            SplitId::Val => "val",
            SplitId::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitId::Train),
            "val" => Ok(SplitId::Val),
            "test" => Ok(SplitId::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Per block sequence: which of the 6 blocks belong to which split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockAssignment {
    /// 4 block offsets (0..6) within the sequence.
    pub train: [usize; 4],
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Frames per block.
    pub block_size: usize,
    pub seed: u64,
    pub total_frames: usize,
    /// Frames at the tail that do not fill a complete block sequence.
    pub discarded_frames: usize,
    pub assignments: Vec<BlockAssignment>,
}

impl SplitPlan {
    pub fn n_sequences(&self) -> usize {
        self.assignments.len()
    }

    /// Global block ids (each covering `block_size` frames) of one split.
    pub fn blocks(&self, split: SplitId) -> Vec<usize> {
        let mut out = Vec::new();
        for (s, a) in self.assignments.iter().enumerate() {
            let base = s * BLOCKS_PER_SEQUENCE;
            match split {
                SplitId::Train => out.extend(a.train.iter().map(|b| base + b)),
                SplitId::Val => out.push(base + a.val),
                SplitId::Test => out.push(base + a.test),
            }
        }
        out
    }

    /// Frame indices covered by one split.
    pub fn frame_indices(&self, split: SplitId) -> Vec<usize> {
        let mut out = Vec::new();
        for b in self.blocks(split) {
            let start = b * self.block_size;
            out.extend(start..start + self.block_size);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for a in &self.assignments {
            let mut seen = [false; BLOCKS_PER_SEQUENCE];
            for b in a.train.iter().copied().chain([a.val, a.test]) {
                if b >= BLOCKS_PER_SEQUENCE || seen[b] {
                    return Err(Error::Data("block assignment is not a permutation".into()));
                }
                seen[b] = true;
            }
        }
        Ok(())
    }
}

/// One model sample: `s_in` input frames followed by `s_out` target frames,
/// all consecutive and inside one block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSample {
    pub input_frames: Vec<usize>,
    pub target_frames: Vec<usize>,
    pub block_id: usize,
}

/// Builds the random block assignment for `total_frames` frames.
pub fn build_split(total_frames: usize, block_size: usize, seed: u64) -> Result<SplitPlan> {
    if block_size == 0 {
        return Err(Error::Config("block size must be > 0".into()));
    }
    let seq_len = BLOCKS_PER_SEQUENCE * block_size;
    if total_frames < seq_len {
        return Err(Error::Config(format!(
            "need at least {seq_len} frames for one block sequence, got {total_frames}"
        )));
    }
    let n_sequences = total_frames / seq_len;
    let discarded = total_frames - n_sequences * seq_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assignments = (0..n_sequences)
        .map(|_| {
            let mut perm: Vec<usize> = (0..BLOCKS_PER_SEQUENCE).collect();
            perm.shuffle(&mut rng);
            BlockAssignment {
                train: [perm[0], perm[1], perm[2], perm[3]],
                val: perm[4],
                test: perm[5],
            }
        })
        .collect();
    Ok(SplitPlan {
        block_size,
        seed,
        total_frames,
        discarded_frames: discarded,
        assignments,
    })
}

/// Stride-`stride` windows of `s_in + s_out` frames entirely inside each block
/// of the split.
pub fn enumerate_windows(
    plan: &SplitPlan,
    split: SplitId,
    s_in: usize,
    s_out: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    plan.validate()?;
    let s = s_in + s_out;
    if s == 0 || stride == 0 {
        return Err(Error::Config("window size and stride must be > 0".into()));
    }
    let mut out = Vec::new();
    for block in plan.blocks(split) {
        if plan.block_size < s {
            continue;
        }
        let start = block * plan.block_size;
        let mut offset = 0;
        while offset + s <= plan.block_size {
            let w0 = start + offset;
            out.push(WindowSample {
                input_frames: (w0..w0 + s_in).collect(),
                target_frames: (w0 + s_in..w0 + s).collect(),
                block_id: block,
            });
            offset += stride;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn paper_frame_count_yields_72_sequences() {
        let plan = build_split(20352, 47, 1).unwrap();
        assert_eq!(plan.n_sequences(), 72);
        assert_eq!(plan.discarded_frames, 48);
    }

    #[test]
    fn exactly_one_sequence() {
        let plan = build_split(282, 47, 1).unwrap();
        assert_eq!(plan.n_sequences(), 1);
        assert_eq!(plan.discarded_frames, 0);
    }

    #[test]
    fn too_few_frames_errors() {
        assert!(build_split(281, 47, 1).is_err());
    }

    #[test]
    fn windows_per_block() {
        let plan = build_split(282, 47, 3).unwrap();
        let w = enumerate_windows(&plan, SplitId::Val, 6, 6, 1).unwrap();
        assert_eq!(w.len(), 47 - 12 + 1);
    }

    #[test]
    fn single_window_when_block_equals_window() {
        let plan = build_split(72, 12, 0).unwrap();
        let w = enumerate_windows(&plan, SplitId::Test, 6, 6, 1).unwrap();
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn splits_share_no_frames() {
        let plan = build_split(2 * 282, 47, 9).unwrap();
        let frames = |s| {
            enumerate_windows(&plan, s, 6, 6, 1)
                .unwrap()
                .iter()
                .flat_map(|w| w.input_frames.iter().chain(&w.target_frames).copied())
                .collect::<HashSet<usize>>()
        };
        let train = frames(SplitId::Train);
        let val = frames(SplitId::Val);
        let test = frames(SplitId::Test);
        assert!(train.is_disjoint(&val));
        assert!(train.is_disjoint(&test));
        assert!(val.is_disjoint(&test));
    }

    #[test]
    fn window_counts_per_split() {
        let n_seq = 3;
        let plan = build_split(n_seq * 282, 47, 4).unwrap();
        let per_block = 47 - 12 + 1;
        assert_eq!(
            enumerate_windows(&plan, SplitId::Train, 6, 6, 1).unwrap().len(),
            4 * per_block * n_seq
        );
        assert_eq!(
            enumerate_windows(&plan, SplitId::Val, 6, 6, 1).unwrap().len(),
            per_block * n_seq
        );
    }

    #[test]
    fn same_seed_reproducible_different_seed_differs() {
        let a = build_split(20352, 47, 42).unwrap();
        let b = build_split(20352, 47, 42).unwrap();
        assert_eq!(a, b);
        let c = build_split(20352, 47, 43).unwrap();
        assert_ne!(a.assignments, c.assignments);
    }

    #[test]
    fn plan_round_trips_through_json() {
        let a = build_split(282, 47, 5).unwrap();
        let text = serde_json::to_string(&a).unwrap();
        let b: SplitPlan = serde_json::from_str(&text).unwrap();
        assert_eq!(a, b);
    }
}
