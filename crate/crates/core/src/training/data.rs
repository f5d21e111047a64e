//! Synthetic sequence tasks over a 64-symbol vocabulary.
//!
//! A sequence is `task marker, payload, separator, answer`. The marker tells the
//! model which transformation to apply, so the same payload can appear under
//! both tasks without contradicting itself.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::TokenBatch;

pub const PAD: u32 = 0;
pub const SEP: u32 = 1;
pub const FIRST_SYMBOL: u32 = 4;
pub const VOCAB: usize = 64;
pub const PAYLOAD_LEN: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CopyReverse,
    Sort,
}

impl TaskKind {
    pub fn marker(self) -> u32 {
        match self {
            TaskKind::CopyReverse => 2,
            TaskKind::Sort => 3,
        }
    }

    pub fn answer(self, payload: &[u32]) -> Vec<u32> {
        let mut out = payload.to_vec();
        match self {
            TaskKind::CopyReverse => out.reverse(),
            TaskKind::Sort => out.sort_unstable(),
        }
        out
    }

    fn tag(self) -> u64 {
        self.marker() as u64
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::CopyReverse => "copy_reverse",
            TaskKind::Sort => "sort",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy_reverse" => Ok(TaskKind::CopyReverse),
            "sort" => Ok(TaskKind::Sort),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

impl Split {
    /// Index ranges are disjoint: train below 2^62, validation and test above.
    fn base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Validation => 1 << 62,
            Split::Test => (1 << 62) + (1 << 40),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    /// Marker, payload and separator.
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
}

impl Example {
    pub fn sequence(&self) -> Vec<u32> {
        [self.prompt.as_slice(), self.answer.as_slice()].concat()
    }
}

/// Pure generator of task examples keyed by `(seed, split, index)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub payload_len: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        TaskSpec {
            kind,
            payload_len: PAYLOAD_LEN,
            seed,
        }
    }

    /// Prompt plus answer.
    pub fn seq_len(&self) -> usize {
        2 * self.payload_len + 2
    }

    pub fn example(&self, split: Split, index: u64) -> Example {
        let key = split.base().wrapping_add(index);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed ^ mix(key) ^ self.kind.tag().rotate_left(56)));
        let payload: Vec<u32> = (0..self.payload_len)
            .map(|_| rng.gen_range(FIRST_SYMBOL..VOCAB as u32))
            .collect();
        let mut prompt = Vec::with_capacity(self.payload_len + 2);
        prompt.push(self.kind.marker());
        prompt.extend_from_slice(&payload);
        prompt.push(SEP);
        Example {
            answer: self.kind.answer(&payload),
            prompt,
        }
    }

    pub fn examples(&self, split: Split, start: u64, n: usize) -> Vec<Example> {
        (0..n as u64).map(|i| self.example(split, start + i)).collect()
    }
}

/// splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Next-token training batch with the loss restricted to answer tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct LmBatch {
    /// Every sequence without its last token.
    pub inputs: TokenBatch,
    /// The following token at each input position.
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

pub fn lm_batch(examples: &[Example]) -> Result<LmBatch> {
    let seqs: Vec<Vec<u32>> = examples.iter().map(Example::sequence).collect();
    let len = seqs.first().map_or(0, Vec::len);
    if len < 2 || seqs.iter().any(|s| s.len() != len) {
        return Err(Error::InvalidTensor("examples must share a length of at least 2".into()));
    }
    let prompt_len = examples[0].prompt.len();
    let mut inputs = Vec::with_capacity(seqs.len() * (len - 1));
    let mut targets = Vec::with_capacity(inputs.capacity());
    let mut mask = Vec::with_capacity(inputs.capacity());
    for s in &seqs {
        inputs.extend_from_slice(&s[..len - 1]);
        for t in 1..len {
            targets.push(s[t] as usize);
            mask.push(t >= prompt_len && s[t] != PAD);
        }
    }
    Ok(LmBatch {
        inputs: TokenBatch::new(seqs.len(), len - 1, inputs)?,
        targets,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answers_follow_task_rules() {
        assert_eq!(TaskKind::CopyReverse.answer(&[5, 9, 7]), vec![7, 9, 5]);
        assert_eq!(TaskKind::Sort.answer(&[5, 9, 7, 5]), vec![5, 5, 7, 9]);
        let task = TaskSpec::new(TaskKind::Sort, 11);
        let ex = task.example(Split::Train, 3);
        assert_eq!(ex.prompt.len(), 14);
        assert_eq!(ex.prompt[0], 3);
        assert_eq!(ex.prompt[13], SEP);
        assert!(ex.prompt[1..13].iter().all(|&t| (FIRST_SYMBOL..64).contains(&t)));
        assert_eq!(ex.answer, TaskKind::Sort.answer(&ex.prompt[1..13]));
        assert_eq!(ex.sequence().len(), task.seq_len());
    }

    #[test]
    fn generator_is_pure_and_splits_differ() {
        let task = TaskSpec::new(TaskKind::CopyReverse, 1);
        assert_eq!(task.example(Split::Validation, 7), task.example(Split::Validation, 7));
        assert_ne!(task.example(Split::Train, 7), task.example(Split::Validation, 7));
        assert_ne!(task.example(Split::Test, 7), task.example(Split::Validation, 7));
        assert_ne!(task.example(Split::Train, 7), task.example(Split::Train, 8));
        let other = TaskSpec::new(TaskKind::CopyReverse, 2);
        assert_ne!(task.example(Split::Train, 7), other.example(Split::Train, 7));
    }

    #[test]
    fn loss_mask_covers_answer_only() {
        let task = TaskSpec::new(TaskKind::CopyReverse, 0);
        let ex = task.examples(Split::Train, 0, 2);
        let b = lm_batch(&ex).unwrap();
        assert_eq!((b.inputs.batch, b.inputs.seq), (2, 25));
        let row: Vec<bool> = b.mask[..25].to_vec();
        assert_eq!(row.iter().filter(|&&m| m).count(), 12);
        assert!(row[13..].iter().all(|&m| m));
        assert_eq!(b.targets[13], ex[0].answer[0] as usize);
    }
}
