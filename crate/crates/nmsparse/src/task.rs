//! Synthetic sequence-reversal translation task.
//!
//! Source: uniform random tokens in [3, vocab). Target: BOS + reversed
//! source + EOS. Reversal needs genuine encoder-decoder attention (unlike
//! copy) and has an exact accuracy ceiling of 1.0. Generation is a pure
//! function of the seed; train and validation splits are disjoint by
//! construction.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::HashSet;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First usable content token id.
pub const FIRST_TOKEN: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyTask {
    pub seed: u64,
    pub vocab: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub train_examples: usize,
    pub val_examples: usize,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab: 32,
            len_min: 8,
            len_max: 16,
            train_examples: 10_000,
            val_examples: 1_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Example {
    pub source: Vec<usize>,
    /// BOS + reversed source + EOS.
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

fn make_example(source: Vec<usize>) -> Example {
    let mut target = Vec::with_capacity(source.len() + 2);
    target.push(BOS);
    target.extend(source.iter().rev());
    target.push(EOS);
    Example { source, target }
}

/// Generate disjoint train/val splits, deterministic per seed.
pub fn generate_task(task: &ToyTask, max_len: usize) -> Result<Dataset> {
    if task.vocab < 4 {
        return Err(Error::Config(format!(
            "vocab must be >= 4 (PAD/BOS/EOS reserved), got {}",
            task.vocab
        )));
    }
    if task.len_min == 0 || task.len_min > task.len_max {
        return Err(Error::Config(format!(
            "invalid length range [{}, {}]",
            task.len_min, task.len_max
        )));
    }
    if task.len_max + 2 > max_len {
        return Err(Error::Config(format!(
            "len_max {} does not fit in max_len {} (target needs len+2 positions)",
            task.len_max, max_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let total = task.train_examples + task.val_examples;
    let mut examples = Vec::with_capacity(total);
    // Draw unique sources; duplicates are redrawn so the splits stay disjoint.
    while examples.len() < total {
        let len = rng.gen_range(task.len_min..=task.len_max);
        let source: Vec<usize> = (0..len)
            .map(|_| rng.gen_range(FIRST_TOKEN..task.vocab))
            .collect();
        if seen.insert(source.clone()) {
            examples.push(make_example(source));
        }
    }
    let val = examples.split_off(task.train_examples);
    Ok(Dataset {
        train: examples,
        val,
    })
}
