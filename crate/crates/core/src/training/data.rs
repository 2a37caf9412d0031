use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Indices;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Smallest id used for content tokens.
pub const FIRST_CONTENT: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Reverse,
    Copy,
    Shift,
}

impl Task {
    /// Target sequence for a content sequence.
    pub fn apply(self, content: &[usize]) -> Vec<usize> {
        match self {
            Task::Reverse => content.iter().rev().copied().collect(),
            Task::Copy => content.to_vec(),
            Task::Shift => std::iter::once(BOS).chain(content.iter().copied()).take(content.len()).collect(),
        }
    }
}

/// One batch of equal-length sequences. Targets equal to [`PAD`] are not
/// scored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Indices,
    pub targets: Indices,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub task: Task,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub batch_size: usize,
    /// Wrap content in `BOS … EOS`; the frame positions have `PAD` targets.
    pub framed: bool,
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Invalid(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.vocab_size <= FIRST_CONTENT {
            return Err(Error::Invalid(format!(
                "vocab_size must exceed {FIRST_CONTENT} to leave room for content tokens"
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn content_tokens(&self) -> usize {
        self.vocab_size - FIRST_CONTENT
    }

    pub fn with_length(&self, n: usize) -> Self {
        Self {
            min_len: n,
            max_len: n,
            ..self.clone()
        }
    }
}

/// Endless deterministic stream of batches; each batch draws one content
/// length uniformly from the range.
pub struct BatchStream {
    spec: DataSpec,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(spec: DataSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_batch(&mut self) -> Batch {
        let s = &self.spec;
        let m = self.rng.random_range(s.min_len..=s.max_len);
        let n = if s.framed { m + 2 } else { m };
        let mut tokens = Vec::with_capacity(s.batch_size * n);
        let mut targets = Vec::with_capacity(s.batch_size * n);
        for _ in 0..s.batch_size {
            let content: Vec<usize> = (0..m).map(|_| self.rng.random_range(FIRST_CONTENT..s.vocab_size)).collect();
            let target = s.task.apply(&content);
            if s.framed {
                tokens.push(BOS);
                targets.push(PAD);
            }
            tokens.extend_from_slice(&content);
            targets.extend_from_slice(&target);
            if s.framed {
                tokens.push(EOS);
                targets.push(PAD);
            }
        }
        Batch {
            tokens: Indices::new(&[s.batch_size, n], tokens).expect("batch extents are positive"),
            targets: Indices::new(&[s.batch_size, n], targets).expect("batch extents are positive"),
        }
    }
}

pub fn make_toy_dataset(spec: &DataSpec, count: usize, seed: u64) -> Result<Vec<Batch>> {
    let mut stream = BatchStream::new(spec.clone(), seed)?;
    Ok((0..count).map(|_| stream.next_batch()).collect())
}

/// Expected accuracy of the best predictor that cannot tell positions apart
/// (a permutation-equivariant model sees each token and the bag of all
/// tokens, nothing else), averaged uniformly over content lengths.
///
/// For reversal with distinct tokens, the partner of a position is equally
/// likely to be any of the other `m − 1` positions, or the position itself
/// when `m` is odd; that gives `1/(m−1)` for even `m` and `1/m` for odd `m`.
/// A wrong guess still scores when it collides with the target by value,
/// which adds `(1 − p)/C` for `C` content tokens. Copy is fully solvable
/// without positions. For shift, the target of a position is the token of
/// one of the other positions (or `BOS`), each equally likely.
pub fn chance_accuracy(task: Task, min_len: usize, max_len: usize, vocab_size: usize) -> f64 {
    let c = (vocab_size - FIRST_CONTENT) as f64;
    let per_len = |m: usize| -> f64 {
        let mf = m as f64;
        let p = match task {
            Task::Copy => return 1.0,
            Task::Reverse if m == 1 => return 1.0,
            Task::Reverse if m.is_multiple_of(2) => 1.0 / (mf - 1.0),
            Task::Reverse => 1.0 / mf,
            Task::Shift => 1.0 / mf,
        };
        p + (1.0 - p) / c
    };
    let total: f64 = (min_len..=max_len).map(per_len).sum();
    total / (max_len - min_len + 1) as f64
}

/// `1/C`: a guess drawn uniformly from the content tokens.
pub fn uniform_chance(vocab_size: usize) -> f64 {
    1.0 / (vocab_size - FIRST_CONTENT) as f64
}
