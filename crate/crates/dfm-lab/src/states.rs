//! The finite state space `[M]^d`, its canonical flat indexing, and the
//! integer-lattice embedding shared by the model input and the extension
//! machinery.
//!
//! Tokens are 1-based (`1..=M`) to match the external JSON format; flat
//! indices are 0-based. The codec is mixed-radix with coordinate 1 most
//! significant, so enumeration order is deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on dense state enumeration; dense `|S| x |S|` matrices stay
/// in memory at desk scale below this.
pub const DEFAULT_ENUMERATION_CAP: usize = 65_536;

/// The lattice `S = [M]^d`: `vocab_size` tokens per coordinate, `seq_len`
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpaceSpec {
    /// Vocabulary size `M >= 2`.
    #[serde(rename = "M")]
    pub vocab_size: usize,
    /// Sequence length `d >= 1`.
    #[serde(rename = "d")]
    pub seq_len: usize,
}

impl StateSpaceSpec {
    pub fn new(vocab_size: usize, seq_len: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Domain(format!(
                "vocabulary size must be >= 2, got {vocab_size}"
            )));
        }
        if seq_len < 1 {
            return Err(Error::Domain("sequence length must be >= 1".into()));
        }
        let spec = Self {
            vocab_size,
            seq_len,
        };
        // M^d must fit the platform index range.
        spec.checked_num_states()?;
        Ok(spec)
    }

    fn checked_num_states(&self) -> Result<usize> {
        let mut n: usize = 1;
        for _ in 0..self.seq_len {
            n = n.checked_mul(self.vocab_size).ok_or_else(|| {
                Error::Capacity(format!(
                    "M^d overflows the index range for M={}, d={}",
                    self.vocab_size, self.seq_len
                ))
            })?;
        }
        Ok(n)
    }

    /// Total number of states `M^d`.
    pub fn num_states(&self) -> usize {
        self.checked_num_states()
            .expect("validated at construction")
    }

    /// True if `s` has the right length and every token lies in `[1, M]`.
    pub fn contains(&self, s: &State) -> bool {
        s.tokens.len() == self.seq_len
            && s.tokens
                .iter()
                .all(|&t| t >= 1 && (t as usize) <= self.vocab_size)
    }
}

/// A point of the lattice: `seq_len` tokens, each in `[1, M]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct State {
    pub tokens: Vec<u32>,
}

impl State {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self { tokens }
    }

    /// Token at coordinate `i` (0-based coordinate, 1-based token value).
    pub fn token(&self, i: usize) -> u32 {
        self.tokens[i]
    }
}

impl From<Vec<u32>> for State {
    fn from(tokens: Vec<u32>) -> Self {
        Self { tokens }
    }
}

/// Flat index of a state under the canonical codec, in `[0, M^d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateIndex(pub usize);

/// Mixed-radix index with coordinate 1 most significant:
/// `sum_i (tokens[i] - 1) * M^(d - 1 - i)`.
pub fn index_of(space: &StateSpaceSpec, s: &State) -> Result<StateIndex> {
    if s.tokens.len() != space.seq_len {
        return Err(Error::Domain(format!(
            "state has {} tokens, space expects {}",
            s.tokens.len(),
            space.seq_len
        )));
    }
    let mut value: usize = 0;
    for &tok in &s.tokens {
        if tok < 1 || tok as usize > space.vocab_size {
            return Err(Error::Domain(format!(
                "token {tok} outside [1, {}]",
                space.vocab_size
            )));
        }
        value = value * space.vocab_size + (tok as usize - 1);
    }
    Ok(StateIndex(value))
}

/// Inverse of [`index_of`].
pub fn state_of(space: &StateSpaceSpec, idx: StateIndex) -> Result<State> {
    let n = space.num_states();
    if idx.0 >= n {
        return Err(Error::Domain(format!(
            "index {} outside [0, {n})",
            idx.0
        )));
    }
    let mut tokens = vec![0u32; space.seq_len];
    let mut rem = idx.0;
    for i in (0..space.seq_len).rev() {
        tokens[i] = (rem % space.vocab_size) as u32 + 1;
        rem /= space.vocab_size;
    }
    Ok(State::new(tokens))
}

/// All states in codec order, subject to the default enumeration cap.
pub fn all_states(space: &StateSpaceSpec) -> Result<Vec<State>> {
    all_states_capped(space, DEFAULT_ENUMERATION_CAP)
}

/// All states in codec order, with an explicit cap.
pub fn all_states_capped(space: &StateSpaceSpec, cap: usize) -> Result<Vec<State>> {
    let n = space.num_states();
    if n > cap {
        return Err(Error::Capacity(format!(
            "enumeration of {n} states exceeds cap {cap}"
        )));
    }
    (0..n).map(|i| state_of(space, StateIndex(i))).collect()
}

/// The integer-lattice embedding: coordinate `i` of the output is `tokens[i]`
/// as a real number. Distinct states land at l2 distance >= 1.
pub fn embed(s: &State) -> Vec<f64> {
    s.tokens.iter().map(|&t| t as f64).collect()
}
