use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KbseError, Result};

/// One environment step `<s, a, r, s+>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_plus: Vec<f64>,
    /// The episode terminated at `s_plus` (goal reached or failure), as
    /// opposed to being cut off by the episode length.
    #[serde(default)]
    pub terminal: bool,
}

impl Transition {
    pub fn new(s: Vec<f64>, a: Vec<f64>, r: f64, s_plus: Vec<f64>) -> Self {
        Self { s, a, r, s_plus, terminal: false }
    }

    pub fn is_finite(&self) -> bool {
        self.r.is_finite()
            && self.s.iter().chain(&self.a).chain(&self.s_plus).all(|v| v.is_finite())
    }

    /// The state-action pair concatenated into a single vector.
    pub fn state_action(&self) -> Vec<f64> {
        concat(&self.s, &self.a)
    }
}

pub(crate) fn concat(s: &[f64], a: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(s.len() + a.len());
    v.extend_from_slice(s);
    v.extend_from_slice(a);
    v
}

/// Append-only transition store.
///
/// Insertion order is preserved so the most recent window can be queried for
/// local dynamics; sampling draws uniformly from the whole history.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    transitions: Vec<Transition>,
    capacity: Option<usize>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// A buffer that drops its oldest transitions beyond `capacity`.
    pub fn with_capacity(capacity: usize) -> Self {
        Self { transitions: Vec::new(), capacity: Some(capacity.max(1)) }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        self.transitions.push(t);
        if let Some(cap) = self.capacity {
            if self.transitions.len() > cap {
                let excess = self.transitions.len() - cap;
                self.transitions.drain(..excess);
            }
        }
    }

    pub fn extend<I: IntoIterator<Item = Transition>>(&mut self, items: I) {
        for t in items {
            self.push(t);
        }
    }

    pub fn as_slice(&self) -> &[Transition] {
        &self.transitions
    }

    /// The last `min(h, len)` transitions in insertion order.
    pub fn recent(&self, h: usize) -> &[Transition] {
        let start = self.transitions.len().saturating_sub(h);
        &self.transitions[start..]
    }

    /// Uniform iid draw of `n` transitions.
    ///
    /// Without replacement while `n <= len`. Beyond that the whole buffer is
    /// returned in random order followed by `n - len` draws with replacement.
    pub fn sample_data<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
        if self.transitions.is_empty() {
            return Err(KbseError::InvalidArgument("cannot sample from an empty buffer".into()));
        }
        Ok(self
            .sample_indices(n, rng)
            .into_iter()
            .map(|i| self.transitions[i].clone())
            .collect())
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        let len = self.transitions.len();
        if len == 0 || n == 0 {
            return Vec::new();
        }
        if n <= len {
            return index::sample(rng, len, n).into_vec();
        }
        let mut idx = index::sample(rng, len, len).into_vec();
        idx.extend((0..n - len).map(|_| rng.random_range(0..len)));
        idx
    }

    /// Writes one JSON object per line. `serde_json` emits shortest
    /// round-trip float representations, so reloading is lossless.
    pub fn write_jsonl<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        for t in &self.transitions {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: Read>(reader: R) -> Result<Self> {
        let mut buffer = Self::new();
        for (lineno, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Transition = serde_json::from_str(&line).map_err(|e| KbseError::Checkpoint {
                field: format!("line {}", lineno + 1),
                reason: e.to_string(),
            })?;
            if !t.is_finite() {
                return Err(KbseError::Checkpoint {
                    field: format!("line {}", lineno + 1),
                    reason: "non-finite value".into(),
                });
            }
            buffer.push(t);
        }
        Ok(buffer)
    }
}
