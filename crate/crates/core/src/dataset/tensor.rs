use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sparse `n x m x T` QoS tensor. An absent entry means "invalid invocation";
/// zero and negative values are never stored, so presence alone encodes
/// validity.
///
/// Entries are kept sorted by `(t, i, j)` so a whole time step is a
/// contiguous run, which is the access pattern of every downstream consumer.
#[derive(Debug, Clone, PartialEq)]
pub struct QosTensor<S> {
    n: u32,
    m: u32,
    t_len: u32,
    /// (user, service, time, value), sorted by (time, user, service), unique.
    entries: Vec<(u32, u32, u32, S)>,
}

/// Location/scale statistics over the observed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSummary {
    pub count: usize,
    pub density: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

fn sort_key<S>(e: &(u32, u32, u32, S)) -> (u32, u32, u32) {
    (e.2, e.0, e.1)
}

impl<S: Scalar> QosTensor<S> {
    pub fn new(n: u32, m: u32, t_len: u32) -> Self {
        QosTensor {
            n,
            m,
            t_len,
            entries: Vec::new(),
        }
    }

    /// Builds a tensor from `(user, service, time, value)` tuples. Indices
    /// must be in range and values strictly positive and finite. Duplicate
    /// triples resolve to the last occurrence in input order.
    pub fn from_entries(
        n: u32,
        m: u32,
        t_len: u32,
        entries: Vec<(u32, u32, u32, S)>,
    ) -> Result<Self> {
        for &(i, j, t, v) in &entries {
            check_entry(n, m, t_len, i, j, t, v)?;
        }
        let mut indexed: Vec<(usize, (u32, u32, u32, S))> = entries.into_iter().enumerate().collect();
        // stable sort by key keeps input order within a duplicate group; the
        // later index wins below
        indexed.sort_by_key(|(_, e)| sort_key(e));
        let mut out: Vec<(u32, u32, u32, S)> = Vec::with_capacity(indexed.len());
        let mut out_pos: Vec<usize> = Vec::with_capacity(indexed.len());
        for (pos, e) in indexed {
            if let Some(last) = out.last_mut() {
                if sort_key(last) == sort_key(&e) {
                    if pos > *out_pos.last().unwrap() {
                        *last = e;
                        *out_pos.last_mut().unwrap() = pos;
                    }
                    continue;
                }
            }
            out.push(e);
            out_pos.push(pos);
        }
        Ok(QosTensor {
            n,
            m,
            t_len,
            entries: out,
        })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn t_len(&self) -> u32 {
        self.t_len
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All entries as `(user, service, time, value)`, sorted by (time, user,
    /// service).
    pub fn entries(&self) -> &[(u32, u32, u32, S)] {
        &self.entries
    }

    /// Inserts or replaces a single entry.
    pub fn insert(&mut self, i: u32, j: u32, t: u32, v: S) -> Result<()> {
        check_entry(self.n, self.m, self.t_len, i, j, t, v)?;
        let key = (t, i, j);
        match self.entries.binary_search_by_key(&key, sort_key) {
            Ok(pos) => self.entries[pos].3 = v,
            Err(pos) => self.entries.insert(pos, (i, j, t, v)),
        }
        Ok(())
    }

    pub fn get(&self, i: u32, j: u32, t: u32) -> Option<S> {
        self.entries
            .binary_search_by_key(&(t, i, j), sort_key)
            .ok()
            .map(|pos| self.entries[pos].3)
    }

    /// The contiguous run of entries at time step `t`.
    pub fn slice(&self, t: u32) -> &[(u32, u32, u32, S)] {
        let lo = self.entries.partition_point(|e| e.2 < t);
        let hi = self.entries.partition_point(|e| e.2 <= t);
        &self.entries[lo..hi]
    }

    /// Removes the given `(user, service, time)` triples; returns how many
    /// were actually present.
    pub fn remove_triples(&mut self, triples: &[(u32, u32, u32)]) -> usize {
        let mut keys: Vec<(u32, u32, u32)> = triples.iter().map(|&(i, j, t)| (t, i, j)).collect();
        keys.sort_unstable();
        keys.dedup();
        let before = self.entries.len();
        self.entries
            .retain(|e| keys.binary_search(&sort_key(e)).is_err());
        before - self.entries.len()
    }

    /// Keeps only the given triples (e.g. a training split).
    pub fn restrict_to(&self, triples: &[(u32, u32, u32)]) -> Self {
        let mut keys: Vec<(u32, u32, u32)> = triples.iter().map(|&(i, j, t)| (t, i, j)).collect();
        keys.sort_unstable();
        keys.dedup();
        let entries = self
            .entries
            .iter()
            .filter(|e| keys.binary_search(&sort_key(e)).is_ok())
            .copied()
            .collect();
        QosTensor {
            n: self.n,
            m: self.m,
            t_len: self.t_len,
            entries,
        }
    }

    pub fn summarize(&self) -> Result<TensorSummary> {
        if self.entries.is_empty() {
            return Err(Error::EmptyInput("summarize"));
        }
        let mut vals: Vec<f64> = self.entries.iter().map(|e| e.3.as_f64()).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let count = vals.len();
        let mean = vals.iter().sum::<f64>() / count as f64;
        let median = if count % 2 == 1 {
            vals[count / 2]
        } else {
            0.5 * (vals[count / 2 - 1] + vals[count / 2])
        };
        // population variance: the summary describes the data at hand, not a
        // sample of something larger
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
        let cells = self.n as f64 * self.m as f64 * self.t_len as f64;
        Ok(TensorSummary {
            count,
            density: if cells > 0.0 { count as f64 / cells } else { 0.0 },
            min: vals[0],
            max: vals[count - 1],
            mean,
            median,
            std: var.sqrt(),
        })
    }
}

fn check_entry<S: Scalar>(n: u32, m: u32, t_len: u32, i: u32, j: u32, t: u32, v: S) -> Result<()> {
    if i >= n || j >= m || t >= t_len {
        return Err(Error::IndexOutOfRange(format!(
            "entry ({i},{j},{t}) outside {n}x{m}x{t_len}"
        )));
    }
    if !(v.is_finite() && v > S::zero()) {
        return Err(Error::invalid("value", "must be finite and > 0"));
    }
    Ok(())
}
