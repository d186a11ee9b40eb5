//! Per-time-step invocation graph and its symmetric-normalized adjacency.
//!
//! Nodes 0..n are users, nodes n..n+m are services. Edges exist only for
//! train-observed invocations at the given time step; test entries never
//! contribute (that would leak the evaluation targets into the features).

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{QosTensor, SplitAssignment};
use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::scalar::Scalar;

/// Bipartite invocation graph at one time step, stored as unique sorted
/// (user, service) pairs. The full adjacency is their symmetric closure.
#[derive(Debug, Clone, PartialEq)]
pub struct Qig {
    pub t: u32,
    pub n: u32,
    pub m: u32,
    edges: Vec<(u32, u32)>,
}

impl Qig {
    pub fn from_pairs(n: u32, m: u32, t: u32, mut pairs: Vec<(u32, u32)>) -> Result<Self> {
        for &(i, j) in &pairs {
            if i >= n || j >= m {
                return Err(Error::IndexOutOfRange(format!(
                    "edge ({i},{j}) outside {n} users x {m} services"
                )));
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        Ok(Qig { t, n, m, edges: pairs })
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    /// Non-zero count of the symmetric adjacency (no self loops here).
    pub fn adjacency_entry_count(&self) -> usize {
        2 * self.edges.len()
    }

    pub fn size(&self) -> usize {
        (self.n + self.m) as usize
    }
}

/// Builds the invocation graph at time `t` from the training side of a
/// split: edge (i, n+j) iff (i,j,t) is a train triple.
pub fn build_qig<S: Scalar>(
    tensor: &QosTensor<S>,
    split: &SplitAssignment,
    t: u32,
) -> Result<Qig> {
    if t >= tensor.t_len() {
        return Err(Error::IndexOutOfRange(format!(
            "time step {t} outside 0..{}",
            tensor.t_len()
        )));
    }
    let pairs = split
        .train
        .iter()
        .filter(|&&(_, _, tt)| tt == t)
        .map(|&(i, j, _)| (i, j))
        .collect();
    Qig::from_pairs(tensor.n(), tensor.m(), t, pairs)
}

/// `D^(-1/2) (A + I) D^(-1/2)` with `d_ii = 1 + degree(i)`, stored as sorted
/// COO plus a row index for sparse-dense products.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency<S> {
    pub t: u32,
    size: usize,
    /// (row, col, weight), sorted by (row, col). Contains every diagonal
    /// entry and both orientations of every edge.
    entries: Vec<(u32, u32, S)>,
    /// entries index where each row starts; len = size + 1
    row_ptr: Vec<usize>,
}

pub fn normalize_adjacency<S: Scalar>(qig: &Qig) -> NormalizedAdjacency<S> {
    let size = qig.size();
    let n = qig.n as usize;
    let mut degree = vec![1u32; size];
    for &(i, j) in qig.edges() {
        degree[i as usize] += 1;
        degree[n + j as usize] += 1;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|&d| 1.0 / (d as f64).sqrt()).collect();
    let mut entries: Vec<(u32, u32, S)> = Vec::with_capacity(size + 2 * qig.edges().len());
    for k in 0..size {
        entries.push((k as u32, k as u32, S::cast(1.0 / degree[k] as f64)));
    }
    for &(i, j) in qig.edges() {
        let (a, b) = (i as usize, n + j as usize);
        let w = S::cast(inv_sqrt[a] * inv_sqrt[b]);
        entries.push((a as u32, b as u32, w));
        entries.push((b as u32, a as u32, w));
    }
    entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
    let mut row_ptr = vec![0usize; size + 1];
    for &(r, _, _) in &entries {
        row_ptr[r as usize + 1] += 1;
    }
    for k in 0..size {
        row_ptr[k + 1] += row_ptr[k];
    }
    NormalizedAdjacency {
        t: qig.t,
        size,
        entries,
        row_ptr,
    }
}

impl<S: Scalar> NormalizedAdjacency<S> {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn entries(&self) -> &[(u32, u32, S)] {
        &self.entries
    }

    pub fn get(&self, r: u32, c: u32) -> S {
        let lo = self.row_ptr[r as usize];
        let hi = self.row_ptr[r as usize + 1];
        match self.entries[lo..hi].binary_search_by_key(&c, |&(_, cc, _)| cc) {
            Ok(pos) => self.entries[lo + pos].2,
            Err(_) => S::zero(),
        }
    }

    /// Sparse * dense product. Each output row accumulates its terms in
    /// column-sorted order, so the parallel version is bit-identical to the
    /// serial one.
    pub fn spmm(&self, dense: &Matrix<S>) -> Result<Matrix<S>> {
        if dense.rows() != self.size {
            return Err(Error::dims(
                "spmm",
                format!("adjacency {}x{} vs dense {:?}", self.size, self.size, dense.shape()),
            ));
        }
        let cols = dense.cols();
        let mut out = Matrix::zeros(self.size, cols);
        out.data_mut()
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(r, out_row)| {
                for &(_, c, w) in &self.entries[self.row_ptr[r]..self.row_ptr[r + 1]] {
                    let src = dense.row(c as usize);
                    for (o, &x) in out_row.iter_mut().zip(src) {
                        *o += w * x;
                    }
                }
            });
        Ok(out)
    }

    pub fn to_dense(&self) -> Matrix<S> {
        let mut d = Matrix::zeros(self.size, self.size);
        for &(r, c, w) in &self.entries {
            d.set(r as usize, c as usize, w);
        }
        d
    }

    /// Debug dump as "row col weight" lines.
    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for &(r, c, w) in &self.entries {
            writeln!(f, "{r} {c} {w}")?;
        }
        Ok(())
    }
}
