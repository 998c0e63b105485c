//! Compressed variable-length index lists.

use crate::error::{GmnnError, Result};

/// Row `i` owns `indices[offsets[i]..offsets[i + 1]]`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Segments {
    offsets: Vec<usize>,
    indices: Vec<u32>,
}

impl Segments {
    pub fn new(offsets: Vec<usize>, indices: Vec<u32>) -> Result<Self> {
        let ok = offsets.first() == Some(&0)
            && offsets.last() == Some(&indices.len())
            && offsets.windows(2).all(|w| w[0] <= w[1]);
        if !ok {
            return Err(GmnnError::shape("malformed segment offsets"));
        }
        Ok(Segments { offsets, indices })
    }

    /// Rows of equal length `row_len`.
    pub fn uniform(indices: Vec<u32>, row_len: usize, rows: usize) -> Self {
        debug_assert_eq!(indices.len(), row_len * rows);
        Segments {
            offsets: (0..=rows).map(|r| r * row_len).collect(),
            indices,
        }
    }

    pub fn from_rows<R: AsRef<[u32]>>(rows: &[R]) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for r in rows {
            indices.extend_from_slice(r.as_ref());
            offsets.push(indices.len());
        }
        Segments { offsets, indices }
    }

    pub fn rows(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// Row id of every stored entry.
    pub fn row_ids(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.nnz());
        for i in 0..self.rows() {
            out.extend(std::iter::repeat_n(i as u32, self.offsets[i + 1] - self.offsets[i]));
        }
        out
    }

    pub fn max_index(&self) -> Option<u32> {
        self.indices.iter().copied().max()
    }

    /// `out[j] = { i : j ∈ row(i) }`, each list ascending.
    pub fn transpose(&self, domain_size: usize) -> Result<Segments> {
        let mut counts = vec![0usize; domain_size + 1];
        for &j in &self.indices {
            let j = j as usize;
            if j >= domain_size {
                return Err(GmnnError::Index {
                    index: j,
                    len: domain_size,
                });
            }
            counts[j + 1] += 1;
        }
        for j in 0..domain_size {
            counts[j + 1] += counts[j];
        }
        let offsets = counts.clone();
        let mut cursor = counts;
        let mut indices = vec![0u32; self.nnz()];
        for i in 0..self.rows() {
            for &j in self.row(i) {
                let slot = &mut cursor[j as usize];
                indices[*slot] = i as u32;
                *slot += 1;
            }
        }
        Ok(Segments { offsets, indices })
    }

    /// Concatenates row blocks; indices of block `b` are shifted by
    /// `index_offsets[b]`.
    pub fn concat(parts: &[&Segments], index_offsets: &[u32]) -> Segments {
        let mut offsets = vec![0usize];
        let mut indices = Vec::new();
        for (seg, &shift) in parts.iter().zip(index_offsets) {
            let base = indices.len();
            indices.extend(seg.indices.iter().map(|&j| j + shift));
            offsets.extend(seg.offsets[1..].iter().map(|&o| o + base));
        }
        Segments { offsets, indices }
    }
}
