use crate::error::{GlotError, Result};

/// Boolean `rows × cols` attention pattern, stored as per-row sorted column
/// lists so sparse kernels touch only allowed pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    members: Vec<Vec<usize>>,
}

impl AttentionMask {
    /// Every query sees every key.
    pub fn full(rows: usize, cols: usize) -> Self {
        let members = (0..rows).map(|_| (0..cols).collect()).collect();
        AttentionMask { rows, cols, members }
    }

    /// Lower triangle plus diagonal.
    pub fn causal(len: usize) -> Self {
        let members = (0..len).map(|r| (0..=r).collect()).collect();
        AttentionMask { rows: len, cols: len, members }
    }

    /// Builds a mask from 0-based column lists. Empty rows are allowed here;
    /// softmax rejects them.
    pub fn from_members(rows: usize, cols: usize, mut members: Vec<Vec<usize>>) -> Result<Self> {
        if members.len() != rows {
            return Err(GlotError::shape("mask", format!("{} member rows for {rows} rows", members.len())));
        }
        for row in &mut members {
            row.sort_unstable();
            row.dedup();
            if row.last().is_some_and(|&c| c >= cols) {
                return Err(GlotError::shape("mask", format!("column index out of range for width {cols}")));
            }
        }
        Ok(AttentionMask { rows, cols, members })
    }

    pub fn from_bools(allowed: &[Vec<bool>]) -> Result<Self> {
        let cols = allowed.first().map_or(0, Vec::len);
        if allowed.iter().any(|r| r.len() != cols) {
            return Err(GlotError::shape("mask", "ragged boolean rows"));
        }
        let members =
            allowed.iter().map(|r| r.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()).collect();
        Ok(AttentionMask { rows: allowed.len(), cols, members })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.members[r]
    }

    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.members[r].binary_search(&c).is_ok()
    }

    /// Number of allowed (query, key) pairs.
    pub fn count(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    pub fn to_bools(&self) -> Vec<Vec<bool>> {
        self.members
            .iter()
            .map(|m| {
                let mut row = vec![false; self.cols];
                m.iter().for_each(|&c| row[c] = true);
                row
            })
            .collect()
    }

    pub fn same_shape(&self, rows: usize, cols: usize) -> bool {
        self.rows == rows && self.cols == cols
    }
}
