//! Block-sparse attention masks and shared position ids for sequences that
//! pack one observation with several independent branches.
//!
//! Layout: `[obs tokens | branch 0 | branch 1 | ...]`. Observation tokens see
//! only observation tokens; a branch token sees the observation and its own
//! branch. Every branch is positioned as if it directly followed the
//! observation, so each branch is computed exactly as in an unpacked sequence.

use std::rc::Rc;

use crate::NnError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSparseMask {
    len: usize,
    allowed: Vec<bool>,
}

impl BlockSparseMask {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.len + key]
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn to_shared(&self) -> Rc<[bool]> {
        self.allowed.clone().into()
    }

    /// All-true mask of size `len`.
    pub fn full(len: usize) -> Self {
        Self { len, allowed: vec![true; len * len] }
    }
}

fn check_lens(obs_len: usize, branch_lens: &[usize]) -> Result<(), NnError> {
    if obs_len == 0 {
        return Err(NnError::Shape("observation block must have at least one token".into()));
    }
    if branch_lens.contains(&0) {
        return Err(NnError::Shape("every branch needs at least one token".into()));
    }
    Ok(())
}

pub fn build_block_sparse_mask(
    obs_len: usize,
    branch_lens: &[usize],
) -> Result<BlockSparseMask, NnError> {
    check_lens(obs_len, branch_lens)?;
    let len = obs_len + branch_lens.iter().sum::<usize>();
    let mut allowed = vec![false; len * len];
    for q in 0..obs_len {
        allowed[q * len..q * len + obs_len].fill(true);
    }
    let mut start = obs_len;
    for &bl in branch_lens {
        for q in start..start + bl {
            let row = &mut allowed[q * len..(q + 1) * len];
            row[..obs_len].fill(true);
            row[start..start + bl].fill(true);
        }
        start += bl;
    }
    Ok(BlockSparseMask { len, allowed })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionIds(pub Vec<usize>);

impl PositionIds {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

pub fn assign_positions(obs_len: usize, branch_lens: &[usize]) -> Result<PositionIds, NnError> {
    check_lens(obs_len, branch_lens)?;
    let mut ids: Vec<usize> = (0..obs_len).collect();
    for &bl in branch_lens {
        ids.extend(obs_len..obs_len + bl);
    }
    Ok(PositionIds(ids))
}

/// Tokens per optimizer step when `branches` offsets share one observation,
/// versus encoding each offset as its own sequence: `(packed, separate)`.
pub fn packed_token_counts(obs_len: usize, branch_len: usize, branches: usize) -> (usize, usize) {
    (obs_len + branches * branch_len, branches * (obs_len + branch_len))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_branch_entries_are_masked() {
        let m = build_block_sparse_mask(2, &[2, 2]).unwrap();
        for i in 2..4 {
            for j in 4..6 {
                assert!(!m.allows(i, j) && !m.allows(j, i));
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                assert!(m.allows(i, j));
            }
        }
    }

    #[test]
    fn obs_rows_do_not_see_branches() {
        let m = build_block_sparse_mask(3, &[2]).unwrap();
        for q in 0..3 {
            assert!(!m.allows(q, 3) && !m.allows(q, 4));
        }
    }

    #[test]
    fn allowed_count_matches_enumeration() {
        // Hand count: obs block 4*4, each branch row sees 4 obs + 3 own.
        let m = build_block_sparse_mask(4, &[3, 3]).unwrap();
        assert_eq!(m.len(), 10);
        assert_eq!(m.allowed_count(), 58);
    }

    #[test]
    fn no_branches_gives_full_obs_block() {
        let m = build_block_sparse_mask(3, &[]).unwrap();
        assert_eq!(m, BlockSparseMask::full(3));
        assert_eq!(assign_positions(3, &[]).unwrap().0, vec![0, 1, 2]);
    }

    #[test]
    fn branches_share_positions() {
        assert_eq!(assign_positions(4, &[3, 3]).unwrap().0, vec![0, 1, 2, 3, 4, 5, 6, 4, 5, 6]);
        let big = assign_positions(700, &[50, 50, 50]).unwrap();
        for b in 0..3 {
            let branch = &big.0[700 + 50 * b..700 + 50 * (b + 1)];
            assert_eq!(branch, (700..750).collect::<Vec<_>>().as_slice());
        }
    }

    #[test]
    fn zero_length_blocks_rejected() {
        assert!(build_block_sparse_mask(0, &[1]).is_err());
        assert!(build_block_sparse_mask(1, &[2, 0]).is_err());
        assert!(assign_positions(0, &[]).is_err());
    }

    #[test]
    fn packed_counts_at_reference_dims() {
        assert_eq!(packed_token_counts(700, 50, 5), (950, 3750));
    }
}
