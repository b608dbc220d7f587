//! Row-to-group assignments for segment (group-wise) operations.

use crate::error::{Error, Result};

/// Maps each row of an operand matrix to a group id. Segment softmax, sum
/// and mean normalize or reduce within each group independently.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentIndex {
    groups: Vec<usize>,
    num_groups: usize,
}

impl SegmentIndex {
    pub fn new(groups: Vec<usize>, num_groups: usize) -> Result<Self> {
        if let Some(&bad) = groups.iter().find(|&&g| g >= num_groups) {
            return Err(Error::Index {
                index: bad,
                len: num_groups,
            });
        }
        Ok(SegmentIndex { groups, num_groups })
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Number of rows assigned to each group.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_groups];
        for &g in &self.groups {
            counts[g] += 1;
        }
        counts
    }

    /// Index of the first group with no members, if any.
    pub fn first_empty_group(&self) -> Option<usize> {
        self.counts().iter().position(|&c| c == 0)
    }
}
