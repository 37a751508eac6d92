//! Joint trees: positions plus parent links.

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Validates that `parents` is a single tree rooted at joint 0 and returns
/// the joints in pre-order (every parent before its children; siblings in
/// index order).
pub fn tree_order(parents: &[Option<usize>]) -> Result<Vec<usize>> {
    let k = parents.len();
    if k == 0 {
        return Err(Error::invalid("joint tree is empty"));
    }
    if parents[0].is_some() {
        return Err(Error::invalid("joint 0 must be the root"));
    }
    let mut children = vec![Vec::new(); k];
    for (j, p) in parents.iter().enumerate().skip(1) {
        match p {
            None => return Err(Error::invalid(format!("joint {j} has no parent; only joint 0 may be a root"))),
            Some(p) if *p >= k => {
                return Err(Error::invalid(format!("joint {j} has parent {p} outside 0..{k}")))
            }
            Some(p) => children[*p].push(j),
        }
    }
    let mut order = Vec::with_capacity(k);
    let mut stack = vec![0usize];
    while let Some(j) = stack.pop() {
        order.push(j);
        stack.extend(children[j].iter().rev());
    }
    if order.len() != k {
        return Err(Error::invalid("joint parents contain a cycle unreachable from the root"));
    }
    Ok(order)
}

/// Joint positions with their kinematic tree.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    joints: Vec<Vec3>,
    parents: Vec<Option<usize>>,
    order: Vec<usize>,
}

impl Skeleton {
    pub fn new(joints: Vec<Vec3>, parents: Vec<Option<usize>>) -> Result<Self> {
        if joints.len() != parents.len() {
            return Err(Error::dim(format!(
                "{} joints but {} parent entries",
                joints.len(),
                parents.len()
            )));
        }
        let order = tree_order(&parents)?;
        Ok(Self {
            joints,
            parents,
            order,
        })
    }

    pub fn joints(&self) -> &[Vec3] {
        &self.joints
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    /// Pre-order traversal starting at the root.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn children(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter(move |(_, p)| **p == Some(j))
            .map(|(c, _)| c)
    }

    /// Length of the bone ending at `j`; zero for the root.
    pub fn bone_length(&self, j: usize) -> f64 {
        match self.parents[j] {
            Some(p) => (self.joints[j] - self.joints[p]).norm(),
            None => 0.0,
        }
    }

    pub fn bone_lengths(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.bone_length(j)).collect()
    }

    pub fn same_topology(&self, other: &Skeleton) -> bool {
        self.parents == other.parents
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_cycles_and_foreign_roots() {
        assert!(tree_order(&[None, Some(2), Some(1)]).is_err());
        assert!(tree_order(&[None, None]).is_err());
        assert!(tree_order(&[Some(0)]).is_err());
        assert!(tree_order(&[None, Some(5)]).is_err());
    }

    #[test]
    fn preorder_visits_parents_first() {
        let parents = [None, Some(0), Some(0), Some(1), Some(2), Some(3)];
        let order = tree_order(&parents).unwrap();
        assert_eq!(order, vec![0, 1, 3, 5, 2, 4]);
    }

    #[test]
    fn parent_may_follow_child_in_index_order() {
        let order = tree_order(&[None, Some(2), Some(0)]).unwrap();
        assert_eq!(order, vec![0, 2, 1]);
    }
}
