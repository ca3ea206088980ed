//! Dense row-major shapes, rank 1..=5, every extent >= 1.

use crate::error::{Error, Result};

/// Maximum tensor rank the engine supports. Five covers the deepest layout
/// used anywhere in the crate: `[time, batch, head, token, channel]`.
pub const MAX_RANK: usize = 5;

/// Row-major dense shape. Construction validates rank and extents, so a
/// `Shape` in hand is always usable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::shape(
                "shape",
                format!("rank must be 1..={MAX_RANK}, got {}", dims.len()),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "shape",
                format!("zero extent in {dims:?}; empty tensors are not supported"),
            ));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides (in elements).
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.rank()];
        for i in (0..self.rank().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.0[i + 1];
        }
        s
    }

    /// Flat offset of a multi-index (no bounds check beyond debug).
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.rank());
        let mut off = 0;
        let mut stride = 1;
        for d in (0..self.rank()).rev() {
            debug_assert!(idx[d] < self.0[d]);
            off += idx[d] * stride;
            stride *= self.0[d];
        }
        off
    }

    /// Elementwise broadcast against `other`: ranks must match and each axis
    /// pair must be equal or contain a 1. Returns the broadcast shape.
    pub fn broadcast_with(&self, other: &Shape) -> Result<Shape> {
        if self.rank() != other.rank() {
            return Err(Error::shape(
                "broadcast",
                format!(
                    "rank mismatch {:?} vs {:?}; broadcasting requires equal rank",
                    self.0, other.0
                ),
            ));
        }
        let mut out = Vec::with_capacity(self.rank());
        for (&a, &b) in self.0.iter().zip(&other.0) {
            if a == b || b == 1 {
                out.push(a);
            } else if a == 1 {
                out.push(b);
            } else {
                return Err(Error::shape(
                    "broadcast",
                    format!("incompatible extents in {:?} vs {:?}", self.0, other.0),
                ));
            }
        }
        Shape::new(&out)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Iterate all multi-indices of `dims` in row-major order, calling `f` with
/// the current index. Small helper shared by the strided kernels.
pub(crate) fn for_each_index(dims: &[usize], mut f: impl FnMut(&[usize])) {
    let rank = dims.len();
    let mut idx = vec![0usize; rank];
    loop {
        f(&idx);
        // Odometer increment.
        let mut d = rank;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extent_and_bad_rank() {
        assert!(Shape::new(&[3, 0]).is_err());
        assert!(Shape::new(&[]).is_err());
        assert!(Shape::new(&[1, 1, 1, 1, 1, 1]).is_err());
        assert!(Shape::new(&[2, 3, 4, 5, 6]).is_ok());
    }

    #[test]
    fn strides_are_row_major() {
        let s = Shape::new(&[2, 3, 4]).unwrap();
        assert_eq!(s.strides(), vec![12, 4, 1]);
        assert_eq!(s.offset(&[1, 2, 3]), 23);
    }

    #[test]
    fn broadcast_rules() {
        let a = Shape::new(&[4, 1, 3]).unwrap();
        let b = Shape::new(&[4, 5, 1]).unwrap();
        assert_eq!(a.broadcast_with(&b).unwrap().dims(), &[4, 5, 3]);
        let c = Shape::new(&[2, 2, 2]).unwrap();
        assert!(a.broadcast_with(&c).is_err());
        let d = Shape::new(&[4, 3]).unwrap();
        assert!(a.broadcast_with(&d).is_err());
    }

    #[test]
    fn index_iteration_order() {
        let mut seen = vec![];
        for_each_index(&[2, 2], |i| seen.push((i[0], i[1])));
        assert_eq!(seen, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }
}
