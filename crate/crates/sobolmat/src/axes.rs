//! Axis-subset bookkeeping.
//!
//! Sensitivity analysis constantly asks "what happens when only the input axes
//! in `m` are kept and the rest are marginalized?". [`AxisSet`] is that `m`: an
//! ordered subset of `{0, …, M-1}` carrying its ambient dimension `M` so that
//! complements are well defined.

use crate::error::{Error, Result};

/// An ordered subset of the `M` determined input axes.
///
/// Axes are canonically sorted and deduplicated on construction, so the type
/// behaves as a set while iterating in a predictable order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AxisSet {
    axes: Vec<usize>,
    ambient: usize,
}

impl AxisSet {
    /// Builds a subset of `{0, …, ambient-1}` from any iterable of axis
    /// indices. Ordering and repetition of the input are irrelevant.
    pub fn new(axes: impl IntoIterator<Item = usize>, ambient: usize) -> Result<Self> {
        let mut axes: Vec<usize> = axes.into_iter().collect();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&a| a >= ambient) {
            return Err(Error::AxisOutOfRange { axis: bad, ambient });
        }
        Ok(Self { axes, ambient })
    }

    /// The empty subset (everything marginalized).
    pub fn empty(ambient: usize) -> Self {
        Self { axes: Vec::new(), ambient }
    }

    /// The full subset (nothing marginalized).
    pub fn full(ambient: usize) -> Self {
        Self { axes: (0..ambient).collect(), ambient }
    }

    /// The singleton `{axis}`.
    pub fn single(axis: usize, ambient: usize) -> Result<Self> {
        Self::new([axis], ambient)
    }

    /// The prefix `{0, …, len-1}`; `len = 0` gives the empty set.
    pub fn prefix(len: usize, ambient: usize) -> Result<Self> {
        if len > ambient {
            return Err(Error::AxisOutOfRange { axis: len - 1, ambient });
        }
        Ok(Self { axes: (0..len).collect(), ambient })
    }

    /// Parses a comma-separated axis list such as `"0,2,3"`. An empty or
    /// all-whitespace string parses to the empty subset.
    pub fn parse(text: &str, ambient: usize) -> Result<Self> {
        let mut axes = Vec::new();
        for part in text.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let axis: usize = part
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad axis index `{part}`")))?;
            axes.push(axis);
        }
        Self::new(axes, ambient)
    }

    /// All axes *not* in this subset.
    pub fn complement(&self) -> Self {
        let axes = (0..self.ambient).filter(|a| !self.contains(*a)).collect();
        Self { axes, ambient: self.ambient }
    }

    /// Set union with another subset of the same ambient space.
    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.ambient != other.ambient {
            return Err(Error::ShapeMismatch {
                expected: format!("ambient {}", self.ambient),
                got: format!("ambient {}", other.ambient),
            });
        }
        Self::new(self.axes.iter().chain(&other.axes).copied(), self.ambient)
    }

    /// Set intersection with another subset of the same ambient space.
    pub fn intersection(&self, other: &Self) -> Result<Self> {
        if self.ambient != other.ambient {
            return Err(Error::ShapeMismatch {
                expected: format!("ambient {}", self.ambient),
                got: format!("ambient {}", other.ambient),
            });
        }
        Self::new(
            self.axes.iter().copied().filter(|a| other.contains(*a)),
            self.ambient,
        )
    }

    /// This subset with one extra axis.
    pub fn with_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.ambient {
            return Err(Error::AxisOutOfRange { axis, ambient: self.ambient });
        }
        Self::new(self.axes.iter().copied().chain([axis]), self.ambient)
    }

    /// True when `axis` belongs to the subset.
    pub fn contains(&self, axis: usize) -> bool {
        self.axes.binary_search(&axis).is_ok()
    }

    /// The sorted member axes.
    pub fn axes(&self) -> &[usize] {
        &self.axes
    }

    /// Iterates over the member axes in increasing order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.axes.iter().copied()
    }

    /// Number of member axes.
    pub fn len(&self) -> usize {
        self.axes.len()
    }

    /// True for the empty subset.
    pub fn is_empty(&self) -> bool {
        self.axes.is_empty()
    }

    /// True when every ambient axis is a member.
    pub fn is_full(&self) -> bool {
        self.axes.len() == self.ambient
    }

    /// The ambient dimension `M`.
    pub fn ambient(&self) -> usize {
        self.ambient
    }
}

impl std::fmt::Display for AxisSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, a) in self.axes.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, ")")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn complement_of_examples() {
        let m = AxisSet::new([0, 1], 5).unwrap();
        assert_eq!(m.complement().axes(), &[2, 3, 4]);
        assert_eq!(AxisSet::empty(5).complement().axes(), &[0, 1, 2, 3, 4]);
        assert!(AxisSet::full(5).complement().is_empty());
    }

    #[test]
    fn construction_sorts_and_dedups() {
        let m = AxisSet::new([3, 0, 3, 1], 5).unwrap();
        assert_eq!(m.axes(), &[0, 1, 3]);
        assert_eq!(format!("{m}"), "(0,1,3)");
    }

    #[test]
    fn out_of_range_axis_is_rejected() {
        assert!(matches!(
            AxisSet::new([5], 5),
            Err(Error::AxisOutOfRange { axis: 5, ambient: 5 })
        ));
    }

    #[test]
    fn parse_handles_lists_and_empties() {
        assert_eq!(AxisSet::parse("2, 0", 5).unwrap().axes(), &[0, 2]);
        assert!(AxisSet::parse("", 5).unwrap().is_empty());
        assert!(AxisSet::parse("x", 5).is_err());
        assert!(AxisSet::parse("7", 5).is_err());
    }

    proptest! {
        #[test]
        fn complement_partitions_the_ambient_set(
            ambient in 1usize..12,
            picks in proptest::collection::vec(0usize..12, 0..12),
        ) {
            let picks: Vec<usize> = picks.into_iter().filter(|&a| a < ambient).collect();
            let m = AxisSet::new(picks, ambient).unwrap();
            let c = m.complement();
            prop_assert_eq!(m.len() + c.len(), ambient);
            prop_assert!(m.intersection(&c).unwrap().is_empty());
            prop_assert!(m.union(&c).unwrap().is_full());
            prop_assert_eq!(c.complement(), m);
        }

        #[test]
        fn axes_strictly_increasing(
            picks in proptest::collection::vec(0usize..16, 0..20),
        ) {
            let m = AxisSet::new(picks, 16).unwrap();
            prop_assert!(m.axes().windows(2).all(|w| w[0] < w[1]));
        }
    }
}
