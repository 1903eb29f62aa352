//! Transition tuples `(y, Δy, Δy², Δτ)` built from observed paths.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::sde::PathBundle;

/// Flattened set of transition tuples. Vector fields are row-major
/// `len × dim`; `path` records which path each tuple came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub dim: usize,
    pub y: Vec<f64>,
    pub dy: Vec<f64>,
    pub dy2: Vec<f64>,
    pub dt: Vec<f64>,
    pub path: Vec<usize>,
}

impl ObservationSet {
    pub fn empty(dim: usize) -> Self {
        ObservationSet { dim, y: Vec::new(), dy: Vec::new(), dy2: Vec::new(), dt: Vec::new(), path: Vec::new() }
    }

    /// One tuple per consecutive pair of observations within a path. Paths
    /// with fewer than two observations contribute nothing; their count is
    /// returned alongside the set.
    pub fn from_bundle(bundle: &PathBundle) -> Result<(Self, usize)> {
        let d = bundle.dim;
        let mut set = ObservationSet::empty(d);
        let mut skipped = 0;
        for (k, p) in bundle.paths.iter().enumerate() {
            check_dim(p.len() * d, p.states.len())?;
            if p.len() < 2 {
                skipped += 1;
                continue;
            }
            for l in 0..p.len() - 1 {
                let dt = p.times[l + 1] - p.times[l];
                if !(dt > 0.0) {
                    return Err(Error::format(format!("path {k}: non-increasing timestamps at {l}")));
                }
                let (a, b) = (p.state(l, d), p.state(l + 1, d));
                set.y.extend_from_slice(a);
                for i in 0..d {
                    let delta = b[i] - a[i];
                    set.dy.push(delta);
                    set.dy2.push(delta * delta);
                }
                set.dt.push(dt);
                set.path.push(k);
            }
        }
        Ok((set, skipped))
    }

    pub fn len(&self) -> usize {
        self.dt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dt.is_empty()
    }

    pub fn y_of(&self, i: usize) -> &[f64] {
        &self.y[i * self.dim..(i + 1) * self.dim]
    }

    pub fn dy_of(&self, i: usize) -> &[f64] {
        &self.dy[i * self.dim..(i + 1) * self.dim]
    }

    pub fn dy2_of(&self, i: usize) -> &[f64] {
        &self.dy2[i * self.dim..(i + 1) * self.dim]
    }

    /// Tuples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> ObservationSet {
        let d = self.dim;
        let mut out = ObservationSet::empty(d);
        for &i in indices {
            out.y.extend_from_slice(self.y_of(i));
            out.dy.extend_from_slice(self.dy_of(i));
            out.dy2.extend_from_slice(self.dy2_of(i));
            out.dt.push(self.dt[i]);
            out.path.push(self.path[i]);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let d = self.dim;
        if self.y.len() != n * d || self.dy.len() != n * d || self.dy2.len() != n * d || self.path.len() != n {
            return Err(Error::format("observation buffers have inconsistent lengths"));
        }
        if let Some(i) = self.dt.iter().position(|&t| !(t > 0.0)) {
            return Err(Error::format(format!("tuple {i} has non-positive gap")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::Path;

    fn bundle(dim: usize, paths: Vec<(Vec<f64>, Vec<f64>)>) -> PathBundle {
        PathBundle {
            dim,
            paths: paths.into_iter().map(|(times, states)| Path { times, states, diverged: false }).collect(),
        }
    }

    #[test]
    fn tuple_count_is_k_times_l_minus_one() {
        let b = bundle(1, vec![(vec![0.0, 1.0, 2.0], vec![0.0; 3]), (vec![0.0, 1.0, 2.0], vec![1.0; 3])]);
        let (set, skipped) = ObservationSet::from_bundle(&b).unwrap();
        assert_eq!((set.len(), skipped), (4, 0));
        assert_eq!(set.path, vec![0, 0, 1, 1]);
    }

    #[test]
    fn squared_increments_are_elementwise() {
        let b = bundle(2, vec![(vec![0.0, 0.5], vec![0.0, 0.0, 1.0, -2.0])]);
        let (set, _) = ObservationSet::from_bundle(&b).unwrap();
        assert_eq!(set.dy, vec![1.0, -2.0]);
        assert_eq!(set.dy2, vec![1.0, 4.0]);
    }

    #[test]
    fn hand_built_tuples() {
        let b = bundle(1, vec![(vec![0.0, 0.1, 0.3], vec![0.0, 1.0, 3.0])]);
        let (set, _) = ObservationSet::from_bundle(&b).unwrap();
        assert_eq!(set.y, vec![0.0, 1.0]);
        assert_eq!(set.dy, vec![1.0, 2.0]);
        assert_eq!(set.dy2, vec![1.0, 4.0]);
        assert_eq!(set.dt[0], 0.1);
        assert!((set.dt[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn short_paths_are_skipped() {
        let b = bundle(1, vec![(vec![0.0], vec![2.0]), (vec![0.0, 1.0], vec![0.0, 1.0])]);
        let (set, skipped) = ObservationSet::from_bundle(&b).unwrap();
        assert_eq!((set.len(), skipped), (1, 1));
        assert_eq!(set.path, vec![1]);
    }
}
