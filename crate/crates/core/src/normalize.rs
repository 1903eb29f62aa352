//! Instance normalization of observation sets and the matching Itô
//! renormalization of vector fields.
//!
//! Space is standardized per component, `ỹ = S⁻¹(y − ȳ)`, and time is scaled
//! by `c = Δτ_tar · exp(−mean ln Δτ)`. A process with drift `f̃` and amplitude
//! `ã` in normalized coordinates has drift `c·S⊙f̃` and amplitude `√c·S⊙ã` in
//! the original ones.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::obs::ObservationSet;
use crate::sde::VectorField;

pub const DEFAULT_DT_TARGET: f64 = 0.01;
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub time_factor: f64,
    pub dt_target: f64,
}

impl NormalizationRecord {
    pub fn identity(dim: usize) -> Self {
        NormalizationRecord { mean: vec![0.0; dim], scale: vec![1.0; dim], time_factor: 1.0, dt_target: DEFAULT_DT_TARGET }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fits the record on the tuple heads `y` and gaps `Δτ` of `set`.
    pub fn fit(set: &ObservationSet, dt_target: f64) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::EmptyContext);
        }
        if !(dt_target > 0.0) {
            return Err(Error::config("target gap must be positive"));
        }
        let d = set.dim;
        let n = set.len() as f64;
        let mut mean = vec![0.0; d];
        for row in set.y.chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in set.y.chunks_exact(d) {
            for i in 0..d {
                let r = row[i] - mean[i];
                var[i] += r * r;
            }
        }
        let scale = var.iter().map(|v| (v / n).sqrt().max(SCALE_FLOOR)).collect();
        let mean_log_dt = set.dt.iter().map(|t| t.ln()).sum::<f64>() / n;
        let time_factor = dt_target * (-mean_log_dt).exp();
        Ok(NormalizationRecord { mean, scale, time_factor, dt_target })
    }

    pub fn apply(&self, set: &ObservationSet) -> Result<ObservationSet> {
        check_dim(self.dim(), set.dim)?;
        let d = set.dim;
        let mut out = set.clone();
        for (k, v) in out.y.iter_mut().enumerate() {
            let i = k % d;
            *v = (*v - self.mean[i]) / self.scale[i];
        }
        for (k, v) in out.dy.iter_mut().enumerate() {
            *v /= self.scale[k % d];
        }
        for (k, v) in out.dy2.iter_mut().enumerate() {
            let s = self.scale[k % d];
            *v /= s * s;
        }
        out.dt.iter_mut().for_each(|t| *t *= self.time_factor);
        Ok(out)
    }

    /// `S⁻¹(x − ȳ)`
    pub fn normalize_location(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(x.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) / s).collect())
    }

    /// `S x̃ + ȳ`
    pub fn denormalize_location(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(x.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| s * x + m).collect())
    }

    /// Normalized-domain fields to original-domain fields.
    pub fn renormalize_fields(&self, drift: &[f64], amplitude: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.dim(), drift.len())?;
        check_dim(self.dim(), amplitude.len())?;
        let c = self.time_factor;
        let sc = c.sqrt();
        Ok((
            drift.iter().zip(&self.scale).map(|(f, s)| c * s * f).collect(),
            amplitude.iter().zip(&self.scale).map(|(a, s)| sc * s * a).collect(),
        ))
    }

    /// Inverse of [`renormalize_fields`](Self::renormalize_fields).
    pub fn normalize_fields(&self, drift: &[f64], amplitude: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.dim(), drift.len())?;
        check_dim(self.dim(), amplitude.len())?;
        let c = self.time_factor;
        let sc = c.sqrt();
        Ok((
            drift.iter().zip(&self.scale).map(|(f, s)| f / (c * s)).collect(),
            amplitude.iter().zip(&self.scale).map(|(a, s)| a / (sc * s)).collect(),
        ))
    }
}

/// Fits a record with the default target gap and applies it.
pub fn fit_and_normalize(set: &ObservationSet) -> Result<(ObservationSet, NormalizationRecord)> {
    fit_and_normalize_with(set, DEFAULT_DT_TARGET)
}

pub fn fit_and_normalize_with(set: &ObservationSet, dt_target: f64) -> Result<(ObservationSet, NormalizationRecord)> {
    let rec = NormalizationRecord::fit(set, dt_target)?;
    Ok((rec.apply(set)?, rec))
}

/// An original-domain field viewed in normalized coordinates and time.
pub struct NormalizedField<'a, F: ?Sized> {
    pub inner: &'a F,
    pub record: &'a NormalizationRecord,
}

impl<F: VectorField + ?Sized> VectorField for NormalizedField<'_, F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn evaluate(&self, states: &[f64], drift: &mut [f64], amplitude: &mut [f64]) {
        let d = self.dim();
        let r = self.record;
        let x: Vec<f64> = states.iter().enumerate().map(|(k, v)| r.scale[k % d] * v + r.mean[k % d]).collect();
        self.inner.evaluate(&x, drift, amplitude);
        let c = r.time_factor;
        let sc = c.sqrt();
        for k in 0..drift.len() {
            let s = r.scale[k % d];
            drift[k] /= c * s;
            amplitude[k] /= sc * s;
        }
    }
}

/// A normalized-domain field mapped back to original coordinates and time.
pub struct RenormalizedField<'a, F: ?Sized> {
    pub inner: &'a F,
    pub record: &'a NormalizationRecord,
}

impl<F: VectorField + ?Sized> VectorField for RenormalizedField<'_, F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn evaluate(&self, states: &[f64], drift: &mut [f64], amplitude: &mut [f64]) {
        let d = self.dim();
        let r = self.record;
        let x: Vec<f64> = states.iter().enumerate().map(|(k, v)| (v - r.mean[k % d]) / r.scale[k % d]).collect();
        self.inner.evaluate(&x, drift, amplitude);
        let c = r.time_factor;
        let sc = c.sqrt();
        for k in 0..drift.len() {
            let s = r.scale[k % d];
            drift[k] *= c * s;
            amplitude[k] *= sc * s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_1d(y: &[f64], dt: &[f64]) -> ObservationSet {
        let mut s = ObservationSet::empty(1);
        for (i, (&v, &t)) in y.iter().zip(dt).enumerate() {
            s.y.push(v);
            s.dy.push(0.5 * i as f64);
            s.dy2.push(0.25 * (i * i) as f64);
            s.dt.push(t);
            s.path.push(0);
        }
        s
    }

    #[test]
    fn standardizes_hand_example() {
        let (out, rec) = fit_and_normalize(&set_1d(&[0.0, 2.0], &[0.1, 0.1])).unwrap();
        assert_eq!(rec.mean, vec![1.0]);
        assert_eq!(rec.scale, vec![1.0]);
        assert_eq!(out.y, vec![-1.0, 1.0]);
    }

    #[test]
    fn time_factor_hand_example() {
        let (out, rec) = fit_and_normalize(&set_1d(&[0.0, 2.0, 1.0], &[0.1, 0.1, 0.1])).unwrap();
        assert!((rec.time_factor - 0.1).abs() < 1e-15);
        assert!(out.dt.iter().all(|&t| (t - 0.01).abs() < 1e-17));
    }

    #[test]
    fn constant_dimension_hits_floor() {
        let (out, rec) = fit_and_normalize(&set_1d(&[3.0, 3.0, 3.0], &[0.1, 0.2, 0.3])).unwrap();
        assert_eq!(rec.scale, vec![SCALE_FLOOR]);
        assert!(out.y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(matches!(fit_and_normalize(&ObservationSet::empty(2)), Err(Error::EmptyContext)));
    }

    #[test]
    fn location_maps() {
        let rec = NormalizationRecord { mean: vec![1.0], scale: vec![2.0], time_factor: 1.0, dt_target: 0.01 };
        assert_eq!(rec.normalize_location(&[3.0]).unwrap(), vec![1.0]);
        assert_eq!(rec.normalize_location(&[1.0]).unwrap(), vec![0.0]);
        assert!(rec.normalize_location(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn renormalization_examples() {
        let id = NormalizationRecord::identity(2);
        assert_eq!(id.renormalize_fields(&[1.5, -2.0], &[0.3, 0.0]).unwrap(), (vec![1.5, -2.0], vec![0.3, 0.0]));
        let rec = NormalizationRecord { mean: vec![0.0], scale: vec![2.0], time_factor: 0.1, dt_target: 0.01 };
        let (f, a) = rec.renormalize_fields(&[1.0], &[1.0]).unwrap();
        assert!((f[0] - 0.2).abs() < 1e-15);
        assert!((a[0] - 2.0 * 0.1f64.sqrt()).abs() < 1e-15);
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn raw_set() -> impl Strategy<Value = ObservationSet> {
        (1usize..4, 3usize..30).prop_flat_map(|(d, n)| {
            (
                proptest::collection::vec(-50.0f64..50.0, n * d),
                proptest::collection::vec(-5.0f64..5.0, n * d),
                proptest::collection::vec(1e-4f64..1.0, n),
            )
                .prop_map(move |(y, dy, dt)| ObservationSet {
                    dim: d,
                    dy2: dy.iter().map(|v| v * v).collect(),
                    y,
                    dy,
                    path: vec![0; dt.len()],
                    dt,
                })
        })
    }

    proptest! {
        #[test]
        fn normalized_moments(set in raw_set()) {
            let (out, rec) = fit_and_normalize(&set).unwrap();
            let d = out.dim;
            let n = out.len() as f64;
            for i in 0..d {
                let col: Vec<f64> = out.y.iter().skip(i).step_by(d).copied().collect();
                let m = col.iter().sum::<f64>() / n;
                prop_assert!(m.abs() < 1e-9);
                if rec.scale[i] > 1e-6 {
                    let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
                    prop_assert!((v - 1.0).abs() < 1e-9);
                }
            }
            let ml = out.dt.iter().map(|t| t.ln()).sum::<f64>() / n;
            prop_assert!((ml - DEFAULT_DT_TARGET.ln()).abs() < 1e-9);
        }

        #[test]
        fn squared_increments_stay_consistent(set in raw_set()) {
            let (out, _) = fit_and_normalize(&set).unwrap();
            for (a, b) in out.dy.iter().zip(&out.dy2) {
                prop_assert!((a * a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn second_pass_is_identity(set in raw_set()) {
            let (once, _) = fit_and_normalize(&set).unwrap();
            let (_, rec2) = fit_and_normalize(&once).unwrap();
            prop_assert!((rec2.time_factor - 1.0).abs() < 1e-9);
            for i in 0..set.dim {
                prop_assert!(rec2.mean[i].abs() < 1e-9);
                prop_assert!((rec2.scale[i] - 1.0).abs() < 1e-9 || rec2.scale[i] == SCALE_FLOOR);
            }
        }

        #[test]
        fn location_round_trip(set in raw_set(), x in proptest::collection::vec(-100.0f64..100.0, 3)) {
            let rec = NormalizationRecord::fit(&set, 0.01).unwrap();
            let x = &x[..set.dim];
            let back = rec.denormalize_location(&rec.normalize_location(x).unwrap()).unwrap();
            for (a, b) in back.iter().zip(x) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()) || rec.scale.iter().any(|&s| s == SCALE_FLOOR));
            }
        }
    }
}
