//! Stability and convergence measures for simulated `phi` profiles.
//!
//! Stability counts the sign flips of consecutive forward differences,
//! `SN = #{k : dphi(k+1) * dphi(k) < 0}` with `dphi(k) = phi(k+1) - phi(k)`
//! taken periodically; a profile is considered stable while `SN / N <= eps_s`.
//!
//! Convergence compares a run on `g` nodes with the finest run `G` through
//! `CV_g = log10(|phi_g - phi_G|_2 / |phi_G|_2)` and measures how far the gap
//! between two refinement levels departs from second order,
//! `DCV_g = |CV_gbar - CV_g + expected_gap|`; convergence holds while `DCV_g <= eps_c`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::Field;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticsError {
    #[error("only one-dimensional profiles are supported, got dimension {0}")]
    Unsupported(usize),
    #[error("profile needs at least 3 nodes, got {0}")]
    TooShort(usize),
    #[error("series is empty")]
    EmptySeries,
    #[error("series times are not increasing at position {0}")]
    NotTimeOrdered(usize),
    #[error("grid of {coarse} nodes is not nested in grid of {fine} nodes")]
    NotNested { coarse: usize, fine: usize },
    #[error("reference profile has zero norm")]
    ZeroReference,
    #[error("CV values must be finite, got {cv_coarse} and {cv_second}")]
    NonFiniteCv { cv_coarse: f64, cv_second: f64 },
    #[error("grid ladder must satisfy coarse < second < finest, got {coarse} < {second} < {finest}")]
    InvalidLadder { coarse: usize, second: usize, finest: usize },
    #[error("invalid diagnostics configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown DCV mode {0:?}")]
    UnknownMode(String),
}

/// How the expected second-order gap between two CV curves is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DcvMode {
    /// `(gbar / g) * log10(4)`.
    #[default]
    AsWritten,
    /// `log2(gbar / g) * log10(4)`: one factor of four per doubling.
    Doubling,
    /// `log10((h_g^2 - h_G^2) / (h_gbar^2 - h_G^2))`: accounts for the error of the reference run itself.
    Richardson,
}

impl DcvMode {
    pub const ALL: [DcvMode; 3] = [DcvMode::AsWritten, DcvMode::Doubling, DcvMode::Richardson];

    pub fn as_str(&self) -> &'static str {
        match self {
            DcvMode::AsWritten => "as-written",
            DcvMode::Doubling => "doubling",
            DcvMode::Richardson => "richardson",
        }
    }
}

impl fmt::Display for DcvMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DcvMode {
    type Err = DiagnosticsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| DiagnosticsError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsConfig<T> {
    pub eps_stability: T,
    pub eps_convergence: T,
    pub dcv_mode: DcvMode,
}

impl<T: Real> Default for DiagnosticsConfig<T> {
    fn default() -> Self {
        Self { eps_stability: T::lit(0.01), eps_convergence: T::lit(0.15), dcv_mode: DcvMode::AsWritten }
    }
}

impl<T: Real> DiagnosticsConfig<T> {
    pub fn validate(&self) -> Result<(), DiagnosticsError> {
        if !(self.eps_stability > T::zero() && self.eps_stability < T::one()) {
            return Err(DiagnosticsError::InvalidConfig("eps_stability must lie in (0, 1)".into()));
        }
        if !(self.eps_convergence > T::zero()) {
            return Err(DiagnosticsError::InvalidConfig("eps_convergence must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityRecord<T> {
    pub time: T,
    pub sn_count: usize,
    pub grid_points: usize,
    pub ratio: T,
}

/// One sample of a convergence curve.
///
/// `cv` is `-inf` when the coarse and reference profiles coincide exactly;
/// `dcv` is `None` whenever it cannot be formed (either CV is `-inf`, or the
/// record belongs to a grid that has no DCV).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord<T> {
    pub time: T,
    pub grid_id: usize,
    pub cv: T,
    pub dcv: Option<T>,
}

/// Grid counts entering one DCV evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DcvGrids {
    /// `g`, the run whose deviation is measured.
    pub coarse: usize,
    /// `gbar`, the second largest grid.
    pub second: usize,
    /// `G`, the reference grid.
    pub finest: usize,
}

impl DcvGrids {
    pub fn validate(&self) -> Result<(), DiagnosticsError> {
        if self.coarse < self.second && self.second < self.finest && self.coarse > 0 {
            Ok(())
        } else {
            Err(DiagnosticsError::InvalidLadder { coarse: self.coarse, second: self.second, finest: self.finest })
        }
    }
}

fn line_values<T: Real>(phi: &Field<T>) -> Result<&[T], DiagnosticsError> {
    if phi.grid().dim() != 1 {
        return Err(DiagnosticsError::Unsupported(phi.grid().dim()));
    }
    if phi.len() < 3 {
        return Err(DiagnosticsError::TooShort(phi.len()));
    }
    Ok(phi.values())
}

/// Sign-flip count of a periodic profile given as raw values.
pub fn stability_count_of<T: Real>(values: &[T]) -> usize {
    let n = values.len();
    let diff = |k: usize| values[(k + 1) % n] - values[k % n];
    (0..n).filter(|&k| diff(k + 1) * diff(k) < T::zero()).count()
}

/// Number of nodes where consecutive forward differences change sign.
pub fn stability_count<T: Real>(phi: &Field<T>) -> Result<usize, DiagnosticsError> {
    line_values(phi).map(stability_count_of)
}

/// [`stability_count`] divided by the number of nodes.
pub fn stability_ratio<T: Real>(phi: &Field<T>) -> Result<T, DiagnosticsError> {
    let count = stability_count(phi)?;
    Ok(T::of_usize(count) / T::of_usize(phi.len()))
}

pub fn stability_record<T: Real>(time: T, phi: &Field<T>) -> Result<StabilityRecord<T>, DiagnosticsError> {
    let sn_count = stability_count(phi)?;
    Ok(StabilityRecord {
        time,
        sn_count,
        grid_points: phi.len(),
        ratio: T::of_usize(sn_count) / T::of_usize(phi.len()),
    })
}

fn check_order<T: Real>(times: impl Iterator<Item = T>) -> Result<(), DiagnosticsError> {
    let mut prev: Option<T> = None;
    let mut empty = true;
    for (i, t) in times.enumerate() {
        empty = false;
        if let Some(p) = prev {
            if !(t > p) {
                return Err(DiagnosticsError::NotTimeOrdered(i));
            }
        }
        prev = Some(t);
    }
    if empty {
        Err(DiagnosticsError::EmptySeries)
    } else {
        Ok(())
    }
}

/// Earliest record whose ratio strictly exceeds `eps_s`, or `None` if the
/// ratio stays at or below it throughout.
pub fn first_instability_in<T: Real>(records: &[StabilityRecord<T>], eps_s: T) -> Result<Option<T>, DiagnosticsError> {
    check_order(records.iter().map(|r| r.time))?;
    Ok(records.iter().find(|r| r.ratio > eps_s).map(|r| r.time))
}

/// Earliest sample time at which `SN / N > eps_s`.
pub fn first_instability_time<'a, T: Real>(
    series: impl IntoIterator<Item = (T, &'a Field<T>)>,
    eps_s: T,
) -> Result<Option<T>, DiagnosticsError> {
    let records = series.into_iter().map(|(t, phi)| stability_record(t, phi)).collect::<Result<Vec<_>, _>>()?;
    first_instability_in(&records, eps_s)
}

/// Refinement factor `r` with `fine = r * coarse`.
pub fn nesting_factor(coarse: usize, fine: usize) -> Result<usize, DiagnosticsError> {
    if coarse == 0 || fine < coarse || !fine.is_multiple_of(coarse) {
        Err(DiagnosticsError::NotNested { coarse, fine })
    } else {
        Ok(fine / coarse)
    }
}

/// `log10(|phi_g - R phi_G|_2 / |R phi_G|_2)` over the coarse nodes, where `R`
/// samples every `r`-th reference node. Returns `-inf` for an exact match.
pub fn relative_error_cv_of<T: Real>(coarse: &[T], reference: &[T]) -> Result<T, DiagnosticsError> {
    let r = nesting_factor(coarse.len(), reference.len())?;
    let mut err = T::zero();
    let mut norm = T::zero();
    for (k, &c) in coarse.iter().enumerate() {
        let f = reference[r * k];
        err = err + (c - f) * (c - f);
        norm = norm + f * f;
    }
    if norm == T::zero() {
        return Err(DiagnosticsError::ZeroReference);
    }
    if err == T::zero() {
        return Ok(T::neg_infinity());
    }
    Ok((err.sqrt() / norm.sqrt()).log10())
}

/// [`relative_error_cv_of`] for two 1-D fields on nested lattices.
pub fn relative_error_cv<T: Real>(coarse: &Field<T>, reference: &Field<T>) -> Result<T, DiagnosticsError> {
    let c = line_values(coarse)?;
    let f = line_values(reference)?;
    let (gc, gf) = (coarse.grid(), reference.grid());
    if gc.origin() != gf.origin() || gc.extent() != gf.extent() {
        return Err(DiagnosticsError::NotNested { coarse: c.len(), fine: f.len() });
    }
    relative_error_cv_of(c, f)
}

/// Gap `CV_g - CV_gbar` expected of an exactly second-order method.
pub fn expected_gap<T: Real>(grids: DcvGrids, mode: DcvMode) -> Result<T, DiagnosticsError> {
    grids.validate()?;
    let log4 = T::lit(4.0).log10();
    let ratio = T::of_usize(grids.second) / T::of_usize(grids.coarse);
    Ok(match mode {
        DcvMode::AsWritten => ratio * log4,
        DcvMode::Doubling => ratio.log2() * log4,
        DcvMode::Richardson => {
            let h2 = |g: usize| {
                let h = T::one() / T::of_usize(g);
                h * h
            };
            let top = h2(grids.coarse) - h2(grids.finest);
            let bottom = h2(grids.second) - h2(grids.finest);
            (top / bottom).log10()
        }
    })
}

/// `|CV_gbar - CV_g + expected_gap|`.
pub fn convergence_deviation_dcv<T: Real>(
    cv_coarse: T,
    cv_second: T,
    grids: DcvGrids,
    mode: DcvMode,
) -> Result<T, DiagnosticsError> {
    if !cv_coarse.is_finite() || !cv_second.is_finite() {
        return Err(DiagnosticsError::NonFiniteCv {
            cv_coarse: cv_coarse.to_f64().unwrap_or(f64::NAN),
            cv_second: cv_second.to_f64().unwrap_or(f64::NAN),
        });
    }
    let gap = expected_gap::<T>(grids, mode)?;
    Ok((cv_second - cv_coarse + gap).abs())
}

/// Earliest record with `DCV > eps_c`; records without a DCV are skipped.
pub fn first_divergence_time<T: Real>(
    records: &[ConvergenceRecord<T>],
    eps_c: T,
) -> Result<Option<T>, DiagnosticsError> {
    check_order(records.iter().map(|r| r.time))?;
    Ok(records.iter().find(|r| r.dcv.is_some_and(|d| d > eps_c)).map(|r| r.time))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::GridSpec;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn line(values: Vec<f64>) -> Field<f64> {
        let grid = Arc::new(GridSpec::unit_cell_with_ratio(1, values.len(), 0.1).unwrap());
        Field::new(grid, values).unwrap()
    }

    fn mode(n: usize) -> Vec<f64> {
        (0..n).map(|k| (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos()).collect()
    }

    #[test]
    fn count_examples() {
        assert_eq!(stability_count(&line(vec![3.0; 10])).unwrap(), 0);
        let alt: Vec<f64> = (0..8).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(stability_count(&line(alt.clone())).unwrap(), 8);
        assert_eq!(stability_count(&line(mode(64))).unwrap(), 2);

        assert_eq!(stability_ratio(&line(vec![3.0; 10])).unwrap(), 0.0);
        assert_eq!(stability_ratio(&line(alt)).unwrap(), 1.0);
        assert_eq!(stability_ratio(&line(mode(64))).unwrap(), 0.03125);
    }

    #[test]
    fn flat_segments_do_not_count() {
        // plateau at the top: differences +, 0, -, ... never strictly flip across the zero
        assert_eq!(stability_count(&line(vec![0.0, 1.0, 1.0, 0.0, -1.0, -1.0])).unwrap(), 0);
    }

    #[test]
    fn rejects_multi_dimensional() {
        let grid = Arc::new(GridSpec::unit_cell_with_ratio(2, 6, 0.1).unwrap());
        assert_eq!(stability_count(&Field::zeros(grid)), Err(DiagnosticsError::Unsupported(2)));
    }

    #[test]
    fn first_instability_examples() {
        let flat = line(vec![1.0; 16]);
        let series: Vec<(f64, &Field<f64>)> = (0..5).map(|t| (t as f64, &flat)).collect();
        assert_eq!(first_instability_time(series, 0.01).unwrap(), None);

        let alt = line((0..16).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect());
        let series = vec![(0.0, &flat), (1.0, &flat), (2.0, &alt), (3.0, &flat)];
        assert_eq!(first_instability_time(series, 0.01).unwrap(), Some(2.0));

        assert_eq!(first_instability_time(Vec::<(f64, &Field<f64>)>::new(), 0.01), Err(DiagnosticsError::EmptySeries));
        let series = vec![(1.0, &flat), (1.0, &flat)];
        assert_eq!(first_instability_time(series, 0.01), Err(DiagnosticsError::NotTimeOrdered(1)));
    }

    #[test]
    fn threshold_is_strict() {
        // ratio exactly at the threshold does not count as a crossing
        let records = [StabilityRecord { time: 0.0, sn_count: 1, grid_points: 100, ratio: 0.01 }];
        assert_eq!(first_instability_in(&records, 0.01).unwrap(), None);
    }

    #[test]
    fn cv_examples() {
        let fine = mode(64);
        let coarse: Vec<f64> = fine.iter().step_by(4).copied().collect();
        assert_eq!(relative_error_cv_of(&coarse, &fine).unwrap(), f64::NEG_INFINITY);

        let scaled: Vec<f64> = coarse.iter().map(|v| 1.1 * v).collect();
        assert!((relative_error_cv_of(&scaled, &fine).unwrap() + 1.0).abs() < 1e-12);

        let offset: Vec<f64> = coarse.iter().map(|v| v + 1e-3).collect();
        let rms = (coarse.iter().map(|v| v * v).sum::<f64>() / coarse.len() as f64).sqrt();
        let expected = -3.0 - rms.log10();
        assert!((relative_error_cv_of(&offset, &fine).unwrap() - expected).abs() < 1e-10);

        assert_eq!(
            relative_error_cv_of(&coarse[..15], &fine),
            Err(DiagnosticsError::NotNested { coarse: 15, fine: 64 })
        );
        assert_eq!(relative_error_cv_of(&[1.0; 4], &[0.0; 8]), Err(DiagnosticsError::ZeroReference));
    }

    #[test]
    fn cv_on_fields_checks_geometry() {
        let fine = line(mode(64));
        let coarse = line(mode(16));
        assert_eq!(relative_error_cv(&coarse, &fine).unwrap(), f64::NEG_INFINITY);
        let shifted =
            Field::new(Arc::new(GridSpec::new(vec![16], vec![1.0], vec![0.0], 0.01).unwrap()), mode(16)).unwrap();
        assert!(relative_error_cv(&shifted, &fine).is_err());
    }

    #[test]
    fn dcv_examples() {
        let ladder = DcvGrids { coarse: 2000, second: 4000, finest: 8000 };
        let log4 = 4f64.log10();
        assert!(convergence_deviation_dcv(-2.0, -2.0 - 2.0 * log4, ladder, DcvMode::AsWritten).unwrap() < 1e-15);

        let rich: f64 = expected_gap(ladder, DcvMode::Richardson).unwrap();
        assert!((rich - 5f64.log10()).abs() < 1e-15);
        let d = convergence_deviation_dcv(-3.0, -3.0 - 5f64.log10(), ladder, DcvMode::Richardson).unwrap();
        assert!(d < 1e-14);

        let dbl: f64 = expected_gap(ladder, DcvMode::Doubling).unwrap();
        assert!((dbl - log4).abs() < 1e-15);

        assert!(convergence_deviation_dcv(f64::NEG_INFINITY, -1.0, ladder, DcvMode::AsWritten).is_err());
        let bad = DcvGrids { coarse: 4000, second: 2000, finest: 8000 };
        assert!(convergence_deviation_dcv(-1.0, -1.0, bad, DcvMode::AsWritten).is_err());
    }

    #[test]
    fn first_divergence_examples() {
        let rec = |t: f64, d: Option<f64>| ConvergenceRecord { time: t, grid_id: 32, cv: -2.0, dcv: d };
        let zeros: Vec<_> = (0..6).map(|t| rec(t as f64, Some(0.0))).collect();
        assert_eq!(first_divergence_time(&zeros, 0.15).unwrap(), None);

        let stepped: Vec<_> = (0..8).map(|t| rec(t as f64, Some(if t >= 4 { 0.5 } else { 0.05 }))).collect();
        assert_eq!(first_divergence_time(&stepped, 0.15).unwrap(), Some(4.0));

        let gaps = vec![rec(0.0, None), rec(1.0, Some(0.2))];
        assert_eq!(first_divergence_time(&gaps, 0.15).unwrap(), Some(1.0));
        assert_eq!(first_divergence_time::<f64>(&[], 0.15), Err(DiagnosticsError::EmptySeries));
    }

    #[test]
    fn mode_parsing() {
        for m in DcvMode::ALL {
            assert_eq!(m.to_string().parse::<DcvMode>().unwrap(), m);
        }
        assert!("second-order".parse::<DcvMode>().is_err());
        assert!(DiagnosticsConfig::<f64>::default().validate().is_ok());
        let bad = DiagnosticsConfig { eps_stability: 1.0, ..DiagnosticsConfig::<f64>::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn count_invariants(raw in prop::collection::vec(-320i32..320, 3..80), shift in -10i32..10, scale in 0.01f64..100.0, rot in 0usize..80) {
            // dyadic values keep every difference exact under shifting and scaling
            let values: Vec<f64> = raw.iter().map(|&v| v as f64 / 64.0).collect();
            let base = stability_count_of(&values);
            prop_assert!(base <= values.len());
            let shifted: Vec<f64> = values.iter().map(|v| v + shift as f64).collect();
            prop_assert_eq!(base, stability_count_of(&shifted));
            let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
            prop_assert_eq!(base, stability_count_of(&scaled));
            let mut rotated = values.clone();
            rotated.rotate_left(rot % values.len());
            prop_assert_eq!(base, stability_count_of(&rotated));
        }

        #[test]
        fn cv_of_scaled_reference(alpha in -3.0f64..3.0) {
            prop_assume!((alpha - 1.0).abs() > 1e-6);
            let fine = mode(48);
            let coarse: Vec<f64> = fine.iter().step_by(3).map(|v| alpha * v).collect();
            let cv = relative_error_cv_of(&coarse, &fine).unwrap();
            prop_assert!((cv - (alpha - 1.0).abs().log10()).abs() < 1e-12);
        }

        #[test]
        fn dcv_nonnegative(a in -8.0f64..0.0, b in -8.0f64..0.0) {
            let grids = DcvGrids { coarse: 32, second: 64, finest: 128 };
            for m in DcvMode::ALL {
                prop_assert!(convergence_deviation_dcv(a, b, grids, m).unwrap() >= 0.0);
            }
        }
    }
}
