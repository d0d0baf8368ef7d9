//! Precision matrices for the structural time components.
//!
//! Three blocks over a common quarterly axis of length `T`:
//! - trend: first-order random walk, improper with rank `T - 1`;
//! - seasonal: dummy-variable form where each window of `period` consecutive
//!   states is shrunk toward zero sum, improper with rank deficiency
//!   `period - 1`;
//! - cycle: stationary AR(2) parameterized through partial autocorrelations,
//!   with the exact stationary (proper, banded) precision.

use crate::error::{Error, Result};
use crate::sparse::{SparseSym, SymTriplets};

/// First-order random walk smoothing block.
#[derive(Debug, Clone, Copy)]
pub struct TrendSpec {
    pub len: usize,
    pub precision: f64,
}

impl TrendSpec {
    pub fn new(len: usize, precision: f64) -> Result<Self> {
        if len < 2 {
            return Err(Error::dimension(format!(
                "trend needs at least 2 time points, got {len}"
            )));
        }
        if !(precision > 0.0) || !precision.is_finite() {
            return Err(Error::data(format!(
                "trend precision must be positive and finite, got {precision}"
            )));
        }
        Ok(TrendSpec { len, precision })
    }
}

/// Dummy-variable seasonal block: windows of `period` consecutive states are
/// penalized toward zero sum.
#[derive(Debug, Clone, Copy)]
pub struct SeasonalSpec {
    pub len: usize,
    pub period: usize,
    pub precision: f64,
}

impl SeasonalSpec {
    pub fn new(len: usize, period: usize, precision: f64) -> Result<Self> {
        if period < 2 {
            return Err(Error::dimension(format!(
                "seasonal period must be at least 2, got {period}"
            )));
        }
        if len < period {
            return Err(Error::dimension(format!(
                "seasonal needs at least period = {period} time points, got {len}"
            )));
        }
        if !(precision > 0.0) || !precision.is_finite() {
            return Err(Error::data(format!(
                "seasonal precision must be positive and finite, got {precision}"
            )));
        }
        Ok(SeasonalSpec {
            len,
            period,
            precision,
        })
    }
}

/// Stationary AR(2) cycle block, parameterized by the first two partial
/// autocorrelations (each in the open unit interval) and the innovation
/// precision.
#[derive(Debug, Clone, Copy)]
pub struct CycleSpec {
    pub len: usize,
    pub pacf1: f64,
    pub pacf2: f64,
    pub precision: f64,
}

impl CycleSpec {
    pub fn new(len: usize, pacf1: f64, pacf2: f64, precision: f64) -> Result<Self> {
        if len < 2 {
            return Err(Error::dimension(format!(
                "cycle needs at least 2 time points, got {len}"
            )));
        }
        for (name, p) in [("pacf1", pacf1), ("pacf2", pacf2)] {
            if !(p > -1.0 && p < 1.0) {
                return Err(Error::data(format!(
                    "{name} must lie strictly inside (-1, 1), got {p}"
                )));
            }
        }
        if !(precision > 0.0) || !precision.is_finite() {
            return Err(Error::data(format!(
                "cycle precision must be positive and finite, got {precision}"
            )));
        }
        Ok(CycleSpec {
            len,
            pacf1,
            pacf2,
            precision,
        })
    }
}

/// Random-walk precision: `precision * D' D` with `D` the first-difference
/// operator. Quadratic form `precision * sum (x_t - x_{t-1})^2`; improper
/// with null space spanned by the constant vector.
pub fn rw1_precision(spec: &TrendSpec) -> SparseSym {
    let t_len = spec.len;
    let mut trip = SymTriplets::new(t_len);
    for t in 1..t_len {
        trip.add(t - 1, t - 1, spec.precision);
        trip.add(t, t, spec.precision);
        trip.add_sym(t - 1, t, -spec.precision);
    }
    trip.build().expect("difference precision is symmetric")
}

/// Seasonal precision: `precision * S' S` where row `t` of `S` sums the
/// window of `period` states ending at `t`. Rank deficiency `period - 1`.
pub fn seasonal_precision(spec: &SeasonalSpec) -> SparseSym {
    let (t_len, m) = (spec.len, spec.period);
    let mut trip = SymTriplets::new(t_len);
    for t in (m - 1)..t_len {
        for a in 0..m {
            for b in 0..m {
                trip.add(t - a, t - b, spec.precision);
            }
        }
    }
    trip.build().expect("window precision is symmetric")
}

/// Maps the first two partial autocorrelations to AR(2) coefficients via the
/// Durbin-Levinson recursion: `phi2 = p2`, `phi1 = p1 (1 - p2)`.
pub fn ar2_from_pacf(pacf1: f64, pacf2: f64) -> (f64, f64) {
    (pacf1 * (1.0 - pacf2), pacf2)
}

/// Unconstrained-scale transform used for optimization:
/// `z -> (e^z - 1)/(e^z + 1)`, mapping the real line onto `(-1, 1)`.
pub fn pacf_from_unconstrained(z: f64) -> f64 {
    (z / 2.0).tanh()
}

/// Inverse of [`pacf_from_unconstrained`].
pub fn pacf_to_unconstrained(p: f64) -> f64 {
    ((1.0 + p) / (1.0 - p)).ln()
}

fn check_stationary(phi1: f64, phi2: f64) -> Result<()> {
    if phi2 > -1.0 && phi1 + phi2 < 1.0 && phi2 - phi1 < 1.0 {
        Ok(())
    } else {
        Err(Error::data(format!(
            "AR(2) coefficients ({phi1}, {phi2}) are outside the stationary region"
        )))
    }
}

/// Cycle length implied by stationary AR(2) coefficients:
/// `2 pi / arccos(phi1 / (2 sqrt(-phi2)))` when the characteristic roots are
/// complex (`phi1^2 + 4 phi2 < 0`), `None` when they are real (no cycle).
/// Non-stationary coefficients are rejected.
pub fn cycle_period(phi1: f64, phi2: f64) -> Result<Option<f64>> {
    check_stationary(phi1, phi2)?;
    if phi1 * phi1 + 4.0 * phi2 < 0.0 {
        let ratio = phi1 / (2.0 * (-phi2).sqrt());
        Ok(Some(2.0 * std::f64::consts::PI / ratio.acos()))
    } else {
        Ok(None)
    }
}

/// Unit-innovation autocovariances at lags 0 and 1 of a stationary AR(2).
/// Retained as an independent oracle for the precision builder, which
/// works in partial autocorrelations instead.
#[cfg(test)]
fn ar2_unit_autocov(phi1: f64, phi2: f64) -> (f64, f64) {
    let g0 = (1.0 - phi2) / ((1.0 + phi2) * ((1.0 - phi2).powi(2) - phi1 * phi1));
    let g1 = phi1 * g0 / (1.0 - phi2);
    (g0, g1)
}

/// Exact stationary AR(2) precision. Banded with half-bandwidth 2; its
/// inverse is the stationary autocovariance matrix of the process with
/// innovation variance `1 / precision`.
pub fn ar2_precision(spec: &CycleSpec) -> Result<SparseSym> {
    let (phi1, phi2) = ar2_from_pacf(spec.pacf1, spec.pacf2);
    let t_len = spec.len;
    let mut trip = SymTriplets::new(t_len);

    // initial block: inverse of the 2x2 unit-innovation autocovariance.
    // In partial autocorrelations g0 = 1/((1-p1^2)(1-p2^2)) and
    // g1 = p1 g0, so the inverse is (1-p2^2) [[1, -p1], [-p1, 1]];
    // this form stays accurate at the edge of the stationary region
    // where the coefficient expression cancels catastrophically.
    let s = spec.precision * (1.0 - spec.pacf2 * spec.pacf2);
    trip.add(0, 0, s);
    trip.add(1, 1, s);
    trip.add_sym(0, 1, -s * spec.pacf1);

    // innovation rows: e_t - phi1 e_{t-1} - phi2 e_{t-2}
    for t in 2..t_len {
        let row = [(t, 1.0), (t - 1, -phi1), (t - 2, -phi2)];
        for &(i, a) in &row {
            for &(j, b) in &row {
                trip.add(i, j, spec.precision * a * b);
            }
        }
    }
    trip.build()
}
