//! BME280 temperature recalibration and DS18B20 offset calibration.
//!
//! The BME280 maps a raw ADC count to degrees Celsius through a quadratic
//! `T = c0 + c1*raw + c2*raw^2` whose coefficients are derived from three
//! per-device constants `(d1, d2, d3)` stored in the sensor. Recalibration
//! fits the quadratic to a climate-chamber sweep and inverts the coefficient
//! map to obtain a fresh set of constants.

use std::fmt;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

/// `4 / (5 * 2^22)`
pub const K_C0: f64 = 4.0 / (5.0 * (1u64 << 22) as f64);
/// `4 / (5 * 2^26)`
pub const K_C1: f64 = 4.0 / (5.0 * (1u64 << 26) as f64);
/// `4 / (5 * 2^46)`
pub const K_C2: f64 = 4.0 / (5.0 * (1u64 << 46) as f64);

const TWO_POW_15: f64 = (1u64 << 15) as f64;
const TWO_POW_16: f64 = (1u64 << 16) as f64;

/// Maximum reference ramp rate a chamber sweep may have, in °C per minute.
pub const MAX_RAMP_C_PER_MIN: f64 = 0.2;
/// Temperature envelope of the climate chamber in °C.
pub const CHAMBER_RANGE_C: (f64, f64) = (-40.0, 60.0);
/// Spread of bath readings at or above which an offset calibration is refused.
pub const MAX_BATH_SPREAD_K: f64 = 0.5;
/// Offsets are stored on a 2^-20 K grid so that applying and removing one
/// is exact for every reading a DS18B20 can produce.
const OFFSET_GRID: f64 = (1u64 << 20) as f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibError {
    #[error("negative discriminant c1^2 - 4*c0*c2 = {0:e}")]
    NegativeDiscriminant(f64),
    #[error("polynomial is constant (c1 = c2 = 0); constants are underdetermined")]
    Underdetermined,
    #[error("need at least 3 sweep points, got {0}")]
    InsufficientData(usize),
    #[error("least-squares system is rank deficient ({distinct} distinct raw values)")]
    SingularFit { distinct: usize },
    #[error("no real raw value maps to {0} °C")]
    RangeUnreachable(f64),
    #[error("ramp of {rate:.3} °C/min between points {index} and {next} exceeds {max} °C/min", next = .index + 1, max = MAX_RAMP_C_PER_MIN)]
    RampTooFast { index: usize, rate: f64 },
    #[error("reference temperature {t_ref} °C at point {index} is outside the chamber range")]
    OutOfChamberRange { index: usize, t_ref: f64 },
    #[error("elapsed time must strictly increase (point {0})")]
    NonMonotonicTime(usize),
    #[error("non-finite value at point {0}")]
    NonFinite(usize),
    #[error("no readings supplied")]
    EmptyReadings,
    #[error("bath unstable: reading spread {0:.3} K >= 0.5 K")]
    UnstableBath(f64),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Per-device BME280 temperature constants. `d1` is dimensionless, `d2` and
/// `d3` are in °C.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize, serde::Serialize)]
pub struct DeviceConstants {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

impl DeviceConstants {
    pub const fn new(d1: f64, d2: f64, d3: f64) -> Self {
        DeviceConstants { d1, d2, d3 }
    }

    pub fn is_finite(&self) -> bool {
        self.d1.is_finite() && self.d2.is_finite() && self.d3.is_finite()
    }

    pub fn to_poly(&self) -> CompensationPoly {
        poly_from_constants(self)
    }
}

impl fmt::Display for DeviceConstants {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.d1, self.d2, self.d3)
    }
}

impl std::str::FromStr for DeviceConstants {
    type Err = CalibError;

    /// Parses `d1,d2,d3`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(CalibError::Parse(format!("expected d1,d2,d3, got {s:?}")));
        }
        let mut vals = [0.0; 3];
        for (v, p) in vals.iter_mut().zip(&parts) {
            *v = p
                .parse()
                .map_err(|_| CalibError::Parse(format!("bad number {p:?}")))?;
        }
        Ok(DeviceConstants::new(vals[0], vals[1], vals[2]))
    }
}

/// `T = c0 + c1*raw + c2*raw^2`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompensationPoly {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl CompensationPoly {
    pub const fn new(c0: f64, c1: f64, c2: f64) -> Self {
        CompensationPoly { c0, c1, c2 }
    }

    pub fn discriminant(&self) -> f64 {
        self.c1 * self.c1 - 4.0 * self.c0 * self.c2
    }

    pub fn eval(&self, t_raw: f64) -> f64 {
        compensate(self, t_raw)
    }

    /// Raw value at which the polynomial reads `temp_c`, taking the root on
    /// the increasing branch. `None` if no real root exists there.
    pub fn raw_for(&self, temp_c: f64) -> Option<f64> {
        let CompensationPoly { c0, c1, c2 } = *self;
        let disc = c1 * c1 - 4.0 * c2 * (c0 - temp_c);
        if disc.is_nan() || disc < 0.0 {
            return None;
        }
        let s = disc.sqrt();
        // Both forms give the root where c1 + 2*c2*x = +sqrt(disc); pick the
        // one without cancellation.
        let x = if c1 >= 0.0 {
            if c1 + s == 0.0 {
                return None;
            }
            2.0 * (temp_c - c0) / (c1 + s)
        } else {
            if c2 == 0.0 {
                return None;
            }
            (s - c1) / (2.0 * c2)
        };
        x.is_finite().then_some(x)
    }
}

pub fn poly_from_constants(d: &DeviceConstants) -> CompensationPoly {
    let DeviceConstants { d1, d2, d3 } = *d;
    CompensationPoly {
        c0: -K_C0 * (d1 * d2 - d1 * d1 * d3 / TWO_POW_16),
        c1: K_C1 * (d2 - d1 * d3 / TWO_POW_15),
        c2: K_C2 * d3,
    }
}

/// Which branch [`invert`] took.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InversionBranch {
    Quadratic,
    /// `c2 == 0`: the polynomial is linear and `d3` is forced to zero.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inversion {
    pub constants: DeviceConstants,
    pub branch: InversionBranch,
}

/// Inverts [`poly_from_constants`].
///
/// `c1^2 - 4*c0*c2` expands to `(K_C1 * d2)^2`, so `d2` is recovered from its
/// square root and `d1` is the root of the `c0` relation that reproduces the
/// forward map: `d1 = (sqrt(disc) - c1) / (32*c2)`. That expression is
/// evaluated as `-c0 / (8*(c1 + sqrt(disc)))` when `c1 >= 0`, which is the same
/// value without cancellation for small `c2`.
pub fn invert(c: &CompensationPoly) -> Result<Inversion, CalibError> {
    let CompensationPoly { c0, c1, c2 } = *c;
    if c2 == 0.0 {
        let d2 = c1 / K_C1;
        if d2 == 0.0 {
            return Err(CalibError::Underdetermined);
        }
        let d1 = -c0 / (K_C0 * d2);
        return Ok(Inversion {
            constants: DeviceConstants::new(d1, d2, 0.0),
            branch: InversionBranch::Linear,
        });
    }
    let disc = c.discriminant();
    if disc < 0.0 || disc.is_nan() {
        return Err(CalibError::NegativeDiscriminant(disc));
    }
    let s = disc.sqrt();
    let d1 = if c1 >= 0.0 && c1 + s > 0.0 {
        -c0 / (8.0 * (c1 + s))
    } else {
        (s - c1) / (32.0 * c2)
    };
    Ok(Inversion {
        constants: DeviceConstants::new(d1, s / K_C1, c2 / K_C2),
        branch: InversionBranch::Quadratic,
    })
}

pub fn constants_from_poly(c: &CompensationPoly) -> Result<DeviceConstants, CalibError> {
    invert(c).map(|i| i.constants)
}

pub fn compensate(c: &CompensationPoly, t_raw: f64) -> f64 {
    c.c0 + c.c1 * t_raw + c.c2 * t_raw * t_raw
}

/// One climate-chamber sample.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct SweepPoint {
    #[serde(rename = "t_elapsed_s")]
    pub t_elapsed: f64,
    pub t_ref_c: f64,
    pub t_raw: f64,
}

/// A validated climate-chamber sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ChamberSweep {
    points: Vec<SweepPoint>,
}

impl ChamberSweep {
    /// Validates ordering, the chamber envelope and, unless `force` is set,
    /// the ramp-rate limit.
    pub fn new(points: Vec<SweepPoint>, force: bool) -> Result<Self, CalibError> {
        for (i, p) in points.iter().enumerate() {
            if !(p.t_elapsed.is_finite() && p.t_ref_c.is_finite() && p.t_raw.is_finite()) {
                return Err(CalibError::NonFinite(i));
            }
            if p.t_ref_c < CHAMBER_RANGE_C.0 || p.t_ref_c > CHAMBER_RANGE_C.1 {
                return Err(CalibError::OutOfChamberRange { index: i, t_ref: p.t_ref_c });
            }
        }
        for (i, w) in points.windows(2).enumerate() {
            let dt = w[1].t_elapsed - w[0].t_elapsed;
            if dt <= 0.0 {
                return Err(CalibError::NonMonotonicTime(i + 1));
            }
            let rate = (w[1].t_ref_c - w[0].t_ref_c).abs() / dt * 60.0;
            // 1e-9 slack absorbs decimal round-off in CSV inputs sitting
            // exactly on the limit.
            if !force && rate > MAX_RAMP_C_PER_MIN + 1e-9 {
                return Err(CalibError::RampTooFast { index: i, rate });
            }
        }
        Ok(ChamberSweep { points })
    }

    /// Reads the `t_elapsed_s,t_ref_c,t_raw` CSV format (`#` starts a comment).
    pub fn from_csv_reader<R: Read>(reader: R, force: bool) -> Result<Self, CalibError> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let points = rdr
            .deserialize()
            .collect::<Result<Vec<SweepPoint>, _>>()
            .map_err(|e| CalibError::Parse(e.to_string()))?;
        Self::new(points, force)
    }

    pub fn from_csv_path(path: &Path, force: bool) -> Result<Self, CalibError> {
        let f = std::fs::File::open(path)
            .map_err(|e| CalibError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_csv_reader(f, force)
    }

    pub fn points(&self) -> &[SweepPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn distinct_count(mut xs: Vec<f64>) -> usize {
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    xs.len()
}

/// Ordinary least-squares quadratic through `(t_raw, t_ref)`.
///
/// Abscissae are centred and scaled before the solve; raw counts are around
/// 5e5 and the unscaled Vandermonde matrix is too ill-conditioned for f64.
pub fn fit_poly(sweep: &ChamberSweep) -> Result<CompensationPoly, CalibError> {
    let pts = sweep.points();
    if pts.len() < 3 {
        return Err(CalibError::InsufficientData(pts.len()));
    }
    let distinct = distinct_count(pts.iter().map(|p| p.t_raw).collect());
    if distinct < 3 {
        return Err(CalibError::SingularFit { distinct });
    }
    let n = pts.len();
    let mean = pts.iter().map(|p| p.t_raw).sum::<f64>() / n as f64;
    let half = pts
        .iter()
        .map(|p| (p.t_raw - mean).abs())
        .fold(0.0, f64::max);
    let a = DMatrix::from_fn(n, 3, |i, j| {
        let u = (pts[i].t_raw - mean) / half;
        u.powi(j as i32)
    });
    let b = DVector::from_iterator(n, pts.iter().map(|p| p.t_ref_c));
    let svd = a.svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    if sv.min() <= smax * 1e-12 {
        return Err(CalibError::SingularFit { distinct });
    }
    let x = svd
        .solve(&b, 0.0)
        .map_err(|_| CalibError::SingularFit { distinct })?;
    let (a0, a1, mut a2) = (x[0], x[1], x[2]);
    // Curvature at round-off level over the scaled range is a linear sensor.
    if a2.abs() <= 1e-12 * a0.abs().max(a1.abs()).max(1.0) {
        a2 = 0.0;
    }
    // T = a0 + a1*u + a2*u^2 with u = (raw - mean)/half
    let h2 = half * half;
    Ok(CompensationPoly {
        c0: a0 - a1 * mean / half + a2 * mean * mean / h2,
        c1: a1 / half - 2.0 * a2 * mean / h2,
        c2: a2 / h2,
    })
}

/// Largest absolute residual of `poly` over the sweep, in K.
pub fn max_residual(poly: &CompensationPoly, sweep: &ChamberSweep) -> f64 {
    sweep
        .points()
        .iter()
        .map(|p| (compensate(poly, p.t_raw) - p.t_ref_c).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recalibration {
    pub constants: DeviceConstants,
    pub poly: CompensationPoly,
    pub branch: InversionBranch,
    pub max_residual_k: f64,
}

impl Recalibration {
    /// Flat `key=value` report.
    pub fn report(&self) -> String {
        format!(
            "d1={}\nd2={}\nd3={}\nmax_residual_k={}\n",
            self.constants.d1, self.constants.d2, self.constants.d3, self.max_residual_k
        )
    }
}

pub fn recalibrate(sweep: &ChamberSweep) -> Result<DeviceConstants, CalibError> {
    recalibrate_detailed(sweep).map(|r| r.constants)
}

pub fn recalibrate_detailed(sweep: &ChamberSweep) -> Result<Recalibration, CalibError> {
    let poly = fit_poly(sweep)?;
    let inv = invert(&poly)?;
    Ok(Recalibration {
        constants: inv.constants,
        poly,
        branch: inv.branch,
        max_residual_k: max_residual(&poly, sweep),
    })
}

/// Error of the factory calibration at the two ends of a temperature range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviationRange {
    pub at_lo: f64,
    pub at_hi: f64,
}

impl DeviationRange {
    pub fn negated(&self) -> Self {
        DeviationRange { at_lo: -self.at_lo, at_hi: -self.at_hi }
    }
}

impl fmt::Display for DeviationRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // avoid printing "-0.0"
        let tidy = |v: f64| if v.abs() < 0.05 { 0.0 } else { v };
        write!(f, "{:.1} .. {:.1}", tidy(self.at_lo), tidy(self.at_hi))
    }
}

/// For each endpoint `T`, finds the raw count at which the fresh calibration
/// reads `T` and reports `factory(raw) - T`.
pub fn deviation_range(
    factory: &DeviceConstants,
    fresh: &DeviceConstants,
    t_lo: f64,
    t_hi: f64,
) -> Result<DeviationRange, CalibError> {
    let fp = factory.to_poly();
    let np = fresh.to_poly();
    let at = |t: f64| -> Result<f64, CalibError> {
        let raw = np.raw_for(t).ok_or(CalibError::RangeUnreachable(t))?;
        Ok(compensate(&fp, raw) - t)
    };
    if factory == fresh {
        at(t_lo)?;
        at(t_hi)?;
        return Ok(DeviationRange { at_lo: 0.0, at_hi: 0.0 });
    }
    Ok(DeviationRange { at_lo: at(t_lo)?, at_hi: at(t_hi)? })
}

/// DS18B20 single-point offset calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetCalibration {
    pub sensor_id: u64,
    pub offset: f64,
    pub reference_temp: f64,
    pub n_samples: usize,
}

impl OffsetCalibration {
    pub fn apply(&self, reading: f64) -> f64 {
        reading + self.offset
    }

    pub fn remove(&self, corrected: f64) -> f64 {
        corrected - self.offset
    }
}

pub fn ds18b20_offset(readings: &[f64], reference: f64) -> Result<OffsetCalibration, CalibError> {
    ds18b20_offset_for(0, readings, reference)
}

pub fn ds18b20_offset_for(
    sensor_id: u64,
    readings: &[f64],
    reference: f64,
) -> Result<OffsetCalibration, CalibError> {
    if readings.is_empty() {
        return Err(CalibError::EmptyReadings);
    }
    let (lo, hi) = readings
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    let spread = hi - lo;
    if spread.is_nan() || spread >= MAX_BATH_SPREAD_K {
        return Err(CalibError::UnstableBath(spread));
    }
    let mean = readings.iter().sum::<f64>() / readings.len() as f64;
    let offset = ((reference - mean) * OFFSET_GRID).round() / OFFSET_GRID;
    Ok(OffsetCalibration {
        sensor_id,
        offset,
        reference_temp: reference,
        n_samples: readings.len(),
    })
}

/// Reads bath readings from a CSV file. A single column of numbers (header
/// optional) or a `reading_c` column are accepted; `#` starts a comment.
pub fn read_readings_csv<R: Read>(reader: R) -> Result<Vec<f64>, CalibError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut out = Vec::new();
    let mut column = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CalibError::Parse(e.to_string()))?;
        if i == 0 {
            if let Some(pos) = rec.iter().position(|f| f == "reading_c") {
                column = pos;
                continue;
            }
            if rec.get(0).map(|f| f.parse::<f64>().is_err()).unwrap_or(false) {
                continue;
            }
        }
        let field = rec
            .get(column)
            .ok_or_else(|| CalibError::Parse(format!("row {} has no column {column}", i + 1)))?;
        if field.is_empty() {
            continue;
        }
        out.push(
            field
                .parse()
                .map_err(|_| CalibError::Parse(format!("row {}: bad number {field:?}", i + 1)))?,
        );
    }
    Ok(out)
}
