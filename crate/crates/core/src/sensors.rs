//! Behavioral sensor models: first-order thermal lag, per-device offset
//! error, quantization and raw-value generation.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::calibration::{CompensationPoly, DeviceConstants};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensorKind {
    #[serde(alias = "DS18B20")]
    Ds18b20,
    #[serde(alias = "HYT271", alias = "hyt-271")]
    Hyt271,
    #[serde(alias = "BME280")]
    Bme280,
    #[serde(alias = "flow_meter", alias = "flow")]
    FlowMeter,
    Leak,
}

impl SensorKind {
    pub fn name(self) -> &'static str {
        match self {
            SensorKind::Ds18b20 => "ds18b20",
            SensorKind::Hyt271 => "hyt271",
            SensorKind::Bme280 => "bme280",
            SensorKind::FlowMeter => "flow-meter",
            SensorKind::Leak => "leak",
        }
    }

    pub fn spec(self) -> SensorSpec {
        catalog(self)
    }
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SensorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ds18b20" => Ok(SensorKind::Ds18b20),
            "hyt271" | "hyt-271" => Ok(SensorKind::Hyt271),
            "bme280" => Ok(SensorKind::Bme280),
            "flow-meter" | "flow_meter" | "flow" => Ok(SensorKind::FlowMeter),
            "leak" => Ok(SensorKind::Leak),
            other => Err(format!("unknown sensor kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Quantization {
    Kelvin(f64),
    Counts(u32),
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorSpec {
    pub kind: SensorKind,
    /// Time constant in still air, seconds. `None` for sensors without a
    /// thermal response.
    pub tau_still_air: Option<f64>,
    pub tau_airflow: Option<f64>,
    /// Temperature accuracy, ±K.
    pub accuracy: f64,
    pub quantization: Quantization,
}

impl SensorSpec {
    pub fn tau(&self, airflow: bool) -> Option<f64> {
        if airflow {
            self.tau_airflow.or(self.tau_still_air)
        } else {
            self.tau_still_air
        }
    }
}

pub const HYT271_CODE_MAX: f64 = ((1 << 14) - 1) as f64;

pub fn catalog(kind: SensorKind) -> SensorSpec {
    match kind {
        SensorKind::Ds18b20 => SensorSpec {
            kind,
            tau_still_air: Some(90.0),
            tau_airflow: None,
            accuracy: 0.5,
            quantization: Quantization::Kelvin(0.0625),
        },
        SensorKind::Hyt271 => SensorSpec {
            kind,
            tau_still_air: Some(180.0),
            tau_airflow: Some(4.0),
            accuracy: 0.2,
            quantization: Quantization::Kelvin(165.0 / HYT271_CODE_MAX),
        },
        SensorKind::Bme280 => SensorSpec {
            kind,
            tau_still_air: Some(270.0),
            tau_airflow: Some(1.0),
            accuracy: 1.0,
            quantization: Quantization::Counts(1),
        },
        SensorKind::FlowMeter => SensorSpec {
            kind,
            tau_still_air: None,
            tau_airflow: None,
            accuracy: 0.0,
            quantization: Quantization::Counts(1),
        },
        SensorKind::Leak => SensorSpec {
            kind,
            tau_still_air: None,
            tau_airflow: None,
            accuracy: 0.0,
            quantization: Quantization::None,
        },
    }
}

/// Exact solution of `dx/dt = (target - x)/tau` over `dt`.
pub fn lag_update(state: f64, target: f64, dt: f64, tau: f64) -> f64 {
    if tau <= 0.0 {
        return target;
    }
    state + (target - state) * -(-dt / tau).exp_m1()
}

/// Per-device offset error: a zero-mean Gaussian with sigma = accuracy/2,
/// truncated to ±accuracy by rejection. Deterministic in `seed`.
pub fn sample_offset_error(kind: SensorKind, seed: u64) -> f64 {
    let accuracy = catalog(kind).accuracy;
    if accuracy <= 0.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, accuracy / 2.0).expect("positive sigma");
    loop {
        let x: f64 = normal.sample(&mut rng);
        if x.abs() <= accuracy {
            return x;
        }
    }
}

/// Environment seen by one sensor at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnvSample {
    pub temp_c: f64,
    pub rh_pct: f64,
    pub pressure_hpa: f64,
    pub flow_pulses_per_s: f64,
    pub wet: bool,
}

/// A piecewise-linear schedule over simulated seconds, held constant outside
/// its knots.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(transparent)]
pub struct Schedule(Vec<(f64, f64)>);

impl Schedule {
    pub fn constant(v: f64) -> Self {
        Schedule(vec![(0.0, v)])
    }

    /// Knots must be sorted by time; an empty schedule is rejected.
    pub fn new(mut knots: Vec<(f64, f64)>) -> Result<Self, String> {
        if knots.is_empty() {
            return Err("schedule needs at least one point".into());
        }
        if knots.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
            return Err("schedule values must be finite".into());
        }
        knots.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Schedule(knots))
    }

    pub fn at(&self, t: f64) -> f64 {
        let k = &self.0;
        if k.is_empty() {
            return 0.0;
        }
        if t <= k[0].0 {
            return k[0].1;
        }
        for w in k.windows(2) {
            let ((t0, v0), (t1, v1)) = (w[0], w[1]);
            if t <= t1 {
                if t1 == t0 {
                    return v1;
                }
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
            }
        }
        k[k.len() - 1].1
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.0
    }
}

/// Step-wise leak schedule: `(time_s, wet)` events.
#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(transparent)]
pub struct LeakSchedule(Vec<(f64, bool)>);

impl LeakSchedule {
    pub fn new(mut events: Vec<(f64, bool)>) -> Self {
        events.sort_by(|a, b| a.0.total_cmp(&b.0));
        LeakSchedule(events)
    }

    pub fn at(&self, t: f64) -> bool {
        self.0.iter().take_while(|(te, _)| *te <= t).last().map(|e| e.1).unwrap_or(false)
    }
}

fn default_temp() -> Schedule {
    Schedule::constant(22.0)
}
fn default_rh() -> Schedule {
    Schedule::constant(40.0)
}
fn default_pressure() -> Schedule {
    Schedule::constant(1013.25)
}
fn default_flow() -> Schedule {
    Schedule::constant(0.0)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct EnvironmentProfile {
    #[serde(default = "default_temp")]
    pub temperature: Schedule,
    #[serde(default = "default_rh")]
    pub humidity: Schedule,
    #[serde(default = "default_pressure")]
    pub pressure: Schedule,
    #[serde(default = "default_flow")]
    pub flow_rate: Schedule,
    #[serde(default)]
    pub leak: LeakSchedule,
}

impl Default for EnvironmentProfile {
    fn default() -> Self {
        EnvironmentProfile {
            temperature: default_temp(),
            humidity: default_rh(),
            pressure: default_pressure(),
            flow_rate: default_flow(),
            leak: LeakSchedule::default(),
        }
    }
}

impl EnvironmentProfile {
    pub fn sample(&self, t_s: f64) -> EnvSample {
        EnvSample {
            temp_c: self.temperature.at(t_s),
            rh_pct: self.humidity.at(t_s),
            pressure_hpa: self.pressure.at(t_s),
            flow_pulses_per_s: self.flow_rate.at(t_s).max(0.0),
            wet: self.leak.at(t_s),
        }
    }
}

/// Raw output of a sensor as its bus interface delivers it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RawReading {
    /// Temperature register, 1/16 K two's complement.
    Ds18b20(i16),
    Hyt271 { t_code: u16, rh_code: u16 },
    /// 20-bit temperature ADC count plus the pressure channel, which is
    /// passed through already compensated.
    Bme280 { t_raw: u32, pressure_hpa: f64 },
    FlowMeter(u64),
    Leak(bool),
}

pub fn ds18b20_quantize(temp_c: f64) -> i16 {
    (temp_c.clamp(-55.0, 125.0) * 16.0).floor() as i16
}

pub fn ds18b20_celsius(sixteenths: i16) -> f64 {
    sixteenths as f64 / 16.0
}

pub fn hyt271_t_code(temp_c: f64) -> u16 {
    ((temp_c.clamp(-40.0, 125.0) + 40.0) / 165.0 * HYT271_CODE_MAX).round() as u16
}

pub fn hyt271_rh_code(rh: f64) -> u16 {
    (rh.clamp(0.0, 100.0) / 100.0 * HYT271_CODE_MAX).round() as u16
}

pub fn hyt271_celsius(code: u16) -> f64 {
    code as f64 / HYT271_CODE_MAX * 165.0 - 40.0
}

pub fn hyt271_rh(code: u16) -> f64 {
    code as f64 / HYT271_CODE_MAX * 100.0
}

/// Liters per flow-meter pulse.
pub const DEFAULT_LITERS_PER_PULSE: f64 = 1.0;

/// One simulated physical sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorInstance {
    pub spec: SensorSpec,
    pub id: u64,
    pub airflow: bool,
    /// Internal first-order filter state, °C.
    pub lag_state: f64,
    /// Lagged relative humidity (HYT-271), %.
    pub rh_state: f64,
    pub pressure_hpa: f64,
    pub offset_error: f64,
    /// Constants stored in the device and used by firmware to compensate.
    pub device_constants: Option<DeviceConstants>,
    /// Constants describing the physical response; defaults to the stored ones.
    pub true_constants: Option<DeviceConstants>,
    pub pulses: u64,
    pulse_fraction: f64,
    pub wet: bool,
}

impl SensorInstance {
    pub fn new(kind: SensorKind, id: u64, initial: &EnvSample, offset_error: f64) -> Self {
        SensorInstance {
            spec: catalog(kind),
            id,
            airflow: false,
            lag_state: initial.temp_c,
            rh_state: initial.rh_pct,
            pressure_hpa: initial.pressure_hpa,
            offset_error,
            device_constants: None,
            true_constants: None,
            pulses: 0,
            pulse_fraction: 0.0,
            wet: initial.wet,
        }
    }

    pub fn with_airflow(mut self, airflow: bool) -> Self {
        self.airflow = airflow;
        self
    }

    pub fn with_constants(mut self, stored: DeviceConstants, actual: Option<DeviceConstants>) -> Self {
        self.device_constants = Some(stored);
        self.true_constants = actual;
        self
    }

    pub fn kind(&self) -> SensorKind {
        self.spec.kind
    }

    /// Temperature the sensing element reports before quantization.
    pub fn indicated_temp(&self) -> f64 {
        self.lag_state + self.offset_error
    }

    pub fn step(&mut self, env: &EnvSample, dt: f64) {
        debug_assert!(dt > 0.0);
        if let Some(tau) = self.spec.tau(self.airflow) {
            self.lag_state = lag_update(self.lag_state, env.temp_c, dt, tau);
            self.rh_state = lag_update(self.rh_state, env.rh_pct, dt, tau);
        }
        self.pressure_hpa = env.pressure_hpa;
        match self.spec.kind {
            SensorKind::FlowMeter => {
                self.pulse_fraction += env.flow_pulses_per_s * dt;
                let whole = self.pulse_fraction.floor();
                self.pulses += whole as u64;
                self.pulse_fraction -= whole;
            }
            SensorKind::Leak => self.wet = env.wet,
            _ => {}
        }
    }

    pub fn read_raw(&self) -> RawReading {
        match self.spec.kind {
            SensorKind::Ds18b20 => RawReading::Ds18b20(ds18b20_quantize(self.indicated_temp())),
            SensorKind::Hyt271 => RawReading::Hyt271 {
                t_code: hyt271_t_code(self.indicated_temp()),
                rh_code: hyt271_rh_code(self.rh_state),
            },
            SensorKind::Bme280 => {
                let physical = self
                    .true_constants
                    .or(self.device_constants)
                    .unwrap_or(DeviceConstants::new(28000.0, 26000.0, 50.0));
                RawReading::Bme280 {
                    t_raw: bme280_raw(&physical.to_poly(), self.indicated_temp()),
                    pressure_hpa: self.pressure_hpa,
                }
            }
            SensorKind::FlowMeter => RawReading::FlowMeter(self.pulses),
            SensorKind::Leak => RawReading::Leak(self.wet),
        }
    }
}

/// ADC count at which `poly` reads `temp_c`, rounded to the 20-bit range.
pub fn bme280_raw(poly: &CompensationPoly, temp_c: f64) -> u32 {
    let raw = poly.raw_for(temp_c).unwrap_or(0.0);
    raw.round().clamp(0.0, ((1 << 20) - 1) as f64) as u32
}
