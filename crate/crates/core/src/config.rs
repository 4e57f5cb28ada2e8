//! Topology file: SAUs, their ports and sensors, switch mapping, watchdog
//! timeouts, alarm rules, the room profile and storage tiers. TOML syntax.
//!
//! ```toml
//! seed = 7
//!
//! [collector]
//! listen = "127.0.0.1:4547"
//! switch = "127.0.0.1:4548"
//!
//! [[alarm]]
//! metric = "temp_c"
//! max = 35.0
//! debounce_ticks = 3
//!
//! [[sau]]
//! id = "sau-01"
//! switch_port = 1
//! [[sau.sensor]]
//! kind = "ds18b20"
//! port = 1
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;
use thiserror::Error;

use crate::collector::{AlarmRule, WatchdogConfig};
use crate::onewire::LoadModel;
use crate::poe::{DEFAULT_CYCLE_OFF_MS, DEFAULT_SWITCH_PORT};
use crate::protocol::DEFAULT_COLLECTOR_PORT;
use crate::sau::{mix, PortConfig, SauConfig, SauTimings, SensorConfig, PORT_COUNT};
use crate::sensors::EnvironmentProfile;
use crate::storage::{default_tiers, validate_tiers, TierSpec};

pub const CONFIG_ENV: &str = "ENVMON_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
    #[error("bad fault spec {spec:?}: {reason}")]
    Fault { spec: String, reason: String },
    #[error("no config file given and {CONFIG_ENV} is not set")]
    NoConfig,
}

fn default_listen() -> String {
    format!("127.0.0.1:{DEFAULT_COLLECTOR_PORT}")
}

fn default_switch_addr() -> String {
    format!("127.0.0.1:{DEFAULT_SWITCH_PORT}")
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectorSection {
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default = "default_switch_addr")]
    pub switch: String,
    #[serde(default)]
    pub storage_dir: Option<PathBuf>,
    #[serde(default)]
    pub event_log: Option<PathBuf>,
    /// Plain `http://` endpoint that receives alarm events as POST bodies.
    #[serde(default)]
    pub webhook: Option<String>,
    /// Wall-clock time of simulated second zero.
    #[serde(default)]
    pub epoch_ms: i64,
}

impl Default for CollectorSection {
    fn default() -> Self {
        CollectorSection {
            listen: default_listen(),
            switch: default_switch_addr(),
            storage_dir: None,
            event_log: None,
            webhook: None,
            epoch_ms: 0,
        }
    }
}

fn default_switch_ports() -> u16 {
    48
}

fn default_off_ms() -> u64 {
    DEFAULT_CYCLE_OFF_MS
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchSection {
    #[serde(default = "default_switch_ports")]
    pub ports: u16,
    #[serde(default)]
    pub event_log: Option<PathBuf>,
    #[serde(default = "default_off_ms")]
    pub cycle_off_ms: u64,
}

impl Default for SwitchSection {
    fn default() -> Self {
        SwitchSection { ports: default_switch_ports(), event_log: None, cycle_off_ms: DEFAULT_CYCLE_OFF_MS }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageSection {
    #[serde(default = "default_tiers", rename = "tier")]
    pub tiers: Vec<TierSpec>,
}

impl Default for StorageSection {
    fn default() -> Self {
        StorageSection { tiers: default_tiers() }
    }
}

fn default_firmware() -> String {
    "v1".into()
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SauSection {
    pub id: String,
    #[serde(default)]
    pub switch_port: Option<u16>,
    #[serde(default = "default_firmware")]
    pub firmware: String,
    #[serde(default)]
    pub ambient_offset_c: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub timings: Option<SauTimings>,
    #[serde(default, rename = "port")]
    pub ports: Vec<PortConfig>,
    #[serde(default, rename = "sensor")]
    pub sensors: Vec<SensorConfig>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub collector: CollectorSection,
    #[serde(default)]
    pub switch: SwitchSection,
    #[serde(default)]
    pub watchdog: WatchdogConfig,
    #[serde(default)]
    pub timings: SauTimings,
    #[serde(default)]
    pub onewire: LoadModel,
    #[serde(default, rename = "alarm")]
    pub alarms: Vec<AlarmRule>,
    #[serde(default)]
    pub environment: EnvironmentProfile,
    #[serde(default)]
    pub storage: StorageSection,
    #[serde(default, rename = "sau")]
    pub saus: Vec<SauSection>,
}

impl FromStr for Topology {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t: Topology = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }
}

impl Topology {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        text.parse().map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let mut ids = BTreeSet::new();
        let mut switch_ports = BTreeSet::new();
        for (i, s) in self.saus.iter().enumerate() {
            if !ids.insert(s.id.as_str()) {
                return bad(format!("SAU id {} declared twice", s.id));
            }
            if let Some(p) = s.switch_port {
                if p == 0 || p > self.switch.ports {
                    return bad(format!("{}: switch port {p} outside 1-{}", s.id, self.switch.ports));
                }
                if !switch_ports.insert(p) {
                    return bad(format!("{}: switch port {p} already used", s.id));
                }
            }
            self.sau_config(i).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        for r in &self.alarms {
            r.validate().map_err(ConfigError::Invalid)?;
        }
        validate_tiers(&self.storage.tiers).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let w = &self.watchdog;
        if w.stale_ms <= 0 || w.reset_grace_ms <= 0 || w.cycle_grace_ms <= 0 || w.backoff_base_ms <= 0 {
            return bad("watchdog timeouts must be positive".into());
        }
        if w.backoff_cap_ms < w.backoff_base_ms {
            return bad("watchdog backoff cap is below its base".into());
        }
        Ok(())
    }

    /// Emulator configuration for the `index`-th SAU. Seeds derive from the
    /// topology seed unless the unit pins its own.
    pub fn sau_config(&self, index: usize) -> SauConfig {
        let s = &self.saus[index];
        SauConfig {
            id: s.id.clone(),
            firmware: s.firmware.clone(),
            ports: s.ports.clone(),
            sensors: s.sensors.clone(),
            timings: s.timings.unwrap_or(self.timings),
            ambient_offset_c: s.ambient_offset_c,
            load_model: self.onewire,
            seed: s.seed.unwrap_or_else(|| mix(self.seed, index as u64 + 1)),
        }
    }

    pub fn sau_configs(&self) -> Vec<SauConfig> {
        (0..self.saus.len()).map(|i| self.sau_config(i)).collect()
    }

    /// The collector's view of its watchdog: the switch's cycle time wins.
    pub fn watchdog_config(&self) -> WatchdogConfig {
        WatchdogConfig { cycle_off_ms: self.switch.cycle_off_ms, ..self.watchdog }
    }

    /// A fleet of `n` identical units, each with `per_sau_metrics` channels.
    /// Used for load tests; channel count is rounded to what the sensor mix
    /// can provide.
    pub fn synthetic_fleet(n: usize, per_sau_metrics: usize, seed: u64) -> Topology {
        let mut t = Topology { seed, ..Topology::default() };
        t.switch.ports = t.switch.ports.max(n as u16);
        for i in 0..n {
            let mut sensors = Vec::new();
            let mut left = per_sau_metrics;
            // one BME280 (2 channels) on the shared I2C bus
            if left >= 2 {
                sensors.push(SensorConfig::new(crate::sensors::SensorKind::Bme280, 1));
                left -= 2;
            }
            // DS18B20s spread over ports 1-11, one channel each
            let mut serial = 1u64;
            while left > 0 {
                let port = ((serial - 1) % PORT_COUNT as u64) as u8 + 1;
                let mut s = SensorConfig::new(crate::sensors::SensorKind::Ds18b20, port);
                s.serial = Some(((i as u64) << 16) | serial);
                sensors.push(s);
                serial += 1;
                left -= 1;
            }
            t.saus.push(SauSection {
                id: format!("sau-{:02}", i + 1),
                switch_port: Some(i as u16 + 1),
                firmware: default_firmware(),
                ambient_offset_c: 0.0,
                seed: None,
                timings: None,
                ports: Vec::new(),
                sensors,
            });
        }
        t
    }
}

/// Explicit path first, then `ENVMON_CONFIG`.
pub fn resolve_config_path(explicit: Option<&Path>) -> Result<PathBuf, ConfigError> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    match std::env::var_os(CONFIG_ENV) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(ConfigError::NoConfig),
    }
}

/// Injected fault. Times are simulated seconds from the start of the run.
#[derive(Debug, Clone, PartialEq)]
pub enum Fault {
    WedgeMcu { sau: String, at_s: f64 },
    WedgeAgent { sau: String, at_s: f64 },
    Short { sau: String, port: u8, from_s: f64, to_s: f64 },
    CorruptSerial { sau: String, rate: f64 },
}

impl Fault {
    pub fn sau(&self) -> &str {
        match self {
            Fault::WedgeMcu { sau, .. }
            | Fault::WedgeAgent { sau, .. }
            | Fault::Short { sau, .. }
            | Fault::CorruptSerial { sau, .. } => sau,
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fault::WedgeMcu { sau, at_s } => write!(f, "wedge-mcu:{sau}:{at_s}"),
            Fault::WedgeAgent { sau, at_s } => write!(f, "wedge-agent:{sau}:{at_s}"),
            Fault::Short { sau, port, from_s, to_s } => write!(f, "short:{sau}:{port}:{from_s}-{to_s}"),
            Fault::CorruptSerial { sau, rate } => write!(f, "corrupt-serial:{sau}:{rate}"),
        }
    }
}

impl FromStr for Fault {
    type Err = ConfigError;

    fn from_str(spec: &str) -> Result<Self, Self::Err> {
        let err = |reason: &str| ConfigError::Fault { spec: spec.to_string(), reason: reason.to_string() };
        let time = |s: &str| -> Result<f64, ConfigError> {
            match s.parse::<f64>() {
                Ok(t) if t.is_finite() && t >= 0.0 => Ok(t),
                _ => Err(err("time must be a non-negative number of seconds")),
            }
        };
        let parts: Vec<&str> = spec.split(':').collect();
        let sau = |s: &str| -> Result<String, ConfigError> {
            if s.is_empty() {
                Err(err("missing SAU id"))
            } else {
                Ok(s.to_string())
            }
        };
        match parts.as_slice() {
            ["wedge-mcu", s, t] => Ok(Fault::WedgeMcu { sau: sau(s)?, at_s: time(t)? }),
            ["wedge-agent", s, t] => Ok(Fault::WedgeAgent { sau: sau(s)?, at_s: time(t)? }),
            ["short", s, p, span] => {
                let port: u8 = p.parse().map_err(|_| err("bad port"))?;
                if !(1..=PORT_COUNT).contains(&port) {
                    return Err(err("port must be 1-11"));
                }
                let (a, b) = span.split_once('-').ok_or_else(|| err("expected <t1>-<t2>"))?;
                let (from_s, to_s) = (time(a)?, time(b)?);
                if to_s < from_s {
                    return Err(err("short ends before it starts"));
                }
                Ok(Fault::Short { sau: sau(s)?, port, from_s, to_s })
            }
            ["corrupt-serial", s, r] => match r.parse::<f64>() {
                Ok(rate) if (0.0..=1.0).contains(&rate) => Ok(Fault::CorruptSerial { sau: sau(s)?, rate }),
                _ => Err(err("rate must be within 0..1")),
            },
            _ => Err(err("unknown fault kind")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Metric;
    use crate::sensors::SensorKind;

    const SAMPLE: &str = r#"
seed = 9

[collector]
listen = "0.0.0.0:4547"

[watchdog]
stale_ms = 5000

[[alarm]]
metric = "temp_c"
max = 35.0
debounce_ticks = 3

[[alarm]]
metric = "leak"
leak = true

[environment]
temperature = [[0.0, 21.0], [600.0, 25.0]]

[[storage.tier]]
step_s = 1
capacity = 60
consolidation = "last"

[[sau]]
id = "sau-01"
switch_port = 3

[[sau.port]]
port = 2
radius_m = 12.0

[[sau.sensor]]
kind = "ds18b20"
port = 2
serial = 0x15a2b

[[sau.sensor]]
kind = "bme280"
port = 1
constants = { d1 = 28205.0, d2 = 26387.0, d3 = 50.0 }
"#;

    #[test]
    fn parses_sample() {
        let t: Topology = SAMPLE.parse().unwrap();
        assert_eq!(t.seed, 9);
        assert_eq!(t.collector.listen, "0.0.0.0:4547");
        assert_eq!(t.collector.switch, "127.0.0.1:4548");
        assert_eq!(t.watchdog.stale_ms, 5000);
        assert_eq!(t.watchdog.reset_grace_ms, 30_000);
        assert_eq!(t.alarms.len(), 2);
        assert_eq!(t.alarms[0].metric, Metric::TempC);
        assert_eq!(t.alarms[1].debounce_ticks, 1);
        assert_eq!(t.storage.tiers.len(), 1);
        assert!((t.environment.sample(300.0).temp_c - 23.0).abs() < 1e-12);
        let c = t.sau_config(0);
        assert_eq!(c.sensors.len(), 2);
        assert_eq!(c.sensors[0].kind, SensorKind::Ds18b20);
        assert_eq!(c.port(2).radius_m, 12.0);
        assert_eq!(c.seed, t.sau_config(0).seed);
    }

    #[test]
    fn rejects_bad_topologies() {
        let dup = "[[sau]]\nid = \"a\"\n[[sau]]\nid = \"a\"\n";
        assert!(matches!(dup.parse::<Topology>(), Err(ConfigError::Invalid(_))));
        let port = "[[sau]]\nid = \"a\"\nswitch_port = 1\n[[sau]]\nid = \"b\"\nswitch_port = 1\n";
        assert!(matches!(port.parse::<Topology>(), Err(ConfigError::Invalid(_))));
        let leak = "[[sau]]\nid = \"a\"\n[[sau.sensor]]\nkind = \"leak\"\nport = 9\n";
        assert!(matches!(leak.parse::<Topology>(), Err(ConfigError::Invalid(_))));
        let rule = "[[alarm]]\nmetric = \"temp_c\"\nmin = 5.0\nmax = 1.0\n";
        assert!(matches!(rule.parse::<Topology>(), Err(ConfigError::Invalid(_))));
        assert!(matches!("bogus = 1".parse::<Topology>(), Err(ConfigError::Parse(_))));
        assert!(matches!("[[alarm]]\nmetric = \"volts\"\n".parse::<Topology>(), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn fault_specs() {
        let cases = [
            ("wedge-mcu:sau-01:30", Fault::WedgeMcu { sau: "sau-01".into(), at_s: 30.0 }),
            ("wedge-agent:sau-02:12.5", Fault::WedgeAgent { sau: "sau-02".into(), at_s: 12.5 }),
            ("short:sau-01:4:10-20", Fault::Short { sau: "sau-01".into(), port: 4, from_s: 10.0, to_s: 20.0 }),
            ("corrupt-serial:sau-01:0.1", Fault::CorruptSerial { sau: "sau-01".into(), rate: 0.1 }),
        ];
        for (s, f) in cases {
            let parsed: Fault = s.parse().unwrap();
            assert_eq!(parsed, f);
            assert_eq!(parsed.to_string().parse::<Fault>().unwrap(), f);
        }
        for bad in ["wedge-mcu:sau-01", "short:sau-01:12:1-2", "short:sau-01:1:5-2", "corrupt-serial:s:2", "melt:s:1", "wedge-mcu::3"] {
            assert!(bad.parse::<Fault>().is_err(), "{bad}");
        }
    }

    #[test]
    fn synthetic_fleet_channel_count() {
        let t = Topology::synthetic_fleet(4, 16, 1);
        t.validate().unwrap();
        for c in t.sau_configs() {
            let channels: usize = c.sensors.iter().map(|s| if s.kind == SensorKind::Bme280 { 2 } else { 1 }).sum();
            assert_eq!(channels, 16);
        }
    }

    #[test]
    fn explicit_path_wins() {
        let p = resolve_config_path(Some(Path::new("x.toml"))).unwrap();
        assert_eq!(p, PathBuf::from("x.toml"));
    }
}
