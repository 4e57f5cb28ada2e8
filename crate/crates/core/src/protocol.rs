//! Line protocol between SAU agents and the collector.
//!
//! Telemetry (SAU -> collector), one record per line:
//!
//! ```text
//! v1 <sau_id> <seq> <timestamp_ms> <port> <sensor_id> <metric> <value> <unit>
//! ```
//!
//! Commands (collector -> SAU) on the same connection:
//!
//! ```text
//! cmd reset <sau_id>
//! cmd flash <sau_id> <image_id>
//! ```

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const PROTOCOL_VERSION: &str = "v1";
/// Longest line, newline included.
pub const MAX_LINE_BYTES: usize = 256;
pub const DEFAULT_COLLECTOR_PORT: u16 = 4547;
pub const MAX_PORT: u8 = 11;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("malformed line: {0}")]
    MalformedLine(String),
    #[error("bad number in field {field}: {value:?}")]
    BadNumber { field: &'static str, value: String },
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("invalid {field}: {value:?}")]
    InvalidField { field: &'static str, value: String },
    #[error("line of {0} bytes exceeds the 256 byte limit")]
    LineTooLong(usize),
    #[error("malformed command: {0}")]
    MalformedCommand(String),
}

/// Closed registry of metric names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    TempC,
    HumidityPct,
    PressureHpa,
    FlowPulses,
    Leak,
    Heartbeat,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::TempC,
        Metric::HumidityPct,
        Metric::PressureHpa,
        Metric::FlowPulses,
        Metric::Leak,
        Metric::Heartbeat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::TempC => "temp_c",
            Metric::HumidityPct => "humidity_pct",
            Metric::PressureHpa => "pressure_hpa",
            Metric::FlowPulses => "flow_pulses",
            Metric::Leak => "leak",
            Metric::Heartbeat => "heartbeat",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Metric::TempC => "c",
            Metric::HumidityPct => "pct",
            Metric::PressureHpa => "hpa",
            Metric::FlowPulses => "pulses",
            Metric::Leak | Metric::Heartbeat => "bool",
        }
    }

    /// One-byte code used inside serial frames.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Metric> {
        Metric::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| ProtocolError::UnknownMetric(s.to_string()))
    }
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_graphic())
}

fn check_token(field: &'static str, s: &str) -> Result<(), ProtocolError> {
    if valid_token(s) {
        Ok(())
    } else {
        Err(ProtocolError::InvalidField { field, value: s.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRecord {
    pub sau_id: String,
    pub seq: u64,
    pub timestamp_ms: i64,
    /// 0 for SAU-level metrics, otherwise the sensor port 1..=11.
    pub port: u8,
    /// `-` when not applicable.
    pub sensor_id: String,
    pub metric: Metric,
    pub value: f64,
}

impl TelemetryRecord {
    /// Builds a record, rejecting anything that could not go on the wire.
    pub fn new(
        sau_id: impl Into<String>,
        seq: u64,
        timestamp_ms: i64,
        port: u8,
        sensor_id: impl Into<String>,
        metric: Metric,
        value: f64,
    ) -> Result<Self, ProtocolError> {
        let r = TelemetryRecord {
            sau_id: sau_id.into(),
            seq,
            timestamp_ms,
            port,
            sensor_id: sensor_id.into(),
            metric,
            value,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn heartbeat(sau_id: &str, seq: u64, timestamp_ms: i64, tag: &str) -> Result<Self, ProtocolError> {
        TelemetryRecord::new(sau_id, seq, timestamp_ms, 0, tag, Metric::Heartbeat, 1.0)
    }

    pub fn unit(&self) -> &'static str {
        self.metric.unit()
    }

    /// `sau_id:port:sensor_id:metric`
    pub fn series_key(&self) -> String {
        format!("{}:{}:{}:{}", self.sau_id, self.port, self.sensor_id, self.metric)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        check_token("sau_id", &self.sau_id)?;
        check_token("sensor_id", &self.sensor_id)?;
        if self.port > MAX_PORT {
            return Err(ProtocolError::InvalidField { field: "port", value: self.port.to_string() });
        }
        if !self.value.is_finite() {
            return Err(ProtocolError::BadNumber { field: "value", value: self.value.to_string() });
        }
        let len = self.encoded_len();
        if len > MAX_LINE_BYTES {
            return Err(ProtocolError::LineTooLong(len));
        }
        Ok(())
    }

    fn encoded_len(&self) -> usize {
        self.render().len() + 1
    }

    fn render(&self) -> String {
        format!(
            "{PROTOCOL_VERSION} {} {} {} {} {} {} {} {}",
            self.sau_id,
            self.seq,
            self.timestamp_ms,
            self.port,
            self.sensor_id,
            self.metric,
            format_value(self.value),
            self.unit()
        )
    }

    pub fn encode(&self) -> Result<String, ProtocolError> {
        self.validate()?;
        let mut line = self.render();
        line.push('\n');
        Ok(line)
    }
}

/// Shortest decimal that parses back to the same `f64`; exponent form only
/// for magnitudes where plain digits would get long.
pub fn format_value(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn parse_num<T: FromStr>(field: &'static str, s: &str) -> Result<T, ProtocolError> {
    s.parse().map_err(|_| ProtocolError::BadNumber { field, value: s.to_string() })
}

pub fn decode(line: &str) -> Result<TelemetryRecord, ProtocolError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    if line.len() + 1 > MAX_LINE_BYTES {
        return Err(ProtocolError::LineTooLong(line.len() + 1));
    }
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.first() != Some(&PROTOCOL_VERSION) {
        return Err(ProtocolError::MalformedLine(format!(
            "expected version {PROTOCOL_VERSION}, got {:?}",
            fields.first().unwrap_or(&"")
        )));
    }
    if fields.len() != 9 {
        return Err(ProtocolError::MalformedLine(format!("expected 9 fields, got {}", fields.len())));
    }
    let metric: Metric = fields[6].parse()?;
    if fields[8] != metric.unit() {
        return Err(ProtocolError::MalformedLine(format!(
            "unit {:?} does not match metric {metric}",
            fields[8]
        )));
    }
    let value: f64 = parse_num("value", fields[7])?;
    if !value.is_finite() {
        return Err(ProtocolError::BadNumber { field: "value", value: fields[7].to_string() });
    }
    let record = TelemetryRecord {
        sau_id: fields[1].to_string(),
        seq: parse_num("seq", fields[2])?,
        timestamp_ms: parse_num("timestamp_ms", fields[3])?,
        port: parse_num("port", fields[4])?,
        sensor_id: fields[5].to_string(),
        metric,
        value,
    };
    record.validate()?;
    Ok(record)
}

/// Collector -> SAU command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Reset { sau_id: String },
    Flash { sau_id: String, image_id: String },
}

impl Command {
    pub fn sau_id(&self) -> &str {
        match self {
            Command::Reset { sau_id } | Command::Flash { sau_id, .. } => sau_id,
        }
    }

    pub fn encode(&self) -> Result<String, ProtocolError> {
        let line = match self {
            Command::Reset { sau_id } => {
                check_token("sau_id", sau_id)?;
                format!("cmd reset {sau_id}\n")
            }
            Command::Flash { sau_id, image_id } => {
                check_token("sau_id", sau_id)?;
                check_token("image_id", image_id)?;
                format!("cmd flash {sau_id} {image_id}\n")
            }
        };
        if line.len() > MAX_LINE_BYTES {
            return Err(ProtocolError::LineTooLong(line.len()));
        }
        Ok(line)
    }
}

pub fn decode_command(line: &str) -> Result<Command, ProtocolError> {
    let line = line.trim_end_matches(['\n', '\r']);
    if line.len() + 1 > MAX_LINE_BYTES {
        return Err(ProtocolError::LineTooLong(line.len() + 1));
    }
    let fields: Vec<&str> = line.split(' ').collect();
    let bad = || ProtocolError::MalformedCommand(line.to_string());
    match fields.as_slice() {
        ["cmd", "reset", sau] if valid_token(sau) => Ok(Command::Reset { sau_id: sau.to_string() }),
        ["cmd", "flash", sau, image] if valid_token(sau) && valid_token(image) => Ok(Command::Flash {
            sau_id: sau.to_string(),
            image_id: image.to_string(),
        }),
        _ => Err(bad()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heartbeat_line() {
        let r = TelemetryRecord::heartbeat("sau-01", 7, 1_700_000_000_000, "-").unwrap();
        assert_eq!(r.encode().unwrap(), "v1 sau-01 7 1700000000000 0 - heartbeat 1 bool\n");
    }

    #[test]
    fn temperature_line() {
        let r = TelemetryRecord::new("sau-01", 8, 1_700_000_001_000, 1, "28f00000015a2b", Metric::TempC, 20.0625)
            .unwrap();
        let line = r.encode().unwrap();
        assert_eq!(line, "v1 sau-01 8 1700000001000 1 28f00000015a2b temp_c 20.0625 c\n");
        assert_eq!(decode(&line).unwrap(), r);
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(decode("v1"), Err(ProtocolError::MalformedLine(_))));
        assert!(matches!(
            decode("v2 sau-01 7 1700000000000 0 - heartbeat 1 bool"),
            Err(ProtocolError::MalformedLine(_))
        ));
        assert!(matches!(
            decode("v1 sau-01 7 1700000000000 0 - bogus 1 bool"),
            Err(ProtocolError::UnknownMetric(m)) if m == "bogus"
        ));
        for v in ["NaN", "inf", "-inf", "1.2.3"] {
            let line = format!("v1 sau-01 7 1700000000000 1 x temp_c {v} c");
            assert!(matches!(decode(&line), Err(ProtocolError::BadNumber { field: "value", .. })), "{v}");
        }
        assert!(matches!(
            decode("v1 sau-01 x 1700000000000 0 - heartbeat 1 bool"),
            Err(ProtocolError::BadNumber { field: "seq", .. })
        ));
        assert!(matches!(
            decode("v1 sau-01 7 1700000000000 12 - heartbeat 1 bool"),
            Err(ProtocolError::InvalidField { field: "port", .. })
        ));
        assert!(matches!(
            decode("v1 sau-01 7 1700000000000 0 - heartbeat 1 c"),
            Err(ProtocolError::MalformedLine(_))
        ));
    }

    #[test]
    fn oversized_fields_rejected_at_construction() {
        let long = "s".repeat(250);
        assert!(matches!(
            TelemetryRecord::new(long, 1, 0, 0, "-", Metric::Heartbeat, 1.0),
            Err(ProtocolError::LineTooLong(_))
        ));
        assert!(matches!(
            TelemetryRecord::new("a b", 1, 0, 0, "-", Metric::Heartbeat, 1.0),
            Err(ProtocolError::InvalidField { field: "sau_id", .. })
        ));
        assert!(TelemetryRecord::new("a", 1, 0, 0, "-", Metric::TempC, f64::NAN).is_err());
    }

    #[test]
    fn value_formatting() {
        assert_eq!(format_value(1.0), "1");
        assert_eq!(format_value(20.0625), "20.0625");
        assert_eq!(format_value(1e-300), "1e-300");
        assert_eq!(format_value(-2.5e20), "-2.5e20");
        assert_eq!(format_value(-0.0), "-0");
    }

    #[test]
    fn commands() {
        let reset = Command::Reset { sau_id: "sau-01".into() };
        assert_eq!(reset.encode().unwrap(), "cmd reset sau-01\n");
        assert_eq!(decode_command("cmd reset sau-01\n").unwrap(), reset);
        let flash = Command::Flash { sau_id: "sau-01".into(), image_id: "v2".into() };
        assert_eq!(flash.encode().unwrap(), "cmd flash sau-01 v2\n");
        assert_eq!(decode_command(&flash.encode().unwrap()).unwrap(), flash);
        for bad in ["cmd", "cmd reset", "cmd reboot sau-01", "cmd flash sau-01", "cmd reset a b"] {
            assert!(decode_command(bad).is_err(), "{bad}");
        }
    }
}
