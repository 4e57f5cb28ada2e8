//! Sensor Aggregation Unit emulator.
//!
//! A SAU has two halves: an MCU that polls the sensors on its eleven RJ12
//! ports once per second, and a network agent that receives the MCU's serial
//! frames, turns them into telemetry records and adds a heartbeat. A short on
//! any sensor port browns out the MCU only; the agent keeps running. The agent
//! drives the MCU reset line, which also serves for in-system flashing.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::calibration::{compensate, DeviceConstants};
use crate::onewire::{decode_scratchpad, BusError, LoadModel, OneWireBus, RomCode, FAMILY_DS18B20};
use crate::protocol::{Command, Metric, TelemetryRecord};
use crate::sensors::{
    ds18b20_quantize, hyt271_celsius, hyt271_rh, sample_offset_error, EnvSample, RawReading, SensorInstance,
    SensorKind,
};

pub const PORT_COUNT: u8 = 11;
pub const LAST_ANALOG_PORT: u8 = 6;
pub const FRAME_START: u8 = 0x7E;
const READING_BYTES: usize = 19;
const READINGS_PER_FRAME: usize = 255 / READING_BYTES;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SauError {
    #[error("cannot flash while port(s) {0:?} are shorted")]
    FlashWhileShorted(Vec<u8>),
    #[error("agent is not running")]
    AgentUnavailable,
    #[error("command addressed to {0}")]
    WrongSau(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no port {0}")]
    NoSuchPort(u8),
}

/// AVR fuse bytes of the MCU. Carried for completeness; they have no effect
/// on the emulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FuseBits {
    pub low: u8,
    pub high: u8,
    pub extended: u8,
}

pub const FUSES: FuseBits = FuseBits { low: 0xde, high: 0xde, extended: 0xfd };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pin2Mode {
    Analog,
    #[default]
    Digital,
}

/// Per-port settings. Pin 2 may be analog only on ports 1-6; pins 4 and 6
/// carry the one I2C bus shared by all ports.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortConfig {
    pub port: u8,
    #[serde(default)]
    pub pin2: Option<Pin2Mode>,
    #[serde(default = "default_true")]
    pub onewire_pullup: bool,
    #[serde(default = "default_radius")]
    pub radius_m: f64,
    #[serde(default)]
    pub splitters: usize,
}

fn default_true() -> bool {
    true
}
fn default_radius() -> f64 {
    2.0
}

impl PortConfig {
    pub fn new(port: u8) -> Self {
        PortConfig { port, pin2: None, onewire_pullup: true, radius_m: default_radius(), splitters: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub kind: SensorKind,
    pub port: u8,
    /// 48-bit OneWire serial for DS18B20; derived from the seed when absent.
    #[serde(default)]
    pub serial: Option<u64>,
    /// I2C address for HYT-271 / BME280.
    #[serde(default)]
    pub i2c_addr: Option<u8>,
    #[serde(default)]
    pub airflow: bool,
    /// BME280 constants stored in the device.
    #[serde(default)]
    pub constants: Option<DeviceConstants>,
    /// BME280 constants describing the physical response.
    #[serde(default)]
    pub true_constants: Option<DeviceConstants>,
    /// Fixed offset error in K; drawn from the sensor model when absent.
    #[serde(default)]
    pub offset_error: Option<f64>,
}

impl SensorConfig {
    pub fn new(kind: SensorKind, port: u8) -> Self {
        SensorConfig {
            kind,
            port,
            serial: None,
            i2c_addr: None,
            airflow: false,
            constants: None,
            true_constants: None,
            offset_error: None,
        }
    }

    fn default_i2c_addr(kind: SensorKind) -> Option<u8> {
        match kind {
            SensorKind::Hyt271 => Some(0x28),
            SensorKind::Bme280 => Some(0x76),
            _ => None,
        }
    }
}

/// Delays of the emulated hardware, in simulated seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(default)]
pub struct SauTimings {
    /// Ticks the MCU is held down by a soft reset.
    pub reset_s: u32,
    pub flash_s: u32,
    pub boot_s: u32,
}

impl Default for SauTimings {
    fn default() -> Self {
        SauTimings { reset_s: 1, flash_s: 5, boot_s: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SauConfig {
    pub id: String,
    pub firmware: String,
    pub ports: Vec<PortConfig>,
    pub sensors: Vec<SensorConfig>,
    pub timings: SauTimings,
    /// Local offset of this unit's surroundings from the room profile, K.
    pub ambient_offset_c: f64,
    pub load_model: LoadModel,
    pub seed: u64,
}

impl SauConfig {
    pub fn new(id: impl Into<String>) -> Self {
        SauConfig {
            id: id.into(),
            firmware: "v1".into(),
            ports: Vec::new(),
            sensors: Vec::new(),
            timings: SauTimings::default(),
            ambient_offset_c: 0.0,
            load_model: LoadModel::default(),
            seed: 0,
        }
    }

    pub fn port(&self, port: u8) -> PortConfig {
        self.ports.iter().find(|p| p.port == port).cloned().unwrap_or_else(|| PortConfig::new(port))
    }

    /// Checks the configuration against the RJ12 pin assignment.
    pub fn validate(&self) -> Result<(), SauError> {
        let cfg = |m: String| Err(SauError::Config(m));
        if self.id.is_empty() || !self.id.bytes().all(|b| b.is_ascii_graphic()) || self.id.contains(':') {
            return cfg(format!("invalid SAU id {:?}", self.id));
        }
        let mut seen = BTreeSet::new();
        for p in &self.ports {
            if !(1..=PORT_COUNT).contains(&p.port) {
                return cfg(format!("{}: port {} out of range 1-11", self.id, p.port));
            }
            if !seen.insert(p.port) {
                return cfg(format!("{}: port {} declared twice", self.id, p.port));
            }
            if p.pin2 == Some(Pin2Mode::Analog) && p.port > LAST_ANALOG_PORT {
                return cfg(format!("{}: analog mode is only available on ports 1-6, not {}", self.id, p.port));
            }
            if p.radius_m.is_nan() || p.radius_m <= 0.0 {
                return cfg(format!("{}: port {} radius must be positive", self.id, p.port));
            }
        }
        let mut i2c = BTreeMap::new();
        let mut pin3: BTreeMap<u8, SensorKind> = BTreeMap::new();
        let mut pin2: BTreeMap<u8, SensorKind> = BTreeMap::new();
        let mut serials = BTreeSet::new();
        for (i, s) in self.sensors.iter().enumerate() {
            if !(1..=PORT_COUNT).contains(&s.port) {
                return cfg(format!("{}: sensor {i} on port {} out of range 1-11", self.id, s.port));
            }
            let port = self.port(s.port);
            match s.kind {
                SensorKind::Ds18b20 => {
                    if !port.onewire_pullup {
                        return cfg(format!("{}: port {} has no OneWire pull-up", self.id, s.port));
                    }
                    if let Some(prev) = pin3.insert(s.port, s.kind) {
                        if prev != SensorKind::Ds18b20 {
                            return cfg(format!("{}: port {} pin 3 already used by {prev}", self.id, s.port));
                        }
                    }
                    if let Some(serial) = s.serial {
                        if serial >> 48 != 0 || !serials.insert(serial) {
                            return cfg(format!("{}: bad or duplicate serial {serial:#x}", self.id));
                        }
                    }
                }
                SensorKind::Hyt271 | SensorKind::Bme280 => {
                    let addr = s.i2c_addr.or(SensorConfig::default_i2c_addr(s.kind)).expect("i2c kinds");
                    if let Some(prev) = i2c.insert(addr, s.kind) {
                        return cfg(format!(
                            "{}: I2C address {addr:#04x} used by both {prev} and {}",
                            self.id, s.kind
                        ));
                    }
                    if s.kind == SensorKind::Bme280 {
                        if let Some(c) = s.constants {
                            if !c.is_finite() || c.d2 <= 0.0 {
                                return cfg(format!("{}: BME280 constants must be finite with d2 > 0", self.id));
                            }
                        }
                    }
                }
                SensorKind::FlowMeter => {
                    // reed contact as a binary input on pin 3
                    if let Some(prev) = pin3.insert(s.port, s.kind) {
                        return cfg(format!("{}: port {} pin 3 already used by {prev}", self.id, s.port));
                    }
                }
                SensorKind::Leak => {
                    if s.port > LAST_ANALOG_PORT || port.pin2 == Some(Pin2Mode::Digital) {
                        return cfg(format!(
                            "{}: leak sensor needs analog pin 2, which port {} does not offer",
                            self.id, s.port
                        ));
                    }
                    if let Some(prev) = pin2.insert(s.port, s.kind) {
                        return cfg(format!("{}: port {} pin 2 already used by {prev}", self.id, s.port));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One serial frame: `0x7E, len, payload[len], crc8(len ‖ payload)`.
pub fn encode_frame(payload: &[u8]) -> Option<Vec<u8>> {
    let len = u8::try_from(payload.len()).ok()?;
    let mut out = Vec::with_capacity(payload.len() + 3);
    out.push(FRAME_START);
    out.push(len);
    out.extend_from_slice(payload);
    out.push(crate::onewire::crc8(&out[1..]));
    Some(out)
}

/// Decodes exactly one frame.
pub fn decode_frame(frame: &[u8]) -> Option<&[u8]> {
    if frame.len() < 3 || frame[0] != FRAME_START {
        return None;
    }
    let len = frame[1] as usize;
    if frame.len() != len + 3 {
        return None;
    }
    (crate::onewire::crc8(&frame[1..]) == 0).then(|| &frame[2..2 + len])
}

/// A reading as the MCU puts it on the serial link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SerialReading {
    pub port: u8,
    pub kind: SensorKind,
    pub id: u64,
    pub metric: Metric,
    pub value: f64,
}

fn kind_code(k: SensorKind) -> u8 {
    match k {
        SensorKind::Ds18b20 => 0,
        SensorKind::Hyt271 => 1,
        SensorKind::Bme280 => 2,
        SensorKind::FlowMeter => 3,
        SensorKind::Leak => 4,
    }
}

fn kind_from_code(c: u8) -> Option<SensorKind> {
    Some(match c {
        0 => SensorKind::Ds18b20,
        1 => SensorKind::Hyt271,
        2 => SensorKind::Bme280,
        3 => SensorKind::FlowMeter,
        4 => SensorKind::Leak,
        _ => return None,
    })
}

impl SerialReading {
    fn write(&self, out: &mut Vec<u8>) {
        out.push(self.port);
        out.push(kind_code(self.kind));
        out.extend_from_slice(&self.id.to_le_bytes());
        out.push(self.metric.code());
        out.extend_from_slice(&self.value.to_le_bytes());
    }

    fn read(b: &[u8]) -> Option<Self> {
        if b.len() != READING_BYTES {
            return None;
        }
        Some(SerialReading {
            port: b[0],
            kind: kind_from_code(b[1])?,
            id: u64::from_le_bytes(b[2..10].try_into().ok()?),
            metric: Metric::from_code(b[10])?,
            value: f64::from_le_bytes(b[11..19].try_into().ok()?),
        })
    }

    /// Sensor id as it appears in telemetry.
    pub fn sensor_id(&self) -> String {
        match self.kind {
            SensorKind::Ds18b20 => match RomCode::from_u64(self.id) {
                Ok(rom) => rom.sensor_id(),
                Err(_) => format!("{:016x}", self.id),
            },
            SensorKind::Hyt271 | SensorKind::Bme280 => format!("{}@{:02x}", self.kind, self.id),
            SensorKind::FlowMeter | SensorKind::Leak => format!("{}-p{}", self.kind, self.port),
        }
    }
}

pub fn encode_readings(readings: &[SerialReading]) -> Vec<Vec<u8>> {
    readings
        .chunks(READINGS_PER_FRAME)
        .map(|chunk| {
            let mut payload = Vec::with_capacity(chunk.len() * READING_BYTES);
            for r in chunk {
                r.write(&mut payload);
            }
            encode_frame(&payload).expect("chunk fits in a frame")
        })
        .collect()
}

pub fn decode_readings(payload: &[u8]) -> Option<Vec<SerialReading>> {
    if !payload.len().is_multiple_of(READING_BYTES) {
        return None;
    }
    payload.chunks(READING_BYTES).map(SerialReading::read).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum McuPhase {
    Running,
    /// Held in reset; counts down remaining ticks.
    Resetting(u32),
    Flashing { remaining: u32, image: String },
    /// Hung mid-transfer with the serial line stuck.
    Wedged,
    BrownOut,
    /// No supply.
    Off,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentPhase {
    Off,
    Booting(u32),
    Alive,
    Wedged,
}

/// One entry of the MCU's scan list: a sensor channel read every tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanEntry {
    pub sensor: usize,
    pub metric: Metric,
}

#[derive(Debug, Clone)]
struct Slot {
    port: u8,
    instance: SensorInstance,
    rom: Option<RomCode>,
    i2c_addr: Option<u8>,
}

/// Copies of the frames the MCU produced, before any link corruption.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrameTap {
    pub scratchpads: Vec<[u8; 9]>,
    pub serial: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SauCounters {
    pub frames_sent: u64,
    pub serial_drops: u64,
    pub records_emitted: u64,
    pub heartbeats: u64,
}

/// State of one emulated SAU.
#[derive(Debug, Clone)]
pub struct Sau {
    config: SauConfig,
    firmware_version: String,
    pub mcu_uptime_s: u64,
    pub agent_uptime_s: u64,
    mcu: McuPhase,
    agent: AgentPhase,
    shorted_ports: BTreeSet<u8>,
    slots: Vec<Slot>,
    buses: BTreeMap<u8, OneWireBus>,
    scan_list: Vec<ScanEntry>,
    seq: u64,
    corrupt_rate: f64,
    rng: ChaCha8Rng,
    counters: SauCounters,
    tap: Option<FrameTap>,
}

pub(crate) fn mix(seed: u64, n: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ n.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Sau {
    /// Powers the unit on in a ready state: sensors enumerated, scan list
    /// built, uptimes zero.
    pub fn power_on(config: SauConfig, env: &EnvSample) -> Result<Sau, SauError> {
        config.validate()?;
        let seed = config.seed;
        let local = EnvSample { temp_c: env.temp_c + config.ambient_offset_c, ..*env };
        let mut slots = Vec::with_capacity(config.sensors.len());
        let mut buses: BTreeMap<u8, OneWireBus> = BTreeMap::new();
        for (i, sc) in config.sensors.iter().enumerate() {
            let sensor_seed = mix(seed, i as u64 + 1);
            let offset = sc.offset_error.unwrap_or_else(|| sample_offset_error(sc.kind, sensor_seed));
            let mut rom = None;
            let mut i2c_addr = None;
            let id = match sc.kind {
                SensorKind::Ds18b20 => {
                    let serial = sc.serial.unwrap_or(sensor_seed & 0xFFFF_FFFF_FFFF);
                    let r = RomCode::new(FAMILY_DS18B20, serial).map_err(|e| SauError::Config(e.to_string()))?;
                    let port = config.port(sc.port);
                    let bus = buses.entry(sc.port).or_insert_with(|| {
                        OneWireBus::new(port.radius_m, port.splitters, mix(seed, 1000 + sc.port as u64))
                            .with_model(config.load_model)
                    });
                    bus.install(r).map_err(|e| SauError::Config(format!("{}: {e}", config.id)))?;
                    rom = Some(r);
                    r.as_u64()
                }
                SensorKind::Hyt271 | SensorKind::Bme280 => {
                    let a = sc.i2c_addr.or(SensorConfig::default_i2c_addr(sc.kind)).expect("i2c kinds");
                    i2c_addr = Some(a);
                    a as u64
                }
                SensorKind::FlowMeter | SensorKind::Leak => sc.port as u64,
            };
            let mut inst = SensorInstance::new(sc.kind, id, &local, offset).with_airflow(sc.airflow);
            if sc.kind == SensorKind::Bme280 {
                let stored = sc.constants.unwrap_or(DeviceConstants::new(28000.0, 26000.0, 50.0));
                inst = inst.with_constants(stored, sc.true_constants);
            }
            slots.push(Slot { port: sc.port, instance: inst, rom, i2c_addr });
        }
        let mut sau = Sau {
            firmware_version: config.firmware.clone(),
            mcu_uptime_s: 0,
            agent_uptime_s: 0,
            mcu: McuPhase::Running,
            agent: AgentPhase::Alive,
            shorted_ports: BTreeSet::new(),
            slots,
            buses,
            scan_list: Vec::new(),
            seq: 0,
            corrupt_rate: 0.0,
            rng: ChaCha8Rng::seed_from_u64(mix(seed, 0xC0FFEE)),
            counters: SauCounters::default(),
            tap: None,
            config,
        };
        sau.init_mcu();
        Ok(sau)
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn config(&self) -> &SauConfig {
        &self.config
    }

    pub fn firmware_version(&self) -> &str {
        &self.firmware_version
    }

    pub fn mcu_phase(&self) -> &McuPhase {
        &self.mcu
    }

    pub fn agent_phase(&self) -> &AgentPhase {
        &self.agent
    }

    pub fn mcu_alive(&self) -> bool {
        self.mcu == McuPhase::Running
    }

    pub fn agent_alive(&self) -> bool {
        self.agent == AgentPhase::Alive
    }

    pub fn powered(&self) -> bool {
        self.agent != AgentPhase::Off
    }

    pub fn shorted_ports(&self) -> &BTreeSet<u8> {
        &self.shorted_ports
    }

    pub fn scan_list(&self) -> &[ScanEntry] {
        &self.scan_list
    }

    pub fn counters(&self) -> SauCounters {
        self.counters
    }

    pub fn fuses(&self) -> FuseBits {
        FUSES
    }

    pub fn bus(&self, port: u8) -> Option<&OneWireBus> {
        self.buses.get(&port)
    }

    /// ROM codes found on `port` at the last MCU initialization.
    pub fn scanned_roms(&self, port: u8) -> Vec<RomCode> {
        let mut roms: Vec<RomCode> = self
            .scan_list
            .iter()
            .filter_map(|e| {
                let s = &self.slots[e.sensor];
                (s.port == port).then_some(s.rom).flatten()
            })
            .collect();
        roms.sort_unstable();
        roms
    }

    pub fn sensor(&self, index: usize) -> Option<&SensorInstance> {
        self.slots.get(index).map(|s| &s.instance)
    }

    /// Enumerates all ports and rebuilds the scan list.
    fn init_mcu(&mut self) {
        self.mcu_uptime_s = 0;
        let mut found: BTreeSet<RomCode> = BTreeSet::new();
        for bus in self.buses.values_mut() {
            found.extend(bus.search_rom());
        }
        let mut scan = Vec::new();
        for (i, slot) in self.slots.iter().enumerate() {
            let metrics: &[Metric] = match slot.instance.kind() {
                SensorKind::Ds18b20 => {
                    if !slot.rom.is_some_and(|r| found.contains(&r)) {
                        continue;
                    }
                    &[Metric::TempC]
                }
                SensorKind::Hyt271 => &[Metric::TempC, Metric::HumidityPct],
                SensorKind::Bme280 => &[Metric::TempC, Metric::PressureHpa],
                SensorKind::FlowMeter => &[Metric::FlowPulses],
                SensorKind::Leak => &[Metric::Leak],
            };
            scan.extend(metrics.iter().map(|&metric| ScanEntry { sensor: i, metric }));
        }
        self.scan_list = scan;
        self.mcu = McuPhase::Running;
    }

    /// MCU reads every channel of the scan list.
    fn collect_readings(&mut self) -> Vec<SerialReading> {
        // start a conversion on every bus: devices latch their temperature
        for slot in &self.slots {
            if let (Some(rom), RawReading::Ds18b20(t)) = (slot.rom, slot.instance.read_raw()) {
                if let Some(bus) = self.buses.get_mut(&slot.port) {
                    let _ = bus.set_temperature(rom, t);
                }
            }
        }
        let mut out = Vec::with_capacity(self.scan_list.len());
        for entry in &self.scan_list {
            let slot = &self.slots[entry.sensor];
            let value = match (slot.instance.read_raw(), entry.metric) {
                (RawReading::Ds18b20(_), _) => {
                    let rom = slot.rom.expect("ds18b20 has a rom");
                    let bus = &self.buses[&slot.port];
                    match bus.read_scratchpad(rom) {
                        Ok(frame) => {
                            if let Some(tap) = &mut self.tap {
                                tap.scratchpads.push(frame);
                            }
                            match decode_scratchpad(&frame) {
                                Some(t) => t as f64 / 16.0,
                                None => continue,
                            }
                        }
                        Err(BusError::BusDead(_)) | Err(_) => continue,
                    }
                }
                (RawReading::Hyt271 { t_code, .. }, Metric::TempC) => hyt271_celsius(t_code),
                (RawReading::Hyt271 { rh_code, .. }, _) => hyt271_rh(rh_code),
                (RawReading::Bme280 { t_raw, .. }, Metric::TempC) => {
                    let stored = slot.instance.device_constants.expect("bme280 constants");
                    compensate(&stored.to_poly(), t_raw as f64)
                }
                (RawReading::Bme280 { pressure_hpa, .. }, _) => pressure_hpa,
                (RawReading::FlowMeter(p), _) => p as f64,
                (RawReading::Leak(w), _) => f64::from(u8::from(w)),
            };
            if !value.is_finite() {
                continue;
            }
            let id = match slot.instance.kind() {
                SensorKind::Hyt271 | SensorKind::Bme280 => slot.i2c_addr.unwrap_or(0) as u64,
                _ => slot.instance.id,
            };
            out.push(SerialReading { port: slot.port, kind: slot.instance.kind(), id, metric: entry.metric, value });
        }
        out
    }

    /// Advances the MCU by one tick; returns the frames it put on the serial
    /// line, or `None` if the line is hung.
    fn mcu_tick(&mut self) -> Option<Vec<Vec<u8>>> {
        if self.mcu == McuPhase::Off {
            return Some(Vec::new());
        }
        if !self.shorted_ports.is_empty() {
            self.mcu = McuPhase::BrownOut;
            return Some(Vec::new());
        }
        match &mut self.mcu {
            McuPhase::BrownOut => {
                self.init_mcu();
                Some(Vec::new())
            }
            McuPhase::Resetting(n) => {
                *n = n.saturating_sub(1);
                if *n == 0 {
                    self.init_mcu();
                }
                Some(Vec::new())
            }
            McuPhase::Flashing { remaining, image } => {
                *remaining = remaining.saturating_sub(1);
                if *remaining == 0 {
                    self.firmware_version = std::mem::take(image);
                    self.init_mcu();
                }
                Some(Vec::new())
            }
            McuPhase::Wedged => None,
            McuPhase::Off => Some(Vec::new()),
            McuPhase::Running => {
                self.mcu_uptime_s += 1;
                let readings = self.collect_readings();
                let mut frames = encode_readings(&readings);
                if let Some(tap) = &mut self.tap {
                    tap.serial.extend(frames.iter().cloned());
                }
                for frame in &mut frames {
                    self.counters.frames_sent += 1;
                    if self.corrupt_rate > 0.0 && self.rng.random::<f64>() < self.corrupt_rate {
                        let bit = self.rng.random_range(0..frame.len() * 8);
                        frame[bit / 8] ^= 1 << (bit % 8);
                    }
                }
                Some(frames)
            }
        }
    }

    /// One 1 Hz loop iteration at simulated time `now_ms`.
    pub fn tick(&mut self, now_ms: i64, env: &EnvSample) -> Vec<TelemetryRecord> {
        let local = EnvSample { temp_c: env.temp_c + self.config.ambient_offset_c, ..*env };
        for slot in &mut self.slots {
            slot.instance.step(&local, 1.0);
        }
        match &mut self.agent {
            AgentPhase::Off => return Vec::new(),
            AgentPhase::Booting(n) => {
                *n = n.saturating_sub(1);
                if *n == 0 {
                    self.boot_complete();
                }
                return Vec::new();
            }
            AgentPhase::Wedged => {
                // MCU keeps running but nobody listens
                let _ = self.mcu_tick();
                return Vec::new();
            }
            AgentPhase::Alive => {}
        }
        self.agent_uptime_s += 1;
        let Some(frames) = self.mcu_tick() else {
            // agent's serial reader is blocked on the hung line
            return Vec::new();
        };
        let mut records = Vec::new();
        for frame in &frames {
            let Some(readings) = decode_frame(frame).and_then(decode_readings) else {
                self.counters.serial_drops += 1;
                continue;
            };
            for r in readings {
                let rec = TelemetryRecord::new(
                    self.config.id.clone(),
                    self.seq,
                    now_ms,
                    r.port,
                    r.sensor_id(),
                    r.metric,
                    r.value,
                );
                if let Ok(rec) = rec {
                    self.seq += 1;
                    records.push(rec);
                }
            }
        }
        self.counters.records_emitted += records.len() as u64;
        if let Ok(hb) = TelemetryRecord::heartbeat(&self.config.id, self.seq, now_ms, &self.firmware_version) {
            self.seq += 1;
            self.counters.heartbeats += 1;
            records.push(hb);
        }
        records
    }

    fn boot_complete(&mut self) {
        self.agent = AgentPhase::Alive;
        self.agent_uptime_s = 0;
        self.seq = 0;
        self.init_mcu();
        if !self.shorted_ports.is_empty() {
            self.mcu = McuPhase::BrownOut;
        }
    }

    /// Pulses the MCU reset line. The agent is untouched; a brown-out
    /// persists while a short remains.
    pub fn soft_reset(&mut self) {
        if self.mcu == McuPhase::Off {
            return;
        }
        self.mcu_uptime_s = 0;
        if !self.shorted_ports.is_empty() {
            self.mcu = McuPhase::BrownOut;
            return;
        }
        self.mcu = McuPhase::Resetting(self.config.timings.reset_s.max(1));
    }

    /// Flashes a new firmware image through the reset line.
    pub fn flash_firmware(&mut self, image_id: &str) -> Result<(), SauError> {
        if !self.shorted_ports.is_empty() {
            return Err(SauError::FlashWhileShorted(self.shorted_ports.iter().copied().collect()));
        }
        if self.mcu == McuPhase::Off {
            return Err(SauError::AgentUnavailable);
        }
        self.mcu_uptime_s = 0;
        self.mcu = McuPhase::Flashing { remaining: self.config.timings.flash_s.max(1), image: image_id.to_string() };
        Ok(())
    }

    /// Handles a command from the collector. Requires a running agent.
    pub fn handle_command(&mut self, cmd: &Command) -> Result<(), SauError> {
        if cmd.sau_id() != self.config.id {
            return Err(SauError::WrongSau(cmd.sau_id().to_string()));
        }
        if self.agent != AgentPhase::Alive {
            return Err(SauError::AgentUnavailable);
        }
        match cmd {
            Command::Reset { .. } => {
                self.soft_reset();
                Ok(())
            }
            Command::Flash { image_id, .. } => self.flash_firmware(image_id),
        }
    }

    /// PoE supply removed: both halves stop immediately.
    pub fn power_off(&mut self) {
        self.agent = AgentPhase::Off;
        self.mcu = McuPhase::Off;
        self.mcu_uptime_s = 0;
        self.agent_uptime_s = 0;
    }

    /// PoE supply restored: the agent starts its boot sequence.
    pub fn power_restore(&mut self) {
        if self.agent == AgentPhase::Off {
            self.agent = AgentPhase::Booting(self.config.timings.boot_s.max(1));
            self.mcu = McuPhase::Resetting(1);
            self.mcu_uptime_s = 0;
            self.agent_uptime_s = 0;
        }
    }

    /// Off and on again. Clears every wedge.
    pub fn power_cycle(&mut self) {
        self.power_off();
        self.power_restore();
    }

    pub fn wedge_mcu(&mut self) {
        if self.mcu != McuPhase::Off {
            self.mcu = McuPhase::Wedged;
        }
    }

    pub fn wedge_agent(&mut self) {
        if self.agent != AgentPhase::Off {
            self.agent = AgentPhase::Wedged;
        }
    }

    pub fn short_port(&mut self, port: u8) -> Result<(), SauError> {
        if !(1..=PORT_COUNT).contains(&port) {
            return Err(SauError::NoSuchPort(port));
        }
        self.shorted_ports.insert(port);
        if self.mcu != McuPhase::Off {
            self.mcu = McuPhase::BrownOut;
        }
        Ok(())
    }

    pub fn clear_short(&mut self, port: u8) -> Result<(), SauError> {
        if !(1..=PORT_COUNT).contains(&port) {
            return Err(SauError::NoSuchPort(port));
        }
        self.shorted_ports.remove(&port);
        Ok(())
    }

    /// Probability per frame of a single flipped bit on the serial link.
    pub fn set_serial_corruption(&mut self, rate: f64) {
        self.corrupt_rate = rate.clamp(0.0, 1.0);
    }

    /// Temperature the DS18B20 on `rom` would currently report, in 1/16 K.
    /// Starts or stops keeping copies of produced frames.
    pub fn set_frame_tap(&mut self, on: bool) {
        self.tap = on.then(FrameTap::default);
    }

    pub fn take_tapped_frames(&mut self) -> FrameTap {
        self.tap.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn ds18b20_register(&self, rom: RomCode) -> Option<i16> {
        self.slots
            .iter()
            .find(|s| s.rom == Some(rom))
            .map(|s| ds18b20_quantize(s.instance.indicated_temp()))
    }
}
