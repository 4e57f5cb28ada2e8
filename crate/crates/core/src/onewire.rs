//! OneWire bus model: ROM codes, Dallas CRC-8, the binary-tree ROM search and
//! a cable-load model in which device discovery degrades before reads do.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

pub const FAMILY_DS18B20: u8 = 0x28;

/// Recovery time below which device discovery becomes unreliable, in µs.
pub const RECOVERY_THRESHOLD_US: f64 = 50.0;

/// Dallas/Maxim CRC-8 (x^8 + x^5 + x^4 + 1, reflected, init 0), table-driven.
pub fn crc8(bytes: &[u8]) -> u8 {
    bytes.iter().fold(0u8, |crc, &b| CRC8_TABLE[(crc ^ b) as usize])
}

const CRC8_TABLE: [u8; 256] = {
    let mut table = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ 0x8C } else { crc >> 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BusError {
    #[error("ROM code {0:016x} fails its CRC")]
    InvalidRom(u64),
    #[error("serial {0:#x} does not fit in 48 bits")]
    SerialTooWide(u64),
    #[error("no device {0} on the bus")]
    NoSuchDevice(RomCode),
    #[error("bus is electrically dead (recovery time {0:.1} us)")]
    BusDead(f64),
    #[error("device {0} already installed")]
    Duplicate(RomCode),
}

/// 64-bit OneWire ROM: family byte (LSB), 48-bit serial, CRC byte (MSB).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RomCode(u64);

impl RomCode {
    pub fn new(family: u8, serial: u64) -> Result<Self, BusError> {
        if serial >> 48 != 0 {
            return Err(BusError::SerialTooWide(serial));
        }
        let body = family as u64 | serial << 8;
        let crc = crc8(&body.to_le_bytes()[..7]);
        Ok(RomCode(body | (crc as u64) << 56))
    }

    pub fn from_u64(raw: u64) -> Result<Self, BusError> {
        if crc8(&raw.to_le_bytes()) != 0 {
            return Err(BusError::InvalidRom(raw));
        }
        Ok(RomCode(raw))
    }

    pub fn as_u64(self) -> u64 {
        self.0
    }

    pub fn family(self) -> u8 {
        self.0 as u8
    }

    pub fn serial(self) -> u64 {
        (self.0 >> 8) & 0xFFFF_FFFF_FFFF
    }

    pub fn crc(self) -> u8 {
        (self.0 >> 56) as u8
    }

    pub fn to_bytes(self) -> [u8; 8] {
        self.0.to_le_bytes()
    }

    fn bit(self, i: usize) -> bool {
        (self.0 >> i) & 1 == 1
    }

    /// Family and serial as 14 hex digits, the form used as a telemetry sensor id.
    pub fn sensor_id(self) -> String {
        format!("{:02x}{:012x}", self.family(), self.serial())
    }
}

impl fmt::Display for RomCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Physical extent of one bus.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct BusTopology {
    pub radius_m: f64,
    pub n_sensors: usize,
    pub n_splitters: usize,
}

/// Linear cable-load model for the bus recovery time.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default)]
pub struct LoadModel {
    pub r0_us: f64,
    pub per_meter_us: f64,
    pub per_sensor_us: f64,
    pub per_splitter_us: f64,
}

impl Default for LoadModel {
    fn default() -> Self {
        LoadModel { r0_us: 120.0, per_meter_us: 1.2, per_sensor_us: 1.0, per_splitter_us: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusHealth {
    pub recovery_time_us: f64,
    pub discovery_reliable: bool,
}

impl BusHealth {
    /// Per-device probability of being missed by one discovery pass.
    pub fn miss_probability(&self) -> f64 {
        if self.discovery_reliable {
            0.0
        } else {
            ((RECOVERY_THRESHOLD_US - self.recovery_time_us) / RECOVERY_THRESHOLD_US).clamp(0.0, 1.0)
        }
    }

    /// Plain reads only need the line to come back up at all.
    pub fn reads_ok(&self) -> bool {
        self.recovery_time_us > 0.0
    }
}

impl fmt::Display for BusHealth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.discovery_reliable { "OK" } else { "CRITICAL" };
        write!(f, "{:.0} us, {verdict}", self.recovery_time_us)
    }
}

pub fn bus_health(topology: &BusTopology) -> BusHealth {
    bus_health_with(topology, &LoadModel::default())
}

pub fn bus_health_with(topology: &BusTopology, model: &LoadModel) -> BusHealth {
    let rt = model.r0_us
        - model.per_meter_us * topology.radius_m
        - model.per_sensor_us * topology.n_sensors as f64
        - model.per_splitter_us * topology.n_splitters as f64;
    BusHealth { recovery_time_us: rt, discovery_reliable: rt > RECOVERY_THRESHOLD_US }
}

/// Scratchpad content written by a temperature conversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Ds18b20Regs {
    temp_sixteenths: i16,
}

/// One OneWire bus with its installed DS18B20 devices.
#[derive(Debug, Clone)]
pub struct OneWireBus {
    radius_m: f64,
    n_splitters: usize,
    model: LoadModel,
    devices: BTreeMap<RomCode, Ds18b20Regs>,
    seed: u64,
    attempts: u64,
}

impl OneWireBus {
    pub fn new(radius_m: f64, n_splitters: usize, seed: u64) -> Self {
        OneWireBus {
            radius_m,
            n_splitters,
            model: LoadModel::default(),
            devices: BTreeMap::new(),
            seed,
            attempts: 0,
        }
    }

    pub fn with_model(mut self, model: LoadModel) -> Self {
        self.model = model;
        self
    }

    pub fn install(&mut self, rom: RomCode) -> Result<(), BusError> {
        if self.devices.contains_key(&rom) {
            return Err(BusError::Duplicate(rom));
        }
        // power-on value of the temperature register is +85 °C
        self.devices.insert(rom, Ds18b20Regs { temp_sixteenths: 85 * 16 });
        Ok(())
    }

    pub fn remove(&mut self, rom: RomCode) -> bool {
        self.devices.remove(&rom).is_some()
    }

    pub fn installed(&self) -> impl Iterator<Item = RomCode> + '_ {
        self.devices.keys().copied()
    }

    pub fn topology(&self) -> BusTopology {
        BusTopology {
            radius_m: self.radius_m,
            n_sensors: self.devices.len(),
            n_splitters: self.n_splitters,
        }
    }

    pub fn health(&self) -> BusHealth {
        bus_health_with(&self.topology(), &self.model)
    }

    /// Number of discovery passes run so far.
    pub fn attempts(&self) -> u64 {
        self.attempts
    }

    /// Stores a completed temperature conversion for `rom`.
    pub fn set_temperature(&mut self, rom: RomCode, sixteenths: i16) -> Result<(), BusError> {
        let regs = self.devices.get_mut(&rom).ok_or(BusError::NoSuchDevice(rom))?;
        regs.temp_sixteenths = sixteenths;
        Ok(())
    }

    /// Runs one discovery pass. On an overloaded bus each device is
    /// independently dropped from the pass with the health model's miss
    /// probability, keyed on the bus seed and pass counter.
    pub fn search_rom(&mut self) -> Vec<RomCode> {
        let attempt = self.attempts;
        self.attempts += 1;
        let p_miss = self.health().miss_probability();
        let responding: Vec<RomCode> = if p_miss > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(attempt);
            self.devices
                .keys()
                .copied()
                .filter(|_| rng.random::<f64>() >= p_miss)
                .collect()
        } else {
            self.devices.keys().copied().collect()
        };
        let mut found = binary_tree_search(&responding);
        found.sort_unstable();
        found
    }

    pub fn read_scratchpad(&self, rom: RomCode) -> Result<[u8; 9], BusError> {
        let regs = self.devices.get(&rom).ok_or(BusError::NoSuchDevice(rom))?;
        let health = self.health();
        if !health.reads_ok() {
            return Err(BusError::BusDead(health.recovery_time_us));
        }
        Ok(scratchpad_frame(regs.temp_sixteenths))
    }
}

/// Encodes a DS18B20 scratchpad: temperature (LE two's complement, 1/16 K),
/// alarm registers, 12-bit configuration, reserved bytes and CRC.
pub fn scratchpad_frame(temp_sixteenths: i16) -> [u8; 9] {
    let t = temp_sixteenths.to_le_bytes();
    let mut frame = [t[0], t[1], 0x4B, 0x46, 0x7F, 0xFF, 0x0C, 0x10, 0];
    frame[8] = crc8(&frame[..8]);
    frame
}

/// Decodes the temperature from a scratchpad, checking its CRC.
pub fn decode_scratchpad(frame: &[u8; 9]) -> Option<i16> {
    (crc8(frame) == 0).then(|| i16::from_le_bytes([frame[0], frame[1]]))
}

/// Standard OneWire search: walks the ROM tree one bit position at a time,
/// with every still-selected device answering bit and complement on a
/// wired-AND line, and backtracks via the last discrepancy.
fn binary_tree_search(devices: &[RomCode]) -> Vec<RomCode> {
    let mut found = Vec::with_capacity(devices.len());
    if devices.is_empty() {
        return found;
    }
    let mut last_discrepancy: Option<usize> = None;
    let mut last_rom = 0u64;
    loop {
        let mut selected: Vec<RomCode> = devices.to_vec();
        let mut rom = 0u64;
        let mut discrepancy: Option<usize> = None;
        for bit in 0..64 {
            // wired-AND: the line reads 1 only if every selected device sends 1
            let id_bit = selected.iter().all(|d| d.bit(bit));
            let cmp_bit = selected.iter().all(|d| !d.bit(bit));
            let direction = match (id_bit, cmp_bit) {
                (true, true) => return found, // nobody answered
                (false, true) => false,
                (true, false) => true,
                (false, false) => {
                    let dir = match last_discrepancy {
                        Some(ld) if bit < ld => (last_rom >> bit) & 1 == 1,
                        Some(ld) if bit == ld => true,
                        _ => false,
                    };
                    if !dir {
                        discrepancy = Some(bit);
                    }
                    dir
                }
            };
            if direction {
                rom |= 1 << bit;
            }
            selected.retain(|d| d.bit(bit) == direction);
        }
        found.push(RomCode(rom));
        last_rom = rom;
        last_discrepancy = discrepancy;
        if discrepancy.is_none() {
            return found;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bitwise_crc8(data: &[u8]) -> u8 {
        let mut crc = 0u8;
        for &byte in data {
            let mut b = byte;
            for _ in 0..8 {
                let mix = (crc ^ b) & 1;
                crc >>= 1;
                if mix != 0 {
                    crc ^= 0x8C;
                }
                b >>= 1;
            }
        }
        crc
    }

    #[test]
    fn crc_edge_values() {
        assert_eq!(crc8(&[]), 0);
        assert_eq!(crc8(&[0; 7]), 0);
        for i in 0..=255u8 {
            assert_eq!(crc8(&[i, 0x5A, i ^ 0xFF]), bitwise_crc8(&[i, 0x5A, i ^ 0xFF]));
        }
    }

    #[test]
    fn datasheet_rom_example() {
        // Maxim application note 27 example ROM: 02 1C B8 01 00 00 00 | A2
        let bytes = [0x02, 0x1C, 0xB8, 0x01, 0x00, 0x00, 0x00];
        assert_eq!(crc8(&bytes), 0xA2);
        let rom = RomCode::new(0x02, 0x01B81C).unwrap();
        assert_eq!(rom.crc(), 0xA2);
        assert_eq!(crc8(&rom.to_bytes()), 0);
    }

    #[test]
    fn rom_fields() {
        let rom = RomCode::new(FAMILY_DS18B20, 0xf00000015a2b).unwrap();
        assert_eq!(rom.family(), 0x28);
        assert_eq!(rom.serial(), 0xf00000015a2b);
        assert_eq!(rom.sensor_id(), "28f00000015a2b");
        assert_eq!(RomCode::from_u64(rom.as_u64()), Ok(rom));
        assert!(RomCode::from_u64(rom.as_u64() ^ 1 << 20).is_err());
        assert!(RomCode::new(0x28, 1 << 48).is_err());
    }

    #[test]
    fn health_model_anchor_points() {
        let h = bus_health(&BusTopology { radius_m: 10.0, n_sensors: 15, n_splitters: 2 });
        assert!((h.recovery_time_us - 89.0).abs() < 1e-9);
        assert!(h.discovery_reliable);
        assert_eq!(h.to_string(), "89 us, OK");
        let h = bus_health(&BusTopology { radius_m: 50.0, n_sensors: 15, n_splitters: 2 });
        assert!((h.recovery_time_us - 41.0).abs() < 1e-9);
        assert!(!h.discovery_reliable);
        assert!(h.reads_ok());
        let h = bus_health(&BusTopology { radius_m: 1e-9, n_sensors: 0, n_splitters: 0 });
        assert!((h.recovery_time_us - 120.0).abs() < 1e-6);
        assert!(h.discovery_reliable);
    }

    #[test]
    fn empty_bus_search() {
        let mut bus = OneWireBus::new(5.0, 0, 1);
        assert!(bus.search_rom().is_empty());
    }

    #[test]
    fn shared_prefix_serials_all_found() {
        let mut bus = OneWireBus::new(5.0, 0, 1);
        let roms: Vec<RomCode> = [0u64, 1, 2, 3, 0x800000000000, 0x800000000001]
            .iter()
            .map(|&s| RomCode::new(FAMILY_DS18B20, s).unwrap())
            .collect();
        for &r in &roms {
            bus.install(r).unwrap();
        }
        let mut expected = roms.clone();
        expected.sort();
        assert_eq!(bus.search_rom(), expected);
    }

    #[test]
    fn scratchpad_encoding() {
        let f = scratchpad_frame(401);
        assert_eq!(u16::from_le_bytes([f[0], f[1]]), 0x0191);
        assert_eq!(crc8(&f), 0);
        let f = scratchpad_frame(-1);
        assert_eq!(u16::from_le_bytes([f[0], f[1]]), 0xFFFF);
        assert_eq!(decode_scratchpad(&f), Some(-1));
        let mut bad = f;
        bad[0] ^= 0x10;
        assert_eq!(decode_scratchpad(&bad), None);
    }

    #[test]
    fn read_unknown_device() {
        let bus = OneWireBus::new(5.0, 0, 1);
        let rom = RomCode::new(FAMILY_DS18B20, 7).unwrap();
        assert_eq!(bus.read_scratchpad(rom), Err(BusError::NoSuchDevice(rom)));
    }

    #[test]
    fn dead_bus_blocks_reads() {
        let mut bus = OneWireBus::new(200.0, 0, 1);
        let rom = RomCode::new(FAMILY_DS18B20, 7).unwrap();
        bus.install(rom).unwrap();
        assert!(matches!(bus.read_scratchpad(rom), Err(BusError::BusDead(_))));
    }
}
