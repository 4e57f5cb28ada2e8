//! Simulated data-center environment monitoring.
//!
//! Sensor Aggregation Units (SAUs) read DS18B20, HYT-271, BME280, flow and
//! leak sensors once per second and stream telemetry to a collector. The
//! collector stores samples in round-robin archives, raises alarms and
//! escalates silent units from a soft reset to a PoE power cycle.

pub mod calibration;
pub mod collector;
pub mod config;
pub mod onewire;
pub mod poe;
pub mod net;
pub mod protocol;
pub mod sau;
pub mod sensors;
pub mod sim;
pub mod storage;
