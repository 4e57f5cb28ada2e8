//! C ABI for envmon.
//!
//! Every fallible function returns an [`EnvmonStatus`]; on failure the reason
//! is kept per thread and can be fetched with [`envmon_last_error_message`].
//! Archives and decoded records are opaque handles released by their `_free`
//! function. No function unwinds across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use envmon::calibration::{self, CompensationPoly, DeviceConstants};
use envmon::onewire::{self, BusTopology};
use envmon::protocol::{self, Metric, TelemetryRecord};
use envmon::storage::{Archive, Consolidation, TierSpec};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvmonStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Calibration = 3,
    Protocol = 4,
    Storage = 5,
    BufferTooSmall = 6,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvmonConstants {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvmonPoly {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

/// Consolidation: 0 avg, 1 min, 2 max, 3 last.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvmonTier {
    pub step_s: u32,
    pub capacity: u32,
    pub consolidation: u8,
}

/// Opaque round-robin archive.
pub struct EnvmonArchive(Archive);

/// Opaque decoded telemetry record.
pub struct EnvmonRecord {
    rec: TelemetryRecord,
    sau_id: CString,
    sensor_id: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: EnvmonStatus, msg: impl Into<String>) -> EnvmonStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> EnvmonStatus) -> EnvmonStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(EnvmonStatus::Panic, "internal panic"),
    }
}

fn guard_ptr<T>(f: impl FnOnce() -> *mut T) -> *mut T {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| {
        set_error("internal panic");
        ptr::null_mut()
    })
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, EnvmonStatus> {
    if p.is_null() {
        return Err(fail(EnvmonStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(EnvmonStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn to_constants(c: &EnvmonConstants) -> DeviceConstants {
    DeviceConstants::new(c.d1, c.d2, c.d3)
}

fn to_poly(p: &EnvmonPoly) -> CompensationPoly {
    CompensationPoly { c0: p.c0, c1: p.c1, c2: p.c2 }
}

/// Length of the last error message, excluding the terminator; 0 if none.
#[no_mangle]
pub extern "C" fn envmon_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |s| s.as_bytes().len()))
}

/// Copies the last error message into `buf` (NUL-terminated, truncated to
/// fit). Returns the full message length.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn envmon_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// # Safety
/// `d` and `out` must point to valid structs.
#[no_mangle]
pub unsafe extern "C" fn envmon_poly_from_constants(d: *const EnvmonConstants, out: *mut EnvmonPoly) -> EnvmonStatus {
    guard(|| {
        if d.is_null() || out.is_null() {
            return fail(EnvmonStatus::NullPointer, "null argument");
        }
        let c = calibration::poly_from_constants(&to_constants(&*d));
        *out = EnvmonPoly { c0: c.c0, c1: c.c1, c2: c.c2 };
        EnvmonStatus::Ok
    })
}

/// Inverts the compensation polynomial back to device constants.
///
/// # Safety
/// `c` and `out` must point to valid structs.
#[no_mangle]
pub unsafe extern "C" fn envmon_constants_from_poly(c: *const EnvmonPoly, out: *mut EnvmonConstants) -> EnvmonStatus {
    guard(|| {
        if c.is_null() || out.is_null() {
            return fail(EnvmonStatus::NullPointer, "null argument");
        }
        match calibration::constants_from_poly(&to_poly(&*c)) {
            Ok(d) => {
                *out = EnvmonConstants { d1: d.d1, d2: d.d2, d3: d.d3 };
                EnvmonStatus::Ok
            }
            Err(e) => fail(EnvmonStatus::Calibration, e.to_string()),
        }
    })
}

/// Temperature in °C for a raw ADC count.
///
/// # Safety
/// `c` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn envmon_compensate(c: *const EnvmonPoly, t_raw: f64, out: *mut f64) -> EnvmonStatus {
    guard(|| {
        if c.is_null() || out.is_null() {
            return fail(EnvmonStatus::NullPointer, "null argument");
        }
        *out = calibration::compensate(&to_poly(&*c), t_raw);
        EnvmonStatus::Ok
    })
}

/// Factory-calibration error at both ends of `[t_lo, t_hi]`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn envmon_deviation_range(
    factory: *const EnvmonConstants,
    fresh: *const EnvmonConstants,
    t_lo: f64,
    t_hi: f64,
    at_lo: *mut f64,
    at_hi: *mut f64,
) -> EnvmonStatus {
    guard(|| {
        if factory.is_null() || fresh.is_null() || at_lo.is_null() || at_hi.is_null() {
            return fail(EnvmonStatus::NullPointer, "null argument");
        }
        match calibration::deviation_range(&to_constants(&*factory), &to_constants(&*fresh), t_lo, t_hi) {
            Ok(r) => {
                *at_lo = r.at_lo;
                *at_hi = r.at_hi;
                EnvmonStatus::Ok
            }
            Err(e) => fail(EnvmonStatus::Calibration, e.to_string()),
        }
    })
}

/// Dallas/Maxim CRC-8 of `len` bytes. A buffer ending in its own CRC gives 0.
///
/// # Safety
/// `data` must be valid for `len` bytes; may be null when `len` is 0.
#[no_mangle]
pub unsafe extern "C" fn envmon_crc8(data: *const u8, len: usize) -> u8 {
    if data.is_null() || len == 0 {
        return 0;
    }
    onewire::crc8(std::slice::from_raw_parts(data, len))
}

/// Bus recovery time in microseconds and whether discovery is reliable.
///
/// # Safety
/// `recovery_us` and `reliable` must be valid.
#[no_mangle]
pub unsafe extern "C" fn envmon_bus_health(
    radius_m: f64,
    sensors: usize,
    splitters: usize,
    recovery_us: *mut f64,
    reliable: *mut bool,
) -> EnvmonStatus {
    guard(|| {
        if recovery_us.is_null() || reliable.is_null() {
            return fail(EnvmonStatus::NullPointer, "null argument");
        }
        if radius_m.is_nan() || radius_m < 0.0 {
            return fail(EnvmonStatus::InvalidArgument, "radius must be non-negative");
        }
        let h = onewire::bus_health(&BusTopology { radius_m, n_sensors: sensors, n_splitters: splitters });
        *recovery_us = h.recovery_time_us;
        *reliable = h.discovery_reliable;
        EnvmonStatus::Ok
    })
}

/// Encodes one telemetry line (with trailing newline) into `buf`. `written`
/// receives the line length excluding the terminator; on
/// `BufferTooSmall` it holds the size needed.
///
/// # Safety
/// Strings must be NUL-terminated; `buf` valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn envmon_record_encode(
    sau_id: *const c_char,
    seq: u64,
    timestamp_ms: i64,
    port: u8,
    sensor_id: *const c_char,
    metric: *const c_char,
    value: f64,
    buf: *mut c_char,
    cap: usize,
    written: *mut usize,
) -> EnvmonStatus {
    guard(|| {
        if buf.is_null() || written.is_null() {
            return fail(EnvmonStatus::NullPointer, "null argument");
        }
        let args = (|| Ok((str_arg(sau_id, "sau_id")?, str_arg(sensor_id, "sensor_id")?, str_arg(metric, "metric")?)))();
        let (sau, sensor, metric) = match args {
            Ok(a) => a,
            Err(s) => return s,
        };
        let line = metric
            .parse::<Metric>()
            .and_then(|m| TelemetryRecord::new(sau, seq, timestamp_ms, port, sensor, m, value))
            .and_then(|r| r.encode());
        let line = match line {
            Ok(l) => l,
            Err(e) => return fail(EnvmonStatus::Protocol, e.to_string()),
        };
        *written = line.len();
        if line.len() + 1 > cap {
            return fail(EnvmonStatus::BufferTooSmall, format!("need {} bytes", line.len() + 1));
        }
        ptr::copy_nonoverlapping(line.as_ptr(), buf.cast::<u8>(), line.len());
        *buf.add(line.len()) = 0;
        EnvmonStatus::Ok
    })
}

/// Decodes one line. Returns null on error; see the last error message.
///
/// # Safety
/// `line` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn envmon_record_decode(line: *const c_char) -> *mut EnvmonRecord {
    guard_ptr(|| {
        let Ok(line) = str_arg(line, "line") else { return ptr::null_mut() };
        match protocol::decode(line) {
            Ok(rec) => {
                let sau_id = CString::new(rec.sau_id.clone()).expect("tokens have no NUL");
                let sensor_id = CString::new(rec.sensor_id.clone()).expect("tokens have no NUL");
                Box::into_raw(Box::new(EnvmonRecord { rec, sau_id, sensor_id }))
            }
            Err(e) => {
                set_error(e.to_string());
                ptr::null_mut()
            }
        }
    })
}

/// # Safety
/// `r` must come from [`envmon_record_decode`]. Valid until freed.
#[no_mangle]
pub unsafe extern "C" fn envmon_record_sau_id(r: *const EnvmonRecord) -> *const c_char {
    r.as_ref().map_or(ptr::null(), |r| r.sau_id.as_ptr())
}

/// # Safety
/// `r` must come from [`envmon_record_decode`]. Valid until freed.
#[no_mangle]
pub unsafe extern "C" fn envmon_record_sensor_id(r: *const EnvmonRecord) -> *const c_char {
    r.as_ref().map_or(ptr::null(), |r| r.sensor_id.as_ptr())
}

/// Static string; never freed.
///
/// # Safety
/// `r` must come from [`envmon_record_decode`].
#[no_mangle]
pub unsafe extern "C" fn envmon_record_metric(r: *const EnvmonRecord) -> *const c_char {
    let Some(r) = r.as_ref() else { return ptr::null() };
    match r.rec.metric {
        Metric::TempC => c"temp_c".as_ptr(),
        Metric::HumidityPct => c"humidity_pct".as_ptr(),
        Metric::PressureHpa => c"pressure_hpa".as_ptr(),
        Metric::FlowPulses => c"flow_pulses".as_ptr(),
        Metric::Leak => c"leak".as_ptr(),
        Metric::Heartbeat => c"heartbeat".as_ptr(),
    }
}

/// # Safety
/// `r` must come from [`envmon_record_decode`].
#[no_mangle]
pub unsafe extern "C" fn envmon_record_value(r: *const EnvmonRecord) -> f64 {
    r.as_ref().map_or(f64::NAN, |r| r.rec.value)
}

/// # Safety
/// `r` must come from [`envmon_record_decode`].
#[no_mangle]
pub unsafe extern "C" fn envmon_record_timestamp_ms(r: *const EnvmonRecord) -> i64 {
    r.as_ref().map_or(0, |r| r.rec.timestamp_ms)
}

/// # Safety
/// `r` must come from [`envmon_record_decode`].
#[no_mangle]
pub unsafe extern "C" fn envmon_record_seq(r: *const EnvmonRecord) -> u64 {
    r.as_ref().map_or(0, |r| r.rec.seq)
}

/// # Safety
/// `r` must come from [`envmon_record_decode`].
#[no_mangle]
pub unsafe extern "C" fn envmon_record_port(r: *const EnvmonRecord) -> u8 {
    r.as_ref().map_or(0, |r| r.rec.port)
}

/// # Safety
/// `r` must come from [`envmon_record_decode`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn envmon_record_free(r: *mut EnvmonRecord) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

fn consolidation(code: u8) -> Option<Consolidation> {
    match code {
        0 => Some(Consolidation::Avg),
        1 => Some(Consolidation::Min),
        2 => Some(Consolidation::Max),
        3 => Some(Consolidation::Last),
        _ => None,
    }
}

/// New empty archive with `n` tiers. Returns null on error.
///
/// # Safety
/// `key` NUL-terminated; `tiers` valid for `n` elements.
#[no_mangle]
pub unsafe extern "C" fn envmon_archive_new(
    key: *const c_char,
    tiers: *const EnvmonTier,
    n: usize,
) -> *mut EnvmonArchive {
    guard_ptr(|| {
        let Ok(key) = str_arg(key, "key") else { return ptr::null_mut() };
        if tiers.is_null() || n == 0 {
            set_error("at least one tier is required");
            return ptr::null_mut();
        }
        let mut specs = Vec::with_capacity(n);
        for t in std::slice::from_raw_parts(tiers, n) {
            let Some(c) = consolidation(t.consolidation) else {
                set_error(format!("unknown consolidation {}", t.consolidation));
                return ptr::null_mut();
            };
            specs.push(TierSpec::new(t.step_s, t.capacity, c));
        }
        match Archive::new(key, &specs) {
            Ok(a) => Box::into_raw(Box::new(EnvmonArchive(a))),
            Err(e) => {
                set_error(e.to_string());
                ptr::null_mut()
            }
        }
    })
}

/// Loads an archive file. Returns null on error.
///
/// # Safety
/// Strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn envmon_archive_open(key: *const c_char, path: *const c_char) -> *mut EnvmonArchive {
    guard_ptr(|| {
        let (Ok(key), Ok(path)) = (str_arg(key, "key"), str_arg(path, "path")) else { return ptr::null_mut() };
        match Archive::open(key, Path::new(path)) {
            Ok(a) => Box::into_raw(Box::new(EnvmonArchive(a))),
            Err(e) => {
                set_error(e.to_string());
                ptr::null_mut()
            }
        }
    })
}

/// # Safety
/// `a` must be a live archive handle.
#[no_mangle]
pub unsafe extern "C" fn envmon_archive_append(a: *mut EnvmonArchive, ts_ms: i64, value: f64) -> EnvmonStatus {
    guard(|| {
        let Some(a) = a.as_mut() else { return fail(EnvmonStatus::NullPointer, "null archive") };
        match a.0.append(ts_ms, value) {
            Ok(()) => EnvmonStatus::Ok,
            Err(e) => fail(EnvmonStatus::Storage, e.to_string()),
        }
    })
}

/// Writes up to `cap` points of `[t_from, t_to]`, downsampled to at most
/// `max_points`, into `ts_out`/`v_out`; `n_out` receives the count.
///
/// # Safety
/// `a` live; output arrays valid for `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn envmon_archive_query(
    a: *const EnvmonArchive,
    t_from: i64,
    t_to: i64,
    max_points: usize,
    ts_out: *mut i64,
    v_out: *mut f64,
    cap: usize,
    n_out: *mut usize,
) -> EnvmonStatus {
    guard(|| {
        let Some(a) = a.as_ref() else { return fail(EnvmonStatus::NullPointer, "null archive") };
        if n_out.is_null() || (cap > 0 && (ts_out.is_null() || v_out.is_null())) {
            return fail(EnvmonStatus::NullPointer, "null output");
        }
        let pts = a.0.query(t_from, t_to, max_points);
        *n_out = pts.len();
        if pts.len() > cap {
            return fail(EnvmonStatus::BufferTooSmall, format!("need {} points", pts.len()));
        }
        for (i, (ts, v)) in pts.into_iter().enumerate() {
            *ts_out.add(i) = ts;
            *v_out.add(i) = v;
        }
        EnvmonStatus::Ok
    })
}

/// # Safety
/// `a` live; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn envmon_archive_save(a: *const EnvmonArchive, path: *const c_char) -> EnvmonStatus {
    guard(|| {
        let Some(a) = a.as_ref() else { return fail(EnvmonStatus::NullPointer, "null archive") };
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match a.0.save(Path::new(path)) {
            Ok(()) => EnvmonStatus::Ok,
            Err(e) => fail(EnvmonStatus::Storage, e.to_string()),
        }
    })
}

/// # Safety
/// `a` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn envmon_archive_free(a: *mut EnvmonArchive) {
    if !a.is_null() {
        drop(Box::from_raw(a));
    }
}
