//! Simulated PoE switch with per-port power control.
//!
//! [`Switch`] is the clocked core used by the lockstep simulator. [`SharedSwitch`]
//! wraps it for concurrent callers in real time, and [`serve`] exposes it over a
//! line protocol:
//!
//! ```text
//! power <port> on|off   -> ok | err <reason>
//! cycle <port> <ms>     -> ok | err <reason>
//! ```
//!
//! The switch itself never loses power.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use thiserror::Error;

pub const DEFAULT_SWITCH_PORT: u16 = 4548;
pub const DEFAULT_CYCLE_OFF_MS: u64 = 3_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PoeError {
    #[error("no such port {0}")]
    NoSuchPort(u16),
    #[error("malformed request: {0}")]
    Protocol(String),
    #[error("switch replied: {0}")]
    Remote(String),
    #[error("switch unreachable: {0}")]
    Io(String),
}

impl From<io::Error> for PoeError {
    fn from(e: io::Error) -> Self {
        PoeError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwitchPort {
    pub port_no: u16,
    pub powered: bool,
    pub attached_sau: Option<String>,
    restore_at_ms: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cause {
    Set,
    Cycle,
}

/// One power transition. Requests that change nothing produce no event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwitchEvent {
    pub timestamp_ms: i64,
    pub port: u16,
    pub on: bool,
    pub sau_id: Option<String>,
    pub cause: Cause,
}

impl fmt::Display for SwitchEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} port{} {} {} {}",
            self.timestamp_ms,
            self.port,
            if self.on { "on" } else { "off" },
            self.sau_id.as_deref().unwrap_or("-"),
            match self.cause {
                Cause::Set => "set",
                Cause::Cycle => "cycle",
            }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CycleStart {
    Started,
    /// A cycle on this port was already in progress; it covers this request.
    Coalesced,
}

#[derive(Debug, Clone, Default)]
pub struct Switch {
    ports: BTreeMap<u16, SwitchPort>,
    events: Vec<SwitchEvent>,
}

impl Switch {
    /// A switch with ports `1..=n`, all powered.
    pub fn with_ports(n: u16) -> Self {
        let mut s = Switch::default();
        for p in 1..=n {
            s.ports.insert(p, SwitchPort { port_no: p, powered: true, attached_sau: None, restore_at_ms: None });
        }
        s
    }

    pub fn attach(&mut self, port: u16, sau_id: &str) -> Result<(), PoeError> {
        let p = self.ports.get_mut(&port).ok_or(PoeError::NoSuchPort(port))?;
        p.attached_sau = Some(sau_id.to_string());
        Ok(())
    }

    pub fn port(&self, port: u16) -> Option<&SwitchPort> {
        self.ports.get(&port)
    }

    pub fn ports(&self) -> impl Iterator<Item = &SwitchPort> {
        self.ports.values()
    }

    pub fn powered(&self, port: u16) -> Option<bool> {
        self.ports.get(&port).map(|p| p.powered)
    }

    pub fn is_cycling(&self, port: u16) -> bool {
        self.ports.get(&port).is_some_and(|p| p.restore_at_ms.is_some())
    }

    fn flip(&mut self, port: u16, on: bool, now_ms: i64, cause: Cause) -> Option<SwitchEvent> {
        let p = self.ports.get_mut(&port)?;
        if p.powered == on {
            return None;
        }
        p.powered = on;
        let e = SwitchEvent { timestamp_ms: now_ms, port, on, sau_id: p.attached_sau.clone(), cause };
        self.events.push(e.clone());
        Some(e)
    }

    /// Idempotent. Returns the transition, if any. Switching a port on during
    /// a cycle ends the cycle early.
    pub fn set_power(&mut self, port: u16, on: bool, now_ms: i64) -> Result<Option<SwitchEvent>, PoeError> {
        let p = self.ports.get_mut(&port).ok_or(PoeError::NoSuchPort(port))?;
        if on {
            p.restore_at_ms = None;
        }
        Ok(self.flip(port, on, now_ms, Cause::Set))
    }

    /// Powers the port off now and schedules it back on at `now_ms + off_ms`;
    /// [`Switch::tick`] performs the restore.
    pub fn begin_cycle(&mut self, port: u16, off_ms: u64, now_ms: i64) -> Result<CycleStart, PoeError> {
        let p = self.ports.get_mut(&port).ok_or(PoeError::NoSuchPort(port))?;
        if p.restore_at_ms.is_some() {
            return Ok(CycleStart::Coalesced);
        }
        p.restore_at_ms = Some(now_ms.saturating_add(off_ms as i64));
        self.flip(port, false, now_ms, Cause::Cycle);
        Ok(CycleStart::Started)
    }

    /// Completes any cycles due by `now_ms`.
    pub fn tick(&mut self, now_ms: i64) -> Vec<SwitchEvent> {
        let due: Vec<u16> = self
            .ports
            .values()
            .filter(|p| p.restore_at_ms.is_some_and(|t| now_ms >= t))
            .map(|p| p.port_no)
            .collect();
        let mut out = Vec::new();
        for port in due {
            self.ports.get_mut(&port).expect("listed").restore_at_ms = None;
            out.extend(self.flip(port, true, now_ms, Cause::Cycle));
        }
        out
    }

    pub fn events(&self) -> &[SwitchEvent] {
        &self.events
    }

    pub fn drain_events(&mut self) -> Vec<SwitchEvent> {
        std::mem::take(&mut self.events)
    }
}

/// The operation pair the collector needs from a switch backend.
pub trait PowerControl: Send {
    fn set_power(&mut self, port: u16, on: bool) -> Result<(), PoeError>;
    fn cycle(&mut self, port: u16, off_ms: u64) -> Result<(), PoeError>;
}

type Hook = Box<dyn Fn(&SwitchEvent) + Send + Sync>;

/// Real-time switch shared between threads. Mutations are serialized; a
/// second `cycle` on a port already cycling waits for the first to finish.
pub struct SharedSwitch {
    inner: Mutex<Switch>,
    done: Condvar,
    clock: Box<dyn Fn() -> i64 + Send + Sync>,
    hook: Option<Hook>,
    speed: f64,
}

impl SharedSwitch {
    pub fn new(switch: Switch, clock: impl Fn() -> i64 + Send + Sync + 'static) -> Self {
        SharedSwitch { inner: Mutex::new(switch), done: Condvar::new(), clock: Box::new(clock), hook: None, speed: 1.0 }
    }

    /// Simulated milliseconds per real millisecond; shortens cycle waits.
    pub fn with_speed(mut self, speed: f64) -> Self {
        self.speed = if speed > 0.0 { speed } else { 1.0 };
        self
    }

    /// Called once for every transition, after the switch lock is released.
    pub fn on_transition(mut self, f: impl Fn(&SwitchEvent) + Send + Sync + 'static) -> Self {
        self.hook = Some(Box::new(f));
        self
    }

    fn notify(&self, events: &[SwitchEvent]) {
        if let Some(h) = &self.hook {
            events.iter().for_each(h);
        }
    }

    pub fn set_power(&self, port: u16, on: bool) -> Result<(), PoeError> {
        let now = (self.clock)();
        let ev = self.inner.lock().expect("switch lock").set_power(port, on, now)?;
        self.notify(ev.as_slice());
        if on {
            self.done.notify_all();
        }
        Ok(())
    }

    /// Blocks for `off_ms`.
    pub fn cycle(&self, port: u16, off_ms: u64) -> Result<(), PoeError> {
        let mut sw = self.inner.lock().expect("switch lock");
        let before = sw.events().len();
        match sw.begin_cycle(port, off_ms, (self.clock)())? {
            CycleStart::Coalesced => {
                let _sw = self.done.wait_while(sw, |s| s.is_cycling(port)).expect("switch lock");
                return Ok(());
            }
            CycleStart::Started => {}
        }
        let off: Vec<SwitchEvent> = sw.events()[before..].to_vec();
        drop(sw);
        self.notify(&off);
        thread::sleep(Duration::from_secs_f64(off_ms as f64 / 1000.0 / self.speed));
        let mut sw = self.inner.lock().expect("switch lock");
        let on = if sw.is_cycling(port) {
            // restore regardless of the clock reading
            sw.set_power(port, true, (self.clock)())?.into_iter().collect::<Vec<_>>()
        } else {
            Vec::new()
        };
        drop(sw);
        self.done.notify_all();
        self.notify(&on);
        Ok(())
    }

    pub fn snapshot(&self) -> Switch {
        self.inner.lock().expect("switch lock").clone()
    }

    /// Handles one protocol line and returns the reply without newline.
    pub fn handle_line(&self, line: &str) -> String {
        let result = parse_request(line).and_then(|req| match req {
            Request::Power { port, on } => self.set_power(port, on),
            Request::Cycle { port, off_ms } => self.cycle(port, off_ms),
        });
        match result {
            Ok(()) => "ok".into(),
            Err(e) => format!("err {e}"),
        }
    }
}

impl PowerControl for Arc<SharedSwitch> {
    fn set_power(&mut self, port: u16, on: bool) -> Result<(), PoeError> {
        SharedSwitch::set_power(self, port, on)
    }

    fn cycle(&mut self, port: u16, off_ms: u64) -> Result<(), PoeError> {
        SharedSwitch::cycle(self, port, off_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Request {
    Power { port: u16, on: bool },
    Cycle { port: u16, off_ms: u64 },
}

impl fmt::Display for Request {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Request::Power { port, on } => write!(f, "power {port} {}", if *on { "on" } else { "off" }),
            Request::Cycle { port, off_ms } => write!(f, "cycle {port} {off_ms}"),
        }
    }
}

pub fn parse_request(line: &str) -> Result<Request, PoeError> {
    let bad = || PoeError::Protocol(line.trim().to_string());
    let parts: Vec<&str> = line.split_whitespace().collect();
    match parts.as_slice() {
        ["power", port, state] => {
            let port = port.parse().map_err(|_| bad())?;
            let on = match *state {
                "on" => true,
                "off" => false,
                _ => return Err(bad()),
            };
            Ok(Request::Power { port, on })
        }
        ["cycle", port, ms] => Ok(Request::Cycle {
            port: port.parse().map_err(|_| bad())?,
            off_ms: ms.parse().map_err(|_| bad())?,
        }),
        _ => Err(bad()),
    }
}

/// Accepts control connections forever. One thread per connection.
pub fn serve(listener: TcpListener, switch: Arc<SharedSwitch>) -> io::Result<()> {
    serve_until(listener, switch, Arc::new(AtomicBool::new(false)))
}

/// Like [`serve`], returning once `stop` is set.
pub fn serve_until(listener: TcpListener, switch: Arc<SharedSwitch>, stop: Arc<AtomicBool>) -> io::Result<()> {
    listener.set_nonblocking(true)?;
    while !stop.load(Ordering::Relaxed) {
        let stream = match listener.accept() {
            Ok((s, _)) => s,
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(10));
                continue;
            }
            Err(e) => {
                log::warn!("switch accept: {e}");
                continue;
            }
        };
        stream.set_nonblocking(false)?;
        let sw = Arc::clone(&switch);
        thread::spawn(move || {
            if let Err(e) = serve_conn(stream, &sw) {
                log::debug!("switch connection closed: {e}");
            }
        });
    }
    Ok(())
}

fn serve_conn(stream: TcpStream, switch: &SharedSwitch) -> io::Result<()> {
    let mut out = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = switch.handle_line(&line);
        writeln!(out, "{reply}")?;
    }
    Ok(())
}

/// Control-port client. Opens a fresh connection per request so a restarted
/// switch is picked up without reconnect logic.
#[derive(Debug, Clone)]
pub struct TcpPowerClient {
    addr: SocketAddr,
    timeout: Duration,
}

impl TcpPowerClient {
    pub fn new(addr: impl ToSocketAddrs) -> Result<Self, PoeError> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| PoeError::Io("address resolved to nothing".into()))?;
        Ok(TcpPowerClient { addr, timeout: Duration::from_secs(2) })
    }

    pub fn send(&self, req: Request) -> Result<(), PoeError> {
        let mut stream = TcpStream::connect_timeout(&self.addr, self.timeout)?;
        let read_timeout = match req {
            Request::Cycle { off_ms, .. } => self.timeout + Duration::from_millis(off_ms),
            Request::Power { .. } => self.timeout,
        };
        stream.set_read_timeout(Some(read_timeout))?;
        writeln!(stream, "{req}")?;
        let mut reply = String::new();
        BufReader::new(stream).read_line(&mut reply)?;
        match reply.trim() {
            "ok" => Ok(()),
            r => Err(PoeError::Remote(r.strip_prefix("err ").unwrap_or(r).to_string())),
        }
    }
}

impl PowerControl for TcpPowerClient {
    fn set_power(&mut self, port: u16, on: bool) -> Result<(), PoeError> {
        self.send(Request::Power { port, on })
    }

    fn cycle(&mut self, port: u16, off_ms: u64) -> Result<(), PoeError> {
        self.send(Request::Cycle { port, off_ms })
    }
}
