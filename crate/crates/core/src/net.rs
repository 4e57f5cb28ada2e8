//! TCP plumbing: the collector service, a networked SAU fleet and the switch
//! control server.
//!
//! Collector side: one reader thread per connection feeds a bounded channel
//! drained by a single collector thread, which owns health state and storage.
//! Switch requests run on a worker so a 3 s power cycle never stalls ingest.
//! A connection that sends the line `status` gets the status snapshot back,
//! terminated by an empty line.
//!
//! Fleet side: every unit has its own thread, an outbound queue that drops
//! its oldest line when full, and a sender thread per connection.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crate::collector::{Action, Collector, Event};
use crate::config::{Fault, Topology};
use crate::poe::{serve_until, PowerControl, SharedSwitch, Switch, SwitchEvent};
use crate::protocol::{decode, decode_command, MAX_LINE_BYTES};
use crate::sau::{AgentPhase, Sau, SauCounters, SauError};

/// Milliseconds on some timeline, callable from any thread.
pub type Clock = Arc<dyn Fn() -> i64 + Send + Sync>;

pub fn wall_clock() -> Clock {
    Arc::new(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as i64).unwrap_or(0))
}

/// Starts at `epoch_ms` and runs `speed` times faster than real time.
pub fn scaled_clock(epoch_ms: i64, speed: f64) -> Clock {
    let start = Instant::now();
    Arc::new(move || epoch_ms + (start.elapsed().as_secs_f64() * 1000.0 * speed) as i64)
}

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub listen: String,
    pub queue_capacity: usize,
    /// Watchdog period on the collector clock.
    pub tick_ms: i64,
    /// Storage flush period on the collector clock.
    pub flush_ms: i64,
    pub event_log: Option<PathBuf>,
    pub webhook: Option<String>,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions {
            listen: format!("127.0.0.1:{}", crate::protocol::DEFAULT_COLLECTOR_PORT),
            queue_capacity: 65_536,
            tick_ms: 1000,
            flush_ms: 60_000,
            event_log: None,
            webhook: None,
        }
    }
}

enum Msg {
    Line { line: String, arrival_ms: i64, conn: Arc<TcpStream> },
    Status(mpsc::Sender<String>),
    ActionDone(Action, Result<(), String>),
    Shutdown,
}

pub struct CollectorHandle {
    addr: SocketAddr,
    tx: SyncSender<Msg>,
    stop: Arc<AtomicBool>,
    collector: Option<JoinHandle<Collector>>,
    acceptor: Option<JoinHandle<()>>,
}

impl CollectorHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn status(&self) -> String {
        let (tx, rx) = mpsc::channel();
        if self.tx.send(Msg::Status(tx)).is_err() {
            return String::new();
        }
        rx.recv().unwrap_or_default()
    }

    /// Stops accepting, drains what is queued, flushes storage and hands the
    /// collector back.
    pub fn shutdown(mut self) -> Collector {
        self.stop.store(true, Ordering::Relaxed);
        let _ = self.tx.send(Msg::Shutdown);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        self.collector.take().expect("joined once").join().expect("collector thread")
    }

    /// Blocks until the collector thread exits.
    pub fn wait(mut self) -> Collector {
        self.collector.take().expect("joined once").join().expect("collector thread")
    }
}

/// Binds the telemetry port and starts the collector service.
pub fn spawn_collector(
    opts: ServerOptions,
    collector: Collector,
    power: Box<dyn PowerControl>,
    clock: Clock,
) -> io::Result<CollectorHandle> {
    let listener = TcpListener::bind(&opts.listen)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = mpsc::sync_channel::<Msg>(opts.queue_capacity.max(1));
    let stop = Arc::new(AtomicBool::new(false));

    let (power_tx, power_rx) = mpsc::channel::<Action>();
    {
        let tx = tx.clone();
        thread::spawn(move || power_worker(power, power_rx, tx));
    }

    let acceptor = {
        let tx = tx.clone();
        let stop = Arc::clone(&stop);
        let clock = Arc::clone(&clock);
        listener.set_nonblocking(true)?;
        thread::spawn(move || accept_loop(listener, tx, stop, clock))
    };

    let sink = match &opts.event_log {
        Some(p) => Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?)),
        None => None,
    };
    let collector = thread::spawn(move || collector_loop(collector, rx, power_tx, clock, opts, sink));
    Ok(CollectorHandle { addr, tx, stop, collector: Some(collector), acceptor: Some(acceptor) })
}

fn power_worker(mut power: Box<dyn PowerControl>, rx: Receiver<Action>, tx: SyncSender<Msg>) {
    for action in rx {
        let result = match &action {
            Action::PowerCycle { port, off_ms, .. } => power.cycle(*port, *off_ms).map_err(|e| e.to_string()),
            Action::SendCommand(_) => Err("not a switch action".into()),
        };
        if tx.send(Msg::ActionDone(action, result)).is_err() {
            return;
        }
    }
}

fn accept_loop(listener: TcpListener, tx: SyncSender<Msg>, stop: Arc<AtomicBool>, clock: Clock) {
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                if stream.set_nonblocking(false).is_err() {
                    continue;
                }
                let _ = stream.set_nodelay(true);
                let tx = tx.clone();
                let clock = Arc::clone(&clock);
                thread::spawn(move || {
                    if let Err(e) = read_conn(stream, tx, clock) {
                        log::debug!("connection from {peer} closed: {e}");
                    }
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => log::warn!("accept: {e}"),
        }
    }
}

fn read_conn(stream: TcpStream, tx: SyncSender<Msg>, clock: Clock) -> io::Result<()> {
    let conn = Arc::new(stream.try_clone()?);
    conn.set_write_timeout(Some(Duration::from_secs(1)))?;
    let mut reader = BufReader::new(stream);
    let mut buf = String::new();
    loop {
        buf.clear();
        // cap the read so a peer cannot grow the buffer without bound
        let n = (&mut reader).take(4 * MAX_LINE_BYTES as u64).read_line(&mut buf)?;
        if n == 0 {
            return Ok(());
        }
        if buf.trim_end() == "status" {
            let (rtx, rrx) = mpsc::channel();
            if tx.send(Msg::Status(rtx)).is_err() {
                return Ok(());
            }
            let snapshot = rrx.recv().unwrap_or_default();
            (&*conn).write_all(format!("{snapshot}\n").as_bytes())?;
            continue;
        }
        let msg = Msg::Line { line: std::mem::take(&mut buf), arrival_ms: clock(), conn: Arc::clone(&conn) };
        // blocking send: back-pressure reaches the unit through TCP
        if tx.send(msg).is_err() {
            return Ok(());
        }
    }
}

fn collector_loop(
    mut collector: Collector,
    rx: Receiver<Msg>,
    power_tx: mpsc::Sender<Action>,
    clock: Clock,
    opts: ServerOptions,
    mut sink: Option<BufWriter<File>>,
) -> Collector {
    let mut conns: HashMap<String, Arc<TcpStream>> = HashMap::new();
    let mut next_tick = clock() + opts.tick_ms;
    let mut next_flush = clock() + opts.flush_ms;
    loop {
        let msg = rx.recv_timeout(Duration::from_millis(20));
        let now = clock();
        match msg {
            Ok(Msg::Line { line, arrival_ms, conn }) => match decode(&line) {
                Ok(rec) => {
                    if !conns.get(&rec.sau_id).is_some_and(|c| Arc::ptr_eq(c, &conn)) {
                        conns.insert(rec.sau_id.clone(), conn);
                    }
                    collector.ingest(&rec, arrival_ms);
                }
                Err(e) => collector.count_decode_error(&e),
            },
            Ok(Msg::Status(reply)) => {
                let _ = reply.send(collector.status());
            }
            Ok(Msg::ActionDone(action, result)) => collector.action_result(&action, result, now),
            Ok(Msg::Shutdown) | Err(RecvTimeoutError::Disconnected) => break,
            Err(RecvTimeoutError::Timeout) => {}
        }
        if now >= next_tick {
            next_tick = now + opts.tick_ms;
            for action in collector.watchdog_tick(now) {
                match &action {
                    Action::SendCommand(cmd) => {
                        let result = match (conns.get(cmd.sau_id()), cmd.encode()) {
                            (Some(c), Ok(line)) => (&**c).write_all(line.as_bytes()).map_err(|e| e.to_string()),
                            (None, _) => Err("SAU not connected".into()),
                            (_, Err(e)) => Err(e.to_string()),
                        };
                        collector.action_result(&action, result, now);
                    }
                    Action::PowerCycle { .. } => {
                        let _ = power_tx.send(action);
                    }
                }
            }
        }
        write_events(&mut collector, &mut sink, opts.webhook.as_deref());
        if now >= next_flush {
            next_flush = now + opts.flush_ms;
            if let Err(e) = collector.storage().flush() {
                log::error!("storage flush: {e}");
            }
        }
    }
    // take whatever the readers already queued
    while let Ok(msg) = rx.try_recv() {
        if let Msg::Line { line, arrival_ms, .. } = msg {
            let _ = collector.ingest_line(&line, arrival_ms);
        }
    }
    write_events(&mut collector, &mut sink, opts.webhook.as_deref());
    if let Err(e) = collector.storage().flush() {
        log::error!("storage flush: {e}");
    }
    collector
}

fn write_events(collector: &mut Collector, sink: &mut Option<BufWriter<File>>, webhook: Option<&str>) {
    let events = collector.drain_events();
    if events.is_empty() {
        return;
    }
    if let Some(w) = sink {
        for e in &events {
            let _ = writeln!(w, "{e}");
        }
        let _ = w.flush();
    }
    for e in &events {
        log::info!("{e}");
    }
    if let Some(url) = webhook {
        let alarms: Vec<String> = events.iter().filter(|e| e.kind.is_alarm()).map(Event::to_string).collect();
        if !alarms.is_empty() {
            let url = url.to_string();
            thread::spawn(move || {
                if let Err(e) = post_webhook(&url, &alarms.join("\n")) {
                    log::warn!("webhook {url}: {e}");
                }
            });
        }
    }
}

/// Fire-and-forget `POST` to a plain `http://host[:port]/path` endpoint.
pub fn post_webhook(url: &str, body: &str) -> io::Result<()> {
    let rest = url
        .strip_prefix("http://")
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "only http:// webhooks are supported"))?;
    let (hostport, path) = match rest.find('/') {
        Some(i) => (&rest[..i], &rest[i..]),
        None => (rest, "/"),
    };
    let target = if hostport.contains(':') { hostport.to_string() } else { format!("{hostport}:80") };
    let addr = target
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "webhook host did not resolve"))?;
    let mut s = TcpStream::connect_timeout(&addr, Duration::from_secs(2))?;
    s.set_write_timeout(Some(Duration::from_secs(2)))?;
    s.set_read_timeout(Some(Duration::from_secs(2)))?;
    write!(
        s,
        "POST {path} HTTP/1.1\r\nHost: {hostport}\r\nContent-Type: text/plain\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    let mut status = String::new();
    BufReader::new(s).read_line(&mut status)?;
    Ok(())
}

/// Asks a running collector for its status snapshot.
pub fn query_status(addr: impl ToSocketAddrs) -> io::Result<String> {
    let mut s = TcpStream::connect(addr)?;
    s.set_read_timeout(Some(Duration::from_secs(5)))?;
    s.write_all(b"status\n")?;
    let mut out = String::new();
    let mut r = BufReader::new(s);
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 || line == "\n" {
            break;
        }
        out.push_str(&line);
    }
    Ok(out)
}

/// Bounded line queue shared by a unit's loop and its sender thread.
struct Outbox {
    state: Mutex<(VecDeque<String>, bool)>,
    ready: Condvar,
    capacity: usize,
    drops: AtomicU64,
}

impl Outbox {
    fn new(capacity: usize) -> Self {
        Outbox { state: Mutex::new((VecDeque::new(), false)), ready: Condvar::new(), capacity, drops: AtomicU64::new(0) }
    }

    fn push(&self, line: String) {
        let mut st = self.state.lock().expect("outbox");
        if st.0.len() == self.capacity {
            st.0.pop_front();
            self.drops.fetch_add(1, Ordering::Relaxed);
        }
        st.0.push_back(line);
        self.ready.notify_one();
    }

    /// Lost with the unit's RAM on power loss; not counted as drops.
    fn clear(&self) {
        self.state.lock().expect("outbox").0.clear();
    }

    fn close(&self) {
        self.state.lock().expect("outbox").1 = true;
        self.ready.notify_all();
    }

    /// Everything queued, or `None` once closed and empty.
    fn take(&self) -> Option<Vec<String>> {
        let mut st = self.ready.wait_while(self.state.lock().expect("outbox"), |s| s.0.is_empty() && !s.1).expect("outbox");
        if st.0.is_empty() {
            return None;
        }
        Some(st.0.drain(..).collect())
    }
}

fn sender(stream: TcpStream, outbox: Arc<Outbox>) -> io::Result<()> {
    let mut w = BufWriter::with_capacity(64 * 1024, stream);
    while let Some(batch) = outbox.take() {
        for line in batch {
            w.write_all(line.as_bytes())?;
        }
        w.flush()?;
    }
    Ok(())
}

struct Link {
    stream: TcpStream,
    outbox: Arc<Outbox>,
    sender: JoinHandle<io::Result<()>>,
}

impl Link {
    fn open(addr: SocketAddr, sau: Arc<Mutex<Sau>>, capacity: usize) -> io::Result<Link> {
        let stream = TcpStream::connect_timeout(&addr, Duration::from_secs(2))?;
        stream.set_nodelay(true)?;
        let outbox = Arc::new(Outbox::new(capacity));
        let sender = {
            let (s, o) = (stream.try_clone()?, Arc::clone(&outbox));
            thread::spawn(move || sender(s, o))
        };
        let reader = stream.try_clone()?;
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let Ok(line) = line else { return };
                match decode_command(&line) {
                    Ok(cmd) => {
                        let mut s = sau.lock().expect("sau lock");
                        // a wedged agent never reads its socket
                        if *s.agent_phase() == AgentPhase::Alive {
                            if let Err(e) = s.handle_command(&cmd) {
                                log::warn!("{}: {e}", s.id());
                            }
                        }
                    }
                    Err(e) => log::warn!("bad command {line:?}: {e}"),
                }
            }
        });
        Ok(Link { stream, outbox, sender })
    }

    fn close(self) -> u64 {
        self.outbox.close();
        let _ = self.sender.join();
        let _ = self.stream.shutdown(Shutdown::Both);
        self.outbox.drops.load(Ordering::Relaxed)
    }

    fn drop_now(self) -> u64 {
        self.outbox.clear();
        let _ = self.stream.shutdown(Shutdown::Both);
        self.close()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UnitReport {
    pub sau_id: String,
    pub counters: SauCounters,
    pub lines_queued: u64,
    pub queue_drops: u64,
    pub connects: u64,
}

#[derive(Debug, Clone, Default)]
pub struct FleetReport {
    pub units: Vec<UnitReport>,
    pub switch_events: Vec<SwitchEvent>,
}

impl FleetReport {
    pub fn lines_queued(&self) -> u64 {
        self.units.iter().map(|u| u.lines_queued).sum()
    }

    pub fn queue_drops(&self) -> u64 {
        self.units.iter().map(|u| u.queue_drops).sum()
    }
}

/// A fleet of emulated units talking TCP to a collector in (scaled) real
/// time, with the switch simulator they are plugged into.
pub struct Fleet {
    topology: Topology,
    saus: BTreeMap<String, Arc<Mutex<Sau>>>,
    switch: Arc<SharedSwitch>,
    switch_log: Arc<Mutex<Vec<SwitchEvent>>>,
    faults: Vec<Fault>,
    speed: f64,
    queue_capacity: usize,
}

impl Fleet {
    pub fn new(topology: &Topology, faults: Vec<Fault>, seed: Option<u64>, speed: f64) -> Result<Fleet, SauError> {
        let mut topology = topology.clone();
        if let Some(s) = seed {
            topology.seed = s;
        }
        let env0 = topology.environment.sample(0.0);
        let mut saus = BTreeMap::new();
        let mut switch = Switch::with_ports(topology.switch.ports);
        for (i, cfg) in topology.sau_configs().into_iter().enumerate() {
            if let Some(p) = topology.saus[i].switch_port {
                switch.attach(p, &cfg.id).map_err(|e| SauError::Config(e.to_string()))?;
            }
            saus.insert(cfg.id.clone(), Arc::new(Mutex::new(Sau::power_on(cfg, &env0)?)));
        }
        for f in &faults {
            if !saus.contains_key(f.sau()) {
                return Err(SauError::Config(format!("fault {f} names an unknown SAU")));
            }
        }
        let speed = if speed > 0.0 { speed } else { 1.0 };
        let clock = scaled_clock(topology.collector.epoch_ms, speed);
        let switch_log = Arc::new(Mutex::new(Vec::new()));
        let hook_saus = saus.clone();
        let hook_log = Arc::clone(&switch_log);
        let switch = Arc::new(
            SharedSwitch::new(switch, move || clock())
                .with_speed(speed)
                .on_transition(move |e: &SwitchEvent| {
                    hook_log.lock().expect("switch log").push(e.clone());
                    if let Some(s) = e.sau_id.as_ref().and_then(|id| hook_saus.get(id)) {
                        let mut s = s.lock().expect("sau lock");
                        if e.on {
                            s.power_restore();
                        } else {
                            s.power_off();
                        }
                    }
                }),
        );
        Ok(Fleet { topology, saus, switch, switch_log, faults, speed, queue_capacity: 4096 })
    }

    pub fn with_queue_capacity(mut self, n: usize) -> Self {
        self.queue_capacity = n.max(1);
        self
    }

    pub fn switch(&self) -> Arc<SharedSwitch> {
        Arc::clone(&self.switch)
    }

    /// Serves the switch control protocol on `listener` until `stop` is set.
    pub fn serve_switch(&self, listener: TcpListener, stop: Arc<AtomicBool>) -> JoinHandle<io::Result<()>> {
        let sw = Arc::clone(&self.switch);
        thread::spawn(move || serve_until(listener, sw, stop))
    }

    /// Runs every unit for `duration_s` simulated seconds against `collector`.
    pub fn run(&self, collector: SocketAddr, duration_s: u64) -> FleetReport {
        let start = Instant::now();
        let period = Duration::from_secs_f64(1.0 / self.speed);
        let handles: Vec<JoinHandle<UnitReport>> = self
            .saus
            .iter()
            .map(|(id, sau)| {
                let sau = Arc::clone(sau);
                let faults: Vec<Fault> = self.faults.iter().filter(|f| f.sau() == id).cloned().collect();
                let topology = self.topology.clone();
                let capacity = self.queue_capacity;
                thread::spawn(move || {
                    run_unit(sau, faults, &topology, collector, start, period, duration_s, capacity)
                })
            })
            .collect();
        let units = handles.into_iter().map(|h| h.join().expect("unit thread")).collect();
        let switch_events = self.switch_log.lock().expect("switch log").clone();
        FleetReport { units, switch_events }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_unit(
    sau: Arc<Mutex<Sau>>,
    faults: Vec<Fault>,
    topology: &Topology,
    collector: SocketAddr,
    start: Instant,
    period: Duration,
    duration_s: u64,
    capacity: usize,
) -> UnitReport {
    let mut report = UnitReport { sau_id: sau.lock().expect("sau lock").id().to_string(), ..Default::default() };
    let mut link: Option<Link> = None;
    let mut started = vec![false; faults.len()];
    let mut finished = vec![false; faults.len()];
    for k in 0..duration_s {
        let due = start + period * k as u32;
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            thread::sleep(wait);
        }
        let t = k as f64;
        let now = topology.collector.epoch_ms + k as i64 * 1000;
        let env = topology.environment.sample(t);
        let (records, phase) = {
            let mut s = sau.lock().expect("sau lock");
            for (i, f) in faults.iter().enumerate() {
                if finished[i] {
                    continue;
                }
                match f {
                    Fault::WedgeMcu { at_s, .. } if t >= *at_s => {
                        s.wedge_mcu();
                        finished[i] = true;
                    }
                    Fault::WedgeAgent { at_s, .. } if t >= *at_s => {
                        s.wedge_agent();
                        finished[i] = true;
                    }
                    Fault::Short { port, from_s, to_s, .. } => {
                        if !started[i] && t >= *from_s {
                            let _ = s.short_port(*port);
                            started[i] = true;
                        }
                        if started[i] && t >= *to_s {
                            let _ = s.clear_short(*port);
                            finished[i] = true;
                        }
                    }
                    Fault::CorruptSerial { rate, .. } => {
                        s.set_serial_corruption(*rate);
                        finished[i] = true;
                    }
                    _ => {}
                }
            }
            let records = s.tick(now, &env);
            (records, s.agent_phase().clone())
        };
        match phase {
            AgentPhase::Off | AgentPhase::Booting(_) => {
                if let Some(l) = link.take() {
                    report.queue_drops += l.drop_now();
                }
                continue;
            }
            AgentPhase::Alive if link.is_none() => match Link::open(collector, Arc::clone(&sau), capacity) {
                Ok(l) => {
                    report.connects += 1;
                    link = Some(l);
                }
                Err(e) => log::debug!("{}: connect {collector}: {e}", report.sau_id),
            },
            _ => {}
        }
        if let Some(l) = &link {
            for rec in records {
                if let Ok(line) = rec.encode() {
                    report.lines_queued += 1;
                    l.outbox.push(line);
                }
            }
        }
    }
    if let Some(l) = link.take() {
        report.queue_drops += l.close();
    }
    report.counters = sau.lock().expect("sau lock").counters();
    report
}
