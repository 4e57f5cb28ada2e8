use std::error::Error;
use std::fs::{self, File};
use std::io::{self, Write};
use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use envmon::calibration::{
    deviation_range, ds18b20_offset, read_readings_csv, recalibrate_detailed, ChamberSweep, DeviceConstants,
};
use envmon::collector::Collector;
use envmon::config::{resolve_config_path, Fault, Topology};
use envmon::net::{query_status, spawn_collector, wall_clock, Fleet, ServerOptions};
use envmon::onewire::{bus_health, BusTopology};
use envmon::poe::TcpPowerClient;
use envmon::sim::Simulation;
use envmon::storage::{default_tiers, Storage};

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "envmon", version, about = "Environment monitoring: collector, SAU simulator and calibration tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the collector service.
    Collect {
        /// Topology file; falls back to $ENVMON_CONFIG.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a simulated fleet, either in lockstep with an internal collector
    /// or over TCP against a running one.
    Simulate(SimulateArgs),
    /// Sensor calibration tools.
    Calib {
        #[command(subcommand)]
        sensor: CalibCmd,
    },
    /// OneWire bus tools.
    Bus {
        #[command(subcommand)]
        cmd: BusCmd,
    },
    /// Read a stored series.
    Query(QueryArgs),
    /// Ask a running collector for its status snapshot.
    Status {
        /// Collector address; defaults to the one in the topology file.
        #[arg(long)]
        collector: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    topology: PathBuf,
    /// wedge-mcu:<sau>:<t>, wedge-agent:<sau>:<t>, short:<sau>:<port>:<t1>-<t2>, corrupt-serial:<sau>:<rate>
    #[arg(long = "fault")]
    faults: Vec<Fault>,
    /// Simulated seconds.
    #[arg(long, default_value_t = 600)]
    duration: u64,
    #[arg(long)]
    seed: Option<u64>,
    /// Send telemetry to this collector over TCP instead of simulating one.
    #[arg(long)]
    collector: Option<String>,
    /// Simulated seconds per real second in TCP mode.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
    /// Where the switch control port listens in TCP mode; defaults to the
    /// topology's switch address.
    #[arg(long)]
    switch_listen: Option<String>,
    /// Write the collector event log here instead of stdout (lockstep mode).
    #[arg(long)]
    event_log: Option<PathBuf>,
    /// Also write the switch event log (lockstep mode).
    #[arg(long)]
    switch_log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CalibCmd {
    Bme280 {
        #[command(subcommand)]
        cmd: Bme280Cmd,
    },
    Ds18b20 {
        #[command(subcommand)]
        cmd: Ds18b20Cmd,
    },
}

#[derive(Subcommand)]
enum Bme280Cmd {
    /// Fit device constants to a chamber sweep CSV (t_elapsed_s,t_ref_c,t_raw).
    Fit {
        csv: PathBuf,
        /// Accept ramps faster than 0.2 °C/min.
        #[arg(long)]
        force: bool,
    },
    /// Error of the factory constants relative to a fresh calibration.
    Deviation {
        /// d1,d2,d3
        #[arg(long, allow_hyphen_values = true)]
        factory: DeviceConstants,
        /// d1,d2,d3
        #[arg(long = "new", allow_hyphen_values = true)]
        fresh: DeviceConstants,
        /// lo:hi in °C
        #[arg(long, default_value = "-40:60", allow_hyphen_values = true)]
        range: String,
    },
}

#[derive(Subcommand)]
enum Ds18b20Cmd {
    /// Offset from bath readings against a reference temperature.
    Offset {
        csv: PathBuf,
        #[arg(long = "ref", allow_hyphen_values = true)]
        reference: f64,
    },
}

#[derive(Subcommand)]
enum BusCmd {
    /// Predicted recovery time and discovery reliability.
    Health {
        #[arg(long)]
        radius: f64,
        #[arg(long)]
        sensors: usize,
        #[arg(long, default_value_t = 0)]
        splitters: usize,
    },
}

#[derive(Args)]
struct QueryArgs {
    /// Series key, sau:port:sensor:metric
    key: String,
    #[arg(long, allow_hyphen_values = true)]
    from: i64,
    #[arg(long, allow_hyphen_values = true)]
    to: i64,
    #[arg(long)]
    csv: bool,
    #[arg(long, default_value_t = 10_000)]
    max_points: usize,
    /// Archive directory; defaults to the topology's storage_dir.
    #[arg(long)]
    storage_dir: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Collect { config } => collect(config.as_deref()),
        Cmd::Simulate(args) => simulate(args),
        Cmd::Calib { sensor: CalibCmd::Bme280 { cmd: Bme280Cmd::Fit { csv, force } } } => {
            let sweep = ChamberSweep::from_csv_path(&csv, force)?;
            print!("{}", recalibrate_detailed(&sweep)?.report());
            Ok(())
        }
        Cmd::Calib { sensor: CalibCmd::Bme280 { cmd: Bme280Cmd::Deviation { factory, fresh, range } } } => {
            let (lo, hi) = parse_range(&range)?;
            println!("{}", deviation_range(&factory, &fresh, lo, hi)?);
            Ok(())
        }
        Cmd::Calib { sensor: CalibCmd::Ds18b20 { cmd: Ds18b20Cmd::Offset { csv, reference } } } => {
            let readings = read_readings_csv(File::open(&csv).map_err(|e| format!("{}: {e}", csv.display()))?)?;
            let cal = ds18b20_offset(&readings, reference)?;
            println!("offset_k={}\nn_samples={}", cal.offset, cal.n_samples);
            Ok(())
        }
        Cmd::Bus { cmd: BusCmd::Health { radius, sensors, splitters } } => {
            if radius.is_nan() || radius < 0.0 {
                return Err("radius must be non-negative".into());
            }
            println!("{}", bus_health(&BusTopology { radius_m: radius, n_sensors: sensors, n_splitters: splitters }));
            Ok(())
        }
        Cmd::Query(q) => query(q),
        Cmd::Status { collector, config } => {
            let addr = match collector {
                Some(a) => a,
                None => load_topology(config.as_deref())?.collector.listen,
            };
            print!("{}", query_status(&addr).map_err(|e| format!("{addr}: {e}"))?);
            Ok(())
        }
    }
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let bad = || format!("range must look like -40:60, got {s:?}");
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = a.trim().parse().map_err(|_| bad())?;
    let hi: f64 = b.trim().parse().map_err(|_| bad())?;
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(bad().into());
    }
    Ok((lo, hi))
}

fn load_topology(path: Option<&Path>) -> Result<Topology> {
    let path = resolve_config_path(path)?;
    Ok(Topology::load(&path)?)
}

fn collect(config: Option<&Path>) -> Result<()> {
    let topo = load_topology(config)?;
    let storage = match &topo.collector.storage_dir {
        Some(dir) => Storage::open_dir(dir, topo.storage.tiers.clone())?,
        None => Storage::in_memory(topo.storage.tiers.clone())?,
    };
    let clock = wall_clock();
    let now = clock();
    let mut collector = Collector::new(topo.watchdog_config(), topo.alarms.clone(), storage);
    for s in &topo.saus {
        collector.register(&s.id, s.switch_port, now);
    }
    let power = Box::new(TcpPowerClient::new(topo.collector.switch.as_str())?);
    let opts = ServerOptions {
        listen: topo.collector.listen.clone(),
        event_log: topo.collector.event_log.clone(),
        webhook: topo.collector.webhook.clone(),
        ..ServerOptions::default()
    };
    let handle = spawn_collector(opts, collector, power, clock)?;
    log::warn!("collector listening on {}", handle.local_addr());
    handle.wait();
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let topo = Topology::load(&args.topology)?;
    match &args.collector {
        None => {
            let mut sim = Simulation::new(&topo, args.faults, args.seed)?;
            sim.run(args.duration)?;
            match &args.event_log {
                Some(p) => fs::write(p, sim.event_log())?,
                None => io::stdout().write_all(sim.event_log().as_bytes())?,
            }
            if let Some(p) = &args.switch_log {
                fs::write(p, sim.switch_log())?;
            }
            eprint!("{}", sim.collector().status());
            Ok(())
        }
        Some(addr) => {
            let collector: SocketAddr =
                addr.to_socket_addrs()?.next().ok_or_else(|| format!("{addr} did not resolve"))?;
            let fleet = Fleet::new(&topo, args.faults, args.seed, args.speed)?;
            let listen = args.switch_listen.unwrap_or_else(|| topo.collector.switch.clone());
            let stop = Arc::new(AtomicBool::new(false));
            let listener = TcpListener::bind(&listen).map_err(|e| format!("switch port {listen}: {e}"))?;
            let _switch = fleet.serve_switch(listener, Arc::clone(&stop));
            let report = fleet.run(collector, args.duration);
            for u in &report.units {
                println!(
                    "{} lines={} queue_drops={} serial_drops={} connects={}",
                    u.sau_id, u.lines_queued, u.queue_drops, u.counters.serial_drops, u.connects
                );
            }
            for e in &report.switch_events {
                println!("switch {e}");
            }
            stop.store(true, std::sync::atomic::Ordering::Relaxed);
            Ok(())
        }
    }
}

fn query(q: QueryArgs) -> Result<()> {
    let (dir, tiers) = match q.storage_dir {
        Some(d) => (d, default_tiers()),
        None => {
            let topo = load_topology(q.config.as_deref())?;
            let dir = topo.collector.storage_dir.clone().ok_or("topology has no storage_dir")?;
            (dir, topo.storage.tiers)
        }
    };
    if !dir.is_dir() {
        return Err(format!("{}: no such directory", dir.display()).into());
    }
    let storage = Storage::open_dir(&dir, tiers)?;
    let archive = storage.get(&q.key).ok_or_else(|| format!("no series {}", q.key))?;
    if q.csv {
        print!("{}", archive.to_csv(q.from, q.to, q.max_points));
    } else {
        for (ts, v) in archive.query(q.from, q.to, q.max_points) {
            println!("{ts} {v}");
        }
    }
    Ok(())
}
