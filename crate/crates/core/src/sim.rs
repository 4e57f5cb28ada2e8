//! Deterministic lockstep fleet: SAUs, switch and collector share one virtual
//! clock advancing in 1 s ticks. Same topology, faults and seed give the same
//! event log byte for byte.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::collector::{Action, Collector, Event};
use crate::config::{Fault, Topology};
use crate::poe::{SwitchEvent, Switch};
use crate::sau::{AgentPhase, Sau, SauError};
use crate::storage::{Storage, StorageError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("fault {0} names an unknown SAU")]
    UnknownSau(String),
    #[error(transparent)]
    Sau(#[from] SauError),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

#[derive(Debug, Clone)]
struct PendingFault {
    fault: Fault,
    started: bool,
    finished: bool,
}

pub struct Simulation {
    topology: Topology,
    saus: Vec<Sau>,
    index: BTreeMap<String, usize>,
    switch: Switch,
    collector: Collector,
    faults: Vec<PendingFault>,
    tick: u64,
    events: Vec<Event>,
    switch_events: Vec<SwitchEvent>,
    lines_sent: u64,
}

impl Simulation {
    /// `seed` overrides the topology seed. Storage defaults to memory.
    pub fn new(topology: &Topology, faults: Vec<Fault>, seed: Option<u64>) -> Result<Self, SimError> {
        let storage = Storage::in_memory(topology.storage.tiers.clone())?;
        Self::with_storage(topology, faults, seed, storage)
    }

    pub fn with_storage(
        topology: &Topology,
        faults: Vec<Fault>,
        seed: Option<u64>,
        storage: Storage,
    ) -> Result<Self, SimError> {
        let mut topology = topology.clone();
        if let Some(s) = seed {
            topology.seed = s;
        }
        let epoch = topology.collector.epoch_ms;
        let env0 = topology.environment.sample(0.0);
        let mut saus = Vec::with_capacity(topology.saus.len());
        let mut index = BTreeMap::new();
        let mut switch = Switch::with_ports(topology.switch.ports);
        let mut collector = Collector::new(topology.watchdog_config(), topology.alarms.clone(), storage);
        for (i, cfg) in topology.sau_configs().into_iter().enumerate() {
            let section = &topology.saus[i];
            if let Some(p) = section.switch_port {
                switch.attach(p, &cfg.id).expect("validated switch port");
            }
            collector.register(&cfg.id, section.switch_port, epoch);
            index.insert(cfg.id.clone(), i);
            saus.push(Sau::power_on(cfg, &env0)?);
        }
        for f in &faults {
            if !index.contains_key(f.sau()) {
                return Err(SimError::UnknownSau(f.to_string()));
            }
        }
        let faults = faults.into_iter().map(|fault| PendingFault { fault, started: false, finished: false }).collect();
        Ok(Simulation {
            topology,
            saus,
            index,
            switch,
            collector,
            faults,
            tick: 0,
            events: Vec::new(),
            switch_events: Vec::new(),
            lines_sent: 0,
        })
    }

    pub fn now_ms(&self) -> i64 {
        self.topology.collector.epoch_ms + self.tick as i64 * 1000
    }

    /// Seconds simulated so far.
    pub fn elapsed_s(&self) -> u64 {
        self.tick
    }

    fn apply_faults(&mut self, t: f64) -> Result<(), SimError> {
        for pf in &mut self.faults {
            if pf.finished {
                continue;
            }
            let sau = &mut self.saus[self.index[pf.fault.sau()]];
            match &pf.fault {
                Fault::WedgeMcu { at_s, .. } if t >= *at_s => {
                    sau.wedge_mcu();
                    pf.finished = true;
                }
                Fault::WedgeAgent { at_s, .. } if t >= *at_s => {
                    sau.wedge_agent();
                    pf.finished = true;
                }
                Fault::Short { port, from_s, to_s, .. } => {
                    if !pf.started && t >= *from_s {
                        sau.short_port(*port)?;
                        pf.started = true;
                    }
                    if pf.started && t >= *to_s {
                        sau.clear_short(*port)?;
                        pf.finished = true;
                    }
                }
                Fault::CorruptSerial { rate, .. } => {
                    sau.set_serial_corruption(*rate);
                    pf.finished = true;
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn apply_switch_events(&mut self, events: Vec<SwitchEvent>) {
        for e in events {
            if let Some(i) = e.sau_id.as_ref().and_then(|id| self.index.get(id)) {
                if e.on {
                    self.saus[*i].power_restore();
                } else {
                    self.saus[*i].power_off();
                }
            }
            self.switch_events.push(e);
        }
    }

    /// Advances one second. Returns the collector events of this tick.
    pub fn step(&mut self) -> Result<Vec<Event>, SimError> {
        let t = self.tick as f64;
        let now = self.now_ms();
        self.apply_faults(t)?;
        let restored = self.switch.tick(now);
        self.apply_switch_events(restored);

        let env = self.topology.environment.sample(t);
        for i in 0..self.saus.len() {
            for rec in self.saus[i].tick(now, &env) {
                // through the wire format, as a networked unit would send it
                let line = rec.encode().expect("emulator emits valid records");
                self.lines_sent += 1;
                let _ = self.collector.ingest_line(&line, now);
            }
        }

        for action in self.collector.watchdog_tick(now) {
            let result = self.execute(&action, now);
            self.collector.action_result(&action, result, now);
        }
        let _ = self.switch.drain_events();
        let ev = self.collector.drain_events();
        self.events.extend(ev.iter().cloned());
        self.tick += 1;
        Ok(ev)
    }

    fn execute(&mut self, action: &Action, now: i64) -> Result<(), String> {
        match action {
            Action::SendCommand(cmd) => {
                let i = *self.index.get(cmd.sau_id()).ok_or("unknown SAU")?;
                let sau = &mut self.saus[i];
                match sau.agent_phase() {
                    AgentPhase::Alive => sau.handle_command(cmd).map_err(|e| e.to_string()),
                    // connection is up but nobody reads it
                    AgentPhase::Wedged => Ok(()),
                    AgentPhase::Off | AgentPhase::Booting(_) => Err("SAU not connected".into()),
                }
            }
            Action::PowerCycle { port, off_ms, .. } => {
                let before = self.switch.events().len();
                self.switch.begin_cycle(*port, *off_ms, now).map_err(|e| e.to_string())?;
                let off = self.switch.events()[before..].to_vec();
                self.apply_switch_events(off);
                Ok(())
            }
        }
    }

    pub fn run(&mut self, duration_s: u64) -> Result<(), SimError> {
        for _ in 0..duration_s {
            self.step()?;
        }
        Ok(())
    }

    /// Every collector event so far, one line each.
    pub fn event_log(&self) -> String {
        self.events.iter().map(|e| format!("{e}\n")).collect()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn switch_log(&self) -> String {
        self.switch_events.iter().map(|e| format!("{e}\n")).collect()
    }

    pub fn switch_events(&self) -> &[SwitchEvent] {
        &self.switch_events
    }

    pub fn collector(&self) -> &Collector {
        &self.collector
    }

    pub fn collector_mut(&mut self) -> &mut Collector {
        &mut self.collector
    }

    pub fn sau(&self, id: &str) -> Option<&Sau> {
        self.index.get(id).map(|&i| &self.saus[i])
    }

    pub fn sau_mut(&mut self, id: &str) -> Option<&mut Sau> {
        self.index.get(id).map(|&i| &mut self.saus[i])
    }

    pub fn switch(&self) -> &Switch {
        &self.switch
    }

    pub fn lines_sent(&self) -> u64 {
        self.lines_sent
    }
}
