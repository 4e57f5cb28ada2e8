//! Collector: ingests telemetry, keeps per-SAU health, evaluates alarm rules
//! and escalates silent units.
//!
//! Escalation ladder for a unit whose heartbeat goes stale:
//!
//! ```text
//! HEALTHY -> STALE -> RESET_SENT -> AWAITING_RESET -> CYCLE_SENT -> AWAITING_CYCLE -> FAILED
//! ```
//!
//! Any heartbeat from a non-FAILED state returns the unit to HEALTHY. FAILED
//! units are retried with exponential backoff. Staleness is judged on
//! heartbeats alone, so a browned-out MCU behind a live agent is reported by
//! alarms, never escalated.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::Deserialize;

use crate::protocol::{decode, Command, Metric, ProtocolError, TelemetryRecord};
use crate::storage::{Storage, StorageError};

const RECENT_EVENTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WatchdogConfig {
    pub stale_ms: i64,
    pub reset_grace_ms: i64,
    pub cycle_grace_ms: i64,
    pub backoff_base_ms: i64,
    pub backoff_cap_ms: i64,
    pub cycle_off_ms: u64,
}

impl Default for WatchdogConfig {
    fn default() -> Self {
        WatchdogConfig {
            stale_ms: 10_000,
            reset_grace_ms: 30_000,
            cycle_grace_ms: 60_000,
            backoff_base_ms: 5 * 60_000,
            backoff_cap_ms: 60 * 60_000,
            cycle_off_ms: 3_000,
        }
    }
}

impl WatchdogConfig {
    /// Delay before retry number `failures` (1-based) of a FAILED unit.
    pub fn backoff_ms(&self, failures: u32) -> i64 {
        let shift = failures.saturating_sub(1).min(32);
        self.backoff_base_ms.saturating_mul(1i64 << shift).min(self.backoff_cap_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum HealthState {
    Healthy,
    Stale,
    ResetSent,
    AwaitingReset,
    CycleSent,
    AwaitingCycle,
    Failed,
}

impl HealthState {
    pub fn name(self) -> &'static str {
        match self {
            HealthState::Healthy => "HEALTHY",
            HealthState::Stale => "STALE",
            HealthState::ResetSent => "RESET_SENT",
            HealthState::AwaitingReset => "AWAITING_RESET",
            HealthState::CycleSent => "CYCLE_SENT",
            HealthState::AwaitingCycle => "AWAITING_CYCLE",
            HealthState::Failed => "FAILED",
        }
    }

    /// Whether the ladder permits `self -> next`.
    pub fn can_become(self, next: HealthState) -> bool {
        use HealthState::*;
        if next == Healthy {
            // heartbeat, or a FAILED unit found alive at its retry
            return true;
        }
        matches!(
            (self, next),
            (Healthy, Stale)
                | (Stale, ResetSent)
                | (ResetSent, AwaitingReset)
                | (AwaitingReset, CycleSent)
                | (CycleSent, AwaitingCycle)
                | (AwaitingCycle, Failed)
                | (Failed, CycleSent)
        )
    }
}

impl fmt::Display for HealthState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SauHealth {
    pub sau_id: String,
    pub state: HealthState,
    pub last_seen_ms: i64,
    pub escalation_count: u32,
    pub state_since_ms: i64,
    pub switch_port: Option<u16>,
    pub failures: u32,
    pub next_retry_ms: Option<i64>,
    pub last_metric_ms: Option<i64>,
    pub firmware: Option<String>,
    no_metrics_alarm: bool,
    cycle_retry: bool,
}

impl SauHealth {
    fn new(sau_id: &str, now_ms: i64, switch_port: Option<u16>) -> Self {
        SauHealth {
            sau_id: sau_id.to_string(),
            state: HealthState::Healthy,
            last_seen_ms: now_ms,
            escalation_count: 0,
            state_since_ms: now_ms,
            switch_port,
            failures: 0,
            next_retry_ms: None,
            last_metric_ms: None,
            firmware: None,
            no_metrics_alarm: false,
            cycle_retry: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlarmRule {
    #[serde(deserialize_with = "de_metric")]
    pub metric: Metric,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
    /// Fire whenever the value is non-zero.
    #[serde(default)]
    pub leak: bool,
    #[serde(default = "default_debounce")]
    pub debounce_ticks: u32,
}

fn default_debounce() -> u32 {
    1
}

fn de_metric<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Metric, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

impl AlarmRule {
    pub fn range(metric: Metric, min: Option<f64>, max: Option<f64>, debounce_ticks: u32) -> Self {
        AlarmRule { metric, min, max, leak: false, debounce_ticks }
    }

    pub fn leak() -> Self {
        AlarmRule { metric: Metric::Leak, min: None, max: None, leak: true, debounce_ticks: 1 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if let (Some(lo), Some(hi)) = (self.min, self.max) {
            if lo > hi {
                return Err(format!("alarm rule for {}: min {lo} > max {hi}", self.metric));
            }
        }
        if self.debounce_ticks == 0 {
            return Err(format!("alarm rule for {}: debounce_ticks must be >= 1", self.metric));
        }
        Ok(())
    }

    pub fn violated_by(&self, value: f64) -> bool {
        if self.leak {
            return value != 0.0;
        }
        self.min.is_some_and(|lo| value < lo) || self.max.is_some_and(|hi| value > hi)
    }

    fn describe(&self) -> String {
        if self.leak {
            return format!("{}!=0", self.metric);
        }
        match (self.min, self.max) {
            (Some(lo), Some(hi)) => format!("{lo}<={}<={hi}", self.metric),
            (Some(lo), None) => format!("{}>={lo}", self.metric),
            (None, Some(hi)) => format!("{}<={hi}", self.metric),
            (None, None) => self.metric.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct AlarmState {
    active: bool,
    violations: u32,
    clears: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    Registered,
    Stale,
    ResetSent,
    AwaitingReset,
    CycleSent,
    AwaitingCycle,
    Failed,
    Retry,
    Recovered,
    CommandError,
    SwitchError,
    AlarmRaised,
    AlarmCleared,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Registered => "registered",
            EventKind::Stale => "stale",
            EventKind::ResetSent => "reset_sent",
            EventKind::AwaitingReset => "awaiting_reset",
            EventKind::CycleSent => "cycle_sent",
            EventKind::AwaitingCycle => "awaiting_cycle",
            EventKind::Failed => "failed",
            EventKind::Retry => "retry",
            EventKind::Recovered => "recovered",
            EventKind::CommandError => "command_error",
            EventKind::SwitchError => "switch_error",
            EventKind::AlarmRaised => "alarm_raised",
            EventKind::AlarmCleared => "alarm_cleared",
        }
    }

    pub fn is_escalation(self) -> bool {
        matches!(self, EventKind::ResetSent | EventKind::CycleSent | EventKind::Retry)
    }

    pub fn is_alarm(self) -> bool {
        matches!(self, EventKind::AlarmRaised | EventKind::AlarmCleared)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One line of the event log: `<timestamp_ms> <sau_id> <kind> <detail>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub timestamp_ms: i64,
    pub sau_id: String,
    pub kind: EventKind,
    pub detail: String,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let detail = if self.detail.is_empty() { "-" } else { &self.detail };
        write!(f, "{} {} {} {}", self.timestamp_ms, self.sau_id, self.kind, detail)
    }
}

/// What the watchdog wants done; the caller executes it and reports back
/// through [`Collector::action_result`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    SendCommand(Command),
    PowerCycle { sau_id: String, port: u16, off_ms: u64 },
}

impl Action {
    pub fn sau_id(&self) -> &str {
        match self {
            Action::SendCommand(c) => c.sau_id(),
            Action::PowerCycle { sau_id, .. } => sau_id,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub records: u64,
    pub heartbeats: u64,
    pub metrics_stored: u64,
    pub decode_malformed: u64,
    pub decode_bad_number: u64,
    pub decode_unknown_metric: u64,
    pub storage_rejected: u64,
    pub ingest_drops: u64,
    /// Records missing from a unit's sequence, lost somewhere upstream.
    pub seq_gaps: u64,
    pub seq_regressions: u64,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CollectorConfig {
    #[serde(default)]
    pub watchdog: WatchdogConfig,
    #[serde(default, rename = "alarm")]
    pub alarms: Vec<AlarmRule>,
}

pub struct Collector {
    cfg: WatchdogConfig,
    rules: Vec<AlarmRule>,
    health: BTreeMap<String, SauHealth>,
    alarms: BTreeMap<(String, usize), AlarmState>,
    last_values: BTreeMap<String, (i64, f64)>,
    last_seq: BTreeMap<String, u64>,
    storage: Storage,
    pending: Vec<Event>,
    recent: VecDeque<Event>,
    counters: Counters,
}

impl Collector {
    pub fn new(cfg: WatchdogConfig, rules: Vec<AlarmRule>, storage: Storage) -> Self {
        Collector {
            cfg,
            rules,
            health: BTreeMap::new(),
            alarms: BTreeMap::new(),
            last_values: BTreeMap::new(),
            last_seq: BTreeMap::new(),
            storage,
            pending: Vec::new(),
            recent: VecDeque::new(),
            counters: Counters::default(),
        }
    }

    pub fn config(&self) -> &WatchdogConfig {
        &self.cfg
    }

    /// Declares a unit up front, so its silence is noticed even if it never
    /// connects. The watch starts at `now_ms`.
    pub fn register(&mut self, sau_id: &str, switch_port: Option<u16>, now_ms: i64) {
        if let Some(h) = self.health.get_mut(sau_id) {
            h.switch_port = switch_port.or(h.switch_port);
            return;
        }
        self.health.insert(sau_id.to_string(), SauHealth::new(sau_id, now_ms, switch_port));
    }

    fn emit(&mut self, timestamp_ms: i64, sau_id: &str, kind: EventKind, detail: impl Into<String>) {
        let e = Event { timestamp_ms, sau_id: sau_id.to_string(), kind, detail: detail.into() };
        if self.recent.len() == RECENT_EVENTS {
            self.recent.pop_front();
        }
        self.recent.push_back(e.clone());
        self.pending.push(e);
    }

    /// Events produced since the last call, in order.
    pub fn drain_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.pending)
    }

    pub fn recent_events(&self) -> impl Iterator<Item = &Event> {
        self.recent.iter()
    }

    fn transition(&mut self, sau_id: &str, next: HealthState, now_ms: i64, kind: EventKind, detail: String) {
        let h = self.health.get_mut(sau_id).expect("known sau");
        debug_assert!(h.state.can_become(next), "{} -> {}", h.state, next);
        h.state = next;
        h.state_since_ms = now_ms;
        self.emit(now_ms, sau_id, kind, detail);
    }

    /// Decodes and ingests one wire line. Decode failures are counted.
    pub fn ingest_line(&mut self, line: &str, now_ms: i64) -> Result<(), ProtocolError> {
        match decode(line) {
            Ok(rec) => {
                self.ingest(&rec, now_ms);
                Ok(())
            }
            Err(e) => {
                self.count_decode_error(&e);
                Err(e)
            }
        }
    }

    pub fn count_decode_error(&mut self, e: &ProtocolError) {
        match e {
            ProtocolError::BadNumber { .. } => self.counters.decode_bad_number += 1,
            ProtocolError::UnknownMetric(_) => self.counters.decode_unknown_metric += 1,
            _ => self.counters.decode_malformed += 1,
        }
    }

    pub fn count_ingest_drop(&mut self, n: u64) {
        self.counters.ingest_drops += n;
    }

    pub fn ingest(&mut self, rec: &TelemetryRecord, now_ms: i64) {
        self.counters.records += 1;
        if !self.health.contains_key(&rec.sau_id) {
            self.register(&rec.sau_id, None, now_ms);
            self.emit(now_ms, &rec.sau_id, EventKind::Registered, "unannounced");
        }
        if let Some(prev) = self.last_seq.insert(rec.sau_id.clone(), rec.seq) {
            if rec.seq <= prev {
                self.counters.seq_regressions += 1;
            } else {
                self.counters.seq_gaps += rec.seq - prev - 1;
            }
        }
        if rec.metric == Metric::Heartbeat {
            self.counters.heartbeats += 1;
            let h = self.health.get_mut(&rec.sau_id).expect("registered");
            h.last_seen_ms = h.last_seen_ms.max(now_ms);
            h.firmware = Some(rec.sensor_id.clone());
            let state = h.state;
            if state != HealthState::Healthy && state != HealthState::Failed {
                let h = self.health.get_mut(&rec.sau_id).expect("registered");
                h.cycle_retry = false;
                self.transition(
                    &rec.sau_id,
                    HealthState::Healthy,
                    now_ms,
                    EventKind::Recovered,
                    format!("from={state}"),
                );
            }
            return;
        }
        let key = rec.series_key();
        match self.storage.append(&key, rec.timestamp_ms, rec.value) {
            Ok(()) => self.counters.metrics_stored += 1,
            Err(StorageError::OutOfOrder { .. }) | Err(_) => self.counters.storage_rejected += 1,
        }
        self.last_values.insert(key.clone(), (rec.timestamp_ms, rec.value));
        let h = self.health.get_mut(&rec.sau_id).expect("registered");
        h.last_metric_ms = Some(now_ms);
        if h.no_metrics_alarm {
            h.no_metrics_alarm = false;
            self.emit(now_ms, &rec.sau_id, EventKind::AlarmCleared, "no_metrics");
        }
        self.evaluate_alarms(rec, &key, now_ms);
    }

    fn evaluate_alarms(&mut self, rec: &TelemetryRecord, key: &str, now_ms: i64) {
        for i in 0..self.rules.len() {
            let rule = &self.rules[i];
            if rule.metric != rec.metric {
                continue;
            }
            let violated = rule.violated_by(rec.value);
            let debounce = rule.debounce_ticks.max(1);
            let desc = rule.describe();
            let st = self.alarms.entry((key.to_string(), i)).or_default();
            let mut fired = None;
            if violated {
                st.violations += 1;
                st.clears = 0;
                if !st.active && st.violations >= debounce {
                    st.active = true;
                    fired = Some(EventKind::AlarmRaised);
                }
            } else {
                st.clears += 1;
                st.violations = 0;
                if st.active && st.clears >= debounce {
                    st.active = false;
                    fired = Some(EventKind::AlarmCleared);
                }
            }
            if let Some(kind) = fired {
                let detail = format!("{key} value={} rule={desc}", rec.value);
                self.emit(now_ms, &rec.sau_id, kind, detail);
            }
        }
    }

    /// Advances every unit's escalation ladder to `now_ms`.
    pub fn watchdog_tick(&mut self, now_ms: i64) -> Vec<Action> {
        let mut actions = Vec::new();
        let ids: Vec<String> = self.health.keys().cloned().collect();
        for id in ids {
            let h = &self.health[&id];
            let (state, since, age) = (h.state, h.state_since_ms, now_ms - h.last_seen_ms);
            let fresh = age < self.cfg.stale_ms;
            match state {
                HealthState::Healthy => {
                    if !fresh {
                        self.transition(&id, HealthState::Stale, now_ms, EventKind::Stale, format!("age_ms={age}"));
                        self.send_reset(&id, now_ms, &mut actions);
                    } else {
                        self.check_metric_silence(&id, now_ms);
                    }
                }
                HealthState::Stale => self.send_reset(&id, now_ms, &mut actions),
                HealthState::ResetSent => {
                    // no result reported by the caller; assume sent
                    self.transition(&id, HealthState::AwaitingReset, now_ms, EventKind::AwaitingReset, String::new());
                }
                HealthState::AwaitingReset => {
                    if now_ms - since >= self.cfg.reset_grace_ms {
                        self.send_cycle(&id, now_ms, EventKind::CycleSent, &mut actions);
                    }
                }
                HealthState::CycleSent => {
                    if self.health[&id].cycle_retry {
                        self.health.get_mut(&id).expect("known").cycle_retry = false;
                        self.push_cycle_action(&id, &mut actions);
                    }
                }
                HealthState::AwaitingCycle => {
                    if now_ms - since >= self.cfg.cycle_grace_ms {
                        let h = self.health.get_mut(&id).expect("known");
                        h.failures += 1;
                        let delay = self.cfg.backoff_ms(h.failures);
                        h.next_retry_ms = Some(now_ms + delay);
                        self.transition(
                            &id,
                            HealthState::Failed,
                            now_ms,
                            EventKind::Failed,
                            format!("retry_in_ms={delay}"),
                        );
                        self.emit(now_ms, &id, EventKind::AlarmRaised, "sau_failed");
                    }
                }
                HealthState::Failed => {
                    let due = self.health[&id].next_retry_ms.is_some_and(|t| now_ms >= t);
                    if due {
                        if fresh {
                            self.health.get_mut(&id).expect("known").next_retry_ms = None;
                            self.transition(&id, HealthState::Healthy, now_ms, EventKind::Recovered, "from=FAILED".into());
                            self.emit(now_ms, &id, EventKind::AlarmCleared, "sau_failed");
                        } else {
                            self.send_cycle(&id, now_ms, EventKind::Retry, &mut actions);
                        }
                    }
                }
            }
        }
        actions
    }

    fn check_metric_silence(&mut self, id: &str, now_ms: i64) {
        let h = &self.health[id];
        // the silence clock restarts when the unit returns to HEALTHY
        let silent = h.last_metric_ms.is_some_and(|t| now_ms - t.max(h.state_since_ms) >= self.cfg.stale_ms);
        if silent && !h.no_metrics_alarm {
            self.health.get_mut(id).expect("known").no_metrics_alarm = true;
            self.emit(now_ms, id, EventKind::AlarmRaised, "no_metrics");
        }
    }

    fn send_reset(&mut self, id: &str, now_ms: i64, actions: &mut Vec<Action>) {
        let h = self.health.get_mut(id).expect("known");
        h.escalation_count += 1;
        self.transition(id, HealthState::ResetSent, now_ms, EventKind::ResetSent, String::new());
        actions.push(Action::SendCommand(Command::Reset { sau_id: id.to_string() }));
    }

    fn send_cycle(&mut self, id: &str, now_ms: i64, kind: EventKind, actions: &mut Vec<Action>) {
        let h = self.health.get_mut(id).expect("known");
        h.escalation_count += 1;
        match h.switch_port {
            Some(port) => {
                self.transition(id, HealthState::CycleSent, now_ms, kind, format!("port={port}"));
                self.push_cycle_action(id, actions);
            }
            None => {
                self.transition(id, HealthState::CycleSent, now_ms, kind, "port=none".into());
                self.emit(now_ms, id, EventKind::SwitchError, "no switch port mapped");
                self.transition(id, HealthState::AwaitingCycle, now_ms, EventKind::AwaitingCycle, String::new());
            }
        }
    }

    fn push_cycle_action(&self, id: &str, actions: &mut Vec<Action>) {
        if let Some(port) = self.health[id].switch_port {
            actions.push(Action::PowerCycle { sau_id: id.to_string(), port, off_ms: self.cfg.cycle_off_ms });
        }
    }

    /// Reports how an action from [`Collector::watchdog_tick`] went.
    pub fn action_result(&mut self, action: &Action, result: Result<(), String>, now_ms: i64) {
        let id = action.sau_id().to_string();
        let Some(h) = self.health.get(&id) else { return };
        let state = h.state;
        match (action, result) {
            (Action::SendCommand(_), Ok(())) => {
                if state == HealthState::ResetSent {
                    self.transition(&id, HealthState::AwaitingReset, now_ms, EventKind::AwaitingReset, String::new());
                }
            }
            (Action::SendCommand(_), Err(e)) => {
                self.emit(now_ms, &id, EventKind::CommandError, e);
                if state == HealthState::ResetSent {
                    self.transition(&id, HealthState::AwaitingReset, now_ms, EventKind::AwaitingReset, String::new());
                }
            }
            (Action::PowerCycle { .. }, Ok(())) => {
                if state == HealthState::CycleSent {
                    self.transition(&id, HealthState::AwaitingCycle, now_ms, EventKind::AwaitingCycle, String::new());
                }
            }
            (Action::PowerCycle { .. }, Err(e)) => {
                self.emit(now_ms, &id, EventKind::SwitchError, e);
                if state == HealthState::CycleSent {
                    self.health.get_mut(&id).expect("known").cycle_retry = true;
                }
            }
        }
    }

    pub fn health(&self, sau_id: &str) -> Option<&SauHealth> {
        self.health.get(sau_id)
    }

    pub fn healths(&self) -> impl Iterator<Item = &SauHealth> {
        self.health.values()
    }

    pub fn counters(&self) -> Counters {
        let mut c = self.counters;
        c.storage_rejected = c.storage_rejected.max(self.storage.rejected());
        c
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn storage_mut(&mut self) -> &mut Storage {
        &mut self.storage
    }

    pub fn last_value(&self, key: &str) -> Option<(i64, f64)> {
        self.last_values.get(key).copied()
    }

    pub fn active_alarms(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .alarms
            .iter()
            .filter(|(_, st)| st.active)
            .map(|((key, i), _)| (key.clone(), self.rules[*i].describe()))
            .collect();
        for h in self.health.values() {
            if h.no_metrics_alarm {
                out.push((h.sau_id.clone(), "no_metrics".into()));
            }
            if h.state == HealthState::Failed {
                out.push((h.sau_id.clone(), "sau_failed".into()));
            }
        }
        out
    }

    /// Line-oriented snapshot for the CLI.
    pub fn status(&self) -> String {
        let mut s = String::new();
        for h in self.health.values() {
            s.push_str(&format!(
                "sau {} state={} last_seen_ms={} escalations={} failures={} firmware={}\n",
                h.sau_id,
                h.state,
                h.last_seen_ms,
                h.escalation_count,
                h.failures,
                h.firmware.as_deref().unwrap_or("-")
            ));
        }
        for (key, (ts, v)) in &self.last_values {
            s.push_str(&format!("metric {key} ts={ts} value={v}\n"));
        }
        for (key, rule) in self.active_alarms() {
            s.push_str(&format!("alarm {key} rule={rule}\n"));
        }
        let c = self.counters();
        s.push_str(&format!(
            "counters records={} heartbeats={} stored={} malformed={} bad_number={} unknown_metric={} storage_rejected={} ingest_drops={} seq_gaps={} seq_regressions={}\n",
            c.records,
            c.heartbeats,
            c.metrics_stored,
            c.decode_malformed,
            c.decode_bad_number,
            c.decode_unknown_metric,
            c.storage_rejected,
            c.ingest_drops,
            c.seq_gaps,
            c.seq_regressions
        ));
        s
    }
}
