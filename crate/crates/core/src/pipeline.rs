//! The search as a pipeline.
//!
//! Select, expand and backup each run as one serial worker; the playout stage
//! runs `k` lane workers that may finish out of order. Stages hand
//! trajectory tokens to each other through bounded buffers and a credit
//! channel caps how many tokens are inside the pipeline at once.
//!
//! Tree access follows a fixed split. Only the expand worker adds nodes.
//! Only the backup worker adds rewards (and, with [`StalenessPolicy::VisitMark`],
//! the select worker adds provisional visits). The select worker reads
//! statistics that may lag behind tokens still in flight: iteration `i` may
//! start before iteration `i - 1` has been backed up. With an in-flight
//! limit of one the schedule, and therefore the tree, is exactly the
//! sequential one.

use std::collections::HashMap;
use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::GameState;
use crate::mcts::{
    self, descend, mark_visits, terminal_delta, MctsError, SearchResult, SearchTree, Trajectory,
    UctParams,
};
use crate::rng::{iteration_rng, SearchRng};

const DEFAULT_DRAIN_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StalenessPolicy {
    /// Select reads whatever statistics are committed.
    Plain,
    /// Select adds a provisional visit to every node on its path; backup
    /// settles it.
    VisitMark,
}

/// How the expand stage hands tokens to playout lanes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneAssignment {
    /// All lanes pull from one shared buffer.
    FirstFree,
    /// Each lane has its own buffer, filled in rotation.
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub playout_lanes: usize,
    pub buffer_capacity: usize,
    pub in_flight_limit: usize,
    pub staleness: StalenessPolicy,
    pub lane_assignment: LaneAssignment,
    /// Keep a per-token, per-stage event log.
    pub record_events: bool,
    /// Longest the backup stage waits for its next token before the run is
    /// declared stuck.
    #[serde(skip)]
    pub drain_timeout: Option<Duration>,
    /// Extra time added to every stage step. Instrumentation only.
    #[serde(skip)]
    pub stage_delay: Option<Duration>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::with_lanes(1)
    }
}

impl PipelineConfig {
    /// `k` playout lanes, buffers of `2k`, and enough tokens in flight to
    /// occupy every stage and lane.
    pub fn with_lanes(k: usize) -> Self {
        Self {
            playout_lanes: k,
            buffer_capacity: 2 * k.max(1),
            in_flight_limit: k + 3,
            staleness: StalenessPolicy::Plain,
            lane_assignment: LaneAssignment::FirstFree,
            record_events: false,
            drain_timeout: Some(DEFAULT_DRAIN_TIMEOUT),
            stage_delay: None,
        }
    }

    pub fn in_flight(mut self, limit: usize) -> Self {
        self.in_flight_limit = limit;
        self
    }

    pub fn buffer(mut self, capacity: usize) -> Self {
        self.buffer_capacity = capacity;
        self
    }

    pub fn staleness(mut self, policy: StalenessPolicy) -> Self {
        self.staleness = policy;
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.playout_lanes == 0 {
            return Err(PipelineError::Config("playout_lanes must be >= 1"));
        }
        if self.buffer_capacity == 0 {
            return Err(PipelineError::Config("buffer_capacity must be >= 1"));
        }
        if self.in_flight_limit == 0 {
            return Err(PipelineError::Config("in_flight_limit must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Selected,
    Expanded,
    Played,
    Backed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Select,
    Expand,
    Playout,
    Backup,
}

/// Items waiting in each inter-stage buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BufferOccupancy {
    pub select_to_expand: usize,
    pub expand_to_playout: usize,
    pub to_backup: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Search(#[from] MctsError),
    #[error("token {token} reached {stage:?} in phase {found:?}, expected {expected:?}")]
    PhaseViolation {
        token: u64,
        stage: StageKind,
        expected: Phase,
        found: Phase,
    },
    #[error("pipeline stuck after {backed} of {budget} tokens; buffers {occupancy:?}")]
    Stuck {
        backed: u64,
        budget: u64,
        occupancy: BufferOccupancy,
    },
    #[error("token audit failed: {0}")]
    Audit(String),
    #[error("{0:?} worker panicked")]
    WorkerPanicked(StageKind),
}

/// A trajectory travelling through the stages.
#[derive(Debug, Clone)]
pub struct TrajectoryToken {
    pub trajectory: Trajectory,
    pub phase: Phase,
    pub lane: Option<usize>,
    /// Backups the select stage had not yet seen, relative to the
    /// sequential schedule, when this token was selected.
    pub staleness: u64,
    /// The selected path equals that of another token still in flight.
    pub duplicate: bool,
    /// The leaf was terminal, so expand and playout were skipped.
    pub fast_path: bool,
    rng: SearchRng,
}

impl TrajectoryToken {
    pub fn iteration(&self) -> u64 {
        self.trajectory.iteration
    }
}

/// The four stage operations bound to one tree.
pub struct Stages<'t, S> {
    tree: &'t SearchTree<S>,
    params: UctParams,
    staleness: StalenessPolicy,
}

impl<'t, S: GameState> Stages<'t, S> {
    pub fn new(tree: &'t SearchTree<S>, params: UctParams, staleness: StalenessPolicy) -> Self {
        Self {
            tree,
            params,
            staleness,
        }
    }

    fn expect(
        token: &TrajectoryToken,
        stage: StageKind,
        expected: Phase,
    ) -> Result<(), PipelineError> {
        if token.phase == expected {
            Ok(())
        } else {
            Err(PipelineError::PhaseViolation {
                token: token.iteration(),
                stage,
                expected,
                found: token.phase,
            })
        }
    }

    /// Create the token for `iteration`. `backups_done` is the number of
    /// completed backups visible right now.
    pub fn select_stage(&self, iteration: u64, backups_done: u64) -> TrajectoryToken {
        let mut trajectory = mcts::select(self.tree, self.params.c_p, iteration);
        if self.staleness == StalenessPolicy::VisitMark {
            mark_visits(self.tree, &mut trajectory);
        }
        TrajectoryToken {
            trajectory,
            phase: Phase::Selected,
            lane: None,
            staleness: iteration.saturating_sub(backups_done),
            duplicate: false,
            fast_path: false,
            rng: iteration_rng(self.params.seed, iteration),
        }
    }

    /// Expand the selected leaf. If an earlier token already used up the
    /// leaf's untried actions, keep descending first. Terminal leaves jump
    /// straight to `Played` with their terminal reward.
    pub fn expand_stage(
        &self,
        mut token: TrajectoryToken,
    ) -> Result<TrajectoryToken, PipelineError> {
        Self::expect(&token, StageKind::Expand, Phase::Selected)?;
        let traj = &mut token.trajectory;
        descend(self.tree, &mut traj.path, self.params.c_p);
        let leaf = traj.leaf();
        if self.tree.is_terminal(leaf) {
            traj.delta = Some(terminal_delta(self.tree, leaf)?);
            token.fast_path = true;
            token.phase = Phase::Played;
        } else {
            mcts::expand(self.tree, traj, &mut token.rng)?;
            token.phase = Phase::Expanded;
        }
        Ok(token)
    }

    pub fn playout_stage(
        &self,
        mut token: TrajectoryToken,
        lane: usize,
    ) -> Result<TrajectoryToken, PipelineError> {
        Self::expect(&token, StageKind::Playout, Phase::Expanded)?;
        let leaf = token.trajectory.leaf();
        let delta = mcts::playout(self.tree.state(leaf), self.tree.mover(leaf), &mut token.rng);
        token.trajectory.delta = Some(delta);
        token.lane = Some(lane);
        token.phase = Phase::Played;
        Ok(token)
    }

    pub fn backup_stage(
        &self,
        mut token: TrajectoryToken,
    ) -> Result<TrajectoryToken, PipelineError> {
        Self::expect(&token, StageKind::Backup, Phase::Played)?;
        mcts::backup(self.tree, &token.trajectory)?;
        token.phase = Phase::Backed;
        Ok(token)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StageStat {
    pub items: u64,
    /// Tokens that passed through without the stage's work being needed.
    pub skipped: u64,
    pub busy_ns: u64,
    pub idle_ns: u64,
}

impl StageStat {
    pub fn utilization(&self) -> f64 {
        let total = self.busy_ns + self.idle_ns;
        if total == 0 {
            0.0
        } else {
            self.busy_ns as f64 / total as f64
        }
    }

    fn merge(&mut self, other: &StageStat) {
        self.items += other.items;
        self.skipped += other.skipped;
        self.busy_ns += other.busy_ns;
        self.idle_ns += other.idle_ns;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageStats {
    pub select: StageStat,
    pub expand: StageStat,
    /// All lanes together. `skipped` counts fast-path tokens.
    pub playout: StageStat,
    pub lanes: Vec<StageStat>,
    pub backup: StageStat,
}

impl StageStats {
    pub fn total_idle_ns(&self) -> u64 {
        self.select.idle_ns + self.expand.idle_ns + self.playout.idle_ns + self.backup.idle_ns
    }
}

/// Token bookkeeping checked when the pipeline drains.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TokenAudit {
    pub created: u64,
    pub expanded: u64,
    pub fast_path: u64,
    pub played: u64,
    pub backed: u64,
    pub duplicates: u64,
    pub max_staleness: u64,
    /// Iteration indices in the order backup received them.
    pub completion_order: Vec<u64>,
}

impl TokenAudit {
    pub fn duplicate_fraction(&self) -> f64 {
        if self.created == 0 {
            0.0
        } else {
            self.duplicates as f64 / self.created as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEvent {
    pub token: u64,
    pub stage: StageKind,
    pub lane: Option<usize>,
    pub start_ns: u64,
    pub end_ns: u64,
}

pub struct PipelineOutcome<S> {
    pub result: SearchResult,
    pub stats: StageStats,
    pub audit: TokenAudit,
    /// Empty unless `record_events` was set.
    pub events: Vec<StageEvent>,
    pub tree: SearchTree<S>,
}

/// Serializable part of an outcome.
#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport<'a> {
    pub result: &'a SearchResult,
    pub stats: &'a StageStats,
    pub audit: &'a TokenAudit,
}

impl<S> PipelineOutcome<S> {
    pub fn report(&self) -> PipelineReport<'_> {
        PipelineReport {
            result: &self.result,
            stats: &self.stats,
            audit: &self.audit,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.report()).expect("report serializes")
    }
}

/// Write the event log as CSV `token,stage,lane,start_ns,end_ns`.
pub fn write_events<W: io::Write>(events: &[StageEvent], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for e in events {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_events(events: &[StageEvent], path: impl AsRef<Path>) -> io::Result<PathBuf> {
    let path = path.as_ref().to_owned();
    let file = File::create(&path)?;
    write_events(events, file).map_err(io::Error::other)?;
    Ok(path)
}

/// Owns a configuration and runs one search at a time.
pub struct PipelineEngine {
    config: PipelineConfig,
}

impl PipelineEngine {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn run<S: GameState>(
        &mut self,
        root: S,
        params: &UctParams,
    ) -> Result<PipelineOutcome<S>, PipelineError> {
        run_pipeline(root, params, &self.config)
    }
}

/// Work reported by a stage worker when it exits.
#[derive(Default)]
struct WorkerLog {
    stat: StageStat,
    events: Vec<StageEvent>,
    duplicates: u64,
    max_staleness: u64,
    expanded: u64,
    fast_path: u64,
}

struct Clock {
    origin: Instant,
    record: bool,
    delay: Option<Duration>,
}

impl Clock {
    fn ns(&self, t: Instant) -> u64 {
        t.duration_since(self.origin).as_nanos() as u64
    }

    fn pad(&self) {
        if let Some(d) = self.delay {
            thread::sleep(d);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        log: &mut WorkerLog,
        token: u64,
        stage: StageKind,
        lane: Option<usize>,
        waited_from: Instant,
        start: Instant,
    ) {
        let end = Instant::now();
        log.stat.idle_ns += self.ns(start) - self.ns(waited_from);
        log.stat.busy_ns += self.ns(end) - self.ns(start);
        if self.record {
            log.events.push(StageEvent {
                token,
                stage,
                lane,
                start_ns: self.ns(start),
                end_ns: self.ns(end),
            });
        }
    }
}

fn select_worker<S: GameState>(
    stages: &Stages<'_, S>,
    budget: u64,
    credits: Receiver<Option<u64>>,
    to_expand: Sender<TrajectoryToken>,
    backups_done: &AtomicU64,
    clock: &Clock,
) -> WorkerLog {
    let mut log = WorkerLog::default();
    let mut available = 0usize;
    let mut in_flight: HashMap<u64, Vec<mcts::NodeId>> = HashMap::new();
    let settle = |credit: Option<u64>,
                  available: &mut usize,
                  in_flight: &mut HashMap<u64, Vec<mcts::NodeId>>| {
        *available += 1;
        if let Some(done) = credit {
            in_flight.remove(&done);
        }
    };
    for iteration in 0..budget {
        let waited_from = Instant::now();
        if available == 0 {
            match credits.recv() {
                Ok(c) => settle(c, &mut available, &mut in_flight),
                Err(_) => break,
            }
        }
        while let Ok(c) = credits.try_recv() {
            settle(c, &mut available, &mut in_flight);
        }
        available -= 1;

        let start = Instant::now();
        let mut token = stages.select_stage(iteration, backups_done.load(Ordering::Acquire));
        token.duplicate = in_flight.values().any(|p| *p == token.trajectory.path);
        log.duplicates += u64::from(token.duplicate);
        log.max_staleness = log.max_staleness.max(token.staleness);
        in_flight.insert(iteration, token.trajectory.path.clone());
        clock.pad();
        log.stat.items += 1;
        clock.step(
            &mut log,
            iteration,
            StageKind::Select,
            None,
            waited_from,
            start,
        );
        if to_expand.send(token).is_err() {
            break;
        }
    }
    log
}

enum LaneSenders {
    Shared(Sender<TrajectoryToken>),
    PerLane(Vec<Sender<TrajectoryToken>>),
}

fn expand_worker<S: GameState>(
    stages: &Stages<'_, S>,
    from_select: Receiver<TrajectoryToken>,
    to_lanes: LaneSenders,
    to_backup: Sender<TrajectoryToken>,
    clock: &Clock,
) -> Result<WorkerLog, PipelineError> {
    let mut log = WorkerLog::default();
    let mut next_lane = 0usize;
    loop {
        let waited_from = Instant::now();
        let Ok(token) = from_select.recv() else { break };
        let start = Instant::now();
        let iteration = token.iteration();
        let token = stages.expand_stage(token)?;
        clock.pad();
        log.stat.items += 1;
        clock.step(
            &mut log,
            iteration,
            StageKind::Expand,
            None,
            waited_from,
            start,
        );
        let sent = if token.fast_path {
            log.stat.skipped += 1;
            log.fast_path += 1;
            to_backup.send(token).is_ok()
        } else {
            log.expanded += 1;
            match &to_lanes {
                LaneSenders::Shared(tx) => tx.send(token).is_ok(),
                LaneSenders::PerLane(txs) => {
                    let tx = &txs[next_lane % txs.len()];
                    next_lane += 1;
                    tx.send(token).is_ok()
                }
            }
        };
        if !sent {
            break;
        }
    }
    Ok(log)
}

fn playout_worker<S: GameState>(
    stages: &Stages<'_, S>,
    lane: usize,
    from_expand: Receiver<TrajectoryToken>,
    to_backup: Sender<TrajectoryToken>,
    clock: &Clock,
) -> Result<WorkerLog, PipelineError> {
    let mut log = WorkerLog::default();
    loop {
        let waited_from = Instant::now();
        let Ok(token) = from_expand.recv() else { break };
        let start = Instant::now();
        let iteration = token.iteration();
        let token = stages.playout_stage(token, lane)?;
        clock.pad();
        log.stat.items += 1;
        clock.step(
            &mut log,
            iteration,
            StageKind::Playout,
            Some(lane),
            waited_from,
            start,
        );
        if to_backup.send(token).is_err() {
            break;
        }
    }
    Ok(log)
}

struct BackupSide {
    from_upstream: Receiver<TrajectoryToken>,
    credits: Sender<Option<u64>>,
    // held only to report occupancy
    watch_expand: Receiver<TrajectoryToken>,
    watch_lanes: Vec<Receiver<TrajectoryToken>>,
}

fn backup_worker<S: GameState>(
    stages: &Stages<'_, S>,
    side: BackupSide,
    budget: u64,
    timeout: Option<Duration>,
    backups_done: &AtomicU64,
    clock: &Clock,
) -> Result<(WorkerLog, Vec<u64>), PipelineError> {
    let mut log = WorkerLog::default();
    let mut order = Vec::with_capacity(budget as usize);
    let mut seen = vec![false; budget as usize];
    let timeout = timeout.unwrap_or(Duration::MAX);
    while (order.len() as u64) < budget {
        let waited_from = Instant::now();
        let token = match side.from_upstream.recv_timeout(timeout) {
            Ok(t) => t,
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {
                return Err(PipelineError::Stuck {
                    backed: order.len() as u64,
                    budget,
                    occupancy: BufferOccupancy {
                        select_to_expand: side.watch_expand.len(),
                        expand_to_playout: side.watch_lanes.iter().map(|r| r.len()).sum(),
                        to_backup: side.from_upstream.len(),
                    },
                });
            }
        };
        let start = Instant::now();
        let iteration = token.iteration();
        let slot = seen
            .get_mut(iteration as usize)
            .ok_or_else(|| PipelineError::Audit(format!("unknown token {iteration}")))?;
        if std::mem::replace(slot, true) {
            return Err(PipelineError::Audit(format!(
                "token {iteration} backed up twice"
            )));
        }
        stages.backup_stage(token)?;
        backups_done.fetch_add(1, Ordering::AcqRel);
        clock.pad();
        log.stat.items += 1;
        clock.step(
            &mut log,
            iteration,
            StageKind::Backup,
            None,
            waited_from,
            start,
        );
        order.push(iteration);
        // select may already be gone once it has issued every token
        let _ = side.credits.send(Some(iteration));
    }
    Ok((log, order))
}

fn joined<T>(
    handle: thread::ScopedJoinHandle<'_, T>,
    stage: StageKind,
) -> Result<T, PipelineError> {
    handle
        .join()
        .map_err(|_| PipelineError::WorkerPanicked(stage))
}

/// Run `budget_m` iterations through the pipeline and drain it.
pub fn run_pipeline<S: GameState>(
    root: S,
    params: &UctParams,
    config: &PipelineConfig,
) -> Result<PipelineOutcome<S>, PipelineError> {
    params.validate()?;
    config.validate()?;
    let budget = params.budget_m;
    let k = config.playout_lanes;
    let cap = config.buffer_capacity;
    let tree = SearchTree::new(root, budget as usize + 1);
    let stages = Stages::new(&tree, *params, config.staleness);
    let backups_done = AtomicU64::new(0);
    let clock = Clock {
        origin: Instant::now(),
        record: config.record_events,
        delay: config.stage_delay,
    };

    let (credit_tx, credit_rx) = bounded::<Option<u64>>(config.in_flight_limit);
    for _ in 0..config.in_flight_limit {
        credit_tx
            .send(None)
            .expect("credit channel sized to the limit");
    }
    let (expand_tx, expand_rx) = bounded::<TrajectoryToken>(cap);
    let (backup_tx, backup_rx) = bounded::<TrajectoryToken>(cap);
    let (lane_senders, lane_rxs): (LaneSenders, Vec<Receiver<TrajectoryToken>>) =
        match config.lane_assignment {
            LaneAssignment::FirstFree => {
                let (tx, rx) = bounded(cap);
                (LaneSenders::Shared(tx), vec![rx; k])
            }
            LaneAssignment::RoundRobin => {
                let (txs, rxs) = (0..k).map(|_| bounded(cap)).unzip();
                (LaneSenders::PerLane(txs), rxs)
            }
        };
    let watch_lanes = match config.lane_assignment {
        LaneAssignment::FirstFree => lane_rxs[..1].to_vec(),
        LaneAssignment::RoundRobin => lane_rxs.clone(),
    };
    let backup_side = BackupSide {
        from_upstream: backup_rx,
        credits: credit_tx,
        watch_expand: expand_rx.clone(),
        watch_lanes,
    };

    let (select_log, expand_log, lane_logs, backup_out) = thread::scope(|scope| {
        let stages = &stages;
        let clock = &clock;
        let backups_done = &backups_done;
        let select = scope.spawn(move || {
            select_worker(stages, budget, credit_rx, expand_tx, backups_done, clock)
        });
        let fast_tx = backup_tx.clone();
        let expand =
            scope.spawn(move || expand_worker(stages, expand_rx, lane_senders, fast_tx, clock));
        let lanes: Vec<_> = lane_rxs
            .into_iter()
            .enumerate()
            .map(|(lane, rx)| {
                let tx = backup_tx.clone();
                scope.spawn(move || playout_worker(stages, lane, rx, tx, clock))
            })
            .collect();
        drop(backup_tx);
        let backup_out = backup_worker(
            stages,
            backup_side,
            budget,
            config.drain_timeout,
            backups_done,
            clock,
        );
        let select_log = joined(select, StageKind::Select);
        let expand_log = joined(expand, StageKind::Expand).and_then(|r| r);
        let lane_logs: Result<Vec<WorkerLog>, PipelineError> = lanes
            .into_iter()
            .map(|h| joined(h, StageKind::Playout).and_then(|r| r))
            .collect();
        (select_log, expand_log, lane_logs, backup_out)
    });
    // The backup error explains a stall better than the upstream symptoms.
    let (backup_log, completion_order) = backup_out?;
    let select_log = select_log?;
    let expand_log = expand_log?;
    let lane_logs = lane_logs?;

    let mut stats = StageStats {
        select: select_log.stat,
        expand: expand_log.stat,
        backup: backup_log.stat,
        lanes: lane_logs.iter().map(|l| l.stat).collect(),
        ..Default::default()
    };
    for l in &stats.lanes {
        stats.playout.merge(l);
    }
    stats.playout.skipped = expand_log.fast_path;

    let audit = TokenAudit {
        created: select_log.stat.items,
        expanded: expand_log.expanded,
        fast_path: expand_log.fast_path,
        played: stats.playout.items,
        backed: backup_log.stat.items,
        duplicates: select_log.duplicates,
        max_staleness: select_log.max_staleness,
        completion_order,
    };
    check_audit(&audit, budget)?;

    let mut events = Vec::new();
    if config.record_events {
        events.extend(select_log.events);
        events.extend(expand_log.events);
        for l in lane_logs {
            events.extend(l.events);
        }
        events.extend(backup_log.events);
        events.sort_by_key(|e| (e.start_ns, e.token));
    }

    let elapsed = clock.origin.elapsed().as_nanos() as u64;
    let result = SearchResult::from_tree(&tree, elapsed)?;
    Ok(PipelineOutcome {
        result,
        stats,
        audit,
        events,
        tree,
    })
}

fn check_audit(audit: &TokenAudit, budget: u64) -> Result<(), PipelineError> {
    let fail = |msg: String| Err(PipelineError::Audit(msg));
    if audit.created != budget || audit.backed != budget {
        return fail(format!(
            "created {} and backed {} tokens, budget {budget}",
            audit.created, audit.backed
        ));
    }
    if audit.expanded + audit.fast_path != budget {
        return fail(format!(
            "expand saw {} + {} fast-path tokens",
            audit.expanded, audit.fast_path
        ));
    }
    if audit.played != audit.expanded {
        return fail(format!(
            "{} expanded but {} played",
            audit.expanded, audit.played
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{Action, GameError, Player, SyntheticGame, SyntheticParams, TicTacToe};
    use crate::mcts::run_sequential;

    fn synth(b: u16, d: u16, cost: u64, seed: u64) -> SyntheticGame {
        SyntheticGame::new(SyntheticParams {
            branching: b,
            depth: d,
            playout_cost: cost,
            seed,
        })
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::with_lanes(0).validate().is_err());
        assert!(PipelineConfig::with_lanes(2).buffer(0).validate().is_err());
        assert!(PipelineConfig::with_lanes(2)
            .in_flight(0)
            .validate()
            .is_err());
        assert!(PipelineEngine::new(PipelineConfig::with_lanes(2)).is_ok());
        let err = run_pipeline(
            TicTacToe::new(),
            &UctParams::new(1.0, 0, 0),
            &PipelineConfig::default(),
        );
        assert!(matches!(
            err,
            Err(PipelineError::Search(MctsError::InvalidParams(_)))
        ));
    }

    #[test]
    fn config_json() {
        let cfg = PipelineConfig::with_lanes(4).staleness(StalenessPolicy::VisitMark);
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"visit_mark\""));
        assert!(text.contains("\"first_free\""));
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.playout_lanes, 4);
        assert_eq!(back.staleness, StalenessPolicy::VisitMark);
    }

    #[test]
    fn single_token() {
        let params = UctParams::new(1.0, 1, 3);
        for k in [1, 3] {
            let out =
                run_pipeline(TicTacToe::new(), &params, &PipelineConfig::with_lanes(k)).unwrap();
            assert_eq!(out.tree.visits(out.tree.root()), 1);
            assert_eq!(out.audit.created, 1);
            assert_eq!(out.audit.backed, 1);
            assert_eq!(out.tree.len(), 2);
        }
    }

    #[test]
    fn in_flight_one_matches_sequential() {
        for seed in 0..5 {
            let params = UctParams::new(1.0, 300, seed);
            let seq = run_sequential(TicTacToe::new(), &params).unwrap();
            let cfg = PipelineConfig::with_lanes(3).in_flight(1);
            let pipe = run_pipeline(TicTacToe::new(), &params, &cfg).unwrap();
            assert!(pipe.result.same_search(&seq.result));
            assert_eq!(pipe.tree.snapshot(), seq.tree.snapshot());
            assert_eq!(pipe.audit.duplicates, 0);
            assert_eq!(pipe.audit.max_staleness, 0);
        }
    }

    #[test]
    fn conservation_with_lanes() {
        let params = UctParams::new(1.0, 1000, 11);
        let cfg = PipelineConfig::with_lanes(4).in_flight(8);
        let out = run_pipeline(synth(4, 8, 200, 11), &params, &cfg).unwrap();
        assert_eq!(out.tree.visits(out.tree.root()), 1000);
        assert_eq!(out.tree.check_invariants(), Ok(()));
        assert_eq!(out.stats.lanes.len(), 4);
        assert!(
            out.stats.lanes.iter().all(|l| l.items > 0),
            "{:?}",
            out.stats.lanes
        );
        assert_eq!(out.stats.select.items, 1000);
        assert_eq!(out.stats.expand.items, 1000);
        assert_eq!(out.stats.playout.items + out.stats.playout.skipped, 1000);
        assert_eq!(out.stats.backup.items, 1000);
        assert!(out.audit.max_staleness < 8);
    }

    #[test]
    fn round_robin_lanes() {
        let params = UctParams::new(1.0, 400, 2);
        let mut cfg = PipelineConfig::with_lanes(3).in_flight(6);
        cfg.lane_assignment = LaneAssignment::RoundRobin;
        let out = run_pipeline(synth(3, 6, 0, 2), &params, &cfg).unwrap();
        assert_eq!(out.tree.visits(out.tree.root()), 400);
        let items: Vec<u64> = out.stats.lanes.iter().map(|l| l.items).collect();
        let spread = items.iter().max().unwrap() - items.iter().min().unwrap();
        assert!(spread <= 1, "{items:?}");
    }

    #[test]
    fn phase_order_enforced() {
        let tree = SearchTree::new(TicTacToe::new(), 4);
        let stages = Stages::new(&tree, UctParams::new(1.0, 4, 0), StalenessPolicy::Plain);
        let token = stages.select_stage(0, 0);
        let err = stages.backup_stage(token.clone()).unwrap_err();
        assert_eq!(
            err,
            PipelineError::PhaseViolation {
                token: 0,
                stage: StageKind::Backup,
                expected: Phase::Played,
                found: Phase::Selected
            }
        );
        assert!(stages.playout_stage(token.clone(), 0).is_err());
        let expanded = stages.expand_stage(token).unwrap();
        assert!(stages.expand_stage(expanded.clone()).is_err());
        let played = stages.playout_stage(expanded, 0).unwrap();
        let backed = stages.backup_stage(played).unwrap();
        assert_eq!(backed.phase, Phase::Backed);
        assert!(stages.backup_stage(backed).is_err());
    }

    #[test]
    fn visit_mark_then_settle() {
        // grow a little tree, then compare a marked and an unmarked token
        let params = UctParams::new(1.0, 30, 4);
        let grow = || {
            let tree = SearchTree::new(TicTacToe::new(), 40);
            for i in 0..30 {
                mcts::run_iteration(&tree, &params, i).unwrap();
            }
            tree
        };
        let (plain_tree, marked_tree) = (grow(), grow());
        let plain = Stages::new(&plain_tree, params, StalenessPolicy::Plain);
        let marked = Stages::new(&marked_tree, params, StalenessPolicy::VisitMark);

        let before: Vec<u64> = {
            let t = plain.select_stage(30, 30);
            t.trajectory
                .path
                .iter()
                .map(|&id| plain_tree.visits(id))
                .collect()
        };
        let token = marked.select_stage(30, 30);
        let path = token.trajectory.path.clone();
        assert!(path.len() >= 2, "path {path:?}");
        let after: Vec<u64> = path.iter().map(|&id| marked_tree.visits(id)).collect();
        assert_eq!(after, before.iter().map(|n| n + 1).collect::<Vec<_>>());

        let finish = |s: &Stages<'_, TicTacToe>, t: TrajectoryToken| {
            let t = s.expand_stage(t).unwrap();
            let t = if t.phase == Phase::Expanded {
                s.playout_stage(t, 0).unwrap()
            } else {
                t
            };
            s.backup_stage(t).unwrap();
        };
        finish(&marked, token);
        finish(&plain, plain.select_stage(30, 30));
        assert_eq!(marked_tree.snapshot(), plain_tree.snapshot());
    }

    #[test]
    fn stale_selections_duplicate() {
        // A fully expanded root with equal children: c_p = 0 and stale stats
        // make two in-flight tokens pick the same path.
        let params = UctParams::new(0.0, 40, 9);
        let tree = run_sequential(synth(2, 6, 0, 9), &params).unwrap().tree;
        let stages = Stages::new(&tree, params, StalenessPolicy::Plain);
        let a = stages.select_stage(40, 40);
        let b = stages.select_stage(41, 40);
        assert_eq!(a.trajectory.path, b.trajectory.path);
        assert_eq!(b.staleness, 1);

        let out = run_pipeline(
            TicTacToe::new(),
            &UctParams::new(0.0, 200, 1),
            &PipelineConfig::with_lanes(2).in_flight(8),
        )
        .unwrap();
        assert!(out.audit.duplicates > 0);
        assert!(out.audit.duplicate_fraction() > 0.0);
    }

    #[test]
    fn replayed_token_gives_same_delta() {
        let tree = SearchTree::new(synth(3, 5, 0, 1), 8);
        let stages = Stages::new(&tree, UctParams::new(1.0, 8, 77), StalenessPolicy::Plain);
        let token = stages.expand_stage(stages.select_stage(0, 0)).unwrap();
        let a = stages.playout_stage(token.clone(), 0).unwrap();
        let b = stages.playout_stage(token, 1).unwrap();
        assert_eq!(a.trajectory.delta, b.trajectory.delta);
        assert_eq!((a.lane, b.lane), (Some(0), Some(1)));
    }

    /// Two moves deep; playouts from the first action's subtree are slow.
    #[derive(Debug, Clone)]
    struct SlowBranch {
        moves: Vec<u16>,
        slow: u16,
    }

    impl GameState for SlowBranch {
        fn to_move(&self) -> Player {
            if self.moves.len().is_multiple_of(2) {
                Player::First
            } else {
                Player::Second
            }
        }
        fn legal_actions(&self) -> Vec<Action> {
            match self.moves.len() {
                0 => vec![Action(0), Action(1)],
                1 => vec![Action(0)],
                _ => vec![],
            }
        }
        fn apply(&self, a: Action) -> Result<Self, GameError> {
            if !self.legal_actions().contains(&a) {
                return Err(GameError::IllegalAction(a));
            }
            let mut moves = self.moves.clone();
            moves.push(a.0);
            Ok(Self {
                moves,
                slow: self.slow,
            })
        }
        fn is_terminal(&self) -> bool {
            self.moves.len() >= 2
        }
        fn terminal_reward(&self, p: Player) -> Result<f64, GameError> {
            if !self.is_terminal() {
                return Err(GameError::NotTerminal);
            }
            Ok(if p == Player::First { 1.0 } else { 0.0 })
        }
        fn playout_cost(&self) -> u64 {
            if self.moves.first() == Some(&self.slow) {
                200_000
            } else {
                20_000
            }
        }
    }

    #[test]
    fn parallel_lanes_deliver_out_of_order() {
        // make the root's first expansion (iteration 0) land on the slow branch
        let seed = 5;
        let tree = SearchTree::new(
            SlowBranch {
                moves: vec![],
                slow: 0,
            },
            2,
        );
        let mut traj = mcts::select(&tree, 1.0, 0);
        mcts::expand(&tree, &mut traj, &mut iteration_rng(seed, 0)).unwrap();
        let slow = tree.action(traj.leaf()).unwrap().0;
        let root = SlowBranch {
            moves: vec![],
            slow,
        };
        let params = UctParams::new(1.0, 2, seed);

        let cfg = PipelineConfig::with_lanes(2).in_flight(2);
        let out = run_pipeline(root.clone(), &params, &cfg).unwrap();
        assert_eq!(out.audit.completion_order, vec![1, 0]);

        let cfg = PipelineConfig::with_lanes(1).in_flight(2);
        let out = run_pipeline(root, &params, &cfg).unwrap();
        assert_eq!(out.audit.completion_order, vec![0, 1]);
    }

    #[test]
    fn event_log_csv() {
        let mut cfg = PipelineConfig::with_lanes(2);
        cfg.record_events = true;
        let out = run_pipeline(TicTacToe::new(), &UctParams::new(1.0, 20, 0), &cfg).unwrap();
        let fast = out.audit.fast_path as usize;
        assert_eq!(out.events.len(), 20 * 4 - fast);
        let mut buf = Vec::new();
        write_events(&out.events, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("token,stage,lane,start_ns,end_ns\n"));
        assert!(text.contains(",playout,"));
        assert!(text.lines().skip(1).any(|l| l.contains(",select,,")));
        let json = out.to_json();
        assert!(json.contains("\"completion_order\""));
    }

    #[test]
    fn engine_runs_repeatedly() {
        let mut engine = PipelineEngine::new(PipelineConfig::with_lanes(2)).unwrap();
        let a = engine
            .run(TicTacToe::new(), &UctParams::new(1.0, 100, 1))
            .unwrap();
        let b = engine
            .run(TicTacToe::new(), &UctParams::new(1.0, 100, 1))
            .unwrap();
        assert_eq!(a.tree.visits(a.tree.root()), 100);
        assert_eq!(b.tree.visits(b.tree.root()), 100);
    }

    #[test]
    fn stages_overlap_in_time() {
        // four tokens, one lane, each stage step padded to one tick
        let tick = Duration::from_millis(30);
        let mut cfg = PipelineConfig::with_lanes(1).in_flight(4);
        cfg.record_events = true;
        cfg.stage_delay = Some(tick);
        let out = run_pipeline(synth(2, 6, 0, 3), &UctParams::new(1.0, 4, 3), &cfg).unwrap();
        let at = |token: u64, stage: StageKind| {
            out.events
                .iter()
                .find(|e| e.token == token && e.stage == stage)
                .unwrap()
                .clone()
        };
        use StageKind::*;
        for t in 0..4 {
            let steps = [at(t, Select), at(t, Expand), at(t, Playout), at(t, Backup)];
            for w in steps.windows(2) {
                assert!(w[1].start_ns >= w[0].end_ns);
            }
        }
        assert!(at(1, Select).start_ns < at(0, Backup).start_ns);
        let span = out.events.iter().map(|e| e.end_ns).max().unwrap();
        let ticks = span as f64 / tick.as_nanos() as f64;
        assert!(ticks < 12.0, "{ticks} ticks");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn policy() -> impl Strategy<Value = StalenessPolicy> {
            prop_oneof![
                Just(StalenessPolicy::Plain),
                Just(StalenessPolicy::VisitMark)
            ]
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn every_token_backed_once(
                k in 1usize..5,
                limit in 1usize..9,
                m in 1u64..300,
                seed in any::<u64>(),
                pol in policy(),
                rr in any::<bool>(),
            ) {
                let mut cfg = PipelineConfig::with_lanes(k).in_flight(limit).staleness(pol);
                if rr {
                    cfg.lane_assignment = LaneAssignment::RoundRobin;
                }
                let out = run_pipeline(synth(3, 7, 0, seed), &UctParams::new(1.0, m, seed), &cfg).unwrap();
                prop_assert_eq!(out.tree.visits(out.tree.root()), m);
                prop_assert_eq!(out.tree.check_invariants(), Ok(()));
                let mut order = out.audit.completion_order.clone();
                order.sort_unstable();
                prop_assert_eq!(order, (0..m).collect::<Vec<_>>());
                prop_assert!(out.audit.max_staleness < limit as u64);
            }

            #[test]
            fn tictactoe_invariants(
                k in 1usize..4,
                limit in 1usize..9,
                m in 1u64..400,
                seed in any::<u64>(),
                pol in policy(),
            ) {
                let cfg = PipelineConfig::with_lanes(k).in_flight(limit).staleness(pol);
                let out = run_pipeline(TicTacToe::new(), &UctParams::new(1.0, m, seed), &cfg).unwrap();
                prop_assert_eq!(out.tree.check_invariants(), Ok(()));
                prop_assert_eq!(out.audit.expanded + out.audit.fast_path, m);
            }
        }
    }
}
