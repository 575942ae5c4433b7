//! Discrete-event simulation of abstract pipelines.
//!
//! Stages have integer durations in ticks and a lane count. Items flow
//! through the stages in order with unbounded buffers in between. A stage
//! with one lane is serial and handles items in item order; a stage with
//! several lanes hands each item, as it becomes ready, to the earliest free
//! lane (lowest lane index on ties) and may finish items out of order.

use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("cannot write gantt csv to {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("gantt csv {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub duration: u64,
    #[serde(default = "one")]
    pub lanes: u32,
}

fn one() -> u32 {
    1
}

impl StageSpec {
    pub fn new(name: impl Into<String>, duration: u64, lanes: u32) -> Self {
        Self {
            name: name.into(),
            duration,
            lanes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub stages: Vec<StageSpec>,
    #[serde(rename = "items")]
    pub num_items: u64,
}

impl SimConfig {
    /// The four search stages with the given durations, one lane each
    /// except `playout_lanes` on the playout stage.
    pub fn mcts(durations: [u64; 4], playout_lanes: u32, items: u64) -> Self {
        let names = ["select", "expand", "playout", "backup"];
        let stages = names
            .iter()
            .zip(durations)
            .map(|(name, d)| {
                let lanes = if *name == "playout" { playout_lanes } else { 1 };
                StageSpec::new(*name, d, lanes)
            })
            .collect();
        Self {
            stages,
            num_items: items,
        }
    }

    /// `p` serial stages of equal duration.
    pub fn uniform(p: usize, duration: u64, items: u64) -> Self {
        Self {
            stages: (0..p)
                .map(|i| StageSpec::new(format!("s{i}"), duration, 1))
                .collect(),
            num_items: items,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: SimConfig =
            serde_json::from_str(text).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.stages.is_empty() {
            return Err(SimError::InvalidConfig(
                "at least one stage is required".into(),
            ));
        }
        if self.num_items == 0 {
            return Err(SimError::InvalidConfig("items must be >= 1".into()));
        }
        for s in &self.stages {
            if s.duration == 0 || s.lanes == 0 {
                return Err(SimError::InvalidConfig(format!(
                    "stage {:?}: duration and lanes must be >= 1",
                    s.name
                )));
            }
        }
        Ok(())
    }
}

/// One bar of the Gantt chart.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GanttEntry {
    pub item: u64,
    pub stage: String,
    pub lane: u32,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimResult {
    pub makespan: u64,
    pub sequential_makespan: u64,
    pub steady_period: u64,
    /// Sorted by start tick, then stage order.
    pub gantt: Vec<GanttEntry>,
}

impl SimResult {
    /// Number of lanes busy during tick `t` (the interval `[t, t + 1)`).
    pub fn busy_at(&self, t: u64) -> usize {
        self.gantt
            .iter()
            .filter(|g| g.start <= t && t < g.end)
            .count()
    }

    pub fn entries_for_item(&self, item: u64) -> impl Iterator<Item = &GanttEntry> {
        self.gantt.iter().filter(move |g| g.item == item)
    }
}

/// List-schedule the configured pipeline.
pub fn simulate(config: &SimConfig) -> Result<SimResult, SimError> {
    config.validate()?;
    let m = config.num_items as usize;
    // ready[i]: tick at which item i leaves the previous stage
    let mut ready = vec![0u64; m];
    let mut bars: Vec<(usize, GanttEntry)> = Vec::with_capacity(m * config.stages.len());

    for (stage_idx, stage) in config.stages.iter().enumerate() {
        let mut lane_free = vec![0u64; stage.lanes as usize];
        let mut finish = vec![0u64; m];
        let mut order: Vec<usize> = (0..m).collect();
        if stage.lanes > 1 {
            order.sort_by_key(|&i| (ready[i], i));
        }
        for i in order {
            let (lane, free_at) = lane_free
                .iter()
                .copied()
                .enumerate()
                .min_by_key(|&(l, t)| (t.max(ready[i]), l))
                .expect("at least one lane");
            let start = free_at.max(ready[i]);
            let end = start + stage.duration;
            lane_free[lane] = end;
            finish[i] = end;
            bars.push((
                stage_idx,
                GanttEntry {
                    item: i as u64,
                    stage: stage.name.clone(),
                    lane: lane as u32,
                    start,
                    end,
                },
            ));
        }
        ready = finish;
    }

    bars.sort_by_key(|(stage_idx, g)| (g.start, *stage_idx, g.item));
    let gantt: Vec<GanttEntry> = bars.into_iter().map(|(_, g)| g).collect();
    Ok(SimResult {
        makespan: gantt.iter().map(|g| g.end).max().unwrap_or(0),
        sequential_makespan: sequential_makespan(config),
        steady_period: steady_period(config),
        gantt,
    })
}

/// Makespan with no overlap at all: every item runs every stage in turn.
pub fn sequential_makespan(config: &SimConfig) -> u64 {
    config.num_items * config.stages.iter().map(|s| s.duration).sum::<u64>()
}

/// Ticks per item once the pipeline is saturated: the slowest stage after
/// dividing its work across its lanes.
pub fn steady_period(config: &SimConfig) -> u64 {
    config
        .stages
        .iter()
        .map(|s| s.duration.div_ceil(u64::from(s.lanes)))
        .max()
        .unwrap_or(0)
}

/// Write the Gantt chart as CSV with header `item,stage,lane,start,end`.
pub fn export_gantt(result: &SimResult, path: impl AsRef<Path>) -> Result<(), SimError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| SimError::Io {
        path: path.to_owned(),
        source,
    })?;
    write_gantt(result, file).map_err(|source| SimError::Csv {
        path: path.to_owned(),
        source,
    })
}

pub fn write_gantt<W: io::Write>(result: &SimResult, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for g in &result.gantt {
        w.serialize(g)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_gantt(path: impl AsRef<Path>) -> Result<Vec<GanttEntry>, SimError> {
    let path = path.as_ref();
    let wrap = |source| SimError::Csv {
        path: path.to_owned(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(wrap)?;
    r.deserialize().collect::<Result<_, _>>().map_err(wrap)
}
