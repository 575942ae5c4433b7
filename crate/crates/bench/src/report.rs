//! Result rows and the aggregate report.
//!
//! `report.json` has three parts. `deterministic` holds everything that is
//! reproducible from the seeds; `digest` is the SHA-256 of its compact JSON
//! encoding; `timing` holds wall-clock data and the generation time.

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use mctspipe::bench::{median, ExperimentSpec, RunRecord};
use mctspipe::mcts::ChildStats;
use mctspipe::Action;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct CsvRow {
    pub game: String,
    pub engine: String,
    pub k: usize,
    pub in_flight: usize,
    pub m: u64,
    pub seed: u64,
    pub wall_ns: u64,
    pub best_action: Action,
    pub root_n: u64,
    pub seq_wall_ns: u64,
    pub speedup: f64,
}

impl CsvRow {
    pub fn new(rec: &RunRecord, seq_wall_ns: u64) -> Self {
        Self {
            game: rec.game.clone(),
            engine: rec.engine.clone(),
            k: rec.k,
            in_flight: rec.in_flight,
            m: rec.m,
            seed: rec.seed,
            wall_ns: rec.wall_ns,
            best_action: rec.best_action,
            root_n: rec.root_n,
            seq_wall_ns,
            speedup: seq_wall_ns as f64 / rec.wall_ns.max(1) as f64,
        }
    }
}

pub fn rows_to_csv(rows: &[CsvRow]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// The reproducible view of one run. Searches with more than one token in
/// flight depend on thread timing, so only their budget checks are kept.
#[derive(Debug, Clone, Serialize)]
struct StableRun {
    game: String,
    engine: String,
    k: usize,
    in_flight: usize,
    m: u64,
    seed: u64,
    root_n: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_action: Option<Action>,
    #[serde(skip_serializing_if = "Option::is_none")]
    root_children: Option<Vec<ChildStats>>,
}

impl From<&RunRecord> for StableRun {
    fn from(r: &RunRecord) -> Self {
        let reproducible = r.in_flight == 1;
        Self {
            game: r.game.clone(),
            engine: r.engine.clone(),
            k: r.k,
            in_flight: r.in_flight,
            m: r.m,
            seed: r.seed,
            root_n: r.root_n,
            best_action: reproducible.then_some(r.best_action),
            root_children: reproducible.then(|| r.result.root_children.clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct Deterministic<'a> {
    command: &'a str,
    specs: &'a [ExperimentSpec],
    runs: Vec<StableRun>,
}

#[derive(Debug, Clone, Serialize)]
struct Group {
    engine: String,
    k: usize,
    in_flight: usize,
    runs: usize,
    median_wall_ns: u64,
    median_speedup: f64,
    mean_duplicate_fraction: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct Timing {
    generated_unix_ms: u128,
    groups: Vec<Group>,
}

#[derive(Debug, Clone, Serialize)]
struct Report<'a> {
    deterministic: Deterministic<'a>,
    digest: String,
    timing: Timing,
}

pub fn digest_of<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("report serializes");
    hex::encode(Sha256::digest(bytes))
}

pub fn build_report(
    command: &str,
    specs: &[ExperimentSpec],
    records: &[RunRecord],
    rows: &[CsvRow],
) -> String {
    let deterministic = Deterministic {
        command,
        specs,
        runs: records.iter().map(StableRun::from).collect(),
    };
    let digest = digest_of(&deterministic);

    type GroupKey = (String, usize, usize);
    let mut by_group: BTreeMap<GroupKey, Vec<(usize, &CsvRow)>> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        by_group
            .entry((row.engine.clone(), row.k, row.in_flight))
            .or_default()
            .push((i, row));
    }
    let groups = by_group
        .into_iter()
        .map(|((engine, k, in_flight), members)| {
            let walls: Vec<u64> = members.iter().map(|(_, r)| r.wall_ns).collect();
            let mut speedups: Vec<f64> = members.iter().map(|(_, r)| r.speedup).collect();
            speedups.sort_by(f64::total_cmp);
            let dups: Vec<f64> = members
                .iter()
                .filter_map(|(i, _)| records[*i].duplicate_fraction)
                .collect();
            Group {
                engine,
                k,
                in_flight,
                runs: members.len(),
                median_wall_ns: median(&walls).unwrap_or(0),
                median_speedup: speedups[(speedups.len() - 1) / 2],
                mean_duplicate_fraction: (!dups.is_empty())
                    .then(|| dups.iter().sum::<f64>() / dups.len() as f64),
            }
        })
        .collect();
    let generated_unix_ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let report = Report {
        deterministic,
        digest,
        timing: Timing {
            generated_unix_ms,
            groups,
        },
    };
    serde_json::to_string_pretty(&report).expect("report serializes")
}
