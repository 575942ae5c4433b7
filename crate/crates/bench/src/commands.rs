use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use mctspipe::bench::{
    search_overhead, strength_match, BenchError, EngineSpec, ExperimentSpec, GameSpec, PlayerSpec,
    RunRecord,
};
use mctspipe::pipeline::{export_events, PipelineConfig};
use mctspipe::sched::{self, SimConfig, SimError};
use mctspipe::TicTacToe;
use serde::Serialize;
use thiserror::Error;

use crate::args::{Command, ExperimentArgs, Format, MatchArgs, Opponent, SimArgs};
use crate::report::{build_report, rows_to_csv, CsvRow};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Bench(e) if e.is_invariant_violation() => 2,
            _ => 1,
        }
    }
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(a) => run(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Match(a) => play_match(&a),
        Command::Overhead(a) => overhead(&a),
        Command::Sim(a) => sim(&a),
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn out_dir(args: &ExperimentArgs) -> Result<Option<&Path>, CliError> {
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|source| CliError::Io {
                path: dir.clone(),
                source,
            })?;
            Ok(Some(dir))
        }
        None if args.events => Err(CliError::Usage("--events needs --out".into())),
        None => Ok(None),
    }
}

fn base_spec(args: &ExperimentArgs) -> Result<ExperimentSpec, CliError> {
    let spec = match &args.config {
        Some(path) => serde_json::from_str(&read(path)?).map_err(|source| CliError::Json {
            path: path.clone(),
            source,
        })?,
        None => args.spec_with(args.engine_spec(args.first_lanes())),
    };
    spec.validate()?;
    Ok(spec)
}

fn sequential_walls(
    spec: &ExperimentSpec,
) -> Result<(Vec<RunRecord>, HashMap<u64, u64>), CliError> {
    let baseline = ExperimentSpec {
        engine: EngineSpec::Sequential,
        ..spec.clone()
    };
    let records = baseline.run_all()?;
    let walls = records.iter().map(|r| (r.seed, r.wall_ns)).collect();
    Ok((records, walls))
}

fn emit(
    args: &ExperimentArgs,
    command: &str,
    specs: &[ExperimentSpec],
    records: &[RunRecord],
    rows: &[CsvRow],
) -> Result<(), CliError> {
    let csv_text = rows_to_csv(rows)?;
    let report = build_report(command, specs, records, rows);
    if let Some(dir) = out_dir(args)? {
        write(&dir.join("results.csv"), &csv_text)?;
        write(&dir.join("report.json"), &report)?;
        let runs = serde_json::to_string_pretty(records).expect("records serialize");
        write(&dir.join("runs.json"), &runs)?;
        for r in records.iter().filter(|r| !r.events.is_empty()) {
            let name = format!("events-k{}-seed{}.csv", r.k, r.seed);
            let path = dir.join(name);
            export_events(&r.events, &path).map_err(|source| CliError::Io { path, source })?;
        }
    }
    let text = match args.format {
        Format::Csv => csv_text,
        Format::Json => report + "\n",
    };
    print!("{text}");
    Ok(())
}

fn run(args: &ExperimentArgs) -> Result<(), CliError> {
    let spec = base_spec(args)?;
    let records = spec.run_all()?;
    let walls: HashMap<u64, u64> = match spec.engine {
        EngineSpec::Sequential => records.iter().map(|r| (r.seed, r.wall_ns)).collect(),
        EngineSpec::Pipeline(_) => sequential_walls(&spec)?.1,
    };
    let rows: Vec<CsvRow> = records
        .iter()
        .map(|r| CsvRow::new(r, walls[&r.seed]))
        .collect();
    emit(args, "run", &[spec], &records, &rows)
}

fn sweep(args: &ExperimentArgs) -> Result<(), CliError> {
    let base = base_spec(args)?;
    let template = match &base.engine {
        EngineSpec::Pipeline(c) if args.config.is_some() => Some(c.clone()),
        _ => None,
    };
    let (mut records, walls) = sequential_walls(&base)?;
    let mut specs = vec![ExperimentSpec {
        engine: EngineSpec::Sequential,
        ..base.clone()
    }];
    for &k in &args.lanes {
        let config = match &template {
            Some(c) => PipelineConfig {
                playout_lanes: k,
                ..c.clone()
            },
            None => args.pipeline_config(k),
        };
        let spec = ExperimentSpec {
            engine: EngineSpec::Pipeline(config),
            ..base.clone()
        };
        spec.validate()?;
        records.extend(spec.run_all()?);
        specs.push(spec);
    }
    let rows: Vec<CsvRow> = records
        .iter()
        .map(|r| CsvRow::new(r, walls[&r.seed]))
        .collect();
    emit(args, "sweep", &specs, &records, &rows)
}

fn print_json<T: Serialize>(value: &T, out: Option<&Path>, name: &str) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    if let Some(dir) = out {
        write(&dir.join(name), &text)?;
    }
    println!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct MatchOutput<'a> {
    side_a: &'a PlayerSpec,
    side_b: &'a PlayerSpec,
    seed: u64,
    report: mctspipe::bench::MatchReport,
}

fn play_match(args: &MatchArgs) -> Result<(), CliError> {
    let a_args = &args.side_a;
    let spec = base_spec(a_args)?;
    let side_a = PlayerSpec::Mcts {
        budget_m: spec.budget_m,
        c_p: spec.c_p,
        engine: spec.engine.clone(),
    };
    let side_b = match args.opponent {
        Opponent::Random => PlayerSpec::Random,
        Opponent::Sequential => PlayerSpec::Mcts {
            budget_m: spec.budget_m,
            c_p: spec.c_p,
            engine: EngineSpec::Sequential,
        },
    };
    let seed = spec.seeds[0];
    let report = match spec.game.synthetic(seed) {
        Some(g) => strength_match(&g, &side_a, &side_b, args.games, seed)?,
        None => strength_match(&TicTacToe::new(), &side_a, &side_b, args.games, seed)?,
    };
    let output = MatchOutput {
        side_a: &side_a,
        side_b: &side_b,
        seed,
        report,
    };
    print_json(&output, out_dir(a_args)?, "match.json")
}

#[derive(Serialize)]
struct OverheadOutput<'a> {
    game: GameSpec,
    budget_m: u64,
    c_p: f64,
    pipeline: &'a PipelineConfig,
    seeds: &'a [u64],
    /// Both metrics are proxies for wasted search.
    definitions: [(&'static str, &'static str); 2],
    report: mctspipe::bench::OverheadReport,
}

fn overhead(args: &ExperimentArgs) -> Result<(), CliError> {
    let spec = base_spec(args)?;
    let config = match &spec.engine {
        EngineSpec::Pipeline(c) => c.clone(),
        EngineSpec::Sequential => args.pipeline_config(args.first_lanes()),
    };
    config.validate().map_err(BenchError::from)?;
    let report = match spec.game.synthetic(0) {
        Some(g) => search_overhead(&g, spec.c_p, spec.budget_m, &config, &spec.seeds)?,
        None => search_overhead(
            &TicTacToe::new(),
            spec.c_p,
            spec.budget_m,
            &config,
            &spec.seeds,
        )?,
    };
    let output = OverheadOutput {
        game: spec.game,
        budget_m: spec.budget_m,
        c_p: spec.c_p,
        pipeline: &config,
        seeds: &spec.seeds,
        definitions: [
            (
                "duplicate_fraction",
                "share of iterations whose selected path matched another in-flight iteration",
            ),
            (
                "root_policy_distance",
                "L1 distance between pipeline and sequential root visit distributions",
            ),
        ],
        report,
    };
    print_json(&output, out_dir(args)?, "overhead.json")
}

fn sim(args: &SimArgs) -> Result<(), CliError> {
    let config = SimConfig::from_json(&read(&args.config)?)?;
    let result = sched::simulate(&config)?;
    if let Some(path) = &args.gantt {
        sched::export_gantt(&result, path)?;
    }
    match args.format {
        None => println!(
            "makespan={}\nsequential_makespan={}\nsteady_period={}",
            result.makespan, result.sequential_makespan, result.steady_period
        ),
        Some(Format::Json) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&result).expect("result serializes")
            )
        }
        Some(Format::Csv) => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            sched::write_gantt(&result, &mut lock)?;
            lock.flush().map_err(|source| CliError::Io {
                path: "<stdout>".into(),
                source,
            })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let invariant = CliError::Bench(BenchError::Invariant("root visits".into()));
        assert_eq!(invariant.exit_code(), 2);
        let audit = CliError::Bench(BenchError::Pipeline(
            mctspipe::pipeline::PipelineError::Audit("lost token".into()),
        ));
        assert_eq!(audit.exit_code(), 2);
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Bench(BenchError::NonPositiveTime).exit_code(), 1);
    }
}
