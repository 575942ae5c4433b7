use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mctspipe::bench::{EngineSpec, ExperimentSpec, GameSpec};
use mctspipe::pipeline::{LaneAssignment, PipelineConfig, StalenessPolicy};

#[derive(Debug, Parser)]
#[command(
    name = "bench",
    version,
    about = "Benchmarks for sequential and pipelined MCTS"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one engine configuration over a set of seeds.
    Run(ExperimentArgs),
    /// Run the pipeline once per `--lanes` value, plus a sequential baseline.
    Sweep(ExperimentArgs),
    /// Play seat-balanced games between the configured engine and an opponent.
    Match(MatchArgs),
    /// Compare pipeline and sequential searches on the same seeds.
    Overhead(ExperimentArgs),
    /// Simulate a stage schedule.
    Sim(SimArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GameArg {
    Tictactoe,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EngineArg {
    Sequential,
    Pipeline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StalenessArg {
    Plain,
    VisitMark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Opponent {
    Sequential,
    Random,
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    /// Experiment spec as JSON; replaces the game, engine and seed flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = GameArg::Tictactoe)]
    pub game: GameArg,
    /// Synthetic game branching factor.
    #[arg(long, default_value_t = 4)]
    pub branching: u16,
    /// Synthetic game depth.
    #[arg(long, default_value_t = 8)]
    pub depth: u16,
    /// Work units burned per synthetic playout.
    #[arg(long, default_value_t = 0)]
    pub playout_cost: u64,
    /// Iterations per search.
    #[arg(long, default_value_t = 1000)]
    pub budget: u64,
    #[arg(long, default_value_t = 1.0)]
    pub cp: f64,
    #[arg(long, value_enum, default_value_t = EngineArg::Sequential)]
    pub engine: EngineArg,
    /// Playout lanes. `sweep` takes a comma-separated list.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub lanes: Vec<usize>,
    /// Tokens allowed in the pipeline at once. Defaults to lanes + 3.
    #[arg(long)]
    pub in_flight: Option<usize>,
    /// Capacity of each inter-stage buffer. Defaults to 2 * lanes.
    #[arg(long)]
    pub buffer_cap: Option<usize>,
    #[arg(long, value_enum, default_value_t = StalenessArg::Plain)]
    pub staleness: StalenessArg,
    /// Give each lane its own buffer instead of sharing one.
    #[arg(long)]
    pub round_robin: bool,
    /// Run seeds 0..N.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Explicit seeds; overrides `--seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seed_list: Option<Vec<u64>>,
    /// Directory for result files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// What to print on stdout.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Write a per-token event log for every pipeline run (needs `--out`).
    #[arg(long)]
    pub events: bool,
}

impl ExperimentArgs {
    pub fn seed_values(&self) -> Vec<u64> {
        match &self.seed_list {
            Some(list) => list.clone(),
            None => (0..self.seeds).collect(),
        }
    }

    pub fn game_spec(&self) -> GameSpec {
        match self.game {
            GameArg::Tictactoe => GameSpec::Tictactoe,
            GameArg::Synthetic => GameSpec::Synthetic {
                branching: self.branching,
                depth: self.depth,
                playout_cost: self.playout_cost,
                seed: None,
            },
        }
    }

    pub fn pipeline_config(&self, lanes: usize) -> PipelineConfig {
        let mut c = PipelineConfig::with_lanes(lanes);
        if let Some(n) = self.in_flight {
            c.in_flight_limit = n;
        }
        if let Some(n) = self.buffer_cap {
            c.buffer_capacity = n;
        }
        c.staleness = match self.staleness {
            StalenessArg::Plain => StalenessPolicy::Plain,
            StalenessArg::VisitMark => StalenessPolicy::VisitMark,
        };
        if self.round_robin {
            c.lane_assignment = LaneAssignment::RoundRobin;
        }
        c.record_events = self.events;
        c
    }

    pub fn engine_spec(&self, lanes: usize) -> EngineSpec {
        match self.engine {
            EngineArg::Sequential => EngineSpec::Sequential,
            EngineArg::Pipeline => EngineSpec::Pipeline(self.pipeline_config(lanes)),
        }
    }

    pub fn spec_with(&self, engine: EngineSpec) -> ExperimentSpec {
        let seeds = self.seed_values();
        ExperimentSpec {
            game: self.game_spec(),
            budget_m: self.budget,
            c_p: self.cp,
            engine,
            repetitions: seeds.len(),
            seeds,
        }
    }

    pub fn first_lanes(&self) -> usize {
        self.lanes.first().copied().unwrap_or(1)
    }
}

#[derive(Debug, Clone, Args)]
pub struct MatchArgs {
    #[command(flatten)]
    pub side_a: ExperimentArgs,
    /// Total games; must be even.
    #[arg(long, default_value_t = 100)]
    pub games: u64,
    /// Side B. A sequential opponent uses side A's budget and c_p.
    #[arg(long, value_enum, default_value_t = Opponent::Sequential)]
    pub opponent: Opponent,
}

#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    /// Stage schedule as JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Also write the Gantt chart as CSV to this file.
    #[arg(long)]
    pub gantt: Option<PathBuf>,
    /// Print JSON or the Gantt CSV instead of the summary lines.
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}
