//! Experiment descriptions and the three metrics: playout speedup, strength
//! (head-to-head win rate) and search overhead.
//!
//! Search overhead is reported through two proxies. The duplicate fraction
//! counts iterations whose selected path equalled that of another iteration
//! still in flight. The root policy distance is the L1 distance between the
//! normalized root visit counts of a pipeline run and a sequential run with
//! the same seed and budget.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{Action, GameState, Player, SyntheticGame, SyntheticParams, TicTacToe};
use crate::mcts::{run_sequential, MctsError, SearchResult, UctParams};
use crate::pipeline::{
    run_pipeline, PipelineConfig, PipelineError, StageEvent, StageStats, TokenAudit,
};
use crate::rng::{derive_seed, iteration_rng};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BenchError {
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error("budgets differ: {0} vs {1}")]
    BudgetMismatch(u64, u64),
    #[error("wall times must be positive")]
    NonPositiveTime,
    #[error(transparent)]
    Search(#[from] MctsError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl BenchError {
    /// Errors that mean the engine misbehaved rather than being misused.
    pub fn is_invariant_violation(&self) -> bool {
        match self {
            BenchError::Invariant(_) => true,
            BenchError::Search(MctsError::Invariant { .. }) => true,
            BenchError::Pipeline(e) => matches!(
                e,
                PipelineError::PhaseViolation { .. }
                    | PipelineError::Audit(_)
                    | PipelineError::Stuck { .. }
                    | PipelineError::WorkerPanicked(_)
                    | PipelineError::Search(MctsError::Invariant { .. })
            ),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameSpec {
    Tictactoe,
    Synthetic {
        branching: u16,
        depth: u16,
        #[serde(default)]
        playout_cost: u64,
        /// Fixed leaf-value seed. When absent each run uses its own seed.
        #[serde(default)]
        seed: Option<u64>,
    },
}

impl GameSpec {
    pub fn name(&self) -> &'static str {
        match self {
            GameSpec::Tictactoe => "tictactoe",
            GameSpec::Synthetic { .. } => "synthetic",
        }
    }

    pub fn synthetic(&self, run_seed: u64) -> Option<SyntheticGame> {
        match *self {
            GameSpec::Synthetic {
                branching,
                depth,
                playout_cost,
                seed,
            } => Some(SyntheticGame::new(SyntheticParams {
                branching,
                depth,
                playout_cost,
                seed: seed.unwrap_or(run_seed),
            })),
            GameSpec::Tictactoe => None,
        }
    }

    fn validate(&self) -> Result<(), BenchError> {
        if let GameSpec::Synthetic {
            branching, depth, ..
        } = *self
        {
            if branching == 0 || depth == 0 {
                return Err(BenchError::InvalidSpec(
                    "synthetic game needs branching and depth >= 1".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineSpec {
    Sequential,
    Pipeline(PipelineConfig),
}

impl EngineSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EngineSpec::Sequential => "sequential",
            EngineSpec::Pipeline(_) => "pipeline",
        }
    }

    /// Playout lanes and in-flight limit; `(1, 1)` for the sequential engine.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            EngineSpec::Sequential => (1, 1),
            EngineSpec::Pipeline(c) => (c.playout_lanes, c.in_flight_limit),
        }
    }
}

/// One engine run and what the pipeline reported about it.
#[derive(Debug, Clone)]
pub struct EngineRun {
    pub result: SearchResult,
    pub audit: Option<TokenAudit>,
    pub stats: Option<StageStats>,
    pub events: Vec<StageEvent>,
}

/// Run one search and check the tree before returning.
pub fn run_engine<S: GameState>(
    root: S,
    params: &UctParams,
    engine: &EngineSpec,
) -> Result<EngineRun, BenchError> {
    let (run, root_n, invariants) = match engine {
        EngineSpec::Sequential => {
            let out = run_sequential(root, params)?;
            let n = out.tree.visits(out.tree.root());
            let run = EngineRun {
                result: out.result,
                audit: None,
                stats: None,
                events: Vec::new(),
            };
            (run, n, out.tree.check_invariants())
        }
        EngineSpec::Pipeline(config) => {
            let out = run_pipeline(root, params, config)?;
            let n = out.tree.visits(out.tree.root());
            let inv = out.tree.check_invariants();
            let run = EngineRun {
                result: out.result,
                audit: Some(out.audit),
                stats: Some(out.stats),
                events: out.events,
            };
            (run, n, inv)
        }
    };
    invariants.map_err(|e| BenchError::Invariant(e.to_string()))?;
    if root_n != params.budget_m {
        return Err(BenchError::Invariant(format!(
            "root visits {root_n} != budget {}",
            params.budget_m
        )));
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub game: GameSpec,
    pub budget_m: u64,
    #[serde(default = "default_cp")]
    pub c_p: f64,
    pub engine: EngineSpec,
    pub repetitions: usize,
    pub seeds: Vec<u64>,
}

fn default_cp() -> f64 {
    crate::mcts::DEFAULT_CP
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.repetitions == 0 {
            return Err(BenchError::InvalidSpec("repetitions must be >= 1".into()));
        }
        if self.seeds.len() != self.repetitions {
            return Err(BenchError::InvalidSpec(format!(
                "{} seeds for {} repetitions",
                self.seeds.len(),
                self.repetitions
            )));
        }
        self.game.validate()?;
        UctParams::new(self.c_p, self.budget_m, 0).validate()?;
        if let EngineSpec::Pipeline(c) = &self.engine {
            c.validate()?;
        }
        Ok(())
    }

    pub fn params(&self, seed: u64) -> UctParams {
        UctParams::new(self.c_p, self.budget_m, seed)
    }

    /// Run the experiment once for `seed` from the game's start position.
    pub fn run_seed(&self, seed: u64) -> Result<RunRecord, BenchError> {
        let params = self.params(seed);
        let run = match self.game.synthetic(seed) {
            Some(g) => run_engine(g, &params, &self.engine)?,
            None => run_engine(TicTacToe::new(), &params, &self.engine)?,
        };
        let (k, in_flight) = self.engine.shape();
        Ok(RunRecord {
            game: self.game.name().into(),
            engine: self.engine.name().into(),
            k,
            in_flight,
            m: self.budget_m,
            seed,
            wall_ns: run.result.elapsed_ns,
            best_action: run.result.best_action,
            root_n: run.result.root_visits,
            duplicate_fraction: run.audit.as_ref().map(TokenAudit::duplicate_fraction),
            result: run.result,
            stats: run.stats,
            audit: run.audit,
            events: run.events,
        })
    }

    pub fn run_all(&self) -> Result<Vec<RunRecord>, BenchError> {
        self.validate()?;
        self.seeds.iter().map(|&s| self.run_seed(s)).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub game: String,
    pub engine: String,
    pub k: usize,
    pub in_flight: usize,
    pub m: u64,
    pub seed: u64,
    pub wall_ns: u64,
    pub best_action: Action,
    pub root_n: u64,
    pub duplicate_fraction: Option<f64>,
    pub result: SearchResult,
    pub stats: Option<StageStats>,
    pub audit: Option<TokenAudit>,
    #[serde(skip)]
    pub events: Vec<StageEvent>,
}

/// `t_seq / t_par` for two runs of the same budget.
pub fn playout_speedup(
    t_seq_ns: u64,
    m_seq: u64,
    t_par_ns: u64,
    m_par: u64,
) -> Result<f64, BenchError> {
    if m_seq != m_par {
        return Err(BenchError::BudgetMismatch(m_seq, m_par));
    }
    if t_seq_ns == 0 || t_par_ns == 0 {
        return Err(BenchError::NonPositiveTime);
    }
    Ok(t_seq_ns as f64 / t_par_ns as f64)
}

/// Median of a non-empty sample; the lower middle for even lengths.
pub fn median(values: &[u64]) -> Option<u64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    Some(v[(v.len() - 1) / 2])
}

/// L1 distance between two root visit distributions, each normalized to 1.
pub fn policy_distance(a: &SearchResult, b: &SearchResult) -> f64 {
    let mut dist: BTreeMap<Action, (f64, f64)> = BTreeMap::new();
    for (act, p) in a.root_policy() {
        dist.entry(act).or_default().0 = p;
    }
    for (act, p) in b.root_policy() {
        dist.entry(act).or_default().1 = p;
    }
    dist.values().map(|(x, y)| (x - y).abs()).sum()
}

/// A match participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlayerSpec {
    /// Uniformly random legal moves.
    Random,
    Mcts {
        budget_m: u64,
        c_p: f64,
        engine: EngineSpec,
    },
}

impl PlayerSpec {
    pub fn sequential(budget_m: u64) -> Self {
        PlayerSpec::Mcts {
            budget_m,
            c_p: crate::mcts::DEFAULT_CP,
            engine: EngineSpec::Sequential,
        }
    }

    pub fn pipeline(budget_m: u64, config: PipelineConfig) -> Self {
        PlayerSpec::Mcts {
            budget_m,
            c_p: crate::mcts::DEFAULT_CP,
            engine: EngineSpec::Pipeline(config),
        }
    }

    fn choose<S: GameState>(&self, state: &S, seed: u64) -> Result<Action, BenchError> {
        match self {
            PlayerSpec::Random => {
                let actions = state.legal_actions();
                let mut rng = iteration_rng(seed, 0);
                Ok(actions[rng.random_range(0..actions.len())])
            }
            PlayerSpec::Mcts {
                budget_m,
                c_p,
                engine,
            } => {
                let params = UctParams::new(*c_p, *budget_m, seed);
                Ok(run_engine(state.clone(), &params, engine)?
                    .result
                    .best_action)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchReport {
    pub games: u64,
    /// Results from side A's point of view.
    pub wins: u64,
    pub draws: u64,
    pub losses: u64,
    pub seat_balanced: bool,
    /// `(wins + draws / 2) / games`.
    pub win_rate: f64,
    /// Normal-approximation 95% interval, clamped to `[0, 1]`.
    pub ci_low: f64,
    pub ci_high: f64,
}

impl MatchReport {
    pub fn from_counts(wins: u64, draws: u64, losses: u64, seat_balanced: bool) -> Self {
        let games = wins + draws + losses;
        let (win_rate, half) = if games == 0 {
            (0.0, 0.0)
        } else {
            let p = (wins as f64 + draws as f64 / 2.0) / games as f64;
            (p, 1.96 * (p * (1.0 - p) / games as f64).sqrt())
        };
        Self {
            games,
            wins,
            draws,
            losses,
            seat_balanced,
            win_rate,
            ci_low: (win_rate - half).max(0.0),
            ci_high: (win_rate + half).min(1.0),
        }
    }
}

/// Play `games` full games between `a` and `b` from `root`.
///
/// Games come in pairs sharing one seed: A moves first in the even game of
/// each pair and B in the odd one. Swapping `a` and `b` therefore replays the
/// same games with the seats exchanged.
pub fn strength_match<S: GameState>(
    root: &S,
    a: &PlayerSpec,
    b: &PlayerSpec,
    games: u64,
    seed: u64,
) -> Result<MatchReport, BenchError> {
    if !games.is_multiple_of(2) {
        return Err(BenchError::InvalidSpec(format!(
            "{games} games cannot be seat-balanced"
        )));
    }
    let (mut wins, mut draws, mut losses) = (0, 0, 0);
    for g in 0..games {
        let game_seed = derive_seed(seed, g / 2);
        let a_first = g % 2 == 0;
        let a_seat = if a_first {
            Player::First
        } else {
            Player::Second
        };
        let reward = play_game(root, a, b, a_first, game_seed)?
            .terminal_reward(a_seat)
            .map_err(MctsError::from)?;
        if reward > 0.5 {
            wins += 1;
        } else if reward < 0.5 {
            losses += 1;
        } else {
            draws += 1;
        }
    }
    Ok(MatchReport::from_counts(wins, draws, losses, true))
}

fn play_game<S: GameState>(
    root: &S,
    a: &PlayerSpec,
    b: &PlayerSpec,
    a_first: bool,
    game_seed: u64,
) -> Result<S, BenchError> {
    let mut state = root.clone();
    let mut ply = 0;
    while !state.is_terminal() {
        let a_to_move = (state.to_move() == Player::First) == a_first;
        let player = if a_to_move { a } else { b };
        let action = player.choose(&state, derive_seed(game_seed, ply))?;
        state = state.apply(action).map_err(MctsError::from)?;
        ply += 1;
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadReport {
    pub seeds: usize,
    pub duplicate_fraction_mean: f64,
    pub duplicate_fraction_max: f64,
    pub root_policy_distance_mean: f64,
    pub root_policy_distance_max: f64,
    pub max_staleness: u64,
    /// Mean idle time per stage, in nanoseconds.
    pub idle_ns: StageIdle,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageIdle {
    pub select: f64,
    pub expand: f64,
    pub playout: f64,
    pub backup: f64,
}

/// Compare a pipeline configuration with the sequential engine on the same
/// position, budget and seeds.
pub fn search_overhead<S: GameState>(
    root: &S,
    c_p: f64,
    budget_m: u64,
    config: &PipelineConfig,
    seeds: &[u64],
) -> Result<OverheadReport, BenchError> {
    if seeds.is_empty() {
        return Err(BenchError::InvalidSpec("no seeds".into()));
    }
    let engine = EngineSpec::Pipeline(config.clone());
    let mut dup = Vec::with_capacity(seeds.len());
    let mut dist = Vec::with_capacity(seeds.len());
    let mut idle = StageIdle::default();
    let mut max_staleness = 0;
    for &seed in seeds {
        let params = UctParams::new(c_p, budget_m, seed);
        let seq = run_engine(root.clone(), &params, &EngineSpec::Sequential)?;
        let par = run_engine(root.clone(), &params, &engine)?;
        let audit = par.audit.expect("pipeline run has an audit");
        let stats = par.stats.expect("pipeline run has stats");
        dup.push(audit.duplicate_fraction());
        dist.push(policy_distance(&par.result, &seq.result));
        max_staleness = max_staleness.max(audit.max_staleness);
        idle.select += stats.select.idle_ns as f64;
        idle.expand += stats.expand.idle_ns as f64;
        idle.playout += stats.playout.idle_ns as f64;
        idle.backup += stats.backup.idle_ns as f64;
    }
    let n = seeds.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    Ok(OverheadReport {
        seeds: seeds.len(),
        duplicate_fraction_mean: mean(&dup),
        duplicate_fraction_max: max(&dup),
        root_policy_distance_mean: mean(&dist),
        root_policy_distance_max: max(&dist),
        max_staleness,
        idle_ns: StageIdle {
            select: idle.select / n,
            expand: idle.expand / n,
            playout: idle.playout / n,
            backup: idle.backup / n,
        },
    })
}
