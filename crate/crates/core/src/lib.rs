//! Pipeline-parallel Monte Carlo Tree Search.
//!
//! The four search operations (select, expand, playout, backup) run as
//! pipeline stages connected by bounded buffers, with the playout stage
//! optionally replicated into parallel lanes. Alongside the engine sit a
//! sequential reference search, a discrete-event simulator for abstract
//! pipelines, and the metrics used to compare the two engines.

pub mod bench;
pub mod game;
pub mod mcts;
pub mod pipeline;
pub mod rng;
pub mod sched;

pub use game::{Action, GameError, GameState, Player, SyntheticGame, SyntheticParams, TicTacToe};
pub use mcts::{run_sequential, MctsError, SearchOutcome, SearchResult, SearchTree, UctParams};
