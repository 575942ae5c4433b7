//! Toy game domains consumed by the search.
//!
//! Two deterministic two-player zero-sum games live here: tic-tac-toe, and a
//! synthetic uniform tree whose leaf values come from a hash of the action
//! path. The synthetic game can also make its playouts arbitrarily expensive,
//! which is how benchmarks make the playout stage the bottleneck.

use std::fmt;
use std::hint::black_box;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{mix64, unit_f64};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GameError {
    #[error("action {0} is not legal in this state")]
    IllegalAction(Action),
    #[error("state is not terminal")]
    NotTerminal,
}

/// One of the two seats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Player {
    First,
    Second,
}

impl Player {
    pub fn other(self) -> Player {
        match self {
            Player::First => Player::Second,
            Player::Second => Player::First,
        }
    }
}

/// Move identifier. For tic-tac-toe this is the cell index, for the synthetic
/// game the branch index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub u16);

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The contract every game offers to the search.
///
/// States are values: `apply` returns a new state and leaves `self` alone.
/// A state is terminal exactly when it has no legal actions.
pub trait GameState: Clone + Send + Sync + fmt::Debug {
    fn to_move(&self) -> Player;

    /// Legal actions in a fixed, deterministic order. Empty iff terminal.
    fn legal_actions(&self) -> Vec<Action>;

    fn apply(&self, action: Action) -> Result<Self, GameError>;

    fn is_terminal(&self) -> bool;

    /// Reward in `[0, 1]` for `perspective`. Rewards of the two players sum to 1.
    fn terminal_reward(&self, perspective: Player) -> Result<f64, GameError>;

    /// Busy-work units spent once per playout started from this state.
    fn playout_cost(&self) -> u64 {
        0
    }
}

/// Deterministic CPU work: `units` rounds of integer mixing.
///
/// Used instead of sleeping so that parallel lanes contend for cores the way
/// real playouts do.
pub fn burn(units: u64) -> u64 {
    let mut acc = 0x2545_f491_4f6c_dd1d_u64;
    for i in 0..units {
        for _ in 0..32 {
            acc = mix64(acc ^ i);
        }
        acc = black_box(acc);
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cell {
    Empty,
    X,
    O,
}

const LINES: [[usize; 3]; 8] = [
    [0, 1, 2],
    [3, 4, 5],
    [6, 7, 8],
    [0, 3, 6],
    [1, 4, 7],
    [2, 5, 8],
    [0, 4, 8],
    [2, 4, 6],
];

/// Tic-tac-toe. X is [`Player::First`] and always opens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TicTacToe {
    board: [Cell; 9],
    to_move: Player,
}

impl Default for TicTacToe {
    fn default() -> Self {
        Self::new()
    }
}

impl TicTacToe {
    pub fn new() -> Self {
        Self {
            board: [Cell::Empty; 9],
            to_move: Player::First,
        }
    }

    /// Parse a 9-character board, row-major, using `X`, `O` and `.`/`-`/`_`
    /// for empty cells. The side to move is inferred from the piece counts.
    pub fn from_board_str(s: &str) -> Option<Self> {
        let cells: Vec<Cell> = s
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '|' && *c != '/')
            .map(|c| match c {
                'X' | 'x' => Some(Cell::X),
                'O' | 'o' => Some(Cell::O),
                '.' | '-' | '_' => Some(Cell::Empty),
                _ => None,
            })
            .collect::<Option<_>>()?;
        let board: [Cell; 9] = cells.try_into().ok()?;
        Self::from_cells(board)
    }

    /// Build a position from cells. Returns `None` when the piece counts
    /// cannot arise from alternating play.
    pub fn from_cells(board: [Cell; 9]) -> Option<Self> {
        let xs = board.iter().filter(|c| **c == Cell::X).count();
        let os = board.iter().filter(|c| **c == Cell::O).count();
        let to_move = match xs.checked_sub(os)? {
            0 => Player::First,
            1 => Player::Second,
            _ => return None,
        };
        Some(Self { board, to_move })
    }

    pub fn cells(&self) -> &[Cell; 9] {
        &self.board
    }

    pub fn winner(&self) -> Option<Player> {
        LINES.iter().find_map(|&[a, b, c]| {
            let v = self.board[a];
            if v != Cell::Empty && v == self.board[b] && v == self.board[c] {
                Some(if v == Cell::X {
                    Player::First
                } else {
                    Player::Second
                })
            } else {
                None
            }
        })
    }

    fn is_full(&self) -> bool {
        self.board.iter().all(|c| *c != Cell::Empty)
    }
}

impl fmt::Display for TicTacToe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.board.iter().enumerate() {
            let ch = match c {
                Cell::Empty => '.',
                Cell::X => 'X',
                Cell::O => 'O',
            };
            write!(f, "{ch}")?;
            if i % 3 == 2 && i != 8 {
                write!(f, "/")?;
            }
        }
        Ok(())
    }
}

impl GameState for TicTacToe {
    fn to_move(&self) -> Player {
        self.to_move
    }

    fn legal_actions(&self) -> Vec<Action> {
        if self.is_terminal() {
            return Vec::new();
        }
        (0..9u16)
            .filter(|&i| self.board[i as usize] == Cell::Empty)
            .map(Action)
            .collect()
    }

    fn apply(&self, action: Action) -> Result<Self, GameError> {
        let idx = action.0 as usize;
        if idx >= 9 || self.board[idx] != Cell::Empty || self.is_terminal() {
            return Err(GameError::IllegalAction(action));
        }
        let mut next = *self;
        next.board[idx] = match self.to_move {
            Player::First => Cell::X,
            Player::Second => Cell::O,
        };
        next.to_move = self.to_move.other();
        Ok(next)
    }

    fn is_terminal(&self) -> bool {
        self.winner().is_some() || self.is_full()
    }

    fn terminal_reward(&self, perspective: Player) -> Result<f64, GameError> {
        match self.winner() {
            Some(p) if p == perspective => Ok(1.0),
            Some(_) => Ok(0.0),
            None if self.is_full() => Ok(0.5),
            None => Err(GameError::NotTerminal),
        }
    }
}

/// Shape of a synthetic game tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub branching: u16,
    pub depth: u16,
    /// Busy-work units per playout, see [`burn`].
    pub playout_cost: u64,
    pub seed: u64,
}

/// A uniform tree of branching factor `b` and depth `d`. The value of a leaf
/// for the first player is a hash of the action path mixed with the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SyntheticGame {
    depth: u16,
    path_hash: u64,
    params: SyntheticParams,
}

impl SyntheticGame {
    pub fn new(params: SyntheticParams) -> Self {
        Self {
            depth: 0,
            path_hash: 0,
            params,
        }
    }

    pub fn depth(&self) -> u16 {
        self.depth
    }

    pub fn path_hash(&self) -> u64 {
        self.path_hash
    }

    pub fn params(&self) -> &SyntheticParams {
        &self.params
    }

    /// Value for [`Player::First`] at a leaf.
    fn leaf_value(&self) -> f64 {
        unit_f64(mix64(self.path_hash ^ self.params.seed))
    }
}

/// Fold one action into a running path hash.
pub fn extend_path_hash(path_hash: u64, action: Action) -> u64 {
    mix64(path_hash.rotate_left(17) ^ (u64::from(action.0) + 1))
}

impl GameState for SyntheticGame {
    fn to_move(&self) -> Player {
        if self.depth.is_multiple_of(2) {
            Player::First
        } else {
            Player::Second
        }
    }

    fn legal_actions(&self) -> Vec<Action> {
        if self.is_terminal() {
            return Vec::new();
        }
        (0..self.params.branching).map(Action).collect()
    }

    fn apply(&self, action: Action) -> Result<Self, GameError> {
        if self.is_terminal() || action.0 >= self.params.branching {
            return Err(GameError::IllegalAction(action));
        }
        Ok(Self {
            depth: self.depth + 1,
            path_hash: extend_path_hash(self.path_hash, action),
            params: self.params,
        })
    }

    fn is_terminal(&self) -> bool {
        self.depth >= self.params.depth || self.params.branching == 0
    }

    fn terminal_reward(&self, perspective: Player) -> Result<f64, GameError> {
        if !self.is_terminal() {
            return Err(GameError::NotTerminal);
        }
        let v = self.leaf_value();
        Ok(match perspective {
            Player::First => v,
            Player::Second => 1.0 - v,
        })
    }

    fn playout_cost(&self) -> u64 {
        self.params.playout_cost
    }
}
