//! Browser bindings for the schedule simulator and the tic-tac-toe search.
//!
//! Each export takes and returns JSON strings. The `*_json` functions hold
//! the logic and are callable from native code and tests.

use mctspipe::mcts::{run_iteration, SearchResult, SearchTree};
use mctspipe::sched::{self, SimConfig};
use mctspipe::{GameState, Player, TicTacToe, UctParams};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Simulate a stage schedule and return the result with its Gantt chart.
pub fn simulate_json(config: &str) -> Result<String, String> {
    let config = SimConfig::from_json(config).map_err(|e| e.to_string())?;
    let result = sched::simulate(&config).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&result).expect("result serializes"))
}

#[derive(Serialize)]
struct FillPoint {
    items: u64,
    makespan: u64,
    per_item: f64,
}

/// Makespan and ticks per item for 1..=`max_items` items, which shows the
/// fill cost fading into the steady period.
pub fn fill_curve_json(config: &str, max_items: u32) -> Result<String, String> {
    let mut config = SimConfig::from_json(config).map_err(|e| e.to_string())?;
    if max_items == 0 || max_items > 512 {
        return Err("max_items must be in 1..=512".into());
    }
    let mut points = Vec::with_capacity(max_items as usize);
    for m in 1..=u64::from(max_items) {
        config.num_items = m;
        let r = sched::simulate(&config).map_err(|e| e.to_string())?;
        points.push(FillPoint {
            items: m,
            makespan: r.makespan,
            per_item: r.makespan as f64 / m as f64,
        });
    }
    let period = sched::steady_period(&config);
    Ok(serde_json::json!({ "steady_period": period, "points": points }).to_string())
}

#[derive(Serialize)]
struct SearchView {
    board: String,
    to_move: &'static str,
    result: SearchResult,
}

/// Search a tic-tac-toe position given as nine cells (`X`, `O`, `.`).
pub fn search_json(board: &str, budget: u32, c_p: f64, seed: u32) -> Result<String, String> {
    let state =
        TicTacToe::from_board_str(board).ok_or("board must have nine cells of X, O or .")?;
    if state.is_terminal() {
        return Err("the game is already over".into());
    }
    if budget == 0 || budget > 200_000 {
        return Err("budget must be in 1..=200000".into());
    }
    let params = UctParams::new(c_p, u64::from(budget), u64::from(seed));
    params.validate().map_err(|e| e.to_string())?;
    // no wall clock in the browser, so drive the iterations directly
    let tree = SearchTree::new(state, budget as usize + 1);
    for i in 0..params.budget_m {
        run_iteration(&tree, &params, i).map_err(|e| e.to_string())?;
    }
    let result = SearchResult::from_tree(&tree, 0).map_err(|e| e.to_string())?;
    let view = SearchView {
        board: state.to_string(),
        to_move: match state.to_move() {
            Player::First => "X",
            Player::Second => "O",
        },
        result,
    };
    Ok(serde_json::to_string(&view).expect("view serializes"))
}

#[wasm_bindgen]
pub fn simulate_schedule(config: &str) -> Result<String, JsError> {
    simulate_json(config).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn fill_curve(config: &str, max_items: u32) -> Result<String, JsError> {
    fill_curve_json(config, max_items).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn search_tictactoe(board: &str, budget: u32, c_p: f64, seed: u32) -> Result<String, JsError> {
    search_json(board, budget, c_p, seed).map_err(|e| JsError::new(&e))
}
