//! Sequential Monte Carlo Tree Search.
//!
//! The tree is an append-only arena sized up front (one node per iteration
//! plus the root). Node statistics are stored in atomics so that the pipeline
//! engine can share one tree between stage workers: a single thread performs
//! structural changes, another writes statistics, and readers may observe
//! slightly stale (but never torn) values. In the sequential driver every
//! access comes from one thread and the atomics behave like plain fields.

use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{burn, Action, GameError, GameState, Player};
use crate::rng::{iteration_rng, SearchRng};

/// Default exploration constant for rewards in `[0, 1]`.
pub const DEFAULT_CP: f64 = 1.0;

const NIL: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MctsError {
    #[error("invalid search parameters: {0}")]
    InvalidParams(&'static str),
    #[error("search tree is full (capacity {capacity})")]
    TreeFull { capacity: usize },
    #[error("node {0} has no untried actions to expand")]
    NothingToExpand(NodeId),
    #[error("trajectory {0} has no reward assigned")]
    MissingDelta(u64),
    #[error("root has no children")]
    NoChildren,
    #[error("tree invariant violated at node {node}: {detail}")]
    Invariant { node: NodeId, detail: String },
    #[error(transparent)]
    Game(#[from] GameError),
}

/// Index of a node in the arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UctParams {
    pub c_p: f64,
    pub budget_m: u64,
    pub seed: u64,
}

impl Default for UctParams {
    fn default() -> Self {
        Self {
            c_p: DEFAULT_CP,
            budget_m: 1000,
            seed: 0,
        }
    }
}

impl UctParams {
    pub fn new(c_p: f64, budget_m: u64, seed: u64) -> Self {
        Self {
            c_p,
            budget_m,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), MctsError> {
        if !(self.c_p >= 0.0 && self.c_p.is_finite()) {
            return Err(MctsError::InvalidParams("c_p must be finite and >= 0"));
        }
        if self.budget_m == 0 {
            return Err(MctsError::InvalidParams("budget_m must be >= 1"));
        }
        if self.budget_m >= u64::from(NIL) {
            return Err(MctsError::InvalidParams(
                "budget_m exceeds arena index range",
            ));
        }
        Ok(())
    }
}

/// Upper confidence bound of child `j`: mean reward plus exploration bonus.
///
/// Unvisited children score `f64::INFINITY` so they are always tried first.
pub fn uct_score(w_j: f64, n_j: u64, n_parent: u64, c_p: f64) -> f64 {
    if n_j == 0 {
        return f64::INFINITY;
    }
    let n_j = n_j as f64;
    // Concurrent readers can see a parent count that lags its child.
    let ln_n = (n_parent.max(1) as f64).ln();
    w_j / n_j + c_p * (ln_n / n_j).sqrt()
}

struct NodeInit<S> {
    parent: Option<NodeId>,
    action: Option<Action>,
    /// Player who moved into this node. For the root, the opponent of the
    /// side to move.
    mover: Player,
    terminal: bool,
    state: S,
}

/// One arena slot.
pub struct SearchNode<S> {
    init: OnceLock<NodeInit<S>>,
    visits: AtomicU64,
    reward_bits: AtomicU64,
    first_child: AtomicU32,
    last_child: AtomicU32,
    next_sibling: AtomicU32,
    child_count: AtomicU32,
    untried_len: AtomicU32,
    untried: Mutex<Vec<Action>>,
}

impl<S> SearchNode<S> {
    fn vacant() -> Self {
        Self {
            init: OnceLock::new(),
            visits: AtomicU64::new(0),
            reward_bits: AtomicU64::new(0f64.to_bits()),
            first_child: AtomicU32::new(NIL),
            last_child: AtomicU32::new(NIL),
            next_sibling: AtomicU32::new(NIL),
            child_count: AtomicU32::new(0),
            untried_len: AtomicU32::new(0),
            untried: Mutex::new(Vec::new()),
        }
    }

    fn data(&self) -> &NodeInit<S> {
        self.init
            .get()
            .expect("node slot read before initialization")
    }
}

/// Plain-data copy of a node, used for node-by-node comparisons.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeSnapshot {
    pub parent: Option<NodeId>,
    pub action: Option<Action>,
    pub visits: u64,
    pub reward: f64,
    pub children: Vec<NodeId>,
    pub untried: Vec<Action>,
}

/// Arena-allocated search tree.
pub struct SearchTree<S> {
    nodes: Box<[SearchNode<S>]>,
    len: AtomicUsize,
}

impl<S: GameState> SearchTree<S> {
    /// New tree holding only the root. `capacity` counts the root.
    pub fn new(root_state: S, capacity: usize) -> Self {
        let capacity = capacity.max(1);
        let nodes: Box<[SearchNode<S>]> = (0..capacity).map(|_| SearchNode::vacant()).collect();
        let tree = Self {
            nodes,
            len: AtomicUsize::new(1),
        };
        let mover = root_state.to_move().other();
        tree.init_slot(0, None, None, mover, root_state);
        tree
    }

    fn init_slot(
        &self,
        idx: usize,
        parent: Option<NodeId>,
        action: Option<Action>,
        mover: Player,
        state: S,
    ) {
        let slot = &self.nodes[idx];
        let untried = state.legal_actions();
        slot.untried_len
            .store(untried.len() as u32, Ordering::Relaxed);
        *slot.untried.lock().unwrap() = untried;
        let terminal = state.is_terminal();
        let fresh = slot
            .init
            .set(NodeInit {
                parent,
                action,
                mover,
                terminal,
                state,
            })
            .is_ok();
        assert!(fresh, "arena slot {idx} initialized twice");
    }

    fn node(&self, id: NodeId) -> &SearchNode<S> {
        &self.nodes[id.index()]
    }

    pub fn root(&self) -> NodeId {
        NodeId::ROOT
    }

    /// Number of nodes created so far.
    pub fn len(&self) -> usize {
        self.len.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn capacity(&self) -> usize {
        self.nodes.len()
    }

    pub fn state(&self, id: NodeId) -> &S {
        &self.node(id).data().state
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.node(id).data().parent
    }

    pub fn action(&self, id: NodeId) -> Option<Action> {
        self.node(id).data().action
    }

    pub fn mover(&self, id: NodeId) -> Player {
        self.node(id).data().mover
    }

    pub fn is_terminal(&self, id: NodeId) -> bool {
        self.node(id).data().terminal
    }

    pub fn visits(&self, id: NodeId) -> u64 {
        self.node(id).visits.load(Ordering::Acquire)
    }

    pub fn reward(&self, id: NodeId) -> f64 {
        f64::from_bits(self.node(id).reward_bits.load(Ordering::Acquire))
    }

    pub fn untried_len(&self, id: NodeId) -> usize {
        self.node(id).untried_len.load(Ordering::Acquire) as usize
    }

    pub fn child_count(&self, id: NodeId) -> usize {
        self.node(id).child_count.load(Ordering::Acquire) as usize
    }

    /// Children in creation order.
    pub fn children(&self, id: NodeId) -> Children<'_, S> {
        Children {
            tree: self,
            next: self.node(id).first_child.load(Ordering::Acquire),
        }
    }

    /// Add `dn` visits and `dw` reward to a node.
    pub(crate) fn add_stats(&self, id: NodeId, dn: u64, dw: f64) {
        let node = self.node(id);
        if dn > 0 {
            node.visits.fetch_add(dn, Ordering::AcqRel);
        }
        if dw != 0.0 {
            node.reward_bits
                .fetch_update(Ordering::AcqRel, Ordering::Acquire, |bits| {
                    Some((f64::from_bits(bits) + dw).to_bits())
                })
                .expect("update closure never declines");
        }
    }

    /// Remove a uniformly random untried action of `id` and add the
    /// corresponding child. Only one thread may call this at a time.
    pub(crate) fn expand_random(
        &self,
        id: NodeId,
        rng: &mut SearchRng,
    ) -> Result<NodeId, MctsError> {
        let node = self.node(id);
        let action = {
            let mut untried = node.untried.lock().unwrap();
            if untried.is_empty() {
                return Err(MctsError::NothingToExpand(id));
            }
            let pick = rng.random_range(0..untried.len());
            untried.remove(pick)
        };
        let idx = self.len.load(Ordering::Acquire);
        if idx >= self.capacity() {
            // put it back so the tree stays consistent
            node.untried.lock().unwrap().push(action);
            return Err(MctsError::TreeFull {
                capacity: self.capacity(),
            });
        }
        let parent_state = self.state(id);
        let child_state = parent_state.apply(action)?;
        self.init_slot(
            idx,
            Some(id),
            Some(action),
            parent_state.to_move(),
            child_state,
        );

        // Publish: link the child, then bump counts readers use as gates.
        let child = idx as u32;
        match node.last_child.load(Ordering::Relaxed) {
            NIL => node.first_child.store(child, Ordering::Release),
            last => self.nodes[last as usize]
                .next_sibling
                .store(child, Ordering::Release),
        }
        node.last_child.store(child, Ordering::Relaxed);
        node.child_count.fetch_add(1, Ordering::AcqRel);
        self.len.store(idx + 1, Ordering::Release);
        node.untried_len.fetch_sub(1, Ordering::AcqRel);
        Ok(NodeId(child))
    }

    /// Per-child `(action, n, w)` of the root, in creation order.
    pub fn root_child_stats(&self) -> Vec<ChildStats> {
        self.children(self.root())
            .map(|c| ChildStats {
                action: self.action(c).expect("child has an action"),
                n: self.visits(c),
                w: self.reward(c),
            })
            .collect()
    }

    pub fn snapshot(&self) -> Vec<NodeSnapshot> {
        (0..self.len())
            .map(|i| {
                let id = NodeId(i as u32);
                NodeSnapshot {
                    parent: self.parent(id),
                    action: self.action(id),
                    visits: self.visits(id),
                    reward: self.reward(id),
                    children: self.children(id).collect(),
                    untried: self.node(id).untried.lock().unwrap().clone(),
                }
            })
            .collect()
    }

    /// Check the structural and statistical invariants of a quiescent tree.
    ///
    /// * `0 <= w <= n` and `n >= #children` everywhere;
    /// * a visited non-root, non-terminal node has `n = 1 + sum(child.n)`;
    /// * the root has `n = sum(child.n)` unless it is terminal;
    /// * parent/child links agree.
    pub fn check_invariants(&self) -> Result<(), MctsError> {
        let fail = |node: NodeId, detail: String| Err(MctsError::Invariant { node, detail });
        for i in 0..self.len() {
            let id = NodeId(i as u32);
            let n = self.visits(id);
            let w = self.reward(id);
            let children: Vec<NodeId> = self.children(id).collect();
            if children.len() != self.child_count(id) {
                return fail(id, "child list length disagrees with child count".into());
            }
            if !(0.0..=n as f64).contains(&w) {
                return fail(id, format!("reward {w} outside [0, {n}]"));
            }
            if (children.len() as u64) > n {
                return fail(
                    id,
                    format!("{} children but only {n} visits", children.len()),
                );
            }
            let mut child_sum = 0;
            for &c in &children {
                if c.0 as usize >= self.len() || self.parent(c) != Some(id) {
                    return fail(id, format!("child {c} does not link back"));
                }
                child_sum += self.visits(c);
            }
            if self.is_terminal(id) || n == 0 {
                continue;
            }
            let expected = if id == self.root() {
                child_sum
            } else {
                1 + child_sum
            };
            if n != expected {
                return fail(id, format!("visits {n} but children imply {expected}"));
            }
        }
        Ok(())
    }
}

pub struct Children<'a, S> {
    tree: &'a SearchTree<S>,
    next: u32,
}

impl<S> Iterator for Children<'_, S> {
    type Item = NodeId;

    fn next(&mut self) -> Option<NodeId> {
        if self.next == NIL {
            return None;
        }
        let id = self.next;
        self.next = self.tree.nodes[id as usize]
            .next_sibling
            .load(Ordering::Acquire);
        Some(NodeId(id))
    }
}

/// The root-to-leaf path chosen in one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub iteration: u64,
    pub path: Vec<NodeId>,
    /// Reward for the player who moved into the leaf. Set by the playout.
    pub delta: Option<f64>,
    /// Leading path entries whose visit was already counted at selection.
    pub marked: usize,
}

impl Trajectory {
    pub fn leaf(&self) -> NodeId {
        *self.path.last().expect("trajectory path is never empty")
    }
}

/// Best child of `id` by UCT. Ties go to the earliest child.
pub fn best_uct_child<S: GameState>(tree: &SearchTree<S>, id: NodeId, c_p: f64) -> Option<NodeId> {
    let n_parent = tree.visits(id);
    let mut best: Option<(NodeId, f64)> = None;
    for c in tree.children(id) {
        let score = uct_score(tree.reward(c), tree.visits(c), n_parent, c_p);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((c, score));
        }
    }
    best.map(|(c, _)| c)
}

/// Continue descending from the end of `path` until a node that is terminal
/// or still has untried actions.
pub fn descend<S: GameState>(tree: &SearchTree<S>, path: &mut Vec<NodeId>, c_p: f64) {
    loop {
        let at = *path.last().expect("path starts at the root");
        if tree.is_terminal(at) || tree.untried_len(at) > 0 {
            return;
        }
        match best_uct_child(tree, at, c_p) {
            Some(c) => path.push(c),
            None => return,
        }
    }
}

/// Select step: walk from the root by UCT.
pub fn select<S: GameState>(tree: &SearchTree<S>, c_p: f64, iteration: u64) -> Trajectory {
    let mut path = vec![tree.root()];
    descend(tree, &mut path, c_p);
    Trajectory {
        iteration,
        path,
        delta: None,
        marked: 0,
    }
}

/// Expand step: add one random untried child of the leaf and append it to
/// the trajectory. Returns `None` when the leaf is terminal.
pub fn expand<S: GameState>(
    tree: &SearchTree<S>,
    traj: &mut Trajectory,
    rng: &mut SearchRng,
) -> Result<Option<NodeId>, MctsError> {
    let leaf = traj.leaf();
    if tree.is_terminal(leaf) {
        return Ok(None);
    }
    let child = tree.expand_random(leaf, rng)?;
    traj.path.push(child);
    Ok(Some(child))
}

/// Playout step: uniformly random moves until the game ends.
pub fn playout<S: GameState>(state: &S, perspective: Player, rng: &mut SearchRng) -> f64 {
    if state.is_terminal() {
        return state
            .terminal_reward(perspective)
            .expect("terminal state has a reward");
    }
    burn(state.playout_cost());
    let mut current = state.clone();
    loop {
        let actions = current.legal_actions();
        if actions.is_empty() {
            return current
                .terminal_reward(perspective)
                .expect("state without actions is terminal");
        }
        let a = actions[rng.random_range(0..actions.len())];
        current = current.apply(a).expect("legal action applies");
    }
}

/// Backup step: add one visit and the reward, seen from each node's mover,
/// to every node of the trajectory. Visits already added by a selection-time
/// mark are not counted twice.
pub fn backup<S: GameState>(tree: &SearchTree<S>, traj: &Trajectory) -> Result<(), MctsError> {
    let delta = traj.delta.ok_or(MctsError::MissingDelta(traj.iteration))?;
    let rewarded = tree.mover(traj.leaf());
    for (i, &id) in traj.path.iter().enumerate() {
        let dw = if tree.mover(id) == rewarded {
            delta
        } else {
            1.0 - delta
        };
        let dn = u64::from(i >= traj.marked);
        tree.add_stats(id, dn, dw);
    }
    Ok(())
}

/// Add a provisional visit to every node on the path.
pub fn mark_visits<S: GameState>(tree: &SearchTree<S>, traj: &mut Trajectory) {
    for &id in &traj.path {
        tree.add_stats(id, 1, 0.0);
    }
    traj.marked = traj.path.len();
}

/// Reward to back up when the selected leaf is already terminal.
pub fn terminal_delta<S: GameState>(tree: &SearchTree<S>, leaf: NodeId) -> Result<f64, MctsError> {
    Ok(tree.state(leaf).terminal_reward(tree.mover(leaf))?)
}

/// Root child with the most visits; ties go to the higher mean reward, then
/// the earlier child.
pub fn best_action<S: GameState>(tree: &SearchTree<S>) -> Result<Action, MctsError> {
    let mut best: Option<(NodeId, u64, f64)> = None;
    for c in tree.children(tree.root()) {
        let n = tree.visits(c);
        let mean = if n == 0 {
            0.0
        } else {
            tree.reward(c) / n as f64
        };
        let better = match best {
            None => true,
            Some((_, bn, bmean)) => n > bn || (n == bn && mean > bmean),
        };
        if better {
            best = Some((c, n, mean));
        }
    }
    let (c, _, _) = best.ok_or(MctsError::NoChildren)?;
    Ok(tree.action(c).expect("child has an action"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChildStats {
    pub action: Action,
    pub n: u64,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_action: Action,
    pub root_children: Vec<ChildStats>,
    pub root_visits: u64,
    pub tree_size: usize,
    pub elapsed_ns: u64,
}

impl SearchResult {
    pub fn from_tree<S: GameState>(
        tree: &SearchTree<S>,
        elapsed_ns: u64,
    ) -> Result<Self, MctsError> {
        Ok(Self {
            best_action: best_action(tree)?,
            root_children: tree.root_child_stats(),
            root_visits: tree.visits(tree.root()),
            tree_size: tree.len(),
            elapsed_ns,
        })
    }

    /// Field-wise equality ignoring the wall-clock time.
    pub fn same_search(&self, other: &SearchResult) -> bool {
        self.best_action == other.best_action
            && self.root_children == other.root_children
            && self.root_visits == other.root_visits
            && self.tree_size == other.tree_size
    }

    /// Root visit counts normalized to a probability distribution, keyed by
    /// action.
    pub fn root_policy(&self) -> Vec<(Action, f64)> {
        let total: u64 = self.root_children.iter().map(|c| c.n).sum();
        let mut policy: Vec<(Action, f64)> = self
            .root_children
            .iter()
            .map(|c| {
                (
                    c.action,
                    if total == 0 {
                        0.0
                    } else {
                        c.n as f64 / total as f64
                    },
                )
            })
            .collect();
        policy.sort_by_key(|(a, _)| *a);
        policy
    }
}

/// A finished search: the summary plus the tree it was computed from.
pub struct SearchOutcome<S> {
    pub result: SearchResult,
    pub tree: SearchTree<S>,
}

/// One full select, expand, playout, backup iteration.
pub fn run_iteration<S: GameState>(
    tree: &SearchTree<S>,
    params: &UctParams,
    iteration: u64,
) -> Result<Trajectory, MctsError> {
    let mut rng = iteration_rng(params.seed, iteration);
    let mut traj = select(tree, params.c_p, iteration);
    let delta = match expand(tree, &mut traj, &mut rng)? {
        None => terminal_delta(tree, traj.leaf())?,
        Some(leaf) => playout(tree.state(leaf), tree.mover(leaf), &mut rng),
    };
    traj.delta = Some(delta);
    backup(tree, &traj)?;
    Ok(traj)
}

/// Run exactly `budget_m` iterations from `root` and pick the move.
pub fn run_sequential<S: GameState>(
    root: S,
    params: &UctParams,
) -> Result<SearchOutcome<S>, MctsError> {
    params.validate()?;
    let start = Instant::now();
    let tree = SearchTree::new(root, params.budget_m as usize + 1);
    for i in 0..params.budget_m {
        run_iteration(&tree, params, i)?;
    }
    let elapsed = start.elapsed().as_nanos() as u64;
    let result = SearchResult::from_tree(&tree, elapsed)?;
    Ok(SearchOutcome { result, tree })
}
