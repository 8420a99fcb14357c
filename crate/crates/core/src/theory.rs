//! Exact MDP solvers and empirical checks of the hierarchical regret bound
//! and the PAC sub-goal completion bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::scripted_action;
use crate::dt::{FeatureSpec, ACTION_COUNT};
use crate::gridworld::{Action, Cell, CaseId, EnvConfig, EnvState, Flags, GridWorld, Role};
use crate::hierarchy::achieved;
use crate::neural::{Graph, Init, ParamBuilder, ParamStore, Tensor};
use crate::symbolic::{abstract_state, ground_operators, plan, GoalSpec, Operator, OperatorKind};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("domain: {0}")]
    Domain(String),
    #[error("model: {0}")]
    Model(String),
    #[error("instance: {0}")]
    Instance(String),
}

fn domain(msg: impl Into<String>) -> TheoryError {
    TheoryError::Domain(msg.into())
}

/// Finite MDP with sparse transition rows and expected rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactMdp {
    n_actions: usize,
    /// `trans[s][a]` lists `(s', p)`; every row sums to 1.
    trans: Vec<Vec<Vec<(usize, f64)>>>,
    reward: Vec<Vec<f64>>,
    gamma: f64,
}

/// Tolerance on transition row sums.
const ROW_TOL: f64 = 1e-9;

impl ExactMdp {
    pub fn new(trans: Vec<Vec<Vec<(usize, f64)>>>, reward: Vec<Vec<f64>>, gamma: f64) -> Result<Self, TheoryError> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(domain(format!("discount {gamma} outside (0, 1)")));
        }
        let n = trans.len();
        let n_actions = trans.first().map_or(0, Vec::len);
        if n == 0 || n_actions == 0 || reward.len() != n {
            return Err(TheoryError::Model("empty model or reward table of the wrong size".into()));
        }
        for (s, rows) in trans.iter().enumerate() {
            if rows.len() != n_actions || reward[s].len() != n_actions {
                return Err(TheoryError::Model(format!("state {s} has a ragged action set")));
            }
            for (a, row) in rows.iter().enumerate() {
                let total: f64 = row.iter().map(|&(_, p)| p).sum();
                if (total - 1.0).abs() > ROW_TOL || row.iter().any(|&(t, p)| t >= n || !(p >= 0.0)) {
                    return Err(TheoryError::Model(format!("row ({s}, {a}) is not a distribution")));
                }
            }
        }
        Ok(Self { n_actions, trans, reward, gamma })
    }

    pub fn n_states(&self) -> usize {
        self.trans.len()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transitions(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.trans[s][a]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s][a]
    }

    /// Largest one-step reward magnitude.
    pub fn reward_bound(&self) -> f64 {
        self.reward.iter().flatten().fold(0.0, |m, r| m.max(r.abs()))
    }

    fn q(&self, v: &[f64], s: usize, a: usize) -> f64 {
        self.reward[s][a] + self.gamma * self.trans[s][a].iter().map(|&(t, p)| p * v[t]).sum::<f64>()
    }

    /// `(T^π V)(s)` for a stochastic policy row.
    fn backup(&self, v: &[f64], s: usize, pi: &[f64]) -> f64 {
        pi.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(a, &p)| p * self.q(v, s, a)).sum()
    }

    /// Deterministic policy as one-hot rows.
    pub fn deterministic_policy(&self, actions: &[usize]) -> Vec<Vec<f64>> {
        actions
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; self.n_actions];
                row[a] = 1.0;
                row
            })
            .collect()
    }

    pub fn uniform_policy(&self) -> Vec<Vec<f64>> {
        vec![vec![1.0 / self.n_actions as f64; self.n_actions]; self.n_states()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub values: Vec<f64>,
    /// Greedy action per state; ties go to the lowest index.
    pub policy: Vec<usize>,
    /// `‖T V − V‖∞` of the returned values.
    pub residual: f64,
    pub iterations: usize,
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Optimal values with Bellman residual at most `tol`.
pub fn value_iteration(mdp: &ExactMdp, tol: f64) -> Result<Solution, TheoryError> {
    if !(tol > 0.0) {
        return Err(domain("tolerance must be positive"));
    }
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut iterations = 0;
    loop {
        for s in 0..n {
            next[s] = (0..mdp.n_actions).map(|a| mdp.q(&v, s, a)).fold(f64::NEG_INFINITY, f64::max);
        }
        iterations += 1;
        let delta = sup_diff(&next, &v);
        std::mem::swap(&mut v, &mut next);
        // ‖T V_{k+1} − V_{k+1}‖ ≤ γ ‖V_{k+1} − V_k‖
        if mdp.gamma * delta <= tol {
            break;
        }
    }
    let policy: Vec<usize> = (0..n)
        .map(|s| {
            let qs: Vec<f64> = (0..mdp.n_actions).map(|a| mdp.q(&v, s, a)).collect();
            let best = qs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            qs.iter().position(|&q| q == best).expect("non-empty action set")
        })
        .collect();
    let residual = (0..n)
        .map(|s| {
            let tv = (0..mdp.n_actions).map(|a| mdp.q(&v, s, a)).fold(f64::NEG_INFINITY, f64::max);
            (tv - v[s]).abs()
        })
        .fold(0.0, f64::max);
    Ok(Solution { values: v, policy, residual, iterations })
}

/// Value of a stationary stochastic policy, accurate to `tol` in sup norm.
pub fn policy_evaluation(mdp: &ExactMdp, policy: &[Vec<f64>], tol: f64) -> Result<Vec<f64>, TheoryError> {
    if policy.len() != mdp.n_states() || policy.iter().any(|r| r.len() != mdp.n_actions) {
        return Err(TheoryError::Model("policy table does not match the model".into()));
    }
    if policy.iter().any(|r| (r.iter().sum::<f64>() - 1.0).abs() > ROW_TOL) {
        return Err(TheoryError::Model("policy rows must be distributions".into()));
    }
    if !(tol > 0.0) {
        return Err(domain("tolerance must be positive"));
    }
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    let mut next = vec![0.0; n];
    // error after the last sweep ≤ γ δ / (1 − γ)
    let stop = tol * (1.0 - mdp.gamma) / mdp.gamma;
    loop {
        for s in 0..n {
            next[s] = mdp.backup(&v, s, &policy[s]);
        }
        let delta = sup_diff(&next, &v);
        std::mem::swap(&mut v, &mut next);
        if delta <= stop {
            return Ok(v);
        }
    }
}

/// Monte-Carlo value estimate with a two-sided Hoeffding half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    /// Holds with probability `1 − delta`; includes the truncation tail.
    pub half_width: f64,
    pub rollouts: usize,
    pub delta: f64,
}

impl McEstimate {
    pub fn contains(&self, v: f64) -> bool {
        (v - self.mean).abs() <= self.half_width
    }
}

/// Hoeffding half-width for the mean of `n` samples in a range of width
/// `range`, at confidence `1 − delta`.
pub fn hoeffding_half_width(range: f64, n: usize, delta: f64) -> f64 {
    range * ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

fn sample_index<R: Rng>(rng: &mut R, row: &[(usize, f64)]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(t, p) in row {
        acc += p;
        if u < acc {
            return t;
        }
    }
    row.last().expect("non-empty row").0
}

fn sample_action<R: Rng>(rng: &mut R, pi: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (a, &p) in pi.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    pi.iter().rposition(|&p| p > 0.0).expect("distribution has support")
}

/// Discounted returns of `rollouts` episodes truncated at `horizon`.
pub fn monte_carlo_value(
    mdp: &ExactMdp,
    policy: &[Vec<f64>],
    start: usize,
    rollouts: usize,
    horizon: usize,
    delta: f64,
    seed: u64,
) -> Result<McEstimate, TheoryError> {
    if rollouts == 0 || !(delta > 0.0 && delta < 1.0) || start >= mdp.n_states() {
        return Err(domain("need rollouts > 0, delta in (0, 1) and a valid start state"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..rollouts {
        let (mut s, mut disc, mut ret) = (start, 1.0, 0.0);
        for _ in 0..horizon {
            let a = sample_action(&mut rng, &policy[s]);
            ret += disc * mdp.reward[s][a];
            disc *= mdp.gamma;
            s = sample_index(&mut rng, &mdp.trans[s][a]);
        }
        total += ret;
    }
    let rmax = mdp.reward_bound();
    let g = mdp.gamma;
    let span = 2.0 * rmax * (1.0 - g.powi(horizon as i32)) / (1.0 - g);
    let tail = rmax * g.powi(horizon as i32) / (1.0 - g);
    Ok(McEstimate {
        mean: total / rollouts as f64,
        half_width: hoeffding_half_width(span, rollouts, delta) + tail,
        rollouts,
        delta,
    })
}

/// Enumeration of a grid world's states, plus an absorbing post-success
/// state at index `len() - 1`.
#[derive(Debug, Clone)]
pub struct StateIndex {
    width: usize,
    flag_count: usize,
    states: Vec<EnvState>,
    lookup: Vec<Option<usize>>,
}

impl StateIndex {
    pub fn of(world: &GridWorld) -> Self {
        let width = world.width();
        let flag_count = world.flag_count();
        let combos = 1usize << flag_count;
        let mut lookup = vec![None; world.height() * width * combos];
        let mut states = Vec::new();
        for c in world.open_cells() {
            for bits in 0..combos {
                let s = world.state_at(c, Flags::from_bits(bits as u8, flag_count));
                lookup[(c.row * width + c.col) * combos + bits] = Some(states.len());
                states.push(s);
            }
        }
        Self { width, flag_count, states, lookup }
    }

    /// Number of indices including the absorbing state.
    pub fn len(&self) -> usize {
        self.states.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn absorbing(&self) -> usize {
        self.states.len()
    }

    pub fn index(&self, s: &EnvState) -> Option<usize> {
        let combos = 1usize << self.flag_count;
        self.lookup.get((s.row * self.width + s.col) * combos + s.flags.bits() as usize).copied().flatten()
    }

    /// Environment state of a non-absorbing index.
    pub fn state(&self, i: usize) -> Option<&EnvState> {
        self.states.get(i)
    }
}

/// Successor distribution of one environment step, with success mapped to
/// the absorbing index. Returns `(rows, expected reward)`.
fn env_step(world: &GridWorld, idx: &StateIndex, s: &EnvState, a: Action) -> (Vec<(usize, f64)>, f64) {
    let p_fail = if a.is_move() { world.config().fail_prob } else { 0.0 };
    let mut rows: Vec<(usize, f64)> = Vec::with_capacity(2);
    let mut reward = 0.0;
    for (draw, p) in [(0.0, p_fail), (1.0, 1.0 - p_fail)] {
        if p <= 0.0 {
            continue;
        }
        let r = world.transition(s, a, draw);
        let t = if r.done { idx.absorbing() } else { idx.index(&r.next_state).expect("valid successor") };
        reward += p * r.reward;
        match rows.iter_mut().find(|(u, _)| *u == t) {
            Some(e) => e.1 += p,
            None => rows.push((t, p)),
        }
    }
    (rows, reward)
}

/// The grid world as an exact MDP over `StateIndex`; goal arrival moves to
/// the zero-reward absorbing state. The step limit is ignored.
pub fn world_mdp(world: &GridWorld, gamma: f64) -> Result<(ExactMdp, StateIndex), TheoryError> {
    let idx = StateIndex::of(world);
    let mut trans = Vec::with_capacity(idx.len());
    let mut reward = Vec::with_capacity(idx.len());
    for s in &idx.states {
        let (t, r): (Vec<_>, Vec<_>) = Action::ALL.iter().map(|&a| env_step(world, &idx, s, a)).unzip();
        trans.push(t);
        reward.push(r);
    }
    let sink = idx.absorbing();
    trans.push(vec![vec![(sink, 1.0)]; ACTION_COUNT]);
    reward.push(vec![0.0; ACTION_COUNT]);
    Ok((ExactMdp::new(trans, reward, gamma)?, idx))
}

/// Symbols of the hierarchical regret bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub gamma: f64,
    pub eps_sym: f64,
    pub eps_exec: f64,
    pub rho: f64,
    /// Single-step cost bound `B`.
    pub b: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<(), TheoryError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(domain(format!("discount {} outside (0, 1)", self.gamma)));
        }
        if !(self.eps_sym >= 0.0 && self.eps_exec >= 0.0 && self.b >= 0.0) {
            return Err(domain("cost gaps and B must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(domain(format!("failure probability {} outside [0, 1]", self.rho)));
        }
        Ok(())
    }
}

/// `ε_sym/(1−γ) + ε_exec/(1−γ)² + ρB/(1−γ)²`.
pub fn hierarchical_bound(p: &BoundParams) -> Result<f64, TheoryError> {
    hierarchical_bound_horizon(p, None)
}

/// As [`hierarchical_bound`]; with operators known to terminate within `H`
/// steps the two execution terms use `(1−γ^H)/(1−γ)²` instead.
pub fn hierarchical_bound_horizon(p: &BoundParams, horizon: Option<u32>) -> Result<f64, TheoryError> {
    p.validate()?;
    let q = 1.0 - p.gamma;
    let exec_factor = match horizon {
        Some(h) => (1.0 - p.gamma.powi(h as i32)) / (q * q),
        None => 1.0 / (q * q),
    };
    Ok(p.eps_sym / q + (p.eps_exec + p.rho * p.b) * exec_factor)
}

/// Injected imperfections for one verification instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    /// Insert a two-step detour into the plan.
    pub detour: bool,
    /// Per-step probability that the executor takes a uniform random action.
    pub exec_noise: f64,
    /// Probability that an operator's first action is replaced by a uniform
    /// random one.
    pub rho: f64,
}

impl Injection {
    pub const NONE: Injection = Injection { detour: false, exec_noise: 0.0, rho: 0.0 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thm1Instance {
    pub seed: u64,
    pub fail_prob: f64,
    pub plan_len: usize,
    pub eps_sym: f64,
    pub eps_exec: f64,
    pub rho: f64,
    pub b: f64,
    pub v_star: f64,
    pub v_hybrid: f64,
    /// `|V^hyb(s0) − V*(s0)|`.
    pub measured: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thm1Report {
    pub gamma: f64,
    pub injection: Injection,
    pub instances: Vec<Thm1Instance>,
    pub violations: usize,
    pub min_slack: f64,
    pub mean_slack: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thm1Config {
    pub instances: usize,
    pub seed: u64,
    pub gamma: f64,
    pub injection: Injection,
    /// Evaluation accuracy; also the slack allowed when comparing.
    pub tol: f64,
}

impl Default for Thm1Config {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 0,
            gamma: 0.95,
            injection: Injection { detour: true, exec_noise: 0.1, rho: 0.2 },
            tol: 1e-9,
        }
    }
}

/// Random solvable 4×4 single-key layout. Doors cannot be entered without
/// the key, so no state is a trap.
pub fn random_instance(seed: u64) -> GridWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut cells: Vec<Cell> = (0..16).map(|i| Cell::new(i / 4, i % 4)).collect();
        for i in (1..cells.len()).rev() {
            cells.swap(i, rng.gen_range(0..=i));
        }
        let walls = cells[4..4 + rng.gen_range(0..=2)].to_vec();
        let mut cfg = EnvConfig::case1_default();
        cfg.width = 4;
        cfg.height = 4;
        cfg.fail_prob = [0.0, 0.1, 0.2][rng.gen_range(0..3)];
        cfg.layout = [(Role::AgentStart, cells[0]), (Role::Key1, cells[1]), (Role::Door1, cells[2]), (Role::Goal, cells[3])]
            .into_iter()
            .collect();
        cfg.walls = walls;
        cfg.door_blocks_entry = true;
        cfg.seed = seed;
        let Ok(world) = GridWorld::new(cfg) else { continue };
        if solve_plan(&world).is_ok() {
            return world;
        }
    }
}

fn solve_plan(world: &GridWorld) -> Result<Vec<Operator>, TheoryError> {
    let ops = ground_operators(world);
    let start = abstract_state(world, &world.reset());
    plan(&start, &GoalSpec::for_world(world), &ops)
        .map(|p| p.ops)
        .map_err(|e| TheoryError::Instance(e.to_string()))
}

/// Inserts `Move(a→b), Move(b→a)` at the first point of the plan where the
/// agent stands on a cell with an open neighbour `b`.
fn with_detour(world: &GridWorld, ops: &[Operator]) -> Vec<Operator> {
    let ground = ground_operators(world);
    let mut s = world.reset();
    for i in 0..ops.len() {
        for g in &ground {
            if let OperatorKind::Move { from, to } = g.kind {
                if from != s.cell() || world.move_target(&s, dir_between(from, to)) != Some(to) {
                    continue;
                }
                let back = ground.iter().find(|o| o.kind == OperatorKind::Move { from: to, to: from });
                let there = world.state_at(to, s.flags);
                if let Some(back) = back.filter(|_| world.move_target(&there, dir_between(to, from)) == Some(from)) {
                    let mut out = ops[..i].to_vec();
                    out.push(g.clone());
                    out.push(back.clone());
                    out.extend_from_slice(&ops[i..]);
                    return out;
                }
            }
        }
        s = nominal_end(world, &ops[i], &s);
    }
    ops.to_vec()
}

fn dir_between(from: Cell, to: Cell) -> Action {
    Action::MOVES
        .into_iter()
        .find(|a| {
            let (dr, dc) = a.delta();
            from.row as isize + dr == to.row as isize && from.col as isize + dc == to.col as isize
        })
        .unwrap_or(Action::PickOpen)
}

/// State after executing `op` without movement failures.
fn nominal_end(world: &GridWorld, op: &Operator, s: &EnvState) -> EnvState {
    let mut s = *s;
    for _ in 0..64 {
        if achieved(world, op, &s) {
            break;
        }
        let a = scripted_action(world, op, &s).unwrap_or(Action::PickOpen);
        s = world.deterministic_step(&s, a).next_state;
    }
    s
}

/// Uniform mixture `(1 − w)·onehot(a) + w·uniform`.
fn corrupt(a: Action, w: f64) -> Vec<f64> {
    let mut row = vec![w / ACTION_COUNT as f64; ACTION_COUNT];
    row[a.code()] += 1.0 - w;
    row
}

fn executor_action(world: &GridWorld, op: &Operator, s: &EnvState) -> Action {
    scripted_action(world, op, s).unwrap_or(Action::PickOpen)
}

/// Exact value at the start state of the plan-following hierarchical
/// policy under `inj`, over the augmented state `(env, operator, fresh)`.
fn hybrid_value(
    world: &GridWorld,
    idx: &StateIndex,
    ops: &[Operator],
    inj: &Injection,
    gamma: f64,
    tol: f64,
) -> Result<f64, TheoryError> {
    let n_env = idx.len() - 1;
    let n_ops = ops.len() + 1;
    let aug = |e: usize, i: usize, fresh: bool| ((e * n_ops) + i) * 2 + usize::from(fresh);
    let sink = n_env * n_ops * 2;
    // first operator index >= i not yet achieved in s
    let advance = |mut i: usize, s: &EnvState| {
        while i < ops.len() && achieved(world, &ops[i], s) {
            i += 1;
        }
        i
    };
    let mut trans = vec![vec![vec![(sink, 1.0)]; ACTION_COUNT]; sink + 1];
    let mut reward = vec![vec![0.0; ACTION_COUNT]; sink + 1];
    let mut policy = vec![vec![1.0 / ACTION_COUNT as f64; ACTION_COUNT]; sink + 1];
    for e in 0..n_env {
        let s = idx.state(e).expect("non-absorbing");
        for i in 0..n_ops {
            for fresh in [false, true] {
                let k = aug(e, i, fresh);
                let nominal = if i < ops.len() { executor_action(world, &ops[i], s) } else { Action::PickOpen };
                let w = inj.exec_noise + (1.0 - inj.exec_noise) * if fresh { inj.rho } else { 0.0 };
                policy[k] = corrupt(nominal, w);
                for a in Action::ALL {
                    let (rows, r) = env_step(world, idx, s, a);
                    reward[k][a.code()] = r;
                    trans[k][a.code()] = rows
                        .into_iter()
                        .map(|(t, p)| {
                            if t == idx.absorbing() {
                                return (sink, p);
                            }
                            let s2 = idx.state(t).expect("non-absorbing");
                            let j = advance(i, s2);
                            (aug(t, j, j != i), p)
                        })
                        .collect();
                }
            }
        }
    }
    let mdp = ExactMdp::new(trans, reward, gamma)?;
    let v = policy_evaluation(&mdp, &policy, tol)?;
    let s0 = world.reset();
    let e0 = idx.index(&s0).expect("start state");
    Ok(v[aug(e0, advance(0, &s0), true)])
}

/// Largest gap, over states where `op` is pending, between the expected
/// discounted step cost of the noisy executor and the optimal cost of
/// achieving `op`.
fn exec_gap(world: &GridWorld, idx: &StateIndex, op: &Operator, noise: f64, gamma: f64, tol: f64) -> Result<f64, TheoryError> {
    let n = idx.len();
    let sink = idx.absorbing();
    let cost = -world.config().step_penalty;
    let mut trans = vec![vec![vec![(sink, 1.0)]; ACTION_COUNT]; n];
    let mut reward = vec![vec![0.0; ACTION_COUNT]; n];
    let mut policy = vec![vec![1.0 / ACTION_COUNT as f64; ACTION_COUNT]; n];
    let mut pending = vec![false; n];
    for e in 0..n - 1 {
        let s = idx.state(e).expect("non-absorbing");
        if achieved(world, op, s) || world.success(s) {
            continue;
        }
        pending[e] = true;
        policy[e] = corrupt(executor_action(world, op, s), noise);
        for a in Action::ALL {
            let (rows, _) = env_step(world, idx, s, a);
            trans[e][a.code()] = rows;
            reward[e][a.code()] = -cost;
        }
    }
    let mdp = ExactMdp::new(trans, reward, gamma)?;
    let opt = value_iteration(&mdp, tol)?;
    let exec = policy_evaluation(&mdp, &policy, tol)?;
    Ok((0..n).filter(|&e| pending[e]).map(|e| opt.values[e] - exec[e]).fold(0.0, f64::max))
}

/// Measures every bound ingredient exactly on one instance.
pub fn measure_instance(world: &GridWorld, inj: &Injection, gamma: f64, tol: f64) -> Result<Thm1Instance, TheoryError> {
    let (mdp, idx) = world_mdp(world, gamma)?;
    let opt = value_iteration(&mdp, tol * (1.0 - gamma))?;
    let s0 = idx.index(&world.reset()).expect("start state");
    let v_star = opt.values[s0];
    let optimal_plan = solve_plan(world)?;
    let used = if inj.detour { with_detour(world, &optimal_plan) } else { optimal_plan.clone() };
    let v_sym = hybrid_value(world, &idx, &optimal_plan, &Injection::NONE, gamma, tol)?;
    let v_plan = hybrid_value(world, &idx, &used, &Injection::NONE, gamma, tol)?;
    let v_hybrid = hybrid_value(world, &idx, &used, inj, gamma, tol)?;
    let mut eps_exec = 0.0f64;
    if inj.exec_noise > 0.0 {
        for op in &used {
            eps_exec = eps_exec.max(exec_gap(world, &idx, op, inj.exec_noise, gamma, tol)?);
        }
    }
    let b = mdp.reward_bound();
    let params = BoundParams { gamma, eps_sym: (v_sym - v_plan).max(0.0), eps_exec, rho: inj.rho, b };
    let bound = hierarchical_bound(&params)?;
    let measured = (v_hybrid - v_star).abs();
    Ok(Thm1Instance {
        seed: world.config().seed,
        fail_prob: world.config().fail_prob,
        plan_len: used.len(),
        eps_sym: params.eps_sym,
        eps_exec,
        rho: inj.rho,
        b,
        v_star,
        v_hybrid,
        measured,
        bound,
        holds: measured <= bound + 10.0 * tol,
    })
}

/// Measured regret against the bound on random instances.
pub fn verify_theorem1(cfg: &Thm1Config) -> Result<Thm1Report, TheoryError> {
    if cfg.instances == 0 {
        return Err(domain("need at least one instance"));
    }
    let mut instances = Vec::with_capacity(cfg.instances);
    for k in 0..cfg.instances as u64 {
        let world = random_instance(cfg.seed.wrapping_mul(1_000_003).wrapping_add(k));
        instances.push(measure_instance(&world, &cfg.injection, cfg.gamma, cfg.tol)?);
    }
    let slack: Vec<f64> = instances.iter().map(|i| i.bound - i.measured).collect();
    Ok(Thm1Report {
        gamma: cfg.gamma,
        injection: cfg.injection,
        violations: instances.iter().filter(|i| !i.holds).count(),
        min_slack: slack.iter().copied().fold(f64::INFINITY, f64::min),
        mean_slack: slack.iter().sum::<f64>() / slack.len() as f64,
        instances,
    })
}

/// Symbols of the sub-goal completion bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacParams {
    /// VC-dimension proxy.
    pub d: f64,
    /// Training segments per operator.
    pub m: f64,
    /// Operator count.
    pub k: usize,
    pub delta: f64,
}

impl PacParams {
    pub fn validate(&self) -> Result<(), TheoryError> {
        if !(self.d > 0.0) || !(self.m >= 1.0) || self.k == 0 {
            return Err(domain("need d > 0, m >= 1 and K >= 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(domain(format!("confidence {} outside (0, 1)", self.delta)));
        }
        Ok(())
    }

    /// Total trajectories `N = K m`.
    pub fn n(&self) -> f64 {
        self.k as f64 * self.m
    }
}

/// `ε(m, δ′) = √((2d ln(em/d) + 2 ln(4/δ′)) / m)`.
pub fn pac_epsilon(d: f64, m: f64, delta_prime: f64) -> Result<f64, TheoryError> {
    if !(d > 0.0) || !(m >= 1.0) || !(delta_prime > 0.0 && delta_prime < 1.0) {
        return Err(domain("need d > 0, m >= 1 and delta' in (0, 1)"));
    }
    let inner = 2.0 * d * (std::f64::consts::E * m / d).ln() + 2.0 * (4.0 / delta_prime).ln();
    Ok((inner.max(0.0) / m).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacBound {
    /// Per-operator deviation at `δ′ = δ/K`; the failure bound.
    pub epsilon: f64,
    /// `K · ε(m, δ/K)`, the explicit union over operators.
    pub union: f64,
    /// Whether the failure bound is below 1.
    pub informative: bool,
}

pub fn pac_bound(p: &PacParams) -> Result<PacBound, TheoryError> {
    p.validate()?;
    let epsilon = pac_epsilon(p.d, p.m, p.delta / p.k as f64)?;
    Ok(PacBound { epsilon, union: p.k as f64 * epsilon, informative: epsilon < 1.0 })
}

/// Segments per operator for failure rate `alpha`, up to constants:
/// `(d + ln(K/δ)) / α²`.
pub fn sample_complexity(d: f64, k: usize, delta: f64, alpha: f64) -> Result<f64, TheoryError> {
    if !(d > 0.0) || k == 0 || !(delta > 0.0 && delta < 1.0) || !(alpha > 0.0 && alpha <= 1.0) {
        return Err(domain("need d > 0, K >= 1, delta in (0, 1) and alpha in (0, 1]"));
    }
    Ok((d + (k as f64 / delta).ln()) / (alpha * alpha))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thm2Config {
    pub preset: String,
    /// Training segments per operator, ascending.
    pub m_grid: Vec<usize>,
    pub seeds: usize,
    pub seed: u64,
    pub delta: f64,
    /// Probability that a demonstrated action is uniformly random.
    pub label_noise: f64,
    pub test_segments: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for Thm2Config {
    fn default() -> Self {
        Self {
            preset: "case1_default".into(),
            m_grid: (5..=12).map(|e| 1usize << e).collect(),
            seeds: 20,
            seed: 0,
            delta: 0.05,
            label_noise: 0.3,
            test_segments: 200,
            epochs: 10,
            batch_size: 128,
            lr: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thm2Point {
    pub m: usize,
    pub failure_per_seed: Vec<f64>,
    pub mean_failure: f64,
    /// Hoeffding half-width of the pooled failure rate at confidence `1 − δ`.
    pub half_width: f64,
    pub bound: f64,
    pub informative: bool,
    /// Share of seeds with failure at most the bound (informative points only).
    pub within_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thm2Report {
    pub operator: String,
    pub d: usize,
    pub k: usize,
    pub points: Vec<Thm2Point>,
    /// Least-squares slope of ln(failure) on ln(m), with failures floored
    /// at half a test episode.
    pub slope: f64,
    pub monotone_within_ci: bool,
    pub bound_holds: bool,
}

/// Linear softmax policy over state features: the low-level class whose
/// parameter count serves as the VC proxy.
pub struct LinearPolicy {
    features: FeatureSpec,
    params: ParamStore<f32>,
}

impl LinearPolicy {
    fn builder(features: FeatureSpec) -> ParamBuilder {
        let mut b = ParamBuilder::new();
        b.add("pi.w", &[features.state_dim(), ACTION_COUNT], Init::Zeros).add("pi.b", &[ACTION_COUNT], Init::Zeros);
        b
    }

    pub fn param_count(features: FeatureSpec) -> usize {
        (features.state_dim() + 1) * ACTION_COUNT
    }

    pub fn train(
        features: FeatureSpec,
        samples: &[(EnvState, Action)],
        cfg: &Thm2Config,
        seed: u64,
    ) -> Result<Self, TheoryError> {
        let mut params = Self::builder(features).build::<f32>(seed).map_err(|e| TheoryError::Model(e.to_string()))?;
        let w = params.id("pi.w").expect("declared");
        let b = params.id("pi.b").expect("declared");
        let feats: Vec<Vec<f64>> = samples
            .iter()
            .map(|(s, _)| {
                let mut v = Vec::new();
                features.encode_state(s, &mut v);
                v
            })
            .collect();
        crate::baselines::fit(&mut params, samples.len(), cfg.batch_size, cfg.epochs, cfg.lr, seed, |g: &mut Graph<'_, f32>, idx: &[usize]| {
            let flat: Vec<f64> = idx.iter().flat_map(|&i| feats[i].iter().copied()).collect();
            let x = g.input(Tensor::from_f64(idx.len(), features.state_dim(), &flat));
            let (wv, bv) = (g.param(w), g.param(b));
            let logits = g.affine(x, wv, bv)?;
            let targets: Vec<usize> = idx.iter().map(|&i| samples[i].1.code()).collect();
            Ok(g.cross_entropy(logits, &targets)?)
        })
        .map_err(|e| TheoryError::Model(e.to_string()))?;
        Ok(Self { features, params })
    }

    /// Greedy action; ties go to the lowest code.
    pub fn act(&self, s: &EnvState) -> Action {
        let mut x = Vec::new();
        self.features.encode_state(s, &mut x);
        let w = self.params.by_name("pi.w").expect("declared");
        let b = self.params.by_name("pi.b").expect("declared");
        let logits: Vec<f64> = (0..ACTION_COUNT)
            .map(|a| b[a] as f64 + x.iter().enumerate().map(|(i, xi)| xi * w[i * ACTION_COUNT + a] as f64).sum::<f64>())
            .collect();
        crate::dt::greedy(&logits)
    }
}

/// Start states for operator segments: any open cell with no flags set from
/// which the operator is pending and achievable.
fn segment_start<R: Rng>(world: &GridWorld, op: &Operator, rng: &mut R) -> EnvState {
    let cells = world.open_cells();
    loop {
        let s = world.state_at(cells[rng.gen_range(0..cells.len())], Flags::new(world.flag_count()));
        if !achieved(world, op, &s) && crate::baselines::scripted_steps(world, op, &s).is_some() {
            return s;
        }
    }
}

/// Runs `act` on `op` from `s` until achieved or the executor budget is
/// spent, recording `(state, action)` pairs. Returns whether it succeeded.
fn run_segment<R: Rng>(
    world: &GridWorld,
    op: &Operator,
    mut s: EnvState,
    rng: &mut R,
    mut act: impl FnMut(&EnvState, &mut R) -> Action,
    mut record: impl FnMut(EnvState, Action),
) -> bool {
    let budget = crate::hierarchy::ExecutorConfig::default().budget(world, op, &s);
    for _ in 0..budget {
        let a = act(&s, rng);
        record(s, a);
        s = world.transition(&s, a, rng.gen()).next_state;
        if achieved(world, op, &s) {
            return true;
        }
    }
    false
}

/// Trains the linear executor of the key-pickup operator on `m` noisy
/// demonstration segments per grid point and seed, and measures its
/// failure rate on fresh segments.
pub fn verify_theorem2(cfg: &Thm2Config) -> Result<Thm2Report, TheoryError> {
    if cfg.m_grid.is_empty() || cfg.seeds == 0 || cfg.test_segments == 0 {
        return Err(domain("need a non-empty grid, seeds and test segments"));
    }
    let world = GridWorld::preset(&cfg.preset).map_err(|e| TheoryError::Instance(e.to_string()))?;
    if world.case() != CaseId::Single {
        return Err(TheoryError::Instance("the sweep uses a single-key layout".into()));
    }
    let op = ground_operators(&world)
        .into_iter()
        .find(|o| matches!(o.kind, OperatorKind::PickKey { .. }))
        .expect("single-key layouts have a key operator");
    let features = FeatureSpec::of(&world);
    let d = LinearPolicy::param_count(features);
    let k = 1;
    let mut points = Vec::with_capacity(cfg.m_grid.len());
    for &m in &cfg.m_grid {
        let mut failure_per_seed = Vec::with_capacity(cfg.seeds);
        for sd in 0..cfg.seeds as u64 {
            let seed = cfg.seed.wrapping_mul(7919).wrapping_add(sd).wrapping_add((m as u64) << 32);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut samples = Vec::new();
            for _ in 0..m {
                let s = segment_start(&world, &op, &mut rng);
                run_segment(
                    &world,
                    &op,
                    s,
                    &mut rng,
                    |s, r| {
                        if r.gen::<f64>() < cfg.label_noise {
                            Action::ALL[r.gen_range(0..ACTION_COUNT)]
                        } else {
                            executor_action(&world, &op, s)
                        }
                    },
                    |s, a| samples.push((s, a)),
                );
            }
            let policy = LinearPolicy::train(features, &samples, cfg, seed)?;
            let mut test_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let mut failures = 0;
            for _ in 0..cfg.test_segments {
                let s = segment_start(&world, &op, &mut test_rng);
                if !run_segment(&world, &op, s, &mut test_rng, |s, _| policy.act(s), |_, _| {}) {
                    failures += 1;
                }
            }
            failure_per_seed.push(failures as f64 / cfg.test_segments as f64);
        }
        let mean_failure = failure_per_seed.iter().sum::<f64>() / cfg.seeds as f64;
        let pac = pac_bound(&PacParams { d: d as f64, m: m as f64, k, delta: cfg.delta })?;
        let within_bound = pac.informative.then(|| {
            failure_per_seed.iter().filter(|&&f| f <= pac.epsilon).count() as f64 / cfg.seeds as f64
        });
        points.push(Thm2Point {
            m,
            half_width: hoeffding_half_width(1.0, cfg.seeds * cfg.test_segments, cfg.delta),
            mean_failure,
            failure_per_seed,
            bound: pac.epsilon,
            informative: pac.informative,
            within_bound,
        });
    }
    let floor = 0.5 / (cfg.seeds * cfg.test_segments) as f64;
    let xs: Vec<f64> = points.iter().map(|p| (p.m as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean_failure.max(floor).ln()).collect();
    let slope = least_squares_slope(&xs, &ys);
    let monotone_within_ci = points
        .windows(2)
        .all(|w| w[1].mean_failure <= w[0].mean_failure + w[0].half_width + w[1].half_width);
    let bound_holds = points.iter().filter_map(|p| p.within_bound).all(|share| share >= 0.95);
    Ok(Thm2Report { operator: op.name, d, k, points, slope, monotone_within_ci, bound_holds })
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
