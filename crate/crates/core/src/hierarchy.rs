//! Plan-then-refine executor.
//!
//! The planner produces an operator sequence from `φ(s₀)`. Each operator is
//! mapped to a sub-goal that conditions the low-level policy, which acts until
//! `φ(s) ⊇ add(o)`, the operator budget runs out, or the episode ends. An
//! exhausted budget triggers a replan from the current abstract state.
//!
//! [`run_episodes`] advances many episodes in lockstep so batched policies
//! see one query per live episode per round.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::scripted_steps;
use crate::dt::{greedy, sample_action, SubGoal, ACTION_COUNT};
use crate::gridworld::{Action, EnvState, Episode, GridWorld, StepInfo};
use crate::symbolic::{abstract_state, ground_operators, plan, GoalSpec, Operator, OperatorKind};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("operator `{0}` has no sub-goal mapping")]
    UnknownOperator(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("malformed trace file: {0}")]
    Trace(String),
}

/// Sub-goal map ψ.
pub fn subgoal_of(op: &Operator) -> Result<SubGoal, HierarchyError> {
    let base = op.base_name();
    let known = matches!(
        base,
        "Move" | "PickKey" | "PickKey1" | "PickKey2" | "OpenDoor" | "OpenDoor1" | "OpenDoor2" | "PickItem1" | "PickItem2"
    );
    if !known {
        return Err(HierarchyError::UnknownOperator(op.name.clone()));
    }
    Ok(match op.kind {
        OperatorKind::Move { to, .. } => SubGoal::MoveTo { cell: to },
        OperatorKind::PickKey { id, .. } => SubGoal::PickKey { id },
        OperatorKind::OpenDoor { id, .. } => SubGoal::OpenDoor { id },
        OperatorKind::PickItem { id, .. } => SubGoal::PickItem { id },
    })
}

/// Achievement predicate `φ(s) ⊇ add(o)`.
pub fn achieved(world: &GridWorld, op: &Operator, state: &EnvState) -> bool {
    abstract_state(world, state).satisfies(&op.add)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecutorConfig {
    /// Budget is `budget_factor` times the scripted step count.
    pub budget_factor: usize,
    pub min_budget: usize,
    pub max_replans: usize,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self { budget_factor: 3, min_budget: 10, max_replans: 5 }
    }
}

impl ExecutorConfig {
    pub fn budget(&self, world: &GridWorld, op: &Operator, state: &EnvState) -> usize {
        scripted_steps(world, op, state).map_or(self.min_budget, |n| (self.budget_factor * n).max(self.min_budget))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Achieved,
    Exhausted,
    Replanned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorOutcome {
    pub operator: String,
    pub subgoal: SubGoal,
    /// Step index at which the operator became active.
    pub start_step: usize,
    /// Step count when the outcome was decided.
    pub end_step: usize,
    pub budget: usize,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub state: EnvState,
    pub subgoal: Option<SubGoal>,
    pub action: Action,
    pub reward: f64,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub episode: u64,
    pub records: Vec<StepRecord>,
    pub outcomes: Vec<OperatorOutcome>,
    pub success: bool,
    pub replans: usize,
    pub final_state: EnvState,
}

impl EpisodeTrace {
    pub fn steps(&self) -> usize {
        self.records.len()
    }

    pub fn total_reward(&self) -> f64 {
        self.records.iter().map(|r| r.reward).sum()
    }
}

/// Per-episode scratch space owned by the runner on behalf of a policy.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyMemory {
    /// Active option index and steps spent in it.
    pub option: Option<(usize, usize)>,
}

/// One live episode asking for an action.
pub struct Query<'a> {
    pub world: &'a GridWorld,
    /// `s_0 ..= s_t`.
    pub states: &'a [EnvState],
    /// `a_0 .. a_{t-1}`.
    pub actions: &'a [Action],
    pub operator: Option<&'a Operator>,
    pub subgoal: Option<SubGoal>,
    pub memory: &'a mut PolicyMemory,
}

impl Query<'_> {
    pub fn state(&self) -> &EnvState {
        self.states.last().expect("episode has a current state")
    }
}

/// Action-distribution interface shared by every method.
pub trait Policy: Sync {
    fn name(&self) -> &str;

    /// Whether the policy executes planner operators (and so receives an
    /// operator and sub-goal in every query).
    fn conditioned(&self) -> bool;

    /// One distribution per query, or `None` when the policy cannot act on
    /// the current operator (treated as an exhausted operator).
    fn act(&self, queries: &mut [Query<'_>]) -> Vec<Option<[f64; ACTION_COUNT]>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    Greedy,
    Sample,
}

/// Stream offset that separates action sampling from movement draws.
const SAMPLE_STREAM: u64 = 1 << 63;

struct Live<'w> {
    env: Episode<'w>,
    states: Vec<EnvState>,
    actions: Vec<Action>,
    memory: PolicyMemory,
    plan: Vec<Operator>,
    op_index: usize,
    op_start: usize,
    op_budget: usize,
    trace: EpisodeTrace,
    finished: bool,
    sampler: ChaCha8Rng,
}

impl<'w> Live<'w> {
    fn new(world: &'w GridWorld, index: u64) -> Self {
        let env = world.episode(index);
        let s0 = env.state();
        let mut sampler = ChaCha8Rng::seed_from_u64(world.config().seed);
        sampler.set_stream(SAMPLE_STREAM | index);
        Self {
            env,
            states: vec![s0],
            actions: Vec::new(),
            memory: PolicyMemory::default(),
            plan: Vec::new(),
            op_index: 0,
            op_start: 0,
            op_budget: 0,
            trace: EpisodeTrace {
                episode: index,
                records: Vec::new(),
                outcomes: Vec::new(),
                success: false,
                replans: 0,
                final_state: s0,
            },
            finished: false,
            sampler,
        }
    }

    fn state(&self) -> EnvState {
        self.env.state()
    }

    fn finish(&mut self) {
        self.finished = true;
        self.trace.final_state = self.state();
    }

    fn start_op(&mut self, world: &GridWorld, exec: &ExecutorConfig) {
        self.op_start = self.env.steps();
        if let Some(op) = self.plan.get(self.op_index) {
            self.op_budget = exec.budget(world, op, &self.state());
        }
        self.memory = PolicyMemory::default();
    }

    /// Replaces the plan from the current abstract state; false if none.
    fn replan(&mut self, world: &GridWorld, ops: &[Operator], goal: &GoalSpec, exec: &ExecutorConfig) -> bool {
        match plan(&abstract_state(world, &self.state()), goal, ops) {
            Ok(p) if !p.is_empty() => {
                self.plan = p.ops;
                self.op_index = 0;
                self.start_op(world, exec);
                true
            }
            _ => false,
        }
    }

    fn record(&mut self, outcome: Outcome) {
        let op = &self.plan[self.op_index];
        self.trace.outcomes.push(OperatorOutcome {
            operator: op.name.clone(),
            subgoal: subgoal_of(op).expect("grounded operators map to sub-goals"),
            start_step: self.op_start,
            end_step: self.env.steps(),
            budget: self.op_budget,
            outcome,
        });
    }

    /// The current operator failed: replan if allowed, else end the episode.
    fn exhaust(&mut self, world: &GridWorld, ops: &[Operator], goal: &GoalSpec, exec: &ExecutorConfig) {
        if self.trace.replans < exec.max_replans {
            self.record(Outcome::Replanned);
            self.trace.replans += 1;
            if !self.replan(world, ops, goal, exec) {
                self.finish();
            }
        } else {
            self.record(Outcome::Exhausted);
            self.finish();
        }
    }

    /// Advances past achieved operators and handles budgets. Returns true if
    /// the episode still needs an action.
    fn prepare(&mut self, world: &GridWorld, ops: &[Operator], goal: &GoalSpec, exec: &ExecutorConfig) -> bool {
        while !self.finished {
            if self.op_index >= self.plan.len() {
                // plan ran out without success
                if self.trace.replans >= exec.max_replans {
                    self.finish();
                    break;
                }
                self.trace.replans += 1;
                if !self.replan(world, ops, goal, exec) {
                    self.finish();
                }
                continue;
            }
            let s = self.state();
            if achieved(world, &self.plan[self.op_index], &s) {
                self.record(Outcome::Achieved);
                self.op_index += 1;
                self.start_op(world, exec);
                continue;
            }
            if self.env.steps() - self.op_start >= self.op_budget {
                self.exhaust(world, ops, goal, exec);
                continue;
            }
            return true;
        }
        false
    }

    fn current_subgoal(&self) -> Option<SubGoal> {
        self.plan.get(self.op_index).map(|op| subgoal_of(op).expect("grounded operators map to sub-goals"))
    }

    fn apply(&mut self, action: Action, subgoal: Option<SubGoal>) {
        let s = self.state();
        let r = self.env.step(action).expect("live episodes are not done");
        self.trace.records.push(StepRecord {
            t: self.trace.records.len(),
            state: s,
            subgoal,
            action,
            reward: r.reward,
            info: r.info,
        });
        self.states.push(r.next_state);
        self.actions.push(action);
        if r.done {
            self.trace.success = r.info == StepInfo::GoalReached;
            if self.trace.success && self.op_index < self.plan.len() {
                let op_done = achieved(self.env.world(), &self.plan[self.op_index], &r.next_state);
                if op_done {
                    self.record(Outcome::Achieved);
                }
            }
            self.finish();
        }
    }
}

/// Runs episodes `indices` of `world` under `policy`.
///
/// Conditioned policies run under the planner; others act on the raw
/// history. Episode `i` uses movement stream `(seed, i)` so results do not
/// depend on which other episodes share the batch.
pub fn run_episodes(
    world: &GridWorld,
    policy: &dyn Policy,
    exec: &ExecutorConfig,
    decode: Decode,
    indices: impl IntoIterator<Item = u64>,
) -> Vec<EpisodeTrace> {
    let ops = ground_operators(world);
    let goal = GoalSpec::for_world(world);
    let mut live: Vec<Live<'_>> = indices.into_iter().map(|i| Live::new(world, i)).collect();
    if policy.conditioned() {
        for l in &mut live {
            if !l.replan(world, &ops, &goal, exec) {
                l.finish();
            }
        }
    }
    loop {
        let mut pending: Vec<usize> = Vec::new();
        for (i, l) in live.iter_mut().enumerate() {
            let ready = if policy.conditioned() { l.prepare(world, &ops, &goal, exec) } else { !l.finished };
            if ready {
                pending.push(i);
            }
        }
        if pending.is_empty() {
            break;
        }
        let subgoals: Vec<Option<SubGoal>> = pending.iter().map(|&i| live[i].current_subgoal()).collect();
        let dists = {
            let mut queries: Vec<Query<'_>> = Vec::with_capacity(pending.len());
            let mut rest: &mut [Live<'_>] = &mut live;
            let mut offset = 0;
            for (&i, g) in pending.iter().zip(&subgoals) {
                let (_, tail) = std::mem::take(&mut rest).split_at_mut(i - offset);
                let (l, tail) = tail.split_first_mut().expect("pending index in range");
                rest = tail;
                offset = i + 1;
                queries.push(Query {
                    world,
                    states: &l.states,
                    actions: &l.actions,
                    operator: if policy.conditioned() { l.plan.get(l.op_index) } else { None },
                    subgoal: if policy.conditioned() { *g } else { None },
                    memory: &mut l.memory,
                });
            }
            policy.act(&mut queries)
        };
        for ((&i, d), g) in pending.iter().zip(dists).zip(subgoals) {
            let l = &mut live[i];
            match d {
                Some(dist) => {
                    let a = match decode {
                        Decode::Greedy => greedy(&dist),
                        Decode::Sample => sample_action(&dist, &mut l.sampler),
                    };
                    l.apply(a, if policy.conditioned() { g } else { None });
                }
                None if policy.conditioned() => l.exhaust(world, &ops, &goal, exec),
                None => l.finish(),
            }
        }
    }
    live.into_iter().map(|l| l.trace).collect()
}

pub fn run_episode(world: &GridWorld, policy: &dyn Policy, exec: &ExecutorConfig, index: u64) -> EpisodeTrace {
    run_episodes(world, policy, exec, Decode::Greedy, [index]).pop().expect("one episode")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum TraceLine {
    Step {
        schema_version: u32,
        episode: u64,
        #[serde(flatten)]
        step: StepRecord,
    },
    Summary {
        schema_version: u32,
        episode: u64,
        steps: usize,
        success: bool,
        replans: usize,
        final_state: EnvState,
        outcomes: Vec<OperatorOutcome>,
    },
}

/// One JSON line per step, then one summary line per episode.
pub fn write_traces<W: Write>(mut w: W, traces: &[EpisodeTrace]) -> Result<(), HierarchyError> {
    for t in traces {
        for r in &t.records {
            let line =
                TraceLine::Step { schema_version: TRACE_SCHEMA_VERSION, episode: t.episode, step: r.clone() };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        let summary = TraceLine::Summary {
            schema_version: TRACE_SCHEMA_VERSION,
            episode: t.episode,
            steps: t.steps(),
            success: t.success,
            replans: t.replans,
            final_state: t.final_state,
            outcomes: t.outcomes.clone(),
        };
        serde_json::to_writer(&mut w, &summary)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces<R: BufRead>(r: R) -> Result<Vec<EpisodeTrace>, HierarchyError> {
    let mut out = Vec::new();
    let mut records = Vec::new();
    let mut current: Option<u64> = None;
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceLine>(&line)? {
            TraceLine::Step { episode, step, .. } => {
                if current.is_some_and(|e| e != episode) {
                    return Err(HierarchyError::Trace(format!("line {}: episode {episode} interleaved", n + 1)));
                }
                current = Some(episode);
                records.push(step);
            }
            TraceLine::Summary { episode, steps, success, replans, final_state, outcomes, .. } => {
                if current.is_some_and(|e| e != episode) || steps != records.len() {
                    return Err(HierarchyError::Trace(format!("line {}: summary does not match steps", n + 1)));
                }
                out.push(EpisodeTrace {
                    episode,
                    records: std::mem::take(&mut records),
                    outcomes,
                    success,
                    replans,
                    final_state,
                });
                current = None;
            }
        }
    }
    if !records.is_empty() {
        return Err(HierarchyError::Trace("trailing steps without a summary".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::ScriptedPolicy;
    use crate::gridworld::{Cell, EnvConfig, Flags};

    fn case(name: &str, fail: f64) -> GridWorld {
        GridWorld::new(EnvConfig::preset(name).unwrap().with_fail_prob(fail)).unwrap()
    }

    #[test]
    fn subgoal_map_examples() {
        let w = case("case2_default", 0.0);
        let ops = ground_operators(&w);
        let mv = ops.iter().find(|o| o.kind == OperatorKind::Move { from: Cell::new(1, 1), to: Cell::new(1, 2) }).unwrap();
        assert_eq!(subgoal_of(mv).unwrap(), SubGoal::MoveTo { cell: Cell::new(1, 2) });
        let pk = ops.iter().find(|o| o.name == "PickKey1").unwrap();
        assert_eq!(subgoal_of(pk).unwrap(), SubGoal::PickKey { id: 1 });
        let mut bogus = pk.clone();
        bogus.name = "Teleport".into();
        assert!(matches!(subgoal_of(&bogus), Err(HierarchyError::UnknownOperator(_))));
    }

    #[test]
    fn achievement_predicate() {
        let w = case("case1_default", 0.0);
        let ops = ground_operators(&w);
        let open = ops.iter().find(|o| o.name == "OpenDoor").unwrap();
        assert!(!achieved(&w, open, &w.reset()));
        let mv = ops.iter().find(|o| o.kind.is_move()).unwrap();
        let to = mv.kind.target();
        assert!(achieved(&w, mv, &w.state_at(to, Flags::new(2))));
        assert!(!achieved(&w, mv, &w.state_at(Cell::new(4, 4), Flags::new(2))));
    }

    #[test]
    fn scripted_run_succeeds_deterministically() {
        for name in ["case1_default", "case2_default"] {
            let w = case(name, 0.0);
            let t = run_episode(&w, &ScriptedPolicy, &ExecutorConfig::default(), 0);
            assert!(t.success, "{name}");
            assert_eq!(t.replans, 0);
            assert!(t.outcomes.iter().all(|o| o.outcome == Outcome::Achieved));
            assert!(w.success(&t.final_state));
        }
        let w = case("case1_default", 0.0);
        let t = run_episode(&w, &ScriptedPolicy, &ExecutorConfig::default(), 0);
        assert_eq!(t.steps(), 14);
    }

    #[test]
    fn unsolvable_instance_yields_empty_failed_trace() {
        let mut cfg = EnvConfig::case1_default().with_fail_prob(0.0);
        // wall off the key
        cfg.walls = vec![Cell::new(3, 0), Cell::new(4, 1)];
        let w = GridWorld::new(cfg).unwrap();
        let t = run_episode(&w, &ScriptedPolicy, &ExecutorConfig::default(), 0);
        assert_eq!(t.steps(), 0);
        assert!(!t.success);
    }

    #[test]
    fn lockstep_batch_matches_single_runs() {
        let w = case("case2_default", 0.2);
        let exec = ExecutorConfig::default();
        let batch = run_episodes(&w, &ScriptedPolicy, &exec, Decode::Greedy, 0..6);
        for t in &batch {
            assert_eq!(*t, run_episode(&w, &ScriptedPolicy, &exec, t.episode));
        }
    }

    #[test]
    fn trace_round_trip_and_invariants() {
        let w = case("case1_default", 0.3);
        let exec = ExecutorConfig { max_replans: 2, ..ExecutorConfig::default() };
        let traces = run_episodes(&w, &ScriptedPolicy, &exec, Decode::Greedy, 0..5);
        for t in &traces {
            assert!(t.replans <= 2);
            assert!(t.steps() <= w.config().max_steps);
            assert_eq!(t.success, w.success(&t.final_state));
            for o in t.outcomes.iter().filter(|o| o.outcome == Outcome::Achieved) {
                let state = if o.end_step < t.steps() { t.records[o.end_step].state } else { t.final_state };
                let op = ground_operators(&w).into_iter().find(|op| op.name == o.operator).unwrap();
                assert!(achieved(&w, &op, &state), "{} at step {}", o.operator, o.end_step);
            }
        }
        let mut buf = Vec::new();
        write_traces(&mut buf, &traces).unwrap();
        let back = read_traces(buf.as_slice()).unwrap();
        assert_eq!(back, traces);
    }
}
