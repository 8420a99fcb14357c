//! Propositional planning domain over the grid worlds.
//!
//! Symbolic states are sets of grounded propositions with exactly one `At`.
//! Operators carry explicit add and delete sets; the successor of `φ` under
//! `o` is `(φ \ del(o)) ∪ add(o)`. [`plan`] runs breadth-first search over
//! canonically ordered proposition sets when costs are uniform and
//! uniform-cost search otherwise.

use std::collections::{BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Action, CaseId, Cell, EnvState, GridWorld, Tile};

#[derive(Debug, Error, PartialEq)]
pub enum SymbolicError {
    #[error("operator {op} is not applicable: missing precondition {missing}")]
    Inapplicable { op: String, missing: String },
    #[error("symbolic state must contain exactly one At proposition, found {0}")]
    MalformedState(usize),
    #[error("goal is unreachable from the initial state")]
    Unsolvable,
    #[error("cannot parse proposition `{0}`")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Proposition {
    At(Cell),
    HasKey,
    HasKey1,
    HasKey2,
    DoorOpen,
    Door1Open,
    Door2Open,
    HasItem1,
    HasItem2,
}

impl Proposition {
    pub fn is_at(&self) -> bool {
        matches!(self, Proposition::At(_))
    }

    pub fn has_key(case: CaseId, id: u8) -> Self {
        match (case, id) {
            (CaseId::Single, _) => Proposition::HasKey,
            (CaseId::MultiGoal, 1) => Proposition::HasKey1,
            _ => Proposition::HasKey2,
        }
    }

    pub fn door_open(case: CaseId, id: u8) -> Self {
        match (case, id) {
            (CaseId::Single, _) => Proposition::DoorOpen,
            (CaseId::MultiGoal, 1) => Proposition::Door1Open,
            _ => Proposition::Door2Open,
        }
    }

    pub fn has_item(id: u8) -> Self {
        if id == 1 {
            Proposition::HasItem1
        } else {
            Proposition::HasItem2
        }
    }

    /// Proposition lifted from flag `index` of the given case.
    pub fn for_flag(case: CaseId, index: usize) -> Self {
        match case {
            CaseId::Single => [Proposition::HasKey, Proposition::DoorOpen][index],
            CaseId::MultiGoal => [
                Proposition::HasKey1,
                Proposition::HasKey2,
                Proposition::Door1Open,
                Proposition::Door2Open,
                Proposition::HasItem1,
                Proposition::HasItem2,
            ][index],
        }
    }
}

impl fmt::Display for Proposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Proposition::At(c) => write!(f, "At({c})"),
            other => write!(f, "{other:?}"),
        }
    }
}

impl FromStr for Proposition {
    type Err = SymbolicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || SymbolicError::Parse(s.to_string());
        if let Some(inner) = s.strip_prefix("At(").and_then(|r| r.strip_suffix(')')) {
            let (r, c) = inner.split_once(',').ok_or_else(err)?;
            let row = r.trim().parse().map_err(|_| err())?;
            let col = c.trim().parse().map_err(|_| err())?;
            return Ok(Proposition::At(Cell::new(row, col)));
        }
        Ok(match s {
            "HasKey" => Proposition::HasKey,
            "HasKey1" => Proposition::HasKey1,
            "HasKey2" => Proposition::HasKey2,
            "DoorOpen" => Proposition::DoorOpen,
            "Door1Open" => Proposition::Door1Open,
            "Door2Open" => Proposition::Door2Open,
            "HasItem1" => Proposition::HasItem1,
            "HasItem2" => Proposition::HasItem2,
            _ => return Err(err()),
        })
    }
}

impl Serialize for Proposition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Proposition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A set of propositions. `BTreeSet` keeps a canonical order, so equal sets
/// hash and compare identically.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SymbolicState {
    pub props: BTreeSet<Proposition>,
}

impl SymbolicState {
    pub fn new(props: impl IntoIterator<Item = Proposition>) -> Self {
        Self { props: props.into_iter().collect() }
    }

    pub fn contains(&self, p: &Proposition) -> bool {
        self.props.contains(p)
    }

    pub fn at(&self) -> Option<Cell> {
        self.props.iter().find_map(|p| match p {
            Proposition::At(c) => Some(*c),
            _ => None,
        })
    }

    pub fn at_count(&self) -> usize {
        self.props.iter().filter(|p| p.is_at()).count()
    }

    pub fn satisfies(&self, props: &BTreeSet<Proposition>) -> bool {
        props.is_subset(&self.props)
    }
}

impl fmt::Display for SymbolicState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.props.iter().map(ToString::to_string).collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

/// Abstraction map: the agent's cell plus one proposition per true flag.
pub fn abstract_state(world: &GridWorld, state: &EnvState) -> SymbolicState {
    let case = world.case();
    let mut props = BTreeSet::new();
    props.insert(Proposition::At(state.cell()));
    for (i, on) in state.flags.iter().enumerate() {
        if on {
            props.insert(Proposition::for_flag(case, i));
        }
    }
    SymbolicState { props }
}

/// Grounding of an operator; used for tie-breaking and for the sub-goal map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OperatorKind {
    Move { from: Cell, to: Cell },
    PickKey { id: u8, cell: Cell },
    OpenDoor { id: u8, cell: Cell },
    PickItem { id: u8, cell: Cell },
}

impl OperatorKind {
    /// Cell where the operator's effect is realized.
    pub fn target(&self) -> Cell {
        match *self {
            OperatorKind::Move { to, .. } => to,
            OperatorKind::PickKey { cell, .. }
            | OperatorKind::OpenDoor { cell, .. }
            | OperatorKind::PickItem { cell, .. } => cell,
        }
    }

    pub fn is_move(&self) -> bool {
        matches!(self, OperatorKind::Move { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Operator {
    pub name: String,
    pub kind: OperatorKind,
    pub pre: BTreeSet<Proposition>,
    pub add: BTreeSet<Proposition>,
    pub del: BTreeSet<Proposition>,
    pub cost: f64,
}

impl Operator {
    /// Name without grounding arguments, e.g. `Move` or `PickKey1`.
    pub fn base_name(&self) -> &str {
        self.name.split('(').next().unwrap_or(&self.name)
    }

    fn sort_key(&self) -> (&str, Vec<Cell>) {
        let cells = match self.kind {
            OperatorKind::Move { from, to } => vec![from, to],
            other => vec![other.target()],
        };
        (self.base_name(), cells)
    }

    pub fn is_applicable(&self, state: &SymbolicState) -> bool {
        state.satisfies(&self.pre)
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

fn key_op_name(case: CaseId, stem: &str, id: u8) -> String {
    match case {
        CaseId::Single => stem.to_string(),
        CaseId::MultiGoal => format!("{stem}{id}"),
    }
}

/// Grounds the operator set for a world, sorted in tie-break order
/// (base name, then grounding cells).
pub fn ground_operators(world: &GridWorld) -> Vec<Operator> {
    let case = world.case();
    let cfg = world.config();
    let mut ops = Vec::new();
    let one = |p: Proposition| BTreeSet::from([p]);

    for from in world.open_cells() {
        for action in Action::MOVES {
            let (dr, dc) = action.delta();
            let (r, c) = (from.row as isize + dr, from.col as isize + dc);
            if !world.in_grid(r, c) {
                continue;
            }
            let to = Cell::new(r as usize, c as usize);
            if world.tile(to) == Tile::Wall {
                continue;
            }
            let mut pre = one(Proposition::At(from));
            if let Tile::Door(id) = world.tile(from) {
                pre.insert(Proposition::door_open(case, id));
            }
            if let Tile::Door(id) = world.tile(to) {
                if cfg.door_blocks_entry {
                    pre.insert(Proposition::has_key(case, id));
                }
            }
            ops.push(Operator {
                name: format!("Move({from}->{to})"),
                kind: OperatorKind::Move { from, to },
                pre,
                add: one(Proposition::At(to)),
                del: one(Proposition::At(from)),
                cost: 1.0,
            });
        }
    }
    for &id in case.key_ids() {
        let cell = cfg.key_cell(id).expect("validated layout has every key");
        ops.push(Operator {
            name: key_op_name(case, "PickKey", id),
            kind: OperatorKind::PickKey { id, cell },
            pre: one(Proposition::At(cell)),
            add: one(Proposition::has_key(case, id)),
            del: BTreeSet::new(),
            cost: 1.0,
        });
        let door = cfg.door_cell(id).expect("validated layout has every door");
        ops.push(Operator {
            name: key_op_name(case, "OpenDoor", id),
            kind: OperatorKind::OpenDoor { id, cell: door },
            pre: BTreeSet::from([Proposition::At(door), Proposition::has_key(case, id)]),
            add: one(Proposition::door_open(case, id)),
            del: BTreeSet::new(),
            cost: 1.0,
        });
    }
    for &id in case.item_ids() {
        let cell = cfg.item_cell(id).expect("validated layout has every item");
        ops.push(Operator {
            name: format!("PickItem{id}"),
            kind: OperatorKind::PickItem { id, cell },
            pre: one(Proposition::At(cell)),
            add: one(Proposition::has_item(id)),
            del: BTreeSet::new(),
            cost: 1.0,
        });
    }
    ops.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    ops
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub goal_props: BTreeSet<Proposition>,
}

impl GoalSpec {
    pub fn new(goal_props: impl IntoIterator<Item = Proposition>) -> Self {
        let goal_props: BTreeSet<_> = goal_props.into_iter().collect();
        assert!(!goal_props.is_empty(), "goal specification must be nonempty");
        Self { goal_props }
    }

    /// The success condition of the world, expressed symbolically.
    pub fn for_world(world: &GridWorld) -> Self {
        let case = world.case();
        let mut props = vec![Proposition::At(world.config().goal())];
        match case {
            CaseId::Single => props.push(Proposition::DoorOpen),
            CaseId::MultiGoal => props.extend(case.item_ids().iter().map(|&i| Proposition::has_item(i))),
        }
        Self::new(props)
    }

    pub fn is_satisfied(&self, state: &SymbolicState) -> bool {
        state.satisfies(&self.goal_props)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub ops: Vec<Operator>,
    pub total_cost: f64,
}

impl Plan {
    pub fn empty() -> Self {
        Self { ops: Vec::new(), total_cost: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.ops.iter().map(|o| o.name.as_str()).collect()
    }

    /// Applies every operator in order.
    pub fn replay(&self, initial: &SymbolicState) -> Result<SymbolicState, SymbolicError> {
        self.ops.iter().try_fold(initial.clone(), |s, op| apply(&s, op))
    }
}

/// Successor `(props \ del) ∪ add`, failing if a precondition is missing.
pub fn apply(state: &SymbolicState, op: &Operator) -> Result<SymbolicState, SymbolicError> {
    if let Some(missing) = op.pre.iter().find(|p| !state.contains(p)) {
        return Err(SymbolicError::Inapplicable { op: op.name.clone(), missing: missing.to_string() });
    }
    Ok(successor(state, op))
}

fn successor(state: &SymbolicState, op: &Operator) -> SymbolicState {
    let mut props: BTreeSet<Proposition> = state.props.difference(&op.del).copied().collect();
    props.extend(op.add.iter().copied());
    SymbolicState { props }
}

/// Operator indices grouped by the `At` cell in their precondition. Every
/// grounded operator requires exactly one position, so expansion only scans
/// the bucket of the current cell plus position-free operators.
struct OperatorIndex {
    by_cell: HashMap<Cell, Vec<usize>>,
    unplaced: Vec<usize>,
}

impl OperatorIndex {
    fn new(ops: &[Operator]) -> Self {
        let mut by_cell: HashMap<Cell, Vec<usize>> = HashMap::new();
        let mut unplaced = Vec::new();
        for (i, op) in ops.iter().enumerate() {
            match op.pre.iter().find_map(|p| match p {
                Proposition::At(c) => Some(*c),
                _ => None,
            }) {
                Some(c) => by_cell.entry(c).or_default().push(i),
                None => unplaced.push(i),
            }
        }
        Self { by_cell, unplaced }
    }

    /// Applicable operator indices in ascending (tie-break) order.
    fn applicable(&self, ops: &[Operator], state: &SymbolicState) -> Vec<usize> {
        let mut out: Vec<usize> = state
            .at()
            .and_then(|c| self.by_cell.get(&c))
            .into_iter()
            .flatten()
            .chain(self.unplaced.iter())
            .copied()
            .filter(|&i| ops[i].is_applicable(state))
            .collect();
        out.sort_unstable();
        out
    }
}

/// Minimum-cost plan from `initial` to any state containing the goal set.
///
/// Operators are expanded in the order given; [`ground_operators`] returns
/// them sorted, which fixes tie-breaking among equal-cost plans.
pub fn plan(initial: &SymbolicState, goal: &GoalSpec, ops: &[Operator]) -> Result<Plan, SymbolicError> {
    let at = initial.at_count();
    if at != 1 {
        return Err(SymbolicError::MalformedState(at));
    }
    if goal.is_satisfied(initial) {
        return Ok(Plan::empty());
    }
    let uniform = ops.windows(2).all(|w| w[0].cost == w[1].cost);
    let index = OperatorIndex::new(ops);
    let path = if uniform {
        breadth_first(initial, goal, ops, &index)
    } else {
        uniform_cost(initial, goal, ops, &index)
    };
    let path = path.ok_or(SymbolicError::Unsolvable)?;
    let ops: Vec<Operator> = path.into_iter().map(|i| ops[i].clone()).collect();
    let total_cost = ops.iter().map(|o| o.cost).sum();
    Ok(Plan { ops, total_cost })
}

struct SearchTree {
    nodes: Vec<SymbolicState>,
    parent: Vec<Option<(usize, usize)>>,
    seen: HashMap<SymbolicState, usize>,
}

impl SearchTree {
    fn new(root: &SymbolicState) -> Self {
        let mut seen = HashMap::new();
        seen.insert(root.clone(), 0);
        Self { nodes: vec![root.clone()], parent: vec![None], seen }
    }

    fn extract(&self, mut node: usize) -> Vec<usize> {
        let mut path = Vec::new();
        while let Some((prev, op)) = self.parent[node] {
            path.push(op);
            node = prev;
        }
        path.reverse();
        path
    }
}

fn breadth_first(
    initial: &SymbolicState,
    goal: &GoalSpec,
    ops: &[Operator],
    index: &OperatorIndex,
) -> Option<Vec<usize>> {
    let mut tree = SearchTree::new(initial);
    let mut queue = VecDeque::from([0usize]);
    while let Some(node) = queue.pop_front() {
        let state = tree.nodes[node].clone();
        for op in index.applicable(ops, &state) {
            let next = successor(&state, &ops[op]);
            if tree.seen.contains_key(&next) {
                continue;
            }
            let id = tree.nodes.len();
            tree.seen.insert(next.clone(), id);
            tree.parent.push(Some((node, op)));
            let done = goal.is_satisfied(&next);
            tree.nodes.push(next);
            if done {
                return Some(tree.extract(id));
            }
            queue.push_back(id);
        }
    }
    None
}

#[derive(PartialEq)]
struct Frontier {
    cost: f64,
    order: usize,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (cost, insertion order)
        other.cost.total_cmp(&self.cost).then_with(|| other.order.cmp(&self.order))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn uniform_cost(
    initial: &SymbolicState,
    goal: &GoalSpec,
    ops: &[Operator],
    index: &OperatorIndex,
) -> Option<Vec<usize>> {
    let mut tree = SearchTree::new(initial);
    let mut best = vec![0.0f64];
    let mut closed = vec![false];
    let mut heap = BinaryHeap::from([Frontier { cost: 0.0, order: 0, node: 0 }]);
    let mut order = 1;
    while let Some(Frontier { cost, node, .. }) = heap.pop() {
        if closed[node] || cost > best[node] {
            continue;
        }
        closed[node] = true;
        let state = tree.nodes[node].clone();
        if goal.is_satisfied(&state) {
            return Some(tree.extract(node));
        }
        for op in index.applicable(ops, &state) {
            let next = successor(&state, &ops[op]);
            let c = cost + ops[op].cost;
            let id = match tree.seen.get(&next) {
                Some(&id) if closed[id] || c >= best[id] => continue,
                Some(&id) => {
                    best[id] = c;
                    tree.parent[id] = Some((node, op));
                    id
                }
                None => {
                    let id = tree.nodes.len();
                    tree.seen.insert(next.clone(), id);
                    tree.nodes.push(next);
                    tree.parent.push(Some((node, op)));
                    best.push(c);
                    closed.push(false);
                    id
                }
            };
            heap.push(Frontier { cost: c, order, node: id });
            order += 1;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{EnvConfig, Flags};

    fn case1() -> GridWorld {
        GridWorld::new(EnvConfig::case1_default()).unwrap()
    }

    #[test]
    fn abstraction_of_initial_state() {
        let w = case1();
        let phi = abstract_state(&w, &w.reset());
        assert_eq!(phi, SymbolicState::new([Proposition::At(Cell::new(0, 0))]));
    }

    #[test]
    fn abstraction_lifts_flags() {
        let w = case1();
        let s = w.state_at(w.config().goal(), Flags::from_bits(0b11, 2));
        let phi = abstract_state(&w, &s);
        assert_eq!(
            phi,
            SymbolicState::new([
                Proposition::At(w.config().goal()),
                Proposition::HasKey,
                Proposition::DoorOpen
            ])
        );
    }

    #[test]
    fn proposition_text_round_trip() {
        for p in [Proposition::At(Cell::new(3, 12)), Proposition::Door2Open, Proposition::HasKey] {
            assert_eq!(p.to_string().parse::<Proposition>().unwrap(), p);
        }
        assert!("At(1)".parse::<Proposition>().is_err());
    }

    #[test]
    fn case1_operator_count() {
        let w = case1();
        let ops = ground_operators(&w);
        // ordered adjacent pairs on an open 5x5 grid: 2 * (2 * 5 * 4)
        let mut pairs = 0;
        for a in w.cells() {
            for b in w.cells() {
                if a.manhattan(b) == 1 {
                    pairs += 1;
                }
            }
        }
        assert_eq!(pairs, 80);
        assert_eq!(ops.len(), pairs + 2);
        assert!(ops.iter().all(|o| o.add.is_disjoint(&o.del)));
    }

    #[test]
    fn open_door_requires_key() {
        let ops = ground_operators(&case1());
        let open = ops.iter().find(|o| o.name == "OpenDoor").unwrap();
        assert!(open.pre.contains(&Proposition::HasKey));
    }

    #[test]
    fn moves_out_of_door_are_gated() {
        let w = case1();
        let door = w.config().door_cell(1).unwrap();
        for op in ground_operators(&w) {
            if let OperatorKind::Move { from, .. } = op.kind {
                assert_eq!(op.pre.contains(&Proposition::DoorOpen), from == door, "{}", op.name);
            }
        }
    }

    #[test]
    fn apply_move_and_pick() {
        let w = case1();
        let ops = ground_operators(&w);
        let mv = ops.iter().find(|o| o.name == "Move(0,0->1,0)").unwrap();
        let s = SymbolicState::new([Proposition::At(Cell::new(0, 0))]);
        assert_eq!(apply(&s, mv).unwrap(), SymbolicState::new([Proposition::At(Cell::new(1, 0))]));

        let pick = ops.iter().find(|o| o.name == "PickKey").unwrap();
        let on_key = SymbolicState::new([Proposition::At(Cell::new(4, 0))]);
        let after = apply(&on_key, pick).unwrap();
        assert!(after.contains(&Proposition::HasKey));
        assert!(matches!(apply(&s, pick), Err(SymbolicError::Inapplicable { .. })));
    }

    #[test]
    fn goal_already_satisfied_gives_empty_plan() {
        let w = case1();
        let g = GoalSpec::for_world(&w);
        let s = SymbolicState::new([Proposition::At(w.config().goal()), Proposition::DoorOpen]);
        let p = plan(&s, &g, &ground_operators(&w)).unwrap();
        assert!(p.is_empty());
        assert_eq!(p.total_cost, 0.0);
    }

    #[test]
    fn case1_plan_replays_to_goal() {
        let w = case1();
        let ops = ground_operators(&w);
        let g = GoalSpec::for_world(&w);
        let s0 = abstract_state(&w, &w.reset());
        let p = plan(&s0, &g, &ops).unwrap();
        // 4 down, pick, 2 up + 4 right (6), open, 2 up
        assert_eq!(p.total_cost, 14.0);
        assert!(g.is_satisfied(&p.replay(&s0).unwrap()));
        let names = p.names();
        let pick = names.iter().position(|n| *n == "PickKey").unwrap();
        let open = names.iter().position(|n| *n == "OpenDoor").unwrap();
        assert!(pick < open);
    }

    #[test]
    fn case2_plan_orders_keys_and_doors() {
        let w = GridWorld::preset("case2_default").unwrap();
        let ops = ground_operators(&w);
        let s0 = abstract_state(&w, &w.reset());
        let p = plan(&s0, &GoalSpec::for_world(&w), &ops).unwrap();
        let pos = |name: &str| p.names().iter().position(|n| *n == name).unwrap();
        assert!(pos("PickKey1") < pos("OpenDoor1"));
        assert!(pos("OpenDoor1") < pos("PickKey2"));
        assert!(pos("PickKey2") < pos("OpenDoor2"));
        assert!(pos("OpenDoor2") < pos("PickItem1"));
        assert!(pos("OpenDoor2") < pos("PickItem2"));
    }

    #[test]
    fn unsolvable_without_operators() {
        let w = case1();
        let s0 = abstract_state(&w, &w.reset());
        assert_eq!(plan(&s0, &GoalSpec::for_world(&w), &[]), Err(SymbolicError::Unsolvable));
    }

    #[test]
    fn malformed_initial_state_is_rejected() {
        let w = case1();
        let s = SymbolicState::new([Proposition::HasKey]);
        assert_eq!(
            plan(&s, &GoalSpec::for_world(&w), &ground_operators(&w)),
            Err(SymbolicError::MalformedState(0))
        );
    }

    #[test]
    fn uniform_cost_search_agrees_with_bfs() {
        let w = GridWorld::preset("case2_default").unwrap();
        let mut ops = ground_operators(&w);
        let s0 = abstract_state(&w, &w.reset());
        let g = GoalSpec::for_world(&w);
        let bfs = plan(&s0, &g, &ops).unwrap();
        // make costs non-uniform without changing relative order of plans
        ops[0].cost = 1.0 + 1e-9;
        let ucs = plan(&s0, &g, &ops).unwrap();
        assert!((bfs.total_cost - ucs.total_cost).abs() < 1e-6);
        assert!(g.is_satisfied(&ucs.replay(&s0).unwrap()));
    }

    #[test]
    fn plan_serializes_as_named_operators() {
        let w = case1();
        let s0 = abstract_state(&w, &w.reset());
        let p = plan(&s0, &GoalSpec::for_world(&w), &ground_operators(&w)).unwrap();
        let json = serde_json::to_value(&p).unwrap();
        assert_eq!(json["ops"][0]["name"], "Move(0,0->1,0)");
        let back: Plan = serde_json::from_value(json).unwrap();
        assert_eq!(back, p);
    }
}
