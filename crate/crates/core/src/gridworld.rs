//! Stochastic key–door grid worlds.
//!
//! Two families share one engine: the single key–door world (one key, one
//! door, one goal) and the multi-goal world (two keys, two doors, two items
//! and an exit). Movement actions fail with probability `fail_prob`, leaving
//! the agent in place; the pick/open action always succeeds.
//!
//! A door only blocks movement *out of* its cell while closed. The
//! `door_blocks_entry` switch additionally forbids entering a closed door
//! cell without the matching key.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

const CASE1_DEFAULT: &str = include_str!("../presets/case1_default.json");
const CASE2_DEFAULT: &str = include_str!("../presets/case2_default.json");

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment configuration: {0}")]
    InvalidConfig(String),
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("unknown preset `{0}` (expected case1_default or case2_default)")]
    UnknownPreset(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Grid coordinate, serialized as `[row, col]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }
}

impl From<[usize; 2]> for Cell {
    fn from([row, col]: [usize; 2]) -> Self {
        Self { row, col }
    }
}

impl From<Cell> for [usize; 2] {
    fn from(c: Cell) -> Self {
        [c.row, c.col]
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.row, self.col)
    }
}

/// The five primitive actions. Integer codes are stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Action {
    Up = 0,
    Right = 1,
    Down = 2,
    Left = 3,
    PickOpen = 4,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [
        Action::Up,
        Action::Right,
        Action::Down,
        Action::Left,
        Action::PickOpen,
    ];
    pub const MOVES: [Action; 4] = [Action::Up, Action::Right, Action::Down, Action::Left];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Action> {
        Self::ALL.get(code).copied()
    }

    pub fn is_move(self) -> bool {
        self != Action::PickOpen
    }

    /// Row/column offset of a movement action.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Right => (0, 1),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::PickOpen => (0, 0),
        }
    }
}

impl From<Action> for u8 {
    fn from(a: Action) -> u8 {
        a as u8
    }
}

impl TryFrom<u8> for Action {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Action::from_code(v as usize).ok_or_else(|| format!("action code {v} out of range 0..5"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseId {
    Single,
    MultiGoal,
}

impl CaseId {
    pub fn flag_count(self) -> usize {
        match self {
            CaseId::Single => 2,
            CaseId::MultiGoal => 6,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            CaseId::Single => "simple",
            CaseId::MultiGoal => "complex",
        }
    }

    pub fn key_ids(self) -> &'static [u8] {
        match self {
            CaseId::Single => &[1],
            CaseId::MultiGoal => &[1, 2],
        }
    }

    pub fn item_ids(self) -> &'static [u8] {
        match self {
            CaseId::Single => &[],
            CaseId::MultiGoal => &[1, 2],
        }
    }

    /// Flag index holding possession of key `id`.
    pub fn key_flag(self, id: u8) -> usize {
        match self {
            CaseId::Single => 0,
            CaseId::MultiGoal => (id - 1) as usize,
        }
    }

    pub fn door_flag(self, id: u8) -> usize {
        match self {
            CaseId::Single => 1,
            CaseId::MultiGoal => 2 + (id - 1) as usize,
        }
    }

    pub fn item_flag(self, id: u8) -> usize {
        match self {
            CaseId::Single => panic!("single key-door world has no items"),
            CaseId::MultiGoal => 4 + (id - 1) as usize,
        }
    }

    pub fn flag_names(self) -> &'static [&'static str] {
        match self {
            CaseId::Single => &["hasKey", "doorOpen"],
            CaseId::MultiGoal => &[
                "hasK1",
                "hasK2",
                "door1Open",
                "door2Open",
                "item1Collected",
                "item2Collected",
            ],
        }
    }

    fn required_roles(self) -> &'static [Role] {
        match self {
            CaseId::Single => &[Role::AgentStart, Role::Key1, Role::Door1, Role::Goal],
            CaseId::MultiGoal => &Role::ALL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    AgentStart,
    Key1,
    Key2,
    Door1,
    Door2,
    Item1,
    Item2,
    Goal,
}

impl Role {
    pub const ALL: [Role; 8] = [
        Role::AgentStart,
        Role::Key1,
        Role::Key2,
        Role::Door1,
        Role::Door2,
        Role::Item1,
        Role::Item2,
        Role::Goal,
    ];
}

/// Ordered boolean flags stored as a bitmask; serialized as a list of bools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "Vec<bool>", into = "Vec<bool>")]
pub struct Flags {
    bits: u8,
    len: u8,
}

impl Flags {
    pub fn new(len: usize) -> Self {
        assert!(len <= 8);
        Self { bits: 0, len: len as u8 }
    }

    pub fn len(self) -> usize {
        self.len as usize
    }

    pub fn is_empty(self) -> bool {
        self.len == 0
    }

    pub fn get(self, i: usize) -> bool {
        debug_assert!(i < self.len());
        self.bits & (1 << i) != 0
    }

    pub fn set(&mut self, i: usize) {
        debug_assert!(i < self.len());
        self.bits |= 1 << i;
    }

    pub fn bits(self) -> u8 {
        self.bits
    }

    pub fn from_bits(bits: u8, len: usize) -> Self {
        Self { bits: bits & ((1u16 << len) - 1) as u8, len: len as u8 }
    }

    pub fn iter(self) -> impl Iterator<Item = bool> {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// True when every flag set in `self` is also set in `later`.
    pub fn is_subset_of(self, later: Flags) -> bool {
        self.bits & !later.bits == 0
    }
}

impl From<Vec<bool>> for Flags {
    fn from(v: Vec<bool>) -> Self {
        let mut f = Flags::new(v.len());
        for (i, b) in v.into_iter().enumerate() {
            if b {
                f.set(i);
            }
        }
        f
    }
}

impl From<Flags> for Vec<bool> {
    fn from(f: Flags) -> Self {
        f.iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EnvState {
    pub row: usize,
    pub col: usize,
    pub flags: Flags,
}

impl EnvState {
    pub fn cell(&self) -> Cell {
        Cell::new(self.row, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub case_id: CaseId,
    pub width: usize,
    pub height: usize,
    pub fail_prob: f64,
    pub step_penalty: f64,
    pub success_reward: f64,
    pub layout: BTreeMap<Role, Cell>,
    #[serde(default)]
    pub walls: Vec<Cell>,
    #[serde(default)]
    pub door_blocks_entry: bool,
    pub max_steps: usize,
    pub seed: u64,
}

fn default_schema_version() -> u32 {
    CONFIG_SCHEMA_VERSION
}

impl EnvConfig {
    pub fn case1_default() -> Self {
        serde_json::from_str(CASE1_DEFAULT).expect("embedded case1 preset is valid JSON")
    }

    pub fn case2_default() -> Self {
        serde_json::from_str(CASE2_DEFAULT).expect("embedded case2 preset is valid JSON")
    }

    pub fn preset(name: &str) -> Result<Self, EnvError> {
        match name {
            "case1_default" | "case1" | "simple" => Ok(Self::case1_default()),
            "case2_default" | "case2" | "complex" => Ok(Self::case2_default()),
            other => Err(EnvError::UnknownPreset(other.to_string())),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn with_fail_prob(mut self, fail_prob: f64) -> Self {
        self.fail_prob = fail_prob;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn role(&self, role: Role) -> Option<Cell> {
        self.layout.get(&role).copied()
    }

    pub fn start(&self) -> Cell {
        self.layout[&Role::AgentStart]
    }

    pub fn goal(&self) -> Cell {
        self.layout[&Role::Goal]
    }

    pub fn key_cell(&self, id: u8) -> Option<Cell> {
        self.role(if id == 1 { Role::Key1 } else { Role::Key2 })
    }

    pub fn door_cell(&self, id: u8) -> Option<Cell> {
        self.role(if id == 1 { Role::Door1 } else { Role::Door2 })
    }

    pub fn item_cell(&self, id: u8) -> Option<Cell> {
        self.role(if id == 1 { Role::Item1 } else { Role::Item2 })
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::InvalidConfig(msg));
        if self.width == 0 || self.height == 0 {
            return bad("grid must have positive width and height".into());
        }
        if !(0.0..=1.0).contains(&self.fail_prob) || self.fail_prob.is_nan() {
            return bad(format!("fail_prob {} outside [0, 1]", self.fail_prob));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        let inside = |c: Cell| c.row < self.height && c.col < self.width;
        for role in self.case_id.required_roles() {
            if !self.layout.contains_key(role) {
                return bad(format!("layout is missing role {role:?}"));
            }
        }
        for (role, cell) in &self.layout {
            if !self.case_id.required_roles().contains(role) {
                return bad(format!("role {role:?} is not used by case {:?}", self.case_id));
            }
            if !inside(*cell) {
                return bad(format!("{role:?} cell {cell} lies outside the grid"));
            }
        }
        let mut cells: Vec<Cell> = self.layout.values().copied().collect();
        cells.sort();
        if cells.windows(2).any(|w| w[0] == w[1]) {
            return bad("entity cells must be pairwise distinct".into());
        }
        for w in &self.walls {
            if !inside(*w) {
                return bad(format!("wall {w} lies outside the grid"));
            }
            if self.layout.values().any(|c| c == w) {
                return bad(format!("wall {w} overlaps an entity"));
            }
        }
        Ok(())
    }
}

/// Static content of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tile {
    Floor,
    Wall,
    Key(u8),
    Door(u8),
    Item(u8),
    Goal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepInfo {
    Moved,
    MoveFailed,
    MoveBlocked,
    Picked,
    Opened,
    Collected,
    NoOp,
    GoalReached,
    TimeOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// A validated world: configuration plus a compiled tile map.
#[derive(Debug, Clone)]
pub struct GridWorld {
    config: EnvConfig,
    tiles: Vec<Tile>,
}

impl GridWorld {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let mut tiles = vec![Tile::Floor; config.width * config.height];
        let idx = |c: Cell| c.row * config.width + c.col;
        for w in &config.walls {
            tiles[idx(*w)] = Tile::Wall;
        }
        for (role, cell) in &config.layout {
            let tile = match role {
                Role::AgentStart => continue,
                Role::Key1 => Tile::Key(1),
                Role::Key2 => Tile::Key(2),
                Role::Door1 => Tile::Door(1),
                Role::Door2 => Tile::Door(2),
                Role::Item1 => Tile::Item(1),
                Role::Item2 => Tile::Item(2),
                Role::Goal => Tile::Goal,
            };
            tiles[idx(*cell)] = tile;
        }
        Ok(Self { config, tiles })
    }

    pub fn preset(name: &str) -> Result<Self, EnvError> {
        Self::new(EnvConfig::preset(name)?)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn case(&self) -> CaseId {
        self.config.case_id
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn flag_count(&self) -> usize {
        self.config.case_id.flag_count()
    }

    pub fn tile(&self, cell: Cell) -> Tile {
        self.tiles[cell.row * self.config.width + cell.col]
    }

    pub fn in_grid(&self, row: isize, col: isize) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.config.height && (col as usize) < self.config.width
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        let w = self.config.width;
        (0..self.config.height * w).map(move |i| Cell::new(i / w, i % w))
    }

    /// Every non-wall cell in row-major order.
    pub fn open_cells(&self) -> Vec<Cell> {
        self.cells().filter(|c| self.tile(*c) != Tile::Wall).collect()
    }

    /// Initial state: agent at its start cell with every flag cleared.
    pub fn reset(&self) -> EnvState {
        let s = self.config.start();
        EnvState { row: s.row, col: s.col, flags: Flags::new(self.flag_count()) }
    }

    pub fn state_at(&self, cell: Cell, flags: Flags) -> EnvState {
        EnvState { row: cell.row, col: cell.col, flags }
    }

    pub fn is_valid_state(&self, s: &EnvState) -> bool {
        s.row < self.config.height
            && s.col < self.config.width
            && s.flags.len() == self.flag_count()
            && self.tile(s.cell()) != Tile::Wall
    }

    pub fn success(&self, s: &EnvState) -> bool {
        let case = self.case();
        if s.cell() != self.config.goal() {
            return false;
        }
        match case {
            CaseId::Single => s.flags.get(case.door_flag(1)),
            CaseId::MultiGoal => case.item_ids().iter().all(|&id| s.flags.get(case.item_flag(id))),
        }
    }

    /// Whether the closed door on `from` (if any) forbids leaving it.
    fn exit_blocked(&self, from: &EnvState) -> bool {
        match self.tile(from.cell()) {
            Tile::Door(id) => !from.flags.get(self.case().door_flag(id)),
            _ => false,
        }
    }

    /// Destination of a movement attempt that does not fail, or `None` if
    /// the move is blocked by the border, a wall, or a closed door.
    pub fn move_target(&self, s: &EnvState, action: Action) -> Option<Cell> {
        let (dr, dc) = action.delta();
        let (r, c) = (s.row as isize + dr, s.col as isize + dc);
        if !self.in_grid(r, c) {
            return None;
        }
        let to = Cell::new(r as usize, c as usize);
        if self.exit_blocked(s) {
            return None;
        }
        match self.tile(to) {
            Tile::Wall => None,
            Tile::Door(id) if self.config.door_blocks_entry => {
                let case = self.case();
                let open = s.flags.get(case.door_flag(id));
                let has_key = s.flags.get(case.key_flag(id));
                (open || has_key).then_some(to)
            }
            _ => Some(to),
        }
    }

    /// Effect of the pick/open action on state `s`.
    fn actuate(&self, s: &EnvState) -> (Flags, StepInfo) {
        let case = self.case();
        let mut flags = s.flags;
        let info = match self.tile(s.cell()) {
            Tile::Key(id) if !flags.get(case.key_flag(id)) => {
                flags.set(case.key_flag(id));
                StepInfo::Picked
            }
            Tile::Door(id)
                if flags.get(case.key_flag(id)) && !flags.get(case.door_flag(id)) =>
            {
                flags.set(case.door_flag(id));
                StepInfo::Opened
            }
            Tile::Item(id) if !flags.get(case.item_flag(id)) => {
                flags.set(case.item_flag(id));
                StepInfo::Collected
            }
            _ => StepInfo::NoOp,
        };
        (flags, info)
    }

    /// One transition given a uniform draw in `[0, 1)` for movement failure.
    ///
    /// Does not handle the step limit; see [`Episode`]. The draw is ignored
    /// for the pick/open action.
    pub fn transition(&self, s: &EnvState, action: Action, draw: f64) -> StepResult {
        let (next, mut info) = if action.is_move() {
            if draw < self.config.fail_prob {
                (*s, StepInfo::MoveFailed)
            } else {
                match self.move_target(s, action) {
                    Some(to) => (self.state_at(to, s.flags), StepInfo::Moved),
                    None => (*s, StepInfo::MoveBlocked),
                }
            }
        } else {
            let (flags, info) = self.actuate(s);
            (EnvState { flags, ..*s }, info)
        };
        let mut reward = self.config.step_penalty;
        let done = self.success(&next);
        if done {
            reward += self.config.success_reward;
            info = StepInfo::GoalReached;
        }
        StepResult { next_state: next, reward, done, info }
    }

    /// Successor with movement forced to succeed. A draw of 1.0 is never
    /// below `fail_prob`, since `fail_prob <= 1`.
    pub fn deterministic_step(&self, s: &EnvState, action: Action) -> StepResult {
        self.transition(s, action, 1.0)
    }

    /// Starts episode `index` with an RNG stream keyed by `(seed, index)`.
    pub fn episode(&self, index: u64) -> Episode<'_> {
        Episode::new(self, index)
    }

    /// Plain-text rendering of the grid with the agent marked `A`.
    pub fn render(&self, s: &EnvState) -> String {
        let mut out = String::new();
        for r in 0..self.height() {
            for c in 0..self.width() {
                let cell = Cell::new(r, c);
                let ch = if cell == s.cell() {
                    'A'
                } else {
                    match self.tile(cell) {
                        Tile::Floor => '.',
                        Tile::Wall => '#',
                        Tile::Key(1) => 'k',
                        Tile::Key(_) => 'K',
                        Tile::Door(1) => 'd',
                        Tile::Door(_) => 'D',
                        Tile::Item(1) => 'i',
                        Tile::Item(_) => 'I',
                        Tile::Goal => 'G',
                    }
                };
                out.push(ch);
            }
            out.push('\n');
        }
        let flags: Vec<String> = self
            .case()
            .flag_names()
            .iter()
            .zip(s.flags.iter())
            .map(|(n, v)| format!("{n}={v}"))
            .collect();
        out.push_str(&flags.join(" "));
        out.push('\n');
        out
    }
}

/// RNG for episode `index` of a run seeded with `seed`.
///
/// ChaCha is counter based, so each `(seed, stream)` pair is an independent,
/// replayable stream.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// A running episode: current state, step counter and movement RNG.
#[derive(Debug, Clone)]
pub struct Episode<'w> {
    world: &'w GridWorld,
    state: EnvState,
    steps: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl<'w> Episode<'w> {
    pub fn new(world: &'w GridWorld, index: u64) -> Self {
        Self {
            world,
            state: world.reset(),
            steps: 0,
            done: false,
            rng: episode_rng(world.config.seed, index),
        }
    }

    pub fn world(&self) -> &'w GridWorld {
        self.world
    }

    pub fn state(&self) -> EnvState {
        self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Steps with one RNG draw per movement attempt.
    pub fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        let draw = if action.is_move() { self.rng.gen::<f64>() } else { 0.0 };
        self.step_with_draw(action, draw)
    }

    pub fn step_with_draw(&mut self, action: Action, draw: f64) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let mut r = self.world.transition(&self.state, action, draw);
        self.steps += 1;
        if !r.done && self.steps >= self.world.config.max_steps {
            r.done = true;
            r.info = StepInfo::TimeOut;
        }
        self.state = r.next_state;
        self.done = r.done;
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case1() -> GridWorld {
        GridWorld::new(EnvConfig::case1_default()).unwrap()
    }

    #[test]
    fn presets_validate() {
        let w1 = case1();
        assert_eq!(w1.reset().flags, Flags::new(2));
        assert_eq!(w1.reset().cell(), Cell::new(0, 0));
        let w2 = GridWorld::preset("case2_default").unwrap();
        let s = w2.reset();
        assert_eq!(s.flags.len(), 6);
        assert!(s.flags.iter().all(|f| !f));
    }

    #[test]
    fn action_codes_are_stable() {
        for (i, a) in Action::ALL.iter().enumerate() {
            assert_eq!(a.code(), i);
            assert_eq!(serde_json::to_string(a).unwrap(), i.to_string());
        }
        assert!(Action::from_code(5).is_none());
    }

    #[test]
    fn forced_failure_keeps_position() {
        let w = GridWorld::new(EnvConfig::case1_default().with_fail_prob(1.0)).unwrap();
        let s = w.state_at(Cell::new(2, 2), Flags::new(2));
        let r = w.transition(&s, Action::Up, 0.999);
        assert_eq!(r.next_state, s);
        assert_eq!(r.info, StepInfo::MoveFailed);
        assert!((r.reward + 0.1).abs() < 1e-12);
    }

    #[test]
    fn goal_entry_with_open_door_terminates() {
        let w = case1();
        let mut flags = Flags::new(2);
        flags.set(0);
        flags.set(1);
        // goal at (0,4); step in from (1,4)
        let s = w.state_at(Cell::new(1, 4), flags);
        let r = w.transition(&s, Action::Up, 0.5);
        assert!(r.done);
        assert_eq!(r.info, StepInfo::GoalReached);
        assert!((r.reward - 0.9).abs() < 1e-12);
    }

    #[test]
    fn goal_without_open_door_is_not_success() {
        let w = case1();
        let s = w.state_at(w.config().goal(), Flags::new(2));
        assert!(!w.success(&s));
    }

    #[test]
    fn multi_goal_success_needs_all_items() {
        let w = GridWorld::preset("case2_default").unwrap();
        let case = w.case();
        let mut flags = Flags::new(6);
        flags.set(case.item_flag(1));
        let s = w.state_at(w.config().goal(), flags);
        assert!(!w.success(&s));
        let all = Flags::from_bits(0b11_1111, 6);
        assert!(w.success(&w.state_at(w.config().goal(), all)));
    }

    #[test]
    fn closed_door_blocks_exit_not_entry() {
        let w = case1();
        let door = w.config().door_cell(1).unwrap();
        let above = w.state_at(Cell::new(door.row - 1, door.col), Flags::new(2));
        let r = w.transition(&above, Action::Down, 0.9);
        assert_eq!(r.info, StepInfo::Moved);
        let on_door = r.next_state;
        for a in Action::MOVES {
            let r = w.transition(&on_door, a, 0.9);
            assert_eq!(r.next_state.cell(), door, "{a:?}");
        }
        // PickOpen without key does nothing
        assert_eq!(w.transition(&on_door, Action::PickOpen, 0.0).info, StepInfo::NoOp);
    }

    #[test]
    fn entry_blocking_variant_requires_key() {
        let mut cfg = EnvConfig::case1_default();
        cfg.door_blocks_entry = true;
        let w = GridWorld::new(cfg).unwrap();
        let door = w.config().door_cell(1).unwrap();
        let mut above = w.state_at(Cell::new(door.row - 1, door.col), Flags::new(2));
        assert_eq!(w.transition(&above, Action::Down, 0.9).info, StepInfo::MoveBlocked);
        above.flags.set(0);
        assert_eq!(w.transition(&above, Action::Down, 0.9).info, StepInfo::Moved);
    }

    #[test]
    fn pick_and_open() {
        let w = case1();
        let key = w.config().key_cell(1).unwrap();
        let s = w.state_at(key, Flags::new(2));
        let r = w.transition(&s, Action::PickOpen, 0.0);
        assert_eq!(r.info, StepInfo::Picked);
        assert!(r.next_state.flags.get(0));
        let again = w.transition(&r.next_state, Action::PickOpen, 0.0);
        assert_eq!(again.info, StepInfo::NoOp);
        let door = w.state_at(w.config().door_cell(1).unwrap(), r.next_state.flags);
        let opened = w.transition(&door, Action::PickOpen, 0.0);
        assert_eq!(opened.info, StepInfo::Opened);
        assert!(opened.next_state.flags.get(1));
    }

    #[test]
    fn pick_open_on_empty_cell_is_noop() {
        let w = case1();
        let s = w.state_at(Cell::new(1, 1), Flags::new(2));
        let r = w.transition(&s, Action::PickOpen, 0.0);
        assert_eq!(r.info, StepInfo::NoOp);
        assert_eq!(r.next_state, s);
        assert!((r.reward + 0.1).abs() < 1e-12);
    }

    #[test]
    fn border_clamps() {
        let w = GridWorld::new(EnvConfig::case1_default().with_fail_prob(0.0)).unwrap();
        let s = w.reset();
        let r = w.transition(&s, Action::Up, 0.5);
        assert_eq!(r.info, StepInfo::MoveBlocked);
        assert_eq!(r.next_state, s);
    }

    #[test]
    fn step_after_done_is_an_error() {
        let mut cfg = EnvConfig::case1_default();
        cfg.max_steps = 2;
        let w = GridWorld::new(cfg).unwrap();
        let mut ep = w.episode(0);
        assert!(!ep.step(Action::PickOpen).unwrap().done);
        let r = ep.step(Action::PickOpen).unwrap();
        assert!(r.done);
        assert_eq!(r.info, StepInfo::TimeOut);
        assert!(matches!(ep.step(Action::Up), Err(EnvError::EpisodeDone)));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let w = case1();
        let actions = [Action::Down, Action::Down, Action::Right, Action::Down, Action::Down];
        let run = |idx| {
            let mut ep = w.episode(idx);
            actions.iter().map(|a| ep.step(*a).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn movement_success_frequency_matches_fail_prob() {
        let w = case1();
        let mut rng = episode_rng(12345, 0);
        let s = w.state_at(Cell::new(2, 2), Flags::new(2));
        let n = 100_000;
        let moved = (0..n)
            .filter(|_| w.transition(&s, Action::Left, rng.gen::<f64>()).info == StepInfo::Moved)
            .count();
        let freq = moved as f64 / n as f64;
        assert!((0.89..=0.91).contains(&freq), "success frequency {freq}");
    }

    #[test]
    fn invalid_layouts_are_rejected() {
        let mut cfg = EnvConfig::case1_default();
        cfg.layout.insert(Role::Key1, Cell::new(0, 0));
        assert!(GridWorld::new(cfg).is_err());
        let mut cfg = EnvConfig::case1_default();
        cfg.layout.insert(Role::Goal, Cell::new(9, 0));
        assert!(GridWorld::new(cfg).is_err());
        let mut cfg = EnvConfig::case1_default();
        cfg.fail_prob = 1.5;
        assert!(GridWorld::new(cfg).is_err());
        let mut cfg = EnvConfig::case1_default();
        cfg.layout.remove(&Role::Door1);
        assert!(GridWorld::new(cfg).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = EnvConfig::case2_default();
        let back = EnvConfig::from_json(&cfg.to_json_pretty()).unwrap();
        assert_eq!(cfg, back);
    }
}
