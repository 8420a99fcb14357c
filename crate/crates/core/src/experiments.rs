//! Datasets, the evaluation protocol, metrics and report artifacts.
//!
//! Everything written here is versioned and goes through [`write_atomic`].
//! Metrics are a pure function of the trace files: each evaluated cell keeps
//! its per-seed traces plus a `cell.json` holding the row computed from them,
//! and [`report`] can rebuild every row from the traces alone.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{
    distance_map, intent_labels, BaselineError, DqnConfig, DqnReport, DtPolicy, Method, OptionsConfig,
    OptionsPolicy, OptionsSample, QNet, RecurrentConfig, RecurrentNet, ScriptedPolicy, Transition,
};
use crate::dt::{self, DecisionTransformer, DtConfig, DtError, DtMode, Sample, SubGoal, TokenSequence};
use crate::gridworld::{Action, CaseId, EnvError, EnvState, GridWorld};
use crate::hierarchy::{
    read_traces, run_episodes, write_traces, Decode, EpisodeTrace, ExecutorConfig, HierarchyError, Outcome, Policy,
};
use crate::symbolic::{abstract_state, ground_operators, plan, GoalSpec};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const HEATMAP_SCHEMA_VERSION: u32 = 1;
pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;

/// The evaluation grid shared by every method and case.
pub const FAIL_PROBS: [f64; 3] = [0.1, 0.2, 0.3];
pub const CASES: [CaseId; 2] = [CaseId::Single, CaseId::MultiGoal];

/// Probability that a random-attempt step tries to pick or open.
const RANDOM_ACTUATE: f64 = 0.2;
/// Probability that a random-attempt step moves toward the exit.
const RANDOM_TOWARD_EXIT: f64 = 0.4;
/// Random-attempt episodes stop after `max_steps / RANDOM_HORIZON_DIVISOR`.
const RANDOM_HORIZON_DIVISOR: usize = 4;
/// Salt separating the random-attempt action stream from movement streams.
const RANDOM_ACTION_SALT: u64 = 0x5eed_0a11_ac70_0001;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Dt(#[from] DtError),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("incomplete heatmap grid, missing cells: {}", .0.join(", "))]
    IncompleteGrid(Vec<String>),
    #[error("configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Writes through a job-unique temporary file, then renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(ExperimentError::MissingArtifact(path.to_path_buf()))
    }
}

// ---------------------------------------------------------------- datasets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Random,
    Scripted,
    Mixed,
}

impl Source {
    /// Only planner-driven rollouts have operator boundaries to cut at.
    pub fn supports_segmentation(self) -> bool {
        self != Source::Random
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    HybridLabeled,
    PureUnlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentStep {
    pub state: EnvState,
    pub action: Action,
    pub reward: f64,
}

/// A contiguous slice of one episode. Labeled segments cover exactly one
/// operator's execution; unlabeled ones cover a whole episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySegment {
    pub schema_version: u32,
    pub episode: u64,
    /// Position of this segment within its episode.
    pub index: usize,
    pub source: Source,
    pub steps: Vec<SegmentStep>,
    /// State after the last step.
    pub final_state: EnvState,
    pub subgoal: Option<SubGoal>,
    pub operator: Option<String>,
    /// Whether the operator's add-effects hold at `final_state`; labeled only.
    pub achieved: Option<bool>,
}

impl TrajectorySegment {
    pub fn is_labeled(&self) -> bool {
        self.subgoal.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ExperimentError::Dataset(format!("episode {} segment {}: {m}", self.episode, self.index)));
        if self.schema_version != DATASET_SCHEMA_VERSION {
            return bad(&format!("schema version {} unsupported", self.schema_version));
        }
        if self.steps.is_empty() {
            return bad("empty segment");
        }
        if self.subgoal.is_some() != self.operator.is_some() || self.subgoal.is_some() != self.achieved.is_some() {
            return bad("sub-goal, operator and achievement labels must appear together");
        }
        if self.is_labeled() && !self.source.supports_segmentation() {
            return bad("random-policy segments carry no sub-goal label");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub mode: DatasetMode,
    /// Scripted demonstration episodes.
    pub episodes: usize,
    /// Share of random-attempt episodes in the pure dataset's total.
    pub random_fraction: f64,
    pub seed: u64,
    pub exec: ExecutorConfig,
}

impl DatasetConfig {
    pub fn new(mode: DatasetMode, episodes: usize, seed: u64) -> Self {
        Self { mode, episodes, random_fraction: 0.2, seed, exec: ExecutorConfig::default() }
    }

    /// Default demonstration count per case.
    pub fn default_episodes(case: CaseId) -> usize {
        match case {
            CaseId::Single => 2000,
            CaseId::MultiGoal => 5000,
        }
    }

    /// Random-attempt episodes added on top of the scripted ones.
    pub fn random_episodes(&self) -> usize {
        match self.mode {
            DatasetMode::HybridLabeled => 0,
            DatasetMode::PureUnlabeled => {
                let f = self.random_fraction;
                (self.episodes as f64 * f / (1.0 - f)).round() as usize
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(ExperimentError::Config("dataset needs at least one episode".into()));
        }
        if !(0.0..1.0).contains(&self.random_fraction) {
            return Err(ExperimentError::Config("random_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatorStats {
    pub segments: usize,
    pub achieved: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub schema_version: u32,
    pub case: CaseId,
    pub fail_prob: f64,
    pub config: DatasetConfig,
    pub scripted_episodes: usize,
    pub random_episodes: usize,
    pub successes: usize,
    pub segments: usize,
    pub steps: usize,
    /// Keyed by operator name; labeled datasets only.
    pub operators: BTreeMap<String, OperatorStats>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub segments: Vec<TrajectorySegment>,
    pub report: DatasetReport,
}

fn segment(
    episode: u64,
    index: usize,
    source: Source,
    records: &[crate::hierarchy::StepRecord],
    final_state: EnvState,
    label: Option<(SubGoal, String, bool)>,
) -> TrajectorySegment {
    let (subgoal, operator, achieved) = match label {
        Some((g, op, ok)) => (Some(g), Some(op), Some(ok)),
        None => (None, None, None),
    };
    TrajectorySegment {
        schema_version: DATASET_SCHEMA_VERSION,
        episode,
        index,
        source,
        steps: records.iter().map(|r| SegmentStep { state: r.state, action: r.action, reward: r.reward }).collect(),
        final_state,
        subgoal,
        operator,
        achieved,
    }
}

/// Cuts a planner-driven trace at operator boundaries. Steps after the last
/// decided operator (a time-out mid-operator) form a failed trailing segment.
fn labeled_segments(trace: &EpisodeTrace) -> Vec<TrajectorySegment> {
    let recs = &trace.records;
    let state_at = |i: usize| if i < recs.len() { recs[i].state } else { trace.final_state };
    let mut out = Vec::new();
    let mut covered = 0;
    for o in &trace.outcomes {
        if o.end_step > o.start_step {
            let label = (o.subgoal, o.operator.clone(), o.outcome == Outcome::Achieved);
            out.push(segment(
                trace.episode,
                out.len(),
                Source::Scripted,
                &recs[o.start_step..o.end_step],
                state_at(o.end_step),
                Some(label),
            ));
        }
        covered = covered.max(o.end_step);
    }
    if covered < recs.len() {
        let g = recs[covered].subgoal.expect("planner-driven steps carry their sub-goal");
        out.push(segment(
            trace.episode,
            out.len(),
            Source::Scripted,
            &recs[covered..],
            trace.final_state,
            Some((g, g.to_string(), false)),
        ));
    }
    out
}

fn toward(world: &GridWorld, s: &EnvState, dist: &[Option<usize>]) -> Option<Action> {
    let w = world.width();
    let here = dist[s.row * w + s.col]?;
    (0..4).filter_map(Action::from_code).find(|&a| {
        world.move_target(s, a).and_then(|c| dist[c.row * w + c.col]).is_some_and(|d| d < here)
    })
}

/// Heads for the exit with random pick/open attempts and random moves.
fn random_attempt_episode(world: &GridWorld, index: u64, action_seed: u64) -> EpisodeTrace {
    let mut env = world.episode(index);
    let mut rng = ChaCha8Rng::seed_from_u64(action_seed ^ RANDOM_ACTION_SALT);
    rng.set_stream(index);
    let horizon = (world.config().max_steps / RANDOM_HORIZON_DIVISOR).max(1);
    let goal = world.config().goal();
    let mut trace = EpisodeTrace {
        episode: index,
        records: Vec::new(),
        outcomes: Vec::new(),
        success: false,
        replans: 0,
        final_state: env.state(),
    };
    while !env.is_done() && env.steps() < horizon {
        let s = env.state();
        let u: f64 = rng.gen();
        let a = if u < RANDOM_ACTUATE {
            Action::PickOpen
        } else if u < RANDOM_ACTUATE + RANDOM_TOWARD_EXIT {
            toward(world, &s, &distance_map(world, s.flags, goal))
                .unwrap_or_else(|| Action::from_code(rng.gen_range(0..4)).expect("move code"))
        } else {
            Action::from_code(rng.gen_range(0..4)).expect("move code")
        };
        let r = env.step(a).expect("episode not done");
        trace.records.push(crate::hierarchy::StepRecord {
            t: trace.records.len(),
            state: s,
            subgoal: None,
            action: a,
            reward: r.reward,
            info: r.info,
        });
        trace.success = r.info == crate::gridworld::StepInfo::GoalReached;
    }
    trace.final_state = env.state();
    trace
}

/// Scripted demonstrations (plus random-attempt episodes in pure mode) under
/// the world's `fail_prob`. Movement noise is keyed by `config.seed`.
pub fn generate_dataset(world: &GridWorld, config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let world = GridWorld::new(world.config().clone().with_seed(config.seed))?;
    let n = config.episodes as u64;
    let scripted = run_episodes(&world, &ScriptedPolicy, &config.exec, Decode::Greedy, 0..n);
    let mut segments = Vec::new();
    let mut operators: BTreeMap<String, OperatorStats> = BTreeMap::new();
    let mut successes = 0;
    for t in &scripted {
        successes += usize::from(t.success);
        match config.mode {
            DatasetMode::HybridLabeled => {
                for s in labeled_segments(t) {
                    let st = operators.entry(s.operator.clone().expect("labeled")).or_default();
                    st.segments += 1;
                    st.achieved += usize::from(s.achieved == Some(true));
                    segments.push(s);
                }
            }
            DatasetMode::PureUnlabeled if !t.records.is_empty() => {
                segments.push(segment(t.episode, 0, Source::Scripted, &t.records, t.final_state, None));
            }
            DatasetMode::PureUnlabeled => {}
        }
    }
    let n_random = config.random_episodes();
    for j in 0..n_random as u64 {
        let t = random_attempt_episode(&world, n + j, config.seed);
        successes += usize::from(t.success);
        if !t.records.is_empty() {
            segments.push(segment(t.episode, 0, Source::Random, &t.records, t.final_state, None));
        }
    }
    let mut warnings = Vec::new();
    if config.mode == DatasetMode::HybridLabeled {
        let initial = plan(&abstract_state(&world, &world.reset()), &GoalSpec::for_world(&world), &ground_operators(&world));
        // operators the initial plan needs are reported even if never tried
        if let Ok(p) = initial {
            for op in &p.ops {
                operators.entry(op.name.clone()).or_default();
            }
        }
        for (name, st) in &operators {
            if st.achieved == 0 {
                warnings.push(format!("operator {name} has no successful demonstration"));
            }
        }
    }
    let steps = segments.iter().map(|s| s.steps.len()).sum();
    let report = DatasetReport {
        schema_version: DATASET_SCHEMA_VERSION,
        case: world.case(),
        fail_prob: world.config().fail_prob,
        config: config.clone(),
        scripted_episodes: config.episodes,
        random_episodes: n_random,
        successes,
        segments: segments.len(),
        steps,
        operators,
        warnings,
    };
    Ok(Dataset { segments, report })
}

/// One JSON line per segment.
pub fn write_dataset(path: &Path, segments: &[TrajectorySegment]) -> Result<()> {
    let mut buf = Vec::new();
    for s in segments {
        serde_json::to_writer(&mut buf, s)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_dataset(path: &Path) -> Result<Vec<TrajectorySegment>> {
    require(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: TrajectorySegment = serde_json::from_str(&line)
            .map_err(|e| ExperimentError::Dataset(format!("{} line {}: {e}", path.display(), n + 1)))?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

/// A whole episode reassembled from its segments.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeData {
    pub episode: u64,
    pub source: Source,
    /// One more state than actions.
    pub states: Vec<EnvState>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub subgoals: Vec<Option<SubGoal>>,
}

/// Groups segments by episode and checks that consecutive segments join up.
pub fn assemble_episodes(segments: &[TrajectorySegment]) -> Result<Vec<EpisodeData>> {
    let mut by_episode: BTreeMap<u64, Vec<&TrajectorySegment>> = BTreeMap::new();
    for s in segments {
        by_episode.entry(s.episode).or_default().push(s);
    }
    let mut out = Vec::with_capacity(by_episode.len());
    for (episode, mut segs) in by_episode {
        segs.sort_by_key(|s| s.index);
        let mut ep = EpisodeData {
            episode,
            source: segs[0].source,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            subgoals: Vec::new(),
        };
        for (k, s) in segs.iter().enumerate() {
            if s.index != k {
                return Err(ExperimentError::Dataset(format!("episode {episode}: segment {k} missing")));
            }
            if let Some(prev) = ep.states.last() {
                if *prev != s.steps[0].state {
                    return Err(ExperimentError::Dataset(format!("episode {episode}: segment {k} does not continue")));
                }
                ep.states.pop();
            }
            for st in &s.steps {
                ep.states.push(st.state);
                ep.actions.push(st.action);
                ep.rewards.push(st.reward);
                ep.subgoals.push(s.subgoal);
            }
            ep.states.push(s.final_state);
        }
        out.push(ep);
    }
    Ok(out)
}

/// Right-aligned windows ending at every step; with `conditioned`, steps
/// without a sub-goal label are skipped.
pub fn window_samples(episodes: &[EpisodeData], context: usize, conditioned: bool) -> Vec<Sample> {
    let mut out = Vec::new();
    for ep in episodes {
        for t in 0..ep.actions.len() {
            let g = if conditioned {
                match ep.subgoals[t] {
                    Some(g) => Some(g),
                    None => continue,
                }
            } else {
                None
            };
            out.push(Sample {
                seq: TokenSequence::window(&ep.states[..=t], &ep.actions[..t], context, g),
                target: ep.actions[t],
            });
        }
    }
    out
}

pub fn dt_samples(episodes: &[EpisodeData], cfg: &DtConfig) -> Vec<Sample> {
    window_samples(episodes, cfg.context, cfg.conditioned())
}

pub fn recurrent_samples(episodes: &[EpisodeData], cfg: &RecurrentConfig) -> Vec<Sample> {
    window_samples(episodes, cfg.context, cfg.conditioned)
}

pub fn options_samples(episodes: &[EpisodeData]) -> Vec<OptionsSample> {
    let mut out = Vec::new();
    for ep in episodes {
        for (t, intent) in intent_labels(&ep.subgoals).into_iter().enumerate() {
            if let Some(intent) = intent {
                out.push(OptionsSample { state: ep.states[t], action: ep.actions[t], intent });
            }
        }
    }
    out
}

/// Only arrival at the goal is terminal.
pub fn transitions(world: &GridWorld, episodes: &[EpisodeData]) -> Vec<Transition> {
    let mut out = Vec::new();
    for ep in episodes {
        for t in 0..ep.actions.len() {
            let next = ep.states[t + 1];
            out.push(Transition {
                state: ep.states[t],
                action: ep.actions[t],
                reward: ep.rewards[t],
                next_state: next,
                terminal: world.success(&next),
            });
        }
    }
    out
}

// ---------------------------------------------------------------- training

/// Which dataset a learned method trains from.
pub fn dataset_mode_for(method: Method) -> Option<DatasetMode> {
    match method {
        Method::HybridDt | Method::LstmHier | Method::OptionsHrl => Some(DatasetMode::HybridLabeled),
        Method::PureDt | Method::GruSeq | Method::Dqn => Some(DatasetMode::PureUnlabeled),
        Method::SymbolicScripted => None,
    }
}

/// Scale knobs applied on top of each method's default configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub dqn_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub method: Method,
    pub case: CaseId,
    pub samples: usize,
    pub epoch_losses: Vec<f64>,
    pub dqn: Option<DqnReport>,
    pub checkpoint: PathBuf,
}

/// Trains `method` on reassembled episodes and writes its checkpoint.
/// DQN also interacts with `world`, seeding replay from the episodes.
pub fn train_method(
    method: Method,
    world: &GridWorld,
    episodes: &[EpisodeData],
    overrides: &TrainOverrides,
    seed: u64,
    checkpoint: &Path,
) -> Result<TrainSummary> {
    if let Some(dir) = checkpoint.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let epochs = |default: usize| overrides.epochs.unwrap_or(default);
    let (samples, epoch_losses, dqn) = match method {
        Method::HybridDt | Method::PureDt => {
            let mode = if method == Method::HybridDt { DtMode::Hybrid } else { DtMode::Pure };
            let mut cfg = DtConfig::for_world(world, mode);
            cfg.epochs = epochs(cfg.epochs);
            let samples = dt_samples(episodes, &cfg);
            let (model, report) = dt::train(&cfg, &samples, seed)?;
            model.save(checkpoint)?;
            (samples.len(), report.epoch_losses, None)
        }
        Method::LstmHier | Method::GruSeq => {
            let mut cfg =
                if method == Method::LstmHier { RecurrentConfig::lstm(world) } else { RecurrentConfig::gru(world) };
            cfg.epochs = epochs(cfg.epochs);
            let samples = recurrent_samples(episodes, &cfg);
            let (net, losses) = RecurrentNet::train(cfg, &samples, seed)?;
            net.save(checkpoint)?;
            (samples.len(), losses, None)
        }
        Method::OptionsHrl => {
            let mut cfg = OptionsConfig::for_world(world);
            cfg.epochs = epochs(cfg.epochs);
            let samples = options_samples(episodes);
            let (policy, losses) = OptionsPolicy::train(cfg, &samples, seed)?;
            policy.save(checkpoint)?;
            (samples.len(), losses, None)
        }
        Method::Dqn => {
            let mut cfg = DqnConfig::for_world(world);
            if let Some(n) = overrides.dqn_steps {
                cfg.total_steps = n;
            }
            let seeded = transitions(world, episodes);
            let (net, report) = QNet::train(world, cfg, &seeded, seed)?;
            net.save(checkpoint)?;
            (seeded.len(), vec![report.final_loss], Some(report))
        }
        Method::SymbolicScripted => {
            return Err(ExperimentError::Config("the scripted controller has nothing to train".into()))
        }
    };
    Ok(TrainSummary { method, case: world.case(), samples, epoch_losses, dqn, checkpoint: checkpoint.to_path_buf() })
}

pub fn checkpoint_path(dir: &Path, method: Method, case: CaseId) -> PathBuf {
    dir.join("checkpoints").join(format!("{}_{}.ckpt", case.short_name(), method.slug()))
}

/// Loads a policy; learned methods need their checkpoint at `checkpoint`.
pub fn load_policy(method: Method, checkpoint: &Path) -> Result<Box<dyn Policy>> {
    if method == Method::SymbolicScripted {
        return Ok(Box::new(ScriptedPolicy));
    }
    require(checkpoint)?;
    Ok(match method {
        Method::HybridDt | Method::PureDt => {
            let model = DecisionTransformer::load(checkpoint)?;
            if model.config.conditioned() != (method == Method::HybridDt) {
                return Err(ExperimentError::Config(format!(
                    "{} does not hold a {} model",
                    checkpoint.display(),
                    method.label()
                )));
            }
            Box::new(DtPolicy::new(model))
        }
        Method::LstmHier | Method::GruSeq => Box::new(RecurrentNet::load(checkpoint)?),
        Method::OptionsHrl => Box::new(OptionsPolicy::load(checkpoint)?),
        Method::Dqn => Box::new(QNet::load(checkpoint)?),
        Method::SymbolicScripted => unreachable!("handled above"),
    })
}

// ---------------------------------------------------------------- metrics

/// Aggregate over seeds: mean and sample standard deviation of per-seed
/// statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema_version: u32,
    pub method: Method,
    pub case: CaseId,
    pub fail_prob: f64,
    pub seeds: usize,
    pub episodes_per_seed: usize,
    pub success_rate: f64,
    pub success_rate_std: f64,
    /// Over successful episodes only; absent if no seed had a success.
    pub avg_steps_success: Option<f64>,
    pub avg_steps_success_std: Option<f64>,
    pub avg_reward: f64,
    pub avg_reward_std: f64,
}

pub const CSV_HEADER: &str = "schema_version,method,case,fail_prob,seeds,episodes_per_seed,success_rate,success_rate_std,avg_steps_success,avg_steps_success_std,avg_reward,avg_reward_std";

/// Sample mean and standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Reward accounting every trace must satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub step_penalty: f64,
    pub success_reward: f64,
}

impl RewardModel {
    pub fn of(world: &GridWorld) -> Self {
        Self { step_penalty: world.config().step_penalty, success_reward: world.config().success_reward }
    }

    pub fn episode_return(&self, steps: usize, success: bool) -> f64 {
        self.step_penalty * steps as f64 + if success { self.success_reward } else { 0.0 }
    }
}

/// Metrics for one (method, case, fail_prob) cell from its per-seed traces.
pub fn metrics_from_traces(
    method: Method,
    case: CaseId,
    fail_prob: f64,
    rewards: RewardModel,
    per_seed: &[Vec<EpisodeTrace>],
) -> Result<MetricsRow> {
    if per_seed.is_empty() || per_seed.iter().any(|t| t.is_empty()) {
        return Err(ExperimentError::Metrics(format!("{method} {case:?} {fail_prob}: empty seed")));
    }
    let episodes = per_seed[0].len();
    if per_seed.iter().any(|t| t.len() != episodes) {
        return Err(ExperimentError::Metrics(format!("{method} {case:?} {fail_prob}: unequal seed sizes")));
    }
    let mut rates = Vec::new();
    let mut steps = Vec::new();
    let mut returns = Vec::new();
    for traces in per_seed {
        let mut wins = 0usize;
        let mut win_steps = 0usize;
        let mut total = 0.0;
        for t in traces {
            let r = t.total_reward();
            let expected = rewards.episode_return(t.steps(), t.success);
            if (r - expected).abs() > 1e-9 * (t.steps() as f64 + 1.0) {
                return Err(ExperimentError::Metrics(format!(
                    "episode {} return {r} disagrees with {expected} from its length and outcome",
                    t.episode
                )));
            }
            total += r;
            if t.success {
                wins += 1;
                win_steps += t.steps();
            }
        }
        rates.push(wins as f64 / traces.len() as f64);
        returns.push(total / traces.len() as f64);
        if wins > 0 {
            steps.push(win_steps as f64 / wins as f64);
        }
    }
    let (success_rate, success_rate_std) = mean_std(&rates);
    let (avg_reward, avg_reward_std) = mean_std(&returns);
    let (avg_steps_success, avg_steps_success_std) =
        if steps.is_empty() { (None, None) } else { let (m, s) = mean_std(&steps); (Some(m), Some(s)) };
    Ok(MetricsRow {
        schema_version: METRICS_SCHEMA_VERSION,
        method,
        case,
        fail_prob,
        seeds: per_seed.len(),
        episodes_per_seed: episodes,
        success_rate,
        success_rate_std,
        avg_steps_success,
        avg_steps_success_std,
        avg_reward,
        avg_reward_std,
    })
}

fn case_rank(case: CaseId) -> usize {
    CASES.iter().position(|&c| c == case).expect("both cases listed")
}

/// Canonical order: case, then method reporting order, then fail_prob.
pub fn sort_rows(rows: &mut [MetricsRow]) {
    rows.sort_by(|a, b| {
        (case_rank(a.case), a.method)
            .cmp(&(case_rank(b.case), b.method))
            .then(a.fail_prob.total_cmp(&b.fail_prob))
    });
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.schema_version,
            r.method.label(),
            r.case.short_name(),
            r.fail_prob,
            r.seeds,
            r.episodes_per_seed,
            r.success_rate,
            r.success_rate_std,
            opt(r.avg_steps_success),
            opt(r.avg_steps_success_std),
            r.avg_reward,
            r.avg_reward_std
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub schema_version: u32,
    pub rows: Vec<MetricsRow>,
}

pub fn metrics_json(rows: &[MetricsRow]) -> Result<String> {
    let file = MetricsFile { schema_version: METRICS_SCHEMA_VERSION, rows: rows.to_vec() };
    Ok(serde_json::to_string_pretty(&file)? + "\n")
}

// ---------------------------------------------------------------- evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub fail_probs: Vec<f64>,
    pub seeds: usize,
    pub episodes: usize,
    /// Seed `k` evaluates under environment seed `seed_base + k`.
    pub seed_base: u64,
    pub exec: ExecutorConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { fail_probs: FAIL_PROBS.to_vec(), seeds: 5, episodes: 200, seed_base: 1000, exec: ExecutorConfig::default() }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 || self.episodes == 0 || self.fail_probs.is_empty() {
            return Err(ExperimentError::Config("evaluation needs seeds, episodes and fail_probs".into()));
        }
        if self.fail_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(ExperimentError::Config("fail_prob outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Stored next to a cell's traces: what was run and the row it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub schema_version: u32,
    pub method: Method,
    pub case: CaseId,
    pub fail_prob: f64,
    pub env_seeds: Vec<u64>,
    pub rewards: RewardModel,
    pub row: MetricsRow,
}

pub fn cell_dir(out: &Path, method: Method, case: CaseId, fail_prob: f64) -> PathBuf {
    out.join("traces").join(case.short_name()).join(method.slug()).join(format!("fp_{fail_prob}"))
}

fn seed_file(dir: &Path, env_seed: u64) -> PathBuf {
    dir.join(format!("seed_{env_seed}.jsonl"))
}

/// Runs one policy over the fail_prob grid. Each seed uses its own
/// environment seed, so no RNG stream is shared across methods or seeds.
/// With `out`, traces and cell records are written under `out/traces`.
pub fn evaluate_policy(
    policy: &dyn Policy,
    method: Method,
    world: &GridWorld,
    config: &EvalConfig,
    out: Option<&Path>,
) -> Result<Vec<MetricsRow>> {
    config.validate()?;
    let rewards = RewardModel::of(world);
    let mut rows = Vec::new();
    for &fp in &config.fail_probs {
        let env_seeds: Vec<u64> = (0..config.seeds as u64).map(|k| config.seed_base + k).collect();
        let mut per_seed = Vec::with_capacity(env_seeds.len());
        for &s in &env_seeds {
            let w = GridWorld::new(world.config().clone().with_fail_prob(fp).with_seed(s))?;
            per_seed.push(run_episodes(&w, policy, &config.exec, Decode::Greedy, 0..config.episodes as u64));
        }
        let row = metrics_from_traces(method, world.case(), fp, rewards, &per_seed)?;
        if let Some(out) = out {
            let dir = cell_dir(out, method, world.case(), fp);
            for (&s, traces) in env_seeds.iter().zip(&per_seed) {
                let mut buf = Vec::new();
                write_traces(&mut buf, traces)?;
                write_atomic(&seed_file(&dir, s), &buf)?;
            }
            let record = CellRecord {
                schema_version: METRICS_SCHEMA_VERSION,
                method,
                case: world.case(),
                fail_prob: fp,
                env_seeds,
                rewards,
                row: row.clone(),
            };
            write_atomic(&dir.join("cell.json"), (serde_json::to_string_pretty(&record)? + "\n").as_bytes())?;
        }
        rows.push(row);
    }
    Ok(rows)
}

fn cell_records(out: &Path) -> Result<Vec<(PathBuf, CellRecord)>> {
    let root = out.join("traces");
    let mut found = Vec::new();
    let mut stack = vec![root.clone()];
    while let Some(dir) = stack.pop() {
        if !dir.is_dir() {
            continue;
        }
        for entry in fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "cell.json") {
                let record: CellRecord = serde_json::from_str(&fs::read_to_string(&p)?)?;
                if record.schema_version != METRICS_SCHEMA_VERSION {
                    return Err(ExperimentError::Metrics(format!("{}: unsupported schema", p.display())));
                }
                found.push((dir.clone(), record));
            }
        }
    }
    if found.is_empty() {
        return Err(ExperimentError::MissingArtifact(root));
    }
    Ok(found)
}

/// Recomputes one cell's row from its trace files.
pub fn recompute_cell(dir: &Path, record: &CellRecord) -> Result<MetricsRow> {
    let mut per_seed = Vec::with_capacity(record.env_seeds.len());
    for &s in &record.env_seeds {
        let path = seed_file(dir, s);
        require(&path)?;
        per_seed.push(read_traces(BufReader::new(fs::File::open(&path)?))?);
    }
    metrics_from_traces(record.method, record.case, record.fail_prob, record.rewards, &per_seed)
}

/// Collects every evaluated cell under `out`, optionally recomputing rows
/// from traces, in canonical order.
pub fn collect_rows(out: &Path, recompute: bool) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (dir, record) in cell_records(out)? {
        rows.push(if recompute { recompute_cell(&dir, &record)? } else { record.row });
    }
    sort_rows(&mut rows);
    Ok(rows)
}

pub fn metrics_paths(out: &Path) -> (PathBuf, PathBuf) {
    (out.join("metrics.csv"), out.join("metrics.json"))
}

/// Writes `metrics.csv` and `metrics.json` for the given rows.
pub fn write_metrics(out: &Path, rows: &[MetricsRow]) -> Result<()> {
    let (csv, json) = metrics_paths(out);
    write_atomic(&csv, metrics_csv(rows).as_bytes())?;
    write_atomic(&json, metrics_json(rows)?.as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub rows: Vec<MetricsRow>,
    /// With recomputation: whether the previous CSV matched byte for byte.
    pub identical: Option<bool>,
}

/// Rebuilds the metrics files from evaluated cells. With `recompute`, rows
/// come from the trace files and are compared against the existing CSV.
pub fn report(out: &Path, recompute: bool) -> Result<ReportSummary> {
    let rows = collect_rows(out, recompute)?;
    let (csv_path, _) = metrics_paths(out);
    let fresh = metrics_csv(&rows);
    let identical = if recompute {
        Some(fs::read_to_string(&csv_path).map(|old| old == fresh).unwrap_or(false))
    } else {
        None
    };
    write_metrics(out, &rows)?;
    Ok(ReportSummary { rows, identical })
}

// ---------------------------------------------------------------- heatmap

/// Success rates, one row per method in reporting order and one column per
/// (case, fail_prob) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub schema_version: u32,
    pub methods: Vec<String>,
    pub columns: Vec<String>,
    pub success_rate: Vec<Vec<f64>>,
}

fn column_name(case: CaseId, fp: f64) -> String {
    format!("{}@{fp}", case.short_name())
}

pub fn emit_heatmap_data(rows: &[MetricsRow]) -> Result<Heatmap> {
    let lookup = |m: Method, c: CaseId, fp: f64| {
        rows.iter().find(|r| r.method == m && r.case == c && (r.fail_prob - fp).abs() < 1e-9).map(|r| r.success_rate)
    };
    let columns: Vec<(CaseId, f64)> = CASES.iter().flat_map(|&c| FAIL_PROBS.iter().map(move |&f| (c, f))).collect();
    let mut missing = Vec::new();
    let mut matrix = Vec::new();
    for m in Method::ALL {
        let mut row = Vec::new();
        for &(c, fp) in &columns {
            match lookup(m, c, fp) {
                Some(v) => row.push(v),
                None => missing.push(format!("{}/{}", m.label(), column_name(c, fp))),
            }
        }
        matrix.push(row);
    }
    if !missing.is_empty() {
        return Err(ExperimentError::IncompleteGrid(missing));
    }
    Ok(Heatmap {
        schema_version: HEATMAP_SCHEMA_VERSION,
        methods: Method::ALL.iter().map(|m| m.label().to_string()).collect(),
        columns: columns.iter().map(|&(c, f)| column_name(c, f)).collect(),
        success_rate: matrix,
    })
}

impl Heatmap {
    pub fn to_csv(&self) -> String {
        let mut s = format!("schema_version,method,{}\n", self.columns.join(","));
        for (m, row) in self.methods.iter().zip(&self.success_rate) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("{},{m},{}\n", self.schema_version, cells.join(",")));
        }
        s
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        write_atomic(&out.join("heatmap.csv"), self.to_csv().as_bytes())?;
        write_atomic(&out.join("heatmap.json"), (serde_json::to_string_pretty(self)? + "\n").as_bytes())
    }
}

// ---------------------------------------------------------------- pipeline config

/// The `--config` file: dataset sizes, training scale and evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Demonstration episodes per case; `None` uses the case default.
    pub dataset_episodes: Option<usize>,
    pub random_fraction: f64,
    pub train: TrainOverrides,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: EXPERIMENT_SCHEMA_VERSION,
            dataset_episodes: None,
            random_fraction: 0.2,
            train: TrainOverrides::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        if cfg.schema_version != EXPERIMENT_SCHEMA_VERSION {
            return Err(ExperimentError::Config(format!("schema version {} unsupported", cfg.schema_version)));
        }
        cfg.eval.validate()?;
        Ok(cfg)
    }

    pub fn dataset(&self, case: CaseId, mode: DatasetMode, seed: u64) -> DatasetConfig {
        let episodes = self.dataset_episodes.unwrap_or_else(|| DatasetConfig::default_episodes(case));
        DatasetConfig { random_fraction: self.random_fraction, ..DatasetConfig::new(mode, episodes, seed) }
    }
}

pub fn dataset_path(out: &Path, case: CaseId, mode: DatasetMode) -> PathBuf {
    let tag = match mode {
        DatasetMode::HybridLabeled => "hybrid",
        DatasetMode::PureUnlabeled => "pure",
    };
    out.join("data").join(format!("{}_{tag}.jsonl", case.short_name()))
}
