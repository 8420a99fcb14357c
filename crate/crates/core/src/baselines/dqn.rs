//! Deep Q-learning with a replay buffer and a periodically synced target net.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dt::{FeatureSpec, ACTION_COUNT};
use crate::gridworld::{Action, EnvState, GridWorld, StepInfo};
use crate::hierarchy::{Policy, Query};
use crate::neural::{AdamConfig, AdamState, Graph, ParamBuilder, ParamStore, Scalar, Var};

use super::mlp::{rows_tensor, Mlp};
use super::{load_model, one_hot, save_model, BaselineError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqnConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Gradient updates between target-network syncs.
    pub target_sync: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Environment steps over which epsilon anneals linearly.
    pub eps_anneal_steps: usize,
    pub total_steps: usize,
    pub lr: f64,
    pub features: FeatureSpec,
    pub init_std: f64,
}

impl DqnConfig {
    pub fn for_world(world: &GridWorld) -> Self {
        Self {
            hidden: vec![128, 128],
            gamma: 0.95,
            replay_capacity: 50_000,
            batch_size: 64,
            target_sync: 500,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_anneal_steps: 20_000,
            total_steps: 100_000,
            lr: 1e-3,
            features: FeatureSpec::of(world),
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.replay_capacity <= self.batch_size || self.batch_size == 0 {
            return Err(BaselineError::Config("replay capacity must exceed a positive batch size".into()));
        }
        if self.target_sync == 0 || !(0.0..=1.0).contains(&self.gamma) {
            return Err(BaselineError::Config("target_sync must be positive and gamma in [0, 1]".into()));
        }
        Ok(())
    }

    fn mlp(&self) -> Mlp {
        let mut dims = vec![self.features.state_dim()];
        dims.extend(&self.hidden);
        dims.push(ACTION_COUNT);
        Mlp::new("q", dims)
    }

    pub fn param_builder(&self) -> ParamBuilder {
        let mut b = ParamBuilder::new();
        self.mlp().declare(&mut b, self.init_std);
        b
    }

    /// Linear anneal from `eps_start` to `eps_end`.
    pub fn epsilon(&self, step: usize) -> f64 {
        if step >= self.eps_anneal_steps {
            return self.eps_end;
        }
        let frac = step as f64 / self.eps_anneal_steps as f64;
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: EnvState,
    pub action: Action,
    pub reward: f64,
    pub next_state: EnvState,
    /// Only goal arrival ends the return; time-outs still bootstrap.
    pub terminal: bool,
}

/// `r + γ · max_a Q_target(s′, a)`, or `r` at a terminal transition.
pub fn td_target(reward: f64, terminal: bool, gamma: f64, next_q: &[f64]) -> f64 {
    if terminal {
        reward
    } else {
        reward + gamma * next_q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct QNet {
    pub config: DqnConfig,
    pub params: ParamStore<f32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DqnReport {
    pub env_steps: usize,
    pub episodes: usize,
    pub successes: usize,
    pub updates: usize,
    /// Mean TD loss over the final 1000 updates.
    pub final_loss: f64,
}

const MODEL_NAME: &str = "dqn";

/// Episode indices used for exploration, disjoint from evaluation indices.
const TRAIN_EPISODE_BASE: u64 = 1 << 40;

pub(crate) fn q_forward<S: Scalar>(cfg: &DqnConfig, g: &mut Graph<'_, S>, states: &[&EnvState]) -> Result<Var, BaselineError> {
    let feats: Vec<Vec<f64>> = states
        .iter()
        .map(|s| {
            let mut v = Vec::with_capacity(cfg.features.state_dim());
            cfg.features.encode_state(s, &mut v);
            v
        })
        .collect();
    let rows: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
    let x = g.input(rows_tensor(&rows));
    Ok(cfg.mlp().forward(g, x)?)
}

/// Squared TD error of a batch against fixed targets.
pub fn td_loss<S: Scalar>(
    cfg: &DqnConfig,
    g: &mut Graph<'_, S>,
    batch: &[&Transition],
    targets: &[f64],
) -> Result<Var, BaselineError> {
    let states: Vec<&EnvState> = batch.iter().map(|t| &t.state).collect();
    let q = q_forward(cfg, g, &states)?;
    let actions: Vec<usize> = batch.iter().map(|t| t.action.code()).collect();
    let picked = g.pick_cols(q, &actions)?;
    let t: Vec<S> = targets.iter().map(|&v| S::of(v)).collect();
    Ok(g.mse(picked, &t)?)
}

impl QNet {
    pub fn new(config: DqnConfig, seed: u64) -> Result<Self, BaselineError> {
        config.validate()?;
        let params = config.param_builder().build(seed)?;
        Ok(Self { config, params })
    }

    pub fn zeros(config: DqnConfig) -> Result<Self, BaselineError> {
        let mut net = Self::new(config, 0)?;
        net.params.fill_zero();
        Ok(net)
    }

    pub fn q_values(&self, states: &[&EnvState]) -> Result<Vec<[f64; ACTION_COUNT]>, BaselineError> {
        q_values_with(&self.config, &self.params, states)
    }

    /// Greedy action; ties go to the lowest code.
    pub fn greedy(&self, s: &EnvState) -> Result<Action, BaselineError> {
        Ok(crate::dt::greedy(&self.q_values(&[s])?[0]))
    }

    /// One Adam step on the TD loss of `batch` against `target`.
    pub fn update(
        &mut self,
        target: &ParamStore<f32>,
        opt: &mut AdamState,
        batch: &[&Transition],
    ) -> Result<f64, BaselineError> {
        let next: Vec<&EnvState> = batch.iter().map(|t| &t.next_state).collect();
        let next_q = q_values_with(&self.config, target, &next)?;
        let targets: Vec<f64> = batch
            .iter()
            .zip(&next_q)
            .map(|(t, q)| td_target(t.reward, t.terminal, self.config.gamma, q))
            .collect();
        let (loss, grads) = {
            let mut g = Graph::new(&self.params);
            let l = td_loss(&self.config, &mut g, batch, &targets)?;
            (g.data(l)[0] as f64, g.backward(l)?)
        };
        opt.update(&mut self.params, &grads)?;
        Ok(loss)
    }

    /// Epsilon-greedy training on the live environment. `seed_transitions`
    /// pre-fill the replay buffer (oldest dropped first once full).
    pub fn train(
        world: &GridWorld,
        config: DqnConfig,
        seed_transitions: &[Transition],
        seed: u64,
    ) -> Result<(Self, DqnReport), BaselineError> {
        let mut net = Self::new(config, seed)?;
        let cfg = net.config.clone();
        let mut target = net.params.clone();
        let mut opt = AdamState::new(&net.params, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mut replay: VecDeque<Transition> = VecDeque::with_capacity(cfg.replay_capacity);
        let push = |replay: &mut VecDeque<Transition>, t: Transition| {
            if replay.len() == cfg.replay_capacity {
                replay.pop_front();
            }
            replay.push_back(t);
        };
        for t in seed_transitions {
            push(&mut replay, t.clone());
        }
        let mut report = DqnReport::default();
        let mut recent = VecDeque::with_capacity(1000);
        let mut episode = world.episode(TRAIN_EPISODE_BASE);
        while report.env_steps < cfg.total_steps {
            let s = episode.state();
            let action = if rng.gen::<f64>() < cfg.epsilon(report.env_steps) {
                Action::ALL[rng.gen_range(0..ACTION_COUNT)]
            } else {
                net.greedy(&s)?
            };
            let r = episode.step(action).expect("episode is live");
            report.env_steps += 1;
            let terminal = r.info == StepInfo::GoalReached;
            push(&mut replay, Transition { state: s, action, reward: r.reward, next_state: r.next_state, terminal });
            if r.done {
                report.episodes += 1;
                report.successes += usize::from(terminal);
                episode = world.episode(TRAIN_EPISODE_BASE + report.episodes as u64);
            }
            if replay.len() >= cfg.batch_size {
                let batch: Vec<&Transition> =
                    (0..cfg.batch_size).map(|_| &replay[rng.gen_range(0..replay.len())]).collect();
                let loss = net.update(&target, &mut opt, &batch)?;
                report.updates += 1;
                if recent.len() == 1000 {
                    recent.pop_front();
                }
                recent.push_back(loss);
                if report.updates % cfg.target_sync == 0 {
                    target.values_mut().copy_from_slice(net.params.values());
                }
            }
        }
        report.final_loss = if recent.is_empty() { 0.0 } else { recent.iter().sum::<f64>() / recent.len() as f64 };
        Ok((net, report))
    }

    pub fn save(&self, path: &Path) -> Result<(), BaselineError> {
        save_model(path, &self.params, MODEL_NAME, &self.config)
    }

    pub fn load(path: &Path) -> Result<Self, BaselineError> {
        let (config, params) = load_model(path, MODEL_NAME, |c: &DqnConfig| c.param_builder())?;
        Ok(Self { config, params })
    }
}

fn q_values_with(
    cfg: &DqnConfig,
    params: &ParamStore<f32>,
    states: &[&EnvState],
) -> Result<Vec<[f64; ACTION_COUNT]>, BaselineError> {
    let mut g = Graph::new(params);
    let q = q_forward(cfg, &mut g, states)?;
    Ok(g
        .data(q)
        .chunks(ACTION_COUNT)
        .map(|row| {
            let mut out = [0.0; ACTION_COUNT];
            for (o, v) in out.iter_mut().zip(row) {
                *o = *v as f64;
            }
            out
        })
        .collect())
}

/// Greedy Q-network behind the shared interface; the distribution is the
/// one-hot argmax.
pub type DqnPolicy = QNet;

impl Policy for QNet {
    fn name(&self) -> &str {
        "DQN"
    }

    fn conditioned(&self) -> bool {
        false
    }

    fn act(&self, queries: &mut [Query<'_>]) -> Vec<Option<[f64; ACTION_COUNT]>> {
        let states: Vec<&EnvState> = queries.iter().map(|q| q.state()).collect();
        let qs = self.q_values(&states).expect("states match the feature spec");
        qs.iter().map(|q| Some(one_hot(crate::dt::greedy(q).code()))).collect()
    }
}
