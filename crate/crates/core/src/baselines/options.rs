//! Options controller: eight intent-specific MLP policies and a selector,
//! all trained by behaviour cloning on sub-goal labeled data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dt::{greedy, FeatureSpec, SubGoal, ACTION_COUNT};
use crate::gridworld::{Action, Cell, EnvState, GridWorld};
use crate::hierarchy::{Policy, PolicyMemory, Query};
use crate::neural::{Graph, ParamBuilder, ParamStore, Scalar, Var};

use super::mlp::{rows_tensor, Mlp};
use super::{fit, load_model, save_model, softmax_row, BaselineError};

/// What an option is for. Each option is pre-assigned one intent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intent {
    ReachKey1,
    ReachKey2,
    ReachDoor1,
    ReachDoor2,
    ReachItem1,
    ReachItem2,
    ReachExit,
    Actuate,
}

impl Intent {
    pub const ALL: [Intent; 8] = [
        Intent::ReachKey1,
        Intent::ReachKey2,
        Intent::ReachDoor1,
        Intent::ReachDoor2,
        Intent::ReachItem1,
        Intent::ReachItem2,
        Intent::ReachExit,
        Intent::Actuate,
    ];

    pub fn index(self) -> usize {
        Intent::ALL.iter().position(|&i| i == self).expect("listed")
    }

    /// Cell a reaching intent heads for; `None` for actuation or entities
    /// absent from this layout.
    pub fn target(self, world: &GridWorld) -> Option<Cell> {
        let c = world.config();
        match self {
            Intent::ReachKey1 => c.key_cell(1),
            Intent::ReachKey2 => c.key_cell(2),
            Intent::ReachDoor1 => c.door_cell(1),
            Intent::ReachDoor2 => c.door_cell(2),
            Intent::ReachItem1 => c.item_cell(1),
            Intent::ReachItem2 => c.item_cell(2),
            Intent::ReachExit => Some(c.goal()),
            Intent::Actuate => None,
        }
    }

    /// Termination predicate: target reached, one actuation taken, or the
    /// step budget spent.
    pub fn terminated(self, world: &GridWorld, state: &EnvState, steps: usize, budget: usize) -> bool {
        if steps >= budget {
            return true;
        }
        match self {
            Intent::Actuate => steps >= 1,
            _ => self.target(world).map_or(true, |t| state.cell() == t),
        }
    }

    fn reaching(g: SubGoal) -> Option<Intent> {
        Some(match g {
            SubGoal::PickKey { id: 1 } => Intent::ReachKey1,
            SubGoal::PickKey { .. } => Intent::ReachKey2,
            SubGoal::OpenDoor { id: 1 } => Intent::ReachDoor1,
            SubGoal::OpenDoor { .. } => Intent::ReachDoor2,
            SubGoal::PickItem { id: 1 } => Intent::ReachItem1,
            SubGoal::PickItem { .. } => Intent::ReachItem2,
            SubGoal::ReachGoal => Intent::ReachExit,
            SubGoal::MoveTo { .. } => return None,
        })
    }
}

/// Intent of every step of one labeled episode. Actuation steps get
/// `Actuate`; a move step takes the reaching intent of the next actuation
/// (or the exit if none follows). Unlabeled steps stay `None`.
pub fn intent_labels(subgoals: &[Option<SubGoal>]) -> Vec<Option<Intent>> {
    let mut out = vec![None; subgoals.len()];
    let mut next = Intent::ReachExit;
    for (t, g) in subgoals.iter().enumerate().rev() {
        let Some(g) = *g else {
            continue;
        };
        match g {
            SubGoal::MoveTo { .. } => out[t] = Some(next),
            SubGoal::ReachGoal => {
                out[t] = Some(Intent::ReachExit);
                next = Intent::ReachExit;
            }
            _ => {
                out[t] = Some(Intent::Actuate);
                next = Intent::reaching(g).expect("actuation sub-goal");
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionsSample {
    pub state: EnvState,
    pub action: Action,
    pub intent: Intent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionsConfig {
    pub hidden: usize,
    /// Steps after which any option terminates.
    pub option_budget: usize,
    pub features: FeatureSpec,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_std: f64,
}

impl OptionsConfig {
    pub fn for_world(world: &GridWorld) -> Self {
        Self {
            hidden: 64,
            option_budget: 30,
            features: FeatureSpec::of(world),
            lr: 1e-3,
            batch_size: 128,
            epochs: 20,
            init_std: 0.02,
        }
    }

    fn option_mlp(&self, i: usize) -> Mlp {
        Mlp::new(format!("opt{i}"), vec![self.features.state_dim(), self.hidden, ACTION_COUNT])
    }

    fn selector_mlp(&self) -> Mlp {
        Mlp::new("selector", vec![self.features.state_dim(), self.hidden, Intent::ALL.len()])
    }

    pub fn param_builder(&self) -> ParamBuilder {
        let mut b = ParamBuilder::new();
        for i in 0..Intent::ALL.len() {
            self.option_mlp(i).declare(&mut b, self.init_std);
        }
        self.selector_mlp().declare(&mut b, self.init_std);
        b
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.hidden == 0 || self.option_budget == 0 || self.batch_size == 0 {
            return Err(BaselineError::Config("hidden, option_budget and batch_size must be positive".into()));
        }
        Ok(())
    }

    fn state_input<S: Scalar>(&self, g: &mut Graph<'_, S>, states: &[&EnvState]) -> Var {
        let feats: Vec<Vec<f64>> = states
            .iter()
            .map(|s| {
                let mut v = Vec::with_capacity(self.features.state_dim());
                self.features.encode_state(s, &mut v);
                v
            })
            .collect();
        let rows: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
        g.input(rows_tensor(&rows))
    }
}

/// Selector cross-entropy plus each option's cross-entropy on its own rows,
/// weighted by row share.
pub fn options_loss<S: Scalar>(
    cfg: &OptionsConfig,
    g: &mut Graph<'_, S>,
    batch: &[&OptionsSample],
) -> Result<Var, BaselineError> {
    let states: Vec<&EnvState> = batch.iter().map(|s| &s.state).collect();
    let x = cfg.state_input(g, &states);
    let sel = cfg.selector_mlp().forward(g, x)?;
    let intents: Vec<usize> = batch.iter().map(|s| s.intent.index()).collect();
    let mut loss = g.cross_entropy(sel, &intents)?;
    for i in 0..Intent::ALL.len() {
        let rows: Vec<usize> = (0..batch.len()).filter(|&r| intents[r] == i).collect();
        if rows.is_empty() {
            continue;
        }
        let xi = g.select_rows(x, &rows)?;
        let logits = cfg.option_mlp(i).forward(g, xi)?;
        let targets: Vec<usize> = rows.iter().map(|&r| batch[r].action.code()).collect();
        let ce = g.cross_entropy(logits, &targets)?;
        let weighted = g.scale(ce, S::of(rows.len() as f64 / batch.len() as f64));
        loss = g.add(loss, weighted)?;
    }
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct OptionsPolicy {
    pub config: OptionsConfig,
    pub params: ParamStore<f32>,
}

const MODEL_NAME: &str = "options";

impl OptionsPolicy {
    pub fn new(config: OptionsConfig, seed: u64) -> Result<Self, BaselineError> {
        config.validate()?;
        let params = config.param_builder().build(seed)?;
        Ok(Self { config, params })
    }

    pub fn train(config: OptionsConfig, samples: &[OptionsSample], seed: u64) -> Result<(Self, Vec<f64>), BaselineError> {
        let mut net = Self::new(config, seed)?;
        let cfg = net.config.clone();
        let losses = fit(&mut net.params, samples.len(), cfg.batch_size, cfg.epochs, cfg.lr, seed, |g, idx| {
            let batch: Vec<&OptionsSample> = idx.iter().map(|&i| &samples[i]).collect();
            options_loss(&cfg, g, &batch)
        })?;
        Ok((net, losses))
    }

    /// Selector distribution over the eight options, one row per state.
    pub fn selector_probs(&self, states: &[&EnvState]) -> Result<Vec<Vec<f64>>, BaselineError> {
        let mut g = Graph::new(&self.params);
        let x = self.config.state_input(&mut g, states);
        let logits = self.config.selector_mlp().forward(&mut g, x)?;
        Ok(g
            .data(logits)
            .chunks(Intent::ALL.len())
            .map(|row| {
                let mut p: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                crate::neural::softmax_in_place(&mut p);
                p
            })
            .collect())
    }

    /// Action distribution of option `i`, one row per state.
    pub fn option_probs(&self, i: usize, states: &[&EnvState]) -> Result<Vec<[f64; ACTION_COUNT]>, BaselineError> {
        let mut g = Graph::new(&self.params);
        let x = self.config.state_input(&mut g, states);
        let logits = self.config.option_mlp(i).forward(&mut g, x)?;
        Ok(g.data(logits).chunks(ACTION_COUNT).map(softmax_row).collect())
    }

    /// Most probable option that would not terminate immediately.
    fn select(&self, world: &GridWorld, state: &EnvState, probs: &[f64]) -> usize {
        let budget = self.config.option_budget;
        (0..Intent::ALL.len())
            .filter(|&i| !Intent::ALL[i].terminated(world, state, 0, budget))
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if probs[b] >= probs[i] => Some(b),
                _ => Some(i),
            })
            .unwrap_or(Intent::Actuate.index())
    }

    /// Advances `memory` to the option acting in `state`.
    pub fn active_option(&self, world: &GridWorld, state: &EnvState, probs: &[f64], memory: &mut PolicyMemory) -> usize {
        let budget = self.config.option_budget;
        if let Some((i, n)) = memory.option {
            if !Intent::ALL[i].terminated(world, state, n, budget) {
                return i;
            }
        }
        let i = self.select(world, state, probs);
        memory.option = Some((i, 0));
        i
    }

    /// Runs option `intent` alone from episode `index` until it terminates;
    /// returns whether it ended on its target.
    pub fn probe_option(&self, world: &GridWorld, intent: Intent, index: u64) -> bool {
        let mut ep = world.episode(index);
        let budget = self.config.option_budget;
        let mut steps = 0;
        while !intent.terminated(world, &ep.state(), steps, budget) {
            let d = self.option_probs(intent.index(), &[&ep.state()]).expect("state features");
            let r = ep.step(greedy(&d[0])).expect("episode is live");
            steps += 1;
            if r.done {
                break;
            }
        }
        intent.target(world).is_some_and(|t| ep.state().cell() == t)
    }

    pub fn save(&self, path: &Path) -> Result<(), BaselineError> {
        save_model(path, &self.params, MODEL_NAME, &self.config)
    }

    pub fn load(path: &Path) -> Result<Self, BaselineError> {
        let (config, params) = load_model(path, MODEL_NAME, |c: &OptionsConfig| c.param_builder())?;
        Ok(Self { config, params })
    }
}

impl Policy for OptionsPolicy {
    fn name(&self) -> &str {
        "OptionsHRL"
    }

    fn conditioned(&self) -> bool {
        false
    }

    fn act(&self, queries: &mut [Query<'_>]) -> Vec<Option<[f64; ACTION_COUNT]>> {
        let owned: Vec<EnvState> = queries.iter().map(|q| *q.state()).collect();
        let states: Vec<&EnvState> = owned.iter().collect();
        let sel = self.selector_probs(&states).expect("state features");
        let chosen: Vec<usize> = queries
            .iter_mut()
            .zip(&sel)
            .map(|(q, p)| {
                let state = *q.state();
                self.active_option(q.world, &state, p, q.memory)
            })
            .collect();
        let mut out = vec![None; queries.len()];
        for i in 0..Intent::ALL.len() {
            let rows: Vec<usize> = (0..queries.len()).filter(|&r| chosen[r] == i).collect();
            if rows.is_empty() {
                continue;
            }
            let sub: Vec<&EnvState> = rows.iter().map(|&r| states[r]).collect();
            let probs = self.option_probs(i, &sub).expect("state features");
            for (&r, p) in rows.iter().zip(probs) {
                out[r] = Some(p);
            }
        }
        for q in queries.iter_mut() {
            if let Some((i, n)) = q.memory.option {
                q.memory.option = Some((i, n + 1));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::Flags;

    fn world() -> GridWorld {
        GridWorld::preset("case2_default").unwrap()
    }

    #[test]
    fn labels_follow_the_next_actuation() {
        let mv = Some(SubGoal::MoveTo { cell: Cell::new(0, 0) });
        let labels = intent_labels(&[mv, mv, Some(SubGoal::PickKey { id: 2 }), mv, None, Some(SubGoal::OpenDoor { id: 1 }), mv]);
        assert_eq!(
            labels,
            vec![
                Some(Intent::ReachKey2),
                Some(Intent::ReachKey2),
                Some(Intent::Actuate),
                Some(Intent::ReachDoor1),
                None,
                Some(Intent::Actuate),
                Some(Intent::ReachExit),
            ]
        );
    }

    #[test]
    fn selector_covers_eight_options() {
        let w = world();
        let p = OptionsPolicy::new(OptionsConfig::for_world(&w), 1).unwrap();
        let probs = p.selector_probs(&[&w.reset()]).unwrap();
        assert_eq!(probs[0].len(), 8);
        assert!((probs[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn option_stops_at_budget() {
        let w = world();
        let s = w.reset();
        assert!(!Intent::ReachExit.terminated(&w, &s, 29, 30));
        assert!(Intent::ReachExit.terminated(&w, &s, 30, 30));
        assert!(!Intent::Actuate.terminated(&w, &s, 0, 30));
        assert!(Intent::Actuate.terminated(&w, &s, 1, 30));
        let on_key = w.state_at(w.config().key_cell(1).unwrap(), Flags::new(w.flag_count()));
        assert!(Intent::ReachKey1.terminated(&w, &on_key, 0, 30));
    }

    #[test]
    fn memory_keeps_option_until_termination() {
        let w = world();
        let p = OptionsPolicy::new(OptionsConfig::for_world(&w), 1).unwrap();
        let s = w.reset();
        let mut mem = PolicyMemory::default();
        let mut probs = vec![0.0; 8];
        probs[Intent::ReachExit.index()] = 1.0;
        assert_eq!(p.active_option(&w, &s, &probs, &mut mem), Intent::ReachExit.index());
        probs = vec![0.0; 8];
        probs[Intent::Actuate.index()] = 1.0;
        mem.option = Some((Intent::ReachExit.index(), 5));
        assert_eq!(p.active_option(&w, &s, &probs, &mut mem), Intent::ReachExit.index());
        mem.option = Some((Intent::ReachExit.index(), 30));
        assert_eq!(p.active_option(&w, &s, &probs, &mut mem), Intent::Actuate.index());
        assert_eq!(mem.option, Some((Intent::Actuate.index(), 0)));
    }
}
