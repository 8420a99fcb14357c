//! Sub-goal-conditioned decision transformer.
//!
//! Input slots for a window of `k <= h` past steps are
//! `s_{t-k}, a_{t-k}, ..., s_{t-1}, a_{t-1}, s_t` followed, in hybrid mode,
//! by one sub-goal token. Slots are right-aligned in a frame of
//! `2h + 1` (pure) or `2h + 2` (hybrid) positions and the readout is the last
//! slot. Missing history is front padding that is masked as attention keys.
//!
//! Padded rows can neither influence nor be influenced by valid rows, so a
//! batch is materialized only as wide as its longest sequence; valid rows are
//! the same as in the full frame.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Action, CaseId, Cell, EnvState, GridWorld};
use crate::neural::{
    load_checkpoint, save_checkpoint, AdamConfig, AdamState, Graph, Init, NeuralError, ParamBuilder, ParamStore,
    Scalar, SeqShape, Tensor, Var,
};

pub const ACTION_COUNT: usize = 5;
/// Row of the action table used for padding slots.
pub const PAD_ACTION: usize = 5;
const SUBGOAL_KINDS: usize = 5;
const SUBGOAL_IDS: usize = 2;

#[derive(Debug, Error)]
pub enum DtError {
    #[error("token sequence: {0}")]
    Structure(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// Conditioning target derived from one symbolic operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubGoal {
    MoveTo { cell: Cell },
    PickKey { id: u8 },
    OpenDoor { id: u8 },
    PickItem { id: u8 },
    ReachGoal,
}

impl SubGoal {
    fn kind_index(self) -> usize {
        match self {
            SubGoal::MoveTo { .. } => 0,
            SubGoal::PickKey { .. } => 1,
            SubGoal::OpenDoor { .. } => 2,
            SubGoal::PickItem { .. } => 3,
            SubGoal::ReachGoal => 4,
        }
    }

    pub fn id(self) -> Option<u8> {
        match self {
            SubGoal::PickKey { id } | SubGoal::OpenDoor { id } | SubGoal::PickItem { id } => Some(id),
            _ => None,
        }
    }

    pub fn target_cell(self) -> Option<Cell> {
        match self {
            SubGoal::MoveTo { cell } => Some(cell),
            _ => None,
        }
    }
}

impl std::fmt::Display for SubGoal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SubGoal::MoveTo { cell } => write!(f, "MoveTo{cell}"),
            SubGoal::PickKey { id } => write!(f, "PickKey({id})"),
            SubGoal::OpenDoor { id } => write!(f, "OpenDoor({id})"),
            SubGoal::PickItem { id } => write!(f, "PickItem({id})"),
            SubGoal::ReachGoal => f.write_str("ReachGoal"),
        }
    }
}

/// Grid geometry the token features are built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub height: usize,
    pub width: usize,
    pub flag_count: usize,
}

impl FeatureSpec {
    pub fn of(world: &GridWorld) -> Self {
        Self { height: world.height(), width: world.width(), flag_count: world.flag_count() }
    }

    pub fn state_dim(&self) -> usize {
        self.height + self.width + self.flag_count
    }

    pub fn subgoal_dim(&self) -> usize {
        SUBGOAL_KINDS + SUBGOAL_IDS + self.height + self.width
    }

    /// Row one-hot, column one-hot, flag bits.
    pub fn encode_state(&self, s: &EnvState, out: &mut Vec<f64>) {
        let base = out.len();
        out.resize(base + self.state_dim(), 0.0);
        out[base + s.row] = 1.0;
        out[base + self.height + s.col] = 1.0;
        for (i, f) in s.flags.iter().enumerate() {
            if f {
                out[base + self.height + self.width + i] = 1.0;
            }
        }
    }

    /// Kind one-hot, id one-hot, target row and column one-hots. Blocks that
    /// do not apply stay zero.
    pub fn encode_subgoal(&self, g: &SubGoal, out: &mut Vec<f64>) {
        let base = out.len();
        out.resize(base + self.subgoal_dim(), 0.0);
        out[base + g.kind_index()] = 1.0;
        if let Some(id) = g.id() {
            out[base + SUBGOAL_KINDS + (id as usize - 1).min(SUBGOAL_IDS - 1)] = 1.0;
        }
        if let Some(c) = g.target_cell() {
            let o = base + SUBGOAL_KINDS + SUBGOAL_IDS;
            out[o + c.row] = 1.0;
            out[o + self.height + c.col] = 1.0;
        }
    }
}

pub fn encode_state(world: &GridWorld, s: &EnvState) -> Vec<f64> {
    let mut v = Vec::new();
    FeatureSpec::of(world).encode_state(s, &mut v);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtMode {
    Hybrid,
    Pure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtConfig {
    pub mode: DtMode,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    /// Window length `h`.
    pub context: usize,
    pub ffn_mult: usize,
    pub activation: Activation,
    pub features: FeatureSpec,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_std: f64,
}

impl DtConfig {
    pub fn for_case(case: CaseId, mode: DtMode, features: FeatureSpec) -> Self {
        let (layers, context) = match case {
            CaseId::Single => (3, 10),
            CaseId::MultiGoal => (5, 20),
        };
        Self {
            mode,
            layers,
            heads: 4,
            embed_dim: 128,
            context,
            ffn_mult: 4,
            activation: Activation::Gelu,
            features,
            lr: 1e-3,
            batch_size: 128,
            epochs: 20,
            init_std: 0.02,
        }
    }

    pub fn for_world(world: &GridWorld, mode: DtMode) -> Self {
        Self::for_case(world.case(), mode, FeatureSpec::of(world))
    }

    pub fn validate(&self) -> Result<(), DtError> {
        let bad = |m: &str| Err(DtError::Config(m.into()));
        if self.layers == 0 || self.heads == 0 || self.embed_dim == 0 || self.ffn_mult == 0 {
            return bad("layers, heads, embed_dim and ffn_mult must be positive");
        }
        if self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be divisible by heads");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0) {
            return bad("learning rate must be non-negative");
        }
        Ok(())
    }

    pub fn conditioned(&self) -> bool {
        self.mode == DtMode::Hybrid
    }

    /// Slots in a full frame: `2h + 1`, plus one for the sub-goal.
    pub fn slots(&self) -> usize {
        2 * self.context + 1 + usize::from(self.conditioned())
    }

    pub fn param_builder(&self) -> ParamBuilder {
        let d = self.embed_dim;
        let std = self.init_std;
        let f = self.features;
        let mut b = ParamBuilder::new();
        b.linear("embed.state", f.state_dim(), d, std);
        b.add("embed.action", &[ACTION_COUNT + 1, d], Init::Normal(std));
        if self.conditioned() {
            b.linear("embed.subgoal", f.subgoal_dim(), d, std);
            b.add("embed.subgoal.marker", &[d], Init::Normal(std));
        }
        b.add("embed.pos", &[self.slots(), d], Init::Normal(std));
        for l in 0..self.layers {
            let p = format!("block{l}");
            b.add(format!("{p}.ln1.g"), &[d], Init::Ones).add(format!("{p}.ln1.b"), &[d], Init::Zeros);
            for w in ["wq", "wk", "wv", "wo"] {
                b.add(format!("{p}.attn.{w}"), &[d, d], Init::Normal(std));
            }
            b.add(format!("{p}.ln2.g"), &[d], Init::Ones).add(format!("{p}.ln2.b"), &[d], Init::Zeros);
            b.linear(&format!("{p}.ffn.1"), d, d * self.ffn_mult, std);
            b.linear(&format!("{p}.ffn.2"), d * self.ffn_mult, d, std);
        }
        b.add("ln_f.g", &[d], Init::Ones).add("ln_f.b", &[d], Init::Zeros);
        b.linear("head", d, ACTION_COUNT, std);
        b
    }
}

/// Window of `k <= h` past steps ending at the current state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    /// `s_{t-k} ..= s_t`.
    pub states: Vec<EnvState>,
    /// `a_{t-k} .. a_{t-1}`.
    pub actions: Vec<Action>,
    pub subgoal: Option<SubGoal>,
}

impl TokenSequence {
    pub fn new(states: Vec<EnvState>, actions: Vec<Action>, subgoal: Option<SubGoal>) -> Self {
        Self { states, actions, subgoal }
    }

    /// The last `h` steps of a history, where `states` has one more entry
    /// than `actions`.
    pub fn window(states: &[EnvState], actions: &[Action], h: usize, subgoal: Option<SubGoal>) -> Self {
        let k = actions.len().min(h);
        Self {
            states: states[states.len() - k - 1..].to_vec(),
            actions: actions[actions.len() - k..].to_vec(),
            subgoal,
        }
    }

    pub fn history_len(&self) -> usize {
        self.actions.len()
    }

    fn check(&self, cfg: &DtConfig) -> Result<usize, DtError> {
        let k = self.actions.len();
        if self.states.len() != k + 1 {
            return Err(DtError::Structure(format!("{} states for {k} actions", self.states.len())));
        }
        if k > cfg.context {
            return Err(DtError::Structure(format!(
                "{} slots exceed the {}-slot frame",
                2 * k + 1 + usize::from(cfg.conditioned()),
                cfg.slots()
            )));
        }
        match (cfg.conditioned(), self.subgoal.is_some()) {
            (true, false) => Err(DtError::Structure("hybrid model needs a sub-goal token".into())),
            (false, true) => Err(DtError::Structure("pure model takes no sub-goal token".into())),
            _ => Ok(2 * k + 1 + usize::from(cfg.conditioned())),
        }
    }
}

/// One supervised prediction: context and the action actually taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub seq: TokenSequence,
    pub target: Action,
}

/// One training sample per step of an episode. `subgoals[t]` labels step
/// `t`; in hybrid mode unlabeled steps are skipped.
pub fn episode_samples(
    states: &[EnvState],
    actions: &[Action],
    subgoals: &[Option<SubGoal>],
    cfg: &DtConfig,
) -> Vec<Sample> {
    assert!(states.len() > actions.len() || states.len() == actions.len(), "one state per action");
    (0..actions.len())
        .filter_map(|t| {
            let g = if cfg.conditioned() { Some(subgoals.get(t).copied().flatten()?) } else { None };
            Some(Sample {
                seq: TokenSequence::window(&states[..=t], &actions[..t], cfg.context, g),
                target: actions[t],
            })
        })
        .collect()
}

enum SlotKind {
    State(usize),
    Action(usize),
    Subgoal,
}

fn slot_kind(cfg: &DtConfig, k: usize, slot_from_end: usize) -> SlotKind {
    // slot_from_end == 0 is the readout slot
    let mut j = slot_from_end;
    if cfg.conditioned() {
        if j == 0 {
            return SlotKind::Subgoal;
        }
        j -= 1;
    }
    // j counts back from s_t: even -> state, odd -> action
    let step_back = j / 2;
    if j % 2 == 0 {
        SlotKind::State(k - step_back)
    } else {
        SlotKind::Action(k - 1 - step_back)
    }
}

/// Action logits, one row per sequence.
pub fn forward<S: Scalar>(cfg: &DtConfig, g: &mut Graph<'_, S>, batch: &[&TokenSequence]) -> Result<Var, DtError> {
    forward_impl(cfg, g, batch, false)
}

/// Head output at every slot of the padded frame: row `b * width + r` is
/// slot `r` of sequence `b`, with `width` the longest sequence in the batch.
/// Only the last row of each sequence is a prediction; the rest exist to
/// check that no slot sees a later one.
pub fn forward_all_slots<S: Scalar>(
    cfg: &DtConfig,
    g: &mut Graph<'_, S>,
    batch: &[&TokenSequence],
) -> Result<Var, DtError> {
    forward_impl(cfg, g, batch, true)
}

fn forward_impl<S: Scalar>(
    cfg: &DtConfig,
    g: &mut Graph<'_, S>,
    batch: &[&TokenSequence],
    all_slots: bool,
) -> Result<Var, DtError> {
    if batch.is_empty() {
        return Err(DtError::Usage("empty batch".into()));
    }
    let lens: Vec<usize> = batch.iter().map(|s| s.check(cfg)).collect::<Result<_, _>>()?;
    let p = g.params();
    let id = |n: &str| p.id(n);
    let width = *lens.iter().max().expect("nonempty");
    let frame = cfg.slots();
    let rows = batch.len() * width;
    let f = cfg.features;

    let mut state_feats = Vec::new();
    let mut state_rows = Vec::new();
    let mut action_idx = Vec::new();
    let mut action_rows = Vec::new();
    let mut sub_feats = Vec::new();
    let mut sub_rows = Vec::new();
    let mut pos_idx = Vec::with_capacity(rows);
    let mut key_valid = Vec::with_capacity(rows);
    let mut readout = Vec::with_capacity(batch.len());
    for (b, (seq, &n)) in batch.iter().zip(&lens).enumerate() {
        let k = seq.history_len();
        for r in 0..width {
            let row = b * width + r;
            let from_end = width - 1 - r;
            pos_idx.push(frame - 1 - from_end);
            let valid = from_end < n;
            key_valid.push(valid);
            if !valid {
                action_idx.push(PAD_ACTION);
                action_rows.push(row);
                continue;
            }
            match slot_kind(cfg, k, from_end) {
                SlotKind::State(i) => {
                    f.encode_state(&seq.states[i], &mut state_feats);
                    state_rows.push(row);
                }
                SlotKind::Action(i) => {
                    action_idx.push(seq.actions[i].code());
                    action_rows.push(row);
                }
                SlotKind::Subgoal => {
                    f.encode_subgoal(seq.subgoal.as_ref().expect("checked"), &mut sub_feats);
                    sub_rows.push(row);
                }
            }
        }
        readout.push(b * width + width - 1);
    }

    let mut parts = Vec::new();
    let sx = g.input(Tensor::from_f64(state_rows.len(), f.state_dim(), &state_feats));
    let (sw, sb) = (g.param(id("embed.state.w")?), g.param(id("embed.state.b")?));
    parts.push((g.affine(sx, sw, sb)?, state_rows));
    if !action_rows.is_empty() {
        let table = g.param(id("embed.action")?);
        parts.push((g.gather(table, &action_idx)?, action_rows));
    }
    if !sub_rows.is_empty() {
        let gx = g.input(Tensor::from_f64(sub_rows.len(), f.subgoal_dim(), &sub_feats));
        let (gw, gb) = (g.param(id("embed.subgoal.w")?), g.param(id("embed.subgoal.b")?));
        let e = g.affine(gx, gw, gb)?;
        let marker = g.param(id("embed.subgoal.marker")?);
        parts.push((g.add_row(e, marker)?, sub_rows));
    }
    let tokens = g.assemble_rows(rows, parts)?;
    let pos_table = g.param(id("embed.pos")?);
    let pos = g.gather(pos_table, &pos_idx)?;
    let mut x = g.add(tokens, pos)?;

    let shape = SeqShape { batch: batch.len(), seq: width, heads: cfg.heads };
    for l in 0..cfg.layers {
        let pre = format!("block{l}");
        let pid = |s: &str| id(&format!("{pre}.{s}"));
        let (g1, b1) = (g.param(pid("ln1.g")?), g.param(pid("ln1.b")?));
        let h = g.layer_norm(x, g1, b1)?;
        let (wq, wk, wv) = (g.param(pid("attn.wq")?), g.param(pid("attn.wk")?), g.param(pid("attn.wv")?));
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        let mut a = g.causal_attention(q, k, v, shape, Some(&key_valid))?;
        if l + 1 == cfg.layers && !all_slots {
            // only the readout rows feed the head
            a = g.select_rows(a, &readout)?;
            x = g.select_rows(x, &readout)?;
        }
        let wo = g.param(pid("attn.wo")?);
        let o = g.matmul(a, wo)?;
        x = g.add(x, o)?;
        let (g2, b2) = (g.param(pid("ln2.g")?), g.param(pid("ln2.b")?));
        let h = g.layer_norm(x, g2, b2)?;
        let (w1, bb1) = (g.param(pid("ffn.1.w")?), g.param(pid("ffn.1.b")?));
        let u = g.affine(h, w1, bb1)?;
        let u = match cfg.activation {
            Activation::Gelu => g.gelu(u),
            Activation::Relu => g.relu(u),
        };
        let (w2, bb2) = (g.param(pid("ffn.2.w")?), g.param(pid("ffn.2.b")?));
        let u = g.affine(u, w2, bb2)?;
        x = g.add(x, u)?;
    }
    let (gf, bf) = (g.param(id("ln_f.g")?), g.param(id("ln_f.b")?));
    let x = g.layer_norm(x, gf, bf)?;
    let (hw, hb) = (g.param(id("head.w")?), g.param(id("head.b")?));
    Ok(g.affine(x, hw, hb)?)
}

/// Mean negative log-likelihood of the recorded actions.
pub fn nll_loss<S: Scalar>(cfg: &DtConfig, g: &mut Graph<'_, S>, batch: &[&Sample]) -> Result<Var, DtError> {
    if batch.is_empty() {
        return Err(DtError::Usage("NLL over an empty batch".into()));
    }
    let seqs: Vec<&TokenSequence> = batch.iter().map(|s| &s.seq).collect();
    let logits = forward(cfg, g, &seqs)?;
    let targets: Vec<usize> = batch.iter().map(|s| s.target.code()).collect();
    Ok(g.cross_entropy(logits, &targets)?)
}

/// Index of the largest probability; ties go to the lowest action code.
pub fn greedy(dist: &[f64]) -> Action {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    Action::from_code(best).expect("five actions")
}

pub fn sample_action<R: Rng>(dist: &[f64], rng: &mut R) -> Action {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return Action::from_code(i).expect("five actions");
        }
    }
    greedy(dist)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub samples: usize,
}

/// Trained model: configuration plus `f32` parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTransformer {
    pub config: DtConfig,
    pub params: ParamStore<f32>,
}

impl DecisionTransformer {
    pub fn new(config: DtConfig, seed: u64) -> Result<Self, DtError> {
        config.validate()?;
        let params = config.param_builder().build(seed)?;
        Ok(Self { config, params })
    }

    pub fn zeros(config: DtConfig) -> Result<Self, DtError> {
        let mut m = Self::new(config, 0)?;
        m.params.fill_zero();
        Ok(m)
    }

    /// Action distributions for a batch of windows.
    pub fn predict_batch(&self, batch: &[&TokenSequence]) -> Result<Vec<[f64; ACTION_COUNT]>, DtError> {
        let mut g = Graph::new(&self.params);
        let logits = forward(&self.config, &mut g, batch)?;
        Ok(g.data(logits).chunks(ACTION_COUNT).map(softmax5).collect())
    }

    pub fn predict_action(&self, seq: &TokenSequence) -> Result<[f64; ACTION_COUNT], DtError> {
        Ok(self.predict_batch(&[seq])?[0])
    }

    pub fn save(&self, path: &Path) -> Result<(), DtError> {
        let hyper = serde_json::to_value(&self.config).map_err(NeuralError::from)?;
        Ok(save_checkpoint(path, &self.params, &serde_json::json!({ "model": "decision_transformer", "config": hyper }))?)
    }

    pub fn load(path: &Path) -> Result<Self, DtError> {
        let (params, header) = load_checkpoint(path)?;
        let config: DtConfig = serde_json::from_value(header.hyperparameters["config"].clone())
            .map_err(|e| DtError::Config(format!("checkpoint hyperparameters: {e}")))?;
        let expected = config.param_builder().build::<f32>(0)?;
        if expected.layout().segments() != params.layout().segments() {
            return Err(DtError::Config("checkpoint layout does not match its configuration".into()));
        }
        Ok(Self { config, params })
    }
}

fn softmax5<S: Scalar>(logits: &[S]) -> [f64; ACTION_COUNT] {
    let mut out = [0.0; ACTION_COUNT];
    for (o, l) in out.iter_mut().zip(logits) {
        *o = l.as_f64();
    }
    crate::neural::softmax_in_place(&mut out);
    out
}

/// Mini-batch NLL training with Adam. Initialization and the shuffle
/// stream are both derived from `seed`.
pub fn train(cfg: &DtConfig, samples: &[Sample], seed: u64) -> Result<(DecisionTransformer, TrainReport), DtError> {
    train_with(cfg, samples, seed, |_, _| {})
}

pub fn train_with(
    cfg: &DtConfig,
    samples: &[Sample],
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(DecisionTransformer, TrainReport), DtError> {
    if samples.is_empty() {
        return Err(DtError::Config("training set is empty".into()));
    }
    if cfg.conditioned() && samples.iter().all(|s| s.seq.subgoal.is_none()) {
        return Err(DtError::Config("hybrid training needs sub-goal labeled segments".into()));
    }
    let mut model = DecisionTransformer::new(cfg.clone(), seed)?;
    let mut opt = AdamState::new(&model.params, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let grads = {
                let mut g = Graph::new(&model.params);
                let loss = nll_loss(cfg, &mut g, &batch)?;
                total += g.data(loss)[0] as f64 * batch.len() as f64;
                g.backward(loss)?
            };
            opt.update(&mut model.params, &grads)?;
        }
        let mean = total / samples.len() as f64;
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
    }
    Ok((model, TrainReport { epoch_losses, samples: samples.len() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::Flags;

    fn world() -> GridWorld {
        GridWorld::preset("case1_default").unwrap()
    }

    fn tiny(mode: DtMode) -> DtConfig {
        let mut c = DtConfig::for_world(&world(), mode);
        c.layers = 2;
        c.embed_dim = 8;
        c.heads = 2;
        c.context = 3;
        c.init_std = 0.3;
        c
    }

    fn random_seq(rng: &mut ChaCha8Rng, cfg: &DtConfig, k: usize) -> TokenSequence {
        let w = world();
        let states = (0..=k)
            .map(|_| {
                let mut flags = Flags::new(2);
                if rng.gen_bool(0.5) {
                    flags.set(0);
                }
                w.state_at(Cell::new(rng.gen_range(0..5), rng.gen_range(0..5)), flags)
            })
            .collect();
        let actions = (0..k).map(|_| Action::ALL[rng.gen_range(0..5)]).collect();
        let g = cfg.conditioned().then(|| SubGoal::MoveTo { cell: Cell::new(rng.gen_range(0..5), rng.gen_range(0..5)) });
        TokenSequence::new(states, actions, g)
    }

    #[test]
    fn defaults_per_case() {
        let c1 = DtConfig::for_world(&world(), DtMode::Hybrid);
        assert_eq!((c1.layers, c1.heads, c1.embed_dim, c1.context), (3, 4, 128, 10));
        assert_eq!(c1.slots(), 22);
        let w2 = GridWorld::preset("case2_default").unwrap();
        let c2 = DtConfig::for_world(&w2, DtMode::Pure);
        assert_eq!((c2.layers, c2.context, c2.slots()), (5, 20, 41));
    }

    #[test]
    fn state_features_are_one_hot_and_sized() {
        let w = world();
        let f = FeatureSpec::of(&w);
        assert_eq!(f.state_dim(), 5 + 5 + 2);
        let a = encode_state(&w, &w.state_at(Cell::new(1, 2), Flags::new(2)));
        let b = encode_state(&w, &w.state_at(Cell::new(1, 3), Flags::new(2)));
        assert_ne!(a, b);
        assert_eq!(a.iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn subgoal_features() {
        let f = FeatureSpec::of(&world());
        let enc = |g: SubGoal| {
            let mut v = Vec::new();
            f.encode_subgoal(&g, &mut v);
            v
        };
        assert_ne!(enc(SubGoal::MoveTo { cell: Cell::new(2, 3) }), enc(SubGoal::MoveTo { cell: Cell::new(2, 4) }));
        let pk = enc(SubGoal::PickKey { id: 1 });
        assert!(pk[SUBGOAL_KINDS + SUBGOAL_IDS..].iter().all(|&v| v == 0.0));
        assert_ne!(pk, enc(SubGoal::PickKey { id: 2 }));
    }

    #[test]
    fn zero_parameters_give_uniform_distribution() {
        for mode in [DtMode::Hybrid, DtMode::Pure] {
            let m = DecisionTransformer::zeros(tiny(mode)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let seq = random_seq(&mut rng, &m.config, 2);
            let d = m.predict_action(&seq).unwrap();
            assert!(d.iter().all(|&p| (p - 0.2).abs() < 1e-12));
        }
    }

    #[test]
    fn structural_errors() {
        let m = DecisionTransformer::new(tiny(DtMode::Hybrid), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let long = random_seq(&mut rng, &m.config, 4);
        assert!(matches!(m.predict_action(&long), Err(DtError::Structure(_))));
        let mut missing = random_seq(&mut rng, &m.config, 1);
        missing.subgoal = None;
        assert!(matches!(m.predict_action(&missing), Err(DtError::Structure(_))));
        let cfg = m.config.clone();
        let mut g = Graph::new(&m.params);
        assert!(matches!(nll_loss(&cfg, &mut g, &[]), Err(DtError::Usage(_))));
    }

    #[test]
    fn batching_and_padding_do_not_change_predictions() {
        let m = DecisionTransformer::new(tiny(DtMode::Hybrid), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seqs: Vec<TokenSequence> = (0..4).map(|k| random_seq(&mut rng, &m.config, k)).collect();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let batched = m.predict_batch(&refs).unwrap();
        for (s, b) in seqs.iter().zip(&batched) {
            let single = m.predict_action(s).unwrap();
            for (x, y) in single.iter().zip(b) {
                assert!((x - y).abs() < 1e-6);
            }
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_of_uniform_model_is_ln5() {
        let m = DecisionTransformer::zeros(tiny(DtMode::Pure)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<Sample> =
            (0..6).map(|i| Sample { seq: random_seq(&mut rng, &m.config, i % 4), target: Action::ALL[i % 5] }).collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut g = Graph::new(&m.params);
        let l = nll_loss(&m.config, &mut g, &refs).unwrap();
        assert!((g.data(l)[0] as f64 - 5f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn greedy_breaks_ties_by_lowest_code() {
        assert_eq!(greedy(&[0.2; 5]), Action::Up);
        assert_eq!(greedy(&[0.1, 0.3, 0.3, 0.2, 0.1]), Action::Right);
        assert_eq!(greedy(&[0.0, 0.0, 0.0, 0.0, 1.0]), Action::PickOpen);
    }

    #[test]
    fn hybrid_training_requires_labels_and_zero_lr_is_a_no_op() {
        let mut cfg = tiny(DtMode::Hybrid);
        cfg.epochs = 2;
        cfg.batch_size = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<Sample> =
            (0..10).map(|i| Sample { seq: random_seq(&mut rng, &cfg, i % 3), target: Action::ALL[i % 5] }).collect();
        let mut unlabeled = samples.clone();
        unlabeled.iter_mut().for_each(|s| s.seq.subgoal = None);
        assert!(matches!(train(&cfg, &unlabeled, 0), Err(DtError::Config(_))));
        assert!(matches!(train(&cfg, &[], 0), Err(DtError::Config(_))));

        cfg.lr = 0.0;
        let (m, rep) = train(&cfg, &samples, 9).unwrap();
        assert_eq!(m.params, DecisionTransformer::new(cfg.clone(), 9).unwrap().params);
        assert_eq!(rep.epoch_losses.len(), 2);

        cfg.lr = 1e-2;
        let (a, _) = train(&cfg, &samples, 9).unwrap();
        let (b, _) = train(&cfg, &samples, 9).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn checkpoint_preserves_predictions() {
        let m = DecisionTransformer::new(tiny(DtMode::Hybrid), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dt.ckpt");
        m.save(&path).unwrap();
        let r = DecisionTransformer::load(&path).unwrap();
        assert_eq!(r.config, m.config);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_seq(&mut rng, &m.config, 3);
        assert_eq!(m.predict_action(&s).unwrap(), r.predict_action(&s).unwrap());
        let st = m.params.by_name("embed.state.w").unwrap();
        assert_eq!(st, r.params.by_name("embed.state.w").unwrap());
    }

    #[test]
    fn episode_samples_follow_the_window() {
        let cfg = tiny(DtMode::Hybrid);
        let w = world();
        let s0 = w.reset();
        let states: Vec<EnvState> = (0..6).map(|i| w.state_at(Cell::new(0, i % 5), Flags::new(2))).collect();
        let actions = vec![Action::Right; 5];
        let mut labels = vec![Some(SubGoal::MoveTo { cell: Cell::new(0, 4) }); 5];
        labels[1] = None;
        let out = episode_samples(&states, &actions, &labels, &cfg);
        assert_eq!(out.len(), 4);
        assert_eq!(out[0].seq.states, vec![s0]);
        assert_eq!(out[3].seq.history_len(), 3);
        assert_eq!(*out[3].seq.states.last().unwrap(), states[4]);
    }
}
