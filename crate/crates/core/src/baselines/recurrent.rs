//! Stacked LSTM and GRU controllers over the windowed state/action history.
//!
//! Each time step consumes `state features ⧺ previous-action one-hot` (the
//! first step of a window has the "none" action), plus the sub-goal features
//! for conditioned variants. Histories are right-aligned; hidden state stays
//! zero until a row's first valid step.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dt::{FeatureSpec, Sample, TokenSequence, ACTION_COUNT, PAD_ACTION};
use crate::gridworld::GridWorld;
use crate::hierarchy::{Policy, Query};
use crate::neural::{Graph, Init, ParamBuilder, ParamStore, Scalar, Tensor, Var};

use super::{fit, load_model, save_model, softmax_row, BaselineError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Lstm,
    Gru,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentConfig {
    pub cell: CellKind,
    pub layers: usize,
    pub hidden: usize,
    /// Whether each input carries the active sub-goal.
    pub conditioned: bool,
    /// Window length `h`, shared with the transformer.
    pub context: usize,
    pub features: FeatureSpec,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_std: f64,
}

impl RecurrentConfig {
    fn base(world: &GridWorld, cell: CellKind, layers: usize, hidden: usize, conditioned: bool) -> Self {
        let dt = crate::dt::DtConfig::for_world(world, crate::dt::DtMode::Pure);
        Self {
            cell,
            layers,
            hidden,
            conditioned,
            context: dt.context,
            features: dt.features,
            lr: dt.lr,
            batch_size: dt.batch_size,
            epochs: dt.epochs,
            init_std: dt.init_std,
        }
    }

    /// Three 256-unit LSTM layers, sub-goal conditioned.
    pub fn lstm(world: &GridWorld) -> Self {
        Self::base(world, CellKind::Lstm, 3, 256, true)
    }

    /// Two 128-unit GRU layers, unconditioned.
    pub fn gru(world: &GridWorld) -> Self {
        Self::base(world, CellKind::Gru, 2, 128, false)
    }

    pub fn input_dim(&self) -> usize {
        let g = if self.conditioned { self.features.subgoal_dim() } else { 0 };
        self.features.state_dim() + ACTION_COUNT + 1 + g
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.layers == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(BaselineError::Config("layers, hidden and batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn param_builder(&self) -> ParamBuilder {
        let h = self.hidden;
        let mut b = ParamBuilder::new();
        for l in 0..self.layers {
            let fan_in = if l == 0 { self.input_dim() } else { h };
            let std = 1.0 / ((fan_in + h) as f64).sqrt();
            let p = format!("rnn{l}");
            match self.cell {
                CellKind::Lstm => {
                    b.add(format!("{p}.w"), &[fan_in + h, 4 * h], Init::Normal(std))
                        .add(format!("{p}.b"), &[4 * h], Init::Zeros);
                }
                CellKind::Gru => {
                    b.add(format!("{p}.w"), &[fan_in + h, 2 * h], Init::Normal(std))
                        .add(format!("{p}.b"), &[2 * h], Init::Zeros)
                        .add(format!("{p}.wn_x"), &[fan_in, h], Init::Normal(std))
                        .add(format!("{p}.bn_x"), &[h], Init::Zeros)
                        .add(format!("{p}.wn_h"), &[h, h], Init::Normal(std))
                        .add(format!("{p}.bn_h"), &[h], Init::Zeros);
                }
            }
        }
        b.linear("head", h, ACTION_COUNT, self.init_std);
        b
    }

    fn check(&self, seq: &TokenSequence) -> Result<(), BaselineError> {
        let k = seq.actions.len();
        if seq.states.len() != k + 1 || k > self.context {
            return Err(BaselineError::Config(format!("window of {} states and {k} actions", seq.states.len())));
        }
        if self.conditioned != seq.subgoal.is_some() {
            return Err(BaselineError::Config("sub-goal presence does not match the model".into()));
        }
        Ok(())
    }
}

/// Per-step input rows for one window, oldest first.
fn step_inputs(cfg: &RecurrentConfig, seq: &TokenSequence) -> Vec<Vec<f64>> {
    let mut g = Vec::new();
    if let Some(sg) = &seq.subgoal {
        cfg.features.encode_subgoal(sg, &mut g);
    }
    seq.states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut row = Vec::with_capacity(cfg.input_dim());
            cfg.features.encode_state(s, &mut row);
            let prev = if i == 0 { PAD_ACTION } else { seq.actions[i - 1].code() };
            row.extend((0..=ACTION_COUNT).map(|c| f64::from(u8::from(c == prev))));
            row.extend_from_slice(&g);
            row
        })
        .collect()
}

/// Action logits, one row per window.
pub fn recurrent_forward<S: Scalar>(
    cfg: &RecurrentConfig,
    g: &mut Graph<'_, S>,
    batch: &[&TokenSequence],
) -> Result<Var, BaselineError> {
    if batch.is_empty() {
        return Err(BaselineError::Config("empty batch".into()));
    }
    for seq in batch {
        cfg.check(seq)?;
    }
    let bsz = batch.len();
    let hid = cfg.hidden;
    let din = cfg.input_dim();
    let inputs: Vec<Vec<Vec<f64>>> = batch.iter().map(|s| step_inputs(cfg, s)).collect();
    let steps = inputs.iter().map(Vec::len).max().expect("non-empty batch");

    let p = g.params();
    let mut weights = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let name = |s: &str| format!("rnn{l}.{s}");
        let mut ids = vec![p.id(&name("w"))?, p.id(&name("b"))?];
        if cfg.cell == CellKind::Gru {
            for s in ["wn_x", "bn_x", "wn_h", "bn_h"] {
                ids.push(p.id(&name(s))?);
            }
        }
        weights.push(ids.into_iter().map(|id| g.param(id)).collect::<Vec<_>>());
    }

    let zeros = g.input(Tensor::zeros(bsz, hid));
    let mut h = vec![zeros; cfg.layers];
    let mut c = vec![zeros; cfg.layers];
    for t in 0..steps {
        let mut x = Tensor::<S>::zeros(bsz, din);
        let mut valid = vec![false; bsz];
        for (b, rows) in inputs.iter().enumerate() {
            let offset = steps - rows.len();
            if t >= offset {
                valid[b] = true;
                for (dst, src) in x.row_mut(b).iter_mut().zip(&rows[t - offset]) {
                    *dst = S::of(*src);
                }
            }
        }
        let mask = if valid.iter().all(|&v| v) {
            None
        } else {
            let m: Vec<f64> = valid.iter().flat_map(|&v| std::iter::repeat(f64::from(u8::from(v))).take(hid)).collect();
            Some(g.input(Tensor::from_f64(bsz, hid, &m)))
        };
        let mut layer_in = g.input(x);
        for l in 0..cfg.layers {
            let w = &weights[l];
            let xh = g.concat_cols(&[layer_in, h[l]])?;
            let (h_new, c_new) = match cfg.cell {
                CellKind::Lstm => {
                    let z = g.affine(xh, w[0], w[1])?;
                    let zi = g.slice_cols(z, 0, hid)?;
                    let zf = g.slice_cols(z, hid, hid)?;
                    let zg = g.slice_cols(z, 2 * hid, hid)?;
                    let zo = g.slice_cols(z, 3 * hid, hid)?;
                    let (i, f, gg, o) = (g.sigmoid(zi), g.sigmoid(zf), g.tanh(zg), g.sigmoid(zo));
                    let fc = g.mul(f, c[l])?;
                    let ig = g.mul(i, gg)?;
                    let c_new = g.add(fc, ig)?;
                    let tc = g.tanh(c_new);
                    (g.mul(o, tc)?, c_new)
                }
                CellKind::Gru => {
                    let zr = g.affine(xh, w[0], w[1])?;
                    let zz = g.slice_cols(zr, 0, hid)?;
                    let zrr = g.slice_cols(zr, hid, hid)?;
                    let (z, r) = (g.sigmoid(zz), g.sigmoid(zrr));
                    let nx = g.affine(layer_in, w[2], w[3])?;
                    let nh = g.affine(h[l], w[4], w[5])?;
                    let rnh = g.mul(r, nh)?;
                    let pre = g.add(nx, rnh)?;
                    let n = g.tanh(pre);
                    // (1 - z) n + z h = n + z (h - n)
                    let d = g.sub(h[l], n)?;
                    let zd = g.mul(z, d)?;
                    (g.add(n, zd)?, c[l])
                }
            };
            let (h_next, c_next) = match mask {
                None => (h_new, c_new),
                Some(m) => {
                    let dh = g.sub(h_new, h[l])?;
                    let mdh = g.mul(m, dh)?;
                    let hn = g.add(h[l], mdh)?;
                    let cn = if cfg.cell == CellKind::Lstm {
                        let dc = g.sub(c_new, c[l])?;
                        let mdc = g.mul(m, dc)?;
                        g.add(c[l], mdc)?
                    } else {
                        c_new
                    };
                    (hn, cn)
                }
            };
            h[l] = h_next;
            c[l] = c_next;
            layer_in = h_next;
        }
    }
    let hw = g.param(p.id("head.w")?);
    let hb = g.param(p.id("head.b")?);
    Ok(g.affine(h[cfg.layers - 1], hw, hb)?)
}

pub fn recurrent_loss<S: Scalar>(
    cfg: &RecurrentConfig,
    g: &mut Graph<'_, S>,
    batch: &[&Sample],
) -> Result<Var, BaselineError> {
    let seqs: Vec<&TokenSequence> = batch.iter().map(|s| &s.seq).collect();
    let logits = recurrent_forward(cfg, g, &seqs)?;
    let targets: Vec<usize> = batch.iter().map(|s| s.target.code()).collect();
    Ok(g.cross_entropy(logits, &targets)?)
}

/// Trained (or initialized) recurrent controller.
#[derive(Debug, Clone)]
pub struct RecurrentNet {
    pub config: RecurrentConfig,
    pub params: ParamStore<f32>,
}

const MODEL_NAME: &str = "recurrent";

impl RecurrentNet {
    pub fn new(config: RecurrentConfig, seed: u64) -> Result<Self, BaselineError> {
        config.validate()?;
        let params = config.param_builder().build(seed)?;
        Ok(Self { config, params })
    }

    pub fn zeros(config: RecurrentConfig) -> Result<Self, BaselineError> {
        let mut net = Self::new(config, 0)?;
        net.params.fill_zero();
        Ok(net)
    }

    /// NLL training over windowed samples; returns per-epoch mean loss.
    pub fn train(config: RecurrentConfig, samples: &[Sample], seed: u64) -> Result<(Self, Vec<f64>), BaselineError> {
        let mut net = Self::new(config, seed)?;
        let cfg = net.config.clone();
        let losses = fit(&mut net.params, samples.len(), cfg.batch_size, cfg.epochs, cfg.lr, seed, |g, idx| {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            recurrent_loss(&cfg, g, &batch)
        })?;
        Ok((net, losses))
    }

    pub fn window(&self, q: &Query<'_>) -> TokenSequence {
        let g = if self.config.conditioned { q.subgoal } else { None };
        TokenSequence::window(q.states, q.actions, self.config.context, g)
    }

    pub fn predict_batch(&self, batch: &[&TokenSequence]) -> Result<Vec<[f64; ACTION_COUNT]>, BaselineError> {
        let mut g = Graph::new(&self.params);
        let logits = recurrent_forward(&self.config, &mut g, batch)?;
        Ok(g.data(logits).chunks(ACTION_COUNT).map(softmax_row).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), BaselineError> {
        save_model(path, &self.params, MODEL_NAME, &self.config)
    }

    pub fn load(path: &Path) -> Result<Self, BaselineError> {
        let (config, params) = load_model(path, MODEL_NAME, |c: &RecurrentConfig| c.param_builder())?;
        Ok(Self { config, params })
    }
}

impl Policy for RecurrentNet {
    fn name(&self) -> &str {
        match self.config.cell {
            CellKind::Lstm => "LSTMHier",
            CellKind::Gru => "GRUSeq",
        }
    }

    fn conditioned(&self) -> bool {
        self.config.conditioned
    }

    fn act(&self, queries: &mut [Query<'_>]) -> Vec<Option<[f64; ACTION_COUNT]>> {
        let seqs: Vec<TokenSequence> = queries.iter().map(|q| self.window(q)).collect();
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(super::EVAL_CHUNK) {
            let refs: Vec<&TokenSequence> = chunk.iter().collect();
            let dists = self.predict_batch(&refs).expect("evaluation windows respect the frame");
            out.extend(dists.into_iter().map(Some));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dt::SubGoal;
    use crate::gridworld::{Action, Cell, Flags};

    fn world() -> GridWorld {
        GridWorld::preset("case1_default").unwrap()
    }

    fn tiny(cell: CellKind, conditioned: bool) -> RecurrentConfig {
        let mut c = RecurrentConfig::base(&world(), cell, 2, 6, conditioned);
        c.context = 3;
        c.init_std = 0.5;
        c
    }

    fn seq(k: usize, conditioned: bool) -> TokenSequence {
        let w = world();
        let cells = [Cell::new(1, 1), Cell::new(1, 2), Cell::new(2, 2), Cell::new(2, 3)];
        let states = cells[..=k].iter().map(|&c| w.state_at(c, Flags::new(2))).collect();
        let actions = [Action::Right, Action::Down, Action::Right][..k].to_vec();
        TokenSequence::new(states, actions, conditioned.then_some(SubGoal::PickKey { id: 1 }))
    }

    #[test]
    fn zero_parameters_give_uniform() {
        for (cell, cond) in [(CellKind::Lstm, true), (CellKind::Gru, false)] {
            let net = RecurrentNet::zeros(tiny(cell, cond)).unwrap();
            let d = net.predict_batch(&[&seq(2, cond)]).unwrap();
            for p in d[0] {
                assert!((p - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hidden_state_carries_history() {
        for (cell, cond) in [(CellKind::Lstm, true), (CellKind::Gru, false)] {
            let net = RecurrentNet::new(tiny(cell, cond), 3).unwrap();
            let full = seq(3, cond);
            let stateless = TokenSequence::window(&full.states, &full.actions, 0, full.subgoal);
            let d = net.predict_batch(&[&full, &stateless]).unwrap();
            let diff: f64 = d[0].iter().zip(&d[1]).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff > 1e-6, "{cell:?} ignores history");
        }
    }

    #[test]
    fn padding_does_not_leak_across_rows() {
        let net = RecurrentNet::new(tiny(CellKind::Lstm, true), 5).unwrap();
        let short = seq(1, true);
        let alone = net.predict_batch(&[&short]).unwrap();
        let mixed = net.predict_batch(&[&seq(3, true), &short]).unwrap();
        for (a, b) in alone[0].iter().zip(&mixed[1]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_subgoal_is_rejected() {
        let net = RecurrentNet::zeros(tiny(CellKind::Gru, false)).unwrap();
        assert!(net.predict_batch(&[&seq(1, true)]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = RecurrentNet::new(tiny(CellKind::Gru, false), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gru.ckpt");
        net.save(&path).unwrap();
        let back = RecurrentNet::load(&path).unwrap();
        assert_eq!(back.config, net.config);
        assert_eq!(back.params, net.params);
    }
}
