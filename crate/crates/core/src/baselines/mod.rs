//! Comparison policies sharing the environment, datasets and tensor tape.

mod dqn;
mod mlp;
mod options;
mod recurrent;
mod scripted;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dt::{DecisionTransformer, DtError, TokenSequence, ACTION_COUNT};
use crate::hierarchy::{Policy, Query};
use crate::neural::{
    load_checkpoint, save_checkpoint, AdamConfig, AdamState, Graph, NeuralError, ParamBuilder, ParamStore, Var,
};

pub use dqn::{td_loss, td_target, DqnConfig, DqnPolicy, DqnReport, QNet, Transition};
pub use mlp::Mlp;
pub use options::{intent_labels, options_loss, Intent, OptionsConfig, OptionsPolicy, OptionsSample};
pub use recurrent::{recurrent_forward, recurrent_loss, CellKind, RecurrentConfig, RecurrentNet};
pub use scripted::{distance_map, scripted_action, scripted_steps, ScriptedPolicy};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Dt(#[from] DtError),
}

/// The seven compared methods, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "LSTMHier")]
    LstmHier,
    #[serde(rename = "GRUSeq")]
    GruSeq,
    #[serde(rename = "DQN")]
    Dqn,
    #[serde(rename = "OptionsHRL")]
    OptionsHrl,
    #[serde(rename = "PureDT")]
    PureDt,
    #[serde(rename = "SymbolicScripted")]
    SymbolicScripted,
    #[serde(rename = "HybridDT")]
    HybridDt,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::LstmHier,
        Method::GruSeq,
        Method::Dqn,
        Method::OptionsHrl,
        Method::PureDt,
        Method::SymbolicScripted,
        Method::HybridDt,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::LstmHier => "LSTMHier",
            Method::GruSeq => "GRUSeq",
            Method::Dqn => "DQN",
            Method::OptionsHrl => "OptionsHRL",
            Method::PureDt => "PureDT",
            Method::SymbolicScripted => "SymbolicScripted",
            Method::HybridDt => "HybridDT",
        }
    }

    /// Short command-line name.
    pub fn slug(self) -> &'static str {
        match self {
            Method::LstmHier => "lstm",
            Method::GruSeq => "gru",
            Method::Dqn => "dqn",
            Method::OptionsHrl => "options",
            Method::PureDt => "pure_dt",
            Method::SymbolicScripted => "scripted",
            Method::HybridDt => "hybrid",
        }
    }

    pub fn is_learned(self) -> bool {
        self != Method::SymbolicScripted
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = BaselineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.slug() == lower || m.label().eq_ignore_ascii_case(s) || (lower == "hybrid_dt" && *m == Method::HybridDt))
            .ok_or_else(|| BaselineError::UnknownMethod(s.into()))
    }
}

/// Decision transformer behind the shared policy interface.
pub struct DtPolicy {
    pub model: DecisionTransformer,
    name: String,
}

impl DtPolicy {
    pub fn new(model: DecisionTransformer) -> Self {
        let name = if model.config.conditioned() { "HybridDT" } else { "PureDT" }.to_string();
        Self { model, name }
    }

    pub fn window(&self, q: &Query<'_>) -> TokenSequence {
        let g = if self.model.config.conditioned() { q.subgoal } else { None };
        TokenSequence::window(q.states, q.actions, self.model.config.context, g)
    }
}

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

impl Policy for DtPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn conditioned(&self) -> bool {
        self.model.config.conditioned()
    }

    fn act(&self, queries: &mut [Query<'_>]) -> Vec<Option<[f64; ACTION_COUNT]>> {
        let seqs: Vec<TokenSequence> = queries.iter().map(|q| self.window(q)).collect();
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(EVAL_CHUNK) {
            let refs: Vec<&TokenSequence> = chunk.iter().collect();
            let dists = self.model.predict_batch(&refs).expect("evaluation windows respect the frame");
            out.extend(dists.into_iter().map(Some));
        }
        out
    }
}

/// Shared mini-batch loop: Adam over `epochs` shuffled passes of `n` items.
/// `loss` builds the batch loss on the graph; returns per-epoch mean loss.
pub(crate) fn fit(
    params: &mut ParamStore<f32>,
    n: usize,
    batch: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
    mut loss: impl FnMut(&mut Graph<'_, f32>, &[usize]) -> Result<Var, BaselineError>,
) -> Result<Vec<f64>, BaselineError> {
    if n == 0 {
        return Err(BaselineError::Config("training set is empty".into()));
    }
    let mut opt = AdamState::new(params, AdamConfig { lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch.max(1)) {
            let grads = {
                let mut g = Graph::new(params);
                let l = loss(&mut g, chunk)?;
                total += g.data(l)[0] as f64 * chunk.len() as f64;
                g.backward(l)?
            };
            opt.update(params, &grads)?;
        }
        losses.push(total / n as f64);
    }
    Ok(losses)
}

/// Writes a checkpoint whose header names the model kind and its config.
pub(crate) fn save_model<C: Serialize>(
    path: &Path,
    params: &ParamStore<f32>,
    model: &str,
    config: &C,
) -> Result<(), BaselineError> {
    let config = serde_json::to_value(config).map_err(NeuralError::from)?;
    Ok(save_checkpoint(path, params, &serde_json::json!({ "model": model, "config": config }))?)
}

/// Reads a checkpoint written by [`save_model`], checking the model kind and
/// that the stored layout matches the one its config declares.
pub(crate) fn load_model<C: DeserializeOwned>(
    path: &Path,
    model: &str,
    layout_of: impl Fn(&C) -> ParamBuilder,
) -> Result<(C, ParamStore<f32>), BaselineError> {
    let (params, header) = load_checkpoint(path)?;
    let kind = header.hyperparameters["model"].as_str().unwrap_or_default();
    if kind != model {
        return Err(BaselineError::Config(format!("checkpoint holds a `{kind}` model, expected `{model}`")));
    }
    let config: C = serde_json::from_value(header.hyperparameters["config"].clone())
        .map_err(|e| BaselineError::Config(format!("checkpoint hyperparameters: {e}")))?;
    let expected = layout_of(&config).build::<f32>(0)?;
    if expected.layout().segments() != params.layout().segments() {
        return Err(BaselineError::Config("checkpoint layout does not match its configuration".into()));
    }
    Ok((config, params))
}

pub(crate) fn one_hot(code: usize) -> [f64; ACTION_COUNT] {
    let mut d = [0.0; ACTION_COUNT];
    d[code] = 1.0;
    d
}

pub(crate) fn softmax_row(logits: &[f32]) -> [f64; ACTION_COUNT] {
    let mut d = [0.0; ACTION_COUNT];
    for (o, l) in d.iter_mut().zip(logits) {
        *o = *l as f64;
    }
    crate::neural::softmax_in_place(&mut d);
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.slug().parse::<Method>().unwrap(), m);
            assert_eq!(m.label().parse::<Method>().unwrap(), m);
        }
        assert!("ppo".parse::<Method>().is_err());
        assert_eq!(Method::ALL.len(), 7);
    }
}
