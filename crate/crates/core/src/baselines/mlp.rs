//! Fully connected ReLU stacks with a linear output layer.

use serde::{Deserialize, Serialize};

use crate::neural::{Graph, Init, NeuralError, ParamBuilder, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    /// Layer widths, input first; at least two entries.
    pub dims: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, dims: Vec<usize>) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        Self { prefix: prefix.into(), dims }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("non-empty")
    }

    fn layer(&self, i: usize) -> String {
        format!("{}.l{}", self.prefix, i + 1)
    }

    /// He-scaled hidden layers; the output layer uses `out_std`.
    pub fn declare(&self, b: &mut ParamBuilder, out_std: f64) {
        let n = self.dims.len() - 1;
        for i in 0..n {
            let (fi, fo) = (self.dims[i], self.dims[i + 1]);
            let std = if i + 1 == n { out_std } else { (2.0 / fi as f64).sqrt() };
            b.add(format!("{}.w", self.layer(i)), &[fi, fo], Init::Normal(std))
                .add(format!("{}.b", self.layer(i)), &[fo], Init::Zeros);
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var, NeuralError> {
        let n = self.dims.len() - 1;
        let mut h = x;
        for i in 0..n {
            let p = g.params();
            let w = g.param(p.id(&format!("{}.w", self.layer(i)))?);
            let b = g.param(p.id(&format!("{}.b", self.layer(i)))?);
            h = g.affine(h, w, b)?;
            if i + 1 < n {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Stacks equal-length feature rows into a tensor.
pub(crate) fn rows_tensor<S: Scalar>(rows: &[&[f64]]) -> Tensor<S> {
    let cols = rows.first().map_or(0, |r| r.len());
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Tensor::from_f64(rows.len(), cols, &flat)
}
