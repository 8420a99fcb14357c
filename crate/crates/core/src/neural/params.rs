use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Scalar;
use super::NeuralError;

/// Handle to a named parameter segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    offset: usize,
    #[serde(skip)]
    len: usize,
}

impl Segment {
    /// Matrix view: first axis are rows, the rest are flattened into
    /// columns; vectors are a single row.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, rest @ ..] => (*r, rest.iter().product()),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Ordered, uniquely named segments over one flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    index: HashMap<String, usize>,
    total: usize,
}

impl Layout {
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<usize>)>) -> Result<Self, NeuralError> {
        let mut segments = Vec::new();
        let mut index = HashMap::new();
        let mut offset = 0;
        for (name, shape) in entries {
            let len = shape.iter().product();
            if index.insert(name.clone(), segments.len()).is_some() {
                return Err(NeuralError::DuplicateSegment(name));
            }
            segments.push(Segment { name, shape, offset, len });
            offset += len;
        }
        Ok(Self { segments, index, total: offset })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NeuralError> {
        self.index.get(name).map(|&i| ParamId(i)).ok_or_else(|| NeuralError::UnknownSegment(name.into()))
    }

    pub fn segment(&self, id: ParamId) -> &Segment {
        &self.segments[id.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Collects named segments with their initializers.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    entries: Vec<(String, Vec<usize>, Init)>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> &mut Self {
        self.entries.push((name.into(), shape.to_vec(), init));
        self
    }

    /// Weights `normal(0, std)`, biases zero.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, std: f64) -> &mut Self {
        self.add(format!("{prefix}.w"), &[fan_in, fan_out], Init::Normal(std))
            .add(format!("{prefix}.b"), &[fan_out], Init::Zeros)
    }

    pub fn build<S: Scalar>(&self, seed: u64) -> Result<ParamStore<S>, NeuralError> {
        let layout = Layout::new(self.entries.iter().map(|(n, s, _)| (n.clone(), s.clone())))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(layout.total_len());
        for (_, shape, init) in &self.entries {
            let len: usize = shape.iter().product();
            match *init {
                Init::Zeros => values.extend(std::iter::repeat(S::zero()).take(len)),
                Init::Ones => values.extend(std::iter::repeat(S::one()).take(len)),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).map_err(|e| NeuralError::Init(e.to_string()))?;
                    values.extend((0..len).map(|_| S::of(dist.sample(&mut rng))));
                }
            }
        }
        Ok(ParamStore { layout: Arc::new(layout), values })
    }
}

/// Parameter values over a shared [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    layout: Arc<Layout>,
    values: Vec<S>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn from_parts(layout: Arc<Layout>, values: Vec<S>) -> Result<Self, NeuralError> {
        if values.len() != layout.total_len() {
            return Err(NeuralError::Shape(format!(
                "parameter buffer has {} values, layout needs {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NeuralError> {
        self.layout.id(name)
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[S] {
        &self.values[self.layout.segment(id).range()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [S] {
        let r = self.layout.segment(id).range();
        &mut self.values[r]
    }

    pub fn by_name(&self, name: &str) -> Result<&[S], NeuralError> {
        Ok(self.get(self.id(name)?))
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore { layout: self.layout.clone(), values: self.values.iter().map(|v| T::of(v.as_f64())).collect() }
    }

    pub fn zeros_like(&self) -> Self {
        Self { layout: self.layout.clone(), values: vec![S::zero(); self.values.len()] }
    }

    pub fn fill_zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = S::zero());
    }
}

/// Gradients, congruent with the [`ParamStore`] that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore<S> {
    layout: Arc<Layout>,
    values: Vec<S>,
}

impl<S: Scalar> GradStore<S> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.total_len();
        Self { layout, values: vec![S::zero(); n] }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn get(&self, id: ParamId) -> &[S] {
        &self.values[self.layout.segment(id).range()]
    }

    pub fn by_name(&self, name: &str) -> Result<&[S], NeuralError> {
        Ok(self.get(self.layout.id(name)?))
    }

    pub(crate) fn segment_mut(&mut self, id: ParamId) -> &mut [S] {
        let r = self.layout.segment(id).range();
        &mut self.values[r]
    }

    pub fn is_congruent(&self, params: &ParamStore<S>) -> bool {
        Arc::ptr_eq(&self.layout, &params.layout) || *self.layout == *params.layout
    }

    /// Adds `other` scaled by `w` (used to average over micro-batches).
    pub fn add_scaled(&mut self, other: &GradStore<S>, w: S) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += w * *b;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.values.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
    }
}
