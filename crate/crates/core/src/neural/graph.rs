//! Tape of tensor operations with reverse-mode gradients.
//!
//! Every operation appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse from a scalar loss and accumulates parameter
//! gradients into a [`GradStore`]. Attention, layer norm and the softmax
//! cross-entropy are fused nodes with hand-written adjoints.

use std::collections::HashMap;

use super::params::{GradStore, ParamId, ParamStore};
use super::tensor::{gemm, MatMut, MatRef, Scalar, Tensor};
use super::NeuralError;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Node handle on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Batch geometry of a sequence tensor laid out as `(batch * seq) x dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

#[derive(Debug)]
enum Op<S> {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var },
    Affine { x: Var, w: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    AddTiled { x: Var, table: Var, period: usize },
    Scale { x: Var, c: S },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<S> },
    Gelu { x: Var, t: Vec<S> },
    Relu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    Attention { q: Var, k: Var, v: Var, shape: SeqShape, probs: Vec<S> },
    Gather { table: Var, idx: Vec<usize> },
    Assemble { parts: Vec<(Var, Vec<usize>)> },
    SelectRows { x: Var, idx: Vec<usize> },
    ConcatCols { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    PickCols { x: Var, cols: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
    Mse { x: Var, target: Vec<S> },
    SumSquares { x: Var },
}

#[derive(Debug)]
struct Node<S> {
    rows: usize,
    cols: usize,
    /// `None` for parameter nodes, which read from the store.
    value: Option<Vec<S>>,
    op: Op<S>,
}

pub struct Graph<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    param_vars: HashMap<ParamId, Var>,
}

fn shape_err<T>(op: &str, detail: String) -> Result<T, NeuralError> {
    Err(NeuralError::Shape(format!("{op}: {detail}")))
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<S>, op: Op<S>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn data(&self, v: Var) -> &[S] {
        let n = &self.nodes[v.0];
        match (&n.value, &n.op) {
            (Some(d), _) => d,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("only parameter nodes are stored by reference"),
        }
    }

    pub fn value(&self, v: Var) -> Tensor<S> {
        let (r, c) = self.shape(v);
        Tensor::from_vec(r, c, self.data(v).to_vec())
    }

    fn mat(&self, v: Var) -> MatRef<'_, S> {
        let (r, c) = self.shape(v);
        MatRef::dense(self.data(v), r, c)
    }

    pub fn input(&mut self, t: Tensor<S>) -> Var {
        let (r, c) = t.shape();
        self.push(r, c, t.into_vec(), Op::Input)
    }

    /// Parameter node; repeated requests return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let (rows, cols) = self.params.layout().segment(id).matrix_shape();
        self.nodes.push(Node { rows, cols, value: None, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return shape_err("matmul", format!("{m}x{k} * {k2}x{n}"));
        }
        let mut out = vec![S::zero(); m * n];
        gemm(self.mat(a), self.mat(b), MatMut::dense(&mut out, m, n), S::zero());
        Ok(self.push(m, n, out, Op::MatMul { a, b }))
    }

    /// `x W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NeuralError> {
        let ((m, k), (k2, n), (br, bc)) = (self.shape(x), self.shape(w), self.shape(b));
        if k != k2 || br != 1 || bc != n {
            return shape_err("affine", format!("x {m}x{k}, W {k2}x{n}, b {br}x{bc}"));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(self.data(b));
        }
        gemm(self.mat(x), self.mat(w), MatMut::dense(&mut out, m, n), S::one());
        Ok(self.push(m, n, out, Op::Affine { x, w, b }))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(S, S) -> S) -> Result<(usize, usize, Vec<S>), NeuralError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err(name, format!("{sa:?} vs {sb:?}"));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Ok((sa.0, sa.1, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (r, c, out) = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(r, c, out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (r, c, out) = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(r, c, out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (r, c, out) = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(r, c, out, Op::Mul { a, b }))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NeuralError> {
        let ((m, n), (rr, rc)) = (self.shape(x), self.shape(row));
        if rr != 1 || rc != n {
            return shape_err("add_row", format!("x {m}x{n}, row {rr}x{rc}"));
        }
        let rv = self.data(row);
        let out = self.data(x).chunks(n.max(1)).flat_map(|r| r.iter().zip(rv).map(|(&a, &b)| a + b)).collect();
        Ok(self.push(m, n, out, Op::AddRow { x, row }))
    }

    /// Adds row `i % period` of `table` to row `i` of `x`.
    pub fn add_tiled(&mut self, x: Var, table: Var, period: usize) -> Result<Var, NeuralError> {
        let ((m, n), (tr, tc)) = (self.shape(x), self.shape(table));
        if period == 0 || period > tr || tc != n || m % period != 0 {
            return shape_err("add_tiled", format!("x {m}x{n}, table {tr}x{tc}, period {period}"));
        }
        let t = self.data(table);
        let mut out = self.data(x).to_vec();
        for (i, row) in out.chunks_mut(n).enumerate() {
            let p = &t[(i % period) * n..][..n];
            row.iter_mut().zip(p).for_each(|(a, &b)| *a += b);
        }
        Ok(self.push(m, n, out, Op::AddTiled { x, table, period }))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let (r, cols) = self.shape(x);
        let out = self.data(x).iter().map(|&v| v * c).collect();
        self.push(r, cols, out, Op::Scale { x, c })
    }

    /// Row-wise layer normalization followed by gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NeuralError> {
        let (m, n) = self.shape(x);
        if self.shape(gain) != (1, n) || self.shape(bias) != (1, n) {
            return shape_err("layer_norm", format!("x {m}x{n}, gain {:?}, bias {:?}", self.shape(gain), self.shape(bias)));
        }
        let eps = S::of(LN_EPS);
        let inv_n = S::of(1.0 / n as f64);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in self.data(x).chunks(n) {
            let mean = row.iter().copied().sum::<S>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
            let rs = S::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        Ok(self.push(m, n, out, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let (r, c) = self.shape(x);
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        self.push(r, c, out, op)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a, half) = (S::of(GELU_C), S::of(GELU_A), S::of(0.5));
        let (r, cols) = self.shape(x);
        let t: Vec<S> = self.data(x).iter().map(|&v| tanh(c * (v + a * v * v * v))).collect();
        let out = self.data(x).iter().zip(&t).map(|(&v, &t)| half * v * (S::one() + t)).collect();
        self.push(r, cols, out, Op::Gelu { x, t })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(S::zero()), Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, tanh, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        self.push(r, c, out, Op::Softmax { x })
    }

    /// Multi-head causal self-attention over already projected `q`, `k`, `v`.
    ///
    /// Inputs are `(batch * seq) x dim`. Position `i` attends to positions
    /// `j <= i` whose entry in `key_valid` is true; scores are scaled by
    /// `1 / sqrt(head_dim)` and masked scores are excluded from the softmax
    /// (equivalent to a score of negative infinity). A query with no visible
    /// key produces a zero row.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: SeqShape,
        key_valid: Option<&[bool]>,
    ) -> Result<Var, NeuralError> {
        let (rows, dim) = self.shape(q);
        let SeqShape { batch, seq, heads } = shape;
        if self.shape(k) != (rows, dim) || self.shape(v) != (rows, dim) {
            return shape_err("attention", "q, k, v shapes differ".into());
        }
        if rows != batch * seq || heads == 0 || dim % heads != 0 {
            return shape_err("attention", format!("{rows}x{dim} with batch {batch}, seq {seq}, heads {heads}"));
        }
        if key_valid.is_some_and(|m| m.len() != rows) {
            return shape_err("attention", "key mask length".into());
        }
        let hd = dim / heads;
        let scale = S::of(1.0 / (hd as f64).sqrt());
        let mut probs = vec![S::zero(); batch * heads * seq * seq];
        let mut out = vec![S::zero(); rows * dim];
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * dim + h * hd;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                let qm = MatRef { data: qd, offset: off, rows: seq, cols: hd, rs: dim, cs: 1 };
                let km = MatRef { data: kd, offset: off, rows: seq, cols: hd, rs: dim, cs: 1 };
                gemm(qm, km.t(), MatMut::dense(p, seq, seq), S::zero());
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let visible = |j: usize| j <= i && key_valid.map_or(true, |m| m[b * seq + j]);
                    let mut max = S::neg_infinity();
                    for (j, s) in row.iter_mut().enumerate() {
                        if visible(j) {
                            *s = *s * scale;
                            max = max.max(*s);
                        }
                    }
                    if max == S::neg_infinity() {
                        row.iter_mut().for_each(|s| *s = S::zero());
                        continue;
                    }
                    let mut sum = S::zero();
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = if visible(j) { (*s - max).exp() } else { S::zero() };
                        sum += *s;
                    }
                    row.iter_mut().for_each(|s| *s = *s / sum);
                }
                let vm = MatRef { data: vd, offset: off, rows: seq, cols: hd, rs: dim, cs: 1 };
                let om = MatMut { data: &mut out, offset: off, rows: seq, cols: hd, rs: dim };
                gemm(MatRef::dense(p, seq, seq), vm, om, S::zero());
            }
        }
        Ok(self.push(rows, dim, out, Op::Attention { q, k, v, shape, probs }))
    }

    /// Embedding lookup: row `idx[i]` of `table` for every `i`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var, NeuralError> {
        let (tr, tc) = self.shape(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tr) {
            return shape_err("gather", format!("index {bad} out of {tr} rows"));
        }
        let t = self.data(table);
        let out = idx.iter().flat_map(|&i| t[i * tc..(i + 1) * tc].iter().copied()).collect();
        Ok(self.push(idx.len(), tc, out, Op::Gather { table, idx: idx.to_vec() }))
    }

    /// Scatters the rows of each part to the listed destination rows of a
    /// fresh `rows x cols` matrix. Uncovered rows are zero.
    pub fn assemble_rows(&mut self, rows: usize, parts: Vec<(Var, Vec<usize>)>) -> Result<Var, NeuralError> {
        let cols = match parts.first() {
            Some((v, _)) => self.shape(*v).1,
            None => return shape_err("assemble_rows", "no parts".into()),
        };
        let mut out = vec![S::zero(); rows * cols];
        for (v, dest) in &parts {
            let (pr, pc) = self.shape(*v);
            if pc != cols || pr != dest.len() || dest.iter().any(|&d| d >= rows) {
                return shape_err("assemble_rows", format!("part {pr}x{pc} into {rows}x{cols}"));
            }
            let src = self.data(*v);
            for (i, &d) in dest.iter().enumerate() {
                out[d * cols..(d + 1) * cols].copy_from_slice(&src[i * cols..(i + 1) * cols]);
            }
        }
        Ok(self.push(rows, cols, out, Op::Assemble { parts }))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NeuralError> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return shape_err("select_rows", format!("row {bad} out of {r}"));
        }
        let d = self.data(x);
        let out = idx.iter().flat_map(|&i| d[i * c..(i + 1) * c].iter().copied()).collect();
        Ok(self.push(idx.len(), c, out, Op::SelectRows { x, idx: idx.to_vec() }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NeuralError> {
        let rows = match parts.first() {
            Some(v) => self.shape(*v).0,
            None => return shape_err("concat_cols", "no parts".into()),
        };
        if parts.iter().any(|p| self.shape(*p).0 != rows) {
            return shape_err("concat_cols", "row counts differ".into());
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let c = self.shape(*p).1;
                out.extend_from_slice(&self.data(*p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(rows, cols, out, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NeuralError> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return shape_err("slice_cols", format!("[{start}, {}) of {c}", start + len));
        }
        let d = self.data(x);
        let out = (0..r).flat_map(|i| d[i * c + start..i * c + start + len].iter().copied()).collect();
        Ok(self.push(r, len, out, Op::SliceCols { x, start }))
    }

    /// Column `cols[i]` of row `i`, as an `n x 1` matrix.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var, NeuralError> {
        let (r, c) = self.shape(x);
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return shape_err("pick_cols", format!("{} picks from {r}x{c}", cols.len()));
        }
        let d = self.data(x);
        let out = cols.iter().enumerate().map(|(i, &j)| d[i * c + j]).collect();
        Ok(self.push(r, 1, out, Op::PickCols { x, cols: cols.to_vec() }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NeuralError> {
        let (r, c) = self.shape(logits);
        if r == 0 {
            return Err(NeuralError::Usage("cross-entropy over an empty batch".into()));
        }
        if targets.len() != r || targets.iter().any(|&t| t >= c) {
            return shape_err("cross_entropy", format!("{} targets for {r}x{c} logits", targets.len()));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = S::zero();
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            loss += lse - row[t];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let loss = loss / S::of(r as f64);
        Ok(self.push(1, 1, vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, x: Var, target: &[S]) -> Result<Var, NeuralError> {
        let (r, c) = self.shape(x);
        if target.len() != r * c || r * c == 0 {
            return shape_err("mse", format!("{} targets for {r}x{c}", target.len()));
        }
        let n = S::of((r * c) as f64);
        let loss = self.data(x).iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>() / n;
        Ok(self.push(1, 1, vec![loss], Op::Mse { x, target: target.to_vec() }))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().map(|&v| v * v).sum::<S>();
        self.push(1, 1, vec![s], Op::SumSquares { x })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<GradStore<S>, NeuralError> {
        if loss.0 >= self.nodes.len() {
            return Err(NeuralError::Usage("backward requested for a node that was never computed".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(NeuralError::Usage(format!("backward needs a scalar loss, got {:?}", self.shape(loss))));
        }
        let mut out = GradStore::zeros(self.params.layout().clone());
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> &'g mut Vec<S> {
        let (r, c) = self.shape(v);
        grads[v.0].get_or_insert_with(|| vec![S::zero(); r * c])
    }

    fn acc_add(&self, grads: &mut [Option<Vec<S>>], v: Var, g: &[S]) {
        match &mut grads[v.0] {
            Some(dst) => dst.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            slot => *slot = Some(g.to_vec()),
        }
    }

    fn acc_own(&self, grads: &mut [Option<Vec<S>>], v: Var, g: Vec<S>) {
        match &mut grads[v.0] {
            Some(dst) => dst.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>], out: &mut GradStore<S>) {
        let node = &self.nodes[i];
        let (m, n) = (node.rows, node.cols);
        let y = node.value.as_deref();
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                out.segment_mut(*id).iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
            Op::MatMul { a, b } => self.backprop_matmul(*a, *b, g, m, n, grads),
            Op::Affine { x, w, b } => {
                self.backprop_matmul(*x, *w, g, m, n, grads);
                let db = self.acc(grads, *b);
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
            }
            Op::Add { a, b } => {
                self.acc_add(grads, *a, g);
                self.acc_add(grads, *b, g);
            }
            Op::Sub { a, b } => {
                self.acc_add(grads, *a, g);
                let db = self.acc(grads, *b);
                db.iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
            }
            Op::Mul { a, b } => {
                let ga: Vec<S> = g.iter().zip(self.data(*b)).map(|(&u, &v)| u * v).collect();
                let gb: Vec<S> = g.iter().zip(self.data(*a)).map(|(&u, &v)| u * v).collect();
                self.acc_own(grads, *a, ga);
                self.acc_own(grads, *b, gb);
            }
            Op::AddRow { x, row } => {
                self.acc_add(grads, *x, g);
                let dr = self.acc(grads, *row);
                for r in g.chunks(n) {
                    dr.iter_mut().zip(r).for_each(|(a, &v)| *a += v);
                }
            }
            Op::AddTiled { x, table, period } => {
                self.acc_add(grads, *x, g);
                let dt = self.acc(grads, *table);
                for (r, row) in g.chunks(n).enumerate() {
                    let p = r % period;
                    dt[p * n..(p + 1) * n].iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
            }
            Op::Scale { x, c } => {
                let dx = self.acc(grads, *x);
                dx.iter_mut().zip(g).for_each(|(a, &v)| *a += v * *c);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.data(*gain);
                let inv_n = S::of(1.0 / n as f64);
                let mut dgain = vec![S::zero(); n];
                let mut dbias = vec![S::zero(); n];
                let mut dx = vec![S::zero(); m * n];
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = S::zero();
                    let mut mean_dh = S::zero();
                    for j in 0..n {
                        let d = gr[j] * gv[j];
                        mean_d += d;
                        mean_dh += d * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    mean_d = mean_d * inv_n;
                    mean_dh = mean_dh * inv_n;
                    for j in 0..n {
                        let d = gr[j] * gv[j];
                        dx[r * n + j] = rstd[r] * (d - mean_d - hr[j] * mean_dh);
                    }
                }
                self.acc_own(grads, *x, dx);
                self.acc_own(grads, *gain, dgain);
                self.acc_own(grads, *bias, dbias);
            }
            Op::Gelu { x, t } => {
                let (c, a, half) = (S::of(GELU_C), S::of(GELU_A), S::of(0.5));
                let three = S::of(3.0);
                let dx: Vec<S> = self
                    .data(*x)
                    .iter()
                    .zip(g)
                    .zip(t)
                    .map(|((&v, &u), &t)| {
                        let dt = c * (S::one() + three * a * v * v);
                        u * (half * (S::one() + t) + half * v * (S::one() - t * t) * dt)
                    })
                    .collect();
                self.acc_own(grads, *x, dx);
            }
            Op::Relu { x } => {
                let dx: Vec<S> =
                    self.data(*x).iter().zip(g).map(|(&v, &u)| if v > S::zero() { u } else { S::zero() }).collect();
                self.acc_own(grads, *x, dx);
            }
            Op::Tanh { x } => {
                let y = y.expect("tanh value");
                let dx: Vec<S> = y.iter().zip(g).map(|(&t, &u)| u * (S::one() - t * t)).collect();
                self.acc_own(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let y = y.expect("sigmoid value");
                let dx: Vec<S> = y.iter().zip(g).map(|(&s, &u)| u * s * (S::one() - s)).collect();
                self.acc_own(grads, *x, dx);
            }
            Op::Softmax { x } => {
                let y = y.expect("softmax value");
                let mut dx = vec![S::zero(); m * n];
                for r in 0..m {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc_own(grads, *x, dx);
            }
            Op::Attention { q, k, v, shape, probs } => {
                self.backprop_attention(*q, *k, *v, *shape, probs, g, n, grads);
            }
            Op::Gather { table, idx } => {
                let dt = self.acc(grads, *table);
                for (r, &t) in idx.iter().enumerate() {
                    dt[t * n..(t + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(a, &v)| *a += v);
                }
            }
            Op::Assemble { parts } => {
                for (v, dest) in parts {
                    let dv = self.acc(grads, *v);
                    for (r, &d) in dest.iter().enumerate() {
                        dv[r * n..(r + 1) * n].iter_mut().zip(&g[d * n..(d + 1) * n]).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::SelectRows { x, idx } => {
                let dx = self.acc(grads, *x);
                for (r, &src) in idx.iter().enumerate() {
                    dx[src * n..(src + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(a, &b)| *a += b);
                }
            }
            Op::ConcatCols { parts } => {
                let mut start = 0;
                for p in parts {
                    let pc = self.shape(*p).1;
                    let dp = self.acc(grads, *p);
                    for r in 0..m {
                        dp[r * pc..(r + 1) * pc]
                            .iter_mut()
                            .zip(&g[r * n + start..r * n + start + pc])
                            .for_each(|(a, &b)| *a += b);
                    }
                    start += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let xc = self.shape(*x).1;
                let dx = self.acc(grads, *x);
                for r in 0..m {
                    dx[r * xc + start..r * xc + start + n]
                        .iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(a, &b)| *a += b);
                }
            }
            Op::PickCols { x, cols } => {
                let xc = self.shape(*x).1;
                let dx = self.acc(grads, *x);
                for (r, &j) in cols.iter().enumerate() {
                    dx[r * xc + j] += g[r];
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.shape(*logits).1;
                let scale = g[0] / S::of(targets.len() as f64);
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= S::one();
                }
                d.iter_mut().for_each(|v| *v = *v * scale);
                self.acc_own(grads, *logits, d);
            }
            Op::Mse { x, target } => {
                let scale = g[0] * S::of(2.0 / target.len() as f64);
                let d: Vec<S> = self.data(*x).iter().zip(target).map(|(&a, &b)| (a - b) * scale).collect();
                self.acc_own(grads, *x, d);
            }
            Op::SumSquares { x } => {
                let two = S::of(2.0) * g[0];
                let d: Vec<S> = self.data(*x).iter().map(|&v| two * v).collect();
                self.acc_own(grads, *x, d);
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, g: &[S], m: usize, n: usize, grads: &mut [Option<Vec<S>>]) {
        let gm = MatRef::dense(g, m, n);
        let k = self.shape(a).1;
        // dA = G B^T, dB = A^T G
        let mut da = vec![S::zero(); m * k];
        gemm(gm, self.mat(b).t(), MatMut::dense(&mut da, m, k), S::zero());
        let mut db = vec![S::zero(); k * n];
        gemm(self.mat(a).t(), gm, MatMut::dense(&mut db, k, n), S::zero());
        self.acc_own(grads, a, da);
        self.acc_own(grads, b, db);
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: SeqShape,
        probs: &[S],
        g: &[S],
        dim: usize,
        grads: &mut [Option<Vec<S>>],
    ) {
        let SeqShape { batch, seq, heads } = shape;
        let hd = dim / heads;
        let scale = S::of(1.0 / (hd as f64).sqrt());
        let rows = batch * seq;
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![S::zero(); rows * dim];
        let mut dk = vec![S::zero(); rows * dim];
        let mut dv = vec![S::zero(); rows * dim];
        let mut dp = vec![S::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * dim + h * hd;
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                let pm = MatRef::dense(p, seq, seq);
                let go = MatRef { data: g, offset: off, rows: seq, cols: hd, rs: dim, cs: 1 };
                // dV = P^T dO
                gemm(pm.t(), go, MatMut { data: &mut dv, offset: off, rows: seq, cols: hd, rs: dim }, S::one());
                // dP = dO V^T
                gemm(go, MatRef { data: vd, ..go }.t(), MatMut::dense(&mut dp, seq, seq), S::zero());
                // dS = P * (dP - rowdot(dP, P)) * scale
                for i in 0..seq {
                    let pr = &p[i * seq..(i + 1) * seq];
                    let dr = &mut dp[i * seq..(i + 1) * seq];
                    let dot: S = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..seq {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                let ds = MatRef::dense(&dp, seq, seq);
                gemm(ds, MatRef { data: kd, ..go }, MatMut { data: &mut dq, offset: off, rows: seq, cols: hd, rs: dim }, S::one());
                gemm(ds.t(), MatRef { data: qd, ..go }, MatMut { data: &mut dk, offset: off, rows: seq, cols: hd, rs: dim }, S::one());
            }
        }
        self.acc_own(grads, q, dq);
        self.acc_own(grads, k, dk);
        self.acc_own(grads, v, dv);
    }
}

/// `1 − 2/(e^{2v} + 1)`, several times faster than the library `tanh`.
/// Absolute error is a few ulps of 1; saturates when the exponential
/// overflows or underflows.
pub fn tanh<S: Scalar>(v: S) -> S {
    let two = S::one() + S::one();
    S::one() - two / ((two * v).exp() + S::one())
}

pub fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// In-place softmax with max subtraction.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v = *v / sum);
}
