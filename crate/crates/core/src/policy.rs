//! Tiny autoregressive categorical policy over an answer vocabulary.
//!
//! The context encoder embeds every grid cell by its (position, value) pair,
//! mean-pools the cell embeddings, concatenates the mean question-token
//! embedding and applies one `tanh` layer. The answer head adds the
//! embeddings of all previously emitted tokens and a position embedding to
//! that hidden state, applies `tanh`, and projects to vocabulary logits.
//!
//! Two evaluation paths exist. The graph path (`BoundPolicy`) is used for
//! training. The plain path on [`PolicyParameters`] is used for sampling,
//! decoding and every gradient-constant quantity (old and reference
//! distributions, shaping weights).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ad::{softmax_in_place, Graph, Var};
use crate::array::Array;
use crate::error::{contract, Error, Result};

/// Square observation grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Grid {
    size: usize,
    cells: Vec<u8>,
}

impl Grid {
    pub fn new(size: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != size * size {
            return Err(contract(format!(
                "grid of size {size} needs {} cells, got {}",
                size * size,
                cells.len()
            )));
        }
        Ok(Self { size, cells })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(contract("grid rows must form a square"));
        }
        Self::new(size, rows.concat())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.cells[r * self.size + c]
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.cells.chunks(self.size).map(<[u8]>::to_vec).collect()
    }
}

/// Policy input: an observation grid plus prompt tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Context {
    pub observation: Grid,
    pub question: Vec<usize>,
}

/// Token layout: labels `0..C`, then the template and control tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    num_classes: usize,
}

impl Vocab {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes }
    }

    pub fn num_classes(self) -> usize {
        self.num_classes
    }

    pub fn size(self) -> usize {
        self.num_classes + 4
    }

    pub fn open(self) -> usize {
        self.num_classes
    }

    pub fn close(self) -> usize {
        self.num_classes + 1
    }

    pub fn end(self) -> usize {
        self.num_classes + 2
    }

    /// Prompt token used for the question.
    pub fn query(self) -> usize {
        self.num_classes + 3
    }

    pub fn is_label(self, token: usize) -> bool {
        token < self.num_classes
    }

    /// The well-formed answer `<answer> label </answer> <end>`.
    pub fn answer(self, label: usize) -> Vec<usize> {
        vec![self.open(), label, self.close(), self.end()]
    }

    /// Label of a well-formed answer, `None` otherwise.
    pub fn parse_answer(self, tokens: &[usize]) -> Option<usize> {
        match tokens {
            [o, label, c, e]
                if *o == self.open()
                    && self.is_label(*label)
                    && *c == self.close()
                    && *e == self.end() =>
            {
                Some(*label)
            }
            _ => None,
        }
    }

    pub fn token_name(self, token: usize) -> String {
        match token {
            t if t < self.num_classes => format!("L{t}"),
            t if t == self.open() => "<answer>".into(),
            t if t == self.close() => "</answer>".into(),
            t if t == self.end() => "<end>".into(),
            t if t == self.query() => "<query>".into(),
            t => format!("<unk:{t}>"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub grid_size: usize,
    pub obs_values: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
}

impl PolicyConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.num_classes)
    }

    fn validate(&self) -> Result<()> {
        if self.grid_size == 0 || self.obs_values == 0 {
            return Err(contract(
                "grid size and observation values must be positive",
            ));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.max_len == 0 {
            return Err(contract(
                "embedding width, hidden width and max_len must be positive",
            ));
        }
        Ok(())
    }
}

pub const TENSOR_NAMES: [&str; 8] = [
    "grid_embed",
    "question_embed",
    "hidden_w",
    "hidden_b",
    "token_embed",
    "position_embed",
    "output_w",
    "output_b",
];

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParameters {
    config: PolicyConfig,
    tensors: [Array; 8],
}

const GRID: usize = 0;
const QUESTION: usize = 1;
const HIDDEN_W: usize = 2;
const HIDDEN_B: usize = 3;
const TOKEN: usize = 4;
const POSITION: usize = 5;
const OUT_W: usize = 6;
const OUT_B: usize = 7;

impl PolicyParameters {
    fn shapes(c: &PolicyConfig) -> [[usize; 2]; 8] {
        let v = c.vocab().size();
        let cells = c.grid_size * c.grid_size * c.obs_values;
        [
            [cells, c.embed_dim],
            [v, c.embed_dim],
            [2 * c.embed_dim, c.hidden_dim],
            [1, c.hidden_dim],
            [v, c.hidden_dim],
            [c.max_len, c.hidden_dim],
            [c.hidden_dim, v],
            [1, v],
        ]
    }

    /// All-zero parameters: every distribution is uniform.
    pub fn zeros(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let tensors = Self::shapes(&config).map(|s| Array::zeros(&s));
        Ok(Self { config, tensors })
    }

    /// Gaussian initialization, deterministic in `seed`. The output
    /// projection starts at zero, so every initial distribution is uniform.
    pub fn init(config: PolicyConfig, seed: u64) -> Result<Self> {
        Self::gaussian(config, seed, 0.0, 0.0)
    }

    /// As [`init`](Self::init) with a random output projection and bias, so
    /// that distributions differ across contexts and positions.
    pub fn random(config: PolicyConfig, seed: u64) -> Result<Self> {
        let out_std = 1.0 / (config.hidden_dim as f64).sqrt();
        Self::gaussian(config, seed, out_std, 0.5)
    }

    fn gaussian(config: PolicyConfig, seed: u64, out_std: f64, bias_std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = Self::shapes(&config);
        // Grid cells are mean-pooled; scale so the pooled vector has unit variance.
        let cells = (config.grid_size * config.grid_size) as f64;
        let stds = [
            cells.sqrt(),
            1.0,
            1.0 / ((2 * config.embed_dim) as f64).sqrt(),
            0.0,
            0.5,
            0.5,
            out_std,
            bias_std,
        ];
        let tensors = std::array::from_fn(|i| {
            let shape = shapes[i];
            let n = shape[0] * shape[1];
            let data = if stds[i] == 0.0 {
                vec![0.0; n]
            } else {
                let normal = Normal::new(0.0, stds[i]).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            Array::new(shape.to_vec(), data).expect("shape matches")
        });
        Ok(Self { config, tensors })
    }

    pub fn from_tensors(config: PolicyConfig, tensors: Vec<Array>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::shapes(&config);
        if tensors.len() != shapes.len() {
            return Err(contract(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(TENSOR_NAMES) {
            if t.shape() != s {
                return Err(contract(format!(
                    "tensor {name} has shape {:?}, expected {s:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(contract(format!("tensor {name} has non-finite entries")));
            }
        }
        let tensors: [Array; 8] = tensors.try_into().expect("length checked");
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    pub fn tensors(&self) -> &[Array] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Array> {
        TENSOR_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Array::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Array::is_finite)
    }

    fn check_context(&self, ctx: &Context) -> Result<()> {
        let c = &self.config;
        if ctx.observation.size() != c.grid_size {
            return Err(contract(format!(
                "grid size {} does not match policy grid size {}",
                ctx.observation.size(),
                c.grid_size
            )));
        }
        if let Some(v) = ctx
            .observation
            .cells()
            .iter()
            .find(|v| **v as usize >= c.obs_values)
        {
            return Err(contract(format!(
                "cell value {v} outside [0, {})",
                c.obs_values
            )));
        }
        if ctx.question.is_empty() {
            return Err(contract("question must contain at least one token"));
        }
        self.check_tokens(&ctx.question)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let v = self.vocab().size();
        match tokens.iter().find(|t| **t >= v) {
            Some(t) => Err(contract(format!(
                "token {t} outside vocabulary of size {v}"
            ))),
            None => Ok(()),
        }
    }

    fn cell_indices(&self, ctx: &Context) -> Vec<usize> {
        let vals = self.config.obs_values;
        ctx.observation
            .cells()
            .iter()
            .enumerate()
            .map(|(pos, &v)| pos * vals + v as usize)
            .collect()
    }

    /// Hidden state of the context encoder.
    pub fn encode(&self, ctx: &Context) -> Result<Vec<f64>> {
        self.check_context(ctx)?;
        let d = self.config.embed_dim;
        let h = self.config.hidden_dim;
        let mut x = vec![0.0; 2 * d];
        let cells = self.cell_indices(ctx);
        for &i in &cells {
            for (xv, e) in x[..d].iter_mut().zip(self.tensors[GRID].row(i)) {
                *xv += e;
            }
        }
        x[..d].iter_mut().for_each(|v| *v /= cells.len() as f64);
        for &q in &ctx.question {
            for (xv, e) in x[d..].iter_mut().zip(self.tensors[QUESTION].row(q)) {
                *xv += e;
            }
        }
        x[d..]
            .iter_mut()
            .for_each(|v| *v /= ctx.question.len() as f64);

        let w = &self.tensors[HIDDEN_W];
        let mut hidden = self.tensors[HIDDEN_B].data().to_vec();
        for (p, &xv) in x.iter().enumerate() {
            for (hv, wv) in hidden.iter_mut().zip(w.row(p)) {
                *hv += xv * wv;
            }
        }
        debug_assert_eq!(hidden.len(), h);
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        Ok(hidden)
    }

    /// Next-token distribution at position `prefix.len()`.
    pub fn step_distribution(&self, hidden: &[f64], prefix: &[usize]) -> Vec<f64> {
        let t = prefix.len().min(self.config.max_len - 1);
        let mut z = hidden.to_vec();
        for &tok in prefix {
            for (zv, e) in z.iter_mut().zip(self.tensors[TOKEN].row(tok)) {
                *zv += e;
            }
        }
        for (zv, e) in z.iter_mut().zip(self.tensors[POSITION].row(t)) {
            *zv += e;
        }
        let w = &self.tensors[OUT_W];
        let mut logits = self.tensors[OUT_B].data().to_vec();
        for (p, zv) in z.iter().enumerate() {
            let u = zv.tanh();
            for (l, wv) in logits.iter_mut().zip(w.row(p)) {
                *l += u * wv;
            }
        }
        softmax_in_place(&mut logits);
        logits
    }

    /// Greedy decode: argmax at every step until `<end>` or `max_len`.
    pub fn greedy_decode(&self, ctx: &Context) -> Result<Vec<usize>> {
        let hidden = self.encode(ctx)?;
        let end = self.vocab().end();
        let mut out = Vec::with_capacity(self.config.max_len);
        while out.len() < self.config.max_len {
            let probs = self.step_distribution(&hidden, &out);
            let tok = argmax(&probs);
            out.push(tok);
            if tok == end {
                break;
            }
        }
        Ok(out)
    }

    /// Binds every tensor as a differentiable leaf of `g`.
    pub fn bind<'g>(&self, g: &'g Graph) -> BoundPolicy<'g> {
        BoundPolicy {
            graph: g,
            config: self.config.clone(),
            vars: std::array::from_fn(|i| g.param(self.tensors[i].clone())),
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Policy parameters living in a [`Graph`].
pub struct BoundPolicy<'g> {
    graph: &'g Graph,
    config: PolicyConfig,
    vars: [Var; 8],
}

impl<'g> BoundPolicy<'g> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Reassembles bound leaves, e.g. the perturbation leaves of a gradient check.
    pub fn from_vars(graph: &'g Graph, config: PolicyConfig, vars: &[Var]) -> Result<Self> {
        let vars: [Var; 8] = vars
            .try_into()
            .map_err(|_| contract(format!("expected 8 parameter leaves, got {}", vars.len())))?;
        Ok(Self {
            graph,
            config,
            vars,
        })
    }

    /// `[1, H]` hidden state of the context encoder.
    pub fn encode(&self, ctx: &Context) -> Result<Var> {
        let g = self.graph;
        let vals = self.config.obs_values;
        if ctx.observation.size() != self.config.grid_size {
            return Err(contract("grid size does not match policy"));
        }
        let cells: Vec<usize> = ctx
            .observation
            .cells()
            .iter()
            .enumerate()
            .map(|(pos, &v)| pos * vals + v as usize)
            .collect();
        let grid = g.mean_rows(g.gather_rows(self.vars[GRID], &cells)?)?;
        let question = g.mean_rows(g.gather_rows(self.vars[QUESTION], &ctx.question)?)?;
        let x = g.concat_cols(grid, question)?;
        let pre = g.add(g.matmul(x, self.vars[HIDDEN_W])?, self.vars[HIDDEN_B])?;
        g.tanh(pre)
    }

    /// `[T, V]` teacher-forced next-token distributions along `output`.
    pub fn sequence_distributions(&self, hidden: Var, output: &[usize]) -> Result<Var> {
        let g = self.graph;
        let len = output.len();
        if len == 0 {
            return Err(contract("output must be non-empty"));
        }
        if len > self.config.max_len {
            return Err(contract(format!(
                "output longer than max_len {}",
                self.config.max_len
            )));
        }
        let vocab = self.config.vocab().size();
        if let Some(t) = output.iter().find(|t| **t >= vocab) {
            return Err(contract(format!(
                "token {t} outside vocabulary of size {vocab}"
            )));
        }
        let positions: Vec<usize> = (0..len).collect();
        let mut z = g.gather_rows(self.vars[POSITION], &positions)?;
        if len > 1 {
            let mut prefix_sum = vec![0.0; len * (len - 1)];
            for t in 0..len {
                for j in 0..t {
                    prefix_sum[t * (len - 1) + j] = 1.0;
                }
            }
            let mask = g.constant(Array::new(vec![len, len - 1], prefix_sum)?);
            let prev = g.gather_rows(self.vars[TOKEN], &output[..len - 1])?;
            z = g.add(g.matmul(mask, prev)?, z)?;
        }
        let u = g.tanh(g.add_row(z, hidden)?)?;
        let logits = g.add_row(g.matmul(u, self.vars[OUT_W])?, self.vars[OUT_B])?;
        g.softmax_rows(logits)
    }
}

/// Per-position next-token distributions for one output sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalSequenceDistribution {
    probs: Array,
}

impl CategoricalSequenceDistribution {
    /// Wraps a `[T, V]` matrix whose rows are strictly positive and sum to 1.
    pub fn new(probs: Array) -> Result<Self> {
        if probs.rank() != 2 {
            return Err(contract("distribution must be a [T, V] matrix"));
        }
        for t in 0..probs.rows() {
            let row = probs.row(t);
            if row.iter().any(|p| !(*p > 0.0)) {
                return Err(contract(format!("row {t} has a non-positive entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(contract(format!("row {t} sums to {s}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.cols()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.probs.row(t)
    }

    pub fn as_array(&self) -> &Array {
        &self.probs
    }

    /// Σ_t log row_t[tokens_t].
    pub fn log_prob(&self, tokens: &[usize]) -> f64 {
        self.token_log_probs(tokens).iter().sum()
    }

    pub fn token_log_probs(&self, tokens: &[usize]) -> Vec<f64> {
        tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| self.probs.get(t, tok).ln())
            .collect()
    }
}

/// Distributions of `params` along `output` under teacher forcing.
pub fn teacher_forced_distributions(
    params: &PolicyParameters,
    context: &Context,
    output: &[usize],
) -> Result<CategoricalSequenceDistribution> {
    if output.is_empty() {
        return Err(contract("output must be non-empty"));
    }
    if output.len() > params.config.max_len {
        return Err(contract(format!(
            "output longer than max_len {}",
            params.config.max_len
        )));
    }
    params.check_tokens(output)?;
    let hidden = params.encode(context)?;
    let mut rows = Vec::with_capacity(output.len());
    for t in 0..output.len() {
        rows.push(params.step_distribution(&hidden, &output[..t]));
    }
    CategoricalSequenceDistribution::new(Array::from_rows(&rows)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledOutput {
    pub tokens: Vec<usize>,
    /// Log-probability accumulated while sampling.
    pub log_prob: f64,
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draws `group_size` outputs, each ending at `<end>` or truncated at `max_len`.
pub fn sample_group<R: Rng + ?Sized>(
    params: &PolicyParameters,
    context: &Context,
    group_size: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<SampledOutput>> {
    if group_size < 2 {
        return Err(contract(format!(
            "group size must be at least 2, got {group_size}"
        )));
    }
    if max_len == 0 || max_len > params.config.max_len {
        return Err(contract(format!(
            "max_len must lie in [1, {}], got {max_len}",
            params.config.max_len
        )));
    }
    let hidden = params.encode(context)?;
    let end = params.vocab().end();
    let mut group = Vec::with_capacity(group_size);
    for _ in 0..group_size {
        let mut tokens = Vec::with_capacity(max_len);
        let mut log_prob = 0.0;
        while tokens.len() < max_len {
            let probs = params.step_distribution(&hidden, &tokens);
            let tok = sample_index(&probs, rng);
            log_prob += probs[tok].ln();
            tokens.push(tok);
            if tok == end {
                break;
            }
        }
        group.push(SampledOutput { tokens, log_prob });
    }
    Ok(group)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotRole {
    Reference,
    Old,
    Final,
}

impl fmt::Display for SnapshotRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SnapshotRole::Reference => "reference",
            SnapshotRole::Old => "old",
            SnapshotRole::Final => "final",
        })
    }
}

/// Frozen copy of policy parameters.
#[derive(Clone, Debug)]
pub struct PolicySnapshot {
    role: SnapshotRole,
    params: Arc<PolicyParameters>,
}

impl PolicySnapshot {
    pub fn role(&self) -> SnapshotRole {
        self.role
    }

    pub fn params(&self) -> &PolicyParameters {
        &self.params
    }

    pub fn into_params(self) -> PolicyParameters {
        Arc::try_unwrap(self.params).unwrap_or_else(|p| (*p).clone())
    }
}

impl std::ops::Deref for PolicySnapshot {
    type Target = PolicyParameters;

    fn deref(&self) -> &PolicyParameters {
        &self.params
    }
}

pub fn snapshot(params: &PolicyParameters, role: SnapshotRole) -> Result<PolicySnapshot> {
    if !params.is_finite() {
        return Err(contract("cannot snapshot non-finite parameters"));
    }
    Ok(PolicySnapshot {
        role,
        params: Arc::new(params.clone()),
    })
}

pub const SNAPSHOT_FORMAT: &str = "domrl-policy-snapshot";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    format: String,
    version: u32,
    role: SnapshotRole,
    architecture: PolicyConfig,
    tensors: BTreeMap<String, TensorRecord>,
}

impl PolicySnapshot {
    pub fn to_json(&self) -> Result<String> {
        let tensors = TENSOR_NAMES
            .iter()
            .zip(self.params.tensors())
            .map(|(name, t)| {
                (
                    name.to_string(),
                    TensorRecord {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        let file = SnapshotFile {
            format: SNAPSHOT_FORMAT.into(),
            version: SNAPSHOT_VERSION,
            role: self.role,
            architecture: self.params.config().clone(),
            tensors,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut file: SnapshotFile = serde_json::from_str(text)?;
        if file.format != SNAPSHOT_FORMAT {
            return Err(Error::Format(format!(
                "unexpected format tag `{}`",
                file.format
            )));
        }
        if file.version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!(
                "unsupported snapshot version {}",
                file.version
            )));
        }
        let mut tensors = Vec::with_capacity(TENSOR_NAMES.len());
        for name in TENSOR_NAMES {
            let rec = file
                .tensors
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            tensors.push(Array::new(rec.shape, rec.data)?);
        }
        if let Some(extra) = file.tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        let params = PolicyParameters::from_tensors(file.architecture, tensors)?;
        snapshot(&params, file.role)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> PolicyConfig {
        PolicyConfig {
            grid_size: 3,
            obs_values: 2,
            num_classes: 3,
            embed_dim: 4,
            hidden_dim: 6,
            max_len: 6,
        }
    }

    fn ctx(cells: &[u8]) -> Context {
        Context {
            observation: Grid::new(3, cells.to_vec()).unwrap(),
            question: vec![Vocab::new(3).query()],
        }
    }

    #[test]
    fn zero_parameters_give_uniform_rows() {
        let mut cfg = small_config();
        cfg.hidden_dim = 0;
        assert!(PolicyParameters::zeros(cfg).is_err());
        let p = PolicyParameters::zeros(small_config()).unwrap();
        let c = ctx(&[0, 1, 0, 1, 1, 0, 0, 0, 1]);
        let v = p.vocab();
        let d = teacher_forced_distributions(&p, &c, &[v.open(), 0, v.close()]).unwrap();
        assert_eq!(d.len(), 3);
        for t in 0..3 {
            for x in d.row(t) {
                assert_eq!(*x, 1.0 / v.size() as f64);
            }
        }
    }

    #[test]
    fn zero_parameters_sample_uniform_steps() {
        let p = PolicyParameters::zeros(small_config()).unwrap();
        let c = ctx(&[0; 9]);
        let h = p.encode(&c).unwrap();
        for prefix in [&[][..], &[3], &[3, 0, 4]] {
            let row = p.step_distribution(&h, prefix);
            assert!(row.iter().all(|x| *x == 1.0 / 7.0));
        }
    }

    #[test]
    fn out_of_vocabulary_is_rejected() {
        let p = PolicyParameters::random(small_config(), 1).unwrap();
        let c = ctx(&[0; 9]);
        assert!(teacher_forced_distributions(&p, &c, &[99]).is_err());
        assert!(teacher_forced_distributions(&p, &c, &[]).is_err());
    }

    #[test]
    fn graph_path_matches_plain_path() {
        let p = PolicyParameters::random(small_config(), 7).unwrap();
        let c = ctx(&[1, 0, 0, 1, 1, 0, 1, 0, 1]);
        let out = [3, 1, 4, 5];
        let plain = teacher_forced_distributions(&p, &c, &out).unwrap();
        let g = Graph::new();
        let bound = p.bind(&g);
        let h = bound.encode(&c).unwrap();
        let dist = bound.sequence_distributions(h, &out).unwrap();
        let value = g.value(dist);
        for (a, b) in value.data().iter().zip(plain.as_array().data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn snapshot_round_trips_through_json() {
        let p = PolicyParameters::random(small_config(), 3).unwrap();
        let s = snapshot(&p, SnapshotRole::Reference).unwrap();
        let back = PolicySnapshot::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back.role(), SnapshotRole::Reference);
        assert_eq!(back.params(), &p);
    }

    #[test]
    fn snapshot_rejects_wrong_version() {
        let p = PolicyParameters::random(small_config(), 3).unwrap();
        let s = snapshot(&p, SnapshotRole::Final).unwrap();
        let text = s
            .to_json()
            .unwrap()
            .replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(
            PolicySnapshot::from_json(&text),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn parse_answer_requires_exact_template() {
        let v = Vocab::new(3);
        assert_eq!(v.parse_answer(&v.answer(2)), Some(2));
        assert_eq!(v.parse_answer(&[v.open(), 2, v.close()]), None);
        assert_eq!(
            v.parse_answer(&[v.open(), v.open(), v.close(), v.end()]),
            None
        );
        assert_eq!(v.token_name(v.query()), "<query>");
    }
}
