//! Small transformers for the two-sequence tasks and their training loop.
//!
//! Every model keeps a *stream* of token states that is refined layer by
//! layer (attention, residual, layer norm, feed-forward, residual, layer
//! norm) and read out by a linear head. The variants differ only in the
//! attention sublayer:
//!
//! | variant            | stream      | keys         | values       | queries              |
//! |--------------------|-------------|--------------|--------------|----------------------|
//! | `indirect`         | content     | conditioning | stream       | `M + stream`, biased |
//! | `naive_misaligned` | content     | conditioning | stream       | `M + stream`         |
//! | `cross` (sorting)  | content     | conditioning | conditioning | stream               |
//! | `cross` (retrieval)| conditioning| content      | content      | stream               |
//!
//! Conditioning is the ordering (sorting) or the padded query (retrieval);
//! content is the target or the reference. Keys and values that do not come
//! from the stream are the (fixed) embedded input sequence.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::attention::{
    self, AttentionConfig, BiasMlp, BiasMlpVars, IndirectParams, Projections, QueryEmbeddings, RelationalState,
    BIAS_HIDDEN,
};
use crate::init;
use crate::rng;
use crate::tasks::{
    first_occurrence, is_consistent_sort, Dataset, RetrievalInstance, SortingInstance, TaskKind, ALPHABET, QUERY_LEN,
    REF_LEN, SORT_LEN,
};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Reserved token id used to pad the retrieval query.
pub const PAD: usize = ALPHABET;
pub const VOCAB: usize = ALPHABET + 1;
pub const SEQ_LEN: usize = 10;

const CHECKPOINT_MAGIC: &str = "ialab-checkpoint v1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite training loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Indirect,
    NaiveMisaligned,
    Cross,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Indirect, Variant::NaiveMisaligned, Variant::Cross];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Indirect => "indirect",
            Variant::NaiveMisaligned => "naive_misaligned",
            Variant::Cross => "cross",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "indirect" => Ok(Variant::Indirect),
            "naive_misaligned" => Ok(Variant::NaiveMisaligned),
            "cross" => Ok(Variant::Cross),
            other => Err(format!(
                "unknown variant `{other}` (expected indirect, naive_misaligned, cross)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub task: TaskKind,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl ModelSpec {
    /// 6 layers, 4 heads, width 128.
    pub fn full(variant: Variant, task: TaskKind) -> Self {
        Self {
            variant,
            task,
            n_layers: 6,
            n_heads: 4,
            d_model: 128,
            vocab_size: VOCAB,
            max_len: SEQ_LEN,
        }
    }

    /// 2 layers, 4 heads, width 64.
    pub fn fast(variant: Variant, task: TaskKind) -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            ..Self::full(variant, task)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return Err(ModelError::Config(format!("zero-sized model: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "{} heads do not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.vocab_size < VOCAB || self.max_len < SEQ_LEN {
            return Err(ModelError::Config(format!(
                "vocab_size >= {VOCAB} and max_len >= {SEQ_LEN} required"
            )));
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        2 * self.d_model
    }
}

/// Which input sequence feeds which role.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// Ordering (sorting) or query (retrieval).
    Conditioning,
    /// Target (sorting) or reference (retrieval).
    Content,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuerySource {
    /// Learned embeddings plus the value-side stream.
    Enriched,
    /// The stream itself.
    Sequence(Source),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KvAssignment {
    pub keys: Source,
    pub values: Source,
    pub queries: QuerySource,
}

pub fn assign_kv(variant: Variant, task: TaskKind) -> KvAssignment {
    match (variant, task) {
        (Variant::Indirect | Variant::NaiveMisaligned, _) => KvAssignment {
            keys: Source::Conditioning,
            values: Source::Content,
            queries: QuerySource::Enriched,
        },
        (Variant::Cross, TaskKind::Sorting) => KvAssignment {
            keys: Source::Conditioning,
            values: Source::Conditioning,
            queries: QuerySource::Sequence(Source::Content),
        },
        (Variant::Cross, TaskKind::Retrieval) => KvAssignment {
            keys: Source::Content,
            values: Source::Content,
            queries: QuerySource::Sequence(Source::Conditioning),
        },
    }
}

/// Checks that an assignment has the shape its variant requires.
pub fn validate_assignment(variant: Variant, a: &KvAssignment) -> Result<()> {
    let ok = match variant {
        Variant::Indirect | Variant::NaiveMisaligned => {
            a.keys == Source::Conditioning && a.values == Source::Content && a.queries == QuerySource::Enriched
        }
        Variant::Cross => matches!(a.queries, QuerySource::Sequence(q) if q != a.keys) && a.keys == a.values,
    };
    if ok {
        Ok(())
    } else {
        Err(ModelError::Config(format!(
            "{variant}: invalid key/value assignment {a:?}"
        )))
    }
}

/// Prediction target of one encoded instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    /// Destination index per content token.
    PerToken(Vec<usize>),
    /// Start index of the query in the reference.
    Start(usize),
}

/// A task instance as token ids; both sequences have length [`SEQ_LEN`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub conditioning: Vec<usize>,
    pub content: Vec<usize>,
    pub target: Target,
}

impl From<&SortingInstance> for Encoded {
    fn from(s: &SortingInstance) -> Self {
        Self {
            conditioning: s.ordering.clone(),
            content: s.target.clone(),
            target: Target::PerToken(s.labels.clone()),
        }
    }
}

impl From<&RetrievalInstance> for Encoded {
    fn from(r: &RetrievalInstance) -> Self {
        let mut q = r.query.clone();
        q.resize(REF_LEN, PAD);
        Self {
            conditioning: q,
            content: r.reference.clone(),
            target: Target::Start(r.start),
        }
    }
}

/// Encoded train and test splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskData {
    pub task: TaskKind,
    pub train: Vec<Encoded>,
    pub test: Vec<Encoded>,
}

impl From<&Dataset> for TaskData {
    fn from(ds: &Dataset) -> Self {
        match ds {
            Dataset::Sorting(s) => Self {
                task: TaskKind::Sorting,
                train: s.train.iter().map(Encoded::from).collect(),
                test: s.test.iter().map(Encoded::from).collect(),
            },
            Dataset::Retrieval(s) => Self {
                task: TaskKind::Retrieval,
                train: s.train.iter().map(Encoded::from).collect(),
                test: s.test.iter().map(Encoded::from).collect(),
            },
        }
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIdx {
    w_q: usize,
    w_k: usize,
    w_v: usize,
    w_o: usize,
    m: Option<usize>,
    bias: Vec<[usize; 3]>,
    w_g: Option<usize>,
    ln1: [usize; 2],
    ff: [usize; 4],
    ln2: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tok: usize,
    pos_cond: usize,
    pos_content: usize,
    layers: Vec<LayerIdx>,
    head_w: usize,
    head_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    layout: Layout,
}

/// Initial std of the classification head, small so the untrained model
/// predicts nearly uniformly.
const HEAD_INIT_STD: f64 = 1e-3;

pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut r = rng::stream(seed, 0);
    let (d, len) = (spec.d_model, spec.max_len);
    let mut p = ParamStore::default();
    let tok = p.push("tok_emb", Tensor::randn(&[spec.vocab_size, d], 1.0, &mut r));
    let pos_cond = p.push("pos_cond", Tensor::randn(&[len, d], 1.0, &mut r));
    let pos_content = p.push("pos_content", Tensor::randn(&[len, d], 1.0, &mut r));
    let mut layers = Vec::with_capacity(spec.n_layers);
    for l in 0..spec.n_layers {
        let name = |s: &str| format!("layer{l}.{s}");
        let w_q = p.push(name("w_q"), init::orthogonal(d, &mut r));
        let w_k = p.push(name("w_k"), init::orthogonal(d, &mut r));
        let w_v = p.push(name("w_v"), init::orthogonal(d, &mut r));
        let w_o = p.push(name("w_o"), init::orthogonal(d, &mut r));
        let enriched = spec.variant != Variant::Cross;
        let m = enriched.then(|| p.push(name("query_emb"), Tensor::randn(&[len, d], 0.5, &mut r)));
        let mut bias = Vec::new();
        let mut w_g = None;
        if spec.variant == Variant::Indirect {
            for h in 0..spec.n_heads {
                let f = BiasMlp::random(BIAS_HIDDEN, &mut r);
                bias.push([
                    p.push(name(&format!("f{h}.w1")), f.w1),
                    p.push(name(&format!("f{h}.b1")), f.b1),
                    p.push(name(&format!("f{h}.w2")), f.w2),
                ]);
            }
            // the last layer's offsets would feed nothing
            if l + 1 < spec.n_layers {
                w_g = Some(p.push(name("w_g"), init::fan_in(d, len, &mut r)));
            }
        }
        let hidden = spec.ffn_hidden();
        let ln1 = [
            p.push(name("ln1.gain"), Tensor::full(&[d], 1.0)),
            p.push(name("ln1.bias"), Tensor::zeros(&[d])),
        ];
        let ff = [
            p.push(name("ff.w1"), init::fan_in(d, hidden, &mut r)),
            p.push(name("ff.b1"), Tensor::zeros(&[hidden])),
            p.push(name("ff.w2"), init::fan_in(hidden, d, &mut r)),
            p.push(name("ff.b2"), Tensor::zeros(&[d])),
        ];
        let ln2 = [
            p.push(name("ln2.gain"), Tensor::full(&[d], 1.0)),
            p.push(name("ln2.bias"), Tensor::zeros(&[d])),
        ];
        layers.push(LayerIdx {
            w_q,
            w_k,
            w_v,
            w_o,
            m,
            bias,
            w_g,
            ln1,
            ff,
            ln2,
        });
    }
    let classes = spec.task.n_classes();
    let head_w = p.push("head.w", Tensor::randn(&[d, classes], HEAD_INIT_STD, &mut r));
    let head_b = p.push("head.b", Tensor::zeros(&[classes]));
    Ok(Model {
        spec: *spec,
        params: p,
        layout: Layout {
            tok,
            pos_cond,
            pos_content,
            layers,
            head_w,
            head_b,
        },
    })
}

/// Result of one forward pass.
pub struct Forward {
    /// `[B*len, C]` for sorting, `[B, C]` for retrieval.
    pub logits: Var,
    /// Mean cross-entropy over labelled rows.
    pub loss: Var,
    /// Tape handles of every parameter, in [`ParamStore`] order.
    pub params: Vec<Var>,
    /// Per-layer attention weights, `[B*H, m, n]`.
    pub weights: Vec<Var>,
}

fn stack(batch: &[&Encoded], f: impl Fn(&Encoded) -> &[usize]) -> Vec<usize> {
    batch.iter().flat_map(|e| f(e).iter().copied()).collect()
}

/// Row labels for the logits of a batch.
pub fn batch_labels(task: TaskKind, batch: &[&Encoded]) -> Vec<Option<usize>> {
    match task {
        TaskKind::Sorting => batch
            .iter()
            .flat_map(|e| match &e.target {
                Target::PerToken(l) => e
                    .content
                    .iter()
                    .zip(l)
                    .map(|(&t, &l)| (t != PAD).then_some(l))
                    .collect(),
                Target::Start(_) => vec![None; e.content.len()],
            })
            .collect(),
        TaskKind::Retrieval => batch
            .iter()
            .map(|e| match e.target {
                Target::Start(s) => Some(s),
                Target::PerToken(_) => None,
            })
            .collect(),
    }
}

impl Model {
    pub fn kv_assignment(&self) -> KvAssignment {
        assign_kv(self.spec.variant, self.spec.task)
    }

    fn check_batch(&self, batch: &[&Encoded]) -> Result<()> {
        if batch.is_empty() {
            return Err(ModelError::Config("empty batch".into()));
        }
        for e in batch {
            if e.conditioning.len() != SEQ_LEN || e.content.len() != SEQ_LEN {
                return Err(ModelError::Config(format!(
                    "sequences must have length {SEQ_LEN}, got {} and {}",
                    e.conditioning.len(),
                    e.content.len()
                )));
            }
            let kind_ok = matches!(
                (&e.target, self.spec.task),
                (Target::PerToken(_), TaskKind::Sorting) | (Target::Start(_), TaskKind::Retrieval)
            );
            if !kind_ok {
                return Err(ModelError::Config(format!(
                    "instance does not belong to the {} task",
                    self.spec.task
                )));
            }
        }
        Ok(())
    }

    /// Builds the forward graph for `batch` on `tape`.
    pub fn forward(&self, tape: &mut Tape, batch: &[&Encoded], train: bool) -> Result<Forward> {
        self.check_batch(batch)?;
        let assignment = self.kv_assignment();
        debug_assert!(validate_assignment(self.spec.variant, &assignment).is_ok());
        let spec = &self.spec;
        let (b, d, heads) = (batch.len(), spec.d_model, spec.n_heads);
        let params: Vec<Var> = self
            .params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), train))
            .collect();
        let lay = &self.layout;

        let embed = |tape: &mut Tape, src: Source| -> Result<Var> {
            let (tokens, pos) = match src {
                Source::Conditioning => (stack(batch, |e| &e.conditioning), lay.pos_cond),
                Source::Content => (stack(batch, |e| &e.content), lay.pos_content),
            };
            let t = tape.embedding_lookup(params[lay.tok], &tokens)?;
            let positions: Vec<usize> = (0..b).flat_map(|_| 0..SEQ_LEN).collect();
            let p = tape.embedding_lookup(params[pos], &positions)?;
            Ok(tape.add(t, p)?)
        };

        let (mut stream, fixed) = match assignment.queries {
            QuerySource::Enriched => (embed(tape, assignment.values)?, embed(tape, assignment.keys)?),
            QuerySource::Sequence(q) => (embed(tape, q)?, embed(tape, assignment.keys)?),
        };
        let cfg = AttentionConfig::new(d, heads, SEQ_LEN, SEQ_LEN)?;
        let mut state = RelationalState::initial(tape, SEQ_LEN, SEQ_LEN);
        let mut weights = Vec::with_capacity(spec.n_layers);
        for li in &lay.layers {
            let proj = Projections {
                w_q: params[li.w_q],
                w_k: params[li.w_k],
                w_v: params[li.w_v],
                w_o: Some(params[li.w_o]),
            };
            let out = match spec.variant {
                Variant::Indirect => {
                    let emb = QueryEmbeddings::identity(params[li.m.expect("indirect has M")], SEQ_LEN);
                    let offset_map = match li.w_g {
                        Some(g) => params[g],
                        // last layer: the updated offsets are not consumed
                        None => tape.constant(Tensor::zeros(&[d, SEQ_LEN])),
                    };
                    let ip = IndirectParams {
                        bias: li
                            .bias
                            .iter()
                            .map(|&[w1, b1, w2]| BiasMlpVars {
                                w1: params[w1],
                                b1: params[b1],
                                w2: params[w2],
                            })
                            .collect(),
                        offset_map,
                    };
                    let o = attention::indirect_attention(tape, fixed, stream, &emb, &state, &ip, &proj, &cfg, b)?;
                    state = o.state;
                    weights.push(o.weights);
                    o.output
                }
                Variant::NaiveMisaligned => {
                    let emb = QueryEmbeddings::identity(params[li.m.expect("naive has M")], SEQ_LEN);
                    let q = attention::build_queries(tape, &emb, stream, b)?;
                    let o = attention::naive_misaligned_attention(tape, fixed, stream, q, &proj, heads, b)?;
                    weights.push(o.weights);
                    o.output
                }
                Variant::Cross => {
                    let o = attention::cross_attention(tape, stream, fixed, &proj, heads, b)?;
                    weights.push(o.weights);
                    o.output
                }
            };
            let h = tape.add(stream, out)?;
            let h = norm(tape, h, params[li.ln1[0]], params[li.ln1[1]])?;
            let f = tape.matmul(h, params[li.ff[0]])?;
            let f = tape.add_row(f, params[li.ff[1]])?;
            let f = tape.relu(f);
            let f = tape.matmul(f, params[li.ff[2]])?;
            let f = tape.add_row(f, params[li.ff[3]])?;
            let h = tape.add(h, f)?;
            stream = norm(tape, h, params[li.ln2[0]], params[li.ln2[1]])?;
        }
        let readout = match spec.task {
            TaskKind::Sorting => stream,
            TaskKind::Retrieval => {
                let rows: Vec<usize> = (0..b).map(|i| i * SEQ_LEN).collect();
                tape.embedding_lookup(stream, &rows)?
            }
        };
        let logits = tape.matmul(readout, params[lay.head_w])?;
        let logits = tape.add_row(logits, params[lay.head_b])?;
        let loss = tape.cross_entropy(logits, &batch_labels(spec.task, batch))?;
        Ok(Forward {
            logits,
            loss,
            params,
            weights,
        })
    }

    /// Arg-max predictions: one per content token (sorting) or one per
    /// instance (retrieval), flattened.
    pub fn predict(&self, batch: &[&Encoded]) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, batch, false)?;
        let logits = tape.value(fwd.logits);
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    pub fn loss(&self, batch: &[&Encoded]) -> Result<f64> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, batch, false)?;
        Ok(tape.value(fwd.loss).data()[0])
    }
}

fn norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layer_norm(x);
    let n = tape.mul_row(n, gain)?;
    Ok(tape.add_row(n, bias)?)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Adam => "adam",
            Optimizer::Sgd => "sgd",
        })
    }
}

impl FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(format!("unknown optimizer `{other}` (expected adam, sgd)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Decoupled weight decay (AdamW style for Adam, plain L2 step for SGD).
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            lr: 3e-4,
            epochs: 200,
            batch_size: 64,
            seed: 0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ModelError::Config(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(ModelError::Config("weight_decay must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Adam state over a parameter store.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.tensors.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                *w -= lr * (update + weight_decay * *w);
            }
        }
    }
}

fn sgd_step(params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, weight_decay: f64) {
    for (p, g) in params.tensors.iter_mut().zip(grads) {
        let Some(g) = g else { continue };
        for (w, gk) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * (gk + weight_decay * *w);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches (weighted by batch size).
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,train_loss,test_accuracy,wall_ms";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRAIN_LOG_HEADER}\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{},{}\n",
                r.epoch,
                crate::noise::fmt_real(r.train_loss),
                crate::noise::fmt_real(r.test_accuracy),
                r.wall_ms
            );
        }
        s
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.rows.last().map(|r| r.test_accuracy)
    }
}

/// Accuracy summary over a set of instances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    /// Per-token (sorting) or per-instance (retrieval) exact accuracy.
    pub accuracy: f64,
    /// Fraction of instances whose prediction is valid even if not the
    /// canonical label: a consistent sort, or any occurrence of the query.
    pub consistency_accuracy: f64,
    pub n_instances: usize,
}

/// Chunk size for evaluation forward passes.
const EVAL_BATCH: usize = 256;

pub fn evaluate(model: &Model, data: &[Encoded]) -> Result<Metrics> {
    let mut preds = Vec::new();
    for chunk in data.chunks(EVAL_BATCH) {
        let refs: Vec<&Encoded> = chunk.iter().collect();
        preds.extend(model.predict(&refs)?);
    }
    Ok(score(model.spec.task, data, &preds))
}

/// Scores flattened predictions as laid out by [`Model::predict`].
pub fn score(task: TaskKind, data: &[Encoded], preds: &[usize]) -> Metrics {
    let (mut correct, mut total, mut consistent) = (0usize, 0usize, 0usize);
    match task {
        TaskKind::Sorting => {
            for (e, p) in data.iter().zip(preds.chunks(SORT_LEN)) {
                let Target::PerToken(labels) = &e.target else { continue };
                correct += labels.iter().zip(p).filter(|(a, b)| a == b).count();
                total += labels.len();
                consistent += is_consistent_sort(&e.content, &e.conditioning, p) as usize;
            }
        }
        TaskKind::Retrieval => {
            for (e, &p) in data.iter().zip(preds) {
                let Target::Start(s) = e.target else { continue };
                correct += (p == s) as usize;
                total += 1;
                let q = &e.conditioning[..QUERY_LEN];
                let hit = p + QUERY_LEN <= e.content.len() && &e.content[p..p + QUERY_LEN] == q;
                debug_assert!(first_occurrence(q, &e.content).is_some());
                consistent += hit as usize;
            }
        }
    }
    Metrics {
        accuracy: correct as f64 / total.max(1) as f64,
        consistency_accuracy: consistent as f64 / data.len().max(1) as f64,
        n_instances: data.len(),
    }
}

/// Trains `model` in place, evaluating on `data.test` after every epoch.
/// `on_epoch` sees each row as it is produced.
pub fn train(
    model: &mut Model,
    data: &TaskData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.task != model.spec.task {
        return Err(ModelError::Config(format!(
            "model is for {} but data is {}",
            model.spec.task, data.task
        )));
    }
    if data.train.is_empty() {
        return Err(ModelError::Config("empty training set".into()));
    }
    let mut adam = Adam::new(&model.params);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut r = rng::substream(cfg.seed, 1, epoch as u64);
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Encoded> = idx.iter().map(|&i| &data.train[i]).collect();
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &batch, true)?;
            let loss = tape.value(fwd.loss).data()[0];
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch, batch: bi, loss });
            }
            loss_sum += loss * batch.len() as f64;
            tape.backward(fwd.loss)?;
            let grads: Vec<Option<Tensor>> = fwd.params.iter().map(|&v| tape.grad(v)).collect();
            match cfg.optimizer {
                Optimizer::Adam => adam.step(&mut model.params, &grads, cfg.lr, cfg.weight_decay),
                Optimizer::Sgd => sgd_step(&mut model.params, &grads, cfg.lr, cfg.weight_decay),
            }
        }
        let test_accuracy = if data.test.is_empty() {
            f64::NAN
        } else {
            evaluate(model, &data.test)?.accuracy
        };
        let row = EpochRow {
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            test_accuracy,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&row);
        log.rows.push(row);
    }
    Ok(log)
}

fn variant_task_line(spec: &ModelSpec) -> String {
    format!(
        "spec variant={} task={} n_layers={} n_heads={} d_model={} vocab_size={} max_len={}",
        spec.variant, spec.task, spec.n_layers, spec.n_heads, spec.d_model, spec.vocab_size, spec.max_len
    )
}

/// Writes a checkpoint: a text header (magic line, spec line, one
/// `tensor <name> <dims...>` line per parameter, `end`), then every
/// parameter's data as little-endian `f64`, in header order.
pub fn save_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let mut header = format!("{CHECKPOINT_MAGIC}\n{}\n", variant_task_line(&model.spec));
    for (name, t) in model.params.names.iter().zip(&model.params.tensors) {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header += &format!("tensor {name} {}\n", dims.join(" "));
    }
    header += "end\n";
    w.write_all(header.as_bytes())?;
    for t in &model.params.tensors {
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn parse_spec_line(line: &str) -> Result<ModelSpec> {
    let bad = |m: String| ModelError::Checkpoint(m);
    let mut parts = line.split(' ');
    if parts.next() != Some("spec") {
        return Err(bad(format!("expected spec line, found `{line}`")));
    }
    let mut kv = std::collections::HashMap::new();
    for p in parts {
        let (k, v) = p.split_once('=').ok_or_else(|| bad(format!("bad spec field `{p}`")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("spec is missing `{k}`")));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
    Ok(ModelSpec {
        variant: get("variant")?.parse().map_err(bad)?,
        task: get("task")?.parse().map_err(bad)?,
        n_layers: num("n_layers")?,
        n_heads: num("n_heads")?,
        d_model: num("d_model")?,
        vocab_size: num("vocab_size")?,
        max_len: num("max_len")?,
    })
}

pub fn load_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let end = bytes
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| ModelError::Checkpoint("header has no `end` line".into()))?;
    let header =
        std::str::from_utf8(&bytes[..end + 1]).map_err(|_| ModelError::Checkpoint("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(ModelError::Checkpoint(format!("expected `{CHECKPOINT_MAGIC}`")));
    }
    let spec = parse_spec_line(lines.next().unwrap_or(""))?;
    let mut model = build_model(&spec, 0)?;
    let mut entries = Vec::new();
    for line in lines {
        let mut f = line.split(' ');
        if f.next() != Some("tensor") {
            return Err(ModelError::Checkpoint(format!("bad header line `{line}`")));
        }
        let name = f
            .next()
            .ok_or_else(|| ModelError::Checkpoint("tensor line without name".into()))?;
        let dims = f
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| ModelError::Checkpoint(format!("bad dims in `{line}`")))?;
        entries.push((name.to_string(), dims));
    }
    if entries.len() != model.params.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} tensors in checkpoint, model has {}",
            entries.len(),
            model.params.len()
        )));
    }
    let mut offset = end + 5;
    for (i, (name, dims)) in entries.iter().enumerate() {
        let t = &mut model.params.tensors[i];
        if *name != model.params.names[i] || dims.as_slice() != t.shape() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {i}: checkpoint has {name} {dims:?}, model expects {} {:?}",
                model.params.names[i],
                t.shape()
            )));
        }
        let need = t.numel() * 8;
        let chunk = bytes
            .get(offset..offset + need)
            .ok_or_else(|| ModelError::Checkpoint(format!("data for {name} is truncated")))?;
        for (x, b) in t.data_mut().iter_mut().zip(chunk.chunks_exact(8)) {
            *x = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
        offset += need;
    }
    if offset != bytes.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - offset
        )));
    }
    Ok(model)
}
