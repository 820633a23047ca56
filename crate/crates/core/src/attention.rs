//! Standard, cross, naive-misaligned and indirect attention on a [`Tape`].
//!
//! Every variant works on a batch of `B` independent items whose token
//! matrices are stacked row-wise: a sequence input has shape `[B*len, d]`.
//! Attention weights come back as `[B*H, m, n]`, item-major then head.
//!
//! Multi-head attention splits the columns of each `d x d` projection into
//! `H` contiguous blocks of width `d_k = d / H`; head `h` uses block `h` of
//! `W_q`, `W_k` and `W_v`. The concatenated head outputs go through `W_o`
//! when one is supplied.
//!
//! Indirect attention scores query `i` against key `j` as
//! `(q_i . k_j + f(P_ij)) / sqrt(d_k)`, where `f` is a scalar-to-scalar MLP
//! with one ReLU hidden layer applied to every entry of the relational matrix
//! `P`. At layer 0, `P_ij = j - i` (scaled by `1/n` before it enters `f`); the
//! next layer's `P` is a learned linear map of the attention output,
//! `P_i = o_i W_g`.

use rand::Rng;

use crate::init::{self, InitMode};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Hidden width of the positional bias MLP.
pub const BIAS_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Length of the key/value sequences (`n`).
    pub n_keys: usize,
    /// Number of queries (`m <= n`).
    pub n_queries: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize, n_keys: usize, n_queries: usize) -> Result<Self> {
        let cfg = Self {
            d_model,
            n_heads,
            n_keys,
            n_queries,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_keys == 0 || self.n_queries == 0 {
            return Err(TensorError::Invalid(format!(
                "attention config has a zero size: {self:?}"
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(TensorError::Invalid(format!(
                "{} heads do not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.n_queries > self.n_keys {
            return Err(TensorError::Invalid(format!(
                "n_queries {} exceeds n_keys {}",
                self.n_queries, self.n_keys
            )));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Projection matrices as plain tensors.
#[derive(Clone, Debug)]
pub struct ProjectionSet {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Option<Tensor>,
    pub init_mode: InitMode,
}

impl ProjectionSet {
    pub fn random<R: Rng + ?Sized>(d: usize, mode: InitMode, with_output: bool, rng: &mut R) -> Self {
        Self {
            w_q: init::square(d, mode, rng),
            w_k: init::square(d, mode, rng),
            w_v: init::square(d, mode, rng),
            w_o: with_output.then(|| init::square(d, mode, rng)),
            init_mode: mode,
        }
    }

    pub fn on_tape(&self, tape: &mut Tape, requires_grad: bool) -> Projections {
        Projections {
            w_q: tape.leaf(self.w_q.clone(), requires_grad),
            w_k: tape.leaf(self.w_k.clone(), requires_grad),
            w_v: tape.leaf(self.w_v.clone(), requires_grad),
            w_o: self.w_o.as_ref().map(|w| tape.leaf(w.clone(), requires_grad)),
        }
    }
}

/// Projection matrices registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Option<Var>,
}

/// Parameters of the positional bias `f: R -> R`, `f(p) = w2 . relu(w1 p + b1)`.
///
/// There is no output bias: a constant added to every logit of a row cancels
/// in the softmax and would never receive a gradient.
#[derive(Clone, Debug)]
pub struct BiasMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
}

impl BiasMlp {
    pub fn random<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: Tensor::randn(&[1, hidden], 1.0, rng),
            b1: Tensor::randn(&[hidden], 0.5, rng),
            w2: Tensor::randn(&[hidden, 1], 1.0 / (hidden as f64).sqrt(), rng),
        }
    }

    /// `f == 0` everywhere.
    pub fn zero(hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[1, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, 1]),
        }
    }

    /// Scalar reference evaluation.
    pub fn eval(&self, p: f64) -> f64 {
        let h = self.w1.numel();
        let mut out = 0.0;
        for k in 0..h {
            let z = self.w1.data()[k] * p + self.b1.data()[k];
            out += self.w2.data()[k] * z.max(0.0);
        }
        out
    }

    pub fn on_tape(&self, tape: &mut Tape, requires_grad: bool) -> BiasMlpVars {
        BiasMlpVars {
            w1: tape.leaf(self.w1.clone(), requires_grad),
            b1: tape.leaf(self.b1.clone(), requires_grad),
            w2: tape.leaf(self.w2.clone(), requires_grad),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BiasMlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
}

impl BiasMlpVars {
    /// Applies `f` entrywise to a tensor of any shape.
    pub fn apply(&self, tape: &mut Tape, p: Var) -> Result<Var> {
        let shape = tape.shape(p).to_vec();
        let numel = shape.iter().product();
        let col = tape.reshape(p, &[numel, 1])?;
        let h = tape.matmul(col, self.w1)?;
        let h = tape.add_row(h, self.b1)?;
        let h = tape.relu(h);
        let out = tape.matmul(h, self.w2)?;
        tape.reshape(out, &shape)
    }
}

/// Learnable query embeddings `M` (`[m, d]`) and the value positions they
/// are paired with, `q_i = M_i + y_{pi(i)}`.
#[derive(Clone, Debug)]
pub struct QueryEmbeddings {
    pub m: Var,
    pub pi: Vec<usize>,
}

impl QueryEmbeddings {
    /// `pi = identity` over `m` queries.
    pub fn identity(m: Var, n_queries: usize) -> Self {
        Self {
            m,
            pi: (0..n_queries).collect(),
        }
    }
}

/// Relational matrix carried between indirect-attention layers.
#[derive(Clone, Copy, Debug)]
pub struct RelationalState {
    /// `[B, m, n]`, or `[1, m, n]` shared by the batch (raw offsets `j - i`
    /// at layer 0).
    pub offsets: Var,
    pub layer_index: usize,
}

impl RelationalState {
    pub fn initial(tape: &mut Tape, n_queries: usize, n_keys: usize) -> Self {
        Self {
            offsets: tape.constant(initial_offsets(n_queries, n_keys)),
            layer_index: 0,
        }
    }
}

/// `P_ij = j - i` as a `[1, m, n]` tensor.
pub fn initial_offsets(n_queries: usize, n_keys: usize) -> Tensor {
    let data = (0..n_queries)
        .flat_map(|i| (0..n_keys).map(move |j| j as f64 - i as f64))
        .collect();
    Tensor::new(&[1, n_queries, n_keys], data).expect("non-empty offsets")
}

/// Per-layer parameters of indirect attention: one bias MLP per head and the
/// offset map `W_g: [d, n]`.
#[derive(Clone, Debug)]
pub struct IndirectParams {
    pub bias: Vec<BiasMlpVars>,
    pub offset_map: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[B*m, d]`.
    pub output: Var,
    /// `[B*H, m, n]`.
    pub weights: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct IndirectOutput {
    pub output: Var,
    pub weights: Var,
    pub state: RelationalState,
}

fn check_seq(tape: &Tape, what: &str, x: Var, batch: usize, len: usize, d: usize) -> Result<()> {
    let s = tape.shape(x);
    if s != [batch * len, d] {
        return Err(TensorError::Invalid(format!(
            "{what}: expected [{} x {d}] (batch {batch} x len {len}), got {s:?}",
            batch * len
        )));
    }
    Ok(())
}

fn rows_of(tape: &Tape, x: Var) -> usize {
    tape.shape(x)[0]
}

struct HeadProjections {
    q: Var,
    k: Var,
    v: Var,
}

fn project_heads(
    tape: &mut Tape,
    q_src: Var,
    k_src: Var,
    v_src: Var,
    proj: &Projections,
    heads: usize,
    batch: usize,
) -> Result<HeadProjections> {
    let d = tape.shape(q_src)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(TensorError::Invalid(format!("{heads} heads do not divide d_model {d}")));
    }
    let q = tape.matmul(q_src, proj.w_q)?;
    let k = tape.matmul(k_src, proj.w_k)?;
    let v = tape.matmul(v_src, proj.w_v)?;
    Ok(HeadProjections {
        q: tape.split_heads(q, batch, heads)?,
        k: tape.split_heads(k, batch, heads)?,
        v: tape.split_heads(v, batch, heads)?,
    })
}

/// Softmax over keys, weighted sum of values, head merge and `W_o`.
fn mix_values(
    tape: &mut Tape,
    scores: Var,
    v: Var,
    proj: &Projections,
    heads: usize,
    batch: usize,
) -> Result<AttentionOutput> {
    let weights = tape.softmax_rows(scores)?;
    let mixed = tape.bmm(weights, v)?;
    let mut output = tape.merge_heads(mixed, batch, heads)?;
    if let Some(w_o) = proj.w_o {
        output = tape.matmul(output, w_o)?;
    }
    Ok(AttentionOutput { output, weights })
}

/// Unbiased scaled dot-product attention.
fn attend(
    tape: &mut Tape,
    q_src: Var,
    k_src: Var,
    v_src: Var,
    proj: &Projections,
    heads: usize,
    batch: usize,
) -> Result<AttentionOutput> {
    let hp = project_heads(tape, q_src, k_src, v_src, proj, heads, batch)?;
    let d_k = tape.shape(hp.q)[2];
    let dots = tape.bmm_nt(hp.q, hp.k)?;
    let scores = tape.scale(dots, 1.0 / (d_k as f64).sqrt());
    mix_values(tape, scores, hp.v, proj, heads, batch)
}

/// Self-attention: queries, keys and values all come from `x`.
pub fn standard_attention(
    tape: &mut Tape,
    x: Var,
    proj: &Projections,
    heads: usize,
    batch: usize,
) -> Result<AttentionOutput> {
    attend(tape, x, x, x, proj, heads, batch)
}

/// Queries from one sequence, keys and values from another.
pub fn cross_attention(
    tape: &mut Tape,
    queries_from: Var,
    kv_from: Var,
    proj: &Projections,
    heads: usize,
    batch: usize,
) -> Result<AttentionOutput> {
    let d = tape.shape(queries_from)[1];
    if tape.shape(kv_from)[1] != d || !rows_of(tape, kv_from).is_multiple_of(batch) || !rows_of(tape, queries_from).is_multiple_of(batch) {
        return Err(TensorError::Shape {
            op: "cross_attention",
            lhs: tape.shape(queries_from).to_vec(),
            rhs: tape.shape(kv_from).to_vec(),
        });
    }
    attend(tape, queries_from, kv_from, kv_from, proj, heads, batch)
}

/// Plain scaled dot-product attention with keys and values taken from
/// different sequences and no positional correction.
pub fn naive_misaligned_attention(
    tape: &mut Tape,
    x_keys: Var,
    y_values: Var,
    queries: Var,
    proj: &Projections,
    heads: usize,
    batch: usize,
) -> Result<AttentionOutput> {
    if tape.shape(x_keys) != tape.shape(y_values) {
        return Err(TensorError::Shape {
            op: "naive_misaligned_attention",
            lhs: tape.shape(x_keys).to_vec(),
            rhs: tape.shape(y_values).to_vec(),
        });
    }
    attend(tape, queries, x_keys, y_values, proj, heads, batch)
}

/// `q_i = M_i + y_{pi(i)}` for every batch item. `y` is `[B*n, d]`.
pub fn build_queries(tape: &mut Tape, emb: &QueryEmbeddings, y: Var, batch: usize) -> Result<Var> {
    let n = rows_of(tape, y) / batch.max(1);
    let (m, d) = tape.value(emb.m).as_matrix("build_queries")?;
    if emb.pi.len() != m {
        return Err(TensorError::Invalid(format!(
            "build_queries: {} query embeddings but pi has {} entries",
            m,
            emb.pi.len()
        )));
    }
    check_seq(tape, "build_queries", y, batch, n, d)?;
    if let Some(&bad) = emb.pi.iter().find(|&&p| p >= n) {
        return Err(TensorError::Index {
            op: "build_queries",
            index: bad,
            len: n,
        });
    }
    let rows: Vec<usize> = (0..batch)
        .flat_map(|b| emb.pi.iter().map(move |&p| b * n + p))
        .collect();
    let picked = tape.embedding_lookup(y, &rows)?;
    let tiled: Vec<usize> = (0..batch).flat_map(|_| 0..m).collect();
    let m_tiled = tape.embedding_lookup(emb.m, &tiled)?;
    tape.add(picked, m_tiled)
}

/// Positional bias for every head, `[B*H, m, n]`, from the state's offsets.
pub fn positional_bias(tape: &mut Tape, state: &RelationalState, bias: &[BiasMlpVars], batch: usize) -> Result<Var> {
    let shape = tape.shape(state.offsets).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::Rank {
            op: "positional_bias",
            expected: 3,
            shape,
        });
    }
    let p = if state.layer_index == 0 {
        tape.scale(state.offsets, 1.0 / shape[2] as f64)
    } else {
        state.offsets
    };
    let per_head = bias.iter().map(|f| f.apply(tape, p)).collect::<Result<Vec<_>>>()?;
    tape.interleave_heads_over(&per_head, batch)
}

/// Biased scores `(q_i . k_j + f_h(P_ij)) / sqrt(d_k)` for head-split `q`
/// (`[B*H, m, d_k]`) and `k` (`[B*H, n, d_k]`).
pub fn indirect_scores(tape: &mut Tape, q: Var, k: Var, state: &RelationalState, bias: &[BiasMlpVars]) -> Result<Var> {
    let d_k = tape.shape(q)[2];
    let dots = tape.bmm_nt(q, k)?;
    let batch = tape.shape(q)[0] / bias.len().max(1);
    let b = positional_bias(tape, state, bias, batch)?;
    let s = tape.add(dots, b)?;
    Ok(tape.scale(s, 1.0 / (d_k as f64).sqrt()))
}

/// `P^{l+1}_i = o_i W_g`. `output` is `[B*m, d]`, `offset_map` is `[d, n]`.
pub fn update_offsets(
    tape: &mut Tape,
    output: Var,
    state: &RelationalState,
    offset_map: Var,
) -> Result<RelationalState> {
    let shape = tape.shape(state.offsets).to_vec();
    let p = tape.matmul(output, offset_map)?;
    let batch = tape.shape(p)[0] / shape[1].max(1);
    let offsets = tape.reshape(p, &[batch, shape[1], shape[2]])?;
    Ok(RelationalState {
        offsets,
        layer_index: state.layer_index + 1,
    })
}

/// One indirect-attention layer. Keys come from `x_keys`, values from
/// `y_values`, queries from `emb` enriched with value features; the returned
/// state holds the updated relational matrix for the next layer.
#[allow(clippy::too_many_arguments)]
pub fn indirect_attention(
    tape: &mut Tape,
    x_keys: Var,
    y_values: Var,
    emb: &QueryEmbeddings,
    state: &RelationalState,
    params: &IndirectParams,
    proj: &Projections,
    cfg: &AttentionConfig,
    batch: usize,
) -> Result<IndirectOutput> {
    cfg.validate()?;
    let (d, n, m, heads) = (cfg.d_model, cfg.n_keys, cfg.n_queries, cfg.n_heads);
    check_seq(tape, "indirect_attention keys", x_keys, batch, n, d)?;
    check_seq(tape, "indirect_attention values", y_values, batch, n, d)?;
    if params.bias.len() != heads {
        return Err(TensorError::Invalid(format!(
            "indirect_attention: {} bias functions for {heads} heads",
            params.bias.len()
        )));
    }
    let os = tape.shape(state.offsets);
    if os[1..] != [m, n] || (os[0] != batch && os[0] != 1) {
        return Err(TensorError::Shape {
            op: "indirect_attention offsets",
            lhs: tape.shape(state.offsets).to_vec(),
            rhs: vec![batch, m, n],
        });
    }
    let queries = build_queries(tape, emb, y_values, batch)?;
    let hp = project_heads(tape, queries, x_keys, y_values, proj, heads, batch)?;
    let scores = indirect_scores(tape, hp.q, hp.k, state, &params.bias)?;
    let out = mix_values(tape, scores, hp.v, proj, heads, batch)?;
    let state = update_offsets(tape, out.output, state, params.offset_map)?;
    Ok(IndirectOutput {
        output: out.output,
        weights: out.weights,
        state,
    })
}
