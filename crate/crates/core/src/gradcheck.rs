//! Central finite-difference checks for tape gradients.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of every backward rule it is used to test.

use rand::Rng;

use crate::attention::{
    indirect_attention, AttentionConfig, BiasMlp, BiasMlpVars, IndirectParams, Projections, QueryEmbeddings,
    RelationalState,
};
use crate::rng;
use crate::tensor::{Result, Tape, Tensor, Var};

/// Outcome of a gradient check over all inputs.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest entrywise `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input, flat index)` where the worst entry was found.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Magnitude below which errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// Compares tape gradients of a scalar-valued `f` with central differences.
///
/// `f` receives one `Var` per input, in order, and must return a scalar.
pub fn check_scalar<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        numeric.push(g);
    }

    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let err = (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR);
            if err > max_rel_error {
                max_rel_error = err;
                worst = (i, j);
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}

/// Checks a tensor-valued `f` by contracting its output with fixed random
/// weights, so every output entry contributes a distinct cotangent.
pub fn check_op<F, R>(inputs: &[Tensor], step: f64, rng: &mut R, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Tensor::rand_uniform(tape.shape(out), -1.0, 1.0, rng)
    };
    check_scalar(inputs, step, |tape, vars| {
        let out = f(tape, vars)?;
        let w = tape.constant(probe.clone());
        let weighted = tape.mul(out, w)?;
        Ok(tape.sum(weighted))
    })
}

pub type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

/// One differentiable op with the input shapes it is checked at.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: OpFn,
}

/// Every tape op, each wrapped so its inputs are the differentiated ones.
pub fn op_catalog() -> Vec<OpCase> {
    let cases: Vec<(&'static str, Vec<Vec<usize>>, OpFn)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], |t, v| {
            t.matmul_nt(v[0], v[1])
        }),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 2]], |t, v| t.bmm(v[0], v[1])),
        ("bmm_nt", vec![vec![2, 3, 4], vec![2, 5, 4]], |t, v| {
            t.bmm_nt(v[0], v[1])
        }),
        ("matmul_self", vec![vec![3, 3]], |t, v| t.matmul(v[0], v[0])),
        ("transpose", vec![vec![3, 4]], |t, v| t.transpose(v[0])),
        ("add", vec![vec![2, 3], vec![2, 3]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![vec![2, 3]], |t, v| Ok(t.scale(v[0], -1.7))),
        ("add_row", vec![vec![4, 3], vec![3]], |t, v| t.add_row(v[0], v[1])),
        ("mul_row", vec![vec![4, 3], vec![3]], |t, v| t.mul_row(v[0], v[1])),
        ("relu", vec![vec![3, 5]], |t, v| Ok(t.relu(v[0]))),
        ("softmax_rows", vec![vec![3, 5]], |t, v| t.softmax_rows(v[0])),
        ("layer_norm", vec![vec![3, 6]], |t, v| Ok(t.layer_norm(v[0]))),
        ("embedding_lookup", vec![vec![4, 3]], |t, v| {
            t.embedding_lookup(v[0], &[2, 0, 2, 3])
        }),
        ("cross_entropy", vec![vec![3, 4]], |t, v| {
            t.cross_entropy(v[0], &[Some(3), None, Some(0)])
        }),
        ("sum", vec![vec![2, 3]], |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![vec![2, 3]], |t, v| Ok(t.mean(v[0]))),
        ("reshape", vec![vec![2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        ("split_heads", vec![vec![6, 4]], |t, v| t.split_heads(v[0], 2, 2)),
        ("merge_heads", vec![vec![4, 3, 2]], |t, v| t.merge_heads(v[0], 2, 2)),
        (
            "interleave_heads",
            vec![vec![2, 2, 3], vec![2, 2, 3], vec![2, 2, 3]],
            |t, v| t.interleave_heads(v),
        ),
        ("interleave_heads_shared", vec![vec![1, 2, 3], vec![1, 2, 3]], |t, v| {
            t.interleave_heads_over(v, 3)
        }),
    ];
    cases
        .into_iter()
        .map(|(name, shapes, f)| OpCase { name, shapes, f })
        .collect()
}

/// Loss of two stacked indirect-attention layers, so `W_g` of the first
/// feeds `f` of the second. `v` is laid out as [`indirect_stack_inputs`]
/// returns it.
pub fn indirect_stack_loss(tape: &mut Tape, v: &[Var], heads: usize, n: usize, d: usize) -> Result<Var> {
    let cfg = AttentionConfig::new(d, heads, n, n)?;
    let (x, y, m) = (v[0], v[1], v[2]);
    let mut idx = 3;
    let mut state = RelationalState::initial(tape, n, n);
    let mut values = y;
    for _ in 0..2 {
        let proj = Projections {
            w_q: v[idx],
            w_k: v[idx + 1],
            w_v: v[idx + 2],
            w_o: Some(v[idx + 3]),
        };
        idx += 4;
        let bias = (0..heads)
            .map(|h| BiasMlpVars {
                w1: v[idx + 3 * h],
                b1: v[idx + 3 * h + 1],
                w2: v[idx + 3 * h + 2],
            })
            .collect();
        idx += 3 * heads;
        let params = IndirectParams {
            bias,
            offset_map: v[idx],
        };
        idx += 1;
        let emb = QueryEmbeddings::identity(m, n);
        let out = indirect_attention(tape, x, values, &emb, &state, &params, &proj, &cfg, 1)?;
        state = out.state;
        values = out.output;
    }
    let sq = tape.mul(values, values)?;
    let a = tape.sum(sq);
    let p = tape.mean(state.offsets);
    tape.add(a, p)
}

/// Keys, values, query embeddings, then per layer `W_q, W_k, W_v, W_o`,
/// each head's `f` (`w1, b1, w2`) and `W_g`.
pub fn indirect_stack_inputs(seed: u64, heads: usize, n: usize, d: usize) -> Vec<Tensor> {
    let mut r = rng::stream(seed, 77);
    let mut inputs: Vec<Tensor> = (0..3)
        .map(|_| Tensor::rand_uniform(&[n, d], -1.0, 1.0, &mut r))
        .collect();
    for _ in 0..2 {
        for _ in 0..4 {
            inputs.push(Tensor::rand_uniform(&[d, d], -0.8, 0.8, &mut r));
        }
        for _ in 0..heads {
            let f = BiasMlp::random(3, &mut r);
            // positive hidden biases keep units alive near p = 0, so a zero
            // gradient means broken wiring rather than a dead ReLU layer
            inputs.extend([f.w1, Tensor::rand_uniform(&[3], 0.2, 0.8, &mut r), f.w2]);
        }
        inputs.push(Tensor::rand_uniform(&[d, n], -0.5, 0.5, &mut r));
    }
    inputs
}
