use super::{gemm, Result, Tensor, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Transpose {
        a: usize,
        r: usize,
        c: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow {
        a: usize,
        row: usize,
    },
    MulRow {
        a: usize,
        row: usize,
    },
    Relu(usize),
    Softmax(usize),
    LayerNorm {
        a: usize,
        rstd: Vec<f64>,
    },
    Gather {
        table: usize,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        probs: Vec<f64>,
        labels: Vec<Option<usize>>,
        count: usize,
    },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    SplitHeads {
        a: usize,
        batch: usize,
        len: usize,
        heads: usize,
    },
    MergeHeads {
        a: usize,
        batch: usize,
        len: usize,
        heads: usize,
    },
    InterleaveHeads {
        parts: Vec<usize>,
        batch: usize,
        shared: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation record. Nodes are appended in evaluation order, so
/// every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0)?.as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Clears gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn matmul_impl(&mut self, op: &'static str, a: Var, b: Var, batched: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rank = if batched { 3 } else { 2 };
        for s in [&sa, &sb] {
            if s.len() != rank {
                return Err(TensorError::Rank {
                    op,
                    expected: rank,
                    shape: s.clone(),
                });
            }
        }
        let (batch, m, k) = if batched {
            (sa[0], sa[1], sa[2])
        } else {
            (1, sa[0], sa[1])
        };
        let (batch_b, kb, n) = match (batched, trans_b) {
            (true, false) => (sb[0], sb[1], sb[2]),
            (true, true) => (sb[0], sb[2], sb[1]),
            (false, false) => (1, sb[0], sb[1]),
            (false, true) => (1, sb[1], sb[0]),
        };
        if k != kb || batch != batch_b {
            return Err(self.shape_err(op, a, b));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let shape = if batched { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// `[r, k] x [k, c] -> [r, c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl("matmul", a, b, false, false)
    }

    /// `[r, k] x [c, k]^T -> [r, c]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl("matmul_nt", a, b, false, true)
    }

    /// Batched `[B, r, k] x [B, k, c] -> [B, r, c]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl("bmm", a, b, true, false)
    }

    /// Batched `[B, r, k] x [B, c, k]^T -> [B, r, c]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl("bmm_nt", a, b, true, true)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let (c, r) = value.as_matrix("transpose")?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Transpose { a: a.0, r, c }, rg))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor {
            shape: va.shape.clone(),
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::Sub(a.0, b.0), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data().iter().map(|x| x * s).collect(),
        };
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Scale(a.0, s), rg)
    }

    fn row_broadcast(&mut self, op: &'static str, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.numel() != va.cols() {
            return Err(self.shape_err(op, a, row));
        }
        let c = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vr.data()[i % c]))
            .collect();
        Ok(Tensor {
            shape: va.shape.clone(),
            data,
        })
    }

    /// Adds a vector of length `cols` to every row (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast("add_row", a, row, |x, r| x + r)?;
        let rg = self.rg(&[a.0, row.0]);
        Ok(self.push(value, Op::AddRow { a: a.0, row: row.0 }, rg))
    }

    /// Multiplies every row elementwise by a vector of length `cols`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast("mul_row", a, row, |x, r| x * r)?;
        let rg = self.rg(&[a.0, row.0]);
        Ok(self.push(value, Op::MulRow { a: a.0, row: row.0 }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data().iter().map(|&x| x.max(0.0)).collect(),
        };
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Relu(a.0), rg)
    }

    /// Softmax over the last axis, stabilised by subtracting each row's max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        va.check_finite("softmax_rows")?;
        let c = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Softmax(a.0), rg))
    }

    /// Normalises each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut data = va.data().to_vec();
        let mut rstd = Vec::with_capacity(va.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.rg(&[a.0]);
        self.push(value, Op::LayerNorm { a: a.0, rstd }, rg)
    }

    /// Row gather: `out[i] = table[indices[i]]`. Serves as embedding lookup.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (rows, c) = vt.as_matrix("embedding_lookup")?;
        if indices.is_empty() {
            return Err(TensorError::Invalid("embedding_lookup: no indices".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "embedding_lookup",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(vt.row(i));
        }
        let value = Tensor {
            shape: vec![indices.len(), c],
            data,
        };
        let rg = self.rg(&[table.0]);
        Ok(self.push(
            value,
            Op::Gather {
                table: table.0,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood over rows of `[N, C]` logits. Rows whose
    /// label is `None` are excluded from both the sum and the count.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let vl = self.value(logits);
        let (n, c) = vl.as_matrix("cross_entropy")?;
        if labels.len() != n {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: vl.shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        vl.check_finite("cross_entropy")?;
        let mut probs = vl.data().to_vec();
        let mut loss = 0.0;
        let mut count = 0;
        for (row, label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
            if let Some(l) = *label {
                if l >= c {
                    return Err(TensorError::Index {
                        op: "cross_entropy",
                        index: l,
                        len: c,
                    });
                }
                loss -= row[l].max(f64::MIN_POSITIVE).ln();
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::Invalid("cross_entropy: every label is masked".into()));
        }
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss / count as f64),
            Op::CrossEntropy {
                logits: logits.0,
                probs,
                labels: labels.to_vec(),
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.sum() / va.numel() as f64;
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Mean(a.0), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Reshape(a.0), rg))
    }

    /// `[B*len, H*dh] -> [B*H, len, dh]`, head-major within each batch item.
    pub fn split_heads(&mut self, a: Var, batch: usize, heads: usize) -> Result<Var> {
        let va = self.value(a);
        let (rows, d) = va.as_matrix("split_heads")?;
        if heads == 0 || d % heads != 0 || batch == 0 || rows % batch != 0 {
            return Err(TensorError::Invalid(format!(
                "split_heads: shape {:?} does not split into batch {batch} x heads {heads}",
                va.shape
            )));
        }
        let len = rows / batch;
        let mut data = vec![0.0; va.numel()];
        permute_heads(va.data(), &mut data, batch, len, heads, d / heads, true);
        let value = Tensor {
            shape: vec![batch * heads, len, d / heads],
            data,
        };
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            value,
            Op::SplitHeads {
                a: a.0,
                batch,
                len,
                heads,
            },
            rg,
        ))
    }

    /// Inverse of [`Tape::split_heads`]: `[B*H, len, dh] -> [B*len, H*dh]`.
    pub fn merge_heads(&mut self, a: Var, batch: usize, heads: usize) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape.clone();
        if shape.len() != 3 || batch == 0 || heads == 0 || shape[0] != batch * heads {
            return Err(TensorError::Invalid(format!(
                "merge_heads: shape {shape:?} is not [batch {batch} * heads {heads}, len, dh]"
            )));
        }
        let (len, dh) = (shape[1], shape[2]);
        let mut data = vec![0.0; va.numel()];
        permute_heads(va.data(), &mut data, batch, len, heads, dh, false);
        let value = Tensor {
            shape: vec![batch * len, heads * dh],
            data,
        };
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            value,
            Op::MergeHeads {
                a: a.0,
                batch,
                len,
                heads,
            },
            rg,
        ))
    }

    /// Stacks `H` tensors of shape `[B, r, c]` into `[B*H, r, c]` with index
    /// `b*H + h`, matching the layout of [`Tape::split_heads`].
    pub fn interleave_heads(&mut self, parts: &[Var]) -> Result<Var> {
        let batch = parts.first().map_or(0, |&p| self.shape(p)[0]);
        self.interleave_heads_over(parts, batch)
    }

    /// As [`Tape::interleave_heads`], but parts with a leading axis of 1 are
    /// shared by all `batch` items.
    pub fn interleave_heads_over(&mut self, parts: &[Var], batch: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("interleave_heads: no parts".into()))?;
        let shape = self.shape(first).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::Rank {
                op: "interleave_heads",
                expected: 3,
                shape,
            });
        }
        for &p in parts {
            self.same_shape("interleave_heads", first, p)?;
        }
        let shared = shape[0] == 1 && batch != 1;
        if !shared && shape[0] != batch {
            return Err(TensorError::Invalid(format!(
                "interleave_heads: leading axis {} for batch {batch}",
                shape[0]
            )));
        }
        let block = shape[1] * shape[2];
        let heads = parts.len();
        let mut data = vec![0.0; batch * heads * block];
        for (h, &p) in parts.iter().enumerate() {
            let src = self.value(p).data();
            for b in 0..batch {
                let dst = (b * heads + h) * block;
                let sb = if shared { 0 } else { b };
                data[dst..dst + block].copy_from_slice(&src[sb * block..(sb + 1) * block]);
            }
        }
        let value = Tensor {
            shape: vec![batch * heads, shape[1], shape[2]],
            data,
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(
            value,
            Op::InterleaveHeads {
                parts: ids,
                batch,
                shared,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, id: usize) -> Option<&mut Vec<f64>> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let len = self.nodes[id].value.shape.iter().product();
        Some(self.grads[id].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&mut self, id: usize, g: &[f64]) {
        // Ops are detached from the node while their inputs' grads are written.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                if self.nodes[a].requires_grad {
                    let bv = std::mem::take(&mut self.nodes[b].value.data);
                    let ga = self.acc(a).unwrap();
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        // trans_b: b is stored n x k, so dA = G B; else dA = G B^T.
                        gemm(m, n, k, gi, false, bi, !trans_b, out, true);
                    }
                    self.nodes[b].value.data = bv;
                }
                if self.nodes[b].requires_grad {
                    let av = std::mem::take(&mut self.nodes[a].value.data);
                    let gb = self.acc(b).unwrap();
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, gi, true, ai, false, out, true);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, out, true);
                        }
                    }
                    self.nodes[a].value.data = av;
                }
            }
            &Op::Transpose { a, r, c } => {
                if let Some(ga) = self.acc(a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for x in [a, b] {
                    if let Some(gx) = self.acc(x) {
                        gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = self.acc(b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            &Op::Mul(a, b) => {
                let bv = self.nodes[b].value.data.clone();
                if let Some(ga) = self.acc(a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(&bv) {
                        *d += s * y;
                    }
                }
                let av = self.nodes[a].value.data.clone();
                if let Some(gb) = self.acc(b) {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(&av) {
                        *d += s * x;
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
                }
            }
            &Op::AddRow { a, row } => {
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gr) = self.acc(row) {
                    let c = gr.len();
                    for (i, s) in g.iter().enumerate() {
                        gr[i % c] += s;
                    }
                }
            }
            &Op::MulRow { a, row } => {
                let rv = self.nodes[row].value.data.clone();
                let c = rv.len();
                if let Some(ga) = self.acc(a) {
                    for (i, (d, s)) in ga.iter_mut().zip(g).enumerate() {
                        *d += s * rv[i % c];
                    }
                }
                if self.nodes[row].requires_grad {
                    let av = std::mem::take(&mut self.nodes[a].value.data);
                    let gr = self.acc(row).unwrap();
                    for (i, (s, x)) in g.iter().zip(&av).enumerate() {
                        gr[i % c] += s * x;
                    }
                    self.nodes[a].value.data = av;
                }
            }
            &Op::Relu(a) => {
                let av = std::mem::take(&mut self.nodes[a].value.data);
                if let Some(ga) = self.acc(a) {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(&av) {
                        if *x > 0.0 {
                            *d += s;
                        }
                    }
                }
                self.nodes[a].value.data = av;
            }
            &Op::Softmax(a) => {
                let y = std::mem::take(&mut self.nodes[id].value.data);
                let c = self.nodes[id].value.cols();
                if let Some(ga) = self.acc(a) {
                    for ((drow, grow), yrow) in ga.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(s, p)| s * p).sum();
                        for ((d, s), p) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += p * (s - dot);
                        }
                    }
                }
                self.nodes[id].value.data = y;
            }
            Op::LayerNorm { a, rstd } => {
                let a = *a;
                let xhat = std::mem::take(&mut self.nodes[id].value.data);
                let c = self.nodes[id].value.cols();
                if let Some(ga) = self.acc(a) {
                    for (((drow, grow), xrow), r) in ga.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).zip(rstd) {
                        let mg = grow.iter().sum::<f64>() / c as f64;
                        let mgx = grow.iter().zip(xrow).map(|(s, x)| s * x).sum::<f64>() / c as f64;
                        for ((d, s), x) in drow.iter_mut().zip(grow).zip(xrow) {
                            *d += r * (s - mg - x * mgx);
                        }
                    }
                }
                self.nodes[id].value.data = xhat;
            }
            Op::Gather { table, indices } => {
                let table = *table;
                if let Some(gt) = self.acc(table) {
                    let c = g.len() / indices.len();
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            gt[i * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                count,
            } => {
                let scale = g[0] / *count as f64;
                if let Some(gl) = self.acc(*logits) {
                    let c = probs.len() / labels.len();
                    for (r, label) in labels.iter().enumerate() {
                        let Some(l) = *label else { continue };
                        for j in 0..c {
                            let t = if j == l { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - t);
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(a) => {
                if let Some(ga) = self.acc(a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            &Op::SplitHeads { a, batch, len, heads } => {
                let dh = self.nodes[id].value.cols();
                if let Some(ga) = self.acc(a) {
                    let mut tmp = vec![0.0; g.len()];
                    permute_heads(g, &mut tmp, batch, len, heads, dh, false);
                    ga.iter_mut().zip(&tmp).for_each(|(d, s)| *d += s);
                }
            }
            &Op::MergeHeads { a, batch, len, heads } => {
                let dh = self.nodes[id].value.cols() / heads;
                if let Some(ga) = self.acc(a) {
                    let mut tmp = vec![0.0; g.len()];
                    permute_heads(g, &mut tmp, batch, len, heads, dh, true);
                    ga.iter_mut().zip(&tmp).for_each(|(d, s)| *d += s);
                }
            }
            Op::InterleaveHeads { parts, batch, shared } => {
                let heads = parts.len();
                let block = g.len() / (batch * heads);
                for (h, &p) in parts.iter().enumerate() {
                    if let Some(gp) = self.acc(p) {
                        for b in 0..*batch {
                            let src = (b * heads + h) * block;
                            let sb = if *shared { 0 } else { b };
                            for (d, s) in gp[sb * block..(sb + 1) * block].iter_mut().zip(&g[src..src + block]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
        self.nodes[id].op = op;
    }
}

/// Moves between `[B*len, H*dh]` (merged) and `[B*H, len, dh]` (split).
fn permute_heads(src: &[f64], dst: &mut [f64], batch: usize, len: usize, heads: usize, dh: usize, split: bool) {
    let d = heads * dh;
    for b in 0..batch {
        for t in 0..len {
            for h in 0..heads {
                let merged = (b * len + t) * d + h * dh;
                let split_at = ((b * heads + h) * len + t) * dh;
                let (from, to) = if split { (merged, split_at) } else { (split_at, merged) };
                dst[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
}
