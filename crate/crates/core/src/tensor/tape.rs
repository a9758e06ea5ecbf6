use rand::Rng;

use super::ops::{self, matmul_nn, matmul_nt, matmul_tn};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Sum(Var),
    /// Loss nodes keep d(loss)/d(input) from the forward pass.
    Loss {
        input: Var,
        grad: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Wengert list of primitive operations. Nodes are appended in evaluation
/// order, so inputs always precede their outputs.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(Error::IndexOutOfRange {
            what: "tape variable",
            index: v.0,
            len: self.nodes.len(),
        })
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.node(v)?.value;
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose(a), &[a])
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix(a, "add_bias")?;
        let bshape = self.node(bias)?.value.shape().to_vec();
        if bshape != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: vec![m, n],
                rhs: bshape,
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % n])
            .collect();
        self.push(
            "add_bias",
            Tensor::new(vec![m, n], data)?,
            Op::AddBias(a, bias),
            &[a, bias],
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::lit(factor);
        let t = self.map(a, |x| x * f)?;
        self.push("scale", t, Op::Scale(a, f), &[a])
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        let va = &self.node(a)?.value;
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, ops::gelu_scalar)?;
        self.push("gelu", t, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| x.tanh())?;
        self.push("tanh", t, Op::Tanh(a), &[a])
    }

    /// Row-wise layer normalization of a `[m, n]` matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.matrix(x, "layer_norm")?;
        for p in [gamma, beta] {
            let s = self.node(p)?.value.shape();
            if s != [n] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![m, n],
                    rhs: s.to_vec(),
                });
            }
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let eps = T::lit(eps);
        let mut out = vec![T::zero(); m * n];
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = Vec::with_capacity(m);
        {
            let xs = self.value(x).data();
            let g = self.value(gamma).data();
            let b = self.value(beta).data();
            for r in 0..m {
                let span = r * n..(r + 1) * n;
                rstd.push(ops::normalize_row(
                    &xs[span.clone()],
                    g,
                    b,
                    eps,
                    &mut out[span.clone()],
                    Some(&mut xhat[span]),
                ));
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push("layer_norm", Tensor::new(vec![m, n], out)?, op, &[x, gamma, beta])
    }

    /// Selects rows of a `[rows, n]` table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let (rows, n) = self.matrix(table, "gather_rows")?;
        if index.is_empty() {
            return Err(Error::invalid("gather_rows with no indices"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let op = Op::GatherRows {
            table,
            index: index.to_vec(),
        };
        self.push("gather_rows", Tensor::new(vec![index.len(), n], out)?, op, &[table])
    }

    /// Multi-head attention; see [`ops::attention_forward`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_mask: &[bool], heads: usize) -> Result<Var> {
        let (n, hidden) = self.matrix(q, "attention")?;
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let (out, probs) = ops::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            n,
            hidden,
            heads,
            key_mask,
        )?;
        let op = Op::Attention { q, k, v, heads, probs };
        self.push("attention", Tensor::new(vec![n, hidden], out)?, op, &[q, k, v])
    }

    /// Inverted dropout: kept values are scaled by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let numel = self.node(x)?.value.numel();
        let mask: Vec<T> = (0..numel)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("dropout", t, Op::Dropout { x, mask }, &[x])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.node(a)?.value.data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Mean softmax cross-entropy over rows whose target is not `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64], ignore_index: i64) -> Result<Var> {
        let (loss, grad, counted) = ops::softmax_cross_entropy(&self.node(logits)?.value, targets, ignore_index)?;
        let inv = T::one() / T::lit(counted as f64);
        let grad = grad.into_data().into_iter().map(|g| g * inv).collect();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::Loss { input: logits, grad },
            &[logits],
        )
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let z = &self.node(logits)?.value;
        if z.numel() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: z.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let count = T::lit(targets.len() as f64);
        let mut total = T::zero();
        let mut grad = Vec::with_capacity(targets.len());
        for (&x, &y) in z.data().iter().zip(targets) {
            total = total + x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln();
            let s = T::one() / (T::one() + (-x).exp());
            grad.push((s - y) / count);
        }
        self.push(
            "bce_with_logits",
            Tensor::scalar(total / count),
            Op::Loss { input: logits, grad },
            &[logits],
        )
    }

    /// Mean squared error against fixed targets.
    pub fn mse(&mut self, pred: Var, targets: &[T]) -> Result<Var> {
        let p = &self.node(pred)?.value;
        if p.numel() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: p.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let count = T::lit(targets.len() as f64);
        let mut total = T::zero();
        let mut grad = Vec::with_capacity(targets.len());
        for (&x, &y) in p.data().iter().zip(targets) {
            total = total + (x - y) * (x - y);
            grad.push(T::lit(2.0) * (x - y) / count);
        }
        self.push(
            "mse",
            Tensor::scalar(total / count),
            Op::Loss { input: pred, grad },
            &[pred],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &node.op, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| {
                    g.filter(|_| n.requires_grad)
                        .map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("gradient shape"))
                })
                .collect(),
        })
    }

    fn propagate(&self, idx: usize, op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let mut acc = |v: Var, delta: Vec<T>| -> Result<()> {
            if v.0 >= idx {
                return Err(Error::invalid("tape is not topologically ordered (cycle)"));
            }
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e = *e + d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };

        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.matrix(*a, "matmul")?;
                let (_, n) = self.matrix(*b, "matmul")?;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.nodes[a.0].requires_grad {
                    acc(*a, matmul_nt(g, bv, m, n, k))?;
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, matmul_tn(av, g, m, k, n))?;
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.matrix(*a, "transpose")?;
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                acc(*a, d)?;
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec())?;
                acc(*b, g.to_vec())?;
            }
            Op::AddBias(a, bias) => {
                acc(*a, g.to_vec())?;
                let n = self.value(*bias).numel();
                let mut d = vec![T::zero(); n];
                for (i, &gi) in g.iter().enumerate() {
                    d[i % n] = d[i % n] + gi;
                }
                acc(*bias, d)?;
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect())?;
                acc(*b, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect())?;
            }
            Op::Scale(a, f) => acc(*a, g.iter().map(|&gi| gi * *f).collect())?,
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gi, &xi)| gi * ops::gelu_grad_scalar(xi))
                        .collect(),
                )?;
            }
            Op::Tanh(a) => {
                let y = self.nodes[idx].value.data();
                acc(
                    *a,
                    g.iter().zip(y).map(|(&gi, &yi)| gi * (T::one() - yi * yi)).collect(),
                )?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.matrix(*x, "layer_norm")?;
                let gm = self.value(*gamma).data();
                let mut dx = vec![T::zero(); m * n];
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                let nf = T::lit(n as f64);
                for r in 0..m {
                    let span = r * n..(r + 1) * n;
                    let (gr, xr) = (&g[span.clone()], &xhat[span.clone()]);
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for i in 0..n {
                        dgamma[i] = dgamma[i] + gr[i] * xr[i];
                        dbeta[i] = dbeta[i] + gr[i];
                        let dxhat = gr[i] * gm[i];
                        mean_d = mean_d + dxhat;
                        mean_dx = mean_dx + dxhat * xr[i];
                    }
                    mean_d = mean_d / nf;
                    mean_dx = mean_dx / nf;
                    for i in 0..n {
                        let dxhat = gr[i] * gm[i];
                        dx[r * n + i] = rstd[r] * (dxhat - mean_d - xr[i] * mean_dx);
                    }
                }
                acc(*x, dx)?;
                acc(*gamma, dgamma)?;
                acc(*beta, dbeta)?;
            }
            Op::GatherRows { table, index } => {
                let (rows, n) = self.matrix(*table, "gather_rows")?;
                let mut d = vec![T::zero(); rows * n];
                for (out_row, &src) in index.iter().enumerate() {
                    for j in 0..n {
                        d[src * n + j] = d[src * n + j] + g[out_row * n + j];
                    }
                }
                acc(*table, d)?;
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *heads, probs, g)?;
                acc(*q, dq)?;
                acc(*k, dk)?;
                acc(*v, dv)?;
            }
            Op::Dropout { x, mask } => {
                acc(*x, g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect())?;
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                acc(*a, vec![g[0]; n])?;
            }
            Op::Loss { input, grad } => {
                acc(*input, grad.iter().map(|&d| d * g[0]).collect())?;
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &[T],
    ) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
        let (n, hidden) = self.matrix(q, "attention")?;
        let dh = hidden / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); n * hidden];
        let mut dk = vec![T::zero(); n * hidden];
        let mut dv = vec![T::zero(); n * hidden];
        let mut dp = vec![T::zero(); n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                let gi = &g[i * hidden + off..i * hidden + off + dh];
                let mut weighted = T::zero();
                for j in 0..n {
                    if p[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let vj = &vv[j * hidden + off..j * hidden + off + dh];
                    dp[j] = ops::dot(gi, vj);
                    weighted = weighted + dp[j] * p[j];
                    for d in 0..dh {
                        dv[j * hidden + off + d] = dv[j * hidden + off + d] + p[j] * gi[d];
                    }
                }
                for j in 0..n {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    for d in 0..dh {
                        dq[i * hidden + off + d] = dq[i * hidden + off + d] + ds * kv[j * hidden + off + d];
                        dk[j * hidden + off + d] = dk[j * hidden + off + d] + ds * qv[i * hidden + off + d];
                    }
                }
            }
        }
        Ok((dq, dk, dv))
    }
}

/// Gradients of a scalar with respect to every recorded value that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when `v` does not influence the loss or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
