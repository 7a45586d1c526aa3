//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order. [`Graph::backward`] walks the tape once, newest first,
//! and hands each operation's backward rule the gradient of its output.
//! Gradients from several uses of one value are summed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, matmul_tn_acc, transpose, Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one recorded operation.
///
/// Receives the input values, the gradient of the output and, per input,
/// whether that input wants a gradient. Returns one optional gradient per
/// input, each with the input's element count.
pub type BackwardFn<T> = Box<dyn FnOnce(&[&Tensor<T>], &[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
}

/// Elementwise nonlinearity used by the MLPs and routers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Relu,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Relu => x.max(T::zero()),
        }
    }

    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    /// `(apply(x), derivative(x))` sharing one sigmoid evaluation.
    pub fn apply_with_derivative<T: Real>(self, x: T) -> (T, T) {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                (x * s, s * (T::one() + x * (T::one() - s)))
            }
            Activation::Relu => (self.apply(x), self.derivative(x)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Relu => "relu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::config(format!("unknown activation {other:?}"))),
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v` by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v).map(|g| {
            Tensor::new(self.value(v).shape().to_vec(), g.to_vec()).expect("grad matches value")
        })
    }

    /// Records an operation with a caller-supplied backward rule. The rule is
    /// dropped without being called when no input needs a gradient.
    pub fn custom_op(&mut self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: inputs.to_vec(),
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Populates gradients of every `requires_grad` value reachable from the
    /// scalar `loss`. Each recorded operation is visited at most once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(backward) = self.nodes[idx].backward.take() else {
                continue;
            };
            let Some(grad_out) = self.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_ids = node.inputs.clone();
            let input_grads = backward(&inputs, &grad_out, &needs);
            // Intermediate gradients are kept so tests can inspect them.
            self.grads[idx] = Some(grad_out);
            for ((id, grad), need) in input_ids.into_iter().zip(input_grads).zip(needs) {
                let Some(grad) = grad else { continue };
                if !need {
                    continue;
                }
                match &mut self.grads[id.0] {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grad) {
                            *a += *g;
                        }
                    }
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// `a · b` for `a: m × k`, `b: k × n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let (m, k) = self.dims2(a)?;
        let n = value.shape()[1];
        Ok(self.custom_op(
            &[a, b],
            value,
            Box::new(move |inp, g, needs| {
                let da = needs[0].then(|| {
                    let bt = transpose(inp[1].data(), k, n);
                    let mut da = vec![T::zero(); m * k];
                    matmul_acc(g, &bt, &mut da, m, n, k);
                    da
                });
                let db = needs[1].then(|| {
                    let mut db = vec![T::zero(); k * n];
                    matmul_tn_acc(inp[0].data(), g, &mut db, m, k, n);
                    db
                });
                vec![da, db]
            }),
        ))
    }

    /// `x · wᵀ` for `x: m × k`, `w: n × k` (weights stored output-major).
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, k) = self.dims2(x)?;
        let (n, kw) = self.dims2(w)?;
        if k != kw {
            return Err(Error::Shape {
                op: "linear",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(w).shape().to_vec(),
            });
        }
        let value = linear_forward(self.value(x).data(), self.value(w).data(), m, k, n);
        Ok(self.custom_op(
            &[x, w],
            Tensor::new(vec![m, n], value)?,
            Box::new(move |inp, g, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); m * k];
                    matmul_acc(g, inp[1].data(), &mut dx, m, n, k);
                    dx
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![T::zero(); n * k];
                    matmul_tn_acc(g, inp[0].data(), &mut dw, m, n, k);
                    dw
                });
                vec![dx, dw]
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.custom_op(
            &[a, b],
            value,
            Box::new(|_, g, needs| {
                vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.custom_op(
            &[a, b],
            value,
            Box::new(|inp, g, needs| {
                let da =
                    needs[0].then(|| g.iter().zip(inp[1].data()).map(|(&g, &b)| g * b).collect());
                let db =
                    needs[1].then(|| g.iter().zip(inp[0].data()).map(|(&g, &a)| g * a).collect());
                vec![da, db]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.custom_op(
            &[a],
            value,
            Box::new(move |_, g, _| vec![Some(g.iter().map(|&g| g * factor).collect())]),
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self
            .value(a)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let n = self.value(a).numel();
        self.custom_op(
            &[a],
            Tensor::scalar(total),
            Box::new(move |_, g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let value = self.value(x).map(|v| act.apply(v));
        self.custom_op(
            &[x],
            value,
            Box::new(move |inp, g, _| {
                let dx = g
                    .iter()
                    .zip(inp[0].data())
                    .map(|(&g, &x)| g * act.derivative(x))
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    /// Row-wise RMS normalisation with a learned per-feature scale.
    pub fn rms_norm(&mut self, x: Var, scale: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims2(x)?;
        if self.value(scale).numel() != d {
            return Err(Error::Shape {
                op: "rms_norm",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(scale).shape().to_vec(),
            });
        }
        let eps = T::cast(eps);
        let xs = self.value(x).data();
        let w = self.value(scale).data();
        let mut out = Vec::with_capacity(m * d);
        let mut inv_rms = Vec::with_capacity(m);
        for row in xs.chunks_exact(d.max(1)).take(m) {
            let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / T::cast(d as f64);
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(w).map(|(&v, &s)| v * r * s));
        }
        Ok(self.custom_op(
            &[x, scale],
            Tensor::new(vec![m, d], out)?,
            Box::new(move |inp, g, needs| {
                let xs = inp[0].data();
                let w = inp[1].data();
                let mut dx = needs[0].then(|| vec![T::zero(); m * d]);
                let mut dw = needs[1].then(|| vec![T::zero(); d]);
                let inv_d = T::one() / T::cast(d as f64);
                for i in 0..m {
                    let r = inv_rms[i];
                    let row = &xs[i * d..(i + 1) * d];
                    let grow = &g[i * d..(i + 1) * d];
                    if let Some(dw) = dw.as_mut() {
                        for j in 0..d {
                            dw[j] += grow[j] * row[j] * r;
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dot = (0..d).fold(T::zero(), |acc, j| acc + grow[j] * w[j] * row[j]);
                        let c = r * r * dot * inv_d;
                        for j in 0..d {
                            dx[i * d + j] = r * (grow[j] * w[j] - row[j] * c);
                        }
                    }
                }
                vec![dx, dw]
            }),
        ))
    }

    /// Gathers rows of `table` (V × D) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table)?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding id",
                    index: id,
                    limit: vocab,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let ids = ids.to_vec();
        Ok(self.custom_op(
            &[table],
            Tensor::new(vec![ids.len(), d], out)?,
            Box::new(move |_, g, _| {
                let mut dt = vec![T::zero(); vocab * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[i * d + j];
                    }
                }
                vec![Some(dt)]
            }),
        ))
    }

    /// Rows of `x` picked by index, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, d) = self.dims2(x)?;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= m {
                return Err(Error::Index {
                    what: "row",
                    index: r,
                    limit: m,
                });
            }
            out.extend_from_slice(&xs[r * d..(r + 1) * d]);
        }
        let rows = rows.to_vec();
        Ok(self.custom_op(
            &[x],
            Tensor::new(vec![rows.len(), d], out)?,
            Box::new(move |_, g, _| {
                let mut dx = vec![T::zero(); m * d];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        dx[r * d + j] += g[i * d + j];
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits)?;
        if b == 0 {
            return Err(Error::contract("cross entropy over an empty batch"));
        }
        if targets.len() != b {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![b, c],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                what: "target class",
                index: bad,
                limit: c,
            });
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * c);
        let mut total = T::zero();
        for (row, &t) in z.chunks_exact(c).zip(targets) {
            let (lse, p) = log_softmax_parts(row);
            total += lse - row[t];
            probs.extend(p);
        }
        let inv_b = T::one() / T::cast(b as f64);
        let targets = targets.to_vec();
        Ok(self.custom_op(
            &[logits],
            Tensor::scalar(total * inv_b),
            Box::new(move |_, g, _| {
                let scale = g[0] * inv_b;
                let mut dz = probs;
                for (i, &t) in targets.iter().enumerate() {
                    dz[i * c + t] -= T::one();
                }
                for v in &mut dz {
                    *v *= scale;
                }
                vec![Some(dz)]
            }),
        ))
    }

    /// Softmax probability of the class `picks[b]` for each row `b`, shape `[B]`.
    pub fn softmax_pick(&mut self, logits: Var, picks: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits)?;
        if picks.len() != b {
            return Err(Error::Shape {
                op: "softmax_pick",
                lhs: vec![b, c],
                rhs: vec![picks.len()],
            });
        }
        if let Some(&bad) = picks.iter().find(|&&p| p >= c) {
            return Err(Error::Index {
                what: "picked class",
                index: bad,
                limit: c,
            });
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * c);
        for row in z.chunks_exact(c.max(1)).take(b) {
            probs.extend(log_softmax_parts(row).1);
        }
        let picked: Vec<T> = picks
            .iter()
            .enumerate()
            .map(|(i, &p)| probs[i * c + p])
            .collect();
        let picks = picks.to_vec();
        Ok(self.custom_op(
            &[logits],
            Tensor::new(vec![b], picked)?,
            Box::new(move |_, g, _| {
                let mut dz = vec![T::zero(); b * c];
                for i in 0..b {
                    let p = probs[i * c + picks[i]];
                    for j in 0..c {
                        let delta = if j == picks[i] { T::one() } else { T::zero() };
                        dz[i * c + j] = g[i] * p * (delta - probs[i * c + j]);
                    }
                }
                vec![Some(dz)]
            }),
        ))
    }

    /// Multiplies row `b` of `x` by `s[b]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, d) = self.dims2(x)?;
        if self.value(s).numel() != m {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: vec![m, d],
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let xs = self.value(x).data();
        let ss = self.value(s).data();
        let mut out = Vec::with_capacity(m * d);
        for i in 0..m {
            out.extend(xs[i * d..(i + 1) * d].iter().map(|&v| v * ss[i]));
        }
        Ok(self.custom_op(
            &[x, s],
            Tensor::new(vec![m, d], out)?,
            Box::new(move |inp, g, needs| {
                let xs = inp[0].data();
                let ss = inp[1].data();
                let dx = needs[0].then(|| (0..m * d).map(|i| g[i] * ss[i / d.max(1)]).collect());
                let ds = needs[1].then(|| {
                    (0..m)
                        .map(|i| {
                            (0..d).fold(T::zero(), |acc, j| acc + g[i * d + j] * xs[i * d + j])
                        })
                        .collect()
                });
                vec![dx, ds]
            }),
        ))
    }

    /// Causal multi-head self-attention over `batch` sequences of length
    /// `seq`. `q`, `k`, `v` are `(batch·seq) × D` with heads laid out as
    /// contiguous column blocks.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.dims2(q)?;
        self.same_shape("causal_attention", q, k)?;
        self.same_shape("causal_attention", q, v)?;
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::Shape {
                op: "causal_attention",
                lhs: vec![rows, d],
                rhs: vec![batch, seq, heads],
            });
        }
        let hd = d / heads;
        let scale = T::one() / T::cast(hd as f64).sqrt();
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![T::zero(); rows * d];
        // probs[(b, h, i)] holds i+1 weights over keys 0..=i.
        let mut probs: Vec<T> = Vec::with_capacity(batch * heads * seq * (seq + 1) / 2);
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * hd;
                for i in 0..seq {
                    let qi = &qs[(b * seq + i) * d + col..][..hd];
                    let mut max = T::neg_infinity();
                    for j in 0..=i {
                        let kj = &ks[(b * seq + j) * d + col..][..hd];
                        let s = dot(qi, kj) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut denom = T::zero();
                    for s in &mut scores[..=i] {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                    let oi = &mut out[(b * seq + i) * d + col..][..hd];
                    for j in 0..=i {
                        let p = scores[j] / denom;
                        probs.push(p);
                        let vj = &vs[(b * seq + j) * d + col..][..hd];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        Ok(self.custom_op(
            &[q, k, v],
            Tensor::new(vec![rows, d], out)?,
            Box::new(move |inp, g, needs| {
                let (qs, ks, vs) = (inp[0].data(), inp[1].data(), inp[2].data());
                let mut dq = vec![T::zero(); rows * d];
                let mut dk = vec![T::zero(); rows * d];
                let mut dv = vec![T::zero(); rows * d];
                let mut dp = vec![T::zero(); seq];
                let mut cursor = 0;
                for b in 0..batch {
                    for h in 0..heads {
                        let col = h * hd;
                        for i in 0..seq {
                            let p = &probs[cursor..cursor + i + 1];
                            cursor += i + 1;
                            let gi = &g[(b * seq + i) * d + col..][..hd];
                            let mut weighted = T::zero();
                            for j in 0..=i {
                                let vj = &vs[(b * seq + j) * d + col..][..hd];
                                dp[j] = dot(gi, vj);
                                weighted += p[j] * dp[j];
                                let dvj = &mut dv[(b * seq + j) * d + col..][..hd];
                                for (dvv, &gg) in dvj.iter_mut().zip(gi) {
                                    *dvv += p[j] * gg;
                                }
                            }
                            let qi_off = (b * seq + i) * d + col;
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - weighted) * scale;
                                let kj_off = (b * seq + j) * d + col;
                                for c in 0..hd {
                                    dq[qi_off + c] += ds * ks[kj_off + c];
                                    dk[kj_off + c] += ds * qs[qi_off + c];
                                }
                            }
                        }
                    }
                }
                vec![
                    needs[0].then_some(dq),
                    needs[1].then_some(dk),
                    needs[2].then_some(dv),
                ]
            }),
        ))
    }
}

/// `x · wᵀ` as a plain buffer, `x: m × k`, `w: n × k`.
pub fn linear_forward<T: Real>(x: &[T], w: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let wt = transpose(w, n, k);
    let mut out = vec![T::zero(); m * n];
    matmul_acc(x, &wt, &mut out, m, k, n);
    out
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Log-sum-exp of a row and its softmax, both max-stabilised.
pub fn log_softmax_parts<T: Real>(row: &[T]) -> (T, Vec<T>) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let denom = exps.iter().fold(T::zero(), |acc, &v| acc + v);
    let lse = max + denom.ln();
    (lse, exps.into_iter().map(|e| e / denom).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1], &[3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn reused_tensor_sums_both_paths() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.5, -2.0]), true);
        let a = g.scale(x, 3.0);
        let b = g.scale(x, -0.5);
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.5, 2.5]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn silu_and_relu_values() {
        assert_eq!(Activation::Silu.apply(0.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(-3.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(3.0f64), 3.0);
        // 1 / (1 + e^-1)
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((Activation::Silu.apply(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert_eq!(Activation::Silu.apply(1.0f64), expected);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[3, 4]));
        let l = g.cross_entropy(z, &[0, 3, 2]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let z = g.constant(t(&[1, 2], &[1000.0, 0.0]));
        let l = g.cross_entropy(z, &[0]).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        let z = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let l = g.cross_entropy(z, &[0]).unwrap();
        // -ln(e / (e + e^2)) = ln(1 + e)
        assert!((g.value(l).item() - 1.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(g.cross_entropy(z, &[2]), Err(Error::Index { .. })));
    }

    #[test]
    fn frozen_inputs_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let x = g.leaf(t(&[1, 2], &[0.5, -1.0]), true);
        let y = g.linear(x, w).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn accumulation_is_additive_across_losses() {
        // grad(l1 + l2) == grad(l1) + grad(l2) on a shared parameter, exactly.
        let w0 = t(&[2, 3], &[0.3, -0.2, 0.5, 0.1, 0.7, -0.4]);
        let x0 = t(&[2, 3], &[1.0, 2.0, -1.0, 0.5, -0.5, 0.25]);
        let run = |which: u8| {
            let mut g = Graph::<f64>::new();
            let w = g.leaf(w0.clone(), true);
            let x = g.constant(x0.clone());
            let y = g.linear(x, w).unwrap();
            let l1 = g.cross_entropy(y, &[0, 1]).unwrap();
            let act = g.activation(w, Activation::Silu);
            let sq = g.mul(act, w).unwrap();
            let l2 = g.sum(sq);
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => g.add(l1, l2).unwrap(),
            };
            g.backward(loss).unwrap();
            g.grad(w).unwrap().to_vec()
        };
        let (a, b, both) = (run(0), run(1), run(2));
        for i in 0..a.len() {
            assert_eq!(a[i] + b[i], both[i]);
        }
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let report = check_gradients(7).unwrap();
        for (name, err) in &report {
            assert!(*err < 1e-4, "{name}: relative error {err}");
        }
        assert!(report.len() >= 12);
    }
}
