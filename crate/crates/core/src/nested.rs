//! Nested MLP experts.
//!
//! Expert `e` of an MLP with hidden width `H` uses the first
//! `H_e = floor((e + 1) / E · H)` hidden units: rows `0..H_e` of `W_IN`
//! (`H × D`) and columns `0..H_e` of `W_OUT` (`D × H`). Before slicing, the
//! hidden units are sorted by how strongly they activate on calibration
//! data so every expert keeps the most useful units.

use serde::{Deserialize, Serialize};

use crate::autodiff::{linear_forward, Activation, Graph, Var};
use crate::corpus::TokenBatch;
use crate::error::{Error, Result};
use crate::model::DenseModel;
use crate::tensor::{matmul_acc, matmul_acc_range, matmul_tn_acc, transpose, Real, Tensor};

/// Hidden width of every expert, smallest first.
pub fn expert_widths(hidden: usize, num_experts: usize) -> Result<Vec<usize>> {
    if num_experts == 0 || hidden == 0 {
        return Err(Error::config(
            "hidden width and expert count must be positive",
        ));
    }
    if num_experts > hidden {
        return Err(Error::config(format!(
            "{num_experts} experts over hidden width {hidden} would create an empty expert"
        )));
    }
    Ok((0..num_experts)
        .map(|e| (e + 1) * hidden / num_experts)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestedMlp<T> {
    /// H × D
    pub w_in: Tensor<T>,
    /// D × H
    pub w_out: Tensor<T>,
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl<T: Real> NestedMlp<T> {
    pub fn new(
        w_in: Tensor<T>,
        w_out: Tensor<T>,
        num_experts: usize,
        activation: Activation,
    ) -> Result<Self> {
        let (h, d) = w_in.dims2()?;
        if w_out.shape() != [d, h] {
            return Err(Error::Shape {
                op: "nested_mlp",
                lhs: w_in.shape().to_vec(),
                rhs: w_out.shape().to_vec(),
            });
        }
        Ok(Self {
            widths: expert_widths(h, num_experts)?,
            w_in,
            w_out,
            activation,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_in.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.w_in.shape()[1]
    }

    pub fn num_experts(&self) -> usize {
        self.widths.len()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let (b, d) = x.dims2()?;
        if d != self.embed_dim() {
            return Err(Error::Shape {
                op: "expert_forward",
                lhs: x.shape().to_vec(),
                rhs: self.w_in.shape().to_vec(),
            });
        }
        Ok(b)
    }

    /// Output of expert `e` alone, computed from its weight slices only.
    pub fn expert_forward(&self, x: &Tensor<T>, e: usize) -> Result<Tensor<T>> {
        let b = self.check_input(x)?;
        let width = *self.widths.get(e).ok_or(Error::Index {
            what: "expert",
            index: e,
            limit: self.num_experts(),
        })?;
        let d = self.embed_dim();
        let out = sliced_expert(
            x.data(),
            self.w_in.data(),
            &self.w_out_t(),
            b,
            d,
            width,
            self.activation,
        );
        Tensor::new(vec![b, d], out)
    }

    /// Outputs of every expert, sharing one full-width hidden computation.
    /// Entry `e` is bit-identical to [`NestedMlp::expert_forward`] for `e`.
    pub fn all_expert_outputs(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let b = self.check_input(x)?;
        let pass = ExpertPass::run(
            x.data(),
            self.w_in.data(),
            self.w_out.data(),
            b,
            self.embed_dim(),
            &self.widths,
            self.activation,
        );
        Ok(pass.outputs)
    }

    fn w_out_t(&self) -> Vec<T> {
        transpose(self.w_out.data(), self.embed_dim(), self.hidden_dim())
    }
}

/// Computes one expert from its slices. `w_out_t` is `W_OUTᵀ` (`H × D`).
pub(crate) fn sliced_expert<T: Real>(
    x: &[T],
    w_in: &[T],
    w_out_t: &[T],
    rows: usize,
    d: usize,
    width: usize,
    act: Activation,
) -> Vec<T> {
    let mut hidden = linear_forward(x, &w_in[..width * d], rows, d, width);
    for v in &mut hidden {
        *v = act.apply(*v);
    }
    let mut out = vec![T::zero(); rows * d];
    matmul_acc(&hidden, &w_out_t[..width * d], &mut out, rows, width, d);
    out
}

/// Shared forward state for all experts of one MLP.
pub(crate) struct ExpertPass<T> {
    /// `σ'` at the pre-activations.
    pub slope: Vec<T>,
    pub hidden: Vec<T>,
    pub outputs: Vec<Tensor<T>>,
}

impl<T: Real> ExpertPass<T> {
    pub fn run(
        x: &[T],
        w_in: &[T],
        w_out: &[T],
        rows: usize,
        d: usize,
        widths: &[usize],
        act: Activation,
    ) -> Self {
        let h = *widths.last().expect("at least one expert");
        let pre = linear_forward(x, w_in, rows, d, h);
        let (hidden, slope): (Vec<T>, Vec<T>) =
            pre.iter().map(|&v| act.apply_with_derivative(v)).unzip();
        let w_out_t = transpose(w_out, d, h);
        let mut acc = vec![T::zero(); rows * d];
        let mut outputs = Vec::with_capacity(widths.len());
        let mut done = 0;
        for &w in widths {
            // Continue the same accumulators so each prefix equals a
            // from-scratch product over 0..w.
            matmul_acc_range(&hidden, h, &w_out_t, d, &mut acc, done, w);
            done = w;
            outputs.push(Tensor::new(vec![rows, d], acc.clone()).expect("rows × d"));
        }
        Self {
            slope,
            hidden,
            outputs,
        }
    }
}

/// Records a nested MLP on `g`. All expert outputs are computed once and
/// passed to `route`, which returns the expert index for every row; row `b`
/// of the result is expert `route(..)[b]`'s output. Gradients flow only
/// through each row's chosen slice.
pub fn nested_mlp<T: Real, F>(
    g: &mut Graph<T>,
    x: Var,
    w_in: Var,
    w_out: Var,
    widths: &[usize],
    act: Activation,
    route: F,
) -> Result<Var>
where
    F: FnOnce(&[Tensor<T>]) -> Result<Vec<usize>>,
{
    let (rows, d) = g.value(x).dims2()?;
    let (h, d_in) = g.value(w_in).dims2()?;
    if d_in != d || g.value(w_out).shape() != [d, h] || widths.last() != Some(&h) {
        return Err(Error::Shape {
            op: "nested_mlp",
            lhs: g.value(x).shape().to_vec(),
            rhs: g.value(w_in).shape().to_vec(),
        });
    }
    let pass = ExpertPass::run(
        g.value(x).data(),
        g.value(w_in).data(),
        g.value(w_out).data(),
        rows,
        d,
        widths,
        act,
    );
    let choices = route(&pass.outputs)?;
    if choices.len() != rows {
        return Err(Error::contract(format!(
            "router produced {} choices for {rows} rows",
            choices.len()
        )));
    }
    let mut out = Vec::with_capacity(rows * d);
    for (b, &c) in choices.iter().enumerate() {
        let y = pass.outputs.get(c).ok_or(Error::Index {
            what: "expert",
            index: c,
            limit: widths.len(),
        })?;
        out.extend_from_slice(y.row(b));
    }
    let row_width: Vec<usize> = choices.iter().map(|&c| widths[c]).collect();
    let ExpertPass { slope, hidden, .. } = pass;
    Ok(g.custom_op(
        &[x, w_in, w_out],
        Tensor::new(vec![rows, d], out)?,
        Box::new(move |inp, gy, needs| {
            let (xs, wi, wo) = (inp[0].data(), inp[1].data(), inp[2].data());
            // Hidden units beyond a row's expert width neither saw the input
            // nor reached the output, so they are masked out of every product.
            let mut hidden = hidden;
            let mut dz = vec![T::zero(); rows * h];
            matmul_acc(gy, wo, &mut dz, rows, d, h);
            for b in 0..rows {
                let w = row_width[b];
                let srow = &slope[b * h..(b + 1) * h];
                let drow = &mut dz[b * h..(b + 1) * h];
                for (dk, &sk) in drow[..w].iter_mut().zip(srow) {
                    *dk *= sk;
                }
                drow[w..].iter_mut().for_each(|v| *v = T::zero());
                hidden[b * h + w..(b + 1) * h]
                    .iter_mut()
                    .for_each(|v| *v = T::zero());
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); rows * d];
                matmul_acc(&dz, wi, &mut dx, rows, h, d);
                dx
            });
            let dwi = needs[1].then(|| {
                let mut dwi = vec![T::zero(); h * d];
                matmul_tn_acc(&dz, xs, &mut dwi, rows, h, d);
                dwi
            });
            let dwo = needs[2].then(|| {
                let mut dwo = vec![T::zero(); d * h];
                matmul_tn_acc(gy, &hidden, &mut dwo, rows, d, h);
                dwo
            });
            vec![dx, dwi, dwo]
        }),
    ))
}

/// Per-layer importance of every hidden unit: the summed absolute
/// post-activation value over all calibration tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub scores: Vec<f64>,
    pub token_count: usize,
}

/// Column sums of `|hidden|` for one batch, accumulated in row order.
pub fn batch_importance<T: Real>(hidden: &Tensor<T>) -> Result<Vec<f64>> {
    let (rows, h) = hidden.dims2()?;
    let mut sums = vec![0.0; h];
    for r in 0..rows {
        for (s, &v) in sums.iter_mut().zip(hidden.row(r)) {
            *s += v.as_f64().abs();
        }
    }
    Ok(sums)
}

/// Runs the dense model over the calibration batches and scores every
/// hidden unit of every layer.
pub fn importance_scores<T: Real>(
    model: &DenseModel<T>,
    calib: &[TokenBatch],
) -> Result<Vec<ImportanceScores>> {
    let token_count: usize = calib.iter().map(|b| b.tokens.len()).sum();
    if token_count == 0 {
        return Err(Error::contract("calibration set is empty"));
    }
    let cfg = &model.config;
    let mut totals = vec![vec![0.0f64; cfg.hidden_dim]; cfg.num_layers];
    for batch in calib {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, &|_| false);
        model.trunk(
            &mut g,
            &bound,
            &batch.tokens,
            batch.batch,
            batch.seq,
            &mut |g, layer, m, blk| {
                let x = g.value(m);
                let rows = x.shape()[0];
                let pre = linear_forward(
                    x.data(),
                    model.blocks[layer].w_in.data(),
                    rows,
                    cfg.embed_dim,
                    cfg.hidden_dim,
                );
                let hidden =
                    Tensor::new(vec![rows, cfg.hidden_dim], pre)?.map(|v| cfg.activation.apply(v));
                // Per-batch partial sums keep duplicated batches exactly additive.
                for (t, s) in totals[layer].iter_mut().zip(batch_importance(&hidden)?) {
                    *t += s;
                }
                model.dense_mlp(g, m, blk)
            },
        )?;
    }
    Ok(totals
        .into_iter()
        .map(|scores| ImportanceScores {
            scores,
            token_count,
        })
        .collect())
}

/// Hidden-unit order by descending score; ties keep ascending index.
pub fn importance_permutation(scores: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..scores.len()).collect();
    perm.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    perm
}

/// Permutes hidden units so the most important come first.
pub fn reorder_mlp<T: Real>(mlp: &NestedMlp<T>, scores: &ImportanceScores) -> Result<NestedMlp<T>> {
    let (w_in, w_out) = permute_hidden(&mlp.w_in, &mlp.w_out, &scores.scores)?;
    Ok(NestedMlp {
        w_in,
        w_out,
        widths: mlp.widths.clone(),
        activation: mlp.activation,
    })
}

fn permute_hidden<T: Real>(
    w_in: &Tensor<T>,
    w_out: &Tensor<T>,
    scores: &[f64],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, d) = w_in.dims2()?;
    if scores.len() != h {
        return Err(Error::contract(format!(
            "{} importance scores for hidden width {h}",
            scores.len()
        )));
    }
    let perm = importance_permutation(scores);
    let mut new_in = Vec::with_capacity(h * d);
    for &src in &perm {
        new_in.extend_from_slice(w_in.row(src));
    }
    let mut new_out = Vec::with_capacity(d * h);
    for j in 0..d {
        let row = w_out.row(j);
        new_out.extend(perm.iter().map(|&src| row[src]));
    }
    Ok((
        Tensor::new(vec![h, d], new_in)?,
        Tensor::new(vec![d, h], new_out)?,
    ))
}

/// Applies [`reorder_mlp`] to every layer of a dense model.
pub fn reorder_model<T: Real>(
    model: &DenseModel<T>,
    scores: &[ImportanceScores],
) -> Result<DenseModel<T>> {
    if scores.len() != model.blocks.len() {
        return Err(Error::contract(format!(
            "{} score vectors for {} layers",
            scores.len(),
            model.blocks.len()
        )));
    }
    let mut out = model.clone();
    for (blk, s) in out.blocks.iter_mut().zip(scores) {
        let (w_in, w_out) = permute_hidden(&blk.w_in, &blk.w_out, &s.scores)?;
        blk.w_in = w_in;
        blk.w_out = w_out;
    }
    Ok(out)
}
