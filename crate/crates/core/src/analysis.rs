//! Evaluation instruments for adapted models: routed inference that only
//! computes the chosen expert slice, router confusion matrices, per-layer
//! expert usage, activated-parameter accounting and perplexity.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_forward, AdaptedModel, Routing};
use crate::autodiff::Graph;
use crate::corpus::TokenBatch;
use crate::error::{Error, Result};
use crate::labels::{derive_labels, SimilarityMatrix};
use crate::model::{lm_loss, DenseModel};
use crate::nested::{sliced_expert, ExpertPass};
use crate::router::predict_rows;
use crate::tensor::{transpose, Real, Tensor};

/// How [`routed_forward`] chooses experts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RoutePolicy {
    /// The layer's router prediction.
    Router,
    /// Always this expert.
    Forced(usize),
    /// The derived label at this θ (needs every expert's output).
    Oracle { theta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutedOutput<T> {
    /// `batch × seq × V`
    pub logits: Tensor<T>,
    /// `choices[layer][b * seq + t]`
    pub choices: Vec<Vec<usize>>,
    /// Multiply-accumulates spent in MLP layers.
    pub mlp_macs: u64,
}

/// Runs the adapted model computing, per token and layer, only the chosen
/// expert's weight slices.
pub fn routed_forward<T: Real>(
    model: &AdaptedModel<T>,
    batch: &TokenBatch,
    policy: RoutePolicy,
) -> Result<RoutedOutput<T>> {
    let cfg = &model.base.config;
    let (d, h, e) = (cfg.embed_dim, cfg.hidden_dim, model.num_experts());
    if let RoutePolicy::Forced(f) = policy {
        if f >= e {
            return Err(Error::Index {
                what: "expert",
                index: f,
                limit: e,
            });
        }
    }
    let mut g = Graph::new();
    let bound = model.base.bind(&mut g, &|_| false);
    let mut choices = vec![Vec::new(); cfg.num_layers];
    let mut macs = 0u64;
    let logits = model.base.trunk(
        &mut g,
        &bound,
        &batch.tokens,
        batch.batch,
        batch.seq,
        &mut |g, layer, m, _| {
            let x = g.value(m).clone();
            let rows = x.shape()[0];
            let blk = &model.base.blocks[layer];
            let chosen = match policy {
                RoutePolicy::Router => predict_rows(&model.routers[layer].forward(&x)?),
                RoutePolicy::Forced(f) => vec![f; rows],
                RoutePolicy::Oracle { theta } => {
                    let pass = ExpertPass::run(
                        x.data(),
                        blk.w_in.data(),
                        blk.w_out.data(),
                        rows,
                        d,
                        &model.widths,
                        cfg.activation,
                    );
                    derive_labels(&SimilarityMatrix::from_outputs(&pass.outputs)?, theta)?
                }
            };
            let w_out_t = transpose(blk.w_out.data(), d, h);
            let mut out = vec![T::zero(); rows * d];
            for (expert, &width) in model.widths.iter().enumerate() {
                let members: Vec<usize> = (0..rows).filter(|&r| chosen[r] == expert).collect();
                if members.is_empty() {
                    continue;
                }
                let mut gathered = Vec::with_capacity(members.len() * d);
                for &r in &members {
                    gathered.extend_from_slice(x.row(r));
                }
                let y = sliced_expert(
                    &gathered,
                    blk.w_in.data(),
                    &w_out_t,
                    members.len(),
                    d,
                    width,
                    cfg.activation,
                );
                for (i, &r) in members.iter().enumerate() {
                    out[r * d..(r + 1) * d].copy_from_slice(&y[i * d..(i + 1) * d]);
                }
                macs += (members.len() * 2 * d * width) as u64;
            }
            choices[layer] = chosen;
            Ok(g.constant(Tensor::new(vec![rows, d], out)?))
        },
    )?;
    let v = cfg.vocab_size;
    Ok(RoutedOutput {
        logits: g
            .value(logits)
            .clone()
            .reshape(&[batch.batch, batch.seq, v])?,
        choices,
        mlp_macs: macs,
    })
}

/// Rows are derived labels, columns router predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub accuracy: f64,
    /// Share of misclassifications that land on a neighbouring expert.
    /// Reported as 1.0 when there are no errors; see `errors`.
    pub adjacent_error_fraction: f64,
    pub errors: u64,
}

impl ConfusionMatrix {
    pub fn from_pairs(labels: &[usize], predictions: &[usize], num_experts: usize) -> Self {
        let mut counts = vec![vec![0u64; num_experts]; num_experts];
        for (&l, &p) in labels.iter().zip(predictions) {
            counts[l][p] += 1;
        }
        Self::from_counts(counts)
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        let total: u64 = counts.iter().flatten().sum();
        let diag: u64 = (0..counts.len()).map(|i| counts[i][i]).sum();
        let errors = total - diag;
        let adjacent: u64 = (0..counts.len())
            .flat_map(|l| (0..counts.len()).map(move |p| (l, p)))
            .filter(|&(l, p)| l.abs_diff(p) == 1)
            .map(|(l, p)| counts[l][p])
            .sum();
        Self {
            accuracy: diag as f64 / total.max(1) as f64,
            adjacent_error_fraction: if errors == 0 {
                1.0
            } else {
                adjacent as f64 / errors as f64
            },
            errors,
            counts,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Accuracy of always predicting the most common label.
    pub fn majority_baseline(&self) -> f64 {
        let max = self
            .counts
            .iter()
            .map(|r| r.iter().sum::<u64>())
            .max()
            .unwrap_or(0);
        max as f64 / self.total().max(1) as f64
    }

    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|r| {
                let s: u64 = r.iter().sum();
                r.iter().map(|&c| c as f64 / s.max(1) as f64).collect()
            })
            .collect()
    }

    /// Per label row: whether the diagonal entry is the row maximum
    /// (`None` for labels that never occur).
    pub fn diagonal_dominance(&self) -> Vec<Option<bool>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let s: u64 = r.iter().sum();
                (s > 0).then(|| r.iter().all(|&c| c <= r[i]))
            })
            .collect()
    }

    /// `label,pred_0,...,pred_{E-1}` header, then one row per label.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let e = self.counts.len();
        let header: Vec<String> = (0..e).map(|p| format!("pred_{p}")).collect();
        writeln!(out, "label,{}", header.join(","))?;
        for (l, row) in self.counts.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(out, "{l},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Confusion of router predictions against labels derived at `theta`,
/// pooled over all layers. Tokens follow their labels through the model,
/// as during adaptation.
pub fn confusion<T: Real>(
    model: &AdaptedModel<T>,
    eval: &[TokenBatch],
    theta: f64,
) -> Result<ConfusionMatrix> {
    let e = model.num_experts();
    let mut counts = vec![vec![0u64; e]; e];
    for batch in eval {
        let mut g = Graph::new();
        let fwd = adapt_forward(&mut g, model, batch, theta, Routing::TeacherForced, &|_| {
            false
        })?;
        for (labels, preds) in fwd.labels.per_layer.iter().zip(&fwd.predictions.per_layer) {
            for (&l, &p) in labels.iter().zip(preds) {
                counts[l][p] += 1;
            }
        }
    }
    Ok(ConfusionMatrix::from_counts(counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    /// `fractions[layer][expert]`
    pub fractions: Vec<Vec<f64>>,
    /// Natural-log entropy of each layer's usage distribution.
    pub entropy: Vec<f64>,
    pub mean_activated_params: f64,
    pub tokens: usize,
}

impl UsageReport {
    pub fn mean_entropy(&self) -> f64 {
        self.entropy.iter().sum::<f64>() / self.entropy.len().max(1) as f64
    }

    /// `layer,expert_0,...,expert_{E-1},entropy`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let e = self.fractions.first().map_or(0, Vec::len);
        let header: Vec<String> = (0..e).map(|i| format!("expert_{i}")).collect();
        writeln!(out, "layer,{},entropy", header.join(","))?;
        for (layer, (row, h)) in self.fractions.iter().zip(&self.entropy).enumerate() {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(out, "{layer},{},{h}", cells.join(","))?;
        }
        Ok(())
    }
}

pub fn entropy(fractions: &[f64]) -> f64 {
    -fractions
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Builds a usage report from per-layer choices over the same tokens.
pub fn usage_from_choices<T: Real>(model: &AdaptedModel<T>, choices: &[Vec<usize>]) -> UsageReport {
    let e = model.num_experts();
    let tokens = choices.first().map_or(0, Vec::len);
    let fractions: Vec<Vec<f64>> = choices
        .iter()
        .map(|layer| {
            let mut c = vec![0usize; e];
            for &x in layer {
                c[x] += 1;
            }
            c.into_iter()
                .map(|n| n as f64 / layer.len().max(1) as f64)
                .collect()
        })
        .collect();
    UsageReport {
        entropy: fractions.iter().map(|f| entropy(f)).collect(),
        fractions,
        mean_activated_params: activated_params_for_choices(model, choices),
        tokens,
    }
}

/// Expert usage under the model's own routers.
pub fn expert_usage<T: Real>(model: &AdaptedModel<T>, eval: &[TokenBatch]) -> Result<UsageReport> {
    let choices = collect_choices(model, eval, RoutePolicy::Router)?;
    Ok(usage_from_choices(model, &choices))
}

fn collect_choices<T: Real>(
    model: &AdaptedModel<T>,
    eval: &[TokenBatch],
    policy: RoutePolicy,
) -> Result<Vec<Vec<usize>>> {
    let mut all = vec![Vec::new(); model.base.config.num_layers];
    for batch in eval {
        let out = routed_forward(model, batch, policy)?;
        for (acc, layer) in all.iter_mut().zip(out.choices) {
            acc.extend(layer);
        }
    }
    Ok(all)
}

/// Parameters every token touches: everything except the MLPs, plus routers.
pub fn shared_params<T: Real>(model: &AdaptedModel<T>) -> usize {
    model.base.param_count() - model.base.mlp_param_count() + model.router_param_count()
}

/// Total parameters with every MLP at full width, plus routers.
pub fn full_params<T: Real>(model: &AdaptedModel<T>) -> usize {
    model.base.param_count() + model.router_param_count()
}

/// Mean over tokens of shared parameters plus `2·D·H_e` per layer for the
/// expert each token used there.
pub fn activated_params_for_choices<T: Real>(
    model: &AdaptedModel<T>,
    choices: &[Vec<usize>],
) -> f64 {
    let tokens = choices.first().map_or(0, Vec::len);
    if tokens == 0 {
        return shared_params(model) as f64;
    }
    let d = model.base.config.embed_dim;
    let mlp_total: u128 = choices
        .iter()
        .flatten()
        .map(|&e| (2 * d * model.widths[e]) as u128)
        .sum();
    shared_params(model) as f64 + mlp_total as f64 / tokens as f64
}

pub fn activated_params<T: Real>(model: &AdaptedModel<T>, eval: &[TokenBatch]) -> Result<f64> {
    let choices = collect_choices(model, eval, RoutePolicy::Router)?;
    Ok(activated_params_for_choices(model, &choices))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Dense,
    Routed,
}

fn mean_loss<T: Real>(
    eval: &[TokenBatch],
    mut logits_of: impl FnMut(&TokenBatch) -> Result<Tensor<T>>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in eval {
        let logits = logits_of(b)?;
        let v = *logits.shape().last().expect("rank 3");
        let mut g = Graph::new();
        let z = g.constant(logits.reshape(&[b.batch * b.seq, v])?);
        let loss = lm_loss(&mut g, z, &b.tokens, b.batch, b.seq)?;
        let n = b.batch * (b.seq - 1);
        total += g.value(loss).item().as_f64() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::contract("no evaluation tokens"));
    }
    Ok(total / count as f64)
}

/// `exp` of the mean next-token loss of a dense model.
pub fn dense_perplexity<T: Real>(model: &DenseModel<T>, eval: &[TokenBatch]) -> Result<f64> {
    Ok(mean_loss(eval, |b| model.forward_dense(&b.tokens, b.batch, b.seq))?.exp())
}

/// `exp` of the mean next-token loss of an adapted model, either at full
/// width or routed by its routers.
pub fn perplexity<T: Real>(
    model: &AdaptedModel<T>,
    eval: &[TokenBatch],
    mode: EvalMode,
) -> Result<f64> {
    match mode {
        EvalMode::Dense => dense_perplexity(&model.base, eval),
        EvalMode::Routed => Ok(mean_loss(eval, |b| {
            Ok(routed_forward(model, b, RoutePolicy::Router)?.logits)
        })?
        .exp()),
    }
}

/// Mean per-layer usage entropy of two models on the same data.
pub fn usage_entropy_compare<T: Real>(
    with_router_loss: &AdaptedModel<T>,
    ablated: &AdaptedModel<T>,
    eval: &[TokenBatch],
) -> Result<(f64, f64)> {
    Ok((
        expert_usage(with_router_loss, eval)?.mean_entropy(),
        expert_usage(ablated, eval)?.mean_entropy(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub theta: f64,
    pub accuracy: f64,
    pub majority_baseline: f64,
    pub adjacent_error_fraction: f64,
    pub misclassified: u64,
    pub activated_params: f64,
    pub full_params: usize,
    pub perplexity_routed: f64,
    pub perplexity_dense: f64,
    pub mean_usage_entropy: f64,
    pub tokens: usize,
}

/// Everything `analyze` reports for one adapted model.
pub struct AnalysisReport {
    pub confusion: ConfusionMatrix,
    pub usage: UsageReport,
    pub metrics: Metrics,
}

pub fn analyze<T: Real>(
    model: &AdaptedModel<T>,
    eval: &[TokenBatch],
    theta: f64,
) -> Result<AnalysisReport> {
    let confusion = confusion(model, eval, theta)?;
    let usage = expert_usage(model, eval)?;
    let metrics = Metrics {
        theta,
        accuracy: confusion.accuracy,
        majority_baseline: confusion.majority_baseline(),
        adjacent_error_fraction: confusion.adjacent_error_fraction,
        misclassified: confusion.errors,
        activated_params: usage.mean_activated_params,
        full_params: full_params(model),
        perplexity_routed: perplexity(model, eval, EvalMode::Routed)?,
        perplexity_dense: perplexity(model, eval, EvalMode::Dense)?,
        mean_usage_entropy: usage.mean_entropy(),
        tokens: usage.tokens,
    };
    Ok(AnalysisReport {
        confusion,
        usage,
        metrics,
    })
}
