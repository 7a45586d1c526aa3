//! Converts a reordered dense model into a difficulty-routed nested-expert
//! model by fine-tuning the MLPs and training one router per layer.
//!
//! During training every MLP computes all expert outputs, derives each
//! token's difficulty label from them, and routes the token through the
//! expert its label names (teacher forcing). Routers read a detached copy
//! of the MLP input and learn the labels through their own cross-entropy
//! loss. The objective is `λ_llm · L_llm + λ_router · L_router`.
//!
//! In ablation mode tokens follow the router's own prediction instead, and
//! the chosen expert's output is scaled by the router's probability for it
//! so the language-model loss is the router's only training signal.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::{BatchSampler, TokenBatch};
use crate::error::{Error, Result};
use crate::labels::{derive_labels, DifficultyLabels, SimilarityMatrix};
use crate::model::{lm_loss, BoundModel, DenseModel, ParamRole};
use crate::nested::{
    expert_widths, importance_scores, nested_mlp, reorder_model, ImportanceScores,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::router::{predict_rows, router_forward, router_loss, Router, RouterConfig};
use crate::tensor::{Real, Tensor};

/// Dense model whose MLP hidden units are sorted by importance.
#[derive(Debug, Clone, PartialEq)]
pub struct ReorderedModel<T> {
    pub model: DenseModel<T>,
    pub scores: Vec<ImportanceScores>,
}

/// Scores hidden units on `calib` and sorts every MLP by them.
pub fn reorder_checkpoint<T: Real>(
    dense: &DenseModel<T>,
    calib: &[TokenBatch],
) -> Result<ReorderedModel<T>> {
    let scores = importance_scores(dense, calib)?;
    let model = reorder_model(dense, &scores)?;
    Ok(ReorderedModel { model, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub theta: f64,
    pub lambda_llm: f64,
    pub lambda_router: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub freeze_attention: bool,
    pub ablation_mode: bool,
    pub num_experts: usize,
    pub router: RouterConfig,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            theta: 0.8,
            lambda_llm: 0.2,
            lambda_router: 1.0,
            steps: 2000,
            batch_size: 4,
            seq_len: 64,
            lr: 3e-4,
            weight_decay: 0.0,
            freeze_attention: true,
            ablation_mode: false,
            num_experts: 4,
            router: RouterConfig::default(),
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::config(format!(
                "theta must lie in (0, 1), got {}",
                self.theta
            )));
        }
        for (name, w) in [
            ("lambda_llm", self.lambda_llm),
            ("lambda_router", self.lambda_router),
        ] {
            if w.is_nan() || w < 0.0 {
                return Err(Error::config(format!(
                    "{name} must be non-negative, got {w}"
                )));
            }
        }
        if self.ablation_mode && self.lambda_router != 0.0 {
            return Err(Error::config(
                "lambda_router must be 0 in ablation_mode, which trains without the router loss",
            ));
        }
        if self.num_experts == 0 {
            return Err(Error::config("num_experts must be at least 1"));
        }
        if self.router.hidden == 0 {
            return Err(Error::config("router_hidden must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.seq_len < 2 {
            return Err(Error::config("seq_len must be at least 2"));
        }
        Ok(())
    }

    pub fn routing(&self) -> Routing<'static> {
        if self.ablation_mode {
            Routing::Predicted
        } else {
            Routing::TeacherForced
        }
    }

    fn trains(&self, role: ParamRole) -> bool {
        match role {
            ParamRole::Mlp | ParamRole::Router => true,
            ParamRole::Attention => !self.freeze_attention,
            ParamRole::Embedding | ParamRole::Norm | ParamRole::Head => false,
        }
    }
}

/// Provenance of an adapted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptMeta {
    pub theta: f64,
    pub lambda_llm: f64,
    pub lambda_router: f64,
    pub steps: usize,
    pub ablation_mode: bool,
    pub freeze_attention: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel<T> {
    /// Reordered base weights; MLPs fine-tuned.
    pub base: DenseModel<T>,
    pub widths: Vec<usize>,
    pub routers: Vec<Router<T>>,
    pub router_config: RouterConfig,
    pub meta: AdaptMeta,
}

/// Graph handles of an adapted model's weights.
pub struct BoundAdapted {
    pub model: BoundModel,
    pub routers: Vec<(Var, Var)>,
    pub named: Vec<(String, Var)>,
}

impl<T: Real> AdaptedModel<T> {
    /// Wraps a reordered base with freshly initialised routers.
    pub fn from_base(base: &ReorderedModel<T>, config: &AdaptConfig) -> Result<Self> {
        config.validate()?;
        let mc = &base.model.config;
        let widths = expert_widths(mc.hidden_dim, config.num_experts)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0005_eed0_fa11_u64);
        let routers = (0..mc.num_layers)
            .map(|_| Router::init(mc.embed_dim, config.num_experts, config.router, &mut rng))
            .collect();
        Ok(Self {
            base: base.model.clone(),
            widths,
            routers,
            router_config: config.router,
            meta: AdaptMeta {
                theta: config.theta,
                lambda_llm: config.lambda_llm,
                lambda_router: config.lambda_router,
                steps: 0,
                ablation_mode: config.ablation_mode,
                freeze_attention: config.freeze_attention,
                seed: config.seed,
            },
        })
    }

    pub fn num_experts(&self) -> usize {
        self.widths.len()
    }

    pub fn router_param_count(&self) -> usize {
        self.routers.iter().map(Router::param_count).sum()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, ParamRole, &mut Tensor<T>)> {
        let mut out = self.base.named_params_mut();
        for (i, r) in self.routers.iter_mut().enumerate() {
            out.push((
                format!("layers.{i}.router.w1"),
                ParamRole::Router,
                &mut r.w1,
            ));
            out.push((
                format!("layers.{i}.router.w2"),
                ParamRole::Router,
                &mut r.w2,
            ));
        }
        out
    }

    pub fn named_params(&self) -> Vec<(String, ParamRole, &Tensor<T>)> {
        let mut out = self.base.named_params();
        for (i, r) in self.routers.iter().enumerate() {
            out.push((format!("layers.{i}.router.w1"), ParamRole::Router, &r.w1));
            out.push((format!("layers.{i}.router.w2"), ParamRole::Router, &r.w2));
        }
        out
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: &dyn Fn(ParamRole) -> bool) -> BoundAdapted {
        let model = self.base.bind(g, trainable);
        let mut named = model.named.clone();
        let train_router = trainable(ParamRole::Router);
        let routers = self
            .routers
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let w1 = g.leaf(r.w1.clone(), train_router);
                let w2 = g.leaf(r.w2.clone(), train_router);
                named.push((format!("layers.{i}.router.w1"), w1));
                named.push((format!("layers.{i}.router.w2"), w2));
                (w1, w2)
            })
            .collect();
        BoundAdapted {
            model,
            routers,
            named,
        }
    }
}

/// How tokens pick their expert in [`adapt_forward`].
#[derive(Debug, Clone, Copy)]
pub enum Routing<'a> {
    /// By the label derived from the expert outputs.
    TeacherForced,
    /// By the router's prediction, output scaled by its probability.
    Predicted,
    /// By caller-supplied labels, which also serve as router targets.
    Fixed(&'a DifficultyLabels),
}

pub struct AdaptForward {
    pub bound: BoundAdapted,
    pub logits: Var,
    pub llm_loss: Var,
    pub router_loss: Var,
    pub labels: DifficultyLabels,
    pub predictions: DifficultyLabels,
}

/// One adaptation forward pass recorded on `g`.
pub fn adapt_forward<T: Real>(
    g: &mut Graph<T>,
    model: &AdaptedModel<T>,
    batch: &TokenBatch,
    theta: f64,
    routing: Routing<'_>,
    trainable: &dyn Fn(ParamRole) -> bool,
) -> Result<AdaptForward> {
    let layers = model.base.config.num_layers;
    if model.routers.len() != layers {
        return Err(Error::config(format!(
            "adapted model has {} routers for {layers} layers",
            model.routers.len()
        )));
    }
    let bound = model.bind(g, trainable);
    let e = model.num_experts();
    let act = model.base.config.activation;
    let mut labels = DifficultyLabels::new(e, layers);
    let mut predictions = DifficultyLabels::new(e, layers);
    let mut router_losses = Vec::with_capacity(layers);
    let logits = model.base.trunk(
        g,
        &bound.model,
        &batch.tokens,
        batch.batch,
        batch.seq,
        &mut |g, layer, m, blk| {
            let (w1, w2) = bound.routers[layer];
            // The router loss must not reach earlier layers. Ablation has no
            // router loss and trains the router through the live input.
            let router_in = match routing {
                Routing::Predicted => m,
                _ => g.detach(m),
            };
            let r_logits = router_forward(g, router_in, w1, w2, model.router_config.nonlinearity)?;
            let pred = predict_rows(g.value(r_logits));
            let mut layer_labels = Vec::new();
            let y = match routing {
                Routing::TeacherForced => {
                    nested_mlp(g, m, blk.w_in, blk.w_out, &model.widths, act, |outs| {
                        layer_labels =
                            derive_labels(&SimilarityMatrix::from_outputs(outs)?, theta)?;
                        Ok(layer_labels.clone())
                    })?
                }
                Routing::Fixed(fixed) => {
                    layer_labels = fixed.per_layer.get(layer).cloned().ok_or_else(|| {
                        Error::contract(format!("no fixed labels for layer {layer}"))
                    })?;
                    let chosen = layer_labels.clone();
                    nested_mlp(g, m, blk.w_in, blk.w_out, &model.widths, act, |_| {
                        Ok(chosen)
                    })?
                }
                Routing::Predicted => {
                    let chosen = pred.clone();
                    let y = nested_mlp(g, m, blk.w_in, blk.w_out, &model.widths, act, |outs| {
                        layer_labels =
                            derive_labels(&SimilarityMatrix::from_outputs(outs)?, theta)?;
                        Ok(chosen)
                    })?;
                    let p = g.softmax_pick(r_logits, &pred)?;
                    g.scale_rows(y, p)?
                }
            };
            router_losses.push(router_loss(g, r_logits, &layer_labels)?);
            labels.per_layer[layer] = layer_labels;
            predictions.per_layer[layer] = pred;
            Ok(y)
        },
    )?;
    let llm_loss = lm_loss(g, logits, &batch.tokens, batch.batch, batch.seq)?;
    // Pooled over (layer, token) pairs: every layer sees the same tokens.
    let mut total = *router_losses
        .first()
        .ok_or_else(|| Error::config("model has no layers"))?;
    for &l in &router_losses[1..] {
        total = g.add(total, l)?;
    }
    let router_loss = g.scale(total, T::one() / T::cast(layers as f64));
    Ok(AdaptForward {
        bound,
        logits,
        llm_loss,
        router_loss,
        labels,
        predictions,
    })
}

/// `λ_llm · llm_loss + λ_router · router_loss`.
pub fn combined_loss<T: Real>(
    g: &mut Graph<T>,
    llm_loss: Var,
    router_loss: Var,
    lambda_llm: f64,
    lambda_router: f64,
) -> Result<Var> {
    let a = g.scale(llm_loss, T::cast(lambda_llm));
    let b = g.scale(router_loss, T::cast(lambda_router));
    g.add(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptLogRow {
    pub step: usize,
    pub llm_loss: f64,
    pub router_loss: f64,
    pub router_acc: f64,
}

pub struct AdaptOutcome<T> {
    pub model: AdaptedModel<T>,
    pub log: Vec<AdaptLogRow>,
    /// Per-expert label counts pooled over all training steps and layers.
    pub label_counts: Vec<usize>,
}

impl<T> AdaptOutcome<T> {
    /// Accuracy of always predicting the most frequent training label.
    pub fn majority_baseline(&self) -> f64 {
        let total: usize = self.label_counts.iter().sum();
        let max = self.label_counts.iter().copied().max().unwrap_or(0);
        max as f64 / total.max(1) as f64
    }
}

/// Accuracy of predictions against labels over all layers.
pub fn agreement(labels: &DifficultyLabels, predictions: &DifficultyLabels) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for (l, p) in labels.per_layer.iter().zip(&predictions.per_layer) {
        hit += l.iter().zip(p).filter(|(a, b)| a == b).count();
        total += l.len();
    }
    hit as f64 / total.max(1) as f64
}

/// Fine-tunes MLPs and routers of `base` on random windows of `train`.
pub fn adapt<T: Real>(
    base: &ReorderedModel<T>,
    train: &[usize],
    config: &AdaptConfig,
) -> Result<AdaptOutcome<T>> {
    config.validate()?;
    let mut model = AdaptedModel::from_base(base, config)?;
    if config.seq_len > model.base.config.max_seq_len {
        return Err(Error::config(format!(
            "seq_len {} exceeds the model's max_seq_len {}",
            config.seq_len, model.base.config.max_seq_len
        )));
    }
    let mut sampler = BatchSampler::new(train, config.batch_size, config.seq_len, config.seed)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..Default::default()
    });
    let trainable = |role: ParamRole| config.trains(role);
    let mut log = Vec::with_capacity(config.steps);
    let mut label_counts = vec![0usize; model.num_experts()];
    for step in 0..config.steps {
        let batch = sampler.next_batch();
        let mut g = Graph::new();
        let fwd = adapt_forward(
            &mut g,
            &model,
            &batch,
            config.theta,
            config.routing(),
            &trainable,
        )?;
        let loss = combined_loss(
            &mut g,
            fwd.llm_loss,
            fwd.router_loss,
            config.lambda_llm,
            config.lambda_router,
        )?;
        g.backward(loss)?;
        for labels in &fwd.labels.per_layer {
            for &l in labels {
                label_counts[l] += 1;
            }
        }
        log.push(AdaptLogRow {
            step,
            llm_loss: g.value(fwd.llm_loss).item().as_f64(),
            router_loss: g.value(fwd.router_loss).item().as_f64(),
            router_acc: agreement(&fwd.labels, &fwd.predictions),
        });
        let named = fwd.bound.named;
        for ((name, role, param), (bound_name, var)) in
            model.named_params_mut().into_iter().zip(&named)
        {
            debug_assert_eq!(&name, bound_name);
            if trainable(role) {
                opt.step(&name, param, g.grad(*var))?;
            }
        }
    }
    model.meta.steps = config.steps;
    Ok(AdaptOutcome {
        model,
        log,
        label_counts,
    })
}

/// One independent adaptation per θ from the same reordered base.
pub fn build_family<T: Real>(
    base: &ReorderedModel<T>,
    train: &[usize],
    thetas: &[f64],
    config: &AdaptConfig,
) -> Result<Vec<AdaptOutcome<T>>> {
    if thetas.is_empty() {
        return Err(Error::config("theta list is empty"));
    }
    thetas
        .iter()
        .map(|&theta| {
            let cfg = AdaptConfig {
                theta,
                ..config.clone()
            };
            adapt(base, train, &cfg)
        })
        .collect()
}

/// Writes `step,llm_loss,router_loss,router_acc` rows.
pub fn write_adapt_log(rows: &[AdaptLogRow], mut out: impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "step,llm_loss,router_loss,router_acc")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.step, r.llm_loss, r.router_loss, r.router_acc
        )?;
    }
    Ok(())
}
