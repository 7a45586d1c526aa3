//! Central finite-difference checks of every differentiable graph op and of
//! the composite losses, in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapt::{
    adapt_forward, combined_loss, AdaptConfig, AdaptedModel, ReorderedModel, Routing,
};
use crate::autodiff::{Activation, Graph, Var};
use crate::corpus::TokenBatch;
use crate::error::Result;
use crate::labels::DifficultyLabels;
use crate::model::{lm_loss, DenseModel, ModelConfig, ParamRole};
use crate::nested::{expert_widths, nested_mlp};
use crate::router::{router_forward, RouterConfig, RouterNonlinearity};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Values bounded away from zero so kinks stay out of reach of the step.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape, 1.0).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// Contracts a tensor to a scalar with fixed random weights so every output
/// element contributes a distinct amount.
fn reduce(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Compares backward against central differences for a loss built from
/// `inputs`, all of which are differentiated.
pub fn check_op(inputs: &[Tensor<f64>], build: &Build<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match g.grad(*v) {
            Some(gr) => analytic.extend_from_slice(gr),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Records a model loss and returns it with the handles of the checked tensors.
pub type ModelLoss<'a, M> = dyn Fn(&mut Graph<f64>, &M) -> Result<(Var, Vec<Var>)> + 'a;
/// Objective differentiated numerically for the parameter at the given index.
pub type NumericLoss<'a, M> = dyn Fn(&mut Graph<f64>, &M, usize) -> Result<Var> + 'a;

/// Like [`check_op`] for a whole model: `loss` returns the loss and the
/// graph handles of the tensors `params` exposes, in the same order.
pub fn check_params<M: Clone>(
    model: &M,
    params: fn(&mut M) -> Vec<&mut Tensor<f64>>,
    loss: &ModelLoss<'_, M>,
) -> Result<f64> {
    check_params_with(model, params, loss, &|g, m, _| Ok(loss(g, m)?.0))
}

/// [`check_params`] with a separate numeric objective per parameter index,
/// for losses that stop gradients on purpose.
pub fn check_params_with<M: Clone>(
    model: &M,
    params: fn(&mut M) -> Vec<&mut Tensor<f64>>,
    loss: &ModelLoss<'_, M>,
    numeric_loss: &NumericLoss<'_, M>,
) -> Result<f64> {
    let mut g = Graph::new();
    let (l, vars) = loss(&mut g, model)?;
    g.backward(l)?;
    let mut probe = model.clone();
    let sizes: Vec<usize> = params(&mut probe).iter().map(|t| t.numel()).collect();
    let mut analytic = Vec::new();
    for (v, n) in vars.iter().zip(&sizes) {
        match g.grad(*v) {
            Some(gr) => analytic.extend_from_slice(gr),
            None => analytic.extend(std::iter::repeat_n(0.0, *n)),
        }
    }
    let eval = |m: &M, p: usize| -> Result<f64> {
        let mut g = Graph::new();
        let l = numeric_loss(&mut g, m, p)?;
        Ok(g.value(l).item())
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    for (p, &n) in sizes.iter().enumerate() {
        for j in 0..n {
            let x = params(&mut probe)[p].data()[j];
            params(&mut probe)[p].data_mut()[j] = x + FD_STEP;
            let up = eval(&probe, p)?;
            params(&mut probe)[p].data_mut()[j] = x - FD_STEP;
            let down = eval(&probe, p)?;
            params(&mut probe)[p].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

fn dense_params(m: &mut DenseModel<f64>) -> Vec<&mut Tensor<f64>> {
    m.named_params_mut()
        .into_iter()
        .map(|(_, _, t)| t)
        .collect()
}

fn adapted_params(m: &mut AdaptedModel<f64>) -> Vec<&mut Tensor<f64>> {
    m.named_params_mut()
        .into_iter()
        .map(|(_, _, t)| t)
        .collect()
}

/// A tiny model with every weight redrawn at unit scale so the losses are
/// far from linear.
fn tiny_model(rng: &mut ChaCha8Rng) -> Result<DenseModel<f64>> {
    let mut m = DenseModel::init(ModelConfig {
        vocab_size: 5,
        embed_dim: 4,
        hidden_dim: 8,
        num_layers: 2,
        num_heads: 2,
        max_seq_len: 4,
        activation: Activation::Silu,
        seed: 1,
    })?;
    for (_, _, t) in m.named_params_mut() {
        let shape = t.shape().to_vec();
        *t = random(rng, &shape, 0.7);
    }
    Ok(m)
}

/// Runs every check and returns `(name, relative error)` pairs.
pub fn check_gradients(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Vec::new();
    let mut push = |name: &str, err: f64| report.push((name.to_string(), err));

    let a = random(&mut rng, &[3, 4], 1.0);
    let b = random(&mut rng, &[4, 2], 1.0);
    let w32 = random(&mut rng, &[3, 2], 1.0);
    push(
        "matmul",
        check_op(&[a.clone(), b], &|g, v| {
            let y = g.matmul(v[0], v[1])?;
            reduce(g, y, &w32)
        })?,
    );

    let w = random(&mut rng, &[5, 4], 1.0);
    let w35 = random(&mut rng, &[3, 5], 1.0);
    push(
        "linear",
        check_op(&[a.clone(), w], &|g, v| {
            let y = g.linear(v[0], v[1])?;
            reduce(g, y, &w35)
        })?,
    );

    let a2 = random(&mut rng, &[3, 4], 1.0);
    let w34 = random(&mut rng, &[3, 4], 1.0);
    push(
        "add",
        check_op(&[a.clone(), a2.clone()], &|g, v| {
            let y = g.add(v[0], v[1])?;
            reduce(g, y, &w34)
        })?,
    );
    push(
        "mul",
        check_op(&[a.clone(), a2], &|g, v| {
            let y = g.mul(v[0], v[1])?;
            reduce(g, y, &w34)
        })?,
    );
    push(
        "scale",
        check_op(std::slice::from_ref(&a), &|g, v| {
            let y = g.scale(v[0], -1.7);
            reduce(g, y, &w34)
        })?,
    );
    push(
        "sum",
        check_op(std::slice::from_ref(&a), &|g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        })?,
    );
    push(
        "silu",
        check_op(std::slice::from_ref(&a), &|g, v| {
            let y = g.activation(v[0], Activation::Silu);
            reduce(g, y, &w34)
        })?,
    );
    push(
        "relu",
        check_op(&[off_zero(&mut rng, &[3, 4])], &|g, v| {
            let y = g.activation(v[0], Activation::Relu);
            reduce(g, y, &w34)
        })?,
    );

    let scale = random(&mut rng, &[4], 1.0);
    push(
        "rms_norm",
        check_op(&[a.clone(), scale], &|g, v| {
            let y = g.rms_norm(v[0], v[1], 1e-5)?;
            reduce(g, y, &w34)
        })?,
    );

    let table = random(&mut rng, &[5, 3], 1.0);
    let w43 = random(&mut rng, &[4, 3], 1.0);
    push(
        "embedding",
        check_op(&[table], &|g, v| {
            let y = g.embedding(v[0], &[0, 2, 2, 4])?;
            reduce(g, y, &w43)
        })?,
    );

    let x43 = random(&mut rng, &[4, 3], 1.0);
    let w33 = random(&mut rng, &[3, 3], 1.0);
    push(
        "select_rows",
        check_op(&[x43], &|g, v| {
            let y = g.select_rows(v[0], &[3, 0, 3])?;
            reduce(g, y, &w33)
        })?,
    );

    let logits = random(&mut rng, &[4, 5], 2.0);
    push(
        "cross_entropy",
        check_op(std::slice::from_ref(&logits), &|g, v| {
            g.cross_entropy(v[0], &[1, 4, 0, 1])
        })?,
    );

    let w4 = random(&mut rng, &[4], 1.0);
    push(
        "softmax_pick",
        check_op(&[logits], &|g, v| {
            let p = g.softmax_pick(v[0], &[2, 0, 4, 4])?;
            reduce(g, p, &w4)
        })?,
    );

    let s3 = random(&mut rng, &[3], 1.0);
    push(
        "scale_rows",
        check_op(&[a.clone(), s3], &|g, v| {
            let y = g.scale_rows(v[0], v[1])?;
            reduce(g, y, &w34)
        })?,
    );

    let qkv: Vec<Tensor<f64>> = (0..3).map(|_| random(&mut rng, &[6, 4], 1.0)).collect();
    let w64 = random(&mut rng, &[6, 4], 1.0);
    push(
        "causal_attention",
        check_op(&qkv, &|g, v| {
            let y = g.causal_attention(v[0], v[1], v[2], 2, 3, 2)?;
            reduce(g, y, &w64)
        })?,
    );

    let widths = expert_widths(6, 3)?;
    let x = random(&mut rng, &[5, 4], 1.0);
    let w_in = random(&mut rng, &[6, 4], 1.0);
    let w_out = random(&mut rng, &[4, 6], 1.0);
    let w54 = random(&mut rng, &[5, 4], 1.0);
    push(
        "nested_mlp",
        check_op(&[x.clone(), w_in, w_out], &|g, v| {
            let y = nested_mlp(g, v[0], v[1], v[2], &widths, Activation::Silu, |_| {
                Ok(vec![0, 2, 1, 2, 0])
            })?;
            reduce(g, y, &w54)
        })?,
    );

    let w1 = random(&mut rng, &[6, 4], 1.0);
    let w2 = random(&mut rng, &[3, 6], 1.0);
    push(
        "router",
        check_op(&[x, w1, w2], &|g, v| {
            let z = router_forward(g, v[0], v[1], v[2], RouterNonlinearity::Relu)?;
            g.cross_entropy(z, &[0, 2, 1, 1, 2])
        })?,
    );

    let dense = tiny_model(&mut rng)?;
    let batch = TokenBatch {
        tokens: vec![0, 3, 1, 4, 2, 2, 4, 1],
        batch: 2,
        seq: 4,
    };
    push(
        "dense lm_loss",
        check_params(&dense, dense_params, &|g, m| {
            let (bound, logits) =
                m.forward_graph(g, &batch.tokens, batch.batch, batch.seq, &|_| true)?;
            let l = lm_loss(g, logits, &batch.tokens, batch.batch, batch.seq)?;
            Ok((l, bound.named.iter().map(|(_, v)| *v).collect()))
        })?,
    );

    let base = ReorderedModel {
        model: dense,
        scores: Vec::new(),
    };
    let cfg = AdaptConfig {
        num_experts: 4,
        router: RouterConfig {
            hidden: 6,
            nonlinearity: RouterNonlinearity::Relu,
        },
        ..Default::default()
    };
    let mut adapted = AdaptedModel::from_base(&base, &cfg)?;
    for r in &mut adapted.routers {
        r.w1 = random(&mut rng, r.w1.shape(), 0.8);
        r.w2 = random(&mut rng, r.w2.shape(), 0.8);
    }
    let mut fixed = DifficultyLabels::new(4, 2);
    for layer in &mut fixed.per_layer {
        *layer = (0..8).map(|_| rng.gen_range(0..4)).collect();
    }
    // Routers read a detached copy of their input, so the router loss only
    // differentiates the router weights; everything else sees λ_llm · L_llm.
    let router_param: Vec<bool> = adapted
        .named_params()
        .iter()
        .map(|(_, role, _)| *role == ParamRole::Router)
        .collect();
    push(
        "combined loss",
        check_params_with(
            &adapted,
            adapted_params,
            &|g, m| {
                let f = adapt_forward(g, m, &batch, 0.8, Routing::Fixed(&fixed), &|_| true)?;
                let l = combined_loss(g, f.llm_loss, f.router_loss, 0.2, 1.0)?;
                Ok((l, f.bound.named.iter().map(|(_, v)| *v).collect()))
            },
            &|g, m, p| {
                let f = adapt_forward(g, m, &batch, 0.8, Routing::Fixed(&fixed), &|_| true)?;
                let lambda_router = if router_param[p] { 1.0 } else { 0.0 };
                combined_loss(g, f.llm_loss, f.router_loss, 0.2, lambda_router)
            },
        )?,
    );

    push(
        "ablation loss",
        check_params(&adapted, adapted_params, &|g, m| {
            let f = adapt_forward(g, m, &batch, 0.8, Routing::Predicted, &|_| true)?;
            let l = combined_loss(g, f.llm_loss, f.router_loss, 1.0, 0.0)?;
            Ok((l, f.bound.named.iter().map(|(_, v)| *v).collect()))
        })?,
    );

    Ok(report)
}
