//! Shows what importance reordering buys: after moving the most active hidden
//! units to the front, small prefix experts track the full MLP much closer.
//! Reports mean similarity per expert and the label mix at several θ.
//!
//! cargo run --release --example nested_experts -- [pretrain steps]

use difficulty_moe::adapt::reorder_checkpoint;
use difficulty_moe::autodiff::Graph;
use difficulty_moe::config::RunConfig;
use difficulty_moe::corpus::{calibration_batches, eval_batches};
use difficulty_moe::labels::{derive_labels, SimilarityMatrix};
use difficulty_moe::model::DenseModel;
use difficulty_moe::nested::NestedMlp;
use difficulty_moe::pretrain::pretrain;
use difficulty_moe::Tensor;

/// MLP inputs of every layer for one batch.
fn mlp_inputs(
    model: &DenseModel<f32>,
    tokens: &[usize],
    batch: usize,
    seq: usize,
) -> difficulty_moe::Result<Vec<Tensor<f32>>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &|_| false);
    let mut inputs = Vec::new();
    model.trunk(&mut g, &bound, tokens, batch, seq, &mut |g, _, m, blk| {
        inputs.push(g.value(m).clone());
        model.dense_mlp(g, m, blk)
    })?;
    Ok(inputs)
}

fn similarities(
    model: &DenseModel<f32>,
    layer: usize,
    x: &Tensor<f32>,
) -> difficulty_moe::Result<SimilarityMatrix> {
    let blk = &model.blocks[layer];
    let mlp = NestedMlp::new(
        blk.w_in.clone(),
        blk.w_out.clone(),
        4,
        model.config.activation,
    )?;
    SimilarityMatrix::from_outputs(&mlp.all_expert_outputs(x)?)
}

fn column_means(s: &SimilarityMatrix) -> Vec<f64> {
    (0..s.experts)
        .map(|e| (0..s.rows).map(|b| s.row(b)[e]).sum::<f64>() / s.rows as f64)
        .collect()
}

fn main() -> difficulty_moe::Result<()> {
    let steps = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(300);
    let mut cfg = RunConfig::default();
    cfg.pretrain.steps = steps;
    let corpus = cfg.load_corpus(None)?;
    let dense = pretrain::<f32>(
        &corpus.train,
        cfg.model_config(corpus.vocab.size()),
        &cfg.pretrain_config(),
    )?
    .model;
    let calib = calibration_batches(&corpus.train, cfg.reorder.calib_fraction, 8, 64, cfg.seed)?;
    let reordered = reorder_checkpoint(&dense, &calib)?;
    println!(
        "widths {:?}, calibration windows {}",
        difficulty_moe::nested::expert_widths(512, 4)?,
        calib.len() * 8
    );

    let batch = &eval_batches(&corpus.heldout, 8, 64, Some(8))[0];
    let inputs = mlp_inputs(&dense, &batch.tokens, batch.batch, batch.seq)?;
    for (layer, x) in inputs.iter().enumerate() {
        let before = similarities(&dense, layer, x)?;
        let after = similarities(&reordered.model, layer, x)?;
        let fmt = |v: Vec<f64>| {
            v.iter()
                .map(|s| format!("{s:6.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        println!(
            "layer {layer}  mean S  original {}  reordered {}",
            fmt(column_means(&before)),
            fmt(column_means(&after))
        );
        for theta in [0.7, 0.8, 0.9] {
            let labels = derive_labels(&after, theta)?;
            let mut counts = [0usize; 4];
            labels.iter().for_each(|&l| counts[l] += 1);
            println!("         theta {theta}: label counts {counts:?}");
        }
    }
    Ok(())
}
