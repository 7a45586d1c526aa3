//! Router diagnostics for one adapted model: confusion matrix against the
//! derived labels, per-layer expert usage and entropy, and the same usage
//! for the ablated variant trained without router loss.
//!
//! cargo run --release --example analyze -- [pretrain steps] [adapt steps]

use difficulty_moe::adapt::{adapt, reorder_checkpoint, AdaptConfig};
use difficulty_moe::analysis::{analyze, expert_usage};
use difficulty_moe::config::RunConfig;
use difficulty_moe::corpus::{calibration_batches, eval_batches};
use difficulty_moe::pretrain::pretrain;

fn main() -> difficulty_moe::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse().ok());
    let mut cfg = RunConfig::default();
    cfg.pretrain.steps = args.next().flatten().unwrap_or(300);
    cfg.adapt.steps = args.next().flatten().unwrap_or(200);
    let corpus = cfg.load_corpus(None)?;
    let dense = pretrain::<f32>(
        &corpus.train,
        cfg.model_config(corpus.vocab.size()),
        &cfg.pretrain_config(),
    )?
    .model;
    let calib = calibration_batches(&corpus.train, cfg.reorder.calib_fraction, 8, 64, cfg.seed)?;
    let base = reorder_checkpoint(&dense, &calib)?;
    let eval = eval_batches(&corpus.heldout, 8, 64, Some(32));

    let adapted = adapt(&base, &corpus.train, &cfg.adapt_config())?.model;
    let report = analyze(&adapted, &eval, adapted.meta.theta)?;
    println!("confusion (rows: derived label, columns: router prediction)");
    for (row, dominant) in report
        .confusion
        .row_normalized()
        .iter()
        .zip(report.confusion.diagonal_dominance())
    {
        let cells: Vec<String> = row.iter().map(|p| format!("{p:5.2}")).collect();
        println!("  {}   diagonal max: {dominant:?}", cells.join(" "));
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&report.metrics).expect("plain data")
    );

    let ablated_cfg = AdaptConfig {
        ablation_mode: true,
        lambda_router: 0.0,
        ..cfg.adapt_config()
    };
    let ablated = adapt(&base, &corpus.train, &ablated_cfg)?.model;
    let usage = expert_usage(&ablated, &eval)?;
    for (layer, (with, without)) in report
        .usage
        .fractions
        .iter()
        .zip(&usage.fractions)
        .enumerate()
    {
        println!("layer {layer}: router loss {with:.3?}  ablated {without:.3?}");
    }
    println!(
        "mean usage entropy: router loss {:.4}, ablated {:.4}",
        report.usage.mean_entropy(),
        usage.mean_entropy()
    );
    Ok(())
}
