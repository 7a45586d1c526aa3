//! Pretrains briefly, reorders, then adapts one model per θ with teacher
//! forcing and the combined loss. Prints the router's training curve and the
//! compute each θ ends up spending on held-out text.
//!
//! cargo run --release --example adapt_family -- [pretrain steps] [adapt steps]

use difficulty_moe::adapt::{build_family, reorder_checkpoint};
use difficulty_moe::analysis::{activated_params, full_params, perplexity, EvalMode};
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

    for outcome in build_family(&base, &corpus.train, &cfg.adapt.thetas, &cfg.adapt_config())? {
        let m = &outcome.model;
        println!("theta {}", m.meta.theta);
        for row in outcome.log.iter().step_by((outcome.log.len() / 5).max(1)) {
            println!(
                "  step {:5}  llm {:.4}  router {:.4}  acc {:.3}",
                row.step, row.llm_loss, row.router_loss, row.router_acc
            );
        }
        println!(
            "  training majority {:.3}; activated params {:.0} of {}; ppl routed {:.3}, full width {:.3}",
            outcome.majority_baseline(),
            activated_params(m, &eval)?,
            full_params(m),
            perplexity(m, &eval, EvalMode::Routed)?,
            perplexity(m, &eval, EvalMode::Dense)?,
        );
    }
    Ok(())
}
