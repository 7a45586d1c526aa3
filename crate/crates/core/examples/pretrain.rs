//! Pretrains the dense base model on the synthetic corpus and reports the
//! held-out loss against the uniform baseline `ln V`.
//!
//! cargo run --release --example pretrain -- [steps]

use std::time::Instant;

use difficulty_moe::config::RunConfig;
use difficulty_moe::pretrain::{heldout_loss, pretrain};

fn main() -> difficulty_moe::Result<()> {
    let steps = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(300);
    let mut cfg = RunConfig::default();
    cfg.pretrain.steps = steps;
    let corpus = cfg.load_corpus(None)?;
    println!(
        "corpus: {} train / {} held-out tokens, vocab {}",
        corpus.train.len(),
        corpus.heldout.len(),
        corpus.vocab.size()
    );
    let start = Instant::now();
    let out = pretrain::<f32>(
        &corpus.train,
        cfg.model_config(corpus.vocab.size()),
        &cfg.pretrain_config(),
    )?;
    let elapsed = start.elapsed();
    for (step, loss) in out.curve.iter().step_by((steps / 10).max(1)) {
        println!("step {step:5}  loss {loss:.4}");
    }
    let held = heldout_loss(&out.model, &corpus.heldout, 64, Some(64))?;
    let ln_v = (corpus.vocab.size() as f64).ln();
    println!(
        "{steps} steps in {:.1}s ({:.1} ms/step); held-out loss {held:.4} = {:.3} ln V",
        elapsed.as_secs_f64(),
        elapsed.as_secs_f64() * 1e3 / steps.max(1) as f64,
        held / ln_v
    );
    Ok(())
}
