//! Writes a dense and an adapted checkpoint, prints the manifest of the
//! adapted one, reloads both and confirms the bytes survive a round trip.
//!
//! cargo run --release --example checkpoint -- [dir]

use difficulty_moe::adapt::{AdaptConfig, AdaptedModel, ReorderedModel};
use difficulty_moe::autodiff::Activation;
use difficulty_moe::checkpoint::{split_container, Checkpoint, LoadedModel};
use difficulty_moe::corpus::Vocab;
use difficulty_moe::model::{DenseModel, ModelConfig};

fn main() -> difficulty_moe::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(std::env::temp_dir);
    let vocab = Vocab::from_text("nested experts route tokens by difficulty");
    let dense = DenseModel::<f32>::init(ModelConfig {
        vocab_size: vocab.size(),
        embed_dim: 16,
        hidden_dim: 32,
        num_layers: 2,
        num_heads: 2,
        max_seq_len: 16,
        activation: Activation::Silu,
        seed: 0,
    })?;
    let base = ReorderedModel {
        model: dense.clone(),
        scores: Vec::new(),
    };
    let adapted = AdaptedModel::from_base(&base, &AdaptConfig::default())?;

    for (name, model) in [
        ("dense.ckpt", LoadedModel::Dense(dense)),
        ("adapted.ckpt", LoadedModel::Adapted(adapted, Vec::new())),
    ] {
        let path = dir.join(name);
        let ck = Checkpoint::new(model, Some(vocab.clone()));
        ck.save(&path)?;
        let bytes = std::fs::read(&path).expect("just written");
        let again = Checkpoint::<f32>::load(&path)?.to_bytes()?;
        let (manifest, payload) = split_container(&bytes)?;
        println!(
            "{}: {:?}, {} tensors, {} payload bytes, round trip identical: {}",
            path.display(),
            manifest.kind,
            manifest.tensors.len(),
            payload.len(),
            again == bytes
        );
        if name == "adapted.ckpt" {
            for t in manifest.tensors.iter().rev().take(4).rev() {
                println!(
                    "  {:<16} {:?} {:?} @{} +{}",
                    t.name, t.dtype, t.shape, t.offset, t.length
                );
            }
        }
    }
    Ok(())
}
