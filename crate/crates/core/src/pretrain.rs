//! Dense pretraining of the base model on a character corpus.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::corpus::{eval_batches, BatchSampler};
use crate::error::{Error, Result};
use crate::model::{lm_loss, DenseModel, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            seq_len: 64,
            lr: 3e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

pub struct PretrainOutcome<T> {
    pub model: DenseModel<T>,
    /// `(step, training loss)` for every step.
    pub curve: Vec<(usize, f64)>,
}

pub fn pretrain<T: Real>(
    train: &[usize],
    model_config: ModelConfig,
    config: &PretrainConfig,
) -> Result<PretrainOutcome<T>> {
    if config.seq_len < 2 {
        return Err(Error::config("seq_len must be at least 2"));
    }
    if config.seq_len > model_config.max_seq_len {
        return Err(Error::config(format!(
            "seq_len {} exceeds max_seq_len {}",
            config.seq_len, model_config.max_seq_len
        )));
    }
    let mut model = DenseModel::<T>::init(model_config)?;
    let mut sampler = BatchSampler::new(train, config.batch_size, config.seq_len, config.seed)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..Default::default()
    });
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sampler.next_batch();
        let mut g = Graph::new();
        let (bound, logits) =
            model.forward_graph(&mut g, &batch.tokens, batch.batch, batch.seq, &|_| true)?;
        let loss = lm_loss(&mut g, logits, &batch.tokens, batch.batch, batch.seq)?;
        g.backward(loss)?;
        curve.push((step, g.value(loss).item().as_f64()));
        for ((name, _, param), (_, var)) in model.named_params_mut().into_iter().zip(&bound.named) {
            opt.step(&name, param, g.grad(*var))?;
        }
    }
    Ok(PretrainOutcome { model, curve })
}

/// Mean next-token loss of the dense model over non-overlapping windows.
pub fn heldout_loss<T: Real>(
    model: &DenseModel<T>,
    tokens: &[usize],
    seq: usize,
    max_windows: Option<usize>,
) -> Result<f64> {
    let batches = eval_batches(tokens, 8, seq, max_windows);
    if batches.is_empty() {
        return Err(Error::config("held-out split is shorter than one window"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for b in &batches {
        let mut g = Graph::new();
        let (_, logits) = model.forward_graph(&mut g, &b.tokens, b.batch, b.seq, &|_| false)?;
        let loss = lm_loss(&mut g, logits, &b.tokens, b.batch, b.seq)?;
        let n = b.batch * (b.seq - 1);
        total += g.value(loss).item().as_f64() * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

pub fn write_loss_csv(curve: &[(usize, f64)], mut out: impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "step,loss")?;
    for (s, l) in curve {
        writeln!(out, "{s},{l}")?;
    }
    Ok(())
}
