//! Tiny pre-norm decoder-only transformer used as the dense base model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::nested::nested_mlp;
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Which kind of weight a parameter is; drives freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Embedding,
    Norm,
    Attention,
    Mlp,
    Head,
    Router,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    /// H × D
    pub w_in: Tensor<T>,
    /// D × H
    pub w_out: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseModel<T> {
    pub config: ModelConfig,
    pub embed: Tensor<T>,
    pub pos: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Tensor<T>,
    pub head: Tensor<T>,
}

/// Graph handles of one block's weights.
#[derive(Debug, Clone, Copy)]
pub struct BoundBlock {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w_in: Var,
    pub w_out: Var,
}

/// A model's weights recorded as leaves on a graph.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub embed: Var,
    pub pos: Var,
    pub blocks: Vec<BoundBlock>,
    pub final_norm: Var,
    pub head: Var,
    /// Every bound parameter by checkpoint name.
    pub named: Vec<(String, Var)>,
}

fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::cast(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Computes one block's MLP inside [`DenseModel::trunk`].
pub type MlpHook<'a, T> = dyn FnMut(&mut Graph<T>, usize, Var, &BoundBlock) -> Result<Var> + 'a;

impl<T: Real> DenseModel<T> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let out_std = INIT_STD / (2.0 * config.num_layers as f64).sqrt();
        let embed = normal(&mut rng, &[v, d], INIT_STD);
        let pos = normal(&mut rng, &[config.max_seq_len, d], INIT_STD);
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                attn_norm: Tensor::full(&[d], T::one()),
                wq: normal(&mut rng, &[d, d], INIT_STD),
                wk: normal(&mut rng, &[d, d], INIT_STD),
                wv: normal(&mut rng, &[d, d], INIT_STD),
                wo: normal(&mut rng, &[d, d], out_std),
                mlp_norm: Tensor::full(&[d], T::one()),
                w_in: normal(&mut rng, &[h, d], INIT_STD),
                w_out: normal(&mut rng, &[d, h], out_std),
            })
            .collect();
        let final_norm = Tensor::full(&[d], T::one());
        let head = normal(&mut rng, &[v, d], INIT_STD);
        Ok(Self {
            config,
            embed,
            pos,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn named_params(&self) -> Vec<(String, ParamRole, &Tensor<T>)> {
        let mut out = vec![
            ("embed".to_string(), ParamRole::Embedding, &self.embed),
            ("pos".to_string(), ParamRole::Embedding, &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                (p("attn_norm"), ParamRole::Norm, &b.attn_norm),
                (p("wq"), ParamRole::Attention, &b.wq),
                (p("wk"), ParamRole::Attention, &b.wk),
                (p("wv"), ParamRole::Attention, &b.wv),
                (p("wo"), ParamRole::Attention, &b.wo),
                (p("mlp_norm"), ParamRole::Norm, &b.mlp_norm),
                (p("w_in"), ParamRole::Mlp, &b.w_in),
                (p("w_out"), ParamRole::Mlp, &b.w_out),
            ]);
        }
        out.push(("final_norm".to_string(), ParamRole::Norm, &self.final_norm));
        out.push(("head".to_string(), ParamRole::Head, &self.head));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, ParamRole, &mut Tensor<T>)> {
        let mut out = vec![
            ("embed".to_string(), ParamRole::Embedding, &mut self.embed),
            ("pos".to_string(), ParamRole::Embedding, &mut self.pos),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                (p("attn_norm"), ParamRole::Norm, &mut b.attn_norm),
                (p("wq"), ParamRole::Attention, &mut b.wq),
                (p("wk"), ParamRole::Attention, &mut b.wk),
                (p("wv"), ParamRole::Attention, &mut b.wv),
                (p("wo"), ParamRole::Attention, &mut b.wo),
                (p("mlp_norm"), ParamRole::Norm, &mut b.mlp_norm),
                (p("w_in"), ParamRole::Mlp, &mut b.w_in),
                (p("w_out"), ParamRole::Mlp, &mut b.w_out),
            ]);
        }
        out.push((
            "final_norm".to_string(),
            ParamRole::Norm,
            &mut self.final_norm,
        ));
        out.push(("head".to_string(), ParamRole::Head, &mut self.head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, _, t)| t.numel()).sum()
    }

    /// Parameters of all MLP layers (the part nested experts slice).
    pub fn mlp_param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.w_in.numel() + b.w_out.numel())
            .sum()
    }

    /// Records every weight on `g`; `trainable` decides which get gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: &dyn Fn(ParamRole) -> bool) -> BoundModel {
        let mut named = Vec::new();
        let mut leaf = |g: &mut Graph<T>, name: String, role: ParamRole, t: &Tensor<T>| {
            let v = g.leaf(t.clone(), trainable(role));
            named.push((name, v));
            v
        };
        let embed = leaf(g, "embed".into(), ParamRole::Embedding, &self.embed);
        let pos = leaf(g, "pos".into(), ParamRole::Embedding, &self.pos);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let p = |n: &str| format!("layers.{i}.{n}");
                BoundBlock {
                    attn_norm: leaf(g, p("attn_norm"), ParamRole::Norm, &b.attn_norm),
                    wq: leaf(g, p("wq"), ParamRole::Attention, &b.wq),
                    wk: leaf(g, p("wk"), ParamRole::Attention, &b.wk),
                    wv: leaf(g, p("wv"), ParamRole::Attention, &b.wv),
                    wo: leaf(g, p("wo"), ParamRole::Attention, &b.wo),
                    mlp_norm: leaf(g, p("mlp_norm"), ParamRole::Norm, &b.mlp_norm),
                    w_in: leaf(g, p("w_in"), ParamRole::Mlp, &b.w_in),
                    w_out: leaf(g, p("w_out"), ParamRole::Mlp, &b.w_out),
                }
            })
            .collect();
        let final_norm = leaf(g, "final_norm".into(), ParamRole::Norm, &self.final_norm);
        let head = leaf(g, "head".into(), ParamRole::Head, &self.head);
        BoundModel {
            embed,
            pos,
            blocks,
            final_norm,
            head,
            named,
        }
    }

    /// Runs the transformer over `batch` sequences of length `seq` laid out
    /// row-major in `tokens`, delegating each block's MLP to `mlp`. The hook
    /// receives the layer index, the normalised MLP input `(batch·seq) × D`
    /// and the block's bound weights. Returns logits `(batch·seq) × V`.
    pub fn trunk(
        &self,
        g: &mut Graph<T>,
        bound: &BoundModel,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        mlp: &mut MlpHook<'_, T>,
    ) -> Result<Var> {
        check_tokens(&self.config, tokens, batch, seq)?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let tok = g.embedding(bound.embed, tokens)?;
        let pos = g.embedding(bound.pos, &positions)?;
        let mut x = g.add(tok, pos)?;
        for (layer, blk) in bound.blocks.iter().enumerate() {
            let a = g.rms_norm(x, blk.attn_norm, NORM_EPS)?;
            let q = g.linear(a, blk.wq)?;
            let k = g.linear(a, blk.wk)?;
            let v = g.linear(a, blk.wv)?;
            let att = g.causal_attention(q, k, v, batch, seq, self.config.num_heads)?;
            let o = g.linear(att, blk.wo)?;
            x = g.add(x, o)?;
            let m = g.rms_norm(x, blk.mlp_norm, NORM_EPS)?;
            let y = mlp(g, layer, m, blk)?;
            x = g.add(x, y)?;
        }
        let h = g.rms_norm(x, bound.final_norm, NORM_EPS)?;
        g.linear(h, bound.head)
    }

    /// Full-width MLP step for [`DenseModel::trunk`].
    pub fn dense_mlp(&self, g: &mut Graph<T>, m: Var, blk: &BoundBlock) -> Result<Var> {
        let rows = g.value(m).shape()[0];
        let widths = [self.config.hidden_dim];
        nested_mlp(
            g,
            m,
            blk.w_in,
            blk.w_out,
            &widths,
            self.config.activation,
            |_| Ok(vec![0; rows]),
        )
    }

    /// Dense logits on `g` with the given trainable set.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        trainable: &dyn Fn(ParamRole) -> bool,
    ) -> Result<(BoundModel, Var)> {
        let bound = self.bind(g, trainable);
        let logits = self.trunk(g, &bound, tokens, batch, seq, &mut |g, _, m, blk| {
            self.dense_mlp(g, m, blk)
        })?;
        Ok((bound, logits))
    }

    /// Dense forward pass without gradients; returns logits `batch × seq × V`.
    pub fn forward_dense(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (_, logits) = self.forward_graph(&mut g, tokens, batch, seq, &|_| false)?;
        let v = self.config.vocab_size;
        g.value(logits).clone().reshape(&[batch, seq, v])
    }
}

pub(crate) fn check_tokens(
    config: &ModelConfig,
    tokens: &[usize],
    batch: usize,
    seq: usize,
) -> Result<()> {
    if tokens.len() != batch * seq {
        return Err(Error::Shape {
            op: "tokens",
            lhs: vec![tokens.len()],
            rhs: vec![batch, seq],
        });
    }
    if seq > config.max_seq_len {
        return Err(Error::Index {
            what: "sequence length",
            index: seq,
            limit: config.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Index {
            what: "token id",
            index: bad,
            limit: config.vocab_size,
        });
    }
    Ok(())
}

/// Row indices that have a next token, and those next tokens.
pub fn next_token_targets(tokens: &[usize], batch: usize, seq: usize) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::with_capacity(batch * seq.saturating_sub(1));
    let mut targets = Vec::with_capacity(rows.capacity());
    for b in 0..batch {
        for t in 0..seq.saturating_sub(1) {
            rows.push(b * seq + t);
            targets.push(tokens[b * seq + t + 1]);
        }
    }
    (rows, targets)
}

/// Next-token cross entropy averaged over `batch × (seq − 1)` positions.
pub fn lm_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    tokens: &[usize],
    batch: usize,
    seq: usize,
) -> Result<Var> {
    if seq < 2 {
        return Err(Error::contract(format!(
            "language-model loss needs sequences of at least 2 tokens, got {seq}"
        )));
    }
    let (rows, targets) = next_token_targets(tokens, batch, seq);
    let picked = g.select_rows(logits, &rows)?;
    g.cross_entropy(picked, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(v: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: v,
            embed_dim: 8,
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 8,
            activation: Activation::Silu,
            seed: 3,
        }
    }

    #[test]
    fn logits_have_batch_seq_vocab_shape() {
        let m = DenseModel::<f64>::init(tiny(5)).unwrap();
        let tokens = [0, 1, 2, 3, 4, 0, 1, 2];
        let out = m.forward_dense(&tokens, 2, 4).unwrap();
        assert_eq!(out.shape(), &[2, 4, 5]);
    }

    #[test]
    fn untrained_loss_is_near_log_vocab() {
        let m = DenseModel::<f64>::init(tiny(11)).unwrap();
        let tokens: Vec<usize> = (0..16).map(|i| (i * 7) % 11).collect();
        let mut g = Graph::new();
        let (_, logits) = m.forward_graph(&mut g, &tokens, 2, 8, &|_| false).unwrap();
        let loss = lm_loss(&mut g, logits, &tokens, 2, 8).unwrap();
        assert!((g.value(loss).item() - 11f64.ln()).abs() < 0.05);
    }

    #[test]
    fn identical_sequences_give_identical_rows() {
        let m = DenseModel::<f32>::init(tiny(6)).unwrap();
        let tokens = [1, 5, 2, 0, 1, 5, 2, 0];
        let out = m.forward_dense(&tokens, 2, 4).unwrap();
        let (a, b) = out.data().split_at(4 * 6);
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let m = DenseModel::<f32>::init(tiny(4)).unwrap();
        let err = m.forward_dense(&[0, 4], 1, 2).unwrap_err();
        assert!(matches!(err, Error::Index { .. }));
    }

    #[test]
    fn perturbing_a_token_only_changes_later_positions() {
        let m = DenseModel::<f64>::init(tiny(7)).unwrap();
        let a = [1, 2, 3, 4, 5, 6];
        let mut b = a;
        b[3] = 0;
        let la = m.forward_dense(&a, 1, 6).unwrap();
        let lb = m.forward_dense(&b, 1, 6).unwrap();
        for t in 0..6 {
            let ra = &la.data()[t * 7..(t + 1) * 7];
            let rb = &lb.data()[t * 7..(t + 1) * 7];
            if t < 3 {
                assert_eq!(ra, rb, "position {t} changed");
            } else {
                assert_ne!(ra, rb, "position {t} unchanged");
            }
        }
    }

    #[test]
    fn lm_loss_needs_two_tokens() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            lm_loss(&mut g, z, &[0], 1, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn lm_loss_hand_case() {
        // B=1, T=3, V=2; positions 0 and 1 predict tokens 1 and 0.
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_rows(&[
            vec![0.0, 1.0],
            vec![2.0, 0.0],
            vec![5.0, 5.0],
        ]));
        let loss = lm_loss(&mut g, z, &[0, 1, 0], 1, 3).unwrap();
        let ce0 = -(1f64.exp() / (1.0 + 1f64.exp())).ln();
        let ce1 = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((g.value(loss).item() - (ce0 + ce1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_and_one_hot_losses() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[4, 9]));
        let loss = lm_loss(&mut g, z, &[1, 2, 3, 4], 1, 4).unwrap();
        assert!((g.value(loss).item() - 9f64.ln()).abs() < 1e-12);

        let tokens = [0, 2, 1];
        let mut rows = vec![vec![0.0; 3]; 3];
        rows[0][2] = 80.0;
        rows[1][1] = 80.0;
        let z = g.constant(Tensor::from_rows(&rows));
        let loss = lm_loss(&mut g, z, &tokens, 1, 3).unwrap();
        assert!(g.value(loss).item() < 1e-12);
    }

    #[test]
    fn invalid_head_split_is_rejected() {
        let mut c = tiny(4);
        c.num_heads = 3;
        assert!(matches!(DenseModel::<f32>::init(c), Err(Error::Config(_))));
    }
}
