//! Per-layer difficulty router: `D → U → E` without biases.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{linear_forward, Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Nonlinearity between the two router projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RouterNonlinearity {
    #[default]
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterConfig {
    /// Width `U` of the router's hidden projection.
    pub hidden: usize,
    pub nonlinearity: RouterNonlinearity,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            nonlinearity: RouterNonlinearity::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Router<T> {
    /// U × D
    pub w1: Tensor<T>,
    /// E × U
    pub w2: Tensor<T>,
    pub nonlinearity: RouterNonlinearity,
}

impl<T: Real> Router<T> {
    pub fn init(
        embed_dim: usize,
        num_experts: usize,
        config: RouterConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let mut sample = |rows: usize, cols: usize| {
            let dist = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("positive std");
            let data = (0..rows * cols)
                .map(|_| T::cast(dist.sample(rng)))
                .collect();
            Tensor::new(vec![rows, cols], data).expect("rows × cols")
        };
        let w1 = sample(config.hidden, embed_dim);
        let w2 = sample(num_experts, config.hidden);
        Self {
            w1,
            w2,
            nonlinearity: config.nonlinearity,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.w2.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.w1.numel() + self.w2.numel()
    }

    /// Router logits `B × E` without recording a graph.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, d) = x.dims2()?;
        let (u, d1) = self.w1.dims2()?;
        let (e, _) = self.w2.dims2()?;
        if d != d1 {
            return Err(Error::Shape {
                op: "router_forward",
                lhs: x.shape().to_vec(),
                rhs: self.w1.shape().to_vec(),
            });
        }
        let mut hidden = linear_forward(x.data(), self.w1.data(), b, d, u);
        if self.nonlinearity == RouterNonlinearity::Relu {
            hidden
                .iter_mut()
                .for_each(|v| *v = Activation::Relu.apply(*v));
        }
        Tensor::new(vec![b, e], linear_forward(&hidden, self.w2.data(), b, u, e))
    }
}

/// Router logits recorded on `g`.
pub fn router_forward<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w1: Var,
    w2: Var,
    nonlinearity: RouterNonlinearity,
) -> Result<Var> {
    let h = g.linear(x, w1)?;
    let h = match nonlinearity {
        RouterNonlinearity::Relu => g.activation(h, Activation::Relu),
        RouterNonlinearity::None => h,
    };
    g.linear(h, w2)
}

/// Mean cross entropy of router logits against difficulty labels.
pub fn router_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// Index of the largest logit; ties go to the smaller (cheaper) expert.
pub fn predict_expert<T: Real>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Row-wise [`predict_expert`] over a `B × E` logit matrix.
pub fn predict_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let e = logits.shape()[1];
    logits
        .data()
        .chunks_exact(e.max(1))
        .map(predict_expert)
        .collect()
}

/// Parameters added by biasless `D → U → E` routers across all layers.
pub fn router_param_count(
    embed_dim: usize,
    hidden: usize,
    num_experts: usize,
    num_layers: usize,
) -> usize {
    num_layers * (embed_dim * hidden + hidden * num_experts)
}
