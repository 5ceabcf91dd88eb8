//! Prompt machinery: tied task-invariant prompts, the variational prompt
//! encoder producing task-specific prompts, the running prompt-feature
//! average and its EMA update.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels;
use crate::optim::Param;
use crate::rng::Stream;
use crate::tensor::{Real, Tensor};
use crate::vit::INIT_SD;
use serde::{Deserialize, Serialize};

/// Prompt/mixing hyperparameters. One `prompt_len` field serves both prompt
/// families, which keeps their lengths equal by construction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Hyperparams {
    /// TSP mixing weight toward the running average.
    pub alpha: f64,
    /// EMA retention rate for incremental tasks.
    pub beta: f64,
    /// Tokens per prompt family (L_pI = L_pS).
    pub prompt_len: usize,
    /// Std of the Gaussian input noise channel.
    pub sigma_x: f64,
    /// Enable input-space noise x + eps during training.
    pub input_noise: bool,
    /// Enable reparameterized prompt sampling mu + sigma*eps during training.
    pub reparam_noise: bool,
    /// Which backbone layers receive prompts.
    pub prompt_layers: Vec<usize>,
    /// Hidden width of the encoder trunk.
    pub encoder_hidden: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            alpha: 0.8,
            beta: 0.99,
            prompt_len: 3,
            sigma_x: 0.05,
            input_noise: true,
            reparam_noise: true,
            prompt_layers: vec![0, 1, 2, 3, 4],
            encoder_hidden: 256,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(CoreError::config("alpha and beta must lie in [0,1]"));
        }
        if self.prompt_len == 0 {
            return Err(CoreError::config("prompt_len must be >= 1"));
        }
        if self.sigma_x < 0.0 {
            return Err(CoreError::config("sigma_x must be >= 0"));
        }
        if self.encoder_hidden == 0 {
            return Err(CoreError::config("encoder_hidden must be >= 1"));
        }
        let mut seen = std::collections::HashSet::new();
        for &l in &self.prompt_layers {
            if l >= num_layers {
                return Err(CoreError::config(format!(
                    "prompt layer {l} out of range for {num_layers}-layer backbone"
                )));
            }
            if !seen.insert(l) {
                return Err(CoreError::config(format!("duplicate prompt layer {l}")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Task-invariant prompts
// ---------------------------------------------------------------------------

/// Per-prompted-layer task-invariant prompt block. In tied form one vector
/// is stored per layer and broadcast to `tokens` identical rows, so the
/// rows-stay-equal invariant holds structurally and gradients from all
/// token positions accumulate into the single source vector. The untied
/// form stores a full token matrix per layer.
#[derive(Debug, Clone)]
pub struct TipBlock<F: Real> {
    params: Vec<Param<F>>,
    tied: bool,
    tokens: usize,
    dim: usize,
}

impl<F: Real> TipBlock<F> {
    pub fn init(
        num_prompt_layers: usize,
        tokens: usize,
        dim: usize,
        tied: bool,
        stream: &mut Stream,
    ) -> Result<Self> {
        if tokens == 0 || dim == 0 || num_prompt_layers == 0 {
            return Err(CoreError::config("TIP needs tokens >= 1, dim >= 1, layers >= 1"));
        }
        let params = (0..num_prompt_layers)
            .map(|l| {
                let shape = if tied { vec![1, dim] } else { vec![tokens, dim] };
                Param::new(format!("tip/l{l}"), Tensor::randn(shape, stream, 0.0, INIT_SD))
            })
            .collect();
        Ok(TipBlock {
            params,
            tied,
            tokens,
            dim,
        })
    }

    pub fn tied(&self) -> bool {
        self.tied
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_layers(&self) -> usize {
        self.params.len()
    }

    /// The full [tokens, dim] prompt block for one layer.
    pub fn block(&self, layer: usize) -> Tensor<F> {
        let src = &self.params[layer].value;
        if self.tied {
            let mut data = Vec::with_capacity(self.tokens * self.dim);
            for _ in 0..self.tokens {
                data.extend_from_slice(src.data());
            }
            Tensor::new(vec![self.tokens, self.dim], data).unwrap()
        } else {
            src.clone()
        }
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        self.params.iter().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.params.iter_mut().collect()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in &mut self.params {
            p.frozen = frozen;
        }
    }

    pub fn cast<G: Real>(&self) -> TipBlock<G> {
        TipBlock {
            params: self.params.iter().map(Param::cast).collect(),
            tied: self.tied,
            tokens: self.tokens,
            dim: self.dim,
        }
    }

    pub fn bind(&self, g: &mut Graph<F>) -> Result<TipNodes> {
        let mut sources = Vec::new();
        let mut blocks = Vec::new();
        for p in &self.params {
            let src = p.bind(g)?;
            sources.push(src);
            blocks.push(if self.tied {
                g.broadcast_rows(src, self.tokens)?
            } else {
                src
            });
        }
        Ok(TipNodes { sources, blocks })
    }
}

/// Bound TIP: `sources` are the gradient leaves (aligned with
/// `TipBlock::params_mut`), `blocks` the materialized [tokens, dim] prompts.
pub struct TipNodes {
    pub sources: Vec<NodeId>,
    pub blocks: Vec<NodeId>,
}

// ---------------------------------------------------------------------------
// Variational prompt encoder
// ---------------------------------------------------------------------------

/// Shared-trunk MLP with per-prompted-layer mean and log-variance heads.
/// The log-variance head is zero-initialized so sigma^2 = 1 everywhere at
/// the start of training.
#[derive(Debug, Clone)]
pub struct EncoderHeads<F: Real> {
    pub trunk_w1: Param<F>,
    pub trunk_b1: Param<F>,
    pub trunk_w2: Param<F>,
    pub trunk_b2: Param<F>,
    pub mu_w: Vec<Param<F>>,
    pub mu_b: Vec<Param<F>>,
    pub lv_w: Vec<Param<F>>,
    pub lv_b: Vec<Param<F>>,
    in_dim: usize,
    out_tokens: usize,
    dim: usize,
}

impl<F: Real> EncoderHeads<F> {
    /// `in_dim` is the flattened encoder input width: L_pI*D + D with TIP
    /// present, D without.
    pub fn init(
        in_dim: usize,
        hidden: usize,
        out_tokens: usize,
        dim: usize,
        num_prompt_layers: usize,
        stream: &mut Stream,
    ) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || out_tokens == 0 || dim == 0 || num_prompt_layers == 0 {
            return Err(CoreError::config("encoder dimensions must be positive"));
        }
        let out = out_tokens * dim;
        let sd1 = 1.0 / (in_dim as f64).sqrt();
        let sd2 = 1.0 / (hidden as f64).sqrt();
        let mut mu_w = Vec::new();
        let mut mu_b = Vec::new();
        let mut lv_w = Vec::new();
        let mut lv_b = Vec::new();
        let trunk_w1 = Param::new("enc/w1", Tensor::randn(vec![in_dim, hidden], stream, 0.0, sd1));
        let trunk_b1 = Param::new("enc/b1", Tensor::zeros(vec![1, hidden]));
        let trunk_w2 = Param::new("enc/w2", Tensor::randn(vec![hidden, hidden], stream, 0.0, sd2));
        let trunk_b2 = Param::new("enc/b2", Tensor::zeros(vec![1, hidden]));
        for l in 0..num_prompt_layers {
            mu_w.push(Param::new(
                format!("enc/l{l}/mu_w"),
                Tensor::randn(vec![hidden, out], stream, 0.0, INIT_SD),
            ));
            mu_b.push(Param::new(format!("enc/l{l}/mu_b"), Tensor::zeros(vec![1, out])));
            lv_w.push(Param::new(format!("enc/l{l}/lv_w"), Tensor::zeros(vec![hidden, out])));
            lv_b.push(Param::new(format!("enc/l{l}/lv_b"), Tensor::zeros(vec![1, out])));
        }
        Ok(EncoderHeads {
            trunk_w1,
            trunk_b1,
            trunk_w2,
            trunk_b2,
            mu_w,
            mu_b,
            lv_w,
            lv_b,
            in_dim,
            out_tokens,
            dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_tokens(&self) -> usize {
        self.out_tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_layers(&self) -> usize {
        self.mu_w.len()
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut out = vec![&self.trunk_w1, &self.trunk_b1, &self.trunk_w2, &self.trunk_b2];
        for l in 0..self.mu_w.len() {
            out.push(&self.mu_w[l]);
            out.push(&self.mu_b[l]);
            out.push(&self.lv_w[l]);
            out.push(&self.lv_b[l]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = vec![
            &mut self.trunk_w1,
            &mut self.trunk_b1,
            &mut self.trunk_w2,
            &mut self.trunk_b2,
        ];
        for (mw, (mb, (lw, lb))) in self.mu_w.iter_mut().zip(
            self.mu_b
                .iter_mut()
                .zip(self.lv_w.iter_mut().zip(self.lv_b.iter_mut())),
        ) {
            out.push(mw);
            out.push(mb);
            out.push(lw);
            out.push(lb);
        }
        out
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in self.params_mut() {
            p.frozen = frozen;
        }
    }

    pub fn cast<G: Real>(&self) -> EncoderHeads<G> {
        EncoderHeads {
            trunk_w1: self.trunk_w1.cast(),
            trunk_b1: self.trunk_b1.cast(),
            trunk_w2: self.trunk_w2.cast(),
            trunk_b2: self.trunk_b2.cast(),
            mu_w: self.mu_w.iter().map(Param::cast).collect(),
            mu_b: self.mu_b.iter().map(Param::cast).collect(),
            lv_w: self.lv_w.iter().map(Param::cast).collect(),
            lv_b: self.lv_b.iter().map(Param::cast).collect(),
            in_dim: self.in_dim,
            out_tokens: self.out_tokens,
            dim: self.dim,
        }
    }

    pub fn bind(&self, g: &mut Graph<F>) -> Result<EncoderNodes> {
        Ok(EncoderNodes {
            trunk_w1: self.trunk_w1.bind(g)?,
            trunk_b1: self.trunk_b1.bind(g)?,
            trunk_w2: self.trunk_w2.bind(g)?,
            trunk_b2: self.trunk_b2.bind(g)?,
            mu_w: self.mu_w.iter().map(|p| p.bind(g)).collect::<Result<_>>()?,
            mu_b: self.mu_b.iter().map(|p| p.bind(g)).collect::<Result<_>>()?,
            lv_w: self.lv_w.iter().map(|p| p.bind(g)).collect::<Result<_>>()?,
            lv_b: self.lv_b.iter().map(|p| p.bind(g)).collect::<Result<_>>()?,
            out_tokens: self.out_tokens,
            dim: self.dim,
        })
    }
}

pub struct EncoderNodes {
    pub trunk_w1: NodeId,
    pub trunk_b1: NodeId,
    pub trunk_w2: NodeId,
    pub trunk_b2: NodeId,
    pub mu_w: Vec<NodeId>,
    pub mu_b: Vec<NodeId>,
    pub lv_w: Vec<NodeId>,
    pub lv_b: Vec<NodeId>,
    out_tokens: usize,
    dim: usize,
}

impl EncoderNodes {
    /// Leaves aligned with `EncoderHeads::params_mut`.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.trunk_w1, self.trunk_b1, self.trunk_w2, self.trunk_b2];
        for l in 0..self.mu_w.len() {
            out.push(self.mu_w[l]);
            out.push(self.mu_b[l]);
            out.push(self.lv_w[l]);
            out.push(self.lv_b[l]);
        }
        out
    }
}

/// Per-layer encoder outputs on the graph.
pub struct EncodedGraph {
    /// Mean, flat [1, L_pS*D]; feeds the KL term and prompt sampling.
    pub mu_flat: Vec<NodeId>,
    /// Mean reshaped to [L_pS, D]; feeds TSP mixing.
    pub mu: Vec<NodeId>,
    /// Log-variance, flat [1, L_pS*D].
    pub logvar: Vec<NodeId>,
}

/// Encoder forward on the graph. `tip_blocks` are the materialized per-layer
/// TIP blocks (None when TIP is ablated); `feature` is the frozen-backbone
/// image feature [1, D].
pub fn encode_graph<F: Real>(
    g: &mut Graph<F>,
    enc: &EncoderNodes,
    tip_blocks: Option<&[NodeId]>,
    feature: NodeId,
) -> Result<EncodedGraph> {
    let n_layers = enc.mu_w.len();
    if let Some(tb) = tip_blocks {
        if tb.len() != n_layers {
            return Err(CoreError::config(format!(
                "TIP supplies {} layers, encoder expects {}",
                tb.len(),
                n_layers
            )));
        }
    }
    let mut out = EncodedGraph {
        mu_flat: Vec::new(),
        mu: Vec::new(),
        logvar: Vec::new(),
    };
    for l in 0..n_layers {
        let input = match tip_blocks {
            Some(tb) => {
                let numel = g.value(tb[l]).numel();
                let flat = g.reshape(tb[l], vec![1, numel])?;
                g.concat_cols(&[flat, feature])?
            }
            None => feature,
        };
        let h1 = g.matmul(input, enc.trunk_w1)?;
        let h1 = g.add_bias(h1, enc.trunk_b1)?;
        let h1 = g.gelu(h1)?;
        let h2 = g.matmul(h1, enc.trunk_w2)?;
        let h2 = g.add_bias(h2, enc.trunk_b2)?;
        let h2 = g.gelu(h2)?;
        let mu_flat = g.matmul(h2, enc.mu_w[l])?;
        let mu_flat = g.add_bias(mu_flat, enc.mu_b[l])?;
        let lv = g.matmul(h2, enc.lv_w[l])?;
        let lv = g.add_bias(lv, enc.lv_b[l])?;
        let mu = g.reshape(mu_flat, vec![enc.out_tokens, enc.dim])?;
        out.mu_flat.push(mu_flat);
        out.mu.push(mu);
        out.logvar.push(lv);
    }
    Ok(out)
}

/// No-tape encoder mean per layer: [L_pS, D] each. Mirrors `encode_graph`
/// op-for-op so values are bitwise identical.
pub fn encode_mu_eval<F: Real>(
    enc: &EncoderHeads<F>,
    tip: Option<&TipBlock<F>>,
    feature: &Tensor<F>,
) -> Result<Vec<Tensor<F>>> {
    let mut out = Vec::with_capacity(enc.num_layers());
    for l in 0..enc.num_layers() {
        let input = match tip {
            Some(t) => {
                let block = t.block(l);
                let mut data = block.data().to_vec();
                data.extend_from_slice(feature.data());
                Tensor::new(vec![1, data.len()], data)?
            }
            None => feature.clone(),
        };
        if input.numel() != enc.in_dim {
            return Err(CoreError::dim("encode_mean", input.shape(), &[1, enc.in_dim]));
        }
        let h1 = kernels::add_bias(
            &kernels::matmul(&input, &enc.trunk_w1.value),
            &enc.trunk_b1.value,
        )
        .map(kernels::gelu_scalar);
        let h2 = kernels::add_bias(
            &kernels::matmul(&h1, &enc.trunk_w2.value),
            &enc.trunk_b2.value,
        )
        .map(kernels::gelu_scalar);
        let mu_flat = kernels::add_bias(&kernels::matmul(&h2, &enc.mu_w[l].value), &enc.mu_b[l].value);
        out.push(Tensor::new(
            vec![enc.out_tokens, enc.dim],
            mu_flat.into_data(),
        )?);
    }
    Ok(out)
}

/// No-tape per-layer variances sigma^2 = exp(logvar), flat [1, L_pS*D].
pub fn encode_sigma2_eval<F: Real>(
    enc: &EncoderHeads<F>,
    tip: Option<&TipBlock<F>>,
    feature: &Tensor<F>,
) -> Result<Vec<Tensor<F>>> {
    let mut out = Vec::with_capacity(enc.num_layers());
    for l in 0..enc.num_layers() {
        let input = match tip {
            Some(t) => {
                let block = t.block(l);
                let mut data = block.data().to_vec();
                data.extend_from_slice(feature.data());
                Tensor::new(vec![1, data.len()], data)?
            }
            None => feature.clone(),
        };
        let h1 = kernels::add_bias(
            &kernels::matmul(&input, &enc.trunk_w1.value),
            &enc.trunk_b1.value,
        )
        .map(kernels::gelu_scalar);
        let h2 = kernels::add_bias(
            &kernels::matmul(&h1, &enc.trunk_w2.value),
            &enc.trunk_b2.value,
        )
        .map(kernels::gelu_scalar);
        let lv = kernels::add_bias(&kernels::matmul(&h2, &enc.lv_w[l].value), &enc.lv_b[l].value);
        out.push(lv.map(|v| v.exp()));
    }
    Ok(out)
}

/// Reparameterized prompt sample mu + exp(logvar/2) * eps -> [L_pS, D].
pub fn sample_prompt_graph<F: Real>(
    g: &mut Graph<F>,
    mu_flat: NodeId,
    logvar: NodeId,
    eps: NodeId,
    tokens: usize,
    dim: usize,
) -> Result<NodeId> {
    let half_lv = g.scale(logvar, F::of(0.5))?;
    let sigma = g.exp(half_lv)?;
    let noise = g.mul(sigma, eps)?;
    let sample = g.add(mu_flat, noise)?;
    g.reshape(sample, vec![tokens, dim])
}

// ---------------------------------------------------------------------------
// Prompt-feature average and mixing
// ---------------------------------------------------------------------------

/// Running average of encoder mean outputs over a dataset; recomputed at
/// epoch start during base training and EMA-updated afterwards.
#[derive(Debug, Clone)]
pub struct PromptAverage<F: Real> {
    pub per_layer: Vec<Tensor<F>>,
    pub sample_count: usize,
    pub task_index: usize,
}

/// Mean of per-layer encoder means over the given backbone features,
/// accumulated in sample order.
pub fn compute_p_avg<F: Real>(
    enc: &EncoderHeads<F>,
    tip: Option<&TipBlock<F>>,
    features: &[Tensor<F>],
) -> Result<PromptAverage<F>> {
    if features.is_empty() {
        return Err(CoreError::contract("compute_p_avg: empty dataset"));
    }
    let mut sums: Vec<Tensor<F>> = Vec::new();
    for f in features {
        let mus = encode_mu_eval(enc, tip, f)?;
        if sums.is_empty() {
            sums = mus;
        } else {
            for (s, m) in sums.iter_mut().zip(&mus) {
                for (a, b) in s.data_mut().iter_mut().zip(m.data()) {
                    *a += *b;
                }
            }
        }
    }
    let inv = F::of(1.0 / features.len() as f64);
    for s in sums.iter_mut() {
        for v in s.data_mut() {
            *v = *v * inv;
        }
    }
    Ok(PromptAverage {
        per_layer: sums,
        sample_count: features.len(),
        task_index: 0,
    })
}

/// p_avg <- beta * p_avg + (1 - beta) * mean(mu over task features).
pub fn ema_update<F: Real>(
    avg: &mut PromptAverage<F>,
    enc: &EncoderHeads<F>,
    tip: Option<&TipBlock<F>>,
    features: &[Tensor<F>],
    beta: f64,
    task_index: usize,
) -> Result<()> {
    if features.is_empty() {
        return Err(CoreError::contract("ema_update: empty task data"));
    }
    let task_mean = compute_p_avg(enc, tip, features)?;
    let (b, ib) = (F::of(beta), F::of(1.0 - beta));
    for (old, new) in avg.per_layer.iter_mut().zip(&task_mean.per_layer) {
        for (o, n) in old.data_mut().iter_mut().zip(new.data()) {
            *o = *o * b + *n * ib;
        }
    }
    avg.sample_count = features.len();
    avg.task_index = task_index;
    Ok(())
}

/// p_S = alpha * p_avg + (1 - alpha) * mu, on the graph (p_avg constant).
pub fn make_tsp_graph<F: Real>(
    g: &mut Graph<F>,
    mu: NodeId,
    p_avg: &Tensor<F>,
    alpha: f64,
) -> Result<NodeId> {
    if g.shape(mu) != p_avg.shape() {
        return Err(CoreError::dim("make_tsp", g.shape(mu), p_avg.shape()));
    }
    let avg = g.constant(p_avg.clone())?;
    let a = g.scale(avg, F::of(alpha))?;
    let m = g.scale(mu, F::of(1.0 - alpha))?;
    g.add(a, m)
}

/// Eval twin of `make_tsp_graph`; identical expression order.
pub fn make_tsp_eval<F: Real>(mu: &Tensor<F>, p_avg: &Tensor<F>, alpha: f64) -> Result<Tensor<F>> {
    if mu.shape() != p_avg.shape() {
        return Err(CoreError::dim("make_tsp", mu.shape(), p_avg.shape()));
    }
    let a = p_avg.map(|v| v * F::of(alpha));
    let m = mu.map(|v| v * F::of(1.0 - alpha));
    Ok(kernels::binary(&a, &m, |x, y| x + y))
}

/// p^l = [p_I ; p_S]; either half may be absent under ablations.
pub fn assemble_prompts_graph<F: Real>(
    g: &mut Graph<F>,
    tip: Option<NodeId>,
    tsp: Option<NodeId>,
) -> Result<Option<NodeId>> {
    Ok(match (tip, tsp) {
        (Some(a), Some(b)) => Some(g.concat_rows(&[a, b])?),
        (Some(a), None) => Some(a),
        (None, Some(b)) => Some(b),
        (None, None) => None,
    })
}

pub fn assemble_prompts_eval<F: Real>(
    tip: Option<&Tensor<F>>,
    tsp: Option<&Tensor<F>>,
) -> Result<Option<Tensor<F>>> {
    Ok(match (tip, tsp) {
        (Some(a), Some(b)) => {
            if a.shape()[1] != b.shape()[1] {
                return Err(CoreError::dim("assemble_prompts", a.shape(), b.shape()));
            }
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Some(Tensor::new(vec![a.shape()[0] + b.shape()[0], a.shape()[1]], data)?)
        }
        (Some(a), None) => Some(a.clone()),
        (None, Some(b)) => Some(b.clone()),
        (None, None) => None,
    })
}
