//! Experiment orchestration: backbone pretraining, base-task training with
//! the IB + anchor objective, EMA-only incremental steps, evaluation after
//! every task, and checkpointing.
//!
//! Randomness is derived statelessly from (seed, purpose, epoch, sample)
//! coordinates, and all parallel reductions run in sample order, so a run
//! is bitwise reproducible and resumable from any checkpoint.

use crate::checkpoint::Container;
use crate::classifier::{ClassifierMode, ClassifierState};
use crate::data::{DataConfig, Dataset, IncTask, SplitConfig, TaskStream};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::metrics::{MetricsReport, TaskMetrics};
use crate::objective::{
    anchor_loss, cosine_logits, ib_loss, total_loss, AnchorTable, LossConfig,
};
use crate::optim::{sgd_step, Param};
use crate::prompts::{
    assemble_prompts_eval, assemble_prompts_graph, compute_p_avg, ema_update, encode_graph,
    encode_mu_eval, make_tsp_eval, make_tsp_graph, sample_prompt_graph, EncoderHeads,
    Hyperparams, PromptAverage, TipBlock,
};
use crate::rng::{tag, RootSeed};
use crate::tensor::{Real, Tensor};
use crate::vit::{plain_feature, vit_forward_eval, vit_forward_graph, ViTConfig, ViTNodes, ViTParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.01,
            epochs: 20,
            batch_size: 48,
            pretrain_lr: 0.05,
            pretrain_epochs: 10,
            pretrain_batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AblationFlags {
    pub no_tip: bool,
    pub no_tsp: bool,
    pub no_anchor: bool,
    pub diff_tip: bool,
    /// alpha = 0: the running average drops out of TSP mixing.
    pub no_pavg: bool,
    /// beta = 1: the running average never adapts to new tasks.
    pub frozen_pavg: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub vit: ViTConfig,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub hyper: Hyperparams,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub ablation: AblationFlags,
    /// Study flag: recompute base-class prototypes after each EMA update.
    /// Off by default — old task data is unavailable under the FSCIL
    /// contract, so refreshing would require keeping it around.
    pub refresh_base_prototypes: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            vit: ViTConfig::default(),
            data: DataConfig::default(),
            split: SplitConfig::default(),
            hyper: Hyperparams::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            ablation: AblationFlags::default(),
            refresh_base_prototypes: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.data.validate()?;
        self.hyper.validate(self.vit.num_layers)?;
        self.loss.validate()?;
        if self.data.image_size != self.vit.image_size || self.data.channels != self.vit.channels {
            return Err(CoreError::config(
                "dataset geometry must match the backbone configuration",
            ));
        }
        if self.optim.lr <= 0.0 || self.optim.pretrain_lr <= 0.0 {
            return Err(CoreError::config("learning rates must be positive"));
        }
        if self.optim.epochs == 0
            || self.optim.batch_size == 0
            || self.optim.pretrain_epochs == 0
            || self.optim.pretrain_batch_size == 0
        {
            return Err(CoreError::config("epochs and batch sizes must be positive"));
        }
        if self.hyper.prompt_layers.is_empty() && (self.tip_enabled() || self.tsp_enabled()) {
            return Err(CoreError::config("prompt_layers is empty but prompts are enabled"));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialization cannot fail");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_prefix(&h.finalize(), 16)
    }

    pub fn tip_enabled(&self) -> bool {
        !self.ablation.no_tip
    }

    pub fn tsp_enabled(&self) -> bool {
        !self.ablation.no_tsp
    }

    pub fn tip_tied(&self) -> bool {
        !self.ablation.diff_tip
    }

    pub fn effective_alpha(&self) -> f64 {
        if self.ablation.no_pavg {
            0.0
        } else {
            self.hyper.alpha
        }
    }

    pub fn effective_beta(&self) -> f64 {
        if self.ablation.frozen_pavg {
            1.0
        } else {
            self.hyper.beta
        }
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.no_anchor {
            0.0
        } else {
            self.loss.lambda
        }
    }

    fn encoder_in_dim(&self) -> usize {
        let d = self.vit.embed_dim;
        if self.tip_enabled() {
            self.hyper.prompt_len * d + d
        } else {
            d
        }
    }
}

fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes
        .iter()
        .take(n / 2)
        .map(|b| format!("{b:02x}"))
        .collect()
}

// ---------------------------------------------------------------------------
// Model bundle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Model<F: Real> {
    pub backbone: ViTParams<F>,
    pub tip: Option<TipBlock<F>>,
    pub encoder: Option<EncoderHeads<F>>,
    pub p_avg: Option<PromptAverage<F>>,
    pub classifier: ClassifierState<F>,
}

impl Model<f32> {
    /// Assemble the trainable parts around a frozen backbone.
    pub fn build(
        cfg: &RunConfig,
        backbone: ViTParams<f32>,
        base_class_ids: &[u32],
    ) -> Result<Self> {
        if !backbone.all_frozen() {
            return Err(CoreError::contract(
                "base training requires a frozen backbone",
            ));
        }
        let seed = RootSeed(cfg.seed);
        let d = cfg.vit.embed_dim;
        let n_prompt_layers = cfg.hyper.prompt_layers.len();
        let tip = if cfg.tip_enabled() {
            Some(TipBlock::init(
                n_prompt_layers,
                cfg.hyper.prompt_len,
                d,
                cfg.tip_tied(),
                &mut seed.stream(&[tag::INIT_TIP]),
            )?)
        } else {
            None
        };
        let encoder = if cfg.tsp_enabled() {
            Some(EncoderHeads::init(
                cfg.encoder_in_dim(),
                cfg.hyper.encoder_hidden,
                cfg.hyper.prompt_len,
                d,
                n_prompt_layers,
                &mut seed.stream(&[tag::INIT_ENCODER]),
            )?)
        } else {
            None
        };
        let classifier = ClassifierState::new_trainable(
            base_class_ids,
            d,
            &mut seed.stream(&[tag::INIT_CLASSIFIER]),
        )?;
        Ok(Model {
            backbone,
            tip,
            encoder,
            p_avg: None,
            classifier,
        })
    }
}

impl<F: Real> Model<F> {
    /// TIP + encoder + classifier, in binding order.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = Vec::new();
        if let Some(tip) = &mut self.tip {
            out.extend(tip.params_mut());
        }
        if let Some(enc) = &mut self.encoder {
            out.extend(enc.params_mut());
        }
        out.push(&mut self.classifier.weight);
        out
    }

    pub fn trainable_params(&self) -> Vec<&Param<F>> {
        let mut out = Vec::new();
        if let Some(tip) = &self.tip {
            out.extend(tip.params());
        }
        if let Some(enc) = &self.encoder {
            out.extend(enc.params());
        }
        out.push(&self.classifier.weight);
        out
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            backbone: self.backbone.cast(),
            tip: self.tip.as_ref().map(TipBlock::cast),
            encoder: self.encoder.as_ref().map(EncoderHeads::cast),
            p_avg: self.p_avg.as_ref().map(|p| PromptAverage {
                per_layer: p.per_layer.iter().map(Tensor::cast).collect(),
                sample_count: p.sample_count,
                task_index: p.task_index,
            }),
            classifier: self.classifier.cast(),
        }
    }
}

pub struct ModelGraph {
    pub vit: ViTNodes,
    pub tip: Option<crate::prompts::TipNodes>,
    pub enc: Option<crate::prompts::EncoderNodes>,
    pub w: NodeId,
}

impl ModelGraph {
    pub fn bind<F: Real>(model: &Model<F>, g: &mut Graph<F>) -> Result<Self> {
        Ok(ModelGraph {
            vit: ViTNodes::bind(&model.backbone, g)?,
            tip: model.tip.as_ref().map(|t| t.bind(g)).transpose()?,
            enc: model.encoder.as_ref().map(|e| e.bind(g)).transpose()?,
            w: model.classifier.weight.bind(g)?,
        })
    }

    /// Gradient leaves aligned with `Model::trainable_params_mut`.
    pub fn trainable_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        if let Some(tip) = &self.tip {
            out.extend_from_slice(&tip.sources);
        }
        if let Some(enc) = &self.enc {
            out.extend(enc.ids());
        }
        out.push(self.w);
        out
    }
}

// ---------------------------------------------------------------------------
// Loss assembly (shared by training and the gradient-check oracle)
// ---------------------------------------------------------------------------

pub struct SampleLossInputs<'a, F: Real> {
    /// Input image, already carrying input-space noise when enabled.
    pub image: &'a [F],
    /// Frozen-backbone feature of the same (possibly noisy) image.
    pub plain_feature: &'a Tensor<F>,
    /// Row of the sample's class in the classifier weight matrix.
    pub label_row: usize,
    /// Per-prompted-layer reparameterization noise, [1, L_pS*D] each.
    pub eps_p: Option<&'a [Tensor<F>]>,
    /// Cached anchor feature of the sample's class.
    pub anchor: Option<&'a Tensor<F>>,
}

/// Record one sample's full training loss on the graph and return the loss
/// node: cross-entropy on temperature-scaled cosine logits, KL to the unit
/// Gaussian per prompted layer, and the weighted anchor term.
pub fn build_sample_loss<F: Real>(
    g: &mut Graph<F>,
    mg: &ModelGraph,
    model: &Model<F>,
    cfg: &RunConfig,
    inp: &SampleLossInputs<'_, F>,
) -> Result<NodeId> {
    let num_layers = cfg.vit.num_layers;
    let mut prompts: Vec<Option<NodeId>> = vec![None; num_layers];

    let mut mu_flats = Vec::new();
    let mut logvars = Vec::new();
    if let Some(enc_nodes) = &mg.enc {
        let p_avg = model
            .p_avg
            .as_ref()
            .ok_or_else(|| CoreError::contract("TSP enabled but p_avg not yet computed"))?;
        let feature_const = g.constant(inp.plain_feature.clone())?;
        let tip_blocks = mg.tip.as_ref().map(|t| t.blocks.as_slice());
        let encoded = encode_graph(g, enc_nodes, tip_blocks, feature_const)?;
        let alpha = cfg.effective_alpha();
        let tokens = cfg.hyper.prompt_len;
        let dim = cfg.vit.embed_dim;
        for (pi, &layer) in cfg.hyper.prompt_layers.iter().enumerate() {
            let mu_used = match inp.eps_p {
                Some(eps) => {
                    let eps_node = g.constant(eps[pi].clone())?;
                    sample_prompt_graph(g, encoded.mu_flat[pi], encoded.logvar[pi], eps_node, tokens, dim)?
                }
                None => encoded.mu[pi],
            };
            let tsp = make_tsp_graph(g, mu_used, &p_avg.per_layer[pi], alpha)?;
            let tip_node = mg.tip.as_ref().map(|t| t.blocks[pi]);
            prompts[layer] = assemble_prompts_graph(g, tip_node, Some(tsp))?;
        }
        mu_flats = encoded.mu_flat;
        logvars = encoded.logvar;
    } else if let Some(tip_nodes) = &mg.tip {
        for (pi, &layer) in cfg.hyper.prompt_layers.iter().enumerate() {
            prompts[layer] = Some(tip_nodes.blocks[pi]);
        }
    }

    let feature = vit_forward_graph(g, &mg.vit, &cfg.vit, inp.image, &prompts)?;
    let logits = cosine_logits(g, mg.w, feature)?;
    let ib = ib_loss(g, logits, inp.label_row, &mu_flats, &logvars, &cfg.loss)?;
    let lambda = cfg.effective_lambda();
    let anchor_term = match (inp.anchor, lambda > 0.0) {
        (Some(a), true) => Some(anchor_loss(g, feature, a)?),
        _ => None,
    };
    total_loss(g, ib, anchor_term, lambda)
}

/// Eval-mode feature f(x) under the current prompts: per-sample TSP from the
/// encoder mean (no noise), mixed with p_avg, prepended after TIP.
pub fn prompted_feature_from_plain<F: Real>(
    model: &Model<F>,
    cfg: &RunConfig,
    image: &[F],
    plain: &Tensor<F>,
) -> Result<Tensor<F>> {
    let mut prompts: Vec<Option<Tensor<F>>> = vec![None; cfg.vit.num_layers];
    let mus = match &model.encoder {
        Some(enc) => Some(encode_mu_eval(enc, model.tip.as_ref(), plain)?),
        None => None,
    };
    for (pi, &layer) in cfg.hyper.prompt_layers.iter().enumerate() {
        let tip_block = model.tip.as_ref().map(|t| t.block(pi));
        let tsp = match (&mus, &model.p_avg) {
            (Some(mus), Some(p_avg)) => Some(make_tsp_eval(
                &mus[pi],
                &p_avg.per_layer[pi],
                cfg.effective_alpha(),
            )?),
            (Some(_), None) => {
                return Err(CoreError::contract("TSP enabled but p_avg not yet computed"))
            }
            _ => None,
        };
        prompts[layer] = assemble_prompts_eval(tip_block.as_ref(), tsp.as_ref())?;
    }
    Ok(vit_forward_eval(&model.backbone, &cfg.vit, image, &prompts, false)?.0)
}

pub fn prompted_feature<F: Real>(
    model: &Model<F>,
    cfg: &RunConfig,
    image: &[F],
) -> Result<Tensor<F>> {
    let plain = plain_feature(&model.backbone, &cfg.vit, image)?;
    prompted_feature_from_plain(model, cfg, image, &plain)
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

/// Train the backbone with a temporary linear head on the pretraining split,
/// then freeze every backbone tensor and discard the head.
pub fn pretrain_backbone(
    cfg: &RunConfig,
    data: &Dataset,
    ts: &TaskStream,
) -> Result<(ViTParams<f32>, Vec<f64>)> {
    ts.assert_disjoint()?;
    let seed = RootSeed(cfg.seed);
    let mut backbone = ViTParams::<f32>::init(&cfg.vit, &mut seed.stream(&[tag::INIT_BACKBONE]))?;
    let n_classes = ts.pretrain_classes.len();
    let mut head = Param::new(
        "pretrain/head",
        Tensor::<f32>::randn(
            vec![cfg.vit.embed_dim, n_classes],
            &mut seed.stream(&[tag::INIT_HEAD]),
            0.0,
            crate::vit::INIT_SD,
        ),
    );
    let row_of: BTreeMap<u32, usize> = ts
        .pretrain_classes
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();

    let indices = &ts.pretrain_train;
    let mut losses = Vec::with_capacity(cfg.optim.pretrain_epochs);
    for epoch in 0..cfg.optim.pretrain_epochs {
        let mut order: Vec<usize> = (0..indices.len()).collect();
        seed.stream(&[tag::PRETRAIN_SHUFFLE, epoch as u64])
            .shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.optim.pretrain_batch_size) {
            let results: Result<Vec<(f64, Vec<Option<Tensor<f32>>>)>> = chunk
                .par_iter()
                .map(|&pos| {
                    let idx = indices[pos];
                    let image = data.image(idx);
                    let label_row = row_of[&data.label(idx)];
                    let mut g = Graph::<f32>::new();
                    let vit_nodes = ViTNodes::bind(&backbone, &mut g)?;
                    let head_node = head.bind(&mut g)?;
                    let prompts = vec![None; cfg.vit.num_layers];
                    let feat = vit_forward_graph(&mut g, &vit_nodes, &cfg.vit, image, &prompts)?;
                    let logits = g.matmul(feat, head_node)?;
                    let lsm = g.log_softmax_rows(logits)?;
                    let mut onehot = Tensor::zeros(vec![1, n_classes]);
                    onehot.data_mut()[label_row] = 1.0;
                    let mask = g.constant(onehot)?;
                    let picked = g.mul(lsm, mask)?;
                    let s = g.sum_all(picked)?;
                    let loss = g.scale(s, -1.0)?;
                    let loss_val = g.value(loss).scalar_value()?.as_f64();
                    let mut ids = vit_nodes.ids();
                    ids.push(head_node);
                    let mut grads = g.backward(loss)?;
                    Ok((loss_val, ids.iter().map(|&id| grads.take_grad(id)).collect()))
                })
                .collect();
            let results = results?;
            let inv = 1.0 / chunk.len() as f32;
            let n_params = backbone.params().len() + 1;
            let mut acc: Vec<Option<Tensor<f32>>> = (0..n_params).map(|_| None).collect();
            for (loss_val, grads) in results {
                epoch_loss += loss_val;
                accumulate_grads(&mut acc, grads);
            }
            scale_grads(&mut acc, inv);
            let mut params = backbone.params_mut();
            params.push(&mut head);
            sgd_step(&mut params, &acc, cfg.optim.pretrain_lr as f32)?;
        }
        losses.push(epoch_loss / indices.len() as f64);
        if std::env::var_os("ASP_DEBUG").is_some() {
            eprintln!("pretrain epoch {epoch}: loss {:.4}", losses[epoch]);
        }
    }
    backbone.set_frozen(true);
    Ok((backbone, losses))
}

fn accumulate_grads<F: Real>(acc: &mut [Option<Tensor<F>>], grads: Vec<Option<Tensor<F>>>) {
    for (slot, g) in acc.iter_mut().zip(grads) {
        match (slot.as_mut(), g) {
            (Some(s), Some(g)) => {
                for (a, b) in s.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            (None, Some(g)) => *slot = Some(g),
            _ => {}
        }
    }
}

fn scale_grads<F: Real>(acc: &mut [Option<Tensor<F>>], by: F) {
    for slot in acc.iter_mut().flatten() {
        for v in slot.data_mut() {
            *v = *v * by;
        }
    }
}

// ---------------------------------------------------------------------------
// Base-task training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BaseTrainLog {
    pub epoch_losses: Vec<f64>,
}

fn gaussian_image_noise<F: Real>(
    seed: RootSeed,
    epoch: usize,
    idx: usize,
    image: &[f32],
    sigma: f64,
) -> Vec<F> {
    let mut s = seed.stream(&[tag::INPUT_NOISE, epoch as u64, idx as u64]);
    image
        .iter()
        .map(|&v| F::of(v as f64 + s.normal_scaled(0.0, sigma)))
        .collect()
}

fn reparam_noise<F: Real>(
    seed: RootSeed,
    epoch: usize,
    idx: usize,
    layers: usize,
    dim: usize,
) -> Vec<Tensor<F>> {
    (0..layers)
        .map(|l| {
            let mut s = seed.stream(&[tag::PROMPT_NOISE, epoch as u64, idx as u64, l as u64]);
            Tensor::randn(vec![1, dim], &mut s, 0.0, 1.0)
        })
        .collect()
}

/// Eval-mode prompted features for a set of samples, ordered as given.
fn prompted_features_for(
    model: &Model<f32>,
    cfg: &RunConfig,
    data: &Dataset,
    indices: &[usize],
    plain: &[Tensor<f32>],
) -> Result<Vec<Tensor<f32>>> {
    indices
        .par_iter()
        .zip(plain.par_iter())
        .map(|(&idx, pf)| prompted_feature_from_plain(model, cfg, data.image(idx), pf))
        .collect()
}

/// Fig.-1 base-task loop. Per epoch: recompute p_avg and the anchor table
/// at epoch start, then minibatch SGD on TIP + encoder + classifier only.
/// Afterwards the classifier converts to prototypes and the prompts freeze.
pub fn train_base_task(
    model: &mut Model<f32>,
    cfg: &RunConfig,
    data: &Dataset,
    ts: &TaskStream,
) -> Result<BaseTrainLog> {
    if !model.backbone.all_frozen() {
        return Err(CoreError::contract("backbone must be frozen before base training"));
    }
    if model.classifier.mode() != ClassifierMode::Trainable {
        return Err(CoreError::contract("base training requires a trainable classifier"));
    }
    let seed = RootSeed(cfg.seed);
    let indices = &ts.base_train;
    if indices.is_empty() {
        return Err(CoreError::contract("base task has no training samples"));
    }

    // Frozen backbone: clean-image features never change across epochs.
    let clean_feats: Vec<Tensor<f32>> = indices
        .par_iter()
        .map(|&idx| plain_feature(&model.backbone, &cfg.vit, data.image(idx)))
        .collect::<Result<_>>()?;

    let lambda = cfg.effective_lambda();
    let n_prompt_layers = cfg.hyper.prompt_layers.len();
    let noise_dim = cfg.hyper.prompt_len * cfg.vit.embed_dim;
    let mut epoch_losses = Vec::with_capacity(cfg.optim.epochs);

    for epoch in 0..cfg.optim.epochs {
        if model.encoder.is_some() {
            let enc = model.encoder.as_ref().unwrap();
            let mut avg = compute_p_avg(enc, model.tip.as_ref(), &clean_feats)?;
            avg.task_index = 0;
            model.p_avg = Some(avg);
        }

        let anchors: Option<AnchorTable<f32>> = if lambda > 0.0 {
            let feats = prompted_features_for(model, cfg, data, indices, &clean_feats)?;
            let mut groups: BTreeMap<u32, Vec<(usize, Tensor<f32>)>> = BTreeMap::new();
            for (&idx, f) in indices.iter().zip(feats) {
                groups.entry(data.label(idx)).or_default().push((idx, f));
            }
            Some(AnchorTable::refresh(&groups)?)
        } else {
            None
        };

        let mut order: Vec<usize> = (0..indices.len()).collect();
        seed.stream(&[tag::BASE_SHUFFLE, epoch as u64]).shuffle(&mut order);

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.optim.batch_size) {
            let results: Result<Vec<(f64, Vec<Option<Tensor<f32>>>)>> = chunk
                .par_iter()
                .map(|&pos| {
                    let idx = indices[pos];
                    let label = data.label(idx);
                    let label_row = model.classifier.row_of(label).ok_or_else(|| {
                        CoreError::contract(format!("label {label} missing from classifier"))
                    })?;
                    let image: Vec<f32> = if cfg.hyper.input_noise && cfg.hyper.sigma_x > 0.0 {
                        gaussian_image_noise(seed, epoch, idx, data.image(idx), cfg.hyper.sigma_x)
                    } else {
                        data.image(idx).to_vec()
                    };
                    let plain = plain_feature(&model.backbone, &cfg.vit, &image)?;
                    let eps = if cfg.hyper.reparam_noise && model.encoder.is_some() {
                        Some(reparam_noise::<f32>(seed, epoch, idx, n_prompt_layers, noise_dim))
                    } else {
                        None
                    };
                    let anchor = anchors.as_ref().and_then(|t| t.feature(label));
                    let mut g = Graph::<f32>::new();
                    let mg = ModelGraph::bind(model, &mut g)?;
                    let loss = build_sample_loss(
                        &mut g,
                        &mg,
                        model,
                        cfg,
                        &SampleLossInputs {
                            image: &image,
                            plain_feature: &plain,
                            label_row,
                            eps_p: eps.as_deref(),
                            anchor,
                        },
                    )?;
                    let ids = mg.trainable_ids();
                    let loss_val = g.value(loss).scalar_value()?.as_f64();
                    if !loss_val.is_finite() {
                        return Err(CoreError::numeric("train_base", "non-finite loss"));
                    }
                    let mut grads = g.backward(loss)?;
                    Ok((loss_val, ids.iter().map(|&id| grads.take_grad(id)).collect()))
                })
                .collect();
            let results = results?;
            let n_trainable = model.trainable_params().len();
            let mut acc: Vec<Option<Tensor<f32>>> = (0..n_trainable).map(|_| None).collect();
            for (loss_val, grads) in results {
                epoch_loss += loss_val;
                accumulate_grads(&mut acc, grads);
            }
            scale_grads(&mut acc, 1.0 / chunk.len() as f32);
            sgd_step(&mut model.trainable_params_mut(), &acc, cfg.optim.lr as f32)?;
        }
        epoch_losses.push(epoch_loss / indices.len() as f64);
        if std::env::var_os("ASP_DEBUG").is_some() {
            eprintln!("base epoch {epoch}: loss {:.4}", epoch_losses[epoch]);
        }
    }

    // Replace the trained classifier with class-mean prototypes computed
    // under the final prompts, then freeze the prompt machinery.
    let feats = prompted_features_for(model, cfg, data, indices, &clean_feats)?;
    let mut groups: BTreeMap<u32, Vec<Tensor<f32>>> = BTreeMap::new();
    for (&idx, f) in indices.iter().zip(feats) {
        groups.entry(data.label(idx)).or_default().push(f);
    }
    let grouped: Vec<(u32, Vec<Tensor<f32>>)> = groups.into_iter().collect();
    let means = ClassifierState::compute_prototypes(&grouped)?;
    model.classifier.freeze_to_prototypes(&means)?;
    if let Some(tip) = &mut model.tip {
        tip.set_frozen(true);
    }
    if let Some(enc) = &mut model.encoder {
        enc.set_frozen(true);
    }
    Ok(BaseTrainLog { epoch_losses })
}

// ---------------------------------------------------------------------------
// Incremental tasks
// ---------------------------------------------------------------------------

/// One few-shot task: no gradients anywhere. p_avg absorbs the task mean by
/// EMA, then new-class prototypes are computed under the updated prompts and
/// appended.
pub fn incremental_step(
    model: &mut Model<f32>,
    cfg: &RunConfig,
    data: &Dataset,
    task: &IncTask,
    task_index: usize,
) -> Result<()> {
    if task_index == 0 {
        return Err(CoreError::contract("incremental task index must be >= 1"));
    }
    if model.classifier.mode() != ClassifierMode::Prototypical {
        return Err(CoreError::contract("incremental step requires prototypical mode"));
    }
    for &c in &task.classes {
        if model.classifier.row_of(c).is_some() {
            return Err(CoreError::contract(format!(
                "class {c} overlaps an earlier task"
            )));
        }
    }
    if task.train.is_empty() {
        return Err(CoreError::contract("incremental task has no training samples"));
    }

    let plain: Vec<Tensor<f32>> = task
        .train
        .par_iter()
        .map(|&idx| plain_feature(&model.backbone, &cfg.vit, data.image(idx)))
        .collect::<Result<_>>()?;

    if let Some(enc) = &model.encoder {
        let p_avg = model
            .p_avg
            .as_mut()
            .ok_or_else(|| CoreError::contract("incremental step before base training"))?;
        ema_update(
            p_avg,
            enc,
            model.tip.as_ref(),
            &plain,
            cfg.effective_beta(),
            task_index,
        )?;
    }

    // Prototypes reflect the prompts in use at test time, i.e. the updated p_avg.
    let feats = prompted_features_for(model, cfg, data, &task.train, &plain)?;
    let mut groups: BTreeMap<u32, Vec<Tensor<f32>>> = BTreeMap::new();
    for (&idx, f) in task.train.iter().zip(feats) {
        groups.entry(data.label(idx)).or_default().push(f);
    }
    let grouped: Vec<(u32, Vec<Tensor<f32>>)> = groups.into_iter().collect();
    let means = ClassifierState::compute_prototypes(&grouped)?;
    model.classifier.append_prototypes(&means)?;
    Ok(())
}

/// Study flag: recompute base-class prototypes under the current prompts.
/// Deliberately breaks the rehearsal-free contract by reading base training
/// data again; never called unless `refresh_base_prototypes` is set.
pub fn refresh_base_prototypes(
    model: &mut Model<f32>,
    cfg: &RunConfig,
    data: &Dataset,
    base_train: &[usize],
) -> Result<()> {
    let plain: Vec<Tensor<f32>> = base_train
        .par_iter()
        .map(|&idx| plain_feature(&model.backbone, &cfg.vit, data.image(idx)))
        .collect::<Result<_>>()?;
    let feats = prompted_features_for(model, cfg, data, base_train, &plain)?;
    let mut groups: BTreeMap<u32, Vec<Tensor<f32>>> = BTreeMap::new();
    for (&idx, f) in base_train.iter().zip(feats) {
        groups.entry(data.label(idx)).or_default().push(f);
    }
    let grouped: Vec<(u32, Vec<Tensor<f32>>)> = groups.into_iter().collect();
    let means = ClassifierState::compute_prototypes(&grouped)?;
    model.classifier.refresh_prototypes(&means)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Plain-feature cache for repeated evaluation over growing test sets.
pub struct PlainFeatureCache {
    slots: Vec<Option<Tensor<f32>>>,
}

impl PlainFeatureCache {
    pub fn new(n: usize) -> Self {
        PlainFeatureCache {
            slots: (0..n).map(|_| None).collect(),
        }
    }

    fn fill(
        &mut self,
        backbone: &ViTParams<f32>,
        vit: &ViTConfig,
        data: &Dataset,
        indices: &[usize],
    ) -> Result<()> {
        let missing: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| self.slots[i].is_none())
            .collect();
        let feats: Vec<(usize, Tensor<f32>)> = missing
            .par_iter()
            .map(|&i| Ok((i, plain_feature(backbone, vit, data.image(i))?)))
            .collect::<Result<_>>()?;
        for (i, f) in feats {
            self.slots[i] = Some(f);
        }
        Ok(())
    }

    fn get(&self, i: usize) -> &Tensor<f32> {
        self.slots[i].as_ref().expect("cache miss after fill")
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    /// Sample-weighted Top-1 accuracy.
    pub acc: f64,
    /// (correct, total) per class id.
    pub per_class: BTreeMap<u32, (usize, usize)>,
}

impl EvalOutcome {
    /// Mean per-class accuracy over the given class set.
    pub fn class_mean_acc(&self, classes: &[u32]) -> Option<f64> {
        let mut accs = Vec::new();
        for c in classes {
            if let Some(&(correct, total)) = self.per_class.get(c) {
                if total > 0 {
                    accs.push(correct as f64 / total as f64);
                }
            }
        }
        if accs.is_empty() {
            None
        } else {
            Some(accs.iter().sum::<f64>() / accs.len() as f64)
        }
    }
}

/// Top-1 evaluation in eval mode (no noise): per-sample TSP from the
/// encoder mean, prediction by argmax cosine over all prototypes.
pub fn evaluate(
    model: &Model<f32>,
    cfg: &RunConfig,
    data: &Dataset,
    indices: &[usize],
    cache: &mut PlainFeatureCache,
) -> Result<EvalOutcome> {
    if model.classifier.mode() != ClassifierMode::Prototypical {
        return Err(CoreError::contract("evaluate requires prototypical mode"));
    }
    cache.fill(&model.backbone, &cfg.vit, data, indices)?;
    let preds: Vec<(u32, u32)> = indices
        .par_iter()
        .map(|&idx| {
            let feat =
                prompted_feature_from_plain(model, cfg, data.image(idx), cache.get(idx))?;
            Ok((data.label(idx), model.classifier.predict(&feat)?))
        })
        .collect::<Result<_>>()?;
    let mut per_class: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    let mut correct = 0usize;
    for (label, pred) in preds {
        let e = per_class.entry(label).or_insert((0, 0));
        e.1 += 1;
        if label == pred {
            e.0 += 1;
            correct += 1;
        }
    }
    Ok(EvalOutcome {
        acc: correct as f64 / indices.len().max(1) as f64,
        per_class,
    })
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model<f32>,
    /// Last completed task (0 = base task done).
    pub task_index: usize,
    pub metrics_so_far: Vec<TaskMetrics>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.put_str(
            "config",
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        c.put_u32s("task_index", vec![self.task_index as u32]);
        c.put_u64s("seed", vec![self.config.seed]);
        c.put_str(
            "metrics",
            serde_json::to_string(&self.metrics_so_far).expect("metrics serialize"),
        );
        for p in self.model.backbone.params() {
            c.put_tensor(format!("model/{}", p.name), p.value.clone());
        }
        c.put_u32s(
            "model/vit_frozen",
            self.model
                .backbone
                .params()
                .iter()
                .map(|p| p.frozen as u32)
                .collect(),
        );
        c.put_u32s("model/has_tip", vec![self.model.tip.is_some() as u32]);
        if let Some(tip) = &self.model.tip {
            for p in tip.params() {
                c.put_tensor(format!("model/{}", p.name), p.value.clone());
            }
            c.put_u32s(
                "model/tip_meta",
                vec![
                    tip.tied() as u32,
                    tip.tokens() as u32,
                    tip.dim() as u32,
                    tip.num_layers() as u32,
                    tip.params()[0].frozen as u32,
                ],
            );
        }
        c.put_u32s("model/has_encoder", vec![self.model.encoder.is_some() as u32]);
        if let Some(enc) = &self.model.encoder {
            for p in enc.params() {
                c.put_tensor(format!("model/{}", p.name), p.value.clone());
            }
            c.put_u32s(
                "model/enc_meta",
                vec![
                    enc.in_dim() as u32,
                    enc.trunk_w1.value.shape()[1] as u32,
                    enc.out_tokens() as u32,
                    enc.dim() as u32,
                    enc.num_layers() as u32,
                    enc.params()[0].frozen as u32,
                ],
            );
        }
        c.put_u32s("model/has_pavg", vec![self.model.p_avg.is_some() as u32]);
        if let Some(avg) = &self.model.p_avg {
            for (l, t) in avg.per_layer.iter().enumerate() {
                c.put_tensor(format!("model/pavg/l{l}"), t.clone());
            }
            c.put_u32s(
                "model/pavg_meta",
                vec![
                    avg.per_layer.len() as u32,
                    avg.sample_count as u32,
                    avg.task_index as u32,
                ],
            );
        }
        c.put_tensor("model/classifier/w", self.model.classifier.weight.value.clone());
        c.put_u32s("model/classifier_ids", self.model.classifier.class_ids().to_vec());
        c.put_u32s(
            "model/classifier_mode",
            vec![match self.model.classifier.mode() {
                ClassifierMode::Trainable => 0,
                ClassifierMode::Prototypical => 1,
            }],
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(c.str_("config")?)
            .map_err(|e| CoreError::config(format!("checkpoint config: {e}")))?;
        config.validate()?;
        let task_index = c.u32s("task_index")?[0] as usize;
        let metrics_so_far: Vec<TaskMetrics> = serde_json::from_str(c.str_("metrics")?)
            .map_err(|e| CoreError::config(format!("checkpoint metrics: {e}")))?;

        let mut backbone =
            ViTParams::<f32>::init(&config.vit, &mut RootSeed(0).stream(&[tag::INIT_BACKBONE]))?;
        let frozen = c.u32s("model/vit_frozen")?.to_vec();
        for (i, p) in backbone.params_mut().into_iter().enumerate() {
            let t = c.tensor(&format!("model/{}", p.name))?;
            if t.shape() != p.value.shape() {
                return Err(CoreError::dim("checkpoint load", p.value.shape(), t.shape()));
            }
            p.value = t.clone();
            p.frozen = frozen.get(i).copied().unwrap_or(0) != 0;
        }

        let tip = if c.u32s("model/has_tip")?[0] != 0 {
            let meta = c.u32s("model/tip_meta")?;
            let mut tip = TipBlock::<f32>::init(
                meta[3] as usize,
                meta[1] as usize,
                meta[2] as usize,
                meta[0] != 0,
                &mut RootSeed(0).stream(&[tag::INIT_TIP]),
            )?;
            let frozen = meta[4] != 0;
            for p in tip.params_mut() {
                p.value = c.tensor(&format!("model/{}", p.name))?.clone();
                p.frozen = frozen;
            }
            Some(tip)
        } else {
            None
        };

        let encoder = if c.u32s("model/has_encoder")?[0] != 0 {
            let meta = c.u32s("model/enc_meta")?;
            let mut enc = EncoderHeads::<f32>::init(
                meta[0] as usize,
                meta[1] as usize,
                meta[2] as usize,
                meta[3] as usize,
                meta[4] as usize,
                &mut RootSeed(0).stream(&[tag::INIT_ENCODER]),
            )?;
            let frozen = meta[5] != 0;
            for p in enc.params_mut() {
                p.value = c.tensor(&format!("model/{}", p.name))?.clone();
                p.frozen = frozen;
            }
            Some(enc)
        } else {
            None
        };

        let p_avg = if c.u32s("model/has_pavg")?[0] != 0 {
            let meta = c.u32s("model/pavg_meta")?;
            let per_layer = (0..meta[0] as usize)
                .map(|l| c.tensor(&format!("model/pavg/l{l}")).cloned())
                .collect::<Result<_>>()?;
            Some(PromptAverage {
                per_layer,
                sample_count: meta[1] as usize,
                task_index: meta[2] as usize,
            })
        } else {
            None
        };

        let mode = match c.u32s("model/classifier_mode")?[0] {
            0 => ClassifierMode::Trainable,
            _ => ClassifierMode::Prototypical,
        };
        let classifier = ClassifierState::from_parts(
            c.tensor("model/classifier/w")?.clone(),
            mode,
            c.u32s("model/classifier_ids")?.to_vec(),
        )?;

        Ok(Checkpoint {
            config,
            model: Model {
                backbone,
                tip,
                encoder,
                p_avg,
                classifier,
            },
            task_index,
            metrics_so_far,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

// ---------------------------------------------------------------------------
// Full experiment
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub model: Model<f32>,
    pub pretrain_losses: Vec<f64>,
    pub base_log: BaseTrainLog,
}

fn new_classes_through(ts: &TaskStream, t: usize) -> Vec<u32> {
    ts.tasks
        .iter()
        .take(t)
        .flat_map(|task| task.classes.iter().copied())
        .collect()
}

fn task_metrics_at(
    t: usize,
    outcome: &EvalOutcome,
    ts: &TaskStream,
) -> Result<TaskMetrics> {
    let base_acc = outcome
        .class_mean_acc(&ts.base_classes)
        .ok_or_else(|| CoreError::contract("no base-class samples in evaluation"))?;
    let new_acc = if t == 0 {
        None
    } else {
        outcome.class_mean_acc(&new_classes_through(ts, t))
    };
    Ok(TaskMetrics {
        task: t,
        acc: outcome.acc,
        base_acc,
        new_acc,
    })
}

fn save_task_checkpoint(
    cfg: &RunConfig,
    model: &Model<f32>,
    t: usize,
    metrics: &[TaskMetrics],
    dir: Option<&Path>,
) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        let ckpt = Checkpoint {
            config: cfg.clone(),
            model: model.clone(),
            task_index: t,
            metrics_so_far: metrics.to_vec(),
        };
        ckpt.save(&dir.join(format!("ckpt_task{t}.aspc")))?;
    }
    Ok(())
}

/// Pretrain, base-train, then run every incremental task, evaluating after
/// each. Optionally writes one checkpoint per completed task.
pub fn run_experiment(
    cfg: &RunConfig,
    data: &Dataset,
    ts: &TaskStream,
    ckpt_dir: Option<&Path>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let (backbone, pretrain_losses) = pretrain_backbone(cfg, data, ts)?;
    run_experiment_with_backbone(cfg, data, ts, backbone, pretrain_losses, ckpt_dir)
}

/// Same as `run_experiment`, reusing an already-pretrained frozen backbone.
/// Pretraining depends only on (vit, data, split, pretrain optim, seed), so
/// ablation variants of one seed can share it bitwise.
pub fn run_experiment_with_backbone(
    cfg: &RunConfig,
    data: &Dataset,
    ts: &TaskStream,
    backbone: ViTParams<f32>,
    pretrain_losses: Vec<f64>,
    ckpt_dir: Option<&Path>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut model = Model::build(cfg, backbone, &ts.base_classes)?;
    let base_log = train_base_task(&mut model, cfg, data, ts)?;

    let mut cache = PlainFeatureCache::new(data.len());
    let mut metrics = Vec::with_capacity(ts.tasks.len() + 1);
    let out0 = evaluate(&model, cfg, data, &ts.test_through(0), &mut cache)?;
    metrics.push(task_metrics_at(0, &out0, ts)?);
    save_task_checkpoint(cfg, &model, 0, &metrics, ckpt_dir)?;

    for t in 1..=ts.tasks.len() {
        incremental_step(&mut model, cfg, data, &ts.tasks[t - 1], t)?;
        if cfg.refresh_base_prototypes {
            refresh_base_prototypes(&mut model, cfg, data, &ts.base_train)?;
        }
        let out = evaluate(&model, cfg, data, &ts.test_through(t), &mut cache)?;
        metrics.push(task_metrics_at(t, &out, ts)?);
        save_task_checkpoint(cfg, &model, t, &metrics, ckpt_dir)?;
    }

    let report = MetricsReport::from_task_metrics(cfg.seed, cfg.config_hash(), metrics)?;
    Ok(RunOutcome {
        report,
        model,
        pretrain_losses,
        base_log,
    })
}

/// Continue a checkpointed run through the remaining incremental tasks.
pub fn resume_experiment(
    ckpt: Checkpoint,
    data: &Dataset,
    ts: &TaskStream,
    ckpt_dir: Option<&Path>,
) -> Result<(MetricsReport, Model<f32>)> {
    let cfg = ckpt.config.clone();
    let mut model = ckpt.model;
    let mut metrics = ckpt.metrics_so_far;
    if metrics.len() != ckpt.task_index + 1 {
        return Err(CoreError::contract(
            "checkpoint metrics inconsistent with task index",
        ));
    }
    let mut cache = PlainFeatureCache::new(data.len());
    for t in (ckpt.task_index + 1)..=ts.tasks.len() {
        incremental_step(&mut model, &cfg, data, &ts.tasks[t - 1], t)?;
        if cfg.refresh_base_prototypes {
            refresh_base_prototypes(&mut model, &cfg, data, &ts.base_train)?;
        }
        let out = evaluate(&model, &cfg, data, &ts.test_through(t), &mut cache)?;
        metrics.push(task_metrics_at(t, &out, ts)?);
        save_task_checkpoint(&cfg, &model, t, &metrics, ckpt_dir)?;
    }
    let report = MetricsReport::from_task_metrics(cfg.seed, cfg.config_hash(), metrics)?;
    Ok((report, model))
}
