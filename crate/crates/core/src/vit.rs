//! Minimal vision transformer with per-layer prompt insertion.
//!
//! Pre-norm blocks, per-head projection matrices, no biases inside
//! attention. Prompts carry no positional embedding and are re-inserted
//! fresh at each prompted layer; their output rows are discarded before the
//! sequence moves on (deep-insertion semantics), so the retained sequence is
//! always `[cls; patches]`.
//!
//! Two forward paths exist: a graph path for training and a no-tape path
//! for evaluation/diagnostics. Both call the same kernels in the same order
//! and produce bitwise-identical values (see `graph_eval_parity` test).

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels;
use crate::optim::Param;
use crate::rng::Stream;
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

pub const INIT_SD: f64 = 0.02;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        // Desk-scale geometry: trains in minutes on CPU while exercising
        // every mechanism.
        ViTConfig {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            embed_dim: 64,
            num_layers: 6,
            num_heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(CoreError::config(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(CoreError::config(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(CoreError::config("num_layers/channels/mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams<F: Real> {
    pub ln1_g: Param<F>,
    pub ln1_b: Param<F>,
    pub wq: Vec<Param<F>>,
    pub wk: Vec<Param<F>>,
    pub wv: Vec<Param<F>>,
    pub wo: Param<F>,
    pub ln2_g: Param<F>,
    pub ln2_b: Param<F>,
    pub mlp_w1: Param<F>,
    pub mlp_b1: Param<F>,
    pub mlp_w2: Param<F>,
    pub mlp_b2: Param<F>,
}

#[derive(Debug, Clone)]
pub struct ViTParams<F: Real> {
    pub patch_w: Param<F>,
    pub patch_b: Param<F>,
    pub cls: Param<F>,
    /// Positional embedding covering cls + patch tokens only; prompt tokens
    /// never receive a positional row.
    pub pos: Param<F>,
    pub layers: Vec<LayerParams<F>>,
    pub lnf_g: Param<F>,
    pub lnf_b: Param<F>,
}

impl<F: Real> ViTParams<F> {
    pub fn init(cfg: &ViTConfig, stream: &mut Stream) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let dk = cfg.head_dim();
        let hidden = d * cfg.mlp_ratio;
        let lx = cfg.num_patches();
        // fan-in scaled init: plain SGD on a from-scratch desk-scale ViT
        // stalls with a flat 0.02 everywhere
        let randn = |shape: Vec<usize>, s: &mut Stream| {
            let sd = 1.0 / (shape[0] as f64).sqrt();
            Tensor::randn(shape, s, 0.0, sd)
        };
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let mut heads_q = Vec::new();
            let mut heads_k = Vec::new();
            let mut heads_v = Vec::new();
            for h in 0..cfg.num_heads {
                heads_q.push(Param::new(format!("vit/l{l}/h{h}/wq"), randn(vec![d, dk], stream)));
                heads_k.push(Param::new(format!("vit/l{l}/h{h}/wk"), randn(vec![d, dk], stream)));
                heads_v.push(Param::new(format!("vit/l{l}/h{h}/wv"), randn(vec![d, dk], stream)));
            }
            layers.push(LayerParams {
                ln1_g: Param::new(format!("vit/l{l}/ln1_g"), Tensor::full(vec![1, d], F::one())),
                ln1_b: Param::new(format!("vit/l{l}/ln1_b"), Tensor::zeros(vec![1, d])),
                wq: heads_q,
                wk: heads_k,
                wv: heads_v,
                wo: Param::new(format!("vit/l{l}/wo"), randn(vec![d, d], stream)),
                ln2_g: Param::new(format!("vit/l{l}/ln2_g"), Tensor::full(vec![1, d], F::one())),
                ln2_b: Param::new(format!("vit/l{l}/ln2_b"), Tensor::zeros(vec![1, d])),
                mlp_w1: Param::new(format!("vit/l{l}/mlp_w1"), randn(vec![d, hidden], stream)),
                mlp_b1: Param::new(format!("vit/l{l}/mlp_b1"), Tensor::zeros(vec![1, hidden])),
                mlp_w2: Param::new(format!("vit/l{l}/mlp_w2"), randn(vec![hidden, d], stream)),
                mlp_b2: Param::new(format!("vit/l{l}/mlp_b2"), Tensor::zeros(vec![1, d])),
            });
        }
        Ok(ViTParams {
            patch_w: Param::new("vit/patch_w", randn(vec![cfg.patch_dim(), d], stream)),
            patch_b: Param::new("vit/patch_b", Tensor::zeros(vec![1, d])),
            cls: Param::new("vit/cls", Tensor::randn(vec![1, d], stream, 0.0, INIT_SD)),
            pos: Param::new("vit/pos", Tensor::randn(vec![1 + lx, d], stream, 0.0, INIT_SD)),
            layers,
            lnf_g: Param::new("vit/lnf_g", Tensor::full(vec![1, d], F::one())),
            lnf_b: Param::new("vit/lnf_b", Tensor::zeros(vec![1, d])),
        })
    }

    /// All parameters in a fixed traversal order.
    pub fn params(&self) -> Vec<&Param<F>> {
        let mut out = vec![&self.patch_w, &self.patch_b, &self.cls, &self.pos];
        for l in &self.layers {
            out.push(&l.ln1_g);
            out.push(&l.ln1_b);
            for h in 0..l.wq.len() {
                out.push(&l.wq[h]);
                out.push(&l.wk[h]);
                out.push(&l.wv[h]);
            }
            out.push(&l.wo);
            out.push(&l.ln2_g);
            out.push(&l.ln2_b);
            out.push(&l.mlp_w1);
            out.push(&l.mlp_b1);
            out.push(&l.mlp_w2);
            out.push(&l.mlp_b2);
        }
        out.push(&self.lnf_g);
        out.push(&self.lnf_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.cls,
            &mut self.pos,
        ];
        for l in &mut self.layers {
            out.push(&mut l.ln1_g);
            out.push(&mut l.ln1_b);
            for (q, (k, v)) in l.wq.iter_mut().zip(l.wk.iter_mut().zip(l.wv.iter_mut())) {
                out.push(q);
                out.push(k);
                out.push(v);
            }
            out.push(&mut l.wo);
            out.push(&mut l.ln2_g);
            out.push(&mut l.ln2_b);
            out.push(&mut l.mlp_w1);
            out.push(&mut l.mlp_b1);
            out.push(&mut l.mlp_w2);
            out.push(&mut l.mlp_b2);
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in self.params_mut() {
            p.frozen = frozen;
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.params().iter().all(|p| p.frozen)
    }

    pub fn cast<G: Real>(&self) -> ViTParams<G> {
        ViTParams {
            patch_w: self.patch_w.cast(),
            patch_b: self.patch_b.cast(),
            cls: self.cls.cast(),
            pos: self.pos.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: l.ln1_g.cast(),
                    ln1_b: l.ln1_b.cast(),
                    wq: l.wq.iter().map(Param::cast).collect(),
                    wk: l.wk.iter().map(Param::cast).collect(),
                    wv: l.wv.iter().map(Param::cast).collect(),
                    wo: l.wo.cast(),
                    ln2_g: l.ln2_g.cast(),
                    ln2_b: l.ln2_b.cast(),
                    mlp_w1: l.mlp_w1.cast(),
                    mlp_b1: l.mlp_b1.cast(),
                    mlp_w2: l.mlp_w2.cast(),
                    mlp_b2: l.mlp_b2.cast(),
                })
                .collect(),
            lnf_g: self.lnf_g.cast(),
            lnf_b: self.lnf_b.cast(),
        }
    }
}

/// Rearrange a flat H*W*C image (values in [0,1], row-major, channel-last)
/// into the patch matrix [L_x, patch_size^2 * C], raster patch order.
pub fn patchify<F: Real>(image: &[F], cfg: &ViTConfig) -> Result<Tensor<F>> {
    let (h, w, c, ps) = (cfg.image_size, cfg.image_size, cfg.channels, cfg.patch_size);
    if image.len() != h * w * c {
        return Err(CoreError::dim("patchify", &[image.len()], &[h, w, c]));
    }
    let grid = h / ps;
    let pd = cfg.patch_dim();
    let mut out = Vec::with_capacity(grid * grid * pd);
    for py in 0..grid {
        for px in 0..grid {
            for y in 0..ps {
                for x in 0..ps {
                    let (iy, ix) = (py * ps + y, px * ps + x);
                    let base = (iy * w + ix) * c;
                    out.extend_from_slice(&image[base..base + c]);
                }
            }
        }
    }
    Tensor::new(vec![grid * grid, pd], out)
}

// ---------------------------------------------------------------------------
// Graph (training) path
// ---------------------------------------------------------------------------

pub struct LayerNodes {
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub wq: Vec<NodeId>,
    pub wk: Vec<NodeId>,
    pub wv: Vec<NodeId>,
    pub wo: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub mlp_w1: NodeId,
    pub mlp_b1: NodeId,
    pub mlp_w2: NodeId,
    pub mlp_b2: NodeId,
}

pub struct ViTNodes {
    pub patch_w: NodeId,
    pub patch_b: NodeId,
    pub cls: NodeId,
    pub pos: NodeId,
    pub layers: Vec<LayerNodes>,
    pub lnf_g: NodeId,
    pub lnf_b: NodeId,
}

impl ViTNodes {
    pub fn bind<F: Real>(params: &ViTParams<F>, g: &mut Graph<F>) -> Result<Self> {
        let mut layers = Vec::with_capacity(params.layers.len());
        for l in &params.layers {
            layers.push(LayerNodes {
                ln1_g: l.ln1_g.bind(g)?,
                ln1_b: l.ln1_b.bind(g)?,
                wq: l.wq.iter().map(|p| p.bind(g)).collect::<Result<_>>()?,
                wk: l.wk.iter().map(|p| p.bind(g)).collect::<Result<_>>()?,
                wv: l.wv.iter().map(|p| p.bind(g)).collect::<Result<_>>()?,
                wo: l.wo.bind(g)?,
                ln2_g: l.ln2_g.bind(g)?,
                ln2_b: l.ln2_b.bind(g)?,
                mlp_w1: l.mlp_w1.bind(g)?,
                mlp_b1: l.mlp_b1.bind(g)?,
                mlp_w2: l.mlp_w2.bind(g)?,
                mlp_b2: l.mlp_b2.bind(g)?,
            });
        }
        Ok(ViTNodes {
            patch_w: params.patch_w.bind(g)?,
            patch_b: params.patch_b.bind(g)?,
            cls: params.cls.bind(g)?,
            pos: params.pos.bind(g)?,
            layers,
            lnf_g: params.lnf_g.bind(g)?,
            lnf_b: params.lnf_b.bind(g)?,
        })
    }

    /// Gradients of every backbone parameter, aligned with `ViTParams::params_mut`.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.patch_w, self.patch_b, self.cls, self.pos];
        for l in &self.layers {
            out.push(l.ln1_g);
            out.push(l.ln1_b);
            for h in 0..l.wq.len() {
                out.push(l.wq[h]);
                out.push(l.wk[h]);
                out.push(l.wv[h]);
            }
            out.push(l.wo);
            out.push(l.ln2_g);
            out.push(l.ln2_b);
            out.push(l.mlp_w1);
            out.push(l.mlp_b1);
            out.push(l.mlp_w2);
            out.push(l.mlp_b2);
        }
        out.push(self.lnf_g);
        out.push(self.lnf_b);
        out
    }
}

/// Patch embedding on the graph: projection + positional rows 1.. applied.
pub fn patch_embed_graph<F: Real>(
    g: &mut Graph<F>,
    nodes: &ViTNodes,
    cfg: &ViTConfig,
    image: &[F],
) -> Result<NodeId> {
    let patches = g.constant(patchify(image, cfg)?)?;
    let proj = g.matmul(patches, nodes.patch_w)?;
    let proj = g.add_bias(proj, nodes.patch_b)?;
    let lx = cfg.num_patches();
    let pos = g.slice_rows(nodes.pos, 1, 1 + lx)?;
    g.add(proj, pos)
}

fn cls_token_graph<F: Real>(g: &mut Graph<F>, nodes: &ViTNodes) -> Result<NodeId> {
    let pos0 = g.slice_rows(nodes.pos, 0, 1)?;
    g.add(nodes.cls, pos0)
}

/// One pre-norm transformer block over the given sequence.
pub fn block_graph<F: Real>(
    g: &mut Graph<F>,
    l: &LayerNodes,
    seq: NodeId,
    head_dim: usize,
) -> Result<NodeId> {
    let x = g.layer_norm(seq, l.ln1_g, l.ln1_b)?;
    let scale = F::of(1.0 / (head_dim as f64).sqrt());
    let mut heads = Vec::with_capacity(l.wq.len());
    for h in 0..l.wq.len() {
        let q = g.matmul(x, l.wq[h])?;
        let k = g.matmul(x, l.wk[h])?;
        let v = g.matmul(x, l.wv[h])?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax_rows(scores)?;
        heads.push(g.matmul(attn, v)?);
    }
    let cat = g.concat_cols(&heads)?;
    let msa = g.matmul(cat, l.wo)?;
    let s1 = g.add(seq, msa)?;
    let x2 = g.layer_norm(s1, l.ln2_g, l.ln2_b)?;
    let m = g.matmul(x2, l.mlp_w1)?;
    let m = g.add_bias(m, l.mlp_b1)?;
    let m = g.gelu(m)?;
    let m = g.matmul(m, l.mlp_w2)?;
    let m = g.add_bias(m, l.mlp_b2)?;
    g.add(s1, m)
}

/// Transformer block over `[prompts; h]`; prompt output rows are discarded.
/// With no prompts this is a plain block.
pub fn msa_layer_graph<F: Real>(
    g: &mut Graph<F>,
    l: &LayerNodes,
    h: NodeId,
    prompts: Option<NodeId>,
    head_dim: usize,
) -> Result<NodeId> {
    match prompts {
        None => block_graph(g, l, h, head_dim),
        Some(p) => {
            let lp = g.shape(p)[0];
            let rows = g.shape(h)[0];
            let s = g.concat_rows(&[p, h])?;
            let out = block_graph(g, l, s, head_dim)?;
            g.slice_rows(out, lp, lp + rows)
        }
    }
}

/// Full forward to the cls feature. `prompts[l]` supplies the prompt block
/// for layer `l` (None for unprompted layers). Layer 0 uses the input
/// assembly `[cls; p0; patches]`; deeper layers prepend `[p; h]`. Both
/// layouts give identical retained-token outputs since prompts carry no
/// positional embedding.
pub fn vit_forward_graph<F: Real>(
    g: &mut Graph<F>,
    nodes: &ViTNodes,
    cfg: &ViTConfig,
    image: &[F],
    prompts: &[Option<NodeId>],
) -> Result<NodeId> {
    if prompts.len() != cfg.num_layers {
        return Err(CoreError::config(format!(
            "expected one prompt slot per layer ({}), got {}",
            cfg.num_layers,
            prompts.len()
        )));
    }
    let x_e = patch_embed_graph(g, nodes, cfg, image)?;
    let cls = cls_token_graph(g, nodes)?;
    let head_dim = cfg.head_dim();
    let mut h = match prompts[0] {
        // Eq-5-style assembly: [cls; p0; x_e], prompt rows dropped after the block.
        Some(p) => {
            let lp = g.shape(p)[0];
            let rows = 1 + cfg.num_patches() + lp;
            let s = g.concat_rows(&[cls, p, x_e])?;
            let out = block_graph(g, nodes.layers.first().unwrap(), s, head_dim)?;
            let cls_out = g.slice_rows(out, 0, 1)?;
            let rest = g.slice_rows(out, 1 + lp, rows)?;
            g.concat_rows(&[cls_out, rest])?
        }
        None => {
            let s = g.concat_rows(&[cls, x_e])?;
            block_graph(g, nodes.layers.first().unwrap(), s, head_dim)?
        }
    };
    for l in 1..cfg.num_layers {
        h = msa_layer_graph(g, &nodes.layers[l], h, prompts[l], head_dim)?;
    }
    let hn = g.layer_norm(h, nodes.lnf_g, nodes.lnf_b)?;
    g.slice_rows(hn, 0, 1)
}

// ---------------------------------------------------------------------------
// Eval (no-tape) path
// ---------------------------------------------------------------------------

/// Activations of one prompted block: the input sequence (prompts included)
/// and the per-head attention matrices.
#[derive(Debug, Clone)]
pub struct LayerActivation<F: Real> {
    pub seq: Tensor<F>,
    pub attn: Vec<Tensor<F>>,
    /// Row range the prompt tokens occupy within `seq`, if any.
    pub prompt_range: Option<(usize, usize)>,
}

fn block_eval<F: Real>(
    params: &LayerParams<F>,
    seq: &Tensor<F>,
    head_dim: usize,
    attn_out: Option<&mut Vec<Tensor<F>>>,
) -> Tensor<F> {
    let x = kernels::layer_norm(seq, &params.ln1_g.value, &params.ln1_b.value);
    let scale = F::of(1.0 / (head_dim as f64).sqrt());
    let mut heads = Vec::with_capacity(params.wq.len());
    let mut attns = Vec::new();
    for h in 0..params.wq.len() {
        let q = kernels::matmul(&x, &params.wq[h].value);
        let k = kernels::matmul(&x, &params.wk[h].value);
        let v = kernels::matmul(&x, &params.wv[h].value);
        let kt = kernels::transpose(&k);
        let scores = kernels::matmul(&q, &kt).map(|s| s * scale);
        let attn = kernels::softmax_rows(&scores);
        heads.push(kernels::matmul(&attn, &v));
        if attn_out.is_some() {
            attns.push(attn);
        }
    }
    if let Some(out) = attn_out {
        *out = attns;
    }
    // concat heads along features
    let l = seq.shape()[0];
    let d: usize = heads.iter().map(|h| h.shape()[1]).sum();
    let mut cat = Vec::with_capacity(l * d);
    for i in 0..l {
        for hd in &heads {
            let hc = hd.shape()[1];
            cat.extend_from_slice(&hd.data()[i * hc..(i + 1) * hc]);
        }
    }
    let cat = Tensor::new(vec![l, d], cat).unwrap();
    let msa = kernels::matmul(&cat, &params.wo.value);
    let s1 = kernels::binary(seq, &msa, |a, b| a + b);
    let x2 = kernels::layer_norm(&s1, &params.ln2_g.value, &params.ln2_b.value);
    let m = kernels::matmul(&x2, &params.mlp_w1.value);
    let m = kernels::add_bias(&m, &params.mlp_b1.value);
    let m = m.map(kernels::gelu_scalar);
    let m = kernels::matmul(&m, &params.mlp_w2.value);
    let m = kernels::add_bias(&m, &params.mlp_b2.value);
    kernels::binary(&s1, &m, |a, b| a + b)
}

fn slice_rows_t<F: Real>(x: &Tensor<F>, start: usize, end: usize) -> Tensor<F> {
    let (_, c) = x.dims2().unwrap();
    Tensor::new(
        vec![end - start, c],
        x.data()[start * c..end * c].to_vec(),
    )
    .unwrap()
}

fn concat_rows_t<F: Real>(parts: &[&Tensor<F>]) -> Tensor<F> {
    let d = parts[0].shape()[1];
    let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(rows * d);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, d], data).unwrap()
}

/// Forward pass without gradient tracking. Returns the cls feature and,
/// when requested, per-layer activations with attention matrices.
pub fn vit_forward_eval<F: Real>(
    params: &ViTParams<F>,
    cfg: &ViTConfig,
    image: &[F],
    prompts: &[Option<Tensor<F>>],
    keep_activations: bool,
) -> Result<(Tensor<F>, Option<Vec<LayerActivation<F>>>)> {
    if prompts.len() != cfg.num_layers {
        return Err(CoreError::config(format!(
            "expected one prompt slot per layer ({}), got {}",
            cfg.num_layers,
            prompts.len()
        )));
    }
    let patches = patchify(image, cfg)?;
    let proj = kernels::matmul(&patches, &params.patch_w.value);
    let proj = kernels::add_bias(&proj, &params.patch_b.value);
    let lx = cfg.num_patches();
    let pos_patches = slice_rows_t(&params.pos.value, 1, 1 + lx);
    let x_e = kernels::binary(&proj, &pos_patches, |a, b| a + b);
    let pos0 = slice_rows_t(&params.pos.value, 0, 1);
    let cls = kernels::binary(&params.cls.value, &pos0, |a, b| a + b);

    let head_dim = cfg.head_dim();
    let mut acts: Vec<LayerActivation<F>> = Vec::new();
    let mut h = concat_rows_t(&[&cls, &x_e]);
    for l in 0..cfg.num_layers {
        let (seq, range) = match (&prompts[l], l) {
            (Some(p), 0) => {
                let lp = p.shape()[0];
                (concat_rows_t(&[&cls, p, &x_e]), Some((1, 1 + lp)))
            }
            (Some(p), _) => {
                let lp = p.shape()[0];
                (concat_rows_t(&[p, &h]), Some((0, lp)))
            }
            (None, _) => (h.clone(), None),
        };
        let mut attns = Vec::new();
        let out = block_eval(
            &params.layers[l],
            &seq,
            head_dim,
            keep_activations.then_some(&mut attns),
        );
        if keep_activations {
            acts.push(LayerActivation {
                seq: seq.clone(),
                attn: attns,
                prompt_range: range,
            });
        }
        h = match range {
            Some((start, end)) => {
                if start == 0 {
                    slice_rows_t(&out, end, out.shape()[0])
                } else {
                    let cls_out = slice_rows_t(&out, 0, 1);
                    let rest = slice_rows_t(&out, end, out.shape()[0]);
                    concat_rows_t(&[&cls_out, &rest])
                }
            }
            None => out,
        };
    }
    let hn = kernels::layer_norm(&h, &params.lnf_g.value, &params.lnf_b.value);
    let feature = slice_rows_t(&hn, 0, 1);
    if !feature.all_finite() {
        return Err(CoreError::numeric("vit_forward", "non-finite feature"));
    }
    Ok((feature, keep_activations.then_some(acts)))
}

/// Plain backbone feature f(x): forward with no prompts anywhere.
pub fn plain_feature<F: Real>(
    params: &ViTParams<F>,
    cfg: &ViTConfig,
    image: &[F],
) -> Result<Tensor<F>> {
    let prompts: Vec<Option<Tensor<F>>> = vec![None; cfg.num_layers];
    Ok(vit_forward_eval(params, cfg, image, &prompts, false)?.0)
}

/// Attention mass each query places on the tokens in `range`, per head:
/// one [L, range_len] matrix per head.
pub fn attention_to_prompts<F: Real>(
    act: &LayerActivation<F>,
    range: (usize, usize),
) -> Result<Vec<Tensor<F>>> {
    let (start, end) = range;
    let mut out = Vec::with_capacity(act.attn.len());
    for a in &act.attn {
        let (l, cols) = a.dims2()?;
        if start >= end || end > cols {
            return Err(CoreError::contract(format!(
                "prompt range {start}..{end} out of bounds for {cols} keys"
            )));
        }
        let mut data = Vec::with_capacity(l * (end - start));
        for i in 0..l {
            data.extend_from_slice(&a.data()[i * cols + start..i * cols + end]);
        }
        out.push(Tensor::new(vec![l, end - start], data).unwrap());
    }
    Ok(out)
}

/// Input assembly x_p = [cls; p0; x_e] (plain tensor math, used by tests and
/// the layer-0 path).
pub fn assemble_input<F: Real>(
    cls: &Tensor<F>,
    prompts: Option<&Tensor<F>>,
    x_e: &Tensor<F>,
) -> Result<Tensor<F>> {
    let d = cls.shape()[1];
    if x_e.shape()[1] != d || prompts.map_or(false, |p| p.shape()[1] != d) {
        return Err(CoreError::dim(
            "assemble_input",
            cls.shape(),
            prompts.map_or(x_e.shape(), |p| p.shape()),
        ));
    }
    Ok(match prompts {
        Some(p) => concat_rows_t(&[cls, p, x_e]),
        None => concat_rows_t(&[cls, x_e]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{tag, RootSeed};

    fn micro_cfg() -> ViTConfig {
        ViTConfig {
            image_size: 16,
            channels: 1,
            patch_size: 8,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
        }
    }

    fn rand_image(cfg: &ViTConfig, seed: u64) -> Vec<f32> {
        let mut s = RootSeed(seed).stream(&[tag::DATA_SAMPLE, 77]);
        (0..cfg.image_size * cfg.image_size * cfg.channels)
            .map(|_| s.uniform(0.0, 1.0) as f32)
            .collect()
    }

    #[test]
    fn patch_count_shape_arithmetic() {
        let cfg = ViTConfig {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            ..ViTConfig::default()
        };
        assert_eq!(cfg.num_patches(), 16);
        let one = ViTConfig {
            image_size: 16,
            channels: 1,
            patch_size: 16,
            ..micro_cfg()
        };
        assert_eq!(one.num_patches(), 1);
    }

    #[test]
    fn indivisible_patch_size_rejected() {
        let cfg = ViTConfig {
            image_size: 32,
            patch_size: 5,
            ..ViTConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(CoreError::Config(_))));
    }

    #[test]
    fn wrong_image_length_rejected() {
        let cfg = micro_cfg();
        let img = vec![0.5f32; 10];
        assert!(matches!(
            patchify(&img, &cfg),
            Err(CoreError::Dim { .. })
        ));
    }

    #[test]
    fn assemble_input_layout() {
        let cls = Tensor::<f32>::from_rows(&[vec![9.0, 9.0]]);
        let p = Tensor::<f32>::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]);
        let xe = Tensor::<f32>::from_rows(&[vec![3.0, 3.0]]);
        let xp = assemble_input(&cls, Some(&p), &xe).unwrap();
        assert_eq!(xp.shape(), &[4, 2]);
        // cls at index 0, prompt tokens verbatim at 1..=2
        assert_eq!(xp.row(0), &[9.0, 9.0]);
        assert_eq!(xp.row(1), &[1.0, 1.0]);
        assert_eq!(xp.row(2), &[2.0, 2.0]);
        assert_eq!(xp.row(3), &[3.0, 3.0]);
        let no_p = assemble_input(&cls, None, &xe).unwrap();
        assert_eq!(no_p.shape(), &[2, 2]);
        let bad = Tensor::<f32>::from_rows(&[vec![1.0, 2.0, 3.0]]);
        assert!(assemble_input(&cls, Some(&bad), &xe).is_err());
    }

    /// Independent dense recomputation of the attention equations for a
    /// 3-token, D=2, single-head layer with crafted weights.
    #[test]
    fn attention_matches_dense_recomputation() {
        let d = 2usize;
        let tokens = [[0.3f64, -0.7], [1.1, 0.4], [-0.2, 0.9]];
        let wq = [[0.5f64, -0.3], [0.8, 0.1]];
        let wk = [[-0.6f64, 0.7], [0.2, 0.9]];
        let wv = [[1.0f64, 0.0], [0.0, 1.0]];

        // oracle: explicit loops, no shared kernels
        let matvec = |m: &[[f64; 2]; 2], v: &[f64; 2]| {
            [
                v[0] * m[0][0] + v[1] * m[1][0],
                v[0] * m[0][1] + v[1] * m[1][1],
            ]
        };
        let q: Vec<[f64; 2]> = tokens.iter().map(|t| matvec(&wq, t)).collect();
        let k: Vec<[f64; 2]> = tokens.iter().map(|t| matvec(&wk, t)).collect();
        let v: Vec<[f64; 2]> = tokens.iter().map(|t| matvec(&wv, t)).collect();
        let scale = 1.0 / (d as f64).sqrt();
        let mut expect = vec![[0.0f64; 2]; 3];
        for i in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) * scale)
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..3 {
                let a = exps[j] / z;
                expect[i][0] += a * v[j][0];
                expect[i][1] += a * v[j][1];
            }
        }

        // implementation path: single-head attention via graph ops
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(
                Tensor::from_rows(&tokens.iter().map(|t| t.to_vec()).collect::<Vec<_>>()),
                false,
            )
            .unwrap();
        let wq_t = g
            .leaf(Tensor::from_rows(&[wq[0].to_vec(), wq[1].to_vec()]), false)
            .unwrap();
        let wk_t = g
            .leaf(Tensor::from_rows(&[wk[0].to_vec(), wk[1].to_vec()]), false)
            .unwrap();
        let wv_t = g
            .leaf(Tensor::from_rows(&[wv[0].to_vec(), wv[1].to_vec()]), false)
            .unwrap();
        let q_n = g.matmul(x, wq_t).unwrap();
        let k_n = g.matmul(x, wk_t).unwrap();
        let v_n = g.matmul(x, wv_t).unwrap();
        let kt = g.transpose(k_n).unwrap();
        let scores = g.matmul(q_n, kt).unwrap();
        let scores = g.scale(scores, scale).unwrap();
        let attn = g.softmax_rows(scores).unwrap();
        let out = g.matmul(attn, v_n).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!(
                    (g.value(out).at2(i, j) - expect[i][j]).abs() < 1e-5,
                    "mismatch at ({i},{j})"
                );
            }
        }
    }

    /// Eq.-7-style quotient on a crafted 4-token sequence vs the attention
    /// matrix produced by the eval forward.
    #[test]
    fn attention_row_matches_direct_softmax_quotient() {
        let cfg = ViTConfig {
            image_size: 16,
            channels: 1,
            patch_size: 8,
            embed_dim: 4,
            num_layers: 1,
            num_heads: 1,
            mlp_ratio: 2,
        };
        let mut stream = RootSeed(5).stream(&[tag::INIT_BACKBONE]);
        let params = ViTParams::<f64>::init(&cfg, &mut stream).unwrap();
        let image: Vec<f64> = rand_image(&cfg, 3).iter().map(|&v| v as f64).collect();
        let (_, acts) = vit_forward_eval(&params, &cfg, &image, &[None], true).unwrap();
        let act = &acts.unwrap()[0];
        let a = &act.attn[0];

        // recompute every row of A by the direct formula from Q,K
        let x = kernels::layer_norm(&act.seq, &params.layers[0].ln1_g.value, &params.layers[0].ln1_b.value);
        let q = kernels::matmul(&x, &params.layers[0].wq[0].value);
        let kk = kernels::matmul(&x, &params.layers[0].wk[0].value);
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        let l = act.seq.shape()[0];
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| kernels::dot(q.row(i), kk.row(j)) * scale)
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for j in 0..l {
                let direct = (scores[j] - mx).exp() / z;
                assert!((a.at2(i, j) - direct).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_tokens_get_identical_outputs() {
        // two bitwise-identical tokens anywhere in the sequence receive
        // identical output rows
        let cfg = micro_cfg();
        let mut stream = RootSeed(11).stream(&[tag::INIT_BACKBONE]);
        let params = ViTParams::<f32>::init(&cfg, &mut stream).unwrap();
        let tok = Tensor::<f32>::from_rows(&[
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2],
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
        ]);
        let out = block_eval(&params.layers[0], &tok, cfg.head_dim(), None);
        assert_eq!(out.row(0), out.row(2));
    }

    #[test]
    fn graph_eval_parity_is_bitwise() {
        let cfg = micro_cfg();
        let mut stream = RootSeed(23).stream(&[tag::INIT_BACKBONE]);
        let params = ViTParams::<f32>::init(&cfg, &mut stream).unwrap();
        let image = rand_image(&cfg, 1);
        let mut ps = RootSeed(23).stream(&[tag::INIT_TIP]);
        let prompt = Tensor::<f32>::randn(vec![3, cfg.embed_dim], &mut ps, 0.0, 0.02);
        let prompts_t = vec![Some(prompt.clone()), None];

        let (feat_eval, _) = vit_forward_eval(&params, &cfg, &image, &prompts_t, false).unwrap();

        let mut g = Graph::<f32>::new();
        let nodes = ViTNodes::bind(&params, &mut g).unwrap();
        let p_node = g.constant(prompt).unwrap();
        let feat_node =
            vit_forward_graph(&mut g, &nodes, &cfg, &image, &[Some(p_node), None]).unwrap();
        assert!(g.value(feat_node).bits_eq(&feat_eval));
    }

    #[test]
    fn zero_prompt_layers_is_plain_vit() {
        let cfg = micro_cfg();
        let mut stream = RootSeed(31).stream(&[tag::INIT_BACKBONE]);
        let params = ViTParams::<f32>::init(&cfg, &mut stream).unwrap();
        let image = rand_image(&cfg, 2);
        let f1 = plain_feature(&params, &cfg, &image).unwrap();
        let (f2, _) =
            vit_forward_eval(&params, &cfg, &image, &[None, None], false).unwrap();
        assert!(f1.bits_eq(&f2));
        assert_eq!(f1.shape(), &[1, cfg.embed_dim]);
    }

    #[test]
    fn prompted_forward_is_deterministic() {
        let cfg = micro_cfg();
        let mut stream = RootSeed(41).stream(&[tag::INIT_BACKBONE]);
        let params = ViTParams::<f32>::init(&cfg, &mut stream).unwrap();
        let image = rand_image(&cfg, 9);
        let prompt = Tensor::<f32>::full(vec![2, cfg.embed_dim], 0.01);
        let prompts = vec![Some(prompt), None];
        let (a, _) = vit_forward_eval(&params, &cfg, &image, &prompts, false).unwrap();
        let (b, _) = vit_forward_eval(&params, &cfg, &image, &prompts, false).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn permuting_prompt_tokens_leaves_other_outputs_unchanged() {
        let cfg = micro_cfg();
        let mut stream = RootSeed(43).stream(&[tag::INIT_BACKBONE]);
        let params = ViTParams::<f32>::init(&cfg, &mut stream).unwrap();
        let image = rand_image(&cfg, 10);
        let p = Tensor::<f32>::from_rows(&[
            vec![0.01, -0.02, 0.03, 0.0, 0.01, 0.0, -0.01, 0.02],
            vec![-0.03, 0.01, 0.0, 0.02, -0.02, 0.01, 0.0, 0.0],
        ]);
        let p_swapped = Tensor::<f32>::from_rows(&[
            vec![-0.03, 0.01, 0.0, 0.02, -0.02, 0.01, 0.0, 0.0],
            vec![0.01, -0.02, 0.03, 0.0, 0.01, 0.0, -0.01, 0.02],
        ]);
        let (fa, _) =
            vit_forward_eval(&params, &cfg, &image, &[Some(p), None], false).unwrap();
        let (fb, _) =
            vit_forward_eval(&params, &cfg, &image, &[Some(p_swapped), None], false).unwrap();
        assert!(fa.max_abs_diff(&fb) < 1e-6);
    }

    #[test]
    fn uniform_attention_when_keys_identical() {
        // all keys identical -> uniform attention row
        let cfg = ViTConfig {
            image_size: 16,
            channels: 1,
            patch_size: 8,
            embed_dim: 4,
            num_layers: 1,
            num_heads: 1,
            mlp_ratio: 2,
        };
        let mut stream = RootSeed(51).stream(&[tag::INIT_BACKBONE]);
        let mut params = ViTParams::<f64>::init(&cfg, &mut stream).unwrap();
        // zero the key projection: every key becomes the zero vector
        params.layers[0].wk[0].value = Tensor::zeros(vec![4, 4]);
        let image: Vec<f64> = rand_image(&cfg, 8).iter().map(|&v| v as f64).collect();
        let (_, acts) = vit_forward_eval(&params, &cfg, &image, &[None], true).unwrap();
        let a = &acts.unwrap()[0].attn[0];
        let l = a.shape()[0];
        for i in 0..l {
            for j in 0..l {
                assert!((a.at2(i, j) - 1.0 / l as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = micro_cfg();
        let mut stream = RootSeed(3).stream(&[tag::INIT_BACKBONE]);
        let params = ViTParams::<f32>::init(&cfg, &mut stream).unwrap();
        let image = rand_image(&cfg, 4);
        let prompt = Tensor::<f32>::randn(
            vec![2, cfg.embed_dim],
            &mut RootSeed(3).stream(&[tag::INIT_TIP]),
            0.0,
            0.02,
        );
        let (_, acts) = vit_forward_eval(
            &params,
            &cfg,
            &image,
            &[Some(prompt.clone()), Some(prompt)],
            true,
        )
        .unwrap();
        for act in acts.unwrap() {
            for a in &act.attn {
                let (l, c) = a.dims2().unwrap();
                for i in 0..l {
                    let sum: f32 = (0..c).map(|j| a.at2(i, j)).sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn backbone_gradients_flow_when_unfrozen_and_stop_when_frozen() {
        let cfg = micro_cfg();
        let mut stream = RootSeed(61).stream(&[tag::INIT_BACKBONE]);
        let mut params = ViTParams::<f32>::init(&cfg, &mut stream).unwrap();
        let image = rand_image(&cfg, 12);

        let run = |params: &ViTParams<f32>| {
            let mut g = Graph::<f32>::new();
            let nodes = ViTNodes::bind(params, &mut g).unwrap();
            let f = vit_forward_graph(&mut g, &nodes, &cfg, &image, &[None, None]).unwrap();
            let sq = g.mul(f, f).unwrap();
            let loss = g.sum_all(sq).unwrap();
            let patch_w = nodes.patch_w;
            let grads = g.backward(loss).unwrap();
            grads.grad(patch_w).is_some()
        };
        assert!(run(&params));
        params.set_frozen(true);
        assert!(!run(&params));
    }
}
