//! Training losses: cosine-classifier cross-entropy with a diagonal-Gaussian
//! KL penalty (the empirical information-bottleneck loss), and the anchor
//! loss pulling features toward per-class anchor samples.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels;
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossConfig {
    /// Anchor-loss weight.
    pub lambda: f64,
    /// Weight on the KL term of the IB loss.
    pub kl_weight: f64,
    /// Cosine logits are divided by this scale before cross-entropy; raw
    /// cosines in [-1,1] make CE nearly flat.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            kl_weight: 1.0,
            temperature: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.kl_weight < 0.0 {
            return Err(CoreError::config("lambda and kl_weight must be >= 0"));
        }
        if self.temperature <= 0.0 {
            return Err(CoreError::config("temperature must be > 0"));
        }
        Ok(())
    }
}

/// Cosine similarity logits between a feature and every classifier row.
/// Exact-zero vectors are rejected; near-zero ones are guarded by the
/// epsilon inside the norm.
pub fn cosine_logits<F: Real>(g: &mut Graph<F>, w: NodeId, feature: NodeId) -> Result<NodeId> {
    let (k, d) = g.value(w).dims2()?;
    if g.value(feature).numel() != d {
        return Err(CoreError::dim("cosine_logits", g.shape(w), g.shape(feature)));
    }
    if g.value(feature).data().iter().all(|v| *v == F::zero()) {
        return Err(CoreError::numeric("cosine_logits", "zero-norm feature"));
    }
    for r in 0..k {
        if g.value(w).row(r).iter().all(|v| *v == F::zero()) {
            return Err(CoreError::numeric(
                "cosine_logits",
                format!("zero-norm classifier row {r}"),
            ));
        }
    }
    g.cosine_rows(w, feature)
}

/// Closed-form KL(N(mu, diag(sigma2)) || N(0, I)) =
/// 0.5 * sum(mu^2 + sigma^2 - 1 - ln sigma^2).
pub fn kl_diag_gaussian(mu: &[f64], sigma2: &[f64]) -> Result<f64> {
    if mu.len() != sigma2.len() {
        return Err(CoreError::dim("kl_diag_gaussian", &[mu.len()], &[sigma2.len()]));
    }
    if sigma2.iter().any(|&s| s <= 0.0) {
        return Err(CoreError::contract("kl_diag_gaussian: sigma^2 must be positive"));
    }
    Ok(0.5
        * mu.iter()
            .zip(sigma2)
            .map(|(&m, &s)| m * m + s - 1.0 - s.ln())
            .sum::<f64>())
}

/// KL term on the graph from a flat mean and flat log-variance:
/// 0.5 * sum(mu^2 + exp(lv) - 1 - lv).
pub fn kl_term_graph<F: Real>(g: &mut Graph<F>, mu_flat: NodeId, logvar: NodeId) -> Result<NodeId> {
    if g.shape(mu_flat) != g.shape(logvar) {
        return Err(CoreError::dim("kl_term", g.shape(mu_flat), g.shape(logvar)));
    }
    let mu2 = g.mul(mu_flat, mu_flat)?;
    let var = g.exp(logvar)?;
    let t = g.add(mu2, var)?;
    let t = g.add_scalar(t, F::of(-1.0))?;
    let t = g.sub(t, logvar)?;
    let s = g.sum_all(t)?;
    g.scale(s, F::of(0.5))
}

/// Empirical IB loss for one sample: temperature-scaled cosine cross-entropy
/// plus the summed per-layer KL terms.
pub fn ib_loss<F: Real>(
    g: &mut Graph<F>,
    logits: NodeId,
    label_row: usize,
    mu_flats: &[NodeId],
    logvars: &[NodeId],
    cfg: &LossConfig,
) -> Result<NodeId> {
    let k = g.value(logits).numel();
    if label_row >= k {
        return Err(CoreError::contract(format!(
            "label row {label_row} out of range for {k} classes"
        )));
    }
    if mu_flats.len() != logvars.len() {
        return Err(CoreError::contract("mu/logvar layer count mismatch"));
    }
    let scaled = g.scale(logits, F::of(1.0 / cfg.temperature))?;
    let row = g.reshape(scaled, vec![1, k])?;
    let lsm = g.log_softmax_rows(row)?;
    let mut onehot = Tensor::zeros(vec![1, k]);
    onehot.data_mut()[label_row] = F::one();
    let mask = g.constant(onehot)?;
    let picked = g.mul(lsm, mask)?;
    let picked = g.sum_all(picked)?;
    let mut loss = g.scale(picked, F::of(-1.0))?;
    if !mu_flats.is_empty() && cfg.kl_weight > 0.0 {
        let mut kl_total: Option<NodeId> = None;
        for (&m, &lv) in mu_flats.iter().zip(logvars) {
            let term = kl_term_graph(g, m, lv)?;
            kl_total = Some(match kl_total {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        let kl = g.scale(kl_total.unwrap(), F::of(cfg.kl_weight))?;
        loss = g.add(loss, kl)?;
    }
    Ok(loss)
}

/// Anchor loss L_c = 1 - cos(anchor, feature); the anchor feature is a
/// constant (cached at epoch start, not backpropagated through).
pub fn anchor_loss<F: Real>(
    g: &mut Graph<F>,
    feature: NodeId,
    anchor: &Tensor<F>,
) -> Result<NodeId> {
    if anchor.data().iter().all(|v| *v == F::zero())
        || g.value(feature).data().iter().all(|v| *v == F::zero())
    {
        return Err(CoreError::numeric("anchor_loss", "zero-norm vector"));
    }
    let d = anchor.numel();
    let row = Tensor::new(vec![1, d], anchor.data().to_vec())?;
    let a = g.constant(row)?;
    let cos = g.cosine_rows(a, feature)?;
    let cos = g.sum_all(cos)?;
    let neg = g.scale(cos, F::of(-1.0))?;
    g.add_scalar(neg, F::one())
}

/// L = L_IB + lambda * L_c.
pub fn total_loss<F: Real>(
    g: &mut Graph<F>,
    ib: NodeId,
    anchor: Option<NodeId>,
    lambda: f64,
) -> Result<NodeId> {
    match anchor {
        Some(a) if lambda > 0.0 => {
            let scaled = g.scale(a, F::of(lambda))?;
            g.add(ib, scaled)
        }
        _ => Ok(ib),
    }
}

/// Index of the sample whose feature has the largest cosine similarity with
/// the class mean; ties break toward the lowest sample id.
pub fn select_anchor<F: Real>(features: &[Tensor<F>], class_mean: &Tensor<F>) -> Result<usize> {
    if features.is_empty() {
        return Err(CoreError::contract("select_anchor: empty class"));
    }
    let mut best = 0usize;
    let mut best_cos = kernels::cosine(class_mean.data(), features[0].data());
    for (i, f) in features.iter().enumerate().skip(1) {
        let c = kernels::cosine(class_mean.data(), f.data());
        if c > best_cos {
            best_cos = c;
            best = i;
        }
    }
    Ok(best)
}

/// Per-class anchor features, refreshed at every epoch start.
#[derive(Debug, Clone, Default)]
pub struct AnchorTable<F: Real> {
    by_class: BTreeMap<u32, (usize, Tensor<F>)>,
}

impl<F: Real> AnchorTable<F> {
    /// Build from per-class feature lists: pick the sample closest (cosine)
    /// to its class mean and cache its feature.
    pub fn refresh(groups: &BTreeMap<u32, Vec<(usize, Tensor<F>)>>) -> Result<Self> {
        let mut by_class = BTreeMap::new();
        for (&class, entries) in groups {
            if entries.is_empty() {
                return Err(CoreError::contract(format!("anchor refresh: class {class} empty")));
            }
            let feats: Vec<Tensor<F>> = entries.iter().map(|(_, f)| f.clone()).collect();
            let mut mean = Tensor::zeros(feats[0].shape().to_vec());
            for f in &feats {
                for (a, b) in mean.data_mut().iter_mut().zip(f.data()) {
                    *a += *b;
                }
            }
            let inv = F::of(1.0 / feats.len() as f64);
            for v in mean.data_mut() {
                *v = *v * inv;
            }
            let winner = select_anchor(&feats, &mean)?;
            by_class.insert(class, (entries[winner].0, feats[winner].clone()));
        }
        Ok(AnchorTable { by_class })
    }

    pub fn feature(&self, class: u32) -> Option<&Tensor<F>> {
        self.by_class.get(&class).map(|(_, f)| f)
    }

    pub fn sample_id(&self, class: u32) -> Option<usize> {
        self.by_class.get(&class).map(|(s, _)| *s)
    }

    pub fn len(&self) -> usize {
        self.by_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_class.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{tag, RootSeed};

    fn graph_logits(w_rows: &[Vec<f64>], f: &[f64]) -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_rows(w_rows), false).unwrap();
        let feat = g.leaf(Tensor::from_rows(&[f.to_vec()]), false).unwrap();
        let y = cosine_logits(&mut g, w, feat).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn parallel_orthogonal_and_scale_invariance() {
        let w = vec![vec![2.0, 0.0], vec![0.0, 5.0]];
        let y = graph_logits(&w, &[4.0, 0.0]);
        assert!((y[0] - 1.0).abs() < 1e-7);
        assert!(y[1].abs() < 1e-9);
        // cosine_logits(c*f, W) == cosine_logits(f, W) for c > 0
        let y2 = graph_logits(&w, &[0.4, 0.0]);
        assert!((y[0] - y2[0]).abs() < 1e-6);
    }

    #[test]
    fn zero_vectors_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g
            .leaf(Tensor::from_rows(&[vec![0.0, 0.0]]), false)
            .unwrap();
        let f = g.leaf(Tensor::from_rows(&[vec![1.0, 0.0]]), false).unwrap();
        assert!(matches!(
            cosine_logits(&mut g, w, f),
            Err(CoreError::Numeric { .. })
        ));
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_rows(&[vec![1.0, 0.0]]), false).unwrap();
        let zf = g.leaf(Tensor::from_rows(&[vec![0.0, 0.0]]), false).unwrap();
        assert!(cosine_logits(&mut g, w, zf).is_err());
    }

    #[test]
    fn kl_closed_form_basics() {
        // mu=0, sigma^2=1 -> 0; single dim mu=1, sigma^2=1 -> 0.5
        assert_eq!(kl_diag_gaussian(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!((kl_diag_gaussian(&[1.0], &[1.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(kl_diag_gaussian(&[0.0], &[0.0]).is_err());
        assert!(kl_diag_gaussian(&[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn kl_graph_matches_closed_form() {
        let mu = vec![0.3, -1.2, 0.7];
        let lv = vec![0.5, -0.3, 0.0];
        let sigma2: Vec<f64> = lv.iter().map(|v: &f64| v.exp()).collect();
        let expect = kl_diag_gaussian(&mu, &sigma2).unwrap();
        let mut g = Graph::<f64>::new();
        let m = g.leaf(Tensor::from_rows(&[mu]), false).unwrap();
        let l = g.leaf(Tensor::from_rows(&[lv]), false).unwrap();
        let kl = kl_term_graph(&mut g, m, l).unwrap();
        assert!((g.value(kl).scalar_value().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_property() {
        let mut s = RootSeed(77).stream(&[tag::PROMPT_NOISE]);
        for _ in 0..200 {
            let mu: Vec<f64> = (0..6).map(|_| s.normal_scaled(0.0, 2.0)).collect();
            let sigma2: Vec<f64> = (0..6).map(|_| s.uniform(0.05, 4.0)).collect();
            let kl = kl_diag_gaussian(&mu, &sigma2).unwrap();
            assert!(kl >= 0.0, "kl={kl}");
        }
        // equality iff mu=0, sigma^2=1
        assert_eq!(kl_diag_gaussian(&[0.0; 4], &[1.0; 4]).unwrap(), 0.0);
    }

    /// Monte-Carlo oracle: E_{p~N(mu,s2)}[ln N(p|mu,s2) - ln N(p|0,I)]
    /// estimated with 1e5 draws must agree with the closed form within
    /// 3 standard errors.
    #[test]
    fn kl_closed_form_vs_monte_carlo() {
        let mut s = RootSeed(123).stream(&[tag::PROMPT_NOISE, 42]);
        let n = 100_000usize;
        for trial in 0..5 {
            let dim = 3 + trial % 3;
            let mu: Vec<f64> = (0..dim).map(|_| s.normal_scaled(0.0, 1.0)).collect();
            let sigma2: Vec<f64> = (0..dim).map(|_| s.uniform(0.3, 2.5)).collect();
            let closed = kl_diag_gaussian(&mu, &sigma2).unwrap();

            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..n {
                let mut log_q = 0.0;
                let mut log_r = 0.0;
                for d in 0..dim {
                    let eps = s.normal();
                    let p = mu[d] + sigma2[d].sqrt() * eps;
                    log_q += -0.5 * ((p - mu[d]).powi(2) / sigma2[d] + sigma2[d].ln());
                    log_r += -0.5 * p * p;
                }
                let v = log_q - log_r;
                sum += v;
                sumsq += v * v;
            }
            let mean = sum / n as f64;
            let var = (sumsq / n as f64 - mean * mean).max(0.0);
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - closed).abs() <= 3.0 * se.max(1e-9),
                "trial {trial}: mc={mean}, closed={closed}, se={se}"
            );
        }
    }

    #[test]
    fn ib_loss_agrees_with_manual_ce_plus_kl() {
        let cfg = LossConfig {
            lambda: 0.1,
            kl_weight: 1.0,
            temperature: 0.5,
        };
        let logits = vec![0.9, -0.2, 0.4];
        let mu = vec![0.5, -0.5];
        let lv = vec![0.2, -0.1];
        let mut g = Graph::<f64>::new();
        let lg = g
            .leaf(Tensor::new(vec![3, 1], logits.clone()).unwrap(), false)
            .unwrap();
        let m = g.leaf(Tensor::from_rows(&[mu.clone()]), false).unwrap();
        let l = g.leaf(Tensor::from_rows(&[lv.clone()]), false).unwrap();
        let loss = ib_loss(&mut g, lg, 2, &[m], &[l], &cfg).unwrap();
        // manual: CE on scaled logits + closed-form KL
        let scaled: Vec<f64> = logits.iter().map(|v| v / cfg.temperature).collect();
        let z: f64 = scaled.iter().map(|v| v.exp()).sum();
        let ce = -(scaled[2] - z.ln());
        let sigma2: Vec<f64> = lv.iter().map(|v| v.exp()).collect();
        let kl = kl_diag_gaussian(&mu, &sigma2).unwrap();
        assert!((g.value(loss).scalar_value().unwrap() - (ce + kl)).abs() < 1e-10);
    }

    #[test]
    fn ib_loss_gradient_check() {
        let cfg = LossConfig {
            lambda: 0.0,
            kl_weight: 0.7,
            temperature: 0.2,
        };
        // check gradient w.r.t. the feature through cosine logits + CE + KL
        let w_rows = vec![vec![0.4, -0.8, 0.1], vec![-0.3, 0.5, 0.9]];
        let mu = vec![0.4, -0.2];
        let lv = vec![0.1, 0.3];
        let x = Tensor::<f64>::from_rows(&[vec![0.7, 0.2, -0.5]]);
        let err = crate::gradcheck::grad_check(
            |g, x| {
                let w = g.leaf(Tensor::from_rows(&w_rows), false)?;
                let logits = cosine_logits(g, w, x)?;
                let m = g.leaf(Tensor::from_rows(&[mu.clone()]), true)?;
                let l = g.leaf(Tensor::from_rows(&[lv.clone()]), true)?;
                ib_loss(g, logits, 1, &[m], &[l], &cfg)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn anchor_loss_endpoints_and_gradcheck() {
        let anchor = Tensor::<f64>::from_rows(&[vec![1.0, 0.0]]);
        let run = |f: Vec<f64>| {
            let mut g = Graph::<f64>::new();
            let feat = g.leaf(Tensor::from_rows(&[f]), false).unwrap();
            let l = anchor_loss(&mut g, feat, &anchor).unwrap();
            g.value(l).scalar_value().unwrap()
        };
        assert!(run(vec![2.0, 0.0]).abs() < 1e-7); // f parallel anchor -> 0
        assert!((run(vec![-3.0, 0.0]) - 2.0).abs() < 1e-7); // antiparallel -> 2
        assert!((run(vec![0.0, 1.5]) - 1.0).abs() < 1e-9); // orthogonal -> 1

        let x = Tensor::<f64>::from_rows(&[vec![0.6, -0.9]]);
        let anchor2 = Tensor::<f64>::from_rows(&[vec![0.3, 0.8]]);
        let err = crate::gradcheck::grad_check(
            |g, x| anchor_loss(g, x, &anchor2),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "err={err}");
    }

    #[test]
    fn anchor_loss_range_property() {
        let mut s = RootSeed(5).stream(&[tag::PROMPT_NOISE, 9]);
        for _ in 0..100 {
            let a: Vec<f64> = (0..4).map(|_| s.normal_scaled(0.0, 1.0)).collect();
            let f: Vec<f64> = (0..4).map(|_| s.normal_scaled(0.0, 1.0)).collect();
            let mut g = Graph::<f64>::new();
            let feat = g.leaf(Tensor::from_rows(&[f]), false).unwrap();
            let anchor = Tensor::from_rows(&[a]);
            let l = anchor_loss(&mut g, feat, &anchor).unwrap();
            let v = g.value(l).scalar_value().unwrap();
            assert!((-1e-9..=2.0 + 1e-9).contains(&v));
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::<f64>::new();
        let ib = g.leaf(Tensor::scalar(2.0), false).unwrap();
        let an = g.leaf(Tensor::scalar(0.5), false).unwrap();
        // lambda=0.1: 2.0 + 0.1*0.5 = 2.05
        let t = total_loss(&mut g, ib, Some(an), 0.1).unwrap();
        assert!((g.value(t).scalar_value().unwrap() - 2.05).abs() < 1e-12);
        // lambda=0 -> IB alone
        let mut g = Graph::<f64>::new();
        let ib = g.leaf(Tensor::scalar(2.0), false).unwrap();
        let an = g.leaf(Tensor::scalar(0.5), false).unwrap();
        let t = total_loss(&mut g, ib, Some(an), 0.0).unwrap();
        assert_eq!(g.value(t).scalar_value().unwrap(), 2.0);
    }

    #[test]
    fn select_anchor_brute_force_and_ties() {
        // single-sample class
        let f = vec![Tensor::<f64>::from_rows(&[vec![1.0, 0.0]])];
        let mean = Tensor::from_rows(&[vec![0.5, 0.5]]);
        assert_eq!(select_anchor(&f, &mean).unwrap(), 0);

        // crafted cosines 0.9, 0.99, 0.5 against the mean direction [1,0]
        let mk = |cos: f64| {
            let sin = (1.0 - cos * cos).sqrt();
            Tensor::<f64>::from_rows(&[vec![cos, sin]])
        };
        let feats = vec![mk(0.9), mk(0.99), mk(0.5)];
        let mean = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let picked = select_anchor(&feats, &mean).unwrap();
        // brute force over all samples
        let mut best = 0;
        let mut bc = f64::MIN;
        for (i, f) in feats.iter().enumerate() {
            let c = kernels::cosine(mean.data(), f.data());
            if c > bc {
                bc = c;
                best = i;
            }
        }
        assert_eq!(picked, best);
        assert_eq!(picked, 1);

        // exact tie -> lower id
        let tie = vec![mk(0.8), mk(0.8), mk(0.3)];
        assert_eq!(select_anchor(&tie, &mean).unwrap(), 0);

        assert!(select_anchor::<f64>(&[], &mean).is_err());
    }

    #[test]
    fn select_anchor_scale_invariant() {
        let feats = vec![
            Tensor::<f64>::from_rows(&[vec![0.9, 0.1]]),
            Tensor::<f64>::from_rows(&[vec![0.2, 0.8]]),
        ];
        let scaled: Vec<Tensor<f64>> = feats.iter().map(|f| f.map(|v| v * 37.5)).collect();
        let mean = Tensor::from_rows(&[vec![1.0, 0.2]]);
        assert_eq!(
            select_anchor(&feats, &mean).unwrap(),
            select_anchor(&scaled, &mean).unwrap()
        );
    }
}
