//! Cosine classifier that starts trainable on the base task, is converted
//! to class-mean prototypes afterwards, and grows by appending new-class
//! prototypes each incremental task.

use crate::error::{CoreError, Result};
use crate::kernels;
use crate::optim::Param;
use crate::rng::Stream;
use crate::tensor::{Real, Tensor};
use crate::vit::INIT_SD;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierMode {
    Trainable,
    Prototypical,
}

#[derive(Debug, Clone)]
pub struct ClassifierState<F: Real> {
    pub weight: Param<F>,
    mode: ClassifierMode,
    class_ids: Vec<u32>,
}

impl<F: Real> ClassifierState<F> {
    pub fn new_trainable(class_ids: &[u32], dim: usize, stream: &mut Stream) -> Result<Self> {
        if class_ids.is_empty() || dim == 0 {
            return Err(CoreError::config("classifier needs >= 1 class and dim >= 1"));
        }
        let mut seen = std::collections::HashSet::new();
        for &c in class_ids {
            if !seen.insert(c) {
                return Err(CoreError::contract(format!("duplicate class id {c}")));
            }
        }
        Ok(ClassifierState {
            weight: Param::new(
                "classifier/w",
                Tensor::randn(vec![class_ids.len(), dim], stream, 0.0, INIT_SD),
            ),
            mode: ClassifierMode::Trainable,
            class_ids: class_ids.to_vec(),
        })
    }

    pub fn from_parts(weight: Tensor<F>, mode: ClassifierMode, class_ids: Vec<u32>) -> Result<Self> {
        if weight.shape()[0] != class_ids.len() {
            return Err(CoreError::contract("weight rows must match class id count"));
        }
        let mut p = Param::new("classifier/w", weight);
        p.frozen = mode == ClassifierMode::Prototypical;
        Ok(ClassifierState {
            weight: p,
            mode,
            class_ids,
        })
    }

    pub fn mode(&self) -> ClassifierMode {
        self.mode
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    /// Row index of a class id, i.e. the label used for cross-entropy.
    pub fn row_of(&self, class: u32) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    pub fn cast<G: Real>(&self) -> ClassifierState<G> {
        ClassifierState {
            weight: self.weight.cast(),
            mode: self.mode,
            class_ids: self.class_ids.clone(),
        }
    }

    /// Per-class mean features; every class must be nonempty.
    pub fn compute_prototypes(groups: &[(u32, Vec<Tensor<F>>)]) -> Result<Vec<(u32, Tensor<F>)>> {
        let mut out = Vec::with_capacity(groups.len());
        for (class, feats) in groups {
            if feats.is_empty() {
                return Err(CoreError::contract(format!(
                    "compute_prototypes: class {class} has no samples"
                )));
            }
            let mut mean = Tensor::zeros(feats[0].shape().to_vec());
            for f in feats {
                if f.shape() != mean.shape() {
                    return Err(CoreError::dim("compute_prototypes", mean.shape(), f.shape()));
                }
                for (a, b) in mean.data_mut().iter_mut().zip(f.data()) {
                    *a += *b;
                }
            }
            let inv = F::of(1.0 / feats.len() as f64);
            for v in mean.data_mut() {
                *v = *v * inv;
            }
            out.push((*class, mean));
        }
        Ok(out)
    }

    /// Replace trained rows with class-mean prototypes; only callable once.
    pub fn freeze_to_prototypes(&mut self, means: &[(u32, Tensor<F>)]) -> Result<()> {
        if self.mode == ClassifierMode::Prototypical {
            return Err(CoreError::contract("freeze_to_prototypes called twice"));
        }
        if means.len() != self.class_ids.len() {
            return Err(CoreError::contract(format!(
                "expected prototypes for {} classes, got {}",
                self.class_ids.len(),
                means.len()
            )));
        }
        let d = self.dim();
        let mut rows = vec![F::zero(); self.class_ids.len() * d];
        for (class, mean) in means {
            let row = self
                .row_of(*class)
                .ok_or_else(|| CoreError::contract(format!("unknown class {class}")))?;
            if mean.numel() != d {
                return Err(CoreError::dim("freeze_to_prototypes", &[1, d], mean.shape()));
            }
            rows[row * d..(row + 1) * d].copy_from_slice(mean.data());
        }
        self.weight.value = Tensor::new(vec![self.class_ids.len(), d], rows)?;
        self.weight.frozen = true;
        self.mode = ClassifierMode::Prototypical;
        Ok(())
    }

    /// Append new-class prototypes; old rows stay bitwise untouched.
    pub fn append_prototypes(&mut self, means: &[(u32, Tensor<F>)]) -> Result<()> {
        if self.mode != ClassifierMode::Prototypical {
            return Err(CoreError::contract(
                "append_prototypes requires prototypical mode",
            ));
        }
        let d = self.dim();
        let mut data = self.weight.value.data().to_vec();
        let mut ids = self.class_ids.clone();
        for (class, mean) in means {
            if ids.contains(class) {
                return Err(CoreError::contract(format!("duplicate class id {class}")));
            }
            if mean.numel() != d {
                return Err(CoreError::dim("append_prototypes", &[1, d], mean.shape()));
            }
            data.extend_from_slice(mean.data());
            ids.push(*class);
        }
        self.weight.value = Tensor::new(vec![ids.len(), d], data)?;
        self.class_ids = ids;
        Ok(())
    }

    /// Overwrite existing prototype rows (study flag: refreshing old-class
    /// prototypes after the feature function drifts). Prototypical mode only.
    pub fn refresh_prototypes(&mut self, means: &[(u32, Tensor<F>)]) -> Result<()> {
        if self.mode != ClassifierMode::Prototypical {
            return Err(CoreError::contract(
                "refresh_prototypes requires prototypical mode",
            ));
        }
        let d = self.dim();
        let mut data = self.weight.value.data().to_vec();
        for (class, mean) in means {
            let row = self
                .row_of(*class)
                .ok_or_else(|| CoreError::contract(format!("unknown class {class}")))?;
            if mean.numel() != d {
                return Err(CoreError::dim("refresh_prototypes", &[1, d], mean.shape()));
            }
            data[row * d..(row + 1) * d].copy_from_slice(mean.data());
        }
        self.weight.value = Tensor::new(vec![self.class_ids.len(), d], data)?;
        Ok(())
    }

    /// Argmax cosine similarity over prototype rows; ties break toward the
    /// lowest class id.
    pub fn predict(&self, feature: &Tensor<F>) -> Result<u32> {
        if feature.numel() != self.dim() {
            return Err(CoreError::dim("predict", feature.shape(), &[1, self.dim()]));
        }
        if feature.data().iter().all(|v| *v == F::zero()) {
            return Err(CoreError::numeric("predict", "zero feature"));
        }
        let d = self.dim();
        let w = &self.weight.value;
        let mut best_id = self.class_ids[0];
        let mut best_cos = kernels::cosine(w.row(0), feature.data());
        for r in 1..self.class_ids.len() {
            let c = kernels::cosine(&w.data()[r * d..(r + 1) * d], feature.data());
            let id = self.class_ids[r];
            if c > best_cos || (c == best_cos && id < best_id) {
                best_cos = c;
                best_id = id;
            }
        }
        Ok(best_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{tag, RootSeed};

    fn stream(n: u64) -> Stream {
        RootSeed(n).stream(&[tag::INIT_CLASSIFIER])
    }

    #[test]
    fn prototype_of_single_and_duplicated_sample() {
        let f = Tensor::<f32>::from_rows(&[vec![1.0, 2.0]]);
        let single = ClassifierState::compute_prototypes(&[(0, vec![f.clone()])]).unwrap();
        assert!(single[0].1.bits_eq(&f));
        let dup = ClassifierState::compute_prototypes(&[(0, vec![f.clone(), f.clone()])]).unwrap();
        assert!(dup[0].1.max_abs_diff(&f) < 1e-7);
    }

    #[test]
    fn prototypes_match_accumulate_then_divide_oracle() {
        let mut s = stream(1);
        let feats: Vec<Tensor<f32>> = (0..10)
            .map(|_| Tensor::randn(vec![1, 6], &mut s, 0.0, 1.0))
            .collect();
        let protos =
            ClassifierState::compute_prototypes(&[(3, feats.clone())]).unwrap();
        let mut acc = vec![0.0f64; 6];
        for f in &feats {
            for (a, &v) in acc.iter_mut().zip(f.data()) {
                *a += v as f64;
            }
        }
        for j in 0..6 {
            assert!((protos[0].1.data()[j] as f64 - acc[j] / 10.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_class_rejected() {
        assert!(ClassifierState::<f32>::compute_prototypes(&[(0, vec![])]).is_err());
    }

    #[test]
    fn freeze_replaces_weights_and_prediction_follows_means() {
        let mut s = stream(2);
        let mut clf = ClassifierState::<f32>::new_trainable(&[10, 20], 2, &mut s).unwrap();
        // crafted case: trained W and means point to different classes
        clf.weight.value = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let means = vec![
            (10u32, Tensor::from_rows(&[vec![0.0, 1.0]])),
            (20u32, Tensor::from_rows(&[vec![1.0, 0.0]])),
        ];
        let probe = Tensor::from_rows(&[vec![1.0, 0.05]]);
        assert_eq!(clf.mode(), ClassifierMode::Trainable);
        clf.freeze_to_prototypes(&means).unwrap();
        assert_eq!(clf.mode(), ClassifierMode::Prototypical);
        assert_eq!(clf.num_classes(), 2);
        // prediction follows the means, not the old trained rows
        assert_eq!(clf.predict(&probe).unwrap(), 20);
        // second freeze is a contract error
        assert!(clf.freeze_to_prototypes(&means).is_err());
    }

    #[test]
    fn append_grows_and_preserves_old_rows_bitwise() {
        let mut s = stream(3);
        let mut clf = ClassifierState::<f32>::new_trainable(&[0, 1, 2], 4, &mut s).unwrap();
        let means: Vec<(u32, Tensor<f32>)> = (0..3)
            .map(|c| (c, Tensor::randn(vec![1, 4], &mut s, 0.0, 1.0)))
            .collect();
        clf.freeze_to_prototypes(&means).unwrap();
        let before = clf.weight.value.clone();
        let new: Vec<(u32, Tensor<f32>)> = (3..5)
            .map(|c| (c, Tensor::randn(vec![1, 4], &mut s, 0.0, 1.0)))
            .collect();
        clf.append_prototypes(&new).unwrap();
        assert_eq!(clf.num_classes(), 5);
        // old rows bitwise untouched
        for r in 0..3 {
            let old = &before.data()[r * 4..(r + 1) * 4];
            let now = &clf.weight.value.data()[r * 4..(r + 1) * 4];
            assert!(old.iter().zip(now).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        // empty append is identity
        let snap = clf.weight.value.clone();
        clf.append_prototypes(&[]).unwrap();
        assert!(clf.weight.value.bits_eq(&snap));
        // duplicate id rejected
        assert!(clf
            .append_prototypes(&[(4, Tensor::zeros(vec![1, 4]))])
            .is_err());
    }

    #[test]
    fn predict_matches_exhaustive_oracle() {
        let mut s = stream(4);
        let mut clf = ClassifierState::<f32>::new_trainable(
            &(0..10).collect::<Vec<u32>>(),
            8,
            &mut s,
        )
        .unwrap();
        let means: Vec<(u32, Tensor<f32>)> = (0..10)
            .map(|c| (c, Tensor::randn(vec![1, 8], &mut s, 0.0, 1.0)))
            .collect();
        clf.freeze_to_prototypes(&means).unwrap();
        for _ in 0..100 {
            let f = Tensor::randn(vec![1, 8], &mut s, 0.0, 1.0);
            // exhaustive argmax-cosine recount
            let mut best = 0u32;
            let mut bc = f64::MIN;
            for (c, m) in &means {
                let cos = kernels::cosine(m.data(), f.data()) as f64;
                if cos > bc {
                    bc = cos;
                    best = *c;
                }
            }
            assert_eq!(clf.predict(&f).unwrap(), best);
        }
    }

    #[test]
    fn predict_edge_cases() {
        let mut s = stream(5);
        let mut clf = ClassifierState::<f32>::new_trainable(&[7], 2, &mut s).unwrap();
        clf.freeze_to_prototypes(&[(7, Tensor::from_rows(&[vec![1.0, 1.0]]))])
            .unwrap();
        // K=1 -> always that class
        assert_eq!(clf.predict(&Tensor::from_rows(&[vec![-1.0, 3.0]])).unwrap(), 7);
        // zero feature -> numeric error
        assert!(clf.predict(&Tensor::zeros(vec![1, 2])).is_err());
    }

    #[test]
    fn predict_scale_invariant_argmax() {
        let mut s = stream(6);
        let mut clf =
            ClassifierState::<f32>::new_trainable(&[0, 1, 2], 4, &mut s).unwrap();
        let means: Vec<(u32, Tensor<f32>)> = (0..3)
            .map(|c| (c, Tensor::randn(vec![1, 4], &mut s, 0.0, 1.0)))
            .collect();
        clf.freeze_to_prototypes(&means).unwrap();
        for _ in 0..50 {
            let f = Tensor::randn(vec![1, 4], &mut s, 0.0, 1.0);
            let scaled = f.map(|v| v * 13.25);
            assert_eq!(clf.predict(&f).unwrap(), clf.predict(&scaled).unwrap());
        }
    }

    #[test]
    fn tie_breaks_toward_lowest_class_id() {
        // two identical prototypes with ids out of insertion order
        let clf = ClassifierState::<f32>::from_parts(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]),
            ClassifierMode::Prototypical,
            vec![9, 4],
        )
        .unwrap();
        assert_eq!(clf.predict(&Tensor::from_rows(&[vec![2.0, 0.0]])).unwrap(), 4);
    }
}
