//! Trainable parameters and plain SGD.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Real, Tensor};

/// Named parameter tensor with a freeze flag. Frozen parameters are bound
/// into graphs without gradient tracking and are skipped by `sgd_step`.
#[derive(Debug, Clone)]
pub struct Param<F: Real> {
    pub name: String,
    pub value: Tensor<F>,
    pub frozen: bool,
}

impl<F: Real> Param<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        Param {
            name: name.into(),
            value,
            frozen: false,
        }
    }

    pub fn bind(&self, g: &mut Graph<F>) -> Result<NodeId> {
        g.leaf(self.value.clone(), !self.frozen)
    }

    pub fn cast<G: Real>(&self) -> Param<G> {
        Param {
            name: self.name.clone(),
            value: self.value.cast(),
            frozen: self.frozen,
        }
    }
}

/// p <- p - lr * g for every unfrozen parameter with a gradient.
/// Frozen parameters are left bitwise untouched. Gradients must be finite
/// and shape-compatible.
pub fn sgd_step<F: Real>(
    params: &mut [&mut Param<F>],
    grads: &[Option<Tensor<F>>],
    lr: F,
) -> Result<()> {
    if lr <= F::zero() {
        return Err(CoreError::contract("sgd_step: lr must be positive"));
    }
    if params.len() != grads.len() {
        return Err(CoreError::contract(format!(
            "sgd_step: {} params vs {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        let g = match g {
            Some(g) => g,
            None => continue,
        };
        if p.frozen {
            continue;
        }
        if p.value.shape() != g.shape() {
            return Err(CoreError::dim("sgd_step", p.value.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(CoreError::numeric(
                "sgd_step",
                format!("non-finite gradient for {}", p.name),
            ));
        }
        for (pv, gv) in p.value.data_mut().iter_mut().zip(g.data()) {
            *pv = *pv - lr * *gv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_moves_against_gradient() {
        // p=1, g=2, lr=0.5 -> p=0
        let mut p = Param::new("w", Tensor::<f32>::scalar(1.0));
        let g = Some(Tensor::scalar(2.0));
        sgd_step(&mut [&mut p], &[g], 0.5).unwrap();
        assert_eq!(p.value.data(), &[0.0]);
    }

    #[test]
    fn frozen_param_untouched() {
        let mut p = Param::new("w", Tensor::<f32>::scalar(1.0));
        p.frozen = true;
        let before = p.value.clone();
        sgd_step(&mut [&mut p], &[Some(Tensor::scalar(123.0))], 0.5).unwrap();
        assert!(p.value.bits_eq(&before));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Param::new("w", Tensor::<f32>::zeros(vec![2, 2]));
        let g = Some(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            sgd_step(&mut [&mut p], &[g], 0.1),
            Err(CoreError::Dim { .. })
        ));
    }
}
