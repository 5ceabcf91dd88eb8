//! Finite-difference gradient oracle.
//!
//! The checker is independent of the backward pass it validates: expected
//! gradients come from central differences of the forward value alone.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Real, Tensor};

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
///
/// `f` must build a scalar-valued expression from the single input node.
pub fn grad_check<F: Real>(
    f: impl Fn(&mut Graph<F>, NodeId) -> Result<NodeId>,
    x: &Tensor<F>,
    h: f64,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(CoreError::contract("grad_check: step must be positive"));
    }
    let mut g = Graph::new();
    let xid = g.leaf(x.clone(), true)?;
    let y = f(&mut g, xid)?;
    if !g.value(y).is_scalar() {
        return Err(CoreError::contract(format!(
            "grad_check: f must be scalar-valued, got shape {:?}",
            g.shape(y)
        )));
    }
    let grads = g.backward(y)?;
    let analytic = grads
        .grad(xid)
        .ok_or_else(|| CoreError::contract("grad_check: input received no gradient"))?
        .clone();

    let eval = |xt: &Tensor<F>| -> Result<f64> {
        let mut g = Graph::new();
        let xid = g.leaf(xt.clone(), false)?;
        let y = f(&mut g, xid)?;
        Ok(g.value(y).scalar_value()?.as_f64())
    };
    let fd = central_diff(eval, x, h)?;
    Ok(max_rel_err(&analytic, &fd))
}

/// Central-difference gradient of a pure scalar function of one tensor.
pub fn central_diff<F: Real>(
    mut eval: impl FnMut(&Tensor<F>) -> Result<f64>,
    x: &Tensor<F>,
    h: f64,
) -> Result<Tensor<F>> {
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let mut xp = x.clone();
        xp.data_mut()[i] = orig + F::of(h);
        let fp = eval(&xp)?;
        let mut xm = x.clone();
        xm.data_mut()[i] = orig - F::of(h);
        let fm = eval(&xm)?;
        out.data_mut()[i] = F::of((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Relative error between an analytic gradient and a finite-difference one.
pub fn max_rel_err<F: Real>(analytic: &Tensor<F>, fd: &Tensor<F>) -> f64 {
    assert_eq!(analytic.shape(), fd.shape());
    analytic
        .data()
        .iter()
        .zip(fd.data())
        .map(|(&a, &d)| {
            let a = a.as_f64();
            (a - d.as_f64()).abs() / a.abs().max(1.0)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_nearly_exact() {
        // f = sum of squares at x=[3]; central differences are exact for quadratics.
        let x = Tensor::<f64>::from_rows(&[vec![3.0]]);
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "err={err}");
    }

    #[test]
    fn softmax_cross_entropy_on_three_logits() {
        let x = Tensor::<f64>::from_rows(&[vec![0.7, -1.2, 0.4]]);
        let err = grad_check(
            |g, x| {
                let lsm = g.log_softmax_rows(x)?;
                let mask = g.constant(Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]))?;
                let picked = g.mul(lsm, mask)?;
                let s = g.sum_all(picked)?;
                g.scale(s, -1.0)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err={err}");
    }

    #[test]
    fn hard_max_flags_large_error_at_kink() {
        // max(x, 0) via relu-like construction sat at a non-differentiable point:
        // approximate with |x| = sqrt(x^2 + 0) has kink at 0. Central differences
        // disagree with any one-sided analytic value there, so the reported error
        // must be large. We build |x| as sqrt(sum(x*x)) with the stabilized norm.
        let x = Tensor::<f64>::from_rows(&[vec![0.0]]);
        let err = grad_check(|g, x| g.l2_norm(x), &x, 1e-4).unwrap();
        // analytic grad at exactly 0 is 0 (stabilized), FD is 0 too since the
        // function is even; instead probe just off the kink where curvature blows up
        let x = Tensor::<f64>::from_rows(&[vec![1e-9]]);
        let err_off = grad_check(|g, x| g.l2_norm(x), &x, 1e-4).unwrap();
        // document: at/near the kink the check is not trustworthy; at least one
        // of the probes must show a visibly degraded error vs the smooth case.
        assert!(
            err.max(err_off) > 1e-3,
            "expected degraded accuracy near non-smooth point, got {err} / {err_off}"
        );
    }

    #[test]
    fn non_scalar_function_rejected() {
        let x = Tensor::<f64>::from_rows(&[vec![1.0, 2.0]]);
        let res = grad_check(|_, x| Ok(x), &x, 1e-5);
        assert!(matches!(res, Err(CoreError::Contract(_))));
    }

    #[test]
    fn nonpositive_step_rejected() {
        let x = Tensor::<f64>::scalar(1.0);
        assert!(grad_check(|g, x| g.sum_all(x), &x, 0.0).is_err());
    }
}
