//! Raw numeric kernels shared by the autodiff graph and the no-tape
//! evaluation path. Every reduction accumulates left-to-right per output
//! element so results are reproducible across runs and thread counts.

use crate::tensor::{Real, Tensor};

/// Epsilon added under the square root of every L2 norm (i.e. ||v|| >= 1e-8).
pub const NORM_EPS2: f64 = 1e-16;

/// Default layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

/// C = A[m,k] * B[k,n], ikj order: the k-reduction is strictly ascending
/// while the inner j loop vectorizes.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    debug_assert_eq!(k, b.shape()[0]);
    let mut out = vec![F::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let b_row = &bd[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + aip * b_row[j];
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

pub fn transpose<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = xd[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).unwrap()
}

pub fn binary<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

/// x[L,D] + bias[1,D], broadcast over rows.
pub fn add_bias<F: Real>(x: &Tensor<F>, bias: &Tensor<F>) -> Tensor<F> {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    debug_assert_eq!(bias.numel(), d);
    let bd = bias.data();
    let mut out = x.data().to_vec();
    for i in 0..l {
        for j in 0..d {
            out[i * d + j] = out[i * d + j] + bd[j];
        }
    }
    Tensor::new(vec![l, d], out).unwrap()
}

/// Softmax along the last axis of a 2-D tensor, max-shifted for stability.
pub fn softmax_rows<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = vec![F::zero(); l * d];
    for i in 0..l {
        let row = &xd[i * d..(i + 1) * d];
        let mut mx = row[0];
        for &v in &row[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for j in 0..d {
            let e = (row[j] - mx).exp();
            out[i * d + j] = e;
            sum += e;
        }
        for j in 0..d {
            out[i * d + j] = out[i * d + j] / sum;
        }
    }
    Tensor::new(vec![l, d], out).unwrap()
}

/// Log-softmax along the last axis, computed as x - max - ln(sum(exp)).
pub fn log_softmax_rows<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = vec![F::zero(); l * d];
    for i in 0..l {
        let row = &xd[i * d..(i + 1) * d];
        let mut mx = row[0];
        for &v in &row[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for &v in row {
            sum += (v - mx).exp();
        }
        let log_z = mx + sum.ln();
        for j in 0..d {
            out[i * d + j] = row[j] - log_z;
        }
    }
    Tensor::new(vec![l, d], out).unwrap()
}

/// Per-row layer normalization with affine scale/shift.
pub fn layer_norm<F: Real>(x: &Tensor<F>, gamma: &Tensor<F>, beta: &Tensor<F>) -> Tensor<F> {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let eps = F::of(LN_EPS);
    let nd = F::of(d as f64);
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![F::zero(); l * d];
    for i in 0..l {
        let row = &xd[i * d..(i + 1) * d];
        let mut mean = F::zero();
        for &v in row {
            mean += v;
        }
        mean = mean / nd;
        let mut var = F::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var = var / nd;
        let inv = (var + eps).sqrt().recip();
        for j in 0..d {
            out[i * d + j] = (row[j] - mean) * inv * gd[j] + bd[j];
        }
    }
    Tensor::new(vec![l, d], out).unwrap()
}

/// Tanh-approximation GELU.
pub fn gelu_scalar<F: Real>(x: F) -> F {
    let c = F::of(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = F::of(0.044_715);
    let half = F::of(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

pub fn gelu_grad_scalar<F: Real>(x: F) -> F {
    let c = F::of(0.797_884_560_802_865_4);
    let a = F::of(0.044_715);
    let half = F::of(0.5);
    let three = F::of(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

/// Mean over axis 0 of a 2-D tensor -> [1, D].
pub fn mean_rows<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = vec![F::zero(); d];
    for i in 0..l {
        for j in 0..d {
            out[j] = out[j] + xd[i * d + j];
        }
    }
    let inv = F::of(1.0 / l as f64);
    for v in out.iter_mut() {
        *v = *v * inv;
    }
    Tensor::new(vec![1, d], out).unwrap()
}

pub fn sum_all<F: Real>(x: &Tensor<F>) -> F {
    let mut s = F::zero();
    for &v in x.data() {
        s += v;
    }
    s
}

/// Stabilized L2 norm: sqrt(sum(x^2) + 1e-16), so the result is >= 1e-8.
pub fn l2_norm<F: Real>(x: &[F]) -> F {
    let mut s = F::zero();
    for &v in x {
        s += v * v;
    }
    (s + F::of(NORM_EPS2)).sqrt()
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut s = F::zero();
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Cosine similarity between each row of w[K,D] and f[1,D] -> [K,1].
pub fn cosine_rows<F: Real>(w: &Tensor<F>, f: &Tensor<F>) -> Tensor<F> {
    let (k, d) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(f.numel(), d);
    let fd = f.data();
    let nf = l2_norm(fd);
    let mut out = vec![F::zero(); k];
    for r in 0..k {
        let wr = &w.data()[r * d..(r + 1) * d];
        out[r] = dot(wr, fd) / (l2_norm(wr) * nf);
    }
    Tensor::new(vec![k, 1], out).unwrap()
}

/// Plain (unstabilized) cosine between two equal-length slices, for oracles
/// and argmax-only uses where inputs are verified nonzero.
pub fn cosine<F: Real>(a: &[F], b: &[F]) -> F {
    dot(a, b) / (l2_norm(a) * l2_norm(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = Tensor::<f64>::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert!(matmul(&eye, &a).bits_eq(&a));
    }

    #[test]
    fn softmax_uniform_on_equal_scores() {
        let x = Tensor::<f64>::from_rows(&[vec![0.0, 0.0, 0.0]]);
        let y = softmax_rows(&x);
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_matches_direct_arithmetic() {
        // Independent recomputation of the normalization for a crafted 1x4 row.
        let x = Tensor::<f64>::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let gamma = Tensor::<f64>::from_rows(&[vec![1.0, 1.0, 1.0, 1.0]]);
        let beta = Tensor::<f64>::from_rows(&[vec![0.0, 0.0, 0.0, 0.0]]);
        let y = layer_norm(&x, &gamma, &beta);
        let mean = (1.0 + 2.0 + 3.0 + 4.0) / 4.0;
        let var = ((1.0f64 - mean).powi(2)
            + (2.0 - mean).powi(2)
            + (3.0 - mean).powi(2)
            + (4.0 - mean).powi(2))
            / 4.0;
        for j in 0..4 {
            let expect = ((j + 1) as f64 - mean) / (var + LN_EPS).sqrt();
            assert!((y.data()[j] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_parallel_and_orthogonal() {
        let a = [3.0f64, 0.0];
        let b = [6.0f64, 0.0];
        let c = [0.0f64, 2.0];
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-9);
        assert!(cosine(&a, &c).abs() < 1e-9);
    }
}
