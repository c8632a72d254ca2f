use alloc::vec;
use alloc::vec::Vec;

use super::{Scalar, Tensor};
use crate::{Error, Result};

const GELU_C: f64 = 0.797_884_560_8;
const GELU_K: f64 = 0.044_715;

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 || b.shape().len() != 2 {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = ad[i * k + p];
            if x == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o = *o + x * y;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`, the layout of linear-layer weights.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out.push(dot(arow, brow));
        }
    }
    Tensor::new(&[m, n], out)
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor {
        shape: x.shape().to_vec(),
        data: out,
    }
}

/// Per-row statistics kept for the backward pass.
pub(crate) struct LayerNormStats<T> {
    pub(crate) normalized: Vec<T>,
    pub(crate) inv_std: Vec<T>,
}

pub(crate) fn layer_norm_with_stats<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormStats<T>)> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    // NaN fails too.
    if eps.partial_cmp(&T::zero()) != Some(core::cmp::Ordering::Greater) {
        return Err(Error::Contract("layer_norm requires eps > 0".into()));
    }
    let n = T::from_f64(d as f64);
    let mut normalized = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.rows());
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        inv_std.push(r);
        for (j, &v) in row.iter().enumerate() {
            let xh = (v - mean) * r;
            normalized.push(xh);
            out.push(xh * gain.data()[j] + bias.data()[j]);
        }
    }
    Ok((
        Tensor {
            shape: x.shape().to_vec(),
            data: out,
        },
        LayerNormStats {
            normalized,
            inv_std,
        },
    ))
}

/// Normalizes each row to zero mean and unit variance, then applies `gain` and `bias`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    layer_norm_with_stats(x, gain, bias, eps).map(|(y, _)| y)
}

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_product() {
        let i2 = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::<f64>::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&i2, &a).unwrap(), a);
        let ab = matmul(&a, &b).unwrap();
        assert_eq!(ab.data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul_nt(&a, &b.transpose()).unwrap(), ab);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::<f64>::from_rows(&[&[0.0, 0.0]]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::<f32>::from_rows(&[&[1000.0, 0.0]]));
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1] < 1e-6);
        let s = softmax_rows(&Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0]]));
        // e^k / (e + e^2 + e^3)
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let want = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        for (g, w) in s.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        for (g, w) in s.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((g - w).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::<f64>::full(&[2], 1.0);
        let zero = Tensor::<f64>::zeros(&[2]);
        let y = layer_norm(&Tensor::from_rows(&[&[4.0, 4.0]]), &one, &zero, 1e-12).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        let y = layer_norm(&Tensor::from_rows(&[&[1.0, 3.0]]), &one, &zero, 1e-14).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        let five = Tensor::<f64>::full(&[2], 5.0);
        let y = layer_norm(&Tensor::from_rows(&[&[1.0, 3.0]]), &zero, &five, 1e-5).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0]);
        assert!(layer_norm(&Tensor::from_rows(&[&[1.0, 3.0]]), &one, &zero, 0.0).is_err());
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
