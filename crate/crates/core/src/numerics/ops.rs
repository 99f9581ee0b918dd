//! Elementwise maps, matrix products, reductions and softmax, each paired
//! with its hand-written backward pass.

use super::Tensor;
use crate::error::{Error, Result};

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y)
}

pub fn add_backward(cot: &Tensor) -> (Tensor, Tensor) {
    (cot.clone(), cot.clone())
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x * y)
}

pub fn mul_backward(a: &Tensor, b: &Tensor, cot: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((cot.zip_map(b, |g, y| g * y)?, cot.zip_map(a, |g, x| g * x)?))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_backward(x: &Tensor, cot: &Tensor) -> Result<Tensor> {
    cot.zip_map(x, |g, v| {
        let s = sigmoid_scalar(v);
        g * s * (1.0 - s)
    })
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

pub fn softplus_backward(x: &Tensor, cot: &Tensor) -> Result<Tensor> {
    cot.zip_map(x, |g, v| g * sigmoid_scalar(v))
}

pub fn leaky_relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

pub fn leaky_relu_backward(x: &Tensor, cot: &Tensor) -> Result<Tensor> {
    cot.zip_map(x, |g, v| if v > 0.0 { g } else { LEAKY_SLOPE * g })
}

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0) {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose2(a: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 {
        return Err(Error::shape("transpose2", format!("{:?}", a.shape())));
    }
    let (m, n) = (a.dim(0), a.dim(1));
    let d = a.data();
    Tensor::new(
        vec![n, m],
        (0..n * m).map(|idx| d[(idx % m) * n + idx / m]).collect(),
    )
}

/// Returns `(d a, d b)` for `c = a b`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, cot: &Tensor) -> Result<(Tensor, Tensor)> {
    let da = matmul(cot, &transpose2(b)?)?;
    let db = matmul(&transpose2(a)?, cot)?;
    Ok((da, db))
}

fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::arg(op, format!("axis {axis} for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Mean over one axis; the axis is removed from the shape.
pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(x.shape(), axis, "mean_axis")?;
    let d = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..n {
            let base = (o * n + k) * inner;
            for i in 0..inner {
                out[o * inner + i] += d[base + i];
            }
        }
    }
    let inv = 1.0 / n as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

pub fn mean_axis_backward(input_shape: &[usize], axis: usize, cot: &Tensor) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(input_shape, axis, "mean_axis_backward")?;
    if cot.len() != outer * inner {
        return Err(Error::shape(
            "mean_axis_backward",
            format!("cotangent {:?} for input {:?}", cot.shape(), input_shape),
        ));
    }
    let inv = 1.0 / n as f64;
    let c = cot.data();
    let mut out = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for k in 0..n {
            let base = (o * n + k) * inner;
            for i in 0..inner {
                out[base + i] = c[o * inner + i] * inv;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(x.shape(), axis, "softmax")?;
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..n {
                let e = (d[at(k)] - max).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..n {
                out[at(k)] /= z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Backward of softmax given its output `y`.
pub fn softmax_backward(y: &Tensor, axis: usize, cot: &Tensor) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(y.shape(), axis, "softmax_backward")?;
    let (yd, cd) = (y.data(), cot.data());
    let mut out = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let s: f64 = (0..n).map(|k| yd[at(k)] * cd[at(k)]).sum();
            for k in 0..n {
                out[at(k)] = yd[at(k)] * (cd[at(k)] - s);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

/// Softmax over a plain slice.
pub fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = softmax(&Tensor::zeros(&[3]), 0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_logs_is_normalised_weights() {
        let x = Tensor::from_vec(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]);
        let y = softmax(&x, 0).unwrap();
        let expect = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariant_and_stable() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.5, 0.0]);
        let shifted = x.map(|v| v + 1000.0);
        let a = softmax(&x, 0).unwrap();
        let b = softmax(&shifted, 0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert!(b.is_finite());
    }

    #[test]
    fn softmax_rows_sum_to_one_on_inner_axis() {
        let x = Tensor::from_fn(&[4, 5, 3], |i| ((i * 37 % 11) as f64 - 5.0) * 0.7);
        let y = softmax(&x, 1).unwrap();
        for o in 0..4 {
            for i in 0..3 {
                let s: f64 = (0..5).map(|k| y.at(&[o, k, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_known_product() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn mean_axis_removes_axis() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let m = mean_axis(&x, 1).unwrap();
        assert_eq!(m.shape(), &[2, 4]);
        assert_eq!(m.at(&[0, 0]), 4.0);
        assert_eq!(m.at(&[1, 3]), (15.0 + 19.0 + 23.0) / 3.0);
    }

    #[test]
    fn softplus_handles_extremes() {
        assert!((softplus_scalar(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus_scalar(800.0), 800.0);
        assert!(softplus_scalar(-800.0) >= 0.0);
        let b = (std::f64::consts::E - 1.0).ln();
        assert!((softplus_scalar(b) - 1.0).abs() < 1e-15);
    }
}
