//! 3x3 convolutions with panoramic padding (circular across columns, zero
//! across rows) and 2x2 average pooling.

use super::Tensor;
use crate::error::{Error, Result};

fn conv_dims(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    const OP: &str = "conv3x3";
    x.expect_shape(OP, &[None, None, None])?;
    let (cin, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    weight.expect_shape(OP, &[None, Some(cin), Some(3), Some(3)])?;
    let cout = weight.dim(0);
    bias.expect_shape(OP, &[Some(cout)])?;
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::arg(
            OP,
            format!("stride {stride} does not divide {h}x{w}"),
        ));
    }
    Ok((cin, h, w, cout, h / stride, w / stride))
}

/// `[Cin,H,W] -> [Cout,H/stride,W/stride]`.
pub fn conv3x3(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (cin, h, w, cout, ho, wo) = conv_dims(x, weight, bias, stride)?;
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = bd[o]);
        for c in 0..cin {
            let xin = &xd[c * h * w..(c + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = wd[((o * cin + c) * 3 + ky) * 3 + kx];
                    if k == 0.0 {
                        continue;
                    }
                    for i in 0..ho {
                        let r = (i * stride + ky) as isize - 1;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        let row = &xin[r as usize * w..(r as usize + 1) * w];
                        let orow = &mut plane[i * wo..(i + 1) * wo];
                        for (j, ov) in orow.iter_mut().enumerate() {
                            let col = (j * stride + kx + w - 1) % w;
                            *ov += k * row[col];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, ho, wo], out)
}

/// Returns `(d x, d weight, d bias)`.
pub fn conv3x3_backward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    cot: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (cin, h, w, cout, ho, wo) = conv_dims(x, weight, bias, stride)?;
    cot.expect_shape("conv3x3_backward", &[Some(cout), Some(ho), Some(wo)])?;
    let (xd, wd, gd) = (x.data(), weight.data(), cot.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wd.len()];
    let mut db = vec![0.0; cout];
    for o in 0..cout {
        let g = &gd[o * ho * wo..(o + 1) * ho * wo];
        db[o] = g.iter().sum();
        for c in 0..cin {
            let xin = &xd[c * h * w..(c + 1) * h * w];
            let dxin = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((o * cin + c) * 3 + ky) * 3 + kx;
                    let k = wd[widx];
                    let mut acc = 0.0;
                    for i in 0..ho {
                        let r = (i * stride + ky) as isize - 1;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        let r = r as usize;
                        let grow = &g[i * wo..(i + 1) * wo];
                        for (j, &gv) in grow.iter().enumerate() {
                            let col = (j * stride + kx + w - 1) % w;
                            acc += gv * xin[r * w + col];
                            dxin[r * w + col] += gv * k;
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::new(vec![cout], db)?,
    ))
}

/// Non-overlapping 2x2 mean pooling.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    x.expect_shape("avg_pool2", &[None, None, None])?;
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::arg("avg_pool2", format!("odd extent {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let b = ch * h * w + 2 * i * w + 2 * j;
                out[(ch * ho + i) * wo + j] = 0.25 * (xd[b] + xd[b + 1] + xd[b + w] + xd[b + w + 1]);
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

pub fn avg_pool2_backward(input_shape: &[usize], cot: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (ho, wo) = (h / 2, w / 2);
    cot.expect_shape("avg_pool2_backward", &[Some(c), Some(ho), Some(wo)])?;
    let gd = cot.data();
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let g = 0.25 * gd[(ch * ho + i) * wo + j];
                let b = ch * h * w + 2 * i * w + 2 * j;
                dx[b] = g;
                dx[b + 1] = g;
                dx[b + w] = g;
                dx[b + w + 1] = g;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_kernel(c: usize) -> Tensor {
        let mut k = Tensor::zeros(&[c, c, 3, 3]);
        for i in 0..c {
            k.set(&[i, i, 1, 1], 1.0);
        }
        k
    }

    #[test]
    fn identity_kernel_passes_input() {
        let x = Tensor::from_fn(&[2, 4, 6], |i| i as f64);
        let y = conv3x3(&x, &identity_kernel(2), &Tensor::zeros(&[2]), 1).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn horizontal_padding_wraps() {
        let x = Tensor::from_fn(&[1, 1, 4], |i| (i + 1) as f64);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.set(&[0, 0, 1, 0], 1.0); // reads column j-1
        let y = conv3x3(&x, &k, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(y.data(), &[4.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn stride_two_halves_extent() {
        let x = Tensor::zeros(&[3, 8, 16]);
        let w = Tensor::zeros(&[5, 3, 3, 3]);
        let y = conv3x3(&x, &w, &Tensor::zeros(&[5]), 2).unwrap();
        assert_eq!(y.shape(), &[5, 4, 8]);
        assert!(conv3x3(&Tensor::zeros(&[3, 7, 16]), &w, &Tensor::zeros(&[5]), 2).is_err());
    }

    #[test]
    fn pooling_averages_blocks() {
        let x = Tensor::from_fn(&[1, 2, 4], |i| i as f64);
        let y = avg_pool2(&x).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5]);
    }
}
