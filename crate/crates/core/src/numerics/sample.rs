//! Bilinear sampling on panoramic feature maps.
//!
//! Coordinates are continuous pixel units `(row, col)` where integer values
//! land on pixel centres. Columns wrap periodically (longitude) and rows
//! clamp to `[0, H-1]` (latitude).

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Tap {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    ty: f64,
    tx: f64,
    /// Row derivative is zero where the clamp is active.
    row_free: bool,
}

impl Tap {
    fn new(y: f64, x: f64, h: usize, w: usize) -> Tap {
        let hmax = (h - 1) as f64;
        let row_free = y > 0.0 && y < hmax;
        let yc = y.clamp(0.0, hmax);
        let y0 = (yc.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ty = yc - y0 as f64;
        let xf = x.floor();
        let tx = x - xf;
        let x0 = (xf as i64).rem_euclid(w as i64) as usize;
        let x1 = (x0 + 1) % w;
        Tap {
            y0,
            y1,
            x0,
            x1,
            ty,
            tx,
            row_free,
        }
    }
}

fn check_inputs(f: &Tensor, coords: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if f.ndim() != 3 {
        return Err(Error::shape(op, format!("feature map must be [C,H,W], got {:?}", f.shape())));
    }
    if coords.ndim() != 2 || coords.dim(1) != 2 {
        return Err(Error::shape(op, format!("coords must be [N,2], got {:?}", coords.shape())));
    }
    if !coords.is_finite() {
        return Err(Error::NonFinite { op });
    }
    let (c, h, w) = (f.dim(0), f.dim(1), f.dim(2));
    if h == 0 || w == 0 {
        return Err(Error::shape(op, "empty feature map"));
    }
    Ok((c, h, w, coords.dim(0)))
}

/// Samples `f: [C,H,W]` at `coords: [N,2]`, returning `[C,N]`.
pub fn bilinear_sample(f: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let (c, h, w, n) = check_inputs(f, coords, "bilinear_sample")?;
    let fd = f.data();
    let cd = coords.data();
    let plane = h * w;
    let mut out = vec![0.0; c * n];
    for i in 0..n {
        let t = Tap::new(cd[2 * i], cd[2 * i + 1], h, w);
        let w00 = (1.0 - t.ty) * (1.0 - t.tx);
        let w01 = (1.0 - t.ty) * t.tx;
        let w10 = t.ty * (1.0 - t.tx);
        let w11 = t.ty * t.tx;
        let (i00, i01, i10, i11) = (
            t.y0 * w + t.x0,
            t.y0 * w + t.x1,
            t.y1 * w + t.x0,
            t.y1 * w + t.x1,
        );
        for ch in 0..c {
            let p = &fd[ch * plane..(ch + 1) * plane];
            out[ch * n + i] = w00 * p[i00] + w01 * p[i01] + w10 * p[i10] + w11 * p[i11];
        }
    }
    Tensor::new(vec![c, n], out)
}

/// Returns `(d f, d coords)` for a cotangent of shape `[C,N]`.
pub fn bilinear_sample_backward(
    f: &Tensor,
    coords: &Tensor,
    cot: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w, n) = check_inputs(f, coords, "bilinear_sample_backward")?;
    cot.expect_shape("bilinear_sample_backward", &[Some(c), Some(n)])?;
    let fd = f.data();
    let cd = coords.data();
    let gd = cot.data();
    let plane = h * w;
    let mut df = vec![0.0; fd.len()];
    let mut dc = vec![0.0; 2 * n];
    for i in 0..n {
        let t = Tap::new(cd[2 * i], cd[2 * i + 1], h, w);
        let w00 = (1.0 - t.ty) * (1.0 - t.tx);
        let w01 = (1.0 - t.ty) * t.tx;
        let w10 = t.ty * (1.0 - t.tx);
        let w11 = t.ty * t.tx;
        let (i00, i01, i10, i11) = (
            t.y0 * w + t.x0,
            t.y0 * w + t.x1,
            t.y1 * w + t.x0,
            t.y1 * w + t.x1,
        );
        let (mut gy, mut gx) = (0.0, 0.0);
        for ch in 0..c {
            let g = gd[ch * n + i];
            if g == 0.0 {
                continue;
            }
            let base = ch * plane;
            df[base + i00] += g * w00;
            df[base + i01] += g * w01;
            df[base + i10] += g * w10;
            df[base + i11] += g * w11;
            let (f00, f01, f10, f11) = (fd[base + i00], fd[base + i01], fd[base + i10], fd[base + i11]);
            gx += g * ((1.0 - t.ty) * (f01 - f00) + t.ty * (f11 - f10));
            gy += g * ((1.0 - t.tx) * (f10 - f00) + t.tx * (f11 - f01));
        }
        dc[2 * i] = if t.row_free { gy } else { 0.0 };
        dc[2 * i + 1] = gx;
    }
    Ok((
        Tensor::new(f.shape().to_vec(), df)?,
        Tensor::new(vec![n, 2], dc)?,
    ))
}

/// Sampling coordinates that map a `[h_out, w_out]` lattice onto `[h, w]`
/// with aligned pixel centres.
pub fn resize_coords(h: usize, w: usize, h_out: usize, w_out: usize) -> Tensor {
    let sy = h as f64 / h_out as f64;
    let sx = w as f64 / w_out as f64;
    let mut data = Vec::with_capacity(2 * h_out * w_out);
    for i in 0..h_out {
        for j in 0..w_out {
            data.push((i as f64 + 0.5) * sy - 0.5);
            data.push((j as f64 + 0.5) * sx - 0.5);
        }
    }
    Tensor::new(vec![h_out * w_out, 2], data).expect("resize grid")
}

/// Bilinear resize of `[C,H,W]` to `[C,h_out,w_out]`. Resizing to the same
/// extent is the identity.
pub fn resize_bilinear(f: &Tensor, h_out: usize, w_out: usize) -> Result<Tensor> {
    f.expect_shape("resize_bilinear", &[None, None, None])?;
    if h_out == 0 || w_out == 0 {
        return Err(Error::arg("resize_bilinear", "empty target size"));
    }
    let coords = resize_coords(f.dim(1), f.dim(2), h_out, w_out);
    bilinear_sample(f, &coords)?.into_reshape(&[f.dim(0), h_out, w_out])
}

pub fn resize_bilinear_backward(f: &Tensor, cot: &Tensor) -> Result<Tensor> {
    cot.expect_shape("resize_bilinear_backward", &[Some(f.dim(0)), None, None])?;
    let (h_out, w_out) = (cot.dim(1), cot.dim(2));
    let coords = resize_coords(f.dim(1), f.dim(2), h_out, w_out);
    let flat = cot.reshape(&[f.dim(0), h_out * w_out])?;
    Ok(bilinear_sample_backward(f, &coords, &flat)?.0)
}
