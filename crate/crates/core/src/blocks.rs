//! The 2D half of the network: a seeded convolutional backbone, cross-scale
//! distortion-aware assembling, soft-flipping fusion, plane disentanglement
//! and vertical compression to two 1D sequences.
//!
//! Every operation comes as a forward function plus a `*_backward` function
//! that takes the same inputs and an output cotangent. Backward passes
//! recompute whatever intermediate state they need.

use crate::error::{Error, Result};
use crate::numerics::{
    avg_pool2, avg_pool2_backward, bilinear_sample, bilinear_sample_backward, conv3x3,
    conv3x3_backward, ops, resize_bilinear, resize_bilinear_backward, Tensor,
};
use crate::sphere::{SamplingGrid, CENTER_TAP, TAPS};

/// Number of backbone scales.
pub const SCALES: usize = 4;
/// Zero-based index of the reference scale (the third scale).
pub const REF_SCALE: usize = 2;
/// Samples per position attended by CSDA (9 taps x 4 scales).
pub const CSDA_SAMPLES: usize = TAPS * SCALES;
/// Flat sample index of the centre tap at the reference scale.
pub const CSDA_CENTER: usize = CENTER_TAP * SCALES + REF_SCALE;

/// Feature maps `f^s`, `s = 1..4`, each `[C, H/2^(s+1), W/2^(s+1)]`.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub scales: [Tensor; SCALES],
}

impl MultiScaleFeatures {
    pub fn reference(&self) -> &Tensor {
        &self.scales[REF_SCALE]
    }

    pub fn channels(&self) -> usize {
        self.scales[0].dim(0)
    }
}

/// The pair of disentangled 1D sequences, each `[W, C]`.
#[derive(Debug, Clone)]
pub struct PlaneSequences {
    pub horizontal: Tensor,
    pub vertical: Tensor,
}

// ---------------------------------------------------------------------------
// backbone

/// Backbone weights: four stride-2 3x3 convolutions after a 2x2 mean-pool
/// stem. Layer `s` produces scale `s`.
#[derive(Debug, Clone)]
pub struct BackboneWeights<'a> {
    pub weights: [&'a Tensor; SCALES],
    pub biases: [&'a Tensor; SCALES],
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    stem: Tensor,
    pre: Vec<Tensor>,
    input_shape: Vec<usize>,
}

pub fn backbone_forward(image: &Tensor, w: &BackboneWeights) -> Result<(MultiScaleFeatures, BackboneCache)> {
    image.expect_shape("backbone", &[Some(3), None, None])?;
    let (h, wd) = (image.dim(1), image.dim(2));
    if wd != 2 * h || h % 32 != 0 {
        return Err(Error::arg(
            "backbone",
            format!("image must be H x 2H with H divisible by 32, got {h}x{wd}"),
        ));
    }
    let stem = avg_pool2(image)?;
    let mut pre = Vec::with_capacity(SCALES);
    let mut outs: Vec<Tensor> = Vec::with_capacity(SCALES);
    for s in 0..SCALES {
        let input = if s == 0 { &stem } else { &outs[s - 1] };
        let z = conv3x3(input, w.weights[s], w.biases[s], 2)?;
        outs.push(ops::leaky_relu(&z));
        pre.push(z);
    }
    let scales: [Tensor; SCALES] = outs.try_into().expect("four scales");
    Ok((
        MultiScaleFeatures { scales },
        BackboneCache {
            stem,
            pre,
            input_shape: image.shape().to_vec(),
        },
    ))
}

/// Backbone without the cache.
pub fn backbone_stub(image: &Tensor, w: &BackboneWeights) -> Result<MultiScaleFeatures> {
    Ok(backbone_forward(image, w)?.0)
}

/// Parameter gradients `(d weights, d biases)` per layer and the image
/// gradient, given cotangents on every scale.
pub fn backbone_backward(
    cache: &BackboneCache,
    feats: &MultiScaleFeatures,
    w: &BackboneWeights,
    cots: &[Tensor; SCALES],
) -> Result<(Vec<Tensor>, Vec<Tensor>, Tensor)> {
    let mut dws = vec![Tensor::zeros(&[0]); SCALES];
    let mut dbs = vec![Tensor::zeros(&[0]); SCALES];
    let mut carry: Option<Tensor> = None;
    for s in (0..SCALES).rev() {
        let mut g = cots[s].clone();
        if let Some(c) = carry.take() {
            g.add_assign(&c)?;
        }
        let dz = ops::leaky_relu_backward(&cache.pre[s], &g)?;
        let input = if s == 0 { &cache.stem } else { &feats.scales[s - 1] };
        let (dx, dw, db) = conv3x3_backward(input, w.weights[s], w.biases[s], 2, &dz)?;
        dws[s] = dw;
        dbs[s] = db;
        carry = Some(dx);
    }
    let dimage = avg_pool2_backward(&cache.input_shape, &carry.expect("stem gradient"))?;
    Ok((dws, dbs, dimage))
}

// ---------------------------------------------------------------------------
// distortion-aware gathering

fn check_grid(f: &Tensor, grid: &SamplingGrid, op: &'static str) -> Result<()> {
    f.expect_shape(op, &[None, None, None])?;
    let g = grid.grid();
    if f.dim(1) != g.height() || f.dim(2) != g.width() {
        return Err(Error::shape(
            op,
            format!(
                "grid is {}x{}, features are {}x{}",
                g.height(),
                g.width(),
                f.dim(1),
                f.dim(2)
            ),
        ));
    }
    Ok(())
}

/// Samples `f: [C,H,W]` at the stencil coordinates `p + Δp`, giving
/// `[C,H,W,9]`.
pub fn distortion_gather(f: &Tensor, grid: &SamplingGrid, offsets: &Tensor) -> Result<Tensor> {
    check_grid(f, grid, "distortion_gather")?;
    let coords = grid.coords(offsets)?;
    let (c, h, w) = (f.dim(0), f.dim(1), f.dim(2));
    bilinear_sample(f, &coords)?.into_reshape(&[c, h, w, TAPS])
}

/// Returns `(d f, d offsets)`.
pub fn distortion_gather_backward(
    f: &Tensor,
    grid: &SamplingGrid,
    offsets: &Tensor,
    cot: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_grid(f, grid, "distortion_gather_backward")?;
    let coords = grid.coords(offsets)?;
    let (c, h, w) = (f.dim(0), f.dim(1), f.dim(2));
    cot.expect_shape("distortion_gather_backward", &[Some(c), Some(h), Some(w), Some(TAPS)])?;
    let flat = cot.reshape(&[c, h * w * TAPS])?;
    let (df, dc) = bilinear_sample_backward(f, &coords, &flat)?;
    Ok((df, dc.into_reshape(offsets.shape())?))
}

fn resize_to(f: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if f.dim(1) == h && f.dim(2) == w {
        Ok(f.clone())
    } else {
        resize_bilinear(f, h, w)
    }
}

fn resize_to_backward(f: &Tensor, cot: &Tensor) -> Result<Tensor> {
    if f.shape() == cot.shape() {
        Ok(cot.clone())
    } else {
        resize_bilinear_backward(f, cot)
    }
}

/// Resizes every scale to the reference grid and gathers it with the shared
/// stencil, stacking scales on a trailing axis: `[C,H,W,9,4]`.
pub fn multiscale_gather(ms: &MultiScaleFeatures, grid: &SamplingGrid, offsets: &Tensor) -> Result<Tensor> {
    let g = grid.grid();
    let (h, w) = (g.height(), g.width());
    let c = ms.channels();
    let coords = grid.coords(offsets)?;
    let n = h * w * TAPS;
    let mut out = vec![0.0; c * n * SCALES];
    for (s, f) in ms.scales.iter().enumerate() {
        if f.dim(0) != c {
            return Err(Error::shape("multiscale_gather", "scales disagree on channel count"));
        }
        let sampled = bilinear_sample(&resize_to(f, h, w)?, &coords)?;
        for (idx, &v) in sampled.data().iter().enumerate() {
            out[idx * SCALES + s] = v;
        }
    }
    Tensor::new(vec![c, h, w, TAPS, SCALES], out)
}

/// Returns per-scale feature gradients and the offset gradient.
pub fn multiscale_gather_backward(
    ms: &MultiScaleFeatures,
    grid: &SamplingGrid,
    offsets: &Tensor,
    cot: &Tensor,
) -> Result<([Tensor; SCALES], Tensor)> {
    let g = grid.grid();
    let (h, w) = (g.height(), g.width());
    let c = ms.channels();
    cot.expect_shape(
        "multiscale_gather_backward",
        &[Some(c), Some(h), Some(w), Some(TAPS), Some(SCALES)],
    )?;
    let coords = grid.coords(offsets)?;
    let n = h * w * TAPS;
    let mut doffsets = Tensor::zeros(offsets.shape());
    let mut dscales = Vec::with_capacity(SCALES);
    for (s, f) in ms.scales.iter().enumerate() {
        let resized = resize_to(f, h, w)?;
        let cs = Tensor::from_fn(&[c, n], |idx| cot.data()[idx * SCALES + s]);
        let (dr, dc) = bilinear_sample_backward(&resized, &coords, &cs)?;
        doffsets.add_assign(&dc.into_reshape(offsets.shape())?)?;
        dscales.push(resize_to_backward(f, &dr)?);
    }
    Ok((dscales.try_into().expect("four scales"), doffsets))
}

// ---------------------------------------------------------------------------
// CSDA

fn csda_dims(x: &Tensor, weight: &Tensor, bias: &Tensor, heads: usize) -> Result<(usize, usize, usize)> {
    const OP: &str = "csda_attend";
    x.expect_shape(OP, &[None, None, None, Some(TAPS), Some(SCALES)])?;
    let c = x.dim(0);
    if heads == 0 || c % heads != 0 {
        return Err(Error::arg(OP, format!("{c} channels not divisible by {heads} heads")));
    }
    weight.expect_shape(OP, &[Some(heads * CSDA_SAMPLES), Some(c)])?;
    bias.expect_shape(OP, &[Some(heads * CSDA_SAMPLES)])?;
    Ok((c, x.dim(1) * x.dim(2), heads))
}

/// Attention weights `[L, H*W, 36]`. Logits per head are a linear map of the
/// reference-scale centre sample at each position.
pub fn csda_attention_weights(x: &Tensor, weight: &Tensor, bias: &Tensor, heads: usize) -> Result<Tensor> {
    let (c, p, l) = csda_dims(x, weight, bias, heads)?;
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let mut att = vec![0.0; l * p * CSDA_SAMPLES];
    let mut logits = [0.0; CSDA_SAMPLES];
    let mut center = vec![0.0; c];
    for q in 0..p {
        for (ch, v) in center.iter_mut().enumerate() {
            *v = xd[(ch * p + q) * CSDA_SAMPLES + CSDA_CENTER];
        }
        for head in 0..l {
            for (m, lg) in logits.iter_mut().enumerate() {
                let row = head * CSDA_SAMPLES + m;
                *lg = bd[row] + wd[row * c..(row + 1) * c].iter().zip(&center).map(|(a, b)| a * b).sum::<f64>();
            }
            let base = (head * p + q) * CSDA_SAMPLES;
            ops::softmax_slice(&logits, &mut att[base..base + CSDA_SAMPLES]);
        }
    }
    Tensor::new(vec![l, p, CSDA_SAMPLES], att)
}

/// Cross-scale distortion-aware assembling: `[C,H,W,9,4] -> [C,H,W]`, each
/// head mixing its `C/L` channels over the 36 gathered samples.
pub fn csda_attend(x: &Tensor, weight: &Tensor, bias: &Tensor, heads: usize) -> Result<Tensor> {
    let (c, p, l) = csda_dims(x, weight, bias, heads)?;
    let att = csda_attention_weights(x, weight, bias, heads)?;
    let d = c / l;
    let (xd, ad) = (x.data(), att.data());
    let mut out = vec![0.0; c * p];
    for ch in 0..c {
        let head = ch / d;
        for q in 0..p {
            let xs = &xd[(ch * p + q) * CSDA_SAMPLES..(ch * p + q + 1) * CSDA_SAMPLES];
            let a = &ad[(head * p + q) * CSDA_SAMPLES..(head * p + q + 1) * CSDA_SAMPLES];
            out[ch * p + q] = xs.iter().zip(a).map(|(u, v)| u * v).sum();
        }
    }
    Tensor::new(vec![c, x.dim(1), x.dim(2)], out)
}

/// Returns `(d x, d weight, d bias)`.
pub fn csda_attend_backward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    heads: usize,
    cot: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, p, l) = csda_dims(x, weight, bias, heads)?;
    cot.expect_shape("csda_attend_backward", &[Some(c), Some(x.dim(1)), Some(x.dim(2))])?;
    let att = csda_attention_weights(x, weight, bias, heads)?;
    let d = c / l;
    let (xd, ad, wd, gd) = (x.data(), att.data(), weight.data(), cot.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wd.len()];
    let mut db = vec![0.0; bias.len()];
    let mut center = vec![0.0; c];
    let mut datt = [0.0; CSDA_SAMPLES];
    for q in 0..p {
        for (ch, v) in center.iter_mut().enumerate() {
            *v = xd[(ch * p + q) * CSDA_SAMPLES + CSDA_CENTER];
        }
        let mut dcenter = vec![0.0; c];
        for head in 0..l {
            let a = &ad[(head * p + q) * CSDA_SAMPLES..(head * p + q + 1) * CSDA_SAMPLES];
            datt.iter_mut().for_each(|v| *v = 0.0);
            for ch in head * d..(head + 1) * d {
                let g = gd[ch * p + q];
                let base = (ch * p + q) * CSDA_SAMPLES;
                for m in 0..CSDA_SAMPLES {
                    datt[m] += g * xd[base + m];
                    dx[base + m] += g * a[m];
                }
            }
            let s: f64 = a.iter().zip(&datt).map(|(u, v)| u * v).sum();
            for m in 0..CSDA_SAMPLES {
                let dz = a[m] * (datt[m] - s);
                let row = head * CSDA_SAMPLES + m;
                db[row] += dz;
                for ch in 0..c {
                    dw[row * c + ch] += dz * center[ch];
                    dcenter[ch] += dz * wd[row * c + ch];
                }
            }
        }
        for (ch, v) in dcenter.iter().enumerate() {
            dx[(ch * p + q) * CSDA_SAMPLES + CSDA_CENTER] += v;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::new(bias.shape().to_vec(), db)?,
    ))
}

// ---------------------------------------------------------------------------
// soft-flipping fusion

/// Mirrors rows (upside down).
pub fn flip_vertical(f: &Tensor) -> Tensor {
    let (c, h, w) = (f.dim(0), f.dim(1), f.dim(2));
    let d = f.data();
    Tensor::from_fn(f.shape(), |idx| {
        let ch = idx / (h * w);
        let i = (idx / w) % h;
        let j = idx % w;
        d[(ch * h + (h - 1 - i)) * w + j]
    })
    .reshape(&[c, h, w])
    .expect("same shape")
}

fn deform_coords(h: usize, w: usize, offsets: &Tensor) -> Result<Tensor> {
    offsets.expect_shape("soft_flip_fuse", &[Some(h), Some(w), Some(TAPS), Some(2)])?;
    let od = offsets.data();
    let mut data = Vec::with_capacity(h * w * TAPS * 2);
    for i in 0..h {
        for j in 0..w {
            for k in 0..TAPS {
                let base = ((i * w + j) * TAPS + k) * 2;
                data.push(i as f64 + (k / 3) as f64 - 1.0 + od[base]);
                data.push(j as f64 + (k % 3) as f64 - 1.0 + od[base + 1]);
            }
        }
    }
    Tensor::new(vec![h * w * TAPS, 2], data)
}

/// Soft-flip weights: a 3x3 deformable convolution with free per-position
/// offsets `[H,W,9,2]`.
#[derive(Debug, Clone, Copy)]
pub struct DeformWeights<'a> {
    pub weight: &'a Tensor,
    pub bias: &'a Tensor,
    pub offsets: &'a Tensor,
}

fn deform_check(f: &Tensor, p: &DeformWeights) -> Result<(usize, usize, usize)> {
    const OP: &str = "soft_flip_fuse";
    f.expect_shape(OP, &[None, None, None])?;
    let c = f.dim(0);
    p.weight.expect_shape(OP, &[Some(c), Some(c), Some(3), Some(3)])?;
    p.bias.expect_shape(OP, &[Some(c)])?;
    Ok((c, f.dim(1), f.dim(2)))
}

/// `f_u = (f + deform_conv(flip(f))) / 2`.
pub fn soft_flip_fuse(f: &Tensor, p: &DeformWeights) -> Result<Tensor> {
    let (c, h, w) = deform_check(f, p)?;
    let coords = deform_coords(h, w, p.offsets)?;
    let samp = bilinear_sample(&flip_vertical(f), &coords)?;
    let (sd, wd, bd, fd) = (samp.data(), p.weight.data(), p.bias.data(), f.data());
    let n = h * w;
    let mut out = vec![0.0; c * n];
    for o in 0..c {
        for q in 0..n {
            let mut acc = bd[o];
            for ci in 0..c {
                let wrow = &wd[(o * c + ci) * TAPS..(o * c + ci + 1) * TAPS];
                let srow = &sd[ci * n * TAPS + q * TAPS..ci * n * TAPS + (q + 1) * TAPS];
                acc += wrow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
            }
            out[o * n + q] = 0.5 * (fd[o * n + q] + acc);
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Returns `(d f, d weight, d bias, d offsets)`.
pub fn soft_flip_fuse_backward(
    f: &Tensor,
    p: &DeformWeights,
    cot: &Tensor,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let (c, h, w) = deform_check(f, p)?;
    cot.expect_shape("soft_flip_fuse_backward", &[Some(c), Some(h), Some(w)])?;
    let coords = deform_coords(h, w, p.offsets)?;
    let flipped = flip_vertical(f);
    let samp = bilinear_sample(&flipped, &coords)?;
    let (sd, wd, gd) = (samp.data(), p.weight.data(), cot.data());
    let n = h * w;
    let mut dw = vec![0.0; wd.len()];
    let mut db = vec![0.0; c];
    let mut dsamp = vec![0.0; sd.len()];
    for o in 0..c {
        for q in 0..n {
            let g = 0.5 * gd[o * n + q];
            db[o] += g;
            for ci in 0..c {
                let wbase = (o * c + ci) * TAPS;
                let sbase = ci * n * TAPS + q * TAPS;
                for k in 0..TAPS {
                    dw[wbase + k] += g * sd[sbase + k];
                    dsamp[sbase + k] += g * wd[wbase + k];
                }
            }
        }
    }
    let dsamp = Tensor::new(vec![c, n * TAPS], dsamp)?;
    let (dflipped, dcoords) = bilinear_sample_backward(&flipped, &coords, &dsamp)?;
    let mut df = flip_vertical(&dflipped);
    df.add_assign(&cot.scale(0.5))?;
    Ok((
        df,
        Tensor::new(p.weight.shape().to_vec(), dw)?,
        Tensor::new(vec![c], db)?,
        dcoords.into_reshape(p.offsets.shape())?,
    ))
}

// ---------------------------------------------------------------------------
// disentanglement

/// Output of [`disentangle`].
#[derive(Debug, Clone)]
pub struct Disentangled {
    pub horizontal: Tensor,
    pub vertical: Tensor,
    /// Segmentation logits `[H,W]`.
    pub logits: Tensor,
}

fn seg_logits(base: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let s = conv3x3(base, weight, bias, 1)?;
    s.into_reshape(&[base.dim(1), base.dim(2)])
}

/// Splits `f_u + f'_ms` into horizontal-plane and vertical-plane parts with a
/// one-conv segmentation head.
pub fn disentangle(fu: &Tensor, fms: &Tensor, seg_weight: &Tensor, seg_bias: &Tensor) -> Result<Disentangled> {
    let base = ops::add(fu, fms)?;
    let logits = seg_logits(&base, seg_weight, seg_bias)?;
    let (c, h, w) = (base.dim(0), base.dim(1), base.dim(2));
    let m = ops::sigmoid(&logits);
    let md = m.data();
    let bd = base.data();
    let mut hor = vec![0.0; c * h * w];
    let mut ver = vec![0.0; c * h * w];
    for ch in 0..c {
        for q in 0..h * w {
            let v = bd[ch * h * w + q];
            hor[ch * h * w + q] = v * md[q];
            ver[ch * h * w + q] = v * (1.0 - md[q]);
        }
    }
    Ok(Disentangled {
        horizontal: Tensor::new(vec![c, h, w], hor)?,
        vertical: Tensor::new(vec![c, h, w], ver)?,
        logits,
    })
}

/// Gradients of [`disentangle`]: returns `(d base, d seg_weight, d seg_bias)`;
/// `d base` is the gradient for both `f_u` and `f'_ms`.
pub fn disentangle_backward(
    fu: &Tensor,
    fms: &Tensor,
    seg_weight: &Tensor,
    seg_bias: &Tensor,
    d_horizontal: &Tensor,
    d_vertical: &Tensor,
    d_logits: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let base = ops::add(fu, fms)?;
    let logits = seg_logits(&base, seg_weight, seg_bias)?;
    let (c, h, w) = (base.dim(0), base.dim(1), base.dim(2));
    let n = h * w;
    let m = ops::sigmoid(&logits);
    let (md, bd, dh, dv) = (m.data(), base.data(), d_horizontal.data(), d_vertical.data());
    let mut dbase = vec![0.0; c * n];
    let mut dm = vec![0.0; n];
    for ch in 0..c {
        for q in 0..n {
            let i = ch * n + q;
            dbase[i] = dh[i] * md[q] + dv[i] * (1.0 - md[q]);
            dm[q] += (dh[i] - dv[i]) * bd[i];
        }
    }
    let mut dlog = ops::sigmoid_backward(&logits, &Tensor::new(vec![h, w], dm)?)?;
    dlog.add_assign(d_logits)?;
    let (dx, dw, db) = conv3x3_backward(&base, seg_weight, seg_bias, 1, &dlog.into_reshape(&[1, h, w])?)?;
    let mut dbase = Tensor::new(vec![c, h, w], dbase)?;
    dbase.add_assign(&dx)?;
    Ok((dbase, dw, db))
}

// ---------------------------------------------------------------------------
// vertical compression

/// Mean over rows, transposed to `[W, C]`.
pub fn compress(f: &Tensor) -> Result<Tensor> {
    f.expect_shape("compress_vertical", &[None, None, None])?;
    let m = ops::mean_axis(f, 1)?;
    ops::transpose2(&m)
}

pub fn compress_backward(input_shape: &[usize], cot: &Tensor) -> Result<Tensor> {
    let m = ops::transpose2(cot)?;
    ops::mean_axis_backward(input_shape, 1, &m)
}

pub fn compress_vertical(horizontal: &Tensor, vertical: &Tensor) -> Result<PlaneSequences> {
    Ok(PlaneSequences {
        horizontal: compress(horizontal)?,
        vertical: compress(vertical)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::EquirectGrid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_kernel(c: usize) -> Tensor {
        let mut k = Tensor::zeros(&[c, c, 3, 3]);
        for i in 0..c {
            k.set(&[i, i, 1, 1], 1.0);
        }
        k
    }

    #[test]
    fn gather_with_zero_offsets() {
        let g = EquirectGrid::new(8, 16).unwrap();
        let grid = SamplingGrid::new(g);
        let f = Tensor::full(&[2, 8, 16], 0.7);
        let off = Tensor::zeros(&grid.offset_shape());
        let out = distortion_gather(&f, &grid, &off).unwrap();
        assert_eq!(out.shape(), &[2, 8, 16, 9]);
        assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::randn(&[2, 8, 16], 1.0, &mut rng);
        let out = distortion_gather(&f, &grid, &off).unwrap();
        for i in 0..8 {
            for j in 0..16 {
                assert_eq!(out.at(&[1, i, j, CENTER_TAP]), f.at(&[1, i, j]));
            }
        }
        let small = Tensor::zeros(&[2, 4, 8]);
        assert!(distortion_gather(&small, &grid, &off).is_err());
    }

    #[test]
    fn csda_rejects_indivisible_heads() {
        let x = Tensor::zeros(&[6, 2, 4, TAPS, SCALES]);
        let w = Tensor::zeros(&[4 * CSDA_SAMPLES, 6]);
        let b = Tensor::zeros(&[4 * CSDA_SAMPLES]);
        assert!(csda_attend(&x, &w, &b, 4).is_err());
    }

    #[test]
    fn soft_flip_identity_kernel() {
        let (c, h, w) = (3, 6, 8);
        let sym = Tensor::from_fn(&[c, h, w], |idx| {
            let i = (idx / w) % h;
            let j = idx % w;
            let ii = i.min(h - 1 - i);
            ((ii * 7 + j * 3 + idx / (h * w)) as f64).sin()
        });
        let anti = Tensor::from_fn(&[c, h, w], |idx| {
            let i = (idx / w) % h;
            let j = idx % w;
            let sign = if i < h / 2 { 1.0 } else { -1.0 };
            let ii = i.min(h - 1 - i);
            sign * ((ii * 5 + j) as f64).cos()
        });
        let k = identity_kernel(c);
        let b = Tensor::zeros(&[c]);
        let off = Tensor::zeros(&[h, w, TAPS, 2]);
        let p = DeformWeights {
            weight: &k,
            bias: &b,
            offsets: &off,
        };
        assert!(soft_flip_fuse(&sym, &p).unwrap().max_abs_diff(&sym) < 1e-15);
        assert!(soft_flip_fuse(&anti, &p).unwrap().norm() < 1e-15);
    }

    #[test]
    fn disentangle_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fu = Tensor::randn(&[4, 6, 12], 1.0, &mut rng);
        let fms = Tensor::randn(&[4, 6, 12], 1.0, &mut rng);
        let base = ops::add(&fu, &fms).unwrap();
        let w0 = Tensor::zeros(&[1, 4, 3, 3]);
        let half = disentangle(&fu, &fms, &w0, &Tensor::zeros(&[1])).unwrap();
        assert!(half.horizontal.max_abs_diff(&base.scale(0.5)) < 1e-15);
        assert!(half.vertical.max_abs_diff(&base.scale(0.5)) < 1e-15);
        let sat = disentangle(&fu, &fms, &w0, &Tensor::scalar(60.0)).unwrap();
        assert!(sat.vertical.norm() < 1e-20);
        assert!(sat.horizontal.max_abs_diff(&base) < 1e-12);
    }

    #[test]
    fn compression_means() {
        let f = Tensor::full(&[2, 5, 4], 3.0);
        let s = compress(&f).unwrap();
        assert_eq!(s.shape(), &[4, 2]);
        assert!(s.data().iter().all(|v| (v - 3.0).abs() < 1e-15));
        let mut one = Tensor::zeros(&[1, 5, 4]);
        for j in 0..4 {
            one.set(&[0, 2, j], 2.0);
        }
        let s = compress(&one).unwrap();
        assert!(s.data().iter().all(|v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn backbone_rejects_wrong_aspect() {
        let w = Tensor::zeros(&[2, 3, 3, 3]);
        let w2 = Tensor::zeros(&[2, 2, 3, 3]);
        let b = Tensor::zeros(&[2]);
        let bw = BackboneWeights {
            weights: [&w, &w2, &w2, &w2],
            biases: [&b, &b, &b, &b],
        };
        assert!(backbone_stub(&Tensor::zeros(&[3, 64, 64]), &bw).is_err());
        let out = backbone_stub(&Tensor::zeros(&[3, 64, 128]), &bw).unwrap();
        let shapes: Vec<_> = out.scales.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 16, 32], vec![2, 8, 16], vec![2, 4, 8], vec![2, 2, 4]]);
        assert!(out.scales.iter().all(|t| t.norm() == 0.0));
    }
}
