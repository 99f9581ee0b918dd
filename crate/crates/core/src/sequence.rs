//! The 1D half of the network: channel-wise graph attention, scaled
//! dot-product self- and cross-attention, and the depth/height heads.
//!
//! Sequences are `[W, C]`: one row per panorama column.

use crate::error::{Error, Result};
use crate::layout::Prediction;
use crate::numerics::{ops, Tensor};

/// Channel adjacency built from cosine similarity of channel columns.
#[derive(Debug, Clone)]
pub struct ChannelGraph {
    /// Row-stochastic, zero diagonal.
    pub adjacency: Tensor,
    /// `I - A`.
    pub laplacian: Tensor,
}

fn channel_norms(q: &Tensor) -> Vec<f64> {
    let (w, c) = (q.dim(0), q.dim(1));
    let d = q.data();
    (0..c)
        .map(|a| (0..w).map(|j| d[j * c + a] * d[j * c + a]).sum::<f64>().sqrt())
        .collect()
}

/// Cosine similarity between channel columns; pairs involving a zero-norm
/// channel get similarity 0.
fn cosine_similarity(q: &Tensor, norms: &[f64]) -> Vec<f64> {
    let (w, c) = (q.dim(0), q.dim(1));
    let d = q.data();
    let mut s = vec![0.0; c * c];
    for a in 0..c {
        for b in 0..c {
            if norms[a] > 0.0 && norms[b] > 0.0 {
                let dot: f64 = (0..w).map(|j| d[j * c + a] * d[j * c + b]).sum();
                s[a * c + b] = dot / (norms[a] * norms[b]);
            }
        }
    }
    s
}

fn check_graph_input(q: &Tensor) -> Result<()> {
    q.expect_shape("channel_graph", &[None, None])?;
    if q.dim(1) < 2 {
        return Err(Error::arg("channel_graph", "needs at least two channels"));
    }
    Ok(())
}

pub fn channel_graph(q: &Tensor) -> Result<ChannelGraph> {
    check_graph_input(q)?;
    let c = q.dim(1);
    let s = cosine_similarity(q, &channel_norms(q));
    let mut adj = vec![0.0; c * c];
    let mut buf = vec![0.0; c - 1];
    let mut out = vec![0.0; c - 1];
    for a in 0..c {
        for (k, b) in (0..c).filter(|&b| b != a).enumerate() {
            buf[k] = s[a * c + b];
        }
        ops::softmax_slice(&buf, &mut out);
        for (k, b) in (0..c).filter(|&b| b != a).enumerate() {
            adj[a * c + b] = out[k];
        }
    }
    let adjacency = Tensor::new(vec![c, c], adj)?;
    let laplacian = Tensor::from_fn(&[c, c], |idx| {
        let eye = if idx / c == idx % c { 1.0 } else { 0.0 };
        eye - adjacency.data()[idx]
    });
    Ok(ChannelGraph { adjacency, laplacian })
}

/// `(I - A)` applied across channels, then the linear map `weight: [C, C]`.
pub fn channel_graph_attend(q: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let g = channel_graph(q)?;
    weight.expect_shape("channel_graph_attend", &[Some(q.dim(1)), Some(q.dim(1))])?;
    let mixed = ops::matmul(q, &ops::transpose2(&g.laplacian)?)?;
    ops::matmul(&mixed, weight)
}

/// Returns `(d q, d weight)`.
pub fn channel_graph_attend_backward(q: &Tensor, weight: &Tensor, cot: &Tensor) -> Result<(Tensor, Tensor)> {
    let g = channel_graph(q)?;
    let (w, c) = (q.dim(0), q.dim(1));
    weight.expect_shape("channel_graph_attend_backward", &[Some(c), Some(c)])?;
    cot.expect_shape("channel_graph_attend_backward", &[Some(w), Some(c)])?;
    let mixed = ops::matmul(q, &ops::transpose2(&g.laplacian)?)?;
    let (dmixed, dweight) = ops::matmul_backward(&mixed, weight, cot)?;

    // mixed = q - q A^T
    let mut dq = ops::matmul(&dmixed, &g.laplacian)?;
    let da = ops::matmul(&ops::transpose2(&dmixed)?, q)?.scale(-1.0);

    let (ad, dad) = (g.adjacency.data(), da.data());
    let mut ds = vec![0.0; c * c];
    for a in 0..c {
        let dot: f64 = (0..c).filter(|&b| b != a).map(|b| ad[a * c + b] * dad[a * c + b]).sum();
        for b in (0..c).filter(|&b| b != a) {
            ds[a * c + b] = ad[a * c + b] * (dad[a * c + b] - dot);
        }
    }

    let norms = channel_norms(q);
    let s = cosine_similarity(q, &norms);
    let qd = q.data();
    let dqd = dq.data_mut();
    for a in 0..c {
        for b in (0..c).filter(|&b| b != a) {
            let g = ds[a * c + b];
            if g == 0.0 || norms[a] == 0.0 || norms[b] == 0.0 {
                continue;
            }
            let nn = norms[a] * norms[b];
            let sab = s[a * c + b];
            for j in 0..w {
                let (xa, xb) = (qd[j * c + a], qd[j * c + b]);
                dqd[j * c + a] += g * (xb / nn - sab * xa / (norms[a] * norms[a]));
                dqd[j * c + b] += g * (xa / nn - sab * xb / (norms[b] * norms[b]));
            }
        }
    }
    Ok((dq, dweight))
}

/// Query, key and value maps, each `x W + b` with `W: [C, C]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'a> {
    pub wq: &'a Tensor,
    pub bq: &'a Tensor,
    pub wk: &'a Tensor,
    pub bk: &'a Tensor,
    pub wv: &'a Tensor,
    pub bv: &'a Tensor,
}

/// Gradients matching [`AttentionWeights`] field by field.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let c = x.dim(1);
    w.expect_shape("attention", &[Some(c), Some(c)])?;
    b.expect_shape("attention", &[Some(c)])?;
    let mut y = ops::matmul(x, w)?;
    let bd = b.data();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += bd[i % c];
    }
    Ok(y)
}

fn column_sums(x: &Tensor) -> Tensor {
    let c = x.dim(1);
    let mut out = vec![0.0; c];
    for (i, v) in x.data().iter().enumerate() {
        out[i % c] += v;
    }
    Tensor::from_vec(out)
}

struct AttentionState {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Tensor,
}

fn attention_state(xq: &Tensor, xkv: &Tensor, p: &AttentionWeights) -> Result<AttentionState> {
    xq.expect_shape("attention", &[None, None])?;
    xkv.expect_shape("attention", &[None, Some(xq.dim(1))])?;
    let scale = 1.0 / (xq.dim(1) as f64).sqrt();
    let q = linear(xq, p.wq, p.bq)?;
    let k = linear(xkv, p.wk, p.bk)?;
    let v = linear(xkv, p.wv, p.bv)?;
    let logits = ops::matmul(&q, &ops::transpose2(&k)?)?.scale(scale);
    let probs = ops::softmax(&logits, 1)?;
    Ok(AttentionState { q, k, v, probs })
}

/// Single-head scaled dot-product attention with the query input as
/// residual: `x_q + softmax(Q K^T / sqrt(C)) V`.
///
/// Self- and cross-attention share this one convention, so
/// `cross_attend(a, a, p) == self_attend(a, p)` exactly.
pub fn attention(xq: &Tensor, xkv: &Tensor, p: &AttentionWeights) -> Result<Tensor> {
    let st = attention_state(xq, xkv, p)?;
    let mut out = ops::matmul(&st.probs, &st.v)?;
    out.add_assign(xq)?;
    Ok(out)
}

/// Returns `(d x_q, d x_kv, parameter grads)`.
pub fn attention_backward(
    xq: &Tensor,
    xkv: &Tensor,
    p: &AttentionWeights,
    cot: &Tensor,
) -> Result<(Tensor, Tensor, AttentionGrads)> {
    let st = attention_state(xq, xkv, p)?;
    cot.expect_shape("attention_backward", &[Some(xq.dim(0)), Some(xq.dim(1))])?;
    let scale = 1.0 / (xq.dim(1) as f64).sqrt();
    let (dprobs, dv) = ops::matmul_backward(&st.probs, &st.v, cot)?;
    let dlogits = ops::softmax_backward(&st.probs, 1, &dprobs)?.scale(scale);
    let dq = ops::matmul(&dlogits, &st.k)?;
    let dk = ops::matmul(&ops::transpose2(&dlogits)?, &st.q)?;

    let mut dxq = ops::matmul(&dq, &ops::transpose2(p.wq)?)?;
    dxq.add_assign(cot)?;
    let mut dxkv = ops::matmul(&dk, &ops::transpose2(p.wk)?)?;
    dxkv.add_assign(&ops::matmul(&dv, &ops::transpose2(p.wv)?)?)?;
    let grads = AttentionGrads {
        wq: ops::matmul(&ops::transpose2(xq)?, &dq)?,
        bq: column_sums(&dq),
        wk: ops::matmul(&ops::transpose2(xkv)?, &dk)?,
        bk: column_sums(&dk),
        wv: ops::matmul(&ops::transpose2(xkv)?, &dv)?,
        bv: column_sums(&dv),
    };
    Ok((dxq, dxkv, grads))
}

pub fn self_attend(x: &Tensor, p: &AttentionWeights) -> Result<Tensor> {
    attention(x, x, p)
}

pub fn self_attend_backward(x: &Tensor, p: &AttentionWeights, cot: &Tensor) -> Result<(Tensor, AttentionGrads)> {
    let (mut dx, dkv, g) = attention_backward(x, x, p, cot)?;
    dx.add_assign(&dkv)?;
    Ok((dx, g))
}

fn check_widths(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape() != b.shape() {
        return Err(Error::shape(
            "cross_attend",
            format!("sequences {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Queries from `a`, keys and values from `b`, residual on `a`.
pub fn cross_attend(a: &Tensor, b: &Tensor, p: &AttentionWeights) -> Result<Tensor> {
    check_widths(a, b)?;
    attention(a, b, p)
}

pub fn cross_attend_backward(
    a: &Tensor,
    b: &Tensor,
    p: &AttentionWeights,
    cot: &Tensor,
) -> Result<(Tensor, Tensor, AttentionGrads)> {
    check_widths(a, b)?;
    attention_backward(a, b, p, cot)
}

/// Output-head weights: `w_d, w_h: [C]`, `b_d, b_h: [1]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadWeights<'a> {
    pub depth_weight: &'a Tensor,
    pub depth_bias: &'a Tensor,
    pub height_weight: &'a Tensor,
    pub height_bias: &'a Tensor,
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// `[W]`, metres.
    pub depth: Tensor,
    pub height: f64,
}

impl HeadOutput {
    pub fn to_prediction(&self) -> Prediction {
        Prediction {
            horizon_depth: self.depth.data().to_vec(),
            room_height_m: self.height,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub vertical: Tensor,
    pub horizontal: Tensor,
    pub depth_weight: Tensor,
    pub depth_bias: Tensor,
    pub height_weight: Tensor,
    pub height_bias: Tensor,
}

fn head_check(qv: &Tensor, qh: &Tensor, p: &HeadWeights) -> Result<usize> {
    qv.expect_shape("heads", &[None, None])?;
    let c = qv.dim(1);
    qh.expect_shape("heads", &[None, Some(c)])?;
    p.depth_weight.expect_shape("heads", &[Some(c)])?;
    p.height_weight.expect_shape("heads", &[Some(c)])?;
    p.depth_bias.expect_shape("heads", &[Some(1)])?;
    p.height_bias.expect_shape("heads", &[Some(1)])?;
    Ok(c)
}

fn head_preacts(qv: &Tensor, qh: &Tensor, p: &HeadWeights) -> Result<(Vec<f64>, Tensor, f64)> {
    let c = head_check(qv, qh, p)?;
    let wd = p.depth_weight.data();
    let zd: Vec<f64> = qv
        .data()
        .chunks(c)
        .map(|row| p.depth_bias.data()[0] + row.iter().zip(wd).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let mean = ops::mean_axis(qh, 0)?;
    let zh = p.height_bias.data()[0] + mean.dot(p.height_weight)?;
    Ok((zd, mean, zh))
}

/// Per-column depth from the wall sequence, one height from the mean of the
/// floor/ceiling sequence; both softplus-activated.
pub fn heads(qv: &Tensor, qh: &Tensor, p: &HeadWeights) -> Result<HeadOutput> {
    let (zd, _, zh) = head_preacts(qv, qh, p)?;
    Ok(HeadOutput {
        depth: Tensor::from_vec(zd.into_iter().map(ops::softplus_scalar).collect()),
        height: ops::softplus_scalar(zh),
    })
}

pub fn heads_backward(
    qv: &Tensor,
    qh: &Tensor,
    p: &HeadWeights,
    d_depth: &Tensor,
    d_height: f64,
) -> Result<HeadGrads> {
    let (zd, mean, zh) = head_preacts(qv, qh, p)?;
    let (w, c) = (qv.dim(0), qv.dim(1));
    d_depth.expect_shape("heads_backward", &[Some(w)])?;
    let gz: Vec<f64> = zd
        .iter()
        .zip(d_depth.data())
        .map(|(z, g)| g * ops::sigmoid_scalar(*z))
        .collect();
    let wd = p.depth_weight.data();
    let mut dqv = vec![0.0; w * c];
    let mut dwd = vec![0.0; c];
    for (j, g) in gz.iter().enumerate() {
        for ch in 0..c {
            dqv[j * c + ch] = g * wd[ch];
            dwd[ch] += g * qv.data()[j * c + ch];
        }
    }
    let gh = d_height * ops::sigmoid_scalar(zh);
    let dmean = p.height_weight.scale(gh);
    Ok(HeadGrads {
        vertical: Tensor::new(vec![w, c], dqv)?,
        horizontal: ops::mean_axis_backward(qh.shape(), 0, &dmean)?,
        depth_weight: Tensor::from_vec(dwd),
        depth_bias: Tensor::from_vec(vec![gz.iter().sum()]),
        height_weight: mean.scale(gh),
        height_bias: Tensor::from_vec(vec![gh]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_orthogonal_channels() {
        let q = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = channel_graph(&q).unwrap();
        assert_eq!(g.adjacency.data(), &[0.0, 1.0, 1.0, 0.0]);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = channel_graph_attend(&q, &eye).unwrap();
        // channel 0 becomes c1 - c2, channel 1 becomes c2 - c1
        assert_eq!(out.data(), &[1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn zero_channel_gets_uniform_row() {
        let q = Tensor::new(vec![2, 3], vec![1.0, 0.0, 2.0, 1.0, 0.0, 3.0]).unwrap();
        let g = channel_graph(&q).unwrap();
        assert!((g.adjacency.at(&[1, 0]) - 0.5).abs() < 1e-15);
        assert!((g.adjacency.at(&[1, 2]) - 0.5).abs() < 1e-15);
        assert!(channel_graph(&Tensor::zeros(&[4, 1])).is_err());
    }

    #[test]
    fn single_token_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let ws: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4, 4], 0.5, &mut rng)).collect();
        let bs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4], 0.5, &mut rng)).collect();
        let p = AttentionWeights {
            wq: &ws[0],
            bq: &bs[0],
            wk: &ws[1],
            bk: &bs[1],
            wv: &ws[2],
            bv: &bs[2],
        };
        let out = self_attend(&x, &p).unwrap();
        let v = linear(&x, &ws[2], &bs[2]).unwrap();
        assert!(out.max_abs_diff(&ops::add(&x, &v).unwrap()) < 1e-14);
    }

    #[test]
    fn cross_attention_rejects_mismatch() {
        let z = Tensor::zeros(&[4, 4]);
        let b = Tensor::zeros(&[4]);
        let p = AttentionWeights {
            wq: &z,
            bq: &b,
            wk: &z,
            bk: &b,
            wv: &z,
            bv: &b,
        };
        assert!(cross_attend(&Tensor::zeros(&[3, 4]), &Tensor::zeros(&[5, 4]), &p).is_err());
    }

    #[test]
    fn unit_heads_at_softplus_inverse_bias() {
        let b = Tensor::from_vec(vec![(std::f64::consts::E - 1.0).ln()]);
        let w = Tensor::zeros(&[3]);
        let p = HeadWeights {
            depth_weight: &w,
            depth_bias: &b,
            height_weight: &w,
            height_bias: &b,
        };
        let out = heads(&Tensor::zeros(&[5, 3]), &Tensor::zeros(&[5, 3]), &p).unwrap();
        assert!(out.depth.data().iter().all(|d| (d - 1.0).abs() < 1e-15));
        assert!((out.height - 1.0).abs() < 1e-15);
    }
}
