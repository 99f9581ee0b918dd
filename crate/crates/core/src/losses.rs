//! Training objective: plane-segmentation BCE plus a four-term L1 layout
//! loss on depth, height, wall normals and depth gradients.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::layout::{depth_normals_gradients, polar_trace, HorizonDepth, PlaneMask};
use crate::numerics::{ops::sigmoid_scalar, Tensor};

/// Weight of the segmentation term.
pub const SEGMENT_WEIGHT: f64 = 0.75;

/// Mean binary cross-entropy of logits against a 0/1 mask, in the stable
/// form `max(x,0) - x g + ln(1 + e^-|x|)`.
pub fn bce_segment(logits: &Tensor, gt: &PlaneMask) -> Result<f64> {
    check_mask(logits, gt)?;
    let n = logits.len() as f64;
    let s: f64 = logits
        .data()
        .iter()
        .zip(gt.mask.data())
        .map(|(&x, &g)| x.max(0.0) - x * g + (-x.abs()).exp().ln_1p())
        .sum();
    Ok(s / n)
}

pub fn bce_segment_backward(logits: &Tensor, gt: &PlaneMask) -> Result<Tensor> {
    check_mask(logits, gt)?;
    let n = logits.len() as f64;
    logits.zip_map(&gt.mask, |x, g| (sigmoid_scalar(x) - g) / n)
}

fn check_mask(logits: &Tensor, gt: &PlaneMask) -> Result<()> {
    if logits.shape() != gt.mask.shape() {
        return Err(Error::shape(
            "bce_segment",
            format!("logits {:?} vs mask {:?}", logits.shape(), gt.mask.shape()),
        ));
    }
    Ok(())
}

/// Circular linear resampling with pixel centres aligned.
pub fn resample_periodic(values: &[f64], width: usize) -> Vec<f64> {
    let n = values.len();
    if n == width {
        return values.to_vec();
    }
    (0..width)
        .map(|j| {
            let src = (j as f64 + 0.5) * n as f64 / width as f64 - 0.5;
            let f = src.floor();
            let t = src - f;
            let i0 = (f as i64).rem_euclid(n as i64) as usize;
            let i1 = (i0 + 1) % n;
            values[i0] * (1.0 - t) + values[i1] * t
        })
        .collect()
}

/// Angle difference wrapped into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

/// The four layout terms, each a mean absolute error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutTerms {
    pub depth: f64,
    pub height: f64,
    pub normal: f64,
    pub gradient: f64,
}

impl LayoutTerms {
    pub fn sum(&self) -> f64 {
        self.depth + self.height + self.normal + self.gradient
    }
}

struct LayoutTargets {
    depth: Vec<f64>,
    normals: Vec<f64>,
    gradients: Vec<f64>,
}

fn targets(width: usize, gt: &HorizonDepth) -> LayoutTargets {
    let depth = resample_periodic(&gt.depth, width);
    let (normals, gradients) = depth_normals_gradients(&depth);
    LayoutTargets {
        depth,
        normals,
        gradients,
    }
}

fn check_pred(depth: &Tensor) -> Result<usize> {
    depth.expect_shape("layout_loss", &[None])?;
    if depth.len() < 3 {
        return Err(Error::arg("layout_loss", "need at least three columns"));
    }
    Ok(depth.len())
}

/// Compares a predicted depth sequence and height with ground truth
/// resampled to the prediction width.
pub fn layout_loss(depth: &Tensor, height: f64, gt: &HorizonDepth) -> Result<LayoutTerms> {
    let w = check_pred(depth)?;
    let t = targets(w, gt);
    let d = depth.data();
    let (normals, gradients) = depth_normals_gradients(d);
    let mean_abs = |it: &mut dyn Iterator<Item = f64>| it.map(f64::abs).sum::<f64>() / w as f64;
    Ok(LayoutTerms {
        depth: mean_abs(&mut d.iter().zip(&t.depth).map(|(a, b)| a - b)),
        height: (height - gt.room_height_m).abs(),
        normal: mean_abs(&mut normals.iter().zip(&t.normals).map(|(a, b)| wrap_angle(a - b))),
        gradient: mean_abs(&mut gradients.iter().zip(&t.gradients).map(|(a, b)| a - b)),
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of `layout_loss(..).sum()` with respect to depth and height.
pub fn layout_loss_backward(depth: &Tensor, height: f64, gt: &HorizonDepth) -> Result<(Tensor, f64)> {
    let w = check_pred(depth)?;
    let t = targets(w, gt);
    let d = depth.data();
    let inv = 1.0 / w as f64;
    let mut g: Vec<f64> = d.iter().zip(&t.depth).map(|(a, b)| sign(a - b) * inv).collect();

    let (normals, gradients) = depth_normals_gradients(d);
    let pts = polar_trace(d);
    for j in 0..w {
        let (prev, next) = ((j + w - 1) % w, (j + 1) % w);

        let s = sign(gradients[j] - t.gradients[j]) * inv * 0.5;
        g[next] += s;
        g[prev] -= s;

        // normal = atan2(a, b) with a = t_z, b = -t_x, t = p_next - p_prev
        let a = pts[next][1] - pts[prev][1];
        let b = -(pts[next][0] - pts[prev][0]);
        let r2 = a * a + b * b;
        let dn = sign(wrap_angle(normals[j] - t.normals[j])) * inv;
        if r2 == 0.0 || dn == 0.0 {
            continue;
        }
        let (da, db) = (dn * b / r2, -dn * a / r2);
        // p_k = d_k (sin u_k, cos u_k)
        let (sn, cn) = ray(next, w);
        let (sp, cp) = ray(prev, w);
        g[next] += da * cn - db * sn;
        g[prev] += -da * cp + db * sp;
    }
    Ok((Tensor::from_vec(g), sign(height - gt.room_height_m)))
}

fn ray(k: usize, w: usize) -> (f64, f64) {
    let u = 2.0 * PI * (k as f64 + 0.5) / w as f64 - PI;
    (u.sin(), u.cos())
}

/// Per-step loss record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub segment: f64,
    pub layout_depth: f64,
    pub layout_height: f64,
    pub layout_normal: f64,
    pub layout_gradient: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn layout(&self) -> f64 {
        self.layout_depth + self.layout_height + self.layout_normal + self.layout_gradient
    }

    /// Component-wise mean, for batches.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        let terms = LayoutTerms {
            depth: avg(|b| b.layout_depth),
            height: avg(|b| b.layout_height),
            normal: avg(|b| b.layout_normal),
            gradient: avg(|b| b.layout_gradient),
        };
        Some(total_loss(avg(|b| b.segment), &terms))
    }
}

pub fn total_loss(segment: f64, terms: &LayoutTerms) -> LossBreakdown {
    LossBreakdown {
        total: SEGMENT_WEIGHT * segment + terms.sum(),
        segment,
        layout_depth: terms.depth,
        layout_height: terms.height,
        layout_normal: terms.normal,
        layout_gradient: terms.gradient,
        lambda: SEGMENT_WEIGHT,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[f64], h: usize, w: usize) -> PlaneMask {
        PlaneMask {
            mask: Tensor::new(vec![h, w], bits.to_vec()).unwrap(),
        }
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let m = mask(&[1.0, 0.0, 0.0, 1.0, 1.0, 0.0], 2, 3);
        let v = bce_segment(&Tensor::zeros(&[2, 3]), &m).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bce_saturated_correct_is_tiny() {
        let bits = [1.0, 0.0, 0.0, 1.0];
        let m = mask(&bits, 2, 2);
        let logits = Tensor::new(vec![2, 2], bits.iter().map(|b| if *b > 0.5 { 20.0 } else { -20.0 }).collect()).unwrap();
        assert!(bce_segment(&logits, &m).unwrap() < 1e-8);
        assert!(bce_segment(&Tensor::zeros(&[3, 2]), &m).is_err());
    }

    #[test]
    fn layout_terms_vanish_on_truth() {
        let gt = HorizonDepth::new((0..32).map(|j| 2.0 + (j as f64 * 0.4).sin()).collect(), 2.8).unwrap();
        let t = layout_loss(&Tensor::from_vec(gt.depth.clone()), 2.8, &gt).unwrap();
        assert_eq!(t.sum(), 0.0);
    }

    #[test]
    fn constant_offset_only_hits_depth() {
        let gt = HorizonDepth::new((0..32).map(|j| 2.0 + (j as f64 * 0.4).sin()).collect(), 2.8).unwrap();
        let shifted = Tensor::from_vec(gt.depth.iter().map(|d| d + 0.1).collect());
        let t = layout_loss(&shifted, 2.8, &gt).unwrap();
        assert!((t.depth - 0.1).abs() < 1e-12);
        assert!(t.gradient < 1e-12);
        assert_eq!(t.height, 0.0);
    }

    #[test]
    fn resampling_preserves_constants_and_identity() {
        let v = vec![3.0; 64];
        assert!(resample_periodic(&v, 16).iter().all(|x| (x - 3.0).abs() < 1e-15));
        let r: Vec<f64> = (0..8).map(|i| i as f64).collect();
        assert_eq!(resample_periodic(&r, 8), r);
    }

    #[test]
    fn total_weights_segment() {
        let terms = LayoutTerms {
            depth: 0.25,
            height: 0.25,
            normal: 0.25,
            gradient: 0.25,
        };
        let b = total_loss(2f64.ln(), &terms);
        assert!((b.total - 1.5199).abs() < 1e-4);
        let zero = LayoutTerms {
            depth: 0.0,
            height: 0.0,
            normal: 0.0,
            gradient: 0.0,
        };
        assert_eq!(total_loss(0.0, &terms).total, 1.0);
        assert_eq!(total_loss(0.0, &zero).total, 0.0);
    }

    #[test]
    fn angle_wrapping() {
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(0.3) - 0.3).abs() < 1e-15);
    }
}
