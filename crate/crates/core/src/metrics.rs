//! Layout evaluation: floor-plan and volumetric IoU, corner and pixel
//! error, and horizon-depth RMSE / δ₁.₂₅.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{ceiling_latitude, floor_latitude, label_map, raycast_depth, Layout};
use crate::polygon::{intersection_area, signed_area};
use crate::sphere::EquirectGrid;

fn areas(a: &Layout, b: &Layout) -> Result<(f64, f64, f64)> {
    let (aa, ab) = (signed_area(a.floor_polygon()), signed_area(b.floor_polygon()));
    if !(aa > 0.0) || !(ab > 0.0) {
        return Err(Error::InvalidLayout("degenerate floor polygon".into()));
    }
    let inter = intersection_area(a.floor_polygon(), b.floor_polygon()).min(aa.min(ab));
    Ok((aa, ab, inter))
}

pub fn iou2d(a: &Layout, b: &Layout) -> Result<f64> {
    let (aa, ab, inter) = areas(a, b)?;
    Ok(inter / (aa + ab - inter))
}

/// IoU of the two floor-aligned prisms.
pub fn iou3d(a: &Layout, b: &Layout) -> Result<f64> {
    let (aa, ab, inter) = areas(a, b)?;
    let (ha, hb) = (a.room_height_m(), b.room_height_m());
    let vi = inter * ha.min(hb);
    Ok(vi / (aa * ha + ab * hb - vi))
}

/// Ceiling corner pixels then floor corner pixels as `(row, col)`, in
/// polygon order.
pub fn projected_corners(layout: &Layout, grid: EquirectGrid) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let (h, c) = (layout.room_height_m(), layout.camera_height_m());
    let mut ceil = Vec::new();
    let mut floor = Vec::new();
    for p in layout.floor_polygon() {
        let d = p[0].hypot(p[1]);
        let col = grid.longitude_column(p[0].atan2(p[1]));
        ceil.push([grid.latitude_row(ceiling_latitude(d, h, c)), col]);
        floor.push([grid.latitude_row(floor_latitude(d, c)), col]);
    }
    (ceil, floor)
}

/// Pixel distance with the column difference wrapped around the seam.
pub fn wrapped_pixel_distance(a: [f64; 2], b: [f64; 2], width: usize) -> f64 {
    let w = width as f64;
    let dc = (a[1] - b[1]).rem_euclid(w);
    (a[0] - b[0]).hypot(dc.min(w - dc))
}

/// Corner error in percent of the image diagonal from already projected
/// corner sets. Corners are matched by the cyclic shift of `b` that
/// minimises total distance.
pub fn corner_error_pixels(
    a: &(Vec<[f64; 2]>, Vec<[f64; 2]>),
    b: &(Vec<[f64; 2]>, Vec<[f64; 2]>),
    grid: EquirectGrid,
) -> Result<f64> {
    let n = a.0.len();
    if n == 0 || b.0.len() != n || a.1.len() != n || b.1.len() != n {
        return Err(Error::arg(
            "corner_error",
            format!("corner counts differ ({} vs {})", a.0.len(), b.0.len()),
        ));
    }
    let w = grid.width();
    let best = (0..n)
        .map(|shift| {
            (0..n)
                .map(|i| {
                    let k = (i + shift) % n;
                    wrapped_pixel_distance(a.0[i], b.0[k], w) + wrapped_pixel_distance(a.1[i], b.1[k], w)
                })
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min);
    let diag = (grid.height() as f64).hypot(w as f64);
    Ok(best / (2 * n) as f64 / diag * 100.0)
}

pub fn corner_error(a: &Layout, b: &Layout, grid: EquirectGrid) -> Result<f64> {
    corner_error_pixels(&projected_corners(a, grid), &projected_corners(b, grid), grid)
}

/// Percentage of positions whose labels differ.
pub fn pixel_error_labels(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("pixel_error", "label maps differ in size"));
    }
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(diff as f64 / a.len() as f64 * 100.0)
}

/// Ceiling / wall / floor labelling disagreement, in percent of pixels.
pub fn pixel_error(a: &Layout, b: &Layout, grid: EquirectGrid) -> Result<f64> {
    pixel_error_labels(&label_map(a, grid)?, &label_map(b, grid)?)
}

/// `(rmse, δ₁.₂₅)`.
pub fn depth_metrics(pred: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("depth_metrics", "depth widths differ"));
    }
    if gt.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::arg("depth_metrics", "ground-truth depth must be positive"));
    }
    let n = pred.len() as f64;
    let mse = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / n;
    let good = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| **p > 0.0 && (*p / *g).max(*g / *p) < 1.25)
        .count();
    Ok((mse.sqrt(), good as f64 / n))
}

/// One evaluation row. IoUs and δ are fractions, CE and PE percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "2DIoU")]
    pub iou2d: f64,
    #[serde(rename = "3DIoU")]
    pub iou3d: f64,
    /// Missing when corner counts differ.
    #[serde(rename = "CE")]
    pub ce_pct: Option<f64>,
    #[serde(rename = "PE")]
    pub pe_pct: f64,
    #[serde(rename = "RMSE")]
    pub rmse: f64,
    #[serde(rename = "delta_1.25")]
    pub delta1: f64,
}

impl MetricReport {
    pub fn evaluate(pred: &Layout, gt: &Layout, grid: EquirectGrid) -> Result<MetricReport> {
        let ce_pct = if pred.floor_polygon().len() == gt.floor_polygon().len() {
            Some(corner_error(pred, gt, grid)?)
        } else {
            None
        };
        let dp = raycast_depth(pred, grid.width())?;
        let dg = raycast_depth(gt, grid.width())?;
        let (rmse, delta1) = depth_metrics(&dp.depth, &dg.depth)?;
        Ok(MetricReport {
            iou2d: iou2d(pred, gt)?,
            iou3d: iou3d(pred, gt)?,
            ce_pct,
            pe_pct: pixel_error(pred, gt, grid)?,
            rmse,
            delta1,
        })
    }

    /// Column means; CE averages only the rows where it is present.
    pub fn mean(rows: &[MetricReport]) -> Option<MetricReport> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let ces: Vec<f64> = rows.iter().filter_map(|r| r.ce_pct).collect();
        Some(MetricReport {
            iou2d: avg(|r| r.iou2d),
            iou3d: avg(|r| r.iou3d),
            ce_pct: (!ces.is_empty()).then(|| ces.iter().sum::<f64>() / ces.len() as f64),
            pe_pct: avg(|r| r.pe_pct),
            rmse: avg(|r| r.rmse),
            delta1: avg(|r| r.delta1),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> EquirectGrid {
        EquirectGrid::new(128, 256).unwrap()
    }

    #[test]
    fn identical_layouts_are_perfect() {
        let a = Layout::cuboid(2.0, 3.0, 3.0, 1.6).unwrap();
        let r = MetricReport::evaluate(&a, &a, grid()).unwrap();
        assert_eq!(r.iou2d, 1.0);
        assert_eq!(r.iou3d, 1.0);
        assert_eq!(r.ce_pct, Some(0.0));
        assert_eq!(r.pe_pct, 0.0);
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.delta1, 1.0);
    }

    #[test]
    fn depth_metric_examples() {
        let gt = [2.0, 3.0, 4.0];
        let (r, d) = depth_metrics(&gt.map(|g| g + 0.1), &gt).unwrap();
        assert!((r - 0.1).abs() < 1e-12);
        assert_eq!(d, 1.0);
        let (_, d) = depth_metrics(&gt.map(|g| g * 1.3), &gt).unwrap();
        assert_eq!(d, 0.0);
        assert!(depth_metrics(&[1.0], &[0.0]).is_err());
        assert!(depth_metrics(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn one_displaced_corner() {
        let g = grid();
        let a = Layout::cuboid(2.0, 3.0, 3.0, 1.6).unwrap();
        let pa = projected_corners(&a, g);
        let mut pb = pa.clone();
        let diag = (g.height() as f64).hypot(g.width() as f64);
        pb.1[2][0] += diag / 100.0;
        let ce = corner_error_pixels(&pa, &pb, g).unwrap();
        assert!((ce - 1.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn cyclic_relabelling_does_not_matter() {
        let g = grid();
        let a = Layout::cuboid(2.0, 3.0, 3.0, 1.6).unwrap();
        let mut poly = a.floor_polygon().to_vec();
        poly.rotate_left(1);
        let b = Layout::new(poly, 3.0, 1.6).unwrap();
        assert!(corner_error(&a, &b, g).unwrap() < 1e-12);
    }

    #[test]
    fn complementary_labels() {
        assert_eq!(pixel_error_labels(&[0, 1, 2, 1], &[1, 0, 1, 2]).unwrap(), 100.0);
    }

    #[test]
    fn report_json_keys() {
        let a = Layout::cuboid(2.0, 3.0, 3.0, 1.6).unwrap();
        let r = MetricReport::evaluate(&a, &a, grid()).unwrap();
        let v: serde_json::Value = serde_json::to_value(r).unwrap();
        for k in ["2DIoU", "3DIoU", "CE", "PE", "RMSE", "delta_1.25"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
}
