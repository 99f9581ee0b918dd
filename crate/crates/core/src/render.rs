//! Boundary overlays on the panorama with a top-down floor plan beside it.

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::layout::{depth_to_boundaries, polar_trace, raycast_depth, Layout};
use crate::polygon::Point;
use crate::scene::{render_panorama, tensor_to_rgb};
use crate::sphere::EquirectGrid;

pub const GT_COLOR: Rgb<u8> = Rgb([0, 64, 255]);
pub const PRED_COLOR: Rgb<u8> = Rgb([0, 220, 0]);
const PLAN_BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const CAMERA_COLOR: Rgb<u8> = Rgb([200, 0, 0]);

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], c: Rgb<u8>) {
    let n = (b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil().max(1.0) as usize;
    for k in 0..=n {
        let t = k as f64 / n as f64;
        let x = a[0] + t * (b[0] - a[0]);
        let y = a[1] + t * (b[1] - a[1]);
        put(img, x.round() as i64, y.round() as i64, c);
    }
}

/// Draws the ceiling and floor boundary of `layout`, joining neighbouring
/// columns so steep segments stay connected (but not across the seam).
fn draw_boundaries(img: &mut RgbImage, layout: &Layout, grid: EquirectGrid, c: Rgb<u8>) -> Result<()> {
    let hd = raycast_depth(layout, grid.width())?;
    let bp = depth_to_boundaries(&hd, layout.camera_height_m(), grid);
    for rows in [&bp.ceiling_rows, &bp.floor_rows] {
        for j in 0..grid.width() {
            let here = [j as f64, rows[j]];
            match rows.get(j + 1) {
                Some(&next) => line(img, here, [(j + 1) as f64, next], c),
                None => line(img, here, here, c),
            }
        }
    }
    Ok(())
}

/// Maps floor-plan metres into a square panel at `x0`, camera at the centre.
struct PlanView {
    x0: f64,
    size: f64,
    scale: f64,
}

impl PlanView {
    fn fit(x0: u32, size: u32, polys: &[&[Point]]) -> PlanView {
        let reach = polys
            .iter()
            .flat_map(|p| p.iter())
            .map(|q| q[0].abs().max(q[1].abs()))
            .fold(1e-6, f64::max);
        let size = size as f64;
        PlanView {
            x0: x0 as f64,
            size,
            scale: 0.45 * size / reach,
        }
    }

    /// `+x` to the right, `+z` up.
    fn px(&self, p: Point) -> [f64; 2] {
        [self.x0 + self.size / 2.0 + p[0] * self.scale, self.size / 2.0 - p[1] * self.scale]
    }

    fn polygon(&self, img: &mut RgbImage, poly: &[Point], c: Rgb<u8>) {
        for (k, &p) in poly.iter().enumerate() {
            let q = poly[(k + 1) % poly.len()];
            line(img, self.px(p), self.px(q), c);
        }
    }
}

/// The ground-truth panorama with boundaries drawn in blue (ground truth)
/// and green (prediction), and a floor plan of both on the right.
pub fn render_overlay(gt: &Layout, pred: Option<&Layout>, grid: EquirectGrid) -> Result<RgbImage> {
    let (w, h) = (grid.width() as u32, grid.height() as u32);
    let pano = tensor_to_rgb(&render_panorama(gt, grid)?)?;
    let mut img = RgbImage::from_pixel(w + h, h, PLAN_BACKGROUND);
    for (x, y, px) in pano.enumerate_pixels() {
        img.put_pixel(x, y, *px);
    }
    draw_boundaries(&mut img, gt, grid, GT_COLOR)?;
    if let Some(p) = pred {
        draw_boundaries(&mut img, p, grid, PRED_COLOR)?;
    }

    let mut polys: Vec<&[Point]> = vec![gt.floor_polygon()];
    if let Some(p) = pred {
        polys.push(p.floor_polygon());
    }
    let view = PlanView::fit(w, h, &polys);
    view.polygon(&mut img, gt.floor_polygon(), GT_COLOR);
    if let Some(p) = pred {
        // The prediction's own polar trace, so unregularised shapes show as is.
        let trace = polar_trace(&raycast_depth(p, grid.width())?.depth);
        view.polygon(&mut img, &trace, PRED_COLOR);
    }
    let c = view.px([0.0, 0.0]);
    for d in -2..=2 {
        put(&mut img, c[0] as i64 + d, c[1] as i64, CAMERA_COLOR);
        put(&mut img, c[0] as i64, c[1] as i64 + d, CAMERA_COLOR);
    }
    Ok(img)
}
