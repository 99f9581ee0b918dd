//! Equirectangular coordinate algebra, gnomonic tangent-plane sampling
//! stencils, and geometric augmentations.
//!
//! Pixel `(row, col)` has its centre at integer coordinates; longitude of a
//! column is `2π(col + 0.5)/W − π` and latitude of a row is
//! `π/2 − π(row + 0.5)/H`.

use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::numerics::Tensor;
use crate::polygon::{self, Point};
use std::f64::consts::{FRAC_PI_2, PI};

/// Size of a 2:1 equirectangular image or feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EquirectGrid {
    width: usize,
    height: usize,
}

impl EquirectGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width != 2 * height {
            return Err(Error::arg(
                "EquirectGrid",
                format!("need width == 2*height > 0, got {height}x{width}"),
            ));
        }
        Ok(EquirectGrid { width, height })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Row of the horizon (between the two middle rows).
    pub fn horizon_row(&self) -> f64 {
        self.height as f64 / 2.0 - 0.5
    }

    pub fn column_longitude(&self, col: f64) -> f64 {
        2.0 * PI * (col + 0.5) / self.width as f64 - PI
    }

    pub fn row_latitude(&self, row: f64) -> f64 {
        FRAC_PI_2 - PI * (row + 0.5) / self.height as f64
    }

    pub fn longitude_column(&self, lon: f64) -> f64 {
        (lon + PI) * self.width as f64 / (2.0 * PI) - 0.5
    }

    pub fn latitude_row(&self, lat: f64) -> f64 {
        (FRAC_PI_2 - lat) * self.height as f64 / PI - 0.5
    }

    /// Longitudes of all column centres.
    pub fn longitudes(&self) -> Vec<f64> {
        (0..self.width)
            .map(|j| self.column_longitude(j as f64))
            .collect()
    }
}

/// `(lat, lon)` in radians of a continuous pixel coordinate.
pub fn pixel_to_sphere(grid: EquirectGrid, row: f64, col: f64) -> (f64, f64) {
    (grid.row_latitude(row), grid.column_longitude(col))
}

/// Inverse of [`pixel_to_sphere`]; longitudes outside `[-π, π)` map to
/// columns outside the image, which sampling wraps.
pub fn sphere_to_pixel(grid: EquirectGrid, lat: f64, lon: f64) -> (f64, f64) {
    (grid.latitude_row(lat), grid.longitude_column(lon))
}

/// Number of taps in a 3x3 stencil.
pub const TAPS: usize = 9;
/// Index of the stencil centre.
pub const CENTER_TAP: usize = 4;

/// Per-pixel 3x3 sampling stencils built on the tangent plane.
///
/// `base` has shape `[H, W, 9, 2]` holding `(row, col)` pixel coordinates,
/// taps ordered row-major from the north-west corner.
#[derive(Debug, Clone)]
pub struct SamplingGrid {
    grid: EquirectGrid,
    base: Tensor,
}

impl SamplingGrid {
    pub fn new(grid: EquirectGrid) -> Self {
        let step = 2.0 * PI / grid.width() as f64;
        Self::with_step(grid, step).expect("positive default step")
    }

    pub fn with_step(grid: EquirectGrid, angular_step: f64) -> Result<Self> {
        Ok(SamplingGrid {
            grid,
            base: tangent_grid(grid, angular_step)?,
        })
    }

    pub fn grid(&self) -> EquirectGrid {
        self.grid
    }

    pub fn base_coords(&self) -> &Tensor {
        &self.base
    }

    /// Shape of the learnable offset tensor matching this grid.
    pub fn offset_shape(&self) -> [usize; 4] {
        [self.grid.height(), self.grid.width(), TAPS, 2]
    }

    /// `p + Δp` flattened to `[H*W*9, 2]`.
    pub fn coords(&self, offsets: &Tensor) -> Result<Tensor> {
        let want = self.offset_shape();
        offsets.expect_shape("SamplingGrid::coords", &want.map(Some))?;
        let n = want.iter().product::<usize>() / 2;
        let data = self
            .base
            .data()
            .iter()
            .zip(offsets.data())
            .map(|(p, d)| p + d)
            .collect();
        Tensor::new(vec![n, 2], data)
    }
}

/// Inverse gnomonic projection of tangent-plane point `(x, y)` (x east, y
/// north) around `(lat0, lon0)`; returns `(lat, Δlon)`.
fn inverse_gnomonic(lat0: f64, x: f64, y: f64) -> (f64, f64) {
    let rho = x.hypot(y);
    if rho == 0.0 {
        return (lat0, 0.0);
    }
    let c = rho.atan();
    let (sin_c, cos_c) = c.sin_cos();
    let (sin0, cos0) = lat0.sin_cos();
    let lat = (cos_c * sin0 + y * sin_c * cos0 / rho).clamp(-1.0, 1.0).asin();
    let dlon = (x * sin_c).atan2(rho * cos0 * cos_c - y * sin0 * sin_c);
    (lat, dlon)
}

/// Base sampling coordinates `[H, W, 9, 2]`: for every pixel, a 3x3 grid of
/// spacing `tan(angular_step)` on the plane tangent at that pixel's sphere
/// point, mapped back to pixel coordinates.
pub fn tangent_grid(grid: EquirectGrid, angular_step: f64) -> Result<Tensor> {
    if !(angular_step > 0.0) || !angular_step.is_finite() {
        return Err(Error::arg(
            "tangent_grid",
            format!("angular step must be positive, got {angular_step}"),
        ));
    }
    let (h, w) = (grid.height(), grid.width());
    let spacing = angular_step.tan();
    let lat_limit = FRAC_PI_2 - PI / (2.0 * h as f64);
    let px_per_rad_col = w as f64 / (2.0 * PI);
    let px_per_rad_row = h as f64 / PI;
    let mut data = Vec::with_capacity(h * w * TAPS * 2);
    for i in 0..h {
        let lat0 = grid.row_latitude(i as f64).clamp(-lat_limit, lat_limit);
        let mut stencil = [[0.0f64; 2]; TAPS];
        for (k, tap) in stencil.iter_mut().enumerate() {
            if k == CENTER_TAP {
                continue;
            }
            let (r, c) = (k / 3, k % 3);
            let y = (1.0 - r as f64) * spacing;
            let x = (c as f64 - 1.0) * spacing;
            let (lat, dlon) = inverse_gnomonic(lat0, x, y);
            *tap = [(lat0 - lat) * px_per_rad_row, dlon * px_per_rad_col];
        }
        for j in 0..w {
            for tap in &stencil {
                data.push(i as f64 + tap[0]);
                data.push(j as f64 + tap[1]);
            }
        }
    }
    Tensor::new(vec![h, w, TAPS, 2], data)
}

/// Scales floor-plan coordinates `(x, z) -> (kx x, kz z)`.
pub fn pano_stretch(layout: &Layout, kx: f64, kz: f64) -> Result<Layout> {
    if !(kx > 0.0 && kz > 0.0) || !kx.is_finite() || !kz.is_finite() {
        return Err(Error::arg(
            "pano_stretch",
            format!("factors must be positive, got ({kx}, {kz})"),
        ));
    }
    let poly = layout
        .floor_polygon()
        .iter()
        .map(|&[x, z]| [kx * x, kz * z])
        .collect();
    Layout::new(poly, layout.room_height_m(), layout.camera_height_m())
}

/// Applies the floor-plan stretch to a horizon-depth sequence: each column's
/// wall point is stretched and the stretched polar trace is re-cast onto the
/// regular column rays. Where neighbouring samples straddle a corner, the
/// corner is restored by extending the walls on either side, so straight
/// walls sampled at least twice come back exactly.
pub fn stretch_horizon_depth(depth: &[f64], kx: f64, kz: f64) -> Result<Vec<f64>> {
    if !(kx > 0.0 && kz > 0.0) {
        return Err(Error::arg("stretch_horizon_depth", "factors must be positive"));
    }
    let w = depth.len();
    let grid = EquirectGrid::new(w / 2, w)?;
    let lons = grid.longitudes();
    let trace: Vec<Point> = depth
        .iter()
        .zip(&lons)
        .map(|(&d, &u)| [kx * d * u.sin(), kz * d * u.cos()])
        .collect();
    let trace = with_corners(&trace);
    lons.iter()
        .map(|&u| {
            polygon::ray_hit([u.sin(), u.cos()], &trace)
                .ok_or_else(|| Error::arg("stretch_horizon_depth", "ray escaped the trace"))
        })
        .collect()
}

/// Inserts, between samples `j` and `j + 1`, the meeting point of the lines
/// through `(j - 1, j)` and `(j + 1, j + 2)` when it falls inside their wedge.
fn with_corners(trace: &[Point]) -> Vec<Point> {
    let n = trace.len();
    let at = |k: usize| trace[k % n];
    let sub = |a: Point, b: Point| [a[0] - b[0], a[1] - b[1]];
    let norm = |a: Point| a[0].hypot(a[1]);
    let mut out = Vec::with_capacity(n + 16);
    for j in 0..n {
        let (a0, a1, b0, b1) = (at(j + n - 1), at(j), at(j + 1), at(j + 2));
        out.push(a1);
        if n < 4 {
            continue;
        }
        let (da, db) = (sub(a1, a0), sub(b1, b0));
        let denom = polygon::cross(da, db);
        if denom.abs() <= 1e-6 * norm(da) * norm(db) {
            continue;
        }
        let t = polygon::cross(sub(b0, a1), db) / denom;
        let c = [a1[0] + t * da[0], a1[1] + t * da[1]];
        let side = polygon::cross(a1, b0).signum();
        let inside = polygon::cross(a1, c) * side > 0.0 && polygon::cross(c, b0) * side > 0.0;
        if inside && norm(c) < 4.0 * norm(a1).max(norm(b0)) {
            out.push(c);
        }
    }
    out
}

/// Circular column shift: column `j` moves to `j + shift`.
pub fn rotate_panorama(x: &Tensor, shift: i64) -> Result<Tensor> {
    x.expect_shape("rotate_panorama", &[None, None, None])?;
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let s = shift.rem_euclid(w as i64) as usize;
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for row in 0..c * h {
        let src = &d[row * w..(row + 1) * w];
        let dst = &mut out[row * w..(row + 1) * w];
        for j in 0..w {
            dst[(j + s) % w] = src[j];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Column reversal (mirror about the `x = 0` plane).
pub fn flip_panorama(x: &Tensor) -> Result<Tensor> {
    x.expect_shape("flip_panorama", &[None, None, None])?;
    let w = x.dim(2);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for (src, dst) in d.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
        for j in 0..w {
            dst[j] = src[w - 1 - j];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Layout counterpart of [`rotate_panorama`] on an image of `width` columns.
pub fn rotate_layout(layout: &Layout, shift: i64, width: usize) -> Result<Layout> {
    let delta = 2.0 * PI * shift as f64 / width as f64;
    let (s, c) = delta.sin_cos();
    let poly = layout
        .floor_polygon()
        .iter()
        .map(|&[x, z]| [x * c + z * s, z * c - x * s])
        .collect();
    Layout::new(poly, layout.room_height_m(), layout.camera_height_m())
}

/// Layout counterpart of [`flip_panorama`].
pub fn flip_layout(layout: &Layout) -> Result<Layout> {
    let poly = layout
        .floor_polygon()
        .iter()
        .rev()
        .map(|&[x, z]| [-x, z])
        .collect();
    Layout::new(poly, layout.room_height_m(), layout.camera_height_m())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::raycast_depth;

    #[test]
    fn grid_requires_two_to_one() {
        assert!(EquirectGrid::new(4, 8).is_ok());
        assert!(EquirectGrid::new(4, 9).is_err());
        assert!(EquirectGrid::new(0, 0).is_err());
    }

    #[test]
    fn image_centre_is_forward_horizon() {
        let g = EquirectGrid::new(512, 1024).unwrap();
        let (lat, lon) = pixel_to_sphere(g, 255.5, 511.5);
        assert!(lat.abs() < 1e-15 && lon.abs() < 1e-15);
        let (_, lon0) = pixel_to_sphere(g, 255.5, 0.0);
        assert!((lon0 - (-PI + PI / 1024.0)).abs() < 1e-15);
    }

    #[test]
    fn sphere_pixel_round_trip() {
        let g = EquirectGrid::new(16, 32).unwrap();
        for &(r, c) in &[(0.0, 0.0), (3.7, 30.2), (15.0, 31.0), (7.5, 15.5)] {
            let (lat, lon) = pixel_to_sphere(g, r, c);
            let (r2, c2) = sphere_to_pixel(g, lat, lon);
            let (lat2, lon2) = pixel_to_sphere(g, r2, c2);
            assert!((lat - lat2).abs() < 1e-12 && (lon - lon2).abs() < 1e-12);
        }
    }

    #[test]
    fn stencil_centre_is_own_pixel() {
        let g = EquirectGrid::new(8, 16).unwrap();
        let t = tangent_grid(g, 2.0 * PI / 16.0).unwrap();
        for i in 0..8 {
            for j in 0..16 {
                assert_eq!(t.at(&[i, j, CENTER_TAP, 0]), i as f64);
                assert_eq!(t.at(&[i, j, CENTER_TAP, 1]), j as f64);
            }
        }
    }

    #[test]
    fn rejects_non_positive_step() {
        let g = EquirectGrid::new(8, 16).unwrap();
        assert!(tangent_grid(g, 0.0).is_err());
        assert!(tangent_grid(g, -0.1).is_err());
    }

    #[test]
    fn stretch_factors_validated() {
        let l = Layout::cuboid(2.0, 2.0, 3.0, 1.6).unwrap();
        assert!(pano_stretch(&l, 0.0, 1.0).is_err());
        assert!(pano_stretch(&l, 1.0, -1.0).is_err());
        assert_eq!(pano_stretch(&l, 1.0, 1.0).unwrap(), l);
        let s = pano_stretch(&l, 2.0, 1.0).unwrap();
        let xs: Vec<f64> = s.floor_polygon().iter().map(|p| p[0].abs()).collect();
        assert!(xs.iter().all(|&x| x == 4.0));
        assert!(s.floor_polygon().iter().all(|p| p[1].abs() == 2.0));
    }

    #[test]
    fn flip_and_rotate_layout_match_depth_permutations() {
        let l = Layout::new(
            vec![[-1.5, -2.0], [2.5, -2.0], [2.5, 1.0], [1.0, 1.0], [1.0, 3.0], [-1.5, 3.0]],
            2.8,
            1.6,
        )
        .unwrap();
        let w = 64;
        let d = raycast_depth(&l, w).unwrap().depth;
        let flipped = raycast_depth(&flip_layout(&l).unwrap(), w).unwrap().depth;
        for j in 0..w {
            assert!((flipped[j] - d[w - 1 - j]).abs() < 1e-9);
        }
        let rotated = raycast_depth(&rotate_layout(&l, 5, w).unwrap(), w).unwrap().depth;
        for j in 0..w {
            assert!((rotated[(j + 5) % w] - d[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn panorama_permutations() {
        let x = Tensor::from_fn(&[2, 3, 8], |i| i as f64);
        assert_eq!(rotate_panorama(&x, 8).unwrap(), x);
        assert_eq!(flip_panorama(&flip_panorama(&x).unwrap()).unwrap(), x);
        let r = rotate_panorama(&rotate_panorama(&x, 3).unwrap(), -3).unwrap();
        assert_eq!(r, x);
        let r1 = rotate_panorama(&x, 1).unwrap();
        assert_eq!(r1.at(&[0, 0, 1]), x.at(&[0, 0, 0]));
        assert_eq!(r1.at(&[0, 0, 0]), x.at(&[0, 0, 7]));
    }
}
