//! Synthetic Manhattan rooms: seeded floor-plan generation, flat-shaded
//! panorama rendering, and the on-disk dataset layout.
//!
//! Each room `k` in a dataset directory is stored as
//!
//! ```text
//! room_KKK.json        layout
//! room_KKK.png         rendered panorama
//! room_KKK_depth.json  ground-truth horizon depth (prediction schema)
//! room_KKK_mask.png    ceiling/floor mask, white on horizontal planes
//! ```

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layout::{
    ceiling_latitude, floor_latitude, raycast_depth, rasterize_plane_mask, HorizonDepth, Layout, Prediction,
    DEFAULT_CAMERA_HEIGHT_M,
};
use crate::numerics::Tensor;
use crate::polygon::{cross, Point};
use crate::sphere::EquirectGrid;

/// Minimum distance from the camera to every wall line, in metres.
const WALL_CLEARANCE_M: f64 = 0.4;
/// Minimum notch side and leftover wall length, in metres.
const MIN_SEGMENT_M: f64 = 0.4;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_rooms: usize,
    /// Inclusive range of corner counts; only even counts are drawn.
    pub corner_range: (usize, usize),
    pub extent_range_m: (f64, f64),
    pub height_range_m: (f64, f64),
    pub camera_height_m: f64,
    pub resolution: EquirectGrid,
}

impl SceneSpec {
    pub fn new(seed: u64, n_rooms: usize, corners: usize, resolution: EquirectGrid) -> SceneSpec {
        SceneSpec {
            seed,
            n_rooms,
            corner_range: (corners, corners),
            extent_range_m: (3.0, 7.0),
            height_range_m: (2.6, 3.4),
            camera_height_m: DEFAULT_CAMERA_HEIGHT_M,
            resolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.corner_range;
        if lo < 4 || hi > 12 || lo > hi || (lo..=hi).all(|k| k % 2 == 1) {
            return Err(Error::arg(
                "SceneSpec",
                format!("corner range {lo}..={hi} must contain an even count in 4..=12"),
            ));
        }
        let (e0, e1) = self.extent_range_m;
        if !(e0 >= 2.0 && e1 >= e0) {
            return Err(Error::arg("SceneSpec", "extent range must start at 2 m or more"));
        }
        let (h0, h1) = self.height_range_m;
        if !(h0 > self.camera_height_m + 0.2 && h1 >= h0) {
            return Err(Error::arg("SceneSpec", "rooms must be taller than the camera"));
        }
        Ok(())
    }
}

/// Whether every wall faces the camera with at least `WALL_CLEARANCE_M` of
/// clearance, so no wall hides behind another.
fn fully_visible(poly: &[Point]) -> bool {
    let n = poly.len();
    (0..n).all(|i| {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        cross(a, b) > WALL_CLEARANCE_M * len
    })
}

fn notch(poly: &[Point], rng: &mut ChaCha8Rng) -> Option<Vec<Point>> {
    let n = poly.len();
    let convex: Vec<usize> = (0..n)
        .filter(|&i| {
            let (p, v, q) = (poly[(i + n - 1) % n], poly[i], poly[(i + 1) % n]);
            cross([v[0] - p[0], v[1] - p[1]], [q[0] - v[0], q[1] - v[1]]) > 0.0
        })
        .collect();
    let i = convex[rng.random_range(0..convex.len())];
    let (p, v, q) = (poly[(i + n - 1) % n], poly[i], poly[(i + 1) % n]);
    let lp = (p[0] - v[0]).hypot(p[1] - v[1]);
    let lq = (q[0] - v[0]).hypot(q[1] - v[1]);
    if lp < 2.0 * MIN_SEGMENT_M + 0.1 || lq < 2.0 * MIN_SEGMENT_M + 0.1 {
        return None;
    }
    let a = rng.random_range(MIN_SEGMENT_M..lp - MIN_SEGMENT_M);
    let b = rng.random_range(MIN_SEGMENT_M..lq - MIN_SEGMENT_M);
    let up = [(p[0] - v[0]) / lp, (p[1] - v[1]) / lp];
    let uq = [(q[0] - v[0]) / lq, (q[1] - v[1]) / lq];
    let q1 = [v[0] + a * up[0], v[1] + a * up[1]];
    let q2 = [q1[0] + b * uq[0], q1[1] + b * uq[1]];
    let q3 = [v[0] + b * uq[0], v[1] + b * uq[1]];
    let mut out = poly.to_vec();
    out.splice(i..=i, [q1, q2, q3]);
    Some(out)
}

/// One room with `corners` axis-aligned walls, fully visible from the
/// camera at the origin.
pub fn generate_layout(
    rng: &mut ChaCha8Rng,
    corners: usize,
    extent_range_m: (f64, f64),
    height_range_m: (f64, f64),
    camera_height_m: f64,
) -> Result<Layout> {
    if corners < 4 || corners % 2 == 1 {
        return Err(Error::arg("generate_layout", format!("{corners} corners is not an even count ≥ 4")));
    }
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
    'attempt: for _ in 0..MAX_ATTEMPTS {
        let (wx, wz) = (draw(rng, extent_range_m), draw(rng, extent_range_m));
        let x0 = -wx * rng.random_range(0.3..0.7);
        let z0 = -wz * rng.random_range(0.3..0.7);
        let mut poly = vec![[x0, z0], [x0 + wx, z0], [x0 + wx, z0 + wz], [x0, z0 + wz]];
        for _ in 0..(corners - 4) / 2 {
            match notch(&poly, rng) {
                Some(p) => poly = p,
                None => continue 'attempt,
            }
        }
        if !fully_visible(&poly) {
            continue;
        }
        let height = draw(rng, height_range_m);
        if let Ok(layout) = Layout::new(poly, height, camera_height_m) {
            return Ok(layout);
        }
    }
    Err(Error::arg(
        "generate_layout",
        format!("no visible {corners}-corner room found in {MAX_ATTEMPTS} attempts"),
    ))
}

/// Seeded rooms for a spec.
pub fn generate_layouts(spec: &SceneSpec) -> Result<Vec<Layout>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let evens: Vec<usize> = (spec.corner_range.0..=spec.corner_range.1).filter(|k| k % 2 == 0).collect();
    (0..spec.n_rooms)
        .map(|_| {
            let corners = evens[rng.random_range(0..evens.len())];
            generate_layout(&mut rng, corners, spec.extent_range_m, spec.height_range_m, spec.camera_height_m)
        })
        .collect()
}

const CEILING_RGB: [f64; 3] = [0.95, 0.88, 0.72];
const FLOOR_RGB: [f64; 3] = [0.80, 0.55, 0.30];
const WALL_X_RGB: [f64; 3] = [0.35, 0.70, 0.70];
const WALL_Z_RGB: [f64; 3] = [0.45, 0.60, 0.85];
const EDGE_RGB: [f64; 3] = [0.08, 0.08, 0.08];

/// Index of the wall hit by the ray at longitude `u`.
fn hit_wall(poly: &[Point], u: f64) -> Option<(usize, f64)> {
    let dir = [u.sin(), u.cos()];
    let n = poly.len();
    let mut best: Option<(usize, f64)> = None;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let e = [b[0] - a[0], b[1] - a[1]];
        let denom = cross(dir, e);
        if denom.abs() < 1e-300 {
            continue;
        }
        let t = cross(a, e) / denom;
        let s = cross(a, dir) / denom;
        if t > 0.0 && (-1e-12..=1.0 + 1e-12).contains(&s) && best.is_none_or(|(_, bt)| t < bt) {
            best = Some((i, t));
        }
    }
    best
}

/// Flat-shaded panorama `[3, H, W]` with values in `[0, 1]`. Walls are lit by
/// a point light at the camera and coloured by orientation; ceiling-wall,
/// floor-wall and wall-wall junctions are drawn dark.
pub fn render_panorama(layout: &Layout, grid: EquirectGrid) -> Result<Tensor> {
    let (h, w) = (grid.height(), grid.width());
    let poly = layout.floor_polygon();
    let (room_h, cam) = (layout.room_height_m(), layout.camera_height_m());
    let cols: Vec<(usize, f64)> = grid
        .longitudes()
        .into_iter()
        .map(|u| hit_wall(poly, u).ok_or_else(|| Error::InvalidLayout(format!("ray at longitude {u} escapes"))))
        .collect::<Result<_>>()?;
    let mut img = Tensor::zeros(&[3, h, w]);
    for j in 0..w {
        let (wall, d) = cols[j];
        let u = grid.column_longitude(j as f64);
        let corner = cols[(j + 1) % w].0 != wall || cols[(j + w - 1) % w].0 != wall;
        let ceil_row = grid.latitude_row(ceiling_latitude(d, room_h, cam));
        let floor_row = grid.latitude_row(floor_latitude(d, cam));
        let (a, b) = (poly[wall], poly[(wall + 1) % poly.len()]);
        let along_x = (b[0] - a[0]).abs() >= (b[1] - a[1]).abs();
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let normal = [-(b[1] - a[1]) / len, (b[0] - a[0]) / len];
        let facing = (normal[0] * u.sin() + normal[1] * u.cos()).abs();
        for i in 0..h {
            let r = i as f64;
            let lat = grid.row_latitude(r);
            let rgb = if (r - ceil_row).abs() < 1.0 || (r - floor_row).abs() < 1.0 {
                EDGE_RGB
            } else if r < ceil_row {
                CEILING_RGB
            } else if r > floor_row {
                FLOOR_RGB
            } else if corner {
                EDGE_RGB
            } else {
                let base = if along_x { WALL_Z_RGB } else { WALL_X_RGB };
                let shade = 0.35 + 0.65 * facing * lat.cos();
                base.map(|c| c * shade)
            };
            for (ch, v) in rgb.iter().enumerate() {
                img.set(&[ch, i, j], *v);
            }
        }
    }
    Ok(img)
}

pub fn tensor_to_rgb(img: &Tensor) -> Result<RgbImage> {
    img.expect_shape("tensor_to_rgb", &[Some(3), None, None])?;
    let (h, w) = (img.dim(1), img.dim(2));
    let d = img.data();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let idx = y as usize * w + x as usize;
        Rgb([q(d[idx]), q(d[h * w + idx]), q(d[2 * h * w + idx])])
    }))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            t.data_mut()[(ch * h + y as usize) * w + x as usize] = px.0[ch] as f64 / 255.0;
        }
    }
    t
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        source: e,
    })
}

/// Loads an RGB image as `[3, H, W]` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

/// Paths of one stored room.
#[derive(Debug, Clone)]
pub struct RoomFiles {
    pub layout: PathBuf,
    pub image: PathBuf,
    pub depth: PathBuf,
    pub mask: PathBuf,
}

impl RoomFiles {
    pub fn new(dir: &Path, index: usize) -> RoomFiles {
        let stem = format!("room_{index:03}");
        RoomFiles {
            layout: dir.join(format!("{stem}.json")),
            image: dir.join(format!("{stem}.png")),
            depth: dir.join(format!("{stem}_depth.json")),
            mask: dir.join(format!("{stem}_mask.png")),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes every artifact of one room.
pub fn write_room(layout: &Layout, grid: EquirectGrid, files: &RoomFiles) -> Result<()> {
    write_text(&files.layout, &layout.to_json())?;
    save_png(&tensor_to_rgb(&render_panorama(layout, grid)?)?, &files.image)?;
    let depth = raycast_depth(layout, grid.width())?;
    write_text(&files.depth, &Prediction::from(depth).to_json())?;
    let mask = rasterize_plane_mask(layout, grid)?;
    let (h, w) = (mask.height(), mask.width());
    let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask.mask.at(&[y as usize, x as usize]) > 0.5 { 255 } else { 0 }])
    });
    gray.save(&files.mask).map_err(|e| Error::Image {
        path: files.mask.display().to_string(),
        source: e,
    })
}

/// Generates and writes a dataset; returns the layouts.
pub fn gen(spec: &SceneSpec, out_dir: &Path) -> Result<Vec<Layout>> {
    let layouts = generate_layouts(spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    layouts
        .par_iter()
        .enumerate()
        .try_for_each(|(k, layout)| write_room(layout, spec.resolution, &RoomFiles::new(out_dir, k)))?;
    Ok(layouts)
}

/// One stored room read back from disk.
#[derive(Debug, Clone)]
pub struct StoredRoom {
    pub layout: Layout,
    pub image: Tensor,
    pub depth: HorizonDepth,
}

/// Reads all `room_KKK` entries of a dataset directory in index order.
pub fn load_dataset(dir: &Path) -> Result<Vec<StoredRoom>> {
    let mut rooms = Vec::new();
    for k in 0.. {
        let files = RoomFiles::new(dir, k);
        if !files.layout.exists() {
            break;
        }
        rooms.push(StoredRoom {
            layout: Layout::load(&files.layout)?,
            image: load_image(&files.image)?,
            depth: Prediction::load(&files.depth)?.to_horizon_depth()?,
        });
    }
    if rooms.is_empty() {
        return Err(Error::arg("load_dataset", format!("no rooms in {}", dir.display())));
    }
    Ok(rooms)
}
