//! Manhattan room layouts and their conversions to horizon depth, boundary
//! rows, plane masks and floor-plan traces.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::polygon::{self, Containment, Point};
use crate::sphere::EquirectGrid;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_CAMERA_HEIGHT_M: f64 = 1.6;

/// Metric room: CCW floor polygon around the camera at the origin, plus room
/// and camera heights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayoutJson", into = "LayoutJson")]
pub struct Layout {
    floor_polygon: Vec<Point>,
    room_height_m: f64,
    camera_height_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutJson {
    floor_polygon: Vec<Point>,
    room_height_m: f64,
    camera_height_m: f64,
}

impl TryFrom<LayoutJson> for Layout {
    type Error = Error;
    fn try_from(j: LayoutJson) -> Result<Layout> {
        Layout::new(j.floor_polygon, j.room_height_m, j.camera_height_m)
    }
}

impl From<Layout> for LayoutJson {
    fn from(l: Layout) -> LayoutJson {
        LayoutJson {
            floor_polygon: l.floor_polygon,
            room_height_m: l.room_height_m,
            camera_height_m: l.camera_height_m,
        }
    }
}

impl Layout {
    pub fn new(floor_polygon: Vec<Point>, room_height_m: f64, camera_height_m: f64) -> Result<Layout> {
        if floor_polygon.len() < 4 {
            return Err(Error::InvalidLayout(format!(
                "floor_polygon needs at least 4 vertices, got {}",
                floor_polygon.len()
            )));
        }
        if floor_polygon.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidLayout("floor_polygon has non-finite coordinates".into()));
        }
        if !(camera_height_m > 0.0 && camera_height_m < room_height_m) || !room_height_m.is_finite() {
            return Err(Error::InvalidLayout(format!(
                "need 0 < camera_height_m ({camera_height_m}) < room_height_m ({room_height_m})"
            )));
        }
        if polygon::signed_area(&floor_polygon) <= 0.0 {
            return Err(Error::InvalidLayout("floor_polygon must be counter-clockwise".into()));
        }
        if !polygon::is_simple(&floor_polygon) {
            return Err(Error::InvalidLayout("floor_polygon is not simple".into()));
        }
        if polygon::classify_point([0.0, 0.0], &floor_polygon) != Containment::Inside {
            return Err(Error::InvalidLayout(
                "camera (0,0) must lie strictly inside floor_polygon".into(),
            ));
        }
        Ok(Layout {
            floor_polygon,
            room_height_m,
            camera_height_m,
        })
    }

    /// Axis-aligned box `x ∈ [-half_x, half_x]`, `z ∈ [-half_z, half_z]`.
    pub fn cuboid(half_x: f64, half_z: f64, room_height_m: f64, camera_height_m: f64) -> Result<Layout> {
        Self::new(
            vec![
                [-half_x, -half_z],
                [half_x, -half_z],
                [half_x, half_z],
                [-half_x, half_z],
            ],
            room_height_m,
            camera_height_m,
        )
    }

    pub fn floor_polygon(&self) -> &[Point] {
        &self.floor_polygon
    }

    pub fn room_height_m(&self) -> f64 {
        self.room_height_m
    }

    pub fn camera_height_m(&self) -> f64 {
        self.camera_height_m
    }

    pub fn floor_area(&self) -> f64 {
        polygon::signed_area(&self.floor_polygon)
    }

    /// True when every wall is parallel to an axis.
    pub fn is_manhattan(&self) -> bool {
        let n = self.floor_polygon.len();
        (0..n).all(|i| {
            let (a, b) = (self.floor_polygon[i], self.floor_polygon[(i + 1) % n]);
            (a[0] - b[0]).abs() <= polygon::WELD_TOL || (a[1] - b[1]).abs() <= polygon::WELD_TOL
        })
    }

    pub fn from_json(text: &str) -> Result<Layout> {
        parse_json(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("layout serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Layout> {
        load_json(path)
    }
}

/// Per-column horizontal distance from the camera axis to the wall, plus
/// room height. Serialises with the same schema as [`Prediction`].
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonDepth {
    pub depth: Vec<f64>,
    pub room_height_m: f64,
}

impl HorizonDepth {
    pub fn new(depth: Vec<f64>, room_height_m: f64) -> Result<Self> {
        if depth.is_empty() || depth.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::arg("HorizonDepth", "depths must be positive and finite"));
        }
        if !(room_height_m > 0.0) || !room_height_m.is_finite() {
            return Err(Error::arg("HorizonDepth", "room height must be positive"));
        }
        Ok(HorizonDepth { depth, room_height_m })
    }

    pub fn width(&self) -> usize {
        self.depth.len()
    }
}

/// Network output: one depth per column and a scalar room height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub horizon_depth: Vec<f64>,
    pub room_height_m: f64,
}

impl Prediction {
    pub fn from_json(text: &str) -> Result<Prediction> {
        let p: Prediction = parse_json(text)?;
        HorizonDepth::new(p.horizon_depth.clone(), p.room_height_m).map_err(|e| Error::Schema {
            path: "horizon_depth".into(),
            detail: e.to_string(),
        })?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("prediction serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Prediction> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| with_file(path, e))
    }

    pub fn to_horizon_depth(&self) -> Result<HorizonDepth> {
        HorizonDepth::new(self.horizon_depth.clone(), self.room_height_m)
    }
}

impl From<HorizonDepth> for Prediction {
    fn from(hd: HorizonDepth) -> Self {
        Prediction {
            horizon_depth: hd.depth,
            room_height_m: hd.room_height_m,
        }
    }
}

fn with_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Schema { path: field, detail } => Error::Schema {
            path: format!("{}: {}", path.display(), field),
            detail,
        },
        other => Error::Schema {
            path: path.display().to_string(),
            detail: other.to_string(),
        },
    }
}

pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Schema {
            path: if path == "." { "<root>".into() } else { path },
            detail: e.into_inner().to_string(),
        }
    })
}

pub(crate) fn load_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text).map_err(|e| with_file(path, e))
}

/// Continuous ceiling and floor boundary rows per column.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPair {
    pub ceiling_rows: Vec<f64>,
    pub floor_rows: Vec<f64>,
}

/// `[H, W]` mask, 1 on ceiling/floor pixels and 0 on walls.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneMask {
    pub mask: Tensor,
}

impl PlaneMask {
    pub fn height(&self) -> usize {
        self.mask.dim(0)
    }

    pub fn width(&self) -> usize {
        self.mask.dim(1)
    }
}

/// First wall hit along every column ray.
pub fn raycast_depth(layout: &Layout, width: usize) -> Result<HorizonDepth> {
    let grid = EquirectGrid::new(width / 2, width)?;
    let depth = grid
        .longitudes()
        .into_iter()
        .map(|u| {
            polygon::ray_hit([u.sin(), u.cos()], layout.floor_polygon())
                .ok_or_else(|| Error::InvalidLayout(format!("ray at longitude {u} leaves the room")))
        })
        .collect::<Result<Vec<_>>>()?;
    HorizonDepth::new(depth, layout.room_height_m())
}

pub fn floor_latitude(depth: f64, camera_height_m: f64) -> f64 {
    -(camera_height_m / depth).atan()
}

pub fn ceiling_latitude(depth: f64, room_height_m: f64, camera_height_m: f64) -> f64 {
    ((room_height_m - camera_height_m) / depth).atan()
}

pub fn depth_to_boundaries(hd: &HorizonDepth, camera_height_m: f64, grid: EquirectGrid) -> BoundaryPair {
    let mut ceiling_rows = Vec::with_capacity(hd.width());
    let mut floor_rows = Vec::with_capacity(hd.width());
    for &d in &hd.depth {
        ceiling_rows.push(grid.latitude_row(ceiling_latitude(d, hd.room_height_m, camera_height_m)));
        floor_rows.push(grid.latitude_row(floor_latitude(d, camera_height_m)));
    }
    BoundaryPair {
        ceiling_rows,
        floor_rows,
    }
}

/// Inverse of [`depth_to_boundaries`]. Room height is the uniform mean of the
/// per-column estimates `c (1 + tan v_c / tan(-v_f))`.
pub fn boundaries_to_depth(bp: &BoundaryPair, camera_height_m: f64, grid: EquirectGrid) -> Result<HorizonDepth> {
    if bp.ceiling_rows.len() != bp.floor_rows.len() || bp.floor_rows.is_empty() {
        return Err(Error::shape("boundaries_to_depth", "ceiling and floor widths differ"));
    }
    let n = bp.floor_rows.len();
    let mut depth = Vec::with_capacity(n);
    let mut height_sum = 0.0;
    for (j, (&rc, &rf)) in bp.ceiling_rows.iter().zip(&bp.floor_rows).enumerate() {
        let vf = grid.row_latitude(rf);
        let vc = grid.row_latitude(rc);
        if !(vf < 0.0) || !(vc > 0.0) {
            return Err(Error::arg(
                "boundaries_to_depth",
                format!("column {j}: boundary on the wrong side of the horizon"),
            ));
        }
        let tf = (-vf).tan();
        depth.push(camera_height_m / tf);
        height_sum += camera_height_m * (1.0 + vc.tan() / tf);
    }
    HorizonDepth::new(depth, height_sum / n as f64)
}

/// Rows strictly above the ceiling boundary or below the floor boundary.
pub fn rasterize_plane_mask(layout: &Layout, grid: EquirectGrid) -> Result<PlaneMask> {
    let hd = raycast_depth(layout, grid.width())?;
    let bp = depth_to_boundaries(&hd, layout.camera_height_m(), grid);
    let (h, w) = (grid.height(), grid.width());
    let mut mask = Tensor::zeros(&[h, w]);
    for j in 0..w {
        for i in 0..h {
            let r = i as f64;
            if r < bp.ceiling_rows[j] || r > bp.floor_rows[j] {
                mask.set(&[i, j], 1.0);
            }
        }
    }
    Ok(PlaneMask { mask })
}

/// Per-pixel semantic labels, row-major.
pub const LABEL_CEILING: u8 = 0;
pub const LABEL_WALL: u8 = 1;
pub const LABEL_FLOOR: u8 = 2;

pub fn label_map(layout: &Layout, grid: EquirectGrid) -> Result<Vec<u8>> {
    let hd = raycast_depth(layout, grid.width())?;
    let bp = depth_to_boundaries(&hd, layout.camera_height_m(), grid);
    let (h, w) = (grid.height(), grid.width());
    let mut labels = vec![LABEL_WALL; h * w];
    for i in 0..h {
        for j in 0..w {
            let r = i as f64;
            labels[i * w + j] = if r < bp.ceiling_rows[j] {
                LABEL_CEILING
            } else if r > bp.floor_rows[j] {
                LABEL_FLOOR
            } else {
                LABEL_WALL
            };
        }
    }
    Ok(labels)
}

/// Floor-plan points `depth_j (sin u_j, cos u_j)` in column order.
pub fn polar_trace(depth: &[f64]) -> Vec<Point> {
    let w = depth.len();
    (0..w)
        .map(|j| {
            let u = 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / w as f64 - std::f64::consts::PI;
            [depth[j] * u.sin(), depth[j] * u.cos()]
        })
        .collect()
}

/// Wall-normal angles and circular depth gradients of a horizon-depth
/// sequence.
///
/// The normal at column `j` is the inward normal of the chord between the
/// floor-plan points of columns `j-1` and `j+1`, as the angle
/// `atan2(n_x, n_z)`. The gradient is the circular central difference.
pub fn depth_normals_gradients(depth: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = depth.len();
    let pts = polar_trace(depth);
    let mut normals = Vec::with_capacity(w);
    let mut gradients = Vec::with_capacity(w);
    for j in 0..w {
        let (prev, next) = ((j + w - 1) % w, (j + 1) % w);
        let tx = pts[next][0] - pts[prev][0];
        let tz = pts[next][1] - pts[prev][1];
        normals.push(tz.atan2(-tx));
        gradients.push(0.5 * (depth[next] - depth[prev]));
    }
    (normals, gradients)
}

/// Raw polar-trace polygon of a prediction, reordered counter-clockwise.
/// No Manhattan regularisation is applied.
pub fn layout_from_prediction(pred: &Prediction, grid: EquirectGrid) -> Result<Layout> {
    layout_from_prediction_with_camera(pred, grid, DEFAULT_CAMERA_HEIGHT_M)
}

pub fn layout_from_prediction_with_camera(
    pred: &Prediction,
    grid: EquirectGrid,
    camera_height_m: f64,
) -> Result<Layout> {
    if !(pred.room_height_m > 0.0) {
        return Err(Error::arg("layout_from_prediction", "room height must be positive"));
    }
    if pred.horizon_depth.len() != grid.width() {
        return Err(Error::shape(
            "layout_from_prediction",
            format!("{} depths for a {}-column grid", pred.horizon_depth.len(), grid.width()),
        ));
    }
    let hd = pred.to_horizon_depth()?;
    let mut poly = polar_trace(&hd.depth);
    poly.reverse();
    Layout::new(poly, pred.room_height_m, camera_height_m)
}
