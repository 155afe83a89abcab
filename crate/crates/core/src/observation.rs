//! Top-down observations: the geometric view (visible objects, occluded
//! region) and the colour-labelled robot-centric raster derived from it.

use crate::geometry::{point_visible, transform_polygon, visibility_region, CameraModel, ConvexPolygon, Polygon, Pose2, Region, Vec2, VisibilityRegion};
use crate::physics::{GripperGeometry, GripperState, ObjectId, ObjectStatus, Shelf, ShelfState};
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

pub const RASTER_SIZE: usize = 64;
pub const RASTER_BYTES: usize = RASTER_SIZE * RASTER_SIZE * 3;
/// Boundary samples used to decide whether an object is detected.
pub const VISIBILITY_SAMPLES: usize = 32;
/// Cell size of the world-frame grid recording which shelf cells were seen.
pub const SHELF_GRID_RESOLUTION: f64 = 0.01;

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticPalette {
    pub version: u32,
    pub target: Rgb,
    pub clutter: Rgb,
    pub occluded: Rgb,
    pub observable: Rgb,
    pub shelf_edge: Rgb,
    pub walls: Rgb,
    pub gripper: Rgb,
}

impl Default for SemanticPalette {
    fn default() -> Self {
        Self {
            version: 1,
            target: [0, 255, 0],
            clutter: [255, 0, 0],
            occluded: [255, 255, 255],
            observable: [128, 128, 128],
            shelf_edge: [0, 0, 0],
            walls: [139, 69, 19],
            gripper: [0, 0, 255],
        }
    }
}

impl SemanticPalette {
    pub fn colors(&self) -> [Rgb; 7] {
        [
            self.target,
            self.clutter,
            self.occluded,
            self.observable,
            self.shelf_edge,
            self.walls,
            self.gripper,
        ]
    }
}

/// Rigid transform between the world and the robot-centric image frame. The
/// gripper sits at the center of pixel `(row 52, col 32)` heading up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotFrame {
    pub gripper: Pose2,
    /// Meters per pixel.
    pub resolution: f64,
}

pub const ANCHOR_ROW: usize = 52;
pub const ANCHOR_COL: usize = 32;
pub const DEFAULT_RESOLUTION: f64 = 0.01;

impl RobotFrame {
    pub fn new(gripper: Pose2) -> Self {
        Self {
            gripper,
            resolution: DEFAULT_RESOLUTION,
        }
    }

    /// World point to robot frame (meters, +y ahead of the gripper).
    pub fn to_robot(&self, p: Vec2) -> Vec2 {
        self.gripper.inverse_transform_point(p)
    }

    pub fn to_world(&self, p: Vec2) -> Vec2 {
        self.gripper.transform_point(p)
    }

    pub fn pose_to_robot(&self, pose: &Pose2) -> Pose2 {
        self.gripper.inverse().compose(pose)
    }

    pub fn pose_to_world(&self, pose: &Pose2) -> Pose2 {
        self.gripper.compose(pose)
    }

    /// Continuous image coordinates `(row, col)` of a robot-frame point.
    pub fn robot_to_image(&self, p: Vec2) -> (f64, f64) {
        (
            ANCHOR_ROW as f64 + 0.5 - p.y / self.resolution,
            ANCHOR_COL as f64 + 0.5 + p.x / self.resolution,
        )
    }

    /// Pixel containing a world point, if it falls on the raster.
    pub fn world_to_pixel(&self, p: Vec2) -> Option<(usize, usize)> {
        let (r, c) = self.robot_to_image(self.to_robot(p));
        let (r, c) = (r.floor(), c.floor());
        (r >= 0.0 && c >= 0.0 && r < RASTER_SIZE as f64 && c < RASTER_SIZE as f64).then_some((r as usize, c as usize))
    }

    pub fn pixel_center_robot(&self, row: usize, col: usize) -> Vec2 {
        Vec2::new(
            (col as f64 - ANCHOR_COL as f64) * self.resolution,
            (ANCHOR_ROW as f64 - row as f64) * self.resolution,
        )
    }

    pub fn pixel_center_world(&self, row: usize, col: usize) -> Vec2 {
        self.to_world(self.pixel_center_robot(row, col))
    }
}

/// Task priors: information that does not change during an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPriors {
    pub shelf: Shelf,
    pub target_type: u32,
    /// Nominal shape of every object type.
    pub shapes: BTreeMap<u32, ConvexPolygon>,
    pub gripper: GripperGeometry,
    pub camera: CameraModel,
    pub palette: SemanticPalette,
}

impl TaskPriors {
    pub fn target_shape(&self) -> Option<&ConvexPolygon> {
        self.shapes.get(&self.target_type)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibleObject {
    pub id: ObjectId,
    pub type_id: u32,
    pub pose: Pose2,
}

/// Row-major RGB image.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    pub data: Vec<u8>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Raster({}x{})", RASTER_SIZE, RASTER_SIZE)
    }
}

impl Raster {
    pub fn filled(color: Rgb) -> Self {
        Self {
            data: color.iter().copied().cycle().take(RASTER_BYTES).collect(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> Rgb {
        let i = (row * RASTER_SIZE + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, c: Rgb) {
        let i = (row * RASTER_SIZE + col) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn to_base64(&self) -> String {
        base64::engine::general_purpose::STANDARD.encode(&self.data)
    }

    pub fn count(&self, c: Rgb) -> usize {
        self.data.chunks_exact(3).filter(|px| *px == c).count()
    }

    pub fn to_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(RASTER_SIZE as u32, RASTER_SIZE as u32, self.data.clone()).expect("raster size")
    }

    /// Nearest-neighbour upscaled PNG bytes.
    pub fn to_png(&self, scale: u32) -> Result<Vec<u8>, image::ImageError> {
        let img = self.to_image();
        let img = image::imageops::resize(&img, RASTER_SIZE as u32 * scale, RASTER_SIZE as u32 * scale, image::imageops::FilterType::Nearest);
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}

#[derive(Debug)]
pub struct Observation {
    pub gripper: GripperState,
    pub visible_objects: Vec<VisibleObject>,
    pub occluded_region: VisibilityRegion,
    pub priors: Arc<TaskPriors>,
    raster: OnceLock<Raster>,
    observed_cells: OnceLock<Vec<bool>>,
}

impl Observation {
    pub fn new(
        gripper: GripperState,
        visible_objects: Vec<VisibleObject>,
        occluded_region: VisibilityRegion,
        priors: Arc<TaskPriors>,
    ) -> Self {
        Self {
            gripper,
            visible_objects,
            occluded_region,
            priors,
            raster: OnceLock::new(),
            observed_cells: OnceLock::new(),
        }
    }

    pub fn gripper_pose(&self) -> Pose2 {
        self.gripper.pose
    }

    pub fn frame(&self) -> RobotFrame {
        RobotFrame::new(self.gripper.pose)
    }

    pub fn target(&self) -> Option<&VisibleObject> {
        self.visible_objects.iter().find(|o| o.type_id == self.priors.target_type)
    }

    pub fn visible_ids(&self) -> Vec<ObjectId> {
        self.visible_objects.iter().map(|o| o.id).collect()
    }

    /// World polygon of a detected object, drawn with its nominal shape.
    pub fn object_polygon(&self, obj: &VisibleObject) -> Option<Polygon> {
        self.priors.shapes.get(&obj.type_id).map(|s| transform_polygon(s, &obj.pose))
    }

    /// Grid dimensions `(columns, rows)` of the shelf cell grid.
    pub fn shelf_grid_size(&self) -> (usize, usize) {
        let shelf = &self.priors.shelf;
        (
            (shelf.width / SHELF_GRID_RESOLUTION).ceil() as usize,
            (shelf.depth / SHELF_GRID_RESOLUTION).ceil() as usize,
        )
    }

    /// Index of the shelf grid cell containing a world point.
    pub fn shelf_cell(&self, p: Vec2) -> Option<usize> {
        let ws = self.priors.shelf.workspace();
        if !ws.contains(p) {
            return None;
        }
        let (nx, ny) = self.shelf_grid_size();
        let ix = (((p.x - ws.min.x) / SHELF_GRID_RESOLUTION) as usize).min(nx - 1);
        let iy = (((p.y - ws.min.y) / SHELF_GRID_RESOLUTION) as usize).min(ny - 1);
        Some(iy * nx + ix)
    }

    /// Whether the center of each shelf grid cell was observable.
    pub fn observed_cells(&self) -> &[bool] {
        self.observed_cells.get_or_init(|| {
            let ws = self.priors.shelf.workspace();
            let (nx, ny) = self.shelf_grid_size();
            let mut out = Vec::with_capacity(nx * ny);
            for iy in 0..ny {
                for ix in 0..nx {
                    let p = Vec2::new(
                        ws.min.x + (ix as f64 + 0.5) * SHELF_GRID_RESOLUTION,
                        ws.min.y + (iy as f64 + 0.5) * SHELF_GRID_RESOLUTION,
                    );
                    out.push(self.occluded_region.classify(p) == Region::Observable);
                }
            }
            out
        })
    }

    /// The raster is derived lazily from the geometric fields.
    pub fn raster(&self) -> &Raster {
        self.raster.get_or_init(|| rasterize(self))
    }
}

/// Ordered observation sequence of an episode. Cloning shares the elements.
#[derive(Debug)]
pub struct History<O> {
    items: Vec<Arc<O>>,
}

impl<O> Clone for History<O> {
    fn clone(&self) -> Self {
        Self { items: self.items.clone() }
    }
}

impl<O> Default for History<O> {
    fn default() -> Self {
        Self { items: Vec::new() }
    }
}

impl<O> History<O> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_vec(items: Vec<Arc<O>>) -> Self {
        Self { items }
    }

    pub fn push(&mut self, o: Arc<O>) {
        self.items.push(o);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn last(&self) -> Option<&Arc<O>> {
        self.items.last()
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &Arc<O>> + ExactSizeIterator {
        self.items.iter()
    }

    pub fn items(&self) -> &[Arc<O>] {
        &self.items
    }
}

pub type ObservationHistory = History<Observation>;

/// Objects other than the grasped one block the camera.
pub fn occluder_polygons(state: &ShelfState) -> Vec<(ObjectId, Polygon)> {
    let grasped = state.gripper.grasped_id();
    state
        .objects
        .iter()
        .filter(|o| Some(o.id) != grasped && o.status != ObjectStatus::Retrieved)
        .map(|o| (o.id, o.world_polygon()))
        .collect()
}

pub fn render_observation(state: &ShelfState, priors: &Arc<TaskPriors>) -> Observation {
    let camera = &priors.camera;
    let occluders = occluder_polygons(state);
    let polys: Vec<Polygon> = occluders.iter().map(|(_, p)| p.clone()).collect();
    let region = visibility_region(camera, &state.gripper.pose, &polys, &state.shelf.workspace());

    let grasped = state.gripper.grasped_id();
    let mut visible = Vec::new();
    for obj in &state.objects {
        if obj.status == ObjectStatus::Retrieved && grasped != Some(obj.id) {
            continue;
        }
        let seen = if grasped == Some(obj.id) {
            true
        } else {
            let others: Vec<Polygon> = occluders
                .iter()
                .filter(|(id, _)| *id != obj.id)
                .map(|(_, p)| p.clone())
                .collect();
            boundary_visible_fraction(camera, &state.gripper.pose, &others, &obj.world_polygon()) >= 0.5
        };
        if seen {
            visible.push(VisibleObject {
                id: obj.id,
                type_id: obj.type_id,
                pose: obj.pose,
            });
        }
    }
    Observation::new(state.gripper, visible, region, priors.clone())
}

/// Fraction of [`VISIBILITY_SAMPLES`] boundary points seen by the camera.
pub fn boundary_visible_fraction(camera: &CameraModel, gripper: &Pose2, occluders: &[Polygon], poly: &Polygon) -> f64 {
    let samples = poly.sample_boundary(VISIBILITY_SAMPLES);
    let seen = samples
        .iter()
        .filter(|p| point_visible(camera, gripper, occluders, **p))
        .count();
    seen as f64 / VISIBILITY_SAMPLES as f64
}

fn rasterize(obs: &Observation) -> Raster {
    let priors = &obs.priors;
    let palette = &priors.palette;
    let frame = obs.frame();
    let shelf = &priors.shelf;
    let workspace = shelf.workspace();
    let walls = shelf.walls();
    let half_px = frame.resolution / 2.0;
    let edge_half = shelf.width / 2.0 + shelf.wall_thickness;

    let objects: Vec<(Polygon, Rgb)> = obs
        .visible_objects
        .iter()
        .filter_map(|o| {
            let color = if o.type_id == priors.target_type {
                palette.target
            } else {
                palette.clutter
            };
            obs.object_polygon(o).map(|p| (p, color))
        })
        .collect();
    let gripper = obs.gripper.parts(&priors.gripper);

    let mut raster = Raster::filled(palette.observable);
    for row in 0..RASTER_SIZE {
        for col in 0..RASTER_SIZE {
            let p = frame.pixel_center_world(row, col);
            let mut color = palette.observable;
            if workspace.contains(p) && obs.occluded_region.classify(p) == Region::Occluded {
                color = palette.occluded;
            }
            if let Some((_, c)) = objects.iter().find(|(poly, _)| poly.contains(p)) {
                color = *c;
            }
            if walls.iter().any(|w| w.contains(p)) {
                color = palette.walls;
            }
            if p.y.abs() <= half_px && p.x.abs() <= edge_half {
                color = palette.shelf_edge;
            }
            if gripper.iter().any(|g| g.contains(p)) {
                color = palette.gripper;
            }
            raster.set(row, col, color);
        }
    }
    raster
}

/// Pixels whose centers fall inside a world polygon.
pub fn footprint_pixels(frame: &RobotFrame, poly: &Polygon) -> Vec<(usize, usize)> {
    let robot: Vec<Vec2> = poly.vertices.iter().map(|p| frame.to_robot(*p)).collect();
    let img: Vec<(f64, f64)> = robot.iter().map(|p| frame.robot_to_image(*p)).collect();
    let (mut r0, mut r1, mut c0, mut c1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (r, c) in &img {
        r0 = r0.min(*r);
        r1 = r1.max(*r);
        c0 = c0.min(*c);
        c1 = c1.max(*c);
    }
    let clamp = |v: f64| v.floor().clamp(0.0, RASTER_SIZE as f64 - 1.0) as usize;
    let mut out = Vec::new();
    if r1 < 0.0 || c1 < 0.0 || r0 >= RASTER_SIZE as f64 || c0 >= RASTER_SIZE as f64 {
        return out;
    }
    for row in clamp(r0)..=clamp(r1) {
        for col in clamp(c0)..=clamp(c1) {
            if poly.contains(frame.pixel_center_world(row, col)) {
                out.push((row, col));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{ObjectState, ObjectStatus};
    use approx::assert_abs_diff_eq;

    fn priors(shapes: &[(u32, ConvexPolygon)]) -> Arc<TaskPriors> {
        Arc::new(TaskPriors {
            shelf: Shelf::default(),
            target_type: 0,
            shapes: shapes.iter().cloned().collect(),
            gripper: GripperGeometry::default(),
            camera: CameraModel::default(),
            palette: SemanticPalette::default(),
        })
    }

    fn object(id: u32, shape: ConvexPolygon, pose: Pose2) -> ObjectState {
        ObjectState {
            id,
            type_id: id,
            nominal_shape: shape.clone(),
            shape,
            pose,
            density: 1.0,
            friction: 0.3,
            status: ObjectStatus::Free,
        }
    }

    fn shelf_state(objects: Vec<ObjectState>) -> ShelfState {
        ShelfState {
            shelf: Shelf::default(),
            gripper: GripperState {
                pose: Pose2::new(0.0, -0.08, 0.0),
                aperture: 1.0,
                grasp: None,
            },
            objects,
            target_id: 0,
        }
    }

    #[test]
    fn palette_colors_are_distinct() {
        let c = SemanticPalette::default().colors();
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                assert_ne!(c[i], c[j]);
            }
        }
    }

    #[test]
    fn gripper_maps_to_anchor_pixel() {
        for theta in [0.0, 0.7, -2.0] {
            let g = Pose2::new(0.1, -0.05, theta);
            let f = RobotFrame::new(g);
            assert_eq!(f.world_to_pixel(g.position()), Some((ANCHOR_ROW, ANCHOR_COL)));
        }
    }

    #[test]
    fn robot_frame_round_trip_and_ahead() {
        for theta in [0.0, 1.0, -2.5, 3.1] {
            let g = Pose2::new(0.05, 0.1, theta);
            let f = RobotFrame::new(g);
            let p = Vec2::new(0.13, -0.2);
            let back = f.to_world(f.to_robot(p));
            assert_abs_diff_eq!((back - p).norm(), 0.0, epsilon = 1e-9);
            let ahead = g.position() + g.forward() * 0.1;
            let r = f.to_robot(ahead);
            assert_abs_diff_eq!(r.x, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(r.y, 0.1, epsilon = 1e-12);
            let pose = Pose2::new(0.2, 0.2, 0.4);
            let rt = f.pose_to_world(&f.pose_to_robot(&pose));
            assert_abs_diff_eq!(rt.x, pose.x, epsilon = 1e-12);
            assert_abs_diff_eq!(rt.theta, pose.theta, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_shelf_has_no_white_inside_fov() {
        let p = priors(&[(0, ConvexPolygon::rectangle(0.03, 0.03))]);
        let mut s = shelf_state(vec![]);
        s.gripper.pose = Pose2::new(0.0, 0.05, 0.0);
        let mut camera = p.camera;
        camera.fov_half_angle = std::f64::consts::PI;
        let p = Arc::new(TaskPriors { camera, ..(*p).clone() });
        let obs = render_observation(&s, &p);
        assert_eq!(obs.raster().count(p.palette.occluded), 0);
    }

    #[test]
    fn hidden_target_is_not_reported_or_drawn() {
        let target = ConvexPolygon::rectangle(0.03, 0.03);
        let wall = ConvexPolygon::rectangle(0.12, 0.04);
        let p = priors(&[(0, target.clone()), (1, wall.clone())]);
        let s = shelf_state(vec![
            object(0, target, Pose2::new(0.0, 0.25, 0.0)),
            object(1, wall, Pose2::new(0.0, 0.12, 0.0)),
        ]);
        let obs = render_observation(&s, &p);
        assert_eq!(obs.visible_ids(), vec![1]);
        assert_eq!(obs.raster().count(p.palette.target), 0);
        assert!(obs.raster().count(p.palette.clutter) > 0);
    }

    #[test]
    fn visible_target_is_drawn_green() {
        let target = ConvexPolygon::rectangle(0.04, 0.04);
        let p = priors(&[(0, target.clone())]);
        let s = shelf_state(vec![object(0, target, Pose2::new(0.0, 0.15, 0.0))]);
        let obs = render_observation(&s, &p);
        assert_eq!(obs.visible_ids(), vec![0]);
        assert!(obs.raster().count(p.palette.target) >= 9);
        assert!(obs.raster().count(p.palette.gripper) > 0);
        assert!(obs.raster().count(p.palette.shelf_edge) > 0);
    }

    #[test]
    fn raster_is_deterministic() {
        let target = ConvexPolygon::rectangle(0.04, 0.04);
        let p = priors(&[(0, target.clone())]);
        let s = shelf_state(vec![object(0, target, Pose2::new(0.05, 0.2, 0.3))]);
        let a = render_observation(&s, &p);
        let b = render_observation(&s, &p);
        assert_eq!(a.raster().data, b.raster().data);
    }
}
