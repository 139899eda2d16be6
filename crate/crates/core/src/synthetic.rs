//! Ground-truth scenes: ray-cast equirectangular renders of box buildings,
//! exact correspondences and boxes for the oracle backends, random two-view
//! problems, and on-disk fixtures in the provider layout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{
    slice_tiles, tile_path, AcquisitionError, Manifest, ManifestRecord, PanoMetadata, PanoProvider, TileGrid, HEADING_CENTER_COLUMN, MANIFEST_FILE,
};
use crate::detection::{BBox, ViewAnnotator};
use crate::geo::{enu_to_geodetic, EnuVec, GeoError, GeoPoint};
use crate::mvg::{EssentialMatrix, FeatureMatch, FeatureMatcher, MvgError, NormalizedMatch};
use crate::projection::{pano_pixel_to_dir, yaw_rotation, EquirectImage, Intrinsics, PanoDims, ProjectionError, RectilinearView};

pub const DEFAULT_CAMERA_HEIGHT_M: f64 = 2.5;
pub const DEFAULT_CHECKER_M: f64 = 0.5;
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const INPUT_FILE: &str = "input.jpg";

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("scene invalid: {0}")]
    InvalidScene(String),
    #[error("only {0} shared visible corners (need 5)")]
    TooFewCorners(usize),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SyntheticError {
    SyntheticError::Io { path: path.display().to_string(), msg: e.to_string() }
}

/// An axis-aligned (up to yaw) box standing on the ground plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBuilding {
    /// Footprint centre; the up component is ignored.
    pub center: EnuVec,
    pub width: f64,
    pub depth: f64,
    pub height: f64,
    /// Clockwise rotation seen from above; at 0 the width runs East.
    #[serde(default)]
    pub yaw_deg: f64,
    #[serde(default = "default_cell")]
    pub checker_m: f64,
    pub colors: [[u8; 3]; 2],
}

fn default_cell() -> f64 {
    DEFAULT_CHECKER_M
}

/// Which side of a box a face is on, in box-local axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Face {
    PlusW,
    MinusW,
    PlusD,
    MinusD,
    Top,
}

impl Face {
    fn id(self) -> u64 {
        self as u64
    }
}

impl BoxBuilding {
    /// Unit width and depth axes in (E, N).
    fn axes(&self) -> (Vector2<f64>, Vector2<f64>) {
        let (s, c) = self.yaw_deg.to_radians().sin_cos();
        (Vector2::new(c, -s), Vector2::new(s, c))
    }

    fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (aw, ad) = self.axes();
        let d = Vector2::new(p.x - self.center.e, p.y - self.center.n);
        Vector3::new(d.dot(&aw), d.dot(&ad), p.z)
    }

    fn dir_to_local(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let (aw, ad) = self.axes();
        let d = Vector2::new(v.x, v.y);
        Vector3::new(d.dot(&aw), d.dot(&ad), v.z)
    }

    fn from_local(&self, l: &Vector3<f64>) -> Vector3<f64> {
        let (aw, ad) = self.axes();
        let p = aw * l.x + ad * l.y;
        Vector3::new(self.center.e + p.x, self.center.n + p.y, l.z)
    }

    /// Outward normal of a vertical face in (E, N, U).
    pub fn face_normal(&self, f: Face) -> Vector3<f64> {
        let (aw, ad) = self.axes();
        let n = match f {
            Face::PlusW => aw,
            Face::MinusW => -aw,
            Face::PlusD => ad,
            Face::MinusD => -ad,
            Face::Top => return Vector3::z(),
        };
        Vector3::new(n.x, n.y, 0.0)
    }

    /// Corners of a vertical face: bottom-left, bottom-right, top-right, top-left
    /// as seen from outside.
    pub fn face_corners(&self, f: Face) -> [Vector3<f64>; 4] {
        let (hw, hd, h) = (self.width / 2.0, self.depth / 2.0, self.height);
        let (a, b) = match f {
            Face::MinusD => ((-hw, -hd), (hw, -hd)),
            Face::PlusD => ((hw, hd), (-hw, hd)),
            Face::PlusW => ((hw, -hd), (hw, hd)),
            Face::MinusW => ((-hw, hd), (-hw, -hd)),
            Face::Top => ((-hw, -hd), (hw, -hd)),
        };
        let l = |x: (f64, f64), z: f64| self.from_local(&Vector3::new(x.0, x.1, z));
        [l(a, 0.0), l(b, 0.0), l(b, h), l(a, h)]
    }

    /// Centre of a vertical face at ground level.
    pub fn face_base_center(&self, f: Face) -> Vector3<f64> {
        let c = self.face_corners(f);
        (c[0] + c[1]) / 2.0
    }

    /// Nearest intersection with distance, face and face texture coordinates.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Face, f64, f64)> {
        let lo = self.to_local(o);
        let ld = self.dir_to_local(d);
        let lo_b = Vector3::new(-self.width / 2.0, -self.depth / 2.0, 0.0);
        let hi_b = Vector3::new(self.width / 2.0, self.depth / 2.0, self.height);
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut axis = 0;
        for k in 0..3 {
            if ld[k].abs() < 1e-15 {
                if lo[k] < lo_b[k] || lo[k] > hi_b[k] {
                    return None;
                }
                continue;
            }
            let (mut a, mut b) = ((lo_b[k] - lo[k]) / ld[k], (hi_b[k] - lo[k]) / ld[k]);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            if a > t0 {
                t0 = a;
                axis = k;
            }
            t1 = t1.min(b);
        }
        if t0 > t1 || t0 <= 1e-9 {
            return None;
        }
        let p = lo + ld * t0;
        let (face, s, t) = match axis {
            0 if ld.x < 0.0 => (Face::PlusW, p.y + self.depth / 2.0, p.z),
            0 => (Face::MinusW, self.depth / 2.0 - p.y, p.z),
            1 if ld.y < 0.0 => (Face::PlusD, self.width / 2.0 - p.x, p.z),
            1 => (Face::MinusD, p.x + self.width / 2.0, p.z),
            _ => (Face::Top, p.x + self.width / 2.0, p.y + self.depth / 2.0),
        };
        Some((t0, face, s, t))
    }

    fn footprint(&self) -> [Vector2<f64>; 4] {
        let c = self.face_corners(Face::MinusD);
        let d = self.face_corners(Face::PlusD);
        [c[0].xy(), c[1].xy(), d[0].xy(), d[1].xy()]
    }

    fn validate(&self) -> Result<(), SyntheticError> {
        let dims = [self.width, self.depth, self.height, self.checker_m];
        if dims.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(SyntheticError::InvalidScene("box dimensions and checker size must be positive".into()));
        }
        Ok(())
    }
}

fn footprints_overlap(a: &BoxBuilding, b: &BoxBuilding) -> bool {
    let (pa, pb) = (a.footprint(), b.footprint());
    let axes = [a.axes().0, a.axes().1, b.axes().0, b.axes().1];
    axes.iter().all(|ax| {
        let proj = |ps: &[Vector2<f64>; 4]| {
            ps.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.dot(ax)), hi.max(p.dot(ax))))
        };
        let ((a0, a1), (b0, b1)) = (proj(&pa), proj(&pb));
        a1 > b0 && b1 > a0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub buildings: Vec<BoxBuilding>,
    #[serde(default)]
    pub occluders: Vec<BoxBuilding>,
    /// Index into `buildings` of the building being localized.
    #[serde(default)]
    pub target: usize,
    pub ground: [u8; 3],
    pub sky: [u8; 3],
}

/// What a ray hits first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hit {
    Sky,
    Ground(f64),
    Box { dist: f64, index: usize, occluder: bool, face: Face, s: f64, t: f64 },
}

impl Hit {
    pub fn dist(&self) -> f64 {
        match self {
            Hit::Sky => f64::INFINITY,
            Hit::Ground(d) => *d,
            Hit::Box { dist, .. } => *dist,
        }
    }
}

fn mix(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51afd7ed558ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ceb9fe1a85ec53);
    h ^ (h >> 33)
}

impl Scene {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        if self.buildings.is_empty() || self.target >= self.buildings.len() {
            return Err(SyntheticError::InvalidScene("target index must name a building".into()));
        }
        let all: Vec<&BoxBuilding> = self.buildings.iter().chain(&self.occluders).collect();
        for b in &all {
            b.validate()?;
        }
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                if footprints_overlap(all[i], all[j]) {
                    return Err(SyntheticError::InvalidScene(format!("boxes {i} and {j} intersect")));
                }
            }
        }
        Ok(())
    }

    pub fn target(&self) -> &BoxBuilding {
        &self.buildings[self.target]
    }

    /// First intersection of the ray `o + t·d` (ENU, `d` unit) with the scene.
    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Hit {
        let mut best = if d.z < 0.0 { Hit::Ground(-o.z / d.z) } else { Hit::Sky };
        let groups = [(&self.buildings, false), (&self.occluders, true)];
        for (list, occluder) in groups {
            for (index, b) in list.iter().enumerate() {
                if let Some((dist, face, s, t)) = b.intersect(o, d) {
                    if dist < best.dist() {
                        best = Hit::Box { dist, index, occluder, face, s, t };
                    }
                }
            }
        }
        best
    }

    fn shade(&self, hit: &Hit) -> [u8; 3] {
        match *hit {
            Hit::Sky => self.sky,
            Hit::Ground(_) => self.ground,
            Hit::Box { index, occluder, face, s, t, .. } => {
                let b = if occluder { &self.occluders[index] } else { &self.buildings[index] };
                let (i, j) = ((s / b.checker_m).floor() as i64, (t / b.checker_m).floor() as i64);
                let base = b.colors[((i + j).rem_euclid(2)) as usize];
                let key = (index as u64) << 56 ^ (occluder as u64) << 55 ^ face.id() << 52 ^ (i as u64 & 0xFFFFFF) << 24 ^ (j as u64 & 0xFFFFFF);
                let m = 0.7 + 0.3 * (mix(key) % 1000) as f64 / 999.0;
                base.map(|c| (c as f64 * m).round().clamp(0.0, 255.0) as u8)
            }
        }
    }
}

/// A panorama capture position; `position.u` is the camera height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: EnuVec,
    /// Degrees clockwise from North.
    pub heading_deg: f64,
}

impl CameraPose {
    pub fn new(e: f64, n: f64, heading_deg: f64) -> Self {
        Self { position: EnuVec::new(e, n, DEFAULT_CAMERA_HEIGHT_M), heading_deg }
    }

    pub fn origin(&self) -> Vector3<f64> {
        Vector3::new(self.position.e, self.position.n, self.position.u)
    }

    /// Rotation from the heading-aligned frame (x right, y down, z forward) to ENU.
    pub fn heading_to_enu(&self) -> Matrix3<f64> {
        let (s, c) = self.heading_deg.to_radians().sin_cos();
        let right = Vector3::new(c, -s, 0.0);
        let down = Vector3::new(0.0, 0.0, -1.0);
        let fwd = Vector3::new(s, c, 0.0);
        Matrix3::from_columns(&[right, down, fwd])
    }

    /// Rotation from the frame of a view turned `alpha` from the heading to ENU.
    pub fn view_to_enu(&self, alpha_deg: f64) -> Matrix3<f64> {
        self.heading_to_enu() * yaw_rotation(alpha_deg)
    }

    /// Continuous pixel of a world point in a square view, if in front.
    pub fn project(&self, alpha_deg: f64, k: &Intrinsics, x: &Vector3<f64>) -> Option<(f64, f64)> {
        let v = self.view_to_enu(alpha_deg).transpose() * (x - self.origin());
        k.project(&v)
    }
}

/// Ray-cast render with the heading at the centre column.
pub fn render_pano(scene: &Scene, pose: &CameraPose, dims: PanoDims) -> Result<EquirectImage, SyntheticError> {
    if dims.width != 2 * dims.height || dims.height == 0 {
        return Err(ProjectionError::NotEquirectangular { width: dims.width, height: dims.height }.into());
    }
    let rot = pose.heading_to_enu();
    let o = pose.origin();
    let row_len = dims.width as usize * 3;
    let mut buf = vec![0u8; row_len * dims.height as usize];
    buf.par_chunks_mut(row_len).enumerate().for_each(|(v, row)| {
        for u in 0..dims.width as usize {
            let dir = pano_pixel_to_dir(dims, u as f64, v as f64).expect("pixel in range");
            let d = rot * dir.to_ray();
            let c = scene.shade(&scene.cast(&o, &d));
            row[u * 3..u * 3 + 3].copy_from_slice(&c);
        }
    });
    let img = RgbImage::from_raw(dims.width, dims.height, buf).expect("sized buffer");
    Ok(EquirectImage::new(img)?)
}

fn visible_from(scene: &Scene, pose: &CameraPose, x: &Vector3<f64>) -> bool {
    let o = pose.origin();
    let delta = x - o;
    let dist = delta.norm();
    let hit = scene.cast(&o, &(delta / dist));
    hit.dist() >= dist * (1.0 - 1e-9) - 1e-9
}

/// Interior checker corners on the outward-facing vertical faces of every
/// non-occluder building.
fn checker_corners(scene: &Scene, toward: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut pts = Vec::new();
    for b in &scene.buildings {
        for face in [Face::MinusD, Face::PlusD, Face::PlusW, Face::MinusW] {
            let n = b.face_normal(face);
            let c = b.face_corners(face);
            if toward.iter().any(|o| n.dot(&(o - c[0])) <= 0.0) {
                continue;
            }
            let along = c[1] - c[0];
            let len = along.norm();
            let ns = (len / b.checker_m).round() as i64;
            let nt = (b.height / b.checker_m).round() as i64;
            for i in 1..ns {
                for j in 1..nt {
                    let s = i as f64 * b.checker_m;
                    let t = j as f64 * b.checker_m;
                    if s >= len || t >= b.height {
                        continue;
                    }
                    pts.push(c[0] + along * (s / len) + Vector3::new(0.0, 0.0, t));
                }
            }
        }
    }
    pts
}

/// Exact correspondences between two rectilinear views: projections of
/// checker corners visible from both cameras and inside both images.
#[allow(clippy::too_many_arguments)]
pub fn oracle_matches(
    scene: &Scene,
    pose_a: &CameraPose,
    pose_b: &CameraPose,
    alpha_a: f64,
    alpha_b: f64,
    theta_deg: f64,
    side: u32,
) -> Result<Vec<FeatureMatch>, SyntheticError> {
    let k = Intrinsics::from_fov(theta_deg, side)?;
    let s = side as f64;
    let inside = |p: (f64, f64)| p.0 >= 0.0 && p.0 < s && p.1 >= 0.0 && p.1 < s;
    let corners = checker_corners(scene, &[pose_a.origin(), pose_b.origin()]);
    let out: Vec<FeatureMatch> = corners
        .par_iter()
        .filter_map(|x| {
            let pa = pose_a.project(alpha_a, &k, x).filter(|p| inside(*p))?;
            let pb = pose_b.project(alpha_b, &k, x).filter(|p| inside(*p))?;
            (visible_from(scene, pose_a, x) && visible_from(scene, pose_b, x))
                .then_some(FeatureMatch { pt0: [pa.0, pa.1], pt1: [pb.0, pb.1] })
        })
        .collect();
    if out.len() < 5 {
        return Err(SyntheticError::TooFewCorners(out.len()));
    }
    Ok(out)
}

/// Ground-truth relative pose `(R, t)` taking view-a coordinates to view-b
/// coordinates, with `‖t‖ = 1`, and the scale factor that was removed.
pub fn relative_pose(pose_a: &CameraPose, pose_b: &CameraPose, alpha_a: f64, alpha_b: f64) -> (Matrix3<f64>, Vector3<f64>, f64) {
    let ra = pose_a.view_to_enu(alpha_a);
    let rb = pose_b.view_to_enu(alpha_b);
    let r = rb.transpose() * ra;
    let t = rb.transpose() * (pose_a.origin() - pose_b.origin());
    let scale = t.norm();
    (r, t / scale, scale)
}

/// Registered panoramas and their scene, used to annotate views and to match
/// them exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTable {
    pub scene: Scene,
    pub poses: BTreeMap<String, CameraPose>,
}

/// Fraction of a facade that must be visible for it to be annotated.
pub const MIN_VISIBLE_FRACTION: f64 = 0.5;

/// Geometric oracle over an [`AnnotationTable`].
#[derive(Debug, Clone)]
pub struct SceneOracle {
    pub table: AnnotationTable,
    /// Street-facing face of each building.
    facades: Vec<Face>,
}

impl SceneOracle {
    pub fn new(table: AnnotationTable) -> Self {
        let n = table.poses.len().max(1) as f64;
        let mean = table.poses.values().fold(Vector3::zeros(), |acc, p| acc + p.origin()) / n;
        let facades = table
            .scene
            .buildings
            .iter()
            .map(|b| {
                let c = b.from_local(&Vector3::zeros());
                let to_cam = Vector3::new(mean.x - c.x, mean.y - c.y, 0.0);
                *[Face::MinusD, Face::PlusD, Face::PlusW, Face::MinusW]
                    .iter()
                    .max_by(|x, y| b.face_normal(**x).dot(&to_cam).total_cmp(&b.face_normal(**y).dot(&to_cam)))
                    .unwrap()
            })
            .collect();
        Self { table, facades }
    }

    pub fn load(path: &Path) -> Result<Self, SyntheticError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let table: AnnotationTable = serde_json::from_str(&text).map_err(|e| io_err(path, e))?;
        table.scene.validate()?;
        Ok(Self::new(table))
    }

    pub fn facade(&self, building: usize) -> Face {
        self.facades[building]
    }

    /// Ground-level centre of the target's street-facing facade.
    pub fn target_point(&self) -> Vector3<f64> {
        self.table.scene.target().face_base_center(self.facades[self.table.scene.target])
    }

    fn facade_box(&self, building: usize, pose: &CameraPose, alpha: f64, k: &Intrinsics, side: f64) -> Option<BBox> {
        let b = &self.table.scene.buildings[building];
        let face = self.facades[building];
        let c = b.face_corners(face);
        if b.face_normal(face).dot(&(pose.origin() - c[0])) <= 0.0 {
            return None;
        }
        // visible fraction from a grid of facade samples
        let (along, up) = (c[1] - c[0], c[3] - c[0]);
        let mut seen = 0;
        let mut total = 0;
        let mut xs = Vec::new();
        for i in 0..=8 {
            for j in 0..=8 {
                let p = c[0] + along * ((i as f64 + 0.5) / 9.5) + up * ((j as f64 + 0.5) / 9.5);
                total += 1;
                if visible_from(&self.table.scene, pose, &p) {
                    seen += 1;
                }
                xs.push(p);
            }
        }
        if (seen as f64) < MIN_VISIBLE_FRACTION * total as f64 {
            return None;
        }
        let proj: Vec<(f64, f64)> = c.iter().map(|x| pose.project(alpha, k, x)).collect::<Option<_>>()?;
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (x, y) in proj {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let (x0, y0, x1, y1) = (x0.max(0.0), y0.max(0.0), x1.min(side), y1.min(side));
        if x1 - x0 < 1.0 || y1 - y0 < 1.0 {
            return None;
        }
        BBox::new(x0, y0, x1, y1).ok()
    }

    /// Boxes of every annotated facade in a view of `pano_id`.
    pub fn boxes(&self, pano_id: &str, alpha: f64, k: &Intrinsics, side: u32) -> Option<Vec<BBox>> {
        let pose = self.table.poses.get(pano_id)?;
        Some(
            (0..self.table.scene.buildings.len())
                .filter_map(|i| self.facade_box(i, pose, alpha, k, side as f64))
                .collect(),
        )
    }
}

impl ViewAnnotator for SceneOracle {
    fn annotate(&self, view: &RectilinearView) -> Option<Vec<BBox>> {
        self.boxes(&view.pano_id, view.alpha_deg, &view.intrinsics, view.side())
    }
}

/// Exact matcher for views of registered panoramas.
#[derive(Debug, Clone)]
pub struct OracleMatcher {
    pub oracle: std::sync::Arc<SceneOracle>,
}

impl FeatureMatcher for OracleMatcher {
    fn match_views(&self, a: &RectilinearView, b: &RectilinearView) -> Result<Vec<FeatureMatch>, MvgError> {
        let poses = &self.oracle.table.poses;
        let (Some(pa), Some(pb)) = (poses.get(&a.pano_id), poses.get(&b.pano_id)) else {
            return Err(MvgError::InsufficientFeatures { found: 0 });
        };
        oracle_matches(&self.oracle.table.scene, pa, pb, a.alpha_deg, b.alpha_deg, a.fov_deg, a.side()).map_err(|e| match e {
            SyntheticError::TooFewCorners(n) => MvgError::InsufficientFeatures { found: n },
            _ => MvgError::InsufficientFeatures { found: 0 },
        })
    }
}

// ---------------------------------------------------------------------------
// Random two-view problems

/// Rotation about a uniformly random axis by an angle uniform in `[0, max_deg]`.
pub fn random_rotation<R: Rng>(rng: &mut R, max_deg: f64) -> Matrix3<f64> {
    let axis: Vector3<f64> = loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break v;
        }
    };
    let angle = rng.gen_range(0.0..=max_deg).to_radians();
    *Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).matrix()
}

/// Labeled correspondences from a random calibrated camera pair.
#[derive(Debug, Clone)]
pub struct TwoViewProblem {
    pub matches: Vec<NormalizedMatch>,
    pub is_outlier: Vec<bool>,
    pub points: Vec<Option<Vector3<f64>>>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub f: f64,
}

/// Outliers are redrawn while their Sampson error under the true geometry is
/// within this multiple of the 1.5 px inlier threshold.
pub const OUTLIER_MARGIN: f64 = 4.0;

impl TwoViewProblem {
    /// `n` correspondences, a fraction `outlier_frac` of them random, inliers
    /// perturbed by Gaussian noise of `noise_px` pixels at focal length `f`.
    pub fn generate(seed: u64, n: usize, outlier_frac: f64, noise_px: f64, f: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = random_rotation(&mut rng, 10.0);
        let t = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)).normalize();
        let e = EssentialMatrix::from_pose(&r, &t);
        let noise = Normal::new(0.0, noise_px.max(0.0) / f).unwrap();
        let n_out = (n as f64 * outlier_frac).round() as usize;
        let mut out_slots: Vec<bool> = (0..n).map(|i| i < n_out).collect();
        for i in (1..n).rev() {
            out_slots.swap(i, rng.gen_range(0..=i));
        }
        let margin = (OUTLIER_MARGIN * 1.5 / f).powi(2);
        let mut matches = Vec::with_capacity(n);
        let mut points = Vec::with_capacity(n);
        for &is_out in &out_slots {
            if is_out {
                loop {
                    let m = NormalizedMatch::new(
                        [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                        [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                    );
                    if e.sampson(&m) > margin {
                        matches.push(m);
                        points.push(None);
                        break;
                    }
                }
            } else {
                loop {
                    let x = Vector3::new(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), rng.gen_range(6.0..20.0));
                    let xc = r * x + t;
                    let (a, b) = (x / x.z, xc / xc.z);
                    if xc.z <= 0.0 || a.x.abs() > 1.0 || a.y.abs() > 1.0 || b.x.abs() > 1.0 || b.y.abs() > 1.0 {
                        continue;
                    }
                    let mut j = || if noise_px > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    let m = NormalizedMatch::new([a.x + j(), a.y + j()], [b.x + j(), b.y + j()]);
                    matches.push(m);
                    points.push(Some(x));
                    break;
                }
            }
        }
        Self { matches, is_outlier: out_slots, points, r, t, f }
    }
}

// ---------------------------------------------------------------------------
// Fixtures

/// A named capture position along the synthetic route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPose {
    pub pano_id: String,
    pub pose: CameraPose,
}

/// Everything needed to write a fixture directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    /// Geodetic position of the ENU origin.
    pub origin: GeoPoint,
    pub scene: Scene,
    pub poses: Vec<NamedPose>,
    pub cols: u32,
    pub rows: u32,
    pub tile_px: u32,
    /// Location written into the geotagged input image.
    pub input: EnuVec,
}

impl FixtureSpec {
    pub fn dims(&self) -> PanoDims {
        PanoDims { width: self.cols * self.tile_px, height: self.rows * self.tile_px }
    }

    pub fn annotation_table(&self) -> AnnotationTable {
        AnnotationTable { scene: self.scene.clone(), poses: self.poses.iter().map(|p| (p.pano_id.clone(), p.pose)).collect() }
    }

    pub fn input_geo(&self) -> Result<GeoPoint, GeoError> {
        enu_to_geodetic(&EnuVec::planar(self.input.e, self.input.n), &self.origin)
    }

    /// Geodetic ground truth of the target's street-facing facade centre.
    pub fn target_geo(&self) -> Result<GeoPoint, GeoError> {
        let p = SceneOracle::new(self.annotation_table()).target_point();
        enu_to_geodetic(&EnuVec::planar(p.x, p.y), &self.origin)
    }
}

/// Options for [`standard_fixture`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandardOptions {
    /// Panoramas per side of PN_0.
    pub n: usize,
    pub spacing_m: f64,
    /// Target on the South side of the street instead of the North.
    pub south: bool,
    /// Place a box blocking the view from PN_3.
    pub occluder: bool,
    pub cols: u32,
    pub rows: u32,
    pub tile_px: u32,
}

impl Default for StandardOptions {
    fn default() -> Self {
        Self { n: 5, spacing_m: 10.0, south: false, occluder: false, cols: 8, rows: 4, tile_px: 512 }
    }
}

pub const STANDARD_ORIGIN: (f64, f64) = (28.08, -96.99);
/// Distance from the street centreline to the target facade.
pub const STANDARD_SETBACK_M: f64 = 15.0;

/// Straight street along East, panoramas every `spacing_m`, a box building
/// whose facade is 15 m from PN_0 and two set-back neighbours.
pub fn standard_fixture(opt: StandardOptions) -> FixtureSpec {
    let sgn = if opt.south { -1.0 } else { 1.0 };
    let facade = |colors: [[u8; 3]; 2], e: f64, setback: f64, w: f64, d: f64, h: f64| BoxBuilding {
        center: EnuVec::planar(e, sgn * (setback + d / 2.0)),
        width: w,
        depth: d,
        height: h,
        yaw_deg: 0.0,
        checker_m: DEFAULT_CHECKER_M,
        colors,
    };
    let buildings = vec![
        facade([[70, 45, 40], [225, 205, 180]], 0.0, STANDARD_SETBACK_M, 8.0, 8.0, 11.0),
        facade([[40, 60, 75], [190, 215, 230]], -17.0, STANDARD_SETBACK_M + 5.0, 8.0, 8.0, 8.0),
        facade([[50, 70, 45], [205, 225, 190]], 17.0, STANDARD_SETBACK_M + 5.0, 8.0, 8.0, 8.0),
    ];
    let occluders = if opt.occluder {
        vec![BoxBuilding {
            center: EnuVec::planar(24.5, sgn * 2.75),
            width: 10.0,
            depth: 2.0,
            height: 7.0,
            yaw_deg: 0.0,
            checker_m: 1.0,
            colors: [[90, 90, 90], [110, 110, 110]],
        }]
    } else {
        Vec::new()
    };
    let poses = (-(opt.n as i64)..=opt.n as i64)
        .map(|i| NamedPose { pano_id: format!("pano_{:+03}", i), pose: CameraPose::new(i as f64 * opt.spacing_m, 0.0, 90.0) })
        .collect();
    FixtureSpec {
        origin: GeoPoint::new(STANDARD_ORIGIN.0, STANDARD_ORIGIN.1).expect("valid origin"),
        scene: Scene { buildings, occluders, target: 0, ground: [120, 120, 115], sky: [185, 205, 235] },
        poses,
        cols: opt.cols,
        rows: opt.rows,
        tile_px: opt.tile_px,
        input: EnuVec::planar(0.0, sgn * STANDARD_SETBACK_M),
    }
}

impl FixtureSpec {
    /// Provider metadata for every pose.
    pub fn metadata(&self) -> Result<Vec<PanoMetadata>, SyntheticError> {
        self.poses
            .iter()
            .map(|np| {
                let location = enu_to_geodetic(&EnuVec::planar(np.pose.position.e, np.pose.position.n), &self.origin)?;
                Ok(PanoMetadata {
                    pano_id: np.pano_id.clone(),
                    location,
                    heading_deg: np.pose.heading_deg,
                    capture_date: None,
                    tile_grid: TileGrid { cols: self.cols, rows: self.rows, tile_px: self.tile_px },
                    heading_convention: HEADING_CENTER_COLUMN.into(),
                })
            })
            .collect()
    }
}

/// In-memory provider over rendered fixture panoramas.
#[derive(Debug, Clone)]
pub struct MemoryProvider {
    metas: Vec<PanoMetadata>,
    images: BTreeMap<String, RgbImage>,
}

impl MemoryProvider {
    pub fn render(spec: &FixtureSpec) -> Result<Self, SyntheticError> {
        spec.scene.validate()?;
        let metas = spec.metadata()?;
        let images = spec
            .poses
            .iter()
            .map(|np| Ok((np.pano_id.clone(), render_pano(&spec.scene, &np.pose, spec.dims())?.as_image().clone())))
            .collect::<Result<_, SyntheticError>>()?;
        Ok(Self { metas, images })
    }
}

impl PanoProvider for MemoryProvider {
    fn list_metadata(&self, _around: &GeoPoint, _radius_m: f64) -> Result<Vec<PanoMetadata>, AcquisitionError> {
        Ok(self.metas.clone())
    }

    fn fetch_tile(&self, meta: &PanoMetadata, row: u32, col: u32) -> Result<RgbImage, AcquisitionError> {
        let img = self.images.get(&meta.pano_id).ok_or_else(|| AcquisitionError::NotFound(meta.pano_id.clone()))?;
        let g = meta.tile_grid;
        if row >= g.rows || col >= g.cols {
            return Err(AcquisitionError::TileOutsideGrid { row, col, cols: g.cols, rows: g.rows });
        }
        Ok(image::imageops::crop_imm(img, col * g.tile_px, row * g.tile_px, g.tile_px, g.tile_px).to_image())
    }
}

/// Wraps a matcher and adds isotropic Gaussian noise to every coordinate.
pub struct NoisyMatcher<M> {
    pub inner: M,
    pub sigma_px: f64,
    pub seed: u64,
}

impl<M: FeatureMatcher> FeatureMatcher for NoisyMatcher<M> {
    fn match_views(&self, a: &RectilinearView, b: &RectilinearView) -> Result<Vec<FeatureMatch>, MvgError> {
        let mut ms = self.inner.match_views(a, b)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0, self.sigma_px).map_err(|_| MvgError::InvalidParams(format!("sigma {}", self.sigma_px)))?;
        for m in &mut ms {
            for v in m.pt0.iter_mut().chain(m.pt1.iter_mut()) {
                *v += normal.sample(&mut rng);
            }
        }
        Ok(ms)
    }
}

/// Files written by [`make_fixture`].
#[derive(Debug, Clone, PartialEq)]
pub struct FixturePaths {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub annotations: PathBuf,
    pub input_jpeg: PathBuf,
}

/// A small JPEG geotagged with `p`.
pub fn geotagged_jpeg(p: &GeoPoint) -> Vec<u8> {
    let img = RgbImage::from_pixel(16, 16, Rgb([128, 128, 128]));
    let mut jpeg = Vec::new();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut jpeg, 90)
        .encode_image(&img)
        .expect("in-memory encode");
    crate::exif::write_gps_jpeg(p, false, &jpeg[2..])
}

/// Renders every pose, slices the renders into tiles and writes the manifest,
/// annotation table and geotagged input image under `out_dir`.
pub fn make_fixture(spec: &FixtureSpec, out_dir: &Path) -> Result<FixturePaths, SyntheticError> {
    spec.scene.validate()?;
    let dims = spec.dims();
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut records = Vec::with_capacity(spec.poses.len());
    for np in &spec.poses {
        let pano = render_pano(&spec.scene, &np.pose, dims)?;
        let tiles = slice_tiles(pano.as_image(), spec.tile_px).map_err(|e| io_err(out_dir, e))?;
        for ((r, c), tile) in &tiles {
            let path = tile_path(out_dir, &np.pano_id, *r, *c);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            tile.save(&path).map_err(|e| io_err(&path, e))?;
        }
        let loc = enu_to_geodetic(&EnuVec::planar(np.pose.position.e, np.pose.position.n), &spec.origin)?;
        records.push(ManifestRecord {
            pano_id: np.pano_id.clone(),
            lat: loc.lat,
            lon: loc.lon,
            heading_deg: np.pose.heading_deg,
            cols: spec.cols,
            rows: spec.rows,
            tile_px: spec.tile_px,
            heading_convention: HEADING_CENTER_COLUMN.into(),
            capture_date: None,
        });
    }
    let write = |path: PathBuf, bytes: &[u8]| -> Result<PathBuf, SyntheticError> {
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        Ok(path)
    };
    let manifest = serde_json::to_vec_pretty(&Manifest { panos: records }).expect("serializable");
    let annotations = serde_json::to_vec_pretty(&spec.annotation_table()).expect("serializable");
    Ok(FixturePaths {
        root: out_dir.to_path_buf(),
        manifest: write(out_dir.join(MANIFEST_FILE), &manifest)?,
        annotations: write(out_dir.join(ANNOTATIONS_FILE), &annotations)?,
        input_jpeg: write(out_dir.join(INPUT_FILE), &geotagged_jpeg(&spec.input_geo()?))?,
    })
}
