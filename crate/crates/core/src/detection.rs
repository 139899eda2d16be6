//! Building detection: the detector interface, its backends, and the
//! post-processing shared by the localization and extraction stages
//! (IoU, NMS, score and size filtering, center-most selection).

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::io::Read;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::projection::RectilinearView;

/// IoU above which a lower-scored detection is suppressed.
pub const DEFAULT_NMS_IOU: f64 = 0.3;
/// Score threshold for the localization stage.
pub const DEFAULT_DETECT_THRESHOLD: f64 = 0.5;
/// Score threshold for the final crops.
pub const DEFAULT_CROP_THRESHOLD: f64 = 0.8;
/// Minimum of max(width, height) for a final crop.
pub const DEFAULT_MIN_BBOX_SIDE: f64 = 200.0;

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("invalid box ({0}, {1}, {2}, {3})")]
    InvalidBox(f64, f64, f64, f64),
    #[error("no building found")]
    NoBuildingFound,
    #[error("image {0} is not registered with the oracle detector")]
    UnknownImage(String),
    #[error("no detector backend configured")]
    NoBackend,
    #[error("detector endpoint: {0}")]
    Remote(String),
    #[error("detector response: {0}")]
    BadResponse(String),
}

/// Axis-aligned box in pixel coordinates (top-left origin).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, DetectionError> {
        let ok = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite())
            && x_min < x_max
            && y_min < y_max;
        if !ok {
            return Err(DetectionError::InvalidBox(x_min, y_min, x_max, y_max));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Integer pixel rectangle `(x, y, w, h)` enclosing the box, clipped to the image.
    pub fn outward_pixels(&self, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
        let x0 = self.x_min.floor().max(0.0) as u32;
        let y0 = self.y_min.floor().max(0.0) as u32;
        let x1 = (self.x_max.ceil().max(0.0) as u32).min(width);
        let y1 = (self.y_max.ceil().max(0.0) as u32).min(height);
        (x1 > x0 && y1 > y0).then(|| (x0, y0, x1 - x0, y1 - y0))
    }

    fn lex_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        self.x_min
            .total_cmp(&other.x_min)
            .then(self.y_min.total_cmp(&other.y_min))
            .then(self.x_max.total_cmp(&other.x_max))
            .then(self.y_max.total_cmp(&other.y_max))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    #[serde(default = "building_label")]
    pub label: String,
}

fn building_label() -> String {
    "building".to_string()
}

impl Detection {
    pub fn new(bbox: BBox, score: f64) -> Self {
        Self { bbox, score: score.clamp(0.0, 1.0), label: building_label() }
    }
}

/// A building detector. Implementations must be deterministic for identical
/// input and tolerate concurrent calls.
pub trait Detector: Send + Sync {
    fn detect(&self, view: &RectilinearView) -> Result<Vec<Detection>, DetectionError>;
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

fn score_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.bbox.lex_cmp(&b.bbox))
}

/// Greedy non-maximum suppression.
pub fn nms(ds: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted: Vec<&Detection> = ds.iter().collect();
    sorted.sort_by(|a, b| score_order(a, b));
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d.clone());
        }
    }
    kept
}

pub fn filter_by_score(ds: &[Detection], min_score: f64) -> Vec<Detection> {
    ds.iter().filter(|d| d.score >= min_score).cloned().collect()
}

/// Keeps boxes whose larger side reaches `min_side` pixels.
pub fn filter_by_min_side(ds: &[Detection], min_side: f64) -> Vec<Detection> {
    ds.iter()
        .filter(|d| d.bbox.width().max(d.bbox.height()) >= min_side)
        .cloned()
        .collect()
}

/// The detection whose box center is nearest the image center.
/// Ties go to the higher score, then to the lexicographically smaller box.
pub fn select_center_bbox(
    ds: &[Detection],
    width: u32,
    height: u32,
) -> Result<Detection, DetectionError> {
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let dist = |d: &Detection| {
        let (x, y) = d.bbox.center();
        (x - cx).hypot(y - cy)
    };
    ds.iter()
        .min_by(|a, b| {
            dist(a)
                .total_cmp(&dist(b))
                .then_with(|| b.score.total_cmp(&a.score))
                .then_with(|| a.bbox.lex_cmp(&b.bbox))
        })
        .cloned()
        .ok_or(DetectionError::NoBuildingFound)
}

/// Supplies ground-truth boxes for views that are not listed verbatim.
pub trait ViewAnnotator: Send + Sync {
    /// `None` when the view's panorama is unknown to the annotator.
    fn annotate(&self, view: &RectilinearView) -> Option<Vec<BBox>>;
}

/// Ground-truth-backed detector for tests and synthetic runs.
///
/// Boxes are looked up by [`RectilinearView::image_id`] first, then through
/// the optional geometric annotator. Scores are always 1.0.
#[derive(Clone, Default)]
pub struct OracleDetector {
    table: HashMap<String, Vec<BBox>>,
    annotator: Option<Arc<dyn ViewAnnotator>>,
    jitter_px: f64,
    seed: u64,
}

impl OracleDetector {
    pub fn new(table: HashMap<String, Vec<BBox>>) -> Self {
        Self { table, ..Default::default() }
    }

    pub fn with_annotator(annotator: Arc<dyn ViewAnnotator>) -> Self {
        Self { annotator: Some(annotator), ..Default::default() }
    }

    pub fn register(&mut self, image_id: impl Into<String>, boxes: Vec<BBox>) {
        self.table.insert(image_id.into(), boxes);
    }

    /// Perturbs every box edge with Gaussian noise (truncated at 3σ). The
    /// noise is a deterministic function of `seed` and the image id.
    pub fn with_jitter(mut self, sigma_px: f64, seed: u64) -> Self {
        self.jitter_px = sigma_px;
        self.seed = seed;
        self
    }

    fn jittered(&self, id: &str, boxes: Vec<BBox>, w: f64, h: f64) -> Vec<BBox> {
        if self.jitter_px <= 0.0 {
            return boxes;
        }
        let mut hasher = DefaultHasher::new();
        id.hash(&mut hasher);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ hasher.finish());
        let mut draw = || loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 3.0 {
                return z * self.jitter_px;
            }
        };
        boxes
            .into_iter()
            .filter_map(|b| {
                let xa = (b.x_min + draw()).clamp(0.0, w);
                let ya = (b.y_min + draw()).clamp(0.0, h);
                let xb = (b.x_max + draw()).clamp(0.0, w);
                let yb = (b.y_max + draw()).clamp(0.0, h);
                BBox::new(xa.min(xb), ya.min(yb), xa.max(xb), ya.max(yb)).ok()
            })
            .collect()
    }
}

impl Detector for OracleDetector {
    fn detect(&self, view: &RectilinearView) -> Result<Vec<Detection>, DetectionError> {
        let id = view.image_id();
        let boxes = match self.table.get(&id) {
            Some(b) => b.clone(),
            None => self
                .annotator
                .as_ref()
                .and_then(|a| a.annotate(view))
                .ok_or_else(|| DetectionError::UnknownImage(id.clone()))?,
        };
        let (w, h) = view.image.dimensions();
        Ok(self
            .jittered(&id, boxes, w as f64, h as f64)
            .into_iter()
            .map(|b| Detection::new(b, 1.0))
            .collect())
    }
}

/// Geometry-only runs: every call fails.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullDetector;

impl Detector for NullDetector {
    fn detect(&self, _view: &RectilinearView) -> Result<Vec<Detection>, DetectionError> {
        Err(DetectionError::NoBackend)
    }
}

/// Response body of `POST /v1/detect`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub detections: Vec<WireDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
    pub label: String,
}

impl DetectResponse {
    /// Validates and converts wire records; boxes must lie inside the image.
    pub fn into_detections(self, width: u32, height: u32) -> Result<Vec<Detection>, DetectionError> {
        self.detections
            .into_iter()
            .map(|w| {
                if !(0.0..=1.0).contains(&w.score) {
                    return Err(DetectionError::BadResponse(format!("score {} outside [0,1]", w.score)));
                }
                let b = BBox::new(w.x_min, w.y_min, w.x_max, w.y_max)
                    .map_err(|e| DetectionError::BadResponse(e.to_string()))?;
                let eps = 1e-6;
                if b.x_min < -eps || b.y_min < -eps || b.x_max > width as f64 + eps || b.y_max > height as f64 + eps {
                    return Err(DetectionError::BadResponse(format!("box {b:?} outside image")));
                }
                Ok(Detection { bbox: b, score: w.score, label: w.label })
            })
            .collect()
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.count.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.count.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Client for the detector sidecar (`POST {endpoint}/v1/detect`, PNG body).
pub struct RemoteDetector {
    endpoint: String,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl RemoteDetector {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, max_in_flight: usize) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            in_flight: InFlight {
                count: Mutex::new(0),
                freed: Condvar::new(),
                limit: max_in_flight.max(1),
            },
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn health(&self) -> Result<(), DetectionError> {
        let url = format!("{}/v1/health", self.endpoint);
        self.agent.get(&url).call().map_err(|e| DetectionError::Remote(e.to_string()))?;
        Ok(())
    }
}

impl Detector for RemoteDetector {
    fn detect(&self, view: &RectilinearView) -> Result<Vec<Detection>, DetectionError> {
        let mut png = Vec::new();
        view.image
            .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| DetectionError::Remote(format!("encoding request: {e}")))?;
        let _slot = self.in_flight.acquire();
        let url = format!("{}/v1/detect", self.endpoint);
        let resp = self
            .agent
            .post(&url)
            .set("Content-Type", "image/png")
            .send_bytes(&png)
            .map_err(|e| DetectionError::Remote(e.to_string()))?;
        let mut body = String::new();
        resp.into_reader()
            .take(16 << 20)
            .read_to_string(&mut body)
            .map_err(|e| DetectionError::Remote(e.to_string()))?;
        let parsed: DetectResponse =
            serde_json::from_str(&body).map_err(|e| DetectionError::BadResponse(e.to_string()))?;
        let (w, h) = view.image.dimensions();
        parsed.into_detections(w, h)
    }
}
