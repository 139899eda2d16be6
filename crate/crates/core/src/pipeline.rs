//! End-to-end extraction: acquisition, front-heading views, detection,
//! two-view localization, geo-referencing, optimal re-projection and crops.

use std::path::Path;

use image::RgbImage;
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{fetch_nearby, select_sequence_with, AcquisitionError, PanoMetadata, PanoProvider, PanoSequence, Panorama, RetryPolicy};
use crate::detection::{
    filter_by_min_side, filter_by_score, nms, select_center_bbox, BBox, Detection, DetectionError, Detector, DEFAULT_CROP_THRESHOLD,
    DEFAULT_DETECT_THRESHOLD, DEFAULT_MIN_BBOX_SIDE, DEFAULT_NMS_IOU,
};
use crate::exif::{extract_gps, ExifError};
use crate::geo::{
    apply_similarity, bearing_deg, enu_to_geodetic, fit_similarity_2pt, geodetic_to_enu, wrap_180, wrap_360, EnuVec, GeoError, GeoPoint,
    Similarity2D,
};
use crate::mvg::{
    camera_center, decompose_essential, normalize_matches, pick_building_point, ransac_essential, triangulate_linear, FeatureMatch,
    FeatureMatcher, MvgError, ProjectionMatrix, RansacParams,
};
use crate::projection::{render_rectilinear_with_offset, ProjectionError, RectilinearView};

/// Threshold used for the single retry when nothing survives in RT_0.
pub const RETRY_DETECT_THRESHOLD: f64 = 0.3;
/// Match counts below this are reported as a diagnostic warning.
pub const LOW_MATCH_WARNING: usize = 30;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("step 1 (input): {0}")]
    MissingGps(#[from] ExifError),
    #[error("step 2 (acquisition): {0}")]
    Acquisition(#[from] AcquisitionError),
    #[error("step 2 (acquisition): sequence has no neighbour of PN_0")]
    NoNeighbor,
    #[error("step 3 (front-heading side): {0}")]
    Side(GeoError),
    #[error("step 3 (rendering): {0}")]
    Render(#[from] ProjectionError),
    #[error("step 4 (detection): no building detected in RT_0")]
    NoDetection,
    #[error("step 4 (detection): {0}")]
    Detector(DetectionError),
    #[error("step 5 (matching): {0}")]
    Matching(MvgError),
    #[error("step 6 (relative pose): {0}")]
    Pose(MvgError),
    #[error("step 7 (triangulation): {0}")]
    Triangulation(MvgError),
    #[error("step 8 (geo-referencing): {0}")]
    Georeference(GeoError),
    #[error("step 9 (projection direction): {0}")]
    Azimuth(GeoError),
    #[error("output: {0}")]
    Output(String),
}

impl PipelineError {
    /// Step number of the failing stage (0 for output persistence).
    pub fn step(&self) -> u8 {
        match self {
            PipelineError::MissingGps(_) => 1,
            PipelineError::Acquisition(_) | PipelineError::NoNeighbor => 2,
            PipelineError::Side(_) | PipelineError::Render(_) => 3,
            PipelineError::NoDetection | PipelineError::Detector(_) => 4,
            PipelineError::Matching(_) => 5,
            PipelineError::Pose(_) => 6,
            PipelineError::Triangulation(_) => 7,
            PipelineError::Georeference(_) => 8,
            PipelineError::Azimuth(_) => 9,
            PipelineError::Output(_) => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub n: usize,
    pub theta: f64,
    pub out_side: u32,
    pub detect_threshold: f64,
    pub crop_threshold: f64,
    pub nms_iou: f64,
    pub min_bbox_side: f64,
    pub ransac: RansacParams,
    /// Radius searched for panoramas around the input.
    pub search_radius_m: f64,
    pub spacing_warn_m: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            n: 5,
            theta: 90.0,
            out_side: 2048,
            detect_threshold: DEFAULT_DETECT_THRESHOLD,
            crop_threshold: DEFAULT_CROP_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
            min_bbox_side: DEFAULT_MIN_BBOX_SIDE,
            ransac: RansacParams::default(),
            search_radius_m: 100.0,
            spacing_warn_m: 15.0,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.theta > 0.0 && self.theta < 180.0) {
            return Err(format!("theta must be in (0, 180), got {}", self.theta));
        }
        if self.theta >= 120.0 {
            log::warn!("theta {} is at or above the recommended 120 degrees", self.theta);
        }
        if self.out_side == 0 || self.out_side % 2 != 0 {
            return Err(format!("out_side must be a positive even number, got {}", self.out_side));
        }
        for (name, v) in [("detect_threshold", self.detect_threshold), ("crop_threshold", self.crop_threshold), ("nms_iou", self.nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(self.search_radius_m > 0.0) {
            return Err(format!("search_radius_m must be positive, got {}", self.search_radius_m));
        }
        self.ransac.validate().map_err(|e| e.to_string())
    }
}

/// Right (90) or left (270) of the travel direction, whichever side the input is on.
pub fn front_heading_side(pano: &PanoMetadata, input: &GeoPoint) -> Result<f64, PipelineError> {
    let v = geodetic_to_enu(input, &pano.location).map_err(PipelineError::Side)?;
    let b = bearing_deg(&EnuVec::planar(0.0, 0.0), &v).map_err(PipelineError::Side)?;
    let delta = wrap_360(b - pano.heading_deg);
    Ok(if delta > 0.0 && delta < 180.0 { 90.0 } else { 270.0 })
}

/// Heading-relative azimuth from the panorama toward `x_g`.
pub fn optimal_azimuth(pano: &PanoMetadata, x_g: &GeoPoint) -> Result<f64, PipelineError> {
    let v = geodetic_to_enu(x_g, &pano.location).map_err(PipelineError::Azimuth)?;
    let b = bearing_deg(&EnuVec::planar(0.0, 0.0), &v).map_err(PipelineError::Azimuth)?;
    Ok(wrap_360(b - pano.heading_deg))
}

pub fn render_view(pano: &Panorama, alpha: f64, cfg: &ExtractionConfig) -> Result<RectilinearView, ProjectionError> {
    render_rectilinear_with_offset(&pano.image, &pano.meta.pano_id, alpha, pano.meta.center_offset_deg(), cfg.theta, cfg.out_side)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildingLocation {
    /// Building point in the camera-0 frame (baseline-normalized units).
    pub x_b: [f64; 3],
    pub x_g: GeoPoint,
    /// Position relative to PN_0, metres.
    pub enu: EnuVec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationDiagnostics {
    pub side_alpha_deg: f64,
    pub bbox0: BBox,
    pub bbox0_score: f64,
    /// Match counts against PN_{-1} and PN_{+1}, when present.
    pub matches_minus: Option<usize>,
    pub matches_plus: Option<usize>,
    /// Offset of the chosen neighbour (−1 or +1).
    pub chosen_neighbor: i32,
    pub inliers: usize,
    pub ransac_iterations: usize,
    pub camera_c: [f64; 3],
    pub similarity: Similarity2D,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Localization {
    pub location: BuildingLocation,
    pub diagnostics: LocalizationDiagnostics,
}

fn detect_bbox0(view: &RectilinearView, detector: &dyn Detector, cfg: &ExtractionConfig) -> Result<Detection, PipelineError> {
    let raw = detector.detect(view).map_err(PipelineError::Detector)?;
    for threshold in [cfg.detect_threshold, RETRY_DETECT_THRESHOLD.min(cfg.detect_threshold)] {
        let kept = nms(&filter_by_score(&raw, threshold), cfg.nms_iou);
        if let Ok(d) = select_center_bbox(&kept, view.side(), view.side()) {
            return Ok(d);
        }
        log::warn!("step 4: nothing above {threshold} in {}", view.image_id());
    }
    Err(PipelineError::NoDetection)
}

/// Steps 3–8: estimates the target's geodetic position from PN_0 and the
/// better-matching neighbour.
pub fn localize_building(
    seq: &PanoSequence,
    input: &GeoPoint,
    detector: &dyn Detector,
    matcher: &dyn FeatureMatcher,
    cfg: &ExtractionConfig,
) -> Result<Localization, PipelineError> {
    let pn0 = seq.center();
    let (minus, plus) = (seq.at(-1), seq.at(1));
    if minus.is_none() && plus.is_none() {
        return Err(PipelineError::NoNeighbor);
    }
    let side = front_heading_side(&pn0.meta, input)?;
    log::info!("step 3: front-heading side {side} for {}", pn0.meta.pano_id);
    let rt0 = render_view(pn0, side, cfg)?;
    let render_opt = |p: Option<&Panorama>| p.map(|p| render_view(p, side, cfg)).transpose();
    let (rt_minus, rt_plus) = (render_opt(minus)?, render_opt(plus)?);

    let det0 = detect_bbox0(&rt0, detector, cfg)?;
    log::info!("step 4: bbox_0 {:?} score {:.3}", det0.bbox, det0.score);

    let match_opt = |rt: &Option<RectilinearView>| rt.as_ref().map(|v| matcher.match_views(&rt0, v));
    let (m_minus, m_plus) = (match_opt(&rt_minus), match_opt(&rt_plus));
    let count = |m: &Option<Result<Vec<FeatureMatch>, MvgError>>| m.as_ref().and_then(|r| r.as_ref().ok()).map(Vec::len);
    let (c_minus, c_plus) = (count(&m_minus), count(&m_plus));
    log::info!("step 5: matches PN_-1 {c_minus:?}, PN_+1 {c_plus:?}");
    let (chosen, matches, pnc) = match (m_minus, m_plus) {
        (_, Some(Ok(p))) if p.len() >= c_minus.unwrap_or(0) => (1, p, plus.expect("rendered")),
        (Some(Ok(m)), _) => (-1, m, minus.expect("rendered")),
        (Some(Err(e)), _) | (_, Some(Err(e))) => return Err(PipelineError::Matching(e)),
        _ => unreachable!("at least one neighbour present"),
    };
    let mut warnings = Vec::new();
    if matches.len() < LOW_MATCH_WARNING {
        let msg = format!("only {} matches between RT_0 and PN_{chosen:+}", matches.len());
        log::warn!("step 5: {msg}");
        warnings.push(msg);
    }

    let k = rt0.intrinsics;
    let norm = normalize_matches(&matches, &k.matrix()).map_err(PipelineError::Pose)?;
    let ransac = ransac_essential(&norm, &cfg.ransac, k.f).map_err(PipelineError::Pose)?;
    let inliers: Vec<_> = ransac.inliers.iter().map(|&i| norm[i]).collect();
    let pc = decompose_essential(&ransac.e, &inliers).map_err(PipelineError::Pose)?;
    log::info!("step 6: {} inliers of {} after {} iterations", inliers.len(), norm.len(), ransac.iterations);

    let p0 = ProjectionMatrix::canonical();
    let candidates: Vec<([f64; 2], Vector3<f64>)> = ransac
        .inliers
        .iter()
        .filter_map(|&i| {
            let x = triangulate_linear(&p0, &pc, &norm[i]).ok()?;
            (x.z > 0.0 && pc.project(&x).z > 0.0).then_some((matches[i].pt0, x))
        })
        .collect();
    let x_b = pick_building_point(&candidates, &det0.bbox).map_err(PipelineError::Triangulation)?;
    log::info!("step 7: X_B = ({:.4}, {:.4}, {:.4})", x_b.x, x_b.y, x_b.z);

    let c = camera_center(&pc).map_err(PipelineError::Triangulation)?;
    let origin = pn0.meta.location;
    let enu_c = geodetic_to_enu(&pnc.meta.location, &origin).map_err(PipelineError::Georeference)?;
    let sim = fit_similarity_2pt([0.0, 0.0], [c.x, c.z], [0.0, 0.0], enu_c.to_planar()).map_err(PipelineError::Georeference)?;
    let g = apply_similarity(&sim, [x_b.x, x_b.z]);
    let enu = EnuVec::planar(g[0], g[1]);
    let x_g = enu_to_geodetic(&enu, &origin).map_err(PipelineError::Georeference)?;
    log::info!("step 8: X_G = ({:.7}, {:.7}), {:.2} m E, {:.2} m N of PN_0", x_g.lat, x_g.lon, enu.e, enu.n);

    Ok(Localization {
        location: BuildingLocation { x_b: [x_b.x, x_b.y, x_b.z], x_g, enu },
        diagnostics: LocalizationDiagnostics {
            side_alpha_deg: side,
            bbox0: det0.bbox,
            bbox0_score: det0.score,
            matches_minus: c_minus,
            matches_plus: c_plus,
            chosen_neighbor: chosen,
            inliers: inliers.len(),
            ransac_iterations: ransac.iterations,
            camera_c: [c.x, c.y, c.z],
            similarity: sim,
            warnings,
        },
    })
}

/// One re-projected view of the target.
#[derive(Debug, Clone)]
pub struct ViewResult {
    pub pano_id: String,
    /// Position in the sequence relative to PN_0.
    pub offset: i64,
    pub alpha_deg: f64,
    pub view: Option<RectilinearView>,
    pub detection: Option<Detection>,
    pub crop: Option<RgbImage>,
    pub note: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ExtractionResult {
    pub views: Vec<ViewResult>,
}

impl ExtractionResult {
    pub fn crops(&self) -> usize {
        self.views.iter().filter(|v| v.crop.is_some()).count()
    }
}

fn extract_one(pano: &Panorama, offset: i64, x_g: &GeoPoint, detector: &dyn Detector, cfg: &ExtractionConfig) -> ViewResult {
    let mut out = ViewResult {
        pano_id: pano.meta.pano_id.clone(),
        offset,
        alpha_deg: f64::NAN,
        view: None,
        detection: None,
        crop: None,
        note: None,
    };
    let alpha = match optimal_azimuth(&pano.meta, x_g) {
        Ok(a) => a,
        Err(e) => {
            out.note = Some(e.to_string());
            return out;
        }
    };
    out.alpha_deg = alpha;
    let view = match render_view(pano, alpha, cfg) {
        Ok(v) => v,
        Err(e) => {
            out.note = Some(format!("step 10: {e}"));
            return out;
        }
    };
    match detector.detect(&view) {
        Ok(raw) => {
            let kept = filter_by_min_side(&nms(&filter_by_score(&raw, cfg.crop_threshold), cfg.nms_iou), cfg.min_bbox_side);
            match select_center_bbox(&kept, view.side(), view.side()) {
                Ok(d) => {
                    if let Some((x, y, w, h)) = d.bbox.outward_pixels(view.side(), view.side()) {
                        out.crop = Some(image::imageops::crop_imm(&view.image, x, y, w, h).to_image());
                    }
                    out.detection = Some(d);
                }
                Err(_) => out.note = Some("step 11: no detection survived filtering".into()),
            }
        }
        Err(e) => out.note = Some(format!("step 11: {e}")),
    }
    out.view = Some(view);
    out
}

/// Steps 9–12: renders each panorama toward `x_g`, detects, and crops.
pub fn extract_buildings(seq: &PanoSequence, x_g: &GeoPoint, detector: &dyn Detector, cfg: &ExtractionConfig) -> ExtractionResult {
    let views: Vec<ViewResult> = seq
        .panos
        .par_iter()
        .enumerate()
        .map(|(i, p)| extract_one(p, i as i64 - seq.center_index as i64, x_g, detector, cfg))
        .collect();
    for v in &views {
        match &v.detection {
            Some(d) => log::info!("step 12: {} alpha {:.2} bbox {:?}", v.pano_id, v.alpha_deg, d.bbox),
            None => log::info!("step 12: {} alpha {:.2} absent ({})", v.pano_id, v.alpha_deg, v.note.as_deref().unwrap_or("")),
        }
    }
    ExtractionResult { views }
}

/// Where the run starts from.
#[derive(Debug, Clone)]
pub enum RunInput {
    Jpeg(Vec<u8>),
    Point(GeoPoint),
}

impl RunInput {
    pub fn location(&self) -> Result<GeoPoint, PipelineError> {
        match self {
            RunInput::Jpeg(bytes) => Ok(extract_gps(bytes)?),
            RunInput::Point(p) => Ok(*p),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub input: GeoPoint,
    pub sequence_ids: Vec<String>,
    pub center_index: usize,
    pub sequence_warnings: Vec<String>,
    pub localization: Localization,
    pub extraction: ExtractionResult,
}

/// Steps 1–8 only.
pub fn localize(
    input: &RunInput,
    provider: &dyn PanoProvider,
    detector: &dyn Detector,
    matcher: &dyn FeatureMatcher,
    cfg: &ExtractionConfig,
    policy: &RetryPolicy,
) -> Result<(GeoPoint, PanoSequence, Vec<String>, Localization), PipelineError> {
    cfg.validate().map_err(PipelineError::Output)?;
    let input = input.location()?;
    log::info!("step 1: input ({:.7}, {:.7})", input.lat, input.lon);
    let metas = fetch_nearby(provider, &input, cfg.search_radius_m)?;
    let plan = select_sequence_with(&metas, &input, cfg.n, cfg.spacing_warn_m)?;
    log::info!("step 2: {} panoramas, PN_0 = {}", plan.metas.len(), plan.metas[plan.center_index].pano_id);
    let seq = plan.download(provider, policy)?;
    let loc = localize_building(&seq, &input, detector, matcher, cfg)?;
    Ok((input, seq, plan.warnings, loc))
}

/// The full Steps 1–12 run.
pub fn run(
    input: &RunInput,
    provider: &dyn PanoProvider,
    detector: &dyn Detector,
    matcher: &dyn FeatureMatcher,
    cfg: &ExtractionConfig,
    policy: &RetryPolicy,
) -> Result<RunOutput, PipelineError> {
    let (input, seq, warnings, localization) = localize(input, provider, detector, matcher, cfg, policy)?;
    let extraction = extract_buildings(&seq, &localization.location.x_g, detector, cfg);
    Ok(RunOutput {
        input,
        sequence_ids: seq.panos.iter().map(|p| p.meta.pano_id.clone()).collect(),
        center_index: seq.center_index,
        sequence_warnings: warnings,
        localization,
        extraction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl From<GeoPoint> for LatLon {
    fn from(p: GeoPoint) -> Self {
        Self { lat: p.lat, lon: p.lon }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestView {
    pub pano_id: String,
    pub offset: i64,
    pub alpha_deg: Option<f64>,
    pub bbox: Option<BBox>,
    pub score: Option<f64>,
    pub crop_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub input: LatLon,
    pub x_g: LatLon,
    pub views: Vec<ManifestView>,
    pub diagnostics: serde_json::Value,
}

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

pub fn crop_file_name(pano_id: &str, alpha: f64) -> String {
    format!("{pano_id}_{alpha:.4}.png")
}

/// Writes crops and the run manifest; crop paths are relative to `out_dir`.
pub fn write_outputs(out: &RunOutput, out_dir: &Path) -> Result<RunManifest, PipelineError> {
    let err = |p: &Path, e: &dyn std::fmt::Display| PipelineError::Output(format!("{}: {e}", p.display()));
    std::fs::create_dir_all(out_dir).map_err(|e| err(out_dir, &e))?;
    let mut views = Vec::new();
    for v in &out.extraction.views {
        let crop_path = match &v.crop {
            Some(c) => {
                let name = crop_file_name(&v.pano_id, v.alpha_deg);
                let path = out_dir.join(&name);
                c.save(&path).map_err(|e| err(&path, &e))?;
                Some(name)
            }
            None => None,
        };
        views.push(ManifestView {
            pano_id: v.pano_id.clone(),
            offset: v.offset,
            alpha_deg: v.alpha_deg.is_finite().then_some(v.alpha_deg),
            bbox: v.detection.as_ref().map(|d| d.bbox),
            score: v.detection.as_ref().map(|d| d.score),
            crop_path,
            note: v.note.clone(),
        });
    }
    let d = &out.localization.diagnostics;
    let side_check = views
        .iter()
        .find(|v| v.offset == 0)
        .and_then(|v| v.alpha_deg)
        .map(|a| wrap_180(a - d.side_alpha_deg).abs());
    let diagnostics = serde_json::json!({
        "sequence": out.sequence_ids,
        "center_index": out.center_index,
        "sequence_warnings": out.sequence_warnings,
        "localization": d,
        "x_b": out.localization.location.x_b,
        "enu": out.localization.location.enu,
        "pn0_alpha_minus_side_deg": side_check,
        "crops": out.extraction.crops(),
    });
    let manifest = RunManifest { input: out.input.into(), x_g: out.localization.location.x_g.into(), views, diagnostics };
    let path = out_dir.join(RUN_MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("serializable");
    std::fs::write(&path, text).map_err(|e| err(&path, &e))?;
    Ok(manifest)
}
