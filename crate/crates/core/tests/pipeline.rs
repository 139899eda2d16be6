use std::sync::{Arc, OnceLock};

use panoview::acquisition::{fetch_nearby, select_sequence, PanoSequence, RetryPolicy};
use panoview::detection::{Detection, DetectionError, Detector, OracleDetector};
use panoview::geo::{enu_to_geodetic, geodetic_to_enu, wrap_180, EnuVec, GeoPoint};
use panoview::geo::apply_similarity;
use panoview::pipeline::{
    extract_buildings, front_heading_side, localize_building, optimal_azimuth, run, write_outputs, ExtractionConfig, PipelineError,
    RunInput, RUN_MANIFEST_FILE,
};
use panoview::projection::RectilinearView;
use panoview::synthetic::{
    geotagged_jpeg, standard_fixture, FixtureSpec, MemoryProvider, NoisyMatcher, OracleMatcher, SceneOracle, StandardOptions,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Setup {
    spec: FixtureSpec,
    provider: MemoryProvider,
    oracle: Arc<SceneOracle>,
}

impl Setup {
    fn new(south: bool, occluder: bool) -> Self {
        let spec = standard_fixture(StandardOptions { south, occluder, cols: 8, rows: 4, tile_px: 128, ..Default::default() });
        let provider = MemoryProvider::render(&spec).unwrap();
        let oracle = Arc::new(SceneOracle::new(spec.annotation_table()));
        Self { spec, provider, oracle }
    }

    fn detector(&self) -> OracleDetector {
        OracleDetector::with_annotator(self.oracle.clone())
    }

    fn matcher(&self) -> OracleMatcher {
        OracleMatcher { oracle: self.oracle.clone() }
    }

    fn sequence(&self) -> PanoSequence {
        let input = self.spec.input_geo().unwrap();
        let metas = fetch_nearby(&self.provider, &input, 100.0).unwrap();
        select_sequence(&metas, &input, 5).unwrap().download(&self.provider, &RetryPolicy::default()).unwrap()
    }
}

fn north() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| Setup::new(false, false))
}

fn cfg() -> ExtractionConfig {
    ExtractionConfig { out_side: 512, min_bbox_side: 50.0, ..Default::default() }
}

fn dist_m(a: &GeoPoint, b: &GeoPoint) -> f64 {
    geodetic_to_enu(a, b).unwrap().planar_norm()
}

#[test]
fn localizes_north_building() {
    let s = north();
    let seq = s.sequence();
    let input = s.spec.input_geo().unwrap();
    let loc = localize_building(&seq, &input, &s.detector(), &s.matcher(), &cfg()).unwrap();
    let truth = s.spec.target_geo().unwrap();
    let err = dist_m(&loc.location.x_g, &truth);
    assert!(err < 0.25, "closure error {err} m");
    assert_eq!(loc.diagnostics.side_alpha_deg, 270.0);

    // the similarity sends camera 0 to PN_0 exactly
    let o = apply_similarity(&loc.diagnostics.similarity, [0.0, 0.0]);
    assert!(o[0].hypot(o[1]) <= 1e-9);

    let back = enu_to_geodetic(&loc.location.enu, &seq.center().meta.location).unwrap();
    assert!(dist_m(&back, &loc.location.x_g) < 1e-6);
}

#[test]
fn localizes_south_building() {
    let s = Setup::new(true, false);
    let seq = s.sequence();
    let input = s.spec.input_geo().unwrap();
    assert_eq!(front_heading_side(&seq.center().meta, &input).unwrap(), 90.0);
    let loc = localize_building(&seq, &input, &s.detector(), &s.matcher(), &cfg()).unwrap();
    assert!(dist_m(&loc.location.x_g, &s.spec.target_geo().unwrap()) < 1.0);
    assert_eq!(loc.diagnostics.side_alpha_deg, 90.0);
}

#[test]
fn side_and_azimuth_agree() {
    let s = north();
    let seq = s.sequence();
    let input = s.spec.input_geo().unwrap();
    let loc = localize_building(&seq, &input, &s.detector(), &s.matcher(), &cfg()).unwrap();
    let pn0 = &seq.center().meta;
    let a = optimal_azimuth(pn0, &loc.location.x_g).unwrap();
    let side = front_heading_side(pn0, &input).unwrap();
    assert!(wrap_180(a - side).abs() <= 45.0);
}

#[test]
fn single_panorama_needs_neighbour() {
    let s = north();
    let mut seq = s.sequence();
    let c = seq.center_index;
    seq.panos = vec![seq.panos[c].clone()];
    seq.center_index = 0;
    let err = localize_building(&seq, &s.spec.input_geo().unwrap(), &s.detector(), &s.matcher(), &cfg()).unwrap_err();
    assert!(matches!(err, PipelineError::NoNeighbor));
    assert_eq!(err.step(), 2);
}

#[test]
fn pano_gps_noise_moves_estimate_little() {
    let s = north();
    let seq = s.sequence();
    let input = s.spec.input_geo().unwrap();
    let base = localize_building(&seq, &input, &s.detector(), &s.matcher(), &cfg()).unwrap().location.x_g;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut total = 0.0;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noisy = seq.clone();
        for p in &mut noisy.panos {
            let d = EnuVec::planar(normal.sample(&mut rng), normal.sample(&mut rng));
            p.meta.location = enu_to_geodetic(&d, &p.meta.location).unwrap();
        }
        let loc = localize_building(&noisy, &input, &s.detector(), &s.matcher(), &cfg()).unwrap();
        total += dist_m(&loc.location.x_g, &base);
    }
    let mean = total / 50.0;
    assert!(mean < 3.0, "mean displacement {mean} m");
}

#[test]
fn half_pixel_match_noise() {
    let s = north();
    let seq = s.sequence();
    let input = s.spec.input_geo().unwrap();
    let truth = s.spec.target_geo().unwrap();
    let mut errs: Vec<f64> = (0..100)
        .map(|seed| {
            let m = NoisyMatcher { inner: s.matcher(), sigma_px: 0.5, seed };
            let loc = localize_building(&seq, &input, &s.detector(), &m, &cfg()).unwrap();
            dist_m(&loc.location.x_g, &truth)
        })
        .collect();
    errs.sort_by(f64::total_cmp);
    assert!(errs[49] < 1.0, "median error {} m", errs[49]);
    assert!(errs[94] < 2.5, "95th percentile error {} m", errs[94]);
}

#[test]
fn extraction_centres_every_view() {
    let s = north();
    let seq = s.sequence();
    let c = cfg();
    let loc = localize_building(&seq, &s.spec.input_geo().unwrap(), &s.detector(), &s.matcher(), &c).unwrap();
    let res = extract_buildings(&seq, &loc.location.x_g, &s.detector(), &c);
    assert_eq!(res.views.len(), 11);
    assert_eq!(res.crops(), 11);
    for (i, v) in res.views.iter().enumerate() {
        assert_eq!(v.offset, i as i64 - 5);
        let (cx, _) = v.detection.as_ref().unwrap().bbox.center();
        let dev = (cx - c.out_side as f64 / 2.0).abs() / c.out_side as f64;
        assert!(dev < 0.02, "{}: centre off by {dev}", v.pano_id);
    }
}

#[test]
fn occluded_view_is_absent() {
    let s = Setup::new(false, true);
    let seq = s.sequence();
    let c = cfg();
    let loc = localize_building(&seq, &s.spec.input_geo().unwrap(), &s.detector(), &s.matcher(), &c).unwrap();
    let res = extract_buildings(&seq, &loc.location.x_g, &s.detector(), &c);
    for v in &res.views {
        assert_eq!(v.crop.is_none(), v.pano_id == "pano_+03", "{}", v.pano_id);
    }
}

struct Blind;

impl Detector for Blind {
    fn detect(&self, _view: &RectilinearView) -> Result<Vec<Detection>, DetectionError> {
        Ok(Vec::new())
    }
}

#[test]
fn blind_detector_gives_empty_extraction() {
    let s = north();
    let seq = s.sequence();
    let res = extract_buildings(&seq, &s.spec.target_geo().unwrap(), &Blind, &cfg());
    assert_eq!(res.views.len(), 11);
    assert_eq!(res.crops(), 0);
    let err = localize_building(&seq, &s.spec.input_geo().unwrap(), &Blind, &s.matcher(), &cfg()).unwrap_err();
    assert!(matches!(err, PipelineError::NoDetection));
}

#[test]
fn jpeg_and_point_inputs_agree() {
    let s = north();
    let input = s.spec.input_geo().unwrap();
    let policy = RetryPolicy::default();
    let a = run(&RunInput::Jpeg(geotagged_jpeg(&input)), &s.provider, &s.detector(), &s.matcher(), &cfg(), &policy).unwrap();
    let b = run(&RunInput::Point(a.input), &s.provider, &s.detector(), &s.matcher(), &cfg(), &policy).unwrap();
    assert!(a.extraction.crops() >= 9);
    assert_eq!(a.localization, b.localization);

    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = write_outputs(&a, da.path()).unwrap();
    let mb = write_outputs(&b, db.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(
        std::fs::read(da.path().join(RUN_MANIFEST_FILE)).unwrap(),
        std::fs::read(db.path().join(RUN_MANIFEST_FILE)).unwrap()
    );
    for v in &ma.views {
        let p = v.crop_path.as_ref().unwrap();
        assert_eq!(std::fs::read(da.path().join(p)).unwrap(), std::fs::read(db.path().join(p)).unwrap());
    }
}

struct Offline;

impl panoview::acquisition::PanoProvider for Offline {
    fn list_metadata(
        &self,
        _: &GeoPoint,
        _: f64,
    ) -> Result<Vec<panoview::acquisition::PanoMetadata>, panoview::acquisition::AcquisitionError> {
        panic!("network touched before the GPS check")
    }

    fn fetch_tile(
        &self,
        _: &panoview::acquisition::PanoMetadata,
        _: u32,
        _: u32,
    ) -> Result<image::RgbImage, panoview::acquisition::AcquisitionError> {
        panic!("network touched before the GPS check")
    }
}

#[test]
fn missing_gps_fails_before_network() {
    let s = north();
    let mut jpeg = Vec::new();
    image::codecs::jpeg::JpegEncoder::new(&mut jpeg).encode_image(&image::RgbImage::new(8, 8)).unwrap();
    let err = run(&RunInput::Jpeg(jpeg), &Offline, &s.detector(), &s.matcher(), &cfg(), &RetryPolicy::default()).unwrap_err();
    assert!(matches!(err, PipelineError::MissingGps(_)));
    assert_eq!(err.step(), 1);
}
