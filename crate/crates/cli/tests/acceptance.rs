//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use nalgebra::{Vector3, Vector4};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use panoview::acquisition::{fetch_nearby, select_sequence, slice_tiles, stitch_tiles, RetryPolicy, TileGrid};
use panoview::detection::{BBox, Detector, OracleDetector, RemoteDetector};
use panoview::evaluation::{average_precision, count_nt, match_detections_to_gt, op_metric, pr_curve, EvalCounts, GroundTruthSet, Labeled, ScoredBox};
use panoview::exif::extract_gps;
use panoview::geo::{apply_similarity, fit_similarity_2pt, geodetic_to_enu, Similarity2D};
use panoview::mvg::{
    camera_center, decompose_essential, direction_angle_deg, ransac_essential, rotation_angle_deg, triangulate_linear, BriefMatcher,
    NormalizedMatch, ProjectionMatrix, RansacParams,
};
use panoview::pipeline::{extract_buildings, localize_building, ExtractionConfig};
use panoview::projection::{dir_to_pano_pixel, pano_pixel_to_dir, render_rectilinear, EquirectImage, Intrinsics, PanoDims, RectilinearView};
use panoview::synthetic::{random_rotation, standard_fixture, MemoryProvider, OracleMatcher, SceneOracle, StandardOptions, TwoViewProblem};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(t: Duration, limit: Duration) -> Result<(), String> {
    check(t < limit, || format!("took {t:?}, limit {limit:?}"))
}

fn c1_op() -> Outcome {
    let t = Instant::now();
    let n_t = count_nt(&EvalCounts { n_b: 50, n: 5, m: vec![3], ..Default::default() }).map_err(|e| e.to_string())?;
    let op = op_metric(426, n_t, 39).map_err(|e| e.to_string())?;
    let el = t.elapsed();
    check(n_t == 547, || format!("N_t = {n_t}"))?;
    check((op - 0.8386).abs() <= 0.0005, || format!("OP = {op}"))?;
    within_time(el, Duration::from_millis(1))?;
    Ok(format!("OP = {op:.4}, N_t = {n_t}, {el:?}"))
}

fn c2_stitch() -> Outcome {
    let grid = TileGrid { cols: 26, rows: 13, tile_px: 512 };
    let tiles: BTreeMap<_, _> = (0..grid.rows)
        .flat_map(|r| (0..grid.cols).map(move |c| ((r, c), RgbImage::from_fn(512, 512, |x, y| Rgb([(x ^ c) as u8, (y ^ r) as u8, (x + 3 * y + 7 * c + 11 * r) as u8])))))
        .collect();
    let t = Instant::now();
    let img = stitch_tiles(&tiles, grid).map_err(|e| e.to_string())?;
    let back = slice_tiles(&img, 512).map_err(|e| e.to_string())?;
    let el = t.elapsed();
    check(img.dimensions() == (13_312, 6_656), || format!("stitched {:?}", img.dimensions()))?;
    check(back == tiles, || "slice-back differs".into())?;
    within_time(el, Duration::from_secs(2))?;
    Ok(format!("13312x6656, bit-exact round trip, {el:?}"))
}

fn c3_projection() -> Outcome {
    let t = Instant::now();
    let dims = PanoDims { width: 4096, height: 2048 };
    let pano = EquirectImage::new(RgbImage::from_pixel(4096, 2048, Rgb([0, 0, 0]))).map_err(|e| e.to_string())?;
    let mut worst_span = 0.0f64;
    for theta in [60.0, 90.0, 120.0] {
        let v = render_rectilinear(&pano, "p", 30.0, theta, 2048).map_err(|e| e.to_string())?;
        let (l, r) = (v.pixel_dir(0.0, 1024.0).to_ray(), v.pixel_dir(2048.0, 1024.0).to_ray());
        let span = l.angle(&r).to_degrees();
        worst_span = worst_span.max((span - theta).abs());
    }
    check(worst_span <= 1e-6, || format!("span error {worst_span}°"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_rt = 0.0f64;
    for _ in 0..100_000 {
        let (u, v) = (rng.gen_range(0.0..4096.0), rng.gen_range(0.0..2048.0));
        let d = pano_pixel_to_dir(dims, u, v).map_err(|e| e.to_string())?;
        let (u2, v2) = dir_to_pano_pixel(dims, d);
        let du = (u2 - u).abs().min(4096.0 - (u2 - u).abs());
        worst_rt = worst_rt.max(du.hypot(v2 - v));
    }
    check(worst_rt <= 1e-9, || format!("round trip {worst_rt} px"))?;

    // 6x6 marker centred on a pixel corner at the horizon (integer pano coordinates are pixel centres)
    let cu = 1404i64;
    let alpha = pano_pixel_to_dir(dims, cu as f64 - 0.5, 1023.5).map_err(|e| e.to_string())?.psi;
    let mut img = RgbImage::from_pixel(4096, 2048, Rgb([0, 0, 0]));
    for v in 1021..1027u32 {
        for u in cu - 3..cu + 3 {
            img.put_pixel(u as u32, v, Rgb([255, 255, 255]));
        }
    }
    let view = render_rectilinear(&EquirectImage::new(img).map_err(|e| e.to_string())?, "m", alpha, 90.0, 2048).map_err(|e| e.to_string())?;
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for (x, y, p) in view.image.enumerate_pixels() {
        let w = p.0[0] as f64;
        sx += w * (x as f64 + 0.5);
        sy += w * (y as f64 + 0.5);
        sw += w;
    }
    let off = (sx / sw - 1024.0).hypot(sy / sw - 1024.0);
    check(off <= 1.0, || format!("marker centroid {off} px from centre"))?;
    let el = t.elapsed();
    within_time(el, Duration::from_secs(10))?;
    Ok(format!("span err {worst_span:.1e}°, round trip {worst_rt:.1e} px, marker {off:.3} px, {el:?}"))
}

fn c4_five_point() -> Outcome {
    let mut worst = (0.0f64, 0.0f64, 1.0f64, Duration::ZERO);
    for seed in 0..20u64 {
        let p = TwoViewProblem::generate(1000 + seed, 200, 0.4, 0.0, 1024.0);
        let t = Instant::now();
        let res = ransac_essential(&p.matches, &RansacParams { rng_seed: seed, ..Default::default() }, p.f).map_err(|e| format!("seed {seed}: {e}"))?;
        let inl: Vec<NormalizedMatch> = res.inliers.iter().map(|&i| p.matches[i]).collect();
        let pc = decompose_essential(&res.e, &inl).map_err(|e| format!("seed {seed}: {e}"))?;
        let el = t.elapsed();
        let r_err = rotation_angle_deg(&pc.m(), &p.r);
        let t_err = direction_angle_deg(&pc.p4(), &p.t);
        let truth = p.is_outlier.iter().filter(|o| !**o).count();
        let recall = res.inliers.iter().filter(|&&i| !p.is_outlier[i]).count() as f64 / truth as f64;
        let admitted = res.inliers.iter().filter(|&&i| p.is_outlier[i]).count();
        check(r_err < 0.1, || format!("seed {seed}: rotation error {r_err}°"))?;
        check(t_err < 0.5, || format!("seed {seed}: translation error {t_err}°"))?;
        check(recall >= 0.95, || format!("seed {seed}: recall {recall}"))?;
        check(admitted == 0, || format!("seed {seed}: {admitted} outliers admitted"))?;
        within_time(el, Duration::from_secs(1))?;
        worst = (worst.0.max(r_err), worst.1.max(t_err), worst.2.min(recall), worst.3.max(el));
    }
    Ok(format!("20 trials: max R err {:.1e}°, max t err {:.1e}°, min recall {:.3}, 0 outliers, slowest {:?}", worst.0, worst.1, worst.2, worst.3))
}

fn c5_triangulation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = 1024.0;
    let r = random_rotation(&mut rng, 10.0);
    let t = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-0.2..0.2), rng.gen_range(-0.3..0.3)).normalize();
    let p0 = ProjectionMatrix::canonical();
    let pc = ProjectionMatrix::from_rt(&r, &t);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = Vector3::new(rng.gen_range(-4.0..4.0), rng.gen_range(-3.0..3.0), rng.gen_range(4.0..30.0));
        let (a, b) = (p0.project(&x), pc.project(&x));
        let m = NormalizedMatch::new([a.x / a.z, a.y / a.z], [b.x / b.z, b.y / b.z]);
        let xt = triangulate_linear(&p0, &pc, &m).map_err(|e| e.to_string())?;
        for (p, obs) in [(&p0, m.x0), (&pc, m.xc)] {
            let q = p.project(&xt);
            worst = worst.max(f * (q.x / q.z - obs.x / obs.z).hypot(q.y / q.z - obs.y / obs.z));
        }
    }
    check(worst < 1e-6, || format!("reprojection error {worst} px"))?;
    let c = camera_center(&pc).map_err(|e| e.to_string())?;
    let null = (pc.0 * Vector4::new(c.x, c.y, c.z, 1.0)).norm();
    check(null <= 1e-10, || format!("|P(C,1)| = {null}"))?;
    Ok(format!("max reprojection {worst:.1e} px, |P(C,1)| = {null:.1e}"))
}

fn c6_similarity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut ctrl, mut param) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let truth = Similarity2D {
            scale: rng.gen_range(0.5..20.0),
            rotation_deg: rng.gen_range(-179.0..179.0),
            translation: [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)],
        };
        let a0 = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
        let a1 = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
        let (b0, b1) = (apply_similarity(&truth, a0), apply_similarity(&truth, a1));
        let s = fit_similarity_2pt(a0, a1, b0, b1).map_err(|e| e.to_string())?;
        for (a, b) in [(a0, b0), (a1, b1)] {
            let m = apply_similarity(&s, a);
            ctrl = ctrl.max((m[0] - b[0]).hypot(m[1] - b[1]));
        }
        param = param
            .max((s.scale - truth.scale).abs())
            .max((s.rotation_deg - truth.rotation_deg).abs())
            .max((s.translation[0] - truth.translation[0]).abs())
            .max((s.translation[1] - truth.translation[1]).abs());
    }
    check(ctrl <= 1e-12, || format!("control point error {ctrl} m"))?;
    check(param <= 1e-12, || format!("parameter error {param}"))?;
    Ok(format!("1000 trials: control {ctrl:.1e} m, parameters {param:.1e}"))
}

fn c7_end_to_end() -> Outcome {
    let t = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    pool.install(|| {
        let spec = standard_fixture(StandardOptions::default());
        let provider = MemoryProvider::render(&spec).map_err(|e| e.to_string())?;
        let oracle = Arc::new(SceneOracle::new(spec.annotation_table()));
        let detector = OracleDetector::with_annotator(oracle.clone());
        let input = spec.input_geo().map_err(|e| e.to_string())?;
        let truth = spec.target_geo().map_err(|e| e.to_string())?;
        let metas = fetch_nearby(&provider, &input, 100.0).map_err(|e| e.to_string())?;
        let seq = select_sequence(&metas, &input, 5)
            .and_then(|p| p.download(&provider, &RetryPolicy::default()))
            .map_err(|e| e.to_string())?;
        let cfg = ExtractionConfig::default();
        let dist = |loc: &panoview::pipeline::Localization| geodetic_to_enu(&loc.location.x_g, &truth).map(|v| v.planar_norm()).unwrap_or(f64::INFINITY);

        let loc = localize_building(&seq, &input, &detector, &OracleMatcher { oracle: oracle.clone() }, &cfg).map_err(|e| e.to_string())?;
        let err_oracle = dist(&loc);
        check(err_oracle <= 1.0, || format!("oracle matches: X_G off by {err_oracle} m"))?;

        let res = extract_buildings(&seq, &loc.location.x_g, &detector, &cfg);
        check(res.views.len() == 11, || format!("{} views", res.views.len()))?;
        let mut worst = 0.0f64;
        for v in &res.views {
            let d = v.detection.as_ref().ok_or_else(|| format!("{}: no detection", v.pano_id))?;
            worst = worst.max((d.bbox.center().0 - cfg.out_side as f64 / 2.0).abs() / cfg.out_side as f64);
        }
        check(worst < 0.02, || format!("bbox centre off by {:.2}% of width", worst * 100.0))?;

        let loc = localize_building(&seq, &input, &detector, &BriefMatcher::default(), &cfg).map_err(|e| e.to_string())?;
        let err_real = dist(&loc);
        check(err_real <= 2.5, || format!("feature matcher: X_G off by {err_real} m"))?;
        let el = t.elapsed();
        within_time(el, Duration::from_secs(180))?;
        Ok(format!(
            "X_G err {err_oracle:.3} m (oracle matches), {err_real:.3} m (feature matcher, {} inliers), 11/11 views, max centre offset {:.2}%, {el:?} on 1 thread",
            loc.diagnostics.inliers,
            worst * 100.0
        ))
    })
}

/// Exact all-points interpolated AP of a ranked TP/FP sequence.
fn ap_oracle(seq: &[bool], total_gt: i64) -> Ratio<i64> {
    let mut pts = Vec::new();
    let mut tp = 0;
    for (i, &t) in seq.iter().enumerate() {
        tp += i64::from(t);
        pts.push((Ratio::new(tp, total_gt), Ratio::new(tp, i as i64 + 1)));
    }
    let mut ap = Ratio::from_integer(0);
    let mut prev = Ratio::from_integer(0);
    for (k, &(r, _)) in pts.iter().enumerate() {
        if r > prev {
            let best = pts[k..].iter().map(|p| p.1).max().unwrap();
            ap += (r - prev) * best;
            prev = r;
        }
    }
    ap
}

fn c8_ap() -> Outcome {
    let gt_box = |i: usize| BBox::new(100.0 * i as f64, 0.0, 100.0 * i as f64 + 50.0, 50.0).unwrap();
    let gt = GroundTruthSet { images: [("img".to_string(), vec![gt_box(0), gt_box(1)])].into_iter().collect() };
    let mut sets = 0;
    let mut worst = 0.0f64;
    for len in 1..=6u32 {
        for code in 0..3usize.pow(len) {
            // each detection hits ground truth 0, 1, or background (2)
            let targets: Vec<usize> = (0..len).map(|k| code / 3usize.pow(k) % 3).collect();
            let dets: Vec<ScoredBox> = targets
                .iter()
                .enumerate()
                .map(|(k, &g)| ScoredBox { image_id: "img".into(), bbox: if g < 2 { gt_box(g) } else { gt_box(5) }, score: 1.0 - 0.1 * k as f64 })
                .collect();
            let mut seen = [false; 2];
            let expect: Vec<bool> = targets
                .iter()
                .map(|&g| g < 2 && !std::mem::replace(&mut seen[g], true))
                .collect();
            let labels = match_detections_to_gt(&dets, &gt, 0.5);
            check(labels.iter().map(|l| l.tp).eq(expect.iter().copied()), || format!("matching differs for {targets:?}"))?;
            let ap = if expect.iter().any(|&t| t) {
                average_precision(&pr_curve(&labels, 2).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?
            } else {
                0.0
            };
            let o = ap_oracle(&expect, 2);
            let o = *o.numer() as f64 / *o.denom() as f64;
            worst = worst.max((ap - o).abs());
            sets += 1;
        }
    }
    check(worst <= 1e-12, || format!("max deviation from oracle {worst}"))?;
    let hand: Vec<Labeled> = [true, false, true].iter().enumerate().map(|(i, &tp)| Labeled { score: 1.0 - 0.1 * i as f64, tp }).collect();
    let ap = average_precision(&pr_curve(&hand, 2).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    check((ap - 0.8333).abs() <= 1e-4 && (ap - 5.0 / 6.0).abs() <= 1e-9, || format!("[TP,FP,TP] AP = {ap}"))?;
    Ok(format!("{sets} enumerated sets, max deviation {worst:.1e}; [TP,FP,TP] = {ap:.10}"))
}

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn c9_exif() -> Outcome {
    let mut worst = 0.0f64;
    let seeds: Vec<Vec<u8>> = ["gps_le.jpg", "gps_be.jpg", "no_gps.jpg"].iter().map(|n| std::fs::read(fixture_dir().join(n)).unwrap()).collect();
    for b in &seeds[..2] {
        let p = extract_gps(b).map_err(|e| e.to_string())?;
        worst = worst.max((p.lat - 28.08).abs()).max((p.lon + 96.99).abs());
    }
    check(worst <= 1e-7, || format!("coordinate error {worst}°"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut slowest = Duration::ZERO;
    for _ in 0..100_000 {
        let mut b = seeds[rng.gen_range(0..3)].clone();
        for _ in 0..rng.gen_range(1..=4) {
            if b.is_empty() {
                break;
            }
            let i = rng.gen_range(0..b.len());
            match rng.gen_range(0..4) {
                0 => b[i] = rng.gen(),
                1 => b.truncate(i),
                2 => b.insert(i, rng.gen()),
                _ => {
                    let end = (i + 4).min(b.len());
                    b[i..end].fill(0xff)
                }
            }
        }
        let t = Instant::now();
        let r = std::panic::catch_unwind(|| extract_gps(&b).map(|p| p.lat.is_finite() && p.lon.is_finite()));
        slowest = slowest.max(t.elapsed());
        match r {
            Err(_) => return Err("parser panicked".into()),
            Ok(Ok(false)) => return Err("non-finite coordinate".into()),
            Ok(_) => {}
        }
    }
    check(slowest < Duration::from_millis(100), || format!("slowest parse {slowest:?}"))?;
    Ok(format!("max error {worst:.1e}°, 100000 mutations without crash, slowest {slowest:?}"))
}

fn panoview_bin(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_panoview")).args(args).env_remove("PANOVIEW_DETECTOR_URL").output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("panoview {}: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(out)
}

fn c10_determinism() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let fx = dir.path().join("fixture");
    panoview_bin(&["simulate", "--out", &s(&fx)])?;
    let run = |name: &str| -> Result<PathBuf, String> {
        let out = dir.path().join(name);
        panoview_bin(&["extract", "--input", &s(&fx.join("input.jpg")), "--config", &s(&fx.join("run.toml")), "--seed", "42", "--out", &s(&out)])?;
        Ok(out)
    };
    let (a, b) = (run("a")?, run("b")?);
    let list = |d: &Path| -> Vec<_> {
        let mut v: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
        v.sort();
        v
    };
    check(list(&a) == list(&b), || "different file sets".into())?;
    let files = list(&a);
    check(files.len() >= 2, || "no crops written".into())?;
    for f in &files {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        check(x == y, || format!("{f:?} differs"))?;
    }
    Ok(format!("{} files bit-identical across two runs, {:?}", files.len(), t.elapsed()))
}

fn c11_remote_contract() -> Outcome {
    let schema_text = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../schema/detect_response.schema.json"))
        .map_err(|e| e.to_string())?;
    let schema = jsonschema::JSONSchema::compile(&serde_json::from_str(&schema_text).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let recorded = std::fs::read_to_string(fixture_dir().join("detect_response.json")).map_err(|e| e.to_string())?;
    let value: serde_json::Value = serde_json::from_str(&recorded).map_err(|e| e.to_string())?;
    check(schema.is_valid(&value), || "recorded response violates schema".into())?;
    let body = recorded.clone();
    let url = common::serve(move |req| match req.path.as_str() {
        "/v1/health" => common::Response::json(200, r#"{"status":"ok"}"#),
        "/v1/detect" if image::load_from_memory(&req.body).is_ok() => common::Response::json(200, body.clone()),
        _ => common::Response::json(400, r#"{"error":"undecodable image"}"#),
    });
    let det = RemoteDetector::new(url, Duration::from_secs(5), 2);
    det.health().map_err(|e| e.to_string())?;
    let view = RectilinearView {
        image: RgbImage::new(512, 512),
        alpha_deg: 90.0,
        fov_deg: 90.0,
        intrinsics: Intrinsics::from_fov(90.0, 512).map_err(|e| e.to_string())?,
        pano_id: "p".into(),
    };
    let ds = det.detect(&view).map_err(|e| e.to_string())?;
    check(ds.len() == 3, || format!("{} detections", ds.len()))?;
    Ok("recorded response schema-valid; RemoteDetector parsed 3 detections from the stub (sidecar itself not built)".into())
}

fn main() {
    let criteria: [(&str, &str, fn() -> Outcome); 11] = [
        ("1", "OP reproduction", c1_op),
        ("2", "stitching", c2_stitch),
        ("3", "projection geometry", c3_projection),
        ("4", "five-point + RANSAC", c4_five_point),
        ("5", "triangulation", c5_triangulation),
        ("6", "similarity transform", c6_similarity),
        ("7", "end-to-end synthetic", c7_end_to_end),
        ("8", "evaluation oracle", c8_ap),
        ("9", "EXIF", c9_exif),
        ("10", "determinism", c10_determinism),
        ("11", "sidecar contract, primary side", c11_remote_contract),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| x == id) {
            continue;
        }
        let t = Instant::now();
        let r = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match r {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {why} ({:?})", t.elapsed());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
