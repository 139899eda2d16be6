//! `panoview` command-line front end.

mod config;

use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use panoview::acquisition::{download_panorama, FixtureProvider, RetryPolicy};
use panoview::evaluation::{count_nt, evaluate_detections, op_metric, read_ndjson, EvalCounts, GroundTruthSet, ScoredBox};
use panoview::geo::{wrap_360, GeoPoint};
use panoview::pipeline::{localize, run, write_outputs, PipelineError, RunInput, RUN_MANIFEST_FILE};
use panoview::projection::{render_rectilinear_with_offset, EquirectImage};
use panoview::synthetic::{make_fixture, standard_fixture, FixtureSpec, StandardOptions, ANNOTATIONS_FILE};

use config::{DetectorConfig, MatcherConfig, ProviderConfig, RunConfig};

#[derive(Parser)]
#[command(name = "panoview", version, about = "Multi-view building imagery from street-level panoramas")]
struct Cli {
    /// Log progress (step-by-step) to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Localize the building and extract one crop per panorama.
    Extract {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localize the building and print its coordinates as JSON.
    Localize {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Download and stitch the tiles of one panorama.
    Stitch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pano: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a rectilinear view of an equirectangular image.
    Project {
        #[arg(long)]
        pano: PathBuf,
        /// Panorama heading, degrees clockwise from North.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        heading: f64,
        /// View direction relative to the heading.
        #[arg(long, allow_hyphen_values = true)]
        alpha: f64,
        #[arg(long, default_value_t = 90.0)]
        theta: f64,
        #[arg(long, default_value_t = 2048)]
        size: u32,
        /// Where the heading sits in the image: center-column or left-edge.
        #[arg(long, default_value = "center-column")]
        convention: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average precision, TPR at fixed false-positive counts, and OP.
    Evaluate {
        #[arg(long, requires = "dets")]
        gt: Option<PathBuf>,
        #[arg(long, requires = "gt")]
        dets: Option<PathBuf>,
        /// Inline JSON or a JSON file with {n_u, n_o} and either n_t or {n_b, n, m}.
        #[arg(long)]
        op_counts: Option<String>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, value_delimiter = ',', default_value = "100,200")]
        fp_counts: Vec<usize>,
    },
    /// Write a synthetic fixture (panorama tiles, annotations, input image, run.toml).
    Simulate {
        /// Fixture description; the standard street scene when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        standard: StandardArgs,
        /// Matcher written into run.toml: brief or oracle.
        #[arg(long, default_value = "brief")]
        matcher: String,
        /// Also write the scene description to this path.
        #[arg(long)]
        emit_scene: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Geotagged JPEG, or "lat,lon".
    #[arg(long, allow_hyphen_values = true)]
    input: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the RANSAC seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct StandardArgs {
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 10.0)]
    spacing: f64,
    #[arg(long)]
    south: bool,
    #[arg(long)]
    occluder: bool,
    #[arg(long, default_value_t = 8)]
    cols: u32,
    #[arg(long, default_value_t = 4)]
    rows: u32,
    #[arg(long, default_value_t = 512)]
    tile_px: u32,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose { "info" } else { "warn" }))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let name = command_name(&cli.cmd);
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let step = e.downcast_ref::<PipelineError>().map(PipelineError::step);
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("{}", json!({ "error": msg, "command": name, "step": step }));
            ExitCode::FAILURE
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Extract { .. } => "extract",
        Command::Localize { .. } => "localize",
        Command::Stitch { .. } => "stitch",
        Command::Project { .. } => "project",
        Command::Evaluate { .. } => "evaluate",
        Command::Simulate { .. } => "simulate",
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Extract { run: args, out } => {
            let (cfg, input) = prepare(&args)?;
            let (provider, detector, matcher) = (cfg.provider()?, cfg.detector()?, cfg.matcher()?);
            let result = run(&input, provider.as_ref(), detector.as_ref(), matcher.as_ref(), &cfg.extraction, &cfg.retry)?;
            let manifest = write_outputs(&result, &out)?;
            let crops = manifest.views.iter().filter(|v| v.crop_path.is_some()).count();
            println!(
                "{}",
                json!({ "manifest": out.join(RUN_MANIFEST_FILE), "x_g": manifest.x_g, "views": manifest.views.len(), "crops": crops })
            );
        }
        Command::Localize { run: args } => {
            let (cfg, input) = prepare(&args)?;
            let (provider, detector, matcher) = (cfg.provider()?, cfg.detector()?, cfg.matcher()?);
            let (input, seq, _, loc) = localize(&input, provider.as_ref(), detector.as_ref(), matcher.as_ref(), &cfg.extraction, &cfg.retry)?;
            let out = json!({
                "input": { "lat": input.lat, "lon": input.lon },
                "pn0": seq.center().meta.pano_id,
                "x_g": { "lat": loc.location.x_g.lat, "lon": loc.location.x_g.lon },
                "enu": loc.location.enu,
                "x_b": loc.location.x_b,
                "diagnostics": loc.diagnostics,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Stitch { manifest, pano, out } => {
            let provider = FixtureProvider::from_manifest(&manifest)?;
            let meta = provider
                .metas()
                .iter()
                .find(|m| m.pano_id == pano)
                .cloned()
                .ok_or_else(|| anyhow!("panorama {pano} not in {}", manifest.display()))?;
            let p = download_panorama(&provider, &meta, &RetryPolicy::default())?;
            p.image.as_image().save(&out).with_context(|| format!("writing {}", out.display()))?;
            println!("{}", json!({ "pano_id": pano, "width": p.image.width(), "height": p.image.height(), "out": out }));
        }
        Command::Project { pano, heading, alpha, theta, size, convention, out } => {
            let offset = match convention.as_str() {
                "center-column" => 0.0,
                "left-edge" => 180.0,
                other => bail!("unknown heading convention {other:?}"),
            };
            let img = image::open(&pano).with_context(|| format!("reading {}", pano.display()))?.to_rgb8();
            let eq = EquirectImage::new(img)?;
            let id = pano.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let view = render_rectilinear_with_offset(&eq, &id, alpha, offset, theta, size)?;
            view.image.save(&out).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "{}",
                json!({ "alpha_deg": alpha, "azimuth_deg": wrap_360(heading + alpha), "f": view.intrinsics.f, "p": view.intrinsics.p, "out": out })
            );
        }
        Command::Evaluate { gt, dets, op_counts, iou, fp_counts } => {
            if gt.is_none() && op_counts.is_none() {
                bail!("nothing to evaluate: give --gt/--dets, --op-counts, or both");
            }
            let mut report = serde_json::Map::new();
            if let (Some(gt), Some(dets)) = (gt, dets) {
                let read = |p: &Path| -> Result<_> {
                    let f = std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
                    read_ndjson(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))
                };
                let gt = GroundTruthSet::from_records(&read(&gt)?);
                let dets = ScoredBox::from_records(&read(&dets)?);
                report.insert("detection".into(), serde_json::to_value(evaluate_detections(&gt, &dets, iou, &fp_counts)?)?);
            }
            if let Some(arg) = op_counts {
                let c = parse_op_counts(&arg)?;
                let n_t = match c.n_t {
                    Some(n) => n,
                    None => count_nt(&EvalCounts { n_b: c.n_b, n: c.n, m: c.m.clone(), n_u: c.n_u, n_o: c.n_o })?,
                };
                let op = op_metric(c.n_u, n_t, c.n_o)?;
                report.insert("op".into(), json!({ "n_u": c.n_u, "n_t": n_t, "n_o": c.n_o, "op": op, "op_rounded": format!("{op:.4}") }));
            }
            println!("{}", serde_json::Value::Object(report));
        }
        Command::Simulate { scene, out, standard: s, matcher, emit_scene } => {
            let spec: FixtureSpec = match scene {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => standard_fixture(StandardOptions {
                    n: s.n,
                    spacing_m: s.spacing,
                    south: s.south,
                    occluder: s.occluder,
                    cols: s.cols,
                    rows: s.rows,
                    tile_px: s.tile_px,
                }),
            };
            let matcher = match matcher.as_str() {
                "brief" => MatcherConfig::default(),
                "oracle" => MatcherConfig::Oracle { annotations: ANNOTATIONS_FILE.into() },
                other => bail!("unknown matcher {other:?} (brief or oracle)"),
            };
            let paths = make_fixture(&spec, &out)?;
            let cfg = RunConfig {
                provider: ProviderConfig::Fixture { root: ".".into() },
                detector: DetectorConfig::Oracle { annotations: ANNOTATIONS_FILE.into(), jitter_px: 0.0, seed: 0 },
                matcher,
                ..Default::default()
            };
            let run_toml = out.join("run.toml");
            std::fs::write(&run_toml, toml::to_string(&cfg)?).with_context(|| format!("writing {}", run_toml.display()))?;
            if let Some(p) = emit_scene {
                std::fs::write(&p, serde_json::to_string_pretty(&spec)?).with_context(|| format!("writing {}", p.display()))?;
            }
            println!(
                "{}",
                json!({ "root": paths.root, "config": run_toml, "input": paths.input_jpeg, "panoramas": spec.poses.len() })
            );
        }
    }
    Ok(())
}

fn prepare(args: &RunArgs) -> Result<(RunConfig, RunInput)> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut c = RunConfig::default();
            c.apply_env(std::env::var(config::DETECTOR_URL_ENV).ok());
            c
        }
    };
    if let Some(seed) = args.seed {
        cfg.extraction.ransac.rng_seed = seed;
    }
    // resolve the GPS before any provider is constructed
    let input = RunInput::Point(parse_input(&args.input)?.location()?);
    Ok((cfg, input))
}

fn parse_input(s: &str) -> Result<RunInput> {
    if let Some((a, b)) = s.split_once(',') {
        if let (Ok(lat), Ok(lon)) = (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
            return Ok(RunInput::Point(GeoPoint::new(lat, lon)?));
        }
    }
    let bytes = std::fs::read(s).with_context(|| format!("reading input image {s}"))?;
    Ok(RunInput::Jpeg(bytes))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OpCounts {
    n_u: u32,
    #[serde(default)]
    n_o: u32,
    n_t: Option<u32>,
    #[serde(default)]
    n_b: u32,
    #[serde(default)]
    n: u32,
    #[serde(default)]
    m: Vec<u32>,
}

fn parse_op_counts(arg: &str) -> Result<OpCounts> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg).with_context(|| format!("reading {arg}"))?
    };
    let c: OpCounts = serde_json::from_str(&text).context("parsing --op-counts")?;
    if c.n_t.is_none() && c.n_b == 0 {
        bail!("--op-counts needs n_t or n_b/n/m");
    }
    Ok(c)
}
