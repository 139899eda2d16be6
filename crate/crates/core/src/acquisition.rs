//! Panorama discovery, sequence selection along the route, tile download
//! with retries, and stitching.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use image::RgbImage;
use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{geodetic_to_enu, wrap_360, GeoError, GeoPoint};
use crate::projection::{EquirectImage, ProjectionError};

/// Heading at the centre column of the panorama.
pub const HEADING_CENTER_COLUMN: &str = "center-column";
/// Heading at the left edge of the panorama.
pub const HEADING_LEFT_EDGE: &str = "left-edge";
pub const DEFAULT_SPACING_WARN_M: f64 = 15.0;

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("provider unreachable: {0}")]
    Unreachable(String),
    #[error("transient provider failure: {0}")]
    Transient(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("malformed provider data: {0}")]
    Parse(String),
    #[error("no panorama coverage within {radius_m} m")]
    NoCoverage { radius_m: f64 },
    #[error("search radius must be positive, got {0}")]
    InvalidRadius(f64),
    #[error("empty metadata list")]
    EmptyMetadata,
    #[error("invalid metadata for {pano_id}: {msg}")]
    InvalidMetadata { pano_id: String, msg: String },
    #[error("incomplete tile grid: tile (row {row}, col {col}) missing")]
    IncompleteGrid { row: u32, col: u32 },
    #[error("tile (row {row}, col {col}) is {width}x{height}, expected {expected}x{expected}")]
    TileSize { row: u32, col: u32, width: u32, height: u32, expected: u32 },
    #[error("tile (row {row}, col {col}) lies outside a {cols}x{rows} grid")]
    TileOutsideGrid { row: u32, col: u32, cols: u32, rows: u32 },
    #[error("fetch of {what} failed after {attempts} attempts: {last}")]
    RetriesExhausted { what: String, attempts: u32, last: String },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
}

impl AcquisitionError {
    pub fn is_transient(&self) -> bool {
        matches!(self, AcquisitionError::Transient(_) | AcquisitionError::Unreachable(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub cols: u32,
    pub rows: u32,
    pub tile_px: u32,
}

impl TileGrid {
    pub fn width(&self) -> u32 {
        self.cols * self.tile_px
    }

    pub fn height(&self) -> u32 {
        self.rows * self.tile_px
    }

    pub fn count(&self) -> usize {
        (self.cols * self.rows) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanoMetadata {
    pub pano_id: String,
    pub location: GeoPoint,
    /// Degrees clockwise from North, in `[0, 360)`.
    pub heading_deg: f64,
    pub capture_date: Option<String>,
    pub tile_grid: TileGrid,
    pub heading_convention: String,
}

impl PanoMetadata {
    /// Heading-relative azimuth of the image's centre column.
    pub fn center_offset_deg(&self) -> f64 {
        if self.heading_convention == HEADING_LEFT_EDGE {
            180.0
        } else {
            0.0
        }
    }
}

/// One panorama record of a fixture or HTTP metadata manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub pano_id: String,
    pub lat: f64,
    pub lon: f64,
    pub heading_deg: f64,
    pub cols: u32,
    pub rows: u32,
    pub tile_px: u32,
    #[serde(default = "default_convention")]
    pub heading_convention: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture_date: Option<String>,
}

fn default_convention() -> String {
    HEADING_CENTER_COLUMN.to_string()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub panos: Vec<ManifestRecord>,
}

impl ManifestRecord {
    pub fn from_meta(m: &PanoMetadata) -> Self {
        Self {
            pano_id: m.pano_id.clone(),
            lat: m.location.lat,
            lon: m.location.lon,
            heading_deg: m.heading_deg,
            cols: m.tile_grid.cols,
            rows: m.tile_grid.rows,
            tile_px: m.tile_grid.tile_px,
            heading_convention: m.heading_convention.clone(),
            capture_date: m.capture_date.clone(),
        }
    }

    pub fn to_meta(&self) -> Result<PanoMetadata, AcquisitionError> {
        let bad = |msg: String| AcquisitionError::InvalidMetadata { pano_id: self.pano_id.clone(), msg };
        if self.pano_id.is_empty() {
            return Err(bad("empty pano_id".into()));
        }
        if self.cols == 0 || self.rows == 0 || self.tile_px == 0 {
            return Err(bad("tile dimensions must be positive".into()));
        }
        if !self.heading_deg.is_finite() {
            return Err(bad("heading is not finite".into()));
        }
        if self.heading_convention != HEADING_CENTER_COLUMN && self.heading_convention != HEADING_LEFT_EDGE {
            return Err(bad(format!("unknown heading convention {:?}", self.heading_convention)));
        }
        let location = GeoPoint::new(self.lat, self.lon).map_err(|e| bad(e.to_string()))?;
        Ok(PanoMetadata {
            pano_id: self.pano_id.clone(),
            location,
            heading_deg: wrap_360(self.heading_deg),
            capture_date: self.capture_date.clone(),
            tile_grid: TileGrid { cols: self.cols, rows: self.rows, tile_px: self.tile_px },
            heading_convention: self.heading_convention.clone(),
        })
    }
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Vec<PanoMetadata>, AcquisitionError> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| AcquisitionError::Parse(e.to_string()))?;
        m.panos.iter().map(ManifestRecord::to_meta).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Panorama {
    pub meta: PanoMetadata,
    pub image: EquirectImage,
}

impl Panorama {
    pub fn new(meta: PanoMetadata, image: EquirectImage) -> Result<Self, AcquisitionError> {
        let g = meta.tile_grid;
        if image.width() != g.width() || image.height() != g.height() {
            return Err(AcquisitionError::InvalidMetadata {
                pano_id: meta.pano_id.clone(),
                msg: format!("image {}x{} does not match tile grid {}x{}", image.width(), image.height(), g.width(), g.height()),
            });
        }
        Ok(Self { meta, image })
    }
}

/// Source of panorama metadata and tiles.
pub trait PanoProvider: Send + Sync {
    /// Candidate panoramas near `around`; may return more than `radius_m` covers.
    fn list_metadata(&self, around: &GeoPoint, radius_m: f64) -> Result<Vec<PanoMetadata>, AcquisitionError>;
    fn fetch_tile(&self, meta: &PanoMetadata, row: u32, col: u32) -> Result<RgbImage, AcquisitionError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
    pub max_concurrency: usize,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, base_delay_ms: 250, max_concurrency: 8 }
    }
}

impl RetryPolicy {
    pub fn run<T>(&self, what: &str, mut f: impl FnMut() -> Result<T, AcquisitionError>) -> Result<T, AcquisitionError> {
        let attempts = self.attempts.max(1);
        let mut attempt = 0;
        loop {
            match f() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() => {
                    attempt += 1;
                    if attempt >= attempts {
                        return Err(AcquisitionError::RetriesExhausted { what: what.to_string(), attempts, last: e.to_string() });
                    }
                    let delay = self.base_delay_ms.saturating_mul(1 << (attempt - 1).min(16));
                    log::warn!("step 2: {what}: {e}; retry {attempt} in {delay} ms");
                    thread::sleep(Duration::from_millis(delay));
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Metadata within `radius_m` of `around`, deduplicated by id and sorted by id.
pub fn fetch_nearby(provider: &dyn PanoProvider, around: &GeoPoint, radius_m: f64) -> Result<Vec<PanoMetadata>, AcquisitionError> {
    if !(radius_m > 0.0 && radius_m.is_finite()) {
        return Err(AcquisitionError::InvalidRadius(radius_m));
    }
    let mut metas = provider.list_metadata(around, radius_m)?;
    metas.sort_by(|a, b| a.pano_id.cmp(&b.pano_id));
    let mut seen = HashSet::new();
    metas.retain(|m| seen.insert(m.pano_id.clone()) && around.haversine_m(&m.location) <= radius_m);
    if metas.is_empty() {
        return Err(AcquisitionError::NoCoverage { radius_m });
    }
    Ok(metas)
}

/// Metadata-only sequence PN_{-k}..PN_{+k} ordered along the route.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePlan {
    pub metas: Vec<PanoMetadata>,
    pub center_index: usize,
    pub n: usize,
    /// Signed position of each panorama along the route axis, metres from PN_0.
    pub route_m: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Chooses PN_0 nearest the input and up to `n` neighbours per side along the
/// principal direction of the panorama locations.
pub fn select_sequence(metas: &[PanoMetadata], input: &GeoPoint, n: usize) -> Result<SequencePlan, AcquisitionError> {
    select_sequence_with(metas, input, n, DEFAULT_SPACING_WARN_M)
}

pub fn select_sequence_with(
    metas: &[PanoMetadata],
    input: &GeoPoint,
    n: usize,
    spacing_warn_m: f64,
) -> Result<SequencePlan, AcquisitionError> {
    if metas.is_empty() {
        return Err(AcquisitionError::EmptyMetadata);
    }
    let mut sorted: Vec<&PanoMetadata> = metas.iter().collect();
    sorted.sort_by(|a, b| a.pano_id.cmp(&b.pano_id));
    sorted.dedup_by(|a, b| a.pano_id == b.pano_id);
    let pn0 = *sorted
        .iter()
        .min_by(|a, b| {
            input
                .haversine_m(&a.location)
                .total_cmp(&input.haversine_m(&b.location))
                .then_with(|| a.pano_id.cmp(&b.pano_id))
        })
        .expect("nonempty");

    let pos: Vec<Vector2<f64>> = sorted
        .iter()
        .map(|m| geodetic_to_enu(&m.location, &pn0.location).map(|v| Vector2::new(v.e, v.n)))
        .collect::<Result<_, _>>()?;
    let scatter: Matrix2<f64> = pos.iter().map(|p| p * p.transpose()).sum();
    let h = pn0.heading_deg.to_radians();
    let heading_dir = Vector2::new(h.sin(), h.cos());
    let mut axis = if scatter.norm() > 0.0 {
        let eig = scatter.symmetric_eigen();
        let k = if eig.eigenvalues[0] >= eig.eigenvalues[1] { 0 } else { 1 };
        eig.eigenvectors.column(k).into_owned()
    } else {
        heading_dir
    };
    if axis.dot(&heading_dir) < 0.0 {
        axis = -axis;
    }

    let mut along: Vec<(f64, &PanoMetadata)> = sorted.iter().zip(&pos).map(|(m, p)| (p.dot(&axis), *m)).collect();
    along.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.pano_id.cmp(&b.1.pano_id)));
    const SAME_SPOT_M: f64 = 1e-6;
    let before: Vec<(f64, &PanoMetadata)> = along.iter().rev().filter(|(s, _)| *s < -SAME_SPOT_M).take(n).copied().collect();
    let after: Vec<(f64, &PanoMetadata)> = along.iter().filter(|(s, _)| *s > SAME_SPOT_M).take(n).copied().collect();

    let mut chosen: Vec<(f64, &PanoMetadata)> = Vec::with_capacity(before.len() + after.len() + 1);
    let mut last = f64::NEG_INFINITY;
    for item in before.into_iter().rev() {
        if item.0 - last > SAME_SPOT_M {
            last = item.0;
            chosen.push(item);
        }
    }
    let center_index = chosen.len();
    chosen.push((0.0, pn0));
    last = 0.0;
    for item in after {
        if item.0 - last > SAME_SPOT_M {
            last = item.0;
            chosen.push(item);
        }
    }

    let mut warnings = Vec::new();
    for w in chosen.windows(2) {
        let gap = w[1].0 - w[0].0;
        if gap > spacing_warn_m {
            let msg = format!("panoramas {} and {} are {:.1} m apart", w[0].1.pano_id, w[1].1.pano_id, gap);
            log::warn!("step 2: {msg}");
            warnings.push(msg);
        }
    }
    Ok(SequencePlan {
        route_m: chosen.iter().map(|c| c.0).collect(),
        metas: chosen.iter().map(|c| c.1.clone()).collect(),
        center_index,
        n,
        warnings,
    })
}

/// A sequence of downloaded panoramas, PN_0 at `center_index`.
#[derive(Debug, Clone)]
pub struct PanoSequence {
    pub panos: Vec<Panorama>,
    pub center_index: usize,
    pub n: usize,
}

impl PanoSequence {
    pub fn center(&self) -> &Panorama {
        &self.panos[self.center_index]
    }

    /// PN_{offset} relative to the centre, if present.
    pub fn at(&self, offset: isize) -> Option<&Panorama> {
        let i = self.center_index as isize + offset;
        (i >= 0).then(|| self.panos.get(i as usize)).flatten()
    }
}

impl SequencePlan {
    pub fn download(&self, provider: &dyn PanoProvider, policy: &RetryPolicy) -> Result<PanoSequence, AcquisitionError> {
        let panos = self
            .metas
            .iter()
            .map(|m| download_panorama(provider, m, policy))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PanoSequence { panos, center_index: self.center_index, n: self.n })
    }
}

/// Places tile `(row, col)` at block `[row·px, (row+1)·px) × [col·px, (col+1)·px)`.
pub fn stitch_tiles(tiles: &BTreeMap<(u32, u32), RgbImage>, grid: TileGrid) -> Result<RgbImage, AcquisitionError> {
    let px = grid.tile_px;
    for (&(row, col), t) in tiles {
        if row >= grid.rows || col >= grid.cols {
            return Err(AcquisitionError::TileOutsideGrid { row, col, cols: grid.cols, rows: grid.rows });
        }
        if t.width() != px || t.height() != px {
            return Err(AcquisitionError::TileSize { row, col, width: t.width(), height: t.height(), expected: px });
        }
    }
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            if !tiles.contains_key(&(row, col)) {
                return Err(AcquisitionError::IncompleteGrid { row, col });
            }
        }
    }
    let (w, tile_row) = (grid.width() as usize * 3, px as usize * 3);
    let mut buf = vec![0u8; w * grid.height() as usize];
    buf.par_chunks_mut(w).enumerate().for_each(|(y, out)| {
        let (row, ty) = (y as u32 / px, y % px as usize);
        for col in 0..grid.cols {
            let src = tiles[&(row, col)].as_raw();
            let s = ty * tile_row;
            out[col as usize * tile_row..(col as usize + 1) * tile_row].copy_from_slice(&src[s..s + tile_row]);
        }
    });
    Ok(RgbImage::from_raw(grid.width(), grid.height(), buf).expect("buffer sized to grid"))
}

/// Inverse of [`stitch_tiles`].
pub fn slice_tiles(img: &RgbImage, tile_px: u32) -> Result<BTreeMap<(u32, u32), RgbImage>, AcquisitionError> {
    if tile_px == 0 || img.width() % tile_px != 0 || img.height() % tile_px != 0 {
        return Err(AcquisitionError::TileSize { row: 0, col: 0, width: img.width(), height: img.height(), expected: tile_px });
    }
    let mut out = BTreeMap::new();
    for row in 0..img.height() / tile_px {
        for col in 0..img.width() / tile_px {
            let t = image::imageops::crop_imm(img, col * tile_px, row * tile_px, tile_px, tile_px).to_image();
            out.insert((row, col), t);
        }
    }
    Ok(out)
}

/// Fetches every tile (concurrently, up to the policy cap) and stitches them.
pub fn download_panorama(provider: &dyn PanoProvider, meta: &PanoMetadata, policy: &RetryPolicy) -> Result<Panorama, AcquisitionError> {
    let g = meta.tile_grid;
    let cells: Vec<(u32, u32)> = (0..g.rows).flat_map(|r| (0..g.cols).map(move |c| (r, c))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(policy.max_concurrency.max(1))
        .build()
        .map_err(|e| AcquisitionError::Unreachable(e.to_string()))?;
    let fetched: Vec<Result<((u32, u32), RgbImage), AcquisitionError>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(r, c)| {
                let what = format!("tile {}/{}_{}", meta.pano_id, r, c);
                policy.run(&what, || provider.fetch_tile(meta, r, c)).map(|t| ((r, c), t))
            })
            .collect()
    });
    let tiles = fetched.into_iter().collect::<Result<BTreeMap<_, _>, _>>()?;
    let image = EquirectImage::new(stitch_tiles(&tiles, g)?)?;
    log::info!("step 2: downloaded {} ({}x{})", meta.pano_id, image.width(), image.height());
    Panorama::new(meta.clone(), image)
}

/// Directory provider: `manifest.json` plus `tiles/<pano_id>/<row>_<col>.png`.
#[derive(Debug, Clone)]
pub struct FixtureProvider {
    root: PathBuf,
    metas: Vec<PanoMetadata>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn tile_path(root: &Path, pano_id: &str, row: u32, col: u32) -> PathBuf {
    root.join("tiles").join(pano_id).join(format!("{row}_{col}.png"))
}

impl FixtureProvider {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, AcquisitionError> {
        let root = root.into();
        Self::from_manifest(&root.join(MANIFEST_FILE))
    }

    /// Opens a manifest stored under any name; tiles are looked up beside it.
    pub fn from_manifest(path: &Path) -> Result<Self, AcquisitionError> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = std::fs::read_to_string(&path).map_err(|e| AcquisitionError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        Ok(Self { metas: Manifest::parse(&text)?, root })
    }

    pub fn metas(&self) -> &[PanoMetadata] {
        &self.metas
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl PanoProvider for FixtureProvider {
    fn list_metadata(&self, _around: &GeoPoint, _radius_m: f64) -> Result<Vec<PanoMetadata>, AcquisitionError> {
        Ok(self.metas.clone())
    }

    fn fetch_tile(&self, meta: &PanoMetadata, row: u32, col: u32) -> Result<RgbImage, AcquisitionError> {
        if !self.metas.iter().any(|m| m.pano_id == meta.pano_id) {
            return Err(AcquisitionError::NotFound(format!("panorama {}", meta.pano_id)));
        }
        let path = tile_path(&self.root, &meta.pano_id, row, col);
        if !path.exists() {
            return Err(AcquisitionError::NotFound(path.display().to_string()));
        }
        image::open(&path)
            .map(|i| i.to_rgb8())
            .map_err(|e| AcquisitionError::Parse(format!("{}: {e}", path.display())))
    }
}

/// HTTP provider driven by URL templates.
///
/// `metadata_url` may use `{lat}`, `{lon}` and `{radius}` and must return a
/// manifest document; `tile_url` may use `{pano_id}`, `{zoom}`, `{x}` (column)
/// and `{y}` (row) and must return an image.
pub struct HttpProvider {
    pub metadata_url: String,
    pub tile_url: String,
    pub zoom: u32,
    agent: ureq::Agent,
    min_interval: Duration,
    last_request: Mutex<Option<Instant>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    pub metadata_url: String,
    pub tile_url: String,
    #[serde(default)]
    pub zoom: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Requests per second; 0 disables rate limiting.
    #[serde(default)]
    pub rate_limit_per_s: f64,
}

fn default_timeout_ms() -> u64 {
    10_000
}

impl HttpProvider {
    pub fn new(cfg: &HttpProviderConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_millis(cfg.timeout_ms)).build();
        let min_interval = if cfg.rate_limit_per_s > 0.0 {
            Duration::from_secs_f64(1.0 / cfg.rate_limit_per_s)
        } else {
            Duration::ZERO
        };
        Self {
            metadata_url: cfg.metadata_url.clone(),
            tile_url: cfg.tile_url.clone(),
            zoom: cfg.zoom,
            agent,
            min_interval,
            last_request: Mutex::new(None),
        }
    }

    fn throttle(&self) {
        if self.min_interval.is_zero() {
            return;
        }
        let mut last = self.last_request.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(t) = *last {
            let elapsed = t.elapsed();
            if elapsed < self.min_interval {
                thread::sleep(self.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    fn get(&self, url: &str) -> Result<ureq::Response, AcquisitionError> {
        self.throttle();
        match self.agent.get(url).call() {
            Ok(r) => Ok(r),
            Err(ureq::Error::Status(404, _)) => Err(AcquisitionError::NotFound(url.to_string())),
            Err(ureq::Error::Status(code, _)) if code == 429 || code >= 500 => {
                Err(AcquisitionError::Transient(format!("{url}: HTTP {code}")))
            }
            Err(ureq::Error::Status(code, _)) => Err(AcquisitionError::Parse(format!("{url}: HTTP {code}"))),
            Err(ureq::Error::Transport(t)) => Err(AcquisitionError::Unreachable(format!("{url}: {t}"))),
        }
    }
}

impl PanoProvider for HttpProvider {
    fn list_metadata(&self, around: &GeoPoint, radius_m: f64) -> Result<Vec<PanoMetadata>, AcquisitionError> {
        let url = self
            .metadata_url
            .replace("{lat}", &around.lat.to_string())
            .replace("{lon}", &around.lon.to_string())
            .replace("{radius}", &radius_m.to_string());
        let body = self.get(&url)?.into_string().map_err(|e| AcquisitionError::Transient(e.to_string()))?;
        Manifest::parse(&body)
    }

    fn fetch_tile(&self, meta: &PanoMetadata, row: u32, col: u32) -> Result<RgbImage, AcquisitionError> {
        let url = self
            .tile_url
            .replace("{pano_id}", &meta.pano_id)
            .replace("{zoom}", &self.zoom.to_string())
            .replace("{x}", &col.to_string())
            .replace("{y}", &row.to_string());
        let mut bytes = Vec::new();
        std::io::Read::read_to_end(&mut self.get(&url)?.into_reader(), &mut bytes)
            .map_err(|e| AcquisitionError::Transient(format!("{url}: {e}")))?;
        image::load_from_memory(&bytes)
            .map(|i| i.to_rgb8())
            .map_err(|e| AcquisitionError::Parse(format!("{url}: {e}")))
    }
}
