//! Geodetic and local tangent-plane coordinates.
//!
//! Panorama spacing is on the order of ten meters, so a flat-Earth tangent
//! plane anchored at a fixed origin is used instead of a full ECEF chain.
//! East/North are scaled by the WGS-84 equatorial radius.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS-84 equatorial radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_378_137.0;

/// Largest lat/lon offset (degrees) accepted by the flat-Earth conversion.
pub const FLAT_EARTH_WINDOW_DEG: f64 = 1.0;

/// Largest planar offset (meters) accepted by the inverse conversion.
pub const MAX_ENU_OFFSET_M: f64 = 100_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    InvalidLatitude(f64),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("offset ({dlat:.6}°, {dlon:.6}°) outside the flat-Earth window")]
    OutOfRange { dlat: f64, dlon: f64 },
    #[error("ENU offset of {0:.1} m exceeds the flat-Earth window")]
    OffsetTooLarge(f64),
    #[error("longitude is degenerate at the pole")]
    DegenerateLongitude,
    #[error("bearing undefined for coincident points")]
    UndefinedBearing,
    #[error("coincident control points")]
    DegenerateConfiguration,
}

/// Wraps a longitude into `[-180, 180)`.
pub fn normalize_lon(lon: f64) -> f64 {
    let l = (lon + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if l >= 180.0 {
        l - 360.0
    } else {
        l
    }
}

/// Wraps an angle into `[0, 360)`.
pub fn wrap_360(deg: f64) -> f64 {
    let d = deg.rem_euclid(360.0);
    if d >= 360.0 {
        0.0
    } else {
        d
    }
}

/// Wraps an angle into `[-180, 180)`.
pub fn wrap_180(deg: f64) -> f64 {
    normalize_lon(deg)
}

/// A WGS-84 position in degrees, with optional altitude in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alt: Option<f64>,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        Self::with_alt(lat, lon, None)
    }

    pub fn with_alt(lat: f64, lon: f64, alt: Option<f64>) -> Result<Self, GeoError> {
        if !lat.is_finite() || !lon.is_finite() || alt.is_some_and(|a| !a.is_finite()) {
            return Err(GeoError::NonFinite);
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::InvalidLatitude(lat));
        }
        Ok(Self {
            lat,
            lon: normalize_lon(lon),
            alt,
        })
    }

    /// Great-circle distance on a sphere of radius [`EARTH_RADIUS_M`].
    pub fn haversine_m(&self, other: &GeoPoint) -> f64 {
        let (p1, p2) = (self.lat.to_radians(), other.lat.to_radians());
        let dp = p2 - p1;
        let dl = wrap_180(other.lon - self.lon).to_radians();
        let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
    }
}

/// East/North/Up offset in meters from a tangent-plane origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnuVec {
    pub e: f64,
    pub n: f64,
    #[serde(default)]
    pub u: f64,
}

impl EnuVec {
    pub const fn new(e: f64, n: f64, u: f64) -> Self {
        Self { e, n, u }
    }

    pub const fn planar(e: f64, n: f64) -> Self {
        Self { e, n, u: 0.0 }
    }

    pub fn planar_norm(&self) -> f64 {
        self.e.hypot(self.n)
    }

    pub fn to_planar(self) -> [f64; 2] {
        [self.e, self.n]
    }
}

impl std::ops::Sub for EnuVec {
    type Output = EnuVec;
    fn sub(self, rhs: EnuVec) -> EnuVec {
        EnuVec::new(self.e - rhs.e, self.n - rhs.n, self.u - rhs.u)
    }
}

impl std::ops::Add for EnuVec {
    type Output = EnuVec;
    fn add(self, rhs: EnuVec) -> EnuVec {
        EnuVec::new(self.e + rhs.e, self.n + rhs.n, self.u + rhs.u)
    }
}

/// Flat-Earth projection of `p` onto the plane tangent at `origin`.
pub fn geodetic_to_enu(p: &GeoPoint, origin: &GeoPoint) -> Result<EnuVec, GeoError> {
    let dlat = p.lat - origin.lat;
    let dlon = wrap_180(p.lon - origin.lon);
    if dlat.abs() >= FLAT_EARTH_WINDOW_DEG || dlon.abs() >= FLAT_EARTH_WINDOW_DEG {
        return Err(GeoError::OutOfRange { dlat, dlon });
    }
    let k = std::f64::consts::PI / 180.0 * EARTH_RADIUS_M;
    let u = match (p.alt, origin.alt) {
        (Some(a), Some(b)) => a - b,
        (Some(a), None) => a,
        _ => 0.0,
    };
    Ok(EnuVec {
        e: dlon * k * origin.lat.to_radians().cos(),
        n: dlat * k,
        u,
    })
}

/// Inverse of [`geodetic_to_enu`] under the same flat-Earth model.
pub fn enu_to_geodetic(v: &EnuVec, origin: &GeoPoint) -> Result<GeoPoint, GeoError> {
    if !(v.e.is_finite() && v.n.is_finite() && v.u.is_finite()) {
        return Err(GeoError::NonFinite);
    }
    let norm = v.planar_norm();
    if norm >= MAX_ENU_OFFSET_M {
        return Err(GeoError::OffsetTooLarge(norm));
    }
    let cos_lat = origin.lat.to_radians().cos();
    if origin.lat.abs() >= 90.0 || cos_lat.abs() < 1e-12 {
        return Err(GeoError::DegenerateLongitude);
    }
    let k = std::f64::consts::PI / 180.0 * EARTH_RADIUS_M;
    let alt = match origin.alt {
        Some(a) => Some(a + v.u),
        None if v.u != 0.0 => Some(v.u),
        None => None,
    };
    GeoPoint::with_alt(origin.lat + v.n / k, origin.lon + v.e / (k * cos_lat), alt)
}

/// Clockwise-from-North bearing of `to - from`, in `[0, 360)`.
pub fn bearing_deg(from: &EnuVec, to: &EnuVec) -> Result<f64, GeoError> {
    let de = to.e - from.e;
    let dn = to.n - from.n;
    if de == 0.0 && dn == 0.0 {
        return Err(GeoError::UndefinedBearing);
    }
    Ok(wrap_360(de.atan2(dn).to_degrees()))
}

/// Orientation-preserving planar similarity `p ↦ scale·R(rotation)·p + translation`.
///
/// `rotation_deg` is counter-clockwise in the source frame's (x, y) axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity2D {
    pub scale: f64,
    pub rotation_deg: f64,
    pub translation: [f64; 2],
}

impl Similarity2D {
    pub const IDENTITY: Similarity2D = Similarity2D {
        scale: 1.0,
        rotation_deg: 0.0,
        translation: [0.0, 0.0],
    };

    /// Builds from the complex-multiplier form `(a, b)` where `z ↦ (a + ib)·z + t`.
    fn from_multiplier(a: f64, b: f64, translation: [f64; 2]) -> Self {
        Self {
            scale: a.hypot(b),
            rotation_deg: b.atan2(a).to_degrees(),
            translation,
        }
    }

    fn multiplier(&self) -> (f64, f64) {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        (self.scale * c, self.scale * s)
    }
}

/// The unique similarity taking `a0 → b0` and `a1 → b1`.
pub fn fit_similarity_2pt(
    a0: [f64; 2],
    a1: [f64; 2],
    b0: [f64; 2],
    b1: [f64; 2],
) -> Result<Similarity2D, GeoError> {
    let da = [a1[0] - a0[0], a1[1] - a0[1]];
    let db = [b1[0] - b0[0], b1[1] - b0[1]];
    let den = da[0] * da[0] + da[1] * da[1];
    let dbn = db[0] * db[0] + db[1] * db[1];
    if den == 0.0 || dbn == 0.0 || !den.is_finite() || !dbn.is_finite() {
        return Err(GeoError::DegenerateConfiguration);
    }
    // complex division db / da
    let a = (db[0] * da[0] + db[1] * da[1]) / den;
    let b = (db[1] * da[0] - db[0] * da[1]) / den;
    let t = [
        b0[0] - (a * a0[0] - b * a0[1]),
        b0[1] - (b * a0[0] + a * a0[1]),
    ];
    Ok(Similarity2D::from_multiplier(a, b, t))
}

pub fn apply_similarity(t: &Similarity2D, p: [f64; 2]) -> [f64; 2] {
    let (a, b) = t.multiplier();
    [
        a * p[0] - b * p[1] + t.translation[0],
        b * p[0] + a * p[1] + t.translation[1],
    ]
}
