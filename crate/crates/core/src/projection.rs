//! Equirectangular panoramas and pinhole (rectilinear) views rendered from them.
//!
//! Pixel conventions used throughout:
//! - panorama azimuth `psi` is relative to the panorama heading, clockwise
//!   positive, and is zero at the horizontal center of the image;
//! - the top row is +90° elevation;
//! - all mappings are defined on pixel centers, i.e. pixel `(u, v)` covers
//!   `[u, u+1) × [v, v+1)` and its center sits at `(u + 0.5, v + 0.5)`.
//!
//! View frames are x right, y down, z forward. Pitch is always zero.

use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::wrap_180;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("invalid field of view {0}° (must be in (0, 180))")]
    InvalidFov(f64),
    #[error("invalid half size {0} px")]
    InvalidHalfSize(f64),
    #[error("output size must be a positive even number, got {0}")]
    InvalidOutputSize(u32),
    #[error("equirectangular image must be 2:1, got {width}x{height}")]
    NotEquirectangular { width: u32, height: u32 },
    #[error("pixel ({u}, {v}) outside {width}x{height}")]
    PixelOutOfBounds { u: f64, v: f64, width: u32, height: u32 },
}

/// Full-sphere panorama raster (width = 2·height).
#[derive(Debug, Clone, PartialEq)]
pub struct EquirectImage {
    image: RgbImage,
}

impl EquirectImage {
    pub fn new(image: RgbImage) -> Result<Self, ProjectionError> {
        let (width, height) = image.dimensions();
        if width == 0 || height == 0 || width != 2 * height {
            return Err(ProjectionError::NotEquirectangular { width, height });
        }
        Ok(Self { image })
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn dims(&self) -> PanoDims {
        PanoDims { width: self.width(), height: self.height() }
    }

    pub fn as_image(&self) -> &RgbImage {
        &self.image
    }

    pub fn into_image(self) -> RgbImage {
        self.image
    }

    /// Bilinear sample at fractional index coordinates (pixel `i` centred at `i`),
    /// wrapping horizontally and clamping vertically.
    pub fn sample_bilinear(&self, fx: f64, fy: f64) -> [u8; 3] {
        let w = self.width() as i64;
        let h = self.height() as i64;
        let fy = fy.clamp(0.0, (h - 1) as f64);
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = fx - x0;
        let ty = fy - y0;
        let xi0 = (x0 as i64).rem_euclid(w) as u32;
        let xi1 = (x0 as i64 + 1).rem_euclid(w) as u32;
        let yi0 = y0 as u32;
        let yi1 = (y0 as i64 + 1).min(h - 1) as u32;
        let p00 = self.image.get_pixel(xi0, yi0).0;
        let p10 = self.image.get_pixel(xi1, yi0).0;
        let p01 = self.image.get_pixel(xi0, yi1).0;
        let p11 = self.image.get_pixel(xi1, yi1).0;
        let mut out = [0u8; 3];
        for c in 0..3 {
            let top = p00[c] as f64 * (1.0 - tx) + p10[c] as f64 * tx;
            let bottom = p01[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
            out[c] = (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PanoDims {
    pub width: u32,
    pub height: u32,
}

/// Direction on the viewing sphere, relative to the panorama heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalDir {
    /// Azimuth in `[-180, 180)`, clockwise positive.
    pub psi: f64,
    /// Elevation in `[-90, 90]`.
    pub phi: f64,
}

impl SphericalDir {
    /// Direction of a ray given in the heading-aligned frame (x right, y down, z forward).
    pub fn from_ray(r: &Vector3<f64>) -> Self {
        let psi = r.x.atan2(r.z).to_degrees();
        let phi = (-r.y).atan2(r.x.hypot(r.z)).to_degrees();
        Self { psi: wrap_180(psi), phi }
    }

    /// Unit ray in the heading-aligned frame.
    pub fn to_ray(&self) -> Vector3<f64> {
        let (sp, cp) = self.psi.to_radians().sin_cos();
        let (se, ce) = self.phi.to_radians().sin_cos();
        Vector3::new(ce * sp, -se, ce * cp)
    }
}

pub fn pano_pixel_to_dir(dims: PanoDims, u: f64, v: f64) -> Result<SphericalDir, ProjectionError> {
    let (w, h) = (dims.width as f64, dims.height as f64);
    if !(0.0..w).contains(&u) || !(0.0..h).contains(&v) {
        return Err(ProjectionError::PixelOutOfBounds {
            u,
            v,
            width: dims.width,
            height: dims.height,
        });
    }
    Ok(SphericalDir {
        psi: (u + 0.5) / w * 360.0 - 180.0,
        phi: 90.0 - (v + 0.5) / h * 180.0,
    })
}

/// Inverse of [`pano_pixel_to_dir`]; `u` is wrapped into `[-0.5, W - 0.5)`.
pub fn dir_to_pano_pixel(dims: PanoDims, d: SphericalDir) -> (f64, f64) {
    let (w, h) = (dims.width as f64, dims.height as f64);
    let u = (wrap_180(d.psi) + 180.0) / 360.0 * w - 0.5;
    let v = (90.0 - d.phi) / 180.0 * h - 0.5;
    (u, v)
}

/// Pinhole intrinsics with square pixels and a centred principal point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub f: f64,
    pub p: f64,
}

impl Intrinsics {
    pub fn from_fov(theta_deg: f64, side: u32) -> Result<Self, ProjectionError> {
        if side == 0 || side % 2 != 0 {
            return Err(ProjectionError::InvalidOutputSize(side));
        }
        let p = side as f64 / 2.0;
        Ok(Self { f: focal_from_fov(theta_deg, p)?, p })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        intrinsic_matrix(self)
    }

    /// View-frame ray (z = 1) through the continuous image point `(x, y)`.
    pub fn back_project(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.p) / self.f, (y - self.p) / self.f, 1.0)
    }

    /// Continuous image point of a view-frame ray with positive depth.
    pub fn project(&self, r: &Vector3<f64>) -> Option<(f64, f64)> {
        if r.z <= 0.0 {
            return None;
        }
        Some((self.f * r.x / r.z + self.p, self.f * r.y / r.z + self.p))
    }
}

/// Focal length (px) giving a horizontal field of view `theta` over half-width `p`.
pub fn focal_from_fov(theta_deg: f64, half_size_p: f64) -> Result<f64, ProjectionError> {
    if !(theta_deg > 0.0 && theta_deg < 180.0) {
        return Err(ProjectionError::InvalidFov(theta_deg));
    }
    if !(half_size_p > 0.0 && half_size_p.is_finite()) {
        return Err(ProjectionError::InvalidHalfSize(half_size_p));
    }
    Ok(half_size_p / (theta_deg / 2.0).to_radians().tan())
}

pub fn intrinsic_matrix(i: &Intrinsics) -> Matrix3<f64> {
    Matrix3::new(i.f, 0.0, i.p, 0.0, i.f, i.p, 0.0, 0.0, 1.0)
}

/// Rotation taking view-frame rays into the heading-aligned panorama frame
/// for a view turned `alpha` degrees clockwise (seen from above).
pub fn yaw_rotation(alpha_deg: f64) -> Matrix3<f64> {
    let (s, c) = alpha_deg.to_radians().sin_cos();
    // y is down, so a clockwise turn seen from above is a rotation about +y
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// A square pinhole rendering of a panorama toward `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct RectilinearView {
    pub image: RgbImage,
    /// Projection direction relative to the panorama heading, degrees clockwise.
    pub alpha_deg: f64,
    pub fov_deg: f64,
    pub intrinsics: Intrinsics,
    pub pano_id: String,
}

impl RectilinearView {
    pub fn side(&self) -> u32 {
        self.image.width()
    }

    /// Identifier used by detectors and annotation tables.
    pub fn image_id(&self) -> String {
        format!("{}@{:.4}", self.pano_id, self.alpha_deg)
    }

    /// Panorama-relative direction of the continuous image point `(x, y)`.
    pub fn pixel_dir(&self, x: f64, y: f64) -> SphericalDir {
        let ray = yaw_rotation(self.alpha_deg) * self.intrinsics.back_project(x, y);
        SphericalDir::from_ray(&ray)
    }

    /// Continuous image point seen along a panorama-relative direction, if in front.
    pub fn dir_pixel(&self, d: SphericalDir) -> Option<(f64, f64)> {
        let ray = yaw_rotation(self.alpha_deg).transpose() * d.to_ray();
        self.intrinsics.project(&ray)
    }
}

/// Renders a `side × side` view toward `alpha` (relative to heading) with
/// horizontal field of view `theta`. `pano_id` labels the result.
pub fn render_rectilinear(
    pano: &EquirectImage,
    pano_id: &str,
    alpha_deg: f64,
    theta_deg: f64,
    side: u32,
) -> Result<RectilinearView, ProjectionError> {
    render_rectilinear_with_offset(pano, pano_id, alpha_deg, 0.0, theta_deg, side)
}

/// As [`render_rectilinear`], for panoramas whose center column sits at
/// `center_offset_deg` relative to the heading (180 for left-edge headings).
pub fn render_rectilinear_with_offset(
    pano: &EquirectImage,
    pano_id: &str,
    alpha_deg: f64,
    center_offset_deg: f64,
    theta_deg: f64,
    side: u32,
) -> Result<RectilinearView, ProjectionError> {
    let intrinsics = Intrinsics::from_fov(theta_deg, side)?;
    let dims = pano.dims();
    let rot = yaw_rotation(alpha_deg - center_offset_deg);
    let row_len = side as usize * 3;
    let mut buf = vec![0u8; row_len * side as usize];
    buf.par_chunks_mut(row_len).enumerate().for_each(|(y, row)| {
        for x in 0..side as usize {
            let ray = rot * intrinsics.back_project(x as f64 + 0.5, y as f64 + 0.5);
            let (u, v) = dir_to_pano_pixel(dims, SphericalDir::from_ray(&ray));
            let px = pano.sample_bilinear(u, v);
            row[x * 3..x * 3 + 3].copy_from_slice(&px);
        }
    });
    let image = RgbImage::from_raw(side, side, buf).expect("buffer sized to side²·3");
    Ok(RectilinearView {
        image,
        alpha_deg,
        fov_deg: theta_deg,
        intrinsics,
        pano_id: pano_id.to_string(),
    })
}

/// Uniform panorama, handy for tests and placeholders.
pub fn solid_pano(height: u32, color: [u8; 3]) -> EquirectImage {
    EquirectImage::new(RgbImage::from_pixel(2 * height, height, Rgb(color)))
        .expect("2:1 by construction")
}
