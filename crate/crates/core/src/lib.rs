//! Extraction of building-centred rectilinear views from sequences of
//! street-level equirectangular panoramas.
//!
//! The building is localized from two-view geometry between neighbouring
//! panoramas, placed on the map through a planar similarity, and every
//! panorama in the sequence is then re-projected toward it.

pub mod geo;
pub mod projection;
pub mod exif;
pub mod detection;
pub mod evaluation;
pub mod mvg;
pub mod acquisition;
pub mod synthetic;
pub mod pipeline;
