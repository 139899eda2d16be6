//! Minimal EXIF reader: pulls the GPS position out of a JPEG.
//!
//! Only the Exif APP1 segment, IFD0 and the GPS IFD are visited, and only GPS
//! tags 0x0001..=0x0006 are decoded. Every offset is bounds-checked against
//! the TIFF block, so arbitrary input yields a value or an error.

use thiserror::Error;

use crate::geo::{GeoError, GeoPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExifError {
    #[error("not a JPEG stream (missing SOI marker)")]
    NotJpeg,
    #[error("no Exif APP1 segment")]
    NoExifSegment,
    #[error("truncated data: {0}")]
    Truncated(&'static str),
    #[error("malformed TIFF header")]
    BadTiffHeader,
    #[error("no GPS IFD")]
    NoGpsIfd,
    #[error("GPS tag {0:#06x} missing")]
    MissingGpsTag(u16),
    #[error("GPS tag {0:#06x} has an unexpected type or count")]
    BadGpsTag(u16),
    #[error("zero denominator in GPS rational (tag {0:#06x})")]
    ZeroDenominator(u16),
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(#[from] GeoError),
}

const TAG_GPS_IFD: u16 = 0x8825;
const TAG_LAT_REF: u16 = 0x0001;
const TAG_LAT: u16 = 0x0002;
const TAG_LON_REF: u16 = 0x0003;
const TAG_LON: u16 = 0x0004;
const TAG_ALT_REF: u16 = 0x0005;
const TAG_ALT: u16 = 0x0006;

const TYPE_BYTE: u16 = 1;
const TYPE_ASCII: u16 = 2;
const TYPE_RATIONAL: u16 = 5;

/// Unsigned TIFF rational.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rational {
    pub num: u32,
    pub den: u32,
}

impl Rational {
    fn value(&self, tag: u16) -> Result<f64, ExifError> {
        if self.den == 0 {
            return Err(ExifError::ZeroDenominator(tag));
        }
        Ok(self.num as f64 / self.den as f64)
    }
}

/// Raw GPS tags as stored in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct GpsTagSet {
    pub lat_ref: u8,
    pub lat_dms: [Rational; 3],
    pub lon_ref: u8,
    pub lon_dms: [Rational; 3],
    /// Altitude and whether it is below sea level.
    pub alt: Option<(Rational, bool)>,
}

impl GpsTagSet {
    pub fn to_geo(&self) -> Result<GeoPoint, ExifError> {
        let dms = |d: &[Rational; 3], tag| -> Result<f64, ExifError> {
            Ok(d[0].value(tag)? + d[1].value(tag)? / 60.0 + d[2].value(tag)? / 3600.0)
        };
        let mut lat = dms(&self.lat_dms, TAG_LAT)?;
        let mut lon = dms(&self.lon_dms, TAG_LON)?;
        match self.lat_ref {
            b'N' => {}
            b'S' => lat = -lat,
            _ => return Err(ExifError::BadGpsTag(TAG_LAT_REF)),
        }
        match self.lon_ref {
            b'E' => {}
            b'W' => lon = -lon,
            _ => return Err(ExifError::BadGpsTag(TAG_LON_REF)),
        }
        let alt = match self.alt {
            Some((r, below)) => {
                let a = r.value(TAG_ALT)?;
                Some(if below { -a } else { a })
            }
            None => None,
        };
        Ok(GeoPoint::with_alt(lat, lon, alt)?)
    }
}

#[derive(Clone, Copy)]
enum Order {
    Little,
    Big,
}

/// Bounds-checked view over the TIFF block.
struct Tiff<'a> {
    data: &'a [u8],
    order: Order,
}

impl<'a> Tiff<'a> {
    fn u16_at(&self, off: usize) -> Result<u16, ExifError> {
        let b = self
            .data
            .get(off..off.checked_add(2).ok_or(ExifError::Truncated("offset overflow"))?)
            .ok_or(ExifError::Truncated("u16 past end of TIFF block"))?;
        Ok(match self.order {
            Order::Little => u16::from_le_bytes([b[0], b[1]]),
            Order::Big => u16::from_be_bytes([b[0], b[1]]),
        })
    }

    fn u32_at(&self, off: usize) -> Result<u32, ExifError> {
        let b = self
            .data
            .get(off..off.checked_add(4).ok_or(ExifError::Truncated("offset overflow"))?)
            .ok_or(ExifError::Truncated("u32 past end of TIFF block"))?;
        let b = [b[0], b[1], b[2], b[3]];
        Ok(match self.order {
            Order::Little => u32::from_le_bytes(b),
            Order::Big => u32::from_be_bytes(b),
        })
    }

    fn entries(&self, ifd_off: usize) -> Result<Vec<Entry>, ExifError> {
        let count = self.u16_at(ifd_off)? as usize;
        let needed = 2 + count * 12;
        if ifd_off.saturating_add(needed) > self.data.len() {
            return Err(ExifError::Truncated("IFD entries past end of TIFF block"));
        }
        (0..count)
            .map(|i| {
                let e = ifd_off + 2 + i * 12;
                Ok(Entry {
                    tag: self.u16_at(e)?,
                    typ: self.u16_at(e + 2)?,
                    count: self.u32_at(e + 4)?,
                    value_off: e + 8,
                })
            })
            .collect()
    }

    /// Offset of the value bytes, following the pointer when they do not fit inline.
    fn value_offset(&self, e: &Entry, elem_size: usize) -> Result<usize, ExifError> {
        let size = (e.count as usize)
            .checked_mul(elem_size)
            .ok_or(ExifError::Truncated("value size overflow"))?;
        let off = if size <= 4 { e.value_off } else { self.u32_at(e.value_off)? as usize };
        if off.checked_add(size).map_or(true, |end| end > self.data.len()) {
            return Err(ExifError::Truncated("tag value past end of TIFF block"));
        }
        Ok(off)
    }

    fn rationals<const N: usize>(&self, e: &Entry) -> Result<[Rational; N], ExifError> {
        if e.typ != TYPE_RATIONAL || (e.count as usize) < N {
            return Err(ExifError::BadGpsTag(e.tag));
        }
        let off = self.value_offset(e, 8)?;
        let mut out = [Rational { num: 0, den: 0 }; N];
        for (i, r) in out.iter_mut().enumerate() {
            r.num = self.u32_at(off + i * 8)?;
            r.den = self.u32_at(off + i * 8 + 4)?;
        }
        Ok(out)
    }

    fn first_byte(&self, e: &Entry) -> Result<u8, ExifError> {
        if !(e.typ == TYPE_ASCII || e.typ == TYPE_BYTE) || e.count == 0 {
            return Err(ExifError::BadGpsTag(e.tag));
        }
        let off = self.value_offset(e, 1)?;
        Ok(self.data[off])
    }
}

struct Entry {
    tag: u16,
    typ: u16,
    count: u32,
    value_off: usize,
}

/// Locates the TIFF block inside the Exif APP1 segment of a JPEG stream.
pub fn find_exif_tiff(jpeg: &[u8]) -> Result<&[u8], ExifError> {
    if jpeg.len() < 2 || jpeg[0] != 0xFF || jpeg[1] != 0xD8 {
        return Err(ExifError::NotJpeg);
    }
    let mut pos = 2;
    loop {
        // skip fill bytes before a marker
        while pos < jpeg.len() && jpeg[pos] == 0xFF && jpeg.get(pos + 1) == Some(&0xFF) {
            pos += 1;
        }
        if pos + 4 > jpeg.len() {
            return Err(ExifError::NoExifSegment);
        }
        if jpeg[pos] != 0xFF {
            return Err(ExifError::NoExifSegment);
        }
        let marker = jpeg[pos + 1];
        match marker {
            // start of scan / end of image: no metadata beyond this point
            0xDA | 0xD9 => return Err(ExifError::NoExifSegment),
            // standalone markers carry no length
            0x01 | 0xD0..=0xD7 => {
                pos += 2;
                continue;
            }
            _ => {}
        }
        let len = u16::from_be_bytes([jpeg[pos + 2], jpeg[pos + 3]]) as usize;
        if len < 2 {
            return Err(ExifError::Truncated("segment length below 2"));
        }
        let body_start = pos + 4;
        let body_end = pos + 2 + len;
        if body_end > jpeg.len() {
            return Err(ExifError::Truncated("segment extends past end of stream"));
        }
        let body = &jpeg[body_start..body_end];
        if marker == 0xE1 && body.len() >= 6 && &body[..6] == b"Exif\0\0" {
            return Ok(&body[6..]);
        }
        pos = body_end;
    }
}

/// Decodes the raw GPS tags from a TIFF block.
pub fn parse_gps_tags(tiff: &[u8]) -> Result<GpsTagSet, ExifError> {
    if tiff.len() < 8 {
        return Err(ExifError::Truncated("TIFF header"));
    }
    let order = match &tiff[..2] {
        b"II" => Order::Little,
        b"MM" => Order::Big,
        _ => return Err(ExifError::BadTiffHeader),
    };
    let t = Tiff { data: tiff, order };
    if t.u16_at(2)? != 42 {
        return Err(ExifError::BadTiffHeader);
    }
    let ifd0 = t.u32_at(4)? as usize;
    let gps_off = t
        .entries(ifd0)?
        .into_iter()
        .find(|e| e.tag == TAG_GPS_IFD)
        .ok_or(ExifError::NoGpsIfd)?;
    let gps_ifd = t.u32_at(gps_off.value_off)? as usize;
    let entries = t.entries(gps_ifd)?;
    let find = |tag| entries.iter().find(|e| e.tag == tag);
    let need = |tag| find(tag).ok_or(ExifError::MissingGpsTag(tag));

    let lat_ref = t.first_byte(need(TAG_LAT_REF)?)?;
    let lat_dms = t.rationals::<3>(need(TAG_LAT)?)?;
    let lon_ref = t.first_byte(need(TAG_LON_REF)?)?;
    let lon_dms = t.rationals::<3>(need(TAG_LON)?)?;
    let alt = match find(TAG_ALT) {
        Some(e) => {
            let [r] = t.rationals::<1>(e)?;
            let below = match find(TAG_ALT_REF) {
                Some(e) => t.first_byte(e)? == 1,
                None => false,
            };
            Some((r, below))
        }
        None => None,
    };
    Ok(GpsTagSet { lat_ref, lat_dms, lon_ref, lon_dms, alt })
}

/// GPS position recorded in a geotagged JPEG.
pub fn extract_gps(jpeg: &[u8]) -> Result<GeoPoint, ExifError> {
    parse_gps_tags(find_exif_tiff(jpeg)?)?.to_geo()
}

/// Writes a bare JPEG header carrying only an Exif GPS block, followed by
/// `trailer` (usually the remainder of an encoded JPEG after its SOI).
///
/// Used to geotag synthetic inputs; coordinates are stored with
/// 1/10000-second resolution.
pub fn write_gps_jpeg(p: &GeoPoint, big_endian: bool, trailer: &[u8]) -> Vec<u8> {
    let w16 = |v: u16| if big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
    let w32 = |v: u32| if big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
    let dms = |deg: f64| -> [(u32, u32); 3] {
        let total = (deg.abs() * 3600.0 * 10_000.0).round() as u64;
        let d = total / (3600 * 10_000);
        let m = (total / (60 * 10_000)) % 60;
        let s = total % (60 * 10_000);
        [(d as u32, 1), (m as u32, 1), (s as u32, 10_000)]
    };

    let mut t = Vec::new();
    t.extend_from_slice(if big_endian { b"MM" } else { b"II" });
    t.extend_from_slice(&w16(42));
    t.extend_from_slice(&w32(8));
    // IFD0: one entry pointing at the GPS IFD
    t.extend_from_slice(&w16(1));
    t.extend_from_slice(&w16(TAG_GPS_IFD));
    t.extend_from_slice(&w16(4));
    t.extend_from_slice(&w32(1));
    let gps_ifd = 8 + 2 + 12 + 4;
    t.extend_from_slice(&w32(gps_ifd as u32));
    t.extend_from_slice(&w32(0));

    let n_entries = if p.alt.is_some() { 6 } else { 4 };
    let data_start = gps_ifd + 2 + n_entries * 12 + 4;
    let mut data = Vec::new();
    let mut entries = Vec::new();
    let ascii = |c: u8| [c, 0, 0, 0];
    entries.push((TAG_LAT_REF, TYPE_ASCII, 2u32, ascii(if p.lat < 0.0 { b'S' } else { b'N' })));
    entries.push((TAG_LAT, TYPE_RATIONAL, 3, w32((data_start + data.len()) as u32)));
    for (n, d) in dms(p.lat) {
        data.extend_from_slice(&w32(n));
        data.extend_from_slice(&w32(d));
    }
    entries.push((TAG_LON_REF, TYPE_ASCII, 2, ascii(if p.lon < 0.0 { b'W' } else { b'E' })));
    entries.push((TAG_LON, TYPE_RATIONAL, 3, w32((data_start + data.len()) as u32)));
    for (n, d) in dms(p.lon) {
        data.extend_from_slice(&w32(n));
        data.extend_from_slice(&w32(d));
    }
    if let Some(alt) = p.alt {
        entries.push((TAG_ALT_REF, TYPE_BYTE, 1, [u8::from(alt < 0.0), 0, 0, 0]));
        entries.push((TAG_ALT, TYPE_RATIONAL, 1, w32((data_start + data.len()) as u32)));
        data.extend_from_slice(&w32((alt.abs() * 1000.0).round() as u32));
        data.extend_from_slice(&w32(1000));
    }
    t.extend_from_slice(&w16(n_entries as u16));
    for (tag, typ, count, value) in entries {
        t.extend_from_slice(&w16(tag));
        t.extend_from_slice(&w16(typ));
        t.extend_from_slice(&w32(count));
        t.extend_from_slice(&value);
    }
    t.extend_from_slice(&w32(0));
    t.extend_from_slice(&data);

    let mut out = vec![0xFF, 0xD8, 0xFF, 0xE1];
    out.extend_from_slice(&((t.len() + 8) as u16).to_be_bytes());
    out.extend_from_slice(b"Exif\0\0");
    out.extend_from_slice(&t);
    out.extend_from_slice(trailer);
    out
}
