//! Minimal DICOM reader for single-frame, uncompressed, little-endian files.
//!
//! Covers what a radiograph preprocessing pipeline needs: pixel matrix,
//! photometric interpretation, rescale slope/intercept, and bit depth, for
//! the implicit and explicit VR little endian transfer syntaxes. Compressed,
//! big-endian, and multi-frame objects are rejected with explicit errors.
//! Test fixtures are produced by an independent writer (`dicom-object`) so
//! the two sides of the round trip share no code.

use thiserror::Error;

const IMPLICIT_VR_LE: &str = "1.2.840.10008.1.2";
const EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DicomError {
    #[error("not a DICOM file (missing DICM magic)")]
    NotDicom,
    #[error("truncated DICOM stream while reading {context}")]
    Truncated { context: &'static str },
    #[error("unsupported DICOM feature: {what}")]
    Unsupported { what: String },
    #[error("multi-frame DICOM ({frames} frames) is not supported")]
    MultiFrame { frames: u32 },
    #[error("required element {name} is missing")]
    MissingElement { name: &'static str },
    #[error("malformed DICOM element: {detail}")]
    Malformed { detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Photometric {
    Monochrome1,
    Monochrome2,
}

/// Decoded pixel matrix plus the metadata normalization needs.
#[derive(Debug, Clone)]
pub struct DicomPixelData {
    pub rows: u32,
    pub cols: u32,
    /// Stored values (before rescale), row-major.
    pub pixels: Vec<f64>,
    pub photometric: Photometric,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    pub bits_allocated: u16,
    pub bits_stored: u16,
    pub pixel_representation: u16,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], DicomError> {
        if self.pos + n > self.data.len() {
            return Err(DicomError::Truncated { context });
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, context: &'static str) -> Result<u16, DicomError> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, DicomError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn peek_u16(&self) -> Option<u16> {
        self.data
            .get(self.pos..self.pos + 2)
            .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }

    fn eof(&self) -> bool {
        self.pos >= self.data.len()
    }
}

struct Element<'a> {
    group: u16,
    element: u16,
    /// `None` encodes undefined length (0xFFFFFFFF).
    value: Option<&'a [u8]>,
}

/// VRs that use the 4-byte length form (with 2 reserved bytes) in explicit VR.
fn is_long_vr(vr: &[u8]) -> bool {
    matches!(vr, b"OB" | b"OW" | b"OF" | b"OL" | b"OV" | b"SQ" | b"UC" | b"UR" | b"UT" | b"UN")
}

fn read_explicit<'a>(cursor: &mut Cursor<'a>) -> Result<Element<'a>, DicomError> {
    let group = cursor.u16("element group")?;
    let element = cursor.u16("element number")?;
    // Item / delimiter tags have no VR even in explicit syntax.
    if group == 0xFFFE {
        let length = cursor.u32("item length")?;
        let value = if length == 0xFFFF_FFFF {
            None
        } else {
            Some(cursor.take(length as usize, "item value")?)
        };
        return Ok(Element { group, element, value });
    }
    let vr: [u8; 2] = cursor.take(2, "VR")?.try_into().unwrap();
    let length = if is_long_vr(&vr) {
        cursor.take(2, "reserved VR bytes")?;
        cursor.u32("element length")?
    } else {
        u32::from(cursor.u16("element length")?)
    };
    let value = if length == 0xFFFF_FFFF {
        None
    } else {
        Some(cursor.take(length as usize, "element value")?)
    };
    Ok(Element { group, element, value })
}

fn read_implicit<'a>(cursor: &mut Cursor<'a>) -> Result<Element<'a>, DicomError> {
    let group = cursor.u16("element group")?;
    let element = cursor.u16("element number")?;
    let length = cursor.u32("element length")?;
    let value = if length == 0xFFFF_FFFF {
        None
    } else {
        Some(cursor.take(length as usize, "element value")?)
    };
    Ok(Element { group, element, value })
}

/// Skips an undefined-length sequence: defined-length items are skipped by
/// size, nested undefined-length items are rejected.
fn skip_undefined_sequence(cursor: &mut Cursor<'_>, explicit: bool) -> Result<(), DicomError> {
    loop {
        let item =
            if explicit { read_explicit(cursor)? } else { read_implicit(cursor)? };
        match (item.group, item.element) {
            (0xFFFE, 0xE0DD) => return Ok(()),
            (0xFFFE, 0xE000) => {
                if item.value.is_none() {
                    return Err(DicomError::Unsupported {
                        what: "undefined-length sequence item".into(),
                    });
                }
            }
            _ => {
                return Err(DicomError::Malformed {
                    detail: format!(
                        "unexpected tag ({:04X},{:04X}) inside sequence",
                        item.group, item.element
                    ),
                })
            }
        }
    }
}

fn ascii_value(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).trim_end_matches(['\0', ' ']).trim().to_string()
}

fn u16_value(bytes: &[u8], name: &'static str) -> Result<u16, DicomError> {
    if bytes.len() < 2 {
        return Err(DicomError::Malformed { detail: format!("{name} shorter than 2 bytes") });
    }
    Ok(u16::from_le_bytes(bytes[0..2].try_into().unwrap()))
}

fn decimal_value(bytes: &[u8], name: &'static str) -> Result<f64, DicomError> {
    ascii_value(bytes)
        .parse::<f64>()
        .map_err(|_| DicomError::Malformed { detail: format!("{name} is not a decimal string") })
}

/// Parses a DICOM Part 10 file into its pixel matrix and metadata.
pub fn parse_dicom(bytes: &[u8]) -> Result<DicomPixelData, DicomError> {
    if bytes.len() < 132 || &bytes[128..132] != b"DICM" {
        return Err(DicomError::NotDicom);
    }
    let mut cursor = Cursor { data: bytes, pos: 132 };

    // File meta group (0002,xxxx) is always explicit VR little endian.
    let mut transfer_syntax = String::new();
    while let Some(group) = cursor.peek_u16() {
        if group != 0x0002 {
            break;
        }
        let element = read_explicit(&mut cursor)?;
        if element.group == 0x0002 && element.element == 0x0010 {
            let value = element
                .value
                .ok_or(DicomError::Malformed { detail: "transfer syntax UID".into() })?;
            transfer_syntax = ascii_value(value);
        }
    }
    let explicit = match transfer_syntax.as_str() {
        EXPLICIT_VR_LE => true,
        IMPLICIT_VR_LE => false,
        "" => return Err(DicomError::MissingElement { name: "TransferSyntaxUID (0002,0010)" }),
        other => {
            return Err(DicomError::Unsupported { what: format!("transfer syntax {other}") })
        }
    };

    let mut rows: Option<u16> = None;
    let mut cols: Option<u16> = None;
    let mut photometric: Option<Photometric> = None;
    let mut samples_per_pixel = 1u16;
    let mut bits_allocated: Option<u16> = None;
    let mut bits_stored: Option<u16> = None;
    let mut pixel_representation = 0u16;
    let mut slope = 1.0f64;
    let mut intercept = 0.0f64;
    let mut frames = 1u32;
    let mut pixel_data: Option<&[u8]> = None;

    while !cursor.eof() {
        let element =
            if explicit { read_explicit(&mut cursor)? } else { read_implicit(&mut cursor)? };
        let value = match element.value {
            Some(v) => v,
            None => {
                if (element.group, element.element) == (0x7FE0, 0x0010) {
                    return Err(DicomError::Unsupported {
                        what: "encapsulated (compressed) pixel data".into(),
                    });
                }
                skip_undefined_sequence(&mut cursor, explicit)?;
                continue;
            }
        };
        match (element.group, element.element) {
            (0x0028, 0x0002) => samples_per_pixel = u16_value(value, "SamplesPerPixel")?,
            (0x0028, 0x0004) => {
                photometric = Some(match ascii_value(value).as_str() {
                    "MONOCHROME1" => Photometric::Monochrome1,
                    "MONOCHROME2" => Photometric::Monochrome2,
                    other => {
                        return Err(DicomError::Unsupported {
                            what: format!("photometric interpretation {other}"),
                        })
                    }
                })
            }
            (0x0028, 0x0008) => {
                let text = ascii_value(value);
                frames = text.parse::<u32>().map_err(|_| DicomError::Malformed {
                    detail: "NumberOfFrames is not an integer".into(),
                })?;
            }
            (0x0028, 0x0010) => rows = Some(u16_value(value, "Rows")?),
            (0x0028, 0x0011) => cols = Some(u16_value(value, "Columns")?),
            (0x0028, 0x0100) => bits_allocated = Some(u16_value(value, "BitsAllocated")?),
            (0x0028, 0x0101) => bits_stored = Some(u16_value(value, "BitsStored")?),
            (0x0028, 0x0103) => pixel_representation = u16_value(value, "PixelRepresentation")?,
            (0x0028, 0x1052) => intercept = decimal_value(value, "RescaleIntercept")?,
            (0x0028, 0x1053) => slope = decimal_value(value, "RescaleSlope")?,
            (0x7FE0, 0x0010) => {
                pixel_data = Some(value);
                break;
            }
            _ => {}
        }
    }

    if frames > 1 {
        return Err(DicomError::MultiFrame { frames });
    }
    if samples_per_pixel != 1 {
        return Err(DicomError::Unsupported {
            what: format!("{samples_per_pixel} samples per pixel"),
        });
    }
    let rows = u32::from(rows.ok_or(DicomError::MissingElement { name: "Rows (0028,0010)" })?);
    let cols = u32::from(cols.ok_or(DicomError::MissingElement { name: "Columns (0028,0011)" })?);
    let bits_allocated =
        bits_allocated.ok_or(DicomError::MissingElement { name: "BitsAllocated (0028,0100)" })?;
    let photometric = photometric
        .ok_or(DicomError::MissingElement { name: "PhotometricInterpretation (0028,0004)" })?;
    let pixel_data =
        pixel_data.ok_or(DicomError::MissingElement { name: "PixelData (7FE0,0010)" })?;

    let bytes_per_sample = match bits_allocated {
        8 => 1usize,
        16 => 2usize,
        other => {
            return Err(DicomError::Unsupported { what: format!("{other} bits allocated") })
        }
    };
    let expected = rows as usize * cols as usize * bytes_per_sample;
    if pixel_data.len() < expected {
        return Err(DicomError::Truncated { context: "pixel data" });
    }

    let pixels: Vec<f64> = match (bytes_per_sample, pixel_representation) {
        (1, _) => pixel_data[..expected].iter().map(|b| f64::from(*b)).collect(),
        (2, 0) => pixel_data[..expected]
            .chunks_exact(2)
            .map(|c| f64::from(u16::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        (2, _) => pixel_data[..expected]
            .chunks_exact(2)
            .map(|c| f64::from(i16::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        _ => unreachable!("bytes_per_sample checked above"),
    };

    Ok(DicomPixelData {
        rows,
        cols,
        pixels,
        photometric,
        rescale_slope: slope,
        rescale_intercept: intercept,
        bits_allocated,
        bits_stored: bits_stored.unwrap_or(bits_allocated),
        pixel_representation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_dicom_bytes() {
        assert_eq!(parse_dicom(b"not a dicom file").unwrap_err(), DicomError::NotDicom);
        let mut short = vec![0u8; 130];
        short.extend_from_slice(b"DI");
        assert_eq!(parse_dicom(&short).unwrap_err(), DicomError::NotDicom);
    }

    #[test]
    fn truncated_after_magic_is_reported() {
        let mut bytes = vec![0u8; 128];
        bytes.extend_from_slice(b"DICM");
        bytes.extend_from_slice(&[0x02, 0x00, 0x10, 0x00]); // (0002,0010) cut off
        assert!(matches!(parse_dicom(&bytes), Err(DicomError::Truncated { .. })));
    }
}
