//! Raster decoding, 8-bit normalization, and JPEG/base64 payload encoding.
//!
//! DICOM inputs go through [`normalize_to_8bit`] (rescale, MONOCHROME1
//! inversion, min-max scaling); JPEG/PNG inputs are converted to RGB. Both
//! end as base64-encoded JPEG payloads ready for backend dispatch.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use image::codecs::jpeg::JpegEncoder;
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::dicom::{parse_dicom, DicomPixelData, Photometric};
use super::IngestError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    Dicom,
    Jpeg,
    Png,
}

impl std::fmt::Display for SourceFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            SourceFormat::Dicom => "DICOM",
            SourceFormat::Jpeg => "JPEG",
            SourceFormat::Png => "PNG",
        };
        f.write_str(name)
    }
}

/// Sniffs the container format from magic bytes.
pub fn detect_format(bytes: &[u8]) -> Option<SourceFormat> {
    if bytes.len() >= 132 && &bytes[128..132] == b"DICM" {
        return Some(SourceFormat::Dicom);
    }
    if bytes.starts_with(&[0xFF, 0xD8]) {
        return Some(SourceFormat::Jpeg);
    }
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        return Some(SourceFormat::Png);
    }
    None
}

/// A decoded image: a DICOM pixel matrix with its metadata, or an RGB raster.
#[derive(Debug, Clone)]
pub enum DecodedImage {
    Dicom(DicomPixelData),
    Rgb { image: RgbImage, source_format: SourceFormat },
}

impl DecodedImage {
    pub fn dimensions(&self) -> (u32, u32) {
        match self {
            DecodedImage::Dicom(d) => (d.cols, d.rows),
            DecodedImage::Rgb { image, .. } => image.dimensions(),
        }
    }

    pub fn source_format(&self) -> SourceFormat {
        match self {
            DecodedImage::Dicom(_) => SourceFormat::Dicom,
            DecodedImage::Rgb { source_format, .. } => *source_format,
        }
    }
}

/// Decodes DICOM, JPEG, or PNG bytes. The format is taken from the magic
/// bytes; `hint` is only consulted when sniffing fails.
pub fn decode_image(bytes: &[u8], hint: Option<SourceFormat>) -> Result<DecodedImage, IngestError> {
    let format = detect_format(bytes)
        .or(hint)
        .ok_or(IngestError::UnknownImageFormat)?;
    match format {
        SourceFormat::Dicom => Ok(DecodedImage::Dicom(parse_dicom(bytes)?)),
        SourceFormat::Jpeg | SourceFormat::Png => {
            let image_format = match format {
                SourceFormat::Jpeg => image::ImageFormat::Jpeg,
                _ => image::ImageFormat::Png,
            };
            let decoded = image::load_from_memory_with_format(bytes, image_format)
                .map_err(|e| IngestError::Decode { format, detail: e.to_string() })?;
            Ok(DecodedImage::Rgb { image: decoded.to_rgb8(), source_format: format })
        }
    }
}

/// Normalizes a DICOM pixel matrix to 8-bit grayscale.
///
/// Applies rescale slope/intercept, inverts MONOCHROME1, then min-max scales
/// to [0, 255] with round-half-up. Constant frames map to all zeros.
pub fn normalize_to_8bit(data: &DicomPixelData) -> Result<GrayImage, IngestError> {
    if data.rows == 0 || data.cols == 0 {
        return Err(IngestError::EmptyRaster);
    }
    let mut rescaled = Vec::with_capacity(data.pixels.len());
    for &p in &data.pixels {
        let mut v = data.rescale_slope * p + data.rescale_intercept;
        if !v.is_finite() {
            return Err(IngestError::NonFinitePixels);
        }
        if data.photometric == Photometric::Monochrome1 {
            v = -v;
        }
        rescaled.push(v);
    }
    let min = rescaled.iter().copied().fold(f64::INFINITY, f64::min);
    let max = rescaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let scaled: Vec<u8> = if range == 0.0 {
        vec![0u8; rescaled.len()]
    } else {
        rescaled
            .iter()
            .map(|v| {
                let s = (v - min) / range * 255.0;
                // Round half-up; s is non-negative by construction.
                (s + 0.5).floor() as u8
            })
            .collect()
    };
    GrayImage::from_raw(data.cols, data.rows, scaled).ok_or(IngestError::EmptyRaster)
}

/// An 8-bit raster ready for payload encoding, with its source format.
#[derive(Debug, Clone)]
pub struct Raster {
    pub data: RasterData,
    pub source_format: SourceFormat,
}

#[derive(Debug, Clone)]
pub enum RasterData {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl Raster {
    pub fn dimensions(&self) -> (u32, u32) {
        match &self.data {
            RasterData::Gray(g) => g.dimensions(),
            RasterData::Rgb(r) => r.dimensions(),
        }
    }
}

/// Decodes and normalizes source bytes into an encodable raster.
pub fn prepare_raster(bytes: &[u8], hint: Option<SourceFormat>) -> Result<Raster, IngestError> {
    match decode_image(bytes, hint)? {
        DecodedImage::Dicom(d) => Ok(Raster {
            data: RasterData::Gray(normalize_to_8bit(&d)?),
            source_format: SourceFormat::Dicom,
        }),
        DecodedImage::Rgb { image, source_format } => {
            Ok(Raster { data: RasterData::Rgb(image), source_format })
        }
    }
}

/// A JPEG payload with its base64 transport encoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedImage {
    pub jpeg_bytes: Vec<u8>,
    pub base64_text: String,
    pub mime_type: String,
    pub width: u32,
    pub height: u32,
    pub source_format: SourceFormat,
}

pub const DEFAULT_JPEG_QUALITY: u8 = 90;

/// JPEG-encodes a raster at the given quality (1-100) and base64-encodes the
/// result with the standard alphabet and padding.
pub fn encode_payload(raster: &Raster, quality: u8) -> Result<EncodedImage, IngestError> {
    let (width, height) = raster.dimensions();
    if width == 0 || height == 0 {
        return Err(IngestError::EmptyRaster);
    }
    if !(1..=100).contains(&quality) {
        return Err(IngestError::BadQuality { quality });
    }
    let mut jpeg_bytes = Vec::new();
    let encoder = JpegEncoder::new_with_quality(&mut jpeg_bytes, quality);
    let result = match &raster.data {
        RasterData::Gray(g) => g.write_with_encoder(encoder),
        RasterData::Rgb(r) => r.write_with_encoder(encoder),
    };
    result.map_err(|e| IngestError::Encode { detail: e.to_string() })?;
    let base64_text = BASE64.encode(&jpeg_bytes);
    Ok(EncodedImage {
        jpeg_bytes,
        base64_text,
        mime_type: "image/jpeg".to_string(),
        width,
        height,
        source_format: raster.source_format,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_matrix(values: &[f64], photometric: Photometric) -> DicomPixelData {
        DicomPixelData {
            rows: 1,
            cols: values.len() as u32,
            pixels: values.to_vec(),
            photometric,
            rescale_slope: 1.0,
            rescale_intercept: 0.0,
            bits_allocated: 16,
            bits_stored: 12,
            pixel_representation: 0,
        }
    }

    #[test]
    fn min_max_endpoints_map_to_0_and_255() {
        let img = normalize_to_8bit(&gray_matrix(&[0.0, 4095.0], Photometric::Monochrome2)).unwrap();
        assert_eq!(img.as_raw(), &vec![0u8, 255]);
    }

    #[test]
    fn hand_computed_normalization() {
        // round(1000/4095 * 255) = round(62.27) = 62
        let img =
            normalize_to_8bit(&gray_matrix(&[0.0, 1000.0, 4095.0], Photometric::Monochrome2))
                .unwrap();
        assert_eq!(img.as_raw(), &vec![0u8, 62, 255]);
    }

    #[test]
    fn constant_frame_maps_to_zero() {
        let img =
            normalize_to_8bit(&gray_matrix(&[100.0, 100.0, 100.0, 100.0], Photometric::Monochrome2))
                .unwrap();
        assert!(img.as_raw().iter().all(|p| *p == 0));
    }

    #[test]
    fn rounding_is_half_up_not_half_even() {
        // 509 * 255 / 510 = 254.5 exactly; half-up gives 255, half-even 254.
        let img =
            normalize_to_8bit(&gray_matrix(&[0.0, 509.0, 510.0], Photometric::Monochrome2))
                .unwrap();
        assert_eq!(img.as_raw(), &vec![0u8, 255, 255]);
    }

    #[test]
    fn monochrome1_is_inverted() {
        let img = normalize_to_8bit(&gray_matrix(&[0.0, 1000.0, 4095.0], Photometric::Monochrome1))
            .unwrap();
        // Inversion flips the ramp: largest stored value becomes black.
        assert_eq!(img.as_raw(), &vec![255u8, 193, 0]);
    }

    #[test]
    fn rescale_slope_and_intercept_are_applied() {
        let mut data = gray_matrix(&[0.0, 512.0, 1024.0, 2048.0], Photometric::Monochrome2);
        data.rescale_slope = 2.0;
        data.rescale_intercept = -1024.0;
        // Rescaled: -1024, 0, 1024, 3072 -> scaled over range 4096.
        let img = normalize_to_8bit(&data).unwrap();
        assert_eq!(img.as_raw(), &vec![0u8, 64, 128, 255]);
    }

    #[test]
    fn non_finite_rescale_is_a_data_error() {
        let mut data = gray_matrix(&[1.0, 2.0], Photometric::Monochrome2);
        data.rescale_slope = f64::INFINITY;
        assert!(matches!(normalize_to_8bit(&data), Err(IngestError::NonFinitePixels)));
    }

    #[test]
    fn normalize_output_in_range_and_monotone() {
        // Seeded pseudo-random matrices; monotonicity on sorted copies.
        for seed in 0..50u64 {
            let values: Vec<f64> = (0..64)
                .map(|i| (crate::util::derive_seed(seed, &format!("p{i}")) % 4096) as f64)
                .collect();
            let img =
                normalize_to_8bit(&gray_matrix(&values, Photometric::Monochrome2)).unwrap();
            let out = img.as_raw();
            let mut pairs: Vec<(f64, u8)> =
                values.iter().copied().zip(out.iter().copied()).collect();
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for w in pairs.windows(2) {
                assert!(w[1].1 >= w[0].1, "normalization must be monotone");
            }
        }
    }

    #[test]
    fn encode_payload_produces_jpeg_with_base64_round_trip() {
        let gray = GrayImage::from_fn(8, 8, |x, y| image::Luma([(16 * (x + y)) as u8]));
        let raster = Raster { data: RasterData::Gray(gray), source_format: SourceFormat::Dicom };
        let encoded = encode_payload(&raster, 90).unwrap();
        assert_eq!(&encoded.jpeg_bytes[0..2], &[0xFF, 0xD8]);
        assert_eq!(encoded.mime_type, "image/jpeg");
        assert_eq!((encoded.width, encoded.height), (8, 8));
        let decoded = BASE64.decode(&encoded.base64_text).unwrap();
        assert_eq!(decoded, encoded.jpeg_bytes);
    }

    #[test]
    fn zero_dimension_raster_is_rejected() {
        let raster = Raster {
            data: RasterData::Gray(GrayImage::new(0, 0)),
            source_format: SourceFormat::Png,
        };
        assert!(matches!(encode_payload(&raster, 90), Err(IngestError::EmptyRaster)));
    }

    #[test]
    fn jpeg_round_trip_stays_within_codec_tolerance() {
        // Smooth mid-range gradient; quality 90 must stay within +/-3.
        let gray = GrayImage::from_fn(8, 8, |x, y| image::Luma([(64 + 8 * (x + y)) as u8]));
        let raster =
            Raster { data: RasterData::Gray(gray.clone()), source_format: SourceFormat::Dicom };
        let encoded = encode_payload(&raster, 90).unwrap();
        let decoded = image::load_from_memory(&encoded.jpeg_bytes).unwrap().to_luma8();
        for (a, b) in gray.as_raw().iter().zip(decoded.as_raw()) {
            let diff = (i16::from(*a) - i16::from(*b)).abs();
            assert!(diff <= 3, "codec loss {diff} exceeds 3");
        }
    }

    #[test]
    fn garbage_bytes_name_the_detected_format() {
        let mut fake_jpeg = vec![0xFF, 0xD8, 0x00, 0x01, 0x02];
        fake_jpeg.extend_from_slice(&[0u8; 16]);
        match decode_image(&fake_jpeg, None) {
            Err(IngestError::Decode { format: SourceFormat::Jpeg, .. }) => {}
            other => panic!("expected jpeg decode error, got {other:?}"),
        }
        assert!(matches!(decode_image(b"????", None), Err(IngestError::UnknownImageFormat)));
    }
}
