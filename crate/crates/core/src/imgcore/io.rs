//! Binary PGM (P5) and PNG codecs for bands, label masks and renders.
//!
//! Integer samples map to `[0, 1]` by dividing by the format's maximum
//! value. NDVI bands are stored through the affine remap `(v + 1) / 2` and
//! mapped back on read. Quantization rounds half up.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use super::{Band, BandImage, LabelMask, ProbabilityMap, RgbImage};
use crate::error::{Error, Result};

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn maxval(self) -> u16 {
        match self {
            BitDepth::Eight => u8::MAX as u16,
            BitDepth::Sixteen => u16::MAX,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(BitDepth::Eight),
            16 => Ok(BitDepth::Sixteen),
            other => Err(Error::UnsupportedBitDepth(format!("{other} bits"))),
        }
    }
}

/// Decoded single-channel integer raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct GrayRaster {
    pub width: u32,
    pub height: u32,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn is_png_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

pub(crate) fn decode_gray(bytes: &[u8], origin: &str) -> Result<GrayRaster> {
    if bytes.starts_with(b"P5") {
        decode_pgm(bytes, origin)
    } else if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png_gray(bytes, origin)
    } else {
        Err(Error::MalformedHeader {
            path: origin.to_string(),
            reason: "neither a binary PGM (P5) nor a PNG signature".into(),
        })
    }
}

pub(crate) fn decode_pgm(bytes: &[u8], origin: &str) -> Result<GrayRaster> {
    let malformed = |reason: &str| Error::MalformedHeader {
        path: origin.to_string(),
        reason: reason.to_string(),
    };
    if !bytes.starts_with(b"P5") {
        return Err(malformed("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(malformed("header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(malformed("missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(malformed("width and height must be positive"));
    }
    if maxval == 0 || maxval > u16::MAX as u32 {
        return Err(Error::UnsupportedBitDepth(format!("PGM maxval {maxval}")));
    }
    let n = width as usize * height as usize;
    let bytes_per_sample = if maxval < 256 { 1 } else { 2 };
    let payload = &bytes[pos..];
    let expected = n * bytes_per_sample;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            path: origin.to_string(),
            expected,
            found: payload.len(),
        });
    }
    let samples: Vec<u16> = if bytes_per_sample == 1 {
        payload[..n].iter().map(|&b| b as u16).collect()
    } else {
        payload[..expected]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    if let Some(s) = samples.iter().find(|&&s| s as u32 > maxval) {
        return Err(malformed(&format!("sample {s} exceeds maxval {maxval}")));
    }
    Ok(GrayRaster {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

pub(crate) fn encode_pgm(raster: &GrayRaster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", raster.width, raster.height, raster.maxval).into_bytes();
    if raster.maxval < 256 {
        out.extend(raster.samples.iter().map(|&s| s as u8));
    } else {
        out.extend(raster.samples.iter().flat_map(|s| s.to_be_bytes()));
    }
    out
}

fn png_error(origin: &str, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: origin.into(),
        message: e.to_string(),
    }
}

fn decode_png(bytes: &[u8], origin: &str) -> Result<(png::OutputInfo, Vec<u8>)> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| png_error(origin, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_error(origin, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| match e {
        png::DecodingError::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::TruncatedPayload {
                path: origin.to_string(),
                expected: size,
                found: 0,
            }
        }
        other => png_error(origin, other),
    })?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

fn decode_png_gray(bytes: &[u8], origin: &str) -> Result<GrayRaster> {
    let (info, buf) = decode_png(bytes, origin)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::UnsupportedBitDepth(format!(
            "PNG colour type {:?}; bands must be single-channel grayscale",
            info.color_type
        )));
    }
    let samples = match info.bit_depth {
        png::BitDepth::Eight => buf.iter().map(|&b| b as u16).collect(),
        png::BitDepth::Sixteen => buf
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect(),
        other => {
            return Err(Error::UnsupportedBitDepth(format!("PNG {other:?}")));
        }
    };
    let maxval = if info.bit_depth == png::BitDepth::Eight {
        u8::MAX as u16
    } else {
        u16::MAX
    };
    Ok(GrayRaster {
        width: info.width,
        height: info.height,
        maxval,
        samples,
    })
}

fn encode_png(
    width: u32,
    height: u32,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
    origin: &Path,
) -> Result<Vec<u8>> {
    let origin = origin.display().to_string();
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width, height);
        encoder.set_color(color);
        encoder.set_depth(depth);
        let mut writer = encoder.write_header().map_err(|e| png_error(&origin, e))?;
        writer
            .write_image_data(data)
            .map_err(|e| png_error(&origin, e))?;
        writer.finish().map_err(|e| png_error(&origin, e))?;
    }
    Ok(out)
}

fn encode_png_gray(raster: &GrayRaster, origin: &Path) -> Result<Vec<u8>> {
    if raster.maxval == u16::MAX {
        let data: Vec<u8> = raster.samples.iter().flat_map(|s| s.to_be_bytes()).collect();
        encode_png(
            raster.width,
            raster.height,
            png::ColorType::Grayscale,
            png::BitDepth::Sixteen,
            &data,
            origin,
        )
    } else {
        let data: Vec<u8> = raster.samples.iter().map(|&s| s as u8).collect();
        encode_png(
            raster.width,
            raster.height,
            png::ColorType::Grayscale,
            png::BitDepth::Eight,
            &data,
            origin,
        )
    }
}

/// Maps a sample to the stored `[0, 1]` range for its band.
fn to_unit(band: &Band, v: f64) -> f64 {
    let u = if *band == Band::Ndvi { (v + 1.0) / 2.0 } else { v };
    u.clamp(0.0, 1.0)
}

fn from_unit(band: &Band, u: f64) -> f64 {
    if *band == Band::Ndvi {
        2.0 * u - 1.0
    } else {
        u
    }
}

pub(crate) fn quantize(u: f64, maxval: u16) -> u16 {
    (u * maxval as f64 + 0.5).floor().clamp(0.0, maxval as f64) as u16
}

pub(crate) fn band_to_raster(img: &BandImage, depth: BitDepth) -> GrayRaster {
    let maxval = depth.maxval();
    GrayRaster {
        width: img.width(),
        height: img.height(),
        maxval,
        samples: img
            .data()
            .iter()
            .map(|&v| quantize(to_unit(img.band(), v), maxval))
            .collect(),
    }
}

pub(crate) fn raster_to_band(raster: GrayRaster, band: Band) -> Result<BandImage> {
    let scale = raster.maxval as f64;
    let data = raster
        .samples
        .iter()
        .map(|&s| from_unit(&band, s as f64 / scale))
        .collect();
    BandImage::new(raster.width, raster.height, band, data)
}

/// Reads an 8/16-bit grayscale PGM or PNG; the format is sniffed from the
/// file signature.
pub fn read_band_image(path: impl AsRef<Path>, band: Band) -> Result<BandImage> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let raster = decode_gray(&bytes, &path.display().to_string())?;
    raster_to_band(raster, band)
}

/// Writes a band as PNG when the extension is `.png`, binary PGM otherwise.
pub fn write_band_image(img: &BandImage, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let raster = band_to_raster(img, depth);
    let bytes = if is_png_path(path) {
        encode_png_gray(&raster, path)?
    } else {
        encode_pgm(&raster)
    };
    write_bytes(path, &bytes)
}

/// Writes class ids as raw pixel values of an 8-bit grayscale PNG.
pub fn write_label_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(
        mask.width(),
        mask.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        mask.labels(),
        path,
    )?;
    write_bytes(path, &bytes)
}

pub fn read_label_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let raster = decode_gray(&bytes, &path.display().to_string())?;
    if raster.maxval != u8::MAX as u16 {
        return Err(Error::UnsupportedBitDepth(
            "label masks must be 8-bit".to_string(),
        ));
    }
    let labels = raster.samples.iter().map(|&s| s as u8).collect();
    LabelMask::new(raster.width, raster.height, labels)
}

pub fn write_rgb_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(
        img.width(),
        img.height(),
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        img.data(),
        path,
    )?;
    write_bytes(path, &bytes)
}

pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let bytes = read_bytes(path)?;
    let (info, buf) = decode_png(&bytes, &origin)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedBitDepth(format!(
            "expected 8-bit RGB, found {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    RgbImage::new(info.width, info.height, buf)
}

const PROB_MAGIC: &[u8; 8] = b"CWPROB01";

/// Writes a probability map as an 8-byte magic, `u32` width, height and
/// class count, then pixel-major little-endian `f32` values.
pub fn write_probability_map(pm: &ProbabilityMap, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::with_capacity(20 + 4 * pm.probs().len());
    bytes.extend_from_slice(PROB_MAGIC);
    for v in [pm.width(), pm.height(), pm.num_classes() as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for &p in pm.probs() {
        bytes.extend_from_slice(&(p as f32).to_le_bytes());
    }
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_probability_map(path: impl AsRef<Path>) -> Result<ProbabilityMap> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let bytes = read_bytes(path)?;
    if bytes.len() < 20 || &bytes[..8] != PROB_MAGIC {
        return Err(Error::MalformedHeader {
            path: origin,
            reason: "not a probability map".into(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes"));
    let (w, h, c) = (word(0), word(1), word(2) as usize);
    let expected = 20 + 4 * w as usize * h as usize * c;
    if bytes.len() != expected {
        return Err(Error::TruncatedPayload {
            path: origin,
            expected,
            found: bytes.len(),
        });
    }
    let probs = bytes[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    ProbabilityMap::new(w, h, c, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pgm(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut b = header.as_bytes().to_vec();
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn reads_8bit_pgm_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        fs::write(&path, pgm("P5 2 2 255\n", &[0, 255, 128, 64])).unwrap();
        let img = read_band_image(&path, Band::Nir).unwrap();
        assert_eq!(img.dims(), (2, 2));
        assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn reads_16bit_pgm_max_to_one() {
        let raster = decode_pgm(&pgm("P5\n# comment\n2 1\n65535\n", &[255; 4]), "t").unwrap();
        let img = raster_to_band(raster, Band::Red).unwrap();
        assert_eq!(img.data(), &[1.0, 1.0]);
    }

    #[test]
    fn pgm_errors() {
        assert!(matches!(
            decode_pgm(&pgm("P5 0 2 255\n", &[]), "t"),
            Err(Error::MalformedHeader { .. })
        ));
        assert!(matches!(
            decode_pgm(&pgm("P5 2 2 255\n", &[1, 2, 3]), "t"),
            Err(Error::TruncatedPayload {
                expected: 4,
                found: 3,
                ..
            })
        ));
        assert!(matches!(
            decode_pgm(&pgm("P5 1 1 70000\n", &[0, 0, 0]), "t"),
            Err(Error::UnsupportedBitDepth(_))
        ));
        assert!(matches!(
            decode_pgm(b"P5 2", "t"),
            Err(Error::MalformedHeader { .. })
        ));
        assert!(matches!(
            decode_gray(b"P2 1 1 255\n0", "t"),
            Err(Error::MalformedHeader { .. })
        ));
    }

    #[test]
    fn ndvi_midpoint_and_reflectance_max() {
        let ndvi = BandImage::new(1, 1, Band::Ndvi, vec![0.0]).unwrap();
        assert_eq!(band_to_raster(&ndvi, BitDepth::Sixteen).samples, vec![32768]);
        assert_eq!(band_to_raster(&ndvi, BitDepth::Eight).samples, vec![128]);
        let nir = BandImage::new(1, 1, Band::Nir, vec![1.0]).unwrap();
        assert_eq!(band_to_raster(&nir, BitDepth::Eight).samples, vec![255]);
    }

    #[test]
    fn sixteen_bit_round_trip_within_half_step() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = BandImage::from_fn(17, 9, Band::Nir, |_, _| rng.gen::<f64>()).unwrap();
        for name in ["r.pgm", "r.png"] {
            let path = dir.path().join(name);
            write_band_image(&img, &path, BitDepth::Sixteen).unwrap();
            let back = read_band_image(&path, Band::Nir).unwrap();
            assert_eq!(back.dims(), img.dims());
            let err = img
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1.0 / 131070.0 + 1e-15, "{name}: {err}");
        }
    }

    #[test]
    fn label_mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = LabelMask::new(3, 2, vec![0, 1, 2, 2, 1, 0]).unwrap();
        write_label_mask(&mask, &path).unwrap();
        assert_eq!(read_label_mask(&path).unwrap(), mask);
    }

    #[test]
    fn missing_file_is_reported() {
        let err = read_band_image("/nonexistent/x.pgm", Band::Nir).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }

    #[test]
    fn probability_map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.prob");
        let pm = ProbabilityMap::new(2, 1, 3, vec![0.2, 0.5, 0.3, 1.0, 0.0, 0.0]).unwrap();
        write_probability_map(&pm, &path).unwrap();
        let back = read_probability_map(&path).unwrap();
        assert_eq!(back.dims(), (2, 1));
        for (a, b) in pm.probs().iter().zip(back.probs()) {
            assert!((a - b).abs() < 1e-7);
        }
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_probability_map(&path), Err(Error::TruncatedPayload { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_preserves_dims_and_quantization_bound(
            w in 1u32..12, h in 1u32..12, seed in any::<u64>(), ndvi in any::<bool>(), sixteen in any::<bool>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let band = if ndvi { Band::Ndvi } else { Band::Red };
            let lo = if ndvi { -1.0 } else { 0.0 };
            let img = BandImage::from_fn(w, h, band.clone(), |_, _| rng.gen_range(lo..=1.0)).unwrap();
            let depth = if sixteen { BitDepth::Sixteen } else { BitDepth::Eight };
            let raster = band_to_raster(&img, depth);
            let bytes = encode_pgm(&raster);
            let back = raster_to_band(decode_pgm(&bytes, "p").unwrap(), band).unwrap();
            prop_assert_eq!(back.dims(), img.dims());
            // NDVI spans twice the stored range, so its step doubles
            let bound = (if ndvi { 2.0 } else { 1.0 }) / (2.0 * depth.maxval() as f64) + 1e-12;
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= bound);
            }
        }
    }
}
