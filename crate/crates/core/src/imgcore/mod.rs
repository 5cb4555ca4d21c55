//! Raster types shared by every stage of the pipeline, plus NDVI and the
//! colour-coded renders.
//!
//! All rasters are row-major. Band samples are `f64` reflectance values
//! (NDVI in `[-1, 1]`); class labels are `u8` ids from [`class`].

mod io;
mod render;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    read_band_image, read_label_mask, read_probability_map, read_rgb_png, write_band_image,
    write_label_mask, write_probability_map, write_rgb_png, BitDepth,
};
pub use render::{render_mask, render_probability, RgbImage};

/// Class ids used in every [`LabelMask`].
pub mod class {
    pub const BACKGROUND: u8 = 0;
    pub const CROP: u8 = 1;
    pub const WEED: u8 = 2;
    pub const COUNT: usize = 3;

    pub const NAMES: [&str; COUNT] = ["bg", "crop", "weed"];
}

/// Spectral identity of a raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Band {
    Nir,
    Red,
    Ndvi,
    Other(String),
}

impl Band {
    pub fn name(&self) -> &str {
        match self {
            Band::Nir => "NIR",
            Band::Red => "Red",
            Band::Ndvi => "NDVI",
            Band::Other(name) => name,
        }
    }

    /// Case-insensitive parse; anything unrecognised becomes `Other`.
    pub fn from_name(name: &str) -> Band {
        match name.to_ascii_lowercase().as_str() {
            "nir" => Band::Nir,
            "red" => Band::Red,
            "ndvi" => Band::Ndvi,
            _ => Band::Other(name.to_string()),
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn check_dims(width: u32, height: u32, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidImage(format!(
            "dimensions must be positive, got {width}x{height}"
        )));
    }
    let expected = width as usize * height as usize;
    if len != expected {
        return Err(Error::InvalidImage(format!(
            "{width}x{height} raster needs {expected} samples, got {len}"
        )));
    }
    Ok(())
}

/// Single-band floating point raster.
#[derive(Debug, Clone, PartialEq)]
pub struct BandImage {
    width: u32,
    height: u32,
    band: Band,
    data: Vec<f64>,
}

impl BandImage {
    pub fn new(width: u32, height: u32, band: Band, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!("non-finite sample at index {i}")));
        }
        Ok(BandImage {
            width,
            height,
            band,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, band: Band, value: f64) -> Result<Self> {
        Self::new(width, height, band, vec![value; width as usize * height as usize])
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        band: Band,
        mut f: impl FnMut(u32, u32) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, band, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn band(&self) -> &Band {
        &self.band
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn with_band(mut self, band: Band) -> Self {
        self.band = band;
        self
    }

    /// Same geometry and band, new samples (validated).
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.width, self.height, self.band.clone(), data)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Sub-rectangle `[x0, x0+w) x [y0, y0+h)`.
    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::DimensionMismatch(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let data = (y0..y0 + h)
            .flat_map(|y| (x0..x0 + w).map(move |x| (x, y)))
            .map(|(x, y)| self.get(x, y))
            .collect();
        Self::new(w, h, self.band.clone(), data)
    }

    pub(crate) fn ensure_same_dims(&self, other: &BandImage) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(format!(
                "{} is {}x{} but {} is {}x{}",
                self.band, self.width, self.height, other.band, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Aligned stack of bands sharing one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct MultispectralFrame {
    frame_id: String,
    bands: Vec<BandImage>,
}

impl MultispectralFrame {
    pub fn new(frame_id: impl Into<String>, bands: Vec<BandImage>) -> Result<Self> {
        let first = bands.first().ok_or(Error::EmptyInput("frame has no bands"))?;
        for (i, b) in bands.iter().enumerate() {
            first.ensure_same_dims(b)?;
            if bands[..i].iter().any(|o| o.band == b.band) {
                return Err(Error::InvalidImage(format!("duplicate band {}", b.band)));
            }
        }
        Ok(MultispectralFrame {
            frame_id: frame_id.into(),
            bands,
        })
    }

    pub fn frame_id(&self) -> &str {
        &self.frame_id
    }

    pub fn bands(&self) -> &[BandImage] {
        &self.bands
    }

    pub fn into_bands(self) -> Vec<BandImage> {
        self.bands
    }

    pub fn band(&self, band: &Band) -> Option<&BandImage> {
        self.bands.iter().find(|b| &b.band == band)
    }

    pub fn dims(&self) -> (u32, u32) {
        self.bands[0].dims()
    }

    /// Appends a band, enforcing the shared-geometry and unique-name rules.
    pub fn with_band(self, band: BandImage) -> Result<Self> {
        let mut bands = self.bands;
        bands.push(band);
        Self::new(self.frame_id, bands)
    }
}

/// Per-pixel class ids in `{0, 1, 2}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: u32,
    height: u32,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: u32, height: u32, labels: Vec<u8>) -> Result<Self> {
        check_dims(width, height, labels.len())?;
        if let Some(index) = labels.iter().position(|&l| l as usize >= class::COUNT) {
            return Err(Error::InvalidLabel {
                label: labels[index],
                index,
            });
        }
        Ok(LabelMask {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: u32, height: u32, label: u8) -> Result<Self> {
        Self::new(width, height, vec![label; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.labels[y as usize * self.width as usize + x as usize]
    }

    /// Pixel count per class.
    pub fn class_counts(&self) -> [u64; class::COUNT] {
        let mut counts = [0u64; class::COUNT];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::DimensionMismatch(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let labels = (y0..y0 + h)
            .flat_map(|y| (x0..x0 + w).map(move |x| (x, y)))
            .map(|(x, y)| self.get(x, y))
            .collect();
        Self::new(w, h, labels)
    }
}

/// Tolerance on the per-pixel probability sum.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-5;

/// Per-pixel class probabilities, stored pixel-major: the `num_classes`
/// values of one pixel are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    width: u32,
    height: u32,
    num_classes: usize,
    probs: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(width: u32, height: u32, num_classes: usize, probs: Vec<f64>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidProbabilities("zero classes".into()));
        }
        check_dims(width, height, probs.len() / num_classes)?;
        if !probs.len().is_multiple_of(num_classes) {
            return Err(Error::InvalidProbabilities(format!(
                "{} values is not a multiple of {num_classes} classes",
                probs.len()
            )));
        }
        for (pixel, p) in probs.chunks_exact(num_classes).enumerate() {
            if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(Error::InvalidProbabilities(format!(
                    "negative or non-finite probability at pixel {pixel}"
                )));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
                return Err(Error::InvalidProbabilities(format!(
                    "probabilities at pixel {pixel} sum to {sum}"
                )));
            }
        }
        Ok(ProbabilityMap {
            width,
            height,
            num_classes,
            probs,
        })
    }

    /// One-hot map of a label mask.
    pub fn one_hot(mask: &LabelMask) -> Self {
        let mut probs = vec![0.0; mask.len() * class::COUNT];
        for (i, &l) in mask.labels().iter().enumerate() {
            probs[i * class::COUNT + l as usize] = 1.0;
        }
        ProbabilityMap {
            width: mask.width,
            height: mask.height,
            num_classes: class::COUNT,
            probs,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.probs[index * self.num_classes..(index + 1) * self.num_classes]
    }

    /// Scores of one class for every pixel.
    pub fn class_scores(&self, class: usize) -> impl Iterator<Item = f64> + '_ {
        self.probs.iter().skip(class).step_by(self.num_classes).copied()
    }

    /// Per-pixel most probable class; ties go to the lowest id.
    pub fn argmax_labels(&self) -> LabelMask {
        let labels = self
            .probs
            .chunks_exact(self.num_classes)
            .map(|p| {
                let mut best = 0;
                for (c, &v) in p.iter().enumerate().skip(1) {
                    if v > p[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMask {
            width: self.width,
            height: self.height,
            labels,
        }
    }
}

/// Normalized difference vegetation index, `(NIR - Red) / (NIR + Red)`.
///
/// Pixels where the denominator is zero read as 0 (non-vegetation).
pub fn compute_ndvi(nir: &BandImage, red: &BandImage) -> Result<BandImage> {
    if nir.band != Band::Nir {
        return Err(Error::BandMismatch {
            expected: Band::Nir.to_string(),
            found: nir.band.to_string(),
        });
    }
    if red.band != Band::Red {
        return Err(Error::BandMismatch {
            expected: Band::Red.to_string(),
            found: red.band.to_string(),
        });
    }
    nir.ensure_same_dims(red)?;
    let data = nir
        .data
        .iter()
        .zip(&red.data)
        .map(|(&n, &r)| {
            let den = n + r;
            if den == 0.0 {
                0.0
            } else {
                (n - r) / den
            }
        })
        .collect();
    BandImage::new(nir.width, nir.height, Band::Ndvi, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn band(b: Band, w: u32, h: u32, data: Vec<f64>) -> BandImage {
        BandImage::new(w, h, b, data).unwrap()
    }

    #[test]
    fn band_image_rejects_bad_geometry() {
        assert!(BandImage::new(0, 2, Band::Nir, vec![]).is_err());
        assert!(BandImage::new(2, 2, Band::Nir, vec![0.0; 3]).is_err());
        assert!(BandImage::new(1, 1, Band::Nir, vec![f64::NAN]).is_err());
    }

    #[test]
    fn frame_enforces_shared_dims_and_unique_bands() {
        let a = band(Band::Nir, 2, 2, vec![0.0; 4]);
        let b = band(Band::Red, 2, 1, vec![0.0; 2]);
        assert!(MultispectralFrame::new("f", vec![a.clone(), b]).is_err());
        assert!(MultispectralFrame::new("f", vec![a.clone(), a.clone()]).is_err());
        assert!(MultispectralFrame::new("f", vec![]).is_err());
        assert!(MultispectralFrame::new("f", vec![a]).is_ok());
    }

    #[test]
    fn label_mask_rejects_out_of_range() {
        let err = LabelMask::new(2, 1, vec![0, 3]).unwrap_err();
        assert!(matches!(err, Error::InvalidLabel { label: 3, index: 1 }));
    }

    #[test]
    fn probability_map_checks_sums() {
        assert!(ProbabilityMap::new(1, 1, 3, vec![0.2, 0.3, 0.5]).is_ok());
        assert!(ProbabilityMap::new(1, 1, 3, vec![0.2, 0.3, 0.6]).is_err());
        assert!(ProbabilityMap::new(1, 1, 3, vec![-0.1, 0.6, 0.5]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let pm = ProbabilityMap::new(3, 1, 3, vec![0.2, 0.5, 0.3, 0.5, 0.5, 0.0, 0.1, 0.1, 0.8])
            .unwrap();
        assert_eq!(pm.argmax_labels().labels(), &[1, 0, 2]);
    }

    #[test]
    fn argmax_invariant_under_monotone_rescaling() {
        let raw = [0.1, 0.7, 0.2, 0.4, 0.35, 0.25];
        let pm = ProbabilityMap::new(2, 1, 3, raw.to_vec()).unwrap();
        let squashed: Vec<f64> = raw
            .chunks(3)
            .flat_map(|p| {
                let t: Vec<f64> = p.iter().map(|v| v * v * v).collect();
                let s: f64 = t.iter().sum();
                t.into_iter().map(move |v| v / s)
            })
            .collect();
        let pm2 = ProbabilityMap::new(2, 1, 3, squashed).unwrap();
        assert_eq!(pm.argmax_labels(), pm2.argmax_labels());
    }

    #[test]
    fn ndvi_examples() {
        let nir = band(Band::Nir, 3, 1, vec![0.8, 0.4, 0.0]);
        let red = band(Band::Red, 3, 1, vec![0.2, 0.4, 0.0]);
        let ndvi = compute_ndvi(&nir, &red).unwrap();
        assert_eq!(ndvi.band(), &Band::Ndvi);
        assert!((ndvi.data()[0] - 0.6).abs() < 1e-12);
        assert_eq!(ndvi.data()[1], 0.0);
        assert_eq!(ndvi.data()[2], 0.0);
    }

    #[test]
    fn ndvi_rejects_wrong_tags_and_dims() {
        let nir = band(Band::Nir, 2, 1, vec![0.5; 2]);
        let red = band(Band::Red, 2, 1, vec![0.5; 2]);
        assert!(matches!(
            compute_ndvi(&red, &nir),
            Err(Error::BandMismatch { .. })
        ));
        let small = band(Band::Red, 1, 1, vec![0.5]);
        assert!(matches!(
            compute_ndvi(&nir, &small),
            Err(Error::DimensionMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn ndvi_is_bounded(pairs in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 1..64)) {
            let n = pairs.len() as u32;
            let nir = band(Band::Nir, n, 1, pairs.iter().map(|p| p.0).collect());
            let red = band(Band::Red, n, 1, pairs.iter().map(|p| p.1).collect());
            let ndvi = compute_ndvi(&nir, &red).unwrap();
            for &v in ndvi.data() {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }
    }
}
