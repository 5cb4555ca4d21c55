//! Automatic ground truth for single-species plots: Gaussian blur, unsharp
//! sharpening, Otsu thresholding and connected-component size filtering of
//! the NDVI raster.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{class, BandImage, LabelMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutolabelConfig {
    pub blur_sigma: f64,
    pub sharpen_amount: f64,
    pub min_blob_pixels: usize,
    pub vegetation_class: u8,
    pub connectivity: Connectivity,
    pub otsu_bins: usize,
}

impl Default for AutolabelConfig {
    fn default() -> Self {
        AutolabelConfig {
            blur_sigma: 1.2,
            sharpen_amount: 1.0,
            min_blob_pixels: 300,
            vegetation_class: class::CROP,
            connectivity: Connectivity::Four,
            otsu_bins: 256,
        }
    }
}

impl AutolabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "blur_sigma must be positive, got {}",
                self.blur_sigma
            )));
        }
        if self.min_blob_pixels == 0 {
            return Err(Error::InvalidConfig("min_blob_pixels must be at least 1".into()));
        }
        if self.vegetation_class != class::CROP && self.vegetation_class != class::WEED {
            return Err(Error::InvalidConfig(format!(
                "vegetation_class must be crop (1) or weed (2), got {}",
                self.vegetation_class
            )));
        }
        if self.otsu_bins < 2 {
            return Err(Error::InvalidConfig("otsu_bins must be at least 2".into()));
        }
        Ok(())
    }
}

/// Half-sample symmetric reflection (`dcba|abcd|dcba`), valid for any
/// offset.
#[inline]
fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian convolution with radius `ceil(3 sigma)` and
/// reflected borders.
pub fn gaussian_blur(img: &BandImage, sigma: f64) -> Result<BandImage> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let src = img.data();
    let mut horizontal = vec![0.0; src.len()];
    for y in 0..h {
        let row = &src[(y * w) as usize..((y + 1) * w) as usize];
        for x in 0..w {
            horizontal[(y * w + x) as usize] = kernel
                .iter()
                .enumerate()
                .map(|(k, &g)| g * row[reflect(x + k as i64 - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            out[(y * w + x) as usize] = kernel
                .iter()
                .enumerate()
                .map(|(k, &g)| g * horizontal[reflect(y + k as i64 - radius, h) * w as usize + x as usize])
                .sum();
        }
    }
    img.with_data(out)
}

/// `clamp(img + amount (img - blurred), -1, 1)`.
pub fn unsharp_sharpen(img: &BandImage, blurred: &BandImage, amount: f64) -> Result<BandImage> {
    img.ensure_same_dims(blurred)?;
    let data = img
        .data()
        .iter()
        .zip(blurred.data())
        .map(|(&v, &b)| (v + amount * (v - b)).clamp(-1.0, 1.0))
        .collect();
    img.with_data(data)
}

/// Histogram of `img` over its own `[min, max]` range. Returns the counts
/// and the range.
fn histogram(img: &BandImage, num_bins: usize) -> Result<(Vec<u64>, f64, f64)> {
    let (lo, hi) = img.min_max();
    if !(hi > lo) {
        return Err(Error::DegenerateHistogram);
    }
    let mut counts = vec![0u64; num_bins];
    let scale = num_bins as f64 / (hi - lo);
    for &v in img.data() {
        let bin = (((v - lo) * scale) as usize).min(num_bins - 1);
        counts[bin] += 1;
    }
    Ok((counts, lo, hi))
}

/// Compares `a_num / a_den` with `b_num / b_den`, all non-negative.
fn ratio_gt(a_num: u128, a_den: u128, b_num: u128, b_den: u128) -> bool {
    match (a_num.checked_mul(b_den), b_num.checked_mul(a_den)) {
        (Some(l), Some(r)) => l > r,
        _ => a_num as f64 / a_den as f64 > b_num as f64 / b_den as f64,
    }
}

/// Otsu split of a histogram: the bin edge `k` (first bin of the upper
/// class) maximizing between-class variance, lowest edge on ties.
///
/// With bin indices as values, `N^2 sigma_b^2(k) = (N S0 - n0 S)^2 / (n0 n1)`,
/// which is compared exactly in integer arithmetic.
pub fn otsu_split(counts: &[u64]) -> Option<usize> {
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    let weighted: u128 = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * c as u128)
        .sum();
    let (mut n0, mut s0) = (0u128, 0u128);
    let mut best: Option<(usize, u128, u128)> = None;
    for k in 1..counts.len() {
        n0 += counts[k - 1] as u128;
        s0 += (k - 1) as u128 * counts[k - 1] as u128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = (total * s0).abs_diff(n0 * weighted);
        let num = diff * diff;
        let den = n0 * n1;
        if best.is_none_or(|(_, bn, bd)| ratio_gt(num, den, bn, bd)) {
            best = Some((k, num, den));
        }
    }
    best.map(|(k, _, _)| k)
}

/// Otsu threshold on a `num_bins` histogram of the image's own range; the
/// returned value is the lower edge of the first foreground bin.
pub fn otsu_threshold(img: &BandImage, num_bins: usize) -> Result<f64> {
    if num_bins < 2 {
        return Err(Error::InvalidConfig("otsu needs at least 2 bins".into()));
    }
    let (counts, lo, hi) = histogram(img, num_bins)?;
    let k = otsu_split(&counts).ok_or(Error::DegenerateHistogram)?;
    Ok(lo + k as f64 * (hi - lo) / num_bins as f64)
}

/// Boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} mask needs {} cells, got {}",
                width as usize * height as usize,
                data.len()
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            data,
        })
    }
}

/// One connected set of foreground pixels, as row-major indices in
/// ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub pixels: Vec<usize>,
}

impl Component {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // keep the smaller index as root so component order is raster order
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Two-pass union-find labelling. Components are ordered by their first
/// pixel in raster order.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> Vec<Component> {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let mut parent: Vec<usize> = (0..w * h).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask.data[i] {
                continue;
            }
            if x > 0 && mask.data[i - 1] {
                union(&mut parent, i, i - 1);
            }
            if y > 0 {
                if mask.data[i - w] {
                    union(&mut parent, i, i - w);
                }
                if connectivity == Connectivity::Eight {
                    if x > 0 && mask.data[i - w - 1] {
                        union(&mut parent, i, i - w - 1);
                    }
                    if x + 1 < w && mask.data[i - w + 1] {
                        union(&mut parent, i, i - w + 1);
                    }
                }
            }
        }
    }
    let mut slot = vec![usize::MAX; w * h];
    let mut components: Vec<Component> = Vec::new();
    for i in 0..w * h {
        if !mask.data[i] {
            continue;
        }
        let root = find(&mut parent, i);
        if slot[root] == usize::MAX {
            slot[root] = components.len();
            components.push(Component { pixels: Vec::new() });
        }
        components[slot[root]].pixels.push(i);
    }
    components
}

/// Full labelling chain for one NDVI raster of a single-species plot.
pub fn generate_mask(ndvi: &BandImage, cfg: &AutolabelConfig) -> Result<LabelMask> {
    cfg.validate()?;
    let blurred = gaussian_blur(ndvi, cfg.blur_sigma)?;
    let reblurred = gaussian_blur(&blurred, cfg.blur_sigma)?;
    let sharpened = unsharp_sharpen(&blurred, &reblurred, cfg.sharpen_amount)?;
    let threshold = otsu_threshold(&sharpened, cfg.otsu_bins)?;
    let foreground = BinaryMask::new(
        ndvi.width(),
        ndvi.height(),
        sharpened.data().iter().map(|&v| v >= threshold).collect(),
    )?;
    let mut labels = vec![class::BACKGROUND; foreground.data.len()];
    for comp in connected_components(&foreground, cfg.connectivity) {
        if comp.len() >= cfg.min_blob_pixels {
            for &i in &comp.pixels {
                labels[i] = cfg.vegetation_class;
            }
        }
    }
    LabelMask::new(ndvi.width(), ndvi.height(), labels)
}
