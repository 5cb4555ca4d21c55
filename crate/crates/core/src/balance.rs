//! Median frequency-of-appearance class weights.
//!
//! `foa[c] = total_pixels[c] / present_image_pixels[c]` and
//! `w[c] = median(foa) / foa[c]`. Both quantities are ratios of integer
//! counts, so the median is selected and the weights are formed from exact
//! integer products with a single final division.

use std::cmp::Ordering;
use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{class, LabelMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Pixels of each class over the whole dataset.
    pub total_pixels: [u64; class::COUNT],
    /// Summed size of the images in which each class appears.
    pub present_image_pixels: [u64; class::COUNT],
    pub image_count: u64,
}

impl DatasetStats {
    pub fn from_mask(mask: &LabelMask) -> Self {
        let counts = mask.class_counts();
        let size = mask.len() as u64;
        let mut present = [0; class::COUNT];
        for (p, &c) in present.iter_mut().zip(&counts) {
            if c > 0 {
                *p = size;
            }
        }
        DatasetStats {
            total_pixels: counts,
            present_image_pixels: present,
            image_count: 1,
        }
    }

    /// Exact frequency of appearance as `(numerator, denominator)`, or `None`
    /// when the class never appears.
    fn foa_ratio(&self, c: usize) -> Option<(u128, u128)> {
        (self.total_pixels[c] > 0)
            .then(|| (self.total_pixels[c] as u128, self.present_image_pixels[c] as u128))
    }
}

impl Add for DatasetStats {
    type Output = DatasetStats;

    fn add(mut self, rhs: DatasetStats) -> DatasetStats {
        self += rhs;
        self
    }
}

impl AddAssign for DatasetStats {
    fn add_assign(&mut self, rhs: DatasetStats) {
        for c in 0..class::COUNT {
            self.total_pixels[c] += rhs.total_pixels[c];
            self.present_image_pixels[c] += rhs.present_image_pixels[c];
        }
        self.image_count += rhs.image_count;
    }
}

pub fn accumulate_stats<'a, I>(masks: I) -> Result<DatasetStats>
where
    I: IntoIterator<Item = &'a LabelMask>,
{
    let mut iter = masks.into_iter().peekable();
    if iter.peek().is_none() {
        return Err(Error::EmptyInput("no masks to accumulate"));
    }
    Ok(iter.map(DatasetStats::from_mask).fold(DatasetStats::default(), Add::add))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: [f64; class::COUNT],
    pub foa: [f64; class::COUNT],
    pub median_foa: f64,
}

impl ClassWeights {
    /// All classes weighted 1.
    pub fn uniform() -> Self {
        ClassWeights {
            w: [1.0; class::COUNT],
            foa: [1.0; class::COUNT],
            median_foa: 1.0,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: WeightsFile = serde_json::from_str(&text)?;
        Ok(file.weights)
    }
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self::uniform()
    }
}

fn cmp_ratio(a: (u128, u128), b: (u128, u128)) -> Ordering {
    (a.0 * b.1).cmp(&(b.0 * a.1))
}

pub fn compute_class_weights(stats: &DatasetStats) -> Result<ClassWeights> {
    let ratios: Vec<Option<(u128, u128)>> = (0..class::COUNT).map(|c| stats.foa_ratio(c)).collect();
    let absent: Vec<u8> = (0..class::COUNT)
        .filter(|&c| ratios[c].is_none())
        .map(|c| c as u8)
        .collect();
    if !absent.is_empty() {
        return Err(Error::AbsentClass(absent));
    }
    let ratios: Vec<(u128, u128)> = ratios.into_iter().flatten().collect();
    let mut sorted = ratios.clone();
    sorted.sort_by(|&a, &b| cmp_ratio(a, b));
    let median = sorted[sorted.len() / 2];
    let mut w = [0.0; class::COUNT];
    let mut foa = [0.0; class::COUNT];
    for (c, &(num, den)) in ratios.iter().enumerate() {
        foa[c] = num as f64 / den as f64;
        // (m_num / m_den) / (num / den)
        w[c] = (median.0 * den) as f64 / (median.1 * num) as f64;
    }
    Ok(ClassWeights {
        w,
        foa,
        median_foa: median.0 as f64 / median.1 as f64,
    })
}

/// JSON document written by the `stats` command and read by `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub stats: DatasetStats,
    pub weights: ClassWeights,
}
