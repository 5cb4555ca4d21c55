use super::{class, LabelMask, ProbabilityMap};
use crate::error::{Error, Result};

/// Packed 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width as usize * height as usize * 3 {
            return Err(Error::InvalidImage(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width as usize * height as usize * 3,
                data.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Display colour of each class: background blue, crop red, weed green.
pub const CLASS_COLORS: [[u8; 3]; class::COUNT] = [[0, 0, 255], [255, 0, 0], [0, 255, 0]];

pub fn render_mask(mask: &LabelMask) -> RgbImage {
    let data = mask
        .labels()
        .iter()
        .flat_map(|&l| CLASS_COLORS[l as usize])
        .collect();
    RgbImage {
        width: mask.width(),
        height: mask.height(),
        data,
    }
}

fn channel(p: f64) -> u8 {
    (255.0 * p + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Maps P(crop), P(weed), P(bg) to the intensities of R, G and B.
pub fn render_probability(pm: &ProbabilityMap) -> Result<RgbImage> {
    if pm.num_classes() != class::COUNT {
        return Err(Error::InvalidProbabilities(format!(
            "rendering needs {} classes, map has {}",
            class::COUNT,
            pm.num_classes()
        )));
    }
    let data = pm
        .probs()
        .chunks_exact(class::COUNT)
        .flat_map(|p| {
            [
                channel(p[class::CROP as usize]),
                channel(p[class::WEED as usize]),
                channel(p[class::BACKGROUND as usize]),
            ]
        })
        .collect();
    Ok(RgbImage {
        width: pm.width(),
        height: pm.height(),
        data,
    })
}
