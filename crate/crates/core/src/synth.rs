//! Procedural multispectral field plots with known ground truth.
//!
//! Crops are rosettes (disks with a sinusoidally perturbed radius) planted
//! on vertical rows; weeds are random-walk blobs placed between the rows.
//! Reflectance defaults are synthetic values chosen for separability:
//! vegetation is bright in NIR and dark in Red, soil is flat.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{write_band_image, write_label_mask, BitDepth};
use crate::imgcore::{class, Band, BandImage, LabelMask, MultispectralFrame};
use crate::manifest::{DatasetManifest, ManifestEntry, PlotType, Split};
use crate::register::{resample, Transform2D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub nir_mean: f64,
    pub nir_std: f64,
    pub red_mean: f64,
    pub red_std: f64,
}

impl Material {
    const fn new(nir_mean: f64, red_mean: f64) -> Self {
        Material {
            nir_mean,
            nir_std: 0.02,
            red_mean,
            red_std: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reflectance {
    pub soil: Material,
    pub crop: Material,
    pub weed: Material,
}

impl Default for Reflectance {
    fn default() -> Self {
        Reflectance {
            soil: Material::new(0.25, 0.20),
            crop: Material::new(0.70, 0.10),
            weed: Material::new(0.60, 0.12),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub width: u32,
    pub height: u32,
    /// Distance between crop rows, and between plants along a row.
    pub crop_row_spacing: f64,
    pub crop_radius_range: (f64, f64),
    pub weed_radius_range: (f64, f64),
    /// Weed plants per 1000 pixels before herbicide.
    pub weed_density: f64,
    /// 1 suppresses weeds entirely, 0 leaves `weed_density` untouched.
    pub herbicide_level: f64,
    /// Whether crop rows are planted at all.
    pub crops: bool,
    pub reflectance: Reflectance,
    /// Motion of the Red band relative to NIR.
    pub band_misalignment: Transform2D,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            width: 64,
            height: 64,
            crop_row_spacing: 24.0,
            crop_radius_range: (4.0, 6.5),
            weed_radius_range: (3.0, 5.0),
            weed_density: 4.0,
            herbicide_level: 0.5,
            crops: true,
            reflectance: Reflectance::default(),
            band_misalignment: Transform2D::identity(),
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

/// Largest rosette radius relative to its nominal radius.
const ROSETTE_BULGE: f64 = 0.2;

impl FieldConfig {
    /// Herbicide level and crop planting for one plot type.
    pub fn for_plot(mut self, plot: PlotType) -> Self {
        let (herbicide, crops) = match plot {
            PlotType::Crop => (1.0, true),
            PlotType::Weed => (0.0, false),
            PlotType::Mixed => (0.5, true),
        };
        self.herbicide_level = herbicide;
        self.crops = crops;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.width == 0 || self.height == 0 {
            return bad("field dims must be positive".into());
        }
        let (lo, hi) = self.crop_radius_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("bad crop radius range {:?}", self.crop_radius_range));
        }
        let (wlo, whi) = self.weed_radius_range;
        if !(wlo >= 1.0 && wlo <= whi) {
            return bad(format!("bad weed radius range {:?}", self.weed_radius_range));
        }
        if !(self.crop_row_spacing >= 2.0 * hi) {
            return bad(format!(
                "degenerate geometry: row spacing {} is below twice the max crop radius {}",
                self.crop_row_spacing, hi
            ));
        }
        if !(0.0..=1.0).contains(&self.herbicide_level) {
            return bad(format!("herbicide_level {} outside [0, 1]", self.herbicide_level));
        }
        if !(self.weed_density >= 0.0 && self.weed_density.is_finite()) {
            return bad(format!("weed_density {} must be >= 0", self.weed_density));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        let r = &self.reflectance;
        for m in [&r.soil, &r.crop, &r.weed] {
            let in_unit = |v: f64| (0.0..=1.0).contains(&v);
            if !in_unit(m.nir_mean) || !in_unit(m.red_mean) || m.nir_std < 0.0 || m.red_std < 0.0 {
                return bad(format!("reflectance {m:?} outside [0, 1]"));
            }
        }
        if r.crop.nir_mean <= r.soil.nir_mean {
            return bad("crop NIR reflectance must exceed soil NIR".into());
        }
        Ok(())
    }
}

struct Painter {
    width: usize,
    height: usize,
    labels: Vec<u8>,
    /// Per-pixel plant id, used to look up per-plant reflectance.
    owner: Vec<usize>,
    plants: Vec<(f64, f64)>,
}

impl Painter {
    fn paint(&mut self, x: i64, y: i64, label: u8, plant: usize, overwrite_crop: bool) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = y as usize * self.width + x as usize;
        if self.labels[i] == class::CROP && !overwrite_crop {
            return;
        }
        self.labels[i] = label;
        self.owner[i] = plant;
    }
}

fn plant_reflectance(m: &Material, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let nir = Normal::new(m.nir_mean, m.nir_std).expect("std >= 0").sample(rng);
    let red = Normal::new(m.red_mean, m.red_std).expect("std >= 0").sample(rng);
    (nir, red)
}

/// Renders one plot: NIR and Red bands (Red moved by the misalignment) and
/// the truth mask in the NIR frame.
pub fn generate_field(cfg: &FieldConfig) -> Result<(MultispectralFrame, LabelMask)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width as usize, cfg.height as usize);
    let refl = &cfg.reflectance;
    let soil = plant_reflectance(&refl.soil, &mut rng);
    let mut p = Painter {
        width: w,
        height: h,
        labels: vec![class::BACKGROUND; w * h],
        owner: vec![0; w * h],
        plants: vec![soil],
    };

    let spacing = cfg.crop_row_spacing;
    let row_offset = rng.gen_range(0.0..spacing);
    let (rlo, rhi) = cfg.crop_radius_range;
    let reach = rhi * (1.0 + ROSETTE_BULGE);
    if cfg.crops {
        let mut x0 = row_offset - spacing;
        while x0 < w as f64 + spacing {
            let mut y0 = rng.gen_range(-spacing..0.0);
            while y0 < h as f64 + spacing {
                let jitter = spacing * 0.15;
                let cx = x0 + rng.gen_range(-jitter..=jitter);
                let cy = y0 + rng.gen_range(-jitter..=jitter);
                let r = rng.gen_range(rlo..=rhi);
                let lobes = rng.gen_range(5..=7) as f64;
                let phase = rng.gen_range(0.0..TAU);
                let id = p.plants.len();
                p.plants.push(plant_reflectance(&refl.crop, &mut rng));
                let ext = (r * (1.0 + ROSETTE_BULGE)).ceil() as i64;
                for y in (cy as i64 - ext)..=(cy as i64 + ext) {
                    for x in (cx as i64 - ext)..=(cx as i64 + ext) {
                        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                        let limit = r * (1.0 + ROSETTE_BULGE * (lobes * dy.atan2(dx) + phase).sin());
                        if dx.hypot(dy) <= limit {
                            p.paint(x, y, class::CROP, id, true);
                        }
                    }
                }
                y0 += spacing;
            }
            x0 += spacing;
        }
    }

    let area_kpx = (w * h) as f64 / 1000.0;
    let lambda = cfg.weed_density * area_kpx * (1.0 - cfg.herbicide_level);
    let count = if lambda > 0.0 {
        Poisson::new(lambda).expect("lambda > 0").sample(&mut rng) as usize
    } else {
        0
    };
    let (wlo, whi) = cfg.weed_radius_range;
    for _ in 0..count {
        // keep the blob centre clear of the crop rows
        let (cx, cy) = loop {
            let cx = rng.gen_range(0.0..w as f64);
            let cy = rng.gen_range(0.0..h as f64);
            let d = (cx - row_offset).rem_euclid(spacing);
            if !cfg.crops || d.min(spacing - d) >= reach.min(spacing / 2.0 - 1.0) {
                break (cx, cy);
            }
        };
        let r = rng.gen_range(wlo..=whi);
        let brush = (r * 0.45).max(1.0);
        let steps = (r * r * 1.5) as usize;
        let id = p.plants.len();
        p.plants.push(plant_reflectance(&refl.weed, &mut rng));
        let (mut x, mut y) = (cx, cy);
        for _ in 0..=steps {
            let bi = brush.ceil() as i64;
            for yy in (y as i64 - bi)..=(y as i64 + bi) {
                for xx in (x as i64 - bi)..=(x as i64 + bi) {
                    if (xx as f64 - x).hypot(yy as f64 - y) <= brush {
                        p.paint(xx, yy, class::WEED, id, false);
                    }
                }
            }
            let a = rng.gen_range(0.0..TAU);
            let (nx, ny) = (x + a.cos(), y + a.sin());
            // stay within the blob radius of the seed point
            if (nx - cx).hypot(ny - cy) <= r - brush {
                x = nx;
                y = ny;
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma >= 0");
    let mut nir = Vec::with_capacity(w * h);
    let mut red = Vec::with_capacity(w * h);
    for &owner in &p.owner {
        let (n, r) = p.plants[owner];
        nir.push((n + noise.sample(&mut rng)).clamp(0.0, 1.0));
        red.push((r + noise.sample(&mut rng)).clamp(0.0, 1.0));
    }
    let nir = BandImage::new(cfg.width, cfg.height, Band::Nir, nir)?;
    let mut red = BandImage::new(cfg.width, cfg.height, Band::Red, red)?;
    if !cfg.band_misalignment.is_identity() {
        red = resample(&red, &cfg.band_misalignment.inverse());
    }
    let frame = MultispectralFrame::new(format!("field_{}", cfg.seed), vec![nir, red])?;
    let mask = LabelMask::new(cfg.width, cfg.height, p.labels)?;
    Ok((frame, mask))
}

/// Decorrelated per-frame seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(base ^ splitmix(index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PlotCounts {
    pub crop: usize,
    pub weed: usize,
    pub mixed: usize,
}

/// Frames for every plot of a dataset, in manifest order. Single-species
/// plots form the training split, mixed plots the test split.
pub fn generate_plots(
    template: &FieldConfig,
    counts: PlotCounts,
) -> Result<Vec<(String, PlotType, MultispectralFrame, LabelMask)>> {
    let mut out = Vec::with_capacity(counts.crop + counts.weed + counts.mixed);
    let mut index = 0u64;
    for (plot, n) in [
        (PlotType::Crop, counts.crop),
        (PlotType::Weed, counts.weed),
        (PlotType::Mixed, counts.mixed),
    ] {
        for k in 0..n {
            let mut cfg = template.clone().for_plot(plot);
            cfg.seed = derive_seed(template.seed, index);
            index += 1;
            let id = format!("{plot}_{k:03}");
            let (frame, mask) = generate_field(&cfg)?;
            let frame = MultispectralFrame::new(id.clone(), frame.into_bands())?;
            out.push((id, plot, frame, mask));
        }
    }
    Ok(out)
}

/// Writes 16-bit PGM bands, PNG truth masks and `manifest.json` under
/// `out_dir`. Every entry's mask is its ground truth.
pub fn generate_dataset(
    template: &FieldConfig,
    counts: PlotCounts,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let mut manifest = DatasetManifest::new(out_dir);
    for (id, plot, frame, mask) in generate_plots(template, counts)? {
        let mut bands = BTreeMap::new();
        for b in frame.bands() {
            let key = b.band().name().to_ascii_lowercase();
            let rel = PathBuf::from(format!("frames/{id}_{key}.pgm"));
            write_band_image(b, out_dir.join(&rel), BitDepth::Sixteen)?;
            bands.insert(key, rel);
        }
        let mask_rel = PathBuf::from(format!("truth/{id}.png"));
        write_label_mask(&mask, out_dir.join(&mask_rel))?;
        manifest.entries.push(ManifestEntry {
            frame_id: id,
            bands,
            mask: Some(mask_rel),
            prediction: None,
            probabilities: None,
            split: if plot == PlotType::Mixed { Split::Test } else { Split::Train },
            plot_type: plot,
        });
    }
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}
