//! Inter-band registration: lens undistortion, correlation-based estimation
//! of a planar rigid transform, and warping into a common cropped frame.
//!
//! A [`Transform2D`] maps reference-band pixel coordinates into the moving
//! band: `p_mov = R(theta) (p_ref - c) + c + t`, with `c` the image centre.
//! Warping a moving band with its transform therefore resamples it into the
//! reference geometry.

use std::collections::BTreeMap;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{BandImage, MultispectralFrame};

/// Pinhole intrinsics with two radial distortion terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
}

impl CameraIntrinsics {
    /// Distortion-free intrinsics centred on an image of the given size.
    pub fn centered(width: u32, height: u32, focal: f64) -> Self {
        CameraIntrinsics {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            k1: 0.0,
            k2: 0.0,
        }
    }

    fn validate(&self, width: u32, height: u32) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        let inside = |v: f64, n: u32| v >= 0.0 && v <= n as f64 - 1.0;
        if !inside(self.cx, width) || !inside(self.cy, height) {
            return Err(Error::InvalidConfig(format!(
                "principal point ({}, {}) outside {width}x{height} image",
                self.cx, self.cy
            )));
        }
        if !(self.k1.is_finite() && self.k2.is_finite()) {
            return Err(Error::InvalidConfig("non-finite distortion".into()));
        }
        Ok(())
    }

    /// Position in the distorted image of an ideal (undistorted) pixel.
    pub fn distort_point(&self, x: f64, y: f64) -> (f64, f64) {
        let xn = (x - self.cx) / self.fx;
        let yn = (y - self.cy) / self.fy;
        let r2 = xn * xn + yn * yn;
        let factor = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        (self.fx * xn * factor + self.cx, self.fy * yn * factor + self.cy)
    }
}

/// Planar rigid motion: translation in pixels, rotation in radians about the
/// image centre.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Transform2D {
    pub tx: f64,
    pub ty: f64,
    pub theta: f64,
}

impl Transform2D {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Transform2D { tx, ty, theta: 0.0 }
    }

    /// Builds a transform, wrapping `theta` into `(-pi, pi]`.
    pub fn new(tx: f64, ty: f64, theta: f64) -> Self {
        Transform2D {
            tx,
            ty,
            theta: wrap_angle(theta),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.tx == 0.0 && self.ty == 0.0 && self.theta == 0.0
    }

    /// Maps a point given the rotation centre.
    pub fn apply(&self, x: f64, y: f64, cx: f64, cy: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        (c * dx - s * dy + cx + self.tx, s * dx + c * dy + cy + self.ty)
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = (-self.theta).sin_cos();
        Transform2D {
            tx: -(c * self.tx - s * self.ty),
            ty: -(s * self.tx + c * self.ty),
            theta: wrap_angle(-self.theta),
        }
    }
}

fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

fn image_center(width: u32, height: u32) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

const EDGE_EPS: f64 = 1e-9;

/// Bilinear sample; `None` outside `[0, w-1] x [0, h-1]`.
#[inline]
fn sample_bilinear(data: &[f64], width: usize, height: usize, x: f64, y: f64) -> Option<f64> {
    if !(x >= -EDGE_EPS
        && y >= -EDGE_EPS
        && x <= width as f64 - 1.0 + EDGE_EPS
        && y <= height as f64 - 1.0 + EDGE_EPS)
    {
        return None;
    }
    let x = x.clamp(0.0, width as f64 - 1.0);
    let y = y.clamp(0.0, height as f64 - 1.0);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let at = |xx: usize, yy: usize| data[yy * width + xx];
    if fx == 0.0 && fy == 0.0 {
        return Some(at(x0, y0));
    }
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

/// Resamples `img` so that `out(p) = img(t(p))`, zero-filling samples that
/// fall outside. Also returns the per-pixel validity mask.
pub fn resample_with_mask(img: &BandImage, t: &Transform2D) -> (BandImage, Vec<bool>) {
    let (w, h) = img.dims();
    let (cx, cy) = image_center(w, h);
    let mut data = Vec::with_capacity(w as usize * h as usize);
    let mut valid = Vec::with_capacity(data.capacity());
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = t.apply(x as f64, y as f64, cx, cy);
            match sample_bilinear(img.data(), w as usize, h as usize, sx, sy) {
                Some(v) => {
                    data.push(v);
                    valid.push(true);
                }
                None => {
                    data.push(0.0);
                    valid.push(false);
                }
            }
        }
    }
    let out = img.with_data(data).expect("resampling preserves geometry");
    (out, valid)
}

pub fn resample(img: &BandImage, t: &Transform2D) -> BandImage {
    resample_with_mask(img, t).0
}

/// Removes radial lens distortion with bilinear resampling.
pub fn undistort(img: &BandImage, k: &CameraIntrinsics) -> Result<BandImage> {
    let (w, h) = img.dims();
    k.validate(w, h)?;
    if k.k1 == 0.0 && k.k2 == 0.0 {
        return Ok(img.clone());
    }
    let mut data = Vec::with_capacity(w as usize * h as usize);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = k.distort_point(x as f64, y as f64);
            data.push(sample_bilinear(img.data(), w as usize, h as usize, sx, sy).unwrap_or(0.0));
        }
    }
    img.with_data(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMethod {
    /// Phase correlation, or exhaustive NCC when either side is under 64 px.
    Auto,
    Phase,
    Exhaustive,
}

/// Knobs of the correlation search. Persisted alongside the transforms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchParams {
    pub radius: u32,
    pub confidence: f64,
    pub method: CorrelationMethod,
    pub max_angle_deg: f64,
    pub angle_step_deg: f64,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            radius: 16,
            confidence: 0.2,
            method: CorrelationMethod::Auto,
            max_angle_deg: 3.0,
            angle_step_deg: 0.25,
        }
    }
}

/// Subpixel search: 5x5 grids at steps 1/4, 1/16 and 1/64 pixel.
const SUBPIXEL_FIRST_STEP: f64 = 0.25;
const SUBPIXEL_LEVELS: usize = 3;

/// Side length under which `Auto` falls back to exhaustive NCC.
pub const PHASE_MIN_SIDE: u32 = 64;

/// A transform together with the correlation magnitude that selected it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub transform: Transform2D,
    pub score: f64,
}

struct Correlator<'a> {
    reference: &'a [f64],
    moving: &'a [f64],
    valid: Option<&'a [bool]>,
    width: usize,
    height: usize,
    min_overlap: usize,
}

impl Correlator<'_> {
    /// Absolute Pearson correlation of `ref(x)` with `mov(x + d)` over their
    /// overlap. Absolute, so contrast-inverted band pairs still register.
    fn ncc(&self, dx: i64, dy: i64) -> Option<f64> {
        let (w, h) = (self.width as i64, self.height as i64);
        let (x0, x1) = (0.max(-dx), w.min(w - dx));
        let (y0, y1) = (0.max(-dy), h.min(h - dy));
        if x0 >= x1 || y0 >= y1 {
            return None;
        }
        let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0usize, 0.0, 0.0, 0.0, 0.0, 0.0);
        for y in y0..y1 {
            for x in x0..x1 {
                let j = ((y + dy) * w + x + dx) as usize;
                if self.valid.is_some_and(|v| !v[j]) {
                    continue;
                }
                let a = self.reference[(y * w + x) as usize];
                let b = self.moving[j];
                n += 1;
                sa += a;
                sb += b;
                saa += a * a;
                sbb += b * b;
                sab += a * b;
            }
        }
        if n < self.min_overlap {
            return None;
        }
        let nf = n as f64;
        let cov = sab - sa * sb / nf;
        let va = saa - sa * sa / nf;
        let vb = sbb - sb * sb / nf;
        if va <= 1e-12 * nf || vb <= 1e-12 * nf {
            return None;
        }
        Some((cov / (va * vb).sqrt()).abs())
    }

    /// [`Self::ncc`] at a fractional shift. Both images are sampled
    /// bilinearly half-way, `ref(x - d/2)` against `mov(x + d/2)`, so the
    /// interpolation smoothing is the same on both sides.
    fn ncc_frac(&self, dx: f64, dy: f64) -> Option<f64> {
        let (w, h) = (self.width, self.height);
        let (hx, hy) = (0.5 * dx, 0.5 * dy);
        let span = |half: f64, n: usize| {
            let lo = (half.abs()).ceil() as usize;
            (lo, n.saturating_sub(lo + 1))
        };
        let (x0, x1) = span(hx, w);
        let (y0, y1) = span(hy, h);
        if x0 > x1 || y0 > y1 {
            return None;
        }
        let weights = |f: f64| {
            let i = f.floor();
            (i as i64, f - i)
        };
        let (ax, afx) = weights(-hx);
        let (ay, afy) = weights(-hy);
        let (bx, bfx) = weights(hx);
        let (by, bfy) = weights(hy);
        let sample = |data: &[f64], x: usize, y: usize, ox: i64, fx: f64, oy: i64, fy: f64| {
            let xi = (x as i64 + ox) as usize;
            let yi = (y as i64 + oy) as usize;
            let xj = (xi + 1).min(w - 1);
            let yj = (yi + 1).min(h - 1);
            let top = data[yi * w + xi] * (1.0 - fx) + data[yi * w + xj] * fx;
            let bottom = data[yj * w + xi] * (1.0 - fx) + data[yj * w + xj] * fx;
            top * (1.0 - fy) + bottom * fy
        };
        let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0usize, 0.0, 0.0, 0.0, 0.0, 0.0);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if let Some(v) = self.valid {
                    let xi = (x as i64 + bx) as usize;
                    let yi = (y as i64 + by) as usize;
                    let (xj, yj) = ((xi + 1).min(w - 1), (yi + 1).min(h - 1));
                    if !(v[yi * w + xi] && v[yi * w + xj] && v[yj * w + xi] && v[yj * w + xj]) {
                        continue;
                    }
                }
                let a = sample(self.reference, x, y, ax, afx, ay, afy);
                let b = sample(self.moving, x, y, bx, bfx, by, bfy);
                n += 1;
                sa += a;
                sb += b;
                saa += a * a;
                sbb += b * b;
                sab += a * b;
            }
        }
        if n < self.min_overlap {
            return None;
        }
        let nf = n as f64;
        let cov = sab - sa * sb / nf;
        let va = saa - sa * sa / nf;
        let vb = sbb - sb * sb / nf;
        if va <= 1e-12 * nf || vb <= 1e-12 * nf {
            return None;
        }
        Some((cov / (va * vb).sqrt()).abs())
    }

    /// Coarse-to-fine grid search of [`Self::ncc_frac`] around `start`.
    fn refine(&self, start: (f64, f64), start_score: f64) -> ((f64, f64), f64) {
        let mut best = (start, start_score);
        let mut step = SUBPIXEL_FIRST_STEP;
        for _ in 0..SUBPIXEL_LEVELS {
            let centre = best.0;
            for j in -2..=2 {
                for i in -2..=2 {
                    if i == 0 && j == 0 {
                        continue;
                    }
                    let d = (centre.0 + i as f64 * step, centre.1 + j as f64 * step);
                    if let Some(s) = self.ncc_frac(d.0, d.1) {
                        if s > best.1 {
                            best = (d, s);
                        }
                    }
                }
            }
            step /= 4.0;
        }
        best
    }

    fn exhaustive_peak(&self, radius: i64) -> Option<(i64, i64)> {
        let mut best: Option<((i64, i64), f64)> = None;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if let Some(s) = self.ncc(dx, dy) {
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some(((dx, dy), s));
                    }
                }
            }
        }
        best.map(|(d, _)| d)
    }

    fn phase_peak(&self, radius: i64) -> Option<(i64, i64)> {
        let (w, h) = (self.width, self.height);
        let mut planner = FftPlanner::<f64>::new();
        let row_fwd = planner.plan_fft_forward(w);
        let col_fwd = planner.plan_fft_forward(h);
        let row_inv = planner.plan_fft_inverse(w);
        let col_inv = planner.plan_fft_inverse(h);

        let hann = |i: usize, n: usize| {
            if n < 2 {
                1.0
            } else {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()
            }
        };
        let prepare = |data: &[f64], valid: Option<&[bool]>| {
            let (sum, count) = data
                .iter()
                .enumerate()
                .filter(|(i, _)| valid.is_none_or(|v| v[*i]))
                .fold((0.0, 0usize), |(s, c), (_, &v)| (s + v, c + 1));
            let mean = if count > 0 { sum / count as f64 } else { 0.0 };
            let mut buf: Vec<Complex<f64>> = (0..w * h)
                .map(|i| {
                    let v = if valid.is_none_or(|m| m[i]) { data[i] - mean } else { 0.0 };
                    Complex::new(v * hann(i % w, w) * hann(i / w, h), 0.0)
                })
                .collect();
            fft2(&mut buf, w, h, &row_fwd, &col_fwd);
            buf
        };
        let fa = prepare(self.reference, None);
        let mut cross = prepare(self.moving, self.valid);
        for (c, a) in cross.iter_mut().zip(&fa) {
            let v = *c * a.conj();
            let mag = v.norm();
            *c = if mag > 1e-15 { v / mag } else { Complex::new(0.0, 0.0) };
        }
        fft2(&mut cross, w, h, &row_inv, &col_inv);

        let rx = radius.min((w as i64 - 1) / 2);
        let ry = radius.min((h as i64 - 1) / 2);
        let mut best: Option<((i64, i64), f64)> = None;
        for dy in -ry..=ry {
            for dx in -rx..=rx {
                let ix = dx.rem_euclid(w as i64) as usize;
                let iy = dy.rem_euclid(h as i64) as usize;
                let s = cross[iy * w + ix].re.abs();
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some(((dx, dy), s));
                }
            }
        }
        best.map(|(d, _)| d)
    }
}

fn fft2(
    buf: &mut [Complex<f64>],
    w: usize,
    h: usize,
    rows: &Arc<dyn Fft<f64>>,
    cols: &Arc<dyn Fft<f64>>,
) {
    for row in buf.chunks_exact_mut(w) {
        rows.process(row);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        cols.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

/// Vertex of the parabola through `(-1, m)`, `(0, c)`, `(1, p)`: offset in
/// `[-0.5, 0.5]` and interpolated peak value.
fn parabolic_peak(m: Option<f64>, c: f64, p: Option<f64>) -> (f64, f64) {
    let (Some(m), Some(p)) = (m, p) else {
        return (0.0, c);
    };
    let curvature = m - 2.0 * c + p;
    if curvature >= 0.0 {
        return (0.0, c);
    }
    let offset = (0.5 * (m - p) / curvature).clamp(-0.5, 0.5);
    let value = c - 0.25 * (p - m) * offset;
    (offset, value)
}

fn check_variance(img: &BandImage) -> Result<()> {
    let mean = img.mean();
    let var = img.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / img.data().len() as f64;
    if var <= 1e-14 {
        return Err(Error::ConstantImage);
    }
    Ok(())
}

fn translation_with_mask(
    reference: &BandImage,
    moving: &BandImage,
    valid: Option<&[bool]>,
    params: &SearchParams,
) -> Result<Estimate> {
    reference.ensure_same_dims(moving)?;
    check_variance(reference)?;
    check_variance(moving)?;
    let (w, h) = reference.dims();
    let corr = Correlator {
        reference: reference.data(),
        moving: moving.data(),
        valid,
        width: w as usize,
        height: h as usize,
        min_overlap: (w as usize * h as usize / 4).max(16),
    };
    let radius = params.radius as i64;
    let use_phase = match params.method {
        CorrelationMethod::Auto => w.min(h) >= PHASE_MIN_SIDE,
        CorrelationMethod::Phase => true,
        CorrelationMethod::Exhaustive => false,
    };
    let peak = if use_phase {
        corr.phase_peak(radius)
    } else {
        corr.exhaustive_peak(radius)
    };
    let no_similarity = |peak: f64| Error::NoSimilarity {
        peak,
        threshold: params.confidence,
    };
    let (dx, dy) = peak.ok_or_else(|| no_similarity(0.0))?;
    let centre = corr.ncc(dx, dy).ok_or_else(|| no_similarity(0.0))?;
    if centre < params.confidence {
        return Err(no_similarity(centre));
    }
    if centre >= 1.0 - 1e-12 {
        // exact integer match, nothing to refine
        return Ok(Estimate {
            transform: Transform2D::translation(dx as f64, dy as f64),
            score: centre,
        });
    }
    let ((sx, sy), score) = corr.refine((dx as f64, dy as f64), centre);
    Ok(Estimate {
        transform: Transform2D::translation(sx, sy),
        score,
    })
}

/// Translation that best aligns `moving` onto `reference`, with its score.
pub fn estimate_translation_scored(
    reference: &BandImage,
    moving: &BandImage,
    params: &SearchParams,
) -> Result<Estimate> {
    translation_with_mask(reference, moving, None, params)
}

/// Integer-pixel correlation peak refined to subpixel by a local search of
/// interpolated correlation.
pub fn estimate_translation(
    reference: &BandImage,
    moving: &BandImage,
    params: &SearchParams,
) -> Result<Transform2D> {
    estimate_translation_scored(reference, moving, params).map(|e| e.transform)
}

fn translation_at_angle(
    reference: &BandImage,
    moving: &BandImage,
    theta: f64,
    params: &SearchParams,
) -> Result<Estimate> {
    if theta == 0.0 {
        return estimate_translation_scored(reference, moving, params);
    }
    let (derotated, valid) = resample_with_mask(moving, &Transform2D::new(0.0, 0.0, theta));
    let est = translation_with_mask(reference, &derotated, Some(&valid), params)?;
    // derotated = reference shifted by R(-theta) t, so rotate back
    let (s, c) = theta.sin_cos();
    let (sx, sy) = (est.transform.tx, est.transform.ty);
    Ok(Estimate {
        transform: Transform2D::new(c * sx - s * sy, s * sx + c * sy, theta),
        score: est.score,
    })
}

/// Grid search over rotation, each candidate scored by the translation
/// search; the winning angle is refined by a parabolic fit of the scores.
pub fn estimate_rigid(
    reference: &BandImage,
    moving: &BandImage,
    params: &SearchParams,
) -> Result<Transform2D> {
    estimate_rigid_scored(reference, moving, params).map(|e| e.transform)
}

pub fn estimate_rigid_scored(
    reference: &BandImage,
    moving: &BandImage,
    params: &SearchParams,
) -> Result<Estimate> {
    let max = params.max_angle_deg;
    let step = params.angle_step_deg;
    if !(max > 0.0 && step > 0.0) {
        return estimate_translation_scored(reference, moving, params);
    }
    let n = (max / step + 1e-9).floor() as i64;
    let mut scores: BTreeMap<i64, f64> = BTreeMap::new();
    let mut best: Option<(i64, Estimate)> = None;
    let mut last_err = None;
    // smallest |angle| first so ties keep the smaller rotation
    let order = std::iter::once(0).chain((1..=n).flat_map(|k| [-k, k]));
    for k in order {
        let theta = (k as f64 * step).to_radians();
        match translation_at_angle(reference, moving, theta, params) {
            Ok(est) => {
                scores.insert(k, est.score);
                if best.is_none_or(|(_, b)| est.score > b.score) {
                    best = Some((k, est));
                }
            }
            Err(e @ (Error::ConstantImage | Error::DimensionMismatch(_))) => return Err(e),
            Err(e) => last_err = Some(e),
        }
    }
    let (k, est) = match best {
        Some(b) => b,
        None => return Err(last_err.unwrap_or(Error::ConstantImage)),
    };
    let (offset, _) = parabolic_peak(
        scores.get(&(k - 1)).copied(),
        est.score,
        scores.get(&(k + 1)).copied(),
    );
    if offset == 0.0 {
        return Ok(est);
    }
    let theta = ((k as f64 + offset) * step).to_radians();
    match translation_at_angle(reference, moving, theta, params) {
        Ok(refined) if refined.score > est.score => Ok(refined),
        _ => Ok(est),
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRegion {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl CropRegion {
    /// Shrinks each dimension to a multiple of `m`, trimming evenly.
    pub fn to_multiple(self, m: u32) -> Result<Self> {
        let m = m.max(1);
        let w = self.width / m * m;
        let h = self.height / m * m;
        if w == 0 || h == 0 {
            return Err(Error::EmptyIntersection);
        }
        Ok(CropRegion {
            x: self.x + (self.width - w) / 2,
            y: self.y + (self.height - h) / 2,
            width: w,
            height: h,
        })
    }
}

/// Largest all-true rectangle in a row-major boolean grid; the first found
/// wins ties.
fn largest_valid_rectangle(valid: &[bool], width: usize, height: usize) -> Option<CropRegion> {
    let mut heights = vec![0usize; width];
    let mut best: Option<(usize, CropRegion)> = None;
    let mut stack: Vec<usize> = Vec::with_capacity(width + 1);
    for y in 0..height {
        for x in 0..width {
            heights[x] = if valid[y * width + x] { heights[x] + 1 } else { 0 };
        }
        stack.clear();
        for x in 0..=width {
            let cur = if x < width { heights[x] } else { 0 };
            while let Some(&top) = stack.last() {
                if heights[top] <= cur {
                    break;
                }
                stack.pop();
                let h = heights[top];
                let left = stack.last().map_or(0, |&l| l + 1);
                let area = h * (x - left);
                if area > 0 && best.is_none_or(|(a, _)| area > a) {
                    best = Some((
                        area,
                        CropRegion {
                            x: left as u32,
                            y: (y + 1 - h) as u32,
                            width: (x - left) as u32,
                            height: h as u32,
                        },
                    ));
                }
            }
            stack.push(x);
        }
    }
    best.map(|(_, r)| r)
}

/// Warps every non-reference band into the first band's geometry and
/// returns the largest region where all bands have data, shrunk by
/// `margin` on each side.
pub fn warp_and_crop_region(
    frame: &MultispectralFrame,
    transforms: &BTreeMap<String, Transform2D>,
    margin: u32,
) -> Result<(MultispectralFrame, CropRegion)> {
    let (w, h) = frame.dims();
    let mut all_valid = vec![true; w as usize * h as usize];
    let mut warped = Vec::with_capacity(frame.bands().len());
    for (i, band) in frame.bands().iter().enumerate() {
        if i == 0 {
            warped.push(band.clone());
            continue;
        }
        let t = transforms.get(band.band().name()).ok_or_else(|| {
            Error::InvalidConfig(format!("no transform for band {}", band.band()))
        })?;
        if t.is_identity() {
            warped.push(band.clone());
            continue;
        }
        let (out, valid) = resample_with_mask(band, t);
        for (a, v) in all_valid.iter_mut().zip(valid) {
            *a &= v;
        }
        warped.push(out);
    }
    let rect = largest_valid_rectangle(&all_valid, w as usize, h as usize)
        .ok_or(Error::EmptyIntersection)?;
    if rect.width <= 2 * margin || rect.height <= 2 * margin {
        return Err(Error::EmptyIntersection);
    }
    let region = CropRegion {
        x: rect.x + margin,
        y: rect.y + margin,
        width: rect.width - 2 * margin,
        height: rect.height - 2 * margin,
    };
    let bands = warped
        .iter()
        .map(|b| b.crop(region.x, region.y, region.width, region.height))
        .collect::<Result<Vec<_>>>()?;
    Ok((MultispectralFrame::new(frame.frame_id(), bands)?, region))
}

pub fn warp_and_crop(
    frame: &MultispectralFrame,
    transforms: &BTreeMap<String, Transform2D>,
    margin: u32,
) -> Result<MultispectralFrame> {
    warp_and_crop_region(frame, transforms, margin).map(|(f, _)| f)
}

/// Persisted rig calibration: estimated once, reused for every frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub reference: String,
    pub transforms: BTreeMap<String, Transform2D>,
    #[serde(default)]
    pub intrinsics: Option<CameraIntrinsics>,
    pub search: SearchParams,
}

impl Registration {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Undistorts (when intrinsics are set), warps and crops one frame.
    pub fn apply(
        &self,
        frame: &MultispectralFrame,
        margin: u32,
    ) -> Result<(MultispectralFrame, CropRegion)> {
        let frame = match &self.intrinsics {
            Some(k) => MultispectralFrame::new(
                frame.frame_id(),
                frame
                    .bands()
                    .iter()
                    .map(|b| undistort(b, k))
                    .collect::<Result<Vec<_>>>()?,
            )?,
            None => frame.clone(),
        };
        warp_and_crop_region(&frame, &self.transforms, margin)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::Band;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth random texture: a sum of random sinusoids plus blobs.
    fn texture(w: u32, h: u32, seed: u64) -> impl Fn(f64, f64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<(f64, f64, f64, f64)> = (0..8)
            .map(|_| {
                (
                    rng.gen_range(0.05..0.3),
                    rng.gen_range(0.05..0.3),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.2..1.0),
                )
            })
            .collect();
        let blobs: Vec<(f64, f64, f64)> = (0..12)
            .map(|_| {
                (
                    rng.gen_range(0.0..w as f64),
                    rng.gen_range(0.0..h as f64),
                    rng.gen_range(2.0..6.0),
                )
            })
            .collect();
        move |x, y| {
            let mut v = 0.5;
            for &(a, b, p, amp) in &waves {
                v += 0.05 * amp * (a * x + b * y + p).sin();
            }
            for &(bx, by, r) in &blobs {
                let d2 = (x - bx).powi(2) + (y - by).powi(2);
                v += 0.3 * (-d2 / (2.0 * r * r)).exp();
            }
            v
        }
    }

    fn render(w: u32, h: u32, band: Band, f: &impl Fn(f64, f64) -> f64) -> BandImage {
        BandImage::from_fn(w, h, band, |x, y| f(x as f64, y as f64)).unwrap()
    }

    /// `mov(p) = ref(T^-1 p)` evaluated analytically.
    fn moved(w: u32, h: u32, t: Transform2D, f: &impl Fn(f64, f64) -> f64) -> BandImage {
        let inv = t.inverse();
        let (cx, cy) = image_center(w, h);
        BandImage::from_fn(w, h, Band::Red, |x, y| {
            let (sx, sy) = inv.apply(x as f64, y as f64, cx, cy);
            f(sx, sy)
        })
        .unwrap()
    }

    #[test]
    fn transform_inverse_round_trips() {
        let t = Transform2D::new(2.5, -1.0, 0.3);
        let inv = t.inverse();
        let (x, y) = t.apply(3.0, 7.0, 10.0, 10.0);
        let (bx, by) = inv.apply(x, y, 10.0, 10.0);
        assert!((bx - 3.0).abs() < 1e-12 && (by - 7.0).abs() < 1e-12);
    }

    #[test]
    fn undistort_identity_is_bit_exact() {
        let img = render(20, 15, Band::Nir, &texture(20, 15, 1));
        let k = CameraIntrinsics::centered(20, 15, 20.0);
        assert_eq!(undistort(&img, &k).unwrap(), img);
    }

    #[test]
    fn undistort_fixes_principal_point() {
        let img = render(21, 21, Band::Nir, &texture(21, 21, 2));
        let mut k = CameraIntrinsics::centered(21, 21, 21.0);
        k.k1 = 0.3;
        k.k2 = -0.1;
        let out = undistort(&img, &k).unwrap();
        assert_eq!(out.get(10, 10), img.get(10, 10));
    }

    #[test]
    fn undistort_inverts_forward_distortion() {
        let (w, h) = (64, 64);
        let f = texture(w, h, 3);
        let mut k = CameraIntrinsics::centered(w, h, 64.0);
        k.k1 = 0.1;
        // forward oracle: D(q) = U(p) with distort(p) = q, p found by Newton
        let distorted = BandImage::from_fn(w, h, Band::Nir, |qx, qy| {
            let (qx, qy) = (qx as f64, qy as f64);
            let (mut px, mut py) = (qx, qy);
            for _ in 0..50 {
                let (dx, dy) = k.distort_point(px, py);
                px -= dx - qx;
                py -= dy - qy;
            }
            f(px, py)
        })
        .unwrap();
        let out = undistort(&distorted, &k).unwrap();
        let truth = render(w, h, Band::Nir, &f);
        let mut worst: f64 = 0.0;
        for y in 5..h - 5 {
            for x in 5..w - 5 {
                worst = worst.max((out.get(x, y) - truth.get(x, y)).abs());
            }
        }
        assert!(worst <= 0.02, "max error {worst}");
    }

    #[test]
    fn undistort_rejects_bad_intrinsics() {
        let img = BandImage::filled(4, 4, Band::Nir, 0.5).unwrap();
        let mut k = CameraIntrinsics::centered(4, 4, 4.0);
        k.fx = 0.0;
        assert!(undistort(&img, &k).is_err());
    }

    #[test]
    fn identity_translation() {
        let img = render(80, 80, Band::Nir, &texture(80, 80, 4));
        let t = estimate_translation(&img, &img, &SearchParams::default()).unwrap();
        assert_eq!((t.tx, t.ty, t.theta), (0.0, 0.0, 0.0));
    }

    #[test]
    fn recovers_zero_filled_integer_shift_with_both_methods() {
        let (w, h) = (80, 72);
        let img = render(w, h, Band::Nir, &texture(w, h, 5));
        let shifted = BandImage::from_fn(w, h, Band::Red, |x, y| {
            if x >= 3 && y >= 5 {
                img.get(x - 3, y - 5)
            } else {
                0.0
            }
        })
        .unwrap();
        for method in [CorrelationMethod::Phase, CorrelationMethod::Exhaustive] {
            let params = SearchParams {
                method,
                ..SearchParams::default()
            };
            let t = estimate_translation(&img, &shifted, &params).unwrap();
            assert!((t.tx - 3.0).abs() <= 0.5 && (t.ty - 5.0).abs() <= 0.5, "{method:?} {t:?}");
        }
    }

    #[test]
    fn methods_agree_on_subpixel_shift() {
        let (w, h) = (96, 96);
        let f = texture(w, h, 6);
        let r = render(w, h, Band::Nir, &f);
        let m = moved(w, h, Transform2D::translation(-4.3, 2.6), &f);
        let est = |method| {
            estimate_translation(&r, &m, &SearchParams { method, ..Default::default() }).unwrap()
        };
        let a = est(CorrelationMethod::Phase);
        let b = est(CorrelationMethod::Exhaustive);
        assert!((a.tx - b.tx).abs() <= 0.5 && (a.ty - b.ty).abs() <= 0.5);
        assert!((a.tx + 4.3).abs() <= 0.5 && (a.ty - 2.6).abs() <= 0.5, "{a:?}");
    }

    #[test]
    fn contrast_inverted_band_still_registers() {
        let (w, h) = (64, 64);
        let f = texture(w, h, 7);
        let r = render(w, h, Band::Nir, &f);
        let m = moved(w, h, Transform2D::translation(2.0, -3.0), &|x, y| 1.0 - f(x, y));
        let t = estimate_translation(&r, &m, &SearchParams::default()).unwrap();
        assert!((t.tx - 2.0).abs() <= 0.5 && (t.ty + 3.0).abs() <= 0.5);
    }

    #[test]
    fn constant_image_is_rejected() {
        let img = render(32, 32, Band::Nir, &texture(32, 32, 8));
        let flat = BandImage::filled(32, 32, Band::Red, 0.3).unwrap();
        assert!(matches!(
            estimate_translation(&img, &flat, &SearchParams::default()),
            Err(Error::ConstantImage)
        ));
    }

    #[test]
    fn unrelated_images_have_no_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = BandImage::from_fn(64, 64, Band::Nir, |_, _| rng.gen()).unwrap();
        let b = BandImage::from_fn(64, 64, Band::Red, |_, _| rng.gen()).unwrap();
        let params = SearchParams {
            radius: 2,
            ..Default::default()
        };
        assert!(matches!(
            estimate_translation(&a, &b, &params),
            Err(Error::NoSimilarity { .. })
        ));
    }

    #[test]
    fn rigid_identity_and_rotation() {
        let (w, h) = (96, 96);
        let f = texture(w, h, 10);
        let r = render(w, h, Band::Nir, &f);
        let t = estimate_rigid(&r, &r, &SearchParams::default()).unwrap();
        assert_eq!((t.tx, t.ty, t.theta), (0.0, 0.0, 0.0));

        let truth = Transform2D::new(2.0, 0.0, 1.0f64.to_radians());
        let m = moved(w, h, truth, &f);
        let t = estimate_rigid(&r, &m, &SearchParams::default()).unwrap();
        assert!((t.theta.to_degrees() - 1.0).abs() <= 0.25, "{t:?}");
        assert!((t.tx - 2.0).abs() <= 0.5 && t.ty.abs() <= 0.5, "{t:?}");
    }

    #[test]
    fn empty_angle_range_is_translation_only() {
        let (w, h) = (64, 64);
        let f = texture(w, h, 11);
        let r = render(w, h, Band::Nir, &f);
        let m = moved(w, h, Transform2D::translation(1.0, 1.0), &f);
        let params = SearchParams {
            max_angle_deg: 0.0,
            ..Default::default()
        };
        let t = estimate_rigid(&r, &m, &params).unwrap();
        assert_eq!(t.theta, 0.0);
        assert!((t.tx - 1.0).abs() <= 0.5 && (t.ty - 1.0).abs() <= 0.5);
    }

    fn two_band_frame(w: u32, h: u32) -> MultispectralFrame {
        let f = texture(w, h, 12);
        MultispectralFrame::new(
            "f",
            vec![render(w, h, Band::Nir, &f), render(w, h, Band::Red, &f)],
        )
        .unwrap()
    }

    #[test]
    fn identity_warp_leaves_frame_unchanged() {
        let frame = two_band_frame(12, 10);
        let mut ts = BTreeMap::new();
        ts.insert("Red".to_string(), Transform2D::identity());
        assert_eq!(warp_and_crop(&frame, &ts, 0).unwrap(), frame);
    }

    #[test]
    fn shifted_band_crops_to_overlap() {
        let frame = two_band_frame(10, 6);
        let mut ts = BTreeMap::new();
        ts.insert("Red".to_string(), Transform2D::translation(3.0, 0.0));
        let (out, region) = warp_and_crop_region(&frame, &ts, 0).unwrap();
        assert_eq!(out.dims(), (7, 6));
        assert_eq!((region.x, region.y), (0, 0));
        // integer shift resamples exactly
        assert_eq!(out.bands()[1].get(0, 0), frame.bands()[1].get(3, 0));
    }

    #[test]
    fn oversized_margin_is_empty_intersection() {
        let frame = two_band_frame(10, 10);
        let mut ts = BTreeMap::new();
        ts.insert("Red".to_string(), Transform2D::identity());
        assert!(matches!(
            warp_and_crop(&frame, &ts, 6),
            Err(Error::EmptyIntersection)
        ));
    }

    #[test]
    fn missing_transform_is_an_error() {
        let frame = two_band_frame(10, 10);
        assert!(warp_and_crop(&frame, &BTreeMap::new(), 0).is_err());
    }

    #[test]
    fn rotated_warp_crops_to_fully_valid_rectangle() {
        let frame = two_band_frame(40, 30);
        let mut ts = BTreeMap::new();
        ts.insert("Red".to_string(), Transform2D::new(1.5, -0.5, 0.05));
        let (out, region) = warp_and_crop_region(&frame, &ts, 1).unwrap();
        let (w, h) = out.dims();
        assert!(w < 40 && h < 30 && w > 20 && h > 15);
        let (_, valid) = resample_with_mask(&frame.bands()[1], &ts["Red"]);
        for y in region.y..region.y + region.height {
            for x in region.x..region.x + region.width {
                assert!(valid[(y * 40 + x) as usize]);
            }
        }
    }

    #[test]
    fn crop_region_to_multiple() {
        let r = CropRegion {
            x: 2,
            y: 0,
            width: 61,
            height: 64,
        };
        let m = r.to_multiple(4).unwrap();
        assert_eq!((m.x, m.y, m.width, m.height), (2, 0, 60, 64));
    }

    #[test]
    fn registration_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.json");
        let mut transforms = BTreeMap::new();
        transforms.insert("Red".into(), Transform2D::new(1.25, -2.0, 0.01));
        let reg = Registration {
            reference: "NIR".into(),
            transforms,
            intrinsics: Some(CameraIntrinsics::centered(64, 64, 60.0)),
            search: SearchParams::default(),
        };
        reg.save(&path).unwrap();
        assert_eq!(Registration::load(&path).unwrap(), reg);
    }
}
