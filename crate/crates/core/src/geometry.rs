//! Coordinate and sampling arithmetic shared by the model and the data
//! pipeline: proposal grids, image to feature-level mapping, bilinear
//! point sampling, proposal deformation and concentric-crop limits.
//!
//! Image coordinates put pixel centers on integers: pixel `(i, j)` covers
//! `[i - 0.5, i + 0.5)`. A feature map at stride `s` maps image coordinate
//! `x` to `(x + 0.5) / s - 0.5`, so the center of feature cell `q` is the
//! center of the image block it summarizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A 2-D location in image pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dist(&self, other: &Point) -> f64 {
        self.dist2(other).sqrt()
    }

    pub fn dist2(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

/// Pre-set proposals and, once the deformation head has run, their moved
/// counterparts.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    pub initial: Vec<Point>,
    pub deformed: Option<Vec<Point>>,
    pub interval: f64,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.initial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.initial.is_empty()
    }

    /// Deformed positions if present, otherwise the initial grid.
    pub fn positions(&self) -> &[Point] {
        self.deformed.as_deref().unwrap_or(&self.initial)
    }
}

/// One feature map of a pyramid, stored `(C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub level: u32,
    pub data: Tensor,
}

impl PyramidLevel {
    pub fn new(level: u32, data: Tensor) -> Self {
        assert_eq!(data.shape().len(), 3, "pyramid levels are (C, H, W)");
        PyramidLevel { level, data }
    }

    /// Pixels per feature cell, `2^level`.
    pub fn stride(&self) -> f64 {
        (1u64 << self.level) as f64
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Normalized center-crop interval `[lo, hi)` and the integer upsampling
/// factor that restores the cropped map to full size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropLimits {
    pub lo: f64,
    pub hi: f64,
    pub upsample_factor: u32,
}

/// Lays one proposal at the center of every `interval`-sized cell, ordered
/// row-major (y outer, x inner).
pub fn generate_grid_proposals(height: usize, width: usize, interval: f64) -> Result<ProposalSet> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "proposal grid needs positive dimensions, got {height}x{width}"
        )));
    }
    if !(interval.is_finite() && interval > 0.0) {
        return Err(Error::invalid(format!(
            "proposal interval must be positive, got {interval}"
        )));
    }
    let axis = |extent: usize| -> Vec<f64> {
        (0..)
            .map(|a| interval / 2.0 + a as f64 * interval)
            .take_while(|&c| c < extent as f64)
            .collect()
    };
    let xs = axis(width);
    let ys = axis(height);
    let initial = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| Point::new(x, y)))
        .collect();
    Ok(ProposalSet {
        initial,
        deformed: None,
        interval,
    })
}

/// Continuous feature-map coordinate of image point `p` at `stride`.
pub fn image_to_feature_coords(p: Point, stride: f64) -> (f64, f64) {
    ((p.x + 0.5) / stride - 0.5, (p.y + 0.5) / stride - 0.5)
}

/// The four clamped neighbor taps of a bilinear lookup, with the weights
/// and their derivatives with respect to the image-space point.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTaps {
    /// Flat `y * W + x` offsets into one channel plane.
    pub offsets: [usize; 4],
    pub weights: [f64; 4],
    pub dw_dx: [f64; 4],
    pub dw_dy: [f64; 4],
}

impl BilinearTaps {
    pub fn new(p: Point, stride: f64, height: usize, width: usize) -> Self {
        debug_assert!(p.is_finite(), "sampling point must be finite");
        let (u, v) = image_to_feature_coords(p, stride);
        // Beyond one cell outside the map every tap clamps to the border,
        // so limiting the range first only avoids integer overflow.
        let u = u.clamp(-1.0, width as f64);
        let v = v.clamp(-1.0, height as f64);
        let (x0, y0) = (u.floor(), v.floor());
        let (wx, wy) = (u - x0, v - y0);
        let clamp = |i: f64, n: usize| -> usize { i.max(0.0).min((n - 1) as f64) as usize };
        let (ix0, ix1) = (clamp(x0, width), clamp(x0 + 1.0, width));
        let (iy0, iy1) = (clamp(y0, height), clamp(y0 + 1.0, height));
        let inv = 1.0 / stride;
        BilinearTaps {
            offsets: [
                iy0 * width + ix0,
                iy0 * width + ix1,
                iy1 * width + ix0,
                iy1 * width + ix1,
            ],
            weights: [
                (1.0 - wx) * (1.0 - wy),
                wx * (1.0 - wy),
                (1.0 - wx) * wy,
                wx * wy,
            ],
            dw_dx: [
                -(1.0 - wy) * inv,
                (1.0 - wy) * inv,
                -wy * inv,
                wy * inv,
            ],
            dw_dy: [
                -(1.0 - wx) * inv,
                -wx * inv,
                (1.0 - wx) * inv,
                wx * inv,
            ],
        }
    }
}

/// Bilinearly interpolated feature vector of `level` at image point `p`.
///
/// Neighbors outside the map are clamped to the border, so points anywhere
/// in the plane return a value.
pub fn bilinear_sample(level: &PyramidLevel, p: Point) -> Vec<f64> {
    bilinear_sample_with_grad(level, p).0
}

/// As [`bilinear_sample`], also returning `d f_c / d p` for every channel.
pub fn bilinear_sample_with_grad(level: &PyramidLevel, p: Point) -> (Vec<f64>, Vec<[f64; 2]>) {
    let (c, h, w) = level.data.dims3();
    let taps = BilinearTaps::new(p, level.stride(), h, w);
    let data = level.data.data();
    let mut values = Vec::with_capacity(c);
    let mut grads = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        let mut f = 0.0;
        let mut g = [0.0; 2];
        for t in 0..4 {
            let q = plane[taps.offsets[t]];
            f += taps.weights[t] * q;
            g[0] += taps.dw_dx[t] * q;
            g[1] += taps.dw_dy[t] * q;
        }
        values.push(f);
        grads.push(g);
    }
    (values, grads)
}

/// Moves every proposal by its offset. Coordinates are not clamped.
pub fn apply_deformation(proposals: &ProposalSet, offsets: &[Point]) -> Result<ProposalSet> {
    if offsets.len() != proposals.initial.len() {
        return Err(Error::invalid(format!(
            "{} offsets supplied for {} proposals",
            offsets.len(),
            proposals.initial.len()
        )));
    }
    let deformed = proposals
        .initial
        .iter()
        .zip(offsets)
        .map(|(&p, &o)| p + o)
        .collect();
    Ok(ProposalSet {
        initial: proposals.initial.clone(),
        deformed: Some(deformed),
        interval: proposals.interval,
    })
}

/// Crop limits for field of view `k` of `k_total` concentric views; view
/// `k_total` is the innermost (annotated) one.
///
/// The retained fraction is `1 / 2^(K-k)`, so the upsampling factor that
/// restores the innermost resolution is `2^(K-k)`.
pub fn mfov_crop_limits(k_total: u32, k: u32) -> Result<CropLimits> {
    if k < 1 || k >= k_total {
        return Err(Error::invalid(format!(
            "field-of-view index must satisfy 1 <= k < K, got k={k}, K={k_total}"
        )));
    }
    if k_total - k > 30 {
        return Err(Error::invalid("field-of-view depth too large"));
    }
    let factor = 1u32 << (k_total - k);
    let denom = 2.0 * factor as f64;
    Ok(CropLimits {
        lo: (factor as f64 - 1.0) / denom,
        hi: (factor as f64 + 1.0) / denom,
        upsample_factor: factor,
    })
}

/// Start index and length of the center crop along one axis of `size`.
pub(crate) fn crop_span(size: usize, factor: u32) -> Result<(usize, usize)> {
    let f = factor as usize;
    if f == 0 {
        return Err(Error::invalid("upsample factor must be positive"));
    }
    if f == 1 {
        return Ok((0, size));
    }
    if !size.is_multiple_of(2 * f) {
        return Err(Error::invalid(format!(
            "center crop with upsample factor {f} needs spatial size divisible by {}, got {size}",
            2 * f
        )));
    }
    Ok((size * (f - 1) / (2 * f), size / f))
}

/// The centered sub-map spanning `[lo * size, hi * size)` on both axes.
pub fn crop_center(level: &PyramidLevel, limits: &CropLimits) -> Result<PyramidLevel> {
    let (c, h, w) = level.data.dims3();
    let (y0, ch) = crop_span(h, limits.upsample_factor)?;
    let (x0, cw) = crop_span(w, limits.upsample_factor)?;
    Ok(PyramidLevel::new(level.level, crop_tensor(&level.data, y0, x0, ch, cw, c)))
}

pub(crate) fn crop_tensor(t: &Tensor, y0: usize, x0: usize, ch: usize, cw: usize, c: usize) -> Tensor {
    let (_, h, w) = t.dims3();
    let src = t.data();
    let mut out = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for y in y0..y0 + ch {
            let base = (k * h + y) * w;
            out.extend_from_slice(&src[base + x0..base + x0 + cw]);
        }
    }
    Tensor::from_vec(&[c, ch, cw], out)
}

/// Nearest-neighbor upsampling of a `(C, H, W)` tensor by an integer factor.
pub fn upsample_nearest(t: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = t.dims3();
    let (oh, ow) = (h * factor, w * factor);
    let src = t.data();
    let mut out = vec![0.0; c * oh * ow];
    for k in 0..c {
        for y in 0..oh {
            let srow = &src[(k * h + y / factor) * w..(k * h + y / factor + 1) * w];
            let drow = &mut out[(k * oh + y) * ow..(k * oh + y + 1) * ow];
            for (x, d) in drow.iter_mut().enumerate() {
                *d = srow[x / factor];
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}
