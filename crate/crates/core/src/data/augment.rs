//! Random isotropic scaling about the image center, integer shifts and
//! flips, applied consistently to every concentric view.
//!
//! For a view covering `f` times the innermost side, a shift of `t`
//! innermost pixels is `t / f` of its own pixels; scaling and flipping about
//! the center commute with the concentric layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Cell, Sample};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub scale_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub shift_prob: f64,
    /// Maximum shift as a fraction of the image side.
    pub shift_frac: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_prob: 0.5,
            scale_min: 0.8,
            scale_max: 1.2,
            shift_prob: 0.5,
            shift_frac: 0.1,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
        }
    }
}

/// One concrete draw of the augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub scale: f64,
    /// Innermost-view pixels.
    pub shift: (i64, i64),
    pub hflip: bool,
    pub vflip: bool,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        scale: 1.0,
        shift: (0, 0),
        hflip: false,
        vflip: false,
    };

    pub fn sample<R: Rng>(cfg: &AugmentConfig, rng: &mut R, width: usize, height: usize) -> Self {
        let scale = if rng.random::<f64>() < cfg.scale_prob {
            rng.random_range(cfg.scale_min..=cfg.scale_max)
        } else {
            1.0
        };
        let shift = if rng.random::<f64>() < cfg.shift_prob {
            let mx = (cfg.shift_frac * width as f64).floor() as i64;
            let my = (cfg.shift_frac * height as f64).floor() as i64;
            (rng.random_range(-mx..=mx), rng.random_range(-my..=my))
        } else {
            (0, 0)
        };
        AugmentDraw {
            scale,
            shift,
            hflip: rng.random::<f64>() < cfg.hflip_prob,
            vflip: rng.random::<f64>() < cfg.vflip_prob,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Where an innermost-frame point lands.
    fn map(&self, x: f64, y: f64, width: usize, height: usize) -> (f64, f64) {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let mut nx = cx + self.scale * (x - cx) + self.shift.0 as f64;
        let mut ny = cy + self.scale * (y - cy) + self.shift.1 as f64;
        if self.hflip {
            nx = width as f64 - 1.0 - nx;
        }
        if self.vflip {
            ny = height as f64 - 1.0 - ny;
        }
        (nx, ny)
    }

    /// Applies the draw: resamples every view and moves the cells, dropping
    /// those that leave the frame.
    pub fn apply(&self, sample: &Sample) -> Sample {
        if self.is_identity() {
            return sample.clone();
        }
        let k = sample.views.len();
        let views = sample
            .views
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let factor = (1u64 << (k - 1 - i)) as f64;
                self.resample(v, factor)
            })
            .collect();
        let (w, h) = (sample.width(), sample.height());
        let cells = sample
            .cells
            .iter()
            .filter_map(|c| {
                let (x, y) = self.map(c.x, c.y, w, h);
                (x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64).then_some(Cell { x, y, class: c.class })
            })
            .collect();
        Sample {
            name: sample.name.clone(),
            views,
            cells,
        }
    }

    fn resample(&self, t: &Tensor, factor: f64) -> Tensor {
        let (c, h, w) = t.dims3();
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (tx, ty) = (self.shift.0 as f64 / factor, self.shift.1 as f64 / factor);
        let src = t.data();
        let mut out = vec![0.0; c * h * w];
        for oy in 0..h {
            for ox in 0..w {
                let mut x = ox as f64;
                let mut y = oy as f64;
                if self.hflip {
                    x = w as f64 - 1.0 - x;
                }
                if self.vflip {
                    y = h as f64 - 1.0 - y;
                }
                let sx = cx + (x - cx - tx) / self.scale;
                let sy = cy + (y - cy - ty) / self.scale;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let taps = [
                    (x0, y0, (1.0 - fx) * (1.0 - fy)),
                    (x0 + 1.0, y0, fx * (1.0 - fy)),
                    (x0, y0 + 1.0, (1.0 - fx) * fy),
                    (x0 + 1.0, y0 + 1.0, fx * fy),
                ];
                for (px, py, wgt) in taps {
                    if wgt == 0.0 || px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
                        continue;
                    }
                    let (px, py) = (px as usize, py as usize);
                    for k in 0..c {
                        out[(k * h + oy) * w + ox] += wgt * src[(k * h + py) * w + px];
                    }
                }
            }
        }
        Tensor::from_vec(&[c, h, w], out)
    }
}

/// Draws and applies a random augmentation.
pub fn augment<R: Rng>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let draw = AugmentDraw::sample(cfg, rng, sample.width(), sample.height());
    draw.apply(sample)
}
