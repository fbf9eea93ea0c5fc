//! Feature extraction: residual trunk, top-down pyramid neck and the
//! concentric field-of-view fusion.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{crop_span, mfov_crop_limits};

use super::config::{BackboneConfig, UpsampleKind};
use super::params::ParamStore;

/// Parameter name prefixes for one field of view. The innermost view uses
/// the plain names so a single-view model is the `K = 1` case verbatim.
pub(crate) fn fov_prefix(k: usize, k_total: usize) -> (String, String) {
    if k == k_total {
        ("backbone".into(), "neck".into())
    } else {
        (format!("fov{k}.backbone"), format!("fov{k}.neck"))
    }
}

fn conv(g: &mut Graph, params: &ParamStore, name: &str, x: Var, stride: usize, pad: usize) -> Var {
    let w = g.param(&format!("{name}.w"), params.get(&format!("{name}.w")));
    let b = g.param(&format!("{name}.b"), params.get(&format!("{name}.b")));
    g.conv2d(x, w, Some(b), stride, pad)
}

/// Stride-2 stages with one residual block each. Returns the output of
/// every stage; entry `t` has stride `2^(t + 2)`.
pub(crate) fn backbone(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    cfg: &BackboneConfig,
    image: Var,
) -> Vec<Var> {
    let stem = conv(g, params, &format!("{prefix}.stem"), image, 2, 1);
    let mut h = g.relu(stem);
    let mut outs = Vec::with_capacity(cfg.stage_channels.len());
    for t in 0..cfg.stage_channels.len() {
        let d = conv(g, params, &format!("{prefix}.s{t}.down"), h, 2, 1);
        let d = g.relu(d);
        let r = conv(g, params, &format!("{prefix}.s{t}.res1"), d, 1, 1);
        let r = g.relu(r);
        let r = conv(g, params, &format!("{prefix}.s{t}.res2"), r, 1, 1);
        let s = g.add(d, r);
        h = g.relu(s);
        outs.push(h);
    }
    outs
}

/// Lateral 1x1 projections, coarse-to-fine nearest-neighbor top-down
/// merging and a 3x3 smoothing convolution per configured level.
pub(crate) fn neck(g: &mut Graph, params: &ParamStore, prefix: &str, cfg: &BackboneConfig, stages: &[Var]) -> Vec<Var> {
    let laterals: Vec<Var> = cfg
        .levels
        .iter()
        .map(|&j| conv(g, params, &format!("{prefix}.lat{j}"), stages[j as usize - 2], 1, 0))
        .collect();
    let mut merged = vec![laterals[laterals.len() - 1]; laterals.len()];
    for i in (0..laterals.len() - 1).rev() {
        let factor = 1usize << (cfg.levels[i + 1] - cfg.levels[i]);
        let up = g.upsample_nearest(merged[i + 1], factor);
        merged[i] = g.add(laterals[i], up);
    }
    cfg.levels
        .iter()
        .zip(merged)
        .map(|(&j, m)| conv(g, params, &format!("{prefix}.smooth{j}"), m, 1, 1))
        .collect()
}

/// Pyramid for one image: one map per configured level, ascending.
pub(crate) fn build_pyramid(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &BackboneConfig,
    image: Var,
    k: usize,
    k_total: usize,
) -> Result<Vec<Var>> {
    let (_, h, w) = g.value(image).dims3();
    let div = 1usize << cfg.max_level();
    if h % div != 0 || w % div != 0 {
        return Err(Error::invalid(format!(
            "input {h}x{w} must be divisible by {div} for pyramid levels up to {}",
            cfg.max_level()
        )));
    }
    let (bp, np) = fov_prefix(k, k_total);
    let stages = backbone(g, params, &bp, cfg, image);
    Ok(neck(g, params, &np, cfg, &stages))
}

/// Fuses `K` pyramids (innermost last) into an enhanced innermost pyramid:
/// per level, each outer map is center-cropped to the innermost footprint,
/// upsampled back to full size, summed onto the innermost map and smoothed
/// by a 3x3 convolution.
pub(crate) fn mfov_aggregate(
    g: &mut Graph,
    params: &ParamStore,
    levels: &[u32],
    upsample: UpsampleKind,
    pyramids: &[Vec<Var>],
) -> Result<Vec<Var>> {
    let k_total = pyramids.len();
    let inner = &pyramids[k_total - 1];
    if k_total == 1 {
        return Ok(inner.clone());
    }
    for (k, p) in pyramids.iter().enumerate() {
        if p.len() != inner.len()
            || p.iter().zip(inner).any(|(a, b)| g.value(*a).shape() != g.value(*b).shape())
        {
            return Err(Error::invalid(format!(
                "pyramid of field of view {} does not match the innermost pyramid's shapes",
                k + 1
            )));
        }
    }
    let mut out = Vec::with_capacity(inner.len());
    for (li, &j) in levels.iter().enumerate() {
        let mut acc = inner[li];
        for k in 1..k_total {
            let limits = mfov_crop_limits(k_total as u32, k as u32)?;
            let (_, h, w) = g.value(pyramids[k - 1][li]).dims3();
            let (y0, ch) = crop_span(h, limits.upsample_factor)?;
            let (x0, cw) = crop_span(w, limits.upsample_factor)?;
            let mut up = g.crop(pyramids[k - 1][li], y0, x0, ch, cw);
            for _ in 0..(k_total - k) {
                up = match upsample {
                    UpsampleKind::TransposedConv => {
                        let name = format!("mfov.l{j}.up");
                        let wv = g.param(&format!("{name}.w"), params.get(&format!("{name}.w")));
                        let bv = g.param(&format!("{name}.b"), params.get(&format!("{name}.b")));
                        g.conv_transpose2d(up, wv, Some(bv), 2, 0)
                    }
                    UpsampleKind::Bilinear => g.upsample_bilinear2x(up),
                };
            }
            acc = g.add(acc, up);
        }
        out.push(conv(g, params, &format!("mfov.l{j}.fuse"), acc, 1, 1));
    }
    Ok(out)
}

/// Bilinear features of every level at `points (M, 2)`, concatenated in
/// ascending level order into `(M, L * C)`.
pub(crate) fn extract_multiscale_features(g: &mut Graph, levels: &[u32], pyramid: &[Var], points: Var) -> Var {
    let parts: Vec<Var> = levels
        .iter()
        .zip(pyramid)
        .map(|(&j, &p)| g.sample_points(p, points, (1u64 << j) as f64))
        .collect();
    if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_cols(&parts)
    }
}
