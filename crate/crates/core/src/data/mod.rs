//! Point annotations on disk, in-memory training samples, augmentation and
//! the synthetic blob generator.
//!
//! Two dataset layouts are understood:
//!
//! ```text
//! flat:                         multi-field-of-view:
//!   root/images/<stem>.png        root/sample_0001/fov_1.png
//!   root/annotations/<stem>.json  root/sample_0001/...
//!                                 root/sample_0001/fov_K.png
//!                                 root/sample_0001/fov_K.json
//! ```
//!
//! Annotation JSON: `{"width": int, "height": int, "cells": [{"x": f, "y": f, "class": i}]}`.
//! In the multi-view layout only the innermost view `fov_K` is annotated.

mod augment;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig, AugmentDraw};
pub use synth::{
    canvas_to_view, det_exp, generate_synthetic, summarize, write_mfov_dataset, DatasetSummary, MFoVSample,
    SynthSpec,
};

/// A labeled cell center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub x: f64,
    pub y: f64,
    pub class: usize,
}

impl Cell {
    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AnnotationFile {
    width: u32,
    height: u32,
    cells: Vec<Cell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    magnification: Option<String>,
}

/// One annotated image (the innermost view for multi-view samples).
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub cells: Vec<Cell>,
    pub magnification_tag: Option<String>,
}

impl AnnotatedImage {
    /// Coordinates must be finite and inside `[0, width) x [0, height)`,
    /// classes below `num_classes`.
    pub fn validate(&self, num_classes: usize, source: &Path) -> Result<()> {
        for (i, c) in self.cells.iter().enumerate() {
            let inside = c.x.is_finite()
                && c.y.is_finite()
                && c.x >= 0.0
                && c.y >= 0.0
                && c.x < self.width as f64
                && c.y < self.height as f64;
            if !inside {
                return Err(Error::format(
                    source,
                    format!(
                        "cell {i} at ({}, {}) lies outside the {}x{} image",
                        c.x, c.y, self.width, self.height
                    ),
                ));
            }
            if c.class >= num_classes {
                return Err(Error::format(
                    source,
                    format!("cell {i} has class {} but only {num_classes} classes exist", c.class),
                ));
            }
        }
        Ok(())
    }
}

/// Parses and validates one annotation file.
pub fn read_annotation(path: &Path, image_path: PathBuf, num_classes: usize) -> Result<AnnotatedImage> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: AnnotationFile =
        serde_json::from_str(&text).map_err(|e| Error::format(path, format!("malformed annotation JSON: {e}")))?;
    let img = AnnotatedImage {
        image_path,
        width: file.width,
        height: file.height,
        cells: file.cells,
        magnification_tag: file.magnification,
    };
    img.validate(num_classes, path)?;
    Ok(img)
}

/// Writes the annotation JSON for `img` (the image path is not stored).
pub fn write_annotation(path: &Path, img: &AnnotatedImage) -> Result<()> {
    let file = AnnotationFile {
        width: img.width,
        height: img.height,
        cells: img.cells.clone(),
        magnification: img.magnification_tag.clone(),
    };
    let text = serde_json::to_string_pretty(&file).expect("annotation serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Loads the flat `images/` + `annotations/` layout, ordered by file name.
pub fn load_dataset(root: &Path, num_classes: usize) -> Result<Vec<AnnotatedImage>> {
    let ann_dir = root.join("annotations");
    let img_dir = root.join("images");
    let mut out = Vec::new();
    for path in sorted_entries(&ann_dir)? {
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let image_path = ["png", "jpg", "jpeg", "tif", "tiff"]
            .iter()
            .map(|ext| img_dir.join(format!("{stem}.{ext}")))
            .find(|p| p.exists())
            .ok_or_else(|| Error::format(&path, format!("no image named `{stem}` in {}", img_dir.display())))?;
        out.push(read_annotation(&path, image_path, num_classes)?);
    }
    Ok(out)
}

/// One multi-view sample directory on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct MFoVRecord {
    pub name: String,
    /// `fov_1 ... fov_K`, innermost last.
    pub views: Vec<PathBuf>,
    pub annotation: AnnotatedImage,
}

/// Loads every `sample_*` directory under `root`, ordered by name.
pub fn load_mfov_dataset(root: &Path, num_classes: usize) -> Result<Vec<MFoVRecord>> {
    let mut out = Vec::new();
    for dir in sorted_entries(root)? {
        let name = match dir.file_name().and_then(|n| n.to_str()) {
            Some(n) if dir.is_dir() && n.starts_with("sample_") => n.to_string(),
            _ => continue,
        };
        let mut views = Vec::new();
        while dir.join(format!("fov_{}.png", views.len() + 1)).exists() {
            views.push(dir.join(format!("fov_{}.png", views.len() + 1)));
        }
        if views.is_empty() {
            return Err(Error::format(&dir, "sample directory has no fov_1.png"));
        }
        let k = views.len();
        let ann = dir.join(format!("fov_{k}.json"));
        let annotation = read_annotation(&ann, views[k - 1].clone(), num_classes)?;
        out.push(MFoVRecord {
            name,
            views,
            annotation,
        });
    }
    Ok(out)
}

/// A training/evaluation sample held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    /// Normalized `(3, H, W)` views, innermost last.
    pub views: Vec<Tensor>,
    pub cells: Vec<Cell>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.views[0].shape()[1]
    }

    pub fn width(&self) -> usize {
        self.views[0].shape()[2]
    }

    /// Keeps the innermost `k` views.
    pub fn innermost(&self, k: usize) -> Result<Sample> {
        if k == 0 || k > self.views.len() {
            return Err(Error::invalid(format!(
                "sample `{}` has {} view(s), {k} requested",
                self.name,
                self.views.len()
            )));
        }
        Ok(Sample {
            name: self.name.clone(),
            views: self.views[self.views.len() - k..].to_vec(),
            cells: self.cells.clone(),
        })
    }
}

/// Maps 8-bit RGB to `(3, H, W)` in `[-1, 1]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Zero-pads bottom/right so both sides are multiples of `div`.
pub fn pad_to_multiple(t: &Tensor, div: usize) -> Tensor {
    let (c, h, w) = t.dims3();
    let (ph, pw) = (h.div_ceil(div) * div, w.div_ceil(div) * div);
    if (ph, pw) == (h, w) {
        return t.clone();
    }
    let mut out = vec![0.0; c * ph * pw];
    for k in 0..c {
        for y in 0..h {
            out[(k * ph + y) * pw..(k * ph + y) * pw + w]
                .copy_from_slice(&t.data()[(k * h + y) * w..(k * h + y + 1) * w]);
        }
    }
    Tensor::from_vec(&[c, ph, pw], out)
}

/// Loads either layout into memory, keeping the innermost `views` views and
/// padding to `divisor`. Multi-view samples must already be divisible, since
/// padding would break their concentric alignment.
pub fn load_samples(root: &Path, num_classes: usize, views: usize, divisor: usize) -> Result<Vec<Sample>> {
    if root.join("annotations").is_dir() {
        if views != 1 {
            return Err(Error::invalid(format!(
                "{} uses the single-image layout but {views} fields of view were requested",
                root.display()
            )));
        }
        return load_dataset(root, num_classes)?
            .into_iter()
            .map(|a| {
                let img = read_image(&a.image_path)?;
                check_dims(&img, &a)?;
                let name = a
                    .image_path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default()
                    .to_string();
                Ok(Sample {
                    name,
                    views: vec![pad_to_multiple(&image_to_tensor(&img), divisor)],
                    cells: a.cells,
                })
            })
            .collect();
    }
    let records = load_mfov_dataset(root, num_classes)?;
    if records.is_empty() {
        return Err(Error::invalid(format!("no samples found under {}", root.display())));
    }
    records
        .into_iter()
        .map(|r| {
            if r.views.len() < views {
                return Err(Error::invalid(format!(
                    "sample `{}` has {} view(s), {views} requested",
                    r.name,
                    r.views.len()
                )));
            }
            let mut tensors = Vec::with_capacity(views);
            for p in &r.views[r.views.len() - views..] {
                let img = read_image(p)?;
                check_dims(&img, &r.annotation)?;
                let t = image_to_tensor(&img);
                if views > 1 && (!(img.width() as usize).is_multiple_of(divisor) || !(img.height() as usize).is_multiple_of(divisor)) {
                    return Err(Error::invalid(format!(
                        "multi-view sample `{}` is {}x{}; sides must be divisible by {divisor}",
                        r.name,
                        img.width(),
                        img.height()
                    )));
                }
                tensors.push(pad_to_multiple(&t, divisor));
            }
            Ok(Sample {
                name: r.name,
                views: tensors,
                cells: r.annotation.cells,
            })
        })
        .collect()
}

/// Sample names and cells of either layout, without reading any pixels.
/// Names are image file stems (flat layout) or sample directory names.
pub fn load_annotations(root: &Path, num_classes: usize) -> Result<Vec<(String, Vec<Cell>)>> {
    let ann_dir = root.join("annotations");
    if ann_dir.is_dir() {
        let mut out = Vec::new();
        for path in sorted_entries(&ann_dir)? {
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.push((stem, read_annotation(&path, PathBuf::new(), num_classes)?.cells));
        }
        return Ok(out);
    }
    Ok(load_mfov_dataset(root, num_classes)?
        .into_iter()
        .map(|r| (r.name, r.annotation.cells))
        .collect())
}

fn check_dims(img: &RgbImage, a: &AnnotatedImage) -> Result<()> {
    if img.width() != a.width || img.height() != a.height {
        return Err(Error::format(
            &a.image_path,
            format!(
                "image is {}x{} but its annotation says {}x{}",
                img.width(),
                img.height(),
                a.width,
                a.height
            ),
        ));
    }
    Ok(())
}
