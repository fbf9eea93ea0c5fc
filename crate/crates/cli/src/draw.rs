//! Marker overlays.

use celldet_core::Point;
use image::{Rgb, RgbImage};

const PALETTE: [[u8; 3]; 6] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

pub const NEUTRAL: [u8; 3] = [255, 255, 255];

pub fn class_color(class: usize) -> [u8; 3] {
    PALETTE[class % PALETTE.len()]
}

/// A filled disc with a one-pixel black ring, clipped to the image.
pub fn marker(img: &mut RgbImage, p: Point, radius: i64, color: [u8; 3]) {
    let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
    let outer = radius + 1;
    for dy in -outer..=outer {
        for dx in -outer..=outer {
            let d2 = dx * dx + dy * dy;
            if d2 > outer * outer {
                continue;
            }
            let (x, y) = (cx + dx, cy + dy);
            if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 {
                continue;
            }
            let c = if d2 <= radius * radius { color } else { [0, 0, 0] };
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
}

/// Two images next to each other.
pub fn side_by_side(a: &RgbImage, b: &RgbImage) -> RgbImage {
    let mut out = RgbImage::new(a.width() + b.width(), a.height().max(b.height()));
    image::imageops::replace(&mut out, a, 0, 0);
    image::imageops::replace(&mut out, b, a.width() as i64, 0);
    out
}
