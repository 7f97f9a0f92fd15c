//! Depth visualization.
//!
//! Each map is normalized by its own minimum and maximum over valid pixels,
//! then mapped through a fixed five-stop ramp (near = dark purple, far =
//! yellow). Invalid pixels are drawn black.

use std::path::Path;

use image::RgbImage;

use crate::error::Result;

const STOPS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

/// Color of a normalized value `t` in [0, 1].
pub fn ramp(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (STOPS[i][c] + f * (STOPS[i + 1][c] - STOPS[i][c])).round() as u8;
    }
    out
}

/// RGB bytes for a depth map; `valid = None` treats every pixel as valid.
pub fn colorize(depth: &[f64], valid: Option<&[bool]>) -> Vec<u8> {
    let ok = |i: usize| valid.is_none_or(|v| v[i]) && depth[i].is_finite();
    let (lo, hi) = (0..depth.len())
        .filter(|&i| ok(i))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), i| (a.min(depth[i]), b.max(depth[i])));
    let span = if hi > lo { hi - lo } else { 1.0 };
    (0..depth.len())
        .flat_map(|i| if ok(i) { ramp((depth[i] - lo) / span) } else { [0, 0, 0] })
        .collect()
}

pub fn write_depth_png(path: &Path, height: usize, width: usize, depth: &[f64], valid: Option<&[bool]>) -> Result<()> {
    let im = RgbImage::from_raw(width as u32, height as u32, colorize(depth, valid))
        .ok_or_else(|| crate::error::Error::Shape("depth buffer does not match its size".into()))?;
    im.save(path)?;
    Ok(())
}
