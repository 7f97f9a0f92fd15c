//! Resizing, cropping, normalization and depth-range masking.

use serde::{Deserialize, Serialize};

use super::{DepthMap, Image, SemanticMap, ValidityMask};
use crate::error::{Error, Result};

/// Per-channel mean and standard deviation on the unit scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub const IMAGENET: NormStats = NormStats {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };
}

/// An RGB image on the 0–255 scale before any geometry is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    /// Planar CHW.
    pub planes: Vec<f64>,
}

impl RawImage {
    /// From interleaved 8-bit RGB (HWC).
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::Shape("rgb buffer size".into()));
        }
        let plane = height * width;
        let mut planes = vec![0.0; 3 * plane];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                planes[c * plane + i] = px[c] as f64;
            }
        }
        Ok(Self {
            height,
            width,
            planes,
        })
    }

    pub fn from_planes(height: usize, width: usize, planes: Vec<f64>) -> Result<Self> {
        if planes.len() != 3 * height * width {
            return Err(Error::Shape("raw image plane size".into()));
        }
        Ok(Self {
            height,
            width,
            planes,
        })
    }

    /// Interleaved 8-bit RGB, rounding and saturating.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push(self.planes[c * plane + i].round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }
}

/// Geometry and normalization applied to every sample of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessProfile {
    /// Target `(width, height)` of a bilinear resize applied first.
    pub resize: Option<(usize, usize)>,
    /// Target `(width, height)` of a center crop applied after the resize.
    pub center_crop: Option<(usize, usize)>,
    pub normalize: Option<NormStats>,
}

impl PreprocessProfile {
    pub fn identity() -> Self {
        Self {
            resize: None,
            center_crop: None,
            normalize: Some(NormStats::IMAGENET),
        }
    }
}

/// Named dataset conventions: preprocessing geometry plus depth-range mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetProfile {
    Nyu,
    Make3d,
    Kitti,
    Synthetic,
}

impl DatasetProfile {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nyu" => Ok(Self::Nyu),
            "make3d" => Ok(Self::Make3d),
            "kitti" => Ok(Self::Kitti),
            "synthetic" | "identity" => Ok(Self::Synthetic),
            other => Err(Error::Config(format!("unknown dataset profile '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Nyu => "nyu",
            Self::Make3d => "make3d",
            Self::Kitti => "kitti",
            Self::Synthetic => "synthetic",
        }
    }

    pub fn preprocess(self) -> PreprocessProfile {
        match self {
            Self::Nyu => PreprocessProfile {
                resize: Some((320, 240)),
                center_crop: Some((304, 228)),
                normalize: Some(NormStats::IMAGENET),
            },
            Self::Make3d => PreprocessProfile {
                resize: Some((320, 240)),
                center_crop: None,
                normalize: Some(NormStats::IMAGENET),
            },
            Self::Kitti | Self::Synthetic => PreprocessProfile::identity(),
        }
    }

    pub fn mask_bounds(self) -> MaskBounds {
        match self {
            Self::Nyu => MaskBounds::inclusive_above(0.0, 10.0),
            Self::Make3d => MaskBounds::inclusive_above(0.0, 70.0),
            Self::Kitti => MaskBounds::strict(0.0, 80.0),
            Self::Synthetic => MaskBounds::strict(0.0, f64::INFINITY),
        }
    }
}

/// Valid depth interval; the lower bound is always exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskBounds {
    pub min_m: f64,
    pub max_m: f64,
    pub upper_inclusive: bool,
}

impl MaskBounds {
    /// `min < d < max`.
    pub fn strict(min_m: f64, max_m: f64) -> Self {
        Self {
            min_m,
            max_m,
            upper_inclusive: false,
        }
    }

    /// `min < d <= max`.
    pub fn inclusive_above(min_m: f64, max_m: f64) -> Self {
        Self {
            min_m,
            max_m,
            upper_inclusive: true,
        }
    }

    pub fn contains(&self, d: f64) -> bool {
        d > self.min_m && if self.upper_inclusive { d <= self.max_m } else { d < self.max_m }
    }
}

pub fn make_mask(depth: &DepthMap, bounds: MaskBounds) -> Result<ValidityMask> {
    if bounds.min_m.is_nan() || bounds.max_m.is_nan() || bounds.min_m >= bounds.max_m {
        return Err(Error::Config(format!(
            "mask bounds must satisfy min < max, got ({}, {})",
            bounds.min_m, bounds.max_m
        )));
    }
    let mask: Vec<bool> = depth.values().iter().map(|&d| bounds.contains(d)).collect();
    if !mask.iter().any(|&m| m) {
        log::warn!(
            "depth map {}x{} has no pixels inside ({}, {})",
            depth.height(),
            depth.width(),
            bounds.min_m,
            bounds.max_m
        );
    }
    ValidityMask::new(depth.height(), depth.width(), mask)
}

/// Bilinear resize of one plane with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let axis = |o: usize, scale: f64, len: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, sx, w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, sy, h);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Nearest-neighbour resize with the same pixel-center convention.
pub fn resize_nearest<T: Copy>(src: &[T], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let pick = |o: usize, len: usize, out: usize| {
        (((o as f64 + 0.5) * len as f64 / out as f64).floor() as usize).min(len - 1)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = pick(y, h, out_h);
        for x in 0..out_w {
            out.push(src[sy * w + pick(x, w, out_w)]);
        }
    }
    out
}

/// Center crop of one plane to `out_h×out_w`.
pub fn center_crop<T: Copy>(src: &[T], h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Vec<T>> {
    if out_h > h || out_w > w {
        return Err(Error::Shape(format!(
            "crop {out_w}x{out_h} is larger than input {w}x{h}"
        )));
    }
    let (top, left) = ((h - out_h) / 2, (w - out_w) / 2);
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in top..top + out_h {
        out.extend_from_slice(&src[y * w + left..y * w + left + out_w]);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub image: Image,
    pub depth: Option<DepthMap>,
    pub semantic: Option<SemanticMap>,
}

/// Applies a profile to an image and its optional depth and label maps.
///
/// Depth and labels follow the image geometry exactly: a resize maps every
/// map onto the same target grid, so maps of a different native size are
/// accepted only when the profile starts with a resize.
pub fn preprocess(
    raw: &RawImage,
    raw_depth: Option<&DepthMap>,
    raw_semantic: Option<&SemanticMap>,
    profile: &PreprocessProfile,
) -> Result<Preprocessed> {
    let (h0, w0) = (raw.height, raw.width);
    let plane0 = h0 * w0;
    if plane0 == 0 || raw.planes.len() != 3 * plane0 {
        return Err(Error::Shape("empty or malformed raw image".into()));
    }
    if profile.resize.is_none() {
        if let Some(d) = raw_depth {
            if (d.height(), d.width()) != (h0, w0) {
                return Err(Error::Shape(format!(
                    "depth {}x{} does not match image {}x{}",
                    d.width(),
                    d.height(),
                    w0,
                    h0
                )));
            }
        }
        if let Some(s) = raw_semantic {
            if (s.height(), s.width()) != (h0, w0) {
                return Err(Error::Shape("semantic map does not match image".into()));
            }
        }
    }

    let (mut h, mut w) = (h0, w0);
    let mut planes: Vec<Vec<f64>> = raw.planes.chunks(plane0).map(<[f64]>::to_vec).collect();
    let mut depth = raw_depth.map(|d| (d.values().to_vec(), d.height(), d.width()));
    let mut labels = raw_semantic.map(|s| (s.values().to_vec(), s.height(), s.width()));

    if let Some((tw, th)) = profile.resize {
        for p in &mut planes {
            *p = resize_bilinear(p, h, w, th, tw);
        }
        if let Some((d, dh, dw)) = &mut depth {
            *d = resize_bilinear(d, *dh, *dw, th, tw);
            (*dh, *dw) = (th, tw);
        }
        if let Some((l, lh, lw)) = &mut labels {
            *l = resize_nearest(l, *lh, *lw, th, tw);
            (*lh, *lw) = (th, tw);
        }
        (h, w) = (th, tw);
    }
    if let Some((cw, ch)) = profile.center_crop {
        for p in &mut planes {
            *p = center_crop(p, h, w, ch, cw)?;
        }
        if let Some((d, _, _)) = &mut depth {
            *d = center_crop(d, h, w, ch, cw)?;
        }
        if let Some((l, _, _)) = &mut labels {
            *l = center_crop(l, h, w, ch, cw)?;
        }
        (h, w) = (ch, cw);
    }

    let mut image = Image::from_planes(h, w, planes.concat())?;
    if let Some(stats) = &profile.normalize {
        image.normalize(stats)?;
    }
    let depth = match depth {
        Some((d, _, _)) => {
            let hint = raw_depth.map(DepthMap::range_hint).unwrap();
            Some(DepthMap::new(h, w, d)?.with_range_hint(hint.0, hint.1))
        }
        None => None,
    };
    let semantic = labels.map(|(l, _, _)| SemanticMap::new(h, w, l)).transpose()?;
    Ok(Preprocessed {
        image,
        depth,
        semantic,
    })
}
