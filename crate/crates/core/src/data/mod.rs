//! Images, depth maps, masks and the labeled/unlabeled training split.

mod batch;
mod dataset;
mod preprocess;
mod synth;

pub use batch::{Batch, BatchIterator, BatchKind, BatchMode};
pub use dataset::{load_dataset, load_samples, write_dataset, LabeledEntry, Manifest, UnlabeledEntry};
pub use preprocess::{
    center_crop, make_mask, preprocess, resize_bilinear, resize_nearest, DatasetProfile,
    MaskBounds, NormStats, Preprocessed, PreprocessProfile, RawImage,
};
pub use synth::{render_scene, synth_scene, synth_scene_with, RenderedScene, SceneConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An RGB image stored as three planes (CHW).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    normalized: bool,
    source_bit_depth: u8,
}

impl Image {
    /// Wraps planar CHW values on the 0–255 scale, not yet normalized.
    pub fn from_planes(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            normalized: false,
            source_bit_depth: 8,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn source_bit_depth(&self) -> u8 {
        self.source_bit_depth
    }

    /// The `h`×`w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        check_window(self.height, self.width, top, left, h, w)?;
        let plane = self.height * self.width;
        let pixels = (0..3)
            .flat_map(|c| crop_plane(&self.pixels[c * plane..(c + 1) * plane], self.width, top, left, h, w))
            .collect();
        Ok(Self {
            height: h,
            width: w,
            pixels,
            ..self.clone()
        })
    }

    /// Per-channel `(x/255 - mean)/std`. Refuses to run twice.
    pub fn normalize(&mut self, stats: &NormStats) -> Result<()> {
        if self.normalized {
            return Err(Error::AlreadyNormalized);
        }
        let scale = ((1u32 << self.source_bit_depth) - 1) as f64;
        let plane = self.height * self.width;
        for c in 0..3 {
            let (m, s) = (stats.mean[c], stats.std[c]);
            for v in &mut self.pixels[c * plane..(c + 1) * plane] {
                *v = (*v / scale - m) / s;
            }
        }
        self.normalized = true;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    depth: Vec<f64>,
    range_hint: (f64, f64),
}

impl DepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != height * width {
            return Err(Error::Shape(format!(
                "depth map {height}x{width} needs {} values, got {}",
                height * width,
                depth.len()
            )));
        }
        let range_hint = depth.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| {
            (lo.min(d), hi.max(d))
        });
        Ok(Self {
            height,
            width,
            depth,
            range_hint,
        })
    }

    pub fn with_range_hint(mut self, min_m: f64, max_m: f64) -> Self {
        self.range_hint = (min_m, max_m);
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.depth
    }

    pub fn range_hint(&self) -> (f64, f64) {
        self.range_hint
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.depth[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    height: usize,
    width: usize,
    mask: Vec<bool>,
}

impl ValidityMask {
    pub fn new(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::Shape("mask size".into()));
        }
        Ok(Self {
            height,
            width,
            mask,
        })
    }

    pub fn all_valid(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            mask: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Intersection with another mask of the same shape.
    pub fn and(&self, other: &ValidityMask) -> Result<ValidityMask> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape("mask shapes differ".into()));
        }
        Ok(ValidityMask {
            height: self.height,
            width: self.width,
            mask: self.mask.iter().zip(&other.mask).map(|(a, b)| *a && *b).collect(),
        })
    }
}

/// Coarse semantic area of a pixel, stored on disk as 0–4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticLabel {
    Floor = 0,
    Structure = 1,
    Props = 2,
    Furniture = 3,
    Missing = 4,
}

impl SemanticLabel {
    pub const ALL: [SemanticLabel; 5] = [
        SemanticLabel::Floor,
        SemanticLabel::Structure,
        SemanticLabel::Props,
        SemanticLabel::Furniture,
        SemanticLabel::Missing,
    ];

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticLabel::Floor => "floor",
            SemanticLabel::Structure => "structure",
            SemanticLabel::Props => "props",
            SemanticLabel::Furniture => "furniture",
            SemanticLabel::Missing => "missing",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMap {
    height: usize,
    width: usize,
    labels: Vec<SemanticLabel>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, labels: Vec<SemanticLabel>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape("semantic map size".into()));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[SemanticLabel] {
        &self.labels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    pub depth: DepthMap,
    pub mask: ValidityMask,
    pub semantic: Option<SemanticMap>,
}

impl LabeledSample {
    pub fn new(
        image: Image,
        depth: DepthMap,
        mask: ValidityMask,
        semantic: Option<SemanticMap>,
    ) -> Result<Self> {
        let hw = (image.height(), image.width());
        let aligned = (depth.height(), depth.width()) == hw
            && (mask.height(), mask.width()) == hw
            && semantic
                .as_ref()
                .is_none_or(|s| (s.height(), s.width()) == hw);
        if !aligned {
            return Err(Error::Shape("labeled sample fields are not aligned".into()));
        }
        Ok(Self {
            image,
            depth,
            mask,
            semantic,
        })
    }
}

impl LabeledSample {
    /// Crops image, depth, mask and labels to the same window.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        check_window(self.depth.height, self.depth.width, top, left, h, w)?;
        let (lo, hi) = self.depth.range_hint;
        let depth = DepthMap::new(h, w, crop_plane(&self.depth.depth, self.depth.width, top, left, h, w))?.with_range_hint(lo, hi);
        let mask = ValidityMask::new(h, w, crop_plane(self.mask.values(), self.mask.width(), top, left, h, w))?;
        let semantic = self
            .semantic
            .as_ref()
            .map(|s| SemanticMap::new(h, w, crop_plane(s.values(), s.width(), top, left, h, w)))
            .transpose()?;
        Self::new(self.image.crop(top, left, h, w)?, depth, mask, semantic)
    }
}

fn check_window(height: usize, width: usize, top: usize, left: usize, h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || top + h > height || left + w > width {
        return Err(Error::Shape(format!(
            "crop {w}x{h} at ({left}, {top}) does not fit in {width}x{height}"
        )));
    }
    Ok(())
}

fn crop_plane<T: Copy>(src: &[T], width: usize, top: usize, left: usize, h: usize, w: usize) -> Vec<T> {
    (top..top + h)
        .flat_map(|y| src[y * width + left..y * width + left + w].iter().copied())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSample {
    pub image: Image,
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<UnlabeledSample>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn new(labeled: Vec<LabeledSample>, unlabeled: Vec<UnlabeledSample>, seed: u64) -> Result<Self> {
        if labeled.is_empty() {
            return Err(Error::Data("a split needs at least one labeled sample".into()));
        }
        let hw = (labeled[0].image.height(), labeled[0].image.width());
        let same = labeled
            .iter()
            .map(|s| &s.image)
            .chain(unlabeled.iter().map(|s| &s.image))
            .all(|im| (im.height(), im.width()) == hw);
        if !same {
            return Err(Error::Shape(
                "all samples in a split must share one working resolution".into(),
            ));
        }
        Ok(Self {
            labeled,
            unlabeled,
            seed,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        let im = &self.labeled[0].image;
        (im.height(), im.width())
    }
}

/// Stacks images into an `N×3×H×W` tensor.
pub fn image_batch<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut hw = None;
    for im in images {
        let cur = (im.height(), im.width());
        if *hw.get_or_insert(cur) != cur {
            return Err(Error::Shape("image batch with mixed sizes".into()));
        }
        data.extend_from_slice(im.pixels());
        n += 1;
    }
    let (h, w) = hw.ok_or(Error::EmptyBatch)?;
    Tensor::new(vec![n, 3, h, w], data)
}

/// Stacks depth maps into an `N×1×H×W` tensor.
pub fn depth_batch<'a>(maps: impl IntoIterator<Item = &'a DepthMap>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut hw = None;
    for d in maps {
        let cur = (d.height(), d.width());
        if *hw.get_or_insert(cur) != cur {
            return Err(Error::Shape("depth batch with mixed sizes".into()));
        }
        data.extend_from_slice(d.values());
        n += 1;
    }
    let (h, w) = hw.ok_or(Error::EmptyBatch)?;
    Tensor::new(vec![n, 1, h, w], data)
}

/// Stacks masks into an `N×1×H×W` tensor of 0/1.
pub fn mask_batch<'a>(masks: impl IntoIterator<Item = &'a ValidityMask>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut hw = None;
    for m in masks {
        let cur = (m.height(), m.width());
        if *hw.get_or_insert(cur) != cur {
            return Err(Error::Shape("mask batch with mixed sizes".into()));
        }
        data.extend(m.values().iter().map(|&v| if v { 1.0 } else { 0.0 }));
        n += 1;
    }
    let (h, w) = hw.ok_or(Error::EmptyBatch)?;
    Tensor::new(vec![n, 1, h, w], data)
}

/// Splits an `N×1×H×W` tensor back into depth maps.
pub fn depth_maps_from(t: &Tensor) -> Result<Vec<DepthMap>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::Shape("depth tensor must have one channel".into()));
    }
    (0..n).map(|i| DepthMap::new(h, w, t.sample(i).to_vec())).collect()
}
