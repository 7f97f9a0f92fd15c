//! On-disk dataset layout:
//!
//! ```text
//! root/
//!   manifest.json
//!   images/*.png     8-bit RGB
//!   depths/*.png     16-bit grayscale, depth_m = value * depth_scale
//!   semantic/*.png   8-bit labels 0..=4
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::preprocess::{make_mask, preprocess, DatasetProfile, RawImage};
use super::synth::RenderedScene;
use super::{DatasetSplit, DepthMap, LabeledSample, SemanticLabel, SemanticMap, UnlabeledSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledEntry {
    pub image: String,
    pub depth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledEntry {
    pub image: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub labeled: Vec<LabeledEntry>,
    #[serde(default)]
    pub unlabeled: Vec<UnlabeledEntry>,
    pub depth_scale: f64,
    pub profile: String,
    #[serde(default)]
    pub seed: u64,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn existing(root: &Path, rel: &str) -> Result<PathBuf> {
    let p = root.join(rel);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::MissingFile(p))
    }
}

fn read_rgb(path: &Path) -> Result<RawImage> {
    let im = image::open(path)?.to_rgb8();
    RawImage::from_rgb8(im.height() as usize, im.width() as usize, im.as_raw())
}

fn read_depth(path: &Path, scale: f64) -> Result<DepthMap> {
    let im = match image::open(path)? {
        image::DynamicImage::ImageLuma16(im) => im,
        other => {
            return Err(Error::Data(format!(
                "{} is {:?}, expected 16-bit grayscale depth",
                path.display(),
                other.color()
            )))
        }
    };
    let values = im.as_raw().iter().map(|&v| v as f64 * scale).collect();
    DepthMap::new(im.height() as usize, im.width() as usize, values)
}

fn read_semantic(path: &Path) -> Result<SemanticMap> {
    let im = match image::open(path)? {
        image::DynamicImage::ImageLuma8(im) => im,
        _ => return Err(Error::Data(format!("{} must be 8-bit labels", path.display()))),
    };
    let labels = im
        .as_raw()
        .iter()
        .map(|&v| {
            SemanticLabel::from_code(v)
                .ok_or_else(|| Error::Data(format!("label {v} out of range in {}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    SemanticMap::new(im.height() as usize, im.width() as usize, labels)
}

/// Loads and preprocesses every manifest entry, preserving manifest order.
///
/// `manifest` defaults to `root/manifest.json`.
pub fn load_dataset(root: &Path, manifest: Option<&Path>) -> Result<DatasetSplit> {
    let (labeled, unlabeled, seed) = load_entries(root, manifest, true)?;
    DatasetSplit::new(labeled, unlabeled, seed)
}

/// Labeled and unlabeled samples of a dataset that may have no labels,
/// such as a pool of target-domain images.
pub fn load_samples(root: &Path, manifest: Option<&Path>) -> Result<(Vec<LabeledSample>, Vec<UnlabeledSample>)> {
    let (l, u, _) = load_entries(root, manifest, false)?;
    Ok((l, u))
}

fn load_entries(
    root: &Path,
    manifest: Option<&Path>,
    need_labels: bool,
) -> Result<(Vec<LabeledSample>, Vec<UnlabeledSample>, u64)> {
    let manifest_path = manifest
        .map(Path::to_path_buf)
        .unwrap_or_else(|| root.join("manifest.json"));
    let m = Manifest::read(&manifest_path)?;
    if need_labels && m.labeled.is_empty() {
        return Err(Error::Data(format!(
            "{} lists no labeled samples",
            manifest_path.display()
        )));
    }
    if !(m.depth_scale > 0.0) {
        return Err(Error::Data("depth_scale must be positive".into()));
    }
    let profile = DatasetProfile::parse(&m.profile)?;
    let pre = profile.preprocess();

    let labeled = m
        .labeled
        .par_iter()
        .map(|e| {
            let raw = read_rgb(&existing(root, &e.image)?)?;
            let depth = read_depth(&existing(root, &e.depth)?, m.depth_scale)?;
            let semantic = e
                .semantic
                .as_ref()
                .map(|s| existing(root, s).and_then(|p| read_semantic(&p)))
                .transpose()?;
            let out = preprocess(&raw, Some(&depth), semantic.as_ref(), &pre)?;
            let depth = out.depth.expect("depth requested");
            let mask = make_mask(&depth, profile.mask_bounds())?;
            LabeledSample::new(out.image, depth, mask, out.semantic)
        })
        .collect::<Result<Vec<_>>>()?;
    let unlabeled = m
        .unlabeled
        .par_iter()
        .map(|e| {
            let raw = read_rgb(&existing(root, &e.image)?)?;
            Ok(UnlabeledSample {
                image: preprocess(&raw, None, None, &pre)?.image,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((labeled, unlabeled, m.seed))
}

fn write_rgb(path: &Path, raw: &RawImage) -> Result<()> {
    let im = RgbImage::from_raw(raw.width as u32, raw.height as u32, raw.to_rgb8())
        .ok_or_else(|| Error::Shape("rgb buffer".into()))?;
    im.save(path)?;
    Ok(())
}

fn write_depth(path: &Path, depth: &DepthMap, scale: f64) -> Result<()> {
    let mut stored = Vec::with_capacity(depth.values().len());
    for &d in depth.values() {
        let q = (d / scale).round();
        if !(0.0..=u16::MAX as f64).contains(&q) {
            return Err(Error::Data(format!(
                "depth {d} m does not fit 16 bits at scale {scale}"
            )));
        }
        stored.push(q as u16);
    }
    let im: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width() as u32, depth.height() as u32, stored)
            .ok_or_else(|| Error::Shape("depth buffer".into()))?;
    im.save(path)?;
    Ok(())
}

fn write_semantic(path: &Path, sem: &SemanticMap) -> Result<()> {
    let codes = sem.values().iter().map(|l| l.code()).collect();
    let im = GrayImage::from_raw(sem.width() as u32, sem.height() as u32, codes)
        .ok_or_else(|| Error::Shape("semantic buffer".into()))?;
    im.save(path)?;
    Ok(())
}

/// Writes rendered scenes (labeled) and raw images (unlabeled) in the
/// dataset layout and returns the manifest that was written.
pub fn write_dataset(
    root: &Path,
    labeled: &[RenderedScene],
    unlabeled: &[RawImage],
    depth_scale: f64,
    profile: DatasetProfile,
    seed: u64,
) -> Result<Manifest> {
    for sub in ["images", "depths", "semantic"] {
        fs::create_dir_all(root.join(sub))?;
    }
    let mut manifest = Manifest {
        labeled: Vec::with_capacity(labeled.len()),
        unlabeled: Vec::with_capacity(unlabeled.len()),
        depth_scale,
        profile: profile.name().to_string(),
        seed,
    };
    for (i, scene) in labeled.iter().enumerate() {
        let entry = LabeledEntry {
            image: format!("images/l{i:05}.png"),
            depth: format!("depths/l{i:05}.png"),
            semantic: Some(format!("semantic/l{i:05}.png")),
        };
        write_rgb(&root.join(&entry.image), &scene.rgb)?;
        write_depth(&root.join(&entry.depth), &scene.depth, depth_scale)?;
        write_semantic(&root.join(entry.semantic.as_ref().unwrap()), &scene.semantic)?;
        manifest.labeled.push(entry);
    }
    for (i, raw) in unlabeled.iter().enumerate() {
        let entry = UnlabeledEntry {
            image: format!("images/u{i:05}.png"),
        };
        write_rgb(&root.join(&entry.image), raw)?;
        manifest.unlabeled.push(entry);
    }
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
