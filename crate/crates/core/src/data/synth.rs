//! Procedural pinhole renderer: a floor plane, a back wall and a handful of
//! axis-aligned boxes, with exact per-pixel depth and semantic labels.
//!
//! Camera frame: x right, y up, z forward; the camera sits at the origin and
//! depth is measured along the optical axis (z).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::preprocess::{make_mask, preprocess, DatasetProfile, RawImage};
use super::{DepthMap, LabeledSample, SemanticLabel, SemanticMap};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Inclusive range of box counts.
    pub boxes: (usize, usize),
    pub near_m: f64,
    pub far_m: f64,
    pub camera_height_m: (f64, f64),
    pub wall_distance_m: (f64, f64),
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    /// Box edge lengths `(width, height, depth)` lower and upper bounds.
    pub box_size_min_m: (f64, f64, f64),
    pub box_size_max_m: (f64, f64, f64),
    /// Direction towards the light, not necessarily normalized.
    pub light_dir: (f64, f64, f64),
    pub ambient: f64,
    /// Per-channel multiplier applied to every albedo.
    pub tint: (f64, f64, f64),
    /// Side length of floor checker tiles in meters; 0 disables the pattern.
    pub checker_m: f64,
    /// Extinction per meter towards the haze color.
    pub haze_per_m: f64,
    pub noise_std: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::indoor()
    }
}

impl SceneConfig {
    pub fn indoor() -> Self {
        Self {
            boxes: (1, 6),
            near_m: 0.5,
            far_m: 10.0,
            camera_height_m: (1.2, 1.8),
            wall_distance_m: (6.0, 9.5),
            fov_deg: 60.0,
            box_size_min_m: (0.4, 0.3, 0.4),
            box_size_max_m: (1.5, 1.6, 1.5),
            light_dir: (-0.4, 0.8, -0.5),
            ambient: 0.3,
            tint: (1.0, 1.0, 1.0),
            checker_m: 0.5,
            haze_per_m: 0.04,
            noise_std: 2.0,
        }
    }

    /// Wide outdoor layout: long road, distant backdrop, car-sized boxes.
    pub fn road() -> Self {
        Self {
            boxes: (2, 6),
            near_m: 1.0,
            far_m: 80.0,
            camera_height_m: (1.5, 1.8),
            wall_distance_m: (45.0, 75.0),
            fov_deg: 80.0,
            box_size_min_m: (1.6, 1.3, 3.5),
            box_size_max_m: (2.0, 1.8, 4.8),
            light_dir: (0.3, 0.9, -0.2),
            ambient: 0.4,
            tint: (1.0, 1.0, 1.05),
            checker_m: 3.0,
            haze_per_m: 0.01,
            noise_std: 2.0,
        }
    }

    /// Indoor geometry under different lighting and colors.
    pub fn shifted() -> Self {
        Self {
            light_dir: (0.7, 0.5, -0.3),
            ambient: 0.45,
            tint: (1.15, 0.85, 0.7),
            checker_m: 0.8,
            haze_per_m: 0.07,
            ..Self::indoor()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "indoor" => Ok(Self::indoor()),
            "road" => Ok(Self::road()),
            "shifted" => Ok(Self::shifted()),
            other => Err(Error::Config(format!("unknown scene preset '{other}'"))),
        }
    }
}

/// Camera and room parameters drawn for one scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneCamera {
    pub height_m: f64,
    pub wall_z_m: f64,
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
}

impl SceneCamera {
    /// Ray direction through the center of pixel `(row, col)`, unit z.
    pub fn ray(&self, row: usize, col: usize) -> [f64; 3] {
        [
            (col as f64 + 0.5 - self.cx) / self.focal_px,
            -(row as f64 + 0.5 - self.cy) / self.focal_px,
            1.0,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub albedo: [f64; 3],
    pub label: SemanticLabel,
}

impl SceneBox {
    /// Entry distance along `dir` and the hit axis, if the ray enters the box.
    fn intersect(&self, dir: [f64; 3]) -> Option<(f64, usize)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut axis = 0;
        for a in 0..3 {
            if dir[a] == 0.0 {
                if 0.0 < self.min[a] || 0.0 > self.max[a] {
                    return None;
                }
                continue;
            }
            let (t1, t2) = (self.min[a] / dir[a], self.max[a] / dir[a]);
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            if lo > t_near {
                t_near = lo;
                axis = a;
            }
            t_far = t_far.min(hi);
        }
        (t_near <= t_far && t_near > 0.0).then_some((t_near, axis))
    }
}

#[derive(Clone, Debug)]
pub struct RenderedScene {
    pub rgb: RawImage,
    pub depth: DepthMap,
    pub semantic: SemanticMap,
    pub camera: SceneCamera,
    pub boxes: Vec<SceneBox>,
}

fn unit(v: (f64, f64, f64)) -> [f64; 3] {
    let n = (v.0 * v.0 + v.1 * v.1 + v.2 * v.2).sqrt();
    [v.0 / n, v.1 / n, v.2 / n]
}

fn draw(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Renders a scene at `size = (height, width)`, deterministic in `seed`.
pub fn render_scene(seed: u64, size: (usize, usize), config: &SceneConfig) -> Result<RenderedScene> {
    let (h, w) = size;
    if h < 64 || w < 64 {
        return Err(Error::Config(format!(
            "synthetic scenes need at least 64x64 pixels, got {w}x{h}"
        )));
    }
    if config.boxes.0 > config.boxes.1 || !(config.near_m > 0.0 && config.near_m < config.far_m) {
        return Err(Error::Config("invalid scene configuration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_fov = config.fov_deg.to_radians() / 2.0;
    let camera = SceneCamera {
        height_m: draw(&mut rng, config.camera_height_m),
        wall_z_m: draw(&mut rng, config.wall_distance_m).min(config.far_m),
        focal_px: (w as f64 / 2.0) / half_fov.tan(),
        cx: w as f64 / 2.0,
        cy: h as f64 / 2.0,
    };
    let tint = [config.tint.0, config.tint.1, config.tint.2];
    let color = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> [f64; 3] {
        let mut c = [0.0; 3];
        for (i, v) in c.iter_mut().enumerate() {
            *v = (rng.random_range(lo..hi) * tint[i]).min(1.0);
        }
        c
    };
    let floor_albedo = color(&mut rng, 0.35, 0.75);
    let wall_albedo = color(&mut rng, 0.4, 0.9);

    let n_boxes = rng.random_range(config.boxes.0..=config.boxes.1);
    let mut boxes = Vec::with_capacity(n_boxes);
    let z_lo = (camera.wall_z_m * 0.25).max(config.near_m + 1.0);
    for i in 0..n_boxes {
        let sx = draw(&mut rng, (config.box_size_min_m.0, config.box_size_max_m.0));
        let sy = draw(&mut rng, (config.box_size_min_m.1, config.box_size_max_m.1));
        let sz = draw(&mut rng, (config.box_size_min_m.2, config.box_size_max_m.2));
        let z_hi = (camera.wall_z_m - sz - 0.05).max(z_lo + 0.01);
        let z0 = rng.random_range(z_lo..z_hi);
        let lateral = z0 * half_fov.tan() * 0.8;
        let xc = rng.random_range(-lateral..lateral);
        let label = if i % 2 == 0 {
            SemanticLabel::Furniture
        } else {
            SemanticLabel::Props
        };
        boxes.push(SceneBox {
            min: [xc - sx / 2.0, -camera.height_m, z0],
            max: [xc + sx / 2.0, -camera.height_m + sy, (z0 + sz).min(camera.wall_z_m)],
            albedo: color(&mut rng, 0.1, 1.0),
            label,
        });
    }

    let light = unit(config.light_dir);
    let haze = [0.8 * tint[0].min(1.2), 0.85 * tint[1].min(1.2), 0.9 * tint[2].min(1.2)];
    let plane = h * w;
    let mut rgb = vec![0.0; 3 * plane];
    let mut depth = vec![0.0; plane];
    let mut labels = vec![SemanticLabel::Missing; plane];
    for row in 0..h {
        for col in 0..w {
            let dir = camera.ray(row, col);
            // background: floor or wall, whichever is closer
            let mut t = camera.wall_z_m;
            let mut normal = [0.0, 0.0, -1.0];
            let mut albedo = wall_albedo;
            let mut label = SemanticLabel::Structure;
            if dir[1] < 0.0 {
                let t_floor = camera.height_m / -dir[1];
                if t_floor < t {
                    t = t_floor;
                    normal = [0.0, 1.0, 0.0];
                    label = SemanticLabel::Floor;
                    albedo = floor_albedo;
                    if config.checker_m > 0.0 {
                        let cx = (dir[0] * t / config.checker_m).floor() as i64;
                        let cz = (t / config.checker_m).floor() as i64;
                        if (cx + cz).rem_euclid(2) == 1 {
                            albedo = albedo.map(|a| a * 0.6);
                        }
                    }
                }
            }
            for b in &boxes {
                if let Some((tb, axis)) = b.intersect(dir) {
                    if tb < t {
                        t = tb;
                        normal = [0.0; 3];
                        normal[axis] = -dir[axis].signum();
                        albedo = b.albedo;
                        label = b.label;
                    }
                }
            }
            let lambert = (normal[0] * light[0] + normal[1] * light[1] + normal[2] * light[2]).max(0.0);
            let shade = config.ambient + (1.0 - config.ambient) * lambert;
            let fog = (-config.haze_per_m * t).exp();
            let i = row * w + col;
            for c in 0..3 {
                let lit = albedo[c] * shade * fog + haze[c] * (1.0 - fog);
                let noise = if config.noise_std > 0.0 {
                    config.noise_std * (rng.random::<f64>() - 0.5) * 2.0
                } else {
                    0.0
                };
                rgb[c * plane + i] = (255.0 * lit + noise).round().clamp(0.0, 255.0);
            }
            depth[i] = t.clamp(config.near_m, config.far_m);
            labels[i] = label;
        }
    }
    Ok(RenderedScene {
        rgb: RawImage::from_planes(h, w, rgb)?,
        depth: DepthMap::new(h, w, depth)?.with_range_hint(config.near_m, config.far_m),
        semantic: SemanticMap::new(h, w, labels)?,
        camera,
        boxes,
    })
}

/// A normalized labeled sample from the default indoor configuration.
pub fn synth_scene(seed: u64, size: (usize, usize)) -> Result<LabeledSample> {
    synth_scene_with(seed, size, &SceneConfig::indoor())
}

pub fn synth_scene_with(seed: u64, size: (usize, usize), config: &SceneConfig) -> Result<LabeledSample> {
    let scene = render_scene(seed, size, config)?;
    let profile = DatasetProfile::Synthetic;
    let out = preprocess(
        &scene.rgb,
        Some(&scene.depth),
        Some(&scene.semantic),
        &profile.preprocess(),
    )?;
    let depth = out.depth.expect("depth requested");
    let mask = make_mask(&depth, profile.mask_bounds())?;
    LabeledSample::new(out.image, depth, mask, out.semantic)
}
