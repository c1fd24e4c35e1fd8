//! Synthetic scenes, COCO ingestion and conversion to training targets.

pub mod coco;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodecSpec};
use crate::error::{Error, Result};
use crate::mask::{binarize, crop_resize, mask_iou, resize, BinaryMask, BoxXyxy, GrayImage, Polygon};
use crate::matching::GroundTruthInstance;
use crate::model::Sample;

pub use coco::{load_coco, load_coco_str, load_scenes, save_dataset, CocoAnnotationRecord, CocoDataset, Segmentation};

pub const CATEGORY_NAMES: [&str; 3] = ["disk", "rectangle", "triangle"];

/// How an instance mask becomes the `N × N` codec input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    /// Crop to the tight box, then resize.
    #[default]
    Box,
    /// Resize the whole image-sized mask.
    Full,
}

impl std::str::FromStr for CropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "box" => Ok(CropMode::Box),
            "full" => Ok(CropMode::Full),
            other => Err(Error::InvalidArgument(format!("unknown crop mode {other:?} (box|full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Polygon(Polygon),
}

impl Shape {
    pub fn rasterize(&self, width: usize, height: usize) -> BinaryMask {
        match self {
            Shape::Disk { cx, cy, r } => BinaryMask::from_fn(width, height, |x, y| {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            }),
            Shape::Polygon(p) => crate::mask::rasterize_polygon(p, width, height),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneInstance {
    /// 0 disk, 1 rectangle, 2 triangle.
    pub category: usize,
    /// Generating shape; `None` for scenes read back from disk.
    pub shape: Option<Shape>,
    /// Visible pixels (later shapes occlude earlier ones).
    pub mask: BinaryMask,
    /// Tight box of `mask`, on pixel edges.
    pub bbox: BoxXyxy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: GrayImage,
    pub instances: Vec<SceneInstance>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_side: usize,
    /// Shape extent (disk diameter, rectangle side, triangle circumdiameter) in pixels.
    pub min_size: f64,
    pub max_size: f64,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Largest mask IoU allowed between any two full shapes.
    pub max_overlap_iou: f64,
    pub min_pixels: usize,
    pub noise_std: f64,
    /// Per-category intensity; each instance is jittered by up to `intensity_jitter`.
    pub intensities: [f64; 3],
    pub intensity_jitter: f64,
    pub background: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            min_size: 8.0,
            max_size: 24.0,
            min_instances: 1,
            max_instances: 4,
            max_overlap_iou: 0.3,
            min_pixels: 16,
            noise_std: 0.05,
            intensities: [0.4, 0.65, 0.9],
            intensity_jitter: 0.05,
            background: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.image_side as f64 > self.max_size
            && self.min_size > 0.0
            && self.min_size <= self.max_size
            && self.min_instances >= 1
            && self.min_instances <= self.max_instances
            && (0.0..=1.0).contains(&self.max_overlap_iou)
            && self.noise_std >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid scene config {self:?}")))
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 100;
const SCENE_ATTEMPTS: usize = 50;

fn sample_shape(rng: &mut ChaCha8Rng, category: usize, cfg: &SceneConfig) -> Result<Shape> {
    let side = cfg.image_side as f64;
    let s = rng.random_range(cfg.min_size..=cfg.max_size);
    let shape = match category {
        0 => {
            let r = s / 2.0;
            Shape::Disk {
                cx: rng.random_range(r..=side - r),
                cy: rng.random_range(r..=side - r),
                r,
            }
        }
        1 => {
            let (w, h) = (s, rng.random_range(0.5 * s..=s));
            let reach = (w * w + h * h).sqrt() / 2.0;
            let (cx, cy) = (rng.random_range(reach..=side - reach), rng.random_range(reach..=side - reach));
            let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (c, sn) = (th.cos(), th.sin());
            let corners = [(-w, -h), (w, -h), (w, h), (-w, h)]
                .map(|(x, y)| (cx + (x * c - y * sn) / 2.0, cy + (x * sn + y * c) / 2.0));
            Shape::Polygon(Polygon::new(corners.to_vec())?)
        }
        _ => {
            let r = s / 2.0;
            let (cx, cy) = (rng.random_range(r..=side - r), rng.random_range(r..=side - r));
            let th0: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let verts = (0..3)
                .map(|k| {
                    let jitter = if k == 0 { 0.0 } else { rng.random_range(-0.4..0.4) };
                    let a = th0 + k as f64 * std::f64::consts::TAU / 3.0 + jitter;
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect();
            Shape::Polygon(Polygon::new(verts)?)
        }
    };
    Ok(shape)
}

/// One scene, or `None` when the placement budget ran out.
fn try_scene(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Result<Option<Scene>> {
    let side = cfg.image_side;
    let n = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let mut placed: Vec<(usize, Shape, BinaryMask)> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let category = rng.random_range(0..3);
            let shape = sample_shape(rng, category, cfg)?;
            let full = shape.rasterize(side, side);
            if full.area() < cfg.min_pixels {
                continue;
            }
            let mut overlap = false;
            for (_, _, other) in &placed {
                if mask_iou(&full, other)? > cfg.max_overlap_iou {
                    overlap = true;
                    break;
                }
            }
            if !overlap {
                placed.push((category, shape, full));
                ok = true;
                break;
            }
        }
        if !ok {
            return Ok(None);
        }
    }

    // paint in order; later shapes cover earlier ones
    let mut owner: Vec<Option<usize>> = vec![None; side * side];
    for (k, (_, _, full)) in placed.iter().enumerate() {
        for (o, &b) in owner.iter_mut().zip(full.bits()) {
            if b == 1 {
                *o = Some(k);
            }
        }
    }
    let mut instances = Vec::with_capacity(placed.len());
    for (k, (category, shape, _)) in placed.iter().enumerate() {
        let bits: Vec<u8> = owner.iter().map(|&o| u8::from(o == Some(k))).collect();
        let mask = BinaryMask::new(side, side, bits)?;
        if mask.area() < cfg.min_pixels {
            return Ok(None);
        }
        let bbox = mask.bounding_box().expect("non-empty mask");
        instances.push(SceneInstance { category: *category, shape: Some(shape.clone()), mask, bbox });
    }
    let levels: Vec<f64> = placed
        .iter()
        .map(|(c, _, _)| cfg.intensities[*c] + rng.random_range(-cfg.intensity_jitter..=cfg.intensity_jitter))
        .collect();
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let values = owner
        .iter()
        .map(|o| {
            let base = o.map_or(cfg.background, |k| levels[k]);
            (base + noise.sample(rng)).clamp(0.0, 1.0)
        })
        .collect();
    Ok(Some(Scene { image: GrayImage::new(side, side, values)?, instances }))
}

/// `count` scenes; scene `i` depends only on `(seed, i)`.
pub fn gen_synthetic(seed: u64, count: usize, cfg: &SceneConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument("count must be >= 1".into()));
    }
    (0..count)
        .map(|i| {
            for attempt in 0..SCENE_ATTEMPTS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((attempt as u64) << 40) | i as u64);
                if let Some(scene) = try_scene(&mut rng, cfg)? {
                    return Ok(scene);
                }
                log::debug!("scene {i}: placement budget exhausted, retrying with sub-seed {}", attempt + 1);
            }
            Err(Error::InvalidArgument(format!("scene {i}: could not place shapes after {SCENE_ATTEMPTS} attempts")))
        })
        .collect()
}

/// `N × N` binarized codec input for an instance.
pub fn codec_input(mask: &BinaryMask, bbox: &BoxXyxy, side: usize, mode: CropMode) -> Result<BinaryMask> {
    let soft = match mode {
        CropMode::Box => crop_resize(mask, bbox, side)?,
        CropMode::Full => resize(&mask.to_soft(), side, side),
    };
    Ok(binarize(&soft, crate::mask::DEFAULT_THRESHOLD))
}

/// Encodes one instance as a training target.
pub fn instance_to_target(
    category: usize,
    mask: &BinaryMask,
    bbox: &BoxXyxy,
    codec: &Codec,
    mode: CropMode,
) -> Result<GroundTruthInstance> {
    if mask.is_empty() || !(bbox.width() > 0.0 && bbox.height() > 0.0) {
        return Err(Error::DegenerateBox(format!("instance with box {bbox:?} and {} pixels", mask.area())));
    }
    let input = codec_input(mask, bbox, codec.side(), mode)?;
    let mask_vector = codec.encode(&input.to_soft())?;
    let nb = bbox.to_cxcywh(mask.width(), mask.height());
    nb.validate()?;
    Ok(GroundTruthInstance {
        category,
        bbox: nb,
        mask_vector,
        raw_mask: mask.clone(),
    })
}

pub fn scene_to_sample(scene: &Scene, codec: &Codec, mode: CropMode) -> Result<Sample> {
    let targets = scene
        .instances
        .iter()
        .map(|i| instance_to_target(i.category, &i.mask, &i.bbox, codec, mode))
        .collect::<Result<_>>()?;
    Ok(Sample { image: scene.image.clone(), targets })
}

/// Box-cropped `N × N` masks of every instance, as codec training data.
pub fn crop_masks(scenes: &[Scene], side: usize) -> Result<Vec<crate::mask::SoftMask>> {
    scenes
        .iter()
        .flat_map(|s| s.instances.iter())
        .map(|i| codec_input(&i.mask, &i.bbox, side, CropMode::Box).map(|m| m.to_soft()))
        .collect()
}

/// Fits each spec on the box-cropped training masks (DCT and Flatten need no data).
pub fn fit_codecs(train: &[Scene], specs: &[CodecSpec]) -> Result<Vec<Codec>> {
    specs
        .iter()
        .map(|spec| {
            if !spec.kind.needs_fitting() {
                return Codec::analytic(*spec);
            }
            let masks = crop_masks(train, spec.side)?;
            if masks.len() < spec.nk {
                return Err(Error::InsufficientSamples { needed: spec.nk, got: masks.len() });
            }
            Codec::fit(*spec, &masks)
        })
        .collect()
}
