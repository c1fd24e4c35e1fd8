//! The subset of COCO annotation JSON we read and write: images, categories and
//! annotations with polygon or uncompressed RLE segmentation.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Scene, SceneInstance, CATEGORY_NAMES};
use crate::error::{Error, Result};
use crate::mask::{read_pgm, rasterize_polygon, write_pgm, BinaryMask, BoxXyxy, Polygon};

pub const ANNOTATION_FILE: &str = "annotations.json";

/// Largest per-side gap between a stated bbox and the mask's tight box before we warn.
const BBOX_SLACK: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub enum Segmentation {
    Polygons(Vec<Polygon>),
    /// Decoded uncompressed RLE.
    Mask(BinaryMask),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CocoAnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    /// Contiguous index in category file order.
    pub category: usize,
    pub segmentation: Segmentation,
    pub bbox: BoxXyxy,
    pub width: usize,
    pub height: usize,
}

impl CocoAnnotationRecord {
    /// The instance at image resolution; polygons are unioned.
    pub fn mask(&self) -> BinaryMask {
        match &self.segmentation {
            Segmentation::Mask(m) => m.clone(),
            Segmentation::Polygons(ps) => {
                let parts: Vec<_> = ps.iter().map(|p| rasterize_polygon(p, self.width, self.height)).collect();
                BinaryMask::from_fn(self.width, self.height, |x, y| parts.iter().any(|m| m.get(x, y)))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    #[serde(default)]
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, Default)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub category_names: Vec<String>,
    pub records: Vec<CocoAnnotationRecord>,
    /// Annotation id and reason for each annotation left out.
    pub skipped: Vec<(u64, String)>,
}

#[derive(Deserialize)]
struct RawFile {
    #[serde(default)]
    images: Vec<CocoImage>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<RawCategory>,
}

#[derive(Deserialize)]
struct RawCategory {
    id: i64,
    #[serde(default)]
    name: String,
}

#[derive(Deserialize)]
struct RawAnnotation {
    #[serde(default)]
    id: u64,
    image_id: u64,
    category_id: i64,
    segmentation: Value,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    iscrowd: u8,
}

/// Column-major run lengths, starting with a run of zeros.
pub fn rle_decode(counts: &[u64], width: usize, height: usize) -> Result<BinaryMask> {
    let total: u64 = counts.iter().sum();
    if total != (width * height) as u64 {
        return Err(Error::Format(format!(
            "RLE counts sum to {total}, image has {} pixels",
            width * height
        )));
    }
    let mut col_major = Vec::with_capacity(width * height);
    for (i, &c) in counts.iter().enumerate() {
        col_major.extend(std::iter::repeat_n((i % 2) as u8, c as usize));
    }
    Ok(BinaryMask::from_fn(width, height, |x, y| col_major[x * height + y] == 1))
}

pub fn rle_encode(m: &BinaryMask) -> Vec<u64> {
    let mut counts = Vec::new();
    let (mut cur, mut run) = (false, 0u64);
    for x in 0..m.width() {
        for y in 0..m.height() {
            let b = m.get(x, y);
            if b != cur {
                counts.push(run);
                cur = b;
                run = 0;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

enum Parsed {
    Seg(Segmentation, usize, usize),
    Skip(String),
}

fn parse_segmentation(v: &Value, size: Option<(usize, usize)>) -> Result<Parsed> {
    match v {
        Value::Array(polys) => {
            let (w, h) = size.ok_or_else(|| Error::Format("polygon annotation on an image of unknown size".into()))?;
            let polys = polys
                .iter()
                .map(|p| {
                    let coords: Vec<f64> = serde_json::from_value(p.clone())?;
                    Polygon::from_flat(&coords)
                })
                .collect::<Result<Vec<_>>>()?;
            if polys.is_empty() {
                return Ok(Parsed::Skip("empty polygon list".into()));
            }
            Ok(Parsed::Seg(Segmentation::Polygons(polys), w, h))
        }
        Value::Object(o) => {
            let [h, w]: [usize; 2] = serde_json::from_value(
                o.get("size").cloned().ok_or_else(|| Error::Format("RLE without size".into()))?,
            )?;
            match o.get("counts") {
                Some(Value::String(_)) => Ok(Parsed::Skip("compressed RLE is not supported".into())),
                Some(c @ Value::Array(_)) => {
                    let counts: Vec<u64> = serde_json::from_value(c.clone())?;
                    Ok(Parsed::Seg(Segmentation::Mask(rle_decode(&counts, w, h)?), w, h))
                }
                _ => Err(Error::Format("RLE without counts".into())),
            }
        }
        other => Err(Error::Format(format!("unrecognized segmentation {other}"))),
    }
}

/// Parses annotation JSON. `sizes` maps image id to `(width, height)` and takes
/// precedence over the `images` section.
pub fn load_coco_str(json: &str, sizes: &HashMap<u64, (usize, usize)>) -> Result<CocoDataset> {
    let raw: RawFile = serde_json::from_str(json)?;
    let cat_index: HashMap<i64, usize> = raw.categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    let mut size_of: HashMap<u64, (usize, usize)> = raw.images.iter().map(|i| (i.id, (i.width, i.height))).collect();
    size_of.extend(sizes);

    let mut out = CocoDataset {
        images: raw.images,
        category_names: raw.categories.iter().map(|c| c.name.clone()).collect(),
        ..Default::default()
    };
    for a in raw.annotations {
        let category = *cat_index.get(&a.category_id).ok_or(Error::UnknownCategory(a.category_id))?;
        if a.iscrowd != 0 {
            log::info!("annotation {}: skipped (iscrowd)", a.id);
            out.skipped.push((a.id, "iscrowd".into()));
            continue;
        }
        let (segmentation, width, height) = match parse_segmentation(&a.segmentation, size_of.get(&a.image_id).copied())? {
            Parsed::Seg(s, w, h) => (s, w, h),
            Parsed::Skip(reason) => {
                log::warn!("annotation {}: skipped ({reason})", a.id);
                out.skipped.push((a.id, reason));
                continue;
            }
        };
        let mut rec = CocoAnnotationRecord {
            id: a.id,
            image_id: a.image_id,
            category,
            segmentation,
            bbox: BoxXyxy::new(0.0, 0.0, 0.0, 0.0),
            width,
            height,
        };
        let Some(tight) = rec.mask().bounding_box() else {
            log::warn!("annotation {}: skipped (empty mask)", a.id);
            out.skipped.push((a.id, "empty mask".into()));
            continue;
        };
        rec.bbox = match a.bbox {
            Some([x, y, w, h]) => {
                let b = BoxXyxy::new(x, y, x + w, y + h);
                let gap = [(b.x1 - tight.x1), (b.y1 - tight.y1), (b.x2 - tight.x2), (b.y2 - tight.y2)]
                    .iter()
                    .fold(0.0f64, |m, d| m.max(d.abs()));
                if gap > BBOX_SLACK {
                    log::warn!("annotation {}: bbox {:?} is {gap:.1} px from its mask", a.id, [x, y, w, h]);
                }
                b
            }
            None => tight,
        };
        out.records.push(rec);
    }
    Ok(out)
}

pub fn load_coco(path: impl AsRef<Path>, sizes: &HashMap<u64, (usize, usize)>) -> Result<CocoDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    load_coco_str(&text, sizes).map_err(|e| match e {
        Error::Json(j) => Error::Format(format!("{}: {j}", path.display())),
        other => other,
    })
}

fn image_name(i: usize) -> String {
    format!("{i:06}.pgm")
}

/// Writes `dir/NNNNNN.pgm` per scene and `dir/annotations.json` with masks as
/// uncompressed RLE. Image ids start at 1, as do category ids.
pub fn save_dataset(dir: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let file_name = image_name(i);
        write_pgm(&s.image, BufWriter::new(fs::File::create(dir.join(&file_name))?))?;
        images.push(serde_json::json!({
            "id": i + 1, "file_name": file_name, "width": s.image.width(), "height": s.image.height()
        }));
        for inst in &s.instances {
            let b = inst.bbox;
            annotations.push(serde_json::json!({
                "id": annotations.len() + 1,
                "image_id": i + 1,
                "category_id": inst.category + 1,
                "iscrowd": 0,
                "area": inst.mask.area(),
                "bbox": [b.x1, b.y1, b.width(), b.height()],
                "segmentation": {"size": [inst.mask.height(), inst.mask.width()], "counts": rle_encode(&inst.mask)},
            }));
        }
    }
    let categories: Vec<_> = CATEGORY_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| serde_json::json!({"id": i + 1, "name": n}))
        .collect();
    let doc = serde_json::json!({"images": images, "annotations": annotations, "categories": categories});
    serde_json::to_writer(BufWriter::new(fs::File::create(dir.join(ANNOTATION_FILE))?), &doc)?;
    Ok(())
}

/// Reads a directory written by [`save_dataset`] (or any COCO subset with PGM
/// images) back into scenes. Images are 8-bit, so intensities come back quantized.
pub fn load_scenes(dir: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let dir = dir.as_ref();
    let ds = load_coco(dir.join(ANNOTATION_FILE), &HashMap::new())?;
    let mut by_image: HashMap<u64, Vec<SceneInstance>> = HashMap::new();
    for r in &ds.records {
        let mask = r.mask();
        let bbox = mask.bounding_box().expect("loader drops empty masks");
        by_image.entry(r.image_id).or_default().push(SceneInstance {
            category: r.category,
            shape: None,
            mask,
            bbox,
        });
    }
    ds.images
        .iter()
        .map(|im| {
            let image = read_pgm(BufReader::new(fs::File::open(dir.join(&im.file_name))?))?;
            if (image.width(), image.height()) != (im.width, im.height) {
                return Err(Error::Format(format!("{} size differs from its image entry", im.file_name)));
            }
            Ok(Scene {
                image,
                instances: by_image.remove(&im.id).unwrap_or_default(),
            })
        })
        .collect()
}
