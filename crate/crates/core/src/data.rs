//! Dataset ingestion, the simple/complex split, and saliency-to-pseudo-label
//! conversion.
//!
//! On-disk layout:
//!
//! ```text
//! root/meta.json            {"num_classes": C', "class_names": [...], "mean": [..], "std": [..]}
//! root/tags.txt             <id> <tag1> [<tag2> ...]    tags in 1..=C'
//! root/images/<id>.png|jpg
//! root/saliency/<id>.png    8-bit grayscale, required for single-tag records
//! root/gt/<id>.png          8-bit class ids, optional (evaluation only)
//! root/splits/<name>.txt    optional id lists, one per line
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{LabelMap, PseudoLabelMap, RgbImage, SaliencyMap, BACKGROUND};

/// Saliency binarization threshold used when none is configured.
pub const DEFAULT_BINARIZE_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Foreground class count C′; class ids run 1..=C′, 0 is background.
    pub num_classes: usize,
    /// Foreground class names, `class_names[k]` names id `k + 1`.
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default = "default_mean")]
    pub mean: [f32; 3],
    #[serde(default = "default_std")]
    pub std: [f32; 3],
}

fn default_mean() -> [f32; 3] {
    [0.0; 3]
}

fn default_std() -> [f32; 3] {
    [1.0; 3]
}

impl DatasetMeta {
    /// Total class count C including background.
    pub fn total_classes(&self) -> usize {
        self.num_classes + 1
    }

    /// Names for ids `0..C`, background first.
    pub fn all_class_names(&self) -> Vec<String> {
        std::iter::once("background".to_string())
            .chain((1..=self.num_classes).map(|k| {
                self.class_names
                    .get(k - 1)
                    .cloned()
                    .unwrap_or_else(|| format!("class{k}"))
            }))
            .collect()
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("meta.json");
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => Error::io(&path, e),
        })?;
        let meta: DatasetMeta = serde_json::from_str(&text)?;
        if meta.num_classes == 0 || meta.num_classes >= 255 {
            return Err(Error::Range {
                what: "num_classes",
                value: meta.num_classes as f64,
                range: "1..=254".into(),
            });
        }
        Ok(meta)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join("meta.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// One image with its image-level tags.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub image: RgbImage,
    /// Foreground class ids present in the image.
    pub tags: BTreeSet<u8>,
    pub saliency: Option<SaliencyMap>,
    /// Reference mask, only used for evaluation.
    pub ground_truth: Option<LabelMap>,
}

impl ImageRecord {
    pub fn is_simple(&self) -> bool {
        self.tags.len() == 1
    }

    /// The only tag of a simple record.
    pub fn single_tag(&self) -> Option<u8> {
        if self.is_simple() {
            self.tags.iter().next().copied()
        } else {
            None
        }
    }
}

/// A single-tag record paired with its pseudo label.
#[derive(Debug, Clone, PartialEq)]
pub struct SimpleImage {
    pub record: ImageRecord,
    pub tag: u8,
    pub pseudo: PseudoLabelMap,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub simple: Vec<SimpleImage>,
    pub complex: Vec<ImageRecord>,
}

/// Marks salient pixels with the single tag and everything else background.
pub fn generate_pseudo_label(
    saliency: &SaliencyMap,
    tags: &BTreeSet<u8>,
    binarize_threshold: f32,
) -> Result<PseudoLabelMap> {
    if tags.len() != 1 {
        return Err(Error::MultiTag(tags.len()));
    }
    if !(binarize_threshold > 0.0 && binarize_threshold < 1.0) {
        return Err(Error::Range {
            what: "binarize_threshold",
            value: f64::from(binarize_threshold),
            range: "(0, 1)".into(),
        });
    }
    let tag = *tags.iter().next().expect("one tag");
    let (h, w) = saliency.dims();
    let data = saliency
        .as_slice()
        .iter()
        .map(|&s| if s >= binarize_threshold { tag } else { BACKGROUND })
        .collect();
    LabelMap::new(h, w, data)
}

/// Pseudo label for a record, checking that image and saliency agree in size.
pub fn pseudo_label_for(record: &ImageRecord, binarize_threshold: f32) -> Result<PseudoLabelMap> {
    if record.tags.len() != 1 {
        return Err(Error::MultiTag(record.tags.len()));
    }
    let sal = record
        .saliency
        .as_ref()
        .ok_or_else(|| Error::MissingSaliency(record.id.clone()))?;
    if sal.dims() != record.image.dims() {
        return Err(Error::shape(format!(
            "record `{}`: image {:?} vs saliency {:?}",
            record.id,
            record.image.dims(),
            sal.dims()
        )));
    }
    generate_pseudo_label(sal, &record.tags, binarize_threshold)
}

/// Single-tag records become simple images with pseudo labels; records with
/// two or more tags are complex.
pub fn split_dataset(records: Vec<ImageRecord>, binarize_threshold: f32) -> Result<DatasetSplit> {
    let mut split = DatasetSplit::default();
    for record in records {
        match record.tags.len() {
            0 => return Err(Error::EmptyTags(record.id)),
            1 => {
                let pseudo = pseudo_label_for(&record, binarize_threshold)?;
                let tag = record.single_tag().expect("one tag");
                split.simple.push(SimpleImage { record, tag, pseudo });
            }
            _ => split.complex.push(record),
        }
    }
    Ok(split)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub records: Vec<ImageRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub id: String,
    pub tags: BTreeSet<u8>,
}

/// Parses `tags.txt`. Blank lines and `#` comments are skipped.
pub fn parse_tag_index(text: &str, num_classes: usize) -> Result<Vec<IndexEntry>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let id = fields.next().expect("non-empty line").to_string();
        let mut tags = BTreeSet::new();
        for f in fields {
            let tag: u32 = f.parse().map_err(|_| Error::MalformedIndex {
                line: i + 1,
                reason: format!("tag `{f}` is not an integer"),
            })?;
            if tag == 0 || tag as usize > num_classes {
                return Err(Error::TagRange { id, tag, max: num_classes });
            }
            tags.insert(tag as u8);
        }
        if tags.is_empty() {
            return Err(Error::EmptyTags(id));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::MalformedIndex {
                line: i + 1,
                reason: format!("duplicate id `{id}`"),
            });
        }
        out.push(IndexEntry { id, tags });
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planar = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            planar[(c * h + y as usize) * w + x as usize] = f32::from(px[c]) / 255.0;
        }
    }
    RgbImage::new(h, w, planar)
}

pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, img.into_raw()))
}

pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    let (h, w, data) = read_gray(path)?;
    LabelMap::new(h, w, data)
}

pub fn read_saliency(path: &Path) -> Result<SaliencyMap> {
    let (h, w, data) = read_gray(path)?;
    SaliencyMap::from_u8(h, w, &data)
}

fn save_gray(path: &Path, h: usize, w: usize, data: Vec<u8>) -> Result<()> {
    let img: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::shape("gray buffer size"))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_label_map(path: &Path, map: &LabelMap) -> Result<()> {
    save_gray(path, map.height(), map.width(), map.as_slice().to_vec())
}

/// Saliency quantized to 8 bits.
pub fn write_saliency(path: &Path, map: &SaliencyMap) -> Result<()> {
    let (h, w) = map.dims();
    let data = map
        .as_slice()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    save_gray(path, h, w, data)
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let (h, w) = img.dims();
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        let px = img.pixel(y as usize, x as usize);
        Rgb(px.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn find_image(root: &Path, id: &str) -> Result<PathBuf> {
    let dir = root.join("images");
    for ext in ["png", "jpg", "jpeg"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::MissingFile(dir.join(format!("{id}.png"))))
}

fn load_record(root: &Path, entry: &IndexEntry) -> Result<ImageRecord> {
    let image = read_rgb(&find_image(root, &entry.id)?)?;
    let sal_path = root.join("saliency").join(format!("{}.png", entry.id));
    let saliency = if sal_path.exists() {
        Some(read_saliency(&sal_path)?)
    } else if entry.tags.len() == 1 {
        return Err(Error::MissingFile(sal_path));
    } else {
        None
    };
    let gt_path = root.join("gt").join(format!("{}.png", entry.id));
    let ground_truth = if gt_path.exists() {
        Some(read_label_map(&gt_path)?)
    } else {
        None
    };
    if let Some(s) = &saliency {
        if s.dims() != image.dims() {
            return Err(Error::shape(format!("saliency of `{}`", entry.id)));
        }
    }
    if let Some(g) = &ground_truth {
        if g.dims() != image.dims() {
            return Err(Error::shape(format!("ground truth of `{}`", entry.id)));
        }
    }
    Ok(ImageRecord {
        id: entry.id.clone(),
        image,
        tags: entry.tags.clone(),
        saliency,
        ground_truth,
    })
}

/// Reads the ids of a named split, or `None` if the split file is absent.
pub fn read_split_ids(root: &Path, split: &str) -> Result<Option<BTreeSet<String>>> {
    let path = root.join("splits").join(format!("{split}.txt"));
    if !path.exists() {
        return Ok(None);
    }
    let text = read_text(&path)?;
    Ok(Some(
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect(),
    ))
}

/// Loads every record listed in `tags.txt`, ordered by id.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    load_filtered(root, None)
}

/// Loads only the records of `split` (all records if the split file is
/// missing and `split` is `train`).
pub fn load_split(root: &Path, split: &str) -> Result<Dataset> {
    match read_split_ids(root, split)? {
        Some(ids) => load_filtered(root, Some(&ids)),
        None if split == "train" || split == "all" => load_dataset(root),
        None => Err(Error::MissingFile(root.join("splits").join(format!("{split}.txt")))),
    }
}

fn load_filtered(root: &Path, ids: Option<&BTreeSet<String>>) -> Result<Dataset> {
    let meta = DatasetMeta::load(root)?;
    let text = read_text(&root.join("tags.txt"))?;
    let index = parse_tag_index(&text, meta.num_classes)?;
    let by_id: BTreeMap<&str, &IndexEntry> = index.iter().map(|e| (e.id.as_str(), e)).collect();
    if let Some(ids) = ids {
        if let Some(missing) = ids.iter().find(|id| !by_id.contains_key(id.as_str())) {
            return Err(Error::MalformedIndex {
                line: 0,
                reason: format!("split lists unknown id `{missing}`"),
            });
        }
    }
    let mut records = Vec::new();
    for (id, entry) in by_id {
        if ids.is_some_and(|ids| !ids.contains(id)) {
            continue;
        }
        records.push(load_record(root, entry)?);
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        meta,
        records,
    })
}
