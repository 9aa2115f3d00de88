//! Synthetic shapes dataset with known ground truth and controlled saliency
//! corruption.
//!
//! Each foreground class has its own hue and surface pattern. Simple images
//! hold one object; complex images hold two or three objects of distinct
//! classes. Saliency of a simple image is its ground-truth foreground mask,
//! optionally corrupted in exactly one way:
//!
//! * `dilation` / `erosion`: the mask grows or shrinks by a disk radius;
//! * `extra_blob`: a salient blob is added on background;
//! * `misplaced`: the mask is moved to a location the object does not occupy.
//!
//! Independently of that, speckles (small holes in the mask or bumps next to
//! it) can be stamped onto any simple training mask. They are local pixel
//! noise and are not reported as corruptions.
//!
//! Images are quantized to 8 bits at generation time, so reading the written
//! dataset back gives exactly the in-memory records.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{write_label_map, write_rgb, write_saliency, DatasetMeta, ImageRecord};
use crate::error::{Error, Result};
use crate::maps::{LabelMap, RgbImage, SaliencyMap, BACKGROUND};
use crate::metrics::image_iou;
use crate::trainer::derived_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub train_simple: usize,
    pub train_complex: usize,
    pub val_simple: usize,
    pub val_complex: usize,
    pub p_dilation: f64,
    pub p_erosion: f64,
    pub p_extra_blob: f64,
    pub p_misplaced: f64,
    /// Disk radius of dilation and erosion, in pixels.
    pub boundary_radius: usize,
    /// Radius range of an extra blob relative to the object radius.
    pub blob_radius: (f64, f64),
    /// Object radius range of simple images, as a fraction of the shorter side.
    pub simple_radius: (f64, f64),
    pub complex_radius: (f64, f64),
    /// Per-object hue jitter, as a fraction of the hue spacing between classes.
    pub hue_jitter: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub pixel_noise: f64,
    /// Probability that the background is tinted with the hue of a class in
    /// the image (the only class for simple images, a random tag otherwise).
    pub context_bias: f64,
    /// Probability that a simple training mask receives speckles.
    pub p_speckle: f64,
    /// Inclusive range of speckles per affected mask.
    pub speckle_count: (usize, usize),
    /// Speckle radius range in pixels.
    pub speckle_radius: (f64, f64),
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            height: 64,
            width: 64,
            train_simple: 400,
            train_complex: 200,
            val_simple: 50,
            val_complex: 50,
            p_dilation: 0.1,
            p_erosion: 0.05,
            p_extra_blob: 0.08,
            p_misplaced: 0.08,
            boundary_radius: 3,
            blob_radius: (0.4, 0.7),
            simple_radius: (0.16, 0.28),
            complex_radius: (0.11, 0.18),
            hue_jitter: 0.35,
            pixel_noise: 0.08,
            context_bias: 0.9,
            p_speckle: 0.5,
            speckle_count: (2, 4),
            speckle_radius: (1.5, 2.5),
        }
    }
}

impl FixtureSpec {
    /// The same spec with every corruption probability set to zero.
    pub fn clean(mut self) -> Self {
        self.p_dilation = 0.0;
        self.p_erosion = 0.0;
        self.p_extra_blob = 0.0;
        self.p_misplaced = 0.0;
        self.p_speckle = 0.0;
        self
    }

    pub fn corruption_rate(&self) -> f64 {
        self.p_dilation + self.p_erosion + self.p_extra_blob + self.p_misplaced
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_classes < 2 || self.num_classes > 254 {
            return bad(format!("num_classes = {} outside 2..=254", self.num_classes));
        }
        if self.height < 16 || self.width < 16 {
            return bad(format!("image size {}x{} below 16x16", self.height, self.width));
        }
        if self.train_simple == 0 {
            return bad("train_simple must be positive".into());
        }
        let probs = [
            ("p_dilation", self.p_dilation),
            ("p_erosion", self.p_erosion),
            ("p_extra_blob", self.p_extra_blob),
            ("p_misplaced", self.p_misplaced),
            ("p_speckle", self.p_speckle),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.corruption_rate() > 1.0 + 1e-12 {
            return bad(format!(
                "corruption probabilities sum to {} > 1 (corruptions are exclusive)",
                self.corruption_rate()
            ));
        }
        for (name, (lo, hi)) in [("simple_radius", self.simple_radius), ("complex_radius", self.complex_radius)] {
            if !(lo > 0.0 && lo <= hi && hi < 0.5) {
                return bad(format!("{name} = ({lo}, {hi}) must satisfy 0 < lo <= hi < 0.5"));
            }
        }
        let (lo, hi) = self.blob_radius;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("blob_radius = ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"));
        }
        if !(self.hue_jitter >= 0.0 && self.hue_jitter < 1.0) {
            return bad(format!("hue_jitter = {} outside [0, 1)", self.hue_jitter));
        }
        let ((clo, chi), (rlo, rhi)) = (self.speckle_count, self.speckle_radius);
        if clo > chi || !(rlo > 0.0 && rlo <= rhi) {
            return bad(format!("speckle ranges ({clo}, {chi}) and ({rlo}, {rhi}) must be ordered and positive"));
        }
        if !(0.0..=1.0).contains(&self.context_bias) {
            return bad(format!("context_bias = {} outside [0, 1]", self.context_bias));
        }
        if !(self.pixel_noise >= 0.0 && self.pixel_noise.is_finite()) {
            return bad(format!("pixel_noise = {} must be a finite non-negative value", self.pixel_noise));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    Dilation,
    Erosion,
    ExtraBlob,
    Misplaced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureRecord {
    pub record: ImageRecord,
    pub split: Split,
    pub corruption: Option<Corruption>,
}

/// Per-image entry of `corruptions.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionFlag {
    pub split: Split,
    pub corruption: Option<Corruption>,
    /// IoU of the tag class between the saliency-derived label and the ground truth.
    pub pseudo_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub meta: DatasetMeta,
    pub records: Vec<FixtureRecord>,
}

impl Fixture {
    /// Records of one split, ordered by id like a loaded dataset.
    pub fn split(&self, split: Split) -> Vec<ImageRecord> {
        let mut out: Vec<ImageRecord> = self
            .records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.record.clone())
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    pub fn flags(&self) -> BTreeMap<String, CorruptionFlag> {
        self.records
            .iter()
            .map(|r| {
                let pseudo_iou = match (&r.record.saliency, &r.record.ground_truth, r.record.single_tag()) {
                    (Some(s), Some(gt), Some(tag)) => {
                        let pseudo = crate::data::generate_pseudo_label(s, &r.record.tags, 0.5)
                            .expect("single tag with matching saliency");
                        image_iou(gt, &pseudo, tag).expect("same size")
                    }
                    _ => None,
                };
                (
                    r.record.id.clone(),
                    CorruptionFlag {
                        split: r.split,
                        corruption: r.corruption,
                        pseudo_iou,
                    },
                )
            })
            .collect()
    }

    /// Writes the dataset layout plus `corruptions.json` under `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        for sub in ["images", "saliency", "gt", "splits"] {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        self.meta.save(root)?;
        let mut tags = String::new();
        let mut splits: BTreeMap<&str, String> = BTreeMap::new();
        for r in &self.records {
            let rec = &r.record;
            let t: Vec<String> = rec.tags.iter().map(u8::to_string).collect();
            tags.push_str(&format!("{} {}\n", rec.id, t.join(" ")));
            let name = match r.split {
                Split::Train => "train",
                Split::Val => "val",
            };
            let list = splits.entry(name).or_default();
            list.push_str(&rec.id);
            list.push('\n');
            write_rgb(&root.join("images").join(format!("{}.png", rec.id)), &rec.image)?;
            if let Some(s) = &rec.saliency {
                write_saliency(&root.join("saliency").join(format!("{}.png", rec.id)), s)?;
            }
            if let Some(g) = &rec.ground_truth {
                write_label_map(&root.join("gt").join(format!("{}.png", rec.id)), g)?;
            }
        }
        let write = |path: std::path::PathBuf, text: String| std::fs::write(&path, text).map_err(|e| Error::io(&path, e));
        write(root.join("tags.txt"), tags)?;
        for (name, list) in splits {
            write(root.join("splits").join(format!("{name}.txt")), list)?;
        }
        write(root.join("corruptions.json"), serde_json::to_string_pretty(&self.flags())?)?;
        Ok(())
    }
}

/// Reads `corruptions.json` written next to a fixture.
pub fn read_corruption_flags(root: &Path) -> Result<BTreeMap<String, CorruptionFlag>> {
    let path = root.join("corruptions.json");
    let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
        _ => Error::io(&path, e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Generates the fixture and writes it to `root`.
pub fn make_synthetic_dataset(spec: &FixtureSpec, seed: u64, root: &Path) -> Result<Fixture> {
    let fixture = generate_fixture(spec, seed)?;
    fixture.write(root)?;
    Ok(fixture)
}

const DOMAIN_FIXTURE: u64 = 0xf1;

/// Builds every record in memory. Each image draws from its own generator, so
/// records do not depend on one another.
pub fn generate_fixture(spec: &FixtureSpec, seed: u64) -> Result<Fixture> {
    spec.validate()?;
    let meta = DatasetMeta {
        num_classes: spec.num_classes,
        class_names: (1..=spec.num_classes).map(|k| format!("shape{k}")).collect(),
        mean: [0.0; 3],
        std: [1.0; 3],
    };
    let plan = [
        (Split::Train, false, spec.train_simple, "ts"),
        (Split::Train, true, spec.train_complex, "tc"),
        (Split::Val, false, spec.val_simple, "vs"),
        (Split::Val, true, spec.val_complex, "vc"),
    ];
    let mut records = Vec::new();
    let mut index = 0u64;
    for (split, complex, count, prefix) in plan {
        for i in 0..count {
            let mut rng = derived_rng(seed, DOMAIN_FIXTURE, index);
            index += 1;
            let id = format!("{prefix}{i:04}");
            let corrupt = split == Split::Train && !complex;
            records.push(render_record(spec, id, split, complex, corrupt, &mut rng));
        }
    }
    Ok(Fixture { meta, records })
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

#[derive(Debug, Clone, Copy)]
struct Object {
    class: u8,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    kind: ShapeKind,
}

impl Object {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        match self.kind {
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Rectangle => u.abs() <= 0.85 && v.abs() <= 0.85,
            ShapeKind::Triangle => v <= 0.7 && v >= -1.0 && u.abs() <= (0.7 - v) * 0.6,
        }
    }
}

fn random_object(spec: &FixtureSpec, class: u8, radius: (f64, f64), rng: &mut ChaCha8Rng) -> Object {
    let side = spec.height.min(spec.width) as f64;
    let r = rng.random_range(radius.0..=radius.1) * side;
    let aspect: f64 = rng.random_range(0.7..1.4);
    let margin = r * 0.6;
    let kind = match rng.random_range(0..3) {
        0 => ShapeKind::Ellipse,
        1 => ShapeKind::Rectangle,
        _ => ShapeKind::Triangle,
    };
    Object {
        class,
        cy: rng.random_range(margin..spec.height as f64 - margin),
        cx: rng.random_range(margin..spec.width as f64 - margin),
        ry: r * aspect.sqrt(),
        rx: r / aspect.sqrt(),
        angle: rng.random_range(0.0..std::f64::consts::PI),
        kind,
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Class-specific surface pattern in [-1, 1]: stripes whose orientation and
/// period depend on the class.
fn pattern(class: u8, num_classes: usize, y: f64, x: f64, phase: f64) -> f64 {
    let theta = std::f64::consts::PI * f64::from(class - 1) / num_classes as f64;
    let period = 4.0 + f64::from((class - 1) % 3) * 2.0;
    let d = x * theta.cos() + y * theta.sin();
    (2.0 * std::f64::consts::PI * d / period + phase).sin()
}

fn render_record(
    spec: &FixtureSpec,
    id: String,
    split: Split,
    complex: bool,
    corrupt: bool,
    rng: &mut ChaCha8Rng,
) -> FixtureRecord {
    let (h, w) = (spec.height, spec.width);
    let n_cls = spec.num_classes;
    let objects: Vec<Object> = loop {
        let classes: Vec<u8> = if complex {
            let k = if n_cls >= 3 { rng.random_range(2..=3) } else { 2 };
            let mut all: Vec<u8> = (1..=n_cls as u8).collect();
            for i in 0..k {
                let j = rng.random_range(i..all.len());
                all.swap(i, j);
            }
            all[..k].to_vec()
        } else {
            vec![rng.random_range(1..=n_cls as u8)]
        };
        let radius = if complex { spec.complex_radius } else { spec.simple_radius };
        let objs: Vec<Object> = classes.iter().map(|&c| random_object(spec, c, radius, rng)).collect();
        // every object keeps a reasonable visible area
        let mut visible = vec![0usize; objs.len()];
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                if let Some(k) = (0..objs.len()).rev().find(|&k| objs[k].contains(py, px)) {
                    visible[k] += 1;
                }
            }
        }
        if visible.iter().all(|&v| v >= 24) {
            break objs;
        }
    };

    // ground truth: later objects occlude earlier ones
    let mut gt = LabelMap::filled(h, w, BACKGROUND);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            if let Some(o) = objects.iter().rev().find(|o| o.contains(py, px)) {
                gt.set(y, x, o.class);
            }
        }
    }

    // appearance
    let spacing = 1.0 / n_cls as f64;
    let mut bg_base = [
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
    ];
    let scene = objects[rng.random_range(0..objects.len())].class;
    if rng.random::<f64>() < spec.context_bias {
        let hue = f64::from(scene - 1) * spacing;
        bg_base = hsv(hue, rng.random_range(0.3..0.5), rng.random_range(0.45..0.65));
    }
    let bg_grad = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
    let obj_colors: Vec<([f64; 3], f64)> = objects
        .iter()
        .map(|o| {
            let hue = f64::from(o.class - 1) * spacing + rng.random_range(-spec.hue_jitter..=spec.hue_jitter) * spacing;
            let sat = rng.random_range(0.55..0.9);
            let val = rng.random_range(0.6..0.95);
            (hsv(hue, sat, val), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let noise = Normal::new(0.0, spec.pixel_noise.max(1e-12)).expect("finite std");
    let mut planar = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let rgb = match objects.iter().rposition(|o| o.contains(py, px)) {
                Some(k) => {
                    let (col, phase) = obj_colors[k];
                    let p = pattern(objects[k].class, n_cls, py, px, phase);
                    col.map(|c| c * (1.0 + 0.18 * p))
                }
                None => {
                    let g = bg_grad[0] * (py / h as f64 - 0.5) + bg_grad[1] * (px / w as f64 - 0.5);
                    bg_base.map(|c| c + g)
                }
            };
            for c in 0..3 {
                let v = rgb[c] + if spec.pixel_noise > 0.0 { noise.sample(rng) } else { 0.0 };
                planar[(c * h + y) * w + x] = f32::from((v.clamp(0.0, 1.0) * 255.0).round() as u8) / 255.0;
            }
        }
    }
    let image = RgbImage::new(h, w, planar).expect("planar size");
    let tags: BTreeSet<u8> = gt.support().into_iter().filter(|&c| c != BACKGROUND).collect();

    let (saliency, corruption) = if complex {
        (None, None)
    } else {
        let fg: Vec<bool> = gt.as_slice().iter().map(|&v| v != BACKGROUND).collect();
        let corruption = if corrupt { draw_corruption(spec, rng) } else { None };
        let mut mask = match corruption {
            None => fg.clone(),
            Some(Corruption::Dilation) => morph(&fg, h, w, spec.boundary_radius, true),
            Some(Corruption::Erosion) => morph(&fg, h, w, spec.boundary_radius, false),
            Some(Corruption::ExtraBlob) => add_blob(&fg, spec, &objects[0], rng),
            Some(Corruption::Misplaced) => misplace(&fg, spec, &objects[0], rng),
        };
        if corrupt && spec.p_speckle > 0.0 && rng.random::<f64>() < spec.p_speckle {
            speckle(&mut mask, &fg, spec, rng);
        }
        let values = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        (Some(SaliencyMap::new(h, w, values).expect("saliency size")), corruption)
    };
    FixtureRecord {
        record: ImageRecord {
            id,
            image,
            tags,
            saliency,
            ground_truth: Some(gt),
        },
        split,
        corruption,
    }
}

fn draw_corruption(spec: &FixtureSpec, rng: &mut ChaCha8Rng) -> Option<Corruption> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (p, c) in [
        (spec.p_dilation, Corruption::Dilation),
        (spec.p_erosion, Corruption::Erosion),
        (spec.p_extra_blob, Corruption::ExtraBlob),
        (spec.p_misplaced, Corruption::Misplaced),
    ] {
        acc += p;
        if u < acc {
            return Some(c);
        }
    }
    None
}

/// Binary dilation (`grow`) or erosion with a disk of radius `r`.
fn morph(mask: &[bool], h: usize, w: usize, r: usize, grow: bool) -> Vec<bool> {
    let r = r as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            false
        } else {
            mask[y as usize * w + x as usize]
        }
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[y as usize * w + x as usize] = if grow {
                offsets.iter().any(|&(dy, dx)| at(y + dy, x + dx))
            } else {
                offsets.iter().all(|&(dy, dx)| at(y + dy, x + dx))
            };
        }
    }
    // erosion never empties the mask entirely
    if !grow && r > 1 && !out.iter().any(|&v| v) {
        return morph(mask, h, w, r as usize - 1, grow);
    }
    out
}

fn disk_pixels(h: usize, w: usize, cy: f64, cx: f64, ry: f64, rx: f64) -> Vec<usize> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
            if dy * dy + dx * dx <= 1.0 {
                out.push(y * w + x);
            }
        }
    }
    out
}

/// Stamps small disks near the object, each either clearing the mask (a hole)
/// or setting it (a bump).
fn speckle(mask: &mut [bool], fg: &[bool], spec: &FixtureSpec, rng: &mut ChaCha8Rng) {
    let (h, w) = (spec.height, spec.width);
    let inside: Vec<usize> = (0..h * w).filter(|&i| fg[i]).collect();
    if inside.is_empty() {
        return;
    }
    let n = rng.random_range(spec.speckle_count.0..=spec.speckle_count.1);
    for _ in 0..n {
        let r = rng.random_range(spec.speckle_radius.0..=spec.speckle_radius.1);
        let anchor = inside[rng.random_range(0..inside.len())];
        let cy = (anchor / w) as f64 + 0.5 + rng.random_range(-r..=r);
        let cx = (anchor % w) as f64 + 0.5 + rng.random_range(-r..=r);
        let value = rng.random_bool(0.5);
        for i in disk_pixels(h, w, cy, cx, r, r) {
            mask[i] = value;
        }
    }
}

/// Adds a blob on background, away from the object.
fn add_blob(fg: &[bool], spec: &FixtureSpec, obj: &Object, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let (h, w) = (spec.height, spec.width);
    let (lo, hi) = spec.blob_radius;
    let r = obj.rx.max(obj.ry) * rng.random_range(lo..=hi);
    let r = r.max(3.0);
    let mut best: Option<Vec<usize>> = None;
    for _ in 0..64 {
        let cy = rng.random_range(r..(h as f64 - r).max(r + 1.0));
        let cx = rng.random_range(r..(w as f64 - r).max(r + 1.0));
        let px = disk_pixels(h, w, cy, cx, r, r);
        let overlap = px.iter().filter(|&&i| fg[i]).count();
        let free = px.len() - overlap;
        if overlap == 0 && free > 0 {
            best = Some(px);
            break;
        }
        if best.as_ref().is_none_or(|b| b.iter().filter(|&&i| !fg[i]).count() < free) {
            best = Some(px);
        }
    }
    let mut out = fg.to_vec();
    for i in best.unwrap_or_default() {
        out[i] = true;
    }
    out
}

/// Moves the foreground mask to the placement that overlaps the object least.
fn misplace(fg: &[bool], spec: &FixtureSpec, obj: &Object, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let (h, w) = (spec.height as isize, spec.width as isize);
    let cells: Vec<(isize, isize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| fg[(y * w + x) as usize])
        .collect();
    let (cy, cx) = (obj.cy as isize, obj.cx as isize);
    let mut best: Option<(usize, Vec<bool>)> = None;
    for _ in 0..48 {
        let ty = rng.random_range(0..h as i64) as isize;
        let tx = rng.random_range(0..w as i64) as isize;
        let (dy, dx) = (ty - cy, tx - cx);
        let mut out = vec![false; (h * w) as usize];
        let mut inside = 0;
        let mut overlap = 0;
        for &(y, x) in &cells {
            let (ny, nx) = (y + dy, x + dx);
            if ny >= 0 && nx >= 0 && ny < h && nx < w {
                let i = (ny * w + nx) as usize;
                out[i] = true;
                inside += 1;
                overlap += usize::from(fg[i]);
            }
        }
        // most of the moved mask must stay in frame
        if inside * 10 < cells.len() * 7 {
            continue;
        }
        if best.as_ref().is_none_or(|(o, _)| overlap < *o) {
            best = Some((overlap, out));
        }
    }
    best.map_or_else(|| fg.iter().map(|&v| !v).collect(), |(_, m)| m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_split, split_dataset};

    fn small() -> FixtureSpec {
        FixtureSpec {
            height: 32,
            width: 32,
            train_simple: 12,
            train_complex: 4,
            val_simple: 3,
            val_complex: 3,
            ..FixtureSpec::default()
        }
    }

    #[test]
    fn clean_saliency_equals_ground_truth_foreground() {
        let f = generate_fixture(&small().clean(), 3).unwrap();
        let split = split_dataset(f.split(Split::Train), 0.5).unwrap();
        for s in &split.simple {
            let gt = s.record.ground_truth.as_ref().unwrap();
            assert_eq!(image_iou(gt, &s.pseudo, s.tag).unwrap(), Some(1.0));
        }
        assert!(f.records.iter().all(|r| r.corruption.is_none()));
    }

    #[test]
    fn speckles_perturb_training_masks_without_a_corruption_flag() {
        let mut spec = small().clean();
        spec.p_speckle = 1.0;
        let f = generate_fixture(&spec, 8).unwrap();
        assert!(f.records.iter().all(|r| r.corruption.is_none()));
        let split = split_dataset(f.split(Split::Train), 0.5).unwrap();
        let ious: Vec<f64> = split
            .simple
            .iter()
            .map(|s| image_iou(s.record.ground_truth.as_ref().unwrap(), &s.pseudo, s.tag).unwrap().unwrap())
            .collect();
        assert!(ious.iter().all(|&v| v > 0.5), "{ious:?}");
        assert!(ious.iter().filter(|&&v| v < 1.0).count() * 2 > ious.len(), "{ious:?}");
        // validation masks stay clean
        let val = split_dataset(f.split(Split::Val), 0.5).unwrap();
        for s in &val.simple {
            assert_eq!(image_iou(s.record.ground_truth.as_ref().unwrap(), &s.pseudo, s.tag).unwrap(), Some(1.0));
        }
    }

    #[test]
    fn extra_blob_adds_a_wrong_region_everywhere() {
        let mut spec = small().clean();
        spec.p_extra_blob = 1.0;
        let f = generate_fixture(&spec, 5).unwrap();
        for r in f.records.iter().filter(|r| r.split == Split::Train && r.record.is_simple()) {
            let rec = &r.record;
            let gt = rec.ground_truth.as_ref().unwrap();
            let sal = rec.saliency.as_ref().unwrap();
            let wrong = sal
                .as_slice()
                .iter()
                .zip(gt.as_slice())
                .filter(|(&s, &g)| s >= 0.5 && g == BACKGROUND)
                .count();
            assert!(wrong > 0, "{}", rec.id);
            assert_eq!(r.corruption, Some(Corruption::ExtraBlob));
        }
    }

    #[test]
    fn complex_images_carry_several_tags() {
        let f = generate_fixture(&small(), 1).unwrap();
        for r in &f.records {
            let n = r.record.tags.len();
            if r.record.id.starts_with("tc") || r.record.id.starts_with("vc") {
                assert!(n >= 2 && r.record.saliency.is_none());
            } else {
                assert!(n == 1 && r.record.saliency.is_some());
            }
        }
    }

    #[test]
    fn written_dataset_reads_back_identically_and_is_byte_stable() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let f = make_synthetic_dataset(&small(), 11, a.path()).unwrap();
        make_synthetic_dataset(&small(), 11, b.path()).unwrap();
        for sub in ["tags.txt", "corruptions.json", "meta.json", "images/ts0003.png", "saliency/ts0003.png", "gt/vc0001.png"] {
            assert_eq!(std::fs::read(a.path().join(sub)).unwrap(), std::fs::read(b.path().join(sub)).unwrap(), "{sub}");
        }
        let train = load_split(a.path(), "train").unwrap();
        assert_eq!(train.records, f.split(Split::Train));
        let val = load_split(a.path(), "val").unwrap();
        assert_eq!(val.records, f.split(Split::Val));
        let flags = read_corruption_flags(a.path()).unwrap();
        assert_eq!(flags, f.flags());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small();
        s.p_dilation = 0.6;
        s.p_erosion = 0.6;
        assert!(matches!(generate_fixture(&s, 0), Err(Error::InvalidSpec(_))));
        let s = FixtureSpec { num_classes: 1, ..small() };
        assert!(matches!(generate_fixture(&s, 0), Err(Error::InvalidSpec(_))));
        let s = FixtureSpec { simple_radius: (0.3, 0.2), ..small() };
        assert!(matches!(generate_fixture(&s, 0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn corruptions_lower_pseudo_label_quality() {
        let spec = FixtureSpec {
            train_simple: 80,
            p_speckle: 0.0,
            ..small()
        };
        let f = generate_fixture(&spec, 2).unwrap();
        for (id, flag) in f.flags() {
            if flag.split != Split::Train || !id.starts_with("ts") {
                continue;
            }
            let iou = flag.pseudo_iou.unwrap();
            match flag.corruption {
                None => assert_eq!(iou, 1.0),
                Some(Corruption::Misplaced) => assert!(iou < 0.5, "{id}: {iou}"),
                Some(_) => assert!(iou < 1.0, "{id}: {iou}"),
            }
        }
    }
}
