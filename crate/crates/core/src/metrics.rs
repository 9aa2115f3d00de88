//! Confusion-matrix accumulation, per-class IoU and mIoU, and the per-image
//! IoU that drives the noise ratio of image-level filtering.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{LabelMap, IGNORE};

/// `counts[i][j]` = pixels with reference class `i` predicted as class `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds the joint pixel counts of one (reference, prediction) pair.
    /// IGNORE reference pixels are skipped.
    pub fn accumulate(&mut self, reference: &LabelMap, prediction: &LabelMap) -> Result<()> {
        reference.check_same_dims(prediction.dims(), "accumulate")?;
        let c = self.classes;
        // validate first so a failed call leaves the matrix untouched
        for (&r, &p) in reference.as_slice().iter().zip(prediction.as_slice()) {
            if r == IGNORE {
                continue;
            }
            if r as usize >= c {
                return Err(Error::ClassRange { id: r as usize, classes: c });
            }
            if p as usize >= c {
                return Err(Error::ClassRange { id: p as usize, classes: c });
            }
        }
        for (&r, &p) in reference.as_slice().iter().zip(prediction.as_slice()) {
            if r != IGNORE {
                self.counts[r as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Entrywise sum with an independently accumulated partial matrix.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape(format!(
                "merging {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `IoU_c = TP / (TP + FP + FN)`, undefined when the denominator is zero.
    pub fn iou_report(&self) -> ClassIoUReport {
        let c = self.classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..c).filter(|&j| j != k).map(|j| self.get(k, j)).sum();
                let fp: u64 = (0..c).filter(|&i| i != k).map(|i| self.get(i, k)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        ClassIoUReport::from_per_class(per_class)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIoUReport {
    /// IoU per class id; `None` where the class never appears.
    pub per_class: Vec<Option<f64>>,
    /// Mean over defined classes; `None` if no class is defined.
    pub miou: Option<f64>,
}

impl ClassIoUReport {
    pub fn from_per_class(per_class: Vec<Option<f64>>) -> Self {
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Self { per_class, miou }
    }

    /// One line per class `<name> <IoU>`, then `mIoU <value>`.
    /// Undefined values are written as `undefined`.
    pub fn render(&self, class_names: &[String]) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
        let mut out = String::new();
        for (k, v) in self.per_class.iter().enumerate() {
            let name = class_names.get(k).cloned().unwrap_or_else(|| format!("class{k}"));
            let _ = writeln!(out, "{name} {}", fmt(*v));
        }
        let _ = writeln!(out, "mIoU {}", fmt(self.miou));
        out
    }

    pub fn write(&self, class_names: &[String], path: &Path) -> Result<()> {
        std::fs::write(path, self.render(class_names)).map_err(|e| Error::io(path, e))
    }

    /// Parses the text produced by [`Self::render`].
    pub fn parse(text: &str) -> Result<(Vec<String>, Self)> {
        let mut names = Vec::new();
        let mut per_class = Vec::new();
        let mut miou = None;
        let mut saw_miou = false;
        for (i, line) in text.lines().enumerate() {
            let (name, value) = line.rsplit_once(' ').ok_or_else(|| Error::MalformedIndex {
                line: i + 1,
                reason: "expected `<name> <value>`".into(),
            })?;
            let v = if value == "undefined" {
                None
            } else {
                Some(value.parse::<f64>().map_err(|e| Error::MalformedIndex {
                    line: i + 1,
                    reason: e.to_string(),
                })?)
            };
            if name == "mIoU" {
                miou = v;
                saw_miou = true;
            } else {
                names.push(name.to_string());
                per_class.push(v);
            }
        }
        if !saw_miou {
            return Err(Error::MalformedIndex {
                line: text.lines().count(),
                reason: "missing mIoU line".into(),
            });
        }
        Ok((names, Self { per_class, miou }))
    }
}

/// IoU of a single class within one image. IGNORE reference pixels are not
/// counted. `None` when the class is absent from both maps.
pub fn image_iou(reference: &LabelMap, prediction: &LabelMap, class_id: u8) -> Result<Option<f64>> {
    reference.check_same_dims(prediction.dims(), "image_iou")?;
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&r, &p) in reference.as_slice().iter().zip(prediction.as_slice()) {
        if r == IGNORE {
            continue;
        }
        let a = r == class_id;
        let b = p == class_id;
        inter += u64::from(a && b);
        union += u64::from(a || b);
    }
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

/// Which classes the per-image noise IoU looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseIouScope {
    /// The image's single foreground tag only.
    #[default]
    Foreground,
    /// Mean IoU over every class present in either map (background included).
    All,
}

/// Per-image IoU used by the noise ratio, under the chosen scope.
pub fn noise_iou(
    reference: &LabelMap,
    prediction: &LabelMap,
    tag: u8,
    scope: NoiseIouScope,
) -> Result<Option<f64>> {
    match scope {
        NoiseIouScope::Foreground => image_iou(reference, prediction, tag),
        NoiseIouScope::All => {
            let mut ids: Vec<u8> = reference.support();
            ids.extend(prediction.support());
            ids.sort_unstable();
            ids.dedup();
            let mut vals = Vec::new();
            for id in ids.into_iter().filter(|&i| i != IGNORE) {
                if let Some(v) = image_iou(reference, prediction, id)? {
                    vals.push(v);
                }
            }
            Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
        }
    }
}
