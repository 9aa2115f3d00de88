//! Dense per-pixel containers shared by every stage of the pipeline.
//!
//! All maps are row-major. Multi-channel maps are stored planar
//! (channel, row, column), which is the layout the network consumes.

use crate::error::{Error, Result};

/// Background class id.
pub const BACKGROUND: u8 = 0;
/// Reserved label id excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// Per-pixel class ids in `{0..C-1} ∪ {IGNORE}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

/// Saliency-derived supervision target. Same representation as any label map.
pub type PseudoLabelMap = LabelMap;

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "label data has {} entries for {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    /// Builds a map from nested rows; handy in tests.
    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::shape("ragged label rows"));
        }
        Self::new(height, width, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, h: usize, w: usize) -> u8 {
        self.data[h * self.width + w]
    }

    pub fn set(&mut self, h: usize, w: usize, value: u8) {
        self.data[h * self.width + w] = value;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    /// Sorted distinct ids present in the map, IGNORE included if present.
    pub fn support(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| seen[v as usize]).collect()
    }

    pub(crate) fn check_same_dims(&self, other: (usize, usize), what: &str) -> Result<()> {
        if self.dims() != other {
            return Err(Error::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.0, other.1
            )));
        }
        Ok(())
    }
}

/// Class-agnostic salience in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "saliency has {} entries for {height}x{width}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range {
                what: "saliency",
                value: f64::from(*v),
                range: "[0, 1]".into(),
            });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::shape("ragged saliency rows"));
        }
        Self::new(height, width, rows.concat())
    }

    /// 8-bit grayscale mapped to `[0, 1]` by dividing by 255.
    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, h: usize, w: usize) -> f32 {
        self.values[h * self.width + w]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }
}

/// Three-channel image with intensities in `[0, 1]`, stored planar.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, planar: Vec<f32>) -> Result<Self> {
        if planar.len() != 3 * height * width {
            return Err(Error::shape(format!(
                "image has {} values for 3x{height}x{width}",
                planar.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data: planar,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data[(c * self.height + h) * self.width + w]
    }

    pub fn set(&mut self, c: usize, h: usize, w: usize, v: f32) {
        self.data[(c * self.height + h) * self.width + w] = v;
    }

    pub fn pixel(&self, h: usize, w: usize) -> [f32; 3] {
        [self.get(0, h, w), self.get(1, h, w), self.get(2, h, w)]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Per-pixel class probabilities, stored planar as (class, row, column).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    classes: usize,
    height: usize,
    width: usize,
    probs: Vec<f32>,
}

impl ProbabilityMap {
    /// Tolerance on the per-pixel channel sum.
    pub const SIMPLEX_TOL: f64 = 1e-5;

    /// Wraps raw planar probabilities without validating the simplex.
    pub fn from_planar(classes: usize, height: usize, width: usize, probs: Vec<f32>) -> Result<Self> {
        if probs.len() != classes * height * width {
            return Err(Error::shape(format!(
                "probability map has {} values for {classes}x{height}x{width}",
                probs.len()
            )));
        }
        Ok(Self {
            classes,
            height,
            width,
            probs,
        })
    }

    /// Per-pixel softmax of planar logits.
    pub fn softmax(classes: usize, height: usize, width: usize, logits: &[f32]) -> Result<Self> {
        let plane = height * width;
        if logits.len() != classes * plane {
            return Err(Error::shape("logit plane size"));
        }
        let mut probs = vec![0.0f32; logits.len()];
        for p in 0..plane {
            let max = (0..classes)
                .map(|c| logits[c * plane + p])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for c in 0..classes {
                let e = (logits[c * plane + p] - max).exp();
                probs[c * plane + p] = e;
                sum += e;
            }
            for c in 0..classes {
                probs[c * plane + p] /= sum;
            }
        }
        Ok(Self {
            classes,
            height,
            width,
            probs,
        })
    }

    /// One-hot map of `labels`; IGNORE pixels become all-zero columns.
    pub fn one_hot_of(labels: &LabelMap, classes: usize) -> Result<Self> {
        let (height, width) = labels.dims();
        let plane = height * width;
        let mut probs = vec![0.0f32; classes * plane];
        for (p, &l) in labels.as_slice().iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            if l as usize >= classes {
                return Err(Error::ClassRange {
                    id: l as usize,
                    classes,
                });
            }
            probs[l as usize * plane + p] = 1.0;
        }
        Ok(Self {
            classes,
            height,
            width,
            probs,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f32 {
        self.probs[(c * self.height + h) * self.width + w]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.probs
    }

    /// Fails with `Simplex` if any pixel's channel vector is negative or
    /// does not sum to one within [`Self::SIMPLEX_TOL`].
    pub fn validate_simplex(&self) -> Result<()> {
        let plane = self.height * self.width;
        for p in 0..plane {
            let mut sum = 0.0f64;
            for c in 0..self.classes {
                let v = f64::from(self.probs[c * plane + p]);
                if v < 0.0 || !v.is_finite() {
                    return Err(Error::Simplex { pixel: p, sum: v });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > Self::SIMPLEX_TOL {
                return Err(Error::Simplex { pixel: p, sum });
            }
        }
        Ok(())
    }

    /// Per-pixel argmax; ties resolve to the lowest class id.
    pub fn argmax(&self) -> LabelMap {
        let plane = self.height * self.width;
        let data = (0..plane)
            .map(|p| {
                let mut best = 0usize;
                for c in 1..self.classes {
                    if self.probs[c * plane + p] > self.probs[best * plane + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            data,
        }
    }
}
