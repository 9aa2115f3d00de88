//! Simple-to-complex input alignment: synthesize multi-class training pairs
//! from two single-class images with a box mask.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{LabelMap, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BoxRegion {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, h: usize, w: usize) -> bool {
        h >= self.top && h < self.top + self.height && w >= self.left && w < self.left + self.width
    }
}

/// Binary selector: `1` takes the first source, `0` the second.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixMask {
    height: usize,
    width: usize,
    mask: Vec<u8>,
    region: Option<BoxRegion>,
}

impl MixMask {
    pub fn from_box(height: usize, width: usize, region: BoxRegion) -> Result<Self> {
        if region.top + region.height > height || region.left + region.width > width {
            return Err(Error::shape("box leaves the image"));
        }
        let mask = (0..height * width)
            .map(|p| u8::from(region.contains(p / width, p % width)))
            .collect();
        Ok(Self {
            height,
            width,
            mask,
            region: Some(region),
        })
    }

    /// Arbitrary binary mask, used for the identity cases and complements.
    pub fn from_mask(height: usize, width: usize, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != height * width || mask.iter().any(|&m| m > 1) {
            return Err(Error::shape("mix mask must be a binary H×W map"));
        }
        Ok(Self {
            height,
            width,
            mask,
            region: None,
        })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::from_mask(height, width, vec![1; height * width]).expect("valid")
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::from_mask(height, width, vec![0; height * width]).expect("valid")
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            mask: self.mask.iter().map(|&m| 1 - m).collect(),
            region: None,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn region(&self) -> Option<BoxRegion> {
        self.region
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.mask
    }
}

/// Samples a box whose area fraction lies in `[lo, hi]`.
///
/// A target fraction is drawn uniformly from the range together with a
/// log-uniform aspect ratio in `[1/2, 2]`; if rounding pushes the box out of
/// range, the feasible size closest to the target area is used instead. The
/// box position is uniform over all placements inside the image.
pub fn sample_mix_mask(
    height: usize,
    width: usize,
    area_fraction: (f64, f64),
    rng: &mut impl Rng,
) -> Result<MixMask> {
    let (lo, hi) = area_fraction;
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        return Err(Error::InvalidRange(format!(
            "area fraction range ({lo}, {hi}) needs 0 < lo <= hi < 1"
        )));
    }
    let total = (height * width) as f64;
    let in_range = |a: usize| {
        let f = a as f64 / total;
        f >= lo - 1e-12 && f <= hi + 1e-12 && a > 0 && a < height * width
    };
    let target = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let aspect = (rng.random_range(-1.0f64..=1.0) * std::f64::consts::LN_2).exp();
    let area = target * total;
    let bh = ((area * aspect).sqrt().round() as usize).clamp(1, height);
    let bw = ((area / bh as f64).round() as usize).clamp(1, width);
    let (bh, bw) = if in_range(bh * bw) {
        (bh, bw)
    } else {
        let mut best: Option<(f64, usize, usize)> = None;
        for h in 1..=height {
            for w in 1..=width {
                if !in_range(h * w) {
                    continue;
                }
                let gap = ((h * w) as f64 - area).abs() + 1e-9 * (h as f64 - w as f64).abs();
                if best.is_none_or(|(g, _, _)| gap < g) {
                    best = Some((gap, h, w));
                }
            }
        }
        let (_, h, w) = best.ok_or_else(|| {
            Error::InvalidRange(format!(
                "no box on {height}x{width} has area fraction in [{lo}, {hi}]"
            ))
        })?;
        (h, w)
    };
    let top = rng.random_range(0..=height - bh);
    let left = rng.random_range(0..=width - bw);
    MixMask::from_box(
        height,
        width,
        BoxRegion {
            top,
            left,
            height: bh,
            width: bw,
        },
    )
}

/// One side of a mix.
#[derive(Debug, Clone, Copy)]
pub struct MixSource<'a> {
    pub id: &'a str,
    pub image: &'a RgbImage,
    pub label: &'a LabelMap,
    pub tags: &'a BTreeSet<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub image: RgbImage,
    pub label: LabelMap,
    pub tags: BTreeSet<u8>,
    pub sources: (String, String),
}

/// `x̃ = M⊙x_A + (1−M)⊙x_B`, `ỹ = M⊙y_A + (1−M)⊙y_B`, tags united.
pub fn cutmix(a: MixSource<'_>, b: MixSource<'_>, mask: &MixMask) -> Result<SyntheticPair> {
    let dims = mask.dims();
    for (what, d) in [
        ("image A", a.image.dims()),
        ("image B", b.image.dims()),
        ("label A", a.label.dims()),
        ("label B", b.label.dims()),
    ] {
        if d != dims {
            return Err(Error::shape(format!("cutmix {what}: {d:?} vs mask {dims:?}")));
        }
    }
    let (h, w) = dims;
    let plane = h * w;
    let m = mask.as_slice();
    let mut image = Vec::with_capacity(3 * plane);
    for c in 0..3 {
        let xa = &a.image.as_slice()[c * plane..(c + 1) * plane];
        let xb = &b.image.as_slice()[c * plane..(c + 1) * plane];
        image.extend((0..plane).map(|p| if m[p] == 1 { xa[p] } else { xb[p] }));
    }
    let label = (0..plane)
        .map(|p| {
            if m[p] == 1 {
                a.label.as_slice()[p]
            } else {
                b.label.as_slice()[p]
            }
        })
        .collect();
    Ok(SyntheticPair {
        image: RgbImage::new(h, w, image)?,
        label: LabelMap::new(h, w, label)?,
        tags: a.tags.union(b.tags).copied().collect(),
        sources: (a.id.to_string(), b.id.to_string()),
    })
}
