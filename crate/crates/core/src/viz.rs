//! Side-by-side inspection panels.

use crate::denoise_pixel::{noise_mask, pixel_losses};
use crate::error::{Error, Result};
use crate::maps::{LabelMap, ProbabilityMap, RgbImage, IGNORE};

/// Panels per image in [`inspection_strip`].
pub const PANELS: usize = 4;
const GAP: usize = 2;

/// Bit-interleaved palette: distinct colors for small ids, black background.
pub fn class_color(id: u8) -> [f32; 3] {
    if id == IGNORE {
        return [1.0; 3];
    }
    let mut rgb = [0u8; 3];
    let mut c = id;
    for j in 0..8 {
        for (k, ch) in rgb.iter_mut().enumerate() {
            *ch |= ((c >> k) & 1) << (7 - j);
        }
        c >>= 3;
    }
    rgb.map(|v| f32::from(v) / 255.0)
}

pub fn colorize(labels: &LabelMap) -> RgbImage {
    let (h, w) = labels.dims();
    let mut img = RgbImage::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let col = class_color(labels.get(y, x));
            for (c, v) in col.into_iter().enumerate() {
                img.set(c, y, x, v);
            }
        }
    }
    img
}

/// Panels of equal size laid out left to right with a white gap.
pub fn hstack(panels: &[RgbImage]) -> Result<RgbImage> {
    let first = panels.first().ok_or_else(|| Error::EmptySet("no panels".into()))?;
    let (h, w) = first.dims();
    if panels.iter().any(|p| p.dims() != (h, w)) {
        return Err(Error::shape("panels differ in size"));
    }
    let total = panels.len() * w + (panels.len() - 1) * GAP;
    let mut out = RgbImage::new(h, total, vec![1.0; 3 * h * total])?;
    for (k, p) in panels.iter().enumerate() {
        let x0 = k * (w + GAP);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x0 + x, p.get(c, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Keep mask as an image: white where the pixel enters the loss, black where
/// it is masked, gray where the label is IGNORE.
pub fn mask_panel(prediction: &ProbabilityMap, pseudo: &LabelMap, threshold: f64) -> Result<RgbImage> {
    let losses = pixel_losses(prediction, pseudo)?;
    let mask = noise_mask(&losses, threshold);
    let (h, w) = pseudo.dims();
    let mut img = RgbImage::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let v = if pseudo.get(y, x) == IGNORE {
                0.5
            } else {
                f32::from(mask.as_slice()[y * w + x])
            };
            for c in 0..3 {
                img.set(c, y, x, v);
            }
        }
    }
    Ok(img)
}

/// Input, pseudo label, prediction and pixel-noise mask at `threshold`.
pub fn inspection_strip(
    image: &RgbImage,
    pseudo: &LabelMap,
    prediction: &ProbabilityMap,
    threshold: f64,
) -> Result<RgbImage> {
    if image.dims() != pseudo.dims() || image.dims() != prediction.dims() {
        return Err(Error::shape("image, label and prediction differ in size"));
    }
    hstack(&[
        image.clone(),
        colorize(pseudo),
        colorize(&prediction.argmax()),
        mask_panel(prediction, pseudo, threshold)?,
    ])
}
