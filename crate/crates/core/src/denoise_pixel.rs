//! Progressive pixel-level noise detection: per-pixel cross-entropy, a
//! loss-threshold mask, a stepwise-decaying threshold, and the masked
//! segmentation loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{LabelMap, ProbabilityMap, IGNORE};
use crate::nn::Scalar;

/// Probabilities are floored here before the log so losses stay finite.
const PROB_FLOOR: f64 = 1e-12;

/// Per-pixel cross-entropy against the pseudo label.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLossMap {
    height: usize,
    width: usize,
    losses: Vec<f64>,
    valid: Vec<bool>,
}

impl PixelLossMap {
    pub fn new(height: usize, width: usize, losses: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if losses.len() != height * width || valid.len() != height * width {
            return Err(Error::shape("pixel loss map size"));
        }
        if losses.iter().zip(&valid).any(|(l, &v)| v && (!l.is_finite() || *l < 0.0)) {
            return Err(Error::Numerical("invalid pixel loss".into()));
        }
        Ok(Self {
            height,
            width,
            losses,
            valid,
        })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        let losses = rows.concat();
        let valid = vec![true; losses.len()];
        Self::new(h, w, losses, valid)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Marks every pixel invalid, as for an image dropped by image-level
    /// filtering.
    pub fn invalidate_all(&mut self) {
        self.valid.iter_mut().for_each(|v| *v = false);
    }
}

/// `1` keeps a pixel, `0` marks it noisy or invalid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoisePixelMask {
    height: usize,
    width: usize,
    mask: Vec<u8>,
}

impl NoisePixelMask {
    pub fn new(height: usize, width: usize, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != height * width || mask.iter().any(|&m| m > 1) {
            return Err(Error::shape("noise mask must be a binary H×W map"));
        }
        Ok(Self { height, width, mask })
    }

    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        Self::new(h, w, rows.concat())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.mask
    }

    pub fn kept(&self) -> usize {
        self.mask.iter().map(|&m| m as usize).sum()
    }
}

/// How the per-decrement step ΔT is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// `ΔT = (T_h − T_l) / ⌊(t_max − t_w) / t_s⌋`: reaches `T_l` at `t_max`.
    #[default]
    PerStep,
    /// `ΔT = (T_h − T_l) / (t_max − t_w)`, as the formula reads verbatim.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub warmup: usize,
    pub max_steps: usize,
    pub stride: usize,
    pub high: f64,
    pub low: f64,
    #[serde(default)]
    pub mode: ScheduleMode,
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        Self {
            warmup: 1000,
            max_steps: 11000,
            stride: 1000,
            high: 1.2,
            low: 0.8,
            mode: ScheduleMode::PerStep,
        }
    }
}

impl ThresholdSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::config("t_s", "must be positive"));
        }
        if self.warmup >= self.max_steps {
            return Err(Error::config("t_w", "must be smaller than t_max"));
        }
        if !(self.high > self.low && self.low > 0.0) {
            return Err(Error::config("T_h", "need T_h > T_l > 0"));
        }
        if self.mode == ScheduleMode::PerStep && (self.max_steps - self.warmup) < self.stride {
            return Err(Error::config("t_s", "must not exceed t_max - t_w"));
        }
        Ok(())
    }

    /// Number of decrements between warm-up and `t_max` under per-step mode.
    pub fn decrements(&self) -> usize {
        (self.max_steps - self.warmup) / self.stride
    }

    pub fn delta(&self) -> f64 {
        match self.mode {
            ScheduleMode::PerStep => (self.high - self.low) / self.decrements() as f64,
            ScheduleMode::Literal => (self.high - self.low) / (self.max_steps - self.warmup) as f64,
        }
    }

    /// Threshold at iteration `t` (1-based); `+∞` during warm-up.
    pub fn current_threshold(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.max_steps {
            return Err(Error::Range {
                what: "t",
                value: t as f64,
                range: format!("1..={}", self.max_steps),
            });
        }
        if t <= self.warmup {
            return Ok(f64::INFINITY);
        }
        let k = (t - self.warmup) / self.stride;
        if self.mode == ScheduleMode::PerStep && k >= self.decrements() {
            return Ok(self.low);
        }
        Ok((self.high - k as f64 * self.delta()).max(self.low))
    }
}

/// `−log p(y)` at every labeled pixel; IGNORE pixels are invalid.
pub fn pixel_losses(prediction: &ProbabilityMap, pseudo: &LabelMap) -> Result<PixelLossMap> {
    pseudo.check_same_dims(prediction.dims(), "pixel_losses")?;
    prediction.validate_simplex()?;
    let classes = prediction.classes();
    let (h, w) = pseudo.dims();
    let plane = h * w;
    let probs = prediction.as_slice();
    let mut losses = vec![0.0; plane];
    let mut valid = vec![false; plane];
    for (p, &y) in pseudo.as_slice().iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        if y as usize >= classes {
            return Err(Error::ClassRange {
                id: y as usize,
                classes,
            });
        }
        let py = f64::from(probs[y as usize * plane + p]).max(PROB_FLOOR);
        losses[p] = -py.ln();
        valid[p] = true;
    }
    PixelLossMap::new(h, w, losses, valid)
}

/// Keeps valid pixels whose loss does not exceed `threshold`.
pub fn noise_mask(losses: &PixelLossMap, threshold: f64) -> NoisePixelMask {
    let mask = losses
        .losses
        .iter()
        .zip(&losses.valid)
        .map(|(&l, &v)| u8::from(v && !(l > threshold)))
        .collect();
    NoisePixelMask {
        height: losses.height,
        width: losses.width,
        mask,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss {
    pub value: f64,
    /// Number of pixels that contributed.
    pub kept: usize,
    /// Set when nothing was kept; `value` is then 0 and carries no gradient.
    pub all_masked: bool,
}

/// `Σ(mask·loss) / Σ(mask)`.
pub fn masked_seg_loss(losses: &PixelLossMap, mask: &NoisePixelMask) -> Result<MaskedLoss> {
    masked_seg_loss_pooled(&[(losses, mask)])
}

/// The same ratio with numerator and denominator pooled over many images.
pub fn masked_seg_loss_pooled(pairs: &[(&PixelLossMap, &NoisePixelMask)]) -> Result<MaskedLoss> {
    let mut sum = 0.0;
    let mut kept = 0usize;
    for (losses, mask) in pairs {
        if losses.dims() != mask.dims() {
            return Err(Error::shape("loss map and mask differ in size"));
        }
        for ((&l, &v), &m) in losses.losses.iter().zip(&losses.valid).zip(&mask.mask) {
            if m == 1 && v {
                sum += l;
                kept += 1;
            }
        }
    }
    if kept == 0 {
        return Ok(MaskedLoss {
            value: 0.0,
            kept: 0,
            all_masked: true,
        });
    }
    Ok(MaskedLoss {
        value: sum / kept as f64,
        kept,
        all_masked: false,
    })
}

/// Adds the gradient of the pooled masked loss with respect to the pre-softmax
/// logits of one image: `mask·(p − onehot(y)) / kept_total`. The mask is a
/// constant; no gradient flows through the selection.
pub fn masked_ce_logit_grad<T: Scalar>(
    probs: &[T],
    classes: usize,
    labels: &[u8],
    mask: &[u8],
    kept_total: usize,
    grad: &mut [T],
) {
    let plane = labels.len();
    debug_assert_eq!(probs.len(), classes * plane);
    if kept_total == 0 {
        return;
    }
    let scale = T::one() / T::of(kept_total as f64);
    for (p, (&y, &m)) in labels.iter().zip(mask).enumerate() {
        if m == 0 || y == IGNORE {
            continue;
        }
        for c in 0..classes {
            let target = if c == y as usize { T::one() } else { T::zero() };
            grad[c * plane + p] += scale * (probs[c * plane + p] - target);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probs_from(classes: usize, h: usize, w: usize, vals: Vec<f32>) -> ProbabilityMap {
        ProbabilityMap::from_planar(classes, h, w, vals).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        // p(true) = 1 and p(true) = 1/e
        let e1 = (-1.0f32).exp();
        let p = probs_from(2, 1, 2, vec![1.0, 1.0 - e1, 0.0, e1]);
        let labels = LabelMap::from_rows(&[&[0, 1]]).unwrap();
        let l = pixel_losses(&p, &labels).unwrap();
        assert_eq!(l.losses()[0], 0.0);
        assert!((l.losses()[1] - 1.0).abs() < 1e-6);
        // uniform over 4 classes
        let u = probs_from(4, 2, 2, vec![0.25; 16]);
        let l = pixel_losses(&u, &LabelMap::from_rows(&[&[0, 1], &[2, 3]]).unwrap()).unwrap();
        for &v in l.losses() {
            assert!((v - 4f64.ln()).abs() < 1e-7);
        }
    }

    #[test]
    fn ignore_pixels_are_invalid_and_simplex_is_checked() {
        let p = probs_from(2, 1, 2, vec![0.5, 0.5, 0.5, 0.5]);
        let l = pixel_losses(&p, &LabelMap::from_rows(&[&[IGNORE, 1]]).unwrap()).unwrap();
        assert_eq!(l.valid(), &[false, true]);
        let bad = probs_from(2, 1, 1, vec![0.5, 0.6]);
        assert!(matches!(
            pixel_losses(&bad, &LabelMap::filled(1, 1, 0)),
            Err(Error::Simplex { .. })
        ));
        assert!(matches!(
            pixel_losses(&p, &LabelMap::filled(2, 1, 0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn schedule_examples() {
        let s = ThresholdSchedule::default();
        s.validate().unwrap();
        assert_eq!(s.current_threshold(500).unwrap(), f64::INFINITY);
        assert_eq!(s.current_threshold(1000).unwrap(), f64::INFINITY);
        assert_eq!(s.current_threshold(1500).unwrap(), 1.2);
        assert!((s.delta() - 0.04).abs() < 1e-15);
        assert!((s.current_threshold(5500).unwrap() - 1.04).abs() < 1e-12);
        assert_eq!(s.current_threshold(11000).unwrap(), 0.8);
        assert!(s.current_threshold(0).is_err());
        assert!(s.current_threshold(11001).is_err());
    }

    #[test]
    fn literal_schedule_barely_moves() {
        let s = ThresholdSchedule {
            mode: ScheduleMode::Literal,
            ..Default::default()
        };
        assert!((s.delta() - 4e-5).abs() < 1e-15);
        assert!((s.current_threshold(11000).unwrap() - (1.2 - 10.0 * 4e-5)).abs() < 1e-12);
    }

    #[test]
    fn schedule_validation() {
        let bad = ThresholdSchedule {
            warmup: 11000,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ThresholdSchedule {
            high: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mask_and_masked_loss_examples() {
        let l = PixelLossMap::from_rows(&[&[0.5, 1.5], &[1.0, 2.0]]).unwrap();
        let m = noise_mask(&l, 1.2);
        assert_eq!(m, NoisePixelMask::from_rows(&[&[1, 0], &[1, 0]]).unwrap());
        let r = masked_seg_loss(&l, &m).unwrap();
        assert!((r.value - 0.75).abs() < 1e-15);
        let all = noise_mask(&l, f64::INFINITY);
        assert_eq!(all.kept(), 4);
        assert!((masked_seg_loss(&l, &all).unwrap().value - 1.25).abs() < 1e-15);
        let none = noise_mask(&l, 0.1);
        assert_eq!(none.kept(), 0);
        let r = masked_seg_loss(&l, &none).unwrap();
        assert!(r.all_masked && r.value == 0.0);
    }

    #[test]
    fn invalid_pixels_never_survive_the_mask() {
        let mut l = PixelLossMap::from_rows(&[&[0.1, 0.2]]).unwrap();
        l.invalidate_all();
        assert_eq!(noise_mask(&l, f64::INFINITY).kept(), 0);
    }

    proptest! {
        #[test]
        fn schedule_is_nonincreasing(tw in 1usize..50, span in 1usize..20, ts in 1usize..10, hi in 0.5f64..3.0, gap in 0.01f64..0.5) {
            let s = ThresholdSchedule { warmup: tw, max_steps: tw + span * ts, stride: ts, high: hi, low: hi - gap.min(hi - 0.01), mode: ScheduleMode::PerStep };
            let mut prev = f64::INFINITY;
            for t in 1..=s.max_steps {
                let v = s.current_threshold(t).unwrap();
                prop_assert!(v <= prev);
                prev = v;
            }
            if ts > 1 {
                prop_assert_eq!(s.current_threshold(tw + 1).unwrap(), hi);
                prop_assert_eq!(s.current_threshold(tw + ts - 1).unwrap(), hi);
            }
            prop_assert_eq!(s.current_threshold(s.max_steps).unwrap(), s.low);
        }

        #[test]
        fn mask_is_monotone_and_loss_bounded(vals in proptest::collection::vec(0.0f64..3.0, 16), t1 in 0.1f64..3.0, dt in 0.0f64..1.0) {
            let l = PixelLossMap::new(4, 4, vals, vec![true; 16]).unwrap();
            let lo = noise_mask(&l, t1);
            let hi = noise_mask(&l, t1 + dt);
            for (a, b) in lo.as_slice().iter().zip(hi.as_slice()) {
                prop_assert!(a <= b);
            }
            let r = masked_seg_loss(&l, &lo).unwrap();
            if !r.all_masked {
                prop_assert!(r.value <= t1);
            }
        }
    }
}
