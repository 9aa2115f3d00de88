//! Online image-level noise filtering with class-adaptive thresholds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{LabelMap, ProbabilityMap, RgbImage};
use crate::metrics::{noise_iou, ConfusionMatrix, NoiseIouScope};

/// Anything that can label an image pixelwise. The trainer's network
/// implements it; tests plug in scripted predictors.
pub trait Segmenter {
    fn predict_labels(&self, image: &RgbImage) -> Result<LabelMap>;
}

/// Per-class thresholds `T_c = clip(1 − (a_c − α), 0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassThresholdTable {
    pub alpha: f64,
    pub thresholds: BTreeMap<u8, f64>,
    pub computed_at_step: usize,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Range {
            what: "alpha",
            value: alpha,
            range: "[0, 1)".into(),
        });
    }
    Ok(())
}

impl ClassThresholdTable {
    /// Builds the table from a dataset-level confusion matrix of predictions
    /// against pseudo labels. Classes with undefined IoU get `T_c = 1`.
    pub fn from_confusion(cm: &ConfusionMatrix, alpha: f64, step: usize) -> Result<Self> {
        check_alpha(alpha)?;
        let report = cm.iou_report();
        let thresholds = report
            .per_class
            .iter()
            .enumerate()
            .map(|(c, a)| {
                let t = a.map_or(1.0, |a| threshold_for(a, alpha));
                (c as u8, t)
            })
            .collect();
        Ok(Self {
            alpha,
            thresholds,
            computed_at_step: step,
        })
    }

    pub fn get(&self, class_id: u8) -> Result<f64> {
        self.thresholds
            .get(&class_id)
            .copied()
            .ok_or(Error::MissingThreshold(class_id))
    }
}

/// `clip(1 − (a − α), 0, 1)`.
pub fn threshold_for(a: f64, alpha: f64) -> f64 {
    (1.0 - (a - alpha)).clamp(0.0, 1.0)
}

/// Runs `model` over every simple image and derives the threshold table from
/// the dataset-level agreement with the pseudo labels.
pub fn compute_class_thresholds<S: Segmenter + ?Sized>(
    model: &S,
    simple_set: &[(&RgbImage, &LabelMap)],
    classes: usize,
    alpha: f64,
    step: usize,
) -> Result<ClassThresholdTable> {
    check_alpha(alpha)?;
    if simple_set.is_empty() {
        return Err(Error::EmptySet("threshold evaluation needs simple images".into()));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (image, pseudo) in simple_set {
        let pred = model.predict_labels(image)?;
        cm.accumulate(pseudo, &pred)?;
    }
    ClassThresholdTable::from_confusion(&cm, alpha, step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub image_id: String,
    pub noise_ratio: f64,
    pub threshold_used: f64,
    pub kept: bool,
}

/// Noise ratio `1 − IoU(pseudo, argmax prediction)` on the image's tag,
/// compared against that class's threshold.
pub fn filter_image(
    image_id: &str,
    prediction: &ProbabilityMap,
    pseudo: &LabelMap,
    tag: u8,
    table: &ClassThresholdTable,
) -> Result<FilterDecision> {
    filter_labels(
        image_id,
        &prediction.argmax(),
        pseudo,
        tag,
        table,
        NoiseIouScope::Foreground,
    )
}

/// [`filter_image`] on an already-decoded prediction, with a selectable IoU
/// scope. A class absent from both maps counts as perfect agreement.
pub fn filter_labels(
    image_id: &str,
    prediction: &LabelMap,
    pseudo: &LabelMap,
    tag: u8,
    table: &ClassThresholdTable,
    scope: NoiseIouScope,
) -> Result<FilterDecision> {
    let threshold = table.get(tag)?;
    let iou = noise_iou(pseudo, prediction, tag, scope)?.unwrap_or(1.0);
    let noise_ratio = 1.0 - iou;
    Ok(FilterDecision {
        image_id: image_id.to_string(),
        noise_ratio,
        threshold_used: threshold,
        kept: noise_ratio <= threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn threshold_examples() {
        assert!((threshold_for(0.8, 0.1) - 0.3).abs() < 1e-12);
        assert_eq!(threshold_for(1.0, 0.0), 0.0);
        assert_eq!(threshold_for(0.05, 0.1), 1.0);
    }

    fn table(t: f64) -> ClassThresholdTable {
        ClassThresholdTable {
            alpha: 0.1,
            thresholds: [(0, 1.0), (1, t)].into(),
            computed_at_step: 1,
        }
    }

    #[test]
    fn perfect_agreement_is_kept_even_at_zero_threshold() {
        let pseudo = LabelMap::from_rows(&[&[1, 0], &[1, 1]]).unwrap();
        let d = filter_labels("x", &pseudo, &pseudo, 1, &table(0.0), NoiseIouScope::Foreground)
            .unwrap();
        assert_eq!(d.noise_ratio, 0.0);
        assert!(d.kept);
    }

    #[test]
    fn half_overlap_is_dropped_at_point_three() {
        let pseudo = LabelMap::from_rows(&[&[1, 1], &[0, 0]]).unwrap();
        let pred = LabelMap::from_rows(&[&[1, 0], &[0, 0]]).unwrap();
        let d = filter_labels("x", &pred, &pseudo, 1, &table(0.3), NoiseIouScope::Foreground)
            .unwrap();
        assert!((d.noise_ratio - 0.5).abs() < 1e-12);
        assert!(!d.kept);
    }

    #[test]
    fn missing_class_and_empty_set_errors() {
        let pseudo = LabelMap::filled(1, 1, 2);
        assert!(matches!(
            filter_labels("x", &pseudo, &pseudo, 2, &table(0.5), NoiseIouScope::Foreground),
            Err(Error::MissingThreshold(2))
        ));
        struct Echo;
        impl Segmenter for Echo {
            fn predict_labels(&self, image: &RgbImage) -> Result<LabelMap> {
                let (h, w) = image.dims();
                Ok(LabelMap::filled(h, w, 0))
            }
        }
        assert!(matches!(
            compute_class_thresholds(&Echo, &[], 2, 0.1, 1),
            Err(Error::EmptySet(_))
        ));
        assert!(compute_class_thresholds(&Echo, &[], 2, 1.0, 1).is_err());
    }

    #[test]
    fn probability_input_matches_label_input() {
        let probs = ProbabilityMap::from_planar(2, 1, 2, vec![0.9, 0.2, 0.1, 0.8]).unwrap();
        let pseudo = LabelMap::from_rows(&[&[1, 1]]).unwrap();
        let a = filter_image("x", &probs, &pseudo, 1, &table(0.6)).unwrap();
        let b = filter_labels("x", &probs.argmax(), &pseudo, 1, &table(0.6), NoiseIouScope::Foreground)
            .unwrap();
        assert_eq!(a, b);
        assert!(a.kept);
    }

    proptest! {
        #[test]
        fn raising_alpha_only_grows_the_kept_set(
            a in 0.0f64..=1.0,
            alpha1 in 0.0f64..0.99,
            bump in 0.0f64..0.5,
            ratios in proptest::collection::vec(0.0f64..=1.0, 1..40),
        ) {
            let alpha2 = (alpha1 + bump).min(0.999);
            let t1 = threshold_for(a, alpha1);
            let t2 = threshold_for(a, alpha2);
            prop_assert!(t2 >= t1);
            prop_assert!((0.0..=1.0).contains(&t1));
            for r in ratios {
                prop_assert!(!(r <= t1) || r <= t2);
            }
        }
    }
}
