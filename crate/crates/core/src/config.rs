//! Run configuration: every tunable of the pipeline in one flat TOML table.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoise_pixel::{ScheduleMode, ThresholdSchedule};
use crate::error::{Error, Result};
use crate::metrics::NoiseIouScope;

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "MDBA_SEED";

/// The four switchable training mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    /// Image-level online noise filtering.
    Onf,
    /// Pixel-level progressive noise detection.
    Pnd,
    /// Box-mask synthesis of multi-class pairs.
    S2c,
    /// Adversarial alignment of prediction maps.
    C2s,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::Onf, Mechanism::Pnd, Mechanism::S2c, Mechanism::C2s];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Onf => "onf",
            Mechanism::Pnd => "pnd",
            Mechanism::S2c => "s2c",
            Mechanism::C2s => "c2s",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s.trim().to_ascii_lowercase())
    }

    /// Cumulative ablation rows as `(label, ablated mechanisms)`: everything
    /// off, then ONF, PND, S2C and C2S switched on in turn.
    pub fn cumulative_rows() -> Vec<(&'static str, Vec<Mechanism>)> {
        let labels = ["base", "+onf", "+pnd", "+s2c", "+c2s"];
        labels
            .iter()
            .enumerate()
            .map(|(k, &label)| (label, Self::ALL[k..].to_vec()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory (see the data module for the layout).
    pub dataset_root: Option<PathBuf>,
    /// Where logs, reports and checkpoints go.
    pub out_dir: PathBuf,
    pub train_split: String,
    pub val_split: String,
    pub seed: u64,
    /// Saliency values at or above this become foreground.
    pub binarize_threshold: f32,

    pub backbone_stem: usize,
    pub backbone_width: usize,
    pub global_context: bool,

    /// Total iterations; unset means `max(2000, 20·|simple|/batch)`.
    pub t_max: Option<usize>,
    /// Warm-up iterations.
    pub t_w: usize,
    /// Iterations between pixel-threshold decrements.
    pub t_s: usize,
    #[serde(rename = "T_h")]
    pub t_high: f64,
    #[serde(rename = "T_l")]
    pub t_low: f64,
    pub schedule_mode: ScheduleMode,

    /// Slack in the class-adaptive image threshold.
    pub alpha: f64,
    /// Recompute the class thresholds every K iterations after warm-up; 0
    /// keeps the first table.
    pub threshold_refresh_every: usize,
    pub noise_iou_scope: NoiseIouScope,

    pub p_mix: f64,
    pub mix_area_lo: f64,
    pub mix_area_hi: f64,

    pub lambda_adv: f64,
    pub disc_base_channels: usize,
    /// Discriminator updates per generator update.
    pub d_updates_per_step: usize,
    /// Predictions of filtered-out simple images still act as fake samples.
    pub adv_include_dropped: bool,
    /// Predictions of synthetic images act as fake samples.
    pub adv_include_synthetic: bool,
    /// Fill IGNORE pixels of real samples with background instead of zeros.
    pub gt_ignore_fill: bool,

    pub batch_simple: usize,
    pub batch_complex: usize,

    pub lr_g: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lr_power: f64,

    /// Validation every K iterations (0: only at the end).
    pub eval_every: usize,
    /// Checkpoint every K iterations (0: only final and best).
    pub checkpoint_every: usize,

    /// Mechanisms switched off for this run.
    pub ablate: Vec<Mechanism>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: None,
            out_dir: PathBuf::from("runs/default"),
            train_split: "train".into(),
            val_split: "val".into(),
            seed: 0,
            binarize_threshold: crate::data::DEFAULT_BINARIZE_THRESHOLD,
            backbone_stem: 16,
            backbone_width: 32,
            global_context: true,
            t_max: None,
            t_w: 1000,
            t_s: 1000,
            t_high: 1.2,
            t_low: 0.8,
            schedule_mode: ScheduleMode::PerStep,
            alpha: 0.1,
            threshold_refresh_every: 0,
            noise_iou_scope: NoiseIouScope::Foreground,
            p_mix: 0.5,
            mix_area_lo: 0.2,
            mix_area_hi: 0.5,
            lambda_adv: 0.001,
            disc_base_channels: 64,
            d_updates_per_step: 1,
            adv_include_dropped: true,
            adv_include_synthetic: true,
            gt_ignore_fill: true,
            batch_simple: 5,
            batch_complex: 5,
            lr_g: 2.5e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_d: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            lr_power: 0.9,
            eval_every: 0,
            checkpoint_every: 0,
            ablate: Vec::new(),
        }
    }
}

/// Every key with a one-line description, for `--help` output.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("dataset_root", "dataset directory (required for training)"),
    ("out_dir", "run directory for logs, reports and checkpoints"),
    ("train_split", "split file name under splits/ used for training"),
    ("val_split", "split file name under splits/ used for validation"),
    ("seed", "master seed; MDBA_SEED overrides it"),
    ("binarize_threshold", "saliency binarization threshold in (0,1)"),
    ("backbone_stem", "channels of the first convolution"),
    ("backbone_width", "channels of the dilated stages"),
    ("global_context", "add the pooled image context branch"),
    ("t_max", "total iterations (default max(2000, 20*|simple|/batch))"),
    ("t_w", "warm-up iterations"),
    ("t_s", "iterations between pixel threshold decrements"),
    ("T_h", "initial pixel loss threshold"),
    ("T_l", "final pixel loss threshold"),
    ("schedule_mode", "per_step | literal threshold decrement"),
    ("alpha", "slack of the class-adaptive image threshold, [0,1)"),
    ("threshold_refresh_every", "recompute class thresholds every K steps (0 = never)"),
    ("noise_iou_scope", "foreground | all classes in the per-image IoU"),
    ("p_mix", "probability that a simple slot is replaced by a synthetic pair"),
    ("mix_area_lo", "smallest box area fraction"),
    ("mix_area_hi", "largest box area fraction"),
    ("lambda_adv", "weight of the adversarial loss"),
    ("disc_base_channels", "discriminator width of the first stage"),
    ("d_updates_per_step", "discriminator updates per generator update"),
    ("adv_include_dropped", "filtered simple predictions are fake samples"),
    ("adv_include_synthetic", "synthetic predictions are fake samples"),
    ("gt_ignore_fill", "IGNORE pixels of real samples become background"),
    ("batch_simple", "simple images per batch"),
    ("batch_complex", "complex images per batch"),
    ("lr_g", "segmentation network base learning rate (SGD)"),
    ("momentum", "SGD momentum"),
    ("weight_decay", "SGD weight decay"),
    ("lr_d", "discriminator base learning rate (Adam)"),
    ("adam_beta1", "Adam first-moment decay"),
    ("adam_beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("lr_power", "polynomial decay power"),
    ("eval_every", "validation interval in iterations (0 = end only)"),
    ("checkpoint_every", "checkpoint interval in iterations (0 = final/best only)"),
    ("ablate", "mechanisms to disable: onf, pnd, s2c, c2s"),
];

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let key = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("<file>")
                .to_string();
            Error::config(key, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::config("config", format!("{} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Sets one key from its textual value. The value is read as a TOML
    /// literal first and as a bare string otherwise.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("round trip");
        if !KEY_DOCS.iter().any(|(k, _)| *k == key) {
            return Err(Error::config(key, "unknown key"));
        }
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let parsed = match (key, parsed) {
            ("ablate", toml::Value::String(s)) => toml::Value::Array(
                s.split(',')
                    .filter(|p| !p.trim().is_empty())
                    .map(|p| toml::Value::String(p.trim().to_string()))
                    .collect(),
            ),
            (_, v) => v,
        };
        table.insert(key.to_string(), parsed);
        let updated: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(key, e.message().to_string()))?;
        *self = updated;
        Ok(())
    }

    /// Applies `MDBA_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config("seed", format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn enabled(&self, m: Mechanism) -> bool {
        !self.ablate.contains(&m)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_simple + self.batch_complex
    }

    /// `t_max` if set, else the dataset-scaled default.
    pub fn resolved_t_max(&self, simple_count: usize) -> usize {
        self.t_max
            .unwrap_or_else(|| (20 * simple_count / self.batch_size().max(1)).max(2000))
    }

    pub fn schedule(&self, t_max: usize) -> ThresholdSchedule {
        ThresholdSchedule {
            warmup: self.t_w,
            max_steps: t_max,
            stride: self.t_s,
            high: self.t_high,
            low: self.t_low,
            mode: self.schedule_mode,
        }
    }

    /// Checks every value range. Path existence is left to the commands.
    pub fn validate(&self) -> Result<()> {
        fn range(key: &str, ok: bool, msg: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, msg))
            }
        }
        range(
            "binarize_threshold",
            self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0,
            "must lie in (0, 1)",
        )?;
        range("backbone_stem", self.backbone_stem > 0, "must be positive")?;
        range("backbone_width", self.backbone_width > 0, "must be positive")?;
        range("t_s", self.t_s > 0, "must be positive")?;
        range("T_h", self.t_high > self.t_low, "must exceed T_l")?;
        range("T_l", self.t_low > 0.0, "must be positive")?;
        if let Some(t_max) = self.t_max {
            range("t_w", self.t_w < t_max, "must be smaller than t_max")?;
            self.schedule(t_max).validate()?;
        }
        range("alpha", (0.0..1.0).contains(&self.alpha), "must lie in [0, 1)")?;
        range("p_mix", (0.0..=1.0).contains(&self.p_mix), "must lie in [0, 1]")?;
        range(
            "mix_area_lo",
            self.mix_area_lo > 0.0 && self.mix_area_lo <= self.mix_area_hi,
            "need 0 < mix_area_lo <= mix_area_hi",
        )?;
        range("mix_area_hi", self.mix_area_hi < 1.0, "must be below 1")?;
        range("lambda_adv", self.lambda_adv >= 0.0 && self.lambda_adv.is_finite(), "must be >= 0")?;
        range("disc_base_channels", self.disc_base_channels > 0, "must be positive")?;
        range("d_updates_per_step", self.d_updates_per_step > 0, "must be positive")?;
        range("batch_simple", self.batch_simple > 0, "must be positive")?;
        for (key, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("adam_eps", self.adam_eps)] {
            range(key, v > 0.0 && v.is_finite(), "must be positive")?;
        }
        for (key, v) in [
            ("momentum", self.momentum),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            range(key, (0.0..1.0).contains(&v), "must lie in [0, 1)")?;
        }
        range("weight_decay", self.weight_decay >= 0.0, "must be >= 0")?;
        range("lr_power", self.lr_power > 0.0, "must be positive")?;
        Ok(())
    }

    /// Requires `dataset_root` to be set and present.
    pub fn require_dataset(&self) -> Result<&Path> {
        let root = self
            .dataset_root
            .as_deref()
            .ok_or_else(|| Error::config("dataset_root", "not set"))?;
        if !root.is_dir() {
            return Err(Error::config(
                "dataset_root",
                format!("{} is not a directory", root.display()),
            ));
        }
        Ok(root)
    }

    /// Short schedule sized for the synthetic fixture on a CPU.
    pub fn desk() -> Self {
        Self {
            t_max: Some(2000),
            t_w: 800,
            t_s: 200,
            lr_g: 0.01,
            disc_base_channels: 16,
            ..Self::default()
        }
    }

    /// Configuration of the retraining step: plain cross-entropy plus the
    /// classification loss, every denoising and alignment mechanism off.
    pub fn second_step(&self) -> Self {
        let mut c = self.clone();
        c.ablate = Mechanism::ALL.to_vec();
        c.lambda_adv = 0.0;
        c.p_mix = 0.0;
        c
    }
}

/// `base · (1 − t/t_max)^power`.
pub fn poly_lr(base_lr: f64, t: usize, t_max: usize, power: f64) -> Result<f64> {
    if t > t_max || t_max == 0 {
        return Err(Error::Range {
            what: "t",
            value: t as f64,
            range: format!("0..={t_max}"),
        });
    }
    Ok(base_lr * (1.0 - t as f64 / t_max as f64).powf(power))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert!(c.to_toml().contains("T_h = 1.2"));
    }

    #[test]
    fn every_documented_key_exists() {
        let table: toml::Table = toml::from_str(&RunConfig::default().to_toml()).unwrap();
        for (k, _) in KEY_DOCS {
            if *k != "dataset_root" && *k != "t_max" {
                assert!(table.contains_key(*k), "{k}");
            }
        }
        for k in table.keys() {
            assert!(KEY_DOCS.iter().any(|(d, _)| d == k), "{k} undocumented");
        }
    }

    #[test]
    fn overrides_and_errors_name_the_key() {
        let mut c = RunConfig::default();
        c.set("alpha", "0.25").unwrap();
        c.set("lambda_adv", "0").unwrap();
        c.set("ablate", "onf,c2s").unwrap();
        c.set("dataset_root", "/tmp/x").unwrap();
        c.set("schedule_mode", "literal").unwrap();
        assert_eq!(c.alpha, 0.25);
        assert_eq!(c.lambda_adv, 0.0);
        assert_eq!(c.ablate, vec![Mechanism::Onf, Mechanism::C2s]);
        assert_eq!(c.schedule_mode, ScheduleMode::Literal);
        assert_eq!(c.dataset_root.as_deref(), Some(Path::new("/tmp/x")));
        match c.set("alpha", "\"high\"") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "alpha"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(c.set("nope", "1"), Err(Error::Config { .. })));
        let mut bad = RunConfig::default();
        bad.alpha = 1.0;
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "alpha"));
    }

    #[test]
    fn warmup_must_end_before_t_max() {
        let mut c = RunConfig::default();
        c.t_max = Some(1000);
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "t_w"));
        c.t_max = Some(1500);
        c.t_s = 200;
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml_str("alpah = 0.2"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn desk_scale_t_max() {
        let c = RunConfig::default();
        assert_eq!(c.resolved_t_max(400), 2000);
        assert_eq!(c.resolved_t_max(5000), 10000);
    }

    #[test]
    fn second_step_disables_everything() {
        let c = RunConfig::default().second_step();
        assert!(Mechanism::ALL.iter().all(|&m| !c.enabled(m)));
        assert_eq!((c.lambda_adv, c.p_mix), (0.0, 0.0));
    }

    #[test]
    fn poly_lr_examples() {
        assert_eq!(poly_lr(2.5e-4, 0, 100, 0.9).unwrap(), 2.5e-4);
        assert_eq!(poly_lr(2.5e-4, 100, 100, 0.9).unwrap(), 0.0);
        let mid = poly_lr(2.5e-4, 50, 100, 0.9).unwrap();
        assert!((mid - 2.5e-4 * 0.5f64.powf(0.9)).abs() < 1e-18);
        assert!((mid - 1.34e-4).abs() < 5e-7);
        assert!(poly_lr(1.0, 101, 100, 0.9).is_err());
    }
}
