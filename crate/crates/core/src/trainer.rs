//! The training loop: batch composition, the generator objective
//! `L_seg + L_cls + λ_adv·L_adv`, the discriminator objective, alternating
//! updates with polynomial learning-rate decay, evaluation, logging, and
//! checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align_c2s::{
    adversarial_loss, adversarial_loss_logit_grad, discriminator_loss, discriminator_loss_logit_grad, one_hot,
    one_hot_filled, Discriminator, DiscriminatorSpec,
};
use crate::align_s2c::{cutmix, sample_mix_mask, MixMask, MixSource};
use crate::checkpoint::Checkpoint;
use crate::config::{poly_lr, Mechanism, RunConfig};
use crate::data::{load_split, read_label_map, read_split_ids, split_dataset, DatasetMeta, DatasetSplit, ImageRecord};
use crate::denoise_image::{compute_class_thresholds, filter_labels, ClassThresholdTable};
use crate::denoise_pixel::{masked_ce_logit_grad, masked_seg_loss_pooled, noise_mask, pixel_losses, ThresholdSchedule};
use crate::error::{Error, Result};
use crate::maps::{LabelMap, ProbabilityMap, RgbImage};
use crate::metrics::{ClassIoUReport, ConfusionMatrix};
use crate::model::{
    classification_logits, classification_loss, classification_loss_grad, images_to_tensor,
    probabilities_from_logits, Backbone, BackboneSpec, Normalization, Predictor, ReferenceBackbone,
};
use crate::nn::{upsample_bilinear_backward, Adam, AdamConfig, Parameterized, Sgd, SgdConfig, Tensor};

const DOMAIN_G_INIT: u64 = 1;
const DOMAIN_D_INIT: u64 = 2;
const DOMAIN_STEP: u64 = 3;
const DOMAIN_LABELED: u64 = 4;
const DOMAIN_UNLABELED: u64 = 5;

/// Generator keyed by `(seed, domain, index)`, so every random choice of the
/// run is a pure function of the seed and the iteration.
pub fn derived_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ domain);
    rng.set_stream(index);
    rng
}

/// An image with a pixel-level training target.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: RgbImage,
    pub tags: BTreeSet<u8>,
    pub label: LabelMap,
}

impl LabeledImage {
    fn single_tag(&self) -> Option<u8> {
        (self.tags.len() == 1).then(|| *self.tags.iter().next().expect("one tag"))
    }
}

/// An image with tags only.
#[derive(Debug, Clone, PartialEq)]
pub struct TagOnlyImage {
    pub id: String,
    pub image: RgbImage,
    pub tags: BTreeSet<u8>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingData {
    pub labeled: Vec<LabeledImage>,
    pub unlabeled: Vec<TagOnlyImage>,
}

impl TrainingData {
    /// Simple images with their pseudo labels, complex images by tags.
    pub fn from_split(split: DatasetSplit) -> Self {
        let labeled = split
            .simple
            .into_iter()
            .map(|s| LabeledImage {
                id: s.record.id,
                image: s.record.image,
                tags: s.record.tags,
                label: s.pseudo,
            })
            .collect();
        let unlabeled = split
            .complex
            .into_iter()
            .map(|r| TagOnlyImage {
                id: r.id,
                image: r.image,
                tags: r.tags,
            })
            .collect();
        Self { labeled, unlabeled }
    }

    /// Every record labeled by `labels` (matched by id); records without a
    /// label are an error.
    pub fn from_exported(records: &[ImageRecord], labels: &BTreeMap<String, LabelMap>) -> Result<Self> {
        let labeled = records
            .iter()
            .map(|r| {
                let label = labels
                    .get(&r.id)
                    .cloned()
                    .ok_or_else(|| Error::MissingFile(PathBuf::from(format!("{}.png", r.id))))?;
                Ok(LabeledImage {
                    id: r.id.clone(),
                    image: r.image.clone(),
                    tags: r.tags.clone(),
                    label,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            labeled,
            unlabeled: Vec::new(),
        })
    }
}

/// Which items fill a batch and which labeled slots get mixed.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// `(slot, partner slot, mask)`: the slot is replaced by the mix of its
    /// own image (inside the mask) and the partner's.
    pub mixes: Vec<(usize, usize, MixMask)>,
}

/// Per-iteration log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub t: usize,
    #[serde(rename = "lr_G")]
    pub lr_g: f64,
    #[serde(rename = "lr_D")]
    pub lr_d: f64,
    #[serde(rename = "L_seg")]
    pub l_seg: f64,
    #[serde(rename = "L_cls")]
    pub l_cls: f64,
    #[serde(rename = "L_adv")]
    pub l_adv: f64,
    /// Absent when no discriminator is trained.
    #[serde(rename = "L_D")]
    pub l_d: Option<f64>,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    /// Pixel loss threshold; `null` means unbounded.
    #[serde(rename = "T_pixel", with = "infinite_as_null")]
    pub t_pixel: f64,
    pub dropped_images: usize,
    pub dropped_per_class: BTreeMap<u8, usize>,
    pub masked_pixel_frac: f64,
    pub mixed_pairs: usize,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub t: usize,
    pub miou: Option<f64>,
    pub per_class: Vec<Option<f64>>,
}

/// Parameter digests around the two phases of the last step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseChecksums {
    pub g_before: u64,
    pub d_before: u64,
    pub g_after_g_phase: u64,
    pub d_after_g_phase: u64,
    pub g_after_d_phase: u64,
    pub d_after_d_phase: u64,
}

/// Everything besides parameters and optimizer moments that the next
/// iteration depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed iterations.
    pub t: usize,
    pub t_max: usize,
    pub schedule: ThresholdSchedule,
    pub rng_seed: u64,
    pub threshold_table: Option<ClassThresholdTable>,
    /// Latest filter decision per image id.
    pub decisions: BTreeMap<String, bool>,
    pub best_miou: Option<f64>,
    pub best_t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub dataset: DatasetMeta,
    pub backbone: BackboneSpec,
    pub discriminator: Option<DiscriminatorSpec>,
    pub adam_steps: u64,
    pub state: TrainState,
}

pub type TrainCheckpoint = Checkpoint<CheckpointMeta>;

pub struct Trainer {
    pub config: RunConfig,
    pub meta: DatasetMeta,
    pub data: TrainingData,
    pub val: Vec<ImageRecord>,
    pub backbone: ReferenceBackbone<f32>,
    pub disc: Option<Discriminator<f32>>,
    pub state: TrainState,
    pub evals: Vec<EvalRecord>,
    pub last_checksums: PhaseChecksums,
    sgd: Sgd<f32>,
    adam: Adam<f32>,
    norm: Normalization,
    run_dir: Option<PathBuf>,
}

fn backbone_spec(config: &RunConfig, classes: usize) -> BackboneSpec {
    BackboneSpec {
        classes,
        stem_channels: config.backbone_stem,
        width: config.backbone_width,
        global_context: config.global_context,
    }
}

fn check_finite(t: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            t,
            detail: format!("{what} = {v}"),
        })
    }
}

impl Trainer {
    pub fn new(config: RunConfig, meta: DatasetMeta, data: TrainingData, val: Vec<ImageRecord>) -> Result<Self> {
        config.validate()?;
        if data.labeled.is_empty() {
            return Err(Error::EmptySet("no pixel-labeled training images".into()));
        }
        if data.unlabeled.is_empty() && config.batch_complex > 0 {
            log::warn!("no complex images: complex batch slots fall back to simple images");
        }
        let t_max = config.resolved_t_max(data.labeled.len());
        let schedule = config.schedule(t_max);
        if config.t_w >= t_max {
            return Err(Error::config("t_w", format!("must be smaller than t_max = {t_max}")));
        }
        schedule.validate()?;
        let classes = meta.total_classes();
        let backbone = ReferenceBackbone::new(
            backbone_spec(&config, classes),
            &mut derived_rng(config.seed, DOMAIN_G_INIT, 0),
        );
        let disc = config.enabled(Mechanism::C2s).then(|| {
            Discriminator::new(
                DiscriminatorSpec::new(classes).base_channels(config.disc_base_channels),
                &mut derived_rng(config.seed, DOMAIN_D_INIT, 0),
            )
        });
        let norm = Normalization {
            mean: meta.mean,
            std: meta.std,
        };
        Ok(Self {
            sgd: Sgd::new(SgdConfig {
                momentum: config.momentum,
                weight_decay: config.weight_decay,
            }),
            adam: Adam::new(AdamConfig {
                beta1: config.adam_beta1,
                beta2: config.adam_beta2,
                eps: config.adam_eps,
            }),
            state: TrainState {
                t: 0,
                t_max,
                schedule,
                rng_seed: config.seed,
                threshold_table: None,
                decisions: BTreeMap::new(),
                best_miou: None,
                best_t: 0,
            },
            config,
            meta,
            data,
            val,
            backbone,
            disc,
            evals: Vec::new(),
            last_checksums: PhaseChecksums::default(),
            norm,
            run_dir: None,
        })
    }

    /// Rebuilds a trainer mid-run from a checkpoint.
    pub fn from_checkpoint(
        mut ckpt: TrainCheckpoint,
        data: TrainingData,
        val: Vec<ImageRecord>,
    ) -> Result<Self> {
        let m = ckpt.meta.clone();
        let mut trainer = Self::new(m.config.clone(), m.dataset.clone(), data, val)?;
        if trainer.backbone.spec() != m.backbone {
            return Err(Error::Checkpoint("backbone spec differs from config".into()));
        }
        load_params(&mut ckpt, "g", &mut trainer.backbone)?;
        let velocity = trainer
            .backbone
            .params()
            .iter()
            .map(|p| ckpt.take(&format!("g_opt.{}", p.name)).map(|t| t.data))
            .collect::<Result<Vec<_>>>();
        if let Ok(v) = velocity {
            trainer.sgd.load_state(v);
        }
        if let Some(disc) = trainer.disc.as_mut() {
            load_params(&mut ckpt, "d", disc)?;
            if m.adam_steps > 0 {
                let mut first = Vec::new();
                let mut second = Vec::new();
                for p in disc.params() {
                    first.push(ckpt.take(&format!("d_m.{}", p.name))?.data);
                    second.push(ckpt.take(&format!("d_v.{}", p.name))?.data);
                }
                trainer.adam.load_state(m.adam_steps, first, second);
            }
        }
        trainer.state = m.state;
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> TrainCheckpoint {
        let mut ckpt = Checkpoint::new(CheckpointMeta {
            config: self.config.clone(),
            dataset: self.meta.clone(),
            backbone: self.backbone.spec(),
            discriminator: self.disc.as_ref().map(|d| d.spec()),
            adam_steps: self.adam.steps(),
            state: self.state.clone(),
        });
        for (p, v) in self.backbone.params().iter().zip(
            self.sgd
                .state()
                .iter()
                .map(Some)
                .chain(std::iter::repeat(None)),
        ) {
            ckpt.insert(format!("g.{}", p.name), p.shape.clone(), p.value.clone());
            if let Some(v) = v {
                ckpt.insert(format!("g_opt.{}", p.name), p.shape.clone(), v.clone());
            }
        }
        if let Some(disc) = &self.disc {
            let (m, v) = self.adam.state();
            for (i, p) in disc.params().iter().enumerate() {
                ckpt.insert(format!("d.{}", p.name), p.shape.clone(), p.value.clone());
                if let (Some(m), Some(v)) = (m.get(i), v.get(i)) {
                    ckpt.insert(format!("d_m.{}", p.name), p.shape.clone(), m.clone());
                    ckpt.insert(format!("d_v.{}", p.name), p.shape.clone(), v.clone());
                }
            }
        }
        ckpt
    }

    /// Directs logs, reports, the config snapshot and checkpoints to `dir`.
    pub fn set_run_dir(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.config.save(&dir.join("config.toml"))?;
        self.run_dir = Some(dir.to_path_buf());
        Ok(())
    }

    pub fn normalization(&self) -> Normalization {
        self.norm
    }

    pub fn classes(&self) -> usize {
        self.meta.total_classes()
    }

    fn epoch_slot(&self, domain: u64, n: usize, per_step: usize, t: usize, j: usize) -> usize {
        let s = (t - 1) * per_step + j;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut derived_rng(self.config.seed, domain, (s / n) as u64));
        perm[s % n]
    }

    /// Batch composition of iteration `t`.
    pub fn batch_plan(&self, t: usize, rng: &mut impl Rng) -> Result<BatchPlan> {
        let n_l = self.data.labeled.len();
        let n_u = self.data.unlabeled.len();
        let (k_l, k_u) = if n_u == 0 {
            (self.config.batch_size(), 0)
        } else {
            (self.config.batch_simple, self.config.batch_complex)
        };
        let labeled: Vec<usize> = (0..k_l).map(|j| self.epoch_slot(DOMAIN_LABELED, n_l, k_l, t, j)).collect();
        let unlabeled = (0..k_u)
            .map(|j| self.epoch_slot(DOMAIN_UNLABELED, n_u, k_u, t, j))
            .collect();
        let mut mixes = Vec::new();
        if self.config.enabled(Mechanism::S2c) && self.config.p_mix > 0.0 {
            let eligible: Vec<bool> = labeled
                .iter()
                .map(|&i| {
                    let img = &self.data.labeled[i];
                    img.single_tag().is_some() && self.state.decisions.get(&img.id) != Some(&false)
                })
                .collect();
            for slot in 0..labeled.len() {
                let draw: f64 = rng.random();
                if draw >= self.config.p_mix || !eligible[slot] {
                    continue;
                }
                let partners: Vec<usize> = (0..labeled.len()).filter(|&j| j != slot && eligible[j]).collect();
                if partners.is_empty() {
                    continue;
                }
                let partner = partners[rng.random_range(0..partners.len())];
                let (h, w) = self.data.labeled[labeled[slot]].image.dims();
                let mask = sample_mix_mask(h, w, (self.config.mix_area_lo, self.config.mix_area_hi), rng)?;
                mixes.push((slot, partner, mask));
            }
        }
        Ok(BatchPlan {
            labeled,
            unlabeled,
            mixes,
        })
    }

    fn refresh_thresholds_if_due(&mut self, t: usize) -> Result<()> {
        if !self.config.enabled(Mechanism::Onf) || t <= self.config.t_w {
            return Ok(());
        }
        let since = t - self.config.t_w - 1;
        let refresh = self.config.threshold_refresh_every;
        let due = since == 0 || (refresh > 0 && since % refresh == 0) || self.state.threshold_table.is_none();
        if !due {
            return Ok(());
        }
        let pairs: Vec<(&RgbImage, &LabelMap)> = self
            .data
            .labeled
            .iter()
            .filter(|l| l.single_tag().is_some())
            .map(|l| (&l.image, &l.label))
            .collect();
        let predictor = Predictor::<f32, _>::new(&self.backbone, self.norm);
        let table = compute_class_thresholds(&predictor, &pairs, self.classes(), self.config.alpha, t)?;
        log::info!("class thresholds at t = {t}: {:?}", table.thresholds);
        self.state.threshold_table = Some(table);
        Ok(())
    }

    /// One iteration: generator phase, then discriminator phase.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let t = self.state.t + 1;
        let t_max = self.state.t_max;
        if t > t_max {
            return Err(Error::ScheduleExhausted { t, t_max });
        }
        self.refresh_thresholds_if_due(t)?;
        let cfg = self.config.clone();
        let classes = self.classes();
        let mut rng = derived_rng(cfg.seed, DOMAIN_STEP, t as u64);
        let plan = self.batch_plan(t, &mut rng)?;
        let lr_g = poly_lr(cfg.lr_g, t - 1, t_max, cfg.lr_power)?;
        let lr_d = poly_lr(cfg.lr_d, t - 1, t_max, cfg.lr_power)?;

        // assemble the batch: labeled slots (some replaced by synthetic
        // pairs), then tag-only slots
        let mut synthetic: BTreeMap<usize, (RgbImage, LabelMap, BTreeSet<u8>)> = BTreeMap::new();
        for (slot, partner, mask) in &plan.mixes {
            let a = &self.data.labeled[plan.labeled[*slot]];
            let b = &self.data.labeled[plan.labeled[*partner]];
            let pair = cutmix(
                MixSource { id: &a.id, image: &a.image, label: &a.label, tags: &a.tags },
                MixSource { id: &b.id, image: &b.image, label: &b.label, tags: &b.tags },
                mask,
            )?;
            synthetic.insert(*slot, (pair.image, pair.label, pair.tags));
        }
        let n_l = plan.labeled.len();
        let mut images: Vec<&RgbImage> = Vec::new();
        let mut labels: Vec<&LabelMap> = Vec::new();
        let mut tags: Vec<&BTreeSet<u8>> = Vec::new();
        for (slot, &i) in plan.labeled.iter().enumerate() {
            match synthetic.get(&slot) {
                Some((img, lab, tg)) => {
                    images.push(img);
                    labels.push(lab);
                    tags.push(tg);
                }
                None => {
                    let l = &self.data.labeled[i];
                    images.push(&l.image);
                    labels.push(&l.label);
                    tags.push(&l.tags);
                }
            }
        }
        for &i in &plan.unlabeled {
            images.push(&self.data.unlabeled[i].image);
            tags.push(&self.data.unlabeled[i].tags);
        }
        let n = images.len();
        let (h, w) = images[0].dims();
        let plane = h * w;

        let g_before = self.backbone.checksum();
        let d_before = self.disc.as_ref().map_or(0, |d| d.checksum());

        // generator forward
        let x = images_to_tensor::<f32>(&images, &self.norm)?;
        let logits = self.backbone.forward_train(&x)?;
        let [_, _, lh, lw] = logits.shape();
        let probs = probabilities_from_logits(&logits, h, w)?;

        // image-level filtering on real simple slots
        let mut kept = vec![true; n_l];
        let mut dropped_per_class = BTreeMap::new();
        if let Some(table) = &self.state.threshold_table {
            for (slot, &i) in plan.labeled.iter().enumerate() {
                if synthetic.contains_key(&slot) {
                    continue;
                }
                let item = &self.data.labeled[i];
                let Some(tag) = item.single_tag() else { continue };
                let d = filter_labels(&item.id, &probs[slot].argmax(), &item.label, tag, table, cfg.noise_iou_scope)?;
                kept[slot] = d.kept;
                self.state.decisions.insert(item.id.clone(), d.kept);
                if !d.kept {
                    *dropped_per_class.entry(tag).or_insert(0) += 1;
                }
            }
        }
        let dropped_images = kept.iter().filter(|k| !**k).count();

        // pixel-level masking and the segmentation loss
        let t_pixel = if cfg.enabled(Mechanism::Pnd) {
            self.state.schedule.current_threshold(t)?
        } else {
            f64::INFINITY
        };
        let mut seg_items = Vec::new();
        for slot in (0..n_l).filter(|&s| kept[s]) {
            let losses = pixel_losses(&probs[slot], labels[slot])?;
            let mask = noise_mask(&losses, t_pixel);
            seg_items.push((slot, losses, mask));
        }
        let pooled: Vec<_> = seg_items.iter().map(|(_, l, m)| (l, m)).collect();
        let seg = masked_seg_loss_pooled(&pooled)?;
        let valid_total: usize = seg_items.iter().map(|(_, l, _)| l.valid().iter().filter(|v| **v).count()).sum();
        let masked_pixel_frac = if valid_total == 0 {
            0.0
        } else {
            1.0 - seg.kept as f64 / valid_total as f64
        };
        let mut d_up = Tensor::<f32>::zeros([n, classes, h, w]);
        for (slot, _, mask) in &seg_items {
            let p: Vec<f32> = probs[*slot].as_slice().to_vec();
            masked_ce_logit_grad(
                &p,
                classes,
                labels[*slot].as_slice(),
                mask.as_slice(),
                seg.kept,
                d_up.sample_mut(*slot),
            );
        }

        // classification loss on every image
        let mut l_cls = 0.0;
        let mut d_low = Tensor::<f32>::zeros(logits.shape());
        let low_plane = lh * lw;
        for s in 0..n {
            let p = classification_logits(logits.sample(s), classes);
            l_cls += classification_loss(&p, tags[s]) / n as f64;
            let g = classification_loss_grad(&p, tags[s]);
            let ds = d_low.sample_mut(s);
            for (c, gc) in g.iter().enumerate() {
                let v = (gc / n as f64 / low_plane as f64) as f32;
                ds[(c + 1) * low_plane..(c + 2) * low_plane].iter_mut().for_each(|e| *e += v);
            }
        }

        // adversarial term through the frozen discriminator
        let mut l_adv = 0.0;
        let mut l_d = None;
        let mut d_phase = None;
        if let Some(disc) = self.disc.as_mut() {
            let mut fake: Vec<usize> = Vec::new();
            for slot in 0..n_l {
                let is_syn = synthetic.contains_key(&slot);
                if (is_syn && cfg.adv_include_synthetic) || (!is_syn && (kept[slot] || cfg.adv_include_dropped)) {
                    fake.push(slot);
                }
            }
            fake.extend(n_l..n);
            let mut real_maps = Vec::new();
            for slot in (0..n_l).filter(|&s| kept[s] && !synthetic.contains_key(&s)) {
                let item = &self.data.labeled[plan.labeled[slot]];
                if item.single_tag().is_none() {
                    continue;
                }
                real_maps.push(if cfg.gt_ignore_fill {
                    one_hot_filled(&item.label, classes)?
                } else {
                    one_hot(&item.label, classes)?
                });
            }
            let mut stack: Vec<&ProbabilityMap> = fake.iter().map(|&s| &probs[s]).collect();
            stack.extend(real_maps.iter());
            let input = crate::align_c2s::stack_maps::<f32>(&stack)?;
            let scores = disc.forward_train(&input)?;
            let per = scores.sample_len();
            let (pred, gt) = scores.data().split_at(fake.len() * per);
            l_adv = adversarial_loss(pred)?;
            l_d = Some(discriminator_loss(pred, gt)?);
            if cfg.lambda_adv > 0.0 && !fake.is_empty() {
                let mut d_scores = vec![0.0f32; scores.data().len()];
                for (d, g) in d_scores.iter_mut().zip(adversarial_loss_logit_grad(pred)) {
                    *d = g * cfg.lambda_adv as f32;
                }
                disc.zero_grad();
                let dx = disc
                    .backward(&Tensor::new(scores.shape(), d_scores), true)
                    .expect("input grad");
                disc.zero_grad();
                // through the softmax: dZ = P ⊙ (dP − Σ_c P·dP)
                for (k, &slot) in fake.iter().enumerate() {
                    let dp = dx.sample(k);
                    let p = probs[slot].as_slice();
                    let dz = d_up.sample_mut(slot);
                    for px in 0..plane {
                        let mut dot = 0.0f32;
                        for c in 0..classes {
                            dot += p[c * plane + px] * dp[c * plane + px];
                        }
                        for c in 0..classes {
                            let i = c * plane + px;
                            dz[i] += p[i] * (dp[i] - dot);
                        }
                    }
                }
            }
            d_phase = Some((input, scores.shape(), pred.to_vec(), gt.to_vec()));
        }

        let l_seg = seg.value;
        let l_total = l_seg + l_cls + cfg.lambda_adv * l_adv;
        for (what, v) in [("L_seg", l_seg), ("L_cls", l_cls), ("L_adv", l_adv), ("L_D", l_d.unwrap_or(0.0))] {
            check_finite(t, what, v)?;
        }

        // generator update
        let mut d_logits = upsample_bilinear_backward(&d_up, lh, lw);
        d_logits.add_assign(&d_low);
        self.backbone.zero_grad();
        self.backbone.backward(&d_logits)?;
        self.backbone.clear_cache();
        for p in self.backbone.params() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    t,
                    detail: format!("gradient of {}", p.name),
                });
            }
        }
        self.sgd.step(&mut self.backbone.params_mut(), lr_g);
        let g_after_g_phase = self.backbone.checksum();
        let d_after_g_phase = self.disc.as_ref().map_or(0, |d| d.checksum());

        // discriminator update on detached predictions
        if let (Some(disc), Some((input, shape, pred, gt))) = (self.disc.as_mut(), d_phase) {
            let (mut pred, mut gt) = (pred, gt);
            for round in 0..cfg.d_updates_per_step {
                if round > 0 {
                    let scores = disc.forward_train(&input)?;
                    let (p, g) = scores.data().split_at(pred.len());
                    pred = p.to_vec();
                    gt = g.to_vec();
                }
                let (gp, gg) = discriminator_loss_logit_grad(&pred, &gt);
                let mut d = gp;
                d.extend(gg);
                disc.zero_grad();
                disc.backward(&Tensor::new(shape, d), false);
                self.adam.step(&mut disc.params_mut(), lr_d);
            }
            disc.clear_cache();
        }
        self.last_checksums = PhaseChecksums {
            g_before,
            d_before,
            g_after_g_phase,
            d_after_g_phase,
            g_after_d_phase: self.backbone.checksum(),
            d_after_d_phase: self.disc.as_ref().map_or(0, |d| d.checksum()),
        };

        self.state.t = t;
        Ok(StepReport {
            t,
            lr_g,
            lr_d,
            l_seg,
            l_cls,
            l_adv,
            l_d,
            l_total,
            t_pixel,
            dropped_images,
            dropped_per_class,
            masked_pixel_frac,
            mixed_pairs: plan.mixes.len(),
        })
    }

    /// Validation mIoU of the current network.
    pub fn evaluate_val(&self) -> Result<ClassIoUReport> {
        evaluate(&self.backbone, &self.norm, &self.val, self.classes())
    }

    fn append_line(&self, file: &str, line: &str) -> Result<()> {
        if let Some(dir) = &self.run_dir {
            let path = dir.join(file);
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    fn save_checkpoint(&self, name: &str) -> Result<()> {
        if let Some(dir) = &self.run_dir {
            self.checkpoint().save(&dir.join(name))?;
        }
        Ok(())
    }

    fn run_eval(&mut self) -> Result<()> {
        if self.val.is_empty() {
            return Ok(());
        }
        let t = self.state.t;
        let report = self.evaluate_val()?;
        let rec = EvalRecord {
            t,
            miou: report.miou,
            per_class: report.per_class.clone(),
        };
        self.append_line("eval.jsonl", &serde_json::to_string(&rec)?)?;
        log::info!("t = {t}: val mIoU {:?}", report.miou);
        if let Some(dir) = &self.run_dir {
            report.write(&self.meta.all_class_names(), &dir.join("val_report.txt"))?;
        }
        self.evals.push(rec);
        let better = match (report.miou, self.state.best_miou) {
            (Some(m), Some(b)) => m > b,
            (Some(_), None) => true,
            _ => false,
        };
        if better {
            self.state.best_miou = report.miou;
            self.state.best_t = t;
            self.save_checkpoint("best.ckpt")?;
        }
        Ok(())
    }

    /// Runs iterations until `t = until` (default `t_max`), evaluating and
    /// checkpointing on the configured intervals.
    pub fn run(&mut self, until: Option<usize>) -> Result<Vec<StepReport>> {
        let stop = until.unwrap_or(self.state.t_max).min(self.state.t_max);
        let mut reports = Vec::new();
        while self.state.t < stop {
            let r = self.train_step()?;
            self.append_line("log.jsonl", &serde_json::to_string(&r)?)?;
            let t = r.t;
            reports.push(r);
            let eval_due = t == self.state.t_max || (self.config.eval_every > 0 && t % self.config.eval_every == 0);
            if eval_due {
                self.run_eval()?;
            }
            if self.config.checkpoint_every > 0 && t % self.config.checkpoint_every == 0 {
                self.save_checkpoint("last.ckpt")?;
            }
        }
        if self.state.t == self.state.t_max {
            self.save_checkpoint("final.ckpt")?;
        }
        Ok(reports)
    }
}

fn load_params<P: Parameterized<f32>>(ckpt: &mut TrainCheckpoint, prefix: &str, net: &mut P) -> Result<()> {
    for p in net.params_mut() {
        let t = ckpt.take(&format!("{prefix}.{}", p.name))?;
        if t.shape != p.shape {
            return Err(Error::Checkpoint(format!("`{}` has shape {:?}, want {:?}", p.name, t.shape, p.shape)));
        }
        p.value = t.data;
    }
    Ok(())
}

/// The segmentation network stored in a checkpoint.
pub fn backbone_from_checkpoint(ckpt: &TrainCheckpoint) -> Result<(ReferenceBackbone<f32>, Normalization)> {
    let mut ckpt = ckpt.clone();
    let spec = ckpt.meta.backbone;
    let mut net = ReferenceBackbone::new(spec, &mut derived_rng(0, DOMAIN_G_INIT, 0));
    load_params(&mut ckpt, "g", &mut net)?;
    let norm = Normalization {
        mean: ckpt.meta.dataset.mean,
        std: ckpt.meta.dataset.std,
    };
    Ok((net, norm))
}

/// Batched inference; one probability map per image.
pub fn predict<B: Backbone<f32> + ?Sized>(
    backbone: &B,
    norm: &Normalization,
    images: &[&RgbImage],
) -> Result<Vec<ProbabilityMap>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let mut start = 0;
        // equal sizes within one forward
        while start < chunk.len() {
            let dims = chunk[start].dims();
            let end = start + chunk[start..].iter().take_while(|i| i.dims() == dims).count();
            let x = images_to_tensor::<f32>(&chunk[start..end], norm)?;
            let logits = backbone.forward(&x)?;
            out.extend(probabilities_from_logits(&logits, dims.0, dims.1)?);
            start = end;
        }
    }
    Ok(out)
}

/// Dataset-level IoU report of argmax predictions against ground truth.
pub fn evaluate<B: Backbone<f32> + ?Sized>(
    backbone: &B,
    norm: &Normalization,
    records: &[ImageRecord],
    classes: usize,
) -> Result<ClassIoUReport> {
    let mut cm = ConfusionMatrix::new(classes);
    for chunk in records.chunks(16) {
        let images: Vec<&RgbImage> = chunk.iter().map(|r| &r.image).collect();
        let probs = predict(backbone, norm, &images)?;
        for (r, p) in chunk.iter().zip(probs) {
            let gt = r
                .ground_truth
                .as_ref()
                .ok_or_else(|| Error::MissingGroundTruth(r.id.clone()))?;
            cm.accumulate(gt, &p.argmax())?;
        }
    }
    Ok(cm.iou_report())
}

/// Argmax label maps for every record, optionally written as
/// `<out_dir>/<id>.png`.
pub fn export_pseudo_labels<B: Backbone<f32> + ?Sized>(
    backbone: &B,
    norm: &Normalization,
    records: &[ImageRecord],
    out_dir: Option<&Path>,
) -> Result<BTreeMap<String, LabelMap>> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = BTreeMap::new();
    for chunk in records.chunks(16) {
        let images: Vec<&RgbImage> = chunk.iter().map(|r| &r.image).collect();
        for (r, p) in chunk.iter().zip(predict(backbone, norm, &images)?) {
            let label = p.argmax();
            if let Some(dir) = out_dir {
                crate::data::write_label_map(&dir.join(format!("{}.png", r.id)), &label)?;
            }
            out.insert(r.id.clone(), label);
        }
    }
    Ok(out)
}

/// Training data and validation records named by a run config.
pub fn load_run_data(config: &RunConfig) -> Result<(DatasetMeta, TrainingData, Vec<ImageRecord>)> {
    let root = config.require_dataset()?;
    let train = load_split(root, &config.train_split)?;
    let split = split_dataset(train.records, config.binarize_threshold)?;
    let val = match read_split_ids(root, &config.val_split)? {
        Some(_) => load_split(root, &config.val_split)?.records,
        None => {
            log::warn!("no `{}` split: validation is skipped", config.val_split);
            Vec::new()
        }
    };
    Ok((train.meta, TrainingData::from_split(split), val))
}

/// Reads `<dir>/<id>.png` for every record.
pub fn read_exported_labels(dir: &Path, records: &[ImageRecord]) -> Result<BTreeMap<String, LabelMap>> {
    records
        .iter()
        .map(|r| {
            let label = read_label_map(&dir.join(format!("{}.png", r.id)))?;
            if label.dims() != r.image.dims() {
                return Err(Error::shape(format!("exported label of `{}`", r.id)));
            }
            Ok((r.id.clone(), label))
        })
        .collect()
}

/// Trains a fresh network on exported labels with every mechanism off.
pub fn retrain_second_step(
    config: &RunConfig,
    meta: DatasetMeta,
    records: &[ImageRecord],
    labels: &BTreeMap<String, LabelMap>,
    val: Vec<ImageRecord>,
    run_dir: Option<&Path>,
) -> Result<Trainer> {
    let cfg = config.second_step();
    let data = TrainingData::from_exported(records, labels)?;
    let mut trainer = Trainer::new(cfg, meta, data, val)?;
    if let Some(dir) = run_dir {
        trainer.set_run_dir(dir)?;
    }
    trainer.run(None)?;
    Ok(trainer)
}
