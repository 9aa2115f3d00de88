//! Acceptance suite. Runs every criterion in order and prints one PASS/FAIL
//! line each; exits non-zero if any fails.
//!
//! `ACCEPTANCE_ONLY=1,2,5` restricts the run to the listed criteria.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use mdba_core::align_c2s::{
    adversarial_loss, adversarial_loss_logit_grad, discriminator_loss, discriminator_loss_logit_grad, Discriminator,
    DiscriminatorSpec,
};
use mdba_core::align_s2c::{cutmix, sample_mix_mask, MixMask, MixSource};
use mdba_core::config::{Mechanism, RunConfig};
use mdba_core::data::{split_dataset, DatasetMeta, ImageRecord};
use mdba_core::denoise_image::{compute_class_thresholds, Segmenter};
use mdba_core::denoise_pixel::{masked_ce_logit_grad, masked_seg_loss, noise_mask, pixel_losses, ThresholdSchedule};
use mdba_core::fixture::{generate_fixture, FixtureSpec, Split};
use mdba_core::maps::{LabelMap, ProbabilityMap, RgbImage, IGNORE};
use mdba_core::metrics::ConfusionMatrix;
use mdba_core::nn::{Parameterized, Tensor};
use mdba_core::trainer::{export_pseudo_labels, retrain_second_step, StepReport, TrainCheckpoint, Trainer, TrainingData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let classes = 4usize;
    let mut cm_all = ConfusionMatrix::new(classes);
    let mut inter_all = vec![0u64; classes];
    let mut union_all = vec![0u64; classes];
    for pair in 0..50 {
        let reference: Vec<u8> = (0..256)
            .map(|_| if rng.random_bool(0.05) { IGNORE } else { rng.random_range(0..classes as u8) })
            .collect();
        let prediction: Vec<u8> = (0..256).map(|_| rng.random_range(0..classes as u8)).collect();
        let r = LabelMap::new(16, 16, reference.clone()).unwrap();
        let p = LabelMap::new(16, 16, prediction.clone()).unwrap();
        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate(&r, &p).map_err(|e| e.to_string())?;
        cm_all.accumulate(&r, &p).map_err(|e| e.to_string())?;
        let report = cm.iou_report();
        let mut defined = Vec::new();
        for c in 0..classes as u8 {
            // set counting over labeled pixels
            let pixels: Vec<usize> = (0..256).filter(|&i| reference[i] != IGNORE).collect();
            let a: BTreeSet<usize> = pixels.iter().copied().filter(|&i| reference[i] == c).collect();
            let b: BTreeSet<usize> = pixels.iter().copied().filter(|&i| prediction[i] == c).collect();
            let inter = a.intersection(&b).count() as u64;
            let union = a.union(&b).count() as u64;
            inter_all[c as usize] += inter;
            union_all[c as usize] += union;
            if cm.get(c as usize, c as usize) != inter {
                return Err(format!("pair {pair} class {c}: diagonal count"));
            }
            let want = (union > 0).then(|| inter as f64 / union as f64);
            match (report.per_class[c as usize], want) {
                (Some(g), Some(w)) if (g - w).abs() <= 1e-12 => defined.push(w),
                (None, None) => {}
                (g, w) => return Err(format!("pair {pair} class {c}: {g:?} vs {w:?}")),
            }
        }
        let want = defined.iter().sum::<f64>() / defined.len() as f64;
        if (report.miou.unwrap() - want).abs() > 1e-12 {
            return Err(format!("pair {pair}: mIoU {:?} vs {want}", report.miou));
        }
    }
    let report = cm_all.iou_report();
    for c in 0..classes {
        let want = inter_all[c] as f64 / union_all[c] as f64;
        if (report.per_class[c].unwrap() - want).abs() > 1e-12 {
            return Err(format!("dataset class {c}"));
        }
    }
    Ok("50 pairs and their union agree exactly".into())
}

// ---------------------------------------------------------------- 2

/// Returns a stored prediction keyed by the image's first intensity.
struct Lookup(Vec<LabelMap>);

impl Segmenter for Lookup {
    fn predict_labels(&self, image: &RgbImage) -> mdba_core::Result<LabelMap> {
        Ok(self.0[image.get(0, 0, 0) as usize].clone())
    }
}

fn threshold_table() -> Outcome {
    // class c has 8 labeled pixels of which k_c are predicted correctly and
    // the rest as background; background pixels are always right
    let hits = [6usize, 4, 7];
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut preds = Vec::new();
    for (k, &hit) in hits.iter().enumerate() {
        let c = k as u8 + 1;
        let label: Vec<u8> = (0..16).map(|i| if i < 8 { c } else { 0 }).collect();
        let pred: Vec<u8> = (0..16).map(|i| if i < hit { c } else { 0 }).collect();
        images.push(RgbImage::new(1, 16, vec![k as f32; 48]).unwrap());
        labels.push(LabelMap::new(1, 16, label).unwrap());
        preds.push(LabelMap::new(1, 16, pred).unwrap());
    }
    let model = Lookup(preds);
    let pairs: Vec<(&RgbImage, &LabelMap)> = images.iter().zip(&labels).collect();
    let missed: usize = hits.iter().map(|h| 8 - h).sum();
    let mut forced = vec![24.0 / (24.0 + missed as f64)];
    forced.extend(hits.iter().map(|&h| h as f64 / 8.0));
    let mut worst = 0.0f64;
    for alpha in [0.0, 0.1, 0.25] {
        let table = compute_class_thresholds(&model, &pairs, 4, alpha, 0).map_err(|e| e.to_string())?;
        for (c, a) in forced.iter().enumerate() {
            let want = (1.0 - (a - alpha)).clamp(0.0, 1.0);
            let got = table.get(c as u8).map_err(|e| e.to_string())?;
            worst = worst.max((got - want).abs());
        }
    }
    check(worst <= 1e-12, format!("max |T_c - clip(1-(a_c-alpha))| = {worst:.1e} over 3 alphas x 4 classes"))
}

// ---------------------------------------------------------------- 3

fn schedule_endpoints() -> Outcome {
    let s = ThresholdSchedule {
        warmup: 1000,
        max_steps: 11000,
        stride: 1000,
        high: 1.2,
        low: 0.8,
        ..ThresholdSchedule::default()
    };
    let at = |t| s.current_threshold(t).unwrap();
    let points = [(1000, f64::INFINITY), (1500, 1.2), (5500, 1.04), (11000, 0.8)];
    for (t, want) in points {
        let got = at(t);
        let ok = if want.is_infinite() { got == want } else { (got - want).abs() < 1e-12 };
        if !ok {
            return Err(format!("T({t}) = {got}, want {want}"));
        }
    }
    let mut prev = f64::INFINITY;
    for t in 1..=11000 {
        let v = at(t);
        if v > prev {
            return Err(format!("increase at t = {t}"));
        }
        prev = v;
    }
    Ok("inf, 1.2, 1.04, 0.8 at 1000/1500/5500/11000; nonincreasing".into())
}

// ---------------------------------------------------------------- 4

fn softmax64(z: &[f64], classes: usize, plane: usize) -> Vec<f64> {
    let mut p = vec![0.0; z.len()];
    for px in 0..plane {
        let m = (0..classes).map(|c| z[c * plane + px]).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = (0..classes).map(|c| (z[c * plane + px] - m).exp()).sum();
        for c in 0..classes {
            p[c * plane + px] = (z[c * plane + px] - m).exp() / s;
        }
    }
    p
}

/// Mean kept cross-entropy with the mask held fixed, by direct loops.
fn masked_ce(z: &[f64], classes: usize, labels: &[u8], mask: &[u8]) -> f64 {
    let plane = labels.len();
    let mut sum = 0.0;
    let mut n = 0;
    for px in 0..plane {
        if mask[px] == 1 && labels[px] != IGNORE {
            let lse = (0..classes).map(|c| z[c * plane + px].exp()).sum::<f64>().ln();
            sum += lse - z[labels[px] as usize * plane + px];
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn masked_loss_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w, classes) = (8usize, 8usize, 3usize);
    let plane = h * w;
    let mut worst_val = 0.0f64;
    let mut worst_grad = 0.0f64;
    for inst in 0..100 {
        let logits: Vec<f32> = (0..classes * plane).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<u8> = (0..plane)
            .map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..classes as u8) })
            .collect();
        let threshold = rng.random_range(0.3..2.5);
        let probs = ProbabilityMap::softmax(classes, h, w, &logits).unwrap();
        let pseudo = LabelMap::new(h, w, labels.clone()).unwrap();
        let losses = pixel_losses(&probs, &pseudo).unwrap();
        let mask = noise_mask(&losses, threshold);
        let got = masked_seg_loss(&losses, &mask).unwrap();

        // independent value: keep p(y) >= exp(-T), average -ln p(y)
        let mut sum = 0.0;
        let mut n = 0;
        for px in 0..plane {
            if labels[px] == IGNORE {
                continue;
            }
            let l = -f64::from(probs.get(labels[px] as usize, px / w, px % w)).ln();
            if l <= threshold {
                sum += l;
                n += 1;
            }
        }
        let want = if n == 0 { 0.0 } else { sum / n as f64 };
        worst_val = worst_val.max((got.value - want).abs());
        if got.kept != n {
            return Err(format!("instance {inst}: kept {} vs {n}", got.kept));
        }

        // gradient in f64 with the mask fixed
        let z: Vec<f64> = logits.iter().map(|&v| f64::from(v)).collect();
        let p64 = softmax64(&z, classes, plane);
        let mut grad = vec![0.0f64; z.len()];
        masked_ce_logit_grad(&p64, classes, &labels, mask.as_slice(), got.kept, &mut grad);
        let eps = 1e-6;
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp[i] += eps;
            let mut zm = z.clone();
            zm[i] -= eps;
            let fd = (masked_ce(&zp, classes, &labels, mask.as_slice()) - masked_ce(&zm, classes, &labels, mask.as_slice()))
                / (2.0 * eps);
            let scale = fd.abs().max(grad[i].abs());
            if scale > 1e-8 {
                worst_grad = worst_grad.max((fd - grad[i]).abs() / scale);
            }
        }
    }
    check(
        worst_val <= 1e-10 && worst_grad <= 1e-4,
        format!("max value error {worst_val:.1e} (tol 1e-10), max relative gradient error {worst_grad:.1e} (tol 1e-4)"),
    )
}

// ---------------------------------------------------------------- 5

fn random_source(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (RgbImage, LabelMap, BTreeSet<u8>) {
    let img = RgbImage::new(h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap();
    let tag = rng.random_range(1..5u8);
    let lab = LabelMap::new(h, w, (0..h * w).map(|_| if rng.random_bool(0.5) { tag } else { 0 }).collect()).unwrap();
    (img, lab, [tag].into())
}

fn cutmix_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1000 {
        let (h, w) = (rng.random_range(4..24), rng.random_range(4..24));
        let (ia, la, ta) = random_source(&mut rng, h, w);
        let (ib, lb, tb) = random_source(&mut rng, h, w);
        let mask = if trial % 2 == 0 {
            sample_mix_mask(h, w, (0.2, 0.5), &mut rng).map_err(|e| e.to_string())?
        } else {
            MixMask::from_mask(h, w, (0..h * w).map(|_| u8::from(rng.random_bool(0.5))).collect()).unwrap()
        };
        let a = MixSource { id: "a", image: &ia, label: &la, tags: &ta };
        let b = MixSource { id: "b", image: &ib, label: &lb, tags: &tb };
        let mixed = cutmix(a, b, &mask).map_err(|e| e.to_string())?;
        let m = mask.as_slice();
        for y in 0..h {
            for x in 0..w {
                let (si, sl) = if m[y * w + x] == 1 { (&ia, &la) } else { (&ib, &lb) };
                for c in 0..3 {
                    if mixed.image.get(c, y, x).to_bits() != si.get(c, y, x).to_bits() {
                        return Err(format!("trial {trial}: image pixel ({y},{x})"));
                    }
                }
                if mixed.label.get(y, x) != sl.get(y, x) {
                    return Err(format!("trial {trial}: label pixel ({y},{x})"));
                }
            }
        }
        let a = MixSource { id: "a", image: &ia, label: &la, tags: &ta };
        let b = MixSource { id: "b", image: &ib, label: &lb, tags: &tb };
        let all_a = cutmix(a, b, &MixMask::ones(h, w)).unwrap();
        let all_b = cutmix(a, b, &MixMask::zeros(h, w)).unwrap();
        let same = |x: &RgbImage, y: &RgbImage| x.as_slice().iter().zip(y.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits());
        if !(same(&all_a.image, &ia) && all_a.label == la && same(&all_b.image, &ib) && all_b.label == lb) {
            return Err(format!("trial {trial}: identity masks"));
        }
    }
    Ok("1000 pairs conserve every pixel; identity masks are bitwise copies".into())
}

// ---------------------------------------------------------------- 6

fn random_simplex(rng: &mut ChaCha8Rng, n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for _ in 0..n {
        let z: Vec<f64> = (0..c * hw).map(|_| rng.random_range(-2.0..2.0)).collect();
        out.extend(softmax64(&z, c, hw));
    }
    out
}

fn d_loss(disc: &Discriminator<f64>, x: &Tensor<f64>, n_fake: usize) -> f64 {
    let s = disc.forward(x).unwrap();
    let (p, g) = s.data().split_at(n_fake);
    discriminator_loss(p, g).unwrap()
}

fn adversarial_mechanics() -> Outcome {
    // zero points
    let perfect = discriminator_loss(&[0.0f64; 4], &[1.0f64; 4]).map_err(|e| e.to_string())?;
    let fooled = adversarial_loss(&[1.0f64; 4]).map_err(|e| e.to_string())?;
    if perfect != 0.0 || fooled != 0.0 {
        return Err(format!("zero points: L_D = {perfect}, L_adv = {fooled}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (c, side) = (3usize, 32usize);
    let hw = side * side;
    let mut disc = Discriminator::<f64>::new(DiscriminatorSpec::new(c).base_channels(8), &mut rng);
    let fake = random_simplex(&mut rng, 2, c, hw);
    let mut real = vec![0.0f64; 2 * c * hw];
    for n in 0..2 {
        for px in 0..hw {
            let k = rng.random_range(0..c);
            real[(n * c + k) * hw + px] = 1.0;
        }
    }
    let mut both = fake.clone();
    both.extend(&real);
    let x = Tensor::new([4, c, side, side], both);

    // discriminator loss w.r.t. parameters
    let scores = disc.forward_train(&x).map_err(|e| e.to_string())?;
    let (gp, gg) = discriminator_loss_logit_grad(&scores.data()[..2], &scores.data()[2..]);
    let mut d = gp;
    d.extend(gg);
    disc.zero_grad();
    disc.backward(&Tensor::new(scores.shape(), d), false);
    disc.clear_cache();
    let eps = 1e-6;
    let mut worst = 0.0f64;
    let n_params = disc.params().len();
    for pi in 0..n_params {
        let len = disc.params()[pi].value.len();
        for _ in 0..6 {
            let j = rng.random_range(0..len);
            let g = disc.params()[pi].grad[j];
            disc.params_mut()[pi].value[j] += eps;
            let up = d_loss(&disc, &x, 2);
            disc.params_mut()[pi].value[j] -= 2.0 * eps;
            let down = d_loss(&disc, &x, 2);
            disc.params_mut()[pi].value[j] += eps;
            let fd = (up - down) / (2.0 * eps);
            let scale = fd.abs().max(g.abs());
            if scale > 1e-7 {
                worst = worst.max((fd - g).abs() / scale);
            }
        }
    }

    // adversarial loss w.r.t. the prediction map
    let xf = Tensor::new([2, c, side, side], fake.clone());
    let s = disc.forward_train(&xf).map_err(|e| e.to_string())?;
    let dl = adversarial_loss_logit_grad(s.data());
    disc.zero_grad();
    let dx = disc.backward(&Tensor::new(s.shape(), dl), true).expect("input gradient");
    disc.clear_cache();
    let adv = |data: Vec<f64>| adversarial_loss(disc.forward(&Tensor::new([2, c, side, side], data)).unwrap().data()).unwrap();
    for _ in 0..40 {
        let i = rng.random_range(0..fake.len());
        let mut up = fake.clone();
        up[i] += eps;
        let mut down = fake.clone();
        down[i] -= eps;
        let fd = (adv(up) - adv(down)) / (2.0 * eps);
        let g = dx.data()[i];
        let scale = fd.abs().max(g.abs());
        if scale > 1e-7 {
            worst = worst.max((fd - g).abs() / scale);
        }
    }
    if worst > 1e-3 {
        return Err(format!("relative gradient error {worst:.1e} > 1e-3"));
    }

    // phase isolation inside real training steps
    let spec = FixtureSpec {
        height: 32,
        width: 32,
        train_simple: 12,
        train_complex: 4,
        val_simple: 0,
        val_complex: 0,
        ..FixtureSpec::default()
    };
    let fx = generate_fixture(&spec, 6).map_err(|e| e.to_string())?;
    let split = split_dataset(fx.split(Split::Train), 0.5).map_err(|e| e.to_string())?;
    let cfg = RunConfig {
        t_max: Some(6),
        t_w: 2,
        t_s: 1,
        disc_base_channels: 4,
        batch_simple: 3,
        batch_complex: 2,
        lr_g: 0.01,
        ..RunConfig::default()
    };
    let mut tr = Trainer::new(cfg, fx.meta.clone(), TrainingData::from_split(split), vec![]).map_err(|e| e.to_string())?;
    for _ in 0..6 {
        tr.train_step().map_err(|e| e.to_string())?;
        let k = tr.last_checksums;
        let isolated = k.d_before == k.d_after_g_phase && k.g_after_g_phase == k.g_after_d_phase;
        let moved = k.g_before != k.g_after_g_phase && k.d_after_g_phase != k.d_after_d_phase;
        if !(isolated && moved) {
            return Err(format!("step {}: checksums {k:?}", tr.state.t));
        }
    }
    Ok(format!(
        "zero losses at the ideal points; max relative gradient error {worst:.1e}; G and D phases isolated over 6 steps"
    ))
}

// ---------------------------------------------------------------- 7-10

const SEEDS: [u64; 3] = [0, 1, 2];

struct RunOutcome {
    miou: f64,
    reports: Vec<StepReport>,
    decisions: BTreeMap<String, bool>,
    trainer: Trainer,
}

struct FixtureData {
    meta: DatasetMeta,
    train: Vec<ImageRecord>,
    val: Vec<ImageRecord>,
    corrupted: BTreeSet<String>,
}

#[derive(Default)]
struct Ctx {
    fixtures: BTreeMap<u64, FixtureData>,
    runs: BTreeMap<(usize, u64), RunOutcome>,
}

fn desk_config(seed: u64, ablate: Vec<Mechanism>) -> RunConfig {
    RunConfig {
        seed,
        ablate,
        ..RunConfig::desk()
    }
}

impl Ctx {
    fn fixture(&mut self, seed: u64) -> &FixtureData {
        self.fixtures.entry(seed).or_insert_with(|| {
            let fx = generate_fixture(&FixtureSpec::default(), seed).expect("fixture");
            FixtureData {
                meta: fx.meta.clone(),
                train: fx.split(Split::Train),
                val: fx.split(Split::Val),
                corrupted: fx
                    .records
                    .iter()
                    .filter(|r| r.corruption.is_some())
                    .map(|r| r.record.id.clone())
                    .collect(),
            }
        })
    }

    fn trainer(&mut self, row: usize, seed: u64) -> Trainer {
        let ablate = Mechanism::cumulative_rows()[row].1.clone();
        let fx = self.fixture(seed);
        let split = split_dataset(fx.train.clone(), 0.5).expect("split");
        Trainer::new(desk_config(seed, ablate), fx.meta.clone(), TrainingData::from_split(split), fx.val.clone())
            .expect("trainer")
    }

    fn run(&mut self, row: usize, seed: u64) -> &RunOutcome {
        if !self.runs.contains_key(&(row, seed)) {
            let start = Instant::now();
            let mut trainer = self.trainer(row, seed);
            let reports = trainer.run(None).expect("training");
            let miou = trainer.evaluate_val().expect("eval").miou.unwrap_or(0.0);
            println!(
                "    {:5} seed {seed}: val mIoU {:.2} ({:.0}s)",
                Mechanism::cumulative_rows()[row].0,
                miou * 100.0,
                start.elapsed().as_secs_f64()
            );
            let decisions = trainer.state.decisions.clone();
            self.runs.insert((row, seed), RunOutcome { miou, reports, decisions, trainer });
        }
        &self.runs[&(row, seed)]
    }
}

fn ablation_ordering(ctx: &mut Ctx) -> Outcome {
    let rows = Mechanism::cumulative_rows();
    let mut means = Vec::new();
    for (k, _) in rows.iter().enumerate() {
        let m: f64 = SEEDS.iter().map(|&s| ctx.run(k, s).miou).sum::<f64>() / SEEDS.len() as f64;
        means.push(m * 100.0);
    }
    let deltas: Vec<f64> = means.windows(2).map(|w| w[1] - w[0]).collect();
    let ok = deltas[..3].iter().all(|&d| d >= 0.5) && deltas[3] >= -0.5;
    let table: Vec<String> = rows.iter().zip(&means).map(|((l, _), m)| format!("{l} {m:.2}")).collect();
    let strict = if deltas[3] >= 0.0 { "holds" } else { "within tolerance" };
    check(
        ok,
        format!(
            "mean of {} seeds: {} | deltas {:+.2} {:+.2} {:+.2} {:+.2} (need >= 0.5, 0.5, 0.5, >= -0.5; S2C <= C2S {strict})",
            SEEDS.len(),
            table.join(", "),
            deltas[0],
            deltas[1],
            deltas[2],
            deltas[3]
        ),
    )
}

fn onf_selectivity(ctx: &mut Ctx) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for &seed in &SEEDS {
        let (corrupted, n_simple) = {
            let fx = ctx.fixture(seed);
            (fx.corrupted.clone(), fx.train.iter().filter(|r| r.is_simple()).count())
        };
        let run = ctx.run(1, seed);
        let dropped: Vec<&String> = run.decisions.iter().filter(|(_, kept)| !**kept).map(|(id, _)| id).collect();
        let hits = dropped.iter().filter(|id| corrupted.contains(id.as_str())).count();
        let precision = hits as f64 / dropped.len().max(1) as f64;
        let base = corrupted.len() as f64 / n_simple as f64;
        ok &= !dropped.is_empty() && precision >= 2.0 * base;
        parts.push(format!("seed {seed}: {hits}/{} = {precision:.2} vs 2 x {base:.2}", dropped.len()));
    }
    check(ok, parts.join("; "))
}

fn determinism(ctx: &mut Ctx) -> Outcome {
    let full = 4;
    let seed = SEEDS[0];
    let reference: Vec<String> = ctx.run(full, seed).reports.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    let mut again = ctx.trainer(full, seed);
    let half = again.state.t_max / 2;
    let mut log: Vec<String> = Vec::new();
    for r in again.run(Some(half)).map_err(|e| e.to_string())? {
        log.push(serde_json::to_string(&r).unwrap());
    }
    let bytes = again.checkpoint().to_bytes().map_err(|e| e.to_string())?;
    for r in again.run(None).map_err(|e| e.to_string())? {
        log.push(serde_json::to_string(&r).unwrap());
    }
    if log != reference {
        let first = log.iter().zip(&reference).position(|(a, b)| a != b);
        return Err(format!("repeat run diverges at step {first:?}"));
    }
    let (data, val) = {
        let fx = ctx.fixture(seed);
        (TrainingData::from_split(split_dataset(fx.train.clone(), 0.5).unwrap()), fx.val.clone())
    };
    let ckpt = TrainCheckpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::from_checkpoint(ckpt, data, val).map_err(|e| e.to_string())?;
    let tail: Vec<String> = resumed
        .run(None)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|r| serde_json::to_string(r).unwrap())
        .collect();
    check(
        tail == reference[half..],
        format!("{} identical log lines; resume at t = {half} reproduces the remaining {}", reference.len(), tail.len()),
    )
}

fn two_step(ctx: &mut Ctx) -> Outcome {
    let seed = SEEDS[0];
    let (meta, train, val) = {
        let fx = ctx.fixture(seed);
        (fx.meta.clone(), fx.train.clone(), fx.val.clone())
    };
    let first = ctx.run(4, seed);
    let norm = first.trainer.normalization();
    let labels = export_pseudo_labels(&first.trainer.backbone, &norm, &train, None).map_err(|e| e.to_string())?;
    let first_miou = first.miou;
    let cfg = first.trainer.config.clone();
    let second = retrain_second_step(&cfg, meta, &train, &labels, val, None).map_err(|e| e.to_string())?;
    let second_miou = second.evaluate_val().map_err(|e| e.to_string())?.miou.unwrap_or(0.0);
    check(
        second_miou >= first_miou - 0.02,
        format!(
            "{} exported labels; first step {:.4}, second step {:.4} (need >= first - 0.02)",
            labels.len(),
            first_miou,
            second_miou
        ),
    )
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut ctx = Ctx::default();
    type Criterion = Box<dyn Fn(&mut Ctx) -> Outcome>;
    let criteria: Vec<(usize, &str, Criterion)> = vec![
        (1, "metric oracle", Box::new(|_| metric_oracle())),
        (2, "class threshold table", Box::new(|_| threshold_table())),
        (3, "pixel threshold schedule endpoints", Box::new(|_| schedule_endpoints())),
        (4, "masked loss and gradient oracle", Box::new(|_| masked_loss_oracle())),
        (5, "box-mix conservation", Box::new(|_| cutmix_conservation())),
        (6, "adversarial mechanics", Box::new(|_| adversarial_mechanics())),
        (7, "ablation ordering on the fixture", Box::new(ablation_ordering)),
        (8, "image filter selectivity", Box::new(onf_selectivity)),
        (9, "determinism and resume", Box::new(determinism)),
        (10, "two-step pipeline", Box::new(two_step)),
    ];
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(&mut ctx)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("PASS [{n}] {name}: {d} ({secs:.1}s)"),
            Err(d) => {
                println!("FAIL [{n}] {name}: {d} ({secs:.1}s)");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} criteria failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
