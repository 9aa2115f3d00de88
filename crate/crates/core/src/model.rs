//! Segmentation backbone contract, the small reference network, and the
//! multi-label classification head.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoise_image::Segmenter;
use crate::error::{Error, Result};
use crate::maps::{LabelMap, ProbabilityMap, RgbImage};
use crate::nn::{
    relu, relu_backward, upsample_bilinear, Conv2d, ConvGeometry, Param, Parameterized, Scalar, Tensor,
};

/// Sigmoid outputs are kept this far from 0 and 1 inside the logs.
pub const SIGMOID_EPS: f64 = 1e-7;

/// What the trainer needs from a segmentation network: an image batch in,
/// low-resolution class logits out, and a backward pass that accumulates
/// parameter gradients.
pub trait Backbone<T: Scalar>: Parameterized<T> {
    /// Total classes `C`, background included.
    fn num_classes(&self) -> usize;

    /// Input side divided by output side.
    fn output_stride(&self) -> usize;

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Gradient of the training objective with respect to the logits of the
    /// last `forward_train`.
    fn backward(&mut self, d_logits: &Tensor<T>) -> Result<()>;

    fn clear_cache(&mut self);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub classes: usize,
    pub stem_channels: usize,
    pub width: usize,
    /// Adds a pooled image-level context vector before the classifier.
    pub global_context: bool,
}

impl BackboneSpec {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            stem_channels: 16,
            width: 32,
            global_context: true,
        }
    }
}

/// Two stride-2 convolutions, three dilated 3x3 convolutions (rates 1, 2, 4)
/// with an optional pooled-context branch, and a 1x1 classifier.
pub struct ReferenceBackbone<T> {
    spec: BackboneSpec,
    convs: Vec<Conv2d<T>>,
    context: Option<Conv2d<T>>,
    cache: Vec<Tensor<T>>,
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

impl<T: Scalar> ReferenceBackbone<T> {
    pub fn new(spec: BackboneSpec, rng: &mut impl Rng) -> Self {
        let (s, w) = (spec.stem_channels, spec.width);
        let geoms = [
            ConvGeometry::new(3, s, 3).stride(2).padding(1),
            ConvGeometry::new(s, w, 3).stride(2).padding(1),
            ConvGeometry::new(w, w, 3).padding(1),
            ConvGeometry::new(w, w, 3).padding(2).dilation(2),
            ConvGeometry::new(w, w, 3).padding(4).dilation(4),
        ];
        let mut convs: Vec<Conv2d<T>> = geoms
            .iter()
            .enumerate()
            .map(|(i, g)| {
                Conv2d::new(
                    &format!("backbone.conv{}", i + 1),
                    *g,
                    he_std(g.in_channels * g.kernel * g.kernel),
                    rng,
                )
            })
            .collect();
        let context = spec.global_context.then(|| {
            Conv2d::new("backbone.context", ConvGeometry::new(w, w, 1), he_std(w) * 0.5, rng)
        });
        convs.push(Conv2d::new(
            "backbone.classifier",
            ConvGeometry::new(w, spec.classes, 1),
            (1.0 / w as f64).sqrt(),
            rng,
        ));
        Self {
            spec,
            convs,
            context,
            cache: Vec::new(),
        }
    }

    pub fn spec(&self) -> BackboneSpec {
        self.spec
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != 3 || h < 4 || w < 4 {
            return Err(Error::shape(format!("backbone input {c}x{h}x{w}")));
        }
        Ok(())
    }

    fn run(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let conv = |c: &mut Conv2d<T>, x: &Tensor<T>| if train { c.forward_train(x) } else { c.forward(x) };
        let mut a = x.clone();
        let mut cache = Vec::new();
        for i in 0..4 {
            a = relu(&conv(&mut self.convs[i], &a));
            if train {
                cache.push(a.clone());
            }
        }
        let mut z = conv(&mut self.convs[4], &a);
        if let Some(ctx) = self.context.as_mut() {
            let g = conv(ctx, &global_average(&a));
            broadcast_add(&mut z, &g);
        }
        let a5 = relu(&z);
        let logits = conv(&mut self.convs[5], &a5);
        if train {
            cache.push(a5);
            self.cache = cache;
        }
        logits
    }
}

fn global_average<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let inv = T::one() / T::of(plane as f64);
    let data = x.data().chunks(plane).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
    Tensor::new([n, c, 1, 1], data)
}

fn broadcast_add<T: Scalar>(x: &mut Tensor<T>, v: &Tensor<T>) {
    let plane = x.height() * x.width();
    for (ch, &b) in x.data_mut().chunks_mut(plane).zip(v.data()) {
        ch.iter_mut().for_each(|e| *e += b);
    }
}

impl<T: Scalar> Parameterized<T> for ReferenceBackbone<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = self.convs.iter().flat_map(|c| c.params()).collect();
        if let Some(c) = &self.context {
            out.extend(c.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        if let Some(c) = self.context.as_mut() {
            out.extend(c.params_mut());
        }
        out
    }
}

impl<T: Scalar> Backbone<T> for ReferenceBackbone<T> {
    fn num_classes(&self) -> usize {
        self.spec.classes
    }

    fn output_stride(&self) -> usize {
        4
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let conv = |c: &Conv2d<T>, x: &Tensor<T>| c.forward(x);
        let mut a = x.clone();
        for i in 0..4 {
            a = relu(&conv(&self.convs[i], &a));
        }
        let mut z = conv(&self.convs[4], &a);
        if let Some(ctx) = &self.context {
            broadcast_add(&mut z, &ctx.forward(&global_average(&a)));
        }
        Ok(conv(&self.convs[5], &relu(&z)))
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(self.run(x, true))
    }

    fn backward(&mut self, d_logits: &Tensor<T>) -> Result<()> {
        if self.cache.len() != 5 {
            return Err(Error::shape("backbone backward before forward_train"));
        }
        let d_a5 = self.convs[5].backward(d_logits, true).expect("input grad");
        let d_z = relu_backward(&self.cache[4], &d_a5);
        let mut d_a = self.convs[4].backward(&d_z, true).expect("input grad");
        if let Some(ctx) = self.context.as_mut() {
            let [n, c, h, w] = d_z.shape();
            let plane = h * w;
            let sums = d_z.data().chunks(plane).map(|ch| ch.iter().copied().sum::<T>()).collect();
            let d_g = ctx.backward(&Tensor::new([n, c, 1, 1], sums), true).expect("input grad");
            let inv = T::one() / T::of(plane as f64);
            for (ch, &g) in d_a.data_mut().chunks_mut(plane).zip(d_g.data()) {
                ch.iter_mut().for_each(|e| *e += g * inv);
            }
        }
        for i in (0..4).rev() {
            let d_pre = relu_backward(&self.cache[i], &d_a);
            match self.convs[i].backward(&d_pre, i > 0) {
                Some(d) => d_a = d,
                None => break,
            }
        }
        Ok(())
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
        for c in &mut self.convs {
            c.clear_cache();
        }
        if let Some(c) = self.context.as_mut() {
            c.clear_cache();
        }
    }
}

/// Per-channel input normalization `(x − mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Stacks equally sized images into a normalized `(N, 3, H, W)` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[&RgbImage], norm: &Normalization) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::EmptySet("empty image batch".into()))?;
    let (h, w) = first.dims();
    let plane = h * w;
    let mut data = Vec::with_capacity(images.len() * 3 * plane);
    for img in images {
        if img.dims() != (h, w) {
            return Err(Error::shape("images in one batch must agree in size"));
        }
        for c in 0..3 {
            let (m, s) = (norm.mean[c], norm.std[c]);
            data.extend(
                img.as_slice()[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&v| T::of(f64::from((v - m) / s))),
            );
        }
    }
    Ok(Tensor::new([images.len(), 3, h, w], data))
}

/// Upsamples logits to `h × w` and applies a per-pixel softmax, sample by
/// sample.
pub fn probabilities_from_logits<T: Scalar>(logits: &Tensor<T>, h: usize, w: usize) -> Result<Vec<ProbabilityMap>> {
    let up = upsample_bilinear(logits, h, w);
    let c = up.channels();
    (0..up.batch())
        .map(|n| {
            let v: Vec<f32> = up.sample(n).iter().map(|x| x.as_f64() as f32).collect();
            ProbabilityMap::softmax(c, h, w, &v)
        })
        .collect()
}

/// Softmax class probabilities at the input resolution.
pub fn segment<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    image: &RgbImage,
    norm: &Normalization,
) -> Result<ProbabilityMap> {
    let (h, w) = image.dims();
    let logits = backbone.forward(&images_to_tensor::<T>(&[image], norm)?)?;
    Ok(probabilities_from_logits(&logits, h, w)?.remove(0))
}

/// Adapts a backbone to the [`Segmenter`] interface.
pub struct Predictor<'a, T, B: ?Sized> {
    pub backbone: &'a B,
    pub norm: Normalization,
    _scalar: std::marker::PhantomData<T>,
}

impl<'a, T: Scalar, B: Backbone<T> + ?Sized> Predictor<'a, T, B> {
    pub fn new(backbone: &'a B, norm: Normalization) -> Self {
        Self {
            backbone,
            norm,
            _scalar: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar, B: Backbone<T> + ?Sized> Segmenter for Predictor<'_, T, B> {
    fn predict_labels(&self, image: &RgbImage) -> Result<LabelMap> {
        Ok(segment::<T, B>(self.backbone, image, &self.norm)?.argmax())
    }
}

/// Drops the background channel and averages every remaining channel of one
/// sample's planar logits: `C′` values.
pub fn classification_logits<T: Scalar>(logits: &[T], classes: usize) -> Vec<f64> {
    let plane = logits.len() / classes;
    (1..classes)
        .map(|c| logits[c * plane..(c + 1) * plane].iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64)
        .collect()
}

fn clamped_sigmoid(p: f64) -> (f64, bool) {
    let s = 1.0 / (1.0 + (-p).exp());
    let c = s.clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS);
    (c, c == s)
}

fn targets(len: usize, tags: &BTreeSet<u8>) -> impl Iterator<Item = f64> + '_ {
    (1..=len).map(move |c| if tags.contains(&(c as u8)) { 1.0 } else { 0.0 })
}

/// Multi-label soft margin loss
/// `−(1/C′) Σ_c [y_c log σ(p_c) + (1 − y_c) log(1 − σ(p_c))]`.
pub fn classification_loss(logits: &[f64], tags: &BTreeSet<u8>) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(targets(logits.len(), tags))
        .map(|(&p, y)| {
            let (s, _) = clamped_sigmoid(p);
            -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
        })
        .sum::<f64>()
        / n
}

/// Exact gradient of [`classification_loss`]: `(σ(p_c) − y_c)/C′`, zero
/// where the sigmoid is clamped.
pub fn classification_loss_grad(logits: &[f64], tags: &BTreeSet<u8>) -> Vec<f64> {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(targets(logits.len(), tags))
        .map(|(&p, y)| {
            let (s, free) = clamped_sigmoid(p);
            if free {
                (s - y) / n
            } else {
                0.0
            }
        })
        .collect()
}
