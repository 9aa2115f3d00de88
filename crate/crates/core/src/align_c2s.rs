//! Complex-to-simple output alignment: a fully convolutional discriminator
//! over class-probability maps and the two losses that play it against the
//! segmentation network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{LabelMap, ProbabilityMap, BACKGROUND, IGNORE};
use crate::nn::{leaky_relu, leaky_relu_backward, Conv2d, ConvGeometry, Param, Parameterized, Scalar, Tensor};

/// Log arguments are floored here; scores themselves are never altered.
pub const SCORE_EPS: f64 = 1e-7;

const STAGES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    /// Channel count of the probability maps fed in.
    pub in_channels: usize,
    /// Width of the first stage; later stages use 2x, 4x, 8x, then 1.
    pub base_channels: usize,
    pub negative_slope: f64,
    pub init_std: f64,
}

impl DiscriminatorSpec {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            base_channels: 64,
            negative_slope: 0.2,
            init_std: 0.02,
        }
    }

    pub fn base_channels(mut self, n: usize) -> Self {
        self.base_channels = n;
        self
    }

    pub fn channels(&self) -> [usize; STAGES] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 8 * b, 1]
    }

    /// Smallest accepted input side.
    pub const fn min_side() -> usize {
        1 << STAGES
    }
}

/// Five 4x4 stride-2 convolutions with leaky rectifiers in between and a
/// sigmoid on the single-channel output.
pub struct Discriminator<T> {
    spec: DiscriminatorSpec,
    convs: Vec<Conv2d<T>>,
    activations: Vec<Tensor<T>>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(spec: DiscriminatorSpec, rng: &mut impl Rng) -> Self {
        let mut convs = Vec::with_capacity(STAGES);
        let mut input = spec.in_channels;
        for (i, out) in spec.channels().into_iter().enumerate() {
            let g = ConvGeometry::new(input, out, 4).stride(2).padding(1);
            convs.push(Conv2d::new(&format!("disc.conv{}", i + 1), g, spec.init_std, rng));
            input = out;
        }
        Self {
            spec,
            convs,
            activations: Vec::new(),
        }
    }

    pub fn spec(&self) -> DiscriminatorSpec {
        self.spec
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "discriminator expects {} channels, got {c}",
                self.spec.in_channels
            )));
        }
        let min = DiscriminatorSpec::min_side();
        if h < min || w < min {
            return Err(Error::shape(format!(
                "discriminator input {h}x{w} is smaller than {min}x{min}"
            )));
        }
        Ok(())
    }

    /// Pre-sigmoid scores.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let slope = T::of(self.spec.negative_slope);
        let mut h = self.convs[0].forward(x);
        for conv in &self.convs[1..] {
            h = conv.forward(&leaky_relu(&h, slope));
        }
        Ok(h)
    }

    /// Sigmoid scores in (0, 1).
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.logits(x)?.map(sigmoid))
    }

    /// Forward that caches everything [`Self::backward`] needs; returns
    /// sigmoid scores.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let slope = T::of(self.spec.negative_slope);
        self.activations.clear();
        let mut h = self.convs[0].forward_train(x);
        for i in 1..STAGES {
            let a = leaky_relu(&h, slope);
            h = self.convs[i].forward_train(&a);
            self.activations.push(a);
        }
        Ok(h.map(sigmoid))
    }

    /// Backpropagates a gradient given with respect to the pre-sigmoid
    /// logits. Parameter gradients accumulate; the cache survives, so the
    /// same forward can be differentiated again.
    pub fn backward(&mut self, d_logits: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        assert_eq!(self.activations.len(), STAGES - 1, "backward before forward_train");
        let slope = T::of(self.spec.negative_slope);
        let mut d = d_logits.clone();
        for i in (1..STAGES).rev() {
            let da = self.convs[i].backward(&d, true).expect("input grad");
            d = leaky_relu_backward(&self.activations[i - 1], &da, slope);
        }
        self.convs[0].backward(&d, need_input_grad)
    }

    pub fn clear_cache(&mut self) {
        self.activations.clear();
        for c in &mut self.convs {
            c.clear_cache();
        }
    }
}

impl<T: Scalar> Parameterized<T> for Discriminator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// One-hot encoding; IGNORE pixels become all-zero columns.
pub fn one_hot(pseudo: &LabelMap, classes: usize) -> Result<ProbabilityMap> {
    ProbabilityMap::one_hot_of(pseudo, classes)
}

/// One-hot encoding with IGNORE pixels filled as background, so every input
/// column of the discriminator lies on the simplex.
pub fn one_hot_filled(pseudo: &LabelMap, classes: usize) -> Result<ProbabilityMap> {
    let mut filled = pseudo.clone();
    for v in filled.as_mut_slice() {
        if *v == IGNORE {
            *v = BACKGROUND;
        }
    }
    ProbabilityMap::one_hot_of(&filled, classes)
}

/// Scores a batch of probability maps.
pub fn discriminator_forward<T: Scalar>(disc: &Discriminator<T>, maps: &[&ProbabilityMap]) -> Result<Tensor<T>> {
    disc.forward(&stack_maps(maps)?)
}

/// Stacks maps of equal size into an `(N, C, H, W)` tensor.
pub fn stack_maps<T: Scalar>(maps: &[&ProbabilityMap]) -> Result<Tensor<T>> {
    let first = maps.first().ok_or_else(|| Error::EmptySet("no maps to stack".into()))?;
    let (h, w) = first.dims();
    let c = first.classes();
    let mut data = Vec::with_capacity(maps.len() * c * h * w);
    for m in maps {
        if m.dims() != (h, w) || m.classes() != c {
            return Err(Error::shape("maps in one batch must agree in size"));
        }
        data.extend(m.as_slice().iter().map(|&v| T::of(f64::from(v))));
    }
    Ok(Tensor::new([maps.len(), c, h, w], data))
}

fn check_scores<T: Scalar>(scores: &[T]) -> Result<()> {
    for &s in scores {
        let v = s.as_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Numerical(format!("discriminator score {v} outside [0, 1]")));
        }
    }
    Ok(())
}

fn neg_log(x: f64) -> f64 {
    -x.max(SCORE_EPS).ln()
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// `mean −log(1 − D(P))` over prediction positions plus `mean −log D(Y)`
/// over label positions. Either side may be empty.
pub fn discriminator_loss<T: Scalar>(score_pred: &[T], score_gt: &[T]) -> Result<f64> {
    check_scores(score_pred)?;
    check_scores(score_gt)?;
    let fake: f64 = score_pred.iter().map(|s| neg_log(1.0 - s.as_f64())).sum();
    let real: f64 = score_gt.iter().map(|s| neg_log(s.as_f64())).sum();
    Ok(mean(fake, score_pred.len()) + mean(real, score_gt.len()))
}

/// `mean −log D(P)`.
pub fn adversarial_loss<T: Scalar>(score_pred: &[T]) -> Result<f64> {
    check_scores(score_pred)?;
    let sum: f64 = score_pred.iter().map(|s| neg_log(s.as_f64())).sum();
    Ok(mean(sum, score_pred.len()))
}

/// Gradients of [`discriminator_loss`] with respect to the pre-sigmoid
/// logits of both sides. Positions where the log argument is floored get 0.
pub fn discriminator_loss_logit_grad<T: Scalar>(score_pred: &[T], score_gt: &[T]) -> (Vec<T>, Vec<T>) {
    let np = T::of(score_pred.len().max(1) as f64);
    let ng = T::of(score_gt.len().max(1) as f64);
    let eps = T::of(SCORE_EPS);
    let fake = score_pred
        .iter()
        .map(|&s| if T::one() - s > eps { s / np } else { T::zero() })
        .collect();
    let real = score_gt
        .iter()
        .map(|&s| if s > eps { -(T::one() - s) / ng } else { T::zero() })
        .collect();
    (fake, real)
}

/// Gradient of [`adversarial_loss`] with respect to the pre-sigmoid logits.
pub fn adversarial_loss_logit_grad<T: Scalar>(score_pred: &[T]) -> Vec<T> {
    let n = T::of(score_pred.len().max(1) as f64);
    let eps = T::of(SCORE_EPS);
    score_pred
        .iter()
        .map(|&s| if s > eps { -(T::one() - s) / n } else { T::zero() })
        .collect()
}
