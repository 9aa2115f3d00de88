use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Param, Scalar, Tensor};

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    /// Output extent along one axis, or `None` if the kernel does not fit.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

struct ConvCache<T> {
    input_shape: [usize; 4],
    out_hw: (usize, usize),
    /// im2col matrices for every sample, each `patch_len × (oh·ow)`.
    cols: Vec<T>,
}

/// Convolution with bias, backed by im2col and a single gemm per sample.
pub struct Conv2d<T> {
    geometry: ConvGeometry,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<ConvCache<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Weights drawn from `N(0, std²)`, bias zero.
    pub fn new(name: &str, geometry: ConvGeometry, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = geometry.out_channels * geometry.patch_len();
        let weight = (0..n).map(|_| T::of(normal.sample(rng))).collect();
        Self::from_parts(name, geometry, weight, vec![T::zero(); geometry.out_channels])
    }

    pub fn from_parts(name: &str, geometry: ConvGeometry, weight: Vec<T>, bias: Vec<T>) -> Self {
        let g = geometry;
        assert_eq!(weight.len(), g.out_channels * g.patch_len());
        assert_eq!(bias.len(), g.out_channels);
        Self {
            geometry,
            weight: Param::new(
                format!("{name}.weight"),
                vec![g.out_channels, g.in_channels, g.kernel, g.kernel],
                weight,
            ),
            bias: Param::new(format!("{name}.bias"), vec![g.out_channels], bias),
            cache: None,
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geometry
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((self.geometry.output_extent(h)?, self.geometry.output_extent(w)?))
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize, col: &mut [T]) {
        let g = &self.geometry;
        let k = g.kernel;
        let cols = oh * ow;
        for c in 0..g.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let di = (ki * g.dilation) as isize - g.padding as isize;
                    let dj = (kj * g.dilation) as isize - g.padding as isize;
                    for oi in 0..oh {
                        let ii = (oi * g.stride) as isize + di;
                        let out_row = &mut dst[oi * ow..(oi + 1) * ow];
                        if ii < 0 || ii >= h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                        for (oj, o) in out_row.iter_mut().enumerate() {
                            let jj = (oj * g.stride) as isize + dj;
                            *o = if jj < 0 || jj >= w as isize {
                                T::zero()
                            } else {
                                src[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[T], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
        let g = &self.geometry;
        let k = g.kernel;
        let cols = oh * ow;
        for c in 0..g.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &col[row * cols..(row + 1) * cols];
                    let di = (ki * g.dilation) as isize - g.padding as isize;
                    let dj = (kj * g.dilation) as isize - g.padding as isize;
                    for oi in 0..oh {
                        let ii = (oi * g.stride) as isize + di;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                        for oj in 0..ow {
                            let jj = (oj * g.stride) as isize + dj;
                            if jj >= 0 && jj < w as isize {
                                dst[jj as usize] += src[oi * ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }

    fn run(&self, x: &Tensor<T>, keep_cols: bool) -> (Tensor<T>, Option<ConvCache<T>>) {
        let g = self.geometry;
        let [n, c, h, w] = x.shape();
        assert_eq!(c, g.in_channels, "conv input channels");
        let (oh, ow) = self
            .output_hw(h, w)
            .unwrap_or_else(|| panic!("input {h}x{w} too small for conv {g:?}"));
        let plen = g.patch_len();
        let ncols = oh * ow;
        let mut out = Tensor::zeros([n, g.out_channels, oh, ow]);
        let mut cols = if keep_cols {
            vec![T::zero(); n * plen * ncols]
        } else {
            vec![T::zero(); plen * ncols]
        };
        for s in 0..n {
            let col = if keep_cols {
                &mut cols[s * plen * ncols..(s + 1) * plen * ncols]
            } else {
                &mut cols[..]
            };
            self.im2col(x.sample(s), h, w, oh, ow, col);
            let y = out.sample_mut(s);
            for (o, chunk) in y.chunks_mut(ncols).enumerate() {
                chunk.fill(self.bias.value[o]);
            }
            T::gemm(
                g.out_channels,
                plen,
                ncols,
                T::one(),
                (&self.weight.value, plen as isize, 1),
                (col, ncols as isize, 1),
                T::one(),
                (y, ncols as isize, 1),
            );
        }
        let cache = keep_cols.then(|| ConvCache {
            input_shape: x.shape(),
            out_hw: (oh, ow),
            cols,
        });
        (out, cache)
    }

    /// Inference forward; leaves any training cache untouched.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x, false).0
    }

    /// Forward that keeps what `backward` needs.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (y, cache) = self.run(x, true);
        self.cache = cache;
        y
    }

    /// Accumulates parameter gradients and, if asked, returns the input
    /// gradient. The cache is kept so the same forward can be differentiated
    /// again with another upstream gradient.
    pub fn backward(&mut self, dy: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let cache = self.cache.as_ref().expect("backward before forward_train");
        let g = self.geometry;
        let [n, _, h, w] = cache.input_shape;
        let (oh, ow) = cache.out_hw;
        assert_eq!(dy.shape(), [n, g.out_channels, oh, ow], "conv upstream grad shape");
        let plen = g.patch_len();
        let ncols = oh * ow;
        let mut dx = need_input_grad.then(|| Tensor::zeros(cache.input_shape));
        let mut dcol = vec![T::zero(); if need_input_grad { plen * ncols } else { 0 }];
        for s in 0..n {
            let col = &cache.cols[s * plen * ncols..(s + 1) * plen * ncols];
            let dys = dy.sample(s);
            for (o, chunk) in dys.chunks(ncols).enumerate() {
                let mut acc = T::zero();
                for &v in chunk {
                    acc += v;
                }
                self.bias.grad[o] += acc;
            }
            // dW += dY · colᵀ
            T::gemm(
                g.out_channels,
                ncols,
                plen,
                T::one(),
                (dys, ncols as isize, 1),
                (col, 1, ncols as isize),
                T::one(),
                (&mut self.weight.grad, plen as isize, 1),
            );
            if let Some(dx) = dx.as_mut() {
                // dcol = Wᵀ · dY
                T::gemm(
                    plen,
                    g.out_channels,
                    ncols,
                    T::one(),
                    (&self.weight.value, 1, plen as isize),
                    (dys, ncols as isize, 1),
                    T::zero(),
                    (&mut dcol, ncols as isize, 1),
                );
                self.col2im(&dcol, h, w, oh, ow, dx.sample_mut(s));
            }
        }
        dx
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}
