use super::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(dy.shape(), data)
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

/// Gradient of leaky ReLU given its output (the sign is preserved).
pub fn leaky_relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, slope: T) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { g * slope })
        .collect();
    Tensor::new(dy.shape(), data)
}

/// Two-tap interpolation weights along one axis (half-pixel centers, edge
/// clamped), matching the usual `align_corners = false` convention.
#[derive(Debug, Clone)]
pub struct BilinearAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl BilinearAxis {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(src - i0 as f64);
        }
        Self { lo, hi, frac }
    }
}

pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ay = BilinearAxis::new(h, out_h);
    let ax = BilinearAxis::new(w, out_w);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for i in 0..out_h {
            let fy = T::of(ay.frac[i]);
            let r0 = &s[ay.lo[i] * w..(ay.lo[i] + 1) * w];
            let r1 = &s[ay.hi[i] * w..(ay.hi[i] + 1) * w];
            for j in 0..out_w {
                let fx = T::of(ax.frac[j]);
                let top = r0[ax.lo[j]] * (T::one() - fx) + r0[ax.hi[j]] * fx;
                let bot = r1[ax.lo[j]] * (T::one() - fx) + r1[ax.hi[j]] * fx;
                d[i * out_w + j] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`].
pub fn upsample_bilinear_backward<T: Scalar>(dy: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let [n, c, out_h, out_w] = dy.shape();
    if (in_h, in_w) == (out_h, out_w) {
        return dy.clone();
    }
    let ay = BilinearAxis::new(in_h, out_h);
    let ax = BilinearAxis::new(in_w, out_w);
    let mut dx = Tensor::zeros([n, c, in_h, in_w]);
    let src = dy.data();
    let dst = dx.data_mut();
    for plane in 0..n * c {
        let g = &src[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        let d = &mut dst[plane * in_h * in_w..(plane + 1) * in_h * in_w];
        for i in 0..out_h {
            let fy = T::of(ay.frac[i]);
            for j in 0..out_w {
                let fx = T::of(ax.frac[j]);
                let v = g[i * out_w + j];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                d[ay.lo[i] * in_w + ax.lo[j]] += top * (T::one() - fx);
                d[ay.lo[i] * in_w + ax.hi[j]] += top * fx;
                d[ay.hi[i] * in_w + ax.lo[j]] += bot * (T::one() - fx);
                d[ay.hi[i] * in_w + ax.hi[j]] += bot * fx;
            }
        }
    }
    dx
}
