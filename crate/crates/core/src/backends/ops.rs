//! Dense convolution primitives on `H x W x C` tensors together with their
//! adjoints with respect to the input. Weights are frozen, so no weight
//! gradients are ever needed.

use ndarray::{Array3, ArrayView3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Stride-1 "same" convolution with an odd square kernel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    /// `[ky][kx][cin][cout]`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Stride-2 transposed convolution, 4x4 kernel, padding 1: doubles H and W.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub cin: usize,
    pub cout: usize,
    /// `[ky][kx][cin][cout]`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

const UP_K: usize = 4;

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// `profile[ky] * profile[kx] * mix[ci][co]` plus independent Gaussian
/// jitter of relative size `texture`.
fn separable_weights<R: Rng>(rng: &mut R, profile: &[f64], cin: usize, cout: usize, std: f64, texture: f64) -> Vec<f64> {
    let mix = gaussian_vec(rng, cin * cout, std);
    let k = profile.len();
    let norm = profile.iter().map(|p| p * p).sum::<f64>();
    let jitter = gaussian_vec(rng, k * k * cin * cout, texture * std * norm);
    let mut out = Vec::with_capacity(k * k * cin * cout);
    for ky in 0..k {
        for kx in 0..k {
            for m in &mix {
                out.push(profile[ky] * profile[kx] * m);
            }
        }
    }
    out.iter_mut().zip(jitter).for_each(|(w, j)| *w += j);
    out
}

fn contiguous(x: ArrayView3<'_, f64>) -> std::borrow::Cow<'_, [f64]> {
    match x.to_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().copied().collect()),
    }
}

impl Conv2d {
    pub fn random<R: Rng>(rng: &mut R, k: usize, cin: usize, cout: usize, gain: f64, bias_std: f64) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let std = gain / ((k * k * cin) as f64).sqrt();
        Conv2d {
            k,
            cin,
            cout,
            weights: gaussian_vec(rng, k * k * cin * cout, std),
            bias: gaussian_vec(rng, cout, bias_std),
        }
    }

    /// 3x3 low-pass (binomial) kernel with random channel mixing.
    pub fn smooth<R: Rng>(rng: &mut R, cin: usize, cout: usize, gain: f64, bias_std: f64, texture: f64) -> Self {
        let std = gain / (cin as f64).sqrt();
        Conv2d {
            k: 3,
            cin,
            cout,
            weights: separable_weights(rng, &[0.25, 0.5, 0.25], cin, cout, std, texture),
            bias: gaussian_vec(rng, cout, bias_std),
        }
    }

    pub fn forward(&self, x: ArrayView3<'_, f64>) -> Array3<f64> {
        let (h, w, cin) = x.dim();
        assert_eq!(cin, self.cin, "conv input channels");
        let xs = contiguous(x);
        let (k, cout) = (self.k, self.cout);
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; h * w * cout];
        for oy in 0..h {
            for ox in 0..w {
                let ob = (oy * w + ox) * cout;
                let acc = &mut out[ob..ob + cout];
                acc.copy_from_slice(&self.bias);
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ib = (iy as usize * w + ix as usize) * cin;
                        let wb = (ky * k + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = xs[ib + ci];
                            let wrow = &self.weights[wb + ci * cout..wb + (ci + 1) * cout];
                            for (a, wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((h, w, cout), out).expect("shape")
    }

    /// Gradient with respect to the input given the output gradient.
    pub fn adjoint(&self, g: ArrayView3<'_, f64>) -> Array3<f64> {
        let (h, w, cout) = g.dim();
        assert_eq!(cout, self.cout, "conv output channels");
        let gs = contiguous(g);
        let (k, cin) = (self.k, self.cin);
        let pad = (k / 2) as isize;
        let mut gx = vec![0.0; h * w * cin];
        for oy in 0..h {
            for ox in 0..w {
                let ob = (oy * w + ox) * cout;
                let grow = &gs[ob..ob + cout];
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ib = (iy as usize * w + ix as usize) * cin;
                        let wb = (ky * k + kx) * cin * cout;
                        for ci in 0..cin {
                            let wrow = &self.weights[wb + ci * cout..wb + (ci + 1) * cout];
                            let mut s = 0.0;
                            for (gv, wv) in grow.iter().zip(wrow) {
                                s += gv * wv;
                            }
                            gx[ib + ci] += s;
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((h, w, cin), gx).expect("shape")
    }
}

impl ConvTranspose2d {
    pub fn random<R: Rng>(rng: &mut R, cin: usize, cout: usize, gain: f64, bias_std: f64) -> Self {
        // each output pixel receives 2x2 kernel taps per input channel
        let std = gain / ((4 * cin) as f64).sqrt();
        ConvTranspose2d {
            cin,
            cout,
            weights: gaussian_vec(rng, UP_K * UP_K * cin * cout, std),
            bias: gaussian_vec(rng, cout, bias_std),
        }
    }

    /// Bilinear upsampling with random channel mixing.
    pub fn smooth<R: Rng>(rng: &mut R, cin: usize, cout: usize, gain: f64, bias_std: f64, texture: f64) -> Self {
        let std = gain / (cin as f64).sqrt();
        ConvTranspose2d {
            cin,
            cout,
            weights: separable_weights(rng, &[0.25, 0.75, 0.75, 0.25], cin, cout, std, texture),
            bias: gaussian_vec(rng, cout, bias_std),
        }
    }

    pub fn forward(&self, x: ArrayView3<'_, f64>) -> Array3<f64> {
        let (h, w, cin) = x.dim();
        assert_eq!(cin, self.cin, "transposed conv input channels");
        let xs = contiguous(x);
        let cout = self.cout;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; oh * ow * cout];
        for px in out.chunks_mut(cout) {
            px.copy_from_slice(&self.bias);
        }
        for iy in 0..h {
            for ix in 0..w {
                let ib = (iy * w + ix) * cin;
                for ky in 0..UP_K {
                    let oy = 2 * iy as isize - 1 + ky as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kx in 0..UP_K {
                        let ox = 2 * ix as isize - 1 + kx as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        let ob = (oy as usize * ow + ox as usize) * cout;
                        let wb = (ky * UP_K + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = xs[ib + ci];
                            let wrow = &self.weights[wb + ci * cout..wb + (ci + 1) * cout];
                            for (o, wv) in out[ob..ob + cout].iter_mut().zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((oh, ow, cout), out).expect("shape")
    }

    pub fn adjoint(&self, g: ArrayView3<'_, f64>) -> Array3<f64> {
        let (oh, ow, cout) = g.dim();
        assert_eq!(cout, self.cout, "transposed conv output channels");
        let gs = contiguous(g);
        let (h, w, cin) = (oh / 2, ow / 2, self.cin);
        let mut gx = vec![0.0; h * w * cin];
        for iy in 0..h {
            for ix in 0..w {
                let ib = (iy * w + ix) * cin;
                for ky in 0..UP_K {
                    let oy = 2 * iy as isize - 1 + ky as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kx in 0..UP_K {
                        let ox = 2 * ix as isize - 1 + kx as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        let ob = (oy as usize * ow + ox as usize) * cout;
                        let grow = &gs[ob..ob + cout];
                        let wb = (ky * UP_K + kx) * cin * cout;
                        for ci in 0..cin {
                            let wrow = &self.weights[wb + ci * cout..wb + (ci + 1) * cout];
                            let mut s = 0.0;
                            for (gv, wv) in grow.iter().zip(wrow) {
                                s += gv * wv;
                            }
                            gx[ib + ci] += s;
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((h, w, cin), gx).expect("shape")
    }
}

/// 2x2 average pooling; odd trailing rows/columns average over the pixels
/// that exist, so any input of size >= 1 yields a non-empty output.
pub fn avg_pool2(x: ArrayView3<'_, f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Array3::zeros((oh, ow, c));
    for oy in 0..oh {
        for ox in 0..ow {
            let ys = 2 * oy..(2 * oy + 2).min(h);
            let xs = 2 * ox..(2 * ox + 2).min(w);
            let n = (ys.len() * xs.len()) as f64;
            for y in ys.clone() {
                for xx in xs.clone() {
                    for ch in 0..c {
                        out[[oy, ox, ch]] += x[[y, xx, ch]] / n;
                    }
                }
            }
        }
    }
    out
}

pub fn avg_pool2_adjoint(g: ArrayView3<'_, f64>, input_hw: (usize, usize)) -> Array3<f64> {
    let (h, w) = input_hw;
    let (oh, ow, c) = g.dim();
    let mut gx = Array3::zeros((h, w, c));
    for oy in 0..oh {
        for ox in 0..ow {
            let ys = 2 * oy..(2 * oy + 2).min(h);
            let xs = 2 * ox..(2 * ox + 2).min(w);
            let n = (ys.len() * xs.len()) as f64;
            for y in ys.clone() {
                for xx in xs.clone() {
                    for ch in 0..c {
                        gx[[y, xx, ch]] += g[[oy, ox, ch]] / n;
                    }
                }
            }
        }
    }
    gx
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
