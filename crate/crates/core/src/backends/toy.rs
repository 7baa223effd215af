//! Deterministic, smooth stand-ins for the pretrained networks.
//!
//! Everything is built from a seed at construction time and frozen
//! afterwards. All maps are C-infinity in their inputs (tanh, sigmoid,
//! softplus, softmax, Gaussians), so central finite differences are a valid
//! check on every vector-Jacobian product. The outputs are not meant to look
//! like faces.

use std::sync::OnceLock;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ops::{avg_pool2, avg_pool2_adjoint, sigmoid, softplus, Conv2d, ConvTranspose2d};
use super::{FeatureExtractorPort, GeneratorPort, KeypointExtractorPort, SegmenterPort};
use crate::domain::{luma, FTensor, Image, KeypointHeatmap, LatentCode, SegHeatmap, NUM_KEYPOINTS};
use crate::error::{Error, Result};

const CONST_INPUT_RES: usize = 4;
const FEATURE_CHANNELS: [usize; 4] = [8, 12, 16, 16];
const FEATURE_MEAN: f64 = 0.45;
const FEATURE_STD: f64 = 0.25;
/// Relative size of the non-smooth part of the generator kernels.
const TEXTURE: f64 = 0.3;
const POS_FEATURES: usize = 5;
/// Keeps the moment weights strictly positive on black images.
const MOMENT_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub seed: u64,
    pub resolution: usize,
    pub layers: usize,
    pub dim: usize,
    pub channels: usize,
    pub keypoint_sigma: f64,
    /// Multiplies every feature-extractor output (internal activations are
    /// unscaled).
    pub feature_scale: f64,
    /// Logit multiplier of the segmenter's softmax.
    pub seg_temperature: f64,
    pub num_classes: usize,
    pub hair_class: u16,
    pub background_class: u16,
    pub mean_latent_samples: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 0,
            resolution: 64,
            layers: 8,
            dim: 64,
            channels: 8,
            keypoint_sigma: 2.0,
            feature_scale: 0.015,
            seg_temperature: 8.0,
            num_classes: crate::domain::NUM_SEMANTIC_CLASSES,
            hair_class: 10,
            background_class: 0,
            mean_latent_samples: 10_000,
        }
    }
}

impl ToyConfig {
    fn upsamplings(&self) -> Result<usize> {
        let r = self.resolution;
        if r < CONST_INPUT_RES || r % CONST_INPUT_RES != 0 || !(r / CONST_INPUT_RES).is_power_of_two() {
            return Err(Error::Config(format!(
                "toy resolution {r} must be 4 times a power of two"
            )));
        }
        Ok((r / CONST_INPUT_RES).trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let ups = self.upsamplings()?;
        if self.layers < 2 || ups > self.layers - 2 {
            return Err(Error::Config(format!(
                "toy generator needs at least {} layers for resolution {}",
                ups + 2,
                self.resolution
            )));
        }
        if self.dim == 0 || self.channels == 0 {
            return Err(Error::Config("toy dims must be positive".into()));
        }
        if self.num_classes < 2
            || self.hair_class as usize >= self.num_classes
            || self.background_class as usize >= self.num_classes
            || self.hair_class == self.background_class
        {
            return Err(Error::Config("invalid toy class taxonomy".into()));
        }
        if self.keypoint_sigma <= 0.0 || self.feature_scale <= 0.0 || self.seg_temperature <= 0.0 || self.mean_latent_samples == 0 {
            return Err(Error::Config("keypoint sigma and latent samples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum BlockOp {
    Same(Conv2d),
    Up(ConvTranspose2d),
    ToRgb(Conv2d, Tint),
}

/// Style-driven color shift applied only where the base color is dark,
/// standing in for the hair-specific channels of a real style generator.
/// It reads the half of the last style vector that the affine ignores.
#[derive(Clone, Debug)]
struct Tint {
    weights: Array2<f64>,
}

const TINT_SHARPNESS: f64 = 10.0;
const TINT_THRESHOLD: f64 = 0.3;

/// Style-modulated layer: scale input channels by `1 + A w`, convolve,
/// apply a smooth activation.
#[derive(Clone, Debug)]
struct StyleBlock {
    affine: Array2<f64>,
    op: BlockOp,
}

struct BlockTrace {
    input: Array3<f64>,
    scale: Array1<f64>,
    output: Array3<f64>,
    tint: Option<TintTrace>,
}

struct TintTrace {
    base: Array3<f64>,
    gate: Array2<f64>,
    shift: Array1<f64>,
}

impl StyleBlock {
    fn forward(&self, x: ArrayView3<'_, f64>, style: ArrayView1<'_, f64>) -> BlockTrace {
        let scale = self.affine.dot(&style) + 1.0;
        let xm = &x * &scale;
        let z = match &self.op {
            BlockOp::Same(c) | BlockOp::ToRgb(c, _) => c.forward(xm.view()),
            BlockOp::Up(c) => c.forward(xm.view()),
        };
        let (output, tint) = match &self.op {
            BlockOp::ToRgb(_, t) => {
                let base = z.mapv(sigmoid);
                let (h, w, _) = base.dim();
                let gate = Array2::from_shape_fn((h, w), |(y, x)| {
                    let l = luma(base[[y, x, 0]], base[[y, x, 1]], base[[y, x, 2]]);
                    sigmoid(TINT_SHARPNESS * (TINT_THRESHOLD - l))
                });
                let shift = t.weights.dot(&style).mapv(f64::tanh);
                let mut out = base.clone();
                for ((y, x, c), v) in out.indexed_iter_mut() {
                    *v += gate[[y, x]] * shift[c] * *v * (1.0 - *v);
                }
                (out, Some(TintTrace { base, gate, shift }))
            }
            _ => (z.mapv(f64::tanh), None),
        };
        BlockTrace {
            input: x.to_owned(),
            scale,
            output,
            tint,
        }
    }

    /// Returns `(grad_input, grad_style)`.
    fn backward(&self, t: &BlockTrace, grad_out: &Array3<f64>) -> (Array3<f64>, Array1<f64>) {
        let mut gstyle = Array1::zeros(self.affine.ncols());
        let gz = match (&self.op, &t.tint) {
            (BlockOp::ToRgb(_, tint), Some(tr)) => {
                let (h, w, _) = grad_out.dim();
                let coef = [luma(1.0, 0.0, 0.0), luma(0.0, 1.0, 0.0), luma(0.0, 0.0, 1.0)];
                let mut gshift = Array1::<f64>::zeros(3);
                let mut gz = Array3::zeros(grad_out.dim());
                for y in 0..h {
                    for x in 0..w {
                        let g = tr.gate[[y, x]];
                        let mut ggate = 0.0;
                        for c in 0..3 {
                            let b = tr.base[[y, x, c]];
                            let go = grad_out[[y, x, c]];
                            gshift[c] += go * g * b * (1.0 - b);
                            ggate += go * tr.shift[c] * b * (1.0 - b);
                        }
                        let gl = -TINT_SHARPNESS * g * (1.0 - g) * ggate;
                        for c in 0..3 {
                            let b = tr.base[[y, x, c]];
                            let gb = grad_out[[y, x, c]] * (1.0 + g * tr.shift[c] * (1.0 - 2.0 * b)) + gl * coef[c];
                            gz[[y, x, c]] = gb * b * (1.0 - b);
                        }
                    }
                }
                let gt = &gshift * &tr.shift.mapv(|a| 1.0 - a * a);
                gstyle += &tint.weights.t().dot(&gt);
                gz
            }
            _ => grad_out * &t.output.mapv(|y| 1.0 - y * y),
        };
        let gxm = match &self.op {
            BlockOp::Same(c) | BlockOp::ToRgb(c, _) => c.adjoint(gz.view()),
            BlockOp::Up(c) => c.adjoint(gz.view()),
        };
        let gscale = (&gxm * &t.input).sum_axis(Axis(0)).sum_axis(Axis(0));
        let gx = &gxm * &t.scale;
        gstyle += &self.affine.t().dot(&gscale);
        (gx, gstyle)
    }
}

/// Color/position driven face parser: per-pixel softmax over affine
/// functions of a box-blurred image and smooth positional features.
#[derive(Clone, Debug)]
struct SegHead {
    color: Array2<f64>,
    position: Array2<f64>,
    bias: Array1<f64>,
}

/// The seeded toy networks behind every port.
#[derive(Debug)]
pub struct ToyBackend {
    config: ToyConfig,
    const_input: Array3<f64>,
    blocks: Vec<StyleBlock>,
    block_res: Vec<usize>,
    mapping: (Array2<f64>, Array2<f64>),
    feature_convs: Vec<Conv2d>,
    seg: SegHead,
    template: Array2<f64>,
    mean_w: OnceLock<Array1<f64>>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

impl ToyBackend {
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let ups = config.upsamplings()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.channels;
        let d = config.dim;

        let const_input = Array3::from_shape_fn((CONST_INPUT_RES, CONST_INPUT_RES, c), |_| {
            StandardNormal.sample(&mut rng)
        });

        let mut blocks = Vec::with_capacity(config.layers);
        let mut block_res = Vec::with_capacity(config.layers);
        let mut res = CONST_INPUT_RES;
        for j in 0..config.layers {
            let mut affine = normal_matrix(&mut rng, c, d, 0.5 / (d as f64).sqrt());
            let op = if j == config.layers - 1 {
                let conv = Conv2d::random(&mut rng, 1, c, 3, 2.0, 0.2);
                let split = d.div_ceil(2);
                let mut weights = normal_matrix(&mut rng, 3, d, 1.2 / ((d - split).max(1) as f64).sqrt());
                weights.slice_mut(ndarray::s![.., ..split]).fill(0.0);
                // chromatic only: keeps brightness, and with it the hair segmentation
                let mean = weights.mean_axis(Axis(0)).expect("three rows");
                weights -= &mean;
                affine.slice_mut(ndarray::s![.., split..]).fill(0.0);
                BlockOp::ToRgb(conv, Tint { weights })
            } else if (1..=ups).contains(&j) {
                res *= 2;
                BlockOp::Up(ConvTranspose2d::smooth(&mut rng, c, c, 1.6, 0.1, TEXTURE))
            } else {
                BlockOp::Same(Conv2d::smooth(&mut rng, c, c, 1.6, 0.1, TEXTURE))
            };
            blocks.push(StyleBlock { affine, op });
            block_res.push(res);
        }

        let mapping = (
            normal_matrix(&mut rng, d, d, 1.5 / (d as f64).sqrt()),
            normal_matrix(&mut rng, d, d, 1.0 / (d as f64).sqrt()),
        );

        let mut feature_convs = Vec::new();
        let mut cin = 3;
        for &cout in FEATURE_CHANNELS.iter() {
            feature_convs.push(Conv2d::random(&mut rng, 3, cin, cout, 1.4, 0.1));
            cin = cout;
        }

        let seg = Self::seg_head(&mut rng, &config);
        let template = keypoint_template();

        Ok(ToyBackend {
            config,
            const_input,
            blocks,
            block_res,
            mapping,
            feature_convs,
            seg,
            template,
            mean_w: OnceLock::new(),
        })
    }

    fn seg_head(rng: &mut ChaCha8Rng, cfg: &ToyConfig) -> SegHead {
        let k = cfg.num_classes;
        let mut color = normal_matrix(rng, k, 3, 0.6);
        let mut position = normal_matrix(rng, k, POS_FEATURES, 0.5);
        let mut bias = Array1::from_shape_fn(k, |_| Normal::new(-0.6, 0.3).unwrap().sample(rng));
        // hair: dark pixels, more likely towards the top of the frame
        let h = cfg.hair_class as usize;
        color.row_mut(h).assign(&ndarray::arr1(&[-2.6, -2.6, -2.6]));
        position.row_mut(h).assign(&ndarray::arr1(&[0.0, -0.9, 0.0, 0.0, 0.0]));
        bias[h] = 2.8;
        // background: bright pixels near the border
        let b = cfg.background_class as usize;
        color.row_mut(b).assign(&ndarray::arr1(&[1.2, 1.2, 1.2]));
        position.row_mut(b).assign(&ndarray::arr1(&[0.0, 0.0, 1.0, 1.0, 0.0]));
        bias[b] = -1.6;
        SegHead {
            color,
            position,
            bias,
        }
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    fn map_latent(&self, z: ArrayView1<'_, f64>) -> Array1<f64> {
        let h = self.mapping.0.dot(&z).mapv(f64::tanh);
        self.mapping.1.dot(&h)
    }

    fn broadcast(&self, v: &Array1<f64>, split: usize) -> Result<LatentCode> {
        let rows = Array2::from_shape_fn((self.config.layers, self.config.dim), |(_, j)| v[j]);
        LatentCode::new(rows, split)
    }

    /// A random W+ code (one mapped vector repeated on every layer).
    pub fn sample_latent(&self, seed: u64, split: usize) -> Result<LatentCode> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Array1::from_shape_fn(self.config.dim, |_| StandardNormal.sample(&mut rng));
        self.broadcast(&self.map_latent(z.view()), split)
    }

    fn check_split(&self, split: usize) -> Result<()> {
        if split < 1 || split >= self.config.layers {
            return Err(Error::arg(format!(
                "split {split} must satisfy 1 <= m < {}",
                self.config.layers
            )));
        }
        Ok(())
    }

    fn check_styles(&self, styles: ArrayView2<'_, f64>) -> Result<()> {
        if styles.ncols() != self.config.dim {
            return Err(Error::arg(format!(
                "style width {} does not match latent dim {}",
                styles.ncols(),
                self.config.dim
            )));
        }
        Ok(())
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let r = self.config.resolution;
        if img.dims() != (r, r) {
            return Err(Error::dim(format!("expected {r}x{r} image, got {:?}", img.dims())));
        }
        Ok(())
    }

    fn run_blocks(&self, start: usize, x: ArrayView3<'_, f64>, styles: ArrayView2<'_, f64>) -> Vec<BlockTrace> {
        let mut traces: Vec<BlockTrace> = Vec::with_capacity(styles.nrows());
        for (i, style) in styles.rows().into_iter().enumerate() {
            let input = match traces.last() {
                Some(t) => t.output.view(),
                None => x.view(),
            };
            let t = self.blocks[start + i].forward(input, style);
            traces.push(t);
        }
        traces
    }

    fn backprop_blocks(&self, start: usize, traces: &[BlockTrace], grad_out: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let mut g = grad_out.clone();
        let mut gstyles = Array2::zeros((traces.len(), self.config.dim));
        for (i, t) in traces.iter().enumerate().rev() {
            let (gx, gs) = self.blocks[start + i].backward(t, &g);
            gstyles.row_mut(i).assign(&gs);
            g = gx;
        }
        (g, gstyles)
    }

    /// Pre-activations of every feature layer.
    fn feature_forward(&self, img: ArrayView3<'_, f64>) -> Vec<Array3<f64>> {
        let mut out = Vec::with_capacity(self.feature_convs.len());
        let mut x = img.mapv(|v| (v - FEATURE_MEAN) / FEATURE_STD);
        for (i, conv) in self.feature_convs.iter().enumerate() {
            if i > 0 {
                x = avg_pool2(x.view());
            }
            let z = conv.forward(x.view());
            x = z.mapv(softplus);
            out.push(z);
        }
        out
    }

    fn blur(img: ArrayView3<'_, f64>) -> Array3<f64> {
        let (h, w, c) = img.dim();
        let mut out = Array3::zeros((h, w, c));
        for y in 0..h {
            for x in 0..w {
                let ys = y.saturating_sub(1)..(y + 2).min(h);
                let xs = x.saturating_sub(1)..(x + 2).min(w);
                let n = (ys.len() * xs.len()) as f64;
                for yy in ys {
                    for xx in xs.clone() {
                        for ch in 0..c {
                            out[[y, x, ch]] += img[[yy, xx, ch]] / n;
                        }
                    }
                }
            }
        }
        out
    }

    fn blur_adjoint(g: &Array3<f64>) -> Array3<f64> {
        let (h, w, c) = g.dim();
        let mut out = Array3::zeros((h, w, c));
        for y in 0..h {
            for x in 0..w {
                let ys = y.saturating_sub(1)..(y + 2).min(h);
                let xs = x.saturating_sub(1)..(x + 2).min(w);
                let n = (ys.len() * xs.len()) as f64;
                for yy in ys {
                    for xx in xs.clone() {
                        for ch in 0..c {
                            out[[yy, xx, ch]] += g[[y, x, ch]] / n;
                        }
                    }
                }
            }
        }
        out
    }

    fn position_features(y: usize, x: usize, h: usize, w: usize) -> [f64; POS_FEATURES] {
        let xn = 2.0 * (x as f64 + 0.5) / w as f64 - 1.0;
        let yn = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0;
        [xn, yn, xn * xn, yn * yn, xn * yn]
    }

    /// Moment statistics of the luma-squared weight map.
    fn moments(&self, img: &Image) -> Moments {
        let (h, w) = img.dims();
        let data = img.data();
        let mut weights = Array2::zeros((h, w));
        let (mut m0, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let l = luma(data[[y, x, 0]], data[[y, x, 1]], data[[y, x, 2]]);
                let rho = l * l + MOMENT_FLOOR;
                weights[[y, x]] = rho;
                m0 += rho;
                sx += rho * x as f64;
                sy += rho * y as f64;
            }
        }
        let (cx, cy) = (sx / m0, sy / m0);
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for ((y, x), rho) in weights.indexed_iter() {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            sxx += rho * dx * dx;
            syy += rho * dy * dy;
            sxy += rho * dx * dy;
        }
        Moments {
            m0,
            cx,
            cy,
            sxx: sxx / m0,
            syy: syy / m0,
            sxy: sxy / m0,
        }
    }

    fn keypoint_scale(&self) -> f64 {
        self.config.resolution as f64 / 4.0
    }

    /// Bump centers `(x, y)` in pixel coordinates and depths.
    fn keypoint_centers(&self, mo: &Moments) -> Vec<(f64, f64, f64)> {
        let r = self.keypoint_scale();
        let size = (mo.sxx + mo.syy).max(0.0).sqrt() / r;
        self.template
            .rows()
            .into_iter()
            .map(|u| {
                let kx = mo.cx + (mo.sxx * u[0] + mo.sxy * u[1]) / r;
                let ky = mo.cy + (mo.sxy * u[0] + mo.syy * u[1]) / r;
                (kx, ky, u[2] * size)
            })
            .collect()
    }

    /// Centroid of the weights the keypoint head uses.
    pub fn keypoint_centroid(&self, img: &Image) -> (f64, f64) {
        let mo = self.moments(img);
        (mo.cx, mo.cy)
    }
}

struct Moments {
    m0: f64,
    cx: f64,
    cy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}


/// 68 landmark positions on a unit face, `(x, y, depth)`, in the usual
/// ordering: jaw 0-16, brows 17-26, nose 27-35, eyes 36-47, mouth 48-67.
fn keypoint_template() -> Array2<f64> {
    use std::f64::consts::PI;
    let mut pts: Vec<[f64; 3]> = Vec::with_capacity(NUM_KEYPOINTS);
    for i in 0..17 {
        let t = -PI / 2.0 + PI * i as f64 / 16.0;
        pts.push([0.9 * t.sin(), 0.1 + 0.8 * t.cos(), 0.3 * t.cos()]);
    }
    for side in [-1.0, 1.0] {
        for k in 0..5 {
            let x = side * (0.2 + 0.12 * k as f64);
            let arch = (PI * k as f64 / 4.0).sin();
            pts.push([x, -0.35 - 0.06 * arch, 0.6]);
        }
    }
    for k in 0..4 {
        pts.push([0.0, -0.25 + 0.1 * k as f64, 0.7 + 0.08 * k as f64]);
    }
    for k in 0..5 {
        pts.push([-0.12 + 0.06 * k as f64, 0.15, 0.8]);
    }
    for side in [-1.0, 1.0] {
        for k in 0..6 {
            let t = 2.0 * PI * k as f64 / 6.0;
            pts.push([side * 0.35 + 0.1 * t.cos(), -0.2 + 0.04 * t.sin(), 0.55]);
        }
    }
    for k in 0..12 {
        let t = 2.0 * PI * k as f64 / 12.0;
        pts.push([0.3 * t.cos(), 0.45 + 0.12 * t.sin(), 0.65]);
    }
    for k in 0..8 {
        let t = 2.0 * PI * k as f64 / 8.0;
        pts.push([0.2 * t.cos(), 0.45 + 0.05 * t.sin(), 0.66]);
    }
    debug_assert_eq!(pts.len(), NUM_KEYPOINTS);
    Array2::from_shape_fn((NUM_KEYPOINTS, 3), |(i, j)| pts[i][j])
}

impl GeneratorPort for ToyBackend {
    fn latent_shape(&self) -> (usize, usize) {
        (self.config.layers, self.config.dim)
    }

    fn resolution(&self) -> (usize, usize) {
        (self.config.resolution, self.config.resolution)
    }

    fn f_shape(&self, split: usize) -> Result<(usize, usize, usize)> {
        self.check_split(split)?;
        let r = self.block_res[split - 1];
        Ok((r, r, self.config.channels))
    }

    fn mean_latent(&self, split: usize) -> Result<LatentCode> {
        let mean = self.mean_w.get_or_init(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x6d65_616e);
            let n = self.config.mean_latent_samples;
            let mut acc = Array1::zeros(self.config.dim);
            for _ in 0..n {
                let z = Array1::from_shape_fn(self.config.dim, |_| StandardNormal.sample(&mut rng));
                acc += &self.map_latent(z.view());
            }
            acc / n as f64
        });
        self.broadcast(mean, split)
    }

    fn features(&self, head: ArrayView2<'_, f64>) -> Result<FTensor> {
        self.check_split(head.nrows())?;
        self.check_styles(head)?;
        let traces = self.run_blocks(0, self.const_input.view(), head);
        FTensor::new(finite_output(traces)?)
    }

    fn synthesize_from(&self, f: &FTensor, tail: ArrayView2<'_, f64>) -> Result<Image> {
        self.check_styles(tail)?;
        let split = self.config.layers.checked_sub(tail.nrows()).unwrap_or(0);
        let expected = self.f_shape(split)?;
        if f.shape() != expected {
            return Err(Error::dim(format!("F shape {:?}, expected {expected:?}", f.shape())));
        }
        let traces = self.run_blocks(split, f.data().view(), tail);
        Image::new(finite_output(traces)?)
    }

    fn features_vjp(&self, head: ArrayView2<'_, f64>, grad_f: &Array3<f64>) -> Result<Array2<f64>> {
        self.check_split(head.nrows())?;
        self.check_styles(head)?;
        let traces = self.run_blocks(0, self.const_input.view(), head);
        let out_dim = traces.last().expect("non-empty head").output.dim();
        if grad_f.dim() != out_dim {
            return Err(Error::dim(format!("F gradient {:?} vs {out_dim:?}", grad_f.dim())));
        }
        Ok(self.backprop_blocks(0, &traces, grad_f).1)
    }

    fn synthesize_from_vjp(
        &self,
        f: &FTensor,
        tail: ArrayView2<'_, f64>,
        grad_img: &Array3<f64>,
    ) -> Result<(Array3<f64>, Array2<f64>)> {
        self.check_styles(tail)?;
        let split = self.config.layers.checked_sub(tail.nrows()).unwrap_or(0);
        let expected = self.f_shape(split)?;
        if f.shape() != expected {
            return Err(Error::dim(format!("F shape {:?}, expected {expected:?}", f.shape())));
        }
        let r = self.config.resolution;
        if grad_img.dim() != (r, r, 3) {
            return Err(Error::dim(format!("image gradient {:?}", grad_img.dim())));
        }
        let traces = self.run_blocks(split, f.data().view(), tail);
        Ok(self.backprop_blocks(split, &traces, grad_img))
    }
}

/// Last block output; activations that overflowed mean the latent has
/// diverged.
fn finite_output(traces: Vec<BlockTrace>) -> Result<Array3<f64>> {
    let out = traces.into_iter().last().expect("at least one block").output;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::diverged("generator", 0));
    }
    Ok(out)
}

impl FeatureExtractorPort for ToyBackend {
    fn num_layers(&self) -> usize {
        self.feature_convs.len()
    }

    fn extract(&self, img: ArrayView3<'_, f64>) -> Result<Vec<Array3<f64>>> {
        let (h, w, c) = img.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::dim(format!("feature input {:?}", img.dim())));
        }
        Ok(self
            .feature_forward(img)
            .into_iter()
            .map(|z| z.mapv(|v| self.config.feature_scale * softplus(v)))
            .collect())
    }

    fn vjp(&self, img: ArrayView3<'_, f64>, grads: &[Array3<f64>]) -> Result<Array3<f64>> {
        let (h, w, c) = img.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::dim(format!("feature input {:?}", img.dim())));
        }
        let trace = self.feature_forward(img);
        if grads.len() != trace.len() {
            return Err(Error::dim(format!("{} layer gradients for {} layers", grads.len(), trace.len())));
        }
        let mut carry: Option<Array3<f64>> = None;
        let mut grad_img = None;
        for (i, z) in trace.iter().enumerate().rev() {
            if grads[i].dim() != z.dim() {
                return Err(Error::dim(format!("layer {i} gradient {:?} vs {:?}", grads[i].dim(), z.dim())));
            }
            let mut ga = &grads[i] * self.config.feature_scale;
            if let Some(c) = carry.take() {
                ga += &c;
            }
            let gz = ga * &z.mapv(sigmoid);
            let gin = self.feature_convs[i].adjoint(gz.view());
            if i > 0 {
                let prev = trace[i - 1].dim();
                carry = Some(avg_pool2_adjoint(gin.view(), (prev.0, prev.1)));
            } else {
                grad_img = Some(gin / FEATURE_STD);
            }
        }
        Ok(grad_img.expect("at least one layer"))
    }
}

impl KeypointExtractorPort for ToyBackend {
    fn extract(&self, img: &Image) -> Result<KeypointHeatmap> {
        self.check_image(img)?;
        let (h, w) = img.dims();
        let mo = self.moments(img);
        let centers = self.keypoint_centers(&mo);
        let inv = 1.0 / (2.0 * self.config.keypoint_sigma.powi(2));
        let mut heat = Array3::zeros((NUM_KEYPOINTS, h, w));
        let mut points = Array2::zeros((NUM_KEYPOINTS, 3));
        for (j, &(kx, ky, kz)) in centers.iter().enumerate() {
            let mut best = (f64::NEG_INFINITY, 0, 0);
            for y in 0..h {
                let dy = y as f64 - ky;
                for x in 0..w {
                    let dx = x as f64 - kx;
                    let v = (-(dx * dx + dy * dy) * inv).exp();
                    heat[[j, y, x]] = v;
                    if v > best.0 {
                        best = (v, y, x);
                    }
                }
            }
            points[[j, 0]] = best.2 as f64;
            points[[j, 1]] = best.1 as f64;
            points[[j, 2]] = kz;
        }
        KeypointHeatmap::new(heat, points)
    }

    fn vjp(&self, img: &Image, grad_heatmaps: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_image(img)?;
        let (h, w) = img.dims();
        if grad_heatmaps.dim() != (NUM_KEYPOINTS, h, w) {
            return Err(Error::dim(format!("heatmap gradient {:?}", grad_heatmaps.dim())));
        }
        let mo = self.moments(img);
        let centers = self.keypoint_centers(&mo);
        let sigma2 = self.config.keypoint_sigma.powi(2);
        let inv = 1.0 / (2.0 * sigma2);
        let r = self.keypoint_scale();

        // heatmaps -> centers -> moments
        let (mut gcx, mut gcy, mut gsxx, mut gsyy, mut gsxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (j, &(kx, ky, _)) in centers.iter().enumerate() {
            let (mut gkx, mut gky) = (0.0, 0.0);
            for y in 0..h {
                let dy = y as f64 - ky;
                for x in 0..w {
                    let dx = x as f64 - kx;
                    let v = (-(dx * dx + dy * dy) * inv).exp();
                    let g = grad_heatmaps[[j, y, x]] * v / sigma2;
                    gkx += g * dx;
                    gky += g * dy;
                }
            }
            let (ux, uy) = (self.template[[j, 0]], self.template[[j, 1]]);
            gcx += gkx;
            gcy += gky;
            gsxx += gkx * ux / r;
            gsyy += gky * uy / r;
            gsxy += (gkx * uy + gky * ux) / r;
        }

        // moments -> per-pixel weights -> luma -> rgb
        let data = img.data();
        let mut grad = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - mo.cx;
                let dy = y as f64 - mo.cy;
                let grho = (gcx * dx
                    + gcy * dy
                    + gsxx * (dx * dx - mo.sxx)
                    + gsyy * (dy * dy - mo.syy)
                    + gsxy * (dx * dy - mo.sxy))
                    / mo.m0;
                let l = luma(data[[y, x, 0]], data[[y, x, 1]], data[[y, x, 2]]);
                let gl = 2.0 * l * grho;
                grad[[y, x, 0]] = 0.299 * gl;
                grad[[y, x, 1]] = 0.587 * gl;
                grad[[y, x, 2]] = 0.114 * gl;
            }
        }
        Ok(grad)
    }
}

impl ToyBackend {
    fn seg_logits(&self, img: &Image) -> Array3<f64> {
        let (h, w) = img.dims();
        let blurred = Self::blur(img.data().view());
        let k = self.config.num_classes;
        let mut logits = Array3::zeros((k, h, w));
        for y in 0..h {
            for x in 0..w {
                let pos = Self::position_features(y, x, h, w);
                for c in 0..k {
                    let mut v = self.seg.bias[c];
                    for ch in 0..3 {
                        v += self.seg.color[[c, ch]] * blurred[[y, x, ch]];
                    }
                    for (b, p) in pos.iter().enumerate() {
                        v += self.seg.position[[c, b]] * p;
                    }
                    logits[[c, y, x]] = self.config.seg_temperature * v;
                }
            }
        }
        logits
    }

    fn softmax_classes(mut logits: Array3<f64>) -> Array3<f64> {
        let (k, h, w) = logits.dim();
        for y in 0..h {
            for x in 0..w {
                let mut mx = f64::NEG_INFINITY;
                for c in 0..k {
                    mx = mx.max(logits[[c, y, x]]);
                }
                let mut sum = 0.0;
                for c in 0..k {
                    let e = (logits[[c, y, x]] - mx).exp();
                    logits[[c, y, x]] = e;
                    sum += e;
                }
                for c in 0..k {
                    logits[[c, y, x]] /= sum;
                }
            }
        }
        logits
    }
}

impl SegmenterPort for ToyBackend {
    fn classes(&self) -> usize {
        self.config.num_classes
    }

    fn segment_probs(&self, img: &Image) -> Result<SegHeatmap> {
        self.check_image(img)?;
        SegHeatmap::new(Self::softmax_classes(self.seg_logits(img)))
    }

    fn vjp(&self, img: &Image, grad_probs: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_image(img)?;
        let (h, w) = img.dims();
        let k = self.config.num_classes;
        if grad_probs.dim() != (k, h, w) {
            return Err(Error::dim(format!("probability gradient {:?}", grad_probs.dim())));
        }
        let probs = Self::softmax_classes(self.seg_logits(img));
        let mut g_blur = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                let mut dot = 0.0;
                for c in 0..k {
                    dot += probs[[c, y, x]] * grad_probs[[c, y, x]];
                }
                for c in 0..k {
                    let gl = self.config.seg_temperature * probs[[c, y, x]] * (grad_probs[[c, y, x]] - dot);
                    for ch in 0..3 {
                        g_blur[[y, x, ch]] += self.seg.color[[c, ch]] * gl;
                    }
                }
            }
        }
        Ok(Self::blur_adjoint(&g_blur))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn backend() -> ToyBackend {
        ToyBackend::new(ToyConfig {
            mean_latent_samples: 200,
            ..ToyConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn default_shapes() {
        let b = backend();
        assert_eq!(b.f_shape(3).unwrap(), (16, 16, 8));
        let w = b.sample_latent(1, 3).unwrap();
        let img = b.synthesize(&w).unwrap();
        assert_eq!(img.dims(), (64, 64));
    }

    #[test]
    fn rejects_bad_split_and_width() {
        let b = backend();
        assert!(b.f_shape(0).is_err());
        assert!(b.f_shape(8).is_err());
        assert!(b.features(Array2::zeros((3, 5)).view()).is_err());
    }

    #[test]
    fn construction_is_deterministic() {
        let a = backend();
        let b = backend();
        let w = a.sample_latent(9, 3).unwrap();
        assert_eq!(a.synthesize(&w).unwrap(), b.synthesize(&w).unwrap());
    }

    #[test]
    fn template_has_68_points() {
        assert_eq!(keypoint_template().nrows(), NUM_KEYPOINTS);
    }

    #[test]
    fn invalid_resolution_is_config_error() {
        let cfg = ToyConfig {
            resolution: 48,
            ..ToyConfig::default()
        };
        assert!(matches!(ToyBackend::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn synthesize_vjp_matches_finite_differences() {
        let b = backend();
        let w = b.sample_latent(2, 3).unwrap();
        let probe = b.synthesize(&b.sample_latent(7, 3).unwrap()).unwrap().data().to_owned();
        let objective = |w: &LatentCode| (b.synthesize(w).unwrap().data() * &probe).sum();
        let grad = b.synthesize_vjp(&w, &probe).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..4 {
            let dir = Array2::from_shape_fn(w.vectors().dim(), |_| rng.random_range(-1.0..1.0));
            let h = 1e-5;
            let plus = LatentCode::new(w.vectors() + &(&dir * h), 3).unwrap();
            let minus = LatentCode::new(w.vectors() - &(&dir * h), 3).unwrap();
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = (&grad * &dir).sum();
            assert!((fd - an).abs() <= 1e-6 * fd.abs().max(1.0), "{fd} vs {an}");
        }
    }
}
