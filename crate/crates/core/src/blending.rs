//! Latent blending and final feature composition.

use log::{debug, warn};
use ndarray::{concatenate, Array2, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::alignment::extract_hair_mask;
use crate::backends::Ports;
use crate::domain::{check_same_dims, BinaryMask, FTensor, Image, LatentCode, MaskTriplet, SoftTriplet};
use crate::error::{Error, Result};
use crate::losses::{gram_matrix, masked_l1_distance, style_distance_to_grams, LossBreakdown};
use crate::optim::{Adam, DEFAULT_LEARNING_RATE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlendMode {
    /// `w_inpaint + W * w_align`
    #[default]
    Additive,
    /// `(1 - W) * w_inpaint + W * w_align`
    Convex,
}

/// Elementwise latent blend. `w_weight` is either `L x D` or `L x 1`
/// (one coefficient per layer, broadcast along the vector).
pub fn blend_latents(w_inpaint: &LatentCode, w_align: &LatentCode, w_weight: &Array2<f64>, mode: BlendMode) -> Result<LatentCode> {
    if !w_inpaint.same_shape(w_align) {
        return Err(Error::dim(format!(
            "blend inputs {:?} vs {:?}",
            w_inpaint.vectors().dim(),
            w_align.vectors().dim()
        )));
    }
    let (l, d) = w_inpaint.vectors().dim();
    let wd = w_weight.dim();
    if wd != (l, d) && wd != (l, 1) {
        return Err(Error::dim(format!("blend weight {wd:?} for latents {:?}", (l, d))));
    }
    let weight = w_weight.broadcast((l, d)).expect("checked shape");
    let mut out = w_inpaint.vectors().clone();
    Zip::from(&mut out)
        .and(w_align.vectors())
        .and(&weight)
        .for_each(|o, &a, &k| match mode {
            BlendMode::Additive => *o += k * a,
            BlendMode::Convex => *o = (1.0 - k) * *o + k * a,
        });
    LatentCode::new(out, w_inpaint.split())
}

/// `hair * f_align + blend * f_blend + keep * f_src`, masks broadcast over
/// channels.
pub fn compose_final_f(f_align: &FTensor, f_blend: &FTensor, f_src: &FTensor, masks: &SoftTriplet) -> Result<FTensor> {
    let shape = f_src.shape();
    if f_align.shape() != shape || f_blend.shape() != shape {
        return Err(Error::dim(format!(
            "compose F shapes {:?}, {:?}, {:?}",
            f_align.shape(),
            f_blend.shape(),
            shape
        )));
    }
    check_same_dims(masks.dims(), (shape.0, shape.1), "compose masks")?;
    let mut out = Array3::zeros(shape);
    Zip::indexed(&mut out)
        .and(f_align.data())
        .and(f_blend.data())
        .and(f_src.data())
        .for_each(|(y, x, _), o, &a, &b, &s| {
            *o = masks.hair[[y, x]] * a + masks.blend[[y, x]] * b + masks.keep[[y, x]] * s;
        });
    FTensor::new(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda_hair_percept: f64,
    pub lambda_hair_style: f64,
    pub mode: BlendMode,
    /// One weight per layer instead of one per latent entry.
    pub per_layer_weight: bool,
    pub hair_class: u16,
}

impl Default for BlendConfig {
    fn default() -> Self {
        BlendConfig {
            steps: 400,
            learning_rate: DEFAULT_LEARNING_RATE,
            lambda_hair_percept: 1.0,
            lambda_hair_style: 1.0,
            mode: BlendMode::Additive,
            per_layer_weight: false,
            hair_class: 10,
        }
    }
}

/// Fixed outputs of the earlier stages.
#[derive(Clone, Debug)]
pub struct BlendInputs<'a> {
    pub w_inpaint: &'a LatentCode,
    pub w_align: &'a LatentCode,
    pub f_src: &'a FTensor,
    pub i_src: &'a Image,
    pub i_align: &'a Image,
    pub i_trg: &'a Image,
    pub trg_hair: &'a BinaryMask,
    pub masks: &'a MaskTriplet,
}

#[derive(Clone, Debug)]
pub struct BlendResult {
    pub w_weight: Array2<f64>,
    pub w_blend: LatentCode,
    pub f_final: FTensor,
    pub i_final: Image,
    pub trace: Vec<LossBreakdown>,
    pub final_losses: LossBreakdown,
}

impl BlendResult {
    pub fn initial_total(&self) -> f64 {
        self.trace.first().map_or(f64::NAN, LossBreakdown::total)
    }

    pub fn final_total(&self) -> f64 {
        self.final_losses.total()
    }
}

/// The blending objective with everything that does not depend on the
/// weight precomputed.
pub struct BlendObjective<'a> {
    inputs: BlendInputs<'a>,
    ports: &'a Ports,
    cfg: &'a BlendConfig,
    soft: SoftTriplet,
    f_align: FTensor,
    feats_src: Vec<Array3<f64>>,
    feats_align: Vec<Array3<f64>>,
    keep: Array2<f64>,
    hair: Array2<f64>,
    trg_grams: Vec<Array2<f64>>,
}

pub struct BlendEvaluation {
    pub losses: LossBreakdown,
    pub grad: Array2<f64>,
    pub w_blend: LatentCode,
    pub f_final: FTensor,
    pub image: Image,
}

impl<'a> BlendObjective<'a> {
    pub fn new(inputs: BlendInputs<'a>, ports: &'a Ports, cfg: &'a BlendConfig) -> Result<Self> {
        let g = &ports.generator;
        let f_shape = inputs.f_src.shape();
        let soft = inputs.masks.downsample(f_shape.0, f_shape.1)?;
        let f_align = g.features(inputs.w_align.head())?;
        let feat = &ports.features;
        let trg_hair_img = inputs.i_trg.masked(inputs.trg_hair)?;
        let trg_grams = feat
            .extract(trg_hair_img.data().view())?
            .iter()
            .map(|f| gram_matrix(f.view()))
            .collect();
        Ok(BlendObjective {
            feats_src: feat.extract(inputs.i_src.data().view())?,
            feats_align: feat.extract(inputs.i_align.data().view())?,
            keep: inputs.masks.keep.to_values(),
            hair: inputs.masks.hair.to_values(),
            inputs,
            ports,
            cfg,
            soft,
            f_align,
            trg_grams,
        })
    }

    pub fn weight_shape(&self) -> (usize, usize) {
        let (l, d) = self.inputs.w_inpaint.vectors().dim();
        if self.cfg.per_layer_weight {
            (l, 1)
        } else {
            (l, d)
        }
    }

    /// Loss terms at `w_weight` and their gradient w.r.t. it. The generated
    /// hair mask used by the style term is treated as a constant.
    pub fn evaluate(&self, w_weight: &Array2<f64>) -> Result<BlendEvaluation> {
        let g = &self.ports.generator;
        let feat = &self.ports.features;
        let cfg = self.cfg;
        let w_blend = blend_latents(self.inputs.w_inpaint, self.inputs.w_align, w_weight, cfg.mode)?;
        let f_blend = g.features(w_blend.head())?;
        let f_final = compose_final_f(&self.f_align, &f_blend, self.inputs.f_src, &self.soft)?;
        let image = g.synthesize_from(&f_final, w_blend.tail())?;

        let mut losses = LossBreakdown::new();
        let feats = feat.extract(image.data().view())?;
        let (keep, mut g_feats) = masked_l1_distance(&self.feats_src, &feats, &self.keep)?;
        losses.add("keep_percept", 1.0, keep);
        let (hair, g_hair) = masked_l1_distance(&self.feats_align, &feats, &self.hair)?;
        losses.add("hair_percept", cfg.lambda_hair_percept, hair);
        for (a, b) in g_feats.iter_mut().zip(&g_hair) {
            a.scaled_add(cfg.lambda_hair_percept, b);
        }
        let mut g_img = feat.vjp(image.data().view(), &g_feats)?;

        let out_hair = extract_hair_mask(&image, self.ports.segmenter.as_ref(), cfg.hair_class)?;
        let masked = image.masked(&out_hair)?;
        let (style, g_style_feats) = style_distance_to_grams(&self.trg_grams, &feat.extract(masked.data().view())?)?;
        losses.add("hair_style", cfg.lambda_hair_style, style);
        let g_style = feat.vjp(masked.data().view(), &g_style_feats)?;
        Zip::indexed(&mut g_img).and(&g_style).for_each(|(y, x, _), gi, &gs| {
            if out_hair.get(y, x) {
                *gi += cfg.lambda_hair_style * gs;
            }
        });

        let (g_f, g_tail) = g.synthesize_from_vjp(&f_final, w_blend.tail(), &g_img)?;
        let mut g_f_blend = g_f;
        Zip::indexed(&mut g_f_blend).for_each(|(y, x, _), v| *v *= self.soft.blend[[y, x]]);
        let g_head = g.features_vjp(w_blend.head(), &g_f_blend)?;
        let g_wblend = concatenate(Axis(0), &[g_head.view(), g_tail.view()]).expect("matching widths");
        let direction = match cfg.mode {
            BlendMode::Additive => self.inputs.w_align.vectors().clone(),
            BlendMode::Convex => self.inputs.w_align.vectors() - self.inputs.w_inpaint.vectors(),
        };
        let full = g_wblend * direction;
        let grad = if cfg.per_layer_weight {
            full.sum_axis(Axis(1)).insert_axis(Axis(1))
        } else {
            full
        };
        Ok(BlendEvaluation {
            losses,
            grad,
            w_blend,
            f_final,
            image,
        })
    }
}

/// Optimizes the blending weight from zero and returns the last iterate.
pub fn optimize_blend(inputs: BlendInputs<'_>, ports: &Ports, cfg: &BlendConfig) -> Result<BlendResult> {
    if cfg.steps == 0 {
        return Err(Error::arg("blending needs at least one step"));
    }
    if !inputs.w_inpaint.same_shape(inputs.w_align) {
        return Err(Error::dim("blend latents differ in shape"));
    }
    let objective = BlendObjective::new(inputs, ports, cfg)?;
    let mut weight = Array2::zeros(objective.weight_shape());
    let mut opt = Adam::new(weight.dim(), cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let eval = objective.evaluate(&weight).map_err(|e| e.at_step("blend", step))?;
        if !eval.losses.is_finite() || eval.grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::diverged("blend", step));
        }
        debug!("blend step {step}: total {:.6}", eval.losses.total());
        trace.push(eval.losses);
        opt.step(&mut weight, &eval.grad);
    }
    let last = objective.evaluate(&weight).map_err(|e| e.at_step("blend", cfg.steps))?;
    if !last.losses.is_finite() {
        return Err(Error::diverged("blend", cfg.steps));
    }
    let initial = trace[0].total();
    if last.losses.total() > initial {
        warn!("blending ended above its starting loss ({:.6} > {initial:.6})", last.losses.total());
    }
    Ok(BlendResult {
        w_weight: weight,
        w_blend: last.w_blend,
        f_final: last.f_final,
        i_final: last.image,
        trace,
        final_losses: last.losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn code(v: Array2<f64>) -> LatentCode {
        LatentCode::new(v, 1).unwrap()
    }

    #[test]
    fn blend_latent_cases() {
        let inp = code(arr2(&[[2.0, 1.0], [0.5, -1.0]]));
        let al = code(arr2(&[[3.0, 4.0], [1.0, 2.0]]));
        let zero = Array2::zeros((2, 2));
        assert_eq!(blend_latents(&inp, &al, &zero, BlendMode::Additive).unwrap(), inp);
        let ones = Array2::ones((2, 2));
        let sum = blend_latents(&inp, &al, &ones, BlendMode::Additive).unwrap();
        assert_eq!(sum.vectors(), &(inp.vectors() + al.vectors()));
        let half = Array2::from_elem((2, 2), 0.5);
        assert_eq!(blend_latents(&inp, &al, &half, BlendMode::Additive).unwrap().vectors()[[0, 0]], 3.5);
        assert_eq!(blend_latents(&inp, &al, &ones, BlendMode::Convex).unwrap(), al);
        let per_layer = arr2(&[[1.0], [0.0]]);
        let out = blend_latents(&inp, &al, &per_layer, BlendMode::Additive).unwrap();
        assert_eq!(out.vectors(), &arr2(&[[5.0, 5.0], [0.5, -1.0]]));
        assert!(matches!(blend_latents(&inp, &al, &Array2::zeros((2, 3)), BlendMode::Additive), Err(Error::Dimension(_))));
    }

    fn f(v: f64) -> FTensor {
        FTensor::new(Array3::from_shape_fn((2, 2, 3), |(y, x, c)| v + (y * 6 + x * 3 + c) as f64)).unwrap()
    }

    fn soft(hair: [[f64; 2]; 2], blend: [[f64; 2]; 2]) -> SoftTriplet {
        let hair = arr2(&hair);
        let blend = arr2(&blend);
        let keep = 1.0 - &hair - &blend;
        SoftTriplet { hair, blend, keep }
    }

    #[test]
    fn compose_cases() {
        let (a, b, s) = (f(100.0), f(200.0), f(300.0));
        let m = soft([[1.0, 0.0], [0.0, 0.25]], [[0.0, 1.0], [0.0, 0.25]]);
        let out = compose_final_f(&a, &b, &s, &m).unwrap();
        for c in 0..3 {
            assert_eq!(out.data()[[0, 0, c]], a.data()[[0, 0, c]]);
            assert_eq!(out.data()[[0, 1, c]], b.data()[[0, 1, c]]);
            assert_eq!(out.data()[[1, 0, c]], s.data()[[1, 0, c]]);
        }
        let same = compose_final_f(&a, &a, &a, &m).unwrap();
        for (x, y) in same.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let keep_all = soft([[0.0; 2]; 2], [[0.0; 2]; 2]);
        assert_eq!(compose_final_f(&a, &b, &s, &keep_all).unwrap(), s);
        let wrong = FTensor::new(Array3::zeros((2, 2, 2))).unwrap();
        assert!(matches!(compose_final_f(&a, &wrong, &s, &m), Err(Error::Dimension(_))));
    }
}
