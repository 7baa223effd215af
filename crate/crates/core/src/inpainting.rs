//! Objective semantic label construction and segmentation-guided inpainting
//! of the source latent.

use log::{debug, warn};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::backends::Ports;
use crate::domain::{check_same_dims, BinaryMask, Image, LatentCode, SemanticLabel};
use crate::error::{Error, Result};
use crate::losses::segmentation_ce_loss_grad;
use crate::optim::{Adam, DEFAULT_LEARNING_RATE};

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveLabel {
    pub label: SemanticLabel,
    pub inpaint_region: BinaryMask,
    pub keep_region: BinaryMask,
}

/// Target semantics for the source with the aligned target hair pasted in.
///
/// Pixels outside both hair masks keep their source label, pixels under the
/// aligned hair become `hair_class`, and exposed source-hair pixels take the
/// label of the Euclidean-nearest keep pixel that is not itself labeled hair
/// (ties go to the smaller label). With no such pixel the exposed region is
/// filled with `background_class`.
pub fn build_objective_label(
    s_src: &SemanticLabel,
    src_hair: &BinaryMask,
    aligned_hair: &BinaryMask,
    hair_class: u16,
    background_class: u16,
) -> Result<ObjectiveLabel> {
    check_same_dims(s_src.dims(), src_hair.dims(), "objective label source hair")?;
    check_same_dims(s_src.dims(), aligned_hair.dims(), "objective label aligned hair")?;
    let k = s_src.classes();
    if hair_class as usize >= k || background_class as usize >= k {
        return Err(Error::arg(format!("hair/background class outside [0, {k})")));
    }
    let keep = src_hair.not().and(&aligned_hair.not())?;
    let inpaint = src_hair.and(&aligned_hair.not())?;
    let src = s_src.data();
    let donors = Array2::from_shape_fn(src.dim(), |(y, x)| keep.get(y, x) && src[[y, x]] != hair_class);
    let any_donor = donors.iter().any(|d| *d);
    let mut label = src.clone();
    for ((y, x), l) in label.indexed_iter_mut() {
        if aligned_hair.get(y, x) {
            *l = hair_class;
        } else if inpaint.get(y, x) {
            *l = if any_donor {
                nearest_donor_label(src, &donors, y, x)
            } else {
                background_class
            };
        }
    }
    Ok(ObjectiveLabel {
        label: SemanticLabel::new(label, k)?,
        inpaint_region: inpaint,
        keep_region: keep,
    })
}

/// Scans square rings of growing Chebyshev radius; a ring at radius `r`
/// cannot hold anything closer than `r^2`, which bounds the search.
fn nearest_donor_label(labels: &Array2<u16>, donors: &Array2<bool>, y: usize, x: usize) -> u16 {
    let (h, w) = labels.dim();
    let (yi, xi) = (y as i64, x as i64);
    let mut best: Option<(i64, u16)> = None;
    let max_r = h.max(w) as i64;
    for r in 1..=max_r {
        if let Some((d2, _)) = best {
            if r * r > d2 {
                break;
            }
        }
        for dy in -r..=r {
            let step = if dy.abs() == r { 1 } else { 2 * r };
            let mut dx = -r;
            while dx <= r {
                let (py, px) = (yi + dy, xi + dx);
                if py >= 0 && px >= 0 && (py as usize) < h && (px as usize) < w && donors[[py as usize, px as usize]] {
                    let d2 = dy * dy + dx * dx;
                    let l = labels[[py as usize, px as usize]];
                    best = match best {
                        Some((bd, bl)) if bd < d2 || (bd == d2 && bl <= l) => Some((bd, bl)),
                        _ => Some((d2, l)),
                    };
                }
                dx += step;
            }
        }
    }
    best.expect("caller checked a donor exists").1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InpaintConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Average the cross-entropy over the inpaint region only.
    pub inpaint_region_only: bool,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        InpaintConfig {
            steps: 140,
            learning_rate: DEFAULT_LEARNING_RATE,
            inpaint_region_only: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InpaintResult {
    pub w: LatentCode,
    pub image: Image,
    pub initial_ce: f64,
    pub final_ce: f64,
    /// Cross-entropy before each optimizer step.
    pub trace: Vec<f64>,
}

fn ce_and_grad(ports: &Ports, w: &LatentCode, s_obj: &ObjectiveLabel, cfg: &InpaintConfig) -> Result<(f64, Array2<f64>)> {
    let img = ports.generator.synthesize(w)?;
    let probs = ports.segmenter.segment_probs(&img)?;
    let region = cfg.inpaint_region_only.then_some(&s_obj.inpaint_region);
    let (ce, g_probs) = segmentation_ce_loss_grad(&s_obj.label, &probs, region)?;
    let g_img = ports.segmenter.vjp(&img, &g_probs)?;
    let g_w = ports.generator.synthesize_vjp(w, &g_img)?;
    Ok((ce, g_w))
}

/// Cross-entropy of the segmenter output on `synthesize(w)` against the
/// objective label.
pub fn inpaint_objective(ports: &Ports, w: &LatentCode, s_obj: &ObjectiveLabel, cfg: &InpaintConfig) -> Result<f64> {
    let img = ports.generator.synthesize(w)?;
    let probs = ports.segmenter.segment_probs(&img)?;
    let region = cfg.inpaint_region_only.then_some(&s_obj.inpaint_region);
    Ok(segmentation_ce_loss_grad(&s_obj.label, &probs, region)?.0)
}

/// Optimizes the first `split` style vectors of `w_src` so that the
/// generated image segments as `s_obj`. Later vectors are left untouched.
pub fn inpaint_source(w_src: &LatentCode, s_obj: &ObjectiveLabel, ports: &Ports, cfg: &InpaintConfig) -> Result<InpaintResult> {
    if cfg.steps == 0 {
        return Err(Error::arg("inpainting needs at least one step"));
    }
    check_same_dims(ports.generator.resolution(), s_obj.label.dims(), "objective label")?;
    let m = w_src.split();
    let mut head = w_src.head().to_owned();
    let mut opt = Adam::new(head.dim(), cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let w = w_src.with_head(head.view()).map_err(|_| Error::diverged("inpaint", step))?;
        let (ce, g) = ce_and_grad(ports, &w, s_obj, cfg).map_err(|e| e.at_step("inpaint", step))?;
        if !ce.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::diverged("inpaint", step));
        }
        debug!("inpaint step {step}: ce {ce:.6}");
        trace.push(ce);
        opt.step(&mut head, &g.slice(s![..m, ..]).to_owned());
    }
    let w = w_src.with_head(head.view()).map_err(|_| Error::diverged("inpaint", cfg.steps))?;
    let image = ports.generator.synthesize(&w).map_err(|e| e.at_step("inpaint", cfg.steps))?;
    let probs = ports.segmenter.segment_probs(&image)?;
    let region = cfg.inpaint_region_only.then_some(&s_obj.inpaint_region);
    let final_ce = segmentation_ce_loss_grad(&s_obj.label, &probs, region)?.0;
    if !final_ce.is_finite() {
        return Err(Error::diverged("inpaint", cfg.steps));
    }
    let initial_ce = trace[0];
    if final_ce > initial_ce {
        warn!("inpainting ended above its starting cross-entropy ({final_ce:.6} > {initial_ce:.6})");
    }
    Ok(InpaintResult {
        w,
        image,
        initial_ce,
        final_ce,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FACE: u16 = 1;
    const HAIR: u16 = 10;
    const BG: u16 = 0;

    fn strip(values: &[u16]) -> SemanticLabel {
        SemanticLabel::new(Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap(), 16).unwrap()
    }

    fn mask(values: &[u8]) -> BinaryMask {
        BinaryMask::from_bools(Array2::from_shape_vec((1, values.len()), values.iter().map(|v| *v == 1).collect()).unwrap())
    }

    #[test]
    fn strip_example_uses_nearest_keep_pixel() {
        // pixel 2 is 2 away from the face pixel and 1 away from background
        let out = build_objective_label(&strip(&[FACE, HAIR, HAIR, BG]), &mask(&[0, 1, 1, 0]), &mask(&[0, 1, 0, 0]), HAIR, BG).unwrap();
        assert_eq!(out.label.data().as_slice().unwrap(), &[FACE, HAIR, BG, BG]);
        assert_eq!(out.inpaint_region, mask(&[0, 0, 1, 0]));
        assert_eq!(out.keep_region, mask(&[1, 0, 0, 1]));
    }

    #[test]
    fn ties_prefer_smaller_label() {
        let out = build_objective_label(&strip(&[5, HAIR, 3]), &mask(&[0, 1, 0]), &mask(&[0, 0, 0]), HAIR, BG).unwrap();
        assert_eq!(out.label.data().as_slice().unwrap(), &[5, 3, 3]);
    }

    #[test]
    fn covering_hair_leaves_nothing_to_inpaint() {
        let s = strip(&[FACE, HAIR, HAIR, BG, 4]);
        let out = build_objective_label(&s, &mask(&[0, 1, 1, 0, 0]), &mask(&[1, 1, 1, 0, 0]), HAIR, BG).unwrap();
        assert!(out.inpaint_region.is_empty());
        assert_eq!(out.label.data().as_slice().unwrap(), &[HAIR, HAIR, HAIR, BG, 4]);
    }

    #[test]
    fn empty_source_hair() {
        let s = strip(&[FACE, 2, 3, BG]);
        let aligned = mask(&[0, 1, 1, 0]);
        let out = build_objective_label(&s, &mask(&[0, 0, 0, 0]), &aligned, HAIR, BG).unwrap();
        assert!(out.inpaint_region.is_empty());
        assert_eq!(out.keep_region, aligned.not());
    }

    #[test]
    fn no_donor_falls_back_to_background() {
        let out = build_objective_label(&strip(&[HAIR, HAIR]), &mask(&[1, 1]), &mask(&[0, 0]), HAIR, 7).unwrap();
        assert_eq!(out.label.data().as_slice().unwrap(), &[7, 7]);
    }

    #[test]
    fn rejects_mismatched_masks() {
        let r = build_objective_label(&strip(&[1, 2, 3]), &mask(&[0, 1]), &mask(&[0, 0, 0]), HAIR, BG);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }
}
