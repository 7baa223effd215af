//! Pose alignment of the target hair: optimizes the first `m` style vectors
//! of the target latent towards the source pose while matching the hair's
//! local style region by region.

use log::{debug, warn};
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backends::{Ports, SegmenterPort};
use crate::domain::{BinaryMask, Image, KeypointHeatmap, LatentCode};
use crate::error::{Error, Result};
use crate::losses::{pose_loss_grad, regularization_grad, regularization_loss, LossBreakdown, LsmReference};
use crate::optim::{Adam, DEFAULT_LEARNING_RATE};
use crate::superpixels::{slic_hair, track_style_regions, SlicParams, StyleRegionSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub steps: usize,
    pub lambda_lsm: f64,
    pub lambda_reg: f64,
    pub learning_rate: f64,
    pub slic: SlicParams,
    pub hair_class: u16,
    /// Drop the local-style-matching term.
    pub no_lsm: bool,
    /// Drop the latent step regularizer.
    pub no_reg: bool,
    /// Match each step's regions against the target's instead of chaining.
    pub rematch_target: bool,
    /// Start the regularizer at the second step instead of the first.
    pub strict_reg: bool,
    /// Crop each region patch to its bounding box before feature extraction.
    pub lsm_crop: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            steps: 100,
            lambda_lsm: 1.0,
            lambda_reg: 1.0,
            learning_rate: DEFAULT_LEARNING_RATE,
            slic: SlicParams::default(),
            hair_class: 10,
            no_lsm: false,
            no_reg: false,
            rematch_target: false,
            strict_reg: false,
            lsm_crop: true,
        }
    }
}

/// Per-step state handed to an observer (for periodic dumps).
pub struct AlignStep<'a> {
    pub step: usize,
    pub image: &'a Image,
    pub hair: &'a BinaryMask,
    pub regions: Option<&'a StyleRegionSet>,
    pub losses: &'a LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct AlignmentResult {
    pub w_align: LatentCode,
    pub i_align: Image,
    pub hair_mask: BinaryMask,
    /// Loss terms before each optimizer step.
    pub trace: Vec<LossBreakdown>,
    /// Loss terms at the returned latent.
    pub final_losses: LossBreakdown,
}

impl AlignmentResult {
    pub fn initial_total(&self) -> f64 {
        self.trace.first().map_or(f64::NAN, LossBreakdown::total)
    }

    pub fn final_total(&self) -> f64 {
        self.final_losses.total()
    }
}

/// Pixels whose most likely class is `hair_class`.
pub fn extract_hair_mask(img: &Image, seg: &dyn SegmenterPort, hair_class: u16) -> Result<BinaryMask> {
    Ok(seg.segment_labels(img)?.mask_of(hair_class))
}

struct Evaluation {
    losses: LossBreakdown,
    grad_head: Array2<f64>,
    image: Image,
    hair: BinaryMask,
    regions: Option<StyleRegionSet>,
}

struct Aligner<'a> {
    ports: &'a Ports,
    cfg: &'a AlignmentConfig,
    w_trg: &'a LatentCode,
    h_src: &'a KeypointHeatmap,
    target_regions: Option<StyleRegionSet>,
    lsm: Option<LsmReference>,
}

impl Aligner<'_> {
    fn anchor<'s>(&'s self, chained: Option<&'s StyleRegionSet>) -> Option<&'s StyleRegionSet> {
        match chained {
            Some(prev) if !self.cfg.rematch_target => Some(prev),
            _ => self.target_regions.as_ref(),
        }
    }

    /// Loss terms and head gradient at `head`. `anchor` is the region set the
    /// generated regions are matched against; `prev_head` is the previous
    /// iterate when the regularizer is active.
    fn evaluate(&self, head: &Array2<f64>, anchor: Option<&StyleRegionSet>, prev_head: Option<&Array2<f64>>, step: usize) -> Result<Evaluation> {
        let p = self.ports;
        let w = self.w_trg.with_head(head.view()).map_err(|_| Error::diverged("align", step))?;
        let image = p.generator.synthesize(&w).map_err(|e| e.at_step("align", step))?;
        let mut losses = LossBreakdown::new();

        let heat = p.keypoints.extract(&image)?;
        let (pose, g_heat) = pose_loss_grad(self.h_src, &heat)?;
        losses.add("pose", 1.0, pose);
        let mut g_img = p.keypoints.vjp(&image, &g_heat)?;

        let hair = extract_hair_mask(&image, p.segmenter.as_ref(), self.cfg.hair_class)?;
        let mut regions = None;
        if let (Some(lsm), Some(anchor)) = (&self.lsm, anchor) {
            match self.generated_regions(&image, &hair, anchor, step)? {
                Some(tracked) => {
                    let (v, g) = lsm.loss_grad(&image, &tracked, p.features.as_ref())?;
                    losses.add("lsm", self.cfg.lambda_lsm, v);
                    g_img.scaled_add(self.cfg.lambda_lsm, &g);
                    regions = Some(tracked);
                }
                None => losses.add("lsm", self.cfg.lambda_lsm, 0.0),
            }
        }

        let g_w = p.generator.synthesize_vjp(&w, &g_img)?;
        let mut grad_head = g_w.slice(s![..w.split(), ..]).to_owned();
        if let Some(prev) = prev_head {
            let delta = head - prev;
            losses.add("reg", self.cfg.lambda_reg, regularization_loss(delta.view()));
            grad_head.scaled_add(self.cfg.lambda_reg, &regularization_grad(delta.view()));
        } else if !self.cfg.no_reg {
            losses.add("reg", self.cfg.lambda_reg, 0.0);
        }

        if !losses.is_finite() || grad_head.iter().any(|v| !v.is_finite()) {
            return Err(Error::diverged("align", step));
        }
        Ok(Evaluation {
            losses,
            grad_head,
            image,
            hair,
            regions,
        })
    }

    fn generated_regions(&self, image: &Image, hair: &BinaryMask, anchor: &StyleRegionSet, step: usize) -> Result<Option<StyleRegionSet>> {
        if hair.count() < self.cfg.slic.n_regions {
            warn!("align step {step}: generated hair mask has {} pixels; skipping the style term", hair.count());
            return Ok(None);
        }
        let mut current = slic_hair(image, hair, &self.cfg.slic)?;
        current.step = step;
        let mut tracked = track_style_regions(anchor, &current)?;
        tracked.step = step;
        Ok(Some(tracked))
    }
}

/// Runs the alignment loop and returns the last iterate.
///
/// The regularizer compares each iterate with the previous one; it is zero
/// at the first step (and also at the second with `strict_reg`).
pub fn align_target_hair(
    w_trg: &LatentCode,
    i_trg: &Image,
    h_src: &KeypointHeatmap,
    ports: &Ports,
    cfg: &AlignmentConfig,
    mut observer: Option<&mut dyn FnMut(AlignStep<'_>)>,
) -> Result<AlignmentResult> {
    if cfg.steps == 0 {
        return Err(Error::arg("alignment needs at least one step"));
    }
    let (target_regions, lsm) = if cfg.no_lsm {
        (None, None)
    } else {
        let hair = extract_hair_mask(i_trg, ports.segmenter.as_ref(), cfg.hair_class)?;
        if hair.count() < cfg.slic.n_regions {
            warn!("target hair mask has {} pixels; local style matching disabled", hair.count());
            (None, None)
        } else {
            let regions = slic_hair(i_trg, &hair, &cfg.slic)?;
            let lsm = LsmReference::new(i_trg, &regions, ports.features.as_ref(), cfg.lsm_crop)?;
            (Some(regions), Some(lsm))
        }
    };
    let aligner = Aligner {
        ports,
        cfg,
        w_trg,
        h_src,
        target_regions,
        lsm,
    };

    let first_reg_step = if cfg.strict_reg { 2 } else { 1 };
    let mut head = w_trg.head().to_owned();
    let mut prev_head: Option<Array2<f64>> = None;
    let mut chained: Option<StyleRegionSet> = None;
    let mut opt = Adam::new(head.dim(), cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let anchor = aligner.anchor(chained.as_ref());
        let reg_prev = if !cfg.no_reg && step >= first_reg_step { prev_head.as_ref() } else { None };
        let eval = aligner.evaluate(&head, anchor, reg_prev, step)?;
        debug!("align step {step}: total {:.6}", eval.losses.total());
        if let Some(obs) = observer.as_mut() {
            obs(AlignStep {
                step,
                image: &eval.image,
                hair: &eval.hair,
                regions: eval.regions.as_ref(),
                losses: &eval.losses,
            });
        }
        if eval.regions.is_some() {
            chained = eval.regions;
        }
        trace.push(eval.losses);
        prev_head = Some(head.clone());
        opt.step(&mut head, &eval.grad_head);
    }

    let anchor = aligner.anchor(chained.as_ref());
    let reg_prev = if !cfg.no_reg && cfg.steps >= first_reg_step { prev_head.as_ref() } else { None };
    let last = aligner.evaluate(&head, anchor, reg_prev, cfg.steps)?;
    let initial = trace[0].total();
    if last.losses.total() > initial {
        warn!("alignment ended above its starting loss ({:.6} > {initial:.6})", last.losses.total());
    }
    Ok(AlignmentResult {
        w_align: w_trg.with_head(head.view())?,
        i_align: last.image,
        hair_mask: last.hair,
        trace,
        final_losses: last.losses,
    })
}

/// Gradient of the alignment objective w.r.t. the head vectors, with the
/// region assignment and previous iterate held fixed. Exposed for
/// finite-difference checks.
pub fn alignment_objective(
    head: &Array2<f64>,
    w_trg: &LatentCode,
    h_src: &KeypointHeatmap,
    ports: &Ports,
    cfg: &AlignmentConfig,
    lsm: Option<(&LsmReference, &StyleRegionSet)>,
    prev_head: Option<&Array2<f64>>,
) -> Result<(f64, Array2<f64>)> {
    let w = w_trg.with_head(head.view())?;
    let image = ports.generator.synthesize(&w)?;
    let (pose, g_heat) = pose_loss_grad(h_src, &ports.keypoints.extract(&image)?)?;
    let mut total = pose;
    let mut g_img: Array3<f64> = ports.keypoints.vjp(&image, &g_heat)?;
    if let Some((lsm, gen_regions)) = lsm {
        let (v, g) = lsm.loss_grad(&image, gen_regions, ports.features.as_ref())?;
        total += cfg.lambda_lsm * v;
        g_img.scaled_add(cfg.lambda_lsm, &g);
    }
    let g_w = ports.generator.synthesize_vjp(&w, &g_img)?;
    let mut grad = g_w.slice(s![..w.split(), ..]).to_owned();
    if let Some(prev) = prev_head {
        let delta = head - prev;
        total += cfg.lambda_reg * regularization_loss(delta.view());
        grad.scaled_add(cfg.lambda_reg, &regularization_grad(delta.view()));
    }
    Ok((total, grad))
}
