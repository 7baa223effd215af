//! Differentiable objectives used by the alignment, inpainting and blending
//! stages.
//!
//! Each loss has a value-only form and a `*_grad` form that also returns the
//! gradient with respect to its *second* (generated) argument; the first
//! argument is always a fixed reference during optimization.

use std::collections::BTreeMap;

use log::warn;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::backends::FeatureExtractorPort;
use crate::domain::{check_same_dims, resample_area, BinaryMask, Image, KeypointHeatmap, SegHeatmap, SemanticLabel};
use crate::error::{Error, Result};
use crate::superpixels::StyleRegionSet;

/// Probabilities are clamped from below before taking logs.
pub const CE_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedTerm {
    pub weight: f64,
    pub value: f64,
}

/// Named loss terms, their weights and the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    terms: BTreeMap<String, WeightedTerm>,
    total: f64,
}

impl LossBreakdown {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, weight: f64, value: f64) {
        self.terms.insert(name.to_string(), WeightedTerm { weight, value });
        self.total += weight * value;
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn terms(&self) -> &BTreeMap<String, WeightedTerm> {
        &self.terms
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.terms.get(name).map(|t| t.value)
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms.values().all(|t| t.value.is_finite())
    }

    /// The stored total equals the weighted sum of the terms and every term
    /// is nonnegative.
    pub fn verify(&self) -> bool {
        let recomputed: f64 = self.terms.values().map(|t| t.weight * t.value).sum();
        let scale = recomputed.abs().max(self.total.abs()).max(f64::MIN_POSITIVE);
        (recomputed - self.total).abs() <= 1e-9 * scale && self.terms.values().all(|t| t.value >= 0.0)
    }
}

/// Mean squared difference of two landmark heatmap stacks.
pub fn pose_loss(h_src: &KeypointHeatmap, h_gen: &KeypointHeatmap) -> Result<f64> {
    Ok(pose_loss_grad(h_src, h_gen)?.0)
}

pub fn pose_loss_grad(h_src: &KeypointHeatmap, h_gen: &KeypointHeatmap) -> Result<(f64, Array3<f64>)> {
    if h_src.heatmaps.dim() != h_gen.heatmaps.dim() {
        return Err(Error::dim(format!(
            "pose heatmaps {:?} vs {:?}",
            h_src.heatmaps.dim(),
            h_gen.heatmaps.dim()
        )));
    }
    let diff = &h_gen.heatmaps - &h_src.heatmaps;
    let n = diff.len() as f64;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((value, diff * (2.0 / n)))
}

fn flatten(features: ArrayView3<'_, f64>) -> Array2<f64> {
    let (h, w, c) = features.dim();
    features
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((h * w, c))
        .expect("contiguous")
}

/// `v^T v` for `v` the `(H*W) x C` flattening of the activations.
pub fn gram_matrix(features: ArrayView3<'_, f64>) -> Array2<f64> {
    let v = flatten(features);
    v.t().dot(&v)
}

/// Mean over layers of the squared Frobenius distance between Gram
/// matrices, each normalized by its element count.
pub fn style_distance(feats_a: &[Array3<f64>], feats_b: &[Array3<f64>]) -> Result<f64> {
    let grams: Vec<Array2<f64>> = feats_a.iter().map(|f| gram_matrix(f.view())).collect();
    Ok(style_distance_to_grams(&grams, feats_b)?.0)
}

/// Style distance against precomputed reference Gram matrices, with the
/// gradient w.r.t. `feats_b`.
pub fn style_distance_to_grams(grams_a: &[Array2<f64>], feats_b: &[Array3<f64>]) -> Result<(f64, Vec<Array3<f64>>)> {
    if grams_a.len() != feats_b.len() || grams_a.is_empty() {
        return Err(Error::dim(format!(
            "style distance over {} vs {} layers",
            grams_a.len(),
            feats_b.len()
        )));
    }
    let layers = grams_a.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(feats_b.len());
    for (ga, fb) in grams_a.iter().zip(feats_b) {
        let c = fb.dim().2;
        if ga.dim() != (c, c) {
            return Err(Error::dim(format!("gram {:?} vs {c} channels", ga.dim())));
        }
        let v = flatten(fb.view());
        let diff = v.t().dot(&v) - ga;
        let n = (c * c) as f64;
        value += diff.iter().map(|d| d * d).sum::<f64>() / n / layers;
        // d/dv ||v^T v - G||^2 = 4 v (v^T v - G) for symmetric G
        let gv = v.dot(&diff) * (4.0 / n / layers);
        grads.push(gv.into_shape_with_order(fb.dim()).expect("same size"));
    }
    Ok((value, grads))
}

fn check_images(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dim(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Gram-matrix style loss between two images (or patches).
pub fn style_loss(img_a: ArrayView3<'_, f64>, img_b: ArrayView3<'_, f64>, feat: &dyn FeatureExtractorPort) -> Result<f64> {
    check_images(img_a, img_b, "style_loss")?;
    style_distance(&feat.extract(img_a)?, &feat.extract(img_b)?)
}

pub fn style_loss_grad(
    img_a: ArrayView3<'_, f64>,
    img_b: ArrayView3<'_, f64>,
    feat: &dyn FeatureExtractorPort,
) -> Result<(f64, Array3<f64>)> {
    check_images(img_a, img_b, "style_loss")?;
    let grams: Vec<_> = feat.extract(img_a)?.iter().map(|f| gram_matrix(f.view())).collect();
    style_to_grams_grad(&grams, img_b, feat)
}

fn style_to_grams_grad(
    grams: &[Array2<f64>],
    img_b: ArrayView3<'_, f64>,
    feat: &dyn FeatureExtractorPort,
) -> Result<(f64, Array3<f64>)> {
    let (value, gfeats) = style_distance_to_grams(grams, &feat.extract(img_b)?)?;
    Ok((value, feat.vjp(img_b, &gfeats)?))
}

/// Masked image cut down to the mask's bounding box (or left full size when
/// `crop` is off). `None` for an empty mask.
pub fn region_patch(img: &Image, mask: &BinaryMask, crop: bool) -> Result<Option<(Array3<f64>, (usize, usize))>> {
    check_same_dims(img.dims(), mask.dims(), "region patch")?;
    let Some((y0, x0, y1, x1)) = mask.bounding_box() else {
        return Ok(None);
    };
    let (y0, x0, y1, x1) = if crop { (y0, x0, y1, x1) } else { (0, 0, img.height(), img.width()) };
    let mut patch = img.data().slice(s![y0..y1, x0..x1, ..]).to_owned();
    for ((y, x, _), v) in patch.indexed_iter_mut() {
        if !mask.get(y0 + y, x0 + x) {
            *v = 0.0;
        }
    }
    Ok(Some((patch, (y0, x0))))
}

/// Reference side of the local-style-matching loss, computed once per
/// target region set.
pub struct LsmReference {
    grams: Vec<Option<Vec<Array2<f64>>>>,
    crop: bool,
}

impl LsmReference {
    pub fn new(i_trg: &Image, regions_trg: &StyleRegionSet, feat: &dyn FeatureExtractorPort, crop: bool) -> Result<Self> {
        let grams = regions_trg
            .masks
            .iter()
            .map(|m| {
                region_patch(i_trg, m, crop)?
                    .map(|(p, _)| Ok(feat.extract(p.view())?.iter().map(|f| gram_matrix(f.view())).collect()))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LsmReference { grams, crop })
    }

    /// Loss and gradient w.r.t. `i_gen` for generated regions that are
    /// index-aligned with the reference regions.
    pub fn loss_grad(
        &self,
        i_gen: &Image,
        regions_gen: &StyleRegionSet,
        feat: &dyn FeatureExtractorPort,
    ) -> Result<(f64, Array3<f64>)> {
        if regions_gen.len() != self.grams.len() {
            return Err(Error::dim(format!(
                "{} generated regions vs {} target regions",
                regions_gen.len(),
                self.grams.len()
            )));
        }
        let mut total = 0.0;
        let mut grad = Array3::zeros(i_gen.data().dim());
        for (i, (grams, mask)) in self.grams.iter().zip(&regions_gen.masks).enumerate() {
            let patch = region_patch(i_gen, mask, self.crop)?;
            let (Some(grams), Some((patch, (y0, x0)))) = (grams, patch) else {
                warn!("style region {i} is empty on one side; skipping its term");
                continue;
            };
            let (v, gpatch) = style_to_grams_grad(grams, patch.view(), feat)?;
            total += v;
            let (ph, pw, _) = gpatch.dim();
            for ((y, x, c), g) in gpatch.indexed_iter() {
                if mask.get(y0 + y, x0 + x) {
                    grad[[y0 + y, x0 + x, c]] += g;
                }
            }
            debug_assert!(y0 + ph <= i_gen.height() && x0 + pw <= i_gen.width());
        }
        Ok((total, grad))
    }
}

/// Sum over index-aligned style regions of the style loss between the
/// masked, tightly cropped patches.
pub fn local_style_matching_loss(
    i_trg: &Image,
    i_gen: &Image,
    regions_trg: &StyleRegionSet,
    regions_gen: &StyleRegionSet,
    feat: &dyn FeatureExtractorPort,
    crop: bool,
) -> Result<f64> {
    check_same_dims(i_trg.dims(), i_gen.dims(), "local_style_matching_loss")?;
    Ok(LsmReference::new(i_trg, regions_trg, feat, crop)?
        .loss_grad(i_gen, regions_gen, feat)?
        .0)
}

/// Mean squared step between consecutive latent iterates.
pub fn regularization_loss(delta: ArrayView2<'_, f64>) -> f64 {
    delta.iter().map(|d| d * d).sum::<f64>() / delta.len().max(1) as f64
}

/// Gradient of [`regularization_loss`] w.r.t. the current iterate.
pub fn regularization_grad(delta: ArrayView2<'_, f64>) -> Array2<f64> {
    delta.mapv(|d| 2.0 * d / delta.len().max(1) as f64)
}

/// Mean over layers of the masked L1 feature difference, each layer
/// normalized by its element count. The mask is area-resampled to every
/// layer's spatial size.
pub fn masked_l1_distance(
    feats_a: &[Array3<f64>],
    feats_b: &[Array3<f64>],
    mask: &Array2<f64>,
) -> Result<(f64, Vec<Array3<f64>>)> {
    if feats_a.len() != feats_b.len() || feats_a.is_empty() {
        return Err(Error::dim("perceptual loss layer counts differ"));
    }
    let layers = feats_a.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(feats_b.len());
    for (fa, fb) in feats_a.iter().zip(feats_b) {
        if fa.dim() != fb.dim() {
            return Err(Error::dim(format!("feature shapes {:?} vs {:?}", fa.dim(), fb.dim())));
        }
        let (h, w, _) = fb.dim();
        let m = resample_area(mask, h, w)?;
        let n = fb.len() as f64;
        let mut g = Array3::zeros(fb.dim());
        Zip::indexed(&mut g).and(fa).and(fb).for_each(|(y, x, _), g, &a, &b| {
            let d = b - a;
            value += m[[y, x]] * d.abs() / n / layers;
            *g = m[[y, x]] * sign(d) / n / layers;
        });
        grads.push(g);
    }
    Ok((value, grads))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn masked_perceptual_loss(img_a: &Image, img_b: &Image, mask: &BinaryMask, feat: &dyn FeatureExtractorPort) -> Result<f64> {
    Ok(masked_perceptual_loss_grad(img_a, img_b, mask, feat)?.0)
}

pub fn masked_perceptual_loss_grad(
    img_a: &Image,
    img_b: &Image,
    mask: &BinaryMask,
    feat: &dyn FeatureExtractorPort,
) -> Result<(f64, Array3<f64>)> {
    check_same_dims(img_a.dims(), img_b.dims(), "masked_perceptual_loss")?;
    check_same_dims(img_a.dims(), mask.dims(), "masked_perceptual_loss mask")?;
    let fa = feat.extract(img_a.data().view())?;
    perceptual_to_features_grad(&fa, img_b, &mask.to_values(), feat)
}

/// Perceptual loss against precomputed reference features.
pub fn perceptual_to_features_grad(
    feats_a: &[Array3<f64>],
    img_b: &Image,
    mask: &Array2<f64>,
    feat: &dyn FeatureExtractorPort,
) -> Result<(f64, Array3<f64>)> {
    let fb = feat.extract(img_b.data().view())?;
    let (value, gfeats) = masked_l1_distance(feats_a, &fb, mask)?;
    Ok((value, feat.vjp(img_b.data().view(), &gfeats)?))
}

/// Style loss between the hair of the target and the hair of the output.
pub fn hair_style_loss(
    i_trg: &Image,
    i_out: &Image,
    m_trg_hair: &BinaryMask,
    m_out_hair: &BinaryMask,
    feat: &dyn FeatureExtractorPort,
) -> Result<f64> {
    Ok(hair_style_loss_grad(i_trg, i_out, m_trg_hair, m_out_hair, feat)?.0)
}

pub fn hair_style_loss_grad(
    i_trg: &Image,
    i_out: &Image,
    m_trg_hair: &BinaryMask,
    m_out_hair: &BinaryMask,
    feat: &dyn FeatureExtractorPort,
) -> Result<(f64, Array3<f64>)> {
    let a = i_trg.masked(m_trg_hair)?;
    let b = i_out.masked(m_out_hair)?;
    let (value, gb) = style_loss_grad(a.data().view(), b.data().view(), feat)?;
    Ok((value, mask_gradient(gb, m_out_hair)))
}

fn mask_gradient(mut grad: Array3<f64>, mask: &BinaryMask) -> Array3<f64> {
    for ((y, x, _), g) in grad.indexed_iter_mut() {
        if !mask.get(y, x) {
            *g = 0.0;
        }
    }
    grad
}

/// Mean pixel-wise cross-entropy of the probabilities against the labels.
/// With `region` set, the mean runs over the region's pixels only.
pub fn segmentation_ce_loss(s_obj: &SemanticLabel, probs: &SegHeatmap, region: Option<&BinaryMask>) -> Result<f64> {
    Ok(segmentation_ce_loss_grad(s_obj, probs, region)?.0)
}

pub fn segmentation_ce_loss_grad(
    s_obj: &SemanticLabel,
    probs: &SegHeatmap,
    region: Option<&BinaryMask>,
) -> Result<(f64, Array3<f64>)> {
    check_same_dims(s_obj.dims(), probs.dims(), "segmentation_ce_loss")?;
    if let Some(r) = region {
        check_same_dims(s_obj.dims(), r.dims(), "segmentation_ce_loss region")?;
    }
    let k = probs.classes();
    if let Some(l) = s_obj.data().iter().find(|l| **l as usize >= k) {
        return Err(Error::arg(format!("label {l} outside [0, {k})")));
    }
    let p = probs.data();
    let n = match region {
        Some(r) => r.count(),
        None => s_obj.data().len(),
    };
    let mut grad = Array3::zeros(p.dim());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut value = 0.0;
    for ((y, x), &label) in s_obj.data().indexed_iter() {
        if region.is_some_and(|r| !r.get(y, x)) {
            continue;
        }
        let q = p[[label as usize, y, x]];
        value -= q.max(CE_CLAMP).ln() / n as f64;
        if q > CE_CLAMP {
            grad[[label as usize, y, x]] = -1.0 / (q * n as f64);
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array1};

    /// Treats the input itself as the only feature layer.
    struct Identity;

    impl FeatureExtractorPort for Identity {
        fn num_layers(&self) -> usize {
            1
        }
        fn extract(&self, img: ArrayView3<'_, f64>) -> Result<Vec<Array3<f64>>> {
            Ok(vec![img.to_owned()])
        }
        fn vjp(&self, _img: ArrayView3<'_, f64>, grads: &[Array3<f64>]) -> Result<Array3<f64>> {
            Ok(grads[0].clone())
        }
    }

    fn heat(v: f64) -> KeypointHeatmap {
        KeypointHeatmap::new(Array3::from_elem((68, 3, 4), v), Array2::zeros((68, 3))).unwrap()
    }

    #[test]
    fn pose_loss_cases() {
        assert_eq!(pose_loss(&heat(0.2), &heat(0.2)).unwrap(), 0.0);
        let v = pose_loss(&heat(0.2), &heat(0.7)).unwrap();
        assert!((v - 0.25).abs() < 1e-12);
        let v2 = pose_loss(&heat(0.7), &heat(0.2)).unwrap();
        assert_eq!(v, v2);
        let other = KeypointHeatmap::new(Array3::zeros((68, 2, 2)), Array2::zeros((68, 3))).unwrap();
        assert!(matches!(pose_loss(&heat(0.0), &other), Err(Error::Dimension(_))));
    }

    #[test]
    fn gram_cases() {
        assert!(gram_matrix(Array3::zeros((3, 3, 2)).view()).iter().all(|v| *v == 0.0));
        let g = gram_matrix(Array3::ones((2, 2, 1)).view());
        assert_eq!(g, arr2(&[[4.0]]));
        let f = Array3::from_shape_fn((3, 2, 4), |(y, x, c)| (y * 7 + x * 3 + c) as f64 * 0.1 - 0.4);
        let g = gram_matrix(f.view());
        assert_eq!(g, g.t());
    }

    #[test]
    fn style_distance_hand_example() {
        // single-channel images (1, 0) and (0, 1): both Gram matrices are [1]
        let a = Array3::from_shape_vec((1, 2, 1), vec![1.0, 0.0]).unwrap();
        let b = Array3::from_shape_vec((1, 2, 1), vec![0.0, 1.0]).unwrap();
        assert_eq!(style_distance(&[a], &[b]).unwrap(), 0.0);
    }

    #[test]
    fn style_loss_symmetry_and_zero() {
        let a = Array3::from_shape_fn((4, 5, 3), |(y, x, c)| ((y + 2 * x + c) % 5) as f64 / 5.0);
        let b = Array3::from_shape_fn((4, 5, 3), |(y, x, c)| ((3 * y + x + c) % 4) as f64 / 4.0);
        assert_eq!(style_loss(a.view(), a.view(), &Identity).unwrap(), 0.0);
        let ab = style_loss(a.view(), b.view(), &Identity).unwrap();
        let ba = style_loss(b.view(), a.view(), &Identity).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-12 * ab);
    }

    #[test]
    fn masked_l1_hand_example() {
        // 2x1 features a=(3,5), b=(1,5), mask=(1,0): |3-1| * 1 / 2 = 1
        let a = Array3::from_shape_vec((2, 1, 1), vec![3.0, 5.0]).unwrap();
        let b = Array3::from_shape_vec((2, 1, 1), vec![1.0, 5.0]).unwrap();
        let mask = arr2(&[[1.0], [0.0]]);
        let (v, _) = masked_l1_distance(&[a], &[b], &mask).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_perceptual_zero_cases() {
        let a = Image::filled(4, 4, [0.2, 0.4, 0.6]).unwrap();
        let b = Image::filled(4, 4, [0.9, 0.1, 0.3]).unwrap();
        let ones = BinaryMask::ones(4, 4);
        assert_eq!(masked_perceptual_loss(&a, &a, &ones, &Identity).unwrap(), 0.0);
        assert_eq!(masked_perceptual_loss(&a, &b, &BinaryMask::zeros(4, 4), &Identity).unwrap(), 0.0);
        assert!(masked_perceptual_loss(&a, &b, &ones, &Identity).unwrap() > 0.0);
        assert!(masked_perceptual_loss(&a, &b, &BinaryMask::ones(3, 4), &Identity).is_err());
    }

    #[test]
    fn regularization_cases() {
        let zero = Array2::<f64>::zeros((18, 512));
        assert_eq!(regularization_loss(zero.view()), 0.0);
        let ones = Array2::<f64>::ones((18, 512));
        assert_eq!(regularization_loss(ones.view()), 1.0);
        let d = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let scaled = &d * 2.5;
        let r = regularization_loss(scaled.view()) / regularization_loss(d.view());
        assert!((r - 6.25).abs() < 1e-12);
    }

    #[test]
    fn hair_style_matches_style_of_masked_images() {
        let a = Image::new(Array3::from_shape_fn((6, 6, 3), |(y, x, c)| ((y * x + c) % 7) as f64 / 7.0)).unwrap();
        let b = Image::new(Array3::from_shape_fn((6, 6, 3), |(y, x, c)| ((y + x * c) % 5) as f64 / 5.0)).unwrap();
        let m1 = BinaryMask::from_bools(Array2::from_shape_fn((6, 6), |(y, _)| y < 3));
        let m2 = BinaryMask::from_bools(Array2::from_shape_fn((6, 6), |(_, x)| x > 1));
        let v = hair_style_loss(&a, &b, &m1, &m2, &Identity).unwrap();
        let oracle = style_loss(a.masked(&m1).unwrap().data().view(), b.masked(&m2).unwrap().data().view(), &Identity).unwrap();
        assert_eq!(v, oracle);
        assert_eq!(hair_style_loss(&a, &a, &m1, &m1, &Identity).unwrap(), 0.0);
        let z = BinaryMask::zeros(6, 6);
        assert_eq!(hair_style_loss(&a, &a, &z, &z, &Identity).unwrap(), 0.0);
    }

    fn one_hot(labels: &Array2<u16>, k: usize) -> SegHeatmap {
        let (h, w) = labels.dim();
        SegHeatmap::new(Array3::from_shape_fn((k, h, w), |(c, y, x)| (labels[[y, x]] as usize == c) as u8 as f64)).unwrap()
    }

    #[test]
    fn cross_entropy_cases() {
        let labels = Array2::from_shape_fn((4, 5), |(y, x)| ((y * 5 + x) % 16) as u16);
        let s = SemanticLabel::new(labels.clone(), 16).unwrap();
        assert!(segmentation_ce_loss(&s, &one_hot(&labels, 16), None).unwrap() <= 1e-9);
        let uniform = SegHeatmap::new(Array3::from_elem((16, 4, 5), 1.0 / 16.0)).unwrap();
        let v = segmentation_ce_loss(&s, &uniform, None).unwrap();
        assert!((v - 16f64.ln()).abs() < 1e-12);
        assert!((v - 2.7726).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_is_permutation_invariant() {
        let labels = Array2::from_shape_fn((1, 6), |(_, x)| (x % 3) as u16);
        let probs = Array3::from_shape_fn((3, 1, 6), |(c, _, x)| {
            let raw = Array1::from_iter((0..3).map(|k| ((k + 1) * (x + 2)) as f64));
            raw[c] / raw.sum()
        });
        let perm = [4, 2, 5, 0, 3, 1];
        let lp = Array2::from_shape_fn((1, 6), |(_, x)| labels[[0, perm[x]]]);
        let pp = Array3::from_shape_fn((3, 1, 6), |(c, _, x)| probs[[c, 0, perm[x]]]);
        let a = segmentation_ce_loss(&SemanticLabel::new(labels, 3).unwrap(), &SegHeatmap::new(probs).unwrap(), None).unwrap();
        let b = segmentation_ce_loss(&SemanticLabel::new(lp, 3).unwrap(), &SegHeatmap::new(pp).unwrap(), None).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let s = SemanticLabel::new(Array2::from_elem((1, 1), 3u16), 16).unwrap();
        let probs = SegHeatmap::new(Array3::from_elem((3, 1, 1), 1.0 / 3.0)).unwrap();
        assert!(matches!(segmentation_ce_loss(&s, &probs, None), Err(Error::Argument(_))));
    }

    #[test]
    fn breakdown_recomposes() {
        let mut b = LossBreakdown::new();
        b.add("pose", 1.0, 0.3);
        b.add("lsm", 0.5, 2.0);
        assert!((b.total() - 1.3).abs() < 1e-15);
        assert!(b.verify());
    }
}
