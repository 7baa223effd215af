//! GAN inversion into W+ and refinement of the spatial F tensor.

use log::{debug, warn};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backends::{FeatureExtractorPort, GeneratorPort};
use crate::domain::{check_same_dims, FTensor, Image, LatentCode};
use crate::error::{Error, Result};
use crate::losses::masked_l1_distance;
use crate::optim::{Adam, DEFAULT_LEARNING_RATE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub wplus_steps: usize,
    pub fs_steps: usize,
    pub learning_rate: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            wplus_steps: 1100,
            fs_steps: 250,
            learning_rate: DEFAULT_LEARNING_RATE,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingResult {
    pub w: LatentCode,
    pub f: Option<FTensor>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Pixel MSE plus the mean per-layer L1 feature distance to a fixed image.
pub struct Reconstruction<'a> {
    target: &'a Image,
    target_feats: Vec<Array3<f64>>,
    feat: &'a dyn FeatureExtractorPort,
}

impl<'a> Reconstruction<'a> {
    pub fn new(target: &'a Image, feat: &'a dyn FeatureExtractorPort) -> Result<Self> {
        Ok(Reconstruction {
            target,
            target_feats: feat.extract(target.data().view())?,
            feat,
        })
    }

    pub fn loss(&self, img: &Image) -> Result<f64> {
        Ok(self.loss_grad(img)?.0)
    }

    /// Loss and gradient w.r.t. `img`.
    pub fn loss_grad(&self, img: &Image) -> Result<(f64, Array3<f64>)> {
        check_same_dims(self.target.dims(), img.dims(), "reconstruction")?;
        let diff = img.data() - self.target.data();
        let n = diff.len() as f64;
        let mse = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let feats = self.feat.extract(img.data().view())?;
        let ones = Array2::ones(img.dims());
        let (percept, g_feats) = masked_l1_distance(&self.target_feats, &feats, &ones)?;
        let grad = diff * (2.0 / n) + self.feat.vjp(img.data().view(), &g_feats)?;
        Ok((mse + percept, grad))
    }
}

/// Optimizes every style vector, starting from the generator's mean latent,
/// to reproduce `img`. Returns the last iterate.
pub fn invert_wplus(
    img: &Image,
    g: &dyn GeneratorPort,
    feat: &dyn FeatureExtractorPort,
    split: usize,
    steps: usize,
    learning_rate: f64,
) -> Result<EmbeddingResult> {
    if steps == 0 {
        return Err(Error::arg("W+ inversion needs at least one step"));
    }
    check_same_dims(g.resolution(), img.dims(), "inversion input")?;
    let objective = Reconstruction::new(img, feat)?;
    let start = g.mean_latent(split)?;
    let mut params = start.vectors().clone();
    let mut opt = Adam::new(params.dim(), learning_rate);
    let mut initial_loss = f64::NAN;
    for step in 0..steps {
        let w = LatentCode::new(params.clone(), split).map_err(|_| Error::diverged("invert", step))?;
        let synth = g.synthesize(&w).map_err(|e| e.at_step("invert", step))?;
        let (loss, g_img) = objective.loss_grad(&synth)?;
        if !loss.is_finite() {
            return Err(Error::diverged("invert", step));
        }
        if step == 0 {
            initial_loss = loss;
        }
        debug!("invert step {step}: loss {loss:.6}");
        let grad = g.synthesize_vjp(&w, &g_img)?;
        opt.step(&mut params, &grad);
    }
    let w = LatentCode::new(params, split).map_err(|_| Error::diverged("invert", steps))?;
    let final_loss = objective.loss(&g.synthesize(&w).map_err(|e| e.at_step("invert", steps))?)?;
    if !final_loss.is_finite() {
        return Err(Error::diverged("invert", steps));
    }
    if final_loss > initial_loss {
        warn!("inversion ended above its starting loss ({final_loss:.6} > {initial_loss:.6})");
    }
    Ok(EmbeddingResult {
        w,
        f: None,
        initial_loss,
        final_loss,
    })
}

/// Refines `F = features(w[..m])` against `img` through
/// `synthesize_from(F, w[m..])`, keeping `w` fixed. Returns the lowest-loss
/// F seen, the initial one included, so the result never reconstructs worse
/// than the W+ code alone. With zero steps the initial F is returned
/// unchanged.
pub fn embed_fs(
    img: &Image,
    w: &LatentCode,
    g: &dyn GeneratorPort,
    feat: &dyn FeatureExtractorPort,
    steps: usize,
    learning_rate: f64,
) -> Result<EmbeddingResult> {
    check_same_dims(g.resolution(), img.dims(), "FS embedding input")?;
    let objective = Reconstruction::new(img, feat)?;
    let f0 = g.features(w.head()).map_err(|e| e.at_step("embed_fs", 0))?;
    let shape = f0.shape();
    let flat = (shape.0 * shape.1, shape.2);
    let mut params = f0.into_inner().into_shape_with_order(flat).expect("contiguous F");
    let mut opt = Adam::new(flat, learning_rate);
    let to_f = |p: &Array2<f64>, step: usize| {
        FTensor::new(p.clone().into_shape_with_order(shape).expect("same size")).map_err(|_| Error::diverged("embed_fs", step))
    };
    let mut initial_loss = f64::NAN;
    let mut best: Option<(f64, FTensor)> = None;
    for step in 0..=steps {
        let f = to_f(&params, step)?;
        let synth = g.synthesize_from(&f, w.tail()).map_err(|e| e.at_step("embed_fs", step))?;
        let (loss, g_img) = objective.loss_grad(&synth)?;
        if !loss.is_finite() {
            return Err(Error::diverged("embed_fs", step));
        }
        if step == 0 {
            initial_loss = loss;
        }
        debug!("embed_fs step {step}: loss {loss:.6}");
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, f.clone()));
        }
        if step == steps {
            break;
        }
        let (g_f, _) = g.synthesize_from_vjp(&f, w.tail(), &g_img)?;
        opt.step(&mut params, &g_f.into_shape_with_order(flat).expect("same size"));
    }
    let (final_loss, f) = best.expect("at least one evaluation");
    Ok(EmbeddingResult {
        w: w.clone(),
        f: Some(f),
        initial_loss,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ToyBackend, ToyConfig};

    fn small() -> ToyBackend {
        ToyBackend::new(ToyConfig {
            resolution: 16,
            layers: 5,
            dim: 16,
            channels: 4,
            mean_latent_samples: 200,
            ..ToyConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_steps_rejected() {
        let b = small();
        let img = b.synthesize(&b.sample_latent(1, 2).unwrap()).unwrap();
        assert!(matches!(invert_wplus(&img, &b, &b, 2, 0, 0.01), Err(Error::Argument(_))));
    }

    #[test]
    fn inversion_reduces_loss_and_is_deterministic() {
        let b = small();
        let img = b.synthesize(&b.sample_latent(3, 2).unwrap()).unwrap();
        let r1 = invert_wplus(&img, &b, &b, 2, 40, 0.01).unwrap();
        let r2 = invert_wplus(&img, &b, &b, 2, 40, 0.01).unwrap();
        assert!(r1.final_loss < r1.initial_loss);
        assert_eq!(r1.w, r2.w);
    }

    #[test]
    fn fs_zero_steps_is_identity() {
        let b = small();
        let w = b.sample_latent(4, 2).unwrap();
        let img = b.synthesize(&b.sample_latent(5, 2).unwrap()).unwrap();
        let r = embed_fs(&img, &w, &b, &b, 0, 0.01).unwrap();
        assert_eq!(r.f.unwrap(), b.features(w.head()).unwrap());
    }

    #[test]
    fn fs_refinement_improves_on_wplus() {
        let b = small();
        let img = b.synthesize(&b.sample_latent(6, 2).unwrap()).unwrap();
        let inv = invert_wplus(&img, &b, &b, 2, 30, 0.01).unwrap();
        let fs = embed_fs(&img, &inv.w, &b, &b, 30, 0.01).unwrap();
        assert!((fs.initial_loss - inv.final_loss).abs() < 1e-12);
        assert!(fs.final_loss < inv.final_loss);
        assert_eq!(fs.f.unwrap().shape(), b.f_shape(2).unwrap());
    }
}
