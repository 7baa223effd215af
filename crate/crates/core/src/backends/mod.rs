//! Ports for the four pretrained networks the method relies on, and a small
//! deterministic backend implementing all of them.
//!
//! Every port exposes its forward map together with a vector-Jacobian
//! product (`*_vjp`). Optimization stages chain these products by hand, so
//! any adapter that can back-propagate through its network can be plugged in.

pub mod ops;
pub mod toy;

use std::sync::Arc;

use ndarray::{concatenate, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::domain::{FTensor, Image, KeypointHeatmap, LatentCode, SegHeatmap, SemanticLabel};
use crate::error::Result;

pub use toy::{ToyBackend, ToyConfig};

/// Style-based generator factorized at the split layer:
/// `synthesize(w) == synthesize_from(features(w[..m]), w[m..])`.
pub trait GeneratorPort: Send + Sync {
    /// `(layers, dim)` of the W+ code.
    fn latent_shape(&self) -> (usize, usize);

    /// Output image `(height, width)`.
    fn resolution(&self) -> (usize, usize);

    /// Shape of the F tensor produced by the first `split` layers.
    fn f_shape(&self, split: usize) -> Result<(usize, usize, usize)>;

    /// Average of many mapped random latents, broadcast to every layer.
    fn mean_latent(&self, split: usize) -> Result<LatentCode>;

    fn features(&self, head: ArrayView2<'_, f64>) -> Result<FTensor>;

    fn synthesize_from(&self, f: &FTensor, tail: ArrayView2<'_, f64>) -> Result<Image>;

    /// Gradient w.r.t. the head vectors given the gradient w.r.t. F.
    fn features_vjp(&self, head: ArrayView2<'_, f64>, grad_f: &Array3<f64>) -> Result<Array2<f64>>;

    /// Gradients w.r.t. `(f, tail)` given the gradient w.r.t. the image.
    fn synthesize_from_vjp(
        &self,
        f: &FTensor,
        tail: ArrayView2<'_, f64>,
        grad_img: &Array3<f64>,
    ) -> Result<(Array3<f64>, Array2<f64>)>;

    fn synthesize(&self, w: &LatentCode) -> Result<Image> {
        let f = self.features(w.head())?;
        self.synthesize_from(&f, w.tail())
    }

    /// Gradient w.r.t. every style vector of `w`.
    fn synthesize_vjp(&self, w: &LatentCode, grad_img: &Array3<f64>) -> Result<Array2<f64>> {
        let f = self.features(w.head())?;
        let (grad_f, grad_tail) = self.synthesize_from_vjp(&f, w.tail(), grad_img)?;
        let grad_head = self.features_vjp(w.head(), &grad_f)?;
        Ok(concatenate(Axis(0), &[grad_head.view(), grad_tail.view()]).expect("matching widths"))
    }
}

/// Fixed multi-layer feature network (the perceptual/style backbone).
/// Accepts any spatial size so that cropped patches can be fed through it.
pub trait FeatureExtractorPort: Send + Sync {
    fn num_layers(&self) -> usize;

    fn extract(&self, img: ArrayView3<'_, f64>) -> Result<Vec<Array3<f64>>>;

    fn vjp(&self, img: ArrayView3<'_, f64>, grads: &[Array3<f64>]) -> Result<Array3<f64>>;
}

/// Facial landmark extractor producing 68 heatmaps.
pub trait KeypointExtractorPort: Send + Sync {
    fn extract(&self, img: &Image) -> Result<KeypointHeatmap>;

    /// Gradient w.r.t. the image of `<grad, heatmaps>`.
    fn vjp(&self, img: &Image, grad_heatmaps: &Array3<f64>) -> Result<Array3<f64>>;
}

/// Face parser producing per-class probabilities.
pub trait SegmenterPort: Send + Sync {
    fn classes(&self) -> usize;

    fn segment_probs(&self, img: &Image) -> Result<SegHeatmap>;

    fn vjp(&self, img: &Image, grad_probs: &Array3<f64>) -> Result<Array3<f64>>;

    fn segment_labels(&self, img: &Image) -> Result<SemanticLabel> {
        Ok(self.segment_probs(img)?.argmax())
    }
}

/// The full set of networks a transfer run needs.
#[derive(Clone)]
pub struct Ports {
    pub generator: Arc<dyn GeneratorPort>,
    pub features: Arc<dyn FeatureExtractorPort>,
    pub keypoints: Arc<dyn KeypointExtractorPort>,
    pub segmenter: Arc<dyn SegmenterPort>,
}

impl Ports {
    /// All four ports backed by one shared toy backend.
    pub fn toy(backend: ToyBackend) -> Self {
        let shared = Arc::new(backend);
        Ports {
            generator: shared.clone(),
            features: shared.clone(),
            keypoints: shared.clone(),
            segmenter: shared,
        }
    }
}
