//! Value types shared by every stage plus the small amount of mask algebra
//! the pipeline needs.
//!
//! Shapes are never hard-coded: the constants below record the full-size
//! configuration, while the toy backend runs on much smaller tensors.

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

/// Working resolution of real portraits.
pub const FULL_SCALE_RESOLUTION: usize = 256;
/// Style vectors in a W+ code.
pub const FULL_SCALE_LATENT_LAYERS: usize = 18;
/// Channels per style vector.
pub const FULL_SCALE_LATENT_DIM: usize = 512;
/// Number of leading style vectors that are optimized, and that produce F.
pub const FULL_SCALE_SPLIT: usize = 6;
/// Spatial size and depth of the F tensor.
pub const FULL_SCALE_F_SHAPE: (usize, usize, usize) = (32, 32, 512);
/// Semantic categories produced by the face parser.
pub const NUM_SEMANTIC_CLASSES: usize = 16;
/// Landmark channels produced by the keypoint extractor.
pub const NUM_KEYPOINTS: usize = 68;

/// RGB image, `H x W x 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Array3<f64>);

impl Image {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.shape()[2] != 3 {
            return Err(Error::dim(format!(
                "image must have 3 channels, got {}",
                data.shape()[2]
            )));
        }
        if data.shape()[0] == 0 || data.shape()[1] == 0 {
            return Err(Error::dim("image must be non-empty"));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::arg(format!("image value {v} outside [0, 1]")));
        }
        Ok(Image(data))
    }

    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn clamped(mut data: Array3<f64>) -> Result<Self> {
        data.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Image::new(data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Image::new(Array3::from_shape_fn((height, width, 3), |(_, _, c)| rgb[c]))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    /// Elementwise product with a binary mask broadcast over channels.
    pub fn masked(&self, mask: &BinaryMask) -> Result<Image> {
        check_same_dims(self.dims(), mask.dims(), "masked image")?;
        let mut out = self.0.clone();
        for ((y, x, _), v) in out.indexed_iter_mut() {
            if !mask.get(y, x) {
                *v = 0.0;
            }
        }
        Ok(Image(out))
    }
}

/// Stack of per-layer style vectors with the index separating the
/// optimized "coarse" layers from the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    vectors: Array2<f64>,
    split: usize,
}

impl LatentCode {
    pub fn new(vectors: Array2<f64>, split: usize) -> Result<Self> {
        let layers = vectors.nrows();
        if split < 1 || split >= layers {
            return Err(Error::arg(format!(
                "split index {split} must satisfy 1 <= m < {layers}"
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("latent code contains non-finite values"));
        }
        Ok(LatentCode { vectors, split })
    }

    pub fn layers(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn into_vectors(self) -> Array2<f64> {
        self.vectors
    }

    /// The first `split` style vectors.
    pub fn head(&self) -> ArrayView2<'_, f64> {
        self.vectors.slice(ndarray::s![..self.split, ..])
    }

    /// The remaining `L - split` style vectors.
    pub fn tail(&self) -> ArrayView2<'_, f64> {
        self.vectors.slice(ndarray::s![self.split.., ..])
    }

    /// Copy of this code with the first `split` vectors replaced.
    pub fn with_head(&self, head: ArrayView2<'_, f64>) -> Result<LatentCode> {
        if head.dim() != (self.split, self.dim()) {
            return Err(Error::dim(format!(
                "head shape {:?} does not match ({}, {})",
                head.dim(),
                self.split,
                self.dim()
            )));
        }
        let mut vectors = self.vectors.clone();
        vectors
            .slice_mut(ndarray::s![..self.split, ..])
            .assign(&head);
        LatentCode::new(vectors, self.split)
    }

    pub fn same_shape(&self, other: &LatentCode) -> bool {
        self.vectors.dim() == other.vectors.dim() && self.split == other.split
    }
}

/// Coarse spatial feature tensor, `h x w x c`.
#[derive(Clone, Debug, PartialEq)]
pub struct FTensor(Array3<f64>);

impl FTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("F tensor contains non-finite values"));
        }
        Ok(FTensor(data))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.dim()
    }
}

/// Exactly-binary mask at image resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask(Array2<bool>);

impl BinaryMask {
    pub fn from_bools(data: Array2<bool>) -> Self {
        BinaryMask(data)
    }

    /// Rejects anything that is not exactly 0 or 1.
    pub fn from_values(data: &Array2<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::arg(format!("mask value {v} is not binary")));
        }
        Ok(BinaryMask(data.mapv(|v| v == 1.0)))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask(Array2::from_elem((height, width), false))
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask(Array2::from_elem((height, width), true))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.0[[y, x]]
    }

    pub fn data(&self) -> &Array2<bool> {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|v| *v)
    }

    pub fn to_values(&self) -> Array2<f64> {
        self.0.mapv(|v| if v { 1.0 } else { 0.0 })
    }

    pub fn not(&self) -> BinaryMask {
        BinaryMask(self.0.mapv(|v| !v))
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a || b)
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        check_same_dims(self.dims(), other.dims(), "mask combination")?;
        let mut out = Array2::from_elem(self.dims(), false);
        Zip::from(&mut out)
            .and(&self.0)
            .and(&other.0)
            .for_each(|o, &a, &b| *o = f(a, b));
        Ok(BinaryMask(out))
    }

    /// Tight bounding box `(y0, x0, y1, x1)` (exclusive ends) of the set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for ((y, x), &v) in self.0.indexed_iter() {
            if v {
                bbox = Some(match bbox {
                    None => (y, x, y + 1, x + 1),
                    Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1)),
                });
            }
        }
        bbox
    }
}

/// Fractional mask produced by area-averaging a binary mask.
pub type SoftMask = Array2<f64>;

/// Per-pixel semantic labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticLabel {
    data: Array2<u16>,
    classes: usize,
}

impl SemanticLabel {
    pub fn new(data: Array2<u16>, classes: usize) -> Result<Self> {
        if let Some(l) = data.iter().find(|l| **l as usize >= classes) {
            return Err(Error::arg(format!("label {l} outside [0, {classes})")));
        }
        Ok(SemanticLabel { data, classes })
    }

    pub fn data(&self) -> &Array2<u16> {
        &self.data
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// Pixels carrying `class`.
    pub fn mask_of(&self, class: u16) -> BinaryMask {
        BinaryMask(self.data.mapv(|l| l == class))
    }
}

/// Per-class probabilities, `K x H x W`, summing to one over `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegHeatmap(Array3<f64>);

impl SegHeatmap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::arg("segmentation probabilities must be finite and nonnegative"));
        }
        let sums = data.sum_axis(Axis(0));
        if let Some(s) = sums.iter().find(|s| (**s - 1.0).abs() > 1e-5) {
            return Err(Error::arg(format!(
                "segmentation probabilities sum to {s} at some pixel"
            )));
        }
        Ok(SegHeatmap(data))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }

    /// Argmax over classes; ties go to the lower class index.
    pub fn argmax(&self) -> SemanticLabel {
        let (k, h, w) = self.0.dim();
        let labels = Array2::from_shape_fn((h, w), |(y, x)| {
            let mut best = 0;
            for c in 1..k {
                if self.0[[c, y, x]] > self.0[[best, y, x]] {
                    best = c;
                }
            }
            best as u16
        });
        SemanticLabel {
            data: labels,
            classes: k,
        }
    }
}

/// Landmark heatmaps plus the 3D landmark coordinates derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointHeatmap {
    pub heatmaps: Array3<f64>,
    pub keypoints3d: Array2<f64>,
}

impl KeypointHeatmap {
    pub fn new(heatmaps: Array3<f64>, keypoints3d: Array2<f64>) -> Result<Self> {
        if heatmaps.shape()[0] != NUM_KEYPOINTS || keypoints3d.dim() != (NUM_KEYPOINTS, 3) {
            return Err(Error::dim(format!(
                "expected {NUM_KEYPOINTS} keypoint channels, got heatmaps {:?} and points {:?}",
                heatmaps.shape(),
                keypoints3d.dim()
            )));
        }
        if heatmaps.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::arg("keypoint heatmaps must be finite and nonnegative"));
        }
        Ok(KeypointHeatmap {
            heatmaps,
            keypoints3d,
        })
    }
}

/// Partition of the image into aligned-hair, blend and keep regions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskTriplet {
    pub hair: BinaryMask,
    pub blend: BinaryMask,
    pub keep: BinaryMask,
}

impl MaskTriplet {
    pub fn new(hair: BinaryMask, blend: BinaryMask, keep: BinaryMask) -> Result<Self> {
        check_same_dims(hair.dims(), blend.dims(), "mask triplet")?;
        check_same_dims(hair.dims(), keep.dims(), "mask triplet")?;
        let ok = Zip::from(hair.data())
            .and(blend.data())
            .and(keep.data())
            .all(|&a, &b, &c| (a as u8 + b as u8 + c as u8) == 1);
        if !ok {
            return Err(Error::arg("mask triplet is not a partition"));
        }
        Ok(MaskTriplet { hair, blend, keep })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.hair.dims()
    }

    /// All three masks area-averaged to `h x w`.
    pub fn downsample(&self, h: usize, w: usize) -> Result<SoftTriplet> {
        Ok(SoftTriplet {
            hair: downsample_mask(&self.hair, h, w)?,
            blend: downsample_mask(&self.blend, h, w)?,
            keep: downsample_mask(&self.keep, h, w)?,
        })
    }
}

/// A [`MaskTriplet`] at F resolution; the three weights sum to one per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTriplet {
    pub hair: SoftMask,
    pub blend: SoftMask,
    pub keep: SoftMask,
}

impl SoftTriplet {
    pub fn dims(&self) -> (usize, usize) {
        self.hair.dim()
    }
}

/// Rec. 601 luma.
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub(crate) fn check_same_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Splits the image into the aligned target hair, the uncovered part of the
/// source hair, and everything else.
pub fn partition_masks(src_hair: &BinaryMask, aligned_hair: &BinaryMask) -> Result<MaskTriplet> {
    check_same_dims(src_hair.dims(), aligned_hair.dims(), "partition_masks")?;
    let not_aligned = aligned_hair.not();
    let keep = src_hair.not().and(&not_aligned)?;
    let blend = src_hair.and(&not_aligned)?;
    MaskTriplet::new(aligned_hair.clone(), blend, keep)
}

/// Row-stochastic matrix mapping `n` input cells onto `m` output cells by
/// fractional overlap.
fn area_weights(m: usize, n: usize) -> Array2<f64> {
    let scale = n as f64 / m as f64;
    let mut w = Array2::zeros((m, n));
    for i in 0..m {
        let lo = i as f64 * scale;
        let hi = (i + 1) as f64 * scale;
        let first = lo.floor() as usize;
        let last = (hi.ceil() as usize).min(n);
        for j in first..last {
            let overlap = (hi.min((j + 1) as f64) - lo.max(j as f64)).max(0.0);
            w[[i, j]] = overlap / scale;
        }
    }
    w
}

/// Area-weighted resampling of a mask (or any scalar field) to `h x w`.
pub fn resample_area(values: &Array2<f64>, h: usize, w: usize) -> Result<Array2<f64>> {
    if h == 0 || w == 0 {
        return Err(Error::arg(format!("target size {h}x{w} must be positive")));
    }
    let (rows, cols) = values.dim();
    if rows == h && cols == w {
        return Ok(values.clone());
    }
    let wy = area_weights(h, rows);
    let wx = area_weights(w, cols);
    Ok(wy.dot(values).dot(&wx.t()))
}

/// Soft mask at `h x w` whose cells are the covered-area average of the input.
pub fn downsample_mask(mask: &BinaryMask, h: usize, w: usize) -> Result<SoftMask> {
    resample_area(&mask.to_values(), h, w)
}
