//! Pose difference, tercile stratification and reconstruction metrics.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::domain::{check_same_dims, luma, Image};
use crate::error::{Error, Result};

/// Jaw contour indices of the 68-point landmark convention.
pub const JAW_KEYPOINTS: std::ops::Range<usize> = 0..17;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean L1 distance between the 3D jaw keypoints of two faces.
pub fn pose_difference(k_src: ArrayView2<'_, f64>, k_trg: ArrayView2<'_, f64>) -> Result<f64> {
    for k in [&k_src, &k_trg] {
        if k.nrows() < JAW_KEYPOINTS.end || k.ncols() != 3 {
            return Err(Error::arg(format!(
                "pose difference needs at least {} 3D keypoints, got {:?}",
                JAW_KEYPOINTS.end,
                k.dim()
            )));
        }
    }
    let total: f64 = JAW_KEYPOINTS
        .map(|i| (0..3).map(|c| (k_src[[i, c]] - k_trg[[i, c]]).abs()).sum::<f64>())
        .sum();
    Ok(total / JAW_KEYPOINTS.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stratum {
    Easy,
    Medium,
    Difficult,
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stratum::Easy => "Easy",
            Stratum::Medium => "Medium",
            Stratum::Difficult => "Difficult",
        })
    }
}

impl FromStr for Stratum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Easy" => Ok(Stratum::Easy),
            "Medium" => Ok(Stratum::Medium),
            "Difficult" => Ok(Stratum::Difficult),
            other => Err(Error::arg(format!("unknown stratum {other:?}"))),
        }
    }
}

/// A source/target pair with its pose difference, before stratification.
#[derive(Clone, Debug, PartialEq)]
pub struct PairInput {
    pub source: String,
    pub target: String,
    pub pd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub source: String,
    pub target: String,
    pub pd: f64,
    pub stratum: Stratum,
}

/// Splits the pairs into PD terciles. Records are ranked by a stable sort
/// on PD, so ties keep their input order; the first third is Easy. When the
/// count is not divisible by three the extra records go to Easy, then Medium.
/// Output order matches input order.
pub fn stratify_pairs(records: &[PairInput]) -> Result<Vec<PairRecord>> {
    let n = records.len();
    if n < 3 {
        return Err(Error::arg(format!("stratification needs at least 3 records, got {n}")));
    }
    if let Some(r) = records.iter().find(|r| !(r.pd.is_finite() && r.pd >= 0.0)) {
        return Err(Error::arg(format!("invalid pose difference {}", r.pd)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[a].pd.total_cmp(&records[b].pd));
    let base = n / 3;
    let easy = base + usize::from(n % 3 > 0);
    let medium = base + usize::from(n % 3 > 1);
    let mut strata = vec![Stratum::Easy; n];
    for (rank, &i) in order.iter().enumerate() {
        strata[i] = if rank < easy {
            Stratum::Easy
        } else if rank < easy + medium {
            Stratum::Medium
        } else {
            Stratum::Difficult
        };
    }
    Ok(records
        .iter()
        .zip(strata)
        .map(|(r, stratum)| PairRecord {
            source: r.source.clone(),
            target: r.target.clone(),
            pd: r.pd,
            stratum,
        })
        .collect())
}

#[derive(Debug, Deserialize)]
struct PairRow {
    path_src: String,
    path_trg: String,
    #[serde(default)]
    pd: Option<f64>,
    #[serde(default)]
    stratum: Option<String>,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Parse {
            line,
            message: format!("{}: {kind:?}", path.display()),
        },
    }
}

/// Reads `path_src,path_trg[,pd[,stratum]]` rows. A missing `pd` column or
/// empty cell reads as `None`.
pub fn read_pairs_csv(path: &Path) -> Result<Vec<(PairInput, Option<Stratum>, bool)>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for row in reader.deserialize::<PairRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let stratum = match row.stratum.as_deref() {
            None | Some("") => None,
            Some(s) => Some(s.parse()?),
        };
        out.push((
            PairInput {
                source: row.path_src,
                target: row.path_trg,
                pd: row.pd.unwrap_or(0.0),
            },
            stratum,
            row.pd.is_some(),
        ));
    }
    Ok(out)
}

pub fn write_pairs_csv(path: &Path, records: &[PairRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer
        .write_record(["path_src", "path_trg", "pd", "stratum"])
        .map_err(|e| csv_error(path, e))?;
    for r in records {
        writer
            .write_record([r.source.clone(), r.target.clone(), r.pd.to_string(), r.stratum.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn grayscale(img: &Image) -> Array2<f64> {
    let d = img.data();
    Array2::from_shape_fn(img.dims(), |(y, x)| luma(d[[y, x, 0]], d[[y, x, 1]], d[[y, x, 2]]))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian filter keeping only positions where the window fits.
fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let rows = Array2::from_shape_fn((h, w + 1 - n), |(y, ox)| (0..n).map(|i| k[i] * x[[y, ox + i]]).sum::<f64>());
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(oy, ox)| (0..n).map(|i| k[i] * rows[[oy + i, ox]]).sum::<f64>())
}

/// Mean structural similarity of the luma channels with an 11x11 Gaussian
/// window (sigma 1.5), unit data range and population statistics, averaged
/// over the positions where the window fits inside the image.
pub fn ssim(img_a: &Image, img_b: &Image) -> Result<f64> {
    check_same_dims(img_a.dims(), img_b.dims(), "ssim")?;
    let (h, w) = img_a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(format!("ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let a = grayscale(img_a);
    let b = grayscale(img_b);
    let k = gaussian_window();
    let mu_a = filter_valid(&a, &k);
    let mu_b = filter_valid(&b, &k);
    let aa = filter_valid(&(&a * &a), &k);
    let bb = filter_valid(&(&b * &b), &k);
    let ab = filter_valid(&(&a * &b), &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for (((&ma, &mb), (&saa, &sbb)), &sab) in mu_a.iter().zip(&mu_b).zip(aa.iter().zip(&bb)).zip(&ab) {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Peak signal-to-noise ratio in dB for unit-range images; infinite for
/// identical inputs.
pub fn psnr(img_a: &Image, img_b: &Image) -> Result<f64> {
    check_same_dims(img_a.dims(), img_b.dims(), "psnr")?;
    Ok(-10.0 * mse(img_a, img_b)?.log10())
}

pub fn mse(img_a: &Image, img_b: &Image) -> Result<f64> {
    check_same_dims(img_a.dims(), img_b.dims(), "mse")?;
    let d = img_a.data() - img_b.data();
    Ok(d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64)
}

/// Learned perceptual image distance (an LPIPS evaluator).
pub trait PerceptualDistance: Send + Sync {
    fn distance(&self, img_a: &Image, img_b: &Image) -> Result<f64>;
}

/// Distance between two image sets (an FID evaluator).
pub trait DistributionDistance: Send + Sync {
    fn distance(&self, set_a: &[Image], set_b: &[Image]) -> Result<f64>;
}
