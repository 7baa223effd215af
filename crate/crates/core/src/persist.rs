//! On-disk formats: tensor directories (JSON header plus raw little-endian
//! f32 blob), PNG images and masks, indexed-color label maps, loss CSVs and
//! atomically written JSON documents.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{ImageEncoder, RgbImage};
use ndarray::{Array, Array2, Array3, ArrayD, Dimension, IxDyn};
use serde::{Deserialize, Serialize};

use crate::domain::{BinaryMask, FTensor, Image, LatentCode, SemanticLabel};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::superpixels::StyleRegionSet;

pub const HEADER_FILE: &str = "header.json";
pub const DATA_FILE: &str = "data.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorHeader {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub layout: String,
    pub endianness: String,
}

impl TensorHeader {
    fn new(name: &str, shape: &[usize]) -> Self {
        TensorHeader {
            name: name.to_string(),
            dtype: "f32".into(),
            shape: shape.to_vec(),
            layout: "row-major".into(),
            endianness: "little".into(),
        }
    }
}

fn artifact_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Artifact {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::arg(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| artifact_err(path, e.to_string()))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| artifact_err(path, e.to_string()))
}

/// Writes the tensor directory `<parent>/<name>/` and returns its path.
pub fn write_tensor<D: Dimension>(parent: &Path, name: &str, data: &Array<f64, D>) -> Result<PathBuf> {
    let dir = parent.join(name);
    create_dir(&dir)?;
    let mut blob = Vec::with_capacity(data.len() * 4);
    for v in data.iter() {
        blob.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    atomic_write(&dir.join(DATA_FILE), &blob)?;
    write_json(&dir.join(HEADER_FILE), &TensorHeader::new(name, data.shape()))?;
    Ok(dir)
}

/// Reads a tensor directory back as f64 values.
pub fn read_tensor(dir: &Path) -> Result<(TensorHeader, ArrayD<f64>)> {
    let header: TensorHeader = read_json(&dir.join(HEADER_FILE))?;
    if header.dtype != "f32" || header.layout != "row-major" || header.endianness != "little" {
        return Err(artifact_err(
            dir,
            format!("unsupported encoding {}/{}/{}", header.dtype, header.layout, header.endianness),
        ));
    }
    let data_path = dir.join(DATA_FILE);
    let blob = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let count: usize = header.shape.iter().product();
    if blob.len() != count * 4 {
        return Err(artifact_err(
            &data_path,
            format!("{} bytes for shape {:?}", blob.len(), header.shape),
        ));
    }
    let values = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let array = ArrayD::from_shape_vec(IxDyn(&header.shape), values).expect("size checked");
    Ok((header, array))
}

pub fn read_array2(dir: &Path) -> Result<Array2<f64>> {
    let (h, a) = read_tensor(dir)?;
    a.into_dimensionality()
        .map_err(|_| artifact_err(dir, format!("expected a matrix, found shape {:?}", h.shape)))
}

pub fn read_array3(dir: &Path) -> Result<Array3<f64>> {
    let (h, a) = read_tensor(dir)?;
    a.into_dimensionality()
        .map_err(|_| artifact_err(dir, format!("expected a 3-tensor, found shape {:?}", h.shape)))
}

/// The values a tensor takes after a write/read cycle.
pub fn f32_round_trip<D: Dimension>(a: &Array<f64, D>) -> Array<f64, D> {
    a.mapv(|v| v as f32 as f64)
}

pub fn write_latent(parent: &Path, name: &str, w: &LatentCode) -> Result<PathBuf> {
    write_tensor(parent, name, w.vectors())
}

pub fn read_latent(dir: &Path, split: usize) -> Result<LatentCode> {
    LatentCode::new(read_array2(dir)?, split).map_err(|e| artifact_err(dir, e.to_string()))
}

pub fn read_f(dir: &Path) -> Result<FTensor> {
    FTensor::new(read_array3(dir)?).map_err(|e| artifact_err(dir, e.to_string()))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(path: &Path, width: usize, height: usize, bytes: &[u8], color: image::ExtendedColorType) -> Result<()> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(bytes, width as u32, height as u32, color)
        .map_err(|e| Error::Codec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    atomic_write(path, &out)
}

/// 8-bit RGB PNG.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = img.dims();
    let bytes: Vec<u8> = img.data().iter().map(|v| to_u8(*v)).collect();
    encode_png(path, w, h, &bytes, image::ExtendedColorType::Rgb8)
}

/// Loads any PNG (or other decodable image) as RGB, resampling to
/// `resolution` when its size differs.
pub fn read_png(path: &Path, resolution: (usize, usize)) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Codec {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut rgb: RgbImage = decoded.to_rgb8();
    let (h, w) = resolution;
    if rgb.dimensions() != (w as u32, h as u32) {
        log::info!("resampling {} from {:?} to {w}x{h}", path.display(), rgb.dimensions());
        rgb = image::imageops::resize(&rgb, w as u32, h as u32, image::imageops::FilterType::Triangle);
    }
    let data = Array3::from_shape_fn((h, w, 3), |(y, x, c)| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0);
    Image::new(data)
}

/// Grayscale PNG, 255 inside the mask.
pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.dims();
    let bytes: Vec<u8> = mask.data().iter().map(|&v| if v { 255 } else { 0 }).collect();
    encode_png(path, w, h, &bytes, image::ExtendedColorType::L8)
}

pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let gray = image::load_from_memory(&bytes)
        .map_err(|e| Error::Codec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = gray.dimensions();
    Ok(BinaryMask::from_bools(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        gray.get_pixel(x as u32, y as u32)[0] >= 128
    })))
}

/// Evenly spread, fixed palette; index `i` always maps to the same color.
pub fn palette_color(i: usize) -> [u8; 3] {
    if i == 0 {
        return [0, 0, 0];
    }
    let hue = (i as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let v = if i % 2 == 0 { 0.75 } else { 1.0 };
    [to_u8(r * v), to_u8(g * v), to_u8(b * v)]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub index: u16,
    pub name: String,
    pub color: [u8; 3],
}

/// Class names for a label map: the hair and background classes are named,
/// the rest follow the segmenter's own numbering.
pub fn label_table(classes: usize, hair_class: u16, background_class: u16) -> Vec<LabelEntry> {
    (0..classes as u16)
        .map(|i| LabelEntry {
            index: i,
            name: if i == hair_class {
                "hair".into()
            } else if i == background_class {
                "background".into()
            } else {
                format!("class_{i:02}")
            },
            color: palette_color(i as usize),
        })
        .collect()
}

/// Indexed-color PNG of `label` plus the label table as JSON next to it
/// (same stem, `.json` extension).
pub fn write_label_png(path: &Path, label: &SemanticLabel, table: &[LabelEntry]) -> Result<()> {
    if table.len() != label.classes() || table.len() > 256 {
        return Err(Error::arg(format!(
            "label table has {} entries for {} classes",
            table.len(),
            label.classes()
        )));
    }
    let (h, w) = label.dims();
    let palette: Vec<u8> = table.iter().flat_map(|e| e.color).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(palette);
        let codec = |e: png::EncodingError| Error::Codec {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(codec)?;
        let bytes: Vec<u8> = label.data().iter().map(|&l| l as u8).collect();
        writer.write_image_data(&bytes).map_err(codec)?;
    }
    atomic_write(path, &out)?;
    write_json(&path.with_extension("json"), &table)
}

/// Reads the palette indices of an indexed PNG back into a label map.
pub fn read_label_png(path: &Path, classes: usize) -> Result<SemanticLabel> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let codec = |e: png::DecodingError| Error::Codec {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().map_err(codec)?;
    let info = reader.info();
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(artifact_err(path, "expected an 8-bit indexed PNG"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size().expect("image fits in memory")];
    reader.next_frame(&mut buf).map_err(codec)?;
    let data = Array2::from_shape_fn((h, w), |(y, x)| buf[y * w + x] as u16);
    SemanticLabel::new(data, classes).map_err(|e| artifact_err(path, e.to_string()))
}

/// Region colors over a darkened copy of `img`.
pub fn write_region_overlay(path: &Path, img: &Image, regions: &StyleRegionSet) -> Result<()> {
    let map = regions.label_map();
    let (h, w) = img.dims();
    let mut bytes = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let label = if map.dim() == (h, w) { map[[y, x]] } else { -1 };
            for c in 0..3 {
                let base = img.data()[[y, x, c]] * 0.4;
                let v = if label >= 0 {
                    0.5 * base + 0.5 * palette_color(label as usize + 1)[c] as f64 / 255.0
                } else {
                    base
                };
                bytes.push(to_u8(v));
            }
        }
    }
    encode_png(path, w, h, &bytes, image::ExtendedColorType::Rgb8)
}

/// One row per step: `step, <term values...>, total`. Terms missing from a
/// row (never the case for a single stage) are left empty.
pub fn write_losses_csv(path: &Path, rows: &[LossBreakdown]) -> Result<()> {
    let names: BTreeSet<&str> = rows.iter().flat_map(|r| r.terms().keys().map(String::as_str)).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| artifact_err(path, e.to_string());
    let mut header = vec!["step".to_string()];
    header.extend(names.iter().map(|n| n.to_string()));
    header.push("total".into());
    w.write_record(&header).map_err(csv_err)?;
    for (step, row) in rows.iter().enumerate() {
        let mut rec = vec![step.to_string()];
        for n in &names {
            rec.push(row.value(n).map(|v| format!("{v:e}")).unwrap_or_default());
        }
        rec.push(format!("{:e}", row.total()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| artifact_err(path, e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Column names of a losses CSV.
pub fn read_losses_header(path: &Path) -> Result<Vec<String>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| artifact_err(path, e.to_string()))?;
    Ok(r.headers()
        .map_err(|e| artifact_err(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn tensor_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = array![[0.1, -2.5, 3.0], [1e-8, 7.25, -0.0]];
        let path = write_tensor(dir.path(), "w", &a).unwrap();
        let back = read_array2(&path).unwrap();
        assert_eq!(back, f32_round_trip(&a));
        let header: TensorHeader = read_json(&path.join(HEADER_FILE)).unwrap();
        assert_eq!(header.shape, vec![2, 3]);
        assert_eq!(header.endianness, "little");
        assert_eq!(fs::read(path.join(DATA_FILE)).unwrap().len(), 24);
        assert_eq!(&fs::read(path.join(DATA_FILE)).unwrap()[4..8], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tensor(dir.path(), "f", &Array3::<f64>::zeros((2, 2, 2))).unwrap();
        fs::write(path.join(DATA_FILE), [0u8; 7]).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Artifact { .. })));
    }

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(Array3::from_shape_fn((4, 5, 3), |(y, x, c)| (y * 15 + x * 3 + c) as f64 / 80.0)).unwrap();
        let p = dir.path().join("a.png");
        write_png(&p, &img).unwrap();
        let back = read_png(&p, (4, 5)).unwrap();
        let err = (back.data() - img.data()).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn read_png_resamples_to_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        write_png(&p, &Image::filled(8, 8, [0.2, 0.4, 0.6]).unwrap()).unwrap();
        assert_eq!(read_png(&p, (4, 4)).unwrap().dims(), (4, 4));
    }

    #[test]
    fn label_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let label = SemanticLabel::new(Array2::from_shape_fn((3, 4), |(y, x)| ((y * 4 + x) % 16) as u16), 16).unwrap();
        let p = dir.path().join("s_obj.png");
        write_label_png(&p, &label, &label_table(16, 10, 0)).unwrap();
        assert_eq!(read_label_png(&p, 16).unwrap(), label);
        let table: Vec<LabelEntry> = read_json(&dir.path().join("s_obj.json")).unwrap();
        assert_eq!(table[10].name, "hair");
        assert_eq!(table[0].name, "background");
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = BinaryMask::from_bools(array![[true, false], [false, true]]);
        let p = dir.path().join("m.png");
        write_mask_png(&p, &m).unwrap();
        assert_eq!(read_mask_png(&p).unwrap(), m);
    }

    #[test]
    fn losses_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = LossBreakdown::new();
        a.add("pose", 1.0, 0.5);
        a.add("reg", 1.0, 0.0);
        let p = dir.path().join("losses.csv");
        write_losses_csv(&p, &[a.clone(), a]).unwrap();
        assert_eq!(read_losses_header(&p).unwrap(), ["step", "pose", "reg", "total"]);
        assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 3);
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        write_json(&p, &serde_json::json!({"a": 1})).unwrap();
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from("x.json")]);
    }
}
