//! Masked SLIC over the hair region and centroid tracking of the resulting
//! style regions between optimization steps.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{check_same_dims, BinaryMask, Image};
use crate::error::{Error, Result};

/// Centroid in scaled feature space: `(m x / S, m y / S, L, a, b)`.
pub type Centroid = [f64; 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicParams {
    pub n_regions: usize,
    pub compactness: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams {
            n_regions: 5,
            compactness: 10.0,
            iters: 10,
            seed: 0,
        }
    }
}

/// Disjoint style regions covering a hair mask.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleRegionSet {
    pub masks: Vec<BinaryMask>,
    pub labels: Vec<usize>,
    pub centroids: Vec<Centroid>,
    /// Optimization step the regions were extracted at.
    pub step: usize,
    /// k-means energy after each assignment pass.
    pub energy_trace: Vec<f64>,
}

impl StyleRegionSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Per-pixel region label, `-1` outside every region.
    pub fn label_map(&self) -> Array2<i32> {
        let dims = self.masks.first().map(|m| m.dims()).unwrap_or((0, 0));
        let mut map = Array2::from_elem(dims, -1);
        for (mask, &label) in self.masks.iter().zip(&self.labels) {
            for ((y, x), &v) in mask.data().indexed_iter() {
                if v {
                    map[[y, x]] = label as i32;
                }
            }
        }
        map
    }

    /// Checks that the regions partition `hair` exactly.
    pub fn check_partition(&self, hair: &BinaryMask) -> Result<()> {
        let mut count = Array2::<u32>::zeros(hair.dims());
        for m in &self.masks {
            check_same_dims(m.dims(), hair.dims(), "style region")?;
            for ((y, x), &v) in m.data().indexed_iter() {
                count[[y, x]] += v as u32;
            }
        }
        for ((y, x), &c) in count.indexed_iter() {
            if c != hair.get(y, x) as u32 {
                return Err(Error::arg(format!("region coverage {c} at ({y}, {x})")));
            }
        }
        Ok(())
    }
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// sRGB in `[0, 1]` to CIELAB under the D65 white point.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let (fx, fy, fz) = (lab_f(x / 0.950_47), lab_f(y), lab_f(z / 1.088_83));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn dist2(a: &Centroid, b: &Centroid) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mask-restricted SLIC: k-means in `(x/S, y/S, L, a, b)` with the
/// spatial part weighted by the compactness, followed by a connectivity
/// pass that merges orphan fragments into their nearest adjacent region.
pub fn slic_hair(img: &Image, hair_mask: &BinaryMask, params: &SlicParams) -> Result<StyleRegionSet> {
    check_same_dims(img.dims(), hair_mask.dims(), "slic_hair")?;
    let n_pixels = hair_mask.count();
    if n_pixels == 0 {
        return Err(Error::EmptyRegion("hair mask has no pixels".into()));
    }
    let k = params.n_regions;
    if k == 0 {
        return Err(Error::arg("n_regions must be at least 1"));
    }
    if k > n_pixels {
        return Err(Error::arg(format!(
            "n_regions {k} exceeds the {n_pixels} hair pixels"
        )));
    }
    if params.compactness <= 0.0 {
        return Err(Error::arg("compactness must be positive"));
    }

    let (h, w) = img.dims();
    let spacing = (n_pixels as f64 / k as f64).sqrt();
    let xy_scale = params.compactness / spacing;
    let data = img.data();

    let coords: Vec<(usize, usize)> = hair_mask
        .data()
        .indexed_iter()
        .filter(|(_, v)| **v)
        .map(|(p, _)| p)
        .collect();
    let feats: Vec<Centroid> = coords
        .iter()
        .map(|&(y, x)| {
            let [l, a, b] = rgb_to_lab([data[[y, x, 0]], data[[y, x, 1]], data[[y, x, 2]]]);
            [x as f64 * xy_scale, y as f64 * xy_scale, l, a, b]
        })
        .collect();

    let mut centroids = initial_centroids(hair_mask, &coords, &feats, k, xy_scale, params.seed);
    let mut assign = vec![0usize; coords.len()];
    let mut energy_trace = Vec::with_capacity(params.iters + 1);

    let assign_pass = |centroids: &[Centroid], assign: &mut [usize]| -> (f64, bool) {
        let mut energy = 0.0;
        let mut changed = false;
        for (p, f) in feats.iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (c, cen) in centroids.iter().enumerate() {
                let d = dist2(f, cen);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if assign[p] != best.1 {
                changed = true;
                assign[p] = best.1;
            }
            energy += best.0;
        }
        (energy, changed)
    };

    let (e0, _) = assign_pass(&centroids, &mut assign);
    energy_trace.push(e0);
    for _ in 0..params.iters {
        centroids = update_centroids(&feats, &assign, &centroids);
        let (e, changed) = assign_pass(&centroids, &mut assign);
        let prev = *energy_trace.last().expect("non-empty");
        debug_assert!(
            e <= prev + 1e-9 * prev.abs().max(1.0),
            "k-means energy increased: {prev} -> {e}"
        );
        energy_trace.push(e);
        if !changed {
            break;
        }
    }

    let mut label_map = Array2::from_elem((h, w), usize::MAX);
    for (p, &(y, x)) in coords.iter().enumerate() {
        label_map[[y, x]] = assign[p];
    }
    merge_orphans(&mut label_map, &coords, &feats, &centroids, xy_scale);

    for (p, &(y, x)) in coords.iter().enumerate() {
        assign[p] = label_map[[y, x]];
    }
    let centroids = update_centroids(&feats, &assign, &centroids);

    let masks = (0..k)
        .map(|c| BinaryMask::from_bools(label_map.mapv(|l| l == c)))
        .collect();
    Ok(StyleRegionSet {
        masks,
        labels: (0..k).collect(),
        centroids,
        step: 0,
        energy_trace,
    })
}

/// `k` seeds on a uniform grid laid over the mask's bounding box; grid
/// points off the mask snap to the nearest unused mask pixel.
fn initial_centroids(
    mask: &BinaryMask,
    coords: &[(usize, usize)],
    feats: &[Centroid],
    k: usize,
    xy_scale: f64,
    seed: u64,
) -> Vec<Centroid> {
    let (y0, x0, y1, x1) = mask.bounding_box().expect("non-empty mask");
    let (bh, bw) = ((y1 - y0) as f64, (x1 - x0) as f64);
    let rows = ((k as f64 * bh / bw).sqrt().round() as usize).clamp(1, k);
    let cols = k.div_ceil(rows);
    let mut grid: Vec<(f64, f64)> = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let gy = y0 as f64 + (r as f64 + 0.5) * bh / rows as f64 - 0.5;
            let gx = x0 as f64 + (c as f64 + 0.5) * bw / cols as f64 - 0.5;
            grid.push((gy, gx));
        }
    }
    if grid.len() > k {
        let mut idx: Vec<usize> = (0..grid.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(k);
        idx.sort_unstable();
        grid = idx.into_iter().map(|i| grid[i]).collect();
    }

    let mut used = vec![false; coords.len()];
    grid.into_iter()
        .map(|(gy, gx)| {
            let mut best = (f64::INFINITY, 0);
            for (p, &(y, x)) in coords.iter().enumerate() {
                if used[p] {
                    continue;
                }
                let d = (y as f64 - gy).powi(2) + (x as f64 - gx).powi(2);
                if d < best.0 {
                    best = (d, p);
                }
            }
            let p = best.1;
            used[p] = true;
            let mut c = feats[p];
            // keep the exact grid position when it lies on the chosen pixel
            if best.0 <= 0.5 {
                c[0] = gx * xy_scale;
                c[1] = gy * xy_scale;
            }
            c
        })
        .collect()
}

fn update_centroids(feats: &[Centroid], assign: &[usize], prev: &[Centroid]) -> Vec<Centroid> {
    let mut sums = vec![[0.0; 5]; prev.len()];
    let mut counts = vec![0usize; prev.len()];
    for (f, &a) in feats.iter().zip(assign) {
        counts[a] += 1;
        for d in 0..5 {
            sums[a][d] += f[d];
        }
    }
    sums.iter()
        .zip(&counts)
        .zip(prev)
        .map(|((s, &n), p)| if n == 0 { *p } else { s.map(|v| v / n as f64) })
        .collect()
}

const NEIGHBORS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn neighbors(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    NEIGHBORS.iter().filter_map(move |&(dy, dx)| {
        let ny = y as isize + dy;
        let nx = x as isize + dx;
        (ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w).then(|| (ny as usize, nx as usize))
    })
}

/// 4-connected components of equal label, in raster order of first pixel.
fn components(label_map: &Array2<usize>) -> Vec<(usize, Vec<(usize, usize)>)> {
    let (h, w) = label_map.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let l = label_map[[y, x]];
            if l == usize::MAX || seen[[y, x]] {
                continue;
            }
            let mut pix = Vec::new();
            let mut queue = VecDeque::from([(y, x)]);
            seen[[y, x]] = true;
            while let Some((cy, cx)) = queue.pop_front() {
                pix.push((cy, cx));
                for (ny, nx) in neighbors(cy, cx, h, w) {
                    if !seen[[ny, nx]] && label_map[[ny, nx]] == l {
                        seen[[ny, nx]] = true;
                        queue.push_back((ny, nx));
                    }
                }
            }
            out.push((l, pix));
        }
    }
    out
}

fn merge_orphans(
    label_map: &mut Array2<usize>,
    coords: &[(usize, usize)],
    feats: &[Centroid],
    centroids: &[Centroid],
    _xy_scale: f64,
) {
    let (h, w) = label_map.dim();
    let mut feat_at = Array2::from_elem((h, w), usize::MAX);
    for (p, &(y, x)) in coords.iter().enumerate() {
        feat_at[[y, x]] = p;
    }
    let comps = components(label_map);
    let mut largest = vec![(0usize, usize::MAX); centroids.len()];
    for (i, (l, pix)) in comps.iter().enumerate() {
        if pix.len() > largest[*l].0 {
            largest[*l] = (pix.len(), i);
        }
    }
    for (i, (l, pix)) in comps.iter().enumerate() {
        if largest[*l].1 == i {
            continue;
        }
        let current = label_map[[pix[0].0, pix[0].1]];
        let mut adjacent: Vec<usize> = pix
            .iter()
            .flat_map(|&(y, x)| neighbors(y, x, h, w))
            .map(|(ny, nx)| label_map[[ny, nx]])
            .filter(|&nl| nl != usize::MAX && nl != current)
            .collect();
        adjacent.sort_unstable();
        adjacent.dedup();
        if adjacent.is_empty() {
            continue;
        }
        let mut mean = [0.0; 5];
        for &(y, x) in pix {
            let f = feats[feat_at[[y, x]]];
            for d in 0..5 {
                mean[d] += f[d] / pix.len() as f64;
            }
        }
        let target = adjacent
            .into_iter()
            .map(|c| (dist2(&mean, &centroids[c]), c))
            .fold((f64::INFINITY, usize::MAX), |a, b| if b.0 < a.0 { b } else { a })
            .1;
        for &(y, x) in pix {
            label_map[[y, x]] = target;
        }
    }
}

/// Minimum-cost perfect matching; `result[i]` is the column matched to row `i`.
pub fn optimal_assignment(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    // potentials-based Hungarian algorithm, 1-indexed internally
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            result[p[j] - 1] = j - 1;
        }
    }
    result
}

/// Relabels `curr` so that region `i` of the output carries `prev`'s label
/// `i`, using the one-to-one matching with least total centroid distance.
pub fn track_style_regions(prev: &StyleRegionSet, curr: &StyleRegionSet) -> Result<StyleRegionSet> {
    if prev.len() != curr.len() {
        return Err(Error::arg(format!(
            "cannot track {} regions against {}",
            curr.len(),
            prev.len()
        )));
    }
    let n = prev.len();
    let cost = Array2::from_shape_fn((n, n), |(i, j)| dist2(&prev.centroids[i], &curr.centroids[j]).sqrt());
    let matching = optimal_assignment(&cost);
    Ok(StyleRegionSet {
        masks: matching.iter().map(|&j| curr.masks[j].clone()).collect(),
        labels: prev.labels.clone(),
        centroids: matching.iter().map(|&j| curr.centroids[j]).collect(),
        step: curr.step,
        energy_trace: curr.energy_trace.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn square_mask(n: usize, y0: usize, x0: usize, side: usize) -> BinaryMask {
        BinaryMask::from_bools(Array2::from_shape_fn((n, n), |(y, x)| {
            (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x)
        }))
    }

    #[test]
    fn lab_reference_values() {
        let white = rgb_to_lab([1.0, 1.0, 1.0]);
        assert!((white[0] - 100.0).abs() < 1e-3 && white[1].abs() < 1e-2 && white[2].abs() < 1e-2);
        let black = rgb_to_lab([0.0, 0.0, 0.0]);
        assert!(black.iter().all(|v| v.abs() < 1e-9));
        // pure red under D65: L=53.24, a=80.09, b=67.20
        let red = rgb_to_lab([1.0, 0.0, 0.0]);
        assert!((red[0] - 53.24).abs() < 0.05 && (red[1] - 80.09).abs() < 0.1 && (red[2] - 67.20).abs() < 0.1);
    }

    #[test]
    fn single_region_is_whole_mask() {
        let img = Image::filled(16, 16, [0.3, 0.2, 0.1]).unwrap();
        let mask = square_mask(16, 2, 3, 9);
        let params = SlicParams {
            n_regions: 1,
            ..SlicParams::default()
        };
        let r = slic_hair(&img, &mask, &params).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.masks[0], mask);
    }

    #[test]
    fn uniform_square_splits_into_quadrants() {
        let img = Image::filled(32, 32, [0.5, 0.5, 0.5]).unwrap();
        let mask = square_mask(32, 6, 6, 20);
        let params = SlicParams {
            n_regions: 4,
            ..SlicParams::default()
        };
        let r = slic_hair(&img, &mask, &params).unwrap();
        r.check_partition(&mask).unwrap();
        for m in &r.masks {
            assert!((m.count() as f64 - 100.0).abs() <= 10.0);
        }
    }

    #[test]
    fn errors() {
        let img = Image::filled(8, 8, [0.5; 3]).unwrap();
        let empty = BinaryMask::zeros(8, 8);
        assert!(matches!(
            slic_hair(&img, &empty, &SlicParams::default()),
            Err(Error::EmptyRegion(_))
        ));
        let tiny = square_mask(8, 0, 0, 2);
        assert!(matches!(
            slic_hair(&img, &tiny, &SlicParams::default()),
            Err(Error::Argument(_))
        ));
        assert!(slic_hair(&Image::filled(4, 4, [0.5; 3]).unwrap(), &tiny, &SlicParams::default()).is_err());
    }

    #[test]
    fn disconnected_fragments_are_merged() {
        // two color bands; the thin stripe of band color inside the other
        // region cannot survive as a separate fragment of a far label
        let mut data = Array3::from_elem((20, 20, 3), 0.2);
        for y in 0..20 {
            for x in 10..20 {
                for c in 0..3 {
                    data[[y, x, c]] = 0.8;
                }
            }
        }
        let img = Image::new(data).unwrap();
        let mask = BinaryMask::ones(20, 20);
        let params = SlicParams {
            n_regions: 3,
            ..SlicParams::default()
        };
        let r = slic_hair(&img, &mask, &params).unwrap();
        r.check_partition(&mask).unwrap();
        let comps = components(&r.label_map().mapv(|l| l as usize));
        let mut per_label = vec![0; 3];
        for (l, _) in comps {
            per_label[l] += 1;
        }
        assert!(per_label.iter().all(|&c| c <= 1));
    }

    #[test]
    fn hungarian_small_case() {
        let cost = ndarray::array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let m = optimal_assignment(&cost);
        let total: f64 = m.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn tracking_rejects_count_mismatch() {
        let img = Image::filled(16, 16, [0.5; 3]).unwrap();
        let mask = square_mask(16, 0, 0, 12);
        let a = slic_hair(&img, &mask, &SlicParams::default()).unwrap();
        let b = slic_hair(
            &img,
            &mask,
            &SlicParams {
                n_regions: 4,
                ..SlicParams::default()
            },
        )
        .unwrap();
        assert!(track_style_regions(&a, &b).is_err());
        let same = track_style_regions(&a, &a).unwrap();
        assert_eq!(same.masks, a.masks);
        assert_eq!(same.labels, a.labels);
    }
}
