//! Hyperspectral cubes, label maps, token neighborhoods and splits.

pub mod npy;
mod synth;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use synth::{synth_generate, synth_scene, SynthScene, SynthSpec};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use npy::{NpyArray, NpyData};

/// `(row, col)` pixel coordinate.
pub type Coord = (usize, usize);

pub const STD_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// `H×W×B` raster stored pixel-major (`values[(h·W + w)·B + b]`).
#[derive(Clone, Debug, PartialEq)]
pub struct HyperspectralCube {
    height: usize,
    width: usize,
    bands: usize,
    values: Vec<f64>,
    band_stats: Option<BandStats>,
}

impl HyperspectralCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data(format!("empty raster {height}x{width}")));
        }
        if bands < 2 {
            return Err(Error::Data(format!("cube needs at least 2 bands, got {bands}")));
        }
        if values.len() != height * width * bands {
            return Err(Error::Shape(format!(
                "{height}x{width}x{bands} cube needs {} values, got {}",
                height * width * bands,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            let (h, rest) = (i / (width * bands), i % (width * bands));
            return Err(Error::Data(format!(
                "non-finite value {} at index ({h}, {}, {})",
                values[i],
                rest / bands,
                rest % bands
            )));
        }
        Ok(HyperspectralCube {
            height,
            width,
            bands,
            values,
            band_stats: None,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn band_stats(&self) -> Option<&BandStats> {
        self.band_stats.as_ref()
    }

    pub fn spectrum(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.bands;
        &self.values[start..start + self.bands]
    }

    pub fn contains(&self, (r, c): Coord) -> bool {
        r < self.height && c < self.width
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} label map needs {} entries, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, (r, c): Coord) -> u32 {
        self.labels[r * self.width + c]
    }

    /// Largest class id `K`; 0 means nothing is labeled.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn coords_with(&self, label: u32) -> Vec<Coord> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == label)
            .map(|i| (i / self.width, i % self.width))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisOrder {
    #[default]
    Hwb,
    Bhw,
}

pub fn load_cube(
    cube_path: &Path,
    labels_path: Option<&Path>,
    axis_order: AxisOrder,
) -> Result<(HyperspectralCube, Option<LabelMap>)> {
    let arr = npy::read_npy(cube_path)?;
    let [a, b, c] = arr.shape[..] else {
        return Err(Error::Format(format!(
            "{}: cube must be 3-D, got shape {:?}",
            cube_path.display(),
            arr.shape
        )));
    };
    let raw = arr.data.to_f64().ok_or_else(|| {
        Error::Format(format!("{}: cube dtype must be <f4 or <f8", cube_path.display()))
    })?;
    let (h, w, bands, values) = match axis_order {
        AxisOrder::Hwb => (a, b, c, raw),
        AxisOrder::Bhw => {
            let (bands, h, w) = (a, b, c);
            let mut v = vec![0.0; raw.len()];
            for band in 0..bands {
                for px in 0..h * w {
                    v[px * bands + band] = raw[band * h * w + px];
                }
            }
            (h, w, bands, v)
        }
    };
    let cube = HyperspectralCube::new(h, w, bands, values)?;
    let labels = match labels_path {
        None => None,
        Some(p) => {
            let arr = npy::read_npy(p)?;
            let NpyData::I32(raw) = arr.data else {
                return Err(Error::Format(format!("{}: labels dtype must be <i4", p.display())));
            };
            if arr.shape != [h, w] {
                return Err(Error::Data(format!(
                    "{}: label shape {:?} does not match cube {h}x{w}",
                    p.display(),
                    arr.shape
                )));
            }
            if let Some(i) = raw.iter().position(|&l| l < 0) {
                return Err(Error::Data(format!(
                    "negative label {} at ({}, {})",
                    raw[i],
                    i / w,
                    i % w
                )));
            }
            Some(LabelMap::new(h, w, raw.into_iter().map(|l| l as u32).collect())?)
        }
    };
    Ok((cube, labels))
}

pub fn write_cube(path: &Path, cube: &HyperspectralCube) -> Result<()> {
    npy::write_npy(
        path,
        &NpyArray {
            shape: vec![cube.height, cube.width, cube.bands],
            data: NpyData::F64(cube.values.clone()),
        },
    )
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    npy::write_npy(
        path,
        &NpyArray {
            shape: vec![labels.height, labels.width],
            data: NpyData::I32(labels.labels.iter().map(|&l| l as i32).collect()),
        },
    )
}

/// Per-band mean and population standard deviation over `coords`.
pub fn fit_band_stats(cube: &HyperspectralCube, coords: &[Coord]) -> Result<BandStats> {
    if coords.is_empty() {
        return Err(Error::Contract("standardization needs at least one fit coordinate".into()));
    }
    let b = cube.bands;
    let n = coords.len() as f64;
    let mut mean = vec![0.0; b];
    for &(r, c) in coords {
        for (m, v) in mean.iter_mut().zip(cube.spectrum(r, c)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; b];
    for &(r, c) in coords {
        for ((s, v), m) in var.iter_mut().zip(cube.spectrum(r, c)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
    Ok(BandStats { mean, std })
}

/// Applies `(v − mean_b)/(std_b + 1e-8)` to every pixel and records the stats.
pub fn apply_band_stats(cube: &HyperspectralCube, stats: &BandStats) -> HyperspectralCube {
    let b = cube.bands;
    let values = cube
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| (v - stats.mean[i % b]) / (stats.std[i % b] + STD_EPS))
        .collect();
    HyperspectralCube {
        values,
        band_stats: Some(stats.clone()),
        ..cube.clone()
    }
}

/// Fits band statistics on `fit_coords` only and applies them to the whole cube.
pub fn standardize(cube: &HyperspectralCube, fit_coords: &[Coord]) -> Result<HyperspectralCube> {
    Ok(apply_band_stats(cube, &fit_band_stats(cube, fit_coords)?))
}

/// The `S×S` neighborhood of one pixel as `N = S²` spectral tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    /// `N×B`, row-major over the window (top-left first).
    pub tokens: Tensor,
    pub patch_size: usize,
    pub center: Coord,
    pub label: Option<u32>,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Spatial offset `(dr, dc)` of token `i` from the center.
    pub fn offset(&self, i: usize) -> (isize, isize) {
        let s = self.patch_size as isize;
        let i = i as isize;
        (i / s - s / 2, i % s - s / 2)
    }
}

/// Mirror reflection without edge repetition (`-1 → 1`, `n → n−2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

pub fn extract_patch(cube: &HyperspectralCube, center: Coord, patch_size: usize) -> Result<PatchSequence> {
    if patch_size == 0 || patch_size.is_multiple_of(2) {
        return Err(Error::Contract(format!("patch size must be odd and positive, got {patch_size}")));
    }
    if !cube.contains(center) {
        return Err(Error::Contract(format!(
            "center {center:?} outside {}x{} raster",
            cube.height, cube.width
        )));
    }
    let half = (patch_size / 2) as isize;
    let mut data = Vec::with_capacity(patch_size * patch_size * cube.bands);
    for dr in -half..=half {
        let r = reflect_index(center.0 as isize + dr, cube.height);
        for dc in -half..=half {
            let c = reflect_index(center.1 as isize + dc, cube.width);
            data.extend_from_slice(cube.spectrum(r, c));
        }
    }
    Ok(PatchSequence {
        tokens: Tensor::new(vec![patch_size * patch_size, cube.bands], data)?,
        patch_size,
        center,
        label: None,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<Coord>,
    pub test: Vec<Coord>,
    pub unlabeled: Vec<Coord>,
}

impl SplitSpec {
    /// Coordinates standardization statistics are fit on (never test).
    pub fn fit_coords(&self) -> Vec<Coord> {
        let mut v = self.unlabeled.clone();
        v.extend_from_slice(&self.train);
        v
    }
}

/// Seeded per-class sample of `per_class` train pixels; remaining labeled pixels are test.
pub fn build_splits(labels: &LabelMap, per_class: usize, seed: u64) -> Result<SplitSpec> {
    let k = labels.num_classes();
    let mut split = SplitSpec {
        unlabeled: labels.coords_with(0),
        ..SplitSpec::default()
    };
    for class in 1..=k as u32 {
        let coords = labels.coords_with(class);
        if coords.len() < per_class {
            return Err(Error::Data(format!(
                "class {class} has {} labeled pixels, {per_class} needed for training",
                coords.len()
            )));
        }
        let mut r = rng::stream(seed, &[rng::tag::SHUFFLE, class as u64]);
        let mut chosen = vec![false; coords.len()];
        for i in index::sample(&mut r, coords.len(), per_class) {
            chosen[i] = true;
        }
        for (c, pick) in coords.into_iter().zip(chosen) {
            if pick {
                split.train.push(c);
            } else {
                split.test.push(c);
            }
        }
    }
    Ok(split)
}

pub fn write_split_csv(path: &Path, split: &SplitSpec) -> Result<()> {
    let mut out = String::from("row,col,role\n");
    for (role, coords) in [("train", &split.train), ("test", &split.test)] {
        for (r, c) in coords {
            out.push_str(&format!("{r},{c},{role}\n"));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a `row,col,role` split; pixels labeled 0 become the unlabeled pool.
pub fn read_split_csv(path: &Path, labels: &LabelMap) -> Result<SplitSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("row,col,role") {
        return Err(Error::Format(format!("{}: header must be 'row,col,role'", path.display())));
    }
    let mut split = SplitSpec {
        unlabeled: labels.coords_with(0),
        ..SplitSpec::default()
    };
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Format(format!("{}: malformed line {}: '{line}'", path.display(), lineno + 2));
        let mut f = line.split(',');
        let (Some(r), Some(c), Some(role), None) = (f.next(), f.next(), f.next(), f.next()) else {
            return Err(bad());
        };
        let coord = (
            r.trim().parse().map_err(|_| bad())?,
            c.trim().parse().map_err(|_| bad())?,
        );
        if coord.0 >= labels.height || coord.1 >= labels.width {
            return Err(Error::Data(format!("{}: {coord:?} is out of bounds", path.display())));
        }
        match role.trim() {
            "train" => split.train.push(coord),
            "test" => split.test.push(coord),
            _ => return Err(bad()),
        }
    }
    if split.train.iter().any(|c| split.test.contains(c)) {
        return Err(Error::Data(format!("{}: train and test overlap", path.display())));
    }
    Ok(split)
}

/// Dataset sidecar: `{"cube", "labels", "axis_order", "splits"}`; paths relative to the sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub cube: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub axis_order: AxisOrder,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub cube: HyperspectralCube,
    pub labels: LabelMap,
    pub splits: Option<SplitSpec>,
}

pub fn load_dataset(sidecar: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let cfg: DatasetConfig = serde_json::from_str(&text).map_err(|e| Error::json(sidecar, e))?;
    let base = sidecar.parent().unwrap_or(Path::new("."));
    let (cube, labels) = load_cube(&base.join(&cfg.cube), Some(&base.join(&cfg.labels)), cfg.axis_order)?;
    let labels = labels.expect("labels path was given");
    let splits = cfg
        .splits
        .as_ref()
        .map(|p| read_split_csv(&base.join(p), &labels))
        .transpose()?;
    Ok(Dataset {
        cube,
        labels,
        splits,
    })
}

pub fn write_sidecar(path: &Path, cfg: &DatasetConfig) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::json(path, e))?;
    writeln!(f, "{text}").map_err(|e| Error::io(path, e))
}
