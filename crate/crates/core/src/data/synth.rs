use std::f64::consts::TAU;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{HyperspectralCube, LabelMap};
use crate::error::{Error, Result};
use crate::rng;

/// Parameters for a synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    /// Fraction of pixels whose label is set to 0.
    pub unlabeled_fraction: f64,
}

impl SynthSpec {
    pub fn new(seed: u64, hw: usize, bands: usize, classes: usize, noise_sigma: f64) -> Self {
        SynthSpec {
            seed,
            height: hw,
            width: hw,
            bands,
            classes,
            noise_sigma,
            unlabeled_fraction: 0.5,
        }
    }

    /// 12×12, 16 bands, 3 classes; for unit tests.
    pub fn small(seed: u64) -> Self {
        SynthSpec::new(seed, 12, 16, 3, 0.05)
    }
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub cube: HyperspectralCube,
    pub labels: LabelMap,
    /// Class `c` is `prototypes[c − 1]`.
    pub prototypes: Vec<Vec<f64>>,
    /// Class of every pixel, including those marked unlabeled.
    pub regions: Vec<u32>,
}

const MIN_PROTOTYPE_GAP: f64 = 1.0;

fn prototype<R: Rng>(bands: usize, r: &mut R) -> Vec<f64> {
    let terms = r.random_range(1..=5);
    let offset = r.random_range(-0.5..0.5);
    let waves: Vec<(f64, f64, f64)> = (0..terms)
        .map(|_| {
            (
                r.random_range(0.3..1.0),
                r.random_range(0.5..3.0),
                r.random_range(0.0..TAU),
            )
        })
        .collect();
    (0..bands)
        .map(|b| {
            let t = b as f64 / bands as f64;
            offset + waves.iter().map(|(a, f, p)| a * (TAU * f * t + p).sin()).sum::<f64>()
        })
        .collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Smooth class prototypes on a seeded Voronoi layout, plus Gaussian noise.
pub fn synth_scene(spec: &SynthSpec) -> Result<SynthScene> {
    let (h, w, b, k) = (spec.height, spec.width, spec.bands, spec.classes);
    if k < 2 {
        return Err(Error::Config(format!("synthetic scene needs at least 2 classes, got {k}")));
    }
    if k > h * w {
        return Err(Error::Config(format!("{k} classes do not fit a {h}x{w} grid")));
    }
    if !(0.0..1.0).contains(&spec.unlabeled_fraction) {
        return Err(Error::Config("unlabeled fraction must lie in [0, 1)".into()));
    }
    if spec.noise_sigma < 0.0 {
        return Err(Error::Config("noise sigma must be non-negative".into()));
    }

    let mut pr = rng::stream(spec.seed, &[1]);
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(k);
    while prototypes.len() < k {
        let cand = prototype(b, &mut pr);
        if prototypes.iter().all(|p| l2(p, &cand) >= MIN_PROTOTYPE_GAP) {
            prototypes.push(cand);
        }
    }

    let mut sr = rng::stream(spec.seed, &[2]);
    let sites: Vec<(f64, f64)> = index::sample(&mut sr, h * w, k)
        .into_iter()
        .map(|i| ((i / w) as f64, (i % w) as f64))
        .collect();
    let regions: Vec<u32> = (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            let d = |s: &(f64, f64)| (s.0 - r).powi(2) + (s.1 - c).powi(2);
            let best = (0..k).min_by(|&a, &z| d(&sites[a]).total_cmp(&d(&sites[z]))).expect("k ≥ 2");
            best as u32 + 1
        })
        .collect();

    let mut nr = rng::stream(spec.seed, &[3]);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut values = Vec::with_capacity(h * w * b);
    for &class in &regions {
        let proto = &prototypes[class as usize - 1];
        if spec.noise_sigma == 0.0 {
            values.extend_from_slice(proto);
        } else {
            values.extend(proto.iter().map(|p| p + noise.sample(&mut nr)));
        }
    }

    let mut labels = regions.clone();
    let mut ur = rng::stream(spec.seed, &[4]);
    let hidden = (spec.unlabeled_fraction * (h * w) as f64).round() as usize;
    for i in index::sample(&mut ur, h * w, hidden) {
        labels[i] = 0;
    }

    Ok(SynthScene {
        cube: HyperspectralCube::new(h, w, b, values)?,
        labels: LabelMap::new(h, w, labels)?,
        prototypes,
        regions,
    })
}

pub fn synth_generate(spec: &SynthSpec) -> Result<(HyperspectralCube, LabelMap)> {
    let scene = synth_scene(spec)?;
    Ok((scene.cube, scene.labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_pixels_equal_prototypes() {
        let mut spec = SynthSpec::small(5);
        spec.noise_sigma = 0.0;
        let s = synth_scene(&spec).unwrap();
        for i in 0..spec.height * spec.width {
            let proto = &s.prototypes[s.regions[i] as usize - 1];
            assert_eq!(s.cube.spectrum(i / spec.width, i % spec.width), proto.as_slice());
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synth_generate(&SynthSpec::small(8)).unwrap();
        let b = synth_generate(&SynthSpec::small(8)).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&SynthSpec::small(9)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn every_class_has_a_region_and_gap() {
        let s = synth_scene(&SynthSpec::new(1, 16, 24, 6, 0.1)).unwrap();
        for c in 1..=6 {
            assert!(s.regions.contains(&c));
        }
        for i in 0..6 {
            for j in 0..i {
                assert!(l2(&s.prototypes[i], &s.prototypes[j]) >= 1.0);
            }
        }
        let hidden = s.labels.labels().iter().filter(|&&l| l == 0).count();
        assert_eq!(hidden, 128);
    }

    #[test]
    fn nearest_prototype_oracle() {
        let s = synth_scene(&SynthSpec::new(21, 32, 48, 2, 0.05)).unwrap();
        let (mut hit, mut total) = (0usize, 0usize);
        for i in 0..32 * 32 {
            let label = s.labels.labels()[i];
            if label == 0 {
                continue;
            }
            let x = s.cube.spectrum(i / 32, i % 32);
            let pred = (0..2).min_by(|&a, &b| l2(x, &s.prototypes[a]).total_cmp(&l2(x, &s.prototypes[b]))).unwrap();
            hit += (pred as u32 + 1 == label) as usize;
            total += 1;
        }
        assert!(hit as f64 / total as f64 >= 0.999);
    }

    #[test]
    fn rejects_single_class() {
        assert!(matches!(synth_scene(&SynthSpec::new(0, 8, 8, 1, 0.1)), Err(Error::Config(_))));
    }
}
