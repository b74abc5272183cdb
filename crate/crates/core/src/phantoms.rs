//! Synthetic data: ellipse phantoms with smooth phase, Gaussian-blob coil
//! maps, and noisy undersampled acquisitions.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::forward::{estimate_coilmaps_central, CoilMaps, MultiCoilKSpace, SenseOperator};
use crate::numerics::ComplexVolume;
use crate::sampling::{generate_vdpd_mask, SamplingMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: Vec<usize>,
    pub n_ellipses: usize,
    pub intensity: (f64, f64),
    pub phase_roughness: f64,
    /// k-space noise std relative to the phantom's peak magnitude.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.len() < 2 || self.shape.len() > 3 || self.shape.contains(&0) {
            return Err(Error::Config(format!(
                "phantoms are 2-D or 3-D, got shape {:?}",
                self.shape
            )));
        }
        if self.n_ellipses == 0 {
            return Err(Error::Config("n_ellipses must be at least 1".into()));
        }
        let (lo, hi) = self.intensity;
        if !(0.0 <= lo && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("bad intensity range ({lo}, {hi})")));
        }
        if !(self.noise_sigma >= 0.0) || !(self.phase_roughness >= 0.0) {
            return Err(Error::Config("noise_sigma and phase_roughness must be >= 0".into()));
        }
        Ok(())
    }
}

/// Normalized coordinates in [-1, 1) along each axis.
fn coords(idx: &[usize], shape: &[usize]) -> Vec<f64> {
    idx.iter()
        .zip(shape)
        .map(|(&i, &n)| (i as f64 - (n / 2) as f64) / (n as f64 / 2.0))
        .collect()
}

struct Ellipse {
    center: Vec<f64>,
    axes: Vec<f64>,
    angle: f64,
    value: f64,
}

impl Ellipse {
    /// Rotation acts in the plane of the last two axes.
    fn contains(&self, p: &[f64]) -> bool {
        let nd = p.len();
        let d: Vec<f64> = p.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (a, b) = (d[nd - 2], d[nd - 1]);
        let mut r = vec![0.0; nd];
        r[..nd - 2].copy_from_slice(&d[..nd - 2]);
        r[nd - 2] = c * a + s * b;
        r[nd - 1] = -s * a + c * b;
        r.iter().zip(&self.axes).map(|(x, ax)| (x / ax).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Nested-ellipse phantom: a bright outer shell, a brain-like interior and
/// smaller random inclusions, times a smooth quadratic phase field.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<ComplexVolume> {
    spec.validate()?;
    let nd = spec.shape.len();
    let (lo, hi) = spec.intensity;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let outer_axes: Vec<f64> = (0..nd).map(|_| rng.random_range(0.72..0.86)).collect();
    let mut ellipses = vec![Ellipse {
        center: (0..nd).map(|_| rng.random_range(-0.04..0.04)).collect(),
        axes: outer_axes.clone(),
        angle: rng.random_range(-0.3..0.3),
        value: rng.random_range(lo + 0.8 * (hi - lo)..=hi),
    }];
    if spec.n_ellipses > 1 {
        let outer = &ellipses[0];
        ellipses.push(Ellipse {
            center: outer.center.clone(),
            axes: outer.axes.iter().map(|a| a * 0.88).collect(),
            angle: outer.angle,
            value: rng.random_range(lo..=hi),
        });
    }
    for _ in 2..spec.n_ellipses {
        let scale = &ellipses[1].axes;
        let center: Vec<f64> = scale.iter().map(|a| rng.random_range(-0.55..0.55) * a).collect();
        let axes: Vec<f64> = (0..nd).map(|_| rng.random_range(0.05..0.3)).collect();
        ellipses.push(Ellipse {
            center,
            axes,
            angle: rng.random_range(-PI..PI),
            value: rng.random_range(lo..=hi),
        });
    }
    // quadratic phase: constant, linear and second-order terms
    let n_terms = 1 + nd + nd * (nd + 1) / 2;
    let coef: Vec<f64> = (0..n_terms).map(|_| rng.random_range(-0.5..0.5)).collect();
    let roughness = spec.phase_roughness;

    Ok(ComplexVolume::from_fn(&spec.shape, |idx| {
        let p = coords(idx, &spec.shape);
        let mut mag = 0.0;
        for e in &ellipses {
            if e.contains(&p) {
                mag = e.value;
            }
        }
        if mag == 0.0 || roughness == 0.0 {
            return Complex64::new(mag, 0.0);
        }
        let mut phi = coef[0];
        let mut t = 1;
        for a in 0..nd {
            phi += coef[t] * p[a];
            t += 1;
        }
        for a in 0..nd {
            for b in a..nd {
                phi += coef[t] * p[a] * p[b];
                t += 1;
            }
        }
        Complex64::from_polar(mag, PI * roughness * phi)
    }))
}

/// Gaussian-blob coil sensitivities placed around the field of view with
/// linear phase (relative to the coil-average phase), normalized to unit
/// sum of squares at every voxel.
pub fn simulate_coilmaps(shape: &[usize], n_coils: usize, seed: u64) -> Result<CoilMaps> {
    if n_coils == 0 {
        return Err(Error::Config("n_coils must be at least 1".into()));
    }
    if shape.len() < 2 || shape.len() > 3 {
        return Err(Error::Shape(format!("coil maps need a 2-D or 3-D shape, got {:?}", shape)));
    }
    let nd = shape.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coils: Vec<(f64, f64, f64)> = (0..n_coils)
        .map(|c| {
            let theta = 2.0 * PI * (c as f64 + rng.random_range(-0.15..0.15)) / n_coils as f64;
            let width = rng.random_range(0.7..0.9);
            let slope = rng.random_range(0.6..1.2);
            (theta, width, slope)
        })
        .collect();
    let phase = |p: &[f64], &(theta, _, slope): &(f64, f64, f64)| {
        slope * (p[nd - 2] * theta.sin() - p[nd - 1] * theta.cos())
    };

    let mut maps: Vec<ComplexVolume> = coils
        .iter()
        .map(|coil| {
            ComplexVolume::from_fn(shape, |idx| {
                let p = coords(idx, shape);
                let (theta, width, _) = *coil;
                let (cy, cz) = (1.2 * theta.cos(), 1.2 * theta.sin());
                let mut d2 = (p[nd - 2] - cy).powi(2) + (p[nd - 1] - cz).powi(2);
                if nd == 3 {
                    d2 += 0.25 * p[0] * p[0];
                }
                let mean_phase =
                    coils.iter().map(|c| phase(&p, c)).sum::<f64>() / n_coils as f64;
                Complex64::from_polar(
                    (-d2 / (2.0 * width * width)).exp(),
                    phase(&p, coil) - mean_phase,
                )
            })
        })
        .collect();
    if n_coils == 1 {
        // a single coil's phase equals the average, so the map is exactly 1
        maps[0] = maps[0].map(|v| Complex64::new(v.norm(), 0.0));
    }
    Ok(CoilMaps::new(maps)?.normalized())
}

/// `A x` plus i.i.d. circular complex Gaussian noise (`E|n|^2 = sigma^2`)
/// on sampled points only.
pub fn simulate_acquisition(
    x: &ComplexVolume,
    maps: &CoilMaps,
    mask: &SamplingMask,
    noise_sigma: f64,
    seed: u64,
) -> Result<MultiCoilKSpace> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    let op = SenseOperator::new(maps, mask)?;
    let y = op.forward(x)?;
    if noise_sigma == 0.0 {
        return Ok(y);
    }
    let sampled = mask.expand_to(x.shape())?;
    let normal = Normal::new(0.0, noise_sigma / 2f64.sqrt()).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coils = y.coils().to_vec();
    for c in &mut coils {
        for (v, &s) in c.data_mut().iter_mut().zip(&sampled) {
            if s {
                *v += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
            }
        }
    }
    MultiCoilKSpace::new(coils, mask.clone())
}

/// Everything that defines a synthetic corpus, independent of its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub shape: Vec<usize>,
    pub n_coils: usize,
    pub noise_sigma: f64,
    pub accel: f64,
    pub center: Vec<usize>,
    pub corner_cut: bool,
    pub n_ellipses: usize,
    pub intensity: (f64, f64),
    pub phase_roughness: f64,
    /// Use maps estimated from the calibration region instead of the true ones.
    pub estimate_maps: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            shape: vec![64, 64],
            n_coils: 8,
            noise_sigma: 0.01,
            accel: 10.0,
            center: vec![12, 12],
            corner_cut: true,
            n_ellipses: 10,
            intensity: (0.2, 1.0),
            phase_roughness: 0.5,
            estimate_maps: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseSeeds {
    pub phantom: u64,
    pub coils: u64,
    pub mask: u64,
    pub noise: u64,
}

impl CaseSeeds {
    /// Per-case seeds depend only on the corpus seed and the case index.
    pub fn derive(corpus_seed: u64, index: u64) -> Self {
        let base = splitmix64(corpus_seed ^ splitmix64(index.wrapping_add(0x5eed)));
        Self {
            phantom: splitmix64(base ^ 1),
            coils: splitmix64(base ^ 2),
            mask: splitmix64(base ^ 3),
            noise: splitmix64(base ^ 4),
        }
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One simulated training or evaluation case.
#[derive(Debug, Clone)]
pub struct SimCase {
    pub index: u64,
    pub seeds: CaseSeeds,
    pub target: ComplexVolume,
    pub maps: CoilMaps,
    pub mask: SamplingMask,
    pub kspace: MultiCoilKSpace,
}

pub fn generate_case(spec: &CorpusSpec, corpus_seed: u64, index: u64) -> Result<SimCase> {
    let seeds = CaseSeeds::derive(corpus_seed, index);
    let phantom = generate_phantom(&PhantomSpec {
        shape: spec.shape.clone(),
        n_ellipses: spec.n_ellipses,
        intensity: spec.intensity,
        phase_roughness: spec.phase_roughness,
        noise_sigma: spec.noise_sigma,
        seed: seeds.phantom,
    })?;
    let true_maps = simulate_coilmaps(&spec.shape, spec.n_coils, seeds.coils)?;
    let grid = &spec.shape[spec.shape.len() - spec.center.len()..];
    let mask = if spec.accel <= 1.0 {
        SamplingMask::full(grid)?
    } else {
        generate_vdpd_mask(grid, spec.accel, &spec.center, spec.corner_cut, seeds.mask)?
    };
    let sigma = spec.noise_sigma * phantom.max_abs();
    let kspace = simulate_acquisition(&phantom, &true_maps, &mask, sigma, seeds.noise)?;
    let (maps, target) = if spec.estimate_maps {
        let est = estimate_coilmaps_central(&kspace, &spec.center)?;
        let full = SamplingMask::full(grid)?;
        let y_full = SenseOperator::new(&true_maps, &full)?.forward(&phantom)?;
        let target = SenseOperator::new(&est, &full)?.adjoint(y_full.coils())?;
        (est, target)
    } else {
        (true_maps, phantom)
    };
    Ok(SimCase {
        index,
        seeds,
        target,
        maps,
        mask,
        kspace,
    })
}

/// Cases `start..start + count` of the corpus identified by `corpus_seed`.
pub fn generate_corpus(
    spec: &CorpusSpec,
    corpus_seed: u64,
    start: u64,
    count: usize,
) -> Result<Vec<SimCase>> {
    (start..start + count as u64)
        .map(|i| generate_case(spec, corpus_seed, i))
        .collect()
}
