//! The multi-coil forward model `A`: coil weighting, centered FFT and
//! undersampling, plus its adjoint and coil-map estimation.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numerics::{fft_centered, ifft_centered, ComplexVolume};
use crate::sampling::{in_center, unflatten, SamplingMask};

/// Relative floor below which the root-sum-of-squares is treated as background.
pub const RSS_FLOOR: f64 = 1e-3;

/// Per-coil complex sensitivities sharing one image shape.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilMaps {
    maps: Vec<ComplexVolume>,
}

impl CoilMaps {
    pub fn new(maps: Vec<ComplexVolume>) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Config("at least one coil map is required".into()))?;
        for m in &maps[1..] {
            first.same_shape(m)?;
        }
        Ok(Self { maps })
    }

    pub fn n_coils(&self) -> usize {
        self.maps.len()
    }

    pub fn shape(&self) -> &[usize] {
        self.maps[0].shape()
    }

    pub fn maps(&self) -> &[ComplexVolume] {
        &self.maps
    }

    /// Voxelwise `sum_c |S_c|^2`.
    pub fn sum_of_squares(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.maps[0].len()];
        for m in &self.maps {
            for (a, v) in acc.iter_mut().zip(m.data()) {
                *a += v.norm_sqr();
            }
        }
        acc
    }

    /// Rescales every voxel with nonzero total sensitivity to unit sum of squares.
    pub fn normalized(mut self) -> Self {
        let sos = self.sum_of_squares();
        for m in &mut self.maps {
            for (v, &s) in m.data_mut().iter_mut().zip(&sos) {
                *v = if s > 0.0 { *v / s.sqrt() } else { Complex64::new(0.0, 0.0) };
            }
        }
        self
    }
}

/// Undersampled multi-coil k-space; excluded points hold exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCoilKSpace {
    coils: Vec<ComplexVolume>,
    mask: SamplingMask,
}

impl MultiCoilKSpace {
    pub fn new(coils: Vec<ComplexVolume>, mask: SamplingMask) -> Result<Self> {
        let first = coils
            .first()
            .ok_or_else(|| Error::Config("k-space needs at least one coil".into()))?;
        for c in &coils[1..] {
            first.same_shape(c)?;
        }
        let sampled = mask.expand_to(first.shape())?;
        for (ci, c) in coils.iter().enumerate() {
            if let Some(i) = c
                .data()
                .iter()
                .zip(&sampled)
                .position(|(v, &s)| !s && (v.re != 0.0 || v.im != 0.0))
            {
                return Err(Error::Consistency(format!(
                    "coil {ci} holds data at unsampled index {i}"
                )));
            }
        }
        Ok(Self { coils, mask })
    }

    pub fn n_coils(&self) -> usize {
        self.coils.len()
    }

    pub fn shape(&self) -> &[usize] {
        self.coils[0].shape()
    }

    pub fn coils(&self) -> &[ComplexVolume] {
        &self.coils
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn norm_sqr(&self) -> f64 {
        self.coils.iter().map(|c| c.norm_sqr()).sum()
    }

    /// `sum_c <self_c, other_c>`.
    pub fn inner_product(&self, other: &MultiCoilKSpace) -> Result<Complex64> {
        if self.n_coils() != other.n_coils() {
            return Err(Error::Shape("coil count mismatch".into()));
        }
        let mut acc = Complex64::new(0.0, 0.0);
        for (a, b) in self.coils.iter().zip(&other.coils) {
            acc += a.inner_product(b)?;
        }
        Ok(acc)
    }

    /// Multiplies every sample by `s`; the mask is unchanged.
    pub fn scale(&self, s: Complex64) -> MultiCoilKSpace {
        MultiCoilKSpace {
            coils: self.coils.iter().map(|c| c.scale(s)).collect(),
            mask: self.mask.clone(),
        }
    }
}

/// `A` and `A*` for fixed maps and mask, with the mask expanded once.
#[derive(Debug, Clone)]
pub struct SenseOperator<'a> {
    maps: &'a CoilMaps,
    mask: &'a SamplingMask,
    sampled: Vec<bool>,
}

impl<'a> SenseOperator<'a> {
    pub fn new(maps: &'a CoilMaps, mask: &'a SamplingMask) -> Result<Self> {
        let sampled = mask.expand_to(maps.shape())?;
        Ok(Self {
            maps,
            mask,
            sampled,
        })
    }

    pub fn image_shape(&self) -> &[usize] {
        self.maps.shape()
    }

    /// `y_c = M . F(S_c . x)`.
    pub fn forward(&self, x: &ComplexVolume) -> Result<MultiCoilKSpace> {
        let mut coils = Vec::with_capacity(self.maps.n_coils());
        for s in self.maps.maps() {
            let mut k = fft_centered(&s.zip_with(x, |a, b| a * b)?)?;
            self.apply_mask(&mut k);
            coils.push(k);
        }
        Ok(MultiCoilKSpace {
            coils,
            mask: self.mask.clone(),
        })
    }

    /// `x = sum_c conj(S_c) . F^-1(M . y_c)`.
    pub fn adjoint(&self, y: &[ComplexVolume]) -> Result<ComplexVolume> {
        if y.len() != self.maps.n_coils() {
            return Err(Error::Shape(format!(
                "{} k-space coils for {} maps",
                y.len(),
                self.maps.n_coils()
            )));
        }
        let mut out = ComplexVolume::zeros(self.maps.shape());
        for (s, yc) in self.maps.maps().iter().zip(y) {
            s.same_shape(yc)?;
            let mut k = yc.clone();
            self.apply_mask(&mut k);
            let img = ifft_centered(&k)?;
            for ((o, sv), iv) in out.data_mut().iter_mut().zip(s.data()).zip(img.data()) {
                *o += sv.conj() * iv;
            }
        }
        Ok(out)
    }

    /// `A* A x`.
    pub fn normal(&self, x: &ComplexVolume) -> Result<ComplexVolume> {
        let y = self.forward(x)?;
        self.adjoint(&y.coils)
    }

    /// `A* (y - A x)`.
    pub fn residual_gradient(&self, x: &ComplexVolume, y: &MultiCoilKSpace) -> Result<ComplexVolume> {
        let ax = self.forward(x)?;
        let diff: Vec<ComplexVolume> = y
            .coils
            .iter()
            .zip(&ax.coils)
            .map(|(a, b)| a.sub(b))
            .collect::<Result<_>>()?;
        self.adjoint(&diff)
    }

    /// `||y - A x||_2`.
    pub fn residual_norm(&self, x: &ComplexVolume, y: &MultiCoilKSpace) -> Result<f64> {
        let ax = self.forward(x)?;
        let mut acc = 0.0;
        for (a, b) in y.coils.iter().zip(&ax.coils) {
            acc += a.sub(b)?.norm_sqr();
        }
        Ok(acc.sqrt())
    }

    fn apply_mask(&self, k: &mut ComplexVolume) {
        for (v, &s) in k.data_mut().iter_mut().zip(&self.sampled) {
            if !s {
                *v = Complex64::new(0.0, 0.0);
            }
        }
    }
}

pub fn apply_forward(
    x: &ComplexVolume,
    maps: &CoilMaps,
    mask: &SamplingMask,
) -> Result<MultiCoilKSpace> {
    SenseOperator::new(maps, mask)?.forward(x)
}

pub fn apply_adjoint(
    y: &MultiCoilKSpace,
    maps: &CoilMaps,
    mask: &SamplingMask,
) -> Result<ComplexVolume> {
    SenseOperator::new(maps, mask)?.adjoint(&y.coils)
}

/// The zero-filled image `A* y`, also the unroll's starting iterate.
pub fn zero_filled_recon(
    y: &MultiCoilKSpace,
    maps: &CoilMaps,
    mask: &SamplingMask,
) -> Result<ComplexVolume> {
    apply_adjoint(y, maps, mask)
}

/// Coil maps from a Hann-apodized central k-space crop, divided by the
/// root-sum-of-squares image. Voxels whose RSS falls below
/// `RSS_FLOOR * max RSS` get zero sensitivity in every coil.
pub fn estimate_coilmaps_central(y: &MultiCoilKSpace, calib_extent: &[usize]) -> Result<CoilMaps> {
    let mask = &y.mask;
    let grid = mask.shape();
    if calib_extent.len() != grid.len() || calib_extent.iter().zip(grid).any(|(c, n)| c > n) {
        return Err(Error::Shape(format!(
            "calibration extent {:?} does not fit mask grid {:?}",
            calib_extent, grid
        )));
    }
    if calib_extent.contains(&0) {
        return Err(Error::Precondition("calibration extent must be nonzero".into()));
    }
    let grid_len: usize = grid.iter().product();
    let mut window = vec![0.0; grid_len];
    for (flat, w) in window.iter_mut().enumerate() {
        let idx = unflatten(flat, grid);
        if !in_center(&idx, grid, calib_extent) {
            continue;
        }
        if !mask.included()[flat] {
            return Err(Error::Precondition(format!(
                "calibration point {:?} is not sampled",
                idx
            )));
        }
        *w = idx
            .iter()
            .zip(grid)
            .zip(calib_extent)
            .map(|((&i, &n), &c)| {
                // symmetric about the center; zero at the lone -c/2 row of even crops
                let d = i as f64 - (n / 2) as f64;
                let half = c.div_ceil(2) as f64;
                (std::f64::consts::FRAC_PI_2 * d / half).cos().powi(2)
            })
            .product();
    }

    let mut low_res = Vec::with_capacity(y.n_coils());
    for k in &y.coils {
        let mut crop = k.clone();
        for (i, v) in crop.data_mut().iter_mut().enumerate() {
            *v *= window[i % grid_len];
        }
        low_res.push(ifft_centered(&crop)?);
    }
    let n = low_res[0].len();
    let rss: Vec<f64> = (0..n)
        .map(|i| low_res.iter().map(|c| c.data()[i].norm_sqr()).sum::<f64>().sqrt())
        .collect();
    let floor = RSS_FLOOR * rss.iter().cloned().fold(0.0, f64::max);
    for img in &mut low_res {
        for (v, &r) in img.data_mut().iter_mut().zip(&rss) {
            *v = if r > floor && r > 0.0 { *v / r } else { Complex64::new(0.0, 0.0) };
        }
    }
    CoilMaps::new(low_res)
}
