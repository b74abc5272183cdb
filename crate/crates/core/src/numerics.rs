//! Complex volumes and centered unitary FFTs.
//!
//! Volumes are dense row-major arrays of `Complex64` with 1 to 3 axes. All
//! spectra are centered: the zero frequency of an axis of length `n` sits at
//! index `n / 2`. Both transform directions carry a `1/sqrt(N)` factor so the
//! forward transform is unitary and the inverse is its conjugate transpose.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};

/// Dense complex array holding an image or one coil of k-space.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVolume {
    shape: Vec<usize>,
    data: Vec<Complex64>,
}

impl ComplexVolume {
    pub fn new(shape: Vec<usize>, data: Vec<Complex64>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} ({} samples)",
                data.len(),
                shape,
                n
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Precondition(format!("non-finite sample at flat index {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    /// Builds a volume by evaluating `f` on every multi-index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> Complex64) -> Self {
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_real(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn same_shape(&self, other: &ComplexVolume) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &ComplexVolume) -> Result<ComplexVolume> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ComplexVolume) -> Result<ComplexVolume> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: Complex64) -> ComplexVolume {
        self.map(|v| v * s)
    }

    /// Elementwise `conj(self) * other`.
    pub fn conj_multiply(&self, other: &ComplexVolume) -> Result<ComplexVolume> {
        self.zip_with(other, |a, b| a.conj() * b)
    }

    pub fn l2_norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    /// `sum_i self_i * conj(other_i)`, linear in the first argument.
    pub fn inner_product(&self, other: &ComplexVolume) -> Result<Complex64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b.conj())
            .sum())
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> ComplexVolume {
        ComplexVolume {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(
        &self,
        other: &ComplexVolume,
        f: impl Fn(Complex64, Complex64) -> Complex64,
    ) -> Result<ComplexVolume> {
        self.same_shape(other)?;
        Ok(ComplexVolume {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: Complex64, other: &ComplexVolume) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn abs(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.norm()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(Error::Shape(format!(
            "volumes must have 1 to 3 axes, got {:?}",
            shape
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Shape(format!("empty extent in shape {:?}", shape)));
    }
    Ok(())
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(len: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let (planner, cache) = &mut *cell.borrow_mut();
        cache
            .entry((len, forward))
            .or_insert_with(|| {
                let dir = if forward {
                    FftDirection::Forward
                } else {
                    FftDirection::Inverse
                };
                planner.plan_fft(len, dir)
            })
            .clone()
    })
}

/// Unitary DFT with zero frequency at the array center on every axis.
pub fn fft_centered(img: &ComplexVolume) -> Result<ComplexVolume> {
    transform(img, true)
}

/// Exact inverse of [`fft_centered`].
pub fn ifft_centered(ksp: &ComplexVolume) -> Result<ComplexVolume> {
    transform(ksp, false)
}

fn transform(vol: &ComplexVolume, forward: bool) -> Result<ComplexVolume> {
    check_shape(&vol.shape)?;
    let mut out = vol.clone();
    for axis in 0..vol.ndim() {
        transform_axis(&mut out, axis, forward);
    }
    let scale = 1.0 / (vol.len() as f64).sqrt();
    for v in out.data.iter_mut() {
        *v *= scale;
    }
    Ok(out)
}

/// Shifted 1-D transform along `axis`: gather with ifftshift, transform,
/// scatter with fftshift. No normalization.
fn transform_axis(vol: &mut ComplexVolume, axis: usize, forward: bool) {
    let n = vol.shape[axis];
    if n == 1 {
        return;
    }
    let stride: usize = vol.shape[axis + 1..].iter().product();
    let outer: usize = vol.shape[..axis].iter().product();
    let half = n / 2;
    let fft = plan(n, forward);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for o in 0..outer {
        for s in 0..stride {
            let base = o * n * stride + s;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = vol.data[base + ((i + half) % n) * stride];
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, b) in buf.iter().enumerate() {
                vol.data[base + ((k + half) % n) * stride] = *b;
            }
        }
    }
}
