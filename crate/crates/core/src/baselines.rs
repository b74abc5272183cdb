//! Total-variation compressed sensing by iterative soft thresholding.
//!
//! Each iteration takes a gradient step on `0.5 ||y - A x||^2` and then
//! shrinks the anisotropic finite differences of the image:
//!
//! ```text
//! z      = x + step * A*(y - A x)
//! x_next = z - tau * D^T (D z - soft(D z, t))
//! ```
//!
//! The second line is a gradient step on the Moreau envelope of
//! `t ||D x||_1`, with `tau = smoothing / (4 * axes)` keeping it inside the
//! `1 / ||D^T D||` stability bound. In data-driven mode `t` is a fixed
//! quantile of the current difference magnitudes.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{CoilMaps, MultiCoilKSpace, SenseOperator};
use crate::numerics::ComplexVolume;
use crate::sampling::SamplingMask;

/// Consecutive residual increases tolerated before declaring divergence.
const DIVERGENCE_RUN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Fixed(f64),
    DataDriven { quantile: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvFlavor {
    Anisotropic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsConfig {
    pub n_iters: usize,
    pub step: f64,
    pub threshold_mode: ThresholdMode,
    pub tv_flavor: TvFlavor,
    pub stop_tol: f64,
    /// Fraction of the stable TV step taken per iteration, in (0, 1].
    pub smoothing: f64,
}

impl Default for CsConfig {
    fn default() -> Self {
        Self {
            n_iters: 200,
            step: 1.0,
            threshold_mode: ThresholdMode::DataDriven { quantile: 0.6 },
            tv_flavor: TvFlavor::Anisotropic,
            stop_tol: 1e-5,
            smoothing: 1.0,
        }
    }
}

impl CsConfig {
    fn validate(&self) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::Config("n_iters must be at least 1".into()));
        }
        if !(self.step > 0.0) {
            return Err(Error::Config(format!("step must be positive, got {}", self.step)));
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err(Error::Config(format!("smoothing must lie in (0, 1], got {}", self.smoothing)));
        }
        match self.threshold_mode {
            ThresholdMode::Fixed(t) if !(t >= 0.0) => {
                Err(Error::Config(format!("threshold must be >= 0, got {t}")))
            }
            ThresholdMode::DataDriven { quantile } if !(0.0..=1.0).contains(&quantile) => {
                Err(Error::Config(format!("quantile must lie in [0, 1], got {quantile}")))
            }
            _ => Ok(()),
        }
    }
}

/// Output of [`cs_tv_reconstruct_traced`].
#[derive(Debug, Clone)]
pub struct CsOutcome {
    pub image: ComplexVolume,
    pub iterations: usize,
    /// `||y - A x_k||` for k = 0..=iterations.
    pub residuals: Vec<f64>,
}

/// Shrinks the magnitude of `v` by `t`, keeping its phase.
pub fn soft_threshold(v: Complex64, t: f64) -> Complex64 {
    let m = v.norm();
    if m <= t || m == 0.0 {
        Complex64::new(0.0, 0.0)
    } else {
        v * ((m - t) / m)
    }
}

pub fn cs_tv_reconstruct(
    y: &MultiCoilKSpace,
    maps: &CoilMaps,
    mask: &SamplingMask,
    cfg: &CsConfig,
) -> Result<ComplexVolume> {
    Ok(cs_tv_reconstruct_traced(y, maps, mask, cfg)?.image)
}

pub fn cs_tv_reconstruct_traced(
    y: &MultiCoilKSpace,
    maps: &CoilMaps,
    mask: &SamplingMask,
    cfg: &CsConfig,
) -> Result<CsOutcome> {
    cfg.validate()?;
    let op = SenseOperator::new(maps, mask)?;
    let shape = op.image_shape().to_vec();
    let tau = cfg.smoothing / (4.0 * shape.len() as f64);

    let mut x = op.adjoint(y.coils())?;
    let mut residual = residual_coils(&op, &x, y)?;
    let mut residuals = vec![norm(&residual)];
    let mut rising = 0;
    let mut iterations = 0;

    for k in 0..cfg.n_iters {
        let grad = op.adjoint(&residual)?;
        let mut z = x.clone();
        z.axpy(Complex64::new(cfg.step, 0.0), &grad)?;

        let diffs = differences(&z);
        let t = match cfg.threshold_mode {
            ThresholdMode::Fixed(t) => t,
            ThresholdMode::DataDriven { quantile } => magnitude_quantile(&diffs, quantile),
        };
        let clipped: Vec<Vec<Complex64>> = diffs
            .iter()
            .map(|d| d.iter().map(|&v| v - soft_threshold(v, t)).collect())
            .collect();
        let correction = differences_adjoint(&clipped, &shape);
        let mut next = z;
        for (a, b) in next.data_mut().iter_mut().zip(&correction) {
            *a -= tau * b;
        }
        if !next.is_finite() {
            return Err(Error::NumericFailure {
                iteration: k + 1,
                detail: "non-finite CS iterate".into(),
            });
        }

        residual = residual_coils(&op, &next, y)?;
        let r = norm(&residual);
        rising = if r > *residuals.last().unwrap() { rising + 1 } else { 0 };
        residuals.push(r);
        if rising >= DIVERGENCE_RUN {
            return Err(Error::Divergence(format!(
                "data residual grew for {DIVERGENCE_RUN} consecutive iterations (now {r:.3e})"
            )));
        }

        let change = next.sub(&x)?.l2_norm() / x.l2_norm().max(f64::MIN_POSITIVE);
        x = next;
        iterations = k + 1;
        if change < cfg.stop_tol {
            break;
        }
    }
    Ok(CsOutcome {
        image: x,
        iterations,
        residuals,
    })
}

fn residual_coils(
    op: &SenseOperator<'_>,
    x: &ComplexVolume,
    y: &MultiCoilKSpace,
) -> Result<Vec<ComplexVolume>> {
    let ax = op.forward(x)?;
    y.coils()
        .iter()
        .zip(ax.coils())
        .map(|(a, b)| a.sub(b))
        .collect()
}

fn norm(coils: &[ComplexVolume]) -> f64 {
    coils.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    (0..shape.len()).map(|a| shape[a + 1..].iter().product()).collect()
}

/// Forward differences along every axis; the last slice of each axis is zero.
fn differences(x: &ComplexVolume) -> Vec<Vec<Complex64>> {
    let shape = x.shape();
    let st = strides(shape);
    let d = x.data();
    (0..shape.len())
        .map(|ax| {
            (0..d.len())
                .map(|i| {
                    if (i / st[ax]) % shape[ax] + 1 < shape[ax] {
                        d[i + st[ax]] - d[i]
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                })
                .collect()
        })
        .collect()
}

/// Adjoint of [`differences`].
fn differences_adjoint(diffs: &[Vec<Complex64>], shape: &[usize]) -> Vec<Complex64> {
    let st = strides(shape);
    let n: usize = shape.iter().product();
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (ax, d) in diffs.iter().enumerate() {
        for i in 0..n {
            if (i / st[ax]) % shape[ax] + 1 < shape[ax] {
                out[i + st[ax]] += d[i];
                out[i] -= d[i];
            }
        }
    }
    out
}

fn magnitude_quantile(diffs: &[Vec<Complex64>], q: f64) -> f64 {
    let mut mags: Vec<f64> = diffs.iter().flatten().map(|v| v.norm()).collect();
    if mags.is_empty() {
        return 0.0;
    }
    let k = ((mags.len() - 1) as f64 * q).floor() as usize;
    let (_, v, _) = mags.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    *v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::zero_filled_recon;
    use crate::metrics::nmse;
    use crate::phantoms::{generate_phantom, simulate_acquisition, simulate_coilmaps, PhantomSpec};
    use crate::sampling::generate_vdpd_mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn phantom(shape: &[usize], seed: u64, roughness: f64) -> ComplexVolume {
        generate_phantom(&PhantomSpec {
            shape: shape.to_vec(),
            n_ellipses: 8,
            intensity: (0.2, 1.0),
            phase_roughness: roughness,
            noise_sigma: 0.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn soft_threshold_examples() {
        let v = Complex64::new(3.0, 4.0);
        assert_eq!(soft_threshold(v, 5.0).norm(), 0.0);
        let s = soft_threshold(v, 2.5);
        assert!((s.norm() - 2.5).abs() < 1e-12);
        assert!((s.arg() - v.arg()).abs() < 1e-12);
        assert_eq!(soft_threshold(v, 0.0), v);
        assert_eq!(soft_threshold(Complex64::new(0.0, 0.0), 0.0), Complex64::new(0.0, 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let v = Complex64::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let t = rng.random_range(0.0..3.0);
            let s = soft_threshold(v, t);
            if v.norm() > t {
                assert!((s.norm() - (v.norm() - t)).abs() < 1e-12);
                assert!((s.arg() - v.arg()).abs() < 1e-9);
            } else {
                assert_eq!(s.norm(), 0.0);
            }
        }
    }

    #[test]
    fn difference_operator_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = [5, 7, 3];
        let x = ComplexVolume::from_fn(&shape, |_| Complex64::new(rng.random(), rng.random()));
        let d: Vec<Vec<Complex64>> = (0..3)
            .map(|_| (0..105).map(|_| Complex64::new(rng.random(), rng.random())).collect())
            .collect();
        let dx = differences(&x);
        let lhs: Complex64 = dx.iter().flatten().zip(d.iter().flatten()).map(|(a, b)| a * b.conj()).sum();
        let dtd = differences_adjoint(&d, &shape);
        let rhs: Complex64 = x.data().iter().zip(&dtd).map(|(a, b)| a * b.conj()).sum();
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn full_mask_unregularized_recovers_truth() {
        let shape = [32, 32];
        let x = phantom(&shape, 1, 0.5);
        let maps = simulate_coilmaps(&shape, 4, 1).unwrap();
        let mask = SamplingMask::full(&shape).unwrap();
        let y = simulate_acquisition(&x, &maps, &mask, 0.0, 0).unwrap();
        let cfg = CsConfig {
            n_iters: 50,
            threshold_mode: ThresholdMode::Fixed(0.0),
            ..CsConfig::default()
        };
        let out = cs_tv_reconstruct_traced(&y, &maps, &mask, &cfg).unwrap();
        assert!(out.iterations <= 50);
        assert!(nmse(&out.image, &x).unwrap() < 1e-6);
    }

    #[test]
    fn residual_non_increasing_without_regularization() {
        let shape = [32, 32];
        let x = phantom(&shape, 2, 0.5);
        let maps = simulate_coilmaps(&shape, 4, 2).unwrap();
        let mask = generate_vdpd_mask(&shape, 4.0, &[6, 6], false, 2).unwrap();
        let y = simulate_acquisition(&x, &maps, &mask, 0.0, 0).unwrap();
        let cfg = CsConfig {
            n_iters: 60,
            threshold_mode: ThresholdMode::Fixed(0.0),
            stop_tol: 0.0,
            ..CsConfig::default()
        };
        let out = cs_tv_reconstruct_traced(&y, &maps, &mask, &cfg).unwrap();
        for w in out.residuals.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} > {}", w[1], w[0]);
        }
    }

    #[test]
    fn beats_zero_filling_at_r4() {
        let shape = [64, 64];
        let x = phantom(&shape, 3, 0.0);
        let maps = simulate_coilmaps(&shape, 8, 3).unwrap();
        let mask = generate_vdpd_mask(&shape, 4.0, &[12, 12], true, 3).unwrap();
        let y = simulate_acquisition(&x, &maps, &mask, 0.01, 3).unwrap();
        let zf = zero_filled_recon(&y, &maps, &mask).unwrap();
        let cs = cs_tv_reconstruct(&y, &maps, &mask, &CsConfig::default()).unwrap();
        let (e_zf, e_cs) = (nmse(&zf, &x).unwrap(), nmse(&cs, &x).unwrap());
        assert!(e_cs < e_zf, "cs {e_cs} vs zero-filled {e_zf}");
    }

    #[test]
    fn global_phase_equivariance() {
        let shape = [32, 32];
        let x = phantom(&shape, 4, 0.5);
        let maps = simulate_coilmaps(&shape, 4, 4).unwrap();
        let mask = generate_vdpd_mask(&shape, 4.0, &[6, 6], false, 4).unwrap();
        let y = simulate_acquisition(&x, &maps, &mask, 0.01, 4).unwrap();
        let rot = Complex64::from_polar(1.0, 1.1);
        let cfg = CsConfig { n_iters: 40, ..CsConfig::default() };
        let a = cs_tv_reconstruct(&y, &maps, &mask, &cfg).unwrap().scale(rot);
        let b = cs_tv_reconstruct(&y.scale(rot), &maps, &mask, &cfg).unwrap();
        assert!(a.sub(&b).unwrap().l2_norm() < 1e-9 * a.l2_norm());
        // and no hidden randomness
        let c = cs_tv_reconstruct(&y.scale(rot), &maps, &mask, &cfg).unwrap();
        assert_eq!(b, c);
    }

    #[test]
    fn oversized_step_is_caught() {
        let shape = [32, 32];
        let x = phantom(&shape, 5, 0.5);
        let maps = simulate_coilmaps(&shape, 4, 5).unwrap();
        let mask = generate_vdpd_mask(&shape, 3.0, &[6, 6], false, 5).unwrap();
        let y = simulate_acquisition(&x, &maps, &mask, 0.0, 0).unwrap();
        let cfg = CsConfig {
            step: 2.5,
            threshold_mode: ThresholdMode::Fixed(0.0),
            stop_tol: 0.0,
            ..CsConfig::default()
        };
        assert!(matches!(
            cs_tv_reconstruct(&y, &maps, &mask, &cfg),
            Err(Error::Divergence(_))
        ));
    }

    #[test]
    fn rejects_bad_config() {
        let shape = [16, 16];
        let maps = simulate_coilmaps(&shape, 2, 0).unwrap();
        let mask = SamplingMask::full(&shape).unwrap();
        let y = simulate_acquisition(&ComplexVolume::zeros(&shape), &maps, &mask, 0.0, 0).unwrap();
        for cfg in [
            CsConfig { n_iters: 0, ..CsConfig::default() },
            CsConfig { step: 0.0, ..CsConfig::default() },
            CsConfig { threshold_mode: ThresholdMode::DataDriven { quantile: 1.5 }, ..CsConfig::default() },
        ] {
            assert!(matches!(cs_tv_reconstruct(&y, &maps, &mask, &cfg), Err(Error::Config(_))));
        }
    }
}
