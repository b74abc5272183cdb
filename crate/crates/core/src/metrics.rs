//! Complex structural similarity, its loss and gradient, and evaluation metrics.
//!
//! `SSIM_C(x, z) = l^alpha * c^beta * s^gamma` over uniform square windows,
//! where for complex patches
//!
//! ```text
//! l = ((2 Re{mu_x conj(mu_z)} + c1) / (|mu_x|^2 + |mu_z|^2 + c1) + 1) / 2
//! c = (2 sigma_x sigma_z + c2) / (sigma_x^2 + sigma_z^2 + c2)
//! s = (|sigma_xz| + c3) / (sigma_x sigma_z + c3)
//! ```
//!
//! with population (1/n) moments, `sigma_xz = mean((x - mu_x) conj(z - mu_z))`,
//! `c1 = (0.01 L)^2`, `c2 = (0.03 L)^2`, `c3 = c2 / 2`.
//!
//! Window statistics over whole images come from summed-area tables, which
//! also drive the adjoint box sums of the analytic gradient. Gradients of a
//! real loss with respect to a complex image use the convention
//! `g = d/dRe + i d/dIm`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ComplexVolume;

/// Factors are clamped to at least this before fractional powers.
const FACTOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Dynamic range `L`.
    pub dynamic_range: f64,
    pub window: usize,
}

impl SsimParams {
    /// Contrast-weighted exponents used for training (0.3, 1, 0.3).
    pub fn contrast_weighted(dynamic_range: f64) -> Self {
        Self {
            alpha: 0.3,
            beta: 1.0,
            gamma: 0.3,
            dynamic_range,
            window: 11,
        }
    }

    pub fn unweighted(dynamic_range: f64) -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            dynamic_range,
            window: 11,
        }
    }

    pub fn c1(&self) -> f64 {
        (0.01 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (0.03 * self.dynamic_range).powi(2)
    }

    pub fn c3(&self) -> f64 {
        self.c2() / 2.0
    }

    fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("SSIM exponents must be >= 0".into()));
        }
        if !(self.dynamic_range > 0.0) || self.window == 0 {
            return Err(Error::Config(
                "SSIM needs a positive dynamic range and window".into(),
            ));
        }
        Ok(())
    }
}

/// The three comparison factors of one window, before exponentiation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimComponents {
    pub luminance: f64,
    pub contrast: f64,
    pub structure: f64,
}

/// First and second moments of a window pair.
#[derive(Debug, Clone, Copy)]
struct Moments {
    mu_x: Complex64,
    mu_z: Complex64,
    /// mean |x|^2
    pow_x: f64,
    /// mean |z|^2
    pow_z: f64,
    /// mean x conj(z)
    cross: Complex64,
}

struct WindowEval {
    ssim: f64,
    /// gradient w.r.t. mu_x
    g_mu: Complex64,
    /// derivative w.r.t. mean |x|^2
    d_pow: f64,
    /// gradient w.r.t. mean x conj(z)
    g_cross: Complex64,
}

fn evaluate(m: &Moments, p: &SsimParams) -> WindowEval {
    let (c1, c2, c3) = (p.c1(), p.c2(), p.c3());
    let (a, b) = (m.mu_x, m.mu_z);
    let var_x = (m.pow_x - a.norm_sqr()).max(0.0);
    let var_z = (m.pow_z - b.norm_sqr()).max(0.0);
    let (sx, sz) = (var_x.sqrt(), var_z.sqrt());
    let sxz = m.cross - a * b.conj();

    let num_l = 2.0 * (a * b.conj()).re + c1;
    let den_l = a.norm_sqr() + b.norm_sqr() + c1;
    let l = 0.5 * (num_l / den_l + 1.0);
    let num_c = 2.0 * sx * sz + c2;
    let den_c = var_x + var_z + c2;
    let c = num_c / den_c;
    let abs_xz = sxz.norm();
    let num_s = abs_xz + c3;
    let den_s = sx * sz + c3;
    let s = num_s / den_s;

    let (lf, cf, sf) = (l.max(FACTOR_FLOOR), c.max(FACTOR_FLOOR), s.max(FACTOR_FLOOR));
    let ssim = lf.powf(p.alpha) * cf.powf(p.beta) * sf.powf(p.gamma);

    let dl = if l > FACTOR_FLOOR { p.alpha * ssim / lf } else { 0.0 };
    let dc = if c > FACTOR_FLOOR { p.beta * ssim / cf } else { 0.0 };
    let ds = if s > FACTOR_FLOOR { p.gamma * ssim / sf } else { 0.0 };

    // d/d var_x of the contrast and structure terms; zero where sigma_x = 0
    let mut d_var = 0.0;
    if sx > 0.0 && m.pow_x - a.norm_sqr() > 0.0 {
        let dc_dvar = (sz / sx * den_c - num_c) / (den_c * den_c);
        let ds_dvar = -num_s * sz / (2.0 * sx) / (den_s * den_s);
        d_var = dc * dc_dvar + ds * ds_dvar;
    }
    let g_sxz = if abs_xz > 0.0 {
        ds * sxz / (abs_xz * den_s)
    } else {
        Complex64::new(0.0, 0.0)
    };
    let g_l = (b * den_l - a * num_l) / (den_l * den_l);
    let g_mu = dl * g_l - 2.0 * a * d_var - g_sxz * b;

    WindowEval {
        ssim,
        g_mu,
        d_pow: d_var,
        g_cross: g_sxz,
    }
}

fn patch_moments(x: &[Complex64], z: &[Complex64]) -> Moments {
    let n = x.len() as f64;
    let mu_x: Complex64 = x.iter().sum::<Complex64>() / n;
    let mu_z: Complex64 = z.iter().sum::<Complex64>() / n;
    // two-pass central moments, re-expressed as raw moments for `evaluate`
    let var_x = x.iter().map(|v| (v - mu_x).norm_sqr()).sum::<f64>() / n;
    let var_z = z.iter().map(|v| (v - mu_z).norm_sqr()).sum::<f64>() / n;
    let cov: Complex64 = x
        .iter()
        .zip(z)
        .map(|(u, v)| (u - mu_x) * (v - mu_z).conj())
        .sum::<Complex64>()
        / n;
    Moments {
        mu_x,
        mu_z,
        pow_x: var_x + mu_x.norm_sqr(),
        pow_z: var_z + mu_z.norm_sqr(),
        cross: cov + mu_x * mu_z.conj(),
    }
}

/// Luminance, contrast and structure factors of a patch pair.
pub fn ssim_c_components(x: &[Complex64], z: &[Complex64], p: &SsimParams) -> Result<SsimComponents> {
    if x.len() != z.len() || x.is_empty() {
        return Err(Error::Shape(format!("patch sizes {} and {}", x.len(), z.len())));
    }
    let n = x.len() as f64;
    let mu_x: Complex64 = x.iter().sum::<Complex64>() / n;
    let mu_z: Complex64 = z.iter().sum::<Complex64>() / n;
    let sx = (x.iter().map(|v| (v - mu_x).norm_sqr()).sum::<f64>() / n).sqrt();
    let sz = (z.iter().map(|v| (v - mu_z).norm_sqr()).sum::<f64>() / n).sqrt();
    let sxz: Complex64 = x
        .iter()
        .zip(z)
        .map(|(u, v)| (u - mu_x) * (v - mu_z).conj())
        .sum::<Complex64>()
        / n;
    let (c1, c2, c3) = (p.c1(), p.c2(), p.c3());
    Ok(SsimComponents {
        luminance: 0.5
            * ((2.0 * (mu_x * mu_z.conj()).re + c1) / (mu_x.norm_sqr() + mu_z.norm_sqr() + c1)
                + 1.0),
        contrast: (2.0 * sx * sz + c2) / (sx * sx + sz * sz + c2),
        structure: (sxz.norm() + c3) / (sx * sz + c3),
    })
}

/// `SSIM_C` of two equally sized complex patches.
pub fn ssim_c_patch(x: &[Complex64], z: &[Complex64], p: &SsimParams) -> Result<f64> {
    p.validate()?;
    if x.len() != z.len() || x.is_empty() {
        return Err(Error::Shape(format!("patch sizes {} and {}", x.len(), z.len())));
    }
    Ok(evaluate(&patch_moments(x, z), p).ssim)
}

/// Summed-area table of a 2-D plane with a zero border row and column.
fn integral(plane: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut t = vec![Complex64::new(0.0, 0.0); (h + 1) * (w + 1)];
    for i in 0..h {
        let mut row = Complex64::new(0.0, 0.0);
        for j in 0..w {
            row += plane[i * w + j];
            t[(i + 1) * (w + 1) + j + 1] = t[i * (w + 1) + j + 1] + row;
        }
    }
    t
}

fn box_sum(t: &[Complex64], w: usize, r0: usize, c0: usize, r1: usize, c1: usize) -> Complex64 {
    let s = w + 1;
    t[r1 * s + c1] - t[r0 * s + c1] - t[r1 * s + c0] + t[r0 * s + c0]
}

/// Splits a volume into 2-D planes over its last two axes.
fn planes(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w] => Ok((1, *h, *w)),
        [d, h, w] => Ok((*d, *h, *w)),
        _ => Err(Error::Shape(format!("SSIM needs 2-D or 3-D volumes, got {:?}", shape))),
    }
}

struct Sweep {
    loss: f64,
    grad: Option<ComplexVolume>,
}

fn sweep(x: &ComplexVolume, z: &ComplexVolume, p: &SsimParams, with_grad: bool) -> Result<Sweep> {
    p.validate()?;
    x.same_shape(z)?;
    let (depth, h, w) = planes(x.shape())?;
    let k = p.window;
    if h < k || w < k {
        return Err(Error::Shape(format!(
            "image plane {h}x{w} is smaller than the {k}x{k} window"
        )));
    }
    let (hw, ww) = (h - k + 1, w - k + 1);
    let n = (k * k) as f64;
    let n_windows = (depth * hw * ww) as f64;
    let mut total = 0.0;
    let mut grad = with_grad.then(|| ComplexVolume::zeros(x.shape()));

    for d in 0..depth {
        let xs = &x.data()[d * h * w..(d + 1) * h * w];
        let zs = &z.data()[d * h * w..(d + 1) * h * w];
        let c = |v: f64| Complex64::new(v, 0.0);
        let t_x = integral(xs, h, w);
        let t_z = integral(zs, h, w);
        let t_px = integral(&xs.iter().map(|v| c(v.norm_sqr())).collect::<Vec<_>>(), h, w);
        let t_pz = integral(&zs.iter().map(|v| c(v.norm_sqr())).collect::<Vec<_>>(), h, w);
        let t_xz = integral(
            &xs.iter().zip(zs).map(|(a, b)| a * b.conj()).collect::<Vec<_>>(),
            h,
            w,
        );

        let mut g_mu = vec![Complex64::new(0.0, 0.0); hw * ww];
        let mut d_pow = vec![Complex64::new(0.0, 0.0); hw * ww];
        let mut g_cross = vec![Complex64::new(0.0, 0.0); hw * ww];
        for r in 0..hw {
            for q in 0..ww {
                let bs = |t: &[Complex64]| box_sum(t, w, r, q, r + k, q + k) / n;
                let m = Moments {
                    mu_x: bs(&t_x),
                    mu_z: bs(&t_z),
                    pow_x: bs(&t_px).re,
                    pow_z: bs(&t_pz).re,
                    cross: bs(&t_xz),
                };
                let e = evaluate(&m, p);
                total += 1.0 - e.ssim;
                if with_grad {
                    // d(loss)/d(window) = -1 / n_windows per window
                    let s = -1.0 / n_windows;
                    g_mu[r * ww + q] = e.g_mu * s;
                    d_pow[r * ww + q] = c(e.d_pow * s);
                    g_cross[r * ww + q] = e.g_cross * s;
                }
            }
        }

        if let Some(g) = grad.as_mut() {
            // adjoint of the box filter: sum over every window covering a pixel
            let t_mu = integral(&g_mu, hw, ww);
            let t_pow = integral(&d_pow, hw, ww);
            let t_cross = integral(&g_cross, hw, ww);
            let out = &mut g.data_mut()[d * h * w..(d + 1) * h * w];
            for i in 0..h {
                let (r0, r1) = ((i + 1).saturating_sub(k), (i + 1).min(hw));
                for j in 0..w {
                    let (c0, c1) = ((j + 1).saturating_sub(k), (j + 1).min(ww));
                    let sm = box_sum(&t_mu, ww, r0, c0, r1, c1);
                    let sp = box_sum(&t_pow, ww, r0, c0, r1, c1).re;
                    let sc = box_sum(&t_cross, ww, r0, c0, r1, c1);
                    out[i * w + j] = (sm + 2.0 * sp * xs[i * w + j] + sc * zs[i * w + j]) / n;
                }
            }
        }
    }
    Ok(Sweep {
        loss: total / n_windows,
        grad,
    })
}

/// Mean of `1 - SSIM_C` over every window that fits entirely inside the
/// image (no padding). 3-D volumes are treated as stacks of 2-D planes over
/// the last two axes.
pub fn ssim_c_loss(x: &ComplexVolume, z: &ComplexVolume, p: &SsimParams) -> Result<f64> {
    Ok(sweep(x, z, p, false)?.loss)
}

/// [`ssim_c_loss`] together with its gradient with respect to `x`.
pub fn ssim_c_loss_grad(
    x: &ComplexVolume,
    z: &ComplexVolume,
    p: &SsimParams,
) -> Result<(f64, ComplexVolume)> {
    let s = sweep(x, z, p, true)?;
    Ok((s.loss, s.grad.expect("gradient requested")))
}

/// Normalized mean-squared error in percent: `100 ||x - ref||^2 / ||ref||^2`.
pub fn nmse(x: &ComplexVolume, reference: &ComplexVolume) -> Result<f64> {
    x.same_shape(reference)?;
    let den = reference.norm_sqr();
    if den == 0.0 {
        return Err(Error::Precondition("nMSE reference is all zero".into()));
    }
    Ok(100.0 * x.sub(reference)?.norm_sqr() / den)
}

/// Mean unweighted SSIM (Wang et al. form, signed covariance) of the
/// magnitude images over valid windows, with `L = max |ref|`.
pub fn ssim_eval(x: &ComplexVolume, reference: &ComplexVolume, window: usize) -> Result<f64> {
    x.same_shape(reference)?;
    let (depth, h, w) = planes(x.shape())?;
    if h < window || w < window || window == 0 {
        return Err(Error::Shape(format!(
            "image plane {h}x{w} is smaller than the {window}x{window} window"
        )));
    }
    let dr = reference.max_abs();
    if dr == 0.0 {
        return Err(Error::Precondition("SSIM reference is all zero".into()));
    }
    let p = SsimParams::unweighted(dr);
    let (c1, c2, c3) = (p.c1(), p.c2(), p.c3());
    let (hw, ww) = (h - window + 1, w - window + 1);
    let n = (window * window) as f64;
    let mut total = 0.0;
    for d in 0..depth {
        let plane = |v: &ComplexVolume| -> Vec<Complex64> {
            v.data()[d * h * w..(d + 1) * h * w]
                .iter()
                .map(|c| Complex64::new(c.norm(), 0.0))
                .collect()
        };
        let (xs, zs) = (plane(x), plane(reference));
        let sq = |v: &[Complex64]| v.iter().map(|a| a * a).collect::<Vec<_>>();
        let t_x = integral(&xs, h, w);
        let t_z = integral(&zs, h, w);
        let t_xx = integral(&sq(&xs), h, w);
        let t_zz = integral(&sq(&zs), h, w);
        let t_xz = integral(&xs.iter().zip(&zs).map(|(a, b)| a * b).collect::<Vec<_>>(), h, w);
        for r in 0..hw {
            for q in 0..ww {
                let bs = |t: &[Complex64]| box_sum(t, w, r, q, r + window, q + window).re / n;
                let (mx, mz) = (bs(&t_x), bs(&t_z));
                let vx = (bs(&t_xx) - mx * mx).max(0.0);
                let vz = (bs(&t_zz) - mz * mz).max(0.0);
                let cov = bs(&t_xz) - mx * mz;
                let (sx, sz) = (vx.sqrt(), vz.sqrt());
                let l = (2.0 * mx * mz + c1) / (mx * mx + mz * mz + c1);
                let c = (2.0 * sx * sz + c2) / (vx + vz + c2);
                let s = (cov + c3) / (sx * sz + c3);
                total += l * c * s;
            }
        }
    }
    Ok(total / (depth * hw * ww) as f64)
}
