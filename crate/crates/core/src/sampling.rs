//! k-space sampling masks.
//!
//! Masks live on the phase/slice-encode grid (`ky` or `ky x kz`) and are
//! broadcast over any leading (readout) axes of the image they are applied
//! to. The k-space center is at index `n / 2` on every axis, matching the
//! centered FFT in [`crate::numerics`].
//!
//! The variable-density Poisson-disc generator uses an exclusion radius that
//! grows linearly with distance from the center,
//! `r(k) = r0 * (1 + a * |k| / k_max)` with `a = 2`, and calibrates `r0` by
//! bisection so that the achieved net acceleration hits the target.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shape parameter `a` of the exclusion-radius law.
pub const VDPD_DENSITY_SLOPE: f64 = 2.0;

/// Relative tolerance on the achieved net acceleration.
pub const ACCEL_TOLERANCE: f64 = 0.05;

const MAX_BISECTION_STEPS: usize = 64;

/// Binary inclusion pattern over the phase/slice-encode grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    shape: Vec<usize>,
    included: Vec<bool>,
    target_r: f64,
    center_extent: Vec<usize>,
    corner_cut: bool,
    seed: u64,
    radius0: f64,
}

impl SamplingMask {
    /// Reassembles a mask from stored parts, validating every invariant.
    pub fn from_parts(
        shape: Vec<usize>,
        included: Vec<bool>,
        target_r: f64,
        center_extent: Vec<usize>,
        corner_cut: bool,
        seed: u64,
        radius0: f64,
    ) -> Result<Self> {
        check_grid(&shape, &center_extent)?;
        if included.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "mask has {} entries for shape {:?}",
                included.len(),
                shape
            )));
        }
        let mask = Self {
            shape,
            included,
            target_r,
            center_extent,
            corner_cut,
            seed,
            radius0,
        };
        mask.validate()?;
        Ok(mask)
    }

    /// A mask that includes every grid point.
    pub fn full(shape: &[usize]) -> Result<Self> {
        Self::from_parts(
            shape.to_vec(),
            vec![true; shape.iter().product()],
            1.0,
            vec![0; shape.len()],
            false,
            0,
            0.0,
        )
    }

    fn validate(&self) -> Result<()> {
        if !self.included.iter().any(|&b| b) {
            return Err(Error::Consistency("mask includes no points".into()));
        }
        for (flat, &inc) in self.included.iter().enumerate() {
            let idx = unflatten(flat, &self.shape);
            if in_center(&idx, &self.shape, &self.center_extent) && !inc {
                return Err(Error::Consistency(format!(
                    "calibration point {:?} is not sampled",
                    idx
                )));
            }
            if self.corner_cut && inc && ellipse_radius(&idx, &self.shape) > 1.0 {
                return Err(Error::Consistency(format!(
                    "point {:?} lies outside the corner-cut ellipse",
                    idx
                )));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn included(&self) -> &[bool] {
        &self.included
    }

    pub fn target_r(&self) -> f64 {
        self.target_r
    }

    pub fn center_extent(&self) -> &[usize] {
        &self.center_extent
    }

    pub fn corner_cut(&self) -> bool {
        self.corner_cut
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Calibrated base exclusion radius (0 for non-Poisson masks).
    pub fn radius0(&self) -> f64 {
        self.radius0
    }

    pub fn count(&self) -> usize {
        self.included.iter().filter(|&&b| b).count()
    }

    pub fn is_center(&self, idx: &[usize]) -> bool {
        in_center(idx, &self.shape, &self.center_extent)
    }

    /// Local exclusion radius at grid point `idx` for this mask's `r0`.
    pub fn exclusion_radius(&self, idx: &[usize]) -> f64 {
        local_radius(&self.shape, self.radius0, idx)
    }

    /// Expands the mask to a full image grid. The mask axes must match the
    /// trailing axes of `image_shape`; leading axes are broadcast.
    pub fn expand_to(&self, image_shape: &[usize]) -> Result<Vec<bool>> {
        let nd = self.shape.len();
        if image_shape.len() < nd || image_shape[image_shape.len() - nd..] != self.shape[..] {
            return Err(Error::Shape(format!(
                "mask shape {:?} does not match trailing axes of image shape {:?}",
                self.shape, image_shape
            )));
        }
        let lead: usize = image_shape[..image_shape.len() - nd].iter().product();
        let mut out = Vec::with_capacity(lead * self.included.len());
        for _ in 0..lead {
            out.extend_from_slice(&self.included);
        }
        Ok(out)
    }

    /// Plain-text PBM (`P1`) rendering; the last axis runs along a row.
    pub fn to_pbm(&self) -> String {
        let w = *self.shape.last().unwrap();
        let h = self.included.len() / w;
        let mut s = format!("P1\n{w} {h}\n");
        for row in self.included.chunks(w) {
            let line: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Net acceleration: full rectangular grid size over included count.
pub fn acceleration_factor(mask: &SamplingMask) -> f64 {
    mask.included.len() as f64 / mask.count() as f64
}

/// Variable-density Poisson-disc mask with a fully sampled central rectangle
/// and optional elliptical corner cut. Deterministic for a fixed seed.
pub fn generate_vdpd_mask(
    shape: &[usize],
    target_r: f64,
    center_extent: &[usize],
    corner_cut: bool,
    seed: u64,
) -> Result<SamplingMask> {
    check_grid(shape, center_extent)?;
    if !(target_r >= 1.0) || !target_r.is_finite() {
        return Err(Error::Config(format!("target acceleration must be at least 1, got {target_r}")));
    }
    let total: usize = shape.iter().product();
    let mut center = vec![false; total];
    let mut eligible = Vec::new();
    for flat in 0..total {
        let idx = unflatten(flat, shape);
        let inside = !corner_cut || ellipse_radius(&idx, shape) <= 1.0;
        if in_center(&idx, shape, center_extent) {
            if !inside {
                return Err(Error::Config(format!(
                    "calibration region {:?} extends past the corner-cut ellipse",
                    center_extent
                )));
            }
            center[flat] = true;
        } else if inside {
            eligible.push(flat);
        }
    }
    let n_center = center.iter().filter(|&&b| b).count();
    let r_of = |count: usize| total as f64 / count.max(1) as f64;
    if n_center > 0 && r_of(n_center) < target_r * (1.0 - ACCEL_TOLERANCE) {
        return Err(Error::Config(format!(
            "calibration region alone gives R = {:.3}, below target {target_r}",
            r_of(n_center)
        )));
    }
    if r_of(n_center + eligible.len()) > target_r * (1.0 + ACCEL_TOLERANCE) {
        return Err(Error::Config(format!(
            "at most R = {:.3} is reachable with corner cutting, target {target_r}",
            r_of(n_center + eligible.len())
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);

    let goal = total as f64 / target_r;
    let throw = |r0: f64| -> Vec<bool> {
        let mut inc = center.clone();
        dart_throw(shape, r0, &eligible, &mut inc);
        inc
    };
    let err_of = |inc: &[bool]| {
        let c = inc.iter().filter(|&&b| b).count();
        (r_of(c) - target_r).abs() / target_r
    };

    let (mut lo, mut hi) = (0.0_f64, *shape.iter().max().unwrap() as f64);
    let mut best = (throw(lo), lo);
    let mut best_err = err_of(&best.0);
    for _ in 0..MAX_BISECTION_STEPS {
        if best_err < 1e-3 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let inc = throw(mid);
        let count = inc.iter().filter(|&&b| b).count() as f64;
        let e = err_of(&inc);
        if e < best_err {
            best_err = e;
            best = (inc, mid);
        }
        if count > goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best_err > ACCEL_TOLERANCE {
        return Err(Error::Calibration(format!(
            "closest achievable R misses target {target_r} by {:.1}%",
            100.0 * best_err
        )));
    }
    let (included, radius0) = best;
    SamplingMask::from_parts(
        shape.to_vec(),
        included,
        target_r,
        center_extent.to_vec(),
        corner_cut,
        seed,
        radius0,
    )
}

/// Uniform-stride mask plus a fully sampled center. For 1-D grids
/// `stride_z` must still be at least 1 but is otherwise unused.
pub fn generate_regular_mask(
    shape: &[usize],
    stride_y: usize,
    stride_z: usize,
    center_extent: &[usize],
) -> Result<SamplingMask> {
    check_grid(shape, center_extent)?;
    if stride_y == 0 || stride_z == 0 {
        return Err(Error::Config("strides must be at least 1".into()));
    }
    let total: usize = shape.iter().product();
    let strides = [stride_y, stride_z];
    let included: Vec<bool> = (0..total)
        .map(|flat| {
            let idx = unflatten(flat, shape);
            in_center(&idx, shape, center_extent)
                || idx.iter().zip(strides).all(|(&i, s)| i % s == 0)
        })
        .collect();
    let count = included.iter().filter(|&&b| b).count();
    SamplingMask::from_parts(
        shape.to_vec(),
        included,
        total as f64 / count as f64,
        center_extent.to_vec(),
        false,
        0,
        0.0,
    )
}

/// Exclusion radius `r0 * (1 + a * |k| / k_max)` where `|k|` is the grid
/// distance from the k-space center and `k_max` the half-diagonal.
pub fn local_radius(shape: &[usize], r0: f64, idx: &[usize]) -> f64 {
    let mut k2 = 0.0;
    let mut kmax2 = 0.0;
    for (&i, &n) in idx.iter().zip(shape) {
        let c = (n / 2) as f64;
        k2 += (i as f64 - c).powi(2);
        kmax2 += c.max(0.5).powi(2);
    }
    r0 * (1.0 + VDPD_DENSITY_SLOPE * (k2 / kmax2).sqrt())
}

/// Visits `candidates` in order, accepting each that keeps every pair of
/// accepted points at least `max(r(p), r(q))` apart.
fn dart_throw(shape: &[usize], r0: f64, candidates: &[usize], inc: &mut [bool]) {
    let total = inc.len();
    let radius: Vec<f64> = (0..total)
        .map(|f| local_radius(shape, r0, &unflatten(f, shape)))
        .collect();
    let r_max = radius.iter().cloned().fold(0.0, f64::max);
    let reach = r_max.ceil() as isize;
    let window_area = (2 * reach + 1).pow(shape.len() as u32) as usize;
    let coords: Vec<[isize; 2]> = (0..total)
        .map(|f| {
            let idx = unflatten(f, shape);
            [idx[0] as isize, idx.get(1).map_or(0, |&v| v as isize)]
        })
        .collect();
    let (h, w) = (shape[0] as isize, shape.get(1).map_or(1, |&v| v as isize));

    // Calibration points sit in `inc` but are exempt from the disc
    // constraint, so accepted disc points are tracked separately.
    let mut disc = vec![false; total];
    let mut accepted: Vec<usize> = Vec::new();
    let conflicts = |q: usize, p: usize| {
        let dy = (coords[p][0] - coords[q][0]) as f64;
        let dz = (coords[p][1] - coords[q][1]) as f64;
        let r = radius[p].max(radius[q]);
        dy * dy + dz * dz < r * r
    };
    for &q in candidates {
        let clash = if accepted.len() <= window_area {
            accepted.iter().any(|&p| conflicts(q, p))
        } else {
            let [qy, qz] = coords[q];
            let zr = if shape.len() > 1 { reach } else { 0 };
            let mut hit = false;
            'scan: for y in (qy - reach).max(0)..=(qy + reach).min(h - 1) {
                for z in (qz - zr).max(0)..=(qz + zr).min(w - 1) {
                    let p = (y * w + z) as usize;
                    if disc[p] && conflicts(q, p) {
                        hit = true;
                        break 'scan;
                    }
                }
            }
            hit
        };
        if !clash {
            inc[q] = true;
            disc[q] = true;
            accepted.push(q);
        }
    }
}

fn check_grid(shape: &[usize], center_extent: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 2 || shape.contains(&0) {
        return Err(Error::Shape(format!(
            "mask grids are 1-D or 2-D with nonzero extents, got {:?}",
            shape
        )));
    }
    if center_extent.len() != shape.len() {
        return Err(Error::Shape(format!(
            "center extent {:?} does not match grid {:?}",
            center_extent, shape
        )));
    }
    if center_extent.iter().zip(shape).any(|(c, n)| c > n) {
        return Err(Error::Config(format!(
            "center extent {:?} exceeds grid {:?}",
            center_extent, shape
        )));
    }
    Ok(())
}

pub(crate) fn unflatten(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for ax in (0..shape.len()).rev() {
        idx[ax] = flat % shape[ax];
        flat /= shape[ax];
    }
    idx
}

pub(crate) fn in_center(idx: &[usize], shape: &[usize], extent: &[usize]) -> bool {
    if extent.contains(&0) {
        return false;
    }
    idx.iter().zip(shape).zip(extent).all(|((&i, &n), &e)| {
        let start = n / 2 - e / 2;
        i >= start && i < start + e
    })
}

/// Normalized elliptical radius; 1 on the inscribed ellipse.
fn ellipse_radius(idx: &[usize], shape: &[usize]) -> f64 {
    idx.iter()
        .zip(shape)
        .map(|(&i, &n)| {
            let half = n as f64 / 2.0;
            ((i as f64 - (n / 2) as f64) / half).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// All-pairs check of the disc constraint among non-center samples,
    /// with the radius law written out independently.
    fn disc_violations(mask: &SamplingMask) -> usize {
        let (h, w) = (mask.shape()[0], mask.shape()[1]);
        let (cy, cz) = ((h / 2) as f64, (w / 2) as f64);
        let kmax = (cy * cy + cz * cz).sqrt();
        let r = |y: usize, z: usize| {
            let k = ((y as f64 - cy).powi(2) + (z as f64 - cz).powi(2)).sqrt();
            mask.radius0() * (1.0 + 2.0 * k / kmax)
        };
        let pts: Vec<(usize, usize)> = (0..h * w)
            .filter(|&f| mask.included()[f])
            .map(|f| (f / w, f % w))
            .filter(|&(y, z)| !mask.is_center(&[y, z]))
            .collect();
        let mut bad = 0;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let (a, b) = (pts[i], pts[j]);
                let d = ((a.0 as f64 - b.0 as f64).powi(2) + (a.1 as f64 - b.1 as f64).powi(2)).sqrt();
                if d < r(a.0, a.1).max(r(b.0, b.1)) - 1e-9 {
                    bad += 1;
                }
            }
        }
        bad
    }

    #[test]
    fn ten_fold_mask_on_64() {
        let m = generate_vdpd_mask(&[64, 64], 10.0, &[12, 12], false, 1).unwrap();
        let count = m.count() as f64;
        assert!((count - 409.6).abs() <= 0.05 * 409.6, "count {count}");
        let r = acceleration_factor(&m);
        assert!((9.5..=10.5).contains(&r), "R = {r}");
        for y in 26..38 {
            for z in 26..38 {
                assert!(m.included()[y * 64 + z]);
            }
        }
        assert!(m.radius0() > 0.0);
    }

    #[test]
    fn degenerate_full_center() {
        let m = generate_vdpd_mask(&[16, 16], 1.0001, &[16, 16], false, 3).unwrap();
        assert_eq!(m.count(), 256);
        assert_eq!(acceleration_factor(&m), 1.0);
        // R = 1 is reachable only by sampling everything
        let m = generate_vdpd_mask(&[16, 16], 1.0, &[4, 4], false, 3).unwrap();
        assert_eq!(m.count(), 256);
    }

    #[test]
    fn poisson_disc_property_brute_force() {
        let m = generate_vdpd_mask(&[64, 64], 6.0, &[10, 10], false, 9).unwrap();
        assert_eq!(disc_violations(&m), 0);
        let m = generate_vdpd_mask(&[48, 32], 4.0, &[8, 6], true, 2).unwrap();
        assert_eq!(disc_violations(&m), 0);
    }

    #[test]
    fn corner_cut_excludes_corners() {
        let m = generate_vdpd_mask(&[64, 64], 4.0, &[12, 12], true, 4).unwrap();
        for f in 0..64 * 64 {
            let (y, z) = ((f / 64) as f64 - 32.0, (f % 64) as f64 - 32.0);
            if (y * y + z * z).sqrt() > 32.0 {
                assert!(!m.included()[f]);
            }
        }
        let r = acceleration_factor(&m);
        assert!((r - 4.0).abs() <= 0.2, "R = {r}");
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_vdpd_mask(&[32, 32], 5.0, &[6, 6], true, 77).unwrap();
        let b = generate_vdpd_mask(&[32, 32], 5.0, &[6, 6], true, 77).unwrap();
        assert_eq!(a, b);
        let c = generate_vdpd_mask(&[32, 32], 5.0, &[6, 6], true, 78).unwrap();
        assert_ne!(a.included(), c.included());
    }

    #[test]
    fn larger_target_gives_fewer_points() {
        let mut last = usize::MAX;
        for r in [2.0, 3.0, 4.0, 6.0, 8.0, 10.0] {
            let m = generate_vdpd_mask(&[64, 64], r, &[8, 8], false, 5).unwrap();
            assert!(m.count() <= last);
            last = m.count();
        }
    }

    #[test]
    fn one_dimensional_mask() {
        let m = generate_vdpd_mask(&[128], 4.0, &[8], false, 1).unwrap();
        let r = acceleration_factor(&m);
        assert!((r - 4.0).abs() <= 0.2, "R = {r}");
        assert_eq!(m.expand_to(&[3, 128]).unwrap().len(), 384);
        assert!(m.expand_to(&[128, 3]).is_err());
    }

    #[test]
    fn infeasible_targets() {
        assert!(matches!(
            generate_vdpd_mask(&[32, 32], 10.0, &[16, 16], false, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            generate_vdpd_mask(&[32, 32], 1.1, &[4, 4], true, 0),
            Err(Error::Config(_))
        ));
        assert!(generate_vdpd_mask(&[32, 32], 0.5, &[4, 4], false, 0).is_err());
    }

    #[test]
    fn regular_masks() {
        let m = generate_regular_mask(&[8, 8], 2, 1, &[0, 0]).unwrap();
        assert_eq!(m.count(), 32);
        assert_eq!(acceleration_factor(&m), 2.0);
        let m = generate_regular_mask(&[8, 8], 1, 1, &[0, 0]).unwrap();
        assert_eq!(m.count(), 64);
        assert_eq!(acceleration_factor(&m), 1.0);

        let m = generate_regular_mask(&[16, 16], 2, 2, &[4, 4]).unwrap();
        let mut expected = 0;
        for y in 0..16 {
            for z in 0..16 {
                let center = (6..10).contains(&y) && (6..10).contains(&z);
                if center || (y % 2 == 0 && z % 2 == 0) {
                    expected += 1;
                }
            }
        }
        assert_eq!(m.count(), expected);
        assert_eq!(acceleration_factor(&m), 256.0 / expected as f64);

        assert!(matches!(
            generate_regular_mask(&[8, 8], 0, 1, &[0, 0]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn acceleration_of_half_mask() {
        let inc: Vec<bool> = (0..64).map(|i| i % 2 == 0).collect();
        let m = SamplingMask::from_parts(vec![8, 8], inc, 2.0, vec![0, 0], false, 0, 0.0).unwrap();
        assert_eq!(acceleration_factor(&m), 2.0);
        assert_eq!(acceleration_factor(&SamplingMask::full(&[4, 4]).unwrap()), 1.0);
    }

    #[test]
    fn pbm_dump() {
        let m = generate_regular_mask(&[2, 3], 2, 1, &[0, 0]).unwrap();
        assert_eq!(m.to_pbm(), "P1\n3 2\n1 1 1\n0 0 0\n");
    }
}
