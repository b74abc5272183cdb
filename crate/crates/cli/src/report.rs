//! Reconstruction reports, aggregation, and PGM export.

use dlspeed::metrics::{nmse, ssim_c_loss, ssim_eval, SsimParams};
use dlspeed::sampling::{acceleration_factor, SamplingMask};
use dlspeed::{ComplexVolume, Error, Result};
use serde::{Deserialize, Serialize};

/// Window used for every reported SSIM value.
pub const SSIM_WINDOW: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub case_id: String,
    pub method: String,
    pub mask_seed: Option<u64>,
    pub achieved_r: Option<f64>,
    pub nmse: Option<f64>,
    pub ssim: Option<f64>,
    pub ssim_c: Option<f64>,
    pub wall_time_s: Option<f64>,
    pub config_hash: Option<String>,
}

impl ReconReport {
    pub fn new(case_id: &str, method: &str, mask: Option<&SamplingMask>) -> Self {
        Self {
            case_id: case_id.to_string(),
            method: method.to_string(),
            mask_seed: mask.map(|m| m.seed()),
            achieved_r: mask.map(acceleration_factor),
            nmse: None,
            ssim: None,
            ssim_c: None,
            wall_time_s: None,
            config_hash: None,
        }
    }

    pub fn score(&mut self, recon: &ComplexVolume, reference: &ComplexVolume) -> Result<()> {
        self.nmse = Some(nmse(recon, reference)?);
        self.ssim = Some(ssim_eval(recon, reference, SSIM_WINDOW)?);
        let p = SsimParams::contrast_weighted(reference.max_abs());
        self.ssim_c = Some(1.0 - ssim_c_loss(recon, reference, &p)?);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation of one method's reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub n: usize,
    pub nmse: Option<Stat>,
    pub ssim: Option<Stat>,
    pub ssim_c: Option<Stat>,
}

/// What `eval` writes in corpus and aggregate modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub reports: Vec<ReconReport>,
    pub aggregate: Vec<Aggregate>,
}

fn stat(values: &[f64]) -> Option<Stat> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(Stat { mean, std })
}

/// Groups reports by method, in order of first appearance.
pub fn aggregate(reports: &[ReconReport]) -> Vec<Aggregate> {
    let mut methods: Vec<&str> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let rs: Vec<&ReconReport> = reports.iter().filter(|r| r.method == m).collect();
            let pick = |f: fn(&ReconReport) -> Option<f64>| -> Vec<f64> { rs.iter().filter_map(|r| f(r)).collect() };
            Aggregate {
                method: m.to_string(),
                n: rs.len(),
                nmse: stat(&pick(|r| r.nmse)),
                ssim: stat(&pick(|r| r.ssim)),
                ssim_c: stat(&pick(|r| r.ssim_c)),
            }
        })
        .collect()
}

/// Reads either a single report or an [`EvalSummary`].
pub fn parse_reports(bytes: &[u8]) -> Result<Vec<ReconReport>> {
    if let Ok(s) = serde_json::from_slice::<EvalSummary>(bytes) {
        return Ok(s.reports);
    }
    serde_json::from_slice::<ReconReport>(bytes)
        .map(|r| vec![r])
        .map_err(|e| Error::Format(format!("not a report: {e}")))
}

/// 64-bit FNV-1a, used to fingerprint method configurations in reports.
pub fn fnv1a(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Binary PGM of `|x|` over the last two axes; 3-D volumes export one slice
/// along the first axis. Min-max normalized to 0..=255.
pub fn pgm(x: &ComplexVolume, slice: Option<usize>) -> Result<Vec<u8>> {
    let shape = x.shape();
    let (h, w) = match shape.len() {
        1 => (1, shape[0]),
        _ => (shape[shape.len() - 2], shape[shape.len() - 1]),
    };
    let plane = h * w;
    let s = match shape.len() {
        3 => slice.unwrap_or(shape[0] / 2),
        _ => slice.unwrap_or(0),
    };
    if s * plane >= x.len() {
        return Err(Error::Shape(format!("slice {s} out of range for shape {shape:?}")));
    }
    let mags: Vec<f64> = x.data()[s * plane..(s + 1) * plane].iter().map(|v| v.norm()).collect();
    let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mags.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mags.iter().map(|m| ((m - lo) / span * 255.0).round() as u8));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dlspeed::Complex64;

    fn report(method: &str, nmse: f64) -> ReconReport {
        ReconReport {
            nmse: Some(nmse),
            ..ReconReport::new("c", method, None)
        }
    }

    #[test]
    fn identical_reports_have_zero_spread() {
        let rs = vec![report("cs_tv", 2.5); 4];
        let a = aggregate(&rs);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].nmse, Some(Stat { mean: 2.5, std: 0.0 }));
        assert_eq!(a[0].ssim, None);
    }

    #[test]
    fn groups_by_method_with_sample_std() {
        let rs = vec![report("a", 1.0), report("b", 5.0), report("a", 3.0)];
        let a = aggregate(&rs);
        assert_eq!(a[0].method, "a");
        assert_eq!(a[0].n, 2);
        let s = a[0].nmse.as_ref().unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(a[1].nmse, Some(Stat { mean: 5.0, std: 0.0 }));
    }

    #[test]
    fn scoring_identical_volumes() {
        let x = ComplexVolume::from_fn(&[16, 16], |i| Complex64::new(i[0] as f64, i[1] as f64 * 0.5));
        let mut r = ReconReport::new("c", "zero_filled", None);
        r.score(&x, &x).unwrap();
        assert_eq!(r.nmse, Some(0.0));
        assert!((r.ssim.unwrap() - 1.0).abs() < 1e-12);
        assert!((r.ssim_c.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pgm_dimensions_and_range() {
        let x = ComplexVolume::from_fn(&[3, 5, 7], |i| Complex64::new((i[0] * 35 + i[1] * 7 + i[2]) as f64, 0.0));
        let bytes = pgm(&x, None).unwrap();
        let header = b"P5\n7 5\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let px = &bytes[header.len()..];
        assert_eq!(px.len(), 35);
        assert_eq!((px[0], px[34]), (0, 255));
        assert!(pgm(&x, Some(3)).is_err());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), "cbf29ce484222325");
        assert_eq!(fnv1a(b"a"), "af63dc4c8601ec8c");
    }
}
