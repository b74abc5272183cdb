//! The unrolled reconstruction network.
//!
//! ```text
//! x_0 = A* y
//! x_n = x_{n-1} - lambda_n A*(y - A x_{n-1}) - R_n(x_{n-1}, ..., x_{n-k}),   k = min(n, G + 1)
//! ```
//!
//! `R_n` is a stack of same-padded convolutions with leaky-ReLU between layers
//! (the last layer is linear). Its input holds the real and imaginary planes of
//! the `k` newest iterates, newest first: `[re x_{n-1}, im x_{n-1}, re x_{n-2}, ...]`.
//! Every unit has its own weights.

pub(crate) mod conv;

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::forward::{CoilMaps, MultiCoilKSpace, SenseOperator};
use crate::numerics::ComplexVolume;
use conv::ConvShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterGeometry {
    /// k x k filters in the plane of the last two axes.
    Conv2d,
    /// k x k filters in the yz plane for three units, then the xy plane for one.
    Alternating2d,
    /// k x k x k filters.
    Conv3d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DLSpeedConfig {
    pub n_iters: usize,
    pub layers_per_unit: usize,
    pub filters_per_layer: usize,
    pub skip_connections: usize,
    pub filter_geometry: FilterGeometry,
    pub lrelu_slope: f64,
    pub kernel_extent: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper2d,
    PaperAlt2d,
    Paper3d,
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "paper_2d" => Self::Paper2d,
            "paper_alt2d" => Self::PaperAlt2d,
            "paper_3d" => Self::Paper3d,
            "desk" => Self::Desk,
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {s:?} (expected paper_2d, paper_alt2d, paper_3d or desk)"
                )))
            }
        })
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Paper2d => "paper_2d",
            Self::PaperAlt2d => "paper_alt2d",
            Self::Paper3d => "paper_3d",
            Self::Desk => "desk",
        })
    }
}

pub fn preset_config(preset: Preset) -> DLSpeedConfig {
    let (n_iters, layers, filters, g, geometry) = match preset {
        Preset::Paper2d => (28, 9, 96, 20, FilterGeometry::Conv2d),
        Preset::PaperAlt2d => (10, 9, 32, 10, FilterGeometry::Alternating2d),
        Preset::Paper3d => (10, 9, 32, 10, FilterGeometry::Conv3d),
        Preset::Desk => (6, 3, 16, 4, FilterGeometry::Conv2d),
    };
    DLSpeedConfig {
        n_iters,
        layers_per_unit: layers,
        filters_per_layer: filters,
        skip_connections: g,
        filter_geometry: geometry,
        lrelu_slope: 0.1,
        kernel_extent: 3,
    }
}

impl DLSpeedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 || self.layers_per_unit == 0 || self.filters_per_layer == 0 {
            return Err(Error::Config(
                "n_iters, layers_per_unit and filters_per_layer must all be >= 1".into(),
            ));
        }
        if self.kernel_extent.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel_extent must be odd for same padding, got {}",
                self.kernel_extent
            )));
        }
        if !self.lrelu_slope.is_finite() {
            return Err(Error::Config("lrelu_slope must be finite".into()));
        }
        Ok(())
    }

    /// Number of past iterates consumed by unit `n` (1-based).
    pub fn history(&self, n: usize) -> usize {
        n.min(self.skip_connections + 1)
    }

    /// Stored kernel extents (without channel axes) of unit `n`.
    pub fn kernel_shape(&self) -> Vec<usize> {
        let k = self.kernel_extent;
        match self.filter_geometry {
            FilterGeometry::Conv2d | FilterGeometry::Alternating2d => vec![k, k],
            FilterGeometry::Conv3d => vec![k, k, k],
        }
    }

    /// Kernel extents over `[D, H, W]` used by unit `n` on an image of `ndim` axes.
    fn spatial_extent(&self, n: usize, ndim: usize) -> [usize; 3] {
        let k = self.kernel_extent;
        match self.filter_geometry {
            FilterGeometry::Conv3d => [k, k, k],
            FilterGeometry::Conv2d => [1, k, k],
            FilterGeometry::Alternating2d if ndim == 3 && (n - 1) % 4 == 3 => [k, k, 1],
            FilterGeometry::Alternating2d => [1, k, k],
        }
    }

    fn layer_channels(&self, n: usize, l: usize) -> (usize, usize) {
        let cin = if l == 0 { 2 * self.history(n) } else { self.filters_per_layer };
        let cout = if l + 1 == self.layers_per_unit { 2 } else { self.filters_per_layer };
        (cin, cout)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[out][in][spatial...]`, row-major.
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

/// All learnable parameters. The same layout doubles as a gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct DLSpeedWeights {
    pub lambda: Vec<f64>,
    /// `units[n - 1][l]`.
    pub units: Vec<Vec<ConvLayer>>,
}

/// Name and length of one contiguous parameter block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Serialize, Deserialize)]
struct WeightsManifest {
    config: DLSpeedConfig,
    blocks: Vec<BlockInfo>,
}

impl DLSpeedWeights {
    pub fn zeros(cfg: &DLSpeedConfig) -> Result<Self> {
        cfg.validate()?;
        let taps: usize = cfg.kernel_shape().iter().product();
        let units = (1..=cfg.n_iters)
            .map(|n| {
                (0..cfg.layers_per_unit)
                    .map(|l| {
                        let (in_ch, out_ch) = cfg.layer_channels(n, l);
                        ConvLayer {
                            in_ch,
                            out_ch,
                            kernel: vec![0.0; out_ch * in_ch * taps],
                            bias: vec![0.0; out_ch],
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            lambda: vec![0.0; cfg.n_iters],
            units,
        })
    }

    /// Checks that every block has the shape `cfg` implies and is finite.
    pub fn validate(&self, cfg: &DLSpeedConfig) -> Result<()> {
        let expected = Self::zeros(cfg)?;
        if self.block_infos() != expected.block_infos() {
            return Err(Error::Config("weights do not match the network configuration".into()));
        }
        for (info, block) in self.block_infos().iter().zip(self.blocks()) {
            if block.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("non-finite parameter in block {}", info.name)));
            }
        }
        Ok(())
    }

    pub fn block_infos(&self) -> Vec<BlockInfo> {
        let mut out = vec![BlockInfo {
            name: "lambda".into(),
            len: self.lambda.len(),
        }];
        for (n, unit) in self.units.iter().enumerate() {
            for (l, layer) in unit.iter().enumerate() {
                out.push(BlockInfo {
                    name: format!("unit{}.layer{}.kernel", n + 1, l + 1),
                    len: layer.kernel.len(),
                });
                out.push(BlockInfo {
                    name: format!("unit{}.layer{}.bias", n + 1, l + 1),
                    len: layer.bias.len(),
                });
            }
        }
        out
    }

    /// Parameter blocks in canonical order (matches [`Self::block_infos`]).
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.lambda];
        for layer in self.units.iter().flatten() {
            out.push(&layer.kernel);
            out.push(&layer.bias);
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.lambda];
        for layer in self.units.iter_mut().flatten() {
            out.push(&mut layer.kernel);
            out.push(&mut layer.bias);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Consistency(format!(
                "{} values for {} parameters",
                flat.len(),
                self.n_params()
            )));
        }
        let mut rest = flat;
        for block in self.blocks_mut() {
            let (head, tail) = rest.split_at(block.len());
            block.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Serializes as a WGHT container. Values are stored as f32.
    pub fn to_container(&self, cfg: &DLSpeedConfig) -> Result<Vec<u8>> {
        self.validate(cfg)?;
        let manifest = serde_json::to_vec(&WeightsManifest {
            config: cfg.clone(),
            blocks: self.block_infos(),
        })?;
        container::encode_weights_raw(&manifest, &self.flatten())
    }

    pub fn from_container(bytes: &[u8]) -> Result<(DLSpeedConfig, Self)> {
        let (manifest, params) = container::decode_weights_raw(bytes)?;
        let manifest: WeightsManifest = serde_json::from_slice(&manifest)
            .map_err(|e| Error::Format(format!("bad weight manifest: {e}")))?;
        let mut w = Self::zeros(&manifest.config)?;
        if w.block_infos() != manifest.blocks {
            return Err(Error::Format("weight manifest disagrees with its config".into()));
        }
        w.assign_flat(&params)
            .map_err(|e| Error::Format(format!("weight payload: {e}")))?;
        w.validate(&manifest.config)?;
        Ok((manifest.config, w))
    }
}

/// Per-unit intermediates kept for reverse-mode differentiation.
#[derive(Debug, Clone)]
pub struct UnitTrace {
    /// `A*(y - A x_{n-1})`.
    pub residual: ComplexVolume,
    /// Stacked real/imag channels fed to the first layer.
    pub input: Vec<f64>,
    /// Pre-activation output of every layer.
    pub pre_activations: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct UnrollTrace {
    /// `x_0 ..= x_N`.
    pub iterates: Vec<ComplexVolume>,
    pub units: Vec<UnitTrace>,
}

/// Views an image as `[D, H, W]`.
pub(crate) fn dims3(shape: &[usize]) -> [usize; 3] {
    match *shape {
        [w] => [1, 1, w],
        [h, w] => [1, h, w],
        [d, h, w] => [d, h, w],
        _ => unreachable!("volumes have 1 to 3 axes"),
    }
}

pub(crate) fn lrelu(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

/// `x_prev - lambda * A*(y - A x_prev)`.
pub fn dc_unit(
    x_prev: &ComplexVolume,
    y: &MultiCoilKSpace,
    maps: &CoilMaps,
    lambda: f64,
) -> Result<ComplexVolume> {
    let op = SenseOperator::new(maps, y.mask())?;
    let r = op.residual_gradient(x_prev, y)?;
    x_prev.zip_with(&r, |a, b| a - b * lambda)
}

fn stack_channels(past: &[&ComplexVolume]) -> Vec<f64> {
    let p = past[0].len();
    let mut out = Vec::with_capacity(2 * p * past.len());
    for x in past {
        out.extend(x.data().iter().map(|v| v.re));
        out.extend(x.data().iter().map(|v| v.im));
    }
    out
}

pub(crate) fn layer_shape(cfg: &DLSpeedConfig, n: usize, layer: &ConvLayer, image: &[usize]) -> ConvShape {
    ConvShape {
        cin: layer.in_ch,
        cout: layer.out_ch,
        dims: dims3(image),
        ext: cfg.spatial_extent(n, image.len()),
    }
}

/// Runs unit `n`'s convolution stack; returns the complex output plus the
/// stacked input and pre-activations.
fn regularizer_inner(
    past: &[&ComplexVolume],
    unit: &[ConvLayer],
    n: usize,
    cfg: &DLSpeedConfig,
) -> Result<(ComplexVolume, Vec<f64>, Vec<Vec<f64>>)> {
    let shape = past
        .first()
        .ok_or_else(|| Error::Config("regularizer needs at least one past iterate".into()))?
        .shape()
        .to_vec();
    for x in past {
        if x.shape() != shape.as_slice() {
            return Err(Error::Shape("past iterates differ in shape".into()));
        }
    }
    let first = unit
        .first()
        .ok_or_else(|| Error::Config("regularizer unit has no layers".into()))?;
    if first.in_ch != 2 * past.len() {
        return Err(Error::Config(format!(
            "unit {n} expects {} input channels, got {} iterates",
            first.in_ch,
            past.len()
        )));
    }
    if unit.last().map(|l| l.out_ch) != Some(2) {
        return Err(Error::Config(format!("unit {n} must end in 2 output channels")));
    }
    let input = stack_channels(past);
    let mut pre = Vec::with_capacity(unit.len());
    let mut act = input.clone();
    for (l, layer) in unit.iter().enumerate() {
        let s = layer_shape(cfg, n, layer, &shape);
        if act.len() != s.cin * past[0].len() {
            return Err(Error::Config(format!("unit {n} layer {} channel mismatch", l + 1)));
        }
        let out = conv::forward(&act, &layer.kernel, &layer.bias, &s);
        act = if l + 1 < unit.len() {
            out.iter().map(|&v| lrelu(v, cfg.lrelu_slope)).collect()
        } else {
            out.clone()
        };
        pre.push(out);
    }
    if act.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure {
            iteration: n,
            detail: "non-finite regularizer output".into(),
        });
    }
    let p = past[0].len();
    let data = (0..p).map(|i| Complex64::new(act[i], act[p + i])).collect();
    Ok((ComplexVolume::new(shape, data)?, input, pre))
}

/// Convolutional regularizer of unit `n` (1-based) on `past`, newest first.
pub fn regularizer_unit(
    past: &[&ComplexVolume],
    weights: &DLSpeedWeights,
    n: usize,
    cfg: &DLSpeedConfig,
) -> Result<ComplexVolume> {
    let unit = weights
        .units
        .get(n.wrapping_sub(1))
        .ok_or_else(|| Error::Config(format!("no unit {n}")))?;
    Ok(regularizer_inner(past, unit, n, cfg)?.0)
}

pub fn dlspeed_forward(
    y: &MultiCoilKSpace,
    maps: &CoilMaps,
    weights: &DLSpeedWeights,
    cfg: &DLSpeedConfig,
    keep_trace: bool,
) -> Result<(ComplexVolume, Option<UnrollTrace>)> {
    weights.validate(cfg)?;
    let op = SenseOperator::new(maps, y.mask())?;
    let mut iterates = vec![op.adjoint(y.coils())?];
    let mut units = Vec::new();
    for n in 1..=cfg.n_iters {
        let x_prev = &iterates[n - 1];
        let residual = op.residual_gradient(x_prev, y)?;
        let lambda = weights.lambda[n - 1];
        let past: Vec<&ComplexVolume> = (1..=cfg.history(n)).map(|j| &iterates[n - j]).collect();
        let (reg, input, pre) = regularizer_inner(&past, &weights.units[n - 1], n, cfg)?;
        let next_data = x_prev
            .data()
            .iter()
            .zip(residual.data())
            .zip(reg.data())
            .map(|((x, r), g)| x - r * lambda - g)
            .collect::<Vec<_>>();
        if next_data.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::NumericFailure {
                iteration: n,
                detail: "non-finite value in unrolled iterate".into(),
            });
        }
        iterates.push(ComplexVolume::new(x_prev.shape().to_vec(), next_data)?);
        if keep_trace {
            units.push(UnitTrace {
                residual,
                input,
                pre_activations: pre,
            });
        }
    }
    let x_n = iterates.last().expect("at least x_0").clone();
    let trace = keep_trace.then_some(UnrollTrace { iterates, units });
    Ok((x_n, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::zero_filled_recon;
    use crate::phantoms::{generate_phantom, simulate_acquisition, simulate_coilmaps, PhantomSpec};
    use crate::sampling::{generate_regular_mask, generate_vdpd_mask, SamplingMask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> DLSpeedConfig {
        DLSpeedConfig {
            n_iters: 3,
            layers_per_unit: 2,
            filters_per_layer: 4,
            skip_connections: 1,
            filter_geometry: FilterGeometry::Conv2d,
            lrelu_slope: 0.1,
            kernel_extent: 3,
        }
    }

    fn case(shape: &[usize], full: bool, noise: f64, seed: u64) -> (ComplexVolume, MultiCoilKSpace, CoilMaps) {
        let x = generate_phantom(&PhantomSpec {
            shape: shape.to_vec(),
            n_ellipses: 5,
            intensity: (0.2, 1.0),
            phase_roughness: 0.5,
            noise_sigma: 0.0,
            seed,
        })
        .unwrap();
        let maps = simulate_coilmaps(shape, 3, seed).unwrap();
        let mask = if full {
            SamplingMask::full(shape).unwrap()
        } else if shape.len() == 3 {
            generate_regular_mask(&shape[1..], 2, 1, &[2, 2]).unwrap()
        } else {
            let c: Vec<usize> = shape.iter().map(|&s| s / 4).collect();
            generate_vdpd_mask(shape, 3.0, &c, false, seed).unwrap()
        };
        let y = simulate_acquisition(&x, &maps, &mask, noise, seed).unwrap();
        (x, y, maps)
    }

    fn randomize(w: &mut DLSpeedWeights, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in w.blocks_mut() {
            for v in b.iter_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }

    #[test]
    fn presets() {
        let p = preset_config(Preset::Paper2d);
        assert_eq!((p.n_iters, p.layers_per_unit, p.filters_per_layer, p.skip_connections), (28, 9, 96, 20));
        assert_eq!(preset_config(Preset::Paper3d).filters_per_layer, 32);
        assert_eq!(preset_config(Preset::Paper3d).filter_geometry, FilterGeometry::Conv3d);
        assert_eq!(preset_config(Preset::PaperAlt2d).skip_connections, 10);
        let d = preset_config(Preset::Desk);
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<DLSpeedConfig>(&json).unwrap(), d);
        for name in ["paper_2d", "paper_alt2d", "paper_3d", "desk"] {
            assert_eq!(name.parse::<Preset>().unwrap().to_string(), name);
        }
        assert!("huge".parse::<Preset>().is_err());
    }

    #[test]
    fn channel_layout_follows_history() {
        for g in 0..5 {
            let cfg = DLSpeedConfig { n_iters: 6, skip_connections: g, ..small() };
            let w = DLSpeedWeights::zeros(&cfg).unwrap();
            for n in 1..=6 {
                assert_eq!(w.units[n - 1][0].in_ch, 2 * n.min(g + 1));
                assert_eq!(w.units[n - 1].last().unwrap().out_ch, 2);
            }
        }
    }

    #[test]
    fn dc_unit_examples() {
        let (x, y, maps) = case(&[16, 16], true, 0.0, 1);
        // data-consistent input is a fixed point for any lambda
        let out = dc_unit(&x, &y, &maps, 0.7).unwrap();
        assert!(out.sub(&x).unwrap().max_abs() < 1e-12);
        // lambda 0 is the identity
        let z = x.scale(Complex64::new(0.3, 0.2));
        assert_eq!(dc_unit(&z, &y, &maps, 0.0).unwrap(), z);
        // lambda -1 on a full mask jumps to A* y
        let out = dc_unit(&z, &y, &maps, -1.0).unwrap();
        assert!(out.sub(&x).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn regularizer_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = ComplexVolume::from_fn(&[9, 7], |_| Complex64::new(rng.random(), rng.random()));
        let cfg = DLSpeedConfig { n_iters: 1, layers_per_unit: 1, ..small() };
        let mut w = DLSpeedWeights::zeros(&cfg).unwrap();
        assert_eq!(regularizer_unit(&[&x], &w, 1, &cfg).unwrap(), ComplexVolume::zeros(&[9, 7]));

        // centre tap copies channel o to output o
        let k = &mut w.units[0][0].kernel;
        k[4] = 1.0;
        k[3 * 9 + 4] = 1.0;
        assert_eq!(regularizer_unit(&[&x], &w, 1, &cfg).unwrap(), x);

        assert!(matches!(
            regularizer_unit(&[&x, &x], &w, 1, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn shapes_preserved_for_all_geometries() {
        for geometry in [FilterGeometry::Conv2d, FilterGeometry::Alternating2d, FilterGeometry::Conv3d] {
            for shape in [vec![8, 6], vec![4, 6, 5]] {
                let cfg = DLSpeedConfig { n_iters: 5, skip_connections: 2, filter_geometry: geometry, ..small() };
                let mut w = DLSpeedWeights::zeros(&cfg).unwrap();
                randomize(&mut w, 4, 0.1);
                let (_, y, maps) = case(&shape, false, 0.01, 5);
                let (x_n, trace) = dlspeed_forward(&y, &maps, &w, &cfg, true).unwrap();
                assert_eq!(x_n.shape(), shape.as_slice());
                let trace = trace.unwrap();
                assert_eq!(trace.iterates.len(), 6);
                for x in &trace.iterates {
                    assert_eq!(x.shape(), shape.as_slice());
                }
            }
        }
    }

    #[test]
    fn alternating_switches_plane_on_every_fourth_unit() {
        let cfg = DLSpeedConfig { filter_geometry: FilterGeometry::Alternating2d, ..small() };
        let planes: Vec<_> = (1..=8).map(|n| cfg.spatial_extent(n, 3)).collect();
        assert_eq!(planes[0], [1, 3, 3]);
        assert_eq!(planes[2], [1, 3, 3]);
        assert_eq!(planes[3], [3, 3, 1]);
        assert_eq!(planes[7], [3, 3, 1]);
        assert!((1..=8).all(|n| cfg.spatial_extent(n, 2) == [1, 3, 3]));
    }

    #[test]
    fn null_network_is_identity() {
        let (_, y, maps) = case(&[16, 16], false, 0.01, 6);
        let cfg = small();
        let w = DLSpeedWeights::zeros(&cfg).unwrap();
        let (x_n, _) = dlspeed_forward(&y, &maps, &w, &cfg, false).unwrap();
        let x0 = zero_filled_recon(&y, &maps, y.mask()).unwrap();
        assert_eq!(x_n, x0);
    }

    #[test]
    fn one_dc_step_recovers_truth_on_full_mask() {
        let (x, y, maps) = case(&[16, 16], true, 0.0, 7);
        let cfg = DLSpeedConfig { n_iters: 1, ..small() };
        let mut w = DLSpeedWeights::zeros(&cfg).unwrap();
        w.lambda[0] = -1.0;
        let (x_n, _) = dlspeed_forward(&y, &maps, &w, &cfg, false).unwrap();
        assert!(x_n.sub(&x).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn nan_names_iteration() {
        let (_, y, maps) = case(&[16, 16], false, 0.01, 8);
        let cfg = small();
        let mut w = DLSpeedWeights::zeros(&cfg).unwrap();
        w.units[1][0].bias.fill(f64::MAX);
        w.units[1][1].kernel.fill(1.0);
        match dlspeed_forward(&y, &maps, &w, &cfg, false) {
            Err(Error::NumericFailure { iteration, .. }) => assert_eq!(iteration, 2),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_and_checkpoint_round_trip() {
        let (_, y, maps) = case(&[16, 16], false, 0.01, 9);
        let cfg = small();
        let mut w = DLSpeedWeights::zeros(&cfg).unwrap();
        randomize(&mut w, 10, 0.2);
        for b in w.blocks_mut() {
            for v in b.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        let bytes = w.to_container(&cfg).unwrap();
        let (cfg2, w2) = DLSpeedWeights::from_container(&bytes).unwrap();
        assert_eq!((cfg2.clone(), w2.clone()), (cfg.clone(), w.clone()));
        assert_eq!(w2.to_container(&cfg2).unwrap(), bytes);
        let a = dlspeed_forward(&y, &maps, &w, &cfg, false).unwrap().0;
        let b = dlspeed_forward(&y, &maps, &w2, &cfg2, false).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_mismatched_weights() {
        let cfg = small();
        let w = DLSpeedWeights::zeros(&DLSpeedConfig { filters_per_layer: 5, ..cfg.clone() }).unwrap();
        let (_, y, maps) = case(&[16, 16], false, 0.01, 11);
        assert!(matches!(dlspeed_forward(&y, &maps, &w, &cfg, false), Err(Error::Config(_))));
        assert!(DLSpeedConfig { kernel_extent: 2, ..cfg }.validate().is_err());
    }
}
