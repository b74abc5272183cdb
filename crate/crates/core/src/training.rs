//! Reverse-mode differentiation through the unroll, Adam, and the training loop.
//!
//! Complex gradients use `g = dL/dRe + i dL/dIm`. With that convention the
//! backward rules for one unit are
//!
//! ```text
//! dL/dlambda_n  = -Re <g_n, A*(y - A x_{n-1})>
//! g_{n-1}      += g_n + lambda_n A*A g_n
//! g_{n-j}      += conv-stack backprop of -g_n, channels (2j-2, 2j-1)
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::forward::{CoilMaps, MultiCoilKSpace, SenseOperator};
use crate::metrics::{nmse, ssim_c_loss_grad, SsimParams};
use crate::net::{conv, dlspeed_forward, layer_shape, lrelu, DLSpeedConfig, DLSpeedWeights, UnrollTrace};
use crate::numerics::ComplexVolume;
use crate::phantoms::SimCase;

/// One supervised example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub kspace: MultiCoilKSpace,
    pub maps: CoilMaps,
    pub target: ComplexVolume,
}

impl From<SimCase> for Sample {
    fn from(c: SimCase) -> Self {
        Self {
            kspace: c.kspace,
            maps: c.maps,
            target: c.target,
        }
    }
}

/// Contrast-weighted SSIM_C parameters with `L = max |target|`.
pub fn loss_params(target: &ComplexVolume) -> SsimParams {
    SsimParams::contrast_weighted(target.max_abs().max(f64::MIN_POSITIVE))
}

/// Exact gradient of `ssim_c_loss(x_N, target)` with respect to every weight.
/// Returns the loss as well.
pub fn backward_pass(
    trace: &UnrollTrace,
    y: &MultiCoilKSpace,
    maps: &CoilMaps,
    target: &ComplexVolume,
    weights: &DLSpeedWeights,
    cfg: &DLSpeedConfig,
    p: &SsimParams,
) -> Result<(f64, DLSpeedWeights)> {
    weights.validate(cfg)?;
    let n_iters = cfg.n_iters;
    if trace.iterates.len() != n_iters + 1 || trace.units.len() != n_iters {
        return Err(Error::Consistency(format!(
            "trace holds {} iterates / {} units for a {n_iters}-unit network",
            trace.iterates.len(),
            trace.units.len()
        )));
    }
    let op = SenseOperator::new(maps, y.mask())?;
    let shape = trace.iterates[0].shape().to_vec();
    let voxels = trace.iterates[0].len();

    let (loss, g_last) = ssim_c_loss_grad(&trace.iterates[n_iters], target, p)?;
    let mut g: Vec<ComplexVolume> = (0..n_iters).map(|_| ComplexVolume::zeros(&shape)).collect();
    g.push(g_last);
    let mut grads = DLSpeedWeights::zeros(cfg)?;

    for n in (1..=n_iters).rev() {
        let unit = &trace.units[n - 1];
        let layers = &weights.units[n - 1];
        let gn = g[n].clone();
        if unit.input.len() != 2 * cfg.history(n) * voxels
            || unit.pre_activations.len() != layers.len()
        {
            return Err(Error::Consistency(format!("trace of unit {n} does not match the weights")));
        }

        // data-consistency branch
        let lambda = weights.lambda[n - 1];
        grads.lambda[n - 1] = -gn
            .data()
            .iter()
            .zip(unit.residual.data())
            .map(|(a, b)| (a * b.conj()).re)
            .sum::<f64>();
        let normal = op.normal(&gn)?;
        for ((acc, a), b) in g[n - 1].data_mut().iter_mut().zip(gn.data()).zip(normal.data()) {
            *acc += a + b * lambda;
        }

        // regularizer branch: x_n receives -R_n
        let mut d: Vec<f64> = gn.data().iter().map(|v| -v.re).chain(gn.data().iter().map(|v| -v.im)).collect();
        for l in (0..layers.len()).rev() {
            let layer = &layers[l];
            let s = layer_shape(cfg, n, layer, &shape);
            let input: Vec<f64> = if l == 0 {
                unit.input.clone()
            } else {
                unit.pre_activations[l - 1].iter().map(|&v| lrelu(v, cfg.lrelu_slope)).collect()
            };
            let cg = conv::backward(&input, &layer.kernel, &d, &s);
            grads.units[n - 1][l].kernel = cg.kernel;
            grads.units[n - 1][l].bias = cg.bias;
            d = if l == 0 {
                cg.input
            } else {
                cg.input
                    .iter()
                    .zip(&unit.pre_activations[l - 1])
                    .map(|(&gi, &pre)| if pre > 0.0 { gi } else { gi * cfg.lrelu_slope })
                    .collect()
            };
        }
        for j in 1..=cfg.history(n) {
            let re = &d[2 * (j - 1) * voxels..(2 * j - 1) * voxels];
            let im = &d[(2 * j - 1) * voxels..2 * j * voxels];
            for ((acc, &a), &b) in g[n - j].data_mut().iter_mut().zip(re).zip(im) {
                *acc += Complex64::new(a, b);
            }
        }
    }
    Ok((loss, grads))
}

/// Forward with trace, then [`backward_pass`].
pub fn loss_and_gradient(
    sample: &Sample,
    weights: &DLSpeedWeights,
    cfg: &DLSpeedConfig,
) -> Result<(f64, DLSpeedWeights)> {
    let (_, trace) = dlspeed_forward(&sample.kspace, &sample.maps, weights, cfg, true)?;
    let trace = trace.expect("trace requested");
    let p = loss_params(&sample.target);
    backward_pass(&trace, &sample.kspace, &sample.maps, &sample.target, weights, cfg, &p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new(weights: &DLSpeedWeights, cfg: AdamConfig) -> Self {
        let n = weights.n_params();
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            cfg,
        }
    }
}

/// One bias-corrected Adam update, in place. A non-finite gradient aborts
/// before anything is modified.
pub fn adam_step(weights: &mut DLSpeedWeights, grads: &DLSpeedWeights, state: &mut AdamState) -> Result<()> {
    let infos = weights.block_infos();
    if grads.block_infos() != infos || state.m.len() != weights.n_params() || state.v.len() != state.m.len() {
        return Err(Error::Consistency("gradient / optimizer layout does not match the weights".into()));
    }
    for (info, block) in infos.iter().zip(grads.blocks()) {
        if let Some(i) = block.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericFailure {
                iteration: state.step as usize + 1,
                detail: format!("non-finite gradient in block {} at offset {i}", info.name),
            });
        }
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.cfg;
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    let g = grads.flatten();
    let mut k = 0;
    for block in weights.blocks_mut() {
        for w in block.iter_mut() {
            state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g[k];
            state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g[k] * g[k];
            *w -= lr * (state.m[k] / c1) / ((state.v[k] / c2).sqrt() + eps);
            k += 1;
        }
    }
    Ok(())
}

/// Rounds every parameter to the nearest `f32`, the checkpoint precision.
pub fn quantize_f32(weights: &mut DLSpeedWeights) {
    for block in weights.blocks_mut() {
        for v in block.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// He-uniform kernels (`|w| <= sqrt(6 / fan_in)`), zero biases, `lambda = -0.5`.
pub fn init_weights(cfg: &DLSpeedConfig, seed: u64) -> Result<DLSpeedWeights> {
    let mut w = DLSpeedWeights::zeros(cfg)?;
    let taps: usize = cfg.kernel_shape().iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    w.lambda.fill(-0.5);
    for layer in w.units.iter_mut().flatten() {
        let bound = (6.0 / (layer.in_ch * taps) as f64).sqrt();
        for k in layer.kernel.iter_mut() {
            *k = rng.random_range(-bound..bound);
        }
    }
    quantize_f32(&mut w);
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Rescale the gradient when its global norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Directory receiving `best.mrvx`, `last.mrvx` and `train_log.jsonl`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            seed: 0,
            adam: AdamConfig::default(),
            clip_norm: None,
            checkpoint_dir: None,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_nmse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: DLSpeedWeights,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub last: DLSpeedWeights,
    pub log: Vec<EpochLog>,
}

pub const BEST_CHECKPOINT: &str = "best.mrvx";
pub const LAST_CHECKPOINT: &str = "last.mrvx";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Mean loss and mean nMSE of the network over `samples`.
pub fn evaluate(samples: &[Sample], weights: &DLSpeedWeights, cfg: &DLSpeedConfig) -> Result<(f64, f64)> {
    let (mut loss, mut err) = (0.0, 0.0);
    for s in samples {
        let (x, _) = dlspeed_forward(&s.kspace, &s.maps, weights, cfg, false)?;
        loss += crate::metrics::ssim_c_loss(&x, &s.target, &loss_params(&s.target))?;
        err += nmse(&x, &s.target)?;
    }
    let n = samples.len().max(1) as f64;
    Ok((loss / n, err / n))
}

/// Batch-size-1 Adam training with a seeded per-epoch shuffle.
///
/// `on_epoch` sees every log line as it is produced. The best checkpoint is
/// chosen by validation loss (training loss when `val` is empty).
pub fn train(
    train_set: &[Sample],
    val: &[Sample],
    cfg: &DLSpeedConfig,
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Precondition("training corpus is empty".into()));
    }
    let init = init_weights(cfg, tcfg.seed)?;
    let mut weights = init.clone();
    let mut state = AdamState::new(&weights, tcfg.adam);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5DEE_CE66_D1CE_5EED);

    let log_path = tcfg.checkpoint_dir.as_ref().map(|d| d.join(TRAIN_LOG));
    if let Some(dir) = &tcfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = log_path.as_ref().unwrap();
        fs::write(p, b"").map_err(|e| Error::io(p, e))?;
    }
    let save = |name: &str, w: &DLSpeedWeights| -> Result<()> {
        if let Some(dir) = &tcfg.checkpoint_dir {
            write_atomic(&dir.join(name), &w.to_container(cfg)?)?;
        }
        Ok(())
    };

    let mut best = (f64::INFINITY, 0usize, init.clone());
    let mut log = Vec::with_capacity(tcfg.epochs);
    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let step = loss_and_gradient(&train_set[i], &weights, cfg).and_then(|(loss, mut g)| {
                if !loss.is_finite() {
                    return Err(Error::NumericFailure {
                        iteration: state.step as usize + 1,
                        detail: "non-finite training loss".into(),
                    });
                }
                if let Some(c) = tcfg.clip_norm {
                    clip(&mut g, c);
                }
                let mut next = weights.clone();
                adam_step(&mut next, &g, &mut state)?;
                quantize_f32(&mut next);
                next.validate(cfg)?;
                Ok((loss, next))
            });
            match step {
                Ok((loss, next)) => {
                    total += loss;
                    weights = next;
                }
                Err(Error::NumericFailure { iteration, detail }) => {
                    save(LAST_CHECKPOINT, &weights)?;
                    return Err(Error::NumericFailure {
                        iteration,
                        detail: format!("epoch {epoch}, case {i}: {detail}; last good weights kept"),
                    });
                }
                Err(Error::Config(detail)) => {
                    save(LAST_CHECKPOINT, &weights)?;
                    return Err(Error::NumericFailure {
                        iteration: state.step as usize,
                        detail: format!("epoch {epoch}, case {i}: {detail}; last good weights kept"),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = total / train_set.len() as f64;
        let (val_loss, val_nmse) = if val.is_empty() {
            (train_loss, f64::NAN)
        } else {
            evaluate(val, &weights, cfg)?
        };
        let line = EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_nmse,
        };
        if val_loss < best.0 {
            best = (val_loss, epoch, weights.clone());
            save(BEST_CHECKPOINT, &weights)?;
        }
        save(LAST_CHECKPOINT, &weights)?;
        if let Some(p) = &log_path {
            let mut f = OpenOptions::new().append(true).open(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(p, e))?;
        }
        on_epoch(&line);
        log.push(line);
    }
    if tcfg.epochs == 0 {
        save(BEST_CHECKPOINT, &weights)?;
        save(LAST_CHECKPOINT, &weights)?;
    }
    Ok(TrainOutcome {
        best: best.2,
        best_epoch: best.1,
        last: weights,
        log,
    })
}

fn clip(g: &mut DLSpeedWeights, max_norm: f64) {
    let norm = g.blocks().iter().flat_map(|b| b.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for b in g.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }
}
