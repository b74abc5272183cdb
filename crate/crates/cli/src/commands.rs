use std::fs;
use std::path::Path;
use std::time::Instant;

use dlspeed::baselines::{cs_tv_reconstruct, CsConfig, ThresholdMode};
use dlspeed::container::{self, read_file, write_atomic};
use dlspeed::forward::{zero_filled_recon, CoilMaps, MultiCoilKSpace};
use dlspeed::net::{dlspeed_forward, preset_config, DLSpeedConfig, DLSpeedWeights, Preset};
use dlspeed::phantoms::{generate_case, CorpusSpec};
use dlspeed::sampling::{acceleration_factor, generate_vdpd_mask};
use dlspeed::training::{self, Sample, TrainConfig};
use dlspeed::{ComplexVolume, Error};
use rayon::prelude::*;

use crate::corpus::{self, Manifest};
use crate::report::{self, EvalSummary, ReconReport};
use crate::{EvalArgs, MaskArgs, Method, ReconArgs, SimulateArgs, TrainArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::NumericFailure { .. } | Error::Divergence(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Worker pool of `jobs` threads, capped by `MRVX_THREADS`.
fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    let cap = std::env::var("MRVX_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&v| v > 0);
    let n = cap.map_or(jobs, |c| jobs.min(c)).max(1);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {n} worker threads: {e}")))
}

fn write_json<T: serde::Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    bytes.push(b'\n');
    match path {
        Some(p) => write_atomic(p, &bytes)?,
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}

pub fn mask(a: MaskArgs) -> Result<()> {
    let m = generate_vdpd_mask(&a.shape.0, a.accel, &a.center.0, a.corner_cut, a.seed)?;
    write_atomic(&a.out, &container::encode_mask(&m)?)?;
    if let Some(p) = &a.pbm {
        write_atomic(p, m.to_pbm().as_bytes())?;
    }
    println!("achieved R: {:.4}", acceleration_factor(&m));
    Ok(())
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let spec = CorpusSpec {
        shape: a.shape.0,
        n_coils: a.coils,
        noise_sigma: a.noise,
        accel: a.accel,
        center: a.center.0,
        corner_cut: a.corner_cut,
        estimate_maps: a.estimate_maps,
        ..CorpusSpec::default()
    };
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let indices: Vec<u64> = (a.start..a.start + a.cases as u64).collect();
    let entries = pool(a.jobs.jobs)?.install(|| {
        indices
            .par_iter()
            .map(|&i| {
                let case = generate_case(&spec, a.seed, i)?;
                corpus::write_case(&a.out_dir, &case)
            })
            .collect::<dlspeed::Result<Vec<_>>>()
    })?;
    corpus::write_manifest(
        &a.out_dir,
        &Manifest {
            seed: a.seed,
            spec,
            cases: entries,
        },
    )?;
    println!("wrote {} cases to {}", a.cases, a.out_dir.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let preset: Preset = a.preset.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let cfg = preset_config(preset);
    let m = corpus::read_manifest(&a.corpus)?;
    let n = m.cases.len();
    let n_val = a.val_cases.unwrap_or(if n >= 2 { (n / 10).max(1) } else { 0 });
    if n_val >= n {
        return Err(CliError::Usage(format!("{n_val} validation cases leave nothing to train on ({n} in corpus)")));
    }
    let load = |entries: &[corpus::CaseEntry]| -> dlspeed::Result<Vec<Sample>> {
        entries.iter().map(|e| corpus::read_case(&a.corpus, e).map(Sample::from)).collect()
    };
    let train_set = load(&m.cases[..n - n_val])?;
    let val = load(&m.cases[n - n_val..])?;
    let tcfg = TrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        adam: training::AdamConfig {
            lr: a.lr,
            ..Default::default()
        },
        clip_norm: a.clip_norm,
        checkpoint_dir: Some(a.out_checkpoint.clone()),
    };
    eprintln!(
        "training {preset} on {} cases ({} validation), {} epochs",
        train_set.len(),
        val.len(),
        a.epochs
    );
    let out = training::train(&train_set, &val, &cfg, &tcfg, |l| {
        eprintln!(
            "epoch {:>3}  train {:.6}  val {:.6}  val nMSE {:.4}%",
            l.epoch, l.train_loss, l.val_loss, l.val_nmse
        )
    })?;
    println!("best epoch {} -> {}", out.best_epoch, a.out_checkpoint.display());
    Ok(())
}

struct Reconstructor {
    method: Method,
    cs: CsConfig,
    net: Option<(DLSpeedConfig, DLSpeedWeights)>,
    hash: String,
}

impl Reconstructor {
    fn new(a: &ReconArgs) -> Result<Self> {
        let cs = CsConfig {
            n_iters: a.cs.cs_iters,
            threshold_mode: match a.cs.cs_threshold {
                Some(t) => ThresholdMode::Fixed(t),
                None => ThresholdMode::DataDriven {
                    quantile: a.cs.cs_quantile,
                },
            },
            ..CsConfig::default()
        };
        let (net, hash) = match a.method {
            Method::Dlspeed => {
                let p = a
                    .checkpoint
                    .as_ref()
                    .ok_or_else(|| CliError::Usage("--method dlspeed requires --checkpoint".into()))?;
                let bytes = read_file(p)?;
                (Some(DLSpeedWeights::from_container(&bytes)?), report::fnv1a(&bytes))
            }
            Method::Cs => (None, report::fnv1a(&serde_json::to_vec(&cs).map_err(Error::from)?)),
            Method::Zero => (None, report::fnv1a(b"zero_filled")),
        };
        Ok(Self {
            method: a.method,
            cs,
            net,
            hash,
        })
    }

    fn run(&self, y: &MultiCoilKSpace, maps: &CoilMaps) -> dlspeed::Result<ComplexVolume> {
        match self.method {
            Method::Zero => zero_filled_recon(y, maps, y.mask()),
            Method::Cs => cs_tv_reconstruct(y, maps, y.mask(), &self.cs),
            Method::Dlspeed => {
                let (cfg, w) = self.net.as_ref().expect("checked at construction");
                Ok(dlspeed_forward(y, maps, w, cfg, false)?.0)
            }
        }
    }

    /// Reconstructs and returns the image with a metric-free report.
    fn timed(&self, id: &str, y: &MultiCoilKSpace, maps: &CoilMaps) -> dlspeed::Result<(ComplexVolume, ReconReport)> {
        let t0 = Instant::now();
        let x = self.run(y, maps)?;
        let mut r = ReconReport::new(id, self.method.report_name(), Some(y.mask()));
        r.wall_time_s = Some(t0.elapsed().as_secs_f64());
        r.config_hash = Some(self.hash.clone());
        Ok((x, r))
    }
}

fn report_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.json"))
}

fn image_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.mrvx"))
}

pub fn recon(a: ReconArgs) -> Result<()> {
    let r = Reconstructor::new(&a)?;
    if let Some(dir) = &a.corpus {
        let out_dir = a.out_dir.as_ref().expect("clap enforces --out-dir");
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let m = corpus::read_manifest(dir)?;
        let entries = corpus::select(&m, a.skip, a.take);
        pool(a.jobs.jobs)?.install(|| {
            entries.par_iter().try_for_each(|e| -> dlspeed::Result<()> {
                let c = corpus::read_case(dir, e)?;
                let (x, rep) = r.timed(&e.id, &c.kspace, &c.maps)?;
                write_atomic(&image_path(out_dir, &e.id), &container::encode_image(&x)?)?;
                let mut bytes = serde_json::to_vec_pretty(&rep)?;
                bytes.push(b'\n');
                write_atomic(&report_path(out_dir, &e.id), &bytes)
            })
        })?;
        println!("reconstructed {} cases into {}", entries.len(), out_dir.display());
        return Ok(());
    }

    let mask = corpus::read_mask(a.mask.as_ref().expect("clap enforces --mask"))?;
    let y = corpus::read_kspace(a.kspace.as_ref().expect("clap enforces --kspace"), mask)?;
    let maps = corpus::read_maps(a.maps.as_ref().expect("clap enforces --maps"))?;
    let (x, rep) = r.timed("case", &y, &maps)?;
    write_atomic(a.out.as_ref().expect("clap enforces --out"), &container::encode_image(&x)?)?;
    if let Some(p) = &a.pgm {
        write_atomic(p, &report::pgm(&x, a.pgm_slice)?)?;
    }
    eprintln!("{} finished in {:.3} s", rep.method, rep.wall_time_s.unwrap_or(0.0));
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    if !a.aggregate.is_empty() {
        let mut reports = Vec::new();
        for p in &a.aggregate {
            reports.extend(report::parse_reports(&read_file(p)?)?);
        }
        let aggregate = report::aggregate(&reports);
        return write_json(a.out_report.as_deref(), &EvalSummary { reports, aggregate });
    }

    if let Some(dir) = &a.corpus {
        let recon_dir = a.recon_dir.as_ref().expect("clap enforces --recon-dir");
        let m = corpus::read_manifest(dir)?;
        let entries = corpus::select(&m, a.skip, a.take);
        let reports = pool(a.jobs.jobs)?.install(|| {
            entries
                .par_iter()
                .map(|e| -> dlspeed::Result<ReconReport> {
                    let d = corpus::case_dir(dir, e);
                    let mask = corpus::read_mask(&d.join(corpus::MASK))?;
                    let reference = corpus::read_image(&d.join(corpus::IMAGE))?;
                    let recon = corpus::read_image(&image_path(recon_dir, &e.id))?;
                    let sidecar = report_path(recon_dir, &e.id);
                    let mut r = match sidecar.exists() {
                        true => serde_json::from_slice(&read_file(&sidecar)?)?,
                        false => ReconReport::new(&e.id, &a.method, Some(&mask)),
                    };
                    r.score(&recon, &reference)?;
                    Ok(r)
                })
                .collect::<dlspeed::Result<Vec<_>>>()
        })?;
        let aggregate = report::aggregate(&reports);
        return write_json(a.out_report.as_deref(), &EvalSummary { reports, aggregate });
    }

    let recon = corpus::read_image(a.recon.as_ref().expect("clap enforces --recon"))?;
    let reference = corpus::read_image(a.reference.as_ref().expect("clap enforces --reference"))?;
    let mask = a.mask.as_deref().map(corpus::read_mask).transpose()?;
    let mut r = ReconReport::new(&a.case_id, &a.method, mask.as_ref());
    r.score(&recon, &reference)?;
    write_json(a.out_report.as_deref(), &r)
}
