//! On-disk corpus: `manifest.json` plus one directory of containers per case.

use std::fs;
use std::path::{Path, PathBuf};

use dlspeed::container::{self, read_file, write_atomic};
use dlspeed::forward::{CoilMaps, MultiCoilKSpace};
use dlspeed::phantoms::{CaseSeeds, CorpusSpec, SimCase};
use dlspeed::sampling::{acceleration_factor, SamplingMask};
use dlspeed::training::Sample;
use dlspeed::{ComplexVolume, Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const IMAGE: &str = "image.mrvx";
pub const MAPS: &str = "maps.mrvx";
pub const KSPACE: &str = "kspace.mrvx";
pub const MASK: &str = "mask.mrvx";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: CorpusSpec,
    pub cases: Vec<CaseEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub index: u64,
    pub seeds: CaseSeeds,
    pub achieved_r: f64,
}

pub struct CaseFiles {
    pub target: ComplexVolume,
    pub maps: CoilMaps,
    pub kspace: MultiCoilKSpace,
}

impl From<CaseFiles> for Sample {
    fn from(c: CaseFiles) -> Self {
        Sample {
            kspace: c.kspace,
            maps: c.maps,
            target: c.target,
        }
    }
}

pub fn case_id(index: u64) -> String {
    format!("case_{index:04}")
}

pub fn write_case(dir: &Path, case: &SimCase) -> Result<CaseEntry> {
    let id = case_id(case.index);
    let d = dir.join(&id);
    fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    write_atomic(&d.join(IMAGE), &container::encode_image(&case.target)?)?;
    write_atomic(&d.join(MAPS), &container::encode_maps(&case.maps)?)?;
    write_atomic(&d.join(KSPACE), &container::encode_kspace(case.kspace.coils())?)?;
    write_atomic(&d.join(MASK), &container::encode_mask(&case.mask)?)?;
    Ok(CaseEntry {
        id,
        index: case.index,
        seeds: case.seeds,
        achieved_r: acceleration_factor(&case.mask),
    })
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(m)?;
    bytes.push(b'\n');
    write_atomic(&dir.join(MANIFEST), &bytes)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST);
    serde_json::from_slice(&read_file(&p)?)
        .map_err(|e| Error::Format(format!("{}: {e}", p.display())))
}

pub fn case_dir(dir: &Path, entry: &CaseEntry) -> PathBuf {
    dir.join(&entry.id)
}

pub fn read_mask(path: &Path) -> Result<SamplingMask> {
    container::decode_mask(&read_file(path)?)
}

pub fn read_image(path: &Path) -> Result<ComplexVolume> {
    container::decode_image(&read_file(path)?)
}

pub fn read_maps(path: &Path) -> Result<CoilMaps> {
    container::decode_maps(&read_file(path)?)
}

pub fn read_kspace(path: &Path, mask: SamplingMask) -> Result<MultiCoilKSpace> {
    MultiCoilKSpace::new(container::decode_kspace(&read_file(path)?)?, mask)
}

pub fn read_case(dir: &Path, entry: &CaseEntry) -> Result<CaseFiles> {
    let d = case_dir(dir, entry);
    let mask = read_mask(&d.join(MASK))?;
    Ok(CaseFiles {
        target: read_image(&d.join(IMAGE))?,
        maps: read_maps(&d.join(MAPS))?,
        kspace: read_kspace(&d.join(KSPACE), mask)?,
    })
}

/// Manifest entries `skip..skip + take`.
pub fn select(m: &Manifest, skip: usize, take: Option<usize>) -> Vec<CaseEntry> {
    let it = m.cases.iter().skip(skip).cloned();
    match take {
        Some(t) => it.take(t).collect(),
        None => it.collect(),
    }
}
