//! Single-file binary containers ("MRVX").
//!
//! ```text
//! magic "MRVX" | version u16 | type tag u16 | ndim u8 | extents u32 * ndim | payload
//! ```
//!
//! All integers and floats are little-endian. Complex payloads are
//! interleaved (re, im) f32 in row-major order; multi-coil payloads carry the
//! coil count as the leading extent. MASK payloads are packed bits (LSB first)
//! followed by a fixed metadata trailer. WGHT payloads are a u32
//! length-prefixed JSON manifest followed by the flat f32 parameter blocks.

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::forward::CoilMaps;
use crate::numerics::ComplexVolume;
use crate::sampling::SamplingMask;

pub const MAGIC: &[u8; 4] = b"MRVX";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum TypeTag {
    Img = 1,
    Kspc = 2,
    Maps = 3,
    Mask = 4,
    Wght = 5,
}

impl TypeTag {
    fn from_u16(v: u16) -> Result<Self> {
        Ok(match v {
            1 => Self::Img,
            2 => Self::Kspc,
            3 => Self::Maps,
            4 => Self::Mask,
            5 => Self::Wght,
            _ => return Err(Error::Format(format!("unknown type tag {v}"))),
        })
    }
}

/// A parsed container before interpretation of its payload.
#[derive(Debug, Clone, PartialEq)]
pub struct RawContainer {
    pub tag: TypeTag,
    pub extents: Vec<usize>,
    pub payload: Vec<u8>,
}

pub fn encode(tag: TypeTag, extents: &[usize], payload: &[u8]) -> Result<Vec<u8>> {
    if extents.len() > u8::MAX as usize {
        return Err(Error::Format("too many axes".into()));
    }
    let mut out = Vec::with_capacity(9 + 4 * extents.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tag as u16).to_le_bytes());
    out.push(extents.len() as u8);
    for &e in extents {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<RawContainer> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not an MRVX container".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version} (this build reads version {VERSION})"
        )));
    }
    let tag = TypeTag::from_u16(r.u16()?)?;
    let ndim = r.u8()? as usize;
    let extents = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    Ok(RawContainer {
        tag,
        extents,
        payload: r.rest().to_vec(),
    })
}

fn expect_tag(raw: &RawContainer, tag: TypeTag) -> Result<()> {
    if raw.tag != tag {
        return Err(Error::Format(format!("expected a {tag:?} container, found {:?}", raw.tag)));
    }
    Ok(())
}

fn complex_payload(values: &[Complex64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&(v.re as f32).to_le_bytes());
        out.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    out
}

fn parse_complex(payload: &[u8], count: usize) -> Result<Vec<Complex64>> {
    if payload.len() != count * 8 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header implies {}",
            payload.len(),
            count * 8
        )));
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes(c[0..4].try_into().unwrap());
            let im = f32::from_le_bytes(c[4..8].try_into().unwrap());
            Complex64::new(re as f64, im as f64)
        })
        .collect())
}

fn stacked(volumes: &[ComplexVolume]) -> Result<(Vec<usize>, Vec<u8>)> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::Shape("no volumes to store".into()))?;
    let mut extents = vec![volumes.len()];
    extents.extend_from_slice(first.shape());
    let mut payload = Vec::new();
    for v in volumes {
        first.same_shape(v)?;
        payload.extend(complex_payload(v.data()));
    }
    Ok((extents, payload))
}

fn unstacked(raw: &RawContainer) -> Result<Vec<ComplexVolume>> {
    if raw.extents.len() < 2 {
        return Err(Error::Format("multi-coil container needs a coil axis".into()));
    }
    let per: usize = raw.extents[1..].iter().product();
    let values = parse_complex(&raw.payload, per * raw.extents[0])?;
    values
        .chunks(per.max(1))
        .take(raw.extents[0])
        .map(|c| ComplexVolume::new(raw.extents[1..].to_vec(), c.to_vec()))
        .collect()
}

pub fn encode_image(img: &ComplexVolume) -> Result<Vec<u8>> {
    encode(TypeTag::Img, img.shape(), &complex_payload(img.data()))
}

pub fn decode_image(bytes: &[u8]) -> Result<ComplexVolume> {
    let raw = decode(bytes)?;
    expect_tag(&raw, TypeTag::Img)?;
    let n = raw.extents.iter().product();
    ComplexVolume::new(raw.extents.clone(), parse_complex(&raw.payload, n)?)
}

pub fn encode_maps(maps: &CoilMaps) -> Result<Vec<u8>> {
    let (extents, payload) = stacked(maps.maps())?;
    encode(TypeTag::Maps, &extents, &payload)
}

pub fn decode_maps(bytes: &[u8]) -> Result<CoilMaps> {
    let raw = decode(bytes)?;
    expect_tag(&raw, TypeTag::Maps)?;
    CoilMaps::new(unstacked(&raw)?)
}

/// Multi-coil k-space; the mask travels in its own MASK container.
pub fn encode_kspace(coils: &[ComplexVolume]) -> Result<Vec<u8>> {
    let (extents, payload) = stacked(coils)?;
    encode(TypeTag::Kspc, &extents, &payload)
}

pub fn decode_kspace(bytes: &[u8]) -> Result<Vec<ComplexVolume>> {
    let raw = decode(bytes)?;
    expect_tag(&raw, TypeTag::Kspc)?;
    unstacked(&raw)
}

pub fn encode_mask(mask: &SamplingMask) -> Result<Vec<u8>> {
    let bits = mask.included();
    let mut payload = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            payload[i / 8] |= 1 << (i % 8);
        }
    }
    payload.extend_from_slice(&mask.target_r().to_le_bytes());
    payload.push(mask.corner_cut() as u8);
    payload.extend_from_slice(&mask.seed().to_le_bytes());
    payload.extend_from_slice(&mask.radius0().to_le_bytes());
    for &c in mask.center_extent() {
        payload.extend_from_slice(&(c as u32).to_le_bytes());
    }
    encode(TypeTag::Mask, mask.shape(), &payload)
}

pub fn decode_mask(bytes: &[u8]) -> Result<SamplingMask> {
    let raw = decode(bytes)?;
    expect_tag(&raw, TypeTag::Mask)?;
    let n: usize = raw.extents.iter().product();
    let nbytes = n.div_ceil(8);
    let expected = nbytes + 8 + 1 + 8 + 8 + 4 * raw.extents.len();
    if raw.payload.len() != expected {
        return Err(Error::Format(format!(
            "mask payload holds {} bytes, header implies {expected}",
            raw.payload.len()
        )));
    }
    let included: Vec<bool> = (0..n).map(|i| raw.payload[i / 8] >> (i % 8) & 1 == 1).collect();
    let mut r = Reader::new(&raw.payload[nbytes..]);
    let target_r = r.f64()?;
    let corner_cut = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(Error::Format(format!("bad corner-cut flag {v}"))),
    };
    let seed = r.u64()?;
    let radius0 = r.f64()?;
    let center = (0..raw.extents.len())
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    SamplingMask::from_parts(
        raw.extents.clone(),
        included,
        target_r,
        center,
        corner_cut,
        seed,
        radius0,
    )
    .map_err(|e| Error::Format(format!("invalid mask container: {e}")))
}

/// WGHT payload: JSON manifest bytes plus flat parameters (stored as f32).
pub fn encode_weights_raw(manifest: &[u8], params: &[f64]) -> Result<Vec<u8>> {
    let len = u32::try_from(manifest.len()).map_err(|_| Error::Format("manifest too large".into()))?;
    let mut payload = Vec::with_capacity(4 + manifest.len() + 4 * params.len());
    payload.extend_from_slice(&len.to_le_bytes());
    payload.extend_from_slice(manifest);
    for &p in params {
        payload.extend_from_slice(&(p as f32).to_le_bytes());
    }
    encode(TypeTag::Wght, &[], &payload)
}

pub fn decode_weights_raw(bytes: &[u8]) -> Result<(Vec<u8>, Vec<f64>)> {
    let raw = decode(bytes)?;
    expect_tag(&raw, TypeTag::Wght)?;
    let mut r = Reader::new(&raw.payload);
    let len = r.u32()? as usize;
    let manifest = r.take(len)?.to_vec();
    let rest = r.rest();
    if !rest.len().is_multiple_of(4) {
        return Err(Error::Format("parameter block is not a whole number of f32".into()));
    }
    let params = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((manifest, params))
}

/// Writes through a temporary sibling then renames, so readers never observe
/// a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("truncated container".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }
}
