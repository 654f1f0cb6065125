use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{atomic_write, read_bytes, Reader};
use crate::data::{Ellipse, PhantomSample, PhaseField};
use crate::error::{Error, Result};
use crate::fourier::ComplexGrid;
use crate::sampling::{Mask, MaskMeta};

pub const GRID_MAGIC: &[u8; 8] = b"KSPGRID\0";
pub const GRID_VERSION: u32 = 1;

/// Kind tag stored after the version.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum GridKind {
    /// One byte per bin.
    Mask = 1,
    /// `f64` real plane then imaginary plane.
    Complex = 2,
    /// A phantom image with its generator parameters in the metadata.
    Sample = 3,
}

impl GridKind {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(GridKind::Mask),
            2 => Ok(GridKind::Complex),
            3 => Ok(GridKind::Sample),
            t => Err(Error::Format(format!("unknown grid kind tag {t}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleMeta {
    seed: u64,
    index: usize,
    ellipses: Vec<Ellipse>,
    phase: PhaseField,
}

fn encode(kind: GridKind, h: usize, w: usize, meta: &impl Serialize, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(25 + json.len() + payload.len());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

struct Decoded<'a> {
    kind: GridKind,
    height: usize,
    width: usize,
    meta: &'a [u8],
    payload: &'a [u8],
}

fn decode(bytes: &[u8]) -> Result<Decoded<'_>> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != GRID_MAGIC {
        return Err(Error::Format("not a grid file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != GRID_VERSION {
        return Err(Error::Format(format!("grid format version {version} is not supported")));
    }
    let kind = GridKind::from_tag(r.u8()?)?;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let len = r.u32()? as usize;
    let meta = r.take(len)?;
    Ok(Decoded {
        kind,
        height,
        width,
        meta,
        payload: r.rest(),
    })
}

fn expect(d: &Decoded, kind: GridKind, bytes_per_bin: usize) -> Result<()> {
    if d.kind != kind {
        return Err(Error::Format(format!("expected a {kind:?} file, found {:?}", d.kind)));
    }
    if d.payload.len() != d.height * d.width * bytes_per_bin {
        return Err(Error::Format(format!(
            "{}x{} {kind:?} needs {} payload bytes, found {}",
            d.height,
            d.width,
            d.height * d.width * bytes_per_bin,
            d.payload.len()
        )));
    }
    Ok(())
}

fn complex_payload(g: &ComplexGrid<f64>) -> Vec<u8> {
    g.re().iter().chain(g.im()).flat_map(|v| v.to_le_bytes()).collect()
}

fn complex_from(d: &Decoded) -> Result<ComplexGrid<f64>> {
    let vals: Vec<f64> = d
        .payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let n = d.height * d.width;
    ComplexGrid::new(d.height, d.width, vals[..n].to_vec(), vals[n..].to_vec())
}

fn json<'a, M: Deserialize<'a>>(meta: &'a [u8]) -> Result<M> {
    serde_json::from_slice(meta).map_err(|e| Error::Format(format!("grid metadata: {e}")))
}

pub fn read_kind(path: &Path) -> Result<GridKind> {
    Ok(decode(&read_bytes(path)?)?.kind)
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let payload: Vec<u8> = mask.bits().iter().map(|&b| b as u8).collect();
    atomic_write(path, &encode(GridKind::Mask, mask.height(), mask.width(), mask.meta(), &payload)?)
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let bytes = read_bytes(path)?;
    let d = decode(&bytes)?;
    expect(&d, GridKind::Mask, 1)?;
    let meta: MaskMeta = json(d.meta)?;
    let bits = d
        .payload
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format(format!("mask byte {v} is neither 0 nor 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mask = Mask::from_bits(d.height, d.width, bits)?;
    mask.set_meta(meta);
    Ok(mask)
}

pub fn save_grid(path: &Path, grid: &ComplexGrid<f64>) -> Result<()> {
    let (h, w) = grid.dims();
    atomic_write(path, &encode(GridKind::Complex, h, w, &serde_json::json!({}), &complex_payload(grid))?)
}

pub fn load_grid(path: &Path) -> Result<ComplexGrid<f64>> {
    let bytes = read_bytes(path)?;
    let d = decode(&bytes)?;
    expect(&d, GridKind::Complex, 16)?;
    complex_from(&d)
}

pub fn save_sample(path: &Path, s: &PhantomSample) -> Result<()> {
    let (h, w) = s.dims();
    let meta = SampleMeta {
        seed: s.seed,
        index: s.index,
        ellipses: s.ellipses.clone(),
        phase: s.phase.clone(),
    };
    atomic_write(path, &encode(GridKind::Sample, h, w, &meta, &complex_payload(&s.image))?)
}

/// Load a phantom; its spectrogram is recomputed from the stored image.
pub fn load_sample(path: &Path) -> Result<PhantomSample> {
    let bytes = read_bytes(path)?;
    let d = decode(&bytes)?;
    expect(&d, GridKind::Sample, 16)?;
    let meta: SampleMeta = json(d.meta)?;
    PhantomSample::from_image(meta.seed, meta.index, meta.ellipses, meta.phase, complex_from(&d)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_phantom;
    use crate::sampling::MaskSpec;

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.grid");
        let mask = MaskSpec::gaussian(4.0, 3).build(32, 16).unwrap();
        save_mask(&path, &mask).unwrap();
        assert_eq!(read_kind(&path).unwrap(), GridKind::Mask);
        assert_eq!(load_mask(&path).unwrap(), mask);
        assert!(load_grid(&path).is_err());
    }

    #[test]
    fn sample_and_grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_phantom(16, 16, 5, 2).unwrap();
        let p = dir.path().join("s.grid");
        save_sample(&p, &s).unwrap();
        assert_eq!(load_sample(&p).unwrap(), s);
        let g = dir.path().join("g.grid");
        save_grid(&g, &s.spectrum).unwrap();
        assert_eq!(load_grid(&g).unwrap(), s.spectrum);
        let first = std::fs::read(&p).unwrap();
        save_sample(&p, &load_sample(&p).unwrap()).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.grid");
        save_mask(&p, &Mask::all_ones(4, 4)).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_mask(&p).is_err());
        bytes[12] = 9;
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_mask(&p).is_err());
    }
}
