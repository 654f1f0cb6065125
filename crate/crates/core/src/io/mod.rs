//! Persistence: checkpoints, binary grids, PNG previews, CSV tables and run
//! configuration. Every write goes to a temporary file in the destination
//! directory and is renamed into place.

mod checkpoint;
mod config;
mod grid;
mod image;
mod tables;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DataSpec, OutputSpec, RunConfig};
pub use grid::{
    load_grid, load_mask, load_sample, read_kind, save_grid, save_mask, save_sample, GridKind, GRID_MAGIC,
    GRID_VERSION,
};
pub use image::{gray_pixels, write_gray_png};
pub use tables::{read_loss_csv, write_eval_csv, write_loss_csv, write_rows, LossRow};

/// Write `bytes` to `path` atomically.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor over a byte slice.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated file: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}
