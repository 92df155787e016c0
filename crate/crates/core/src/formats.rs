//! Binary grid and field files.
//!
//! ARTV (occupancy grid), all integers little-endian:
//!
//! ```text
//! "ARTV"  u32 version = 1  u32 nx  u32 ny  u32 nz  nx·ny·nz bytes (0|1), x fastest
//! ```
//!
//! ARTF (float field) uses the same header with its own magic plus a
//! channel count, followed by `channels·nx·ny·nz` little-endian f32 values,
//! channel-major (each channel a full x-fastest grid):
//!
//! ```text
//! "ARTF"  u32 version = 1  u32 nx  u32 ny  u32 nz  u32 channels  f32 payload
//! ```

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::grid::{GridError, OccupancyGrid};
use crate::nn::Tensor;

pub const GRID_MAGIC: &[u8; 4] = b"ARTV";
pub const FIELD_MAGIC: &[u8; 4] = b"ARTF";
pub const VERSION: u32 = 1;

/// Refuses headers describing more than this many cells.
const MAX_CELLS: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("header describes an implausible size {0:?}")]
    BadSize([u64; 4]),
    #[error("file truncated")]
    Truncated,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for FormatError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FormatError::Truncated
        } else {
            FormatError::Io(e)
        }
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<[usize; 3], FormatError> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)?;
    if &found != magic {
        return Err(FormatError::BadMagic {
            found,
            expected: *magic,
        });
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let dims = [read_u32(r)?, read_u32(r)?, read_u32(r)?];
    let cells: u64 = dims.iter().map(|&d| d as u64).product();
    if cells == 0 || cells > MAX_CELLS {
        return Err(FormatError::BadSize([
            dims[0] as u64,
            dims[1] as u64,
            dims[2] as u64,
            1,
        ]));
    }
    Ok(dims.map(|d| d as usize))
}

fn write_header(w: &mut impl Write, magic: &[u8; 4], dims: [usize; 3]) -> io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_grid(w: &mut impl Write, grid: &OccupancyGrid) -> io::Result<()> {
    write_header(w, GRID_MAGIC, grid.dims())?;
    w.write_all(&grid.to_bytes())
}

pub fn read_grid(r: &mut impl Read) -> Result<OccupancyGrid, FormatError> {
    let dims = read_header(r, GRID_MAGIC)?;
    let mut bytes = vec![0u8; dims.iter().product()];
    r.read_exact(&mut bytes)?;
    Ok(OccupancyGrid::from_bytes(dims, &bytes)?)
}

pub fn encode_grid(grid: &OccupancyGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + grid.len());
    write_grid(&mut out, grid).expect("writing to a Vec cannot fail");
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<OccupancyGrid, FormatError> {
    let mut r = bytes;
    let g = read_grid(&mut r)?;
    Ok(g)
}

pub fn save_grid(path: impl AsRef<Path>, grid: &OccupancyGrid) -> Result<(), FormatError> {
    std::fs::write(path, encode_grid(grid)).map_err(FormatError::Io)
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<OccupancyGrid, FormatError> {
    let bytes = std::fs::read(path).map_err(FormatError::Io)?;
    decode_grid(&bytes)
}

/// Writes a `[channels, nz, ny, nx]` field (leading unit dims allowed).
pub fn write_field(w: &mut impl Write, field: &Tensor) -> io::Result<()> {
    let (channels, dims) = field_layout(field).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    write_header(w, FIELD_MAGIC, dims)?;
    w.write_all(&(channels as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(field.data().len() * 4);
    for v in field.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads a field as a `[1, channels, nz, ny, nx]` tensor.
pub fn read_field(r: &mut impl Read) -> Result<Tensor, FormatError> {
    let dims = read_header(r, FIELD_MAGIC)?;
    let channels = read_u32(r)? as usize;
    let cells: u64 = dims.iter().product::<usize>() as u64 * channels as u64;
    if channels == 0 || cells > MAX_CELLS {
        return Err(FormatError::BadSize([
            dims[0] as u64,
            dims[1] as u64,
            dims[2] as u64,
            channels as u64,
        ]));
    }
    let mut bytes = vec![0u8; cells as usize * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(vec![1, channels, dims[2], dims[1], dims[0]], data)
        .expect("shape matches payload length"))
}

pub fn save_field(path: impl AsRef<Path>, field: &Tensor) -> Result<(), FormatError> {
    let mut buf = Vec::new();
    write_field(&mut buf, field)?;
    std::fs::write(path, buf).map_err(FormatError::Io)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<Tensor, FormatError> {
    let bytes = std::fs::read(path).map_err(FormatError::Io)?;
    let mut r = bytes.as_slice();
    read_field(&mut r)
}

/// `(channels, [nx, ny, nz])` for a tensor whose last three dims are
/// spatial `[nz, ny, nx]`.
pub fn field_layout(t: &Tensor) -> Result<(usize, [usize; 3]), String> {
    let s = t.shape();
    if s.len() < 3 {
        return Err(format!("field needs at least 3 dims, got {s:?}"));
    }
    let n = s.len();
    let dims = [s[n - 1], s[n - 2], s[n - 3]];
    let cells: usize = dims.iter().product();
    Ok((t.len() / cells, dims))
}
