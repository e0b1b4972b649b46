//! On-disk voxel label format.
//!
//! Little-endian layout: magic "CDSC", format version u16 (=1), dims X/Y/Z
//! as u32, class count u16, origin and extent as 6 f32, then X*Y*Z label
//! bytes with z fastest, then y, then x.

use std::path::Path;

use ndarray::Array3;

use super::{LabelGrid, VoxelGridSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CDSC";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 12 + 2 + 24;

pub fn encode_grid(grid: &LabelGrid, spec: &VoxelGridSpec, class_count: u16) -> Result<Vec<u8>> {
    let [nx, ny, nz] = spec.dims;
    if grid.dims() != spec.dims {
        return Err(Error::DimMismatch(format!(
            "grid {:?} vs spec {:?}",
            grid.dims(),
            spec.dims
        )));
    }
    if nx > u32::MAX as usize || ny > u32::MAX as usize || nz > u32::MAX as usize {
        return Err(Error::DimMismatch("dims exceed u32".into()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + nx * ny * nz);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [nx, ny, nz] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&class_count.to_le_bytes());
    for v in spec.origin.iter().chain(spec.extent.iter()) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    // (X,Y,Z) standard layout is already z-fastest.
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                out.push(grid.labels[[ix, iy, iz]]);
            }
        }
    }
    Ok(out)
}

pub fn decode_grid(bytes: &[u8]) -> Result<(LabelGrid, VoxelGridSpec, u16)> {
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let mut off = 6;
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::DimMismatch("zero dimension".into()));
    }
    let class_count = u16::from_le_bytes([bytes[off], bytes[off + 1]]);
    off += 2;
    let mut geo = [0f64; 6];
    for v in geo.iter_mut() {
        *v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
        off += 4;
    }
    let n = dims[0] * dims[1] * dims[2];
    let expected = HEADER_LEN + n;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let labels =
        Array3::from_shape_vec((dims[0], dims[1], dims[2]), bytes[off..off + n].to_vec())
            .expect("shape arithmetic");
    let spec = VoxelGridSpec::new([geo[0], geo[1], geo[2]], [geo[3], geo[4], geo[5]], dims)
        .map_err(|_| Error::DimMismatch("non-positive extent".into()))?;
    Ok((LabelGrid { labels }, spec, class_count))
}

pub fn save_grid(
    grid: &LabelGrid,
    spec: &VoxelGridSpec,
    class_count: u16,
    path: &Path,
) -> Result<()> {
    let bytes = encode_grid(grid, spec, class_count)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<(LabelGrid, VoxelGridSpec, u16)> {
    let bytes = std::fs::read(path)?;
    decode_grid(&bytes)
}
