//! Volume file IO: the artifact's raw VGDV format and a minimal NIfTI-1
//! single-file reader (float32 and int16 payloads only).
//!
//! VGDV layout, all little-endian:
//! `"VGDV"` magic, `u32` version (currently 1), `u32 × 3` dims, `u32` dtype
//! code (0 = float32), then the IEEE-754 32-bit pixel stream in raster order
//! (last axis fastest).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;
use thiserror::Error;

pub const VGDV_MAGIC: &[u8; 4] = b"VGDV";
pub const VGDV_VERSION: u32 = 1;
pub const VGDV_DTYPE_F32: u32 = 0;

const NIFTI_HEADER_SIZE: usize = 348;
const NIFTI_MAGIC: &[u8; 4] = b"n+1\0";
const NIFTI_DT_INT16: i16 = 4;
const NIFTI_DT_FLOAT32: i16 = 16;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: {0}")]
    BadMagic(String),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i64),
    #[error("truncated payload: expected {expected} values, got {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Vgdv,
    Nifti1,
}

/// Header facts carried alongside the pixel data.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    /// Pixel spacing per axis; 1.0 when the source does not provide any.
    pub spacing: [f64; 3],
    pub format: VolumeFormat,
    /// True when NIfTI scl_slope/scl_inter scaling was applied.
    pub scaled: bool,
}

/// Write a volume in VGDV format. Bit-exact: reading it back reproduces the
/// float payload exactly.
pub fn write_volume(path: &Path, volume: &Array3<f32>) -> Result<(), VolumeError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(VGDV_MAGIC)?;
    w.write_u32::<LittleEndian>(VGDV_VERSION)?;
    let (d0, d1, d2) = volume.dim();
    for d in [d0, d1, d2] {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    w.write_u32::<LittleEndian>(VGDV_DTYPE_F32)?;
    // Raster order: iterate in standard (row-major) order.
    for v in volume.iter() {
        w.write_f32::<LittleEndian>(*v)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a volume, dispatching on content: VGDV by its magic, otherwise
/// NIfTI-1 (validated by header size 348 at offset 0 and magic at 344).
pub fn read_volume(path: &Path) -> Result<(Array3<f32>, VolumeMeta), VolumeError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() >= 4 && &bytes[..4] == VGDV_MAGIC {
        return read_vgdv(&bytes);
    }
    read_nifti1(&bytes)
}

fn read_vgdv(bytes: &[u8]) -> Result<(Array3<f32>, VolumeMeta), VolumeError> {
    let mut r = &bytes[4..];
    let version = r.read_u32::<LittleEndian>()?;
    if version != VGDV_VERSION {
        return Err(VolumeError::UnsupportedVersion(version));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = r.read_u32::<LittleEndian>()? as usize;
    }
    let dtype = r.read_u32::<LittleEndian>()?;
    if dtype != VGDV_DTYPE_F32 {
        return Err(VolumeError::UnsupportedDatatype(dtype as i64));
    }
    // Overflow-safe size check before any allocation; corrupt headers must
    // error, not abort.
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| VolumeError::UnsupportedGeometry(format!("dims {dims:?} overflow")))?;
    if r.len() < n * 4 {
        return Err(VolumeError::TruncatedPayload {
            expected: n,
            got: r.len() / 4,
        });
    }
    let mut data = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    let volume = Array3::from_shape_vec((dims[0], dims[1], dims[2]), data)
        .expect("dims/data length checked above");
    Ok((
        volume,
        VolumeMeta {
            dims,
            spacing: [1.0; 3],
            format: VolumeFormat::Vgdv,
            scaled: false,
        },
    ))
}

fn le_i16(bytes: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([bytes[off], bytes[off + 1]])
}

fn le_i32(bytes: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
}

fn le_f32(bytes: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
}

fn read_nifti1(bytes: &[u8]) -> Result<(Array3<f32>, VolumeMeta), VolumeError> {
    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(VolumeError::BadMagic(
            "file shorter than a NIfTI-1 header".into(),
        ));
    }
    if le_i32(bytes, 0) != NIFTI_HEADER_SIZE as i32 {
        return Err(VolumeError::BadMagic(format!(
            "header-size field is {}, expected 348",
            le_i32(bytes, 0)
        )));
    }
    if &bytes[344..348] != NIFTI_MAGIC {
        return Err(VolumeError::BadMagic(format!(
            "magic bytes {:?} are not \"n+1\\0\"",
            &bytes[344..348]
        )));
    }

    let ndim = le_i16(bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(VolumeError::UnsupportedGeometry(format!(
            "dim[0] = {ndim} outside 1..=7"
        )));
    }
    let mut dims = [1usize; 3];
    for (i, dim) in dims.iter_mut().enumerate().take((ndim as usize).min(3)) {
        let d = le_i16(bytes, 40 + 2 * (i + 1));
        if d < 1 {
            return Err(VolumeError::UnsupportedGeometry(format!(
                "dim[{}] = {d}",
                i + 1
            )));
        }
        *dim = d as usize;
    }
    for i in 3..ndim as usize {
        let d = le_i16(bytes, 40 + 2 * (i + 1));
        if d > 1 {
            return Err(VolumeError::UnsupportedGeometry(format!(
                "higher dimension dim[{}] = {d} (only 3-d volumes supported)",
                i + 1
            )));
        }
    }

    let datatype = le_i16(bytes, 70);
    let mut spacing = [1.0f64; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let pd = le_f32(bytes, 76 + 4 * (i + 1));
        if pd > 0.0 && pd.is_finite() {
            *s = pd as f64;
        }
    }
    let vox_offset = le_f32(bytes, 108);
    let scl_slope = le_f32(bytes, 112);
    let scl_inter = le_f32(bytes, 116);

    let offset = if vox_offset >= NIFTI_HEADER_SIZE as f32 {
        vox_offset as usize
    } else {
        352
    };
    let n = dims[0] * dims[1] * dims[2];
    let value_size = match datatype {
        NIFTI_DT_FLOAT32 => 4,
        NIFTI_DT_INT16 => 2,
        other => return Err(VolumeError::UnsupportedDatatype(other as i64)),
    };
    if bytes.len() < offset + n * value_size {
        return Err(VolumeError::TruncatedPayload {
            expected: n,
            got: bytes.len().saturating_sub(offset) / value_size,
        });
    }
    let payload = &bytes[offset..offset + n * value_size];
    let mut data = vec![0f32; n];
    match datatype {
        NIFTI_DT_FLOAT32 => {
            let mut r = payload;
            r.read_f32_into::<LittleEndian>(&mut data)?;
        }
        NIFTI_DT_INT16 => {
            for (i, v) in data.iter_mut().enumerate() {
                *v = le_i16(payload, 2 * i) as f32;
            }
        }
        _ => unreachable!(),
    }
    let scaled = scl_slope != 0.0;
    if scaled {
        for v in data.iter_mut() {
            *v = scl_slope * *v + scl_inter;
        }
    }
    // NIfTI stores the first axis fastest; our raster order has the last
    // axis fastest, so dims reverse on the way in.
    let volume = Array3::from_shape_vec((dims[2], dims[1], dims[0]), data)
        .expect("dims/data length checked above");
    Ok((
        volume,
        VolumeMeta {
            dims: [dims[2], dims[1], dims[0]],
            spacing: [spacing[2], spacing[1], spacing[0]],
            format: VolumeFormat::Nifti1,
            scaled,
        },
    ))
}
