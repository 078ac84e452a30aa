//! Minimal single-file NIfTI-1 reader/writer.
//!
//! Covers exactly what the pipeline needs: 3-D little-endian volumes in
//! uint8/int16/float32, voxel spacing, scale slope/intercept on read, and a
//! diagonal sform written from the spacing (affine passthrough only — no
//! reorientation).

use super::{Modality, Volume};
use crate::error::{Result, SynthError};
use ndarray::Array3;
use std::io::{Read, Write};
use std::path::Path;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}
fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}
fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}
fn get_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}
fn get_i32(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}
fn get_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn dtype_for(modality: Modality) -> i16 {
    match modality {
        Modality::Labels => DT_INT16,
        Modality::Mask => DT_UINT8,
        _ => DT_FLOAT32,
    }
}

/// Serialize a volume; dtype is chosen by modality (labels → int16,
/// mask → uint8, everything else → float32).
pub fn write_nifti(path: &Path, v: &Volume) -> Result<()> {
    let (nz, ny, nx) = v.data.dim();
    let datatype = dtype_for(v.modality);
    let bitpix: i16 = match datatype {
        DT_UINT8 => 8,
        DT_INT16 => 16,
        _ => 32,
    };

    let mut h = vec![0u8; VOX_OFFSET];
    put_i32(&mut h, 0, HEADER_SIZE as i32);
    // dim[8]
    put_i16(&mut h, 40, 3);
    put_i16(&mut h, 42, nx as i16);
    put_i16(&mut h, 44, ny as i16);
    put_i16(&mut h, 46, nz as i16);
    for k in 4..8 {
        put_i16(&mut h, 40 + 2 * k, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    // pixdim: qfac then spacings.
    put_f32(&mut h, 76, 1.0);
    put_f32(&mut h, 80, v.spacing.0);
    put_f32(&mut h, 84, v.spacing.1);
    put_f32(&mut h, 88, v.spacing.2);
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0); // scl_slope
    put_f32(&mut h, 116, 0.0); // scl_inter
    h[123] = 2; // xyzt_units: millimetres
    // Diagonal sform from spacing.
    put_i16(&mut h, 254, 1);
    put_f32(&mut h, 280, v.spacing.0);
    put_f32(&mut h, 300, v.spacing.1);
    put_f32(&mut h, 320, v.spacing.2);
    h[344..348].copy_from_slice(b"n+1\0");
    // 348..352: no header extensions.

    let n = nx * ny * nz;
    let mut body = Vec::with_capacity(n * bitpix as usize / 8);
    match datatype {
        DT_UINT8 => {
            for &val in v.data.iter() {
                body.push(val as u8);
            }
        }
        DT_INT16 => {
            for &val in v.data.iter() {
                body.extend_from_slice(&(val as i16).to_le_bytes());
            }
        }
        _ => {
            for &val in v.data.iter() {
                body.extend_from_slice(&val.to_le_bytes());
            }
        }
    }

    let mut f = std::fs::File::create(path)?;
    f.write_all(&h)?;
    f.write_all(&body)?;
    Ok(())
}

/// Read a single-file NIfTI-1 volume, applying any scale slope/intercept.
pub fn read_nifti(path: &Path, modality: Modality) -> Result<Volume> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < VOX_OFFSET {
        return Err(SynthError::Data(format!(
            "{}: file shorter than a NIfTI-1 header",
            path.display()
        )));
    }
    if get_i32(&bytes, 0) != HEADER_SIZE as i32 {
        return Err(SynthError::Data(format!(
            "{}: not a little-endian NIfTI-1 file (sizeof_hdr != 348)",
            path.display()
        )));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(SynthError::Data(format!(
            "{}: unsupported magic {:?} (need single-file \"n+1\")",
            path.display(),
            magic
        )));
    }

    let ndim = get_i16(&bytes, 40);
    let nx = get_i16(&bytes, 42).max(1) as usize;
    let ny = get_i16(&bytes, 44).max(1) as usize;
    let nz = get_i16(&bytes, 46).max(1) as usize;
    // Accept dim[0] > 3 only when the trailing dims are singleton.
    if ndim < 1 || (4..=7).contains(&ndim) {
        for k in 4..=ndim as usize {
            if get_i16(&bytes, 40 + 2 * k) > 1 {
                return Err(SynthError::Data(format!(
                    "{}: {ndim}-D volume not supported",
                    path.display()
                )));
            }
        }
    }

    let datatype = get_i16(&bytes, 70);
    let dx = get_f32(&bytes, 80);
    let dy = get_f32(&bytes, 84);
    let dz = get_f32(&bytes, 88);
    let vox_offset = get_f32(&bytes, 108) as usize;
    let slope_raw = get_f32(&bytes, 112);
    let inter = get_f32(&bytes, 116);
    let slope = if slope_raw == 0.0 { 1.0 } else { slope_raw };

    let n = nx * ny * nz;
    let elem = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => {
            return Err(SynthError::Data(format!(
                "{}: unsupported NIfTI datatype {other}",
                path.display()
            )))
        }
    };
    if bytes.len() < vox_offset + n * elem {
        return Err(SynthError::Data(format!(
            "{}: truncated voxel data",
            path.display()
        )));
    }

    let raw = &bytes[vox_offset..vox_offset + n * elem];
    let mut flat = Vec::with_capacity(n);
    match datatype {
        DT_UINT8 => {
            for &b in raw {
                flat.push(b as f32 * slope + inter);
            }
        }
        DT_INT16 => {
            for c in raw.chunks_exact(2) {
                flat.push(i16::from_le_bytes([c[0], c[1]]) as f32 * slope + inter);
            }
        }
        _ => {
            for c in raw.chunks_exact(4) {
                flat.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) * slope + inter);
            }
        }
    }

    let data = Array3::from_shape_vec((nz, ny, nx), flat)
        .map_err(|e| SynthError::Shape(format!("{}: {e}", path.display())))?;
    Volume::new(data, (dx, dy, dz), modality)
}
