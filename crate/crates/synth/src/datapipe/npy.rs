//! Minimal `.npy` (format version 1.0) reader/writer for little-endian
//! float32 arrays in C order.
//!
//! Used for the preprocessed per-subject slice stacks, which are plain dense
//! arrays and don't warrant a full serialization dependency.

use crate::error::{Result, SynthError};
use ndarray::{ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Write an n-dimensional float32 array as `.npy` v1.0.
pub fn write_npy(path: &Path, arr: &ArrayD<f32>) -> Result<()> {
    let shape = arr
        .shape()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    // A 1-tuple needs its trailing comma.
    let shape_tuple = if arr.ndim() == 1 {
        format!("({shape},)")
    } else {
        format!("({shape})")
    };
    let mut dict = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': {shape_tuple}, }}"
    );
    // Pad with spaces so magic + version + length + dict is a multiple of 64,
    // ending in a newline, per the format spec.
    let prefix = MAGIC.len() + 2 + 2;
    let total = (prefix + dict.len() + 1).div_ceil(64) * 64;
    while prefix + dict.len() + 1 < total {
        dict.push(' ');
    }
    dict.push('\n');

    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&[1, 0])?;
    f.write_all(&(dict.len() as u16).to_le_bytes())?;
    f.write_all(dict.as_bytes())?;

    let standard = arr.as_standard_layout();
    let slice = standard.as_slice().expect("standard layout is contiguous");
    let mut body = Vec::with_capacity(slice.len() * 4);
    for &v in slice {
        body.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&body)?;
    Ok(())
}

/// Read a `.npy` file containing a little-endian float32 C-order array.
pub fn read_npy(path: &Path) -> Result<ArrayD<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| SynthError::Data(format!("{}: {msg}", path.display()));

    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(bad("not a .npy file"));
    }
    if bytes[6] != 1 {
        return Err(bad("only .npy format version 1.x is supported"));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + header_len {
        return Err(bad("truncated header"));
    }
    let dict = std::str::from_utf8(&bytes[10..10 + header_len])
        .map_err(|_| bad("header is not UTF-8"))?;

    if !dict.contains("'descr': '<f4'") {
        return Err(bad("dtype must be little-endian float32 ('<f4')"));
    }
    if !dict.contains("'fortran_order': False") {
        return Err(bad("fortran-order arrays are not supported"));
    }
    let shape_start = dict
        .find("'shape': (")
        .ok_or_else(|| bad("missing shape"))?
        + "'shape': (".len();
    let shape_end = dict[shape_start..]
        .find(')')
        .ok_or_else(|| bad("malformed shape"))?
        + shape_start;
    let mut shape = Vec::new();
    for part in dict[shape_start..shape_end].split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        shape.push(
            part.parse::<usize>()
                .map_err(|_| bad("malformed shape"))?,
        );
    }

    let n: usize = shape.iter().product();
    let data_start = 10 + header_len;
    if bytes.len() < data_start + n * 4 {
        return Err(bad("truncated voxel data"));
    }
    let mut flat = Vec::with_capacity(n);
    for c in bytes[data_start..data_start + n * 4].chunks_exact(4) {
        flat.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), flat)
        .map_err(|e| SynthError::Shape(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array4};
    use rand::Rng;

    #[test]
    fn four_d_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::rng::rng_for(2, "npy", 0);
        let arr = Array4::from_shape_fn((3, 6, 8, 8), |_| rng.gen::<f32>() - 0.5).into_dyn();
        let path = dir.path().join("a.npy");
        write_npy(&path, &arr).unwrap();
        let back = read_npy(&path).unwrap();
        assert_eq!(back, arr);
    }

    #[test]
    fn one_d_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let arr = Array1::from_vec(vec![1.0f32, -2.5, 3.25]).into_dyn();
        let path = dir.path().join("v.npy");
        write_npy(&path, &arr).unwrap();
        assert_eq!(read_npy(&path).unwrap(), arr);
    }

    #[test]
    fn header_is_aligned_and_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        let arr = Array4::<f32>::zeros((2, 3, 4, 5)).into_dyn();
        let path = dir.path().join("h.npy");
        write_npy(&path, &arr).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..6], b"\x93NUMPY");
        assert_eq!(bytes[6], 1);
        assert_eq!(bytes[7], 0);
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0, "data must start 64-byte aligned");
        assert_eq!(bytes[10 + hlen - 1], b'\n');
        let dict = std::str::from_utf8(&bytes[10..10 + hlen]).unwrap();
        assert!(dict.contains("'shape': (2, 3, 4, 5)"));
        assert_eq!(bytes.len(), 10 + hlen + 2 * 3 * 4 * 5 * 4);
    }

    #[test]
    fn rejects_wrong_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f64.npy");
        let dict = "{'descr': '<f8', 'fortran_order': False, 'shape': (2,), }      \n";
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"\x93NUMPY\x01\x00");
        bytes.extend_from_slice(&(dict.len() as u16).to_le_bytes());
        bytes.extend_from_slice(dict.as_bytes());
        bytes.extend_from_slice(&[0u8; 16]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_npy(&path).is_err());
    }
}
