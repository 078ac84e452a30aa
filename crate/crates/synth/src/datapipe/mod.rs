//! Volume handling and preprocessing: pad/crop, masked min–max
//! normalization, ROI masking, morphological dilation, R2* fitting, and
//! slice decomposition/reassembly.

pub mod dataset;
pub mod nifti;
pub mod npy;
pub mod phantom;

use crate::error::{Result, SynthError};
use ndarray::{Array2, Array3, Zip};

/// The five echo times (ms) of the multi-echo GRE acquisition.
pub const ECHO_TIMES_MS: [f64; 5] = [6.61, 12.85, 19.09, 25.33, 31.57];

/// What a volume measures; echoes carry their index (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    MgreEcho(usize),
    Qsm,
    R2star,
    T1w,
    Labels,
    Mask,
}

impl Modality {
    /// Short name used in filenames and manifests.
    pub fn tag(&self) -> String {
        match self {
            Modality::MgreEcho(i) => format!("echo{}", i + 1),
            Modality::Qsm => "qsm".into(),
            Modality::R2star => "r2star".into(),
            Modality::T1w => "t1w".into(),
            Modality::Labels => "labels".into(),
            Modality::Mask => "mask".into(),
        }
    }
}

/// A 3-D scalar grid stored (z, y, x) with voxel spacing in mm.
#[derive(Debug, Clone)]
pub struct Volume {
    pub data: Array3<f32>,
    /// (dx, dy, dz) in mm.
    pub spacing: (f32, f32, f32),
    pub modality: Modality,
    /// Echo time in ms for mGRE echoes.
    pub te_ms: Option<f64>,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: (f32, f32, f32), modality: Modality) -> Result<Self> {
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0) {
            return Err(SynthError::Parameter(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        if modality == Modality::Labels
            && data.iter().any(|&v| v.fract() != 0.0 || v < 0.0)
        {
            return Err(SynthError::Data(
                "labels volume contains non-integer codes".into(),
            ));
        }
        Ok(Self {
            data,
            spacing,
            modality,
            te_ms: None,
        })
    }

    pub fn with_te(mut self, te_ms: f64) -> Self {
        self.te_ms = Some(te_ms);
        self
    }

    /// Shape as (nx, ny, nz), matching the on-disk convention.
    pub fn shape_xyz(&self) -> (usize, usize, usize) {
        let (nz, ny, nx) = self.data.dim();
        (nx, ny, nz)
    }

    /// Voxel volume in mm³.
    pub fn voxel_mm3(&self) -> f64 {
        self.spacing.0 as f64 * self.spacing.1 as f64 * self.spacing.2 as f64
    }
}

/// Offsets recorded by [`pad_crop`] so content can be located (and padded
/// regions undone) afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PadCrop {
    pub orig_shape_xyz: (usize, usize, usize),
    /// Signed source-to-target offset per axis (x, y, z): target_index =
    /// source_index + offset where both exist.
    pub offset_xyz: (isize, isize, isize),
}

/// Symmetrically pad with `fill`, then center-crop, to reach
/// `target_xyz`. Total function: any input shape maps to the target shape
/// with the original content centered (±1 voxel when parities differ).
pub fn pad_crop(v: &Volume, target_xyz: (usize, usize, usize), fill: f32) -> (Volume, PadCrop) {
    let (nz, ny, nx) = v.data.dim();
    let (tx, ty, tz) = target_xyz;
    // Centered alignment: offset = (target - source) / 2, rounded toward
    // negative infinity so the convention is stable for odd differences.
    let off = |src: usize, dst: usize| -> isize {
        (dst as isize - src as isize).div_euclid(2)
    };
    let (ox, oy, oz) = (off(nx, tx), off(ny, ty), off(nz, tz));

    let mut out = Array3::<f32>::from_elem((tz, ty, tx), fill);
    for z in 0..nz {
        let zt = z as isize + oz;
        if zt < 0 || zt >= tz as isize {
            continue;
        }
        for y in 0..ny {
            let yt = y as isize + oy;
            if yt < 0 || yt >= ty as isize {
                continue;
            }
            for x in 0..nx {
                let xt = x as isize + ox;
                if xt < 0 || xt >= tx as isize {
                    continue;
                }
                out[[zt as usize, yt as usize, xt as usize]] = v.data[[z, y, x]];
            }
        }
    }
    let vol = Volume {
        data: out,
        spacing: v.spacing,
        modality: v.modality,
        te_ms: v.te_ms,
    };
    (
        vol,
        PadCrop {
            orig_shape_xyz: (nx, ny, nz),
            offset_xyz: (ox, oy, oz),
        },
    )
}

/// Undo [`pad_crop`]: restore the original shape, filling anything that was
/// cropped away with `fill`.
pub fn pad_crop_inverse(v: &Volume, info: &PadCrop, fill: f32) -> Volume {
    let (nx, ny, nz) = info.orig_shape_xyz;
    let (tz, ty, tx) = v.data.dim();
    let (ox, oy, oz) = info.offset_xyz;
    let mut out = Array3::<f32>::from_elem((nz, ny, nx), fill);
    for z in 0..nz {
        let zs = z as isize + oz;
        if zs < 0 || zs >= tz as isize {
            continue;
        }
        for y in 0..ny {
            let ys = y as isize + oy;
            if ys < 0 || ys >= ty as isize {
                continue;
            }
            for x in 0..nx {
                let xs = x as isize + ox;
                if xs < 0 || xs >= tx as isize {
                    continue;
                }
                out[[z, y, x]] = v.data[[zs as usize, ys as usize, xs as usize]];
            }
        }
    }
    Volume {
        data: out,
        spacing: v.spacing,
        modality: v.modality,
        te_ms: v.te_ms,
    }
}

/// Affine constants recorded by [`normalize_group`] for de-normalization.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormParams {
    pub min: f32,
    pub max: f32,
    pub degenerate: bool,
}

impl NormParams {
    /// Map a normalized value back to the original intensity scale.
    pub fn denorm(&self, v: f32) -> f32 {
        if self.degenerate {
            self.min
        } else {
            (v + 1.0) * 0.5 * (self.max - self.min) + self.min
        }
    }

    pub fn norm(&self, v: f32) -> f32 {
        if self.degenerate {
            0.0
        } else {
            (v - self.min) / (self.max - self.min) * 2.0 - 1.0
        }
    }
}

/// Min–max normalize a modality group to [−1, 1] jointly over all volumes
/// in the group, using only in-mask voxels for the statistics. Out-of-mask
/// voxels are set to −1 (the background value). A constant group is
/// degenerate: in-mask values become 0 and the params are flagged.
pub fn normalize_group(
    vols: &[&Volume],
    mask: &Array3<bool>,
) -> Result<(Vec<Volume>, NormParams)> {
    if vols.is_empty() {
        return Err(SynthError::Parameter("empty modality group".into()));
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for v in vols {
        if v.data.dim() != mask.dim() {
            return Err(SynthError::Shape(format!(
                "volume {:?} does not match mask {:?}",
                v.data.dim(),
                mask.dim()
            )));
        }
        for (&val, &m) in v.data.iter().zip(mask.iter()) {
            if !m {
                continue;
            }
            if !val.is_finite() {
                return Err(SynthError::Numeric(
                    "non-finite voxel in normalization input".into(),
                ));
            }
            lo = lo.min(val);
            hi = hi.max(val);
        }
    }
    if !lo.is_finite() {
        return Err(SynthError::Data("mask selects no voxels".into()));
    }
    let degenerate = hi == lo;
    let params = NormParams {
        min: lo,
        max: hi,
        degenerate,
    };
    let outs = vols
        .iter()
        .map(|v| {
            let mut data = Array3::<f32>::zeros(v.data.dim());
            Zip::from(&mut data)
                .and(&v.data)
                .and(mask)
                .for_each(|o, &val, &m| {
                    *o = if !m {
                        -1.0
                    } else if degenerate {
                        0.0
                    } else {
                        params.norm(val)
                    };
                });
            Volume {
                data,
                spacing: v.spacing,
                modality: v.modality,
                te_ms: v.te_ms,
            }
        })
        .collect();
    Ok((outs, params))
}

/// Keep voxels where `mask` is true, set the rest to `fill`.
pub fn apply_mask(v: &Volume, mask: &Array3<bool>, fill: f32) -> Result<Volume> {
    if v.data.dim() != mask.dim() {
        return Err(SynthError::Shape(format!(
            "volume {:?} does not match mask {:?}",
            v.data.dim(),
            mask.dim()
        )));
    }
    let mut data = v.data.clone();
    Zip::from(&mut data).and(mask).for_each(|o, &m| {
        if !m {
            *o = fill;
        }
    });
    Ok(Volume {
        data,
        spacing: v.spacing,
        modality: v.modality,
        te_ms: v.te_ms,
    })
}

/// Morphological dilation: `rounds` applications of the 6-connected
/// structuring element (face neighbors).
pub fn dilate(mask: &Array3<bool>, rounds: usize) -> Array3<bool> {
    let (nz, ny, nx) = mask.dim();
    let mut cur = mask.clone();
    for _ in 0..rounds {
        let mut next = cur.clone();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if cur[[z, y, x]] {
                        continue;
                    }
                    let hit = (z > 0 && cur[[z - 1, y, x]])
                        || (z + 1 < nz && cur[[z + 1, y, x]])
                        || (y > 0 && cur[[z, y - 1, x]])
                        || (y + 1 < ny && cur[[z, y + 1, x]])
                        || (x > 0 && cur[[z, y, x - 1]])
                        || (x + 1 < nx && cur[[z, y, x + 1]]);
                    if hit {
                        next[[z, y, x]] = true;
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

/// Per-voxel log-linear fit of `S(TE) = S0·exp(−TE·R2*)`.
///
/// Echo times are in ms; the returned R2* map is in s⁻¹. Voxels with any
/// non-positive echo magnitude get R2* = 0 and `false` in the validity mask.
pub fn fit_r2star(echoes: &[Volume], tes_ms: &[f64]) -> Result<(Volume, Array3<bool>)> {
    if echoes.len() != tes_ms.len() || echoes.len() < 2 {
        return Err(SynthError::Parameter(format!(
            "need matching echoes and TEs (≥2), got {} and {}",
            echoes.len(),
            tes_ms.len()
        )));
    }
    if !tes_ms.windows(2).all(|w| w[1] > w[0]) {
        return Err(SynthError::Parameter(
            "echo times must be strictly increasing".into(),
        ));
    }
    let dim = echoes[0].data.dim();
    for e in echoes {
        if e.data.dim() != dim {
            return Err(SynthError::Shape("echo volumes differ in shape".into()));
        }
    }

    let n = tes_ms.len() as f64;
    let mean_te: f64 = tes_ms.iter().sum::<f64>() / n;
    let sxx: f64 = tes_ms.iter().map(|t| (t - mean_te) * (t - mean_te)).sum();

    let mut r2 = Array3::<f32>::zeros(dim);
    let mut ok = Array3::<bool>::from_elem(dim, true);
    let (nz, ny, nx) = dim;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut valid = true;
                let mut sxy = 0.0f64;
                let mut sum_ln = 0.0f64;
                let mut lns = [0.0f64; 16];
                for (k, e) in echoes.iter().enumerate() {
                    let s = e.data[[z, y, x]] as f64;
                    if s <= 0.0 {
                        valid = false;
                        break;
                    }
                    lns[k] = s.ln();
                    sum_ln += lns[k];
                }
                if !valid {
                    ok[[z, y, x]] = false;
                    continue;
                }
                let mean_ln = sum_ln / n;
                for (k, te) in tes_ms.iter().enumerate() {
                    sxy += (te - mean_te) * (lns[k] - mean_ln);
                }
                // Slope is per ms; report in s⁻¹.
                r2[[z, y, x]] = (-(sxy / sxx) * 1000.0) as f32;
            }
        }
    }
    let vol = Volume {
        data: r2,
        spacing: echoes[0].spacing,
        modality: Modality::R2star,
        te_ms: None,
    };
    Ok((vol, ok))
}

/// Decompose into axial (z-indexed) slices, each (y, x).
pub fn volume_to_slices(v: &Volume) -> Vec<Array2<f32>> {
    v.data
        .outer_iter()
        .map(|sl| sl.to_owned())
        .collect()
}

/// Reassemble indexed axial slices into a volume. Every index 0..n must be
/// present exactly once, in any order.
pub fn slices_to_volume(
    slices: &[(usize, Array2<f32>)],
    spacing: (f32, f32, f32),
    modality: Modality,
) -> Result<Volume> {
    if slices.is_empty() {
        return Err(SynthError::Data("no slices to assemble".into()));
    }
    let n = slices.len();
    let (ny, nx) = slices[0].1.dim();
    let mut seen = vec![false; n];
    let mut data = Array3::<f32>::zeros((n, ny, nx));
    for (idx, sl) in slices {
        if *idx >= n {
            return Err(SynthError::Data(format!(
                "slice index {idx} out of range for {n} slices"
            )));
        }
        if seen[*idx] {
            return Err(SynthError::Data(format!("duplicate slice index {idx}")));
        }
        if sl.dim() != (ny, nx) {
            return Err(SynthError::Shape("inconsistent slice shapes".into()));
        }
        seen[*idx] = true;
        data.index_axis_mut(ndarray::Axis(0), *idx).assign(sl);
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(SynthError::Data(format!("missing slice index {missing}")));
    }
    Volume::new(data, spacing, modality)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn counting_volume(nx: usize, ny: usize, nz: usize) -> Volume {
        let data = Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| {
            (z * ny * nx + y * nx + x) as f32
        });
        Volume::new(data, (1.0, 1.0, 1.0), Modality::T1w).unwrap()
    }

    #[test]
    fn pad_crop_identity_when_shapes_match() {
        let v = counting_volume(6, 5, 4);
        let (out, info) = pad_crop(&v, (6, 5, 4), 0.0);
        assert_eq!(out.data, v.data);
        assert_eq!(info.offset_xyz, (0, 0, 0));
    }

    #[test]
    fn pad_crop_centers_content() {
        // 2×2×2 block of ones into 6×6×6: content occupies indices 2..4.
        let v = Volume::new(
            Array3::from_elem((2, 2, 2), 1.0),
            (1.0, 1.0, 1.0),
            Modality::T1w,
        )
        .unwrap();
        let (out, info) = pad_crop(&v, (6, 6, 6), -1.0);
        assert_eq!(info.offset_xyz, (2, 2, 2));
        assert_eq!(out.data[[2, 2, 2]], 1.0);
        assert_eq!(out.data[[3, 3, 3]], 1.0);
        assert_eq!(out.data[[1, 2, 2]], -1.0);
        let ones = out.data.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 8);
    }

    #[test]
    fn pad_crop_mixed_pad_and_crop_offsets() {
        // x: 10→8 crops 1 off each side; z: 2→4 pads 1 on each side.
        let v = counting_volume(10, 8, 2);
        let (out, info) = pad_crop(&v, (8, 8, 4), 0.0);
        assert_eq!(info.offset_xyz, (-1, 0, 1));
        // Target voxel (x=0) is source x=1 at y=0, z shifted by 1.
        assert_eq!(out.data[[1, 0, 0]], v.data[[0, 0, 1]]);
        // Content centered within ±1 voxel: source center (4.5,3.5,0.5)
        // maps to (3.5,3.5,1.5) vs target center (3.5,3.5,1.5).
        let (ox, oy, oz) = info.offset_xyz;
        assert!((4.5 + ox as f64 - 3.5).abs() <= 1.0);
        assert!((3.5 + oy as f64 - 3.5).abs() <= 1.0);
        assert!((0.5 + oz as f64 - 1.5).abs() <= 1.0);
    }

    #[test]
    fn pad_then_inverse_restores_original() {
        let v = counting_volume(5, 4, 3);
        // Pure padding: target strictly larger on all axes.
        let (padded, info) = pad_crop(&v, (9, 8, 7), -1.0);
        let back = pad_crop_inverse(&padded, &info, f32::NAN);
        assert_eq!(back.data, v.data);
    }

    #[test]
    fn pad_crop_round_trip_preserves_uncropped_content() {
        let v = counting_volume(8, 8, 8);
        let (small, info) = pad_crop(&v, (4, 4, 4), 0.0);
        let back = pad_crop_inverse(&small, &info, -7.0);
        // Central region survives, cropped border is fill.
        assert_eq!(back.data[[4, 4, 4]], v.data[[4, 4, 4]]);
        assert_eq!(back.data[[0, 0, 0]], -7.0);
    }

    #[test]
    fn normalize_three_point_case() {
        let data = Array3::from_shape_vec((1, 1, 3), vec![0.0, 5.0, 10.0]).unwrap();
        let v = Volume::new(data, (1.0, 1.0, 1.0), Modality::T1w).unwrap();
        let mask = Array3::from_elem((1, 1, 3), true);
        let (outs, p) = normalize_group(&[&v], &mask).unwrap();
        assert_eq!(outs[0].data.as_slice().unwrap(), &[-1.0, 0.0, 1.0]);
        assert_eq!((p.min, p.max), (0.0, 10.0));
        assert!(!p.degenerate);
    }

    #[test]
    fn normalize_constant_volume_degenerates_to_zero() {
        let v = Volume::new(
            Array3::from_elem((2, 2, 2), 3.5),
            (1.0, 1.0, 1.0),
            Modality::Qsm,
        )
        .unwrap();
        let mask = Array3::from_elem((2, 2, 2), true);
        let (outs, p) = normalize_group(&[&v], &mask).unwrap();
        assert!(p.degenerate);
        assert!(outs[0].data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_denormalize_round_trip() {
        let mut rng = crate::rng::rng_for(1, "norm", 0);
        let data = Array3::from_shape_fn((4, 6, 5), |_| rng.gen::<f32>() * 200.0 - 50.0);
        let v = Volume::new(data.clone(), (1.0, 1.0, 1.0), Modality::T1w).unwrap();
        let mask = Array3::from_elem((4, 6, 5), true);
        let (outs, p) = normalize_group(&[&v], &mask).unwrap();
        // Round-trip error is a few ulps at the scale of the value range.
        let tol = (p.max - p.min) * 4.0 * f32::EPSILON;
        for (&orig, &n) in data.iter().zip(outs[0].data.iter()) {
            assert!((-1.0..=1.0).contains(&n));
            let back = p.denorm(n);
            assert!((back - orig).abs() <= tol, "{back} vs {orig}");
        }
    }

    #[test]
    fn normalize_group_shares_scale_across_members() {
        let a = Volume::new(
            Array3::from_elem((1, 1, 2), 0.0),
            (1.0, 1.0, 1.0),
            Modality::MgreEcho(0),
        )
        .unwrap();
        let b = Volume::new(
            Array3::from_elem((1, 1, 2), 10.0),
            (1.0, 1.0, 1.0),
            Modality::MgreEcho(1),
        )
        .unwrap();
        let mask = Array3::from_elem((1, 1, 2), true);
        let (outs, p) = normalize_group(&[&a, &b], &mask).unwrap();
        assert_eq!((p.min, p.max), (0.0, 10.0));
        assert!(outs[0].data.iter().all(|&v| v == -1.0));
        assert!(outs[1].data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn normalize_uses_only_in_mask_voxels() {
        let data = Array3::from_shape_vec((1, 1, 3), vec![-100.0, 0.0, 4.0]).unwrap();
        let v = Volume::new(data, (1.0, 1.0, 1.0), Modality::T1w).unwrap();
        let mask = Array3::from_shape_vec((1, 1, 3), vec![false, true, true]).unwrap();
        let (outs, p) = normalize_group(&[&v], &mask).unwrap();
        assert_eq!((p.min, p.max), (0.0, 4.0));
        // Out-of-mask voxel is background −1 regardless of its raw value.
        assert_eq!(outs[0].data[[0, 0, 0]], -1.0);
        assert_eq!(outs[0].data[[0, 0, 1]], -1.0);
        assert_eq!(outs[0].data[[0, 0, 2]], 1.0);
    }

    #[test]
    fn apply_mask_identity_and_fill_extremes() {
        let v = counting_volume(3, 3, 3);
        let all = Array3::from_elem((3, 3, 3), true);
        let none = Array3::from_elem((3, 3, 3), false);
        assert_eq!(apply_mask(&v, &all, -1.0).unwrap().data, v.data);
        assert!(apply_mask(&v, &none, -1.0)
            .unwrap()
            .data
            .iter()
            .all(|&x| x == -1.0));
    }

    #[test]
    fn apply_mask_single_roi_voxel_by_voxel() {
        let v = counting_volume(4, 4, 1);
        let mut mask = Array3::from_elem((1, 4, 4), false);
        mask[[0, 1, 2]] = true;
        mask[[0, 2, 2]] = true;
        let out = apply_mask(&v, &mask, -1.0).unwrap();
        for z in 0..1 {
            for y in 0..4 {
                for x in 0..4 {
                    let expect = if mask[[z, y, x]] {
                        v.data[[z, y, x]]
                    } else {
                        -1.0
                    };
                    assert_eq!(out.data[[z, y, x]], expect);
                }
            }
        }
    }

    #[test]
    fn dilate_single_voxel_makes_cross() {
        let mut m = Array3::from_elem((5, 5, 5), false);
        m[[2, 2, 2]] = true;
        let d = dilate(&m, 1);
        assert_eq!(d.iter().filter(|&&v| v).count(), 7);
        assert!(d[[2, 2, 2]] && d[[1, 2, 2]] && d[[3, 2, 2]]);
        assert!(d[[2, 1, 2]] && d[[2, 3, 2]] && d[[2, 2, 1]] && d[[2, 2, 3]]);
        assert!(!d[[1, 1, 2]]);
    }

    #[test]
    fn dilate_zero_rounds_is_identity() {
        let mut m = Array3::from_elem((3, 3, 3), false);
        m[[0, 1, 2]] = true;
        assert_eq!(dilate(&m, 0), m);
    }

    #[test]
    fn dilate_matches_brute_force_manhattan_ball() {
        // Iterated 6-connected dilation by r equals the set of voxels with
        // L1 distance ≤ r from the seed set.
        let mut m = Array3::from_elem((16, 16, 16), false);
        for (z, y, x) in [(7usize, 7usize, 7usize), (8, 8, 8), (7, 8, 7)] {
            m[[z, y, x]] = true;
        }
        let d = dilate(&m, 3);
        for z in 0..16i32 {
            for y in 0..16i32 {
                for x in 0..16i32 {
                    let mut mind = i32::MAX;
                    for &(sz, sy, sx) in &[(7i32, 7i32, 7i32), (8, 8, 8), (7, 8, 7)] {
                        mind = mind
                            .min((z - sz).abs() + (y - sy).abs() + (x - sx).abs());
                    }
                    assert_eq!(
                        d[[z as usize, y as usize, x as usize]],
                        mind <= 3,
                        "at {z},{y},{x} L1 {mind}"
                    );
                }
            }
        }
    }

    #[test]
    fn r2star_exact_on_noise_free_decay() {
        let tes = ECHO_TIMES_MS;
        let echoes: Vec<Volume> = tes
            .iter()
            .enumerate()
            .map(|(k, &te)| {
                // 50 s⁻¹ decay, TE in ms.
                let s = 100.0 * (-te * 0.001 * 50.0).exp();
                Volume::new(
                    Array3::from_elem((2, 2, 2), s as f32),
                    (1.0, 1.0, 1.0),
                    Modality::MgreEcho(k),
                )
                .unwrap()
                .with_te(te)
            })
            .collect();
        let (r2, ok) = fit_r2star(&echoes, &tes).unwrap();
        for &v in r2.data.iter() {
            assert!((v as f64 - 50.0).abs() < 1e-3, "{v}");
        }
        assert!(ok.iter().all(|&b| b));
    }

    #[test]
    fn r2star_zero_for_constant_signal() {
        let tes = ECHO_TIMES_MS;
        let echoes: Vec<Volume> = (0..5)
            .map(|k| {
                Volume::new(
                    Array3::from_elem((1, 2, 2), 42.0),
                    (1.0, 1.0, 1.0),
                    Modality::MgreEcho(k),
                )
                .unwrap()
            })
            .collect();
        let (r2, _) = fit_r2star(&echoes, &tes).unwrap();
        assert!(r2.data.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn r2star_flags_nonpositive_voxels() {
        let tes = [1.0, 2.0, 3.0];
        let mut vols: Vec<Volume> = (0..3)
            .map(|k| {
                Volume::new(
                    Array3::from_elem((1, 1, 2), 10.0),
                    (1.0, 1.0, 1.0),
                    Modality::MgreEcho(k),
                )
                .unwrap()
            })
            .collect();
        vols[1].data[[0, 0, 1]] = 0.0;
        let (r2, ok) = fit_r2star(&vols, &tes).unwrap();
        assert!(ok[[0, 0, 0]]);
        assert!(!ok[[0, 0, 1]]);
        assert_eq!(r2.data[[0, 0, 1]], 0.0);
    }

    #[test]
    fn r2star_rejects_unsorted_tes() {
        let vols: Vec<Volume> = (0..3)
            .map(|k| {
                Volume::new(
                    Array3::from_elem((1, 1, 1), 1.0),
                    (1.0, 1.0, 1.0),
                    Modality::MgreEcho(k),
                )
                .unwrap()
            })
            .collect();
        assert!(fit_r2star(&vols, &[1.0, 3.0, 2.0]).is_err());
    }

    #[test]
    fn r2star_noisy_median_error_under_five_percent() {
        // 1% multiplicative noise; compare against a Gauss–Newton NLS
        // oracle on the same voxels.
        let tes = ECHO_TIMES_MS;
        let mut rng = crate::rng::rng_for(3, "r2noise", 0);
        let n = 10_000usize;
        let mut rel_errs = Vec::with_capacity(n);
        for _ in 0..n {
            let r2_true = 0.02 + rng.gen::<f64>() * 0.04;
            let s0 = 50.0 + rng.gen::<f64>() * 100.0;
            let sig: Vec<f64> = tes
                .iter()
                .map(|&te| s0 * (-te * r2_true).exp() * (1.0 + 0.01 * rng.gen::<f64>().mul_add(2.0, -1.0)))
                .collect();

            // Log-linear (the implementation under test, scalar form).
            let mean_te: f64 = tes.iter().sum::<f64>() / 5.0;
            let sxx: f64 = tes.iter().map(|t| (t - mean_te) * (t - mean_te)).sum();
            let lns: Vec<f64> = sig.iter().map(|s| s.ln()).collect();
            let mean_ln: f64 = lns.iter().sum::<f64>() / 5.0;
            let sxy: f64 = tes
                .iter()
                .zip(&lns)
                .map(|(t, l)| (t - mean_te) * (l - mean_ln))
                .sum();
            let r2_loglin = -sxy / sxx;

            // Gauss–Newton nonlinear least squares on (S0, R2*).
            let (mut a, mut r) = (sig[0], r2_loglin.max(1e-4));
            for _ in 0..50 {
                let mut jtj = [[0.0f64; 2]; 2];
                let mut jtr = [0.0f64; 2];
                for (k, &te) in tes.iter().enumerate() {
                    let e = (-te * r).exp();
                    let resid = sig[k] - a * e;
                    let ja = e;
                    let jr = -a * te * e;
                    jtj[0][0] += ja * ja;
                    jtj[0][1] += ja * jr;
                    jtj[1][1] += jr * jr;
                    jtr[0] += ja * resid;
                    jtr[1] += jr * resid;
                }
                jtj[1][0] = jtj[0][1];
                let det = jtj[0][0] * jtj[1][1] - jtj[0][1] * jtj[1][0];
                if det.abs() < 1e-30 {
                    break;
                }
                let da = (jtr[0] * jtj[1][1] - jtr[1] * jtj[0][1]) / det;
                let dr = (jtr[1] * jtj[0][0] - jtr[0] * jtj[1][0]) / det;
                a += da;
                r += dr;
                if da.abs() < 1e-12 && dr.abs() < 1e-14 {
                    break;
                }
            }
            rel_errs.push(((r2_loglin - r) / r).abs());
        }
        rel_errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = rel_errs[n / 2];
        assert!(median < 0.05, "median rel err vs NLS {median}");
    }

    #[test]
    fn slice_round_trip_identity() {
        let v = counting_volume(6, 5, 7);
        let slices = volume_to_slices(&v);
        assert_eq!(slices.len(), 7);
        assert_eq!(slices[0].dim(), (5, 6));
        let indexed: Vec<(usize, Array2<f32>)> =
            slices.into_iter().enumerate().collect();
        let back = slices_to_volume(&indexed, v.spacing, v.modality).unwrap();
        assert_eq!(back.data, v.data);
    }

    #[test]
    fn slice_reassembly_order_independent() {
        let v = counting_volume(4, 4, 6);
        let mut indexed: Vec<(usize, Array2<f32>)> =
            volume_to_slices(&v).into_iter().enumerate().collect();
        indexed.reverse();
        indexed.swap(1, 4);
        let back = slices_to_volume(&indexed, v.spacing, v.modality).unwrap();
        assert_eq!(back.data, v.data);
    }

    #[test]
    fn slice_reassembly_detects_missing_and_duplicate() {
        let v = counting_volume(3, 3, 4);
        let indexed: Vec<(usize, Array2<f32>)> =
            volume_to_slices(&v).into_iter().enumerate().collect();

        let mut missing = indexed.clone();
        missing.remove(2);
        assert!(slices_to_volume(&missing, v.spacing, v.modality).is_err());

        let mut dup = indexed;
        dup[3].0 = 1;
        assert!(slices_to_volume(&dup, v.spacing, v.modality).is_err());
    }

    #[test]
    fn labels_volume_rejects_fractional_codes() {
        let data = Array3::from_elem((1, 1, 1), 1.5);
        assert!(Volume::new(data, (1.0, 1.0, 1.0), Modality::Labels).is_err());
    }
}
