//! Procedural 3-D head phantoms with known tissue parameters.
//!
//! Each phantom is a brain-shaped ellipsoid containing up to five mirrored
//! bilateral structure pairs. Per-voxel proton density, R2\*, and
//! susceptibility fields are sampled smoothly, the multi-echo GRE magnitudes
//! follow the monoexponential decay exactly, and the T1-weighted image is a
//! fixed smooth function of R2\* — so the conditional mapping the models must
//! learn exists by construction and every derived quantity has a closed-form
//! ground truth.
//!
//! Demographics are planted with real effects: structure volumes shrink with
//! age (≈0.4 %/year), differ by sex, and scale with head size, so downstream
//! volumetric regressions have true signal to recover.

use super::{Modality, Volume, ECHO_TIMES_MS};
use crate::error::{Result, SynthError};
use crate::rng::rng_for;
use ndarray::Array3;
use rand::Rng;

/// Subject covariates drawn per phantom.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Demographics {
    pub age_years: f64,
    pub sex_male: bool,
    /// Estimated total intracranial volume: in-mask voxels × voxel volume.
    pub etiv_mm3: f64,
}

/// One generated subject: its volumes, covariates, and ground-truth
/// structure volumes (left + right combined, mm³).
#[derive(Debug, Clone)]
pub struct Phantom {
    /// echo1..echo5, qsm, r2star, t1w, labels — nine volumes.
    pub volumes: Vec<Volume>,
    pub demographics: Demographics,
    pub structure_volumes_mm3: Vec<(String, f64)>,
}

/// Baseline R2* (s⁻¹) for a label class: diffuse tissue sits at 18, each
/// structure pair steps up by 7 so classes occupy disjoint bands.
fn r2s_center(label: usize) -> f32 {
    18.0 + 7.0 * (label as f32 - 1.0)
}

/// Half-width of the smooth within-class R2* modulation.
fn r2s_halfwidth(label: usize) -> f32 {
    if label == 1 {
        2.0
    } else {
        0.5
    }
}

/// T1-weighted intensity as a fixed smooth function of R2*; background is 0.
/// Monotone in R2*, so the class bands stay disjoint in the image too.
pub fn t1w_value(label: usize, r2s: f32) -> f32 {
    if label == 0 {
        0.0
    } else {
        60.0 + 3.2 * r2s
    }
}

/// Decision thresholds between consecutive T1w intensity bands.
/// `thresholds[j]` separates class j from class j+1 (class 0 = background);
/// length is `n_structures + 1`.
pub fn band_thresholds(n_structures: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n_structures + 1);
    let band = |label: usize| -> (f32, f32) {
        let lo = t1w_value(label, r2s_center(label) - r2s_halfwidth(label));
        let hi = t1w_value(label, r2s_center(label) + r2s_halfwidth(label));
        (lo, hi)
    };
    // Background occupies exactly 0.
    out.push(band(1).0 * 0.5);
    for label in 1..=n_structures {
        out.push((band(label).1 + band(label + 1).0) * 0.5);
    }
    out
}

/// Classify a T1w volume into label classes by intensity band. The inverse
/// of the generative intensity model, used to measure structures on
/// synthesized images.
pub fn segment_t1w(t1w: &Array3<f32>, n_structures: usize) -> Array3<f32> {
    let th = band_thresholds(n_structures);
    t1w.mapv(|v| th.iter().filter(|&&t| v >= t).count() as f32)
}

/// Hash bytes with 64-bit FNV-1a; used for manifest checksums.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Checksum of a volume's voxel payload (shape then little-endian values).
pub fn volume_checksum(v: &Volume) -> u64 {
    let (nz, ny, nx) = v.data.dim();
    let mut bytes = Vec::with_capacity(16 + v.data.len() * 4);
    for d in [nz, ny, nx] {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in v.data.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fnv1a64(&bytes)
}

struct Ellipsoid {
    center: (f64, f64, f64),
    semi: (f64, f64, f64),
}

impl Ellipsoid {
    fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        let dx = (x - self.center.0) / self.semi.0;
        let dy = (y - self.center.1) / self.semi.1;
        let dz = (z - self.center.2) / self.semi.2;
        dx * dx + dy * dy + dz * dz <= 1.0
    }
}

/// Structure stations as fractions of the brain semi-axes: (y, z) offsets;
/// every pair is mirrored across the mid-sagittal plane at ±0.40 in x.
const STATIONS: [(f64, f64); 5] = [
    (-0.38, 0.30),
    (0.38, 0.30),
    (-0.38, -0.32),
    (0.38, -0.32),
    (0.0, -0.02),
];

/// Structure semi-axes as fractions of the brain semi-axes.
const STRUCT_FRAC: (f64, f64, f64) = (0.16, 0.18, 0.24);

/// Fractional volume loss per year of age past 65, per structure pair.
const AGE_SHRINK_PER_YEAR: [f64; 5] = [0.004, 0.005, 0.003, 0.0045, 0.0035];

/// Fractional volume offset for male subjects (female mirrored negative),
/// on top of the overall head-size effect.
const SEX_VOLUME_OFFSET: [f64; 5] = [0.015, 0.020, 0.025, 0.020, 0.015];

/// Generate one phantom subject.
///
/// `grid_xyz` is the voxel grid (each dim ≥ 32); `n_structures` ≤ 5 bilateral
/// pairs are placed. Deterministic in `seed`.
pub fn generate_phantom(
    seed: u64,
    grid_xyz: (usize, usize, usize),
    n_structures: usize,
) -> Result<Phantom> {
    let (nx, ny, nz) = grid_xyz;
    if nx < 32 || ny < 32 || nz < 32 {
        return Err(SynthError::Parameter(format!(
            "phantom grid must be at least 32 per axis, got {grid_xyz:?}"
        )));
    }
    if n_structures > 5 {
        return Err(SynthError::Parameter(format!(
            "at most 5 structure pairs supported, got {n_structures}"
        )));
    }
    let spacing = (1.0f32, 1.0, 1.0);

    // Demographics and overall head scale. Males get slightly larger heads,
    // so eTIV genuinely covaries with sex.
    let mut demo_rng = rng_for(seed, "phantom-demo", 0);
    let age_years: f64 = demo_rng.gen_range(45.0..85.0);
    let sex_male: bool = demo_rng.gen_bool(0.5);
    let head_scale = demo_rng.gen_range(0.94..1.02) + if sex_male { 0.04 } else { 0.0 };

    let center = (
        (nx as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nz as f64 - 1.0) / 2.0,
    );
    let brain = Ellipsoid {
        center,
        semi: (
            0.40 * nx as f64 * head_scale,
            0.42 * ny as f64 * head_scale,
            0.38 * nz as f64 * head_scale,
        ),
    };

    // Per-structure size factors: age shrink, sex offset, and subject noise.
    let mut structures = Vec::new();
    for pair in 0..n_structures {
        let mut srng = rng_for(seed, "phantom-struct", pair as u64);
        let age_factor = (1.0 - AGE_SHRINK_PER_YEAR[pair] * (age_years - 65.0)).max(0.5);
        let sex_factor = if sex_male {
            1.0 + SEX_VOLUME_OFFSET[pair]
        } else {
            1.0 - SEX_VOLUME_OFFSET[pair]
        };
        let noise_factor: f64 = srng.gen_range(0.97..1.03);
        let linear = (age_factor * sex_factor * noise_factor).cbrt();
        let semi = (
            STRUCT_FRAC.0 * brain.semi.0 * linear,
            STRUCT_FRAC.1 * brain.semi.1 * linear,
            STRUCT_FRAC.2 * brain.semi.2 * linear,
        );
        let (fy, fz) = STATIONS[pair];
        let offset_x = 0.40 * brain.semi.0;
        for side in [-1.0, 1.0] {
            structures.push((
                pair,
                Ellipsoid {
                    center: (
                        center.0 + side * offset_x,
                        center.1 + fy * brain.semi.1,
                        center.2 + fz * brain.semi.2,
                    ),
                    semi,
                },
            ));
        }
    }

    // Smooth modulation field in [-1, 1] with seeded phases.
    let mut frng = rng_for(seed, "phantom-field", 0);
    let (p1, p2, p3): (f64, f64, f64) = (
        frng.gen_range(0.0..std::f64::consts::TAU),
        frng.gen_range(0.0..std::f64::consts::TAU),
        frng.gen_range(0.0..std::f64::consts::TAU),
    );
    let tau = std::f64::consts::TAU;
    let modulation = |x: f64, y: f64, z: f64| -> f32 {
        ((tau * 1.7 * x / nx as f64 + p1).sin()
            * (tau * 1.3 * y / ny as f64 + p2).sin()
            * (tau * 1.1 * z / nz as f64 + p3).sin()) as f32
    };

    // Rasterize labels and parameter fields.
    let shape = (nz, ny, nx);
    let mut labels = Array3::<f32>::zeros(shape);
    let mut s0 = Array3::<f32>::zeros(shape);
    let mut r2s = Array3::<f32>::zeros(shape);
    let mut chi = Array3::<f32>::zeros(shape);
    let mut t1w = Array3::<f32>::zeros(shape);
    let mut pair_counts = vec![0usize; n_structures];

    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let (x, y, z) = (ix as f64, iy as f64, iz as f64);
                if !brain.contains(x, y, z) {
                    continue;
                }
                let mut label = 1usize;
                for (pair, e) in &structures {
                    if e.contains(x, y, z) {
                        label = pair + 2;
                        pair_counts[*pair] += 1;
                        break;
                    }
                }
                let m = modulation(x, y, z);
                let (s0_v, r2s_v, chi_v) = if label == 1 {
                    (1000.0 * (1.0 + 0.08 * m), 18.0 + 2.0 * m, 0.005 + 0.002 * m)
                } else {
                    let l = label as f32;
                    (
                        (850.0 + 30.0 * l) * (1.0 + 0.05 * m),
                        r2s_center(label) + 0.5 * m,
                        0.02 * (l - 1.0) + 0.003 * m,
                    )
                };
                let idx = [iz, iy, ix];
                labels[idx] = label as f32;
                s0[idx] = s0_v;
                r2s[idx] = r2s_v;
                chi[idx] = chi_v;
                t1w[idx] = t1w_value(label, r2s_v);
            }
        }
    }

    let in_mask = labels.iter().filter(|&&l| l > 0.0).count();
    if in_mask == 0 {
        return Err(SynthError::Data(
            "phantom brain mask came out empty".into(),
        ));
    }

    // Exact monoexponential echoes.
    let mut volumes = Vec::with_capacity(9);
    for (i, &te_ms) in ECHO_TIMES_MS.iter().enumerate() {
        let te_s = (te_ms / 1000.0) as f32;
        let echo = ndarray::Zip::from(&s0)
            .and(&r2s)
            .map_collect(|&a, &r| a * (-te_s * r).exp());
        volumes.push(Volume::new(echo, spacing, Modality::MgreEcho(i))?.with_te(te_ms));
    }
    volumes.push(Volume::new(chi, spacing, Modality::Qsm)?);
    volumes.push(Volume::new(r2s, spacing, Modality::R2star)?);
    volumes.push(Volume::new(t1w, spacing, Modality::T1w)?);
    let labels_vol = Volume::new(labels, spacing, Modality::Labels)?;
    let voxel = labels_vol.voxel_mm3();
    volumes.push(labels_vol);

    let structure_volumes_mm3 = pair_counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (format!("structure_{}", i + 1), c as f64 * voxel))
        .collect();

    Ok(Phantom {
        volumes,
        demographics: Demographics {
            age_years,
            sex_male,
            etiv_mm3: in_mask as f64 * voxel,
        },
        structure_volumes_mm3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::fit_r2star;

    const GRID: (usize, usize, usize) = (48, 48, 32);

    #[test]
    fn deterministic_in_seed() {
        let a = generate_phantom(7, GRID, 3).unwrap();
        let b = generate_phantom(7, GRID, 3).unwrap();
        let c = generate_phantom(8, GRID, 3).unwrap();
        for (va, vb) in a.volumes.iter().zip(&b.volumes) {
            assert_eq!(va.data, vb.data);
        }
        assert_eq!(a.demographics, b.demographics);
        assert!(a.volumes[8].data != c.volumes[8].data);
    }

    #[test]
    fn emits_nine_volumes_in_channel_order() {
        let p = generate_phantom(1, GRID, 5).unwrap();
        assert_eq!(p.volumes.len(), 9);
        let tags: Vec<String> = p.volumes.iter().map(|v| v.modality.tag()).collect();
        assert_eq!(
            tags,
            ["echo1", "echo2", "echo3", "echo4", "echo5", "qsm", "r2star", "t1w", "labels"]
        );
        for (i, v) in p.volumes[..5].iter().enumerate() {
            assert_eq!(v.te_ms, Some(ECHO_TIMES_MS[i]));
            assert_eq!(v.data.dim(), (32, 48, 48));
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(generate_phantom(1, (16, 48, 48), 2).is_err());
        assert!(generate_phantom(1, GRID, 6).is_err());
    }

    #[test]
    fn labels_are_bilateral_and_populated() {
        let p = generate_phantom(3, GRID, 5).unwrap();
        let labels = &p.volumes[8].data;
        let (nz, ny, nx) = labels.dim();
        let max = labels.iter().cloned().fold(0.0f32, f32::max);
        assert_eq!(max, 6.0);
        for lab in 2..=6 {
            let count = labels.iter().filter(|&&v| v == lab as f32).count();
            assert!(count > 100, "label {lab} has only {count} voxels");
            // Mirror symmetry across the mid-sagittal plane: x ↔ nx-1-x.
            for iz in 0..nz {
                for iy in 0..ny {
                    for ix in 0..nx {
                        let v = labels[[iz, iy, ix]];
                        if v == lab as f32 {
                            assert_eq!(labels[[iz, iy, nx - 1 - ix]], v);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn ground_truth_volumes_match_label_counts() {
        let p = generate_phantom(11, GRID, 2).unwrap();
        let labels = &p.volumes[8].data;
        for (i, (name, mm3)) in p.structure_volumes_mm3.iter().enumerate() {
            assert_eq!(name, &format!("structure_{}", i + 1));
            let count = labels.iter().filter(|&&v| v == (i + 2) as f32).count();
            assert!((mm3 - count as f64).abs() < 1e-9); // 1 mm³ voxels
        }
        let in_mask = labels.iter().filter(|&&v| v > 0.0).count();
        assert!((p.demographics.etiv_mm3 - in_mask as f64).abs() < 1e-9);
    }

    #[test]
    fn echoes_decay_monoexponentially() {
        // The log-linear fit must reproduce the planted R2* field exactly
        // (noise-free decay), voxel for voxel inside the mask.
        let p = generate_phantom(5, GRID, 4).unwrap();
        let (fit, _) = fit_r2star(&p.volumes[..5], &ECHO_TIMES_MS).unwrap();
        let gt = &p.volumes[6].data;
        let labels = &p.volumes[8].data;
        let mut worst = 0.0f32;
        for ((f, g), l) in fit.data.iter().zip(gt.iter()).zip(labels.iter()) {
            if *l > 0.0 {
                worst = worst.max((f - g).abs());
            }
        }
        assert!(worst < 1e-3, "worst in-mask R2* error {worst}");
    }

    #[test]
    fn t1w_bands_invert_to_labels() {
        let p = generate_phantom(9, GRID, 5).unwrap();
        let seg = segment_t1w(&p.volumes[7].data, 5);
        assert_eq!(seg, p.volumes[8].data);
    }

    #[test]
    fn age_effect_is_planted() {
        // Across subjects, head-size-normalized structure volume must fall
        // with age clearly above the rasterization noise.
        let mut ages = Vec::new();
        let mut vols = Vec::new();
        for seed in 0..24 {
            let p = generate_phantom(1000 + seed, GRID, 1).unwrap();
            ages.push(p.demographics.age_years);
            vols.push(p.structure_volumes_mm3[0].1 / p.demographics.etiv_mm3);
        }
        let n = ages.len() as f64;
        let ma = ages.iter().sum::<f64>() / n;
        let mv = vols.iter().sum::<f64>() / n;
        let cov: f64 = ages.iter().zip(&vols).map(|(a, v)| (a - ma) * (v - mv)).sum();
        let va: f64 = ages.iter().map(|a| (a - ma).powi(2)).sum();
        let vv: f64 = vols.iter().map(|v| (v - mv).powi(2)).sum();
        let corr = cov / (va * vv).sqrt();
        assert!(corr < -0.5, "age/volume correlation {corr} too weak");
    }

    #[test]
    fn sex_effect_is_planted() {
        let mut male = Vec::new();
        let mut female = Vec::new();
        for seed in 0..30 {
            let p = generate_phantom(2000 + seed, GRID, 3).unwrap();
            // Normalize out head size and the (independent) age effect using
            // the known shrink rate, isolating the sex offset.
            let v = p.structure_volumes_mm3[2].1
                / p.demographics.etiv_mm3
                / (1.0 - AGE_SHRINK_PER_YEAR[2] * (p.demographics.age_years - 65.0));
            if p.demographics.sex_male {
                male.push(v);
            } else {
                female.push(v);
            }
        }
        assert!(male.len() >= 5 && female.len() >= 5);
        let mm = male.iter().sum::<f64>() / male.len() as f64;
        let mf = female.iter().sum::<f64>() / female.len() as f64;
        assert!(
            mm > mf * 1.02,
            "male mean {mm} not above female mean {mf}"
        );
    }

    #[test]
    fn fnv1a_matches_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn checksum_tracks_content_and_shape() {
        let p = generate_phantom(4, GRID, 1).unwrap();
        let c1 = volume_checksum(&p.volumes[7]);
        assert_eq!(c1, volume_checksum(&p.volumes[7]));
        assert_ne!(c1, volume_checksum(&p.volumes[6]));
    }
}
