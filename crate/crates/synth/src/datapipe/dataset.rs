//! On-disk dataset layout and the in-memory slice dataset.
//!
//! Raw subjects are NIfTI volumes plus a JSONL manifest ([`PhantomEntry`]).
//! Preprocessing turns each subject into one `.npy` stack of shape
//! `(Z, C+1, H, W)` — condition channels first, target last, everything in
//! [−1, 1] — described by a second JSONL manifest ([`StackEntry`]).
//! [`SliceDataset`] loads one split of that manifest and serves axial slices
//! as training samples.

use super::npy::{read_npy, write_npy};
use super::phantom::Demographics;
use super::{NormParams, PadCrop};
use crate::error::{Result, SynthError};
use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// One raw volume file within a subject directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileEntry {
    /// Modality tag (`echo1`..`echo5`, `qsm`, `r2star`, `t1w`, `labels`).
    pub tag: String,
    /// Path relative to the manifest's directory.
    pub path: String,
    /// FNV-1a checksum of the voxel payload.
    pub checksum: u64,
}

/// Manifest row for one generated subject (raw NIfTI volumes).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomEntry {
    pub subject_id: String,
    pub seed: u64,
    /// `train` or `test`.
    pub split: String,
    pub n_structures: usize,
    pub demographics: Demographics,
    pub structure_volumes_mm3: Vec<(String, f64)>,
    pub files: Vec<FileEntry>,
}

/// Manifest row for one preprocessed subject (slice stack).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackEntry {
    pub subject_id: String,
    pub split: String,
    /// `.npy` path relative to the manifest's directory; shape (Z, C+1, H, W).
    pub file: String,
    pub n_slices: usize,
    pub height: usize,
    pub width: usize,
    /// Condition channel tags in stack order; the target is the final plane.
    pub channels: Vec<String>,
    pub target: String,
    /// Normalization constants per modality group, for de-normalization.
    pub norm: BTreeMap<String, NormParams>,
    /// How the volume was brought to (H, W, Z), for undoing afterwards.
    pub pad: PadCrop,
    pub spacing: (f32, f32, f32),
    pub n_structures: usize,
    pub demographics: Demographics,
    pub structure_volumes_mm3: Vec<(String, f64)>,
}

/// Write records as one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| SynthError::Data(format!("manifest encode: {e}")))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Read a JSONL manifest, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            SynthError::Data(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

/// Stack normalized condition volumes and the target into (Z, C+1, H, W),
/// target last. All volumes must share one shape.
pub fn build_stack(conditions: &[&super::Volume], target: &super::Volume) -> Result<Array4<f32>> {
    let (nz, ny, nx) = target.data.dim();
    for c in conditions {
        if c.data.dim() != (nz, ny, nx) {
            return Err(SynthError::Shape(format!(
                "condition volume {} is {:?}, target is {:?}",
                c.modality.tag(),
                c.data.dim(),
                (nz, ny, nx)
            )));
        }
    }
    let c_total = conditions.len() + 1;
    let mut stack = Array4::<f32>::zeros((nz, c_total, ny, nx));
    for (ci, c) in conditions.iter().enumerate() {
        stack.index_axis_mut(Axis(1), ci).assign(&c.data);
    }
    stack.index_axis_mut(Axis(1), c_total - 1).assign(&target.data);
    Ok(stack)
}

/// Write one subject's stack; `path` should carry the `.npy` extension.
pub fn write_stack(path: &Path, stack: &Array4<f32>) -> Result<()> {
    write_npy(path, &stack.clone().into_dyn())
}

/// One training example: conditions (C, H, W) and target (H, W), in [−1, 1].
#[derive(Debug, Clone)]
pub struct SliceSample {
    pub conditions: Array3<f32>,
    pub target: Array2<f32>,
    pub subject: usize,
    pub z: usize,
}

/// All slice stacks of one split, flattened into an indexable list of
/// axial slices.
pub struct SliceDataset {
    stacks: Vec<Array4<f32>>,
    entries: Vec<StackEntry>,
    index: Vec<(usize, usize)>,
    pub channels: Vec<String>,
    pub height: usize,
    pub width: usize,
}

impl SliceDataset {
    /// Load every subject of `split` from `root/manifest.jsonl`. Validates
    /// shapes, channel consistency, and the [−1, 1] value contract.
    pub fn load(root: &Path, split: &str) -> Result<Self> {
        let all: Vec<StackEntry> = read_jsonl(&root.join("manifest.jsonl"))?;
        let entries: Vec<StackEntry> =
            all.into_iter().filter(|e| e.split == split).collect();
        if entries.is_empty() {
            return Err(SynthError::Data(format!(
                "no subjects with split '{split}' in {}",
                root.display()
            )));
        }
        let channels = entries[0].channels.clone();
        let (h, w) = (entries[0].height, entries[0].width);

        let mut stacks = Vec::with_capacity(entries.len());
        let mut index = Vec::new();
        for (si, e) in entries.iter().enumerate() {
            if e.channels != channels {
                return Err(SynthError::Data(format!(
                    "{}: channel set {:?} differs from {:?}",
                    e.subject_id, e.channels, channels
                )));
            }
            let arr = read_npy(&root.join(&e.file))?;
            let stack: Array4<f32> = arr.into_dimensionality().map_err(|_| {
                SynthError::Shape(format!("{}: stack must be 4-D", e.subject_id))
            })?;
            let dim = stack.dim();
            if dim != (e.n_slices, channels.len() + 1, h, w) {
                return Err(SynthError::Shape(format!(
                    "{}: stack is {:?}, manifest says {:?}",
                    e.subject_id,
                    dim,
                    (e.n_slices, channels.len() + 1, h, w)
                )));
            }
            if let Some(&bad) = stack
                .iter()
                .find(|v| !v.is_finite() || v.abs() > 1.0 + 1e-4)
            {
                return Err(SynthError::Data(format!(
                    "{}: stack value {bad} outside [-1, 1]",
                    e.subject_id
                )));
            }
            for z in 0..dim.0 {
                index.push((si, z));
            }
            stacks.push(stack);
        }
        Ok(Self {
            stacks,
            entries,
            index,
            channels,
            height: h,
            width: w,
        })
    }

    /// Number of slices across all subjects.
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Number of condition channels (target excluded).
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.stacks.len()
    }

    pub fn entry(&self, subject: usize) -> &StackEntry {
        &self.entries[subject]
    }

    /// Full stack of one subject, (Z, C+1, H, W).
    pub fn stack(&self, subject: usize) -> &Array4<f32> {
        &self.stacks[subject]
    }

    /// Condition channels of one subject slice, (C, H, W).
    pub fn conditions_of(&self, subject: usize, z: usize) -> ArrayView3<'_, f32> {
        let c = self.n_channels();
        self.stacks[subject]
            .index_axis(Axis(0), z)
            .split_at(Axis(0), c)
            .0
    }

    /// Fetch one slice by flat index.
    pub fn get(&self, i: usize) -> SliceSample {
        let (subject, z) = self.index[i];
        let plane = self.stacks[subject].index_axis(Axis(0), z);
        let c = self.n_channels();
        let conditions = plane.slice(ndarray::s![..c, .., ..]).to_owned();
        let target = plane.index_axis(Axis(0), c).to_owned();
        debug_assert!(conditions.iter().all(|v| v.abs() <= 1.0 + 1e-4));
        SliceSample {
            conditions,
            target,
            subject,
            z,
        }
    }
}
