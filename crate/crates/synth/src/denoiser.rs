//! The conditional noise-prediction network ε_θ.
//!
//! Wraps the U-Net backbone with the model-level contract: a validated
//! configuration, raw + EMA parameter sets tracked together with the
//! iteration counter, single-slice and batched forward evaluation, the
//! batched reverse-process sampler, and the on-disk checkpoint container.

use crate::error::{Result, SynthError};
use crate::nn::adam::Adam;
use crate::nn::unet::{ArchSpec, UNet};
use crate::nn::{Float, ParamStore};
use crate::rng::{derive_seed, rng_for};
use crate::schedule::{ddim_step_eta, NoisePredictor, NoiseSchedule};
use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

/// Architecture hyperparameters of the noise predictor.
///
/// `in_channels` counts the condition channels plus the noisy target
/// channel (N+1).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub resblocks_per_level: usize,
    pub groupnorm_groups: usize,
    pub attention_resolutions: Vec<usize>,
    pub image_size: usize,
}

impl Default for DenoiserConfig {
    /// Desk-scale preset: every architectural mechanism present (skip
    /// connections, attention at 16×16, timestep conditioning) at a size a
    /// CPU can train.
    fn default() -> Self {
        Self {
            in_channels: 6,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 2, 4],
            resblocks_per_level: 2,
            groupnorm_groups: 32,
            attention_resolutions: vec![16],
            image_size: 64,
        }
    }
}

impl DenoiserConfig {
    /// The backbone spec this config realizes (1 output channel, timestep
    /// conditioning on).
    pub fn arch_spec(&self) -> ArchSpec {
        ArchSpec {
            in_channels: self.in_channels,
            out_channels: 1,
            base_channels: self.base_channels,
            channel_multipliers: self.channel_multipliers.clone(),
            resblocks_per_level: self.resblocks_per_level,
            groups: self.groupnorm_groups,
            attention_resolutions: self.attention_resolutions.clone(),
            image_size: self.image_size,
            time_embed: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 2 {
            return Err(SynthError::Config(format!(
                "in_channels must be ≥ 2 (≥1 condition + noisy target), got {}",
                self.in_channels
            )));
        }
        self.arch_spec().validate()
    }
}

/// Raw and EMA parameters plus the iteration counter; the two parameter
/// sets are shape-congruent by construction and checked on load.
pub struct WeightState<F: Float> {
    pub raw: ParamStore<F>,
    pub ema: Vec<ArrayD<F>>,
    pub step: u64,
}

impl<F: Float> WeightState<F> {
    /// Verify raw/ema shape congruence.
    pub fn check_congruent(&self) -> Result<()> {
        let ids: Vec<_> = self.raw.ids().collect();
        if ids.len() != self.ema.len() {
            return Err(SynthError::Config(format!(
                "ema holds {} arrays, raw holds {}",
                self.ema.len(),
                ids.len()
            )));
        }
        for (id, e) in ids.iter().zip(&self.ema) {
            if self.raw.value(*id).shape() != e.shape() {
                return Err(SynthError::Config(format!(
                    "ema shape {:?} does not match raw '{}' {:?}",
                    e.shape(),
                    self.raw.name(*id),
                    self.raw.value(*id).shape()
                )));
            }
        }
        Ok(())
    }
}

/// A built noise predictor: configuration, network program, and weights.
pub struct Denoiser<F: Float> {
    pub config: DenoiserConfig,
    pub net: UNet,
    pub state: WeightState<F>,
}

impl<F: Float> Denoiser<F> {
    /// Parameter store with the EMA values substituted in, for evaluation.
    pub fn ema_params(&self) -> Result<ParamStore<F>> {
        let mut ps = self.raw_params_clone();
        ps.load_values(self.state.ema.clone())?;
        Ok(ps)
    }

    /// Deep copy of the raw parameter store.
    pub fn raw_params_clone(&self) -> ParamStore<F> {
        let mut ps = ParamStore::new();
        for id in self.state.raw.ids() {
            ps.add(
                self.state.raw.name(id).to_string(),
                self.state.raw.value(id).clone(),
            );
        }
        ps
    }

    /// Predictor view over an explicit parameter set (raw for training-time
    /// checks, EMA for release-quality sampling).
    pub fn predictor_with<'a>(&'a self, ps: &'a ParamStore<F>) -> DenoiserPredictor<'a, F> {
        DenoiserPredictor { net: &self.net, ps }
    }
}

/// Deterministically initialize a denoiser from `(config, seed)`. The head
/// convolution is zero-initialized, so the freshly built predictor is
/// identically zero; EMA starts as a copy of raw and `step = 0`.
pub fn build_denoiser<F: Float>(config: DenoiserConfig, seed: u64) -> Result<Denoiser<F>> {
    config.validate()?;
    let mut ps = ParamStore::<F>::new();
    let mut rng = rng_for(seed, "denoiser-init", 0);
    let net = UNet::build(config.arch_spec(), &mut ps, &mut rng)?;
    let ema = ps.clone_values();
    Ok(Denoiser {
        config,
        net,
        state: WeightState { raw: ps, ema, step: 0 },
    })
}

/// Evaluate ε_θ on one slice stack `(in_channels, H, W)` at virtual
/// timestep `t`, returning the `(H, W)` predicted-noise map.
pub fn denoise_forward<F: Float>(
    net: &UNet,
    ps: &ParamStore<F>,
    x_cat: &Array3<F>,
    t: usize,
) -> Result<Array2<F>> {
    let (c, _, _) = x_cat.dim();
    let x4 = x_cat.clone().insert_axis(Axis(0));
    let y = denoise_forward_batch(net, ps, &x4, &[t])?;
    debug_assert_eq!(y.dim().0, 1);
    let _ = c;
    Ok(y.index_axis_move(Axis(0), 0).index_axis_move(Axis(0), 0))
}

/// Batched forward: `(B, in_channels, H, W)` with one timestep per item.
pub fn denoise_forward_batch<F: Float>(
    net: &UNet,
    ps: &ParamStore<F>,
    x_cat: &Array4<F>,
    ts: &[usize],
) -> Result<Array4<F>> {
    let (b, c, _, _) = x_cat.dim();
    if c != net.spec.in_channels {
        return Err(SynthError::Config(format!(
            "input has {c} channels, model expects {}",
            net.spec.in_channels
        )));
    }
    if ts.len() != b {
        return Err(SynthError::Parameter(format!(
            "{} timesteps for batch of {b}",
            ts.len()
        )));
    }
    if x_cat.iter().any(|&v| !v.to_f64().is_finite()) {
        return Err(SynthError::Numeric(
            "non-finite values in the input stack".into(),
        ));
    }
    match net.infer(ps, x_cat, Some(ts)) {
        Ok(y) => Ok(y),
        Err(SynthError::Numeric(_)) => Err(diagnose_nonfinite(ps)),
        Err(e) => Err(e),
    }
}

/// Pin a non-finite forward pass on the first offending parameter tensor,
/// or report that activations alone overflowed.
fn diagnose_nonfinite<F: Float>(ps: &ParamStore<F>) -> SynthError {
    for id in ps.ids() {
        if ps.value(id).iter().any(|&v| !v.to_f64().is_finite()) {
            return SynthError::Numeric(format!(
                "non-finite values in parameter '{}'",
                ps.name(id)
            ));
        }
    }
    SynthError::Numeric(
        "non-finite activations in the network interior (parameters are finite)".into(),
    )
}

/// [`NoisePredictor`] over a network and an explicit parameter set.
pub struct DenoiserPredictor<'a, F: Float> {
    pub net: &'a UNet,
    pub ps: &'a ParamStore<F>,
}

impl<F: Float> NoisePredictor<F> for DenoiserPredictor<'_, F> {
    fn in_channels(&self) -> usize {
        self.net.spec.in_channels
    }
    fn predict(&self, x_cat: &Array3<F>, t: usize) -> Result<Array2<F>> {
        denoise_forward(self.net, self.ps, x_cat, t)
    }
}

/// Per-slice master seed, so one slice's reverse chain can be reproduced
/// without the rest of the volume.
pub fn slice_seed(master: u64, z: usize) -> u64 {
    derive_seed(master, "slice-seed", z as u64)
}

/// Reverse-process synthesis of a whole stack of slices, `batch` at a time.
///
/// `conditions` is `(Z, N, H, W)`; returns `(Z, H, W)`. Slice `z` follows
/// the same chain as [`crate::schedule::sample`] seeded with
/// [`slice_seed`]`(seed, z)` — batching shares network evaluations across
/// slices at each timestep without changing any slice's trajectory.
pub fn sample_stack<F: Float>(
    net: &UNet,
    ps: &ParamStore<F>,
    conditions: &Array4<F>,
    schedule: &NoiseSchedule,
    eta: f64,
    seed: u64,
    batch: usize,
) -> Result<Array3<F>> {
    let (z_total, c, h, w) = conditions.dim();
    if c + 1 != net.spec.in_channels {
        return Err(SynthError::Config(format!(
            "model expects {} channels, conditions provide {} (+1 noisy)",
            net.spec.in_channels,
            c + 1
        )));
    }
    if batch == 0 {
        return Err(SynthError::Parameter("batch must be ≥ 1".into()));
    }
    let mut out = Array3::<F>::zeros((z_total, h, w));

    for chunk_start in (0..z_total).step_by(batch) {
        let zs: Vec<usize> = (chunk_start..(chunk_start + batch).min(z_total)).collect();
        let b = zs.len();

        // Initial noise per slice, from that slice's own stream.
        let mut x = Array4::<F>::zeros((b, 1, h, w));
        for (bi, &z) in zs.iter().enumerate() {
            let mut rng = rng_for(slice_seed(seed, z), "sample-init", 0);
            for v in x.index_axis_mut(Axis(0), bi).iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v = F::from_f64(n);
            }
        }

        let mut x_cat = Array4::<F>::zeros((b, c + 1, h, w));
        for (bi, &z) in zs.iter().enumerate() {
            x_cat
                .slice_mut(ndarray::s![bi, ..c, .., ..])
                .assign(&conditions.index_axis(Axis(0), z));
        }

        let mut step_idx = 0u64;
        for pos in (0..schedule.k()).rev() {
            let t = schedule.tau_at(pos);
            let t_prev = if pos == 0 { 0 } else { schedule.tau_at(pos - 1) };

            x_cat
                .slice_mut(ndarray::s![.., c..c + 1, .., ..])
                .assign(&x);
            let ts = vec![t; b];
            let eps = denoise_forward_batch(net, ps, &x_cat, &ts)?;

            for (bi, &z) in zs.iter().enumerate() {
                let xb = x.index_axis(Axis(0), bi).to_owned();
                let eb = eps.index_axis(Axis(0), bi).to_owned();
                let noise = if eta > 0.0 && t_prev != 0 {
                    let mut zn = Array3::<F>::zeros((1, h, w));
                    let mut zrng = rng_for(slice_seed(seed, z), "sample-step", step_idx);
                    for v in zn.iter_mut() {
                        let n: f64 = zrng.sample(StandardNormal);
                        *v = F::from_f64(n);
                    }
                    Some(zn)
                } else {
                    None
                };
                let next = ddim_step_eta(&xb, &eb, t, t_prev, schedule, eta, noise.as_ref())?;
                x.index_axis_mut(Axis(0), bi).assign(&next);
            }
            step_idx += 1;
        }

        for (bi, &z) in zs.iter().enumerate() {
            out.index_axis_mut(Axis(0), z)
                .assign(&x.slice(ndarray::s![bi, 0, .., ..]));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoint container: a directory holding config.toml, raw.bin, ema.bin,
// state.json, and (when saved mid-training) adam_m.bin / adam_v.bin.
// ---------------------------------------------------------------------------

/// Optimizer scalars persisted alongside the moment blobs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub(crate) struct AdamMeta {
    pub(crate) lr: f64,
    pub(crate) beta1: f64,
    pub(crate) beta2: f64,
    pub(crate) eps: f64,
    pub(crate) t: u64,
}

impl AdamMeta {
    pub(crate) fn of<F: Float>(a: &Adam<F>) -> Self {
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            t: a.t,
        }
    }
}

/// Persist an optimizer's moment blobs as `{prefix}_m.bin` / `{prefix}_v.bin`.
pub(crate) fn save_adam_blobs<F: Float>(dir: &Path, prefix: &str, a: &Adam<F>) -> Result<()> {
    write_param_blob(&dir.join(format!("{prefix}_m.bin")), &a.m)?;
    write_param_blob(&dir.join(format!("{prefix}_v.bin")), &a.v)
}

/// Rebuild an optimizer from its meta scalars and moment blobs, validating
/// moment shapes against the parameter store it will drive.
pub(crate) fn load_adam_blobs<F: Float>(
    dir: &Path,
    prefix: &str,
    ps: &ParamStore<F>,
    meta: &AdamMeta,
) -> Result<Adam<F>> {
    let mut a = Adam::new(ps, meta.lr, meta.beta1, meta.beta2, meta.eps);
    a.t = meta.t;
    let m = read_param_blob::<F>(&dir.join(format!("{prefix}_m.bin")))?;
    let v = read_param_blob::<F>(&dir.join(format!("{prefix}_v.bin")))?;
    for (slot, arr) in a.m.iter().zip(&m).chain(a.v.iter().zip(&v)) {
        if slot.shape() != arr.shape() {
            return Err(SynthError::Config(
                "optimizer moment shapes do not match parameters".into(),
            ));
        }
    }
    a.m = m;
    a.v = v;
    Ok(a)
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct StateMeta {
    step: u64,
    dtype: String,
    adam: Option<AdamMeta>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct BlobHeader {
    dtype: String,
    shapes: Vec<Vec<usize>>,
}

/// Write arrays as a one-line JSON header (dtype + shapes) followed by the
/// concatenated little-endian scalars.
pub(crate) fn write_param_blob<F: Float>(path: &Path, arrays: &[ArrayD<F>]) -> Result<()> {
    let header = BlobHeader {
        dtype: F::DTYPE.to_string(),
        shapes: arrays.iter().map(|a| a.shape().to_vec()).collect(),
    };
    let mut f = std::fs::File::create(path)?;
    let hline = serde_json::to_string(&header)
        .map_err(|e| SynthError::Data(format!("blob header encode: {e}")))?;
    writeln!(f, "{hline}")?;
    let mut bytes = Vec::new();
    for a in arrays {
        let std_layout = a.as_standard_layout();
        for &v in std_layout.iter() {
            if F::DTYPE == "f32" {
                bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            } else {
                bytes.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
    }
    f.write_all(&bytes)?;
    Ok(())
}

pub(crate) fn read_param_blob<F: Float>(path: &Path) -> Result<Vec<ArrayD<F>>> {
    let f = std::fs::File::open(path)?;
    let mut reader = BufReader::new(f);
    let mut hline = String::new();
    reader.read_line(&mut hline)?;
    let header: BlobHeader = serde_json::from_str(hline.trim())
        .map_err(|e| SynthError::Data(format!("{}: blob header: {e}", path.display())))?;
    if header.dtype != F::DTYPE {
        return Err(SynthError::Config(format!(
            "{}: blob dtype {} does not match requested {}",
            path.display(),
            header.dtype,
            F::DTYPE
        )));
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let elem = if F::DTYPE == "f32" { 4 } else { 8 };
    let total: usize = header.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if bytes.len() != total * elem {
        return Err(SynthError::Data(format!(
            "{}: expected {} scalars, found {} bytes",
            path.display(),
            total,
            bytes.len()
        )));
    }
    let mut arrays = Vec::with_capacity(header.shapes.len());
    let mut off = 0usize;
    for shape in &header.shapes {
        let n: usize = shape.iter().product();
        let mut flat = Vec::with_capacity(n);
        for _ in 0..n {
            let v = if elem == 4 {
                f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64
            } else {
                f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap())
            };
            flat.push(F::from_f64(v));
            off += elem;
        }
        arrays.push(
            ArrayD::from_shape_vec(IxDyn(shape), flat)
                .map_err(|e| SynthError::Shape(format!("{}: {e}", path.display())))?,
        );
    }
    Ok(arrays)
}

/// Persist a checkpoint directory. Pass the optimizer to make the
/// checkpoint resumable mid-training; final/export checkpoints may omit it.
pub fn save_checkpoint<F: Float>(
    dir: &Path,
    config: &DenoiserConfig,
    state: &WeightState<F>,
    adam: Option<&Adam<F>>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let cfg = toml::to_string_pretty(config)
        .map_err(|e| SynthError::Config(format!("config encode: {e}")))?;
    std::fs::write(dir.join("config.toml"), cfg)?;
    write_param_blob(&dir.join("raw.bin"), &state.raw.clone_values())?;
    write_param_blob(&dir.join("ema.bin"), &state.ema)?;
    if let Some(a) = adam {
        save_adam_blobs(dir, "adam", a)?;
    }
    let meta = StateMeta {
        step: state.step,
        dtype: F::DTYPE.to_string(),
        adam: adam.map(AdamMeta::of),
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| SynthError::Data(format!("state encode: {e}")))?;
    std::fs::write(dir.join("state.json"), json)?;
    Ok(())
}

/// Load a checkpoint directory; validates parameter shapes against the
/// stored configuration and raw/ema congruence.
pub fn load_checkpoint<F: Float>(dir: &Path) -> Result<(Denoiser<F>, Option<Adam<F>>)> {
    let cfg_text = std::fs::read_to_string(dir.join("config.toml"))?;
    let config: DenoiserConfig = toml::from_str(&cfg_text)
        .map_err(|e| SynthError::Config(format!("{}: config: {e}", dir.display())))?;
    let meta_text = std::fs::read_to_string(dir.join("state.json"))?;
    let meta: StateMeta = serde_json::from_str(&meta_text)
        .map_err(|e| SynthError::Data(format!("{}: state: {e}", dir.display())))?;
    if meta.dtype != F::DTYPE {
        return Err(SynthError::Config(format!(
            "checkpoint dtype {} does not match requested {}",
            meta.dtype,
            F::DTYPE
        )));
    }

    // Rebuild the skeleton (shapes and program), then substitute values.
    let mut d = build_denoiser::<F>(config, 0)?;
    let raw = read_param_blob::<F>(&dir.join("raw.bin"))?;
    d.state.raw.load_values(raw)?;
    let ema = read_param_blob::<F>(&dir.join("ema.bin"))?;
    d.state.ema = ema;
    d.state.step = meta.step;
    d.state.check_congruent()?;

    let adam = match meta.adam {
        Some(am) => Some(load_adam_blobs(dir, "adam", &d.state.raw, &am)?),
        None => None,
    };
    Ok((d, adam))
}
