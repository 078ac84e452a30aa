//! The declarative run configuration: one TOML file drives every
//! subcommand, so a checked-in config reproduces a whole experiment. Every
//! field has a default; an empty file is the desk-scale preset.

use crate::baselines::GanConfig;
use crate::denoiser::DenoiserConfig;
use crate::error::{Result, SynthError};
use crate::schedule::{build_schedule, NoiseSchedule};
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Which condition channels feed the model, in stack order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelSet {
    /// The five GRE echo magnitudes.
    #[serde(rename = "mgre5")]
    Mgre5,
    /// Echoes plus the susceptibility and relaxation-rate maps.
    #[serde(rename = "mgre5+qsm+r2star")]
    Mgre5QsmR2star,
}

impl ChannelSet {
    /// Condition-channel tags in stack order (target excluded).
    pub fn tags(self) -> Vec<String> {
        let mut t: Vec<String> = (1..=5).map(|i| format!("echo{i}")).collect();
        if self == ChannelSet::Mgre5QsmR2star {
            t.push("qsm".into());
            t.push("r2star".into());
        }
        t
    }

    pub fn n_conditions(self) -> usize {
        match self {
            ChannelSet::Mgre5 => 5,
            ChannelSet::Mgre5QsmR2star => 7,
        }
    }

    /// Model input width: conditions plus the noisy target channel.
    pub fn in_channels(self) -> usize {
        self.n_conditions() + 1
    }
}

/// Where each stage reads and writes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Raw subject volumes plus their manifest (phantom output).
    pub raw_dir: PathBuf,
    /// Preprocessed slice stacks plus their manifest.
    pub stack_dir: PathBuf,
    /// Training checkpoints, one directory per run label.
    pub checkpoint_dir: PathBuf,
    /// Synthesized volumes, reports, and plots.
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            raw_dir: "work/raw".into(),
            stack_dir: "work/stacks".into(),
            checkpoint_dir: "work/checkpoints".into(),
            output_dir: "work/output".into(),
        }
    }
}

/// Volume geometry and channel selection applied in preprocessing.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    /// Target (x, y, z) after pad/crop; x and y must equal the model's
    /// image size, z is free (it is the slice axis).
    pub target_shape: (usize, usize, usize),
    pub channel_set: ChannelSet,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            target_shape: (64, 64, 48),
            channel_set: ChannelSet::Mgre5,
        }
    }
}

/// Diffusion schedule hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub t_virtual: usize,
    /// Number of subsampled steps actually trained and sampled.
    pub k: usize,
    pub beta_1: f64,
    pub beta_t: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            t_virtual: 1000,
            k: 100,
            beta_1: 1e-4,
            beta_t: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.t_virtual, self.k, self.beta_1, self.beta_t)
    }
}

/// Reverse-process synthesis options.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleParams {
    /// Evaluate with the EMA weights (the release-quality set).
    pub use_ema: bool,
    /// DDIM stochasticity; 0 is fully deterministic.
    pub eta: f64,
    /// Slices synthesized per network evaluation.
    pub batch_slices: usize,
    /// Pair each subject with another subject's conditions — a deliberate
    /// mismatch control that should degrade quality markedly.
    pub shuffle_conditions: bool,
}

impl Default for SampleParams {
    fn default() -> Self {
        Self {
            use_ema: true,
            eta: 0.0,
            batch_slices: 8,
            shuffle_conditions: false,
        }
    }
}

/// Evaluation options.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateParams {
    /// Bonferroni divisor for the paired tests.
    pub correction_m: usize,
    /// Which metric families to compute.
    pub metric_set: Vec<String>,
    /// Ground-truth intensity that counts as background for slice
    /// filtering.
    pub background: f32,
}

impl Default for EvaluateParams {
    fn default() -> Self {
        Self {
            correction_m: 20,
            metric_set: ["psnr", "ssim", "dice", "icc", "rve", "tests"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            background: 0.0,
        }
    }
}

/// Phantom cohort parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub n_subjects: usize,
    /// How many of the subjects are held out as the test split.
    pub n_test: usize,
    /// Voxel grid (x, y, z), each ≥ 32.
    pub grid: (usize, usize, usize),
    /// Bilateral structure pairs, ≤ 5.
    pub n_structures: usize,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            n_subjects: 40,
            n_test: 8,
            grid: (64, 64, 48),
            n_structures: 5,
        }
    }
}

/// Seeds for the three stochastic stages; everything else derives from
/// these.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    /// Drives phantom generation.
    pub master: u64,
    /// Drives weight init, batch order, and noise draws in training.
    pub training: u64,
    /// Drives the reverse-process noise.
    pub sampling: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            master: 17,
            training: 40,
            sampling: 99,
        }
    }
}

/// Everything a run needs, aggregated from one TOML file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub pipeline: PipelineParams,
    pub schedule: ScheduleParams,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub gan: GanConfig,
    pub sample: SampleParams,
    pub evaluate: EvaluateParams,
    pub phantom: PhantomParams,
    pub seeds: Seeds,
}

impl RunConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| SynthError::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SynthError::Config(format!("config {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.train.validate()?;
        self.gan.validate()?;
        self.schedule.build()?;

        let (tx, ty, tz) = self.pipeline.target_shape;
        if tx == 0 || ty == 0 || tz == 0 {
            return Err(SynthError::Config(format!(
                "target_shape must be positive, got {:?}",
                self.pipeline.target_shape
            )));
        }
        if tx != self.denoiser.image_size || ty != self.denoiser.image_size {
            return Err(SynthError::Config(format!(
                "target_shape x/y {:?} must equal the model image_size {}",
                (tx, ty),
                self.denoiser.image_size
            )));
        }
        if self.denoiser.in_channels != self.pipeline.channel_set.in_channels() {
            return Err(SynthError::Config(format!(
                "channel set provides {} conditions (+1 noisy) but the model expects {} input channels",
                self.pipeline.channel_set.n_conditions(),
                self.denoiser.in_channels
            )));
        }

        if self.sample.batch_slices == 0 {
            return Err(SynthError::Config("sample.batch_slices must be ≥ 1".into()));
        }
        if self.sample.eta < 0.0 {
            return Err(SynthError::Config(format!(
                "sample.eta must be ≥ 0, got {}",
                self.sample.eta
            )));
        }
        if self.evaluate.correction_m == 0 {
            return Err(SynthError::Config("evaluate.correction_m must be ≥ 1".into()));
        }
        let known = ["psnr", "ssim", "dice", "icc", "rve", "tests"];
        for m in &self.evaluate.metric_set {
            if !known.contains(&m.as_str()) {
                return Err(SynthError::Config(format!(
                    "unknown metric {m:?}; known: {known:?}"
                )));
            }
        }

        let p = &self.phantom;
        if p.n_subjects == 0 || p.n_test >= p.n_subjects {
            return Err(SynthError::Config(format!(
                "phantom split invalid: {} subjects with {} held out",
                p.n_subjects, p.n_test
            )));
        }
        if p.n_structures == 0 || p.n_structures > 5 {
            return Err(SynthError::Config(format!(
                "phantom.n_structures must be 1..=5, got {}",
                p.n_structures
            )));
        }
        let (gx, gy, gz) = p.grid;
        if gx < 32 || gy < 32 || gz < 32 {
            return Err(SynthError::Config(format!(
                "phantom.grid must be ≥ 32 per axis, got {:?}",
                p.grid
            )));
        }
        Ok(())
    }

    /// Does the evaluate stage include this metric family?
    pub fn wants_metric(&self, name: &str) -> bool {
        self.evaluate.metric_set.iter().any(|m| m == name)
    }
}

/// Worker count for subject-level parallelism: the `SYNTH_WORKERS`
/// environment variable when set (≥ 1), otherwise the machine's available
/// parallelism.
pub fn worker_count() -> usize {
    if let Ok(v) = std::env::var("SYNTH_WORKERS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_desk_preset() {
        let cfg = RunConfig::from_str("").unwrap();
        assert_eq!(cfg.pipeline.channel_set, ChannelSet::Mgre5);
        assert_eq!(cfg.pipeline.target_shape, (64, 64, 48));
        assert_eq!(cfg.denoiser.in_channels, 6);
        assert_eq!(cfg.schedule.t_virtual, 1000);
        assert_eq!(cfg.schedule.k, 100);
        assert!(cfg.sample.use_ema);
        assert_eq!(cfg.evaluate.correction_m, 20);
        assert_eq!(cfg.phantom.n_subjects, 40);
        assert!(cfg.wants_metric("psnr") && cfg.wants_metric("tests"));
        assert!(!cfg.wants_metric("nope"));
    }

    #[test]
    fn partial_file_overrides_only_named_fields() {
        let cfg = RunConfig::from_str(
            "[schedule]\nk = 10\n\n[phantom]\nn_subjects = 6\nn_test = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.schedule.k, 10);
        assert_eq!(cfg.schedule.t_virtual, 1000);
        assert_eq!(cfg.phantom.n_subjects, 6);
        assert_eq!(cfg.train.batch_size, crate::trainer::TrainConfig::default().batch_size);
    }

    #[test]
    fn channel_set_names_and_widths() {
        let cfg = RunConfig::from_str(
            "[pipeline]\nchannel_set = \"mgre5+qsm+r2star\"\n\n[denoiser]\nin_channels = 8\n",
        )
        .unwrap();
        assert_eq!(cfg.pipeline.channel_set, ChannelSet::Mgre5QsmR2star);
        assert_eq!(cfg.pipeline.channel_set.n_conditions(), 7);
        assert_eq!(
            cfg.pipeline.channel_set.tags(),
            ["echo1", "echo2", "echo3", "echo4", "echo5", "qsm", "r2star"]
        );
        assert_eq!(ChannelSet::Mgre5.tags().len(), 5);
    }

    #[test]
    fn validation_catches_cross_field_mismatches() {
        // Channel set width must match the model input width.
        let err = RunConfig::from_str("[pipeline]\nchannel_set = \"mgre5+qsm+r2star\"\n");
        assert!(matches!(err, Err(SynthError::Config(_))));

        // x/y must match the model image size.
        let err = RunConfig::from_str("[pipeline]\ntarget_shape = [32, 32, 48]\n");
        assert!(matches!(err, Err(SynthError::Config(_))));

        // Held-out count must leave training subjects.
        let err = RunConfig::from_str("[phantom]\nn_subjects = 4\nn_test = 4\n");
        assert!(matches!(err, Err(SynthError::Config(_))));

        // Unknown metric name.
        let err = RunConfig::from_str("[evaluate]\nmetric_set = [\"psnrr\"]\n");
        assert!(matches!(err, Err(SynthError::Config(_))));

        // Malformed TOML is a config error, not a panic.
        let err = RunConfig::from_str("[pipeline\nchannel_set = !");
        assert!(matches!(err, Err(SynthError::Config(_))));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.schedule.k = 20;
        cfg.train.total_iterations = 500;
        cfg.paths.raw_dir = "elsewhere/raw".into();
        let text = toml::to_string(&cfg).unwrap();
        let back = RunConfig::from_str(&text).unwrap();
        assert_eq!(back.schedule.k, 20);
        assert_eq!(back.train.total_iterations, 500);
        assert_eq!(back.paths.raw_dir, PathBuf::from("elsewhere/raw"));
    }

    #[test]
    fn worker_count_env_override() {
        std::env::set_var("SYNTH_WORKERS", "3");
        assert_eq!(worker_count(), 3);
        std::env::set_var("SYNTH_WORKERS", "0");
        assert!(worker_count() >= 1); // invalid values fall back
        std::env::set_var("SYNTH_WORKERS", "junk");
        assert!(worker_count() >= 1);
        std::env::remove_var("SYNTH_WORKERS");
        assert!(worker_count() >= 1);
    }
}
