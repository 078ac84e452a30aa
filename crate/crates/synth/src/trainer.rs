//! Optimization loop for the noise predictor: antithetic timestep
//! sampling, the noise-MSE objective, Adam updates with EMA weight
//! tracking, periodic checkpointing, and exact resume.
//!
//! Every stochastic draw of iteration `i` comes from `rng_for(seed, "iter",
//! i)` and the data order from per-epoch permutations, so a run is a pure
//! function of `(weights, dataset, schedule, config, seed)` and resuming
//! from a checkpoint replays the identical stream.

use crate::datapipe::dataset::{SliceDataset, SliceSample};
use crate::denoiser::{save_checkpoint, Denoiser};
use crate::error::{Result, SynthError};
use crate::nn::adam::{ema_update, Adam};
use crate::nn::Float;
use crate::rng::rng_for;
use crate::schedule::{NoisePredictor, NoiseSchedule};
use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use std::io::Write;
use std::path::Path;

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub total_iterations: u64,
    pub ema_decay: f64,
    pub checkpoint_interval: u64,
    /// Loss rows are averaged over and emitted every this many iterations.
    pub log_interval: u64,
    /// Global gradient-norm clip; off by default (the reference setup does
    /// not clip).
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            batch_size: 8,
            total_iterations: 20_000,
            ema_decay: 0.999,
            checkpoint_interval: 5_000,
            log_interval: 100,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(SynthError::Config(format!(
                "batch_size must be positive and even (antithetic pairing), got {}",
                self.batch_size
            )));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(SynthError::Config(format!(
                "ema_decay must lie in (0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(SynthError::Config("learning_rate must be positive".into()));
        }
        if self.total_iterations == 0 || self.checkpoint_interval == 0 || self.log_interval == 0
        {
            return Err(SynthError::Config(
                "iteration counts and intervals must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Draw antithetic timestep positions over the subsampled sequence: the
/// first half uniform on `{0..k-1}`, the second half the elementwise
/// complement `k-1-i`, paired in order.
pub fn antithetic_timesteps<R: Rng>(
    batch_size: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(SynthError::Parameter(format!(
            "antithetic sampling needs an even batch, got {batch_size}"
        )));
    }
    if k == 0 {
        return Err(SynthError::Parameter("k must be ≥ 1".into()));
    }
    let half = batch_size / 2;
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..half {
        out.push(rng.gen_range(0..k));
    }
    for j in 0..half {
        out.push(k - 1 - out[j]);
    }
    Ok(out)
}

/// Noise-MSE loss for explicit draws: mean over batch and pixels of
/// ‖ε − ε_θ(√ᾱ_t·x0 + √(1−ᾱ_t)·ε, c, t)‖². Pure in its inputs; the
/// gradient-producing path in [`train`] computes the same quantity.
pub fn loss_given<F: Float, P: NoisePredictor<F>>(
    predictor: &P,
    batch: &[SliceSample],
    schedule: &NoiseSchedule,
    ts: &[usize],
    eps: &[Array2<f64>],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(SynthError::Data("empty batch".into()));
    }
    if ts.len() != batch.len() || eps.len() != batch.len() {
        return Err(SynthError::Parameter(
            "one timestep and one noise draw per sample required".into(),
        ));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ((s, &t), e) in batch.iter().zip(ts).zip(eps) {
        let (c, h, w) = s.conditions.dim();
        if s.target.dim() != (h, w) || e.dim() != (h, w) {
            return Err(SynthError::Shape(
                "target/noise shape does not match conditions".into(),
            ));
        }
        let ab = schedule.alpha_bar_at(t);
        let (c0, c1) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut x_cat = ndarray::Array3::<F>::zeros((c + 1, h, w));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    x_cat[[ch, y, x]] = F::from_f64(s.conditions[[ch, y, x]] as f64);
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let x0 = s.target[[y, x]] as f64;
                x_cat[[c, y, x]] = F::from_f64(c0 * x0 + c1 * e[[y, x]]);
            }
        }
        let pred = predictor.predict(&x_cat, t)?;
        for y in 0..h {
            for x in 0..w {
                let d = e[[y, x]] - pred[[y, x]].to_f64();
                total += d * d;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Noise-MSE loss with timesteps and noise drawn from `rng` (antithetic
/// positions mapped through tau, i.i.d. standard-normal ε).
pub fn training_loss<F: Float, P: NoisePredictor<F>>(
    predictor: &P,
    batch: &[SliceSample],
    schedule: &NoiseSchedule,
    rng: &mut ChaCha20Rng,
) -> Result<f64> {
    let positions = antithetic_timesteps(batch.len(), schedule.k(), rng)?;
    let ts: Vec<usize> = positions.iter().map(|&p| schedule.tau_at(p)).collect();
    let eps: Vec<Array2<f64>> = batch
        .iter()
        .map(|s| {
            let (h, w) = s.target.dim();
            Array2::from_shape_fn((h, w), |_| rng.sample::<f64, _>(StandardNormal))
        })
        .collect();
    loss_given(predictor, batch, schedule, &ts, &eps)
}

/// One averaged row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub iteration: u64,
    pub loss: f64,
    pub ema_loss: f64,
}

/// Deterministic per-epoch data order: position `p` in the infinite sample
/// stream maps to `perm(p / n)[p % n]`.
pub(crate) struct EpochOrder {
    seed: u64,
    n: usize,
    epoch: u64,
    perm: Vec<usize>,
}

impl EpochOrder {
    pub(crate) fn new(seed: u64, n: usize) -> Self {
        let mut s = Self {
            seed,
            n,
            epoch: u64::MAX,
            perm: Vec::new(),
        };
        s.load_epoch(0);
        s
    }

    fn load_epoch(&mut self, epoch: u64) {
        if self.epoch == epoch {
            return;
        }
        let mut rng = rng_for(self.seed, "epoch", epoch);
        let mut perm: Vec<usize> = (0..self.n).collect();
        // Fisher–Yates.
        for i in (1..self.n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        self.epoch = epoch;
        self.perm = perm;
    }

    pub(crate) fn index_at(&mut self, position: u64) -> usize {
        self.load_epoch(position / self.n as u64);
        self.perm[(position % self.n as u64) as usize]
    }
}

/// Run the optimization loop from `d.state.step` to
/// `cfg.total_iterations`, writing checkpoints under `out_dir` (numbered
/// every `checkpoint_interval`, plus `final`) and appending averaged loss
/// rows to `out_dir/loss.csv`. Returns the rows written.
pub fn train<F: Float>(
    d: &mut Denoiser<F>,
    adam: &mut Adam<F>,
    dataset: &SliceDataset,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    let c = dataset.n_channels();
    if c + 1 != d.net.spec.in_channels {
        return Err(SynthError::Config(format!(
            "dataset provides {c} condition channels, model expects {} total",
            d.net.spec.in_channels
        )));
    }
    if dataset.is_empty() {
        return Err(SynthError::Data("training dataset is empty".into()));
    }
    if d.state.step >= cfg.total_iterations {
        return Err(SynthError::Parameter(format!(
            "checkpoint is already at step {} ≥ total_iterations {}",
            d.state.step, cfg.total_iterations
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("loss.csv");
    let mut csv = if d.state.step > 0 && csv_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&csv_path)?
    } else {
        let mut f = std::fs::File::create(&csv_path)?;
        writeln!(f, "iteration,loss,ema_loss")?;
        f
    };

    let (h, w) = (dataset.height, dataset.width);
    let b = cfg.batch_size;
    let mut order = EpochOrder::new(seed, dataset.len());
    let mut rows = Vec::new();
    let mut window_sum = 0.0f64;
    let mut window_n = 0u64;
    let mut ema_loss = f64::NAN;

    for i in d.state.step..cfg.total_iterations {
        let mut rng = rng_for(seed, "iter", i);
        let positions = antithetic_timesteps(b, schedule.k(), &mut rng)?;
        let ts: Vec<usize> = positions.iter().map(|&p| schedule.tau_at(p)).collect();

        // Assemble conditions ⊕ diffused target, and the ε regression target.
        let mut x_cat = Array4::<F>::zeros((b, c + 1, h, w));
        let mut eps = Array4::<F>::zeros((b, 1, h, w));
        for k in 0..b {
            let idx = order.index_at(i * b as u64 + k as u64);
            let s = dataset.get(idx);
            let ab = schedule.alpha_bar_at(ts[k]);
            let (c0, c1) = (ab.sqrt(), (1.0 - ab).sqrt());
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        x_cat[[k, ch, y, x]] = F::from_f64(s.conditions[[ch, y, x]] as f64);
                    }
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let e: f64 = rng.sample(StandardNormal);
                    eps[[k, 0, y, x]] = F::from_f64(e);
                    x_cat[[k, c, y, x]] =
                        F::from_f64(c0 * s.target[[y, x]] as f64 + c1 * e);
                }
            }
        }

        let step_result = (|| -> Result<f64> {
            let (y, tape) = d.net.forward(&d.state.raw, &x_cat, Some(&ts))?;
            let n_elems = (b * h * w) as f64;
            let mut loss = 0.0f64;
            let mut dy = Array4::<F>::zeros(y.raw_dim());
            ndarray::Zip::from(&mut dy).and(&y).and(&eps).for_each(|g, &p, &e| {
                let diff = p.to_f64() - e.to_f64();
                loss += diff * diff;
                *g = F::from_f64(2.0 * diff / n_elems);
            });
            loss /= n_elems;
            if !loss.is_finite() {
                return Err(SynthError::Numeric(format!(
                    "non-finite loss at iteration {i}"
                )));
            }
            d.state.raw.zero_grads();
            d.net.backward(&mut d.state.raw, tape, &dy)?;
            if let Some(clip) = cfg.grad_clip {
                let norm = d.state.raw.grad_norm();
                if norm > clip {
                    d.state.raw.scale_grads(F::from_f64(clip / norm));
                }
            }
            adam.step(&mut d.state.raw);
            ema_update(&mut d.state.ema, &d.state.raw, cfg.ema_decay);
            Ok(loss)
        })();

        let loss = match step_result {
            Ok(l) => l,
            Err(e) => {
                // Leave the evidence behind before surfacing the failure.
                let _ = save_checkpoint(
                    &out_dir.join("diagnostic"),
                    &d.config,
                    &d.state,
                    Some(adam),
                );
                return Err(e);
            }
        };

        d.state.step = i + 1;
        window_sum += loss;
        window_n += 1;
        ema_loss = if ema_loss.is_nan() {
            loss
        } else {
            0.99 * ema_loss + 0.01 * loss
        };

        if d.state.step % cfg.log_interval == 0 || d.state.step == cfg.total_iterations {
            let row = LossRow {
                iteration: d.state.step,
                loss: window_sum / window_n as f64,
                ema_loss,
            };
            writeln!(csv, "{},{},{}", row.iteration, row.loss, row.ema_loss)?;
            rows.push(row);
            window_sum = 0.0;
            window_n = 0;
        }
        if d.state.step % cfg.checkpoint_interval == 0 {
            let name = format!("ckpt-{:07}", d.state.step);
            save_checkpoint(&out_dir.join(name), &d.config, &d.state, Some(adam))?;
        }
    }

    save_checkpoint(&out_dir.join("final"), &d.config, &d.state, Some(adam))?;
    Ok(rows)
}
