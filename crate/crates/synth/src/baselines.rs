//! Comparison methods trained on the same slice stacks as the diffusion
//! model: a direct-regression U-Net with L1 loss, and a conditional GAN in
//! the Pix2Pix mold (patch discriminator, combined L1 + adversarial
//! objective).
//!
//! Both reuse the denoiser backbone — minus the noisy input channel and the
//! timestep pathway — so method comparisons isolate the objective, not the
//! architecture.

use crate::datapipe::dataset::SliceDataset;
use crate::denoiser::{
    load_adam_blobs, read_param_blob, save_adam_blobs, write_param_blob, AdamMeta,
    DenoiserConfig,
};
use crate::error::{Result, SynthError};
use crate::nn::adam::Adam;
use crate::nn::im2col::conv_out_len;
use crate::nn::layers::{leaky_relu, leaky_relu_backward, Conv2d, GroupNorm, GroupNormStats, Init};
use crate::nn::unet::{ArchSpec, UNet};
use crate::nn::{Float, ParamStore};
use crate::rng::rng_for;
use crate::trainer::{EpochOrder, LossRow, TrainConfig};
use ndarray::{concatenate, s, Array4, Axis};
use std::io::Write;
use std::path::Path;

const LEAKY_SLOPE: f64 = 0.2;
/// GroupNorm group count inside the discriminator; `disc_channels` must be
/// a multiple of this so every realized width divides evenly.
const DISC_NORM_GROUPS: usize = 8;

/// Adversarial objective variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanLossKind {
    LeastSquares,
    CrossEntropy,
}

/// Conditional-GAN hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GanConfig {
    /// λ weighting the L1 term against the adversarial term.
    pub l1_weight: f64,
    pub disc_channels: usize,
    /// Number of strided discriminator layers before the patch head.
    pub disc_layers: usize,
    pub gan_loss_kind: GanLossKind,
    /// Switch for the adversarial term; off reduces the generator update to
    /// the plain L1 step.
    pub adversarial: bool,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            l1_weight: 100.0,
            disc_channels: 32,
            disc_layers: 3,
            gan_loss_kind: GanLossKind::LeastSquares,
            adversarial: true,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l1_weight > 0.0) {
            return Err(SynthError::Config(format!(
                "l1_weight must be positive, got {}",
                self.l1_weight
            )));
        }
        if self.disc_layers == 0 {
            return Err(SynthError::Config("disc_layers must be ≥ 1".into()));
        }
        if self.disc_channels == 0 || self.disc_channels % DISC_NORM_GROUPS != 0 {
            return Err(SynthError::Config(format!(
                "disc_channels must be a positive multiple of {DISC_NORM_GROUPS}, got {}",
                self.disc_channels
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// Regression network plus its weights and iteration counter. `config`
/// describes the shared backbone; the realized network takes
/// `config.in_channels - 1` inputs (conditions only) and no timesteps.
pub struct Generator<F: Float> {
    pub config: DenoiserConfig,
    pub net: UNet,
    pub ps: ParamStore<F>,
    pub step: u64,
}

/// The backbone spec with the noisy channel and timestep pathway removed.
pub fn generator_spec(config: &DenoiserConfig) -> ArchSpec {
    let mut spec = config.arch_spec();
    spec.in_channels = config.in_channels - 1;
    spec.time_embed = false;
    spec
}

pub fn build_generator<F: Float>(config: DenoiserConfig, seed: u64) -> Result<Generator<F>> {
    config.validate()?;
    let mut ps = ParamStore::<F>::new();
    let mut rng = rng_for(seed, "generator-init", 0);
    let net = UNet::build(generator_spec(&config), &mut ps, &mut rng)?;
    Ok(Generator {
        config,
        net,
        ps,
        step: 0,
    })
}

// ---------------------------------------------------------------------------
// Patch discriminator
// ---------------------------------------------------------------------------

struct DiscLayer {
    conv: Conv2d,
    norm: Option<GroupNorm>,
}

/// Strided convolution pyramid scoring overlapping patches: each head
/// output judges one receptive field rather than the whole image.
pub struct PatchDisc {
    layers: Vec<DiscLayer>,
    head: Conv2d,
    pub in_channels: usize,
}

struct DiscLayerCtx<F: Float> {
    x: Array4<F>,
    conv_out: Array4<F>,
    stats: Option<GroupNormStats<F>>,
    pre_act: Array4<F>,
}

pub struct DiscTape<F: Float> {
    layers: Vec<DiscLayerCtx<F>>,
    head_x: Array4<F>,
}

impl PatchDisc {
    fn build<F: Float, R: rand::Rng>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        in_channels: usize,
        cfg: &GanConfig,
    ) -> Self {
        let mut layers = Vec::with_capacity(cfg.disc_layers);
        let mut cur = in_channels;
        for i in 0..cfg.disc_layers {
            // Width doubles per level, capped at 8×, per the usual
            // patch-discriminator schedule.
            let out = cfg.disc_channels * (1usize << i).min(8);
            let conv = Conv2d::new(
                ps,
                rng,
                &format!("disc.l{i}.conv"),
                cur,
                out,
                4,
                2,
                1,
                Init::FanIn,
            );
            // The first layer is norm-free so raw intensities stay visible.
            let norm = (i > 0)
                .then(|| GroupNorm::new(ps, &format!("disc.l{i}.norm"), out, DISC_NORM_GROUPS));
            layers.push(DiscLayer { conv, norm });
            cur = out;
        }
        let head = Conv2d::new(ps, rng, "disc.head", cur, 1, 4, 1, 1, Init::FanIn);
        Self {
            layers,
            head,
            in_channels,
        }
    }

    fn check_input<F: Float>(&self, x: &Array4<F>) -> Result<()> {
        let (_n, c, mut h, mut w) = x.dim();
        if c != self.in_channels {
            return Err(SynthError::Config(format!(
                "discriminator input has {c} channels, expected {}",
                self.in_channels
            )));
        }
        for _ in 0..self.layers.len() {
            if h < 2 || w < 2 {
                return Err(SynthError::Config(format!(
                    "discriminator is too deep for {h}x{w} feature maps"
                )));
            }
            h = conv_out_len(h, 4, 2, 1);
            w = conv_out_len(w, 4, 2, 1);
        }
        if h < 2 || w < 2 {
            return Err(SynthError::Config(format!(
                "discriminator head needs ≥ 2x2 feature maps, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Patch-score map `(n, 1, h', w')` plus the activation tape.
    pub fn forward<F: Float>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
    ) -> Result<(Array4<F>, DiscTape<F>)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut ctxs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let conv_out = layer.conv.forward(ps, &h);
            let (pre_act, stats) = match &layer.norm {
                Some(gn) => {
                    let (y, st) = gn.forward(ps, &conv_out);
                    (y, Some(st))
                }
                None => (conv_out.clone(), None),
            };
            let y = leaky_relu(&pre_act, LEAKY_SLOPE);
            ctxs.push(DiscLayerCtx {
                x: h,
                conv_out,
                stats,
                pre_act,
            });
            h = y;
        }
        let y = self.head.forward(ps, &h);
        Ok((
            y,
            DiscTape {
                layers: ctxs,
                head_x: h,
            },
        ))
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward<F: Float>(
        &self,
        ps: &mut ParamStore<F>,
        tape: DiscTape<F>,
        dy: &Array4<F>,
    ) -> Array4<F> {
        let mut dh = self.head.backward(ps, &tape.head_x, dy);
        for (layer, ctx) in self.layers.iter().zip(tape.layers).rev() {
            let d_pre = leaky_relu_backward(&ctx.pre_act, &dh, LEAKY_SLOPE);
            let d_conv = match (&layer.norm, &ctx.stats) {
                (Some(gn), Some(stats)) => gn.backward(ps, &ctx.conv_out, stats, &d_pre),
                _ => d_pre,
            };
            dh = layer.conv.backward(ps, &ctx.x, &d_conv);
        }
        dh
    }
}

/// Discriminator network plus its weights.
pub struct Discriminator<F: Float> {
    pub net: PatchDisc,
    pub ps: ParamStore<F>,
}

/// `in_channels` counts conditions + the judged candidate; for a backbone
/// config this equals `config.in_channels`.
pub fn build_discriminator<F: Float>(
    in_channels: usize,
    cfg: &GanConfig,
    seed: u64,
) -> Result<Discriminator<F>> {
    cfg.validate()?;
    if in_channels < 2 {
        return Err(SynthError::Config(
            "discriminator needs ≥ 1 condition channel plus the candidate".into(),
        ));
    }
    let mut ps = ParamStore::<F>::new();
    let mut rng = rng_for(seed, "disc-init", 0);
    let net = PatchDisc::build(&mut ps, &mut rng, in_channels, cfg);
    Ok(Discriminator { net, ps })
}

// ---------------------------------------------------------------------------
// Training steps
// ---------------------------------------------------------------------------

/// Mean absolute error over the batch and one Adam step on the generator.
pub fn l1_train_step<F: Float>(
    gen: &mut Generator<F>,
    adam: &mut Adam<F>,
    x: &Array4<F>,
    t: &Array4<F>,
) -> Result<f64> {
    let (b, _c, h, w) = x.dim();
    if t.dim() != (b, 1, h, w) {
        return Err(SynthError::Shape(format!(
            "target shape {:?} does not match batch ({b}, 1, {h}, {w})",
            t.dim()
        )));
    }
    let (y, tape) = gen.net.forward(&gen.ps, x, None)?;
    let n = (b * h * w) as f64;
    let mut loss = 0.0f64;
    let mut dy = Array4::<F>::zeros(y.raw_dim());
    ndarray::Zip::from(&mut dy).and(&y).and(t).for_each(|g, &p, &tv| {
        let d = p.to_f64() - tv.to_f64();
        loss += d.abs();
        *g = F::from_f64(l1_subgrad(d) / n);
    });
    loss /= n;
    if !loss.is_finite() {
        return Err(SynthError::Numeric("non-finite L1 loss".into()));
    }
    gen.ps.zero_grads();
    gen.net.backward(&mut gen.ps, tape, &dy)?;
    adam.step(&mut gen.ps);
    gen.step += 1;
    Ok(loss)
}

/// Losses of one alternating GAN step. `l1` is the unweighted L1 component
/// inside `gen_loss`.
#[derive(Debug, Clone, Copy)]
pub struct PixLosses {
    pub gen_loss: f64,
    pub disc_loss: f64,
    pub l1: f64,
}

/// One alternating update: discriminator on a real/fake pair, then
/// generator on adversarial + λ·L1, both through a freshly scored fake.
/// With `cfg.adversarial` off this is exactly [`l1_train_step`].
#[allow(clippy::too_many_arguments)]
pub fn pix2pix_train_step<F: Float>(
    gen: &mut Generator<F>,
    gen_adam: &mut Adam<F>,
    disc: &mut Discriminator<F>,
    disc_adam: &mut Adam<F>,
    x: &Array4<F>,
    t: &Array4<F>,
    cfg: &GanConfig,
) -> Result<PixLosses> {
    if !cfg.adversarial {
        let l1 = l1_train_step(gen, gen_adam, x, t)?;
        return Ok(PixLosses {
            gen_loss: l1,
            disc_loss: 0.0,
            l1,
        });
    }
    let (b, c, h, w) = x.dim();
    if t.dim() != (b, 1, h, w) {
        return Err(SynthError::Shape(format!(
            "target shape {:?} does not match batch ({b}, 1, {h}, {w})",
            t.dim()
        )));
    }
    if c + 1 != disc.net.in_channels {
        return Err(SynthError::Config(format!(
            "discriminator expects {} channels, conditions give {}",
            disc.net.in_channels,
            c + 1
        )));
    }

    let (fake, gen_tape) = gen.net.forward(&gen.ps, x, None)?;

    // Discriminator update; the fake branch is treated as a constant (its
    // input gradient is discarded, so nothing reaches the generator).
    let real_in = concatenate(Axis(1), &[x.view(), t.view()]).expect("concat");
    let fake_in = concatenate(Axis(1), &[x.view(), fake.view()]).expect("concat");
    let (d_real, tape_r) = disc.net.forward(&disc.ps, &real_in)?;
    let (d_fake, tape_f) = disc.net.forward(&disc.ps, &fake_in)?;
    let n_patch = d_real.len() as f64;

    let mut disc_loss = 0.0f64;
    let mut dz_real = Array4::<F>::zeros(d_real.raw_dim());
    let mut dz_fake = Array4::<F>::zeros(d_fake.raw_dim());
    match cfg.gan_loss_kind {
        GanLossKind::LeastSquares => {
            // ½·mean((D(real)−1)²) + ½·mean(D(fake)²)
            ndarray::Zip::from(&mut dz_real).and(&d_real).for_each(|g, &z| {
                let z = z.to_f64();
                disc_loss += 0.5 * (z - 1.0) * (z - 1.0) / n_patch;
                *g = F::from_f64((z - 1.0) / n_patch);
            });
            ndarray::Zip::from(&mut dz_fake).and(&d_fake).for_each(|g, &z| {
                let z = z.to_f64();
                disc_loss += 0.5 * z * z / n_patch;
                *g = F::from_f64(z / n_patch);
            });
        }
        GanLossKind::CrossEntropy => {
            // ½·[BCE(D(real), 1) + BCE(D(fake), 0)] on logits.
            ndarray::Zip::from(&mut dz_real).and(&d_real).for_each(|g, &z| {
                let z = z.to_f64();
                disc_loss += 0.5 * softplus(-z) / n_patch;
                *g = F::from_f64(0.5 * (sigmoid_f64(z) - 1.0) / n_patch);
            });
            ndarray::Zip::from(&mut dz_fake).and(&d_fake).for_each(|g, &z| {
                let z = z.to_f64();
                disc_loss += 0.5 * softplus(z) / n_patch;
                *g = F::from_f64(0.5 * sigmoid_f64(z) / n_patch);
            });
        }
    }
    if !disc_loss.is_finite() {
        return Err(SynthError::Numeric("non-finite discriminator loss".into()));
    }
    disc.ps.zero_grads();
    disc.net.backward(&mut disc.ps, tape_r, &dz_real);
    disc.net.backward(&mut disc.ps, tape_f, &dz_fake);
    disc_adam.step(&mut disc.ps);

    // Generator update through the freshly updated discriminator.
    let fake_in2 = concatenate(Axis(1), &[x.view(), fake.view()]).expect("concat");
    let (d_fake2, tape_f2) = disc.net.forward(&disc.ps, &fake_in2)?;
    let mut adv_loss = 0.0f64;
    let mut dz = Array4::<F>::zeros(d_fake2.raw_dim());
    match cfg.gan_loss_kind {
        GanLossKind::LeastSquares => {
            // mean((D(fake)−1)²)
            ndarray::Zip::from(&mut dz).and(&d_fake2).for_each(|g, &z| {
                let z = z.to_f64();
                adv_loss += (z - 1.0) * (z - 1.0) / n_patch;
                *g = F::from_f64(2.0 * (z - 1.0) / n_patch);
            });
        }
        GanLossKind::CrossEntropy => {
            // BCE(D(fake), 1)
            ndarray::Zip::from(&mut dz).and(&d_fake2).for_each(|g, &z| {
                let z = z.to_f64();
                adv_loss += softplus(-z) / n_patch;
                *g = F::from_f64((sigmoid_f64(z) - 1.0) / n_patch);
            });
        }
    }
    let dx_disc = disc.net.backward(&mut disc.ps, tape_f2, &dz);
    // That pass polluted the discriminator's gradients; it only optimizes
    // during its own half-step above.
    disc.ps.zero_grads();

    let n = (b * h * w) as f64;
    let mut l1 = 0.0f64;
    let mut dfake = dx_disc.slice(s![.., c..c + 1, .., ..]).to_owned();
    ndarray::Zip::from(&mut dfake).and(&fake).and(t).for_each(|g, &p, &tv| {
        let d = p.to_f64() - tv.to_f64();
        l1 += d.abs();
        *g = *g + F::from_f64(cfg.l1_weight * l1_subgrad(d) / n);
    });
    l1 /= n;
    let gen_loss = adv_loss + cfg.l1_weight * l1;
    if !gen_loss.is_finite() {
        return Err(SynthError::Numeric("non-finite generator loss".into()));
    }
    gen.ps.zero_grads();
    gen.net.backward(&mut gen.ps, gen_tape, &dfake)?;
    gen_adam.step(&mut gen.ps);
    gen.step += 1;

    Ok(PixLosses {
        gen_loss,
        disc_loss,
        l1,
    })
}

/// d|d|/dd with the subgradient 0 at the kink (`signum` would give ±1 for
/// signed zero).
fn l1_subgrad(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sigmoid_f64(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Numerically stable `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Flags a discriminator that has effectively won: its loss staying below
/// `threshold` for `needed` consecutive steps starves the generator of
/// gradient signal.
pub(crate) struct SaturationMonitor {
    threshold: f64,
    needed: u64,
    run: u64,
    fired: bool,
}

impl SaturationMonitor {
    pub(crate) fn new(threshold: f64, needed: u64) -> Self {
        Self {
            threshold,
            needed,
            run: 0,
            fired: false,
        }
    }

    pub(crate) fn observe(&mut self, disc_loss: f64, iteration: u64) -> Option<String> {
        if disc_loss < self.threshold {
            self.run += 1;
            if self.run >= self.needed && !self.fired {
                self.fired = true;
                return Some(format!(
                    "discriminator saturated: loss < {} for {} consecutive steps (iteration {})",
                    self.threshold, self.needed, iteration
                ));
            }
        } else {
            self.run = 0;
        }
        None
    }
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

/// Which baseline a checkpoint directory holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    UnetL1,
    Pix2pix,
}

/// Averaged loss rows plus per-row GAN components and any warning events.
pub struct BaselineReport {
    pub rows: Vec<LossRow>,
    /// Per-row averaged discriminator loss (empty for the L1 baseline).
    pub disc: Vec<f64>,
    /// Per-row averaged unweighted L1 component (equals `rows` loss for the
    /// L1 baseline).
    pub l1: Vec<f64>,
    pub warnings: Vec<String>,
}

fn assemble_batch<F: Float>(
    ds: &SliceDataset,
    order: &mut EpochOrder,
    iteration: u64,
    b: usize,
) -> (Array4<F>, Array4<F>) {
    let c = ds.n_channels();
    let (h, w) = (ds.height, ds.width);
    let mut x = Array4::<F>::zeros((b, c, h, w));
    let mut t = Array4::<F>::zeros((b, 1, h, w));
    for k in 0..b {
        let s = ds.get(order.index_at(iteration * b as u64 + k as u64));
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    x[[k, ch, yy, xx]] = F::from_f64(s.conditions[[ch, yy, xx]] as f64);
                }
            }
        }
        for yy in 0..h {
            for xx in 0..w {
                t[[k, 0, yy, xx]] = F::from_f64(s.target[[yy, xx]] as f64);
            }
        }
    }
    (x, t)
}

/// Shared loop scaffolding: epoch-shuffled batches, averaged loss rows,
/// numbered checkpoints plus `final`, and a CSV that mirrors the diffusion
/// trainer's (with two extra columns for the GAN components).
fn run_baseline_loop<F: Float>(
    kind: BaselineKind,
    gen: &mut Generator<F>,
    gen_adam: &mut Adam<F>,
    mut disc: Option<(&mut Discriminator<F>, &mut Adam<F>)>,
    gan: Option<&GanConfig>,
    dataset: &SliceDataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<BaselineReport> {
    cfg.validate()?;
    if let Some(g) = gan {
        g.validate()?;
    }
    let c = dataset.n_channels();
    if c + 1 != gen.config.in_channels {
        return Err(SynthError::Config(format!(
            "dataset provides {c} condition channels, backbone expects {}",
            gen.config.in_channels - 1
        )));
    }
    if dataset.is_empty() {
        return Err(SynthError::Data("training dataset is empty".into()));
    }
    if gen.step >= cfg.total_iterations {
        return Err(SynthError::Parameter(format!(
            "checkpoint is already at step {} ≥ total_iterations {}",
            gen.step, cfg.total_iterations
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("loss.csv");
    let gan_columns = matches!(kind, BaselineKind::Pix2pix);
    let mut csv = if gen.step > 0 && csv_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&csv_path)?
    } else {
        let mut f = std::fs::File::create(&csv_path)?;
        if gan_columns {
            writeln!(f, "iteration,loss,ema_loss,disc_loss,l1")?;
        } else {
            writeln!(f, "iteration,loss,ema_loss")?;
        }
        f
    };

    let mut order = EpochOrder::new(seed, dataset.len());
    let mut report = BaselineReport {
        rows: Vec::new(),
        disc: Vec::new(),
        l1: Vec::new(),
        warnings: Vec::new(),
    };
    let mut saturation = SaturationMonitor::new(1e-6, 1000);
    let (mut win_loss, mut win_disc, mut win_l1, mut win_n) = (0.0f64, 0.0f64, 0.0f64, 0u64);
    let mut ema_loss = f64::NAN;

    let save = |dir: &Path,
                gen: &Generator<F>,
                gen_adam: &Adam<F>,
                disc: Option<&(&mut Discriminator<F>, &mut Adam<F>)>|
     -> Result<()> {
        save_baseline(
            dir,
            kind,
            gen,
            Some(gen_adam),
            gan,
            disc.map(|(d, _)| &**d),
            disc.map(|(_, a)| &**a),
        )
    };

    for i in gen.step..cfg.total_iterations {
        let (x, t) = assemble_batch::<F>(dataset, &mut order, i, cfg.batch_size);
        let step = match (&mut disc, gan) {
            (Some((d, da)), Some(g)) => {
                pix2pix_train_step(gen, gen_adam, d, da, &x, &t, g)
            }
            _ => l1_train_step(gen, gen_adam, &x, &t).map(|l1| PixLosses {
                gen_loss: l1,
                disc_loss: 0.0,
                l1,
            }),
        };
        let losses = match step {
            Ok(l) => l,
            Err(e) => {
                let _ = save(&out_dir.join("diagnostic"), gen, gen_adam, disc.as_ref());
                return Err(e);
            }
        };
        if gan_columns {
            if let Some(msg) = saturation.observe(losses.disc_loss, i + 1) {
                report.warnings.push(msg);
            }
        }

        win_loss += losses.gen_loss;
        win_disc += losses.disc_loss;
        win_l1 += losses.l1;
        win_n += 1;
        ema_loss = if ema_loss.is_nan() {
            losses.gen_loss
        } else {
            0.99 * ema_loss + 0.01 * losses.gen_loss
        };

        let step_now = i + 1;
        if step_now % cfg.log_interval == 0 || step_now == cfg.total_iterations {
            let row = LossRow {
                iteration: step_now,
                loss: win_loss / win_n as f64,
                ema_loss,
            };
            let (dl, l1) = (win_disc / win_n as f64, win_l1 / win_n as f64);
            if gan_columns {
                writeln!(csv, "{},{},{},{},{}", row.iteration, row.loss, row.ema_loss, dl, l1)?;
                report.disc.push(dl);
            } else {
                writeln!(csv, "{},{},{}", row.iteration, row.loss, row.ema_loss)?;
            }
            report.l1.push(l1);
            report.rows.push(row);
            (win_loss, win_disc, win_l1, win_n) = (0.0, 0.0, 0.0, 0);
        }
        if step_now % cfg.checkpoint_interval == 0 {
            let name = format!("ckpt-{step_now:07}");
            save(&out_dir.join(name), gen, gen_adam, disc.as_ref())?;
        }
    }

    save(&out_dir.join("final"), gen, gen_adam, disc.as_ref())?;
    Ok(report)
}

/// Train the L1 regression baseline.
pub fn train_l1<F: Float>(
    gen: &mut Generator<F>,
    adam: &mut Adam<F>,
    dataset: &SliceDataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<BaselineReport> {
    run_baseline_loop(
        BaselineKind::UnetL1,
        gen,
        adam,
        None,
        None,
        dataset,
        cfg,
        out_dir,
        seed,
    )
}

/// Train the conditional-GAN baseline.
#[allow(clippy::too_many_arguments)]
pub fn train_pix2pix<F: Float>(
    gen: &mut Generator<F>,
    gen_adam: &mut Adam<F>,
    disc: &mut Discriminator<F>,
    disc_adam: &mut Adam<F>,
    gan: &GanConfig,
    dataset: &SliceDataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<BaselineReport> {
    run_baseline_loop(
        BaselineKind::Pix2pix,
        gen,
        gen_adam,
        Some((disc, disc_adam)),
        Some(gan),
        dataset,
        cfg,
        out_dir,
        seed,
    )
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct BaselineMeta {
    kind: BaselineKind,
    step: u64,
    dtype: String,
    gen_adam: Option<AdamMeta>,
    disc_adam: Option<AdamMeta>,
    gan: Option<GanConfig>,
}

/// Persist a baseline checkpoint directory: backbone `config.toml`,
/// generator (and optional discriminator) weights and optimizer blobs, and
/// a `baseline.json` marker that distinguishes these directories from
/// diffusion checkpoints.
pub fn save_baseline<F: Float>(
    dir: &Path,
    kind: BaselineKind,
    gen: &Generator<F>,
    gen_adam: Option<&Adam<F>>,
    gan: Option<&GanConfig>,
    disc: Option<&Discriminator<F>>,
    disc_adam: Option<&Adam<F>>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let cfg = toml::to_string_pretty(&gen.config)
        .map_err(|e| SynthError::Config(format!("config encode: {e}")))?;
    std::fs::write(dir.join("config.toml"), cfg)?;
    write_param_blob(&dir.join("gen.bin"), &gen.ps.clone_values())?;
    if let Some(a) = gen_adam {
        save_adam_blobs(dir, "gen_adam", a)?;
    }
    if let Some(d) = disc {
        write_param_blob(&dir.join("disc.bin"), &d.ps.clone_values())?;
    }
    if let Some(a) = disc_adam {
        save_adam_blobs(dir, "disc_adam", a)?;
    }
    let meta = BaselineMeta {
        kind,
        step: gen.step,
        dtype: F::DTYPE.to_string(),
        gen_adam: gen_adam.map(AdamMeta::of),
        disc_adam: disc_adam.map(AdamMeta::of),
        gan: gan.cloned(),
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| SynthError::Data(format!("state encode: {e}")))?;
    std::fs::write(dir.join("baseline.json"), json)?;
    Ok(())
}

/// Everything a baseline checkpoint restores.
pub struct LoadedBaseline<F: Float> {
    pub kind: BaselineKind,
    pub gen: Generator<F>,
    pub gen_adam: Option<Adam<F>>,
    pub gan: Option<GanConfig>,
    pub disc: Option<Discriminator<F>>,
    pub disc_adam: Option<Adam<F>>,
}

/// True when `dir` holds a baseline checkpoint rather than a diffusion one.
pub fn is_baseline_checkpoint(dir: &Path) -> bool {
    dir.join("baseline.json").is_file()
}

pub fn load_baseline<F: Float>(dir: &Path) -> Result<LoadedBaseline<F>> {
    let meta_text = std::fs::read_to_string(dir.join("baseline.json"))?;
    let meta: BaselineMeta = serde_json::from_str(&meta_text)
        .map_err(|e| SynthError::Data(format!("{}: baseline meta: {e}", dir.display())))?;
    if meta.dtype != F::DTYPE {
        return Err(SynthError::Config(format!(
            "checkpoint dtype {} does not match requested {}",
            meta.dtype,
            F::DTYPE
        )));
    }
    let cfg_text = std::fs::read_to_string(dir.join("config.toml"))?;
    let config: DenoiserConfig = toml::from_str(&cfg_text)
        .map_err(|e| SynthError::Config(format!("{}: config: {e}", dir.display())))?;

    let mut gen = build_generator::<F>(config, 0)?;
    gen.ps.load_values(read_param_blob(&dir.join("gen.bin"))?)?;
    gen.step = meta.step;
    let gen_adam = match &meta.gen_adam {
        Some(am) => Some(load_adam_blobs(dir, "gen_adam", &gen.ps, am)?),
        None => None,
    };

    let (disc, disc_adam) = match &meta.gan {
        Some(g) => {
            let mut d = build_discriminator::<F>(gen.config.in_channels, g, 0)?;
            d.ps.load_values(read_param_blob(&dir.join("disc.bin"))?)?;
            let da = match &meta.disc_adam {
                Some(am) => Some(load_adam_blobs(dir, "disc_adam", &d.ps, am)?),
                None => None,
            };
            (Some(d), da)
        }
        None => (None, None),
    };

    Ok(LoadedBaseline {
        kind: meta.kind,
        gen,
        gen_adam,
        gan: meta.gan,
        disc,
        disc_adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;

    fn tiny_backbone() -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 3,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            resblocks_per_level: 1,
            groupnorm_groups: 4,
            attention_resolutions: vec![4],
            image_size: 8,
        }
    }

    fn tiny_gan() -> GanConfig {
        GanConfig {
            disc_channels: 8,
            disc_layers: 2,
            ..GanConfig::default()
        }
    }

    /// Smooth, condition-predictable slices: target is a random low-frequency
    /// pattern, conditions are informative linear views of it.
    fn smooth_batch(n: usize, hw: usize, seed: u64) -> (Array4<f32>, Array4<f32>) {
        let mut rng = rng_for(seed, "smooth", 0);
        let mut x = Array4::<f32>::zeros((n, 2, hw, hw));
        let mut t = Array4::<f32>::zeros((n, 1, hw, hw));
        for k in 0..n {
            let (phi, psi) = (rng.gen::<f64>(), rng.gen::<f64>());
            let amp = 0.3 + 0.4 * rng.gen::<f64>();
            for y in 0..hw {
                for xx in 0..hw {
                    let v = amp
                        * (std::f64::consts::TAU * (y as f64 / hw as f64 + phi)).sin()
                        * (std::f64::consts::TAU * (xx as f64 / hw as f64 + psi)).cos();
                    t[[k, 0, y, xx]] = v as f32;
                    x[[k, 0, y, xx]] =
                        (0.9 * v + 0.05 * (std::f64::consts::TAU * xx as f64 / hw as f64).sin())
                            as f32;
                    x[[k, 1, y, xx]] = (-0.7 * v) as f32;
                }
            }
        }
        (x, t)
    }

    #[test]
    fn gan_config_defaults_and_validation() {
        let d = GanConfig::default();
        assert_eq!(d.l1_weight, 100.0);
        assert_eq!(d.gan_loss_kind, GanLossKind::LeastSquares);
        assert!(d.adversarial);
        assert!(d.validate().is_ok());
        assert!(GanConfig { l1_weight: 0.0, ..d.clone() }.validate().is_err());
        assert!(GanConfig { disc_channels: 12, ..d.clone() }.validate().is_err());
        assert!(GanConfig { disc_layers: 0, ..d }.validate().is_err());
    }

    #[test]
    fn generator_drops_noise_channel_and_timesteps() {
        let gen = build_generator::<f32>(tiny_backbone(), 1).unwrap();
        assert_eq!(gen.net.spec.in_channels, 2);
        assert!(!gen.net.spec.time_embed);
        let (x, _) = smooth_batch(2, 8, 2);
        let y = gen.net.infer(&gen.ps, &x, None).unwrap();
        assert_eq!(y.dim(), (2, 1, 8, 8));
        // Zero-initialized head: a fresh generator is identically zero.
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l1_step_exact_anchors() {
        // Fresh generator output ≡ 0, so targets pin the loss exactly.
        let mut gen = build_generator::<f32>(tiny_backbone(), 3).unwrap();
        let mut adam = Adam::new(&gen.ps, 1e-4, 0.9, 0.999, 1e-8);
        let (x, _) = smooth_batch(2, 8, 4);

        let zeros = Array4::<f32>::zeros((2, 1, 8, 8));
        let loss = l1_train_step(&mut gen, &mut adam, &x, &zeros).unwrap();
        assert_eq!(loss, 0.0);

        // Output still 0 (zero gradients moved nothing): offset of 0.5 → 0.5.
        let halves = Array4::<f32>::from_elem((2, 1, 8, 8), -0.5);
        let loss = l1_train_step(&mut gen, &mut adam, &x, &halves).unwrap();
        assert!((loss - 0.5).abs() < 1e-12, "constant-offset loss {loss}");
    }

    #[test]
    fn l1_step_rejects_channel_mismatch() {
        let mut gen = build_generator::<f32>(tiny_backbone(), 5).unwrap();
        let mut adam = Adam::new(&gen.ps, 1e-4, 0.9, 0.999, 1e-8);
        let x = Array4::<f32>::zeros((1, 3, 8, 8)); // backbone wants 2
        let t = Array4::<f32>::zeros((1, 1, 8, 8));
        match l1_train_step(&mut gen, &mut adam, &x, &t) {
            Err(SynthError::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn l1_overfits_one_sample() {
        let mut gen = build_generator::<f32>(tiny_backbone(), 6).unwrap();
        let mut adam = Adam::new(&gen.ps, 2e-3, 0.9, 0.999, 1e-8);
        let (x, t) = smooth_batch(1, 8, 7);
        for _ in 0..500 {
            l1_train_step(&mut gen, &mut adam, &x, &t).unwrap();
        }
        let y = gen.net.infer(&gen.ps, &x, None).unwrap();
        let n = y.len() as f64;
        let l1: f64 = ndarray::Zip::from(&y)
            .and(&t)
            .fold(0.0, |acc, &p, &tv| acc + (p as f64 - tv as f64).abs())
            / n;
        assert!(l1 < 0.05, "post-overfit L1 {l1}");
    }

    #[test]
    fn constant_half_discriminator_scores_quarter_loss() {
        // Zero head weights + bias 0.5 make D ≡ 0.5 regardless of input;
        // the least-squares objective then evaluates to exactly 0.25.
        let mut gen = build_generator::<f32>(tiny_backbone(), 8).unwrap();
        let mut gen_adam = Adam::new(&gen.ps, 1e-4, 0.9, 0.999, 1e-8);
        let gan = tiny_gan();
        let mut disc = build_discriminator::<f32>(3, &gan, 9).unwrap();
        disc.ps.value_mut(disc.net.head.w).fill(0.0);
        disc.ps.value_mut(disc.net.head.b).fill(0.5);
        let mut disc_adam = Adam::new(&disc.ps, 1e-4, 0.9, 0.999, 1e-8);
        let (x, t) = smooth_batch(2, 8, 10);
        let losses =
            pix2pix_train_step(&mut gen, &mut gen_adam, &mut disc, &mut disc_adam, &x, &t, &gan)
                .unwrap();
        assert!(
            (losses.disc_loss - 0.25).abs() < 1e-6,
            "disc loss {}",
            losses.disc_loss
        );
    }

    #[test]
    fn adversarial_disabled_matches_l1_step_bitwise() {
        let gan = GanConfig {
            adversarial: false,
            ..tiny_gan()
        };
        let mut g1 = build_generator::<f32>(tiny_backbone(), 11).unwrap();
        let mut g2 = build_generator::<f32>(tiny_backbone(), 11).unwrap();
        let mut a1 = Adam::new(&g1.ps, 1e-3, 0.9, 0.999, 1e-8);
        let mut a2 = Adam::new(&g2.ps, 1e-3, 0.9, 0.999, 1e-8);
        let mut disc = build_discriminator::<f32>(3, &gan, 12).unwrap();
        let mut da = Adam::new(&disc.ps, 1e-3, 0.9, 0.999, 1e-8);

        for step in 0..5u64 {
            let (x, t) = smooth_batch(2, 8, 13 + step);
            let l1 = l1_train_step(&mut g1, &mut a1, &x, &t).unwrap();
            let px =
                pix2pix_train_step(&mut g2, &mut a2, &mut disc, &mut da, &x, &t, &gan).unwrap();
            assert_eq!(l1, px.gen_loss);
            assert_eq!(px.l1, px.gen_loss);
        }
        for (i1, i2) in g1.ps.ids().zip(g2.ps.ids()) {
            assert_eq!(g1.ps.value(i1), g2.ps.value(i2), "{}", g1.ps.name(i1));
        }
    }

    #[test]
    fn discriminator_depth_is_validated_against_image_size() {
        let gan = GanConfig {
            disc_layers: 3,
            disc_channels: 8,
            ..GanConfig::default()
        };
        let disc = build_discriminator::<f32>(3, &gan, 14).unwrap();
        // 8×8 → 4 → 2 → 1; the k4 head cannot run on 1×1.
        let x = Array4::<f32>::zeros((1, 3, 8, 8));
        match disc.net.forward(&disc.ps, &x) {
            Err(SynthError::Config(msg)) => assert!(msg.contains("too deep") || msg.contains("head")),
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
        // 16×16 → 8 → 4 → 2 → head 1×1 patch map: fine.
        let x = Array4::<f32>::zeros((1, 3, 16, 16));
        let (y, _) = disc.net.forward(&disc.ps, &x).unwrap();
        assert_eq!(y.dim(), (1, 1, 1, 1));
    }

    #[test]
    fn saturation_monitor_fires_once_after_sustained_run() {
        let mut m = SaturationMonitor::new(1e-6, 1000);
        for i in 0..999 {
            assert!(m.observe(1e-9, i).is_none());
        }
        assert!(m.observe(1e-9, 999).is_some());
        assert!(m.observe(1e-9, 1000).is_none()); // fires only once
        // A healthy step resets the run counter.
        let mut m2 = SaturationMonitor::new(1e-6, 3);
        assert!(m2.observe(0.0, 0).is_none());
        assert!(m2.observe(0.0, 1).is_none());
        assert!(m2.observe(0.5, 2).is_none());
        assert!(m2.observe(0.0, 3).is_none());
        assert!(m2.observe(0.0, 4).is_none());
        assert!(m2.observe(0.0, 5).is_some());
    }

    #[test]
    fn pix2pix_smoke_l1_component_drops() {
        // 8 slices, 2000 alternating steps: the generator's L1 component
        // must fall by at least 30% (first-100 vs last-100 averages).
        let dir = tempfile::tempdir().unwrap();
        let ds = smooth_dataset(dir.path(), 8, 15);
        let gan = tiny_gan();
        let mut gen = build_generator::<f32>(tiny_backbone(), 16).unwrap();
        let mut gen_adam = Adam::new(&gen.ps, 1e-3, 0.9, 0.999, 1e-8);
        let mut disc = build_discriminator::<f32>(3, &gan, 17).unwrap();
        let mut disc_adam = Adam::new(&disc.ps, 1e-3, 0.9, 0.999, 1e-8);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2,
            total_iterations: 2000,
            checkpoint_interval: 2000,
            log_interval: 100,
            ..TrainConfig::default()
        };
        let report = train_pix2pix(
            &mut gen,
            &mut gen_adam,
            &mut disc,
            &mut disc_adam,
            &gan,
            &ds,
            &cfg,
            &dir.path().join("run"),
            18,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 20);
        let first = report.l1[0];
        let last = *report.l1.last().unwrap();
        assert!(
            last <= 0.7 * first,
            "L1 component did not drop 30%: first {first}, last {last}"
        );
        assert!(report.rows.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn baseline_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let gan = tiny_gan();
        let mut gen = build_generator::<f32>(tiny_backbone(), 19).unwrap();
        let mut gen_adam = Adam::new(&gen.ps, 1e-3, 0.9, 0.999, 1e-8);
        let mut disc = build_discriminator::<f32>(3, &gan, 20).unwrap();
        let mut disc_adam = Adam::new(&disc.ps, 1e-3, 0.9, 0.999, 1e-8);
        let (x, t) = smooth_batch(2, 8, 21);
        for _ in 0..2 {
            pix2pix_train_step(&mut gen, &mut gen_adam, &mut disc, &mut disc_adam, &x, &t, &gan)
                .unwrap();
        }
        let ck = dir.path().join("ck");
        save_baseline(
            &ck,
            BaselineKind::Pix2pix,
            &gen,
            Some(&gen_adam),
            Some(&gan),
            Some(&disc),
            Some(&disc_adam),
        )
        .unwrap();
        assert!(is_baseline_checkpoint(&ck));

        let loaded = load_baseline::<f32>(&ck).unwrap();
        assert_eq!(loaded.kind, BaselineKind::Pix2pix);
        assert_eq!(loaded.gen.step, 2);
        assert_eq!(loaded.gan.as_ref(), Some(&gan));
        for (a, b) in gen.ps.ids().zip(loaded.gen.ps.ids()) {
            assert_eq!(gen.ps.value(a), loaded.gen.ps.value(b));
        }
        let ld = loaded.disc.unwrap();
        for (a, b) in disc.ps.ids().zip(ld.ps.ids()) {
            assert_eq!(disc.ps.value(a), ld.ps.value(b));
        }
        assert_eq!(loaded.gen_adam.unwrap().t, gen_adam.t);
        assert_eq!(loaded.disc_adam.unwrap().t, disc_adam.t);

        // L1-only variant: no disc artifacts, loads without them.
        let ck2 = dir.path().join("ck2");
        save_baseline(&ck2, BaselineKind::UnetL1, &gen, Some(&gen_adam), None, None, None)
            .unwrap();
        let l2 = load_baseline::<f32>(&ck2).unwrap();
        assert_eq!(l2.kind, BaselineKind::UnetL1);
        assert!(l2.disc.is_none() && l2.gan.is_none());
    }

    #[test]
    fn train_l1_loop_writes_rows_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let ds = smooth_dataset(dir.path(), 4, 22);
        let mut gen = build_generator::<f32>(tiny_backbone(), 23).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2,
            total_iterations: 20,
            checkpoint_interval: 20,
            log_interval: 5,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(&gen.ps, cfg.learning_rate, 0.9, 0.999, 1e-8);
        let out = dir.path().join("run");
        let report = train_l1(&mut gen, &mut adam, &ds, &cfg, &out, 24).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert!(report.disc.is_empty());
        assert_eq!(report.l1.len(), 4);
        assert!(out.join("ckpt-0000020").join("gen.bin").exists());
        assert!(is_baseline_checkpoint(&out.join("final")));
        let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
        assert!(csv.starts_with("iteration,loss,ema_loss\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    /// Slice dataset of smooth condition-predictable content on disk.
    fn smooth_dataset(dir: &std::path::Path, n: usize, seed: u64) -> SliceDataset {
        use crate::datapipe::dataset::{write_jsonl, write_stack, StackEntry};
        use crate::datapipe::phantom::Demographics;
        use crate::datapipe::PadCrop;
        use std::collections::BTreeMap;

        let (x, t) = smooth_batch(n, 8, seed);
        let mut stack = ndarray::Array4::<f32>::zeros((n, 3, 8, 8));
        stack.slice_mut(s![.., ..2, .., ..]).assign(&x);
        stack.slice_mut(s![.., 2.., .., ..]).assign(&t);
        write_stack(&dir.join("s0.npy"), &stack).unwrap();
        let entry = StackEntry {
            subject_id: "s0".into(),
            split: "train".into(),
            file: "s0.npy".into(),
            n_slices: n,
            height: 8,
            width: 8,
            channels: vec!["echo1".into(), "echo2".into()],
            target: "t1w".into(),
            norm: BTreeMap::new(),
            pad: PadCrop {
                orig_shape_xyz: (8, 8, n),
                offset_xyz: (0, 0, 0),
            },
            spacing: (1.0, 1.0, 1.0),
            n_structures: 0,
            demographics: Demographics {
                age_years: 60.0,
                sex_male: false,
                etiv_mm3: 1.0e6,
            },
            structure_volumes_mm3: Vec::new(),
        };
        write_jsonl(&dir.join("manifest.jsonl"), &[entry]).unwrap();
        SliceDataset::load(dir, "train").unwrap()
    }
}
