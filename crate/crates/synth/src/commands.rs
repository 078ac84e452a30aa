//! Subcommand orchestration: one function per CLI verb, each driven by a
//! [`RunConfig`]. The stages compose through the configured directories —
//! `phantom` writes raw volumes, `preprocess` turns them into slice stacks,
//! `train` fits a model, `sample` synthesizes test volumes, `evaluate`
//! scores them, and `biostats` compares cohort regressions. Subject-level
//! work runs on a bounded worker pool ([`worker_count`]); results are
//! gathered by subject index, so report bytes never depend on the pool
//! width.

use crate::baselines::{
    build_discriminator, build_generator, is_baseline_checkpoint, load_baseline, train_l1,
    train_pix2pix, BaselineKind, Generator,
};
use crate::biostats::{
    concordance_report, concordance_summary, fit_mlr, read_subject_table, roi_names,
    split_by_source, write_concordance_csv, ConcordanceReport, RegressionResult, SubjectRecord,
};
use crate::config::{worker_count, RunConfig};
use crate::datapipe::dataset::{
    build_stack, read_jsonl, write_jsonl, write_stack, FileEntry, PhantomEntry, SliceDataset,
    StackEntry,
};
use crate::datapipe::nifti::{read_nifti, write_nifti};
use crate::datapipe::phantom::{generate_phantom, segment_t1w, volume_checksum};
use crate::datapipe::{
    apply_mask, dilate, fit_r2star, normalize_group, pad_crop, pad_crop_inverse,
    slices_to_volume, Modality, Volume, ECHO_TIMES_MS,
};
use crate::denoiser::{load_checkpoint, sample_stack, Denoiser};
use crate::error::{Result, SynthError};
use crate::metrics::{
    dice, icc2k, mean_finite, paired_tests, psnr, relative_volume_error, slice_filter, ssim,
    MetricsReport, RegionRow, SubjectImageRow, TestRow,
};
use crate::nn::adam::Adam;
use crate::nn::ParamStore;
use crate::plot::{bar_chart, box_plot, quantile, Series};
use crate::rng::derive_seed;
use crate::schedule::NoiseSchedule;
use ndarray::{s, Array2, Array3, Array4, Axis};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

/// Run `f(0..n)` on a bounded pool and return the results in index order.
/// Errors are reported for the lowest failing index, so a rerun fails the
/// same way regardless of scheduling.
fn parallel_map<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = worker_count().min(n.max(1));
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<(usize, Result<T>)>> = Mutex::new(Vec::with_capacity(n));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                done.lock().expect("worker poisoned").push((i, r));
            });
        }
    });
    let mut got = done.into_inner().expect("worker poisoned");
    got.sort_by_key(|(i, _)| *i);
    got.into_iter().map(|(_, r)| r).collect()
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// Trainable method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Diffusion,
    UnetL1,
    Pix2pix,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(Method::Diffusion),
            "unet-l1" => Ok(Method::UnetL1),
            "pix2pix" => Ok(Method::Pix2pix),
            other => Err(SynthError::Config(format!(
                "unknown method {other:?}; expected diffusion, unet-l1, or pix2pix"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Diffusion => "diffusion",
            Method::UnetL1 => "unet-l1",
            Method::Pix2pix => "pix2pix",
        }
    }
}

fn kind_label(kind: BaselineKind) -> &'static str {
    match kind {
        BaselineKind::UnetL1 => Method::UnetL1.as_str(),
        BaselineKind::Pix2pix => Method::Pix2pix.as_str(),
    }
}

/// Inverse of [`Modality::tag`] for manifest entries.
fn modality_from_tag(tag: &str) -> Result<Modality> {
    match tag {
        "qsm" => Ok(Modality::Qsm),
        "r2star" => Ok(Modality::R2star),
        "t1w" => Ok(Modality::T1w),
        "labels" => Ok(Modality::Labels),
        "mask" => Ok(Modality::Mask),
        t => {
            if let Some(num) = t.strip_prefix("echo") {
                let k: usize = num
                    .parse()
                    .map_err(|_| SynthError::Data(format!("unknown modality tag {t:?}")))?;
                if k >= 1 && k <= ECHO_TIMES_MS.len() {
                    return Ok(Modality::MgreEcho(k - 1));
                }
            }
            Err(SynthError::Data(format!("unknown modality tag {t:?}")))
        }
    }
}

/// Read one of a subject's raw volumes by tag and verify its manifest
/// checksum against the voxel payload.
fn read_subject_volume(raw_dir: &Path, entry: &PhantomEntry, tag: &str) -> Result<Volume> {
    let file = entry
        .files
        .iter()
        .find(|f| f.tag == tag)
        .ok_or_else(|| {
            SynthError::Data(format!("{}: manifest lists no {tag} volume", entry.subject_id))
        })?;
    let v = read_nifti(&raw_dir.join(&file.path), modality_from_tag(tag)?)?;
    if volume_checksum(&v) != file.checksum {
        return Err(SynthError::Data(format!(
            "{}: {tag} volume does not match its manifest checksum",
            entry.subject_id
        )));
    }
    Ok(v)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

/// Load one split of the slice stacks, pointing at the missing stage when
/// nothing has been preprocessed yet.
fn load_split(cfg: &RunConfig, split: &str) -> Result<SliceDataset> {
    let manifest = cfg.paths.stack_dir.join("manifest.jsonl");
    if !manifest.is_file() {
        return Err(SynthError::Data(format!(
            "no manifest at {}; run `synth preprocess` first",
            manifest.display()
        )));
    }
    SliceDataset::load(&cfg.paths.stack_dir, split)
}

/// Load the raw cohort manifest, pointing at the missing stage when absent.
fn read_raw_manifest(raw_dir: &Path) -> Result<Vec<PhantomEntry>> {
    let manifest = raw_dir.join("manifest.jsonl");
    if !manifest.is_file() {
        return Err(SynthError::Data(format!(
            "no manifest at {}; run `synth phantom` first",
            manifest.display()
        )));
    }
    let entries: Vec<PhantomEntry> = read_jsonl(&manifest)?;
    if entries.is_empty() {
        return Err(SynthError::Data(format!(
            "manifest {} lists no subjects",
            manifest.display()
        )));
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// phantom
// ---------------------------------------------------------------------------

/// Generate the phantom cohort: one directory of nine volumes per subject
/// plus a manifest with demographics, ground-truth structure volumes, and
/// payload checksums. The last `n_test` subjects form the test split.
pub fn cmd_phantom(cfg: &RunConfig, seed_override: Option<u64>) -> Result<()> {
    let master = seed_override.unwrap_or(cfg.seeds.master);
    let p = &cfg.phantom;
    let raw_dir = &cfg.paths.raw_dir;
    std::fs::create_dir_all(raw_dir)?;

    let entries = parallel_map(p.n_subjects, |i| {
        let seed = derive_seed(master, "phantom-subject", i as u64);
        let phantom = generate_phantom(seed, p.grid, p.n_structures)?;
        let subject_id = format!("sub-{:03}", i + 1);
        let split = if i + p.n_test >= p.n_subjects { "test" } else { "train" };
        let dir = raw_dir.join(&subject_id);
        std::fs::create_dir_all(&dir)?;
        let mut files = Vec::with_capacity(phantom.volumes.len());
        for v in &phantom.volumes {
            let tag = v.modality.tag();
            let name = format!("{tag}.nii");
            write_nifti(&dir.join(&name), v)?;
            files.push(FileEntry {
                tag,
                path: format!("{subject_id}/{name}"),
                checksum: volume_checksum(v),
            });
        }
        Ok(PhantomEntry {
            subject_id,
            seed,
            split: split.to_string(),
            n_structures: p.n_structures,
            demographics: phantom.demographics,
            structure_volumes_mm3: phantom.structure_volumes_mm3,
            files,
        })
    })?;

    write_jsonl(&raw_dir.join("manifest.jsonl"), &entries)?;
    let n_test = entries.iter().filter(|e| e.split == "test").count();
    println!(
        "phantom: wrote {} subjects ({} train / {n_test} test) under {}",
        entries.len(),
        entries.len() - n_test,
        raw_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// preprocess
// ---------------------------------------------------------------------------

/// Pad/crop a subject's volumes to the target grid, normalize each modality
/// group to [−1, 1] within the brain mask, restrict the quantitative maps to
/// the dilated structure mask, and stack conditions plus target into the
/// (Z, C+1, H, W) training layout.
fn preprocess_subject(
    cfg: &RunConfig,
    raw_dir: &Path,
    entry: &PhantomEntry,
) -> Result<StackEntry> {
    let target = cfg.pipeline.target_shape;
    let read = |tag: &str| read_subject_volume(raw_dir, entry, tag);

    let (labels, pad) = pad_crop(&read("labels")?, target, 0.0);
    let (t1w, _) = pad_crop(&read("t1w")?, target, 0.0);
    let mut echoes = Vec::with_capacity(ECHO_TIMES_MS.len());
    for k in 1..=ECHO_TIMES_MS.len() {
        echoes.push(pad_crop(&read(&format!("echo{k}"))?, target, 0.0).0);
    }

    // Brain mask: everything the label volume marks as tissue. The pad fill
    // (0) is background, so padding never enters the statistics.
    let brain = labels.data.mapv(|v| v > 0.5);
    let spacing = t1w.spacing;

    let mut norm = BTreeMap::new();
    let (mut conditions, mgre_params) =
        normalize_group(&echoes.iter().collect::<Vec<_>>(), &brain)?;
    norm.insert("mgre".to_string(), mgre_params);
    let (t1w_norm, t1w_params) = normalize_group(&[&t1w], &brain)?;
    norm.insert("t1w".to_string(), t1w_params);

    if cfg.pipeline.channel_set.n_conditions() > ECHO_TIMES_MS.len() {
        // Quantitative maps: susceptibility comes from its reconstruction,
        // the relaxation rate is refit from the echoes. Both are masked to
        // the structure labels dilated by 3, background −1.
        let (qsm, _) = pad_crop(&read("qsm")?, target, 0.0);
        let (r2star, _) = fit_r2star(&echoes, &ECHO_TIMES_MS)?;
        let (qsm_norm, qsm_params) = normalize_group(&[&qsm], &brain)?;
        let (r2s_norm, r2s_params) = normalize_group(&[&r2star], &brain)?;
        norm.insert("qsm".to_string(), qsm_params);
        norm.insert("r2star".to_string(), r2s_params);

        let roi = dilate(&labels.data.mapv(|v| v > 1.5), 3);
        conditions.push(apply_mask(&qsm_norm[0], &roi, -1.0)?);
        conditions.push(apply_mask(&r2s_norm[0], &roi, -1.0)?);
    }

    let stack = build_stack(&conditions.iter().collect::<Vec<_>>(), &t1w_norm[0])?;
    let file = format!("{}.npy", entry.subject_id);
    write_stack(&cfg.paths.stack_dir.join(&file), &stack)?;

    let (n_slices, _, height, width) = stack.dim();
    Ok(StackEntry {
        subject_id: entry.subject_id.clone(),
        split: entry.split.clone(),
        file,
        n_slices,
        height,
        width,
        channels: cfg.pipeline.channel_set.tags(),
        target: "t1w".to_string(),
        norm,
        pad,
        spacing,
        n_structures: entry.n_structures,
        demographics: entry.demographics.clone(),
        structure_volumes_mm3: entry.structure_volumes_mm3.clone(),
    })
}

/// Turn the raw cohort into per-subject slice stacks plus a manifest
/// carrying everything needed to undo the transform (normalization
/// constants, pad/crop offsets, spacing).
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<()> {
    let raw_dir = &cfg.paths.raw_dir;
    let entries: Vec<PhantomEntry> = read_raw_manifest(raw_dir)?;
    std::fs::create_dir_all(&cfg.paths.stack_dir)?;

    let stacks = parallel_map(entries.len(), |i| preprocess_subject(cfg, raw_dir, &entries[i]))?;
    write_jsonl(&cfg.paths.stack_dir.join("manifest.jsonl"), &stacks)?;

    let slices: usize = stacks.iter().map(|s| s.n_slices).sum();
    println!(
        "preprocess: {} subjects → {} slices of {} condition channels under {}",
        stacks.len(),
        slices,
        cfg.pipeline.channel_set.n_conditions(),
        cfg.paths.stack_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn fresh_adam<F: crate::nn::Float>(ps: &ParamStore<F>, cfg: &RunConfig) -> Adam<F> {
    Adam::new(
        ps,
        cfg.train.learning_rate,
        cfg.train.adam_beta1,
        cfg.train.adam_beta2,
        1e-8,
    )
}

/// Train the selected method on the train split. All three methods consume
/// the identical stack manifest; `--checkpoint` resumes. The checkpoint's
/// backbone must match the configured one exactly.
pub fn cmd_train(
    cfg: &RunConfig,
    method: Option<&str>,
    checkpoint: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<()> {
    let method = Method::parse(method.unwrap_or("diffusion"))?;
    let seed = seed_override.unwrap_or(cfg.seeds.training);
    let dataset = load_split(cfg, "train")?;
    let out_dir = cfg.paths.checkpoint_dir.join(method.as_str());

    match method {
        Method::Diffusion => {
            let schedule = cfg.schedule.build()?;
            let (mut d, mut adam) = match checkpoint {
                Some(p) => {
                    let (d, adam) = load_checkpoint::<f32>(p)?;
                    if d.config != cfg.denoiser {
                        return Err(SynthError::Config(format!(
                            "checkpoint backbone {:?} does not match the configured {:?}",
                            d.config, cfg.denoiser
                        )));
                    }
                    let adam = adam.unwrap_or_else(|| fresh_adam(&d.state.raw, cfg));
                    (d, adam)
                }
                None => {
                    let d = crate::denoiser::build_denoiser::<f32>(cfg.denoiser.clone(), seed)?;
                    let adam = fresh_adam(&d.state.raw, cfg);
                    (d, adam)
                }
            };
            let rows =
                crate::trainer::train(&mut d, &mut adam, &dataset, &schedule, &cfg.train, &out_dir, seed)?;
            let last = rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!(
                "train diffusion: step {} reached, {} loss rows, last windowed loss {last:.6} → {}",
                cfg.train.total_iterations,
                rows.len(),
                out_dir.display()
            );
        }
        Method::UnetL1 => {
            let (mut gen, mut adam) = match checkpoint {
                Some(p) => {
                    let lb = load_baseline::<f32>(p)?;
                    check_baseline(&lb.gen, lb.kind, BaselineKind::UnetL1, cfg)?;
                    let gen = lb.gen;
                    let adam = lb.gen_adam.unwrap_or_else(|| fresh_adam(&gen.ps, cfg));
                    (gen, adam)
                }
                None => {
                    let gen = build_generator::<f32>(cfg.denoiser.clone(), seed)?;
                    let adam = fresh_adam(&gen.ps, cfg);
                    (gen, adam)
                }
            };
            let report = train_l1(&mut gen, &mut adam, &dataset, &cfg.train, &out_dir, seed)?;
            print_baseline_summary("unet-l1", &report, &out_dir);
        }
        Method::Pix2pix => {
            let built = match checkpoint {
                Some(p) => {
                    let lb = load_baseline::<f32>(p)?;
                    check_baseline(&lb.gen, lb.kind, BaselineKind::Pix2pix, cfg)?;
                    let stored = lb.gan.ok_or_else(|| {
                        SynthError::Config("pix2pix checkpoint carries no GAN settings".into())
                    })?;
                    if stored != cfg.gan {
                        return Err(SynthError::Config(
                            "checkpoint GAN settings do not match the configured ones".into(),
                        ));
                    }
                    let disc = lb.disc.ok_or_else(|| {
                        SynthError::Config("pix2pix checkpoint carries no discriminator".into())
                    })?;
                    let gen = lb.gen;
                    let gen_adam = lb.gen_adam.unwrap_or_else(|| fresh_adam(&gen.ps, cfg));
                    let disc_adam = lb.disc_adam.unwrap_or_else(|| fresh_adam(&disc.ps, cfg));
                    (gen, gen_adam, disc, disc_adam)
                }
                None => {
                    let gen = build_generator::<f32>(cfg.denoiser.clone(), seed)?;
                    let disc = build_discriminator::<f32>(
                        cfg.denoiser.in_channels,
                        &cfg.gan,
                        derive_seed(seed, "train-disc-init", 0),
                    )?;
                    let gen_adam = fresh_adam(&gen.ps, cfg);
                    let disc_adam = fresh_adam(&disc.ps, cfg);
                    (gen, gen_adam, disc, disc_adam)
                }
            };
            let (mut gen, mut gen_adam, mut disc, mut disc_adam) = built;
            let report = train_pix2pix(
                &mut gen,
                &mut gen_adam,
                &mut disc,
                &mut disc_adam,
                &cfg.gan,
                &dataset,
                &cfg.train,
                &out_dir,
                seed,
            )?;
            print_baseline_summary("pix2pix", &report, &out_dir);
        }
    }
    Ok(())
}

fn check_baseline(
    gen: &Generator<f32>,
    kind: BaselineKind,
    wanted: BaselineKind,
    cfg: &RunConfig,
) -> Result<()> {
    if kind != wanted {
        return Err(SynthError::Config(format!(
            "checkpoint holds a {} model, training method is {}",
            kind_label(kind),
            kind_label(wanted)
        )));
    }
    if gen.config != cfg.denoiser {
        return Err(SynthError::Config(format!(
            "checkpoint backbone {:?} does not match the configured {:?}",
            gen.config, cfg.denoiser
        )));
    }
    Ok(())
}

fn print_baseline_summary(name: &str, report: &crate::baselines::BaselineReport, out: &Path) {
    let last = report.rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "train {name}: {} loss rows, last windowed loss {last:.6} → {}",
        report.rows.len(),
        out.display()
    );
    for w in &report.warnings {
        println!("train {name}: warning: {w}");
    }
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

enum SamplerModel {
    Diffusion {
        d: Denoiser<f32>,
        ps: ParamStore<f32>,
        schedule: NoiseSchedule,
    },
    Regression {
        gen: Generator<f32>,
        kind: BaselineKind,
    },
}

/// Batched inference of the regression backbone over a whole slice stack.
fn regress_stack(gen: &Generator<f32>, conditions: &Array4<f32>, batch: usize) -> Result<Array3<f32>> {
    if batch == 0 {
        return Err(SynthError::Parameter("batch must be ≥ 1".into()));
    }
    let (z_total, _c, h, w) = conditions.dim();
    let mut out = Array3::<f32>::zeros((z_total, h, w));
    let mut start = 0;
    while start < z_total {
        let end = (start + batch).min(z_total);
        let x = conditions.slice(s![start..end, .., .., ..]).to_owned();
        let y = gen.net.infer(&gen.ps, &x, None)?;
        out.slice_mut(s![start..end, .., ..])
            .assign(&y.index_axis(Axis(1), 0));
        start = end;
    }
    Ok(out)
}

/// Synthesize every test-split subject from a checkpoint. Diffusion
/// checkpoints run the deterministic reverse process slice by slice (EMA
/// weights unless configured otherwise); baseline checkpoints run a single
/// forward pass. Outputs are de-normalized inside the condition-derived
/// brain mask, restored to the original grid, and written as NIfTI under
/// an output directory named after the method.
pub fn cmd_sample(cfg: &RunConfig, checkpoint: Option<&Path>, seed_override: Option<u64>) -> Result<()> {
    let seed = seed_override.unwrap_or(cfg.seeds.sampling);
    let dataset = load_split(cfg, "test")?;
    let n = dataset.n_subjects();
    if n == 0 {
        return Err(SynthError::Data("test split holds no subjects".into()));
    }

    let default_ckpt: PathBuf = cfg.paths.checkpoint_dir.join("diffusion").join("final");
    let ckpt = checkpoint.unwrap_or(&default_ckpt);
    let model = if is_baseline_checkpoint(ckpt) {
        let lb = load_baseline::<f32>(ckpt)?;
        SamplerModel::Regression { kind: lb.kind, gen: lb.gen }
    } else {
        let (d, _) = load_checkpoint::<f32>(ckpt)?;
        let ps = if cfg.sample.use_ema { d.ema_params()? } else { d.raw_params_clone() };
        SamplerModel::Diffusion { ps, schedule: cfg.schedule.build()?, d }
    };
    let in_channels = match &model {
        SamplerModel::Diffusion { d, .. } => d.config.in_channels,
        SamplerModel::Regression { gen, .. } => gen.config.in_channels,
    };
    if in_channels != dataset.n_channels() + 1 {
        return Err(SynthError::Config(format!(
            "checkpoint expects {} input channels, dataset provides {} conditions (+1 target)",
            in_channels,
            dataset.n_channels()
        )));
    }
    let base_label = match &model {
        SamplerModel::Diffusion { .. } => "diffusion",
        SamplerModel::Regression { kind, .. } => kind_label(*kind),
    };
    let label = if cfg.sample.shuffle_conditions {
        format!("{base_label}-shuffled")
    } else {
        base_label.to_string()
    };
    let out_dir = cfg.paths.output_dir.join(&label);
    std::fs::create_dir_all(&out_dir)?;

    parallel_map(n, |i| {
        let entry = dataset.entry(i);
        // The mismatch control hands each subject its neighbour's
        // conditions; the claimed identity (norm constants, geometry) stays
        // the subject's own.
        let source = if cfg.sample.shuffle_conditions { (i + 1) % n } else { i };
        let stack = dataset.stack(source);
        let (z_total, c_plus_1, h, w) = stack.dim();
        let c = c_plus_1 - 1;
        if z_total != entry.n_slices {
            return Err(SynthError::Data(format!(
                "{}: condition stack has {z_total} slices, subject expects {}",
                entry.subject_id, entry.n_slices
            )));
        }
        let conditions = stack.slice(s![.., ..c, .., ..]).to_owned();
        let subject_seed = derive_seed(seed, "sample-subject", i as u64);
        let gen_norm = match &model {
            SamplerModel::Diffusion { d, ps, schedule } => sample_stack(
                &d.net,
                ps,
                &conditions,
                schedule,
                cfg.sample.eta,
                subject_seed,
                cfg.sample.batch_slices,
            )?,
            SamplerModel::Regression { gen, .. } => {
                regress_stack(gen, &conditions, cfg.sample.batch_slices)?
            }
        };

        // Normalization is only invertible inside the brain mask the
        // conditions carry (out-of-mask voxels were forced to −1); outside
        // it the raw background is 0. Network output may drift slightly
        // past the normalized interval, so clamp before de-normalizing.
        let t1w_norm = entry.norm.get(entry.target.as_str()).ok_or_else(|| {
            SynthError::Data(format!(
                "{}: manifest carries no normalization constants for {}",
                entry.subject_id, entry.target
            ))
        })?;
        let mut slices = Vec::with_capacity(z_total);
        for z in 0..z_total {
            let mut plane = Array2::<f32>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    let in_mask = (0..c).any(|ch| conditions[[z, ch, y, x]] > -1.0);
                    plane[[y, x]] = if in_mask {
                        t1w_norm.denorm(gen_norm[[z, y, x]].clamp(-1.0, 1.0))
                    } else {
                        0.0
                    };
                }
            }
            slices.push((z, plane));
        }
        let assembled = slices_to_volume(&slices, entry.spacing, Modality::T1w)?;
        let restored = pad_crop_inverse(&assembled, &entry.pad, 0.0);
        write_nifti(&out_dir.join(format!("{}.nii", entry.subject_id)), &restored)?;
        Ok(())
    })?;

    println!("sample: wrote {n} {label} volumes under {}", out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// One subject × region measurement pair.
#[derive(Debug, Clone)]
pub struct RegionSubjectRow {
    pub subject_id: String,
    pub method: String,
    pub region: String,
    pub dice: f64,
    pub v_gt_mm3: f64,
    pub v_gen_mm3: f64,
    pub rve_pct: f64,
}

/// Everything the evaluate stage computes, before any file is written.
pub struct Evaluation {
    pub methods: Vec<String>,
    pub report: MetricsReport,
    pub per_region_subject: Vec<RegionSubjectRow>,
    /// Ready-to-write per-method subject tables (GT rows then GEN rows).
    pub subject_tables: BTreeMap<String, String>,
    pub notes: Vec<String>,
}

struct GtSubject {
    entry: PhantomEntry,
    t1w: Volume,
    labels: Volume,
    keep: Vec<usize>,
    /// Intensity range of the retained ground-truth slices, used as the
    /// peak value for PSNR and the dynamic range for SSIM.
    range: f64,
}

/// Copy the retained axial slices into a dense (K, H, W) block.
fn gather_slices(data: &Array3<f32>, keep: &[usize]) -> Array3<f32> {
    let (_, h, w) = data.dim();
    let mut out = Array3::<f32>::zeros((keep.len(), h, w));
    for (k, &z) in keep.iter().enumerate() {
        out.index_axis_mut(Axis(0), k)
            .assign(&data.index_axis(Axis(0), z));
    }
    out
}

fn binary_mask(data: &Array3<f32>, label: f32) -> Array3<f32> {
    data.mapv(|v| if v == label { 1.0 } else { 0.0 })
}

fn sample_sd(xs: &[f64], mean: f64) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

fn finite_sorted(xs: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    v
}

struct SubjectEval {
    image: SubjectImageRow,
    regions: Vec<RegionSubjectRow>,
}

fn evaluate_subject(
    cfg: &RunConfig,
    method: &str,
    gt: &GtSubject,
    gen_dir: &Path,
) -> Result<SubjectEval> {
    let want_image = cfg.wants_metric("psnr") || cfg.wants_metric("ssim");
    let want_regions =
        cfg.wants_metric("dice") || cfg.wants_metric("icc") || cfg.wants_metric("rve");
    let gen_path = gen_dir.join(format!("{}.nii", gt.entry.subject_id));
    if !gen_path.is_file() {
        return Err(SynthError::Data(format!(
            "{method}: no synthesized volume for {} (expected {})",
            gt.entry.subject_id,
            gen_path.display()
        )));
    }
    let gen = read_nifti(&gen_path, Modality::T1w)?;
    if gen.data.dim() != gt.t1w.data.dim() {
        return Err(SynthError::Shape(format!(
            "{method}/{}: synthesized volume is {:?}, ground truth is {:?}",
            gt.entry.subject_id,
            gen.data.dim(),
            gt.t1w.data.dim()
        )));
    }

    let mut psnr_db = f64::NAN;
    let mut ssim_mean = f64::NAN;
    if want_image {
        let gt_keep = gather_slices(&gt.t1w.data, &gt.keep);
        let gen_keep = gather_slices(&gen.data, &gt.keep);
        if cfg.wants_metric("psnr") {
            psnr_db = psnr(gt_keep.view(), gen_keep.view(), gt.range)?;
        }
        if cfg.wants_metric("ssim") {
            let mut acc = 0.0;
            for k in 0..gt.keep.len() {
                acc += ssim(
                    gt_keep.index_axis(Axis(0), k),
                    gen_keep.index_axis(Axis(0), k),
                    gt.range,
                )?;
            }
            ssim_mean = acc / gt.keep.len() as f64;
        }
    }
    let image = SubjectImageRow {
        subject_id: gt.entry.subject_id.clone(),
        method: method.to_string(),
        psnr_db,
        ssim: ssim_mean,
        slices_used: gt.keep.len(),
        slices_total: gt.t1w.data.dim().0,
    };

    let mut regions = Vec::new();
    if want_regions {
        let seg = segment_t1w(&gen.data, gt.entry.n_structures);
        let voxel = gt.labels.voxel_mm3();
        for r in 2..=gt.entry.n_structures + 1 {
            let gt_mask = binary_mask(&gt.labels.data, r as f32);
            let gen_mask = binary_mask(&seg, r as f32);
            let dc = dice(gt_mask.view(), gen_mask.view())?;
            let v_gt = gt_mask.iter().filter(|&&v| v > 0.0).count() as f64 * voxel;
            let v_gen = gen_mask.iter().filter(|&&v| v > 0.0).count() as f64 * voxel;
            let rve = if v_gt > 0.0 {
                relative_volume_error(v_gen, v_gt)?
            } else {
                f64::NAN
            };
            regions.push(RegionSubjectRow {
                subject_id: gt.entry.subject_id.clone(),
                method: method.to_string(),
                region: format!("structure_{}", r - 1),
                dice: dc.value,
                v_gt_mm3: v_gt,
                v_gen_mm3: v_gen,
                rve_pct: rve,
            });
        }
    }
    Ok(SubjectEval { image, regions })
}

/// Score every synthesized method directory against the raw ground truth.
/// Pure computation — [`cmd_evaluate`] writes the files.
pub fn evaluate_run(cfg: &RunConfig) -> Result<Evaluation> {
    let raw_dir = &cfg.paths.raw_dir;
    let out_dir = &cfg.paths.output_dir;
    let entries = read_raw_manifest(raw_dir)?;
    let test: Vec<PhantomEntry> = entries.into_iter().filter(|e| e.split == "test").collect();
    if test.is_empty() {
        return Err(SynthError::Data("manifest holds no test-split subjects".into()));
    }
    let n_structures = test[0].n_structures;
    if test.iter().any(|e| e.n_structures != n_structures) {
        return Err(SynthError::Data(
            "test subjects disagree on structure count".into(),
        ));
    }

    // Every directory under the output root that holds a volume for the
    // first test subject is treated as one method's synthesis output.
    let mut methods = Vec::new();
    if out_dir.is_dir() {
        for de in std::fs::read_dir(out_dir)? {
            let de = de?;
            if !de.path().is_dir() {
                continue;
            }
            let name = de.file_name().to_string_lossy().to_string();
            if de.path().join(format!("{}.nii", test[0].subject_id)).is_file() {
                methods.push(name);
            }
        }
    }
    methods.sort();
    if methods.is_empty() {
        return Err(SynthError::Data(format!(
            "no synthesized volumes under {}; run `synth sample` first",
            out_dir.display()
        )));
    }

    let gts = parallel_map(test.len(), |i| {
        let entry = test[i].clone();
        let t1w = read_subject_volume(raw_dir, &entry, "t1w")?;
        let labels = read_subject_volume(raw_dir, &entry, "labels")?;
        let keep = slice_filter(t1w.data.view(), cfg.evaluate.background);
        if keep.is_empty() {
            return Err(SynthError::Data(format!(
                "{}: every ground-truth slice is background",
                entry.subject_id
            )));
        }
        let kept = gather_slices(&t1w.data, &keep);
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in kept.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !(hi > lo) {
            return Err(SynthError::Data(format!(
                "{}: retained ground truth is constant; no dynamic range",
                entry.subject_id
            )));
        }
        Ok(GtSubject {
            entry,
            t1w,
            labels,
            keep,
            range: (hi - lo) as f64,
        })
    })?;

    let mut report = MetricsReport::default();
    let mut per_region_subject: Vec<RegionSubjectRow> = Vec::new();
    let mut subject_tables = BTreeMap::new();
    let mut notes = Vec::new();
    let mut psnr_by_method: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut ssim_by_method: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let want_regions =
        cfg.wants_metric("dice") || cfg.wants_metric("icc") || cfg.wants_metric("rve");

    for method in &methods {
        let gen_dir = out_dir.join(method);
        let evals = parallel_map(gts.len(), |i| evaluate_subject(cfg, method, &gts[i], &gen_dir))?;

        psnr_by_method.insert(method.clone(), evals.iter().map(|e| e.image.psnr_db).collect());
        ssim_by_method.insert(method.clone(), evals.iter().map(|e| e.image.ssim).collect());

        if want_regions {
            for r in 0..n_structures {
                let region = format!("structure_{}", r + 1);
                let dices: Vec<f64> = evals.iter().map(|e| e.regions[r].dice).collect();
                let v_gt: Vec<f64> = evals.iter().map(|e| e.regions[r].v_gt_mm3).collect();
                let v_gen: Vec<f64> = evals.iter().map(|e| e.regions[r].v_gen_mm3).collect();
                let rves = finite_sorted(
                    &evals.iter().map(|e| e.regions[r].rve_pct).collect::<Vec<_>>(),
                );
                let dice_mean = dices.iter().sum::<f64>() / dices.len() as f64;
                let dice_sd = sample_sd(&dices, dice_mean);
                let icc = if gts.len() >= 2 {
                    let mut ratings = Array2::<f64>::zeros((gts.len(), 2));
                    for (i, (&g, &s)) in v_gt.iter().zip(&v_gen).enumerate() {
                        ratings[[i, 0]] = g;
                        ratings[[i, 1]] = s;
                    }
                    icc2k(&ratings)?
                } else {
                    notes.push(format!(
                        "{method}/{region}: ICC needs ≥ 2 subjects, got {}",
                        gts.len()
                    ));
                    crate::metrics::Icc {
                        absolute_agreement: f64::NAN,
                        consistency: f64::NAN,
                        degenerate: true,
                    }
                };
                let rve_median = if rves.is_empty() {
                    f64::NAN
                } else {
                    quantile(&rves, 0.5)
                };
                report.per_region.push(RegionRow {
                    region,
                    method: method.clone(),
                    dice_mean,
                    dice_sd,
                    icc2k: icc.absolute_agreement,
                    icc_consistency: icc.consistency,
                    icc_degenerate: icc.degenerate,
                    rve_median_pct: rve_median,
                });
            }

            // Subject table for the regression stage: ground-truth rows from
            // the measured label volumes, generated rows from the segmented
            // synthesized volumes.
            let mut table = String::from("subject_id,age,sex,etiv,source");
            for r in 1..=n_structures {
                let _ = write!(table, ",structure_{r}");
            }
            table.push('\n');
            for (source, pick) in [("GT", 0usize), ("GEN", 1usize)] {
                for e in &evals {
                    let demo = &gts
                        .iter()
                        .find(|g| g.entry.subject_id == e.image.subject_id)
                        .expect("evaluated subject is in the cohort")
                        .entry
                        .demographics;
                    let _ = write!(
                        table,
                        "{},{:.6},{},{:.6},{source}",
                        e.image.subject_id,
                        demo.age_years,
                        if demo.sex_male { 1 } else { 0 },
                        demo.etiv_mm3
                    );
                    for row in &e.regions {
                        let v = if pick == 0 { row.v_gt_mm3 } else { row.v_gen_mm3 };
                        let _ = write!(table, ",{v:.6}");
                    }
                    table.push('\n');
                }
            }
            subject_tables.insert(method.clone(), table);
        }

        for e in evals {
            report.per_subject.push(e.image);
            per_region_subject.extend(e.regions);
        }
    }

    if cfg.wants_metric("tests") && methods.len() >= 2 {
        for i in 0..methods.len() {
            for j in i + 1..methods.len() {
                let pairs = [
                    ("psnr", &psnr_by_method),
                    ("ssim", &ssim_by_method),
                ];
                for (metric, by_method) in pairs {
                    if !cfg.wants_metric(metric) {
                        continue;
                    }
                    let a = &by_method[&methods[i]];
                    let b = &by_method[&methods[j]];
                    let mut fa = Vec::new();
                    let mut fb = Vec::new();
                    for (&x, &y) in a.iter().zip(b) {
                        if x.is_finite() && y.is_finite() {
                            fa.push(x);
                            fb.push(y);
                        }
                    }
                    if fa.len() < 5 {
                        notes.push(format!(
                            "skipping {metric} test {} vs {}: {} finite pairs (need ≥ 5)",
                            methods[i],
                            methods[j],
                            fa.len()
                        ));
                        continue;
                    }
                    let tr = paired_tests(&fa, &fb, cfg.evaluate.correction_m)?;
                    report.tests.push(TestRow {
                        metric: metric.to_string(),
                        method_a: methods[i].clone(),
                        method_b: methods[j].clone(),
                        n: tr.n,
                        t_stat: tr.t_stat,
                        t_p: tr.t_p,
                        wilcoxon_p: tr.wilcoxon_p,
                        bonferroni_threshold: tr.bonferroni_threshold,
                        significant: tr.t_significant && tr.wilcoxon_significant,
                    });
                }
            }
        }
    }

    Ok(Evaluation {
        methods,
        report,
        per_region_subject,
        subject_tables,
        notes,
    })
}

/// Score synthesized volumes and write the CSV reports, plots, and
/// per-method subject tables under the output directory.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let ev = evaluate_run(cfg)?;
    let out_dir = &cfg.paths.output_dir;
    std::fs::create_dir_all(out_dir)?;

    if !ev.report.per_subject.is_empty() {
        let mut csv = String::from("subject_id,method,psnr_db,ssim,slices_used,slices_total\n");
        for r in &ev.report.per_subject {
            let _ = writeln!(
                csv,
                "{},{},{:.6},{:.6},{},{}",
                r.subject_id, r.method, r.psnr_db, r.ssim, r.slices_used, r.slices_total
            );
        }
        write_text(&out_dir.join("per_subject.csv"), &csv)?;
    }

    if !ev.per_region_subject.is_empty() {
        let mut csv = String::from("subject_id,method,region,dice,v_gt_mm3,v_gen_mm3,rve_pct\n");
        for r in &ev.per_region_subject {
            let _ = writeln!(
                csv,
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.subject_id, r.method, r.region, r.dice, r.v_gt_mm3, r.v_gen_mm3, r.rve_pct
            );
        }
        write_text(&out_dir.join("per_region_subject.csv"), &csv)?;

        let mut csv = String::from(
            "region,method,dice_mean,dice_sd,icc2k,icc_consistency,icc_degenerate,rve_median_pct\n",
        );
        for r in &ev.report.per_region {
            let _ = writeln!(
                csv,
                "{},{},{:.6},{:.6},{:.6},{:.6},{},{:.6}",
                r.region,
                r.method,
                r.dice_mean,
                r.dice_sd,
                r.icc2k,
                r.icc_consistency,
                r.icc_degenerate,
                r.rve_median_pct
            );
        }
        write_text(&out_dir.join("per_region.csv"), &csv)?;
    }

    if cfg.wants_metric("tests") {
        let mut csv = String::from(
            "metric,method_a,method_b,n,t_stat,t_p,wilcoxon_p,bonferroni_threshold,significant\n",
        );
        for t in &ev.report.tests {
            let _ = writeln!(
                csv,
                "{},{},{},{},{:.6},{:.6e},{:.6e},{:.6e},{}",
                t.metric,
                t.method_a,
                t.method_b,
                t.n,
                t.t_stat,
                t.t_p,
                t.wilcoxon_p,
                t.bonferroni_threshold,
                t.significant
            );
        }
        write_text(&out_dir.join("tests.csv"), &csv)?;
    }

    for (method, table) in &ev.subject_tables {
        write_text(&out_dir.join(format!("subject_table_{method}.csv")), table)?;
    }

    // Plots: distribution of each image metric per method, mean Dice per
    // method × region. Infinite values (identical volumes) cannot be drawn.
    for (metric, by) in [("psnr", "dB"), ("ssim", "index")] {
        if !cfg.wants_metric(metric) {
            continue;
        }
        let mut series = Vec::new();
        for m in &ev.methods {
            let vals: Vec<f64> = ev
                .report
                .per_subject
                .iter()
                .filter(|r| &r.method == m)
                .map(|r| if metric == "psnr" { r.psnr_db } else { r.ssim })
                .filter(|v| v.is_finite())
                .collect();
            if !vals.is_empty() {
                series.push(Series { label: m.clone(), values: vals });
            }
        }
        if !series.is_empty() {
            let svg = box_plot(&format!("{} per subject", metric.to_uppercase()), by, &series)?;
            write_text(&out_dir.join(format!("{metric}_box.svg")), &svg)?;
        }
    }
    if cfg.wants_metric("dice") {
        let bars: Vec<(String, f64)> = ev
            .report
            .per_region
            .iter()
            .filter(|r| r.dice_mean.is_finite())
            .map(|r| (format!("{}/{}", r.method, r.region), r.dice_mean))
            .collect();
        if !bars.is_empty() {
            let svg = bar_chart("Mean Dice per region", "Dice", &bars)?;
            write_text(&out_dir.join("dice_bar.svg"), &svg)?;
        }
    }

    // Console summary.
    for m in &ev.methods {
        let psnrs: Vec<f64> = ev
            .report
            .per_subject
            .iter()
            .filter(|r| &r.method == m)
            .map(|r| r.psnr_db)
            .collect();
        let ssims: Vec<f64> = ev
            .report
            .per_subject
            .iter()
            .filter(|r| &r.method == m)
            .map(|r| r.ssim)
            .collect();
        let (pm, pf, pt) = mean_finite(&psnrs);
        let (sm, _, _) = mean_finite(&ssims);
        println!(
            "evaluate {m}: PSNR {pm:.2} dB over {pf}/{pt} finite subjects, SSIM {sm:.4}"
        );
    }
    for t in &ev.report.tests {
        println!(
            "evaluate test {} {} vs {}: t p={:.3e}, wilcoxon p={:.3e}, significant={}",
            t.metric, t.method_a, t.method_b, t.t_p, t.wilcoxon_p, t.significant
        );
    }
    for n in &ev.notes {
        println!("evaluate note: {n}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// biostats
// ---------------------------------------------------------------------------

/// Fit every region's regression for both cohort sources of one subject
/// table. Head size enters volume models and is excluded from any region
/// whose name marks it as a thickness measure.
pub fn biostats_fits(
    records: &[SubjectRecord],
) -> Result<(Vec<RegressionResult>, Vec<RegressionResult>)> {
    let rois = roi_names(records)?;
    let (gt, gen) = split_by_source(records);
    if gt.is_empty() || gen.is_empty() {
        return Err(SynthError::Data(
            "subject table needs both GT and GEN rows".into(),
        ));
    }
    let fit_all = |recs: &[SubjectRecord]| -> Result<Vec<RegressionResult>> {
        rois.iter()
            .map(|roi| fit_mlr(recs, roi, !roi.to_ascii_lowercase().contains("thickness")))
            .collect()
    };
    Ok((fit_all(&gt)?, fit_all(&gen)?))
}

/// Compare the ground-truth and generated cohort regressions for one
/// method's subject table and write the concordance CSV and summary.
pub fn cmd_biostats(cfg: &RunConfig, method: Option<&str>) -> Result<()> {
    let method = method.unwrap_or("diffusion");
    let out_dir = &cfg.paths.output_dir;
    let table = out_dir.join(format!("subject_table_{method}.csv"));
    let file = std::fs::File::open(&table).map_err(|e| {
        SynthError::Data(format!(
            "{}: {e}; run `synth evaluate` first",
            table.display()
        ))
    })?;
    let records = read_subject_table(file)?;
    let (gt_fits, gen_fits) = biostats_fits(&records)?;
    let report: ConcordanceReport = concordance_report(&gt_fits, &gen_fits)?;

    let mut csv = Vec::new();
    write_concordance_csv(&report, &mut csv)?;
    std::fs::write(out_dir.join(format!("biostats_{method}.csv")), &csv)?;
    let text = concordance_summary(&report);
    write_text(&out_dir.join(format!("biostats_{method}.txt")), &text)?;
    print!("{text}");
    Ok(())
}
