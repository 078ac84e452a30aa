//! Image-quality and segmentation-based evaluation: PSNR, SSIM, Dice
//! overlap, intraclass correlation of volumetric measurements, relative
//! volume error, and the paired significance tests with Bonferroni
//! correction.
//!
//! Every function here is pure; aggregation across subjects and regions is
//! the caller's job.

use crate::error::{Result, SynthError};
use ndarray::{Array2, ArrayView, ArrayView2, ArrayView3, Dimension};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

// ---------------------------------------------------------------------------
// Image quality
// ---------------------------------------------------------------------------

/// Peak signal-to-noise ratio in dB: `10·log10(max_value² / MSE)`.
///
/// `max_value` is the maximum possible pixel value — by convention the
/// de-normalized data range of the target (2.0 for images in [−1, 1]).
/// Identical inputs have zero MSE and return the `+∞` sentinel; exclude it
/// from averages via [`mean_finite`].
pub fn psnr<D: Dimension>(
    r: ArrayView<f32, D>,
    t: ArrayView<f32, D>,
    max_value: f64,
) -> Result<f64> {
    if r.shape() != t.shape() {
        return Err(SynthError::Shape(format!(
            "psnr shapes differ: {:?} vs {:?}",
            r.shape(),
            t.shape()
        )));
    }
    if !(max_value > 0.0) {
        return Err(SynthError::Parameter(format!(
            "max_value must be positive, got {max_value}"
        )));
    }
    if r.is_empty() {
        return Err(SynthError::Data("psnr on empty image".into()));
    }
    let mut sum = 0.0f64;
    for (&a, &b) in r.iter().zip(t.iter()) {
        let d = a as f64 - b as f64;
        sum += d * d;
    }
    let mse = sum / r.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

/// Mean over finite entries, with `(mean, n_finite, n_total)` so callers can
/// report how many `+∞` PSNR sentinels were excluded.
pub fn mean_finite(xs: &[f64]) -> (f64, usize, usize) {
    let finite: Vec<f64> = xs.iter().copied().filter(|v| v.is_finite()).collect();
    let mean = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    (mean, finite.len(), xs.len())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-region filtering: rows then columns, output
/// `(h-10, w-10)`.
fn filter_valid(img: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let (oh, ow) = (h - (SSIM_WINDOW - 1), w - (SSIM_WINDOW - 1));
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * img[[y, x + i]];
            }
            rows[[y, x]] = s;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * rows[[y + i, x]];
            }
            out[[y, x]] = s;
        }
    }
    out
}

/// Mean structural similarity over 11×11 Gaussian windows (σ = 1.5),
/// `C1 = (0.01·L)²`, `C2 = (0.03·L)²` for dynamic range `L`. Windows are
/// valid-only (no padding).
pub fn ssim(r: ArrayView2<f32>, t: ArrayView2<f32>, data_range: f64) -> Result<f64> {
    if r.dim() != t.dim() {
        return Err(SynthError::Shape(format!(
            "ssim shapes differ: {:?} vs {:?}",
            r.dim(),
            t.dim()
        )));
    }
    if !(data_range > 0.0) {
        return Err(SynthError::Parameter(format!(
            "data_range must be positive, got {data_range}"
        )));
    }
    let (h, w) = r.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(SynthError::Parameter(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);

    let x = r.mapv(|v| v as f64);
    let y = t.mapv(|v| v as f64);
    let xx = &x * &x;
    let yy = &y * &y;
    let xy = &x * &y;

    let k = gaussian_kernel();
    let mu_x = filter_valid(&x, &k);
    let mu_y = filter_valid(&y, &k);
    let m_xx = filter_valid(&xx, &k);
    let m_yy = filter_valid(&yy, &k);
    let m_xy = filter_valid(&xy, &k);

    let mut total = 0.0f64;
    let n = mu_x.len() as f64;
    for ((&mx, &my), ((&sxx, &syy), &sxy)) in mu_x
        .iter()
        .zip(mu_y.iter())
        .zip(m_xx.iter().zip(m_yy.iter()).zip(m_xy.iter()))
    {
        let var_x = sxx - mx * mx;
        let var_y = syy - my * my;
        let cov = sxy - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
        total += num / den;
    }
    Ok(total / n)
}

// ---------------------------------------------------------------------------
// Segmentation overlap and volumes
// ---------------------------------------------------------------------------

/// Dice similarity with its degenerate case made explicit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dice {
    pub value: f64,
    /// Both masks were empty; the score (1.0) is a convention, not a
    /// measurement.
    pub both_empty: bool,
}

/// `2·|G∩S| / (|G| + |S|)` over binary masks (values exactly 0 or 1).
pub fn dice(g: ArrayView3<f32>, s: ArrayView3<f32>) -> Result<Dice> {
    if g.dim() != s.dim() {
        return Err(SynthError::Shape(format!(
            "dice shapes differ: {:?} vs {:?}",
            g.dim(),
            s.dim()
        )));
    }
    let (mut ng, mut ns, mut inter) = (0u64, 0u64, 0u64);
    for (&a, &b) in g.iter().zip(s.iter()) {
        if (a != 0.0 && a != 1.0) || (b != 0.0 && b != 1.0) {
            return Err(SynthError::Data(format!(
                "dice requires binary masks, found values {a} / {b}"
            )));
        }
        let (ba, bb) = (a == 1.0, b == 1.0);
        ng += ba as u64;
        ns += bb as u64;
        inter += (ba && bb) as u64;
    }
    if ng + ns == 0 {
        return Ok(Dice {
            value: 1.0,
            both_empty: true,
        });
    }
    Ok(Dice {
        value: 2.0 * inter as f64 / (ng + ns) as f64,
        both_empty: false,
    })
}

/// Intraclass correlation of a subjects×methods rating matrix.
#[derive(Debug, Clone, Copy)]
pub struct Icc {
    /// ICC(2,k): average-measures, absolute agreement (the default form).
    pub absolute_agreement: f64,
    /// ICC(3,k): average-measures, consistency.
    pub consistency: f64,
    /// Between-subject variance is zero; both values are NaN.
    pub degenerate: bool,
}

/// Two-way ANOVA decomposition (rows = subjects, columns = methods):
/// `ICC(2,k) = (MS_rows − MS_err) / (MS_rows + (MS_cols − MS_err)/n)`.
pub fn icc2k(ratings: &Array2<f64>) -> Result<Icc> {
    let (n, k) = ratings.dim();
    if n < 2 || k < 2 {
        return Err(SynthError::Parameter(format!(
            "icc needs ≥ 2 subjects and ≥ 2 methods, got {n}x{k}"
        )));
    }
    if ratings.iter().any(|v| !v.is_finite()) {
        return Err(SynthError::Data("icc ratings contain non-finite cells".into()));
    }
    let grand = ratings.sum() / (n * k) as f64;
    let row_means: Vec<f64> = (0..n)
        .map(|i| ratings.row(i).sum() / k as f64)
        .collect();
    let col_means: Vec<f64> = (0..k)
        .map(|j| ratings.column(j).sum() / n as f64)
        .collect();

    let ssr: f64 = row_means.iter().map(|&m| (m - grand).powi(2)).sum::<f64>() * k as f64;
    let ssc: f64 = col_means.iter().map(|&m| (m - grand).powi(2)).sum::<f64>() * n as f64;
    let mut sse = 0.0f64;
    for i in 0..n {
        for j in 0..k {
            let resid = ratings[[i, j]] - row_means[i] - col_means[j] + grand;
            sse += resid * resid;
        }
    }
    let msr = ssr / (n - 1) as f64;
    let msc = ssc / (k - 1) as f64;
    let mse = sse / ((n - 1) * (k - 1)) as f64;

    if ssr == 0.0 {
        return Ok(Icc {
            absolute_agreement: f64::NAN,
            consistency: f64::NAN,
            degenerate: true,
        });
    }
    let abs_agree = (msr - mse) / (msr + (msc - mse) / n as f64);
    let consistency = (msr - mse) / msr;
    if !abs_agree.is_finite() || !consistency.is_finite() {
        return Ok(Icc {
            absolute_agreement: f64::NAN,
            consistency: f64::NAN,
            degenerate: true,
        });
    }
    Ok(Icc {
        absolute_agreement: abs_agree,
        consistency,
        degenerate: false,
    })
}

/// `(v_model − v_gt) / v_gt × 100`.
pub fn relative_volume_error(v_model: f64, v_gt: f64) -> Result<f64> {
    if !(v_gt > 0.0) {
        return Err(SynthError::Data(format!(
            "ground-truth volume must be positive, got {v_gt}"
        )));
    }
    Ok((v_model - v_gt) / v_gt * 100.0)
}

// ---------------------------------------------------------------------------
// Paired significance tests
// ---------------------------------------------------------------------------

/// Paired t and Wilcoxon signed-rank results with the Bonferroni threshold
/// applied.
#[derive(Debug, Clone)]
pub struct TestReport {
    pub n: usize,
    pub t_stat: f64,
    /// Two-sided paired-t p-value.
    pub t_p: f64,
    /// `min(W+, W−)` on tie-averaged ranks, zeros dropped.
    pub wilcoxon_w: f64,
    /// Two-sided signed-rank p-value: exact for ≤ 20 nonzero differences,
    /// normal approximation with tie and continuity corrections beyond.
    pub wilcoxon_p: f64,
    pub wilcoxon_exact: bool,
    pub n_nonzero: usize,
    /// Every difference was zero; the Wilcoxon p (1.0) is a convention.
    pub degenerate_wilcoxon: bool,
    /// 0.05 / correction_m.
    pub bonferroni_threshold: f64,
    pub t_significant: bool,
    pub wilcoxon_significant: bool,
}

/// Paired comparison of two equal-length samples with Bonferroni-corrected
/// significance at `0.05 / correction_m`.
pub fn paired_tests(a: &[f64], b: &[f64], correction_m: usize) -> Result<TestReport> {
    if a.len() != b.len() {
        return Err(SynthError::Parameter(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 5 {
        return Err(SynthError::Parameter(format!(
            "paired tests need ≥ 5 pairs, got {}",
            a.len()
        )));
    }
    if correction_m == 0 {
        return Err(SynthError::Parameter("correction_m must be ≥ 1".into()));
    }
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(SynthError::Data("paired differences contain non-finite values".into()));
    }

    // Paired t.
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let (t_stat, t_p) = if sd == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY * mean.signum(), 0.0)
        }
    } else {
        let t = mean / (sd / (n as f64).sqrt());
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .map_err(|e| SynthError::Numeric(format!("t distribution: {e}")))?;
        (t, (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0))
    };

    // Wilcoxon signed-rank on nonzero differences.
    let nz: Vec<f64> = d.iter().copied().filter(|&x| x != 0.0).collect();
    let n_nonzero = nz.len();
    let threshold = 0.05 / correction_m as f64;
    if n_nonzero == 0 {
        return Ok(TestReport {
            n,
            t_stat,
            t_p,
            wilcoxon_w: 0.0,
            wilcoxon_p: 1.0,
            wilcoxon_exact: true,
            n_nonzero,
            degenerate_wilcoxon: true,
            bonferroni_threshold: threshold,
            t_significant: t_p < threshold,
            wilcoxon_significant: false,
        });
    }

    let ranks = tie_averaged_ranks(&nz);
    let w_plus: f64 = nz
        .iter()
        .zip(&ranks)
        .filter(|(&x, _)| x > 0.0)
        .map(|(_, &r)| r)
        .sum();
    let total: f64 = ranks.iter().sum();
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);

    let (p, exact) = if n_nonzero <= 20 {
        (exact_signed_rank_p(&ranks, w_plus), true)
    } else {
        (normal_signed_rank_p(&ranks, w_plus), false)
    };

    Ok(TestReport {
        n,
        t_stat,
        t_p,
        wilcoxon_w: w,
        wilcoxon_p: p,
        wilcoxon_exact: exact,
        n_nonzero,
        degenerate_wilcoxon: false,
        bonferroni_threshold: threshold,
        t_significant: t_p < threshold,
        wilcoxon_significant: p < threshold,
    })
}

/// Ranks of `|values|` (1-based), averaging over ties.
fn tie_averaged_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| {
        values[i]
            .abs()
            .partial_cmp(&values[j].abs())
            .expect("finite")
    });
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]].abs() == values[idx[i]].abs() {
            j += 1;
        }
        // Positions i..=j (0-based) share the average of ranks i+1..=j+1.
        let avg = (i + j + 2) as f64 / 2.0;
        for &ii in &idx[i..=j] {
            ranks[ii] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Exact two-sided p-value of `W+` for the given rank multiset: dynamic
/// programming over doubled ranks (tie averages are half-integers), then
/// `min(1, 2·min(lower tail, upper tail))`.
fn exact_signed_rank_p(ranks: &[f64], w_plus: f64) -> f64 {
    let r2: Vec<usize> = ranks.iter().map(|&r| (2.0 * r).round() as usize).collect();
    let total: usize = r2.iter().sum();
    let mut dp = vec![0.0f64; total + 1];
    dp[0] = 1.0;
    for &r in &r2 {
        for s in (r..=total).rev() {
            dp[s] += dp[s - r];
        }
    }
    let count: f64 = dp.iter().sum(); // 2^n, exactly representable for n ≤ 20
    let w2 = (2.0 * w_plus).round() as usize;
    let lower: f64 = dp[..=w2].iter().sum::<f64>() / count;
    let upper: f64 = dp[w2..].iter().sum::<f64>() / count;
    (2.0 * lower.min(upper)).min(1.0)
}

/// Normal approximation with tie and continuity corrections.
fn normal_signed_rank_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mu = n * (n + 1.0) / 4.0;
    // Base variance minus the tie correction Σ(t³−t)/48 over tie groups.
    let mut var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        if t > 1.0 {
            var -= (t * t * t - t) / 48.0;
        }
        i = j + 1;
    }
    if var <= 0.0 {
        return 1.0;
    }
    let diff = w_plus - mu;
    let z = (diff - 0.5 * diff.signum()) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0)
}

// ---------------------------------------------------------------------------
// Slice selection
// ---------------------------------------------------------------------------

/// Indices of slices whose ground-truth plane contains any non-background
/// voxel; background-only slices are identical across methods by
/// construction and would inflate similarity scores.
pub fn slice_filter(gt: ArrayView3<f32>, background: f32) -> Vec<usize> {
    (0..gt.dim().0)
        .filter(|&z| {
            gt.index_axis(ndarray::Axis(0), z)
                .iter()
                .any(|&v| v != background)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Report rows
// ---------------------------------------------------------------------------

/// Per-subject image-quality row.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SubjectImageRow {
    pub subject_id: String,
    pub method: String,
    /// May be `+∞` (identical volumes); serialized as `inf`.
    pub psnr_db: f64,
    pub ssim: f64,
    pub slices_used: usize,
    pub slices_total: usize,
}

/// Per-region segmentation-agreement row (aggregated over subjects).
#[derive(Debug, Clone, serde::Serialize)]
pub struct RegionRow {
    pub region: String,
    pub method: String,
    pub dice_mean: f64,
    pub dice_sd: f64,
    pub icc2k: f64,
    pub icc_consistency: f64,
    pub icc_degenerate: bool,
    pub rve_median_pct: f64,
}

/// One paired comparison between two methods on one metric.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TestRow {
    pub metric: String,
    pub method_a: String,
    pub method_b: String,
    pub n: usize,
    pub t_stat: f64,
    pub t_p: f64,
    pub wilcoxon_p: f64,
    pub bonferroni_threshold: f64,
    pub significant: bool,
}

/// Full evaluation output: image quality per subject, segmentation
/// agreement per region, and the paired tests between methods.
#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub per_subject: Vec<SubjectImageRow>,
    pub per_region: Vec<RegionRow>,
    pub tests: Vec<TestRow>,
}
