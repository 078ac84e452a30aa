//! Group-level plausibility analysis: per-region multiple linear regression
//! of morphometric measurements on age, sex, and head size; effect sizes for
//! aging and sex differences; and the side-by-side concordance report
//! between measurements from real and from synthesized images.

use crate::error::{Result, SynthError};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;
use std::io::{Read, Write};

/// Sex coding: female = 0, male = 1, so the sex coefficient is the
/// male-minus-female adjusted difference.
pub const SEX_FEMALE: f64 = 0.0;
pub const SEX_MALE: f64 = 1.0;

/// Which cohort a measurement row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// Measured on real images.
    Gt,
    /// Measured on synthesized images.
    Gen,
}

impl Source {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "GT" => Ok(Source::Gt),
            "GEN" => Ok(Source::Gen),
            other => Err(SynthError::Data(format!(
                "unknown source {other:?}, expected GT or GEN"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Gt => "GT",
            Source::Gen => "GEN",
        }
    }
}

/// One subject's demographics plus per-region measurements (volumes in mm³,
/// thickness in mm).
#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub subject_id: String,
    /// Years.
    pub age: f64,
    /// [`SEX_FEMALE`] or [`SEX_MALE`].
    pub sex: f64,
    /// Estimated total intracranial volume, mm³.
    pub etiv: f64,
    pub source: Source,
    /// Region name → measurement.
    pub measures: BTreeMap<String, f64>,
}

impl SubjectRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.age > 0.0) {
            return Err(SynthError::Data(format!(
                "subject {}: age must be positive, got {}",
                self.subject_id, self.age
            )));
        }
        if self.sex != SEX_FEMALE && self.sex != SEX_MALE {
            return Err(SynthError::Data(format!(
                "subject {}: sex must be 0 or 1, got {}",
                self.subject_id, self.sex
            )));
        }
        if !(self.etiv > 0.0) {
            return Err(SynthError::Data(format!(
                "subject {}: etiv must be positive, got {}",
                self.subject_id, self.etiv
            )));
        }
        for (roi, &v) in &self.measures {
            if !v.is_finite() || v < 0.0 {
                return Err(SynthError::Data(format!(
                    "subject {}: measure {roi} is {v}",
                    self.subject_id
                )));
            }
        }
        Ok(())
    }
}

/// One fitted coefficient with its two-sided t-test.
#[derive(Debug, Clone)]
pub struct Coefficient {
    /// "intercept", "age", "sex", or "etiv".
    pub name: String,
    pub beta: f64,
    pub se: f64,
    pub t: f64,
    pub p: f64,
}

/// Ordinary-least-squares fit of one region's measurement on demographics.
#[derive(Debug, Clone)]
pub struct RegressionResult {
    pub roi: String,
    pub n: usize,
    /// In design order: intercept, age (if present), sex, etiv (if present).
    pub coefficients: Vec<Coefficient>,
    pub r2: f64,
    pub adjusted_r2: f64,
    pub residuals: Vec<f64>,
    /// Aging effect size; `None` on reduced fits that omit age.
    pub cohen_f_age: Option<f64>,
    /// Sex effect size on covariate-residualized values; `None` on fits
    /// produced as reduced models.
    pub cohen_d_sex: Option<f64>,
}

impl RegressionResult {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn beta(&self, name: &str) -> Option<f64> {
        self.coefficient(name).map(|c| c.beta)
    }

    pub fn p_value(&self, name: &str) -> Option<f64> {
        self.coefficient(name).map(|c| c.p)
    }
}

// ---------------------------------------------------------------------------
// OLS core
// ---------------------------------------------------------------------------

/// Gauss–Jordan solve of `A·x = b` returning `(x, A⁻¹)`; partial pivoting,
/// failure on pivots below `1e-12 × max|A|`.
fn solve_with_inverse(a: &[Vec<f64>], b: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let p = a.len();
    let scale = a
        .iter()
        .flat_map(|row| row.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);

    // Augmented [A | I | b], p × (2p + 1).
    let mut m: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            let mut row = a[i].clone();
            row.extend((0..p).map(|j| if i == j { 1.0 } else { 0.0 }));
            row.push(b[i]);
            row
        })
        .collect();

    for col in 0..p {
        let pivot_row = (col..p)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        if m[pivot_row][col].abs() < tol {
            return Err(SynthError::Data(
                "design matrix is rank-deficient (collinear predictors)".into(),
            ));
        }
        m.swap(col, pivot_row);
        let pv = m[col][col];
        for v in &mut m[col] {
            *v /= pv;
        }
        for r in 0..p {
            if r != col && m[r][col] != 0.0 {
                let factor = m[r][col];
                // Split borrow: copy the pivot row once.
                let pivot: Vec<f64> = m[col].clone();
                for (v, &pvv) in m[r].iter_mut().zip(&pivot) {
                    *v -= factor * pvv;
                }
            }
        }
    }
    let x: Vec<f64> = m.iter().map(|row| row[2 * p]).collect();
    let inv: Vec<Vec<f64>> = m.iter().map(|row| row[p..2 * p].to_vec()).collect();
    Ok((x, inv))
}

struct Ols {
    beta: Vec<f64>,
    se: Vec<f64>,
    r2: f64,
    adjusted_r2: f64,
    residuals: Vec<f64>,
    df: usize,
}

/// OLS on named design columns. Columns are max-abs scaled before forming
/// the normal equations so head-size covariates (~10⁶ mm³) do not wreck the
/// conditioning; estimates are unscaled on the way out.
fn ols(cols: &[Vec<f64>], y: &[f64]) -> Result<Ols> {
    let p = cols.len();
    let n = y.len();
    if n <= p {
        return Err(SynthError::Parameter(format!(
            "regression needs at least {} subjects for {p} coefficients, got {n}",
            p + 1
        )));
    }
    let mut scales = Vec::with_capacity(p);
    for c in cols {
        let s = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if s == 0.0 {
            return Err(SynthError::Data(
                "design matrix has an all-zero column".into(),
            ));
        }
        scales.push(s);
    }

    let mut xtx = vec![vec![0.0f64; p]; p];
    let mut xty = vec![0.0f64; p];
    for i in 0..p {
        for j in i..p {
            let mut s = 0.0;
            for r in 0..n {
                s += cols[i][r] / scales[i] * (cols[j][r] / scales[j]);
            }
            xtx[i][j] = s;
            xtx[j][i] = s;
        }
        let mut s = 0.0;
        for r in 0..n {
            s += cols[i][r] / scales[i] * y[r];
        }
        xty[i] = s;
    }
    let (beta_s, inv_s) = solve_with_inverse(&xtx, &xty)?;
    let beta: Vec<f64> = beta_s.iter().zip(&scales).map(|(&b, &s)| b / s).collect();

    let mut residuals = Vec::with_capacity(n);
    let mut sse = 0.0f64;
    for r in 0..n {
        let fitted: f64 = (0..p).map(|j| beta[j] * cols[j][r]).sum();
        let resid = y[r] - fitted;
        sse += resid * resid;
        residuals.push(resid);
    }
    let ybar = y.iter().sum::<f64>() / n as f64;
    let sst: f64 = y.iter().map(|&v| (v - ybar).powi(2)).sum();
    if sst == 0.0 {
        return Err(SynthError::Data(
            "response has zero variance; nothing to fit".into(),
        ));
    }
    let r2 = 1.0 - sse / sst;
    let df = n - p;
    let adjusted_r2 = 1.0 - (1.0 - r2) * (n as f64 - 1.0) / df as f64;
    let sigma2 = sse / df as f64;
    let se: Vec<f64> = (0..p)
        .map(|j| (sigma2 * inv_s[j][j]).max(0.0).sqrt() / scales[j])
        .collect();
    Ok(Ols {
        beta,
        se,
        r2,
        adjusted_r2,
        residuals,
        df,
    })
}

/// Two-sided p-value for `t` with `df` degrees of freedom.
fn t_p_value(t: f64, df: usize) -> Result<f64> {
    if !t.is_finite() {
        return Ok(0.0);
    }
    let dist = StudentsT::new(0.0, 1.0, df as f64)
        .map_err(|e| SynthError::Numeric(format!("t distribution: {e}")))?;
    Ok((2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
}

fn extract_y(records: &[SubjectRecord], roi: &str) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            r.measures.get(roi).copied().ok_or_else(|| {
                SynthError::Data(format!("subject {} has no measure {roi:?}", r.subject_id))
            })
        })
        .collect()
}

fn check_cohort(records: &[SubjectRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(SynthError::Data("empty subject table".into()));
    }
    for r in records {
        r.validate()?;
    }
    if records.iter().any(|r| r.source != records[0].source) {
        return Err(SynthError::Data(
            "regression input mixes GT and GEN records; fit each cohort separately".into(),
        ));
    }
    Ok(())
}

/// Fit one region's model with a configurable term set.
fn fit_model(
    records: &[SubjectRecord],
    roi: &str,
    with_age: bool,
    include_etiv: bool,
) -> Result<RegressionResult> {
    check_cohort(records)?;
    let y = extract_y(records, roi)?;
    let n = records.len();

    let mut names: Vec<&'static str> = vec!["intercept"];
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
    if with_age {
        names.push("age");
        cols.push(records.iter().map(|r| r.age).collect());
    }
    names.push("sex");
    cols.push(records.iter().map(|r| r.sex).collect());
    if include_etiv {
        names.push("etiv");
        cols.push(records.iter().map(|r| r.etiv).collect());
    }

    let fit = ols(&cols, &y)?;
    let mut coefficients = Vec::with_capacity(names.len());
    for (j, &name) in names.iter().enumerate() {
        let (beta, se) = (fit.beta[j], fit.se[j]);
        let t = if se == 0.0 {
            if beta == 0.0 {
                0.0
            } else {
                f64::INFINITY * beta.signum()
            }
        } else {
            beta / se
        };
        coefficients.push(Coefficient {
            name: name.to_string(),
            beta,
            se,
            t,
            p: t_p_value(t, fit.df)?,
        });
    }
    Ok(RegressionResult {
        roi: roi.to_string(),
        n,
        coefficients,
        r2: fit.r2,
        adjusted_r2: fit.adjusted_r2,
        residuals: fit.residuals,
        cohen_f_age: None,
        cohen_d_sex: None,
    })
}

/// Per-region multiple linear regression of the measurement on age and sex,
/// plus head size when `include_etiv` (volumes yes, cortical thickness no).
/// Effect sizes for aging (Cohen's f from the nested-model R² difference)
/// and sex (Cohen's d on covariate-residualized values) are filled in.
pub fn fit_mlr(
    records: &[SubjectRecord],
    roi: &str,
    include_etiv: bool,
) -> Result<RegressionResult> {
    let mut full = fit_model(records, roi, true, include_etiv)?;
    let reduced = fit_model(records, roi, false, include_etiv)?;
    full.cohen_f_age = Some(cohens_f_age(&full, &reduced)?);
    full.cohen_d_sex = Some(cohens_d_sex(records, roi, include_etiv)?);
    Ok(full)
}

/// Aging effect size from nested models: `f = √((R²_full − R²_reduced) /
/// (1 − R²_full))` on unadjusted R². A saturated full model (R² = 1)
/// returns the `+∞` sentinel.
pub fn cohens_f_age(full: &RegressionResult, reduced: &RegressionResult) -> Result<f64> {
    if full.roi != reduced.roi || full.n != reduced.n {
        return Err(SynthError::Parameter(format!(
            "nested models disagree: {} (n={}) vs {} (n={})",
            full.roi, full.n, reduced.roi, reduced.n
        )));
    }
    if full.coefficient("age").is_none() {
        return Err(SynthError::Parameter("full model has no age term".into()));
    }
    if reduced.coefficient("age").is_some() {
        return Err(SynthError::Parameter(
            "reduced model must omit the age term".into(),
        ));
    }
    let full_names: Vec<&str> = full
        .coefficients
        .iter()
        .map(|c| c.name.as_str())
        .filter(|&n| n != "age")
        .collect();
    let reduced_names: Vec<&str> = reduced.coefficients.iter().map(|c| c.name.as_str()).collect();
    if full_names != reduced_names {
        return Err(SynthError::Parameter(
            "reduced model must omit only the age term".into(),
        ));
    }
    if full.r2 >= 1.0 {
        return Ok(f64::INFINITY);
    }
    let f2 = ((full.r2 - reduced.r2) / (1.0 - full.r2)).max(0.0);
    Ok(f2.sqrt())
}

/// Sex effect size: Cohen's d of the male-minus-female difference on values
/// residualized against age (and head size when `adjust_etiv`), with the
/// pooled standard deviation of the residualized groups.
pub fn cohens_d_sex(records: &[SubjectRecord], roi: &str, adjust_etiv: bool) -> Result<f64> {
    check_cohort(records)?;
    let y = extract_y(records, roi)?;
    let n = records.len();

    let n_male = records.iter().filter(|r| r.sex == SEX_MALE).count();
    let n_female = n - n_male;
    if n_male < 2 || n_female < 2 {
        return Err(SynthError::Data(format!(
            "sex effect needs ≥ 2 subjects per group, got {n_male} male / {n_female} female"
        )));
    }

    // Residualize against the covariates only — sex stays out of the design.
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n], records.iter().map(|r| r.age).collect()];
    if adjust_etiv {
        cols.push(records.iter().map(|r| r.etiv).collect());
    }
    let fit = ols(&cols, &y)?;

    let (mut sum_m, mut sum_f) = (0.0f64, 0.0f64);
    for (rec, &res) in records.iter().zip(&fit.residuals) {
        if rec.sex == SEX_MALE {
            sum_m += res;
        } else {
            sum_f += res;
        }
    }
    let mean_m = sum_m / n_male as f64;
    let mean_f = sum_f / n_female as f64;
    let (mut ss_m, mut ss_f) = (0.0f64, 0.0f64);
    for (rec, &res) in records.iter().zip(&fit.residuals) {
        if rec.sex == SEX_MALE {
            ss_m += (res - mean_m).powi(2);
        } else {
            ss_f += (res - mean_f).powi(2);
        }
    }
    let pooled = ((ss_m + ss_f) / (n_male + n_female - 2) as f64).sqrt();
    if pooled == 0.0 {
        return Err(SynthError::Numeric(
            "pooled standard deviation is zero; sex effect undefined".into(),
        ));
    }
    Ok((mean_m - mean_f) / pooled)
}

// ---------------------------------------------------------------------------
// Concordance
// ---------------------------------------------------------------------------

/// The seven per-model summary numbers, one table row.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct RegressionRow {
    pub adj_r2: f64,
    pub beta_age: f64,
    pub p_age: f64,
    pub cohen_f_age: f64,
    pub beta_sex: f64,
    pub p_sex: f64,
    pub cohen_d_sex: f64,
}

impl RegressionRow {
    pub fn from_result(r: &RegressionResult) -> Result<Self> {
        let age = r
            .coefficient("age")
            .ok_or_else(|| SynthError::Parameter(format!("{}: fit has no age term", r.roi)))?;
        let sex = r
            .coefficient("sex")
            .ok_or_else(|| SynthError::Parameter(format!("{}: fit has no sex term", r.roi)))?;
        let f = r.cohen_f_age.ok_or_else(|| {
            SynthError::Parameter(format!("{}: fit carries no aging effect size", r.roi))
        })?;
        let d = r.cohen_d_sex.ok_or_else(|| {
            SynthError::Parameter(format!("{}: fit carries no sex effect size", r.roi))
        })?;
        Ok(RegressionRow {
            adj_r2: r.adjusted_r2,
            beta_age: age.beta,
            p_age: age.p,
            cohen_f_age: f,
            beta_sex: sex.beta,
            p_sex: sex.p,
            cohen_d_sex: d,
        })
    }
}

/// One region's side-by-side comparison; deltas are generated minus real.
#[derive(Debug, Clone)]
pub struct RoiComparison {
    pub roi: String,
    pub gt: RegressionRow,
    pub gen: RegressionRow,
    pub beta_age_sign_agrees: bool,
    pub delta_beta_age: f64,
    /// `delta_beta_age / |gt.beta_age|`; NaN when the real slope is zero.
    pub rel_delta_beta_age: f64,
    pub delta_f_age: f64,
    pub delta_d_sex: f64,
    pub delta_adj_r2: f64,
}

/// Cross-cohort agreement summary over all regions.
#[derive(Debug, Clone)]
pub struct ConcordanceReport {
    pub rows: Vec<RoiComparison>,
    /// Regions where the age-slope sign matches.
    pub sign_agreement: usize,
    pub n_rois: usize,
    /// Spearman rank correlation of the aging effect sizes across regions.
    pub rank_corr_f_age: f64,
    /// Spearman rank correlation of the sex effect sizes across regions.
    pub rank_corr_d_sex: f64,
}

/// Ranks (1-based, ties averaged) of plain values.
fn ranks_of(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &ii in &idx[i..=j] {
            ranks[ii] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson on tie-averaged ranks. NaN when either
/// side is constant (fewer than two distinct values).
fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks_of(a), ranks_of(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    num / (va.sqrt() * vb.sqrt())
}

/// Pair fitted models from the two cohorts by region and summarize
/// agreement: per-region deltas, the age-slope sign-agreement count, and
/// rank correlations of the effect sizes across regions.
pub fn concordance_report(
    gt: &[RegressionResult],
    gen: &[RegressionResult],
) -> Result<ConcordanceReport> {
    if gt.len() != gen.len() || gt.is_empty() {
        return Err(SynthError::Parameter(format!(
            "cohorts have {} vs {} fitted regions; need identical non-empty sets",
            gt.len(),
            gen.len()
        )));
    }
    let mut rows = Vec::with_capacity(gt.len());
    for g in gt {
        let partner = gen.iter().find(|x| x.roi == g.roi).ok_or_else(|| {
            SynthError::Parameter(format!("region {:?} missing from the generated cohort", g.roi))
        })?;
        let gt_row = RegressionRow::from_result(g)?;
        let gen_row = RegressionRow::from_result(partner)?;
        let delta = gen_row.beta_age - gt_row.beta_age;
        rows.push(RoiComparison {
            roi: g.roi.clone(),
            gt: gt_row,
            gen: gen_row,
            beta_age_sign_agrees: gt_row.beta_age.signum() == gen_row.beta_age.signum(),
            delta_beta_age: delta,
            rel_delta_beta_age: if gt_row.beta_age == 0.0 {
                f64::NAN
            } else {
                delta / gt_row.beta_age.abs()
            },
            delta_f_age: gen_row.cohen_f_age - gt_row.cohen_f_age,
            delta_d_sex: gen_row.cohen_d_sex - gt_row.cohen_d_sex,
            delta_adj_r2: gen_row.adj_r2 - gt_row.adj_r2,
        });
    }
    let sign_agreement = rows.iter().filter(|r| r.beta_age_sign_agrees).count();
    let f_gt: Vec<f64> = rows.iter().map(|r| r.gt.cohen_f_age).collect();
    let f_gen: Vec<f64> = rows.iter().map(|r| r.gen.cohen_f_age).collect();
    let d_gt: Vec<f64> = rows.iter().map(|r| r.gt.cohen_d_sex).collect();
    let d_gen: Vec<f64> = rows.iter().map(|r| r.gen.cohen_d_sex).collect();
    Ok(ConcordanceReport {
        n_rois: rows.len(),
        sign_agreement,
        rank_corr_f_age: spearman(&f_gt, &f_gen),
        rank_corr_d_sex: spearman(&d_gt, &d_gen),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Tables on disk
// ---------------------------------------------------------------------------

/// Read a subject table: `subject_id, age, sex, etiv, source` plus one
/// column per region measure. Sex accepts 0/1/F/M.
pub fn read_subject_table<R: Read>(reader: R) -> Result<Vec<SubjectRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| SynthError::Data(format!("subject table header: {e}")))?
        .clone();
    let required = ["subject_id", "age", "sex", "etiv", "source"];
    let mut col_of = BTreeMap::new();
    for name in required {
        let idx = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| SynthError::Data(format!("subject table lacks column {name:?}")))?;
        col_of.insert(name, idx);
    }
    let roi_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !required.contains(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    if roi_cols.is_empty() {
        return Err(SynthError::Data(
            "subject table has no region-measure columns".into(),
        ));
    }

    let parse_f64 = |field: &str, what: &str| -> Result<f64> {
        field
            .parse::<f64>()
            .map_err(|_| SynthError::Data(format!("cannot parse {what} value {field:?}")))
    };

    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| SynthError::Data(format!("subject table row: {e}")))?;
        let get = |name: &str| row.get(col_of[name]).unwrap_or("");
        let sex = match get("sex").to_ascii_uppercase().as_str() {
            "0" | "F" => SEX_FEMALE,
            "1" | "M" => SEX_MALE,
            other => {
                return Err(SynthError::Data(format!(
                    "cannot parse sex value {other:?} (expected 0/1/F/M)"
                )))
            }
        };
        let mut measures = BTreeMap::new();
        for (idx, roi) in &roi_cols {
            measures.insert(roi.clone(), parse_f64(row.get(*idx).unwrap_or(""), roi)?);
        }
        let rec = SubjectRecord {
            subject_id: get("subject_id").to_string(),
            age: parse_f64(get("age"), "age")?,
            sex,
            etiv: parse_f64(get("etiv"), "etiv")?,
            source: Source::parse(get("source"))?,
            measures,
        };
        rec.validate()?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(SynthError::Data("subject table has no rows".into()));
    }
    Ok(out)
}

/// The sorted region names shared by every record; inconsistent sets are an
/// error.
pub fn roi_names(records: &[SubjectRecord]) -> Result<Vec<String>> {
    let first: Vec<String> = records
        .first()
        .ok_or_else(|| SynthError::Data("empty subject table".into()))?
        .measures
        .keys()
        .cloned()
        .collect();
    for r in records {
        if r.measures.len() != first.len() || !first.iter().all(|k| r.measures.contains_key(k)) {
            return Err(SynthError::Data(format!(
                "subject {} has a different region set",
                r.subject_id
            )));
        }
    }
    Ok(first)
}

/// Split a mixed table into (real, generated) cohorts.
pub fn split_by_source(records: &[SubjectRecord]) -> (Vec<SubjectRecord>, Vec<SubjectRecord>) {
    let gt = records.iter().filter(|r| r.source == Source::Gt).cloned().collect();
    let gen = records.iter().filter(|r| r.source == Source::Gen).cloned().collect();
    (gt, gen)
}

/// Comparison table, two rows per region (GT then GEN), columns matching
/// the regression summary.
pub fn write_concordance_csv<W: Write>(report: &ConcordanceReport, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "roi",
        "source",
        "adj_r2",
        "beta_age",
        "p_age",
        "cohen_f_age",
        "beta_sex",
        "p_sex",
        "cohen_d_sex",
    ])
    .map_err(|e| SynthError::Data(format!("concordance csv: {e}")))?;
    for row in &report.rows {
        for (source, r) in [("GT", &row.gt), ("GEN", &row.gen)] {
            wtr.write_record([
                row.roi.as_str(),
                source,
                &format!("{:.6}", r.adj_r2),
                &format!("{:.6}", r.beta_age),
                &format!("{:.3e}", r.p_age),
                &format!("{:.6}", r.cohen_f_age),
                &format!("{:.6}", r.beta_sex),
                &format!("{:.3e}", r.p_sex),
                &format!("{:.6}", r.cohen_d_sex),
            ])
            .map_err(|e| SynthError::Data(format!("concordance csv: {e}")))?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Human-readable agreement summary: one line per region plus the aggregate
/// sign-agreement and rank-correlation lines.
pub fn concordance_summary(report: &ConcordanceReport) -> String {
    let mut s = String::new();
    for row in &report.rows {
        s.push_str(&format!(
            "{}: beta_age {:.4} (GT) vs {:.4} (GEN), delta {:+.4} ({:.1}% of GT), sign {}; \
             delta_f {:+.4}, delta_d {:+.4}, delta_adj_r2 {:+.4}\n",
            row.roi,
            row.gt.beta_age,
            row.gen.beta_age,
            row.delta_beta_age,
            100.0 * row.rel_delta_beta_age.abs(),
            if row.beta_age_sign_agrees { "agrees" } else { "DISAGREES" },
            row.delta_f_age,
            row.delta_d_sex,
            row.delta_adj_r2,
        ));
    }
    s.push_str(&format!(
        "beta_age sign agreement: {}/{}\n",
        report.sign_agreement, report.n_rois
    ));
    s.push_str(&format!(
        "rank correlation of aging effect sizes: {:.4}\n",
        report.rank_corr_f_age
    ));
    s.push_str(&format!(
        "rank correlation of sex effect sizes: {:.4}\n",
        report.rank_corr_d_sex
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn record(id: usize, age: f64, sex: f64, etiv: f64, rois: &[(&str, f64)]) -> SubjectRecord {
        SubjectRecord {
            subject_id: format!("sub-{id:03}"),
            age,
            sex,
            etiv,
            source: Source::Gt,
            measures: rois.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
        }
    }

    /// Cohort with a known linear law `y = b0 + ba·age + bs·sex + be·etiv +
    /// noise·ε` on the "roi" measure.
    fn cohort(
        n: usize,
        seed: u64,
        b0: f64,
        ba: f64,
        bs: f64,
        be: f64,
        noise: f64,
    ) -> Vec<SubjectRecord> {
        let mut rng = rng_for(seed, "cohort", 0);
        (0..n)
            .map(|i| {
                let age = 50.0 + rng.gen::<f64>() * 30.0;
                let sex = if rng.gen_bool(0.5) { SEX_MALE } else { SEX_FEMALE };
                let etiv = 1400.0 + rng.gen::<f64>() * 300.0;
                let eps: f64 = rng.sample(StandardNormal);
                let y = b0 + ba * age + bs * sex + be * etiv + noise * eps;
                record(i, age, sex, etiv, &[("roi", y.max(0.0))])
            })
            .collect()
    }

    #[test]
    fn exact_linear_recovery() {
        // Zero noise: coefficients come back exactly, the model saturates,
        // and the aging effect size hits the infinite sentinel.
        let mut recs = cohort(40, 1, 500.0, -2.0, 3.0, 0.001, 0.0);
        // Keep y strictly positive for the record invariant.
        for r in recs.iter_mut() {
            let v = r.measures.get_mut("roi").unwrap();
            *v += 0.0;
            assert!(*v >= 0.0);
        }
        let fit = fit_mlr(&recs, "roi", true).unwrap();
        assert!((fit.beta("intercept").unwrap() - 500.0).abs() < 1e-6);
        assert!((fit.beta("age").unwrap() + 2.0).abs() < 1e-8);
        assert!((fit.beta("sex").unwrap() - 3.0).abs() < 1e-8);
        assert!((fit.beta("etiv").unwrap() - 0.001).abs() < 1e-8);
        assert!(fit.adjusted_r2 > 1.0 - 1e-8);
        assert!(fit.p_value("age").unwrap() < 1e-9);
        assert!(fit.cohen_f_age.unwrap().is_infinite());
    }

    #[test]
    fn pure_noise_has_near_zero_adjusted_r2() {
        let mut rng = rng_for(2, "noise", 0);
        let recs: Vec<SubjectRecord> = (0..10_000)
            .map(|i| {
                let age = 50.0 + rng.gen::<f64>() * 30.0;
                let sex = if rng.gen_bool(0.5) { SEX_MALE } else { SEX_FEMALE };
                let etiv = 1400.0 + rng.gen::<f64>() * 300.0;
                let y = 100.0 + rng.sample::<f64, _>(StandardNormal);
                record(i, age, sex, etiv, &[("roi", y)])
            })
            .collect();
        let fit = fit_mlr(&recs, "roi", true).unwrap();
        assert!(fit.adjusted_r2.abs() < 0.01, "adj R² {}", fit.adjusted_r2);
        assert!(fit.cohen_f_age.unwrap() < 0.05);
    }

    /// Independent 4×4 normal-equations oracle: Cramer's rule with explicit
    /// cofactor determinants — no shared code with the implementation.
    fn cramer_oracle(recs: &[SubjectRecord], roi: &str) -> [f64; 4] {
        fn det3(m: [[f64; 3]; 3]) -> f64 {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        }
        fn det4(m: [[f64; 4]; 4]) -> f64 {
            let mut d = 0.0;
            for j in 0..4 {
                let mut minor = [[0.0; 3]; 3];
                for (r, row) in m.iter().skip(1).enumerate() {
                    let mut c = 0;
                    for (jj, &v) in row.iter().enumerate() {
                        if jj != j {
                            minor[r][c] = v;
                            c += 1;
                        }
                    }
                }
                d += if j % 2 == 0 { 1.0 } else { -1.0 } * m[0][j] * det3(minor);
            }
            d
        }
        let rows: Vec<[f64; 4]> = recs.iter().map(|r| [1.0, r.age, r.sex, r.etiv]).collect();
        let ys: Vec<f64> = recs.iter().map(|r| r.measures[roi]).collect();
        let mut xtx = [[0.0f64; 4]; 4];
        let mut xty = [0.0f64; 4];
        for (row, &y) in rows.iter().zip(&ys) {
            for i in 0..4 {
                for j in 0..4 {
                    xtx[i][j] += row[i] * row[j];
                }
                xty[i] += row[i] * y;
            }
        }
        let d = det4(xtx);
        let mut beta = [0.0f64; 4];
        for (j, b) in beta.iter_mut().enumerate() {
            let mut m = xtx;
            for i in 0..4 {
                m[i][j] = xty[i];
            }
            *b = det4(m) / d;
        }
        beta
    }

    #[test]
    fn random_design_matches_cramer_oracle() {
        let recs = cohort(50, 3, 200.0, -1.5, 40.0, 0.05, 10.0);
        let fit = fit_mlr(&recs, "roi", true).unwrap();
        let oracle = cramer_oracle(&recs, "roi");
        for (name, expect) in [("intercept", oracle[0]), ("age", oracle[1]), ("sex", oracle[2]), ("etiv", oracle[3])]
        {
            let got = fit.beta(name).unwrap();
            assert!(
                (got - expect).abs() < 1e-9 * expect.abs().max(1.0),
                "{name}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn residuals_are_orthogonal_to_design() {
        for seed in 0..5 {
            let recs = cohort(60, 10 + seed, 300.0, -1.0, 25.0, 0.02, 8.0);
            let fit = fit_mlr(&recs, "roi", true).unwrap();
            let r_norm = fit.residuals.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cols: Vec<Vec<f64>> = vec![
                vec![1.0; recs.len()],
                recs.iter().map(|r| r.age).collect(),
                recs.iter().map(|r| r.sex).collect(),
                recs.iter().map(|r| r.etiv).collect(),
            ];
            for col in &cols {
                let c_norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = col.iter().zip(&fit.residuals).map(|(a, b)| a * b).sum();
                assert!(
                    (dot / (c_norm * r_norm)).abs() < 1e-8,
                    "normalized residual·column = {}",
                    dot / (c_norm * r_norm)
                );
            }
        }
    }

    #[test]
    fn adjusted_r2_never_exceeds_r2() {
        for seed in 0..8 {
            let recs = cohort(30, 20 + seed, 100.0, -0.5, 10.0, 0.01, 20.0);
            let fit = fit_mlr(&recs, "roi", true).unwrap();
            assert!(fit.adjusted_r2 <= fit.r2 + 1e-12);
            for c in &fit.coefficients {
                assert!((0.0..=1.0).contains(&c.p), "{}: p = {}", c.name, c.p);
            }
        }
    }

    #[test]
    fn degenerate_designs_error() {
        // Collinear: etiv is an exact affine function of age.
        let mut recs = cohort(30, 4, 100.0, -1.0, 5.0, 0.0, 2.0);
        for r in recs.iter_mut() {
            r.etiv = 2.0 * r.age + 5.0;
        }
        assert!(fit_mlr(&recs, "roi", true).is_err());

        // Too few subjects for four coefficients.
        let recs = cohort(4, 5, 100.0, -1.0, 5.0, 0.01, 2.0);
        match fit_mlr(&recs, "roi", true) {
            Err(SynthError::Parameter(_)) => {}
            other => panic!("expected sample-size error, got {other:?}"),
        }

        // Single-sex cohort: sex column is constant → collinear with the
        // intercept.
        let mut recs = cohort(30, 6, 100.0, -1.0, 5.0, 0.01, 2.0);
        for r in recs.iter_mut() {
            r.sex = SEX_FEMALE;
        }
        assert!(fit_mlr(&recs, "roi", true).is_err());
        assert!(cohens_d_sex(&recs, "roi", true).is_err());

        // Missing region name.
        let recs = cohort(30, 7, 100.0, -1.0, 5.0, 0.01, 2.0);
        assert!(fit_mlr(&recs, "nope", true).is_err());
    }

    #[test]
    fn thickness_fit_excludes_head_size() {
        // Three-term model: no etiv column, exact recovery still holds.
        let mut rng = rng_for(8, "thick", 0);
        let recs: Vec<SubjectRecord> = (0..30)
            .map(|i| {
                let age = 50.0 + rng.gen::<f64>() * 30.0;
                let sex = if rng.gen_bool(0.5) { SEX_MALE } else { SEX_FEMALE };
                let etiv = 1_400_000.0 + rng.gen::<f64>() * 300_000.0;
                let y = 3.0 - 0.01 * age + 0.05 * sex;
                record(i, age, sex, etiv, &[("thickness", y)])
            })
            .collect();
        let fit = fit_mlr(&recs, "thickness", false).unwrap();
        assert!(fit.coefficient("etiv").is_none());
        assert_eq!(fit.coefficients.len(), 3);
        assert!((fit.beta("age").unwrap() + 0.01).abs() < 1e-8);
        assert!((fit.beta("sex").unwrap() - 0.05).abs() < 1e-8);
    }

    fn bare_result(roi: &str, r2: f64, with_age: bool) -> RegressionResult {
        let mut coefficients = vec![Coefficient {
            name: "intercept".into(),
            beta: 0.0,
            se: 1.0,
            t: 0.0,
            p: 1.0,
        }];
        if with_age {
            coefficients.push(Coefficient {
                name: "age".into(),
                beta: -1.0,
                se: 1.0,
                t: -1.0,
                p: 0.3,
            });
        }
        coefficients.push(Coefficient {
            name: "sex".into(),
            beta: 1.0,
            se: 1.0,
            t: 1.0,
            p: 0.3,
        });
        RegressionResult {
            roi: roi.into(),
            n: 50,
            coefficients,
            r2,
            adjusted_r2: r2,
            residuals: vec![],
            cohen_f_age: None,
            cohen_d_sex: None,
        }
    }

    #[test]
    fn cohens_f_direct_formula_and_sentinel() {
        let full = bare_result("roi", 0.5, true);
        let reduced = bare_result("roi", 0.25, false);
        let f = cohens_f_age(&full, &reduced).unwrap();
        assert!((f - 0.5f64.sqrt()).abs() < 1e-12);

        let saturated = bare_result("roi", 1.0, true);
        assert!(cohens_f_age(&saturated, &reduced).unwrap().is_infinite());

        // Reduced model must omit only the age term.
        let wrong = bare_result("other", 0.25, false);
        assert!(cohens_f_age(&full, &wrong).is_err());
        let with_age = bare_result("roi", 0.25, true);
        assert!(cohens_f_age(&full, &with_age).is_err());
    }

    #[test]
    fn cohens_f_null_and_planted_effects() {
        // No age effect in the population → f near zero.
        let recs = cohort(5000, 9, 100.0, 0.0, 3.0, 0.0, 1.0);
        let fit = fit_mlr(&recs, "roi", false).unwrap();
        assert!(fit.cohen_f_age.unwrap() < 0.05);

        // Planted effect: age slope 0.5 on U(50,80) ages (variance 75) with
        // σ = 5 noise → f² = 0.25·75/25 = 0.75, f ≈ 0.866.
        let recs = cohort(10_000, 11, 100.0, 0.5, 0.0, 0.0, 5.0);
        let fit = fit_mlr(&recs, "roi", false).unwrap();
        let f = fit.cohen_f_age.unwrap();
        let expect = 0.75f64.sqrt();
        assert!(
            (f - expect).abs() / expect < 0.05,
            "f {f} vs analytic {expect}"
        );
    }

    #[test]
    fn cohens_f_invariant_to_affine_response_rescale() {
        let recs = cohort(200, 12, 100.0, -0.8, 5.0, 0.0, 4.0);
        let f1 = fit_mlr(&recs, "roi", false).unwrap().cohen_f_age.unwrap();
        let rescaled: Vec<SubjectRecord> = recs
            .iter()
            .map(|r| {
                let mut r = r.clone();
                let v = r.measures.get_mut("roi").unwrap();
                *v = 7.0 * *v + 100.0;
                r
            })
            .collect();
        let f2 = fit_mlr(&rescaled, "roi", false).unwrap().cohen_f_age.unwrap();
        assert!((f1 - f2).abs() < 1e-10, "{f1} vs {f2}");
    }

    #[test]
    fn cohens_d_trivial_anchors() {
        // Identical group distributions → d = 0.
        let mut recs = Vec::new();
        for (i, &(age, y)) in [(60.0, 10.0), (70.0, 12.0), (55.0, 9.0), (65.0, 11.0)]
            .iter()
            .enumerate()
        {
            recs.push(record(i, age, SEX_FEMALE, 1500.0, &[("roi", y)]));
            recs.push(record(100 + i, age, SEX_MALE, 1500.0, &[("roi", y)]));
        }
        let d = cohens_d_sex(&recs, "roi", false).unwrap();
        assert!(d.abs() < 1e-12, "identical groups gave d = {d}");

        // Groups separated by exactly one pooled SD. Within-group values
        // {0,0,2,2} have variance 4/3; shift the male group by √(4/3).
        let s = (4.0f64 / 3.0).sqrt();
        let mut recs = Vec::new();
        let pattern = [(60.0, 0.0), (70.0, 0.0), (60.0, 2.0), (70.0, 2.0)];
        for (i, &(age, y)) in pattern.iter().enumerate() {
            recs.push(record(i, age, SEX_FEMALE, 1500.0, &[("roi", y)]));
            recs.push(record(100 + i, age, SEX_MALE, 1500.0, &[("roi", y + s)]));
        }
        let d = cohens_d_sex(&recs, "roi", false).unwrap();
        assert!((d - 1.0).abs() < 1e-9, "unit separation gave d = {d}");

        // Flipping the coding flips the sign exactly.
        let flipped: Vec<SubjectRecord> = recs
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.sex = 1.0 - r.sex;
                r
            })
            .collect();
        let d_flip = cohens_d_sex(&flipped, "roi", false).unwrap();
        assert!((d + d_flip).abs() < 1e-12);
    }

    #[test]
    fn cohens_d_matches_planted_offset() {
        // y = 2·age + offset·sex + N(0, σ²): d ≈ offset/σ.
        let offset = 4.0;
        let sigma = 5.0;
        let recs = cohort(10_000, 13, 50.0, 2.0, offset, 0.0, sigma);
        let d = cohens_d_sex(&recs, "roi", false).unwrap();
        let expect = offset / sigma;
        assert!(
            (d - expect).abs() / expect < 0.05,
            "d {d} vs planted {expect}"
        );
    }

    fn filled_result(roi: &str, beta_age: f64, f: f64, d: f64, adj_r2: f64) -> RegressionResult {
        let mut r = bare_result(roi, adj_r2, true);
        r.coefficients[1].beta = beta_age;
        r.cohen_f_age = Some(f);
        r.cohen_d_sex = Some(d);
        r
    }

    #[test]
    fn concordance_self_comparison_is_perfect() {
        let recs = cohort(80, 14, 400.0, -2.0, 30.0, 0.05, 10.0);
        let mut multi = Vec::new();
        for r in &recs {
            let mut r = r.clone();
            let base = r.measures["roi"];
            r.measures.insert("roi_b".into(), base * 0.5 + 20.0);
            r.measures.insert("roi_c".into(), base * 0.25 + 90.0);
            multi.push(r);
        }
        let fits: Vec<RegressionResult> = ["roi", "roi_b", "roi_c"]
            .iter()
            .map(|roi| fit_mlr(&multi, roi, true).unwrap())
            .collect();
        let report = concordance_report(&fits, &fits).unwrap();
        assert_eq!(report.sign_agreement, 3);
        assert_eq!(report.n_rois, 3);
        for row in &report.rows {
            assert_eq!(row.delta_beta_age, 0.0);
            assert_eq!(row.delta_f_age, 0.0);
            assert_eq!(row.delta_d_sex, 0.0);
            assert_eq!(row.delta_adj_r2, 0.0);
        }
        assert!((report.rank_corr_f_age - 1.0).abs() < 1e-12);
        assert!((report.rank_corr_d_sex - 1.0).abs() < 1e-12);
    }

    #[test]
    fn concordance_reproduces_published_thalamus_pattern() {
        // Feeding the published thalamus summary numbers straight through:
        // age slope −51.36 (real) vs −48.51 (generated) agrees in sign with
        // a +2.85 delta, 5.5% of the real slope.
        let gt = vec![filled_result("thalamus", -51.36, 0.8271, 0.8469, 0.6234)];
        let gen = vec![filled_result("thalamus", -48.51, 0.6766, 0.5471, 0.5199)];
        let report = concordance_report(&gt, &gen).unwrap();
        let row = &report.rows[0];
        assert!(row.beta_age_sign_agrees);
        assert_eq!(report.sign_agreement, 1);
        assert!((row.delta_beta_age - 2.85).abs() < 1e-9);
        assert!((row.rel_delta_beta_age - 2.85 / 51.36).abs() < 1e-9);
        assert!((row.delta_f_age - (0.6766 - 0.8271)).abs() < 1e-12);
        assert!((row.delta_d_sex - (0.5471 - 0.8469)).abs() < 1e-12);
        assert!((row.delta_adj_r2 - (0.5199 - 0.6234)).abs() < 1e-12);

        // Region mismatch is a pairing error.
        let wrong = vec![filled_result("putamen", -10.0, 0.5, 0.5, 0.5)];
        assert!(concordance_report(&gt, &wrong).is_err());
    }

    #[test]
    fn subject_table_round_trip_and_validation() {
        let csv_text = "subject_id,age,sex,etiv,source,hippocampus,thickness\n\
                        sub-001,71.5,F,1450000,GT,4200.5,2.45\n\
                        sub-002,64.0,M,1620000,GEN,4400.0,2.51\n";
        let recs = read_subject_table(csv_text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].sex, SEX_FEMALE);
        assert_eq!(recs[1].sex, SEX_MALE);
        assert_eq!(recs[0].source, Source::Gt);
        assert_eq!(recs[1].source, Source::Gen);
        assert_eq!(recs[0].measures["hippocampus"], 4200.5);
        assert_eq!(roi_names(&recs).unwrap(), vec!["hippocampus", "thickness"]);
        let (gt, gen) = split_by_source(&recs);
        assert_eq!((gt.len(), gen.len()), (1, 1));

        // Bad sex token.
        let bad = "subject_id,age,sex,etiv,source,roi\nsub-001,71.5,X,1450000,GT,42\n";
        assert!(read_subject_table(bad.as_bytes()).is_err());
        // Missing required column.
        let bad = "subject_id,age,sex,source,roi\nsub-001,71.5,F,GT,42\n";
        assert!(read_subject_table(bad.as_bytes()).is_err());
        // No measure columns at all.
        let bad = "subject_id,age,sex,etiv,source\nsub-001,71.5,F,1450000,GT\n";
        assert!(read_subject_table(bad.as_bytes()).is_err());
    }

    #[test]
    fn concordance_outputs_have_expected_shape() {
        let gt = vec![
            filled_result("thalamus", -51.36, 0.8271, 0.8469, 0.6234),
            filled_result("caudate", -10.0, 0.30, 0.20, 0.40),
        ];
        let gen = vec![
            filled_result("thalamus", -48.51, 0.6766, 0.5471, 0.5199),
            filled_result("caudate", -11.0, 0.35, 0.25, 0.42),
        ];
        let report = concordance_report(&gt, &gen).unwrap();

        let mut buf = Vec::new();
        write_concordance_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * 2, "header plus two rows per region");
        assert!(lines[0].starts_with("roi,source,adj_r2,beta_age"));
        assert!(lines[1].starts_with("thalamus,GT,"));
        assert!(lines[2].starts_with("thalamus,GEN,"));

        let summary = concordance_summary(&report);
        assert!(summary.contains("beta_age sign agreement: 2/2"));
        assert!(summary.contains("rank correlation of aging effect sizes: 1.0000"));
    }

    #[test]
    fn record_validation_rejects_bad_fields() {
        let mut r = record(0, 60.0, SEX_FEMALE, 1500.0, &[("roi", 10.0)]);
        assert!(r.validate().is_ok());
        r.age = 0.0;
        assert!(r.validate().is_err());
        r.age = 60.0;
        r.sex = 0.5;
        assert!(r.validate().is_err());
        r.sex = SEX_FEMALE;
        r.etiv = -1.0;
        assert!(r.validate().is_err());
        r.etiv = 1500.0;
        r.measures.insert("roi".into(), f64::NAN);
        assert!(r.validate().is_err());
    }
}
