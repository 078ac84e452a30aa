//! Forward diffusion, the subsampled noise schedule, and deterministic
//! reverse sampling.
//!
//! The schedule is defined over `t_virtual` virtual timesteps (1-indexed,
//! stored 0-based: `beta[i]` and `alpha_bar[i]` belong to virtual step
//! `i + 1`). Training and sampling only ever touch the `k` uniformly strided
//! steps in `tau`; the terminal reverse step maps to `alpha_bar = 1`.

use crate::error::{Result, SynthError};
use crate::rng::rng_for;
use ndarray::{Array3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::nn::Float;

/// Linear-beta schedule with a uniformly subsampled timestep sequence.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    /// Number of virtual timesteps the beta ramp is defined over.
    pub t_virtual: usize,
    /// Per-step noise variances, `beta[i]` for virtual step `i + 1`.
    pub beta: Vec<f64>,
    /// Cumulative products of `1 - beta`, same indexing as `beta`.
    pub alpha_bar: Vec<f64>,
    /// Strictly increasing selected virtual steps (1-indexed values).
    pub tau: Vec<usize>,
}

impl NoiseSchedule {
    /// `alpha_bar` at a 1-indexed virtual step, with the terminal
    /// convention `alpha_bar(0) = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn k(&self) -> usize {
        self.tau.len()
    }

    /// Virtual step for a position in `tau`.
    pub fn tau_at(&self, pos: usize) -> usize {
        self.tau[pos]
    }

    /// The element of `tau` preceding `t`, or 0 for the first element.
    pub fn prev_in_tau(&self, t: usize) -> Result<usize> {
        match self.tau.iter().position(|&x| x == t) {
            Some(0) => Ok(0),
            Some(p) => Ok(self.tau[p - 1]),
            None => Err(SynthError::Parameter(format!(
                "virtual step {t} is not in tau"
            ))),
        }
    }
}

/// Build the virtual beta ramp and the strided subsampled sequence.
///
/// `tau[j] = 1 + j * (t_virtual / k)`, so `(1000, 100)` selects
/// `{1, 11, 21, ..., 991}`.
pub fn build_schedule(
    t_virtual: usize,
    k: usize,
    beta_1: f64,
    beta_t: f64,
) -> Result<NoiseSchedule> {
    if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(SynthError::Parameter(format!(
            "beta range invalid: need 0 < beta_1 <= beta_t < 1, got ({beta_1}, {beta_t})"
        )));
    }
    if k == 0 || k > t_virtual {
        return Err(SynthError::Parameter(format!(
            "k must satisfy 1 <= k <= t_virtual, got k={k}, t_virtual={t_virtual}"
        )));
    }
    if t_virtual % k != 0 {
        return Err(SynthError::Parameter(format!(
            "t_virtual={t_virtual} not divisible by k={k}; stride would be non-uniform"
        )));
    }

    let mut beta = Vec::with_capacity(t_virtual);
    if t_virtual == 1 {
        beta.push(beta_1);
    } else {
        let step = (beta_t - beta_1) / (t_virtual - 1) as f64;
        for i in 0..t_virtual {
            beta.push(beta_1 + step * i as f64);
        }
    }

    let mut alpha_bar = Vec::with_capacity(t_virtual);
    let mut prod = 1.0f64;
    for &b in &beta {
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }

    let stride = t_virtual / k;
    let tau: Vec<usize> = (0..k).map(|j| 1 + j * stride).collect();

    Ok(NoiseSchedule {
        t_virtual,
        beta,
        alpha_bar,
        tau,
    })
}

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`, elementwise.
pub fn forward_diffuse<F: Float>(
    x0: &Array3<F>,
    eps: &Array3<F>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array3<F>> {
    if x0.dim() != eps.dim() {
        return Err(SynthError::Shape(format!(
            "x0 {:?} and eps {:?} differ",
            x0.dim(),
            eps.dim()
        )));
    }
    if t == 0 || t > schedule.t_virtual {
        return Err(SynthError::Parameter(format!(
            "virtual step {t} outside 1..={}",
            schedule.t_virtual
        )));
    }
    let ab = schedule.alpha_bar_at(t);
    let c0 = F::from_f64(ab.sqrt());
    let c1 = F::from_f64((1.0 - ab).sqrt());
    let mut out = x0.clone();
    Zip::from(&mut out).and(eps).for_each(|o, &e| {
        *o = *o * c0 + e * c1;
    });
    Ok(out)
}

/// One generalized reverse step from virtual step `t` to `t_prev`.
///
/// With `eta = 0` this is the deterministic form: recover
/// `x0_hat = (x_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t)` and re-noise it to
/// level `t_prev`. `eta > 0` adds the stochastic term with
/// `sigma = eta * sqrt((1 - ab_prev) / (1 - ab_t)) * sqrt(1 - ab_t / ab_prev)`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step_eta<F: Float>(
    x_t: &Array3<F>,
    eps_pred: &Array3<F>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    noise: Option<&Array3<F>>,
) -> Result<Array3<F>> {
    if x_t.dim() != eps_pred.dim() {
        return Err(SynthError::Shape(format!(
            "x_t {:?} and eps_pred {:?} differ",
            x_t.dim(),
            eps_pred.dim()
        )));
    }
    if t_prev > t {
        return Err(SynthError::Parameter(format!(
            "t_prev={t_prev} must not exceed t={t}"
        )));
    }
    let ab_t = schedule.alpha_bar_at(t);
    let ab_prev = schedule.alpha_bar_at(t_prev);

    let sigma = if eta == 0.0 || t_prev == t {
        0.0
    } else {
        eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt()
    };

    let inv_sqrt_ab_t = F::from_f64(1.0 / ab_t.sqrt());
    let sqrt_one_minus_ab_t = F::from_f64((1.0 - ab_t).sqrt());
    let sqrt_ab_prev = F::from_f64(ab_prev.sqrt());
    let dir_coeff = F::from_f64((1.0 - ab_prev - sigma * sigma).max(0.0).sqrt());

    let mut out = Array3::<F>::zeros(x_t.dim());
    Zip::from(&mut out)
        .and(x_t)
        .and(eps_pred)
        .for_each(|o, &x, &e| {
            let x0_hat = (x - sqrt_one_minus_ab_t * e) * inv_sqrt_ab_t;
            *o = sqrt_ab_prev * x0_hat + dir_coeff * e;
        });
    if sigma > 0.0 {
        let z = noise.ok_or_else(|| {
            SynthError::Parameter("eta > 0 requires a noise draw".into())
        })?;
        if z.dim() != out.dim() {
            return Err(SynthError::Shape("noise shape mismatch".into()));
        }
        let s = F::from_f64(sigma);
        Zip::from(&mut out).and(z).for_each(|o, &n| *o = *o + n * s);
    }
    Ok(out)
}

/// Deterministic (`eta = 0`) reverse step.
pub fn ddim_step<F: Float>(
    x_t: &Array3<F>,
    eps_pred: &Array3<F>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Array3<F>> {
    ddim_step_eta(x_t, eps_pred, t, t_prev, schedule, 0.0, None)
}

/// A conditional noise predictor: receives the condition stack with the
/// current noisy channel appended, plus the virtual timestep, and returns a
/// one-channel predicted-noise map.
pub trait NoisePredictor<F: Float> {
    /// Expected channel count of the input stack (conditions + 1).
    fn in_channels(&self) -> usize;
    /// `x_cat` is `(in_channels, h, w)`; returns `(h, w)`.
    fn predict(&self, x_cat: &Array3<F>, t: usize) -> Result<ndarray::Array2<F>>;
}

/// Adapter for closure-based predictors (test oracles, zero predictors).
pub struct FnPredictor<F, G>
where
    F: Float,
    G: Fn(&Array3<F>, usize) -> ndarray::Array2<F>,
{
    channels: usize,
    f: G,
    _marker: std::marker::PhantomData<F>,
}

impl<F, G> FnPredictor<F, G>
where
    F: Float,
    G: Fn(&Array3<F>, usize) -> ndarray::Array2<F>,
{
    pub fn new(channels: usize, f: G) -> Self {
        Self {
            channels,
            f,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<F, G> NoisePredictor<F> for FnPredictor<F, G>
where
    F: Float,
    G: Fn(&Array3<F>, usize) -> ndarray::Array2<F>,
{
    fn in_channels(&self) -> usize {
        self.channels
    }
    fn predict(&self, x_cat: &Array3<F>, t: usize) -> Result<ndarray::Array2<F>> {
        Ok((self.f)(x_cat, t))
    }
}

/// Run the full reverse chain: draw `x_T ~ N(0, I)` from the seed, then
/// apply the predictor through `tau` in descending order down to the
/// terminal step. Pure in `(conditions, predictor, schedule, seed)`.
pub fn sample<F: Float, P: NoisePredictor<F>>(
    conditions: &Array3<F>,
    predictor: &P,
    schedule: &NoiseSchedule,
    eta: f64,
    seed: u64,
) -> Result<ndarray::Array2<F>> {
    let (c, h, w) = conditions.dim();
    if c + 1 != predictor.in_channels() {
        return Err(SynthError::Config(format!(
            "predictor expects {} channels, conditions provide {} (+1 noisy)",
            predictor.in_channels(),
            c + 1
        )));
    }

    let mut rng = rng_for(seed, "sample-init", 0);
    let mut x = Array3::<F>::zeros((1, h, w));
    for v in x.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = F::from_f64(n);
    }

    let mut x_cat = Array3::<F>::zeros((c + 1, h, w));
    x_cat.slice_mut(ndarray::s![..c, .., ..]).assign(conditions);

    let mut step_idx = 0u64;
    for pos in (0..schedule.k()).rev() {
        let t = schedule.tau_at(pos);
        let t_prev = if pos == 0 { 0 } else { schedule.tau_at(pos - 1) };

        x_cat
            .slice_mut(ndarray::s![c..c + 1, .., ..])
            .assign(&x);
        let eps2 = predictor.predict(&x_cat, t)?;
        let eps = eps2.insert_axis(ndarray::Axis(0));

        let noise = if eta > 0.0 && t_prev != 0 {
            let mut z = Array3::<F>::zeros((1, h, w));
            let mut zrng = rng_for(seed, "sample-step", step_idx);
            for v in z.iter_mut() {
                let n: f64 = zrng.sample(StandardNormal);
                *v = F::from_f64(n);
            }
            Some(z)
        } else {
            None
        };
        x = ddim_step_eta(&x, &eps, t, t_prev, schedule, eta, noise.as_ref())?;
        step_idx += 1;
    }

    Ok(x.index_axis_move(ndarray::Axis(0), 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{Array2, Array3};
    use rand::Rng;

    fn paper_schedule() -> NoiseSchedule {
        build_schedule(1000, 100, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn tau_matches_strided_sequence() {
        let s = paper_schedule();
        assert_eq!(s.tau.len(), 100);
        assert_eq!(s.tau[0], 1);
        assert_eq!(s.tau[1], 11);
        assert_eq!(s.tau[99], 991);
        for w in s.tau.windows(2) {
            assert_eq!(w[1] - w[0], 10);
        }
    }

    #[test]
    fn alpha_bar_first_step_is_one_minus_beta1() {
        let s = paper_schedule();
        assert_relative_eq!(s.alpha_bar_at(1), 1.0 - 1e-4, max_relative = 1e-15);
    }

    #[test]
    fn constant_beta_gives_geometric_alpha_bar() {
        let s = build_schedule(10, 10, 0.1, 0.1).unwrap();
        for t in 1..=10usize {
            assert_relative_eq!(
                s.alpha_bar_at(t),
                0.9f64.powi(t as i32),
                max_relative = 1e-12
            );
        }
    }

    /// Independent cumulative product over the same linear ramp.
    fn brute_alpha_bar(t_virtual: usize, beta_1: f64, beta_t: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(t_virtual);
        let mut prod = 1.0f64;
        for i in 0..t_virtual {
            let frac = i as f64 / (t_virtual - 1) as f64;
            let b = beta_1 * (1.0 - frac) + beta_t * frac;
            prod *= 1.0 - b;
            out.push(prod);
        }
        out
    }

    #[test]
    fn alpha_bar_matches_brute_force_product() {
        let s = paper_schedule();
        let oracle = brute_alpha_bar(1000, 1e-4, 0.02);
        for t in [1usize, 11, 101, 501, 991, 1000] {
            assert_relative_eq!(s.alpha_bar_at(t), oracle[t - 1], max_relative = 1e-12);
        }
    }

    #[test]
    fn alpha_bar_strictly_decreasing_in_unit_interval() {
        let s = paper_schedule();
        for t in 1..1000usize {
            assert!(s.alpha_bar_at(t + 1) < s.alpha_bar_at(t));
            assert!(s.alpha_bar_at(t) > 0.0 && s.alpha_bar_at(t) < 1.0);
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(build_schedule(1000, 100, 0.0, 0.02).is_err());
        assert!(build_schedule(1000, 100, 0.03, 0.02).is_err());
        assert!(build_schedule(1000, 100, 1e-4, 1.0).is_err());
        assert!(build_schedule(100, 101, 1e-4, 0.02).is_err());
        assert!(build_schedule(1000, 300, 1e-4, 0.02).is_err());
        assert!(build_schedule(1000, 0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn forward_diffuse_zero_noise_scales_signal() {
        let s = paper_schedule();
        let x0 = Array3::<f64>::from_elem((1, 4, 4), 2.0);
        let eps = Array3::<f64>::zeros((1, 4, 4));
        let out = forward_diffuse(&x0, &eps, 500, &s).unwrap();
        let expect = 2.0 * s.alpha_bar_at(500).sqrt();
        for &v in out.iter() {
            assert_relative_eq!(v, expect, max_relative = 1e-14);
        }
    }

    #[test]
    fn forward_diffuse_zero_signal_scales_noise() {
        let s = paper_schedule();
        let x0 = Array3::<f64>::zeros((1, 4, 4));
        let eps = Array3::<f64>::from_elem((1, 4, 4), -1.5);
        let out = forward_diffuse(&x0, &eps, 991, &s).unwrap();
        let expect = -1.5 * (1.0 - s.alpha_bar_at(991)).sqrt();
        for &v in out.iter() {
            assert_relative_eq!(v, expect, max_relative = 1e-14);
        }
    }

    #[test]
    fn forward_diffuse_scalar_matches_hand_computation() {
        let s = paper_schedule();
        let oracle = brute_alpha_bar(1000, 1e-4, 0.02);
        let ab = oracle[990];
        let x0 = Array3::<f64>::from_elem((1, 1, 1), 1.0);
        let eps = Array3::<f64>::from_elem((1, 1, 1), 1.0);
        let out = forward_diffuse(&x0, &eps, 991, &s).unwrap();
        assert_relative_eq!(
            out[[0, 0, 0]],
            ab.sqrt() + (1.0 - ab).sqrt(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn forward_diffuse_shape_mismatch_rejected() {
        let s = paper_schedule();
        let x0 = Array3::<f64>::zeros((1, 4, 4));
        let eps = Array3::<f64>::zeros((1, 4, 5));
        assert!(matches!(
            forward_diffuse(&x0, &eps, 1, &s),
            Err(SynthError::Shape(_))
        ));
    }

    #[test]
    fn ddim_inverts_forward_with_true_noise() {
        let s = paper_schedule();
        let mut rng = crate::rng::rng_for(3, "test", 0);
        let x0 = Array3::<f64>::from_shape_fn((1, 8, 8), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let eps = Array3::<f64>::from_shape_fn((1, 8, 8), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        for t in [1usize, 11, 501, 991] {
            let xt = forward_diffuse(&x0, &eps, t, &s).unwrap();
            let rec = ddim_step(&xt, &eps, t, 0, &s).unwrap();
            for (a, b) in rec.iter().zip(x0.iter()) {
                assert_relative_eq!(a, b, max_relative = 1e-10, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn ddim_step_identity_when_t_prev_equals_t() {
        let s = paper_schedule();
        let x = Array3::<f64>::from_elem((1, 3, 3), 0.7);
        let e = Array3::<f64>::from_elem((1, 3, 3), -0.2);
        let out = ddim_step(&x, &e, 501, 501, &s).unwrap();
        for (a, b) in out.iter().zip(x.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn ddim_step_ordering_enforced() {
        let s = paper_schedule();
        let x = Array3::<f64>::zeros((1, 2, 2));
        assert!(ddim_step(&x, &x, 11, 21, &s).is_err());
    }

    #[test]
    fn ddim_two_step_scalar_chain_matches_hand_rolled_recursion() {
        // tau = {1, 11} on a 20-step virtual ramp; fixed predictor output.
        let s = build_schedule(20, 2, 1e-3, 2e-3).unwrap();
        assert_eq!(s.tau, vec![1, 11]);
        let e_fix = 0.3f64;
        let x_start = 1.2f64;

        // Hand-rolled recursion over scalars.
        let ab11 = s.alpha_bar_at(11);
        let ab1 = s.alpha_bar_at(1);
        let x0h_1 = (x_start - (1.0 - ab11).sqrt() * e_fix) / ab11.sqrt();
        let x_1 = ab1.sqrt() * x0h_1 + (1.0 - ab1).sqrt() * e_fix;
        let x0h_2 = (x_1 - (1.0 - ab1).sqrt() * e_fix) / ab1.sqrt();
        let expect = x0h_2; // ab_0 = 1

        let e = Array3::<f64>::from_elem((1, 1, 1), e_fix);
        let x = Array3::<f64>::from_elem((1, 1, 1), x_start);
        let x = ddim_step(&x, &e, 11, 1, &s).unwrap();
        let x = ddim_step(&x, &e, 1, 0, &s).unwrap();
        assert_relative_eq!(x[[0, 0, 0]], expect, max_relative = 1e-12);
    }

    #[test]
    fn sample_with_zero_predictor_telescopes() {
        let s = paper_schedule();
        let cond = Array3::<f64>::zeros((2, 6, 6));
        let zero = FnPredictor::new(3, |x: &Array3<f64>, _t| {
            Array2::<f64>::zeros((x.dim().1, x.dim().2))
        });
        let out = sample(&cond, &zero, &s, 0.0, 99).unwrap();

        // With eps == 0 each step multiplies by sqrt(ab_prev / ab_t); the
        // product telescopes to 1 / sqrt(ab_{tau_max}).
        let mut rng = rng_for(99, "sample-init", 0);
        let scale = 1.0 / s.alpha_bar_at(991).sqrt();
        for &v in out.iter() {
            let n: f64 = rng.sample(StandardNormal);
            assert_relative_eq!(v, n * scale, max_relative = 1e-9);
        }
    }

    #[test]
    fn sample_with_oracle_predictor_recovers_x0() {
        let s = paper_schedule();
        let mut rng = crate::rng::rng_for(11, "oracle", 0);
        let x0 = Array2::<f64>::from_shape_fn((16, 16), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let x0c = x0.clone();
        let oracle = FnPredictor::new(1, move |x: &Array3<f64>, t| {
            // eps = (x_t - sqrt(ab) x0) / sqrt(1 - ab)
            let s = build_schedule(1000, 100, 1e-4, 0.02).unwrap();
            let ab = s.alpha_bar_at(t);
            let xt = x.index_axis(ndarray::Axis(0), 0);
            let mut e = Array2::<f64>::zeros(xt.dim());
            ndarray::Zip::from(&mut e).and(&xt).and(&x0c).for_each(|o, &v, &x0v| {
                *o = (v - ab.sqrt() * x0v) / (1.0 - ab).sqrt();
            });
            e
        });
        let cond = Array3::<f64>::zeros((0, 16, 16));
        let out = sample(&cond, &oracle, &s, 0.0, 5).unwrap();
        let rmse = (&out - &x0).mapv(|d| d * d).mean().unwrap().sqrt();
        assert!(rmse < 1e-5, "rmse {rmse}");
    }

    #[test]
    fn sample_determinism_contract() {
        let s = paper_schedule();
        let cond = Array3::<f64>::from_elem((1, 4, 4), 0.25);
        let p = FnPredictor::new(2, |x: &Array3<f64>, _| {
            x.index_axis(ndarray::Axis(0), 1).mapv(|v| v * 0.5)
        });
        let a = sample(&cond, &p, &s, 0.0, 123).unwrap();
        let b = sample(&cond, &p, &s, 0.0, 123).unwrap();
        let c = sample(&cond, &p, &s, 0.0, 124).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sample_channel_mismatch_is_config_error() {
        let s = paper_schedule();
        let cond = Array3::<f64>::zeros((3, 4, 4));
        let p = FnPredictor::new(2, |x: &Array3<f64>, _| {
            Array2::<f64>::zeros((x.dim().1, x.dim().2))
        });
        assert!(matches!(
            sample(&cond, &p, &s, 0.0, 1),
            Err(SynthError::Config(_))
        ));
    }

    #[test]
    fn variance_preservation_monte_carlo() {
        // Unit-variance signal and independent unit noise stay unit-variance
        // through the forward map at any t.
        let s = paper_schedule();
        let n = 1_000_000usize;
        let mut rng = crate::rng::rng_for(17, "varcheck", 0);
        let t = 501;
        let ab = s.alpha_bar_at(t);
        let (c0, c1) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for _ in 0..n {
            let x: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            let y = c0 * x + c1 * e;
            sum += y;
            sumsq += y * y;
        }
        let var = sumsq / n as f64 - (sum / n as f64).powi(2);
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }
}
