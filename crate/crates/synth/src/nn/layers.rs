//! Differentiable layers with explicit backward passes.
//!
//! Layers do not own a tape: `forward` returns whatever small statistics the
//! matching `backward` needs, and the *caller* keeps the input activation
//! alive and hands it back at backward time. This keeps every saved tensor
//! stored exactly once along the network tape.

use super::im2col::{col2im, conv_out_len, im2col};
use super::{Float, ParamId, ParamStore};
use ndarray::{s, Array1, Array2, Array3, Array4, Axis, Zip};
use rand::Rng;

/// Weight-initialization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in ±1/sqrt(fan_in) — the usual default for conv/linear.
    FanIn,
    /// All zeros; used where the architecture wants an identity-at-start
    /// contribution (residual tails, attention projection, output head).
    Zero,
}

fn uniform_init<F: Float, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ndarray::ArrayD<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ndarray::ArrayD::from_shape_simple_fn(shape.to_vec(), || {
        F::from_f64(rng.gen_range(-bound..bound))
    })
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// 2-D convolution (cross-correlation) with square kernel and zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float, R: Rng>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = match init {
            Init::FanIn => uniform_init(rng, &[c_out, c_in, k, k], fan_in),
            Init::Zero => ndarray::ArrayD::zeros(vec![c_out, c_in, k, k]),
        };
        let b = match init {
            Init::FanIn => uniform_init(rng, &[c_out], fan_in),
            Init::Zero => ndarray::ArrayD::zeros(vec![c_out]),
        };
        Self {
            w: ps.add(format!("{name}.w"), w),
            b: ps.add(format!("{name}.b"), b),
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        debug_assert_eq!(c, self.c_in, "conv input channel mismatch");
        let oh = conv_out_len(h, self.k, self.stride, self.pad);
        let ow = conv_out_len(w, self.k, self.stride, self.pad);

        let cols = im2col(&x.view(), self.k, self.stride, self.pad);
        let ckk = self.c_in * self.k * self.k;
        let wmat = ps
            .value(self.w)
            .view()
            .into_shape_with_order((self.c_out, ckk))
            .expect("weight contiguous");
        let bias = ps
            .value(self.b)
            .view()
            .into_shape_with_order(self.c_out)
            .expect("bias contiguous");

        let mut y_flat = cols.dot(&wmat.t());
        y_flat += &bias;

        let y = y_flat
            .into_shape_with_order((n, oh, ow, self.c_out))
            .expect("reshape")
            .permuted_axes([0, 3, 1, 2]);
        y.as_standard_layout().to_owned()
    }

    /// `x` must be the forward input. Accumulates weight/bias gradients and
    /// returns the input gradient.
    pub fn backward<F: Float>(
        &self,
        ps: &mut ParamStore<F>,
        x: &Array4<F>,
        dy: &Array4<F>,
    ) -> Array4<F> {
        let (n, _c, h, w) = x.dim();
        let (dn, dc, oh, ow) = dy.dim();
        debug_assert_eq!(dn, n);
        debug_assert_eq!(dc, self.c_out);

        let dy_flat = dy
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * oh * ow, self.c_out))
            .expect("reshape");

        let cols = im2col(&x.view(), self.k, self.stride, self.pad);
        let dw = dy_flat.t().dot(&cols); // (c_out, ckk)
        let db = dy_flat.sum_axis(Axis(0));

        let ckk = self.c_in * self.k * self.k;
        let dcols = {
            let wmat = ps
                .value(self.w)
                .view()
                .into_shape_with_order((self.c_out, ckk))
                .expect("weight contiguous");
            dy_flat.dot(&wmat)
        };
        let dx = col2im(&dcols, n, self.c_in, h, w, self.k, self.stride, self.pad);

        ps.accum_grad(
            self.w,
            dw.into_shape_with_order((self.c_out, self.c_in, self.k, self.k))
                .expect("reshape")
                .into_dyn()
                .view(),
        );
        ps.accum_grad(self.b, db.into_dyn().view());
        dx
    }
}

// ---------------------------------------------------------------------------
// ConvTranspose2d (kernel 2, stride 2 — the only geometry the nets use)
// ---------------------------------------------------------------------------

/// Transposed convolution that exactly doubles spatial size (k = s = 2, no
/// padding): every input pixel paints a disjoint 2×2 output block, so the
/// lowering is a plain GEMM plus a reshape.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvTranspose2d {
    pub fn new<F: Float, R: Rng>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let fan_in = c_in; // each output pixel sees exactly one input pixel
        Self {
            w: ps.add(
                format!("{name}.w"),
                uniform_init(rng, &[c_in, c_out, 2, 2], fan_in),
            ),
            b: ps.add(format!("{name}.b"), uniform_init(rng, &[c_out], fan_in)),
            c_in,
            c_out,
        }
    }

    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        debug_assert_eq!(c, self.c_in);
        let x_flat = x
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * h * w, self.c_in))
            .expect("reshape");
        let wmat = ps
            .value(self.w)
            .view()
            .into_shape_with_order((self.c_in, self.c_out * 4))
            .expect("weight contiguous");
        let y_cols = x_flat.dot(&wmat); // (nhw, c_out*4)

        let y = y_cols
            .into_shape_with_order((n, h, w, self.c_out, 2, 2))
            .expect("reshape")
            .permuted_axes([0, 3, 1, 4, 2, 5])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, self.c_out, 2 * h, 2 * w))
            .expect("reshape");

        let bias = ps
            .value(self.b)
            .view()
            .into_shape_with_order((1, self.c_out, 1, 1))
            .expect("bias contiguous");
        &y + &bias
    }

    pub fn backward<F: Float>(
        &self,
        ps: &mut ParamStore<F>,
        x: &Array4<F>,
        dy: &Array4<F>,
    ) -> Array4<F> {
        let (n, _c, h, w) = x.dim();
        debug_assert_eq!(dy.dim(), (n, self.c_out, 2 * h, 2 * w));

        let dy_cols = dy
            .view()
            .into_shape_with_order((n, self.c_out, h, 2, w, 2))
            .expect("reshape")
            .permuted_axes([0, 2, 4, 1, 3, 5])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * h * w, self.c_out * 4))
            .expect("reshape");

        let x_flat = x
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * h * w, self.c_in))
            .expect("reshape");

        let dw = x_flat.t().dot(&dy_cols); // (c_in, c_out*4)
        let db = dy.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1));

        let dx_flat = {
            let wmat = ps
                .value(self.w)
                .view()
                .into_shape_with_order((self.c_in, self.c_out * 4))
                .expect("weight contiguous");
            dy_cols.dot(&wmat.t())
        };
        let dx = dx_flat
            .into_shape_with_order((n, h, w, self.c_in))
            .expect("reshape")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();

        ps.accum_grad(
            self.w,
            dw.into_shape_with_order((self.c_in, self.c_out, 2, 2))
                .expect("reshape")
                .into_dyn()
                .view(),
        );
        ps.accum_grad(self.b, db.into_dyn().view());
        dx
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Float, R: Rng>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Self {
            w: ps.add(format!("{name}.w"), uniform_init(rng, &[d_out, d_in], d_in)),
            b: ps.add(format!("{name}.b"), uniform_init(rng, &[d_out], d_in)),
            d_in,
            d_out,
        }
    }

    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Array2<F>) -> Array2<F> {
        let wmat = ps
            .value(self.w)
            .view()
            .into_shape_with_order((self.d_out, self.d_in))
            .expect("weight contiguous");
        let bias = ps
            .value(self.b)
            .view()
            .into_shape_with_order(self.d_out)
            .expect("bias contiguous");
        let mut y = x.dot(&wmat.t());
        y += &bias;
        y
    }

    pub fn backward<F: Float>(
        &self,
        ps: &mut ParamStore<F>,
        x: &Array2<F>,
        dy: &Array2<F>,
    ) -> Array2<F> {
        let dw = dy.t().dot(x);
        let db = dy.sum_axis(Axis(0));
        let dx = {
            let wmat = ps
                .value(self.w)
                .view()
                .into_shape_with_order((self.d_out, self.d_in))
                .expect("weight contiguous");
            dy.dot(&wmat)
        };
        ps.accum_grad(self.w, dw.into_dyn().view());
        ps.accum_grad(self.b, db.into_dyn().view());
        dx
    }
}

// ---------------------------------------------------------------------------
// GroupNorm
// ---------------------------------------------------------------------------

/// Per-(item, group) statistics saved by the forward pass.
#[derive(Debug, Clone)]
pub struct GroupNormStats<F> {
    pub mean: Array2<F>,
    pub inv_std: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<F: Float>(
        ps: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        assert!(
            groups > 0 && channels % groups == 0,
            "groups {groups} must divide channels {channels}"
        );
        Self {
            gamma: ps.add(
                format!("{name}.gamma"),
                ndarray::ArrayD::from_elem(vec![channels], F::one()),
            ),
            beta: ps.add(format!("{name}.beta"), ndarray::ArrayD::zeros(vec![channels])),
            channels,
            groups,
            eps: 1e-6,
        }
    }

    pub fn forward<F: Float>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
    ) -> (Array4<F>, GroupNormStats<F>) {
        let (n, c, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let cg = c / self.groups;
        let m = (cg * h * w) as f64;

        let mut mean = Array2::<F>::zeros((n, self.groups));
        let mut inv_std = Array2::<F>::zeros((n, self.groups));
        let mut y = Array4::<F>::zeros(x.dim());

        let gamma = ps.value(self.gamma);
        let beta = ps.value(self.beta);

        for ni in 0..n {
            for g in 0..self.groups {
                let sl = x.slice(s![ni, g * cg..(g + 1) * cg, .., ..]);
                let mut sum = 0.0f64;
                for &v in sl.iter() {
                    sum += v.to_f64();
                }
                let mu = sum / m;
                let mut var = 0.0f64;
                for &v in sl.iter() {
                    let d = v.to_f64() - mu;
                    var += d * d;
                }
                var /= m;
                let istd = 1.0 / (var + self.eps).sqrt();
                mean[[ni, g]] = F::from_f64(mu);
                inv_std[[ni, g]] = F::from_f64(istd);

                let muf = F::from_f64(mu);
                let istdf = F::from_f64(istd);
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let gam = gamma[[ch]];
                    let bet = beta[[ch]];
                    let xs = x.slice(s![ni, ch, .., ..]);
                    let mut ys = y.slice_mut(s![ni, ch, .., ..]);
                    Zip::from(&mut ys).and(&xs).for_each(|o, &v| {
                        *o = (v - muf) * istdf * gam + bet;
                    });
                }
            }
        }
        (y, GroupNormStats { mean, inv_std })
    }

    pub fn backward<F: Float>(
        &self,
        ps: &mut ParamStore<F>,
        x: &Array4<F>,
        stats: &GroupNormStats<F>,
        dy: &Array4<F>,
    ) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let cg = c / self.groups;
        let m = F::from_f64((cg * h * w) as f64);

        let mut dgamma = Array1::<F>::zeros(c);
        let mut dbeta = Array1::<F>::zeros(c);
        let mut dx = Array4::<F>::zeros(x.dim());
        let gamma = ps.value(self.gamma).clone();

        for ni in 0..n {
            for g in 0..self.groups {
                let mu = stats.mean[[ni, g]];
                let istd = stats.inv_std[[ni, g]];

                // First pass: per-channel reductions plus the two group-wide
                // means needed by the normalization gradient.
                let mut sum_dxhat = F::zero();
                let mut sum_dxhat_xhat = F::zero();
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let gam = gamma[[ch]];
                    let xs = x.slice(s![ni, ch, .., ..]);
                    let dys = dy.slice(s![ni, ch, .., ..]);
                    let mut dg = F::zero();
                    let mut db = F::zero();
                    Zip::from(&xs).and(&dys).for_each(|&xv, &dv| {
                        let xhat = (xv - mu) * istd;
                        dg += dv * xhat;
                        db += dv;
                        let dxhat = dv * gam;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    });
                    dgamma[ch] += dg;
                    dbeta[ch] += db;
                }
                let mean_dxhat = sum_dxhat / m;
                let mean_dxhat_xhat = sum_dxhat_xhat / m;

                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let gam = gamma[[ch]];
                    let xs = x.slice(s![ni, ch, .., ..]);
                    let dys = dy.slice(s![ni, ch, .., ..]);
                    let mut dxs = dx.slice_mut(s![ni, ch, .., ..]);
                    Zip::from(&mut dxs).and(&xs).and(&dys).for_each(|o, &xv, &dv| {
                        let xhat = (xv - mu) * istd;
                        let dxhat = dv * gam;
                        *o = istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    });
                }
            }
        }
        ps.accum_grad(self.gamma, dgamma.into_dyn().view());
        ps.accum_grad(self.beta, dbeta.into_dyn().view());
        dx
    }
}

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Swish / SiLU: `x * sigmoid(x)`.
pub fn silu<F: Float, D: ndarray::Dimension>(
    x: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    x.mapv(|v| v * sigmoid(v))
}

/// Gradient of [`silu`] given the *input* `x`.
pub fn silu_backward<F: Float, D: ndarray::Dimension>(
    x: &ndarray::Array<F, D>,
    dy: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let sg = sigmoid(v);
        *d = *d * (sg * (F::one() + v * (F::one() - sg)));
    });
    dx
}

/// Leaky ReLU with the given negative slope.
pub fn leaky_relu<F: Float, D: ndarray::Dimension>(
    x: &ndarray::Array<F, D>,
    slope: f64,
) -> ndarray::Array<F, D> {
    let a = F::from_f64(slope);
    x.mapv(|v| if v > F::zero() { v } else { v * a })
}

pub fn leaky_relu_backward<F: Float, D: ndarray::Dimension>(
    x: &ndarray::Array<F, D>,
    dy: &ndarray::Array<F, D>,
    slope: f64,
) -> ndarray::Array<F, D> {
    let a = F::from_f64(slope);
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= F::zero() {
            *d = *d * a;
        }
    });
    dx
}

// ---------------------------------------------------------------------------
// Single-head self-attention over spatial positions
// ---------------------------------------------------------------------------

/// Saved intermediates for the attention backward pass.
#[derive(Debug, Clone)]
pub struct AttnCtx<F> {
    pub stats: GroupNormStats<F>,
    /// Normalized input (the q/k/v convolution input).
    pub hn: Array4<F>,
    /// Per-item (HW, C) projections.
    pub qm: Array3<F>,
    pub km: Array3<F>,
    pub vm: Array3<F>,
    /// Row-softmax attention weights, (N, HW, HW).
    pub p: Array3<F>,
    /// Attention output before the final projection.
    pub h_att: Array4<F>,
}

/// Residual single-head self-attention block: `x + proj(attend(norm(x)))`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub norm: GroupNorm,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub proj: Conv2d,
    pub channels: usize,
}

impl SelfAttention {
    pub fn new<F: Float, R: Rng>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        Self {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), channels, groups),
            q: Conv2d::new(ps, rng, &format!("{name}.q"), channels, channels, 1, 1, 0, Init::FanIn),
            k: Conv2d::new(ps, rng, &format!("{name}.k"), channels, channels, 1, 1, 0, Init::FanIn),
            v: Conv2d::new(ps, rng, &format!("{name}.v"), channels, channels, 1, 1, 0, Init::FanIn),
            proj: Conv2d::new(
                ps,
                rng,
                &format!("{name}.proj"),
                channels,
                channels,
                1,
                1,
                0,
                Init::Zero,
            ),
            channels,
        }
    }

    /// Flatten (C, H, W) of one item into (HW, C).
    fn to_rows<F: Float>(t: &Array4<F>, ni: usize) -> Array2<F> {
        let (_, c, h, w) = t.dim();
        t.slice(s![ni, .., .., ..])
            .into_shape_with_order((c, h * w))
            .expect("reshape")
            .t()
            .as_standard_layout()
            .to_owned()
    }

    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Array4<F>) -> (Array4<F>, AttnCtx<F>) {
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let scale = F::from_f64(1.0 / (c as f64).sqrt());

        let (hn, stats) = self.norm.forward(ps, x);
        let q = self.q.forward(ps, &hn);
        let k = self.k.forward(ps, &hn);
        let v = self.v.forward(ps, &hn);

        let mut qm = Array3::<F>::zeros((n, hw, c));
        let mut km = Array3::<F>::zeros((n, hw, c));
        let mut vm = Array3::<F>::zeros((n, hw, c));
        let mut p = Array3::<F>::zeros((n, hw, hw));
        let mut h_att = Array4::<F>::zeros((n, c, h, w));

        for ni in 0..n {
            let qr = Self::to_rows(&q, ni);
            let kr = Self::to_rows(&k, ni);
            let vr = Self::to_rows(&v, ni);

            let mut a = qr.dot(&kr.t());
            a.mapv_inplace(|v| v * scale);
            // Row-wise softmax with max subtraction for stability.
            for mut row in a.rows_mut() {
                let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
                row.mapv_inplace(|v| (v - mx).exp());
                let sm: F = row.iter().cloned().sum();
                row.mapv_inplace(|v| v / sm);
            }
            let o = a.dot(&vr); // (HW, C)

            let oc = o
                .t()
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((c, h, w))
                .expect("reshape");
            h_att.slice_mut(s![ni, .., .., ..]).assign(&oc);
            qm.slice_mut(s![ni, .., ..]).assign(&qr);
            km.slice_mut(s![ni, .., ..]).assign(&kr);
            vm.slice_mut(s![ni, .., ..]).assign(&vr);
            p.slice_mut(s![ni, .., ..]).assign(&a);
        }

        let out = self.proj.forward(ps, &h_att);
        let y = &out + x;
        (
            y,
            AttnCtx {
                stats,
                hn,
                qm,
                km,
                vm,
                p,
                h_att,
            },
        )
    }

    pub fn backward<F: Float>(
        &self,
        ps: &mut ParamStore<F>,
        x: &Array4<F>,
        ctx: &AttnCtx<F>,
        dy: &Array4<F>,
    ) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let scale = F::from_f64(1.0 / (c as f64).sqrt());

        // y = x + proj(h_att): residual passthrough plus projection path.
        let dh_att = self.proj.backward(ps, &ctx.h_att, dy);

        let mut dq = Array4::<F>::zeros((n, c, h, w));
        let mut dk = Array4::<F>::zeros((n, c, h, w));
        let mut dv = Array4::<F>::zeros((n, c, h, w));

        for ni in 0..n {
            let do_rows = Self::to_rows(&dh_att, ni); // (HW, C)
            let pr = ctx.p.slice(s![ni, .., ..]);
            let qr = ctx.qm.slice(s![ni, .., ..]);
            let kr = ctx.km.slice(s![ni, .., ..]);
            let vr = ctx.vm.slice(s![ni, .., ..]);

            let dp = do_rows.dot(&vr.t()); // (HW, HW)
            let dvr = pr.t().dot(&do_rows); // (HW, C)

            // Softmax backward, row-wise: da = p ∘ (dp − rowsum(dp ∘ p)).
            let rowsum = (&dp * &pr).sum_axis(Axis(1)); // (HW,)
            let mut da = Array2::<F>::zeros((hw, hw));
            Zip::indexed(&mut da).for_each(|(i, j), o| {
                *o = pr[[i, j]] * (dp[[i, j]] - rowsum[i]);
            });

            let mut dqr = da.dot(&kr); // (HW, C)
            dqr.mapv_inplace(|v| v * scale);
            let mut dkr = da.t().dot(&qr);
            dkr.mapv_inplace(|v| v * scale);

            for (target, rows) in [(&mut dq, &dqr), (&mut dk, &dkr), (&mut dv, &dvr)] {
                let rc = rows
                    .t()
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((c, h, w))
                    .expect("reshape");
                target.slice_mut(s![ni, .., .., ..]).assign(&rc);
            }
        }

        let mut dhn = self.q.backward(ps, &ctx.hn, &dq);
        dhn += &self.k.backward(ps, &ctx.hn, &dk);
        dhn += &self.v.backward(ps, &ctx.hn, &dv);

        let dx_norm = self.norm.backward(ps, x, &ctx.stats, &dhn);
        &dx_norm + dy
    }
}

// ---------------------------------------------------------------------------
// Residual block with optional timestep conditioning
// ---------------------------------------------------------------------------

/// Activations saved across a residual block forward pass.
#[derive(Debug, Clone)]
pub struct ResCtx<F> {
    pub x: Array4<F>,
    pub stats1: GroupNormStats<F>,
    pub pre1: Array4<F>,
    pub h1: Array4<F>,
    /// Conv1 output after the timestep bias (norm2 input).
    pub a: Array4<F>,
    pub stats2: GroupNormStats<F>,
    pub pre2: Array4<F>,
    pub h2: Array4<F>,
    /// silu(temb), the projection input (empty when unconditioned).
    pub temb_act: Array2<F>,
}

/// `y = shortcut(x) + conv2(act(norm2(conv1(act(norm1(x))) + proj(act(temb)))))`
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub temb_proj: Option<Linear>,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
    pub c_in: usize,
    pub c_out: usize,
}

impl ResBlock {
    pub fn new<F: Float, R: Rng>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        groups: usize,
        temb_dim: Option<usize>,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), c_in, groups),
            conv1: Conv2d::new(ps, rng, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1, Init::FanIn),
            temb_proj: temb_dim
                .map(|d| Linear::new(ps, rng, &format!("{name}.temb_proj"), d, c_out)),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), c_out, groups),
            conv2: Conv2d::new(ps, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, Init::Zero),
            shortcut: (c_in != c_out).then(|| {
                Conv2d::new(ps, rng, &format!("{name}.shortcut"), c_in, c_out, 1, 1, 0, Init::FanIn)
            }),
            c_in,
            c_out,
        }
    }

    /// `temb` must be `Some` iff the block was built with a timestep path.
    pub fn forward<F: Float>(
        &self,
        ps: &ParamStore<F>,
        x: Array4<F>,
        temb: Option<&Array2<F>>,
    ) -> (Array4<F>, ResCtx<F>) {
        let (pre1, stats1) = self.norm1.forward(ps, &x);
        let h1 = silu(&pre1);
        let mut a = self.conv1.forward(ps, &h1);

        let temb_act = match (&self.temb_proj, temb) {
            (Some(proj), Some(t)) => {
                let s = silu(t);
                let p = proj.forward(ps, &s); // (B, c_out)
                let (bn, cc, _, _) = a.dim();
                debug_assert_eq!(p.dim(), (bn, cc));
                for ni in 0..bn {
                    for ch in 0..cc {
                        let add = p[[ni, ch]];
                        a.slice_mut(s![ni, ch, .., ..]).mapv_inplace(|v| v + add);
                    }
                }
                s
            }
            (None, None) => Array2::zeros((0, 0)),
            _ => panic!("timestep embedding presence must match block construction"),
        };

        let (pre2, stats2) = self.norm2.forward(ps, &a);
        let h2 = silu(&pre2);
        let b = self.conv2.forward(ps, &h2);

        let y = match &self.shortcut {
            Some(sc) => &sc.forward(ps, &x) + &b,
            None => &x + &b,
        };
        (
            y,
            ResCtx {
                x,
                stats1,
                pre1,
                h1,
                a,
                stats2,
                pre2,
                h2,
                temb_act,
            },
        )
    }

    /// Returns `(dx, dtemb)`; `dtemb` is zero-sized when unconditioned.
    pub fn backward<F: Float>(
        &self,
        ps: &mut ParamStore<F>,
        ctx: &ResCtx<F>,
        temb: Option<&Array2<F>>,
        dy: &Array4<F>,
    ) -> (Array4<F>, Array2<F>) {
        // Residual add: dy flows to both the shortcut and the conv path.
        let dh2 = self.conv2.backward(ps, &ctx.h2, dy);
        let dpre2 = silu_backward(&ctx.pre2, &dh2);
        let da = self.norm2.backward(ps, &ctx.a, &ctx.stats2, &dpre2);

        let dtemb = match (&self.temb_proj, temb) {
            (Some(proj), Some(t)) => {
                let dp = da.sum_axis(Axis(3)).sum_axis(Axis(2)); // (B, c_out)
                let ds = proj.backward(ps, &ctx.temb_act, &dp);
                silu_backward(t, &ds)
            }
            _ => Array2::zeros((0, 0)),
        };

        let dh1 = self.conv1.backward(ps, &ctx.h1, &da);
        let dpre1 = silu_backward(&ctx.pre1, &dh1);
        let mut dx = self.norm1.backward(ps, &ctx.x, &ctx.stats1, &dpre1);

        match &self.shortcut {
            Some(sc) => dx += &sc.backward(ps, &ctx.x, dy),
            None => dx += dy,
        }
        (dx, dtemb)
    }
}
