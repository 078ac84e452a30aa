//! Minimal neural-network stack with hand-written backward passes.
//!
//! Everything is generic over [`Float`] so layer gradients can be verified
//! against central finite differences in `f64` while training runs in `f32`.
//! Convolutions lower to GEMM (im2col) so the heavy lifting lands in BLAS.

pub mod adam;
pub mod im2col;
pub mod layers;
pub mod unet;

use ndarray::{ArrayD, ArrayViewD};

/// Scalar type for network numerics.
pub trait Float:
    num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Identifier written into weight-file headers.
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Float for f32 {
    const DTYPE: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    const DTYPE: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle into a [`ParamStore`]; layers hold these instead of the arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Flat registry of named parameters and their gradient accumulators.
///
/// Registration order is deterministic for a fixed architecture, which is
/// what checkpoint serialization and the optimizer key off.
#[derive(Debug, Clone)]
pub struct ParamStore<F: Float> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
    grads: Vec<ArrayD<F>>,
}

impl<F: Float> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        let id = ParamId(self.values.len());
        self.names.push(name.into());
        self.grads.push(ArrayD::zeros(value.raw_dim()));
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<F> {
        &self.grads[id.0]
    }

    /// Accumulate into a parameter's gradient buffer.
    pub fn accum_grad(&mut self, id: ParamId, delta: ArrayViewD<F>) {
        let g = &mut self.grads[id.0];
        debug_assert_eq!(g.shape(), delta.shape(), "grad shape mismatch");
        *g += &delta;
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(F::zero());
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Global L2 norm of all gradients (used for clipping diagnostics).
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for g in &self.grads {
            for &v in g.iter() {
                let x = v.to_f64();
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    /// Scale every gradient by a constant (gradient clipping).
    pub fn scale_grads(&mut self, s: F) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * s);
        }
    }

    /// Clone all parameter values (EMA initialization, checkpoints).
    pub fn clone_values(&self) -> Vec<ArrayD<F>> {
        self.values.clone()
    }

    /// Replace all parameter values, validating shape congruence.
    pub fn load_values(&mut self, values: Vec<ArrayD<F>>) -> crate::error::Result<()> {
        if values.len() != self.values.len() {
            return Err(crate::error::SynthError::Data(format!(
                "parameter count mismatch: store has {}, payload has {}",
                self.values.len(),
                values.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.values[i].shape() {
                return Err(crate::error::SynthError::Data(format!(
                    "shape mismatch for parameter '{}': {:?} vs {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    v.shape()
                )));
            }
        }
        self.values = values;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn store_roundtrip_and_grad_accumulation() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", ArrayD::from_elem(vec![2, 3], 1.5));
        assert_eq!(ps.len(), 1);
        assert_eq!(ps.name(id), "w");
        assert_eq!(ps.num_scalars(), 6);

        let delta = ArrayD::from_elem(vec![2, 3], 0.5);
        ps.accum_grad(id, delta.view());
        ps.accum_grad(id, delta.view());
        assert_eq!(ps.grad(id)[[0, 0]], 1.0);

        ps.zero_grads();
        assert_eq!(ps.grad(id)[[1, 2]], 0.0);
    }

    #[test]
    fn grad_norm_matches_hand_value() {
        let mut ps = ParamStore::<f64>::new();
        let a = ps.add("a", ArrayD::zeros(vec![2]));
        let b = ps.add("b", ArrayD::zeros(vec![1]));
        ps.accum_grad(a, ArrayD::from_shape_vec(vec![2], vec![3.0, 4.0]).unwrap().view());
        ps.accum_grad(b, ArrayD::from_elem(vec![1], 12.0).view());
        // sqrt(9 + 16 + 144) = 13
        assert!((ps.grad_norm() - 13.0).abs() < 1e-12);
    }

    #[test]
    fn load_values_validates_shapes() {
        let mut ps = ParamStore::<f32>::new();
        ps.add("w", ArrayD::zeros(vec![2, 2]));
        assert!(ps.load_values(vec![ArrayD::zeros(vec![2, 3])]).is_err());
        assert!(ps.load_values(vec![]).is_err());
        assert!(ps.load_values(vec![ArrayD::zeros(vec![2, 2])]).is_ok());
    }
}
