//! Conditional diffusion synthesis of T1-weighted volumes from multi-echo
//! gradient-echo inputs, with phantom generation, preprocessing, training,
//! sampling, evaluation, and group-level statistics.

// Pull in the BLAS backend so ndarray's GEMM paths link against the system
// OpenBLAS. Must appear in the crate root even though it is never named.
extern crate blas_src;

pub mod baselines;
pub mod biostats;
pub mod commands;
pub mod config;
pub mod datapipe;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod schedule;
pub mod trainer;
