//! Scalar abstraction over `f32`/`f64`.
//!
//! Schedule tables are always `f64` (the ᾱ prefix products underflow in
//! single precision at T=1000), while network tensors may be either: the
//! trainer runs in `f32`, the finite-difference gradient checks instantiate
//! the same code in `f64`.

use ndarray::NdFloat;
use num_traits::FromPrimitive;
use rand::Rng;
use rand_distr::StandardNormal;

pub trait Real: NdFloat + FromPrimitive {
    /// Lossless into `f64` for reductions and reporting.
    fn to_f64c(self) -> f64;
    /// From an `f64` constant; panics only on NaN-free overflow which the
    /// schedule ranges rule out.
    fn c(v: f64) -> Self;
    fn from_f32c(v: f32) -> Self;
    fn to_f32c(self) -> f32;
    /// One standard-normal draw. The stream depends on the concrete type;
    /// determinism holds per instantiation.
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Real for f32 {
    fn to_f64c(self) -> f64 {
        self as f64
    }
    fn c(v: f64) -> Self {
        v as f32
    }
    fn from_f32c(v: f32) -> Self {
        v
    }
    fn to_f32c(self) -> f32 {
        self
    }
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample::<f32, _>(StandardNormal)
    }
}

impl Real for f64 {
    fn to_f64c(self) -> f64 {
        self
    }
    fn c(v: f64) -> Self {
        v
    }
    fn from_f32c(v: f32) -> Self {
        v as f64
    }
    fn to_f32c(self) -> f32 {
        self as f32
    }
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample::<f64, _>(StandardNormal)
    }
}
