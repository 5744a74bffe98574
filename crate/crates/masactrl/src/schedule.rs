//! Closed-form diffusion math: noise-schedule tables, forward noising,
//! deterministic DDIM stepping and inversion, ancestral DDPM stepping, and
//! the training loss.
//!
//! All table math is `f64`; tensor ops are generic over [`Real`]. Every
//! function here is pure: same inputs, bit-identical outputs.

use ndarray::{Array4, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// A latent or image tensor, `[batch, channels, height, width]`.
pub type Latent<F> = Array4<F>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
}

/// Schedule parameters, the serializable identity of a [`NoiseSchedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        // T and the beta range follow the common DDPM convention; both are
        // config-exposed.
        ScheduleParams {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

/// The α/ᾱ tables driving forward diffusion, DDIM stepping, and inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// A point on the diffusion time axis: either a schedule index or the clean
/// boundary where ᾱ = 1 (the target of the final denoising step, and the
/// origin of an inversion). A dedicated variant avoids t = −1 arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimePoint {
    Step(usize),
    /// ᾱ = 1: a clean image, before any noise has been added.
    Boundary,
}

/// Builds the α/ᾱ tables.
pub fn make_schedule(params: ScheduleParams) -> Result<NoiseSchedule> {
    let ScheduleParams {
        timesteps: t_count,
        beta_start,
        beta_end,
        kind,
    } = params;
    if t_count == 0 {
        return Err(Error::config("schedule needs at least one timestep"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let interp = |i: usize| {
        if t_count == 1 {
            0.0
        } else {
            i as f64 / (t_count - 1) as f64
        }
    };
    let betas: Vec<f64> = (0..t_count)
        .map(|i| match kind {
            ScheduleKind::Linear => beta_start + (beta_end - beta_start) * interp(i),
            ScheduleKind::ScaledLinear => {
                let s = beta_start.sqrt() + (beta_end.sqrt() - beta_start.sqrt()) * interp(i);
                s * s
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_count);
    let mut prod = 1.0f64;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        params,
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::contract(format!(
                "timestep {t} out of range (T = {})",
                self.len()
            )));
        }
        Ok(())
    }

    /// ᾱ at a time point; the boundary is exactly 1.
    pub fn alpha_bar_at(&self, tp: TimePoint) -> Result<f64> {
        match tp {
            TimePoint::Step(t) => {
                self.check_t(t)?;
                Ok(self.alpha_bars[t])
            }
            TimePoint::Boundary => Ok(1.0),
        }
    }
}

fn check_same_shape<F: Real>(a: &Latent<F>, b: &Latent<F>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Forward noising: √ᾱ_t·x0 + √(1−ᾱ_t)·ε.
pub fn q_sample<F: Real>(
    x0: &Latent<F>,
    t: usize,
    eps: &Latent<F>,
    sched: &NoiseSchedule,
) -> Result<Latent<F>> {
    check_same_shape(x0, eps, "q_sample")?;
    sched.check_t(t)?;
    let ab = sched.alpha_bars[t];
    let c0 = F::c(ab.sqrt());
    let c1 = F::c((1.0 - ab).sqrt());
    let mut out = x0.clone();
    Zip::from(&mut out).and(eps).for_each(|o, &e| {
        *o = c0 * *o + c1 * e;
    });
    Ok(out)
}

/// Algebraic inversion of the forward process: (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t.
pub fn predict_x0<F: Real>(
    x_t: &Latent<F>,
    eps_pred: &Latent<F>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Latent<F>> {
    check_same_shape(x_t, eps_pred, "predict_x0")?;
    sched.check_t(t)?;
    Ok(predict_x0_with(x_t, eps_pred, sched.alpha_bars[t]))
}

fn predict_x0_with<F: Real>(x_t: &Latent<F>, eps_pred: &Latent<F>, alpha_bar: f64) -> Latent<F> {
    let inv = F::c(1.0 / alpha_bar.sqrt());
    let c1 = F::c((1.0 - alpha_bar).sqrt());
    let mut out = x_t.clone();
    Zip::from(&mut out).and(eps_pred).for_each(|o, &e| {
        *o = (*o - c1 * e) * inv;
    });
    out
}

/// One deterministic DDIM update from `t` down to `t_prev`
/// (η = 0; inversion requires determinism, so the stochastic variant is out).
///
/// `TimePoint::Boundary` as `t_prev` denotes the final denoise to x0.
pub fn ddim_step<F: Real>(
    x_t: &Latent<F>,
    eps_pred: &Latent<F>,
    t: usize,
    t_prev: TimePoint,
    sched: &NoiseSchedule,
) -> Result<Latent<F>> {
    check_same_shape(x_t, eps_pred, "ddim_step")?;
    sched.check_t(t)?;
    if let TimePoint::Step(p) = t_prev {
        if p >= t {
            return Err(Error::contract(format!(
                "ddim_step requires t_prev < t, got t_prev = {p}, t = {t}"
            )));
        }
    }
    let ab_prev = sched.alpha_bar_at(t_prev)?;
    let x0 = predict_x0_with(x_t, eps_pred, sched.alpha_bars[t]);
    let c0 = F::c(ab_prev.sqrt());
    let c1 = F::c((1.0 - ab_prev).sqrt());
    let mut out = x0;
    Zip::from(&mut out).and(eps_pred).for_each(|o, &e| {
        *o = c0 * *o + c1 * e;
    });
    Ok(out)
}

/// Mirror of [`ddim_step`] run forward in time: maps the state at `t` to the
/// state at `t_next > t`. `TimePoint::Boundary` as `t` means the input is a
/// clean image.
pub fn ddim_invert_step<F: Real>(
    x_t: &Latent<F>,
    eps_pred: &Latent<F>,
    t: TimePoint,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<Latent<F>> {
    check_same_shape(x_t, eps_pred, "ddim_invert_step")?;
    sched.check_t(t_next)?;
    if let TimePoint::Step(a) = t {
        if t_next <= a {
            return Err(Error::contract(format!(
                "ddim_invert_step requires t_next > t, got t = {a}, t_next = {t_next}"
            )));
        }
    }
    let ab_from = sched.alpha_bar_at(t)?;
    let ab_next = sched.alpha_bars[t_next];
    let x0 = predict_x0_with(x_t, eps_pred, ab_from);
    let c0 = F::c(ab_next.sqrt());
    let c1 = F::c((1.0 - ab_next).sqrt());
    let mut out = x0;
    Zip::from(&mut out).and(eps_pred).for_each(|o, &e| {
        *o = c0 * *o + c1 * e;
    });
    Ok(out)
}

/// One ancestral DDPM update: μ_θ + σ_t·noise with σ_t = √β_t, except t = 0
/// where the final step is deterministic (σ = 0).
pub fn ddpm_step<F: Real>(
    x_t: &Latent<F>,
    eps_pred: &Latent<F>,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Latent<F>,
) -> Result<Latent<F>> {
    check_same_shape(x_t, eps_pred, "ddpm_step")?;
    check_same_shape(x_t, noise, "ddpm_step noise")?;
    sched.check_t(t)?;
    let alpha = sched.alphas[t];
    let ab = sched.alpha_bars[t];
    let mean_x = F::c(1.0 / alpha.sqrt());
    let mean_e = F::c((1.0 - alpha) / ((1.0 - ab).sqrt() * alpha.sqrt()));
    let sigma = if t == 0 {
        F::zero()
    } else {
        F::c(sched.betas[t].sqrt())
    };
    let mut out = x_t.clone();
    Zip::from(&mut out)
        .and(eps_pred)
        .and(noise)
        .for_each(|o, &e, &n| {
            *o = mean_x * *o - mean_e * e + sigma * n;
        });
    Ok(out)
}

/// Mean squared error between true and predicted noise, reduced over all
/// elements in `f64`.
pub fn training_loss<F: Real>(eps_true: &Latent<F>, eps_pred: &Latent<F>) -> Result<f64> {
    check_same_shape(eps_true, eps_pred, "training_loss")?;
    let mut acc = 0.0f64;
    Zip::from(eps_true).and(eps_pred).for_each(|&a, &b| {
        let d = (a - b).to_f64c();
        acc += d * d;
    });
    Ok(acc / eps_true.len() as f64)
}

/// The sub-sequence of schedule indices used for `steps`-step sampling:
/// t_k = ⌊k·T/steps⌋, ascending. Sampling walks it largest-to-smallest and
/// finishes at the ᾱ = 1 boundary; inversion walks the exact mirror.
pub fn respaced_timesteps(t_count: usize, steps: usize) -> Vec<usize> {
    (0..steps).map(|k| k * t_count / steps).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use num::{BigRational, FromPrimitive as _, ToPrimitive as _};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(t: usize, start: f64, end: f64) -> NoiseSchedule {
        make_schedule(ScheduleParams {
            timesteps: t,
            beta_start: start,
            beta_end: end,
            kind: ScheduleKind::Linear,
        })
        .unwrap()
    }

    fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Latent<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || f64::std_normal(&mut rng))
    }

    #[test]
    fn single_step_schedule() {
        let s = linear(1, 0.02, 0.02);
        assert_eq!(s.betas(), &[0.02]);
        assert_eq!(s.alpha_bars(), &[0.98]);
        assert_eq!(s.alphas(), &[0.98]);
    }

    #[test]
    fn default_schedule_against_exact_rational_product() {
        let s = make_schedule(ScheduleParams::default()).unwrap();
        assert_eq!(s.alpha_bars()[0], 1.0 - 1e-4);

        // Oracle: exact rational prefix product over the f64 beta values.
        let mut prod = BigRational::from_f64(1.0).unwrap();
        let mut exact = Vec::with_capacity(s.len());
        for &b in s.betas() {
            prod *= BigRational::from_f64(1.0 - b).unwrap();
            exact.push(prod.clone());
        }
        for (t, e) in exact.iter().enumerate() {
            let want = e.to_f64().unwrap();
            let got = s.alpha_bars()[t];
            assert!(
                ((got - want) / want).abs() < 1e-12,
                "alpha_bar[{t}]: got {got}, exact {want}"
            );
        }
    }

    #[test]
    fn alpha_bars_strictly_decreasing_and_in_unit_interval() {
        let s = make_schedule(ScheduleParams::default()).unwrap();
        for t in 0..s.len() {
            assert!(s.alpha_bars()[t] > 0.0 && s.alpha_bars()[t] < 1.0);
            if t > 0 {
                assert!(s.alpha_bars()[t] < s.alpha_bars()[t - 1]);
                assert!(s.betas()[t] > s.betas()[t - 1]);
            }
        }
    }

    #[test]
    fn schedule_rejects_bad_params() {
        assert!(matches!(
            make_schedule(ScheduleParams {
                timesteps: 0,
                ..Default::default()
            }),
            Err(Error::Config(_))
        ));
        for (s, e) in [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0)] {
            assert!(make_schedule(ScheduleParams {
                timesteps: 10,
                beta_start: s,
                beta_end: e,
                kind: ScheduleKind::Linear,
            })
            .is_err());
        }
    }

    #[test]
    fn scaled_linear_interpolates_sqrt_beta() {
        let s = make_schedule(ScheduleParams {
            timesteps: 3,
            beta_start: 0.01,
            beta_end: 0.04,
            kind: ScheduleKind::ScaledLinear,
        })
        .unwrap();
        // midpoint of sqrt: (0.1 + 0.2)/2 = 0.15, squared = 0.0225
        assert!((s.betas()[1] - 0.0225).abs() < 1e-15);
        assert!((s.betas()[0] - 0.01).abs() < 1e-15);
        assert!((s.betas()[2] - 0.04).abs() < 1e-15);
    }

    #[test]
    fn q_sample_endpoints_and_exact_quarter() {
        // ᾱ ≈ 1: near-zero beta keeps the sample at x0.
        let s_clean = linear(1, 1e-12, 1e-12);
        let x0 = randn((1, 2, 3, 3), 1);
        let eps = randn((1, 2, 3, 3), 2);
        let out = q_sample(&x0, 0, &eps, &s_clean).unwrap();
        for (o, x) in out.iter().zip(x0.iter()) {
            assert!((o - x).abs() < 1e-5);
        }

        // ᾱ ≈ 0: beta near 1 makes the sample pure noise.
        let s_noise = linear(1, 1.0 - 1e-12, 1.0 - 1e-12);
        let out = q_sample(&x0, 0, &eps, &s_noise).unwrap();
        for (o, e) in out.iter().zip(eps.iter()) {
            assert!((o - e).abs() < 1e-5);
        }

        // ᾱ = 0.25 exactly (beta 0.75 is exact in f64): ones in, 0.5 + √0.75.
        let s_quarter = linear(1, 0.75, 0.75);
        let ones = Array4::<f64>::ones((1, 1, 2, 2));
        let out = q_sample(&ones, 0, &ones, &s_quarter).unwrap();
        let want = 0.5 + 0.75f64.sqrt();
        for &o in out.iter() {
            assert_eq!(o, want);
        }
    }

    #[test]
    fn predict_x0_inverts_q_sample() {
        let s = make_schedule(ScheduleParams::default()).unwrap();
        let x0 = randn((2, 3, 4, 4), 3);
        let eps = randn((2, 3, 4, 4), 4);
        for t in [0usize, 1, 250, 500, 999] {
            let x_t = q_sample(&x0, t, &eps, &s).unwrap();
            let rec = predict_x0(&x_t, &eps, t, &s).unwrap();
            let num: f64 = rec
                .iter()
                .zip(x0.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let den: f64 = x0.iter().map(|a| a * a).sum();
            assert!(
                (num / den).sqrt() < 1e-6,
                "roundtrip rel L2 error too large at t = {t}"
            );
        }
    }

    #[test]
    fn predict_x0_matches_scalar_loop_oracle() {
        let s = make_schedule(ScheduleParams::default()).unwrap();
        let x_t = randn((1, 2, 3, 3), 5);
        let eps = randn((1, 2, 3, 3), 6);
        let t = 417;
        let got = predict_x0(&x_t, &eps, t, &s).unwrap();
        let ab = s.alpha_bars()[t];
        for ((o, x), e) in got.iter().zip(x_t.iter()).zip(eps.iter()) {
            let want = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
            assert!((o - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
        // eps_pred = 0, ᾱ = 0.25 → doubling.
        let s_quarter = linear(1, 0.75, 0.75);
        let zero = Array4::<f64>::zeros((1, 2, 3, 3));
        let got = predict_x0(&x_t, &zero, 0, &s_quarter).unwrap();
        for (o, x) in got.iter().zip(x_t.iter()) {
            assert_eq!(*o, x * 2.0);
        }
    }

    #[test]
    fn ddim_step_collapses_without_noise_prediction() {
        let s = make_schedule(ScheduleParams::default()).unwrap();
        let x_t = randn((1, 1, 4, 4), 7);
        let zero = Array4::<f64>::zeros((1, 1, 4, 4));
        let t = 600;
        let t_prev = 400;
        let got = ddim_step(&x_t, &zero, t, TimePoint::Step(t_prev), &s).unwrap();
        let scale = (s.alpha_bars()[t_prev] / s.alpha_bars()[t]).sqrt();
        for (o, x) in got.iter().zip(x_t.iter()) {
            assert!((o - scale * x).abs() < 1e-12);
        }
        // Boundary target: the final denoise is exactly predict_x0.
        let eps = randn((1, 1, 4, 4), 8);
        let got = ddim_step(&x_t, &eps, t, TimePoint::Boundary, &s).unwrap();
        let want = predict_x0(&x_t, &eps, t, &s).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn ddim_invert_then_step_is_identity() {
        let s = make_schedule(ScheduleParams::default()).unwrap();
        let x = randn((1, 2, 4, 4), 9);
        let eps = randn((1, 2, 4, 4), 10);
        for (t, t_next) in [(0usize, 20usize), (500, 520), (978, 999)] {
            let up = ddim_invert_step(&x, &eps, TimePoint::Step(t), t_next, &s).unwrap();
            let back = ddim_step(&up, &eps, t_next, TimePoint::Step(t), &s).unwrap();
            for (a, b) in back.iter().zip(x.iter()) {
                assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
            }
        }
        // Boundary round trip.
        let up = ddim_invert_step(&x, &eps, TimePoint::Boundary, 0, &s).unwrap();
        let back = ddim_step(&up, &eps, 0, TimePoint::Boundary, &s).unwrap();
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn ddim_invert_step_collapse_and_contract() {
        let s = make_schedule(ScheduleParams::default()).unwrap();
        let x = randn((1, 1, 2, 2), 11);
        let zero = Array4::<f64>::zeros((1, 1, 2, 2));
        let got = ddim_invert_step(&x, &zero, TimePoint::Step(100), 300, &s).unwrap();
        let scale = (s.alpha_bars()[300] / s.alpha_bars()[100]).sqrt();
        for (o, v) in got.iter().zip(x.iter()) {
            assert!((o - scale * v).abs() < 1e-12);
        }
        assert!(ddim_invert_step(&x, &zero, TimePoint::Step(300), 300, &s).is_err());
        assert!(ddim_step(&x, &zero, 300, TimePoint::Step(300), &s).is_err());
        assert!(ddim_step(&x, &zero, 300, TimePoint::Step(301), &s).is_err());
    }

    #[test]
    fn full_length_ddim_walk_recovers_x0() {
        // T applications of ddim_step with the oracle eps stay on the exact
        // trajectory of q_sample and land back on x0.
        let s = linear(50, 1e-3, 0.3);
        let x0 = randn((1, 3, 8, 8), 12);
        let eps = randn((1, 3, 8, 8), 13);
        let mut x = q_sample(&x0, 49, &eps, &s).unwrap();
        for t in (0..50).rev() {
            let t_prev = if t == 0 {
                TimePoint::Boundary
            } else {
                TimePoint::Step(t - 1)
            };
            x = ddim_step(&x, &eps, t, t_prev, &s).unwrap();
        }
        let num: f64 = x.iter().zip(x0.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = x0.iter().map(|a| a * a).sum();
        assert!((num / den).sqrt() < 1e-4);
    }

    #[test]
    fn ddpm_step_deterministic_branch_and_oracle() {
        let s = make_schedule(ScheduleParams::default()).unwrap();
        let x_t = randn((1, 2, 4, 4), 14);
        let eps = randn((1, 2, 4, 4), 15);
        let noise = randn((1, 2, 4, 4), 16);
        let zero = Array4::<f64>::zeros((1, 2, 4, 4));
        let t = 321;

        // noise = 0 → exactly the posterior mean.
        let got = ddpm_step(&x_t, &eps, t, &s, &zero).unwrap();
        let (a, ab) = (s.alphas()[t], s.alpha_bars()[t]);
        for ((o, x), e) in got.iter().zip(x_t.iter()).zip(eps.iter()) {
            let mu = (x - e * (1.0 - a) / (1.0 - ab).sqrt()) / a.sqrt();
            assert!((o - mu).abs() < 1e-12);
        }

        // Scalar-loop oracle with noise.
        let got = ddpm_step(&x_t, &eps, t, &s, &noise).unwrap();
        let sigma = s.betas()[t].sqrt();
        for (((o, x), e), n) in got.iter().zip(x_t.iter()).zip(eps.iter()).zip(noise.iter()) {
            let mu = (x - e * (1.0 - a) / (1.0 - ab).sqrt()) / a.sqrt();
            let want = mu + sigma * n;
            assert!((o - want).abs() <= 1e-12 * want.abs().max(1.0));
        }

        // t = 0 is the final step: sigma forced to zero.
        let got = ddpm_step(&x_t, &eps, 0, &s, &noise).unwrap();
        let got_zero_noise = ddpm_step(&x_t, &eps, 0, &s, &zero).unwrap();
        assert_eq!(got, got_zero_noise);

        // α → 1 limit: tiny beta leaves x_t nearly unchanged when eps = 0.
        let s_tiny = linear(1, 1e-12, 1e-12);
        let got = ddpm_step(&x_t, &zero, 0, &s_tiny, &zero).unwrap();
        for (o, x) in got.iter().zip(x_t.iter()) {
            assert!((o - x).abs() < 1e-9);
        }
    }

    #[test]
    fn training_loss_cases() {
        let e = randn((1, 1, 10, 10), 17);
        assert_eq!(training_loss(&e, &e).unwrap(), 0.0);

        // Large standard-normal tensor against zero prediction: ≈ 1.
        let big = randn((4, 3, 32, 32), 18);
        let zero = Array4::<f64>::zeros((4, 3, 32, 32));
        let l = training_loss(&big, &zero).unwrap();
        assert!((l - 1.0).abs() < 0.05, "loss = {l}");

        // Hand-computed small case.
        let a = Array4::from_shape_vec((1, 1, 1, 4), vec![1.0, -2.0, 0.5, 0.0]).unwrap();
        let b = Array4::from_shape_vec((1, 1, 1, 4), vec![0.0, -1.0, 0.5, 2.0]).unwrap();
        // diffs: 1, -1, 0, -2 → squares 1, 1, 0, 4 → mean 1.5
        assert_eq!(training_loss(&a, &b).unwrap(), 1.5);

        let c = Array4::<f64>::zeros((1, 1, 2, 2));
        assert!(training_loss(&a, &c).is_err());
    }

    #[test]
    fn operations_are_pure() {
        let s = make_schedule(ScheduleParams::default()).unwrap();
        let x = randn((1, 2, 4, 4), 19);
        let e = randn((1, 2, 4, 4), 20);
        let a = ddim_step(&x, &e, 700, TimePoint::Step(650), &s).unwrap();
        let b = ddim_step(&x, &e, 700, TimePoint::Step(650), &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            q_sample(&x, 31, &e, &s).unwrap(),
            q_sample(&x, 31, &e, &s).unwrap()
        );
    }

    #[test]
    fn respacing_is_uniform_stride() {
        let ts = respaced_timesteps(1000, 50);
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 0);
        assert_eq!(ts[49], 980);
        for (k, t) in ts.iter().enumerate() {
            assert_eq!(*t, k * 20);
        }
        assert_eq!(respaced_timesteps(1000, 1), vec![0]);
    }
}

