//! Noise-prediction training on the procedural dataset.
//!
//! Per step: draw a batch, a uniform timestep and a noise tensor per
//! sample, form x_t by forward noising, and regress the predicted noise to
//! the true noise. Prompts are dropped (replaced by all-padding) with a
//! small probability so classifier-free guidance has a usable
//! unconditional branch. This module depends only on the schedule and the
//! denoiser; the attention-control and pipeline layers sit strictly above.

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, PromptTokens};
use crate::error::{Error, Result};
use crate::nn::{Adam, GradStore};
use crate::real::Real;
use crate::schedule::NoiseSchedule;

use super::dataset::Dataset;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub grad_clip: f64,
    /// Probability of replacing the prompt with all-padding.
    pub uncond_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch: 8,
            lr: 2e-3,
            grad_clip: 1.0,
            uncond_prob: 0.1,
            seed: 0,
        }
    }
}

fn pad_prompt(n: usize) -> PromptTokens {
    PromptTokens::new(vec![crate::pipeline::PAD_TOKEN; n])
}

/// Mean training loss over `n` deterministic evaluation draws, without
/// touching the parameters.
pub fn eval_loss<F: Real>(
    model: &Denoiser<F>,
    sched: &NoiseSchedule,
    dataset: &Dataset<F>,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0f64;
    for _ in 0..n {
        let item = &dataset.items[rng.random_range(0..dataset.items.len())];
        let t = rng.random_range(0..sched.len());
        let x0 = item.image.mapv(|v| v * F::c(2.0) - F::one());
        let eps = ndarray::Array3::from_shape_simple_fn(x0.dim(), || {
            F::std_normal(&mut rng)
        });
        let x0b = x0.insert_axis(Axis(0));
        let epsb = eps.clone().insert_axis(Axis(0));
        let x_t = crate::schedule::q_sample(&x0b, t, &epsb, sched)?;
        let emb = model.embed_prompt(&item.tokens)?;
        let pred = model.forward(&x_t, t, &emb, None, None)?;
        acc += crate::schedule::training_loss(&epsb, &pred)?;
    }
    Ok(acc / n as f64)
}

/// One optimization step over a batch; returns the batch loss.
fn train_step<F: Real>(
    model: &mut Denoiser<F>,
    sched: &NoiseSchedule,
    dataset: &Dataset<F>,
    cfg: &TrainConfig,
    opt: &mut Adam<F>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut grads = GradStore::zeros_like(model.params());
    let mut batch_loss = 0.0f64;
    let n_tokens = model.config().max_tokens;
    for _ in 0..cfg.batch {
        let item = &dataset.items[rng.random_range(0..dataset.items.len())];
        let t = rng.random_range(0..sched.len());
        let x0 = item.image.mapv(|v| v * F::c(2.0) - F::one());
        let eps =
            ndarray::Array3::from_shape_simple_fn(x0.dim(), || {
                F::std_normal(rng)
            });
        let drop_prompt: f64 = rng.random_range(0.0..1.0);
        let tokens = if drop_prompt < cfg.uncond_prob {
            pad_prompt(n_tokens)
        } else {
            item.tokens.clone()
        };
        // per-sample forward noising without the batch wrapper
        let ab = sched.alpha_bars()[t];
        let (c0, c1) = (F::c(ab.sqrt()), F::c((1.0 - ab).sqrt()));
        let mut x_t = x0;
        ndarray::Zip::from(&mut x_t).and(&eps).for_each(|x, &e| {
            *x = c0 * *x + c1 * e;
        });

        let emb = model.embed_prompt(&tokens)?;
        let (pred, tape) = model.forward_train(&x_t, t, &emb)?;
        let numel = pred.len() as f64;
        let mut sample_loss = 0.0f64;
        let mut d_eps = pred.clone();
        ndarray::Zip::from(&mut d_eps).and(&eps).for_each(|p, &e| {
            let diff = (*p - e).to_f64c();
            sample_loss += diff * diff;
            *p = F::c(2.0 * diff / (numel * cfg.batch as f64));
        });
        batch_loss += sample_loss / numel;
        model.backward(&tape, &d_eps, &mut grads);
    }
    batch_loss /= cfg.batch as f64;
    if !batch_loss.is_finite() {
        return Err(Error::Divergence {
            step: opt.step_count() as usize,
        });
    }
    opt.update(model.params_mut(), &mut grads);
    Ok(batch_loss)
}

/// Run (or continue) training; appends one loss per step to `history`.
pub fn train<F: Real>(
    model: &mut Denoiser<F>,
    sched: &NoiseSchedule,
    dataset: &Dataset<F>,
    cfg: &TrainConfig,
    opt: &mut Adam<F>,
    history: &mut Vec<f64>,
    mut progress: impl FnMut(u64, f64),
) -> Result<()> {
    // Each step draws from its own ChaCha stream keyed by the global step
    // index, so a resumed run reproduces the exact draw sequence of an
    // uninterrupted one.
    let already = opt.step_count();
    for i in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(already + i);
        let loss = train_step(model, sched, dataset, cfg, opt, &mut rng)?;
        history.push(loss);
        progress(already + i + 1, loss);
    }
    Ok(())
}

/// Render the loss curve as a simple line plot.
pub fn save_loss_curve(history: &[f64], path: &std::path::Path) -> Result<()> {
    use ndarray::Array3;
    let (w, h) = (640usize, 360usize);
    let mut img = Array3::from_elem((3, h, w), 1.0f64);
    if !history.is_empty() {
        let max = history.iter().cloned().fold(f64::MIN, f64::max).max(1e-9);
        let min = history.iter().cloned().fold(f64::MAX, f64::min).min(max);
        let span = (max - min).max(1e-9);
        let margin = 20usize;
        let px = |i: usize| margin + i * (w - 2 * margin) / history.len().max(1);
        let py = |v: f64| {
            let t = ((v - min) / span).clamp(0.0, 1.0);
            margin + ((1.0 - t) * (h - 2 * margin) as f64) as usize
        };
        // axes
        for x in margin..w - margin {
            img[(0, h - margin, x)] = 0.6;
            img[(1, h - margin, x)] = 0.6;
            img[(2, h - margin, x)] = 0.6;
        }
        for y in margin..h - margin + 1 {
            img[(0, y, margin)] = 0.6;
            img[(1, y, margin)] = 0.6;
            img[(2, y, margin)] = 0.6;
        }
        // polyline
        let mut prev: Option<(usize, usize)> = None;
        for (i, &v) in history.iter().enumerate() {
            let (x1, y1) = (px(i), py(v));
            if let Some((x0, y0)) = prev {
                let steps = x1.abs_diff(x0).max(y1.abs_diff(y0)).max(1);
                for s in 0..=steps {
                    let x = x0 as f64 + (x1 as f64 - x0 as f64) * s as f64 / steps as f64;
                    let y = y0 as f64 + (y1 as f64 - y0 as f64) * s as f64 / steps as f64;
                    let (xi, yi) = (x as usize, y as usize);
                    if xi < w && yi < h {
                        img[(0, yi, xi)] = 0.8;
                        img[(1, yi, xi)] = 0.2;
                        img[(2, yi, xi)] = 0.2;
                    }
                }
            }
            prev = Some((x1, y1));
        }
    }
    crate::imgio::save_rgb(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::schedule::{make_schedule, ScheduleParams};
    use crate::toy::dataset::make_dataset;
    use crate::toy::scene::TokenGrammar;

    fn tiny_setup() -> (Denoiser<f32>, NoiseSchedule, Dataset<f32>) {
        let cfg = DenoiserConfig {
            image_size: 8,
            in_channels: 3,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            attention_resolutions: vec![4],
            blocks_per_level: 1,
            heads: 2,
            vocab_size: 14,
            token_embed_dim: 8,
            max_tokens: 8,
        };
        let model = Denoiser::<f32>::build(cfg, 0).unwrap();
        let sched = make_schedule(ScheduleParams {
            timesteps: 100,
            ..Default::default()
        })
        .unwrap();
        let ds = make_dataset::<f32>(32, 0, &TokenGrammar, 8);
        (model, sched, ds)
    }

    #[test]
    fn initial_loss_is_near_one_with_zero_output_head() {
        let (model, sched, ds) = tiny_setup();
        // The output conv is zero-initialized, so the model emits zeros and
        // the loss is E‖ε‖² ≈ 1.
        let loss = eval_loss(&model, &sched, &ds, 32, 7).unwrap();
        assert!((loss - 1.0).abs() < 0.1, "initial loss {loss}");
    }

    #[test]
    fn short_training_reduces_loss_and_is_reproducible() {
        let (mut model, sched, ds) = tiny_setup();
        let cfg = TrainConfig {
            steps: 30,
            batch: 4,
            lr: 2e-3,
            ..Default::default()
        };
        let initial = eval_loss(&model, &sched, &ds, 32, 7).unwrap();
        let mut opt = Adam::new(model.params(), cfg.lr, Some(cfg.grad_clip));
        let mut history = Vec::new();
        train(&mut model, &sched, &ds, &cfg, &mut opt, &mut history, |_, _| {}).unwrap();
        assert_eq!(history.len(), 30);
        let after = eval_loss(&model, &sched, &ds, 32, 7).unwrap();
        assert!(
            after < initial,
            "loss did not improve: {initial} → {after}"
        );

        // Bit-identical rerun.
        let (mut model2, sched2, ds2) = tiny_setup();
        let mut opt2 = Adam::new(model2.params(), cfg.lr, Some(cfg.grad_clip));
        let mut history2 = Vec::new();
        train(
            &mut model2,
            &sched2,
            &ds2,
            &cfg,
            &mut opt2,
            &mut history2,
            |_, _| {},
        )
        .unwrap();
        assert_eq!(history, history2);
        for ((_, a), (_, b)) in model.params().iter().zip(model2.params().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn resumed_training_extends_history() {
        let (mut model, sched, ds) = tiny_setup();
        let cfg_a = TrainConfig {
            steps: 10,
            batch: 2,
            ..Default::default()
        };
        let mut opt = Adam::new(model.params(), cfg_a.lr, Some(cfg_a.grad_clip));
        let mut history = Vec::new();
        train(&mut model, &sched, &ds, &cfg_a, &mut opt, &mut history, |_, _| {}).unwrap();
        let cfg_b = TrainConfig { steps: 5, ..cfg_a };
        train(&mut model, &sched, &ds, &cfg_b, &mut opt, &mut history, |_, _| {}).unwrap();
        assert_eq!(history.len(), 15);
        assert_eq!(opt.step_count(), 15);

        // One uninterrupted 15-step run draws the same stream.
        let (mut m2, s2, d2) = tiny_setup();
        let cfg_c = TrainConfig { steps: 15, ..cfg_a };
        let mut opt2 = Adam::new(m2.params(), cfg_c.lr, Some(cfg_c.grad_clip));
        let mut h2 = Vec::new();
        train(&mut m2, &s2, &d2, &cfg_c, &mut opt2, &mut h2, |_, _| {}).unwrap();
        assert_eq!(history, h2);
    }

    #[test]
    fn q_sample_batch_statistics_at_high_noise() {
        // At t near T the marginal of x_t is close to a standard normal.
        let sched = make_schedule(ScheduleParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000usize;
        let mut acc = 0.0f64;
        let mut acc2 = 0.0f64;
        let t = sched.len() - 1;
        let ab = sched.alpha_bars()[t];
        for _ in 0..n {
            let x0: f64 = rng.random_range(-1.0..1.0);
            let e = f64::std_normal(&mut rng);
            let v = ab.sqrt() * x0 + (1.0 - ab).sqrt() * e;
            acc += v;
            acc2 += v * v;
        }
        let mean = acc / n as f64;
        let var = acc2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn loss_curve_renders() {
        let dir = std::env::temp_dir().join("masactrl_train_t");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("loss.png");
        let history: Vec<f64> = (0..100).map(|i| 1.0 / (1.0 + i as f64 * 0.1)).collect();
        save_loss_curve(&history, &path).unwrap();
        assert!(path.exists());
    }
}
