//! Command implementations. Each takes fully resolved arguments (the same
//! struct the manifest stores) plus an output directory, and returns the
//! relative output paths and summary statistics.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use masactrl::attention::{dump_attention_artifacts, ControlConfig, RecordingController};
use masactrl::ckpt::{
    load_checkpoint, save_checkpoint, write_container, Checkpoint, CheckpointExtras,
    CheckpointMeta, Record, TrainInfo,
};
use masactrl::denoiser::{Denoiser, PromptTokens, SpatialCondition};
use masactrl::imgio;
use masactrl::nn::Adam;
use masactrl::pipeline::{
    invert, masactrl_edit, seed_latent, synthesize, synthesize_with, EditOutcome, EditRequest,
    EditSource, LatentCodec,
};
use masactrl::schedule::{make_schedule, Latent};
use masactrl::toy::{
    chi2_distance, downsample_raster, fg_histogram, make_dataset, scene_classify,
    write_dataset, Position, TokenGrammar, SHAPE_TOKEN_SLOT,
};
use masactrl::Real;

use crate::config::RunConfig;
use crate::CliError;

type F = f32;
type Out = Result<(Vec<String>, serde_json::Value), CliError>;

fn engine(e: masactrl::Error) -> CliError {
    CliError::Engine(e)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint<F>, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    load_checkpoint::<F>(path).map_err(engine)
}

fn parse_prompt(grammar: &TokenGrammar, phrase: &str) -> Result<PromptTokens, CliError> {
    grammar
        .parse_phrase(phrase)
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn image_stats(a: &Latent<F>, b: &Latent<F>) -> (f64, f64) {
    let mut mae = 0.0f64;
    let mut mse = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = (x - y).abs() as f64;
        mae += d;
        mse += d * d;
    }
    let n = a.len() as f64;
    mae /= n;
    mse /= n;
    let psnr = if mse > 0.0 {
        10.0 * (1.0 / mse).log10()
    } else {
        f64::INFINITY
    };
    (mae, psnr)
}

/// Tile `[3, s, s]` images into a rows × cols grid with 2-pixel separators.
fn image_grid(images: &[Array3<F>], rows: usize, cols: usize) -> Array3<F> {
    let s = images[0].dim().1;
    let sep = 2usize;
    let (gh, gw) = (rows * s + (rows + 1) * sep, cols * s + (cols + 1) * sep);
    let mut grid = Array3::from_elem((3, gh, gw), 0.2f32);
    for (i, img) in images.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let (y0, x0) = (sep + r * (s + sep), sep + c * (s + sep));
        for ch in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    grid[(ch, y0 + y, x0 + x)] = img[(ch, y, x)];
                }
            }
        }
    }
    grid
}

fn batch_to_image(batch: &Latent<F>) -> Array3<F> {
    batch.index_axis(Axis(0), 0).to_owned()
}

/// Build spatial-condition maps from a binary raster: the raster is
/// resampled to every accepted encoder resolution and broadcast over
/// channels as a zero-mean additive bias.
fn condition_from_raster(
    model: &Denoiser<F>,
    raster: &Array2<bool>,
    gain: f64,
) -> SpatialCondition<F> {
    let mut cond = SpatialCondition::new();
    for (res, ch) in model.condition_shapes() {
        let down = if raster.dim().0 == res {
            raster.clone()
        } else {
            downsample_raster(raster, res)
        };
        let on = down.iter().filter(|&&b| b).count() as f64;
        let mean = on / (res * res) as f64;
        let mut map = Array3::zeros((ch, res, res));
        for y in 0..res {
            for x in 0..res {
                let v = (if down[(y, x)] { 1.0 } else { 0.0 } - mean) * gain;
                for c in 0..ch {
                    map[(c, y, x)] = v as f32;
                }
            }
        }
        cond.insert(res, map);
    }
    cond
}

// --------------------------------------------------------------------
// train

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    pub config: RunConfig,
    pub resume: Option<PathBuf>,
    pub checkpoint_out: PathBuf,
}

pub fn run_train(args: &TrainArgs, out_dir: &Path) -> Out {
    let cfg = &args.config;
    std::fs::create_dir_all(out_dir).map_err(|e| engine(e.into()))?;
    let sched = make_schedule(cfg.schedule).map_err(engine)?;
    let grammar = TokenGrammar;
    let dataset = make_dataset::<F>(
        cfg.train.dataset_size,
        cfg.train.dataset_seed,
        &grammar,
        cfg.model.image_size,
    );

    let train_cfg = masactrl::toy::TrainConfig {
        steps: cfg.train.steps,
        batch: cfg.train.batch,
        lr: cfg.train.lr,
        grad_clip: cfg.train.grad_clip,
        uncond_prob: cfg.train.uncond_prob,
        seed: cfg.train.train_seed,
    };

    let (mut model, mut opt, mut history, mut meta) = match &args.resume {
        Some(prev) => {
            let ck = load_ckpt(prev)?;
            let mut opt = Adam::new(ck.denoiser.params(), cfg.train.lr, Some(cfg.train.grad_clip));
            if let (Some(m), Some(v)) = (ck.opt_m, ck.opt_v) {
                opt.restore_state(m, v, ck.extras.adam_step);
            }
            (ck.denoiser, opt, ck.extras.loss_history, ck.meta)
        }
        None => {
            let model =
                Denoiser::<F>::build(cfg.model.clone(), cfg.train.model_seed).map_err(engine)?;
            let opt = Adam::new(model.params(), cfg.train.lr, Some(cfg.train.grad_clip));
            let meta = CheckpointMeta {
                format_version: 1,
                model: cfg.model.clone(),
                schedule: cfg.schedule,
                model_seed: cfg.train.model_seed,
                train: TrainInfo {
                    optimizer: "adam".into(),
                    lr: cfg.train.lr,
                    batch: cfg.train.batch,
                    steps_trained: 0,
                    grad_clip: cfg.train.grad_clip,
                    uncond_prob: cfg.train.uncond_prob,
                    dataset_seed: cfg.train.dataset_seed,
                    train_seed: cfg.train.train_seed,
                    dataset_size: cfg.train.dataset_size,
                },
            };
            (model, opt, Vec::new(), meta)
        }
    };

    let log_every = cfg.train.log_every.max(1);
    masactrl::toy::train(
        &mut model,
        &sched,
        &dataset,
        &train_cfg,
        &mut opt,
        &mut history,
        |step, loss| {
            if step % log_every == 0 {
                println!("step {step:>6}  loss {loss:.5}");
            }
        },
    )
    .map_err(engine)?;

    meta.train.steps_trained = opt.step_count();
    let (m, v) = opt.state();
    let ckpt = Checkpoint {
        meta,
        denoiser: model,
        extras: CheckpointExtras {
            loss_history: history.clone(),
            adam_step: opt.step_count(),
            has_optimizer_state: true,
        },
        opt_m: Some(m.to_vec()),
        opt_v: Some(v.to_vec()),
    };
    save_checkpoint(&args.checkpoint_out, &ckpt).map_err(engine)?;
    masactrl::toy::save_loss_curve(&history, &out_dir.join("loss_curve.png")).map_err(engine)?;

    let final_loss = history.last().copied().unwrap_or(f64::NAN);
    Ok((
        vec![
            args.checkpoint_out.display().to_string(),
            "loss_curve.png".into(),
        ],
        json!({
            "steps_trained": ckpt.extras.adam_step,
            "final_loss": final_loss,
            "history_len": history.len(),
        }),
    ))
}

// --------------------------------------------------------------------
// sample

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub prompt: String,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
    pub save_trajectory: bool,
}

pub fn run_sample(args: &SampleArgs, out_dir: &Path) -> Out {
    let ck = load_ckpt(&args.checkpoint)?;
    let sched = make_schedule(ck.meta.schedule).map_err(engine)?;
    let prompt = parse_prompt(&TokenGrammar, &args.prompt)?;
    let (img, traj) = synthesize(
        &ck.denoiser,
        &sched,
        &prompt,
        args.seed,
        args.steps,
        args.guidance,
        None,
    )
    .map_err(engine)?;
    std::fs::create_dir_all(out_dir).map_err(|e| engine(e.into()))?;
    imgio::save_rgb(&batch_to_image(&img), &out_dir.join("sample.png")).map_err(engine)?;
    let mut outputs = vec!["sample.png".to_string()];
    if args.save_trajectory {
        write_container(
            &out_dir.join("trajectory.masa"),
            &[Record::Traj(traj.to_record("sample"))],
        )
        .map_err(engine)?;
        outputs.push("trajectory.masa".into());
    }
    let cls = scene_classify(&batch_to_image(&img));
    Ok((
        outputs,
        json!({
            "classified": {
                "shape": cls.shape,
                "fg_color": cls.fg_color,
                "position": cls.position,
                "confidence": cls.confidence,
            },
        }),
    ))
}

// --------------------------------------------------------------------
// edit

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditArgs {
    pub checkpoint: PathBuf,
    pub source_prompt: String,
    pub target_prompt: String,
    /// Seed for noise-synthesized sources; an image path for real ones.
    pub seed: Option<u64>,
    pub image: Option<PathBuf>,
    pub start_step: usize,
    pub start_layer: usize,
    pub mask: bool,
    pub source_token_index: usize,
    pub target_token_index: usize,
    pub mask_threshold: f64,
    pub apply_to_unconditional: bool,
    pub steps: usize,
    pub guidance: f64,
    pub condition_raster: Option<PathBuf>,
    pub condition_gain: f64,
}

pub fn build_edit_request(
    args: &EditArgs,
    ck: &Checkpoint<F>,
) -> Result<EditRequest<F>, CliError> {
    let grammar = TokenGrammar;
    let prompt_s = parse_prompt(&grammar, &args.source_prompt)?;
    let prompt_t = parse_prompt(&grammar, &args.target_prompt)?;
    let source = match (&args.image, args.seed) {
        (Some(path), _) => {
            let img = imgio::load_rgb::<F>(path).map_err(engine)?;
            let s = ck.meta.model.image_size;
            if img.dim() != (3, s, s) {
                return Err(CliError::Usage(format!(
                    "source image is {:?}, model expects (3, {s}, {s})",
                    img.dim()
                )));
            }
            EditSource::Image {
                image: img.insert_axis(Axis(0)),
                prompt: prompt_s,
            }
        }
        (None, Some(seed)) => EditSource::Seed {
            seed,
            prompt: prompt_s,
        },
        (None, None) => {
            return Err(CliError::Usage(
                "edit needs either --seed or --image for the source".into(),
            ))
        }
    };
    let mut req = EditRequest::new(source, prompt_t);
    req.steps = args.steps;
    req.guidance_scale = args.guidance;
    req.schedule = ck.meta.schedule;
    req.control = ControlConfig {
        start_step: args.start_step,
        start_layer: args.start_layer,
        mask_enabled: args.mask,
        source_token_index: args.source_token_index,
        target_token_index: args.target_token_index,
        mask_threshold: args.mask_threshold,
        apply_to_unconditional: args.apply_to_unconditional,
    };
    if let Some(raster_path) = &args.condition_raster {
        let raster = imgio::load_bitmask(raster_path).map_err(engine)?;
        let cond = condition_from_raster(&ck.denoiser, &raster, args.condition_gain);
        req = masactrl::pipeline::apply_condition(&req, &ck.denoiser, cond).map_err(engine)?;
    }
    Ok(req)
}

pub fn run_edit_outcome(args: &EditArgs) -> Result<(Checkpoint<F>, EditOutcome<F>), CliError> {
    let ck = load_ckpt(&args.checkpoint)?;
    let req = build_edit_request(args, &ck)?;
    let outcome = masactrl_edit(&req, &ck.denoiser).map_err(engine)?;
    Ok((ck, outcome))
}

pub fn run_edit(args: &EditArgs, out_dir: &Path) -> Out {
    let (_, outcome) = run_edit_outcome(args)?;
    std::fs::create_dir_all(out_dir).map_err(|e| engine(e.into()))?;
    imgio::save_rgb(&batch_to_image(&outcome.source_image), &out_dir.join("I_s.png"))
        .map_err(engine)?;
    imgio::save_rgb(&batch_to_image(&outcome.target_image), &out_dir.join("I.png"))
        .map_err(engine)?;
    let src = scene_classify(&batch_to_image(&outcome.source_image));
    let tgt = scene_classify(&batch_to_image(&outcome.target_image));
    Ok((
        vec!["I_s.png".into(), "I.png".into()],
        json!({
            "substitutions": outcome.substitutions,
            "degenerate_mask_steps": outcome.degenerate_mask_steps,
            "source_classified": { "shape": src.shape, "position": src.position, "confidence": src.confidence },
            "target_classified": { "shape": tgt.shape, "position": tgt.position, "confidence": tgt.confidence },
        }),
    ))
}

// --------------------------------------------------------------------
// invert

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvertArgs {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    /// Grammar phrase; empty string means the all-padding null analogue.
    pub prompt: String,
    pub steps: usize,
    pub guidance: f64,
}

pub fn run_invert(args: &InvertArgs, out_dir: &Path) -> Out {
    let ck = load_ckpt(&args.checkpoint)?;
    let sched = make_schedule(ck.meta.schedule).map_err(engine)?;
    let s = ck.meta.model.image_size;
    let img = imgio::load_rgb::<F>(&args.image).map_err(engine)?;
    if img.dim() != (3, s, s) {
        return Err(CliError::Usage(format!(
            "input image is {:?}, model expects (3, {s}, {s})",
            img.dim()
        )));
    }
    let img = img.insert_axis(Axis(0));
    let prompt = if args.prompt.is_empty() {
        PromptTokens::new(vec![masactrl::pipeline::PAD_TOKEN; ck.meta.model.max_tokens])
    } else {
        parse_prompt(&TokenGrammar, &args.prompt)?
    };
    let (z_t, traj) = invert(&ck.denoiser, &sched, &img, &prompt, args.steps, args.guidance)
        .map_err(engine)?;

    // Round trip: resample from z_T with the same prompt and guidance.
    let recon = if args.steps == 0 {
        LatentCodec::<F>::decode(&masactrl::pipeline::IdentityCodec, &z_t).map_err(engine)?
    } else {
        synthesize_with(
            &ck.denoiser,
            &sched,
            &prompt,
            z_t.clone(),
            args.steps,
            args.guidance,
            None,
            None,
        )
        .map_err(engine)?
        .0
    };
    let (mae, psnr) = image_stats(&img, &recon);
    let n = z_t.len() as f64;
    let mean = z_t.iter().map(|v| v.to_f64c()).sum::<f64>() / n;
    let std = (z_t.iter().map(|v| (v.to_f64c() - mean).powi(2)).sum::<f64>() / n).sqrt();

    std::fs::create_dir_all(out_dir).map_err(|e| engine(e.into()))?;
    write_container(
        &out_dir.join("latent.masa"),
        &[
            Record::Traj(traj.to_record("inversion")),
            Record::Meta(
                json!({ "kind": "inversion", "steps": args.steps, "guidance": args.guidance })
                    .to_string(),
            ),
        ],
    )
    .map_err(engine)?;
    imgio::save_rgb(&batch_to_image(&recon), &out_dir.join("reconstruction.png"))
        .map_err(engine)?;
    Ok((
        vec!["latent.masa".into(), "reconstruction.png".into()],
        json!({
            "mae": mae,
            "psnr_db": psnr,
            "latent_mean": mean,
            "latent_std": std,
        }),
    ))
}

// --------------------------------------------------------------------
// ablate

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateArgs {
    pub checkpoint: PathBuf,
    pub source_prompt: String,
    pub target_prompt: String,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
    pub s_values: Vec<usize>,
    pub l_values: Vec<usize>,
    pub mask: bool,
}

/// Content preservation: χ²-similarity of foreground color histograms
/// between the edit and its source. Layout compliance: how close the
/// edited foreground centroid lands to the target-position band center.
fn cell_scores(
    outcome: &EditOutcome<F>,
    target_pos: Position,
    image_size: usize,
) -> (f64, f64, f64, bool) {
    let src_img = batch_to_image(&outcome.source_image);
    let tgt_img = batch_to_image(&outcome.target_image);
    let src_cls = scene_classify(&src_img);
    let tgt_cls = scene_classify(&tgt_img);
    let chi2 = match (&src_cls.low_confidence, &tgt_cls.low_confidence) {
        (false, false) => {
            let hs = fg_histogram(&src_img, &src_cls.fg_mask, 8);
            let ht = fg_histogram(&tgt_img, &tgt_cls.fg_mask, 8);
            chi2_distance(&hs, &ht)
        }
        _ => 1.0,
    };
    let content = 1.0 / (1.0 + 4.0 * chi2);
    let layout = match tgt_cls.centroid {
        Some((cx, _)) => {
            let want = match target_pos {
                Position::Left => 0.25,
                Position::Center => 0.5,
                Position::Right => 0.75,
            } * image_size as f64;
            (1.0 - (cx - want).abs() / (image_size as f64 / 3.0)).clamp(0.0, 1.0)
        }
        None => 0.0,
    };
    let position_ok = tgt_cls.position == Some(target_pos);
    (content, layout, chi2, position_ok)
}

pub fn run_ablate(args: &AblateArgs, out_dir: &Path) -> Out {
    if args.s_values.is_empty() || args.l_values.is_empty() {
        return Err(CliError::Usage("ablation sweep must not be empty".into()));
    }
    let ck = load_ckpt(&args.checkpoint)?;
    let grammar = TokenGrammar;
    let prompt_s = parse_prompt(&grammar, &args.source_prompt)?;
    let prompt_t = parse_prompt(&grammar, &args.target_prompt)?;
    let (_, _, target_pos, _) = grammar
        .decode(&prompt_t)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let image_size = ck.meta.model.image_size;

    let mut csv = String::from("s,l,content,layout,combined,chi2,position_ok\n");
    let mut cells = Vec::new();
    for &s in &args.s_values {
        for &l in &args.l_values {
            let mut req = EditRequest::new(
                EditSource::Seed {
                    seed: args.seed,
                    prompt: prompt_s.clone(),
                },
                prompt_t.clone(),
            );
            req.steps = args.steps;
            req.guidance_scale = args.guidance;
            req.schedule = ck.meta.schedule;
            req.control = ControlConfig {
                start_step: s,
                start_layer: l,
                mask_enabled: args.mask,
                ..Default::default()
            };
            let outcome = masactrl_edit(&req, &ck.denoiser).map_err(engine)?;
            let (content, layout, chi2, pos_ok) = cell_scores(&outcome, target_pos, image_size);
            csv.push_str(&format!(
                "{s},{l},{content:.6},{layout:.6},{:.6},{chi2:.6},{}\n",
                content * layout,
                pos_ok as u8
            ));
            cells.push(batch_to_image(&outcome.target_image));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| engine(e.into()))?;
    std::fs::write(out_dir.join("scores.csv"), &csv).map_err(|e| engine(e.into()))?;
    let grid = image_grid(&cells, args.s_values.len(), args.l_values.len());
    imgio::save_rgb(&grid, &out_dir.join("grid.png")).map_err(engine)?;
    Ok((
        vec!["scores.csv".into(), "grid.png".into()],
        json!({
            "rows_s": args.s_values,
            "cols_l": args.l_values,
            "cells": cells.len(),
        }),
    ))
}

// --------------------------------------------------------------------
// dump-attn

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpAttnArgs {
    pub checkpoint: PathBuf,
    pub prompt: String,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
    pub steps_of_interest: Vec<usize>,
}

/// Default probe step: the 15th of 50, scaled to the actual step count.
pub fn default_steps_of_interest(steps: usize) -> Vec<usize> {
    vec![(15 * steps / 50).min(steps.saturating_sub(1))]
}

pub fn run_dump_attn(args: &DumpAttnArgs, out_dir: &Path) -> Out {
    let ck = load_ckpt(&args.checkpoint)?;
    let sched = make_schedule(ck.meta.schedule).map_err(engine)?;
    let prompt = parse_prompt(&TokenGrammar, &args.prompt)?;
    for &s in &args.steps_of_interest {
        if s >= args.steps {
            return Err(CliError::Usage(format!(
                "step of interest {s} outside the {}-step run",
                args.steps
            )));
        }
    }
    let mut rec = RecordingController::<F>::new(
        ck.meta.model.max_tokens,
        ck.denoiser.layer_registry().len(),
    )
    .with_queries();
    let (img, _) = synthesize_with(
        &ck.denoiser,
        &sched,
        &prompt,
        seed_latent(&ck.denoiser, args.seed),
        args.steps,
        args.guidance,
        None,
        Some(&mut rec),
    )
    .map_err(engine)?;
    std::fs::create_dir_all(out_dir).map_err(|e| engine(e.into()))?;
    imgio::save_rgb(&batch_to_image(&img), &out_dir.join("sample.png")).map_err(engine)?;
    let record = rec.record();
    let cross = rec.cross();
    let manifest = dump_attention_artifacts(
        out_dir,
        &args.steps_of_interest,
        &record.read().unwrap(),
        &cross.read().unwrap(),
        ck.denoiser.layer_registry(),
    )
    .map_err(engine)?;
    let n_layers: usize = manifest.steps.iter().map(|s| s.layers.len()).sum();
    Ok((
        vec!["sample.png".into(), "attn/manifest.json".into()],
        json!({
            "steps_dumped": args.steps_of_interest,
            "layer_dumps": n_layers,
        }),
    ))
}

// --------------------------------------------------------------------
// dataset

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetArgs {
    pub n: usize,
    pub seed: u64,
    pub image_size: usize,
}

pub fn run_dataset(args: &DatasetArgs, out_dir: &Path) -> Out {
    if args.n == 0 {
        return Err(CliError::Usage("dataset size must be at least 1".into()));
    }
    let ds = make_dataset::<F>(args.n, args.seed, &TokenGrammar, args.image_size);
    write_dataset(&ds, out_dir).map_err(engine)?;
    Ok((
        vec!["manifest.jsonl".into()],
        json!({ "items": args.n, "image_size": args.image_size }),
    ))
}

/// Token slot whose cross-attention drives mask extraction by default.
pub fn shape_token_slot() -> usize {
    SHAPE_TOKEN_SLOT
}
