//! `masactrl` command-line interface.
//!
//! Exit codes: 0 success, 2 usage/configuration problems, 3 contract or
//! attention-control errors, 4 training divergence. Every command writes a
//! `manifest.json` into its output directory; `masactrl rerun` replays a
//! manifest byte-for-byte. The environment variable `MASA_SEED` overrides
//! command seeds (but never applies during a rerun — manifests are
//! authoritative).

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::*;
use config::RunConfig;
use manifest::{CommandSpec, Manifest, MANIFEST_VERSION};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Engine(masactrl::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Engine(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Engine(e) => match e {
                masactrl::Error::Config(_) | masactrl::Error::Io(_) => 2,
                masactrl::Error::Divergence { .. } => 4,
                _ => 3,
            },
        }
    }
}

#[derive(Parser)]
#[command(name = "masactrl", version, about = "Toy diffusion engine with mutual self-attention control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy denoiser from a run-config file.
    Train {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Checkpoint output path (default: <out-dir>/model.masa).
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
        #[arg(long, default_value = "runs/train")]
        out_dir: PathBuf,
        /// Override the configured step budget.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Sample an image from noise.
    Sample {
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 7.5)]
        guidance: f64,
        #[arg(long)]
        save_trajectory: bool,
        #[arg(long, default_value = "runs/sample")]
        out_dir: PathBuf,
    },
    /// Dual-branch consistent edit: writes I_s.png and I.png.
    Edit {
        checkpoint: PathBuf,
        #[arg(long)]
        source_prompt: String,
        #[arg(long)]
        target_prompt: String,
        /// Source from noise (mutually exclusive with --image).
        #[arg(long)]
        seed: Option<u64>,
        /// Source from a real image (inverted first).
        #[arg(long)]
        image: Option<PathBuf>,
        /// Start step S (default 4).
        #[arg(long = "S")]
        start_step: Option<usize>,
        /// Start layer L (default: the model's decoder start).
        #[arg(long = "L")]
        start_layer: Option<usize>,
        /// Enable mask-guided mutual self-attention.
        #[arg(long)]
        mask: bool,
        /// Token slot whose cross-attention drives both masks
        /// (default: the shape slot).
        #[arg(long)]
        token: Option<usize>,
        #[arg(long, default_value_t = 0.35)]
        mask_threshold: f64,
        #[arg(long, default_value_t = true)]
        apply_to_unconditional: bool,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 7.5)]
        guidance: f64,
        /// 1-bit PNG raster injected as spatial conditioning into the
        /// target branch.
        #[arg(long)]
        condition_raster: Option<PathBuf>,
        #[arg(long, default_value_t = 2.0)]
        condition_gain: f64,
        #[arg(long, default_value = "runs/edit")]
        out_dir: PathBuf,
    },
    /// Deterministic DDIM inversion of a real image.
    Invert {
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Grammar phrase; omitted means the null (all-padding) prompt.
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        guidance: f64,
        #[arg(long, default_value = "runs/invert")]
        out_dir: PathBuf,
    },
    /// Sweep the control gate over start steps and layers.
    Ablate {
        checkpoint: PathBuf,
        #[arg(long)]
        source_prompt: String,
        #[arg(long)]
        target_prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 7.5)]
        guidance: f64,
        /// Comma-separated start steps (rows).
        #[arg(long, value_delimiter = ',')]
        s_values: Vec<usize>,
        /// Comma-separated start layers (columns).
        #[arg(long, value_delimiter = ',')]
        l_values: Vec<usize>,
        #[arg(long)]
        mask: bool,
        #[arg(long, default_value = "runs/ablate")]
        out_dir: PathBuf,
    },
    /// Dump cross-attention heatmaps and query PCA projections.
    DumpAttn {
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 7.5)]
        guidance: f64,
        /// Denoising iterations to dump (default: the step-15 analogue,
        /// scaled by steps/50).
        #[arg(long, value_delimiter = ',')]
        steps_of_interest: Vec<usize>,
        #[arg(long, default_value = "runs/dump-attn")]
        out_dir: PathBuf,
    },
    /// Materialize the procedural dataset (manifest + PNGs + rasters).
    Dataset {
        #[arg(long, default_value_t = 108)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value = "runs/dataset")]
        out_dir: PathBuf,
    },
    /// Re-execute a previous run from its manifest.
    Rerun {
        manifest: PathBuf,
        /// Where to write the replayed outputs.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the resolved default run configuration as TOML.
    PrintConfig(PrintConfigArgs),
}

#[derive(Args)]
struct PrintConfigArgs {}

fn masa_seed_override() -> Option<u64> {
    std::env::var("MASA_SEED").ok().and_then(|v| v.parse().ok())
}

fn execute(spec: &CommandSpec, out_dir: &std::path::Path) -> Result<Manifest, CliError> {
    let (outputs, stats) = match spec {
        CommandSpec::Train(a) => run_train(a, out_dir)?,
        CommandSpec::Sample(a) => run_sample(a, out_dir)?,
        CommandSpec::Edit(a) => run_edit(a, out_dir)?,
        CommandSpec::Invert(a) => run_invert(a, out_dir)?,
        CommandSpec::Ablate(a) => run_ablate(a, out_dir)?,
        CommandSpec::DumpAttn(a) => run_dump_attn(a, out_dir)?,
        CommandSpec::Dataset(a) => run_dataset(a, out_dir)?,
    };
    let m = Manifest {
        version: MANIFEST_VERSION,
        command: spec.clone(),
        outputs,
        stats,
    };
    m.write(out_dir).map_err(|e| CliError::Engine(e.into()))?;
    Ok(m)
}

fn resolve(cli: Command) -> Result<(CommandSpec, PathBuf), CliError> {
    let seed_override = masa_seed_override();
    let ov = |s: u64| seed_override.unwrap_or(s);
    match cli {
        Command::Train {
            config,
            resume,
            checkpoint_out,
            out_dir,
            steps,
        } => {
            if !config.exists() {
                return Err(CliError::Usage(format!(
                    "config file {} does not exist",
                    config.display()
                )));
            }
            let mut run_config = RunConfig::load(&config).map_err(CliError::Usage)?;
            if let Some(s) = steps {
                run_config.train.steps = s;
            }
            if let Some(s) = seed_override {
                run_config.train.train_seed = s;
                run_config.train.dataset_seed = s;
                run_config.train.model_seed = s;
            }
            let checkpoint_out = checkpoint_out.unwrap_or_else(|| out_dir.join("model.masa"));
            Ok((
                CommandSpec::Train(TrainArgs {
                    config: run_config,
                    resume,
                    checkpoint_out,
                }),
                out_dir,
            ))
        }
        Command::Sample {
            checkpoint,
            prompt,
            seed,
            steps,
            guidance,
            save_trajectory,
            out_dir,
        } => Ok((
            CommandSpec::Sample(SampleArgs {
                checkpoint,
                prompt,
                seed: ov(seed),
                steps,
                guidance,
                save_trajectory,
            }),
            out_dir,
        )),
        Command::Edit {
            checkpoint,
            source_prompt,
            target_prompt,
            seed,
            image,
            start_step,
            start_layer,
            mask,
            token,
            mask_threshold,
            apply_to_unconditional,
            steps,
            guidance,
            condition_raster,
            condition_gain,
            out_dir,
        } => {
            // Resolve gate defaults against the model: L defaults to the
            // decoder start; a conditioned edit starts earlier on both axes
            // unless explicitly set.
            let ck = masactrl::ckpt::load_checkpoint::<f32>(&checkpoint)
                .map_err(CliError::Engine)?;
            let (rec_s, rec_l) =
                masactrl::pipeline::recommended_adapter_control(&ck.denoiser);
            let conditioned = condition_raster.is_some();
            let start_step = start_step.unwrap_or(if conditioned { rec_s } else { 4 });
            let start_layer = start_layer.unwrap_or(if conditioned {
                rec_l
            } else {
                ck.denoiser.decoder_start().unwrap_or(0)
            });
            // Oversized gate values mean "never fires"; clamp to the valid
            // boundary instead of rejecting.
            let start_step = start_step.min(steps);
            let start_layer = start_layer.min(ck.denoiser.layer_registry().len());
            let token_slot = token.unwrap_or(shape_token_slot());
            Ok((
                CommandSpec::Edit(EditArgs {
                    checkpoint,
                    source_prompt,
                    target_prompt,
                    seed: seed.map(|s| ov(s)),
                    image,
                    start_step,
                    start_layer,
                    mask,
                    source_token_index: token_slot,
                    target_token_index: token_slot,
                    mask_threshold,
                    apply_to_unconditional,
                    steps,
                    guidance,
                    condition_raster,
                    condition_gain,
                }),
                out_dir,
            ))
        }
        Command::Invert {
            checkpoint,
            image,
            prompt,
            steps,
            guidance,
            out_dir,
        } => Ok((
            CommandSpec::Invert(InvertArgs {
                checkpoint,
                image,
                prompt,
                steps,
                guidance,
            }),
            out_dir,
        )),
        Command::Ablate {
            checkpoint,
            source_prompt,
            target_prompt,
            seed,
            steps,
            guidance,
            s_values,
            l_values,
            mask,
            out_dir,
        } => Ok((
            CommandSpec::Ablate(AblateArgs {
                checkpoint,
                source_prompt,
                target_prompt,
                seed: ov(seed),
                steps,
                guidance,
                s_values,
                l_values,
                mask,
            }),
            out_dir,
        )),
        Command::DumpAttn {
            checkpoint,
            prompt,
            seed,
            steps,
            guidance,
            steps_of_interest,
            out_dir,
        } => {
            let soi = if steps_of_interest.is_empty() {
                default_steps_of_interest(steps)
            } else {
                steps_of_interest
            };
            Ok((
                CommandSpec::DumpAttn(DumpAttnArgs {
                    checkpoint,
                    prompt,
                    seed: ov(seed),
                    steps,
                    guidance,
                    steps_of_interest: soi,
                }),
                out_dir,
            ))
        }
        Command::Dataset {
            n,
            seed,
            image_size,
            out_dir,
        } => Ok((
            CommandSpec::Dataset(DatasetArgs {
                n,
                seed: ov(seed),
                image_size,
            }),
            out_dir,
        )),
        Command::Rerun { .. } | Command::PrintConfig(_) => unreachable!("handled in main"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<(), CliError> = (|| {
        match cli.command {
            Command::PrintConfig(_) => {
                print!("{}", toml::to_string_pretty(&RunConfig::default()).unwrap());
                Ok(())
            }
            Command::Rerun { manifest, out_dir } => {
                let m = Manifest::load(&manifest).map_err(CliError::Usage)?;
                let replay = execute(&m.command, &out_dir)?;
                println!(
                    "replayed {} outputs into {}",
                    replay.outputs.len(),
                    out_dir.display()
                );
                Ok(())
            }
            other => {
                let (spec, out_dir) = resolve(other)?;
                let m = execute(&spec, &out_dir)?;
                println!(
                    "wrote {} (+ manifest.json) to {}",
                    m.outputs.join(", "),
                    out_dir.display()
                );
                Ok(())
            }
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
