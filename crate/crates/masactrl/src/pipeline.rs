//! Orchestration: vanilla synthesis, deterministic inversion, and the
//! dual-branch edit loop.
//!
//! Each denoising iteration of an edit runs the source branch first (with a
//! recording controller), then the target branch (with an editing
//! controller consuming that step's record). Both branches start from the
//! same initial noise map. With masks enabled, an extra plain forward of
//! the target generates the cross-attention maps from which this step's
//! target mask is extracted; the source mask comes from the recording pass.

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    extract_mask, AttentionController, ControlConfig, EditingController, Pass,
    RecordingController, SubstitutionCounts, MASK_GRID,
};
use crate::ckpt::{TrajEntry, TrajRecord};
use crate::denoiser::{Denoiser, LayerKind, PromptEmbedding, PromptTokens, SpatialCondition};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::schedule::{
    ddim_invert_step, ddim_step, make_schedule, respaced_timesteps, Latent, NoiseSchedule,
    ScheduleParams, TimePoint,
};

/// Token id used for padding; the all-padding sequence doubles as the
/// unconditional prompt for classifier-free guidance.
pub const PAD_TOKEN: u32 = 0;

/// The pixel/latent seam. The engine works in pixel space, so the default
/// codec is an affine map between display range [0, 1] and model range
/// [−1, 1]; a learned autoencoder could slot in here without touching the
/// samplers.
pub trait LatentCodec<F: Real> {
    fn encode(&self, image: &Latent<F>) -> Result<Latent<F>>;
    fn decode(&self, latent: &Latent<F>) -> Result<Latent<F>>;
}

/// Identity codec: normalize on encode, de-normalize and clamp on decode.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl<F: Real> LatentCodec<F> for IdentityCodec {
    fn encode(&self, image: &Latent<F>) -> Result<Latent<F>> {
        Ok(image.mapv(|v| v * F::c(2.0) - F::one()))
    }

    fn decode(&self, latent: &Latent<F>) -> Result<Latent<F>> {
        Ok(latent.mapv(|v| ((v + F::one()) * F::c(0.5)).max(F::zero()).min(F::one())))
    }
}

/// One branch's latent history.
#[derive(Debug, Clone)]
pub struct Trajectory<F> {
    pub points: Vec<TrajPoint<F>>,
}

#[derive(Debug, Clone)]
pub struct TrajPoint<F> {
    pub step_index: usize,
    pub timestep: TimePoint,
    pub latent: Latent<F>,
}

impl<F: Real> Trajectory<F> {
    fn new() -> Self {
        Trajectory { points: Vec::new() }
    }

    fn push(&mut self, step_index: usize, timestep: TimePoint, latent: &Latent<F>) {
        self.points.push(TrajPoint {
            step_index,
            timestep,
            latent: latent.clone(),
        });
    }

    /// Serialize into the container's TRAJ record (timestep −1 encodes the
    /// ᾱ = 1 boundary).
    pub fn to_record(&self, name: &str) -> TrajRecord {
        TrajRecord {
            name: name.to_string(),
            entries: self
                .points
                .iter()
                .map(|p| TrajEntry {
                    step_index: p.step_index as u32,
                    timestep: match p.timestep {
                        TimePoint::Step(t) => t as i64,
                        TimePoint::Boundary => -1,
                    },
                    dims: p.latent.shape().to_vec(),
                    data: p.latent.iter().map(|v| v.to_f32c()).collect(),
                })
                .collect(),
        }
    }
}

/// Where the source branch of an edit comes from.
#[derive(Debug, Clone)]
pub enum EditSource<F> {
    /// Synthesize the source from noise.
    Seed { seed: u64, prompt: PromptTokens },
    /// Invert a real image (prompt may be the all-padding null analogue).
    Image {
        image: Latent<F>,
        prompt: PromptTokens,
    },
}

impl<F> EditSource<F> {
    pub fn prompt(&self) -> &PromptTokens {
        match self {
            EditSource::Seed { prompt, .. } => prompt,
            EditSource::Image { prompt, .. } => prompt,
        }
    }
}

/// A dual-branch edit job.
#[derive(Debug, Clone)]
pub struct EditRequest<F> {
    pub source: EditSource<F>,
    pub prompt_target: PromptTokens,
    pub steps: usize,
    pub guidance_scale: f64,
    pub control: ControlConfig,
    pub schedule: ScheduleParams,
    /// Spatial conditioning injected into the target branch only.
    pub condition: Option<SpatialCondition<F>>,
}

impl<F: Real> EditRequest<F> {
    pub fn new(source: EditSource<F>, prompt_target: PromptTokens) -> Self {
        EditRequest {
            source,
            prompt_target,
            steps: 50,
            guidance_scale: 7.5,
            control: ControlConfig::default(),
            schedule: ScheduleParams::default(),
            condition: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::contract("edit needs at least one sampling step"));
        }
        if self.guidance_scale < 1.0 {
            return Err(Error::contract(format!(
                "guidance scale must be >= 1, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// Everything an edit produces.
pub struct EditOutcome<F> {
    pub source_image: Latent<F>,
    pub target_image: Latent<F>,
    pub source_trajectory: Trajectory<F>,
    pub target_trajectory: Trajectory<F>,
    pub substitutions: SubstitutionCounts,
    /// Steps at which mask extraction came back degenerate (all-zero).
    pub degenerate_mask_steps: Vec<usize>,
}

/// Attach precomputed condition maps to the target branch of a request.
pub fn apply_condition<F: Real>(
    req: &EditRequest<F>,
    model: &Denoiser<F>,
    maps: SpatialCondition<F>,
) -> Result<EditRequest<F>> {
    let allowed = model.condition_shapes();
    for res in maps.resolutions() {
        let Some(&(_, ch)) = allowed.iter().find(|(r, _)| *r == res) else {
            return Err(Error::config(format!(
                "condition resolution {res} not accepted by the model ({allowed:?})"
            )));
        };
        let m = maps.at(res).unwrap();
        if m.dim() != (ch, res, res) {
            return Err(Error::config(format!(
                "condition map at {res} has shape {:?}, expected ({ch}, {res}, {res})",
                m.dim()
            )));
        }
    }
    let mut out = req.clone();
    out.condition = Some(maps);
    Ok(out)
}

/// Gate override recommended when strong spatial guidance drives the target
/// layout: start earlier in both step and layer (the step-2 /
/// two-layers-before-the-decoder analogue of the adapter setting).
pub fn recommended_adapter_control<F: Real>(model: &Denoiser<F>) -> (usize, usize) {
    let dec = model.decoder_start().unwrap_or(0);
    (2, dec.saturating_sub(2))
}

/// Classifier-free guidance combination: `eps_u + w·(eps_c − eps_u)`.
pub fn cfg_noise<F: Real>(
    eps_cond: &Latent<F>,
    eps_uncond: &Latent<F>,
    w: f64,
) -> Result<Latent<F>> {
    if eps_cond.dim() != eps_uncond.dim() {
        return Err(Error::contract(format!(
            "cfg_noise shape mismatch: {:?} vs {:?}",
            eps_cond.dim(),
            eps_uncond.dim()
        )));
    }
    // w = 1 is exactly the conditional prediction; skip the arithmetic so
    // the identity holds bit-for-bit.
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    let wf = F::c(w);
    let mut out = eps_uncond.clone();
    ndarray::Zip::from(&mut out).and(eps_cond).for_each(|u, &c| {
        *u = *u + wf * (c - *u);
    });
    Ok(out)
}

fn pad_prompt(n: usize) -> PromptTokens {
    PromptTokens::new(vec![PAD_TOKEN; n])
}

/// Standard-normal initial latent from a seed.
pub fn seed_latent<F: Real>(model: &Denoiser<F>, seed: u64) -> Latent<F> {
    let s = model.config().image_size;
    let c = model.config().in_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn((1, c, s, s), || F::std_normal(&mut rng))
}

/// Predict noise with classifier-free guidance. The unconditional pass is
/// skipped entirely at w = 1 (it would not contribute).
#[allow(clippy::too_many_arguments)]
fn predict_eps<F: Real>(
    model: &Denoiser<F>,
    z: &Latent<F>,
    t: usize,
    emb_cond: &PromptEmbedding<F>,
    emb_uncond: &PromptEmbedding<F>,
    w: f64,
    mut ctrl: Option<&mut (dyn AttentionController<F> + '_)>,
    cond: Option<&SpatialCondition<F>>,
) -> Result<Latent<F>> {
    if w == 1.0 {
        let hook = ctrl.as_deref_mut().map(|c| (c, Pass::Cond));
        return model.forward(z, t, emb_cond, hook, cond);
    }
    let hook_u = ctrl.as_deref_mut().map(|c| (c, Pass::Uncond));
    let eps_u = model.forward(z, t, emb_uncond, hook_u, cond)?;
    let hook_c = ctrl.as_deref_mut().map(|c| (c, Pass::Cond));
    let eps_c = model.forward(z, t, emb_cond, hook_c, cond)?;
    cfg_noise(&eps_c, &eps_u, w)
}

/// The descending (t, t_prev) pairs for a sampling run.
fn sampling_pairs(t_count: usize, steps: usize) -> Vec<(usize, TimePoint)> {
    let ts = respaced_timesteps(t_count, steps);
    (0..steps)
        .map(|i| {
            let k = steps - 1 - i;
            let t = ts[k];
            let prev = if k > 0 {
                TimePoint::Step(ts[k - 1])
            } else {
                TimePoint::Boundary
            };
            (t, prev)
        })
        .collect()
}

/// DDIM synthesis from a given initial latent, optionally recording
/// attention state (used by the attention-dump command).
#[allow(clippy::too_many_arguments)]
pub fn synthesize_with<F: Real>(
    model: &Denoiser<F>,
    sched: &NoiseSchedule,
    prompt: &PromptTokens,
    z_init: Latent<F>,
    steps: usize,
    w: f64,
    cond: Option<&SpatialCondition<F>>,
    mut recorder: Option<&mut RecordingController<F>>,
) -> Result<(Latent<F>, Trajectory<F>)> {
    if steps == 0 {
        return Err(Error::contract("synthesis needs at least one step"));
    }
    if w < 1.0 {
        return Err(Error::contract(format!(
            "guidance scale must be >= 1, got {w}"
        )));
    }
    let emb_c = model.embed_prompt(prompt)?;
    let emb_u = model.embed_prompt(&pad_prompt(model.config().max_tokens))?;
    let mut z = z_init;
    let mut traj = Trajectory::new();
    for (i, &(t, t_prev)) in sampling_pairs(sched.len(), steps).iter().enumerate() {
        traj.push(i, TimePoint::Step(t), &z);
        if let Some(r) = recorder.as_mut() {
            r.begin_step(i);
        }
        let hook = recorder
            .as_deref_mut()
            .map(|r| r as &mut dyn AttentionController<F>);
        let eps = predict_eps(model, &z, t, &emb_c, &emb_u, w, hook, cond)?;
        z = ddim_step(&z, &eps, t, t_prev, sched)?;
    }
    traj.push(steps, TimePoint::Boundary, &z);
    let image = IdentityCodec.decode(&z)?;
    Ok((image, traj))
}

/// Deterministic synthesis: seed → image in [0, 1] plus the latent history.
pub fn synthesize<F: Real>(
    model: &Denoiser<F>,
    sched: &NoiseSchedule,
    prompt: &PromptTokens,
    seed: u64,
    steps: usize,
    w: f64,
    cond: Option<&SpatialCondition<F>>,
) -> Result<(Latent<F>, Trajectory<F>)> {
    synthesize_with(
        model,
        sched,
        prompt,
        seed_latent(model, seed),
        steps,
        w,
        cond,
        None,
    )
}

/// Deterministic DDIM inversion: image in [0, 1] → terminal latent z_T.
///
/// CFG at w > 1 is not invertible step-for-step, so faithful round trips
/// use w = 1 and, for real images without a known prompt, the all-padding
/// null analogue.
pub fn invert<F: Real>(
    model: &Denoiser<F>,
    sched: &NoiseSchedule,
    image: &Latent<F>,
    prompt: &PromptTokens,
    steps: usize,
    w: f64,
) -> Result<(Latent<F>, Trajectory<F>)> {
    let mut z = IdentityCodec.encode(image)?;
    let mut traj = Trajectory::new();
    traj.push(0, TimePoint::Boundary, &z);
    if steps == 0 {
        return Ok((z, traj));
    }
    if w < 1.0 {
        return Err(Error::contract(format!(
            "guidance scale must be >= 1, got {w}"
        )));
    }
    let emb_c = model.embed_prompt(prompt)?;
    let emb_u = model.embed_prompt(&pad_prompt(model.config().max_tokens))?;
    let ts = respaced_timesteps(sched.len(), steps);
    for i in 0..steps {
        let (from, to) = if i == 0 {
            (TimePoint::Boundary, ts[0])
        } else {
            (TimePoint::Step(ts[i - 1]), ts[i])
        };
        // Evaluate the network at the current state; the boundary state is
        // a clean image, evaluated at the first schedule index.
        let t_eval = match from {
            TimePoint::Boundary => ts[0],
            TimePoint::Step(t) => t,
        };
        let eps = predict_eps(model, &z, t_eval, &emb_c, &emb_u, w, None, None)?;
        z = ddim_invert_step(&z, &eps, from, to, sched)?;
        traj.push(i + 1, TimePoint::Step(to), &z);
    }
    Ok((z, traj))
}

/// The dual-branch edit loop. Returns both decoded images plus the
/// trajectories and controller statistics.
pub fn masactrl_edit<F: Real>(req: &EditRequest<F>, model: &Denoiser<F>) -> Result<EditOutcome<F>> {
    req.validate()?;
    let sched = make_schedule(req.schedule)?;
    let layers = model.layer_registry().len();
    req.control.validate(req.steps, layers)?;
    if req.control.mask_enabled {
        let has_sixteen_cross = model
            .layer_registry()
            .iter()
            .any(|l| l.kind == LayerKind::CrossAttention && l.resolution == MASK_GRID);
        if !has_sixteen_cross {
            return Err(Error::config(format!(
                "mask guidance needs cross-attention layers at {MASK_GRID}x{MASK_GRID}; \
                 this model has none"
            )));
        }
    }

    let n_tokens = model.config().max_tokens;
    let prompt_s = req.source.prompt().clone();
    let emb_s = model.embed_prompt(&prompt_s)?;
    let emb_t = model.embed_prompt(&req.prompt_target)?;
    let emb_u = model.embed_prompt(&pad_prompt(n_tokens))?;
    let w = req.guidance_scale;

    // Both branches start from the same noise map.
    let z_init = match &req.source {
        EditSource::Seed { seed, .. } => seed_latent(model, *seed),
        EditSource::Image { image, .. } => {
            invert(model, &sched, image, &prompt_s, req.steps, 1.0)?.0
        }
    };
    let mut z_s = z_init.clone();
    let mut z_t = z_init;

    let mut recorder = RecordingController::<F>::new(n_tokens, layers);
    let mut editor = EditingController::new(recorder.record(), req.control.clone(), layers);

    let mut traj_s = Trajectory::new();
    let mut traj_t = Trajectory::new();
    let mut degenerate_steps = Vec::new();

    for (i, &(t, t_prev)) in sampling_pairs(sched.len(), req.steps).iter().enumerate() {
        traj_s.push(i, TimePoint::Step(t), &z_s);
        traj_t.push(i, TimePoint::Step(t), &z_t);

        // 1. source branch, recording
        recorder.begin_step(i);
        let eps_s = predict_eps(
            model,
            &z_s,
            t,
            &emb_s,
            &emb_u,
            w,
            Some(&mut recorder),
            None,
        )?;
        z_s = ddim_step(&z_s, &eps_s, t, t_prev, &sched)?;

        // 2. masks for this step (plain target forward for its cross maps)
        let (mask_s, mask_t) = if req.control.mask_enabled {
            let cross_s = recorder.cross();
            let m_s = extract_mask(
                &cross_s.read().unwrap(),
                i,
                req.control.source_token_index,
                req.control.mask_threshold,
            )?;
            let mut probe = RecordingController::<F>::new(n_tokens, layers);
            probe.begin_step(i);
            model.forward(
                &z_t,
                t,
                &emb_t,
                Some((&mut probe, Pass::Cond)),
                req.condition.as_ref(),
            )?;
            let cross_t = probe.cross();
            let m_t = extract_mask(
                &cross_t.read().unwrap(),
                i,
                req.control.target_token_index,
                req.control.mask_threshold,
            )?;
            if m_s.degenerate || m_t.degenerate {
                degenerate_steps.push(i);
            }
            (Some(m_s), Some(m_t))
        } else {
            (None, None)
        };

        // 3. target branch, substituting
        editor.begin_step(i, mask_s, mask_t);
        let eps_t = predict_eps(
            model,
            &z_t,
            t,
            &emb_t,
            &emb_u,
            w,
            Some(&mut editor),
            req.condition.as_ref(),
        )?;
        z_t = ddim_step(&z_t, &eps_t, t, t_prev, &sched)?;
    }
    traj_s.push(req.steps, TimePoint::Boundary, &z_s);
    traj_t.push(req.steps, TimePoint::Boundary, &z_t);

    Ok(EditOutcome {
        source_image: IdentityCodec.decode(&z_s)?,
        target_image: IdentityCodec.decode(&z_t)?,
        source_trajectory: traj_s,
        target_trajectory: traj_t,
        substitutions: editor.counts(),
        degenerate_mask_steps: degenerate_steps,
    })
}
