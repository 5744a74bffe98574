//! Source-branch recording, the edit gate, and mutual self-attention.
//!
//! During an edit, the source branch runs with a [`RecordingController`]
//! that stores every self-attention layer's key/value features (and the
//! 16×16 cross-attention maps). The target branch runs with an
//! [`EditingController`] that, wherever the (start step, start layer) gate
//! is open, answers self-attention queries against the recorded source
//! features instead of its own — optionally restricted by foreground masks.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::attention::core::{attention, masked_attention};
use crate::attention::mask::{upsample_mask, CrossMapStore, ForegroundMask};
use crate::denoiser::{LayerInfo, LayerKind};
use crate::error::{Error, Result};
use crate::real::Real;

/// Which classifier-free-guidance pass a forward call belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Uncond,
    Cond,
}

/// Gate and mask options for mutual self-attention control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    /// S: first denoising iteration (0-based, counting completed
    /// iterations) at which substitution is active.
    pub start_step: usize,
    /// L: first global attention-layer index at which substitution is
    /// active.
    pub start_layer: usize,
    pub mask_enabled: bool,
    /// Token whose cross-attention channel yields the source mask M_s.
    pub source_token_index: usize,
    /// Token whose cross-attention channel yields the target mask M.
    pub target_token_index: usize,
    /// τ applied after min-max normalization.
    pub mask_threshold: f64,
    /// Whether substitution also applies to the unconditional CFG pass.
    pub apply_to_unconditional: bool,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            start_step: 4,
            start_layer: 10,
            mask_enabled: false,
            source_token_index: 1,
            target_token_index: 1,
            mask_threshold: 0.35,
            apply_to_unconditional: true,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self, total_steps: usize, total_layers: usize) -> Result<()> {
        if self.start_step > total_steps {
            return Err(Error::config(format!(
                "start_step {} exceeds sampling steps {total_steps}",
                self.start_step
            )));
        }
        if self.start_layer > total_layers {
            return Err(Error::config(format!(
                "start_layer {} exceeds attention layer count {total_layers}",
                self.start_layer
            )));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(Error::config(format!(
                "mask threshold must lie in (0,1), got {}",
                self.mask_threshold
            )));
        }
        Ok(())
    }
}

/// The gate: substitution is active from `start_step` and `start_layer`
/// onwards, inclusive. `step_index` counts completed denoising iterations
/// from 0, so the default S = 4 opens the gate at the fifth iteration.
pub fn edit_decision(step_index: usize, layer_index: usize, cfg: &ControlConfig) -> bool {
    step_index >= cfg.start_step && layer_index >= cfg.start_layer
}

#[derive(Debug, Clone)]
struct BranchKv<F> {
    k: Array3<F>,
    v: Array3<F>,
    q: Option<Array3<F>>,
}

#[derive(Debug, Clone)]
struct KvEntry<F> {
    cond: Option<BranchKv<F>>,
    uncond: Option<BranchKv<F>>,
}

impl<F> Default for KvEntry<F> {
    fn default() -> Self {
        KvEntry {
            cond: None,
            uncond: None,
        }
    }
}

/// Per-(step, self-attention layer) key/value features recorded from the
/// source branch, one slot per CFG pass. Write-once per slot.
#[derive(Debug, Clone)]
pub struct AttentionRecord<F> {
    entries: BTreeMap<(usize, usize), KvEntry<F>>,
}

impl<F: Real> AttentionRecord<F> {
    pub fn new() -> Self {
        AttentionRecord {
            entries: BTreeMap::new(),
        }
    }

    /// Distinct (step, layer) sites recorded.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(
        &mut self,
        step_index: usize,
        layer_index: usize,
        pass: Pass,
        k: Array3<F>,
        v: Array3<F>,
        q: Option<Array3<F>>,
    ) -> Result<()> {
        let entry = self.entries.entry((step_index, layer_index)).or_default();
        let slot = match pass {
            Pass::Cond => &mut entry.cond,
            Pass::Uncond => &mut entry.uncond,
        };
        if slot.is_some() {
            return Err(Error::contract(format!(
                "source K/V for (step {step_index}, layer {layer_index}, {pass:?}) recorded twice"
            )));
        }
        *slot = Some(BranchKv { k, v, q });
        Ok(())
    }

    pub fn contains(&self, step_index: usize, layer_index: usize, pass: Pass) -> bool {
        self.get(step_index, layer_index, pass).is_some()
    }

    pub fn get(
        &self,
        step_index: usize,
        layer_index: usize,
        pass: Pass,
    ) -> Option<(&Array3<F>, &Array3<F>)> {
        let entry = self.entries.get(&(step_index, layer_index))?;
        let slot = match pass {
            Pass::Cond => entry.cond.as_ref(),
            Pass::Uncond => entry.uncond.as_ref(),
        };
        slot.map(|b| (&b.k, &b.v))
    }

    /// Recorded query features (diagnostics only; substitution never
    /// consumes Q).
    pub fn query(&self, step_index: usize, layer_index: usize, pass: Pass) -> Option<&Array3<F>> {
        let entry = self.entries.get(&(step_index, layer_index))?;
        let slot = match pass {
            Pass::Cond => entry.cond.as_ref(),
            Pass::Uncond => entry.uncond.as_ref(),
        };
        slot.and_then(|b| b.q.as_ref())
    }

    pub fn recorded_sites(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.keys().copied()
    }
}

impl<F: Real> Default for AttentionRecord<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Records one self-attention site (and optionally its cross map) into the
/// record/store pair. Exposed for tests and custom controllers; the
/// [`RecordingController`] routes through here.
#[allow(clippy::too_many_arguments)]
pub fn record_source<F: Real>(
    record: &mut AttentionRecord<F>,
    store: Option<&mut CrossMapStore<F>>,
    step_index: usize,
    layer_index: usize,
    pass: Pass,
    k: Array3<F>,
    v: Array3<F>,
    cross_map: Option<(usize, Array3<F>)>,
) -> Result<()> {
    record.insert(step_index, layer_index, pass, k, v, None)?;
    if let (Some(store), Some((resolution, map))) = (store, cross_map) {
        store.record(step_index, layer_index, resolution, map)?;
    }
    Ok(())
}

/// Mutual self-attention for one site of the target branch.
///
/// Gate closed: plain attention over the branch's own K/V. Gate open:
/// attention over the recorded source K_s/V_s (queries stay native). With
/// masks, foreground and background are aggregated separately over
/// mask-restricted source keys and recombined per query cell.
#[allow(clippy::too_many_arguments)]
pub fn mutual_self_attention<F: Real>(
    q: &Array3<F>,
    record: &AttentionRecord<F>,
    step_index: usize,
    layer_index: usize,
    pass: Pass,
    own_k: &Array3<F>,
    own_v: &Array3<F>,
    cfg: &ControlConfig,
    mask_source: Option<&ForegroundMask>,
    mask_target: Option<&ForegroundMask>,
) -> Result<Array3<F>> {
    if !edit_decision(step_index, layer_index, cfg) {
        return Ok(attention(q, own_k, own_v)?.0);
    }
    let Some((k_s, v_s)) = record.get(step_index, layer_index, pass) else {
        return Err(Error::Control {
            step: step_index,
            layer: layer_index,
            msg: format!("no recorded source K/V for pass {pass:?}"),
        });
    };
    match (mask_source, mask_target) {
        (None, None) => Ok(attention(q, k_s, v_s)?.0),
        (Some(m_s), Some(m_t)) => {
            let n_q = q.dim().1;
            let n_k = k_s.dim().1;
            let q_side = (n_q as f64).sqrt() as usize;
            let k_side = (n_k as f64).sqrt() as usize;
            if q_side * q_side != n_q || k_side * k_side != n_k {
                return Err(Error::contract(format!(
                    "mask-guided attention needs square grids, got n_q {n_q}, n_k {n_k}"
                )));
            }
            let fg_keys = upsample_mask(m_s, k_side);
            let bg_keys: Vec<bool> = fg_keys.iter().map(|&b| !b).collect();
            let f_o = masked_attention(q, k_s, v_s, &fg_keys)?.out;
            let f_b = masked_attention(q, k_s, v_s, &bg_keys)?.out;
            let m_q = upsample_mask(m_t, q_side);
            let (h, _, d) = q.dim();
            let mut out = Array3::zeros((h, n_q, d));
            for hi in 0..h {
                for i in 0..n_q {
                    let src = if m_q[i] { &f_o } else { &f_b };
                    for c in 0..d {
                        out[(hi, i, c)] = src[(hi, i, c)];
                    }
                }
            }
            Ok(out)
        }
        _ => Err(Error::contract(
            "mask-guided mutual self-attention needs both masks or neither",
        )),
    }
}

/// Implemented by anything that wants to observe or replace attention sites
/// during a forward pass.
pub trait AttentionController<F: Real> {
    /// Handle one self-attention site; returns the attention output
    /// `[heads, n, d]`.
    fn self_attention(
        &mut self,
        layer: &LayerInfo,
        pass: Pass,
        q: &Array3<F>,
        k: &Array3<F>,
        v: &Array3<F>,
    ) -> Result<Array3<F>>;

    /// Observe one cross-attention map `[heads, n_q, N]`.
    fn observe_cross_map(&mut self, layer: &LayerInfo, pass: Pass, map: &Array3<F>)
        -> Result<()>;

    /// Attention-layer count the controller was built for; the denoiser
    /// rejects mismatches.
    fn expected_layers(&self) -> Option<usize> {
        None
    }
}

/// Observes layer visitation order but computes vanilla attention; never
/// changes an output bit.
#[derive(Debug, Default)]
pub struct PassthroughController {
    pub visited: Vec<(usize, LayerKind)>,
}

impl PassthroughController {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<F: Real> AttentionController<F> for PassthroughController {
    fn self_attention(
        &mut self,
        layer: &LayerInfo,
        _pass: Pass,
        q: &Array3<F>,
        k: &Array3<F>,
        v: &Array3<F>,
    ) -> Result<Array3<F>> {
        self.visited.push((layer.index, layer.kind));
        Ok(attention(q, k, v)?.0)
    }

    fn observe_cross_map(
        &mut self,
        layer: &LayerInfo,
        _pass: Pass,
        _map: &Array3<F>,
    ) -> Result<()> {
        self.visited.push((layer.index, layer.kind));
        Ok(())
    }
}

/// Source-branch controller: vanilla attention plus K/V (and cross-map)
/// recording. The record becomes read-only shared state for editing
/// controllers.
pub struct RecordingController<F> {
    record: Arc<RwLock<AttentionRecord<F>>>,
    cross: Arc<RwLock<CrossMapStore<F>>>,
    step: usize,
    record_queries: bool,
    expected_layers: usize,
}

impl<F: Real> RecordingController<F> {
    pub fn new(n_tokens: usize, expected_layers: usize) -> Self {
        RecordingController {
            record: Arc::new(RwLock::new(AttentionRecord::new())),
            cross: Arc::new(RwLock::new(CrossMapStore::new(n_tokens))),
            step: 0,
            record_queries: false,
            expected_layers,
        }
    }

    /// Also keep Q features for the attention-dump diagnostics.
    pub fn with_queries(mut self) -> Self {
        self.record_queries = true;
        self
    }

    pub fn begin_step(&mut self, step_index: usize) {
        self.step = step_index;
    }

    pub fn record(&self) -> Arc<RwLock<AttentionRecord<F>>> {
        Arc::clone(&self.record)
    }

    pub fn cross(&self) -> Arc<RwLock<CrossMapStore<F>>> {
        Arc::clone(&self.cross)
    }
}

impl<F: Real> AttentionController<F> for RecordingController<F> {
    fn self_attention(
        &mut self,
        layer: &LayerInfo,
        pass: Pass,
        q: &Array3<F>,
        k: &Array3<F>,
        v: &Array3<F>,
    ) -> Result<Array3<F>> {
        let (out, _) = attention(q, k, v)?;
        let q_saved = self.record_queries.then(|| q.clone());
        self.record.write().unwrap().insert(
            self.step,
            layer.index,
            pass,
            k.clone(),
            v.clone(),
            q_saved,
        )?;
        Ok(out)
    }

    fn observe_cross_map(&mut self, layer: &LayerInfo, pass: Pass, map: &Array3<F>) -> Result<()> {
        // The unconditional prompt is all padding; only the conditional
        // pass carries usable token attention.
        if pass == Pass::Cond {
            self.cross
                .write()
                .unwrap()
                .record(self.step, layer.index, layer.resolution, map.clone())?;
        }
        Ok(())
    }

    fn expected_layers(&self) -> Option<usize> {
        Some(self.expected_layers)
    }
}

/// How many substitutions an editing controller performed, by pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstitutionCounts {
    pub cond: usize,
    pub uncond: usize,
}

/// Target-branch controller: substitutes recorded source K/V wherever the
/// gate is open, optionally mask-guided.
pub struct EditingController<F> {
    record: Arc<RwLock<AttentionRecord<F>>>,
    cfg: ControlConfig,
    step: usize,
    mask_source: Option<ForegroundMask>,
    mask_target: Option<ForegroundMask>,
    counts: SubstitutionCounts,
    expected_layers: usize,
}

impl<F: Real> EditingController<F> {
    pub fn new(
        record: Arc<RwLock<AttentionRecord<F>>>,
        cfg: ControlConfig,
        expected_layers: usize,
    ) -> Self {
        EditingController {
            record,
            cfg,
            step: 0,
            mask_source: None,
            mask_target: None,
            counts: SubstitutionCounts::default(),
            expected_layers,
        }
    }

    /// Set the step index and this step's masks (extracted fresh from the
    /// current cross maps of each branch).
    pub fn begin_step(
        &mut self,
        step_index: usize,
        mask_source: Option<ForegroundMask>,
        mask_target: Option<ForegroundMask>,
    ) {
        self.step = step_index;
        self.mask_source = mask_source;
        self.mask_target = mask_target;
    }

    pub fn counts(&self) -> SubstitutionCounts {
        self.counts
    }

    pub fn config(&self) -> &ControlConfig {
        &self.cfg
    }
}

impl<F: Real> AttentionController<F> for EditingController<F> {
    fn self_attention(
        &mut self,
        layer: &LayerInfo,
        pass: Pass,
        q: &Array3<F>,
        k: &Array3<F>,
        v: &Array3<F>,
    ) -> Result<Array3<F>> {
        let gate_open = edit_decision(self.step, layer.index, &self.cfg);
        let applies = pass == Pass::Cond || self.cfg.apply_to_unconditional;
        if !(gate_open && applies) {
            return Ok(attention(q, k, v)?.0);
        }
        match pass {
            Pass::Cond => self.counts.cond += 1,
            Pass::Uncond => self.counts.uncond += 1,
        }
        let record = self.record.read().unwrap();
        mutual_self_attention(
            q,
            &record,
            self.step,
            layer.index,
            pass,
            k,
            v,
            &self.cfg,
            self.mask_source.as_ref(),
            self.mask_target.as_ref(),
        )
    }

    fn observe_cross_map(
        &mut self,
        _layer: &LayerInfo,
        _pass: Pass,
        _map: &Array3<F>,
    ) -> Result<()> {
        Ok(())
    }

    fn expected_layers(&self) -> Option<usize> {
        Some(self.expected_layers)
    }
}
