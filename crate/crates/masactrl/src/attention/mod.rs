//! The attention-control layer: attention computation, source-branch
//! recording, the edit gate, mask extraction from cross-attention maps, and
//! (mask-guided) mutual self-attention.
//!
//! Self-attention in the target branch of an edit can query the recorded
//! key/value features of the source branch — "mutual self-attention" — so
//! the target keeps the source's content while its own queries (and hence
//! the layout formed by the target prompt) stay native. Masks derived from
//! cross-attention maps confine foreground queries to foreground keys and
//! background queries to background keys.

mod control;
mod core;
mod dump;
mod mask;

pub use control::{
    edit_decision, mutual_self_attention, record_source, AttentionController, AttentionRecord,
    ControlConfig, EditingController, Pass, PassthroughController, RecordingController,
    SubstitutionCounts,
};
pub use core::{attention, attention_bwd, masked_attention, MaskedAttention};
pub use dump::{dump_attention_artifacts, DumpManifest};
pub use mask::{
    extract_mask, extract_mask_from_aggregated, upsample_mask, CrossMapStore, ForegroundMask,
    MASK_GRID,
};
