//! Toy denoisers and their adaptation surface.
//!
//! Denoisers implement [`Denoiser`] and receive a [`HookPolicy`] per
//! call. Hooks carry everything a cascade stage wants to change about
//! the forward pass — convolution dilation, attention mode, rotary
//! stretching, temperature, region-wise conditioning — so the models
//! themselves stay oblivious to the stage controller.

pub mod checkpoint;
pub mod codec;
pub mod cond;
pub mod dit;
pub mod layers;
pub mod lora;
pub mod unet;

use std::sync::{Arc, Mutex};

use crate::dit_scale::RopeConfig;
use crate::error::Result;
use crate::tensor::LatentTensor;
use crate::unet_scale::{DilationPolicy, FusionConfig};

pub use cond::{Conditioning, PromptEmbedder, RegionConditions, RegionMask};
pub use dit::{dit_loss, lora_train_step, train_dit, DitConfig, TinyDit, TrainSample};
pub use lora::{lora_apply, LoraAdapter, LoraSet};
pub use unet::{TinyUnet, UnetConfig};

/// Self-attention routing selected by the stage controller.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionMode {
    /// One attention over the whole map.
    Global,
    /// Patch attention only (window geometry from the config).
    Local(FusionConfig),
    /// Frequency-split fusion of the global and local branches.
    Fused(FusionConfig),
}

/// Rotary / temperature overrides for the DiT path.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeOverride {
    pub rope: RopeConfig,
    pub temperature: f64,
}

/// Position of a denoiser call inside its stage's reverse loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepPhase {
    /// 0-based index of the call within the stage.
    pub index: usize,
    /// Total denoiser calls in the stage.
    pub total: usize,
}

impl StepPhase {
    pub fn single() -> Self {
        Self { index: 0, total: 1 }
    }
}

/// One recorded hook consultation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HookEvent {
    Conv {
        block: String,
        step: usize,
        dilation: usize,
    },
    Attention {
        block: String,
        step: usize,
        mode: &'static str,
    },
}

/// Shared append-only log of hook consultations, used by tests to
/// assert policy behavior (e.g. that tail-window steps ran undilated).
#[derive(Debug, Default)]
pub struct HookLog {
    events: Mutex<Vec<HookEvent>>,
}

impl HookLog {
    pub fn record(&self, event: HookEvent) {
        self.events.lock().unwrap().push(event);
    }

    pub fn events(&self) -> Vec<HookEvent> {
        self.events.lock().unwrap().clone()
    }
}

/// Per-call interception policy consulted by the denoisers.
#[derive(Debug, Clone, Default)]
pub struct HookPolicy {
    /// Convolution dilation policy; `None` means factor 1 everywhere.
    pub dilation: Option<DilationPolicy>,
    /// Self-attention routing; `None` means global attention.
    pub attention: Option<AttentionMode>,
    /// Rotary / temperature overrides (DiT only).
    pub rope: Option<RopeOverride>,
    /// Region-wise cross-attention conditioning.
    pub regions: Option<RegionConditions>,
    /// Where this call sits inside its stage.
    pub step: Option<StepPhase>,
    /// Optional instrumentation sink.
    pub log: Option<Arc<HookLog>>,
}

impl HookPolicy {
    /// Hooks with every adaptation at identity.
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn step_phase(&self) -> StepPhase {
        self.step.unwrap_or_else(StepPhase::single)
    }

    /// Dilation factor for a block's convolution, recording the lookup.
    pub fn conv_dilation(&self, block_id: &str) -> Result<usize> {
        let phase = self.step_phase();
        let d = match &self.dilation {
            None => 1,
            Some(policy) => policy.dilation_for(block_id, phase.index, phase.total)?,
        };
        if let Some(log) = &self.log {
            log.record(HookEvent::Conv {
                block: block_id.to_string(),
                step: phase.index,
                dilation: d,
            });
        }
        Ok(d)
    }

    /// Attention mode for a block, recording the lookup.
    pub fn attention_mode(&self, block_id: &str) -> AttentionMode {
        let mode = self.attention.clone().unwrap_or(AttentionMode::Global);
        if let Some(log) = &self.log {
            let name = match &mode {
                AttentionMode::Global => "global",
                AttentionMode::Local(_) => "local",
                AttentionMode::Fused(_) => "fused",
            };
            log.record(HookEvent::Attention {
                block: block_id.to_string(),
                step: self.step_phase().index,
                mode: name,
            });
        }
        mode
    }
}

/// A noise-prediction network: `eps = predict(z_t, t, cond, hooks)`.
///
/// Implementations must return a tensor of the input's shape and be
/// deterministic given inputs and weights.
pub trait Denoiser: Send + Sync {
    fn predict(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &Conditioning,
        hooks: &HookPolicy,
    ) -> Result<LatentTensor>;

    /// Latent channel count this denoiser expects.
    fn latent_channels(&self) -> usize;
}
