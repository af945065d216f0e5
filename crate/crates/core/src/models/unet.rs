//! A tiny convolutional UNet denoiser for image latents.
//!
//! Two down levels, a mid block, two up levels with additive skips.
//! Every block is conv + group-norm + SiLU, self-attention on maps of at
//! most `max_attn_tokens` cells, and cross-attention to the prompt
//! tokens. Convolutions consult the hook policy for a dilation factor;
//! self-attention consults it for global / local / fused routing;
//! cross-attention consults it for region-wise conditioning.

use crate::error::{invalid, Result};
use crate::linalg::Mat;
use crate::models::checkpoint::Checkpoint;
use crate::models::cond::Conditioning;
use crate::models::layers::{
    avg_pool2, nearest_up2, silu, time_embedding, ConvLayer, GroupNorm, Linear,
};
use crate::models::{AttentionMode, Denoiser, HookPolicy};
use crate::rng::{fnv1a, CounterRng};
use crate::tensor::{softmax_scaled, LatentTensor};
use crate::unet_scale::{
    attention_global, attention_local, map_to_tokens, scale_fuse, tokens_to_map, AttentionWeights,
};

/// Hyperparameters of [`TinyUnet`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnetConfig {
    pub in_channels: usize,
    /// Channel width of the outer (full-resolution) blocks.
    pub base_width: usize,
    /// Channel width of the inner blocks and the mid block.
    pub mid_width: usize,
    pub groups: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    /// Self-attention only runs on maps with at most this many cells.
    pub max_attn_tokens: usize,
    pub seed: u64,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            base_width: 8,
            mid_width: 16,
            groups: 4,
            cond_dim: 8,
            time_dim: 16,
            max_attn_tokens: 256,
            seed: 0x0C15_CA1E,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SelfAttention {
    qkv: AttentionWeights,
    out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl CrossAttention {
    /// `softmax(q cond_k^T / sqrt(width)) cond_v` for one condition.
    fn attend(&self, q: &Mat, cond: &Conditioning) -> Result<Mat> {
        let k = self.k.forward(&cond.tokens, None)?;
        let v = self.v.forward(&cond.tokens, None)?;
        let scores = q.matmul_nt(&k);
        let probs = softmax_scaled(scores.data(), k.rows(), 1.0, q.cols() as f64)?;
        Ok(Mat::new(q.rows(), k.rows(), probs)?.matmul(&v))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct UnetBlock {
    id: &'static str,
    width: usize,
    conv: ConvLayer,
    time_proj: Linear,
    norm: GroupNorm,
    self_attn: SelfAttention,
    cross_attn: CrossAttention,
}

impl UnetBlock {
    fn seeded(id: &'static str, width: usize, cfg: &UnetConfig) -> Self {
        let rng = CounterRng::new(cfg.seed).derive(fnv1a(id));
        Self {
            id,
            width,
            conv: ConvLayer::seeded(width, width, 3, &rng.derive(0)),
            time_proj: Linear::seeded(width, cfg.time_dim, &rng.derive(1)),
            norm: GroupNorm::identity(width, cfg.groups.min(width)),
            self_attn: SelfAttention {
                qkv: AttentionWeights {
                    wq: Linear::seeded(width, width, &rng.derive(2)).weight,
                    wk: Linear::seeded(width, width, &rng.derive(3)).weight,
                    wv: Linear::seeded(width, width, &rng.derive(4)).weight,
                },
                out: Linear::seeded(width, width, &rng.derive(5)),
            },
            cross_attn: CrossAttention {
                q: Linear::seeded(width, width, &rng.derive(6)),
                k: Linear::seeded(width, cfg.cond_dim, &rng.derive(7)),
                v: Linear::seeded(width, cfg.cond_dim, &rng.derive(8)),
                out: Linear::seeded(width, width, &rng.derive(9)),
            },
        }
    }

    fn zeroed(id: &'static str, width: usize, cfg: &UnetConfig) -> Self {
        Self {
            id,
            width,
            conv: ConvLayer::zeros(width, width, 3),
            time_proj: Linear::zeros(width, cfg.time_dim),
            norm: GroupNorm::zeros(width, cfg.groups.min(width)),
            self_attn: SelfAttention {
                qkv: AttentionWeights {
                    wq: Mat::zeros(width, width),
                    wk: Mat::zeros(width, width),
                    wv: Mat::zeros(width, width),
                },
                out: Linear::zeros(width, width),
            },
            cross_attn: CrossAttention {
                q: Linear::zeros(width, width),
                k: Linear::zeros(width, cfg.cond_dim),
                v: Linear::zeros(width, cfg.cond_dim),
                out: Linear::zeros(width, width),
            },
        }
    }

    fn add_time(&self, h: &mut LatentTensor, t_emb: &[f64]) -> Result<()> {
        let proj = self.time_proj.forward_vec(t_emb, None)?;
        for (c, &p) in proj.iter().enumerate() {
            for v in h.plane_mut(c, 0) {
                *v += p;
            }
        }
        Ok(())
    }

    fn forward(
        &self,
        h: &LatentTensor,
        latent_dims: (usize, usize),
        t_emb: &[f64],
        cond: &Conditioning,
        hooks: &HookPolicy,
        max_attn_tokens: usize,
    ) -> Result<LatentTensor> {
        let d = hooks.conv_dilation(self.id)?;
        let mut h = self.conv.forward(h, d)?;
        self.add_time(&mut h, t_emb)?;
        let mut h = self.norm.forward(&h).map(silu);

        if h.plane_len() <= max_attn_tokens {
            let mode = hooks.attention_mode(self.id);
            let tokens = map_to_tokens(&h, 0);
            let global = |qkv: &AttentionWeights| -> Result<LatentTensor> {
                tokens_to_map(&attention_global(&tokens, qkv)?, &h)
            };
            let attn_map = match &mode {
                AttentionMode::Global => global(&self.self_attn.qkv)?,
                AttentionMode::Local(fc) => {
                    match fc.grid_for_map(latent_dims, (h.height(), h.width()))? {
                        None => global(&self.self_attn.qkv)?,
                        Some(grid) => attention_local(&h, &grid, &self.self_attn.qkv)?,
                    }
                }
                AttentionMode::Fused(fc) => {
                    match fc.grid_for_map(latent_dims, (h.height(), h.width()))? {
                        None => global(&self.self_attn.qkv)?,
                        Some(grid) => {
                            let g = global(&self.self_attn.qkv)?;
                            let l = attention_local(&h, &grid, &self.self_attn.qkv)?;
                            scale_fuse(&g, &l, &fc.filter()?)?
                        }
                    }
                }
            };
            let out = self.self_attn.out.forward(&map_to_tokens(&attn_map, 0), None)?;
            h = h.add(&tokens_to_map(&out, &h)?)?;
        }

        // Cross-attention, optionally region-routed.
        let tokens = map_to_tokens(&h, 0);
        let q = self.cross_attn.q.forward(&tokens, None)?;
        let mut ca = self.cross_attn.attend(&q, cond)?;
        if let Some(regions) = &hooks.regions {
            if !regions.is_empty() {
                let selector = regions.selector(h.height(), h.width());
                let per_region: Vec<Mat> = regions
                    .regions()
                    .iter()
                    .map(|(_, c)| self.cross_attn.attend(&q, c))
                    .collect::<Result<_>>()?;
                for (tok, sel) in selector.iter().enumerate() {
                    if let Some(r) = sel {
                        let src = per_region[*r].row(tok).to_vec();
                        ca.row_mut(tok).copy_from_slice(&src);
                    }
                }
            }
        }
        let out = self.cross_attn.out.forward(&ca, None)?;
        h.add(&tokens_to_map(&out, &h)?)
    }

    /// Hook-free forward: ordinary convolution, global attention, the
    /// global condition. Kept as an independent reference path.
    fn forward_plain(
        &self,
        h: &LatentTensor,
        t_emb: &[f64],
        cond: &Conditioning,
        max_attn_tokens: usize,
    ) -> Result<LatentTensor> {
        let mut h = self.conv.forward(h, 1)?;
        self.add_time(&mut h, t_emb)?;
        let mut h = self.norm.forward(&h).map(silu);
        if h.plane_len() <= max_attn_tokens {
            let tokens = map_to_tokens(&h, 0);
            let attn = attention_global(&tokens, &self.self_attn.qkv)?;
            let out = self.self_attn.out.forward(&attn, None)?;
            h = h.add(&tokens_to_map(&out, &h)?)?;
        }
        let tokens = map_to_tokens(&h, 0);
        let q = self.cross_attn.q.forward(&tokens, None)?;
        let ca = self.cross_attn.attend(&q, cond)?;
        let out = self.cross_attn.out.forward(&ca, None)?;
        h.add(&tokens_to_map(&out, &h)?)
    }
}

/// The toy UNet denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyUnet {
    cfg: UnetConfig,
    stem: ConvLayer,
    head: ConvLayer,
    down0: UnetBlock,
    down1: UnetBlock,
    mid: UnetBlock,
    up1: UnetBlock,
    up0: UnetBlock,
    tr_down0: ConvLayer,
    tr_down1: ConvLayer,
    tr_up1: ConvLayer,
    tr_up0: ConvLayer,
    time_fc1: Linear,
    time_fc2: Linear,
}

impl TinyUnet {
    pub fn seeded(cfg: UnetConfig) -> Self {
        let rng = CounterRng::new(cfg.seed);
        let (w0, w1) = (cfg.base_width, cfg.mid_width);
        Self {
            stem: ConvLayer::seeded(w0, cfg.in_channels, 3, &rng.derive(fnv1a("stem"))),
            head: ConvLayer::seeded(cfg.in_channels, w0, 3, &rng.derive(fnv1a("head"))),
            down0: UnetBlock::seeded("down.0", w0, &cfg),
            down1: UnetBlock::seeded("down.1", w1, &cfg),
            mid: UnetBlock::seeded("mid", w1, &cfg),
            up1: UnetBlock::seeded("up.1", w1, &cfg),
            up0: UnetBlock::seeded("up.0", w0, &cfg),
            tr_down0: ConvLayer::seeded(w1, w0, 1, &rng.derive(fnv1a("tr_down0"))),
            tr_down1: ConvLayer::seeded(w1, w1, 1, &rng.derive(fnv1a("tr_down1"))),
            tr_up1: ConvLayer::seeded(w1, w1, 1, &rng.derive(fnv1a("tr_up1"))),
            tr_up0: ConvLayer::seeded(w0, w1, 1, &rng.derive(fnv1a("tr_up0"))),
            time_fc1: Linear::seeded(cfg.time_dim, cfg.time_dim, &rng.derive(fnv1a("time_fc1"))),
            time_fc2: Linear::seeded(cfg.time_dim, cfg.time_dim, &rng.derive(fnv1a("time_fc2"))),
            cfg,
        }
    }

    /// All parameters zero; predicts zero noise for any input.
    pub fn zeroed(cfg: UnetConfig) -> Self {
        let (w0, w1) = (cfg.base_width, cfg.mid_width);
        Self {
            stem: ConvLayer::zeros(w0, cfg.in_channels, 3),
            head: ConvLayer::zeros(cfg.in_channels, w0, 3),
            down0: UnetBlock::zeroed("down.0", w0, &cfg),
            down1: UnetBlock::zeroed("down.1", w1, &cfg),
            mid: UnetBlock::zeroed("mid", w1, &cfg),
            up1: UnetBlock::zeroed("up.1", w1, &cfg),
            up0: UnetBlock::zeroed("up.0", w0, &cfg),
            tr_down0: ConvLayer::zeros(w1, w0, 1),
            tr_down1: ConvLayer::zeros(w1, w1, 1),
            tr_up1: ConvLayer::zeros(w1, w1, 1),
            tr_up0: ConvLayer::zeros(w0, w1, 1),
            time_fc1: Linear::zeros(cfg.time_dim, cfg.time_dim),
            time_fc2: Linear::zeros(cfg.time_dim, cfg.time_dim),
            cfg,
        }
    }

    pub fn config(&self) -> &UnetConfig {
        &self.cfg
    }

    fn check_input(&self, z_t: &LatentTensor) -> Result<()> {
        if z_t.frames().is_some() {
            return Err(invalid("the UNet denoiser is image-only (no frame axis)"));
        }
        if z_t.channels() != self.cfg.in_channels {
            return Err(invalid(format!(
                "expected {} latent channels, got {}",
                self.cfg.in_channels,
                z_t.channels()
            )));
        }
        if z_t.height() % 4 != 0 || z_t.width() % 4 != 0 || z_t.height() < 4 || z_t.width() < 4 {
            return Err(invalid(format!(
                "UNet needs spatial dims divisible by 4, got {}x{}",
                z_t.height(),
                z_t.width()
            )));
        }
        Ok(())
    }

    fn embed_time(&self, t: usize) -> Result<Vec<f64>> {
        let emb = time_embedding(t, self.cfg.time_dim);
        let h: Vec<f64> = self
            .time_fc1
            .forward_vec(&emb, None)?
            .into_iter()
            .map(silu)
            .collect();
        self.time_fc2.forward_vec(&h, None)
    }

    /// Noise prediction with the hook policy applied.
    pub fn predict_hooked(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &Conditioning,
        hooks: &HookPolicy,
    ) -> Result<LatentTensor> {
        self.check_input(z_t)?;
        let dims = (z_t.height(), z_t.width());
        let t_emb = self.embed_time(t)?;
        let max = self.cfg.max_attn_tokens;

        let h = self.stem.forward(z_t, 1)?;
        let h0 = self.down0.forward(&h, dims, &t_emb, cond, hooks, max)?;
        let hd = self.tr_down0.forward(&avg_pool2(&h0)?, 1)?;
        let h1 = self.down1.forward(&hd, dims, &t_emb, cond, hooks, max)?;
        let hm_in = self.tr_down1.forward(&avg_pool2(&h1)?, 1)?;
        let hm = self.mid.forward(&hm_in, dims, &t_emb, cond, hooks, max)?;
        let u1 = self.tr_up1.forward(&nearest_up2(&hm)?, 1)?.add(&h1)?;
        let hu1 = self.up1.forward(&u1, dims, &t_emb, cond, hooks, max)?;
        let u0 = self.tr_up0.forward(&nearest_up2(&hu1)?, 1)?.add(&h0)?;
        let hu0 = self.up0.forward(&u0, dims, &t_emb, cond, hooks, max)?;
        let eps = self.head.forward(&hu0.map(silu), 1)?;
        eps.check_finite()?;
        Ok(eps.with_level(z_t.level()))
    }

    /// Reference forward pass without any hook machinery.
    pub fn predict_plain(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &Conditioning,
    ) -> Result<LatentTensor> {
        self.check_input(z_t)?;
        let t_emb = self.embed_time(t)?;
        let max = self.cfg.max_attn_tokens;

        let h = self.stem.forward(z_t, 1)?;
        let h0 = self.down0.forward_plain(&h, &t_emb, cond, max)?;
        let hd = self.tr_down0.forward(&avg_pool2(&h0)?, 1)?;
        let h1 = self.down1.forward_plain(&hd, &t_emb, cond, max)?;
        let hm_in = self.tr_down1.forward(&avg_pool2(&h1)?, 1)?;
        let hm = self.mid.forward_plain(&hm_in, &t_emb, cond, max)?;
        let u1 = self.tr_up1.forward(&nearest_up2(&hm)?, 1)?.add(&h1)?;
        let hu1 = self.up1.forward_plain(&u1, &t_emb, cond, max)?;
        let u0 = self.tr_up0.forward(&nearest_up2(&hu1)?, 1)?.add(&h0)?;
        let hu0 = self.up0.forward_plain(&u0, &t_emb, cond, max)?;
        let eps = self.head.forward(&hu0.map(silu), 1)?;
        eps.check_finite()?;
        Ok(eps.with_level(z_t.level()))
    }

    pub fn state_dict(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let conv = |ck: &mut Checkpoint, name: &str, layer: &ConvLayer| {
            ck.insert(
                &format!("{name}.weight"),
                vec![
                    layer.kernel.out_channels,
                    layer.kernel.in_channels,
                    layer.kernel.size,
                    layer.kernel.size,
                ],
                layer.kernel.data().to_vec(),
            );
            ck.insert(&format!("{name}.bias"), vec![layer.bias.len()], layer.bias.clone());
        };
        let linear = |ck: &mut Checkpoint, name: &str, layer: &Linear| {
            ck.insert(
                &format!("{name}.weight"),
                vec![layer.weight.rows(), layer.weight.cols()],
                layer.weight.data().to_vec(),
            );
            ck.insert(&format!("{name}.bias"), vec![layer.bias.len()], layer.bias.clone());
        };
        let mat = |ck: &mut Checkpoint, name: &str, m: &Mat| {
            ck.insert(name, vec![m.rows(), m.cols()], m.data().to_vec());
        };
        conv(&mut ck, "stem", &self.stem);
        conv(&mut ck, "head", &self.head);
        conv(&mut ck, "tr_down0", &self.tr_down0);
        conv(&mut ck, "tr_down1", &self.tr_down1);
        conv(&mut ck, "tr_up1", &self.tr_up1);
        conv(&mut ck, "tr_up0", &self.tr_up0);
        linear(&mut ck, "time_fc1", &self.time_fc1);
        linear(&mut ck, "time_fc2", &self.time_fc2);
        for block in [&self.down0, &self.down1, &self.mid, &self.up1, &self.up0] {
            let id = block.id;
            conv(&mut ck, &format!("{id}.conv"), &block.conv);
            linear(&mut ck, &format!("{id}.time_proj"), &block.time_proj);
            ck.insert(
                &format!("{id}.norm.gamma"),
                vec![block.norm.gamma.len()],
                block.norm.gamma.clone(),
            );
            ck.insert(
                &format!("{id}.norm.beta"),
                vec![block.norm.beta.len()],
                block.norm.beta.clone(),
            );
            mat(&mut ck, &format!("{id}.self_attn.wq"), &block.self_attn.qkv.wq);
            mat(&mut ck, &format!("{id}.self_attn.wk"), &block.self_attn.qkv.wk);
            mat(&mut ck, &format!("{id}.self_attn.wv"), &block.self_attn.qkv.wv);
            linear(&mut ck, &format!("{id}.self_attn.out"), &block.self_attn.out);
            linear(&mut ck, &format!("{id}.cross_attn.q"), &block.cross_attn.q);
            linear(&mut ck, &format!("{id}.cross_attn.k"), &block.cross_attn.k);
            linear(&mut ck, &format!("{id}.cross_attn.v"), &block.cross_attn.v);
            linear(&mut ck, &format!("{id}.cross_attn.out"), &block.cross_attn.out);
        }
        ck
    }
}

impl Denoiser for TinyUnet {
    fn predict(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &Conditioning,
        hooks: &HookPolicy,
    ) -> Result<LatentTensor> {
        self.predict_hooked(z_t, t, cond, hooks)
    }

    fn latent_channels(&self) -> usize {
        self.cfg.in_channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::cond::PromptEmbedder;
    use crate::models::{HookLog, StepPhase};
    use crate::rng::CounterRng;
    use crate::unet_scale::{DilationPolicy, FusionConfig};
    use std::sync::Arc;

    fn embedder() -> PromptEmbedder {
        PromptEmbedder::new(11, UnetConfig::default().cond_dim)
    }

    fn random_latent(seed: u64, h: usize, w: usize) -> LatentTensor {
        let rng = CounterRng::new(seed);
        LatentTensor::new(rng.normal_vec(4 * h * w), 4, None, h, w, 1).unwrap()
    }

    #[test]
    fn zero_weights_predict_zero_noise() {
        let model = TinyUnet::zeroed(UnetConfig::default());
        let z = random_latent(1, 16, 16);
        let cond = embedder().embed("anything");
        let eps = model
            .predict(&z, 3, &cond, &HookPolicy::identity())
            .unwrap();
        assert!(eps.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_matches_input() {
        let model = TinyUnet::seeded(UnetConfig::default());
        let z = random_latent(2, 16, 16);
        let cond = embedder().embed("shape");
        let eps = model
            .predict(&z, 5, &cond, &HookPolicy::identity())
            .unwrap();
        assert_eq!(eps.channels(), 4);
        assert_eq!((eps.height(), eps.width()), (16, 16));
    }

    #[test]
    fn identity_hooks_match_plain_forward_bitwise() {
        let model = TinyUnet::seeded(UnetConfig::default());
        let cond = embedder().embed("reference");
        for (seed, size) in [(3u64, 16usize), (4, 32)] {
            let z = random_latent(seed, size, size);
            let hooked = model
                .predict(&z, 7, &cond, &HookPolicy::identity())
                .unwrap();
            let plain = model.predict_plain(&z, 7, &cond).unwrap();
            assert!(hooked
                .data()
                .iter()
                .zip(plain.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn frame_axis_is_rejected() {
        let model = TinyUnet::seeded(UnetConfig::default());
        let z = LatentTensor::zeros(4, Some(2), 16, 16);
        let cond = embedder().embed("video");
        assert!(model
            .predict(&z, 1, &cond, &HookPolicy::identity())
            .is_err());
    }

    #[test]
    fn hooks_are_consulted_and_logged() {
        let model = TinyUnet::seeded(UnetConfig::default());
        let z = random_latent(5, 32, 32);
        let cond = embedder().embed("logged");
        let log = Arc::new(HookLog::default());
        let hooks = HookPolicy {
            dilation: Some(DilationPolicy::new(2, 0.25).unwrap()),
            attention: Some(AttentionMode::Fused(FusionConfig::for_training_dims(
                16, 16, 1.0,
            ))),
            step: Some(StepPhase { index: 0, total: 10 }),
            log: Some(log.clone()),
            ..HookPolicy::default()
        };
        let adapted = model.predict(&z, 7, &cond, &hooks).unwrap();
        let plain = model.predict_plain(&z, 7, &cond).unwrap();
        assert!(adapted
            .data()
            .iter()
            .zip(plain.data())
            .any(|(a, b)| a != b));
        let events = log.events();
        let convs: Vec<_> = events
            .iter()
            .filter_map(|e| match e {
                crate::models::HookEvent::Conv { block, dilation, .. } => {
                    Some((block.clone(), *dilation))
                }
                _ => None,
            })
            .collect();
        assert!(convs.contains(&("down.0".to_string(), 2)));
        assert!(convs.contains(&("mid".to_string(), 2)));
        assert!(convs.contains(&("up.0".to_string(), 1)));
        assert!(convs.contains(&("up.1".to_string(), 1)));
    }

    #[test]
    fn region_injection_with_global_prompt_is_bitwise_neutral() {
        use crate::models::cond::{RegionConditions, RegionMask};
        let model = TinyUnet::seeded(UnetConfig::default());
        let z = random_latent(6, 16, 16);
        let e = embedder();
        let cond = e.embed("scene");
        let mask = RegionMask::rect(16, 16, 0, 0, 8, 16).unwrap();
        let hooks = HookPolicy {
            regions: Some(RegionConditions::new(vec![(mask, e.embed("scene"))]).unwrap()),
            ..HookPolicy::identity()
        };
        let with = model.predict(&z, 2, &cond, &hooks).unwrap();
        let without = model.predict(&z, 2, &cond, &HookPolicy::identity()).unwrap();
        assert!(with
            .data()
            .iter()
            .zip(without.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn state_dict_round_trips_through_checkpoint_bytes() {
        let model = TinyUnet::seeded(UnetConfig::default());
        let ck = model.state_dict();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck, back);
        assert!(ck.get("mid.self_attn.wq").is_some());
    }
}
