//! A tiny diffusion transformer for image and video latents, with
//! reverse-mode gradients for adapter and full-weight training.
//!
//! The forward pass patchifies the latent into tokens on a
//! (frame, height, width) grid, applies rotary position embeddings per
//! axis inside each attention head, and runs a short stack of
//! self-attention + cross-attention + MLP blocks with residual
//! connections (no normalization layers at this scale). The backward
//! pass replays a recorded trace and produces exact gradients for every
//! linear layer, which the LoRA step projects onto its low-rank factors.

use std::collections::BTreeMap;

use crate::dit_scale::{
    apply_rope_in_place, apply_rope_inverse_in_place, RopeConfig,
};
use crate::error::{invalid, numerical, Result};
use crate::linalg::Mat;
use crate::models::checkpoint::Checkpoint;
use crate::models::cond::Conditioning;
use crate::models::layers::{silu, silu_prime, time_embedding, Linear};
use crate::models::lora::{LoraAdapter, LoraSet};
use crate::models::{Denoiser, HookPolicy};
use crate::parallel::{map_indexed, Exec};
use crate::rng::{fnv1a, CounterRng};
use crate::schedule::{forward_noise, NoiseSchedule};
use crate::tensor::{softmax_scaled, LatentTensor};

/// Hyperparameters of [`TinyDit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DitConfig {
    pub in_channels: usize,
    /// Spatial patch size (temporal patch is always 1).
    pub patch: usize,
    /// Model width.
    pub dim: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    pub heads: usize,
    /// Head-dimension split over (frame, height, width) rotary axes.
    pub axis_dims: [usize; 3],
    pub mlp_dim: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    /// Token extents `[frames, H/patch, W/patch]` at training time.
    pub train_extent: [usize; 3],
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            patch: 2,
            dim: 16,
            depth: 2,
            heads: 1,
            axis_dims: [4, 6, 6],
            mlp_dim: 32,
            cond_dim: 8,
            time_dim: 16,
            train_extent: [1, 8, 8],
            max_tokens: 4096,
            seed: 0x0D17_0001,
        }
    }
}

impl DitConfig {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(invalid(format!(
                "model width {} must be a positive multiple of {} heads",
                self.dim, self.heads
            )));
        }
        let head_dim = self.dim / self.heads;
        if self.axis_dims.iter().sum::<usize>() != head_dim {
            return Err(invalid(format!(
                "axis dims {:?} must sum to the head dimension {head_dim}",
                self.axis_dims
            )));
        }
        for (a, &d) in self.axis_dims.iter().enumerate() {
            if d % 2 != 0 {
                return Err(invalid(format!("axis {a} head dimension {d} must be even")));
            }
        }
        if self.patch == 0 || self.time_dim % 2 != 0 {
            return Err(invalid("patch must be >= 1 and time_dim even"));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DitBlock {
    sa_q: Linear,
    sa_k: Linear,
    sa_v: Linear,
    sa_o: Linear,
    ca_q: Linear,
    ca_k: Linear,
    ca_v: Linear,
    ca_o: Linear,
    fc1: Linear,
    fc2: Linear,
}

impl DitBlock {
    fn seeded(cfg: &DitConfig, index: usize) -> Self {
        let rng = CounterRng::new(cfg.seed).derive(fnv1a(&format!("block{index}")));
        let d = cfg.dim;
        Self {
            sa_q: Linear::seeded(d, d, &rng.derive(0)),
            sa_k: Linear::seeded(d, d, &rng.derive(1)),
            sa_v: Linear::seeded(d, d, &rng.derive(2)),
            sa_o: Linear::seeded(d, d, &rng.derive(3)),
            ca_q: Linear::seeded(d, d, &rng.derive(4)),
            ca_k: Linear::seeded(d, cfg.cond_dim, &rng.derive(5)),
            ca_v: Linear::seeded(d, cfg.cond_dim, &rng.derive(6)),
            ca_o: Linear::seeded(d, d, &rng.derive(7)),
            fc1: Linear::seeded(cfg.mlp_dim, d, &rng.derive(8)),
            fc2: Linear::seeded(d, cfg.mlp_dim, &rng.derive(9)),
        }
    }
}

/// The toy diffusion transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyDit {
    cfg: DitConfig,
    embed: Linear,
    unembed: Linear,
    time_fc1: Linear,
    time_fc2: Linear,
    blocks: Vec<DitBlock>,
    adapters: LoraSet,
}

/// One training example for the denoising objective.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub z0: LatentTensor,
    pub t: usize,
    pub eps: LatentTensor,
    pub cond: Conditioning,
}

#[derive(Debug, Default)]
struct LinearGrad {
    w: Mat,
    b: Vec<f64>,
}

type GradStore = BTreeMap<String, LinearGrad>;

struct AttnTrace {
    x_in: Mat,
    q_rot: Mat,
    k_rot: Mat,
    v: Mat,
    probs: Vec<Mat>,
    attn: Mat,
}

struct CrossTrace {
    x_in: Mat,
    cond: Mat,
    probs: Mat,
    v: Mat,
    ca: Mat,
}

struct MlpTrace {
    x_in: Mat,
    pre: Mat,
    act: Mat,
}

struct BlockTrace {
    sa: AttnTrace,
    ca: CrossTrace,
    mlp: MlpTrace,
}

struct Trace {
    tokens0: Mat,
    time_raw: Vec<f64>,
    time_pre: Vec<f64>,
    blocks: Vec<BlockTrace>,
    x_final: Mat,
    angles: Vec<Vec<f64>>,
    temperature: f64,
}

impl TinyDit {
    pub fn seeded(cfg: DitConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = CounterRng::new(cfg.seed);
        let feat = cfg.in_channels * cfg.patch * cfg.patch;
        Ok(Self {
            embed: Linear::seeded(cfg.dim, feat, &rng.derive(fnv1a("embed"))),
            unembed: Linear::seeded(feat, cfg.dim, &rng.derive(fnv1a("unembed"))),
            time_fc1: Linear::seeded(cfg.time_dim, cfg.time_dim, &rng.derive(fnv1a("time.fc1"))),
            time_fc2: Linear::seeded(cfg.dim, cfg.time_dim, &rng.derive(fnv1a("time.fc2"))),
            blocks: (0..cfg.depth).map(|b| DitBlock::seeded(&cfg, b)).collect(),
            adapters: LoraSet::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &DitConfig {
        &self.cfg
    }

    pub fn adapters(&self) -> &LoraSet {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut LoraSet {
        &mut self.adapters
    }

    pub fn set_adapters(&mut self, adapters: LoraSet) {
        self.adapters = adapters;
    }

    /// All adapter-targetable linear layer names.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = vec![
            "embed".to_string(),
            "unembed".to_string(),
            "time.fc1".to_string(),
            "time.fc2".to_string(),
        ];
        for b in 0..self.blocks.len() {
            for suffix in ["sa.q", "sa.k", "sa.v", "sa.o", "ca.q", "ca.k", "ca.v", "ca.o", "mlp.fc1", "mlp.fc2"] {
                names.push(format!("blocks.{b}.{suffix}"));
            }
        }
        names
    }

    fn layer(&self, name: &str) -> Option<&Linear> {
        match name {
            "embed" => Some(&self.embed),
            "unembed" => Some(&self.unembed),
            "time.fc1" => Some(&self.time_fc1),
            "time.fc2" => Some(&self.time_fc2),
            _ => {
                let rest = name.strip_prefix("blocks.")?;
                let (idx, sub) = rest.split_once('.')?;
                let block = self.blocks.get(idx.parse::<usize>().ok()?)?;
                Some(match sub {
                    "sa.q" => &block.sa_q,
                    "sa.k" => &block.sa_k,
                    "sa.v" => &block.sa_v,
                    "sa.o" => &block.sa_o,
                    "ca.q" => &block.ca_q,
                    "ca.k" => &block.ca_k,
                    "ca.v" => &block.ca_v,
                    "ca.o" => &block.ca_o,
                    "mlp.fc1" => &block.fc1,
                    "mlp.fc2" => &block.fc2,
                    _ => return None,
                })
            }
        }
    }

    fn layer_mut(&mut self, name: &str) -> Option<&mut Linear> {
        // Mirror of `layer`; kept separate because of borrow rules.
        match name {
            "embed" => Some(&mut self.embed),
            "unembed" => Some(&mut self.unembed),
            "time.fc1" => Some(&mut self.time_fc1),
            "time.fc2" => Some(&mut self.time_fc2),
            _ => {
                let rest = name.strip_prefix("blocks.")?;
                let (idx, sub) = rest.split_once('.')?;
                let block = self.blocks.get_mut(idx.parse::<usize>().ok()?)?;
                Some(match sub {
                    "sa.q" => &mut block.sa_q,
                    "sa.k" => &mut block.sa_k,
                    "sa.v" => &mut block.sa_v,
                    "sa.o" => &mut block.sa_o,
                    "ca.q" => &mut block.ca_q,
                    "ca.k" => &mut block.ca_k,
                    "ca.v" => &mut block.ca_v,
                    "ca.o" => &mut block.ca_o,
                    "mlp.fc1" => &mut block.fc1,
                    "mlp.fc2" => &mut block.fc2,
                    _ => return None,
                })
            }
        }
    }

    /// Attaches a null-initialized adapter to a named layer.
    pub fn attach_adapter(&mut self, target: &str, rank: usize, gamma: f64, seed: u64) -> Result<()> {
        let layer = self
            .layer(target)
            .ok_or_else(|| invalid(format!("unknown adapter target {target:?}")))?;
        let adapter = LoraAdapter::new(target, layer.d_out(), layer.d_in(), rank, gamma, seed)?;
        self.adapters.insert(target.to_string(), adapter);
        Ok(())
    }

    fn adapter_for(&self, name: &str) -> Option<&LoraAdapter> {
        self.adapters.get(name)
    }

    fn fwd(&self, name: &str, x: &Mat) -> Result<Mat> {
        self.layer(name)
            .expect("known layer")
            .forward(x, self.adapter_for(name))
    }

    fn eff_weight(&self, name: &str) -> Result<Mat> {
        self.layer(name)
            .expect("known layer")
            .effective_weight(self.adapter_for(name))
    }

    /// Baseline rotary configuration (no stretch) at any extent.
    pub fn identity_rope(&self) -> RopeConfig {
        RopeConfig::identity(self.cfg.axis_dims, self.cfg.train_extent).expect("valid axis dims")
    }

    fn token_extent(&self, z: &LatentTensor) -> Result<[usize; 3]> {
        if z.channels() != self.cfg.in_channels {
            return Err(invalid(format!(
                "expected {} latent channels, got {}",
                self.cfg.in_channels,
                z.channels()
            )));
        }
        if z.height() % self.cfg.patch != 0 || z.width() % self.cfg.patch != 0 {
            return Err(invalid(format!(
                "spatial dims {}x{} not divisible by patch {}",
                z.height(),
                z.width(),
                self.cfg.patch
            )));
        }
        let ext = [
            z.frame_count(),
            z.height() / self.cfg.patch,
            z.width() / self.cfg.patch,
        ];
        let tokens: usize = ext.iter().product();
        if tokens > self.cfg.max_tokens {
            return Err(invalid(format!(
                "{tokens} tokens exceed the configured maximum {}",
                self.cfg.max_tokens
            )));
        }
        Ok(ext)
    }

    /// Space-to-depth patchify: `[N, C * patch^2]` token features.
    fn patchify(&self, z: &LatentTensor) -> Mat {
        let p = self.cfg.patch;
        let (hp, wp) = (z.height() / p, z.width() / p);
        let frames = z.frame_count();
        let feat = self.cfg.in_channels * p * p;
        Mat::from_fn(frames * hp * wp, feat, |tok, f_idx| {
            let (fr, rest) = (tok / (hp * wp), tok % (hp * wp));
            let (py, px) = (rest / wp, rest % wp);
            let (c, rest) = (f_idx / (p * p), f_idx % (p * p));
            let (dy, dx) = (rest / p, rest % p);
            z.get(c, fr, py * p + dy, px * p + dx)
        })
    }

    fn unpatchify(&self, tokens: &Mat, like: &LatentTensor) -> LatentTensor {
        let p = self.cfg.patch;
        let (hp, wp) = (like.height() / p, like.width() / p);
        let mut out = like.zeros_like().with_level(like.level());
        for tok in 0..tokens.rows() {
            let (fr, rest) = (tok / (hp * wp), tok % (hp * wp));
            let (py, px) = (rest / wp, rest % wp);
            for (f_idx, &v) in tokens.row(tok).iter().enumerate() {
                let (c, rest) = (f_idx / (p * p), f_idx % (p * p));
                let (dy, dx) = (rest / p, rest % p);
                out.set(c, fr, py * p + dy, px * p + dx, v);
            }
        }
        out
    }

    fn token_rope_angles(
        &self,
        extent: [usize; 3],
        rope: &RopeConfig,
        origin: [usize; 3],
    ) -> Result<Vec<Vec<f64>>> {
        if rope.head_dim() != self.cfg.head_dim() {
            return Err(invalid(format!(
                "rope head dim {} does not match model head dim {}",
                rope.head_dim(),
                self.cfg.head_dim()
            )));
        }
        let [f_ext, h_ext, w_ext] = extent;
        let mut out = Vec::with_capacity(f_ext * h_ext * w_ext);
        for f in 0..f_ext {
            for y in 0..h_ext {
                for x in 0..w_ext {
                    out.push(rope.token_angles([f + origin[0], y + origin[1], x + origin[2]])?);
                }
            }
        }
        Ok(out)
    }

    fn self_attention(
        &self,
        b: usize,
        x: &Mat,
        angles: &[Vec<f64>],
        temperature: f64,
    ) -> Result<(Mat, AttnTrace)> {
        let n = x.rows();
        let (heads, hd) = (self.cfg.heads, self.cfg.head_dim());
        let mut q = self.fwd(&format!("blocks.{b}.sa.q"), x)?;
        let mut k = self.fwd(&format!("blocks.{b}.sa.k"), x)?;
        let v = self.fwd(&format!("blocks.{b}.sa.v"), x)?;
        for tok in 0..n {
            for h in 0..heads {
                let span = h * hd..(h + 1) * hd;
                apply_rope_in_place(&mut q.row_mut(tok)[span.clone()], &angles[tok]);
                apply_rope_in_place(&mut k.row_mut(tok)[span], &angles[tok]);
            }
        }
        let mut attn = Mat::zeros(n, self.cfg.dim);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let span = h * hd..(h + 1) * hd;
            let qh = Mat::from_fn(n, hd, |r, c| q.get(r, span.start + c));
            let kh = Mat::from_fn(n, hd, |r, c| k.get(r, span.start + c));
            let vh = Mat::from_fn(n, hd, |r, c| v.get(r, span.start + c));
            let scores = qh.matmul_nt(&kh);
            let p = Mat::new(
                n,
                n,
                softmax_scaled(scores.data(), n, temperature, hd as f64)?,
            )?;
            let oh = p.matmul(&vh);
            for r in 0..n {
                attn.row_mut(r)[span.clone()].copy_from_slice(oh.row(r));
            }
            probs.push(p);
        }
        let out = self.fwd(&format!("blocks.{b}.sa.o"), &attn)?;
        Ok((
            out,
            AttnTrace {
                x_in: x.clone(),
                q_rot: q,
                k_rot: k,
                v,
                probs,
                attn,
            },
        ))
    }

    fn cross_attention(
        &self,
        b: usize,
        x: &Mat,
        cond: &Conditioning,
        extent: [usize; 3],
        hooks: &HookPolicy,
    ) -> Result<(Mat, CrossTrace)> {
        let q = self.fwd(&format!("blocks.{b}.ca.q"), x)?;
        let attend = |c: &Conditioning| -> Result<(Mat, Mat)> {
            let k = self.fwd(&format!("blocks.{b}.ca.k"), &c.tokens)?;
            let v = self.fwd(&format!("blocks.{b}.ca.v"), &c.tokens)?;
            let scores = q.matmul_nt(&k);
            let probs = Mat::new(
                q.rows(),
                k.rows(),
                softmax_scaled(scores.data(), k.rows(), 1.0, self.cfg.dim as f64)?,
            )?;
            Ok((probs, v))
        };
        let (mut probs, mut v) = attend(cond)?;
        let mut ca = probs.matmul(&v);
        if let Some(regions) = &hooks.regions {
            if !regions.is_empty() {
                let [_, h_ext, w_ext] = extent;
                let selector = regions.selector(h_ext, w_ext);
                let per_region: Vec<Mat> = regions
                    .regions()
                    .iter()
                    .map(|(_, c)| attend(c).map(|(p, v)| p.matmul(&v)))
                    .collect::<Result<_>>()?;
                for tok in 0..ca.rows() {
                    let cell = tok % (h_ext * w_ext);
                    if let Some(r) = selector[cell] {
                        let src = per_region[r].row(tok).to_vec();
                        ca.row_mut(tok).copy_from_slice(&src);
                    }
                }
                // Region routing is inference-only; the trace keeps the
                // global-branch tensors.
                let _ = (&mut probs, &mut v);
            }
        }
        let out = self.fwd(&format!("blocks.{b}.ca.o"), &ca)?;
        Ok((
            out,
            CrossTrace {
                x_in: x.clone(),
                cond: cond.tokens.clone(),
                probs,
                v,
                ca,
            },
        ))
    }

    fn mlp(&self, b: usize, x: &Mat) -> Result<(Mat, MlpTrace)> {
        let pre = self.fwd(&format!("blocks.{b}.mlp.fc1"), x)?;
        let act = Mat::new(
            pre.rows(),
            pre.cols(),
            pre.data().iter().map(|&v| silu(v)).collect(),
        )?;
        let out = self.fwd(&format!("blocks.{b}.mlp.fc2"), &act)?;
        Ok((
            out,
            MlpTrace {
                x_in: x.clone(),
                pre,
                act,
            },
        ))
    }

    fn forward_traced(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &Conditioning,
        rope: &RopeConfig,
        temperature: f64,
        origin: [usize; 3],
        hooks: &HookPolicy,
    ) -> Result<(LatentTensor, Trace)> {
        if !(temperature > 0.0) {
            return Err(invalid(format!("temperature must be > 0, got {temperature}")));
        }
        if cond.dim() != self.cfg.cond_dim {
            return Err(invalid(format!(
                "condition dim {} does not match model cond dim {}",
                cond.dim(),
                self.cfg.cond_dim
            )));
        }
        let extent = self.token_extent(z_t)?;
        let angles = self.token_rope_angles(extent, rope, origin)?;
        let tokens0 = self.patchify(z_t);

        let time_raw = time_embedding(t, self.cfg.time_dim);
        let time_pre = self.time_fc1.forward_vec(&time_raw, self.adapter_for("time.fc1"))?;
        let time_act: Vec<f64> = time_pre.iter().map(|&v| silu(v)).collect();
        let time_vec = {
            let m = Mat::new(1, time_act.len(), time_act)?;
            self.fwd("time.fc2", &m)?.into_row()
        };

        let mut x = self.fwd("embed", &tokens0)?;
        x.add_row_vector(&time_vec);

        let mut blocks = Vec::with_capacity(self.cfg.depth);
        for b in 0..self.cfg.depth {
            let (sa_out, sa_trace) = self.self_attention(b, &x, &angles, temperature)?;
            x.add_assign(&sa_out);
            let (ca_out, ca_trace) = self.cross_attention(b, &x, cond, extent, hooks)?;
            x.add_assign(&ca_out);
            let (mlp_out, mlp_trace) = self.mlp(b, &x)?;
            x.add_assign(&mlp_out);
            blocks.push(BlockTrace {
                sa: sa_trace,
                ca: ca_trace,
                mlp: mlp_trace,
            });
        }

        let out_tokens = self.fwd("unembed", &x)?;
        let eps = self.unpatchify(&out_tokens, z_t);
        eps.check_finite()?;
        Ok((
            eps,
            Trace {
                tokens0,
                time_raw,
                time_pre,
                blocks,
                x_final: x,
                angles,
                temperature,
            },
        ))
    }

    /// Noise prediction with explicit rotary and temperature settings.
    pub fn predict_adapted(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &Conditioning,
        rope: &RopeConfig,
        temperature: f64,
        hooks: &HookPolicy,
    ) -> Result<LatentTensor> {
        self.forward_traced(z_t, t, cond, rope, temperature, [0, 0, 0], hooks)
            .map(|(eps, _)| eps)
    }

    /// [`TinyDit::predict_adapted`] with token coordinates offset by
    /// `origin`; used to verify the relative-position property.
    pub fn predict_with_origin(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &Conditioning,
        rope: &RopeConfig,
        temperature: f64,
        origin: [usize; 3],
    ) -> Result<LatentTensor> {
        self.forward_traced(z_t, t, cond, rope, temperature, origin, &HookPolicy::identity())
            .map(|(eps, _)| eps)
    }

    fn softmax_backward(p: &Mat, dp: &Mat) -> Mat {
        let mut out = Mat::zeros(p.rows(), p.cols());
        for r in 0..p.rows() {
            let pr = p.row(r);
            let dr = dp.row(r);
            let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
            for (o, (&pv, &dv)) in out.row_mut(r).iter_mut().zip(pr.iter().zip(dr)) {
                *o = pv * (dv - dot);
            }
        }
        out
    }

    /// Accumulates `d_out^T x` and column sums into a layer's gradient.
    fn grad_linear(grads: &mut GradStore, name: &str, d_out: &Mat, x_in: &Mat) {
        let entry = grads.entry(name.to_string()).or_insert_with(|| LinearGrad {
            w: Mat::zeros(d_out.cols(), x_in.cols()),
            b: vec![0.0; d_out.cols()],
        });
        entry.w.add_assign(&d_out.matmul_tn(x_in));
        for (o, v) in entry.b.iter_mut().zip(d_out.column_sums()) {
            *o += v;
        }
    }

    /// Backward pass for one sample; returns gradients per linear layer.
    fn backward(&self, trace: &Trace, d_eps: &LatentTensor) -> Result<GradStore> {
        let mut grads = GradStore::new();
        let d_out_tokens = self.patchify(d_eps);

        // unembed
        Self::grad_linear(&mut grads, "unembed", &d_out_tokens, &trace.x_final);
        let mut dx = d_out_tokens.matmul(&self.eff_weight("unembed")?);

        let (heads, hd) = (self.cfg.heads, self.cfg.head_dim());
        for (b, bt) in trace.blocks.iter().enumerate().rev() {
            // MLP: x_out = x_in + fc2(silu(fc1 x_in))
            Self::grad_linear(&mut grads, &format!("blocks.{b}.mlp.fc2"), &dx, &bt.mlp.act);
            let d_act = dx.matmul(&self.eff_weight(&format!("blocks.{b}.mlp.fc2"))?);
            let d_pre = Mat::new(
                d_act.rows(),
                d_act.cols(),
                d_act
                    .data()
                    .iter()
                    .zip(bt.mlp.pre.data())
                    .map(|(&g, &p)| g * silu_prime(p))
                    .collect(),
            )?;
            Self::grad_linear(&mut grads, &format!("blocks.{b}.mlp.fc1"), &d_pre, &bt.mlp.x_in);
            dx.add_assign(&d_pre.matmul(&self.eff_weight(&format!("blocks.{b}.mlp.fc1"))?));

            // Cross-attention: x_out = x_in + ca_o(P ca_v(cond))
            Self::grad_linear(&mut grads, &format!("blocks.{b}.ca.o"), &dx, &bt.ca.ca);
            let d_ca = dx.matmul(&self.eff_weight(&format!("blocks.{b}.ca.o"))?);
            let d_v = bt.ca.probs.matmul_tn(&d_ca);
            let d_p = d_ca.matmul_nt(&bt.ca.v);
            let scale = 1.0 / (self.cfg.dim as f64).sqrt();
            let d_scores = Self::softmax_backward(&bt.ca.probs, &d_p).scaled(scale);
            let q = self.fwd(&format!("blocks.{b}.ca.q"), &bt.ca.x_in)?;
            let k = self.fwd(&format!("blocks.{b}.ca.k"), &bt.ca.cond)?;
            let d_q = d_scores.matmul(&k);
            let d_k = d_scores.matmul_tn(&q);
            Self::grad_linear(&mut grads, &format!("blocks.{b}.ca.q"), &d_q, &bt.ca.x_in);
            Self::grad_linear(&mut grads, &format!("blocks.{b}.ca.k"), &d_k, &bt.ca.cond);
            Self::grad_linear(&mut grads, &format!("blocks.{b}.ca.v"), &d_v, &bt.ca.cond);
            dx.add_assign(&d_q.matmul(&self.eff_weight(&format!("blocks.{b}.ca.q"))?));

            // Self-attention: x_out = x_in + sa_o(attn)
            Self::grad_linear(&mut grads, &format!("blocks.{b}.sa.o"), &dx, &bt.sa.attn);
            let d_attn = dx.matmul(&self.eff_weight(&format!("blocks.{b}.sa.o"))?);
            let n = d_attn.rows();
            let mut d_q = Mat::zeros(n, self.cfg.dim);
            let mut d_k = Mat::zeros(n, self.cfg.dim);
            let mut d_v = Mat::zeros(n, self.cfg.dim);
            for h in 0..heads {
                let span = h * hd..(h + 1) * hd;
                let d_oh = Mat::from_fn(n, hd, |r, c| d_attn.get(r, span.start + c));
                let qh = Mat::from_fn(n, hd, |r, c| bt.sa.q_rot.get(r, span.start + c));
                let kh = Mat::from_fn(n, hd, |r, c| bt.sa.k_rot.get(r, span.start + c));
                let vh = Mat::from_fn(n, hd, |r, c| bt.sa.v.get(r, span.start + c));
                let p = &bt.sa.probs[h];
                let d_vh = p.matmul_tn(&d_oh);
                let d_p = d_oh.matmul_nt(&vh);
                let scale = 1.0 / (trace.temperature * (hd as f64).sqrt());
                let d_s = Self::softmax_backward(p, &d_p).scaled(scale);
                let mut d_qh = d_s.matmul(&kh);
                let mut d_kh = d_s.matmul_tn(&qh);
                for tok in 0..n {
                    apply_rope_inverse_in_place(d_qh.row_mut(tok), &trace.angles[tok]);
                    apply_rope_inverse_in_place(d_kh.row_mut(tok), &trace.angles[tok]);
                }
                for r in 0..n {
                    d_q.row_mut(r)[span.clone()].copy_from_slice(d_qh.row(r));
                    d_k.row_mut(r)[span.clone()].copy_from_slice(d_kh.row(r));
                    d_v.row_mut(r)[span.clone()].copy_from_slice(d_vh.row(r));
                }
            }
            Self::grad_linear(&mut grads, &format!("blocks.{b}.sa.q"), &d_q, &bt.sa.x_in);
            Self::grad_linear(&mut grads, &format!("blocks.{b}.sa.k"), &d_k, &bt.sa.x_in);
            Self::grad_linear(&mut grads, &format!("blocks.{b}.sa.v"), &d_v, &bt.sa.x_in);
            dx.add_assign(&d_q.matmul(&self.eff_weight(&format!("blocks.{b}.sa.q"))?));
            dx.add_assign(&d_k.matmul(&self.eff_weight(&format!("blocks.{b}.sa.k"))?));
            dx.add_assign(&d_v.matmul(&self.eff_weight(&format!("blocks.{b}.sa.v"))?));
        }

        // Time path: the time vector was added to every embedded token.
        let d_time = Mat::new(1, self.cfg.dim, dx.column_sums())?;
        let time_act = Mat::new(
            1,
            trace.time_pre.len(),
            trace.time_pre.iter().map(|&v| silu(v)).collect(),
        )?;
        Self::grad_linear(&mut grads, "time.fc2", &d_time, &time_act);
        let d_time_act = d_time.matmul(&self.eff_weight("time.fc2")?);
        let d_time_pre = Mat::new(
            1,
            trace.time_pre.len(),
            d_time_act
                .data()
                .iter()
                .zip(&trace.time_pre)
                .map(|(&g, &p)| g * silu_prime(p))
                .collect(),
        )?;
        let time_raw = Mat::new(1, trace.time_raw.len(), trace.time_raw.clone())?;
        Self::grad_linear(&mut grads, "time.fc1", &d_time_pre, &time_raw);

        // Embed.
        Self::grad_linear(&mut grads, "embed", &dx, &trace.tokens0);
        Ok(grads)
    }

    pub fn state_dict(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for name in self.layer_names() {
            let layer = self.layer(&name).unwrap();
            ck.insert(
                &format!("{name}.weight"),
                vec![layer.weight.rows(), layer.weight.cols()],
                layer.weight.data().to_vec(),
            );
            ck.insert(&format!("{name}.bias"), vec![layer.bias.len()], layer.bias.clone());
        }
        ck
    }

    pub fn load_state_dict(&mut self, ck: &Checkpoint) -> Result<()> {
        for name in self.layer_names() {
            let (wr, wc) = {
                let layer = self.layer(&name).unwrap();
                (layer.weight.rows(), layer.weight.cols())
            };
            let (shape, data) = ck.require(&format!("{name}.weight"))?;
            if shape != [wr, wc] {
                return Err(invalid(format!(
                    "checkpoint tensor {name}.weight has shape {shape:?}, expected [{wr}, {wc}]"
                )));
            }
            let w = Mat::new(wr, wc, data.to_vec())?;
            let (bshape, bdata) = ck.require(&format!("{name}.bias"))?;
            if bshape != [wr] {
                return Err(invalid(format!(
                    "checkpoint tensor {name}.bias has shape {bshape:?}, expected [{wr}]"
                )));
            }
            let b = bdata.to_vec();
            let layer = self.layer_mut(&name).unwrap();
            layer.weight = w;
            layer.bias = b;
        }
        Ok(())
    }

    /// Serializes the adapter set (A, B, gamma per target).
    pub fn adapters_dict(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, a) in &self.adapters {
            ck.insert(
                &format!("{name}.down"),
                vec![a.down.rows(), a.down.cols()],
                a.down.data().to_vec(),
            );
            ck.insert(
                &format!("{name}.up"),
                vec![a.up.rows(), a.up.cols()],
                a.up.data().to_vec(),
            );
            ck.insert(&format!("{name}.gamma"), vec![1], vec![a.gamma]);
        }
        ck
    }
}

impl Denoiser for TinyDit {
    fn predict(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &Conditioning,
        hooks: &HookPolicy,
    ) -> Result<LatentTensor> {
        let (rope, temperature) = match &hooks.rope {
            Some(o) => (o.rope.clone(), o.temperature),
            None => (self.identity_rope(), 1.0),
        };
        self.predict_adapted(z_t, t, cond, &rope, temperature, hooks)
    }

    fn latent_channels(&self) -> usize {
        self.cfg.in_channels
    }
}

/// Mean-squared denoising loss of a batch.
pub fn dit_loss(model: &TinyDit, batch: &[TrainSample], schedule: &NoiseSchedule) -> Result<f64> {
    let (loss, _) = dit_loss_and_grads(model, batch, schedule, false)?;
    Ok(loss)
}

/// Loss and per-layer gradients for a batch.
pub fn dit_gradients(
    model: &TinyDit,
    batch: &[TrainSample],
    schedule: &NoiseSchedule,
) -> Result<(f64, BTreeMap<String, (Mat, Vec<f64>)>)> {
    let (loss, grads) = dit_loss_and_grads(model, batch, schedule, true)?;
    Ok((
        loss,
        grads
            .into_iter()
            .map(|(k, g)| (k, (g.w, g.b)))
            .collect(),
    ))
}

fn dit_loss_and_grads(
    model: &TinyDit,
    batch: &[TrainSample],
    schedule: &NoiseSchedule,
    with_grads: bool,
) -> Result<(f64, GradStore)> {
    if batch.is_empty() {
        return Err(invalid("training batch is empty"));
    }
    let rope = model.identity_rope();
    let hooks = HookPolicy::identity();

    // Per-sample forward (and backward) in parallel; the reduction below
    // runs in fixed sample order.
    let results: Vec<Result<(f64, GradStore)>> = map_indexed(Exec::Auto, batch.len(), |i| {
        let sample = &batch[i];
        let z_t = forward_noise(&sample.z0, sample.t, &sample.eps, schedule)?;
        let (pred, trace) =
            model.forward_traced(&z_t, sample.t, &sample.cond, &rope, 1.0, [0, 0, 0], &hooks)?;
        let numel = pred.len() as f64;
        let mut loss = 0.0;
        let mut d_eps = pred.zeros_like();
        for ((d, &p), &e) in d_eps
            .data_mut()
            .iter_mut()
            .zip(pred.data())
            .zip(sample.eps.data())
        {
            let diff = p - e;
            loss += diff * diff;
            *d = 2.0 * diff / (numel * batch.len() as f64);
        }
        loss /= numel;
        let grads = if with_grads {
            model.backward(&trace, &d_eps)?
        } else {
            GradStore::new()
        };
        Ok((loss, grads))
    });

    let mut total_loss = 0.0;
    let mut total: GradStore = GradStore::new();
    for r in results {
        let (loss, grads) = r?;
        total_loss += loss;
        for (name, g) in grads {
            match total.get_mut(&name) {
                None => {
                    total.insert(name, g);
                }
                Some(acc) => {
                    acc.w.add_assign(&g.w);
                    for (a, b) in acc.b.iter_mut().zip(&g.b) {
                        *a += b;
                    }
                }
            }
        }
    }
    total_loss /= batch.len() as f64;
    if !total_loss.is_finite() {
        return Err(numerical(format!(
            "training loss became non-finite ({total_loss}) on a batch of {}",
            batch.len()
        )));
    }
    Ok((total_loss, total))
}

/// One SGD step on the adapter matrices only; base weights stay frozen.
///
/// Returns the batch loss before the update.
pub fn lora_train_step(
    model: &mut TinyDit,
    batch: &[TrainSample],
    schedule: &NoiseSchedule,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = dit_loss_and_grads(model, batch, schedule, true)?;
    let mut updates: Vec<(String, Mat, Mat)> = Vec::new();
    for (name, adapter) in model.adapters.iter() {
        if let Some(g) = grads.get(name) {
            // d(eff W) projected onto the factors of gamma B A.
            let d_up = g.w.matmul_nt(&adapter.down).scaled(adapter.gamma);
            let d_down = adapter.up.matmul_tn(&g.w).scaled(adapter.gamma);
            updates.push((name.clone(), d_down, d_up));
        }
    }
    for (name, d_down, d_up) in updates {
        let adapter = model.adapters.get_mut(&name).unwrap();
        for (w, g) in adapter.down.data_mut().iter_mut().zip(d_down.data()) {
            *w -= lr * g;
        }
        for (w, g) in adapter.up.data_mut().iter_mut().zip(d_up.data()) {
            *w -= lr * g;
        }
    }
    Ok(loss)
}

/// One SGD step on every linear layer (full-weight training).
pub fn train_dit(
    model: &mut TinyDit,
    batch: &[TrainSample],
    schedule: &NoiseSchedule,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = dit_loss_and_grads(model, batch, schedule, true)?;
    for (name, g) in grads {
        let layer = model
            .layer_mut(&name)
            .ok_or_else(|| invalid(format!("gradient for unknown layer {name:?}")))?;
        for (w, gv) in layer.weight.data_mut().iter_mut().zip(g.w.data()) {
            *w -= lr * gv;
        }
        for (b, gv) in layer.bias.iter_mut().zip(&g.b) {
            *b -= lr * gv;
        }
    }
    Ok(loss)
}
