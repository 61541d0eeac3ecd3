//! The tiny latent video denoiser `ε_θ(z_t, c, t)`.
//!
//! Token layout: the latent `F×H×W×C` is flattened to `F·H·W` rows of `C`
//! channels, frame-major. Each spatial transformer block runs self-attention
//! within a frame, cross-attention to the text condition and a feed-forward
//! layer; a temporal attention layer over the frame axis follows every block.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::latent::{LatentShape, LatentVideo};
use crate::lora::{AdapterSet, LoraAdapter};
use crate::nn::{
    self, layer_norm, layer_norm_backward, rows_view, scatter, scatter_add, sinusoid, Grouping,
    Linear, LoraGrad,
};
use crate::schedule::{build_noise_schedule, NoiseSchedule, ScheduleKind};

/// Text conditioning tokens, `L × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding(Array2<f64>);

impl ConditionEmbedding {
    pub fn new(tokens: Array2<f64>) -> Result<Self> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(invalid!("condition embedding must have at least one token"));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("condition embedding contains non-finite entries"));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_noise_schedule(self.steps, self.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent channels `C`.
    pub channels: usize,
    /// Hidden token width.
    pub width: usize,
    /// Conditioning embedding dimension.
    pub cond_dim: usize,
    pub spatial_blocks: usize,
    /// Feed-forward hidden width as a multiple of `width`.
    pub ff_mult: usize,
    pub schedule: ScheduleConfig,
    /// Seed for the base-weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            width: 16,
            cond_dim: 16,
            spatial_blocks: 2,
            ff_mult: 2,
            schedule: ScheduleConfig {
                steps: 50,
                kind: ScheduleKind::LinearSignal,
            },
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.width == 0 || self.cond_dim == 0 || self.ff_mult == 0 {
            return Err(invalid!("model dimensions must be positive"));
        }
        if !self.width.is_multiple_of(2) {
            return Err(invalid!("model width must be even, got {}", self.width));
        }
        if self.schedule.steps == 0 {
            return Err(invalid!("schedule needs at least one step"));
        }
        Ok(())
    }
}

/// Which sublayer of a spatial transformer block a projection lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SublayerKind {
    SelfAttention,
    CrossAttention,
}

/// Query/key/value/output projections of one attention sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub(crate) to_q: Linear,
    pub(crate) to_k: Linear,
    pub(crate) to_v: Linear,
    pub(crate) to_out: Linear,
}

impl Attention {
    fn init(
        id: &str,
        width: usize,
        kv_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            to_q: Linear::init(format!("{id}.to_q"), width, width, false, 1.0, rng),
            to_k: Linear::init(format!("{id}.to_k"), width, kv_dim, false, 1.0, rng),
            to_v: Linear::init(format!("{id}.to_v"), width, kv_dim, false, 1.0, rng),
            to_out: Linear::init(format!("{id}.to_out"), width, width, true, 1.0, rng),
        }
    }

    /// The three adaptable projections in q, k, v order.
    pub fn qkv(&self) -> [&Linear; 3] {
        [&self.to_q, &self.to_k, &self.to_v]
    }

    fn qkv_mut(&mut self) -> [&mut Linear; 3] {
        [&mut self.to_q, &mut self.to_k, &mut self.to_v]
    }

    pub fn output(&self) -> &Linear {
        &self.to_out
    }

    fn adapters<'a>(&self, set: Option<&'a AdapterSet>) -> [Option<&'a LoraAdapter>; 3] {
        match set {
            None => [None; 3],
            Some(s) => self.qkv().map(|p| s.get(&p.weight_id())),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, ArrayViewD<'a, f64>)) {
        self.to_q.visit(f);
        self.to_k.visit(f);
        self.to_v.visit(f);
        self.to_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.to_q.visit_mut(f);
        self.to_k.visit_mut(f);
        self.to_v.visit_mut(f);
        self.to_out.visit_mut(f);
    }

    fn forward(
        &self,
        x: &Array2<f64>,
        context: Option<&Array2<f64>>,
        grouping: Grouping,
        adapters: [Option<&LoraAdapter>; 3],
        lora_scale: f64,
    ) -> (Array2<f64>, AttnCache) {
        let (q, uq) = self.to_q.forward_lora(x.view(), adapters[0], lora_scale);
        let src = context.unwrap_or(x);
        let (k, uk) = self.to_k.forward_lora(src.view(), adapters[1], lora_scale);
        let (v, uv) = self.to_v.forward_lora(src.view(), adapters[2], lora_scale);
        let groups = grouping.groups(x.nrows());
        let mut o = Array2::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(groups.len());
        for rows in &groups {
            let qg = rows_view(&q, rows);
            let core = if context.is_some() {
                nn::attend(qg.view(), k.view(), v.view())
            } else {
                let kg = rows_view(&k, rows);
                let vg = rows_view(&v, rows);
                nn::attend(qg.view(), kg.view(), vg.view())
            };
            scatter(&mut o, rows, core.o.view());
            probs.push(core.p);
        }
        let out = self.to_out.forward(o.view());
        let cache = AttnCache {
            x: x.clone(),
            context: context.cloned(),
            q,
            k,
            v,
            rank_acts: [uq, uk, uv],
            groups,
            probs,
        };
        (out, cache)
    }

    /// Returns `(dx, dcontext)`.
    fn backward(
        &self,
        cache: &AttnCache,
        dout: ArrayView2<'_, f64>,
        adapters: [Option<&LoraAdapter>; 3],
        lora_scale: f64,
        grads: &mut BTreeMap<String, LoraGrad>,
    ) -> (Array2<f64>, Option<Array2<f64>>) {
        let d_o = self.to_out.backward_input(dout);
        let cross = cache.context.is_some();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (rows, p) in cache.groups.iter().zip(&cache.probs) {
            let qg = rows_view(&cache.q, rows);
            let dog = rows_view(&d_o, rows);
            if cross {
                let (dqg, dkg, dvg) =
                    nn::attend_backward(qg.view(), cache.k.view(), cache.v.view(), p.view(), dog.view());
                scatter(&mut dq, rows, dqg.view());
                dk += &dkg;
                dv += &dvg;
            } else {
                let kg = rows_view(&cache.k, rows);
                let vg = rows_view(&cache.v, rows);
                let (dqg, dkg, dvg) =
                    nn::attend_backward(qg.view(), kg.view(), vg.view(), p.view(), dog.view());
                scatter(&mut dq, rows, dqg.view());
                scatter_add(&mut dk, rows, dkg.view());
                scatter_add(&mut dv, rows, dvg.view());
            }
        }
        let src = cache.context.as_ref().unwrap_or(&cache.x);
        let mut local = adapters.map(|a| a.map(LoraGrad::zeros_like));
        let [gq, gk, gv] = &mut local;
        let mut dx = self.to_q.backward_lora(
            cache.x.view(),
            dq.view(),
            adapters[0],
            lora_scale,
            cache.rank_acts[0].as_ref(),
            gq.as_mut(),
        );
        let mut dsrc = self.to_k.backward_lora(
            src.view(),
            dk.view(),
            adapters[1],
            lora_scale,
            cache.rank_acts[1].as_ref(),
            gk.as_mut(),
        );
        dsrc += &self.to_v.backward_lora(
            src.view(),
            dv.view(),
            adapters[2],
            lora_scale,
            cache.rank_acts[2].as_ref(),
            gv.as_mut(),
        );
        for (proj, g) in self.qkv().into_iter().zip(local) {
            if let Some(g) = g {
                match grads.entry(proj.weight_id()) {
                    std::collections::btree_map::Entry::Vacant(e) => {
                        e.insert(g);
                    }
                    std::collections::btree_map::Entry::Occupied(mut e) => {
                        e.get_mut().a += &g.a;
                        e.get_mut().b += &g.b;
                    }
                }
            }
        }
        if cross {
            (dx, Some(dsrc))
        } else {
            dx += &dsrc;
            (dx, None)
        }
    }
}

struct AttnCache {
    x: Array2<f64>,
    context: Option<Array2<f64>>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    rank_acts: [Option<Array2<f64>>; 3],
    groups: Vec<Vec<usize>>,
    probs: Vec<Array2<f64>>,
}

/// Self-attention, cross-attention and feed-forward, each pre-normed and residual.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTransformerBlock {
    pub(crate) self_attn: Attention,
    pub(crate) cross_attn: Attention,
    pub(crate) ff_in: Linear,
    pub(crate) ff_out: Linear,
}

impl SpatialTransformerBlock {
    pub fn sublayer(&self, kind: SublayerKind) -> &Attention {
        match kind {
            SublayerKind::SelfAttention => &self.self_attn,
            SublayerKind::CrossAttention => &self.cross_attn,
        }
    }

    fn sublayer_mut(&mut self, kind: SublayerKind) -> &mut Attention {
        match kind {
            SublayerKind::SelfAttention => &mut self.self_attn,
            SublayerKind::CrossAttention => &mut self.cross_attn,
        }
    }
}

/// Attention over the frame axis at each spatial location. Never adapted.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalAttention {
    pub(crate) attn: Attention,
}

impl TemporalAttention {
    pub fn attention(&self) -> &Attention {
        &self.attn
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    config: ModelConfig,
    pub(crate) conv_in: Linear,
    pub(crate) time_proj: Linear,
    pub(crate) spatial_blocks: Vec<SpatialTransformerBlock>,
    pub(crate) temporal_blocks: Vec<TemporalAttention>,
    pub(crate) conv_out: Linear,
}

struct BlockTrace {
    ln_self: (Array2<f64>, Array1<f64>),
    self_attn: AttnCache,
    ln_cross: (Array2<f64>, Array1<f64>),
    cross_attn: AttnCache,
    ln_ff: (Array2<f64>, Array1<f64>),
    ff_pre: Array2<f64>,
    ln_temporal: (Array2<f64>, Array1<f64>),
    temporal: AttnCache,
}

struct Trace {
    blocks: Vec<BlockTrace>,
    ln_out: (Array2<f64>, Array1<f64>),
}

/// Gradients of a scalar loss with respect to the trainable quantities.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Per adapter target id.
    pub adapters: BTreeMap<String, LoraGrad>,
    /// With respect to the conditioning tokens (`L × D`).
    pub context: Array2<f64>,
}

impl DenoiserModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w = config.width;
        let conv_in = Linear::init("conv_in", w, config.channels, true, 1.0, &mut rng);
        let time_proj = Linear::init("time_proj", w, w, true, 1.0, &mut rng);
        let mut spatial_blocks = Vec::with_capacity(config.spatial_blocks);
        let mut temporal_blocks = Vec::with_capacity(config.spatial_blocks);
        for i in 0..config.spatial_blocks {
            let id = format!("spatial.{i}");
            spatial_blocks.push(SpatialTransformerBlock {
                self_attn: Attention::init(&format!("{id}.self_attn"), w, w, &mut rng),
                cross_attn: Attention::init(&format!("{id}.cross_attn"), w, config.cond_dim, &mut rng),
                ff_in: Linear::init(format!("{id}.ff.proj_in"), w * config.ff_mult, w, true, 1.0, &mut rng),
                ff_out: Linear::init(format!("{id}.ff.proj_out"), w, w * config.ff_mult, true, 1.0, &mut rng),
            });
            temporal_blocks.push(TemporalAttention {
                attn: Attention::init(&format!("temporal.{i}.attn"), w, w, &mut rng),
            });
        }
        let conv_out = Linear::init("conv_out", config.channels, w, true, 1.0, &mut rng);
        Ok(Self {
            config,
            conv_in,
            time_proj,
            spatial_blocks,
            temporal_blocks,
            conv_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.config.schedule.build()
    }

    pub fn spatial_blocks(&self) -> &[SpatialTransformerBlock] {
        &self.spatial_blocks
    }

    pub fn temporal_blocks(&self) -> &[TemporalAttention] {
        &self.temporal_blocks
    }

    /// Visits every parameter in declaration order.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&str, ArrayViewD<'a, f64>)) {
        self.conv_in.visit(f);
        self.time_proj.visit(f);
        for (block, temporal) in self.spatial_blocks.iter().zip(&self.temporal_blocks) {
            block.self_attn.visit(f);
            block.cross_attn.visit(f);
            block.ff_in.visit(f);
            block.ff_out.visit(f);
            temporal.attn.visit(f);
        }
        self.conv_out.visit(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.conv_in.visit_mut(f);
        self.time_proj.visit_mut(f);
        for (block, temporal) in self.spatial_blocks.iter_mut().zip(&mut self.temporal_blocks) {
            block.self_attn.visit_mut(f);
            block.cross_attn.visit_mut(f);
            block.ff_in.visit_mut(f);
            block.ff_out.visit_mut(f);
            temporal.attn.visit_mut(f);
        }
        self.conv_out.visit_mut(f);
    }

    pub fn param_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        self.visit_params(&mut |id, _| ids.push(id.to_string()));
        ids
    }

    /// SHA-256 of each parameter's `f64` bit patterns, keyed by identifier.
    pub fn param_checksums(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        self.visit_params(&mut |id, view| {
            out.insert(id.to_string(), checksum(view.iter().copied()));
        });
        out
    }

    /// Identifiers of the Q/K/V projection weights of the given spatial sublayer kinds.
    pub fn spatial_projection_ids(&self, kinds: &[SublayerKind]) -> Vec<String> {
        let mut ids = Vec::new();
        for block in &self.spatial_blocks {
            for kind in [SublayerKind::SelfAttention, SublayerKind::CrossAttention] {
                if kinds.contains(&kind) {
                    ids.extend(block.sublayer(kind).qkv().iter().map(|p| p.weight_id()));
                }
            }
        }
        ids
    }

    /// Looks up a spatial Q/K/V projection by its weight identifier.
    pub fn spatial_projection(&self, weight_id: &str) -> Option<&Linear> {
        self.spatial_blocks.iter().find_map(|b| {
            [SublayerKind::SelfAttention, SublayerKind::CrossAttention]
                .iter()
                .flat_map(|&k| b.sublayer(k).qkv())
                .find(|p| p.weight_id() == weight_id)
        })
    }

    pub(crate) fn spatial_projection_mut(&mut self, weight_id: &str) -> Option<&mut Linear> {
        let kinds = [SublayerKind::SelfAttention, SublayerKind::CrossAttention];
        let (bi, kind, pi) = self.spatial_blocks.iter().enumerate().find_map(|(bi, b)| {
            kinds.iter().find_map(|&k| {
                b.sublayer(k)
                    .qkv()
                    .iter()
                    .position(|p| p.weight_id() == weight_id)
                    .map(|pi| (bi, k, pi))
            })
        })?;
        let [q, k, v] = self.spatial_blocks[bi].sublayer_mut(kind).qkv_mut();
        Some(match pi {
            0 => q,
            1 => k,
            _ => v,
        })
    }

    fn check_inputs(&self, z_t: &LatentVideo, c: &ConditionEmbedding) -> Result<()> {
        let shape = z_t.shape();
        if shape.channels != self.config.channels {
            return Err(invalid!(
                "latent has {} channels, model expects {}",
                shape.channels,
                self.config.channels
            ));
        }
        if c.dim() != self.config.cond_dim {
            return Err(invalid!(
                "condition embedding dim {} does not match model conditioning dim {}",
                c.dim(),
                self.config.cond_dim
            ));
        }
        Ok(())
    }

    fn embed_input(&self, z_t: &LatentVideo, level: f64) -> Array2<f64> {
        let shape = z_t.shape();
        let w = self.config.width;
        let mut h = self.conv_in.forward(z_t.tokens());
        let temb = self
            .time_proj
            .forward(sinusoid(level * 1000.0, w).insert_axis(Axis(0)).view());
        h += &temb;
        let pos = spatial_position_encoding(shape, w);
        for mut frame in h.axis_chunks_iter_mut(Axis(0), shape.tokens_per_frame()) {
            frame += &pos;
        }
        h
    }

    fn run(
        &self,
        z_t: &LatentVideo,
        context: &Array2<f64>,
        level: f64,
        adapters: Option<&AdapterSet>,
        lora_scale: f64,
        record: bool,
    ) -> (Array2<f64>, Option<Trace>) {
        let shape = z_t.shape();
        let hw = shape.tokens_per_frame();
        let frame_pe = frame_position_encoding(shape, self.config.width);
        let mut h = self.embed_input(z_t, level);
        let mut blocks = Vec::new();
        for (block, temporal) in self.spatial_blocks.iter().zip(&self.temporal_blocks) {
            let ln_self = layer_norm(h.view());
            let (a, self_cache) = block.self_attn.forward(
                &ln_self.0,
                None,
                Grouping::Contiguous { len: hw },
                block.self_attn.adapters(adapters),
                lora_scale,
            );
            h += &a;

            let ln_cross = layer_norm(h.view());
            let (a, cross_cache) = block.cross_attn.forward(
                &ln_cross.0,
                Some(context),
                Grouping::Shared,
                block.cross_attn.adapters(adapters),
                lora_scale,
            );
            h += &a;

            let ln_ff = layer_norm(h.view());
            let ff_pre = block.ff_in.forward(ln_ff.0.view());
            h += &block.ff_out.forward(ff_pre.mapv(nn::silu).view());

            let ln_temporal = layer_norm(h.view());
            let t_in = &ln_temporal.0 + &frame_pe;
            let (a, temporal_cache) = temporal.attn.forward(
                &t_in,
                None,
                Grouping::Strided { stride: hw },
                [None; 3],
                0.0,
            );
            h += &a;

            if record {
                blocks.push(BlockTrace {
                    ln_self,
                    self_attn: self_cache,
                    ln_cross,
                    cross_attn: cross_cache,
                    ln_ff,
                    ff_pre,
                    ln_temporal,
                    temporal: temporal_cache,
                });
            }
        }
        let ln_out = layer_norm(h.view());
        let y = self.conv_out.forward(ln_out.0.view());
        let trace = record.then_some(Trace { blocks, ln_out });
        (y, trace)
    }

    fn backward(
        &self,
        trace: &Trace,
        dy: ArrayView2<'_, f64>,
        context_len: usize,
        adapters: Option<&AdapterSet>,
        lora_scale: f64,
    ) -> Gradients {
        let mut grads = BTreeMap::new();
        let mut dcontext = Array2::zeros((context_len, self.config.cond_dim));
        let d_ln = self.conv_out.backward_input(dy);
        let mut dh = layer_norm_backward(trace.ln_out.0.view(), &trace.ln_out.1, d_ln.view());
        let layers = self.spatial_blocks.iter().zip(&self.temporal_blocks).zip(&trace.blocks);
        for ((block, temporal), bt) in layers.rev() {
            // temporal: the additive frame encoding passes gradients through unchanged
            let (dt, _) = temporal
                .attn
                .backward(&bt.temporal, dh.view(), [None; 3], 0.0, &mut grads);
            dh += &layer_norm_backward(bt.ln_temporal.0.view(), &bt.ln_temporal.1, dt.view());

            let d_act = block.ff_out.backward_input(dh.view());
            let mut d_pre = d_act;
            ndarray::Zip::from(&mut d_pre)
                .and(&bt.ff_pre)
                .for_each(|g, &x| *g *= nn::silu_grad(x));
            let d_ln = block.ff_in.backward_input(d_pre.view());
            dh += &layer_norm_backward(bt.ln_ff.0.view(), &bt.ln_ff.1, d_ln.view());

            let (dx, dctx) = block.cross_attn.backward(
                &bt.cross_attn,
                dh.view(),
                block.cross_attn.adapters(adapters),
                lora_scale,
                &mut grads,
            );
            dh += &layer_norm_backward(bt.ln_cross.0.view(), &bt.ln_cross.1, dx.view());
            if let Some(dctx) = dctx {
                dcontext += &dctx;
            }

            let (dx, _) = block.self_attn.backward(
                &bt.self_attn,
                dh.view(),
                block.self_attn.adapters(adapters),
                lora_scale,
                &mut grads,
            );
            dh += &layer_norm_backward(bt.ln_self.0.view(), &bt.ln_self.1, dx.view());
        }
        Gradients {
            adapters: grads,
            context: dcontext,
        }
    }

    /// Noise prediction at a continuous noise level in `(0, 1]` (`t / T`).
    pub fn predict_noise_at_level(
        &self,
        z_t: &LatentVideo,
        c: &ConditionEmbedding,
        level: f64,
        adapters: Option<&AdapterSet>,
        lora_scale: f64,
    ) -> Result<LatentVideo> {
        self.check_inputs(z_t, c)?;
        if let Some(set) = adapters {
            set.check_attached(self)?;
        }
        let (y, _) = self.run(z_t, c.tokens(), level, adapters, lora_scale, false);
        Ok(tokens_to_latent(y, z_t.shape()))
    }

    /// Evaluates `mean((ε − ε_θ)²)` and its gradient with respect to every
    /// attached adapter matrix and to the conditioning tokens.
    pub fn loss_and_gradients(
        &self,
        z_t: &LatentVideo,
        c: &ConditionEmbedding,
        t: usize,
        eps: &LatentVideo,
        adapters: Option<&AdapterSet>,
        lora_scale: f64,
    ) -> Result<(f64, Gradients)> {
        self.check_inputs(z_t, c)?;
        z_t.ensure_same_shape(eps, "loss_and_gradients")?;
        let level = self.level_of(t)?;
        if let Some(set) = adapters {
            set.check_attached(self)?;
        }
        let (y, trace) = self.run(z_t, c.tokens(), level, adapters, lora_scale, true);
        let n = y.len() as f64;
        let diff = &y - &eps.tokens();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let dy = diff * (2.0 / n);
        let trace = trace.expect("recorded");
        let grads = self.backward(&trace, dy.view(), c.len(), adapters, lora_scale);
        Ok((loss, grads))
    }

    pub(crate) fn level_of(&self, t: usize) -> Result<f64> {
        let steps = self.config.schedule.steps;
        if t == 0 || t > steps {
            return Err(invalid!("timestep {t} outside schedule range 1..={steps}"));
        }
        Ok(t as f64 / steps as f64)
    }

    /// Copy with the given projection weight replaced. Used for merging.
    pub(crate) fn with_projection(&self, weight_id: &str, weight: Array2<f64>) -> Result<Self> {
        let mut out = self.clone();
        let p = out
            .spatial_projection_mut(weight_id)
            .ok_or_else(|| Error::InvalidState(format!("model has no projection `{weight_id}`")))?;
        if p.weight.raw_dim() != weight.raw_dim() {
            return Err(Error::InvalidState(format!(
                "shape mismatch for `{weight_id}`"
            )));
        }
        p.weight = weight;
        Ok(out)
    }
}

/// `ε_θ(z_t, c, t)` for integer `t` in the model's training schedule.
pub fn predict_noise(
    model: &DenoiserModel,
    z_t: &LatentVideo,
    c: &ConditionEmbedding,
    t: usize,
    adapters: Option<&AdapterSet>,
    lora_scale: f64,
) -> Result<LatentVideo> {
    let level = model.level_of(t)?;
    model.predict_noise_at_level(z_t, c, level, adapters, lora_scale)
}

/// Mean squared difference over all elements.
pub fn video_loss(eps: &LatentVideo, eps_pred: &LatentVideo) -> Result<f64> {
    eps.ensure_same_shape(eps_pred, "video_loss")?;
    let n = eps.shape().len() as f64;
    Ok(eps
        .as_slice()
        .iter()
        .zip(eps_pred.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

fn tokens_to_latent(y: Array2<f64>, shape: LatentShape) -> LatentVideo {
    let data = y
        .into_shape_with_order(shape.dims())
        .expect("token count matches latent shape");
    LatentVideo::from_raw(data)
}

/// Sinusoidal 2-D position code, `H·W × width`: first half encodes the row, second the column.
pub(crate) fn spatial_position_encoding(shape: LatentShape, width: usize) -> Array2<f64> {
    let half = width / 2;
    let mut pe = Array2::zeros((shape.tokens_per_frame(), width));
    for y in 0..shape.height {
        for x in 0..shape.width {
            let mut row = pe.row_mut(y * shape.width + x);
            row.slice_mut(ndarray::s![..half])
                .assign(&sinusoid(y as f64, half));
            row.slice_mut(ndarray::s![half..])
                .assign(&sinusoid(x as f64, width - half));
        }
    }
    pe
}

/// Sinusoidal frame-index code broadcast to every token, `F·H·W × width`.
pub(crate) fn frame_position_encoding(shape: LatentShape, width: usize) -> Array2<f64> {
    let hw = shape.tokens_per_frame();
    let mut pe = Array2::zeros((shape.frames * hw, width));
    for f in 0..shape.frames {
        let code = sinusoid(f as f64, width);
        for r in 0..hw {
            pe.row_mut(f * hw + r).assign(&code);
        }
    }
    pe
}

pub(crate) fn checksum(values: impl Iterator<Item = f64>) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_bits().to_le_bytes());
    }
    hex::encode(hasher.finalize())
}
