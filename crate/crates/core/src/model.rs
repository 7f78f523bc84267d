//! Conditional U-Net noise predictor with hookable attention.
//!
//! Every attention layer offers its Q/K/V packet (and the default attention
//! output) to a [`Controller`] which may substitute the result; decoder
//! residual blocks offer their spatial features the same way. Cross-attention
//! maps are recorded on every single-item forward for mask extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Conv2d, CrossAttention, Embedding, GroupNorm, Linear, Params, ResBlock, SelfAttention};
use crate::rng::Rng;
use crate::tensor::{Elem, Tensor};
use crate::vocab::{self, PROMPT_LEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub widths: Vec<usize>,
    pub blocks_per_level: usize,
    pub attn_resolutions: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub prompt_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            widths: vec![32, 64, 128],
            blocks_per_level: 2,
            attn_resolutions: vec![16, 8],
            heads: 4,
            head_dim: 16,
            prompt_dim: 64,
            time_dim: 128,
            groups: 8,
        }
    }
}

impl ModelConfig {
    /// Compact variant used for the shipped checkpoint; trains on CPU in
    /// reasonable time while keeping attention at 16x16 and 8x8.
    pub fn small() -> Self {
        ModelConfig {
            image_size: 32,
            widths: vec![12, 24, 48],
            blocks_per_level: 1,
            attn_resolutions: vec![16, 8],
            heads: 2,
            head_dim: 8,
            prompt_dim: 48,
            time_dim: 48,
            groups: 4,
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn resolution_at(&self, level: usize) -> usize {
        self.image_size >> level
    }

    pub fn has_attn(&self, level: usize) -> bool {
        self.attn_resolutions.contains(&self.resolution_at(level))
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l == 0 {
            return Err(Error::InvalidArg { op: "ModelConfig", msg: "widths empty".into() });
        }
        if self.image_size % (1 << (l - 1)) != 0 {
            return Err(Error::InvalidArg {
                op: "ModelConfig",
                msg: format!("image_size {} not divisible by 2^{}", self.image_size, l - 1),
            });
        }
        for (i, &w) in self.widths.iter().enumerate() {
            if w % self.groups != 0 {
                return Err(Error::InvalidArg {
                    op: "ModelConfig",
                    msg: format!("width {w} not divisible by groups {}", self.groups),
                });
            }
            if self.has_attn(i) && w % self.heads != 0 {
                return Err(Error::InvalidArg {
                    op: "ModelConfig",
                    msg: format!("width {w} at attention resolution not divisible by heads {}", self.heads),
                });
            }
        }
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::InvalidArg { op: "ModelConfig", msg: "heads and head_dim must be positive".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnKind {
    SelfAttn,
    CrossAttn,
}

/// Q/K/V of one attention layer, exposed per head as [heads, N, d].
#[derive(Debug, Clone)]
pub struct AttentionPacket<T: Elem = f32> {
    pub layer: u32,
    pub kind: AttnKind,
    pub resolution: usize,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

/// Head-averaged cross-attention weights of one layer: [N_queries, L] rows
/// summing to one.
#[derive(Debug, Clone)]
pub struct CrossAttnMaps<T: Elem = f32> {
    pub layer: u32,
    pub resolution: usize,
    pub weights: Tensor<T>,
}

impl<T: Elem> CrossAttnMaps<T> {
    /// Spatial map of one prompt slot, shaped [res, res].
    pub fn token_map(&self, slot: usize) -> Tensor<T> {
        let n = self.weights.dim(0);
        let l = self.weights.dim(1);
        assert!(slot < l, "token slot out of range");
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(self.weights.data()[i * l + slot]);
        }
        Tensor::from_vec_unchecked(vec![self.resolution, self.resolution], data)
    }
}

/// Hook interface for attention and spatial-feature interception.
pub trait Controller<T: Elem> {
    /// When false the model skips packet materialization entirely.
    fn wants_hooks(&self) -> bool {
        true
    }

    /// Offered at every attention layer together with the already-computed
    /// default output [heads, N, d]. Returning a tensor substitutes it.
    fn on_attention(
        &mut self,
        _packet: &AttentionPacket<T>,
        _default_out: &Tensor<T>,
    ) -> Result<Option<Tensor<T>>> {
        Ok(None)
    }

    /// Offered at every decoder residual block output ([1, C, H, W]).
    fn on_spatial(&mut self, _layer: u32, _features: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        Ok(None)
    }
}

/// Baseline controller: standard attention everywhere.
pub struct NullController;

impl<T: Elem> Controller<T> for NullController {
    fn wants_hooks(&self) -> bool {
        false
    }
}

/// Forward-pass context threading the graph, the controller, and per-pass
/// layer numbering through the layer stack.
pub struct Ctx<'g, 'c, T: Elem> {
    pub g: &'g mut Graph<T>,
    controller: &'c mut dyn Controller<T>,
    tracked: Option<Vec<(String, Var)>>,
    cross_maps: Vec<CrossAttnMaps<T>>,
    attn_next: u32,
    spatial_next: u32,
    pub(crate) in_decoder: bool,
    batch: usize,
}

impl<'g, 'c, T: Elem> Ctx<'g, 'c, T> {
    pub fn param(&mut self, name: String, t: &Tensor<T>) -> Var {
        let v = self.g.leaf(t.clone());
        if let Some(tr) = &mut self.tracked {
            tr.push((name, v));
        }
        v
    }

    pub fn next_attn_layer(&mut self) -> u32 {
        let l = self.attn_next;
        self.attn_next += 1;
        l
    }

    pub fn controller_active(&self) -> bool {
        self.controller.wants_hooks()
    }

    pub fn offer_attention(
        &mut self,
        packet: &AttentionPacket<T>,
        default_out: &Tensor<T>,
    ) -> Result<Option<Tensor<T>>> {
        self.controller.on_attention(packet, default_out)
    }

    pub fn record_cross_maps(&mut self, layer: u32, resolution: usize, weights: Tensor<T>) {
        self.cross_maps.push(CrossAttnMaps { layer, resolution, weights });
    }

    /// Decoder residual-block features: enumerate, offer, maybe substitute.
    pub fn offer_spatial(&mut self, features: Var) -> Result<Var> {
        if !self.in_decoder {
            return Ok(features);
        }
        let layer = self.spatial_next;
        self.spatial_next += 1;
        if self.batch != 1 || !self.controller.wants_hooks() {
            return Ok(features);
        }
        let val = self.g.value(features);
        let shape = val.shape().to_vec();
        let snapshot = val.clone();
        match self.controller.on_spatial(layer, &snapshot)? {
            Some(repl) => {
                if repl.shape() != shape.as_slice() {
                    return Err(Error::ControllerShape {
                        layer,
                        got: repl.shape().to_vec(),
                        expected: shape,
                    });
                }
                repl.check_finite("controller spatial output")?;
                Ok(self.g.leaf(repl))
            }
            None => Ok(features),
        }
    }
}

/// Sinusoidal embedding of integer timesteps, [B, dim].
pub fn time_embedding<T: Elem>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let tv = t as f64;
        for i in 0..half {
            let freq = (-(i as f64) / denom * (10000.0f64).ln()).exp();
            data.push(T::fl((tv * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(i as f64) / denom * (10000.0f64).ln()).exp();
            data.push(T::fl((tv * freq).cos()));
        }
    }
    Tensor::from_vec_unchecked(vec![ts.len(), dim], data)
}

/// Token ids plus a snapshot of the looked-up embedding rows.
#[derive(Debug, Clone)]
pub struct PromptEmbedding<T: Elem = f32> {
    pub ids: [usize; PROMPT_LEN],
    pub rows: Tensor<T>,
}

struct AttnPair<T: Elem> {
    sattn: SelfAttention<T>,
    cattn: CrossAttention<T>,
}

struct Unit<T: Elem> {
    res: ResBlock<T>,
    attn: Option<AttnPair<T>>,
}

struct EncLevel<T: Elem> {
    units: Vec<Unit<T>>,
    down: Option<Conv2d<T>>,
}

struct DecLevel<T: Elem> {
    units: Vec<Unit<T>>,
    up: Option<Conv2d<T>>,
}

pub struct ForwardOutput<T: Elem> {
    pub eps: Var,
    pub tracked: Vec<(String, Var)>,
    pub cross_maps: Vec<CrossAttnMaps<T>>,
    /// Output var of each encoder level (before downsampling).
    pub enc_levels: Vec<Var>,
}

pub struct UNet<T: Elem = f32> {
    pub cfg: ModelConfig,
    tok: Embedding<T>,
    time1: Linear<T>,
    time2: Linear<T>,
    stem: Conv2d<T>,
    enc: Vec<EncLevel<T>>,
    mid_r1: ResBlock<T>,
    mid_attn: Option<AttnPair<T>>,
    mid_r2: ResBlock<T>,
    dec: Vec<DecLevel<T>>,
    out_norm: GroupNorm<T>,
    out_conv: Conv2d<T>,
}

impl<T: Elem> UNet<T> {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.levels();
        let td = cfg.time_dim;
        let gr = cfg.groups;

        let tok = Embedding::new(rng, vocab::vocab_size(), cfg.prompt_dim);
        let time1 = Linear::new(rng, td, td);
        let time2 = Linear::new(rng, td, td);
        let stem = Conv2d::new(rng, 3, cfg.widths[0], 3, 1, 1);

        let attn_pair = |rng: &mut Rng, ch: usize| AttnPair {
            sattn: SelfAttention::new(rng, ch, cfg.heads, cfg.head_dim, gr),
            cattn: CrossAttention::new(rng, ch, cfg.prompt_dim, cfg.heads, cfg.head_dim, gr),
        };

        let mut skips = vec![cfg.widths[0]];
        let mut ch = cfg.widths[0];
        let mut enc = Vec::new();
        for i in 0..levels {
            let mut units = Vec::new();
            for _ in 0..cfg.blocks_per_level {
                let res = ResBlock::new(rng, ch, cfg.widths[i], td, gr);
                ch = cfg.widths[i];
                let attn = cfg.has_attn(i).then(|| attn_pair(rng, ch));
                units.push(Unit { res, attn });
                skips.push(ch);
            }
            let down = (i + 1 < levels).then(|| {
                skips.push(ch);
                Conv2d::new(rng, ch, ch, 3, 2, 1)
            });
            enc.push(EncLevel { units, down });
        }

        let mid_r1 = ResBlock::new(rng, ch, ch, td, gr);
        let mid_attn = cfg.has_attn(levels - 1).then(|| attn_pair(rng, ch));
        let mid_r2 = ResBlock::new(rng, ch, ch, td, gr);

        let mut dec = Vec::new();
        for i in (0..levels).rev() {
            let mut units = Vec::new();
            for _ in 0..cfg.blocks_per_level + 1 {
                let skip_ch = skips.pop().expect("skip bookkeeping");
                let res = ResBlock::new(rng, ch + skip_ch, cfg.widths[i], td, gr);
                ch = cfg.widths[i];
                let attn = cfg.has_attn(i).then(|| attn_pair(rng, ch));
                units.push(Unit { res, attn });
            }
            let up = (i > 0).then(|| Conv2d::new(rng, ch, ch, 3, 1, 1));
            dec.push(DecLevel { units, up });
        }
        assert!(skips.is_empty(), "unconsumed skip connections");

        let out_norm = GroupNorm::new(ch, gr);
        let out_conv = Conv2d::new_zeroed(ch, 3, 3, 1, 1);

        Ok(UNet {
            cfg,
            tok,
            time1,
            time2,
            stem,
            enc,
            mid_r1,
            mid_attn,
            mid_r2,
            dec,
            out_norm,
            out_conv,
        })
    }

    /// Number of self-attention layers visited per forward pass.
    pub fn self_attn_layer_count(&self) -> usize {
        let enc: usize = self.enc.iter().map(|l| l.units.iter().filter(|u| u.attn.is_some()).count()).sum();
        let dec: usize = self.dec.iter().map(|l| l.units.iter().filter(|u| u.attn.is_some()).count()).sum();
        enc + dec + usize::from(self.mid_attn.is_some())
    }

    /// Attention layer ids (shared self/cross numbering) that are
    /// self-attention sites, in forward order.
    pub fn self_attn_layer_ids(&self) -> Vec<u32> {
        let mut ids = Vec::new();
        let mut next = 0u32;
        let mut walk = |has_attn: bool| {
            if has_attn {
                ids.push(next);
                next += 2; // self then cross share the counter
            }
        };
        for l in &self.enc {
            for u in &l.units {
                walk(u.attn.is_some());
            }
        }
        walk(self.mid_attn.is_some());
        for l in &self.dec {
            for u in &l.units {
                walk(u.attn.is_some());
            }
        }
        ids
    }

    /// Resolution of each self-attention layer id.
    pub fn self_attn_layer_resolutions(&self) -> Vec<(u32, usize)> {
        let mut out = Vec::new();
        let mut next = 0u32;
        let cfg = &self.cfg;
        let mut walk = |has: bool, res: usize| {
            if has {
                out.push((next, res));
                next += 2;
            }
        };
        for (i, l) in self.enc.iter().enumerate() {
            for u in &l.units {
                walk(u.attn.is_some(), cfg.resolution_at(i));
            }
        }
        walk(self.mid_attn.is_some(), cfg.resolution_at(cfg.levels() - 1));
        for (di, l) in self.dec.iter().enumerate() {
            let level = cfg.levels() - 1 - di;
            for u in &l.units {
                walk(u.attn.is_some(), cfg.resolution_at(level));
            }
        }
        out
    }

    /// Deterministic prompt-row lookup.
    pub fn embed_prompt(&self, tokens: &[usize]) -> Result<PromptEmbedding<T>> {
        if tokens.len() > PROMPT_LEN {
            return Err(Error::InvalidArg {
                op: "embed_prompt",
                msg: format!("at most {PROMPT_LEN} tokens, got {}", tokens.len()),
            });
        }
        let mut ids = [vocab::NULL_TOKEN; PROMPT_LEN];
        for (slot, &t) in tokens.iter().enumerate() {
            if t >= vocab::vocab_size() {
                return Err(Error::UnknownToken(format!("id {t}")));
            }
            ids[slot] = t;
        }
        let pd = self.cfg.prompt_dim;
        let mut rows = Vec::with_capacity(PROMPT_LEN * pd);
        for &id in &ids {
            rows.extend_from_slice(&self.tok.table.data()[id * pd..(id + 1) * pd]);
        }
        Ok(PromptEmbedding {
            ids,
            rows: Tensor::from_vec_unchecked(vec![PROMPT_LEN, pd], rows),
        })
    }

    /// Full forward pass on the given graph.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        z: &Tensor<T>,
        ts: &[usize],
        prompts: &[[usize; PROMPT_LEN]],
        controller: &mut dyn Controller<T>,
        track_params: bool,
    ) -> Result<ForwardOutput<T>> {
        let s = self.cfg.image_size;
        if z.rank() != 4 || z.dim(1) != 3 || z.dim(2) != s || z.dim(3) != s {
            return Err(Error::InvalidArg {
                op: "UNet::forward",
                msg: format!("expected [B,3,{s},{s}], got {:?}", z.shape()),
            });
        }
        let b = z.dim(0);
        if ts.len() != b || prompts.len() != b {
            return Err(Error::InvalidArg {
                op: "UNet::forward",
                msg: format!("batch {b} but {} timesteps / {} prompts", ts.len(), prompts.len()),
            });
        }

        let mut ctx = Ctx {
            g,
            controller,
            tracked: track_params.then(Vec::new),
            cross_maps: Vec::new(),
            attn_next: 0,
            spatial_next: 0,
            in_decoder: false,
            batch: b,
        };

        let z_var = ctx.g.leaf(z.clone());
        let temb_raw = time_embedding::<T>(ts, self.cfg.time_dim);
        let temb_leaf = ctx.g.leaf(temb_raw);
        let t1 = self.time1.forward(&mut ctx, "time.l1", temb_leaf)?;
        let t1a = ctx.g.silu(t1);
        let t2 = self.time2.forward(&mut ctx, "time.l2", t1a)?;
        let temb_act = ctx.g.silu(t2);

        let ids_flat: Vec<usize> = prompts.iter().flat_map(|p| p.iter().copied()).collect();
        let pvar = self.tok.forward(&mut ctx, "tok", &ids_flat, b, PROMPT_LEN)?;

        let mut h = self.stem.forward(&mut ctx, "stem", z_var)?;
        let mut skips = vec![h];
        let mut enc_levels = Vec::new();
        for (i, level) in self.enc.iter().enumerate() {
            for (j, unit) in level.units.iter().enumerate() {
                h = unit.res.forward(&mut ctx, &format!("enc{i}.b{j}.res"), h, temb_act)?;
                if let Some(ap) = &unit.attn {
                    h = ap.sattn.forward(&mut ctx, &format!("enc{i}.b{j}.sattn"), h)?;
                    h = ap.cattn.forward(&mut ctx, &format!("enc{i}.b{j}.cattn"), h, pvar)?;
                }
                skips.push(h);
            }
            enc_levels.push(h);
            if let Some(down) = &level.down {
                h = down.forward(&mut ctx, &format!("enc{i}.down"), h)?;
                skips.push(h);
            }
        }

        h = self.mid_r1.forward(&mut ctx, "mid.r1", h, temb_act)?;
        if let Some(ap) = &self.mid_attn {
            h = ap.sattn.forward(&mut ctx, "mid.sattn", h)?;
            h = ap.cattn.forward(&mut ctx, "mid.cattn", h, pvar)?;
        }
        h = self.mid_r2.forward(&mut ctx, "mid.r2", h, temb_act)?;

        ctx.in_decoder = true;
        for (di, level) in self.dec.iter().enumerate() {
            let i = self.cfg.levels() - 1 - di;
            for (j, unit) in level.units.iter().enumerate() {
                let sk = skips.pop().expect("skip stack");
                let cat = ctx.g.concat_ch(h, sk)?;
                h = unit.res.forward(&mut ctx, &format!("dec{i}.b{j}.res"), cat, temb_act)?;
                if let Some(ap) = &unit.attn {
                    h = ap.sattn.forward(&mut ctx, &format!("dec{i}.b{j}.sattn"), h)?;
                    h = ap.cattn.forward(&mut ctx, &format!("dec{i}.b{j}.cattn"), h, pvar)?;
                }
            }
            if let Some(up) = &level.up {
                h = ctx.g.upsample2(h)?;
                h = up.forward(&mut ctx, &format!("dec{i}.up"), h)?;
            }
        }
        ctx.in_decoder = false;
        debug_assert!(skips.is_empty());

        h = self.out_norm.forward(&mut ctx, "out.norm", h)?;
        h = ctx.g.silu(h);
        let eps = self.out_conv.forward(&mut ctx, "out.conv", h)?;

        Ok(ForwardOutput {
            eps,
            tracked: ctx.tracked.unwrap_or_default(),
            cross_maps: ctx.cross_maps,
            enc_levels,
        })
    }

    /// Single-item inference: returns the noise prediction and the recorded
    /// cross-attention maps.
    pub fn predict_noise(
        &self,
        z: &Tensor<T>,
        t: usize,
        prompt: &[usize; PROMPT_LEN],
        controller: &mut dyn Controller<T>,
    ) -> Result<(Tensor<T>, Vec<CrossAttnMaps<T>>)> {
        let mut g = Graph::new(false);
        let out = self.forward(&mut g, z, &[t], &[*prompt], controller, false)?;
        let eps = g.value(out.eps).clone();
        eps.check_finite("predict_noise output")?;
        Ok((eps, out.cross_maps))
    }

    /// Encoder activations per level for a fixed timestep, used as the metric
    /// feature extractor.
    pub fn encoder_features(
        &self,
        z: &Tensor<T>,
        t: usize,
        prompt: &[usize; PROMPT_LEN],
        levels: &[usize],
    ) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new(false);
        let out = self.forward(&mut g, z, &[t], &[*prompt], &mut NullController, false)?;
        let mut feats = Vec::new();
        for &lv in levels {
            if lv >= out.enc_levels.len() {
                return Err(Error::InvalidArg {
                    op: "encoder_features",
                    msg: format!("level {lv} out of range ({})", out.enc_levels.len()),
                });
            }
            feats.push(g.value(out.enc_levels[lv]).clone());
        }
        Ok(feats)
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.time1.visit("time.l1", f);
        self.time2.visit("time.l2", f);
        self.tok.visit("tok", f);
        self.stem.visit("stem", f);
        for (i, level) in self.enc.iter().enumerate() {
            for (j, unit) in level.units.iter().enumerate() {
                unit.res.visit(&format!("enc{i}.b{j}.res"), f);
                if let Some(ap) = &unit.attn {
                    ap.sattn.visit(&format!("enc{i}.b{j}.sattn"), f);
                    ap.cattn.visit(&format!("enc{i}.b{j}.cattn"), f);
                }
            }
            if let Some(d) = &level.down {
                d.visit(&format!("enc{i}.down"), f);
            }
        }
        self.mid_r1.visit("mid.r1", f);
        if let Some(ap) = &self.mid_attn {
            ap.sattn.visit("mid.sattn", f);
            ap.cattn.visit("mid.cattn", f);
        }
        self.mid_r2.visit("mid.r2", f);
        for (di, level) in self.dec.iter().enumerate() {
            let i = self.cfg.levels() - 1 - di;
            for (j, unit) in level.units.iter().enumerate() {
                unit.res.visit(&format!("dec{i}.b{j}.res"), f);
                if let Some(ap) = &unit.attn {
                    ap.sattn.visit(&format!("dec{i}.b{j}.sattn"), f);
                    ap.cattn.visit(&format!("dec{i}.b{j}.cattn"), f);
                }
            }
            if let Some(u) = &level.up {
                u.visit(&format!("dec{i}.up"), f);
            }
        }
        self.out_norm.visit("out.norm", f);
        self.out_conv.visit("out.conv", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.time1.visit_mut("time.l1", f);
        self.time2.visit_mut("time.l2", f);
        self.tok.visit_mut("tok", f);
        self.stem.visit_mut("stem", f);
        for i in 0..self.enc.len() {
            for j in 0..self.enc[i].units.len() {
                self.enc[i].units[j].res.visit_mut(&format!("enc{i}.b{j}.res"), f);
                if let Some(ap) = &mut self.enc[i].units[j].attn {
                    ap.sattn.visit_mut(&format!("enc{i}.b{j}.sattn"), f);
                    ap.cattn.visit_mut(&format!("enc{i}.b{j}.cattn"), f);
                }
            }
            if let Some(d) = &mut self.enc[i].down {
                d.visit_mut(&format!("enc{i}.down"), f);
            }
        }
        self.mid_r1.visit_mut("mid.r1", f);
        if let Some(ap) = &mut self.mid_attn {
            ap.sattn.visit_mut("mid.sattn", f);
            ap.cattn.visit_mut("mid.cattn", f);
        }
        self.mid_r2.visit_mut("mid.r2", f);
        let levels = self.cfg.levels();
        for di in 0..self.dec.len() {
            let i = levels - 1 - di;
            for j in 0..self.dec[di].units.len() {
                self.dec[di].units[j].res.visit_mut(&format!("dec{i}.b{j}.res"), f);
                if let Some(ap) = &mut self.dec[di].units[j].attn {
                    ap.sattn.visit_mut(&format!("dec{i}.b{j}.sattn"), f);
                    ap.cattn.visit_mut(&format!("dec{i}.b{j}.cattn"), f);
                }
            }
            if let Some(u) = &mut self.dec[di].up {
                u.visit_mut(&format!("dec{i}.up"), f);
            }
        }
        self.out_norm.visit_mut("out.norm", f);
        self.out_conv.visit_mut("out.conv", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::small().validate().is_ok());
        let bad = ModelConfig { image_size: 30, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { heads: 5, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tracked_names_match_visit_names() {
        let cfg = ModelConfig {
            image_size: 16,
            widths: vec![8, 16],
            blocks_per_level: 1,
            attn_resolutions: vec![8],
            heads: 2,
            head_dim: 4,
            prompt_dim: 8,
            time_dim: 16,
            groups: 4,
        };
        let mut rng = Rng::new(3);
        let net = UNet::<f32>::new(cfg, &mut rng).unwrap();
        let mut visit_names = Vec::new();
        net.visit(&mut |n, _| visit_names.push(n.to_string()));

        let mut g = Graph::new(true);
        let z = Tensor::zeros(&[1, 3, 16, 16]);
        let out = net
            .forward(&mut g, &z, &[0], &[[0; PROMPT_LEN]], &mut NullController, true)
            .unwrap();
        let tracked: Vec<String> = out.tracked.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(visit_names, tracked);
    }

    #[test]
    fn embed_prompt_lookup() {
        let mut rng = Rng::new(1);
        let net = UNet::<f32>::new(ModelConfig::small(), &mut rng).unwrap();
        // Null-padded prompt repeats row zero.
        let e = net.embed_prompt(&[]).unwrap();
        let pd = net.cfg.prompt_dim;
        let row0 = &e.rows.data()[..pd];
        for s in 1..PROMPT_LEN {
            assert_eq!(row0, &e.rows.data()[s * pd..(s + 1) * pd]);
        }
        // Specific ids pick their table rows.
        let ids = [
            crate::vocab::token_id("red").unwrap(),
            crate::vocab::token_id("circle").unwrap(),
            crate::vocab::token_id("plain").unwrap(),
        ];
        let e = net.embed_prompt(&ids).unwrap();
        assert_eq!(e.ids[0], ids[0]);
        assert_eq!(e.ids[3], crate::vocab::NULL_TOKEN);
        let reference = net.embed_prompt(&ids).unwrap();
        assert_eq!(e.rows.data(), reference.rows.data());
        // Unknown id rejected.
        assert!(net.embed_prompt(&[999]).is_err());
    }

    #[test]
    fn time_embedding_shape_and_range() {
        let te: Tensor<f64> = time_embedding(&[0, 500, 999], 32);
        assert_eq!(te.shape(), &[3, 32]);
        for &v in te.data() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }
}
