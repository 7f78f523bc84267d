//! Trainable building blocks. Each layer owns plain weight tensors and runs
//! on a [`Graph`](crate::graph::Graph) through the forward context, which
//! uploads parameters as graph leaves and optionally tracks them by name for
//! the optimizer and checkpoints.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::model::{AttentionPacket, AttnKind, Ctx};
use crate::rng::Rng;
use crate::tensor::{Elem, Tensor};

/// Visits every parameter tensor with its stable dotted name.
pub trait Params<T: Elem> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));
}

pub struct Conv2d<T: Elem> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Elem> Conv2d<T> {
    pub fn new(
        rng: &mut Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        Conv2d {
            w: rng.fill_normal_scaled(&[out_ch, in_ch, k, k], std),
            b: Tensor::zeros(&[out_ch]),
            stride,
            pad,
        }
    }

    /// Zero-initialized variant, used for the last conv of residual blocks.
    pub fn new_zeroed(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            w: Tensor::zeros(&[out_ch, in_ch, k, k]),
            b: Tensor::zeros(&[out_ch]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, '_, T>, prefix: &str, x: Var) -> Result<Var> {
        let w = ctx.param(format!("{prefix}.w"), &self.w);
        let b = ctx.param(format!("{prefix}.b"), &self.b);
        ctx.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

impl<T: Elem> Params<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

pub struct Linear<T: Elem> {
    pub w: Tensor<T>, // [in, out]
    pub b: Tensor<T>,
}

impl<T: Elem> Linear<T> {
    pub fn new(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        Linear {
            w: rng.fill_normal_scaled(&[fan_in, fan_out], std),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn new_zeroed(fan_in: usize, fan_out: usize) -> Self {
        Linear { w: Tensor::zeros(&[fan_in, fan_out]), b: Tensor::zeros(&[fan_out]) }
    }

    /// x must be [rows, in].
    pub fn forward(&self, ctx: &mut Ctx<'_, '_, T>, prefix: &str, x: Var) -> Result<Var> {
        let w = ctx.param(format!("{prefix}.w"), &self.w);
        let b = ctx.param(format!("{prefix}.b"), &self.b);
        let y = ctx.g.matmul(x, w)?;
        ctx.g.add_row_bias(y, b)
    }
}

impl<T: Elem> Params<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

pub struct GroupNorm<T: Elem> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub groups: usize,
    pub eps: f64,
}

impl<T: Elem> GroupNorm<T> {
    pub fn new(channels: usize, groups: usize) -> Self {
        GroupNorm {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, '_, T>, prefix: &str, x: Var) -> Result<Var> {
        let g = ctx.param(format!("{prefix}.gamma"), &self.gamma);
        let b = ctx.param(format!("{prefix}.beta"), &self.beta);
        ctx.g.group_norm(x, g, b, self.groups, self.eps)
    }
}

impl<T: Elem> Params<T> for GroupNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

pub struct Embedding<T: Elem> {
    pub table: Tensor<T>, // [vocab, dim]
}

impl<T: Elem> Embedding<T> {
    pub fn new(rng: &mut Rng, vocab: usize, dim: usize) -> Self {
        Embedding { table: rng.fill_normal_scaled(&[vocab, dim], 0.1) }
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx<'_, '_, T>,
        prefix: &str,
        ids: &[usize],
        b: usize,
        l: usize,
    ) -> Result<Var> {
        let t = ctx.param(format!("{prefix}.table"), &self.table);
        ctx.g.embed(t, ids, b, l)
    }
}

impl<T: Elem> Params<T> for Embedding<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.table"), &self.table);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.table"), &mut self.table);
    }
}

/// GroupNorm -> SiLU -> conv, time-embedding bias, GroupNorm -> SiLU -> conv,
/// residual skip (1x1 conv when widths change).
pub struct ResBlock<T: Elem> {
    pub n1: GroupNorm<T>,
    pub c1: Conv2d<T>,
    pub temb: Linear<T>,
    pub n2: GroupNorm<T>,
    pub c2: Conv2d<T>,
    pub skip: Option<Conv2d<T>>,
}

impl<T: Elem> ResBlock<T> {
    pub fn new(rng: &mut Rng, in_ch: usize, out_ch: usize, time_dim: usize, groups: usize) -> Self {
        ResBlock {
            n1: GroupNorm::new(in_ch, groups),
            c1: Conv2d::new(rng, in_ch, out_ch, 3, 1, 1),
            temb: Linear::new(rng, time_dim, out_ch),
            n2: GroupNorm::new(out_ch, groups),
            c2: Conv2d::new_zeroed(out_ch, out_ch, 3, 1, 1),
            skip: if in_ch == out_ch {
                None
            } else {
                Some(Conv2d::new(rng, in_ch, out_ch, 1, 1, 0))
            },
        }
    }

    /// `temb_act` is the pre-activated time embedding, [B, time_dim].
    pub fn forward(&self, ctx: &mut Ctx<'_, '_, T>, prefix: &str, x: Var, temb_act: Var) -> Result<Var> {
        let mut h = self.n1.forward(ctx, &format!("{prefix}.n1"), x)?;
        h = ctx.g.silu(h);
        h = self.c1.forward(ctx, &format!("{prefix}.c1"), h)?;
        let tb = self.temb.forward(ctx, &format!("{prefix}.temb"), temb_act)?;
        h = ctx.g.add_bias_hw(h, tb)?;
        h = self.n2.forward(ctx, &format!("{prefix}.n2"), h)?;
        h = ctx.g.silu(h);
        h = self.c2.forward(ctx, &format!("{prefix}.c2"), h)?;
        let sk = match &self.skip {
            Some(c) => c.forward(ctx, &format!("{prefix}.skip"), x)?,
            None => x,
        };
        let out = ctx.g.add(h, sk)?;
        ctx.offer_spatial(out)
    }
}

impl<T: Elem> Params<T> for ResBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.n1.visit(&format!("{prefix}.n1"), f);
        self.c1.visit(&format!("{prefix}.c1"), f);
        self.temb.visit(&format!("{prefix}.temb"), f);
        self.n2.visit(&format!("{prefix}.n2"), f);
        self.c2.visit(&format!("{prefix}.c2"), f);
        if let Some(s) = &self.skip {
            s.visit(&format!("{prefix}.skip"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.n1.visit_mut(&format!("{prefix}.n1"), f);
        self.c1.visit_mut(&format!("{prefix}.c1"), f);
        self.temb.visit_mut(&format!("{prefix}.temb"), f);
        self.n2.visit_mut(&format!("{prefix}.n2"), f);
        self.c2.visit_mut(&format!("{prefix}.c2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&format!("{prefix}.skip"), f);
        }
    }
}

/// Splits [B, N, heads*d] into [B*heads, N, d].
fn split_heads<T: Elem>(
    ctx: &mut Ctx<'_, '_, T>,
    x: Var,
    b: usize,
    n: usize,
    heads: usize,
    d: usize,
) -> Result<Var> {
    let r = ctx.g.reshape(x, &[b, n, heads, d])?;
    let p = ctx.g.permute4(r, [0, 2, 1, 3])?;
    ctx.g.reshape(p, &[b * heads, n, d])
}

/// Merges [B*heads, N, d] back to [B*N, heads*d].
fn merge_heads<T: Elem>(
    ctx: &mut Ctx<'_, '_, T>,
    x: Var,
    b: usize,
    n: usize,
    heads: usize,
    d: usize,
) -> Result<Var> {
    let r = ctx.g.reshape(x, &[b, heads, n, d])?;
    let p = ctx.g.permute4(r, [0, 2, 1, 3])?;
    ctx.g.reshape(p, &[b * n, heads * d])
}

pub struct SelfAttention<T: Elem> {
    pub norm: GroupNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub heads: usize,
    pub head_dim: usize,
}

impl<T: Elem> SelfAttention<T> {
    pub fn new(rng: &mut Rng, channels: usize, heads: usize, head_dim: usize, groups: usize) -> Self {
        let inner = heads * head_dim;
        SelfAttention {
            norm: GroupNorm::new(channels, groups),
            q: Linear::new(rng, channels, inner),
            k: Linear::new(rng, channels, inner),
            v: Linear::new(rng, channels, inner),
            out: Linear::new_zeroed(inner, channels),
            heads,
            head_dim,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, '_, T>, prefix: &str, x: Var) -> Result<Var> {
        let xs = ctx.g.value(x).shape().to_vec();
        let (b, c, hh, ww) = (xs[0], xs[1], xs[2], xs[3]);
        let n = hh * ww;
        let (heads, d) = (self.heads, self.head_dim);
        if d == 0 {
            return Err(Error::InvalidArg { op: "self_attention", msg: "head_dim is zero".into() });
        }

        let norm = self.norm.forward(ctx, &format!("{prefix}.norm"), x)?;
        let pm = ctx.g.permute4(norm, [0, 2, 3, 1])?;
        let flat = ctx.g.reshape(pm, &[b * n, c])?;
        let q2 = self.q.forward(ctx, &format!("{prefix}.q"), flat)?;
        let k2 = self.k.forward(ctx, &format!("{prefix}.k"), flat)?;
        let v2 = self.v.forward(ctx, &format!("{prefix}.v"), flat)?;
        let q = split_heads(ctx, q2, b, n, heads, d)?;
        let k = split_heads(ctx, k2, b, n, heads, d)?;
        let v = split_heads(ctx, v2, b, n, heads, d)?;

        let logits = ctx.g.bmm(q, k, true)?;
        let probs = ctx.g.softmax_last(logits, 1.0 / (d as f64).sqrt());
        let mut attn_out = ctx.g.bmm(probs, v, false)?;

        // Hook: single-item forwards offer the packet and may substitute.
        let layer = ctx.next_attn_layer();
        if b == 1 && ctx.controller_active() {
            let packet = AttentionPacket {
                layer,
                kind: AttnKind::SelfAttn,
                resolution: hh,
                q: ctx.g.value(q).reshape(&[heads, n, d])?,
                k: ctx.g.value(k).reshape(&[heads, n, d])?,
                v: ctx.g.value(v).reshape(&[heads, n, d])?,
            };
            let default_out = ctx.g.value(attn_out).reshape(&[heads, n, d])?;
            if let Some(repl) = ctx.offer_attention(&packet, &default_out)? {
                if repl.shape() != [heads, n, d] {
                    return Err(Error::ControllerShape {
                        layer,
                        got: repl.shape().to_vec(),
                        expected: vec![heads, n, d],
                    });
                }
                repl.check_finite("controller attention output")?;
                attn_out = ctx.g.leaf(repl.reshape(&[b * heads, n, d])?);
            }
        }

        let merged = merge_heads(ctx, attn_out, b, n, heads, d)?;
        let proj = self.out.forward(ctx, &format!("{prefix}.out"), merged)?;
        let back = ctx.g.reshape(proj, &[b, hh, ww, c])?;
        let spatial = ctx.g.permute4(back, [0, 3, 1, 2])?;
        ctx.g.add(spatial, x)
    }
}

impl<T: Elem> Params<T> for SelfAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.norm.visit(&format!("{prefix}.norm"), f);
        self.q.visit(&format!("{prefix}.q"), f);
        self.k.visit(&format!("{prefix}.k"), f);
        self.v.visit(&format!("{prefix}.v"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.norm.visit_mut(&format!("{prefix}.norm"), f);
        self.q.visit_mut(&format!("{prefix}.q"), f);
        self.k.visit_mut(&format!("{prefix}.k"), f);
        self.v.visit_mut(&format!("{prefix}.v"), f);
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }
}

pub struct CrossAttention<T: Elem> {
    pub norm: GroupNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub heads: usize,
    pub head_dim: usize,
}

impl<T: Elem> CrossAttention<T> {
    pub fn new(
        rng: &mut Rng,
        channels: usize,
        prompt_dim: usize,
        heads: usize,
        head_dim: usize,
        groups: usize,
    ) -> Self {
        let inner = heads * head_dim;
        CrossAttention {
            norm: GroupNorm::new(channels, groups),
            q: Linear::new(rng, channels, inner),
            k: Linear::new(rng, prompt_dim, inner),
            v: Linear::new(rng, prompt_dim, inner),
            out: Linear::new_zeroed(inner, channels),
            heads,
            head_dim,
        }
    }

    /// `prompt` is [B, L, prompt_dim].
    pub fn forward(&self, ctx: &mut Ctx<'_, '_, T>, prefix: &str, x: Var, prompt: Var) -> Result<Var> {
        let xs = ctx.g.value(x).shape().to_vec();
        let ps = ctx.g.value(prompt).shape().to_vec();
        let (b, c, hh, ww) = (xs[0], xs[1], xs[2], xs[3]);
        let (l, pd) = (ps[1], ps[2]);
        let n = hh * ww;
        let (heads, d) = (self.heads, self.head_dim);

        let norm = self.norm.forward(ctx, &format!("{prefix}.norm"), x)?;
        let pm = ctx.g.permute4(norm, [0, 2, 3, 1])?;
        let flat = ctx.g.reshape(pm, &[b * n, c])?;
        let q2 = self.q.forward(ctx, &format!("{prefix}.q"), flat)?;
        let pflat = ctx.g.reshape(prompt, &[b * l, pd])?;
        let k2 = self.k.forward(ctx, &format!("{prefix}.k"), pflat)?;
        let v2 = self.v.forward(ctx, &format!("{prefix}.v"), pflat)?;
        let q = split_heads(ctx, q2, b, n, heads, d)?;
        let k = split_heads(ctx, k2, b, l, heads, d)?;
        let v = split_heads(ctx, v2, b, l, heads, d)?;

        let logits = ctx.g.bmm(q, k, true)?;
        let probs = ctx.g.softmax_last(logits, 1.0 / (d as f64).sqrt());
        let mut attn_out = ctx.g.bmm(probs, v, false)?;

        let layer = ctx.next_attn_layer();
        if b == 1 {
            // Cross-attention maps are always recorded for mask extraction.
            let w = ctx.g.value(probs); // [heads, n, l]
            let mut avg = vec![T::zero(); n * l];
            for h in 0..heads {
                for i in 0..n * l {
                    avg[i] += w.data()[h * n * l + i];
                }
            }
            let inv = T::one() / T::from_usize(heads).unwrap();
            for v in &mut avg {
                *v *= inv;
            }
            let weights = Tensor::from_vec(&[n, l], avg)?;
            ctx.record_cross_maps(layer, hh, weights);

            if ctx.controller_active() {
                let packet = AttentionPacket {
                    layer,
                    kind: AttnKind::CrossAttn,
                    resolution: hh,
                    q: ctx.g.value(q).reshape(&[heads, n, d])?,
                    k: ctx.g.value(k).reshape(&[heads, l, d])?,
                    v: ctx.g.value(v).reshape(&[heads, l, d])?,
                };
                let default_out = ctx.g.value(attn_out).reshape(&[heads, n, d])?;
                if let Some(repl) = ctx.offer_attention(&packet, &default_out)? {
                    if repl.shape() != [heads, n, d] {
                        return Err(Error::ControllerShape {
                            layer,
                            got: repl.shape().to_vec(),
                            expected: vec![heads, n, d],
                        });
                    }
                    repl.check_finite("controller attention output")?;
                    attn_out = ctx.g.leaf(repl.reshape(&[b * heads, n, d])?);
                }
            }
        }

        let merged = merge_heads(ctx, attn_out, b, n, heads, d)?;
        let proj = self.out.forward(ctx, &format!("{prefix}.out"), merged)?;
        let back = ctx.g.reshape(proj, &[b, hh, ww, c])?;
        let spatial = ctx.g.permute4(back, [0, 3, 1, 2])?;
        ctx.g.add(spatial, x)
    }
}

impl<T: Elem> Params<T> for CrossAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.norm.visit(&format!("{prefix}.norm"), f);
        self.q.visit(&format!("{prefix}.q"), f);
        self.k.visit(&format!("{prefix}.k"), f);
        self.v.visit(&format!("{prefix}.v"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.norm.visit_mut(&format!("{prefix}.norm"), f);
        self.q.visit_mut(&format!("{prefix}.q"), f);
        self.k.visit_mut(&format!("{prefix}.k"), f);
        self.v.visit_mut(&format!("{prefix}.v"), f);
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }
}
