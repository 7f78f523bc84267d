//! Attention math for dual-path injection: the two single-path baselines
//! (key/value injection and query/key injection with spatial features), the
//! contrast and rearrange operations, and the unified self-attention that
//! reweights output-to-appearance similarities by the structural image's
//! self-attention map.
//!
//! All functions operate per head on rank-2 tensors [N, d]; `*_heads`
//! wrappers map over [heads, N, d] packets.

use std::cell::Cell;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// The three lockstep denoising processes of one edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathId {
    Appearance,
    Structural,
    Output,
}

impl PathId {
    pub fn name(self) -> &'static str {
        match self {
            PathId::Appearance => "appearance",
            PathId::Structural => "structural",
            PathId::Output => "output",
        }
    }
}

/// Q/K/V of one (path, step, layer), written once by a source path's forward.
#[derive(Debug, Clone)]
pub struct QkvEntry<T: Elem = f32> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

/// Recorded features keyed by (path, step, layer). Entries are write-once and
/// immutable afterwards; the per-step ordering (source paths write before the
/// output path reads) is enforced by the pipeline's sequencing.
#[derive(Debug, Default)]
pub struct FeatureStore<T: Elem = f32> {
    qkv: HashMap<(PathId, usize, u32), QkvEntry<T>>,
    spatial: HashMap<(PathId, usize, u32), Tensor<T>>,
    writes: usize,
    reads: Cell<usize>,
}

impl<T: Elem> FeatureStore<T> {
    pub fn new() -> Self {
        FeatureStore {
            qkv: HashMap::new(),
            spatial: HashMap::new(),
            writes: 0,
            reads: Cell::new(0),
        }
    }

    pub fn put_qkv(&mut self, path: PathId, step: usize, layer: u32, entry: QkvEntry<T>) -> Result<()> {
        if self.qkv.contains_key(&(path, step, layer)) {
            return Err(Error::DuplicateFeature { path: path.name(), step, layer });
        }
        self.writes += 1;
        self.qkv.insert((path, step, layer), entry);
        Ok(())
    }

    pub fn qkv(&self, path: PathId, step: usize, layer: u32) -> Result<&QkvEntry<T>> {
        self.reads.set(self.reads.get() + 1);
        self.qkv
            .get(&(path, step, layer))
            .ok_or(Error::MissingFeature { path: path.name(), step, layer })
    }

    pub fn has_qkv(&self, path: PathId, step: usize, layer: u32) -> bool {
        self.qkv.contains_key(&(path, step, layer))
    }

    pub fn put_spatial(&mut self, path: PathId, step: usize, layer: u32, f: Tensor<T>) -> Result<()> {
        if self.spatial.contains_key(&(path, step, layer)) {
            return Err(Error::DuplicateFeature { path: path.name(), step, layer });
        }
        self.writes += 1;
        self.spatial.insert((path, step, layer), f);
        Ok(())
    }

    pub fn spatial(&self, path: PathId, step: usize, layer: u32) -> Result<&Tensor<T>> {
        self.reads.set(self.reads.get() + 1);
        self.spatial
            .get(&(path, step, layer))
            .ok_or(Error::MissingFeature { path: path.name(), step, layer })
    }

    pub fn write_count(&self) -> usize {
        self.writes
    }

    pub fn read_count(&self) -> usize {
        self.reads.get()
    }

    /// Drops all entries of a step once the pipeline moves past it.
    pub fn evict_step(&mut self, step: usize) {
        self.qkv.retain(|k, _| k.1 != step);
        self.spatial.retain(|k, _| k.1 != step);
    }
}

/// Knobs of the unified self-attention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    /// Contrast factor applied to attention maps.
    pub beta: f64,
    /// Clamp negative weights (after the outer contrast) at zero.
    pub clamp_negative: bool,
    /// Compute the rearrange constant from the sqrt(d)-scaled operands so the
    /// per-row mass splits exactly in half.
    pub c_on_scaled: bool,
    /// Renormalize rows to unit sum after clamping.
    pub renormalize_rows: bool,
    /// Apply the 1/sqrt(d) rescale inside the second softmax of the basic
    /// unified map, even though the structural map is already normalized.
    pub rescale_eq4: bool,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            beta: 1.2,
            clamp_negative: true,
            c_on_scaled: true,
            renormalize_rows: false,
            rescale_eq4: true,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::InvalidArg {
                op: "ControlConfig",
                msg: format!("beta must be positive, got {}", self.beta),
            });
        }
        Ok(())
    }
}

fn expect_rank2<T: Elem>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::InvalidArg {
            op,
            msg: format!("expected rank-2 per-head tensor, got {:?}", t.shape()),
        });
    }
    Ok((t.dim(0), t.dim(1)))
}

fn scale_of<T: Elem>(d: usize) -> T {
    T::one() / T::from_usize(d).unwrap().sqrt()
}

/// Key/value injection: softmax(Q Ksrcᵀ / sqrt(d)) Vsrc.
pub fn mutual_self_attention<T: Elem>(
    q: &Tensor<T>,
    k_src: &Tensor<T>,
    v_src: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (_, d) = expect_rank2(q, "mutual_self_attention")?;
    let (nk, dk) = expect_rank2(k_src, "mutual_self_attention")?;
    let (nv, _) = expect_rank2(v_src, "mutual_self_attention")?;
    if dk != d {
        return Err(Error::ShapeMismatch {
            op: "mutual_self_attention (d)",
            lhs: q.shape().to_vec(),
            rhs: k_src.shape().to_vec(),
        });
    }
    if nk != nv {
        return Err(Error::ShapeMismatch {
            op: "mutual_self_attention (K/V rows)",
            lhs: k_src.shape().to_vec(),
            rhs: v_src.shape().to_vec(),
        });
    }
    let logits = q.matmul(&k_src.t2()?)?;
    let probs = logits.softmax_rows(scale_of::<T>(d))?;
    probs.matmul(v_src)
}

/// Query/key injection: softmax(Qsrc Ksrcᵀ / sqrt(d)) V.
pub fn pnp_attention<T: Elem>(
    q_src: &Tensor<T>,
    k_src: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    mutual_self_attention(q_src, k_src, v)
}

/// Mean-preserving sharpening: (X - mean_row(X)) * beta + mean_row(X).
pub fn contrast<T: Elem>(x: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArg {
            op: "contrast",
            msg: format!("beta must be positive, got {beta}"),
        });
    }
    let (m, n) = expect_rank2(x, "contrast")?;
    if beta == 1.0 {
        // Bitwise identity at the neutral factor.
        return Ok(x.clone());
    }
    let b = T::fl(beta);
    let mut out = x.clone();
    for r in 0..m {
        let row = &mut out.data_mut()[r * n..(r + 1) * n];
        let mut mu = T::zero();
        for v in row.iter() {
            mu += *v;
        }
        mu = mu / T::from_usize(n).unwrap();
        for v in row.iter_mut() {
            *v = (*v - mu) * b + mu;
        }
    }
    Ok(out)
}

pub fn clamp_nonnegative<T: Elem>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v < T::zero() { T::zero() } else { v })
}

pub fn renormalize_rows<T: Elem>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = expect_rank2(x, "renormalize_rows")?;
    let mut out = x.clone();
    for r in 0..m {
        let row = &mut out.data_mut()[r * n..(r + 1) * n];
        let mut s = T::zero();
        for v in row.iter() {
            s += *v;
        }
        if s.abs() > T::fl(1e-12) {
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
    }
    Ok(out)
}

fn log_sum_exp_row<T: Elem>(row: &[T]) -> T {
    let mut mx = T::neg_infinity();
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut s = T::zero();
    for &v in row {
        s += (v - mx).exp();
    }
    mx + s.ln()
}

/// Balanced softmax over the concatenation [X/sqrt(d) + C, Y/sqrt(d)] with the
/// per-row correction constant C = ln(sum exp Y' / sum exp X'). With
/// `c_on_scaled` the constant uses the scaled operands, pinning each half's
/// mass to exactly one half.
pub fn rearrange<T: Elem>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    d: usize,
    c_on_scaled: bool,
) -> Result<Tensor<T>> {
    let (m, n) = expect_rank2(x, "rearrange")?;
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "rearrange",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    x.check_finite("rearrange X")?;
    y.check_finite("rearrange Y")?;
    let s = scale_of::<T>(d);
    let mut out = Tensor::zeros(&[m, 2 * n]);
    for r in 0..m {
        let xr = &x.data()[r * n..(r + 1) * n];
        let yr = &y.data()[r * n..(r + 1) * n];
        let c = if c_on_scaled {
            let xs: Vec<T> = xr.iter().map(|&v| v * s).collect();
            let ys: Vec<T> = yr.iter().map(|&v| v * s).collect();
            log_sum_exp_row(&ys) - log_sum_exp_row(&xs)
        } else {
            log_sum_exp_row(yr) - log_sum_exp_row(xr)
        };
        let row = &mut out.data_mut()[r * 2 * n..(r + 1) * 2 * n];
        for j in 0..n {
            row[j] = xr[j] * s + c;
            row[n + j] = yr[j] * s;
        }
        // Softmax with max subtraction over the concatenated row.
        let mut mx = T::neg_infinity();
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}

/// Structural reweighting without contrast/rearrange: the unified attention
/// map softmax(Attn_struct (Q_out K_appᵀ) / sqrt(d)) applied to V_app.
pub fn unified_attention_basic<T: Elem>(
    q_struct: &Tensor<T>,
    k_struct: &Tensor<T>,
    q_out: &Tensor<T>,
    k_app: &Tensor<T>,
    v_app: &Tensor<T>,
    cfg: &ControlConfig,
) -> Result<Tensor<T>> {
    let (n_s, d) = expect_rank2(q_struct, "unified_attention_basic")?;
    let (n_o, _) = expect_rank2(q_out, "unified_attention_basic")?;
    let (n_a, _) = expect_rank2(k_app, "unified_attention_basic")?;
    if n_s != n_o || n_o != n_a {
        return Err(Error::InvalidArg {
            op: "unified_attention_basic",
            msg: format!("paths must share one resolution, got N = {n_s}/{n_o}/{n_a}"),
        });
    }
    let attn_struct = q_struct
        .matmul(&k_struct.t2()?)?
        .softmax_rows(scale_of::<T>(d))?;
    let sim_out = q_out.matmul(&k_app.t2()?)?;
    let mixed = attn_struct.matmul(&sim_out)?;
    let scale = if cfg.rescale_eq4 { scale_of::<T>(d) } else { T::one() };
    let attn_uni = mixed.softmax_rows(scale)?;
    attn_uni.matmul(v_app)
}

/// Inputs of the full unified self-attention for one head at one (step, layer).
pub struct UnifiedInputs<'a, T: Elem> {
    pub q_struct: &'a Tensor<T>,
    pub k_struct: &'a Tensor<T>,
    pub q_out: &'a Tensor<T>,
    pub k_out: &'a Tensor<T>,
    pub v_out: &'a Tensor<T>,
    pub k_app: &'a Tensor<T>,
    pub v_app: &'a Tensor<T>,
}

/// Full unified self-attention with contrast and rearrange:
/// F_c(F_r(F_c(Attn_struct) (Q_out K_appᵀ), Q_out K_outᵀ)) [V_app; V_out],
/// with optional negative-weight clamping and row renormalization.
pub fn unified_attention_full<T: Elem>(
    inp: UnifiedInputs<'_, T>,
    cfg: &ControlConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (n_s, d) = expect_rank2(inp.q_struct, "unified_attention_full")?;
    let (n_o, _) = expect_rank2(inp.q_out, "unified_attention_full")?;
    let (n_a, _) = expect_rank2(inp.k_app, "unified_attention_full")?;
    if n_s != n_o || n_o != n_a {
        return Err(Error::InvalidArg {
            op: "unified_attention_full",
            msg: format!("paths must share one resolution, got N = {n_s}/{n_o}/{n_a}"),
        });
    }
    let attn_struct = inp
        .q_struct
        .matmul(&inp.k_struct.t2()?)?
        .softmax_rows(scale_of::<T>(d))?;
    let attn_struct_c = contrast(&attn_struct, cfg.beta)?;
    let sim_app = inp.q_out.matmul(&inp.k_app.t2()?)?;
    let x = attn_struct_c.matmul(&sim_app)?;
    let y = inp.q_out.matmul(&inp.k_out.t2()?)?;
    let attn_uni = rearrange(&x, &y, d, cfg.c_on_scaled)?;
    let mut weights = contrast(&attn_uni, cfg.beta)?;
    if cfg.clamp_negative {
        weights = clamp_nonnegative(&weights);
        if cfg.renormalize_rows {
            weights = renormalize_rows(&weights)?;
        }
    }
    weights.check_finite("unified_attention_full weights")?;
    // Stack V_app on top of V_out and apply the 2N-wide map.
    let n = inp.v_app.dim(0);
    let dv = inp.v_app.dim(1);
    if inp.v_out.shape() != [n, dv] {
        return Err(Error::ShapeMismatch {
            op: "unified_attention_full (V)",
            lhs: inp.v_app.shape().to_vec(),
            rhs: inp.v_out.shape().to_vec(),
        });
    }
    let mut stacked = Vec::with_capacity(2 * n * dv);
    stacked.extend_from_slice(inp.v_app.data());
    stacked.extend_from_slice(inp.v_out.data());
    let values = Tensor::from_vec_unchecked(vec![2 * n, dv], stacked);
    weights.matmul(&values)
}

/// Variant used when only appearance injection is active: no structural
/// reweighting, so X = Q_out K_appᵀ directly.
pub fn appearance_only_attention<T: Elem>(
    q_out: &Tensor<T>,
    k_out: &Tensor<T>,
    v_out: &Tensor<T>,
    k_app: &Tensor<T>,
    v_app: &Tensor<T>,
    cfg: &ControlConfig,
) -> Result<Tensor<T>> {
    let (_, d) = expect_rank2(q_out, "appearance_only_attention")?;
    let x = q_out.matmul(&k_app.t2()?)?;
    let y = q_out.matmul(&k_out.t2()?)?;
    let attn_uni = rearrange(&x, &y, d, cfg.c_on_scaled)?;
    let mut weights = contrast(&attn_uni, cfg.beta)?;
    if cfg.clamp_negative {
        weights = clamp_nonnegative(&weights);
        if cfg.renormalize_rows {
            weights = renormalize_rows(&weights)?;
        }
    }
    let n = v_app.dim(0);
    let dv = v_app.dim(1);
    let mut stacked = Vec::with_capacity(2 * n * dv);
    stacked.extend_from_slice(v_app.data());
    stacked.extend_from_slice(v_out.data());
    let values = Tensor::from_vec_unchecked(vec![2 * n, dv], stacked);
    weights.matmul(&values)
}

/// Reads the structural path's spatial features for substitution in
/// designated decoder layers (query/key-injection baseline only).
pub fn inject_spatial_features<T: Elem>(
    store: &FeatureStore<T>,
    layer: u32,
    step: usize,
) -> Result<Tensor<T>> {
    store.spatial(PathId::Structural, step, layer).cloned()
}

/// One head of a [heads, N, d] packet as a rank-2 tensor.
pub fn head2<T: Elem>(t: &Tensor<T>, h: usize) -> Tensor<T> {
    assert_eq!(t.rank(), 3, "expected [heads, N, d]");
    let (n, d) = (t.dim(1), t.dim(2));
    let slice = &t.data()[h * n * d..(h + 1) * n * d];
    Tensor::from_vec_unchecked(vec![n, d], slice.to_vec())
}

/// Stacks per-head rank-2 outputs back into [heads, N, d].
pub fn stack_heads<T: Elem>(heads: &[Tensor<T>]) -> Tensor<T> {
    let (n, d) = (heads[0].dim(0), heads[0].dim(1));
    let mut data = Vec::with_capacity(heads.len() * n * d);
    for h in heads {
        data.extend_from_slice(h.data());
    }
    Tensor::from_vec_unchecked(vec![heads.len(), n, d], data)
}

/// Mean Shannon entropy of the rows of an attention map (trace diagnostics).
pub fn mean_row_entropy<T: Elem>(w: &Tensor<T>) -> f64 {
    let (m, n) = (w.dim(0), w.dim(1));
    let mut total = 0.0;
    for r in 0..m {
        let mut h = 0.0;
        for j in 0..n {
            let p = w.data()[r * n + j].to_f64().unwrap().max(0.0);
            if p > 1e-12 {
                h -= p * p.ln();
            }
        }
        total += h;
    }
    total / m as f64
}

/// Mean first-half mass of a [M, 2N] rearranged map (trace diagnostics).
pub fn mean_half_mass<T: Elem>(w: &Tensor<T>) -> f64 {
    let (m, n2) = (w.dim(0), w.dim(1));
    let n = n2 / 2;
    let mut total = 0.0;
    for r in 0..m {
        for j in 0..n {
            total += w.data()[r * n2 + j].to_f64().unwrap();
        }
    }
    total / m as f64
}
