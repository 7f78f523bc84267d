//! Reverse-mode autodiff over an operation tape.
//!
//! A `Graph` owns every intermediate value; ops compute eagerly and, when
//! gradients are enabled, push a record that is replayed in reverse by
//! `backward`. First-order only. Inference paths build a graph with gradients
//! disabled and pay only the value storage.

use crate::error::{Error, Result};
use crate::kernel::{self, ConvDims};
use crate::tensor::{Elem, Tensor};

/// Handle to a node in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Record {
    Add { a: usize, b: usize, out: usize },
    Scale { x: usize, c: f64, out: usize },
    Matmul { a: usize, b: usize, out: usize },
    AddRowBias { x: usize, bias: usize, out: usize },
    Bmm { a: usize, b: usize, out: usize, transpose_b: bool },
    SoftmaxLast { x: usize, out: usize, scale: f64 },
    Silu { x: usize, out: usize },
    GroupNorm { x: usize, gamma: usize, beta: usize, out: usize, groups: usize, mean: Vec<f64>, inv_std: Vec<f64> },
    Conv2d { x: usize, w: usize, b: usize, out: usize, dims: ConvDims },
    Reshape { x: usize, out: usize },
    Permute4 { x: usize, out: usize, perm: [usize; 4] },
    ConcatCh { a: usize, b: usize, out: usize },
    Upsample2 { x: usize, out: usize },
    Embed { table: usize, ids: Vec<usize>, out: usize },
    AddBiasHw { x: usize, bias: usize, out: usize },
    MseMean { pred: usize, target: Tensor64Erased, out: usize },
}

/// Target tensors are stored dtype-erased as f64 so records stay monomorphic.
struct Tensor64Erased(Vec<f64>);

pub struct Graph<T: Elem> {
    vals: Vec<Tensor<T>>,
    records: Vec<Record>,
    grad_on: bool,
}

pub struct Grads<T: Elem> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Elem> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Elem> Graph<T> {
    pub fn new(grad_on: bool) -> Self {
        Graph { vals: Vec::new(), records: Vec::new(), grad_on }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_on
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.vals[v.0]
    }

    fn push(&mut self, t: Tensor<T>) -> Var {
        self.vals.push(t);
        Var(self.vals.len() - 1)
    }

    fn record(&mut self, r: Record) {
        if self.grad_on {
            self.records.push(r);
        }
    }

    /// Registers an input or parameter value.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.vals[a.0].add(&self.vals[b.0])?;
        let out = self.push(t);
        self.record(Record::Add { a: a.0, b: b.0, out: out.0 });
        Ok(out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.vals[x.0].scale(T::fl(c));
        let out = self.push(t);
        self.record(Record::Scale { x: x.0, c, out: out.0 });
        out
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.vals[a.0].matmul(&self.vals[b.0])?;
        let out = self.push(t);
        self.record(Record::Matmul { a: a.0, b: b.0, out: out.0 });
        Ok(out)
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (&self.vals[x.0], &self.vals[bias.0]);
        if xs.rank() != 2 || bs.shape() != [xs.dim(1)] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: xs.shape().to_vec(),
                rhs: bs.shape().to_vec(),
            });
        }
        let (r, c) = (xs.dim(0), xs.dim(1));
        let mut data = xs.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bs.data()[j];
            }
        }
        let out = self.push(Tensor::from_vec_unchecked(vec![r, c], data));
        self.record(Record::AddRowBias { x: x.0, bias: bias.0, out: out.0 });
        Ok(out)
    }

    /// Batched matmul: a [G,M,K] x b [G,K,N] (or [G,N,K] when `transpose_b`).
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (asp, bsp) = (self.vals[a.0].shape().to_vec(), self.vals[b.0].shape().to_vec());
        let bad = asp.len() != 3
            || bsp.len() != 3
            || asp[0] != bsp[0]
            || (!transpose_b && asp[2] != bsp[1])
            || (transpose_b && asp[2] != bsp[2]);
        if bad {
            return Err(Error::ShapeMismatch { op: "bmm", lhs: asp, rhs: bsp });
        }
        let (g, m, k) = (asp[0], asp[1], asp[2]);
        let n = if transpose_b { bsp[1] } else { bsp[2] };
        let mut data = vec![T::zero(); g * m * n];
        kernel::bmm(
            self.vals[a.0].data(),
            self.vals[b.0].data(),
            &mut data,
            g, m, k, n, transpose_b,
        );
        let out = self.push(Tensor::from_vec_unchecked(vec![g, m, n], data));
        self.record(Record::Bmm { a: a.0, b: b.0, out: out.0, transpose_b });
        Ok(out)
    }

    /// Softmax over the last axis of `scale * x`.
    pub fn softmax_last(&mut self, x: Var, scale: f64) -> Var {
        let xs = &self.vals[x.0];
        let n = *xs.shape().last().expect("softmax_last on scalar");
        let m = xs.numel() / n;
        let mut data = xs.data().to_vec();
        kernel::softmax_rows_inplace(&mut data, m, n, T::fl(scale));
        let out = self.push(Tensor::from_vec_unchecked(xs.shape().to_vec(), data));
        self.record(Record::SoftmaxLast { x: x.0, out: out.0, scale });
        out
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xs = &self.vals[x.0];
        let mut data = vec![T::zero(); xs.numel()];
        kernel::silu_forward(xs.data(), &mut data);
        let out = self.push(Tensor::from_vec_unchecked(xs.shape().to_vec(), data));
        self.record(Record::Silu { x: x.0, out: out.0 });
        out
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let xs = &self.vals[x.0];
        if xs.rank() != 4 || xs.dim(1) % groups != 0 {
            return Err(Error::InvalidArg {
                op: "graph group_norm",
                msg: format!("shape {:?} groups {}", xs.shape(), groups),
            });
        }
        let (n, c, h, w) = (xs.dim(0), xs.dim(1), xs.dim(2), xs.dim(3));
        let mut out_d = vec![T::zero(); xs.numel()];
        let mut mean = vec![T::zero(); n * groups];
        let mut inv_std = vec![T::zero(); n * groups];
        kernel::group_norm_forward(
            xs.data(),
            self.vals[gamma.0].data(),
            self.vals[beta.0].data(),
            &mut out_d,
            &mut mean,
            &mut inv_std,
            n, c, h, w, groups, T::fl(eps),
        );
        let out = self.push(Tensor::from_vec_unchecked(vec![n, c, h, w], out_d));
        self.record(Record::GroupNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            out: out.0,
            groups,
            mean: mean.iter().map(|v| v.to_f64().unwrap()).collect(),
            inv_std: inv_std.iter().map(|v| v.to_f64().unwrap()).collect(),
        });
        Ok(out)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let t = crate::tensor::conv2d(&self.vals[x.0], &self.vals[w.0], &self.vals[b.0], stride, pad)?;
        let (xs, ws) = (&self.vals[x.0], &self.vals[w.0]);
        let dims = ConvDims {
            n: xs.dim(0), c: xs.dim(1), h: xs.dim(2), w: xs.dim(3),
            oc: ws.dim(0), kh: ws.dim(2), kw: ws.dim(3),
            stride, pad,
            oh: t.dim(2), ow: t.dim(3),
        };
        let out = self.push(t);
        self.record(Record::Conv2d { x: x.0, w: w.0, b: b.0, out: out.0, dims });
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.vals[x.0].reshape(shape)?;
        let out = self.push(t);
        self.record(Record::Reshape { x: x.0, out: out.0 });
        Ok(out)
    }

    pub fn permute4(&mut self, x: Var, perm: [usize; 4]) -> Result<Var> {
        let xs = &self.vals[x.0];
        if xs.rank() != 4 {
            return Err(Error::InvalidArg {
                op: "permute4",
                msg: format!("expected rank 4, got {:?}", xs.shape()),
            });
        }
        let t = permute4_apply(xs, perm);
        let out = self.push(t);
        self.record(Record::Permute4 { x: x.0, out: out.0, perm });
        Ok(out)
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat_ch(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (&self.vals[a.0], &self.vals[b.0]);
        let ok = at.rank() == 4
            && bt.rank() == 4
            && at.dim(0) == bt.dim(0)
            && at.dim(2) == bt.dim(2)
            && at.dim(3) == bt.dim(3);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "concat_ch",
                lhs: at.shape().to_vec(),
                rhs: bt.shape().to_vec(),
            });
        }
        let (n, c1, c2, hw) = (at.dim(0), at.dim(1), bt.dim(1), at.dim(2) * at.dim(3));
        let mut data = vec![T::zero(); (c1 + c2) * n * hw];
        for ni in 0..n {
            let dst = &mut data[ni * (c1 + c2) * hw..(ni + 1) * (c1 + c2) * hw];
            dst[..c1 * hw].copy_from_slice(&at.data()[ni * c1 * hw..(ni + 1) * c1 * hw]);
            dst[c1 * hw..].copy_from_slice(&bt.data()[ni * c2 * hw..(ni + 1) * c2 * hw]);
        }
        let shape = vec![n, c1 + c2, at.dim(2), at.dim(3)];
        let out = self.push(Tensor::from_vec_unchecked(shape, data));
        self.record(Record::ConcatCh { a: a.0, b: b.0, out: out.0 });
        Ok(out)
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = &self.vals[x.0];
        if xs.rank() != 4 {
            return Err(Error::InvalidArg {
                op: "upsample2",
                msg: format!("expected rank 4, got {:?}", xs.shape()),
            });
        }
        let (n, c, h, w) = (xs.dim(0), xs.dim(1), xs.dim(2), xs.dim(3));
        let mut data = vec![T::zero(); n * c * 4 * h * w];
        kernel::upsample2_forward(xs.data(), &mut data, n * c, h, w);
        let out = self.push(Tensor::from_vec_unchecked(vec![n, c, 2 * h, 2 * w], data));
        self.record(Record::Upsample2 { x: x.0, out: out.0 });
        Ok(out)
    }

    /// Row lookup: table [V,D] indexed by ids [B,L] -> [B,L,D].
    pub fn embed(&mut self, table: Var, ids: &[usize], b: usize, l: usize) -> Result<Var> {
        let tb = &self.vals[table.0];
        if tb.rank() != 2 || ids.len() != b * l {
            return Err(Error::InvalidArg {
                op: "embed",
                msg: format!("table {:?}, {} ids for {}x{}", tb.shape(), ids.len(), b, l),
            });
        }
        let (v, d) = (tb.dim(0), tb.dim(1));
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::UnknownToken(format!("id {bad} out of vocabulary ({v})")));
        }
        let mut data = vec![T::zero(); b * l * d];
        for (slot, &id) in ids.iter().enumerate() {
            data[slot * d..(slot + 1) * d].copy_from_slice(&tb.data()[id * d..(id + 1) * d]);
        }
        let out = self.push(Tensor::from_vec_unchecked(vec![b, l, d], data));
        self.record(Record::Embed { table: table.0, ids: ids.to_vec(), out: out.0 });
        Ok(out)
    }

    /// x [B,C,H,W] + bias [B,C] broadcast over spatial positions.
    pub fn add_bias_hw(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (&self.vals[x.0], &self.vals[bias.0]);
        let ok = xs.rank() == 4 && bs.rank() == 2 && bs.dim(0) == xs.dim(0) && bs.dim(1) == xs.dim(1);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "add_bias_hw",
                lhs: xs.shape().to_vec(),
                rhs: bs.shape().to_vec(),
            });
        }
        let (n, c, hw) = (xs.dim(0), xs.dim(1), xs.dim(2) * xs.dim(3));
        let mut data = xs.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let bv = bs.data()[ni * c + ci];
                for p in &mut data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                    *p += bv;
                }
            }
        }
        let out = self.push(Tensor::from_vec_unchecked(xs.shape().to_vec(), data));
        self.record(Record::AddBiasHw { x: x.0, bias: bias.0, out: out.0 });
        Ok(out)
    }

    /// Mean squared error against a constant target; returns a scalar node.
    pub fn mse_mean(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let ps = &self.vals[pred.0];
        if ps.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse_mean",
                lhs: ps.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = T::from_usize(ps.numel()).unwrap();
        let mut acc = T::zero();
        for (p, t) in ps.data().iter().zip(target.data()) {
            let d = *p - *t;
            acc += d * d;
        }
        let out = self.push(Tensor::from_vec_unchecked(vec![1], vec![acc / n]));
        self.record(Record::MseMean {
            pred: pred.0,
            target: Tensor64Erased(target.data().iter().map(|v| v.to_f64().unwrap()).collect()),
            out: out.0,
        });
        Ok(out)
    }

    /// Reverse pass from a scalar loss. Gradients for every reachable node.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        if !self.grad_on {
            return Err(Error::InvalidArg {
                op: "backward",
                msg: "graph was built with gradients disabled".into(),
            });
        }
        if self.vals[loss.0].numel() != 1 {
            return Err(Error::InvalidArg {
                op: "backward",
                msg: format!("loss must be scalar, got {:?}", self.vals[loss.0].shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(Tensor::from_vec_unchecked(vec![1], vec![T::one()]));

        for rec in self.records.iter().rev() {
            self.step_back(rec, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn accum(grads: &mut [Option<Tensor<T>>], idx: usize, shape: &[usize], add: &[T]) {
        match &mut grads[idx] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(add) {
                    *a += *b;
                }
            }
            None => {
                grads[idx] = Some(Tensor::from_vec_unchecked(shape.to_vec(), add.to_vec()));
            }
        }
    }

    fn step_back(&self, rec: &Record, grads: &mut Vec<Option<Tensor<T>>>) {
        macro_rules! dy {
            ($out:expr) => {
                match &grads[*$out] {
                    Some(g) => g.data().to_vec(),
                    None => return,
                }
            };
        }
        match rec {
            Record::Add { a, b, out } => {
                let dy = dy!(out);
                let sh = self.vals[*a].shape().to_vec();
                Self::accum(grads, *a, &sh, &dy);
                Self::accum(grads, *b, &sh, &dy);
            }
            Record::Scale { x, c, out } => {
                let mut dy = dy!(out);
                let cf = T::fl(*c);
                for v in &mut dy {
                    *v = *v * cf;
                }
                Self::accum(grads, *x, self.vals[*x].shape(), &dy);
            }
            Record::Matmul { a, b, out } => {
                let dy = dy!(out);
                let (m, k) = (self.vals[*a].dim(0), self.vals[*a].dim(1));
                let n = self.vals[*b].dim(1);
                // dA = dY · Bᵀ
                let mut da = vec![T::zero(); m * k];
                kernel::matmul_nt(&dy, self.vals[*b].data(), &mut da, m, n, k);
                Self::accum(grads, *a, &[m, k], &da);
                // dB = Aᵀ · dY
                let mut db = vec![T::zero(); k * n];
                kernel::matmul_tn(self.vals[*a].data(), &dy, &mut db, k, m, n);
                Self::accum(grads, *b, &[k, n], &db);
            }
            Record::AddRowBias { x, bias, out } => {
                let dy = dy!(out);
                let (r, c) = (self.vals[*x].dim(0), self.vals[*x].dim(1));
                Self::accum(grads, *x, &[r, c], &dy);
                let mut db = vec![T::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += dy[i * c + j];
                    }
                }
                Self::accum(grads, *bias, &[c], &db);
            }
            Record::Bmm { a, b, out, transpose_b } => {
                let dy = dy!(out);
                let asp = self.vals[*a].shape();
                let bsp = self.vals[*b].shape();
                let (g, m, k) = (asp[0], asp[1], asp[2]);
                let n = if *transpose_b { bsp[1] } else { bsp[2] };
                let mut da = vec![T::zero(); g * m * k];
                let mut db = vec![T::zero(); self.vals[*b].numel()];
                let (adat, bdat) = (self.vals[*a].data(), self.vals[*b].data());
                let bg_sz = self.vals[*b].numel() / g;
                let tb = *transpose_b;
                use rayon::prelude::*;
                da.par_chunks_mut(m * k)
                    .zip(db.par_chunks_mut(bg_sz))
                    .enumerate()
                    .for_each(|(gi, (dag, dbg))| {
                        let dyg = &dy[gi * m * n..(gi + 1) * m * n];
                        let ag = &adat[gi * m * k..(gi + 1) * m * k];
                        let bg = &bdat[gi * bg_sz..(gi + 1) * bg_sz];
                        if tb {
                            // out = A · Bᵀ: dA = dY · B, dB = dYᵀ · A
                            kernel::matmul_nn(dyg, bg, dag, m, n, k);
                            kernel::matmul_tn(dyg, ag, dbg, n, m, k);
                        } else {
                            // dA = dY · Bᵀ, dB = Aᵀ · dY
                            kernel::matmul_nt(dyg, bg, dag, m, n, k);
                            kernel::matmul_tn(ag, dyg, dbg, k, m, n);
                        }
                    });
                Self::accum(grads, *a, asp, &da);
                Self::accum(grads, *b, bsp, &db);
            }
            Record::SoftmaxLast { x, out, scale } => {
                let dy = dy!(out);
                let y = self.vals[*out].data();
                let n = *self.vals[*out].shape().last().unwrap();
                let m = y.len() / n;
                let mut dx = vec![T::zero(); y.len()];
                kernel::softmax_rows_backward(y, &dy, &mut dx, m, n, T::fl(*scale));
                Self::accum(grads, *x, self.vals[*x].shape(), &dx);
            }
            Record::Silu { x, out } => {
                let dy = dy!(out);
                let mut dx = vec![T::zero(); dy.len()];
                kernel::silu_backward(self.vals[*x].data(), &dy, &mut dx);
                Self::accum(grads, *x, self.vals[*x].shape(), &dx);
            }
            Record::GroupNorm { x, gamma, beta, out, groups, mean, inv_std } => {
                let dy = dy!(out);
                let xs = &self.vals[*x];
                let (n, c, h, w) = (xs.dim(0), xs.dim(1), xs.dim(2), xs.dim(3));
                let mean_t: Vec<T> = mean.iter().map(|&v| T::fl(v)).collect();
                let istd_t: Vec<T> = inv_std.iter().map(|&v| T::fl(v)).collect();
                let mut dx = vec![T::zero(); xs.numel()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                kernel::group_norm_backward(
                    xs.data(),
                    self.vals[*gamma].data(),
                    &mean_t,
                    &istd_t,
                    &dy,
                    &mut dx,
                    &mut dgamma,
                    &mut dbeta,
                    n, c, h, w, *groups,
                );
                Self::accum(grads, *x, xs.shape(), &dx);
                Self::accum(grads, *gamma, &[c], &dgamma);
                Self::accum(grads, *beta, &[c], &dbeta);
            }
            Record::Conv2d { x, w, b, out, dims } => {
                let dy = dy!(out);
                let xs = &self.vals[*x];
                let ws = &self.vals[*w];
                let mut dx = vec![T::zero(); xs.numel()];
                let mut dw = vec![T::zero(); ws.numel()];
                let mut db = vec![T::zero(); dims.oc];
                kernel::conv2d_backward(xs.data(), ws.data(), &dy, &mut dx, &mut dw, &mut db, *dims);
                Self::accum(grads, *x, xs.shape(), &dx);
                Self::accum(grads, *w, ws.shape(), &dw);
                Self::accum(grads, *b, &[dims.oc], &db);
            }
            Record::Reshape { x, out } => {
                let dy = dy!(out);
                Self::accum(grads, *x, self.vals[*x].shape(), &dy);
            }
            Record::Permute4 { x, out, perm } => {
                let dyt = match &grads[*out] {
                    Some(g) => g,
                    None => return,
                };
                let mut inv = [0usize; 4];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let dx = permute4_apply(dyt, inv);
                Self::accum(grads, *x, self.vals[*x].shape(), dx.data());
            }
            Record::ConcatCh { a, b, out } => {
                let dy = dy!(out);
                let at = &self.vals[*a];
                let bt = &self.vals[*b];
                let (n, c1, c2, hw) = (at.dim(0), at.dim(1), bt.dim(1), at.dim(2) * at.dim(3));
                let mut da = vec![T::zero(); at.numel()];
                let mut db = vec![T::zero(); bt.numel()];
                for ni in 0..n {
                    let src = &dy[ni * (c1 + c2) * hw..(ni + 1) * (c1 + c2) * hw];
                    da[ni * c1 * hw..(ni + 1) * c1 * hw].copy_from_slice(&src[..c1 * hw]);
                    db[ni * c2 * hw..(ni + 1) * c2 * hw].copy_from_slice(&src[c1 * hw..]);
                }
                Self::accum(grads, *a, at.shape(), &da);
                Self::accum(grads, *b, bt.shape(), &db);
            }
            Record::Upsample2 { x, out } => {
                let dy = dy!(out);
                let xs = &self.vals[*x];
                let (n, c, h, w) = (xs.dim(0), xs.dim(1), xs.dim(2), xs.dim(3));
                let mut dx = vec![T::zero(); xs.numel()];
                kernel::upsample2_backward(&dy, &mut dx, n * c, h, w);
                Self::accum(grads, *x, xs.shape(), &dx);
            }
            Record::Embed { table, ids, out } => {
                let dy = dy!(out);
                let tb = &self.vals[*table];
                let d = tb.dim(1);
                let mut dt = vec![T::zero(); tb.numel()];
                for (slot, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += dy[slot * d + j];
                    }
                }
                Self::accum(grads, *table, tb.shape(), &dt);
            }
            Record::AddBiasHw { x, bias, out } => {
                let dy = dy!(out);
                let xs = &self.vals[*x];
                let (n, c, hw) = (xs.dim(0), xs.dim(1), xs.dim(2) * xs.dim(3));
                Self::accum(grads, *x, xs.shape(), &dy);
                let mut db = vec![T::zero(); n * c];
                for nc in 0..n * c {
                    let mut acc = T::zero();
                    for &v in &dy[nc * hw..(nc + 1) * hw] {
                        acc += v;
                    }
                    db[nc] = acc;
                }
                Self::accum(grads, *bias, &[n, c], &db);
            }
            Record::MseMean { pred, target, out } => {
                let dy = dy!(out)[0];
                let ps = &self.vals[*pred];
                let scale = T::fl(2.0) * dy / T::from_usize(ps.numel()).unwrap();
                let dp: Vec<T> = ps
                    .data()
                    .iter()
                    .zip(target.0.iter())
                    .map(|(&p, &t)| scale * (p - T::fl(t)))
                    .collect();
                Self::accum(grads, *pred, ps.shape(), &dp);
            }
        }
    }
}

fn permute4_apply<T: Elem>(x: &Tensor<T>, perm: [usize; 4]) -> Tensor<T> {
    let s = x.shape();
    let os: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        strides[i] = acc;
        acc *= s[i];
    }
    let pstr: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = vec![T::zero(); x.numel()];
    let (d0, d1, d2, d3) = (os[0], os[1], os[2], os[3]);
    let mut idx = 0;
    for i0 in 0..d0 {
        for i1 in 0..d1 {
            for i2 in 0..d2 {
                let base = i0 * pstr[0] + i1 * pstr[1] + i2 * pstr[2];
                for i3 in 0..d3 {
                    out[idx] = x.data()[base + i3 * pstr[3]];
                    idx += 1;
                }
            }
        }
    }
    Tensor::from_vec_unchecked(os, out)
}
