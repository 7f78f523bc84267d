//! Raw-slice compute kernels shared by the public tensor ops and the autodiff
//! graph. Parallel loops split over disjoint output rows with a fixed per-element
//! accumulation order, so results are bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::tensor::Elem;

/// Below this many multiply-adds a kernel stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_spatial(&self) -> usize {
        self.oh * self.ow
    }
}

#[inline]
fn axpy<T: Elem>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * xi;
    }
}

/// out = a[m,k] · b[k,n], overwriting `out`.
pub fn matmul_nn<T: Elem>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, orow: &mut [T]| {
        orow.fill(T::zero());
        for kk in 0..k {
            axpy(a[i * k + kk], &b[kk * n..(kk + 1) * n], orow);
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
}

/// Dot product with four independent accumulators so the adds pipeline.
#[inline]
fn dot4<T: Elem>(x: &[T], y: &[T]) -> T {
    let n = x.len().min(y.len());
    let chunks = n / 4;
    let (mut a0, mut a1, mut a2, mut a3) = (T::zero(), T::zero(), T::zero(), T::zero());
    for c in 0..chunks {
        let i = c * 4;
        a0 += x[i] * y[i];
        a1 += x[i + 1] * y[i + 1];
        a2 += x[i + 2] * y[i + 2];
        a3 += x[i + 3] * y[i + 3];
    }
    let mut acc = (a0 + a1) + (a2 + a3);
    for i in chunks * 4..n {
        acc += x[i] * y[i];
    }
    acc
}

/// out = a[m,k] · b[n,k]ᵀ, overwriting `out`.
pub fn matmul_nt<T: Elem>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, orow: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot4(arow, &b[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
}

/// out = a[k,m]ᵀ · b[k,n], overwriting `out`.
pub fn matmul_tn<T: Elem>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, orow: &mut [T]| {
        orow.fill(T::zero());
        for kk in 0..k {
            axpy(a[kk * m + i], &b[kk * n..(kk + 1) * n], orow);
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
}

/// Batched out[g] = a[g] · b[g] with optional transposed rhs.
pub fn bmm<T: Elem>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    g: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
) {
    debug_assert_eq!(a.len(), g * m * k);
    debug_assert_eq!(out.len(), g * m * n);
    let run = |gi: usize, o: &mut [T]| {
        let asl = &a[gi * m * k..(gi + 1) * m * k];
        let bsl = &b[gi * k * n..(gi + 1) * k * n];
        if transpose_b {
            matmul_nt(asl, bsl, o, m, k, n);
        } else {
            matmul_nn(asl, bsl, o, m, k, n);
        }
    };
    if g > 1 && g * m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(m * n)
            .enumerate()
            .for_each(|(gi, o)| run(gi, o));
    } else {
        for (gi, o) in out.chunks_mut(m * n).enumerate() {
            run(gi, o);
        }
    }
}

/// Row-wise softmax of `scale * x` in place, `m` rows of `n`.
pub fn softmax_rows_inplace<T: Elem>(data: &mut [T], m: usize, n: usize, scale: T) {
    debug_assert_eq!(data.len(), m * n);
    let run = |row: &mut [T]| {
        let mut mx = T::neg_infinity();
        for v in row.iter_mut() {
            *v = *v * scale;
            if *v > mx {
                mx = *v;
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
    };
    if m * n >= PAR_THRESHOLD && m > 1 {
        data.par_chunks_mut(n).for_each(run);
    } else {
        data.chunks_mut(n).for_each(run);
    }
}

/// Softmax VJP: dx = y ⊙ (dy − ⟨dy, y⟩) per row, scaled by `scale`.
pub fn softmax_rows_backward<T: Elem>(
    y: &[T],
    dy: &[T],
    dx: &mut [T],
    m: usize,
    n: usize,
    scale: T,
) {
    let run = |r: usize, drow: &mut [T]| {
        let base = r * n;
        let mut dot = T::zero();
        for c in 0..n {
            dot += dy[base + c] * y[base + c];
        }
        for (c, d) in drow.iter_mut().enumerate() {
            *d = scale * y[base + c] * (dy[base + c] - dot);
        }
    };
    if m * n >= PAR_THRESHOLD && m > 1 {
        dx.par_chunks_mut(n).enumerate().for_each(|(r, drow)| run(r, drow));
    } else {
        for (r, drow) in dx.chunks_mut(n).enumerate() {
            run(r, drow);
        }
    }
}

#[inline]
pub fn sigmoid<T: Elem>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu_forward<T: Elem>(x: &[T], out: &mut [T]) {
    if x.len() >= PAR_THRESHOLD {
        out.par_chunks_mut(4096)
            .zip(x.par_chunks(4096))
            .for_each(|(oc, xc)| {
                for (o, &v) in oc.iter_mut().zip(xc.iter()) {
                    *o = v * sigmoid(v);
                }
            });
    } else {
        for (o, &v) in out.iter_mut().zip(x.iter()) {
            *o = v * sigmoid(v);
        }
    }
}

pub fn silu_backward<T: Elem>(x: &[T], dy: &[T], dx: &mut [T]) {
    if x.len() >= PAR_THRESHOLD {
        dx.par_chunks_mut(4096)
            .enumerate()
            .for_each(|(ci, dc)| {
                let base = ci * 4096;
                for (j, d) in dc.iter_mut().enumerate() {
                    let s = sigmoid(x[base + j]);
                    *d += dy[base + j] * (s + x[base + j] * s * (T::one() - s));
                }
            });
    } else {
        for i in 0..x.len() {
            let s = sigmoid(x[i]);
            dx[i] += dy[i] * (s + x[i] * s * (T::one() - s));
        }
    }
}

/// Extracts convolution patches of one NCHW item into a [patch, oh*ow] matrix.
pub fn im2col<T: Elem>(x: &[T], cols: &mut [T], d: &ConvDims) {
    let np = d.out_spatial();
    debug_assert_eq!(x.len(), d.c * d.h * d.w);
    debug_assert_eq!(cols.len(), d.patch() * np);
    let mut row = 0;
    for c in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let dst = &mut cols[row * np..(row + 1) * np];
                let mut p = 0;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        dst[p..p + d.ow].fill(T::zero());
                        p += d.ow;
                        continue;
                    }
                    let src = &x[(c * d.h + iy as usize) * d.w..(c * d.h + iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        dst[p] = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                        p += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add of a [patch, oh*ow] gradient back into one NCHW item.
pub fn col2im_add<T: Elem>(cols: &[T], dx: &mut [T], d: &ConvDims) {
    let np = d.out_spatial();
    let mut row = 0;
    for c in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let src = &cols[row * np..(row + 1) * np];
                let mut p = 0;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        p += d.ow;
                        continue;
                    }
                    let base = (c * d.h + iy as usize) * d.w;
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dx[base + ix as usize] += src[p];
                        }
                        p += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution: im2col per item, then weight · cols + bias.
pub fn conv2d_forward<T: Elem>(x: &[T], w: &[T], b: &[T], out: &mut [T], d: ConvDims) {
    let item_in = d.c * d.h * d.w;
    let np = d.out_spatial();
    let item_out = d.oc * np;
    let run = |ni: usize, o: &mut [T]| {
        let mut cols = vec![T::zero(); d.patch() * np];
        im2col(&x[ni * item_in..(ni + 1) * item_in], &mut cols, &d);
        matmul_nn(w, &cols, o, d.oc, d.patch(), np);
        for oc in 0..d.oc {
            let bias = b[oc];
            for v in &mut o[oc * np..(oc + 1) * np] {
                *v += bias;
            }
        }
    };
    if d.n > 1 {
        out.par_chunks_mut(item_out)
            .enumerate()
            .for_each(|(ni, o)| run(ni, o));
    } else {
        run(0, out);
    }
}

/// Backward convolution. Accumulates into dx, dw, db (item reduction in fixed order).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Elem>(
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
    d: ConvDims,
) {
    let item_in = d.c * d.h * d.w;
    let np = d.out_spatial();
    let item_out = d.oc * np;
    let patch = d.patch();

    // Per-item contributions computed in parallel, reduced in item order.
    let pieces: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..d.n)
        .into_par_iter()
        .map(|ni| {
            let xi = &x[ni * item_in..(ni + 1) * item_in];
            let dyi = &dy[ni * item_out..(ni + 1) * item_out];
            let mut cols = vec![T::zero(); patch * np];
            im2col(xi, &mut cols, &d);
            // dW_i = dY_i [oc,np] · colsᵀ [np,patch]
            let mut dwi = vec![T::zero(); d.oc * patch];
            matmul_nt(dyi, &cols, &mut dwi, d.oc, np, patch);
            // dcols = Wᵀ [patch,oc] · dY_i [oc,np]
            let mut dcols = vec![T::zero(); patch * np];
            matmul_tn(w, dyi, &mut dcols, patch, d.oc, np);
            let mut dxi = vec![T::zero(); item_in];
            col2im_add(&dcols, &mut dxi, &d);
            let mut dbi = vec![T::zero(); d.oc];
            for oc in 0..d.oc {
                let mut acc = T::zero();
                for &v in &dyi[oc * np..(oc + 1) * np] {
                    acc += v;
                }
                dbi[oc] = acc;
            }
            (dxi, dwi, dbi)
        })
        .collect();

    for (ni, (dxi, dwi, dbi)) in pieces.into_iter().enumerate() {
        let dst = &mut dx[ni * item_in..(ni + 1) * item_in];
        for (a, b) in dst.iter_mut().zip(dxi) {
            *a += b;
        }
        for (a, b) in dw.iter_mut().zip(dwi) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(dbi) {
            *a += b;
        }
    }
}

/// Group-norm forward; writes per-(item, group) mean and inverse std.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward<T: Elem>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    out: &mut [T],
    mean: &mut [T],
    inv_std: &mut [T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    groups: usize,
    eps: T,
) {
    let cg = c / groups;
    let gsz = cg * h * w;
    let hw = h * w;
    for ni in 0..n {
        for g in 0..groups {
            let start = ni * c * hw + g * cg * hw;
            let xs = &x[start..start + gsz];
            let mut mu = T::zero();
            for &v in xs {
                mu += v;
            }
            mu = mu / T::from_usize(gsz).unwrap();
            let mut var = T::zero();
            for &v in xs {
                let dv = v - mu;
                var += dv * dv;
            }
            var = var / T::from_usize(gsz).unwrap();
            let istd = T::one() / (var + eps).sqrt();
            mean[ni * groups + g] = mu;
            inv_std[ni * groups + g] = istd;
            for ci in 0..cg {
                let ch = g * cg + ci;
                let (ga, be) = (gamma[ch], beta[ch]);
                let off = start + ci * hw;
                for p in 0..hw {
                    out[off + p] = (x[off + p] - mu) * istd * ga + be;
                }
            }
        }
    }
}

/// Group-norm backward; accumulates into dx, dgamma, dbeta.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Elem>(
    x: &[T],
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
    dy: &[T],
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    groups: usize,
) {
    let cg = c / groups;
    let hw = h * w;
    let gsz = cg * hw;
    let m = T::from_usize(gsz).unwrap();
    for ni in 0..n {
        for g in 0..groups {
            let mu = mean[ni * groups + g];
            let istd = inv_std[ni * groups + g];
            let start = ni * c * hw + g * cg * hw;
            // Reductions over the group.
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ci in 0..cg {
                let ch = g * cg + ci;
                let off = start + ci * hw;
                for p in 0..hw {
                    let xhat = (x[off + p] - mu) * istd;
                    let dyv = dy[off + p];
                    dgamma[ch] += dyv * xhat;
                    dbeta[ch] += dyv;
                    let dxhat = dyv * gamma[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            for ci in 0..cg {
                let ch = g * cg + ci;
                let off = start + ci * hw;
                for p in 0..hw {
                    let xhat = (x[off + p] - mu) * istd;
                    let dxhat = dy[off + p] * gamma[ch];
                    dx[off + p] +=
                        istd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
    }
}

/// Nearest-neighbor 2x upsample, NCHW.
pub fn upsample2_forward<T: Elem>(x: &[T], out: &mut [T], nc: usize, h: usize, w: usize) {
    let (oh, ow) = (h * 2, w * 2);
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
}

pub fn upsample2_backward<T: Elem>(dy: &[T], dx: &mut [T], nc: usize, h: usize, w: usize) {
    let (oh, ow) = (h * 2, w * 2);
    for p in 0..nc {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known() {
        // [1,2;3,4] * [5,6;7,8] = [19,22;43,50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul_nn(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_nt_matches_nn() {
        let a: Vec<f64> = (0..6).map(|i| i as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect(); // 4x3
        let bt: Vec<f64> = {
            let mut t = vec![0.0; 12];
            for i in 0..4 {
                for j in 0..3 {
                    t[j * 4 + i] = b[i * 3 + j];
                }
            }
            t
        };
        let mut c1 = vec![0.0; 8];
        let mut c2 = vec![0.0; 8];
        matmul_nt(&a, &b, &mut c1, 2, 3, 4);
        matmul_nn(&a, &bt, &mut c2, 2, 3, 4);
        for (x, y) in c1.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish data.
        let d = ConvDims { n: 1, c: 2, h: 5, w: 4, oc: 1, kh: 3, kw: 3, stride: 1, pad: 1, oh: 5, ow: 4 };
        let x: Vec<f64> = (0..d.c * d.h * d.w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..d.patch() * d.out_spatial())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &mut cols, &d);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut xt = vec![0.0; x.len()];
        col2im_add(&y, &mut xt, &d);
        let rhs: f64 = x.iter().zip(&xt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn upsample_roundtrip_shapes() {
        let x: Vec<f32> = (0..4).map(|i| i as f32).collect(); // 1x1x2x2
        let mut y = vec![0.0f32; 16];
        upsample2_forward(&x, &mut y, 1, 2, 2);
        assert_eq!(y[0], 0.0);
        assert_eq!(y[1], 0.0);
        assert_eq!(y[2], 1.0);
        assert_eq!(y[5], 0.0);
        let mut dx = vec![0.0f32; 4];
        upsample2_backward(&y, &mut dx, 1, 2, 2);
        assert_eq!(dx[0], 0.0 * 4.0);
        assert_eq!(dx[3], 3.0 * 4.0);
    }
}
