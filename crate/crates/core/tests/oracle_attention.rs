//! Straight-line 64-bit oracles for every attention-control operation, plus
//! the reduction identities and structural properties. The oracles below use
//! plain nested vectors and index loops only — no shared code with the
//! implementations they check.

use tdpe_core::control::{
    appearance_only_attention, clamp_nonnegative, contrast, mutual_self_attention, pnp_attention,
    rearrange, renormalize_rows, unified_attention_basic, unified_attention_full, ControlConfig,
    UnifiedInputs,
};
use tdpe_core::rng::{Rng, Stream};
use tdpe_core::tensor::Tensor;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor<f64>) -> Mat {
    let (m, n) = (t.dim(0), t.dim(1));
    (0..m).map(|i| (0..n).map(|j| t.at(&[i, j])).collect()).collect()
}

fn from_rng(rng: &mut Rng, m: usize, n: usize, scale: f64) -> Tensor<f64> {
    rng.fill_normal_scaled(&[m, n], scale)
}

fn o_matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i][p] * b[p][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

fn o_transpose(a: &Mat) -> Mat {
    let (m, n) = (a.len(), a[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..m {
        for j in 0..n {
            out[j][i] = a[i][j];
        }
    }
    out
}

fn o_softmax(a: &Mat, scale: f64) -> Mat {
    a.iter()
        .map(|row| {
            let scaled: Vec<f64> = row.iter().map(|v| v * scale).collect();
            let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scaled.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = ex.iter().sum();
            ex.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn o_contrast(a: &Mat, beta: f64) -> Mat {
    a.iter()
        .map(|row| {
            let mu: f64 = row.iter().sum::<f64>() / row.len() as f64;
            row.iter().map(|v| (v - mu) * beta + mu).collect()
        })
        .collect()
}

fn o_rearrange(x: &Mat, y: &Mat, d: usize, c_on_scaled: bool) -> Mat {
    let s = 1.0 / (d as f64).sqrt();
    let lse = |row: &[f64]| {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
    };
    x.iter()
        .zip(y.iter())
        .map(|(xr, yr)| {
            let c = if c_on_scaled {
                let xs: Vec<f64> = xr.iter().map(|v| v * s).collect();
                let ys: Vec<f64> = yr.iter().map(|v| v * s).collect();
                lse(&ys) - lse(&xs)
            } else {
                lse(yr) - lse(xr)
            };
            let mut row: Vec<f64> = xr.iter().map(|v| v * s + c).collect();
            row.extend(yr.iter().map(|v| v * s));
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let sum: f64 = ex.iter().sum();
            ex.iter().map(|v| v / sum).collect()
        })
        .collect()
}

fn assert_close(got: &Tensor<f64>, want: &Mat, tol: f64, msg: &str) {
    let (m, n) = (got.dim(0), got.dim(1));
    assert_eq!(m, want.len(), "{msg}: row count");
    assert_eq!(n, want[0].len(), "{msg}: col count");
    for i in 0..m {
        for j in 0..n {
            let (a, b) = (got.at(&[i, j]), want[i][j]);
            assert!(
                (a - b).abs() <= tol * b.abs().max(1.0),
                "{msg} [{i},{j}]: {a} vs {b}"
            );
        }
    }
}

fn rng() -> Rng {
    Rng::new(4242).split(Stream::Eval)
}

#[test]
fn eq1_mutual_self_attention_vs_oracle() {
    let mut r = rng();
    for case in 0..30 {
        let d = 1 + case % 4;
        let n = 2 + case % 7;
        let q = from_rng(&mut r, n, d, 1.5);
        let k = from_rng(&mut r, n, d, 1.5);
        let v = from_rng(&mut r, n, d, 1.0);
        let got = mutual_self_attention(&q, &k, &v).unwrap();
        let probs = o_softmax(&o_matmul(&to_mat(&q), &o_transpose(&to_mat(&k))), 1.0 / (d as f64).sqrt());
        let want = o_matmul(&probs, &to_mat(&v));
        assert_close(&got, &want, 1e-6, "eq1");
    }
}

#[test]
fn eq2_pnp_attention_vs_oracle() {
    let mut r = rng();
    for case in 0..30 {
        let d = 1 + case % 4;
        let n = 2 + case % 7;
        let qs = from_rng(&mut r, n, d, 1.5);
        let ks = from_rng(&mut r, n, d, 1.5);
        let v = from_rng(&mut r, n, d, 1.0);
        let got = pnp_attention(&qs, &ks, &v).unwrap();
        let probs = o_softmax(&o_matmul(&to_mat(&qs), &o_transpose(&to_mat(&ks))), 1.0 / (d as f64).sqrt());
        let want = o_matmul(&probs, &to_mat(&v));
        assert_close(&got, &want, 1e-6, "eq2");
        // V = V_src reduction: identical to the source image's own attention.
        let own = mutual_self_attention(&qs, &ks, &v).unwrap();
        assert_eq!(own.data(), got.data());
    }
}

#[test]
fn fc_contrast_vs_oracle_and_mean_preservation() {
    let mut r = rng();
    for case in 0..40 {
        let m = 1 + case % 5;
        let n = 2 + case % 8;
        let x = from_rng(&mut r, m, n, 2.0);
        let beta = r.uniform_range(0.2, 3.0);
        let got = contrast(&x, beta).unwrap();
        assert_close(&got, &o_contrast(&to_mat(&x), beta), 1e-6, "fc");
        //

        // Row means preserved to 1e-7 in 64-bit.
        for i in 0..m {
            let before: f64 = (0..n).map(|j| x.at(&[i, j])).sum::<f64>() / n as f64;
            let after: f64 = (0..n).map(|j| got.at(&[i, j])).sum::<f64>() / n as f64;
            assert!((before - after).abs() < 1e-7);
        }
    }
}

#[test]
fn fc_beta_one_is_bitwise_identity() {
    let mut r = rng();
    let x = from_rng(&mut r, 6, 9, 3.0);
    let got = contrast(&x, 1.0).unwrap();
    for (a, b) in got.data().iter().zip(x.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn fr_rearrange_vs_literal_oracle() {
    let mut r = rng();
    for case in 0..40 {
        let m = 1 + case % 4;
        let n = 2 + case % 6;
        let d = 1 + case % 4;
        let x = from_rng(&mut r, m, n, 2.0);
        let y = from_rng(&mut r, m, n, 2.0);
        for c_on_scaled in [false, true] {
            let got = rearrange(&x, &y, d, c_on_scaled).unwrap();
            let want = o_rearrange(&to_mat(&x), &to_mat(&y), d, c_on_scaled);
            assert_close(&got, &want, 1e-6, "fr");
        }
    }
}

#[test]
fn fr_half_mass_exact_under_scaled_constant() {
    let mut r = rng();
    for _ in 0..50 {
        let x = from_rng(&mut r, 4, 7, 3.0);
        let y = from_rng(&mut r, 4, 7, 3.0);
        let d = 1 + r.below(4);
        let got = rearrange(&x, &y, d, true).unwrap();
        for i in 0..4 {
            let first: f64 = (0..7).map(|j| got.at(&[i, j])).sum();
            let second: f64 = (7..14).map(|j| got.at(&[i, j])).sum();
            assert!((first - 0.5).abs() < 1e-6, "first half {first}");
            assert!((second - 0.5).abs() < 1e-6);
        }
    }
}

#[test]
fn fr_suppressed_second_half_recovers_softmax_of_x() {
    let mut r = rng();
    let x = from_rng(&mut r, 3, 5, 2.0);
    let y = Tensor::full(&[3, 5], -1e9);
    let d = 4;
    let got = rearrange(&x, &y, d, true).unwrap();
    let sm = x.softmax_rows(1.0 / (d as f64).sqrt()).unwrap();
    for i in 0..3 {
        for j in 0..5 {
            // First half, renormalized by its mass, is softmax(X / sqrt(d)).
            assert!((got.at(&[i, j]) / 0.5 - sm.at(&[i, j])).abs() < 1e-6);
        }
    }
}

#[test]
fn eq3_eq4_unified_basic_vs_oracle() {
    let mut r = rng();
    let cfg = ControlConfig::default();
    for case in 0..30 {
        let d = 1 + case % 4;
        let n = 2 + case % 7;
        let qs = from_rng(&mut r, n, d, 1.2);
        let ks = from_rng(&mut r, n, d, 1.2);
        let qo = from_rng(&mut r, n, d, 1.2);
        let ka = from_rng(&mut r, n, d, 1.2);
        let va = from_rng(&mut r, n, d, 1.0);
        let got = unified_attention_basic(&qs, &ks, &qo, &ka, &va, &cfg).unwrap();
        let attn_struct = o_softmax(&o_matmul(&to_mat(&qs), &o_transpose(&to_mat(&ks))), 1.0 / (d as f64).sqrt());
        let sim = o_matmul(&to_mat(&qo), &o_transpose(&to_mat(&ka)));
        let uni = o_softmax(&o_matmul(&attn_struct, &sim), 1.0 / (d as f64).sqrt());
        let want = o_matmul(&uni, &to_mat(&va));
        assert_close(&got, &want, 1e-6, "eq3/eq4");
    }
}

#[test]
fn eq4_identity_struct_map_reduces_to_mutual() {
    let mut r = rng();
    let cfg = ControlConfig::default();
    for _ in 0..10 {
        let (n, d) = (5, 3);
        // Q_struct = K_struct = big * I makes the structural map the identity.
        let eye = Tensor::<f64>::eye(n);
        let big = eye.scale(60.0);
        let pad = |t: &Tensor<f64>| {
            // Embed the n x n identity into n x d by keeping d >= n? Instead
            // use d = n here so shapes agree.
            t.clone()
        };
        let qs = pad(&big);
        let ks = pad(&big);
        let qo = from_rng(&mut r, n, n, 1.0);
        let ka = from_rng(&mut r, n, n, 1.0);
        let va = from_rng(&mut r, n, n, 1.0);
        let got = unified_attention_basic(&qs, &ks, &qo, &ka, &va, &cfg).unwrap();
        let want = mutual_self_attention(&qo, &ka, &va).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let _ = d;
    }
}

#[test]
fn eq4_permuted_struct_map_permutes_similarity_rows() {
    let mut r = rng();
    let cfg = ControlConfig::default();
    let n = 4;
    // A hard permutation structural map: row i attends key perm[i].
    let perm = [2usize, 0, 3, 1];
    let mut qs = Tensor::<f64>::zeros(&[n, n]);
    let ks = Tensor::<f64>::eye(n).scale(60.0);
    for (i, &p) in perm.iter().enumerate() {
        qs.set(&[i, p], 60.0);
    }
    let qo = from_rng(&mut r, n, n, 1.0);
    let ka = from_rng(&mut r, n, n, 1.0);
    let va = from_rng(&mut r, n, n, 1.0);
    let got = unified_attention_basic(&qs, &ks, &qo, &ka, &va, &cfg).unwrap();
    // Oracle: permute the rows of Sim_out before the softmax.
    let sim = o_matmul(&to_mat(&qo), &o_transpose(&to_mat(&ka)));
    let permuted: Mat = perm.iter().map(|&p| sim[p].clone()).collect();
    let uni = o_softmax(&permuted, 1.0 / (n as f64).sqrt());
    let want = o_matmul(&uni, &to_mat(&va));
    assert_close(&got, &want, 1e-5, "permutation");
}

fn o_unified_full(
    qs: &Mat,
    ks: &Mat,
    qo: &Mat,
    ko: &Mat,
    vo: &Mat,
    ka: &Mat,
    va: &Mat,
    cfg: &ControlConfig,
    d: usize,
) -> Mat {
    let attn_struct = o_contrast(&o_softmax(&o_matmul(qs, &o_transpose(ks)), 1.0 / (d as f64).sqrt()), cfg.beta);
    let x = o_matmul(&attn_struct, &o_matmul(qo, &o_transpose(ka)));
    let y = o_matmul(qo, &o_transpose(ko));
    let uni = o_rearrange(&x, &y, d, cfg.c_on_scaled);
    let mut w = o_contrast(&uni, cfg.beta);
    if cfg.clamp_negative {
        for row in &mut w {
            for v in row.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            if cfg.renormalize_rows {
                let s: f64 = row.iter().sum();
                if s.abs() > 1e-12 {
                    for v in row.iter_mut() {
                        *v /= s;
                    }
                }
            }
        }
    }
    let mut stacked = va.clone();
    stacked.extend(vo.iter().cloned());
    o_matmul(&w, &stacked)
}

#[test]
fn eq5_unified_full_vs_transcription_oracle() {
    let mut r = rng();
    for case in 0..30 {
        let d = 1 + case % 4;
        let n = 2 + case % 7;
        let mk = |r: &mut Rng| from_rng(r, n, d, 1.2);
        let (qs, ks, qo, ko, vo, ka, va) =
            (mk(&mut r), mk(&mut r), mk(&mut r), mk(&mut r), mk(&mut r), mk(&mut r), mk(&mut r));
        for cfg in [
            ControlConfig::default(),
            ControlConfig { beta: 1.7, clamp_negative: false, ..Default::default() },
            ControlConfig { beta: 0.8, renormalize_rows: true, ..Default::default() },
            ControlConfig { c_on_scaled: false, ..Default::default() },
        ] {
            let got = unified_attention_full(
                UnifiedInputs {
                    q_struct: &qs,
                    k_struct: &ks,
                    q_out: &qo,
                    k_out: &ko,
                    v_out: &vo,
                    k_app: &ka,
                    v_app: &va,
                },
                &cfg,
            )
            .unwrap();
            let want = o_unified_full(
                &to_mat(&qs), &to_mat(&ks), &to_mat(&qo), &to_mat(&ko), &to_mat(&vo),
                &to_mat(&ka), &to_mat(&va), &cfg, d,
            );
            assert_close(&got, &want, 1e-6, "eq5");
        }
    }
}

#[test]
fn eq5_reduces_to_standard_self_attention() {
    // beta = 1, identity structural map, merged appearance/output features.
    let mut r = rng();
    let n = 5;
    let cfg = ControlConfig { beta: 1.0, clamp_negative: false, ..Default::default() };
    let eye_big = Tensor::<f64>::eye(n).scale(60.0);
    let qo = from_rng(&mut r, n, n, 1.0);
    let ko = from_rng(&mut r, n, n, 1.0);
    let vo = from_rng(&mut r, n, n, 1.0);
    let got = unified_attention_full(
        UnifiedInputs {
            q_struct: &eye_big,
            k_struct: &eye_big,
            q_out: &qo,
            k_out: &ko,
            v_out: &vo,
            k_app: &ko,
            v_app: &vo,
        },
        &cfg,
    )
    .unwrap();
    let want = mutual_self_attention(&qo, &ko, &vo).unwrap();
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn eq5_row_sums_before_and_after_outer_contrast() {
    // The rearranged map has unit row sums; contrast preserves them; clamping
    // plus renormalization restores them.
    let mut r = rng();
    let n = 6;
    let d = 3;
    let x = from_rng(&mut r, n, n, 2.0);
    let y = from_rng(&mut r, n, n, 2.0);
    let uni = rearrange(&x, &y, d, true).unwrap();
    for i in 0..n {
        let s: f64 = (0..2 * n).map(|j| uni.at(&[i, j])).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    let contrasted = contrast(&uni, 1.9).unwrap();
    for i in 0..n {
        let s: f64 = (0..2 * n).map(|j| contrasted.at(&[i, j])).sum();
        assert!((s - 1.0).abs() < 1e-9, "contrast must preserve row sums");
    }
    let renorm = renormalize_rows(&clamp_nonnegative(&contrasted)).unwrap();
    for i in 0..n {
        let s: f64 = (0..2 * n).map(|j| renorm.at(&[i, j])).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn eq5_invariant_under_common_row_shift_of_output_logits() {
    // Shifting both Q_out K_appᵀ and Q_out K_outᵀ logits by a common per-row
    // constant leaves the result unchanged when c_on_scaled is on. Realized
    // by feeding the shifted similarity matrices through the rearrange path
    // directly (the structural map has unit row sums, so the shift passes
    // through the product intact).
    let mut r = rng();
    let n = 5;
    let d = 2;
    let x = from_rng(&mut r, n, n, 1.5); // plays Attn'_struct (Qo Kaᵀ)
    let y = from_rng(&mut r, n, n, 1.5);
    let base = rearrange(&x, &y, d, true).unwrap();
    let mut xs = x.clone();
    let mut ys = y.clone();
    for i in 0..n {
        let c = r.uniform_range(-30.0, 30.0);
        for j in 0..n {
            xs.set(&[i, j], x.at(&[i, j]) + c);
            ys.set(&[i, j], y.at(&[i, j]) + c);
        }
    }
    let shifted = rearrange(&xs, &ys, d, true).unwrap();
    for (a, b) in base.data().iter().zip(shifted.data()) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn appearance_only_variant_matches_manual_composition() {
    let mut r = rng();
    let cfg = ControlConfig::default();
    let n = 4;
    let d = 3;
    let qo = from_rng(&mut r, n, d, 1.0);
    let ko = from_rng(&mut r, n, d, 1.0);
    let vo = from_rng(&mut r, n, d, 1.0);
    let ka = from_rng(&mut r, n, d, 1.0);
    let va = from_rng(&mut r, n, d, 1.0);
    let got = appearance_only_attention(&qo, &ko, &vo, &ka, &va, &cfg).unwrap();
    let x = qo.matmul(&ka.t2().unwrap()).unwrap();
    let y = qo.matmul(&ko.t2().unwrap()).unwrap();
    let uni = rearrange(&x, &y, d, cfg.c_on_scaled).unwrap();
    let w = clamp_nonnegative(&contrast(&uni, cfg.beta).unwrap());
    let mut stacked = va.data().to_vec();
    stacked.extend_from_slice(vo.data());
    let values = Tensor::from_vec(&[2 * n, d], stacked).unwrap();
    let want = w.matmul(&values).unwrap();
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}
