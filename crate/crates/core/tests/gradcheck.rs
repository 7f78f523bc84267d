//! Central-difference gradient verification in 64-bit: every graph op and
//! every trainable block of the U-Net, at 10 random points each.

use tdpe_core::graph::{Graph, Var};
use tdpe_core::model::{ModelConfig, NullController, UNet};
use tdpe_core::rng::{Rng, Stream};
use tdpe_core::tensor::Tensor;

const TOL: f64 = 1e-3;
const POINTS: usize = 10;

/// Checks d(loss)/d(params[i]) against central differences at random
/// coordinates. `build` must register the given leaves and return a scalar.
fn grad_check(
    name: &str,
    params: &[Tensor<f64>],
    rng: &mut Rng,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) {
    let mut g = Graph::new(true);
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = build(&mut g, &vars);
    assert_eq!(g.value(loss).numel(), 1, "{name}: loss must be scalar");
    let grads = g.backward(loss).unwrap();

    let eval = |pi: usize, ci: usize, delta: f64| -> f64 {
        let mut ps = params.to_vec();
        ps[pi].data_mut()[ci] += delta;
        let mut g = Graph::new(false);
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).data()[0]
    };

    for k in 0..POINTS {
        let pi = rng.below(params.len());
        let ci = rng.below(params[pi].numel());
        let h = 1e-4 * params[pi].data()[ci].abs().max(1.0);
        let fd = (eval(pi, ci, h) - eval(pi, ci, -h)) / (2.0 * h);
        let ad = grads.get(vars[pi]).map(|t| t.data()[ci]).unwrap_or(0.0);
        let denom = (ad.abs() + fd.abs()).max(1e-6);
        let rel = (ad - fd).abs() / denom;
        assert!(
            rel < TOL,
            "{name} point {k} (param {pi}[{ci}]): ad={ad:.9e} fd={fd:.9e} rel={rel:.3e}"
        );
    }
}

fn rng() -> Rng {
    Rng::new(20247).split(Stream::Eval)
}

#[test]
fn op_matmul_and_row_bias() {
    let mut r = rng();
    let a: Tensor<f64> = r.fill_normal(&[3, 4]);
    let b: Tensor<f64> = r.fill_normal(&[4, 5]);
    let bias: Tensor<f64> = r.fill_normal(&[5]);
    let tgt: Tensor<f64> = r.fill_normal(&[3, 5]);
    grad_check("matmul+bias", &[a, b, bias], &mut r, |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        let y = g.add_row_bias(y, v[2]).unwrap();
        g.mse_mean(y, &tgt).unwrap()
    });
}

#[test]
fn op_bmm_both_orientations() {
    let mut r = rng();
    let a: Tensor<f64> = r.fill_normal(&[2, 3, 4]);
    let b: Tensor<f64> = r.fill_normal(&[2, 4, 5]);
    let tgt: Tensor<f64> = r.fill_normal(&[2, 3, 5]);
    grad_check("bmm", &[a.clone(), b], &mut r, |g, v| {
        let y = g.bmm(v[0], v[1], false).unwrap();
        g.mse_mean(y, &tgt).unwrap()
    });
    let bt: Tensor<f64> = r.fill_normal(&[2, 5, 4]);
    grad_check("bmm_nt", &[a, bt], &mut r, |g, v| {
        let y = g.bmm(v[0], v[1], true).unwrap();
        g.mse_mean(y, &tgt).unwrap()
    });
}

#[test]
fn op_softmax_silu_scale_add() {
    let mut r = rng();
    let x: Tensor<f64> = r.fill_normal_scaled(&[4, 6], 2.0);
    let y: Tensor<f64> = r.fill_normal(&[4, 6]);
    let tgt: Tensor<f64> = r.fill_normal(&[4, 6]);
    grad_check("softmax+silu+scale+add", &[x, y], &mut r, |g, v| {
        let s = g.softmax_last(v[0], 0.7071);
        let si = g.silu(v[1]);
        let sc = g.scale(si, 1.3);
        let sum = g.add(s, sc).unwrap();
        g.mse_mean(sum, &tgt).unwrap()
    });
}

#[test]
fn op_conv2d() {
    let mut r = rng();
    let x: Tensor<f64> = r.fill_normal(&[2, 3, 6, 6]);
    let w: Tensor<f64> = r.fill_normal_scaled(&[4, 3, 3, 3], 0.4);
    let b: Tensor<f64> = r.fill_normal(&[4]);
    let tgt: Tensor<f64> = r.fill_normal(&[2, 4, 3, 3]);
    grad_check("conv2d s2p1", &[x, w, b], &mut r, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
        g.mse_mean(y, &tgt).unwrap()
    });
}

#[test]
fn op_group_norm() {
    let mut r = rng();
    let x: Tensor<f64> = r.fill_normal_scaled(&[2, 4, 3, 3], 1.5);
    let gamma: Tensor<f64> = r.fill_uniform(&[4], 0.5, 1.5);
    let beta: Tensor<f64> = r.fill_normal(&[4]);
    let tgt: Tensor<f64> = r.fill_normal(&[2, 4, 3, 3]);
    grad_check("group_norm", &[x, gamma, beta], &mut r, |g, v| {
        let y = g.group_norm(v[0], v[1], v[2], 2, 1e-5).unwrap();
        g.mse_mean(y, &tgt).unwrap()
    });
}

#[test]
fn op_shape_movers_and_embed() {
    let mut r = rng();
    let x: Tensor<f64> = r.fill_normal(&[2, 4, 2, 2]);
    let y: Tensor<f64> = r.fill_normal(&[2, 2, 2, 2]);
    let tgt: Tensor<f64> = r.fill_normal(&[2, 6, 4, 4]);
    grad_check("permute+concat+upsample", &[x, y], &mut r, |g, v| {
        let p = g.permute4(v[0], [0, 1, 3, 2]).unwrap();
        let c = g.concat_ch(p, v[1]).unwrap();
        let u = g.upsample2(c).unwrap();
        g.mse_mean(u, &tgt).unwrap()
    });

    let table: Tensor<f64> = r.fill_normal(&[7, 5]);
    let tgt2: Tensor<f64> = r.fill_normal(&[2, 3, 5]);
    let ids = vec![1usize, 4, 6, 0, 2, 4];
    grad_check("embed", &[table], &mut r, |g, v| {
        let e = g.embed(v[0], &ids, 2, 3).unwrap();
        g.mse_mean(e, &tgt2).unwrap()
    });
}

#[test]
fn op_add_bias_hw() {
    let mut r = rng();
    let x: Tensor<f64> = r.fill_normal(&[2, 3, 4, 4]);
    let bias: Tensor<f64> = r.fill_normal(&[2, 3]);
    let tgt: Tensor<f64> = r.fill_normal(&[2, 3, 4, 4]);
    grad_check("add_bias_hw", &[x, bias], &mut r, |g, v| {
        let y = g.add_bias_hw(v[0], v[1]).unwrap();
        g.mse_mean(y, &tgt).unwrap()
    });
}

/// Whole tiny U-Net: every trainable block gets 10 random coordinate checks.
/// Parameters are re-randomized so the zero-initialized convs do not gate the
/// gradient flow.
#[test]
fn full_model_blocks() {
    let cfg = ModelConfig {
        image_size: 8,
        widths: vec![4, 8],
        blocks_per_level: 1,
        attn_resolutions: vec![4],
        heads: 2,
        head_dim: 2,
        prompt_dim: 6,
        time_dim: 8,
        groups: 2,
    };
    let mut init_rng = Rng::new(1).split(Stream::Init);
    let mut model = UNet::<f64>::new(cfg, &mut init_rng).unwrap();
    let mut r = rng();
    model.visit_mut(&mut |_, t| {
        let sh = t.shape().to_vec();
        *t = r.fill_normal_scaled(&sh, 0.15);
    });

    let z: Tensor<f64> = r.fill_normal_scaled(&[1, 3, 8, 8], 0.8);
    let prompts = [[1usize, 7, 12, 0]];
    let ts = [371usize];
    let tgt: Tensor<f64> = r.fill_normal(&[1, 3, 8, 8]);

    // Autodiff gradients for every named parameter.
    let mut g = Graph::new(true);
    let out = model
        .forward(&mut g, &z, &ts, &prompts, &mut NullController, true)
        .unwrap();
    let loss = g.mse_mean(out.eps, &tgt).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut ad: std::collections::HashMap<String, Tensor<f64>> = std::collections::HashMap::new();
    for (name, var) in &out.tracked {
        if let Some(gt) = grads.get(*var) {
            ad.insert(name.clone(), gt.clone());
        }
    }
    drop(g);

    // Group parameters into blocks by their name prefix.
    let mut names = Vec::new();
    model.visit(&mut |n, t| names.push((n.to_string(), t.numel())));
    let block_of = |name: &str| -> String {
        let parts: Vec<&str> = name.split('.').collect();
        if parts.len() <= 2 {
            parts[0].to_string()
        } else {
            format!("{}.{}", parts[0], parts[1])
        }
    };
    let mut blocks: Vec<String> = names.iter().map(|(n, _)| block_of(n)).collect();
    blocks.dedup();
    blocks.sort();
    blocks.dedup();

    let eval = |name: &str, ci: usize, delta: f64, model: &mut UNet<f64>| -> f64 {
        model.visit_mut(&mut |n, t| {
            if n == name {
                t.data_mut()[ci] += delta;
            }
        });
        let mut g = Graph::new(false);
        let out = model
            .forward(&mut g, &z, &ts, &prompts, &mut NullController, false)
            .unwrap();
        let loss = g.mse_mean(out.eps, &tgt).unwrap();
        let v = g.value(loss).data()[0];
        model.visit_mut(&mut |n, t| {
            if n == name {
                t.data_mut()[ci] -= delta;
            }
        });
        v
    };

    for block in &blocks {
        let members: Vec<&(String, usize)> =
            names.iter().filter(|(n, _)| &block_of(n) == block).collect();
        for k in 0..POINTS {
            let (pname, numel) = members[r.below(members.len())];
            let ci = r.below(*numel);
            let mut x0 = 0.0;
            model.visit(&mut |n, t| {
                if n == pname {
                    x0 = t.data()[ci];
                }
            });
            let h = 1e-4 * x0.abs().max(1.0);
            let fp = eval(pname, ci, h, &mut model);
            let fm = eval(pname, ci, -h, &mut model);
            let fd = (fp - fm) / (2.0 * h);
            let adv = ad.get(pname).map(|t| t.data()[ci]).unwrap_or(0.0);
            let denom = (adv.abs() + fd.abs()).max(1e-6);
            let rel = (adv - fd).abs() / denom;
            assert!(
                rel < TOL,
                "block {block} point {k} ({pname}[{ci}]): ad={adv:.9e} fd={fd:.9e} rel={rel:.3e}"
            );
        }
    }
}
