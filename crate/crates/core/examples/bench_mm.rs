use std::time::Instant;
use tdpe_core::graph::Graph;
use tdpe_core::rng::{Rng, Stream};

fn main() {
    let mut rng = Rng::new(1).split(Stream::Eval);
    // pieces of a 16x16 self-attention site (worst case), b=1 h=2 d=16 n=256 c=24
    let q = rng.fill_normal_scaled::<f32>(&[2, 256, 16], 1.0);
    let k = rng.fill_normal_scaled::<f32>(&[2, 256, 16], 1.0);
    let v = rng.fill_normal_scaled::<f32>(&[2, 256, 16], 1.0);

    let reps = 200;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new(false);
        let qv = g.leaf(q.clone());
        let kv = g.leaf(k.clone());
        let _ = g.bmm(qv, kv, true).unwrap();
    }
    println!("qk bmm_nt: {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new(false);
        let qv = g.leaf(q.clone());
        let kv = g.leaf(k.clone());
        let lg = g.bmm(qv, kv, true).unwrap();
        let _ = g.softmax_last(lg, 0.25);
    }
    println!("qk + softmax: {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new(false);
        let qv = g.leaf(q.clone());
        let kv = g.leaf(k.clone());
        let vv = g.leaf(v.clone());
        let lg = g.bmm(qv, kv, true).unwrap();
        let pr = g.softmax_last(lg, 0.25);
        let _ = g.bmm(pr, vv, false).unwrap();
    }
    println!("qk + softmax + av: {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // raw exp throughput
    let xs: Vec<f32> = (0..131072).map(|i| (i as f32 * 0.001) % 4.0 - 2.0).collect();
    let t0 = Instant::now();
    let mut acc = 0f32;
    for _ in 0..reps {
        for &x in &xs {
            acc += x.exp();
        }
    }
    println!("exp 131k: {:.3} ms (sink {acc})", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
