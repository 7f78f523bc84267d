use std::time::Instant;
use tdpe_core::graph::Graph;
use tdpe_core::model::{ModelConfig, NullController, UNet};
use tdpe_core::rng::{Rng, Stream};
use tdpe_core::schedule::make_schedule;
use tdpe_core::toyworld::gen_scenes;
use tdpe_core::train::{sample_batch, train_step, Adam};

fn main() {
    for (label, cfg, batch) in [
        ("small", ModelConfig::small(), 24usize),
        ("w12/24/48 d8", ModelConfig { widths: vec![12, 24, 48], groups: 4, head_dim: 8, prompt_dim: 48, time_dim: 48, ..ModelConfig::small() }, 24),
    ] {
        let mut rng = Rng::new(5).split(Stream::Init);
        let mut model = UNet::<f32>::new(cfg, &mut rng).unwrap();
        let schedule = make_schedule(1000, 1e-4, 0.02, 50).unwrap();
        let z = rng.fill_normal_scaled(&[1, 3, 32, 32], 0.5);
        let p = [[1usize, 7, 12, 0]];
        for _ in 0..3 { let mut g = Graph::new(false); model.forward(&mut g, &z, &[500], &p, &mut NullController, false).unwrap(); }
        let t0 = Instant::now();
        let reps = 20;
        for _ in 0..reps { let mut g = Graph::new(false); model.forward(&mut g, &z, &[500], &p, &mut NullController, false).unwrap(); }
        let fwd = t0.elapsed().as_secs_f64() * 1000.0 / reps as f64;

        let data = gen_scenes(128, 9, 32).unwrap();
        let mut opt = Adam::new(2e-4);
        let mut trng = Rng::new(6).split(Stream::TrainNoise);
        let t0 = Instant::now();
        let reps = 5;
        for s in 0..reps {
            let b = sample_batch(&data, batch, 0.1, &mut trng);
            train_step(&mut model, &schedule, &b, &mut opt, &mut trng, s).unwrap();
        }
        let step = t0.elapsed().as_secs_f64() * 1000.0 / reps as f64;
        println!("{label}: params {} fwd_b1 {fwd:.1} ms, train_b{batch} {step:.0} ms", model.param_count());
    }
}
