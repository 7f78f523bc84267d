// Trains the shipped toy checkpoint. Same calls as `tdpe train --gen-n 2000`.
use tdpe_core::model::{ModelConfig, UNet};
use tdpe_core::rng::{Rng, Stream};
use tdpe_core::schedule::make_schedule;
use tdpe_core::toyworld::gen_scenes;
use tdpe_core::train::{train, TrainConfig};

fn main() {
    let seed = 17u64;
    let cfg = ModelConfig::small();
    let mut init_rng = Rng::new(seed).split(Stream::Init);
    let mut model = UNet::<f32>::new(cfg, &mut init_rng).unwrap();
    eprintln!("params: {}", model.param_count());
    let schedule = make_schedule(1000, 1e-4, 0.02, 50).unwrap();
    let data = gen_scenes(2000, seed, 32).unwrap();
    let tc = TrainConfig {
        steps: 5200,
        batch: 16,
        lr: 2e-4,
        cond_dropout: 0.1,
        ckpt_every: 500,
        log_every: 50,
    };
    let t0 = std::time::Instant::now();
    let stats = train(
        &mut model,
        &schedule,
        &data,
        &tc,
        seed,
        Some(std::path::Path::new("assets/toy-ckpt.tdpe")),
        |step, loss| eprintln!("[{:7.1}s] step {step} smoothed loss {loss:.4}", t0.elapsed().as_secs_f64()),
    )
    .unwrap();
    eprintln!("done: final smoothed loss {:.4}", stats.loss_curve[stats.loss_curve.len().saturating_sub(50)..].iter().sum::<f32>() / 50.0);
}
