//! Epsilon-prediction training loop with Adam, plus checkpoint save/load in
//! the tensor container format.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{ModelConfig, NullController, UNet};
use crate::rng::{Rng, Stream};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::toyworld::Dataset;
use crate::vocab::{self, PROMPT_LEN};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing a prompt with the all-null prompt, enabling
    /// classifier-free guidance at sampling time.
    pub cond_dropout: f64,
    pub ckpt_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 30_000,
            batch: 64,
            lr: 2e-4,
            cond_dropout: 0.1,
            ckpt_every: 2000,
            log_every: 50,
        }
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: HashMap<String, Tensor<f32>>,
    v: HashMap<String, Tensor<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor<f32>, grad: &Tensor<f32>) {
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = self.lr as f32;
        let eps = self.eps as f32;
        for i in 0..param.numel() {
            let g = grad.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * g;
            let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / bc1 as f32;
            let vhat = vi / bc2 as f32;
            param.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Batch sampled for one optimization step.
pub struct Batch {
    pub images: Tensor<f32>, // [B,3,S,S] in [-1,1]
    pub prompts: Vec<[usize; PROMPT_LEN]>,
}

pub fn sample_batch(data: &Dataset, batch: usize, cond_dropout: f64, rng: &mut Rng) -> Batch {
    let s = data.size;
    let mut images = Tensor::zeros(&[batch, 3, s, s]);
    let mut prompts = Vec::with_capacity(batch);
    let item = 3 * s * s;
    for b in 0..batch {
        let idx = rng.below(data.len());
        let src = data.images[idx].data();
        for (j, &v) in src.iter().enumerate() {
            images.data_mut()[b * item + j] = v * 2.0 - 1.0;
        }
        let mut p = data.prompts[idx];
        if rng.uniform() < cond_dropout {
            p = [vocab::NULL_TOKEN; PROMPT_LEN];
        }
        prompts.push(p);
    }
    Batch { images, prompts }
}

/// One optimization step: sample per-item timesteps and noise, minimize
/// ||eps - eps_theta(add_noise(x, eps, t), t, prompt)||^2, update with Adam.
pub fn train_step(
    model: &mut UNet<f32>,
    schedule: &NoiseSchedule<f32>,
    batch: &Batch,
    opt: &mut Adam,
    rng: &mut Rng,
    step: usize,
) -> Result<f32> {
    let b = batch.images.dim(0);
    let s = batch.images.dim(2);
    let item = 3 * s * s;

    let ts: Vec<usize> = (0..b).map(|_| rng.below(schedule.t_train)).collect();
    let eps: Tensor<f32> = rng.fill_normal(&[b, 3, s, s]);
    let mut zt = Tensor::zeros(&[b, 3, s, s]);
    for bi in 0..b {
        let ab = schedule.alpha_bar(ts[bi])?;
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        for j in 0..item {
            zt.data_mut()[bi * item + j] =
                sa * batch.images.data()[bi * item + j] + sb * eps.data()[bi * item + j];
        }
    }

    let mut g = Graph::new(true);
    let out = model.forward(&mut g, &zt, &ts, &batch.prompts, &mut NullController, true)?;
    let loss_var = g.mse_mean(out.eps, &eps)?;
    let loss = g.value(loss_var).data()[0];
    if !loss.is_finite() {
        return Err(Error::TrainingAbort {
            step,
            msg: format!("non-finite loss (batch of {b}, timesteps {:?}...)", &ts[..ts.len().min(4)]),
        });
    }
    let grads = g.backward(loss_var)?;

    opt.begin_step();
    let mut by_name: HashMap<&str, &Tensor<f32>> = HashMap::new();
    let mut grad_store: Vec<(String, Tensor<f32>)> = Vec::new();
    for (name, var) in &out.tracked {
        if let Some(gv) = grads.get(*var) {
            grad_store.push((name.clone(), gv.clone()));
        }
    }
    for (name, gv) in &grad_store {
        by_name.insert(name.as_str(), gv);
    }
    drop(g);
    model.visit_mut(&mut |name, param| {
        if let Some(gv) = by_name.get(name) {
            opt.update(name, param, gv);
        }
    });
    Ok(loss)
}

pub struct TrainStats {
    pub loss_curve: Vec<f32>,
}

/// Full training run over an in-memory dataset. Smoothed-loss divergence
/// (10x the initial level for 500 consecutive steps) aborts.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut UNet<f32>,
    schedule: &NoiseSchedule<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    ckpt_path: Option<&Path>,
    mut on_log: impl FnMut(usize, f32),
) -> Result<TrainStats> {
    if data.is_empty() {
        return Err(Error::InvalidArg { op: "train", msg: "dataset is empty".into() });
    }
    let mut rng = Rng::new(seed).split(Stream::TrainNoise);
    let mut opt = Adam::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut smoothed = f32::NAN;
    let mut initial_smoothed = f32::NAN;
    let mut high_since: Option<usize> = None;

    for step in 0..cfg.steps {
        let batch = sample_batch(data, cfg.batch, cfg.cond_dropout, &mut rng);
        let loss = train_step(model, schedule, &batch, &mut opt, &mut rng, step)?;
        curve.push(loss);
        smoothed = if smoothed.is_nan() { loss } else { 0.99 * smoothed + 0.01 * loss };
        if step == 100 {
            initial_smoothed = smoothed;
        }
        if step > 100 && smoothed > 10.0 * initial_smoothed {
            let since = *high_since.get_or_insert(step);
            if step - since >= 500 {
                return Err(Error::TrainingAbort {
                    step,
                    msg: format!("smoothed loss {smoothed:.4} stuck above 10x initial"),
                });
            }
        } else {
            high_since = None;
        }
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            on_log(step, smoothed);
        }
        if let Some(path) = ckpt_path {
            if cfg.ckpt_every > 0 && step > 0 && step % cfg.ckpt_every == 0 {
                save_checkpoint(model, schedule, &curve, path)?;
            }
        }
    }
    if let Some(path) = ckpt_path {
        save_checkpoint(model, schedule, &curve, path)?;
    }
    Ok(TrainStats { loss_curve: curve })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    model: ModelConfig,
    vocab: Vec<String>,
    t_train: usize,
    beta_min: f64,
    beta_max: f64,
    trained_steps: usize,
}

pub fn save_checkpoint(
    model: &UNet<f32>,
    schedule: &NoiseSchedule<f32>,
    loss_curve: &[f32],
    path: impl AsRef<Path>,
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "checkpoint".into(),
        model: model.cfg.clone(),
        vocab: (0..vocab::vocab_size()).map(|i| vocab::token_name(i).to_string()).collect(),
        t_train: schedule.t_train,
        beta_min: schedule.betas.data()[0] as f64,
        beta_max: *schedule.betas.data().last().unwrap() as f64,
        trained_steps: loss_curve.len(),
    };
    let mut c = Container::new(serde_json::to_value(&meta).map_err(|e| Error::Container(e.to_string()))?);
    if !loss_curve.is_empty() {
        c.push_f32("loss_curve", &Tensor::from_vec_unchecked(vec![loss_curve.len()], loss_curve.to_vec()));
    }
    model.visit(&mut |name, t| c.push_f32(&format!("param.{name}"), t));
    c.save(path)
}

pub struct Checkpoint {
    pub model: UNet<f32>,
    pub t_train: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub trained_steps: usize,
    pub loss_curve: Vec<f32>,
}

impl Checkpoint {
    /// Schedule with the checkpoint's training constants and the requested
    /// number of sampling steps.
    pub fn schedule(&self, n_sample_steps: usize) -> Result<NoiseSchedule<f32>> {
        crate::schedule::make_schedule(self.t_train, self.beta_min, self.beta_max, n_sample_steps)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let c = Container::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| Error::Container(format!("checkpoint meta: {e}")))?;
    let current_vocab: Vec<String> =
        (0..vocab::vocab_size()).map(|i| vocab::token_name(i).to_string()).collect();
    if meta.vocab != current_vocab {
        return Err(Error::Container("checkpoint vocabulary does not match this build".into()));
    }
    let mut rng = Rng::new(0).split(Stream::Init);
    let mut model = UNet::new(meta.model.clone(), &mut rng)?;
    let mut missing = Vec::new();
    model.visit_mut(&mut |name, param| {
        match c.get_f32(&format!("param.{name}")) {
            Ok(t) if t.shape() == param.shape() => *param = t.clone(),
            _ => missing.push(name.to_string()),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Container(format!(
            "checkpoint missing/mismatched parameters: {:?}...",
            &missing[..missing.len().min(5)]
        )));
    }
    let loss_curve = c
        .get_f32("loss_curve")
        .map(|t| t.data().to_vec())
        .unwrap_or_default();
    Ok(Checkpoint {
        model,
        t_train: meta.t_train,
        beta_min: meta.beta_min,
        beta_max: meta.beta_max,
        trained_steps: meta.trained_steps,
        loss_curve,
    })
}
