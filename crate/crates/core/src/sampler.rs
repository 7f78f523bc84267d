//! DDIM sampling loops: guided denoising steps, full sampling, and image
//! inversion with per-step records.

use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::{Controller, CrossAttnMaps, NullController, UNet};
use crate::schedule::{cfg_combine, NoiseSchedule};
use crate::tensor::{Elem, Tensor};
use crate::vocab::PROMPT_LEN;

/// Which forward passes of a guided step see the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookBranches {
    CondOnly,
    Both,
}

/// Per-step latents and conditional noise predictions from an inversion,
/// indexed by sampling-step index (0 = noisiest).
#[derive(Debug, Clone)]
pub struct InversionRecord<T: Elem = f32> {
    pub z_t: Tensor<T>,
    pub latents: Vec<Tensor<T>>,
    pub eps: Vec<Tensor<T>>,
}

impl<T: Elem> InversionRecord<T> {
    pub fn n_steps(&self) -> usize {
        self.latents.len()
    }
}

impl InversionRecord<f32> {
    /// Persists as "z_T", "z_step_{i}", "eps_step_{i}".
    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let mut c = Container::new(meta);
        c.push_f32("z_T", &self.z_t);
        for (i, z) in self.latents.iter().enumerate() {
            c.push_f32(&format!("z_step_{i}"), z);
        }
        for (i, e) in self.eps.iter().enumerate() {
            c.push_f32(&format!("eps_step_{i}"), e);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let z_t = c.get_f32("z_T")?.clone();
        let mut latents = Vec::new();
        let mut eps = Vec::new();
        for i in 0.. {
            match (c.get_f32(&format!("z_step_{i}")), c.get_f32(&format!("eps_step_{i}"))) {
                (Ok(z), Ok(e)) => {
                    latents.push(z.clone());
                    eps.push(e.clone());
                }
                _ => break,
            }
        }
        if latents.is_empty() {
            return Err(Error::Container("inversion record has no steps".into()));
        }
        Ok(InversionRecord { z_t, latents, eps })
    }
}

/// Inversion result: the record plus cross-attention maps per sampling step.
pub struct InversionOutput<T: Elem = f32> {
    pub record: InversionRecord<T>,
    /// maps[sample_step_index] = recorded maps of that forward pass.
    pub cross_maps: Vec<Vec<CrossAttnMaps<T>>>,
}

/// One guided denoising step at `step_idx` of the schedule.
///
/// Runs the conditional forward (and, when `w != 1` and an unconditional
/// prompt is given, the unconditional one), combines with CFG and applies the
/// DDIM update. Returns the new latent and the conditional branch's
/// cross-attention maps.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step<T: Elem>(
    model: &UNet<T>,
    schedule: &NoiseSchedule<T>,
    z: &Tensor<T>,
    step_idx: usize,
    cond: &[usize; PROMPT_LEN],
    uncond: Option<&[usize; PROMPT_LEN]>,
    w: f64,
    controller: &mut dyn Controller<T>,
    hooks: HookBranches,
) -> Result<(Tensor<T>, Vec<CrossAttnMaps<T>>)> {
    let steps = &schedule.sample_steps;
    if step_idx >= steps.len() {
        return Err(Error::InvalidArg {
            op: "denoise_step",
            msg: format!("step {step_idx} out of {}", steps.len()),
        });
    }
    let t = steps[step_idx];
    let t_prev = steps.get(step_idx + 1).copied();

    let (eps_cond, maps) = model.predict_noise(z, t, cond, controller)?;
    let eps = match (uncond, w) {
        (Some(un), w) if w != 1.0 => {
            let (eps_un, _) = match hooks {
                HookBranches::Both => model.predict_noise(z, t, un, controller)?,
                HookBranches::CondOnly => model.predict_noise(z, t, un, &mut NullController)?,
            };
            cfg_combine(&eps_cond, &eps_un, w)?
        }
        _ => eps_cond,
    };
    let z_next = schedule.ddim_step(z, &eps, t, t_prev)?;
    z_next
        .check_finite("denoise_step latent")
        .map_err(|_| Error::SamplingAbort { step: step_idx, msg: "non-finite latent".into() })?;
    Ok((z_next, maps))
}

/// Plain conditional DDIM sampling from a starting latent down to the clean
/// image estimate.
pub fn sample<T: Elem>(
    model: &UNet<T>,
    schedule: &NoiseSchedule<T>,
    z_init: &Tensor<T>,
    cond: &[usize; PROMPT_LEN],
    uncond: Option<&[usize; PROMPT_LEN]>,
    w: f64,
) -> Result<Tensor<T>> {
    let mut z = z_init.clone();
    let n = schedule.n_sample_steps();
    for i in 0..n {
        let (zn, _) = denoise_step(
            model, schedule, &z, i, cond, uncond, w, &mut NullController, HookBranches::CondOnly,
        )?;
        z = zn;
    }
    // Final move from the smallest timestep to the clean estimate.
    let t_last = *schedule.sample_steps.last().unwrap();
    let (eps, _) = model.predict_noise(&z, t_last, cond, &mut NullController)?;
    schedule.ddim_step(&z, &eps, t_last, None)
}

/// DDIM inversion: runs the reverse recursion with conditional predictions
/// only (guidance scale 1), recording latents, predictions and cross-attention
/// maps at every step. `image` must be in [-1, 1].
pub fn ddim_invert<T: Elem>(
    model: &UNet<T>,
    schedule: &NoiseSchedule<T>,
    image: &Tensor<T>,
    prompt: &[usize; PROMPT_LEN],
) -> Result<InversionOutput<T>> {
    let lo = image.min_value().to_f64().unwrap();
    let hi = image.max_value().to_f64().unwrap();
    if lo < -1.0 - 1e-4 || hi > 1.0 + 1e-4 {
        return Err(Error::InvalidArg {
            op: "ddim_invert",
            msg: format!("image range [{lo:.3}, {hi:.3}] outside [-1, 1]"),
        });
    }
    let n = schedule.n_sample_steps();
    let mut latents = vec![Tensor::zeros(&[1]); n];
    let mut eps_rec = vec![Tensor::zeros(&[1]); n];
    let mut maps_rec: Vec<Vec<CrossAttnMaps<T>>> = (0..n).map(|_| Vec::new()).collect();

    let mut z = image.clone();
    let mut ab_cur = T::one();
    // March clean -> noisy through sample_steps in ascending order.
    for (j, &t) in schedule.sample_steps.iter().rev().enumerate() {
        let sample_idx = n - 1 - j;
        let (eps, maps) = model.predict_noise(&z, t, prompt, &mut NullController)?;
        z = schedule.ddim_invert_step(&z, &eps, ab_cur, t)?;
        if z.check_finite("invert latent").is_err() {
            return Err(Error::SamplingAbort {
                step: sample_idx,
                msg: "non-finite latent during inversion".into(),
            });
        }
        ab_cur = schedule.alpha_bar(t)?;
        latents[sample_idx] = z.clone();
        eps_rec[sample_idx] = eps;
        maps_rec[sample_idx] = maps;
    }
    Ok(InversionOutput {
        record: InversionRecord { z_t: latents[0].clone(), latents, eps: eps_rec },
        cross_maps: maps_rec,
    })
}

/// Inversion followed by plain resampling with the same prompt at w = 1.
pub fn invert_then_reconstruct<T: Elem>(
    model: &UNet<T>,
    schedule: &NoiseSchedule<T>,
    image: &Tensor<T>,
    prompt: &[usize; PROMPT_LEN],
) -> Result<Tensor<T>> {
    let inv = ddim_invert(model, schedule, image, prompt)?;
    sample(model, schedule, &inv.record.z_t, prompt, None, 1.0)
}
