//! Noise schedule, forward noising, deterministic DDIM stepping and
//! classifier-free guidance combination.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// Per-timestep diffusion constants plus the sampling-step subsequence.
#[derive(Debug, Clone)]
pub struct NoiseSchedule<T: Elem = f32> {
    pub t_train: usize,
    pub betas: Tensor<T>,
    pub alpha_bars: Tensor<T>,
    /// Timestep indices visited during sampling, strictly decreasing.
    pub sample_steps: Vec<usize>,
}

/// Classifier-free guidance settings. `scale == 1` disables guidance exactly.
#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub null_prompt: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { scale: 3.0, null_prompt: crate::vocab::NULL_TOKEN }
    }
}

/// Linear-beta schedule with evenly strided sample steps (largest stride
/// endpoint included, so 1000 train steps at 50 sample steps start at 980).
pub fn make_schedule<T: Elem>(
    t_train: usize,
    beta_min: f64,
    beta_max: f64,
    n_sample_steps: usize,
) -> Result<NoiseSchedule<T>> {
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::InvalidArg {
            op: "make_schedule",
            msg: format!("need 0 < beta_min < beta_max < 1, got {beta_min}..{beta_max}"),
        });
    }
    if n_sample_steps == 0 || n_sample_steps > t_train {
        return Err(Error::InvalidArg {
            op: "make_schedule",
            msg: format!("n_sample_steps {n_sample_steps} out of range for t_train {t_train}"),
        });
    }
    let mut betas = Vec::with_capacity(t_train);
    let mut alpha_bars = Vec::with_capacity(t_train);
    let mut prod = 1.0f64;
    for t in 0..t_train {
        let frac = if t_train > 1 { t as f64 / (t_train - 1) as f64 } else { 0.0 };
        let beta = beta_min + (beta_max - beta_min) * frac;
        prod *= 1.0 - beta;
        betas.push(T::fl(beta));
        alpha_bars.push(T::fl(prod));
    }
    let stride = t_train / n_sample_steps;
    let sample_steps: Vec<usize> = (0..n_sample_steps).rev().map(|i| i * stride).collect();
    Ok(NoiseSchedule {
        t_train,
        betas: Tensor::from_vec_unchecked(vec![t_train], betas),
        alpha_bars: Tensor::from_vec_unchecked(vec![t_train], alpha_bars),
        sample_steps,
    })
}

impl<T: Elem> NoiseSchedule<T> {
    pub fn n_sample_steps(&self) -> usize {
        self.sample_steps.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<T> {
        if t >= self.t_train {
            return Err(Error::InvalidArg {
                op: "alpha_bar",
                msg: format!("t {t} out of range ({})", self.t_train),
            });
        }
        Ok(self.alpha_bars.data()[t])
    }

    /// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
    pub fn add_noise(&self, z0: &Tensor<T>, eps: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        if z0.shape() != eps.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_noise",
                lhs: z0.shape().to_vec(),
                rhs: eps.shape().to_vec(),
            });
        }
        let ab = self.alpha_bar(t)?;
        let (sa, sb) = (ab.sqrt(), (T::one() - ab).sqrt());
        Ok(z0.scale(sa).add(&eps.scale(sb))?)
    }

    /// Predicted clean sample from z_t and a noise estimate.
    pub fn predict_x0(&self, z_t: &Tensor<T>, eps: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let ab = self.alpha_bar(t)?;
        if ab <= T::zero() {
            return Err(Error::InvalidArg {
                op: "predict_x0",
                msg: format!("alpha_bar[{t}] is zero, x0 prediction singular"),
            });
        }
        let num = z_t.sub(&eps.scale((T::one() - ab).sqrt()))?;
        Ok(num.scale(T::one() / ab.sqrt()))
    }

    /// Deterministic DDIM update from timestep `t` to `t_prev` (`None` steps
    /// all the way to the clean sample, alpha_bar = 1).
    pub fn ddim_step(
        &self,
        z_t: &Tensor<T>,
        eps: &Tensor<T>,
        t: usize,
        t_prev: Option<usize>,
    ) -> Result<Tensor<T>> {
        if z_t.shape() != eps.shape() {
            return Err(Error::ShapeMismatch {
                op: "ddim_step",
                lhs: z_t.shape().to_vec(),
                rhs: eps.shape().to_vec(),
            });
        }
        if let Some(tp) = t_prev {
            if tp > t {
                return Err(Error::InvalidArg {
                    op: "ddim_step",
                    msg: format!("t_prev {tp} must not exceed t {t}"),
                });
            }
        }
        let x0 = self.predict_x0(z_t, eps, t)?;
        let ab_prev = match t_prev {
            Some(tp) => self.alpha_bar(tp)?,
            None => T::one(),
        };
        Ok(x0.scale(ab_prev.sqrt()).add(&eps.scale((T::one() - ab_prev).sqrt()))?)
    }

    /// Inverse DDIM move: lifts a sample from noise level `ab_cur` (1.0 for a
    /// clean image) up to timestep `t_next` using the given noise estimate.
    pub fn ddim_invert_step(
        &self,
        z: &Tensor<T>,
        eps: &Tensor<T>,
        ab_cur: T,
        t_next: usize,
    ) -> Result<Tensor<T>> {
        if ab_cur <= T::zero() {
            return Err(Error::InvalidArg {
                op: "ddim_invert_step",
                msg: "current alpha_bar must be positive".into(),
            });
        }
        let x0 = z.sub(&eps.scale((T::one() - ab_cur).sqrt()))?.scale(T::one() / ab_cur.sqrt());
        let ab_next = self.alpha_bar(t_next)?;
        Ok(x0.scale(ab_next.sqrt()).add(&eps.scale((T::one() - ab_next).sqrt()))?)
    }
}

/// eps = eps_uncond + w (eps_cond - eps_uncond). Exactly eps_cond at w = 1.
pub fn cfg_combine<T: Elem>(eps_cond: &Tensor<T>, eps_uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::ShapeMismatch {
            op: "cfg_combine",
            lhs: eps_cond.shape().to_vec(),
            rhs: eps_uncond.shape().to_vec(),
        });
    }
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    let wt = T::fl(w);
    let diff = eps_cond.sub(eps_uncond)?;
    eps_uncond.add(&diff.scale(wt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Rng, Stream};

    fn sched() -> NoiseSchedule<f64> {
        make_schedule(1000, 1e-4, 0.02, 50).unwrap()
    }

    #[test]
    fn schedule_construction_defaults() {
        let s = sched();
        assert_eq!(s.sample_steps.len(), 50);
        assert_eq!(s.sample_steps[0], 980);
        assert_eq!(*s.sample_steps.last().unwrap(), 0);
        // alpha_bar[0] = 1 - beta_0
        let b0 = s.betas.data()[0];
        assert!((s.alpha_bars.data()[0] - (1.0 - b0)).abs() < 1e-12);
        // strictly decreasing alpha_bars, strictly decreasing sample steps
        for t in 1..1000 {
            assert!(s.alpha_bars.data()[t] < s.alpha_bars.data()[t - 1]);
        }
        for i in 1..50 {
            assert!(s.sample_steps[i] < s.sample_steps[i - 1]);
        }
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_schedule::<f32>(1000, 0.0, 0.02, 50).is_err());
        assert!(make_schedule::<f32>(1000, 0.03, 0.02, 50).is_err());
        assert!(make_schedule::<f32>(1000, 1e-4, 1.0, 50).is_err());
        assert!(make_schedule::<f32>(10, 1e-4, 0.02, 50).is_err());
    }

    #[test]
    fn add_noise_identities() {
        let s = sched();
        let mut rng = Rng::new(3).split(Stream::Eval);
        let z0: Tensor<f64> = rng.fill_normal(&[2, 3]);
        // eps = 0 -> scaled z0
        let z = s.add_noise(&z0, &Tensor::zeros(&[2, 3]), 500).unwrap();
        let ab = s.alpha_bar(500).unwrap();
        for (a, b) in z.data().iter().zip(z0.data()) {
            assert!((a - b * ab.sqrt()).abs() < 1e-12);
        }
        // random case vs direct recomputation
        let eps: Tensor<f64> = rng.fill_normal(&[2, 3]);
        let z = s.add_noise(&z0, &eps, 123).unwrap();
        let ab = s.alpha_bar(123).unwrap();
        for i in 0..6 {
            let want = ab.sqrt() * z0.data()[i] + (1.0 - ab).sqrt() * eps.data()[i];
            assert!((z.data()[i] - want).abs() < 1e-12);
        }
        // out-of-range t rejected
        assert!(s.add_noise(&z0, &eps, 1000).is_err());
    }

    #[test]
    fn ddim_exact_eps_recovers_x0() {
        let s = sched();
        let mut rng = Rng::new(5).split(Stream::Eval);
        let z0: Tensor<f64> = rng.fill_normal(&[4, 4]);
        let eps: Tensor<f64> = rng.fill_normal(&[4, 4]);
        for &t in &[980usize, 500, 20] {
            let zt = s.add_noise(&z0, &eps, t).unwrap();
            let back = s.ddim_step(&zt, &eps, t, None).unwrap();
            for (a, b) in back.data().iter().zip(z0.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn ddim_step_identity_when_t_prev_equals_t() {
        let s = sched();
        let mut rng = Rng::new(7).split(Stream::Eval);
        let z: Tensor<f64> = rng.fill_normal(&[3, 3]);
        let eps: Tensor<f64> = rng.fill_normal(&[3, 3]);
        let z2 = s.ddim_step(&z, &eps, 400, Some(400)).unwrap();
        for (a, b) in z.data().iter().zip(z2.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(s.ddim_step(&z, &eps, 400, Some(500)).is_err());
    }

    #[test]
    fn ddim_two_step_chain_matches_recomputed_oracle() {
        let s = sched();
        let mut rng = Rng::new(9).split(Stream::Eval);
        let z: Tensor<f64> = rng.fill_normal(&[2, 2]);
        let e1: Tensor<f64> = rng.fill_normal(&[2, 2]);
        let e2: Tensor<f64> = rng.fill_normal(&[2, 2]);
        let mid = s.ddim_step(&z, &e1, 900, Some(600)).unwrap();
        let fin = s.ddim_step(&mid, &e2, 600, Some(300)).unwrap();
        // Straight-line oracle.
        let (a9, a6, a3) = (
            s.alpha_bar(900).unwrap(),
            s.alpha_bar(600).unwrap(),
            s.alpha_bar(300).unwrap(),
        );
        for i in 0..4 {
            let x0a = (z.data()[i] - (1.0 - a9).sqrt() * e1.data()[i]) / a9.sqrt();
            let zm = a6.sqrt() * x0a + (1.0 - a6).sqrt() * e1.data()[i];
            let x0b = (zm - (1.0 - a6).sqrt() * e2.data()[i]) / a6.sqrt();
            let zf = a3.sqrt() * x0b + (1.0 - a3).sqrt() * e2.data()[i];
            assert!((fin.data()[i] - zf).abs() < 1e-12);
        }
    }

    #[test]
    fn roundtrip_f32_within_1e4() {
        let s: NoiseSchedule<f32> = make_schedule(1000, 1e-4, 0.02, 50).unwrap();
        let mut rng = Rng::new(11).split(Stream::Eval);
        let z0: Tensor<f32> = rng.fill_normal(&[3, 3]);
        let eps: Tensor<f32> = rng.fill_normal(&[3, 3]);
        // Chain down through several steps with the exact eps, then recover.
        let mut z = s.add_noise(&z0, &eps, 980).unwrap();
        let path = [980usize, 700, 420, 140, 0];
        for w in path.windows(2) {
            z = s.ddim_step(&z, &eps, w[0], Some(w[1])).unwrap();
        }
        let back = s.ddim_step(&z, &eps, 0, None).unwrap();
        for (a, b) in back.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn cfg_identities() {
        let mut rng = Rng::new(13).split(Stream::Eval);
        let c: Tensor<f64> = rng.fill_normal(&[2, 5]);
        let u: Tensor<f64> = rng.fill_normal(&[2, 5]);
        // w = 1 -> exactly cond
        let e = cfg_combine(&c, &u, 1.0).unwrap();
        assert_eq!(e.data(), c.data());
        // cond == uncond -> same
        let e = cfg_combine(&c, &c, 7.5).unwrap();
        for (a, b) in e.data().iter().zip(c.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // w = 7.5 random case vs direct evaluation
        let e = cfg_combine(&c, &u, 7.5).unwrap();
        for i in 0..10 {
            let want = u.data()[i] + 7.5 * (c.data()[i] - u.data()[i]);
            assert!((e.data()[i] - want).abs() < 1e-12);
        }
    }
}
