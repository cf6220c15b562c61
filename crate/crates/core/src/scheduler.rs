//! Linear-beta noise schedule and deterministic (η = 0) DDIM updates.
//!
//! Timesteps are signed: `-1` denotes the clean endpoint where `ᾱ = 1`.
//! The sampling ladder is `sample_steps[i] = floor(i · t_train / T)`.

use crate::error::{Error, Result};
use crate::latent::VideoLatent;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_train: usize,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    sample_steps: Vec<usize>,
}

impl NoiseSchedule {
    pub fn new(t_train: usize, beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 || t_train < steps {
            return Err(Error::Config(format!(
                "need t_train >= T >= 1, got t_train = {t_train}, T = {steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..t_train)
            .map(|i| {
                if t_train == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_train - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(t_train);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let sample_steps = (0..steps).map(|i| i * t_train / steps).collect();
        Ok(Self {
            t_train,
            betas,
            alpha_bar,
            sample_steps,
        })
    }

    pub fn t_train(&self) -> usize {
        self.t_train
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Number of sampling steps `T`.
    pub fn steps(&self) -> usize {
        self.sample_steps.len()
    }

    pub fn sample_steps(&self) -> &[usize] {
        &self.sample_steps
    }

    pub fn alpha_bar_at(&self, t: i64) -> Result<f64> {
        match t {
            -1 => Ok(1.0),
            t if t >= 0 && (t as usize) < self.t_train => Ok(self.alpha_bar[t as usize]),
            t => Err(Error::Config(format!("timestep {t} outside [-1, {})", self.t_train))),
        }
    }

    /// Timestep of ladder rung `k` (rung 0 is the clean latent).
    pub fn ladder_timestep(&self, k: usize) -> i64 {
        assert!(k <= self.steps(), "ladder rung {k} beyond T = {}", self.steps());
        if k == 0 {
            -1
        } else {
            self.sample_steps[k - 1] as i64
        }
    }

    /// `(t, t_prev)` for denoising step index `s`, where step 0 is the noisiest.
    pub fn denoise_timesteps(&self, step_index: usize) -> (i64, i64) {
        let rung = self.steps() - step_index;
        (self.ladder_timestep(rung), self.ladder_timestep(rung - 1))
    }
}

/// Moves a latent from noise level `ᾱ_from` to `ᾱ_to` along the deterministic
/// DDIM path defined by the noise prediction `eps`.
///
/// This is `√ᾱ_to · x̂₀ + √(1 − ᾱ_to) · eps` with
/// `x̂₀ = (z − √(1 − ᾱ_from) · eps) / √ᾱ_from`. Denoising and inversion are
/// the same map in opposite directions, so reusing `eps` makes one the exact
/// algebraic inverse of the other. Equal noise levels return `z` unchanged.
pub fn ddim_transfer(z: &Tensor, eps: &Tensor, abar_from: f64, abar_to: f64) -> Result<Tensor> {
    if z.dims() != eps.dims() {
        return Err(Error::Pipeline(format!(
            "noise prediction dims {:?} differ from latent dims {:?}",
            eps.dims(),
            z.dims()
        )));
    }
    if abar_from == abar_to {
        return Ok(z.clone());
    }
    let (sa_from, sb_from) = (abar_from.sqrt(), (1.0 - abar_from).sqrt());
    let (sa_to, sb_to) = (abar_to.sqrt(), (1.0 - abar_to).sqrt());
    let mut out = z.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(eps.data()) {
        let x0 = (*o - sb_from * e) / sa_from;
        *o = sa_to * x0 + sb_to * e;
    }
    Ok(out)
}

pub fn ddim_denoise_step(
    z_t: &VideoLatent,
    eps: &VideoLatent,
    t: i64,
    t_prev: i64,
    sched: &NoiseSchedule,
) -> Result<VideoLatent> {
    if t_prev >= t || t_prev < -1 {
        return Err(Error::StepOrder { from: t, to: t_prev });
    }
    let out = ddim_transfer(
        z_t.as_tensor(),
        eps.as_tensor(),
        sched.alpha_bar_at(t)?,
        sched.alpha_bar_at(t_prev)?,
    )?;
    VideoLatent::new(out)
}

pub fn ddim_invert_step(
    z_t: &VideoLatent,
    eps: &VideoLatent,
    t: i64,
    t_next: i64,
    sched: &NoiseSchedule,
) -> Result<VideoLatent> {
    if t_next <= t {
        return Err(Error::StepOrder { from: t, to: t_next });
    }
    let out = ddim_transfer(
        z_t.as_tensor(),
        eps.as_tensor(),
        sched.alpha_bar_at(t)?,
        sched.alpha_bar_at(t_next)?,
    )?;
    VideoLatent::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn constant_beta_closed_form() {
        let b = 0.01;
        let s = NoiseSchedule::new(200, b, b, 10).unwrap();
        for (i, &a) in s.alpha_bars().iter().enumerate() {
            let want = (1.0 - b).powi(i as i32 + 1);
            assert!((a - want).abs() <= 1e-12 * want);
        }
    }

    #[test]
    fn floor_stride_ladder() {
        let s = NoiseSchedule::new(1000, 0.00085, 0.012, 50).unwrap();
        let want: Vec<usize> = (0..50).map(|i| 20 * i).collect();
        assert_eq!(s.sample_steps(), want.as_slice());
        let s = NoiseSchedule::new(10, 0.1, 0.2, 3).unwrap();
        assert_eq!(s.sample_steps(), &[0, 3, 6]);
    }

    #[test]
    fn linear_ramp_alpha_bar_matches_log_sum_oracle() {
        let s = NoiseSchedule::new(1000, 0.00085, 0.012, 50).unwrap();
        let log_sum: f64 = (0..1000)
            .map(|i| (1.0 - (0.00085 + (0.012 - 0.00085) * i as f64 / 999.0)).ln())
            .sum();
        let a999 = s.alpha_bars()[999];
        assert!((a999 - log_sum.exp()).abs() <= 1e-12 * a999);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(NoiseSchedule::new(10, 0.1, 0.2, 11).is_err());
        assert!(NoiseSchedule::new(10, 0.1, 0.2, 0).is_err());
        assert!(NoiseSchedule::new(10, 0.0, 0.2, 5).is_err());
        assert!(NoiseSchedule::new(10, 0.3, 0.2, 5).is_err());
        assert!(NoiseSchedule::new(10, 0.1, 1.0, 5).is_err());
    }

    #[test]
    fn zero_eps_rescales() {
        let z = scalar(1.7);
        let e = scalar(0.0);
        let out = ddim_transfer(&z, &e, 0.5, 0.9).unwrap();
        let want = (0.9f64 / 0.5).sqrt() * 1.7;
        assert!((out.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn degenerate_step_is_identity() {
        let z = Tensor::from_fn(&[5], |i| i as f64 - 2.3);
        let e = Tensor::from_fn(&[5], |i| (i as f64).cos());
        assert!(ddim_transfer(&z, &e, 0.42, 0.42).unwrap().bitwise_eq(&z));
    }

    #[test]
    fn scalar_denoise_oracle() {
        let (at, ap, z, e) = (0.5f64, 0.9f64, 1.0f64, 0.2f64);
        let x0 = (z - (1.0 - at).sqrt() * e) / at.sqrt();
        let want = ap.sqrt() * x0 + (1.0 - ap).sqrt() * e;
        let got = ddim_transfer(&scalar(z), &scalar(e), at, ap).unwrap().data()[0];
        assert!((got - want).abs() < 1e-15);
        assert!((got - 1.215_149_680_093_138_5).abs() < 1e-14);
    }

    #[test]
    fn scalar_invert_oracle() {
        // x-bar form: z'/√ᾱ' = z/√ᾱ + (√(1/ᾱ' − 1) − √(1/ᾱ − 1))·eps
        let (at, an, z, e) = (0.9f64, 0.8f64, 1.0f64, 0.5f64);
        let want = an.sqrt() * (z / at.sqrt() + ((1.0 / an - 1.0).sqrt() - (1.0 / at - 1.0).sqrt()) * e);
        let got = ddim_transfer(&scalar(z), &scalar(e), at, an).unwrap().data()[0];
        assert!((got - want).abs() < 1e-14);
        assert!((got - 1.017_344_640_832_056_3).abs() < 1e-14);
    }

    #[test]
    fn step_order_errors() {
        let s = NoiseSchedule::new(100, 0.001, 0.02, 10).unwrap();
        let z = VideoLatent::zeros(2, 1, 1, 1);
        assert!(matches!(
            ddim_denoise_step(&z, &z, 10, 10, &s),
            Err(Error::StepOrder { .. })
        ));
        assert!(matches!(
            ddim_invert_step(&z, &z, 10, 0, &s),
            Err(Error::StepOrder { .. })
        ));
        assert!(ddim_invert_step(&z, &z, -1, 0, &s).is_ok());
        assert!(ddim_denoise_step(&z, &z, 0, -1, &s).is_ok());
    }

    #[test]
    fn denoise_timesteps_walk_the_ladder() {
        let s = NoiseSchedule::new(1000, 0.00085, 0.012, 50).unwrap();
        assert_eq!(s.denoise_timesteps(0), (980, 960));
        assert_eq!(s.denoise_timesteps(49), (0, -1));
        assert_eq!(s.ladder_timestep(0), -1);
    }

    proptest! {
        #[test]
        fn denoise_inverts_invert(
            vals in proptest::collection::vec(-3.0f64..3.0, 2 * 2 * 2 * 2 * 2),
            rung in 0usize..50,
        ) {
            let s = NoiseSchedule::new(1000, 0.00085, 0.012, 50).unwrap();
            let z = VideoLatent::new(Tensor::new(vec![2, 2, 2, 2], vals[..16].to_vec()).unwrap()).unwrap();
            let e = VideoLatent::new(Tensor::new(vec![2, 2, 2, 2], vals[16..].to_vec()).unwrap()).unwrap();
            let (t, tn) = (s.ladder_timestep(rung), s.ladder_timestep(rung + 1));
            let up = ddim_invert_step(&z, &e, t, tn, &s).unwrap();
            let back = ddim_denoise_step(&up, &e, tn, t, &s).unwrap();
            let rel = back.distance(&z).unwrap() / z.as_tensor().l2_norm().max(1e-300);
            prop_assert!(rel < 1e-10);
        }

        #[test]
        fn alpha_bar_strictly_decreasing(a in 1e-5f64..0.05, d in 0.0f64..0.5) {
            let s = NoiseSchedule::new(300, a, a + d * (0.99 - a), 30).unwrap();
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        }
    }
}
