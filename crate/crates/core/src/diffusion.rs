//! Noise schedules, forward diffusion, the noise-prediction objective, and
//! DDIM / ancestral samplers.

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::{Session, Tensor, Var};

/// Per-timestep signal/noise tables derived from a linear-beta schedule.
///
/// `alpha_bars[t]` is the cumulative product of (1 - beta) up to and
/// including step t, with `alpha_bars[0] = 1` so that t = 0 is the clean
/// data point. Signal and noise scales are `alpha(t) = sqrt(alpha_bars[t])`
/// and `sigma(t) = sqrt(1 - alpha_bars[t])`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    timesteps: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Signal scale at t; alpha(0) = 1.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bars[t].sqrt()
    }

    /// Noise scale at t; sigma(0) = 0.
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bars[t]).sqrt()
    }

    /// Signal-to-noise ratio alpha/sigma; strictly decreasing for t >= 1.
    pub fn snr(&self, t: usize) -> f64 {
        self.alpha(t) / self.sigma(t)
    }
}

/// Builds a schedule with betas linearly interpolated between the endpoints
/// (inclusive).
pub fn make_linear_schedule(
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if timesteps < 2 {
        return Err(CoreError::Configuration(format!(
            "schedule needs at least 2 timesteps, got {timesteps}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(CoreError::Configuration(format!(
            "invalid beta range [{beta_start}, {beta_end}]"
        )));
    }
    let mut betas = Vec::with_capacity(timesteps);
    for i in 0..timesteps {
        let frac = i as f64 / (timesteps - 1) as f64;
        betas.push(beta_start + (beta_end - beta_start) * frac);
    }
    let mut alpha_bars = Vec::with_capacity(timesteps + 1);
    alpha_bars.push(1.0);
    for &b in &betas {
        alpha_bars.push(alpha_bars.last().unwrap() * (1.0 - b));
    }
    let sched = NoiseSchedule {
        timesteps,
        betas,
        alpha_bars,
    };
    sched.validate()?;
    Ok(sched)
}

impl NoiseSchedule {
    fn validate(&self) -> Result<()> {
        for (i, &b) in self.betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(CoreError::Configuration(format!(
                    "beta[{i}] = {b} out of (0, 1)"
                )));
            }
        }
        for t in 1..=self.timesteps {
            if self.alpha_bars[t] >= self.alpha_bars[t - 1] {
                return Err(CoreError::Configuration(format!(
                    "alpha_bars not strictly decreasing at t = {t}"
                )));
            }
        }
        for t in 2..=self.timesteps {
            if self.snr(t) >= self.snr(t - 1) {
                return Err(CoreError::Configuration(format!(
                    "SNR not strictly decreasing at t = {t}"
                )));
            }
        }
        for t in 0..=self.timesteps {
            let a = self.alpha(t);
            let s = self.sigma(t);
            if (a * a + s * s - 1.0).abs() > 1e-12 {
                return Err(CoreError::Configuration(format!(
                    "alpha^2 + sigma^2 != 1 at t = {t}"
                )));
            }
        }
        Ok(())
    }
}

fn check_t(sched: &NoiseSchedule, t: usize) -> Result<()> {
    if t < 1 || t > sched.timesteps() {
        return Err(CoreError::Contract(format!(
            "timestep {t} outside [1, {}]",
            sched.timesteps()
        )));
    }
    Ok(())
}

/// Forward diffusion at a single timestep: alpha_t * x0 + sigma_t * eps.
pub fn diffuse(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_t(sched, t)?;
    if x0.shape() != eps.shape() {
        return Err(CoreError::Dimension(format!(
            "noise shape {:?} does not match data shape {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    let a = sched.alpha(t) as f32;
    let s = sched.sigma(t) as f32;
    let data = x0
        .data()
        .iter()
        .zip(eps.data().iter())
        .map(|(&x, &e)| a * x + s * e)
        .collect();
    Tensor::from_vec(x0.shape(), data)
}

/// Forward diffusion with a per-sample timestep; x0 is [B, ...].
pub fn diffuse_batch(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(CoreError::Dimension(format!(
            "noise shape {:?} does not match data shape {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    let batch = x0.shape()[0];
    if ts.len() != batch {
        return Err(CoreError::Contract(format!(
            "got {} timesteps for batch of {batch}",
            ts.len()
        )));
    }
    let per = x0.numel() / batch;
    let mut data = vec![0f32; x0.numel()];
    for (b, &t) in ts.iter().enumerate() {
        check_t(sched, t)?;
        let a = sched.alpha(t) as f32;
        let s = sched.sigma(t) as f32;
        for i in 0..per {
            let idx = b * per + i;
            data[idx] = a * x0.data()[idx] + s * eps.data()[idx];
        }
    }
    Tensor::from_vec(x0.shape(), data)
}

/// A network that predicts the injected noise from (x_t, t).
///
/// `predict` builds its output on the session tape so callers can train
/// through it; sampling uses a non-training session.
pub trait DenoiseModel {
    fn predict(&self, sess: &mut Session, x_t: Var, ts: &[usize]) -> Result<Var>;
}

/// Draws (t, eps) for each sample and returns the mean-squared error between
/// the model's prediction and the true noise (uniform timestep weighting).
///
/// Also returns the drawn timesteps so callers can log them.
pub fn loss_ori<M: DenoiseModel>(
    model: &M,
    sess: &mut Session,
    x0: &Tensor,
    rng: &mut Rng,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let batch = x0.shape()[0];
    let ts: Vec<usize> = (0..batch)
        .map(|_| rng.int_in(1, sched.timesteps()))
        .collect();
    let eps = Tensor::randn(x0.shape(), rng);
    let x_t = diffuse_batch(x0, &ts, &eps, sched)?;
    let x_t = sess.tape.leaf(x_t);
    let eps = sess.tape.leaf(eps);
    let pred = model.predict(sess, x_t, &ts)?;
    sess.tape.mse_mean(pred, eps)
}

/// Uniform-stride decreasing timestep subsequence ending above 0.
fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    (1..=steps)
        .rev()
        .map(|i| (i * total) / steps)
        .collect()
}

fn predict_nograd<M: DenoiseModel>(model: &M, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
    let mut sess = Session::new(false);
    let x_var = sess.tape.leaf(x_t.clone());
    let pred = model.predict(&mut sess, x_var, ts)?;
    Ok(sess.tape.to_tensor(pred))
}

/// Deterministic DDIM sampling (eta = 0) over a uniform-stride subsequence.
pub fn ddim_sample<M: DenoiseModel>(
    model: &M,
    sched: &NoiseSchedule,
    steps: usize,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor> {
    if steps == 0 || steps > sched.timesteps() {
        return Err(CoreError::Configuration(format!(
            "ddim steps {steps} outside [1, {}]",
            sched.timesteps()
        )));
    }
    let mut rng = Rng::seed_from(seed);
    let mut x = Tensor::randn(shape, &mut rng);
    let batch = shape[0];
    let ts = ddim_timesteps(sched.timesteps(), steps);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        let eps_hat = predict_nograd(model, &x, &vec![t; batch])?;
        let (a_t, s_t) = (sched.alpha(t) as f32, sched.sigma(t) as f32);
        let (a_p, s_p) = (sched.alpha(t_prev) as f32, sched.sigma(t_prev) as f32);
        for (xv, &ev) in x.data_mut().iter_mut().zip(eps_hat.data().iter()) {
            let x0_hat = (*xv - s_t * ev) / a_t;
            *xv = a_p * x0_hat + s_p * ev;
        }
    }
    Ok(x)
}

/// Ancestral DDPM sampling over all T steps with fresh seeded noise per step.
pub fn ancestral_sample<M: DenoiseModel>(
    model: &M,
    sched: &NoiseSchedule,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor> {
    let mut rng = Rng::seed_from(seed);
    let mut x = Tensor::randn(shape, &mut rng);
    let batch = shape[0];
    for t in (1..=sched.timesteps()).rev() {
        let eps_hat = predict_nograd(model, &x, &vec![t; batch])?;
        let beta = sched.beta(t) as f32;
        let a_t = (1.0 - sched.beta(t)).sqrt() as f32;
        let sig_t = sched.sigma(t) as f32;
        if t > 1 {
            let ab_prev = sched.alpha_bar(t - 1);
            let ab_cur = sched.alpha_bar(t);
            let post_var = sched.beta(t) * (1.0 - ab_prev) / (1.0 - ab_cur);
            let post_std = post_var.sqrt() as f32;
            for (xv, &ev) in x.data_mut().iter_mut().zip(eps_hat.data().iter()) {
                let mean = (*xv - (beta / sig_t) * ev) / a_t;
                *xv = mean + post_std * (rng.normal() as f32);
            }
        } else {
            for (xv, &ev) in x.data_mut().iter_mut().zip(eps_hat.data().iter()) {
                *xv = (*xv - (beta / sig_t) * ev) / a_t;
            }
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_product_schedule() {
        let s = make_linear_schedule(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - 0.5).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn schedule_endpoints_and_degenerate_t0() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        assert!((s.beta(1) - 1e-4).abs() < 1e-15);
        assert!((s.beta(100) - 0.02).abs() < 1e-15);
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.sigma(0), 0.0);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_linear_schedule(1, 1e-4, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_linear_schedule(10, 0.5, 1.0).is_err());
    }

    #[test]
    fn diffuse_zero_noise_scales_signal() {
        let s = make_linear_schedule(10, 1e-2, 0.1).unwrap();
        let x0 = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let eps = Tensor::zeros(&[1, 1, 2, 2]);
        let xt = diffuse(&x0, 4, &eps, &s).unwrap();
        let a = s.alpha(4) as f32;
        for (o, i) in xt.data().iter().zip(x0.data().iter()) {
            assert_eq!(*o, a * i);
        }
    }

    #[test]
    fn diffuse_rejects_out_of_range_t() {
        let s = make_linear_schedule(10, 1e-2, 0.1).unwrap();
        let x0 = Tensor::zeros(&[1, 1, 2, 2]);
        let eps = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(diffuse(&x0, 0, &eps, &s).is_err());
        assert!(diffuse(&x0, 11, &eps, &s).is_err());
    }

    #[test]
    fn ddim_full_stride_visits_every_timestep() {
        let ts = ddim_timesteps(8, 8);
        assert_eq!(ts, vec![8, 7, 6, 5, 4, 3, 2, 1]);
        let ts = ddim_timesteps(100, 4);
        assert_eq!(ts, vec![100, 75, 50, 25]);
    }
}
