//! From-scratch retraining of a searched subnet under the dynamic joint loss
//! gamma * (1 - beta) * L_dis + beta * L_ori, with beta rising from 0 to 1.
//!
//! L_dis sums the per-block distillation terms on teacher-captured inputs,
//! through the same block-forward path the supernet trains with. L_ori is
//! plain noise prediction through all layers. At beta = 1 the teacher is not
//! invoked at all; at beta = 0 the full-network path is not built, so both
//! endpoint identities hold exactly.

use std::time::Instant;

use crate::diffusion::{diffuse_batch, NoiseSchedule};
use crate::error::{CoreError, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Adam, Element, Session, Tensor, Var};
use crate::unet::{teacher_capture_at, BatchSource, SubnetArch, UNet};

/// How the noise-prediction weight beta evolves over retraining steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaSchedule {
    /// beta rises linearly from 0 at step 0 to 1 at `beta_steps`.
    Linear { beta_steps: usize },
    /// beta jumps from 0 to 1 at `beta_steps`.
    Step { beta_steps: usize },
    /// beta stays at `value` forever (the fixed-weight ablation).
    Fixed { value: f64 },
}

impl BetaSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BetaSchedule::Linear { beta_steps } => {
                if beta_steps == 0 {
                    return Err(CoreError::Configuration(
                        "linear beta schedule needs beta_steps >= 1".into(),
                    ));
                }
            }
            BetaSchedule::Step { .. } => {}
            BetaSchedule::Fixed { value } => {
                if !(0.0..=1.0).contains(&value) {
                    return Err(CoreError::Configuration(format!(
                        "fixed beta {value} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Steps after which beta is pinned at 1 (none for the fixed kind).
    pub fn beta_steps(&self) -> Option<usize> {
        match *self {
            BetaSchedule::Linear { beta_steps } | BetaSchedule::Step { beta_steps } => {
                Some(beta_steps)
            }
            BetaSchedule::Fixed { .. } => None,
        }
    }
}

/// beta at a given step.
pub fn beta_at(schedule: &BetaSchedule, step: usize) -> f64 {
    match *schedule {
        BetaSchedule::Linear { beta_steps } => (step as f64 / beta_steps as f64).min(1.0),
        BetaSchedule::Step { beta_steps } => {
            if step < beta_steps {
                0.0
            } else {
                1.0
            }
        }
        BetaSchedule::Fixed { value } => value,
    }
}

#[derive(Debug, Clone)]
pub struct RetrainConfig {
    /// Balances the distillation learning rate against noise prediction.
    pub gamma: f64,
    pub schedule: BetaSchedule,
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Emit a checkpoint every this many steps (0 = only the final one).
    pub checkpoint_every: usize,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            gamma: 1.0,
            schedule: BetaSchedule::Step { beta_steps: 750 },
            total_steps: 3000,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma <= 0.0 {
            return Err(CoreError::Configuration(format!(
                "gamma = {} must be positive",
                self.gamma
            )));
        }
        self.schedule.validate()?;
        if let Some(bs) = self.schedule.beta_steps() {
            if bs > self.total_steps {
                return Err(CoreError::Configuration(format!(
                    "beta_steps {bs} exceeds total_steps {}",
                    self.total_steps
                )));
            }
        }
        Ok(())
    }
}

/// Scalar components of one joint-loss evaluation; a component is `None`
/// when its path was skipped at the beta endpoint.
#[derive(Debug, Clone, Copy)]
pub struct JointComponents {
    pub beta: f64,
    pub gamma: f64,
    pub l_dis: Option<f64>,
    pub l_ori: Option<f64>,
}

/// Builds the joint loss for one batch on the session tape.
///
/// Draws (t, eps) from `rng` identically regardless of beta, so runs that
/// differ only in schedule stay step-aligned.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    student: &UNet,
    teacher: &UNet,
    sess: &mut Session,
    x0: &Tensor,
    beta: f64,
    gamma: f64,
    rng: &mut Rng,
    sched: &NoiseSchedule,
) -> Result<(Var, JointComponents)> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(CoreError::Contract(format!("beta {beta} outside [0, 1]")));
    }
    let batch = x0.shape()[0];
    let ts: Vec<usize> = (0..batch)
        .map(|_| rng.int_in(1, sched.timesteps()))
        .collect();
    let eps = Tensor::randn(x0.shape(), rng);
    let x_t = diffuse_batch(x0, &ts, &eps, sched)?;

    let mut dis: Option<Var> = None;
    let mut l_dis = None;
    if beta < 1.0 {
        let feats = teacher_capture_at(teacher, &x_t, &ts)?;
        let emb = sess.tape.leaf(feats.t_emb.clone());
        let silu_emb = sess.tape.silu(emb);
        let mut sum: Option<Var> = None;
        for i in 0..student.config.block_count() {
            let x = sess.tape.leaf(feats.x[i].clone());
            let y = sess.tape.leaf(feats.y[i].clone());
            let y_hat = student.forward_block(sess, i, x, silu_emb)?;
            let term = sess.tape.mse_mean(y_hat, y)?;
            sum = Some(match sum {
                None => term,
                Some(acc) => sess.tape.add(acc, term)?,
            });
        }
        let sum = sum.expect("at least one block");
        l_dis = Some(sess.tape.scalar_value(sum)?.to_f64());
        dis = Some(sum);
    }

    let mut ori: Option<Var> = None;
    let mut l_ori = None;
    if beta > 0.0 {
        let x_t_var = sess.tape.leaf(x_t);
        let eps_var = sess.tape.leaf(eps);
        let pred = student.forward(sess, x_t_var, &ts)?;
        let term = sess.tape.mse_mean(pred, eps_var)?;
        l_ori = Some(sess.tape.scalar_value(term)?.to_f64());
        ori = Some(term);
    }

    let total = match (dis, ori) {
        (Some(d), Some(o)) => {
            let dw = sess.tape.scale(d, gamma * (1.0 - beta));
            let ow = sess.tape.scale(o, beta);
            sess.tape.add(dw, ow)?
        }
        (Some(d), None) => sess.tape.scale(d, gamma),
        (None, Some(o)) => o,
        (None, None) => unreachable!("beta is in [0, 1]"),
    };
    Ok((
        total,
        JointComponents {
            beta,
            gamma,
            l_dis,
            l_ori,
        },
    ))
}

/// One training-log row.
#[derive(Debug, Clone, Copy)]
pub struct RetrainLogRow {
    pub step: usize,
    pub beta: f64,
    /// NaN when the distillation path was skipped that step.
    pub l_dis: f64,
    /// NaN when the noise-prediction path was skipped that step.
    pub l_ori: f64,
    pub l_total: f64,
    pub wall_ms: u128,
}

/// Receives periodic checkpoints during retraining.
pub trait RetrainSink {
    fn on_checkpoint(&mut self, step: usize, student: &UNet) -> Result<()>;
}

/// Sink that drops everything.
pub struct NullSink;

impl RetrainSink for NullSink {
    fn on_checkpoint(&mut self, _step: usize, _student: &UNet) -> Result<()> {
        Ok(())
    }
}

/// Trains a freshly initialized student of the given architecture under the
/// dynamic joint loss. Returns the trained student and the training log.
pub fn retrain(
    subnet_arch: &SubnetArch,
    teacher: &UNet,
    data: &mut dyn BatchSource,
    sched: &NoiseSchedule,
    config: &RetrainConfig,
    sink: &mut dyn RetrainSink,
) -> Result<(UNet, Vec<RetrainLogRow>)> {
    config.validate()?;
    let mut student = UNet::init(
        &teacher.config,
        subnet_arch,
        derive_seed(config.seed, "student-init"),
    )?;
    let mut rng = Rng::stream(config.seed, "retrain");
    let mut opt = Adam::new(config.lr);
    let mut log = Vec::new();
    let started = Instant::now();

    for step in 0..config.total_steps {
        let beta = beta_at(&config.schedule, step);
        let x0 = data.next_batch(config.batch_size)?;
        let mut sess = Session::new(true);
        let (loss, comps) = joint_loss(
            &student,
            teacher,
            &mut sess,
            &x0,
            beta,
            config.gamma,
            &mut rng,
            sched,
        )?;
        let total = sess.tape.scalar_value(loss)?.to_f64();
        if !total.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "joint loss became {total} at step {step}"
            )));
        }
        student.params.zero_grads();
        sess.backward_into(loss, &mut student.params)?;
        opt.step(&mut student.params)?;

        if step % config.log_every == 0 || step + 1 == config.total_steps {
            log.push(RetrainLogRow {
                step,
                beta,
                l_dis: comps.l_dis.unwrap_or(f64::NAN),
                l_ori: comps.l_ori.unwrap_or(f64::NAN),
                l_total: total,
                wall_ms: started.elapsed().as_millis(),
            });
        }
        if config.checkpoint_every > 0
            && (step + 1) % config.checkpoint_every == 0
            && step + 1 < config.total_steps
        {
            sink.on_checkpoint(step + 1, &student)?;
        }
    }
    sink.on_checkpoint(config.total_steps, &student)?;
    Ok((student, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_linear_interpolates() {
        let s = BetaSchedule::Linear { beta_steps: 1000 };
        assert_eq!(beta_at(&s, 0), 0.0);
        assert_eq!(beta_at(&s, 250), 0.25);
        assert_eq!(beta_at(&s, 1000), 1.0);
        assert_eq!(beta_at(&s, 5000), 1.0);
    }

    #[test]
    fn beta_step_thresholds() {
        let s = BetaSchedule::Step { beta_steps: 1000 };
        assert_eq!(beta_at(&s, 0), 0.0);
        assert_eq!(beta_at(&s, 999), 0.0);
        assert_eq!(beta_at(&s, 1000), 1.0);
    }

    #[test]
    fn beta_fixed_is_constant() {
        let s = BetaSchedule::Fixed { value: 0.5 };
        for step in [0, 1, 10, 100_000] {
            assert_eq!(beta_at(&s, step), 0.5);
        }
    }

    #[test]
    fn linear_with_zero_steps_is_config_error() {
        assert!(BetaSchedule::Linear { beta_steps: 0 }.validate().is_err());
        assert!(BetaSchedule::Step { beta_steps: 0 }.validate().is_ok());
    }

    #[test]
    fn beta_monotone_and_hits_bounds() {
        for schedule in [
            BetaSchedule::Linear { beta_steps: 17 },
            BetaSchedule::Step { beta_steps: 17 },
        ] {
            let mut prev = -1.0;
            for step in 0..40 {
                let b = beta_at(&schedule, step);
                assert!(b >= prev, "beta not monotone for {schedule:?}");
                prev = b;
            }
            assert_eq!(beta_at(&schedule, 0), 0.0);
            assert_eq!(beta_at(&schedule, 17), 1.0);
        }
    }
}
