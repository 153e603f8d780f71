//! Training loops: noise-prediction training for standalone nets and
//! block-wise distillation for the supernet.

use crate::diffusion::{loss_ori, NoiseSchedule};
use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::{Adam, Element, Session, Tensor};
use crate::unet::model::{forward_block, teacher_capture, TeacherFeatures};
use crate::unet::{layout, BlockArch, Kernel, Supernet, UNet};

/// Source of clean training batches, shape [n, C, H, W].
pub trait BatchSource {
    fn next_batch(&mut self, n: usize) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct DenoiseTrainOpts {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Record the loss every this many steps (step 0 always recorded).
    pub log_every: usize,
}

impl Default for DenoiseTrainOpts {
    fn default() -> Self {
        DenoiseTrainOpts {
            steps: 3000,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
            log_every: 100,
        }
    }
}

/// Plain noise-prediction training (the teacher stage).
pub fn train_denoiser(
    model: &mut UNet,
    data: &mut dyn BatchSource,
    sched: &NoiseSchedule,
    opts: &DenoiseTrainOpts,
) -> Result<Vec<(usize, f64)>> {
    let mut rng = Rng::stream(opts.seed, "denoise-train");
    let mut opt = Adam::new(opts.lr);
    let mut log = Vec::new();
    for step in 0..opts.steps {
        let x0 = data.next_batch(opts.batch_size)?;
        let mut sess = Session::new(true);
        let loss = loss_ori(&*model, &mut sess, &x0, &mut rng, sched)?;
        let loss_val = sess.tape.scalar_value(loss)?.to_f64();
        if !loss_val.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "noise-prediction loss became {loss_val} at step {step}"
            )));
        }
        model.params.zero_grads();
        sess.backward_into(loss, &mut model.params)?;
        opt.step(&mut model.params)?;
        if step % opts.log_every == 0 || step + 1 == opts.steps {
            log.push((step, loss_val));
        }
    }
    Ok(log)
}

#[derive(Debug, Clone)]
pub struct SupernetTrainOpts {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Master seed; the per-block streams are derived from it.
    pub seed: u64,
    /// Batches in the held-out probe used to measure progress.
    pub probe_batches: usize,
}

impl Default for SupernetTrainOpts {
    fn default() -> Self {
        SupernetTrainOpts {
            steps: 800,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
            probe_batches: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockTrainReport {
    pub block: usize,
    pub steps: usize,
    /// Probe distillation loss at the teacher architecture before training.
    pub probe_loss_start: f64,
    /// Same probe after training.
    pub probe_loss_end: f64,
}

/// Mean distillation loss of one block over captured probe features.
fn probe_block_loss(
    supernet: &Supernet,
    block: usize,
    arch: &BlockArch,
    probes: &[TeacherFeatures],
) -> Result<f64> {
    let mut total = 0.0;
    for feats in probes {
        let mut sess = Session::new(false);
        let x = sess.tape.leaf(feats.x[block].clone());
        let y = sess.tape.leaf(feats.y[block].clone());
        let emb = sess.tape.leaf(feats.t_emb.clone());
        let silu_emb = sess.tape.silu(emb);
        let y_hat = forward_block(supernet, &mut sess, block, arch, x, silu_emb)?;
        let l = sess.tape.mse_mean(y_hat, y)?;
        total += sess.tape.scalar_value(l)?.to_f64();
    }
    Ok(total / probes.len() as f64)
}

/// Trains one supernet block by distillation with single-path sampling:
/// each step captures fresh teacher features, samples one kernel choice per
/// layer, and descends the block-local L2 loss. Only the block's parameters
/// move. The trained parameters remain inside `supernet`; the report carries
/// probe losses before and after.
pub fn train_supernet_block(
    supernet: &mut Supernet,
    teacher: &UNet,
    block: usize,
    data: &mut dyn BatchSource,
    sched: &NoiseSchedule,
    opts: &SupernetTrainOpts,
) -> Result<BlockTrainReport> {
    let blocks = layout(&supernet.config)?;
    if block >= blocks.len() {
        return Err(CoreError::Contract(format!(
            "block index {block} out of range ({} blocks)",
            blocks.len()
        )));
    }
    let d = supernet.config.layers_per_block;
    let prefix = format!("{}.", blocks[block].prefix());
    let mut rng = Rng::stream(opts.seed, &format!("supernet/block{block}"));
    let mut probe_rng = Rng::stream(opts.seed, &format!("supernet/probe{block}"));

    let probes: Vec<TeacherFeatures> = (0..opts.probe_batches)
        .map(|_| {
            let x0 = data.next_batch(opts.batch_size)?;
            teacher_capture(teacher, &x0, &mut probe_rng, sched)
        })
        .collect::<Result<_>>()?;
    let teacher_block = BlockArch::uniform(Kernel::K3, d);
    let probe_loss_start = probe_block_loss(supernet, block, &teacher_block, &probes)?;

    supernet
        .params
        .set_trainable_where(|name| name.starts_with(&prefix));
    let mut opt = Adam::new(opts.lr);

    for step in 0..opts.steps {
        let x0 = data.next_batch(opts.batch_size)?;
        let feats = teacher_capture(teacher, &x0, &mut rng, sched)?;
        let arch_i = BlockArch::sample(d, &mut rng);

        let mut sess = Session::new(true);
        let x = sess.tape.leaf(feats.x[block].clone());
        let y = sess.tape.leaf(feats.y[block].clone());
        let emb = sess.tape.leaf(feats.t_emb.clone());
        let silu_emb = sess.tape.silu(emb);
        let y_hat = forward_block(supernet, &mut sess, block, &arch_i, x, silu_emb)?;
        let loss = sess.tape.mse_mean(y_hat, y)?;
        let loss_val = sess.tape.scalar_value(loss)?.to_f64();
        if !loss_val.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "block {block} distillation loss became {loss_val} at step {step}"
            )));
        }
        supernet.params.zero_grads();
        sess.backward_into(loss, &mut supernet.params)?;
        opt.step(&mut supernet.params)?;
    }

    let probe_loss_end = probe_block_loss(supernet, block, &teacher_block, &probes)?;
    // Restore the default trainable flags.
    supernet.params.set_trainable_where(|_| true);

    Ok(BlockTrainReport {
        block,
        steps: opts.steps,
        probe_loss_start,
        probe_loss_end,
    })
}
