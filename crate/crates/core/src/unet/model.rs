//! Parameter initialization, forward passes, and teacher feature capture.

use crate::diffusion::{diffuse_batch, DenoiseModel, NoiseSchedule};
use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::{time_embed_batch, ParamStore, Session, Tensor, Var};
use crate::unet::{layout, norm_groups, BlockArch, BlockSpec, Kernel, SubnetArch, UNetConfig};

/// How convolution parameters are named: a standalone net owns one set per
/// layer, the supernet owns one per kernel choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Naming {
    Single,
    PerKernel,
}

fn conv_prefix(naming: Naming, blk: &str, layer: usize, k: Kernel) -> String {
    match naming {
        Naming::Single => format!("{blk}.l{layer}.conv"),
        Naming::PerKernel => format!("{blk}.l{layer}.k{}", k.size()),
    }
}

fn he_conv(c_out: usize, c_in: usize, k: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    let mut t = Tensor::randn(&[c_out, c_in, k, k], rng);
    for v in t.data_mut() {
        *v *= std as f32;
    }
    t
}

fn init_linear(c_out: usize, c_in: usize, rng: &mut Rng) -> Tensor {
    let std = (1.0 / c_in as f64).sqrt();
    let mut t = Tensor::randn(&[c_out, c_in], rng);
    for v in t.data_mut() {
        *v *= std as f32;
    }
    t
}

fn init_params(config: &UNetConfig, naming: Naming, seed: u64) -> Result<ParamStore> {
    let mut rng = Rng::seed_from(seed);
    let mut store = ParamStore::new();
    let blocks = layout(config)?;
    for spec in &blocks {
        let blk = spec.prefix();
        if spec.has_stem {
            store.insert(
                &format!("{blk}.stem.w"),
                he_conv(config.channels_at(0), config.image_channels, 3, &mut rng),
            )?;
            store.insert(&format!("{blk}.stem.b"), Tensor::zeros(&[config.channels_at(0)]))?;
        }
        for (j, layer) in spec.layers.iter().enumerate() {
            store.insert(
                &format!("{blk}.l{j}.norm.g"),
                Tensor::filled(&[layer.c_in], 1.0),
            )?;
            store.insert(&format!("{blk}.l{j}.norm.b"), Tensor::zeros(&[layer.c_in]))?;
            let kernels: &[Kernel] = match naming {
                Naming::Single => &[Kernel::K3],
                Naming::PerKernel => &Kernel::ALL,
            };
            for &k in kernels {
                let prefix = conv_prefix(naming, &blk, j, k);
                store.insert(
                    &format!("{prefix}.w"),
                    he_conv(layer.c_out, layer.c_in, k.size(), &mut rng),
                )?;
                store.insert(&format!("{prefix}.b"), Tensor::zeros(&[layer.c_out]))?;
            }
            store.insert(
                &format!("{blk}.l{j}.emb.w"),
                init_linear(layer.c_out, config.time_embed_dim, &mut rng),
            )?;
            store.insert(&format!("{blk}.l{j}.emb.b"), Tensor::zeros(&[layer.c_out]))?;
            if layer.c_in != layer.c_out {
                store.insert(
                    &format!("{blk}.l{j}.skip.w"),
                    he_conv(layer.c_out, layer.c_in, 1, &mut rng),
                )?;
                store.insert(&format!("{blk}.l{j}.skip.b"), Tensor::zeros(&[layer.c_out]))?;
            }
        }
        if spec.has_head {
            let c = config.channels_at(0);
            store.insert(&format!("{blk}.head.norm.g"), Tensor::filled(&[c], 1.0))?;
            store.insert(&format!("{blk}.head.norm.b"), Tensor::zeros(&[c]))?;
            // Zero-initialized head so an untrained net predicts zero noise.
            store.insert(
                &format!("{blk}.head.w"),
                Tensor::zeros(&[config.image_channels, c, 3, 3]),
            )?;
            store.insert(&format!("{blk}.head.b"), Tensor::zeros(&[config.image_channels]))?;
        }
    }
    Ok(store)
}

/// Runs one residual layer: norm -> silu -> conv(k), plus a learned
/// per-channel time shift and a (projected) residual connection.
#[allow(clippy::too_many_arguments)]
fn residual_layer(
    sess: &mut Session,
    store: &ParamStore,
    naming: Naming,
    blk: &str,
    layer_idx: usize,
    layer: &super::LayerSpec,
    k: Kernel,
    x: Var,
    silu_emb: Var,
) -> Result<Var> {
    let g = sess.param(store, &format!("{blk}.l{layer_idx}.norm.g"))?;
    let b = sess.param(store, &format!("{blk}.l{layer_idx}.norm.b"))?;
    let mut h = sess.tape.group_norm(x, norm_groups(layer.c_in), g, b)?;
    h = sess.tape.silu(h);
    let prefix = conv_prefix(naming, blk, layer_idx, k);
    let w = sess.param(store, &format!("{prefix}.w"))?;
    let wb = sess.param(store, &format!("{prefix}.b"))?;
    h = sess.tape.conv2d(h, w, wb)?;
    let ew = sess.param(store, &format!("{blk}.l{layer_idx}.emb.w"))?;
    let eb = sess.param(store, &format!("{blk}.l{layer_idx}.emb.b"))?;
    let shift = sess.tape.linear(silu_emb, ew, eb)?;
    h = sess.tape.add_channel_bias(h, shift)?;
    let res = if layer.c_in == layer.c_out {
        x
    } else {
        let sw = sess.param(store, &format!("{blk}.l{layer_idx}.skip.w"))?;
        let sb = sess.param(store, &format!("{blk}.l{layer_idx}.skip.b"))?;
        sess.tape.conv2d(x, sw, sb)?
    };
    sess.tape.add(h, res)
}

/// Runs one block (stem, residual layers, head) on an already-prepared block
/// input. `silu_emb` is silu of the raw sinusoidal embedding, shape [B, dim].
fn block_forward_inner(
    sess: &mut Session,
    store: &ParamStore,
    naming: Naming,
    spec: &BlockSpec,
    arch: &BlockArch,
    x: Var,
    silu_emb: Var,
) -> Result<Var> {
    if arch.len() != spec.layers.len() {
        return Err(CoreError::Contract(format!(
            "block {} expects {} kernel choices, got {}",
            spec.index,
            spec.layers.len(),
            arch.len()
        )));
    }
    let blk = spec.prefix();
    let mut h = x;
    if spec.has_stem {
        let w = sess.param(store, &format!("{blk}.stem.w"))?;
        let b = sess.param(store, &format!("{blk}.stem.b"))?;
        h = sess.tape.conv2d(h, w, b)?;
    }
    for (j, (layer, &k)) in spec.layers.iter().zip(arch.choices()).enumerate() {
        h = residual_layer(sess, store, naming, &blk, j, layer, k, h, silu_emb)?;
    }
    if spec.has_head {
        let c = spec.layers.last().unwrap().c_out;
        let g = sess.param(store, &format!("{blk}.head.norm.g"))?;
        let b = sess.param(store, &format!("{blk}.head.norm.b"))?;
        h = sess.tape.group_norm(h, norm_groups(c), g, b)?;
        h = sess.tape.silu(h);
        let w = sess.param(store, &format!("{blk}.head.w"))?;
        let hb = sess.param(store, &format!("{blk}.head.b"))?;
        h = sess.tape.conv2d(h, w, hb)?;
    }
    Ok(h)
}

/// Block boundary values recorded during a full forward pass.
struct ForwardTaps {
    block_in: Vec<Var>,
    block_out: Vec<Var>,
    skips: Vec<Var>,
}

fn full_forward_with_taps(
    sess: &mut Session,
    store: &ParamStore,
    naming: Naming,
    config: &UNetConfig,
    arch: &SubnetArch,
    x_t: Var,
    ts: &[usize],
) -> Result<(Var, ForwardTaps)> {
    let blocks = layout(config)?;
    if arch.blocks().len() != blocks.len() {
        return Err(CoreError::Contract(format!(
            "arch has {} blocks, network has {}",
            arch.blocks().len(),
            blocks.len()
        )));
    }
    let n = config.levels;
    let emb = sess
        .tape
        .leaf(time_embed_batch(ts, config.time_embed_dim)?);
    let silu_emb = sess.tape.silu(emb);

    let mut taps = ForwardTaps {
        block_in: Vec::with_capacity(blocks.len()),
        block_out: Vec::with_capacity(blocks.len()),
        skips: vec![x_t; n], // placeholder, overwritten per level
    };

    let mut h = x_t;
    for l in 0..n {
        let spec = &blocks[l];
        taps.block_in.push(h);
        h = block_forward_inner(sess, store, naming, spec, arch.block(l), h, silu_emb)?;
        taps.block_out.push(h);
        taps.skips[l] = h;
        if l + 1 < n {
            h = sess.tape.avg_downsample2x(h)?;
        }
    }
    {
        let spec = &blocks[n];
        taps.block_in.push(h);
        h = block_forward_inner(sess, store, naming, spec, arch.block(n), h, silu_emb)?;
        taps.block_out.push(h);
    }
    for l in (0..n).rev() {
        let idx = 2 * n - l;
        let spec = &blocks[idx];
        let prev = if l + 1 == n {
            h
        } else {
            sess.tape.nearest_upsample2x(h)?
        };
        let x_block = sess.tape.channel_concat(prev, taps.skips[l])?;
        taps.block_in.push(x_block);
        h = block_forward_inner(sess, store, naming, spec, arch.block(idx), x_block, silu_emb)?;
        taps.block_out.push(h);
    }
    Ok((h, taps))
}

/// A standalone U-Net with a fixed architecture (teacher, or a retrained
/// student).
#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    pub arch: SubnetArch,
    pub params: ParamStore,
}

impl UNet {
    pub fn init(config: &UNetConfig, arch: &SubnetArch, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(UNet {
            config: config.clone(),
            arch: arch.clone(),
            params: init_params(config, Naming::Single, seed)?,
        })
    }

    pub fn forward(&self, sess: &mut Session, x_t: Var, ts: &[usize]) -> Result<Var> {
        let (out, _) = full_forward_with_taps(
            sess,
            &self.params,
            Naming::Single,
            &self.config,
            &self.arch,
            x_t,
            ts,
        )?;
        Ok(out)
    }

    /// Runs only block `i` on a prepared input; used for distillation terms.
    pub fn forward_block(
        &self,
        sess: &mut Session,
        i: usize,
        x: Var,
        silu_emb: Var,
    ) -> Result<Var> {
        let blocks = layout(&self.config)?;
        block_forward_inner(
            sess,
            &self.params,
            Naming::Single,
            &blocks[i],
            self.arch.block(i),
            x,
            silu_emb,
        )
    }
}

impl DenoiseModel for UNet {
    fn predict(&self, sess: &mut Session, x_t: Var, ts: &[usize]) -> Result<Var> {
        self.forward(sess, x_t, ts)
    }
}

/// The weight-sharing supernet: three convolution parameter sets per layer,
/// shared norms/time projections/shortcuts.
#[derive(Debug, Clone)]
pub struct Supernet {
    pub config: UNetConfig,
    pub params: ParamStore,
}

impl Supernet {
    pub fn init(config: &UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Supernet {
            config: config.clone(),
            params: init_params(config, Naming::PerKernel, seed)?,
        })
    }

    /// Copies every parameter with the given block prefix from `other`.
    pub fn adopt_block_params(&mut self, block: usize, other: &Supernet) -> Result<()> {
        let blocks = layout(&self.config)?;
        let prefix = format!("{}.", blocks[block].prefix());
        let names: Vec<String> = self
            .params
            .iter()
            .filter(|p| p.name.starts_with(&prefix))
            .map(|p| p.name.clone())
            .collect();
        for name in names {
            let src = other.params.get(&name)?.tensor.clone();
            self.params.get_mut(&name)?.tensor = src;
        }
        Ok(())
    }
}

/// Full supernet forward under a chosen architecture.
pub fn forward_full(
    supernet: &Supernet,
    sess: &mut Session,
    arch: &SubnetArch,
    x_t: Var,
    ts: &[usize],
) -> Result<Var> {
    let (out, _) = full_forward_with_taps(
        sess,
        &supernet.params,
        Naming::PerKernel,
        &supernet.config,
        arch,
        x_t,
        ts,
    )?;
    Ok(out)
}

/// Runs only block `i` of the supernet with the given kernel choices.
pub fn forward_block(
    supernet: &Supernet,
    sess: &mut Session,
    i: usize,
    arch_i: &BlockArch,
    x: Var,
    silu_emb: Var,
) -> Result<Var> {
    let blocks = layout(&supernet.config)?;
    if i >= blocks.len() {
        return Err(CoreError::Contract(format!(
            "block index {i} out of range ({} blocks)",
            blocks.len()
        )));
    }
    block_forward_inner(
        sess,
        &supernet.params,
        Naming::PerKernel,
        &blocks[i],
        arch_i,
        x,
        silu_emb,
    )
}

/// Supernet fixed to one architecture, usable as a denoiser.
pub struct SupernetWithArch<'a> {
    pub supernet: &'a Supernet,
    pub arch: SubnetArch,
}

impl DenoiseModel for SupernetWithArch<'_> {
    fn predict(&self, sess: &mut Session, x_t: Var, ts: &[usize]) -> Result<Var> {
        forward_full(self.supernet, sess, &self.arch, x_t, ts)
    }
}

/// Inputs, targets, and skip features recorded from one frozen teacher pass.
#[derive(Debug, Clone)]
pub struct TeacherFeatures {
    /// Per-block input X_i; for decoder blocks this is the concatenated
    /// (upsampled previous output, skip) tensor.
    pub x: Vec<Tensor>,
    /// Per-block output Y_i.
    pub y: Vec<Tensor>,
    /// Encoder output per level (the skip sources).
    pub skips: Vec<Tensor>,
    /// Raw sinusoidal embedding for the batch, shape [B, dim].
    pub t_emb: Tensor,
    pub ts: Vec<usize>,
}

/// Draws (t, eps), noises the batch, and records every block boundary of the
/// teacher. No gradients are recorded.
pub fn teacher_capture(
    teacher: &UNet,
    x0: &Tensor,
    rng: &mut Rng,
    sched: &NoiseSchedule,
) -> Result<TeacherFeatures> {
    let batch = x0.shape()[0];
    let ts: Vec<usize> = (0..batch)
        .map(|_| rng.int_in(1, sched.timesteps()))
        .collect();
    let eps = Tensor::randn(x0.shape(), rng);
    let x_t = diffuse_batch(x0, &ts, &eps, sched)?;
    teacher_capture_at(teacher, &x_t, &ts)
}

/// Deterministic capture for an already-noised batch.
pub fn teacher_capture_at(teacher: &UNet, x_t: &Tensor, ts: &[usize]) -> Result<TeacherFeatures> {
    let mut sess = Session::new(false);
    let x_var = sess.tape.leaf(x_t.clone());
    let (_, taps) = full_forward_with_taps(
        &mut sess,
        &teacher.params,
        Naming::Single,
        &teacher.config,
        &teacher.arch,
        x_var,
        ts,
    )?;
    Ok(TeacherFeatures {
        x: taps.block_in.iter().map(|&v| sess.tape.to_tensor(v)).collect(),
        y: taps
            .block_out
            .iter()
            .map(|&v| sess.tape.to_tensor(v))
            .collect(),
        skips: taps.skips.iter().map(|&v| sess.tape.to_tensor(v)).collect(),
        t_emb: time_embed_batch(ts, teacher.config.time_embed_dim)?,
        ts: ts.to_vec(),
    })
}

/// Copies a standalone teacher's weights into the supernet's 3x3 slots (and
/// all shared parameters), making the supernet at the teacher architecture
/// function-identical to the teacher.
pub fn copy_teacher_convs_into_supernet(teacher: &UNet, supernet: &mut Supernet) -> Result<()> {
    if teacher.config != supernet.config {
        return Err(CoreError::Contract(
            "teacher and supernet configs differ".into(),
        ));
    }
    let names: Vec<String> = teacher.params.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let src = teacher.params.get(&name)?.tensor.clone();
        let dst_name = if let Some(pos) = name.find(".conv.") {
            // e.g. "e0.l1.conv.w" -> "e0.l1.k3.w"
            format!("{}.k3.{}", &name[..pos], &name[pos + 6..])
        } else {
            name.clone()
        };
        supernet.params.get_mut(&dst_name)?.tensor = src;
    }
    Ok(())
}
