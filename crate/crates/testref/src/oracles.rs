//! Brute-force and closed-form oracles for search, cost accounting, and the
//! samplers.

use dnas_core::diffusion::NoiseSchedule;
use dnas_core::search::CandidateEval;
use dnas_core::tensor::ParamStore;
use dnas_core::unet::{Kernel, SubnetArch, UNetConfig};

use crate::refops::{self, RefTensor};

/// Constrained minimum by exhaustive scan: among candidates with
/// loss <= r * base_loss, take minimal cost, then minimal loss, then the
/// earliest index. Written as filter + full sort, unlike the streaming
/// selection it checks.
pub fn brute_force_select(table: &[CandidateEval], base_loss: f64, r: f64) -> Option<usize> {
    let mut satisfiers: Vec<usize> = (0..table.len())
        .filter(|&i| table[i].loss <= r * base_loss)
        .collect();
    satisfiers.sort_by(|&a, &b| {
        table[a]
            .cost
            .cmp(&table[b].cost)
            .then(table[a].loss.total_cmp(&table[b].loss))
            .then(a.cmp(&b))
    });
    satisfiers.first().copied()
}

/// Counts the multiplies of one same-padding convolution by simulating its
/// loop nest.
pub fn conv_macs_by_enumeration(h: usize, w: usize, c_in: usize, c_out: usize, k: usize) -> u64 {
    let mut count = 0u64;
    for _i in 0..h {
        for _j in 0..w {
            for _co in 0..c_out {
                for _ci in 0..c_in {
                    count += (k * k) as u64;
                }
            }
        }
    }
    count
}

/// Total network multiplies by walking the architecture with independent
/// channel arithmetic (stem, residual convs, 1x1 channel-matching shortcuts,
/// head), counting each convolution by enumeration.
pub fn network_macs_by_enumeration(config: &UNetConfig, arch: &SubnetArch) -> u64 {
    let n = config.levels;
    let ch = |l: usize| config.base_channels * config.channel_mult[l];
    let res = |l: usize| config.image_size >> l;
    let mut total = 0u64;
    let mut block = 0usize;

    let count_block = |level: usize, c_first_in: usize, has_stem: bool, has_head: bool,
                           choices: &[Kernel]| {
        let r = res(level);
        let mut macs = 0u64;
        if has_stem {
            macs += conv_macs_by_enumeration(r, r, config.image_channels, ch(0), 3);
        }
        let mut c_in = c_first_in;
        for &k in choices {
            let c_out = ch(level);
            macs += conv_macs_by_enumeration(r, r, c_in, c_out, k.size());
            if c_in != c_out {
                macs += conv_macs_by_enumeration(r, r, c_in, c_out, 1);
            }
            c_in = c_out;
        }
        if has_head {
            macs += conv_macs_by_enumeration(r, r, ch(0), config.image_channels, 3);
        }
        macs
    };

    for l in 0..n {
        let c_first = if l == 0 { ch(0) } else { ch(l - 1) };
        total += count_block(l, c_first, l == 0, false, arch.block(block).choices());
        block += 1;
    }
    let top = n - 1;
    total += count_block(top, ch(top), false, false, arch.block(block).choices());
    block += 1;
    for l in (0..n).rev() {
        let prev = if l == top { ch(top) } else { ch(l + 1) };
        total += count_block(l, prev + ch(l), false, l == 0, arch.block(block).choices());
        block += 1;
    }
    total
}

/// The DDIM recursion with a zero predictor: x0_hat = x_t / alpha_t, so each
/// step multiplies by alpha_prev / alpha_cur. Runs the recursion in f64.
pub fn ddim_zero_predictor_final(
    sched: &NoiseSchedule,
    steps: usize,
    x_start: &[f32],
) -> Vec<f64> {
    let total = sched.timesteps();
    let ts: Vec<usize> = (1..=steps).rev().map(|i| (i * total) / steps).collect();
    let mut x: Vec<f64> = x_start.iter().map(|&v| v as f64).collect();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        let a_t = sched.alpha(t);
        let a_p = sched.alpha(t_prev);
        for v in x.iter_mut() {
            *v = a_p * (*v / a_t);
        }
    }
    x
}

/// Hand-unrolled two-step ancestral chain with a zero predictor, fresh noise
/// supplied by the caller (one slice per step for t = 2).
pub fn ancestral_zero_predictor_t2(
    sched: &NoiseSchedule,
    x_start: &[f32],
    noise_t2: &[f64],
) -> Vec<f64> {
    assert_eq!(sched.timesteps(), 2);
    let mut x: Vec<f64> = x_start.iter().map(|&v| v as f64).collect();
    // t = 2: mean = x / sqrt(1 - beta_2), plus posterior noise.
    let beta2 = sched.beta(2);
    let post_var = beta2 * (1.0 - sched.alpha_bar(1)) / (1.0 - sched.alpha_bar(2));
    for (v, &z) in x.iter_mut().zip(noise_t2.iter()) {
        *v = *v / (1.0 - beta2).sqrt() + post_var.sqrt() * z;
    }
    // t = 1: no noise on the last step.
    let beta1 = sched.beta(1);
    for v in x.iter_mut() {
        *v /= (1.0 - beta1).sqrt();
    }
    x
}

/// An independent full U-Net forward built from the naive reference ops,
/// reading parameters by name from a standalone network's store. Mirrors the
/// documented layer recipe: [stem] -> d x (norm, silu, conv, time shift,
/// residual) -> [head], with mean-pool/upsample/concat transitions.
pub fn naive_unet_forward(
    config: &UNetConfig,
    params: &ParamStore<f32>,
    x_t: &RefTensor,
    ts: &[usize],
) -> RefTensor {
    let n = config.levels;
    let ch = |l: usize| config.base_channels * config.channel_mult[l];
    let get = |name: &str| -> RefTensor {
        let p = params.get(name).expect("parameter present");
        RefTensor::new(
            p.tensor.shape(),
            p.tensor.data().iter().map(|&v| v as f64).collect(),
        )
    };
    let emb_dim = config.time_embed_dim;
    let mut emb = RefTensor::zeros(&[ts.len(), emb_dim]);
    for (b, &t) in ts.iter().enumerate() {
        let half = emb_dim / 2;
        for j in 0..half {
            let exponent = if half > 1 {
                j as f64 / (half - 1) as f64
            } else {
                0.0
            };
            let freq = 10_000f64.powf(-exponent);
            emb.data[b * emb_dim + j] = (t as f64 * freq).sin();
            emb.data[b * emb_dim + half + j] = (t as f64 * freq).cos();
        }
    }
    let silu_emb = refops::silu(&emb);

    let layer = |blk: &str, j: usize, c_in: usize, c_out: usize, x: &RefTensor| -> RefTensor {
        let groups = c_in.min(4);
        let h = refops::group_norm(
            x,
            groups,
            &get(&format!("{blk}.l{j}.norm.g")).data,
            &get(&format!("{blk}.l{j}.norm.b")).data,
            1e-5,
        );
        let h = refops::silu(&h);
        let h = refops::conv2d(
            &h,
            &get(&format!("{blk}.l{j}.conv.w")),
            &get(&format!("{blk}.l{j}.conv.b")).data,
        );
        let shift = refops::linear(
            &silu_emb,
            &get(&format!("{blk}.l{j}.emb.w")),
            &get(&format!("{blk}.l{j}.emb.b")).data,
        );
        let h = refops::add_channel_bias(&h, &shift);
        let res = if c_in == c_out {
            x.clone()
        } else {
            refops::conv2d(
                x,
                &get(&format!("{blk}.l{j}.skip.w")),
                &get(&format!("{blk}.l{j}.skip.b")).data,
            )
        };
        refops::add(&h, &res)
    };

    let run_block = |blk: &str, level: usize, c_first_in: usize, d: usize, x: &RefTensor| {
        let mut h = x.clone();
        let mut c_in = c_first_in;
        for j in 0..d {
            let c_out = ch(level);
            h = layer(blk, j, c_in, c_out, &h);
            c_in = c_out;
        }
        h
    };

    let d = config.layers_per_block;
    let mut skips: Vec<RefTensor> = Vec::with_capacity(n);
    let stem = refops::conv2d(x_t, &get("e0.stem.w"), &get("e0.stem.b").data);
    let mut h = run_block("e0", 0, ch(0), d, &stem);
    skips.push(h.clone());
    for l in 1..n {
        h = refops::avg_downsample2x(&h);
        h = run_block(&format!("e{l}"), l, ch(l - 1), d, &h);
        skips.push(h.clone());
    }
    h = run_block("mid", n - 1, ch(n - 1), d, &h);
    for l in (0..n).rev() {
        let prev = if l == n - 1 { h } else { refops::nearest_upsample2x(&h) };
        let cat = refops::channel_concat(&prev, &skips[l]);
        let c_first = cat.shape[1];
        h = run_block(&format!("d{l}"), l, c_first, d, &cat);
    }
    let hn = refops::group_norm(
        &h,
        ch(0).min(4),
        &get("d0.head.norm.g").data,
        &get("d0.head.norm.b").data,
        1e-5,
    );
    let hn = refops::silu(&hn);
    refops::conv2d(&hn, &get("d0.head.w"), &get("d0.head.b").data)
}
