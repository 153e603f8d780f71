//! Central-difference gradient checking.
//!
//! Each case pairs a tape-built loss with an independently written f64
//! reference of the same function. Analytic gradients come from the tape's
//! backward pass; numeric gradients from (f(p+h) - f(p-h)) / 2h evaluated on
//! the reference, at h = 1e-4.

use dnas_core::rng::Rng;
use dnas_core::tensor::{Tape, Tensor, Var};

use crate::refops::{self, RefTensor};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;

type TapeFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> dnas_core::Result<Var>>;
type RefFn = Box<dyn Fn(&[RefTensor]) -> f64>;

pub struct GradCase {
    pub name: String,
    pub params: Vec<Tensor<f64>>,
    pub tape_fn: TapeFn,
    pub ref_fn: RefFn,
}

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: String,
    pub elements_checked: usize,
    pub max_rel_err: f64,
    pub forward_gap: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= REL_TOL && self.forward_gap <= 1e-9
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub cases: Vec<CaseReport>,
}

impl SweepReport {
    pub fn all_passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed())
    }

    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&CaseReport> {
        self.cases.iter().filter(|c| !c.passed()).collect()
    }
}

fn to_ref(t: &Tensor<f64>) -> RefTensor {
    RefTensor::new(t.shape(), t.data().to_vec())
}

/// Checks one case; panics only on structural errors, never on mismatch.
pub fn check_case(case: &GradCase) -> CaseReport {
    // Analytic gradients through the tape.
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = case
        .params
        .iter()
        .map(|p| tape.leaf_grad(p.clone()))
        .collect();
    let loss = (case.tape_fn)(&mut tape, &vars).expect("tape forward failed");
    let tape_loss = tape.scalar_value(loss).expect("loss must be scalar");
    tape.backward(loss).expect("backward failed");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    // Reference forward agreement.
    let ref_params: Vec<RefTensor> = case.params.iter().map(to_ref).collect();
    let ref_loss = (case.ref_fn)(&ref_params);
    let forward_gap = (tape_loss - ref_loss).abs() / tape_loss.abs().max(1.0);

    // Central differences on the reference path.
    let mut max_rel_err = 0.0f64;
    let mut elements = 0;
    for (pi, param) in case.params.iter().enumerate() {
        let ad = &analytic[pi];
        assert_eq!(
            ad.len(),
            param.numel(),
            "missing analytic gradient for param {pi} in {}",
            case.name
        );
        for e in 0..param.numel() {
            let mut plus = ref_params.clone();
            plus[pi].data[e] += FD_STEP;
            let mut minus = ref_params.clone();
            minus[pi].data[e] -= FD_STEP;
            let fd = ((case.ref_fn)(&plus) - (case.ref_fn)(&minus)) / (2.0 * FD_STEP);
            let denom = ad[e].abs().max(fd.abs()).max(1e-6);
            let rel = (ad[e] - fd).abs() / denom;
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            elements += 1;
        }
    }
    CaseReport {
        name: case.name.clone(),
        elements_checked: elements,
        max_rel_err,
        forward_gap,
    }
}

fn rand_tensor(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor<f64> {
    let mut t = Tensor::<f64>::randn(shape, rng);
    for v in t.data_mut() {
        *v *= scale;
    }
    t
}

fn pick(rng: &mut Rng, options: &[usize]) -> usize {
    options[rng.below(options.len())]
}

fn case_conv2d(rng: &mut Rng, id: usize) -> GradCase {
    let b = pick(rng, &[1, 2]);
    let cin = pick(rng, &[1, 2, 3]);
    let cout = pick(rng, &[1, 2, 3]);
    let hw = pick(rng, &[2, 3, 4]);
    let k = pick(rng, &[1, 3, 5]);
    let x = rand_tensor(&[b, cin, hw, hw], 1.0, rng);
    let w = rand_tensor(&[cout, cin, k, k], 0.6, rng);
    let bias = rand_tensor(&[cout], 0.3, rng);
    let target = rand_tensor(&[b, cout, hw, hw], 1.0, rng);
    let t2 = to_ref(&target);
    GradCase {
        name: format!("conv2d#{id} b{b} {cin}->{cout} {hw}x{hw} k{k}"),
        params: vec![x, w, bias],
        tape_fn: Box::new(move |tape, vars| {
            let y = tape.conv2d(vars[0], vars[1], vars[2])?;
            let t = tape.leaf(target.clone());
            tape.mse_mean(y, t)
        }),
        ref_fn: Box::new(move |ps| {
            let y = refops::conv2d(&ps[0], &ps[1], &ps[2].data);
            refops::mse_mean(&y, &t2)
        }),
    }
}

fn case_group_norm(rng: &mut Rng, id: usize) -> GradCase {
    let b = pick(rng, &[1, 2]);
    let c = pick(rng, &[1, 2, 3, 4, 8]);
    let groups = c.min(4);
    let hw = pick(rng, &[2, 3]);
    // Healthy spread keeps the normalization well-conditioned.
    let x = rand_tensor(&[b, c, hw, hw], 2.0, rng);
    let gamma = rand_tensor(&[c], 1.0, rng);
    let beta = rand_tensor(&[c], 0.5, rng);
    let target = rand_tensor(&[b, c, hw, hw], 1.0, rng);
    let t2 = to_ref(&target);
    GradCase {
        name: format!("group_norm#{id} b{b} c{c} g{groups}"),
        params: vec![x, gamma, beta],
        tape_fn: Box::new(move |tape, vars| {
            let y = tape.group_norm(vars[0], groups, vars[1], vars[2])?;
            let t = tape.leaf(target.clone());
            tape.mse_mean(y, t)
        }),
        ref_fn: Box::new(move |ps| {
            let y = refops::group_norm(&ps[0], groups, &ps[1].data, &ps[2].data, 1e-5);
            refops::mse_mean(&y, &t2)
        }),
    }
}

fn case_silu(rng: &mut Rng, id: usize) -> GradCase {
    let n = pick(rng, &[3, 5, 8]);
    let x = rand_tensor(&[1, 1, n, n], 1.5, rng);
    let target = rand_tensor(&[1, 1, n, n], 1.0, rng);
    let t2 = to_ref(&target);
    GradCase {
        name: format!("silu#{id} {n}x{n}"),
        params: vec![x],
        tape_fn: Box::new(move |tape, vars| {
            let y = tape.silu(vars[0]);
            let t = tape.leaf(target.clone());
            tape.mse_mean(y, t)
        }),
        ref_fn: Box::new(move |ps| refops::mse_mean(&refops::silu(&ps[0]), &t2)),
    }
}

fn case_linear(rng: &mut Rng, id: usize) -> GradCase {
    let b = pick(rng, &[1, 2, 3]);
    let inf = pick(rng, &[2, 4, 6]);
    let outf = pick(rng, &[1, 3, 5]);
    let x = rand_tensor(&[b, inf], 1.0, rng);
    let w = rand_tensor(&[outf, inf], 0.7, rng);
    let bias = rand_tensor(&[outf], 0.3, rng);
    let target = rand_tensor(&[b, outf], 1.0, rng);
    let t2 = to_ref(&target);
    GradCase {
        name: format!("linear#{id} {inf}->{outf}"),
        params: vec![x, w, bias],
        tape_fn: Box::new(move |tape, vars| {
            let y = tape.linear(vars[0], vars[1], vars[2])?;
            let t = tape.leaf(target.clone());
            tape.mse_mean(y, t)
        }),
        ref_fn: Box::new(move |ps| {
            refops::mse_mean(&refops::linear(&ps[0], &ps[1], &ps[2].data), &t2)
        }),
    }
}

fn case_concat(rng: &mut Rng, id: usize) -> GradCase {
    let b = pick(rng, &[1, 2]);
    let (ca, cb) = (pick(rng, &[1, 2]), pick(rng, &[1, 3]));
    let hw = pick(rng, &[2, 3]);
    let a = rand_tensor(&[b, ca, hw, hw], 1.0, rng);
    let bb = rand_tensor(&[b, cb, hw, hw], 1.0, rng);
    let target = rand_tensor(&[b, ca + cb, hw, hw], 1.0, rng);
    let t2 = to_ref(&target);
    GradCase {
        name: format!("channel_concat#{id} {ca}+{cb}"),
        params: vec![a, bb],
        tape_fn: Box::new(move |tape, vars| {
            let y = tape.channel_concat(vars[0], vars[1])?;
            let t = tape.leaf(target.clone());
            tape.mse_mean(y, t)
        }),
        ref_fn: Box::new(move |ps| {
            refops::mse_mean(&refops::channel_concat(&ps[0], &ps[1]), &t2)
        }),
    }
}

fn case_resample(rng: &mut Rng, id: usize) -> GradCase {
    let b = pick(rng, &[1, 2]);
    let c = pick(rng, &[1, 2]);
    let hw = pick(rng, &[2, 4]);
    let down_first = rng.below(2) == 0;
    let x = rand_tensor(&[b, c, hw, hw], 1.0, rng);
    let target = rand_tensor(&[b, c, hw, hw], 1.0, rng);
    let t2 = to_ref(&target);
    GradCase {
        name: format!("resample#{id} {}", if down_first { "down-up" } else { "up-down" }),
        params: vec![x],
        tape_fn: Box::new(move |tape, vars| {
            let mid = if down_first {
                let d = tape.avg_downsample2x(vars[0])?;
                tape.nearest_upsample2x(d)?
            } else {
                let u = tape.nearest_upsample2x(vars[0])?;
                tape.avg_downsample2x(u)?
            };
            let t = tape.leaf(target.clone());
            tape.mse_mean(mid, t)
        }),
        ref_fn: Box::new(move |ps| {
            let mid = if down_first {
                refops::nearest_upsample2x(&refops::avg_downsample2x(&ps[0]))
            } else {
                refops::avg_downsample2x(&refops::nearest_upsample2x(&ps[0]))
            };
            refops::mse_mean(&mid, &t2)
        }),
    }
}

fn case_bias_scale_add(rng: &mut Rng, id: usize) -> GradCase {
    let b = pick(rng, &[1, 2]);
    let c = pick(rng, &[1, 3]);
    let hw = pick(rng, &[2, 3]);
    let factor = rng.uniform_in(0.3, 2.5);
    let x = rand_tensor(&[b, c, hw, hw], 1.0, rng);
    let y = rand_tensor(&[b, c, hw, hw], 1.0, rng);
    let bias = rand_tensor(&[b, c], 0.8, rng);
    let target = rand_tensor(&[b, c, hw, hw], 1.0, rng);
    let t2 = to_ref(&target);
    GradCase {
        name: format!("bias_scale_add#{id} c{c} f{factor:.2}"),
        params: vec![x, y, bias],
        tape_fn: Box::new(move |tape, vars| {
            let s = tape.add(vars[0], vars[1])?;
            let s = tape.add_channel_bias(s, vars[2])?;
            let s = tape.scale(s, factor);
            let t = tape.leaf(target.clone());
            tape.mse_mean(s, t)
        }),
        ref_fn: Box::new(move |ps| {
            let s = refops::add(&ps[0], &ps[1]);
            let s = refops::add_channel_bias(&s, &ps[2]);
            let s = refops::scale(&s, factor);
            refops::mse_mean(&s, &t2)
        }),
    }
}

fn case_mse_both_sides(rng: &mut Rng, id: usize) -> GradCase {
    let n = pick(rng, &[2, 4, 7]);
    let a = rand_tensor(&[n, n], 1.0, rng);
    let b = rand_tensor(&[n, n], 1.0, rng);
    GradCase {
        name: format!("mse_mean#{id} {n}x{n}"),
        params: vec![a, b],
        tape_fn: Box::new(move |tape, vars| tape.mse_mean(vars[0], vars[1])),
        ref_fn: Box::new(move |ps| refops::mse_mean(&ps[0], &ps[1])),
    }
}

/// A full residual layer the way the network composes it:
/// norm -> silu -> conv -> time shift -> residual add, then mse.
fn case_residual_layer(rng: &mut Rng, id: usize) -> GradCase {
    let b = pick(rng, &[1, 2]);
    let c = pick(rng, &[2, 4]);
    let groups = c.min(4);
    let hw = 4;
    let k = pick(rng, &[1, 3, 5]);
    let emb_dim = 6;
    let x = rand_tensor(&[b, c, hw, hw], 1.5, rng);
    let gamma = rand_tensor(&[c], 0.9, rng);
    let beta = rand_tensor(&[c], 0.4, rng);
    let w = rand_tensor(&[c, c, k, k], 0.5, rng);
    let wb = rand_tensor(&[c], 0.2, rng);
    let emb = rand_tensor(&[b, emb_dim], 1.0, rng);
    let ew = rand_tensor(&[c, emb_dim], 0.5, rng);
    let eb = rand_tensor(&[c], 0.2, rng);
    let target = rand_tensor(&[b, c, hw, hw], 1.0, rng);
    let t2 = to_ref(&target);
    GradCase {
        name: format!("residual_layer#{id} c{c} k{k}"),
        params: vec![x, gamma, beta, w, wb, emb, ew, eb],
        tape_fn: Box::new(move |tape, vars| {
            let h = tape.group_norm(vars[0], groups, vars[1], vars[2])?;
            let h = tape.silu(h);
            let h = tape.conv2d(h, vars[3], vars[4])?;
            let se = tape.silu(vars[5]);
            let shift = tape.linear(se, vars[6], vars[7])?;
            let h = tape.add_channel_bias(h, shift)?;
            let out = tape.add(h, vars[0])?;
            let t = tape.leaf(target.clone());
            tape.mse_mean(out, t)
        }),
        ref_fn: Box::new(move |ps| {
            let h = refops::group_norm(&ps[0], groups, &ps[1].data, &ps[2].data, 1e-5);
            let h = refops::silu(&h);
            let h = refops::conv2d(&h, &ps[3], &ps[4].data);
            let se = refops::silu(&ps[5]);
            let shift = refops::linear(&se, &ps[6], &ps[7].data);
            let h = refops::add_channel_bias(&h, &shift);
            let out = refops::add(&h, &ps[0]);
            refops::mse_mean(&out, &t2)
        }),
    }
}

/// A miniature two-level encoder/decoder with a skip connection.
fn case_mini_unet(rng: &mut Rng, id: usize) -> GradCase {
    let b = 1;
    let c = 2;
    let hw = 4;
    let k = pick(rng, &[1, 3]);
    let x = rand_tensor(&[b, c, hw, hw], 1.0, rng);
    let w1 = rand_tensor(&[c, c, k, k], 0.5, rng);
    let b1 = rand_tensor(&[c], 0.2, rng);
    let w2 = rand_tensor(&[c, 2 * c, 3, 3], 0.4, rng);
    let b2 = rand_tensor(&[c], 0.2, rng);
    let target = rand_tensor(&[b, c, hw, hw], 1.0, rng);
    let t2 = to_ref(&target);
    GradCase {
        name: format!("mini_unet#{id} k{k}"),
        params: vec![x, w1, b1, w2, b2],
        tape_fn: Box::new(move |tape, vars| {
            let enc = tape.conv2d(vars[0], vars[1], vars[2])?;
            let down = tape.avg_downsample2x(enc)?;
            let up = tape.nearest_upsample2x(down)?;
            let cat = tape.channel_concat(up, enc)?;
            let out = tape.conv2d(cat, vars[3], vars[4])?;
            let t = tape.leaf(target.clone());
            tape.mse_mean(out, t)
        }),
        ref_fn: Box::new(move |ps| {
            let enc = refops::conv2d(&ps[0], &ps[1], &ps[2].data);
            let down = refops::avg_downsample2x(&enc);
            let up = refops::nearest_upsample2x(&down);
            let cat = refops::channel_concat(&up, &enc);
            let out = refops::conv2d(&cat, &ps[3], &ps[4].data);
            refops::mse_mean(&out, &t2)
        }),
    }
}

type CaseGen = fn(&mut Rng, usize) -> GradCase;

const GENERATORS: &[CaseGen] = &[
    case_conv2d,
    case_group_norm,
    case_silu,
    case_linear,
    case_concat,
    case_resample,
    case_bias_scale_add,
    case_mse_both_sides,
    case_residual_layer,
    case_mini_unet,
];

/// Runs `count` randomized cases, cycling over every op generator.
pub fn gradient_sweep(count: usize, seed: u64) -> SweepReport {
    let mut rng = Rng::seed_from(seed);
    let mut cases = Vec::with_capacity(count);
    for i in 0..count {
        let case = GENERATORS[i % GENERATORS.len()](&mut rng, i);
        cases.push(check_case(&case));
    }
    SweepReport { cases }
}
