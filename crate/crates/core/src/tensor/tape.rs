//! Reverse-mode computation tape.
//!
//! Each forward pass builds a fresh tape; `backward` walks it once in reverse
//! and accumulates gradients for every node that can reach a gradient leaf.
//! Convolutions and linear layers lower to GEMM; everything else is explicit
//! loops, with no operator fusion and no broadcasting beyond bias adds.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::tensor::{Element, ParamStore, Tensor};

/// Variance floor inside group normalization.
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<E: Element> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        k: usize,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        // per (sample, group): mean and 1/sqrt(var + eps)
        mean: Vec<E>,
        inv_std: Vec<E>,
    },
    Silu {
        x: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    ConcatChannels {
        a: usize,
        b: usize,
    },
    AvgDown2x {
        x: usize,
    },
    NearestUp2x {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: E,
    },
    AddChannelBias {
        x: usize,
        bias: usize,
    },
    MseMean {
        a: usize,
        b: usize,
    },
}

struct Node<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
    needs_grad: bool,
    op: Op<E>,
}

/// A single-use forward/backward tape.
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<E>, needs_grad: bool, op: Op<E>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a constant input; gradients never flow into it.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push(shape, data, false, Op::Leaf)
    }

    /// Inserts an input that accumulates a gradient during backward.
    pub fn leaf_grad(&mut self, t: Tensor<E>) -> Var {
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push(shape, data, true, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[E] {
        &self.nodes[v.0].data
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<E> {
        Tensor::from_vec(&self.nodes[v.0].shape, self.nodes[v.0].data.clone()).unwrap()
    }

    pub fn scalar_value(&self, v: Var) -> Result<E> {
        if self.nodes[v.0].data.len() != 1 {
            return Err(CoreError::Contract(format!(
                "expected scalar node, got shape {:?}",
                self.nodes[v.0].shape
            )));
        }
        Ok(self.nodes[v.0].data[0])
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims4(&self, v: Var) -> Result<(usize, usize, usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 4 {
            return Err(CoreError::Dimension(format!(
                "expected 4-d tensor, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    // ---- forward ops -----------------------------------------------------

    /// Same-padding stride-1 convolution; kernel size must be one of {1,3,5}.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, cin, h, wd) = self.dims4(x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(CoreError::Dimension(format!(
                "conv weight must be [Cout, Cin, k, k], got {ws:?}"
            )));
        }
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        if !matches!(k, 1 | 3 | 5) {
            return Err(CoreError::Configuration(format!(
                "kernel size {k} not in {{1,3,5}}"
            )));
        }
        if wcin != cin {
            return Err(CoreError::Dimension(format!(
                "conv input has {cin} channels but weight expects {wcin}"
            )));
        }
        if self.shape(b) != [cout] {
            return Err(CoreError::Dimension(format!(
                "conv bias must be [{cout}], got {:?}",
                self.shape(b)
            )));
        }
        let pad = (k - 1) / 2;
        let hw = h * wd;
        let kk = cin * k * k;
        // One batched GEMM per layer: cols spans every sample, so the kernel
        // packing cost amortizes over N = B*H*W columns.
        let mut cols = vec![E::ZERO; kk * bs * hw];
        let xdata = &self.nodes[x.0].data;
        let wdata = &self.nodes[w.0].data;
        for bi in 0..bs {
            im2col_strided(
                &xdata[bi * cin * hw..(bi + 1) * cin * hw],
                cin,
                h,
                wd,
                k,
                pad,
                &mut cols,
                bi * hw,
                bs * hw,
            );
        }
        let mut out_mat = vec![E::ZERO; cout * bs * hw];
        unsafe {
            E::gemm(
                cout,
                kk,
                bs * hw,
                E::ONE,
                wdata.as_ptr(),
                kk as isize,
                1,
                cols.as_ptr(),
                (bs * hw) as isize,
                1,
                E::ZERO,
                out_mat.as_mut_ptr(),
                (bs * hw) as isize,
                1,
            );
        }
        // Permute [Cout, B, HW] -> [B, Cout, HW] and add the bias.
        let mut out = vec![E::ZERO; bs * cout * hw];
        {
            let bias = &self.nodes[b.0].data;
            for co in 0..cout {
                for bi in 0..bs {
                    let src = &out_mat[(co * bs + bi) * hw..(co * bs + bi + 1) * hw];
                    let dst = &mut out[(bi * cout + co) * hw..(bi * cout + co + 1) * hw];
                    let bv = bias[co];
                    for (d, &s) in dst.iter_mut().zip(src.iter()) {
                        *d = s + bv;
                    }
                }
            }
        }
        let needs = self.any_needs(&[x, w, b]);
        Ok(self.push(
            vec![bs, cout, h, wd],
            out,
            needs,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                k,
            },
        ))
    }

    /// Group normalization with per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let (bs, c, h, wd) = self.dims4(x)?;
        if groups == 0 || c % groups != 0 {
            return Err(CoreError::Configuration(format!(
                "channels {c} not divisible by {groups} groups"
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(CoreError::Dimension(format!(
                "group-norm affine must be [{c}], got {:?} / {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let cg = c / groups;
        let hw = h * wd;
        let group_len = cg * hw;
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut out = vec![E::ZERO; xd.len()];
        let mut means = Vec::with_capacity(bs * groups);
        let mut inv_stds = Vec::with_capacity(bs * groups);
        for bi in 0..bs {
            for g in 0..groups {
                let start = bi * c * hw + g * group_len;
                let xs = &xd[start..start + group_len];
                let mut sum = E::ZERO;
                for &v in xs {
                    sum += v;
                }
                let n = E::from_f64(group_len as f64);
                let mean = sum / n;
                let mut var = E::ZERO;
                for &v in xs {
                    let d = v - mean;
                    var += d * d;
                }
                var = var / n;
                let inv_std = E::ONE / (var + E::from_f64(GROUP_NORM_EPS)).sqrt();
                means.push(mean);
                inv_stds.push(inv_std);
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let (ga, be) = (gd[ch], bd[ch]);
                    let off = start + ci * hw;
                    for j in 0..hw {
                        let xhat = (xd[off + j] - mean) * inv_std;
                        out[off + j] = ga * xhat + be;
                    }
                }
            }
        }
        let needs = self.any_needs(&[x, gamma, beta]);
        Ok(self.push(
            vec![bs, c, h, wd],
            out,
            needs,
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                mean: means,
                inv_std: inv_stds,
            },
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xd = &self.nodes[x.0].data;
        let out: Vec<E> = xd.iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.nodes[x.0].needs_grad;
        self.push(shape, out, needs, Op::Silu { x: x.0 })
    }

    /// y = x W^T + b with x: [B, In], w: [Out, In], b: [Out].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(CoreError::Dimension(format!(
                "linear expects x [B,In], w [Out,In]; got {xs:?} and {ws:?}"
            )));
        }
        let (bs, inf, outf) = (xs[0], xs[1], ws[0]);
        if self.shape(b) != [outf] {
            return Err(CoreError::Dimension(format!(
                "linear bias must be [{outf}], got {:?}",
                self.shape(b)
            )));
        }
        let mut out = vec![E::ZERO; bs * outf];
        {
            let bias = &self.nodes[b.0].data;
            for bi in 0..bs {
                out[bi * outf..(bi + 1) * outf].copy_from_slice(bias);
            }
        }
        unsafe {
            E::gemm(
                bs,
                inf,
                outf,
                E::ONE,
                self.nodes[x.0].data.as_ptr(),
                inf as isize,
                1,
                // B = w^T: element (i, o) lives at w[o * inf + i]
                self.nodes[w.0].data.as_ptr(),
                1,
                inf as isize,
                E::ONE,
                out.as_mut_ptr(),
                outf as isize,
                1,
            );
        }
        let needs = self.any_needs(&[x, w, b]);
        Ok(self.push(
            vec![bs, outf],
            out,
            needs,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
        ))
    }

    /// Stacks two feature maps along the channel axis.
    pub fn channel_concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.dims4(a)?;
        let (bb, cb, hb, wb) = self.dims4(b)?;
        if ba != bb || ha != hb || wa != wb {
            return Err(CoreError::Dimension(format!(
                "channel concat needs matching batch/spatial dims, got {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let hw = ha * wa;
        let mut out = vec![E::ZERO; ba * (ca + cb) * hw];
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        for bi in 0..ba {
            let dst = bi * (ca + cb) * hw;
            out[dst..dst + ca * hw].copy_from_slice(&ad[bi * ca * hw..(bi + 1) * ca * hw]);
            out[dst + ca * hw..dst + (ca + cb) * hw]
                .copy_from_slice(&bd[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(
            vec![ba, ca + cb, ha, wa],
            out,
            needs,
            Op::ConcatChannels { a: a.0, b: b.0 },
        ))
    }

    /// 2x2 mean pooling. Sums pairwise so that constant patches average
    /// exactly to their value.
    pub fn avg_downsample2x(&mut self, x: Var) -> Result<Var> {
        let (bs, c, h, w) = self.dims4(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(CoreError::Dimension(format!(
                "downsample needs even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![E::ZERO; bs * c * oh * ow];
        let quarter = E::from_f64(0.25);
        for bc in 0..bs * c {
            let src = bc * h * w;
            let dst = bc * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let p = src + 2 * i * w + 2 * j;
                    let top = xd[p] + xd[p + 1];
                    let bot = xd[p + w] + xd[p + w + 1];
                    out[dst + i * ow + j] = (top + bot) * quarter;
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(vec![bs, c, oh, ow], out, needs, Op::AvgDown2x { x: x.0 }))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn nearest_upsample2x(&mut self, x: Var) -> Result<Var> {
        let (bs, c, h, w) = self.dims4(x)?;
        let (oh, ow) = (h * 2, w * 2);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![E::ZERO; bs * c * oh * ow];
        for bc in 0..bs * c {
            let src = bc * h * w;
            let dst = bc * oh * ow;
            for i in 0..oh {
                let srow = src + (i / 2) * w;
                let drow = dst + i * ow;
                for j in 0..ow {
                    out[drow + j] = xd[srow + j / 2];
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(vec![bs, c, oh, ow], out, needs, Op::NearestUp2x { x: x.0 }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::Dimension(format!(
                "add needs equal shapes, got {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(shape, out, needs, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = E::from_f64(c);
        let out: Vec<E> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.nodes[x.0].needs_grad;
        self.push(shape, out, needs, Op::Scale { x: x.0, c })
    }

    /// Adds a per-(sample, channel) bias over the spatial dims:
    /// x [B,C,H,W] + bias [B,C].
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (bs, c, h, w) = self.dims4(x)?;
        if self.shape(bias) != [bs, c] {
            return Err(CoreError::Dimension(format!(
                "channel bias must be [{bs},{c}], got {:?}",
                self.shape(bias)
            )));
        }
        let hw = h * w;
        let xd = &self.nodes[x.0].data;
        let bd = &self.nodes[bias.0].data;
        let mut out = vec![E::ZERO; xd.len()];
        for bc in 0..bs * c {
            let v = bd[bc];
            let off = bc * hw;
            for j in 0..hw {
                out[off + j] = xd[off + j] + v;
            }
        }
        let needs = self.any_needs(&[x, bias]);
        Ok(self.push(
            vec![bs, c, h, w],
            out,
            needs,
            Op::AddChannelBias {
                x: x.0,
                bias: bias.0,
            },
        ))
    }

    /// Mean over all elements of (a - b)^2; returns a scalar node.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::Dimension(format!(
                "mse needs equal shapes, got {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let n = self.nodes[a.0].data.len();
        let mut acc = 0.0f64;
        for (&x, &y) in self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
        {
            let d = (x - y).to_f64();
            acc += d * d;
        }
        let out = vec![E::from_f64(acc / n as f64)];
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(vec![1], out, needs, Op::MseMean { a: a.0, b: b.0 }))
    }

    fn any_needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates gradients of a scalar loss into every reachable node that
    /// requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(CoreError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![E::ONE]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.dispatch_backward(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, idx: usize) -> &mut Vec<E> {
        let n = self.nodes[idx].data.len();
        self.grads[idx].get_or_insert_with(|| vec![E::ZERO; n])
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    fn dispatch_backward(&mut self, i: usize, g: &[E]) -> Result<()> {
        // Ops hold raw indices; all parents precede i on the tape.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, k } => {
                let (x, w, b, k) = (*x, *w, *b, *k);
                self.conv2d_backward(i, x, w, b, k, g)?;
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                ..
            } => {
                let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                self.group_norm_backward(i, x, gamma, beta, groups, g);
            }
            Op::Silu { x } => {
                let x = *x;
                if self.needs(x) {
                    let dg: Vec<E> = self.nodes[x]
                        .data
                        .iter()
                        .zip(g.iter())
                        .map(|(&v, &gv)| {
                            let s = sigmoid(v);
                            gv * s * (E::ONE + v * (E::ONE - s))
                        })
                        .collect();
                    accumulate(self.grad_buf(x), &dg);
                }
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                self.linear_backward(i, x, w, b, g);
            }
            Op::ConcatChannels { a, b } => {
                let (a, b) = (*a, *b);
                let (bs, ca) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let cb = self.nodes[b].shape[1];
                let hw = self.nodes[a].shape[2] * self.nodes[a].shape[3];
                if self.needs(a) {
                    let buf = self.grad_buf(a);
                    for bi in 0..bs {
                        let src = bi * (ca + cb) * hw;
                        for j in 0..ca * hw {
                            buf[bi * ca * hw + j] += g[src + j];
                        }
                    }
                }
                if self.needs(b) {
                    let buf = self.grad_buf(b);
                    for bi in 0..bs {
                        let src = bi * (ca + cb) * hw + ca * hw;
                        for j in 0..cb * hw {
                            buf[bi * cb * hw + j] += g[src + j];
                        }
                    }
                }
            }
            Op::AvgDown2x { x } => {
                let x = *x;
                if self.needs(x) {
                    let (_, _, h, w) = {
                        let s = &self.nodes[x].shape;
                        (s[0], s[1], s[2], s[3])
                    };
                    let (oh, ow) = (h / 2, w / 2);
                    let bc_total = self.nodes[x].data.len() / (h * w);
                    let quarter = E::from_f64(0.25);
                    let buf = self.grad_buf(x);
                    for bc in 0..bc_total {
                        let dst = bc * h * w;
                        let src = bc * oh * ow;
                        for i2 in 0..oh {
                            for j2 in 0..ow {
                                let gv = g[src + i2 * ow + j2] * quarter;
                                let p = dst + 2 * i2 * w + 2 * j2;
                                buf[p] += gv;
                                buf[p + 1] += gv;
                                buf[p + w] += gv;
                                buf[p + w + 1] += gv;
                            }
                        }
                    }
                }
            }
            Op::NearestUp2x { x } => {
                let x = *x;
                if self.needs(x) {
                    let (h, w) = {
                        let s = &self.nodes[x].shape;
                        (s[2], s[3])
                    };
                    let (oh, ow) = (h * 2, w * 2);
                    let bc_total = self.nodes[x].data.len() / (h * w);
                    let buf = self.grad_buf(x);
                    for bc in 0..bc_total {
                        let dst = bc * h * w;
                        let src = bc * oh * ow;
                        for i2 in 0..oh {
                            for j2 in 0..ow {
                                buf[dst + (i2 / 2) * w + j2 / 2] += g[src + i2 * ow + j2];
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    accumulate(self.grad_buf(a), g);
                }
                if self.needs(b) {
                    accumulate(self.grad_buf(b), g);
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                if self.needs(x) {
                    let dg: Vec<E> = g.iter().map(|&gv| gv * c).collect();
                    accumulate(self.grad_buf(x), &dg);
                }
            }
            Op::AddChannelBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let hw = {
                    let s = &self.nodes[x].shape;
                    s[2] * s[3]
                };
                if self.needs(x) {
                    accumulate(self.grad_buf(x), g);
                }
                if self.needs(bias) {
                    let n_bc = self.nodes[bias].data.len();
                    let buf = self.grad_buf(bias);
                    for bc in 0..n_bc {
                        let mut s = E::ZERO;
                        for j in 0..hw {
                            s += g[bc * hw + j];
                        }
                        buf[bc] += s;
                    }
                }
            }
            Op::MseMean { a, b } => {
                let (a, b) = (*a, *b);
                let n = self.nodes[a].data.len();
                let scale = g[0] * E::from_f64(2.0 / n as f64);
                if self.needs(a) {
                    let dg: Vec<E> = self.nodes[a]
                        .data
                        .iter()
                        .zip(self.nodes[b].data.iter())
                        .map(|(&x, &y)| scale * (x - y))
                        .collect();
                    accumulate(self.grad_buf(a), &dg);
                }
                if self.needs(b) {
                    let dg: Vec<E> = self.nodes[a]
                        .data
                        .iter()
                        .zip(self.nodes[b].data.iter())
                        .map(|(&x, &y)| -(scale * (x - y)))
                        .collect();
                    accumulate(self.grad_buf(b), &dg);
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &mut self,
        out: usize,
        x: usize,
        w: usize,
        b: usize,
        k: usize,
        g: &[E],
    ) -> Result<()> {
        let (bs, cin, h, wd) = {
            let s = &self.nodes[x].shape;
            (s[0], s[1], s[2], s[3])
        };
        let cout = self.nodes[out].shape[1];
        let pad = (k - 1) / 2;
        let hw = h * wd;
        let kk = cin * k * k;

        if self.needs(b) {
            let buf = self.grad_buf(b);
            for bi in 0..bs {
                for co in 0..cout {
                    let base = (bi * cout + co) * hw;
                    let mut s = E::ZERO;
                    for j in 0..hw {
                        s += g[base + j];
                    }
                    buf[co] += s;
                }
            }
        }

        let needs_w = self.needs(w);
        let needs_x = self.needs(x);
        if !needs_w && !needs_x {
            return Ok(());
        }

        // Permute the output gradient to [Cout, B*HW] once; both GEMMs use it.
        let n = bs * hw;
        let mut g_mat = vec![E::ZERO; cout * n];
        for bi in 0..bs {
            for co in 0..cout {
                let src = &g[(bi * cout + co) * hw..(bi * cout + co + 1) * hw];
                g_mat[co * n + bi * hw..co * n + (bi + 1) * hw].copy_from_slice(src);
            }
        }

        if needs_w {
            let mut cols = vec![E::ZERO; kk * n];
            let xdata = &self.nodes[x].data;
            for bi in 0..bs {
                im2col_strided(
                    &xdata[bi * cin * hw..(bi + 1) * cin * hw],
                    cin,
                    h,
                    wd,
                    k,
                    pad,
                    &mut cols,
                    bi * hw,
                    n,
                );
            }
            // dW[cout, kk] += g_mat[cout, n] * cols^T[n, kk]
            let mut dw_acc = vec![E::ZERO; cout * kk];
            unsafe {
                E::gemm(
                    cout,
                    n,
                    kk,
                    E::ONE,
                    g_mat.as_ptr(),
                    n as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    n as isize,
                    E::ZERO,
                    dw_acc.as_mut_ptr(),
                    kk as isize,
                    1,
                );
            }
            accumulate(self.grad_buf(w), &dw_acc);
        }
        if needs_x {
            // dcols[kk, n] = W^T[kk, cout] * g_mat[cout, n]
            let mut dcols = vec![E::ZERO; kk * n];
            let wdata = &self.nodes[w].data;
            unsafe {
                E::gemm(
                    kk,
                    cout,
                    n,
                    E::ONE,
                    wdata.as_ptr(),
                    1,
                    kk as isize,
                    g_mat.as_ptr(),
                    n as isize,
                    1,
                    E::ZERO,
                    dcols.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            let mut dx_acc = vec![E::ZERO; bs * cin * hw];
            for bi in 0..bs {
                col2im_acc_strided(
                    &dcols,
                    cin,
                    h,
                    wd,
                    k,
                    pad,
                    &mut dx_acc[bi * cin * hw..(bi + 1) * cin * hw],
                    bi * hw,
                    n,
                );
            }
            accumulate(self.grad_buf(x), &dx_acc);
        }
        Ok(())
    }

    fn group_norm_backward(
        &mut self,
        out: usize,
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        g: &[E],
    ) {
        let (bs, c, h, wd) = {
            let s = &self.nodes[x].shape;
            (s[0], s[1], s[2], s[3])
        };
        let (mean, inv_std) = match &self.nodes[out].op {
            Op::GroupNorm { mean, inv_std, .. } => (mean.clone(), inv_std.clone()),
            _ => unreachable!(),
        };
        let cg = c / groups;
        let hw = h * wd;
        let group_len = cg * hw;
        let n = E::from_f64(group_len as f64);

        let needs_x = self.needs(x);
        let needs_gamma = self.needs(gamma);
        let needs_beta = self.needs(beta);

        let mut dx = if needs_x {
            vec![E::ZERO; bs * c * hw]
        } else {
            Vec::new()
        };
        let mut dgamma = vec![E::ZERO; c];
        let mut dbeta = vec![E::ZERO; c];

        let xd = &self.nodes[x].data;
        let gd = &self.nodes[gamma].data;
        for bi in 0..bs {
            for gi in 0..groups {
                let start = bi * c * hw + gi * group_len;
                let m = mean[bi * groups + gi];
                let istd = inv_std[bi * groups + gi];
                // First pass: per-channel reductions and per-group sums.
                let mut sum_dxhat = E::ZERO;
                let mut sum_dxhat_xhat = E::ZERO;
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let off = start + ci * hw;
                    let ga = gd[ch];
                    for j in 0..hw {
                        let gv = g[off + j];
                        let xhat = (xd[off + j] - m) * istd;
                        dgamma[ch] += gv * xhat;
                        dbeta[ch] += gv;
                        let dxhat = gv * ga;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                }
                if needs_x {
                    let mean_dxhat = sum_dxhat / n;
                    let mean_dxhat_xhat = sum_dxhat_xhat / n;
                    for ci in 0..cg {
                        let ch = gi * cg + ci;
                        let off = start + ci * hw;
                        let ga = gd[ch];
                        for j in 0..hw {
                            let xhat = (xd[off + j] - m) * istd;
                            let dxhat = g[off + j] * ga;
                            dx[off + j] = istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
            }
        }
        if needs_x {
            accumulate(self.grad_buf(x), &dx);
        }
        if needs_gamma {
            accumulate(self.grad_buf(gamma), &dgamma);
        }
        if needs_beta {
            accumulate(self.grad_buf(beta), &dbeta);
        }
    }

    fn linear_backward(&mut self, _out: usize, x: usize, w: usize, b: usize, g: &[E]) {
        let (bs, inf) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
        let outf = self.nodes[w].shape[0];
        if self.needs(b) {
            let buf = self.grad_buf(b);
            for bi in 0..bs {
                for o in 0..outf {
                    buf[o] += g[bi * outf + o];
                }
            }
        }
        if self.needs(w) {
            // dW[out, in] += g^T[out, bs] * x[bs, in]
            let mut dw = vec![E::ZERO; outf * inf];
            unsafe {
                E::gemm(
                    outf,
                    bs,
                    inf,
                    E::ONE,
                    g.as_ptr(),
                    1,
                    outf as isize,
                    self.nodes[x].data.as_ptr(),
                    inf as isize,
                    1,
                    E::ZERO,
                    dw.as_mut_ptr(),
                    inf as isize,
                    1,
                );
            }
            accumulate(self.grad_buf(w), &dw);
        }
        if self.needs(x) {
            // dX[bs, in] += g[bs, out] * W[out, in]
            let mut dx = vec![E::ZERO; bs * inf];
            unsafe {
                E::gemm(
                    bs,
                    outf,
                    inf,
                    E::ONE,
                    g.as_ptr(),
                    outf as isize,
                    1,
                    self.nodes[w].data.as_ptr(),
                    inf as isize,
                    1,
                    E::ZERO,
                    dx.as_mut_ptr(),
                    inf as isize,
                    1,
                );
            }
            accumulate(self.grad_buf(x), &dx);
        }
    }
}

fn accumulate<E: Element>(buf: &mut [E], inc: &[E]) {
    debug_assert_eq!(buf.len(), inc.len());
    for (b, &i) in buf.iter_mut().zip(inc.iter()) {
        *b += i;
    }
}

fn sigmoid<E: Element>(v: E) -> E {
    E::ONE / (E::ONE + (-v).exp())
}

/// Unrolls one sample into convolution columns inside a wider matrix:
/// cols[(ci*k+u)*k+v][col0 + i*W + j] = x[ci][i+u-pad][j+v-pad], zero
/// outside. `ncols` is the full matrix width (batch * H * W).
#[allow(clippy::too_many_arguments)]
fn im2col_strided<E: Element>(
    x: &[E],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    cols: &mut [E],
    col0: usize,
    ncols: usize,
) {
    let hw = h * w;
    let mut row = 0;
    for ci in 0..cin {
        let xc = &x[ci * hw..(ci + 1) * hw];
        for u in 0..k {
            for v in 0..k {
                let dst = &mut cols[row * ncols + col0..row * ncols + col0 + hw];
                row += 1;
                for i in 0..h {
                    let si = i as isize + u as isize - pad as isize;
                    let drow = i * w;
                    if si < 0 || si >= h as isize {
                        dst[drow..drow + w].iter_mut().for_each(|p| *p = E::ZERO);
                        continue;
                    }
                    let srow = si as usize * w;
                    for j in 0..w {
                        let sj = j as isize + v as isize - pad as isize;
                        dst[drow + j] = if sj < 0 || sj >= w as isize {
                            E::ZERO
                        } else {
                            xc[srow + sj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatters column gradients back onto one sample's input image (transpose
/// of `im2col_strided`).
#[allow(clippy::too_many_arguments)]
fn col2im_acc_strided<E: Element>(
    dcols: &[E],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    dx: &mut [E],
    col0: usize,
    ncols: usize,
) {
    let hw = h * w;
    let mut row = 0;
    for ci in 0..cin {
        let dxc = &mut dx[ci * hw..(ci + 1) * hw];
        for u in 0..k {
            for v in 0..k {
                let src = &dcols[row * ncols + col0..row * ncols + col0 + hw];
                row += 1;
                for i in 0..h {
                    let si = i as isize + u as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let srow = si as usize * w;
                    let grow = i * w;
                    for j in 0..w {
                        let sj = j as isize + v as isize - pad as isize;
                        if sj >= 0 && sj < w as isize {
                            dxc[srow + sj as usize] += src[grow + j];
                        }
                    }
                }
            }
        }
    }
}

/// Binds parameters from a store onto a tape and harvests their gradients.
///
/// A session caches bindings by parameter index so a parameter used twice in
/// one forward pass owns a single tape leaf.
pub struct Session<E: Element = f32> {
    pub tape: Tape<E>,
    bound: HashMap<usize, Var>,
    train: bool,
}

impl<E: Element> Session<E> {
    /// `train = false` binds parameters as constants (no gradient tracking).
    pub fn new(train: bool) -> Self {
        Session {
            tape: Tape::new(),
            bound: HashMap::new(),
            train,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Binds the named parameter, reusing the leaf if already bound.
    pub fn param(&mut self, store: &ParamStore<E>, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| CoreError::Contract(format!("unknown parameter {name:?}")))?;
        if let Some(&v) = self.bound.get(&idx) {
            return Ok(v);
        }
        let p = store.at(idx);
        let v = if self.train && p.trainable {
            self.tape.leaf_grad(p.tensor.clone())
        } else {
            self.tape.leaf(p.tensor.clone())
        };
        self.bound.insert(idx, v);
        Ok(v)
    }

    /// Runs backward from `loss` and adds each bound parameter's gradient
    /// into its store-side buffer.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<E>) -> Result<()> {
        self.tape.backward(loss)?;
        for (&idx, &var) in &self.bound {
            if let Some(g) = self.tape.grad(var) {
                let p = store.at_mut(idx);
                if p.trainable {
                    accumulate(p.tensor.grad_mut(), g);
                }
            }
        }
        Ok(())
    }
}
