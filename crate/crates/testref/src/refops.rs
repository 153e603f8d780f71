//! Naive f64 forward implementations, one straightforward loop nest per op.

/// Dense f64 value with a shape, the currency of the reference path.
#[derive(Debug, Clone, PartialEq)]
pub struct RefTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl RefTensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        RefTensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        RefTensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn d4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    fn at4(&self, b: usize, c: usize, i: usize, j: usize) -> f64 {
        let (_, cc, h, w) = self.d4();
        self.data[((b * cc + c) * h + i) * w + j]
    }
}

/// Same-padding stride-1 convolution, direct summation.
pub fn conv2d(x: &RefTensor, w: &RefTensor, bias: &[f64]) -> RefTensor {
    let (bs, cin, h, wd) = x.d4();
    let (cout, wcin, k, _) = w.d4();
    assert_eq!(cin, wcin);
    let pad = (k - 1) as isize / 2;
    let mut out = RefTensor::zeros(&[bs, cout, h, wd]);
    for b in 0..bs {
        for co in 0..cout {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for u in 0..k {
                            for v in 0..k {
                                let si = i as isize + u as isize - pad;
                                let sj = j as isize + v as isize - pad;
                                if si >= 0 && si < h as isize && sj >= 0 && sj < wd as isize {
                                    acc += x.at4(b, ci, si as usize, sj as usize)
                                        * w.at4(co, ci, u, v);
                                }
                            }
                        }
                    }
                    out.data[((b * cout + co) * h + i) * wd + j] = acc;
                }
            }
        }
    }
    out
}

/// Two-pass mean and population variance.
pub fn mean_var_two_pass(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

pub fn group_norm(x: &RefTensor, groups: usize, gamma: &[f64], beta: &[f64], eps: f64) -> RefTensor {
    let (bs, c, h, w) = x.d4();
    assert_eq!(c % groups, 0);
    let cg = c / groups;
    let hw = h * w;
    let mut out = RefTensor::zeros(&[bs, c, h, w]);
    for b in 0..bs {
        for g in 0..groups {
            let start = (b * c + g * cg) * hw;
            let slice = &x.data[start..start + cg * hw];
            let (mean, var) = mean_var_two_pass(slice);
            let inv = 1.0 / (var + eps).sqrt();
            for ci in 0..cg {
                let ch = g * cg + ci;
                for p in 0..hw {
                    let v = x.data[start + ci * hw + p];
                    out.data[start + ci * hw + p] = gamma[ch] * (v - mean) * inv + beta[ch];
                }
            }
        }
    }
    out
}

pub fn silu(x: &RefTensor) -> RefTensor {
    RefTensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .map(|&v| v / (1.0 + (-v).exp()))
            .collect(),
    }
}

/// y = x W^T + b, x: [B, In], w: [Out, In].
pub fn linear(x: &RefTensor, w: &RefTensor, bias: &[f64]) -> RefTensor {
    let (bs, inf) = (x.shape[0], x.shape[1]);
    let (outf, winf) = (w.shape[0], w.shape[1]);
    assert_eq!(inf, winf);
    let mut out = RefTensor::zeros(&[bs, outf]);
    for b in 0..bs {
        for o in 0..outf {
            let mut acc = bias[o];
            for i in 0..inf {
                acc += x.data[b * inf + i] * w.data[o * inf + i];
            }
            out.data[b * outf + o] = acc;
        }
    }
    out
}

pub fn channel_concat(a: &RefTensor, b: &RefTensor) -> RefTensor {
    let (bs, ca, h, w) = a.d4();
    let (_, cb, _, _) = b.d4();
    let hw = h * w;
    let mut out = RefTensor::zeros(&[bs, ca + cb, h, w]);
    for bi in 0..bs {
        for c in 0..ca {
            for p in 0..hw {
                out.data[((bi * (ca + cb)) + c) * hw + p] = a.data[(bi * ca + c) * hw + p];
            }
        }
        for c in 0..cb {
            for p in 0..hw {
                out.data[((bi * (ca + cb)) + ca + c) * hw + p] = b.data[(bi * cb + c) * hw + p];
            }
        }
    }
    out
}

pub fn avg_downsample2x(x: &RefTensor) -> RefTensor {
    let (bs, c, h, w) = x.d4();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = RefTensor::zeros(&[bs, c, oh, ow]);
    for bc in 0..bs * c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for di in 0..2 {
                    for dj in 0..2 {
                        acc += x.data[bc * h * w + (2 * i + di) * w + 2 * j + dj];
                    }
                }
                out.data[bc * oh * ow + i * ow + j] = acc / 4.0;
            }
        }
    }
    out
}

pub fn nearest_upsample2x(x: &RefTensor) -> RefTensor {
    let (bs, c, h, w) = x.d4();
    let (oh, ow) = (h * 2, w * 2);
    let mut out = RefTensor::zeros(&[bs, c, oh, ow]);
    for bc in 0..bs * c {
        for i in 0..oh {
            for j in 0..ow {
                out.data[bc * oh * ow + i * ow + j] = x.data[bc * h * w + (i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub fn add(a: &RefTensor, b: &RefTensor) -> RefTensor {
    RefTensor {
        shape: a.shape.clone(),
        data: a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| x + y)
            .collect(),
    }
}

pub fn scale(x: &RefTensor, c: f64) -> RefTensor {
    RefTensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v * c).collect(),
    }
}

/// x [B,C,H,W] + bias [B,C] broadcast over the spatial dims.
pub fn add_channel_bias(x: &RefTensor, bias: &RefTensor) -> RefTensor {
    let (bs, c, h, w) = x.d4();
    let hw = h * w;
    let mut out = x.clone();
    for bc in 0..bs * c {
        for p in 0..hw {
            out.data[bc * hw + p] += bias.data[bc];
        }
    }
    out
}

pub fn mse_mean(a: &RefTensor, b: &RefTensor) -> f64 {
    let n = a.data.len() as f64;
    a.data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}
