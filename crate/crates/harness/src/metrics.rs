//! Generative-quality metrics: unbiased MMD^2 with an RBF kernel and a
//! diagonal-covariance Fréchet proxy over raw pixels.

use serde::{Deserialize, Serialize};

use dnas_core::diffusion::{loss_ori, DenoiseModel, NoiseSchedule};
use dnas_core::rng::Rng;
use dnas_core::tensor::{Session, Tensor};

use crate::error::{HarnessError, Result};

fn flatten(batch: &Tensor) -> Vec<&[f32]> {
    let n = batch.shape()[0];
    let per = batch.numel() / n.max(1);
    (0..n).map(|i| &batch.data()[i * per..(i + 1) * per]).collect()
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Unbiased squared maximum mean discrepancy with an RBF kernel whose
/// bandwidth is the median pairwise distance over the pooled sample.
/// May be slightly negative for close distributions.
pub fn mmd2_rbf(generated: &Tensor, reference: &Tensor) -> Result<f64> {
    let xs = flatten(generated);
    let ys = flatten(reference);
    let (m, n) = (xs.len(), ys.len());
    if m < 2 || n < 2 {
        return Err(HarnessError::Config(format!(
            "mmd needs at least 2 samples per side, got {m} and {n}"
        )));
    }
    if generated.shape()[1..] != reference.shape()[1..] {
        return Err(HarnessError::Config(format!(
            "sample shapes differ: {:?} vs {:?}",
            generated.shape(),
            reference.shape()
        )));
    }
    let pooled: Vec<&[f32]> = xs.iter().chain(ys.iter()).copied().collect();
    let p = pooled.len();
    let mut d2 = Vec::with_capacity(p * (p - 1) / 2);
    for i in 0..p {
        for j in (i + 1)..p {
            d2.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    let mut dist: Vec<f64> = d2.iter().map(|v| v.sqrt()).collect();
    dist.sort_by(|a, b| a.total_cmp(b));
    let median = if dist.len() % 2 == 1 {
        dist[dist.len() / 2]
    } else {
        0.5 * (dist[dist.len() / 2 - 1] + dist[dist.len() / 2])
    };
    // Degenerate pooled sets (point masses) fall back to a tiny bandwidth,
    // which saturates the kernel exactly as the limit demands.
    let h = median.max(1e-12);
    let scale = -1.0 / (2.0 * h * h);

    let idx = |i: usize, j: usize| -> usize {
        // upper-triangular index of (i < j) in the condensed array
        i * p - i * (i + 1) / 2 + (j - i - 1)
    };
    let k = |i: usize, j: usize| -> f64 { (scale * d2[idx(i.min(j), i.max(j))]).exp() };

    let mut kxx = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            kxx += k(i, j);
        }
    }
    let mut kyy = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            kyy += k(m + i, m + j);
        }
    }
    let mut kxy = 0.0;
    for i in 0..m {
        for j in 0..n {
            kxy += k(i, m + j);
        }
    }
    Ok(2.0 * kxx / (m as f64 * (m - 1) as f64) + 2.0 * kyy / (n as f64 * (n - 1) as f64)
        - 2.0 * kxy / (m as f64 * n as f64))
}

/// Fréchet distance between diagonal-covariance Gaussian fits of the two
/// pixel distributions: |mu1 - mu2|^2 + sum_j (sigma1_j - sigma2_j)^2.
pub fn frechet_diag(generated: &Tensor, reference: &Tensor) -> Result<f64> {
    let xs = flatten(generated);
    let ys = flatten(reference);
    if xs.len() < 2 || ys.len() < 2 {
        return Err(HarnessError::Config(
            "frechet proxy needs at least 2 samples per side".into(),
        ));
    }
    let d = xs[0].len();
    let stats = |set: &[&[f32]]| -> (Vec<f64>, Vec<f64>) {
        let n = set.len() as f64;
        let mut mean = vec![0f64; d];
        for row in set {
            for (m, &v) in mean.iter_mut().zip(row.iter()) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0f64; d];
        for row in set {
            for j in 0..d {
                let dv = row[j] as f64 - mean[j];
                var[j] += dv * dv;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        (mean, var)
    };
    let (m1, v1) = stats(&xs);
    let (m2, v2) = stats(&ys);
    let mut total = 0.0;
    for j in 0..d {
        let dm = m1[j] - m2[j];
        let ds = v1[j].sqrt() - v2[j].sqrt();
        total += dm * dm + ds * ds;
    }
    Ok(total)
}

/// Mean noise-prediction loss over fixed probe batches; a cheap progress
/// metric shared by evaluation and the ablation table.
pub fn probe_noise_loss<M: DenoiseModel>(
    model: &M,
    probe: &Tensor,
    sched: &NoiseSchedule,
    seed: u64,
    repeats: usize,
) -> Result<f64> {
    let mut rng = Rng::stream(seed, "probe-ori");
    let mut total = 0.0;
    for _ in 0..repeats.max(1) {
        let mut sess = Session::new(false);
        let loss = loss_ori(model, &mut sess, probe, &mut rng, sched).map_err(HarnessError::from)?;
        total += sess.tape.data(loss)[0] as f64;
    }
    Ok(total / repeats.max(1) as f64)
}

/// Quality and cost numbers for one model row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mmd2: f64,
    pub frechet_diag: f64,
    pub macs: u64,
    pub params: u64,
    pub probe_l_ori: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster(center: f32, count: usize, dim: usize) -> Tensor {
        Tensor::from_vec(&[count, 1, 1, dim], vec![center; count * dim]).unwrap()
    }

    #[test]
    fn identical_sample_sets_give_nonpositive_mmd() {
        let mut rng = Rng::seed_from(4);
        let x = Tensor::randn(&[12, 1, 2, 2], &mut rng);
        let v = mmd2_rbf(&x, &x.clone()).unwrap();
        assert!(v <= 0.0, "identical sets must give mmd^2 <= 0, got {v}");
    }

    #[test]
    fn distant_point_masses_saturate_to_two() {
        // 20 copies of one point vs 5 of a far one: the pooled median
        // distance is 0, the kernel saturates, and the unbiased estimator
        // evaluates to exactly 1 + 1 - 0 = 2.
        let x = cluster(0.0, 20, 8);
        let y = cluster(1e3, 5, 8);
        let v = mmd2_rbf(&x, &y).unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn mmd_is_permutation_invariant() {
        let mut rng = Rng::seed_from(9);
        let x = Tensor::randn(&[10, 1, 2, 2], &mut rng);
        let y = Tensor::randn(&[10, 1, 2, 2], &mut rng);
        let v1 = mmd2_rbf(&x, &y).unwrap();
        // shuffle the generated rows
        let per = 4;
        let order = [7usize, 2, 9, 0, 4, 1, 8, 3, 6, 5];
        let mut shuffled = Vec::with_capacity(x.numel());
        for &i in &order {
            shuffled.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
        }
        let xs = Tensor::from_vec(&[10, 1, 2, 2], shuffled).unwrap();
        let v2 = mmd2_rbf(&xs, &y).unwrap();
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn mmd_rejects_tiny_sets() {
        let x = cluster(0.0, 1, 4);
        let y = cluster(0.0, 5, 4);
        assert!(mmd2_rbf(&x, &y).is_err());
    }

    #[test]
    fn frechet_is_zero_on_identical_sets_and_positive_otherwise() {
        let mut rng = Rng::seed_from(11);
        let x = Tensor::randn(&[16, 1, 2, 2], &mut rng);
        assert_eq!(frechet_diag(&x, &x.clone()).unwrap(), 0.0);
        let y = cluster(3.0, 16, 4);
        let v = frechet_diag(&x, &y).unwrap();
        assert!(v > 0.0);
    }

    #[test]
    fn mmd_separates_matched_from_mismatched_distributions() {
        // Two draws of the same blob distribution vs blobs against noise.
        use crate::config::{DataSource, DatasetSpec};
        let spec = DatasetSpec {
            source: DataSource::SyntheticBlobs,
            image_size: 8,
            channels: 1,
            count: 64,
            seed: 21,
            path: None,
        };
        let mut r1 = Rng::stream(1, "a");
        let mut r2 = Rng::stream(2, "b");
        let a = crate::data::generate_synthetic(&spec, &mut r1).unwrap();
        let b = crate::data::generate_synthetic(&spec, &mut r2).unwrap();
        let noise = Tensor::randn(&[64, 1, 8, 8], &mut Rng::seed_from(3));
        let close = mmd2_rbf(&a, &b).unwrap();
        let far = mmd2_rbf(&noise, &b).unwrap();
        assert!(
            close < far,
            "matched draws ({close}) should beat noise ({far})"
        );
    }
}
