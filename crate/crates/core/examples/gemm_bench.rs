//! Quick GEMM and training-step throughput probe.

use dnas_core::diffusion::{loss_ori, make_linear_schedule};
use dnas_core::rng::Rng;
use dnas_core::tensor::{Adam, Session, Tensor};
use dnas_core::unet::{teacher_arch, UNet, UNetConfig};

fn main() {
    for (m, k, n) in [(32usize, 800usize, 8192usize), (256, 256, 256), (512, 512, 512)] {
        let a = vec![1.0f32; m * k];
        let b = vec![1.0f32; k * n];
        let mut c = vec![0.0f32; m * n];
        let reps = ((2e9 / (2.0 * (m * k * n) as f64)).ceil() as usize).max(1);
        let t = std::time::Instant::now();
        for _ in 0..reps {
            unsafe {
                matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), k as isize, 1,
                    b.as_ptr(), n as isize, 1, 0.0, c.as_mut_ptr(), n as isize, 1);
            }
        }
        let el = t.elapsed().as_secs_f64();
        let gf = 2.0 * (m * k * n * reps) as f64 / el / 1e9;
        println!("gemm {m}x{k}x{n}: {gf:.2} GFLOP/s");
    }

    let cfg = UNetConfig {
        levels: 3,
        base_channels: 16,
        channel_mult: vec![1, 2, 2],
        layers_per_block: 2,
        image_size: 16,
        image_channels: 1,
        time_embed_dim: 64,
    };
    let sched = make_linear_schedule(100, 1e-4, 0.02).unwrap();
    let mut model = UNet::init(&cfg, &teacher_arch(&cfg), 1).unwrap();
    let mut rng = Rng::seed_from(2);
    let mut opt = Adam::new(2e-3);
    for batch in [16usize, 32] {
        let x0 = Tensor::randn(&[batch, 1, 16, 16], &mut rng);
        // warmup
        for _ in 0..3 {
            let mut sess = Session::new(true);
            let loss = loss_ori(&model, &mut sess, &x0, &mut rng, &sched).unwrap();
            model.params.zero_grads();
            sess.backward_into(loss, &mut model.params).unwrap();
            opt.step(&mut model.params).unwrap();
        }
        let reps = 20;
        let t = std::time::Instant::now();
        for _ in 0..reps {
            let mut sess = Session::new(true);
            let loss = loss_ori(&model, &mut sess, &x0, &mut rng, &sched).unwrap();
            model.params.zero_grads();
            sess.backward_into(loss, &mut model.params).unwrap();
            opt.step(&mut model.params).unwrap();
        }
        let per = t.elapsed().as_secs_f64() / reps as f64;
        println!("train step batch {batch}: {:.1} ms", per * 1000.0);

        let t = std::time::Instant::now();
        for _ in 0..reps {
            let mut sess = Session::new(false);
            let xv = sess.tape.leaf(x0.clone());
            let _ = model.forward(&mut sess, xv, &vec![5; batch]).unwrap();
        }
        let per = t.elapsed().as_secs_f64() / reps as f64;
        println!("forward only batch {batch}: {:.1} ms", per * 1000.0);
    }
}
