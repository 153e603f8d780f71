//! Endpoint identities of the joint loss, gradient-flow isolation, the
//! shared distillation code path, and retraining determinism.

use dnas_core::diffusion::{diffuse_batch, make_linear_schedule};
use dnas_core::error::Result;
use dnas_core::retrain::{
    beta_at, joint_loss, retrain, BetaSchedule, NullSink, RetrainConfig,
};
use dnas_core::rng::Rng;
use dnas_core::tensor::{Session, Tensor};
use dnas_core::unet::{
    copy_teacher_convs_into_supernet, forward_block, teacher_arch, teacher_capture, BatchSource,
    Supernet, UNet, UNetConfig,
};

fn tiny_config() -> UNetConfig {
    UNetConfig {
        levels: 2,
        base_channels: 4,
        channel_mult: vec![1, 2],
        layers_per_block: 2,
        image_size: 8,
        image_channels: 1,
        time_embed_dim: 8,
    }
}

struct NoiseSource {
    rng: Rng,
}

impl BatchSource for NoiseSource {
    fn next_batch(&mut self, n: usize) -> Result<Tensor> {
        Ok(Tensor::randn(&[n, 1, 8, 8], &mut self.rng))
    }
}

fn grads_bits(store: &dnas_core::tensor::ParamStore) -> Vec<(String, Vec<u32>)> {
    store
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                p.tensor
                    .grad()
                    .map(|g| g.iter().map(|v| v.to_bits()).collect())
                    .unwrap_or_default(),
            )
        })
        .collect()
}

#[test]
fn beta_zero_loss_is_exactly_gamma_times_distillation() {
    let cfg = tiny_config();
    let sched = make_linear_schedule(10, 1e-3, 0.05).unwrap();
    let teacher = UNet::init(&cfg, &teacher_arch(&cfg), 1).unwrap();
    let student = UNet::init(&cfg, &teacher_arch(&cfg), 2).unwrap();
    let mut rng = Rng::seed_from(3);
    let x0 = Tensor::randn(&[2, 1, 8, 8], &mut rng);

    // Joint loss at beta = 0 with gamma = 2.
    let mut sess = Session::new(false);
    let mut rng_a = Rng::seed_from(50);
    let (loss, comps) = joint_loss(
        &student, &teacher, &mut sess, &x0, 0.0, 2.0, &mut rng_a, &sched,
    )
    .unwrap();
    let total = sess.tape.data(loss)[0];
    assert!(comps.l_ori.is_none(), "ori path must be skipped at beta 0");
    let l_dis = comps.l_dis.unwrap() as f32;
    assert_eq!(total.to_bits(), (2.0 * l_dis).to_bits());
}

#[test]
fn beta_one_loss_is_exactly_ori_and_teacher_is_never_invoked() {
    let cfg = tiny_config();
    let sched = make_linear_schedule(10, 1e-3, 0.05).unwrap();
    // A teacher whose forward pass would poison everything: if the capture
    // ran at all, the loss would be NaN.
    let mut teacher = UNet::init(&cfg, &teacher_arch(&cfg), 1).unwrap();
    for p in teacher.params.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = f32::NAN);
    }
    let student = UNet::init(&cfg, &teacher_arch(&cfg), 2).unwrap();
    let mut rng = Rng::seed_from(3);
    let x0 = Tensor::randn(&[2, 1, 8, 8], &mut rng);

    let mut sess = Session::new(false);
    let mut rng_a = Rng::seed_from(50);
    let (loss, comps) = joint_loss(
        &student, &teacher, &mut sess, &x0, 1.0, 1.0, &mut rng_a, &sched,
    )
    .unwrap();
    let total = sess.tape.data(loss)[0];
    assert!(total.is_finite(), "teacher was invoked at beta = 1");
    assert!(comps.l_dis.is_none());
    assert_eq!(total as f64, comps.l_ori.unwrap());
}

#[test]
fn beta_half_combines_components_exactly() {
    let cfg = tiny_config();
    let sched = make_linear_schedule(10, 1e-3, 0.05).unwrap();
    let teacher = UNet::init(&cfg, &teacher_arch(&cfg), 1).unwrap();
    let student = UNet::init(&cfg, &teacher_arch(&cfg), 2).unwrap();
    let mut rng = Rng::seed_from(9);
    let x0 = Tensor::randn(&[2, 1, 8, 8], &mut rng);

    let mut sess = Session::new(false);
    let mut rng_a = Rng::seed_from(51);
    let (loss, comps) = joint_loss(
        &student, &teacher, &mut sess, &x0, 0.5, 1.0, &mut rng_a, &sched,
    )
    .unwrap();
    let total = sess.tape.data(loss)[0];
    let expect = 0.5 * comps.l_dis.unwrap() as f32 + 0.5 * comps.l_ori.unwrap() as f32;
    assert_eq!(total.to_bits(), expect.to_bits());
}

#[test]
fn gradient_flow_isolation_at_both_endpoints() {
    let cfg = tiny_config();
    let sched = make_linear_schedule(10, 1e-3, 0.05).unwrap();
    let teacher = UNet::init(&cfg, &teacher_arch(&cfg), 1).unwrap();
    let student = UNet::init(&cfg, &teacher_arch(&cfg), 2).unwrap();
    let mut rng = Rng::seed_from(12);
    let x0 = Tensor::randn(&[2, 1, 8, 8], &mut rng);

    // beta = 0: gradients equal those of the pure distillation objective.
    let joint_grads = {
        let mut store = student.params.clone();
        store.zero_grads();
        let mut sess = Session::new(true);
        let mut r = Rng::seed_from(77);
        let (loss, _) =
            joint_loss(&student, &teacher, &mut sess, &x0, 0.0, 1.0, &mut r, &sched).unwrap();
        sess.backward_into(loss, &mut store).unwrap();
        grads_bits(&store)
    };
    let manual_dis_grads = {
        let mut store = student.params.clone();
        store.zero_grads();
        let mut r = Rng::seed_from(77);
        let ts: Vec<usize> = (0..2).map(|_| r.int_in(1, sched.timesteps())).collect();
        let eps = Tensor::randn(x0.shape(), &mut r);
        let x_t = diffuse_batch(&x0, &ts, &eps, &sched).unwrap();
        let feats = dnas_core::unet::teacher_capture_at(&teacher, &x_t, &ts).unwrap();
        let mut sess = Session::new(true);
        let emb = sess.tape.leaf(feats.t_emb.clone());
        let silu_emb = sess.tape.silu(emb);
        let mut sum = None;
        for i in 0..cfg.block_count() {
            let x = sess.tape.leaf(feats.x[i].clone());
            let y = sess.tape.leaf(feats.y[i].clone());
            let y_hat = student.forward_block(&mut sess, i, x, silu_emb).unwrap();
            let term = sess.tape.mse_mean(y_hat, y).unwrap();
            sum = Some(match sum {
                None => term,
                Some(acc) => sess.tape.add(acc, term).unwrap(),
            });
        }
        let loss = sess.tape.scale(sum.unwrap(), 1.0);
        sess.backward_into(loss, &mut store).unwrap();
        grads_bits(&store)
    };
    assert_eq!(joint_grads, manual_dis_grads);

    // beta = 1: gradients equal those of plain noise prediction.
    let joint_grads = {
        let mut store = student.params.clone();
        store.zero_grads();
        let mut sess = Session::new(true);
        let mut r = Rng::seed_from(78);
        let (loss, _) =
            joint_loss(&student, &teacher, &mut sess, &x0, 1.0, 1.0, &mut r, &sched).unwrap();
        sess.backward_into(loss, &mut store).unwrap();
        grads_bits(&store)
    };
    let manual_ori_grads = {
        let mut store = student.params.clone();
        store.zero_grads();
        let mut r = Rng::seed_from(78);
        let ts: Vec<usize> = (0..2).map(|_| r.int_in(1, sched.timesteps())).collect();
        let eps = Tensor::randn(x0.shape(), &mut r);
        let x_t = diffuse_batch(&x0, &ts, &eps, &sched).unwrap();
        let mut sess = Session::new(true);
        let x_var = sess.tape.leaf(x_t);
        let eps_var = sess.tape.leaf(eps);
        let pred = student.forward(&mut sess, x_var, &ts).unwrap();
        let loss = sess.tape.mse_mean(pred, eps_var).unwrap();
        sess.backward_into(loss, &mut store).unwrap();
        grads_bits(&store)
    };
    assert_eq!(joint_grads, manual_ori_grads);
}

#[test]
fn distillation_shares_the_block_forward_path_with_supernet_training() {
    // The teacher's weights are installed into the supernet's 3x3 slots; on
    // the same captured fixture, the supernet's block loss and the
    // standalone network's block loss must agree bit for bit.
    let cfg = tiny_config();
    let sched = make_linear_schedule(10, 1e-3, 0.05).unwrap();
    let teacher = UNet::init(&cfg, &teacher_arch(&cfg), 1).unwrap();
    let reference = UNet::init(&cfg, &teacher_arch(&cfg), 7).unwrap();
    let mut supernet = Supernet::init(&cfg, 8).unwrap();
    copy_teacher_convs_into_supernet(&reference, &mut supernet).unwrap();

    let mut rng = Rng::seed_from(30);
    let x0 = Tensor::randn(&[2, 1, 8, 8], &mut rng);
    let feats = teacher_capture(&teacher, &x0, &mut rng, &sched).unwrap();

    for block in 0..cfg.block_count() {
        let via_supernet = {
            let mut sess = Session::new(false);
            let x = sess.tape.leaf(feats.x[block].clone());
            let y = sess.tape.leaf(feats.y[block].clone());
            let emb = sess.tape.leaf(feats.t_emb.clone());
            let silu_emb = sess.tape.silu(emb);
            let y_hat = forward_block(
                &supernet,
                &mut sess,
                block,
                reference.arch.block(block),
                x,
                silu_emb,
            )
            .unwrap();
            let l = sess.tape.mse_mean(y_hat, y).unwrap();
            sess.tape.data(l)[0]
        };
        let via_student = {
            let mut sess = Session::new(false);
            let x = sess.tape.leaf(feats.x[block].clone());
            let y = sess.tape.leaf(feats.y[block].clone());
            let emb = sess.tape.leaf(feats.t_emb.clone());
            let silu_emb = sess.tape.silu(emb);
            let y_hat = reference.forward_block(&mut sess, block, x, silu_emb).unwrap();
            let l = sess.tape.mse_mean(y_hat, y).unwrap();
            sess.tape.data(l)[0]
        };
        assert_eq!(
            via_supernet.to_bits(),
            via_student.to_bits(),
            "block {block} losses diverge between the two paths"
        );
    }
}

#[test]
fn retrain_is_bitwise_deterministic_and_beta_one_matches_step_zero() {
    let cfg = tiny_config();
    let sched = make_linear_schedule(10, 1e-3, 0.05).unwrap();
    let teacher = UNet::init(&cfg, &teacher_arch(&cfg), 1).unwrap();
    let arch = teacher_arch(&cfg);

    let run = |schedule: BetaSchedule| {
        let mut data = NoiseSource {
            rng: Rng::stream(500, "data"),
        };
        let config = RetrainConfig {
            gamma: 1.0,
            schedule,
            total_steps: 6,
            batch_size: 2,
            lr: 1e-3,
            seed: 42,
            log_every: 2,
            checkpoint_every: 0,
        };
        let (student, log) =
            retrain(&arch, &teacher, &mut data, &sched, &config, &mut NullSink).unwrap();
        let bits: Vec<(String, Vec<u32>)> = student
            .params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    p.tensor.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect();
        (bits, log.len())
    };

    let (a, _) = run(BetaSchedule::Step { beta_steps: 3 });
    let (b, _) = run(BetaSchedule::Step { beta_steps: 3 });
    assert_eq!(a, b, "same seed must give bit-identical students");

    // beta == 1 throughout: the fixed-1.0 schedule and a step schedule that
    // fires at 0 describe the very same run.
    let (fixed_one, _) = run(BetaSchedule::Fixed { value: 1.0 });
    let (step_zero, _) = run(BetaSchedule::Step { beta_steps: 0 });
    assert_eq!(fixed_one, step_zero);
}

#[test]
fn retrain_rejects_inconsistent_configs() {
    let bad = RetrainConfig {
        gamma: 0.0,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    let bad = RetrainConfig {
        schedule: BetaSchedule::Step { beta_steps: 100 },
        total_steps: 50,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    let ok = RetrainConfig {
        schedule: BetaSchedule::Linear { beta_steps: 20 },
        total_steps: 50,
        ..Default::default()
    };
    assert!(ok.validate().is_ok());
    assert_eq!(beta_at(&ok.schedule, 5), 0.25);
}

#[test]
fn retrain_emits_periodic_checkpoints_through_the_sink() {
    use dnas_core::retrain::RetrainSink;

    struct Recorder(Vec<usize>);
    impl RetrainSink for Recorder {
        fn on_checkpoint(&mut self, step: usize, _student: &UNet) -> Result<()> {
            self.0.push(step);
            Ok(())
        }
    }

    let cfg = tiny_config();
    let sched = make_linear_schedule(10, 1e-3, 0.05).unwrap();
    let teacher = UNet::init(&cfg, &teacher_arch(&cfg), 1).unwrap();
    let mut data = NoiseSource {
        rng: Rng::stream(7, "data"),
    };
    let mut sink = Recorder(Vec::new());
    retrain(
        &teacher_arch(&cfg),
        &teacher,
        &mut data,
        &sched,
        &RetrainConfig {
            total_steps: 9,
            batch_size: 2,
            checkpoint_every: 3,
            schedule: BetaSchedule::Step { beta_steps: 2 },
            log_every: 3,
            ..Default::default()
        },
        &mut sink,
    )
    .unwrap();
    assert_eq!(sink.0, vec![3, 6, 9]);
}
