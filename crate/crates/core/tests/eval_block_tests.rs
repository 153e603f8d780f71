//! Candidate evaluation on captured fixtures.

use dnas_core::diffusion::make_linear_schedule;
use dnas_core::error::Result;
use dnas_core::rng::Rng;
use dnas_core::search::{capture_search_fixture, cost_of_arch, eval_block_on_fixture};
use dnas_core::tensor::Tensor;
use dnas_core::unet::{
    copy_teacher_convs_into_supernet, sample_random_path, teacher_arch, BatchSource, BlockArch,
    Kernel, Supernet, UNet, UNetConfig,
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

struct NoiseSource(Rng);

impl BatchSource for NoiseSource {
    fn next_batch(&mut self, n: usize) -> Result<Tensor> {
        Ok(Tensor::randn(&[n, 1, 8, 8], &mut self.0))
    }
}

#[test]
fn teacher_weights_at_teacher_arch_evaluate_to_zero_loss() {
    let cfg = tiny_config();
    let sched = make_linear_schedule(10, 1e-3, 0.1).unwrap();
    let teacher = UNet::init(&cfg, &teacher_arch(&cfg), 4).unwrap();
    let mut supernet = Supernet::init(&cfg, 5).unwrap();
    copy_teacher_convs_into_supernet(&teacher, &mut supernet).unwrap();

    let mut data = NoiseSource(Rng::stream(9, "data"));
    let fixture =
        capture_search_fixture(&teacher, &mut data, &sched, 3, 4, 17).unwrap();
    let base = BlockArch::uniform(Kernel::K3, 2);
    for block in 0..cfg.block_count() {
        let loss = eval_block_on_fixture(&supernet, block, &base, &fixture).unwrap();
        // The supernet replays the exact arithmetic of the captured teacher.
        assert_eq!(loss, 0.0, "block {block} loss {loss}");
    }
}

#[test]
fn fixture_mean_equals_hand_average_of_per_batch_losses() {
    let cfg = tiny_config();
    let sched = make_linear_schedule(10, 1e-3, 0.1).unwrap();
    let teacher = UNet::init(&cfg, &teacher_arch(&cfg), 4).unwrap();
    let supernet = Supernet::init(&cfg, 6).unwrap();
    let mut data = NoiseSource(Rng::stream(10, "data"));
    let fixture = capture_search_fixture(&teacher, &mut data, &sched, 4, 4, 23).unwrap();
    let arch = BlockArch::new(vec![Kernel::K1, Kernel::K5]);

    let mean = eval_block_on_fixture(&supernet, 1, &arch, &fixture).unwrap();
    let hand: f64 = fixture
        .iter()
        .map(|f| eval_block_on_fixture(&supernet, 1, &arch, std::slice::from_ref(f)).unwrap())
        .sum::<f64>()
        / fixture.len() as f64;
    assert!((mean - hand).abs() < 1e-15, "{mean} vs {hand}");
}

#[test]
fn fixture_capture_is_deterministic_per_seed() {
    let cfg = tiny_config();
    let sched = make_linear_schedule(10, 1e-3, 0.1).unwrap();
    let teacher = UNet::init(&cfg, &teacher_arch(&cfg), 4).unwrap();
    let capture = || {
        let mut data = NoiseSource(Rng::stream(11, "data"));
        capture_search_fixture(&teacher, &mut data, &sched, 2, 4, 31).unwrap()
    };
    let (a, b) = (capture(), capture());
    for (fa, fb) in a.iter().zip(b.iter()) {
        assert_eq!(fa.ts, fb.ts);
        for (xa, xb) in fa.x.iter().zip(fb.x.iter()) {
            assert_eq!(xa.data(), xb.data());
        }
    }
}

#[test]
fn teacher_arch_dominates_cost_of_any_smaller_kernel_arch() {
    let cfg = tiny_config();
    let teacher_cost = cost_of_arch(&cfg, &teacher_arch(&cfg)).unwrap().total_macs;
    let mut rng = Rng::seed_from(12);
    let mut seen_smaller = 0;
    for _ in 0..200 {
        let arch = sample_random_path(&cfg, &mut rng);
        let has_any_five = arch.flat_choices().iter().any(|k| *k == Kernel::K5);
        if !has_any_five {
            let cost = cost_of_arch(&cfg, &arch).unwrap().total_macs;
            assert!(cost <= teacher_cost);
            seen_smaller += 1;
        }
    }
    assert!(seen_smaller > 0);
}

#[test]
fn search_can_exclude_the_middle_block() {
    use dnas_core::search::{search_all, SearchConfig};
    let cfg = tiny_config();
    let sched = make_linear_schedule(10, 1e-3, 0.1).unwrap();
    let teacher = UNet::init(&cfg, &teacher_arch(&cfg), 4).unwrap();
    let supernet = Supernet::init(&cfg, 5).unwrap();
    let mut data = NoiseSource(Rng::stream(9, "data"));
    let fixture = capture_search_fixture(&teacher, &mut data, &sched, 2, 4, 17).unwrap();
    let result = search_all(
        &supernet,
        &fixture,
        &SearchConfig {
            r: 1.5,
            search_middle: false,
            ..Default::default()
        },
    )
    .unwrap();
    let middle = cfg.levels;
    assert_eq!(
        result.arch.block(middle),
        &BlockArch::uniform(Kernel::K3, cfg.layers_per_block),
        "middle block must keep the teacher architecture"
    );
    assert_eq!(result.per_block[middle].candidates_evaluated, 1);
}

#[test]
fn enumeration_cap_is_enforced() {
    use dnas_core::search::{search_block, SearchConfig};
    let cfg = tiny_config();
    let sched = make_linear_schedule(10, 1e-3, 0.1).unwrap();
    let teacher = UNet::init(&cfg, &teacher_arch(&cfg), 4).unwrap();
    let supernet = Supernet::init(&cfg, 5).unwrap();
    let mut data = NoiseSource(Rng::stream(9, "data"));
    let fixture = capture_search_fixture(&teacher, &mut data, &sched, 2, 4, 17).unwrap();
    let err = search_block(
        &supernet,
        0,
        &fixture,
        &SearchConfig {
            enumeration_cap: 5, // d = 2 means 9 candidates
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, dnas_core::CoreError::Configuration(_)));
}
