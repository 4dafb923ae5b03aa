use aquasplat::losses::LossWeights;
use aquasplat::optics::{render_branch, Branch};
use aquasplat::optimizer::{densify_and_prune, AdamState, DensifyStats, TrainConfig, Trainer};
use aquasplat::scene::{GaussianCloud, ParamGroup};
use aquasplat::synth::{generate, CameraRing, Layout, SynthSpec, SynthScene};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Empty lines of sight see the veil color, as they would in open water.
const WATER: [f64; 3] = [0.1, 0.3, 0.55];

fn ten_gaussian_scene() -> SynthScene {
    generate(&SynthSpec {
        layout: Layout::Grid,
        gaussians: 10,
        ring: CameraRing {
            count: 4,
            ..CameraRing::default()
        },
        width: 32,
        height: 32,
        holdout_every: 4,
        background: WATER,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn short_config() -> TrainConfig {
    TrainConfig {
        iterations: 40,
        densify_interval: 15,
        densify_until: 1.0,
        densify_grad_threshold: 1e-5,
        seed: 11,
        background: WATER,
        ..TrainConfig::default()
    }
}

fn train_in_pool(scene: &SynthScene, threads: usize) -> GaussianCloud {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let mut t = Trainer::new(&scene.bundle, short_config()).unwrap();
        t.run(|_, _| Ok(())).unwrap();
        t.into_cloud()
    })
}

fn bits(c: &GaussianCloud) -> Vec<u64> {
    ParamGroup::ALL.iter().flat_map(|&g| c.group(g).iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn training_is_bit_identical_across_thread_counts() {
    let scene = ten_gaussian_scene();
    let one = train_in_pool(&scene, 1);
    let eight = train_in_pool(&scene, 8);
    assert_eq!(bits(&one), bits(&eight));
    assert_eq!(bits(&one), bits(&train_in_pool(&scene, 1)));
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[test]
fn photometric_fit_of_one_view_cuts_error_to_a_quarter() {
    let scene = ten_gaussian_scene();
    let config = TrainConfig {
        iterations: 500,
        weights: LossWeights::photometric_only(0.2),
        densify_until: 0.0,
        background: WATER,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&scene.bundle, config).unwrap();
    let cam = &scene.bundle.cameras[1];
    let target = &scene.bundle.images[1].data;
    let error = |c: &GaussianCloud| {
        let r = render_branch(c, cam, Branch::Water, WATER, 16).unwrap();
        mse(&r.color.data, target)
    };
    let initial = error(t.cloud());
    for _ in 0..500 {
        t.step_on(1).unwrap();
    }
    let last = error(t.cloud());
    assert!(last <= 0.25 * initial, "error {last} vs initial {initial}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn densification_keeps_the_cloud_consistent(
        grads in prop::collection::vec(0.0f64..4e-4, 10),
        seed in 0u64..1000,
    ) {
        let scene = ten_gaussian_scene();
        let mut cloud = scene.truth.clone();
        // A few near-transparent primitives for the pruning pass.
        cloud.opacity_logits[3] = -8.0;
        cloud.opacity_logits[7] = -8.0;
        let before = cloud.clone();
        let mut adam = AdamState::new(&cloud);
        for g in adam.groups.iter_mut() {
            g.m.iter_mut().for_each(|v| *v = 1.0);
        }
        let mut stats = DensifyStats::new(cloud.count());
        for (i, g) in grads.iter().enumerate() {
            stats.grad_norm_sum[i] = *g;
            stats.visible_count[i] = 1;
        }
        let config = TrainConfig::default();
        let extent = 4.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = densify_and_prune(&mut cloud, &mut adam, &mut stats, &config, extent, &mut rng);

        prop_assert!(cloud.validate().is_ok());
        prop_assert_eq!(cloud.count(), before.count() + s.cloned + s.split - s.pruned);
        for (gi, g) in ParamGroup::ALL.iter().enumerate() {
            prop_assert_eq!(adam.groups[gi].m.len(), cloud.group(*g).len());
        }
        prop_assert_eq!(stats.grad_norm_sum.len(), cloud.count());
        for i in 0..cloud.count() {
            prop_assert!(cloud.opacity(i) >= config.prune_opacity);
            // Every survivor carries the medium of some original primitive.
            let found = (0..before.count()).any(|j| {
                before.atten_raw[j] == cloud.atten_raw[i]
                    && before.backsc_raw[j] == cloud.backsc_raw[i]
                    && before.veil_raw[j] == cloud.veil_raw[i]
            });
            prop_assert!(found);
        }
    }
}
