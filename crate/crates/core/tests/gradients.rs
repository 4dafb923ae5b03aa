mod common;

use aquasplat::diff::{finite_diff_oracle, freeze, loss_and_grad, loss_with_frozen, relative_error, RenderSettings, Supervision};
use aquasplat::losses::LossWeights;
use aquasplat::scene::ParamGroup;

/// Neighborhood radius large enough that the smoothness term couples the random primitives.
fn weights() -> LossWeights {
    LossWeights {
        smooth_radius: 0.8,
        ..LossWeights::default()
    }
}

#[test]
fn all_terms_match_central_differences_on_random_scenes() {
    let w = weights();
    let settings = RenderSettings {
        background: common::BACKGROUND,
        ..RenderSettings::default()
    };
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let sc = common::random_small_scene(seed, 10);
        let sup = Supervision {
            target: &sc.target,
            pseudo_depth: Some(&sc.pseudo_depth),
        };
        let (report, g) = loss_and_grad(&sc.cloud, &sc.camera, sup, &w, &settings, true).unwrap();
        assert!(report.depth_pcc.is_some(), "seed {seed}: depth term inactive");
        assert!(report.spatial.is_some() && !report.spatial_empty, "seed {seed}: smoothness term inactive");
        let frozen = freeze(&sc.cloud, &sc.camera, sup, &w, &settings).unwrap();
        let fd = finite_diff_oracle(&sc.cloud, 1e-6, |c| loss_with_frozen(c, &sc.camera, sup, &w, &settings, true, &frozen))
            .unwrap();
        for group in ParamGroup::ALL {
            for (k, (a, b)) in g.group(group).iter().zip(fd.group(group)).enumerate() {
                let e = relative_error(*a, *b, 1e-6);
                worst = worst.max(e);
                assert!(e <= 1e-3, "seed {seed} {} [{k}]: analytic {a:e} vs fd {b:e} (rel {e:e})", group.name());
            }
        }
    }
    eprintln!("worst relative error {worst:e}");
}
