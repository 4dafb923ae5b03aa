#![allow(dead_code)]

use aquasplat::optics::{render_branch, Branch};
use aquasplat::raster::DEFAULT_TILE_SIZE;
use aquasplat::scene::{logit, Camera, Gaussian, GaussianCloud, Image, ScalarMap};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

/// A small random scene: cloud, camera, target image and pseudo-depth.
pub struct SmallScene {
    pub cloud: GaussianCloud,
    pub camera: Camera,
    pub target: Image,
    pub pseudo_depth: ScalarMap,
}

/// Up to `max_gaussians` primitives clustered in front of a 16x16 camera.
pub fn random_small_scene(seed: u64, max_gaussians: usize) -> SmallScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(4..=max_gaussians.max(4));
    let (w, h) = (16, 16);
    let eye = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), -2.5);
    let camera = Camera::look_at(w, h, 18.0, eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0)).unwrap();
    let mut cloud = GaussianCloud::new();
    for _ in 0..n {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let q = if q.iter().map(|v| v * v).sum::<f64>() < 0.05 { [1.0, 0.0, 0.0, 0.0] } else { q };
        cloud.push(Gaussian {
            position: std::array::from_fn(|_| rng.random_range(-0.35..0.35)),
            rotation: q,
            log_scale: std::array::from_fn(|_| rng.random_range(-2.0..-1.0)),
            opacity_logit: logit(rng.random_range(0.3..0.9)),
            base_color: std::array::from_fn(|_| rng.random_range(0.1..0.95)),
            atten_raw: std::array::from_fn(|_| rng.random_range(-2.0..0.5)),
            backsc_raw: std::array::from_fn(|_| rng.random_range(-3.0..0.0)),
            veil_raw: std::array::from_fn(|_| rng.random_range(-1.5..1.5)),
        });
    }
    // Target: the water render of a perturbed copy plus small pixel noise.
    let mut other = cloud.clone();
    for v in other.positions.iter_mut().flatten() {
        *v += rng.random_range(-0.05..0.05);
    }
    for v in other.base_colors.iter_mut().flatten() {
        *v = (*v + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0);
    }
    let truth = render_branch(&other, &camera, Branch::Water, BACKGROUND, DEFAULT_TILE_SIZE).unwrap();
    let mut target = truth.color;
    for v in target.data.iter_mut() {
        *v = (*v + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
    }
    let scale = rng.random_range(0.5..2.0);
    let shift = rng.random_range(-1.0..1.0);
    let mut pseudo_depth = ScalarMap::new(w, h);
    for (v, d) in pseudo_depth.data.iter_mut().zip(&truth.depth.data) {
        *v = scale * d + shift + rng.random_range(-0.05..0.05);
    }
    SmallScene {
        cloud,
        camera,
        target,
        pseudo_depth,
    }
}
