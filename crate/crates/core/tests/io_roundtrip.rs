mod common;

use std::fs;

use aquasplat::io::colmap::CameraModel;
use aquasplat::io::images::quantize_u8;
use aquasplat::io::ply::to_f32_precision;
use aquasplat::io::{load_scene, read_colmap_text, read_image, read_ply, write_colmap_text, write_image, write_ply};
use aquasplat::scene::Image;
use aquasplat::synth::{generate, write_scene_dir, CameraRing, SynthSpec};
use aquasplat::Error;
use proptest::prelude::*;
use tempfile::tempdir;

const CAMERAS: &str = "\
# Camera list with one line of data per camera:
1 PINHOLE 64 48 50.5 51.25 32 24
2 SIMPLE_PINHOLE 32 32 40 16 16
";

const IMAGES: &str = "\
# Image list with two lines of data per image:
1 1 0 0 0 0.5 -0.25 3 1 a.png
10.5 20.25 7 11 12 -1
2 0.7071067811865476 0 0.7071067811865476 0 -1 0 2.5 2 b.png

";

const POINTS: &str = "\
7 0.1 0.2 0.3 255 128 0 0.5 1 0 2 1
8 -1.5 2 4 10 20 30 0.25
";

#[test]
fn colmap_fixture_round_trips_exactly() {
    let dir = tempdir().unwrap();
    fs::write(dir.path().join("cameras.txt"), CAMERAS).unwrap();
    fs::write(dir.path().join("images.txt"), IMAGES).unwrap();
    fs::write(dir.path().join("points3D.txt"), POINTS).unwrap();
    let model = read_colmap_text(dir.path()).unwrap();

    assert_eq!(model.cameras.len(), 2);
    assert_eq!(
        model.cameras[&1].model,
        CameraModel::Pinhole {
            fx: 50.5,
            fy: 51.25,
            cx: 32.0,
            cy: 24.0
        }
    );
    assert_eq!(model.images.len(), 2);
    assert_eq!(model.images[0].name, "a.png");
    assert_eq!(model.images[0].points2d, vec![(10.5, 20.25, 7), (11.0, 12.0, -1)]);
    assert!(model.images[1].points2d.is_empty());
    assert_eq!(model.points[0].rgb, [255, 128, 0]);
    assert_eq!(model.points[0].track, vec![(1, 0), (2, 1)]);
    assert!(model.points[1].track.is_empty());

    let out = tempdir().unwrap();
    write_colmap_text(&model, out.path()).unwrap();
    assert_eq!(read_colmap_text(out.path()).unwrap(), model);

    let cam = model.camera_for(&model.images[1]).unwrap();
    assert_eq!((cam.fx, cam.fy, cam.cx, cam.cy), (40.0, 40.0, 16.0, 16.0));
}

#[test]
fn unsupported_camera_model_is_reported() {
    let dir = tempdir().unwrap();
    fs::write(dir.path().join("cameras.txt"), "1 OPENCV 4 4 1 1 2 2 0 0 0 0\n").unwrap();
    fs::write(dir.path().join("images.txt"), "").unwrap();
    fs::write(dir.path().join("points3D.txt"), "").unwrap();
    assert!(matches!(
        read_colmap_text(dir.path()),
        Err(Error::UnsupportedCameraModel(m)) if m == "OPENCV"
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ply_round_trip_is_float32_identity(seed in 0u64..1000) {
        let scene = common::random_small_scene(seed, 12);
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.ply");
        write_ply(&scene.cloud, &path).unwrap();
        let back = read_ply(&path).unwrap();
        prop_assert_eq!(&back, &to_f32_precision(&scene.cloud));
        let again = dir.path().join("d.ply");
        write_ply(&back, &again).unwrap();
        prop_assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn png_quantization_is_idempotent(values in prop::collection::vec(-0.2f64..1.2, 5 * 4 * 3)) {
        let dir = tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        let img = Image::from_data(5, 4, values.clone()).unwrap();
        write_image(&img, &a).unwrap();
        let once = read_image(&a).unwrap();
        for (v, r) in values.iter().zip(&once.data) {
            prop_assert_eq!(*r, quantize_u8(*v) as f64 / 255.0);
        }
        write_image(&once, &b).unwrap();
        prop_assert_eq!(&read_image(&b).unwrap(), &once);
    }
}

fn small_spec() -> SynthSpec {
    SynthSpec {
        gaussians: 12,
        ring: CameraRing {
            count: 5,
            ..CameraRing::default()
        },
        width: 24,
        height: 20,
        holdout_every: 2,
        ..SynthSpec::default()
    }
}

#[test]
fn synthetic_scene_directory_loads_back() {
    let scene = generate(&small_spec()).unwrap();
    let dir = tempdir().unwrap();
    write_scene_dir(&scene, dir.path()).unwrap();
    let bundle = load_scene(dir.path(), 1, 2).unwrap();

    assert_eq!(bundle.names, scene.bundle.names);
    assert_eq!(bundle.split, scene.bundle.split);
    assert!(bundle.has_depth());
    for (a, b) in bundle.cameras.iter().zip(&scene.bundle.cameras) {
        assert!((a.rotation - b.rotation).abs().max() < 1e-12);
        assert!((a.translation - b.translation).abs().max() < 1e-12);
        assert_eq!((a.fx, a.cx, a.width), (b.fx, b.cx, b.width));
    }
    for (a, b) in bundle.images.iter().zip(&scene.bundle.images) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(*x, quantize_u8(*y) as f64 / 255.0);
        }
    }
    assert_eq!(bundle.init_points.len(), scene.bundle.init_points.len());

    let half = load_scene(dir.path(), 2, 2).unwrap();
    assert_eq!((half.images[0].width, half.images[0].height), (12, 10));
    assert_eq!(half.pseudo_depths[0].width, 12);
    assert_eq!(half.cameras[0].fx, bundle.cameras[0].fx / 2.0);
}

#[test]
fn partial_pseudo_depth_is_rejected() {
    let scene = generate(&small_spec()).unwrap();
    let dir = tempdir().unwrap();
    write_scene_dir(&scene, dir.path()).unwrap();
    let first = fs::read_dir(dir.path().join("depths")).unwrap().next().unwrap().unwrap().path();
    fs::remove_file(first).unwrap();
    assert!(matches!(load_scene(dir.path(), 1, 2), Err(Error::ContractViolation(_))));

    fs::remove_dir_all(dir.path().join("depths")).unwrap();
    let bundle = load_scene(dir.path(), 1, 2).unwrap();
    assert!(!bundle.has_depth());
}

#[test]
fn missing_scene_directory_is_an_io_error() {
    let dir = tempdir().unwrap();
    let err = load_scene(&dir.path().join("nope"), 1, 8).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}
