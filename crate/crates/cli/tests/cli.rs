use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aquasplat::io::{read_image, write_image};
use aquasplat::scene::Image;
use tempfile::{tempdir, TempDir};

const SMALL_SCENE: &str = "\
gaussians = 8
cameras = 4
width = 24
height = 20
holdout_every = 2
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aquasplat"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A temporary root holding a small synthetic scene under `scene/`.
fn small_scene(extra: &str) -> (TempDir, PathBuf) {
    let root = tempdir().unwrap();
    let cfg = root.path().join("synth.cfg");
    fs::write(&cfg, format!("{SMALL_SCENE}{extra}")).unwrap();
    let scene = root.path().join("scene");
    let o = run(&["synth", s(&scene), "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (root, scene)
}

fn sorted_names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn help_exits_cleanly() {
    let o = run(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["synth", "train", "render", "restore", "eval"] {
        assert!(text.contains(sub), "help lacks `{sub}`");
    }
}

#[test]
fn synth_writes_a_loadable_scene_and_refuses_to_overwrite() {
    let (root, scene) = small_scene("");
    let names = sorted_names(&scene);
    for f in ["images", "depths", "gt_cloud.ply", "planted_medium.txt"] {
        assert!(names.iter().any(|n| n == f), "missing {f} in {names:?}");
    }
    assert_eq!(sorted_names(&scene.join("images")).len(), 4);
    let planted = fs::read_to_string(scene.join("planted_medium.txt")).unwrap();
    assert!(planted.contains("background = "));

    let cfg = root.path().join("synth.cfg");
    let again = run(&["synth", s(&scene), "--config", s(&cfg)]);
    assert_eq!(code(&again), 2);
    let forced = run(&["synth", s(&scene), "--config", s(&cfg), "--force"]);
    assert_eq!(code(&forced), 0);

    // Same seed, same bytes; another seed, other bytes.
    let first = sorted_names(&scene.join("images"))[0].clone();
    let same = root.path().join("same");
    let other = root.path().join("other");
    assert_eq!(code(&run(&["synth", s(&same), "--config", s(&cfg)])), 0);
    assert_eq!(code(&run(&["synth", s(&other), "--config", s(&cfg), "--seed", "99"])), 0);
    let bytes = |d: &Path| fs::read(d.join("images").join(&first)).unwrap();
    assert_eq!(bytes(&scene), bytes(&same));
    assert_ne!(bytes(&scene), bytes(&other));
}

#[test]
fn zero_iterations_write_only_the_initial_checkpoint() {
    let (root, scene) = small_scene("");
    let out = root.path().join("run");
    let o = run(&["train", "--scene", s(&scene), "--out", s(&out), "--iterations", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpts = sorted_names(&out.join("checkpoints"));
    assert_eq!(ckpts, vec!["iter_000000.ckpt".to_string(), "iter_000000.ply".to_string()]);
    assert!(out.join("final.ply").is_file());
    let log = fs::read_to_string(out.join("loss_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1, "header only");
}

#[test]
fn missing_scene_is_a_usage_error() {
    let root = tempdir().unwrap();
    let o = run(&[
        "train",
        "--scene",
        s(&root.path().join("absent")),
        "--out",
        s(&root.path().join("run")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_arguments_and_config_keys_exit_with_two() {
    let root = tempdir().unwrap();
    let o = run(&["render", "--branch", "murky"]);
    assert_eq!(code(&o), 2);

    let cfg = root.path().join("bad.cfg");
    fs::write(&cfg, "iterations = 10\nno_such_key = 1\n").unwrap();
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));

    fs::write(&cfg, "iterations = many\n").unwrap();
    assert_eq!(code(&run(&["train", "--config", s(&cfg)])), 2);
    fs::write(&cfg, "iterations = 1\niterations = 2\n").unwrap();
    assert_eq!(code(&run(&["train", "--config", s(&cfg)])), 2);
    let o = run(&["synth", s(&root.path().join("x")), "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn zero_medium_renders_both_branches_identically() {
    let (root, scene) = small_scene("beta_d = 0 0 0\nbeta_b = 0 0 0\nrequire_ordering = false\n");
    let out = root.path().join("renders");
    let gt = scene.join("gt_cloud.ply");
    let o = run(&["render", "--checkpoint", s(&gt), "--scene", s(&scene), "--out", s(&out), "--depth"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let names = sorted_names(&out);
    let water: Vec<&String> = names.iter().filter(|n| n.ends_with("_water.png")).collect();
    assert_eq!(water.len(), 4);
    for w in water {
        let c = w.replace("_water.png", "_clear.png");
        assert_eq!(fs::read(out.join(w)).unwrap(), fs::read(out.join(&c)).unwrap(), "{w} vs {c}");
        assert!(out.join(w.replace("_water.png", "_depth.png")).is_file());
    }
}

#[test]
fn render_table_restore_and_eval_agree() {
    let (root, scene) = small_scene("");
    let gt = scene.join("gt_cloud.ply");
    let renders = root.path().join("renders");
    let o = run(&[
        "render",
        "--checkpoint",
        s(&gt),
        "--scene",
        s(&scene),
        "--out",
        s(&renders),
        "--branch",
        "water",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    // The table's PSNR comes from the unquantized render; 8-bit output shifts it only slightly.
    let table = fs::read_to_string(renders.join("psnr.tsv")).unwrap();
    let metrics = root.path().join("metrics.tsv");
    let o = run(&[
        "eval",
        "--renders",
        s(&renders),
        "--references",
        s(&scene.join("images")),
        "--out",
        s(&metrics),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let evaluated = fs::read_to_string(&metrics).unwrap();
    let mut rows = 0;
    for line in table.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let logged: f64 = f[2].parse().unwrap();
        let row = evaluated.lines().find(|l| l.starts_with(&format!("{}\t", f[0]))).unwrap();
        let measured: f64 = row.split('\t').nth(1).unwrap().parse().unwrap();
        assert!((logged - measured).abs() < 0.05, "{logged} vs {measured}");
        rows += 1;
    }
    assert_eq!(rows, 4);

    let restored = root.path().join("restored");
    let clear = root.path().join("clear");
    let common = ["--checkpoint", s(&gt), "--scene", s(&scene)];
    assert_eq!(code(&run(&[&["restore"][..], &common, &["--out", s(&restored)]].concat())), 0);
    assert_eq!(
        code(&run(&[&["render"][..], &common, &["--out", s(&clear), "--branch", "clear"]].concat())),
        0
    );
    for n in sorted_names(&clear).iter().filter(|n| n.ends_with(".png")) {
        assert_eq!(fs::read(clear.join(n)).unwrap(), fs::read(restored.join(n)).unwrap());
    }
}

#[test]
fn eval_of_identical_images_with_a_matching_chart() {
    let root = tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let (w, h) = (24, 16);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let patch = (y / 8) * 6 + x / 4;
            data.extend([(20 * patch) as f64 / 255.0, 0.4, (200 - 10 * patch) as f64 / 255.0]);
        }
    }
    let img = Image::from_data(w, h, data).unwrap();
    write_image(&img, &a.join("v.png")).unwrap();
    write_image(&img, &b.join("v.png")).unwrap();
    assert_eq!(read_image(&a.join("v.png")).unwrap(), img);

    let mut chart = String::from("# x y w h r g b\n");
    for p in 0..12 {
        let (x, y) = ((p % 6) * 4, (p / 6) * 8);
        chart += &format!("{x} {y} 4 8 {} 0.4 {}\n", (20 * p) as f64 / 255.0, (200 - 10 * p) as f64 / 255.0);
    }
    fs::write(b.join("v.chart"), chart).unwrap();

    let out = root.path().join("m.tsv");
    let o = run(&["eval", "--renders", s(&a), "--references", s(&b), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let row: Vec<f64> = text
        .lines()
        .find(|l| l.starts_with("v.png"))
        .unwrap()
        .split('\t')
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(row[0], 100.0);
    assert_eq!(row[1], 1.0);
    assert!(row[2] < 1e-4, "delta E {}", row[2]);
    assert!(row[3] < 1e-4, "angular error {}", row[3]);
}
