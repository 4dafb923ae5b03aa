use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use aquasplat::io::images::{read_image, write_depth_png, write_image};
use aquasplat::io::{load_scene, read_ply, write_ply};
use aquasplat::metrics::{chart_delta_e2000, mean_angular_error, psnr, ssim, ChartSpec};
use aquasplat::optics::{render_image, Branch};
use aquasplat::optimizer::{loss_log_line, Trainer, LOSS_LOG_HEADER};
use aquasplat::synth::{generate, write_scene_dir};
use aquasplat::Error;

use crate::config::{load_synth_spec, BranchChoice, RunConfig, ViewChoice};
use crate::{EvalArgs, RenderArgs, RestoreArgs, SynthArgs, TrainArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Pipeline(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Pipeline(Error::Config(_)) => 2,
            CliError::Pipeline(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 2,
            CliError::Pipeline(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Pipeline(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Creates `dir`, refusing a non-empty existing one unless `force`.
fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(io_err(dir))?;
        if entries.next().is_some() && !force {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty (pass --force to write into it)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn required(v: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    v.ok_or_else(|| CliError::Usage(format!("no {what} given (set it in the config or pass --{what})")))
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut spec = load_synth_spec(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    prepare_output(&a.out, a.force)?;
    let scene = generate(&spec)?;
    write_scene_dir(&scene, &a.out)?;
    println!(
        "wrote {} views and {} ground-truth primitives to {}",
        scene.bundle.cameras.len(),
        scene.truth.count(),
        a.out.display()
    );
    Ok(())
}

fn checkpoint_path(out: &Path, iteration: usize) -> PathBuf {
    out.join("checkpoints").join(format!("iter_{iteration:06}.ply"))
}

fn save_checkpoint(t: &Trainer<'_>, ply: &Path) -> Result<()> {
    write_ply(t.cloud(), ply)?;
    t.checkpoint_meta().save(&ply.with_extension("ckpt"))?;
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_run_config(a.config.as_deref())?;
    if let Some(s) = &a.scene {
        cfg.scene = Some(s.clone());
    }
    if let Some(o) = &a.out {
        cfg.output = Some(o.clone());
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    if let Some(d) = a.downscale {
        cfg.downscale = d;
    }
    cfg.train.validate()?;
    let scene_dir = required(cfg.scene.clone(), "scene")?;
    let out = required(cfg.output.clone(), "out")?;

    let scene = load_scene(&scene_dir, cfg.downscale, cfg.holdout_every)?;
    prepare_output(&out, a.force)?;
    std::fs::create_dir_all(out.join("checkpoints")).map_err(io_err(&out))?;
    let used = out.join("config.txt");
    std::fs::write(&used, cfg.to_text()).map_err(io_err(&used))?;

    let mut trainer = Trainer::new(&scene, cfg.train.clone())?;
    save_checkpoint(&trainer, &checkpoint_path(&out, 0))?;

    let log_path = out.join("loss_log.tsv");
    let log = std::fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log = std::io::BufWriter::new(log);
    writeln!(log, "{LOSS_LOG_HEADER}").map_err(io_err(&log_path))?;
    let interval = cfg.checkpoint_interval;
    let total = cfg.train.iterations;
    trainer.run(|t, o| {
        writeln!(log, "{}", loss_log_line(o)).map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        let periodic = interval > 0 && o.iteration % interval == 0;
        if periodic || o.iteration == total {
            save_checkpoint(t, &checkpoint_path(&out, o.iteration)).map_err(|e| match e {
                CliError::Pipeline(e) => e,
                CliError::Usage(m) => Error::Argument(m),
            })?;
        }
        Ok(())
    })?;
    log.flush().map_err(io_err(&log_path))?;
    save_checkpoint(&trainer, &out.join("final.ply"))?;
    println!(
        "trained {} iterations; {} primitives; final checkpoint {}",
        trainer.iteration(),
        trainer.cloud().count(),
        out.join("final.ply").display()
    );
    Ok(())
}

struct RenderJob {
    cfg: RunConfig,
    force: bool,
}

fn stem(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string())
}

fn run_render(job: RenderJob) -> Result<()> {
    let cfg = job.cfg;
    let checkpoint = required(cfg.checkpoint.clone(), "checkpoint")?;
    let scene_dir = required(cfg.scene.clone(), "scene")?;
    let out = required(cfg.output.clone(), "out")?;
    let cloud = read_ply(&checkpoint)?;
    let scene = load_scene(&scene_dir, cfg.downscale, cfg.holdout_every)?;
    prepare_output(&out, job.force)?;

    let views: Vec<usize> = match cfg.views {
        ViewChoice::All => (0..scene.cameras.len()).collect(),
        ViewChoice::Train => scene.split.train.clone(),
        ViewChoice::Test => scene.split.test.clone(),
    };
    let mut table = String::from("view\tsplit\twater_psnr\n");
    for v in views {
        let name = stem(&scene.names[v]);
        let cam = &scene.cameras[v];
        let water = render_image(&cloud, cam, Branch::Water, cfg.train.background, cfg.train.tile_size)?;
        let write = |branch: Branch, suffix: &str| -> Result<()> {
            let path = out.join(format!("{name}{suffix}.png"));
            match branch {
                Branch::Water => write_image(&water.color, &path)?,
                Branch::Clear => {
                    let clear = render_image(&cloud, cam, Branch::Clear, cfg.train.background, cfg.train.tile_size)?;
                    write_image(&clear.color, &path)?
                }
            }
            Ok(())
        };
        match cfg.branch {
            BranchChoice::Water => write(Branch::Water, "")?,
            BranchChoice::Clear => write(Branch::Clear, "")?,
            BranchChoice::Both => {
                write(Branch::Water, "_water")?;
                write(Branch::Clear, "_clear")?;
            }
        }
        if cfg.depth {
            let max = write_depth_png(&water.depth, &out.join(format!("{name}_depth.png")))?;
            let side = out.join(format!("{name}_depth.txt"));
            std::fs::write(&side, format!("max_depth = {max:?}\n")).map_err(io_err(&side))?;
        }
        let split = if scene.split.test.contains(&v) { "test" } else { "train" };
        let _ = writeln!(table, "{}\t{split}\t{:.6}", scene.names[v], psnr(&water.color, &scene.images[v])?);
    }
    let table_path = out.join("psnr.tsv");
    std::fs::write(&table_path, table).map_err(io_err(&table_path))?;
    println!("wrote renders to {}", out.display());
    Ok(())
}

fn render_config(
    config: Option<&Path>,
    checkpoint: &Option<PathBuf>,
    scene: &Option<PathBuf>,
    out: &Option<PathBuf>,
    depth: bool,
    downscale: Option<usize>,
    views: Option<ViewChoice>,
) -> Result<RunConfig> {
    let mut cfg = load_run_config(config)?;
    if let Some(c) = checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(s) = scene {
        cfg.scene = Some(s.clone());
    }
    if let Some(o) = out {
        cfg.output = Some(o.clone());
    }
    cfg.depth |= depth;
    if let Some(d) = downscale {
        cfg.downscale = d;
    }
    if let Some(v) = views {
        cfg.views = v;
    }
    Ok(cfg)
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let mut cfg = render_config(a.config.as_deref(), &a.checkpoint, &a.scene, &a.out, a.depth, a.downscale, a.views)?;
    if let Some(b) = a.branch {
        cfg.branch = b;
    }
    run_render(RenderJob { cfg, force: a.force })
}

pub fn restore(a: &RestoreArgs) -> Result<()> {
    let mut cfg = render_config(a.config.as_deref(), &a.checkpoint, &a.scene, &a.out, a.depth, a.downscale, a.views)?;
    cfg.branch = BranchChoice::Clear;
    run_render(RenderJob { cfg, force: a.force })
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for e in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let e = e.map_err(io_err(dir))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") && e.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = load_run_config(a.config.as_deref())?;
    if let Some(r) = &a.renders {
        cfg.renders = Some(r.clone());
    }
    if let Some(r) = &a.references {
        cfg.references = Some(r.clone());
    }
    if let Some(c) = &a.charts {
        cfg.charts = Some(c.clone());
    }
    let renders = required(cfg.renders.clone(), "renders")?;
    let references = required(cfg.references.clone(), "references")?;
    let charts = cfg.charts.clone().unwrap_or_else(|| references.clone());

    let matched: Vec<String> = png_names(&renders)?
        .into_iter()
        .filter(|n| references.join(n).is_file())
        .collect();
    if matched.is_empty() {
        return Err(CliError::Usage(format!(
            "no file names in {} match a reference in {}",
            renders.display(),
            references.display()
        )));
    }

    let mut table = String::from("image\tpsnr\tssim\tdelta_e00\tangular_error_deg\n");
    let (mut sum_p, mut sum_s) = (0.0, 0.0);
    let (mut sum_de, mut sum_ang, mut n_chart) = (0.0, 0.0, 0usize);
    for name in &matched {
        let r = read_image(&renders.join(name))?;
        let reference = read_image(&references.join(name))?;
        let p = psnr(&r, &reference)?;
        let s = ssim(&r, &reference)?;
        sum_p += p;
        sum_s += s;
        let chart_path = charts.join(format!("{}.chart", stem(name)));
        let (de, ang) = if chart_path.is_file() {
            let chart = ChartSpec::load(&chart_path)?;
            chart.validate(r.width, r.height)?;
            let de = chart_delta_e2000(&r, &chart)?;
            let ang = mean_angular_error(&r, &chart)?;
            sum_de += de;
            sum_ang += ang;
            n_chart += 1;
            (format!("{de:.6}"), format!("{ang:.6}"))
        } else {
            ("-".into(), "-".into())
        };
        let _ = writeln!(table, "{name}\t{p:.6}\t{s:.6}\t{de}\t{ang}");
    }
    let n = matched.len() as f64;
    let chart_mean = |v: f64| if n_chart > 0 { format!("{:.6}", v / n_chart as f64) } else { "-".into() };
    let _ = writeln!(
        table,
        "mean\t{:.6}\t{:.6}\t{}\t{}",
        sum_p / n,
        sum_s / n,
        chart_mean(sum_de),
        chart_mean(sum_ang)
    );
    print!("{table}");
    let out = a.out.clone().unwrap_or_else(|| renders.join("metrics.tsv"));
    std::fs::write(&out, table).map_err(io_err(&out))?;
    Ok(())
}
