//! Flat `key = value` configuration files.
//!
//! `#` starts a comment, blank lines are ignored, keys may appear at most once
//! and unknown keys are rejected by name. Command-line flags are applied after
//! the file and therefore win.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use aquasplat::optimizer::TrainConfig;
use aquasplat::synth::{CameraRing, Layout, MediumValues, PlantedMedium, SynthSpec};
use aquasplat::{Error, Result};

/// One `key = value` line.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_entries(text: &str, origin: &Path) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{}:{}: expected `key = value`, got `{line}`", origin.display(), i + 1))
        })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("{}:{}: empty key", origin.display(), i + 1)));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config(format!(
                "{}:{}: key `{key}` already set on line {}",
                origin.display(),
                i + 1,
                prev.line
            )));
        }
        out.push(Entry {
            line: i + 1,
            key,
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

fn read_entries(path: &Path) -> Result<Vec<Entry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_entries(&text, path)
}

fn bad(e: &Entry, what: &str) -> Error {
    Error::Config(format!("line {}: `{}` expects {what}, got `{}`", e.line, e.key, e.value))
}

fn num<T: FromStr>(e: &Entry) -> Result<T> {
    e.value.parse().map_err(|_| bad(e, "a number"))
}

fn flag(e: &Entry) -> Result<bool> {
    match e.value.as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(e, "true or false")),
    }
}

fn triple(e: &Entry) -> Result<[f64; 3]> {
    let v: Vec<f64> = e
        .value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad(e, "three numbers"))?;
    v.try_into().map_err(|_| bad(e, "three numbers"))
}

fn unknown(e: &Entry) -> Error {
    Error::Config(format!("line {}: unknown key `{}`", e.line, e.key))
}

/// Which branch a render command writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BranchChoice {
    Water,
    Clear,
    #[default]
    Both,
}

impl FromStr for BranchChoice {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "water" => Ok(Self::Water),
            "clear" => Ok(Self::Clear),
            "both" => Ok(Self::Both),
            _ => Err(format!("unknown branch `{s}` (expected water, clear or both)")),
        }
    }
}

/// Which views a render command covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ViewChoice {
    #[default]
    All,
    Train,
    Test,
}

impl FromStr for ViewChoice {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Self::All),
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            _ => Err(format!("unknown view set `{s}` (expected all, train or test)")),
        }
    }
}

/// Everything `train`, `render`, `restore` and `eval` read from a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scene: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub downscale: usize,
    pub holdout_every: usize,
    /// Checkpoint every this many iterations; 0 writes only the initial and final ones.
    pub checkpoint_interval: usize,
    pub checkpoint: Option<PathBuf>,
    pub branch: BranchChoice,
    pub depth: bool,
    pub views: ViewChoice,
    pub renders: Option<PathBuf>,
    pub references: Option<PathBuf>,
    pub charts: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            scene: None,
            output: None,
            downscale: 1,
            holdout_every: 6,
            checkpoint_interval: 5000,
            checkpoint: None,
            branch: BranchChoice::Both,
            depth: false,
            views: ViewChoice::All,
            renders: None,
            references: None,
            charts: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(&read_entries(path)?).map_err(|err| match err {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut c = Self::default();
        for e in entries {
            c.set(e)?;
        }
        Ok(c)
    }

    fn set(&mut self, e: &Entry) -> Result<()> {
        let t = &mut self.train;
        let path = || Some(PathBuf::from(&e.value));
        match e.key.as_str() {
            "scene" => self.scene = path(),
            "output" => self.output = path(),
            "checkpoint" => self.checkpoint = path(),
            "renders" => self.renders = path(),
            "references" => self.references = path(),
            "charts" => self.charts = path(),
            "downscale" => self.downscale = num(e)?,
            "holdout_every" => self.holdout_every = num(e)?,
            "checkpoint_interval" => self.checkpoint_interval = num(e)?,
            "branch" => self.branch = e.value.parse().map_err(|m: String| bad(e, &m))?,
            "depth" => self.depth = flag(e)?,
            "views" => self.views = e.value.parse().map_err(|m: String| bad(e, &m))?,
            "iterations" => t.iterations = num(e)?,
            "densify_interval" => t.densify_interval = num(e)?,
            "densify_until" => t.densify_until = num(e)?,
            "reg_interval" => t.reg_interval = num(e)?,
            "densify_grad_threshold" => t.densify_grad_threshold = num(e)?,
            "prune_opacity" => t.prune_opacity = num(e)?,
            "percent_dense" => t.percent_dense = num(e)?,
            "seed" => t.seed = num(e)?,
            "background" => t.background = triple(e)?,
            "tile_size" => t.tile_size = num(e)?,
            "adam_beta1" => t.adam_beta1 = num(e)?,
            "adam_beta2" => t.adam_beta2 = num(e)?,
            "adam_eps" => t.adam_eps = num(e)?,
            "lr_position_init" => t.lr.position_init = num(e)?,
            "lr_position_final" => t.lr.position_final = num(e)?,
            "lr_rotation" => t.lr.rotation = num(e)?,
            "lr_log_scale" => t.lr.log_scale = num(e)?,
            "lr_opacity" => t.lr.opacity = num(e)?,
            "lr_base_color" => t.lr.base_color = num(e)?,
            "lr_atten" => t.lr.atten = num(e)?,
            "lr_backsc" => t.lr.backsc = num(e)?,
            "lr_veil" => t.lr.veil = num(e)?,
            "lambda_ssim" => t.weights.lambda_ssim = num(e)?,
            "lambda_depth" => t.weights.lambda_depth = num(e)?,
            "lambda_spatial" => t.weights.lambda_spatial = num(e)?,
            "lambda_spectral" => t.weights.lambda_spectral = num(e)?,
            "lambda_exposure" => t.weights.lambda_exposure = num(e)?,
            "exposure_tau" => t.weights.tau = num(e)?,
            "smooth_radius" => t.weights.smooth_radius = num(e)?,
            "smooth_min_neighbors" => t.weights.smooth_min_neighbors = num(e)?,
            "spectral_delta" => t.weights.spectral_delta = num(e)?,
            _ => return Err(unknown(e)),
        }
        Ok(())
    }

    /// Canonical text form; loading it yields the same configuration.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let w = &t.weights;
        let p = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string());
        let tri = |v: [f64; 3]| format!("{:?} {:?} {:?}", v[0], v[1], v[2]);
        let mut lines: Vec<(String, String)> = Vec::new();
        for (k, v) in [
            ("scene", p(&self.scene)),
            ("output", p(&self.output)),
            ("checkpoint", p(&self.checkpoint)),
            ("renders", p(&self.renders)),
            ("references", p(&self.references)),
            ("charts", p(&self.charts)),
        ] {
            if let Some(v) = v {
                lines.push((k.into(), v));
            }
        }
        let branch = match self.branch {
            BranchChoice::Water => "water",
            BranchChoice::Clear => "clear",
            BranchChoice::Both => "both",
        };
        let views = match self.views {
            ViewChoice::All => "all",
            ViewChoice::Train => "train",
            ViewChoice::Test => "test",
        };
        let mut put = |k: &str, v: String| lines.push((k.into(), v));
        put("downscale", self.downscale.to_string());
        put("holdout_every", self.holdout_every.to_string());
        put("checkpoint_interval", self.checkpoint_interval.to_string());
        put("branch", branch.into());
        put("depth", self.depth.to_string());
        put("views", views.into());
        put("iterations", t.iterations.to_string());
        put("densify_interval", t.densify_interval.to_string());
        put("densify_until", format!("{:?}", t.densify_until));
        put("reg_interval", t.reg_interval.to_string());
        put("densify_grad_threshold", format!("{:?}", t.densify_grad_threshold));
        put("prune_opacity", format!("{:?}", t.prune_opacity));
        put("percent_dense", format!("{:?}", t.percent_dense));
        put("seed", t.seed.to_string());
        put("background", tri(t.background));
        put("tile_size", t.tile_size.to_string());
        put("adam_beta1", format!("{:?}", t.adam_beta1));
        put("adam_beta2", format!("{:?}", t.adam_beta2));
        put("adam_eps", format!("{:?}", t.adam_eps));
        put("lr_position_init", format!("{:?}", t.lr.position_init));
        put("lr_position_final", format!("{:?}", t.lr.position_final));
        put("lr_rotation", format!("{:?}", t.lr.rotation));
        put("lr_log_scale", format!("{:?}", t.lr.log_scale));
        put("lr_opacity", format!("{:?}", t.lr.opacity));
        put("lr_base_color", format!("{:?}", t.lr.base_color));
        put("lr_atten", format!("{:?}", t.lr.atten));
        put("lr_backsc", format!("{:?}", t.lr.backsc));
        put("lr_veil", format!("{:?}", t.lr.veil));
        put("lambda_ssim", format!("{:?}", w.lambda_ssim));
        put("lambda_depth", format!("{:?}", w.lambda_depth));
        put("lambda_spatial", format!("{:?}", w.lambda_spatial));
        put("lambda_spectral", format!("{:?}", w.lambda_spectral));
        put("lambda_exposure", format!("{:?}", w.lambda_exposure));
        put("exposure_tau", format!("{:?}", w.tau));
        put("smooth_radius", format!("{:?}", w.smooth_radius));
        put("smooth_min_neighbors", w.smooth_min_neighbors.to_string());
        put("spectral_delta", format!("{:?}", w.spectral_delta));
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Synthetic-scene description for `synth`.
///
/// `medium_split = true` plants `right_*` values for world `x >= 0` and the
/// plain values elsewhere.
pub fn load_synth_spec(path: Option<&Path>) -> Result<SynthSpec> {
    let entries = match path {
        Some(p) => read_entries(p).map_err(|err| match err {
            Error::Config(m) if !m.starts_with(&p.display().to_string()) => Error::Config(format!("{}: {m}", p.display())),
            other => other,
        })?,
        None => Vec::new(),
    };
    synth_spec_from_entries(&entries)
}

pub fn synth_spec_from_entries(entries: &[Entry]) -> Result<SynthSpec> {
    let mut spec = SynthSpec::default();
    let mut left = MediumValues::default();
    // Right-region values left unset fall back to the left region.
    let mut right: [Option<[f64; 3]>; 3] = [None; 3];
    let mut split = false;
    let mut background = None;
    let mut ring = CameraRing::default();
    for e in entries {
        match e.key.as_str() {
            "layout" => spec.layout = e.value.parse::<Layout>().map_err(|_| bad(e, "grid, random-box or textured-plane"))?,
            "gaussians" => spec.gaussians = num(e)?,
            "half_size" => spec.half_size = num(e)?,
            "beta_d" => left.beta_d = triple(e)?,
            "beta_b" => left.beta_b = triple(e)?,
            "veil" => left.veil = triple(e)?,
            "medium_split" => split = flag(e)?,
            "right_beta_d" => right[0] = Some(triple(e)?),
            "right_beta_b" => right[1] = Some(triple(e)?),
            "right_veil" => right[2] = Some(triple(e)?),
            "cameras" => ring.count = num(e)?,
            "ring_radius" => ring.radius = num(e)?,
            "ring_height" => ring.height = num(e)?,
            "look_at" => ring.look_at = triple(e)?,
            "fov_degrees" => ring.fov_degrees = num(e)?,
            "width" => spec.width = num(e)?,
            "height" => spec.height = num(e)?,
            "noise_sigma" => spec.noise_sigma = num(e)?,
            "seed" => spec.seed = num(e)?,
            "holdout_every" => spec.holdout_every = num(e)?,
            "require_ordering" => spec.require_ordering = flag(e)?,
            "point_jitter" => spec.point_jitter = num(e)?,
            "background" => background = Some(triple(e)?),
            _ => return Err(unknown(e)),
        }
    }
    spec.ring = ring;
    // Empty lines of sight show the (left) veil unless told otherwise.
    spec.background = background.unwrap_or(left.veil);
    spec.medium = if split {
        PlantedMedium::SplitX {
            left,
            right: MediumValues {
                beta_d: right[0].unwrap_or(left.beta_d),
                beta_b: right[1].unwrap_or(left.beta_b),
                veil: right[2].unwrap_or(left.veil),
            },
        }
    } else {
        PlantedMedium::Constant(left)
    };
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(text: &str) -> Result<Vec<Entry>> {
        parse_entries(text, Path::new("test.cfg"))
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let e = entries("# header\n\niterations = 10  # trailing\n").unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!((e[0].key.as_str(), e[0].value.as_str(), e[0].line), ("iterations", "10", 3));
    }

    #[test]
    fn unknown_key_is_named() {
        let e = entries("iterations = 5\nlearning_rate = 3\n").unwrap();
        let err = RunConfig::from_entries(&e).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn duplicate_and_malformed_lines_are_rejected() {
        assert!(entries("seed = 1\nseed = 2\n").is_err());
        assert!(entries("seed 1\n").is_err());
        let e = entries("seed = many\n").unwrap();
        assert!(RunConfig::from_entries(&e).is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut c = RunConfig::from_entries(&entries("lr_atten = 0.01\nbranch = clear\nbackground = 0.1 0.2 0.3\n").unwrap()).unwrap();
        c.scene = Some(PathBuf::from("/tmp/scene"));
        let back = RunConfig::from_entries(&entries(&c.to_text()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn synth_keys() {
        let s = synth_spec_from_entries(&entries("gaussians = 10\nlayout = grid\ncameras = 4\n").unwrap()).unwrap();
        assert_eq!((s.gaussians, s.layout, s.ring.count), (10, Layout::Grid, 4));
        assert_eq!(s.background, MediumValues::default().veil);
        let s = synth_spec_from_entries(&entries("medium_split = true\nright_veil = 0.2 0.3 0.4\nbeta_d = 0.5 0.2 0.1\n").unwrap()).unwrap();
        match s.medium {
            PlantedMedium::SplitX { left, right } => {
                assert_eq!(right.beta_d, [0.5, 0.2, 0.1]);
                assert_eq!(right.veil, [0.2, 0.3, 0.4]);
                assert_eq!(left.veil, MediumValues::default().veil);
            }
            _ => panic!("expected a split medium"),
        }
        assert!(synth_spec_from_entries(&entries("colour = red\n").unwrap()).is_err());
        let misordered = entries("beta_d = 0.05 0.15 0.4\n").unwrap();
        assert!(synth_spec_from_entries(&misordered).is_err());
    }

    #[test]
    fn shipped_recovery_config_matches_the_library_preset() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/recovery.cfg");
        let cfg = RunConfig::load(&path).unwrap();
        let preset = aquasplat::synth::recovery_train_config(&SynthSpec::default());
        assert_eq!(cfg.train, preset);
    }
}
