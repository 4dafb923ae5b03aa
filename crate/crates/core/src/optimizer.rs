//! Training loop: per-group Adam, the regularizer schedule, adaptive
//! densification, and checkpoint metadata.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::diff::{self, RenderSettings, Supervision};
use crate::error::{Error, Result};
use crate::losses::{LossReport, LossWeights};
use crate::metrics;
use crate::raster::DEFAULT_TILE_SIZE;
use crate::scene::{logit, quat_to_matrix, Gaussian, GaussianCloud, ParamGroup, SceneBundle};

/// Scale divisor applied to both children of a split.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;
/// Scale assigned to a point without neighbors.
pub const FALLBACK_SCALE: f64 = 0.01;
/// Raw value of the attenuation and backscatter coefficients at initialization.
pub const INITIAL_MEDIUM_RAW: f64 = -4.0;
pub const INITIAL_OPACITY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct LearningRates {
    /// Start of the exponential decay; multiplied by the scene extent.
    pub position_init: f64,
    /// End of the exponential decay; multiplied by the scene extent.
    pub position_final: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub base_color: f64,
    pub atten: f64,
    pub backsc: f64,
    pub veil: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 1e-3,
            log_scale: 5e-3,
            opacity: 5e-2,
            base_color: 2.5e-3,
            atten: 1e-4,
            backsc: 1e-4,
            veil: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub densify_interval: usize,
    /// Densification runs while `iteration < densify_until * iterations`.
    pub densify_until: f64,
    pub reg_interval: usize,
    pub lr: LearningRates,
    pub weights: LossWeights,
    pub densify_grad_threshold: f64,
    pub prune_opacity: f64,
    /// Fraction of the scene extent separating clone (small) from split (large).
    pub percent_dense: f64,
    pub seed: u64,
    pub background: [f64; 3],
    pub tile_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 15_000,
            densify_interval: 500,
            densify_until: 0.5,
            reg_interval: 10,
            lr: LearningRates::default(),
            weights: LossWeights::default(),
            densify_grad_threshold: 2e-4,
            prune_opacity: 5e-3,
            percent_dense: 0.01,
            seed: 0,
            background: [0.0; 3],
            tile_size: DEFAULT_TILE_SIZE,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = &self.lr;
        let rates = [
            ("lr_position_init", lr.position_init),
            ("lr_position_final", lr.position_final),
            ("lr_rotation", lr.rotation),
            ("lr_log_scale", lr.log_scale),
            ("lr_opacity", lr.opacity),
            ("lr_base_color", lr.base_color),
            ("lr_atten", lr.atten),
            ("lr_backsc", lr.backsc),
            ("lr_veil", lr.veil),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.densify_interval == 0 || self.reg_interval == 0 {
            return Err(Error::Config("densify_interval and reg_interval must be at least 1".into()));
        }
        if self.tile_size == 0 {
            return Err(Error::Config("tile_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical textual form of the configuration.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(format!("{self:?}").as_bytes()).into()
    }

    fn group_lr(&self, g: ParamGroup, iteration: usize, extent: f64) -> f64 {
        let lr = &self.lr;
        match g {
            ParamGroup::Positions => {
                let t = if self.iterations == 0 {
                    1.0
                } else {
                    (iteration as f64 / self.iterations as f64).clamp(0.0, 1.0)
                };
                let log = lr.position_init.ln() * (1.0 - t) + lr.position_final.ln() * t;
                log.exp() * extent
            }
            ParamGroup::Rotations => lr.rotation,
            ParamGroup::LogScales => lr.log_scale,
            ParamGroup::OpacityLogits => lr.opacity,
            ParamGroup::BaseColors => lr.base_color,
            ParamGroup::AttenRaw => lr.atten,
            ParamGroup::BacksRaw => lr.backsc,
            ParamGroup::VeilRaw => lr.veil,
        }
    }
}

/// First and second moment estimates of one parameter group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam state for every parameter group; moments mirror the flattened group layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub groups: Vec<Moments>,
}

impl AdamState {
    pub fn new(cloud: &GaussianCloud) -> Self {
        Self {
            step: 0,
            groups: ParamGroup::ALL
                .iter()
                .map(|&g| {
                    let n = cloud.group(g).len();
                    Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    }
                })
                .collect(),
        }
    }

    /// One Adam step over every group with learning rate `lr(group)`.
    pub fn update(
        &mut self,
        cloud: &mut GaussianCloud,
        grad: &GaussianCloud,
        beta1: f64,
        beta2: f64,
        eps: f64,
        lr: impl Fn(ParamGroup) -> f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (gi, &group) in ParamGroup::ALL.iter().enumerate() {
            let rate = lr(group);
            let mom = &mut self.groups[gi];
            let params = cloud.group_mut(group);
            let g = grad.group(group);
            for k in 0..params.len() {
                mom.m[k] = beta1 * mom.m[k] + (1.0 - beta1) * g[k];
                mom.v[k] = beta2 * mom.v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = mom.m[k] / bc1;
                let v_hat = mom.v[k] / bc2;
                params[k] -= rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Reorders moments after densification: `source[i]` is the old index of
    /// new primitive `i`, or `None` for a freshly created one (zero moments).
    fn remap(&mut self, source: &[Option<usize>]) {
        for (gi, &group) in ParamGroup::ALL.iter().enumerate() {
            let w = group.width();
            let old = std::mem::take(&mut self.groups[gi]);
            let mut m = vec![0.0; source.len() * w];
            let mut v = vec![0.0; source.len() * w];
            for (i, s) in source.iter().enumerate() {
                if let Some(j) = s {
                    m[i * w..(i + 1) * w].copy_from_slice(&old.m[j * w..(j + 1) * w]);
                    v[i * w..(i + 1) * w].copy_from_slice(&old.v[j * w..(j + 1) * w]);
                }
            }
            self.groups[gi] = Moments { m, v };
        }
    }
}

/// One Gaussian per point: isotropic scale from the mean distance to the 3
/// nearest neighbors, opacity 0.1, near-clear medium, veil set to `veil_init`.
pub fn init_from_points(points: &[([f64; 3], [f64; 3])], veil_init: [f64; 3]) -> Result<GaussianCloud> {
    if points.is_empty() {
        return Err(Error::Argument("cannot initialize from an empty point list".into()));
    }
    let scales: Vec<f64> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let p = Vector3::from(points[i].0);
            let mut best = [f64::INFINITY; 3];
            for (j, q) in points.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d = (Vector3::from(q.0) - p).norm();
                if d < best[2] {
                    best[2] = d;
                    best.sort_by(f64::total_cmp);
                }
            }
            let found: Vec<f64> = best.into_iter().filter(|d| d.is_finite()).collect();
            if found.is_empty() {
                FALLBACK_SCALE
            } else {
                (found.iter().sum::<f64>() / found.len() as f64).max(1e-7)
            }
        })
        .collect();
    let veil = veil_init.map(|v| logit(v.clamp(1e-4, 1.0 - 1e-4)));
    let mut cloud = GaussianCloud::new();
    for ((pos, rgb), s) in points.iter().zip(scales) {
        cloud.push(Gaussian {
            position: *pos,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [s.ln(); 3],
            opacity_logit: logit(INITIAL_OPACITY),
            base_color: rgb.map(|c| c.clamp(0.0, 1.0)),
            atten_raw: [INITIAL_MEDIUM_RAW; 3],
            backsc_raw: [INITIAL_MEDIUM_RAW; 3],
            veil_raw: veil,
        });
    }
    Ok(cloud)
}

/// Per-channel mean over every pixel of the given images.
pub fn mean_color<'a>(images: impl IntoIterator<Item = &'a crate::scene::Image>) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for img in images {
        for px in img.data.chunks_exact(3) {
            for k in 0..3 {
                sum[k] += px[k];
            }
        }
        n += img.data.len() / 3;
    }
    if n == 0 {
        return [0.5; 3];
    }
    sum.map(|s| s / n as f64)
}

/// Screen-space gradient statistics driving densification.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_norm_sum: Vec<f64>,
    pub visible_count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_norm_sum: vec![0.0; n],
            visible_count: vec![0; n],
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        match self.visible_count[i] {
            0 => 0.0,
            c => self.grad_norm_sum[i] / c as f64,
        }
    }
}

/// Result of one densification pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DensifySummary {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones small and splits large primitives whose mean screen gradient
/// exceeds the threshold, then prunes near-transparent ones.
///
/// Children inherit medium parameters verbatim and start with zero Adam moments.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    adam: &mut AdamState,
    stats: &mut DensifyStats,
    config: &TrainConfig,
    extent: f64,
    rng: &mut ChaCha8Rng,
) -> DensifySummary {
    let n = cloud.count();
    let mut summary = DensifySummary::default();
    let mut out = GaussianCloud::new();
    let mut source: Vec<Option<usize>> = Vec::new();
    let mut clones = Vec::new();
    let mut splits = Vec::new();
    for i in 0..n {
        let over = stats.mean(i) > config.densify_grad_threshold;
        let max_scale = cloud.scale(i).max();
        if over && max_scale <= config.percent_dense * extent {
            clones.push(i);
        } else if over {
            splits.push(i);
            continue;
        }
        out.push(cloud.get(i));
        source.push(Some(i));
    }
    for &i in &clones {
        out.push(cloud.get(i));
        source.push(None);
        summary.cloned += 1;
    }
    for &i in &splits {
        let g = cloud.get(i);
        let rot = quat_to_matrix(g.rotation).unwrap_or_else(nalgebra::Matrix3::identity);
        let s = cloud.scale(i);
        for _ in 0..2 {
            let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
            let offset = rot * s.component_mul(&z);
            let mut child = g;
            child.position = [g.position[0] + offset.x, g.position[1] + offset.y, g.position[2] + offset.z];
            child.log_scale = g.log_scale.map(|l| l - SPLIT_SCALE_DIVISOR.ln());
            out.push(child);
            source.push(None);
        }
        summary.split += 1;
    }
    let keep: Vec<bool> = (0..out.count()).map(|i| out.opacity(i) >= config.prune_opacity).collect();
    summary.pruned = keep.iter().filter(|k| !**k).count();
    out.retain_mask(&keep);
    let mut it = keep.iter();
    source.retain(|_| *it.next().unwrap());

    adam.remap(&source);
    *cloud = out;
    *stats = DensifyStats::new(cloud.count());
    summary
}

/// What one training step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub iteration: usize,
    pub view: usize,
    pub report: LossReport,
    /// Water-branch PSNR of the view before the update.
    pub psnr: f64,
    pub gaussians: usize,
    pub densified: Option<DensifySummary>,
}

/// Owns the optimization state for one scene.
pub struct Trainer<'a> {
    scene: &'a SceneBundle,
    config: TrainConfig,
    cloud: GaussianCloud,
    adam: AdamState,
    stats: DensifyStats,
    iteration: usize,
    extent: f64,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> Trainer<'a> {
    /// Initializes from the scene's sparse points.
    pub fn new(scene: &'a SceneBundle, config: TrainConfig) -> Result<Self> {
        let veil = mean_color(scene.split.train.iter().map(|&i| &scene.images[i]));
        let cloud = init_from_points(&scene.init_points, veil)?;
        Self::with_cloud(scene, config, cloud)
    }

    pub fn with_cloud(scene: &'a SceneBundle, config: TrainConfig, cloud: GaussianCloud) -> Result<Self> {
        config.validate()?;
        scene.validate()?;
        cloud.validate()?;
        if scene.split.train.is_empty() {
            return Err(Error::Argument("scene has no training views".into()));
        }
        if let Some(&bad) = scene.split.train.iter().find(|&&i| i >= scene.cameras.len()) {
            return Err(Error::Argument(format!("training view {bad} is out of range")));
        }
        let adam = AdamState::new(&cloud);
        let stats = DensifyStats::new(cloud.count());
        Ok(Self {
            scene,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            extent: scene.camera_extent(),
            config,
            cloud,
            adam,
            stats,
            iteration: 0,
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn cloud(&self) -> &GaussianCloud {
        &self.cloud
    }

    pub fn into_cloud(self) -> GaussianCloud {
        self.cloud
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn settings(&self) -> RenderSettings {
        RenderSettings {
            background: self.config.background,
            tile_size: self.config.tile_size,
        }
    }

    fn next_view(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order = self.scene.split.train.clone();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let v = self.order[self.cursor];
        self.cursor += 1;
        v
    }

    /// Advances one iteration on the next view of the seeded schedule.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let view = self.next_view();
        self.step_on(view)
    }

    /// Advances one iteration on a specific view.
    pub fn step_on(&mut self, view: usize) -> Result<StepOutcome> {
        if view >= self.scene.cameras.len() {
            return Err(Error::Argument(format!("view {view} is out of range")));
        }
        let iteration = self.iteration + 1;
        let camera = &self.scene.cameras[view];
        let sup = Supervision {
            target: &self.scene.images[view],
            pseudo_depth: self.scene.pseudo_depths.get(view),
        };
        let regularize = iteration % self.config.reg_interval == 0;
        let settings = self.settings();
        let eval = diff::evaluate(&self.cloud, camera, sup, &self.config.weights, &settings, regularize)?;
        let psnr = metrics::psnr(&eval.render.water.color, sup.target)?;

        let (half_w, half_h) = (camera.width as f64 / 2.0, camera.height as f64 / 2.0);
        for (s, g) in eval.render.water_splats.iter().zip(&eval.splat_grads) {
            if s.pixel_bounds(camera.width, camera.height).is_some() {
                let gx = g.mean2d[0] * half_w;
                let gy = g.mean2d[1] * half_h;
                self.stats.grad_norm_sum[s.gaussian_id] += (gx * gx + gy * gy).sqrt();
                self.stats.visible_count[s.gaussian_id] += 1;
            }
        }

        let cfg = &self.config;
        let extent = self.extent;
        self.adam.update(
            &mut self.cloud,
            &eval.gradients.grad,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
            |g| cfg.group_lr(g, iteration, extent),
        );
        for c in self.cloud.base_colors.iter_mut().flatten() {
            *c = c.clamp(0.0, 1.0);
        }
        self.iteration = iteration;

        let densify_window = (iteration as f64) < self.config.densify_until * self.config.iterations as f64;
        let densified = if iteration % self.config.densify_interval == 0 && densify_window {
            Some(densify_and_prune(
                &mut self.cloud,
                &mut self.adam,
                &mut self.stats,
                &self.config,
                self.extent,
                &mut self.rng,
            ))
        } else {
            None
        };

        Ok(StepOutcome {
            iteration,
            view,
            report: eval.report,
            psnr,
            gaussians: self.cloud.count(),
            densified,
        })
    }

    /// Runs the remaining iterations, handing every outcome to `observe`.
    pub fn run(&mut self, mut observe: impl FnMut(&Trainer<'_>, &StepOutcome) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.iterations {
            let out = self.step()?;
            observe(self, &out)?;
        }
        Ok(())
    }
}

/// Header line of the loss log.
pub const LOSS_LOG_HEADER: &str = "iteration\tview\tw_l2\tw_dssim\tdepth_pcc\texposure\tspatial\tspectral\ttotal\tpsnr\tgaussians";

/// One tab-separated loss-log line; terms not evaluated are written as `-`.
pub fn loss_log_line(o: &StepOutcome) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.9e}"));
    let r = &o.report;
    format!(
        "{}\t{}\t{:.9e}\t{:.9e}\t{}\t{:.9e}\t{}\t{}\t{:.9e}\t{:.6}\t{}",
        o.iteration,
        o.view,
        r.w_l2,
        r.w_dssim,
        opt(r.depth_pcc),
        r.exposure,
        opt(r.spatial),
        opt(r.spectral),
        r.total,
        o.psnr,
        o.gaussians
    )
}

const SIDECAR_MAGIC: &[u8; 8] = b"AQSPLCKP";
const SIDECAR_VERSION: u32 = 1;

/// Checkpoint metadata stored next to the PLY.
///
/// Layout (little-endian): magic `AQSPLCKP`, u32 version, u64 iteration,
/// 32-byte config hash, u64 Adam step, u64 primitive count, then for each of
/// the 8 parameter groups in PLY attribute order the first moments followed by
/// the second moments as f64.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub config_hash: [u8; 32],
    pub adam: AdamState,
    pub count: u64,
}

impl CheckpointMeta {
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(SIDECAR_MAGIC)?;
        w.write_u32::<LittleEndian>(SIDECAR_VERSION)?;
        w.write_u64::<LittleEndian>(self.iteration)?;
        w.write_all(&self.config_hash)?;
        w.write_u64::<LittleEndian>(self.adam.step)?;
        w.write_u64::<LittleEndian>(self.count)?;
        for g in &self.adam.groups {
            for v in g.m.iter().chain(&g.v) {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> std::result::Result<Self, String> {
        let io = |e: std::io::Error| e.to_string();
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != SIDECAR_MAGIC {
            return Err("not a checkpoint sidecar (bad magic)".into());
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != SIDECAR_VERSION {
            return Err(format!("unsupported sidecar version {version}"));
        }
        let iteration = r.read_u64::<LittleEndian>().map_err(io)?;
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash).map_err(io)?;
        let step = r.read_u64::<LittleEndian>().map_err(io)?;
        let count = r.read_u64::<LittleEndian>().map_err(io)?;
        let mut groups = Vec::with_capacity(8);
        for g in ParamGroup::ALL {
            let len = count as usize * g.width();
            let mut read = |n: usize| -> std::result::Result<Vec<f64>, String> {
                (0..n).map(|_| r.read_f64::<LittleEndian>().map_err(io)).collect()
            };
            let m = read(len)?;
            let v = read(len)?;
            groups.push(Moments { m, v });
        }
        Ok(Self {
            iteration,
            config_hash,
            adam: AdamState { step, groups },
            count,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f)).map_err(|m| Error::parse(path, 0, m))
    }
}

impl Trainer<'_> {
    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            iteration: self.iteration as u64,
            config_hash: self.config.hash(),
            adam: self.adam.clone(),
            count: self.cloud.count() as u64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{softplus, Camera, Image, Split};
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    fn base_gaussian() -> Gaussian {
        Gaussian {
            position: [0.0, 0.0, 3.0],
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [-1.0; 3],
            opacity_logit: 0.0,
            base_color: [0.5; 3],
            atten_raw: [-2.0, -3.0, -4.0],
            backsc_raw: [-4.0; 3],
            veil_raw: [0.1, 0.2, 0.3],
        }
    }

    #[test]
    fn init_examples() {
        let c = init_from_points(&[([0.0; 3], [0.2, 0.4, 0.6])], [0.5; 3]).unwrap();
        assert_eq!(c.count(), 1);
        assert_relative_eq!(c.log_scales[0][0], FALLBACK_SCALE.ln(), epsilon = 1e-15);
        assert_relative_eq!(softplus(c.atten_raw[0][0]), 0.01814992791780978, epsilon = 1e-12);
        assert_relative_eq!(c.opacity(0), 0.1, epsilon = 1e-12);

        let mut grid = Vec::new();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    grid.push(([x as f64 * 0.5, y as f64 * 0.5, z as f64 * 0.5], [0.5; 3]));
                }
            }
        }
        let c = init_from_points(&grid, [0.5; 3]).unwrap();
        for s in &c.log_scales {
            assert_relative_eq!(s[0], 0.5f64.ln(), epsilon = 1e-12);
        }
        assert!(init_from_points(&[], [0.5; 3]).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut c = GaussianCloud::new();
        c.push(base_gaussian());
        let before = c.clone();
        let mut adam = AdamState::new(&c);
        adam.update(&mut c, &GaussianCloud::zeros(1), 0.9, 0.999, 1e-15, |_| 0.1);
        assert_eq!(c, before);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut c = GaussianCloud::new();
        c.push(base_gaussian());
        let mut g = GaussianCloud::zeros(1);
        g.opacity_logits[0] = 3.7;
        let mut adam = AdamState::new(&c);
        adam.update(&mut c, &g, 0.9, 0.999, 1e-15, |_| 0.05);
        assert_relative_eq!(c.opacity_logits[0], -0.05, epsilon = 1e-12);
    }

    #[test]
    fn densify_bookkeeping() {
        let config = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = GaussianCloud::new();
        for i in 0..6 {
            let mut g = base_gaussian();
            g.position[0] = i as f64;
            c.push(g);
        }
        // Untouched: nothing over threshold.
        let mut adam = AdamState::new(&c);
        let mut stats = DensifyStats::new(6);
        let before = c.clone();
        let s = densify_and_prune(&mut c, &mut adam, &mut stats, &config, 10.0, &mut rng);
        assert_eq!(s, DensifySummary::default());
        assert_eq!(c, before);

        // Three large primitives over threshold are split: +3 net.
        let mut stats = DensifyStats::new(6);
        for i in [0, 2, 4] {
            stats.grad_norm_sum[i] = 1.0;
            stats.visible_count[i] = 2;
        }
        let s = densify_and_prune(&mut c, &mut adam, &mut stats, &config, 10.0, &mut rng);
        assert_eq!(s.split, 3);
        assert_eq!(c.count(), 9);
        c.validate().unwrap();
        assert!(c.atten_raw.iter().all(|a| *a == [-2.0, -3.0, -4.0]));
        assert_eq!(stats.visible_count, vec![0; 9]);
        assert_eq!(adam.groups[0].m.len(), 27);

        // Small primitive over threshold is cloned; opacity logit -10 is pruned.
        let mut c = GaussianCloud::new();
        let mut small = base_gaussian();
        small.log_scale = [-6.0; 3];
        c.push(small);
        let mut faint = base_gaussian();
        faint.opacity_logit = -10.0;
        c.push(faint);
        let mut adam = AdamState::new(&c);
        let mut stats = DensifyStats::new(2);
        stats.grad_norm_sum[0] = 1.0;
        stats.visible_count[0] = 1;
        let s = densify_and_prune(&mut c, &mut adam, &mut stats, &config, 10.0, &mut rng);
        assert_eq!((s.cloned, s.split, s.pruned), (1, 0, 1));
        assert_eq!(c.count(), 2);
        assert_eq!(c.log_scales, vec![[-6.0; 3]; 2]);
    }

    fn toy_scene() -> (SceneBundle, GaussianCloud) {
        let cam = Camera::new(16, 16, 20.0, 20.0, 8.0, 8.0, Matrix3::identity(), nalgebra::Vector3::zeros()).unwrap();
        let mut truth = GaussianCloud::new();
        let mut g = base_gaussian();
        g.base_color = [0.8, 0.3, 0.2];
        truth.push(g);
        let img = crate::optics::render_branch(&truth, &cam, crate::optics::Branch::Water, [0.0; 3], 16)
            .unwrap()
            .color;
        let scene = SceneBundle {
            cameras: vec![cam],
            images: vec![img],
            names: vec!["toy.png".into()],
            pseudo_depths: Vec::new(),
            init_points: vec![([0.0, 0.0, 3.0], [0.5; 3])],
            split: Split::every_kth(1, 0),
        };
        let mut start = truth.clone();
        start.base_colors[0] = [0.4, 0.6, 0.5];
        (scene, start)
    }

    #[test]
    fn regularizers_follow_the_schedule() {
        let (scene, start) = toy_scene();
        let config = TrainConfig {
            iterations: 30,
            ..TrainConfig::default()
        };
        let mut t = Trainer::with_cloud(&scene, config, start).unwrap();
        for _ in 0..30 {
            let o = t.step().unwrap();
            let on = o.iteration % 10 == 0;
            assert_eq!(o.report.spatial.is_some(), on);
            assert_eq!(o.report.spectral.is_some(), on);
        }
    }

    #[test]
    fn photometric_toy_fit_converges() {
        let (scene, start) = toy_scene();
        let config = TrainConfig {
            iterations: 100,
            weights: LossWeights::photometric_only(0.2),
            // Every group but the base colors is effectively frozen, leaving a color fit.
            lr: LearningRates {
                position_init: 1e-12,
                position_final: 1e-12,
                rotation: 1e-12,
                log_scale: 1e-12,
                opacity: 1e-12,
                base_color: 5e-3,
                atten: 1e-12,
                backsc: 1e-12,
                veil: 1e-12,
            },
            ..TrainConfig::default()
        };
        let mut t = Trainer::with_cloud(&scene, config, start).unwrap();
        let mut losses = Vec::new();
        t.run(|_, o| {
            losses.push(o.report.total);
            Ok(())
        })
        .unwrap();
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "loss increased: {} -> {}", w[0], w[1]);
        }
        assert!(losses[99] < 0.1 * losses[0], "{} vs {}", losses[99], losses[0]);
    }

    #[test]
    fn sidecar_round_trip() {
        let (scene, start) = toy_scene();
        let mut t = Trainer::with_cloud(&scene, TrainConfig::default(), start).unwrap();
        t.step().unwrap();
        let meta = t.checkpoint_meta();
        let mut buf = Vec::new();
        meta.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"AQSPLCKP");
        let back = CheckpointMeta::read_from(&buf[..]).unwrap();
        assert_eq!(back, meta);
        assert!(CheckpointMeta::read_from(&buf[..20]).is_err());
    }

    #[test]
    fn config_validation_and_hash() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        let h = c.hash();
        c.seed = 1;
        assert_ne!(c.hash(), h);
        c.reg_interval = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn mean_color_of_images() {
        let imgs = [Image::filled(2, 2, [0.2, 0.4, 0.6]), Image::filled(2, 2, [0.4, 0.4, 0.4])];
        let m = mean_color(imgs.iter());
        assert_relative_eq!(m[0], 0.3, epsilon = 1e-15);
        assert_relative_eq!(m[2], 0.5, epsilon = 1e-15);
    }
}
