//! Underwater image formation and per-primitive color modulation.
//!
//! Each primitive's color is attenuated and veiled according to its own medium
//! coefficients and its camera-frame depth before blending:
//!
//! ```text
//! c_u = exp(-beta_d d) * c_o + (1 - exp(-beta_b d)) * veil
//! ```
//!
//! The water branch blends `c_u`; the clear branch blends `c_o`. Both share
//! projection, ordering and opacities, so they differ only in splat colors.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::raster::{self, Projected2D, RenderOutput, SplatGrad};
use crate::scene::{camera_distance, Camera, GaussianCloud, Rgb};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Water,
    Clear,
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "water" => Ok(Branch::Water),
            "clear" => Ok(Branch::Clear),
            other => Err(Error::Argument(format!("unknown branch `{other}` (expected water or clear)"))),
        }
    }
}

/// Transmittances and veiling light seen by one primitive from one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MediumSample {
    pub direct: Rgb,
    pub backscatter: Rgb,
    pub veil: Rgb,
}

impl MediumSample {
    pub fn at(beta_d: &Rgb, beta_b: &Rgb, veil: &Rgb, distance: f64) -> Self {
        Self {
            direct: beta_d.map(|b| (-b * distance).exp()),
            backscatter: beta_b.map(|b| (-b * distance).exp()),
            veil: *veil,
        }
    }

    pub fn apply(&self, color: &Rgb) -> Rgb {
        self.direct.component_mul(color) + (Vector3::repeat(1.0) - self.backscatter).component_mul(&self.veil)
    }
}

/// Radiance `radiance` observed through `z` units of water.
pub fn formation_model(radiance: Rgb, z: f64, beta_d: Rgb, beta_b: Rgb, veil_inf: Rgb) -> Result<Rgb> {
    if !(z >= 0.0) {
        return Err(Error::Argument(format!("distance must be nonnegative, got {z}")));
    }
    Ok(MediumSample::at(&beta_d, &beta_b, &veil_inf, z).apply(&radiance))
}

/// Color primitive `index` contributes to the chosen branch.
pub fn resolve_color(cloud: &GaussianCloud, index: usize, camera: &Camera, branch: Branch) -> Result<Rgb> {
    if index >= cloud.count() {
        return Err(Error::Argument(format!(
            "gaussian index {index} out of range for cloud of {}",
            cloud.count()
        )));
    }
    let base = cloud.base_color(index);
    match branch {
        Branch::Clear => Ok(base),
        Branch::Water => {
            let d = camera_distance(&cloud.position(index), camera);
            if d <= 0.0 {
                return Err(Error::ContractViolation(format!(
                    "gaussian {index} sits at nonpositive distance {d}; it must be culled before shading"
                )));
            }
            Ok(water_color(cloud, index, d))
        }
    }
}

#[inline]
fn water_color(cloud: &GaussianCloud, index: usize, d: f64) -> Rgb {
    let m = cloud.medium_unchecked(index);
    MediumSample::at(&m.beta_d, &m.beta_b, &m.veil, d).apply(&cloud.base_color(index))
}

/// Accumulates the gradient of a water-branch color into base color and medium
/// raw parameters; returns `dL/d(distance)`.
fn water_color_backward(cloud: &GaussianCloud, index: usize, d: f64, g: &[f64; 3], grad: &mut GaussianCloud) -> f64 {
    let base = cloud.base_colors[index];
    let mut d_dist = 0.0;
    for k in 0..3 {
        let a = cloud.atten_raw[index][k];
        let b = cloud.backsc_raw[index][k];
        let v = cloud.veil_raw[index][k];
        let beta_d = crate::scene::softplus(a);
        let beta_b = crate::scene::softplus(b);
        let veil = crate::scene::sigmoid(v);
        let td = (-beta_d * d).exp();
        let tb = (-beta_b * d).exp();

        grad.base_colors[index][k] += g[k] * td;
        // d softplus / dx = sigmoid(x)
        grad.atten_raw[index][k] += g[k] * (-d * td * base[k]) * crate::scene::sigmoid(a);
        grad.backsc_raw[index][k] += g[k] * (d * tb * veil) * crate::scene::sigmoid(b);
        grad.veil_raw[index][k] += g[k] * (1.0 - tb) * veil * (1.0 - veil);
        d_dist += g[k] * (-beta_d * td * base[k] + beta_b * tb * veil);
    }
    d_dist
}

/// Both branch renders of one camera plus the splat lists they were blended from.
#[derive(Debug, Clone)]
pub struct DualRender {
    pub water_splats: Vec<Projected2D>,
    pub clear_splats: Vec<Projected2D>,
    pub water: RenderOutput,
    pub clear: RenderOutput,
}

pub fn render_dual(cloud: &GaussianCloud, camera: &Camera, background: [f64; 3], tile_size: usize) -> Result<DualRender> {
    let clear_splats = raster::project(cloud, camera)?;
    let mut water_splats = clear_splats.clone();
    for s in &mut water_splats {
        s.color = water_color(cloud, s.gaussian_id, s.depth).into();
    }
    let water = raster::blend(&water_splats, camera, background, tile_size)?;
    let clear = raster::blend(&clear_splats, camera, background, tile_size)?;
    Ok(DualRender {
        water_splats,
        clear_splats,
        water,
        clear,
    })
}

/// Renders a single branch.
pub fn render_branch(
    cloud: &GaussianCloud,
    camera: &Camera,
    branch: Branch,
    background: [f64; 3],
    tile_size: usize,
) -> Result<RenderOutput> {
    let mut splats = raster::project(cloud, camera)?;
    if branch == Branch::Water {
        for s in &mut splats {
            s.color = water_color(cloud, s.gaussian_id, s.depth).into();
        }
    }
    raster::blend(&splats, camera, background, tile_size)
}

/// [`render_branch`] without the backward record: identical images, less work.
pub fn render_image(
    cloud: &GaussianCloud,
    camera: &Camera,
    branch: Branch,
    background: [f64; 3],
    tile_size: usize,
) -> Result<raster::Composite> {
    let mut splats = raster::project(cloud, camera)?;
    if branch == Branch::Water {
        for s in &mut splats {
            s.color = water_color(cloud, s.gaussian_id, s.depth).into();
        }
    }
    raster::composite(&splats, camera, background, tile_size)
}

/// Upstream gradients for one branch image: color (`H*W*3`) and depth (`H*W`).
pub struct BranchUpstream<'a> {
    pub color: &'a [f64],
    pub depth: &'a [f64],
}

/// Backpropagates both branches into `grad`; returns the combined per-splat
/// screen-space gradients (indexed like `dual.water_splats`).
pub fn render_dual_backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    dual: &DualRender,
    water: BranchUpstream<'_>,
    clear: BranchUpstream<'_>,
    grad: &mut GaussianCloud,
) -> Result<Vec<SplatGrad>> {
    let mut wg = raster::blend_backward(&dual.water, &dual.water_splats, water.color, water.depth)?;
    let cg = raster::blend_backward(&dual.clear, &dual.clear_splats, clear.color, clear.depth)?;

    for ((s, w), c) in dual.water_splats.iter().zip(wg.iter_mut()).zip(&cg) {
        let i = s.gaussian_id;
        w.depth += water_color_backward(cloud, i, s.depth, &w.color, grad);
        for k in 0..3 {
            grad.base_colors[i][k] += c.color[k];
        }
        w.opacity += c.opacity;
        w.opacity_logit += c.opacity_logit;
        w.depth += c.depth;
        for k in 0..2 {
            w.mean2d[k] += c.mean2d[k];
        }
        for k in 0..3 {
            w.conic[k] += c.conic[k];
            w.cov2d[k] += c.cov2d[k];
        }
    }
    raster::project_backward(cloud, camera, &dual.water_splats, &wg, grad)?;
    Ok(wg)
}
