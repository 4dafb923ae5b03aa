//! Loss evaluation and analytic gradients through both render branches, plus a
//! central-difference oracle for checking them.

use crate::error::{Error, Result};
use crate::losses::{self, LossReport, LossWeights, Neighborhoods};
use crate::optics::{self, BranchUpstream, DualRender};
use crate::raster::{SplatGrad, DEFAULT_TILE_SIZE};
use crate::scene::{Camera, GaussianCloud, Image, ParamGroup, ScalarMap};

/// Alpha above which a pixel takes part in the depth correlation.
pub const DEPTH_MASK_ALPHA: f64 = 0.5;

/// Per-parameter gradients (stored in a cloud-shaped container) and the loss they belong to.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub grad: GaussianCloud,
    pub loss: f64,
}

impl GradientBundle {
    pub fn zeros(n: usize) -> Self {
        Self {
            grad: GaussianCloud::zeros(n),
            loss: 0.0,
        }
    }

    pub fn group(&self, g: ParamGroup) -> &[f64] {
        self.grad.group(g)
    }

    /// The first group holding a non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .find(|&g| self.grad.group(g).iter().any(|v| !v.is_finite()))
    }
}

/// One training view: the observed image and its optional monocular pseudo-depth.
#[derive(Debug, Clone, Copy)]
pub struct Supervision<'a> {
    pub target: &'a Image,
    pub pseudo_depth: Option<&'a ScalarMap>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub background: [f64; 3],
    pub tile_size: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            tile_size: DEFAULT_TILE_SIZE,
        }
    }
}

/// Quantities treated as constants when differentiating: the reweighting
/// denominators, the depth mask, the visible set and the neighbor lists.
#[derive(Debug, Clone)]
pub struct FrozenContext {
    pub psi_denominator: Image,
    pub depth_mask: Vec<bool>,
    pub visible: Vec<usize>,
    pub neighborhoods: Neighborhoods,
}

/// Everything a training step needs from one evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: LossReport,
    pub gradients: GradientBundle,
    /// Combined screen-space splat gradients, aligned with `render.water_splats`.
    pub splat_grads: Vec<SplatGrad>,
    pub render: DualRender,
    pub frozen: FrozenContext,
}

fn visible_set(dual: &DualRender, camera: &Camera) -> Vec<usize> {
    let mut v: Vec<usize> = dual
        .water_splats
        .iter()
        .filter(|s| s.pixel_bounds(camera.width, camera.height).is_some())
        .map(|s| s.gaussian_id)
        .collect();
    v.sort_unstable();
    v
}

fn depth_mask(dual: &DualRender, pseudo: Option<&ScalarMap>) -> Vec<bool> {
    match pseudo {
        Some(p) => dual
            .water
            .alpha
            .data
            .iter()
            .zip(&p.data)
            .map(|(a, d)| *a > DEPTH_MASK_ALPHA && d.is_finite())
            .collect(),
        None => vec![false; dual.water.alpha.data.len()],
    }
}

/// Derives the frozen context from the current parameters.
pub fn freeze(
    cloud: &GaussianCloud,
    camera: &Camera,
    sup: Supervision<'_>,
    weights: &LossWeights,
    settings: &RenderSettings,
) -> Result<FrozenContext> {
    let dual = optics::render_dual(cloud, camera, settings.background, settings.tile_size)?;
    Ok(freeze_from(cloud, camera, &dual, sup, weights))
}

fn freeze_from(
    cloud: &GaussianCloud,
    camera: &Camera,
    dual: &DualRender,
    sup: Supervision<'_>,
    weights: &LossWeights,
) -> FrozenContext {
    let visible = visible_set(dual, camera);
    let neighborhoods =
        losses::find_neighborhoods(cloud, &visible, weights.smooth_radius, weights.smooth_min_neighbors);
    FrozenContext {
        psi_denominator: dual.water.color.clone(),
        depth_mask: depth_mask(dual, sup.pseudo_depth),
        visible,
        neighborhoods,
    }
}

fn check_inputs(camera: &Camera, sup: &Supervision<'_>, weights: &LossWeights) -> Result<()> {
    camera.validate()?;
    weights.validate()?;
    if sup.target.width != camera.width || sup.target.height != camera.height {
        return Err(Error::Argument(format!(
            "target {}x{} does not match camera {}x{}",
            sup.target.width, sup.target.height, camera.width, camera.height
        )));
    }
    if let Some(p) = sup.pseudo_depth {
        if p.width != camera.width || p.height != camera.height {
            return Err(Error::Argument(format!(
                "pseudo-depth {}x{} does not match camera {}x{}",
                p.width, p.height, camera.width, camera.height
            )));
        }
    }
    Ok(())
}

fn finite_or_fail(term: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NumericalFailure { term, value })
    }
}

/// Total loss and its gradient w.r.t. every parameter.
///
/// `regularize` switches the spatial and spectral terms on for this call.
pub fn loss_and_grad(
    cloud: &GaussianCloud,
    camera: &Camera,
    sup: Supervision<'_>,
    weights: &LossWeights,
    settings: &RenderSettings,
    regularize: bool,
) -> Result<(LossReport, GradientBundle)> {
    let e = evaluate(cloud, camera, sup, weights, settings, regularize)?;
    Ok((e.report, e.gradients))
}

/// Full evaluation including render outputs and screen-space gradients.
pub fn evaluate(
    cloud: &GaussianCloud,
    camera: &Camera,
    sup: Supervision<'_>,
    weights: &LossWeights,
    settings: &RenderSettings,
    regularize: bool,
) -> Result<Evaluation> {
    check_inputs(camera, &sup, weights)?;
    cloud.validate()?;
    let dual = optics::render_dual(cloud, camera, settings.background, settings.tile_size)?;
    let frozen = freeze_from(cloud, camera, &dual, sup, weights);
    let n = cloud.count();
    let mut grad = GaussianCloud::zeros(n);

    let image = losses::weighted_image_loss_frozen(&dual.water.color, sup.target, &frozen.psi_denominator, weights.lambda_ssim)?;
    let w_l2 = finite_or_fail("weighted_l2", image.w_l2)?;
    let w_dssim = finite_or_fail("weighted_dssim", image.w_dssim)?;

    let pixels = camera.pixel_count();
    let mut water_depth_grad = vec![0.0; pixels];
    let mut depth_pcc = None;
    let mut depth_skipped = false;
    if let Some(pseudo) = sup.pseudo_depth {
        match losses::pcc_depth_loss_with_grad(&dual.water.depth, pseudo, &frozen.depth_mask) {
            Ok((v, g)) => {
                depth_pcc = Some(finite_or_fail("depth_pcc", v)?);
                for (o, gi) in water_depth_grad.iter_mut().zip(g) {
                    *o = weights.lambda_depth * gi;
                }
            }
            Err(Error::DegenerateDepth(_)) => depth_skipped = true,
            Err(e) => return Err(e),
        }
    }

    let (exposure, exp_grad) = losses::exposure_loss_with_grad(&dual.clear.color, weights.tau);
    let exposure = finite_or_fail("exposure", exposure)?;
    let clear_color_grad: Vec<f64> = exp_grad.iter().map(|g| weights.lambda_exposure * g).collect();

    let zero_depth = vec![0.0; pixels];
    let splat_grads = optics::render_dual_backward(
        cloud,
        camera,
        &dual,
        BranchUpstream {
            color: &image.grad,
            depth: &water_depth_grad,
        },
        BranchUpstream {
            color: &clear_color_grad,
            depth: &zero_depth,
        },
        &mut grad,
    )?;

    let (mut spatial, mut spectral, mut spatial_empty) = (None, None, false);
    if regularize {
        let s = losses::spatial_loss_over(cloud, &frozen.neighborhoods, Some((&mut grad, weights.lambda_spatial)));
        spatial = Some(finite_or_fail("spatial", s)?);
        spatial_empty = frozen.neighborhoods.valid.is_empty();
        let p = losses::spectral_prior_loss_with_grad(cloud, weights.spectral_delta, &mut grad, weights.lambda_spectral);
        spectral = Some(finite_or_fail("spectral", p)?);
    }

    let mut report = losses::total_loss(w_l2, w_dssim, depth_pcc, exposure, spatial, spectral, weights);
    report.depth_skipped = depth_skipped;
    report.spatial_empty = spatial_empty;
    let total = finite_or_fail("total", report.total)?;

    let gradients = GradientBundle { grad, loss: total };
    if let Some(group) = gradients.first_non_finite() {
        return Err(Error::NonFiniteGradient { group: group.name() });
    }
    Ok(Evaluation {
        report,
        gradients,
        splat_grads,
        render: dual,
        frozen,
    })
}

/// Total loss with every stop-gradient quantity taken from `frozen`.
///
/// At the point `frozen` was derived from this equals the value reported by
/// [`loss_and_grad`], and its derivative is exactly what that function returns.
pub fn loss_with_frozen(
    cloud: &GaussianCloud,
    camera: &Camera,
    sup: Supervision<'_>,
    weights: &LossWeights,
    settings: &RenderSettings,
    regularize: bool,
    frozen: &FrozenContext,
) -> Result<f64> {
    check_inputs(camera, &sup, weights)?;
    let dual = optics::render_dual(cloud, camera, settings.background, settings.tile_size)?;
    let image = losses::weighted_image_loss_frozen(&dual.water.color, sup.target, &frozen.psi_denominator, weights.lambda_ssim)?;
    let depth_pcc = match sup.pseudo_depth {
        Some(p) => match losses::pcc_depth_loss(&dual.water.depth, p, &frozen.depth_mask) {
            Ok(v) => Some(v),
            Err(Error::DegenerateDepth(_)) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    let exposure = losses::exposure_loss(&dual.clear.color, weights.tau);
    let (spatial, spectral) = if regularize {
        (
            Some(losses::spatial_loss_over(cloud, &frozen.neighborhoods, None)),
            Some(losses::spectral_prior_loss(cloud, weights.spectral_delta)),
        )
    } else {
        (None, None)
    };
    Ok(losses::total_loss(image.w_l2, image.w_dssim, depth_pcc, exposure, spatial, spectral, weights).total)
}

/// Central differences of `f` w.r.t. every scalar parameter of `cloud`.
pub fn finite_diff_oracle<F>(cloud: &GaussianCloud, step: f64, mut f: F) -> Result<GradientBundle>
where
    F: FnMut(&GaussianCloud) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {step}")));
    }
    let mut out = GradientBundle::zeros(cloud.count());
    out.loss = f(cloud)?;
    let mut work = cloud.clone();
    for group in ParamGroup::ALL {
        for k in 0..cloud.group(group).len() {
            let orig = cloud.group(group)[k];
            work.group_mut(group)[k] = orig + step;
            let plus = f(&work)?;
            work.group_mut(group)[k] = orig - step;
            let minus = f(&work)?;
            work.group_mut(group)[k] = orig;
            out.grad.group_mut(group)[k] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(out)
}

/// Relative disagreement `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{logit, Gaussian};
    use nalgebra::{Matrix3, Vector3};

    fn setup() -> (GaussianCloud, Camera, Image) {
        let cam = Camera::new(16, 16, 18.0, 18.0, 8.0, 8.0, Matrix3::identity(), Vector3::zeros()).unwrap();
        let mut c = GaussianCloud::new();
        c.push(Gaussian {
            position: [0.1, -0.05, 2.0],
            rotation: [0.9, 0.1, -0.2, 0.3],
            log_scale: [-1.2, -1.5, -1.0],
            opacity_logit: logit(0.7),
            base_color: [0.6, 0.4, 0.3],
            atten_raw: [-1.0, -1.5, -2.0],
            backsc_raw: [-3.0, -2.5, -2.0],
            veil_raw: [-1.5, -0.5, 0.2],
        });
        let target = Image::filled(16, 16, [0.3, 0.4, 0.5]);
        (c, cam, target)
    }

    #[test]
    fn empty_cloud_has_empty_gradients() {
        let (_, cam, target) = setup();
        let sup = Supervision {
            target: &target,
            pseudo_depth: None,
        };
        let (r, g) = loss_and_grad(&GaussianCloud::new(), &cam, sup, &LossWeights::default(), &RenderSettings::default(), true)
            .unwrap();
        assert_eq!(g.grad.count(), 0);
        assert!(r.total.is_finite());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (c, cam, _) = setup();
        let target = Image::filled(15, 16, [0.0; 3]);
        let sup = Supervision {
            target: &target,
            pseudo_depth: None,
        };
        assert!(matches!(
            loss_and_grad(&c, &cam, sup, &LossWeights::default(), &RenderSettings::default(), false),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn frozen_value_matches_reported_total() {
        let (c, cam, target) = setup();
        let sup = Supervision {
            target: &target,
            pseudo_depth: None,
        };
        let w = LossWeights::default();
        let s = RenderSettings::default();
        let (r, _) = loss_and_grad(&c, &cam, sup, &w, &s, true).unwrap();
        let frozen = freeze(&c, &cam, sup, &w, &s).unwrap();
        let v = loss_with_frozen(&c, &cam, sup, &w, &s, true, &frozen).unwrap();
        assert!((r.total - v).abs() < 1e-14);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
    }
}
