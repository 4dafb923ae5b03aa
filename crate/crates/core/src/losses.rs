//! Training objective: perception-weighted photometric terms, scale-invariant
//! depth correlation, exposure control and the two medium regularizers.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scene::{sigmoid, softplus, GaussianCloud, Image, ScalarMap};
use crate::ssim;

/// Stabilizer of the intensity reweighting `y / (sg(y_hat) + eps)`.
pub const PSI_EPSILON: f64 = 1e-3;
/// Offset in the neighbor weights `1 / (d + eps)`.
pub const NEIGHBOR_EPSILON: f64 = 1e-3;

/// Term weights and term hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub lambda_depth: f64,
    pub lambda_spatial: f64,
    pub lambda_spectral: f64,
    pub lambda_exposure: f64,
    /// Exposure threshold.
    pub tau: f64,
    pub smooth_radius: f64,
    pub smooth_min_neighbors: usize,
    pub spectral_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ssim: 0.2,
            lambda_depth: 0.2,
            lambda_spatial: 0.1,
            lambda_spectral: 0.1,
            lambda_exposure: 0.1,
            tau: 0.9,
            smooth_radius: 0.05,
            smooth_min_neighbors: 2,
            spectral_delta: 0.01,
        }
    }
}

impl LossWeights {
    /// Photometric terms only (weighted L2 plus weighted D-SSIM).
    pub fn photometric_only(lambda_ssim: f64) -> Self {
        Self {
            lambda_ssim,
            lambda_depth: 0.0,
            lambda_spatial: 0.0,
            lambda_spectral: 0.0,
            lambda_exposure: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_depth", self.lambda_depth),
            ("lambda_spatial", self.lambda_spatial),
            ("lambda_spectral", self.lambda_spectral),
            ("lambda_exposure", self.lambda_exposure),
            ("spectral_delta", self.spectral_delta),
        ];
        for (name, v) in w {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Argument(format!("{name} must be a finite nonnegative number, got {v}")));
            }
        }
        if self.lambda_ssim > 1.0 {
            return Err(Error::Argument(format!("lambda_ssim must be at most 1, got {}", self.lambda_ssim)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Argument(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.smooth_radius > 0.0) {
            return Err(Error::Argument(format!(
                "smooth_radius must be positive, got {}",
                self.smooth_radius
            )));
        }
        Ok(())
    }
}

/// Values of every loss term and their weighted sum.
///
/// Terms that were not evaluated this step (regularizers off-schedule, depth
/// unavailable or degenerate) are `None` and count as zero in `total`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub w_l2: f64,
    pub w_dssim: f64,
    pub depth_pcc: Option<f64>,
    pub exposure: f64,
    pub spatial: Option<f64>,
    pub spectral: Option<f64>,
    pub total: f64,
    /// Set when pseudo-depth was supplied but the correlation was undefined.
    pub depth_skipped: bool,
    /// Set when the smoothness term was evaluated over an empty valid set.
    pub spatial_empty: bool,
}

/// Fills in `total` from the individual terms.
pub fn total_loss(
    w_l2: f64,
    w_dssim: f64,
    depth_pcc: Option<f64>,
    exposure: f64,
    spatial: Option<f64>,
    spectral: Option<f64>,
    weights: &LossWeights,
) -> LossReport {
    let total = (1.0 - weights.lambda_ssim) * w_l2
        + weights.lambda_ssim * w_dssim
        + weights.lambda_depth * depth_pcc.unwrap_or(0.0)
        + weights.lambda_spatial * spatial.unwrap_or(0.0)
        + weights.lambda_spectral * spectral.unwrap_or(0.0)
        + weights.lambda_exposure * exposure;
    LossReport {
        w_l2,
        w_dssim,
        depth_pcc,
        exposure,
        spatial,
        spectral,
        total,
        depth_skipped: false,
        spatial_empty: false,
    }
}

/// `y / (y_hat_frozen + eps)`; the denominator carries no gradient.
pub fn psi_map(y: &Image, y_hat_frozen: &Image) -> Result<Image> {
    if !y.same_shape(y_hat_frozen) {
        return Err(Error::Argument("psi_map inputs differ in shape".into()));
    }
    let data = y
        .data
        .iter()
        .zip(&y_hat_frozen.data)
        .map(|(v, f)| v / (f + PSI_EPSILON))
        .collect();
    Image::from_data(y.width, y.height, data)
}

/// Photometric terms with their combined gradient w.r.t. the rendered image.
#[derive(Debug, Clone)]
pub struct ImageLoss {
    pub w_l2: f64,
    pub w_dssim: f64,
    pub combined: f64,
    pub grad: Vec<f64>,
}

/// Weighted L2 and D-SSIM between `rendered` and `target` in the reweighted domain.
pub fn weighted_image_loss(rendered: &Image, target: &Image, lambda_ssim: f64) -> Result<ImageLoss> {
    weighted_image_loss_frozen(rendered, target, rendered, lambda_ssim)
}

/// As [`weighted_image_loss`] but with an explicit stop-gradient image for the denominators.
pub fn weighted_image_loss_frozen(
    rendered: &Image,
    target: &Image,
    frozen: &Image,
    lambda_ssim: f64,
) -> Result<ImageLoss> {
    if !rendered.same_shape(target) || !rendered.same_shape(frozen) {
        return Err(Error::Argument(format!(
            "rendered {}x{} and target {}x{} differ in shape",
            rendered.width, rendered.height, target.width, target.height
        )));
    }
    let psi_r = psi_map(rendered, frozen)?;
    let psi_t = psi_map(target, frozen)?;
    let n = rendered.data.len() as f64;

    let mut w_l2 = 0.0;
    for (a, b) in psi_r.data.iter().zip(&psi_t.data) {
        w_l2 += (a - b) * (a - b);
    }
    w_l2 /= n;

    let (s, s_grad) = ssim::ssim_with_grad(&psi_r, &psi_t)?;
    let w_dssim = 1.0 - s;

    let grad = psi_r
        .data
        .iter()
        .zip(&psi_t.data)
        .zip(&frozen.data)
        .zip(&s_grad)
        .map(|(((a, b), f), gs)| {
            let inv = 1.0 / (f + PSI_EPSILON);
            ((1.0 - lambda_ssim) * 2.0 * (a - b) / n - lambda_ssim * gs) * inv
        })
        .collect();

    Ok(ImageLoss {
        w_l2,
        w_dssim,
        combined: (1.0 - lambda_ssim) * w_l2 + lambda_ssim * w_dssim,
        grad,
    })
}

fn check_depth_shapes(pred: &ScalarMap, pseudo: &ScalarMap, mask: &[bool]) -> Result<()> {
    if pred.width != pseudo.width || pred.height != pseudo.height || mask.len() != pred.data.len() {
        return Err(Error::Argument(format!(
            "depth maps {}x{} / {}x{} and mask of {} do not agree",
            pred.width,
            pred.height,
            pseudo.width,
            pseudo.height,
            mask.len()
        )));
    }
    Ok(())
}

/// `1 - pearson(pred, pseudo)` over masked pixels.
pub fn pcc_depth_loss(pred: &ScalarMap, pseudo: &ScalarMap, mask: &[bool]) -> Result<f64> {
    Ok(pcc_impl(pred, pseudo, mask, false)?.0)
}

/// Depth correlation loss and its gradient w.r.t. `pred` (zero outside the mask).
pub fn pcc_depth_loss_with_grad(pred: &ScalarMap, pseudo: &ScalarMap, mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    let (v, g) = pcc_impl(pred, pseudo, mask, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn pcc_impl(pred: &ScalarMap, pseudo: &ScalarMap, mask: &[bool], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    check_depth_shapes(pred, pseudo, mask)?;
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if idx.len() < 2 {
        return Err(Error::DegenerateDepth(format!("only {} masked pixels", idx.len())));
    }
    let n = idx.len() as f64;
    let mp = idx.iter().map(|&i| pred.data[i]).sum::<f64>() / n;
    let mq = idx.iter().map(|&i| pseudo.data[i]).sum::<f64>() / n;
    let (mut spq, mut spp, mut sqq) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let dp = pred.data[i] - mp;
        let dq = pseudo.data[i] - mq;
        spq += dp * dq;
        spp += dp * dp;
        sqq += dq * dq;
    }
    if !(spp > 0.0) || !(sqq > 0.0) {
        return Err(Error::DegenerateDepth(format!(
            "zero variance (predicted {spp:e}, pseudo {sqq:e})"
        )));
    }
    let norm = (spp * sqq).sqrt();
    let rho = (spq / norm).clamp(-1.0, 1.0);
    let grad = want_grad.then(|| {
        let mut g = vec![0.0; mask.len()];
        for &i in &idx {
            let dp = pred.data[i] - mp;
            let dq = pseudo.data[i] - mq;
            g[i] = -(dq / norm - rho * dp / spp);
        }
        g
    });
    Ok((1.0 - rho, grad))
}

/// Mean over pixels and channels of `max(I - tau, 0)`.
pub fn exposure_loss(clear: &Image, tau: f64) -> f64 {
    let n = clear.data.len().max(1) as f64;
    clear.data.iter().map(|v| (v - tau).max(0.0)).sum::<f64>() / n
}

/// Exposure loss and its (sub)gradient w.r.t. the clear image.
pub fn exposure_loss_with_grad(clear: &Image, tau: f64) -> (f64, Vec<f64>) {
    let n = clear.data.len().max(1) as f64;
    let g = clear.data.iter().map(|&v| if v > tau { 1.0 / n } else { 0.0 }).collect();
    (exposure_loss(clear, tau), g)
}

/// Neighbor lists of the valid primitives for the smoothness term.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Neighborhoods {
    /// `(i, neighbors of i)` for every visible primitive with enough neighbors.
    pub valid: Vec<(usize, Vec<usize>)>,
}

/// Finds, for each visible primitive, every other primitive within `radius`
/// using a uniform hash grid with cells of size `radius`.
pub fn find_neighborhoods(cloud: &GaussianCloud, visible: &[usize], radius: f64, n_min: usize) -> Neighborhoods {
    let cell = |p: &[f64; 3]| {
        (
            (p[0] / radius).floor() as i64,
            (p[1] / radius).floor() as i64,
            (p[2] / radius).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (j, p) in cloud.positions.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(j);
    }
    let r2 = radius * radius;
    let mut valid = Vec::new();
    for &i in visible {
        let p = cloud.positions[i];
        let (cx, cy, cz) = cell(&p);
        let mut nb = Vec::new();
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(list) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &j in list {
                            if j == i {
                                continue;
                            }
                            let q = cloud.positions[j];
                            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                            if d2 <= r2 {
                                nb.push(j);
                            }
                        }
                    }
                }
            }
        }
        if nb.len() >= n_min && !nb.is_empty() {
            nb.sort_unstable();
            valid.push((i, nb));
        }
    }
    Neighborhoods { valid }
}

fn decoded_theta(cloud: &GaussianCloud, i: usize) -> [f64; 9] {
    let m = cloud.medium_unchecked(i);
    [
        m.beta_d.x, m.beta_d.y, m.beta_d.z, m.beta_b.x, m.beta_b.y, m.beta_b.z, m.veil.x, m.veil.y, m.veil.z,
    ]
}

/// Distance-weighted neighborhood smoothness of the decoded medium parameters.
///
/// Returns `(value, valid_set_was_empty)`.
pub fn spatial_smoothness_loss(cloud: &GaussianCloud, visible: &[usize], radius: f64, n_min: usize) -> (f64, bool) {
    let nb = find_neighborhoods(cloud, visible, radius, n_min);
    (spatial_loss_over(cloud, &nb, None), nb.valid.is_empty())
}

/// Smoothness value over fixed neighborhoods, optionally accumulating
/// `scale * dL/dparam` into `grad` (medium raw parameters and positions).
pub fn spatial_loss_over(cloud: &GaussianCloud, nb: &Neighborhoods, mut grad: Option<(&mut GaussianCloud, f64)>) -> f64 {
    if nb.valid.is_empty() {
        return 0.0;
    }
    let inv_v = 1.0 / nb.valid.len() as f64;
    let mut total = 0.0;
    let mut d_theta = grad.as_ref().map(|_| vec![[0.0f64; 9]; cloud.count()]);
    for (i, neighbors) in &nb.valid {
        let ti = decoded_theta(cloud, *i);
        let pi = cloud.positions[*i];
        let mut num = 0.0;
        let mut den = 0.0;
        let mut terms = Vec::with_capacity(neighbors.len());
        for &j in neighbors {
            let tj = decoded_theta(cloud, j);
            let pj = cloud.positions[j];
            let d = ((pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2) + (pi[2] - pj[2]).powi(2)).sqrt();
            let w = 1.0 / (d + NEIGHBOR_EPSILON);
            let e: f64 = ti.iter().zip(&tj).map(|(a, b)| (a - b) * (a - b)).sum();
            num += w * e;
            den += w;
            terms.push((j, tj, pj, d, w, e));
        }
        let li = num / den;
        total += li;

        if let (Some((g, scale)), Some(dt)) = (grad.as_mut(), d_theta.as_mut()) {
            let s = *scale * inv_v;
            for (j, tj, pj, d, w, e) in terms {
                for k in 0..9 {
                    let v = s * 2.0 * w * (ti[k] - tj[k]) / den;
                    dt[*i][k] += v;
                    dt[j][k] -= v;
                }
                // Through the weight w = 1 / (d + eps).
                if d > 0.0 {
                    let dw = s * (e - li) / den;
                    let dd = -dw * w * w;
                    for k in 0..3 {
                        let u = dd * (pi[k] - pj[k]) / d;
                        g.positions[*i][k] += u;
                        g.positions[j][k] -= u;
                    }
                }
            }
        }
    }
    if let (Some((g, _)), Some(dt)) = (grad, d_theta) {
        chain_decoded_medium(cloud, &dt, g);
    }
    total * inv_v
}

/// Chains gradients w.r.t. decoded `(beta_d, beta_b, veil)` to the raw parameters.
fn chain_decoded_medium(cloud: &GaussianCloud, d_theta: &[[f64; 9]], grad: &mut GaussianCloud) {
    for (i, dt) in d_theta.iter().enumerate() {
        for k in 0..3 {
            grad.atten_raw[i][k] += dt[k] * sigmoid(cloud.atten_raw[i][k]);
            grad.backsc_raw[i][k] += dt[3 + k] * sigmoid(cloud.backsc_raw[i][k]);
            let v = sigmoid(cloud.veil_raw[i][k]);
            grad.veil_raw[i][k] += dt[6 + k] * v * (1.0 - v);
        }
    }
}

/// Ordering differences: attenuation red > green > blue, backscatter and veil blue > green > red.
fn spectral_deltas(theta: &[f64; 9]) -> [f64; 6] {
    [
        theta[1] - theta[0],
        theta[2] - theta[1],
        theta[3] - theta[4],
        theta[4] - theta[5],
        theta[6] - theta[7],
        theta[7] - theta[8],
    ]
}

/// Penalty on one ordering difference: `softplus(difference + delta)`.
/// Equals ln 2 at `difference = -delta` and vanishes as the margin grows.
pub fn ordering_penalty(difference: f64, delta: f64) -> f64 {
    softplus(difference + delta)
}

/// Mean softplus penalty on spectral-ordering violations.
pub fn spectral_prior_loss(cloud: &GaussianCloud, delta: f64) -> f64 {
    spectral_impl(cloud, delta, None)
}

/// Spectral prior value, accumulating `scale * dL/draw` into `grad`.
pub fn spectral_prior_loss_with_grad(cloud: &GaussianCloud, delta: f64, grad: &mut GaussianCloud, scale: f64) -> f64 {
    spectral_impl(cloud, delta, Some((grad, scale)))
}

fn spectral_impl(cloud: &GaussianCloud, delta: f64, grad: Option<(&mut GaussianCloud, f64)>) -> f64 {
    let n = cloud.count();
    if n == 0 {
        return 0.0;
    }
    let denom = (6 * n) as f64;
    let mut total = 0.0;
    let mut d_theta = grad.as_ref().map(|_| vec![[0.0f64; 9]; n]);
    for i in 0..n {
        let th = decoded_theta(cloud, i);
        let deltas = spectral_deltas(&th);
        for d in deltas {
            total += ordering_penalty(d, delta);
        }
        if let Some(dt) = d_theta.as_mut() {
            let g = deltas.map(|d| sigmoid(d + delta) / denom);
            // Each pair (hi, lo) below is d Delta / d theta = +1 on hi, -1 on lo.
            let pairs = [(1, 0), (2, 1), (3, 4), (4, 5), (6, 7), (7, 8)];
            for (gk, (hi, lo)) in g.iter().zip(pairs) {
                dt[i][hi] += gk;
                dt[i][lo] -= gk;
            }
        }
    }
    if let (Some((g, scale)), Some(mut dt)) = (grad, d_theta) {
        for row in dt.iter_mut() {
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        chain_decoded_medium(cloud, &dt, g);
    }
    total / denom
}
