//! Primitive cloud, camera and dataset types shared by the whole pipeline.
//!
//! Every Gaussian stores its attributes unconstrained and decodes them at read
//! time: scales through `exp`, opacity through a sigmoid, the attenuation and
//! backscatter coefficients through softplus and the veiling light through a
//! sigmoid. Optimizers can therefore move raw values freely while the decoded
//! physical quantities stay in range.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Rgb = Vector3<f64>;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, evaluated without overflow for large `|x|`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// One learnable attribute array of a [`GaussianCloud`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Positions,
    Rotations,
    LogScales,
    OpacityLogits,
    BaseColors,
    AttenRaw,
    BacksRaw,
    VeilRaw,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Positions,
        ParamGroup::Rotations,
        ParamGroup::LogScales,
        ParamGroup::OpacityLogits,
        ParamGroup::BaseColors,
        ParamGroup::AttenRaw,
        ParamGroup::BacksRaw,
        ParamGroup::VeilRaw,
    ];

    /// Scalars per primitive.
    pub fn width(self) -> usize {
        match self {
            ParamGroup::Rotations => 4,
            ParamGroup::OpacityLogits => 1,
            _ => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Positions => "positions",
            ParamGroup::Rotations => "rotations",
            ParamGroup::LogScales => "log_scales",
            ParamGroup::OpacityLogits => "opacity_logits",
            ParamGroup::BaseColors => "base_colors",
            ParamGroup::AttenRaw => "atten_raw",
            ParamGroup::BacksRaw => "backsc_raw",
            ParamGroup::VeilRaw => "veil_raw",
        }
    }
}

/// Structure-of-arrays store of every primitive attribute.
///
/// Rotations are quaternions in `(w, x, y, z)` order and are normalized when
/// read. Base colors are plain RGB (no view dependence).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub base_colors: Vec<[f64; 3]>,
    pub atten_raw: Vec<[f64; 3]>,
    pub backsc_raw: Vec<[f64; 3]>,
    pub veil_raw: Vec<[f64; 3]>,
}

/// Raw attribute values of a single primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub base_color: [f64; 3],
    pub atten_raw: [f64; 3],
    pub backsc_raw: [f64; 3],
    pub veil_raw: [f64; 3],
}

/// Decoded medium coefficients of one primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedMedium {
    pub beta_d: Rgb,
    pub beta_b: Rgb,
    pub veil: Rgb,
}

impl GaussianCloud {
    pub fn new() -> Self {
        Self::default()
    }

    /// A cloud of `n` primitives with every attribute zero; used for gradient accumulators.
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            base_colors: vec![[0.0; 3]; n],
            atten_raw: vec![[0.0; 3]; n],
            backsc_raw: vec![[0.0; 3]; n],
            veil_raw: vec![[0.0; 3]; n],
        }
    }

    pub fn count(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) {
        self.positions.push(g.position);
        self.rotations.push(g.rotation);
        self.log_scales.push(g.log_scale);
        self.opacity_logits.push(g.opacity_logit);
        self.base_colors.push(g.base_color);
        self.atten_raw.push(g.atten_raw);
        self.backsc_raw.push(g.backsc_raw);
        self.veil_raw.push(g.veil_raw);
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            position: self.positions[i],
            rotation: self.rotations[i],
            log_scale: self.log_scales[i],
            opacity_logit: self.opacity_logits[i],
            base_color: self.base_colors[i],
            atten_raw: self.atten_raw[i],
            backsc_raw: self.backsc_raw[i],
            veil_raw: self.veil_raw[i],
        }
    }

    /// Keeps the primitives whose flag is `true`, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        fn filter<T: Copy>(v: &mut Vec<T>, keep: &[bool]) {
            let mut it = keep.iter();
            v.retain(|_| *it.next().unwrap());
        }
        assert_eq!(keep.len(), self.count());
        filter(&mut self.positions, keep);
        filter(&mut self.rotations, keep);
        filter(&mut self.log_scales, keep);
        filter(&mut self.opacity_logits, keep);
        filter(&mut self.base_colors, keep);
        filter(&mut self.atten_raw, keep);
        filter(&mut self.backsc_raw, keep);
        filter(&mut self.veil_raw, keep);
    }

    /// Checks that every attribute array has the same length.
    pub fn validate(&self) -> Result<()> {
        let n = self.count();
        let lens = [
            self.rotations.len(),
            self.log_scales.len(),
            self.opacity_logits.len(),
            self.base_colors.len(),
            self.atten_raw.len(),
            self.backsc_raw.len(),
            self.veil_raw.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::ContractViolation(format!(
                "attribute arrays disagree in length (positions {n}, others {lens:?})"
            )));
        }
        Ok(())
    }

    pub fn group(&self, g: ParamGroup) -> &[f64] {
        match g {
            ParamGroup::Positions => self.positions.as_flattened(),
            ParamGroup::Rotations => self.rotations.as_flattened(),
            ParamGroup::LogScales => self.log_scales.as_flattened(),
            ParamGroup::OpacityLogits => &self.opacity_logits,
            ParamGroup::BaseColors => self.base_colors.as_flattened(),
            ParamGroup::AttenRaw => self.atten_raw.as_flattened(),
            ParamGroup::BacksRaw => self.backsc_raw.as_flattened(),
            ParamGroup::VeilRaw => self.veil_raw.as_flattened(),
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
        match g {
            ParamGroup::Positions => self.positions.as_flattened_mut(),
            ParamGroup::Rotations => self.rotations.as_flattened_mut(),
            ParamGroup::LogScales => self.log_scales.as_flattened_mut(),
            ParamGroup::OpacityLogits => &mut self.opacity_logits,
            ParamGroup::BaseColors => self.base_colors.as_flattened_mut(),
            ParamGroup::AttenRaw => self.atten_raw.as_flattened_mut(),
            ParamGroup::BacksRaw => self.backsc_raw.as_flattened_mut(),
            ParamGroup::VeilRaw => self.veil_raw.as_flattened_mut(),
        }
    }

    #[inline]
    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    #[inline]
    pub fn scale(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.log_scales[i]).map(f64::exp)
    }

    #[inline]
    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.positions[i])
    }

    #[inline]
    pub fn base_color(&self, i: usize) -> Rgb {
        Vector3::from(self.base_colors[i])
    }

    #[inline]
    pub(crate) fn medium_unchecked(&self, i: usize) -> DecodedMedium {
        DecodedMedium {
            beta_d: Vector3::from(self.atten_raw[i]).map(softplus),
            beta_b: Vector3::from(self.backsc_raw[i]).map(softplus),
            veil: Vector3::from(self.veil_raw[i]).map(sigmoid),
        }
    }
}

/// Decodes the medium coefficients of primitive `index`.
pub fn decode_medium(cloud: &GaussianCloud, index: usize) -> Result<DecodedMedium> {
    if index >= cloud.count() {
        return Err(Error::Argument(format!(
            "gaussian index {index} out of range for cloud of {}",
            cloud.count()
        )));
    }
    Ok(cloud.medium_unchecked(index))
}

/// Rotation matrix of a quaternion `(w, x, y, z)`; the quaternion is normalized first.
pub fn quat_to_matrix(q: [f64; 4]) -> Option<Matrix3<f64>> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return None;
    }
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Some(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Pulls `dL/dR` back to the raw (unnormalized) quaternion.
pub(crate) fn quat_to_matrix_backward(q: [f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let g = |r: usize, c: usize| d_r[(r, c)];

    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));

    // Project out the radial component: the rotation only sees q / |q|.
    let dq = [dw, dx, dy, dz];
    let qn = [w, x, y, z];
    let dot: f64 = dq.iter().zip(qn).map(|(a, b)| a * b).sum();
    [
        (dq[0] - qn[0] * dot) / n,
        (dq[1] - qn[1] * dot) / n,
        (dq[2] - qn[2] * dot) / n,
        (dq[3] - qn[3] * dot) / n,
    ]
}

/// World-space covariance `R diag(s)^2 R^T` of primitive `index`.
pub fn covariance_of(cloud: &GaussianCloud, index: usize) -> Result<Matrix3<f64>> {
    if index >= cloud.count() {
        return Err(Error::Argument(format!(
            "gaussian index {index} out of range for cloud of {}",
            cloud.count()
        )));
    }
    let r = quat_to_matrix(cloud.rotations[index]).ok_or(Error::DegenerateRotation { index })?;
    let s = cloud.scale(index);
    let m = r * Matrix3::from_diagonal(&s);
    Ok(m * m.transpose())
}

/// Pinhole camera with a world-to-camera pose.
///
/// The camera frame looks down `+z` with `x` to the right and `y` down; pixel
/// `(i, j)` covers `[i, i+1) x [j, j+1)` so its center sits at `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the approximate world up direction.
    pub fn look_at(
        width: usize,
        height: usize,
        focal: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        // Image y points down, so the camera's y axis is world "down".
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            width,
            height,
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rotation,
            translation,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Argument("camera size must be positive".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Argument(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::Argument(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        let err = (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) {
            return Err(Error::Argument(format!(
                "camera rotation is not orthonormal (deviation {err:e})"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Same pose with intrinsics and size divided by `factor` (sizes rounded down).
    pub fn downscaled(&self, factor: usize) -> Camera {
        let f = factor as f64;
        Camera {
            width: self.width / factor,
            height: self.height / factor,
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            rotation: self.rotation,
            translation: self.translation,
        }
    }
}

/// Signed depth of `position` along the optical axis of `camera`.
#[inline]
pub fn camera_distance(position: &Vector3<f64>, camera: &Camera) -> f64 {
    camera.rotation.row(2).transpose().dot(position) + camera.translation.z
}

/// Interleaved RGB image with `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Argument(format!(
                "image buffer of {} samples does not match {width}x{height}x3",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Single-channel `f64` map (depth, alpha, pseudo-depth).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ScalarMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Nearest-neighbor resample to `width x height`.
    pub fn resized_nearest(&self, width: usize, height: usize) -> ScalarMap {
        let mut out = ScalarMap::new(width, height);
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            let sy = sy.min(self.height - 1);
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                out.data[y * width + x] = self.get(sx.min(self.width - 1), sy);
            }
        }
        out
    }
}

/// Train/test split as index lists into the bundle's views.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Holds out every `k`-th view (indices `0, k, 2k, ...`); `k = 0` keeps everything for training.
    pub fn every_kth(n: usize, k: usize) -> Split {
        if k == 0 {
            return Split {
                train: (0..n).collect(),
                test: Vec::new(),
            };
        }
        let (test, train) = (0..n).partition(|i| i % k == 0);
        Split { train, test }
    }
}

/// Ingested dataset.
#[derive(Debug, Clone, Default)]
pub struct SceneBundle {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    /// File names of the views, parallel to `cameras`.
    pub names: Vec<String>,
    /// Empty when the scene ships no pseudo-depth; otherwise parallel to `images`.
    pub pseudo_depths: Vec<ScalarMap>,
    pub init_points: Vec<([f64; 3], [f64; 3])>,
    pub split: Split,
}

impl SceneBundle {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.len() != self.images.len() {
            return Err(Error::ContractViolation(format!(
                "{} cameras but {} images",
                self.cameras.len(),
                self.images.len()
            )));
        }
        for (i, (cam, img)) in self.cameras.iter().zip(&self.images).enumerate() {
            if cam.width != img.width || cam.height != img.height {
                return Err(Error::ContractViolation(format!(
                    "view {i}: image is {}x{} but camera is {}x{}",
                    img.width, img.height, cam.width, cam.height
                )));
            }
        }
        if !self.pseudo_depths.is_empty() {
            if self.pseudo_depths.len() != self.images.len() {
                return Err(Error::ContractViolation(format!(
                    "{} pseudo-depth maps for {} images",
                    self.pseudo_depths.len(),
                    self.images.len()
                )));
            }
            for (i, (d, img)) in self.pseudo_depths.iter().zip(&self.images).enumerate() {
                if d.width != img.width || d.height != img.height {
                    return Err(Error::ContractViolation(format!(
                        "view {i}: pseudo-depth is {}x{} but image is {}x{}",
                        d.width, d.height, img.width, img.height
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn has_depth(&self) -> bool {
        !self.pseudo_depths.is_empty()
    }

    /// Radius of the camera centers around their mean, scaled by 1.1.
    pub fn camera_extent(&self) -> f64 {
        if self.cameras.is_empty() {
            return 1.0;
        }
        let centers: Vec<_> = self.cameras.iter().map(Camera::center).collect();
        let mean = centers.iter().fold(Vector3::zeros(), |a, c| a + c) / centers.len() as f64;
        let radius = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
        if radius > 0.0 {
            radius * 1.1
        } else {
            1.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one(g: Gaussian) -> GaussianCloud {
        let mut c = GaussianCloud::new();
        c.push(g);
        c
    }

    fn unit_gaussian() -> Gaussian {
        Gaussian {
            position: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [0.0; 3],
            opacity_logit: 0.0,
            base_color: [0.5; 3],
            atten_raw: [0.0; 3],
            backsc_raw: [0.0; 3],
            veil_raw: [0.0; 3],
        }
    }

    #[test]
    fn decode_medium_examples() {
        let mut g = unit_gaussian();
        let m = decode_medium(&one(g), 0).unwrap();
        assert_relative_eq!(m.beta_d.x, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_relative_eq!(m.veil.z, 0.5, epsilon = 1e-15);

        g.atten_raw = [-20.0; 3];
        let m = decode_medium(&one(g), 0).unwrap();
        assert!(m.beta_d.x > 0.0);
        assert_relative_eq!(m.beta_d.x, 2.061_153_6e-9, max_relative = 1e-6);
    }

    #[test]
    fn decode_medium_out_of_range() {
        assert!(matches!(
            decode_medium(&one(unit_gaussian()), 1),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn activation_derivatives_match_central_differences() {
        let h = 1e-5;
        let mut x = -5.0;
        while x <= 5.0 {
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert_relative_eq!(fd, sigmoid(x), max_relative = 1e-6);
            let s = sigmoid(x);
            let fd = (sigmoid(x + h) - sigmoid(x - h)) / (2.0 * h);
            assert_relative_eq!(fd, s * (1.0 - s), max_relative = 1e-6);
            x += 0.25;
        }
        assert_relative_eq!(inverse_softplus(softplus(-3.2)), -3.2, epsilon = 1e-12);
    }

    #[test]
    fn covariance_examples() {
        let c = covariance_of(&one(unit_gaussian()), 0).unwrap();
        assert_relative_eq!(c, Matrix3::identity(), epsilon = 1e-15);

        let mut g = unit_gaussian();
        g.log_scale = [2f64.ln(), 0.0, 0.0];
        let c = covariance_of(&one(g), 0).unwrap();
        assert_relative_eq!(c, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), epsilon = 1e-12);

        g.rotation = [0.0; 4];
        assert!(matches!(
            covariance_of(&one(g), 0),
            Err(Error::DegenerateRotation { index: 0 })
        ));
    }

    #[test]
    fn quat_backward_matches_finite_differences() {
        let q = [0.7, -0.2, 0.4, 0.3];
        let weights = Matrix3::new(0.3, -1.2, 0.5, 0.9, 0.1, -0.4, 0.2, 0.7, -0.8);
        let f = |q: [f64; 4]| quat_to_matrix(q).unwrap().component_mul(&weights).sum();
        let g = quat_to_matrix_backward(q, &weights);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fd = (f(qp) - f(qm)) / (2.0 * h);
            assert_relative_eq!(g[k], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn camera_distance_examples() {
        let cam = Camera::new(8, 8, 10.0, 10.0, 4.0, 4.0, Matrix3::identity(), Vector3::zeros()).unwrap();
        assert_eq!(camera_distance(&Vector3::new(0.0, 0.0, 5.0), &cam), 5.0);

        let cam = Camera::look_at(
            8,
            8,
            10.0,
            Vector3::new(1.0, 2.0, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        assert_relative_eq!(camera_distance(&cam.center(), &cam), 0.0, epsilon = 1e-12);
        let p = Vector3::new(0.3, -0.1, 0.2);
        let oracle = (cam.rotation * p + cam.translation)[2];
        assert_relative_eq!(camera_distance(&p, &cam), oracle, epsilon = 1e-12);
    }

    #[test]
    fn look_at_keeps_world_up_at_the_top_of_the_image() {
        let up = Vector3::new(0.0, 1.0, 0.0);
        let cam = Camera::look_at(8, 8, 10.0, Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), up).unwrap();
        assert_relative_eq!(cam.rotation.determinant(), 1.0, epsilon = 1e-12);
        // Image y grows downward, image x grows to the right of the view direction.
        assert!(cam.to_camera(&up)[1] < 0.0);
        let right = Vector3::new(-1.0, 0.0, 0.0);
        assert!(cam.to_camera(&right)[0] > 0.0);
    }

    #[test]
    fn camera_validation() {
        let r = Matrix3::identity();
        assert!(Camera::new(8, 8, -1.0, 1.0, 4.0, 4.0, r, Vector3::zeros()).is_err());
        assert!(Camera::new(8, 8, 1.0, 1.0, 8.0, 4.0, r, Vector3::zeros()).is_err());
        assert!(Camera::new(8, 8, 1.0, 1.0, 4.0, 4.0, r * 1.01, Vector3::zeros()).is_err());
    }

    #[test]
    fn split_every_sixth_of_eighteen() {
        let s = Split::every_kth(18, 6);
        assert_eq!(s.train.len(), 15);
        assert_eq!(s.test, vec![0, 6, 12]);
    }

    #[test]
    fn retain_mask_keeps_arrays_aligned() {
        let mut c = GaussianCloud::new();
        for i in 0..4 {
            let mut g = unit_gaussian();
            g.opacity_logit = i as f64;
            c.push(g);
        }
        c.retain_mask(&[true, false, true, false]);
        c.validate().unwrap();
        assert_eq!(c.opacity_logits, vec![0.0, 2.0]);
    }
}
