//! Evaluation metrics: PSNR, SSIM, CIEDE2000 and mean angular error over color-chart patches.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::Image;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;
/// Patches per color chart.
pub const CHART_PATCHES: usize = 12;

/// `10 log10(1 / MSE)` over all samples, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Argument(format!(
            "PSNR inputs differ in shape ({}x{} vs {}x{})",
            a.width, a.height, b.width, b.height
        )));
    }
    let n = a.data.len().max(1) as f64;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM; the same implementation backs the training loss.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    crate::ssim::ssim(a, b)
}

/// CIELAB color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lab {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// D65 reference white, Y normalized to 1.
const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

/// sRGB in `[0, 1]` to CIELAB under D65.
pub fn srgb_to_lab(rgb: [f64; 3]) -> Lab {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let eps = 216.0 / 24389.0;
    let kappa = 24389.0 / 27.0;
    let f = |t: f64| if t > eps { t.cbrt() } else { (kappa * t + 16.0) / 116.0 };
    let (fx, fy, fz) = (f(x / WHITE[0]), f(y / WHITE[1]), f(z / WHITE[2]));
    Lab {
        l: 116.0 * fy - 16.0,
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

/// CIEDE2000 between two Lab colors with unit weighting factors.
pub fn delta_e2000_lab(c1: Lab, c2: Lab) -> f64 {
    use std::f64::consts::PI;
    let deg = |r: f64| r * 180.0 / PI;
    let rad = |d: f64| d * PI / 180.0;
    let pow7 = |v: f64| v.powi(7);

    let c_ab1 = c1.a.hypot(c1.b);
    let c_ab2 = c2.a.hypot(c2.b);
    let c_mean = (c_ab1 + c_ab2) / 2.0;
    let g = 0.5 * (1.0 - (pow7(c_mean) / (pow7(c_mean) + pow7(25.0))).sqrt());
    let a1 = (1.0 + g) * c1.a;
    let a2 = (1.0 + g) * c2.a;
    let cp1 = a1.hypot(c1.b);
    let cp2 = a2.hypot(c2.b);
    let hue = |b: f64, a: f64| {
        if a == 0.0 && b == 0.0 {
            0.0
        } else {
            let h = deg(b.atan2(a));
            if h < 0.0 {
                h + 360.0
            } else {
                h
            }
        }
    };
    let hp1 = hue(c1.b, a1);
    let hp2 = hue(c2.b, a2);

    let dl = c2.l - c1.l;
    let dc = cp2 - cp1;
    let chroma_product = cp1 * cp2;
    let dh_angle = if chroma_product == 0.0 {
        0.0
    } else {
        let d = hp2 - hp1;
        if d > 180.0 {
            d - 360.0
        } else if d < -180.0 {
            d + 360.0
        } else {
            d
        }
    };
    let dh = 2.0 * chroma_product.sqrt() * (rad(dh_angle) / 2.0).sin();

    let l_mean = (c1.l + c2.l) / 2.0;
    let cp_mean = (cp1 + cp2) / 2.0;
    let hp_mean = if chroma_product == 0.0 {
        hp1 + hp2
    } else if (hp1 - hp2).abs() <= 180.0 {
        (hp1 + hp2) / 2.0
    } else if hp1 + hp2 < 360.0 {
        (hp1 + hp2 + 360.0) / 2.0
    } else {
        (hp1 + hp2 - 360.0) / 2.0
    };
    let t = 1.0 - 0.17 * rad(hp_mean - 30.0).cos() + 0.24 * rad(2.0 * hp_mean).cos()
        + 0.32 * rad(3.0 * hp_mean + 6.0).cos()
        - 0.20 * rad(4.0 * hp_mean - 63.0).cos();
    let d_theta = 30.0 * (-((hp_mean - 275.0) / 25.0).powi(2)).exp();
    let rc = 2.0 * (pow7(cp_mean) / (pow7(cp_mean) + pow7(25.0))).sqrt();
    let l50 = (l_mean - 50.0).powi(2);
    let sl = 1.0 + 0.015 * l50 / (20.0 + l50).sqrt();
    let sc = 1.0 + 0.045 * cp_mean;
    let sh = 1.0 + 0.015 * cp_mean * t;
    let rt = -(rad(2.0 * d_theta)).sin() * rc;

    let (tl, tc, th) = (dl / sl, dc / sc, dh / sh);
    (tl * tl + tc * tc + th * th + rt * tc * th).sqrt()
}

/// CIEDE2000 between two sRGB colors in `[0, 1]`.
pub fn delta_e2000(rgb1: [f64; 3], rgb2: [f64; 3]) -> f64 {
    delta_e2000_lab(srgb_to_lab(rgb1), srgb_to_lab(rgb2))
}

/// One chart patch: pixel rectangle and reference sRGB color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patch {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub reference: [f64; 3],
}

/// Color-chart layout for one evaluation image.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartSpec {
    pub patches: Vec<Patch>,
}

impl ChartSpec {
    /// Parses the sidecar format: one `x y w h r g b` line per patch; `#` starts a comment.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut patches = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() != 7 {
                return Err(Error::parse(origin, ln + 1, format!("expected 7 fields, found {}", tok.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|e| Error::parse(origin, ln + 1, format!("`{s}`: {e}")));
            let real = |s: &str| s.parse::<f64>().map_err(|e| Error::parse(origin, ln + 1, format!("`{s}`: {e}")));
            patches.push(Patch {
                x: int(tok[0])?,
                y: int(tok[1])?,
                w: int(tok[2])?,
                h: int(tok[3])?,
                reference: [real(tok[4])?, real(tok[5])?, real(tok[6])?],
            });
        }
        Ok(Self { patches })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Checks the patch count and that every rectangle is nonempty and inside `width x height`.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.patches.len() != CHART_PATCHES {
            return Err(Error::Argument(format!(
                "chart must have {CHART_PATCHES} patches, found {}",
                self.patches.len()
            )));
        }
        for (i, p) in self.patches.iter().enumerate() {
            if p.w == 0 || p.h == 0 || p.x + p.w > width || p.y + p.h > height {
                return Err(Error::Argument(format!(
                    "patch {i} ({} {} {} {}) lies outside the {width}x{height} image",
                    p.x, p.y, p.w, p.h
                )));
            }
        }
        Ok(())
    }
}

/// Mean color of each patch.
pub fn patch_means(image: &Image, chart: &ChartSpec) -> Result<Vec<[f64; 3]>> {
    chart.validate(image.width, image.height)?;
    Ok(chart
        .patches
        .iter()
        .map(|p| {
            let mut s = [0.0; 3];
            for y in p.y..p.y + p.h {
                for x in p.x..p.x + p.w {
                    let px = image.pixel(x, y);
                    for k in 0..3 {
                        s[k] += px[k];
                    }
                }
            }
            s.map(|v| v / (p.w * p.h) as f64)
        })
        .collect())
}

/// Angle in degrees between two RGB vectors.
pub fn angle_degrees(u: [f64; 3], v: [f64; 3]) -> Option<f64> {
    let nu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    let nv = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return None;
    }
    let cos = (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]) / (nu * nv);
    Some(cos.clamp(-1.0, 1.0).acos().to_degrees())
}

/// Mean over patches of the angle between the patch-mean color and its reference.
pub fn mean_angular_error(restored: &Image, chart: &ChartSpec) -> Result<f64> {
    let means = patch_means(restored, chart)?;
    let mut total = 0.0;
    for (i, (m, p)) in means.iter().zip(&chart.patches).enumerate() {
        total += angle_degrees(*m, p.reference).ok_or(Error::DegeneratePatch { patch: i })?;
    }
    Ok(total / means.len() as f64)
}

/// Mean CIEDE2000 between patch means and their references.
pub fn chart_delta_e2000(restored: &Image, chart: &ChartSpec) -> Result<f64> {
    let means = patch_means(restored, chart)?;
    let total: f64 = means
        .iter()
        .zip(&chart.patches)
        .map(|(m, p)| delta_e2000(m.map(|v| v.clamp(0.0, 1.0)), p.reference))
        .sum();
    Ok(total / means.len() as f64)
}
