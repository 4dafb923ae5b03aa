//! Screen-space projection and tile-parallel front-to-back alpha blending.
//!
//! Forward, per pixel, over splats sorted by camera depth:
//!
//! ```text
//! a_i = o_i * exp(-1/2 d^T conic_i d)          (skipped when a_i < 1/255)
//! C   = sum_i c_i a_i T_i + T_final * background
//! D   = sum_i z_i a_i T_i
//! T_{i+1} = T_i (1 - a_i)                       (stop before T drops under 1e-4)
//! ```
//!
//! The forward pass stores, per pixel, the exact list of contributors with
//! their evaluated alpha and prefix transmittance; [`blend_backward`] replays
//! that list in reverse instead of re-rasterizing, and [`project_backward`]
//! carries screen-space gradients back to the 3D attributes.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{quat_to_matrix, quat_to_matrix_backward, Camera, GaussianCloud, Image, ScalarMap};

pub const NEAR_PLANE: f64 = 0.01;
pub const COV_DILATION: f64 = 0.3;
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const DEFAULT_TILE_SIZE: usize = 16;

/// A Gaussian after projection to the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected2D {
    pub gaussian_id: usize,
    /// Pixel coordinates of the projected mean.
    pub mean2d: [f64; 2],
    /// Screen covariance `(xx, xy, yy)` including the dilation.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d`, `(xx, xy, yy)`.
    pub conic: [f64; 3],
    /// Camera-frame z of the mean.
    pub depth: f64,
    pub opacity: f64,
    /// Color blended for this splat; branch dependent.
    pub color: [f64; 3],
    /// Half-size of the pixel box outside which `a_i < 1/255`; zero when the splat can never contribute.
    pub radius: f64,
    pub cam_pos: [f64; 3],
    /// `ln(MIN_ALPHA / opacity)`: the Gaussian exponent below which the splat cannot contribute.
    pub min_power: f64,
}

impl Projected2D {
    /// Inclusive pixel range `(x0, y0, x1, y1)` covered by the splat, clipped to the image.
    pub fn pixel_bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        if self.radius <= 0.0 {
            return None;
        }
        // Pixel centers sit at integer + 0.5.
        let x0 = (self.mean2d[0] - self.radius - 0.5).ceil();
        let x1 = (self.mean2d[0] + self.radius - 0.5).floor();
        let y0 = (self.mean2d[1] - self.radius - 0.5).ceil();
        let y1 = (self.mean2d[1] + self.radius - 0.5).floor();
        if x1 < 0.0 || y1 < 0.0 || x0 > (width - 1) as f64 || y0 > (height - 1) as f64 || x0 > x1 || y0 > y1 {
            return None;
        }
        Some((
            x0.max(0.0) as usize,
            y0.max(0.0) as usize,
            (x1 as usize).min(width - 1),
            (y1 as usize).min(height - 1),
        ))
    }
}

/// Projects every Gaussian in front of the near plane and sorts by `(depth, gaussian_id)`.
///
/// The returned splats carry the decoded base color; callers resolve branch colors afterwards.
pub fn project(cloud: &GaussianCloud, camera: &Camera) -> Result<Vec<Projected2D>> {
    cloud.validate()?;
    let mut out = Vec::with_capacity(cloud.count());
    for i in 0..cloud.count() {
        let t = camera.to_camera(&cloud.position(i));
        if t.z <= NEAR_PLANE {
            continue;
        }
        let r = quat_to_matrix(cloud.rotations[i]).ok_or(Error::DegenerateRotation { index: i })?;
        let m = r * Matrix3::from_diagonal(&cloud.scale(i));
        let sigma_cam = camera.rotation * (m * m.transpose()) * camera.rotation.transpose();
        let j = ewa_jacobian(camera, &t);
        let cov = j * sigma_cam * j.transpose();
        let cov2d = [cov[(0, 0)] + COV_DILATION, cov[(0, 1)], cov[(1, 1)] + COV_DILATION];
        let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
        let conic = [cov2d[2] / det, -cov2d[1] / det, cov2d[0] / det];
        let opacity = cloud.opacity(i);

        let half = 0.5 * (cov2d[0] - cov2d[2]);
        let lambda_max = 0.5 * (cov2d[0] + cov2d[2]) + (half * half + cov2d[1] * cov2d[1]).sqrt();
        let radius = if opacity > MIN_ALPHA {
            (2.0 * (opacity / MIN_ALPHA).ln() * lambda_max).sqrt()
        } else {
            0.0
        };

        out.push(Projected2D {
            gaussian_id: i,
            mean2d: [camera.fx * t.x / t.z + camera.cx, camera.fy * t.y / t.z + camera.cy],
            cov2d,
            conic,
            depth: t.z,
            opacity,
            color: cloud.base_colors[i],
            radius,
            cam_pos: [t.x, t.y, t.z],
            min_power: (MIN_ALPHA / opacity).ln(),
        });
    }
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.gaussian_id.cmp(&b.gaussian_id)));
    Ok(out)
}

#[inline]
fn ewa_jacobian(camera: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * t.x * iz2,
        0.0,
        camera.fy * iz,
        -camera.fy * t.y * iz2,
    )
}

/// One entry of a pixel's contributor list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    /// Index into the owning tile's splat list.
    pub local: u32,
    pub alpha: f64,
    /// Transmittance in front of this contributor.
    pub transmittance: f64,
}

#[derive(Debug, Clone)]
pub struct TileRecord {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    /// Indices into the projected list, in blending order.
    pub splats: Vec<u32>,
    /// `offsets[p]..offsets[p + 1]` are the contributors of local pixel `p`.
    pub offsets: Vec<u32>,
    pub entries: Vec<Contribution>,
    pub final_transmittance: Vec<f64>,
}

/// Per-pixel blending state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BlendRecord {
    pub tile_size: usize,
    pub splat_count: usize,
    pub background: [f64; 3],
    pub tiles: Vec<TileRecord>,
}

impl BlendRecord {
    /// Contributors of pixel `(x, y)` as `(projected index, alpha, transmittance)`.
    pub fn contributors(&self, x: usize, y: usize) -> Vec<(usize, f64, f64)> {
        let tiles_x = self.tiles.iter().filter(|t| t.y0 == 0).count();
        let tile = &self.tiles[(y / self.tile_size) * tiles_x + x / self.tile_size];
        let p = (y - tile.y0) * tile.w + (x - tile.x0);
        tile.entries[tile.offsets[p] as usize..tile.offsets[p + 1] as usize]
            .iter()
            .map(|e| (tile.splats[e.local as usize] as usize, e.alpha, e.transmittance))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: Image,
    pub depth: ScalarMap,
    pub alpha: ScalarMap,
    pub record: BlendRecord,
}

/// Alpha-blends sorted splats; `tile_size` only changes scheduling, never the result.
pub fn blend(
    projected: &[Projected2D],
    camera: &Camera,
    background: [f64; 3],
    tile_size: usize,
) -> Result<RenderOutput> {
    check_blend_inputs(projected, tile_size)?;
    let (width, height) = (camera.width, camera.height);
    let tiles_x = width.div_ceil(tile_size);
    let bins = bin_splats(projected, width, height, tile_size);

    let tiles: Vec<(TileRecord, Vec<[f64; 5]>)> = bins
        .into_par_iter()
        .enumerate()
        .map(|(t, splats)| {
            let x0 = (t % tiles_x) * tile_size;
            let y0 = (t / tiles_x) * tile_size;
            let w = tile_size.min(width - x0);
            let h = tile_size.min(height - y0);
            blend_tile(projected, splats, x0, y0, w, h, background)
        })
        .collect();

    let mut color = Image::new(width, height);
    let mut depth = ScalarMap::new(width, height);
    let mut alpha = ScalarMap::new(width, height);
    let mut records = Vec::with_capacity(tiles.len());
    for (rec, pixels) in tiles {
        for ly in 0..rec.h {
            for lx in 0..rec.w {
                let px = &pixels[ly * rec.w + lx];
                let g = (rec.y0 + ly) * width + rec.x0 + lx;
                color.data[g * 3..g * 3 + 3].copy_from_slice(&px[..3]);
                depth.data[g] = px[3];
                alpha.data[g] = px[4];
            }
        }
        records.push(rec);
    }

    Ok(RenderOutput {
        color,
        depth,
        alpha,
        record: BlendRecord {
            tile_size,
            splat_count: projected.len(),
            background,
            tiles: records,
        },
    })
}

fn blend_tile(
    projected: &[Projected2D],
    splats: Vec<u32>,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    background: [f64; 3],
) -> (TileRecord, Vec<[f64; 5]>) {
    let mut offsets = Vec::with_capacity(w * h + 1);
    let mut entries = Vec::new();
    let mut final_t = Vec::with_capacity(w * h);
    let mut pixels = Vec::with_capacity(w * h);
    offsets.push(0u32);
    let kernels = pack(projected, &splats);

    let mut spans = Vec::with_capacity(kernels.len());
    for ly in 0..h {
        let py = (y0 + ly) as f64 + 0.5;
        row_spans(&kernels, x0, w, py, &mut spans);
        for lx in 0..w {
            let px = (x0 + lx) as f64 + 0.5;
            let (c, d, t) = blend_pixel(&kernels, &spans, lx as u32, px, py, |local, a, t| {
                entries.push(Contribution {
                    local,
                    alpha: a,
                    transmittance: t,
                })
            });
            offsets.push(entries.len() as u32);
            final_t.push(t);
            pixels.push([
                c[0] + t * background[0],
                c[1] + t * background[1],
                c[2] + t * background[2],
                d,
                1.0 - t,
            ]);
        }
    }

    (
        TileRecord {
            x0,
            y0,
            w,
            h,
            splats,
            offsets,
            entries,
            final_transmittance: final_t,
        },
        pixels,
    )
}

/// The fields of one splat the per-pixel loop reads, packed contiguously.
#[derive(Clone, Copy)]
struct Kernel {
    mean: [f64; 2],
    conic: [f64; 3],
    /// `min_power` less a margin that keeps the early skip exactly
    /// equivalent to the test on the evaluated alpha.
    skip_below: f64,
    opacity: f64,
    color: [f64; 3],
    depth: f64,
}

fn pack(projected: &[Projected2D], splats: &[u32]) -> Vec<Kernel> {
    splats
        .iter()
        .map(|&slot| {
            let s = &projected[slot as usize];
            Kernel {
                mean: s.mean2d,
                conic: s.conic,
                skip_below: s.min_power - 1e-6,
                opacity: s.opacity,
                color: s.color,
                depth: s.depth,
            }
        })
        .collect()
}

/// Front-to-back compositing of one pixel over a tile's splats; returns the
/// accumulated color, depth and final transmittance and reports every
/// contributor as `(local index, alpha, transmittance in front)`.
#[inline(always)]
fn blend_pixel(
    kernels: &[Kernel],
    spans: &[Span],
    lx: u32,
    px: f64,
    py: f64,
    mut contribute: impl FnMut(u32, f64, f64),
) -> ([f64; 3], f64, f64) {
    let mut t = 1.0;
    let mut c = [0.0; 3];
    let mut d = 0.0;
    for span in spans {
        if lx < span.lo || lx > span.hi {
            continue;
        }
        let s = &kernels[span.local as usize];
        let dx = px - s.mean[0];
        let dy = py - s.mean[1];
        let power = -0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
        if power < s.skip_below {
            continue;
        }
        let a = s.opacity * power.exp();
        if a < MIN_ALPHA {
            continue;
        }
        let next_t = t * (1.0 - a);
        if next_t < MIN_TRANSMITTANCE {
            break;
        }
        let wgt = a * t;
        c[0] += s.color[0] * wgt;
        c[1] += s.color[1] * wgt;
        c[2] += s.color[2] * wgt;
        d += s.depth * wgt;
        contribute(span.local, a, t);
        t = next_t;
    }
    (c, d, t)
}

/// Tile-local pixel columns `lo..=hi` of one row that a kernel may reach.
#[derive(Clone, Copy)]
struct Span {
    local: u32,
    lo: u32,
    hi: u32,
}

/// Fills `spans` with the kernels that may contribute somewhere on the pixel
/// row at height `py`, in blending order.
///
/// The interval solves `power >= skip_below - 1e-3` for the column offset, a
/// strictly larger ellipse than the skip test in [`blend_pixel`], so culling a
/// column never changes a result.
fn row_spans(kernels: &[Kernel], x0: usize, w: usize, py: f64, spans: &mut Vec<Span>) {
    spans.clear();
    let last = (w - 1) as f64;
    for (local, k) in kernels.iter().enumerate() {
        let dy = py - k.mean[1];
        let (a, b) = (k.conic[0], k.conic[1] * dy);
        let rest = k.conic[2] * dy * dy + 2.0 * (k.skip_below - 1e-3);
        let disc = b * b - a * rest;
        if disc < 0.0 {
            continue;
        }
        let reach = disc.sqrt() / a;
        let center = k.mean[0] - b / a - 0.5 - x0 as f64;
        let lo = (center - reach - 1e-6).ceil().max(0.0);
        let hi = (center + reach + 1e-6).floor().min(last);
        if lo > hi {
            continue;
        }
        spans.push(Span {
            local: local as u32,
            lo: lo as u32,
            hi: hi as u32,
        });
    }
}

/// Image-only output of [`composite`].
#[derive(Debug, Clone)]
pub struct Composite {
    pub color: Image,
    pub depth: ScalarMap,
    pub alpha: ScalarMap,
}

/// Forward-only [`blend`]: the same images, bit for bit, without the record
/// the backward pass needs.
pub fn composite(projected: &[Projected2D], camera: &Camera, background: [f64; 3], tile_size: usize) -> Result<Composite> {
    check_blend_inputs(projected, tile_size)?;
    let (width, height) = (camera.width, camera.height);
    let tiles_x = width.div_ceil(tile_size);
    let bins = bin_splats(projected, width, height, tile_size);
    let tiles: Vec<Vec<[f64; 5]>> = bins
        .into_par_iter()
        .enumerate()
        .map(|(t, splats)| {
            let x0 = (t % tiles_x) * tile_size;
            let y0 = (t / tiles_x) * tile_size;
            let w = tile_size.min(width - x0);
            let h = tile_size.min(height - y0);
            let kernels = pack(projected, &splats);
            let mut pixels = Vec::with_capacity(w * h);
            let mut spans = Vec::with_capacity(kernels.len());
            for ly in 0..h {
                let py = (y0 + ly) as f64 + 0.5;
                row_spans(&kernels, x0, w, py, &mut spans);
                for lx in 0..w {
                    let px = (x0 + lx) as f64 + 0.5;
                    let (c, d, t) = blend_pixel(&kernels, &spans, lx as u32, px, py, |_, _, _| {});
                    pixels.push([
                        c[0] + t * background[0],
                        c[1] + t * background[1],
                        c[2] + t * background[2],
                        d,
                        1.0 - t,
                    ]);
                }
            }
            pixels
        })
        .collect();
    let mut out = Composite {
        color: Image::new(width, height),
        depth: ScalarMap::new(width, height),
        alpha: ScalarMap::new(width, height),
    };
    for (t, pixels) in tiles.iter().enumerate() {
        let x0 = (t % tiles_x) * tile_size;
        let y0 = (t / tiles_x) * tile_size;
        let w = tile_size.min(width - x0);
        for (p, px) in pixels.iter().enumerate() {
            let g = (y0 + p / w) * width + x0 + p % w;
            out.color.data[g * 3..g * 3 + 3].copy_from_slice(&px[..3]);
            out.depth.data[g] = px[3];
            out.alpha.data[g] = px[4];
        }
    }
    Ok(out)
}

fn check_blend_inputs(projected: &[Projected2D], tile_size: usize) -> Result<()> {
    if tile_size == 0 {
        return Err(Error::Argument("tile size must be positive".into()));
    }
    for w in projected.windows(2) {
        let ord = w[0].depth.total_cmp(&w[1].depth).then(w[0].gaussian_id.cmp(&w[1].gaussian_id));
        if ord.is_gt() {
            return Err(Error::ContractViolation(format!(
                "splats not sorted by depth: gaussian {} (z = {}) precedes gaussian {} (z = {})",
                w[0].gaussian_id, w[0].depth, w[1].gaussian_id, w[1].depth
            )));
        }
    }
    Ok(())
}

/// Lists, for every tile in row-major order, the splats overlapping it in blending order.
fn bin_splats(projected: &[Projected2D], width: usize, height: usize, tile_size: usize) -> Vec<Vec<u32>> {
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (slot, s) in projected.iter().enumerate() {
        if let Some((x0, y0, x1, y1)) = s.pixel_bounds(width, height) {
            for ty in y0 / tile_size..=y1 / tile_size {
                for tx in x0 / tile_size..=x1 / tile_size {
                    bins[ty * tiles_x + tx].push(slot as u32);
                }
            }
        }
    }
    bins
}

/// Gradients of one splat's screen-space quantities.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SplatGrad {
    pub color: [f64; 3],
    /// w.r.t. the decoded opacity.
    pub opacity: f64,
    pub opacity_logit: f64,
    pub mean2d: [f64; 2],
    /// w.r.t. `(xx, xy, yy)` of the conic; `xy` counts both off-diagonal entries.
    pub conic: [f64; 3],
    /// w.r.t. `(xx, xy, yy)` of the screen covariance; `xy` counts both off-diagonal entries.
    pub cov2d: [f64; 3],
    /// w.r.t. the camera-frame z used for the depth map (callers may add other z dependencies).
    pub depth: f64,
}

/// Replays the blend record in reverse; returns one gradient per projected splat.
pub fn blend_backward(
    output: &RenderOutput,
    projected: &[Projected2D],
    grad_color: &[f64],
    grad_depth: &[f64],
) -> Result<Vec<SplatGrad>> {
    let (width, height) = (output.color.width, output.color.height);
    if output.record.splat_count != projected.len() {
        return Err(Error::ContractViolation(format!(
            "blend record covers {} splats but {} were supplied",
            output.record.splat_count,
            projected.len()
        )));
    }
    if grad_color.len() != width * height * 3 || grad_depth.len() != width * height {
        return Err(Error::ContractViolation(format!(
            "upstream gradients ({} color, {} depth) do not match a {width}x{height} render",
            grad_color.len(),
            grad_depth.len()
        )));
    }
    let bg = output.record.background;

    let partials: Vec<Vec<SplatGrad>> = output
        .record
        .tiles
        .par_iter()
        .map(|tile| {
            let mut local = vec![SplatGrad::default(); tile.splats.len()];
            for ly in 0..tile.h {
                let py = (tile.y0 + ly) as f64 + 0.5;
                for lx in 0..tile.w {
                    let px = (tile.x0 + lx) as f64 + 0.5;
                    let p = ly * tile.w + lx;
                    let g = (tile.y0 + ly) * width + tile.x0 + lx;
                    let gc = [grad_color[g * 3], grad_color[g * 3 + 1], grad_color[g * 3 + 2]];
                    let gd = grad_depth[g];
                    let range = tile.offsets[p] as usize..tile.offsets[p + 1] as usize;
                    if range.is_empty() || (gc == [0.0; 3] && gd == 0.0) {
                        continue;
                    }
                    // dL/dT for the transmittance behind the current contributor.
                    let mut g_t = gc[0] * bg[0] + gc[1] * bg[1] + gc[2] * bg[2];
                    for e in tile.entries[range].iter().rev() {
                        let s = &projected[tile.splats[e.local as usize] as usize];
                        let acc = &mut local[e.local as usize];
                        let (a, t) = (e.alpha, e.transmittance);
                        let w = a * t;
                        let cdot = s.color[0] * gc[0] + s.color[1] * gc[1] + s.color[2] * gc[2] + s.depth * gd;
                        let d_alpha = t * (cdot - g_t);
                        g_t = a * cdot + g_t * (1.0 - a);

                        acc.color[0] += gc[0] * w;
                        acc.color[1] += gc[1] * w;
                        acc.color[2] += gc[2] * w;
                        acc.depth += gd * w;
                        acc.opacity += d_alpha * (a / s.opacity);

                        let d_power = d_alpha * a;
                        let dx = px - s.mean2d[0];
                        let dy = py - s.mean2d[1];
                        acc.mean2d[0] += d_power * (s.conic[0] * dx + s.conic[1] * dy);
                        acc.mean2d[1] += d_power * (s.conic[1] * dx + s.conic[2] * dy);
                        acc.conic[0] += -0.5 * d_power * dx * dx;
                        acc.conic[1] += -d_power * dx * dy;
                        acc.conic[2] += -0.5 * d_power * dy * dy;
                    }
                }
            }
            local
        })
        .collect();

    let mut grads = vec![SplatGrad::default(); projected.len()];
    for (tile, local) in output.record.tiles.iter().zip(partials) {
        for (&slot, l) in tile.splats.iter().zip(local) {
            let g = &mut grads[slot as usize];
            for k in 0..3 {
                g.color[k] += l.color[k];
                g.conic[k] += l.conic[k];
            }
            g.mean2d[0] += l.mean2d[0];
            g.mean2d[1] += l.mean2d[1];
            g.opacity += l.opacity;
            g.depth += l.depth;
        }
    }

    for (g, s) in grads.iter_mut().zip(projected) {
        g.opacity_logit = g.opacity * s.opacity * (1.0 - s.opacity);
        let conic = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
        let g_conic = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
        let g_cov = -(conic * g_conic * conic);
        g.cov2d = [g_cov[(0, 0)], 2.0 * g_cov[(0, 1)], g_cov[(1, 1)]];
    }
    Ok(grads)
}

/// Pulls splat gradients back to positions, rotations, log-scales and opacity logits.
///
/// Gradients are added into `grad` (a cloud-shaped accumulator).
pub fn project_backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    projected: &[Projected2D],
    splat_grads: &[SplatGrad],
    grad: &mut GaussianCloud,
) -> Result<()> {
    if projected.len() != splat_grads.len() {
        return Err(Error::ContractViolation(format!(
            "{} splat gradients for {} splats",
            splat_grads.len(),
            projected.len()
        )));
    }
    let w = camera.rotation;
    for (s, g) in projected.iter().zip(splat_grads) {
        let i = s.gaussian_id;
        let t = Vector3::from(s.cam_pos);
        let (fx, fy) = (camera.fx, camera.fy);
        let iz = 1.0 / t.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;

        let mut d_t = Vector3::new(
            g.mean2d[0] * fx * iz,
            g.mean2d[1] * fy * iz,
            -g.mean2d[0] * fx * t.x * iz2 - g.mean2d[1] * fy * t.y * iz2 + g.depth,
        );

        let q = cloud.rotations[i];
        let r = quat_to_matrix(q).ok_or(Error::DegenerateRotation { index: i })?;
        let scale = cloud.scale(i);
        let m = r * Matrix3::from_diagonal(&scale);
        let sigma_cam = w * (m * m.transpose()) * w.transpose();
        let j = ewa_jacobian(camera, &t);

        let g_cov = Matrix2::new(g.cov2d[0], 0.5 * g.cov2d[1], 0.5 * g.cov2d[1], g.cov2d[2]);
        let d_sigma_cam = j.transpose() * g_cov * j;
        let d_j = 2.0 * g_cov * j * sigma_cam;

        d_t.x += d_j[(0, 2)] * (-fx * iz2);
        d_t.y += d_j[(1, 2)] * (-fy * iz2);
        d_t.z += d_j[(0, 0)] * (-fx * iz2)
            + d_j[(0, 2)] * (2.0 * fx * t.x * iz3)
            + d_j[(1, 1)] * (-fy * iz2)
            + d_j[(1, 2)] * (2.0 * fy * t.y * iz3);

        let d_sigma = w.transpose() * d_sigma_cam * w;
        let d_m = 2.0 * d_sigma * m;
        let d_r = d_m * Matrix3::from_diagonal(&scale);
        let rt_dm = r.transpose() * d_m;
        let dq = quat_to_matrix_backward(q, &d_r);

        let d_pos = w.transpose() * d_t;
        for k in 0..3 {
            grad.positions[i][k] += d_pos[k];
            grad.log_scales[i][k] += rt_dm[(k, k)] * scale[k];
        }
        for k in 0..4 {
            grad.rotations[i][k] += dq[k];
        }
        grad.opacity_logits[i] += g.opacity_logit;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{logit, Gaussian};
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    fn axis_camera(size: usize, focal: f64) -> Camera {
        Camera::new(
            size,
            size,
            focal,
            focal,
            size as f64 / 2.0,
            size as f64 / 2.0,
            Matrix3::identity(),
            Vector3::zeros(),
        )
        .unwrap()
    }

    fn gaussian(pos: [f64; 3], scale: f64, opacity: f64, color: [f64; 3]) -> Gaussian {
        Gaussian {
            position: pos,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [scale.ln(); 3],
            opacity_logit: logit(opacity),
            base_color: color,
            atten_raw: [0.0; 3],
            backsc_raw: [0.0; 3],
            veil_raw: [0.0; 3],
        }
    }

    #[test]
    fn empty_cloud_projects_to_nothing() {
        let out = project(&GaussianCloud::new(), &axis_camera(8, 10.0)).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn on_axis_isotropic_covariance() {
        let (z, s, f) = (4.0, 0.25, 30.0);
        let mut c = GaussianCloud::new();
        c.push(gaussian([0.0, 0.0, z], s, 0.9, [1.0; 3]));
        let p = project(&c, &axis_camera(16, f)).unwrap();
        // On the axis J = diag(f/z, f/z) with a zero third column.
        let expect = (f * s / z).powi(2) + COV_DILATION;
        assert_relative_eq!(p[0].cov2d[0], expect, epsilon = 1e-12);
        assert_relative_eq!(p[0].cov2d[2], expect, epsilon = 1e-12);
        assert_relative_eq!(p[0].cov2d[1], 0.0, epsilon = 1e-12);
        assert_eq!(p[0].mean2d, [8.0, 8.0]);
    }

    #[test]
    fn behind_camera_is_culled() {
        let mut c = GaussianCloud::new();
        c.push(gaussian([0.0, 0.0, -1.0], 0.1, 0.9, [1.0; 3]));
        c.push(gaussian([0.0, 0.0, 0.005], 0.1, 0.9, [1.0; 3]));
        assert!(project(&c, &axis_camera(8, 10.0)).unwrap().is_empty());
    }

    #[test]
    fn zero_gaussians_give_background() {
        let cam = axis_camera(8, 10.0);
        let out = blend(&[], &cam, [0.1, 0.2, 0.3], 4).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.color.pixel(x, y), [0.1, 0.2, 0.3]);
                assert_eq!(out.alpha.get(x, y), 0.0);
                assert_eq!(out.depth.get(x, y), 0.0);
            }
        }
    }

    #[test]
    fn single_gaussian_pixel_matches_scalar_evaluation() {
        let cam = axis_camera(9, 12.0);
        let mut c = GaussianCloud::new();
        c.push(gaussian([0.05, -0.02, 3.0], 0.3, 0.8, [0.9, 0.5, 0.2]));
        let p = project(&c, &cam).unwrap();
        let out = blend(&p, &cam, [0.0; 3], 16).unwrap();

        // Scalar oracle at pixel (4, 4): one term of the blending sums.
        let s = &p[0];
        let (dx, dy) = (4.5 - s.mean2d[0], 4.5 - s.mean2d[1]);
        let det = s.cov2d[0] * s.cov2d[2] - s.cov2d[1] * s.cov2d[1];
        let q = (s.cov2d[2] * dx * dx - 2.0 * s.cov2d[1] * dx * dy + s.cov2d[0] * dy * dy) / det;
        let a = 0.8 * (-0.5 * q).exp();
        let px = out.color.pixel(4, 4);
        assert_relative_eq!(px[0], 0.9 * a, epsilon = 1e-12);
        assert_relative_eq!(px[2], 0.2 * a, epsilon = 1e-12);
        assert_relative_eq!(out.depth.get(4, 4), 3.0 * a, epsilon = 1e-12);
        assert_relative_eq!(out.alpha.get(4, 4), a, epsilon = 1e-12);
    }

    #[test]
    fn transparent_front_gaussian_is_invisible() {
        let cam = axis_camera(12, 14.0);
        let mut both = GaussianCloud::new();
        both.push(gaussian([0.0, 0.0, 2.0], 0.3, 0.0, [1.0, 0.0, 0.0]));
        both.push(gaussian([0.1, 0.0, 3.0], 0.4, 0.7, [0.2, 0.6, 0.4]));
        let mut back = GaussianCloud::new();
        back.push(both.get(1));
        let a = blend(&project(&both, &cam).unwrap(), &cam, [0.0; 3], 16).unwrap();
        let b = blend(&project(&back, &cam).unwrap(), &cam, [0.0; 3], 16).unwrap();
        assert_eq!(a.color, b.color);
        assert_eq!(a.depth, b.depth);
    }

    #[test]
    fn unsorted_input_is_rejected() {
        let cam = axis_camera(8, 10.0);
        let mut c = GaussianCloud::new();
        c.push(gaussian([0.0, 0.0, 2.0], 0.3, 0.5, [1.0; 3]));
        c.push(gaussian([0.0, 0.0, 3.0], 0.3, 0.5, [1.0; 3]));
        let mut p = project(&c, &cam).unwrap();
        p.swap(0, 1);
        assert!(matches!(blend(&p, &cam, [0.0; 3], 8), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cam = axis_camera(8, 10.0);
        let mut c = GaussianCloud::new();
        c.push(gaussian([0.0, 0.0, 2.0], 0.3, 0.5, [1.0; 3]));
        let p = project(&c, &cam).unwrap();
        let out = blend(&p, &cam, [0.0; 3], 8).unwrap();
        let g = blend_backward(&out, &p, &vec![0.0; 8 * 8 * 3], &vec![0.0; 64]).unwrap();
        assert_eq!(g[0], SplatGrad::default());
    }

    #[test]
    fn single_gaussian_color_gradient_is_blend_weight() {
        let cam = axis_camera(8, 10.0);
        let mut c = GaussianCloud::new();
        c.push(gaussian([0.0, 0.0, 2.0], 0.3, 0.6, [0.3, 0.4, 0.5]));
        let p = project(&c, &cam).unwrap();
        let out = blend(&p, &cam, [0.0; 3], 8).unwrap();
        // Upstream gradient only at pixel (3, 5), channel 1.
        let mut gc = vec![0.0; 8 * 8 * 3];
        gc[(5 * 8 + 3) * 3 + 1] = 1.0;
        let g = blend_backward(&out, &p, &gc, &vec![0.0; 64]).unwrap();
        let contrib = out.record.contributors(3, 5);
        let (_, a, t) = contrib[0];
        assert_relative_eq!(g[0].color[1], a * t, epsilon = 1e-15);
        assert_eq!(g[0].color[0], 0.0);
    }

    #[test]
    fn mismatched_upstream_is_rejected() {
        let cam = axis_camera(8, 10.0);
        let out = blend(&[], &cam, [0.0; 3], 8).unwrap();
        assert!(blend_backward(&out, &[], &[0.0; 3], &[0.0; 64]).is_err());
    }
}
