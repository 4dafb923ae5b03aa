//! Structural similarity with an 11x11 Gaussian window (sigma 1.5).
//!
//! The window is applied in "valid" mode: only positions where it fits
//! entirely inside the image are scored, and the result is the mean over those
//! positions and the three channels. The same kernel backs the training loss
//! and the evaluation metric.

use crate::error::{Error, Result};
use crate::scene::Image;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

fn kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-(d * d) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| v / sum)
}

/// Separable valid-mode filter of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * row[x + i];
            }
            tmp[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `ow x oh` map back to `w x h`.
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                tmp[(y + i) * ow + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                out[y * w + x + i] += kv * v;
            }
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

fn check(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Argument(format!(
            "SSIM inputs differ in shape ({}x{} vs {}x{})",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.width < WINDOW || a.height < WINDOW {
        return Err(Error::Argument(format!(
            "image {}x{} is smaller than the {WINDOW}x{WINDOW} SSIM window",
            a.width, a.height
        )));
    }
    Ok(())
}

struct ChannelStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    e_aa: Vec<f64>,
    e_bb: Vec<f64>,
    e_ab: Vec<f64>,
}

fn stats(pa: &[f64], pb: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> ChannelStats {
    let sq = |p: &[f64]| p.iter().map(|v| v * v).collect::<Vec<_>>();
    let prod: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
    ChannelStats {
        mu_a: filter_valid(pa, w, h, k),
        mu_b: filter_valid(pb, w, h, k),
        e_aa: filter_valid(&sq(pa), w, h, k),
        e_bb: filter_valid(&sq(pb), w, h, k),
        e_ab: filter_valid(&prod, w, h, k),
    }
}

/// Mean SSIM of `a` against `b`.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// Mean SSIM and its gradient w.r.t. every sample of `a` (interleaved like `a.data`).
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    check(a, b)?;
    let (w, h) = (a.width, a.height);
    let k = kernel();
    let n_pos = (w - WINDOW + 1) * (h - WINDOW + 1);
    let count = (3 * n_pos) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; w * h * 3]);

    for c in 0..3 {
        // Second moments are taken about a common per-channel offset; this
        // leaves every variance and covariance unchanged but avoids cancellation.
        let mut pa = channel(a, c);
        let mut pb = channel(b, c);
        let shift = (pa.iter().sum::<f64>() + pb.iter().sum::<f64>()) / (2 * w * h) as f64;
        pa.iter_mut().chain(pb.iter_mut()).for_each(|v| *v -= shift);
        let st = stats(&pa, &pb, w, h, &k);
        let mut g_mu = want_grad.then(|| vec![0.0; n_pos]);
        let mut g_aa = want_grad.then(|| vec![0.0; n_pos]);
        let mut g_ab = want_grad.then(|| vec![0.0; n_pos]);
        for p in 0..n_pos {
            let (sx, sy) = (st.mu_a[p], st.mu_b[p]);
            let (mx, my) = (sx + shift, sy + shift);
            let sxx = st.e_aa[p] - sx * sx;
            let syy = st.e_bb[p] - sy * sy;
            let sxy = st.e_ab[p] - sx * sy;
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * sxy + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = sxx + syy + C2;
            let d = b1 * b2;
            let s = a1 * a2 / d;
            total += s;
            if let (Some(gm), Some(gaa), Some(gab)) = (g_mu.as_mut(), g_aa.as_mut(), g_ab.as_mut()) {
                gm[p] = 2.0 * my * a2 / d - 2.0 * s * mx / b1 + 2.0 * sx * s / b2 - 2.0 * sy * a1 / d;
                gaa[p] = -s / b2;
                gab[p] = 2.0 * a1 / d;
            }
        }
        if let (Some(g), Some(gm), Some(gaa), Some(gab)) = (grad.as_mut(), g_mu, g_aa, g_ab) {
            let f_mu = filter_valid_adjoint(&gm, w, h, &k);
            let f_aa = filter_valid_adjoint(&gaa, w, h, &k);
            let f_ab = filter_valid_adjoint(&gab, w, h, &k);
            for q in 0..w * h {
                g[q * 3 + c] = (f_mu[q] + 2.0 * pa[q] * f_aa[q] + pb[q] * f_ab[q]) / count;
            }
        }
    }
    Ok((total / count, grad))
}
