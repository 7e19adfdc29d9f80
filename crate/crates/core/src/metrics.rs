//! PSNR, SSIM and a central-difference derivative checker.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("images differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for data in `[0, 1]`; `+∞` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    if a.data().is_empty() {
        return Err(Error::shape("empty image"));
    }
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = sse / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-mode separable filtering of an `h×w` plane.
fn filter(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM over every valid 11×11 Gaussian window, channel and sample.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let [n, h, w, c] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    if n == 0 || c == 0 {
        return Err(Error::shape("empty image"));
    }
    let g = gaussian_window();
    let planes: Vec<(usize, usize)> = (0..n).flat_map(|bi| (0..c).map(move |ch| (bi, ch))).collect();
    let means: Vec<f64> = planes
        .par_iter()
        .map(|&(bi, ch)| {
            let plane = |t: &Tensor| -> Vec<f64> {
                (0..h * w).map(|i| t.get(bi, i / w, i % w, ch) as f64).collect()
            };
            let (pa, pb) = (plane(a), plane(b));
            let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
            let mu_a = filter(&pa, h, w, &g);
            let mu_b = filter(&pb, h, w, &g);
            let e_aa = filter(&prod(&pa, &pa), h, w, &g);
            let e_bb = filter(&prod(&pb, &pb), h, w, &g);
            let e_ab = filter(&prod(&pa, &pb), h, w, &g);
            let mut total = 0.0;
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let var_a = e_aa[i] - ma * ma;
                let var_b = e_bb[i] - mb * mb;
                let cov = e_ab[i] - ma * mb;
                total += ((2.0 * (ma * mb) + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2));
            }
            total / mu_a.len() as f64
        })
        .collect();
    Ok(means.iter().sum::<f64>() / means.len() as f64)
}

/// Largest `|df(x) − (f(x+h) − f(x−h)) / 2h|` over `grid`.
pub fn fd_check(f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64, grid: &[f64], step: f64) -> f64 {
    assert!(step > 0.0, "finite-difference step must be positive");
    grid.iter()
        .map(|&x| (df(x) - (f(x + step) - f(x - step)) / (2.0 * step)).abs())
        .fold(0.0, f64::max)
}

/// Evenly spaced points from `lo` to `hi` inclusive.
pub fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn compute(a: &Tensor, b: &Tensor) -> Result<Self> {
        Ok(Self {
            psnr: psnr(a, b)?,
            ssim: ssim(a, b)?,
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.psnr.is_infinite() {
            writeln!(f, "psnr=inf")?;
        } else {
            writeln!(f, "psnr={:.4}", self.psnr)?;
        }
        writeln!(f, "ssim={:.6}", self.ssim)
    }
}
