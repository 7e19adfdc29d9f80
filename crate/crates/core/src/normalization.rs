//! Token-wise LayerNorm, per-sample LayerNorm, and the rescaling variant
//! that re-injects the per-sample statistics after the wrapped block.
//!
//! `RescaleNorm` is split in two halves so the caller can run an arbitrary
//! block between them:
//!
//! ```text
//! (x̂, pair) = rescalenorm_begin(x)
//! ŷ         = F(x̂)
//! y         = rescalenorm_end(ŷ, pair)   // ŷ·(σW_γ + B_γ) + (μW_β + B_β)
//! ```

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{reduce_stats, AxisStats, Axes, Tensor, NORM_EPS};

/// Learned per-channel affine applied right after standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

impl NormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
        }
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.scale.len() != channels || self.shift.len() != channels {
            return Err(Error::shape(format!(
                "norm params sized {}/{} for {channels} channels",
                self.scale.len(),
                self.shift.len()
            )));
        }
        Ok(())
    }
}

/// Maps the saved `(σ, μ)` of each sample to an output scale and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct RescaleWeights {
    pub w_gamma: Vec<f32>,
    pub b_gamma: Vec<f32>,
    pub w_beta: Vec<f32>,
    pub b_beta: Vec<f32>,
}

impl RescaleWeights {
    /// Initial state: the outer rescale is the identity.
    pub fn init(channels: usize) -> Self {
        Self {
            w_gamma: vec![0.0; channels],
            b_gamma: vec![1.0; channels],
            w_beta: vec![0.0; channels],
            b_beta: vec![0.0; channels],
        }
    }

    fn check(&self, channels: usize) -> Result<()> {
        let ok = [&self.w_gamma, &self.b_gamma, &self.w_beta, &self.b_beta]
            .iter()
            .all(|v| v.len() == channels);
        if !ok {
            return Err(Error::shape(format!("rescale weights not sized for {channels} channels")));
        }
        Ok(())
    }
}

/// Per-`(sample, channel)` output scale and bias, row-major `b×c`.
#[derive(Debug, Clone, PartialEq)]
pub struct RescalePair {
    pub batch: usize,
    pub channels: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl RescalePair {
    pub fn identity(batch: usize, channels: usize) -> Self {
        Self {
            batch,
            channels,
            gamma: vec![1.0; batch * channels],
            beta: vec![0.0; batch * channels],
        }
    }
}

fn standardize(x: &Tensor, p: &NormParams, axes: Axes) -> Result<(Tensor, AxisStats)> {
    let c = x.channels();
    p.check(c)?;
    let stats = reduce_stats(x, axes, NORM_EPS);
    let group = match axes {
        Axes::Channel => c,
        Axes::SpaceChannel => x.height() * x.width() * c,
    };
    let mut out = x.clone();
    out.data_mut()
        .par_chunks_mut(group)
        .zip(stats.mean.par_iter().zip(stats.std.par_iter()))
        .for_each(|(g, (&mean, &std))| {
            for px in g.chunks_exact_mut(c) {
                for ((v, &s), &b) in px.iter_mut().zip(&p.scale).zip(&p.shift) {
                    *v = (((*v as f64 - mean) / std) * s as f64 + b as f64) as f32;
                }
            }
        });
    Ok((out, stats))
}

/// Standardizes every token over its channels.
pub fn layernorm_token(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    standardize(x, p, Axes::Channel).map(|(t, _)| t)
}

/// Standardizes every sample over all of `h·w·c` and returns the statistics used.
pub fn layernorm_sample(x: &Tensor, p: &NormParams) -> Result<(Tensor, AxisStats)> {
    standardize(x, p, Axes::SpaceChannel)
}

pub fn rescalenorm_begin(x: &Tensor, p: &NormParams, w: &RescaleWeights) -> Result<(Tensor, RescalePair)> {
    let c = x.channels();
    w.check(c)?;
    let (normed, stats) = layernorm_sample(x, p)?;
    let b = x.batch();
    let mut gamma = Vec::with_capacity(b * c);
    let mut beta = Vec::with_capacity(b * c);
    for (&mean, &std) in stats.mean.iter().zip(&stats.std) {
        for ch in 0..c {
            gamma.push((std * w.w_gamma[ch] as f64 + w.b_gamma[ch] as f64) as f32);
            beta.push((mean * w.w_beta[ch] as f64 + w.b_beta[ch] as f64) as f32);
        }
    }
    Ok((
        normed,
        RescalePair {
            batch: b,
            channels: c,
            gamma,
            beta,
        },
    ))
}

pub fn rescalenorm_end(y: &Tensor, r: &RescalePair) -> Result<Tensor> {
    let [b, h, w, c] = y.shape();
    if b != r.batch || c != r.channels {
        return Err(Error::shape(format!(
            "rescale pair is {}x{}, feature map is {b}x..x{c}",
            r.batch, r.channels
        )));
    }
    let mut out = y.clone();
    out.data_mut()
        .par_chunks_mut(h * w * c)
        .enumerate()
        .for_each(|(bi, sample)| {
            let gamma = &r.gamma[bi * c..(bi + 1) * c];
            let beta = &r.beta[bi * c..(bi + 1) * c];
            for px in sample.chunks_exact_mut(c) {
                for ((v, &g), &be) in px.iter_mut().zip(gamma).zip(beta) {
                    *v = *v * g + be;
                }
            }
        });
    Ok(out)
}
