//! Invariant suites runnable outside the test harness, one line per property.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::activations::Activation;
use crate::attention::{
    attend, attention_probs, partition, reverse, wmhsa, AttentionParams, Origin, ParallelConv, RelPosBias,
    WindowLayout, WindowScheme,
};
use crate::error::{Error, Result};
use crate::hazegen::{
    hazy_value, sample_omega, synthesize, Density, MultiSpectralImage, Raster, SynthesisParams, T1_FLOOR,
};
use crate::metrics::{fd_check, grid};
use crate::network::{count_params, fusion_weights, DehazeFormer, SkFusionParams, VariantSpec, WeightStore};
use crate::normalization::{layernorm_sample, rescalenorm_begin, rescalenorm_end, NormParams, RescaleWeights};
use crate::rng::{seeded, SeededRng};
use crate::tensor::{conv2d, reflect_index, softmax_in_place, Dense, Kernel, PadMode, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Tensor,
    Activations,
    Norm,
    Attention,
    Network,
    Hazegen,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Tensor,
        Suite::Activations,
        Suite::Norm,
        Suite::Attention,
        Suite::Network,
        Suite::Hazegen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Tensor => "tensor",
            Suite::Activations => "activations",
            Suite::Norm => "norm",
            Suite::Attention => "attention",
            Suite::Network => "network",
            Suite::Hazegen => "hazegen",
        }
    }

    /// Parses a suite name; `all` yields every suite.
    pub fn parse_list(s: &str) -> Result<Vec<Suite>> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        s.parse().map(|suite| vec![suite])
    }

    pub fn run(self) -> Vec<Outcome> {
        let mut out = Outcomes { suite: self, list: Vec::new() };
        match self {
            Suite::Tensor => tensor_suite(&mut out),
            Suite::Activations => activation_suite(&mut out),
            Suite::Norm => norm_suite(&mut out),
            Suite::Attention => attention_suite(&mut out),
            Suite::Network => network_suite(&mut out),
            Suite::Hazegen => hazegen_suite(&mut out),
        }
        out.list
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::config(format!("unknown suite `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub suite: Suite,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "pass" } else { "fail" };
        write!(f, "{}.{}={verdict}", self.suite.name(), self.name)?;
        if !self.detail.is_empty() {
            write!(f, " {}", self.detail)?;
        }
        Ok(())
    }
}

struct Outcomes {
    suite: Suite,
    list: Vec<Outcome>,
}

impl Outcomes {
    fn record(&mut self, name: &'static str, result: Result<(bool, String)>) {
        let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error=\"{e}\"")));
        self.list.push(Outcome {
            suite: self.suite,
            name,
            passed,
            detail,
        });
    }

    fn bound(&mut self, name: &'static str, value: Result<f64>, limit: f64) {
        self.record(name, value.map(|v| (v < limit, format!("max_err={v:.3e} limit={limit:.0e}"))));
    }

    fn flag(&mut self, name: &'static str, ok: Result<bool>) {
        self.record(name, ok.map(|b| (b, String::new())));
    }
}

fn uniform(shape: [usize; 4], rng: &mut SeededRng, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn random_vec(n: usize, rng: &mut SeededRng, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_dense(cin: usize, cout: usize, rng: &mut SeededRng) -> Dense {
    let s = 1.0 / (cin as f32).sqrt();
    Dense::new(cin, cout, random_vec(cin * cout, rng, s), random_vec(cout, rng, 0.1)).expect("sizes match")
}

fn tensor_suite(out: &mut Outcomes) {
    let mut rng = seeded(11);
    out.bound(
        "conv_matches_direct",
        (|| {
            let x = uniform([2, 7, 6, 4], &mut rng, -1.0, 1.0);
            let k = Kernel::new(3, 4, 6, 2, random_vec(3 * 3 * 2 * 6, &mut rng, 0.5), random_vec(6, &mut rng, 0.1))?;
            let mut worst = 0.0f64;
            for stride in [1, 2] {
                for pad in [PadMode::Zero, PadMode::Reflect] {
                    let y = conv2d(&x, &k, stride, pad)?;
                    worst = worst.max(direct_conv_error(&x, &k, stride, pad, &y));
                }
            }
            Ok(worst)
        })(),
        1e-5,
    );
    out.flag(
        "reflect_fold",
        Ok([(-1, 5, 1), (5, 5, 3), (-9, 5, 1), (12, 5, 4), (-1, 1, 0)]
            .iter()
            .all(|&(i, n, want)| reflect_index(i, n) == want)),
    );
    out.flag(
        "dft1_roundtrip",
        (|| {
            let x = uniform([1, 3, 4, 2], &mut rng, -5.0, 5.0);
            let mut buf = Vec::new();
            x.write_to(&mut buf)?;
            Ok(Tensor::read_from(&mut buf.as_slice())? == x)
        })(),
    );
    out.bound(
        "softmax_rows_sum",
        Ok((0..64)
            .map(|_| {
                let mut row = random_vec(33, &mut rng, 20.0);
                softmax_in_place(&mut row);
                (row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs()
            })
            .fold(0.0, f64::max)),
        1e-6,
    );
}

fn direct_conv_error(x: &Tensor, k: &Kernel, stride: usize, pad: PadMode, y: &Tensor) -> f64 {
    let [b, h, w, _] = x.shape();
    let half = (k.size / 2) as isize;
    let (cin_g, cout_g) = (k.cin / k.groups, k.cout / k.groups);
    let mut worst = 0.0f64;
    for bi in 0..b {
        for oy in 0..y.height() {
            for ox in 0..y.width() {
                for co in 0..k.cout {
                    let g = co / cout_g;
                    let mut acc = k.bias[co] as f64;
                    for ky in 0..k.size {
                        for kx in 0..k.size {
                            let iy = (oy * stride) as isize + ky as isize - half;
                            let ix = (ox * stride) as isize + kx as isize - half;
                            let inside = (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix);
                            let (sy, sx) = match pad {
                                _ if inside => (iy as usize, ix as usize),
                                PadMode::Zero => continue,
                                PadMode::Reflect => (reflect_index(iy, h), reflect_index(ix, w)),
                            };
                            for ci in 0..cin_g {
                                let wv = k.weight[((ky * k.size + kx) * cin_g + ci) * k.cout + co];
                                acc += wv as f64 * x.get(bi, sy, sx, g * cin_g + ci) as f64;
                            }
                        }
                    }
                    worst = worst.max((acc - y.get(bi, oy, ox, co) as f64).abs());
                }
            }
        }
    }
    worst
}

fn activation_suite(out: &mut Outcomes) {
    let g = grid(-3.0, 3.0, 1e-3);
    let zero = Activation::soft_relu(0.0).expect("α = 0 is allowed");
    out.flag("softrelu_zero_alpha_is_relu", Ok(g.iter().all(|&x| zero.eval(x) == Activation::Relu.eval(x))));
    let soft = Activation::soft_relu(0.1).expect("valid α");
    out.bound("softrelu_fd", Ok(fd_check(|x| soft.eval(x), |x| soft.derivative_at(x), &g, 1e-3)), 1e-5);
    let gelu = Activation::Gelu;
    out.bound("gelu_fd", Ok(fd_check(|x| gelu.eval(x), |x| gelu.derivative_at(x), &g, 1e-3)), 1e-5);
    let dip = g.windows(2).find(|p| gelu.eval(p[1]) < gelu.eval(p[0])).map(|p| p[0]);
    out.record(
        "gelu_non_monotone",
        Ok((dip.is_some(), dip.map(|x| format!("first_decrease_at={x:.3}")).unwrap_or_default())),
    );
    out.flag("softrelu_monotone", Ok(g.windows(2).all(|p| soft.eval(p[1]) >= soft.eval(p[0]))));
}

fn norm_suite(out: &mut Outcomes) {
    let mut rng = seeded(5);
    let x = uniform([3, 6, 5, 8], &mut rng, -5.0, 5.0);
    let c = x.channels();
    out.record(
        "sample_norm_stats",
        (|| {
            let (y, _) = layernorm_sample(&x, &NormParams::identity(c))?;
            let n = 6 * 5 * c;
            let (mut mean_err, mut std_err) = (0.0f64, 0.0f64);
            for s in y.data().chunks_exact(n) {
                let m = s.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                let var = s.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n as f64;
                mean_err = mean_err.max(m.abs());
                std_err = std_err.max((var.sqrt() - 1.0).abs());
            }
            Ok((
                mean_err < 1e-6 && std_err < 1e-5,
                format!("max_mean={mean_err:.2e} max_std_dev={std_err:.2e}"),
            ))
        })(),
    );
    out.flag(
        "rescale_init_is_sample_norm",
        (|| {
            let p = NormParams::identity(c);
            let (xn, pair) = rescalenorm_begin(&x, &p, &RescaleWeights::init(c))?;
            Ok(rescalenorm_end(&xn, &pair)? == layernorm_sample(&x, &p)?.0)
        })(),
    );
    out.bound(
        "rescale_full_reconstruction",
        (|| {
            let w = RescaleWeights {
                w_gamma: vec![1.0; c],
                b_gamma: vec![0.0; c],
                w_beta: vec![1.0; c],
                b_beta: vec![0.0; c],
            };
            let (xn, pair) = rescalenorm_begin(&x, &NormParams::identity(c), &w)?;
            Ok(rescalenorm_end(&xn, &pair)?.max_abs_diff(&x) as f64)
        })(),
        1e-5,
    );
}

fn random_qkv_params(c: usize, heads: usize, rng: &mut SeededRng) -> Result<AttentionParams> {
    AttentionParams::new(
        c,
        heads,
        random_dense(c, 3 * c, rng),
        random_dense(c, c, rng),
        ParallelConv::Depthwise(Kernel::zeros(5, c, c, c)),
    )
}

/// Attention of every window computed pair by pair in `f64`.
fn brute_force_windows(windows: &Tensor, p: &AttentionParams, bias: &RelPosBias) -> Tensor {
    let [n, wh, ww, c] = windows.shape();
    let t = wh * ww;
    let d = c / p.heads;
    let tok = |wi: usize, i: usize| windows.pixel(wi, i / ww, i % ww).to_vec();
    let project = |dense: &Dense, v: &[f32]| -> Vec<f64> {
        (0..dense.cout)
            .map(|o| dense.bias[o] as f64 + (0..dense.cin).map(|i| v[i] as f64 * dense.weight[i * dense.cout + o] as f64).sum::<f64>())
            .collect()
    };
    let mut out = Tensor::zeros([n, wh, ww, c]);
    for wi in 0..n {
        let qkv: Vec<Vec<f64>> = (0..t).map(|i| project(&p.qkv, &tok(wi, i))).collect();
        for q in 0..t {
            let mut mixed = vec![0.0f32; c];
            for h in 0..p.heads {
                let logits: Vec<f64> = (0..t)
                    .map(|k| {
                        let dot: f64 = (0..d).map(|j| qkv[q][h * d + j] * qkv[k][c + h * d + j]).sum();
                        dot / (d as f64).sqrt() + bias.bias(h, q, k) as f64
                    })
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..d {
                    mixed[h * d + j] = (0..t).map(|k| e[k] / z * qkv[k][2 * c + h * d + j]).sum::<f64>() as f32;
                }
            }
            let o = project(&p.proj, &mixed);
            for (ch, v) in o.into_iter().enumerate() {
                out.set(wi, q / ww, q % ww, ch, v as f32);
            }
        }
    }
    out
}

/// Window index holding each pixel, or `None` when that window touches padding or wrapped tokens.
fn interior_windows(layout: &WindowLayout) -> Vec<Option<usize>> {
    let (h, w) = (layout.height, layout.width);
    let (_, cols) = layout.grid();
    let clean: Vec<bool> = (0..layout.windows_per_sample())
        .map(|i| layout.window_origins(i).iter().all(|o| matches!(o, Origin::Image(..))))
        .collect();
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let (cy, cx) = match layout.scheme {
                WindowScheme::CyclicShiftMasked | WindowScheme::CyclicShiftUnmasked => {
                    ((y + h - layout.shift) % h, (x + w - layout.shift) % w)
                }
                _ => (y + layout.pad.top, x + layout.pad.left),
            };
            let win = (cy / layout.window) * cols + cx / layout.window;
            clean[win].then_some(win)
        })
        .collect()
}

fn attention_suite(out: &mut Outcomes) {
    let mut rng = seeded(23);
    out.flag(
        "partition_roundtrip",
        (|| {
            let mut ok = true;
            for scheme in WindowScheme::ALL {
                for (h, w) in [(16, 16), (13, 10), (5, 7)] {
                    if scheme != WindowScheme::ReflectionPad && scheme != WindowScheme::ZeroPadMasked && (h % 4 != 0 || w % 4 != 0) {
                        continue;
                    }
                    for shift in [0, 2] {
                        let x = uniform([2, h, w, 3], &mut rng, -1.0, 1.0);
                        let layout = WindowLayout::new(4, shift, scheme, h, w)?;
                        ok &= reverse(&partition(&x, &layout)?.windows, &layout)? == x;
                    }
                }
            }
            Ok(ok)
        })(),
    );
    let (c, heads, win) = (8, 2, 4);
    let bias = RelPosBias::new(win, heads, random_vec(RelPosBias::table_len(win, heads), &mut rng, 0.5))
        .expect("table length matches");
    out.bound(
        "softmax_rows_sum",
        {
            let qkv = uniform([3, win, win, 3 * c], &mut rng, -2.0, 2.0);
            let mut worst = 0.0f64;
            for wi in 0..3 {
                for h in 0..heads {
                    for row in attention_probs(&qkv, heads, &bias, None, wi, h) {
                        worst = worst.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
                    }
                }
            }
            Ok(worst)
        },
        1e-6,
    );
    out.bound(
        "zero_query_uniform_average",
        (|| {
            let mut qkv = uniform([2, win, win, 3 * c], &mut rng, -1.0, 1.0);
            for px in qkv.data_mut().chunks_exact_mut(3 * c) {
                px[..c].fill(0.0);
            }
            let y = attend(&qkv, heads, &RelPosBias::zeros(win, heads), None)?;
            let t = win * win;
            let mut worst = 0.0f64;
            for wi in 0..2 {
                for ch in 0..c {
                    let mean = (0..t).map(|i| qkv.get(wi, i / win, i % win, 2 * c + ch) as f64).sum::<f64>() / t as f64;
                    for i in 0..t {
                        worst = worst.max((y.get(wi, i / win, i % win, ch) as f64 - mean).abs());
                    }
                }
            }
            Ok(worst)
        })(),
        1e-6,
    );
    out.bound(
        "wmhsa_matches_pairwise",
        (|| {
            let p = random_qkv_params(c, heads, &mut rng)?;
            let windows = uniform([3, win, win, c], &mut rng, -1.0, 1.0);
            let fast = wmhsa(&windows, &p, &bias, None)?;
            Ok(fast.max_abs_diff(&brute_force_windows(&windows, &p, &bias)) as f64)
        })(),
        1e-5,
    );
    out.record(
        "interior_reflect_matches_cyclic",
        (|| {
            let (h, w) = (16, 16);
            let p = random_qkv_params(c, heads, &mut rng)?;
            let x = uniform([1, h, w, c], &mut rng, -1.0, 1.0);
            let qkv = crate::tensor::linear(&x, &p.qkv)?;
            let run = |scheme| -> Result<(Tensor, Vec<Option<usize>>)> {
                let layout = WindowLayout::new(win, win / 2, scheme, h, w)?;
                let part = partition(&qkv, &layout)?;
                let y = attend(&part.windows, heads, &bias, part.mask.as_ref())?;
                Ok((reverse(&y, &layout)?, interior_windows(&layout)))
            };
            let (a, ia) = run(WindowScheme::ReflectionPad)?;
            let (b, ib) = run(WindowScheme::CyclicShiftMasked)?;
            let mut worst = 0.0f64;
            let mut compared = 0;
            for i in 0..h * w {
                if ia[i].is_some() && ib[i].is_some() {
                    compared += 1;
                    for ch in 0..c {
                        worst = worst.max((a.get(0, i / w, i % w, ch) - b.get(0, i / w, i % w, ch)).abs() as f64);
                    }
                }
            }
            Ok((compared > 0 && worst < 1e-5, format!("pixels={compared} max_err={worst:.3e}")))
        })(),
    );
    out.flag(
        "reflect_windows_unmasked",
        (|| {
            let mut ok = true;
            for (h, w, shift) in [(16, 16, 2), (13, 10, 2), (9, 9, 0), (3, 11, 3)] {
                let layout = WindowLayout::new(win, shift, WindowScheme::ReflectionPad, h, w)?;
                let part = partition(&uniform([1, h, w, 2], &mut rng, 0.5, 1.0), &layout)?;
                ok &= part.mask.is_none();
                // reflected padding never leaves a zero token
                ok &= part.windows.data().iter().all(|&v| v >= 0.5);
                ok &= part.windows.shape()[1] * part.windows.shape()[2] == win * win;
            }
            Ok(ok)
        })(),
    );
}

fn network_suite(out: &mut Outcomes) {
    out.flag(
        "param_count_matches_store",
        (|| {
            let mut ok = true;
            for name in VariantSpec::NAMES {
                let spec = VariantSpec::named(name)?;
                ok &= count_params(&spec) == WeightStore::init(&spec, 0)?.element_count() as u64;
            }
            Ok(ok)
        })(),
    );
    let spec = VariantSpec::named("T").expect("known variant");
    let mut rng = seeded(41);
    let image = uniform([1, 16, 24, 3], &mut rng, 0.0, 1.0);
    out.flag(
        "zero_head_identity",
        (|| {
            let mut w = WeightStore::init(&spec, 3)?;
            w.zero_prefix("head.");
            Ok(DehazeFormer::from_store(&spec, &w)?.forward(&image)? == image)
        })(),
    );
    out.flag(
        "deterministic_forward",
        (|| {
            let run = || -> Result<Tensor> {
                let net = DehazeFormer::from_store(&spec, &WeightStore::init(&spec, 8)?)?;
                net.forward(&image)
            };
            let a = run()?;
            let single = rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .map_err(|e| Error::config(e.to_string()))?
                .install(run)?;
            Ok(a.all_finite() && a == run()? && a == single)
        })(),
    );
    out.bound(
        "sk_weights_sum_to_one",
        (|| {
            let p = SkFusionParams {
                proj: random_dense(16, 16, &mut rng),
                squeeze: random_dense(16, 2, &mut rng),
                expand: random_dense(2, 32, &mut rng),
            };
            let a = uniform([3, 4, 5, 16], &mut rng, -2.0, 2.0);
            let b = uniform([3, 4, 5, 16], &mut rng, -2.0, 2.0);
            let fw = fusion_weights(&a, &b, &p)?;
            Ok(fw.a1.iter().zip(&fw.a2).map(|(x, y)| (x + y - 1.0).abs() as f64).fold(0.0, f64::max))
        })(),
        1e-6,
    );
}

fn hazegen_suite(out: &mut Outcomes) {
    let p = SynthesisParams::new(0.5);
    out.flag(
        "gamma_fit_points",
        Ok(p.gamma(0.0) == 4.0 && (p.gamma(0.25) - 1.9106).abs() < 5e-5 && p.gamma(1.0) == 0.0),
    );
    let g = grid(0.0, 1.0, 1e-3);
    out.flag("gamma_nonincreasing", Ok(g.windows(2).all(|w| p.gamma(w[1]) <= p.gamma(w[0]))));
    out.flag(
        "unit_decay_is_plain_scattering",
        Ok(g.iter().all(|&t| {
            let (j, a) = (0.37, 0.81);
            hazy_value(j, a, t, 1.0, (0.0, 1.0)) == (j * t + a * (1.0 - t)).clamp(0.0, 1.0)
        })),
    );
    out.flag(
        "dense_haze_blackout",
        Ok([0.0, 0.1, 0.5, 0.77, 1.0]
            .iter()
            .all(|&j| hazy_value(j, 0.9, 0.2, 1.25, (0.0, 1.0)) == hazy_value(0.0, 0.9, 0.2, 1.25, (0.0, 1.0)))),
    );
    out.record(
        "omega_ranges",
        Ok({
            let mut rng = seeded(99);
            let mut ok = true;
            let mut detail = Vec::new();
            for d in Density::ALL {
                let (lo, hi) = d.range();
                let draws: Vec<f64> = (0..10_000).map(|_| sample_omega(d, &mut rng)).collect();
                let mean = draws.iter().sum::<f64>() / draws.len() as f64;
                ok &= draws.iter().all(|w| (lo..=hi).contains(w)) && (mean - (lo + hi) / 2.0).abs() < 0.02;
                detail.push(format!("mean_{}={mean:.4}", d.code()));
            }
            (ok, detail.join(" "))
        }),
    );
    out.bound(
        "synthesis_matches_scalar",
        (|| {
            let mut rng = seeded(7);
            let (h, w) = (64, 64);
            let lambdas = [0.443, 0.562, 0.865, 1.609];
            let bands: Vec<Raster> = lambdas
                .iter()
                .map(|_| Raster::new(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect()))
                .collect::<Result<_>>()?;
            let clear = MultiSpectralImage::new(bands, ["B1", "B3", "B5", "B6"].map(String::from).to_vec(), lambdas.to_vec())?;
            let rho = Raster::new(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect())?;
            let atmo = [0.9, 0.85, 0.8, 0.75];
            let p = SynthesisParams::new(0.6);
            let fast = synthesize(&clear, &rho, &p, &atmo)?;
            let mut worst = 0.0f64;
            for (ci, band) in clear.channels.iter().enumerate() {
                for i in 0..h * w {
                    let haze = p.omega * rho.data[i] as f64;
                    let t1 = (1.0 - haze).max(T1_FLOOR);
                    let t = t1.powf((p.lambda1 / lambdas[ci]).powf(p.gamma(haze)));
                    let t_prime = (1.0 - p.xi * (1.0 - t)).clamp(0.0, 1.0);
                    let want = (band.data[i] as f64 * t_prime + atmo[ci] * (1.0 - t)).clamp(0.0, 1.0);
                    worst = worst.max((fast.hazy.channels[ci].data[i] as f64 - want).abs());
                }
            }
            Ok(worst)
        })(),
        1e-6,
    );
}

/// Runs `suites` and returns every outcome in order.
pub fn run_all(suites: &[Suite]) -> Vec<Outcome> {
    suites.iter().flat_map(|s| s.run()).collect()
}
