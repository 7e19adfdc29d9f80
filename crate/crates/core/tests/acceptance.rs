use std::time::Instant;

use rand::Rng;

use dehaze_core::activations::Activation;
use dehaze_core::attention::{
    attend, attention_probs, partition, reverse, wmhsa, AttentionParams, ParallelConv, RelPosBias, WindowLayout,
    WindowScheme,
};
use dehaze_core::hazegen::{
    hazy_value, sample_omega, synthesize, Density, MultiSpectralImage, Raster, SynthesisParams,
};
use dehaze_core::metrics::{psnr, ssim, SSIM_C1};
use dehaze_core::network::{count_macs, count_params, DehazeFormer, VariantSpec, WeightStore};
use dehaze_core::normalization::{layernorm_sample, rescalenorm_begin, rescalenorm_end, NormParams, RescaleWeights};
use dehaze_core::rng::{seeded, SeededRng};
use dehaze_core::tensor::{linear, Dense, Kernel};
use dehaze_core::{Error, Tensor};

fn report(criterion: u32, title: &str, checks: &[(&str, bool, String)]) {
    let ok = checks.iter().all(|c| c.1);
    println!("criterion {criterion} {title}: {}", if ok { "PASS" } else { "FAIL" });
    for (name, passed, detail) in checks {
        println!("    {} {name} {detail}", if *passed { "ok  " } else { "FAIL" });
    }
    assert!(ok, "criterion {criterion} failed");
}

fn uniform(shape: [usize; 4], rng: &mut SeededRng, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol * target
}

#[test]
fn criterion_1_overhead_bands() {
    let targets = [
        ("T", 0.686e6, 6.658e9),
        ("S", 1.283e6, 13.13e9),
        ("B", 2.514e6, 25.79e9),
        ("M", 4.634e6, 48.64e9),
        ("L", 25.44e6, 279.7e9),
    ];
    let mut checks = Vec::new();
    for (name, params_target, macs_target) in targets {
        let spec = VariantSpec::named(name).unwrap();
        let params = count_params(&spec) as f64;
        let macs = count_macs(&spec, 256, 256).unwrap() as f64;
        let stored = WeightStore::init(&spec, 0).unwrap().element_count() as f64;
        checks.push((
            "params",
            within(params, params_target, 0.2) && params == stored,
            format!("{name}: {params} vs {params_target} ({:+.1}%)", 100.0 * (params / params_target - 1.0)),
        ));
        checks.push((
            "macs",
            within(macs, macs_target, 0.2),
            format!("{name}: {macs:.4e} vs {macs_target:.4e} ({:+.1}%)", 100.0 * (macs / macs_target - 1.0)),
        ));
    }
    report(1, "overhead bands", &checks);
}

#[test]
fn criterion_2_forward_contract() {
    let spec = VariantSpec::named("T").unwrap();
    let net = DehazeFormer::from_store(&spec, &WeightStore::init(&spec, 2024).unwrap()).unwrap();
    let mut rng = seeded(17);
    let image = uniform([1, 256, 256, 3], &mut rng, 0.0, 1.0);
    let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();

    let start = Instant::now();
    let single = pool(1).install(|| net.forward(&image)).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let again = pool(1).install(|| net.forward(&image)).unwrap();
    let parallel = pool(4).install(|| net.forward(&image)).unwrap();
    let rebuilt = DehazeFormer::from_store(&spec, &WeightStore::init(&spec, 2024).unwrap())
        .unwrap()
        .forward(&image)
        .unwrap();
    report(
        2,
        "forward contract",
        &[
            ("shape", single.shape() == [1, 256, 256, 3], format!("{:?}", single.shape())),
            ("finite", single.all_finite(), String::new()),
            ("single core under 60 s", elapsed < 60.0, format!("{elapsed:.2} s")),
            ("bitwise rerun", again == single, String::new()),
            ("bitwise 4 threads", parallel == single, String::new()),
            ("bitwise rebuilt from seed", rebuilt == single, String::new()),
        ],
    );
}

#[test]
fn criterion_3_soft_reconstruction_identity() {
    let mut rng = seeded(3);
    let image = uniform([2, 16, 20, 3], &mut rng, 0.0, 1.0);
    let mut checks = Vec::new();
    let mut specs: Vec<VariantSpec> = VariantSpec::NAMES.iter().map(|n| VariantSpec::named(n).unwrap()).collect();
    specs.push(VariantSpec::all_attention());
    for spec in specs {
        let mut w = WeightStore::init(&spec, 5).unwrap();
        let plain = DehazeFormer::from_store(&spec, &w).unwrap().forward(&image).unwrap();
        w.zero_prefix("head.");
        let out = DehazeFormer::from_store(&spec, &w).unwrap().forward(&image).unwrap();
        checks.push((
            "forward(I) = I",
            out == image && plain != image,
            format!("variant {} max_diff={:e}", spec.name, out.max_abs_diff(&image)),
        ));
    }
    report(3, "soft reconstruction identity", &checks);
}

fn central_difference_error(act: Activation, points: &[f64], h: f64) -> f64 {
    points
        .iter()
        .map(|&x| (act.derivative_at(x) - (act.eval(x + h) - act.eval(x - h)) / (2.0 * h)).abs())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_4_activations() {
    let points = grid(-3.0, 3.0, 1e-3);
    let zero = Activation::soft_relu(0.0).unwrap();
    let relu_equal = points.iter().all(|&x| zero.eval(x) == x.max(0.0));
    let f32_equal = points.iter().all(|&x| zero.eval_f32(x as f32) == (x as f32).max(0.0));
    let soft = Activation::soft_relu(0.1).unwrap();
    let soft_err = central_difference_error(soft, &points, 1e-3);
    let gelu_err = central_difference_error(Activation::Gelu, &points, 1e-3);
    // independent closed form of the GELU derivative: Φ(x) + xφ(x)
    let phi = |x: f64| (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let gelu_closed = points
        .iter()
        .map(|&x| {
            let cdf = 0.5 * (1.0 + libm::erf(x / 2f64.sqrt()));
            (Activation::Gelu.derivative_at(x) - (cdf + x * phi(x))).abs()
        })
        .fold(0.0, f64::max);
    let witness = points
        .windows(2)
        .find(|p| Activation::Gelu.eval(p[1]) < Activation::Gelu.eval(p[0]))
        .map(|p| p[0]);
    report(
        4,
        "activation suite",
        &[
            ("SoftReLU(α=0) ≡ ReLU", relu_equal && f32_equal, format!("{} grid points", points.len())),
            ("SoftReLU derivative", soft_err < 1e-5, format!("max_err={soft_err:.3e}")),
            ("GELU derivative", gelu_err < 1e-5 && gelu_closed < 1e-12, format!("max_err={gelu_err:.3e}")),
            ("GELU non-monotone", witness.is_some(), format!("decreases at x={witness:?}")),
        ],
    );
}

#[test]
fn criterion_5_normalization() {
    let mut rng = seeded(8);
    // spread wide enough that σ ≫ √ε
    let x = uniform([4, 9, 7, 12], &mut rng, -6.0, 4.0);
    let c = x.channels();
    let p = NormParams::identity(c);
    let (y, _) = layernorm_sample(&x, &p).unwrap();
    let n = 9 * 7 * c;
    let (mut mean_err, mut std_err, mut oracle_err) = (0.0f64, 0.0f64, 0.0f64);
    for (xs, ys) in x.data().chunks_exact(n).zip(y.data().chunks_exact(n)) {
        let stats = |s: &[f32]| {
            let m = s.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = s.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n as f64;
            (m, var)
        };
        let (m, var) = stats(ys);
        mean_err = mean_err.max(m.abs());
        std_err = std_err.max((var.sqrt() - 1.0).abs());
        let (mx, vx) = stats(xs);
        for (&xv, &yv) in xs.iter().zip(ys) {
            oracle_err = oracle_err.max(((xv as f64 - mx) / (vx + 1e-5).sqrt() - yv as f64).abs());
        }
    }
    let (xn, pair) = rescalenorm_begin(&x, &p, &RescaleWeights::init(c)).unwrap();
    let at_init = rescalenorm_end(&xn, &pair).unwrap();
    let full = RescaleWeights {
        w_gamma: vec![1.0; c],
        b_gamma: vec![0.0; c],
        w_beta: vec![1.0; c],
        b_beta: vec![0.0; c],
    };
    let (xn, pair) = rescalenorm_begin(&x, &p, &full).unwrap();
    let recon = rescalenorm_end(&xn, &pair).unwrap().max_abs_diff(&x);
    report(
        5,
        "normalization suite",
        &[
            ("per-sample mean", mean_err < 1e-6, format!("max={mean_err:.2e}")),
            ("per-sample std", std_err < 1e-5, format!("max |std-1|={std_err:.2e}")),
            ("matches direct standardization", oracle_err < 1e-5, format!("max_err={oracle_err:.2e}")),
            ("RescaleNorm at init ≡ LayerNorm†", at_init == y, String::new()),
            ("full reconstruction", recon < 1e-5, format!("max_err={recon:.2e}")),
        ],
    );
}

/// Mirror index without the wrap-around arithmetic: bounce until inside.
fn bounce(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn random_dense(cin: usize, cout: usize, rng: &mut SeededRng) -> Dense {
    let s = 1.0 / (cin as f32).sqrt();
    let w = (0..cin * cout).map(|_| rng.random_range(-s..s)).collect();
    let b = (0..cout).map(|_| rng.random_range(-0.1..0.1)).collect();
    Dense::new(cin, cout, w, b).unwrap()
}

/// Shifted-window attention over a reflection-padded map, pair by pair in f64.
fn reflect_attention_oracle(
    x: &Tensor,
    qkv: &Dense,
    proj: &Dense,
    heads: usize,
    table: &[f32],
    win: usize,
    shift: usize,
) -> Tensor {
    let [b, h, w, c] = x.shape();
    let d = c / heads;
    let span = 2 * win - 1;
    let project = |dense: &Dense, v: &[f64]| -> Vec<f64> {
        (0..dense.cout)
            .map(|o| dense.bias[o] as f64 + (0..dense.cin).map(|i| v[i] * dense.weight[i * dense.cout + o] as f64).sum::<f64>())
            .collect()
    };
    let mut out = Tensor::zeros(x.shape());
    // window origins in image coordinates, starting at −shift
    let starts = |n: usize| -> Vec<isize> {
        let mut v = Vec::new();
        let mut s = -(shift as isize);
        while s < n as isize {
            v.push(s);
            s += win as isize;
        }
        v
    };
    for bi in 0..b {
        for &oy in &starts(h) {
            for &ox in &starts(w) {
                let coords: Vec<(isize, isize)> = (0..win * win)
                    .map(|t| (oy + (t / win) as isize, ox + (t % win) as isize))
                    .collect();
                let tokens: Vec<Vec<f64>> = coords
                    .iter()
                    .map(|&(y, xx)| {
                        let px = x.pixel(bi, bounce(y, h), bounce(xx, w));
                        project(qkv, &px.iter().map(|&v| v as f64).collect::<Vec<_>>())
                    })
                    .collect();
                for (q, &(qy, qx)) in coords.iter().enumerate() {
                    if qy < 0 || qx < 0 || qy >= h as isize || qx >= w as isize {
                        continue;
                    }
                    let mut mixed = vec![0.0f64; c];
                    for head in 0..heads {
                        let logits: Vec<f64> = (0..win * win)
                            .map(|k| {
                                let dot: f64 = (0..d).map(|j| tokens[q][head * d + j] * tokens[k][c + head * d + j]).sum();
                                let (ry, rx) = (q / win + win - 1 - k / win, q % win + win - 1 - k % win);
                                dot / (d as f64).sqrt() + table[(ry * span + rx) * heads + head] as f64
                            })
                            .collect();
                        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                        let z: f64 = e.iter().sum();
                        for j in 0..d {
                            mixed[head * d + j] = (0..win * win).map(|k| e[k] / z * tokens[k][2 * c + head * d + j]).sum();
                        }
                    }
                    for (ch, v) in project(proj, &mixed).into_iter().enumerate() {
                        out.set(bi, qy as usize, qx as usize, ch, v as f32);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn criterion_6_attention() {
    let mut rng = seeded(29);
    let win = 8;

    let mut roundtrip = true;
    let mut cases = 0;
    for scheme in WindowScheme::ALL {
        for (h, w) in [(32, 24), (16, 16), (13, 21), (5, 9), (40, 3)] {
            let divisible = h % win == 0 && w % win == 0;
            if matches!(scheme, WindowScheme::CyclicShiftMasked | WindowScheme::CyclicShiftUnmasked) && !divisible {
                continue;
            }
            for shift in [0, win / 2, 3] {
                let x = uniform([2, h, w, 3], &mut rng, -1.0, 1.0);
                let layout = WindowLayout::new(win, shift, scheme, h, w).unwrap();
                roundtrip &= reverse(&partition(&x, &layout).unwrap().windows, &layout).unwrap() == x;
                cases += 1;
            }
        }
    }

    let (c, heads) = (12, 3);
    let table: Vec<f32> = (0..RelPosBias::table_len(win, heads)).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bias = RelPosBias::new(win, heads, table.clone()).unwrap();

    let qkv = uniform([4, win, win, 3 * c], &mut rng, -3.0, 3.0);
    let mut row_err = 0.0f64;
    for wi in 0..4 {
        for head in 0..heads {
            for row in attention_probs(&qkv, heads, &bias, None, wi, head) {
                row_err = row_err.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
            }
        }
    }

    let mut zq = uniform([2, win, win, 3 * c], &mut rng, -1.0, 1.0);
    for px in zq.data_mut().chunks_exact_mut(3 * c) {
        px[..c].fill(0.0);
    }
    let attended = attend(&zq, heads, &RelPosBias::zeros(win, heads), None).unwrap();
    let mut uniform_err = 0.0f64;
    for wi in 0..2 {
        for ch in 0..c {
            let mean: f64 = zq.data()[wi * win * win * 3 * c..(wi + 1) * win * win * 3 * c]
                .chunks_exact(3 * c)
                .map(|px| px[2 * c + ch] as f64)
                .sum::<f64>()
                / (win * win) as f64;
            for t in 0..win * win {
                uniform_err = uniform_err.max((attended.get(wi, t / win, t % win, ch) as f64 - mean).abs());
            }
        }
    }

    let params = AttentionParams::new(
        c,
        heads,
        random_dense(c, 3 * c, &mut rng),
        random_dense(c, c, &mut rng),
        ParallelConv::Depthwise(Kernel::zeros(5, c, c, c)),
    )
    .unwrap();
    let mut oracle_err = 0.0f64;
    for (h, w, shift) in [(16, 16, 4), (13, 10, 4), (8, 8, 0)] {
        let x = uniform([1, h, w, c], &mut rng, -1.0, 1.0);
        let layout = WindowLayout::new(win, shift, WindowScheme::ReflectionPad, h, w).unwrap();
        let part = partition(&x, &layout).unwrap();
        let fast = reverse(&wmhsa(&part.windows, &params, &bias, None).unwrap(), &layout).unwrap();
        let slow = reflect_attention_oracle(&x, &params.qkv, &params.proj, heads, &table, win, shift);
        oracle_err = oracle_err.max(fast.max_abs_diff(&slow) as f64);
    }

    // 24×24 with shift 4: pixels 4..20 sit in windows fully inside the map under both schemes
    let (h, w, shift) = (24, 24, win / 2);
    let x = uniform([1, h, w, c], &mut rng, -1.0, 1.0);
    let projected = linear(&x, &params.qkv).unwrap();
    let run = |scheme| {
        let layout = WindowLayout::new(win, shift, scheme, h, w).unwrap();
        let part = partition(&projected, &layout).unwrap();
        reverse(&attend(&part.windows, heads, &bias, part.mask.as_ref()).unwrap(), &layout).unwrap()
    };
    let (reflect, cyclic) = (run(WindowScheme::ReflectionPad), run(WindowScheme::CyclicShiftMasked));
    let mut interior_err = 0.0f64;
    for y in shift..h - win + shift {
        for xx in shift..w - win + shift {
            for ch in 0..c {
                interior_err = interior_err.max((reflect.get(0, y, xx, ch) - cyclic.get(0, y, xx, ch)).abs() as f64);
            }
        }
    }
    let border_differs = (0..c).any(|ch| reflect.get(0, 0, 0, ch) != cyclic.get(0, 0, 0, ch));

    let mut full_windows = true;
    for (h, w) in [(16, 16), (13, 21), (5, 9)] {
        let layout = WindowLayout::new(win, win / 2, WindowScheme::ReflectionPad, h, w).unwrap();
        let x = uniform([1, h, w, 3], &mut rng, -1.0, 1.0);
        let part = partition(&linear(&x, &random_dense(3, 3 * c, &mut rng)).unwrap(), &layout).unwrap();
        full_windows &= part.mask.is_none();
        for wi in 0..layout.windows_per_sample() {
            let probs = attention_probs(&part.windows, heads, &bias, part.mask.as_ref(), wi, 0);
            full_windows &= probs.iter().all(|row| row.iter().filter(|&&p| p > 0.0).count() == win * win);
        }
    }

    report(
        6,
        "attention suite",
        &[
            ("partition/reverse roundtrip", roundtrip, format!("{cases} cases")),
            ("softmax rows sum to 1", row_err < 1e-6, format!("max_err={row_err:.2e}")),
            ("zero query averages values", uniform_err < 1e-6, format!("max_err={uniform_err:.2e}")),
            ("wmhsa vs pairwise oracle", oracle_err < 1e-5, format!("max_err={oracle_err:.2e}")),
            (
                "interior ReflectionPad ≡ CyclicShiftMasked",
                interior_err < 1e-5 && border_differs,
                format!("max_err={interior_err:.2e}"),
            ),
            ("ReflectionPad windows keep w² keys", full_windows, String::new()),
        ],
    );
}

/// Scalar path through transmission, power law and decayed scattering.
fn scalar_hazy(j: f64, rho: f64, a: f64, lambda: f64, p: &SynthesisParams) -> f64 {
    let haze = p.omega * rho;
    let [a0, a1, a2, a3] = p.gamma_coeffs;
    let gamma = (a0 + a1 * haze + a2 * haze.powi(2) + a3 * haze.powi(3)).clamp(0.0, 4.0);
    let t1 = (1.0 - haze).max(1e-4);
    let t = t1.powf((p.lambda1 / lambda).powf(gamma));
    let t_prime = (1.0 - p.xi * (1.0 - t)).clamp(0.0, 1.0);
    (j * t_prime + a * (1.0 - t)).clamp(0.0, 1.0)
}

#[test]
fn criterion_7_synthesis() {
    let mut rng = seeded(64);
    let (h, w) = (64, 64);
    let lambdas = [0.443, 0.482, 0.562, 0.655, 0.865, 1.609, 2.201];
    let labels: Vec<String> = ["B1", "B2", "B3", "B4", "B5", "B6", "B7"].map(String::from).to_vec();
    let random_raster = |rng: &mut SeededRng| Raster::new(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap();
    let clear = MultiSpectralImage::new(
        lambdas.iter().map(|_| random_raster(&mut rng)).collect(),
        labels.clone(),
        lambdas.to_vec(),
    )
    .unwrap();
    let rho = random_raster(&mut rng);
    let atmo = [0.95, 0.9, 0.88, 0.85, 0.8, 0.7, 0.65];
    let mut scalar_err = 0.0f64;
    for omega in [0.25, 0.55, 0.9] {
        let p = SynthesisParams::new(omega);
        let fast = synthesize(&clear, &rho, &p, &atmo).unwrap();
        for (ci, band) in clear.channels.iter().enumerate() {
            for i in 0..h * w {
                let want = scalar_hazy(band.data[i] as f64, rho.data[i] as f64, atmo[ci], lambdas[ci], &p);
                scalar_err = scalar_err.max((fast.hazy.channels[ci].data[i] as f64 - want).abs());
            }
        }
    }

    let p = SynthesisParams::new(0.5);
    let gamma_points = p.gamma(0.0) == 4.0 && (p.gamma(0.25) - 1.9106).abs() < 5e-5 && p.gamma(1.0) == 0.0;
    let cubic_at_one: f64 = p.gamma_coeffs.iter().sum();
    let fine = grid(0.0, 1.0, 1e-3);
    let monotone = fine.windows(2).all(|x| p.gamma(x[1]) <= p.gamma(x[0]));

    let mut reduces = true;
    for &t in &fine {
        for (j, a) in [(0.0, 0.9), (0.3, 0.7), (1.0, 1.0), (0.62, 0.35)] {
            reduces &= hazy_value(j, a, t, 1.0, (0.0, 1.0)) == (j * t + a * (1.0 - t)).clamp(0.0, 1.0);
        }
    }

    let mut ranges_ok = true;
    let mut means = Vec::new();
    let mut draw_rng = seeded(10_000);
    for d in Density::ALL {
        let (lo, hi) = d.range();
        let draws: Vec<f64> = (0..10_000).map(|_| sample_omega(d, &mut draw_rng)).collect();
        ranges_ok &= draws.iter().all(|w| (lo..=hi).contains(w));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        ranges_ok &= (mean - (lo + hi) / 2.0).abs() < 0.02;
        means.push(format!("{}:{mean:.3}", d.code()));
    }

    // ω·ρ = 0.95 gives γ = 0, t = 0.05 in every band and t′ = 0
    let blackout = {
        let p = SynthesisParams::new(0.95);
        let other = MultiSpectralImage::new(
            lambdas.iter().map(|_| random_raster(&mut rng)).collect(),
            labels.clone(),
            lambdas.to_vec(),
        )
        .unwrap();
        let ones = Raster::full(h, w, 1.0);
        let a = synthesize(&clear, &ones, &p, &atmo).unwrap();
        let b = synthesize(&other, &ones, &p, &atmo).unwrap();
        a.hazy == b.hazy && clear != other
    };

    report(
        7,
        "synthesis suite",
        &[
            ("vectorized vs scalar oracle", scalar_err < 1e-6, format!("max_err={scalar_err:.2e}")),
            ("γ at 0, 0.25, 1", gamma_points, format!("cubic(1)={cubic_at_one:.3}")),
            ("γ nonincreasing", monotone, String::new()),
            ("ξ = 1 reduces exactly", reduces, String::new()),
            ("ω ranges over 10,000 draws", ranges_ok, means.join(" ")),
            ("dense-haze blackout", blackout, String::new()),
        ],
    );
}

#[test]
fn criterion_8_metrics() {
    let mut rng = seeded(255);
    let a = Tensor::from_fn([1, 24, 24, 3], |_| rng.random_range(0..255u32) as f32 / 255.0);
    let b = a.map(|v| ((v * 255.0).round() + 1.0) / 255.0);
    let p = psnr(&a, &b).unwrap();
    let closed = 20.0 * 255f64.log10();
    let noisy = uniform([1, 24, 24, 3], &mut rng, 0.0, 1.0);
    let same = ssim(&noisy, &noisy).unwrap();
    let lo = Tensor::full([1, 16, 16, 3], 0.2);
    let hi = Tensor::full([1, 16, 16, 3], 0.8);
    let expected = (2.0 * 0.2 * 0.8 + SSIM_C1) / (0.2f64.powi(2) + 0.8f64.powi(2) + SSIM_C1);
    let got = ssim(&lo, &hi).unwrap();
    report(
        8,
        "metrics",
        &[
            ("psnr of 1/255 offset", (p - 48.1308).abs() < 1e-3, format!("{p:.4} dB (closed form {closed:.4})")),
            ("ssim(a, a) = 1", same == 1.0, format!("{same}")),
            ("zero-variance ssim", (got - expected).abs() < 1e-4, format!("{got:.6} vs {expected:.6}")),
        ],
    );
}

#[test]
fn criterion_9_weight_io() {
    let spec = VariantSpec::named("T").unwrap();
    let store = WeightStore::init(&spec, 77).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("tiny");
    store.save(&base).unwrap();
    let loaded = WeightStore::load(&base, &spec).unwrap();
    let bitwise = loaded.iter().zip(store.iter()).all(|((na, pa), (nb, pb))| {
        na == nb && pa.shape == pb.shape && pa.data.iter().map(|v| v.to_bits()).eq(pb.data.iter().map(|v| v.to_bits()))
    }) && loaded.len() == store.len();

    let manifest = store.manifest();
    let payload = store.payload();
    let truncated = WeightStore::from_parts(&manifest, &payload[..payload.len() - 4], &spec);
    let reshaped = manifest.replacen("embed.weight 3 3 3 24 0", "embed.weight 3 3 24 3 0", 1);
    let bad_shape = WeightStore::from_parts(&reshaped, &payload, &spec);
    let renamed = manifest.replacen("embed.bias", "embed.gain", 1);
    let unknown = WeightStore::from_parts(&renamed, &payload, &spec);

    report(
        9,
        "weight I/O",
        &[
            ("save/load bitwise", bitwise, format!("{} tensors", store.len())),
            ("truncation", matches!(truncated, Err(Error::Truncated { .. })), format!("{:?}", truncated.err())),
            (
                "bad shape names the parameter",
                matches!(&bad_shape, Err(Error::ParamShape { name, .. }) if name == "embed.weight"),
                format!("{:?}", bad_shape.err()),
            ),
            ("unknown name", matches!(unknown, Err(Error::UnknownParam(_))), format!("{:?}", unknown.err())),
        ],
    );
}
