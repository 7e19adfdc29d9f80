use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dehaze_core::checks::{run_all, Suite};
use dehaze_core::hazegen::{
    correct_atmo, estimate_atmo, parse_sidecar, reference_channels, render_rgb, sample_mixed, sample_omega,
    shortest_channel, stretch_cirrus, synthesize, Density, MultiSpectralImage, Raster, SynthesisParams,
};
use dehaze_core::image::{read_image, write_image};
use dehaze_core::metrics::MetricReport;
use dehaze_core::network::{mac_breakdown, param_breakdown, DehazeFormer, VariantSpec, WeightStore};
use dehaze_core::rng::seeded;
use dehaze_core::tensor::reflect_index;
use dehaze_core::{Error, Tensor};

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_SUITE: u8 = 4;

#[derive(Parser)]
#[command(name = "dehaze", version, about = "Dehazing transformer inference, overhead counts and haze synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and multiply-accumulate counts of a variant.
    Count {
        #[arg(long, value_parser = parse_variant)]
        variant: VariantSpec,
        #[arg(long, value_parser = parse_size, default_value = "256x256")]
        size: (usize, usize),
    },
    /// Dehaze one RGB image.
    Infer(InferArgs),
    /// Render haze over a multispectral scene.
    Synth(SynthArgs),
    /// Run invariant suites.
    Check {
        /// tensor, activations, norm, attention, network, hazegen or all.
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// PSNR and SSIM between two images.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

#[derive(Args)]
struct InferArgs {
    #[arg(long, value_parser = parse_variant, default_value = "T")]
    variant: VariantSpec,
    /// Weight files `<base>.manifest` and `<base>.bin`.
    #[arg(long, conflicts_with = "seed")]
    weights: Option<PathBuf>,
    /// Use freshly initialized weights from this seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    /// Reflect-pad to a multiple of 4 and crop the result back.
    #[arg(long)]
    pad: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory with `wavelengths.txt` and one `<label>.dft` raster per channel.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    cirrus: PathBuf,
    /// L, M, D or mix.
    #[arg(long, default_value = "mix")]
    density: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "out")]
    output: PathBuf,
    /// Decay factor applied to haze opacity.
    #[arg(long, default_value_t = dehaze_core::hazegen::DEFAULT_XI)]
    xi: f64,
    /// Cirrus raster is already stretched to [0, 1].
    #[arg(long)]
    prestretched: bool,
    /// Dataset-mean atmospheric light, `label value` per line.
    #[arg(long)]
    atmo_means: Option<PathBuf>,
    /// Also write gamma-encoded RGB renders of the clear and hazy scenes.
    #[arg(long)]
    rgb: bool,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_io() { EXIT_IO } else { EXIT_VALIDATION };
        Failure::new(code, e)
    }
}

/// Input files that cannot be read or decoded are I/O failures.
fn reading(path: &Path) -> impl FnOnce(Error) -> Failure + '_ {
    move |e| Failure::new(EXIT_IO, format!("{}: {e}", path.display()))
}

fn parse_variant(s: &str) -> Result<VariantSpec, String> {
    VariantSpec::named(s).map_err(|e| e.to_string())
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let h: usize = h.parse().map_err(|_| format!("bad height `{h}`"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width `{w}`"))?;
    if h == 0 || w == 0 || !h.is_multiple_of(4) || !w.is_multiple_of(4) {
        return Err(format!("{h}x{w} is not a positive multiple of 4"));
    }
    Ok((h, w))
}

fn count(spec: &VariantSpec, (h, w): (usize, usize)) -> Result<(), Failure> {
    let params = param_breakdown(spec);
    let macs = mac_breakdown(spec, h, w)?;
    println!("variant={}", spec.name);
    println!("size={h}x{w}");
    println!("params={}", params.total);
    println!("macs={}", macs.total);
    for (part, n) in &params.parts {
        println!("params.{part}={n}");
    }
    for (part, n) in &macs.parts {
        println!("macs.{part}={n}");
    }
    Ok(())
}

fn reflect_pad(image: &Tensor, h: usize, w: usize) -> Tensor {
    Tensor::from_fn([image.batch(), h, w, image.channels()], |[b, y, x, c]| {
        image.get(b, reflect_index(y as isize, image.height()), reflect_index(x as isize, image.width()), c)
    })
}

fn crop(image: &Tensor, h: usize, w: usize) -> Tensor {
    Tensor::from_fn([image.batch(), h, w, image.channels()], |[b, y, x, c]| image.get(b, y, x, c))
}

fn infer(args: &InferArgs) -> Result<(), Failure> {
    let spec = &args.variant;
    let weights = match (&args.weights, args.seed) {
        (Some(base), _) => WeightStore::load(base, spec).map_err(|e| match e {
            Error::Io(_) => Failure::new(EXIT_IO, format!("{}: {e}", base.display())),
            other => Failure::from(other),
        })?,
        (None, Some(seed)) => WeightStore::init(spec, seed)?,
        (None, None) => return Err(Failure::new(EXIT_USAGE, "one of --weights or --seed is required")),
    };
    let net = DehazeFormer::from_store(spec, &weights)?;
    let image = read_image(&args.input).map_err(reading(&args.input))?;
    let (h, w) = (image.height(), image.width());
    let out = if args.pad && (h % 4 != 0 || w % 4 != 0) {
        let padded = reflect_pad(&image, h.next_multiple_of(4), w.next_multiple_of(4));
        crop(&net.forward(&padded)?, h, w)
    } else {
        net.forward(&image)?
    };
    if !out.all_finite() {
        return Err(Failure::new(EXIT_VALIDATION, "network produced non-finite values"));
    }
    write_image(&args.output, &out).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", args.output.display())))?;
    println!("variant={}", spec.name);
    println!("size={h}x{w}");
    println!("output={}", args.output.display());
    Ok(())
}

fn read_means(path: &Path, labels: &[String]) -> Result<Vec<f64>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))?;
    let table = parse_sidecar(&text)?;
    labels
        .iter()
        .map(|l| {
            table
                .iter()
                .find(|(name, _)| name == l)
                .map(|&(_, v)| v)
                .ok_or_else(|| Failure::new(EXIT_VALIDATION, format!("no dataset mean for channel {l}")))
        })
        .collect()
}

fn synth(args: &SynthArgs) -> Result<(), Failure> {
    let clear = MultiSpectralImage::load_dir(&args.input).map_err(|e| match e {
        Error::Io(_) | Error::Format { .. } => Failure::new(EXIT_IO, format!("{}: {e}", args.input.display())),
        other => Failure::from(other),
    })?;
    let raw = Raster::load(&args.cirrus).map_err(reading(&args.cirrus))?;
    if raw.extents() != clear.extents() {
        return Err(Failure::new(
            EXIT_VALIDATION,
            format!("cirrus extents {:?} differ from scene extents {:?}", raw.extents(), clear.extents()),
        ));
    }
    let rho = if args.prestretched {
        raw
    } else {
        match stretch_cirrus(&raw) {
            Ok(r) => r,
            Err(Error::Degenerate(why)) => {
                eprintln!("warning: {why}; treating the scene as haze-free");
                Raster::full(raw.height, raw.width, 0.0)
            }
            Err(e) => return Err(e.into()),
        }
    };

    let mut rng = seeded(args.seed);
    let (density, omega) = if args.density == "mix" {
        sample_mixed(&mut rng)
    } else {
        let d: Density = args.density.parse().map_err(|e| Failure::new(EXIT_USAGE, e))?;
        (d, sample_omega(d, &mut rng))
    };

    let atmo = estimate_atmo(&clear)?;
    let means = match &args.atmo_means {
        Some(path) => read_means(path, &clear.labels)?,
        None => atmo.clone(),
    };
    let reference = reference_channels(&clear.labels, &clear.wavelengths);
    let corrected: Vec<f64> = correct_atmo(&atmo, &means, reference)?
        .into_iter()
        .map(|a| a.clamp(f64::MIN_POSITIVE, 1.0))
        .collect();

    let mut params = SynthesisParams::new(omega);
    params.xi = args.xi;
    params.lambda1 = clear.wavelengths[shortest_channel(&clear.wavelengths)];
    let result = synthesize(&clear, &rho, &params, &corrected)?;

    let io = |e: Error| Failure::new(EXIT_IO, format!("{}: {e}", args.output.display()));
    result.hazy.save_dir(&args.output).map_err(io)?;
    if args.rgb {
        write_image(args.output.join("clear_rgb.ppm"), &render_rgb(&clear)).map_err(io)?;
        write_image(args.output.join("hazy_rgb.ppm"), &render_rgb(&result.hazy)).map_err(io)?;
    }

    let mut report = vec![
        format!("seed={}", args.seed),
        format!("density={}", density.code()),
        format!("omega={omega:.6}"),
        format!("xi={}", params.xi),
        format!("lambda1={}", params.lambda1),
        format!("reference={},{}", clear.labels[reference.0], clear.labels[reference.1]),
        format!("gamma_min={:.6}", result.gamma.min),
        format!("gamma_mean={:.6}", result.gamma.mean),
        format!("gamma_max={:.6}", result.gamma.max),
    ];
    for (label, a) in clear.labels.iter().zip(&corrected) {
        report.push(format!("atmo.{label}={a:.6}"));
    }
    let text = report.join("\n") + "\n";
    fs::write(args.output.join("synth.manifest"), &text).map_err(|e| io(e.into()))?;
    print!("{text}");
    Ok(())
}

fn check(suite: &str) -> Result<(), Failure> {
    let suites = Suite::parse_list(suite).map_err(|e| Failure::new(EXIT_USAGE, e))?;
    let outcomes = run_all(&suites);
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(Failure::new(EXIT_SUITE, format!("{failed} of {} checks failed", outcomes.len())));
    }
    Ok(())
}

fn metrics(a: &Path, b: &Path) -> Result<(), Failure> {
    let ia = read_image(a).map_err(reading(a))?;
    let ib = read_image(b).map_err(reading(b))?;
    print!("{}", MetricReport::compute(&ia, &ib)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Count { variant, size } => count(&variant, size),
        Command::Infer(args) => infer(&args),
        Command::Synth(args) => synth(&args),
        Command::Check { suite } => check(&suite),
        Command::Metrics { a, b } => metrics(&a, &b),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
