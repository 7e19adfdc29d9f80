//! Physics-based haze synthesis for multispectral rasters.
//!
//! A cirrus-band raster drives a non-homogeneous transmission map at a
//! reference wavelength; other bands follow a density-dependent power law
//! and are mixed with a per-band atmospheric light.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::truncated_normal;
use crate::tensor::Tensor;

/// Landsat-8 band centres in µm.
pub const LANDSAT8: [(&str, f64); 8] = [
    ("B1", 0.443),
    ("B2", 0.482),
    ("B3", 0.562),
    ("B4", 0.655),
    ("B5", 0.865),
    ("B6", 1.609),
    ("B7", 2.201),
    ("B9", 1.373),
];

pub const SIDECAR: &str = "wavelengths.txt";
/// Smallest `t1` fed to the per-band power law.
pub const T1_FLOOR: f64 = 1e-4;
pub const DEFAULT_XI: f64 = 1.25;
/// `a0..a3` of the cubic `γ(x) = a3x³ + a2x² + a1x + a0`.
pub const GAMMA_COEFFS: [f64; 4] = [6.537, -27.465, 41.224, -21.547];
/// Fraction of brightest pixels averaged into the atmospheric light.
pub const ATMO_FRACTION: f64 = 1e-4;
pub const STRETCH_PERCENTILES: (f64, f64) = (0.1, 99.9);

/// A single-band image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} raster given {} values",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn full(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [b, h, w, c] = t.shape();
        if b != 1 || c != 1 {
            return Err(Error::shape(format!("raster tensor must be 1×h×w×1, got {:?}", t.shape())));
        }
        Self::new(h, w, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, self.height, self.width, 1], self.data.clone()).expect("extents match data")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor(&Tensor::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor().save(path)
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiSpectralImage {
    pub channels: Vec<Raster>,
    pub labels: Vec<String>,
    /// Band centre of each channel in µm.
    pub wavelengths: Vec<f64>,
}

impl MultiSpectralImage {
    pub fn new(channels: Vec<Raster>, labels: Vec<String>, wavelengths: Vec<f64>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::shape("multispectral image has no channels"));
        }
        if labels.len() != channels.len() || wavelengths.len() != channels.len() {
            return Err(Error::shape(format!(
                "{} channels, {} labels, {} wavelengths",
                channels.len(),
                labels.len(),
                wavelengths.len()
            )));
        }
        let ext = channels[0].extents();
        if let Some(r) = channels.iter().find(|r| r.extents() != ext) {
            return Err(Error::shape(format!("channel extents {:?} and {:?} differ", ext, r.extents())));
        }
        if let Some(l) = wavelengths.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::config(format!("wavelength {l} is not positive")));
        }
        Ok(Self {
            channels,
            labels,
            wavelengths,
        })
    }

    pub fn extents(&self) -> (usize, usize) {
        self.channels[0].extents()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Reads `<dir>/wavelengths.txt` and one `<label>.dft` tensor per listed channel.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let bands = parse_sidecar(&fs::read_to_string(dir.join(SIDECAR))?)?;
        let mut channels = Vec::with_capacity(bands.len());
        for (label, _) in &bands {
            channels.push(Raster::load(dir.join(format!("{label}.dft")))?);
        }
        let (labels, wavelengths) = bands.into_iter().unzip();
        Self::new(channels, labels, wavelengths)
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (label, r) in self.labels.iter().zip(&self.channels) {
            r.save(dir.join(format!("{label}.dft")))?;
        }
        let bands: Vec<(String, f64)> = self.labels.iter().cloned().zip(self.wavelengths.iter().copied()).collect();
        fs::write(dir.join(SIDECAR), format_sidecar(&bands))?;
        Ok(())
    }
}

/// Parses `label wavelength_µm` lines; blank lines and `#` comments are skipped.
pub fn parse_sidecar(text: &str) -> Result<Vec<(String, f64)>> {
    let mut bands = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let (Some(label), Some(lambda), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::format("wavelength sidecar", format!("line {}: expected `label wavelength`", n + 1)));
        };
        let lambda: f64 = lambda
            .parse()
            .map_err(|_| Error::format("wavelength sidecar", format!("line {}: bad wavelength `{lambda}`", n + 1)))?;
        if bands.iter().any(|(l, _): &(String, f64)| l == label) {
            return Err(Error::format("wavelength sidecar", format!("channel `{label}` listed twice")));
        }
        bands.push((label.to_string(), lambda));
    }
    if bands.is_empty() {
        return Err(Error::format("wavelength sidecar", "no channels listed"));
    }
    Ok(bands)
}

pub fn format_sidecar(bands: &[(String, f64)]) -> String {
    let mut s = String::new();
    for (label, lambda) in bands {
        writeln!(s, "{label} {lambda}").expect("writing to a String");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisParams {
    pub omega: f64,
    pub xi: f64,
    pub gamma_coeffs: [f64; 4],
    pub gamma_clip: (f64, f64),
    pub t_clip: (f64, f64),
    /// Wavelength of the reference channel in µm.
    pub lambda1: f64,
}

impl SynthesisParams {
    pub fn new(omega: f64) -> Self {
        Self {
            omega,
            xi: DEFAULT_XI,
            gamma_coeffs: GAMMA_COEFFS,
            gamma_clip: (0.0, 4.0),
            t_clip: (0.0, 1.0),
            lambda1: LANDSAT8[0].1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega < 1.0) {
            return Err(Error::config(format!("omega {} outside (0, 1)", self.omega)));
        }
        if self.xi.is_nan() || self.xi < 1.0 {
            return Err(Error::config(format!("decay factor {} below 1", self.xi)));
        }
        if self.lambda1.is_nan() || self.lambda1 <= 0.0 {
            return Err(Error::config("reference wavelength must be positive"));
        }
        Ok(())
    }

    pub fn gamma(&self, x: f64) -> f64 {
        let [a0, a1, a2, a3] = self.gamma_coeffs;
        (((a3 * x + a2) * x + a1) * x + a0).clamp(self.gamma_clip.0, self.gamma_clip.1)
    }
}

fn percentile(sorted: &[f32], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac
}

/// Linear stretch sending the 0.1th percentile to 0 and the 99.9th to 1.
pub fn stretch_cirrus(raw: &Raster) -> Result<Raster> {
    if raw.data.is_empty() {
        return Err(Error::Degenerate("empty cirrus raster".into()));
    }
    if raw.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("cirrus raster has non-finite values".into()));
    }
    let mut sorted = raw.data.clone();
    sorted.sort_by(f32::total_cmp);
    let lo = percentile(&sorted, STRETCH_PERCENTILES.0);
    let hi = percentile(&sorted, STRETCH_PERCENTILES.1);
    if hi <= lo {
        return Err(Error::Degenerate(format!(
            "cirrus percentiles coincide at {lo}; no stretch is defined"
        )));
    }
    let data = raw
        .data
        .iter()
        .map(|&v| ((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0) as f32)
        .collect();
    Raster::new(raw.height, raw.width, data)
}

/// `t1 = 1 − ω·ρ9`.
pub fn transmission_ref(rho9: &Raster, omega: f64) -> Raster {
    let data = rho9.data.iter().map(|&r| (1.0 - omega * r as f64) as f32).collect();
    Raster::new(rho9.height, rho9.width, data).expect("same extents")
}

pub fn gamma_map(haze: &Raster, p: &SynthesisParams) -> Raster {
    let data = haze.data.iter().map(|&x| p.gamma(x as f64) as f32).collect();
    Raster::new(haze.height, haze.width, data).expect("same extents")
}

fn band_transmission(t1: f64, lambda1: f64, lambda_j: f64, gamma: f64) -> f64 {
    t1.max(T1_FLOOR).powf((lambda1 / lambda_j).powf(gamma))
}

/// `t_j = t1^((λ1/λj)^γ)`.
pub fn transmission_channel(t1: &Raster, lambda1: f64, lambda_j: f64, gamma: &Raster) -> Result<Raster> {
    if t1.extents() != gamma.extents() {
        return Err(Error::shape("transmission and gamma rasters differ in extent"));
    }
    if !(lambda1 > 0.0 && lambda_j > 0.0) {
        return Err(Error::config("wavelengths must be positive"));
    }
    let data = t1
        .data
        .iter()
        .zip(&gamma.data)
        .map(|(&t, &g)| band_transmission(t as f64, lambda1, lambda_j, g as f64) as f32)
        .collect();
    Raster::new(t1.height, t1.width, data)
}

/// Mean of the brightest 0.01% of each channel, at least one pixel.
pub fn estimate_atmo(image: &MultiSpectralImage) -> Result<Vec<f64>> {
    image
        .channels
        .iter()
        .map(|r| {
            if r.data.is_empty() {
                return Err(Error::shape("empty channel"));
            }
            let k = ((r.data.len() as f64 * ATMO_FRACTION) as usize).max(1);
            let mut v = r.data.clone();
            let n = v.len();
            v.select_nth_unstable_by(n - k, f32::total_cmp);
            Ok(v[n - k..].iter().map(|&x| x as f64).sum::<f64>() / k as f64)
        })
        .collect()
}

/// Channels whose atmospheric light anchors the correction: `B6` and `B7`
/// when labelled, otherwise the two longest wavelengths.
pub fn reference_channels(labels: &[String], wavelengths: &[f64]) -> (usize, usize) {
    let find = |name: &str| labels.iter().position(|l| l == name);
    if let (Some(a), Some(b)) = (find("B6"), find("B7")) {
        return (a, b);
    }
    let mut order: Vec<usize> = (0..wavelengths.len()).collect();
    order.sort_by(|&a, &b| wavelengths[b].total_cmp(&wavelengths[a]).then(a.cmp(&b)));
    (order[0], *order.get(1).unwrap_or(&order[0]))
}

/// Index of the shortest-wavelength channel.
pub fn shortest_channel(wavelengths: &[f64]) -> usize {
    (0..wavelengths.len())
        .min_by(|&a, &b| wavelengths[a].total_cmp(&wavelengths[b]))
        .expect("at least one channel")
}

/// `A′_i = A_r · Ā_i / Ā_r`, with `A_r` the mean over the reference pair.
pub fn correct_atmo(a: &[f64], a_bar: &[f64], reference: (usize, usize)) -> Result<Vec<f64>> {
    if a.len() != a_bar.len() {
        return Err(Error::shape(format!("{} lights vs {} dataset means", a.len(), a_bar.len())));
    }
    let (i, j) = reference;
    if i >= a.len() || j >= a.len() {
        return Err(Error::shape("reference channel out of range"));
    }
    let a_r = (a[i] + a[j]) / 2.0;
    let a_bar_r = (a_bar[i] + a_bar[j]) / 2.0;
    if a_bar_r.is_nan() || a_bar_r <= 0.0 {
        return Err(Error::Degenerate("reference dataset light is zero".into()));
    }
    Ok(a_bar.iter().map(|&m| a_r * m / a_bar_r).collect())
}

/// Summary of the γ map of one synthesis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub hazy: MultiSpectralImage,
    pub gamma: GammaStats,
}

/// One output value of the scattering model with decay.
pub fn hazy_value(j: f64, a: f64, t: f64, xi: f64, t_clip: (f64, f64)) -> f64 {
    // t − (ξ−1)(1−t) keeps t′ = t bit-for-bit when ξ = 1
    let t_prime = (t - (xi - 1.0) * (1.0 - t)).clamp(t_clip.0, t_clip.1);
    let ground = if t_prime > 0.0 { j * t_prime } else { 0.0 };
    (ground + a * (1.0 - t)).clamp(0.0, 1.0)
}

/// Renders haze over `clear` given a stretched cirrus raster and per-channel light.
pub fn synthesize(clear: &MultiSpectralImage, rho9: &Raster, p: &SynthesisParams, atmo: &[f64]) -> Result<Synthesis> {
    p.validate()?;
    if rho9.extents() != clear.extents() {
        return Err(Error::shape(format!(
            "cirrus extents {:?} differ from image extents {:?}",
            rho9.extents(),
            clear.extents()
        )));
    }
    if atmo.len() != clear.channels.len() {
        return Err(Error::shape(format!(
            "{} atmospheric lights for {} channels",
            atmo.len(),
            clear.channels.len()
        )));
    }
    if let Some(a) = atmo.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
        return Err(Error::config(format!("atmospheric light {a} outside (0, 1]")));
    }
    let n = rho9.data.len();
    let (t1, gamma): (Vec<f64>, Vec<f64>) = rho9
        .data
        .par_iter()
        .map(|&r| {
            let haze = p.omega * r as f64;
            (1.0 - haze, p.gamma(haze))
        })
        .unzip();
    let channels = clear
        .channels
        .iter()
        .zip(&clear.wavelengths)
        .zip(atmo)
        .map(|((band, &lambda), &a)| {
            let data = (0..n)
                .into_par_iter()
                .map(|i| {
                    let t = band_transmission(t1[i], p.lambda1, lambda, gamma[i]);
                    hazy_value(band.data[i] as f64, a, t, p.xi, p.t_clip) as f32
                })
                .collect();
            Raster::new(band.height, band.width, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = GammaStats {
        min: gamma.iter().copied().fold(f64::INFINITY, f64::min),
        mean: gamma.iter().sum::<f64>() / n.max(1) as f64,
        max: gamma.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    Ok(Synthesis {
        hazy: MultiSpectralImage::new(channels, clear.labels.clone(), clear.wavelengths.clone())?,
        gamma: stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Density {
    Light,
    Moderate,
    Dense,
}

impl Density {
    pub const ALL: [Density; 3] = [Density::Light, Density::Moderate, Density::Dense];

    pub fn range(self) -> (f64, f64) {
        match self {
            Density::Light => (0.100, 0.399),
            Density::Moderate => (0.400, 0.699),
            Density::Dense => (0.700, 0.999),
        }
    }

    pub fn code(self) -> char {
        match self {
            Density::Light => 'L',
            Density::Moderate => 'M',
            Density::Dense => 'D',
        }
    }
}

impl FromStr for Density {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" | "l" | "light" => Ok(Density::Light),
            "M" | "m" | "moderate" => Ok(Density::Moderate),
            "D" | "d" | "dense" => Ok(Density::Dense),
            _ => Err(Error::config(format!("unknown haze density `{s}` (expected L, M or D)"))),
        }
    }
}

/// Truncated Gaussian centred on the density's range, std a quarter of its width.
pub fn sample_omega<R: Rng + ?Sized>(density: Density, rng: &mut R) -> f64 {
    let (lo, hi) = density.range();
    truncated_normal(rng, (lo + hi) / 2.0, (hi - lo) / 4.0, lo, hi)
}

/// Density chosen uniformly, then `ω` as in [`sample_omega`].
pub fn sample_mixed<R: Rng + ?Sized>(rng: &mut R) -> (Density, f64) {
    let density = Density::ALL[rng.random_range(0..3)];
    (density, sample_omega(density, rng))
}

pub const RGB_BANDS: [&str; 3] = ["B4", "B3", "B2"];
pub const DISPLAY_GAMMA: f64 = 2.2;

/// Gamma-encoded RGB from bands `B4, B3, B2`, or from the channels nearest
/// their centre wavelengths when the labels are absent.
pub fn render_rgb(image: &MultiSpectralImage) -> Tensor {
    let (h, w) = image.extents();
    let picks: Vec<usize> = RGB_BANDS
        .iter()
        .map(|band| {
            image.index_of(band).unwrap_or_else(|| {
                let target = LANDSAT8.iter().find(|(l, _)| l == band).expect("known band").1;
                (0..image.wavelengths.len())
                    .min_by(|&a, &b| {
                        (image.wavelengths[a] - target)
                            .abs()
                            .total_cmp(&(image.wavelengths[b] - target).abs())
                    })
                    .expect("at least one channel")
            })
        })
        .collect();
    Tensor::from_fn([1, h, w, 3], |[_, y, x, c]| {
        let v = image.channels[picks[c]].data[y * w + x].clamp(0.0, 1.0) as f64;
        v.powf(1.0 / DISPLAY_GAMMA) as f32
    })
}
