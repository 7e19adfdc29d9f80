//! Dense `b×h×w×c` float tensors and the handful of primitives the rest of
//! the crate is built from.
//!
//! All kernels here are pure and parallelize over output rows. Every output
//! element is produced by the same fixed sequence of float operations no
//! matter how rows are distributed across threads, so results are bitwise
//! independent of the thread count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Variance floor used by every normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape:?} ({len})",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f32) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        let [b, h, w, c] = shape;
        let mut i = 0;
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..c {
                        t.data[i] = f([bi, y, x, ci]);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn channels(&self) -> usize {
        self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, y: usize, x: usize, c: usize) -> usize {
        ((b * self.shape[1] + y) * self.shape[2] + x) * self.shape[3] + c
    }

    #[inline]
    pub fn get(&self, b: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.offset(b, y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, y: usize, x: usize, c: usize, v: f32) {
        let o = self.offset(b, y, x, c);
        self.data[o] = v;
    }

    /// Channel vector of one pixel.
    #[inline]
    pub fn pixel(&self, b: usize, y: usize, x: usize) -> &[f32] {
        let c = self.shape[3];
        let o = self.offset(b, y, x, 0);
        &self.data[o..o + c]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32 + Sync) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.par_iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32 + Sync) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .par_iter()
                .zip(other.data.par_iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    /// Reinterprets the layout without moving data.
    pub fn reshape(self, shape: [usize; 4]) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    /// Channels `[start, start + len)` of every pixel.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let c = self.channels();
        if len == 0 || start + len > c {
            return Err(Error::shape(format!("channel slice {start}+{len} out of {c}")));
        }
        let data = self
            .data
            .chunks_exact(c)
            .flat_map(|px| px[start..start + len].iter().copied())
            .collect();
        Tensor::new([self.shape[0], self.shape[1], self.shape[2], len], data)
    }

    /// Horizontal mirror (flip along the width axis).
    pub fn flip_horizontal(&self) -> Tensor {
        let w = self.width();
        Tensor::from_fn(self.shape, |[bi, y, x, ci]| self.get(bi, y, w - 1 - x, ci))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DFT1_MAGIC)?;
        for d in self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("tensor file", "missing header"))?;
        if &magic != DFT1_MAGIC {
            return Err(Error::format("tensor file", "bad magic"));
        }
        let mut shape = [0usize; 4];
        for d in shape.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| Error::format("tensor file", "truncated header"))?;
            *d = usize::try_from(u64::from_le_bytes(b))
                .map_err(|_| Error::format("tensor file", "extent overflows usize"))?;
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("tensor file", "extent product overflows"))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != len * 4 {
            return Err(Error::Truncated {
                expected: len * 4,
                found: bytes.len(),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let mut r = BufReader::new(File::open(path)?);
        Tensor::read_from(&mut r)
    }
}

pub const DFT1_MAGIC: &[u8; 4] = b"DFT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Maps a possibly out-of-range coordinate into `[0, n)` by mirroring
/// without repeating the border sample. Pads wider than the extent fold
/// back and forth.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Convolution weights, laid out `k×k×(cin/groups)×cout`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Kernel {
    pub fn new(size: usize, cin: usize, cout: usize, groups: usize, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::config(format!("kernel size {size} must be odd")));
        }
        if groups == 0 || !cin.is_multiple_of(groups) || !cout.is_multiple_of(groups) {
            return Err(Error::config(format!(
                "groups {groups} must divide cin {cin} and cout {cout}"
            )));
        }
        let expected = size * size * (cin / groups) * cout;
        if weight.len() != expected || bias.len() != cout {
            return Err(Error::shape(format!(
                "kernel {size}x{size}x{}x{cout}: got {} weights, {} biases",
                cin / groups,
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            size,
            cin,
            cout,
            groups,
            weight,
            bias,
        })
    }

    pub fn zeros(size: usize, cin: usize, cout: usize, groups: usize) -> Self {
        let n = size * size * (cin / groups) * cout;
        Self::new(size, cin, cout, groups, vec![0.0; n], vec![0.0; cout]).expect("valid zero kernel")
    }

    /// Depthwise kernel whose centre tap is one: the identity map.
    pub fn identity_depthwise(size: usize, channels: usize) -> Self {
        let mut k = Self::zeros(size, channels, channels, channels);
        let centre = (size / 2) * size + size / 2;
        for c in 0..channels {
            k.weight[centre * channels + c] = 1.0;
        }
        k
    }

    #[inline]
    fn tap(&self, ky: usize, kx: usize) -> usize {
        (ky * self.size + kx) * (self.cin / self.groups) * self.cout
    }
}

/// Same-padded 2-D convolution with stride 1 or 2.
pub fn conv2d(x: &Tensor, kernel: &Kernel, stride: usize, pad: PadMode) -> Result<Tensor> {
    let [b, h, w, c] = x.shape();
    if c != kernel.cin {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {c}",
            kernel.cin
        )));
    }
    if stride == 0 {
        return Err(Error::config("stride must be positive"));
    }
    let k = kernel.size;
    let p = (k / 2) as isize;
    let oh = (h - 1) / stride + 1;
    let ow = (w - 1) / stride + 1;
    let cout = kernel.cout;
    let cin_g = kernel.cin / kernel.groups;
    let cout_g = cout / kernel.groups;
    let depthwise = cin_g == 1 && cout_g == 1;

    let mut out = Tensor::zeros([b, oh, ow, cout]);
    out.data
        .par_chunks_mut(ow * cout)
        .enumerate()
        .for_each(|(row, out_row)| {
            let bi = row / oh;
            let oy = row % oh;
            for ox in 0..ow {
                let acc = &mut out_row[ox * cout..(ox + 1) * cout];
                acc.copy_from_slice(&kernel.bias);
                for ky in 0..k {
                    let iy = (oy * stride) as isize + ky as isize - p;
                    let iy = match pad {
                        PadMode::Reflect => reflect_index(iy, h),
                        PadMode::Zero if iy < 0 || iy >= h as isize => continue,
                        PadMode::Zero => iy as usize,
                    };
                    for kx in 0..k {
                        let ix = (ox * stride) as isize + kx as isize - p;
                        let ix = match pad {
                            PadMode::Reflect => reflect_index(ix, w),
                            PadMode::Zero if ix < 0 || ix >= w as isize => continue,
                            PadMode::Zero => ix as usize,
                        };
                        let src = x.pixel(bi, iy, ix);
                        let tap = kernel.tap(ky, kx);
                        if depthwise {
                            let wt = &kernel.weight[tap..tap + cout];
                            for ((a, &s), &wv) in acc.iter_mut().zip(src).zip(wt) {
                                *a += s * wv;
                            }
                        } else {
                            for g in 0..kernel.groups {
                                for ic in 0..cin_g {
                                    let s = src[g * cin_g + ic];
                                    let base = tap + ic * cout + g * cout_g;
                                    let wt = &kernel.weight[base..base + cout_g];
                                    let a = &mut acc[g * cout_g..(g + 1) * cout_g];
                                    for (av, &wv) in a.iter_mut().zip(wt) {
                                        *av += s * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Per-pixel affine map `cin → cout`; weight is `cin×cout` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    pub fn new(cin: usize, cout: usize, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weight.len() != cin * cout || bias.len() != cout {
            return Err(Error::shape(format!(
                "dense {cin}->{cout}: got {} weights, {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            cin,
            cout,
            weight,
            bias,
        })
    }

    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self::new(cin, cout, vec![0.0; cin * cout], vec![0.0; cout]).expect("valid zero dense")
    }

    pub fn identity(c: usize) -> Self {
        let mut d = Self::zeros(c, c);
        for i in 0..c {
            d.weight[i * c + i] = 1.0;
        }
        d
    }

    /// Applies the map to one token, writing `cout` values into `out`.
    #[inline]
    pub fn apply_token(&self, token: &[f32], out: &mut [f32]) {
        out.copy_from_slice(&self.bias);
        for (i, &v) in token.iter().enumerate() {
            let row = &self.weight[i * self.cout..(i + 1) * self.cout];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += v * wv;
            }
        }
    }
}

pub fn linear(x: &Tensor, dense: &Dense) -> Result<Tensor> {
    let [b, h, w, c] = x.shape();
    if c != dense.cin {
        return Err(Error::shape(format!(
            "linear expects {} input channels, got {c}",
            dense.cin
        )));
    }
    let cout = dense.cout;
    let mut out = Tensor::zeros([b, h, w, cout]);
    const TOKENS_PER_TASK: usize = 64;
    out.data
        .par_chunks_mut(TOKENS_PER_TASK * cout)
        .zip(x.data.par_chunks(TOKENS_PER_TASK * c))
        .for_each(|(o, i)| {
            for (ot, it) in o.chunks_exact_mut(cout).zip(i.chunks_exact(c)) {
                dense.apply_token(it, ot);
            }
        });
    Ok(out)
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax over the channel axis of every pixel.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.channels();
    out.data.par_chunks_mut(c).for_each(softmax_in_place);
    out
}

/// Which axes a reduction collapses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axes {
    /// One group per `(b, y, x)` token.
    Channel,
    /// One group per sample, over all of `h·w·c`.
    SpaceChannel,
}

/// Mean and floored standard deviation per reduction group.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn reduce_stats(x: &Tensor, axes: Axes, eps: f64) -> AxisStats {
    assert!(eps > 0.0, "variance floor must be positive");
    let group = match axes {
        Axes::Channel => x.channels(),
        Axes::SpaceChannel => x.height() * x.width() * x.channels(),
    };
    let (mean, std) = x
        .data
        .par_chunks(group)
        .map(|g| {
            let n = g.len() as f64;
            let mean = g.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = g.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            (mean, (var + eps).sqrt())
        })
        .unzip();
    AxisStats { mean, std }
}
