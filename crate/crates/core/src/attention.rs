//! Window partitioning, windowed multi-head self-attention with a learned
//! relative position bias, and the attention + parallel convolution
//! aggregation used inside transformer blocks.
//!
//! A [`WindowLayout`] describes how one feature map of known extents is cut
//! into `w×w` windows. Four schemes are supported:
//!
//! * `ReflectionPad` mirrors the borders (top/left by the shift, bottom/right
//!   up to the next multiple of the window) so every window is full-sized and
//!   no mask is needed.
//! * `ZeroPadMasked` uses the same padding amounts but fills with zeros and
//!   masks padded keys.
//! * `CyclicShiftMasked` rolls the map by `−s` and masks pairs that only
//!   became neighbours through the wrap-around.
//! * `CyclicShiftUnmasked` rolls without masking.
//!
//! Windows are stored as a tensor of shape `(b·windows)×w×w×c`, ordered by
//! sample, then window row, then window column.

use rayon::prelude::*;

use crate::activations::Activation;
use crate::error::{Error, Result};
use crate::tensor::{conv2d, linear, reflect_index, Dense, Kernel, PadMode, Tensor};

/// Logit offset standing in for −∞ on masked pairs.
pub const MASK_LOGIT: f32 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowScheme {
    #[default]
    ReflectionPad,
    CyclicShiftMasked,
    CyclicShiftUnmasked,
    ZeroPadMasked,
}

impl WindowScheme {
    pub const ALL: [WindowScheme; 4] = [
        WindowScheme::ReflectionPad,
        WindowScheme::CyclicShiftMasked,
        WindowScheme::CyclicShiftUnmasked,
        WindowScheme::ZeroPadMasked,
    ];

    fn is_cyclic(self) -> bool {
        matches!(self, WindowScheme::CyclicShiftMasked | WindowScheme::CyclicShiftUnmasked)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PadRecord {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

/// Where a canvas token comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// The pixel at `(y, x)`, with its true neighbours around it.
    Image(usize, usize),
    /// Mirrored or zero padding.
    Padding,
    /// The pixel at `(y, x)`, brought in through the cyclic wrap.
    Wrapped(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowLayout {
    pub window: usize,
    pub shift: usize,
    pub scheme: WindowScheme,
    pub pad: PadRecord,
    pub height: usize,
    pub width: usize,
}

impl WindowLayout {
    pub fn new(window: usize, shift: usize, scheme: WindowScheme, height: usize, width: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::config("window size must be positive"));
        }
        if shift >= window {
            return Err(Error::config(format!("shift {shift} must be below window {window}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::shape("feature map has a zero extent"));
        }
        let pad = if scheme.is_cyclic() {
            if !height.is_multiple_of(window) || !width.is_multiple_of(window) {
                return Err(Error::shape(format!(
                    "cyclic shift needs extents divisible by the window: {height}x{width} vs {window}"
                )));
            }
            PadRecord::default()
        } else {
            let tail = |n: usize| (window - (n + shift) % window) % window;
            PadRecord {
                top: shift,
                left: shift,
                bottom: tail(height),
                right: tail(width),
            }
        };
        Ok(Self {
            window,
            shift,
            scheme,
            pad,
            height,
            width,
        })
    }

    pub fn canvas_height(&self) -> usize {
        self.pad.top + self.height + self.pad.bottom
    }

    pub fn canvas_width(&self) -> usize {
        self.pad.left + self.width + self.pad.right
    }

    /// Window grid of one sample, `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.canvas_height() / self.window, self.canvas_width() / self.window)
    }

    pub fn windows_per_sample(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    fn check_record(&self) -> Result<()> {
        let consistent = self.canvas_height().is_multiple_of(self.window)
            && self.canvas_width().is_multiple_of(self.window)
            && self.pad.top < self.window + self.height
            && self.pad.left < self.window + self.width;
        if consistent {
            Ok(())
        } else {
            Err(Error::shape(format!("inconsistent pad record {:?}", self.pad)))
        }
    }

    /// Source of the canvas token at `(cy, cx)`.
    pub fn origin(&self, cy: usize, cx: usize) -> Origin {
        if self.scheme.is_cyclic() {
            let y = cy + self.shift;
            let x = cx + self.shift;
            if y < self.height && x < self.width {
                Origin::Image(y, x)
            } else {
                Origin::Wrapped(y % self.height, x % self.width)
            }
        } else {
            let inside = cy >= self.pad.top
                && cy < self.pad.top + self.height
                && cx >= self.pad.left
                && cx < self.pad.left + self.width;
            if inside {
                Origin::Image(cy - self.pad.top, cx - self.pad.left)
            } else {
                Origin::Padding
            }
        }
    }

    /// Origins of the tokens of window `index` (within one sample), row-major.
    pub fn window_origins(&self, index: usize) -> Vec<Origin> {
        let (_, cols) = self.grid();
        let (wy, wx) = (index / cols, index % cols);
        let w = self.window;
        (0..w * w)
            .map(|t| self.origin(wy * w + t / w, wx * w + t % w))
            .collect()
    }

    /// Pixel feeding canvas token `(cy, cx)`, `None` for zero padding.
    fn source(&self, cy: usize, cx: usize) -> Option<(usize, usize)> {
        match self.scheme {
            WindowScheme::ReflectionPad => Some((
                reflect_index(cy as isize - self.pad.top as isize, self.height),
                reflect_index(cx as isize - self.pad.left as isize, self.width),
            )),
            WindowScheme::ZeroPadMasked => match self.origin(cy, cx) {
                Origin::Image(y, x) => Some((y, x)),
                _ => None,
            },
            WindowScheme::CyclicShiftMasked | WindowScheme::CyclicShiftUnmasked => Some((
                (cy + self.shift) % self.height,
                (cx + self.shift) % self.width,
            )),
        }
    }

    fn mask(&self) -> Option<AttentionMask> {
        let n = self.windows_per_sample();
        match self.scheme {
            WindowScheme::ReflectionPad | WindowScheme::CyclicShiftUnmasked => None,
            WindowScheme::CyclicShiftMasked if self.shift == 0 => None,
            WindowScheme::CyclicShiftMasked => {
                // Tokens may only attend to tokens with the same wrap status on both axes.
                let labels = (0..n)
                    .map(|i| {
                        self.window_tokens(i)
                            .map(|(cy, cx)| {
                                let ry = (cy + self.shift >= self.height) as u8;
                                let rx = (cx + self.shift >= self.width) as u8;
                                ry * 2 + rx
                            })
                            .collect()
                    })
                    .collect();
                Some(AttentionMask {
                    windows_per_sample: n,
                    kind: MaskKind::Regions(labels),
                })
            }
            WindowScheme::ZeroPadMasked => {
                let valid = (0..n)
                    .map(|i| {
                        self.window_origins(i)
                            .into_iter()
                            .map(|o| matches!(o, Origin::Image(..)))
                            .collect()
                    })
                    .collect();
                Some(AttentionMask {
                    windows_per_sample: n,
                    kind: MaskKind::ValidKeys(valid),
                })
            }
        }
    }

    fn window_tokens(&self, index: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (_, cols) = self.grid();
        let (wy, wx) = (index / cols, index % cols);
        let w = self.window;
        (0..w * w).map(move |t| (wy * w + t / w, wx * w + t % w))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum MaskKind {
    /// Per-token region label; pairs with different labels are blocked.
    Regions(Vec<Vec<u8>>),
    /// Per-token validity; invalid keys are blocked.
    ValidKeys(Vec<Vec<bool>>),
}

/// Blocked query/key pairs, shared by every sample of the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    windows_per_sample: usize,
    kind: MaskKind,
}

impl AttentionMask {
    /// Whether query `q` may not see key `k` in window `window` (batch-global index).
    #[inline]
    pub fn blocked(&self, window: usize, q: usize, k: usize) -> bool {
        let i = window % self.windows_per_sample;
        match &self.kind {
            MaskKind::Regions(labels) => labels[i][q] != labels[i][k],
            MaskKind::ValidKeys(valid) => !valid[i][k],
        }
    }

    pub fn blocked_pairs(&self, window: usize, tokens: usize) -> usize {
        (0..tokens)
            .flat_map(|q| (0..tokens).map(move |k| (q, k)))
            .filter(|&(q, k)| self.blocked(window, q, k))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub windows: Tensor,
    pub mask: Option<AttentionMask>,
}

pub fn partition(x: &Tensor, layout: &WindowLayout) -> Result<Partition> {
    let [b, h, w, c] = x.shape();
    if (h, w) != (layout.height, layout.width) {
        return Err(Error::shape(format!(
            "layout built for {}x{}, input is {h}x{w}",
            layout.height, layout.width
        )));
    }
    layout.check_record()?;
    let ws = layout.window;
    let (rows, cols) = layout.grid();
    let per_sample = rows * cols;
    let mut windows = Tensor::zeros([b * per_sample, ws, ws, c]);
    windows
        .data_mut()
        .par_chunks_mut(ws * ws * c)
        .enumerate()
        .for_each(|(n, win)| {
            let bi = n / per_sample;
            let i = n % per_sample;
            let (wy, wx) = (i / cols, i % cols);
            for ty in 0..ws {
                for tx in 0..ws {
                    if let Some((sy, sx)) = layout.source(wy * ws + ty, wx * ws + tx) {
                        let t = (ty * ws + tx) * c;
                        win[t..t + c].copy_from_slice(x.pixel(bi, sy, sx));
                    }
                }
            }
        });
    Ok(Partition {
        windows,
        mask: layout.mask(),
    })
}

/// Inverse of [`partition`]: reassembles the canvas and crops or unrolls it.
pub fn reverse(windows: &Tensor, layout: &WindowLayout) -> Result<Tensor> {
    layout.check_record()?;
    let [n, wh, ww, c] = windows.shape();
    let ws = layout.window;
    let per_sample = layout.windows_per_sample();
    if wh != ws || ww != ws || n % per_sample != 0 {
        return Err(Error::shape(format!(
            "{n} windows of {wh}x{ww} do not fit a layout of {per_sample} {ws}x{ws} windows per sample"
        )));
    }
    let b = n / per_sample;
    let (h, w) = (layout.height, layout.width);
    let (_, cols) = layout.grid();
    let mut out = Tensor::zeros([b, h, w, c]);
    out.data_mut()
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(row, dst)| {
            let bi = row / h;
            let y = row % h;
            for x in 0..w {
                let (cy, cx) = if layout.scheme.is_cyclic() {
                    ((y + h - layout.shift) % h, (x + w - layout.shift) % w)
                } else {
                    (y + layout.pad.top, x + layout.pad.left)
                };
                let win = bi * per_sample + (cy / ws) * cols + cx / ws;
                let src = windows.pixel(win, cy % ws, cx % ws);
                dst[x * c..(x + 1) * c].copy_from_slice(src);
            }
        });
    Ok(out)
}

/// Learned relative position bias: one value per head for each of the
/// `(2w−1)²` relative offsets, gathered into a `w²×w²` matrix per head.
#[derive(Debug, Clone, PartialEq)]
pub struct RelPosBias {
    pub window: usize,
    pub heads: usize,
    /// `(2w−1)² × heads`, row-major.
    pub table: Vec<f32>,
    index: Vec<u32>,
}

impl RelPosBias {
    pub fn new(window: usize, heads: usize, table: Vec<f32>) -> Result<Self> {
        let span = 2 * window - 1;
        if table.len() != span * span * heads {
            return Err(Error::shape(format!(
                "bias table has {} entries, expected {}",
                table.len(),
                span * span * heads
            )));
        }
        let n = window * window;
        let mut index = Vec::with_capacity(n * n);
        for q in 0..n {
            let (qy, qx) = (q / window, q % window);
            for k in 0..n {
                let (ky, kx) = (k / window, k % window);
                let dy = qy + window - 1 - ky;
                let dx = qx + window - 1 - kx;
                index.push((dy * span + dx) as u32);
            }
        }
        Ok(Self {
            window,
            heads,
            table,
            index,
        })
    }

    pub fn zeros(window: usize, heads: usize) -> Self {
        let span = 2 * window - 1;
        Self::new(window, heads, vec![0.0; span * span * heads]).expect("sized table")
    }

    pub fn table_len(window: usize, heads: usize) -> usize {
        (2 * window - 1).pow(2) * heads
    }

    /// Table row used by query `q` and key `k`.
    #[inline]
    pub fn index(&self, q: usize, k: usize) -> usize {
        self.index[q * self.window * self.window + k] as usize
    }

    #[inline]
    pub fn bias(&self, head: usize, q: usize, k: usize) -> f32 {
        self.table[self.index(q, k) * self.heads + head]
    }
}

/// Convolution run on the value map alongside attention.
#[derive(Debug, Clone, PartialEq)]
pub enum ParallelConv {
    /// Depthwise `k×k`.
    Depthwise(Kernel),
    /// `conv → activation → conv`, both dense.
    Block {
        first: Kernel,
        second: Kernel,
        activation: Activation,
    },
}

impl ParallelConv {
    pub fn apply(&self, v: &Tensor) -> Result<Tensor> {
        match self {
            ParallelConv::Depthwise(k) => conv2d(v, k, 1, PadMode::Reflect),
            ParallelConv::Block {
                first,
                second,
                activation,
            } => {
                let mid = conv2d(v, first, 1, PadMode::Reflect)?;
                conv2d(&activation.apply(&mid), second, 1, PadMode::Reflect)
            }
        }
    }

    pub fn zeroed(&self) -> ParallelConv {
        match self {
            ParallelConv::Depthwise(k) => {
                ParallelConv::Depthwise(Kernel::zeros(k.size, k.cin, k.cout, k.groups))
            }
            ParallelConv::Block {
                first,
                second,
                activation,
            } => ParallelConv::Block {
                first: Kernel::zeros(first.size, first.cin, first.cout, first.groups),
                second: Kernel::zeros(second.size, second.cin, second.cout, second.groups),
                activation: *activation,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub channels: usize,
    pub heads: usize,
    /// `c → 3c` (query, key, value) for attention blocks, `c → c` (value
    /// only) for convolution-only blocks.
    pub qkv: Dense,
    pub proj: Dense,
    pub conv: ParallelConv,
}

impl AttentionParams {
    pub fn new(channels: usize, heads: usize, qkv: Dense, proj: Dense, conv: ParallelConv) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::config(format!("{heads} heads do not divide {channels} channels")));
        }
        if qkv.cin != channels || (qkv.cout != 3 * channels && qkv.cout != channels) {
            return Err(Error::shape(format!(
                "qkv projection {}->{} does not fit {channels} channels",
                qkv.cin, qkv.cout
            )));
        }
        if proj.cin != channels || proj.cout != channels {
            return Err(Error::shape("output projection must be c->c"));
        }
        Ok(Self {
            channels,
            heads,
            qkv,
            proj,
            conv,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn has_query_key(&self) -> bool {
        self.qkv.cout == 3 * self.channels
    }
}

/// Scaled dot-product attention over windows of projected `[q | k | v]`
/// tokens. Output has `c` channels and is not yet projected.
pub fn attend(qkv: &Tensor, heads: usize, bias: &RelPosBias, mask: Option<&AttentionMask>) -> Result<Tensor> {
    let [n, wh, ww, c3] = qkv.shape();
    if c3 % 3 != 0 {
        return Err(Error::shape("attention input must carry q, k and v"));
    }
    let c = c3 / 3;
    if heads == 0 || c % heads != 0 {
        return Err(Error::config(format!("{heads} heads do not divide {c} channels")));
    }
    if wh != ww || wh != bias.window || heads != bias.heads {
        return Err(Error::shape(format!(
            "windows {wh}x{ww} with {heads} heads vs bias for {}x{} with {} heads",
            bias.window, bias.window, bias.heads
        )));
    }
    let tokens = wh * ww;
    let d = c / heads;
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = Tensor::zeros([n, wh, ww, c]);
    out.data_mut()
        .par_chunks_mut(tokens * c)
        .enumerate()
        .for_each(|(wi, dst)| {
            let src = &qkv.data()[wi * tokens * c3..(wi + 1) * tokens * c3];
            let mut logits = vec![0.0f32; tokens];
            for head in 0..heads {
                let (qo, ko, vo) = (head * d, c + head * d, 2 * c + head * d);
                for q in 0..tokens {
                    let qv = &src[q * c3 + qo..q * c3 + qo + d];
                    for (k, l) in logits.iter_mut().enumerate() {
                        let kv = &src[k * c3 + ko..k * c3 + ko + d];
                        let dot: f32 = qv.iter().zip(kv).map(|(a, b)| a * b).sum();
                        *l = dot * scale + bias.bias(head, q, k);
                        if mask.is_some_and(|m| m.blocked(wi, q, k)) {
                            *l += MASK_LOGIT;
                        }
                    }
                    crate::tensor::softmax_in_place(&mut logits);
                    let o = &mut dst[q * c + head * d..q * c + head * d + d];
                    for (k, &p) in logits.iter().enumerate() {
                        let vv = &src[k * c3 + vo..k * c3 + vo + d];
                        for (ov, &x) in o.iter_mut().zip(vv) {
                            *ov += p * x;
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Attention probabilities of one head in one window, `tokens×tokens`.
pub fn attention_probs(
    qkv: &Tensor,
    heads: usize,
    bias: &RelPosBias,
    mask: Option<&AttentionMask>,
    window: usize,
    head: usize,
) -> Vec<Vec<f32>> {
    let [_, wh, ww, c3] = qkv.shape();
    let c = c3 / 3;
    let d = c / heads;
    let tokens = wh * ww;
    let scale = 1.0 / (d as f32).sqrt();
    let src = &qkv.data()[window * tokens * c3..(window + 1) * tokens * c3];
    (0..tokens)
        .map(|q| {
            let mut row: Vec<f32> = (0..tokens)
                .map(|k| {
                    let qv = &src[q * c3 + head * d..q * c3 + head * d + d];
                    let kv = &src[k * c3 + c + head * d..k * c3 + c + head * d + d];
                    let dot: f32 = qv.iter().zip(kv).map(|(a, b)| a * b).sum();
                    let blocked = mask.is_some_and(|m| m.blocked(window, q, k));
                    dot * scale + bias.bias(head, q, k) + if blocked { MASK_LOGIT } else { 0.0 }
                })
                .collect();
            crate::tensor::softmax_in_place(&mut row);
            row
        })
        .collect()
}

/// Windowed multi-head self-attention on already partitioned windows:
/// projection to `q, k, v`, attention with relative position bias and
/// optional mask, then the output projection.
pub fn wmhsa(
    windows: &Tensor,
    params: &AttentionParams,
    bias: &RelPosBias,
    mask: Option<&AttentionMask>,
) -> Result<Tensor> {
    if !params.has_query_key() {
        return Err(Error::config("attention parameters carry no query/key projection"));
    }
    let qkv = linear(windows, &params.qkv)?;
    let attended = attend(&qkv, params.heads, bias, mask)?;
    linear(&attended, &params.proj)
}

/// Window attention inputs of a block: position bias and window layout.
#[derive(Debug, Clone, Copy)]
pub struct WindowAttention<'a> {
    pub bias: &'a RelPosBias,
    pub layout: &'a WindowLayout,
}

/// The two spatial branches of [`aggregate`] before they are summed and projected.
#[derive(Debug, Clone, PartialEq)]
pub struct Branches {
    /// Windowed attention output mapped back to the full map, if attention is used.
    pub attention: Option<Tensor>,
    /// Convolution of the value map, computed without any window partitioning.
    pub conv: Tensor,
}

pub fn aggregate_branches(
    x: &Tensor,
    params: &AttentionParams,
    attention: Option<WindowAttention<'_>>,
) -> Result<Branches> {
    let c = params.channels;
    if x.channels() != c {
        return Err(Error::shape(format!(
            "block expects {c} channels, got {}",
            x.channels()
        )));
    }
    let Some(WindowAttention { bias, layout }) = attention else {
        let value = if params.has_query_key() {
            linear(x, &params.qkv)?.slice_channels(2 * c, c)?
        } else {
            linear(x, &params.qkv)?
        };
        return Ok(Branches {
            attention: None,
            conv: params.conv.apply(&value)?,
        });
    };
    if !params.has_query_key() {
        return Err(Error::config("attention requested but no query/key projection"));
    }
    let qkv = linear(x, &params.qkv)?;
    let value = qkv.slice_channels(2 * c, c)?;
    let conv = params.conv.apply(&value)?;
    let part = partition(&qkv, layout)?;
    let attended = attend(&part.windows, params.heads, bias, part.mask.as_ref())?;
    Ok(Branches {
        attention: Some(reverse(&attended, layout)?),
        conv,
    })
}

/// `proj(Attention(Q, K, V) + Conv(V̂))`, or `proj(Conv(V̂))` when `attention` is `None`.
pub fn aggregate(x: &Tensor, params: &AttentionParams, attention: Option<WindowAttention<'_>>) -> Result<Tensor> {
    let branches = aggregate_branches(x, params, attention)?;
    let mixed = match branches.attention {
        Some(a) => a.add(&branches.conv)?,
        None => branches.conv,
    };
    linear(&mixed, &params.proj)
}
