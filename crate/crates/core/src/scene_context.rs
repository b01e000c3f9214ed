//! Bird's-eye-view scene context: tokens pooled onto an xy grid, then refined
//! by small 3×3 convolution stacks.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::tensor::NORM_EPS;
use crate::tokenizer::{Range3, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    /// Meters per cell along x and y.
    pub cell_size: [f64; 2],
    /// World position of the grid corner (x_min, y_min).
    pub origin: [f64; 2],
    pub height: usize,
    pub width: usize,
}

impl BevGrid {
    pub fn from_range(range: &Range3, cell_size: f64) -> Result<Self> {
        range.validate()?;
        if !(cell_size > 0.0) {
            return Err(invalid("BEV cell size must be positive"));
        }
        let width = ((range.max[0] - range.min[0]) / cell_size).ceil() as usize;
        let height = ((range.max[1] - range.min[1]) / cell_size).ceil() as usize;
        Ok(Self {
            cell_size: [cell_size, cell_size],
            origin: [range.min[0], range.min[1]],
            height,
            width,
        })
    }

    /// `(row, col)` of the cell holding `p`, if inside the grid.
    pub fn pixel_of(&self, p: [f64; 3]) -> Option<(usize, usize)> {
        let col = ((p[0] - self.origin[0]) / self.cell_size[0]).floor();
        let row = ((p[1] - self.origin[1]) / self.cell_size[1]).floor();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some((row as usize, col as usize))
    }
}

/// Channel vectors stored pixel-major: value `(c, y, x)` lives at
/// `(y * width + x) * channels + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap2D {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl FeatureMap2D {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut m = Self::zeros(channels, height, width);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    m.set(c, y, x, f(c, y, x));
                }
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.values[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.values[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.values[i..i + self.channels]
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Channel means over all spatial positions.
    pub fn global_average(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.channels];
        for px in self.values.chunks_exact(self.channels.max(1)) {
            for (a, v) in acc.iter_mut().zip(px) {
                *a += f64::from(*v);
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Debug dump: magic `PFFM`, channels/height/width as u32 LE, then the
    /// pixel-major f32 LE values.
    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.values.len() * 4);
        buf.extend_from_slice(b"PFFM");
        for v in [self.channels, self.height, self.width] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BevProjection {
    pub map: FeatureMap2D,
    /// Tokens that fell outside the grid.
    pub dropped: usize,
}

/// Pool tokens per BEV cell: first `d` channels hold the channel-wise mean,
/// the next `d` the channel-wise max. Empty cells are zero.
pub fn project_to_bev(tokens: &TokenSequence, grid: &BevGrid) -> BevProjection {
    project_subset(tokens, grid, |_| true)
}

fn project_subset(tokens: &TokenSequence, grid: &BevGrid, keep: impl Fn(usize) -> bool) -> BevProjection {
    let d = tokens.width();
    // pixel → (count, f64 sums, maxima)
    let mut cells: HashMap<usize, (u32, Vec<f64>, Vec<f32>)> = HashMap::new();
    let mut dropped = 0;
    for i in (0..tokens.len()).filter(|&i| keep(i)) {
        let Some((y, x)) = grid.pixel_of(tokens.coords[i]) else {
            dropped += 1;
            continue;
        };
        let f = tokens.features.row(i);
        let (n, sum, max) = cells
            .entry(y * grid.width + x)
            .or_insert_with(|| (0, vec![0.0; d], vec![f32::NEG_INFINITY; d]));
        *n += 1;
        for c in 0..d {
            sum[c] += f64::from(f[c]);
            max[c] = max[c].max(f[c]);
        }
    }
    let mut map = FeatureMap2D::zeros(2 * d, grid.height, grid.width);
    for (k, (n, sum, max)) in cells {
        let px = map.pixel_mut(k / grid.width, k % grid.width);
        for c in 0..d {
            px[c] = (sum[c] / f64::from(n)) as f32;
            px[d + c] = max[c];
        }
    }
    BevProjection { map, dropped }
}

/// 3×3 convolution with zero padding of one cell on each side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[rows, cols]`.
    pub stride: [usize; 2],
    /// `[tap][out][in]` with `tap = ky * 3 + kx`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            stride: [stride, stride],
            weight: vec![0.0; 9 * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    /// Center tap = identity, everything else zero. Needs `in == out`.
    pub fn identity(channels: usize, stride: usize) -> Self {
        let mut c = Self::zeros(channels, channels, stride);
        for o in 0..channels {
            c.set_weight(4, o, o, 1.0);
        }
        c
    }

    pub fn with_stride(mut self, stride: [usize; 2]) -> Self {
        self.stride = stride;
        self
    }

    #[inline]
    pub fn weight_at(&self, tap: usize, out: usize, inp: usize) -> f32 {
        self.weight[(tap * self.out_channels + out) * self.in_channels + inp]
    }

    #[inline]
    pub fn set_weight(&mut self, tap: usize, out: usize, inp: usize, v: f32) {
        self.weight[(tap * self.out_channels + out) * self.in_channels + inp] = v;
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        (height.div_ceil(self.stride[0]), width.div_ceil(self.stride[1]))
    }

    fn validate(&self) -> Result<()> {
        if self.stride.contains(&0) {
            return Err(invalid("convolution stride must be positive"));
        }
        if self.weight.len() != 9 * self.in_channels * self.out_channels {
            return Err(shape(
                "Conv2d weight",
                9 * self.in_channels * self.out_channels,
                self.weight.len(),
            ));
        }
        if self.bias.len() != self.out_channels {
            return Err(shape("Conv2d bias", self.out_channels, self.bias.len()));
        }
        Ok(())
    }

    pub fn forward(&self, input: &FeatureMap2D) -> Result<FeatureMap2D> {
        self.forward_concat(&[input])
    }

    /// Convolve the channel-wise concatenation of `inputs` without building it.
    ///
    /// Works as a scatter from non-zero input pixels, so cost scales with the
    /// occupied part of the map.
    pub fn forward_concat(&self, inputs: &[&FeatureMap2D]) -> Result<FeatureMap2D> {
        self.validate()?;
        let Some(first) = inputs.first() else {
            return Err(invalid("convolution needs at least one input map"));
        };
        let total: usize = inputs.iter().map(|m| m.channels).sum();
        if total != self.in_channels {
            return Err(shape("Conv2d input channels", self.in_channels, total));
        }
        if inputs.iter().any(|m| !m.same_grid(first)) {
            return Err(invalid("convolution inputs must share a grid"));
        }
        let (h, w) = (first.height, first.width);
        let (oh, ow) = self.output_dims(h, w);
        let (cin, cout) = (self.in_channels, self.out_channels);
        let (sy, sx) = (self.stride[0] as isize, self.stride[1] as isize);

        let mut acc = vec![0.0f64; oh * ow * cout];
        let mut px = vec![0.0f32; cin];
        for iy in 0..h {
            for ix in 0..w {
                let mut off = 0;
                for m in inputs {
                    px[off..off + m.channels].copy_from_slice(m.pixel(iy, ix));
                    off += m.channels;
                }
                if px.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for ky in 0..3isize {
                    // sy * oy + ky - 1 = iy
                    let ny = iy as isize + 1 - ky;
                    if ny < 0 || ny % sy != 0 || ny / sy >= oh as isize {
                        continue;
                    }
                    let oy = (ny / sy) as usize;
                    for kx in 0..3isize {
                        let nx = ix as isize + 1 - kx;
                        if nx < 0 || nx % sx != 0 || nx / sx >= ow as isize {
                            continue;
                        }
                        let ox = (nx / sx) as usize;
                        let tap = (ky * 3 + kx) as usize;
                        let out = &mut acc[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                        for (o, a) in out.iter_mut().enumerate() {
                            let wrow = &self.weight[(tap * cout + o) * cin..(tap * cout + o + 1) * cin];
                            let mut dot = 0.0f64;
                            for (wv, xv) in wrow.iter().zip(&px) {
                                dot += f64::from(*wv) * f64::from(*xv);
                            }
                            *a += dot;
                        }
                    }
                }
            }
        }
        let mut out = FeatureMap2D::zeros(cout, oh, ow);
        for (i, v) in out.values.iter_mut().enumerate() {
            *v = (acc[i] + f64::from(self.bias[i % cout])) as f32;
        }
        Ok(out)
    }

    pub fn flops(&self, out_pixels: usize) -> u64 {
        2 * 9 * self.in_channels as u64 * self.out_channels as u64 * out_pixels as u64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// Two stride-1 3×3 convolutions with an activation between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvStack {
    pub first: Conv2d,
    pub second: Conv2d,
    pub activation: Activation,
}

impl ConvStack {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            first: Conv2d::zeros(in_channels, out_channels, 1),
            second: Conv2d::zeros(out_channels, out_channels, 1),
            activation: Activation::Relu,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.first.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.second.out_channels
    }

    pub fn forward_concat(&self, inputs: &[&FeatureMap2D]) -> Result<FeatureMap2D> {
        if self.first.stride != [1, 1] || self.second.stride != [1, 1] {
            return Err(invalid("conv_refine uses stride-1 convolutions"));
        }
        if self.first.out_channels != self.second.in_channels {
            return Err(shape(
                "ConvStack inner channels",
                self.first.out_channels,
                self.second.in_channels,
            ));
        }
        let mut mid = self.first.forward_concat(inputs)?;
        if self.activation == Activation::Relu {
            mid.values.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        self.second.forward(&mid)
    }
}

/// Two 3×3 convolutions with a rectifier between; spatial size preserved.
pub fn conv_refine(map: &FeatureMap2D, weights: &ConvStack) -> Result<FeatureMap2D> {
    weights.forward_concat(&[map])
}

/// Per-channel standardization over all spatial positions.
pub fn standardize_channels(map: &mut FeatureMap2D) {
    let c = map.channels;
    let n = (map.height * map.width) as f64;
    if c == 0 || n == 0.0 {
        return;
    }
    let mut mean = vec![0.0f64; c];
    for px in map.values.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(px) {
            *m += f64::from(*v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; c];
    for px in map.values.chunks_exact(c) {
        for ((s, m), v) in var.iter_mut().zip(&mean).zip(px) {
            *s += (f64::from(*v) - m).powi(2);
        }
    }
    let inv: Vec<f64> = var.iter().map(|s| 1.0 / (s / n + NORM_EPS).sqrt()).collect();
    for px in map.values.chunks_exact_mut(c) {
        for ((v, m), k) in px.iter_mut().zip(&mean).zip(&inv) {
            *v = ((f64::from(*v) - m) * k) as f32;
        }
    }
}

/// Fused and per-agent pooled maps on a shared grid.
#[derive(Clone, Debug)]
pub struct AgentContext {
    pub fused: FeatureMap2D,
    /// In the order of the `agents` argument.
    pub per_agent: Vec<(u32, FeatureMap2D)>,
}

impl AgentContext {
    pub fn agent(&self, id: u32) -> Option<&FeatureMap2D> {
        self.per_agent.iter().find(|(a, _)| *a == id).map(|(_, m)| m)
    }
}

pub fn per_agent_context(fused_tokens: &TokenSequence, grid: &BevGrid, agents: &[u32]) -> Result<AgentContext> {
    if let Some(bad) = fused_tokens.agent_ids.iter().find(|a| !agents.contains(a)) {
        return Err(invalid(format!("token carries unknown agent id {bad}")));
    }
    let fused = project_to_bev(fused_tokens, grid).map;
    let per_agent = agents
        .iter()
        .map(|&a| (a, project_subset(fused_tokens, grid, |i| fused_tokens.agent_ids[i] == a).map))
        .collect();
    Ok(AgentContext { fused, per_agent })
}
