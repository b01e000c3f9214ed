//! Windowed spectral descriptors of the scene map, one per occupied
//! downsampled cell, projected to the scan's state width.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::scene_context::{standardize_channels, BevGrid, Conv2d, FeatureMap2D};
use crate::tensor::{Linear, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqConfig {
    /// `(H_k, W_k)` in downsampled cells.
    pub window: [usize; 2],
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    /// `(s_dx, s_dy)`: stride along x (columns) and y (rows).
    pub downsample: [usize; 2],
}

impl Default for FreqConfig {
    fn default() -> Self {
        Self { window: [16, 16], alpha: 0.125, beta: 0.25, epsilon: 1e-6, downsample: [4, 4] }
    }
}

impl FreqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha && self.alpha < self.beta && self.beta < 1.0) {
            return Err(invalid(format!("need 0 < alpha < beta < 1, got {} / {}", self.alpha, self.beta)));
        }
        if self.window.iter().any(|&k| k == 0 || k % 2 != 0) {
            return Err(invalid(format!("window dims must be positive and even, got {:?}", self.window)));
        }
        if self.downsample.contains(&0) {
            return Err(invalid("downsample strides must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid("ratio guard epsilon must be positive"));
        }
        Ok(())
    }

    /// Radius scale for the band split.
    pub fn k(&self) -> usize {
        self.window[0].min(self.window[1])
    }

    /// Stride as `[rows, cols]`.
    pub fn stride_rc(&self) -> [usize; 2] {
        [self.downsample[1], self.downsample[0]]
    }
}

/// Strided 3×3 convolution followed by per-channel standardization.
pub fn downsample_scene(f_sc: &FeatureMap2D, conv: &Conv2d, config: &FreqConfig) -> Result<FeatureMap2D> {
    config.validate()?;
    let conv = conv.clone().with_stride(config.stride_rc());
    let mut out = conv.forward(f_sc)?;
    standardize_channels(&mut out);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenCells {
    /// Unique `(u, v)` = (row, col) in first-seen order.
    pub cells: Vec<[i64; 2]>,
    /// Token → index into `cells`.
    pub token_cell: Vec<usize>,
}

/// Map tokens onto the downsampled grid and deduplicate.
pub fn token_cells(coords: &[[f64; 3]], grid: &BevGrid, downsample: [usize; 2]) -> TokenCells {
    let sx = grid.cell_size[0] * downsample[0] as f64;
    let sy = grid.cell_size[1] * downsample[1] as f64;
    let mut index: HashMap<[i64; 2], usize> = HashMap::new();
    let mut cells = Vec::new();
    let token_cell = coords
        .iter()
        .map(|p| {
            let u = ((p[1] - grid.origin[1]) / sy).floor() as i64;
            let v = ((p[0] - grid.origin[0]) / sx).floor() as i64;
            *index.entry([u, v]).or_insert_with(|| {
                cells.push([u, v]);
                cells.len() - 1
            })
        })
        .collect();
    TokenCells { cells, token_cell }
}

/// Channel-major `c × H_k × W_k` real patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Patch {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, values: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn get(&self, c: usize, p: usize, q: usize) -> f64 {
        self.values[(c * self.height + p) * self.width + q]
    }

    #[inline]
    pub fn set(&mut self, c: usize, p: usize, q: usize, v: f64) {
        self.values[(c * self.height + p) * self.width + q] = v;
    }
}

/// Window whose element `(p, q)` reads map cell `(u + p − H_k/2, v + q − W_k/2)`;
/// cells outside the map read as zero.
pub fn window_extract(map: &FeatureMap2D, center: [i64; 2], window: [usize; 2]) -> Patch {
    let [hk, wk] = window;
    let mut patch = Patch::zeros(map.channels, hk, wk);
    let row0 = center[0] - (hk / 2) as i64;
    let col0 = center[1] - (wk / 2) as i64;
    for p in 0..hk {
        let y = row0 + p as i64;
        if y < 0 || y >= map.height as i64 {
            continue;
        }
        for q in 0..wk {
            let x = col0 + q as i64;
            if x < 0 || x >= map.width as i64 {
                continue;
            }
            for (c, v) in map.pixel(y as usize, x as usize).iter().enumerate() {
                patch.set(c, p, q, f64::from(*v));
            }
        }
    }
    patch
}

/// Channel-major complex spectrum, same layout as [`Patch`].
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<Complex64>,
}

impl Spectrum {
    #[inline]
    pub fn get(&self, c: usize, r: usize, s: usize) -> Complex64 {
        self.values[(c * self.height + r) * self.width + s]
    }
}

/// Planned orthonormal 2D DFT for a fixed window size.
#[derive(Clone)]
pub struct Dft2 {
    height: usize,
    width: usize,
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
}

impl Dft2 {
    pub fn new(window: [usize; 2]) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height: window[0],
            width: window[1],
            rows: planner.plan_fft_forward(window[1]),
            cols: planner.plan_fft_forward(window[0]),
        }
    }

    pub fn transform(&self, patch: &Patch) -> Result<Spectrum> {
        if (patch.height, patch.width) != (self.height, self.width) {
            return Err(shape(
                "dft2 window",
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", patch.height, patch.width),
            ));
        }
        let (h, w) = (self.height, self.width);
        let scale = 1.0 / ((h * w) as f64).sqrt();
        let mut values: Vec<Complex64> = patch.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let mut column = vec![Complex64::default(); h];
        for plane in values.chunks_exact_mut(h * w) {
            for row in plane.chunks_exact_mut(w) {
                self.rows.process(row);
            }
            for q in 0..w {
                for p in 0..h {
                    column[p] = plane[p * w + q];
                }
                self.cols.process(&mut column);
                for p in 0..h {
                    plane[p * w + q] = column[p] * scale;
                }
            }
        }
        Ok(Spectrum { channels: patch.channels, height: h, width: w, values })
    }
}

/// One-shot orthonormal 2D DFT of every channel.
pub fn dft2(patch: &Patch) -> Spectrum {
    Dft2::new([patch.height, patch.width])
        .transform(patch)
        .expect("plan built for this patch")
}

/// Per-channel `(E_DC, E_low, E_high, S)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqDescriptor {
    pub dc: Vec<f64>,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub ratio: Vec<f64>,
}

impl FreqDescriptor {
    /// `[DC(all c), low(all c), high(all c), S(all c)]`.
    pub fn flatten(&self) -> Vec<f64> {
        [&self.dc, &self.low, &self.high, &self.ratio].into_iter().flatten().copied().collect()
    }
}

/// Signed frequency index in `[−n/2, n/2)`.
#[inline]
pub fn centered(r: usize, n: usize) -> i64 {
    if r < n / 2 {
        r as i64
    } else {
        r as i64 - n as i64
    }
}

pub fn band_energies(spectrum: &Spectrum, config: &FreqConfig) -> FreqDescriptor {
    let k = config.k() as f64;
    let (lo_r, hi_r) = (config.alpha * k, config.beta * k);
    let c = spectrum.channels;
    let mut d = FreqDescriptor { dc: vec![0.0; c], low: vec![0.0; c], high: vec![0.0; c], ratio: vec![0.0; c] };
    for ch in 0..c {
        d.dc[ch] = spectrum.get(ch, 0, 0).norm();
        for r in 0..spectrum.height {
            let rc = centered(r, spectrum.height);
            for s in 0..spectrum.width {
                let sc = centered(s, spectrum.width);
                let radius = ((rc * rc + sc * sc) as f64).sqrt();
                if radius > 0.0 && radius <= lo_r {
                    d.low[ch] += spectrum.get(ch, r, s).norm();
                } else if radius > hi_r {
                    d.high[ch] += spectrum.get(ch, r, s).norm();
                }
            }
        }
        d.ratio[ch] = d.high[ch] / (d.low[ch] + config.epsilon);
    }
    d
}

#[derive(Clone, Debug)]
pub struct FreqOutput {
    /// `l × n_state`, one row per token.
    pub q: Matrix<f64>,
    /// `unique cells × 4c` descriptors.
    pub nu: Matrix<f64>,
    pub cells: TokenCells,
    /// Windows transformed for this call.
    pub dft_count: usize,
}

/// Descriptors once per occupied cell, broadcast to tokens, then projected.
pub fn q_freq(
    coords: &[[f64; 3]],
    x_sc: &FeatureMap2D,
    grid: &BevGrid,
    projection: &Linear,
    config: &FreqConfig,
) -> Result<FreqOutput> {
    config.validate()?;
    if projection.in_dim() != 4 * x_sc.channels {
        return Err(shape("frequency projection", 4 * x_sc.channels, projection.in_dim()));
    }
    let cells = token_cells(coords, grid, config.downsample);
    let plan = Dft2::new(config.window);
    let rows = cells
        .cells
        .par_iter()
        .map(|&cell| {
            let spec = plan.transform(&window_extract(x_sc, cell, config.window))?;
            Ok(band_energies(&spec, config).flatten())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let dft_count = rows.len();
    let projected: Vec<Vec<f64>> = rows.iter().map(|nu| projection.apply_f64(nu)).collect();
    let n = projection.out_dim();
    let mut q = Matrix::zeros(coords.len(), n);
    for (i, &cell) in cells.token_cell.iter().enumerate() {
        q.row_mut(i).copy_from_slice(&projected[cell]);
    }
    let nu = Matrix::from_rows(4 * x_sc.channels, &rows)?;
    Ok(FreqOutput { q, nu, cells, dft_count })
}

/// Downsampling convolution and descriptor projection for one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqWeights {
    pub conv: Conv2d,
    pub projection: Linear,
}

/// `downsample_scene` then `q_freq`.
pub fn frequency_queries(
    coords: &[[f64; 3]],
    f_sc: &FeatureMap2D,
    grid: &BevGrid,
    weights: &FreqWeights,
    config: &FreqConfig,
) -> Result<FreqOutput> {
    let x_sc = downsample_scene(f_sc, &weights.conv, config)?;
    q_freq(coords, &x_sc, grid, &weights.projection, config)
}

/// Raw dump: magic "PFNU", u32 rows, u32 cols, then f64 LE row-major.
pub fn write_descriptors(path: impl AsRef<Path>, nu: &Matrix<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * nu.as_slice().len());
    buf.extend_from_slice(b"PFNU");
    buf.extend_from_slice(&(nu.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(nu.cols() as u32).to_le_bytes());
    for v in nu.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}
