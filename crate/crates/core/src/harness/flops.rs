//! Closed-form operation counts. A multiply-add counts as two operations.
//!
//! | module    | count                                         |
//! |-----------|-----------------------------------------------|
//! | `linear`  | `2 · tokens · d_in · d_out`                   |
//! | `scan`    | `tokens · (5·n·d + 3·d + 4·n)`                |
//! | `conv3x3` | `2 · 9 · c_in · c_out · pixels` (dense)       |
//! | `dft`     | `2 · (H_k·W_k)² · windows · channels`         |
//! | `elementwise` | `tokens · d`                              |

use serde::{Deserialize, Serialize};

use crate::alignment::FusionConfig;
use crate::encoder::EncoderConfig;
use crate::error::{invalid, Result};
use crate::scene_context::BevGrid;
use crate::ssm::scan_flops;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlopParams {
    pub tokens: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// Token width for scans and elementwise ops.
    pub d: usize,
    pub n_state: usize,
    pub pixels: usize,
    /// `[H_k, W_k]`.
    pub window: [usize; 2],
    pub windows: usize,
    pub channels: usize,
}

pub const MODULES: [&str; 5] = ["linear", "scan", "conv3x3", "dft", "elementwise"];

pub fn flop_estimate(module: &str, p: &FlopParams) -> Result<u64> {
    let u = |v: usize| v as u64;
    Ok(match module {
        "linear" => 2 * u(p.tokens) * u(p.d_in) * u(p.d_out),
        "scan" => scan_flops(p.tokens, p.n_state, p.d),
        "conv3x3" => 2 * 9 * u(p.d_in) * u(p.d_out) * u(p.pixels),
        "dft" => 2 * (u(p.window[0]) * u(p.window[1])).pow(2) * u(p.windows) * u(p.channels),
        "elementwise" => u(p.tokens) * u(p.d),
        other => return Err(invalid(format!("unknown FLOP module {other:?}; known: {}", MODULES.join(", ")))),
    })
}

fn linear(tokens: usize, d_in: usize, d_out: usize) -> u64 {
    flop_estimate("linear", &FlopParams { tokens, d_in, d_out, ..Default::default() }).expect("known module")
}

fn conv(pixels: usize, d_in: usize, d_out: usize) -> u64 {
    flop_estimate("conv3x3", &FlopParams { pixels, d_in, d_out, ..Default::default() }).expect("known module")
}

/// Dense two-layer refinement stack.
fn conv_stack(pixels: usize, d_in: usize, d_out: usize) -> u64 {
    conv(pixels, d_in, d_out) + conv(pixels, d_out, d_out)
}

/// One block over `tokens` tokens that transformed `windows` spectral windows.
pub fn block_flops(tokens: usize, windows: usize, grid: &BevGrid, cfg: &EncoderConfig) -> u64 {
    if tokens == 0 {
        return 0;
    }
    let (d, n, dsc) = (cfg.d, cfg.n_state, cfg.d_sc);
    let pixels = grid.height * grid.width;
    let [sr, sc] = cfg.freq.stride_rc();
    let down_pixels = grid.height.div_ceil(sr) * grid.width.div_ceil(sc);
    let window = [cfg.freq.window[0], cfg.freq.window[1]];
    let elementwise = |k: usize| k as u64 * (tokens * d) as u64;

    let context = conv_stack(pixels, 2 * d, dsc);
    let prompt = conv_stack(pixels, dsc, dsc) + linear(1, dsc, cfg.d_sp * cfg.rank) + linear(cfg.d_sp, cfg.rank, d);
    let groups = linear(tokens, d, cfg.d_g) + linear(tokens, cfg.d_g, cfg.d_g);
    let importance = linear(tokens, d, 1);
    let freq = conv(down_pixels, dsc, dsc)
        + flop_estimate("dft", &FlopParams { window, windows, channels: dsc, ..Default::default() }).expect("known module")
        + linear(tokens, 4 * dsc, n);
    let selective = 2 * (linear(tokens, d, 1) + 2 * linear(tokens, d, n));
    let scans = 2 * scan_flops(tokens, n, d);
    // prompt add, group prompt add, modulation, residual add, standardize (3)
    context + prompt + groups + importance + freq + selective + scans + elementwise(7)
}

/// Misalignment prompts, offset proposal and compensation, excluding the
/// fusion blocks.
pub fn alignment_flops(tokens: usize, neighbors: usize, grid: &BevGrid, cfg: &FusionConfig) -> u64 {
    if tokens == 0 {
        return 0;
    }
    let e = &cfg.encoder;
    let pixels = grid.height * grid.width;
    let context = if neighbors > 0 { (neighbors as u64 + 2) * conv_stack(pixels, 2 * e.d, e.d_sc) } else { 0 };
    let mis = neighbors as u64 * (conv_stack(pixels, 3 * e.d_sc, e.d_sc) + linear(1, e.d_sc, e.d));
    let proposal = linear(tokens, e.d, cfg.proposal_hidden) + linear(tokens, cfg.proposal_hidden, 3);
    let compensate = linear(tokens, e.d + 9, 3);
    // prompt add, offset sums
    context + mis + proposal + compensate + (tokens * e.d) as u64 + 6 * tokens as u64
}
