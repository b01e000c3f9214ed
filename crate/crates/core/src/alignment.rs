//! Multi-agent aggregation into the ego frame, the closed-loop per-token
//! offset correction for pose noise, and refinement of the fused sequence.
//!
//! Coordinates and offsets live on a `2^-20` m lattice so that
//! `P_out − P == Δ_p + δ_p` holds exactly in f64.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::comms::MessagePacket;
use crate::encoder::{encode, BlockWeights, EncoderConfig};
use crate::error::{invalid, shape, Result};
use crate::geometry::{relative_transform, Pose, RigidTransform};
use crate::scene_context::{conv_refine, per_agent_context, BevGrid, ConvStack, FeatureMap2D};
use crate::tensor::{Linear, Matrix};
use crate::tokenizer::TokenSequence;

pub const OFFSET_QUANTUM: f64 = 1.0 / (1u64 << 20) as f64;

/// Nearest multiple of [`OFFSET_QUANTUM`].
#[inline]
pub fn quantize(v: f64) -> f64 {
    (v / OFFSET_QUANTUM).round() * OFFSET_QUANTUM
}

fn quantize3(v: [f64; 3]) -> [f64; 3] {
    v.map(quantize)
}

/// `bound · tanh(u / bound)`: unit slope at zero, saturating at `±bound`.
#[inline]
pub fn soft_clip(u: f64, bound: f64) -> f64 {
    bound * (u / bound).tanh()
}

#[derive(Clone, Debug)]
pub struct FusedSequence {
    /// Ego frame; ego tokens first, then neighbors by ascending agent id.
    pub tokens: TokenSequence,
    pub ego_id: u32,
    /// Contributing agents in sequence order.
    pub agents: Vec<u32>,
}

impl FusedSequence {
    pub fn is_ego(&self, i: usize) -> bool {
        self.tokens.agent_ids[i] == self.ego_id
    }
}

fn packet_tokens(packet: &MessagePacket, t: &RigidTransform, cell: f64, embed: &[f32]) -> Result<TokenSequence> {
    if embed.len() != packet.d() {
        return Err(shape("origin embedding", packet.d(), embed.len()));
    }
    let coords: Vec<[f64; 3]> = packet
        .coords
        .iter()
        .map(|c| quantize3(t.apply(c.map(f64::from))))
        .collect();
    let cells = coords.iter().map(|p| p.map(|v| (v / cell).floor() as i32)).collect();
    let mut features = packet.features.clone();
    for i in 0..features.rows() {
        for (v, e) in features.row_mut(i).iter_mut().zip(embed) {
            *v += e;
        }
    }
    TokenSequence::new(features, coords, cells, vec![packet.agent_id; packet.k()])
}

/// Concatenate ego and neighbor tokens in the ego frame.
///
/// `origin_embed` row 0 is added to ego tokens, row 1 to every neighbor's.
pub fn aggregate(
    ego: &MessagePacket,
    neighbors: &[MessagePacket],
    transforms: &[RigidTransform],
    origin_embed: &Matrix<f32>,
    cell: f64,
) -> Result<FusedSequence> {
    if neighbors.len() != transforms.len() {
        return Err(invalid(format!(
            "aggregate: {} neighbors but {} transforms",
            neighbors.len(),
            transforms.len()
        )));
    }
    if origin_embed.rows() < 2 || origin_embed.cols() != ego.d() {
        return Err(shape(
            "origin embedding table",
            format!("2x{}", ego.d()),
            format!("{}x{}", origin_embed.rows(), origin_embed.cols()),
        ));
    }
    let mut order: Vec<usize> = (0..neighbors.len()).collect();
    order.sort_by_key(|&i| neighbors[i].agent_id);
    let mut parts = vec![packet_tokens(ego, &RigidTransform::identity(), cell, origin_embed.row(0))?];
    let mut agents = vec![ego.agent_id];
    for &i in &order {
        if neighbors[i].d() != ego.d() {
            return Err(shape("neighbor feature width", ego.d(), neighbors[i].d()));
        }
        if neighbors[i].agent_id == ego.agent_id || agents.contains(&neighbors[i].agent_id) {
            return Err(invalid(format!("duplicate agent id {}", neighbors[i].agent_id)));
        }
        parts.push(packet_tokens(&neighbors[i], &transforms[i], cell, origin_embed.row(1))?);
        agents.push(neighbors[i].agent_id);
    }
    Ok(FusedSequence { tokens: concat(&parts)?, ego_id: ego.agent_id, agents })
}

fn concat(parts: &[TokenSequence]) -> Result<TokenSequence> {
    let d = parts[0].width();
    let rows: Vec<Vec<f32>> = parts.iter().flat_map(|p| p.features.iter_rows().map(<[f32]>::to_vec)).collect();
    TokenSequence::new(
        Matrix::from_rows(d, &rows)?,
        parts.iter().flat_map(|p| p.coords.iter().copied()).collect(),
        parts.iter().flat_map(|p| p.cells.iter().copied()).collect(),
        parts.iter().flat_map(|p| p.agent_ids.iter().copied()).collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignWeights {
    /// Pooled BEV (`2d`) → `d_sc`, shared by fused and per-agent maps.
    pub context: ConvStack,
    /// `3·d_sc → d_sc` over `[fused, ego, neighbor]`.
    pub mis: ConvStack,
    /// `d_sc → d`.
    pub prompt: Linear,
    /// `d → hidden`.
    pub proposal_hidden: Linear,
    /// `hidden → 3`.
    pub proposal_out: Linear,
    /// `[F, Δ_p, μ, s]` (`d + 9`) → 3.
    pub compensate: Linear,
    /// `2 × d`: ego row, neighbor row.
    pub origin: Matrix<f32>,
}

impl AlignWeights {
    pub fn zeros(d: usize, d_sc: usize, hidden: usize) -> Self {
        Self {
            context: ConvStack::zeros(2 * d, d_sc),
            mis: ConvStack::zeros(3 * d_sc, d_sc),
            prompt: Linear::zeros(d_sc, d),
            proposal_hidden: Linear::zeros(d, hidden),
            proposal_out: Linear::zeros(hidden, 3),
            compensate: Linear::zeros(d + 9, 3),
            origin: Matrix::zeros(2, d),
        }
    }
}

/// Concatenate the three maps, refine, pool, project to a `d`-vector.
pub fn misalignment_prompt(
    fused: &FeatureMap2D,
    ego: &FeatureMap2D,
    neighbor: &FeatureMap2D,
    mis: &ConvStack,
    prompt: &Linear,
) -> Result<Vec<f32>> {
    if !fused.same_grid(ego) || !fused.same_grid(neighbor) {
        return Err(invalid("misalignment maps must share a grid"));
    }
    if prompt.in_dim() != mis.out_channels() {
        return Err(shape("misalignment prompt input", mis.out_channels(), prompt.in_dim()));
    }
    let pooled = mis.forward_concat(&[fused, ego, neighbor])?.global_average();
    Ok(prompt.apply_f64(&pooled).into_iter().map(|v| v as f32).collect())
}

/// `Δ_max · tanh(W₂ relu(W₁ F) / Δ_max)` per token, on the offset lattice.
pub fn propose_offsets(features: &Matrix<f32>, hidden: &Linear, out: &Linear, delta_max: f64) -> Result<Vec<[f64; 3]>> {
    if hidden.in_dim() != features.cols() || out.in_dim() != hidden.out_dim() || out.out_dim() != 3 {
        return Err(invalid("proposal weights do not chain d → hidden → 3"));
    }
    Ok(features
        .iter_rows()
        .map(|row| {
            let h: Vec<f64> = hidden.apply(row).into_iter().map(|v| v.max(0.0)).collect();
            let u = out.apply_f64(&h);
            quantize3([0, 1, 2].map(|a| soft_clip(u[a], delta_max)))
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetStats {
    pub mean: [f64; 3],
    /// Population standard deviation.
    pub std: [f64; 3],
    pub count: usize,
}

/// Per-agent mean and population standard deviation (Welford updates in
/// token order). Agents listed in `agents` without tokens are skipped.
pub fn offset_statistics(offsets: &[[f64; 3]], agent_ids: &[u32], agents: &[u32]) -> Result<BTreeMap<u32, OffsetStats>> {
    if offsets.len() != agent_ids.len() {
        return Err(shape("offset_statistics", offsets.len(), agent_ids.len()));
    }
    let mut acc: BTreeMap<u32, (usize, [f64; 3], [f64; 3])> = BTreeMap::new();
    for (o, a) in offsets.iter().zip(agent_ids) {
        let (n, mean, m2) = acc.entry(*a).or_insert((0, [0.0; 3], [0.0; 3]));
        *n += 1;
        for k in 0..3 {
            let delta = o[k] - mean[k];
            mean[k] += delta / *n as f64;
            m2[k] += delta * (o[k] - mean[k]);
        }
    }
    for a in agents {
        if !acc.contains_key(a) {
            log::warn!("agent {a} contributed no tokens; skipping its offset statistics");
        }
    }
    Ok(acc
        .into_iter()
        .map(|(a, (n, mean, m2))| (a, OffsetStats { mean, std: m2.map(|v| (v / n as f64).max(0.0).sqrt()), count: n }))
        .collect())
}

/// `Δ_max · tanh(W [F, Δ_p, μ, s] / Δ_max)` per token, on the offset lattice.
pub fn compensate(
    features: &Matrix<f32>,
    proposals: &[[f64; 3]],
    agent_ids: &[u32],
    stats: &BTreeMap<u32, OffsetStats>,
    weights: &Linear,
    delta_max: f64,
) -> Result<Vec<[f64; 3]>> {
    let d = features.cols();
    if weights.in_dim() != d + 9 || weights.out_dim() != 3 {
        return Err(shape("compensation weights", format!("{} -> 3", d + 9), format!("{} -> {}", weights.in_dim(), weights.out_dim())));
    }
    if proposals.len() != features.rows() || agent_ids.len() != features.rows() {
        return Err(shape("compensation inputs", features.rows(), proposals.len()));
    }
    let mut input = vec![0.0f64; d + 9];
    (0..features.rows())
        .map(|i| {
            let st = stats
                .get(&agent_ids[i])
                .ok_or_else(|| invalid(format!("no offset statistics for agent {}", agent_ids[i])))?;
            for (x, f) in input.iter_mut().zip(features.row(i)) {
                *x = f64::from(*f);
            }
            input[d..d + 3].copy_from_slice(&proposals[i]);
            input[d + 3..d + 6].copy_from_slice(&st.mean);
            input[d + 6..d + 9].copy_from_slice(&st.std);
            let u = weights.apply_f64(&input);
            Ok(quantize3([0, 1, 2].map(|a| soft_clip(u[a], delta_max))))
        })
        .collect()
}

/// `P + (Δ_p + δ_p)`.
pub fn apply_offsets(coords: &[[f64; 3]], proposals: &[[f64; 3]], compensation: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    if coords.len() != proposals.len() || coords.len() != compensation.len() {
        return Err(shape("apply_offsets", coords.len(), format!("{} / {}", proposals.len(), compensation.len())));
    }
    Ok(coords
        .iter()
        .zip(proposals.iter().zip(compensation))
        .map(|(p, (a, b))| [0, 1, 2].map(|k| p[k] + (a[k] + b[k])))
        .collect())
}

/// Per-token correction from the noisy to the true neighbor → ego mapping.
/// Ego tokens get zero.
pub fn gt_offset(
    true_poses: &BTreeMap<u32, Pose>,
    noisy_poses: &BTreeMap<u32, Pose>,
    ego_id: u32,
    coords: &[[f64; 3]],
    agent_ids: &[u32],
) -> Result<Vec<[f64; 3]>> {
    if coords.len() != agent_ids.len() {
        return Err(shape("gt_offset", coords.len(), agent_ids.len()));
    }
    let pose = |m: &BTreeMap<u32, Pose>, a: u32| m.get(&a).copied().ok_or_else(|| invalid(format!("missing pose for agent {a}")));
    let ego_true = pose(true_poses, ego_id)?;
    // `None` when the noisy pose equals the true one; the offset is then exactly zero.
    let mut cache: BTreeMap<u32, Option<(RigidTransform, RigidTransform)>> = BTreeMap::new();
    coords
        .iter()
        .zip(agent_ids)
        .map(|(p, &a)| {
            if a == ego_id {
                return Ok([0.0; 3]);
            }
            if let Entry::Vacant(slot) = cache.entry(a) {
                let (truth, noisy) = (pose(true_poses, a)?, pose(noisy_poses, a)?);
                let entry = if truth == noisy {
                    None
                } else {
                    let t_true = relative_transform(&ego_true, &truth)?;
                    Some((t_true, relative_transform(&ego_true, &noisy)?.inverse()))
                };
                slot.insert(entry);
            }
            let Some((t_true, noisy_inv)) = &cache[&a] else {
                return Ok([0.0; 3]);
            };
            let local = noisy_inv.apply(*p);
            let truth = t_true.apply(local);
            Ok([0, 1, 2].map(|k| truth[k] - p[k]))
        })
        .collect()
}

/// Mean squared error over all `3·N` offset components.
pub fn offset_loss(proposals: &[[f64; 3]], compensation: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    if proposals.len() != gt.len() || compensation.len() != gt.len() {
        return Err(shape("offset_loss", gt.len(), proposals.len()));
    }
    if gt.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = (0..gt.len())
        .flat_map(|i| (0..3).map(move |k| (i, k)))
        .map(|(i, k)| (proposals[i][k] + compensation[i][k] - gt[i][k]).powi(2))
        .sum();
    Ok(sum / (3 * gt.len()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub encoder: EncoderConfig,
    pub delta_max: f64,
    pub proposal_hidden: usize,
    pub num_blocks: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), delta_max: 2.0, proposal_hidden: 32, num_blocks: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub align: AlignWeights,
    pub blocks: Vec<BlockWeights>,
}

impl FusionWeights {
    pub fn zeros(cfg: &FusionConfig) -> Self {
        let e = &cfg.encoder;
        Self {
            align: AlignWeights::zeros(e.d, e.d_sc, cfg.proposal_hidden),
            blocks: (0..cfg.num_blocks).map(|_| BlockWeights::zeros(e)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FuseOutput {
    /// Refined tokens `H`, same order as the fused input, coords `P_out`.
    pub tokens: TokenSequence,
    pub proposals: Vec<[f64; 3]>,
    pub compensation: Vec<[f64; 3]>,
    pub stats: BTreeMap<u32, OffsetStats>,
    /// Coordinates before correction.
    pub coords_in: Vec<[f64; 3]>,
    pub dft_count: usize,
}

/// Misalignment prompts, offset proposal → statistics → compensation on
/// neighbor tokens, then the fusion block stack on the corrected sequence.
pub fn fuse(fused: &FusedSequence, weights: &FusionWeights, grid: &BevGrid, cfg: &FusionConfig) -> Result<FuseOutput> {
    let tokens = &fused.tokens;
    if tokens.is_empty() {
        return Err(invalid("fuse needs at least one token"));
    }
    let w = &weights.align;
    let mut features = tokens.features.clone();

    let neighbors: Vec<u32> = fused.agents.iter().copied().filter(|&a| a != fused.ego_id).collect();
    if !neighbors.is_empty() {
        let ctx = per_agent_context(tokens, grid, &fused.agents)?;
        let refine = |m: &FeatureMap2D| conv_refine(m, &w.context);
        let f_fuse = refine(&ctx.fused)?;
        let f_ego = refine(ctx.agent(fused.ego_id).expect("ego listed"))?;
        for &j in &neighbors {
            let f_j = refine(ctx.agent(j).expect("neighbor listed"))?;
            let prompt = misalignment_prompt(&f_fuse, &f_ego, &f_j, &w.mis, &w.prompt)?;
            for i in (0..tokens.len()).filter(|&i| tokens.agent_ids[i] == j) {
                for (v, p) in features.row_mut(i).iter_mut().zip(&prompt) {
                    *v += p;
                }
            }
        }
    }

    let mut proposals = propose_offsets(&features, &w.proposal_hidden, &w.proposal_out, cfg.delta_max)?;
    for (i, p) in proposals.iter_mut().enumerate() {
        if fused.is_ego(i) {
            *p = [0.0; 3];
        }
    }
    let stats = offset_statistics(&proposals, &tokens.agent_ids, &fused.agents)?;
    let mut compensation = compensate(&features, &proposals, &tokens.agent_ids, &stats, &w.compensate, cfg.delta_max)?;
    for (i, c) in compensation.iter_mut().enumerate() {
        if fused.is_ego(i) {
            *c = [0.0; 3];
        }
    }
    let coords_out = apply_offsets(&tokens.coords, &proposals, &compensation)?;
    let cell = grid.cell_size;
    let cells = coords_out
        .iter()
        .map(|p| [(p[0] / cell[0]).floor() as i32, (p[1] / cell[1]).floor() as i32, (p[2] / cell[0]).floor() as i32])
        .collect();
    let aligned = TokenSequence::new(features, coords_out, cells, tokens.agent_ids.clone())?;
    let enc_cfg = EncoderConfig { num_blocks: weights.blocks.len(), ..cfg.encoder };
    let encoded = encode(&aligned, &weights.blocks, grid, &enc_cfg)?;
    Ok(FuseOutput {
        tokens: encoded.tokens,
        proposals,
        compensation,
        stats,
        coords_in: tokens.coords.clone(),
        dft_count: encoded.dft_count,
    })
}
