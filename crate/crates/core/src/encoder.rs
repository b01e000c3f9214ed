//! Semantic-guided dynamic state-space blocks, the stacked encoder, and
//! importance supervision / top-k filtering.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::frequency::{frequency_queries, FreqConfig, FreqWeights};
use crate::geometry::OrientedBox;
use crate::scene_context::{conv_refine, project_to_bev, BevGrid, Conv2d, ConvStack, FeatureMap2D};
use crate::serialization::{
    add_prompt, apply_group_prompts, assign_groups, importance_head, order_tokens, scene_dynamic_prompt,
    semantic_reorder, GroupWeights, OrderingMode, PromptWeights,
};
use crate::ssm::{dual_scope_scan, SelectiveWeights};
use crate::tensor::{standardize_columns, Linear, Matrix};
use crate::tokenizer::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub d: usize,
    pub d_g: usize,
    pub n_state: usize,
    pub window: usize,
    /// Scene-context channels.
    pub d_sc: usize,
    pub d_sp: usize,
    pub rank: usize,
    pub freq: FreqConfig,
    /// Token order inside each block; anything but `Semantic` is an ablation.
    pub ordering: OrderingMode,
    /// Seed for `OrderingMode::Random`.
    pub ordering_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { num_blocks: 2, d: 64, d_g: 48, n_state: 16, window: 128, d_sc: 16, d_sp: 64, rank: 8, freq: FreqConfig::default(), ordering: OrderingMode::Semantic, ordering_seed: 0 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.d, self.d_g, self.n_state, self.window, self.d_sc, self.d_sp, self.rank].contains(&0) {
            return Err(invalid("encoder dimensions must be positive"));
        }
        if self.rank > self.d_sp.min(self.d) {
            return Err(invalid(format!("prompt rank {} exceeds min(d_sp, d)", self.rank)));
        }
        self.freq.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    /// Pooled BEV map (`2d` channels) → scene context (`d_sc`).
    pub context: ConvStack,
    pub prompt: PromptWeights,
    pub groups: GroupWeights,
    /// `d_g × d`.
    pub group_prompts: Matrix<f32>,
    /// `d → 1`.
    pub importance: Linear,
    pub freq: FreqWeights,
    pub global: SelectiveWeights,
    pub local: SelectiveWeights,
}

impl BlockWeights {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let (d, dsc) = (cfg.d, cfg.d_sc);
        Self {
            context: ConvStack::zeros(2 * d, dsc),
            prompt: PromptWeights {
                conv: ConvStack::zeros(dsc, dsc),
                proj: Linear::zeros(dsc, cfg.d_sp * cfg.rank),
                g_ss: Matrix::zeros(cfg.rank, d),
                d_sp: cfg.d_sp,
            },
            groups: GroupWeights { proj: Linear::zeros(d, cfg.d_g), classify: Linear::zeros(cfg.d_g, cfg.d_g) },
            group_prompts: Matrix::zeros(cfg.d_g, d),
            importance: Linear::zeros(d, 1),
            freq: FreqWeights { conv: Conv2d::zeros(dsc, dsc, 1), projection: Linear::zeros(4 * dsc, cfg.n_state) },
            global: SelectiveWeights::zeros(d, cfg.n_state),
            local: SelectiveWeights::zeros(d, cfg.n_state),
        }
    }
}

/// Scene context `F_sc`: pooled BEV map refined by the block's context stack.
pub fn scene_context(tokens: &TokenSequence, grid: &BevGrid, context: &ConvStack) -> Result<FeatureMap2D> {
    conv_refine(&project_to_bev(tokens, grid).map, context)
}

#[derive(Clone, Debug)]
pub struct BlockOutput {
    /// Same token order as the input; `groups` and `importance` filled in,
    /// `order` holds the semantic permutation used inside the block.
    pub tokens: TokenSequence,
    pub dft_count: usize,
}

pub fn sdssb_forward(
    tokens: &TokenSequence,
    f_sc: &FeatureMap2D,
    grid: &BevGrid,
    weights: &BlockWeights,
    cfg: &EncoderConfig,
) -> Result<BlockOutput> {
    let mut feats = tokens.features.clone();
    add_prompt(&mut feats, &scene_dynamic_prompt(f_sc, &weights.prompt)?)?;
    let groups = assign_groups(&feats, &weights.groups)?;
    let perm = match cfg.ordering {
        OrderingMode::Semantic => semantic_reorder(tokens, &groups)?,
        mode => order_tokens(tokens, mode, cfg.ordering_seed)?,
    };

    let mut reordered = feats.gather_rows(&perm);
    let group_ro: Vec<usize> = perm.iter().map(|&i| groups.group_index[i]).collect();
    apply_group_prompts(&mut reordered, &group_ro, &weights.group_prompts)?;
    let (scores_ro, modulated) = importance_head(&reordered, &weights.importance)?;

    let coords_ro: Vec<[f64; 3]> = perm.iter().map(|&i| tokens.coords[i]).collect();
    let freq = frequency_queries(&coords_ro, f_sc, grid, &weights.freq, &cfg.freq)?;
    let y_ro = dual_scope_scan(
        &modulated.to_f64(),
        &weights.global.params(&modulated)?,
        &weights.local.params(&modulated)?,
        Some(&freq.q),
        cfg.window,
    )?;

    let y = y_ro.scatter_rows(&perm);
    let m = modulated.scatter_rows(&perm);
    let mut out = Matrix::from_fn(m.rows(), m.cols(), |i, j| (f64::from(m.get(i, j)) + y.get(i, j)) as f32);
    standardize_columns(&mut out);

    let mut importance = vec![0.0f32; tokens.len()];
    for (p, &i) in perm.iter().enumerate() {
        importance[i] = scores_ro[p];
    }
    let mut next = tokens.with_features(out)?;
    next.groups = groups.group_index;
    next.importance = importance;
    next.order = perm;
    Ok(BlockOutput { tokens: next, dft_count: freq.dft_count })
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub tokens: TokenSequence,
    /// Importance from the last block; 0.5 when there are no blocks.
    pub scores: Vec<f32>,
    pub dft_count: usize,
}

/// Context, then [`sdssb_forward`], once per block.
pub fn encode(tokens: &TokenSequence, blocks: &[BlockWeights], grid: &BevGrid, cfg: &EncoderConfig) -> Result<Encoded> {
    cfg.validate()?;
    if tokens.width() != cfg.d {
        return Err(shape("encoder input width", cfg.d, tokens.width()));
    }
    let mut current = tokens.clone();
    let mut scores = vec![0.5f32; tokens.len()];
    let mut dft_count = 0;
    if tokens.is_empty() {
        return Ok(Encoded { tokens: current, scores, dft_count });
    }
    for block in blocks {
        let f_sc = scene_context(&current, grid, &block.context)?;
        let out = sdssb_forward(&current, &f_sc, grid, block, cfg)?;
        dft_count += out.dft_count;
        scores.clone_from(&out.tokens.importance);
        current = out.tokens;
    }
    current.importance.clone_from(&scores);
    Ok(Encoded { tokens: current, scores, dft_count })
}

/// 1 where the coordinate lies inside any box, boundary included.
pub fn label_importance(coords: &[[f64; 3]], boxes: &[OrientedBox]) -> Result<Vec<u8>> {
    for b in boxes {
        b.validate()?;
    }
    Ok(coords.iter().map(|&p| u8::from(boxes.iter().any(|b| b.contains(p)))).collect())
}

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
const FOCAL_CLAMP: f64 = 1e-7;

/// Mean of `−α_t (1 − p_t)^γ ln p_t`.
pub fn focal_loss(scores: &[f64], labels: &[u8], alpha: f64, gamma: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(shape("focal loss", scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let s = s.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
            let (p, a) = if y != 0 { (s, alpha) } else { (1.0 - s, 1.0 - alpha) };
            -a * (1.0 - p).powf(gamma) * p.ln()
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// Indices of the `k` highest scores (ties to the lower index), ascending.
pub fn top_k_indices(scores: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(scores.len());
    if k < scores.len() {
        let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub tokens: TokenSequence,
    pub indices: Vec<usize>,
}

/// Keep the top-`k` tokens by `scores`, preserving their relative order.
pub fn importance_filter(tokens: &TokenSequence, scores: &[f32], k: usize) -> Result<Selection> {
    if scores.len() != tokens.len() {
        return Err(shape("importance_filter scores", tokens.len(), scores.len()));
    }
    let indices = top_k_indices(scores, k);
    let mut selected = tokens.select(&indices);
    selected.importance = indices.iter().map(|&i| scores[i]).collect();
    Ok(Selection { tokens: selected, indices })
}

/// Labels lifted to scores with a tiny index-based tie break, so the top
/// `|foreground|` are exactly the foreground tokens.
pub fn oracle_scores(labels: &[u8]) -> Vec<f32> {
    let n = labels.len().max(1) as f64;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| (f64::from(y) + 0.25 * (1.0 - i as f64 / n)) as f32 * 0.8)
        .collect()
}
