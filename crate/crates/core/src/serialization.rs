//! 3D → 1D token ordering: raster, Z-order and Hilbert curve baselines, a
//! seeded random baseline, and the semantic (group-then-curve) reordering
//! with its prompt, grouping and importance heads.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::rng;
use crate::scene_context::{conv_refine, ConvStack, FeatureMap2D};
use crate::tensor::{argmax, sigmoid, softmax, Linear, Matrix};
use crate::tokenizer::TokenSequence;

/// `((z·h) + y)·w + x` for a cell inside `dims = [w, h, depth]`.
pub fn raster_key(cell: [u32; 3], dims: [u32; 3]) -> Result<u64> {
    if (0..3).any(|a| cell[a] >= dims[a]) {
        return Err(invalid(format!("raster_key: cell {cell:?} outside grid {dims:?}")));
    }
    let [w, h, _] = dims.map(u64::from);
    let [x, y, z] = cell.map(u64::from);
    Ok((z * h + y) * w + x)
}

/// Spread the low 32 bits of `v` to the even bit positions.
fn spread2(v: u32) -> u64 {
    let mut x = u64::from(v);
    x = (x | (x << 16)) & 0x0000_ffff_0000_ffff;
    x = (x | (x << 8)) & 0x00ff_00ff_00ff_00ff;
    x = (x | (x << 4)) & 0x0f0f_0f0f_0f0f_0f0f;
    x = (x | (x << 2)) & 0x3333_3333_3333_3333;
    x = (x | (x << 1)) & 0x5555_5555_5555_5555;
    x
}

/// Spread the low 21 bits of `v` to every third bit position.
fn spread3(v: u32) -> u64 {
    let mut x = u64::from(v) & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

/// 2D Morton key, x on even bits. Coordinates must be below 2^31.
pub fn zorder_key2(x: u32, y: u32) -> Result<u64> {
    if x >= 1 << 31 || y >= 1 << 31 {
        return Err(invalid(format!("zorder_key2: ({x}, {y}) exceeds 31 bits")));
    }
    Ok(spread2(x) | (spread2(y) << 1))
}

/// 3D Morton key: x at bit 3k, y at 3k+1, z at 3k+2. Coordinates below 2^21.
pub fn zorder_key3(x: u32, y: u32, z: u32) -> Result<u64> {
    if [x, y, z].iter().any(|&v| v >= 1 << 21) {
        return Err(invalid(format!("zorder_key3: ({x}, {y}, {z}) exceeds 21 bits")));
    }
    Ok(spread3(x) | (spread3(y) << 1) | (spread3(z) << 2))
}

/// Index along the 2D Hilbert curve of order `order` (grid side `2^order`).
pub fn hilbert_key(x: u32, y: u32, order: u32) -> Result<u64> {
    if order > 32 {
        return Err(invalid(format!("hilbert_key: order {order} above 32")));
    }
    let n: u64 = 1u64 << order;
    let (mut x, mut y) = (u64::from(x), u64::from(y));
    if x >= n || y >= n {
        return Err(invalid(format!("hilbert_key: ({x}, {y}) outside 2^{order} grid")));
    }
    let mut d = 0u64;
    let mut s = n >> 1;
    while s > 0 {
        let rx = u64::from(x & s > 0);
        let ry = u64::from(y & s > 0);
        d += s * s * ((3 * rx) ^ ry);
        if ry == 0 {
            if rx == 1 {
                x = n - 1 - x;
                y = n - 1 - y;
            }
            std::mem::swap(&mut x, &mut y);
        }
        s >>= 1;
    }
    Ok(d)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderingMode {
    Raster,
    Zorder,
    Hilbert,
    Random,
    #[default]
    Semantic,
}

impl OrderingMode {
    pub const ALL: [OrderingMode; 5] = [
        OrderingMode::Raster,
        OrderingMode::Zorder,
        OrderingMode::Hilbert,
        OrderingMode::Random,
        OrderingMode::Semantic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Raster => "raster",
            Self::Zorder => "zorder",
            Self::Hilbert => "hilbert",
            Self::Random => "random",
            Self::Semantic => "semantic",
        }
    }
}

impl fmt::Display for OrderingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OrderingMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown ordering {s:?}")))
    }
}

/// Cells shifted so the sequence minimum sits at the origin.
fn shifted_cells(cells: &[[i32; 3]]) -> Vec<[u32; 3]> {
    let mut lo = [i32::MAX; 3];
    for c in cells {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
        }
    }
    cells
        .iter()
        .map(|c| [0, 1, 2].map(|a| (i64::from(c[a]) - i64::from(lo[a])) as u32))
        .collect()
}

fn bits_for(max: u32) -> u32 {
    32 - max.leading_zeros()
}

/// Permutation (sequence position → token index) for a curve or random
/// baseline. `Semantic` needs groups populated on the sequence.
pub fn order_tokens(tokens: &TokenSequence, mode: OrderingMode, seed: u64) -> Result<Vec<usize>> {
    let n = tokens.len();
    let cells = shifted_cells(&tokens.cells);
    let mut perm: Vec<usize> = (0..n).collect();
    match mode {
        OrderingMode::Raster => {
            let mut dims = [1u32; 3];
            for c in &cells {
                for a in 0..3 {
                    dims[a] = dims[a].max(c[a] + 1);
                }
            }
            let keys = cells.iter().map(|&c| raster_key(c, dims)).collect::<Result<Vec<_>>>()?;
            perm.sort_by_key(|&i| keys[i]);
        }
        OrderingMode::Zorder => {
            let keys = cells.iter().map(|c| zorder_key3(c[0], c[1], c[2])).collect::<Result<Vec<_>>>()?;
            perm.sort_by_key(|&i| keys[i]);
        }
        OrderingMode::Hilbert => {
            let max = cells.iter().map(|c| c[0].max(c[1])).max().unwrap_or(0);
            let order = bits_for(max).max(1);
            let keys = cells
                .iter()
                .map(|c| hilbert_key(c[0], c[1], order))
                .collect::<Result<Vec<_>>>()?;
            perm.sort_by_key(|&i| (keys[i], cells[i][2]));
        }
        OrderingMode::Random => {
            let mut r = rng::stream(seed, rng::stream_id("random-order", 0));
            perm.shuffle(&mut r);
        }
        OrderingMode::Semantic => {
            if tokens.groups.len() != n {
                return Err(invalid("semantic ordering needs group assignments"));
            }
            return semantic_reorder_cells(&tokens.cells, &tokens.agent_ids, &tokens.groups);
        }
    }
    Ok(perm)
}

/// Mean `|pos(i) − pos(j)|` over each token `i` and its `k` nearest spatial
/// neighbors `j`. Lower means the ordering keeps neighbors close.
pub fn locality_metric(coords: &[[f64; 3]], perm: &[usize], k: usize) -> f64 {
    let n = coords.len();
    if n < 2 || k == 0 {
        return 0.0;
    }
    let mut pos = vec![0usize; n];
    for (p, &i) in perm.iter().enumerate() {
        pos[i] = p;
    }
    let k = k.min(n - 1);
    let mut total = 0.0;
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        dists.clear();
        for j in (0..n).filter(|&j| j != i) {
            let d2: f64 = (0..3).map(|a| (coords[i][a] - coords[j][a]).powi(2)).sum();
            dists.push((d2, j));
        }
        dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &dists[..k] {
            total += pos[i].abs_diff(pos[j]) as f64;
        }
    }
    total / (n * k) as f64
}

/// Low-rank prompt factors.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePrompt {
    /// `d_sp × r`, scene specific.
    pub g_sp: Matrix<f64>,
    /// `r × d`, shared across scenes.
    pub g_ss: Matrix<f32>,
}

impl ScenePrompt {
    pub fn validate(&self) -> Result<()> {
        if self.g_sp.cols() != self.g_ss.rows() {
            return Err(shape("ScenePrompt rank", self.g_sp.cols(), self.g_ss.rows()));
        }
        let r = self.g_sp.cols();
        if r > self.g_sp.rows().min(self.g_ss.cols()) {
            return Err(invalid("prompt rank exceeds min(d_sp, d)"));
        }
        Ok(())
    }

    /// `G_s = G_sp · G_ss` averaged over its `d_sp` rows.
    pub fn pooled(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let (dsp, r, d) = (self.g_sp.rows(), self.g_sp.cols(), self.g_ss.cols());
        let mut out = vec![0.0f64; d];
        for i in 0..dsp {
            for k in 0..r {
                let a = self.g_sp.get(i, k);
                for (o, b) in out.iter_mut().zip(self.g_ss.row(k)) {
                    *o += a * f64::from(*b);
                }
            }
        }
        out.iter_mut().for_each(|o| *o /= dsp as f64);
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptWeights {
    pub conv: ConvStack,
    /// `d_sc → d_sp · r`; output reshaped row-major to `d_sp × r`.
    pub proj: Linear,
    /// `r × d`.
    pub g_ss: Matrix<f32>,
    pub d_sp: usize,
}

impl PromptWeights {
    pub fn rank(&self) -> usize {
        self.g_ss.rows()
    }
}

/// Scene-specific factor from a context map: refine, pool, project.
pub fn scene_specific_factor(f_sc: &FeatureMap2D, weights: &PromptWeights) -> Result<Matrix<f64>> {
    let r = weights.rank();
    if weights.proj.out_dim() != weights.d_sp * r {
        return Err(shape("prompt projection", weights.d_sp * r, weights.proj.out_dim()));
    }
    if weights.proj.in_dim() != weights.conv.out_channels() {
        return Err(shape("prompt projection input", weights.conv.out_channels(), weights.proj.in_dim()));
    }
    let refined = conv_refine(f_sc, &weights.conv)?;
    let pooled = refined.global_average();
    Matrix::from_vec(weights.d_sp, r, weights.proj.apply_f64(&pooled))
}

/// Scene-dynamic prompt: a single `d`-vector the caller adds to every token.
pub fn scene_dynamic_prompt(f_sc: &FeatureMap2D, weights: &PromptWeights) -> Result<Vec<f32>> {
    let prompt = ScenePrompt {
        g_sp: scene_specific_factor(f_sc, weights)?,
        g_ss: weights.g_ss.clone(),
    };
    Ok(prompt.pooled()?.into_iter().map(|v| v as f32).collect())
}

/// Add `prompt` to every row.
pub fn add_prompt(features: &mut Matrix<f32>, prompt: &[f32]) -> Result<()> {
    if prompt.len() != features.cols() {
        return Err(shape("prompt width", features.cols(), prompt.len()));
    }
    for i in 0..features.rows() {
        for (v, p) in features.row_mut(i).iter_mut().zip(prompt) {
            *v += p;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupAssignment {
    pub group_index: Vec<usize>,
    /// `l × d_g`, rows on the simplex.
    pub probs: Matrix<f64>,
}

impl GroupAssignment {
    pub fn num_groups(&self) -> usize {
        self.probs.cols()
    }
}

/// Two stacked linear maps `d → d_g → d_g` ahead of the softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    pub proj: Linear,
    pub classify: Linear,
}

pub fn assign_groups(features: &Matrix<f32>, weights: &GroupWeights) -> Result<GroupAssignment> {
    if weights.proj.in_dim() != features.cols() {
        return Err(shape("group projection", weights.proj.in_dim(), features.cols()));
    }
    if weights.classify.in_dim() != weights.proj.out_dim() {
        return Err(shape("group classifier", weights.proj.out_dim(), weights.classify.in_dim()));
    }
    let dg = weights.classify.out_dim();
    let mut probs = Matrix::zeros(features.rows(), dg);
    let mut group_index = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        let hidden = weights.proj.apply(features.row(i));
        let p = softmax(&weights.classify.apply_f64(&hidden));
        group_index.push(argmax(&p));
        probs.row_mut(i).copy_from_slice(&p);
    }
    Ok(GroupAssignment { group_index, probs })
}

fn semantic_reorder_cells(cells: &[[i32; 3]], agents: &[u32], groups: &[usize]) -> Result<Vec<usize>> {
    let shifted = shifted_cells(cells);
    let keys = shifted
        .iter()
        .map(|c| zorder_key2(c[0], c[1]))
        .collect::<Result<Vec<_>>>()?;
    let mut perm: Vec<usize> = (0..cells.len()).collect();
    perm.sort_by_key(|&i| (groups[i], keys[i], shifted[i][2], agents[i]));
    Ok(perm)
}

/// Stable sort by `(group, 2D Z-order of the xy cell)`; z and agent id break
/// remaining ties.
pub fn semantic_reorder(tokens: &TokenSequence, groups: &GroupAssignment) -> Result<Vec<usize>> {
    if groups.group_index.len() != tokens.len() {
        return Err(shape("semantic_reorder groups", tokens.len(), groups.group_index.len()));
    }
    semantic_reorder_cells(&tokens.cells, &tokens.agent_ids, &groups.group_index)
}

/// `token += G_g[group]`.
pub fn apply_group_prompts(features: &mut Matrix<f32>, groups: &[usize], group_prompts: &Matrix<f32>) -> Result<()> {
    if group_prompts.cols() != features.cols() {
        return Err(shape("group prompts width", features.cols(), group_prompts.cols()));
    }
    if groups.len() != features.rows() {
        return Err(shape("group prompts rows", features.rows(), groups.len()));
    }
    for (i, &g) in groups.iter().enumerate() {
        if g >= group_prompts.rows() {
            return Err(invalid(format!("group {g} has no prompt row")));
        }
        for (v, p) in features.row_mut(i).iter_mut().zip(group_prompts.row(g)) {
            *v += p;
        }
    }
    Ok(())
}

/// Sigmoid saliency per token and the tokens scaled by it.
pub fn importance_head(features: &Matrix<f32>, weights: &Linear) -> Result<(Vec<f32>, Matrix<f32>)> {
    if weights.out_dim() != 1 || weights.in_dim() != features.cols() {
        return Err(shape(
            "importance head",
            format!("{} -> 1", features.cols()),
            format!("{} -> {}", weights.in_dim(), weights.out_dim()),
        ));
    }
    let mut out = features.clone();
    let mut scores = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        let s = sigmoid(weights.apply(features.row(i))[0]);
        for v in out.row_mut(i) {
            *v = (f64::from(*v) * s) as f32;
        }
        scores.push(s as f32);
    }
    Ok((scores, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_context::{Activation, Conv2d};
    use rand::Rng;
    use std::collections::HashSet;

    #[test]
    fn raster_examples() {
        assert_eq!(raster_key([0, 0, 0], [10, 10, 10]).unwrap(), 0);
        assert_eq!(raster_key([1, 0, 0], [10, 4, 3]).unwrap(), 1);
        assert!(raster_key([10, 0, 0], [10, 4, 3]).is_err());
        let dims = [5, 4, 3];
        let mut seen = HashSet::new();
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    assert!(seen.insert(raster_key([x, y, z], dims).unwrap()));
                }
            }
        }
        assert_eq!(seen.len(), 60);
    }

    /// Bit-by-bit interleave used as an independent check of the magic masks.
    fn interleave_naive(coords: &[u32]) -> u64 {
        let dims = coords.len();
        let mut key = 0u64;
        for bit in 0..(64 / dims) {
            for (a, &c) in coords.iter().enumerate() {
                if c >> bit & 1 == 1 {
                    key |= 1 << (bit * dims + a);
                }
            }
        }
        key
    }

    #[test]
    fn zorder_examples() {
        assert_eq!(zorder_key2(0, 0).unwrap(), 0);
        assert_eq!(zorder_key2(3, 5).unwrap(), 39);
        assert_eq!(zorder_key3(1, 0, 0).unwrap(), 1);
        assert_eq!(zorder_key3(0, 1, 0).unwrap(), 2);
        assert_eq!(zorder_key3(0, 0, 1).unwrap(), 4);
        assert!(zorder_key2(1 << 31, 0).is_err());
        assert!(zorder_key3(0, 1 << 21, 0).is_err());
        let keys: HashSet<u64> = (0..16).flat_map(|x| (0..16).map(move |y| zorder_key2(x, y).unwrap())).collect();
        assert_eq!(keys, (0..256).collect());
    }

    #[test]
    fn zorder_masks_match_naive_interleave() {
        let mut rng = rng::stream(1, 0);
        for _ in 0..1000 {
            let (x, y) = (rng.random_range(0..1u32 << 31), rng.random_range(0..1u32 << 31));
            assert_eq!(zorder_key2(x, y).unwrap(), interleave_naive(&[x, y]));
            let (a, b, c) = (
                rng.random_range(0..1u32 << 21),
                rng.random_range(0..1u32 << 21),
                rng.random_range(0..1u32 << 21),
            );
            assert_eq!(zorder_key3(a, b, c).unwrap(), interleave_naive(&[a, b, c]));
        }
    }

    #[test]
    fn hilbert_order_one() {
        let keys: Vec<u64> = [(0, 0), (0, 1), (1, 1), (1, 0)]
            .iter()
            .map(|&(x, y)| hilbert_key(x, y, 1).unwrap())
            .collect();
        assert_eq!(keys, vec![0, 1, 2, 3]);
        assert!(hilbert_key(2, 0, 1).is_err());
    }

    #[test]
    fn hilbert_traversal_is_adjacent() {
        for b in 1..=6u32 {
            let n = 1u32 << b;
            let mut cells = vec![(0u32, 0u32); (n * n) as usize];
            for x in 0..n {
                for y in 0..n {
                    cells[hilbert_key(x, y, b).unwrap() as usize] = (x, y);
                }
            }
            for w in cells.windows(2) {
                assert_eq!(w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1), 1);
            }
        }
    }

    fn seq_with_cells(cells: Vec<[i32; 3]>) -> TokenSequence {
        let n = cells.len();
        let coords = cells.iter().map(|c| c.map(|v| f64::from(v) + 0.5)).collect();
        TokenSequence::new(Matrix::zeros(n, 2), coords, cells, vec![0; n]).unwrap()
    }

    fn random_cells(seed: u64, n: usize, span: i32) -> Vec<[i32; 3]> {
        let mut rng = rng::stream(seed, 0);
        let mut set = HashSet::new();
        while set.len() < n {
            set.insert([rng.random_range(-span..span), rng.random_range(-span..span), rng.random_range(-2..2)]);
        }
        let mut v: Vec<_> = set.into_iter().collect();
        v.sort();
        v
    }

    fn is_bijection(perm: &[usize]) -> bool {
        let mut s = perm.to_vec();
        s.sort_unstable();
        s.iter().enumerate().all(|(i, &v)| i == v)
    }

    #[test]
    fn every_ordering_is_a_bijection() {
        let mut seq = seq_with_cells(random_cells(2, 300, 40));
        seq.groups = (0..seq.len()).map(|i| i % 5).collect();
        for mode in OrderingMode::ALL {
            let p = order_tokens(&seq, mode, 9).unwrap();
            assert!(is_bijection(&p), "{mode}");
        }
        assert!(order_tokens(&seq_with_cells(vec![[0, 0, 0]]), OrderingMode::Semantic, 0).is_err());
    }

    #[test]
    fn random_ordering_is_seeded() {
        let seq = seq_with_cells(random_cells(3, 50, 10));
        let a = order_tokens(&seq, OrderingMode::Random, 1).unwrap();
        assert_eq!(a, order_tokens(&seq, OrderingMode::Random, 1).unwrap());
        assert_ne!(a, order_tokens(&seq, OrderingMode::Random, 2).unwrap());
    }

    #[test]
    fn hilbert_beats_random_locality() {
        // paired one-sided t-test over 20 uniform scenes, df = 19
        let diffs: Vec<f64> = (0..20)
            .map(|s| {
                let seq = seq_with_cells(random_cells(100 + s, 400, 30));
                let h = order_tokens(&seq, OrderingMode::Hilbert, s).unwrap();
                let r = order_tokens(&seq, OrderingMode::Random, s).unwrap();
                locality_metric(&seq.coords, &r, 4) - locality_metric(&seq.coords, &h, 4)
            })
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let t = mean / (sd / n.sqrt());
        assert!(t > 1.729, "t = {t}");
    }

    #[test]
    fn prompt_rank_one_identity() {
        let g_ss = Matrix::from_fn(1, 4, |_, j| j as f32 - 1.5);
        let p = ScenePrompt { g_sp: Matrix::from_fn(6, 1, |_, _| 1.0), g_ss: g_ss.clone() };
        let v = p.pooled().unwrap();
        for j in 0..4 {
            assert_eq!(v[j], f64::from(g_ss.get(0, j)));
        }
    }

    fn prompt_weights(seed: u64, dsc: usize, dsp: usize, r: usize, d: usize) -> PromptWeights {
        let mut rng = rng::stream(seed, 3);
        let mut u = || rng.random_range(-0.5f32..0.5);
        let conv = |u: &mut dyn FnMut() -> f32| Conv2d {
            in_channels: dsc,
            out_channels: dsc,
            stride: [1, 1],
            weight: (0..9 * dsc * dsc).map(|_| u()).collect(),
            bias: vec![0.0; dsc],
        };
        let first = conv(&mut u);
        let second = conv(&mut u);
        PromptWeights {
            conv: ConvStack { first, second, activation: Activation::Relu },
            proj: Linear::new(Matrix::from_fn(dsp * r, dsc, |_, _| u()), (0..dsp * r).map(|_| u()).collect()).unwrap(),
            g_ss: Matrix::from_fn(r, d, |_, _| u()),
            d_sp: dsp,
        }
    }

    #[test]
    fn zero_context_zero_bias_gives_zero_prompt() {
        let mut w = prompt_weights(4, 3, 8, 2, 5);
        w.proj.bias.iter_mut().for_each(|b| *b = 0.0);
        let p = scene_dynamic_prompt(&FeatureMap2D::zeros(3, 4, 4), &w).unwrap();
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scene_prompt_matches_dense_oracle() {
        let w = prompt_weights(5, 3, 8, 2, 5);
        let mut rng = rng::stream(6, 0);
        let f = FeatureMap2D::from_fn(3, 5, 6, |_, _, _| rng.random_range(-1.0..1.0));
        let got = scene_dynamic_prompt(&f, &w).unwrap();

        let refined = conv_refine(&f, &w.conv).unwrap();
        let pooled = refined.global_average();
        let mut gsp = vec![0.0; 16];
        for (o, g) in gsp.iter_mut().enumerate() {
            *g = f64::from(w.proj.bias[o])
                + (0..3).map(|i| f64::from(w.proj.weight.get(o, i)) * pooled[i]).sum::<f64>();
        }
        for j in 0..5 {
            let mut acc = 0.0;
            for row in 0..8 {
                for k in 0..2 {
                    acc += gsp[row * 2 + k] * f64::from(w.g_ss.get(k, j));
                }
            }
            assert!((f64::from(got[j]) - acc / 8.0).abs() < 1e-6);
        }
        let bad = PromptWeights { d_sp: 7, ..w };
        assert!(scene_dynamic_prompt(&f, &bad).is_err());
    }

    fn group_weights(seed: u64, d: usize, dg: usize) -> GroupWeights {
        let mut rng = rng::stream(seed, 4);
        let mut lin = |i: usize, o: usize| {
            Linear::new(
                Matrix::from_fn(o, i, |_, _| rng.random_range(-0.5..0.5)),
                (0..o).map(|_| rng.random_range(-0.1..0.1)).collect(),
            )
            .unwrap()
        };
        GroupWeights { proj: lin(d, dg), classify: lin(dg, dg) }
    }

    #[test]
    fn dominated_logit_wins() {
        let mut w = GroupWeights { proj: Linear::zeros(4, 48), classify: Linear::zeros(48, 48) };
        w.classify.bias[17] = 10.0;
        let f = Matrix::from_fn(5, 4, |i, j| (i + j) as f32);
        let g = assign_groups(&f, &w).unwrap();
        assert!(g.group_index.iter().all(|&k| k == 17));
        assert!((0..5).all(|i| g.probs.get(i, 17) > 0.99));
    }

    #[test]
    fn uniform_logits_tie_break_low() {
        let w = GroupWeights { proj: Linear::zeros(4, 48), classify: Linear::zeros(48, 48) };
        let g = assign_groups(&Matrix::from_fn(3, 4, |_, _| 1.0), &w).unwrap();
        assert_eq!(g.group_index, vec![0, 0, 0]);
        for i in 0..3 {
            for k in 0..48 {
                assert!((g.probs.get(i, k) - 1.0 / 48.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn groups_match_naive_oracle() {
        let w = group_weights(7, 6, 48);
        let mut rng = rng::stream(8, 0);
        let f = Matrix::from_fn(40, 6, |_, _| rng.random_range(-2.0..2.0));
        let g = assign_groups(&f, &w).unwrap();
        for i in 0..40 {
            let hidden: Vec<f64> = (0..48)
                .map(|o| f64::from(w.proj.bias[o]) + (0..6).map(|j| f64::from(w.proj.weight.get(o, j)) * f64::from(f.get(i, j))).sum::<f64>())
                .collect();
            let logits: Vec<f64> = (0..48)
                .map(|o| f64::from(w.classify.bias[o]) + (0..48).map(|j| f64::from(w.classify.weight.get(o, j)) * hidden[j]).sum::<f64>())
                .collect();
            let best = (0..48).fold(0, |b, k| if logits[k] > logits[b] { k } else { b });
            assert_eq!(g.group_index[i], best);
            assert!((g.probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(g.probs.row(i).iter().all(|&p| p >= 0.0));
        }
    }

    fn assignment(groups: Vec<usize>) -> GroupAssignment {
        let n = groups.len();
        GroupAssignment { group_index: groups, probs: Matrix::zeros(n, 1) }
    }

    #[test]
    fn single_group_is_pure_zorder() {
        let seq = seq_with_cells(random_cells(9, 100, 20).into_iter().map(|c| [c[0], c[1], 0]).collect());
        let perm = semantic_reorder(&seq, &assignment(vec![0; seq.len()])).unwrap();
        let shifted = shifted_cells(&seq.cells);
        let keys: Vec<u64> = perm.iter().map(|&i| zorder_key2(shifted[i][0], shifted[i][1]).unwrap()).collect();
        assert!(keys.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn group_blocks_are_contiguous() {
        let seq = seq_with_cells(random_cells(10, 60, 10));
        let groups: Vec<usize> = (0..60).map(|i| usize::from(i % 3 == 0)).collect();
        let perm = semantic_reorder(&seq, &assignment(groups.clone())).unwrap();
        let seen: Vec<usize> = perm.iter().map(|&i| groups[i]).collect();
        let first_one = seen.iter().position(|&g| g == 1).unwrap();
        assert!(seen[..first_one].iter().all(|&g| g == 0));
        assert!(seen[first_one..].iter().all(|&g| g == 1));
    }

    #[test]
    fn semantic_reorder_matches_reference_sort_and_ignores_input_order() {
        let seq = seq_with_cells(random_cells(11, 200, 25));
        let mut rng = rng::stream(12, 0);
        let groups: Vec<usize> = (0..200).map(|_| rng.random_range(0..6)).collect();
        let perm = semantic_reorder(&seq, &assignment(groups.clone())).unwrap();
        assert!(is_bijection(&perm));
        // reference: sort full key tuples
        let shifted = shifted_cells(&seq.cells);
        let mut reference: Vec<(usize, u64, u32, usize)> = (0..200)
            .map(|i| (groups[i], interleave_naive(&[shifted[i][0], shifted[i][1]]), shifted[i][2], i))
            .collect();
        reference.sort();
        assert_eq!(perm, reference.iter().map(|r| r.3).collect::<Vec<_>>());

        let rev: Vec<usize> = (0..200).rev().collect();
        let seq_rev = seq.select(&rev);
        let groups_rev: Vec<usize> = rev.iter().map(|&i| groups[i]).collect();
        let perm_rev = semantic_reorder(&seq_rev, &assignment(groups_rev)).unwrap();
        let a: Vec<[i32; 3]> = perm.iter().map(|&i| seq.cells[i]).collect();
        let b: Vec<[i32; 3]> = perm_rev.iter().map(|&i| seq_rev.cells[i]).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn group_prompt_cases() {
        let mut f = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f32);
        let orig = f.clone();
        apply_group_prompts(&mut f, &[0, 1, 0], &Matrix::zeros(2, 4)).unwrap();
        assert_eq!(f, orig);

        let mut onehot = Matrix::zeros(2, 3);
        let gg = Matrix::from_fn(3, 3, |i, j| (10 * i + j) as f32);
        apply_group_prompts(&mut onehot, &[2, 1], &gg).unwrap();
        assert_eq!(onehot.row(0), gg.row(2));
        assert_eq!(onehot.row(1), gg.row(1));
        assert!(apply_group_prompts(&mut onehot, &[5, 0], &gg).is_err());
    }

    #[test]
    fn importance_head_cases() {
        let f = Matrix::from_fn(4, 3, |i, j| (i as f32) - (j as f32) * 0.5);
        let (s, m) = importance_head(&f, &Linear::zeros(3, 1)).unwrap();
        assert!(s.iter().all(|&v| v == 0.5));
        for (a, b) in m.as_slice().iter().zip(f.as_slice()) {
            assert_eq!(*a, b * 0.5);
        }
        let mut sat = Linear::zeros(3, 1);
        sat.bias[0] = 20.0;
        let (s, m) = importance_head(&f, &sat).unwrap();
        assert!(s.iter().all(|&v| (1.0 - f64::from(v)) < 1e-8));
        for (a, b) in m.as_slice().iter().zip(f.as_slice()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        assert!(importance_head(&f, &Linear::zeros(3, 2)).is_err());
    }
}
