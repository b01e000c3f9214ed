//! End-to-end simulator: synthetic scenes, the full per-agent pipeline,
//! fusion at the ego, analytic FLOPs, and reports.
//!
//! Perception quality is proxied by foreground-token recall: the share of
//! all agents' foreground tokens that reach the ego's fusion. No detector is
//! trained here.

pub mod flops;
pub mod report;
pub mod scene;
pub mod sweep;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{aggregate, fuse, gt_offset, offset_loss, FusionConfig};
use crate::comms::{comm_volume, pack, unpack, CommReport, MessagePacket};
use crate::encoder::{encode, importance_filter, label_importance, oracle_scores, EncoderConfig};
use crate::error::{invalid, Result};
use crate::geometry::{perturb_pose, relative_transform, NoiseSpec, OrientedBox, Pose};
use crate::rng;
use crate::scene_context::BevGrid;
use crate::serialization::{locality_metric, order_tokens, OrderingMode};
use crate::tokenizer::{embed, tokenize_as, TokenSequence, TokenizerConfig};
use crate::weights::{load, ModelConfig, ModelWeights};

use flops::{alignment_flops, block_flops, flop_estimate, FlopParams};
use scene::{generate_scene, Scene, SceneSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Ground-truth labels with an index tie break.
    #[default]
    Oracle,
    /// The encoder's importance head.
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub scene: SceneSpec,
    pub grid_interval: f64,
    /// Tokens each agent sends; `None` sends everything.
    pub top_k: Option<usize>,
    /// Neighbor localization noise, meters.
    pub noise_pos_std: f64,
    /// Neighbor localization noise, radians.
    pub noise_rot_std: f64,
    pub ordering: OrderingMode,
    pub score_mode: ScoreMode,
    /// Growth of ground-truth boxes for labelling; `None` is half a cell,
    /// which admits every cell a surface point falls in.
    pub label_margin: Option<f64>,
    /// Ego tokens sampled for the curve-locality metric; 0 disables it.
    pub locality_sample: usize,
    pub locality_neighbors: usize,
    pub model: ModelConfig,
    /// Manifest written by `weights::save`; random init from `seed` otherwise.
    pub weights: Option<PathBuf>,
    /// Wall times make reports differ between runs, so they are opt-in.
    pub record_timings: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            scene: SceneSpec::default(),
            grid_interval: 0.4,
            top_k: Some(1300),
            noise_pos_std: 0.0,
            noise_rot_std: 0.0,
            ordering: OrderingMode::Semantic,
            score_mode: ScoreMode::Oracle,
            label_margin: None,
            locality_sample: 1024,
            locality_neighbors: 8,
            model: ModelConfig::default(),
            weights: None,
            record_timings: false,
        }
    }
}

impl ScenarioConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.tokenizer().validate()?;
        self.model.validate()?;
        if self.top_k == Some(0) {
            return Err(invalid("top_k must be positive"));
        }
        if !(self.noise_pos_std >= 0.0 && self.noise_rot_std >= 0.0) {
            return Err(invalid("noise standard deviations must be non-negative"));
        }
        if self.label_margin.is_some_and(|m| !(m >= 0.0)) {
            return Err(invalid("label_margin must be non-negative"));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig { grid_interval: self.grid_interval, range: self.scene.range, ..TokenizerConfig::default() }
    }

    pub fn label_margin(&self) -> f64 {
        self.label_margin.unwrap_or(0.5 * self.grid_interval)
    }

    fn encoder(&self) -> EncoderConfig {
        EncoderConfig { ordering: self.ordering, ordering_seed: self.seed, ..self.model.encoder }
    }

    fn fusion(&self) -> FusionConfig {
        let f = self.model.fusion;
        FusionConfig { encoder: EncoderConfig { ordering: self.ordering, ordering_seed: self.seed, ..f.encoder }, ..f }
    }

    pub fn noise_for(&self, agent: u32) -> NoiseSpec {
        NoiseSpec {
            pos_std: self.noise_pos_std,
            rot_std: self.noise_rot_std,
            seed: rng::stream_id("agent-noise", (self.seed << 32) ^ u64::from(agent)),
            full_6dof: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentReport {
    pub agent_id: u32,
    pub raw_points: usize,
    pub tokens: usize,
    pub foreground_tokens: usize,
    pub selected_k: usize,
    pub selected_foreground: usize,
    pub comm: CommReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommSummary {
    /// Sums over all agents' packets.
    pub payload_bytes: u64,
    pub total_bytes: u64,
    pub log2_total_bytes: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenBudget {
    /// Ego tokens inside each ground-truth box.
    pub per_vehicle: Vec<usize>,
    pub mean_per_vehicle: f64,
    pub total_foreground: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// Foreground tokens across all agents before filtering.
    pub foreground_total: usize,
    /// The ego's own foreground plus the neighbors' transmitted foreground.
    pub foreground_retained: usize,
    /// `foreground_retained / foreground_total`, 1 when there is no foreground.
    pub recall: f64,
    /// Retained foreground tokens whose ego-frame position before offset
    /// correction lies in a ground-truth box, over `foreground_total`.
    pub aligned_recall_raw: f64,
    /// Same, after offset correction.
    pub aligned_recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub embed: u64,
    pub encoder: u64,
    pub alignment: u64,
    pub fusion: u64,
    pub total: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityEntry {
    pub ordering: OrderingMode,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentOffsetReport {
    pub agent_id: u32,
    pub count: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub per_agent: Vec<AgentOffsetReport>,
    pub offset_loss: f64,
    /// Root mean square of the ground-truth offsets.
    pub gt_rms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub agents_ms: f64,
    pub fusion_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub ordering: OrderingMode,
    pub score_mode: ScoreMode,
    pub top_k: Option<usize>,
    pub noise_pos_std: f64,
    pub noise_rot_std: f64,
    pub agents: Vec<AgentReport>,
    pub comm: CommSummary,
    pub budget: TokenBudget,
    pub recall: RecallReport,
    pub flops: FlopReport,
    pub locality: Vec<LocalityEntry>,
    pub alignment: AlignmentReport,
    pub fused_tokens: usize,
    pub dft_windows: usize,
    pub timings: Option<Timings>,
}

impl RunReport {
    pub fn locality_for(&self, mode: OrderingMode) -> Option<f64> {
        self.locality.iter().find(|e| e.ordering == mode).map(|e| e.metric)
    }

    /// Totals equal the sums of their parts.
    pub fn check_totals(&self) -> Result<()> {
        let f = &self.flops;
        if f.total != f.embed + f.encoder + f.alignment + f.fusion {
            return Err(invalid("FLOP total differs from the sum of modules"));
        }
        let payload: u64 = self.agents.iter().map(|a| a.comm.payload_bytes).sum();
        let total: u64 = self.agents.iter().map(|a| a.comm.total_bytes).sum();
        if payload != self.comm.payload_bytes || total != self.comm.total_bytes {
            return Err(invalid("byte totals differ from the per-agent sums"));
        }
        let fg: usize = self.agents.iter().map(|a| a.foreground_tokens).sum();
        let kept = self.agents.first().map_or(0, |a| a.foreground_tokens)
            + self.agents.iter().skip(1).map(|a| a.selected_foreground).sum::<usize>();
        if fg != self.recall.foreground_total || kept != self.recall.foreground_retained {
            return Err(invalid("foreground counts differ from the per-agent sums"));
        }
        if self.budget.per_vehicle.iter().sum::<usize>() != self.budget.total_foreground {
            return Err(invalid("per-vehicle token counts differ from the total"));
        }
        Ok(())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Everything up to top-k filtering; independent of `top_k` and noise.
struct EncodedAgent {
    raw_points: usize,
    labels: Vec<u8>,
    encoded: TokenSequence,
    scores: Vec<f32>,
    dft_count: usize,
    encoder_flops: u64,
    embed_flops: u64,
}

struct AgentRun {
    report: AgentReport,
    /// The broadcast top-k packet after a trip through the codec.
    packet: MessagePacket,
    /// Foreground flag per transmitted token.
    selected_labels: Vec<u8>,
}

fn inside_any(p: [f64; 3], boxes: &[OrientedBox]) -> bool {
    boxes.iter().any(|b| b.contains(p))
}

fn encode_agent(cfg: &ScenarioConfig, scene: &Scene, index: usize, weights: &ModelWeights, grid: &BevGrid) -> Result<EncodedAgent> {
    let view = &scene.agents[index];
    let margin = cfg.label_margin();
    let boxes: Vec<OrientedBox> = view.boxes.iter().map(|b| b.expanded([margin; 3])).collect();
    let tokens = tokenize_as(&view.cloud, &cfg.tokenizer(), view.id)?;
    let labels = label_importance(&tokens.coords, &boxes)?;
    let embedded = embed(&tokens, &weights.embed)?;
    let enc_cfg = cfg.encoder();
    let encoded = encode(&embedded, &weights.encoder, grid, &enc_cfg)?;
    let scores = match cfg.score_mode {
        ScoreMode::Oracle => oracle_scores(&labels),
        ScoreMode::Learned => encoded.scores.clone(),
    };
    let n = tokens.len();
    let per_block_windows = encoded.dft_count / weights.encoder.len().max(1);
    let encoder_flops = weights.encoder.iter().map(|_| block_flops(n, per_block_windows, grid, &enc_cfg)).sum();
    let embed_flops = flop_estimate("linear", &FlopParams { tokens: n, d_in: tokens.width(), d_out: enc_cfg.d, ..Default::default() })?;
    Ok(EncodedAgent {
        raw_points: view.cloud.points.len(),
        labels,
        encoded: encoded.tokens,
        scores,
        dft_count: encoded.dft_count,
        encoder_flops,
        embed_flops,
    })
}

fn to_packet(agent_id: u32, tokens: &TokenSequence, pose: &Pose) -> MessagePacket {
    MessagePacket {
        agent_id,
        features: tokens.features.clone(),
        coords: tokens.coords.iter().map(|c| c.map(|v| v as f32)).collect(),
        pose: pose.to_wire(),
    }
}

fn transmit(cfg: &ScenarioConfig, scene: &Scene, index: usize, agent: &EncodedAgent) -> Result<AgentRun> {
    let view = &scene.agents[index];
    let n = agent.encoded.len();
    let k = cfg.top_k.unwrap_or(n).min(n);
    let selection = importance_filter(&agent.encoded, &agent.scores, k)?;
    let selected_labels: Vec<u8> = selection.indices.iter().map(|&i| agent.labels[i]).collect();
    let pose = if index == 0 { view.true_pose } else { perturb_pose(&view.true_pose, &cfg.noise_for(view.id))? };
    let packet = to_packet(view.id, &selection.tokens, &pose);
    packet.validate()?;
    let decoded = unpack(&pack(&packet))?;
    if !decoded.bit_eq(&packet) {
        return Err(invalid("packet changed across the wire"));
    }
    let report = AgentReport {
        agent_id: view.id,
        raw_points: agent.raw_points,
        tokens: n,
        foreground_tokens: agent.labels.iter().filter(|&&l| l == 1).count(),
        selected_k: k,
        selected_foreground: selected_labels.iter().filter(|&&l| l == 1).count(),
        comm: comm_volume(&decoded),
    };
    Ok(AgentRun { report, packet: decoded, selected_labels })
}

/// Scene and per-agent encodings, reusable across runs that differ only in
/// `top_k` or noise.
pub struct Prepared {
    scene: Scene,
    grid: BevGrid,
    agents: Vec<EncodedAgent>,
    key: PrepareKey,
    elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct PrepareKey(ScenarioConfig);

impl PrepareKey {
    fn of(cfg: &ScenarioConfig) -> Self {
        Self(ScenarioConfig { top_k: None, noise_pos_std: 0.0, noise_rot_std: 0.0, record_timings: false, ..cfg.clone() })
    }
}

impl Prepared {
    /// Whether `cfg` differs from the prepared scenario only in `top_k`,
    /// noise or timing.
    pub fn matches(&self, cfg: &ScenarioConfig) -> bool {
        PrepareKey::of(cfg) == self.key
    }
}

pub fn prepare(cfg: &ScenarioConfig, weights: &ModelWeights) -> Result<Prepared> {
    cfg.validate()?;
    let t0 = Instant::now();
    let scene = generate_scene(&cfg.scene, cfg.seed, cfg.grid_interval)?;
    let grid = BevGrid::from_range(&cfg.scene.range, cfg.grid_interval)?;
    let agents = (0..scene.agents.len())
        .into_par_iter()
        .map(|i| encode_agent(cfg, &scene, i, weights, &grid))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared { scene, grid, agents, key: PrepareKey::of(cfg), elapsed_ms: t0.elapsed().as_secs_f64() * 1e3 })
}

/// Ego tokens inside each ground-truth box, without running the model.
pub fn token_budget(cfg: &ScenarioConfig) -> Result<TokenBudget> {
    cfg.validate()?;
    let scene = generate_scene(&cfg.scene, cfg.seed, cfg.grid_interval)?;
    let tokens = tokenize_as(&scene.agents[0].cloud, &cfg.tokenizer(), scene.agents[0].id)?;
    Ok(budget_of(cfg, &scene, &tokens.coords))
}

fn budget_of(cfg: &ScenarioConfig, scene: &Scene, coords: &[[f64; 3]]) -> TokenBudget {
    let margin = cfg.label_margin();
    let per_vehicle: Vec<usize> = scene.agents[0]
        .boxes
        .iter()
        .map(|b| {
            let grown = b.expanded([margin; 3]);
            coords.iter().filter(|c| grown.contains(**c)).count()
        })
        .collect();
    let total_foreground: usize = per_vehicle.iter().sum();
    TokenBudget {
        mean_per_vehicle: if per_vehicle.is_empty() { 0.0 } else { total_foreground as f64 / per_vehicle.len() as f64 },
        per_vehicle,
        total_foreground,
    }
}

fn locality(cfg: &ScenarioConfig, tokens: &TokenSequence) -> Result<Vec<LocalityEntry>> {
    if cfg.locality_sample == 0 || tokens.len() < 2 {
        return Ok(Vec::new());
    }
    let step = tokens.len().div_ceil(cfg.locality_sample);
    let idx: Vec<usize> = (0..tokens.len()).step_by(step).collect();
    let sample = tokens.select(&idx);
    OrderingMode::ALL
        .iter()
        .map(|&mode| {
            let perm = order_tokens(&sample, mode, cfg.seed)?;
            Ok(LocalityEntry { ordering: mode, metric: locality_metric(&sample.coords, &perm, cfg.locality_neighbors) })
        })
        .collect()
}

pub fn load_weights(cfg: &ScenarioConfig) -> Result<ModelWeights> {
    match &cfg.weights {
        Some(path) => {
            let mut w = ModelWeights::zeros(&cfg.model);
            load(&mut w, path)?;
            Ok(w)
        }
        None => ModelWeights::init(&cfg.model, cfg.seed),
    }
}

/// Scene → tokens → encoder → top-k → wire → ego aggregation → alignment →
/// fusion, with every report field filled in.
pub fn run_pipeline(cfg: &ScenarioConfig) -> Result<RunReport> {
    let weights = load_weights(cfg)?;
    run_pipeline_with(cfg, &weights)
}

pub fn run_pipeline_with(cfg: &ScenarioConfig, weights: &ModelWeights) -> Result<RunReport> {
    finish(cfg, weights, &prepare(cfg, weights)?)
}

/// Top-k, wire, aggregation, alignment and fusion on prepared encodings.
pub fn finish(cfg: &ScenarioConfig, weights: &ModelWeights, prepared: &Prepared) -> Result<RunReport> {
    cfg.validate()?;
    if PrepareKey::of(cfg) != prepared.key {
        return Err(invalid("prepared encodings were built from a different scenario"));
    }
    let t1 = Instant::now();
    let (scene, grid) = (&prepared.scene, &prepared.grid);
    let runs: Vec<AgentRun> = prepared
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| transmit(cfg, scene, i, a))
        .collect::<Result<_>>()?;

    let ego = &scene.agents[0];
    let ego_pose = ego.true_pose;
    let true_poses: BTreeMap<u32, Pose> = scene.agents.iter().map(|a| (a.id, a.true_pose)).collect();
    let noisy_poses: BTreeMap<u32, Pose> = runs.iter().map(|r| (r.packet.agent_id, Pose::from_wire(r.packet.pose))).collect();
    let neighbors: Vec<MessagePacket> = runs[1..].iter().map(|r| r.packet.clone()).collect();
    let transforms = neighbors
        .iter()
        .map(|p| relative_transform(&ego_pose, &noisy_poses[&p.agent_id]))
        .collect::<Result<Vec<_>>>()?;
    let fcfg = cfg.fusion();
    // the ego fuses its whole local sequence with the neighbors' packets
    let ego_local = to_packet(ego.id, &prepared.agents[0].encoded, &ego_pose);
    let fused = aggregate(&ego_local, &neighbors, &transforms, &weights.fusion.align.origin, cfg.grid_interval)?;
    let out = fuse(&fused, &weights.fusion, grid, &fcfg)?;
    let gt = gt_offset(&true_poses, &noisy_poses, ego.id, &fused.tokens.coords, &fused.tokens.agent_ids)?;
    let loss = offset_loss(&out.proposals, &out.compensation, &gt)?;

    // flags in aggregation order: ego, then neighbors by id
    let mut order: Vec<usize> = (1..runs.len()).collect();
    order.sort_by_key(|&i| runs[i].packet.agent_id);
    let fused_labels: Vec<u8> = prepared.agents[0]
        .labels
        .iter()
        .copied()
        .chain(order.into_iter().flat_map(|i| runs[i].selected_labels.iter().copied()))
        .collect();
    let margin = cfg.label_margin();
    let ego_boxes: Vec<OrientedBox> = ego.boxes.iter().map(|b| b.expanded([margin; 3])).collect();
    let hits = |coords: &[[f64; 3]]| {
        coords.iter().zip(&fused_labels).filter(|(c, &l)| l == 1 && inside_any(**c, &ego_boxes)).count()
    };
    let foreground_total: usize = runs.iter().map(|r| r.report.foreground_tokens).sum();
    let foreground_retained = runs[0].report.foreground_tokens + runs[1..].iter().map(|r| r.report.selected_foreground).sum::<usize>();
    let recall = RecallReport {
        foreground_total,
        foreground_retained,
        recall: ratio(foreground_retained, foreground_total),
        aligned_recall_raw: ratio(hits(&out.coords_in), foreground_total),
        aligned_recall: ratio(hits(&out.tokens.coords), foreground_total),
    };

    let n_fused = fused.tokens.len();
    let blocks = weights.fusion.blocks.len().max(1);
    let fusion_flops = weights.fusion.blocks.iter().map(|_| block_flops(n_fused, out.dft_count / blocks, grid, &fcfg.encoder)).sum();
    let embed_flops: u64 = prepared.agents.iter().map(|a| a.embed_flops).sum();
    let encoder_flops: u64 = prepared.agents.iter().map(|a| a.encoder_flops).sum();
    let align_flops = alignment_flops(n_fused, neighbors.len(), grid, &fcfg);
    let flops = FlopReport {
        embed: embed_flops,
        encoder: encoder_flops,
        alignment: align_flops,
        fusion: fusion_flops,
        total: embed_flops + encoder_flops + align_flops + fusion_flops,
    };

    let agents: Vec<AgentReport> = runs.iter().map(|r| r.report.clone()).collect();
    let payload_bytes = agents.iter().map(|a| a.comm.payload_bytes).sum();
    let total_bytes: u64 = agents.iter().map(|a| a.comm.total_bytes).sum();
    let gt_rms = if gt.is_empty() { 0.0 } else { (gt.iter().flatten().map(|v| v * v).sum::<f64>() / (3 * gt.len()) as f64).sqrt() };
    let encoder_dft: usize = prepared.agents.iter().map(|a| a.dft_count).sum();
    let fusion_ms = t1.elapsed().as_secs_f64() * 1e3;
    let report = RunReport {
        seed: cfg.seed,
        ordering: cfg.ordering,
        score_mode: cfg.score_mode,
        top_k: cfg.top_k,
        noise_pos_std: cfg.noise_pos_std,
        noise_rot_std: cfg.noise_rot_std,
        agents,
        comm: CommSummary { payload_bytes, total_bytes, log2_total_bytes: (total_bytes as f64).log2() },
        budget: budget_of(cfg, scene, &prepared.agents[0].encoded.coords),
        recall,
        flops,
        locality: locality(cfg, &prepared.agents[0].encoded)?,
        alignment: AlignmentReport {
            per_agent: out
                .stats
                .iter()
                .map(|(&agent_id, s)| AgentOffsetReport { agent_id, count: s.count, mean: s.mean, std: s.std })
                .collect(),
            offset_loss: loss,
            gt_rms,
        },
        fused_tokens: n_fused,
        dft_windows: out.dft_count + encoder_dft,
        timings: cfg.record_timings.then_some(Timings {
            agents_ms: prepared.elapsed_ms,
            fusion_ms,
            total_ms: prepared.elapsed_ms + fusion_ms,
        }),
    };
    report.check_totals()?;
    Ok(report)
}
