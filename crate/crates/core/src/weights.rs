//! Named parameter traversal, seeded initialization, and a flat
//! little-endian weight file with a JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignWeights, FusionConfig, FusionWeights};
use crate::encoder::{BlockWeights, EncoderConfig};
use crate::error::{invalid, Result};
use crate::frequency::FreqWeights;
use crate::rng;
use crate::scene_context::{Conv2d, ConvStack};
use crate::serialization::{GroupWeights, PromptWeights};
use crate::ssm::SelectiveWeights;
use crate::tensor::{Linear, Matrix};
use crate::tokenizer::RAW_FEATURES;

/// Softplus of this is roughly 0.1.
pub const DELTA_BIAS: f32 = -2.25;
pub const GAMMA_INIT: f32 = 0.1;
pub const PROMPT_SCALE: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(−b, b)`.
    Uniform(f32),
    Constant(f32),
    /// `ln(1), ln(2), …, ln(n)`.
    LogRange,
}

pub type Visitor<'a> = dyn FnMut(&str, &[usize], Init, &mut [f32]) + 'a;

/// Every tensor reachable from `self`, in a fixed order, with a dotted name.
pub trait Parameters {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>);
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn fan_in_bound(fan_in: usize) -> f32 {
    1.0 / (fan_in.max(1) as f32).sqrt()
}

impl Parameters for Linear {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        let (out, inp) = (self.out_dim(), self.in_dim());
        f(&join(prefix, "weight"), &[out, inp], Init::Uniform(fan_in_bound(inp)), self.weight.as_mut_slice());
        f(&join(prefix, "bias"), &[out], Init::Constant(0.0), &mut self.bias);
    }
}

impl Parameters for Conv2d {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        let (out, inp) = (self.out_channels, self.in_channels);
        f(&join(prefix, "weight"), &[9, out, inp], Init::Uniform(fan_in_bound(9 * inp)), &mut self.weight);
        f(&join(prefix, "bias"), &[out], Init::Constant(0.0), &mut self.bias);
    }
}

impl Parameters for ConvStack {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.first.visit(&join(prefix, "first"), f);
        self.second.visit(&join(prefix, "second"), f);
    }
}

fn visit_matrix(m: &mut Matrix<f32>, name: &str, init: Init, f: &mut Visitor<'_>) {
    let dims = [m.rows(), m.cols()];
    f(name, &dims, init, m.as_mut_slice());
}

impl Parameters for PromptWeights {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        let bound = fan_in_bound(self.g_ss.rows());
        visit_matrix(&mut self.g_ss, &join(prefix, "g_ss"), Init::Uniform(bound), f);
    }
}

impl Parameters for GroupWeights {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.proj.visit(&join(prefix, "proj"), f);
        self.classify.visit(&join(prefix, "classify"), f);
    }
}

impl Parameters for FreqWeights {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.projection.visit(&join(prefix, "projection"), f);
    }
}

impl Parameters for SelectiveWeights {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        let n = self.a_log.len();
        f(&join(prefix, "a_log"), &[n], Init::LogRange, &mut self.a_log);
        let d = self.delta.in_dim();
        f(&join(prefix, "delta.weight"), &[1, d], Init::Uniform(fan_in_bound(d)), self.delta.weight.as_mut_slice());
        f(&join(prefix, "delta.bias"), &[1], Init::Constant(DELTA_BIAS), &mut self.delta.bias);
        self.b.visit(&join(prefix, "b"), f);
        self.c.visit(&join(prefix, "c"), f);
        let dk = self.d_skip.len();
        f(&join(prefix, "d_skip"), &[dk], Init::Constant(1.0), &mut self.d_skip);
        f(&join(prefix, "gamma"), &[1], Init::Constant(GAMMA_INIT), std::slice::from_mut(&mut self.gamma));
    }
}

impl Parameters for BlockWeights {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.context.visit(&join(prefix, "context"), f);
        self.prompt.visit(&join(prefix, "prompt"), f);
        self.groups.visit(&join(prefix, "groups"), f);
        visit_matrix(&mut self.group_prompts, &join(prefix, "group_prompts"), Init::Uniform(PROMPT_SCALE), f);
        self.importance.visit(&join(prefix, "importance"), f);
        self.freq.visit(&join(prefix, "freq"), f);
        self.global.visit(&join(prefix, "global"), f);
        self.local.visit(&join(prefix, "local"), f);
    }
}

impl Parameters for AlignWeights {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.context.visit(&join(prefix, "context"), f);
        self.mis.visit(&join(prefix, "mis"), f);
        self.prompt.visit(&join(prefix, "prompt"), f);
        self.proposal_hidden.visit(&join(prefix, "proposal_hidden"), f);
        self.proposal_out.visit(&join(prefix, "proposal_out"), f);
        self.compensate.visit(&join(prefix, "compensate"), f);
        visit_matrix(&mut self.origin, &join(prefix, "origin"), Init::Uniform(PROMPT_SCALE), f);
    }
}

impl Parameters for FusionWeights {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.align.visit(&join(prefix, "align"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        Self { encoder, fusion: FusionConfig { encoder, ..FusionConfig::default() } }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.encoder.validate()?;
        if self.encoder.d != self.fusion.encoder.d {
            return Err(invalid("encoder and fusion token widths differ"));
        }
        if !(self.fusion.delta_max > 0.0 && self.fusion.delta_max.is_finite()) {
            return Err(invalid("delta_max must be positive and finite"));
        }
        if self.fusion.proposal_hidden == 0 {
            return Err(invalid("proposal_hidden must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    /// Raw statistics → `d`.
    pub embed: Linear,
    pub encoder: Vec<BlockWeights>,
    pub fusion: FusionWeights,
}

impl Parameters for ModelWeights {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.embed.visit(&join(prefix, "embed"), f);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("encoder.{i}")), f);
        }
        self.fusion.visit(&join(prefix, "fusion"), f);
    }
}

impl ModelWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            embed: Linear::zeros(RAW_FEATURES, cfg.encoder.d),
            encoder: (0..cfg.encoder.num_blocks).map(|_| BlockWeights::zeros(&cfg.encoder)).collect(),
            fusion: FusionWeights::zeros(&cfg.fusion),
        }
    }

    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut w = Self::zeros(cfg);
        initialize(&mut w, seed);
        Ok(w)
    }
}

/// Fill every tensor from its own stream, keyed by name, so adding a tensor
/// never shifts the values of the others.
pub fn initialize(params: &mut impl Parameters, seed: u64) {
    params.visit("", &mut |name, _, init, data| {
        let mut r = rng::stream(seed, rng::stream_id(name, 0));
        match init {
            Init::Uniform(b) if b > 0.0 => data.iter_mut().for_each(|v| *v = r.random_range(-b..b)),
            Init::Uniform(_) => data.fill(0.0),
            Init::Constant(c) => data.fill(c),
            Init::LogRange => data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i + 1) as f32).ln()),
        }
    });
}

pub fn parameter_count(params: &mut impl Parameters) -> usize {
    let mut n = 0;
    params.visit("", &mut |_, _, _, data| n += data.len());
    n
}

pub const MANIFEST_FORMAT: &str = "pointfuse-weights";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// In f32 elements from the start of the data file.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub data_file: String,
    pub tensors: Vec<TensorEntry>,
}

fn data_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<stem>.json` (manifest) and `<stem>.bin` (f32 LE, visit order).
pub fn save(params: &mut impl Parameters, manifest_path: impl AsRef<Path>) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let bin = data_path(manifest_path);
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    params.visit("", &mut |name, dims, _, data| {
        tensors.push(TensorEntry { name: name.to_string(), shape: dims.to_vec(), offset, len: data.len() });
        offset += data.len();
        data.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
    });
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        data_file: bin.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
        tensors,
    };
    fs::write(&bin, bytes)?;
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Fill `params` (already shaped) from a saved manifest. Every tensor must
/// be present with the same shape, and the file must hold nothing else.
pub fn load(params: &mut impl Parameters, manifest_path: impl AsRef<Path>) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(invalid(format!("unsupported weight manifest {} v{}", manifest.format, manifest.version)));
    }
    let bin = manifest_path.with_file_name(&manifest.data_file);
    let bytes = fs::read(&bin)?;
    if bytes.len() % 4 != 0 {
        return Err(invalid("weight data is not a whole number of f32 values"));
    }
    let floats: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut entries: BTreeMap<&str, &TensorEntry> = manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut err = None;
    params.visit("", &mut |name, dims, _, data| {
        if err.is_some() {
            return;
        }
        let Some(entry) = entries.remove(name) else {
            err = Some(invalid(format!("weight file lacks tensor {name}")));
            return;
        };
        if entry.shape != dims || entry.len != data.len() || entry.offset + entry.len > floats.len() {
            err = Some(invalid(format!("tensor {name}: expected shape {dims:?}, file has {:?}", entry.shape)));
            return;
        }
        data.copy_from_slice(&floats[entry.offset..entry.offset + entry.len]);
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = entries.keys().next() {
        return Err(invalid(format!("weight file holds unknown tensor {extra}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        let encoder = EncoderConfig { d: 6, d_g: 4, n_state: 3, d_sc: 2, d_sp: 4, rank: 2, window: 8, ..Default::default() };
        ModelConfig { encoder, fusion: FusionConfig { encoder, proposal_hidden: 5, ..Default::default() } }
    }

    #[test]
    fn init_follows_rules() {
        let w = ModelWeights::init(&small(), 3).unwrap();
        let g = &w.encoder[0].global;
        assert_eq!(g.a_log, vec![0.0, 2f32.ln(), 3f32.ln()]);
        assert_eq!(g.delta.bias, vec![DELTA_BIAS]);
        assert!(g.d_skip.iter().all(|&v| v == 1.0));
        assert_eq!(g.gamma, GAMMA_INIT);
        assert!(w.embed.bias.iter().all(|&b| b == 0.0));
        let bound = 1.0 / (RAW_FEATURES as f32).sqrt();
        assert!(w.embed.weight.as_slice().iter().all(|v| v.abs() <= bound));
        assert!(w.embed.weight.as_slice().iter().any(|&v| v != 0.0));
        assert!(w.encoder[0].group_prompts.as_slice().iter().all(|v| v.abs() <= PROMPT_SCALE));
        assert!(w.encoder[0].context.first.bias.iter().all(|&b| b == 0.0));
        assert_eq!(w, ModelWeights::init(&small(), 3).unwrap());
        assert_ne!(w, ModelWeights::init(&small(), 4).unwrap());
    }

    #[test]
    fn names_are_unique() {
        let mut w = ModelWeights::zeros(&small());
        let mut names = Vec::new();
        w.visit("", &mut |n, _, _, _| names.push(n.to_string()));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"fusion.blocks.0.local.gamma".to_string()));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut w = ModelWeights::init(&small(), 9).unwrap();
        save(&mut w, &path).unwrap();
        let mut back = ModelWeights::zeros(&small());
        load(&mut back, &path).unwrap();
        assert_eq!(back, w);
        assert_eq!(fs::metadata(dir.path().join("model.bin")).unwrap().len() as usize, 4 * parameter_count(&mut w));

        let mut wrong = ModelWeights::zeros(&ModelConfig { encoder: EncoderConfig { n_state: 4, ..small().encoder }, ..small() });
        assert!(load(&mut wrong, &path).is_err());
        let mut fewer = ModelWeights::zeros(&ModelConfig { encoder: EncoderConfig { num_blocks: 1, ..small().encoder }, ..small() });
        assert!(load(&mut fewer, &path).is_err());
    }
}
