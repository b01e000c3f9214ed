//! Grid-sampled point tokens.
//!
//! Raw points are bucketed by `floor(p / grid_interval)`; every occupied cell
//! with at least `min_points` points becomes one token whose coordinate is the
//! cell center and whose 12 raw channels are, in order:
//!
//! | idx | channel |
//! |-----|---------|
//! | 0-2 | mean x, y, z |
//! | 3   | dispersion: mean over points of the per-axis absolute deviation from the mean, averaged over the 3 axes |
//! | 4   | density: `min(count / density_normalizer, 1)` |
//! | 5   | grid offset: same statistic as dispersion, measured against the cell center |
//! | 6-8 | intensity mean, max, population std |
//! | 9   | Euclidean distance from the cell center to the sensor origin |
//! | 10-11 | reserved, always zero |

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::tensor::{Linear, Matrix};

pub const RAW_FEATURES: usize = 12;

/// Axis-aligned metric box, half-open: `min <= p < max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Range3 {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] < self.max[a])
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.min[a] < self.max[a]) {
                return Err(invalid(format!("range axis {a}: min must be < max")));
            }
        }
        Ok(())
    }
}

impl Default for Range3 {
    fn default() -> Self {
        Self {
            min: [-140.0, -40.0, -3.0],
            max: [140.0, 40.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawPointCloud {
    /// x, y, z in meters, intensity in `[0, 1]`.
    pub points: Vec<[f32; 4]>,
    pub sensor_origin: [f64; 3],
}

impl RawPointCloud {
    pub fn new(points: Vec<[f32; 4]>) -> Self {
        Self {
            points,
            sensor_origin: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !p[..3].iter().all(|v| v.is_finite()) {
                return Err(invalid(format!("point {i}: non-finite coordinate")));
            }
            if !(0.0..=1.0).contains(&p[3]) {
                return Err(invalid(format!("point {i}: intensity {} outside [0, 1]", p[3])));
            }
        }
        if !self.sensor_origin.iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite sensor origin"));
        }
        Ok(())
    }
}

const CLOUD_MAGIC: [u8; 4] = *b"PFPC";

/// Flat binary: magic `PFPC`, point count (u32 LE), then `count × 4` f32 LE.
pub fn write_cloud(path: impl AsRef<Path>, cloud: &RawPointCloud) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + cloud.points.len() * 16);
    buf.extend_from_slice(&CLOUD_MAGIC);
    buf.extend_from_slice(&(cloud.points.len() as u32).to_le_bytes());
    for p in &cloud.points {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<RawPointCloud> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_cloud(&buf)
}

pub fn decode_cloud(buf: &[u8]) -> Result<RawPointCloud> {
    if buf.len() < 8 {
        return Err(Error::Length { expected: 8, actual: buf.len() });
    }
    let magic: [u8; 4] = buf[..4].try_into().unwrap();
    if magic != CLOUD_MAGIC {
        return Err(Error::BadMagic { found: magic, expected: CLOUD_MAGIC });
    }
    let count = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let expected = 8 + count * 16;
    if buf.len() != expected {
        return Err(Error::Length { expected, actual: buf.len() });
    }
    let points = buf[8..]
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i * 4..i * 4 + 4].try_into().unwrap());
            [f(0), f(1), f(2), f(3)]
        })
        .collect();
    Ok(RawPointCloud::new(points))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub grid_interval: f64,
    pub min_points: usize,
    pub density_normalizer: f64,
    pub range: Range3,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            grid_interval: 0.4,
            min_points: 1,
            density_normalizer: 32.0,
            range: Range3::default(),
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grid_interval > 0.0 && self.grid_interval.is_finite()) {
            return Err(invalid("grid_interval must be positive"));
        }
        if !(self.density_normalizer > 0.0) {
            return Err(invalid("density_normalizer must be positive"));
        }
        self.range.validate()
    }

    #[inline]
    pub fn cell_of(&self, p: [f64; 3]) -> [i32; 3] {
        [
            (p[0] / self.grid_interval).floor() as i32,
            (p[1] / self.grid_interval).floor() as i32,
            (p[2] / self.grid_interval).floor() as i32,
        ]
    }

    #[inline]
    pub fn cell_center(&self, cell: [i32; 3]) -> [f64; 3] {
        cell.map(|c| (f64::from(c) + 0.5) * self.grid_interval)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointToken {
    pub features: [f64; RAW_FEATURES],
    pub coord: [f64; 3],
    pub cell: [i32; 3],
    pub agent_id: u32,
}

/// Ordered tokens plus per-token metadata filled in by later stages.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `l × width` features.
    pub features: Matrix<f32>,
    pub coords: Vec<[f64; 3]>,
    pub cells: Vec<[i32; 3]>,
    pub agent_ids: Vec<u32>,
    /// Last serialization applied (sequence position → token index).
    pub order: Vec<usize>,
    /// Semantic group per token; empty until grouping runs.
    pub groups: Vec<usize>,
    /// Importance score per token; empty until an importance head runs.
    pub importance: Vec<f32>,
}

impl TokenSequence {
    pub fn new(
        features: Matrix<f32>,
        coords: Vec<[f64; 3]>,
        cells: Vec<[i32; 3]>,
        agent_ids: Vec<u32>,
    ) -> Result<Self> {
        let l = features.rows();
        if coords.len() != l || cells.len() != l || agent_ids.len() != l {
            return Err(shape(
                "TokenSequence",
                l,
                format!("coords {} cells {} agents {}", coords.len(), cells.len(), agent_ids.len()),
            ));
        }
        Ok(Self {
            features,
            coords,
            cells,
            agent_ids,
            order: (0..l).collect(),
            groups: Vec::new(),
            importance: Vec::new(),
        })
    }

    pub fn empty(width: usize) -> Self {
        Self::new(Matrix::zeros(0, width), vec![], vec![], vec![]).unwrap()
    }

    pub fn from_point_tokens(tokens: &[PointToken]) -> Self {
        let features = Matrix::from_fn(tokens.len(), RAW_FEATURES, |i, j| tokens[i].features[j] as f32);
        Self::new(
            features,
            tokens.iter().map(|t| t.coord).collect(),
            tokens.iter().map(|t| t.cell).collect(),
            tokens.iter().map(|t| t.agent_id).collect(),
        )
        .unwrap()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn with_features(&self, features: Matrix<f32>) -> Result<Self> {
        if features.rows() != self.len() {
            return Err(shape("TokenSequence::with_features", self.len(), features.rows()));
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }

    /// Tokens at `index`, in that order. Per-token metadata travels along;
    /// `order` resets to the identity of the new sequence.
    pub fn select(&self, index: &[usize]) -> Self {
        let pick = |v: &Vec<f32>| if v.is_empty() { vec![] } else { index.iter().map(|&i| v[i]).collect() };
        Self {
            features: self.features.gather_rows(index),
            coords: index.iter().map(|&i| self.coords[i]).collect(),
            cells: index.iter().map(|&i| self.cells[i]).collect(),
            agent_ids: index.iter().map(|&i| self.agent_ids[i]).collect(),
            order: (0..index.len()).collect(),
            groups: if self.groups.is_empty() {
                vec![]
            } else {
                index.iter().map(|&i| self.groups[i]).collect()
            },
            importance: pick(&self.importance),
        }
    }
}

fn validate_inputs(cloud: &RawPointCloud, config: &TokenizerConfig) -> Result<()> {
    config.validate()?;
    cloud.validate()
}

/// Per-cell statistics on the raw 12-channel layout.
pub fn tokenize_points(
    cloud: &RawPointCloud,
    config: &TokenizerConfig,
    agent_id: u32,
) -> Result<Vec<PointToken>> {
    validate_inputs(cloud, config)?;

    let mut cells: BTreeMap<(i32, i32, i32), Vec<[f64; 4]>> = BTreeMap::new();
    for p in &cloud.points {
        let q = [f64::from(p[0]), f64::from(p[1]), f64::from(p[2]), f64::from(p[3])];
        if !config.range.contains([q[0], q[1], q[2]]) {
            continue;
        }
        let c = config.cell_of([q[0], q[1], q[2]]);
        cells.entry((c[2], c[1], c[0])).or_default().push(q);
    }

    let mut out = Vec::with_capacity(cells.len());
    for ((cz, cy, cx), mut pts) in cells {
        if pts.len() < config.min_points.max(1) {
            continue;
        }
        // canonical point order, so sums do not depend on input order
        pts.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let cell = [cx, cy, cz];
        let coord = config.cell_center(cell);
        out.push(PointToken {
            features: cell_statistics(&pts, coord, cloud.sensor_origin, config.density_normalizer),
            coord,
            cell,
            agent_id,
        });
    }
    Ok(out)
}

fn cell_statistics(
    pts: &[[f64; 4]],
    center: [f64; 3],
    sensor: [f64; 3],
    density_normalizer: f64,
) -> [f64; RAW_FEATURES] {
    let n = pts.len() as f64;
    let mut mean = [0.0f64; 3];
    let mut i_mean = 0.0;
    let mut i_max = f64::NEG_INFINITY;
    for p in pts {
        for a in 0..3 {
            mean[a] += p[a];
        }
        i_mean += p[3];
        i_max = i_max.max(p[3]);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    i_mean /= n;

    let mut dispersion = 0.0;
    let mut offset = 0.0;
    let mut i_var = 0.0;
    for p in pts {
        dispersion += (0..3).map(|a| (p[a] - mean[a]).abs()).sum::<f64>() / 3.0;
        offset += (0..3).map(|a| (p[a] - center[a]).abs()).sum::<f64>() / 3.0;
        i_var += (p[3] - i_mean).powi(2);
    }

    let sensor_distance = (0..3)
        .map(|a| (center[a] - sensor[a]).powi(2))
        .sum::<f64>()
        .sqrt();

    [
        mean[0],
        mean[1],
        mean[2],
        dispersion / n,
        (n / density_normalizer).min(1.0),
        offset / n,
        i_mean,
        i_max,
        (i_var / n).sqrt(),
        sensor_distance,
        0.0,
        0.0,
    ]
}

/// Tokenize a cloud into a sequence carrying the raw 12 channels.
pub fn tokenize(cloud: &RawPointCloud, config: &TokenizerConfig) -> Result<TokenSequence> {
    tokenize_as(cloud, config, 0)
}

pub fn tokenize_as(cloud: &RawPointCloud, config: &TokenizerConfig, agent_id: u32) -> Result<TokenSequence> {
    Ok(TokenSequence::from_point_tokens(&tokenize_points(cloud, config, agent_id)?))
}

/// Lift raw token channels to model width with a per-token affine map.
pub fn embed(tokens: &TokenSequence, weights: &Linear) -> Result<TokenSequence> {
    if weights.in_dim() != tokens.width() {
        return Err(shape("embed", weights.in_dim(), tokens.width()));
    }
    tokens.with_features(weights.forward(&tokens.features)?)
}
