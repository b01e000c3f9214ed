//! Deterministic synthetic street scenes: box-shaped vehicles in lanes,
//! surface-sampled from each agent's sensor with back-face culling, plus
//! flat ground clutter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{OrientedBox, Pose, RigidTransform};
use crate::rng;
use crate::tokenizer::{Range3, RawPointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: u32,
    /// World position of the vehicle carrying the sensor, meters.
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleSpec {
    pub count: usize,
    /// Length, width, height.
    pub mean_size: [f64; 3],
    /// Each extent is drawn from `mean ± jitter`.
    pub size_jitter: [f64; 3],
    /// Lane center lines (world y).
    pub lanes: Vec<f64>,
    /// World x interval vehicles are placed in.
    pub x_extent: [f64; 2],
    /// Minimum bumper-to-bumper clearance.
    pub min_gap: f64,
}

impl Default for VehicleSpec {
    fn default() -> Self {
        Self {
            count: 15,
            mean_size: [4.5, 2.0, 1.6],
            size_jitter: [0.3, 0.1, 0.1],
            lanes: vec![-7.0, -3.5, 3.5, 7.0],
            x_extent: [-60.0, 60.0],
            min_gap: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Ego first.
    pub agents: Vec<AgentSpec>,
    pub vehicles: VehicleSpec,
    /// Lattice pitch of surface samples, meters.
    pub surface_spacing: f64,
    /// Ground returns per square meter of the perception range.
    pub clutter_density: f64,
    /// Sensor height above the ground plane.
    pub sensor_height: f64,
    pub range: Range3,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            agents: vec![AgentSpec { id: 0, x: 0.0, y: 0.0, yaw: 0.0 }, AgentSpec { id: 1, x: 40.0, y: 3.5, yaw: 0.0 }],
            vehicles: VehicleSpec::default(),
            surface_spacing: 0.1,
            clutter_density: 0.35,
            sensor_height: 1.5,
            range: Range3::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(invalid("scene needs at least one agent"));
        }
        let mut ids: Vec<u32> = self.agents.iter().map(|a| a.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.agents.len() {
            return Err(invalid("agent ids must be unique"));
        }
        let v = &self.vehicles;
        if v.count > 0 && v.lanes.is_empty() {
            return Err(invalid("vehicles need at least one lane"));
        }
        if (0..3).any(|a| !(v.mean_size[a] - v.size_jitter[a] > 0.0) || v.size_jitter[a] < 0.0) {
            return Err(invalid("vehicle extents must stay positive"));
        }
        if !(v.x_extent[0] < v.x_extent[1]) || v.min_gap < 0.0 {
            return Err(invalid("bad vehicle placement interval"));
        }
        if !(self.surface_spacing > 0.0) || !(self.clutter_density >= 0.0) || !(self.sensor_height > 0.0) {
            return Err(invalid("surface spacing, clutter density and sensor height must be positive"));
        }
        self.range.validate()
    }

    pub fn agent_pose(&self, a: &AgentSpec) -> Pose {
        Pose::new([a.x, a.y, self.sensor_height], a.yaw, 0.0, 0.0)
    }
}

#[derive(Clone, Debug)]
pub struct AgentView {
    pub id: u32,
    pub true_pose: Pose,
    /// Sensor frame.
    pub cloud: RawPointCloud,
    /// Ground-truth vehicles in the sensor frame.
    pub boxes: Vec<OrientedBox>,
}

#[derive(Clone, Debug)]
pub struct Scene {
    /// World frame, ground at `z = 0`.
    pub vehicles: Vec<OrientedBox>,
    /// In `SceneSpec::agents` order.
    pub agents: Vec<AgentView>,
}

fn footprint_overlap(a: &OrientedBox, b: &OrientedBox, gap: f64) -> bool {
    // boxes are axis aligned up to a half turn
    (a.center[0] - b.center[0]).abs() < 0.5 * (a.size[0] + b.size[0]) + gap
        && (a.center[1] - b.center[1]).abs() < 0.5 * (a.size[1] + b.size[1]) + gap.min(0.5)
}

fn place_vehicles(spec: &SceneSpec, seed: u64) -> Result<Vec<OrientedBox>> {
    let v = &spec.vehicles;
    let mut r = rng::stream(seed, rng::stream_id("scene-vehicles", 0));
    let ego_like = |a: &AgentSpec| OrientedBox {
        center: [a.x, a.y, 0.5 * v.mean_size[2]],
        size: v.mean_size,
        yaw: a.yaw,
    };
    let occupied: Vec<OrientedBox> = spec.agents.iter().map(ego_like).collect();
    let mut placed: Vec<OrientedBox> = Vec::with_capacity(v.count);
    let mut attempts = 0;
    while placed.len() < v.count {
        attempts += 1;
        if attempts > 10_000 * v.count.max(1) {
            return Err(invalid(format!("could not place {} vehicles without overlap", v.count)));
        }
        let size = [0, 1, 2].map(|a| v.mean_size[a] + r.random_range(-1.0..=1.0) * v.size_jitter[a]);
        let lane = v.lanes[r.random_range(0..v.lanes.len())];
        let x = r.random_range(v.x_extent[0]..v.x_extent[1]);
        let yaw = if lane < 0.0 { 0.0 } else { std::f64::consts::PI };
        let b = OrientedBox { center: [x, lane, 0.5 * size[2]], size, yaw };
        if occupied.iter().chain(&placed).all(|o| !footprint_overlap(o, &b, v.min_gap)) {
            placed.push(b);
        }
    }
    Ok(placed)
}

/// Face-lattice samples of the faces of `b` that face `sensor`. The bottom
/// face is never sampled.
fn sample_surfaces(b: &OrientedBox, sensor: [f64; 3], spacing: f64, r: &mut rng::Rng, out: &mut Vec<[f64; 4]>) {
    let half = b.size.map(|s| 0.5 * s);
    let s_local = b.to_local(sensor);
    let (sn, cs) = b.yaw.sin_cos();
    let to_world = |l: [f64; 3]| [b.center[0] + cs * l[0] - sn * l[1], b.center[1] + sn * l[0] + cs * l[1], b.center[2] + l[2]];
    // (normal axis, sign); the face plane sits at sign * half[axis]
    let faces = [(0usize, 1.0f64), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0)];
    for (axis, sign) in faces {
        if sign * (s_local[axis] - sign * half[axis]) <= 0.0 {
            continue;
        }
        let (u, w) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let nu = (b.size[u] / spacing).ceil().max(1.0) as usize;
        let nw = (b.size[w] / spacing).ceil().max(1.0) as usize;
        let intensity = r.random_range(0.3..0.9);
        for i in 0..nu {
            for j in 0..nw {
                let mut l = [0.0; 3];
                l[axis] = sign * half[axis];
                l[u] = -half[u] + (i as f64 + r.random_range(0.0..1.0)) * b.size[u] / nu as f64;
                l[w] = -half[w] + (j as f64 + r.random_range(0.0..1.0)) * b.size[w] / nw as f64;
                let p = to_world(l);
                out.push([p[0], p[1], p[2], intensity]);
            }
        }
    }
}

/// Uniform ground returns over the agent's range, outside every footprint
/// grown by `clearance`.
fn sample_clutter(
    spec: &SceneSpec,
    pose: &Pose,
    vehicles: &[OrientedBox],
    clearance: f64,
    r: &mut rng::Rng,
    out: &mut Vec<[f64; 4]>,
) {
    let (lo, hi) = (spec.range.min, spec.range.max);
    let area = (hi[0] - lo[0]) * (hi[1] - lo[1]);
    let n = (spec.clutter_density * area).round() as usize;
    let t = pose.to_transform();
    let grown: Vec<OrientedBox> = vehicles.iter().map(|b| b.expanded([clearance, clearance, clearance])).collect();
    for _ in 0..n {
        let local = [r.random_range(lo[0]..hi[0]), r.random_range(lo[1]..hi[1]), 0.0];
        let mut w = t.apply(local);
        w[2] = r.random_range(0.0..0.1);
        if grown.iter().any(|b| b.contains([w[0], w[1], b.center[2]])) {
            continue;
        }
        out.push([w[0], w[1], w[2], r.random_range(0.0..0.3)]);
    }
}

pub fn generate_scene(spec: &SceneSpec, seed: u64, clutter_clearance: f64) -> Result<Scene> {
    spec.validate()?;
    let vehicles = place_vehicles(spec, seed)?;
    let agents = spec
        .agents
        .iter()
        .map(|a| {
            // poses travel as f32; truth lives on the same lattice
            let pose = Pose::from_wire(spec.agent_pose(a).to_wire());
            let mut r = rng::stream(seed, rng::stream_id("scene-agent", u64::from(a.id)));
            let mut world = Vec::new();
            for b in &vehicles {
                sample_surfaces(b, pose.position, spec.surface_spacing, &mut r, &mut world);
            }
            sample_clutter(spec, &pose, &vehicles, clutter_clearance, &mut r, &mut world);
            let to_local: RigidTransform = pose.to_transform().inverse();
            let points = world
                .iter()
                .map(|p| {
                    let l = to_local.apply([p[0], p[1], p[2]]);
                    [l[0] as f32, l[1] as f32, l[2] as f32, p[3] as f32]
                })
                .collect();
            AgentView {
                id: a.id,
                true_pose: pose,
                cloud: RawPointCloud::new(points),
                boxes: vehicles.iter().map(|b| b.transformed(&to_local)).collect(),
            }
        })
        .collect();
    Ok(Scene { vehicles, agents })
}
