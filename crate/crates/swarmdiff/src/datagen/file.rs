//! Dataset file format and corpus builder.
//!
//! Layout: one JSON header line, then one JSON line per record (scene
//! inline, plus the seeds that produced it), then a binary section of
//! fixed-stride little-endian f32 records: 256 states of 5 values each,
//! followed by the context environment features.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    connect_edge, edge_resolution, plan_roadmap_path, sample_node_with, DatagenStreams,
    RoadmapParams,
};
use crate::costs::GaussianTrajectory;
use crate::diffusion::{env_features, Context, TrainSample, ENV_FEATURES};
use crate::error::{Error, Result};
use crate::gaussian::{wasserstein2, GaussianState};
use crate::geom::{
    generate_scenario, EsdfGrid, EsdfOptions, Point, ScenarioFile, ScenarioKind, ScenarioParams,
    Workspace,
};
use crate::rng::{stream_rng, Stream};

pub const DATASET_NODES: usize = 256;
const FORMAT: &str = "swarmdiff-dataset";
const VERSION: u32 = 1;
const NODE_DIM: usize = 5;
const STRIDE_F32: usize = DATASET_NODES * NODE_DIM + ENV_FEATURES;
const ABORT_WINDOW: usize = 100;
const ABORT_MIN_SUCCESSES: usize = 10;

/// Everything the corpus builder needs beyond count, kind, and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DatagenParams {
    pub scenario: ScenarioParams,
    pub roadmap: RoadmapParams,
    pub esdf: EsdfOptions,
}

impl DatagenParams {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.roadmap.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub seed: u64,
    pub scenario_kind: ScenarioKind,
    pub params: DatagenParams,
    pub count: usize,
}

impl DatasetHeader {
    /// Duration in seconds spanned by each stored trajectory.
    pub fn duration(&self) -> f64 {
        self.params.roadmap.duration
    }
}

/// One corpus entry: the scene, the full-resolution trajectory, and the
/// context features the denoiser conditions on.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub attempt: u64,
    pub scene_seed: u64,
    pub workspace: Workspace,
    pub trajectory: GaussianTrajectory,
    pub env: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderLine {
    format: String,
    version: u32,
    seed: u64,
    scenario_kind: ScenarioKind,
    params: DatagenParams,
    count: usize,
    nodes: usize,
    node_dim: usize,
    env_features: usize,
    stride_bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    index: usize,
    attempt: u64,
    scene_seed: u64,
    scene: serde_json::Value,
}

fn scene_value(ws: &Workspace) -> serde_json::Value {
    serde_json::to_value(ScenarioFile::from_workspace(ws))
        .expect("workspace serialization cannot fail")
}

/// Serializes header, record index lines, and the binary payload.
pub fn write_dataset(path: &Path, header: &DatasetHeader, records: &[DatasetRecord]) -> Result<()> {
    if records.len() != header.count {
        return Err(Error::InvalidParameter(format!(
            "header promises {} records, got {}",
            header.count,
            records.len()
        )));
    }
    let mut text = serde_json::to_string(&HeaderLine {
        format: FORMAT.to_string(),
        version: VERSION,
        seed: header.seed,
        scenario_kind: header.scenario_kind,
        params: header.params.clone(),
        count: header.count,
        nodes: DATASET_NODES,
        node_dim: NODE_DIM,
        env_features: ENV_FEATURES,
        stride_bytes: STRIDE_F32 * 4,
    })
    .expect("header serialization cannot fail");
    text.push('\n');

    let mut blob = Vec::with_capacity(records.len() * STRIDE_F32 * 4);
    for (index, r) in records.iter().enumerate() {
        if r.trajectory.len() != DATASET_NODES {
            return Err(Error::InvalidParameter(format!(
                "record {index} has {} nodes, expected {DATASET_NODES}",
                r.trajectory.len()
            )));
        }
        if r.env.len() != ENV_FEATURES {
            return Err(Error::InvalidParameter(format!(
                "record {index} has {} environment features, expected {ENV_FEATURES}",
                r.env.len()
            )));
        }
        text.push_str(
            &serde_json::to_string(&RecordLine {
                index,
                attempt: r.attempt,
                scene_seed: r.scene_seed,
                scene: scene_value(&r.workspace),
            })
            .expect("record serialization cannot fail"),
        );
        text.push('\n');
        for s in r.trajectory.states() {
            for v in s.to_array() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        for &v in &r.env {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    let mut bytes = text.into_bytes();
    bytes.extend_from_slice(&blob);
    std::fs::write(path, bytes)?;
    Ok(())
}

fn take_line(bytes: &[u8], from: usize) -> Result<(usize, &str)> {
    let rel = bytes[from..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse {
            offset: from,
            detail: "expected a newline-terminated JSON line".to_string(),
        })?;
    let line = std::str::from_utf8(&bytes[from..from + rel]).map_err(|e| Error::Parse {
        offset: from + e.valid_up_to(),
        detail: "line is not valid UTF-8".to_string(),
    })?;
    Ok((from + rel + 1, line))
}

/// Parses and fully validates a dataset file.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<DatasetRecord>)> {
    let bytes = std::fs::read(path)?;
    let (mut pos, line) = take_line(&bytes, 0)?;
    let h: HeaderLine = serde_json::from_str(line).map_err(|e| Error::Parse {
        offset: 0,
        detail: format!("dataset header: {e}"),
    })?;
    if h.format != FORMAT {
        return Err(Error::Format(format!(
            "not a dataset file (format field is '{}')",
            h.format
        )));
    }
    if h.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {} (expected {VERSION})",
            h.version
        )));
    }
    if h.nodes != DATASET_NODES || h.node_dim != NODE_DIM || h.env_features != ENV_FEATURES {
        return Err(Error::Format(format!(
            "unexpected record geometry {}x{} + {} features",
            h.nodes, h.node_dim, h.env_features
        )));
    }
    if h.stride_bytes != STRIDE_F32 * 4 {
        return Err(Error::Format(format!(
            "stride {} disagrees with record geometry",
            h.stride_bytes
        )));
    }
    h.params.validate()?;
    let header = DatasetHeader {
        seed: h.seed,
        scenario_kind: h.scenario_kind,
        params: h.params,
        count: h.count,
    };

    let mut lines = Vec::with_capacity(header.count);
    for index in 0..header.count {
        let line_start = pos;
        let (next, line) = take_line(&bytes, pos)?;
        pos = next;
        let r: RecordLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            offset: line_start,
            detail: format!("record line {index}: {e}"),
        })?;
        if r.index != index {
            return Err(Error::Parse {
                offset: line_start,
                detail: format!("record line out of order: expected index {index}, got {}", r.index),
            });
        }
        lines.push(r);
    }

    let blob = &bytes[pos..];
    if blob.len() != header.count * STRIDE_F32 * 4 {
        return Err(Error::Parse {
            offset: pos,
            detail: format!(
                "binary section holds {} bytes, expected {}",
                blob.len(),
                header.count * STRIDE_F32 * 4
            ),
        });
    }

    let dt = header.duration() / (DATASET_NODES - 1) as f64;
    let mut records = Vec::with_capacity(header.count);
    for (index, r) in lines.into_iter().enumerate() {
        let scene_text = serde_json::to_string(&r.scene).expect("value serialization cannot fail");
        let workspace = Workspace::from_json(&scene_text)?;
        let base = index * STRIDE_F32 * 4;
        let mut read_f32 = |k: usize| -> Result<f64> {
            let off = pos + base + k * 4;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Parse {
                    offset: off,
                    detail: format!("non-finite value in record {index}"),
                });
            }
            Ok(v as f64)
        };
        let mut states = Vec::with_capacity(DATASET_NODES);
        for n in 0..DATASET_NODES {
            let mut a = [0.0; 5];
            for (d, slot) in a.iter_mut().enumerate() {
                *slot = read_f32(n * NODE_DIM + d)?;
            }
            states.push(GaussianState::from_array(a));
        }
        let mut env = Vec::with_capacity(ENV_FEATURES);
        for k in 0..ENV_FEATURES {
            env.push(read_f32(DATASET_NODES * NODE_DIM + k)?);
        }
        records.push(DatasetRecord {
            attempt: r.attempt,
            scene_seed: r.scene_seed,
            workspace,
            trajectory: GaussianTrajectory::new(states, dt)?,
            env,
        });
    }
    Ok((header, records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildReport {
    pub records: usize,
    pub attempts: u64,
    pub failures: u64,
}

fn attempt_record(
    kind: ScenarioKind,
    params: &DatagenParams,
    streams: &DatagenStreams,
) -> Result<Option<DatasetRecord>> {
    let ws = match generate_scenario(kind, streams.scene_seed, &params.scenario) {
        Ok(ws) => ws,
        Err(Error::ScenarioGeneration(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let grid = EsdfGrid::build(&ws, params.esdf)?;
    let rp = &params.roadmap;
    let eps = rp.planning_epsilon();
    let mut endpoint_rng = stream_rng(streams.endpoint_seed, Stream::NodeSampling, 0);
    let mut draw = || {
        sample_node_with(&mut endpoint_rng, &ws, &grid, &rp.bounds, rp.alpha, eps, rp.sample_budget)
    };
    let (start, goal) = match (|| Ok::<_, Error>((draw()?, draw()?)))() {
        Ok(pair) => pair,
        Err(Error::Sampling(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let trajectory = match plan_roadmap_path(&ws, &grid, &start, &goal, rp, streams.plan_seed) {
        Ok(t) => t,
        Err(Error::NoPath) | Err(Error::Sampling(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let env = env_features(
        &Point::new(start.x(), start.y()),
        &Point::new(goal.x(), goal.y()),
        &grid,
    )?;
    Ok(Some(DatasetRecord {
        attempt: streams.attempt,
        scene_seed: streams.scene_seed,
        workspace: ws,
        trajectory,
        env,
    }))
}

/// Generates `count` records, redrawing failed scenes, and writes the file.
/// Aborts when fewer than 10% of the last 100 attempts succeed.
pub fn build_dataset(
    count: usize,
    kind: ScenarioKind,
    seed: u64,
    params: &DatagenParams,
    out: &Path,
) -> Result<BuildReport> {
    if count == 0 {
        return Err(Error::InvalidParameter("dataset count must be positive".to_string()));
    }
    params.validate()?;

    let mut records = Vec::with_capacity(count);
    let mut attempt = 0u64;
    let mut failures = 0u64;
    let mut window = VecDeque::with_capacity(ABORT_WINDOW);
    while records.len() < count {
        attempt += 1;
        let streams = DatagenStreams::for_attempt(seed, attempt);
        let outcome = attempt_record(kind, params, &streams)?;
        window.push_back(outcome.is_some());
        if window.len() > ABORT_WINDOW {
            window.pop_front();
        }
        match outcome {
            Some(r) => records.push(r),
            None => {
                failures += 1;
                let successes = window.iter().filter(|&&s| s).count();
                if window.len() == ABORT_WINDOW && successes < ABORT_MIN_SUCCESSES {
                    return Err(Error::DatasetGeneration(format!(
                        "{} of the last {ABORT_WINDOW} attempts failed \
                         ({} records done, {kind} scenes, seed {seed}); \
                         the scene parameters leave too little free space",
                        ABORT_WINDOW - successes,
                        records.len()
                    )));
                }
            }
        }
    }

    let header = DatasetHeader { seed, scenario_kind: kind, params: params.clone(), count };
    write_dataset(out, &header, &records)?;
    Ok(BuildReport { records: count, attempts: attempt, failures })
}

/// Evenly spaced subsampling indices over `n` nodes, endpoints included.
pub fn subsample_indices(n: usize, h: usize) -> Result<Vec<usize>> {
    if h < 2 || h > n {
        return Err(Error::InvalidParameter(format!(
            "subsample size must lie in [2, {n}], got {h}"
        )));
    }
    Ok((0..h)
        .map(|j| ((j * (n - 1)) as f64 / (h - 1) as f64).round() as usize)
        .collect())
}

/// Evenly subsamples a trajectory to `h` nodes, rescaling dt so the total
/// duration is preserved.
pub fn subsample_trajectory(traj: &GaussianTrajectory, h: usize) -> Result<GaussianTrajectory> {
    let n = traj.len();
    let idx = subsample_indices(n, h)?;
    let states: Vec<GaussianState> = idx.iter().map(|&i| traj.states()[i]).collect();
    let duration = traj.dt() * (n - 1) as f64;
    GaussianTrajectory::new(states, duration / (h - 1) as f64)
}

/// Converts records into training samples at horizon `h`.
pub fn to_train_samples(records: &[DatasetRecord], h: usize) -> Result<Vec<TrainSample>> {
    records
        .iter()
        .map(|r| {
            let traj = subsample_trajectory(&r.trajectory, h)?;
            let start = traj.states()[0];
            let goal = traj.states()[h - 1];
            let ctx = Context::with_env(start, goal, r.env.clone())?;
            Ok(TrainSample { traj, ctx })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidationReport {
    pub records: usize,
    pub edge_violations: usize,
    pub env_mismatches: usize,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.edge_violations == 0 && self.env_mismatches == 0
    }
}

/// Rechecks every stored trajectory against its own scene: consecutive
/// states must pass the edge feasibility test at the full risk bound, and
/// stored context features must match a recomputation.
pub fn validate_dataset(path: &Path) -> Result<ValidationReport> {
    let (header, records) = read_dataset(path)?;
    let rp = &header.params.roadmap;
    let mut edge_violations = 0;
    let mut env_mismatches = 0;
    for r in &records {
        let grid = EsdfGrid::build(&r.workspace, header.params.esdf)?;
        for w in r.trajectory.states().windows(2) {
            let res = edge_resolution(wasserstein2(&w[0], &w[1]), rp.check_spacing);
            if !connect_edge(&w[0], &w[1], &grid, rp.alpha, rp.epsilon, res)? {
                edge_violations += 1;
            }
        }
        let states = r.trajectory.states();
        let start = states[0];
        let goal = states[states.len() - 1];
        let env = env_features(
            &Point::new(start.x(), start.y()),
            &Point::new(goal.x(), goal.y()),
            &grid,
        )?;
        let mismatch = env
            .iter()
            .zip(&r.env)
            .any(|(a, b)| (a - b).abs() > 1e-3 * a.abs().max(1.0));
        if mismatch {
            env_mismatches += 1;
        }
    }
    Ok(ValidationReport { records: records.len(), edge_violations, env_mismatches })
}
