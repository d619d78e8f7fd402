//! Procedural benchmark scenes and the scenario JSON document.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ConvexPolygon, Point, Workspace};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    DenseObstacles,
    NarrowPassages,
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScenarioKind::DenseObstacles => write!(f, "dense-obstacles"),
            ScenarioKind::NarrowPassages => write!(f, "narrow-passages"),
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense-obstacles" | "dense" => Ok(ScenarioKind::DenseObstacles),
            "narrow-passages" | "narrow" => Ok(ScenarioKind::NarrowPassages),
            other => Err(Error::InvalidParameter(format!(
                "unknown scenario kind '{other}' (expected dense-obstacles or narrow-passages)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioParams {
    pub width: f64,
    pub height: f64,
    pub obstacle_count: usize,
    /// Diameter range for sampled obstacles, meters.
    pub size_min: f64,
    pub size_max: f64,
    /// Minimum gap between obstacle boundaries, meters.
    pub min_clearance: f64,
    /// Narrow-passages only: guaranteed corridor opening, meters.
    pub corridor_width: f64,
    /// Rejection-sampling attempts per obstacle before giving up.
    pub max_retries: usize,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            width: 200.0,
            height: 160.0,
            obstacle_count: 12,
            size_min: 8.0,
            size_max: 24.0,
            min_clearance: 6.0,
            corridor_width: 8.0,
            max_retries: 400,
        }
    }
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.width > 0.0) || !(self.height > 0.0) {
            problems.push("width and height must be positive".to_string());
        }
        if !(self.size_min > 0.0) || self.size_max < self.size_min {
            problems.push(format!(
                "size range [{}, {}] must satisfy 0 < min <= max",
                self.size_min, self.size_max
            ));
        }
        if self.min_clearance < 0.0 {
            problems.push("min_clearance must be nonnegative".to_string());
        }
        if !(self.corridor_width > 0.0) {
            problems.push("corridor_width must be positive".to_string());
        }
        if self.max_retries == 0 {
            problems.push("max_retries must be at least 1".to_string());
        }
        if self.size_max > self.width.min(self.height) / 2.0 {
            problems.push("size_max must not exceed half the smaller workspace extent".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(problems.join("; ")))
        }
    }
}

/// Deterministically generates a benchmark scene. Identical
/// (kind, seed, params) inputs reproduce identical vertex lists.
pub fn generate_scenario(kind: ScenarioKind, seed: u64, params: &ScenarioParams) -> Result<Workspace> {
    params.validate()?;
    let mut rng = stream_rng(seed, Stream::Scenario, 0);
    match kind {
        ScenarioKind::DenseObstacles => {
            let obstacles = scatter(&mut rng, params, params.obstacle_count, &[], &[])?;
            Workspace::new(params.width, params.height, obstacles)
        }
        ScenarioKind::NarrowPassages => narrow_passages(&mut rng, params),
    }
}

/// Rejection-samples `count` convex obstacles keeping `min_clearance` to the
/// `fixed` set and to each other, and `keep_clear` meters of free space
/// around each protected point.
fn scatter(
    rng: &mut ChaCha8Rng,
    params: &ScenarioParams,
    count: usize,
    fixed: &[ConvexPolygon],
    keep_clear: &[(Point, f64)],
) -> Result<Vec<ConvexPolygon>> {
    let mut placed: Vec<ConvexPolygon> = Vec::with_capacity(count);
    for k in 0..count {
        let mut accepted = false;
        for _ in 0..params.max_retries {
            let poly = match random_polygon(rng, params) {
                Some(p) => p,
                None => continue,
            };
            let clear_fixed = fixed
                .iter()
                .chain(placed.iter())
                .all(|o| poly.distance_to(o) >= params.min_clearance);
            let clear_points = keep_clear
                .iter()
                .all(|&(p, r)| poly.boundary_distance(p) >= r && !poly.contains(p));
            if clear_fixed && clear_points {
                placed.push(poly);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::ScenarioGeneration(format!(
                "could not place obstacle {} of {count} with clearance {} m after {} attempts",
                k + 1,
                params.min_clearance,
                params.max_retries
            )));
        }
    }
    Ok(placed)
}

/// Random convex n-gon: sorted angles around a center with jittered radii.
/// Near-degenerate draws return None and are re-sampled by the caller.
fn random_polygon(rng: &mut ChaCha8Rng, params: &ScenarioParams) -> Option<ConvexPolygon> {
    let radius = rng.gen_range(params.size_min..=params.size_max) / 2.0;
    let margin = radius;
    if params.width <= 2.0 * margin || params.height <= 2.0 * margin {
        return None;
    }
    let cx = rng.gen_range(margin..params.width - margin);
    let cy = rng.gen_range(margin..params.height - margin);
    let nv = rng.gen_range(3..=8usize);
    let mut angles: Vec<f64> = (0..nv)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let verts: Vec<Point> = angles
        .iter()
        .map(|&a| {
            let r = radius * rng.gen_range(0.6..=1.0);
            Point::new(cx + r * a.cos(), cy + r * a.sin())
        })
        .collect();
    // Convex hull of the ring handles concave draws from radius jitter.
    let hull = convex_hull(verts);
    ConvexPolygon::new(hull).ok()
}

/// Monotone-chain hull, counter-clockwise. The strict turn test also drops
/// collinear points, so the result is strictly convex.
fn convex_hull(mut pts: Vec<Point>) -> Vec<Point> {
    pts.sort_by(|a, b| a.x.partial_cmp(&b.x).unwrap().then(a.y.partial_cmp(&b.y).unwrap()));
    pts.dedup_by(|a, b| (*a - *b).norm() < 1e-9);
    if pts.len() < 3 {
        return pts;
    }
    let turn = |chain: &[Point], p: Point| {
        let a = chain[chain.len() - 2];
        let b = chain[chain.len() - 1];
        (b - a).perp(&(p - a))
    };
    let mut lower: Vec<Point> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && turn(&lower, p) <= 1e-9 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && turn(&upper, p) <= 1e-9 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Wall with a gap in the middle third, plus scattered clutter on both
/// sides. The corridor center keeps an exact half-width of free space.
fn narrow_passages(rng: &mut ChaCha8Rng, params: &ScenarioParams) -> Result<Workspace> {
    let cw = params.corridor_width;
    if cw + 2.0 >= params.height {
        return Err(Error::InvalidParameter(format!(
            "corridor width {cw} leaves no room for walls in height {}",
            params.height
        )));
    }
    let thickness = params.size_min.min(params.width / 10.0);
    let wall_x = params.width * rng.gen_range(0.4..0.6);
    let x0 = wall_x - thickness / 2.0;
    let x1 = wall_x + thickness / 2.0;
    let gap_y = rng.gen_range(params.height * 0.25..params.height * 0.75);
    let mut walls = Vec::new();
    let lower_top = gap_y - cw / 2.0;
    let upper_bot = gap_y + cw / 2.0;
    if lower_top > 0.5 {
        walls.push(super::rect(x0, 0.0, x1, lower_top)?);
    }
    if upper_bot < params.height - 0.5 {
        walls.push(super::rect(x0, upper_bot, x1, params.height)?);
    }
    let corridor_center = Point::new(wall_x, gap_y);
    let clutter = scatter(
        rng,
        params,
        params.obstacle_count,
        &walls,
        &[(corridor_center, cw / 2.0 + params.min_clearance)],
    )?;
    let mut obstacles = walls;
    obstacles.extend(clutter);
    Workspace::new(params.width, params.height, obstacles)
}

/// On-disk scenario document: workspace geometry plus the generation inputs
/// that produced it (absent for hand-authored scenes).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub width: f64,
    pub height: f64,
    pub obstacles: Vec<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<ScenarioKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<ScenarioParams>,
}

pub struct ParsedScenario {
    pub workspace: Workspace,
    pub seed: Option<u64>,
    pub kind: Option<ScenarioKind>,
    pub params: Option<ScenarioParams>,
}

impl ScenarioFile {
    pub fn from_workspace(ws: &Workspace) -> Self {
        Self {
            width: ws.width(),
            height: ws.height(),
            obstacles: ws
                .obstacles()
                .iter()
                .map(|o| o.vertices().iter().map(|v| [v.x, v.y]).collect())
                .collect(),
            seed: None,
            kind: None,
            params: None,
        }
    }

    pub fn with_provenance(mut self, seed: u64, kind: ScenarioKind, params: &ScenarioParams) -> Self {
        self.seed = Some(seed);
        self.kind = Some(kind);
        self.params = Some(params.clone());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialization cannot fail")
    }

    /// Parses and validates a scenario document; every polygon invariant is
    /// re-checked so downstream code can trust loaded geometry.
    pub fn parse(text: &str) -> Result<ParsedScenario> {
        let file: ScenarioFile =
            serde_json::from_str(text).map_err(|e| Error::Parse {
                offset: e.column(),
                detail: format!("scenario json: {e}"),
            })?;
        let obstacles = file
            .obstacles
            .iter()
            .map(|verts| ConvexPolygon::try_from(verts.clone()))
            .collect::<Result<Vec<_>>>()?;
        let workspace = Workspace::new(file.width, file.height, obstacles)?;
        Ok(ParsedScenario {
            workspace,
            seed: file.seed,
            kind: file.kind,
            params: file.params,
        })
    }
}
