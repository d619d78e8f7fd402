//! Workspace geometry: convex polygonal obstacles and signed distance queries.

mod esdf;
mod scenario;

pub use esdf::{EsdfGrid, EsdfOptions};
pub use scenario::{
    generate_scenario, ParsedScenario, ScenarioFile, ScenarioKind, ScenarioParams,
};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = Vector2<f64>;

/// Convex polygon with vertices stored counter-clockwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct ConvexPolygon {
    vertices: Vec<Point>,
}

impl ConvexPolygon {
    /// Validates convexity and non-degeneracy; reverses clockwise input.
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::Geometry(format!(
                "polygon needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if vertices.iter().any(|v| !v.x.is_finite() || !v.y.is_finite()) {
            return Err(Error::Geometry("polygon vertex is not finite".into()));
        }
        let area2 = signed_area2(&vertices);
        let mut verts = vertices;
        if area2 < 0.0 {
            verts.reverse();
        }
        let area2 = signed_area2(&verts);
        if area2 <= 1e-12 {
            return Err(Error::Geometry(format!(
                "degenerate polygon (area {:.3e})",
                area2 / 2.0
            )));
        }
        let n = verts.len();
        for i in 0..n {
            let a = verts[i];
            let b = verts[(i + 1) % n];
            let c = verts[(i + 2) % n];
            let cross = (b - a).perp(&(c - b));
            if cross <= 0.0 {
                return Err(Error::Geometry(format!(
                    "polygon is not strictly convex at vertex {}",
                    (i + 1) % n
                )));
            }
        }
        Ok(Self { vertices: verts })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area2(&self.vertices) / 2.0
    }

    /// True when `p` lies inside or on the boundary.
    pub fn contains(&self, p: Point) -> bool {
        let n = self.vertices.len();
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            if (b - a).perp(&(p - a)) < 0.0 {
                return false;
            }
        }
        true
    }

    /// Exact signed distance: negative inside, positive outside.
    pub fn signed_distance(&self, p: Point) -> f64 {
        let d = self.boundary_distance(p);
        if self.contains(p) {
            -d
        } else {
            d
        }
    }

    /// Distance from `p` to the polygon boundary (always nonnegative).
    pub fn boundary_distance(&self, p: Point) -> f64 {
        let n = self.vertices.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            best = best.min(segment_distance(p, a, b));
        }
        best
    }

    /// Minimum distance between two convex polygons; zero if they overlap.
    pub fn distance_to(&self, other: &ConvexPolygon) -> f64 {
        if self.vertices.iter().any(|&v| other.contains(v))
            || other.vertices.iter().any(|&v| self.contains(v))
        {
            return 0.0;
        }
        let n = self.vertices.len();
        let m = other.vertices.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            let a0 = self.vertices[i];
            let a1 = self.vertices[(i + 1) % n];
            for j in 0..m {
                let b0 = other.vertices[j];
                let b1 = other.vertices[(j + 1) % m];
                best = best.min(segment_segment_distance(a0, a1, b0, b1));
            }
        }
        best
    }
}

impl TryFrom<Vec<[f64; 2]>> for ConvexPolygon {
    type Error = Error;
    fn try_from(v: Vec<[f64; 2]>) -> Result<Self> {
        ConvexPolygon::new(v.into_iter().map(|p| Point::new(p[0], p[1])).collect())
    }
}

impl From<ConvexPolygon> for Vec<[f64; 2]> {
    fn from(p: ConvexPolygon) -> Self {
        p.vertices.iter().map(|v| [v.x, v.y]).collect()
    }
}

/// Bounded rectangular workspace with convex obstacles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorkspaceRepr", into = "WorkspaceRepr")]
pub struct Workspace {
    width: f64,
    height: f64,
    obstacles: Vec<ConvexPolygon>,
}

#[derive(Serialize, Deserialize)]
struct WorkspaceRepr {
    width: f64,
    height: f64,
    obstacles: Vec<ConvexPolygon>,
}

impl Workspace {
    pub fn new(width: f64, height: f64, obstacles: Vec<ConvexPolygon>) -> Result<Self> {
        if !(width > 0.0) || !(height > 0.0) || !width.is_finite() || !height.is_finite() {
            return Err(Error::Geometry(format!(
                "workspace extent must be positive, got {width}x{height}"
            )));
        }
        for (i, obs) in obstacles.iter().enumerate() {
            for v in obs.vertices() {
                if v.x < 0.0 || v.x > width || v.y < 0.0 || v.y > height {
                    return Err(Error::Geometry(format!(
                        "obstacle {i} vertex ({}, {}) outside workspace bounds",
                        v.x, v.y
                    )));
                }
            }
        }
        Ok(Self {
            width,
            height,
            obstacles,
        })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn obstacles(&self) -> &[ConvexPolygon] {
        &self.obstacles
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= 0.0 && p.x <= self.width && p.y >= 0.0 && p.y <= self.height
    }

    /// Cap applied to free-space distances when no obstacle bounds them.
    pub fn distance_cap(&self) -> f64 {
        self.width.max(self.height)
    }

    /// Exact signed distance to the obstacle union: pointwise minimum of the
    /// per-obstacle signed distances. Empty scenes return the distance cap.
    pub fn signed_distance(&self, p: Point) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.signed_distance(p))
            .fold(self.distance_cap(), f64::min)
    }

    /// Signed distance to the workspace boundary: positive inside the box.
    pub fn boundary_signed_distance(&self, p: Point) -> f64 {
        p.x.min(self.width - p.x).min(p.y).min(self.height - p.y)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&scenario::ScenarioFile::from_workspace(self))
            .expect("workspace serialization cannot fail")
    }

    /// Parses a scenario document, validating every polygon invariant.
    pub fn from_json(text: &str) -> Result<Self> {
        scenario::ScenarioFile::parse(text).map(|f| f.workspace)
    }
}

impl TryFrom<WorkspaceRepr> for Workspace {
    type Error = Error;
    fn try_from(r: WorkspaceRepr) -> Result<Self> {
        Workspace::new(r.width, r.height, r.obstacles)
    }
}

impl From<Workspace> for WorkspaceRepr {
    fn from(w: Workspace) -> Self {
        WorkspaceRepr {
            width: w.width,
            height: w.height,
            obstacles: w.obstacles,
        }
    }
}

fn signed_area2(verts: &[Point]) -> f64 {
    let n = verts.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = verts[i];
        let b = verts[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    acc
}

/// Distance from point `p` to segment `ab`.
pub(crate) fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

fn segment_segment_distance(a0: Point, a1: Point, b0: Point, b1: Point) -> f64 {
    if segments_intersect(a0, a1, b0, b1) {
        return 0.0;
    }
    segment_distance(a0, b0, b1)
        .min(segment_distance(a1, b0, b1))
        .min(segment_distance(b0, a0, a1))
        .min(segment_distance(b1, a0, a1))
}

fn segments_intersect(a0: Point, a1: Point, b0: Point, b1: Point) -> bool {
    let d1 = (a1 - a0).perp(&(b0 - a0));
    let d2 = (a1 - a0).perp(&(b1 - a0));
    let d3 = (b1 - b0).perp(&(a0 - b0));
    let d4 = (b1 - b0).perp(&(a1 - b0));
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// Axis-aligned rectangle helper used by scenario construction and tests.
pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<ConvexPolygon> {
    ConvexPolygon::new(vec![
        Point::new(x0, y0),
        Point::new(x1, y0),
        Point::new(x1, y1),
        Point::new(x0, y1),
    ])
}
