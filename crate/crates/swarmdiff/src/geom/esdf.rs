//! Discretized signed distance field with bilinear queries and a compact
//! binary encoding.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector2;
use std::io::Cursor;

use super::{Point, Workspace};
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"ESDF";
const VERSION: u32 = 1;
/// Header: magic, version, nx, ny, resolution, origin. 40 bytes total.
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 16;
const MAX_CELLS: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EsdfOptions {
    pub resolution: f64,
}

impl Default for EsdfOptions {
    fn default() -> Self {
        Self { resolution: 0.5 }
    }
}

/// Node-centered signed distance samples over a rectangular workspace.
///
/// Values are negative inside obstacles. Each node also stores a unit
/// gradient pointing away from the nearest obstacle surface.
#[derive(Debug, Clone, PartialEq)]
pub struct EsdfGrid {
    nx: usize,
    ny: usize,
    resolution: f64,
    origin: Point,
    values: Vec<f32>,
    gradients: Vec<[f32; 2]>,
}

impl EsdfGrid {
    /// Samples the exact workspace signed distance on a regular grid. Node
    /// (i, j) sits at origin + (i, j) * resolution; the grid covers the full
    /// workspace extent inclusive of both borders.
    pub fn build(workspace: &Workspace, opts: EsdfOptions) -> Result<Self> {
        let res = opts.resolution;
        if !(res > 0.0) || !res.is_finite() {
            return Err(Error::Geometry(format!("esdf resolution must be positive, got {res}")));
        }
        if res > workspace.width().min(workspace.height()) / 4.0 {
            return Err(Error::Geometry(format!(
                "esdf resolution {res} exceeds a quarter of the smallest workspace extent"
            )));
        }
        let nx = (workspace.width() / res).ceil() as usize + 1;
        let ny = (workspace.height() / res).ceil() as usize + 1;
        if nx < 2 || ny < 2 {
            return Err(Error::Geometry("esdf grid needs at least 2 nodes per axis".into()));
        }
        if nx.saturating_mul(ny) > MAX_CELLS {
            return Err(Error::Geometry(format!(
                "esdf grid {nx}x{ny} exceeds the cell budget"
            )));
        }
        let origin = Point::new(0.0, 0.0);
        let mut values = vec![0f32; nx * ny];
        let mut gradients = vec![[0f32; 2]; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                let p = Point::new(origin.x + i as f64 * res, origin.y + j as f64 * res);
                values[j * nx + i] = workspace.signed_distance(p) as f32;
            }
        }
        // Central differences inside, one-sided on the border, then
        // normalized to unit vectors. Medial-axis nodes where the raw
        // gradient vanishes keep an arbitrary finite unit vector.
        for j in 0..ny {
            for i in 0..nx {
                let v = |ii: usize, jj: usize| values[jj * nx + ii] as f64;
                let (gx, denom_x) = if i == 0 {
                    (v(1, j) - v(0, j), res)
                } else if i == nx - 1 {
                    (v(nx - 1, j) - v(nx - 2, j), res)
                } else {
                    (v(i + 1, j) - v(i - 1, j), 2.0 * res)
                };
                let (gy, denom_y) = if j == 0 {
                    (v(i, 1) - v(i, 0), res)
                } else if j == ny - 1 {
                    (v(i, ny - 1) - v(i, ny - 2), res)
                } else {
                    (v(i, j + 1) - v(i, j - 1), 2.0 * res)
                };
                let g = Vector2::new(gx / denom_x, gy / denom_y);
                let n = g.norm();
                let unit = if n < 1e-9 { Vector2::new(1.0, 0.0) } else { g / n };
                gradients[j * nx + i] = [unit.x as f32, unit.y as f32];
            }
        }
        Ok(Self {
            nx,
            ny,
            resolution: res,
            origin,
            values,
            gradients,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    /// Whether `p` lies inside the grid's coverage.
    pub fn in_bounds(&self, p: Point) -> bool {
        self.cell(p).is_ok()
    }

    fn cell(&self, p: Point) -> Result<(usize, usize, f64, f64)> {
        let fx = (p.x - self.origin.x) / self.resolution;
        let fy = (p.y - self.origin.y) / self.resolution;
        if !fx.is_finite() || !fy.is_finite() || fx < 0.0 || fy < 0.0 {
            return Err(Error::OutOfBounds(p.x, p.y));
        }
        let max_x = (self.nx - 1) as f64;
        let max_y = (self.ny - 1) as f64;
        if fx > max_x || fy > max_y {
            return Err(Error::OutOfBounds(p.x, p.y));
        }
        let i = (fx.floor() as usize).min(self.nx - 2);
        let j = (fy.floor() as usize).min(self.ny - 2);
        Ok((i, j, fx - i as f64, fy - j as f64))
    }

    /// Bilinear signed distance at `p`. Out-of-grid queries are errors.
    pub fn query_sdf(&self, p: Point) -> Result<f64> {
        let (i, j, tx, ty) = self.cell(p)?;
        let v = |ii: usize, jj: usize| self.values[jj * self.nx + ii] as f64;
        let v0 = v(i, j) * (1.0 - tx) + v(i + 1, j) * tx;
        let v1 = v(i, j + 1) * (1.0 - tx) + v(i + 1, j + 1) * tx;
        Ok(v0 * (1.0 - ty) + v1 * ty)
    }

    /// Bilinear blend of the stored unit gradients (not renormalized).
    pub fn query_gradient(&self, p: Point) -> Result<Vector2<f64>> {
        let (i, j, tx, ty) = self.cell(p)?;
        let g = |ii: usize, jj: usize| {
            let g = self.gradients[jj * self.nx + ii];
            Vector2::new(g[0] as f64, g[1] as f64)
        };
        let g0 = g(i, j) * (1.0 - tx) + g(i + 1, j) * tx;
        let g1 = g(i, j + 1) * (1.0 - tx) + g(i + 1, j + 1) * tx;
        Ok(g0 * (1.0 - ty) + g1 * ty)
    }

    /// Unit surface normal at `p`; falls back to +x where the gradient
    /// vanishes (deep inside symmetric obstacles).
    pub fn query_normal(&self, p: Point) -> Result<Vector2<f64>> {
        let g = self.query_gradient(p)?;
        let n = g.norm();
        if n < 1e-9 {
            Ok(Vector2::new(1.0, 0.0))
        } else {
            Ok(g / n)
        }
    }

    /// Mean and minimum signed distance over all grid nodes.
    pub fn pooled_sdf_stats(&self) -> (f64, f64) {
        let mut sum = 0.0;
        let mut min = f64::INFINITY;
        for &v in &self.values {
            let v = v as f64;
            sum += v;
            min = min.min(v);
        }
        (sum / self.values.len() as f64, min)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.values.len() * 12);
        out.extend_from_slice(&MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u32::<LittleEndian>(self.nx as u32).unwrap();
        out.write_u32::<LittleEndian>(self.ny as u32).unwrap();
        out.write_f64::<LittleEndian>(self.resolution).unwrap();
        out.write_f64::<LittleEndian>(self.origin.x).unwrap();
        out.write_f64::<LittleEndian>(self.origin.y).unwrap();
        for v in &self.values {
            out.write_f32::<LittleEndian>(*v).unwrap();
        }
        for g in &self.gradients {
            out.write_f32::<LittleEndian>(g[0]).unwrap();
            out.write_f32::<LittleEndian>(g[1]).unwrap();
        }
        out
    }

    /// Decodes the binary layout. Never panics on malformed input: sizes are
    /// validated against the remaining byte count before any allocation.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let parse_err = |offset: usize, detail: &str| Error::Parse {
            offset,
            detail: detail.to_string(),
        };
        if bytes.len() < HEADER_LEN {
            return Err(parse_err(0, "truncated esdf header"));
        }
        if bytes[..4] != MAGIC {
            return Err(parse_err(0, "bad esdf magic"));
        }
        let mut cur = Cursor::new(&bytes[4..HEADER_LEN]);
        let version = cur.read_u32::<LittleEndian>().unwrap();
        if version != VERSION {
            return Err(parse_err(4, "unsupported esdf version"));
        }
        let nx = cur.read_u32::<LittleEndian>().unwrap() as usize;
        let ny = cur.read_u32::<LittleEndian>().unwrap() as usize;
        let resolution = cur.read_f64::<LittleEndian>().unwrap();
        let ox = cur.read_f64::<LittleEndian>().unwrap();
        let oy = cur.read_f64::<LittleEndian>().unwrap();
        if nx < 2 || ny < 2 {
            return Err(parse_err(8, "esdf grid smaller than 2x2"));
        }
        let cells = nx
            .checked_mul(ny)
            .filter(|&c| c <= MAX_CELLS)
            .ok_or_else(|| parse_err(8, "esdf dimensions exceed cell budget"))?;
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(parse_err(16, "esdf resolution must be positive"));
        }
        if !ox.is_finite() || !oy.is_finite() {
            return Err(parse_err(24, "esdf origin not finite"));
        }
        let payload = cells
            .checked_mul(12)
            .ok_or_else(|| parse_err(8, "esdf payload size overflow"))?;
        let expect = HEADER_LEN + payload;
        if bytes.len() != expect {
            return Err(parse_err(
                bytes.len().min(expect),
                "esdf payload length mismatch",
            ));
        }
        let mut cur = Cursor::new(&bytes[HEADER_LEN..]);
        let mut values = Vec::with_capacity(cells);
        for _ in 0..cells {
            let v = cur.read_f32::<LittleEndian>().unwrap();
            if !v.is_finite() {
                return Err(parse_err(HEADER_LEN, "non-finite esdf value"));
            }
            values.push(v);
        }
        let mut gradients = Vec::with_capacity(cells);
        for _ in 0..cells {
            let gx = cur.read_f32::<LittleEndian>().unwrap();
            let gy = cur.read_f32::<LittleEndian>().unwrap();
            if !gx.is_finite() || !gy.is_finite() {
                return Err(parse_err(HEADER_LEN, "non-finite esdf gradient"));
            }
            gradients.push([gx, gy]);
        }
        Ok(Self {
            nx,
            ny,
            resolution,
            origin: Point::new(ox, oy),
            values,
            gradients,
        })
    }
}
