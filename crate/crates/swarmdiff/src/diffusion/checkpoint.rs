//! Model persistence: a one-line JSON header describing the architecture,
//! schedule, normalization, and tensor table, followed by the tensors as
//! little-endian f32 in header order.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::context::NormStats;
use super::net::{Arch, DenoiserParams};
use super::schedule::NoiseSchedule;
use super::DiffusionModel;

const FORMAT: &str = "swarmdiff-checkpoint";
const VERSION: u32 = 1;
/// Upper bound on the header line; anything longer is malformed.
const MAX_HEADER: usize = 8 << 20;

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    arch: Arch,
    betas: Vec<f64>,
    norm: NormStats,
    trained_h: usize,
    dt: f64,
    tensors: Vec<TensorInfo>,
}

pub fn encode(model: &DiffusionModel) -> Vec<u8> {
    let tensors: Vec<TensorInfo> = model
        .params
        .tensors()
        .iter()
        .map(|(name, t)| TensorInfo {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        arch: model.params.arch,
        betas: model.schedule.betas().to_vec(),
        norm: model.norm.clone(),
        trained_h: model.trained_h,
        dt: model.dt,
        tensors,
    };
    let mut out = serde_json::to_vec(&header).expect("header serialization");
    out.push(b'\n');
    for (_, t) in model.params.tensors() {
        for &v in t.iter() {
            out.write_all(&(v as f32).to_le_bytes()).unwrap();
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<DiffusionModel> {
    let nl = bytes
        .iter()
        .take(MAX_HEADER)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse {
            offset: 0,
            detail: "no header line".into(),
        })?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Parse {
            offset: 0,
            detail: format!("bad header: {e}"),
        })?;
    if header.format != FORMAT {
        return Err(Error::Format(format!(
            "unexpected format tag {:?}",
            header.format
        )));
    }
    if header.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    header.arch.validate()?;
    let schedule = NoiseSchedule::from_betas(header.betas)?;
    if header.trained_h < 2 {
        return Err(Error::Format(format!(
            "trained_h must be at least 2, got {}",
            header.trained_h
        )));
    }
    if !(header.dt > 0.0) || !header.dt.is_finite() {
        return Err(Error::Format(format!("dt must be positive, got {}", header.dt)));
    }
    if header.norm.context_dim() != header.arch.ctx_dim {
        return Err(Error::Format(format!(
            "normalization implies context dim {} but arch has {}",
            header.norm.context_dim(),
            header.arch.ctx_dim
        )));
    }
    for (d, (&m, &s)) in header.norm.mean.iter().zip(header.norm.std.iter()).enumerate() {
        if !m.is_finite() || !s.is_finite() || s <= 0.0 {
            return Err(Error::Format(format!("bad normalization in dim {d}")));
        }
    }
    if header
        .norm
        .env_mean
        .iter()
        .chain(header.norm.env_std.iter())
        .any(|v| !v.is_finite())
        || header.norm.env_std.iter().any(|&v| v <= 0.0)
        || header.norm.env_mean.len() != header.norm.env_std.len()
    {
        return Err(Error::Format("bad environment normalization".into()));
    }

    let mut params = DenoiserParams::init(header.arch, 0)?;
    {
        let expected = params.tensors();
        if expected.len() != header.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, header lists {}",
                expected.len(),
                header.tensors.len()
            )));
        }
        for ((name, t), info) in expected.iter().zip(header.tensors.iter()) {
            if *name != info.name || t.shape() != info.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {:?} {:?} does not match expected {:?} {:?}",
                    info.name,
                    info.shape,
                    name,
                    t.shape()
                )));
            }
        }
    }

    let blob = &bytes[nl + 1..];
    let expected_len: usize = params.tensors().iter().map(|(_, t)| t.len() * 4).sum();
    if blob.len() != expected_len {
        return Err(Error::Parse {
            offset: nl + 1,
            detail: format!(
                "tensor payload is {} bytes, expected {expected_len}",
                blob.len()
            ),
        });
    }
    let mut cursor = 0usize;
    for (name, mut t) in params.tensors_mut() {
        let slice = t.as_slice_mut().expect("parameters are contiguous");
        for v in slice.iter_mut() {
            let raw = [
                blob[cursor],
                blob[cursor + 1],
                blob[cursor + 2],
                blob[cursor + 3],
            ];
            let f = f32::from_le_bytes(raw);
            if !f.is_finite() {
                return Err(Error::Parse {
                    offset: nl + 1 + cursor,
                    detail: format!("non-finite value in tensor {name}"),
                });
            }
            *v = f as f64;
            cursor += 4;
        }
    }

    Ok(DiffusionModel {
        params,
        schedule,
        norm: header.norm,
        trained_h: header.trained_h,
        dt: header.dt,
    })
}

pub fn save(model: &DiffusionModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<DiffusionModel> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::context::ENV_FEATURES;
    use crate::diffusion::net::NODE_DIM;
    use crate::gaussian::GaussianState;

    fn model() -> DiffusionModel {
        let arch = Arch {
            model_dim: 16,
            n_heads: 2,
            n_layers: 2,
            ctx_dim: 2 * NODE_DIM + ENV_FEATURES,
        };
        let params = DenoiserParams::init_dense(arch, 42).unwrap();
        let states: Vec<GaussianState> = (0..12)
            .map(|i| GaussianState::new(i as f64, 2.0 * i as f64, 1.0 + 0.1 * i as f64, 0.9, 0.05))
            .collect();
        let norm = NormStats::fit(&[states], &[vec![0.25; ENV_FEATURES]]).unwrap();
        DiffusionModel {
            params,
            schedule: NoiseSchedule::cosine(20).unwrap(),
            norm,
            trained_h: 12,
            dt: 0.25,
        }
    }

    #[test]
    fn round_trip_is_idempotent() {
        let m = model();
        let bytes = encode(&m);
        let loaded = decode(&bytes).unwrap();
        // Weights pass through f32, so a second encode is bit-identical.
        assert_eq!(encode(&loaded), bytes);
        assert_eq!(loaded.trained_h, 12);
        assert_eq!(loaded.schedule, m.schedule);
        assert_eq!(loaded.norm, m.norm);
        for ((_, a), (_, b)) in m.params.tensors().iter().zip(loaded.params.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = model();
        save(&m, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(encode(&loaded), encode(&m));
    }

    #[test]
    fn rejects_malformed_input() {
        let m = model();
        let bytes = encode(&m);

        assert!(matches!(decode(b"no newline"), Err(Error::Parse { .. })));
        assert!(matches!(
            decode(b"{\"format\":\"other\"}\n"),
            Err(Error::Parse { .. }) | Err(Error::Format(_))
        ));

        let mut truncated = bytes.clone();
        truncated.truncate(bytes.len() - 5);
        assert!(matches!(decode(&truncated), Err(Error::Parse { .. })));

        let mut padded = bytes.clone();
        padded.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(decode(&padded), Err(Error::Parse { .. })));

        // Corrupt one blob value into a NaN.
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let mut nan = bytes.clone();
        nan[nl + 1..nl + 5].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode(&nan), Err(Error::Parse { .. })));

        // Version bump.
        let text = String::from_utf8(bytes[..nl].to_vec()).unwrap();
        let bumped = text.replace("\"version\":1", "\"version\":9");
        let mut v9 = bumped.into_bytes();
        v9.push(b'\n');
        v9.extend_from_slice(&bytes[nl + 1..]);
        assert!(matches!(decode(&v9), Err(Error::Format(_))));
    }

    #[test]
    fn decoded_model_samples() {
        use crate::costs::{CostWeights, GpModel};
        use crate::diffusion::{guided_sample, Context, SampleConfig};
        use crate::geom::{rect, EsdfOptions, Workspace};

        let m = model();
        let loaded = decode(&encode(&m)).unwrap();
        let ws = Workspace::new(40.0, 40.0, vec![rect(15.0, 15.0, 20.0, 20.0).unwrap()]).unwrap();
        let grid = crate::geom::EsdfGrid::build(&ws, EsdfOptions { resolution: 0.5 }).unwrap();
        let ctx = Context::new(
            GaussianState::new(5.0, 5.0, 1.0, 1.0, 0.0),
            GaussianState::new(35.0, 35.0, 1.0, 1.0, 0.0),
            &grid,
        )
        .unwrap();
        let cfg = SampleConfig {
            horizon: 12,
            dt: 0.25,
            n_samples: 1,
            guidance_weight: 0.2,
        };
        let weights = CostWeights::default();
        let gp = GpModel::new(0.25, 1.0, 1.0).unwrap();
        let out = guided_sample(&loaded, &ctx, &grid, &weights, &gp, &cfg, 3).unwrap();
        assert_eq!(out.trajectories.len(), 1);
        assert_eq!(out.trajectories[0].len(), 12);
    }
}
