//! Trajectory checkpoints: magic, a length-prefixed JSON header, then raw
//! little-endian `f64` payloads for `g`, `J` and `ω` of every frame.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowDiagnostics, FlowFailure, FlowState, Trajectory};
use crate::lattice::{Lattice, LatticeField, LatticeSpec, Slot, ENDO, FORM};
use crate::structure::{self, AHStructure};

pub const MAGIC: &[u8; 8] = b"AHCFCKPT";
pub const VERSION: u32 = 1;
/// Upper bound on the header, guarding against hostile length prefixes.
pub const MAX_HEADER_BYTES: usize = 16 << 20;
/// Stored structures must satisfy the post-evolution tolerance.
const LOAD_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameHeader {
    pub t: f64,
    pub step: usize,
    pub diagnostics: FlowDiagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub lattice: LatticeSpec,
    /// Valence of each stored field, in payload order.
    pub fields: Vec<(String, Vec<Slot>)>,
    pub frames: Vec<FrameHeader>,
    pub failure: Option<FlowFailure>,
    pub initial_gauge: f64,
    pub ceiling: f64,
}

fn field_layout() -> Vec<(String, Vec<Slot>)> {
    vec![
        ("g".to_string(), FORM.to_vec()),
        ("J".to_string(), ENDO.to_vec()),
        ("omega".to_string(), FORM.to_vec()),
    ]
}

pub fn encode(traj: &Trajectory) -> Result<Vec<u8>> {
    let first = traj
        .frames
        .first()
        .ok_or_else(|| Error::Checkpoint("cannot encode an empty trajectory".into()))?;
    let lat = first.structure.lattice().clone();
    let header = CheckpointHeader {
        version: VERSION,
        lattice: lat.spec(),
        fields: field_layout(),
        frames: traj
            .frames
            .iter()
            .map(|f| FrameHeader {
                t: f.t,
                step: f.step,
                diagnostics: f.diagnostics,
            })
            .collect(),
        failure: traj.failure.clone(),
        initial_gauge: traj.initial_gauge,
        ceiling: traj.ceiling,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + traj.frames.len() * 3 * first.structure.g().data().len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for f in &traj.frames {
        if f.structure.lattice().spec() != lat.spec() {
            return Err(Error::Checkpoint("frames live on different lattices".into()));
        }
        for field in [f.structure.g(), f.structure.j(), f.structure.omega()] {
            for v in field.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Trajectory> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if hlen > MAX_HEADER_BYTES || 12 + hlen > bytes.len() {
        return Err(bad("header length out of range"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + hlen])?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    if header.fields != field_layout() {
        return Err(bad("unexpected field layout"));
    }
    if header.frames.is_empty() {
        return Err(bad("no frames"));
    }
    let spec = header.lattice;
    // Size the payload before building FFT plans so hostile specs fail cheaply.
    let points = spec
        .points_per_axis
        .checked_pow(2 * spec.n as u32)
        .filter(|_| spec.n <= 2)
        .ok_or_else(|| bad("lattice too large"))?;
    let comps = (2 * spec.n) * (2 * spec.n);
    let per_field = points.checked_mul(comps).ok_or_else(|| bad("lattice too large"))?;
    let expected = per_field
        .checked_mul(3 * 8)
        .and_then(|v| v.checked_mul(header.frames.len()))
        .ok_or_else(|| bad("payload too large"))?;
    let payload = &bytes[12 + hlen..];
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let lat = Lattice::new(spec)?;
    let mut chunks = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut frames = Vec::with_capacity(header.frames.len());
    for fh in &header.frames {
        let mut next = |valence: &[Slot]| -> Result<LatticeField> {
            let data: Vec<f64> = chunks.by_ref().take(per_field).collect();
            LatticeField::from_data(&lat, valence, data)
        };
        let g = next(FORM)?;
        let j = next(ENDO)?;
        let omega = next(FORM)?;
        for f in [&g, &j, &omega] {
            f.check_finite()?;
        }
        let s = AHStructure::from_parts_unchecked(g, j, omega);
        let diag = structure::check_structure(&s);
        if !diag.passes(LOAD_TOL) {
            return Err(Error::Checkpoint(format!(
                "frame at t = {} is not a compatible structure (residual {:.3e})",
                fh.t,
                diag.max_residual()
            )));
        }
        frames.push(FlowState {
            t: fh.t,
            step: fh.step,
            structure: s,
            diagnostics: fh.diagnostics,
        });
    }
    Ok(Trajectory {
        frames,
        failure: header.failure,
        initial_gauge: header.initial_gauge,
        ceiling: header.ceiling,
    })
}

/// Write atomically: a sibling temp file renamed into place.
pub fn save(traj: &Trajectory, path: &Path) -> Result<()> {
    let bytes = encode(traj)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Trajectory> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{self, FlowParams};
    use crate::perturb::generate_perturbation;

    fn sample() -> Trajectory {
        let lat = Lattice::standard(1, 8).unwrap();
        let s = generate_perturbation(&AHStructure::standard(&lat), 0.02, (1, 2), 3).unwrap();
        flow::run(&s, &FlowParams::default(), 0.05, 2).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let bytes = encode(&t).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode(&sample()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"AHCFCKP").is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong).is_err());
        let mut huge = bytes.clone();
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode(&huge).is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode(&nan).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traj.ckpt");
        let t = sample();
        save(&t, &p).unwrap();
        assert_eq!(load(&p).unwrap(), t);
    }
}
