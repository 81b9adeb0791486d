//! Binary checkpoints: magic, version, kind, a JSON header, then a flat
//! array of little-endian `f64` parameters.
//!
//! ```text
//! b"REPROBE\0" | u32 version | u32 kind | u64 header_len | header
//!             | u64 n_params | n_params × f64
//! ```

use std::path::Path;

use reprobe_core::model::{System, SystemConfig, TrainingLog};
use reprobe_core::probe::{Probe, ProbeArch, ProbeConstraints, ProxyFamily};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 8] = b"REPROBE\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Kind {
    System = 1,
    Family = 2,
}

pub fn encode<H: Serialize>(kind: Kind, header: &H, params: &[f64]) -> Vec<u8> {
    let header = serde_json::to_vec(header).expect("header serialises");
    let mut out = Vec::with_capacity(32 + header.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(kind as u32).to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.at.checked_add(n)?;
        let s = self.bytes.get(self.at..end)?;
        self.at = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8], kind: Kind, path: &Path) -> Result<(H, Vec<f64>)> {
    let bad = |message: String| LabError::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut c = Cursor { bytes, at: 0 };
    if c.take(8) != Some(&MAGIC[..]) {
        return Err(bad("not a reprobe checkpoint".into()));
    }
    let version = c.u32().ok_or_else(|| bad("truncated".into()))?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let k = c.u32().ok_or_else(|| bad("truncated".into()))?;
    if k != kind as u32 {
        return Err(bad(format!("expected checkpoint kind {}, found {k}", kind as u32)));
    }
    let hlen = c.u64().ok_or_else(|| bad("truncated".into()))? as usize;
    let header = c.take(hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: H = serde_json::from_slice(header).map_err(|e| bad(format!("header: {e}")))?;
    let n = c.u64().ok_or_else(|| bad("truncated".into()))? as usize;
    let raw = c
        .take(n.checked_mul(8).ok_or_else(|| bad("parameter count overflows".into()))?)
        .ok_or_else(|| bad(format!("expected {n} parameters")))?;
    if c.at != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - c.at)));
    }
    let params = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    Ok((header, params))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemHeader {
    config: SystemConfig,
    trained: bool,
    training_log: TrainingLog,
}

pub fn system_to_bytes(system: &System) -> Vec<u8> {
    let header = SystemHeader {
        config: system.config().clone(),
        trained: system.trained,
        training_log: system.training_log.clone(),
    };
    encode(Kind::System, &header, system.parameters())
}

pub fn system_from_bytes(bytes: &[u8], path: &Path) -> Result<System> {
    let (h, params): (SystemHeader, _) = decode(bytes, Kind::System, path)?;
    Ok(System::from_parameters(h.config, params, h.trained, h.training_log)?)
}

pub fn save_system(system: &System, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &system_to_bytes(system))
}

pub fn load_system(path: &Path) -> Result<System> {
    system_from_bytes(&fsutil::read(path)?, path)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemberHeader {
    arch: ProbeArch,
    seed: u64,
    train_loss: Option<f64>,
    test_loss: Option<f64>,
    n_params: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FamilyHeader {
    property: String,
    layer: usize,
    constraints: ProbeConstraints,
    tau: f64,
    h_z: f64,
    attempts: Vec<(u64, f64)>,
    members: Vec<MemberHeader>,
}

pub fn family_to_bytes(family: &ProxyFamily) -> Vec<u8> {
    let header = FamilyHeader {
        property: family.property.clone(),
        layer: family.layer,
        constraints: family.constraints.clone(),
        tau: family.tau,
        h_z: family.h_z,
        attempts: family.attempts.clone(),
        members: family
            .members
            .iter()
            .map(|m| MemberHeader {
                arch: m.arch.clone(),
                seed: m.seed,
                train_loss: m.train_loss,
                test_loss: m.test_loss,
                n_params: m.parameters.len(),
            })
            .collect(),
    };
    let params: Vec<f64> = family.members.iter().flat_map(|m| m.parameters.iter().copied()).collect();
    encode(Kind::Family, &header, &params)
}

pub fn family_from_bytes(bytes: &[u8], path: &Path) -> Result<ProxyFamily> {
    let (h, params): (FamilyHeader, Vec<f64>) = decode(bytes, Kind::Family, path)?;
    let total: usize = h.members.iter().map(|m| m.n_params).sum();
    if total != params.len() {
        return Err(LabError::Format {
            path: path.to_path_buf(),
            message: format!("members declare {total} parameters, file has {}", params.len()),
        });
    }
    let mut at = 0;
    let mut members = Vec::with_capacity(h.members.len());
    for m in h.members {
        let mut probe = Probe::from_parameters(m.arch, params[at..at + m.n_params].to_vec(), m.seed)?;
        at += m.n_params;
        probe.train_loss = m.train_loss;
        probe.test_loss = m.test_loss;
        members.push(probe);
    }
    Ok(ProxyFamily {
        property: h.property,
        layer: h.layer,
        constraints: h.constraints,
        tau: h.tau,
        h_z: h.h_z,
        members,
        attempts: h.attempts,
    })
}

pub fn save_family(family: &ProxyFamily, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &family_to_bytes(family))
}

pub fn load_family(path: &Path) -> Result<ProxyFamily> {
    family_from_bytes(&fsutil::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use reprobe_core::model::Arch;
    use reprobe_core::probe::{train_probe, ProbeData, ProbeFamily, ProbeHyper};
    use reprobe_core::ProbDist;

    fn system() -> System {
        System::new(SystemConfig {
            arch: Arch::Mlp,
            vocab_size: 10,
            max_len: 4,
            embed_dim: 4,
            hidden: vec![5, 3],
            cut_layer: 1,
            output_labels: vec!["a".into(), "b".into()],
            seed: 7,
            nuisance: None,
        })
        .unwrap()
    }

    #[test]
    fn system_round_trip_is_bit_exact() {
        let s = system();
        let bytes = system_to_bytes(&s);
        let back = system_from_bytes(&bytes, Path::new("s")).unwrap();
        assert_eq!(back, s);
        assert_eq!(system_to_bytes(&back), bytes);
        let n = s.parameters().len();
        let tail = &bytes[bytes.len() - 8 * n..];
        assert_eq!(f64::from_le_bytes(tail[..8].try_into().unwrap()), s.parameters()[0]);
    }

    #[test]
    fn wrong_kind_and_truncation_are_rejected() {
        let bytes = system_to_bytes(&system());
        assert!(family_from_bytes(&bytes, Path::new("s")).is_err());
        assert!(system_from_bytes(&bytes[..bytes.len() - 3], Path::new("s")).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(system_from_bytes(&extra, Path::new("s")).is_err());
        assert!(system_from_bytes(b"garbage", Path::new("s")).is_err());
    }

    #[test]
    fn family_round_trip_preserves_members() {
        let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 / 20.0 - 1.0, 0.3]).collect();
        let ys: Vec<ProbDist> = xs.iter().map(|x| ProbDist::degenerate(2, (x[0] > 0.0) as usize)).collect();
        let data = ProbeData { xs, ys };
        let constraints = ProbeConstraints::new(ProbeFamily::Linear);
        let arch = constraints.arch(2, 2).unwrap();
        let members: Vec<Probe> = (0..5)
            .map(|s| {
                let mut p = train_probe(&data, &arch, &ProbeHyper::default(), s).unwrap();
                p.test_loss = Some(0.1 * s as f64);
                p
            })
            .collect();
        let f = ProxyFamily {
            property: "z".into(),
            layer: 1,
            constraints,
            tau: 0.5,
            h_z: 0.69,
            attempts: members.iter().map(|m| (m.seed, m.test_loss.unwrap())).collect(),
            members,
        };
        let bytes = family_to_bytes(&f);
        let back = family_from_bytes(&bytes, Path::new("f")).unwrap();
        assert_eq!(back, f);
        assert_eq!(family_to_bytes(&back), bytes);
    }
}
