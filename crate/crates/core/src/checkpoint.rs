//! Parameter checkpoints: an 8-byte little-endian header length, a JSON
//! header, then the flat parameter vector as little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::policy::PolicySpec;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Model kind label, e.g. `ren` or `lstm`.
    pub kind: String,
    pub model: ModelSpec,
    /// Present for policy bundles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub n_params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
}

impl CheckpointHeader {
    pub fn for_model(model: &ModelSpec) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            kind: model.label().to_string(),
            model: model.clone(),
            policy: None,
            gamma: None,
            n_params: model.n_params(),
            epoch: None,
        }
    }

    pub fn for_policy(policy: &PolicySpec) -> Self {
        let gamma = match &policy.model {
            ModelSpec::Ren { iqc, .. } => iqc.gamma(),
            _ => None,
        };
        Self { policy: Some(policy.clone()), gamma, ..Self::for_model(&policy.model) }
    }
}

pub fn write_checkpoint(mut w: impl Write, header: &CheckpointHeader, theta: &DVector<f64>) -> Result<()> {
    if theta.len() != header.n_params {
        return Err(Error::Checkpoint(format!(
            "header declares {} parameters, vector has {}",
            header.n_params,
            theta.len()
        )));
    }
    let json = serde_json::to_vec(header)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(8 * theta.len());
    for v in theta.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(CheckpointHeader, DVector<f64>)> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 24 {
        return Err(Error::Checkpoint(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {CHECKPOINT_VERSION})",
            header.format_version
        )));
    }
    if header.n_params != header.model.n_params() {
        return Err(Error::Checkpoint(format!(
            "header declares {} parameters but the model has {}",
            header.n_params,
            header.model.n_params()
        )));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != 8 * header.n_params {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, expected {}",
            body.len(),
            8 * header.n_params
        )));
    }
    let theta = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Ok((header, DVector::from_vec(theta)))
}

pub fn save_checkpoint(path: impl AsRef<Path>, header: &CheckpointHeader, theta: &DVector<f64>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(&mut w, header, theta)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, DVector<f64>)> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ren::{IqcSpec, RenDims};
    use rand::SeedableRng;

    fn spec() -> ModelSpec {
        ModelSpec::Ren { dims: RenDims::new(2, 3, 4, 1), iqc: IqcSpec::Lipschitz { gamma: 5.0 }, acyclic: true }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = spec();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let theta = s.init_theta(1.0, &mut rng).unwrap();
        let header = CheckpointHeader::for_model(&s);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &header, &theta).unwrap();
        let (h, t) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(h, header);
        assert!(t.iter().zip(theta.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let s = spec();
        let theta = DVector::zeros(s.n_params());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &CheckpointHeader::for_model(&s), &theta).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn length_mismatch_on_write() {
        let s = spec();
        let theta = DVector::zeros(s.n_params() + 1);
        assert!(write_checkpoint(Vec::new(), &CheckpointHeader::for_model(&s), &theta).is_err());
    }
}
