//! Binary model artifacts.
//!
//! Layout: `NAVMODEL` magic, `u32` version, `u64` header length, a JSON
//! header (architecture, input size, parameter count, metadata), then the
//! flat parameter vector as little-endian `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::{NetworkArchitectureSpec, NetworkInstance};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NAVMODEL";
pub const VERSION: u32 = 1;

/// An observation and the deterministic action the model produced for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub observation: Vec<f64>,
    pub action: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub robot_id: String,
    #[serde(default)]
    pub training_id: String,
    #[serde(default)]
    pub step: u64,
    #[serde(default)]
    pub eval_score: f64,
    #[serde(default)]
    pub log_std: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<Probe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    architecture: NetworkArchitectureSpec,
    input_dim: usize,
    param_count: usize,
    metadata: ModelMetadata,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub architecture: NetworkArchitectureSpec,
    pub input_dim: usize,
    pub params: Vec<f64>,
    pub metadata: ModelMetadata,
}

fn corrupt(offset: usize, reason: impl Into<String>) -> Error {
    Error::CorruptArtifact { offset: offset as u64, reason: reason.into() }
}

impl ModelArtifact {
    pub fn from_network(net: &NetworkInstance, metadata: ModelMetadata) -> Self {
        Self {
            architecture: net.spec().clone(),
            input_dim: net.input_dim(),
            params: net.params().to_vec(),
            metadata,
        }
    }

    pub fn instantiate(&self) -> Result<NetworkInstance> {
        NetworkInstance::zeros(self.architecture.clone(), self.input_dim)?.with_params(self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            architecture: self.architecture.clone(),
            input_dim: self.input_dim,
            param_count: self.params.len(),
            metadata: self.metadata.clone(),
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(corrupt(0, "missing NAVMODEL magic"));
        }
        let version = bytes
            .get(8..12)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| corrupt(8, "truncated version"))?;
        if version != VERSION {
            return Err(corrupt(8, format!("unsupported version {version}")));
        }
        let header_len = bytes
            .get(12..20)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| corrupt(12, "truncated header length"))?;
        let header_end = 20usize
            .checked_add(usize::try_from(header_len).map_err(|_| corrupt(12, "header length overflow"))?)
            .ok_or_else(|| corrupt(12, "header length overflow"))?;
        let raw = bytes
            .get(20..header_end)
            .ok_or_else(|| corrupt(bytes.len(), format!("header needs {header_len} bytes")))?;
        let header: Header =
            serde_json::from_slice(raw).map_err(|e| corrupt(20 + e.column().saturating_sub(1), e.to_string()))?;

        let body = &bytes[header_end..];
        let want = header.param_count * 8;
        if body.len() < want {
            let whole = body.len() / 8 * 8;
            return Err(corrupt(
                header_end + whole,
                format!("expected {} parameters, found {}", header.param_count, body.len() / 8),
            ));
        }
        if body.len() > want {
            return Err(corrupt(header_end + want, "trailing bytes after parameters"));
        }
        let mut params = Vec::with_capacity(header.param_count);
        for (i, chunk) in body.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(corrupt(header_end + 8 * i, "non-finite parameter"));
            }
            params.push(v);
        }
        let artifact = Self {
            architecture: header.architecture,
            input_dim: header.input_dim,
            params,
            metadata: header.metadata,
        };
        // the parameter count must fit the architecture
        artifact
            .instantiate()
            .map_err(|e| corrupt(20, format!("header does not describe the parameters: {e}")))?;
        Ok(artifact)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ModelArtifact {
        let spec = NetworkArchitectureSpec::mlp(12, 8, 2);
        let net = NetworkInstance::new(spec, 12, 4).unwrap();
        ModelArtifact::from_network(
            &net,
            ModelMetadata {
                robot_id: "jackal".into(),
                training_id: "t1".into(),
                step: 4096,
                eval_score: 0.75,
                log_std: vec![-0.69, -0.7],
                probe: None,
            },
        )
    }

    #[test]
    fn round_trip_forward_is_exact() {
        let a = sample();
        let b = ModelArtifact::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.metadata.robot_id, "jackal");
        let (na, nb) = (a.instantiate().unwrap(), b.instantiate().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let x: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert_eq!(na.predict(&x).unwrap(), nb.predict(&x).unwrap());
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 10, 15, 30, bytes.len() - 3] {
            match ModelArtifact::from_bytes(&bytes[..cut]) {
                Err(Error::CorruptArtifact { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_trailing_bytes() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(ModelArtifact::from_bytes(&bytes), Err(Error::CorruptArtifact { .. })));
        bytes[0] = b'X';
        assert!(matches!(ModelArtifact::from_bytes(&bytes), Err(Error::CorruptArtifact { offset: 0, .. })));
    }

    #[test]
    fn rejects_non_finite_parameter() {
        let a = sample();
        let mut bytes = a.to_bytes().unwrap();
        let at = bytes.len() - 8;
        bytes[at..].copy_from_slice(&f64::NAN.to_le_bytes());
        match ModelArtifact::from_bytes(&bytes) {
            Err(Error::CorruptArtifact { offset, .. }) => assert_eq!(offset as usize, at),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let a = sample();
        a.save(&path).unwrap();
        assert_eq!(ModelArtifact::load(&path).unwrap(), a);
    }
}
