//! Fit checkpoints for the fit → predict handoff.
//!
//! Layout: one JSON header line (format tag, creation time, config hash and
//! the SHA-256 of the body), one JSON body line with the posterior, then the
//! binary parameter block holding θ_MAP. Everything after the header is a
//! deterministic function of the fit.

use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cavi::{SigmaData, SigmaRepr};
use crate::data::Normalization;
use crate::model::BaselinePrior;
use crate::net::{MlpModel, NetError, ParamBlock};
use crate::pipeline::{FitConfig, FitSummary, Posterior};
use crate::predict::ParamPosterior;

pub const FORMAT: &str = "neuralsurv-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("body hash mismatch")]
    Hash,
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub created_unix: u64,
    pub config_hash: String,
    pub body_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Body {
    config: FitConfig,
    config_hash: String,
    model: MlpModel,
    prior: BaselinePrior,
    normalization: Normalization,
    phi_map: f64,
    alpha: f64,
    beta: f64,
    mu: Vec<f64>,
    sigma: SigmaData,
    summary: FitSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: FitConfig,
    pub posterior: Posterior,
    pub summary: FitSummary,
}

impl Checkpoint {
    /// Body line plus parameter block, without the header.
    pub fn body_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let p = &self.posterior;
        let body = Body {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            model: p.model.clone(),
            prior: p.prior,
            normalization: p.normalization.clone(),
            phi_map: p.phi_map,
            alpha: p.params.alpha,
            beta: p.params.beta,
            mu: p.params.mu.as_slice().to_vec(),
            sigma: p.params.sigma.to_data(),
            summary: self.summary.clone(),
        };
        let mut out = serde_json::to_vec(&body)?;
        out.push(b'\n');
        ParamBlock::new(p.model.clone(), p.theta_map.clone())?.write_to(&mut out)?;
        Ok(out)
    }

    pub fn to_bytes(&self, created_unix: u64) -> Result<Vec<u8>, CheckpointError> {
        let body = self.body_bytes()?;
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            created_unix,
            config_hash: self.config.hash(),
            body_sha256: hex::encode(Sha256::digest(&body)),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.extend(body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Header, Self), CheckpointError> {
        let mut reader = bytes;
        let mut line = Vec::new();
        reader.read_until(b'\n', &mut line)?;
        let header: Header = serde_json::from_slice(&line).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(CheckpointError::Format(format!("{} v{}", header.format, header.version)));
        }
        if hex::encode(Sha256::digest(reader)) != header.body_sha256 {
            return Err(CheckpointError::Hash);
        }
        line.clear();
        reader.read_until(b'\n', &mut line)?;
        let body: Body = serde_json::from_slice(&line)?;
        let mut rest = Vec::new();
        reader.read_to_end(&mut rest)?;
        let block = ParamBlock::from_bytes(&rest)?;
        let model = MlpModel::new(body.model.sizes().to_vec(), body.model.activation())?;
        if block.model != model || body.mu.len() != model.n_params() {
            return Err(CheckpointError::Format("parameter block does not match the model".into()));
        }
        let sigma = SigmaRepr::from_data(&body.sigma).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if sigma.dim() != model.n_params() {
            return Err(CheckpointError::Format("covariance does not match the model".into()));
        }
        let posterior = Posterior {
            model,
            theta_map: block.theta,
            phi_map: body.phi_map,
            params: ParamPosterior { alpha: body.alpha, beta: body.beta, mu: DVector::from_vec(body.mu), sigma },
            prior: body.prior,
            normalization: body.normalization,
        };
        Ok((header, Self { config: body.config, posterior, summary: body.summary }))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes(now)?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<(Header, Self), CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cavi::SigmaStorage;
    use nalgebra::DMatrix;

    fn sample(storage: SigmaStorage) -> Checkpoint {
        let model = MlpModel::with_hidden(2, &[3]).unwrap();
        let m = model.n_params();
        let theta: Vec<f64> = (0..m).map(|k| (k as f64 * 0.37).sin()).collect();
        let sigma = match storage {
            SigmaStorage::Factor => {
                let u = DMatrix::from_fn(m, 2, |i, j| ((i + 3 * j) as f64).cos());
                crate::cavi::LowRankFactor { u: &u, c: &[0.5, 1.5] }.inverse(SigmaStorage::Factor, 0).unwrap()
            }
            _ => SigmaRepr::Dense(DMatrix::identity(m, m) * 0.3),
        };
        Checkpoint {
            config: FitConfig::default(),
            posterior: Posterior {
                model,
                theta_map: theta.clone(),
                phi_map: 1.25,
                params: ParamPosterior { alpha: 3.0, beta: 2.0, mu: DVector::from_vec(theta), sigma },
                prior: BaselinePrior::default(),
                normalization: Normalization { t_max: 10.0, means: vec![0.1, 0.2], sds: vec![1.0, 2.0] },
            },
            summary: FitSummary {
                n: 5,
                n_events: 3,
                n_points: 20,
                n_params: 13,
                em_iterations: 4,
                em_converged: true,
                cavi_iterations: 7,
                cavi_converged: true,
            },
        }
    }

    #[test]
    fn round_trip() {
        for storage in [SigmaStorage::Dense, SigmaStorage::Factor] {
            let c = sample(storage);
            let bytes = c.to_bytes(123).unwrap();
            let (header, back) = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(header.created_unix, 123);
            assert_eq!(header.config_hash, c.config.hash());
            assert_eq!(back.posterior.theta_map, c.posterior.theta_map);
            assert_eq!(back.posterior.params.mu, c.posterior.params.mu);
            assert!((back.posterior.params.sigma.to_dense() - c.posterior.params.sigma.to_dense()).amax() < 1e-14);
            assert_eq!(back.summary, c.summary);
            assert_eq!(back.body_bytes().unwrap(), c.body_bytes().unwrap());
        }
    }

    #[test]
    fn body_excludes_timestamp() {
        let c = sample(SigmaStorage::Dense);
        let a = c.to_bytes(1).unwrap();
        let b = c.to_bytes(2).unwrap();
        let split = |v: &[u8]| v[v.iter().position(|&x| x == b'\n').unwrap()..].to_vec();
        assert_ne!(a, b);
        assert_eq!(split(&a), split(&b));
    }

    #[test]
    fn corruption_is_detected() {
        let c = sample(SigmaStorage::Dense);
        let mut bytes = c.to_bytes(1).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Hash)));
        assert!(matches!(Checkpoint::from_bytes(b"{}\n"), Err(CheckpointError::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fit.ckpt");
        let c = sample(SigmaStorage::Dense);
        c.write(&path).unwrap();
        assert_eq!(Checkpoint::read(&path).unwrap().1, c);
    }
}
