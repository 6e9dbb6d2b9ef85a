use std::io::Write;

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use super::network::{ModelConfig, Network};
use super::posterior::Row;
use super::{ModelError, Params, PosteriorEnsemble, Provenance};
use crate::features::PooledFeatures;
use crate::scalar::Real;

pub const ENSEMBLE_MAGIC: &[u8; 4] = b"E2RM";
pub const ENSEMBLE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 8;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub ticker: String,
    pub t: usize,
    pub v_hat: f64,
    pub ensemble_std: f64,
}

/// `E[v | theta_c] = exp(yhat_c + sigma_c^2 / 2)` for every sample.
pub fn sample_means<T: Real>(net: &Network, ensemble: &PosteriorEnsemble<T>, s: &[T], e: &[T]) -> Vec<T> {
    let ln = net.log_noise_index();
    let half = T::of(0.5);
    ensemble
        .samples
        .iter()
        .map(|p| {
            let sigma2 = (p.values[ln] + p.values[ln]).exp();
            (net.forward(&p.values, s, e) + half * sigma2).exp()
        })
        .collect()
}

fn mean_and_std<T: Real>(xs: &[T]) -> (T, T) {
    let n = T::of_usize(xs.len());
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, var.sqrt())
}

/// Ensemble mean of per-sample predictive means and their population spread.
pub fn predict_ensemble<T: Real>(ensemble: &PosteriorEnsemble<T>, features: &PooledFeatures) -> Result<Prediction, ModelError> {
    if ensemble.is_empty() {
        return Err(ModelError::EmptyEnsemble);
    }
    let net = Network::new(&ensemble.config)?;
    let row = Row::<T>::new(features, 0.0, 1.0);
    net.check_dims(&row.s, &row.e)?;
    let (v_hat, std) = mean_and_std(&sample_means(&net, ensemble, &row.s, &row.e));
    Ok(Prediction {
        ticker: features.ticker.clone(),
        t: features.t,
        v_hat: v_hat.to_f64_lossy(),
        ensemble_std: std.to_f64_lossy(),
    })
}

/// `(v_hat, ensemble_std)` for many rows, building the network once.
pub fn predict_rows<T: Real>(ensemble: &PosteriorEnsemble<T>, rows: &[Row<T>]) -> Result<Vec<(T, T)>, ModelError> {
    if ensemble.is_empty() {
        return Err(ModelError::EmptyEnsemble);
    }
    let net = Network::new(&ensemble.config)?;
    rows.iter()
        .map(|r| {
            net.check_dims(&r.s, &r.e)?;
            Ok(mean_and_std(&sample_means(&net, ensemble, &r.s, &r.e)))
        })
        .collect()
}

/// Sidecar metadata stored next to the binary ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub version: u32,
    pub layout_hash: String,
    pub samples: usize,
    pub params: usize,
    pub config: ModelConfig,
    pub provenance: Provenance,
}

/// Binary layout: `E2RM`, u32 version, u64 layout hash, u32 C, u64 P, `C * P` little-endian
/// f64, then the CRC-64/XZ of everything before it.
pub fn write_ensemble<T: Real, W: Write>(ensemble: &PosteriorEnsemble<T>, mut sink: W) -> Result<EnsembleManifest, ModelError> {
    let net = Network::new(&ensemble.config)?;
    let hash = net.layout().hash();
    let p = net.n_params();
    if let Some(bad) = ensemble.samples.iter().find(|s| s.values.len() != p) {
        return Err(ModelError::Dimension { what: "sample", expected: p, found: bad.values.len() });
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * p * ensemble.len() + 8);
    buf.extend_from_slice(ENSEMBLE_MAGIC);
    buf.extend_from_slice(&ENSEMBLE_VERSION.to_le_bytes());
    buf.extend_from_slice(&hash.to_le_bytes());
    let c = u32::try_from(ensemble.len()).map_err(|_| ModelError::Format("too many samples".into()))?;
    buf.extend_from_slice(&c.to_le_bytes());
    buf.extend_from_slice(&(p as u64).to_le_bytes());
    for s in &ensemble.samples {
        for v in &s.values {
            buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    let crc = CRC64.checksum(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    sink.write_all(&buf)?;
    Ok(EnsembleManifest {
        version: ENSEMBLE_VERSION,
        layout_hash: format!("{hash:016x}"),
        samples: ensemble.len(),
        params: p,
        config: ensemble.config.clone(),
        provenance: ensemble.provenance.clone(),
    })
}

/// Parse and verify an ensemble payload against `config`; returns the raw samples.
pub fn read_ensemble(bytes: &[u8], config: &ModelConfig) -> Result<Vec<Vec<f64>>, ModelError> {
    if bytes.len() < HEADER_LEN + 8 {
        return Err(ModelError::Checksum);
    }
    if &bytes[..4] != ENSEMBLE_MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if CRC64.checksum(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(ModelError::Checksum);
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != ENSEMBLE_VERSION {
        return Err(ModelError::Version(version));
    }
    let found = u64::from_le_bytes(body[8..16].try_into().unwrap());
    let net = Network::new(config)?;
    let expected = net.layout().hash();
    if found != expected {
        return Err(ModelError::LayoutMismatch { expected, found });
    }
    let c = u32::from_le_bytes(body[16..20].try_into().unwrap()) as usize;
    let p = u64::from_le_bytes(body[20..28].try_into().unwrap()) as usize;
    if p != net.n_params() || body.len() != HEADER_LEN + 8 * c * p {
        return Err(ModelError::Format("payload size disagrees with header".into()));
    }
    Ok(body[HEADER_LEN..]
        .chunks_exact(8 * p.max(1))
        .take(c)
        .map(|chunk| chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
        .collect())
}

/// Rebuild a full ensemble from the binary payload and its sidecar manifest.
pub fn load_ensemble(bytes: &[u8], manifest: &EnsembleManifest) -> Result<PosteriorEnsemble<f64>, ModelError> {
    if manifest.version != ENSEMBLE_VERSION {
        return Err(ModelError::Version(manifest.version));
    }
    let samples = read_ensemble(bytes, &manifest.config)?;
    let layout = Network::new(&manifest.config)?.layout().clone();
    if samples.len() != manifest.samples {
        return Err(ModelError::Format("sample count disagrees with manifest".into()));
    }
    Ok(PosteriorEnsemble {
        config: manifest.config.clone(),
        samples: samples.into_iter().map(|v| Params::new(v, layout.clone())).collect(),
        provenance: manifest.provenance.clone(),
    })
}
