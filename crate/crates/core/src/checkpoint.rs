//! Model checkpoints.
//!
//! Layout: magic `AVDTCKPT`, u32 LE format version, u64 LE header length,
//! a JSON header (config snapshot, variant, step, seed, input normalisation,
//! parameter table), then every parameter as row-major f64 LE in table order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{InputNorm, Model, Variant};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"AVDTCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub variant: Variant,
    pub step: u64,
    pub seed: u64,
    pub input: [usize; 3],
    pub norm: InputNorm,
    pub config: ExperimentConfig,
    pub params: Vec<ParamEntry>,
}

pub fn save(path: &Path, model: &Model, config: &ExperimentConfig, step: u64) -> Result<()> {
    let named = model.store.to_named();
    let header = Header {
        variant: model.variant(),
        step,
        seed: config.train.seed,
        input: model.input_shape(),
        norm: model.norm,
        config: ExperimentConfig {
            model: model.config().clone(),
            ..config.clone()
        },
        params: named
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.store.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in named.values() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    // Write then rename so a crash never leaves a torn checkpoint.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and rebuilds its model.
pub fn load(path: &Path) -> Result<(Header, Model)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body_start]).map_err(|e| bad(&e.to_string()))?;
    let total: usize = header.params.iter().map(|p| p.rows * p.cols).sum();
    let body = &bytes[body_start..];
    if body.len() != 8 * total {
        return Err(bad(&format!("expected {} parameter bytes, found {}", 8 * total, body.len())));
    }
    let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut named = std::collections::BTreeMap::new();
    for p in &header.params {
        let data: Vec<f64> = values.by_ref().take(p.rows * p.cols).collect();
        named.insert(p.name.clone(), Tensor::from_vec(p.rows, p.cols, data)?);
    }
    let [c, t, m] = header.input;
    let mut model = Model::new(&header.config.model, header.variant, c, t, m, &mut ChaCha8Rng::seed_from_u64(0))?;
    model.store.load_named(&named)?;
    model.norm = header.norm;
    Ok((header, model))
}
