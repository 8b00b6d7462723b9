//! Checkpoint container: magic bytes, format version, a JSON header and the
//! little-endian parameter blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::Device;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Architecture, GenerativeModel, TrainLogEntry};
use crate::datasets::ImageShape;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, ParamEntry, Params, Precision};

const MAGIC: &[u8; 8] = b"FTOODCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    family: String,
    arch: Architecture,
    input_shape: ImageShape,
    precision: Precision,
    seed: u64,
    optimizer: AdamConfig,
    training_log: Vec<TrainLogEntry>,
    params: Vec<ParamEntry>,
    param_sha256: String,
}

pub(super) fn save(m: &GenerativeModel, path: &Path) -> Result<()> {
    let header = Header {
        family: m.family().to_string(),
        arch: m.arch.clone(),
        input_shape: m.shape,
        precision: m.precision(),
        seed: m.seed,
        optimizer: m.opt_cfg,
        training_log: m.training_log.clone(),
        params: m.params.entries(),
        param_sha256: m.params.hash()?,
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(MAGIC)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    f.write_all(&m.params.to_blob()?)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(super) fn load(path: &Path) -> Result<GenerativeModel> {
    let bytes = fs::read(path)?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + hlen {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[20..20 + hlen])?;
    if header.arch.family().as_str() != header.family {
        return Err(bad(format!("family tag `{}` disagrees with architecture", header.family)));
    }
    let params = Params::from_blob(&header.params, &bytes[20 + hlen..], header.precision, &Device::Cpu)?;
    if params.hash()? != header.param_sha256 {
        return Err(bad("parameter checksum mismatch".into()));
    }
    let body = GenerativeModel::build_body(&header.arch, header.input_shape, header.precision, header.seed, None)?;
    Ok(GenerativeModel {
        arch: header.arch,
        shape: header.input_shape,
        seed: header.seed,
        opt: Adam::new(header.optimizer, params.vars().len()),
        params,
        body,
        opt_cfg: header.optimizer,
        rng: ChaCha8Rng::seed_from_u64(header.seed ^ 0x5eed),
        training_log: header.training_log,
    })
}
