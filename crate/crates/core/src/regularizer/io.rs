//! Parameter files: `<stem>.json` manifest plus `<stem>.bin` holding the kernels as
//! raw little-endian `f64` in layer order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RegularizerParams;
use crate::gradcore::Tensor;
use crate::image::{read_f64s, write_f64s};
use crate::{Error, Result};

const FORMAT: &str = "petrecon-theta-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsManifest {
    pub format: String,
    pub delta: f64,
    pub phases: usize,
    pub log_alpha: Vec<f64>,
    pub log_beta: Vec<f64>,
    pub kernel_shapes: Vec<Vec<usize>>,
    pub payload: String,
    pub payload_sha256: String,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn save_params(theta: &RegularizerParams, stem: &Path) -> Result<()> {
    let (manifest_path, payload_path) = paths(stem);
    let mut bytes = Vec::new();
    for k in &theta.kernels {
        write_f64s(&mut bytes, k.data())?;
    }
    let manifest = ParamsManifest {
        format: FORMAT.into(),
        delta: theta.delta,
        phases: theta.phases(),
        log_alpha: theta.log_alpha.clone(),
        log_beta: theta.log_beta.clone(),
        kernel_shapes: theta.kernels.iter().map(|k| k.shape().to_vec()).collect(),
        payload: payload_path.file_name().unwrap().to_string_lossy().into_owned(),
        payload_sha256: hex::encode(Sha256::digest(&bytes)),
    };
    std::fs::write(&payload_path, &bytes)?;
    let mut w = BufWriter::new(File::create(&manifest_path)?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_params(stem: &Path) -> Result<RegularizerParams> {
    let (manifest_path, _) = paths(stem);
    let manifest: ParamsManifest = serde_json::from_reader(BufReader::new(File::open(&manifest_path)?))?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!("unknown parameter format {}", manifest.format)));
    }
    let payload_path = manifest_path.with_file_name(&manifest.payload);
    let bytes = std::fs::read(&payload_path)?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.payload_sha256 {
        return Err(Error::Format(format!("{}: checksum mismatch", payload_path.display())));
    }
    let mut cursor = bytes.as_slice();
    let mut kernels = Vec::new();
    for shape in &manifest.kernel_shapes {
        let n = shape.iter().product();
        kernels.push(Tensor::new(shape.clone(), read_f64s(&mut cursor, n)?)?);
    }
    if !cursor.is_empty() {
        return Err(Error::Format("parameter payload longer than declared".into()));
    }
    if manifest.log_alpha.len() != manifest.phases {
        return Err(Error::Format("phase count disagrees with step-size list".into()));
    }
    let theta = RegularizerParams {
        kernels,
        delta: manifest.delta,
        log_alpha: manifest.log_alpha,
        log_beta: manifest.log_beta,
    };
    theta.validate()?;
    Ok(theta)
}
