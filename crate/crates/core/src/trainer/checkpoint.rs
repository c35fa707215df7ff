//! Checkpoint directory layout:
//!
//! ```text
//! image_w.emb  image_b.emb  text_w.emb  text_b.emb   adapter parameters (EMB1)
//! image_bank.emb  text_bank.emb                      optional memory banks (EMB1)
//! checkpoint.json                                    step, epoch, d, hyper, rng
//! ```
//!
//! EMB1 payloads are `f32`, so parameters lose precision past ~7 digits on a
//! round trip.

use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adapter::{Adapter, AdapterParams};
use super::hyper::HyperParams;
use super::train::{Banks, RngState};
use crate::emb_store::format::{read_emb_file, write_emb_file};
use crate::emb_store::Modality;
use crate::global_assoc::MemoryBank;
use crate::matrix::Matrix;
use crate::{Error, Result};

pub const META_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub step: u64,
    pub epoch: u64,
    pub dim: usize,
    pub hyper: HyperParams,
    pub rng: RngState,
    /// Epoch counter of the stored banks, if any.
    pub bank_epoch: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: AdapterParams,
    pub banks: Option<Banks>,
}

fn to_f32(m: &Matrix) -> Vec<f32> {
    m.as_slice().iter().map(|&v| v as f32).collect()
}

fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<Matrix> {
    let raw = read_emb_file(path).map_err(|e| match e {
        Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => {
            Error::MissingCheckpoint(format!("{} not found", path.display()))
        }
        other => other,
    })?;
    if (raw.rows, raw.cols) != (rows, cols) {
        return Err(Error::MissingCheckpoint(format!(
            "{} holds {}x{}, expected {rows}x{cols}",
            path.display(),
            raw.rows,
            raw.cols
        )));
    }
    Matrix::from_vec(rows, cols, raw.data.into_iter().map(f64::from).collect())
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let d = self.params.dim();
        for (name, a) in [("image", &self.params.image), ("text", &self.params.text)] {
            write_emb_file(&dir.join(format!("{name}_w.emb")), d, d, &to_f32(&a.w))?;
            let b: Vec<f32> = a.b.iter().map(|&v| v as f32).collect();
            write_emb_file(&dir.join(format!("{name}_b.emb")), 1, d, &b)?;
        }
        if let Some(banks) = &self.banks {
            for (name, bank) in [("image", &banks.image), ("text", &banks.text)] {
                let f = bank.features();
                write_emb_file(&dir.join(format!("{name}_bank.emb")), f.rows(), f.cols(), &to_f32(f))?;
            }
        }
        let path = dir.join(META_FILE);
        let json = serde_json::to_string_pretty(&self.meta).expect("plain data");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| {
            if e.kind() == ErrorKind::NotFound {
                Error::MissingCheckpoint(format!("{} not found", path.display()))
            } else {
                Error::io(&path, e)
            }
        })?;
        let meta: CheckpointMeta = serde_json::from_str(&text)
            .map_err(|e| Error::MissingCheckpoint(format!("{}: {e}", path.display())))?;
        let d = meta.dim;
        let load_adapter = |name: &str| -> Result<Adapter> {
            Ok(Adapter {
                w: read_matrix(&dir.join(format!("{name}_w.emb")), d, d)?,
                b: read_matrix(&dir.join(format!("{name}_b.emb")), 1, d)?.into_vec(),
            })
        };
        let params = AdapterParams { image: load_adapter("image")?, text: load_adapter("text")? };
        let banks = match meta.bank_epoch {
            None => None,
            Some(epoch) => {
                let load_bank = |name: &str, m: Modality| -> Result<MemoryBank> {
                    let p = dir.join(format!("{name}_bank.emb"));
                    let raw = read_emb_file(&p)?;
                    let f = read_matrix(&p, raw.rows, d)?;
                    let mut bank = MemoryBank::new(&f, m)?;
                    bank.set_epoch(epoch);
                    Ok(bank)
                };
                Some(Banks { image: load_bank("image", Modality::Image)?, text: load_bank("text", Modality::Text)? })
            }
        };
        Ok(Checkpoint { meta, params, banks })
    }

    /// Errors unless the checkpoint was trained on `d`-dimensional data.
    pub fn check_dim(&self, d: usize) -> Result<()> {
        if self.meta.dim != d {
            return Err(Error::MissingCheckpoint(format!(
                "checkpoint expects dimension {}, data has {d}",
                self.meta.dim
            )));
        }
        Ok(())
    }
}
