//! Embedding and label persistence, normalization and synthetic bundles.

pub mod format;
mod synth;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::matrix::Matrix;
use crate::{Error, Result};

pub use synth::{generate_heldout, generate_synthetic, generate_synthetic_from_centroids, SynthConfig};

pub const IMAGES_FILE: &str = "images.emb";
pub const TEXTS_FILE: &str = "texts.emb";
pub const LABELS_FILE: &str = "labels.lbl";
pub const AUG_IMAGES_FILE: &str = "aug_images.emb";
pub const AUG_TEXTS_FILE: &str = "aug_texts.emb";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Tolerance on row norms for matrices that claim to be normalized.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

/// `N x d` matrix of 32-bit features for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    modality: Modality,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>, modality: Modality) -> Result<Self> {
        if rows == 0 {
            return Err(Error::InvalidConfig("embedding matrix needs N >= 1".into()));
        }
        if cols < 2 {
            return Err(Error::InvalidConfig(format!(
                "embedding matrix needs d >= 2, got {cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(EmbeddingMatrix {
            rows,
            cols,
            data,
            modality,
        })
    }

    /// Rounds a 64-bit matrix to 32-bit storage.
    pub fn from_matrix(m: &Matrix, modality: Modality) -> Result<Self> {
        let data = m.as_slice().iter().map(|&v| v as f32).collect();
        EmbeddingMatrix::new(m.rows(), m.cols(), data, modality)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.cols
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("shape checked on construction")
    }

    /// Largest deviation of a row norm from 1.
    pub fn max_norm_deviation(&self) -> f64 {
        self.data
            .chunks_exact(self.cols)
            .map(|r| {
                let n = r.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
                (n - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn encode(&self) -> Vec<u8> {
        format::encode_emb(self.rows, self.cols, &self.data)
    }
}

/// Ground-truth identity per sample. Used for evaluation and synthesis only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityLabels(pub Vec<u32>);

impl IdentityLabels {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> u32 {
        self.0[i]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub source: String,
    /// First 8 bytes of SHA-256 over the payload files, lowercase hex.
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub images: EmbeddingMatrix,
    pub texts: EmbeddingMatrix,
    pub labels: IdentityLabels,
    pub aug_images: Option<EmbeddingMatrix>,
    pub aug_texts: Option<EmbeddingMatrix>,
    pub manifest: Manifest,
}

impl DatasetBundle {
    /// Assembles a bundle and derives its manifest.
    pub fn new(
        images: EmbeddingMatrix,
        texts: EmbeddingMatrix,
        labels: IdentityLabels,
        aug: Option<(EmbeddingMatrix, EmbeddingMatrix)>,
        seed: u64,
        source: impl Into<String>,
    ) -> Result<Self> {
        let (aug_images, aug_texts) = match aug {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        let mut bundle = DatasetBundle {
            manifest: Manifest {
                n: images.rows(),
                d: images.dim(),
                seed,
                source: source.into(),
                checksum: String::new(),
            },
            images,
            texts,
            labels,
            aug_images,
            aug_texts,
        };
        bundle.validate_shapes()?;
        bundle.manifest.checksum = bundle.content_checksum();
        Ok(bundle)
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.images.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.dim()
    }

    fn validate_shapes(&self) -> Result<()> {
        let (n, d) = (self.images.rows(), self.images.dim());
        let mut mats = vec![("texts", &self.texts)];
        if self.aug_images.is_some() != self.aug_texts.is_some() {
            return Err(Error::ShapeMismatch(
                "augmented views must be given for both modalities or neither".into(),
            ));
        }
        if let (Some(a), Some(b)) = (&self.aug_images, &self.aug_texts) {
            mats.push(("aug_images", a));
            mats.push(("aug_texts", b));
        }
        for (name, m) in mats {
            if m.rows() != n || m.dim() != d {
                return Err(Error::ShapeMismatch(format!(
                    "{name} is {}x{}, images are {n}x{d}",
                    m.rows(),
                    m.dim()
                )));
            }
        }
        if self.labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {n} samples",
                self.labels.len()
            )));
        }
        Ok(())
    }

    fn payloads(&self) -> Vec<(&'static str, Vec<u8>)> {
        let mut out = vec![
            (IMAGES_FILE, self.images.encode()),
            (TEXTS_FILE, self.texts.encode()),
            (LABELS_FILE, format::encode_labels(self.labels.as_slice())),
        ];
        if let (Some(a), Some(b)) = (&self.aug_images, &self.aug_texts) {
            out.push((AUG_IMAGES_FILE, a.encode()));
            out.push((AUG_TEXTS_FILE, b.encode()));
        }
        out
    }

    fn content_checksum(&self) -> String {
        let payloads = self.payloads();
        checksum(payloads.iter().map(|(_, b)| b.as_slice()))
    }

    /// Writes every payload file plus `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, bytes) in self.payloads() {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        let p = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Manifest(e.to_string()))?;
        fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))
    }

    /// Loads a bundle and verifies shapes and checksum against the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", mp.display())))?;

        let images = load_embeddings(&dir.join(IMAGES_FILE), Modality::Image)?;
        let texts = load_embeddings(&dir.join(TEXTS_FILE), Modality::Text)?;
        let labels = load_labels(&dir.join(LABELS_FILE))?;
        let ai = dir.join(AUG_IMAGES_FILE);
        let at = dir.join(AUG_TEXTS_FILE);
        let aug = if ai.exists() || at.exists() {
            Some((
                load_embeddings(&ai, Modality::Image)?,
                load_embeddings(&at, Modality::Text)?,
            ))
        } else {
            None
        };
        let bundle = DatasetBundle::new(
            images,
            texts,
            labels,
            aug,
            manifest.seed,
            manifest.source.clone(),
        )?;
        if bundle.manifest.n != manifest.n || bundle.manifest.d != manifest.d {
            return Err(Error::Manifest(format!(
                "manifest declares {}x{}, payload is {}x{}",
                manifest.n, manifest.d, bundle.manifest.n, bundle.manifest.d
            )));
        }
        if bundle.manifest.checksum != manifest.checksum {
            return Err(Error::Manifest(format!(
                "checksum mismatch: manifest {}, payload {}",
                manifest.checksum, bundle.manifest.checksum
            )));
        }
        Ok(bundle)
    }
}

/// SHA-256 over the concatenated byte slices, truncated to 64 bits.
pub fn checksum<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    format!("{:016x}", u64::from_be_bytes(word))
}

/// Reads an EMB1 file. Rows are returned as stored, not normalized.
pub fn load_embeddings(path: &Path, modality: Modality) -> Result<EmbeddingMatrix> {
    let raw = format::read_emb_file(path)?;
    EmbeddingMatrix::new(raw.rows, raw.cols, raw.data, modality)
}

pub fn save_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    fs::write(path, m.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: &Path) -> Result<IdentityLabels> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(IdentityLabels(format::decode_labels(&bytes, path)?))
}

pub fn save_labels(labels: &IdentityLabels, path: &Path) -> Result<()> {
    fs::write(path, format::encode_labels(labels.as_slice())).map_err(|e| Error::io(path, e))
}

/// Scales every row to unit Euclidean norm (64-bit accumulation).
pub fn l2_normalize(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(m.data.len());
    for (r, row) in m.data.chunks_exact(m.cols).enumerate() {
        let n = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::ZeroRow(r));
        }
        data.extend(row.iter().map(|&v| (f64::from(v) / n) as f32));
    }
    Ok(EmbeddingMatrix {
        data,
        ..m.clone()
    })
}
