//! Synthetic ground-truth bundles for desk-scale verification.
//!
//! Each sample is `normalize(centroid + modality_offset + nuisance + noise)`:
//!
//! * centroids are random unit vectors, re-drawn until every pairwise cosine
//!   is at most `max_centroid_cosine`;
//! * the modality offset is a fixed random vector of norm `modality_offset`
//!   per modality;
//! * the nuisance term lives in a random rank-`nuisance_rank` subspace that is
//!   specific to each modality, with per-sample gaussian coefficients whose
//!   expected total norm is `nuisance_scale`. It models identity-irrelevant
//!   variation (pose, background, phrasing) that a linear adapter can learn
//!   to suppress;
//! * the isotropic noise has per-coordinate standard deviation `sigma / sqrt(d)`,
//!   so `sigma` is the expected norm of the noise vector.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, EmbeddingMatrix, IdentityLabels, Modality};
use crate::matrix::{dot, norm, Matrix};
use crate::{Error, Result};

const CENTROID_ATTEMPTS: usize = 10_000;
const HELDOUT_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub identities: usize,
    pub per_id_images: usize,
    pub per_id_texts: usize,
    pub dim: usize,
    pub sigma: f64,
    pub seed: u64,
    pub modality_offset: f64,
    pub nuisance_rank: usize,
    pub nuisance_scale: f64,
    pub max_centroid_cosine: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            identities: 50,
            per_id_images: 4,
            per_id_texts: 4,
            dim: 64,
            sigma: 0.3,
            seed: 7,
            modality_offset: 0.1,
            nuisance_rank: 4,
            nuisance_scale: 2.0,
            max_centroid_cosine: 0.5,
        }
    }
}

impl SynthConfig {
    /// Zero-noise, zero-offset, nuisance-free configuration: every sample
    /// coincides with its centroid.
    pub fn noiseless(identities: usize, per_id: usize, dim: usize, seed: u64) -> Self {
        SynthConfig {
            identities,
            per_id_images: per_id,
            per_id_texts: per_id,
            dim,
            sigma: 0.0,
            seed,
            modality_offset: 0.0,
            nuisance_rank: 0,
            nuisance_scale: 0.0,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.identities < 2 {
            return bad(format!("identities must be >= 2, got {}", self.identities));
        }
        if self.dim < 8 {
            return bad(format!("dim must be >= 8, got {}", self.dim));
        }
        if self.per_id_images == 0 || self.per_id_texts == 0 {
            return bad("per-identity sample counts must be >= 1".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if !(self.modality_offset >= 0.0 && self.modality_offset.is_finite()) {
            return bad("modality offset must be >= 0".into());
        }
        if !(self.nuisance_scale >= 0.0 && self.nuisance_scale.is_finite()) {
            return bad("nuisance scale must be >= 0".into());
        }
        if self.nuisance_rank > self.dim {
            return bad("nuisance rank cannot exceed dim".into());
        }
        if !(self.max_centroid_cosine > -1.0 && self.max_centroid_cosine <= 1.0) {
            return bad("max centroid cosine must lie in (-1, 1]".into());
        }
        Ok(())
    }

    fn source(&self) -> String {
        format!(
            "synthetic:g={},img={},txt={},d={},sigma={},offset={},nuisance={}x{}",
            self.identities,
            self.per_id_images,
            self.per_id_texts,
            self.dim,
            self.sigma,
            self.modality_offset,
            self.nuisance_rank,
            self.nuisance_scale
        )
    }
}

/// Generates a bundle with `identities * max(per_id_images, per_id_texts)`
/// pairs. The smaller modality's samples are reused cyclically within an
/// identity, so one image may carry several captions.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centroids = draw_centroids(&mut rng, cfg)?;
    let models = ModalityModel::draw_pair(&mut rng, cfg);
    build(&mut rng, &centroids, &models, cfg, cfg.source())
}

/// Evaluation split for [`generate_synthetic`]: `cfg.identities` fresh
/// identities observed through the same modality offsets and nuisance
/// subspaces, so anything an adapter learns about the modalities transfers
/// while identities do not overlap.
pub fn generate_heldout(cfg: &SynthConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    draw_centroids(&mut rng, cfg)?;
    let models = ModalityModel::draw_pair(&mut rng, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(HELDOUT_STREAM);
    let centroids = draw_centroids(&mut rng, cfg)?;
    build(&mut rng, &centroids, &models, cfg, format!("{},heldout", cfg.source()))
}

/// Same as [`generate_synthetic`] but with caller-provided centroids
/// (one per identity, normalized here).
pub fn generate_synthetic_from_centroids(
    centroids: &Matrix,
    cfg: &SynthConfig,
) -> Result<DatasetBundle> {
    let cfg = SynthConfig {
        identities: centroids.rows(),
        dim: centroids.cols(),
        ..cfg.clone()
    };
    cfg.validate()?;
    let centroids = centroids.normalize_rows()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let models = ModalityModel::draw_pair(&mut rng, &cfg);
    build(&mut rng, &centroids, &models, &cfg, cfg.source())
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let mut v = gaussian_vec(rng, d);
        let n = norm(&v);
        if n > 1e-12 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

fn draw_centroids(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<Matrix> {
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(cfg.identities);
    for g in 0..cfg.identities {
        let mut placed = false;
        for _ in 0..CENTROID_ATTEMPTS {
            let c = unit_vec(rng, cfg.dim);
            if accepted
                .iter()
                .all(|o| dot(o, &c) <= cfg.max_centroid_cosine)
            {
                accepted.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidConfig(format!(
                "could not place centroid {g} with pairwise cosine <= {} in d={}",
                cfg.max_centroid_cosine, cfg.dim
            )));
        }
    }
    Matrix::from_rows(&accepted)
}

/// Orthonormal basis (rows) of a random subspace.
fn random_subspace(rng: &mut ChaCha8Rng, d: usize, rank: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v = gaussian_vec(rng, d);
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

struct ModalityModel {
    offset: Vec<f64>,
    nuisance: Vec<Vec<f64>>,
}

impl ModalityModel {
    fn draw(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Self {
        let mut offset = unit_vec(rng, cfg.dim);
        offset.iter_mut().for_each(|x| *x *= cfg.modality_offset);
        let nuisance = random_subspace(rng, cfg.dim, cfg.nuisance_rank);
        ModalityModel { offset, nuisance }
    }

    /// Image model, then text model.
    fn draw_pair(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> [Self; 2] {
        let image = Self::draw(rng, cfg);
        let text = Self::draw(rng, cfg);
        [image, text]
    }

    fn sample(&self, rng: &mut ChaCha8Rng, centroid: &[f64], cfg: &SynthConfig) -> Result<Vec<f32>> {
        let d = cfg.dim;
        let mut v: Vec<f64> = centroid.iter().zip(&self.offset).map(|(c, o)| c + o).collect();
        if cfg.nuisance_rank > 0 && cfg.nuisance_scale > 0.0 {
            let coef_scale = cfg.nuisance_scale / (cfg.nuisance_rank as f64).sqrt();
            for basis in &self.nuisance {
                let a: f64 = rng.sample::<f64, _>(StandardNormal) * coef_scale;
                v.iter_mut().zip(basis).for_each(|(x, b)| *x += a * b);
            }
        }
        if cfg.sigma > 0.0 {
            let s = cfg.sigma / (d as f64).sqrt();
            for x in v.iter_mut() {
                *x += s * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let n = norm(&v);
        if n == 0.0 {
            return Err(Error::InvalidConfig(
                "synthetic sample collapsed to zero; use a nonzero offset or noise".into(),
            ));
        }
        Ok(v.iter().map(|x| (x / n) as f32).collect())
    }
}

fn build(
    rng: &mut ChaCha8Rng,
    centroids: &Matrix,
    [image_model, text_model]: &[ModalityModel; 2],
    cfg: &SynthConfig,
    source: String,
) -> Result<DatasetBundle> {
    let pairs_per_id = cfg.per_id_images.max(cfg.per_id_texts);

    // (label, image row, text row) grouped by identity before shuffling.
    let mut records: Vec<(u32, Vec<f32>, Vec<f32>)> =
        Vec::with_capacity(cfg.identities * pairs_per_id);
    for g in 0..cfg.identities {
        let c = centroids.row(g);
        let images: Vec<Vec<f32>> = (0..cfg.per_id_images)
            .map(|_| image_model.sample(rng, c, cfg))
            .collect::<Result<_>>()?;
        let texts: Vec<Vec<f32>> = (0..cfg.per_id_texts)
            .map(|_| text_model.sample(rng, c, cfg))
            .collect::<Result<_>>()?;
        for k in 0..pairs_per_id {
            records.push((
                g as u32,
                images[k % cfg.per_id_images].clone(),
                texts[k % cfg.per_id_texts].clone(),
            ));
        }
    }
    records.shuffle(rng);

    let n = records.len();
    let mut img = Vec::with_capacity(n * cfg.dim);
    let mut txt = Vec::with_capacity(n * cfg.dim);
    let mut labels = Vec::with_capacity(n);
    for (l, i, t) in records {
        labels.push(l);
        img.extend(i);
        txt.extend(t);
    }
    DatasetBundle::new(
        EmbeddingMatrix::new(n, cfg.dim, img, Modality::Image)?,
        EmbeddingMatrix::new(n, cfg.dim, txt, Modality::Text)?,
        IdentityLabels(labels),
        None,
        cfg.seed,
        source,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_samples_equal_centroid() {
        let cfg = SynthConfig::noiseless(3, 2, 8, 1);
        let b = generate_synthetic(&cfg).unwrap();
        let (im, tx) = (b.images.to_matrix(), b.texts.to_matrix());
        for i in 0..b.len() {
            for j in 0..b.len() {
                if b.labels.get(i) == b.labels.get(j) {
                    assert!((dot(im.row(i), im.row(j)) - 1.0).abs() < 1e-6);
                    assert!((dot(im.row(i), tx.row(j)) - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn antipodal_centroids() {
        let mut c = vec![0.0; 8];
        c[0] = 1.0;
        let neg: Vec<f64> = c.iter().map(|x| -x).collect();
        let centroids = Matrix::from_rows(&[c, neg]).unwrap();
        let cfg = SynthConfig::noiseless(2, 2, 8, 3);
        let b = generate_synthetic_from_centroids(&centroids, &cfg).unwrap();
        let im = b.images.to_matrix();
        for i in 0..b.len() {
            for j in 0..b.len() {
                let expected = if b.labels.get(i) == b.labels.get(j) { 1.0 } else { -1.0 };
                assert!((dot(im.row(i), im.row(j)) - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SynthConfig { seed: 8, ..cfg.clone() };
        assert_ne!(
            generate_synthetic(&cfg).unwrap().manifest.checksum,
            generate_synthetic(&other).unwrap().manifest.checksum
        );
    }

    #[test]
    fn heldout_shares_modalities_not_identities() {
        let cfg = SynthConfig { identities: 5, dim: 16, ..SynthConfig::default() };
        let train = generate_synthetic(&cfg).unwrap();
        let test = generate_heldout(&cfg).unwrap();
        assert_eq!(test.len(), train.len());
        assert_ne!(train.manifest.checksum, test.manifest.checksum);
        assert!(test.manifest.source.ends_with("heldout"));
        assert_eq!(test, generate_heldout(&cfg).unwrap());
    }

    #[test]
    fn rejects_bad_configs() {
        let base = SynthConfig::default();
        for cfg in [
            SynthConfig { identities: 1, ..base.clone() },
            SynthConfig { dim: 4, ..base.clone() },
            SynthConfig { sigma: -0.1, ..base.clone() },
        ] {
            assert!(matches!(generate_synthetic(&cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn uneven_counts_reuse_samples() {
        let cfg = SynthConfig {
            identities: 3,
            per_id_images: 1,
            per_id_texts: 2,
            dim: 8,
            ..SynthConfig::default()
        };
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(b.len(), 6);
        assert_eq!(b.manifest.n, 6);
    }

    #[test]
    fn centroid_separation_enforced() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = draw_centroids(&mut rng, &cfg).unwrap();
        for i in 0..c.rows() {
            for j in 0..i {
                assert!(dot(c.row(i), c.row(j)) <= cfg.max_centroid_cosine);
            }
        }
    }
}
