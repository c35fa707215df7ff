//! Information-asymmetric views and the overall objective.
//!
//! Encoders are not available here, so the asymmetric view of an embedding
//! is produced by zeroing a random subset of coordinates, jittering the rest
//! and renormalizing. Precomputed augmented-view embeddings, when a dataset
//! ships them, take the place of this synthetic perturbation.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::emb_store::EmbeddingMatrix;
use crate::exec::Exec;
use crate::local_assoc::{local_targets, sdm_loss, LossWithGrad};
use crate::matrix::{norm, Matrix};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    /// Fraction of coordinates zeroed per row, in `[0, 1)`.
    pub mask_ratio: f64,
    pub jitter_sigma: f64,
    pub seed: u64,
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::InvalidConfig(format!(
                "mask ratio must lie in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "jitter sigma must be non-negative, got {}",
                self.jitter_sigma
            )));
        }
        Ok(())
    }

    pub fn masked_count(&self, d: usize) -> usize {
        (self.mask_ratio * d as f64).floor() as usize
    }
}

/// Which side of the consistency pair is perturbed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsymmetryMode {
    /// Both image and text are perturbed.
    #[default]
    Both,
    /// Clean image paired with a perturbed text.
    TextOnly,
    /// Perturbed image paired with a clean text.
    ImageOnly,
}

impl AsymmetryMode {
    pub fn perturbs_images(self) -> bool {
        self != AsymmetryMode::TextOnly
    }

    pub fn perturbs_texts(self) -> bool {
        self != AsymmetryMode::ImageOnly
    }
}

/// SplitMix64 finalizer; mixes a few integers into one well-spread seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Seed for the perturbation of one modality in one batch.
pub fn batch_seed(seed: u64, epoch: u64, batch: u64, stream: u64) -> u64 {
    mix_seed(&[seed, epoch, batch, stream])
}

pub fn perturb(m: &EmbeddingMatrix, cfg: &PerturbConfig) -> Result<EmbeddingMatrix> {
    let out = perturb_matrix(&m.to_matrix(), cfg)?;
    EmbeddingMatrix::from_matrix(&out, m.modality())
}

/// Row `r` uses its own ChaCha stream `r` under `cfg.seed`, so rows are
/// independent and the result does not depend on scheduling.
pub fn perturb_matrix(m: &Matrix, cfg: &PerturbConfig) -> Result<Matrix> {
    perturb_matrix_with(m, cfg, Exec::default())
}

pub fn perturb_matrix_with(m: &Matrix, cfg: &PerturbConfig, exec: Exec) -> Result<Matrix> {
    cfg.validate()?;
    let d = m.cols();
    let masked = cfg.masked_count(d);
    let rows = exec.map_range(m.rows(), |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(r as u64);
        let mut row = m.row(r).to_vec();
        let mut keep = vec![true; d];
        for j in sample(&mut rng, d, masked) {
            keep[j] = false;
            row[j] = 0.0;
        }
        if cfg.jitter_sigma > 0.0 {
            for (v, _) in row.iter_mut().zip(&keep).filter(|(_, &k)| k) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += cfg.jitter_sigma * z;
            }
        }
        let n = norm(&row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateRow(r));
        }
        row.iter_mut().for_each(|v| *v /= n);
        Ok(row)
    });
    let mut data = Vec::with_capacity(m.rows() * d);
    for row in rows {
        data.extend(row?);
    }
    Matrix::from_vec(m.rows(), d, data)
}

/// Local relation mining plus SDM on a perturbed pair; gradients are with
/// respect to the perturbed features.
pub fn consistency_loss(
    fv_pert: &Matrix,
    ft_pert: &Matrix,
    tau: f64,
    eps: f64,
    th: f64,
    lambda: f64,
) -> Result<LossWithGrad> {
    let q = local_targets(fv_pert, ft_pert, th, lambda)?;
    sdm_loss(fv_pert, ft_pert, &q, tau, eps)
}

/// The four loss terms with their summed gradients. `grad_v`/`grad_t` are
/// with respect to the clean adapter outputs, `grad_v_pert`/`grad_t_pert`
/// with respect to the outputs on the perturbed inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub itc: f64,
    pub rc_b: f64,
    pub rc_g: f64,
    pub rc_h: f64,
    pub total: f64,
    #[serde(skip)]
    pub grads: Option<BundleGrads>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BundleGrads {
    pub grad_v: Matrix,
    pub grad_t: Matrix,
    pub grad_v_pert: Matrix,
    pub grad_t_pert: Matrix,
}

/// Unweighted sum. Disabled terms are passed as [`LossWithGrad::zero`].
pub fn total_loss(
    itc: &LossWithGrad,
    rc_b: &LossWithGrad,
    rc_g: &LossWithGrad,
    rc_h: &LossWithGrad,
) -> Result<LossBundle> {
    for (name, term) in [("itc", itc), ("rc_b", rc_b), ("rc_g", rc_g), ("rc_h", rc_h)] {
        if !term.value.is_finite() || !term.grad_v.is_finite() || !term.grad_t.is_finite() {
            return Err(Error::NonFiniteTerm(name));
        }
    }
    let shape = itc.grad_v.shape();
    for term in [rc_b, rc_g, rc_h] {
        if term.grad_v.shape() != shape || term.grad_t.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "loss term gradient {:?} vs {:?}",
                term.grad_v.shape(),
                shape
            )));
        }
    }
    let mut grad_v = itc.grad_v.clone();
    grad_v.add_assign(&rc_b.grad_v);
    grad_v.add_assign(&rc_g.grad_v);
    let mut grad_t = itc.grad_t.clone();
    grad_t.add_assign(&rc_b.grad_t);
    grad_t.add_assign(&rc_g.grad_t);
    Ok(LossBundle {
        itc: itc.value,
        rc_b: rc_b.value,
        rc_g: rc_g.value,
        rc_h: rc_h.value,
        total: itc.value + rc_b.value + rc_g.value + rc_h.value,
        grads: Some(BundleGrads {
            grad_v,
            grad_t,
            grad_v_pert: rc_h.grad_v.clone(),
            grad_t_pert: rc_h.grad_t.clone(),
        }),
    })
}
