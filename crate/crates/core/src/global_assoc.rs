//! Global relation construction over momentum memory banks.
//!
//! Each batch image is used as a visual anchor against the whole image bank;
//! surviving top-k neighbours become extra columns of an extended text-image
//! similarity matrix whose targets are weighted by anchor confidence. The
//! image-to-text mirror reuses the same columns through the text bank.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::emb_store::{Modality, UNIT_NORM_TOL};
use crate::exec::Exec;
use crate::local_assoc::{check_tau, sdm_rows, LossWithGrad, TargetDistribution};
use crate::matrix::{by_score_desc, dot, norm, softmax_row, Matrix};
use crate::{Error, Result};

/// Per-modality store of momentum-smoothed unit features for every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    features: Matrix,
    modality: Modality,
    epoch: u64,
}

impl MemoryBank {
    /// Initializes from freshly extracted features (rows are renormalized).
    pub fn new(features: &Matrix, modality: Modality) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::BankEmpty);
        }
        Ok(MemoryBank {
            features: features.normalize_rows()?,
            modality,
            epoch: 0,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn advance_epoch(&mut self) {
        self.epoch += 1;
    }

    pub(crate) fn set_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
    }

    /// `stored <- normalize(alpha * new + (1 - alpha) * stored)` for each
    /// listed index; other rows are untouched.
    pub fn update(&mut self, indices: &[usize], feats: &Matrix, alpha: f64) -> Result<()> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "bank momentum must lie in (0, 1], got {alpha}"
            )));
        }
        if feats.rows() != indices.len() || (feats.cols() != self.dim() && !indices.is_empty()) {
            return Err(Error::ShapeMismatch(format!(
                "{} indices with features {:?} for a bank of dim {}",
                indices.len(),
                feats.shape(),
                self.dim()
            )));
        }
        let mut seen = BTreeSet::new();
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.len(),
                });
            }
            if !seen.insert(i) {
                return Err(Error::InvalidConfig(format!(
                    "bank update index {i} repeated"
                )));
            }
        }
        for (r, &i) in indices.iter().enumerate() {
            let fresh = feats.row(r);
            let row = self.features.row_mut(i);
            if alpha == 1.0 {
                row.copy_from_slice(fresh);
                continue;
            }
            for (s, f) in row.iter_mut().zip(fresh) {
                *s = alpha * f + (1.0 - alpha) * *s;
            }
            let n = norm(row);
            if n == 0.0 {
                return Err(Error::ZeroRow(i));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(())
    }

    pub fn max_norm_deviation(&self) -> f64 {
        self.features
            .row_iter()
            .map(|r| (norm(r) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_unit_norm(&self) -> bool {
        self.max_norm_deviation() <= UNIT_NORM_TOL
    }
}

/// Free-function form of [`MemoryBank::update`].
pub fn bank_update(bank: &mut MemoryBank, indices: &[usize], feats: &Matrix, alpha: f64) -> Result<()> {
    bank.update(indices, feats, alpha)
}

/// Per batch row, the dataset indices judged to share its identity.
/// Sets are sorted ascending and always contain the row's own index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSets {
    pub sets: Vec<Vec<usize>>,
}

impl CandidateSets {
    /// Candidates other than the row's own index, as `(own index, candidate)`
    /// dataset-index pairs.
    pub fn mined_pairs<'a>(&'a self, self_indices: &'a [usize]) -> impl Iterator<Item = (usize, usize)> + 'a {
        self.sets.iter().enumerate().flat_map(move |(r, set)| {
            set.iter()
                .copied()
                .filter(move |&j| j != self_indices[r])
                .map(move |j| (self_indices[r], j))
        })
    }
}

pub fn mine_candidates(
    batch_feats: &Matrix,
    bank: &MemoryBank,
    k: usize,
    th: f64,
    self_indices: &[usize],
) -> Result<CandidateSets> {
    mine_candidates_with(batch_feats, bank, k, th, self_indices, Exec::default())
}

/// Top-`k` bank rows by similarity to each batch row (ties to the lower
/// index), filtered by `similarity > th`, plus the row's own index.
pub fn mine_candidates_with(
    batch_feats: &Matrix,
    bank: &MemoryBank,
    k: usize,
    th: f64,
    self_indices: &[usize],
    exec: Exec,
) -> Result<CandidateSets> {
    if bank.is_empty() {
        return Err(Error::BankEmpty);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("top-k size must be >= 1".into()));
    }
    if batch_feats.rows() != self_indices.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} batch rows, {} self indices",
            batch_feats.rows(),
            self_indices.len()
        )));
    }
    if batch_feats.cols() != bank.dim() {
        return Err(Error::DimensionMismatch(format!(
            "batch dim {} vs bank dim {}",
            batch_feats.cols(),
            bank.dim()
        )));
    }
    if let Some(&bad) = self_indices.iter().find(|&&i| i >= bank.len()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: bank.len(),
        });
    }
    let bank_feats = bank.features();
    let k = k.min(bank.len());
    let sets = exec.map_range(batch_feats.rows(), |i| {
        let q = batch_feats.row(i);
        let mut scored: Vec<(f64, usize)> = bank_feats
            .row_iter()
            .enumerate()
            .map(|(j, b)| (dot(q, b).clamp(-1.0, 1.0), j))
            .collect();
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_score_desc);
            scored.truncate(k);
        }
        let mut set: BTreeSet<usize> = scored
            .into_iter()
            .filter(|&(s, _)| s > th)
            .map(|(_, j)| j)
            .collect();
        set.insert(self_indices[i]);
        set.into_iter().collect::<Vec<_>>()
    });
    Ok(CandidateSets { sets })
}

/// Where a column of the extended similarity matrix comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum ColumnSource {
    /// In-batch sample at this batch position, with its dataset index.
    Batch { position: usize, index: usize },
    /// Memory-bank row not present in the batch.
    Bank { index: usize },
}

impl ColumnSource {
    pub fn dataset_index(&self) -> usize {
        match *self {
            ColumnSource::Batch { index, .. } | ColumnSource::Bank { index } => index,
        }
    }
}

/// Column layout of the extended similarity matrix plus the frozen bank
/// features backing its bank columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnPlan {
    pub column_map: Vec<ColumnSource>,
    /// Per batch row, ascending column positions sharing its identity.
    pub j_prime: Vec<Vec<usize>>,
    pub bank_images: Matrix,
    pub bank_texts: Matrix,
}

impl ColumnPlan {
    pub fn batch_len(&self) -> usize {
        self.j_prime.len()
    }

    pub fn width(&self) -> usize {
        self.column_map.len()
    }

    /// Lays out batch columns first, then the union of mined bank candidates
    /// that are not already in the batch, ascending by dataset index.
    pub fn new(
        cands: &CandidateSets,
        batch_indices: &[usize],
        image_bank: &MemoryBank,
        text_bank: &MemoryBank,
    ) -> Result<Self> {
        let b = batch_indices.len();
        if cands.sets.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "{} candidate sets for a batch of {b}",
                cands.sets.len()
            )));
        }
        if image_bank.len() != text_bank.len() || image_bank.dim() != text_bank.dim() {
            return Err(Error::ShapeMismatch("image and text banks differ in shape".into()));
        }
        let mut position = std::collections::HashMap::with_capacity(b);
        let mut column_map = Vec::with_capacity(b);
        for (p, &idx) in batch_indices.iter().enumerate() {
            if position.insert(idx, p).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "dataset index {idx} appears twice in the batch"
                )));
            }
            column_map.push(ColumnSource::Batch { position: p, index: idx });
        }
        let extra: BTreeSet<usize> = cands
            .sets
            .iter()
            .flatten()
            .copied()
            .filter(|j| !position.contains_key(j))
            .collect();
        for &j in &extra {
            if j >= image_bank.len() {
                return Err(Error::IndexOutOfRange {
                    index: j,
                    len: image_bank.len(),
                });
            }
            position.insert(j, column_map.len());
            column_map.push(ColumnSource::Bank { index: j });
        }
        let j_prime = cands
            .sets
            .iter()
            .enumerate()
            .map(|(i, set)| {
                let mut cols: BTreeSet<usize> = set.iter().map(|j| position[j]).collect();
                cols.insert(i);
                cols.into_iter().collect()
            })
            .collect();
        let extra: Vec<usize> = extra.into_iter().collect();
        Ok(ColumnPlan {
            column_map,
            j_prime,
            bank_images: image_bank.features().select_rows(&extra),
            bank_texts: text_bank.features().select_rows(&extra),
        })
    }
}

/// Extended similarity `S'` (texts against batch plus mined images) and its
/// image-to-text mirror, together with the features needed for backprop.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedSimilarity {
    pub plan: ColumnPlan,
    /// `B x B1`: row i is text i against every image column.
    pub text_to_image: Matrix,
    /// `B x B1`: row i is image i against every text column.
    pub image_to_text: Matrix,
    fv: Matrix,
    ft: Matrix,
    image_columns: Matrix,
    text_columns: Matrix,
}

impl ExtendedSimilarity {
    /// Evaluates the similarities for fresh batch features under a fixed plan.
    pub fn new(plan: ColumnPlan, fv: &Matrix, ft: &Matrix) -> Result<Self> {
        if fv.shape() != ft.shape() || fv.rows() != plan.batch_len() {
            return Err(Error::ShapeMismatch(format!(
                "features {:?}/{:?} for a plan over {} rows",
                fv.shape(),
                ft.shape(),
                plan.batch_len()
            )));
        }
        let image_columns = fv.vstack(&plan.bank_images)?;
        let text_columns = ft.vstack(&plan.bank_texts)?;
        let exec = Exec::default();
        Ok(ExtendedSimilarity {
            text_to_image: ft.mul_transpose_with(&image_columns, exec)?,
            image_to_text: fv.mul_transpose_with(&text_columns, exec)?,
            fv: fv.clone(),
            ft: ft.clone(),
            image_columns,
            text_columns,
            plan,
        })
    }

    pub fn batch_len(&self) -> usize {
        self.plan.batch_len()
    }

    pub fn width(&self) -> usize {
        self.plan.width()
    }

    pub fn column_map(&self) -> &[ColumnSource] {
        &self.plan.column_map
    }

    pub fn j_prime(&self) -> &[Vec<usize>] {
        &self.plan.j_prime
    }

    /// Image features backing each column (fresh for batch, bank otherwise).
    pub fn image_columns(&self) -> &Matrix {
        &self.image_columns
    }
}

pub fn build_extended_similarity(
    ft: &Matrix,
    fv: &Matrix,
    image_bank: &MemoryBank,
    text_bank: &MemoryBank,
    cands: &CandidateSets,
    batch_dataset_indices: &[usize],
) -> Result<ExtendedSimilarity> {
    let plan = ColumnPlan::new(cands, batch_dataset_indices, image_bank, text_bank)?;
    ExtendedSimilarity::new(plan, fv, ft)
}

/// How the self column enters the adaptive-weight softmax denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceDenominator {
    /// Softmax over the non-self members of `J'_i` only.
    #[default]
    ExcludeSelf,
    /// Softmax over every member of `J'_i`, self included.
    IncludeSelf,
}

/// `Q'`: 1 at the self column, adaptive weights on other members of `J'_i`,
/// `-inf` elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalTargetMatrix {
    pub values: Matrix,
}

/// Builds `Q'` from anchor image similarities. Weights are
/// `1 - softmax(sim(anchor_i, candidate_j))` over the chosen denominator.
pub fn global_targets(ext: &ExtendedSimilarity, denominator: ConfidenceDenominator) -> GlobalTargetMatrix {
    let (b, b1) = (ext.batch_len(), ext.width());
    let mut values = Matrix::from_vec(b, b1, vec![f64::NEG_INFINITY; b * b1]).expect("shape");
    for i in 0..b {
        let anchor = ext.fv.row(i);
        let members = &ext.plan.j_prime[i];
        let sims: Vec<(usize, f64)> = members
            .iter()
            .map(|&j| (j, dot(anchor, ext.image_columns.row(j))))
            .filter(|&(j, _)| denominator == ConfidenceDenominator::IncludeSelf || j != i)
            .collect();
        let probs = softmax_row(&sims.iter().map(|&(_, s)| s).collect::<Vec<_>>());
        for (&(j, _), p) in sims.iter().zip(probs) {
            if j != i {
                values.set(i, j, 1.0 - p);
            }
        }
        values.set(i, i, 1.0);
    }
    GlobalTargetMatrix { values }
}

/// `q'`: row softmax over the finite entries of `Q'`.
pub fn global_target_distribution(qg: &GlobalTargetMatrix) -> TargetDistribution {
    let rows: Vec<Vec<f64>> = qg.values.row_iter().map(softmax_row).collect();
    TargetDistribution {
        values: if rows.is_empty() {
            Matrix::zeros(0, qg.values.cols())
        } else {
            Matrix::from_rows(&rows).expect("equal rows")
        },
    }
}

/// Text-to-image plus image-to-text SDM over the extended columns.
/// Gradients reach the fresh batch features only.
pub fn global_sdm_loss(ext: &ExtendedSimilarity, qg: &GlobalTargetMatrix, tau: f64, eps: f64) -> Result<LossWithGrad> {
    check_tau(tau)?;
    let (b, b1) = (ext.batch_len(), ext.width());
    if qg.values.shape() != (b, b1) {
        return Err(Error::ShapeMismatch(format!(
            "targets {:?} for extended similarity {b}x{b1}",
            qg.values.shape()
        )));
    }
    let q = global_target_distribution(qg);
    let exec = Exec::default();
    let (lt, d_t2i) = sdm_rows(&ext.text_to_image, &q.values, tau, eps, exec);
    let (lv, d_i2t) = sdm_rows(&ext.image_to_text, &q.values, tau, eps, exec);

    // text_to_image = Ft [Fv; Bv]^T, image_to_text = Fv [Ft; Bt]^T.
    let mut grad_t = d_t2i.matmul(&ext.image_columns)?;
    grad_t.add_assign(&d_i2t.leading_columns(b).transpose_mul(&ext.fv)?);
    let mut grad_v = d_i2t.matmul(&ext.text_columns)?;
    grad_v.add_assign(&d_t2i.leading_columns(b).transpose_mul(&ext.ft)?);
    Ok(LossWithGrad {
        value: lt + lv,
        grad_v,
        grad_t,
    })
}
