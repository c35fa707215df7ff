//! In-batch losses: the symmetric contrastive loss and local relation
//! construction followed by similarity distribution matching (SDM).
//!
//! All features passed here are unit-norm rows of a [`Matrix`], so cosine
//! similarity is a dot product. Targets are treated as constants during
//! differentiation.

use crate::exec::Exec;
use crate::matrix::{log_sum_exp, softmax_row, Matrix};
use crate::{Error, Result};

/// Pairwise cosine similarities, clamped to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Matrix,
}

/// Binary relation matrix; the diagonal (the known pair) is always set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssociationMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl AssociationMatrix {
    /// Builds from a predicate; diagonal entries are forced to `true`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(i == j || f(i, j));
            }
        }
        AssociationMatrix { rows, cols, bits }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |_, _| false)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    /// Off-diagonal `(row, col)` pairs that are set.
    pub fn mined_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.rows {
            for j in 0..self.cols {
                if i != j && self.get(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// `Q` after softening: 1 on the diagonal, `lambda` on mined off-diagonal
/// entries, `-inf` elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTargetMatrix {
    pub values: Matrix,
}

/// Row-stochastic target distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetDistribution {
    pub values: Matrix,
}

/// Scalar loss with gradients on the image and text feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWithGrad {
    pub value: f64,
    pub grad_v: Matrix,
    pub grad_t: Matrix,
}

impl LossWithGrad {
    pub fn zero(rows: usize, dim: usize) -> Self {
        LossWithGrad {
            value: 0.0,
            grad_v: Matrix::zeros(rows, dim),
            grad_t: Matrix::zeros(rows, dim),
        }
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(tau))
    }
}

fn check_pair(fv: &Matrix, ft: &Matrix) -> Result<()> {
    if fv.shape() != ft.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image features {:?} vs text features {:?}",
            fv.shape(),
            ft.shape()
        )));
    }
    Ok(())
}

pub fn cosine_sim_matrix(a: &Matrix, b: &Matrix) -> Result<SimilarityMatrix> {
    cosine_sim_matrix_with(a, b, Exec::default())
}

pub fn cosine_sim_matrix_with(a: &Matrix, b: &Matrix, exec: Exec) -> Result<SimilarityMatrix> {
    let mut values = a.mul_transpose_with(b, exec)?;
    values
        .as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(SimilarityMatrix { values })
}

/// Row softmax of `sim / tau`.
pub fn similarity_distribution(sim: &Matrix, tau: f64) -> Result<Matrix> {
    check_tau(tau)?;
    let rows: Vec<Vec<f64>> = sim
        .row_iter()
        .map(|r| softmax_row(&r.iter().map(|s| s / tau).collect::<Vec<_>>()))
        .collect();
    Matrix::from_rows(&rows)
}

/// Row-wise log-softmax of `sim / tau`.
fn log_probs(row: &[f64], tau: f64) -> Vec<f64> {
    let logits: Vec<f64> = row.iter().map(|s| s / tau).collect();
    let lse = log_sum_exp(&logits);
    logits.iter().map(|z| z - lse).collect()
}

/// Mean over rows of the cross-entropy against the diagonal, and its
/// derivative with respect to `sim`.
pub(crate) fn diagonal_ce_rows(sim: &Matrix, tau: f64, exec: Exec) -> (f64, Matrix) {
    let n = sim.rows() as f64;
    let per_row = exec.map_range(sim.rows(), |i| {
        let lp = log_probs(sim.row(i), tau);
        let grad: Vec<f64> = lp
            .iter()
            .enumerate()
            .map(|(j, l)| (l.exp() - if i == j { 1.0 } else { 0.0 }) / (n * tau))
            .collect();
        (-lp[i], grad)
    });
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(sim.rows() * sim.cols());
    for (v, g) in per_row {
        value += v;
        grad.extend(g);
    }
    (
        value / n,
        Matrix::from_vec(sim.rows(), sim.cols(), grad).expect("row lengths match"),
    )
}

/// Mean over rows of `sum_j p log(p / (q + eps))` with `p = softmax(sim / tau)`,
/// and its derivative with respect to `sim` (targets held constant).
pub(crate) fn sdm_rows(sim: &Matrix, q: &Matrix, tau: f64, eps: f64, exec: Exec) -> (f64, Matrix) {
    debug_assert_eq!(sim.shape(), q.shape());
    let n = sim.rows() as f64;
    let per_row = exec.map_range(sim.rows(), |i| {
        let lp = log_probs(sim.row(i), tau);
        let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        // l_j = log p_j - log(q_j + eps)
        let l: Vec<f64> = lp
            .iter()
            .zip(q.row(i))
            .map(|(lpj, qj)| lpj - (qj + eps).ln())
            .collect();
        let value: f64 = p.iter().zip(&l).map(|(pj, lj)| pj * lj).sum();
        let grad: Vec<f64> = p
            .iter()
            .zip(&l)
            .map(|(pj, lj)| pj * (lj - value) / (n * tau))
            .collect();
        (value, grad)
    });
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(sim.rows() * sim.cols());
    for (v, g) in per_row {
        value += v;
        grad.extend(g);
    }
    (
        value / n,
        Matrix::from_vec(sim.rows(), sim.cols(), grad).expect("row lengths match"),
    )
}

/// Symmetric InfoNCE over the diagonal pairing (text-to-image plus
/// image-to-text).
pub fn itc_loss(fv: &Matrix, ft: &Matrix, tau: f64) -> Result<LossWithGrad> {
    check_tau(tau)?;
    check_pair(fv, ft)?;
    let exec = Exec::default();
    let s_vt = fv.mul_transpose_with(ft, exec)?;
    let s_tv = s_vt.transpose();
    let (v2t, d_vt) = diagonal_ce_rows(&s_vt, tau, exec);
    let (t2v, d_tv) = diagonal_ce_rows(&s_tv, tau, exec);
    // S_vt = Fv Ft^T: dFv = dS Ft, dFt = dS^T Fv; S_tv is its transpose.
    let mut grad_v = d_vt.matmul(ft)?;
    grad_v.add_assign(&d_tv.transpose_mul(ft)?);
    let mut grad_t = d_tv.matmul(fv)?;
    grad_t.add_assign(&d_vt.transpose_mul(fv)?);
    Ok(LossWithGrad {
        value: v2t + t2v,
        grad_v,
        grad_t,
    })
}

/// Entry is 1 iff `m[i][j] > th`; diagonal forced to 1.
pub fn binarize(m: &SimilarityMatrix, th: f64) -> AssociationMatrix {
    let v = &m.values;
    AssociationMatrix::from_fn(v.rows(), v.cols(), |i, j| v.get(i, j) > th)
}

/// Entrywise AND (Hadamard product of binary matrices).
pub fn intersect(mv: &AssociationMatrix, mt: &AssociationMatrix) -> Result<AssociationMatrix> {
    if mv.shape() != mt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            mv.shape(),
            mt.shape()
        )));
    }
    Ok(AssociationMatrix::from_fn(mv.rows, mv.cols, |i, j| {
        mv.get(i, j) && mt.get(i, j)
    }))
}

/// `Q = I + lambda (M - I)` with exact zeros replaced by `-inf`.
pub fn soften_targets(mvt: &AssociationMatrix, lambda: f64) -> Result<SoftTargetMatrix> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidLambda(lambda));
    }
    let (r, c) = mvt.shape();
    let mut values = Matrix::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            let eye = if i == j { 1.0 } else { 0.0 };
            let m = if mvt.get(i, j) { 1.0 } else { 0.0 };
            let q = eye + lambda * (m - eye);
            values.set(i, j, if q == 0.0 { f64::NEG_INFINITY } else { q });
        }
    }
    Ok(SoftTargetMatrix { values })
}

/// Row softmax over the finite entries; `-inf` entries get probability 0.
pub fn target_distribution(q_raw: &SoftTargetMatrix) -> Result<TargetDistribution> {
    let v = &q_raw.values;
    let mut rows = Vec::with_capacity(v.rows());
    for (i, r) in v.row_iter().enumerate() {
        if !r.iter().any(|x| x.is_finite()) {
            return Err(Error::EmptyRow(i));
        }
        rows.push(softmax_row(r));
    }
    let values = if rows.is_empty() {
        Matrix::zeros(0, v.cols())
    } else {
        Matrix::from_rows(&rows)?
    };
    Ok(TargetDistribution { values })
}

/// Cross-modal relation matrix: thresholded image self-similarity AND
/// thresholded text self-similarity.
pub fn local_relations(fv: &Matrix, ft: &Matrix, th: f64) -> Result<AssociationMatrix> {
    check_pair(fv, ft)?;
    let mv = binarize(&cosine_sim_matrix(fv, fv)?, th);
    let mt = binarize(&cosine_sim_matrix(ft, ft)?, th);
    intersect(&mv, &mt)
}

/// Relation mining, softening and target construction in one call.
pub fn local_targets(fv: &Matrix, ft: &Matrix, th: f64, lambda: f64) -> Result<TargetDistribution> {
    let mvt = local_relations(fv, ft, th)?;
    target_distribution(&soften_targets(&mvt, lambda)?)
}

/// SDM loss in both directions. `q` must come from a symmetric relation
/// matrix, so it serves as the target for image-to-text and text-to-image.
pub fn sdm_loss(
    fv: &Matrix,
    ft: &Matrix,
    q: &TargetDistribution,
    tau: f64,
    eps: f64,
) -> Result<LossWithGrad> {
    check_tau(tau)?;
    check_pair(fv, ft)?;
    let b = fv.rows();
    if q.values.shape() != (b, b) {
        return Err(Error::ShapeMismatch(format!(
            "targets {:?} for batch of {b}",
            q.values.shape()
        )));
    }
    let exec = Exec::default();
    let s_vt = fv.mul_transpose_with(ft, exec)?;
    let s_tv = s_vt.transpose();
    let (lv, d_vt) = sdm_rows(&s_vt, &q.values, tau, eps, exec);
    let (lt, d_tv) = sdm_rows(&s_tv, &q.values, tau, eps, exec);
    let mut grad_v = d_vt.matmul(ft)?;
    grad_v.add_assign(&d_tv.transpose_mul(ft)?);
    let mut grad_t = d_tv.matmul(fv)?;
    grad_t.add_assign(&d_vt.transpose_mul(fv)?);
    Ok(LossWithGrad {
        value: lv + lt,
        grad_v,
        grad_t,
    })
}
