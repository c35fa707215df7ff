use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::emb_store::{EmbeddingMatrix, Modality};
use crate::matrix::{dot, norm, Matrix};
use crate::{Error, Result};

const INIT_STD: f64 = 1e-3;

/// Affine map followed by row normalization: `f = normalize(W x + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// Gradients of a scalar loss with respect to one adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrad {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// Forward values kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterCache {
    pub out: Matrix,
    norms: Vec<f64>,
}

impl Adapter {
    pub fn identity(d: usize) -> Self {
        Adapter { w: Matrix::identity(d), b: vec![0.0; d] }
    }

    /// `W = I + N(0, 1e-6)` entrywise, `b = 0`.
    pub fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let noise = Normal::new(0.0, INIT_STD).expect("positive std");
        let mut a = Adapter::identity(d);
        for v in a.w.as_mut_slice() {
            *v += noise.sample(rng);
        }
        a
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.out)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<AdapterCache> {
        if x.cols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "adapter dim {} vs input dim {}",
                self.dim(),
                x.cols()
            )));
        }
        let mut u = x.mul_transpose(&self.w)?;
        let mut norms = Vec::with_capacity(u.rows());
        for r in 0..u.rows() {
            let row = u.row_mut(r);
            row.iter_mut().zip(&self.b).for_each(|(v, b)| *v += b);
            let n = norm(row);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateOutputRow(r));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(AdapterCache { out: u, norms })
    }

    /// Pulls `df` (gradient on the normalized outputs) back to `W` and `b`.
    pub fn backward(&self, x: &Matrix, cache: &AdapterCache, df: &Matrix) -> Result<AdapterGrad> {
        let du = normalize_backward(cache, df)?;
        let w = du.transpose_mul(x)?;
        let mut b = vec![0.0; self.dim()];
        for row in du.row_iter() {
            b.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
        }
        Ok(AdapterGrad { w, b })
    }

    pub fn param_count(&self) -> usize {
        self.w.as_slice().len() + self.b.len()
    }
}

/// `du = (df - f (f . df)) / |u|` row by row.
fn normalize_backward(cache: &AdapterCache, df: &Matrix) -> Result<Matrix> {
    if df.shape() != cache.out.shape() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?} vs outputs {:?}",
            df.shape(),
            cache.out.shape()
        )));
    }
    let mut du = df.clone();
    for r in 0..du.rows() {
        let f = cache.out.row(r);
        let proj = dot(f, df.row(r));
        let n = cache.norms[r];
        du.row_mut(r)
            .iter_mut()
            .zip(f)
            .for_each(|(g, fv)| *g = (*g - fv * proj) / n);
    }
    Ok(du)
}

impl AdapterGrad {
    pub fn zeros(d: usize) -> Self {
        AdapterGrad { w: Matrix::zeros(d, d), b: vec![0.0; d] }
    }

    pub fn add_assign(&mut self, other: &AdapterGrad) {
        self.w.add_assign(&other.w);
        self.b.iter_mut().zip(&other.b).for_each(|(a, b)| *a += b);
    }
}

/// One adapter per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub image: Adapter,
    pub text: Adapter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub image: AdapterGrad,
    pub text: AdapterGrad,
}

impl AdapterParams {
    pub fn init(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Adapter::init(d, &mut rng);
        let text = Adapter::init(d, &mut rng);
        AdapterParams { image, text }
    }

    pub fn identity(d: usize) -> Self {
        AdapterParams { image: Adapter::identity(d), text: Adapter::identity(d) }
    }

    pub fn dim(&self) -> usize {
        self.image.dim()
    }

    pub fn for_modality(&self, m: Modality) -> &Adapter {
        match m {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.image, &self.text]
            .iter()
            .all(|a| a.w.is_finite() && a.b.iter().all(|v| v.is_finite()))
    }

    /// Parameters in a fixed order: image W, image b, text W, text b.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.image.param_count());
        for a in [&self.image, &self.text] {
            out.extend_from_slice(a.w.as_slice());
            out.extend_from_slice(&a.b);
        }
        out
    }

    pub fn assign(&mut self, flat: &[f64]) {
        let mut off = 0;
        for a in [&mut self.image, &mut self.text] {
            let wn = a.w.as_slice().len();
            a.w.as_mut_slice().copy_from_slice(&flat[off..off + wn]);
            off += wn;
            let bn = a.b.len();
            a.b.copy_from_slice(&flat[off..off + bn]);
            off += bn;
        }
        debug_assert_eq!(off, flat.len());
    }
}

impl ParamGrads {
    pub fn zeros(d: usize) -> Self {
        ParamGrads { image: AdapterGrad::zeros(d), text: AdapterGrad::zeros(d) }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in [&self.image, &self.text] {
            out.extend_from_slice(g.w.as_slice());
            out.extend_from_slice(&g.b);
        }
        out
    }
}

/// Applies an adapter to a stored embedding matrix.
pub fn adapter_forward(a: &Adapter, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::from_matrix(&a.forward(&x.to_matrix())?, x.modality())
}
