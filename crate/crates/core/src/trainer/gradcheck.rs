//! Central finite differences against the analytic parameter gradients.
//!
//! Mined relations, targets and perturbed views are planned once at the base
//! parameters and held fixed, matching how gradients are defined in training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::adapter::AdapterParams;
use super::hyper::{Ablation, HyperParams};
use super::train::{evaluate_step, plan_step, Banks, StepPlan, TrainData};
use crate::asym_consistency::mix_seed;
use crate::matrix::Matrix;
use crate::{Error, Result};

pub const FD_STEP: f64 = 1e-4;

/// Relative errors are taken against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so that entries whose true gradient is zero are judged absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSelector {
    /// `0.5 |theta - c|^2` over the flattened parameters, with `c` a fixed
    /// offset from the instance's starting point.
    Quadratic,
    Itc,
    RcB,
    RcG,
    RcH,
    Total,
}

impl LossSelector {
    pub const ALL: [LossSelector; 6] = [
        LossSelector::Quadratic,
        LossSelector::Itc,
        LossSelector::RcB,
        LossSelector::RcG,
        LossSelector::RcH,
        LossSelector::Total,
    ];

    pub fn ablation(self) -> Ablation {
        let none = Ablation::NONE;
        match self {
            LossSelector::Quadratic => none,
            LossSelector::Itc => Ablation { itc: true, ..none },
            LossSelector::RcB => Ablation { lrc: true, ..none },
            LossSelector::RcG => Ablation { gsrc: true, ..none },
            LossSelector::RcH => Ablation { iascl: true, ..none },
            LossSelector::Total => Ablation::ALL,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossSelector::Quadratic => "quadratic",
            LossSelector::Itc => "itc",
            LossSelector::RcB => "rc_b",
            LossSelector::RcG => "rc_g",
            LossSelector::RcH => "rc_h",
            LossSelector::Total => "total",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(LossSelector::Quadratic),
            "itc" => Ok(LossSelector::Itc),
            "rc_b" => Ok(LossSelector::RcB),
            "rc_g" => Ok(LossSelector::RcG),
            "rc_h" => Ok(LossSelector::RcH),
            "total" => Ok(LossSelector::Total),
            other => Err(Error::InvalidConfig(format!("unknown loss `{other}`"))),
        }
    }
}

/// Shape of a random gradient-check instance.
///
/// The default temperature is 0.1 rather than the training value: with a
/// step of 1e-4 the truncation error of central differences grows like
/// `(step / tau)^2` and reaches ~4e-4 relative at `tau = 0.02`, although a
/// smaller step agrees with the analytic gradient to ~5e-6 there.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceShape {
    pub batch: usize,
    pub dim: usize,
    /// Samples in the memory bank (the batch is its first `batch` rows).
    pub samples: usize,
    pub identities: usize,
    pub tau: f64,
}

impl Default for InstanceShape {
    fn default() -> Self {
        InstanceShape { batch: 6, dim: 12, samples: 24, identities: 4, tau: 0.1 }
    }
}

/// A random instance with its frozen plan.
pub struct Instance {
    pub params: AdapterParams,
    pub plan: StepPlan,
    pub hp: HyperParams,
}

/// Builds a clustered instance so that relations are actually mined: a few
/// identity centroids, samples near them, adapters perturbed away from
/// identity so that gradients are generic.
pub fn random_instance(selector: LossSelector, seed: u64, shape: InstanceShape) -> Result<Instance> {
    let InstanceShape { batch, dim, samples, identities, tau } = shape;
    if !(tau > 0.0) || batch < 2 || batch > samples || identities == 0 || dim < 2 {
        return Err(Error::InvalidConfig(format!("bad instance shape {shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x4743]));
    let gauss = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    };
    let centroids = Matrix::from_vec(identities, dim, gauss(&mut rng, identities * dim))?.normalize_rows()?;
    let labels: Vec<u32> = (0..samples).map(|_| rng.random_range(0..identities as u32)).collect();
    let noisy = |rng: &mut ChaCha8Rng, scale: f64| -> Result<Matrix> {
        let mut data = Vec::with_capacity(samples * dim);
        for &l in &labels {
            let noise: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            data.extend(centroids.row(l as usize).iter().zip(noise).map(|(c, z): (&f64, f64)| c + scale * z));
        }
        Matrix::from_vec(samples, dim, data)?.normalize_rows()
    };
    let images = noisy(&mut rng, 0.12)?;
    let texts = noisy(&mut rng, 0.12)?;
    let drift = noisy(&mut rng, 0.2)?;
    let data = TrainData { images, texts, aug_images: None, aug_texts: None, labels: labels.clone() };
    let mut params = AdapterParams::init(dim, rng.random());
    let mut flat = params.flatten();
    for v in flat.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += 0.05 * z;
    }
    params.assign(&flat);
    let hp = HyperParams {
        ablation: selector.ablation(),
        tau,
        th: 0.6,
        lambda: 0.4,
        k: 5,
        rho: 0.25,
        jitter_sigma: 0.05,
        batch_size: batch,
        ..HyperParams::default()
    };
    // Bank rows drift from the current features the way they would mid-training.
    let mut banks = Banks::from_params(&params, &data)?;
    let all: Vec<usize> = (0..samples).collect();
    let fv_drift = params.image.forward(&drift)?;
    banks.image.update(&all, &fv_drift, 0.3)?;
    let ft_drift = params.text.forward(&drift)?;
    banks.text.update(&all, &ft_drift, 0.3)?;
    let indices: Vec<usize> = (0..batch).collect();
    let plan = plan_step(&params, &data, Some(&banks), &indices, &hp, (rng.random(), rng.random()))?;
    Ok(Instance { params, plan, hp })
}

/// Loss value and flattened parameter gradient at `params`.
pub fn loss_and_grad(selector: LossSelector, inst: &Instance, params: &AdapterParams) -> Result<(f64, Vec<f64>)> {
    if selector == LossSelector::Quadratic {
        let theta = params.flatten();
        let center = quadratic_center(&inst.params.flatten());
        let value = theta.iter().zip(&center).map(|(t, c)| 0.5 * (t - c) * (t - c)).sum();
        let grad = theta.iter().zip(&center).map(|(t, c)| t - c).collect();
        return Ok((value, grad));
    }
    let out = evaluate_step(params, &inst.plan, &inst.hp)?;
    let l = &out.losses;
    let value = match selector {
        LossSelector::Itc => l.itc,
        LossSelector::RcB => l.rc_b,
        LossSelector::RcG => l.rc_g,
        LossSelector::RcH => l.rc_h,
        _ => l.total,
    };
    Ok((value, out.grads.flatten()))
}

// Offsets of similar magnitude keep the loss small relative to each
// gradient entry, so differencing is limited only by rounding.
fn quadratic_center(base: &[f64]) -> Vec<f64> {
    base.iter()
        .enumerate()
        .map(|(i, b)| b - 0.05 * (1.0 + (i % 3) as f64 / 2.0) * if i % 2 == 0 { 1.0 } else { -1.0 })
        .collect()
}

/// Result of one check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub selector: LossSelector,
    pub seed: u64,
    pub max_rel_error: f64,
    pub parameters: usize,
    pub loss: f64,
}

impl GradCheckResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn grad_check(selector: LossSelector, instance_seed: u64, tolerance: f64) -> Result<GradCheckResult> {
    grad_check_shape(selector, instance_seed, tolerance, InstanceShape::default(), FD_STEP)
}

/// Largest relative error between analytic and central-difference
/// gradients over every adapter parameter.
pub fn grad_check_shape(
    selector: LossSelector,
    instance_seed: u64,
    tolerance: f64,
    shape: InstanceShape,
    step: f64,
) -> Result<GradCheckResult> {
    if !(tolerance > 0.0) {
        return Err(Error::InvalidConfig(format!("tolerance must be positive, got {tolerance}")));
    }
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("step must be positive, got {step}")));
    }
    let inst = random_instance(selector, instance_seed, shape)?;
    let (loss, analytic) = loss_and_grad(selector, &inst, &inst.params)?;
    let base = inst.params.flatten();
    let mut probe = inst.params.clone();
    let mut theta = base.clone();
    let mut eval = |theta: &[f64]| -> Result<f64> {
        probe.assign(theta);
        Ok(loss_and_grad(selector, &inst, &probe)?.0)
    };
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        theta[i] = base[i] + step;
        let up = eval(&theta)?;
        theta[i] = base[i] - step;
        let down = eval(&theta)?;
        theta[i] = base[i];
        let numeric = (up - down) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(REL_FLOOR);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(GradCheckResult { selector, seed: instance_seed, max_rel_error: max_rel, parameters: base.len(), loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let r = grad_check(LossSelector::Quadratic, 1, 1e-10).unwrap();
        assert!(r.max_rel_error < 1e-10, "{}", r.max_rel_error);
    }

    #[test]
    fn itc_small() {
        let r = grad_check(LossSelector::Itc, 2, 1e-4).unwrap();
        assert!(r.passed(1e-4), "{}", r.max_rel_error);
    }

    #[test]
    fn total_small() {
        let r = grad_check(LossSelector::Total, 3, 1e-4).unwrap();
        assert!(r.passed(1e-4), "{}", r.max_rel_error);
    }

    #[test]
    fn instance_mines_something() {
        let inst = random_instance(LossSelector::Total, 4, InstanceShape::default()).unwrap();
        let g = inst.plan.global.as_ref().unwrap();
        assert!(g.columns.width() > inst.plan.indices.len());
        assert!(!inst.plan.relations.as_ref().unwrap().mined_pairs().is_empty());
    }

    #[test]
    fn rejects_bad_tolerance() {
        assert!(grad_check(LossSelector::Itc, 0, 0.0).is_err());
    }
}
