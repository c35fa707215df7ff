use serde::{Deserialize, Serialize};

use crate::asym_consistency::AsymmetryMode;
use crate::global_assoc::ConfidenceDenominator;
use crate::{Error, Result};

/// Which loss terms take part in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub itc: bool,
    pub lrc: bool,
    pub gsrc: bool,
    pub iascl: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::ALL
    }
}

impl Ablation {
    pub const ALL: Ablation = Ablation { itc: true, lrc: true, gsrc: true, iascl: true };
    pub const NONE: Ablation = Ablation { itc: false, lrc: false, gsrc: false, iascl: false };

    /// Contrastive baseline only.
    pub const BASELINE: Ablation = Ablation { itc: true, ..Ablation::NONE };

    /// Disables each comma-separated module (`itc`, `lrc`, `gsrc`, `iascl`).
    pub fn without(mut self, list: &str) -> Result<Self> {
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "itc" => self.itc = false,
                "lrc" => self.lrc = false,
                "gsrc" => self.gsrc = false,
                "iascl" => self.iascl = false,
                other => {
                    return Err(Error::InvalidConfig(format!("unknown module `{other}`")));
                }
            }
        }
        Ok(self)
    }

    pub fn any(&self) -> bool {
        self.itc || self.lrc || self.gsrc || self.iascl
    }

    /// Short label such as `B+LRC+GSRC`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.itc {
            parts.push("B");
        }
        if self.lrc {
            parts.push("LRC");
        }
        if self.gsrc {
            parts.push("GSRC");
        }
        if self.iascl {
            parts.push("IASCL");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// Every scalar knob of the method and the optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Softmax temperature.
    pub tau: f64,
    /// Similarity threshold for relation mining, in `[-1, 1]`.
    pub th: f64,
    /// Weight of mined off-diagonal relations, in `(0, 1)`.
    pub lambda: f64,
    /// Memory-bank momentum, in `(0, 1]`.
    pub alpha: f64,
    /// Neighbours mined per anchor.
    pub k: usize,
    /// Added to target probabilities inside the log.
    pub eps: f64,
    /// Masking ratio of the asymmetric views, in `[0, 1)`.
    pub rho: f64,
    pub jitter_sigma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub confidence_denominator: ConfidenceDenominator,
    pub asymmetry: AsymmetryMode,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            tau: 0.02,
            th: 0.7,
            lambda: 0.5,
            alpha: 0.2,
            k: 8,
            eps: 1e-8,
            rho: 0.5,
            jitter_sigma: 0.05,
            batch_size: 24,
            epochs: 15,
            lr_start: 1e-4,
            lr_peak: 5e-3,
            warmup_epochs: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            weight_decay: 0.0,
            seed: 7,
            ablation: Ablation::ALL,
            confidence_denominator: ConfidenceDenominator::ExcludeSelf,
            asymmetry: AsymmetryMode::Both,
        }
    }
}

impl HyperParams {
    /// Full-scale settings: batches of 64, 40 epochs, 5-epoch warm-up from
    /// 1e-6 to 1e-5.
    pub fn full_scale() -> Self {
        HyperParams {
            batch_size: 64,
            epochs: 40,
            lr_start: 1e-6,
            lr_peak: 1e-5,
            warmup_epochs: 5,
            ..HyperParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(-1.0..=1.0).contains(&self.th) {
            return bad(format!("th must lie in [-1, 1], got {}", self.th));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad(format!("lambda must lie in (0, 1), got {}", self.lambda));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return bad(format!("eps must lie in (0, 1), got {}", self.eps));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return bad(format!("jitter_sigma must be non-negative, got {}", self.jitter_sigma));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.lr_start >= 0.0 && self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            return bad("learning rates must be non-negative".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.eps_opt > 0.0) {
            return bad(format!("eps_opt must be positive, got {}", self.eps_opt));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }
}
