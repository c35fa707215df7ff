use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adapter::{AdapterParams, ParamGrads};
use super::hyper::HyperParams;
use super::optim::{Adam, LrSchedule};
use crate::asym_consistency::{batch_seed, mix_seed, perturb_matrix, total_loss, LossBundle, PerturbConfig};
use crate::emb_store::{DatasetBundle, Modality};
use crate::eval_metrics::{evaluate_retrieval, MetricsReport, MinedCandidates, MinedRelations, PairTally};
use crate::global_assoc::{
    global_sdm_loss, global_targets, mine_candidates, CandidateSets, ColumnPlan, ExtendedSimilarity,
    GlobalTargetMatrix, MemoryBank,
};
use crate::local_assoc::{
    itc_loss, local_relations, sdm_loss, soften_targets, target_distribution, AssociationMatrix, LossWithGrad,
    TargetDistribution,
};
use crate::matrix::Matrix;
use crate::{Error, Result};

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const IMAGE_STREAM: u64 = 1;
const TEXT_STREAM: u64 = 2;

/// Base embeddings in `f64`, rows renormalized, with optional augmented views.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub images: Matrix,
    pub texts: Matrix,
    pub aug_images: Option<Matrix>,
    pub aug_texts: Option<Matrix>,
    pub labels: Vec<u32>,
}

impl TrainData {
    pub fn from_bundle(bundle: &DatasetBundle) -> Result<Self> {
        let norm = |m: &crate::emb_store::EmbeddingMatrix| m.to_matrix().normalize_rows();
        Ok(TrainData {
            images: norm(&bundle.images)?,
            texts: norm(&bundle.texts)?,
            aug_images: bundle.aug_images.as_ref().map(norm).transpose()?,
            aug_texts: bundle.aug_texts.as_ref().map(norm).transpose()?,
            labels: bundle.labels.0.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.images.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }
}

/// Image and text memory banks.
#[derive(Clone, Debug, PartialEq)]
pub struct Banks {
    pub image: MemoryBank,
    pub text: MemoryBank,
}

impl Banks {
    pub fn from_params(params: &AdapterParams, data: &TrainData) -> Result<Self> {
        Ok(Banks {
            image: MemoryBank::new(&params.image.forward(&data.images)?, Modality::Image)?,
            text: MemoryBank::new(&params.text.forward(&data.texts)?, Modality::Text)?,
        })
    }

    fn update(&mut self, indices: &[usize], fv: &Matrix, ft: &Matrix, alpha: f64) -> Result<()> {
        self.image.update(indices, fv, alpha)?;
        self.text.update(indices, ft, alpha)
    }
}

/// Frozen global-stage state for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalPlan {
    pub candidates: CandidateSets,
    pub columns: ColumnPlan,
    pub targets: GlobalTargetMatrix,
}

/// Everything about a step that is held constant while differentiating:
/// batch inputs, perturbed views, mined relations and target distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub indices: Vec<usize>,
    pub xv: Matrix,
    pub xt: Matrix,
    pub relations: Option<AssociationMatrix>,
    pub local: Option<TargetDistribution>,
    pub global: Option<GlobalPlan>,
    /// Perturbed inputs and their consistency targets.
    pub asym: Option<(Matrix, Matrix, TargetDistribution)>,
}

fn relation_targets(fv: &Matrix, ft: &Matrix, hp: &HyperParams) -> Result<(AssociationMatrix, TargetDistribution)> {
    let rel = local_relations(fv, ft, hp.th)?;
    let q = target_distribution(&soften_targets(&rel, hp.lambda)?)?;
    Ok((rel, q))
}

/// Chooses the asymmetric view of one modality: the shipped augmented rows
/// if present, otherwise a seeded synthetic perturbation.
fn asymmetric_view(x: &Matrix, aug: Option<&Matrix>, indices: &[usize], rho: f64, jitter: f64, seed: u64) -> Result<Matrix> {
    match aug {
        Some(a) => Ok(a.select_rows(indices)),
        None => perturb_matrix(x, &PerturbConfig { mask_ratio: rho, jitter_sigma: jitter, seed }),
    }
}

/// Builds the frozen part of a step at the current parameters.
/// `seeds` are the image and text perturbation seeds.
pub fn plan_step(
    params: &AdapterParams,
    data: &TrainData,
    banks: Option<&Banks>,
    indices: &[usize],
    hp: &HyperParams,
    seeds: (u64, u64),
) -> Result<StepPlan> {
    let xv = data.images.select_rows(indices);
    let xt = data.texts.select_rows(indices);
    let ab = hp.ablation;
    let (mut relations, mut local, mut global, mut asym) = (None, None, None, None);
    if ab.lrc || ab.gsrc {
        let fv = params.image.forward(&xv)?;
        let ft = params.text.forward(&xt)?;
        if ab.lrc {
            let (rel, q) = relation_targets(&fv, &ft, hp)?;
            relations = Some(rel);
            local = Some(q);
        }
        if ab.gsrc {
            let banks = banks.ok_or(Error::BankEmpty)?;
            let candidates = mine_candidates(&fv, &banks.image, hp.k, hp.th, indices)?;
            let columns = ColumnPlan::new(&candidates, indices, &banks.image, &banks.text)?;
            let ext = ExtendedSimilarity::new(columns.clone(), &fv, &ft)?;
            let targets = global_targets(&ext, hp.confidence_denominator);
            global = Some(GlobalPlan { candidates, columns, targets });
        }
    }
    if ab.iascl {
        let xv_p = if hp.asymmetry.perturbs_images() {
            asymmetric_view(&xv, data.aug_images.as_ref(), indices, hp.rho, hp.jitter_sigma, seeds.0)?
        } else {
            xv.clone()
        };
        let xt_p = if hp.asymmetry.perturbs_texts() {
            asymmetric_view(&xt, data.aug_texts.as_ref(), indices, hp.rho, hp.jitter_sigma, seeds.1)?
        } else {
            xt.clone()
        };
        let fv_p = params.image.forward(&xv_p)?;
        let ft_p = params.text.forward(&xt_p)?;
        let (_, q) = relation_targets(&fv_p, &ft_p, hp)?;
        asym = Some((xv_p, xt_p, q));
    }
    Ok(StepPlan { indices: indices.to_vec(), xv, xt, relations, local, global, asym })
}

/// Loss values, parameter gradients and the clean batch features.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub losses: LossBundle,
    pub grads: ParamGrads,
    pub fv: Matrix,
    pub ft: Matrix,
}

/// Evaluates all enabled losses at `params` under a frozen plan.
pub fn evaluate_step(params: &AdapterParams, plan: &StepPlan, hp: &HyperParams) -> Result<StepOutput> {
    let (b, d) = (plan.indices.len(), params.dim());
    let cv = params.image.forward_cached(&plan.xv)?;
    let ct = params.text.forward_cached(&plan.xt)?;
    let (fv, ft) = (&cv.out, &ct.out);
    let zero = || LossWithGrad::zero(b, d);

    let itc = if hp.ablation.itc { itc_loss(fv, ft, hp.tau)? } else { zero() };
    let rc_b = match &plan.local {
        Some(q) => sdm_loss(fv, ft, q, hp.tau, hp.eps)?,
        None => zero(),
    };
    let rc_g = match &plan.global {
        Some(g) => {
            let ext = ExtendedSimilarity::new(g.columns.clone(), fv, ft)?;
            global_sdm_loss(&ext, &g.targets, hp.tau, hp.eps)?
        }
        None => zero(),
    };
    let mut pert_caches = None;
    let rc_h = match &plan.asym {
        Some((xv_p, xt_p, q)) => {
            let cvp = params.image.forward_cached(xv_p)?;
            let ctp = params.text.forward_cached(xt_p)?;
            let l = sdm_loss(&cvp.out, &ctp.out, q, hp.tau, hp.eps)?;
            pert_caches = Some((cvp, ctp));
            l
        }
        None => zero(),
    };
    let losses = total_loss(&itc, &rc_b, &rc_g, &rc_h)?;
    let g = losses.grads.as_ref().expect("total_loss fills gradients");
    let mut grads = ParamGrads {
        image: params.image.backward(&plan.xv, &cv, &g.grad_v)?,
        text: params.text.backward(&plan.xt, &ct, &g.grad_t)?,
    };
    if let (Some((xv_p, xt_p, _)), Some((cvp, ctp))) = (&plan.asym, &pert_caches) {
        grads.image.add_assign(&params.image.backward(xv_p, cvp, &g.grad_v_pert)?);
        grads.text.add_assign(&params.text.backward(xt_p, ctp, &g.grad_t_pert)?);
    }
    Ok(StepOutput { losses, grads, fv: cv.out, ft: ct.out })
}

/// Mean loss terms and mining statistics for one epoch (1-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub itc: f64,
    pub rc_b: f64,
    pub rc_g: f64,
    pub rc_h: f64,
    pub total: f64,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    /// Percentage of correct pairs among those mined during the epoch;
    /// `None` if nothing was mined.
    pub association_precision: Option<f64>,
    pub mined_pairs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub hyper: HyperParams,
    pub samples: usize,
    pub dim: usize,
    pub steps: u64,
    pub epochs: Vec<EpochRecord>,
    /// Whether the metrics below come from a separate evaluation set rather
    /// than the training data.
    pub separate_eval: bool,
    /// Metrics of the freshly initialized adapters.
    pub baseline: MetricsReport,
    pub final_metrics: MetricsReport,
}

impl TrainReport {
    pub fn precision_series(&self) -> Vec<Option<f64>> {
        self.epochs.iter().map(|e| e.association_precision).collect()
    }

    pub fn total_series(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.total).collect()
    }
}

/// Word position and stream of the shuffling generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub params: AdapterParams,
    pub banks: Option<Banks>,
    pub rng: RngState,
}

/// Mines every sample against a bank of image features and tallies pair
/// correctness. Uses `bank` if given, else the current adapter outputs.
pub fn mine_dataset(
    params: &AdapterParams,
    data: &TrainData,
    bank: Option<&MemoryBank>,
    hp: &HyperParams,
) -> Result<(CandidateSets, PairTally)> {
    let fv = params.image.forward(&data.images)?;
    let owned;
    let bank = match bank {
        Some(b) => b,
        None => {
            owned = MemoryBank::new(&fv, Modality::Image)?;
            &owned
        }
    };
    let all: Vec<usize> = (0..data.len()).collect();
    let cands = mine_candidates(&fv, bank, hp.k, hp.th, &all)?;
    let mut tally = PairTally::default();
    tally.add(&MinedCandidates { sets: &cands, self_indices: &all }, &data.labels);
    Ok((cands, tally))
}

/// Retrieval metrics of `params` over the whole dataset, plus dataset-wide
/// mining precision.
pub fn evaluate_params(params: &AdapterParams, data: &TrainData, hp: &HyperParams) -> Result<MetricsReport> {
    let fv = params.image.forward(&data.images)?;
    let ft = params.text.forward(&data.texts)?;
    let (_, tally) = mine_dataset(params, data, None, hp)?;
    evaluate_retrieval(&fv, &ft, &data.labels, tally.precision().ok())
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n / batch + usize::from(n % batch >= 2)
}

/// Runs the full training loop, reporting metrics on the training data.
pub fn train(bundle: &DatasetBundle, hp: &HyperParams) -> Result<TrainOutcome> {
    train_with_eval(bundle, None, hp)
}

/// Runs the full training loop; baseline and final metrics are computed on
/// `eval` when given.
pub fn train_with_eval(bundle: &DatasetBundle, eval: Option<&DatasetBundle>, hp: &HyperParams) -> Result<TrainOutcome> {
    hp.validate()?;
    let data = TrainData::from_bundle(bundle)?;
    let eval = eval.map(TrainData::from_bundle).transpose()?;
    train_data(&data, eval.as_ref(), hp)
}

pub fn train_data(data: &TrainData, eval: Option<&TrainData>, hp: &HyperParams) -> Result<TrainOutcome> {
    hp.validate()?;
    let (n, d) = (data.len(), data.dim());
    if n < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 samples, got {n}")));
    }
    if let Some(e) = eval {
        if e.dim() != d {
            return Err(Error::DimensionMismatch(format!("training dim {d} vs evaluation dim {}", e.dim())));
        }
    }
    let eval_data = eval.unwrap_or(data);
    let mut params = AdapterParams::init(d, hp.seed);
    let baseline = evaluate_params(&params, eval_data, hp)?;
    let mut banks = if hp.ablation.gsrc { Some(Banks::from_params(&params, data)?) } else { None };

    let shuffle_seed = mix_seed(&[hp.seed, SHUFFLE_STREAM]);
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let batch = hp.batch_size.min(n);
    let sched = LrSchedule::new(hp.lr_start, hp.lr_peak, hp.warmup_epochs, hp.epochs, steps_per_epoch(n, batch));
    let mut flat = params.flatten();
    let mut opt = Adam::new(flat.len(), hp.beta1, hp.beta2, hp.eps_opt);
    opt.weight_decay = hp.weight_decay;

    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(hp.epochs);
    let mut step = 0u64;
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        let mut tally = PairTally::default();
        let mut steps = 0usize;
        let mut lr = sched.at(step);
        for (bi, chunk) in order.chunks(batch).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            lr = sched.at(step);
            let seeds = (
                batch_seed(hp.seed, epoch as u64, bi as u64, IMAGE_STREAM),
                batch_seed(hp.seed, epoch as u64, bi as u64, TEXT_STREAM),
            );
            let plan = plan_step(&params, data, banks.as_ref(), chunk, hp, seeds)?;
            let out = evaluate_step(&params, &plan, hp)?;
            if let Some(g) = &plan.global {
                tally.add(&MinedCandidates { sets: &g.candidates, self_indices: chunk }, &data.labels);
            } else if let Some(rel) = &plan.relations {
                tally.add(&MinedRelations { relations: rel, batch_indices: chunk }, &data.labels);
            }
            let l = &out.losses;
            for (s, v) in sums.iter_mut().zip([l.itc, l.rc_b, l.rc_g, l.rc_h, l.total]) {
                *s += v;
            }
            if hp.ablation.any() {
                opt.step(&mut flat, &out.grads.flatten(), lr)?;
                params.assign(&flat);
                if !params.is_finite() {
                    return Err(Error::NonFiniteTerm("adapter parameters"));
                }
            }
            if let Some(banks) = banks.as_mut() {
                banks.update(chunk, &out.fv, &out.ft, hp.alpha)?;
            }
            steps += 1;
            step += 1;
        }
        if let Some(banks) = banks.as_mut() {
            banks.image.advance_epoch();
            banks.text.advance_epoch();
        }
        let m = steps.max(1) as f64;
        records.push(EpochRecord {
            epoch: epoch + 1,
            steps,
            itc: sums[0] / m,
            rc_b: sums[1] / m,
            rc_g: sums[2] / m,
            rc_h: sums[3] / m,
            total: sums[4] / m,
            lr,
            association_precision: tally.precision().ok(),
            mined_pairs: tally.total,
        });
    }
    let final_metrics = evaluate_params(&params, eval_data, hp)?;
    Ok(TrainOutcome {
        report: TrainReport {
            hyper: hp.clone(),
            samples: n,
            dim: d,
            steps: step,
            epochs: records,
            separate_eval: eval.is_some(),
            baseline,
            final_metrics,
        },
        params,
        banks,
        rng: RngState::capture(shuffle_seed, &rng),
    })
}
