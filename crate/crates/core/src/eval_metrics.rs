//! Retrieval ranking, CMC / mAP / mINP, and mined-pair association precision.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::global_assoc::CandidateSets;
use crate::local_assoc::AssociationMatrix;
use crate::matrix::{by_score_desc, dot, Matrix};
use crate::{Error, Result};

/// Per query, the gallery sorted by descending cosine similarity (ties go to
/// the lower gallery index) and whether each ranked item is relevant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingResult {
    pub order: Vec<Vec<usize>>,
    pub relevant: Vec<Vec<bool>>,
}

impl RankingResult {
    pub fn num_queries(&self) -> usize {
        self.order.len()
    }

    pub fn gallery_len(&self) -> usize {
        self.order.first().map_or(0, Vec::len)
    }

    fn check_relevant(&self) -> Result<()> {
        match self.relevant.iter().position(|r| !r.contains(&true)) {
            Some(q) => Err(Error::NoRelevant(q)),
            None => Ok(()),
        }
    }
}

pub fn rank_gallery(
    queries: &Matrix,
    gallery: &Matrix,
    query_labels: &[u32],
    gallery_labels: &[u32],
) -> Result<RankingResult> {
    rank_gallery_with(queries, gallery, query_labels, gallery_labels, Exec::default())
}

pub fn rank_gallery_with(
    queries: &Matrix,
    gallery: &Matrix,
    query_labels: &[u32],
    gallery_labels: &[u32],
    exec: Exec,
) -> Result<RankingResult> {
    if queries.cols() != gallery.cols() {
        return Err(Error::DimensionMismatch(format!(
            "query dim {} vs gallery dim {}",
            queries.cols(),
            gallery.cols()
        )));
    }
    if query_labels.len() != queries.rows() || gallery_labels.len() != gallery.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} query labels for {} queries, {} gallery labels for {} items",
            query_labels.len(),
            queries.rows(),
            gallery_labels.len(),
            gallery.rows()
        )));
    }
    let order = exec.map_range(queries.rows(), |q| {
        let qrow = queries.row(q);
        let mut scored: Vec<(f64, usize)> = gallery.row_iter().map(|g| dot(qrow, g)).zip(0usize..).collect();
        scored.sort_by(by_score_desc);
        scored.into_iter().map(|(_, g)| g).collect::<Vec<_>>()
    });
    let relevant = order
        .iter()
        .zip(query_labels)
        .map(|(o, &ql)| o.iter().map(|&g| gallery_labels[g] == ql).collect())
        .collect();
    Ok(RankingResult { order, relevant })
}

/// Rank-k percentage for each requested `k` (k at or beyond the gallery
/// size counts every query).
pub fn cmc(r: &RankingResult, ks: &[usize]) -> Result<Vec<f64>> {
    r.check_relevant()?;
    let first: Vec<usize> = r
        .relevant
        .iter()
        .map(|rel| rel.iter().position(|&x| x).expect("checked"))
        .collect();
    let n = first.len().max(1) as f64;
    Ok(ks
        .iter()
        .map(|&k| 100.0 * first.iter().filter(|&&p| p < k).count() as f64 / n)
        .collect())
}

pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, _) in relevant.iter().enumerate().filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (pos + 1) as f64;
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Relevant count divided by the 1-based rank of the last relevant item.
pub fn inverse_negative_penalty(relevant: &[bool]) -> f64 {
    match relevant.iter().rposition(|&x| x) {
        Some(last) => relevant.iter().filter(|&&x| x).count() as f64 / (last + 1) as f64,
        None => 0.0,
    }
}

pub fn mean_ap(r: &RankingResult) -> Result<f64> {
    r.check_relevant()?;
    Ok(mean_percent(r.relevant.iter().map(|x| average_precision(x))))
}

pub fn mean_inp(r: &RankingResult) -> Result<f64> {
    r.check_relevant()?;
    Ok(mean_percent(r.relevant.iter().map(|x| inverse_negative_penalty(x))))
}

fn mean_percent(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len().max(1) as f64;
    100.0 * values.sum::<f64>() / n
}

/// Mined pairs in a form association precision can score: `(a, b)` dataset
/// indices asserted to share an identity.
pub trait MinedPairs {
    fn pairs(&self) -> Vec<(usize, usize)>;
}

/// Candidate sets together with the dataset index of each batch row.
pub struct MinedCandidates<'a> {
    pub sets: &'a CandidateSets,
    pub self_indices: &'a [usize],
}

impl MinedPairs for MinedCandidates<'_> {
    fn pairs(&self) -> Vec<(usize, usize)> {
        self.sets.mined_pairs(self.self_indices).collect()
    }
}

/// In-batch relation matrix together with the dataset index of each batch row.
pub struct MinedRelations<'a> {
    pub relations: &'a AssociationMatrix,
    pub batch_indices: &'a [usize],
}

impl MinedPairs for MinedRelations<'_> {
    fn pairs(&self) -> Vec<(usize, usize)> {
        self.relations
            .mined_pairs()
            .into_iter()
            .map(|(i, j)| (self.batch_indices[i], self.batch_indices[j]))
            .collect()
    }
}

/// Correct and total counts of mined pairs; precision is `correct / total`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairTally {
    pub correct: u64,
    pub total: u64,
}

impl PairTally {
    pub fn add(&mut self, mined: &impl MinedPairs, labels: &[u32]) {
        for (a, b) in mined.pairs() {
            self.total += 1;
            self.correct += u64::from(labels[a] == labels[b]);
        }
    }

    pub fn merge(&mut self, other: PairTally) {
        self.correct += other.correct;
        self.total += other.total;
    }

    pub fn precision(&self) -> Result<f64> {
        if self.total == 0 {
            Err(Error::NothingMined)
        } else {
            Ok(100.0 * self.correct as f64 / self.total as f64)
        }
    }
}

/// Percentage of mined non-self pairs whose identities agree.
pub fn association_precision(mined: &impl MinedPairs, labels: &[u32]) -> Result<f64> {
    let mut t = PairTally::default();
    t.add(mined, labels);
    t.precision()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub minp: f64,
}

impl DirectionMetrics {
    pub fn from_ranking(r: &RankingResult) -> Result<Self> {
        let ranks = cmc(r, &[1, 5, 10])?;
        Ok(DirectionMetrics {
            rank1: ranks[0],
            rank5: ranks[1],
            rank10: ranks[2],
            map: mean_ap(r)?,
            minp: mean_inp(r)?,
        })
    }
}

/// Text-to-image (primary) and image-to-text retrieval metrics, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub minp: f64,
    /// `None` when nothing was mined.
    pub association_precision: Option<f64>,
    pub image_to_text: DirectionMetrics,
}

impl MetricsReport {
    pub fn text_to_image(&self) -> DirectionMetrics {
        DirectionMetrics {
            rank1: self.rank1,
            rank5: self.rank5,
            rank10: self.rank10,
            map: self.map,
            minp: self.minp,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    /// Fixed-width table with one row per retrieval direction.
    pub fn to_table(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14}{:>8}{:>8}{:>8}{:>8}{:>8}", "direction", "R1", "R5", "R10", "mAP", "mINP")?;
        for (name, m) in [("text->image", self.text_to_image()), ("image->text", self.image_to_text)] {
            writeln!(
                f,
                "{:<14}{:>8.2}{:>8.2}{:>8.2}{:>8.2}{:>8.2}",
                name, m.rank1, m.rank5, m.rank10, m.map, m.minp
            )?;
        }
        match self.association_precision {
            Some(p) => writeln!(f, "association precision: {p:.2}"),
            None => writeln!(f, "association precision: n/a (nothing mined)"),
        }
    }
}

/// Evaluates both retrieval directions over one labelled set of paired
/// image and text features.
pub fn evaluate_retrieval(
    images: &Matrix,
    texts: &Matrix,
    labels: &[u32],
    association_precision: Option<f64>,
) -> Result<MetricsReport> {
    let t2i = DirectionMetrics::from_ranking(&rank_gallery(texts, images, labels, labels)?)?;
    let i2t = DirectionMetrics::from_ranking(&rank_gallery(images, texts, labels, labels)?)?;
    Ok(MetricsReport {
        rank1: t2i.rank1,
        rank5: t2i.rank5,
        rank10: t2i.rank10,
        map: t2i.map,
        minp: t2i.minp,
        association_precision,
        image_to_text: i2t,
    })
}
