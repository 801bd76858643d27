//! Verification and identification metrics: TAR@FAR, ROC AUC, rank-N
//! accuracy and open-set TPIR@FPIR.
//!
//! Thresholding is rank-based and conservative: a FAR level is met by the
//! step-function ROC without interpolation, and open-set thresholds are the
//! minimal value keeping the false positive identification rate within the
//! level.

use std::collections::HashMap;

use crate::attention::{forward, AttentionParams};
use crate::pool::{avg_pool, l2_normalize, max_pool, nan_aggregate, NanParams};
use crate::synth::LabeledCorpus;
use crate::types::{FeatureSet, FeatureVector};
use crate::{Error, Result};

/// Which aggregator turns a set into a template. Templates are always
/// L2-normalized before scoring.
#[derive(Debug, Clone)]
pub enum Aggregator {
    Average,
    Max,
    FrameLevel(NanParams),
    DimensionWise(AttentionParams),
}

impl Aggregator {
    pub fn template(&self, s: &FeatureSet) -> Result<FeatureVector> {
        match self {
            Aggregator::Average => l2_normalize(&avg_pool(s)),
            Aggregator::Max => l2_normalize(&max_pool(s)),
            Aggregator::FrameLevel(p) => l2_normalize(&nan_aggregate(s, p)?),
            Aggregator::DimensionWise(p) => forward(s, p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    L2,
}

/// Similarity score; higher means more similar for both metrics
/// (L2 distance is negated).
pub fn score(a: &FeatureVector, b: &FeatureVector, metric: Metric) -> Result<f64> {
    let dot = a.dot(b)?;
    match metric {
        Metric::Cosine => Ok(dot),
        Metric::L2 => {
            let dist2: f64 = a
                .values()
                .iter()
                .zip(b.values())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            Ok(-dist2.sqrt())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairList {
    pub pairs: Vec<(String, String, bool)>,
}

impl PairList {
    pub fn new(pairs: Vec<(String, String, bool)>) -> Result<Self> {
        let has_pos = pairs.iter().any(|(_, _, same)| *same);
        let has_neg = pairs.iter().any(|(_, _, same)| !*same);
        if !has_pos || !has_neg {
            return Err(Error::DegeneratePairs);
        }
        Ok(Self { pairs })
    }

    /// All pairs between distinct sets of a corpus, labeled by identity.
    pub fn exhaustive(corpus: &LabeledCorpus) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, a) in corpus.sets.iter().enumerate() {
            for b in &corpus.sets[i + 1..] {
                pairs.push((a.set_id.clone(), b.set_id.clone(), a.label == b.label));
            }
        }
        Self::new(pairs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// (FAR level, TAR) sorted by level.
    pub tar_at_far: Vec<(f64, f64)>,
    pub auc: f64,
    /// (N, rank-N accuracy) sorted by N.
    pub rank_n: Vec<(usize, f64)>,
    /// (FPIR level, TPIR) sorted by level.
    pub tpir_at_fpir: Vec<(f64, f64)>,
}

impl EvalReport {
    /// TAR must be nondecreasing in FAR and rank-N nondecreasing in N.
    pub fn check_monotone(&self) -> Result<()> {
        for w in self.tar_at_far.windows(2) {
            if w[1].1 < w[0].1 - 1e-12 {
                return Err(Error::CountMismatch(format!(
                    "TAR not monotone: {:?} then {:?}",
                    w[0], w[1]
                )));
            }
        }
        for w in self.rank_n.windows(2) {
            if w[1].1 < w[0].1 - 1e-12 {
                return Err(Error::CountMismatch(format!(
                    "rank-N not monotone: {:?} then {:?}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    /// Line-oriented `metric<TAB>value` output.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (far, tar) in &self.tar_at_far {
            out.push_str(&format!("tar_at_far_{far}\t{tar:.6}\n"));
        }
        if !self.tar_at_far.is_empty() {
            out.push_str(&format!("auc\t{:.6}\n", self.auc));
        }
        for (n, acc) in &self.rank_n {
            out.push_str(&format!("rank_{n}\t{acc:.6}\n"));
        }
        for (fpir, tpir) in &self.tpir_at_fpir {
            out.push_str(&format!("tpir_at_fpir_{fpir}\t{tpir:.6}\n"));
        }
        out
    }
}

fn templates_by_id(
    corpus: &LabeledCorpus,
    aggregator: &Aggregator,
) -> Result<HashMap<String, FeatureVector>> {
    let mut out = HashMap::new();
    for s in &corpus.sets {
        out.insert(s.set_id.clone(), aggregator.template(s)?);
    }
    Ok(out)
}

/// Positive and negative pair scores for a pair list.
pub fn pair_scores(
    corpus: &LabeledCorpus,
    pairs: &PairList,
    aggregator: &Aggregator,
    metric: Metric,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let templates = templates_by_id(corpus, aggregator)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (a, b, same) in &pairs.pairs {
        let ta = templates
            .get(a)
            .ok_or_else(|| Error::UnknownSetId(a.clone()))?;
        let tb = templates
            .get(b)
            .ok_or_else(|| Error::UnknownSetId(b.clone()))?;
        let s = score(ta, tb, metric)?;
        if *same {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    Ok((pos, neg))
}

/// TAR@FAR over the step-function ROC: for each level, the best true accept
/// rate over thresholds whose false accept rate does not exceed the level.
pub fn tar_at_far_from_scores(pos: &[f64], neg: &[f64], far_levels: &[f64]) -> Vec<(f64, f64)> {
    // candidate thresholds: every observed score, plus one below the minimum
    let mut candidates: Vec<f64> = pos.iter().chain(neg).cloned().collect();
    let min = candidates.iter().cloned().fold(f64::INFINITY, f64::min);
    candidates.push(min - 1.0);
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();

    let rate_above = |scores: &[f64], t: f64| {
        scores.iter().filter(|&&s| s > t).count() as f64 / scores.len() as f64
    };
    far_levels
        .iter()
        .map(|&level| {
            let tar = candidates
                .iter()
                .filter(|&&t| rate_above(neg, t) <= level)
                .map(|&t| rate_above(pos, t))
                .fold(0.0, f64::max);
            (level, tar)
        })
        .collect()
}

/// ROC AUC by trapezoidal integration over the full sweep.
pub fn auc_from_scores(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut auc = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / np;
        let fpr = fp as f64 / nn;
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    auc
}

/// Verification: TAR at each FAR level plus ROC AUC.
pub fn verify(
    corpus: &LabeledCorpus,
    pairs: &PairList,
    aggregator: &Aggregator,
    metric: Metric,
    far_levels: &[f64],
) -> Result<(Vec<(f64, f64)>, f64)> {
    let (pos, neg) = pair_scores(corpus, pairs, aggregator, metric)?;
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::DegeneratePairs);
    }
    Ok((
        tar_at_far_from_scores(&pos, &neg, far_levels),
        auc_from_scores(&pos, &neg),
    ))
}

/// 1:N identification against a gallery of one template per identity.
///
/// Rank-N counts a mated probe as hit when at most N-1 gallery scores
/// strictly exceed the true identity's score. Open-set TPIR@FPIR uses the
/// minimal threshold keeping the fraction of non-mated probes whose top
/// score passes it within the FPIR level.
pub fn identify(
    gallery: &[FeatureSet],
    probes: &[FeatureSet],
    aggregator: &Aggregator,
    metric: Metric,
    rank_levels: &[usize],
    fpir_levels: &[f64],
) -> Result<(Vec<(usize, f64)>, Vec<(f64, f64)>)> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let gallery_templates: Vec<(u32, FeatureVector)> = gallery
        .iter()
        .map(|s| Ok((s.label, aggregator.template(s)?)))
        .collect::<Result<_>>()?;
    let gallery_labels: std::collections::BTreeSet<u32> =
        gallery_templates.iter().map(|(l, _)| *l).collect();

    struct ProbeResult {
        mated: bool,
        true_score: Option<f64>,
        top_score: f64,
        top_is_true: bool,
        rank: Option<usize>,
    }

    let mut results = Vec::with_capacity(probes.len());
    for probe in probes {
        let t = aggregator.template(probe)?;
        let scores: Vec<(u32, f64)> = gallery_templates
            .iter()
            .map(|(l, g)| Ok((*l, score(&t, g, metric)?)))
            .collect::<Result<_>>()?;
        let top_score = scores
            .iter()
            .map(|(_, s)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let mated = gallery_labels.contains(&probe.label);
        let true_score = scores
            .iter()
            .find(|(l, _)| *l == probe.label)
            .map(|(_, s)| *s);
        let rank = true_score
            .map(|ts| 1 + scores.iter().filter(|(_, s)| *s > ts).count());
        let top_is_true = true_score.map(|ts| ts >= top_score).unwrap_or(false);
        results.push(ProbeResult {
            mated,
            true_score,
            top_score,
            top_is_true,
            rank,
        });
    }

    let mated: Vec<&ProbeResult> = results.iter().filter(|r| r.mated).collect();
    let nonmated: Vec<&ProbeResult> = results.iter().filter(|r| !r.mated).collect();

    let rank_n: Vec<(usize, f64)> = rank_levels
        .iter()
        .map(|&n| {
            let hits = mated
                .iter()
                .filter(|r| r.rank.map(|rk| rk <= n).unwrap_or(false))
                .count();
            (n, hits as f64 / mated.len().max(1) as f64)
        })
        .collect();

    // candidate thresholds: below everything, plus each non-mated top score
    let mut candidates = vec![f64::NEG_INFINITY];
    candidates.extend(nonmated.iter().map(|r| r.top_score));
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let fpir_of = |t: f64| {
        if nonmated.is_empty() {
            0.0
        } else {
            nonmated.iter().filter(|r| r.top_score > t).count() as f64 / nonmated.len() as f64
        }
    };
    let tpir_at_fpir: Vec<(f64, f64)> = fpir_levels
        .iter()
        .map(|&level| {
            let threshold = candidates
                .iter()
                .cloned()
                .find(|&t| fpir_of(t) <= level)
                .unwrap_or(f64::INFINITY);
            let hits = mated
                .iter()
                .filter(|r| {
                    r.top_is_true && r.true_score.map(|ts| ts > threshold).unwrap_or(false)
                })
                .count();
            (level, hits as f64 / mated.len().max(1) as f64)
        })
        .collect();

    Ok((rank_n, tpir_at_fpir))
}
