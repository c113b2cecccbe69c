//! Selection policies for promoting pseudo-labeled target samples:
//! confidence ranking, and kNN-consistency filtering over feature space.
//!
//! The policy logic is implemented over precomputed posterior rows and
//! feature matrices (`rank_candidates`, `confidence_select_core`,
//! `knn_select_core`) so tests can drive it directly; the model-facing
//! wrappers compute features and posteriors batched per iteration.

use crate::error::{Error, Result};
use crate::model::{argmax, DannModel};
use crate::trainer::{LabeledDataset, UnlabeledDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyTag {
    Confidence,
    Knn,
}

impl PolicyTag {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "confidence" => Ok(PolicyTag::Confidence),
            "knn" => Ok(PolicyTag::Knn),
            other => Err(Error::Config(format!("unknown policy: {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolicyTag::Confidence => "confidence",
            PolicyTag::Knn => "knn",
        }
    }
}

/// A target sample with its pseudo-label (argmax of the posterior) and
/// confidence (the probability of that label).
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub sample_id: u64,
    pub pseudo_label: usize,
    pub confidence: f64,
}

/// The chosen subset, in confidence-sorted order.
#[derive(Debug, Clone)]
pub struct SelectionBatch {
    pub candidates: Vec<Candidate>,
    pub policy: PolicyTag,
    pub iteration: usize,
    pub requested: usize,
    /// True when the anti-stall path forced a promotion.
    pub forced: bool,
}

impl SelectionBatch {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Source feature rows with aligned labels, queried by the kNN policy.
#[derive(Debug, Clone)]
pub struct FeatureIndex {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl FeatureIndex {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Precondition(format!(
                "feature index has {} rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("feature index contains non-finite entries".into()));
        }
        Ok(FeatureIndex { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Build from a model and its current labeled set: `F_S = G_f(S)`.
    pub fn from_model(model: &DannModel, source: &LabeledDataset) -> Result<Self> {
        let mut features = Vec::with_capacity(source.len());
        let mut labels = Vec::with_capacity(source.len());
        for s in &source.samples {
            features.push(model.features(&s.x)?.into_data());
            labels.push(s.y);
        }
        FeatureIndex::new(features, labels)
    }
}

/// Candidates for every target sample, sorted by confidence descending,
/// ties broken by ascending sample id.
pub fn rank_candidates(ids: &[u64], posterior_rows: &[Vec<f64>]) -> Result<Vec<Candidate>> {
    if ids.len() != posterior_rows.len() {
        return Err(Error::Precondition(format!(
            "{} ids vs {} posterior rows",
            ids.len(),
            posterior_rows.len()
        )));
    }
    let mut out: Vec<Candidate> = ids
        .iter()
        .zip(posterior_rows)
        .map(|(&sample_id, row)| {
            let pseudo_label = argmax(row);
            Candidate {
                sample_id,
                pseudo_label,
                confidence: row[pseudo_label],
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .expect("confidences are finite")
            .then(a.sample_id.cmp(&b.sample_id))
    });
    Ok(out)
}

/// Top `p_count` of the ranked candidates.
pub fn confidence_select_core(ranked: &[Candidate], p_count: usize) -> Vec<Candidate> {
    ranked[..p_count.min(ranked.len())].to_vec()
}

/// k nearest source rows by squared Euclidean distance (distance ties by
/// ascending row id); returns the majority label (ties by lowest label
/// index) and how many of the k neighbors carry it.
pub fn knn_query(query: &[f64], index: &FeatureIndex, k: usize) -> Result<(usize, usize)> {
    if k == 0 || k > index.len() {
        return Err(Error::Precondition(format!(
            "k must be in [1, {}], got {k}",
            index.len()
        )));
    }
    let mut dists: Vec<(f64, usize)> = index
        .features
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let d: f64 = row
                .iter()
                .zip(query)
                .map(|(a, b)| {
                    let t = a - b;
                    t * t
                })
                .sum();
            (d, i)
        })
        .collect();
    // (distance, row id) lexicographic order makes ties deterministic.
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1))
    };
    if k < dists.len() {
        dists.select_nth_unstable_by(k - 1, cmp);
        dists.truncate(k);
    }
    let mut counts = std::collections::BTreeMap::new();
    for &(_, i) in &dists {
        *counts.entry(index.labels[i]).or_insert(0usize) += 1;
    }
    // Most frequent label; BTreeMap iteration order breaks count ties by
    // lowest label index.
    let (label, m) = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&l, &c)| (l, c))
        .expect("k >= 1");
    Ok((label, m))
}

/// Walk the ranked candidates, accepting only those whose pseudo-label
/// matches a unanimous k-neighborhood (`label == l` and `m == k`). Stops
/// at `p_count` accepted; may return fewer.
pub fn knn_select_core(
    ranked: &[Candidate],
    target_features: impl Fn(u64) -> Vec<f64>,
    index: &FeatureIndex,
    k: usize,
    p_count: usize,
) -> Result<Vec<Candidate>> {
    let mut accepted = Vec::new();
    for cand in ranked {
        if accepted.len() >= p_count {
            break;
        }
        let f = target_features(cand.sample_id);
        let (label, m) = knn_query(&f, index, k)?;
        if cand.pseudo_label == label && m == k {
            accepted.push(cand.clone());
        }
    }
    Ok(accepted)
}

fn ranked_from_model(model: &DannModel, target: &UnlabeledDataset) -> Result<Vec<Candidate>> {
    if target.is_empty() {
        return Err(Error::Precondition("selection from an empty target set".into()));
    }
    let ids: Vec<u64> = target.samples.iter().map(|s| s.id).collect();
    let xs: Vec<_> = target.samples.iter().map(|s| s.x.clone()).collect();
    let rows = model.predict_label_probs(&xs)?;
    rank_candidates(&ids, &rows)
}

/// Confidence policy: the `p_count` highest-confidence target samples.
pub fn confidence_select(
    model: &DannModel,
    target: &UnlabeledDataset,
    p_count: usize,
    iteration: usize,
) -> Result<SelectionBatch> {
    if p_count == 0 {
        return Err(Error::Precondition("p_count must be >= 1".into()));
    }
    let ranked = ranked_from_model(model, target)?;
    Ok(SelectionBatch {
        candidates: confidence_select_core(&ranked, p_count),
        policy: PolicyTag::Confidence,
        iteration,
        requested: p_count,
        forced: false,
    })
}

/// Per-candidate outcome of the kNN walk, for selection audit files.
#[derive(Debug, Clone)]
pub struct KnnVerdict {
    pub candidate: Candidate,
    pub majority_label: usize,
    pub agreement: usize,
    pub accepted: bool,
}

/// kNN policy: confidence-ordered walk accepting only unanimous
/// neighborhoods that agree with the pseudo-label.
pub fn knn_select(
    model: &DannModel,
    source: &LabeledDataset,
    target: &UnlabeledDataset,
    p_count: usize,
    k: usize,
    iteration: usize,
) -> Result<SelectionBatch> {
    Ok(knn_select_audited(model, source, target, p_count, k, iteration)?.0)
}

/// As `knn_select`, also returning the verdict for every examined candidate.
pub fn knn_select_audited(
    model: &DannModel,
    source: &LabeledDataset,
    target: &UnlabeledDataset,
    p_count: usize,
    k: usize,
    iteration: usize,
) -> Result<(SelectionBatch, Vec<KnnVerdict>)> {
    if p_count == 0 {
        return Err(Error::Precondition("p_count must be >= 1".into()));
    }
    let ranked = ranked_from_model(model, target)?;
    let index = FeatureIndex::from_model(model, source)?;
    // Features for all of the target are computed once per iteration;
    // identical to the per-candidate recomputation in exact arithmetic.
    let mut feat_by_id = std::collections::HashMap::new();
    for s in &target.samples {
        feat_by_id.insert(s.id, model.features(&s.x)?.into_data());
    }
    let mut accepted = Vec::new();
    let mut verdicts = Vec::new();
    for cand in &ranked {
        if accepted.len() >= p_count {
            break;
        }
        let (label, m) = knn_query(&feat_by_id[&cand.sample_id], &index, k)?;
        let ok = cand.pseudo_label == label && m == k;
        if ok {
            accepted.push(cand.clone());
        }
        verdicts.push(KnnVerdict {
            candidate: cand.clone(),
            majority_label: label,
            agreement: m,
            accepted: ok,
        });
    }
    let batch = SelectionBatch {
        candidates: accepted,
        policy: PolicyTag::Knn,
        iteration,
        requested: p_count,
        forced: false,
    };
    Ok((batch, verdicts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cands(rows: &[(u64, &[f64])]) -> Vec<Candidate> {
        let ids: Vec<u64> = rows.iter().map(|(i, _)| *i).collect();
        let posts: Vec<Vec<f64>> = rows.iter().map(|(_, r)| r.to_vec()).collect();
        rank_candidates(&ids, &posts).unwrap()
    }

    #[test]
    fn confidence_selection_keeps_order() {
        // confidences 0.9, 0.5, 0.8 for ids 0, 1, 2
        let ranked = cands(&[
            (0, &[0.9, 0.1]),
            (1, &[0.5, 0.5]),
            (2, &[0.8, 0.2]),
        ]);
        let picked = confidence_select_core(&ranked, 2);
        let ids: Vec<u64> = picked.iter().map(|c| c.sample_id).collect();
        assert_eq!(ids, vec![0, 2]);
    }

    #[test]
    fn p_count_larger_than_target_selects_everything() {
        let ranked = cands(&[(0, &[0.6, 0.4]), (1, &[0.7, 0.3])]);
        assert_eq!(confidence_select_core(&ranked, 10).len(), 2);
    }

    #[test]
    fn equal_confidences_pick_lowest_ids() {
        let ranked = cands(&[
            (5, &[0.5, 0.5]),
            (1, &[0.5, 0.5]),
            (3, &[0.5, 0.5]),
        ]);
        let picked = confidence_select_core(&ranked, 2);
        let ids: Vec<u64> = picked.iter().map(|c| c.sample_id).collect();
        assert_eq!(ids, vec![1, 3]);
    }

    fn toy_index() -> FeatureIndex {
        // Class 0 clustered near the origin, class 1 near (10, 10).
        FeatureIndex::new(
            vec![
                vec![0.0, 0.0],
                vec![0.5, 0.0],
                vec![0.0, 0.5],
                vec![0.5, 0.5],
                vec![0.25, 0.25],
                vec![10.0, 10.0],
                vec![10.5, 10.0],
                vec![10.0, 10.5],
            ],
            vec![0, 0, 0, 0, 0, 1, 1, 1],
        )
        .unwrap()
    }

    #[test]
    fn unanimous_neighborhood() {
        let (l, m) = knn_query(&[0.1, 0.1], &toy_index(), 5).unwrap();
        assert_eq!((l, m), (0, 5));
    }

    #[test]
    fn split_neighborhood_reports_majority() {
        let (l, m) = knn_query(&[5.0, 5.0], &toy_index(), 8).unwrap();
        assert_eq!((l, m), (0, 5));
    }

    #[test]
    fn k_one_returns_nearest_label() {
        let (l, m) = knn_query(&[10.1, 10.1], &toy_index(), 1).unwrap();
        assert_eq!((l, m), (1, 1));
    }

    #[test]
    fn k_out_of_range_is_precondition_error() {
        assert!(knn_query(&[0.0, 0.0], &toy_index(), 9).is_err());
        assert!(knn_query(&[0.0, 0.0], &toy_index(), 0).is_err());
    }

    #[test]
    fn knn_select_requires_unanimity_and_agreement() {
        let index = toy_index();
        // Candidate 0: predicted 0 inside the class-0 cluster -> accepted.
        // Candidate 1: between clusters -> mixed neighborhood, rejected.
        // Candidate 2: predicted 1 but unanimous class-0 neighborhood -> rejected.
        let ranked = vec![
            Candidate { sample_id: 0, pseudo_label: 0, confidence: 0.99 },
            Candidate { sample_id: 1, pseudo_label: 0, confidence: 0.98 },
            Candidate { sample_id: 2, pseudo_label: 1, confidence: 0.97 },
        ];
        let feats = |id: u64| -> Vec<f64> {
            match id {
                0 => vec![0.2, 0.2],
                1 => vec![8.0, 8.0],
                _ => vec![0.3, 0.1],
            }
        };
        let accepted = knn_select_core(&ranked, feats, &index, 5, 10).unwrap();
        assert_eq!(accepted.len(), 1);
        assert_eq!(accepted[0].sample_id, 0);
    }

    #[test]
    fn majority_count_ties_prefer_lowest_label() {
        let index = FeatureIndex::new(
            vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]],
            vec![1, 0, 0, 1],
        )
        .unwrap();
        let (l, m) = knn_query(&[1.5], &index, 4).unwrap();
        assert_eq!((l, m), (0, 2));
    }
}
