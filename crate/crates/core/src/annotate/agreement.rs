use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::AnnotateError;
use crate::conversation::StanceLabel;

/// Cohen's kappa between two aligned label sequences.
///
/// Computed from integer counts as `(n*agree - S) / (n^2 - S)` where `S` is
/// the sum over labels of the product of the two marginal counts, so the
/// result is exact up to one final division.
pub fn cohen_kappa(a: &[StanceLabel], b: &[StanceLabel]) -> Result<f64, AnnotateError> {
    if a.len() != b.len() {
        return Err(AnnotateError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(AnnotateError::EmptyInput);
    }
    let n = a.len() as i128;
    let mut ca = [0i128; 3];
    let mut cb = [0i128; 3];
    let mut agree = 0i128;
    for (x, y) in a.iter().zip(b) {
        ca[x.index()] += 1;
        cb[y.index()] += 1;
        agree += i128::from(x == y);
    }
    let chance: i128 = (0..3).map(|k| ca[k] * cb[k]).sum();
    let denom = n * n - chance;
    if denom == 0 {
        return Err(AnnotateError::DegenerateMarginals);
    }
    Ok((n * agree - chance) as f64 / denom as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAgreement {
    pub a: String,
    pub b: String,
    pub items: usize,
    /// `None` when the pair's marginals are degenerate.
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub annotators: Vec<String>,
    /// Symmetric; `matrix[i][j]` is the kappa of annotators i and j, `None`
    /// on the diagonal and for pairs without a defined kappa.
    pub matrix: Vec<Vec<Option<f64>>>,
    /// Pairs sharing at least one item.
    pub pairs: Vec<PairAgreement>,
    /// Mean over pairs, each pair weighted equally.
    pub mean_pairwise_kappa: f64,
    /// Mean over pairs weighted by co-labeled item count.
    pub item_weighted_kappa: f64,
    pub degenerate_pairs: usize,
}

/// Pairwise kappa over co-labeled items from (item, annotator, label)
/// triples. An annotator labeling an item twice keeps the later label.
pub fn mean_pairwise_kappa(labels: &[(String, String, StanceLabel)]) -> Result<AgreementStats, AnnotateError> {
    let mut by_annotator: BTreeMap<&str, BTreeMap<&str, StanceLabel>> = BTreeMap::new();
    for (item, annotator, label) in labels {
        by_annotator.entry(annotator).or_default().insert(item, *label);
    }
    let annotators: Vec<String> = by_annotator.keys().map(|s| s.to_string()).collect();
    let n = annotators.len();
    let mut matrix = vec![vec![None; n]; n];
    let mut pairs = Vec::new();
    let mut degenerate = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let la = &by_annotator[annotators[i].as_str()];
            let lb = &by_annotator[annotators[j].as_str()];
            let shared: BTreeSet<&&str> = la.keys().filter(|k| lb.contains_key(**k)).collect();
            if shared.is_empty() {
                continue;
            }
            let a: Vec<StanceLabel> = shared.iter().map(|k| la[**k]).collect();
            let b: Vec<StanceLabel> = shared.iter().map(|k| lb[**k]).collect();
            let kappa = match cohen_kappa(&a, &b) {
                Ok(k) => Some(k),
                Err(AnnotateError::DegenerateMarginals) => {
                    degenerate += 1;
                    None
                }
                Err(e) => return Err(e),
            };
            matrix[i][j] = kappa;
            matrix[j][i] = kappa;
            pairs.push(PairAgreement {
                a: annotators[i].clone(),
                b: annotators[j].clone(),
                items: shared.len(),
                kappa,
            });
        }
    }
    let defined: Vec<(f64, usize)> = pairs.iter().filter_map(|p| p.kappa.map(|k| (k, p.items))).collect();
    if defined.is_empty() {
        return Err(AnnotateError::NoOverlap);
    }
    let mean = defined.iter().map(|(k, _)| k).sum::<f64>() / defined.len() as f64;
    let weight: usize = defined.iter().map(|(_, w)| w).sum();
    let weighted = defined.iter().map(|(k, w)| k * *w as f64).sum::<f64>() / weight as f64;
    Ok(AgreementStats {
        annotators,
        matrix,
        pairs,
        mean_pairwise_kappa: mean,
        item_weighted_kappa: weighted,
        degenerate_pairs: degenerate,
    })
}
