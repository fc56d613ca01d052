//! Stance metrics and experiment protocols.
//!
//! The headline metric is F1-avg: the mean of the F1 scores for the
//! `Against` and `Favor` classes. `None` is a valid gold and predicted
//! label but does not enter the average. Unparseable model output is kept as
//! [`Prediction::Invalid`], which counts as a miss for every class.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::{depth_bucket, DepthBucket, StanceLabel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no prediction records")]
    EmptyInput,
    #[error("prediction lists are not aligned: {0}")]
    MisalignedInputs(String),
    #[error("bootstrap needs at least 100 iterations, got {0}")]
    TooFewIterations(usize),
    #[error("cross-target pair trains and tests on {0}")]
    SameTarget(String),
    #[error("record {0} has invalid depth 0")]
    InvalidDepth(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Prediction {
    Label(StanceLabel),
    Invalid,
}

impl Prediction {
    pub fn label(self) -> Option<StanceLabel> {
        match self {
            Prediction::Label(l) => Some(l),
            Prediction::Invalid => None,
        }
    }
}

impl From<StanceLabel> for Prediction {
    fn from(l: StanceLabel) -> Self {
        Prediction::Label(l)
    }
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prediction::Label(l) => f.write_str(l.as_word()),
            Prediction::Invalid => f.write_str("Invalid"),
        }
    }
}

impl Serialize for Prediction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Prediction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(match s.as_str() {
            "Favor" => Prediction::Label(StanceLabel::Favor),
            "Against" => Prediction::Label(StanceLabel::Against),
            "None" => Prediction::Label(StanceLabel::None),
            "Invalid" => Prediction::Invalid,
            other => return Err(serde::de::Error::custom(format!("unknown prediction {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub conversation_id: String,
    pub target_id: String,
    pub gold: StanceLabel,
    pub predicted: Prediction,
    pub depth: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct ClassCounts {
    tp: u64,
    fp: u64,
    fn_: u64,
}

impl ClassCounts {
    fn add(&mut self, gold: StanceLabel, predicted: Prediction, cls: StanceLabel) {
        let pred_is = predicted.label() == Some(cls);
        match (gold == cls, pred_is) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => {}
        }
    }

    fn f1(&self) -> f64 {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

pub fn f1_per_class(preds: &[PredictionRecord], cls: StanceLabel) -> Result<f64, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut c = ClassCounts::default();
    for p in preds {
        c.add(p.gold, p.predicted, cls);
    }
    Ok(c.f1())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub f1_against: f64,
    pub f1_favor: f64,
    pub f1_avg: f64,
}

impl F1Scores {
    fn from_pair(against: f64, favor: f64) -> Self {
        Self {
            f1_against: against,
            f1_favor: favor,
            f1_avg: (against + favor) / 2.0,
        }
    }
}

pub fn f1_avg(preds: &[PredictionRecord]) -> Result<F1Scores, EvalError> {
    Ok(F1Scores::from_pair(
        f1_per_class(preds, StanceLabel::Against)?,
        f1_per_class(preds, StanceLabel::Favor)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    #[serde(flatten)]
    pub scores: F1Scores,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    PerTarget,
    Depth,
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub baseline: String,
    pub iterations: usize,
    pub seed: u64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_target: Vec<GroupRow>,
    pub overall_pooled: F1Scores,
    /// Unweighted mean over targets.
    pub overall_macro: F1Scores,
    pub per_depth: Vec<GroupRow>,
    pub total: usize,
    pub invalid: usize,
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub significance: Option<SignificanceResult>,
}

/// Per-target, pooled, macro and depth-bucket metrics for one run.
pub fn evaluate_run(preds: &[PredictionRecord]) -> Result<EvalReport, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut by_target: BTreeMap<&str, Vec<PredictionRecord>> = BTreeMap::new();
    let mut by_bucket: BTreeMap<DepthBucket, Vec<PredictionRecord>> = BTreeMap::new();
    for p in preds {
        by_target.entry(&p.target_id).or_default().push(p.clone());
        let bucket = depth_bucket(p.depth).map_err(|_| EvalError::InvalidDepth(p.conversation_id.clone()))?;
        by_bucket.entry(bucket).or_default().push(p.clone());
    }
    let per_target: Vec<GroupRow> = by_target
        .iter()
        .map(|(t, rows)| {
            Ok(GroupRow {
                group: t.to_string(),
                scores: f1_avg(rows)?,
                count: rows.len(),
            })
        })
        .collect::<Result<_, EvalError>>()?;
    let mut notes = Vec::new();
    let mut per_depth = Vec::new();
    for bucket in [DepthBucket::S, DepthBucket::M, DepthBucket::L] {
        match by_bucket.get(&bucket) {
            Some(rows) => per_depth.push(GroupRow {
                group: format!("{bucket:?}"),
                scores: f1_avg(rows)?,
                count: rows.len(),
            }),
            None => notes.push(format!("depth bucket {} has no records", bucket.label())),
        }
    }
    let n = per_target.len() as f64;
    let overall_macro = F1Scores {
        f1_against: per_target.iter().map(|r| r.scores.f1_against).sum::<f64>() / n,
        f1_favor: per_target.iter().map(|r| r.scores.f1_favor).sum::<f64>() / n,
        f1_avg: per_target.iter().map(|r| r.scores.f1_avg).sum::<f64>() / n,
    };
    Ok(EvalReport {
        per_target,
        overall_pooled: f1_avg(preds)?,
        overall_macro,
        per_depth,
        total: preds.len(),
        invalid: preds.iter().filter(|p| p.predicted == Prediction::Invalid).count(),
        notes,
        significance: None,
    })
}

impl EvalReport {
    /// Plain-text table with Ag / Fa / Avg columns in percent.
    pub fn render_table(&self, grouping: Grouping) -> String {
        let mut out = String::new();
        let line = |out: &mut String, name: &str, s: &F1Scores, n: Option<usize>| {
            out.push_str(&format!(
                "{:<18} {:>7.2} {:>7.2} {:>7.2} {:>6}\n",
                name,
                s.f1_against * 100.0,
                s.f1_favor * 100.0,
                s.f1_avg * 100.0,
                n.map(|n| n.to_string()).unwrap_or_default()
            ));
        };
        out.push_str(&format!("{:<18} {:>7} {:>7} {:>7} {:>6}\n", "group", "Ag", "Fa", "Avg", "n"));
        let rows: &[GroupRow] = match grouping {
            Grouping::PerTarget => &self.per_target,
            Grouping::Depth => &self.per_depth,
            Grouping::Pooled => &[],
        };
        for r in rows {
            line(&mut out, &r.group, &r.scores, Some(r.count));
        }
        line(&mut out, "Overall (pooled)", &self.overall_pooled, Some(self.total));
        if grouping == Grouping::PerTarget {
            line(&mut out, "Overall (macro)", &self.overall_macro, None);
        }
        if let Some(sig) = &self.significance {
            out.push_str(&format!(
                "paired bootstrap vs {}: p = {:.4} ({} iterations, seed {})\n",
                sig.baseline, sig.p_value, sig.iterations, sig.seed
            ));
        }
        for note in &self.notes {
            out.push_str(&format!("note: {note}\n"));
        }
        out
    }
}

/// Ordered (train target, test target) pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossTargetPlan {
    pairs: Vec<(String, String)>,
}

impl CrossTargetPlan {
    pub fn new(pairs: Vec<(String, String)>) -> Result<Self, EvalError> {
        if let Some((t, _)) = pairs.iter().find(|(a, b)| a == b) {
            return Err(EvalError::SameTarget(t.clone()));
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    /// Selects the training and test items for one pair.
    pub fn select<'a, T>(
        train_target: &str,
        test_target: &str,
        items: &'a [T],
        target_of: impl Fn(&T) -> &str,
    ) -> (Vec<&'a T>, Vec<&'a T>) {
        let train = items.iter().filter(|i| target_of(i) == train_target).collect();
        let test = items.iter().filter(|i| target_of(i) == test_target).collect();
        (train, test)
    }
}

impl Default for CrossTargetPlan {
    /// Trump/Biden, Tesla/BMW and Costco/Bitcoin, in both directions.
    fn default() -> Self {
        let related = [("trump", "biden"), ("tesla", "bmw"), ("costco", "bitcoin")];
        let pairs = related
            .iter()
            .flat_map(|(a, b)| [(a.to_string(), b.to_string()), (b.to_string(), a.to_string())])
            .collect();
        Self { pairs }
    }
}

pub fn cross_target_plan() -> CrossTargetPlan {
    CrossTargetPlan::default()
}

pub const DEFAULT_BOOTSTRAP_ITERATIONS: usize = 10_000;

/// Paired bootstrap over items on the F1-avg statistic. Returns the share
/// of resamples in which system A does not beat system B.
pub fn bootstrap_significance(
    preds_a: &[PredictionRecord],
    preds_b: &[PredictionRecord],
    iterations: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if iterations < 100 {
        return Err(EvalError::TooFewIterations(iterations));
    }
    if preds_a.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if preds_a.len() != preds_b.len() {
        return Err(EvalError::MisalignedInputs(format!(
            "{} vs {} records",
            preds_a.len(),
            preds_b.len()
        )));
    }
    for (a, b) in preds_a.iter().zip(preds_b) {
        if a.conversation_id != b.conversation_id || a.gold != b.gold {
            return Err(EvalError::MisalignedInputs(format!(
                "{} vs {}",
                a.conversation_id, b.conversation_id
            )));
        }
    }
    let n = preds_a.len();
    let stat = |counts: &[ClassCounts; 2]| (counts[0].f1() + counts[1].f1()) / 2.0;
    let losses: usize = (0..iterations)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut ca = [ClassCounts::default(); 2];
            let mut cb = [ClassCounts::default(); 2];
            for _ in 0..n {
                let j = rng.random_range(0..n);
                for (k, cls) in [StanceLabel::Against, StanceLabel::Favor].into_iter().enumerate() {
                    ca[k].add(preds_a[j].gold, preds_a[j].predicted, cls);
                    cb[k].add(preds_b[j].gold, preds_b[j].predicted, cls);
                }
            }
            usize::from(stat(&ca) <= stat(&cb))
        })
        .sum();
    Ok(losses as f64 / iterations as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use StanceLabel::*;

    fn recs(golds: &[StanceLabel], preds: &[Prediction]) -> Vec<PredictionRecord> {
        golds
            .iter()
            .zip(preds)
            .enumerate()
            .map(|(i, (g, p))| PredictionRecord {
                conversation_id: format!("c{i}"),
                target_id: "t".into(),
                gold: *g,
                predicted: *p,
                depth: 1,
            })
            .collect()
    }

    fn l(x: StanceLabel) -> Prediction {
        Prediction::Label(x)
    }

    #[test]
    fn worked_example() {
        let r = recs(&[Favor, Favor, Against, Against, None], &[l(Favor), l(Against), l(Against), l(None), l(None)]);
        assert!((f1_per_class(&r, Favor).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((f1_per_class(&r, Against).unwrap() - 0.5).abs() < 1e-12);
        let s = f1_avg(&r).unwrap();
        assert!((s.f1_avg - 0.583_333_333_333).abs() < 1e-9);
    }

    #[test]
    fn perfect_and_degenerate() {
        let g = [Favor, Against, None];
        let r = recs(&g, &[l(Favor), l(Against), l(None)]);
        assert_eq!(f1_avg(&r).unwrap(), F1Scores::from_pair(1.0, 1.0));
        let r = recs(&g, &[l(None), l(None), l(None)]);
        assert_eq!(f1_avg(&r).unwrap(), F1Scores::from_pair(0.0, 0.0));
        let r = recs(&[None], &[l(None)]);
        assert_eq!(f1_per_class(&r, Favor).unwrap(), 0.0);
        assert_eq!(f1_per_class(&[], Favor), Err(EvalError::EmptyInput));
    }

    #[test]
    fn invalid_hurts_recall_only() {
        let r = recs(&[Favor, Favor], &[l(Favor), Prediction::Invalid]);
        // P = 1, R = 1/2
        assert!((f1_per_class(&r, Favor).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let r = recs(&[Against], &[Prediction::Invalid]);
        assert_eq!(f1_per_class(&r, Favor).unwrap(), 0.0);
    }

    #[test]
    fn prediction_serde() {
        assert_eq!(serde_json::to_string(&Prediction::Invalid).unwrap(), "\"Invalid\"");
        assert_eq!(serde_json::from_str::<Prediction>("\"None\"").unwrap(), l(None));
        assert!(serde_json::from_str::<Prediction>("\"maybe\"").is_err());
    }

    #[test]
    fn single_target_matches_pooled_and_buckets() {
        let r = recs(&[Favor, Against, None, Favor], &[l(Favor), l(Favor), l(None), l(Against)]);
        let rep = evaluate_run(&r).unwrap();
        assert_eq!(rep.per_target.len(), 1);
        assert_eq!(rep.per_target[0].scores, rep.overall_pooled);
        assert_eq!(rep.per_depth.len(), 1);
        assert_eq!(rep.per_depth[0].group, "S");
        assert_eq!(rep.notes.len(), 2);
    }

    #[test]
    fn cross_target_default() {
        let plan = cross_target_plan();
        assert_eq!(plan.pairs().len(), 6);
        assert!(plan.pairs().contains(&("trump".into(), "biden".into())));
        assert!(plan.pairs().contains(&("biden".into(), "trump".into())));
        assert_eq!(
            CrossTargetPlan::new(vec![("x".into(), "x".into())]),
            Err(EvalError::SameTarget("x".into()))
        );
        let items = ["trump", "biden", "trump", "bmw"];
        let (train, test) = CrossTargetPlan::select("trump", "biden", &items, |s| s);
        assert_eq!((train.len(), test.len()), (2, 1));
    }

    #[test]
    fn bootstrap_validation() {
        let r = recs(&[Favor], &[l(Favor)]);
        assert_eq!(bootstrap_significance(&r, &r, 10, 0), Err(EvalError::TooFewIterations(10)));
        let mut other = r.clone();
        other[0].conversation_id = "zz".into();
        assert!(matches!(bootstrap_significance(&r, &other, 100, 0), Err(EvalError::MisalignedInputs(_))));
    }

    #[test]
    fn table_layout() {
        let r = recs(&[Favor, Against], &[l(Favor), l(Against)]);
        let t = evaluate_run(&r).unwrap().render_table(Grouping::PerTarget);
        assert!(t.starts_with("group"));
        assert!(t.contains("Overall (pooled)    100.00  100.00  100.00      2"));
    }
}
