use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotationStatus, LabelStore};
use crate::bundle::{Bundle, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: u32,
    pub validation: u32,
    pub test: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            train: 8,
            validation: 1,
            test: 1,
        }
    }
}

impl SplitRatio {
    /// (train, validation, test) sizes for `n` units: validation and test
    /// are floored, train takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let total = (self.train + self.validation + self.test).max(1) as usize;
        let v = n * self.validation as usize / total;
        let t = n * self.test as usize / total;
        (n - v - t, v, t)
    }
}

/// A thread and the annotated conversations drawn from it. Threads are the
/// unit of splitting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadUnit {
    pub thread_id: String,
    pub target_id: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratio: SplitRatio,
    /// Conversation id to split.
    pub assignments: BTreeMap<String, Split>,
    /// Thread id to split.
    pub threads: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn thread_counts(&self) -> BTreeMap<Split, usize> {
        count(self.threads.values())
    }

    pub fn item_counts(&self) -> BTreeMap<Split, usize> {
        count(self.assignments.values())
    }
}

fn count<'a>(it: impl Iterator<Item = &'a Split>) -> BTreeMap<Split, usize> {
    let mut out: BTreeMap<Split, usize> = [Split::Train, Split::Validation, Split::Test].into_iter().map(|s| (s, 0)).collect();
    for s in it {
        *out.get_mut(s).unwrap() += 1;
    }
    out
}

/// Largest-remainder apportionment of `quota` over groups of the given
/// sizes, never exceeding `caps`. Ties go to the earlier group.
fn apportion(quota: usize, sizes: &[usize], caps: &[usize]) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let mut out: Vec<usize> = sizes.iter().zip(caps).map(|(&s, &c)| (quota * s / n).min(c)).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse((quota * sizes[i]) % n));
    let mut left = quota - out.iter().sum::<usize>();
    while left > 0 {
        let before = left;
        for &i in &order {
            if left > 0 && out[i] < caps[i] {
                out[i] += 1;
                left -= 1;
            }
        }
        if before == left {
            break;
        }
    }
    out
}

/// Assigns whole threads to splits, stratified by target.
pub fn split_threads(units: &[ThreadUnit], ratio: SplitRatio, seed: u64) -> SplitAssignment {
    let mut by_target: BTreeMap<&str, Vec<&ThreadUnit>> = BTreeMap::new();
    for u in units {
        by_target.entry(&u.target_id).or_default().push(u);
    }
    let (_, v_total, t_total) = ratio.sizes(units.len());
    let sizes: Vec<usize> = by_target.values().map(Vec::len).collect();
    let val = apportion(v_total, &sizes, &sizes);
    let caps: Vec<usize> = sizes.iter().zip(&val).map(|(s, v)| s - v).collect();
    let test = apportion(t_total, &sizes, &caps);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitAssignment {
        seed,
        ratio,
        assignments: BTreeMap::new(),
        threads: BTreeMap::new(),
    };
    for (k, group) in by_target.into_values().enumerate() {
        let mut group = group;
        group.sort_by(|a, b| a.thread_id.cmp(&b.thread_id));
        group.shuffle(&mut rng);
        for (i, u) in group.into_iter().enumerate() {
            let split = if i < val[k] {
                Split::Validation
            } else if i < val[k] + test[k] {
                Split::Test
            } else {
                Split::Train
            };
            out.threads.insert(u.thread_id.clone(), split);
            for m in &u.members {
                out.assignments.insert(m.clone(), split);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalizeReport {
    pub resolved: usize,
    /// Items left out because they are not resolved.
    pub excluded: Vec<String>,
}

/// Builds the labeled dataset from resolved items and splits it by thread.
pub fn finalize_and_split(store: &LabelStore, ratio: SplitRatio, seed: u64) -> (Bundle, SplitAssignment, FinalizeReport) {
    let items = store.exclusive_snapshot();
    let source = store.bundle();
    let mut report = FinalizeReport {
        resolved: 0,
        excluded: Vec::new(),
    };
    let mut entries = Vec::new();
    let mut threads: BTreeMap<String, ThreadUnit> = BTreeMap::new();
    for r in items {
        let entry = match (r.item.status, r.item.final_label, source.conversation(&r.item.conversation_id)) {
            (AnnotationStatus::Resolved, Some(label), Some(e)) => {
                let mut e = e.clone();
                e.gold = Some(label);
                e
            }
            _ => {
                report.excluded.push(r.item.id);
                continue;
            }
        };
        report.resolved += 1;
        let post = entry.conversation.post();
        threads
            .entry(post.id.clone())
            .or_insert_with(|| ThreadUnit {
                thread_id: post.id.clone(),
                target_id: post.target.clone(),
                members: Vec::new(),
            })
            .members
            .push(entry.conversation.id().to_string());
        entries.push(entry);
    }
    let units: Vec<ThreadUnit> = threads.into_values().collect();
    let assignment = split_threads(&units, ratio, seed);
    for e in &mut entries {
        e.split = assignment.assignments.get(e.conversation.id()).copied();
    }
    let dataset = Bundle {
        meta: source.meta.clone(),
        users: source.users.clone(),
        histories: source.histories.clone(),
        conversations: entries,
    };
    (dataset, assignment, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn units(n: usize, targets: &[&str]) -> Vec<ThreadUnit> {
        (0..n)
            .map(|i| ThreadUnit {
                thread_id: format!("t{i:05}"),
                target_id: targets[i % targets.len()].to_string(),
                members: vec![format!("t{i:05}:a"), format!("t{i:05}:b")],
            })
            .collect()
    }

    #[test]
    fn sizes_floor_rule() {
        assert_eq!(SplitRatio::default().sizes(100), (80, 10, 10));
        assert_eq!(SplitRatio::default().sizes(40_003), (32_003, 4_000, 4_000));
        assert_eq!(SplitRatio::default().sizes(9), (9, 0, 0));
    }

    #[test]
    fn threads_never_straddle() {
        let a = split_threads(&units(100, &["trump", "biden", "tesla"]), SplitRatio::default(), 42);
        let c = a.thread_counts();
        assert_eq!((c[&Split::Train], c[&Split::Validation], c[&Split::Test]), (80, 10, 10));
        for (t, s) in &a.threads {
            assert_eq!(a.assignments[&format!("{t}:a")], *s);
            assert_eq!(a.assignments[&format!("{t}:b")], *s);
        }
        assert_eq!(a, split_threads(&units(100, &["trump", "biden", "tesla"]), SplitRatio::default(), 42));
        assert_ne!(a, split_threads(&units(100, &["trump", "biden", "tesla"]), SplitRatio::default(), 43));
    }

    #[test]
    fn apportion_respects_caps() {
        assert_eq!(apportion(3, &[5, 5, 5], &[5, 5, 5]), vec![1, 1, 1]);
        assert_eq!(apportion(2, &[1, 9], &[0, 9]), vec![0, 2]);
    }
}
