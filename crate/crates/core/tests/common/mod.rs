//! Reference implementations used as test oracles. These are written
//! independently of the library code they check.

#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Mutex;

use prism::backend::{BackendError, ChatBackend, ChatRequest, ChatResponse};
use prism::conversation::{Conversation, StanceLabel};

/// Per-class F1 from a full confusion matrix. `None` predictions are
/// invalid outputs (a fourth column that is never any class).
pub fn f1_oracle(gold: &[StanceLabel], pred: &[Option<StanceLabel>], cls: StanceLabel) -> f64 {
    let col = |p: Option<StanceLabel>| match p {
        Some(StanceLabel::Favor) => 0,
        Some(StanceLabel::Against) => 1,
        Some(StanceLabel::None) => 2,
        None => 3,
    };
    let row = |g: StanceLabel| col(Some(g));
    let mut m = [[0u64; 4]; 3];
    for (g, p) in gold.iter().zip(pred) {
        m[row(*g)][col(*p)] += 1;
    }
    let c = row(cls);
    let tp = m[c][c] as f64;
    let predicted: f64 = (0..3).map(|r| m[r][c] as f64).sum();
    let actual: f64 = m[c].iter().map(|&x| x as f64).sum();
    let p = if predicted == 0.0 { 0.0 } else { tp / predicted };
    let r = if actual == 0.0 { 0.0 } else { tp / actual };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Plain left-to-right accumulation.
pub fn naive_nll(logprobs: &[f64]) -> f64 {
    logprobs.iter().fold(0.0, |acc, lp| acc - lp)
}

/// Cohen (1960): observed agreement against chance agreement from the
/// two raters' marginal proportions.
pub fn kappa_oracle(a: &[StanceLabel], b: &[StanceLabel]) -> Option<f64> {
    let n = a.len() as f64;
    let p_o = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let p_e: f64 = StanceLabel::ALL
        .iter()
        .map(|l| {
            let pa = a.iter().filter(|x| *x == l).count() as f64 / n;
            let pb = b.iter().filter(|x| *x == l).count() as f64 / n;
            pa * pb
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        None
    } else {
        Some((p_o - p_e) / (1.0 - p_e))
    }
}

/// Depth by walking parent links up to the post.
pub fn depth_oracle(conv: &Conversation, id: &str) -> u32 {
    let parents: HashMap<&str, &str> = conv
        .comments()
        .iter()
        .map(|c| (c.id.as_str(), c.parent_id.as_str()))
        .collect();
    let mut d = 0;
    let mut cur = id;
    while let Some(p) = parents.get(cur) {
        d += 1;
        cur = p;
    }
    d
}

/// Wraps a backend and keeps every (request, response text) pair.
pub struct Recorder<B> {
    pub inner: B,
    pub log: Mutex<Vec<(ChatRequest, String)>>,
}

impl<B: ChatBackend> Recorder<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn take(&self) -> Vec<(ChatRequest, String)> {
        std::mem::take(&mut *self.log.lock().unwrap())
    }
}

impl<B: ChatBackend> ChatBackend for Recorder<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let r = self.inner.complete(request)?;
        self.log.lock().unwrap().push((request.clone(), r.text.clone()));
        Ok(r)
    }

    fn max_parallel(&self) -> usize {
        self.inner.max_parallel()
    }
}
