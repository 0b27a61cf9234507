//! Offset-retrieval evaluation.
//!
//! Each query is a visual position in a test utterance. The candidates are
//! the audio windows displaced by `k·stride` frames for `k` in
//! `-half_window..=half_window`. For a frame length `N` the score of a
//! candidate is the mean logit over its `N - 4` constituent 5-frame windows.
//! The query counts as correct when the best candidate lies within
//! `tolerance` frames of the truth.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Utterance, VISUAL_WINDOW};
use crate::error::{Error, Result};
use crate::model::SyncModel;
use crate::tensor::Tensor;

/// Anything that can score a (visual window, audio window) pair.
pub trait SyncScorer {
    /// Sync logit. `offset` is the true displacement of `audio`; learned
    /// models ignore it, reference scorers may use it.
    fn score(&self, visual: &Tensor, audio: &Tensor, offset: i32) -> Result<f64>;
}

impl SyncScorer for SyncModel {
    fn score(&self, visual: &Tensor, audio: &Tensor, _offset: i32) -> Result<f64> {
        self.logit(visual, audio)
    }
}

/// Leaks the label: `+10` in sync, `-|offset|` otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleScorer;

impl SyncScorer for OracleScorer {
    fn score(&self, _v: &Tensor, _a: &Tensor, offset: i32) -> Result<f64> {
        Ok(if offset == 0 { 10.0 } else { -(offset.abs() as f64) })
    }
}

/// Negated [`OracleScorer`].
#[derive(Debug, Clone, Copy, Default)]
pub struct InvertedOracleScorer;

impl SyncScorer for InvertedOracleScorer {
    fn score(&self, v: &Tensor, a: &Tensor, offset: i32) -> Result<f64> {
        Ok(-OracleScorer.score(v, a, offset)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl SyncScorer for ConstantScorer {
    fn score(&self, _v: &Tensor, _a: &Tensor, _offset: i32) -> Result<f64> {
        Ok(self.0)
    }
}

/// Uniform scores in `[0, 1)` from a hash of the inputs, so results do not
/// depend on call order.
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SyncScorer for RandomScorer {
    fn score(&self, v: &Tensor, a: &Tensor, offset: i32) -> Result<f64> {
        let mut h = splitmix(self.seed ^ (offset as i64 as u64));
        for x in v.values().iter().chain(a.values()) {
            h = splitmix(h ^ x.to_bits());
        }
        Ok((h >> 11) as f64 / (1u64 << 53) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub frame_lengths: Vec<usize>,
    pub half_window: usize,
    pub tolerance: usize,
    pub stride: usize,
    pub n_queries: usize,
    /// Spacing, in frames, between query positions within an utterance.
    pub query_stride: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            frame_lengths: vec![5, 7, 9, 11, 13, 15],
            half_window: 15,
            tolerance: 1,
            stride: 1,
            n_queries: 500,
            query_stride: 7,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_lengths.is_empty() {
            return Err(Error::Config("eval.lengths must not be empty".into()));
        }
        if let Some(&n) = self.frame_lengths.iter().find(|&&n| n < VISUAL_WINDOW) {
            return Err(Error::Config(format!("eval.lengths: {n} is shorter than {VISUAL_WINDOW} frames")));
        }
        if self.half_window == 0 || self.tolerance >= self.half_window {
            return Err(Error::Config(format!(
                "eval.tolerance ({}) must be below eval.half_window ({})",
                self.tolerance, self.half_window
            )));
        }
        if self.stride == 0 || self.query_stride == 0 || self.n_queries == 0 {
            return Err(Error::Config("eval.stride, eval.query_stride and eval.n_queries must be positive".into()));
        }
        Ok(())
    }

    pub fn offsets(&self) -> Vec<i32> {
        let (h, s) = (self.half_window as i32, self.stride as i32);
        (-h..=h).map(|k| k * s).collect()
    }

    fn reach(&self) -> usize {
        self.half_window * self.stride
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    pub utterance: usize,
    pub position: usize,
}

/// Query positions valid for every configured length: one per
/// `query_stride` frames per utterance, then a seeded subset of at most
/// `n_queries`, returned in (utterance, position) order. The second value
/// counts utterances too short to host any query.
pub fn select_queries(split: &[Utterance], cfg: &EvalConfig) -> Result<(Vec<Query>, usize)> {
    cfg.validate()?;
    let n_max = *cfg.frame_lengths.iter().max().expect("validated non-empty");
    let reach = cfg.reach();
    let mut all = Vec::new();
    let mut skipped = 0;
    for (u, utt) in split.iter().enumerate() {
        let t = utt.frames();
        if t < n_max + 2 * reach {
            skipped += 1;
            continue;
        }
        let mut p = reach;
        while p + n_max + reach <= t {
            all.push(Query { utterance: u, position: p });
            p += cfg.query_stride;
        }
    }
    if all.len() > cfg.n_queries {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        all.shuffle(&mut rng);
        all.truncate(cfg.n_queries);
        all.sort_by_key(|q| (q.utterance, q.position));
    }
    Ok((all, skipped))
}

/// Candidate scores for one query: `scores[l][c]` for frame length
/// `cfg.frame_lengths[l]` and candidate offset `cfg.offsets()[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryScores {
    pub query: Query,
    pub scores: Vec<Vec<f64>>,
}

/// Scores every candidate of every query. Window logits are computed once
/// per (start, offset) and shared across frame lengths.
pub fn score_queries(scorer: &dyn SyncScorer, split: &[Utterance], queries: &[Query], cfg: &EvalConfig) -> Result<Vec<QueryScores>> {
    cfg.validate()?;
    let offsets = cfg.offsets();
    let mut out = Vec::with_capacity(queries.len());
    for &q in queries {
        let utt = &split[q.utterance];
        let mut cache: HashMap<(usize, i32), f64> = HashMap::new();
        let mut window = |start: usize, off: i32| -> Result<f64> {
            if let Some(&v) = cache.get(&(start, off)) {
                return Ok(v);
            }
            let p = utt.pair(start, off, VISUAL_WINDOW)?;
            let v = scorer.score(&p.visual, &p.audio, off)?;
            cache.insert((start, off), v);
            Ok(v)
        };
        let mut scores = Vec::with_capacity(cfg.frame_lengths.len());
        for &n in &cfg.frame_lengths {
            let n_windows = n - VISUAL_WINDOW + 1;
            let mut row = Vec::with_capacity(offsets.len());
            for &off in &offsets {
                let mut acc = 0.0;
                for w in 0..n_windows {
                    acc += window(q.position + w, off)?;
                }
                row.push(acc / n_windows as f64);
            }
            scores.push(row);
        }
        out.push(QueryScores { query: q, scores });
    }
    Ok(out)
}

/// Best-scoring offset; ties go to the smaller `|offset|`, then to the
/// negative side.
pub fn predict_offset(offsets: &[i32], scores: &[f64]) -> i32 {
    let mut order: Vec<usize> = (0..offsets.len()).collect();
    order.sort_by_key(|&i| (offsets[i].abs(), offsets[i]));
    let mut best = order[0];
    for &i in &order[1..] {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    offsets[best]
}

/// Fraction of queries whose prediction at length index `l` lies within
/// `tolerance` frames of the truth.
pub fn accuracy_from_scores(scored: &[QueryScores], offsets: &[i32], l: usize, tolerance: usize) -> f64 {
    if scored.is_empty() {
        return 0.0;
    }
    let hits = scored
        .iter()
        .filter(|q| predict_offset(offsets, &q.scores[l]).unsigned_abs() as usize <= tolerance)
        .count();
    hits as f64 / scored.len() as f64
}

/// Retrieval accuracy at a single frame length.
pub fn retrieval_accuracy(scorer: &dyn SyncScorer, split: &[Utterance], frame_length: usize, cfg: &EvalConfig) -> Result<f64> {
    let single = EvalConfig {
        frame_lengths: vec![frame_length],
        ..cfg.clone()
    };
    let (queries, _) = select_queries(split, &single)?;
    if queries.is_empty() {
        return Err(Error::Usage("no utterance is long enough for a retrieval query".into()));
    }
    let scored = score_queries(scorer, split, &queries, &single)?;
    Ok(accuracy_from_scores(&scored, &single.offsets(), 0, single.tolerance))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthResult {
    pub frame_length: usize,
    pub accuracy: f64,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub lengths: Vec<LengthResult>,
    /// Utterances too short to host a query.
    pub skipped_utterances: usize,
    pub metadata: Vec<(String, String)>,
}

impl EvalReport {
    pub fn accuracy_at(&self, frame_length: usize) -> Option<f64> {
        self.lengths.iter().find(|r| r.frame_length == frame_length).map(|r| r.accuracy)
    }
}

/// Accuracy at every configured length over one shared query set.
pub fn multi_length_eval(scorer: &dyn SyncScorer, split: &[Utterance], cfg: &EvalConfig) -> Result<EvalReport> {
    let (queries, skipped) = select_queries(split, cfg)?;
    if queries.is_empty() {
        return Err(Error::Usage("no utterance is long enough for a retrieval query".into()));
    }
    let scored = score_queries(scorer, split, &queries, cfg)?;
    let offsets = cfg.offsets();
    let lengths = cfg
        .frame_lengths
        .iter()
        .enumerate()
        .map(|(l, &n)| LengthResult {
            frame_length: n,
            accuracy: accuracy_from_scores(&scored, &offsets, l, cfg.tolerance),
            queries: scored.len(),
        })
        .collect();
    Ok(EvalReport {
        lengths,
        skipped_utterances: skipped,
        metadata: vec![
            ("eval.half_window".into(), cfg.half_window.to_string()),
            ("eval.tolerance".into(), cfg.tolerance.to_string()),
            ("eval.stride".into(), cfg.stride.to_string()),
            ("eval.seed".into(), cfg.seed.to_string()),
            ("eval.tie_break".into(), "smaller-abs-offset-then-negative".into()),
        ],
    })
}
