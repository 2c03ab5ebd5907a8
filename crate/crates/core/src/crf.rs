//! Linear-chain CRF over projected per-token scores.
//!
//! Potentials are per-pair affine forms: for labels `y'` (previous, with a
//! virtual START before position 1) and `y`, the log-potential at position
//! `j` is `w[y',y] . g_j + b[y',y]` where `g_j` is the projected score
//! vector. This is the literal per-pair-vector parameterization; the usual
//! emission+transition decomposition is the special case of one-hot `w`.
//!
//! [`log_partition`], [`log_likelihood`] and [`viterbi`] run on plain
//! floats for decoding and verification; [`nll_value`] rebuilds the same
//! log-space forward recursion on an autodiff [`Graph`] so training
//! gradients come from differentiating one code path, checked against
//! finite differences and the brute-force enumerations below.

use thiserror::Error;

use crate::autodiff::{Graph, ParamId, ParamLeaves, Tensor, Value};
use crate::corpus::{Label, NUM_LABELS};

/// Virtual label preceding position 1.
pub const START: usize = NUM_LABELS;
/// Ordered label pairs: `(y_prev, y)` with `y_prev` in `{0,1,2,START}`.
pub const NUM_PAIRS: usize = (NUM_LABELS + 1) * NUM_LABELS;

/// Row index of pair `(y_prev, y)` in the weight/bias tables.
pub fn pair_index(y_prev: usize, y: usize) -> usize {
    debug_assert!(y_prev <= START && y < NUM_LABELS);
    y_prev * NUM_LABELS + y
}

#[derive(Debug, Error, PartialEq)]
pub enum CrfError {
    #[error("empty input sequence")]
    EmptyInput,
    #[error("feature/label length mismatch: {features} features vs {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("sequence of length {len} too long for exhaustive enumeration (max {max})")]
    TooLongForBruteForce { len: usize, max: usize },
}

/// Pair weight vectors and biases. `weights` is `[NUM_PAIRS, NUM_LABELS]`,
/// `biases` is `[NUM_PAIRS]`, both indexed by [`pair_index`].
#[derive(Clone, Debug, PartialEq)]
pub struct CrfParams {
    pub weights: Tensor,
    pub biases: Tensor,
}

impl CrfParams {
    pub fn zeros() -> CrfParams {
        CrfParams {
            weights: Tensor::matrix(NUM_PAIRS, NUM_LABELS, vec![0.0; NUM_PAIRS * NUM_LABELS]),
            biases: Tensor::vector(vec![0.0; NUM_PAIRS]),
        }
    }

    pub fn from_tensors(weights: Tensor, biases: Tensor) -> CrfParams {
        assert_eq!(weights.shape(), &[NUM_PAIRS, NUM_LABELS]);
        assert_eq!(biases.shape(), &[NUM_PAIRS]);
        CrfParams { weights, biases }
    }

    /// Log-potential of pair `(y_prev, y)` given the score vector `g`.
    pub fn pair_score(&self, y_prev: usize, y: usize, g: &[f64]) -> f64 {
        assert!(
            y_prev <= START && y < NUM_LABELS,
            "invalid label ids ({y_prev}, {y})"
        );
        let row = self.weights.row(pair_index(y_prev, y));
        let mut s = self.biases.data()[pair_index(y_prev, y)];
        for (w, x) in row.iter().zip(g) {
            s += w * x;
        }
        s
    }
}

/// Log of the partition sum over all label sequences, by the forward
/// recursion in log space.
pub fn log_partition(features: &[Vec<f64>], params: &CrfParams) -> Result<f64, CrfError> {
    if features.is_empty() {
        return Err(CrfError::EmptyInput);
    }
    let mut alpha = [0.0f64; NUM_LABELS];
    for (y, a) in alpha.iter_mut().enumerate() {
        *a = params.pair_score(START, y, &features[0]);
    }
    for g in &features[1..] {
        let mut next = [0.0f64; NUM_LABELS];
        for (y, n) in next.iter_mut().enumerate() {
            let terms: Vec<f64> = (0..NUM_LABELS)
                .map(|y_prev| alpha[y_prev] + params.pair_score(y_prev, y, g))
                .collect();
            *n = crate::autodiff::logsumexp_slice(&terms);
        }
        alpha = next;
    }
    Ok(crate::autodiff::logsumexp_slice(&alpha))
}

/// Log-probability of `labels` given `features`; always <= 0.
pub fn log_likelihood(
    features: &[Vec<f64>],
    labels: &[Label],
    params: &CrfParams,
) -> Result<f64, CrfError> {
    if features.len() != labels.len() {
        return Err(CrfError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    let score = sequence_score(features, labels, params)?;
    Ok(score - log_partition(features, params)?)
}

/// Unnormalized log-score of one label sequence.
pub fn sequence_score(
    features: &[Vec<f64>],
    labels: &[Label],
    params: &CrfParams,
) -> Result<f64, CrfError> {
    if features.is_empty() {
        return Err(CrfError::EmptyInput);
    }
    let mut prev = START;
    let mut score = 0.0;
    for (g, label) in features.iter().zip(labels) {
        score += params.pair_score(prev, label.id(), g);
        prev = label.id();
    }
    Ok(score)
}

/// Exact maximizer of the unnormalized score. Ties at every argmax prefer
/// the smaller label id, so decoding is deterministic.
pub fn viterbi(features: &[Vec<f64>], params: &CrfParams) -> Result<(Vec<Label>, f64), CrfError> {
    if features.is_empty() {
        return Err(CrfError::EmptyInput);
    }
    let n = features.len();
    let mut delta = [0.0f64; NUM_LABELS];
    for (y, d) in delta.iter_mut().enumerate() {
        *d = params.pair_score(START, y, &features[0]);
    }
    let mut back: Vec<[usize; NUM_LABELS]> = Vec::with_capacity(n - 1);
    for g in &features[1..] {
        let mut next = [f64::NEG_INFINITY; NUM_LABELS];
        let mut bp = [0usize; NUM_LABELS];
        for (y, (n_y, b_y)) in next.iter_mut().zip(bp.iter_mut()).enumerate() {
            for (y_prev, &d_prev) in delta.iter().enumerate() {
                let cand = d_prev + params.pair_score(y_prev, y, g);
                // strict > keeps the smallest maximizing predecessor
                if cand > *n_y {
                    *n_y = cand;
                    *b_y = y_prev;
                }
            }
        }
        back.push(bp);
        delta = next;
    }
    let mut best_y = 0;
    for y in 1..NUM_LABELS {
        if delta[y] > delta[best_y] {
            best_y = y;
        }
    }
    let best_score = delta[best_y];
    let mut ids = vec![best_y];
    for bp in back.iter().rev() {
        best_y = bp[best_y];
        ids.push(best_y);
    }
    ids.reverse();
    Ok((ids.into_iter().map(Label::from_id).collect(), best_score))
}

/// Maximum sequence length accepted by the exhaustive oracles.
pub const BRUTE_FORCE_MAX_LEN: usize = 10;

fn enumerate_sequences(n: usize) -> impl Iterator<Item = Vec<usize>> {
    // Lexicographic over label ids, position 1 most significant.
    (0..3usize.pow(n as u32)).map(move |mut code| {
        let mut seq = vec![0usize; n];
        for slot in seq.iter_mut().rev() {
            *slot = code % NUM_LABELS;
            code /= NUM_LABELS;
        }
        seq
    })
}

/// Exhaustive log-partition over all `3^N` sequences.
pub fn brute_force_log_partition(
    features: &[Vec<f64>],
    params: &CrfParams,
) -> Result<f64, CrfError> {
    let n = features.len();
    if n == 0 {
        return Err(CrfError::EmptyInput);
    }
    if n > BRUTE_FORCE_MAX_LEN {
        return Err(CrfError::TooLongForBruteForce {
            len: n,
            max: BRUTE_FORCE_MAX_LEN,
        });
    }
    let scores: Vec<f64> = enumerate_sequences(n)
        .map(|seq| {
            let labels: Vec<Label> = seq.into_iter().map(Label::from_id).collect();
            sequence_score(features, &labels, params).unwrap()
        })
        .collect();
    Ok(crate::autodiff::logsumexp_slice(&scores))
}

/// Exhaustive argmax with the same tie-break Viterbi realizes: among
/// maximizing sequences, the one chosen by backtracking with
/// smallest-id preference (reverse-lexicographically smallest).
pub fn brute_force_best(
    features: &[Vec<f64>],
    params: &CrfParams,
) -> Result<(Vec<Label>, f64), CrfError> {
    let n = features.len();
    if n == 0 {
        return Err(CrfError::EmptyInput);
    }
    if n > BRUTE_FORCE_MAX_LEN {
        return Err(CrfError::TooLongForBruteForce {
            len: n,
            max: BRUTE_FORCE_MAX_LEN,
        });
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for seq in enumerate_sequences(n) {
        let labels: Vec<Label> = seq.iter().map(|&i| Label::from_id(i)).collect();
        let score = sequence_score(features, &labels, params).unwrap();
        let replace = match &best {
            None => true,
            Some((cur, cur_score)) => {
                score > *cur_score
                    || (score == *cur_score && reverse_lex_less(&seq, cur))
            }
        };
        if replace {
            best = Some((seq, score));
        }
    }
    let (seq, score) = best.unwrap();
    Ok((seq.into_iter().map(Label::from_id).collect(), score))
}

fn reverse_lex_less(a: &[usize], b: &[usize]) -> bool {
    for (x, y) in a.iter().rev().zip(b.iter().rev()) {
        if x != y {
            return x < y;
        }
    }
    false
}

/// Parameter ids of the CRF tensors inside a model's store.
#[derive(Clone, Copy, Debug)]
pub struct CrfParamIds {
    pub weights: ParamId,
    pub biases: ParamId,
}

fn pair_score_value(
    g: &mut Graph,
    leaves: &mut ParamLeaves,
    ids: CrfParamIds,
    y_prev: usize,
    y: usize,
    feat: Value,
) -> Value {
    let idx = pair_index(y_prev, y);
    let w = leaves.row(g, ids.weights, idx);
    let b_vec = leaves.leaf(g, ids.biases);
    let b = g.select(b_vec, idx);
    let dot = g.dot(w, feat);
    g.add(dot, b)
}

/// Negative log-likelihood of `labels` as a graph node, built from the
/// same log-space forward recursion as [`log_partition`].
pub fn nll_value(
    g: &mut Graph,
    leaves: &mut ParamLeaves,
    ids: CrfParamIds,
    features: &[Value],
    labels: &[Label],
) -> Value {
    assert!(!features.is_empty(), "empty feature sequence");
    assert_eq!(
        features.len(),
        labels.len(),
        "feature/label length mismatch: {} vs {}",
        features.len(),
        labels.len()
    );

    // Gold path score.
    let mut prev = START;
    let mut gold_terms = Vec::with_capacity(labels.len());
    for (feat, label) in features.iter().zip(labels) {
        gold_terms.push(pair_score_value(g, leaves, ids, prev, label.id(), *feat));
        prev = label.id();
    }
    let gold = g.sum(&gold_terms);

    // Forward recursion.
    let mut alpha: Vec<Value> = (0..NUM_LABELS)
        .map(|y| pair_score_value(g, leaves, ids, START, y, features[0]))
        .collect();
    for feat in &features[1..] {
        let mut next = Vec::with_capacity(NUM_LABELS);
        for y in 0..NUM_LABELS {
            let terms: Vec<Value> = (0..NUM_LABELS)
                .map(|y_prev| {
                    let s = pair_score_value(g, leaves, ids, y_prev, y, *feat);
                    g.add(alpha[y_prev], s)
                })
                .collect();
            let stacked = g.stack(&terms);
            next.push(g.logsumexp(stacked));
        }
        alpha = next;
    }
    let stacked = g.stack(&alpha);
    let log_z = g.logsumexp(stacked);
    g.sub(log_z, gold)
}
