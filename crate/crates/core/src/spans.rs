//! Decoding BIO label sequences into aspect-term spans and exact-match
//! span scoring.

use thiserror::Error;

use crate::corpus::Label;

/// An extracted aspect term: space-joined surface text plus 1-based
/// begin (inclusive) / end (exclusive) token indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AspectSpan {
    pub text: String,
    pub begin: usize,
    pub end: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpanError {
    #[error("label/token length mismatch: {labels} labels vs {tokens} tokens")]
    LengthMismatch { labels: usize, tokens: usize },
}

/// Decode a label sequence into aspect spans.
///
/// A span opens at `B-AP` and extends through following `I-AP` tokens; an
/// `O` closes it, a new `B-AP` closes it and opens the next one, and a
/// span still open after the last token is flushed. `I-AP` without a
/// preceding `B-AP` opens nothing and is skipped.
pub fn decode_spans<S: AsRef<str>>(labels: &[Label], tokens: &[S]) -> Result<Vec<AspectSpan>, SpanError> {
    if labels.len() != tokens.len() {
        return Err(SpanError::LengthMismatch {
            labels: labels.len(),
            tokens: tokens.len(),
        });
    }
    let mut result = Vec::new();
    let mut open = false;
    let mut start = 0usize;
    let emit = |result: &mut Vec<AspectSpan>, start: usize, end: usize| {
        let text = tokens[start - 1..end - 1]
            .iter()
            .map(|t| t.as_ref())
            .collect::<Vec<_>>()
            .join(" ");
        result.push(AspectSpan {
            text,
            begin: start,
            end,
        });
    };
    for (i, label) in (1..=labels.len()).zip(labels) {
        match label {
            Label::Outside if open => {
                emit(&mut result, start, i);
                open = false;
                start = 0;
            }
            Label::BeginAspect => {
                if open {
                    emit(&mut result, start, i);
                }
                open = true;
                start = i;
            }
            // I-AP continues an open span; an orphan I-AP matches no branch.
            _ => {}
        }
    }
    if open {
        emit(&mut result, start, labels.len() + 1);
    }
    Ok(result)
}

/// Encode disjoint, begin-sorted spans back to a BIO sequence.
pub fn encode_spans(spans: &[AspectSpan], len: usize) -> Vec<Label> {
    let mut labels = vec![Label::Outside; len];
    for span in spans {
        labels[span.begin - 1] = Label::BeginAspect;
        for slot in labels[span.begin..span.end - 1].iter_mut() {
            *slot = Label::InsideAspect;
        }
    }
    labels
}

/// Exact-match precision/recall/F1 counts over spans.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold_count: usize,
    pub pred_count: usize,
    pub match_count: usize,
}

impl EvalReport {
    /// Recompute the rates from the counts. With no predictions precision
    /// is 1, with no gold spans recall is 1; F1 is 0 when P + R is 0.
    pub fn from_counts(gold: usize, pred: usize, matched: usize) -> EvalReport {
        let precision = if pred == 0 {
            1.0
        } else {
            matched as f64 / pred as f64
        };
        let recall = if gold == 0 {
            1.0
        } else {
            matched as f64 / gold as f64
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        EvalReport {
            precision,
            recall,
            f1,
            gold_count: gold,
            pred_count: pred,
            match_count: matched,
        }
    }

    /// Pool per-sentence counts into corpus-level micro scores.
    pub fn pool<I: IntoIterator<Item = EvalReport>>(reports: I) -> EvalReport {
        let (mut gold, mut pred, mut matched) = (0, 0, 0);
        for r in reports {
            gold += r.gold_count;
            pred += r.pred_count;
            matched += r.match_count;
        }
        EvalReport::from_counts(gold, pred, matched)
    }
}

/// Score predicted spans of one sentence against gold spans: a prediction
/// matches iff its (begin, end) pair equals a gold span's exactly.
pub fn span_f1(gold: &[AspectSpan], predicted: &[AspectSpan]) -> EvalReport {
    let matched = predicted
        .iter()
        .filter(|p| gold.iter().any(|g| g.begin == p.begin && g.end == p.end))
        .count();
    EvalReport::from_counts(gold.len(), predicted.len(), matched)
}
