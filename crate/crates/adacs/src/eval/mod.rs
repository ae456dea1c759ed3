//! Metrics: Levenshtein word alignment and the WER / N-WER / CS-WER split,
//! plus the experiment protocol and bias-size sweep.
//!
//! N-WER counts errors on words that need no normalization; CS-WER counts
//! errors on the code-switched words. Substitutions and deletions belong to
//! their reference word's category; an insertion belongs to the category of
//! the following reference word (the preceding one at sentence end).

mod experiment;

pub use experiment::{
    bias_size_sweep, run_experiment, sweep_csv, tagger_span_f1, BiasMode, ExperimentConfig,
    SpanF1, SweepRow,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SpokenReferencePair;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference sentence is empty")]
    EmptyReference,
    #[error("bank size {size} cannot hold the {need} entries of one pair")]
    BankTooSmall { need: usize, size: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    Match,
    Substitute,
    Delete,
    Insert,
}

/// One step of an optimal alignment. `ref_index`/`hyp_index` are set for the
/// sides the op consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignmentOp {
    pub kind: OpKind,
    pub ref_index: Option<usize>,
    pub hyp_index: Option<usize>,
}

/// Optimal unit-cost alignment between two word sequences. Ties prefer
/// match, then substitute, then delete, then insert.
pub fn levenshtein_align<T: AsRef<str>>(reference: &[T], hypothesis: &[T]) -> Vec<AlignmentOp> {
    let r = reference.len();
    let h = hypothesis.len();
    let width = h + 1;
    let mut d = vec![0usize; (r + 1) * width];
    for i in 0..=r {
        d[i * width] = i;
    }
    for j in 0..=h {
        d[j] = j;
    }
    for i in 1..=r {
        for j in 1..=h {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let diag = d[(i - 1) * width + j - 1] + usize::from(!same);
            let del = d[(i - 1) * width + j] + 1;
            let ins = d[i * width + j - 1] + 1;
            d[i * width + j] = diag.min(del).min(ins);
        }
    }
    let mut ops = Vec::with_capacity(r.max(h));
    let (mut i, mut j) = (r, h);
    while i > 0 || j > 0 {
        let cost = d[i * width + j];
        let same = i > 0 && j > 0 && reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
        if same && cost == d[(i - 1) * width + j - 1] {
            ops.push(AlignmentOp {
                kind: OpKind::Match,
                ref_index: Some(i - 1),
                hyp_index: Some(j - 1),
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && cost == d[(i - 1) * width + j - 1] + 1 {
            ops.push(AlignmentOp {
                kind: OpKind::Substitute,
                ref_index: Some(i - 1),
                hyp_index: Some(j - 1),
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && cost == d[(i - 1) * width + j] + 1 {
            ops.push(AlignmentOp {
                kind: OpKind::Delete,
                ref_index: Some(i - 1),
                hyp_index: None,
            });
            i -= 1;
        } else {
            ops.push(AlignmentOp {
                kind: OpKind::Insert,
                ref_index: None,
                hyp_index: Some(j - 1),
            });
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

pub fn edit_count(ops: &[AlignmentOp]) -> usize {
    ops.iter().filter(|o| o.kind != OpKind::Match).count()
}

/// Error tallies for one word category. WER = (S+D+I)/N; defined as 0 when
/// the category holds no reference words (N in the report flags that case).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl Counts {
    pub fn edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn wer(&self) -> f64 {
        if self.ref_words == 0 {
            0.0
        } else {
            self.edits() as f64 / self.ref_words as f64
        }
    }

    pub fn add(&mut self, other: &Counts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.ref_words += other.ref_words;
    }
}

/// Per-pair category tallies from one alignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairCounts {
    pub overall: Counts,
    pub cs: Counts,
    pub non_cs: Counts,
}

/// Aligns a hypothesis against the pair's reference and attributes every
/// error to the CS or non-CS category. A reference word is CS iff any of its
/// characters lies inside an annotated span.
pub fn split_wer(pair: &SpokenReferencePair, hypothesis: &str) -> Result<PairCounts, EvalError> {
    let ref_words = words_with_offsets(&pair.reference);
    if ref_words.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let word_is_cs: Vec<bool> = ref_words
        .iter()
        .map(|(start, end, _)| {
            pair.spans
                .iter()
                .any(|s| *start < s.ref_end && s.ref_start < *end)
        })
        .collect();
    let ref_tokens: Vec<&str> = ref_words.iter().map(|(_, _, w)| *w).collect();
    let hyp_tokens: Vec<&str> = hypothesis.split_whitespace().collect();
    let ops = levenshtein_align(&ref_tokens, &hyp_tokens);

    let mut out = PairCounts::default();
    out.overall.ref_words = ref_tokens.len();
    for &is_cs in &word_is_cs {
        if is_cs {
            out.cs.ref_words += 1;
        } else {
            out.non_cs.ref_words += 1;
        }
    }
    let mut consumed = 0usize; // reference words consumed so far
    for op in &ops {
        match op.kind {
            OpKind::Match => {
                consumed += 1;
            }
            OpKind::Substitute => {
                out.overall.substitutions += 1;
                category(&mut out, word_is_cs[consumed]).substitutions += 1;
                consumed += 1;
            }
            OpKind::Delete => {
                out.overall.deletions += 1;
                category(&mut out, word_is_cs[consumed]).deletions += 1;
                consumed += 1;
            }
            OpKind::Insert => {
                out.overall.insertions += 1;
                // following reference word; preceding one at sentence end
                let anchor = if consumed < word_is_cs.len() {
                    consumed
                } else {
                    word_is_cs.len() - 1
                };
                category(&mut out, word_is_cs[anchor]).insertions += 1;
            }
        }
    }
    Ok(out)
}

fn category<'a>(pc: &'a mut PairCounts, is_cs: bool) -> &'a mut Counts {
    if is_cs {
        &mut pc.cs
    } else {
        &mut pc.non_cs
    }
}

/// Whitespace words with their character offsets (`end` exclusive).
fn words_with_offsets(s: &str) -> Vec<(usize, usize, &str)> {
    let mut out = Vec::new();
    let mut start: Option<(usize, usize)> = None; // (char index, byte index)
    for (ci, (bi, c)) in s.char_indices().enumerate() {
        if c == ' ' {
            if let Some((cs, bs)) = start.take() {
                out.push((cs, ci, &s[bs..bi]));
            }
        } else if start.is_none() {
            start = Some((ci, bi));
        }
    }
    if let Some((cs, bs)) = start {
        out.push((cs, s.chars().count(), &s[bs..]));
    }
    out
}

/// Echo of the experiment configuration, for reproducibility.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub bias_mode: String,
    pub bank_size: usize,
    pub pairs: usize,
    pub threads: usize,
    pub seed: u64,
}

/// Aggregated metrics over a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub wer: f64,
    pub n_wer: f64,
    pub cs_wer: f64,
    pub overall: Counts,
    pub cs: Counts,
    pub non_cs: Counts,
    /// Wall-clock normalization throughput, bank encoding included; model
    /// loading and data parsing excluded.
    pub speed_examples_per_s: f64,
    pub config: ReportConfig,
}

impl MetricsReport {
    pub fn from_counts(
        total: PairCounts,
        speed_examples_per_s: f64,
        config: ReportConfig,
    ) -> Self {
        Self {
            wer: total.overall.wer(),
            n_wer: total.non_cs.wer(),
            cs_wer: total.cs.wer(),
            overall: total.overall,
            cs: total.cs,
            non_cs: total.non_cs,
            speed_examples_per_s,
            config,
        }
    }

    /// Copy with the wall-clock field cleared, for determinism comparisons.
    pub fn with_speed_zeroed(&self) -> Self {
        let mut r = self.clone();
        r.speed_examples_per_s = 0.0;
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}
