//! The three-bias-mode experiment protocol, tagger span scoring, and the
//! bias-size sweep.
//!
//! Each test pair is normalized against its own bank: the pair's relevant
//! entries (whole phrases, or their component words in words mode) padded
//! with distractors drawn from the other pairs' entries, mirroring a runtime
//! list that always contains the current sentence's terms.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{split_wer, EvalError, MetricsReport, PairCounts, ReportConfig};
use crate::bam::BiasEntry;
use crate::data::SpokenReferencePair;
use crate::model::{extract_regions, AdaCsModel};
use crate::nn::tensor::Scalar;
use crate::text::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BiasMode {
    None,
    Words,
    Phrases,
}

impl BiasMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BiasMode::None => "none",
            BiasMode::Words => "words",
            BiasMode::Phrases => "phrases",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(BiasMode::None),
            "words" => Some(BiasMode::Words),
            "phrases" => Some(BiasMode::Phrases),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: BiasMode,
    pub bank_size: usize,
    pub seed: u64,
    /// Fail when one pair's own entries exceed `bank_size` instead of
    /// keeping them all without distractors.
    pub strict_bank: bool,
}

impl ExperimentConfig {
    pub fn new(mode: BiasMode, bank_size: usize, seed: u64) -> Self {
        Self {
            mode,
            bank_size,
            seed,
            strict_bank: false,
        }
    }
}

/// A pair's own bias entries under the given mode: whole phrases, or their
/// deduplicated component words.
fn pair_entries(pair: &SpokenReferencePair, mode: BiasMode) -> Vec<String> {
    match mode {
        BiasMode::None => Vec::new(),
        BiasMode::Phrases => pair.phrases(),
        BiasMode::Words => {
            let words: BTreeSet<String> = pair
                .phrases()
                .iter()
                .flat_map(|p| p.split_whitespace().map(|w| w.to_string()))
                .collect();
            words.into_iter().collect()
        }
    }
}

/// Pool of candidate distractors: every pair's entries across the test set.
fn entry_pool(test: &[SpokenReferencePair], mode: BiasMode) -> Vec<String> {
    let set: BTreeSet<String> = test.iter().flat_map(|p| pair_entries(p, mode)).collect();
    set.into_iter().collect()
}

fn pair_bank_list(
    pair: &SpokenReferencePair,
    pool: &[String],
    cfg: &ExperimentConfig,
    pair_index: usize,
) -> Result<Vec<String>, EvalError> {
    let own = pair_entries(pair, cfg.mode);
    if cfg.strict_bank && own.len() > cfg.bank_size {
        return Err(EvalError::BankTooSmall {
            need: own.len(),
            size: cfg.bank_size,
        });
    }
    let own_set: BTreeSet<String> = own.iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed
            .wrapping_mul(0x5851_F42D_4C95_7F2D)
            .wrapping_add((pair_index as u64).wrapping_mul(0x1405_7B7E_F767_814F)),
    );
    let mut list = own;
    let mut pool_rest: Vec<&String> = pool.iter().filter(|p| !own_set.contains(*p)).collect();
    let needed = cfg.bank_size.saturating_sub(list.len()).min(pool_rest.len());
    if needed > 0 {
        let (sampled, _) = pool_rest.partial_shuffle(&mut rng, needed);
        list.extend(sampled.iter().map(|s| (*s).clone()));
    }
    list.shuffle(&mut rng);
    Ok(list)
}

/// Normalizes every test pair under the experiment protocol and aggregates
/// the split WER. Throughput is measured around bank encoding plus
/// normalization only.
pub fn run_experiment<S: Scalar>(
    model: &AdaCsModel<S>,
    vocab: &Vocabulary,
    test: &[SpokenReferencePair],
    cfg: &ExperimentConfig,
) -> Result<MetricsReport, EvalError> {
    let pool = entry_pool(test, cfg.mode);
    let mut total = PairCounts::default();
    let mut wall = 0.0f64;
    // the no-bias bank never changes; encode it once
    let none_bank = if cfg.mode == BiasMode::None {
        Some(model.freeze_bank(&[])?)
    } else {
        None
    };
    for (i, pair) in test.iter().enumerate() {
        let started = Instant::now();
        let hyp = match &none_bank {
            Some(bank) => model.normalize(&pair.spoken, vocab, bank)?.output,
            None => {
                let list = pair_bank_list(pair, &pool, cfg, i)?;
                let entries: Vec<BiasEntry> =
                    list.iter().map(|p| BiasEntry::new(p, vocab)).collect();
                let bank = model.freeze_bank(&entries)?;
                model.normalize(&pair.spoken, vocab, &bank)?.output
            }
        };
        wall += started.elapsed().as_secs_f64();
        let pc = split_wer(pair, &hyp)?;
        total.overall.add(&pc.overall);
        total.cs.add(&pc.cs);
        total.non_cs.add(&pc.non_cs);
    }
    let speed = if wall > 0.0 {
        test.len() as f64 / wall
    } else {
        0.0
    };
    Ok(MetricsReport::from_counts(
        total,
        speed,
        ReportConfig {
            bias_mode: cfg.mode.as_str().to_string(),
            bank_size: cfg.bank_size,
            pairs: test.len(),
            threads: 1,
            seed: cfg.seed,
        },
    ))
}

/// Span-level tagger precision/recall/F1 with exact boundary match.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpanF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

/// Scores the tagger alone: predicted regions against annotated spans, exact
/// token boundaries, micro-averaged over the test set.
pub fn tagger_span_f1<S: Scalar>(
    model: &AdaCsModel<S>,
    vocab: &Vocabulary,
    test: &[SpokenReferencePair],
    cfg: &ExperimentConfig,
) -> Result<SpanF1, EvalError> {
    let pool = entry_pool(test, cfg.mode);
    let none_bank = if cfg.mode == BiasMode::None {
        Some(model.freeze_bank(&[])?)
    } else {
        None
    };
    let mut tp = 0usize;
    let mut predicted = 0usize;
    let mut gold_total = 0usize;
    for (i, pair) in test.iter().enumerate() {
        let tags = match &none_bank {
            Some(bank) => model.tag_sentence(&pair.spoken, vocab, bank)?,
            None => {
                let list = pair_bank_list(pair, &pool, cfg, i)?;
                let entries: Vec<BiasEntry> =
                    list.iter().map(|p| BiasEntry::new(p, vocab)).collect();
                let bank = model.freeze_bank(&entries)?;
                model.tag_sentence(&pair.spoken, vocab, &bank)?
            }
        };
        let pred: BTreeSet<(usize, usize)> = extract_regions(&tags)
            .iter()
            .map(|r| (r.start, r.end))
            .collect();
        let gold: BTreeSet<(usize, usize)> = pair
            .spans
            .iter()
            .map(|s| (s.spoken_start, s.spoken_end - 1))
            .collect();
        tp += pred.intersection(&gold).count();
        predicted += pred.len();
        gold_total += gold.len();
    }
    let precision = if predicted == 0 {
        0.0
    } else {
        tp as f64 / predicted as f64
    };
    let recall = if gold_total == 0 {
        0.0
    } else {
        tp as f64 / gold_total as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(SpanF1 {
        precision,
        recall,
        f1,
        true_positives: tp,
        predicted,
        gold: gold_total,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub cs_wer: f64,
    pub n_wer: f64,
    pub wer: f64,
    pub examples_per_s: f64,
}

/// One `run_experiment` per bank size with a fixed distractor seed.
pub fn bias_size_sweep<S: Scalar>(
    model: &AdaCsModel<S>,
    vocab: &Vocabulary,
    test: &[SpokenReferencePair],
    mode: BiasMode,
    sizes: &[usize],
    seed: u64,
) -> Result<Vec<SweepRow>, EvalError> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let report = run_experiment(
            model,
            vocab,
            test,
            &ExperimentConfig::new(mode, size, seed),
        )?;
        rows.push(SweepRow {
            size,
            cs_wer: report.cs_wer,
            n_wer: report.n_wer,
            wer: report.wer,
            examples_per_s: report.speed_examples_per_s,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("size,cs_wer,n_wer,wer,examples_per_s\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.3}\n",
            r.size, r.cs_wer, r.n_wer, r.wer, r.examples_per_s
        ));
    }
    out
}
