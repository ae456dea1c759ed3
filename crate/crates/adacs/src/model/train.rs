//! Label preparation, the four-part loss, the optimizer step, and the
//! training loop.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::forward::{bank_on_tape, decode_region_teacher, encode_tokens, tag_forward};
use super::{AdaCsModel, LossBreakdown, ModelError, Region, Tag};
use crate::bam::BiasEntry;
use crate::data::{sample_bias_list, SpokenReferencePair};
use crate::nn::optim::Adam;
use crate::nn::params::TapeParams;
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::{Scalar, Tensor};
use crate::text::{TokenSeq, Vocabulary};

/// One training example with every label the loss needs: BIO tags, per-token
/// bias-rank labels, and per-region targets with their bias labels.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub tokens: TokenSeq,
    pub tags: Vec<Tag>,
    pub enc_rank: Vec<usize>,
    pub regions: Vec<Region>,
}

impl PreparedExample {
    /// Derives labels from a pair against a bias list. `bias_index` maps a
    /// phrase to its 1-based entry index; a span whose phrase is missing from
    /// the list gets the dummy label 0, which trains tolerance to incomplete
    /// lists. Exact phrase match doubles as longest-match when both a word
    /// and a phrase containing it are listed.
    pub fn from_pair(
        pair: &SpokenReferencePair,
        vocab: &Vocabulary,
        bias_index: &BTreeMap<String, usize>,
    ) -> Result<Self, ModelError> {
        pair.validate()
            .map_err(|e| ModelError::BadExample(e.to_string()))?;
        let tokens = vocab.encode(&pair.spoken);
        let n = tokens.len();
        if n == 0 {
            return Err(ModelError::EmptySequence);
        }
        let mut tags = vec![Tag::O; n];
        let mut enc_rank = vec![0usize; n];
        let mut regions = Vec::with_capacity(pair.spans.len());
        for span in &pair.spans {
            // character offsets are token offsets: one token per character
            let (start, end) = (span.spoken_start, span.spoken_end);
            if end > n {
                return Err(ModelError::BadExample(format!(
                    "span [{start}, {end}) beyond {n} tokens"
                )));
            }
            let label = if span.bias_relevant {
                bias_index.get(&span.phrase).copied().unwrap_or(0)
            } else {
                0
            };
            tags[start] = Tag::B;
            for t in tags.iter_mut().take(end).skip(start + 1) {
                *t = Tag::I;
            }
            for l in enc_rank.iter_mut().take(end).skip(start) {
                *l = label;
            }
            regions.push(Region {
                start,
                end: end - 1,
                bias_label: label,
                target_ids: vocab.encode(&span.phrase),
            });
        }
        Ok(Self {
            tokens,
            tags,
            enc_rank,
            regions,
        })
    }

    pub fn gold_spans(&self) -> Vec<(usize, usize)> {
        self.regions.iter().map(|r| (r.start, r.end)).collect()
    }
}

/// Sums plus element counts for one loss component; mean = sum / count.
struct ComponentAcc {
    sums: Vec<NodeId>,
    count: usize,
}

impl ComponentAcc {
    fn new() -> Self {
        Self {
            sums: Vec::new(),
            count: 0,
        }
    }

    fn finish<S: Scalar>(self, tape: &mut Tape<S>) -> Result<NodeId, ModelError> {
        if self.count == 0 {
            return Ok(tape.leaf(Tensor::scalar(S::zero())));
        }
        let total = tape.add_n(&self.sums)?;
        Ok(tape.scale(total, S::from_f64(1.0 / self.count as f64)))
    }
}

pub(crate) struct LossNodes {
    pub breakdown: LossBreakdown,
    pub total: NodeId,
}

/// Builds the four-component loss over a batch on one tape. Components are
/// means over their own element counts across the whole batch; empty
/// components (no regions anywhere) are zero.
pub(crate) fn compute_loss_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &mut TapeParams,
    model: &AdaCsModel<S>,
    batch: &[PreparedExample],
    bank: &crate::bam::TapeBank,
) -> Result<LossNodes, ModelError> {
    let cfg = &model.config;
    let store = &model.store;
    let mut tagger = ComponentAcc::new();
    let mut enc_rank = ComponentAcc::new();
    let mut dec_rank = ComponentAcc::new();
    let mut gen = ComponentAcc::new();

    for ex in batch {
        let h = encode_tokens(tape, bind, store, cfg, &ex.tokens.ids)?;
        let fwd = tag_forward(tape, bind, store, cfg, h, bank, Some(&ex.enc_rank))?;
        let tag_targets: Vec<usize> = ex.tags.iter().map(|t| t.index()).collect();
        tagger.sums.push(tape.cross_entropy_sum(fwd.tag_logits, &tag_targets)?);
        tagger.count += tag_targets.len();
        enc_rank
            .sums
            .push(tape.cross_entropy_sum(fwd.enc_scores, &ex.enc_rank)?);
        enc_rank.count += ex.enc_rank.len();

        for region in &ex.regions {
            let h_region = tape.slice_rows(h, region.start, region.end + 1)?;
            let dec = decode_region_teacher(
                tape,
                bind,
                store,
                cfg,
                h_region,
                bank,
                &region.target_ids,
                region.bias_label,
            )?;
            let steps = dec.step_targets.len();
            gen.sums
                .push(tape.cross_entropy_sum(dec.gen_logits, &dec.step_targets)?);
            gen.count += steps;
            let rank_targets = vec![region.bias_label; steps];
            dec_rank
                .sums
                .push(tape.cross_entropy_sum(dec.dec_scores, &rank_targets)?);
            dec_rank.count += steps;
        }
    }

    let l_tagger = tagger.finish(tape)?;
    let l_enc_rank = enc_rank.finish(tape)?;
    let l_dec_rank = dec_rank.finish(tape)?;
    let l_gen = gen.finish(tape)?;
    let total = tape.add_n(&[l_tagger, l_enc_rank, l_dec_rank, l_gen])?;
    let breakdown = LossBreakdown::new(
        tape.value(l_tagger).item().as_f64(),
        tape.value(l_enc_rank).item().as_f64(),
        tape.value(l_dec_rank).item().as_f64(),
        tape.value(l_gen).item().as_f64(),
    );
    Ok(LossNodes { breakdown, total })
}

/// What one optimizer step reports back.
#[derive(Debug, Clone, Copy)]
pub struct TrainStepInfo {
    pub loss: LossBreakdown,
    /// Global gradient norm after clipping.
    pub grad_norm: f64,
}

impl<S: Scalar> AdaCsModel<S> {
    /// Computes the batch loss without touching gradients.
    pub fn compute_loss(
        &self,
        batch: &[PreparedExample],
        bias_entries: &[BiasEntry],
    ) -> Result<LossBreakdown, ModelError> {
        let mut tape = Tape::new();
        let mut bind = TapeParams::new();
        let bank = bank_on_tape(&mut tape, &mut bind, &self.store, &self.config, bias_entries)?;
        let loss = compute_loss_on_tape(&mut tape, &mut bind, self, batch, &bank)?;
        Ok(loss.breakdown)
    }

    /// Computes the batch loss and adds its gradients into the store without
    /// an optimizer step. Callers use this for gradient accumulation and for
    /// gradient verification.
    pub fn accumulate_gradients(
        &mut self,
        batch: &[PreparedExample],
        bias_entries: &[BiasEntry],
    ) -> Result<LossBreakdown, ModelError> {
        let mut tape = Tape::new();
        let mut bind = TapeParams::new();
        let bank = bank_on_tape(&mut tape, &mut bind, &self.store, &self.config, bias_entries)?;
        let loss = compute_loss_on_tape(&mut tape, &mut bind, self, batch, &bank)?;
        let grads = tape.backward(loss.total)?;
        bind.accumulate_into(&grads, &mut self.store)?;
        Ok(loss.breakdown)
    }

    /// One forward/backward/update step. The bias bank is re-encoded on the
    /// step's own tape so ranking and attention gradients reach the shared
    /// encoder.
    pub fn train_step(
        &mut self,
        batch: &[PreparedExample],
        bias_entries: &[BiasEntry],
        opt: &mut Adam<S>,
    ) -> Result<TrainStepInfo, ModelError> {
        let mut tape = Tape::new();
        let mut bind = TapeParams::new();
        let bank = bank_on_tape(&mut tape, &mut bind, &self.store, &self.config, bias_entries)?;
        let loss = compute_loss_on_tape(&mut tape, &mut bind, self, batch, &bank)?;
        if !loss.breakdown.is_finite() {
            return Err(ModelError::Diverged {
                step: opt.steps_taken() + 1,
            });
        }
        let grads = tape.backward(loss.total)?;
        bind.accumulate_into(&grads, &mut self.store)?;
        let grad_norm = opt.step(&mut self.store).as_f64();
        Ok(TrainStepInfo {
            loss: loss.breakdown,
            grad_norm,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Bias list size sampled per step.
    pub bank_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Hard cap on optimizer steps; `None` runs all epochs.
    pub max_steps: Option<u64>,
    /// Wall-clock safety cap. Leave `None` for fully deterministic runs.
    pub time_budget: Option<Duration>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 8,
            bank_size: 200,
            lr: 3e-4,
            seed: 0,
            max_steps: None,
            time_budget: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: LossBreakdown,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochStats>,
    pub steps: u64,
    pub per_step_losses: Vec<LossBreakdown>,
    pub stopped_early: bool,
}

/// Trains a model: per-epoch shuffling, a fresh bias list per step (the
/// batch's CS phrases plus random lexicon distractors), and an Adam update
/// per batch. Aborts with a diagnostic if the loss goes non-finite.
pub fn fit<S: Scalar>(
    model: &mut AdaCsModel<S>,
    pairs: &[SpokenReferencePair],
    vocab: &Vocabulary,
    lexicon: &[String],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochStats),
) -> Result<FitReport, ModelError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if pairs.is_empty() {
        return Err(ModelError::BadExample("training set is empty".into()));
    }
    let mut opt = Adam::new(cfg.lr);
    let mut report = FitReport {
        epochs: Vec::new(),
        steps: 0,
        per_step_losses: Vec::new(),
        stopped_early: false,
    };
    let start = Instant::now();
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut shuffle_rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37));
        order.shuffle(&mut shuffle_rng);
        let epoch_start = Instant::now();
        let mut epoch_steps = 0u64;
        let mut sums = [0.0f64; 5];
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                report.stopped_early = true;
                break 'epochs;
            }
            if cfg.time_budget.is_some_and(|b| start.elapsed() >= b) {
                report.stopped_early = true;
                break 'epochs;
            }
            let batch_pairs: Vec<&SpokenReferencePair> =
                chunk.iter().map(|&i| &pairs[i]).collect();
            let mut bias_rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                cfg.seed
                    .wrapping_mul(0x85EB_CA6B)
                    .wrapping_add(report.steps.wrapping_mul(0xC2B2_AE35)),
            );
            let bias_list = sample_bias_list(
                &batch_pairs,
                lexicon,
                cfg.bank_size,
                false,
                &mut bias_rng,
            )
            .map_err(|e| ModelError::BadExample(e.to_string()))?;
            let bias_index: BTreeMap<String, usize> = bias_list
                .iter()
                .enumerate()
                .map(|(i, p)| (p.clone(), i + 1))
                .collect();
            let entries: Vec<BiasEntry> = bias_list
                .iter()
                .map(|p| BiasEntry::new(p, vocab))
                .collect();
            let batch: Vec<PreparedExample> = batch_pairs
                .iter()
                .map(|p| PreparedExample::from_pair(p, vocab, &bias_index))
                .collect::<Result<_, _>>()?;
            let info = model.train_step(&batch, &entries, &mut opt)?;
            report.steps += 1;
            epoch_steps += 1;
            let lb = info.loss;
            sums[0] += lb.l_tagger;
            sums[1] += lb.l_enc_rank;
            sums[2] += lb.l_dec_rank;
            sums[3] += lb.l_gen;
            sums[4] += lb.total;
            report.per_step_losses.push(lb);
        }
        if epoch_steps > 0 {
            let n = epoch_steps as f64;
            let stats = EpochStats {
                epoch,
                steps: epoch_steps,
                mean_loss: LossBreakdown {
                    l_tagger: sums[0] / n,
                    l_enc_rank: sums[1] / n,
                    l_dec_rank: sums[2] / n,
                    l_gen: sums[3] / n,
                    total: sums[4] / n,
                },
                wall_seconds: epoch_start.elapsed().as_secs_f64(),
            };
            progress(&stats);
            report.epochs.push(stats);
        }
    }
    Ok(report)
}
