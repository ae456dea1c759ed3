//! Forward passes: sentence encoding, bias bank encoding, tagging, region
//! decoding (teacher-forced and greedy), and the normalize pipeline.

use super::{extract_regions, AdaCsModel, ModelConfig, ModelError, Region, Tag, TagSequence};
use crate::bam::{self, BiasBank, BiasEntry, TapeBank};
use crate::nn::layers::{bind_attention, decoder_layer, encoder_layer, multi_head_attention};
use crate::nn::params::{ParameterStore, TapeParams};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::{argmax, Scalar, Tensor};
use crate::nn::NnError;
use crate::text::{TokenSeq, Vocabulary, BOS, EOS};

/// Runs the shared text encoder over token ids: embeddings plus learned
/// positions, the encoder stack, and a final layer norm.
pub(crate) fn encode_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &mut TapeParams,
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    ids: &[usize],
) -> Result<NodeId, NnError> {
    if ids.is_empty() {
        return Err(NnError::Shape("encoder input is empty".into()));
    }
    if ids.len() > cfg.max_seq_len {
        return Err(NnError::Shape(format!(
            "sequence of {} tokens exceeds the positional table ({})",
            ids.len(),
            cfg.max_seq_len
        )));
    }
    let tok_table = bind.node(tape, store, "embed.tok")?;
    let pos_table = bind.node(tape, store, "embed.pos")?;
    let tok = tape.embedding(tok_table, ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = tape.embedding(pos_table, &positions)?;
    let mut x = tape.add(tok, pos)?;
    for l in 0..cfg.enc_layers {
        x = encoder_layer(tape, bind, store, &format!("enc.{l}"), x, cfg.heads)?;
    }
    let g = bind.node(tape, store, "enc.norm.g")?;
    let b = bind.node(tape, store, "enc.norm.b")?;
    tape.layer_norm(x, g, b)
}

/// Encodes a bias list onto the given tape with the shared encoder weights.
pub(crate) fn bank_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &mut TapeParams,
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    entries: &[BiasEntry],
) -> Result<TapeBank, ModelError> {
    let dummy = bind.node(tape, store, "bam.dummy")?;
    let bank = bam::encode_bank_on_tape(tape, dummy, entries, |tape, seq| {
        encode_tokens(tape, bind, store, cfg, &seq.ids)
    })?;
    Ok(bank)
}

pub(crate) fn freeze_bank_impl<S: Scalar>(
    model: &AdaCsModel<S>,
    entries: &[BiasEntry],
) -> Result<BiasBank<S>, ModelError> {
    let mut tape = Tape::new();
    let mut bind = TapeParams::new();
    let bank = bank_on_tape(&mut tape, &mut bind, &model.store, &model.config, entries)?;
    Ok(bam::freeze_bank(&tape, &bank, entries))
}

pub(crate) struct TagForward {
    pub tag_logits: NodeId,
    pub enc_scores: NodeId,
    pub tags: TagSequence,
    /// Bank entry each token attended to.
    pub selected: Vec<usize>,
}

/// Encoder-side BAM over every hidden state, then the 3-class tagger head.
/// `teacher` carries per-token ground-truth bias indices during training.
pub(crate) fn tag_forward<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &mut TapeParams,
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    h: NodeId,
    bank: &TapeBank,
    teacher: Option<&[usize]>,
) -> Result<TagForward, ModelError> {
    let fwd = bam::bam_forward_rows(
        tape,
        bind,
        store,
        "bam.enc.attn",
        cfg.heads,
        h,
        bank,
        teacher,
    )?;
    let w = bind.node(tape, store, "tagger.w")?;
    let b = bind.node(tape, store, "tagger.b")?;
    let tag_logits = tape.linear(fwd.augmented, w, Some(b))?;
    let n = tape.value(tag_logits).dims2().0;
    let tags = TagSequence::new(
        (0..n)
            .map(|i| Tag::from_index(argmax(tape.value(tag_logits).row(i))).expect("3 classes"))
            .collect(),
    );
    Ok(TagForward {
        tag_logits,
        enc_scores: fwd.scores,
        tags,
        selected: fwd.selected,
    })
}

pub(crate) struct TeacherDecode {
    pub gen_logits: NodeId,
    pub dec_scores: NodeId,
    /// Per-step targets: the region's normalized phrase plus EOS.
    pub step_targets: Vec<usize>,
}

/// Teacher-forced decoder over one region: input is BOS followed by the
/// target phrase; every step's output feature runs through the decoder-side
/// BAM (teacher-forced to the region's bias label) before the vocabulary
/// head. Produces |target|+1 steps of logits, EOS included.
pub(crate) fn decode_region_teacher<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &mut TapeParams,
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    h_region: NodeId,
    bank: &TapeBank,
    target: &TokenSeq,
    region_label: usize,
) -> Result<TeacherDecode, ModelError> {
    let mut input = Vec::with_capacity(target.len() + 1);
    input.push(BOS);
    input.extend_from_slice(&target.ids);
    let features = decoder_features(tape, bind, store, cfg, h_region, &input)?;
    let steps = input.len();
    let fwd = bam::bam_forward_rows(
        tape,
        bind,
        store,
        "bam.dec.attn",
        cfg.heads,
        features,
        bank,
        Some(&vec![region_label; steps]),
    )?;
    let w = bind.node(tape, store, "gen.w")?;
    let b = bind.node(tape, store, "gen.b")?;
    let gen_logits = tape.linear(fwd.augmented, w, Some(b))?;
    let mut step_targets = target.ids.clone();
    step_targets.push(EOS);
    Ok(TeacherDecode {
        gen_logits,
        dec_scores: fwd.scores,
        step_targets,
    })
}

/// The decoder stack over a BOS-prefixed input with cross-attention into the
/// region's encoder states. Returns the final per-step features.
fn decoder_features<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &mut TapeParams,
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    memory: NodeId,
    input_ids: &[usize],
) -> Result<NodeId, NnError> {
    if input_ids.len() > cfg.max_seq_len {
        return Err(NnError::Shape(format!(
            "decoder prefix of {} exceeds the positional table ({})",
            input_ids.len(),
            cfg.max_seq_len
        )));
    }
    let tok_table = bind.node(tape, store, "embed.tok")?;
    let pos_table = bind.node(tape, store, "embed.pos")?;
    let tok = tape.embedding(tok_table, input_ids)?;
    let positions: Vec<usize> = (0..input_ids.len()).collect();
    let pos = tape.embedding(pos_table, &positions)?;
    let mut x = tape.add(tok, pos)?;
    for l in 0..cfg.dec_layers {
        x = decoder_layer(tape, bind, store, &format!("dec.{l}"), x, memory, cfg.heads)?;
    }
    let g = bind.node(tape, store, "dec.norm.g")?;
    let b = bind.node(tape, store, "dec.norm.b")?;
    tape.layer_norm(x, g, b)
}

/// Next-token logits for a prefix against a frozen bank: runs the decoder
/// stack, applies the decoder-side BAM to the last step's feature with argmax
/// selection, and projects to the vocabulary. Exposed for step-by-step
/// decoding oracles; `decode_region_greedy` is the production path.
pub(crate) fn decode_step_logits<S: Scalar>(
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    h_region: &Tensor<S>,
    bank: &BiasBank<S>,
    prefix: &[usize],
) -> Result<(Vec<S>, usize), ModelError> {
    let mut tape = Tape::new();
    let mut bind = TapeParams::new();
    let memory = tape.leaf(h_region.clone());
    let features = decoder_features(&mut tape, &mut bind, store, cfg, memory, prefix)?;
    let steps = prefix.len();
    let last = tape.slice_rows(features, steps - 1, steps)?;

    // Rank against the pooled matrix and attend only over the chosen entry
    // (the 1/sqrt(d) temper matches training; argmax is unaffected).
    let pooled = tape.leaf(bank.p.clone());
    let raw = tape.matmul_nt(last, pooled)?;
    let scores = tape.scale(raw, S::from_f64(1.0 / (cfg.d_model as f64).sqrt()));
    let selected = argmax(tape.value(scores).row(0));
    let entry = tape.leaf(bank.e[selected].clone());
    let attn = bind_attention(&mut tape, &mut bind, store, "bam.dec.attn")?;
    let ctx = multi_head_attention(&mut tape, last, entry, &attn, cfg.heads, None)?;
    let z = tape.add(last, ctx)?;
    let w = bind.node(&mut tape, store, "gen.w")?;
    let b = bind.node(&mut tape, store, "gen.b")?;
    let logits = tape.linear(z, w, Some(b))?;
    Ok((tape.value(logits).row(0).to_vec(), selected))
}

/// Greedy autoregressive decode of one region. Returns the generated ids
/// (BOS/EOS excluded) and whether the step cap truncated the output.
pub(crate) fn decode_region_greedy<S: Scalar>(
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    h_region: &Tensor<S>,
    bank: &BiasBank<S>,
) -> Result<(TokenSeq, bool), ModelError> {
    let cap = cfg.decode_cap(h_region.dims2().0);
    let mut prefix = vec![BOS];
    let mut out = Vec::new();
    let mut truncated = true;
    for _ in 0..cap {
        let (logits, _) = decode_step_logits(store, cfg, h_region, bank, &prefix)?;
        let next = argmax(&logits);
        if next == EOS {
            truncated = false;
            break;
        }
        out.push(next);
        prefix.push(next);
    }
    Ok((TokenSeq::new(out), truncated))
}

/// Everything `normalize` learned about a sentence, for callers that want
/// more than the final string.
#[derive(Debug, Clone)]
pub struct NormalizeOutcome {
    pub output: String,
    pub tags: TagSequence,
    pub regions: Vec<Region>,
    /// Decoded replacement per region, post trimming.
    pub replacements: Vec<String>,
    /// Bank entry index each token's encoder-side BAM attended to.
    pub enc_selected: Vec<usize>,
    pub any_truncated: bool,
}

impl<S: Scalar> AdaCsModel<S> {
    /// Tags a sentence against a frozen bank (inference path: argmax BAM
    /// selection everywhere).
    pub fn tag_sentence(
        &self,
        sentence: &str,
        vocab: &Vocabulary,
        bank: &BiasBank<S>,
    ) -> Result<TagSequence, ModelError> {
        if sentence.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let ids = vocab.encode(sentence);
        let mut tape = Tape::new();
        let mut bind = TapeParams::new();
        let h = encode_tokens(&mut tape, &mut bind, &self.store, &self.config, &ids.ids)
            .map_err(map_seq_err(ids.len(), self.config.max_seq_len))?;
        let tape_bank = TapeBank::from_frozen(&mut tape, bank);
        let fwd = tag_forward(
            &mut tape,
            &mut bind,
            &self.store,
            &self.config,
            h,
            &tape_bank,
            None,
        )?;
        Ok(fwd.tags)
    }

    /// The full pipeline: encode, tag, extract regions, decode each region,
    /// splice the decoded text over the region's character span. Characters
    /// outside regions pass through untouched.
    pub fn normalize(
        &self,
        sentence: &str,
        vocab: &Vocabulary,
        bank: &BiasBank<S>,
    ) -> Result<NormalizeOutcome, ModelError> {
        if sentence.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let ids = vocab.encode(sentence);
        let mut tape = Tape::new();
        let mut bind = TapeParams::new();
        let h = encode_tokens(&mut tape, &mut bind, &self.store, &self.config, &ids.ids)
            .map_err(map_seq_err(ids.len(), self.config.max_seq_len))?;
        let tape_bank = TapeBank::from_frozen(&mut tape, bank);
        let fwd = tag_forward(
            &mut tape,
            &mut bind,
            &self.store,
            &self.config,
            h,
            &tape_bank,
            None,
        )?;
        let regions = extract_regions(&fwd.tags);
        let h_value = tape.value(h).clone();
        let enc_selected = fwd.selected.clone();
        drop(tape);

        let chars: Vec<char> = sentence.chars().collect();
        let mut output = String::with_capacity(sentence.len());
        let mut cursor = 0usize;
        let mut replacements = Vec::with_capacity(regions.len());
        let mut any_truncated = false;
        for region in &regions {
            output.extend(&chars[cursor..region.start]);
            let h_region = h_value.slice_rows(region.start, region.end + 1);
            let (decoded, truncated) =
                decode_region_greedy(&self.store, &self.config, &h_region, bank)?;
            any_truncated |= truncated;
            let text = vocab.decode(&decoded)?;
            let trimmed = text.trim_matches(' ').to_string();
            output.push_str(&trimmed);
            replacements.push(trimmed);
            cursor = region.end + 1;
        }
        output.extend(&chars[cursor..]);
        Ok(NormalizeOutcome {
            output,
            tags: fwd.tags,
            regions,
            replacements,
            enc_selected,
            any_truncated,
        })
    }
}

fn map_seq_err(len: usize, max: usize) -> impl Fn(NnError) -> ModelError {
    move |e| match e {
        NnError::Shape(_) if len > max => ModelError::SequenceTooLong { len, max },
        other => ModelError::Nn(other),
    }
}
