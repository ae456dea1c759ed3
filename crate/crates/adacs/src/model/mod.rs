//! The full network: encoder with bias-augmented BIO tagger, region
//! extraction, bias-augmented region decoder, the four-part training loss,
//! and the end-to-end normalize pipeline.

mod forward;
mod train;

pub use forward::NormalizeOutcome;
pub use train::{fit, EpochStats, FitReport, PreparedExample, TrainConfig, TrainStepInfo};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bam::{BamError, BiasBank, BiasEntry};
use crate::nn::checkpoint::{self, CheckpointError};
use crate::nn::layers::{
    register_attention, register_decoder_layer, register_encoder_layer, register_head,
    register_layer_norm,
};
use crate::nn::params::ParameterStore;
use crate::nn::tensor::{Scalar, Tensor};
use crate::nn::NnError;
use crate::text::{TextError, TokenSeq, Vocabulary};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds the positional table ({max})")]
    SequenceTooLong { len: usize, max: usize },
    #[error("cannot run the model on an empty sequence")]
    EmptySequence,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("example is inconsistent: {0}")]
    BadExample(String),
    #[error("loss became non-finite at step {step}")]
    Diverged { step: u64 },
    #[error("checkpoint does not match this model: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Bam(#[from] BamError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Model hyperparameters. `d_model` must be divisible by `heads`, and the
/// positional table must cover both input sentences and decoder prefixes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub max_decode_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.max_decode_len < 2 {
            return Err(ModelError::BadConfig(
                "max_decode_len must be at least 2".into(),
            ));
        }
        if self.max_decode_len + 1 > self.max_seq_len {
            return Err(ModelError::BadConfig(format!(
                "max_decode_len {} + 1 exceeds positional table {}",
                self.max_decode_len, self.max_seq_len
            )));
        }
        if self.vocab_size < 5 {
            return Err(ModelError::BadConfig(
                "vocabulary must include the 5 specials".into(),
            ));
        }
        Ok(())
    }

    /// Decode-step budget for one region: generous enough for the expansion
    /// or contraction between spoken and written forms, capped by the config.
    pub fn decode_cap(&self, region_len: usize) -> usize {
        (4 * region_len + 8).min(self.max_decode_len)
    }
}

/// BIO tag of one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tag {
    B,
    I,
    O,
}

impl Tag {
    pub fn index(self) -> usize {
        match self {
            Tag::B => 0,
            Tag::I => 1,
            Tag::O => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Tag::B),
            1 => Some(Tag::I),
            2 => Some(Tag::O),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Tag::B => 'B',
            Tag::I => 'I',
            Tag::O => 'O',
        }
    }
}

/// Per-token BIO labels for one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TagSequence {
    pub tags: Vec<Tag>,
}

impl TagSequence {
    pub fn new(tags: Vec<Tag>) -> Self {
        Self { tags }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn as_string(&self) -> String {
        self.tags.iter().map(|t| t.as_char()).collect()
    }

    pub fn parse(s: &str) -> Option<Self> {
        let tags = s
            .chars()
            .map(|c| match c {
                'B' => Some(Tag::B),
                'I' => Some(Tag::I),
                'O' => Some(Tag::O),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()?;
        Some(Self { tags })
    }
}

/// A maximal tagged span, inclusive token indices. `bias_label` and
/// `target_ids` carry training labels; extraction leaves them empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub start: usize,
    pub end: usize,
    pub bias_label: usize,
    pub target_ids: TokenSeq,
}

impl Region {
    pub fn span(start: usize, end: usize) -> Self {
        Self {
            start,
            end,
            bias_label: 0,
            target_ids: TokenSeq::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Maximal runs starting at B and continuing through I. An I with no
/// preceding B or I opens a region (treated as B); O closes.
pub fn extract_regions(tags: &TagSequence) -> Vec<Region> {
    let mut regions = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &tag) in tags.tags.iter().enumerate() {
        match tag {
            Tag::B => {
                if let Some(start) = open.take() {
                    regions.push(Region::span(start, i - 1));
                }
                open = Some(i);
            }
            Tag::I => {
                if open.is_none() {
                    open = Some(i);
                }
            }
            Tag::O => {
                if let Some(start) = open.take() {
                    regions.push(Region::span(start, i - 1));
                }
            }
        }
    }
    if let Some(start) = open {
        regions.push(Region::span(start, tags.len() - 1));
    }
    regions
}

/// Rebuilds the canonical tag string from regions: every region starts with B
/// and continues with I, everything else is O.
pub fn tags_from_regions(regions: &[Region], len: usize) -> TagSequence {
    let mut tags = vec![Tag::O; len];
    for r in regions {
        tags[r.start] = Tag::B;
        for t in tags.iter_mut().take(r.end + 1).skip(r.start + 1) {
            *t = Tag::I;
        }
    }
    TagSequence::new(tags)
}

/// The four loss components and their unweighted sum (all weights are 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_tagger: f64,
    pub l_enc_rank: f64,
    pub l_dec_rank: f64,
    pub l_gen: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_tagger: f64, l_enc_rank: f64, l_dec_rank: f64, l_gen: f64) -> Self {
        Self {
            l_tagger,
            l_enc_rank,
            l_dec_rank,
            l_gen,
            total: l_tagger + l_enc_rank + l_dec_rank + l_gen,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// The AdaCS network: parameters plus config. Forward passes build their own
/// tapes, so a frozen model is shareable across threads for inference.
pub struct AdaCsModel<S: Scalar> {
    pub config: ModelConfig,
    pub store: ParameterStore<S>,
}

impl<S: Scalar> AdaCsModel<S> {
    /// Fresh model with Xavier-uniform projections and N(0, 0.02) embeddings,
    /// all drawn from a ChaCha stream seeded by `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParameterStore::new(config.seed);
        let d = config.d_model;

        store.insert(
            "embed.tok",
            Tensor::rand_normal(&mut rng, &[config.vocab_size, d], 0.0, 0.02),
        );
        store.insert(
            "embed.pos",
            Tensor::rand_normal(&mut rng, &[config.max_seq_len, d], 0.0, 0.02),
        );
        for l in 0..config.enc_layers {
            register_encoder_layer(&mut store, &format!("enc.{l}"), d, &mut rng);
        }
        register_layer_norm(&mut store, "enc.norm", d);
        for l in 0..config.dec_layers {
            register_decoder_layer(&mut store, &format!("dec.{l}"), d, &mut rng);
        }
        register_layer_norm(&mut store, "dec.norm", d);
        store.insert("bam.dummy", Tensor::rand_normal(&mut rng, &[1, d], 0.0, 0.02));
        register_attention(&mut store, "bam.enc.attn", d, &mut rng);
        register_attention(&mut store, "bam.dec.attn", d, &mut rng);
        register_head(&mut store, "tagger", 3, d, &mut rng);
        register_head(&mut store, "gen", config.vocab_size, d, &mut rng);

        Ok(Self { config, store })
    }

    /// Encodes a bias list into a frozen bank with the current parameters.
    /// Cached by callers per (bias list, parameter snapshot).
    pub fn freeze_bank(&self, entries: &[BiasEntry]) -> Result<BiasBank<S>, ModelError> {
        forward::freeze_bank_impl(self, entries)
    }

    pub fn save_checkpoint(&self, vocab: &Vocabulary) -> Vec<u8> {
        let vocab_value: serde_json::Value =
            serde_json::from_str(&vocab.to_json()).expect("vocab json is valid");
        let config = serde_json::json!({
            "model": self.config,
            "vocab": vocab_value,
        });
        checkpoint::to_bytes(&self.store, config)
    }

    pub fn load_checkpoint(bytes: &[u8]) -> Result<(Self, Vocabulary), ModelError> {
        let (header, tensors) = checkpoint::from_bytes::<S>(bytes)?;
        let config: ModelConfig = serde_json::from_value(
            header
                .config
                .get("model")
                .cloned()
                .ok_or_else(|| ModelError::BadCheckpoint("missing model config".into()))?,
        )
        .map_err(|e| ModelError::BadCheckpoint(format!("model config: {e}")))?;
        let vocab_value = header
            .config
            .get("vocab")
            .ok_or_else(|| ModelError::BadCheckpoint("missing vocabulary".into()))?;
        let vocab = Vocabulary::from_json(&vocab_value.to_string())?;
        if vocab.size() != config.vocab_size {
            return Err(ModelError::BadCheckpoint(format!(
                "vocabulary size {} vs config {}",
                vocab.size(),
                config.vocab_size
            )));
        }
        let mut model = Self::new(config)?;
        let expected: Vec<String> = model.store.iter().map(|(p, _)| p.to_string()).collect();
        let loaded: Vec<&String> = tensors.keys().collect();
        if expected.len() != loaded.len() || !expected.iter().zip(&loaded).all(|(a, b)| &a == b) {
            return Err(ModelError::BadCheckpoint(format!(
                "parameter set mismatch: model has {} parameters, checkpoint {}",
                expected.len(),
                loaded.len()
            )));
        }
        for (path, tensor) in tensors {
            model.store.set_value(&path, tensor)?;
        }
        Ok((model, vocab))
    }
}

#[cfg(test)]
pub(crate) fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        vocab_size: 32,
        max_seq_len: 64,
        max_decode_len: 32,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_validation() {
        let mut c = tiny_config(0);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config(0);
        c.max_decode_len = 1;
        assert!(c.validate().is_err());
        let mut c = tiny_config(0);
        c.max_decode_len = 64;
        assert!(c.validate().is_err());
        assert!(tiny_config(0).validate().is_ok());
    }

    #[test]
    fn extract_regions_examples() {
        // O B I O B
        let t = TagSequence::parse("OBIOB").unwrap();
        let r = extract_regions(&t);
        assert_eq!(r, vec![Region::span(1, 2), Region::span(4, 4)]);

        assert!(extract_regions(&TagSequence::parse("OOOO").unwrap()).is_empty());

        // I with no preceding B opens a region
        let t = TagSequence::parse("IIOBI").unwrap();
        let r = extract_regions(&t);
        assert_eq!(r, vec![Region::span(0, 1), Region::span(3, 4)]);

        // B immediately after a run closes and reopens
        let t = TagSequence::parse("BBIB").unwrap();
        let r = extract_regions(&t);
        assert_eq!(
            r,
            vec![Region::span(0, 0), Region::span(1, 2), Region::span(3, 3)]
        );
    }

    /// Independent oracle: a direct scan that recomputes openings from the
    /// previous tag instead of carrying open-region state.
    fn brute_force_regions(tags: &[Tag]) -> Vec<(usize, usize)> {
        let n = tags.len();
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            let opens = match tags[i] {
                Tag::B => true,
                Tag::I => i == 0 || matches!(tags[i - 1], Tag::O),
                Tag::O => false,
            };
            if opens {
                let mut j = i;
                while j + 1 < n && matches!(tags[j + 1], Tag::I) {
                    j += 1;
                }
                out.push((i, j));
                i = j + 1;
            } else {
                i += 1;
            }
        }
        out
    }

    #[test]
    fn extract_regions_matches_brute_force_on_1000_random_strings() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..1000 {
            let len = rng.gen_range(0..30);
            let tags: Vec<Tag> = (0..len)
                .map(|_| match rng.gen_range(0..3) {
                    0 => Tag::B,
                    1 => Tag::I,
                    _ => Tag::O,
                })
                .collect();
            let seq = TagSequence::new(tags.clone());
            let got: Vec<(usize, usize)> = extract_regions(&seq)
                .iter()
                .map(|r| (r.start, r.end))
                .collect();
            assert_eq!(got, brute_force_regions(&tags), "tags {}", seq.as_string());
        }
    }

    #[test]
    fn regions_are_disjoint_sorted_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        for _ in 0..300 {
            let len = rng.gen_range(1..25);
            let tags: Vec<Tag> = (0..len)
                .map(|_| match rng.gen_range(0..3) {
                    0 => Tag::B,
                    1 => Tag::I,
                    _ => Tag::O,
                })
                .collect();
            let seq = TagSequence::new(tags);
            let regions = extract_regions(&seq);
            for w in regions.windows(2) {
                assert!(w[0].end < w[1].start);
            }
            // canonicalized: leading I becomes B; canonical form is a fixpoint
            let rebuilt = tags_from_regions(&regions, len);
            assert_eq!(extract_regions(&rebuilt), regions);
            let again = tags_from_regions(&extract_regions(&rebuilt), len);
            assert_eq!(rebuilt, again);
        }
    }

    #[test]
    fn loss_breakdown_total_is_plain_sum() {
        let lb = LossBreakdown::new(1.1, 0.2, 0.31, 0.07);
        assert!((lb.total - (1.1 + 0.2 + 0.31 + 0.07)).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_restores_parameters() {
        let vocab = Vocabulary::build(&["abcdefghijklmnopqrstuvwxyz "]).unwrap();
        let mut cfg = tiny_config(3);
        cfg.vocab_size = vocab.size();
        let model = AdaCsModel::<f32>::new(cfg.clone()).unwrap();
        let bytes = model.save_checkpoint(&vocab);
        let (loaded, vocab2) = AdaCsModel::<f32>::load_checkpoint(&bytes).unwrap();
        assert_eq!(vocab, vocab2);
        assert_eq!(loaded.config, cfg);
        for ((p1, a), (p2, b)) in model.store.iter().zip(loaded.store.iter()) {
            assert_eq!(p1, p2);
            assert_eq!(a.value, b.value, "parameter {p1}");
        }
        // identical bytes if saved again
        assert_eq!(bytes, loaded.save_checkpoint(&vocab2));
    }

    #[test]
    fn checkpoint_wrong_vocab_size_rejected() {
        let vocab = Vocabulary::build(&["ab"]).unwrap();
        let mut cfg = tiny_config(4);
        cfg.vocab_size = vocab.size() + 1;
        let model = AdaCsModel::<f32>::new(cfg).unwrap();
        let bytes = model.save_checkpoint(&vocab);
        assert!(AdaCsModel::<f32>::load_checkpoint(&bytes).is_err());
    }
}
