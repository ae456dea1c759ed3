//! Lexicon generation, carrier templates, pair assembly, and split
//! construction.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{spoken_form, CsSpan, DataError, SpokenReferencePair, SYLLABLE_TABLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "easy" => Some(Difficulty::Easy),
            "hard" => Some(Difficulty::Hard),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    TrainVisible,
    TestOnly,
}

/// How a sub-lexicon builds its words.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LexiconKind {
    /// Independent random words (general-domain stand-in).
    General,
    /// Words built from a small set of shared roots with varied suffixes
    /// (medical-domain stand-in: phrases contain similar parts).
    Rooted,
}

/// A sub-lexicon of foreign phrases with per-phrase split tags.
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub phrases: Vec<(String, Split)>,
    pub kind: LexiconKind,
}

impl Lexicon {
    pub fn train_visible(&self) -> Vec<String> {
        self.phrases
            .iter()
            .filter(|(_, s)| *s == Split::TrainVisible)
            .map(|(p, _)| p.clone())
            .collect()
    }

    pub fn test_only(&self) -> Vec<String> {
        self.phrases
            .iter()
            .filter(|(_, s)| *s == Split::TestOnly)
            .map(|(p, _)| p.clone())
            .collect()
    }

    pub fn all(&self) -> Vec<String> {
        self.phrases.iter().map(|(p, _)| p.clone()).collect()
    }

    pub fn test_only_fraction(&self) -> f64 {
        if self.phrases.is_empty() {
            return 0.0;
        }
        self.test_only().len() as f64 / self.phrases.len() as f64
    }
}

/// Knobs for one pair. Carrier word counts are tuned so the training corpus
/// lands near the 7.5% CS-token target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub easy_carrier_words: (usize, usize),
    pub hard_carrier_words: (usize, usize),
    /// Weights for 1, 2, 3 words per phrase when generating lexicons.
    pub phrase_word_weights: [f64; 3],
    /// Longest tolerated spoken sentence, in characters.
    pub max_spoken_chars: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            easy_carrier_words: (18, 32),
            hard_carrier_words: (34, 54),
            phrase_word_weights: [0.6, 0.3, 0.1],
            max_spoken_chars: 460,
        }
    }
}

fn random_word<R: Rng>(rng: &mut R, min_len: usize, max_len: usize) -> String {
    let len = rng.gen_range(min_len..=max_len);
    (0..len)
        .map(|_| (b'a' + rng.gen_range(0..26u8)) as char)
        .collect()
}

fn weighted_word_count<R: Rng>(rng: &mut R, weights: &[f64; 3]) -> usize {
    let x: f64 = rng.gen_range(0.0..weights.iter().sum());
    if x < weights[0] {
        1
    } else if x < weights[0] + weights[1] {
        2
    } else {
        3
    }
}

/// Generates `count` unique phrases (1-3 words, 3-10 characters per word).
/// Uniqueness is enforced on the despaced letter string, which keeps
/// `spoken_form` injective over the lexicon.
pub fn generate_lexicon<R: Rng>(
    rng: &mut R,
    count: usize,
    kind: LexiconKind,
    cfg: &GenConfig,
    taken: &mut BTreeSet<String>,
) -> Result<Vec<String>, DataError> {
    let roots: Vec<String> = (0..24).map(|_| random_word(rng, 4, 6)).collect();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > count * 200 {
            return Err(DataError::Generation(format!(
                "could not find {count} unique phrases"
            )));
        }
        let words = weighted_word_count(rng, &cfg.phrase_word_weights);
        let phrase: String = (0..words)
            .map(|_| match kind {
                LexiconKind::General => random_word(rng, 3, 10),
                LexiconKind::Rooted => {
                    let root = roots[rng.gen_range(0..roots.len())].clone();
                    let suffix = random_word(rng, 1, 4);
                    format!("{root}{suffix}")
                }
            })
            .collect::<Vec<_>>()
            .join(" ");
        let despaced = phrase.replace(' ', "");
        if taken.insert(despaced) {
            out.push(phrase);
        }
    }
    Ok(out)
}

/// Generates carrier words for template sentences: short native-looking
/// words, never colliding with a spelled syllable.
pub fn generate_carriers<R: Rng>(rng: &mut R, count: usize) -> Vec<String> {
    let syllables: BTreeSet<&str> = SYLLABLE_TABLE.iter().map(|(_, s)| *s).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let w = random_word(rng, 2, 7);
        if !syllables.contains(w.as_str()) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// One carrier-sentence template: carrier words with numbered slots.
#[derive(Debug, Clone)]
pub enum Segment {
    Carrier(String),
    Slot(usize),
}

/// Builds a template for the requested difficulty: easy templates spread 1-2
/// slots between carrier words, hard templates hold one slot that will take
/// consecutive phrases.
fn build_template<R: Rng>(
    rng: &mut R,
    carriers: &[String],
    difficulty: Difficulty,
    cfg: &GenConfig,
) -> (Vec<Segment>, usize) {
    let (lo, hi) = match difficulty {
        Difficulty::Easy => cfg.easy_carrier_words,
        Difficulty::Hard => cfg.hard_carrier_words,
    };
    let n_carriers = rng.gen_range(lo..=hi);
    let n_slots = match difficulty {
        Difficulty::Easy => {
            if rng.gen_bool(0.3) {
                2
            } else {
                1
            }
        }
        Difficulty::Hard => 1,
    };
    // gaps 0..=n_carriers; two slots stay non-adjacent so phrases are
    // separated by at least one carrier word
    let mut gaps: Vec<usize> = Vec::new();
    while gaps.len() < n_slots {
        let g = rng.gen_range(0..=n_carriers);
        if gaps.iter().all(|&x: &usize| x.abs_diff(g) >= 1) && !gaps.contains(&g) {
            gaps.push(g);
        }
    }
    gaps.sort_unstable();
    let mut segments = Vec::new();
    let mut slot = 0;
    for i in 0..=n_carriers {
        if slot < gaps.len() && gaps[slot] == i {
            segments.push(Segment::Slot(slot));
            slot += 1;
        }
        if i < n_carriers {
            segments.push(Segment::Carrier(
                carriers[rng.gen_range(0..carriers.len())].clone(),
            ));
        }
    }
    (segments, n_slots)
}

/// Fills a template with phrases and assembles the spoken/reference pair with
/// span annotations on both sides. Hard mode packs 2-4 consecutive phrases
/// into its single slot.
pub fn generate_pair<R: Rng>(
    rng: &mut R,
    carriers: &[String],
    phrase_pool: &[String],
    difficulty: Difficulty,
    cfg: &GenConfig,
) -> Result<SpokenReferencePair, DataError> {
    if phrase_pool.is_empty() {
        return Err(DataError::Generation("phrase pool is empty".into()));
    }
    if carriers.is_empty() {
        return Err(DataError::Generation("carrier list is empty".into()));
    }
    for _attempt in 0..20 {
        let (template, n_slots) = build_template(rng, carriers, difficulty, cfg);
        let phrases_per_slot: Vec<Vec<&String>> = (0..n_slots)
            .map(|_| {
                let k = match difficulty {
                    Difficulty::Easy => 1,
                    Difficulty::Hard => rng.gen_range(2..=4),
                };
                let mut chosen = Vec::with_capacity(k);
                for _ in 0..k {
                    chosen.push(&phrase_pool[rng.gen_range(0..phrase_pool.len())]);
                }
                chosen
            })
            .collect();
        // distinct phrases across the whole sentence
        let mut flat: Vec<&str> = phrases_per_slot
            .iter()
            .flatten()
            .map(|p| p.as_str())
            .collect();
        flat.sort_unstable();
        let unique = {
            let before = flat.len();
            flat.dedup();
            flat.len() == before
        };
        if !unique {
            continue;
        }

        let mut spoken = String::new();
        let mut reference = String::new();
        let mut spans = Vec::new();
        let mut first = true;
        for seg in &template {
            match seg {
                Segment::Carrier(w) => {
                    if !first {
                        spoken.push(' ');
                        reference.push(' ');
                    }
                    spoken.push_str(w);
                    reference.push_str(w);
                    first = false;
                }
                Segment::Slot(idx) => {
                    for phrase in &phrases_per_slot[*idx] {
                        if !first {
                            spoken.push(' ');
                            reference.push(' ');
                        }
                        let sp = spoken_form(phrase)?;
                        let s0 = spoken.chars().count();
                        let r0 = reference.chars().count();
                        spoken.push_str(&sp);
                        reference.push_str(phrase);
                        spans.push(CsSpan {
                            spoken_start: s0,
                            spoken_end: s0 + sp.chars().count(),
                            ref_start: r0,
                            ref_end: r0 + phrase.chars().count(),
                            phrase: (*phrase).clone(),
                            bias_relevant: true,
                        });
                        first = false;
                    }
                }
            }
        }
        if spoken.chars().count() > cfg.max_spoken_chars {
            continue;
        }
        let pair = SpokenReferencePair {
            spoken,
            reference,
            spans,
            difficulty,
        };
        pair.validate()?;
        return Ok(pair);
    }
    Err(DataError::Generation(
        "exhausted attempts to fit a pair under the length cap".into(),
    ))
}

/// Desk-scale split construction defaults: 5,000 training pairs and two
/// 500-pair test sets over disjoint sub-lexicons.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub general_visible: usize,
    pub general_test_only: usize,
    pub medical_test_only: usize,
    pub carriers: usize,
    /// Probability that a test-general phrase draw comes from the
    /// train-visible pool (keeps the unseen rate just above the 0.9 floor).
    pub seen_phrase_rate: f64,
    pub easy_fraction_train: f64,
    #[serde(default)]
    pub gen: GenConfig,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_pairs: 5000,
            test_pairs: 500,
            general_visible: 300,
            general_test_only: 300,
            medical_test_only: 300,
            carriers: 120,
            seen_phrase_rate: 0.02,
            easy_fraction_train: 0.85,
            gen: GenConfig::default(),
        }
    }
}

/// Everything `build_splits` produces.
pub struct SplitSet {
    pub train: Vec<SpokenReferencePair>,
    pub test_general: Vec<SpokenReferencePair>,
    pub test_medical: Vec<SpokenReferencePair>,
    pub lexicon_general: Lexicon,
    pub lexicon_medical: Lexicon,
    pub carriers: Vec<String>,
}

impl SplitSet {
    /// Fraction of distinct test phrases absent from every training span.
    pub fn unseen_phrase_rate(&self, test: &[SpokenReferencePair]) -> f64 {
        let train_phrases: BTreeSet<String> = self
            .train
            .iter()
            .flat_map(|p| p.spans.iter().map(|s| s.phrase.clone()))
            .collect();
        let test_phrases: BTreeSet<String> = test
            .iter()
            .flat_map(|p| p.spans.iter().map(|s| s.phrase.clone()))
            .collect();
        if test_phrases.is_empty() {
            return 1.0;
        }
        let unseen = test_phrases
            .iter()
            .filter(|p| !train_phrases.contains(*p))
            .count();
        unseen as f64 / test_phrases.len() as f64
    }

    /// Fraction of reference-side whitespace tokens inside CS spans.
    pub fn cs_token_fraction(pairs: &[SpokenReferencePair]) -> f64 {
        let mut cs = 0usize;
        let mut total = 0usize;
        for pair in pairs {
            total += pair.reference.split_whitespace().count();
            for span in &pair.spans {
                cs += span.phrase.split_whitespace().count();
            }
        }
        if total == 0 {
            0.0
        } else {
            cs as f64 / total as f64
        }
    }
}

fn pair_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    // per-pair derived seed: generation is order-independent and
    // parallelizable without changing output
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB));
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Builds the train set and the two test sets. Deterministic for a given
/// seed: identical seeds give byte-identical JSONL.
pub fn build_splits(cfg: &SplitConfig, seed: u64) -> Result<SplitSet, DataError> {
    if cfg.general_visible == 0 || cfg.general_test_only == 0 || cfg.medical_test_only == 0 {
        return Err(DataError::Unsatisfiable("lexicon sizes must be positive".into()));
    }
    if cfg.seen_phrase_rate > 0.1 {
        return Err(DataError::Unsatisfiable(format!(
            "seen_phrase_rate {} cannot guarantee the 90% unseen floor",
            cfg.seen_phrase_rate
        )));
    }
    let mut lex_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A);
    let mut taken = BTreeSet::new();
    let visible = generate_lexicon(
        &mut lex_rng,
        cfg.general_visible,
        LexiconKind::General,
        &cfg.gen,
        &mut taken,
    )?;
    let unseen = generate_lexicon(
        &mut lex_rng,
        cfg.general_test_only,
        LexiconKind::General,
        &cfg.gen,
        &mut taken,
    )?;
    let medical = generate_lexicon(
        &mut lex_rng,
        cfg.medical_test_only,
        LexiconKind::Rooted,
        &cfg.gen,
        &mut taken,
    )?;
    let lexicon_general = Lexicon {
        phrases: visible
            .iter()
            .map(|p| (p.clone(), Split::TrainVisible))
            .chain(unseen.iter().map(|p| (p.clone(), Split::TestOnly)))
            .collect(),
        kind: LexiconKind::General,
    };
    let lexicon_medical = Lexicon {
        phrases: medical.iter().map(|p| (p.clone(), Split::TestOnly)).collect(),
        kind: LexiconKind::Rooted,
    };
    let carriers = generate_carriers(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x3C3C_C3C3), cfg.carriers);

    let mut train = Vec::with_capacity(cfg.train_pairs);
    for i in 0..cfg.train_pairs {
        let mut rng = pair_rng(seed, 1, i as u64);
        let difficulty = if rng.gen_bool(cfg.easy_fraction_train) {
            Difficulty::Easy
        } else {
            Difficulty::Hard
        };
        train.push(generate_pair(
            &mut rng, &carriers, &visible, difficulty, &cfg.gen,
        )?);
    }

    // Test pools: mostly test-only phrases, with a deterministic trickle of
    // train-visible ones for test-general. The trickle draws from a small
    // fixed subset so the distinct-phrase unseen rate stays comfortably
    // above the 0.9 floor.
    let seen_pairs = (cfg.seen_phrase_rate * cfg.test_pairs as f64).floor() as usize;
    let seen_stride = if seen_pairs > 0 {
        cfg.test_pairs / seen_pairs
    } else {
        usize::MAX
    };
    let seen_pool: Vec<String> = visible.iter().take(12).cloned().collect();
    let mut test_general = Vec::with_capacity(cfg.test_pairs);
    for i in 0..cfg.test_pairs {
        let mut rng = pair_rng(seed, 2, i as u64);
        let difficulty = if i % 2 == 0 {
            Difficulty::Easy
        } else {
            Difficulty::Hard
        };
        let pool: &[String] = if seen_stride != usize::MAX && i % seen_stride == seen_stride - 1 {
            &seen_pool
        } else {
            &unseen
        };
        test_general.push(generate_pair(&mut rng, &carriers, pool, difficulty, &cfg.gen)?);
    }

    let mut test_medical = Vec::with_capacity(cfg.test_pairs);
    for i in 0..cfg.test_pairs {
        let mut rng = pair_rng(seed, 3, i as u64);
        let difficulty = if i % 2 == 0 {
            Difficulty::Easy
        } else {
            Difficulty::Hard
        };
        test_medical.push(generate_pair(
            &mut rng, &carriers, &medical, difficulty, &cfg.gen,
        )?);
    }

    let set = SplitSet {
        train,
        test_general,
        test_medical,
        lexicon_general,
        lexicon_medical,
        carriers,
    };
    for (name, test) in [
        ("test-general", &set.test_general),
        ("test-medical", &set.test_medical),
    ] {
        let rate = set.unseen_phrase_rate(test);
        if rate < 0.9 {
            return Err(DataError::Unsatisfiable(format!(
                "{name} unseen-phrase rate {rate:.3} below the 0.9 floor"
            )));
        }
    }
    Ok(set)
}
