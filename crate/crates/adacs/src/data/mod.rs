//! Synthetic data pipeline: a foreign-phrase lexicon, a deterministic
//! spoken-form corruption rule, spoken-reference pair generation with easy
//! and hard modes, split construction with an unseen-phrase guarantee, and
//! per-step bias-list sampling.
//!
//! The corruption rule spells each letter with a fixed syllable (a -> "ay",
//! b -> "bi", ...), so normalization is learnable yet the inverse is opaque
//! to a model that never saw the phrase — which is exactly the gap the bias
//! list closes.

mod gen;

pub use gen::{
    build_splits, generate_carriers, generate_lexicon, generate_pair, Difficulty, GenConfig,
    Lexicon, LexiconKind, Split, SplitConfig, SplitSet,
};

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("phrase is empty")]
    EmptyPhrase,
    #[error("character {0:?} is outside the corruption table")]
    BadCharacter(char),
    #[error("no syllable matches at {0:?}")]
    UnknownSyllable(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("bias list of {target} cannot hold the {need} phrases in the batch")]
    BiasListTooSmall { need: usize, target: usize },
    #[error("split constraints unsatisfiable: {0}")]
    Unsatisfiable(String),
    #[error("malformed dataset line: {0}")]
    BadLine(String),
    #[error("span error: {0}")]
    BadSpan(String),
}

/// Letter -> spoken syllable. Every syllable is unique, so the spelled form
/// parses back unambiguously.
pub const SYLLABLE_TABLE: [(char, &str); 26] = [
    ('a', "ay"),
    ('b', "bi"),
    ('c', "si"),
    ('d', "di"),
    ('e', "i"),
    ('f', "ep"),
    ('g', "gi"),
    ('h', "hat"),
    ('i', "ai"),
    ('j', "gie"),
    ('k', "ca"),
    ('l', "el"),
    ('m', "em"),
    ('n', "en"),
    ('o', "ou"),
    ('p', "pi"),
    ('q', "kiu"),
    ('r', "ar"),
    ('s', "es"),
    ('t', "ti"),
    ('u', "yu"),
    ('v', "vi"),
    ('w', "we"),
    ('x', "ik"),
    ('y', "wai"),
    ('z', "zet"),
];

fn syllable_of(c: char) -> Option<&'static str> {
    SYLLABLE_TABLE
        .iter()
        .find(|(letter, _)| *letter == c)
        .map(|(_, s)| *s)
}

/// Spells a phrase out syllable by syllable: every letter maps through the
/// fixed table, syllables joined by single spaces. Word boundaries collapse
/// into the same single space.
pub fn spoken_form(phrase: &str) -> Result<String, DataError> {
    if phrase.is_empty() {
        return Err(DataError::EmptyPhrase);
    }
    let mut syllables = Vec::new();
    for c in phrase.chars() {
        if c == ' ' {
            continue;
        }
        syllables.push(syllable_of(c).ok_or(DataError::BadCharacter(c))?);
    }
    if syllables.is_empty() {
        return Err(DataError::EmptyPhrase);
    }
    Ok(syllables.join(" "))
}

/// Greedy longest-match inverse of [`spoken_form`]: parses a spoken string
/// back to its letters. Word boundaries inside the original phrase are gone
/// (the corruption collapses them), so the result is the despaced letter
/// string.
pub fn parse_spoken(spoken: &str) -> Result<String, DataError> {
    let chars: Vec<char> = spoken.chars().collect();
    let mut out = String::new();
    let mut pos = 0;
    while pos < chars.len() {
        if chars[pos] == ' ' {
            pos += 1;
            continue;
        }
        let mut matched = None;
        for (letter, syl) in SYLLABLE_TABLE {
            let len = syl.chars().count();
            if pos + len <= chars.len()
                && syl.chars().eq(chars[pos..pos + len].iter().copied())
                && matched.is_none_or(|(_, best)| len > best)
            {
                matched = Some((letter, len));
            }
        }
        match matched {
            Some((letter, len)) => {
                out.push(letter);
                pos += len;
            }
            None => {
                let rest: String = chars[pos..].iter().take(12).collect();
                return Err(DataError::UnknownSyllable(rest));
            }
        }
    }
    if out.is_empty() {
        return Err(DataError::EmptyPhrase);
    }
    Ok(out)
}

/// Recovers the exact lexicon phrase (word boundaries included) behind a
/// spoken string, when the lexicon is injective under despacing.
pub fn recover_phrase(spoken: &str, lexicon: &[String]) -> Option<String> {
    let letters = parse_spoken(spoken).ok()?;
    lexicon
        .iter()
        .find(|p| p.replace(' ', "") == letters)
        .cloned()
}

/// One annotated code-switched span, with character offsets on both sides
/// (`end` exclusive).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsSpan {
    pub spoken_start: usize,
    pub spoken_end: usize,
    pub ref_start: usize,
    pub ref_end: usize,
    pub phrase: String,
    pub bias_relevant: bool,
}

/// The dataset unit: a corrupted input sentence, its normalized reference,
/// and the annotated spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpokenReferencePair {
    pub spoken: String,
    pub reference: String,
    pub spans: Vec<CsSpan>,
    pub difficulty: Difficulty,
}

#[derive(Serialize, Deserialize)]
struct SpanJson {
    s: usize,
    e: usize,
    phrase: String,
}

#[derive(Serialize, Deserialize)]
struct PairJson {
    spoken: String,
    reference: String,
    spans: Vec<SpanJson>,
    difficulty: String,
}

impl SpokenReferencePair {
    /// Distinct phrases covered by this pair's spans, sorted.
    pub fn phrases(&self) -> Vec<String> {
        let set: BTreeSet<String> = self.spans.iter().map(|s| s.phrase.clone()).collect();
        set.into_iter().collect()
    }

    /// Checks the replacement round trip: substituting each spoken span with
    /// its phrase must reproduce the reference exactly, and spans must be
    /// sorted, disjoint, and in bounds on both sides.
    pub fn validate(&self) -> Result<(), DataError> {
        let spoken: Vec<char> = self.spoken.chars().collect();
        let mut rebuilt = String::new();
        let mut ref_check = String::new();
        let mut cursor = 0usize;
        let mut prev_end = 0usize;
        for (i, span) in self.spans.iter().enumerate() {
            if span.spoken_start < prev_end && i > 0 {
                return Err(DataError::BadSpan(format!(
                    "span {i} overlaps or is out of order"
                )));
            }
            if span.spoken_start >= span.spoken_end || span.spoken_end > spoken.len() {
                return Err(DataError::BadSpan(format!(
                    "span {i} [{}, {}) out of bounds for {} chars",
                    span.spoken_start,
                    span.spoken_end,
                    spoken.len()
                )));
            }
            rebuilt.extend(&spoken[cursor..span.spoken_start]);
            let ref_start_chars = rebuilt.chars().count();
            if ref_start_chars != span.ref_start {
                return Err(DataError::BadSpan(format!(
                    "span {i} reference offset {} but replay reaches {ref_start_chars}",
                    span.ref_start
                )));
            }
            rebuilt.push_str(&span.phrase);
            if rebuilt.chars().count() != span.ref_end {
                return Err(DataError::BadSpan(format!(
                    "span {i} reference end {} disagrees with phrase length",
                    span.ref_end
                )));
            }
            cursor = span.spoken_end;
            prev_end = span.spoken_end;
        }
        rebuilt.extend(&spoken[cursor..]);
        ref_check.push_str(&self.reference);
        if rebuilt != ref_check {
            return Err(DataError::BadSpan(format!(
                "replacement round trip failed: {rebuilt:?} != {:?}",
                self.reference
            )));
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        let json = PairJson {
            spoken: self.spoken.clone(),
            reference: self.reference.clone(),
            spans: self
                .spans
                .iter()
                .map(|s| SpanJson {
                    s: s.spoken_start,
                    e: s.spoken_end,
                    phrase: s.phrase.clone(),
                })
                .collect(),
            difficulty: self.difficulty.as_str().to_string(),
        };
        serde_json::to_string(&json).expect("pair serialization cannot fail")
    }

    /// Parses one JSONL line, rebuilding reference-side offsets from the
    /// spoken-side spans, and validates the round trip.
    pub fn from_json_line(line: &str) -> Result<Self, DataError> {
        let json: PairJson =
            serde_json::from_str(line).map_err(|e| DataError::BadLine(e.to_string()))?;
        let difficulty = Difficulty::parse(&json.difficulty)
            .ok_or_else(|| DataError::BadLine(format!("difficulty {:?}", json.difficulty)))?;
        let mut spans = Vec::with_capacity(json.spans.len());
        let mut delta = 0isize;
        let mut prev_end = 0usize;
        for sj in &json.spans {
            if sj.s < prev_end || sj.s >= sj.e {
                return Err(DataError::BadSpan(format!(
                    "span [{}, {}) out of order",
                    sj.s, sj.e
                )));
            }
            let phrase_len = sj.phrase.chars().count();
            let ref_start = (sj.s as isize + delta) as usize;
            spans.push(CsSpan {
                spoken_start: sj.s,
                spoken_end: sj.e,
                ref_start,
                ref_end: ref_start + phrase_len,
                phrase: sj.phrase.clone(),
                bias_relevant: true,
            });
            delta += phrase_len as isize - (sj.e - sj.s) as isize;
            prev_end = sj.e;
        }
        let pair = Self {
            spoken: json.spoken,
            reference: json.reference,
            spans,
            difficulty,
        };
        pair.validate()?;
        Ok(pair)
    }
}

pub fn write_jsonl(pairs: &[SpokenReferencePair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&p.to_json_line());
        out.push('\n');
    }
    out
}

pub fn read_jsonl(text: &str) -> Result<Vec<SpokenReferencePair>, DataError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(SpokenReferencePair::from_json_line)
        .collect()
}

/// Builds the per-step bias list: every distinct CS phrase in the batch plus
/// uniform distractors from the lexicon, shuffled. With `strict` the call
/// fails when the batch alone exceeds `target_size`; otherwise distractors
/// are simply truncated to nothing and the batch phrases all stay.
pub fn sample_bias_list<R: Rng>(
    batch: &[&SpokenReferencePair],
    global_lexicon: &[String],
    target_size: usize,
    strict: bool,
    rng: &mut R,
) -> Result<Vec<String>, DataError> {
    let in_batch: BTreeSet<String> = batch
        .iter()
        .flat_map(|p| p.spans.iter().map(|s| s.phrase.clone()))
        .collect();
    if strict && in_batch.len() > target_size {
        return Err(DataError::BiasListTooSmall {
            need: in_batch.len(),
            target: target_size,
        });
    }
    let mut list: Vec<String> = in_batch.iter().cloned().collect();
    let mut pool: Vec<&String> = global_lexicon
        .iter()
        .filter(|p| !in_batch.contains(*p))
        .collect();
    let needed = target_size.saturating_sub(list.len()).min(pool.len());
    if needed > 0 {
        let (sampled, _) = pool.partial_shuffle(rng, needed);
        list.extend(sampled.iter().map(|s| (*s).clone()));
    }
    list.shuffle(rng);
    Ok(list)
}
