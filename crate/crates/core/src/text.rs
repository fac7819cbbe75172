//! Rule-based part-of-speech tagging and subject-centric shortening.
//!
//! The short form of an expression keeps the tokens before the first verb
//! ("a man in a white t-shirt is walking" becomes "a man in a white
//! t-shirt"). When that would drop the subject, the long form is kept.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Det,
    Adj,
    Noun,
    Verb,
    Prep,
    Pron,
    Conj,
    Num,
    Other,
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PosTag::Det => "DET",
            PosTag::Adj => "ADJ",
            PosTag::Noun => "NOUN",
            PosTag::Verb => "VERB",
            PosTag::Prep => "PREP",
            PosTag::Pron => "PRON",
            PosTag::Conj => "CONJ",
            PosTag::Num => "NUM",
            PosTag::Other => "OTHER",
        };
        f.write_str(s)
    }
}

impl FromStr for PosTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "DET" => PosTag::Det,
            "ADJ" => PosTag::Adj,
            "NOUN" => PosTag::Noun,
            "VERB" => PosTag::Verb,
            "PREP" => PosTag::Prep,
            "PRON" => PosTag::Pron,
            "CONJ" => PosTag::Conj,
            "NUM" => PosTag::Num,
            "OTHER" => PosTag::Other,
            other => return Err(Error::invalid(format!("unknown tag {other:?}"))),
        })
    }
}

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "another",
    "no",
];
const PREPOSITIONS: &[&str] = &[
    "in", "on", "at", "of", "with", "to", "from", "by", "near", "under", "over", "behind",
    "beside", "between", "into", "onto", "across", "through", "toward", "towards", "around",
    "above", "below", "for", "along", "against", "inside", "outside",
];
const PRONOUNS: &[&str] = &[
    "he", "she", "it", "they", "him", "her", "them", "his", "its", "their", "who", "which",
    "whose", "i", "you", "we",
];
const CONJUNCTIONS: &[&str] = &["and", "or", "but", "while", "as", "nor"];
const COPULAS: &[&str] = &["is", "are", "was", "were", "am"];
const AUXILIARIES: &[&str] = &[
    "is", "are", "was", "were", "am", "be", "been", "being", "has", "have", "had", "do", "does",
    "did",
];
const NUMBERS: &[&str] = &[
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
];

/// Open-class word list loaded from `word<TAB>TAG` lines.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: HashMap<String, PosTag>,
}

impl Lexicon {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (word, tag) = line.split_once('\t').ok_or_else(|| {
                Error::invalid(format!("lexicon line {}: expected word<TAB>TAG", lineno + 1))
            })?;
            entries.insert(word.trim().to_lowercase(), tag.trim().parse()?);
        }
        Ok(Self { entries })
    }

    /// The lexicon shipped with the crate.
    pub fn builtin() -> &'static Lexicon {
        static LEXICON: OnceLock<Lexicon> = OnceLock::new();
        LEXICON.get_or_init(|| {
            Lexicon::parse(include_str!("../data/lexicon.tsv")).expect("builtin lexicon parses")
        })
    }

    pub fn get(&self, word: &str) -> Option<PosTag> {
        self.entries.get(word).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextExpression {
    tokens: Vec<String>,
    tags: Vec<PosTag>,
}

impl TextExpression {
    pub fn new(tokens: Vec<String>, tags: Vec<PosTag>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("expression has no tokens"));
        }
        if tokens.len() != tags.len() {
            return Err(Error::shape("TextExpression::new", tokens.len(), tags.len()));
        }
        Ok(Self { tokens, tags })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tags(&self) -> &[PosTag] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    fn prefix(&self, n: usize) -> Self {
        Self {
            tokens: self.tokens[..n].to_vec(),
            tags: self.tags[..n].to_vec(),
        }
    }
}

impl fmt::Display for TextExpression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ShortSource {
    Manual,
    Machine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LongShortPair {
    pub long: TextExpression,
    pub short: TextExpression,
    pub source: ShortSource,
    /// Set when no usable verb boundary existed and `short == long`.
    pub fallback: bool,
}

/// Splits on whitespace, lower-cases, and strips leading/trailing
/// punctuation while keeping inner hyphens and apostrophes.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !(c.is_alphanumeric()))
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn pos_tag(tokens: &[String]) -> Result<TextExpression> {
    pos_tag_with(tokens, Lexicon::builtin())
}

pub fn pos_tag_with(tokens: &[String], lexicon: &Lexicon) -> Result<TextExpression> {
    if tokens.is_empty() {
        return Err(Error::invalid("cannot tag an empty token list"));
    }
    let mut tags = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| tokens[j].as_str());
        tags.push(tag_word(tok, prev, lexicon));
    }
    TextExpression::new(tokens.to_vec(), tags)
}

fn tag_word(word: &str, prev: Option<&str>, lexicon: &Lexicon) -> PosTag {
    let w = word;
    if COPULAS.contains(&w) {
        return PosTag::Verb;
    }
    if DETERMINERS.contains(&w) {
        return PosTag::Det;
    }
    if PREPOSITIONS.contains(&w) {
        return PosTag::Prep;
    }
    if PRONOUNS.contains(&w) {
        return PosTag::Pron;
    }
    if CONJUNCTIONS.contains(&w) {
        return PosTag::Conj;
    }
    if let Some(tag) = lexicon.get(w) {
        return tag;
    }
    if NUMBERS.contains(&w) || w.chars().all(|c| c.is_ascii_digit()) {
        return PosTag::Num;
    }
    let after_aux = prev.is_some_and(|p| AUXILIARIES.contains(&p));
    if after_aux && (w.ends_with("ing") || w.ends_with("ed") || w.ends_with('s')) {
        return PosTag::Verb;
    }
    if w.ends_with("ly") {
        return PosTag::Other;
    }
    PosTag::Noun
}

/// Truncates at the first verb. Falls back to the full expression when no
/// verb exists or the verb sits at position 0 or 1.
pub fn shorten(long: &TextExpression) -> LongShortPair {
    let first_verb = long.tags.iter().position(|&t| t == PosTag::Verb);
    let (short, fallback) = match first_verb {
        Some(i) if i > 1 => (long.prefix(i), false),
        _ => (long.clone(), true),
    };
    LongShortPair {
        long: long.clone(),
        short,
        source: ShortSource::Machine,
        fallback,
    }
}

/// Tokenize, tag, and shorten a raw string.
pub fn shorten_text(text: &str) -> Result<LongShortPair> {
    Ok(shorten(&pos_tag(&tokenize(text))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use PosTag::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tags_the_walking_man() {
        let e = pos_tag(&toks("a man in white t-shirt is walking")).unwrap();
        assert_eq!(e.tags(), &[Det, Noun, Prep, Adj, Noun, Verb, Verb]);
    }

    #[test]
    fn single_word_tags() {
        assert_eq!(pos_tag(&toks("dog")).unwrap().tags(), &[Noun]);
        assert_eq!(pos_tag(&toks("is")).unwrap().tags(), &[Verb]);
        assert!(pos_tag(&[]).is_err());
    }

    #[test]
    fn suffix_heuristics() {
        let lex = Lexicon::default();
        let e = pos_tag_with(&toks("it was zorbing quietly blorf"), &lex).unwrap();
        assert_eq!(e.tags(), &[Pron, Verb, Verb, Other, Noun]);
        // -ing without an auxiliary in front stays a noun
        let e = pos_tag_with(&toks("a zorbing"), &lex).unwrap();
        assert_eq!(e.tags(), &[Det, Noun]);
    }

    #[test]
    fn shortens_reference_examples() {
        let p = shorten_text("a man in a white t-shirt is walking").unwrap();
        assert_eq!(p.short.text(), "a man in a white t-shirt");
        assert!(!p.fallback);

        let p = shorten_text("a black dog eating a meat").unwrap();
        assert_eq!(p.short.text(), "a black dog");

        let p = shorten_text("a red square").unwrap();
        assert_eq!(p.short, p.long);
        assert!(p.fallback);
    }

    #[test]
    fn subjectless_truncation_falls_back() {
        let p = shorten_text("a walking man").unwrap();
        assert!(p.fallback);
        assert_eq!(p.short.text(), "a walking man");
    }

    #[test]
    fn shorten_is_idempotent() {
        for s in [
            "a man in a white t-shirt is walking",
            "a blue circle is moving up",
            "a walking man",
            "dog",
        ] {
            let p = shorten_text(s).unwrap();
            let again = shorten(&p.short);
            assert_eq!(again.short, p.short, "{s}");
            assert!(!again.short.is_empty());
        }
    }

    #[test]
    fn tokenizer_strips_terminal_punctuation() {
        assert_eq!(
            tokenize("  A man, in a T-shirt, is walking. "),
            ["a", "man", "in", "a", "t-shirt", "is", "walking"]
        );
    }

    #[test]
    fn lexicon_parse_errors() {
        assert!(Lexicon::parse("dog NOUN").is_err());
        assert!(Lexicon::parse("dog\tTHING").is_err());
        let lex = Lexicon::parse("# c\n\nzorb\tVERB # inline\n").unwrap();
        assert_eq!(lex.get("zorb"), Some(Verb));
    }
}
