//! Keyword extraction: pick up to five priority-ordered keywords from a goal
//! to steer topically relevant context generation.
//!
//! Tagging uses a bundled lexicon plus suffix heuristics (no statistical
//! model), so identical goal text yields identical keywords on every platform.
//! The stopword list and lexicon ship as plain-text data files and can be
//! overridden by path.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::model::{Behavior, Keyword, KeywordSet, PosClass};

const STOPWORDS_DATA: &str = include_str!("../data/stopwords.txt");
const LEXICON_DATA: &str = include_str!("../data/lexicon.txt");

/// Tag assigned to every token; `Other` covers function words and anything
/// deliberately excluded from keywords.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagClass {
    Pos(PosClass),
    Other,
}

/// Bundled word lists backing the tagger.
#[derive(Debug, Clone)]
pub struct Lexicon {
    stopwords: HashSet<String>,
    classes: HashMap<String, PosClass>,
}

impl Lexicon {
    pub fn bundled() -> &'static Lexicon {
        static BUNDLED: OnceLock<Lexicon> = OnceLock::new();
        BUNDLED.get_or_init(|| {
            Lexicon::parse(STOPWORDS_DATA, LEXICON_DATA)
                .expect("bundled lexicon data is well-formed")
        })
    }

    pub fn from_files(stopwords_path: &Path, lexicon_path: &Path) -> Result<Lexicon> {
        let stopwords = std::fs::read_to_string(stopwords_path)?;
        let lexicon = std::fs::read_to_string(lexicon_path)?;
        Lexicon::parse(&stopwords, &lexicon)
    }

    fn parse(stopwords: &str, lexicon: &str) -> Result<Lexicon> {
        let stopwords: HashSet<String> = stopwords
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.to_lowercase())
            .collect();
        let mut classes = HashMap::new();
        for (idx, line) in lexicon.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (word, class) = (parts.next(), parts.next());
            let (Some(word), Some(class)) = (word, class) else {
                return Err(Error::Parse {
                    path: "lexicon".into(),
                    location: format!("line {}", idx + 1),
                    message: format!("expected `word class`, got {line:?}"),
                });
            };
            let class = match class {
                "noun" => PosClass::Noun,
                "adjective" => PosClass::Adjective,
                "verb" => PosClass::Verb,
                other => {
                    return Err(Error::Parse {
                        path: "lexicon".into(),
                        location: format!("line {}", idx + 1),
                        message: format!("unknown class {other:?}"),
                    })
                }
            };
            classes.insert(word.to_lowercase(), class);
        }
        Ok(Lexicon { stopwords, classes })
    }

    pub fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(token)
    }

    fn tag(&self, token: &str) -> TagClass {
        if self.is_stopword(token) {
            return TagClass::Other;
        }
        if let Some(&class) = self.classes.get(token) {
            return TagClass::Pos(class);
        }
        // Singular fallback for simple plurals.
        if let Some(stem) = singular(token) {
            if self.is_stopword(&stem) {
                return TagClass::Other;
            }
            if let Some(&class) = self.classes.get(stem.as_str()) {
                return TagClass::Pos(class);
            }
            if let Some(class) = suffix_class(&stem) {
                return TagClass::Pos(class);
            }
        }
        if let Some(class) = suffix_class(token) {
            return TagClass::Pos(class);
        }
        TagClass::Pos(PosClass::Noun)
    }
}

fn singular(token: &str) -> Option<String> {
    if let Some(stem) = token.strip_suffix("ies") {
        if stem.len() >= 2 {
            return Some(format!("{stem}y"));
        }
    }
    if token.len() > 3 && token.ends_with('s') && !token.ends_with("ss") {
        return Some(token[..token.len() - 1].to_string());
    }
    None
}

const NOUN_SUFFIXES: &[&str] = &[
    "tion", "sion", "ment", "ness", "ity", "ism", "ance", "ence", "ship", "hood", "logy", "ics",
];
const ADJECTIVE_SUFFIXES: &[&str] = &["ous", "ful", "less", "able", "ible", "ive", "ish", "ical"];
const VERB_SUFFIXES: &[&str] = &["ize", "ise", "ify"];

fn suffix_class(token: &str) -> Option<PosClass> {
    for s in NOUN_SUFFIXES {
        if token.len() > s.len() + 1 && token.ends_with(s) {
            return Some(PosClass::Noun);
        }
    }
    for s in ADJECTIVE_SUFFIXES {
        if token.len() > s.len() + 1 && token.ends_with(s) {
            return Some(PosClass::Adjective);
        }
    }
    for s in VERB_SUFFIXES {
        if token.len() > s.len() + 1 && token.ends_with(s) {
            return Some(PosClass::Verb);
        }
    }
    // Participial adjectives like "detailed"; short -ed nouns live in the
    // lexicon instead.
    if token.len() >= 6 && token.ends_with("ed") {
        return Some(PosClass::Adjective);
    }
    None
}

/// A token with its character offset in the original text. Tokens are maximal
/// runs of alphanumeric/apostrophe characters, lowercased with apostrophes
/// removed, mirroring `normalize_text`.
fn tokenize(text: &str) -> Vec<(String, usize)> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut start = 0usize;
    for (char_idx, ch) in text.chars().enumerate() {
        if ch.is_alphanumeric() || ch == '\'' || ch == '\u{2019}' {
            if current.is_empty() {
                start = char_idx;
            }
            if ch != '\'' && ch != '\u{2019}' {
                for lower in ch.to_lowercase() {
                    current.push(lower);
                }
            }
        } else if !current.is_empty() {
            tokens.push((std::mem::take(&mut current), start));
        }
    }
    if !current.is_empty() {
        tokens.push((current, start));
    }
    tokens.retain(|(t, _)| !t.is_empty());
    tokens
}

/// Tags every token of the goal text with noun, adjective, verb, or other.
pub fn tag_tokens_with(lexicon: &Lexicon, goal_text: &str) -> Result<Vec<(String, TagClass)>> {
    if goal_text.trim().is_empty() {
        return Err(Error::EmptyGoal);
    }
    Ok(tokenize(goal_text)
        .into_iter()
        .map(|(token, _)| {
            let tag = lexicon.tag(&token);
            (token, tag)
        })
        .collect())
}

/// Tags with the bundled lexicon.
pub fn tag_tokens(goal_text: &str) -> Result<Vec<(String, TagClass)>> {
    tag_tokens_with(Lexicon::bundled(), goal_text)
}

/// Extracts up to `max_k` keywords from the behavior's goal, nouns first,
/// then adjectives, then verbs; within a class by descending in-goal
/// frequency, then earliest first occurrence. Stopwords and tokens shorter
/// than three characters are excluded. If nothing survives the filter, the
/// longest non-stopword tokens are used regardless of class (recorded as
/// nouns); a goal of nothing but stopwords falls back to its longest tokens.
pub fn extract_keywords_with(
    lexicon: &Lexicon,
    behavior: &Behavior,
    max_k: usize,
) -> Result<KeywordSet> {
    assert!((1..=5).contains(&max_k), "max_k must be 1..=5");
    if behavior.goal_text.trim().is_empty() {
        return Err(Error::EmptyGoal);
    }
    let tokens = tokenize(&behavior.goal_text);
    if tokens.is_empty() {
        return Err(Error::EmptyGoal);
    }

    struct Candidate {
        class: PosClass,
        frequency: usize,
        first_offset: usize,
    }

    let mut by_text: HashMap<String, Candidate> = HashMap::new();
    for (token, offset) in &tokens {
        if token.chars().count() < 3 || lexicon.is_stopword(token) {
            continue;
        }
        let TagClass::Pos(class) = lexicon.tag(token) else {
            continue;
        };
        by_text
            .entry(token.clone())
            .and_modify(|c| c.frequency += 1)
            .or_insert(Candidate {
                class,
                frequency: 1,
                first_offset: *offset,
            });
    }

    let mut ranked: Vec<(String, Candidate)> = by_text.into_iter().collect();
    ranked.sort_by(|(ta, a), (tb, b)| {
        a.class
            .priority()
            .cmp(&b.class.priority())
            .then(b.frequency.cmp(&a.frequency))
            .then(a.first_offset.cmp(&b.first_offset))
            .then(ta.cmp(tb))
    });

    let mut keywords: Vec<Keyword> = ranked
        .into_iter()
        .take(max_k)
        .map(|(text, c)| Keyword {
            text,
            pos_class: c.class,
            first_offset: c.first_offset,
        })
        .collect();

    if keywords.is_empty() {
        keywords = fallback_keywords(lexicon, &tokens, max_k);
    }
    if keywords.is_empty() {
        return Err(Error::EmptyGoal);
    }
    KeywordSet::new(keywords, behavior.id.clone())
}

fn fallback_keywords(
    lexicon: &Lexicon,
    tokens: &[(String, usize)],
    max_k: usize,
) -> Vec<Keyword> {
    let mut pick = |allow_stopwords: bool| -> Vec<Keyword> {
        let mut seen = HashSet::new();
        let mut unique: Vec<(String, usize)> = Vec::new();
        for (token, offset) in tokens {
            if !allow_stopwords && lexicon.is_stopword(token) {
                continue;
            }
            if seen.insert(token.clone()) {
                unique.push((token.clone(), *offset));
            }
        }
        unique.sort_by(|(ta, oa), (tb, ob)| {
            tb.chars()
                .count()
                .cmp(&ta.chars().count())
                .then(oa.cmp(ob))
        });
        unique
            .into_iter()
            .take(max_k)
            .map(|(text, first_offset)| Keyword {
                text,
                pos_class: PosClass::Noun,
                first_offset,
            })
            .collect()
    };
    let longest = pick(false);
    if longest.is_empty() {
        pick(true)
    } else {
        longest
    }
}

/// Extraction with the bundled lexicon.
pub fn extract_keywords(behavior: &Behavior, max_k: usize) -> Result<KeywordSet> {
    extract_keywords_with(Lexicon::bundled(), behavior, max_k)
}
