//! Shared domain types and the text normalization used for leakage and
//! refusal matching.
//!
//! Everything here is immutable after construction and safe to share across
//! threads. All types serialize to self-describing JSON records (one per line
//! in the append-only run logs) with field names matching the struct fields.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Stable key for a harmful behavior (benchmark row).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BehaviorId(pub String);

/// Content-addressed haystack identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HaystackId(pub String);

/// Content-addressed attack-prompt identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptId(pub String);

macro_rules! impl_id_display {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
        impl From<&str> for $t {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    )*};
}
impl_id_display!(BehaviorId, HaystackId, PromptId);

/// Hash of the given parts, truncated to 16 hex chars. Used for all
/// content-addressed identifiers so reruns deduplicate naturally.
pub fn content_id(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable sub-seed derived from a root seed and labeling parts.
pub fn derive_seed(root: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// One harmful goal from a behavior file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Behavior {
    pub id: BehaviorId,
    pub goal_text: String,
    pub category: String,
    /// Provenance label, e.g. benchmark file name + row index.
    pub source: String,
}

impl Behavior {
    pub fn new(
        id: impl Into<String>,
        goal_text: impl Into<String>,
        category: impl Into<String>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let goal_text = goal_text.into();
        if goal_text.trim().is_empty() {
            return Err(Error::EmptyGoal);
        }
        Ok(Self {
            id: BehaviorId(id.into()),
            goal_text,
            category: category.into(),
            source: source.into(),
        })
    }
}

/// Part-of-speech class a keyword may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosClass {
    Noun,
    Adjective,
    Verb,
}

impl PosClass {
    /// Selection priority: nouns first, then adjectives, then verbs.
    pub fn priority(self) -> u8 {
        match self {
            PosClass::Noun => 0,
            PosClass::Adjective => 1,
            PosClass::Verb => 2,
        }
    }
}

/// A single keyword lifted from a goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    /// Lowercase token as it matches the goal.
    pub text: String,
    pub pos_class: PosClass,
    /// Character offset of the first occurrence in the goal text.
    pub first_offset: usize,
}

/// Up to five keywords in priority order, tied to one behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordSet {
    pub keywords: Vec<Keyword>,
    pub behavior_id: BehaviorId,
}

impl KeywordSet {
    pub fn new(keywords: Vec<Keyword>, behavior_id: BehaviorId) -> Result<Self> {
        let set = Self {
            keywords,
            behavior_id,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.keywords.is_empty() || self.keywords.len() > 5 {
            return Err(Error::Config(format!(
                "keyword set must hold 1..=5 keywords, got {}",
                self.keywords.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for pair in self.keywords.windows(2) {
            if pair[0].pos_class.priority() > pair[1].pos_class.priority() {
                return Err(Error::Config(
                    "keyword ordering violates noun > adjective > verb priority".into(),
                ));
            }
        }
        for kw in &self.keywords {
            if !seen.insert(kw.text.clone()) {
                return Err(Error::Config(format!("duplicate keyword {:?}", kw.text)));
            }
        }
        Ok(())
    }
}

/// A passage-generation template with exactly one `{keyword}` placeholder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageTemplate {
    pub id: String,
    pub pattern: String,
}

impl PassageTemplate {
    pub fn new(id: impl Into<String>, pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        if pattern.matches("{keyword}").count() != 1 {
            return Err(Error::Config(format!(
                "template pattern must contain exactly one {{keyword}} placeholder: {pattern:?}"
            )));
        }
        Ok(Self {
            id: id.into(),
            pattern,
        })
    }

    pub fn instantiate(&self, keyword: &str) -> String {
        self.pattern.replace("{keyword}", keyword)
    }
}

/// One generated context passage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    /// Keyword the passage was generated around; None for HTML filler.
    pub keyword: Option<Keyword>,
    /// Template that produced it; None for HTML filler.
    pub template_id: Option<String>,
    pub text: String,
    pub token_count: u64,
}

/// Whether a haystack is thematically relevant or generic HTML filler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    Relevant,
    IrrelevantHtml,
}

impl fmt::Display for Relevance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Relevance::Relevant => f.write_str("relevant"),
            Relevance::IrrelevantHtml => f.write_str("irrelevant_html"),
        }
    }
}

/// A benign context of ordered passages, grown until it reaches a target
/// token length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Haystack {
    pub id: HaystackId,
    pub behavior_id: BehaviorId,
    pub passages: Vec<Passage>,
    /// Sum of passage token counts plus joiner tokens.
    pub total_tokens: u64,
    /// Requested context length L in tokens.
    pub target_length: u64,
    pub relevance: Relevance,
    pub generator_model: String,
    pub seed: u64,
    /// Identity of the tokenizer every token_count was measured with.
    pub tokenizer: String,
    /// Separator inserted between passages when composing the context text.
    pub joiner: String,
}

impl Haystack {
    /// The context text exactly as it enters prompt composition.
    pub fn concatenated_text(&self) -> String {
        let mut out = String::new();
        for (i, passage) in self.passages.iter().enumerate() {
            if i > 0 {
                out.push_str(&self.joiner);
            }
            out.push_str(&passage.text);
        }
        out
    }
}

/// Where the goal sits relative to the context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GoalPosition {
    Front,
    End,
    Interior { fraction: f64 },
}

impl GoalPosition {
    pub fn interior(fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidPosition(format!(
                "interior fraction must satisfy 0 < d < 1, got {fraction}"
            )));
        }
        Ok(GoalPosition::Interior { fraction })
    }

    /// Compact label used in condition keys, CSV columns, and file names.
    pub fn label(&self) -> String {
        match self {
            GoalPosition::Front => "front".to_string(),
            GoalPosition::End => "end".to_string(),
            GoalPosition::Interior { fraction } => format!("d={fraction}"),
        }
    }
}

impl fmt::Display for GoalPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl std::str::FromStr for GoalPosition {
    type Err = Error;

    /// Parses the CLI syntax `front | end | d=<0..1>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "front" => Ok(GoalPosition::Front),
            "end" => Ok(GoalPosition::End),
            other => {
                if let Some(frac) = other.strip_prefix("d=") {
                    let d: f64 = frac.parse().map_err(|_| {
                        Error::InvalidPosition(format!("cannot parse fraction {frac:?}"))
                    })?;
                    GoalPosition::interior(d)
                } else {
                    Err(Error::InvalidPosition(format!(
                        "expected front, end, or d=<0..1>, got {other:?}"
                    )))
                }
            }
        }
    }
}

/// A fully composed attack prompt with its token accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackPrompt {
    pub id: PromptId,
    pub behavior_id: BehaviorId,
    pub haystack_id: HaystackId,
    pub position: GoalPosition,
    pub composed_text: String,
    /// P: tokens attributable to the goal plus template scaffolding.
    pub prompt_tokens: u64,
    /// L: tokens attributable to the haystack.
    pub context_tokens: u64,
}

/// Sampling parameters for a chat completion call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub nucleus: f64,
    /// Per-run sampling seed; drives the deterministic mock and is passed
    /// through to endpoints that support it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_tokens: 512,
            nucleus: 1.0,
            seed: None,
        }
    }
}

/// Endpoint-reported token usage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Two-tier outcome of one trial: did the model refuse, and if not, did it
/// actually fulfill the goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub refused: bool,
    pub success: bool,
    pub judge_id: String,
    pub judge_raw: String,
}

impl Verdict {
    /// A matched refusal is never a success; the constructor enforces it.
    pub fn new(refused: bool, success: bool, judge_id: impl Into<String>, judge_raw: impl Into<String>) -> Self {
        Self {
            refused,
            success: success && !refused,
            judge_id: judge_id.into(),
            judge_raw: judge_raw.into(),
        }
    }
}

/// One target-model completion for one attack prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub prompt_id: PromptId,
    pub run_index: u32,
    pub target_model: String,
    pub sampling: SamplingParams,
    pub response_text: String,
    pub usage: Usage,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

/// The experimental condition a trial belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub target_model: String,
    pub context_length: u64,
    pub position: GoalPosition,
    pub relevance: Relevance,
}

impl Condition {
    pub fn label(&self) -> String {
        format!(
            "{}/L={}/{}/{}",
            self.target_model,
            self.context_length,
            self.position.label(),
            self.relevance
        )
    }

    /// Sort key giving deterministic ordering of emitted rows and files.
    pub fn sort_key(&self) -> (String, u64, String, String) {
        (
            self.target_model.clone(),
            self.context_length,
            self.position.label(),
            self.relevance.to_string(),
        )
    }
}

/// Per-behavior success counts under one condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub runs: u64,
    pub successes: u64,
    pub p_example: f64,
}

impl ProfileEntry {
    pub fn new(runs: u64, successes: u64) -> Self {
        debug_assert!(successes <= runs);
        Self {
            runs,
            successes,
            p_example: if runs == 0 {
                0.0
            } else {
                successes as f64 / runs as f64
            },
        }
    }
}

/// Per-example success probabilities for one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessProfile {
    pub entries: BTreeMap<BehaviorId, ProfileEntry>,
    pub condition: Condition,
}

/// One point of a fixed-budget curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub context_length: u64,
    pub attempts: u64,
    pub mean_bon_asr: f64,
}

/// Mean best-of-N success over the context-length grid for one budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetCurve {
    pub budget: u64,
    pub points: Vec<CurvePoint>,
}

/// The budget's optimal point: peak mean BoN and the length achieving it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub budget: u64,
    pub optimal_length: u64,
    pub attempts: u64,
    pub peak_mean_bon_asr: f64,
}

/// Lowercases, strips punctuation, and collapses whitespace. Apostrophes are
/// deleted outright (so "I'm" becomes "im"); every other non-alphanumeric
/// character becomes a space. This is the form used for leakage checks and
/// refusal prefix matching.
pub fn normalize_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for ch in raw.chars() {
        if ch == '\'' || ch == '\u{2019}' {
            continue;
        }
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            for lower in ch.to_lowercase() {
                out.push(lower);
            }
        } else {
            pending_space = true;
        }
    }
    out
}
