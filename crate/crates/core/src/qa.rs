//! Multiple-choice question generation and rephrasing.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::budget::{CallCharge, CostCategory, Usage};
use crate::prompts;
use crate::util::{derive_seed, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Letter {
    A,
    B,
    C,
    D,
}

impl Letter {
    pub const ALL: [Letter; 4] = [Letter::A, Letter::B, Letter::C, Letter::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'A' => Some(Self::A),
            'B' => Some(Self::B),
            'C' => Some(Self::C),
            'D' => Some(Self::D),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        (b'A' + self as u8) as char
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// One validated multiple-choice question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub qa_id: String,
    pub para_id: String,
    pub base_index: usize,
    /// 0 for the generated question, 1.. for rephrasings.
    pub variant_index: usize,
    pub question: String,
    /// Option texts without their letter labels, in A..D order.
    pub options: [String; 4],
    pub answer: Letter,
    pub statement: String,
}

pub fn qa_id(para_id: &str, base_index: usize, variant_index: usize) -> String {
    format!("{para_id}/q{base_index}v{variant_index}")
}

impl QaItem {
    pub fn labelled_options(&self) -> Vec<String> {
        Letter::ALL
            .iter()
            .zip(&self.options)
            .map(|(l, o)| format!("{l}: {o}"))
            .collect()
    }

    /// Re-check the item invariants (used when loading persisted items).
    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.question.trim().is_empty() {
            return Err(SchemaError::EmptyField {
                item: 0,
                field: "question",
            });
        }
        if self.options.iter().any(|o| o.trim().is_empty()) {
            return Err(SchemaError::EmptyField {
                item: 0,
                field: "options",
            });
        }
        if self.statement.trim().is_empty() {
            return Err(SchemaError::EmptyField {
                item: 0,
                field: "statement",
            });
        }
        if self.qa_id != qa_id(&self.para_id, self.base_index, self.variant_index) {
            return Err(SchemaError::NotJson(format!(
                "qa_id {} does not match its fields",
                self.qa_id
            )));
        }
        Ok(())
    }
}

/// A question parsed from a generator reply, before ids are assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedQuestion {
    pub question: String,
    pub options: [String; 4],
    pub answer: Letter,
    pub statement: String,
}

impl ParsedQuestion {
    pub fn into_item(self, para_id: &str, base_index: usize, variant_index: usize) -> QaItem {
        QaItem {
            qa_id: qa_id(para_id, base_index, variant_index),
            para_id: para_id.to_string(),
            base_index,
            variant_index,
            question: self.question,
            options: self.options,
            answer: self.answer,
            statement: self.statement,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchemaError {
    #[error("reply is not a JSON array of questions: {0}")]
    NotJson(String),
    #[error("reply has {got} questions, expected {expected}")]
    Count { expected: usize, got: usize },
    #[error("item {item}: missing or non-string field {field:?}")]
    MissingField { item: usize, field: &'static str },
    #[error("item {item}: empty {field}")]
    EmptyField { item: usize, field: &'static str },
    #[error("item {item}: expected 4 options, got {got}")]
    OptionCount { item: usize, got: usize },
    #[error("item {item}: option labels must be A-D, each once")]
    OptionLabels { item: usize },
    #[error("item {item}: answer {answer:?} is not one of A-D")]
    Answer { item: usize, answer: String },
}

fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.split_once('\n').map_or("", |(_, body)| body);
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

/// Split "A: text" / "A. text" / "A) text" into its label and text.
fn split_label(option: &str) -> Option<(Letter, &str)> {
    let t = option.trim_start();
    let mut chars = t.chars();
    let letter = Letter::from_char(chars.next()?)?;
    let rest = chars.as_str();
    let sep = rest.chars().next()?;
    if matches!(sep, ':' | '.' | ')') {
        Some((letter, rest[sep.len_utf8()..].trim()))
    } else {
        None
    }
}

fn parse_answer(item: usize, raw: &str) -> Result<Letter, SchemaError> {
    let t = raw.trim();
    let bad = || SchemaError::Answer {
        item,
        answer: raw.to_string(),
    };
    let mut chars = t.chars();
    let letter = chars.next().and_then(Letter::from_char).ok_or_else(bad)?;
    let rest = chars.as_str().trim_start();
    if rest.is_empty() || rest.starts_with([':', '.', ')']) {
        Ok(letter)
    } else {
        Err(bad())
    }
}

fn string_field<'a>(
    obj: &'a serde_json::Map<String, Value>,
    item: usize,
    field: &'static str,
) -> Result<&'a str, SchemaError> {
    let s = obj
        .get(field)
        .and_then(Value::as_str)
        .ok_or(SchemaError::MissingField { item, field })?;
    if s.trim().is_empty() {
        return Err(SchemaError::EmptyField { item, field });
    }
    Ok(s.trim())
}

fn parse_item(item: usize, v: &Value) -> Result<ParsedQuestion, SchemaError> {
    let obj = v
        .as_object()
        .ok_or_else(|| SchemaError::NotJson(format!("item {item} is not an object")))?;
    let question = string_field(obj, item, "question")?;
    let statement = string_field(obj, item, "statement")?;
    let raw_options =
        obj.get("options")
            .and_then(Value::as_array)
            .ok_or(SchemaError::MissingField {
                item,
                field: "options",
            })?;
    if raw_options.len() != 4 {
        return Err(SchemaError::OptionCount {
            item,
            got: raw_options.len(),
        });
    }
    let texts: Vec<&str> = raw_options
        .iter()
        .map(|o| {
            o.as_str().ok_or(SchemaError::MissingField {
                item,
                field: "options",
            })
        })
        .collect::<Result<_, _>>()?;
    let labelled: Vec<Option<(Letter, &str)>> = texts.iter().map(|t| split_label(t)).collect();
    let mut options: [String; 4] = Default::default();
    if labelled.iter().all(Option::is_some) {
        let mut seen = [false; 4];
        for (letter, text) in labelled.into_iter().flatten() {
            if std::mem::replace(&mut seen[letter.index()], true) {
                return Err(SchemaError::OptionLabels { item });
            }
            options[letter.index()] = text.to_string();
        }
    } else if labelled.iter().all(Option::is_none) {
        for (slot, text) in options.iter_mut().zip(&texts) {
            *slot = text.trim().to_string();
        }
    } else {
        return Err(SchemaError::OptionLabels { item });
    }
    if options.iter().any(|o| o.is_empty()) {
        return Err(SchemaError::EmptyField {
            item,
            field: "options",
        });
    }
    let answer_raw =
        obj.get("answer")
            .and_then(Value::as_str)
            .ok_or(SchemaError::MissingField {
                item,
                field: "answer",
            })?;
    let answer = parse_answer(item, answer_raw)?;
    Ok(ParsedQuestion {
        question: question.to_string(),
        options,
        answer,
        statement: statement.to_string(),
    })
}

/// Parse and validate a generator reply in the prompts' array-of-objects
/// format. Replies with fewer than `expected` questions, or any invalid
/// question, are rejected; extra questions beyond `expected` are ignored.
pub fn parse_reply(raw: &str, expected: usize) -> Result<Vec<ParsedQuestion>, SchemaError> {
    let body = strip_fences(raw);
    let value: Value =
        serde_json::from_str(body).map_err(|e| SchemaError::NotJson(e.to_string()))?;
    let items = value
        .as_array()
        .ok_or_else(|| SchemaError::NotJson("top-level value is not an array".into()))?;
    if items.len() < expected {
        return Err(SchemaError::Count {
            expected,
            got: items.len(),
        });
    }
    items
        .iter()
        .take(expected)
        .enumerate()
        .map(|(i, v)| parse_item(i, v))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequestKind {
    Generate,
    Rephrase,
}

/// Everything a generator may use; remote generators send only `prompt`.
#[derive(Debug, Clone)]
pub struct GenerationRequest<'a> {
    pub kind: RequestKind,
    pub prompt: String,
    pub num_of_qa: usize,
    pub title: &'a str,
    pub context: &'a str,
    pub base: Option<&'a QaItem>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationReply {
    pub text: String,
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenError {
    #[error("generator transport failure: {0}")]
    Transport(String),
    #[error("generator provider error: {0}")]
    Provider(String),
}

pub trait QuestionGenerator: Send + Sync {
    fn model_tag(&self) -> &str;
    fn fingerprint(&self) -> String;
    fn generate(&self, req: &GenerationRequest<'_>) -> Result<GenerationReply, GenError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaConfig {
    pub n_base: usize,
    pub n_variants: usize,
    /// Extra attempts after a malformed reply or transport failure.
    pub max_retries: u32,
    /// A paragraph fails when it produces at most `floor * target_total` items.
    pub floor: f64,
    pub generator: GeneratorKind,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Template,
    Remote,
}

impl Default for QaConfig {
    fn default() -> Self {
        Self {
            n_base: 5,
            n_variants: 4,
            max_retries: 3,
            floor: 0.6,
            generator: GeneratorKind::Template,
            base_url: None,
            model: None,
            timeout_secs: 120,
            max_in_flight: 8,
        }
    }
}

impl QaConfig {
    pub fn target_total(&self) -> usize {
        self.n_base * (1 + self.n_variants)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_base == 0 {
            return Err("qa.n_base must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.floor) {
            return Err("qa.floor must be within [0, 1]".into());
        }
        Ok(())
    }
}

/// Raw generator exchange kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub para_id: String,
    pub kind: RequestKind,
    pub base_index: Option<usize>,
    pub attempt: u32,
    pub prompt: String,
    pub reply: Option<String>,
    pub usage: Option<Usage>,
    pub accepted: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QaStatus {
    Complete,
    Partial,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaSet {
    pub para_id: String,
    pub items: Vec<QaItem>,
    pub target_total: usize,
    pub failed_bases: usize,
    pub status: QaStatus,
    pub transcripts: Vec<Transcript>,
    pub charges: Vec<CallCharge>,
}

/// The paragraph a question set is built from.
#[derive(Debug, Clone, Copy)]
pub struct QaSource<'a> {
    pub para_id: &'a str,
    /// Document title joined with the section path.
    pub title: &'a str,
    pub context: &'a str,
}

struct Attempts<'a> {
    generator: &'a dyn QuestionGenerator,
    src: QaSource<'a>,
    max_retries: u32,
    transcripts: Vec<Transcript>,
    charges: Vec<CallCharge>,
}

impl Attempts<'_> {
    fn run(
        &mut self,
        req: &GenerationRequest<'_>,
        base_index: Option<usize>,
    ) -> Option<Vec<ParsedQuestion>> {
        for attempt in 0..=self.max_retries {
            let mut t = Transcript {
                para_id: self.src.para_id.to_string(),
                kind: req.kind,
                base_index,
                attempt,
                prompt: req.prompt.clone(),
                reply: None,
                usage: None,
                accepted: false,
                error: None,
            };
            match self.generator.generate(req) {
                Ok(reply) => {
                    let usage = reply
                        .usage
                        .unwrap_or_else(|| Usage::estimate(&req.prompt, &reply.text));
                    self.charges.push(CallCharge::new(
                        CostCategory::Generation,
                        self.generator.model_tag(),
                        usage,
                    ));
                    t.usage = Some(usage);
                    let parsed = parse_reply(&reply.text, req.num_of_qa);
                    t.reply = Some(reply.text);
                    match parsed {
                        Ok(qs) => {
                            t.accepted = true;
                            self.transcripts.push(t);
                            return Some(qs);
                        }
                        Err(e) => t.error = Some(e.to_string()),
                    }
                }
                Err(e) => {
                    self.charges.push(CallCharge::failed(
                        CostCategory::Generation,
                        self.generator.model_tag(),
                    ));
                    t.error = Some(e.to_string());
                }
            }
            log::debug!(
                "{} {:?} attempt {attempt} rejected: {:?}",
                self.src.para_id,
                req.kind,
                t.error
            );
            self.transcripts.push(t);
        }
        None
    }
}

pub fn generation_seed(seed: u64, para_id: &str, kind: RequestKind, base_index: usize) -> u64 {
    let kind = match kind {
        RequestKind::Generate => "generate",
        RequestKind::Rephrase => "rephrase",
    };
    derive_seed(seed, &["qa", para_id, kind, &base_index.to_string()])
}

/// Generate base questions, then rephrase each. A base question whose
/// rephrasing fails is dropped with all its variants, so surviving bases keep
/// the configured multiplicity.
pub fn build_qa_set(
    src: QaSource<'_>,
    generator: &dyn QuestionGenerator,
    cfg: &QaConfig,
    seed: u64,
) -> QaSet {
    let mut at = Attempts {
        generator,
        src,
        max_retries: cfg.max_retries,
        transcripts: Vec::new(),
        charges: Vec::new(),
    };
    let target_total = cfg.target_total();
    let req = GenerationRequest {
        kind: RequestKind::Generate,
        prompt: prompts::qa_generation(cfg.n_base, src.title, src.context),
        num_of_qa: cfg.n_base,
        title: src.title,
        context: src.context,
        base: None,
        seed: generation_seed(seed, src.para_id, RequestKind::Generate, 0),
    };
    let bases: Vec<QaItem> = at
        .run(&req, None)
        .unwrap_or_default()
        .into_iter()
        .enumerate()
        .map(|(b, q)| q.into_item(src.para_id, b, 0))
        .collect();
    let mut items = Vec::with_capacity(target_total);
    let mut failed_bases = cfg.n_base - bases.len();
    for base in &bases {
        if cfg.n_variants == 0 {
            items.push(base.clone());
            continue;
        }
        let req = GenerationRequest {
            kind: RequestKind::Rephrase,
            prompt: prompts::rephrase(cfg.n_variants, src.title, src.context, &base.question),
            num_of_qa: cfg.n_variants,
            title: src.title,
            context: src.context,
            base: Some(base),
            seed: generation_seed(seed, src.para_id, RequestKind::Rephrase, base.base_index),
        };
        match at.run(&req, Some(base.base_index)) {
            Some(variants) => {
                items.push(base.clone());
                items.extend(
                    variants
                        .into_iter()
                        .enumerate()
                        .map(|(v, q)| q.into_item(src.para_id, base.base_index, v + 1)),
                );
            }
            None => failed_bases += 1,
        }
    }
    let status = if items.len() == target_total {
        QaStatus::Complete
    } else if (items.len() as f64) <= cfg.floor * target_total as f64 {
        QaStatus::Failed
    } else {
        QaStatus::Partial
    };
    QaSet {
        para_id: src.para_id.to_string(),
        items,
        target_total,
        failed_bases,
        status,
        transcripts: at.transcripts,
        charges: at.charges,
    }
}

/// Deterministic offline generator.
///
/// Base questions ask which term occurs in the passage; the correct option is
/// a passage word and the distractors are fixed filler terms. Options are
/// shuffled with the request seed. Rephrasings reuse the base options in a
/// seeded permutation, so the answer letter moves with the correct option.
#[derive(Debug, Clone, Default)]
pub struct TemplateGenerator;

const DISTRACTORS: [&str; 12] = [
    "quasar", "lattice", "meridian", "obsidian", "tundra", "filament", "harbor", "cipher",
    "orchid", "vector", "granite", "citadel",
];

impl TemplateGenerator {
    fn keywords(context: &str) -> Vec<String> {
        let mut words: Vec<String> = context
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| w.chars().count() >= 4)
            .map(str::to_lowercase)
            .collect();
        let mut seen = std::collections::HashSet::new();
        words.retain(|w| seen.insert(w.clone()));
        if words.is_empty() {
            words.push("passage".into());
        }
        words
    }

    fn base_questions(req: &GenerationRequest<'_>) -> Vec<Value> {
        let keywords = Self::keywords(req.context);
        let mut rng = rng_for(req.seed, &["template-base"]);
        (0..req.num_of_qa)
            .map(|b| {
                let correct = keywords[b % keywords.len()].clone();
                let mut options: Vec<(String, bool)> = vec![(correct.clone(), true)];
                let mut k = b;
                while options.len() < 4 {
                    let d = DISTRACTORS[k % DISTRACTORS.len()];
                    k += 1;
                    if d != correct && options.iter().all(|(o, _)| o != d) {
                        options.push((d.to_string(), false));
                    }
                }
                options.shuffle(&mut rng);
                Self::render(
                    format!(
                        "Which term is discussed in connection with {} (item {})?",
                        req.title,
                        b + 1
                    ),
                    &options,
                    format!(
                        "The term {correct} is discussed in connection with {}.",
                        req.title
                    ),
                )
            })
            .collect()
    }

    fn rephrasings(req: &GenerationRequest<'_>, base: &QaItem) -> Vec<Value> {
        let mut rng = rng_for(req.seed, &["template-rephrase"]);
        (0..req.num_of_qa)
            .map(|v| {
                let mut options: Vec<(String, bool)> = base
                    .options
                    .iter()
                    .enumerate()
                    .map(|(i, o)| (o.clone(), i == base.answer.index()))
                    .collect();
                options.shuffle(&mut rng);
                Self::render(
                    format!("(Variant {}) {}", v + 1, base.question),
                    &options,
                    base.statement.clone(),
                )
            })
            .collect()
    }

    fn render(question: String, options: &[(String, bool)], statement: String) -> Value {
        let answer = options
            .iter()
            .position(|(_, ok)| *ok)
            .expect("one correct option");
        serde_json::json!({
            "question": question,
            "options": options
                .iter()
                .zip(Letter::ALL)
                .map(|((o, _), l)| format!("{l}: {o}"))
                .collect::<Vec<_>>(),
            "statement": statement,
            "answer": Letter::ALL[answer].to_string(),
        })
    }
}

impl QuestionGenerator for TemplateGenerator {
    fn model_tag(&self) -> &str {
        "template-generator"
    }

    fn fingerprint(&self) -> String {
        "template-generator-v1".into()
    }

    fn generate(&self, req: &GenerationRequest<'_>) -> Result<GenerationReply, GenError> {
        let items = match (req.kind, req.base) {
            (RequestKind::Rephrase, Some(base)) => Self::rephrasings(req, base),
            (RequestKind::Rephrase, None) => {
                return Err(GenError::Provider("rephrase without base".into()))
            }
            (RequestKind::Generate, _) => Self::base_questions(req),
        };
        let text = serde_json::to_string_pretty(&items).expect("json values serialize");
        Ok(GenerationReply {
            usage: Some(Usage::estimate(&req.prompt, &text)),
            text,
        })
    }
}

/// Replays a fixed queue of replies; once exhausted it delegates to a
/// fallback generator, or fails with a transport error without one.
pub struct ScriptedGenerator {
    queue: Mutex<VecDeque<Result<String, GenError>>>,
    fallback: Option<Box<dyn QuestionGenerator>>,
}

impl ScriptedGenerator {
    pub fn new(
        replies: Vec<Result<String, GenError>>,
        fallback: Option<Box<dyn QuestionGenerator>>,
    ) -> Self {
        Self {
            queue: Mutex::new(replies.into()),
            fallback,
        }
    }
}

impl QuestionGenerator for ScriptedGenerator {
    fn model_tag(&self) -> &str {
        "scripted-generator"
    }

    fn fingerprint(&self) -> String {
        "scripted-generator".into()
    }

    fn generate(&self, req: &GenerationRequest<'_>) -> Result<GenerationReply, GenError> {
        let next = self.queue.lock().expect("queue lock").pop_front();
        match (next, &self.fallback) {
            (Some(r), _) => r.map(|text| GenerationReply { text, usage: None }),
            (None, Some(f)) => f.generate(req),
            (None, None) => Err(GenError::Transport("script exhausted".into())),
        }
    }
}
