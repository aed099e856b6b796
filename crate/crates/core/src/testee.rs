//! The model under test: prompting, answer parsing, and a simulated oracle.

use std::fmt;
use std::sync::OnceLock;
use std::time::Instant;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::budget::{CallCharge, CostCategory, Usage};
use crate::corpus::Corpus;
use crate::embedding::{embed_texts, Embedder, Embedding, EmbeddingConfig};
use crate::prompts;
use crate::qa::{Letter, QaItem};
use crate::util::{fnv1a64, mix64, unit_from_hash};

/// A parsed testee choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Choice {
    Letter(Letter),
    Unparsable,
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Letter(l) => write!(f, "{l}"),
            Self::Unparsable => f.write_str("UNPARSABLE"),
        }
    }
}

impl From<Choice> for String {
    fn from(c: Choice) -> Self {
        c.to_string()
    }
}

impl TryFrom<String> for Choice {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        if s == "UNPARSABLE" {
            return Ok(Self::Unparsable);
        }
        let mut chars = s.chars();
        match (chars.next().and_then(Letter::from_char), chars.next()) {
            (Some(l), None) => Ok(Self::Letter(l)),
            _ => Err(format!("invalid choice {s:?}")),
        }
    }
}

fn box_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\\box(?:ed)?\s*\{\s*\(?\s*([A-D])\s*\)?\s*(?:[:.)\-,][^}]*|\s[^}]*)?\}")
            .expect("valid regex")
    })
}

fn prose_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i:answer\s+is|answer\s*:)[\s:*_(\[]*([A-D])(?:[^A-Za-z0-9]|$)")
            .expect("valid regex")
    })
}

/// Extract the testee's choice: the last `\box{X}` (or `\boxed{X}`) with
/// X in A-D, else the last letter following "answer is" / "Answer:", else
/// `Unparsable`.
pub fn parse_choice(raw: &str) -> Choice {
    let from = |re: &Regex| {
        re.captures_iter(raw)
            .last()
            .and_then(|c| c[1].chars().next())
            .and_then(Letter::from_char)
    };
    from(box_pattern())
        .or_else(|| from(prose_pattern()))
        .map_or(Choice::Unparsable, Choice::Letter)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TesteeError {
    #[error("testee transport failure: {0}")]
    Transport(String),
    #[error("testee provider error: {0}")]
    Provider(String),
}

#[derive(Debug, Clone)]
pub struct TesteeQuery<'a> {
    pub prompt: String,
    pub item: &'a QaItem,
    /// Embedding of the question's paragraph, supplied when
    /// [`Testee::needs_embedding`] is true.
    pub para_embedding: Option<&'a Embedding>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TesteeReply {
    pub text: String,
    pub usage: Option<Usage>,
}

pub trait Testee: Send + Sync {
    fn model_tag(&self) -> &str;
    fn fingerprint(&self) -> String;
    fn needs_embedding(&self) -> bool {
        false
    }
    fn respond(&self, query: &TesteeQuery<'_>) -> Result<TesteeReply, TesteeError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TesteeKind {
    Simulated,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TesteeConfig {
    pub kind: TesteeKind,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    /// Requests per second; unlimited when absent.
    pub rate_limit: Option<f64>,
    pub landscape: Option<LandscapeSpec>,
}

impl Default for TesteeConfig {
    fn default() -> Self {
        Self {
            kind: TesteeKind::Simulated,
            base_url: None,
            model: None,
            temperature: 0.1,
            top_p: 0.9,
            max_retries: 3,
            timeout_secs: 60,
            max_in_flight: 16,
            rate_limit: None,
            landscape: None,
        }
    }
}

impl TesteeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!(
                "testee.temperature {} outside [0, 2]",
                self.temperature
            ));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("testee.top_p {} outside (0, 1]", self.top_p));
        }
        if let Some(l) = &self.landscape {
            l.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub qa_id: String,
    pub para_id: String,
    pub raw_text: String,
    pub parsed: Choice,
    /// Unparsable replies count as incorrect.
    pub correct: bool,
    pub usage: Usage,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub latency_ms: u64,
}

/// Ask one question, retrying transport failures. Every attempt produces one
/// charge; an attempt that never succeeds yields an unparsable record.
pub fn ask(
    item: &QaItem,
    topic: &str,
    testee: &dyn Testee,
    max_retries: u32,
    para_embedding: Option<&Embedding>,
) -> (AnswerRecord, Vec<CallCharge>) {
    let query = TesteeQuery {
        prompt: prompts::testee(topic, &item.question, &item.labelled_options()),
        item,
        para_embedding,
    };
    let started = Instant::now();
    let mut charges = Vec::new();
    let mut last_error = None;
    for attempt in 1..=max_retries + 1 {
        match testee.respond(&query) {
            Ok(reply) => {
                let usage = reply
                    .usage
                    .unwrap_or_else(|| Usage::estimate(&query.prompt, &reply.text));
                charges.push(CallCharge::new(
                    CostCategory::Testee,
                    testee.model_tag(),
                    usage,
                ));
                let parsed = parse_choice(&reply.text);
                let record = AnswerRecord {
                    qa_id: item.qa_id.clone(),
                    para_id: item.para_id.clone(),
                    raw_text: reply.text,
                    parsed,
                    correct: parsed == Choice::Letter(item.answer),
                    usage,
                    attempts: attempt,
                    error: None,
                    latency_ms: started.elapsed().as_millis() as u64,
                };
                return (record, charges);
            }
            Err(e) => {
                charges.push(CallCharge::failed(CostCategory::Testee, testee.model_tag()));
                log::warn!(
                    "testee call for {} failed (attempt {attempt}): {e}",
                    item.qa_id
                );
                last_error = Some(e.to_string());
            }
        }
    }
    let record = AnswerRecord {
        qa_id: item.qa_id.clone(),
        para_id: item.para_id.clone(),
        raw_text: String::new(),
        parsed: Choice::Unparsable,
        correct: false,
        usage: Usage::default(),
        attempts: max_retries + 1,
        error: last_error,
        latency_ms: started.elapsed().as_millis() as u64,
    };
    (record, charges)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub center: Embedding,
    /// Maximum cosine distance (1 - cosine) from the center.
    pub radius: f64,
    pub error_prob: f64,
}

impl Region {
    pub fn contains(&self, e: &Embedding) -> bool {
        1.0 - self.center.cosine(e) <= self.radius
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorLandscape {
    pub regions: Vec<Region>,
    pub base_error_prob: f64,
    pub seed: u64,
}

impl ErrorLandscape {
    pub fn error_prob(&self, e: &Embedding) -> f64 {
        self.regions
            .iter()
            .filter(|r| r.contains(e))
            .map(|r| r.error_prob)
            .reduce(f64::max)
            .unwrap_or(self.base_error_prob)
    }
}

/// Answer as the simulated testee would. Each question is decided by a hash
/// of the landscape seed and its `qa_id`: wrong with the landscape's error
/// probability at the paragraph, and then uniformly one of the three wrong
/// letters.
pub fn simulate_answer(
    item: &QaItem,
    para_embedding: &Embedding,
    landscape: &ErrorLandscape,
) -> Letter {
    let h = mix64(landscape.seed ^ fnv1a64(item.qa_id.as_bytes()));
    let p = landscape.error_prob(para_embedding);
    if unit_from_hash(mix64(h ^ 1)) < p {
        let offset = 1 + (mix64(h ^ 2) % 3) as usize;
        Letter::from_index((item.answer.index() + offset) % 4).expect("index below 4")
    } else {
        item.answer
    }
}

pub struct SimulatedTestee {
    landscape: ErrorLandscape,
    tag: String,
}

impl SimulatedTestee {
    pub fn new(landscape: ErrorLandscape, tag: &str) -> Self {
        Self {
            landscape,
            tag: tag.to_string(),
        }
    }

    pub fn landscape(&self) -> &ErrorLandscape {
        &self.landscape
    }
}

impl Testee for SimulatedTestee {
    fn model_tag(&self) -> &str {
        &self.tag
    }

    fn fingerprint(&self) -> String {
        format!(
            "simulated:{}:seed{}:regions{}:base{}",
            self.tag,
            self.landscape.seed,
            self.landscape.regions.len(),
            self.landscape.base_error_prob
        )
    }

    fn needs_embedding(&self) -> bool {
        true
    }

    fn respond(&self, query: &TesteeQuery<'_>) -> Result<TesteeReply, TesteeError> {
        let e = query.para_embedding.ok_or_else(|| {
            TesteeError::Provider("simulated testee needs the paragraph embedding".into())
        })?;
        let letter = simulate_answer(query.item, e, &self.landscape);
        Ok(TesteeReply {
            text: format!("\\box{{{letter}}}"),
            usage: None,
        })
    }
}

/// Configured form of a region; the center is given directly, as text to
/// embed, or as a paragraph whose embedding is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    #[serde(default)]
    pub center: Option<Vec<f32>>,
    #[serde(default)]
    pub center_text: Option<String>,
    #[serde(default)]
    pub center_para: Option<String>,
    pub radius: f64,
    pub error_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSpec {
    #[serde(default)]
    pub regions: Vec<RegionSpec>,
    #[serde(default)]
    pub base_error_prob: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_model_tag")]
    pub model_tag: String,
}

fn default_model_tag() -> String {
    "simulated".into()
}

impl LandscapeSpec {
    pub fn validate(&self) -> Result<(), String> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(format!("{name} {p} outside [0, 1]"))
            }
        };
        prob("base_error_prob", self.base_error_prob)?;
        for (i, r) in self.regions.iter().enumerate() {
            prob(&format!("regions[{i}].error_prob"), r.error_prob)?;
            let given = [
                r.center.is_some(),
                r.center_text.is_some(),
                r.center_para.is_some(),
            ];
            if given.iter().filter(|g| **g).count() != 1 {
                return Err(format!(
                    "regions[{i}] needs exactly one of center, center_text, center_para"
                ));
            }
            if !(0.0..=2.0).contains(&r.radius) {
                return Err(format!("regions[{i}].radius {} outside [0, 2]", r.radius));
            }
        }
        Ok(())
    }

    pub fn resolve(
        &self,
        corpus: &Corpus,
        embedder: &dyn Embedder,
        embed_cfg: &EmbeddingConfig,
    ) -> Result<ErrorLandscape, String> {
        self.validate()?;
        let mut regions = Vec::with_capacity(self.regions.len());
        for (i, r) in self.regions.iter().enumerate() {
            let text = match (&r.center, &r.center_text, &r.center_para) {
                (Some(v), _, _) => {
                    if v.len() != embedder.dimension() {
                        return Err(format!(
                            "regions[{i}].center has dimension {}, embedder has {}",
                            v.len(),
                            embedder.dimension()
                        ));
                    }
                    regions.push(Region {
                        center: Embedding::new(v.clone()).map_err(|e| e.to_string())?,
                        radius: r.radius,
                        error_prob: r.error_prob,
                    });
                    continue;
                }
                (_, Some(t), _) => t.clone(),
                (_, _, Some(p)) => {
                    let idx = corpus
                        .para_idx(p)
                        .ok_or_else(|| format!("regions[{i}].center_para {p:?} not in corpus"))?;
                    corpus.paragraph(idx).text.clone()
                }
                _ => unreachable!("validated"),
            };
            let (mut v, _) =
                embed_texts(embedder, &[&text], embed_cfg).map_err(|e| e.to_string())?;
            regions.push(Region {
                center: v.remove(0),
                radius: r.radius,
                error_prob: r.error_prob,
            });
        }
        Ok(ErrorLandscape {
            regions,
            base_error_prob: self.base_error_prob,
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(answer: Letter, id: &str) -> QaItem {
        QaItem {
            qa_id: id.into(),
            para_id: "p".into(),
            base_index: 0,
            variant_index: 0,
            question: "q".into(),
            options: ["a".into(), "b".into(), "c".into(), "d".into()],
            answer,
            statement: "s".into(),
        }
    }

    fn e(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn parse_rules() {
        assert_eq!(parse_choice("\\box{C}"), Choice::Letter(Letter::C));
        assert_eq!(
            parse_choice("Reasoning... The answer is B."),
            Choice::Letter(Letter::B)
        );
        assert_eq!(parse_choice("I cannot decide."), Choice::Unparsable);
        assert_eq!(
            parse_choice("\\box{A} no wait \\box{D: Paris}"),
            Choice::Letter(Letter::D)
        );
        assert_eq!(parse_choice("\\boxed{B}"), Choice::Letter(Letter::B));
        assert_eq!(parse_choice("Answer: **A**"), Choice::Letter(Letter::A));
        assert_eq!(parse_choice("The answer is Brazil"), Choice::Unparsable);
        assert_eq!(parse_choice("\\box{E}"), Choice::Unparsable);
    }

    #[test]
    fn choice_serde_round_trip() {
        for c in [Choice::Letter(Letter::A), Choice::Unparsable] {
            let s = serde_json::to_string(&c).unwrap();
            assert_eq!(serde_json::from_str::<Choice>(&s).unwrap(), c);
        }
        assert_eq!(
            serde_json::to_string(&Choice::Unparsable).unwrap(),
            "\"UNPARSABLE\""
        );
    }

    fn landscape(regions: Vec<Region>, base: f64) -> ErrorLandscape {
        ErrorLandscape {
            regions,
            base_error_prob: base,
            seed: 17,
        }
    }

    #[test]
    fn zero_error_landscape_always_correct() {
        let l = landscape(vec![], 0.0);
        for i in 0..500 {
            let it = item(Letter::from_index(i % 4).unwrap(), &format!("q{i}"));
            assert_eq!(simulate_answer(&it, &e(&[1.0, 0.0]), &l), it.answer);
        }
    }

    #[test]
    fn certain_error_answers_wrong() {
        let l = landscape(
            vec![Region {
                center: e(&[1.0, 0.0]),
                radius: 0.1,
                error_prob: 1.0,
            }],
            0.0,
        );
        let mut seen = std::collections::HashSet::new();
        for i in 0..300 {
            let it = item(Letter::B, &format!("q{i}"));
            let got = simulate_answer(&it, &e(&[1.0, 0.0]), &l);
            assert_ne!(got, Letter::B);
            seen.insert(got);
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn overlapping_regions_take_max() {
        let r = |p| Region {
            center: e(&[1.0, 0.0]),
            radius: 0.5,
            error_prob: p,
        };
        let l = landscape(vec![r(0.3), r(0.7)], 0.1);
        assert_eq!(l.error_prob(&e(&[1.0, 0.1])), 0.7);
        assert_eq!(l.error_prob(&e(&[-1.0, 0.0])), 0.1);
    }

    #[test]
    fn same_qa_id_same_answer() {
        let l = landscape(vec![], 0.5);
        let it = item(Letter::A, "fixed");
        let v = e(&[0.3, 0.4]);
        assert_eq!(simulate_answer(&it, &v, &l), simulate_answer(&it, &v, &l));
    }

    struct Flaky(std::sync::atomic::AtomicU32);

    impl Testee for Flaky {
        fn model_tag(&self) -> &str {
            "flaky"
        }
        fn fingerprint(&self) -> String {
            "flaky".into()
        }
        fn respond(&self, _: &TesteeQuery<'_>) -> Result<TesteeReply, TesteeError> {
            if self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst) < 2 {
                Err(TesteeError::Transport("reset".into()))
            } else {
                Ok(TesteeReply {
                    text: "\\box{B}".into(),
                    usage: Some(Usage::new(10, 2)),
                })
            }
        }
    }

    #[test]
    fn retries_charge_every_attempt() {
        let (rec, charges) = ask(&item(Letter::B, "x"), "t", &Flaky(0.into()), 3, None);
        assert!(rec.correct);
        assert_eq!(rec.attempts, 3);
        assert_eq!(charges.len(), 3);
        assert_eq!(charges.iter().filter(|c| c.failed).count(), 2);
    }

    #[test]
    fn exhausted_retries_unparsable() {
        let (rec, charges) = ask(&item(Letter::B, "x"), "t", &Flaky(0.into()), 1, None);
        assert_eq!(rec.parsed, Choice::Unparsable);
        assert!(!rec.correct);
        assert!(rec.error.is_some());
        assert_eq!(charges.len(), 2);
    }
}
