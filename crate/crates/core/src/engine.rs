//! The search loop: select a batch, build and ask questions, admit source
//! errors, update the relation DAG, prune, and charge the budget until the
//! budget or the corpus runs out.

use std::sync::Arc;
use std::time::Instant;

use fixedbitset::FixedBitSet;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::{BudgetError, BudgetLedger, CallCharge, ChargeRecord, ErrorTally};
use crate::corpus::{
    sample_uniform_active, sample_uniform_by_category, Corpus, KnowledgeBaseView, ParaIdx,
    DEFAULT_CATEGORIES,
};
use crate::dag::{DagError, NewSource, RelationDag};
use crate::embedding::{EmbedError, Embedder, Embedding, EmbeddingCache, EmbeddingConfig};
use crate::index::AbstractIndex;
use crate::qa::{
    build_qa_set, QaConfig, QaItem, QaSource, QaStatus, QuestionGenerator, Transcript,
};
use crate::retrieval::{
    assemble_batch, hierarchical_retrieve, BatchEntry, DocumentSearch, Eligibility,
    RetrievalConfig, RetrievalError,
};
use crate::testee::{ask, AnswerRecord, Choice, Testee};
use crate::util::{derive_seed, step_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoPrune,
    RandomSelect,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoPrune => "no_prune",
            Self::RandomSelect => "random_select",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Self::Full),
            "no_prune" => Some(Self::NoPrune),
            "random_select" => Some(Self::RandomSelect),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialMode {
    CategoryUniform,
    FullyRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Admission threshold on per-paragraph error (strict `>`).
    pub xi: f64,
    /// Pruning threshold on cumulative error (strict `<`).
    pub gamma: f64,
    pub variant: Variant,
    pub seed: u64,
    pub initial_mode: InitialMode,
    /// Strata of the initial batch; those absent from the corpus are ignored.
    pub categories: Vec<String>,
    pub max_steps: Option<u64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            xi: 0.5,
            gamma: 0.5,
            variant: Variant::Full,
            seed: 0,
            initial_mode: InitialMode::CategoryUniform,
            categories: DEFAULT_CATEGORIES.iter().map(|c| c.to_string()).collect(),
            max_steps: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("xi", self.xi), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("engine.{name} {v} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Everything that shapes a run besides the adapters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Settings {
    pub engine: EngineConfig,
    pub retrieval: RetrievalConfig,
    pub qa: QaConfig,
    pub embedding: EmbeddingConfig,
    pub testee_retries: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{0}")]
    Sink(String),
}

/// Mutable state of a run; replaced wholesale at the end of each step.
#[derive(Debug, Clone)]
pub struct SearchState {
    /// Completed steps.
    pub t: u64,
    /// Evaluated paragraphs in evaluation order (the target subset S).
    pub evaluated: Vec<ParaIdx>,
    pub evaluated_set: FixedBitSet,
    pub view: KnowledgeBaseView,
    pub dag: RelationDag,
    pub ledger: BudgetLedger,
    /// Question-pooled tally over S.
    pub tally: ErrorTally,
    /// Sum and count of per-paragraph error rates over S.
    pub rate_sum: f64,
    pub rated: u64,
    pub unparsable: u64,
    pub generation_failed: u64,
}

impl SearchState {
    pub fn new(corpus: &Corpus, ledger: BudgetLedger) -> Self {
        Self {
            t: 0,
            evaluated: Vec::new(),
            evaluated_set: FixedBitSet::with_capacity(corpus.len()),
            view: KnowledgeBaseView::new(corpus),
            dag: RelationDag::new(),
            ledger,
            tally: ErrorTally::default(),
            rate_sum: 0.0,
            rated: 0,
            unparsable: 0,
            generation_failed: 0,
        }
    }

    pub fn cumulative_error(&self) -> Option<f64> {
        self.tally.rate()
    }

    pub fn cumulative_mean_of_means(&self) -> Option<f64> {
        (self.rated > 0).then(|| self.rate_sum / self.rated as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchOrigin {
    /// First step: category-uniform or fully random sample.
    Initial,
    /// Retrieved from active sources (possibly topped up with fallback).
    Retrieved,
    /// No active sources or no candidate documents: uniform fallback.
    Fallback,
    /// Random-selection ablation.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchItem {
    pub para_id: String,
    pub fallback: bool,
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParagraphResult {
    pub para_id: String,
    pub category: String,
    pub questions: u64,
    pub wrong: u64,
    pub unparsable: u64,
    pub error: Option<f64>,
    pub qa_status: QaStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    pub origin: BatchOrigin,
    pub batch: Vec<BatchItem>,
    pub fallback_count: usize,
    pub candidate_count: usize,
    pub candidate_documents: usize,
    pub paragraphs: Vec<ParagraphResult>,
    pub wrong: u64,
    pub questions: u64,
    /// Question-pooled error of this batch.
    pub t_e: Option<f64>,
    /// Question-pooled error over every batch so far.
    pub t_s: Option<f64>,
    pub t_e_mean_of_means: Option<f64>,
    pub t_s_mean_of_means: Option<f64>,
    pub cumulative_wrong: u64,
    pub cumulative_questions: u64,
    pub subset_size: usize,
    /// Paragraphs above the admission threshold (admitted unless the variant
    /// keeps no sources).
    pub high_error: usize,
    pub admitted: Vec<String>,
    pub pruned: Vec<String>,
    pub sources_total: usize,
    pub sources_active: usize,
    pub unparsable: u64,
    pub generation_failed: usize,
    pub cost_delta: f64,
    pub consumed: f64,
    pub calls_delta: u64,
    pub wall_time_ms: u64,
}

/// A step's record plus the artifacts it produced.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub record: StepRecord,
    pub qa_items: Vec<QaItem>,
    pub answers: Vec<AnswerRecord>,
    pub transcripts: Vec<Transcript>,
    pub charges: Vec<ChargeRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    BudgetExhausted,
    CorpusExhausted,
    MaxSteps,
    Stopped,
}

pub enum Control {
    Continue,
    Stop,
}

/// Receives each committed step, e.g. to persist it.
pub trait StepSink {
    fn on_step(&mut self, state: &SearchState, output: &StepOutput)
        -> Result<Control, EngineError>;
}

/// Collects outputs in memory.
#[derive(Default)]
pub struct MemorySink {
    pub outputs: Vec<StepOutput>,
}

impl StepSink for MemorySink {
    fn on_step(&mut self, _: &SearchState, output: &StepOutput) -> Result<Control, EngineError> {
        self.outputs.push(output.clone());
        Ok(Control::Continue)
    }
}

pub struct Adapters<'a> {
    pub corpus: &'a Corpus,
    pub documents: DocumentSearch<'a>,
    pub embedder: &'a dyn Embedder,
    pub generator: &'a dyn QuestionGenerator,
    pub testee: &'a dyn Testee,
}

impl<'a> Adapters<'a> {
    pub fn with_index(
        corpus: &'a Corpus,
        index: &'a AbstractIndex,
        n_probe: usize,
        embedder: &'a dyn Embedder,
        generator: &'a dyn QuestionGenerator,
        testee: &'a dyn Testee,
    ) -> Self {
        Self {
            corpus,
            documents: DocumentSearch::Index { index, n_probe },
            embedder,
            generator,
            testee,
        }
    }
}

pub struct Engine<'a> {
    adapters: Adapters<'a>,
    settings: Settings,
    cache: EmbeddingCache,
    categories: Vec<String>,
}

struct Evaluated {
    set: crate::qa::QaSet,
    answers: Vec<AnswerRecord>,
    charges: Vec<CallCharge>,
}

impl<'a> Engine<'a> {
    pub fn new(adapters: Adapters<'a>, settings: Settings) -> Self {
        let present: Vec<String> = adapters.corpus.categories().map(str::to_string).collect();
        let mut categories: Vec<String> = settings
            .engine
            .categories
            .iter()
            .filter(|c| present.contains(c))
            .cloned()
            .collect();
        if categories.is_empty() {
            if !settings.engine.categories.is_empty() {
                log::warn!("none of the configured categories occur in the corpus; using all corpus categories");
            }
            categories = present;
        }
        Self {
            adapters,
            settings,
            cache: EmbeddingCache::new(),
            categories,
        }
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    pub fn corpus(&self) -> &Corpus {
        self.adapters.corpus
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    pub fn initial_state(&self, ledger: BudgetLedger) -> SearchState {
        SearchState::new(self.adapters.corpus, ledger)
    }

    fn uniform(&self, eligible: &Eligibility<'_>, t: u64, purpose: &str, n: usize) -> Vec<ParaIdx> {
        let mut rng = step_rng(self.settings.engine.seed, t, purpose);
        let mut picked = sample_uniform_active(
            self.adapters.corpus,
            eligible.view,
            eligible.evaluated,
            n,
            &mut rng,
        );
        picked.sort_unstable();
        picked
    }

    fn entries(paras: Vec<ParaIdx>, fallback: bool) -> Vec<BatchEntry> {
        paras
            .into_iter()
            .map(|para| BatchEntry {
                para,
                fallback,
                provenance: Vec::new(),
            })
            .collect()
    }

    /// Choose the step's batch; also returns retrieval charges and sizes.
    fn select_batch(
        &self,
        state: &SearchState,
        t: u64,
    ) -> Result<(BatchOrigin, Vec<BatchEntry>, Vec<CallCharge>, usize, usize), EngineError> {
        let cfg = &self.settings;
        let n = cfg.retrieval.batch_size;
        let eligible = Eligibility {
            view: &state.view,
            evaluated: &state.evaluated_set,
        };
        if t == 1 {
            let mut batch = match cfg.engine.initial_mode {
                InitialMode::CategoryUniform => {
                    let seed = derive_seed(cfg.engine.seed, &["1", "initial"]);
                    let sample = sample_uniform_by_category(
                        self.adapters.corpus,
                        &state.view,
                        n,
                        &self.categories,
                        seed,
                    );
                    let mut paras = sample.paragraphs;
                    paras.retain(|p| eligible.allows(*p));
                    paras.sort_unstable();
                    Self::entries(paras, false)
                }
                InitialMode::FullyRandom => {
                    Self::entries(self.uniform(&eligible, t, "initial", n), false)
                }
            };
            if batch.len() < n {
                let mut exclude = state.evaluated_set.clone();
                for b in &batch {
                    exclude.insert(b.para.get());
                }
                let fill_eligible = Eligibility {
                    view: &state.view,
                    evaluated: &exclude,
                };
                batch.extend(Self::entries(
                    self.uniform(&fill_eligible, t, "fallback", n - batch.len()),
                    true,
                ));
            }
            return Ok((BatchOrigin::Initial, batch, Vec::new(), 0, 0));
        }
        if cfg.engine.variant == Variant::RandomSelect {
            return Ok((
                BatchOrigin::Uniform,
                Self::entries(self.uniform(&eligible, t, "uniform", n), false),
                Vec::new(),
                0,
                0,
            ));
        }
        let active = state.dag.active_sources();
        if active.is_empty() {
            return Ok((
                BatchOrigin::Fallback,
                Self::entries(self.uniform(&eligible, t, "fallback", n), true),
                Vec::new(),
                0,
                0,
            ));
        }
        let (vectors, mut charges) = self.cache.get_many(
            self.adapters.corpus,
            &active,
            self.adapters.embedder,
            &cfg.embedding,
        )?;
        let sources: Vec<(ParaIdx, Arc<Embedding>)> = active.into_iter().zip(vectors).collect();
        match hierarchical_retrieve(
            self.adapters.corpus,
            &eligible,
            &self.adapters.documents,
            &self.cache,
            self.adapters.embedder,
            &cfg.embedding,
            &sources,
            &cfg.retrieval,
        ) {
            Ok(found) => {
                charges.extend(found.charges);
                let mut rng = step_rng(cfg.engine.seed, t, "batch");
                let batch = assemble_batch(
                    self.adapters.corpus,
                    &eligible,
                    &found.candidates,
                    n,
                    &mut rng,
                );
                Ok((
                    BatchOrigin::Retrieved,
                    batch,
                    charges,
                    found.candidates.len(),
                    found.documents.len(),
                ))
            }
            Err(RetrievalError::NeighborhoodExhausted) => Ok((
                BatchOrigin::Fallback,
                Self::entries(self.uniform(&eligible, t, "fallback", n), true),
                charges,
                0,
                0,
            )),
            Err(RetrievalError::Embed(e)) => Err(e.into()),
        }
    }

    fn evaluate(&self, para: ParaIdx, embedding: Option<&Embedding>) -> Evaluated {
        let corpus = self.adapters.corpus;
        let p = corpus.paragraph(para);
        let title = corpus.title_line(para);
        let set = build_qa_set(
            QaSource {
                para_id: &p.para_id,
                title: &title,
                context: &p.text,
            },
            self.adapters.generator,
            &self.settings.qa,
            self.settings.engine.seed,
        );
        let mut charges = set.charges.clone();
        let mut answers = Vec::new();
        if set.status != QaStatus::Failed {
            let asked: Vec<(AnswerRecord, Vec<CallCharge>)> = set
                .items
                .par_iter()
                .map(|item| {
                    ask(
                        item,
                        &p.category,
                        self.adapters.testee,
                        self.settings.testee_retries,
                        embedding,
                    )
                })
                .collect();
            for (record, c) in asked {
                answers.push(record);
                charges.extend(c);
            }
        }
        Evaluated {
            set,
            answers,
            charges,
        }
    }

    /// Run one step. Returns `None`, leaving the state untouched, when no
    /// eligible paragraph remains.
    pub fn step(&self, state: &mut SearchState) -> Result<Option<StepOutput>, EngineError> {
        let started = Instant::now();
        let corpus = self.adapters.corpus;
        let cfg = &self.settings;
        let t = state.t + 1;
        let (origin, batch, mut charges, candidate_count, candidate_documents) =
            self.select_batch(state, t)?;
        if batch.is_empty() {
            return Ok(None);
        }
        for b in &batch {
            if !state.view.is_active(b.para) || state.evaluated_set.contains(b.para.get()) {
                return Err(EngineError::Invariant(format!(
                    "batch paragraph {} was already evaluated or removed",
                    corpus.paragraph(b.para).para_id
                )));
            }
        }
        let paras: Vec<ParaIdx> = batch.iter().map(|b| b.para).collect();
        let embeddings = if self.adapters.testee.needs_embedding() {
            let (v, c) =
                self.cache
                    .get_many(corpus, &paras, self.adapters.embedder, &cfg.embedding)?;
            charges.extend(c);
            Some(v)
        } else {
            None
        };
        let evaluated: Vec<Evaluated> = paras
            .par_iter()
            .enumerate()
            .map(|(i, p)| self.evaluate(*p, embeddings.as_ref().map(|v| v[i].as_ref())))
            .collect();

        let mut next = state.clone();
        let mut step_tally = ErrorTally::default();
        let mut step_rate_sum = 0.0;
        let mut step_rated = 0u64;
        let mut paragraphs = Vec::with_capacity(batch.len());
        let mut new_sources = Vec::new();
        let mut qa_items = Vec::new();
        let mut answers = Vec::new();
        let mut transcripts = Vec::new();
        let mut step_unparsable = 0;
        let mut generation_failed = 0;
        let mut high_error = 0;
        for (entry, ev) in batch.iter().zip(evaluated) {
            let p = corpus.paragraph(entry.para);
            let wrong = ev.answers.iter().filter(|a| !a.correct).count() as u64;
            let unparsable = ev
                .answers
                .iter()
                .filter(|a| a.parsed == Choice::Unparsable)
                .count() as u64;
            let tally = ErrorTally::new(wrong, ev.answers.len() as u64);
            let error = tally.rate();
            step_tally.add(tally);
            step_unparsable += unparsable;
            if let Some(e) = error {
                step_rate_sum += e;
                step_rated += 1;
                if e > cfg.engine.xi {
                    high_error += 1;
                    if cfg.engine.variant != Variant::RandomSelect {
                        new_sources.push(NewSource {
                            para: entry.para,
                            para_id: p.para_id.clone(),
                            error: e,
                            provenance: entry.provenance.clone(),
                        });
                    }
                }
            } else {
                generation_failed += 1;
                log::warn!("paragraph {} produced no answered questions", p.para_id);
            }
            paragraphs.push(ParagraphResult {
                para_id: p.para_id.clone(),
                category: p.category.clone(),
                questions: tally.total,
                wrong,
                unparsable,
                error,
                qa_status: ev.set.status,
            });
            charges.extend(ev.charges);
            qa_items.extend(ev.set.items);
            transcripts.extend(ev.set.transcripts);
            answers.extend(ev.answers);
        }

        next.dag.add_sources(&new_sources, t)?;
        let admitted: Vec<ParaIdx> = new_sources.iter().map(|s| s.para).collect();
        next.view.remove(&admitted);
        let pruned = if cfg.engine.variant == Variant::Full {
            next.dag.prune(cfg.engine.gamma)
        } else {
            Vec::new()
        };

        let consumed_before = next.ledger.consumed();
        let calls_before = next.ledger.calls();
        let charge_records = charges
            .iter()
            .map(|c| next.ledger.charge_record(t, c))
            .collect::<Result<Vec<_>, _>>()?;

        for p in &paras {
            next.evaluated_set.insert(p.get());
        }
        next.evaluated.extend(&paras);
        next.tally.add(step_tally);
        next.rate_sum += step_rate_sum;
        next.rated += step_rated;
        next.unparsable += step_unparsable;
        next.generation_failed += generation_failed as u64;
        next.t = t;

        let ids = |v: &[ParaIdx]| -> Vec<String> {
            v.iter()
                .map(|p| corpus.paragraph(*p).para_id.clone())
                .collect()
        };
        let record = StepRecord {
            t,
            origin,
            batch: batch
                .iter()
                .map(|b| BatchItem {
                    para_id: corpus.paragraph(b.para).para_id.clone(),
                    fallback: b.fallback,
                    provenance: ids(&b.provenance),
                })
                .collect(),
            fallback_count: batch.iter().filter(|b| b.fallback).count(),
            candidate_count,
            candidate_documents,
            paragraphs,
            wrong: step_tally.wrong,
            questions: step_tally.total,
            t_e: step_tally.rate(),
            t_s: next.tally.rate(),
            t_e_mean_of_means: (step_rated > 0).then(|| step_rate_sum / step_rated as f64),
            t_s_mean_of_means: next.cumulative_mean_of_means(),
            cumulative_wrong: next.tally.wrong,
            cumulative_questions: next.tally.total,
            subset_size: next.evaluated.len(),
            high_error,
            admitted: ids(&admitted),
            pruned: ids(&pruned),
            sources_total: next.dag.len(),
            sources_active: next.dag.active_count(),
            unparsable: step_unparsable,
            generation_failed,
            cost_delta: next.ledger.consumed() - consumed_before,
            consumed: next.ledger.consumed(),
            calls_delta: next.ledger.calls() - calls_before,
            wall_time_ms: started.elapsed().as_millis() as u64,
        };
        *state = next;
        Ok(Some(StepOutput {
            record,
            qa_items,
            answers,
            transcripts,
            charges: charge_records,
        }))
    }

    /// Step until the budget is spent, the corpus is exhausted, the step
    /// limit is reached, or the sink asks to stop.
    pub fn run(
        &self,
        state: &mut SearchState,
        sink: &mut dyn StepSink,
    ) -> Result<Termination, EngineError> {
        loop {
            if !state.ledger.has_budget() {
                return Ok(Termination::BudgetExhausted);
            }
            if self.settings.engine.max_steps.is_some_and(|m| state.t >= m) {
                return Ok(Termination::MaxSteps);
            }
            let Some(out) = self.step(state)? else {
                return Ok(Termination::CorpusExhausted);
            };
            if let Control::Stop = sink.on_step(state, &out)? {
                return Ok(Termination::Stopped);
            }
        }
    }
}
