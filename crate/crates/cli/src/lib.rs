//! Command implementations behind the `sea` binary.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use sea_core::config::{locate, parse_toml, ConfigError, RunConfig, RunSection};
use sea_core::corpus::{ingest_corpus, Corpus, IngestStats};
use sea_core::crossval::{cell, CorrelationMode, CrossValReport, PairedAnswer};
use sea_core::embedding::{embed_texts, Embedder, EmbeddingCache, EmbeddingConfig, EmbeddingKind, HashEmbedder};
use sea_core::engine::{Adapters, Engine, Termination, Variant};
use sea_core::index::{build_abstract_index, AbstractIndex, IndexConfig};
use sea_core::qa::{GeneratorKind, QaConfig, QaItem, QuestionGenerator, TemplateGenerator};
use sea_core::report::{export_bundle, write_report, ExportSummary, Report};
use sea_core::retrieval::RetrievalConfig;
use sea_core::store::{
    read_json, read_jsonl, write_json, AdapterFingerprints, Checkpoint, RunManifest, RunStatus, RunStore, Stepped, ANSWERS,
    MANIFEST, QA,
};
use sea_core::synthetic::{generate, plant_region, PlantSpec, SyntheticSpec};
use sea_core::testee::{ask, AnswerRecord, LandscapeSpec, RegionSpec, SimulatedTestee, Testee, TesteeConfig, TesteeKind};
use sea_core::budget::BudgetMode;
use sea_remote::{ChatGenerator, ChatTestee, Endpoint, RemoteEmbedder, EMBED_KEY, GEN_KEY, TESTEE_KEY};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0:#}")]
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Runtime(_) => 1,
        }
    }

    fn runtime(msg: impl std::fmt::Display) -> Self {
        Self::Runtime(anyhow::anyhow!("{msg}"))
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.to_string())
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Runtime(e.into())
            }
        })*
    };
}

runtime_from!(
    sea_core::store::StoreError,
    sea_core::corpus::CorpusError,
    sea_core::index::IndexError,
    sea_core::engine::EngineError,
    sea_core::embedding::EmbedError,
    sea_core::report::ExportError,
    std::io::Error
);

/// The three providers a run talks to.
pub struct Providers {
    pub embedder: Box<dyn Embedder>,
    pub generator: Box<dyn QuestionGenerator>,
    pub testee: Box<dyn Testee>,
}

impl Providers {
    pub fn fingerprints(&self) -> AdapterFingerprints {
        AdapterFingerprints {
            embedder: self.embedder.fingerprint(),
            generator: self.generator.fingerprint(),
            testee: self.testee.fingerprint(),
            testee_model: self.testee.model_tag().to_string(),
        }
    }
}

fn endpoint(base_url: &Option<String>, key: &str, timeout_secs: u64, max_in_flight: usize, rate: Option<f64>) -> Result<Endpoint, CliError> {
    let url = base_url.as_deref().ok_or_else(|| CliError::Config("remote provider needs base_url".into()))?;
    Endpoint::new(url, key, Duration::from_secs(timeout_secs), max_in_flight, rate).map_err(CliError::runtime)
}

pub fn make_embedder(cfg: &EmbeddingConfig) -> Result<Box<dyn Embedder>, CliError> {
    Ok(match cfg.kind {
        EmbeddingKind::DeterministicTest => Box::new(HashEmbedder::new(cfg.dimension)),
        EmbeddingKind::Remote => {
            let ep = endpoint(&cfg.base_url, EMBED_KEY, cfg.timeout_secs, cfg.max_in_flight, None)?;
            Box::new(RemoteEmbedder::new(ep, cfg.model.as_deref().unwrap_or_default(), cfg.dimension))
        }
    })
}

pub fn make_generator(cfg: &QaConfig) -> Result<Box<dyn QuestionGenerator>, CliError> {
    Ok(match cfg.generator {
        GeneratorKind::Template => Box::new(TemplateGenerator),
        GeneratorKind::Remote => {
            let ep = endpoint(&cfg.base_url, GEN_KEY, cfg.timeout_secs, cfg.max_in_flight, None)?;
            Box::new(ChatGenerator::new(ep, cfg.model.as_deref().unwrap_or_default()))
        }
    })
}

/// A simulated testee resolves its region centers against the corpus.
pub fn make_testee(
    cfg: &TesteeConfig,
    corpus: &Corpus,
    embedder: &dyn Embedder,
    embed_cfg: &EmbeddingConfig,
) -> Result<Box<dyn Testee>, CliError> {
    Ok(match cfg.kind {
        TesteeKind::Simulated => {
            let spec = cfg
                .landscape
                .as_ref()
                .ok_or_else(|| CliError::Config("simulated testee needs a landscape".into()))?;
            let landscape = spec
                .resolve(corpus, embedder, embed_cfg)
                .map_err(|e| CliError::Config(format!("testee.landscape: {e}")))?;
            Box::new(SimulatedTestee::new(landscape, &spec.model_tag))
        }
        TesteeKind::Remote => {
            let ep = endpoint(&cfg.base_url, TESTEE_KEY, cfg.timeout_secs, cfg.max_in_flight, cfg.rate_limit)?;
            Box::new(ChatTestee::new(ep, cfg.model.as_deref().unwrap_or_default(), cfg.temperature, cfg.top_p))
        }
    })
}

pub fn providers(cfg: &RunConfig, corpus: &Corpus) -> Result<Providers, CliError> {
    let embedder = make_embedder(&cfg.embedding)?;
    let generator = make_generator(&cfg.qa)?;
    let testee = make_testee(&cfg.testee, corpus, embedder.as_ref(), &cfg.embedding)?;
    Ok(Providers {
        embedder,
        generator,
        testee,
    })
}

/// Load a run config; paths inside resolve against its absolute location.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let abs = std::path::absolute(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(RunConfig::load(&abs)?)
}

/// A run directory given either as a path or as an id under `runs_dir`.
pub fn resolve_run(run: &str, runs_dir: &Path) -> PathBuf {
    let direct = PathBuf::from(run);
    if direct.join(MANIFEST).exists() {
        direct
    } else {
        runs_dir.join(run)
    }
}

pub fn ingest(input: &Path, min_para_len: usize, out: &Path) -> Result<(PathBuf, IngestStats), CliError> {
    let (corpus, stats) = ingest_corpus(input, min_para_len)?;
    let path = if out.extension().is_some_and(|e| e == "jsonl") {
        out.to_path_buf()
    } else {
        out.join("corpus.jsonl")
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    corpus.save(&path)?;
    Ok((path, stats))
}

/// Build the abstract index at `run.index`; returns its fingerprint.
pub fn build_index(cfg: &RunConfig) -> Result<String, CliError> {
    let corpus = Corpus::load(&cfg.run.corpus)?;
    let embedder = make_embedder(&cfg.embedding)?;
    std::fs::create_dir_all(&cfg.run.index)?;
    let (index, charges) = build_abstract_index(&corpus, embedder.as_ref(), &cfg.embedding, &cfg.index, Some(&cfg.run.index))?;
    log::info!("indexed {} abstracts with {} embedding calls", index.len(), charges.len());
    Ok(index.save(&cfg.run.index)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub status: RunStatus,
    pub termination: Option<Termination>,
    pub steps: u64,
}

fn load_inputs(cfg: &RunConfig) -> Result<(Corpus, AbstractIndex, String, Providers), CliError> {
    let corpus = Corpus::load(&cfg.run.corpus)?;
    let (index, index_sha) = AbstractIndex::load(&cfg.run.index)?;
    let p = providers(cfg, &corpus)?;
    if index.dim() != p.embedder.dimension() {
        return Err(CliError::Config(format!(
            "index {} has dimension {}, embedding.dimension is {}",
            cfg.run.index.display(),
            index.dim(),
            p.embedder.dimension()
        )));
    }
    Ok((corpus, index, index_sha, p))
}

/// Run the engine on an open store until it terminates, then record the
/// outcome in the manifest and write `report.json`.
fn drive(
    store: &RunStore,
    cfg: &RunConfig,
    inputs: &(Corpus, AbstractIndex, String, Providers),
    checkpoint: Option<Checkpoint>,
    stop_after: Option<u64>,
) -> Result<RunOutcome, CliError> {
    let (corpus, index, _, p) = inputs;
    let engine = Engine::new(
        Adapters::with_index(
            corpus,
            index,
            cfg.retrieval.n_probe,
            p.embedder.as_ref(),
            p.generator.as_ref(),
            p.testee.as_ref(),
        ),
        cfg.settings(),
    );
    let ledger = cfg.ledger()?;
    let mut state = match checkpoint {
        Some(c) => c.restore(corpus, ledger)?,
        None => engine.initial_state(ledger),
    };
    let mut sink = store.sink(corpus)?;
    sink.stop_after = stop_after;
    let result = engine.run(&mut state, &mut sink);
    drop(sink);
    match result {
        Ok(termination) => {
            let status = RunStatus::after(termination);
            store.update_manifest(|m| {
                m.status = status;
                m.termination = Some(termination);
                m.error = None;
            })?;
            write_report(store.dir())?;
            Ok(RunOutcome {
                dir: store.dir().to_path_buf(),
                status,
                termination: Some(termination),
                steps: state.t,
            })
        }
        Err(e) => {
            let message = e.to_string();
            store.update_manifest(|m| {
                m.status = RunStatus::Failed;
                m.error = Some(message.clone());
            })?;
            if let Err(r) = write_report(store.dir()) {
                log::warn!("could not write report: {r}");
            }
            Err(CliError::runtime(format!("run {} failed at step {}: {message}", store.dir().display(), state.t + 1)))
        }
    }
}

/// Start a new run; `stop_after` halts it cleanly once that many steps are
/// committed.
pub fn run(cfg: &RunConfig, stop_after: Option<u64>) -> Result<RunOutcome, CliError> {
    let inputs = load_inputs(cfg)?;
    let (corpus, _, index_sha, p) = &inputs;
    let run_id = cfg.run.id.clone().unwrap_or_else(|| cfg.default_run_id());
    let manifest = RunManifest::new(
        &run_id,
        cfg.clone(),
        corpus.fingerprint(),
        index_sha.clone(),
        p.fingerprints(),
        p.embedder.dimension(),
    );
    let store = RunStore::create(&cfg.run.runs_dir, &manifest)?;
    drive(&store, cfg, &inputs, None, stop_after)
}

/// Continue a run from its last committed step.
pub fn resume(dir: &Path, stop_after: Option<u64>) -> Result<RunOutcome, CliError> {
    let (store, manifest, checkpoint) = RunStore::open(dir)?;
    if matches!(manifest.status, RunStatus::Done | RunStatus::Exhausted) {
        log::info!("run {} is already {:?}", manifest.run_id, manifest.status);
        return Ok(RunOutcome {
            dir: dir.to_path_buf(),
            status: manifest.status,
            termination: manifest.termination,
            steps: checkpoint.map_or(0, |c| c.t),
        });
    }
    let cfg = manifest.config.clone();
    let inputs = load_inputs(&cfg)?;
    let (corpus, _, index_sha, p) = &inputs;
    let checks = [
        ("corpus", corpus.fingerprint(), manifest.corpus_fingerprint.clone()),
        ("index", index_sha.clone(), manifest.index_fingerprint.clone()),
        ("embedder", p.embedder.fingerprint(), manifest.adapters.embedder.clone()),
        ("generator", p.generator.fingerprint(), manifest.adapters.generator.clone()),
        ("testee", p.testee.fingerprint(), manifest.adapters.testee.clone()),
    ];
    for (what, now, then) in checks {
        if now != then {
            return Err(CliError::runtime(format!(
                "{what} changed since the run started ({then} -> {now}); refusing to resume"
            )));
        }
    }
    store.update_manifest(|m| {
        m.status = RunStatus::Running;
        m.error = None;
    })?;
    drive(&store, &cfg, &inputs, checkpoint, stop_after)
}

/// One run per variant and seed; seeds count up from `engine.seed`.
pub fn ablate(cfg: &RunConfig, variants: &[Variant], seeds: u64) -> Result<Vec<RunOutcome>, CliError> {
    let mut outcomes = Vec::new();
    for &variant in variants {
        for i in 0..seeds {
            let mut c = cfg.clone();
            c.engine.variant = variant;
            c.engine.seed = cfg.engine.seed + i;
            c.run.id = Some(match &cfg.run.id {
                Some(prefix) => format!("{prefix}-{}", c.default_run_id()),
                None => c.default_run_id(),
            });
            let outcome = run(&c, None)?;
            log::info!("{}: {:?} after {} steps", outcome.dir.display(), outcome.status, outcome.steps);
            outcomes.push(outcome);
        }
    }
    Ok(outcomes)
}

pub fn report(dir: &Path) -> Result<Report, CliError> {
    Ok(write_report(dir)?)
}

pub fn export(dir: &Path, out: &Path) -> Result<ExportSummary, CliError> {
    let manifest: RunManifest = read_json(&dir.join(MANIFEST))?;
    let cfg = &manifest.config;
    let corpus = Corpus::load(&cfg.run.corpus)?;
    if corpus.fingerprint() != manifest.corpus_fingerprint {
        return Err(CliError::runtime(format!("corpus {} changed since the run", cfg.run.corpus.display())));
    }
    let embedder = make_embedder(&cfg.embedding)?;
    Ok(export_bundle(dir, out, &corpus, embedder.as_ref(), &cfg.embedding)?)
}

/// Answer every question of each provider run's subset with each testee.
pub fn crossval(provider_runs: &[PathBuf], testee_configs: &[PathBuf], statistic: CorrelationMode) -> Result<CrossValReport, CliError> {
    let testee_cfgs = testee_configs.iter().map(|p| load_config(p)).collect::<Result<Vec<_>, _>>()?;
    let mut cells = Vec::new();
    let mut labels = BTreeSet::new();
    for dir in provider_runs {
        let manifest: RunManifest = read_json(&dir.join(MANIFEST))?;
        if manifest.status == RunStatus::Running || manifest.status == RunStatus::Failed {
            return Err(CliError::runtime(format!("provider run {} is {:?}", dir.display(), manifest.status)));
        }
        let corpus = Corpus::load(&manifest.config.run.corpus)?;
        let items: Vec<Stepped<QaItem>> = read_jsonl(&dir.join(QA))?;
        let answers: Vec<Stepped<AnswerRecord>> = read_jsonl(&dir.join(ANSWERS))?;
        let provider_correct: BTreeMap<&str, bool> = answers.iter().map(|a| (a.item.qa_id.as_str(), a.item.correct)).collect();
        let items: Vec<&QaItem> = items
            .iter()
            .map(|s| &s.item)
            .filter(|i| provider_correct.contains_key(i.qa_id.as_str()))
            .collect();
        let mut label = manifest.adapters.testee_model.clone();
        if !labels.insert(label.clone()) {
            label = format!("{label}@{}", manifest.run_id);
        }
        for tcfg in &testee_cfgs {
            let embedder = make_embedder(&tcfg.embedding)?;
            let testee = make_testee(&tcfg.testee, &corpus, embedder.as_ref(), &tcfg.embedding)?;
            let embeddings = if testee.needs_embedding() {
                let mut paras: Vec<_> = items.iter().filter_map(|i| corpus.para_idx(&i.para_id)).collect();
                paras.sort();
                paras.dedup();
                let (vectors, _) = EmbeddingCache::new().get_many(&corpus, &paras, embedder.as_ref(), &tcfg.embedding)?;
                paras.into_iter().zip(vectors).collect::<BTreeMap<_, _>>()
            } else {
                BTreeMap::new()
            };
            let paired: Vec<PairedAnswer> = items
                .par_iter()
                .map(|item| {
                    let para = corpus.para_idx(&item.para_id).ok_or_else(|| {
                        CliError::runtime(format!("paragraph {} of {} is not in the corpus", item.para_id, dir.display()))
                    })?;
                    let topic = &corpus.paragraph(para).category;
                    let (record, _) = ask(item, topic, testee.as_ref(), tcfg.testee.max_retries, embeddings.get(&para).map(|e| e.as_ref()));
                    Ok(PairedAnswer {
                        para_id: item.para_id.clone(),
                        provider_correct: provider_correct[item.qa_id.as_str()],
                        testee_correct: record.correct,
                    })
                })
                .collect::<Result<_, CliError>>()?;
            cells.push(cell(&label, testee.model_tag(), &paired, statistic));
        }
    }
    Ok(CrossValReport::from_cells(statistic, cells))
}

pub fn write_crossval(report: &CrossValReport, out: &Path) -> Result<(), CliError> {
    Ok(write_json(out, report)?)
}

/// `sea simulate` input: a synthetic corpus, the region planted in it and
/// the run settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Simulation {
    pub corpus: SyntheticSpec,
    pub plant: PlantSpec,
    pub run: RunSection,
    pub engine: sea_core::engine::EngineConfig,
    pub retrieval: RetrievalConfig,
    pub qa: QaConfig,
    pub embedding: EmbeddingConfig,
    pub budget: sea_core::config::BudgetConfig,
    pub index: IndexConfig,
}

impl Simulation {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let sim: Self = parse_toml(text, origin)?;
        let cfg = sim.run_config(LandscapeSpec {
            regions: Vec::new(),
            base_error_prob: sim.plant.base_error_prob,
            seed: sim.plant.seed,
            model_tag: "simulated".into(),
        });
        let check = cfg.validate().err().or_else(|| {
            let p = &sim.plant;
            if !(p.coverage > 0.0 && p.coverage < 1.0) {
                Some(("plant", "coverage", format!("plant.coverage {} outside (0, 1)", p.coverage)))
            } else if !(0.0..=1.0).contains(&p.error_prob) {
                Some(("plant", "error_prob", format!("plant.error_prob {} outside [0, 1]", p.error_prob)))
            } else if sim.corpus.clusters == 0 || sim.corpus.docs_per_cluster == 0 || sim.corpus.paras_per_doc == 0 {
                Some(("corpus", "clusters", "corpus needs at least one cluster, document and paragraph".into()))
            } else {
                None
            }
        });
        match check {
            Some((section, key, message)) => Err(ConfigError {
                path: origin.to_string(),
                line: locate(text, section, key),
                column: None,
                message,
            }),
            None => Ok(sim),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: origin.clone(),
            line: None,
            column: None,
            message: e.to_string(),
        })?;
        Self::parse(&text, &origin)
    }

    fn run_config(&self, landscape: LandscapeSpec) -> RunConfig {
        RunConfig {
            run: RunSection {
                id: self.run.id.clone(),
                ..RunSection::default()
            },
            engine: self.engine.clone(),
            retrieval: self.retrieval.clone(),
            qa: self.qa.clone(),
            testee: TesteeConfig {
                kind: TesteeKind::Simulated,
                landscape: Some(landscape),
                ..TesteeConfig::default()
            },
            embedding: self.embedding.clone(),
            budget: self.budget.clone(),
            index: self.index.clone(),
        }
    }
}

/// Materialize the synthetic corpus, its index and `run.toml` under `out`,
/// then run it. The written config reproduces the run with `sea run`.
pub fn simulate(sim: &Simulation, out: &Path, stop_after: Option<u64>) -> Result<RunOutcome, CliError> {
    if sim.budget.mode == BudgetMode::TokenDollars {
        return Err(CliError::Config("simulate supports budget.mode api-calls only".into()));
    }
    let planted = generate(&sim.corpus);
    let embedder = make_embedder(&sim.embedding)?;
    let texts: Vec<&str> = planted.corpus.paragraphs().iter().map(|p| p.text.as_str()).collect();
    let (vectors, _) = embed_texts(embedder.as_ref(), &texts, &sim.embedding)?;
    let landscape = plant_region(&planted, &sim.corpus, &sim.plant, &vectors, embedder.as_ref(), &sim.embedding)?;
    let inside = vectors.iter().filter(|v| landscape.regions[0].contains(v)).count();
    log::info!(
        "planted region radius {:.4} holds {inside} of {} paragraphs",
        landscape.regions[0].radius,
        vectors.len()
    );
    let spec = LandscapeSpec {
        regions: landscape
            .regions
            .iter()
            .map(|r| RegionSpec {
                center: Some(r.center.values().to_vec()),
                center_text: None,
                center_para: None,
                radius: r.radius,
                error_prob: r.error_prob,
            })
            .collect(),
        base_error_prob: landscape.base_error_prob,
        seed: landscape.seed,
        model_tag: "simulated".into(),
    };
    std::fs::create_dir_all(out)?;
    let out = std::path::absolute(out)?;
    let mut cfg = sim.run_config(spec);
    planted.corpus.save(&out.join("corpus.jsonl"))?;
    cfg.run.corpus = PathBuf::from("corpus.jsonl");
    cfg.run.index = PathBuf::from("index");
    cfg.run.runs_dir = PathBuf::from("runs");
    std::fs::write(out.join("run.toml"), cfg.to_toml())?;
    cfg.resolve_paths(&out);
    build_index(&cfg)?;
    run(&cfg, stop_after)
}
