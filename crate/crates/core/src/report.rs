//! `report.json` and the analysis export bundle, built from stored artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::budget::{
    errors_per_cost, reconcile, BudgetMode, ChargeRecord, CostCategory, ErrorsPerCost,
};
use crate::corpus::Corpus;
use crate::dag::DagExport;
use crate::embedding::{embed_texts, EmbedError, Embedder, EmbeddingConfig};
use crate::engine::{StepRecord, Termination};
use crate::store::{
    read_json, read_jsonl, write_json, Checkpoint, RunManifest, RunStatus, StoreError, CALLS, DAG,
    MANIFEST, REPORT, STATE, STEPS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub t: u64,
    pub t_e: Option<f64>,
    pub t_s: Option<f64>,
    pub t_e_mean_of_means: Option<f64>,
    pub t_s_mean_of_means: Option<f64>,
    pub admitted: usize,
    pub pruned: usize,
    pub sources_active: usize,
    pub sources_total: usize,
    pub fallback_count: usize,
    pub cost_delta: f64,
    pub consumed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub steps: u64,
    pub paragraphs: usize,
    pub questions: u64,
    pub wrong: u64,
    /// Question-pooled error over the subset.
    pub t_s: Option<f64>,
    pub t_s_mean_of_means: Option<f64>,
    pub unparsable: u64,
    pub generation_failed: u64,
    pub sources_total: usize,
    pub sources_active: usize,
    pub budget_mode: BudgetMode,
    pub limit: f64,
    pub consumed: f64,
    pub calls: u64,
    pub by_category: BTreeMap<CostCategory, f64>,
    /// Sum of counted per-call records in `calls.jsonl`.
    pub reconciled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub variant: String,
    pub model_tag: String,
    pub status: RunStatus,
    pub termination: Option<Termination>,
    pub series: Vec<SeriesPoint>,
    pub totals: Totals,
    pub errors_per_cost: ErrorsPerCost,
    /// The target subset in evaluation order.
    pub subset: Vec<String>,
}

pub fn build_report(dir: &Path) -> Result<Report, StoreError> {
    let manifest: RunManifest = read_json(&dir.join(MANIFEST))?;
    let steps: Vec<StepRecord> = read_jsonl(&dir.join(STEPS))?;
    let calls: Vec<ChargeRecord> = read_jsonl(&dir.join(CALLS))?;
    let state: Option<Checkpoint> = if dir.join(STATE).exists() {
        Some(read_json(&dir.join(STATE))?)
    } else {
        None
    };
    let series = steps
        .iter()
        .map(|s| SeriesPoint {
            t: s.t,
            t_e: s.t_e,
            t_s: s.t_s,
            t_e_mean_of_means: s.t_e_mean_of_means,
            t_s_mean_of_means: s.t_s_mean_of_means,
            admitted: s.admitted.len(),
            pruned: s.pruned.len(),
            sources_active: s.sources_active,
            sources_total: s.sources_total,
            fallback_count: s.fallback_count,
            cost_delta: s.cost_delta,
            consumed: s.consumed,
        })
        .collect();
    let last = steps.last();
    let sources_total = last.map_or(0, |s| s.sources_total);
    let (ledger, subset, unparsable, generation_failed) = match &state {
        Some(c) => (
            Some(&c.ledger),
            c.evaluated.clone(),
            c.unparsable,
            c.generation_failed,
        ),
        None => (None, Vec::new(), 0, 0),
    };
    let consumed = ledger.map_or(0.0, |l| l.consumed);
    let totals = Totals {
        steps: last.map_or(0, |s| s.t),
        paragraphs: subset.len(),
        questions: last.map_or(0, |s| s.cumulative_questions),
        wrong: last.map_or(0, |s| s.cumulative_wrong),
        t_s: last.and_then(|s| s.t_s),
        t_s_mean_of_means: last.and_then(|s| s.t_s_mean_of_means),
        unparsable,
        generation_failed,
        sources_total,
        sources_active: last.map_or(0, |s| s.sources_active),
        budget_mode: manifest.config.budget.mode,
        limit: manifest.config.budget.limit,
        consumed,
        calls: ledger.map_or(0, |l| l.calls),
        by_category: ledger.map(|l| l.by_category.clone()).unwrap_or_default(),
        reconciled: reconcile(&calls),
    };
    Ok(Report {
        run_id: manifest.run_id.clone(),
        variant: manifest.config.engine.variant.as_str().to_string(),
        model_tag: manifest.adapters.testee_model.clone(),
        status: manifest.status,
        termination: manifest.termination,
        series,
        errors_per_cost: errors_per_cost(sources_total, consumed),
        totals,
        subset,
    })
}

/// Build and write `report.json`.
pub fn write_report(dir: &Path) -> Result<Report, StoreError> {
    let report = build_report(dir)?;
    write_json(&dir.join(REPORT), &report)?;
    Ok(report)
}

/// One row of `sources.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRow {
    pub para_id: String,
    pub model_tag: String,
    pub category: String,
    pub step: u64,
    pub para_error: f64,
    pub active: bool,
    pub embedding: Vec<f32>,
}

pub const SOURCES: &str = "sources.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("embedding dimension {got} differs from the run's dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("DAG node {0} is not in the corpus")]
    UnknownParagraph(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub dir: PathBuf,
    pub rows: usize,
    /// The run had not finished; the bundle covers the committed steps.
    pub partial: bool,
}

/// Write `sources.jsonl` (one row per DAG node, embedded with `embedder`)
/// plus copies of `steps.jsonl`, `dag.json` and `report.json` into `out`.
pub fn export_bundle(
    run_dir: &Path,
    out: &Path,
    corpus: &Corpus,
    embedder: &dyn Embedder,
    embed_cfg: &EmbeddingConfig,
) -> Result<ExportSummary, ExportError> {
    let manifest: RunManifest = read_json(&run_dir.join(MANIFEST))?;
    if embedder.dimension() != manifest.embedding_dimension {
        return Err(ExportError::Dimension {
            expected: manifest.embedding_dimension,
            got: embedder.dimension(),
        });
    }
    let partial = manifest.status == RunStatus::Running || manifest.status == RunStatus::Failed;
    if partial {
        log::warn!(
            "run {} is {:?}; exporting committed steps only",
            manifest.run_id,
            manifest.status
        );
    }
    let dag: DagExport = if run_dir.join(DAG).exists() {
        read_json(&run_dir.join(DAG))?
    } else {
        DagExport {
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    };
    let mut texts = Vec::with_capacity(dag.nodes.len());
    let mut categories = Vec::with_capacity(dag.nodes.len());
    for n in &dag.nodes {
        let idx = corpus
            .para_idx(&n.id)
            .ok_or_else(|| ExportError::UnknownParagraph(n.id.clone()))?;
        let p = corpus.paragraph(idx);
        texts.push(p.text.as_str());
        categories.push(p.category.clone());
    }
    let (vectors, _) = if texts.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        embed_texts(embedder, &texts, embed_cfg)?
    };
    if let Some(v) = vectors
        .iter()
        .find(|v| v.dim() != manifest.embedding_dimension)
    {
        return Err(ExportError::Dimension {
            expected: manifest.embedding_dimension,
            got: v.dim(),
        });
    }
    fs::create_dir_all(out).map_err(|source| StoreError::Io {
        path: out.display().to_string(),
        source,
    })?;
    let mut buf = Vec::new();
    for ((n, v), category) in dag.nodes.iter().zip(&vectors).zip(categories) {
        let row = SourceRow {
            para_id: n.id.clone(),
            model_tag: manifest.adapters.testee_model.clone(),
            category,
            step: n.step,
            para_error: n.error,
            active: n.active,
            embedding: v.values().to_vec(),
        };
        serde_json::to_writer(&mut buf, &row).expect("rows serialize");
        buf.push(b'\n');
    }
    crate::store::write_atomic(&out.join(SOURCES), &buf)?;
    let report = build_report(run_dir)?;
    write_json(&out.join(REPORT), &report)?;
    write_json(&out.join(DAG), &dag)?;
    let steps = fs::read(run_dir.join(STEPS)).map_err(|source| StoreError::Io {
        path: run_dir.join(STEPS).display().to_string(),
        source,
    })?;
    crate::store::write_atomic(&out.join(STEPS), &steps)?;
    Ok(ExportSummary {
        dir: out.to_path_buf(),
        rows: dag.nodes.len(),
        partial,
    })
}
