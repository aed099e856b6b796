//! Run store: one directory per run holding the manifest, config snapshot,
//! line-delimited artifacts and the resume checkpoint.
//!
//! ```text
//! runs/<run_id>/
//!   manifest.json    config.toml    state.json    dag.json    report.json
//!   steps.jsonl  answers.jsonl  calls.jsonl  qa.jsonl  transcripts.jsonl
//!   lock
//! ```
//!
//! A step is committed when `state.json` records the artifact lengths after
//! its lines. Resume truncates every artifact except the transcript log back
//! to those lengths, discarding a partially written step.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use fixedbitset::FixedBitSet;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::budget::{BudgetLedger, ErrorTally, LedgerState};
use crate::config::RunConfig;
use crate::corpus::{Corpus, KnowledgeBaseView, ParaIdx};
use crate::dag::{DagError, DagExport, RelationDag};
use crate::engine::{Control, EngineError, SearchState, StepOutput, StepSink, Termination};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";
pub const STATE: &str = "state.json";
pub const DAG: &str = "dag.json";
pub const REPORT: &str = "report.json";
pub const STEPS: &str = "steps.jsonl";
pub const ANSWERS: &str = "answers.jsonl";
pub const CALLS: &str = "calls.jsonl";
pub const QA: &str = "qa.jsonl";
pub const TRANSCRIPTS: &str = "transcripts.jsonl";
pub const LOCK: &str = "lock";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("run directory {0} already exists")]
    Exists(String),
    #[error("run {dir} is locked by process {pid}")]
    Locked { dir: String, pid: u32 },
    #[error("checkpoint does not match the corpus: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Dag(#[from] DagError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write via a temporary file and rename, so readers never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_data().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact types serialize");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Every non-empty line of a JSONL file.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                path: format!("{}:{}", path.display(), n + 1),
                reason: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Running,
    Done,
    Exhausted,
    Failed,
}

impl RunStatus {
    pub fn after(termination: Termination) -> Self {
        match termination {
            Termination::BudgetExhausted => Self::Exhausted,
            Termination::CorpusExhausted | Termination::MaxSteps => Self::Done,
            Termination::Stopped => Self::Running,
        }
    }
}

/// Provider identities recorded at run start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterFingerprints {
    pub embedder: String,
    pub generator: String,
    pub testee: String,
    pub testee_model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub run_id: String,
    pub config: RunConfig,
    pub corpus_fingerprint: String,
    pub index_fingerprint: String,
    pub adapters: AdapterFingerprints,
    pub embedding_dimension: usize,
    pub status: RunStatus,
    #[serde(default)]
    pub termination: Option<Termination>,
    #[serde(default)]
    pub error: Option<String>,
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(
        run_id: &str,
        config: RunConfig,
        corpus_fingerprint: String,
        index_fingerprint: String,
        adapters: AdapterFingerprints,
        embedding_dimension: usize,
    ) -> Self {
        let artifacts = [
            ("config", CONFIG),
            ("state", STATE),
            ("dag", DAG),
            ("report", REPORT),
            ("steps", STEPS),
            ("answers", ANSWERS),
            ("calls", CALLS),
            ("qa", QA),
            ("transcripts", TRANSCRIPTS),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Self {
            format_version: FORMAT_VERSION,
            run_id: run_id.to_string(),
            config,
            corpus_fingerprint,
            index_fingerprint,
            adapters,
            embedding_dimension,
            status: RunStatus::Running,
            termination: None,
            error: None,
            artifacts,
        }
    }
}

/// Committed byte lengths of the truncatable artifacts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Offsets {
    pub steps: u64,
    pub answers: u64,
    pub calls: u64,
    pub qa: u64,
}

/// `state.json`: everything needed to continue after the last committed step.
/// Sampling streams are derived from the master seed and the step index, so
/// no generator state is stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub t: u64,
    /// The target subset in evaluation order.
    pub evaluated: Vec<String>,
    pub removed: Vec<String>,
    pub dag: DagExport,
    pub ledger: LedgerState,
    pub tally: ErrorTally,
    pub rate_sum: f64,
    pub rated: u64,
    pub unparsable: u64,
    pub generation_failed: u64,
    pub offsets: Offsets,
}

impl Checkpoint {
    pub fn capture(state: &SearchState, corpus: &Corpus, offsets: Offsets) -> Self {
        let id = |p: ParaIdx| corpus.paragraph(p).para_id.clone();
        Self {
            format_version: FORMAT_VERSION,
            t: state.t,
            evaluated: state.evaluated.iter().map(|p| id(*p)).collect(),
            removed: state.view.removed().map(id).collect(),
            dag: state.dag.export(),
            ledger: state.ledger.state(),
            tally: state.tally,
            rate_sum: state.rate_sum,
            rated: state.rated,
            unparsable: state.unparsable,
            generation_failed: state.generation_failed,
            offsets,
        }
    }

    /// Rebuild the search state on top of a freshly configured ledger.
    pub fn restore(
        &self,
        corpus: &Corpus,
        mut ledger: BudgetLedger,
    ) -> Result<SearchState, StoreError> {
        let idx = |id: &String| {
            corpus
                .para_idx(id)
                .ok_or_else(|| StoreError::Mismatch(format!("unknown paragraph {id}")))
        };
        let evaluated = self
            .evaluated
            .iter()
            .map(idx)
            .collect::<Result<Vec<_>, _>>()?;
        let mut evaluated_set = FixedBitSet::with_capacity(corpus.len());
        for p in &evaluated {
            if evaluated_set.put(p.get()) {
                return Err(StoreError::Mismatch(format!(
                    "paragraph {} evaluated twice",
                    corpus.paragraph(*p).para_id
                )));
            }
        }
        let removed = self
            .removed
            .iter()
            .map(idx)
            .collect::<Result<Vec<_>, _>>()?;
        let mut view = KnowledgeBaseView::new(corpus);
        view.remove(&removed);
        ledger.restore(&self.ledger);
        Ok(SearchState {
            t: self.t,
            evaluated,
            evaluated_set,
            view,
            dag: RelationDag::from_export(&self.dag, corpus)?,
            ledger,
            tally: self.tally,
            rate_sum: self.rate_sum,
            rated: self.rated,
            unparsable: self.unparsable,
            generation_failed: self.generation_failed,
        })
    }
}

/// Exclusive writer lock holding the owner's pid; released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

fn process_alive(pid: u32) -> bool {
    if pid == std::process::id() {
        return true;
    }
    let proc_root = Path::new("/proc");
    if proc_root.is_dir() {
        proc_root.join(pid.to_string()).exists()
    } else {
        // Without a process table, treat any recorded owner as alive.
        true
    }
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, StoreError> {
        let path = dir.join(LOCK);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id()).map_err(io_err(&path))?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    let owner = fs::read_to_string(&path).unwrap_or_default();
                    match owner.trim().parse::<u32>() {
                        Ok(pid) if process_alive(pid) => {
                            return Err(StoreError::Locked {
                                dir: dir.display().to_string(),
                                pid,
                            })
                        }
                        _ => {
                            log::warn!("removing stale lock {} ({})", path.display(), owner.trim());
                            fs::remove_file(&path).map_err(io_err(&path))?;
                        }
                    }
                }
                Err(e) => return Err(io_err(&path)(e)),
            }
        }
        Err(StoreError::Locked {
            dir: dir.display().to_string(),
            pid: 0,
        })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// An open, locked run directory.
#[derive(Debug)]
pub struct RunStore {
    dir: PathBuf,
    _lock: RunLock,
}

const TRUNCATED: [&str; 4] = [STEPS, ANSWERS, CALLS, QA];

impl RunStore {
    /// Create `runs_dir/<run_id>` and write the manifest and config snapshot
    /// before any step runs.
    pub fn create(runs_dir: &Path, manifest: &RunManifest) -> Result<Self, StoreError> {
        let dir = runs_dir.join(&manifest.run_id);
        if dir.join(MANIFEST).exists() {
            return Err(StoreError::Exists(dir.display().to_string()));
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let lock = RunLock::acquire(&dir)?;
        for name in TRUNCATED.iter().chain([&TRANSCRIPTS]) {
            let p = dir.join(name);
            File::create(&p).map_err(io_err(&p))?;
        }
        write_atomic(&dir.join(CONFIG), manifest.config.to_toml().as_bytes())?;
        write_json(&dir.join(MANIFEST), manifest)?;
        Ok(Self { dir, _lock: lock })
    }

    /// Lock an existing run, roll its artifacts back to the last committed
    /// step and return its manifest and checkpoint.
    pub fn open(dir: &Path) -> Result<(Self, RunManifest, Option<Checkpoint>), StoreError> {
        let manifest: RunManifest = read_json(&dir.join(MANIFEST))?;
        let lock = RunLock::acquire(dir)?;
        let state_path = dir.join(STATE);
        let checkpoint: Option<Checkpoint> = if state_path.exists() {
            Some(read_json(&state_path)?)
        } else {
            None
        };
        let offsets = checkpoint.as_ref().map(|c| c.offsets).unwrap_or_default();
        for (name, len) in
            TRUNCATED
                .iter()
                .zip([offsets.steps, offsets.answers, offsets.calls, offsets.qa])
        {
            let p = dir.join(name);
            let f = OpenOptions::new()
                .write(true)
                .create(true)
                .truncate(false)
                .open(&p)
                .map_err(io_err(&p))?;
            let actual = f.metadata().map_err(io_err(&p))?.len();
            if actual < len {
                return Err(StoreError::Corrupt {
                    path: p.display().to_string(),
                    reason: format!("shorter ({actual} bytes) than its committed length {len}"),
                });
            }
            if actual > len {
                log::warn!(
                    "discarding {} uncommitted bytes of {}",
                    actual - len,
                    p.display()
                );
                f.set_len(len).map_err(io_err(&p))?;
            }
        }
        Ok((
            Self {
                dir: dir.to_path_buf(),
                _lock: lock,
            },
            manifest,
            checkpoint,
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn update_manifest(
        &self,
        f: impl FnOnce(&mut RunManifest),
    ) -> Result<RunManifest, StoreError> {
        let path = self.path(MANIFEST);
        let mut m: RunManifest = read_json(&path)?;
        f(&mut m);
        write_json(&path, &m)?;
        Ok(m)
    }

    /// Sink that persists each committed step of this run.
    pub fn sink<'s>(&'s self, corpus: &'s Corpus) -> Result<StoreSink<'s>, StoreError> {
        let open = |name: &str| {
            let p = self.path(name);
            OpenOptions::new()
                .append(true)
                .create(true)
                .open(&p)
                .map_err(io_err(&p))
        };
        Ok(StoreSink {
            store: self,
            corpus,
            steps: open(STEPS)?,
            answers: open(ANSWERS)?,
            calls: open(CALLS)?,
            qa: open(QA)?,
            transcripts: open(TRANSCRIPTS)?,
            stop_after: None,
        })
    }
}

/// A line tagged with its step.
#[derive(Serialize, Deserialize)]
pub struct Stepped<T> {
    pub step: u64,
    #[serde(flatten)]
    pub item: T,
}

pub struct StoreSink<'s> {
    store: &'s RunStore,
    corpus: &'s Corpus,
    steps: File,
    answers: File,
    calls: File,
    qa: File,
    transcripts: File,
    /// Ask the engine to stop once this many steps are committed.
    pub stop_after: Option<u64>,
}

fn append_lines<T: Serialize>(
    file: &mut File,
    path: &Path,
    items: impl IntoIterator<Item = T>,
) -> Result<u64, StoreError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, &item).expect("artifact types serialize");
        buf.push(b'\n');
    }
    file.write_all(&buf).map_err(io_err(path))?;
    file.sync_data().map_err(io_err(path))?;
    Ok(file.metadata().map_err(io_err(path))?.len())
}

impl StoreSink<'_> {
    fn persist(&mut self, state: &SearchState, out: &StepOutput) -> Result<(), StoreError> {
        let t = out.record.t;
        // The transcript log is written first and never rolled back.
        append_lines(
            &mut self.transcripts,
            &self.store.path(TRANSCRIPTS),
            out.transcripts.iter().map(|item| Stepped { step: t, item }),
        )?;
        let offsets = Offsets {
            qa: append_lines(
                &mut self.qa,
                &self.store.path(QA),
                out.qa_items.iter().map(|item| Stepped { step: t, item }),
            )?,
            answers: append_lines(
                &mut self.answers,
                &self.store.path(ANSWERS),
                out.answers.iter().map(|item| Stepped { step: t, item }),
            )?,
            calls: append_lines(&mut self.calls, &self.store.path(CALLS), out.charges.iter())?,
            steps: append_lines(&mut self.steps, &self.store.path(STEPS), [&out.record])?,
        };
        write_json(&self.store.path(DAG), &state.dag.export())?;
        write_json(
            &self.store.path(STATE),
            &Checkpoint::capture(state, self.corpus, offsets),
        )
    }
}

impl StepSink for StoreSink<'_> {
    fn on_step(
        &mut self,
        state: &SearchState,
        output: &StepOutput,
    ) -> Result<Control, EngineError> {
        self.persist(state, output)
            .map_err(|e| EngineError::Sink(e.to_string()))?;
        match self.stop_after {
            Some(n) if state.t >= n => Ok(Control::Stop),
            _ => Ok(Control::Continue),
        }
    }
}

/// Steps of a run as stored.
pub fn read_steps(dir: &Path) -> Result<Vec<crate::engine::StepRecord>, StoreError> {
    read_jsonl(&dir.join(STEPS))
}
