//! Run configuration file (TOML) with line-precise diagnostics.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::budget::{BudgetLedger, BudgetMode, CostCategory, PriceTable};
use crate::embedding::{EmbeddingConfig, EmbeddingKind};
use crate::engine::{EngineConfig, Settings};
use crate::index::IndexConfig;
use crate::qa::{GeneratorKind, QaConfig};
use crate::retrieval::RetrievalConfig;
use crate::testee::{TesteeConfig, TesteeKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.path)?;
        if let Some(l) = self.line {
            write!(f, ":{l}")?;
            if let Some(c) = self.column {
                write!(f, ":{c}")?;
            }
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Directory name under `runs_dir`; derived from the seed and variant
    /// when absent.
    pub id: Option<String>,
    pub runs_dir: PathBuf,
    /// Ingested corpus file.
    pub corpus: PathBuf,
    /// Index directory built by `sea index`.
    pub index: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            id: None,
            runs_dir: PathBuf::from("runs"),
            corpus: PathBuf::from("corpus.jsonl"),
            index: PathBuf::from("index"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub mode: BudgetMode,
    /// The limit `C` in the mode's unit (calls or dollars).
    pub limit: f64,
    /// Categories charged against the limit; others are recorded only.
    pub counted: Vec<CostCategory>,
    /// `prices.toml`; required in token-dollars mode.
    pub prices: Option<PathBuf>,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            mode: BudgetMode::ApiCalls,
            limit: 20_000.0,
            counted: vec![CostCategory::Testee],
            prices: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub engine: EngineConfig,
    pub retrieval: RetrievalConfig,
    pub qa: QaConfig,
    pub testee: TesteeConfig,
    pub embedding: EmbeddingConfig,
    pub budget: BudgetConfig,
    pub index: IndexConfig,
}

/// 1-based line and column of byte `offset` in `text`.
pub fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

/// Line of `key = ...` inside `[section]` (dotted sections match their
/// prefix), or of the section header when the key is absent.
pub fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
            current = name.trim_matches(['[', ' ']).to_string();
            if current == section && header.is_none() {
                header = Some(i + 1);
            }
            continue;
        }
        let in_section = current == section || current.starts_with(&format!("{section}."));
        if in_section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim().trim_matches('"') == key {
                    return Some(i + 1);
                }
            }
        }
    }
    header
}

/// Deserialize TOML, reporting syntax and schema errors with their position.
pub fn parse_toml<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|e| {
        let (line, column) = match e.span() {
            Some(span) => {
                let (l, c) = line_col(text, span.start);
                (Some(l), Some(c))
            }
            None => (None, None),
        };
        ConfigError {
            path: origin.to_string(),
            line,
            column,
            message: e.message().trim().to_string(),
        }
    })
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parse and validate; `origin` names the source in diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Self = parse_toml(text, origin)?;
        cfg.validate()
            .map_err(|(section, key, message)| ConfigError {
                path: origin.to_string(),
                line: locate(text, section, key),
                column: None,
                message,
            })?;
        Ok(cfg)
    }

    /// Load a file; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: origin.clone(),
            line: None,
            column: None,
            message: e.to_string(),
        })?;
        let mut cfg = Self::parse(&text, &origin)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.run.runs_dir);
        resolve(base, &mut self.run.corpus);
        resolve(base, &mut self.run.index);
        if let Some(p) = &mut self.budget.prices {
            resolve(base, p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }

    /// Semantic checks; errors carry `(section, key, message)`.
    pub fn validate(&self) -> Result<(), (&'static str, &'static str, String)> {
        self.engine.validate().map_err(|m| {
            let key = if m.contains("gamma") { "gamma" } else { "xi" };
            ("engine", key, m)
        })?;
        self.retrieval.validate().map_err(|m| {
            let key = ["k_doc", "batch_size", "n_probe", "k"]
                .into_iter()
                .find(|k| m.contains(&format!("retrieval.{k} ")))
                .unwrap_or("k");
            ("retrieval", key, m)
        })?;
        self.qa.validate().map_err(|m| {
            let key = if m.contains("floor") {
                "floor"
            } else {
                "n_base"
            };
            ("qa", key, m)
        })?;
        self.testee.validate().map_err(|m| {
            let key = ["temperature", "top_p"]
                .into_iter()
                .find(|k| m.contains(k))
                .unwrap_or("landscape");
            ("testee", key, m)
        })?;
        if self.budget.limit.is_nan() || self.budget.limit <= 0.0 {
            return Err((
                "budget",
                "limit",
                format!("budget.limit must be positive, got {}", self.budget.limit),
            ));
        }
        if self.budget.mode == BudgetMode::TokenDollars && self.budget.prices.is_none() {
            return Err((
                "budget",
                "prices",
                "budget.mode token-dollars needs a prices file".into(),
            ));
        }
        if self.embedding.dimension == 0 {
            return Err((
                "embedding",
                "dimension",
                "embedding.dimension must be at least 1".into(),
            ));
        }
        if self.embedding.kind == EmbeddingKind::Remote
            && (self.embedding.base_url.is_none() || self.embedding.model.is_none())
        {
            return Err((
                "embedding",
                "kind",
                "remote embedding needs base_url and model".into(),
            ));
        }
        if self.qa.generator == GeneratorKind::Remote
            && (self.qa.base_url.is_none() || self.qa.model.is_none())
        {
            return Err((
                "qa",
                "generator",
                "remote generator needs base_url and model".into(),
            ));
        }
        match self.testee.kind {
            TesteeKind::Remote if self.testee.base_url.is_none() || self.testee.model.is_none() => {
                return Err((
                    "testee",
                    "kind",
                    "remote testee needs base_url and model".into(),
                ));
            }
            TesteeKind::Simulated if self.testee.landscape.is_none() => {
                return Err((
                    "testee",
                    "kind",
                    "simulated testee needs a [testee.landscape] table".into(),
                ));
            }
            _ => {}
        }
        if self.index.n_centroids == 0 {
            return Err((
                "index",
                "n_centroids",
                "index.n_centroids must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn settings(&self) -> Settings {
        Settings {
            engine: self.engine.clone(),
            retrieval: self.retrieval.clone(),
            qa: self.qa.clone(),
            embedding: self.embedding.clone(),
            testee_retries: self.testee.max_retries,
        }
    }

    pub fn ledger(&self) -> Result<BudgetLedger, ConfigError> {
        let prices = match &self.budget.prices {
            Some(p) => PriceTable::load(p).map_err(|e| ConfigError {
                path: p.display().to_string(),
                line: None,
                column: None,
                message: e.to_string(),
            })?,
            None => PriceTable::default(),
        };
        Ok(BudgetLedger::new(
            self.budget.mode,
            self.budget.limit,
            self.budget.counted.clone(),
            prices,
        ))
    }

    /// Run directory name when none is configured.
    pub fn default_run_id(&self) -> String {
        format!("{}-seed{}", self.engine.variant.as_str(), self.engine.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIMULATED: &str = r#"
[engine]
seed = 3

[testee]
kind = "simulated"

[testee.landscape]
base_error_prob = 0.1
"#;

    #[test]
    fn defaults_fill_missing_sections() {
        let c = RunConfig::parse(SIMULATED, "t.toml").unwrap();
        assert_eq!(c.engine.seed, 3);
        assert_eq!(c.engine.xi, 0.5);
        assert_eq!(c.retrieval.k, 50);
        assert_eq!(c.budget.counted, vec![CostCategory::Testee]);
        assert_eq!(c.settings().testee_retries, 3);
    }

    #[test]
    fn syntax_error_has_line() {
        let text = "[engine]\nseed = 3\nxi = \n";
        let e = RunConfig::parse(text, "bad.toml").unwrap_err();
        assert_eq!(e.line, Some(3), "{e}");
        assert!(e.to_string().starts_with("bad.toml:3:"), "{e}");
    }

    #[test]
    fn unknown_key_has_line() {
        let text = "[engine]\nseed = 3\n\n[retrieval]\nkk = 5\n";
        let e = RunConfig::parse(text, "bad.toml").unwrap_err();
        assert_eq!(e.line, Some(5), "{e}");
        assert!(e.message.contains("kk"), "{e}");
    }

    #[test]
    fn semantic_error_points_at_key() {
        let text = format!("{SIMULATED}\n[retrieval]\nk = 50\nbatch_size = 0\n");
        let e = RunConfig::parse(&text, "bad.toml").unwrap_err();
        let expected = text
            .lines()
            .position(|l| l.starts_with("batch_size"))
            .unwrap()
            + 1;
        assert_eq!(e.line, Some(expected), "{e}");
    }

    #[test]
    fn out_of_range_threshold() {
        let text = "[engine]\nxi = 1.5\n[testee.landscape]\n";
        let e = RunConfig::parse(text, "bad.toml").unwrap_err();
        assert_eq!(e.line, Some(2), "{e}");
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::parse(SIMULATED, "t.toml").unwrap();
        c.engine.xi = 0.1 + 0.2;
        c.run.id = Some("x".into());
        let again = RunConfig::parse(&c.to_toml(), "snapshot").unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            format!("[run]\ncorpus = \"data/c.jsonl\"\n{SIMULATED}"),
        )
        .unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.run.corpus, dir.path().join("data/c.jsonl"));
        assert_eq!(c.run.runs_dir, dir.path().join("runs"));
    }
}
