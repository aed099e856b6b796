//! Cross-validation of testees on each other's discovered subsets.
//!
//! A cell pairs a provider run (whose subset supplies the questions) with a
//! testee (which answers them). Accuracy is the testee's pooled accuracy;
//! correlation compares the provider's and the testee's correctness.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationMode {
    /// Pearson over per-question 0/1 correctness (the phi coefficient).
    #[default]
    PerQuestion,
    /// Pearson over per-paragraph accuracies.
    PerParagraph,
}

/// Pearson correlation; `Err` explains why it is undefined.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, String> {
    if x.len() != y.len() {
        return Err(format!("length mismatch: {} vs {}", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err("fewer than two observations".into());
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    match (sxx == 0.0, syy == 0.0) {
        (true, true) => Err("zero variance in both provider and testee results".into()),
        (true, false) => Err("zero variance in provider results".into()),
        (false, true) => Err("zero variance in testee results".into()),
        _ => Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)),
    }
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson over average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, String> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Correctness of one question under the provider and the testee.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedAnswer {
    pub para_id: String,
    pub provider_correct: bool,
    pub testee_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub provider: String,
    pub testee: String,
    pub n_questions: usize,
    pub n_paragraphs: usize,
    pub accuracy: Option<f64>,
    pub correlation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn as_f64(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

pub fn cell(provider: &str, testee: &str, answers: &[PairedAnswer], mode: CorrelationMode) -> Cell {
    let mut per_para: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for a in answers {
        let e = per_para.entry(a.para_id.as_str()).or_default();
        e.0 += 1;
        e.1 += usize::from(a.provider_correct);
        e.2 += usize::from(a.testee_correct);
    }
    let correct = answers.iter().filter(|a| a.testee_correct).count();
    let accuracy = (!answers.is_empty()).then(|| correct as f64 / answers.len() as f64);
    let corr = match mode {
        CorrelationMode::PerQuestion => {
            let x: Vec<f64> = answers.iter().map(|a| as_f64(a.provider_correct)).collect();
            let y: Vec<f64> = answers.iter().map(|a| as_f64(a.testee_correct)).collect();
            pearson(&x, &y)
        }
        CorrelationMode::PerParagraph => {
            let x: Vec<f64> = per_para
                .values()
                .map(|(n, p, _)| *p as f64 / *n as f64)
                .collect();
            let y: Vec<f64> = per_para
                .values()
                .map(|(n, _, t)| *t as f64 / *n as f64)
                .collect();
            pearson(&x, &y)
        }
    };
    let (correlation, note) = match corr {
        Ok(c) => (Some(c), None),
        Err(reason) => (None, Some(reason)),
    };
    Cell {
        provider: provider.to_string(),
        testee: testee.to_string(),
        n_questions: answers.len(),
        n_paragraphs: per_para.len(),
        accuracy,
        correlation,
        note,
    }
}

/// `crossval.json`: matrices indexed `[testee][provider]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub statistic: CorrelationMode,
    pub providers: Vec<String>,
    pub testees: Vec<String>,
    pub correlation: Vec<Vec<Option<f64>>>,
    pub accuracy: Vec<Vec<Option<f64>>>,
    pub n_questions: Vec<Vec<usize>>,
    pub cells: Vec<Cell>,
}

impl CrossValReport {
    /// Arrange cells into matrices; absent combinations stay null.
    pub fn from_cells(statistic: CorrelationMode, cells: Vec<Cell>) -> Self {
        let mut providers: Vec<String> = Vec::new();
        let mut testees: Vec<String> = Vec::new();
        for c in &cells {
            if !providers.contains(&c.provider) {
                providers.push(c.provider.clone());
            }
            if !testees.contains(&c.testee) {
                testees.push(c.testee.clone());
            }
        }
        let mut correlation = vec![vec![None; providers.len()]; testees.len()];
        let mut accuracy = vec![vec![None; providers.len()]; testees.len()];
        let mut n_questions = vec![vec![0; providers.len()]; testees.len()];
        for c in &cells {
            let t = testees
                .iter()
                .position(|x| *x == c.testee)
                .expect("collected");
            let p = providers
                .iter()
                .position(|x| *x == c.provider)
                .expect("collected");
            correlation[t][p] = c.correlation;
            accuracy[t][p] = c.accuracy;
            n_questions[t][p] = c.n_questions;
        }
        Self {
            statistic,
            providers,
            testees,
            correlation,
            accuracy,
            n_questions,
            cells,
        }
    }
}
