//! Cost accounting and error statistics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum BudgetError {
    #[error("model {0:?} has no entry in the price table")]
    UnknownModel(String),
    #[error("cannot read price table {path}: {reason}")]
    PriceTable { path: String, reason: String },
}

/// Token usage of one provider call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Counts were estimated locally (characters / 4) rather than reported.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub estimated: bool,
}

impl Usage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
            estimated: false,
        }
    }

    pub fn estimate(prompt: &str, completion: &str) -> Self {
        Self {
            prompt_tokens: estimate_tokens(prompt),
            completion_tokens: estimate_tokens(completion),
            estimated: true,
        }
    }
}

pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostCategory {
    Generation,
    Embedding,
    Testee,
}

/// One provider call to be charged. Failed attempts are charged as one call
/// with zero tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallCharge {
    pub category: CostCategory,
    pub model_tag: String,
    pub calls: u64,
    pub usage: Usage,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub failed: bool,
}

impl CallCharge {
    pub fn new(category: CostCategory, model_tag: &str, usage: Usage) -> Self {
        Self {
            category,
            model_tag: model_tag.to_string(),
            calls: 1,
            usage,
            failed: false,
        }
    }

    pub fn failed(category: CostCategory, model_tag: &str) -> Self {
        Self {
            category,
            model_tag: model_tag.to_string(),
            calls: 1,
            usage: Usage::default(),
            failed: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    ApiCalls,
    TokenDollars,
}

/// Price per million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Price {
    pub input_per_mtok: f64,
    pub output_per_mtok: f64,
}

/// `prices.toml`: `[model."<tag>"] input_per_mtok = .., output_per_mtok = ..`
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    #[serde(default)]
    pub model: BTreeMap<String, Price>,
}

impl PriceTable {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, BudgetError> {
        let err = |reason: String| BudgetError::PriceTable {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        Self::parse(&text).map_err(|e| err(e.to_string()))
    }

    pub fn get(&self, model: &str) -> Option<Price> {
        self.model.get(model).copied()
    }
}

/// Persisted form of one ledger entry; summing `amount` over the counted
/// categories in file order reproduces `consumed` exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargeRecord {
    pub step: u64,
    #[serde(flatten)]
    pub charge: CallCharge,
    pub amount: f64,
    pub counted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerState {
    pub consumed: f64,
    pub by_category: BTreeMap<CostCategory, f64>,
    pub calls: u64,
}

/// Running cost against the limit `C`.
#[derive(Debug, Clone)]
pub struct BudgetLedger {
    mode: BudgetMode,
    prices: PriceTable,
    limit: f64,
    counted: Vec<CostCategory>,
    consumed: f64,
    by_category: BTreeMap<CostCategory, f64>,
    calls: u64,
}

impl BudgetLedger {
    pub fn new(
        mode: BudgetMode,
        limit: f64,
        counted: Vec<CostCategory>,
        prices: PriceTable,
    ) -> Self {
        Self {
            mode,
            prices,
            limit,
            counted,
            consumed: 0.0,
            by_category: BTreeMap::new(),
            calls: 0,
        }
    }

    pub fn mode(&self) -> BudgetMode {
        self.mode
    }

    pub fn limit(&self) -> f64 {
        self.limit
    }

    /// Cost counted against the limit.
    pub fn consumed(&self) -> f64 {
        self.consumed
    }

    pub fn category_total(&self, category: CostCategory) -> f64 {
        self.by_category.get(&category).copied().unwrap_or(0.0)
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn has_budget(&self) -> bool {
        self.consumed < self.limit
    }

    pub fn counts(&self, category: CostCategory) -> bool {
        self.counted.contains(&category)
    }

    /// Cost of a charge in the ledger's unit, without applying it.
    pub fn price(&self, charge: &CallCharge) -> Result<f64, BudgetError> {
        match self.mode {
            BudgetMode::ApiCalls => Ok(charge.calls as f64),
            BudgetMode::TokenDollars => {
                let p = self
                    .prices
                    .get(&charge.model_tag)
                    .ok_or_else(|| BudgetError::UnknownModel(charge.model_tag.clone()))?;
                Ok(charge.usage.prompt_tokens as f64 * p.input_per_mtok / 1e6
                    + charge.usage.completion_tokens as f64 * p.output_per_mtok / 1e6)
            }
        }
    }

    /// Apply a charge; returns the new counted total.
    pub fn charge(&mut self, charge: &CallCharge) -> Result<f64, BudgetError> {
        self.charge_record(0, charge).map(|_| self.consumed)
    }

    pub fn charge_record(
        &mut self,
        step: u64,
        charge: &CallCharge,
    ) -> Result<ChargeRecord, BudgetError> {
        let amount = self.price(charge)?;
        debug_assert!(amount >= 0.0);
        let counted = self.counts(charge.category);
        if counted {
            self.consumed += amount;
        }
        *self.by_category.entry(charge.category).or_insert(0.0) += amount;
        self.calls += charge.calls;
        Ok(ChargeRecord {
            step,
            charge: charge.clone(),
            amount,
            counted,
        })
    }

    pub fn state(&self) -> LedgerState {
        LedgerState {
            consumed: self.consumed,
            by_category: self.by_category.clone(),
            calls: self.calls,
        }
    }

    pub fn restore(&mut self, state: &LedgerState) {
        self.consumed = state.consumed;
        self.by_category = state.by_category.clone();
        self.calls = state.calls;
    }
}

/// Sum of counted charge records in order; equals the ledger's `consumed`.
pub fn reconcile(records: &[ChargeRecord]) -> f64 {
    records
        .iter()
        .filter(|r| r.counted)
        .fold(0.0, |acc, r| acc + r.amount)
}

/// Wrong/total tally for question-pooled error.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorTally {
    pub wrong: u64,
    pub total: u64,
}

impl ErrorTally {
    pub fn new(wrong: u64, total: u64) -> Self {
        debug_assert!(wrong <= total);
        Self { wrong, total }
    }

    pub fn add(&mut self, other: ErrorTally) {
        self.wrong += other.wrong;
        self.total += other.total;
    }

    /// `wrong / total`, or `None` with no records.
    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.wrong as f64 / self.total as f64)
    }
}

/// Question-pooled error over all records of a paragraph set.
pub fn subset_error(correct: impl IntoIterator<Item = bool>) -> Option<f64> {
    let mut tally = ErrorTally::default();
    for c in correct {
        tally.add(ErrorTally::new(u64::from(!c), 1));
    }
    tally.rate()
}

/// Mean of per-paragraph error rates (every paragraph weighted equally).
pub fn mean_of_means(parts: &[ErrorTally]) -> Option<f64> {
    let rates: Vec<f64> = parts.iter().filter_map(ErrorTally::rate).collect();
    (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorsPerCost {
    pub n_source_errors: usize,
    pub consumed: f64,
    /// Cost per discovered source error; `None` when nothing was found.
    pub ratio: Option<f64>,
}

pub fn errors_per_cost(n_source_errors: usize, consumed: f64) -> ErrorsPerCost {
    ErrorsPerCost {
        n_source_errors,
        consumed,
        ratio: (n_source_errors > 0).then(|| consumed / n_source_errors as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn token_ledger() -> BudgetLedger {
        let prices = PriceTable::parse(
            r#"
            [model."gpt-4o"]
            input_per_mtok = 2.5
            output_per_mtok = 2.0
            "#,
        )
        .unwrap();
        BudgetLedger::new(
            BudgetMode::TokenDollars,
            100.0,
            vec![CostCategory::Testee],
            prices,
        )
    }

    #[test]
    fn token_mode_unit_arithmetic() {
        let mut ledger = token_ledger();
        let c = CallCharge::new(CostCategory::Testee, "gpt-4o", Usage::new(0, 1_000_000));
        assert_eq!(ledger.charge(&c).unwrap(), 2.0);
    }

    #[test]
    fn api_mode_counts_calls() {
        let mut ledger = BudgetLedger::new(
            BudgetMode::ApiCalls,
            10.0,
            vec![CostCategory::Testee],
            PriceTable::default(),
        );
        let c = CallCharge::new(CostCategory::Testee, "anything", Usage::new(10, 10));
        assert_eq!(ledger.charge(&c).unwrap(), 1.0);
    }

    #[test]
    fn zero_usage_is_identity() {
        let mut ledger = token_ledger();
        let c = CallCharge::new(CostCategory::Testee, "gpt-4o", Usage::default());
        assert_eq!(ledger.charge(&c).unwrap(), 0.0);
        assert_eq!(ledger.consumed(), 0.0);
    }

    #[test]
    fn unknown_model_is_fatal() {
        let mut ledger = token_ledger();
        let c = CallCharge::new(CostCategory::Testee, "mystery", Usage::new(1, 1));
        assert!(matches!(
            ledger.charge(&c),
            Err(BudgetError::UnknownModel(_))
        ));
    }

    #[test]
    fn uncounted_categories_tracked_separately() {
        let mut ledger = BudgetLedger::new(
            BudgetMode::ApiCalls,
            10.0,
            vec![CostCategory::Testee],
            PriceTable::default(),
        );
        ledger
            .charge(&CallCharge::new(
                CostCategory::Generation,
                "g",
                Usage::default(),
            ))
            .unwrap();
        assert_eq!(ledger.consumed(), 0.0);
        assert_eq!(ledger.category_total(CostCategory::Generation), 1.0);
    }

    #[test]
    fn pooled_error_examples() {
        let a = ErrorTally::new(10, 25);
        let b = ErrorTally::new(15, 25);
        let mut pooled = a;
        pooled.add(b);
        assert_eq!(pooled.rate(), Some(0.5));
        assert_eq!(subset_error(vec![true; 25]), Some(0.0));
        assert_eq!(subset_error(Vec::<bool>::new()), None);
    }

    #[test]
    fn pooled_differs_from_mean_of_means() {
        let parts = [ErrorTally::new(5, 10), ErrorTally::new(0, 40)];
        let mut pooled = ErrorTally::default();
        parts.iter().for_each(|p| pooled.add(*p));
        assert_eq!(pooled.rate(), Some(0.1));
        assert_eq!(mean_of_means(&parts), Some(0.25));
    }

    #[test]
    fn errors_per_cost_examples() {
        assert_eq!(errors_per_cost(10, 5.0).ratio, Some(0.5));
        assert_eq!(errors_per_cost(0, 5.0).ratio, None);
        let r = errors_per_cost(300, 20_000.0).ratio.unwrap();
        assert!((r - 66.666_666_666_666_67).abs() < 1e-9);
    }

    #[test]
    fn reconcile_matches_ledger() {
        let mut ledger = token_ledger();
        let mut records = Vec::new();
        for i in 0..100u64 {
            let c = CallCharge::new(CostCategory::Testee, "gpt-4o", Usage::new(i * 37, i * 11));
            records.push(ledger.charge_record(1, &c).unwrap());
        }
        assert_eq!(reconcile(&records), ledger.consumed());
    }
}
