//! Independent oracles and a fuzzed-run harness shared by integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

pub mod criteria;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sea_core::budget::{BudgetLedger, BudgetMode, CostCategory, PriceTable};
use sea_core::corpus::Corpus;
use sea_core::embedding::{embed_texts, EmbeddingConfig, HashEmbedder};
use sea_core::engine::{
    Adapters, Control, Engine, EngineError, SearchState, Settings, StepOutput, StepSink,
    Termination, Variant,
};
use sea_core::index::{build_abstract_index, IndexConfig};
use sea_core::qa::TemplateGenerator;
use sea_core::synthetic::{generate, plant_region, CoverageOf, PlantSpec, SyntheticSpec};
use sea_core::testee::{ErrorLandscape, SimulatedTestee};

/// Cosine computed from raw values, without the cached norms.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Full sort of the pool by (similarity desc, id asc), cut at `k`.
pub fn brute_top_k(pool: &[(u32, Vec<f32>)], q: &[f32], k: usize) -> Vec<(u32, f64)> {
    let mut all: Vec<(u32, f64)> = pool.iter().map(|(id, v)| (*id, cosine(v, q))).collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Union of per-source top-k: (id, best similarity, sorted provenance), by id.
pub fn brute_find_sim(
    pool: &[(u32, Vec<f32>)],
    sources: &[(u32, Vec<f32>)],
    k: usize,
) -> Vec<(u32, f64, Vec<u32>)> {
    let mut out: Vec<(u32, f64, Vec<u32>)> = Vec::new();
    for (sid, q) in sources {
        for (id, sim) in brute_top_k(pool, q, k) {
            match out.iter_mut().find(|e| e.0 == id) {
                Some(e) => {
                    if sim > e.1 {
                        e.1 = sim;
                    }
                    if !e.2.contains(sid) {
                        e.2.push(*sid);
                    }
                }
                None => out.push((id, sim, vec![*sid])),
            }
        }
    }
    for e in &mut out {
        e.2.sort();
    }
    out.sort_by_key(|e| e.0);
    out
}

/// Mean error over the descendants of every node by explicit DFS over an
/// edge list, summed in node order; `None` when a node has no descendants.
pub fn dfs_cumulative(errors: &[f64], edges: &[(usize, usize)]) -> Vec<Option<f64>> {
    (0..errors.len())
        .map(|start| {
            let mut seen = BTreeSet::new();
            let mut stack = vec![start];
            while let Some(v) = stack.pop() {
                for &(from, to) in edges {
                    if from == v && seen.insert(to) {
                        stack.push(to);
                    }
                }
            }
            if seen.is_empty() {
                None
            } else {
                let sum: f64 = seen.iter().map(|&i| errors[i]).sum();
                Some(sum / seen.len() as f64)
            }
        })
        .collect()
}

/// Records every committed step with a copy of the state after it.
#[derive(Default)]
pub struct TraceSink {
    pub steps: Vec<(SearchState, StepOutput)>,
}

impl StepSink for TraceSink {
    fn on_step(
        &mut self,
        state: &SearchState,
        output: &StepOutput,
    ) -> Result<Control, EngineError> {
        self.steps.push((state.clone(), output.clone()));
        Ok(Control::Continue)
    }
}

pub struct World {
    pub corpus: Corpus,
    pub embedder: HashEmbedder,
    pub index: sea_core::index::AbstractIndex,
    pub testee: SimulatedTestee,
    pub embed_cfg: EmbeddingConfig,
}

impl World {
    pub fn build(spec: &SyntheticSpec, plant: &PlantSpec, dim: usize, n_centroids: usize) -> Self {
        let embed_cfg = EmbeddingConfig {
            dimension: dim,
            ..EmbeddingConfig::default()
        };
        let planted = generate(spec);
        let embedder = HashEmbedder::new(dim);
        let texts: Vec<&str> = planted
            .corpus
            .paragraphs()
            .iter()
            .map(|p| p.text.as_str())
            .collect();
        let (vectors, _) = embed_texts(&embedder, &texts, &embed_cfg).unwrap();
        let landscape =
            plant_region(&planted, spec, plant, &vectors, &embedder, &embed_cfg).unwrap();
        let index_cfg = IndexConfig {
            n_centroids,
            ..IndexConfig::default()
        };
        let (index, _) =
            build_abstract_index(&planted.corpus, &embedder, &embed_cfg, &index_cfg, None).unwrap();
        Self {
            corpus: planted.corpus,
            embedder,
            index,
            testee: SimulatedTestee::new(landscape, "simulated"),
            embed_cfg,
        }
    }

    pub fn with_landscape(mut self, landscape: ErrorLandscape) -> Self {
        self.testee = SimulatedTestee::new(landscape, "simulated");
        self
    }

    pub fn run(
        &self,
        settings: &Settings,
        ledger: BudgetLedger,
    ) -> (Vec<(SearchState, StepOutput)>, Termination) {
        let generator = TemplateGenerator;
        let engine = Engine::new(
            Adapters::with_index(
                &self.corpus,
                &self.index,
                settings.retrieval.n_probe,
                &self.embedder,
                &generator,
                &self.testee,
            ),
            settings.clone(),
        );
        let mut state = engine.initial_state(ledger);
        let mut sink = TraceSink::default();
        let term = engine.run(&mut state, &mut sink).unwrap();
        (sink.steps, term)
    }
}

pub fn calls_ledger(limit: f64) -> BudgetLedger {
    BudgetLedger::new(
        BudgetMode::ApiCalls,
        limit,
        vec![CostCategory::Testee],
        PriceTable::default(),
    )
}

/// A small random corpus, landscape and configuration.
pub struct Fuzzed {
    pub world: World,
    pub settings: Settings,
    pub limit: f64,
}

pub fn fuzzed(seed: u64) -> Fuzzed {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = SyntheticSpec {
        clusters: rng.random_range(2..=5),
        docs_per_cluster: rng.random_range(2..=4),
        paras_per_doc: rng.random_range(4..=10),
        tokens_per_paragraph: 30,
        seed: rng.random(),
        ..SyntheticSpec::default()
    };
    let plant = PlantSpec {
        coverage: rng.random_range(0.1..0.5),
        coverage_of: CoverageOf::Paragraphs,
        error_prob: rng.random_range(0.5..1.0),
        base_error_prob: rng.random_range(0.0..0.4),
        seed: rng.random(),
        ..PlantSpec::default()
    };
    let docs = spec.clusters * spec.docs_per_cluster;
    let n_centroids = rng.random_range(1..=docs.min(4));
    let world = World::build(&spec, &plant, 32, n_centroids);
    let grid = [0.1, 0.25, 0.4, 0.5, 0.6, 0.75, 0.9];
    let mut settings = Settings::default();
    settings.engine.seed = rng.random();
    settings.engine.xi = grid[rng.random_range(0..grid.len())];
    settings.engine.gamma = grid[rng.random_range(0..grid.len())];
    settings.engine.variant =
        [Variant::Full, Variant::NoPrune, Variant::RandomSelect][rng.random_range(0..3)];
    settings.engine.max_steps = Some(rng.random_range(2..=8));
    settings.retrieval.k = rng.random_range(1..=8);
    settings.retrieval.k_doc = rng.random_range(1..=3);
    settings.retrieval.batch_size = rng.random_range(2..=8);
    settings.retrieval.n_probe = rng.random_range(1..=n_centroids);
    settings.qa.n_base = rng.random_range(1..=3);
    settings.qa.n_variants = rng.random_range(0..=2);
    settings.embedding = world.embed_cfg.clone();
    let per_step = (settings.retrieval.batch_size * settings.qa.target_total()) as f64;
    let limit = per_step * rng.random_range(1.0..6.0);
    Fuzzed {
        world,
        settings,
        limit,
    }
}
