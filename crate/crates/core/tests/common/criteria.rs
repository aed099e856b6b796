//! Checks for the retrieval, DAG, accounting, budget and parser criteria.
//! Each returns a one-line summary, `Err` when the criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;

use fixedbitset::FixedBitSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use sea_core::budget::{mean_of_means, reconcile, subset_error, ErrorTally};
use sea_core::corpus::{Corpus, KnowledgeBaseView, ParaIdx};
use sea_core::dag::{CumulativeError, NewSource, RelationDag};
use sea_core::embedding::{embed_texts, Embedding, EmbeddingCache, EmbeddingConfig, HashEmbedder};
use sea_core::engine::{SearchState, Settings, StepOutput, Termination, Variant};
use sea_core::index::{build_abstract_index, IndexConfig};
use sea_core::qa::parse_reply;
use sea_core::retrieval::{
    find_sim, hierarchical_retrieve, top_k, DocumentSearch, Eligibility, RetrievalConfig,
};
use sea_core::synthetic::{generate, CoverageOf, PlantSpec, SyntheticSpec};
use sea_core::testee::{parse_choice, Choice};

use super::{brute_find_sim, brute_top_k, calls_ledger, dfs_cumulative, fuzzed, World};

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    (0..d)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect()
}

/// Flat `find_sim` against the brute-force oracle on 50 random pools, with
/// duplicated vectors to exercise the id tie-break.
pub fn flat_find_sim_matches_oracle() -> Outcome {
    let mut compared = 0;
    for case in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xF1A7 + case);
        let n = rng.random_range(1..=1000);
        let mut raw: Vec<Vec<f32>> = (0..n).map(|_| random_vec(&mut rng, 32)).collect();
        for _ in 0..n / 10 {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            raw[b] = raw[a].clone();
        }
        let pool: Vec<(u32, Embedding)> = raw
            .into_iter()
            .enumerate()
            .map(|(i, v)| (i as u32, Embedding::new(v).unwrap()))
            .collect();
        let sources: Vec<(u32, Embedding)> = (0..rng.random_range(1..=6))
            .map(|s| {
                let v = if rng.random_bool(0.3) {
                    pool[rng.random_range(0..n)].1.values().to_vec()
                } else {
                    random_vec(&mut rng, 32)
                };
                (10_000 + s, Embedding::new(v).unwrap())
            })
            .collect();
        let k = rng.random_range(1..=60);
        let pool_refs: Vec<(u32, &Embedding)> = pool.iter().map(|(i, e)| (*i, e)).collect();
        let src_refs: Vec<(ParaIdx, &Embedding)> =
            sources.iter().map(|(i, e)| (ParaIdx(*i), e)).collect();
        let plain = |v: &[(u32, Embedding)]| -> Vec<(u32, Vec<f32>)> {
            v.iter().map(|(i, e)| (*i, e.values().to_vec())).collect()
        };
        let (oracle_pool, oracle_src) = (plain(&pool), plain(&sources));
        for (_, q) in &sources {
            let got = top_k(&pool_refs, q, k);
            let want = brute_top_k(&oracle_pool, q.values(), k);
            ensure!(
                got == want,
                "case {case}: top_k order differs from the oracle"
            );
        }
        let got: Vec<(u32, f64, Vec<u32>)> = find_sim(&pool_refs, &src_refs, k)
            .into_iter()
            .map(|c| {
                (
                    c.id,
                    c.best_similarity,
                    c.provenance.iter().map(|p| p.0).collect(),
                )
            })
            .collect();
        let want = brute_find_sim(&oracle_pool, &oracle_src, k);
        ensure!(got == want, "case {case}: find_sim differs from the oracle");
        compared += got.len();
    }
    Ok(format!("50 pools, {compared} candidates identical"))
}

struct RetrievalWorld {
    corpus: Corpus,
    embedder: HashEmbedder,
    embed_cfg: EmbeddingConfig,
    index: sea_core::index::AbstractIndex,
    abstracts: Vec<Embedding>,
}

fn retrieval_world(spec: &SyntheticSpec, n_centroids: usize) -> RetrievalWorld {
    let embed_cfg = EmbeddingConfig {
        dimension: 32,
        ..EmbeddingConfig::default()
    };
    let embedder = HashEmbedder::new(32);
    let corpus = generate(spec).corpus;
    let cfg = IndexConfig {
        n_centroids,
        ..IndexConfig::default()
    };
    let (index, _) = build_abstract_index(&corpus, &embedder, &embed_cfg, &cfg, None).unwrap();
    let mut abstracts: Vec<Option<Embedding>> = vec![None; corpus.docs().len()];
    for e in index.lists().iter().flatten() {
        abstracts[corpus.doc_idx(&e.doc_id).unwrap().get()] = Some(e.vector.clone());
    }
    RetrievalWorld {
        corpus,
        embedder,
        embed_cfg,
        index,
        abstracts: abstracts.into_iter().map(Option::unwrap).collect(),
    }
}

fn sources_of(
    w: &RetrievalWorld,
    rng: &mut ChaCha8Rng,
    n: usize,
) -> Vec<(ParaIdx, Arc<Embedding>)> {
    let picks: Vec<ParaIdx> = (0..n)
        .map(|_| ParaIdx(rng.random_range(0..w.corpus.len() as u32)))
        .collect();
    let texts: Vec<&str> = picks
        .iter()
        .map(|p| w.corpus.paragraph(*p).text.as_str())
        .collect();
    let (v, _) = embed_texts(&w.embedder, &texts, &w.embed_cfg).unwrap();
    picks.into_iter().zip(v.into_iter().map(Arc::new)).collect()
}

/// Hierarchical retrieval probing every list equals exact abstract search,
/// on 50 random corpora with some paragraphs removed or evaluated.
pub fn hierarchical_all_probes_equals_flat() -> Outcome {
    for case in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x41E2 + case);
        let spec = SyntheticSpec {
            clusters: rng.random_range(2..=8),
            docs_per_cluster: rng.random_range(2..=6),
            paras_per_doc: rng.random_range(2..=20),
            tokens_per_paragraph: 30,
            seed: rng.random(),
            ..SyntheticSpec::default()
        };
        let docs = spec.clusters * spec.docs_per_cluster;
        let n_centroids = rng.random_range(1..=docs.min(16));
        let w = retrieval_world(&spec, n_centroids);
        let mut view = KnowledgeBaseView::new(&w.corpus);
        let mut evaluated = FixedBitSet::with_capacity(w.corpus.len());
        for p in 0..w.corpus.len() {
            match rng.random_range(0..10) {
                0 => {
                    view.remove(&[ParaIdx(p as u32)]);
                }
                1 => evaluated.insert(p),
                _ => {}
            }
        }
        let eligible = Eligibility {
            view: &view,
            evaluated: &evaluated,
        };
        let n_sources = rng.random_range(1..=5);
        let sources = sources_of(&w, &mut rng, n_sources);
        let cfg = RetrievalConfig {
            k: rng.random_range(1..=50),
            k_doc: rng.random_range(1..=10),
            batch_size: 40,
            n_probe: n_centroids,
        };
        let cache = EmbeddingCache::new();
        let run = |search: &DocumentSearch<'_>| {
            hierarchical_retrieve(
                &w.corpus,
                &eligible,
                search,
                &cache,
                &w.embedder,
                &w.embed_cfg,
                &sources,
                &cfg,
            )
            .map(|r| (r.documents, r.candidates))
            .map_err(|e| e.to_string())
        };
        let via_index = run(&DocumentSearch::Index {
            index: &w.index,
            n_probe: n_centroids,
        });
        let flat = run(&DocumentSearch::Flat(&w.abstracts));
        ensure!(
            via_index == flat,
            "case {case}: probing all {n_centroids} lists differs from exact abstract search"
        );
    }
    Ok("50 corpora identical".into())
}

/// Mean recall of index-backed retrieval against exact abstract search with
/// a quarter of the lists probed, on planted-cluster corpora.
pub fn hierarchical_recall() -> Outcome {
    let mut recalls = Vec::new();
    for case in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x2EC + case);
        let spec = SyntheticSpec {
            clusters: 20,
            docs_per_cluster: 10,
            paras_per_doc: 5,
            seed: rng.random(),
            ..SyntheticSpec::default()
        };
        let w = retrieval_world(&spec, 16);
        let view = KnowledgeBaseView::new(&w.corpus);
        let evaluated = FixedBitSet::with_capacity(w.corpus.len());
        let eligible = Eligibility {
            view: &view,
            evaluated: &evaluated,
        };
        let cache = EmbeddingCache::new();
        for _ in 0..5 {
            let n_sources = rng.random_range(1..=5);
            let sources = sources_of(&w, &mut rng, n_sources);
            let cfg = RetrievalConfig::default();
            let get = |search: &DocumentSearch<'_>| -> BTreeSet<ParaIdx> {
                hierarchical_retrieve(
                    &w.corpus,
                    &eligible,
                    search,
                    &cache,
                    &w.embedder,
                    &w.embed_cfg,
                    &sources,
                    &cfg,
                )
                .unwrap()
                .candidates
                .into_iter()
                .map(|c| c.id)
                .collect()
            };
            let approx = get(&DocumentSearch::Index {
                index: &w.index,
                n_probe: 4,
            });
            let exact = get(&DocumentSearch::Flat(&w.abstracts));
            recalls.push(approx.intersection(&exact).count() as f64 / exact.len() as f64);
        }
    }
    let mean = recalls.iter().sum::<f64>() / recalls.len() as f64;
    let min = recalls.iter().copied().fold(f64::INFINITY, f64::min);
    ensure!(mean >= 0.9, "mean recall@50 {mean:.3} < 0.9 (min {min:.3})");
    Ok(format!(
        "mean recall@50 {mean:.3} (min {min:.3}) over {} queries",
        recalls.len()
    ))
}

/// Build a graph where node `i` is admitted at step `i + 1` with the given
/// parents as provenance.
fn dag_from(errors: &[f64], edges: &[(usize, usize)]) -> RelationDag {
    let mut dag = RelationDag::new();
    for (i, e) in errors.iter().enumerate() {
        let provenance = edges
            .iter()
            .filter(|(_, to)| *to == i)
            .map(|(f, _)| ParaIdx(*f as u32))
            .collect();
        dag.add_sources(
            &[NewSource {
                para: ParaIdx(i as u32),
                para_id: format!("p{i}"),
                error: *e,
                provenance,
            }],
            i as u64 + 1,
        )
        .unwrap();
    }
    dag
}

fn hand_graphs() -> Vec<(&'static str, Vec<f64>, Vec<(usize, usize)>)> {
    vec![
        ("single", vec![0.8], vec![]),
        ("pair", vec![0.8, 0.6], vec![(0, 1)]),
        (
            "diamond",
            vec![0.9, 0.6, 0.6, 0.9],
            vec![(0, 1), (0, 2), (1, 3), (2, 3)],
        ),
        (
            "chain",
            vec![0.9, 0.3, 0.8, 0.2, 0.7],
            vec![(0, 1), (1, 2), (2, 3), (3, 4)],
        ),
        (
            "star",
            vec![0.6, 0.1, 0.2, 0.3, 0.4],
            vec![(0, 1), (0, 2), (0, 3), (0, 4)],
        ),
        (
            "fan-in",
            vec![0.7, 0.8, 0.9, 0.1],
            vec![(0, 3), (1, 3), (2, 3)],
        ),
        (
            "two components",
            vec![0.6, 0.7, 0.8, 0.9],
            vec![(0, 1), (2, 3)],
        ),
        ("isolated", vec![0.6, 0.7, 0.8], vec![]),
        (
            "transitive shortcut",
            vec![0.6, 0.4, 0.9],
            vec![(0, 1), (1, 2), (0, 2)],
        ),
        (
            "double diamond",
            vec![0.9, 0.2, 0.3, 0.8, 0.4, 0.5, 0.7],
            vec![
                (0, 1),
                (0, 2),
                (1, 3),
                (2, 3),
                (3, 4),
                (3, 5),
                (4, 6),
                (5, 6),
            ],
        ),
        ("exact threshold", vec![0.9, 0.5], vec![(0, 1)]),
        (
            "just below threshold",
            vec![0.9, 0.49999999999999994],
            vec![(0, 1)],
        ),
        (
            "long fan",
            vec![0.9, 0.51, 0.52, 0.53, 0.54, 0.55, 0.56, 0.57],
            (1..8).map(|i| (0, i)).collect(),
        ),
        (
            "ladder",
            vec![0.6, 0.7, 0.6, 0.7, 0.6, 0.7],
            vec![(0, 1), (0, 2), (1, 3), (2, 3), (2, 4), (3, 5), (4, 5)],
        ),
        ("late root", vec![0.9, 0.9, 0.1], vec![(1, 2)]),
        (
            "all high",
            vec![0.95, 0.97, 0.99, 0.96],
            vec![(0, 1), (1, 2), (0, 3)],
        ),
        (
            "all low descendants",
            vec![0.9, 0.1, 0.2, 0.3],
            vec![(0, 1), (1, 2), (2, 3)],
        ),
        (
            "wide then narrow",
            vec![0.8, 0.8, 0.8, 0.3, 0.3],
            vec![(0, 3), (1, 3), (2, 3), (3, 4)],
        ),
        (
            "sparse random",
            vec![0.55, 0.65, 0.75, 0.85, 0.95, 0.45],
            vec![(0, 2), (1, 4), (2, 5), (3, 5), (0, 5)],
        ),
        (
            "complete",
            vec![0.6, 0.7, 0.8, 0.9, 0.3],
            (0..5)
                .flat_map(|a| (a + 1..5).map(move |b| (a, b)))
                .collect(),
        ),
    ]
}

/// Compare one graph with the DFS oracle, the EXEMPT rule, the pruning
/// rule and idempotence at `gamma`.
fn check_graph(name: &str, dag: &RelationDag, gamma: f64) -> Result<(), String> {
    ensure!(dag.is_acyclic(), "{name}: cycle");
    let errors: Vec<f64> = dag.nodes().iter().map(|n| n.error).collect();
    let edges: Vec<(usize, usize)> = dag
        .edges()
        .iter()
        .map(|e| (e.from as usize, e.to as usize))
        .collect();
    for &(f, t) in &edges {
        ensure!(
            dag.nodes()[f].step < dag.nodes()[t].step,
            "{name}: edge {f}->{t} not forward in step"
        );
    }
    let paras: HashSet<ParaIdx> = dag.nodes().iter().map(|n| n.para).collect();
    ensure!(paras.len() == dag.len(), "{name}: duplicate source");
    let oracle = dfs_cumulative(&errors, &edges);
    let got = dag.cumulative_errors();
    for (i, (g, o)) in got.iter().zip(&oracle).enumerate() {
        let single = dag.cumulative_error(dag.nodes()[i].para).unwrap();
        ensure!(
            g.value() == *o && single.value() == *o,
            "{name}: node {i} cumulative {g:?} vs oracle {o:?}"
        );
        ensure!(
            (*g == CumulativeError::Exempt) == o.is_none(),
            "{name}: node {i} EXEMPT mismatch"
        );
    }
    let mut pruned = dag.clone();
    let removed: BTreeSet<usize> = pruned
        .prune(gamma)
        .iter()
        .map(|p| dag.node_index(*p).unwrap())
        .collect();
    let expected: BTreeSet<usize> = (0..dag.len())
        .filter(|&i| dag.nodes()[i].active && oracle[i].is_some_and(|v| v < gamma))
        .collect();
    ensure!(
        removed == expected,
        "{name}: pruned {removed:?}, expected {expected:?}"
    );
    ensure!(
        pruned.prune(gamma).is_empty(),
        "{name}: prune is not idempotent"
    );
    Ok(())
}

/// Hand-built graphs (including the diamond) and 100 fuzzed engine runs.
pub fn dag_correctness() -> Outcome {
    for (name, errors, edges) in hand_graphs() {
        let dag = dag_from(&errors, &edges);
        for gamma in [0.3, 0.5, 0.65, 0.9] {
            check_graph(name, &dag, gamma)?;
        }
        let mut again = dag.clone();
        let dup = NewSource {
            para: ParaIdx(0),
            para_id: "p0".into(),
            error: 0.9,
            provenance: vec![],
        };
        ensure!(
            again.add_sources(&[dup], 99).is_err() && again == dag,
            "{name}: duplicate admission accepted"
        );
    }
    let diamond = dag_from(&[0.9, 0.6, 0.6, 0.9], &[(0, 1), (0, 2), (1, 3), (2, 3)]);
    let pi = diamond
        .cumulative_error(ParaIdx(0))
        .unwrap()
        .value()
        .unwrap();
    ensure!(
        (pi - 0.7).abs() < 1e-12,
        "diamond cumulative error {pi}, expected 0.7"
    );

    let mut nodes = 0;
    let mut pruned = 0;
    for seed in 0..100 {
        let f = fuzzed(seed);
        let (steps, _) = f.world.run(&f.settings, calls_ledger(f.limit));
        for (state, out) in &steps {
            let name = format!("run {seed} step {}", out.record.t);
            check_graph(&name, &state.dag, f.settings.engine.gamma)?;
            let cumulative = state.dag.cumulative_errors();
            for (n, c) in state.dag.nodes().iter().zip(&cumulative) {
                ensure!(
                    n.active || *c != CumulativeError::Exempt,
                    "{name}: EXEMPT node {} pruned",
                    n.para_id
                );
                if f.settings.engine.variant == Variant::Full && n.active {
                    ensure!(
                        c.value().is_none_or(|v| v >= f.settings.engine.gamma),
                        "{name}: active node {} below gamma",
                        n.para_id
                    );
                }
            }
            if f.settings.engine.variant != Variant::Full {
                ensure!(
                    out.record.pruned.is_empty(),
                    "{name}: {:?} pruned without pruning",
                    f.settings.engine.variant
                );
            }
            pruned += out.record.pruned.len();
        }
        nodes += steps.last().map_or(0, |(s, _)| s.dag.len());
    }
    Ok(format!("20 hand-built graphs, diamond pi = {pi}; 100 fuzzed runs, {nodes} nodes, {pruned} prunings"))
}

/// Recompute every run-level statistic from the raw answers of all steps.
fn check_accounting(name: &str, steps: &[(SearchState, StepOutput)]) -> Result<(), String> {
    let mut all: Vec<&sea_core::testee::AnswerRecord> = Vec::new();
    let mut order: Vec<String> = Vec::new();
    for (state, out) in steps {
        let step_wrong = out.answers.iter().filter(|a| !a.correct).count() as u64;
        ensure!(
            out.record.wrong == step_wrong && out.record.questions == out.answers.len() as u64,
            "{name}: step tally"
        );
        ensure!(
            out.record.t_e == subset_error(out.answers.iter().map(|a| a.correct)),
            "{name}: T_E"
        );
        all.extend(&out.answers);
        order.extend(out.record.batch.iter().map(|b| b.para_id.clone()));
        let wrong = all.iter().filter(|a| !a.correct).count() as u64;
        ensure!(
            state.tally == ErrorTally::new(wrong, all.len() as u64),
            "{name} t={}: incremental tally {:?} vs recomputed {wrong}/{}",
            out.record.t,
            state.tally,
            all.len()
        );
        ensure!(
            out.record.t_s == subset_error(all.iter().map(|a| a.correct)),
            "{name}: T_S"
        );
        let mut per_para: BTreeMap<&str, ErrorTally> = BTreeMap::new();
        for a in &all {
            per_para
                .entry(a.para_id.as_str())
                .or_default()
                .add(ErrorTally::new(u64::from(!a.correct), 1));
        }
        let parts: Vec<ErrorTally> = order
            .iter()
            .filter_map(|p| per_para.get(p.as_str()).copied())
            .collect();
        let mom = mean_of_means(&parts);
        ensure!(
            match (mom, out.record.t_s_mean_of_means) {
                (Some(a), Some(b)) => (a - b).abs() < 1e-12,
                (a, b) => a == b,
            },
            "{name}: mean of means {mom:?} vs {:?}",
            out.record.t_s_mean_of_means
        );
    }
    Ok(())
}

/// Incremental tallies against batch recomputation on 100 fuzzed runs, plus
/// the unequal-count counterexample.
pub fn error_accounting() -> Outcome {
    let parts = [ErrorTally::new(5, 10), ErrorTally::new(0, 40)];
    let mut pooled = ErrorTally::default();
    parts.iter().for_each(|p| pooled.add(*p));
    ensure!(pooled.rate() == Some(0.1), "pooled {:?}", pooled.rate());
    ensure!(
        mean_of_means(&parts) == Some(0.25),
        "mean of means {:?}",
        mean_of_means(&parts)
    );
    let mut steps_checked = 0;
    for seed in 0..100 {
        let f = fuzzed(seed);
        let (steps, _) = f.world.run(&f.settings, calls_ledger(f.limit));
        check_accounting(&format!("run {seed}"), &steps)?;
        steps_checked += steps.len();
    }
    Ok(format!(
        "counterexample pooled 0.1 vs mean-of-means 0.25; {steps_checked} steps recomputed exactly"
    ))
}

/// One step under a one-step budget; exact reconciliation and no repeated
/// paragraph over the fuzzed runs.
pub fn budget_and_loop_guards() -> Outcome {
    let spec = SyntheticSpec {
        clusters: 4,
        docs_per_cluster: 4,
        paras_per_doc: 10,
        ..SyntheticSpec::default()
    };
    let plant = PlantSpec {
        coverage: 0.2,
        coverage_of: CoverageOf::Paragraphs,
        ..PlantSpec::default()
    };
    let world = World::build(&spec, &plant, 32, 4);
    let mut settings = Settings::default();
    settings.retrieval.batch_size = 10;
    settings.embedding = world.embed_cfg.clone();
    let one_step = (settings.retrieval.batch_size * settings.qa.target_total()) as f64;
    let (steps, term) = world.run(&settings, calls_ledger(one_step));
    ensure!(
        steps.len() == 1 && term == Termination::BudgetExhausted,
        "{} steps, {term:?} under a one-step budget",
        steps.len()
    );
    ensure!(
        steps[0].0.ledger.consumed() == one_step,
        "consumed {} != {one_step}",
        steps[0].0.ledger.consumed()
    );

    let mut runs = 0;
    let mut batches = 0;
    for seed in 0..100 {
        let f = fuzzed(seed);
        let (steps, _) = f.world.run(&f.settings, calls_ledger(f.limit));
        let Some((last, _)) = steps.last() else {
            continue;
        };
        let records: Vec<_> = steps
            .iter()
            .flat_map(|(_, o)| o.charges.iter().cloned())
            .collect();
        let direct: f64 = records.iter().filter(|r| r.counted).map(|r| r.amount).sum();
        ensure!(
            reconcile(&records) == last.ledger.consumed() && direct == last.ledger.consumed(),
            "run {seed}: ledger {} vs records {direct}",
            last.ledger.consumed()
        );
        let mut seen = HashSet::new();
        let mut admitted = HashSet::new();
        for (state, out) in &steps {
            for b in &out.record.batch {
                ensure!(
                    seen.insert(b.para_id.clone()),
                    "run {seed}: {} batched twice",
                    b.para_id
                );
                ensure!(
                    !admitted.contains(&b.para_id),
                    "run {seed}: source {} batched again",
                    b.para_id
                );
            }
            admitted.extend(out.record.admitted.iter().cloned());
            for id in &out.record.admitted {
                let p = f.world.corpus.para_idx(id).unwrap();
                ensure!(
                    !state.view.is_active(p),
                    "run {seed}: source {id} still in the knowledge base"
                );
            }
            batches += 1;
        }
        runs += 1;
    }
    Ok(format!("one-step budget ran 1 step ({one_step} calls); {runs} runs, {batches} batches reconciled, no repeats"))
}

#[derive(Deserialize)]
struct AnswerCase {
    raw: String,
    expect: String,
}

#[derive(Deserialize)]
struct ReplyCase {
    name: String,
    expected: usize,
    reply: String,
}

#[derive(Deserialize)]
struct ReplyFixture {
    valid: Vec<ReplyCase>,
    malformed: Vec<ReplyCase>,
}

/// The answer-parser fixture and the generator-reply fixture.
pub fn parser_and_schema() -> Outcome {
    let cases: Vec<AnswerCase> = include_str!("../fixtures/answers.jsonl")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mut failures = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        let got = parse_choice(&c.raw);
        let want = Choice::try_from(c.expect.clone()).unwrap();
        if got != want {
            failures.push(format!("#{} {:?}: got {got}, want {want}", i + 1, c.raw));
        }
    }
    ensure!(
        failures.is_empty(),
        "answer parser: {}",
        failures.join("; ")
    );
    let replies: ReplyFixture =
        serde_json::from_str(include_str!("../fixtures/replies.json")).unwrap();
    for c in &replies.valid {
        ensure!(
            parse_reply(&c.reply, c.expected).is_ok(),
            "valid reply {:?} rejected: {:?}",
            c.name,
            parse_reply(&c.reply, c.expected).err()
        );
    }
    for c in &replies.malformed {
        ensure!(
            parse_reply(&c.reply, c.expected).is_err(),
            "malformed reply {:?} accepted",
            c.name
        );
    }
    Ok(format!(
        "{} parser cases; {} malformed replies rejected, {} valid accepted",
        cases.len(),
        replies.malformed.len(),
        replies.valid.len()
    ))
}
