//! Planted-cluster corpora and error landscapes for offline runs.
//!
//! Documents and paragraphs live at points of a latent unit torus. Every
//! token of a text names a cell of a `grid x grid` partition of the torus,
//! drawn around the text's latent point, so texts that are close on the torus
//! share tokens and embed close together under the token-hash embedder.
//! Clusters are groups of documents around a common latent center.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::budget::{BudgetLedger, BudgetMode, CostCategory, PriceTable};
use crate::corpus::{
    paragraph_id, Corpus, CorpusRecord, Document, Paragraph, RecordParagraph, DEFAULT_CATEGORIES,
};
use crate::embedding::{
    embed_texts, EmbedError, Embedder, Embedding, EmbeddingConfig, HashEmbedder,
};
use crate::engine::{Adapters, Engine, EngineError, MemorySink, Settings, StepRecord, Variant};
use crate::index::{build_abstract_index, AbstractIndex, IndexConfig, IndexError};
use crate::qa::TemplateGenerator;
use crate::testee::{ErrorLandscape, Region, SimulatedTestee};
use crate::util::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub docs_per_cluster: usize,
    pub paras_per_doc: usize,
    /// Cells per torus axis; the vocabulary has `grid * grid` tokens.
    pub grid: usize,
    pub tokens_per_paragraph: usize,
    /// Standard deviation (torus units) of document centers around their
    /// cluster center.
    pub cluster_spread: f64,
    /// Standard deviation of paragraphs around their document center.
    pub doc_spread: f64,
    /// Standard deviation of token draws around a text's point.
    pub token_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clusters: 20,
            docs_per_cluster: 10,
            paras_per_doc: 50,
            grid: 32,
            tokens_per_paragraph: 60,
            cluster_spread: 0.04,
            doc_spread: 0.03,
            token_spread: 0.03,
            seed: 0,
        }
    }
}

/// Latent position on the unit torus.
pub type Point = (f64, f64);

fn wrap(x: f64) -> f64 {
    x.rem_euclid(1.0)
}

/// Shortest distance on the unit torus.
pub fn torus_distance(a: Point, b: Point) -> f64 {
    let d = |x: f64, y: f64| {
        let d = (x - y).abs();
        d.min(1.0 - d)
    };
    d(a.0, b.0).hypot(d(a.1, b.1))
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub corpus: Corpus,
    pub records: Vec<CorpusRecord>,
    pub cluster_centers: Vec<Point>,
    /// Cluster of each paragraph, by paragraph index.
    pub para_cluster: Vec<usize>,
    pub para_points: Vec<Point>,
    /// Cluster of each document, by document index.
    pub doc_cluster: Vec<usize>,
}

pub fn cell_token(spec: &SyntheticSpec, p: Point) -> String {
    let g = spec.grid as f64;
    let i = ((wrap(p.0) * g) as usize).min(spec.grid - 1);
    let j = ((wrap(p.1) * g) as usize).min(spec.grid - 1);
    format!("g{i:02}x{j:02}")
}

/// `n` tokens drawn around `p`, space separated.
pub fn text_at<R: Rng>(spec: &SyntheticSpec, p: Point, n: usize, rng: &mut R) -> String {
    let noise = Normal::new(0.0, spec.token_spread.max(1e-12)).expect("finite spread");
    (0..n)
        .map(|_| cell_token(spec, (p.0 + noise.sample(rng), p.1 + noise.sample(rng))))
        .collect::<Vec<_>>()
        .join(" ")
}

fn jitter<R: Rng>(p: Point, sd: f64, rng: &mut R) -> Point {
    let n = Normal::new(0.0, sd.max(1e-12)).expect("finite spread");
    (wrap(p.0 + n.sample(rng)), wrap(p.1 + n.sample(rng)))
}

pub fn generate(spec: &SyntheticSpec) -> PlantedCorpus {
    let mut rng = rng_for(spec.seed, &["synthetic-corpus"]);
    let cluster_centers: Vec<Point> = (0..spec.clusters)
        .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
        .collect();
    let mut records = Vec::new();
    let mut entries = Vec::new();
    let mut points = Vec::new();
    for (c, &center) in cluster_centers.iter().enumerate() {
        let category = DEFAULT_CATEGORIES[c % DEFAULT_CATEGORIES.len()].to_string();
        for d in 0..spec.docs_per_cluster {
            let doc_id = format!("c{c:02}d{d:02}");
            let doc_center = jitter(center, spec.cluster_spread, &mut rng);
            let title = format!("Entry {c} {d}");
            let abstract_text = text_at(spec, doc_center, spec.tokens_per_paragraph, &mut rng);
            let mut paragraphs = Vec::new();
            let mut record_paras = Vec::new();
            for k in 0..spec.paras_per_doc {
                let p = jitter(doc_center, spec.doc_spread, &mut rng);
                let text = text_at(spec, p, spec.tokens_per_paragraph, &mut rng);
                let section = vec![format!("Part {k}")];
                let para_id = paragraph_id(&doc_id, k);
                points.push((para_id.clone(), c, p));
                paragraphs.push(Paragraph {
                    para_id,
                    doc_id: doc_id.clone(),
                    section_path: section.clone(),
                    text: text.clone(),
                    category: category.clone(),
                });
                record_paras.push(RecordParagraph {
                    section_path: section,
                    text,
                });
            }
            records.push(CorpusRecord {
                doc_id: doc_id.clone(),
                title: title.clone(),
                abstract_text: abstract_text.clone(),
                categories: vec![category.clone()],
                paragraphs: record_paras,
            });
            entries.push((
                Document {
                    doc_id,
                    title,
                    abstract_text,
                    categories: vec![category.clone()],
                    paragraph_ids: Vec::new(),
                },
                paragraphs,
            ));
        }
    }
    let corpus = Corpus::from_parts(entries);
    let mut para_cluster = vec![0; corpus.len()];
    let mut para_points = vec![(0.0, 0.0); corpus.len()];
    for (id, c, p) in points {
        let idx = corpus.para_idx(&id).expect("generated id").get();
        para_cluster[idx] = c;
        para_points[idx] = p;
    }
    let doc_cluster = corpus
        .docs()
        .iter()
        .map(|d| d.doc_id[1..3].parse().expect("generated doc id"))
        .collect();
    PlantedCorpus {
        corpus,
        records,
        cluster_centers,
        para_cluster,
        para_points,
        doc_cluster,
    }
}

/// Radius (cosine distance) such that a `coverage` fraction of `embeddings`
/// lies within it of `center`.
pub fn coverage_radius(center: &Embedding, embeddings: &[Embedding], coverage: f64) -> f64 {
    let mut d: Vec<f64> = embeddings.iter().map(|e| 1.0 - center.cosine(e)).collect();
    d.sort_by(f64::total_cmp);
    if d.is_empty() {
        return 0.0;
    }
    let k = ((coverage * d.len() as f64).round() as usize).clamp(1, d.len());
    d[k - 1]
}

/// Cosine threshold of a spherical cap holding `fraction` of the surface of
/// the unit sphere in `dim` dimensions.
///
/// The cosine to a fixed direction has density proportional to
/// `(1 - x^2)^((dim - 3) / 2)` on `[-1, 1]`; the quantile is found by
/// midpoint integration.
pub fn cap_cosine(dim: usize, fraction: f64) -> f64 {
    assert!(dim >= 2, "sphere dimension must be at least 2");
    let fraction = fraction.clamp(0.0, 1.0);
    let steps = 200_000;
    let h = 2.0 / steps as f64;
    let e = (dim as f64 - 3.0) / 2.0;
    let density: Vec<f64> = (0..steps)
        .map(|i| {
            let x = -1.0 + (i as f64 + 0.5) * h;
            (1.0 - x * x).powf(e)
        })
        .collect();
    let total: f64 = density.iter().sum();
    let mut upper = 0.0;
    for i in (0..steps).rev() {
        upper += density[i];
        if upper / total >= fraction {
            return -1.0 + i as f64 * h;
        }
    }
    -1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoverageOf {
    /// Fraction of the unit sphere's surface.
    Space,
    /// Fraction of the corpus paragraphs.
    Paragraphs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSpec {
    /// Size of the region, read according to `coverage_of`.
    pub coverage: f64,
    pub coverage_of: CoverageOf,
    pub error_prob: f64,
    pub base_error_prob: f64,
    /// Latent center of the region; a random cluster center when absent.
    pub center: Option<Point>,
    /// Tokens in the text whose embedding is the region center.
    pub center_tokens: usize,
    pub seed: u64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            coverage: 0.05,
            coverage_of: CoverageOf::Space,
            error_prob: 0.9,
            base_error_prob: 0.1,
            center: None,
            center_tokens: 400,
            seed: 0,
        }
    }
}

/// One error region around a latent point, sized to the requested coverage.
pub fn plant_region(
    planted: &PlantedCorpus,
    spec: &SyntheticSpec,
    plant: &PlantSpec,
    paragraph_embeddings: &[Embedding],
    embedder: &dyn Embedder,
    embed_cfg: &EmbeddingConfig,
) -> Result<ErrorLandscape, EmbedError> {
    let mut rng = rng_for(plant.seed, &["plant-region"]);
    let center = plant.center.unwrap_or_else(|| {
        let c = rng.random_range(0..planted.cluster_centers.len().max(1));
        planted.cluster_centers[c]
    });
    let text = text_at(spec, center, plant.center_tokens, &mut rng);
    let (mut v, _) = embed_texts(embedder, &[&text], embed_cfg)?;
    let center = v.remove(0);
    let radius = match plant.coverage_of {
        CoverageOf::Space => 1.0 - cap_cosine(center.dim(), plant.coverage),
        CoverageOf::Paragraphs => coverage_radius(&center, paragraph_embeddings, plant.coverage),
    };
    Ok(ErrorLandscape {
        regions: vec![Region {
            center,
            radius,
            error_prob: plant.error_prob,
        }],
        base_error_prob: plant.base_error_prob,
        seed: plant.seed,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// A planted corpus with its index and simulated testee, ready to search.
pub struct PlantedBench {
    pub spec: SyntheticSpec,
    pub planted: PlantedCorpus,
    pub embedder: HashEmbedder,
    pub index: AbstractIndex,
    pub testee: SimulatedTestee,
    /// Whether each paragraph lies inside the planted region.
    pub in_region: Vec<bool>,
}

impl PlantedBench {
    pub fn prepare(
        spec: &SyntheticSpec,
        plant: &PlantSpec,
        embed_cfg: &EmbeddingConfig,
        index_cfg: &IndexConfig,
    ) -> Result<Self, BenchError> {
        let planted = generate(spec);
        let embedder = HashEmbedder::new(embed_cfg.dimension);
        let texts: Vec<&str> = planted
            .corpus
            .paragraphs()
            .iter()
            .map(|p| p.text.as_str())
            .collect();
        let (vectors, _) = embed_texts(&embedder, &texts, embed_cfg)?;
        let landscape = plant_region(&planted, spec, plant, &vectors, &embedder, embed_cfg)?;
        let in_region = vectors
            .iter()
            .map(|v| landscape.regions[0].contains(v))
            .collect();
        let (index, _) =
            build_abstract_index(&planted.corpus, &embedder, embed_cfg, index_cfg, None)?;
        Ok(Self {
            spec: spec.clone(),
            planted,
            embedder,
            index,
            testee: SimulatedTestee::new(landscape, "simulated"),
            in_region,
        })
    }

    /// Run `steps` steps of `variant` under an api-calls budget that
    /// counts testee calls only.
    pub fn run(&self, settings: &Settings, steps: u64) -> Result<Vec<StepRecord>, BenchError> {
        let mut settings = settings.clone();
        settings.engine.max_steps = Some(steps);
        let per_step = (settings.retrieval.batch_size * settings.qa.target_total()) as f64;
        let ledger = BudgetLedger::new(
            BudgetMode::ApiCalls,
            per_step * steps as f64,
            vec![CostCategory::Testee],
            PriceTable::default(),
        );
        let generator = TemplateGenerator;
        let n_probe = settings.retrieval.n_probe;
        let engine = Engine::new(
            Adapters::with_index(
                &self.planted.corpus,
                &self.index,
                n_probe,
                &self.embedder,
                &generator,
                &self.testee,
            ),
            settings,
        );
        let mut state = engine.initial_state(ledger);
        let mut sink = MemorySink::default();
        engine.run(&mut state, &mut sink)?;
        Ok(sink.outputs.into_iter().map(|o| o.record).collect())
    }
}

/// Settings for one planted-benchmark run.
pub fn bench_settings(variant: Variant, seed: u64, embed_cfg: &EmbeddingConfig) -> Settings {
    let mut s = Settings::default();
    s.engine.variant = variant;
    s.engine.seed = seed;
    s.embedding = embed_cfg.clone();
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            clusters: 4,
            docs_per_cluster: 3,
            paras_per_doc: 5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn sizes_and_labels() {
        let p = generate(&small());
        assert_eq!(p.corpus.len(), 60);
        assert_eq!(p.corpus.docs().len(), 12);
        assert_eq!(p.records.len(), 12);
        assert!(p.corpus.paragraphs().iter().all(|x| x.text.len() >= 200));
        for (i, para) in p.corpus.paragraphs().iter().enumerate() {
            let c: usize = para.doc_id[1..3].parse().unwrap();
            assert_eq!(p.para_cluster[i], c);
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small());
        let b = generate(&small());
        assert_eq!(a.corpus.paragraphs(), b.corpus.paragraphs());
    }

    #[test]
    fn cap_of_circle_and_hemisphere() {
        // On the circle a cap of half-angle a covers a / pi.
        let c = cap_cosine(2, 0.25);
        assert!((c - (std::f64::consts::PI / 4.0).cos()).abs() < 1e-3, "{c}");
        for d in [3, 16, 64] {
            assert!(cap_cosine(d, 0.5).abs() < 1e-4);
        }
        // On S^2 cap area is (1 - cos) / 2.
        assert!((cap_cosine(3, 0.05) - 0.9).abs() < 1e-4);
    }

    #[test]
    fn torus_wraps() {
        assert!((torus_distance((0.05, 0.5), (0.95, 0.5)) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn coverage_radius_counts() {
        let spec = small();
        let p = generate(&spec);
        let emb = HashEmbedder::new(64);
        let cfg = EmbeddingConfig::default();
        let texts: Vec<&str> = p
            .corpus
            .paragraphs()
            .iter()
            .map(|x| x.text.as_str())
            .collect();
        let (vectors, _) = embed_texts(&emb, &texts, &cfg).unwrap();
        let plant = PlantSpec {
            coverage: 0.1,
            coverage_of: CoverageOf::Paragraphs,
            ..PlantSpec::default()
        };
        let land = plant_region(&p, &spec, &plant, &vectors, &emb, &cfg).unwrap();
        let inside = vectors
            .iter()
            .filter(|v| land.regions[0].contains(v))
            .count();
        assert!(inside >= 6, "{inside}");
    }
}
