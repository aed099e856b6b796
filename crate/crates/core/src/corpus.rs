//! Knowledge base: documents, paragraphs, categories, and the removal view
//! that keeps admitted source errors from being retrieved again.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use fixedbitset::FixedBitSet;
use log::warn;
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::util::{rng_for, sha256_hex};

/// Minimum paragraph length (characters) kept at ingestion.
pub const DEFAULT_MIN_PARA_LEN: usize = 200;

/// Category assigned to paragraphs whose document carries no category.
pub const UNCATEGORIZED: &str = "uncategorized";

/// Wikipedia's 13 top-level content categories, the default initial-batch strata.
pub const DEFAULT_CATEGORIES: [&str; 13] = [
    "Culture and the arts",
    "General reference",
    "Geography and places",
    "Health and fitness",
    "History and events",
    "Human activities",
    "Mathematics and logic",
    "Natural and physical sciences",
    "People and self",
    "Philosophy and thinking",
    "Religion and belief systems",
    "Society and social sciences",
    "Technology and applied sciences",
];

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus store is corrupt at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("unknown paragraph id {0:?}")]
    UnknownParagraph(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParaIdx(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DocIdx(pub u32);

impl ParaIdx {
    pub fn get(self) -> usize {
        self.0 as usize
    }
}

impl DocIdx {
    pub fn get(self) -> usize {
        self.0 as usize
    }
}

/// One input line of the corpus dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub doc_id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    #[serde(default)]
    pub categories: Vec<String>,
    pub paragraphs: Vec<RecordParagraph>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordParagraph {
    #[serde(default)]
    pub section_path: Vec<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub categories: Vec<String>,
    pub paragraph_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paragraph {
    pub para_id: String,
    pub doc_id: String,
    pub section_path: Vec<String>,
    pub text: String,
    pub category: String,
}

/// Normalized on-disk line: a document with its kept paragraphs.
#[derive(Serialize, Deserialize)]
struct StoredDocument {
    doc_id: String,
    title: String,
    #[serde(rename = "abstract")]
    abstract_text: String,
    categories: Vec<String>,
    paragraphs: Vec<StoredParagraph>,
}

#[derive(Serialize, Deserialize)]
struct StoredParagraph {
    para_id: String,
    section_path: Vec<String>,
    text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub docs: usize,
    pub paragraphs: usize,
    pub rejected_docs: usize,
    pub rejected_paragraphs: usize,
    pub malformed_records: usize,
}

/// Paragraph ids are the document id plus the zero-padded position of the
/// section in the source record, so they survive threshold changes.
pub fn paragraph_id(doc_id: &str, ordinal: usize) -> String {
    format!("{doc_id}#{ordinal:04}")
}

/// Immutable knowledge base. Documents are ordered by `doc_id` and paragraphs
/// by `para_id`, so index order is id order.
#[derive(Debug, Clone)]
pub struct Corpus {
    docs: Vec<Document>,
    paragraphs: Vec<Paragraph>,
    doc_lookup: HashMap<String, DocIdx>,
    para_lookup: HashMap<String, ParaIdx>,
    doc_paragraphs: Vec<Vec<ParaIdx>>,
    para_doc: Vec<DocIdx>,
    categories: BTreeMap<String, Vec<ParaIdx>>,
}

impl Corpus {
    /// Assemble a corpus from documents and their paragraphs.
    pub fn from_parts(mut entries: Vec<(Document, Vec<Paragraph>)>) -> Self {
        entries.sort_by(|a, b| a.0.doc_id.cmp(&b.0.doc_id));
        let mut all: Vec<(Paragraph, usize)> = Vec::new();
        let mut docs = Vec::with_capacity(entries.len());
        for (di, (doc, paras)) in entries.into_iter().enumerate() {
            all.extend(paras.into_iter().map(|p| (p, di)));
            docs.push(doc);
        }
        all.sort_by(|a, b| a.0.para_id.cmp(&b.0.para_id));

        let mut doc_paragraphs = vec![Vec::new(); docs.len()];
        let mut para_doc = Vec::with_capacity(all.len());
        let mut paragraphs = Vec::with_capacity(all.len());
        let mut para_lookup = HashMap::with_capacity(all.len());
        let mut categories: BTreeMap<String, Vec<ParaIdx>> = BTreeMap::new();
        for (pi, (para, di)) in all.into_iter().enumerate() {
            let idx = ParaIdx(pi as u32);
            doc_paragraphs[di].push(idx);
            para_doc.push(DocIdx(di as u32));
            para_lookup.insert(para.para_id.clone(), idx);
            categories
                .entry(para.category.clone())
                .or_default()
                .push(idx);
            paragraphs.push(para);
        }
        for (di, doc) in docs.iter_mut().enumerate() {
            doc.paragraph_ids = doc_paragraphs[di]
                .iter()
                .map(|p| paragraphs[p.get()].para_id.clone())
                .collect();
        }
        let doc_lookup = docs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.doc_id.clone(), DocIdx(i as u32)))
            .collect();
        Self {
            docs,
            paragraphs,
            doc_lookup,
            para_lookup,
            doc_paragraphs,
            para_doc,
            categories,
        }
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn paragraphs(&self) -> &[Paragraph] {
        &self.paragraphs
    }

    pub fn doc(&self, idx: DocIdx) -> &Document {
        &self.docs[idx.get()]
    }

    pub fn paragraph(&self, idx: ParaIdx) -> &Paragraph {
        &self.paragraphs[idx.get()]
    }

    pub fn doc_idx(&self, doc_id: &str) -> Option<DocIdx> {
        self.doc_lookup.get(doc_id).copied()
    }

    pub fn para_idx(&self, para_id: &str) -> Option<ParaIdx> {
        self.para_lookup.get(para_id).copied()
    }

    pub fn doc_paragraphs(&self, doc: DocIdx) -> &[ParaIdx] {
        &self.doc_paragraphs[doc.get()]
    }

    pub fn doc_of(&self, para: ParaIdx) -> DocIdx {
        self.para_doc[para.get()]
    }

    pub fn len(&self) -> usize {
        self.paragraphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paragraphs.is_empty()
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.categories.keys().map(String::as_str)
    }

    pub fn category_paragraphs(&self, category: &str) -> &[ParaIdx] {
        self.categories.get(category).map_or(&[], Vec::as_slice)
    }

    /// Title line handed to the question generator, e.g. `James B. Stump/Career`.
    pub fn title_line(&self, para: ParaIdx) -> String {
        let p = self.paragraph(para);
        let doc = self.doc(self.doc_of(para));
        let mut line = doc.title.clone();
        for section in &p.section_path {
            line.push('/');
            line.push_str(section);
        }
        line
    }

    /// Text embedded for the abstract-level index: title and abstract.
    pub fn abstract_text(&self, doc: DocIdx) -> String {
        let d = self.doc(doc);
        format!("{}\n{}", d.title, d.abstract_text)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (di, doc) in self.docs.iter().enumerate() {
            let stored = StoredDocument {
                doc_id: doc.doc_id.clone(),
                title: doc.title.clone(),
                abstract_text: doc.abstract_text.clone(),
                categories: doc.categories.clone(),
                paragraphs: self.doc_paragraphs[di]
                    .iter()
                    .map(|p| {
                        let p = self.paragraph(*p);
                        StoredParagraph {
                            para_id: p.para_id.clone(),
                            section_path: p.section_path.clone(),
                            text: p.text.clone(),
                        }
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut out, &stored)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let io_err = |source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::create(path).map_err(io_err)?;
        self.write_jsonl(BufWriter::new(file)).map_err(io_err)
    }

    /// Load a corpus previously written by [`Corpus::save`].
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let file = File::open(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| CorpusError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let stored: StoredDocument =
                serde_json::from_str(&line).map_err(|e| CorpusError::Corrupt {
                    line: n + 1,
                    reason: e.to_string(),
                })?;
            let category = top_category(&stored.categories);
            let paragraphs = stored
                .paragraphs
                .into_iter()
                .map(|p| Paragraph {
                    para_id: p.para_id,
                    doc_id: stored.doc_id.clone(),
                    section_path: p.section_path,
                    text: p.text,
                    category: category.clone(),
                })
                .collect();
            let doc = Document {
                doc_id: stored.doc_id,
                title: stored.title,
                abstract_text: stored.abstract_text,
                categories: stored.categories,
                paragraph_ids: Vec::new(),
            };
            entries.push((doc, paragraphs));
        }
        Ok(Self::from_parts(entries))
    }

    /// SHA-256 of the normalized serialization.
    pub fn fingerprint(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        sha256_hex(&buf)
    }
}

fn top_category(categories: &[String]) -> String {
    categories
        .first()
        .filter(|c| !c.trim().is_empty())
        .cloned()
        .unwrap_or_else(|| UNCATEGORIZED.to_string())
}

/// Ingest line-delimited corpus records. Malformed lines and rejected
/// documents are counted, never fatal.
pub fn ingest_reader<R: BufRead>(
    reader: R,
    min_para_len: usize,
) -> std::io::Result<(Corpus, IngestStats)> {
    let mut stats = IngestStats::default();
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                warn!("line {}: malformed record skipped: {e}", n + 1);
                stats.malformed_records += 1;
                continue;
            }
        };
        if record.doc_id.trim().is_empty() {
            warn!("line {}: empty doc_id, record skipped", n + 1);
            stats.malformed_records += 1;
            continue;
        }
        if record.abstract_text.trim().is_empty() {
            warn!("document {}: empty abstract, rejected", record.doc_id);
            stats.rejected_docs += 1;
            stats.rejected_paragraphs += record.paragraphs.len();
            continue;
        }
        if !seen.insert(record.doc_id.clone()) {
            warn!("document {}: duplicate doc_id, rejected", record.doc_id);
            stats.rejected_docs += 1;
            stats.rejected_paragraphs += record.paragraphs.len();
            continue;
        }
        let category = top_category(&record.categories);
        let mut paragraphs = Vec::new();
        for (ordinal, p) in record.paragraphs.into_iter().enumerate() {
            if p.text.trim().chars().count() < min_para_len.max(1) {
                stats.rejected_paragraphs += 1;
                continue;
            }
            paragraphs.push(Paragraph {
                para_id: paragraph_id(&record.doc_id, ordinal),
                doc_id: record.doc_id.clone(),
                section_path: p.section_path,
                text: p.text,
                category: category.clone(),
            });
        }
        if paragraphs.is_empty() {
            warn!(
                "document {}: no paragraph survived, rejected",
                record.doc_id
            );
            stats.rejected_docs += 1;
            continue;
        }
        stats.docs += 1;
        stats.paragraphs += paragraphs.len();
        entries.push((
            Document {
                doc_id: record.doc_id,
                title: record.title,
                abstract_text: record.abstract_text,
                categories: record.categories,
                paragraph_ids: Vec::new(),
            },
            paragraphs,
        ));
    }
    Ok((Corpus::from_parts(entries), stats))
}

pub fn ingest_corpus(
    path: &Path,
    min_para_len: usize,
) -> Result<(Corpus, IngestStats), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    ingest_reader(BufReader::new(file), min_para_len).map_err(io_err)
}

/// The active part of the knowledge base. Removal only ever grows.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBaseView {
    removed: FixedBitSet,
    removed_count: usize,
}

impl KnowledgeBaseView {
    pub fn new(corpus: &Corpus) -> Self {
        Self {
            removed: FixedBitSet::with_capacity(corpus.len()),
            removed_count: 0,
        }
    }

    pub fn is_active(&self, para: ParaIdx) -> bool {
        !self.removed.contains(para.get())
    }

    pub fn active_count(&self) -> usize {
        self.removed.len() - self.removed_count
    }

    pub fn removed_count(&self) -> usize {
        self.removed_count
    }

    /// Deactivate paragraphs; already-removed ids are no-ops. Returns how many
    /// paragraphs became inactive.
    pub fn remove(&mut self, ids: &[ParaIdx]) -> usize {
        let mut newly = 0;
        for id in ids {
            if !self.removed.put(id.get()) {
                newly += 1;
            }
        }
        self.removed_count += newly;
        newly
    }

    /// Removal by stable id; unknown ids are rejected before anything changes.
    pub fn remove_ids(&mut self, corpus: &Corpus, ids: &[&str]) -> Result<usize, CorpusError> {
        let idx = ids
            .iter()
            .map(|id| {
                corpus
                    .para_idx(id)
                    .ok_or_else(|| CorpusError::UnknownParagraph((*id).to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.remove(&idx))
    }

    pub fn removed(&self) -> impl Iterator<Item = ParaIdx> + '_ {
        self.removed.ones().map(|i| ParaIdx(i as u32))
    }
}

/// Output of [`sample_uniform_by_category`].
#[derive(Debug, Clone, PartialEq)]
pub struct CategorySample {
    pub paragraphs: Vec<ParaIdx>,
    pub per_category: Vec<(String, usize)>,
    /// Fewer than `n` active paragraphs were available.
    pub short: bool,
}

/// Draw `n` distinct active paragraphs spread evenly over `categories`.
///
/// Quotas differ by at most one; categories without enough active paragraphs
/// pass their shortfall on to the rest. An empty category list means every
/// category present in the corpus.
pub fn sample_uniform_by_category(
    corpus: &Corpus,
    view: &KnowledgeBaseView,
    n: usize,
    categories: &[String],
    seed: u64,
) -> CategorySample {
    let mut rng = rng_for(seed, &["category-uniform"]);
    let names: Vec<String> = if categories.is_empty() {
        corpus.categories().map(str::to_string).collect()
    } else {
        let mut seen = HashSet::new();
        categories
            .iter()
            .filter(|c| seen.insert(c.as_str()))
            .cloned()
            .collect()
    };
    let pools: Vec<Vec<ParaIdx>> = names
        .iter()
        .map(|c| {
            corpus
                .category_paragraphs(c)
                .iter()
                .copied()
                .filter(|p| view.is_active(*p))
                .collect()
        })
        .collect();

    let mut quota = vec![0usize; pools.len()];
    let mut remaining = n;
    loop {
        let mut open: Vec<usize> = (0..pools.len())
            .filter(|&i| quota[i] < pools[i].len())
            .collect();
        if remaining == 0 || open.is_empty() {
            break;
        }
        open.shuffle(&mut rng);
        let base = remaining / open.len();
        let extra = remaining % open.len();
        for (rank, &i) in open.iter().enumerate() {
            let want = base + usize::from(rank < extra);
            let give = want.min(pools[i].len() - quota[i]);
            quota[i] += give;
            remaining -= give;
        }
    }

    let mut paragraphs = Vec::with_capacity(n);
    let mut per_category = Vec::with_capacity(names.len());
    for ((name, pool), q) in names.iter().zip(&pools).zip(&quota) {
        let picked = index::sample(&mut rng, pool.len(), *q);
        paragraphs.extend(picked.into_iter().map(|i| pool[i]));
        per_category.push((name.clone(), *q));
    }
    if remaining > 0 {
        warn!(
            "only {} active paragraphs available for a sample of {n}",
            n - remaining
        );
    }
    CategorySample {
        paragraphs,
        per_category,
        short: remaining > 0,
    }
}

/// Uniformly draw up to `n` distinct active paragraphs not in `exclude`.
pub fn sample_uniform_active<R: Rng>(
    corpus: &Corpus,
    view: &KnowledgeBaseView,
    exclude: &FixedBitSet,
    n: usize,
    rng: &mut R,
) -> Vec<ParaIdx> {
    let total = corpus.len();
    if n == 0 || total == 0 {
        return Vec::new();
    }
    let eligible = |i: usize| view.is_active(ParaIdx(i as u32)) && !exclude.contains(i);
    // Rejection sampling is cheap while most of the corpus is eligible.
    let mut picked = Vec::with_capacity(n);
    let mut taken = FixedBitSet::with_capacity(total);
    let mut attempts = 0;
    while picked.len() < n && attempts < 8 * n + 64 {
        attempts += 1;
        let i = rng.random_range(0..total);
        if eligible(i) && !taken.put(i) {
            picked.push(ParaIdx(i as u32));
        }
    }
    if picked.len() < n {
        let rest: Vec<usize> = (0..total)
            .filter(|&i| eligible(i) && !taken.contains(i))
            .collect();
        let need = (n - picked.len()).min(rest.len());
        picked.extend(
            index::sample(rng, rest.len(), need)
                .into_iter()
                .map(|j| ParaIdx(rest[j] as u32)),
        );
    }
    picked
}
