//! Abstract-level inverted-file index.
//!
//! A coarse quantizer (spherical k-means over abstract embeddings) partitions
//! documents into inverted lists; a query scans the `n_probe` lists whose
//! centroids are most similar to it. Entries keep full vectors, so a query
//! probing every list is exact.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::budget::CallCharge;
use crate::corpus::{Corpus, DocIdx};
use crate::embedding::{embed_texts, EmbedError, Embedder, Embedding, EmbeddingConfig};
use crate::util::{rng_for, sha256_hex};

const MAGIC: &[u8; 8] = b"SEAIVF\0\0";
const FORMAT_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "abstract.ivf";
pub const MANIFEST_FILE: &str = "manifest.txt";
const JOURNAL_FILE: &str = "abstracts.partial";

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("index i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid index file: {0}")]
    Format(String),
    #[error("n_centroids must be in 1..={docs}, got {requested}")]
    Centroids { requested: usize, docs: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IndexError + '_ {
    move |source| IndexError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub n_centroids: usize,
    pub n_probe: usize,
    pub iterations: usize,
    /// Upper bound on abstracts used to fit the quantizer.
    pub max_train: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            n_centroids: 16,
            n_probe: 4,
            iterations: 10,
            max_train: 100_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub doc_id: String,
    pub vector: Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbstractIndex {
    dim: usize,
    centroids: Vec<Embedding>,
    lists: Vec<Vec<IndexEntry>>,
    provider: String,
    seed: u64,
}

/// Rank of `sims` descending with index ascending on ties.
fn ranked(sims: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

fn nearest(centroids: &[Embedding], v: &Embedding) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let s = c.cosine(v);
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

/// Spherical k-means with a seeded random initialization.
pub fn fit_centroids(
    vectors: &[Embedding],
    k: usize,
    iterations: usize,
    seed: u64,
) -> Vec<Embedding> {
    assert!(k >= 1 && k <= vectors.len());
    let mut rng = rng_for(seed, &["kmeans-init"]);
    let mut init: Vec<usize> = index::sample(&mut rng, vectors.len(), k).into_vec();
    init.sort_unstable();
    let mut centroids: Vec<Embedding> = init.iter().map(|&i| vectors[i].clone()).collect();
    let dim = vectors[0].dim();
    for _ in 0..iterations {
        let assign: Vec<(usize, f64)> = vectors.iter().map(|v| nearest(&centroids, v)).collect();
        let mut sums = vec![vec![0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, (c, _)) in vectors.iter().zip(&assign) {
            counts[*c] += 1;
            for (s, x) in sums[*c].iter_mut().zip(v.values()) {
                *s += f64::from(*x);
            }
        }
        // Empty or degenerate clusters take the worst-served points.
        let mut worst: Vec<usize> = (0..vectors.len()).collect();
        worst.sort_by(|&a, &b| assign[a].1.total_cmp(&assign[b].1).then(a.cmp(&b)));
        let mut donors = worst.into_iter();
        for c in 0..k {
            let mean = Embedding::new(sums[c].iter().map(|s| *s as f32).collect());
            centroids[c] = match mean {
                Ok(m) if counts[c] > 0 => m,
                _ => vectors[donors.next().unwrap_or(c % vectors.len())].clone(),
            };
        }
    }
    centroids
}

impl AbstractIndex {
    /// Build from already-embedded abstracts.
    pub fn from_vectors(
        entries: Vec<(String, Embedding)>,
        n_centroids: usize,
        cfg: &IndexConfig,
        provider: &str,
    ) -> Result<Self, IndexError> {
        if n_centroids == 0 || n_centroids > entries.len() {
            return Err(IndexError::Centroids {
                requested: n_centroids,
                docs: entries.len(),
            });
        }
        let dim = entries[0].1.dim();
        let train: Vec<Embedding> = if entries.len() > cfg.max_train {
            let mut rng = rng_for(cfg.seed, &["kmeans-sample"]);
            let mut pick = index::sample(&mut rng, entries.len(), cfg.max_train).into_vec();
            pick.sort_unstable();
            pick.into_iter().map(|i| entries[i].1.clone()).collect()
        } else {
            entries.iter().map(|e| e.1.clone()).collect()
        };
        let centroids = fit_centroids(&train, n_centroids, cfg.iterations, cfg.seed);
        let mut lists = vec![Vec::new(); n_centroids];
        for (doc_id, vector) in entries {
            let (c, _) = nearest(&centroids, &vector);
            lists[c].push(IndexEntry { doc_id, vector });
        }
        for list in &mut lists {
            list.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        }
        Ok(Self {
            dim,
            centroids,
            lists,
            provider: provider.to_string(),
            seed: cfg.seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_centroids(&self) -> usize {
        self.centroids.len()
    }

    pub fn provider(&self) -> &str {
        &self.provider
    }

    pub fn lists(&self) -> &[Vec<IndexEntry>] {
        &self.lists
    }

    pub fn centroids(&self) -> &[Embedding] {
        &self.centroids
    }

    pub fn len(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-`k` documents by cosine similarity among the `n_probe` nearest
    /// lists, sorted by similarity descending then `doc_id` ascending.
    pub fn query(&self, q: &Embedding, k: usize, n_probe: usize) -> Vec<(String, f64)> {
        self.query_filtered(q, k, n_probe, |_| true)
    }

    /// [`query`](Self::query) restricted to documents accepted by `keep`.
    pub fn query_filtered(
        &self,
        q: &Embedding,
        k: usize,
        n_probe: usize,
        keep: impl Fn(&str) -> bool,
    ) -> Vec<(String, f64)> {
        if self.is_empty() || k == 0 {
            return Vec::new();
        }
        let sims: Vec<f64> = self.centroids.iter().map(|c| c.cosine(q)).collect();
        let probes = n_probe.clamp(1, self.centroids.len());
        let mut hits: Vec<(&str, f64)> = ranked(&sims)
            .into_iter()
            .take(probes)
            .flat_map(|c| self.lists[c].iter())
            .filter(|e| keep(&e.doc_id))
            .map(|e| (e.doc_id.as_str(), e.vector.cosine(q)))
            .collect();
        let cmp = |a: &(&str, f64), b: &(&str, f64)| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0));
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, cmp);
            hits.truncate(k);
        }
        hits.sort_by(cmp);
        hits.into_iter().map(|(d, s)| (d.to_string(), s)).collect()
    }

    fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for v in [FORMAT_VERSION, self.dim as u32, self.centroids.len() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        write_bytes(&mut w, self.provider.as_bytes())?;
        for c in &self.centroids {
            write_vector(&mut w, c)?;
        }
        for list in &self.lists {
            w.write_all(&(list.len() as u32).to_le_bytes())?;
            for e in list {
                write_bytes(&mut w, e.doc_id.as_bytes())?;
                write_vector(&mut w, &e.vector)?;
            }
        }
        w.flush()
    }

    fn read_from<R: Read>(mut r: R) -> Result<Self, IndexError> {
        let fmt = |e: std::io::Error| IndexError::Format(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(IndexError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r).map_err(fmt)?;
        if version != FORMAT_VERSION {
            return Err(IndexError::Format(format!("unsupported version {version}")));
        }
        let dim = read_u32(&mut r).map_err(fmt)? as usize;
        let n_centroids = read_u32(&mut r).map_err(fmt)? as usize;
        let mut seed = [0u8; 8];
        r.read_exact(&mut seed).map_err(fmt)?;
        let provider = String::from_utf8(read_bytes(&mut r).map_err(fmt)?)
            .map_err(|e| IndexError::Format(e.to_string()))?;
        let mut centroids = Vec::with_capacity(n_centroids);
        for _ in 0..n_centroids {
            centroids.push(read_vector(&mut r, dim)?);
        }
        let mut lists = Vec::with_capacity(n_centroids);
        for _ in 0..n_centroids {
            let n = read_u32(&mut r).map_err(fmt)? as usize;
            let mut list = Vec::with_capacity(n);
            for _ in 0..n {
                let doc_id = String::from_utf8(read_bytes(&mut r).map_err(fmt)?)
                    .map_err(|e| IndexError::Format(e.to_string()))?;
                list.push(IndexEntry {
                    doc_id,
                    vector: read_vector(&mut r, dim)?,
                });
            }
            lists.push(list);
        }
        Ok(Self {
            dim,
            centroids,
            lists,
            provider,
            seed: u64::from_le_bytes(seed),
        })
    }

    /// Write `abstract.ivf` and `manifest.txt` into `dir`; returns the
    /// index fingerprint (SHA-256 of the binary file).
    pub fn save(&self, dir: &Path) -> Result<String, IndexError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        let path = dir.join(INDEX_FILE);
        fs::write(&path, &buf).map_err(io_err(&path))?;
        let fingerprint = sha256_hex(&buf);
        let manifest = format!(
            "format_version = {FORMAT_VERSION}\ndimension = {}\nn_centroids = {}\ndocuments = {}\nprovider = {}\nseed = {}\nindex_sha256 = {fingerprint}\n",
            self.dim,
            self.centroids.len(),
            self.len(),
            self.provider,
            self.seed,
        );
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, manifest).map_err(io_err(&mpath))?;
        Ok(fingerprint)
    }

    /// Load an index and its fingerprint from `dir`.
    pub fn load(dir: &Path) -> Result<(Self, String), IndexError> {
        let path = dir.join(INDEX_FILE);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let index = Self::read_from(bytes.as_slice())?;
        Ok((index, sha256_hex(&bytes)))
    }
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)
}

fn write_vector<W: Write>(w: &mut W, v: &Embedding) -> std::io::Result<()> {
    for x in v.values() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> std::io::Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_vector<R: Read>(r: &mut R, dim: usize) -> Result<Embedding, IndexError> {
    let mut raw = vec![0u8; dim * 4];
    r.read_exact(&mut raw)
        .map_err(|e| IndexError::Format(e.to_string()))?;
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Embedding::new(values).map_err(|e| IndexError::Format(e.to_string()))
}

/// Abstract embeddings computed so far, appended batch by batch so an
/// interrupted build resumes where it stopped.
struct Journal {
    path: PathBuf,
    dim: usize,
}

impl Journal {
    fn read(&self) -> Result<Vec<Embedding>, IndexError> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&self.path)(e)),
        };
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(io_err(&self.path))?;
        // A torn tail from a crash is dropped.
        let whole = bytes.len() / (self.dim * 4);
        let mut out = Vec::with_capacity(whole);
        let mut r = &bytes[..whole * self.dim * 4];
        for _ in 0..whole {
            out.push(read_vector(&mut r, self.dim)?);
        }
        Ok(out)
    }

    fn append(&self, done: usize, vectors: &[Embedding]) -> Result<(), IndexError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io_err(&self.path))?;
        file.set_len((done * self.dim * 4) as u64)
            .map_err(io_err(&self.path))?;
        let mut w = BufWriter::new(file);
        for v in vectors {
            write_vector(&mut w, v).map_err(io_err(&self.path))?;
        }
        w.flush().map_err(io_err(&self.path))
    }
}

/// Embed every document's title and abstract and fit the index.
///
/// With `work_dir`, embedded batches are journaled so a failed provider call
/// can be resumed without re-embedding finished batches.
pub fn build_abstract_index(
    corpus: &Corpus,
    embedder: &dyn Embedder,
    embed_cfg: &EmbeddingConfig,
    cfg: &IndexConfig,
    work_dir: Option<&Path>,
) -> Result<(AbstractIndex, Vec<CallCharge>), IndexError> {
    let docs = corpus.docs().len();
    if cfg.n_centroids == 0 || cfg.n_centroids > docs {
        return Err(IndexError::Centroids {
            requested: cfg.n_centroids,
            docs,
        });
    }
    let journal = work_dir.map(|dir| Journal {
        path: dir.join(JOURNAL_FILE),
        dim: embedder.dimension(),
    });
    let mut vectors = match &journal {
        Some(j) => {
            let mut v = j.read()?;
            v.truncate(docs);
            v
        }
        None => Vec::new(),
    };
    let mut charges = Vec::new();
    let batch = embed_cfg.batch_size.max(1) * embed_cfg.max_in_flight.max(1);
    while vectors.len() < docs {
        let end = (vectors.len() + batch).min(docs);
        let texts: Vec<String> = (vectors.len()..end)
            .map(|i| corpus.abstract_text(DocIdx(i as u32)))
            .collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let (v, c) = embed_texts(embedder, &refs, embed_cfg)?;
        if let Some(j) = &journal {
            j.append(vectors.len(), &v)?;
        }
        vectors.extend(v);
        charges.extend(c);
    }
    let entries = corpus
        .docs()
        .iter()
        .map(|d| d.doc_id.clone())
        .zip(vectors)
        .collect();
    let index =
        AbstractIndex::from_vectors(entries, cfg.n_centroids, cfg, &embedder.fingerprint())?;
    if let Some(j) = &journal {
        let _ = fs::remove_file(&j.path);
    }
    Ok((index, charges))
}
