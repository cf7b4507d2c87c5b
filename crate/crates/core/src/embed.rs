//! Fixed text embeddings and long-input handling.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{l2_norm, Scalar};
use crate::seed::hash_str;

pub const DEFAULT_DIM: usize = 256;
pub const DEFAULT_CHUNK: usize = 512;

/// Signed feature hashing: each token adds ±1 at `hash mod dim`, the sign
/// taken from the top hash bit. The sum is L2-normalized unless it is zero.
pub fn hash_embed<T: Scalar>(tokens: &[String], dim: usize, seed: u64) -> Vec<T> {
    assert!(dim >= 1, "embedding dimension must be positive");
    let mut v = vec![T::zero(); dim];
    for token in tokens {
        let h = hash_str(token, seed);
        let idx = (h % dim as u64) as usize;
        if h >> 63 == 1 {
            v[idx] = v[idx] - T::one();
        } else {
            v[idx] = v[idx] + T::one();
        }
    }
    normalize(&mut v);
    v
}

fn normalize<T: Scalar>(v: &mut [T]) {
    let norm = l2_norm(v);
    if norm > T::zero() {
        v.iter_mut().for_each(|x| *x = *x / norm);
    }
}

/// Consecutive non-overlapping chunks; the last may be short.
pub fn chunk_tokens(tokens: &[String], chunk_size: usize) -> Vec<Vec<String>> {
    assert!(chunk_size >= 1, "chunk size must be positive");
    tokens.chunks(chunk_size).map(<[String]>::to_vec).collect()
}

/// Elementwise maximum.
pub fn pool_max<T: Scalar>(vectors: &[Vec<T>]) -> Result<Vec<T>> {
    let (first, rest) = vectors.split_first().ok_or(Error::NothingToPool)?;
    let mut out = first.clone();
    for v in rest {
        if v.len() != out.len() {
            return Err(Error::DimensionMismatch {
                expected: out.len(),
                actual: v.len(),
            });
        }
        for (o, &x) in out.iter_mut().zip(v) {
            if x > *o {
                *o = x;
            }
        }
    }
    Ok(out)
}

/// Contiguous n-grams of length `lo..=hi`, joined by single spaces.
pub fn ngrams(tokens: &[String], lo: usize, hi: usize) -> Vec<String> {
    let mut out = Vec::new();
    for n in lo.max(1)..=hi {
        out.extend(tokens.windows(n).map(|w| w.join(" ")));
    }
    out
}

/// Fitted TF-IDF vocabulary. Terms are ordered by descending document
/// frequency, ties broken lexicographically; that order is the vector layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfVocabulary {
    pub ngram_range: (usize, usize),
    pub terms: Vec<String>,
    pub doc_freq: Vec<usize>,
    pub idf: Vec<f64>,
    pub num_docs: usize,
    index: HashMap<String, usize>,
}

impl TfidfVocabulary {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn position(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn doc_freq_of(&self, term: &str) -> Option<usize> {
        self.position(term).map(|i| self.doc_freq[i])
    }

    pub fn idf_of(&self, term: &str) -> Option<f64> {
        self.position(term).map(|i| self.idf[i])
    }
}

/// Keeps the `vocab_size` n-grams with the highest document frequency and
/// uses the smoothed idf `ln((1 + |D|) / (1 + df)) + 1`.
pub fn tfidf_fit(
    corpus: &[Vec<String>],
    ngram_range: (usize, usize),
    vocab_size: usize,
) -> Result<TfidfVocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut df: HashMap<String, usize> = HashMap::new();
    for doc in corpus {
        let mut grams = ngrams(doc, ngram_range.0, ngram_range.1);
        grams.sort_unstable();
        grams.dedup();
        for g in grams {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = df.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(vocab_size);
    let n = corpus.len() as f64;
    let idf = ranked
        .iter()
        .map(|(_, d)| ((1.0 + n) / (1.0 + *d as f64)).ln() + 1.0)
        .collect();
    let doc_freq = ranked.iter().map(|(_, d)| *d).collect();
    let terms: Vec<String> = ranked.into_iter().map(|(t, _)| t).collect();
    let index = terms.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    Ok(TfidfVocabulary {
        ngram_range,
        terms,
        doc_freq,
        idf,
        num_docs: corpus.len(),
        index,
    })
}

/// Raw term counts times idf, L2-normalized. Unknown n-grams are ignored.
pub fn tfidf_embed<T: Scalar>(tokens: &[String], vocab: &TfidfVocabulary) -> Vec<T> {
    let mut counts = vec![0usize; vocab.len()];
    for g in ngrams(tokens, vocab.ngram_range.0, vocab.ngram_range.1) {
        if let Some(i) = vocab.position(&g) {
            counts[i] += 1;
        }
    }
    let mut v: Vec<T> = counts
        .iter()
        .zip(&vocab.idf)
        .map(|(&c, &idf)| T::of(c as f64 * idf))
        .collect();
    normalize(&mut v);
    v
}

/// Turns a token list into a vector. Implementations are pure.
pub trait Embedder<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, tokens: &[String]) -> Vec<T>;
}

#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl<T: Scalar> Embedder<T> for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[String]) -> Vec<T> {
        hash_embed(tokens, self.dim, self.seed)
    }
}

impl<T: Scalar> Embedder<T> for TfidfVocabulary {
    fn dim(&self) -> usize {
        self.len()
    }

    fn embed(&self, tokens: &[String]) -> Vec<T> {
        tfidf_embed(tokens, self)
    }
}

/// Vectors keyed by sample id, all of one dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    pub dim: Option<usize>,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    format: String,
    version: u32,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct StoreRecord {
    sample_id: String,
    vector: Vec<f64>,
}

pub const STORE_FORMAT: &str = "contextfed-embed";

impl EmbeddingStore {
    pub fn insert(&mut self, sample_id: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let sample_id = sample_id.into();
        match self.dim {
            Some(d) if d != vector.len() => {
                return Err(Error::EmbeddingDim {
                    sample_id,
                    expected: d,
                    actual: vector.len(),
                })
            }
            None => self.dim = Some(vector.len()),
            _ => {}
        }
        self.vectors.insert(sample_id, vector);
        Ok(())
    }

    pub fn get(&self, sample_id: &str) -> Option<&[f64]> {
        self.vectors.get(sample_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

pub fn save_embeddings(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_embeddings(store, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Floats are written in shortest round-trip form, so loading restores
/// every value bit for bit.
pub fn write_embeddings<W: Write>(store: &EmbeddingStore, out: &mut W) -> std::io::Result<()> {
    let header = StoreHeader {
        format: STORE_FORMAT.to_string(),
        version: 1,
        dim: store.dim.unwrap_or(0),
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for (id, v) in &store.vectors {
        let rec = StoreRecord {
            sample_id: id.clone(),
            vector: v.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingStore> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(BufReader::new(file), &path.display().to_string())
}

pub fn read_embeddings<R: BufRead>(reader: R, origin: &str) -> Result<EmbeddingStore> {
    let mut store = EmbeddingStore::default();
    let mut header_dim = None;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 {
            let header: StoreHeader = serde_json::from_str(&line)
                .map_err(|e| Error::parse(origin, lineno, format!("bad header: {e}")))?;
            if header.format != STORE_FORMAT || header.version != 1 {
                return Err(Error::parse(origin, lineno, "not a contextfed-embed v1 file"));
            }
            header_dim = Some(header.dim);
            continue;
        }
        let rec: StoreRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
        if let Some(d) = header_dim.filter(|&d| d != rec.vector.len()) {
            return Err(Error::EmbeddingDim {
                sample_id: rec.sample_id,
                expected: d,
                actual: rec.vector.len(),
            });
        }
        if rec.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::parse(origin, lineno, "non-finite vector entry"));
        }
        store.insert(rec.sample_id, rec.vector)?;
    }
    if store.dim.is_none() && header_dim.is_some_and(|d| d > 0) {
        store.dim = header_dim;
    }
    Ok(store)
}

/// Looks vectors up by sample id; the token list passed to `embed` is
/// ignored, so callers go through [`StoreEmbedder::lookup`].
pub struct StoreEmbedder<'a> {
    pub store: &'a EmbeddingStore,
}

impl StoreEmbedder<'_> {
    pub fn lookup<T: Scalar>(&self, sample_id: &str) -> Result<Vec<T>> {
        self.store
            .get(sample_id)
            .map(|v| v.iter().map(|&x| T::of(x)).collect())
            .ok_or_else(|| Error::MissingEmbedding(sample_id.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hash_embed_basics() {
        let zero: Vec<f64> = hash_embed(&[], 256, 7);
        assert_eq!(zero, vec![0.0; 256]);
        let a: Vec<f64> = hash_embed(&toks(&["a", "b", "c"]), 64, 7);
        let b: Vec<f64> = hash_embed(&toks(&["a", "b", "c"]), 64, 7);
        assert_eq!(a, b);
        let one: Vec<f64> = hash_embed(&toks(&["a"]), 32, 3);
        let two: Vec<f64> = hash_embed(&toks(&["a", "a"]), 32, 3);
        assert_eq!(one, two);
        assert!((l2_norm(&one) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hash_embed_f32() {
        let v: Vec<f32> = hash_embed(&toks(&["x", "y"]), 16, 1);
        assert!((l2_norm(&v) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn chunking() {
        let t: Vec<String> = (0..1100).map(|i| format!("w{i}")).collect();
        let sizes: Vec<usize> = chunk_tokens(&t, 512).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![512, 512, 76]);
        assert_eq!(chunk_tokens(&t[..512], 512).len(), 1);
        assert!(chunk_tokens(&[], 512).is_empty());
    }

    #[test]
    fn pooling() {
        assert_eq!(
            pool_max(&[vec![1.0, -2.0], vec![0.0, 5.0]]).unwrap(),
            vec![1.0, 5.0]
        );
        assert_eq!(pool_max(&[vec![0.3, 0.1]]).unwrap(), vec![0.3, 0.1]);
        assert_eq!(pool_max(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(pool_max::<f64>(&[]), Err(Error::NothingToPool)));
        assert!(pool_max(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn tfidf_counts_and_idf() {
        let corpus = vec![toks(&["a", "b"]), toks(&["a"])];
        let vocab = tfidf_fit(&corpus, (1, 3), 10).unwrap();
        assert_eq!(vocab.doc_freq_of("a"), Some(2));
        assert_eq!(vocab.doc_freq_of("b"), Some(1));
        assert_eq!(vocab.doc_freq_of("a b"), Some(1));
        assert_eq!(vocab.terms, toks(&["a", "a b", "b"]));
        let top1 = tfidf_fit(&corpus, (1, 3), 1).unwrap();
        assert_eq!(top1.terms, toks(&["a"]));

        let single = tfidf_fit(&[toks(&["x", "y"])], (1, 3), 10).unwrap();
        assert_eq!(single.idf_of("x"), Some(1.0));
        assert!(matches!(tfidf_fit(&[], (1, 3), 10), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn tfidf_vectors() {
        let corpus = vec![toks(&["a", "b"]), toks(&["a", "c"]), toks(&["d"])];
        let vocab = tfidf_fit(&corpus, (1, 3), 1000).unwrap();
        let none: Vec<f64> = tfidf_embed(&toks(&["zzz"]), &vocab);
        assert!(none.iter().all(|&x| x == 0.0));
        let one: Vec<f64> = tfidf_embed(&toks(&["d"]), &vocab);
        let pos = vocab.position("d").unwrap();
        for (i, &x) in one.iter().enumerate() {
            assert_eq!(x, if i == pos { 1.0 } else { 0.0 });
        }
        let many: Vec<f64> = tfidf_embed(&toks(&["a", "b", "a", "c"]), &vocab);
        assert!((l2_norm(&many) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn store_round_trip() {
        let mut store = EmbeddingStore::default();
        store.insert("s1", vec![0.5, -0.25]).unwrap();
        store.insert("s2", vec![0.1 + 0.2, 1.0 / 3.0]).unwrap();
        let mut buf = Vec::new();
        write_embeddings(&store, &mut buf).unwrap();
        let back = read_embeddings(&buf[..], "mem").unwrap();
        assert_eq!(back, store);
        assert!(store.insert("s3", vec![1.0]).is_err());
    }

    #[test]
    fn store_errors() {
        let text = "{\"format\":\"contextfed-embed\",\"version\":1,\"dim\":4}\n\
                    {\"sample_id\":\"a\",\"vector\":[1,2,3,4]}\n\
                    {\"sample_id\":\"b\",\"vector\":[1,2,3,4,5,6,7,8]}\n";
        match read_embeddings(text.as_bytes(), "mem") {
            Err(Error::EmbeddingDim { sample_id, .. }) => assert_eq!(sample_id, "b"),
            other => panic!("unexpected {other:?}"),
        }
        let bad = "{\"format\":\"contextfed-embed\",\"version\":1,\"dim\":1}\nnot json\n";
        match read_embeddings(bad.as_bytes(), "mem") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let empty = read_embeddings("".as_bytes(), "mem").unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.dim, None);
    }
}
