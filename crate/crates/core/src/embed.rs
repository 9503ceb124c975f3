//! Document embeddings.
//!
//! The built-in encoder hashes tokens into `V` buckets (FNV-1a), L2-normalizes
//! the bag of counts, and applies a trainable `V×d` projection plus bias
//! followed by `tanh`. Precomputed vectors from an external encoder can be
//! loaded instead, in which case documents are looked up by id.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{dialogue_tokens, profile_tokens, query_tokens, tokenize, Corpus, MAX_DOC_TOKENS};
use crate::rng::stream;
use crate::tensor::{Graph, ParamId, ParamStore, SparseRows, Tensor, TensorError, Var};

pub const FNV_OFFSET_BASIS: u64 = 14695981039346656037;
pub const FNV_PRIME: u64 = 1099511628211;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("vector file line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("vector {id:?} has dim {got}, expected {expected}")]
    DimMismatch { id: String, expected: usize, got: usize },
    #[error("duplicate vector id {0:?}")]
    DuplicateId(String),
    #[error("vector {0:?} has a non-finite entry")]
    NonFinite(String),
    #[error("no precomputed vector for {0:?}")]
    MissingVector(String),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET_BASIS, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn hash_token(token: &str, buckets: usize) -> usize {
    (fnv1a64(token.as_bytes()) % buckets as u64) as usize
}

/// L2-normalized bucket counts, sorted by bucket.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVec {
    pub entries: Vec<(usize, f64)>,
}

impl SparseVec {
    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }
}

pub fn featurize<S: AsRef<str>>(tokens: &[S], buckets: usize) -> SparseVec {
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    for t in tokens {
        *counts.entry(hash_token(t.as_ref(), buckets)).or_default() += 1.0;
    }
    let norm = counts.values().map(|c| c * c).sum::<f64>().sqrt();
    SparseVec {
        entries: counts.into_iter().map(|(b, c)| (b, c / norm)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hash_buckets: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hash_buckets: 4096,
            dim: 48,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim < 2 {
            return Err(EmbedError::Config(format!("dim {} < 2", self.dim)));
        }
        if self.hash_buckets < self.dim {
            return Err(EmbedError::Config(format!(
                "hash_buckets {} < dim {}",
                self.hash_buckets, self.dim
            )));
        }
        Ok(())
    }
}

pub const PROJECTION: &str = "enc.projection";
pub const BIAS: &str = "enc.bias";

/// Inputs are unit-norm bags, so a fan-in based bound over `V` rows would
/// shrink embeddings towards zero; this keeps pre-activations at unit scale.
pub const PROJECTION_INIT_BOUND: f64 = 1.0;

/// Trainable hashing encoder; its parameters live in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashEncoder {
    pub config: EncoderConfig,
    pub projection: ParamId,
    pub bias: ParamId,
}

impl HashEncoder {
    /// Registers freshly initialized parameters in `store`.
    pub fn init(store: &mut ParamStore, config: EncoderConfig) -> Result<Self, EmbedError> {
        config.validate()?;
        let mut rng = stream(config.seed, "encoder");
        let projection = store.add(
            PROJECTION,
            Tensor::uniform(config.hash_buckets, config.dim, PROJECTION_INIT_BOUND, &mut rng),
        )?;
        let bias = store.add(BIAS, Tensor::zeros(1, config.dim))?;
        Ok(Self {
            config,
            projection,
            bias,
        })
    }

    /// Binds to encoder parameters already present in `store`.
    pub fn attach(store: &ParamStore, config: EncoderConfig) -> Result<Self, EmbedError> {
        config.validate()?;
        let projection = store.require(PROJECTION)?;
        let bias = store.require(BIAS)?;
        if store.value(projection).shape() != (config.hash_buckets, config.dim) {
            return Err(EmbedError::Config(format!(
                "projection shape {:?} does not match config",
                store.value(projection).shape()
            )));
        }
        Ok(Self {
            config,
            projection,
            bias,
        })
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, docs: &[&SparseVec]) -> Result<Var, TensorError> {
        let x = Arc::new(SparseRows {
            cols: self.config.hash_buckets,
            rows: docs.iter().map(|d| d.entries.clone()).collect(),
        });
        let p = g.param(store, self.projection);
        let b = g.param(store, self.bias);
        let xp = g.sparse_matmul(x, p)?;
        let z = g.add(xp, b)?;
        Ok(g.tanh(z))
    }

    pub fn encode_value(&self, store: &ParamStore, doc: &SparseVec) -> Tensor {
        let p = store.value(self.projection);
        let mut out = store.value(self.bias).clone();
        for &(c, v) in &doc.entries {
            for (o, w) in out.data_mut().iter_mut().zip(p.row(c)) {
                *o += v * w;
            }
        }
        out.data_mut().iter_mut().for_each(|x| *x = x.tanh());
        out
    }
}

/// Externally computed document vectors keyed by document id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VectorStore {
    pub dim: usize,
    pub vectors: HashMap<String, Tensor>,
}

#[derive(Deserialize)]
struct VectorHeader {
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct VectorLine {
    id: String,
    vec: Vec<f64>,
}

impl VectorStore {
    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.vectors.get(id)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, EmbedError> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(EmbedError::Malformed {
            line: 1,
            msg: "missing header".into(),
        })??;
        let header: VectorHeader = serde_json::from_str(&header).map_err(|e| EmbedError::Malformed {
            line: 1,
            msg: e.to_string(),
        })?;
        let mut store = VectorStore {
            dim: header.dim,
            vectors: HashMap::new(),
        };
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: VectorLine = serde_json::from_str(&line).map_err(|e| EmbedError::Malformed {
                line: i + 2,
                msg: e.to_string(),
            })?;
            if rec.vec.len() != store.dim {
                return Err(EmbedError::DimMismatch {
                    id: rec.id,
                    expected: store.dim,
                    got: rec.vec.len(),
                });
            }
            if rec.vec.iter().any(|v| !v.is_finite()) {
                return Err(EmbedError::NonFinite(rec.id));
            }
            if store.vectors.contains_key(&rec.id) {
                return Err(EmbedError::DuplicateId(rec.id));
            }
            store.vectors.insert(rec.id, Tensor::row_vector(rec.vec));
        }
        Ok(store)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), EmbedError> {
        writeln!(w, "{{\"dim\":{}}}", self.dim)?;
        let mut ids: Vec<&String> = self.vectors.keys().collect();
        ids.sort();
        for id in ids {
            let line = VectorLine {
                id: id.clone(),
                vec: self.vectors[id].data().to_vec(),
            };
            serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn load_vectors(path: &Path) -> Result<VectorStore, EmbedError> {
    VectorStore::read(BufReader::new(File::open(path)?))
}

/// A tokenized document with its id (used for precomputed lookups).
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<String>,
    pub features: SparseVec,
}

impl Document {
    pub fn new(id: String, tokens: Vec<String>, buckets: usize) -> Self {
        let features = featurize(&tokens, buckets);
        Self { id, tokens, features }
    }
}

pub fn profile_doc_id(doctor_id: &str) -> String {
    format!("profile:{doctor_id}")
}

pub fn dialogue_doc_id(dialogue_id: &str) -> String {
    format!("dialogue:{dialogue_id}")
}

pub fn query_doc_id(dialogue_id: &str) -> String {
    format!("query:{dialogue_id}")
}

/// Every document of a corpus, tokenized and featurized once.
#[derive(Debug, Clone)]
pub struct DocumentBank {
    pub buckets: usize,
    pub stoplist: HashSet<String>,
    /// Indexed like `Corpus::doctors`.
    pub profiles: Vec<Document>,
    /// Indexed like `Corpus::dialogues`.
    pub dialogues: Vec<Document>,
    /// First patient turn of each dialogue, indexed like `Corpus::dialogues`.
    pub queries: Vec<Document>,
}

impl DocumentBank {
    pub fn build(corpus: &Corpus, stoplist: &HashSet<String>, buckets: usize) -> Self {
        let profiles = corpus
            .doctors()
            .iter()
            .map(|d| Document::new(profile_doc_id(&d.doctor_id), profile_tokens(d), buckets))
            .collect();
        let dialogues = corpus
            .dialogues()
            .iter()
            .map(|d| Document::new(dialogue_doc_id(&d.dialogue_id), dialogue_tokens(d, stoplist), buckets))
            .collect();
        let queries = corpus
            .dialogues()
            .iter()
            .map(|d| Document::new(query_doc_id(&d.dialogue_id), query_tokens(d), buckets))
            .collect();
        Self {
            buckets,
            stoplist: stoplist.clone(),
            profiles,
            dialogues,
            queries,
        }
    }

    /// Free-text query outside the corpus.
    pub fn adhoc_query(&self, id: &str, text: &str) -> Document {
        let mut tokens = tokenize(text, &self.stoplist, true);
        tokens.truncate(MAX_DOC_TOKENS);
        Document::new(id.to_string(), tokens, self.buckets)
    }
}

/// Either the trainable hashing encoder or a fixed table of vectors.
#[derive(Debug, Clone)]
pub enum TextEncoder {
    Hash(HashEncoder),
    Precomputed(Arc<VectorStore>),
}

impl TextEncoder {
    pub fn dim(&self) -> usize {
        match self {
            TextEncoder::Hash(h) => h.config.dim,
            TextEncoder::Precomputed(v) => v.dim,
        }
    }

    /// Stacked `n×d` embeddings of `docs`, recorded on `g`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, docs: &[&Document]) -> Result<Var, EmbedError> {
        match self {
            TextEncoder::Hash(h) => {
                let feats: Vec<&SparseVec> = docs.iter().map(|d| &d.features).collect();
                Ok(h.encode(g, store, &feats)?)
            }
            TextEncoder::Precomputed(v) => {
                let rows = docs
                    .iter()
                    .map(|d| v.get(&d.id).ok_or_else(|| EmbedError::MissingVector(d.id.clone())))
                    .collect::<Result<Vec<_>, _>>()?;
                let stacked = if rows.is_empty() {
                    Tensor::zeros(0, v.dim)
                } else {
                    Tensor::concat_rows(&rows)?
                };
                Ok(g.constant(stacked))
            }
        }
    }

    pub fn encode_value(&self, store: &ParamStore, doc: &Document) -> Result<Tensor, EmbedError> {
        match self {
            TextEncoder::Hash(h) => Ok(h.encode_value(store, &doc.features)),
            TextEncoder::Precomputed(v) => v
                .get(&doc.id)
                .cloned()
                .ok_or_else(|| EmbedError::MissingVector(doc.id.clone())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::seq::SliceRandom;
    use rand::Rng;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), FNV_OFFSET_BASIS);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(hash_token("fever", 97), hash_token("fever", 97));
    }

    fn two_distinct_tokens(buckets: usize) -> (String, String) {
        let a = "a".to_string();
        let b = (0..)
            .map(|i| format!("b{i}"))
            .find(|t| hash_token(t, buckets) != hash_token(&a, buckets))
            .unwrap();
        (a, b)
    }

    #[test]
    fn featurize_counts_and_normalizes() {
        let (a, b) = two_distinct_tokens(64);
        let f = featurize(&[a.clone(), a.clone(), b.clone()], 64);
        let dense = f.to_dense(64);
        let s5 = 5f64.sqrt();
        assert!((dense[hash_token(&a, 64)] - 2.0 / s5).abs() < 1e-15);
        assert!((dense[hash_token(&b, 64)] - 1.0 / s5).abs() < 1e-15);
        assert!(featurize::<&str>(&[], 64).entries.is_empty());
    }

    #[test]
    fn random_document_has_unit_norm() {
        let mut rng = seeded(9);
        let tokens: Vec<String> = (0..50).map(|_| format!("w{}", rng.gen_range(0..30))).collect();
        let f = featurize(&tokens, 256);
        let norm: f64 = f.to_dense(256).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn featurize_is_order_free() {
        let mut rng = seeded(2);
        let mut tokens: Vec<String> = (0..40).map(|i| format!("t{}", i % 13)).collect();
        let f = featurize(&tokens, 128);
        tokens.shuffle(&mut rng);
        assert_eq!(featurize(&tokens, 128), f);
    }

    #[test]
    fn encode_special_cases() {
        let cfg = EncoderConfig {
            hash_buckets: 32,
            dim: 4,
            seed: 3,
        };
        let mut store = ParamStore::new();
        let enc = HashEncoder::init(&mut store, cfg).unwrap();
        let doc = featurize(&["x", "y"], 32);
        // zero projection and bias
        let mut zero = store.clone();
        zero.get_mut(enc.projection).value = Tensor::zeros(32, 4);
        assert!(enc.encode_value(&zero, &doc).data().iter().all(|&v| v == 0.0));
        // empty document gives tanh(bias)
        store.get_mut(enc.bias).value = Tensor::row_vector(vec![0.1, -0.2, 0.3, 2.0]);
        let e = enc.encode_value(&store, &SparseVec::default());
        let want: Vec<f64> = [0.1f64, -0.2, 0.3, 2.0].iter().map(|v| v.tanh()).collect();
        assert_eq!(e.data(), want.as_slice());
        // graph and direct paths agree; entries in (-1, 1)
        let mut g = Graph::new();
        let v = enc.encode(&mut g, &store, &[&doc]).unwrap();
        assert_eq!(g.value(v), &enc.encode_value(&store, &doc));
        assert!(g.value(v).data().iter().all(|x| x.abs() < 1.0));
    }

    #[test]
    fn same_seed_same_encoder() {
        let cfg = EncoderConfig {
            hash_buckets: 64,
            dim: 8,
            seed: 5,
        };
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let ea = HashEncoder::init(&mut a, cfg).unwrap();
        let eb = HashEncoder::init(&mut b, cfg).unwrap();
        let doc = featurize(&["fever", "cough"], 64);
        let (x, y) = (ea.encode_value(&a, &doc), eb.encode_value(&b, &doc));
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x), bits(&y));
    }

    #[test]
    fn config_validation() {
        let bad = EncoderConfig {
            hash_buckets: 4,
            dim: 8,
            seed: 0,
        };
        assert!(bad.validate().is_err());
        let tiny = EncoderConfig {
            hash_buckets: 4,
            dim: 1,
            seed: 0,
        };
        assert!(tiny.validate().is_err());
    }

    fn vector_file(dims: &[usize]) -> String {
        let mut s = format!("{{\"dim\":{}}}\n", dims[0]);
        for (i, d) in dims.iter().enumerate() {
            let v: Vec<String> = (0..*d).map(|k| format!("{}", k as f64 * 0.01)).collect();
            s.push_str(&format!("{{\"id\":\"doc{i}\",\"vec\":[{}]}}\n", v.join(",")));
        }
        s
    }

    #[test]
    fn vector_store_loading() {
        let ok = VectorStore::read(vector_file(&[64, 64]).as_bytes()).unwrap();
        assert_eq!(ok.len(), 2);
        assert_eq!(ok.dim, 64);
        let err = VectorStore::read(vector_file(&[64, 32]).as_bytes()).unwrap_err();
        assert!(matches!(err, EmbedError::DimMismatch { got: 32, .. }));
        let dup = "{\"dim\":2}\n{\"id\":\"a\",\"vec\":[1,2]}\n{\"id\":\"a\",\"vec\":[1,2]}\n";
        assert!(matches!(
            VectorStore::read(dup.as_bytes()),
            Err(EmbedError::DuplicateId(_))
        ));
        let mut buf = Vec::new();
        ok.write(&mut buf).unwrap();
        assert_eq!(VectorStore::read(buf.as_slice()).unwrap(), ok);
    }

    #[test]
    fn precomputed_encoder_returns_stored_vector() {
        let vs = Arc::new(VectorStore::read(vector_file(&[4, 4]).as_bytes()).unwrap());
        let enc = TextEncoder::Precomputed(vs.clone());
        let doc = Document::new("doc1".into(), vec!["ignored".into()], 16);
        let store = ParamStore::new();
        assert_eq!(&enc.encode_value(&store, &doc).unwrap(), vs.get("doc1").unwrap());
        let mut g = Graph::new();
        let v = enc.encode(&mut g, &store, &[&doc, &doc]).unwrap();
        assert_eq!(g.value(v).shape(), (2, 4));
        let missing = Document::new("nope".into(), vec![], 16);
        assert!(matches!(
            enc.encode_value(&store, &missing),
            Err(EmbedError::MissingVector(_))
        ));
    }
}
