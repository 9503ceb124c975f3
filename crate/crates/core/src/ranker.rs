//! Query/doctor matching: MLP scorer over `[e_D; e_q]`, positive-weighted
//! binary cross-entropy, negative sampling from the candidate pool, Adam with
//! validation-loss early stopping, and ranking/evaluation over a frozen model.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{candidate_pool, tokenize, Corpus, Query, QuerySplit, SplitSpec};
use crate::embed::{Document, DocumentBank, EncoderConfig, HashEncoder, TextEncoder, VectorStore};
use crate::expertise::{explain_heads, AttentionMode, DoctorEmbedding, DoctorEncoder, HeadExplanation};
use crate::metrics::{aggregate, JudgedRanking, MetricsReport, QueryMetrics};
use crate::rng::stream;
use crate::tensor::{
    grad_check, sigmoid, weighted_bce_value, Adam, GradCheckReport, Graph, ParamId, ParamStore, Tensor, TensorError,
    Var,
};

use crate::{Error, Result};

/// How a doctor is turned into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Full,
    NoProfile,
    NoDialogue,
    DotAtt,
    CatAtt,
    /// Profile embedding only (MLP P+Q baseline).
    MlpP,
    /// Mean dialogue embedding (MLP D+Q baseline).
    MlpD,
    /// Average of profile and mean dialogue embedding (MLP P+D+Q baseline).
    MlpPd,
}

impl EncoderMode {
    pub const ALL: [EncoderMode; 8] = [
        EncoderMode::Full,
        EncoderMode::NoProfile,
        EncoderMode::NoDialogue,
        EncoderMode::DotAtt,
        EncoderMode::CatAtt,
        EncoderMode::MlpP,
        EncoderMode::MlpD,
        EncoderMode::MlpPd,
    ];

    pub fn attention(self) -> Option<AttentionMode> {
        match self {
            EncoderMode::Full => Some(AttentionMode::Full),
            EncoderMode::NoProfile => Some(AttentionMode::NoProfile),
            EncoderMode::NoDialogue => Some(AttentionMode::NoDialogue),
            EncoderMode::DotAtt => Some(AttentionMode::DotAtt),
            EncoderMode::CatAtt => Some(AttentionMode::CatAtt),
            _ => None,
        }
    }

    pub fn uses_profile(self) -> bool {
        !matches!(self, EncoderMode::NoProfile | EncoderMode::MlpD)
    }

    pub fn uses_dialogues(self) -> bool {
        !matches!(self, EncoderMode::NoDialogue | EncoderMode::MlpP)
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderMode::MlpP => "mlp_p",
            EncoderMode::MlpD => "mlp_d",
            EncoderMode::MlpPd => "mlp_pd",
            other => other.attention().expect("attention mode").name(),
        }
    }
}

impl fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown encoder mode {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub heads: usize,
    pub mlp_hidden: usize,
    pub lambda: f64,
    pub neg_ratio: usize,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub pool_size: usize,
    pub encoder_mode: EncoderMode,
    pub encoder: EncoderConfig,
    /// Keep only the most recent `m` training dialogues per doctor.
    pub max_dialogues: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            heads: 6,
            mlp_hidden: 256,
            lambda: 5.0,
            neg_ratio: 10,
            lr: 0.008,
            batch: 256,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            pool_size: 100,
            encoder_mode: EncoderMode::Full,
            encoder: EncoderConfig::default(),
            max_dialogues: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda <= 1.0 {
            return Err(Error::Config(format!("lambda {} must exceed 1", self.lambda)));
        }
        if self.neg_ratio == 0 {
            return Err(Error::Config("neg_ratio must be >= 1".into()));
        }
        if self.batch == 0 || self.mlp_hidden == 0 || self.heads == 0 || self.pool_size == 0 {
            return Err(Error::Config(
                "batch, mlp_hidden, heads and pool_size must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.max_dialogues == Some(0) {
            return Err(Error::Config("max_dialogues must be >= 1".into()));
        }
        Ok(())
    }
}

/// Output MLP: `σ(tanh(x·W1 + b1)·W_out + b_out)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl Mlp {
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, prefix);
        store.add(format!("{prefix}.W1"), Tensor::xavier(input, hidden, &mut rng))?;
        store.add(format!("{prefix}.b1"), Tensor::zeros(1, hidden))?;
        store.add(format!("{prefix}.W_out"), Tensor::xavier(hidden, 1, &mut rng))?;
        store.add(format!("{prefix}.b_out"), Tensor::zeros(1, 1))?;
        Self::attach(store, prefix)
    }

    pub fn attach(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: store.require(&format!("{prefix}.W1"))?,
            b1: store.require(&format!("{prefix}.b1"))?,
            w_out: store.require(&format!("{prefix}.W_out"))?,
            b_out: store.require(&format!("{prefix}.b_out"))?,
        })
    }

    /// `x` is `B×input`; returns `B×1` scores in (0, 1).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> std::result::Result<Var, TensorError> {
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let w_out = g.param(store, self.w_out);
        let b_out = g.param(store, self.b_out);
        let h = g.matmul(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.tanh(h);
        let z = g.matmul(h, w_out)?;
        let z = g.add(z, b_out)?;
        Ok(g.sigmoid(z))
    }
}

/// Matching score of one doctor/query embedding pair.
pub fn score(e_d: &Tensor, e_q: &Tensor, store: &ParamStore, mlp: &Mlp) -> Result<f64> {
    let x = Tensor::concat_cols(&[e_d, e_q])?;
    let h = x.matmul(store.value(mlp.w1))?.add(store.value(mlp.b1))?.tanh();
    let z = h.matmul(store.value(mlp.w_out))?.add(store.value(mlp.b_out))?;
    Ok(sigmoid(z.item()))
}

/// Summed positive-weighted binary cross-entropy (natural log).
pub fn loss(scores: &[f64], labels: &[f64], lambda: f64) -> f64 {
    weighted_bce_value(scores, labels, lambda)
}

/// `neg_ratio` distinct pool members other than `gold`, uniformly without replacement.
pub fn sample_negatives<T: Clone + PartialEq, R: Rng + ?Sized>(
    pool: &[T],
    gold: &T,
    neg_ratio: usize,
    rng: &mut R,
) -> Result<Vec<T>> {
    let others: Vec<&T> = pool.iter().filter(|d| *d != gold).collect();
    if others.len() < neg_ratio {
        return Err(Error::Config(format!(
            "pool has {} non-gold candidates, need {neg_ratio} negatives",
            others.len()
        )));
    }
    Ok(rand::seq::index::sample(rng, others.len(), neg_ratio)
        .into_iter()
        .map(|i| others[i].clone())
        .collect())
}

/// Corpus view shared by training and inference: the pool and each doctor's
/// training dialogues.
#[derive(Debug, Clone)]
pub struct RankContext<'a> {
    pub corpus: &'a Corpus,
    pub split: &'a SplitSpec,
    pub bank: &'a DocumentBank,
    /// Doctor indices in pool order.
    pub pool: Vec<usize>,
    /// Per corpus doctor, training dialogue indices (most recent last).
    pub doctor_dialogues: Vec<Vec<usize>>,
}

impl<'a> RankContext<'a> {
    pub fn new(
        corpus: &'a Corpus,
        split: &'a SplitSpec,
        bank: &'a DocumentBank,
        pool_size: usize,
        max_dialogues: Option<usize>,
    ) -> Self {
        let pool = candidate_pool(corpus, split, pool_size)
            .iter()
            .map(|id| corpus.doctor_idx(id).expect("pool ids come from corpus"))
            .collect();
        let doctor_dialogues = (0..corpus.doctors().len())
            .map(|i| {
                let mut d = split.train_dialogues_of(corpus, i);
                if let Some(m) = max_dialogues {
                    let skip = d.len().saturating_sub(m);
                    d.drain(..skip);
                }
                d
            })
            .collect();
        Self {
            corpus,
            split,
            bank,
            pool,
            doctor_dialogues,
        }
    }

    pub fn for_model(corpus: &'a Corpus, split: &'a SplitSpec, bank: &'a DocumentBank, cfg: &ModelConfig) -> Self {
        Self::new(corpus, split, bank, cfg.pool_size, cfg.max_dialogues)
    }

    pub fn in_pool(&self, doctor_idx: usize) -> bool {
        self.pool.contains(&doctor_idx)
    }

    pub fn doctor_id(&self, doctor_idx: usize) -> &str {
        &self.corpus.doctors()[doctor_idx].doctor_id
    }

    /// `(dialogue index, gold doctor index)` for queries whose gold is in the pool.
    pub fn query_items<'q>(&self, queries: impl IntoIterator<Item = &'q Query>) -> Vec<(usize, usize)> {
        let pool: HashSet<usize> = self.pool.iter().copied().collect();
        queries
            .into_iter()
            .filter_map(|q| {
                let dlg = self.corpus.dialogue_idx(&q.source_dialogue_id)?;
                let gold = self.corpus.doctor_idx(&q.gold_doctor_id)?;
                pool.contains(&gold).then_some((dlg, gold))
            })
            .collect()
    }

    pub fn train_items(&self) -> Vec<(usize, usize)> {
        self.query_items(&self.split.train_queries(self.corpus))
    }

    pub fn split_items(&self, split: QuerySplit) -> Vec<(usize, usize)> {
        self.query_items(self.split.queries(split))
    }
}

/// Scored candidates, best first; ties by ascending doctor id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub entries: Vec<(String, f64)>,
}

impl RankResult {
    pub fn from_scores(mut entries: Vec<(String, f64)>) -> Self {
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self { entries }
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|(id, _)| id.clone()).collect()
    }

    /// 1-based rank of `doctor_id`.
    pub fn rank_of(&self, doctor_id: &str) -> Option<usize> {
        self.entries.iter().position(|(id, _)| id == doctor_id).map(|p| p + 1)
    }

    pub fn top(&self, k: usize) -> &[(String, f64)] {
        &self.entries[..k.min(self.entries.len())]
    }
}

/// Training examples sharing one graph: queries are encoded once and
/// gathered per example.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    /// Dialogue indices whose first turns are the queries.
    pub queries: Vec<usize>,
    /// `(query slot, doctor index)`.
    pub examples: Vec<(usize, usize)>,
    pub labels: Vec<f64>,
}

impl Batch {
    /// One positive plus `neg_ratio` pool negatives per item.
    pub fn sample<R: Rng + ?Sized>(
        items: &[(usize, usize)],
        pool: &[usize],
        neg_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut b = Batch::default();
        for &(dlg, gold) in items {
            let slot = b.queries.len();
            b.queries.push(dlg);
            b.examples.push((slot, gold));
            b.labels.push(1.0);
            for neg in sample_negatives(pool, &gold, neg_ratio, rng)? {
                b.examples.push((slot, neg));
                b.labels.push(0.0);
            }
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Frozen per-doctor state for fast scoring: `e_D` and its half of the
/// first MLP layer.
#[derive(Debug, Clone)]
pub struct DoctorTable {
    pub doctor_idx: Vec<usize>,
    pub ids: Vec<String>,
    pub embeddings: Vec<DoctorEmbedding>,
    hidden: Vec<Tensor>,
}

impl DoctorTable {
    pub fn position(&self, doctor_id: &str) -> Option<usize> {
        self.ids.iter().position(|id| id == doctor_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_val_loss: f64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub train_examples_per_epoch: usize,
    pub val_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub doctor_id: String,
    pub score: f64,
    /// Documents the attention ranges over, in column order of the maps.
    pub attended: Vec<String>,
    pub heads: Vec<HeadExplanation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    stage: String,
    config: ModelConfig,
    split_seed: u64,
    stoplist: Vec<String>,
    text_encoder: String,
}

#[derive(Debug, Clone)]
pub struct Recommender {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: TextEncoder,
    doctor_encoder: Option<DoctorEncoder>,
    mlp: Mlp,
}

impl Recommender {
    /// Fresh model. With `vectors` the text encoder is a fixed lookup table;
    /// otherwise a hashing encoder is created and, if `pretrained` holds
    /// stage-1 encoder weights, initialized from them.
    pub fn init(
        mut config: ModelConfig,
        pretrained: Option<&ParamStore>,
        vectors: Option<Arc<VectorStore>>,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = match vectors {
            Some(v) => {
                config.encoder.dim = v.dim;
                TextEncoder::Precomputed(v)
            }
            None => {
                let h = HashEncoder::init(&mut store, config.encoder)?;
                if let Some(p) = pretrained {
                    store.load_values_from(&p.subset("enc."))?;
                }
                TextEncoder::Hash(h)
            }
        };
        let dim = config.encoder.dim;
        let doctor_encoder = match config.encoder_mode.attention() {
            Some(mode) => Some(DoctorEncoder::init(&mut store, mode, dim, config.heads, config.seed)?),
            None => None,
        };
        let mlp = Mlp::init(&mut store, "mlp", 2 * dim, config.mlp_hidden, config.seed)?;
        Ok(Self {
            config,
            store,
            encoder,
            doctor_encoder,
            mlp,
        })
    }

    fn attach(config: ModelConfig, store: ParamStore, vectors: Option<Arc<VectorStore>>) -> Result<Self> {
        let encoder = match vectors {
            Some(v) => TextEncoder::Precomputed(v),
            None => TextEncoder::Hash(HashEncoder::attach(&store, config.encoder)?),
        };
        let dim = encoder.dim();
        let doctor_encoder = match config.encoder_mode.attention() {
            Some(mode) => Some(DoctorEncoder::attach(&store, mode, dim, config.heads)?),
            None => None,
        };
        let mlp = Mlp::attach(&store, "mlp")?;
        Ok(Self {
            config,
            store,
            encoder,
            doctor_encoder,
            mlp,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    fn doctor_docs<'c>(&self, ctx: &'c RankContext, doctor: usize) -> Result<Vec<&'c Document>> {
        let dialogues = &ctx.doctor_dialogues[doctor];
        if self.config.encoder_mode.uses_dialogues() && dialogues.is_empty() {
            return Err(Error::NoDialogues(ctx.doctor_id(doctor).to_string()));
        }
        Ok(dialogues.iter().map(|&i| &ctx.bank.dialogues[i]).collect())
    }

    /// Records `e_D` for one doctor given its encoded profile and dialogues.
    fn combine(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        profile: Option<Var>,
        dialogues: Option<Var>,
    ) -> Result<(Var, Vec<Var>)> {
        if let Some(enc) = &self.doctor_encoder {
            let out = enc.encode(g, store, profile, dialogues)?;
            return Ok((out.embedding, out.weights));
        }
        let missing = || Error::Config(format!("{} needs more inputs", self.config.encoder_mode));
        let v = match self.config.encoder_mode {
            EncoderMode::MlpP => profile.ok_or_else(missing)?,
            EncoderMode::MlpD => g.mean_rows(dialogues.ok_or_else(missing)?)?,
            _ => {
                let mean = g.mean_rows(dialogues.ok_or_else(missing)?)?;
                let sum = g.add(profile.ok_or_else(missing)?, mean)?;
                g.scale(sum, 0.5)
            }
        };
        Ok((v, vec![]))
    }

    /// `U×d` doctor embeddings for `doctors`, recorded on `g`.
    fn doctor_vars(&self, g: &mut Graph, store: &ParamStore, ctx: &RankContext, doctors: &[usize]) -> Result<Var> {
        let mode = self.config.encoder_mode;
        let mut docs: Vec<&Document> = Vec::new();
        let mut spans = Vec::with_capacity(doctors.len());
        for &d in doctors {
            let profile_row = mode.uses_profile().then(|| {
                docs.push(&ctx.bank.profiles[d]);
                docs.len() - 1
            });
            let start = docs.len();
            if mode.uses_dialogues() {
                docs.extend(self.doctor_docs(ctx, d)?);
            }
            spans.push((profile_row, start..docs.len()));
        }
        let encoded = self.encoder.encode(g, store, &docs)?;
        let mut rows = Vec::with_capacity(doctors.len());
        for (profile_row, range) in spans {
            let profile = profile_row.map(|r| g.row(encoded, r)).transpose()?;
            let dialogues = if mode.uses_dialogues() {
                let idx: Vec<usize> = range.collect();
                Some(g.gather_rows(encoded, &idx)?)
            } else {
                None
            };
            rows.push(self.combine(g, store, profile, dialogues)?.0);
        }
        Ok(g.concat_rows(&rows)?)
    }

    /// `B×1` scores for a batch, recorded on `g`.
    pub fn forward_batch(&self, g: &mut Graph, store: &ParamStore, ctx: &RankContext, batch: &Batch) -> Result<Var> {
        let mut doctors: Vec<usize> = batch.examples.iter().map(|&(_, d)| d).collect();
        doctors.sort_unstable();
        doctors.dedup();
        let doctor_rows = self.doctor_vars(g, store, ctx, &doctors)?;
        let query_docs: Vec<&Document> = batch.queries.iter().map(|&i| &ctx.bank.queries[i]).collect();
        let queries = self.encoder.encode(g, store, &query_docs)?;
        let d_idx: Vec<usize> = batch
            .examples
            .iter()
            .map(|(_, d)| doctors.binary_search(d).expect("collected above"))
            .collect();
        let q_idx: Vec<usize> = batch.examples.iter().map(|&(q, _)| q).collect();
        let e_d = g.gather_rows(doctor_rows, &d_idx)?;
        let e_q = g.gather_rows(queries, &q_idx)?;
        let x = g.concat_cols(&[e_d, e_q])?;
        Ok(self.mlp.forward(g, store, x)?)
    }

    pub fn batch_loss(&self, g: &mut Graph, store: &ParamStore, ctx: &RankContext, batch: &Batch) -> Result<Var> {
        let scores = self.forward_batch(g, store, ctx, batch)?;
        Ok(g.weighted_bce(scores, &batch.labels, self.config.lambda)?)
    }

    pub fn embed_query(&self, doc: &Document) -> Result<Tensor> {
        Ok(self.encoder.encode_value(&self.store, doc)?)
    }

    pub fn doctor_embedding(&self, ctx: &RankContext, doctor: usize) -> Result<DoctorEmbedding> {
        let mode = self.config.encoder_mode;
        let mut g = Graph::new();
        let profile = if mode.uses_profile() {
            Some(
                self.encoder
                    .encode(&mut g, &self.store, &[&ctx.bank.profiles[doctor]])?,
            )
        } else {
            None
        };
        let dialogues = if mode.uses_dialogues() {
            let docs = self.doctor_docs(ctx, doctor)?;
            Some(self.encoder.encode(&mut g, &self.store, &docs)?)
        } else {
            None
        };
        let (v, weights) = self.combine(&mut g, &self.store, profile, dialogues)?;
        let maps: Vec<&Tensor> = weights.iter().map(|&w| g.value(w)).collect();
        let attention_maps = if maps.is_empty() {
            Tensor::zeros(0, 0)
        } else {
            Tensor::concat_rows(&maps)?
        };
        Ok(DoctorEmbedding {
            vector: g.value(v).clone(),
            attention_maps,
        })
    }

    fn w1_halves(&self) -> (Tensor, Tensor) {
        let w1 = self.store.value(self.mlp.w1);
        let d = self.dim();
        let top = w1.gather_rows(&(0..d).collect::<Vec<_>>()).expect("in range");
        let bottom = w1.gather_rows(&(d..2 * d).collect::<Vec<_>>()).expect("in range");
        (top, bottom)
    }

    pub fn doctor_table(&self, ctx: &RankContext) -> Result<DoctorTable> {
        let (top, _) = self.w1_halves();
        let mut table = DoctorTable {
            doctor_idx: Vec::new(),
            ids: Vec::new(),
            embeddings: Vec::new(),
            hidden: Vec::new(),
        };
        for &d in &ctx.pool {
            let emb = self.doctor_embedding(ctx, d)?;
            table.hidden.push(emb.vector.matmul(&top)?);
            table.doctor_idx.push(d);
            table.ids.push(ctx.doctor_id(d).to_string());
            table.embeddings.push(emb);
        }
        Ok(table)
    }

    /// Query half of the first MLP layer, bias included.
    fn query_hidden(&self, e_q: &Tensor) -> Result<Tensor> {
        let (_, bottom) = self.w1_halves();
        Ok(e_q.matmul(&bottom)?.add(self.store.value(self.mlp.b1))?)
    }

    fn finish_score(&self, doctor_hidden: &Tensor, query_hidden: &Tensor) -> f64 {
        let w_out = self.store.value(self.mlp.w_out).data();
        let b_out = self.store.value(self.mlp.b_out).item();
        let z: f64 = doctor_hidden
            .data()
            .iter()
            .zip(query_hidden.data())
            .zip(w_out)
            .map(|((a, b), w)| (a + b).tanh() * w)
            .sum();
        sigmoid(z + b_out)
    }

    /// Scores every doctor in `table` against `query`.
    pub fn rank(&self, table: &DoctorTable, query: &Document) -> Result<RankResult> {
        let qh = self.query_hidden(&self.embed_query(query)?)?;
        Ok(RankResult::from_scores(
            table
                .ids
                .iter()
                .zip(&table.hidden)
                .map(|(id, dh)| (id.clone(), self.finish_score(dh, &qh)))
                .collect(),
        ))
    }

    /// Frozen-model loss of a batch, averaged per example.
    pub fn eval_loss(&self, table: &DoctorTable, ctx: &RankContext, batch: &Batch) -> Result<f64> {
        if batch.is_empty() {
            return Ok(f64::NAN);
        }
        let qh: Vec<Tensor> = batch
            .queries
            .iter()
            .map(|&i| self.query_hidden(&self.embed_query(&ctx.bank.queries[i])?))
            .collect::<Result<_>>()?;
        let scores: Vec<f64> = batch
            .examples
            .iter()
            .map(|&(q, d)| {
                let row = table
                    .doctor_idx
                    .iter()
                    .position(|&x| x == d)
                    .ok_or_else(|| Error::Data(format!("doctor {} not in table", ctx.doctor_id(d))))?;
                Ok(self.finish_score(&table.hidden[row], &qh[q]))
            })
            .collect::<Result<_>>()?;
        Ok(loss(&scores, &batch.labels, self.config.lambda) / batch.len() as f64)
    }

    pub fn explain(
        &self,
        ctx: &RankContext,
        query: &Document,
        doctor_id: &str,
        k: usize,
        lexicon: Option<&HashSet<String>>,
    ) -> Result<Explanation> {
        let doctor = ctx
            .corpus
            .doctor_idx(doctor_id)
            .ok_or_else(|| Error::Data(format!("unknown doctor {doctor_id:?}")))?;
        let mode = self.config.encoder_mode;
        if mode.attention().is_none() {
            return Err(Error::Config(format!("{mode} has no attention to explain")));
        }
        let emb = self.doctor_embedding(ctx, doctor)?;
        let docs: Vec<&Document> = if mode.uses_dialogues() {
            self.doctor_docs(ctx, doctor)?
        } else {
            vec![&ctx.bank.profiles[doctor]]
        };
        let (top, _) = self.w1_halves();
        let dh = emb.vector.matmul(&top)?;
        let score = self.finish_score(&dh, &self.query_hidden(&self.embed_query(query)?)?);
        Ok(Explanation {
            doctor_id: doctor_id.to_string(),
            score,
            attended: docs.iter().map(|d| d.id.clone()).collect(),
            heads: explain_heads(&docs, &emb.attention_maps, k, lexicon),
        })
    }

    pub fn save<W: Write>(&self, w: W, split_seed: u64, stoplist: &HashSet<String>, stage: &str) -> Result<()> {
        let mut stop: Vec<String> = stoplist.iter().cloned().collect();
        stop.sort();
        let meta = ModelMeta {
            stage: stage.to_string(),
            config: self.config.clone(),
            split_seed,
            stoplist: stop,
            text_encoder: match self.encoder {
                TextEncoder::Hash(_) => "hash".into(),
                TextEncoder::Precomputed(_) => "precomputed".into(),
            },
        };
        let Value::Object(map) = serde_json::to_value(meta)? else {
            unreachable!("struct serializes to an object")
        };
        Ok(self.store.save_checkpoint(w, map)?)
    }

    /// Returns the model with the split seed and stoplist it was trained with.
    pub fn load<R: BufRead>(r: R, vectors: Option<Arc<VectorStore>>) -> Result<LoadedModel> {
        let (store, header) = ParamStore::load_checkpoint(r)?;
        let meta: ModelMeta = serde_json::from_value(Value::Object(header.meta))?;
        if meta.text_encoder == "precomputed" && vectors.is_none() {
            return Err(Error::Config(
                "checkpoint was trained on precomputed vectors; supply them".into(),
            ));
        }
        let model = Self::attach(meta.config, store, vectors)?;
        Ok(LoadedModel {
            model,
            split_seed: meta.split_seed,
            stoplist: meta.stoplist.into_iter().collect(),
        })
    }
}

pub struct LoadedModel {
    pub model: Recommender,
    pub split_seed: u64,
    pub stoplist: HashSet<String>,
}

/// Minibatch Adam on the weighted cross-entropy, keeping the parameters with
/// the lowest validation loss.
pub fn train(model: &mut Recommender, ctx: &RankContext) -> Result<TrainReport> {
    let cfg = model.config.clone();
    cfg.validate()?;
    let mut items = ctx.train_items();
    if items.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if ctx.pool.len() <= cfg.neg_ratio {
        return Err(Error::Config(format!(
            "pool of {} cannot supply {} negatives",
            ctx.pool.len(),
            cfg.neg_ratio
        )));
    }
    let val_items = ctx.split_items(QuerySplit::Val);
    // fixed negatives so every epoch is scored on the same examples
    let val_batch = Batch::sample(
        &val_items,
        &ctx.pool,
        cfg.neg_ratio,
        &mut stream(cfg.seed, "val-negatives"),
    )?;
    let mut rng = stream(cfg.seed, "train");
    let per_batch = (cfg.batch / (1 + cfg.neg_ratio)).max(1);
    let mut adam = Adam::new(&model.store, cfg.lr);
    model.store.zero_grads();

    let initial_val_loss = if val_batch.is_empty() {
        f64::NAN
    } else {
        model.eval_loss(&model.doctor_table(ctx)?, ctx, &val_batch)?
    };
    let mut report = TrainReport {
        initial_val_loss,
        history: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        train_examples_per_epoch: items.len() * (1 + cfg.neg_ratio),
        val_examples: val_batch.len(),
    };
    let mut best: Option<ParamStore> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        items.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for (b, chunk) in items.chunks(per_batch).enumerate() {
            let batch = Batch::sample(chunk, &ctx.pool, cfg.neg_ratio, &mut rng)?;
            let mut g = Graph::new();
            let l = model.batch_loss(&mut g, &model.store, ctx, &batch)?;
            let value = g.value(l).item();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            g.backward(l, &mut model.store)?;
            adam.step(&mut model.store);
            total += value;
            count += batch.len();
        }
        let train_loss = total / count as f64;
        // without validation queries, model selection falls back to training loss
        let val_loss = if val_batch.is_empty() {
            train_loss
        } else {
            model.eval_loss(&model.doctor_table(ctx)?, ctx, &val_batch)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, batch: 0 });
        }
        report.history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < report.best_val_loss {
            report.best_val_loss = val_loss;
            report.best_epoch = epoch;
            best = Some(model.store.clone());
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some(store) = best {
        model.store = store;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketKey {
    QueryLen,
    DialogueLen,
    ProfileLen,
    Department,
}

impl FromStr for BucketKey {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "query_len" => Ok(BucketKey::QueryLen),
            "dialogue_len" => Ok(BucketKey::DialogueLen),
            "profile_len" => Ok(BucketKey::ProfileLen),
            "department" => Ok(BucketKey::Department),
            _ => Err(format!("unknown bucket key {s:?}")),
        }
    }
}

impl BucketKey {
    pub fn name(self) -> &'static str {
        match self {
            BucketKey::QueryLen => "query_len",
            BucketKey::DialogueLen => "dialogue_len",
            BucketKey::ProfileLen => "profile_len",
            BucketKey::Department => "department",
        }
    }
}

pub const DEFAULT_LENGTH_EDGES: [usize; 8] = [0, 10, 20, 40, 80, 160, 320, 640];

fn length_label(len: usize, edges: &[usize]) -> String {
    let i = edges.iter().rposition(|&e| e <= len).unwrap_or(0);
    match edges.get(i + 1) {
        Some(hi) => format!("[{},{})", edges[i], hi),
        None => format!("[{},inf)", edges.get(i).copied().unwrap_or(0)),
    }
}

fn bucket_label(ctx: &RankContext, q: &Query, key: BucketKey, edges: &[usize]) -> String {
    let none = HashSet::new();
    let count = |text: &str| tokenize(text, &none, true).len();
    match key {
        BucketKey::QueryLen => length_label(q.tokens.len(), edges),
        BucketKey::DialogueLen => {
            let len = ctx
                .corpus
                .dialogue(&q.source_dialogue_id)
                .map(|d| d.turns.iter().map(|t| count(&t.text)).sum())
                .unwrap_or(0);
            length_label(len, edges)
        }
        BucketKey::ProfileLen => {
            let len = ctx
                .corpus
                .doctor(&q.gold_doctor_id)
                .map(|d| count(&d.profile_text))
                .unwrap_or(0);
            length_label(len, edges)
        }
        BucketKey::Department => ctx
            .corpus
            .doctor(&q.gold_doctor_id)
            .map(|d| d.department.clone())
            .unwrap_or_default(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub gold_doctor_id: String,
    pub gold_rank: Option<usize>,
    pub metrics: QueryMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: MetricsReport,
    pub buckets: BTreeMap<String, BTreeMap<String, MetricsReport>>,
    #[serde(skip)]
    pub per_query: Vec<QueryOutcome>,
}

impl EvalReport {
    /// Aligned-column text rendering.
    pub fn to_table(&self) -> String {
        let mut rows = vec![("overall".to_string(), self.overall)];
        for (key, buckets) in &self.buckets {
            for (label, m) in buckets {
                rows.push((format!("{key}={label}"), *m));
            }
        }
        let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
        let mut out = format!(
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}\n",
            "group", "P@1", "MAP", "ERR@5", "n"
        );
        for (name, m) in rows {
            out.push_str(&format!(
                "{name:<width$}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6}\n",
                m.p_at_1, m.map, m.err_at_5, m.count
            ));
        }
        out
    }
}

/// Applies the metrics to each query's ranking and averages, overall and per
/// bucket. Queries whose gold doctor is outside the pool are skipped.
pub fn evaluate_with<F>(
    ctx: &RankContext,
    queries: &[&Query],
    bucket: Option<BucketKey>,
    edges: &[usize],
    mut rank: F,
) -> Result<EvalReport>
where
    F: FnMut(&Query) -> Result<RankResult>,
{
    let pool_ids: HashSet<&str> = ctx.pool.iter().map(|&d| ctx.doctor_id(d)).collect();
    let mut per_query = Vec::new();
    let mut grouped: BTreeMap<String, Vec<QueryMetrics>> = BTreeMap::new();
    for q in queries.iter().filter(|q| pool_ids.contains(q.gold_doctor_id.as_str())) {
        let ranking = rank(q)?;
        let judged = JudgedRanking::single(ranking.ids(), q.gold_doctor_id.clone())?;
        let metrics = judged.query_metrics();
        if let Some(key) = bucket {
            grouped
                .entry(bucket_label(ctx, q, key, edges))
                .or_default()
                .push(metrics);
        }
        per_query.push(QueryOutcome {
            query_id: q.query_id.clone(),
            gold_doctor_id: q.gold_doctor_id.clone(),
            gold_rank: ranking.rank_of(&q.gold_doctor_id),
            metrics,
        });
    }
    let all: Vec<QueryMetrics> = per_query.iter().map(|o| o.metrics).collect();
    let overall = aggregate(&all)?;
    let mut buckets = BTreeMap::new();
    if let Some(key) = bucket {
        let per: BTreeMap<String, MetricsReport> = grouped
            .into_iter()
            .map(|(label, ms)| Ok((label, aggregate(&ms)?)))
            .collect::<Result<_>>()?;
        buckets.insert(key.name().to_string(), per);
    }
    Ok(EvalReport {
        overall,
        buckets,
        per_query,
    })
}

pub fn evaluate(
    model: &Recommender,
    ctx: &RankContext,
    queries: &[&Query],
    bucket: Option<BucketKey>,
    edges: &[usize],
) -> Result<EvalReport> {
    let table = model.doctor_table(ctx)?;
    evaluate_with(ctx, queries, bucket, edges, |q| {
        let dlg = ctx
            .corpus
            .dialogue_idx(&q.source_dialogue_id)
            .ok_or_else(|| Error::Data(format!("unknown dialogue {}", q.source_dialogue_id)))?;
        model.rank(&table, &ctx.bank.queries[dlg])
    })
}

/// Finite-difference check of the whole model (encoder, doctor encoder and
/// MLP) on a tiny synthetic problem: `d = 16`, 2 heads, 5 training dialogues
/// per doctor, a pool of 4, MLP width 8.
pub fn grad_check_model(mode: EncoderMode, seed: u64, eps: f64) -> Result<GradCheckReport> {
    use crate::synth::{generate, SynthConfig};
    let synth = generate(&SynthConfig {
        n_topics: 2,
        n_doctors: 4,
        dialogues_per_doctor: 6,
        turns_per_dialogue: 2,
        tokens_per_turn: 6,
        vocab_per_topic: 10,
        shared_noise_vocab: 10,
        profile_tokens: 8,
        seed,
        ..SynthConfig::default()
    })?;
    let corpus = synth.corpus;
    let split = crate::corpus::split_dataset(&corpus, seed);
    let cfg = ModelConfig {
        heads: 2,
        mlp_hidden: 8,
        neg_ratio: 3,
        pool_size: 4,
        seed,
        encoder_mode: mode,
        encoder: EncoderConfig {
            hash_buckets: 64,
            dim: 16,
            seed,
        },
        ..ModelConfig::default()
    };
    let bank = DocumentBank::build(&corpus, &HashSet::new(), cfg.encoder.hash_buckets);
    let ctx = RankContext::for_model(&corpus, &split, &bank, &cfg);
    debug_assert!(ctx.pool.iter().all(|&d| ctx.doctor_dialogues[d].len() == 5));
    let mut model = Recommender::init(cfg, None, None)?;
    let items: Vec<(usize, usize)> = ctx.train_items().into_iter().take(2).collect();
    let batch = Batch::sample(&items, &ctx.pool, 3, &mut stream(seed, "grad-check"))?;
    let mut store = std::mem::take(&mut model.store);
    let report = grad_check(&mut store, eps, |g, s| model.batch_loss(g, s, &ctx, &batch))?;
    model.store = store;
    Ok(report)
}
