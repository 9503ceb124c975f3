//! Comparison rankers: random, frequency, KNN over training queries, cosine
//! to profile or mean dialogue, and the pooled-representation MLPs.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embed::{fnv1a64, Document, TextEncoder};
use crate::ranker::{train, EncoderMode, ModelConfig, RankContext, RankResult, Recommender, TrainReport};
use crate::rng::seeded;
use crate::tensor::{cosine, ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Random,
    Frequency,
    Knn,
    CosProfile,
    CosDialogue,
    MlpP,
    MlpD,
    MlpPd,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 8] = [
        BaselineKind::Random,
        BaselineKind::Frequency,
        BaselineKind::Knn,
        BaselineKind::CosProfile,
        BaselineKind::CosDialogue,
        BaselineKind::MlpP,
        BaselineKind::MlpD,
        BaselineKind::MlpPd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Random => "random",
            BaselineKind::Frequency => "frequency",
            BaselineKind::Knn => "knn",
            BaselineKind::CosProfile => "cos_profile",
            BaselineKind::CosDialogue => "cos_dialogue",
            BaselineKind::MlpP => "mlp_p",
            BaselineKind::MlpD => "mlp_d",
            BaselineKind::MlpPd => "mlp_pd",
        }
    }

    /// The ranker mode for the trained MLP variants.
    pub fn mlp_mode(self) -> Option<EncoderMode> {
        match self {
            BaselineKind::MlpP => Some(EncoderMode::MlpP),
            BaselineKind::MlpD => Some(EncoderMode::MlpD),
            BaselineKind::MlpPd => Some(EncoderMode::MlpPd),
            _ => None,
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown baseline {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub k_neighbors: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            kind: BaselineKind::Random,
            k_neighbors: 20,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors == 0 {
            return Err(Error::Config("k_neighbors must be >= 1".into()));
        }
        Ok(())
    }
}

/// Seeded uniform permutation; the same seed and query id give the same order.
pub fn rank_random(query_id: &str, pool: &[String], seed: u64) -> RankResult {
    let mut order = pool.to_vec();
    order.shuffle(&mut seeded(seed ^ fnv1a64(query_id.as_bytes())));
    let n = order.len() as f64;
    RankResult {
        entries: order
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, (n - i as f64) / n))
            .collect(),
    }
}

/// Descending training-dialogue count, ties by id.
pub fn rank_frequency(pool: &[String], train_counts: &HashMap<String, usize>) -> RankResult {
    RankResult::from_scores(
        pool.iter()
            .map(|id| (id.clone(), train_counts.get(id).copied().unwrap_or(0) as f64))
            .collect(),
    )
}

/// Training queries embedded once with a frozen encoder.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    embeddings: Vec<Tensor>,
    handlers: Vec<String>,
}

impl KnnIndex {
    pub fn new(embeddings: Vec<Tensor>, handlers: Vec<String>) -> Self {
        assert_eq!(embeddings.len(), handlers.len());
        Self { embeddings, handlers }
    }

    pub fn build(ctx: &RankContext, encoder: &TextEncoder, store: &ParamStore) -> Result<Self> {
        let mut embeddings = Vec::new();
        let mut handlers = Vec::new();
        for q in ctx.split.train_queries(ctx.corpus) {
            let idx = ctx
                .corpus
                .dialogue_idx(&q.source_dialogue_id)
                .ok_or_else(|| Error::Data(format!("unknown dialogue {}", q.source_dialogue_id)))?;
            embeddings.push(encoder.encode_value(store, &ctx.bank.queries[idx])?);
            handlers.push(q.gold_doctor_id);
        }
        Ok(Self { embeddings, handlers })
    }

    pub fn len(&self) -> usize {
        self.handlers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.handlers.is_empty()
    }
}

/// Votes from the `k` most cosine-similar training queries (all of them if
/// fewer); ties by training frequency, then id.
pub fn rank_knn(
    query: &Tensor,
    pool: &[String],
    index: &KnnIndex,
    k: usize,
    train_counts: &HashMap<String, usize>,
) -> RankResult {
    let mut sims: Vec<(f64, usize)> = index
        .embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| (cosine(query.data(), e.data()).unwrap_or(-1.0), i))
        .collect();
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut votes: HashMap<&str, usize> = HashMap::new();
    for &(_, i) in sims.iter().take(k) {
        *votes.entry(index.handlers[i].as_str()).or_default() += 1;
    }
    let count = |id: &str| train_counts.get(id).copied().unwrap_or(0);
    let mut entries: Vec<(String, f64)> = pool
        .iter()
        .map(|id| (id.clone(), votes.get(id.as_str()).copied().unwrap_or(0) as f64))
        .collect();
    entries.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| count(&b.0).cmp(&count(&a.0)))
            .then_with(|| a.0.cmp(&b.0))
    });
    RankResult { entries }
}

/// Cosine between the query and each doctor vector; zero vectors score −1.
pub fn rank_cosine(query: &Tensor, doctors: &[(String, Tensor)]) -> RankResult {
    RankResult::from_scores(
        doctors
            .iter()
            .map(|(id, v)| (id.clone(), cosine(query.data(), v.data()).unwrap_or(-1.0)))
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CosineSource {
    Profile,
    DialogueMean,
}

/// Per pool doctor, the profile embedding or the mean of its training
/// dialogue embeddings.
pub fn doctor_vectors(
    ctx: &RankContext,
    encoder: &TextEncoder,
    store: &ParamStore,
    source: CosineSource,
) -> Result<Vec<(String, Tensor)>> {
    ctx.pool
        .iter()
        .map(|&d| {
            let v = match source {
                CosineSource::Profile => encoder.encode_value(store, &ctx.bank.profiles[d])?,
                CosineSource::DialogueMean => {
                    let rows = ctx.doctor_dialogues[d]
                        .iter()
                        .map(|&i| encoder.encode_value(store, &ctx.bank.dialogues[i]))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    if rows.is_empty() {
                        return Err(Error::NoDialogues(ctx.doctor_id(d).to_string()));
                    }
                    let refs: Vec<&Tensor> = rows.iter().collect();
                    Tensor::concat_rows(&refs)?.mean_rows()?
                }
            };
            Ok((ctx.doctor_id(d).to_string(), v))
        })
        .collect()
}

/// Ranker training with the attention encoder bypassed by a pooled doctor
/// representation.
pub fn train_mlp_baseline(
    ctx: &RankContext,
    kind: BaselineKind,
    cfg: &ModelConfig,
    pretrained: Option<&ParamStore>,
) -> Result<(Recommender, TrainReport)> {
    let mode = kind
        .mlp_mode()
        .ok_or_else(|| Error::Config(format!("{kind} is not an MLP baseline")))?;
    let mut model = Recommender::init(
        ModelConfig {
            encoder_mode: mode,
            ..cfg.clone()
        },
        pretrained,
        None,
    )?;
    let report = train(&mut model, ctx)?;
    Ok((model, report))
}

/// Query-level ranker for the non-trained baselines over a frozen encoder.
pub struct FrozenBaseline<'a> {
    kind: BaselineKind,
    cfg: BaselineConfig,
    encoder: &'a TextEncoder,
    store: &'a ParamStore,
    pool: Vec<String>,
    counts: HashMap<String, usize>,
    knn: Option<KnnIndex>,
    vectors: Vec<(String, Tensor)>,
}

impl<'a> FrozenBaseline<'a> {
    pub fn new(
        ctx: &RankContext,
        cfg: &BaselineConfig,
        encoder: &'a TextEncoder,
        store: &'a ParamStore,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.kind.mlp_mode().is_some() {
            return Err(Error::Config(format!("{} needs training", cfg.kind)));
        }
        let pool: Vec<String> = ctx.pool.iter().map(|&d| ctx.doctor_id(d).to_string()).collect();
        let counts = ctx.split.train_counts(ctx.corpus).into_iter().collect();
        let knn = match cfg.kind {
            BaselineKind::Knn => Some(KnnIndex::build(ctx, encoder, store)?),
            _ => None,
        };
        let vectors = match cfg.kind {
            BaselineKind::CosProfile => doctor_vectors(ctx, encoder, store, CosineSource::Profile)?,
            BaselineKind::CosDialogue => doctor_vectors(ctx, encoder, store, CosineSource::DialogueMean)?,
            _ => Vec::new(),
        };
        Ok(Self {
            kind: cfg.kind,
            cfg: cfg.clone(),
            encoder,
            store,
            pool,
            counts,
            knn,
            vectors,
        })
    }

    pub fn rank(&self, query: &Document) -> Result<RankResult> {
        Ok(match self.kind {
            BaselineKind::Random => rank_random(&query.id, &self.pool, self.cfg.seed),
            BaselineKind::Frequency => rank_frequency(&self.pool, &self.counts),
            BaselineKind::Knn => {
                let e = self.encoder.encode_value(self.store, query)?;
                let index = self.knn.as_ref().expect("built for knn");
                rank_knn(&e, &self.pool, index, self.cfg.k_neighbors, &self.counts)
            }
            _ => rank_cosine(&self.encoder.encode_value(self.store, query)?, &self.vectors),
        })
    }
}
