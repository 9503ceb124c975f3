//! End-to-end run: split, optional self-learning, recommendation training,
//! and test-set evaluation.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{split_dataset, Corpus, Query, QuerySplit, SplitSpec};
use crate::embed::{DocumentBank, EncoderConfig, HashEncoder};
use crate::ranker::{evaluate, train, EvalReport, ModelConfig, RankContext, Recommender, TrainReport};
use crate::selflearn::{make_pairs, pretrain, PretrainConfig, PretrainReport};
use crate::tensor::ParamStore;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub split_seed: u64,
    /// `None` skips self-learning and starts from a random encoder.
    pub pretrain: Option<PretrainConfig>,
    pub model: ModelConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            split_seed: 0,
            pretrain: Some(PretrainConfig::default()),
            model: ModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub model: Recommender,
    pub split: SplitSpec,
    pub pretrain: Option<PretrainReport>,
    pub train: TrainReport,
    pub test: EvalReport,
}

/// Stage-1 training of a fresh hashing encoder; returns only the encoder weights.
pub fn pretrain_encoder(
    corpus: &Corpus,
    split: &SplitSpec,
    bank: &DocumentBank,
    encoder: EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<(ParamStore, HashEncoder, PretrainReport)> {
    let mut store = ParamStore::new();
    let enc = HashEncoder::init(&mut store, encoder)?;
    let pairs = make_pairs(corpus, split, cfg)?;
    let (_, report) = pretrain(&mut store, &enc, bank, &pairs, cfg)?;
    let store = store.subset("enc.");
    let enc = HashEncoder::attach(&store, encoder)?;
    Ok((store, enc, report))
}

pub fn run(corpus: &Corpus, stoplist: &HashSet<String>, cfg: &PipelineConfig) -> Result<PipelineRun> {
    let split = split_dataset(corpus, cfg.split_seed);
    let bank = DocumentBank::build(corpus, stoplist, cfg.model.encoder.hash_buckets);
    let (pretrained, pretrain_report) = match &cfg.pretrain {
        Some(p) => {
            let (store, _, report) = pretrain_encoder(corpus, &split, &bank, cfg.model.encoder, p)?;
            (Some(store), Some(report))
        }
        None => (None, None),
    };
    let ctx = RankContext::for_model(corpus, &split, &bank, &cfg.model);
    let mut model = Recommender::init(cfg.model.clone(), pretrained.as_ref(), None)?;
    let train_report = train(&mut model, &ctx)?;
    let queries: Vec<&Query> = split.queries(QuerySplit::Test).collect();
    let test = evaluate(&model, &ctx, &queries, None, &[])?;
    Ok(PipelineRun {
        model,
        split,
        pretrain: pretrain_report,
        train: train_report,
        test,
    })
}
