//! Stage-1 alignment: classify whether a profile and a dialogue belong to the
//! same doctor, training the text encoder so the two registers share a space.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{Corpus, SplitSpec};
use crate::embed::{DocumentBank, EncoderConfig, HashEncoder};
use crate::ranker::Mlp;
use crate::rng::stream;
use crate::tensor::{cosine, Adam, Graph, ParamStore, Var};
use crate::{Error, Result};

pub const STAGE: &str = "selflearn";

/// A (profile, dialogue) pair by corpus index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub doctor: usize,
    pub dialogue: usize,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub neg_ratio: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Epochs without held-out improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub hidden: usize,
    pub holdout_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            neg_ratio: 1,
            epochs: 30,
            batch: 16,
            lr: 0.008,
            patience: 5,
            seed: 0,
            hidden: 256,
            holdout_fraction: 0.1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neg_ratio == 0 || self.batch == 0 || self.hidden == 0 {
            return Err(Error::Config("neg_ratio, batch and hidden must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One positive per (doctor, training dialogue) and `neg_ratio` negatives
/// pairing the same profile with a uniformly drawn training dialogue of
/// another doctor.
pub fn make_pairs(corpus: &Corpus, split: &SplitSpec, cfg: &PretrainConfig) -> Result<Vec<PairExample>> {
    cfg.validate()?;
    let per_doctor: Vec<Vec<usize>> = (0..corpus.doctors().len())
        .map(|d| split.train_dialogues_of(corpus, d))
        .collect();
    let all: Vec<(usize, usize)> = per_doctor
        .iter()
        .enumerate()
        .flat_map(|(d, ds)| ds.iter().map(move |&x| (d, x)))
        .collect();
    let mut rng = stream(cfg.seed, "pairs");
    let mut pairs = Vec::with_capacity(all.len() * (1 + cfg.neg_ratio));
    for &(doctor, dialogue) in &all {
        let others = all.len() - per_doctor[doctor].len();
        if others == 0 {
            return Err(Error::Data(
                "self-learning needs training dialogues from at least two doctors".into(),
            ));
        }
        pairs.push(PairExample {
            doctor,
            dialogue,
            label: true,
        });
        for _ in 0..cfg.neg_ratio {
            // rejection keeps the draw uniform over other doctors' dialogues
            let neg = loop {
                let (d, x) = all[rng.gen_range(0..all.len())];
                if d != doctor {
                    break x;
                }
            };
            pairs.push(PairExample {
                doctor,
                dialogue: neg,
                label: false,
            });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_accuracy: f64,
    pub accuracy: f64,
    /// Mean per-pair training loss of each epoch.
    pub loss_curve: Vec<f64>,
    pub heldout_loss: Vec<f64>,
    pub best_epoch: usize,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
}

fn pair_scores(
    g: &mut Graph,
    store: &ParamStore,
    encoder: &HashEncoder,
    classifier: &Mlp,
    bank: &DocumentBank,
    pairs: &[PairExample],
) -> Result<Var> {
    let profiles: Vec<_> = pairs.iter().map(|p| &bank.profiles[p.doctor].features).collect();
    let dialogues: Vec<_> = pairs.iter().map(|p| &bank.dialogues[p.dialogue].features).collect();
    let e_p = encoder.encode(g, store, &profiles)?;
    let e_d = encoder.encode(g, store, &dialogues)?;
    let x = g.concat_cols(&[e_p, e_d])?;
    Ok(classifier.forward(g, store, x)?)
}

fn labels(pairs: &[PairExample]) -> Vec<f64> {
    pairs.iter().map(|p| if p.label { 1.0 } else { 0.0 }).collect()
}

/// Held-out accuracy at threshold 0.5 and mean loss.
pub fn pair_accuracy(
    store: &ParamStore,
    encoder: &HashEncoder,
    classifier: &Mlp,
    bank: &DocumentBank,
    pairs: &[PairExample],
) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Data("no pairs to score".into()));
    }
    let mut g = Graph::new();
    let s = pair_scores(&mut g, store, encoder, classifier, bank, pairs)?;
    let l = g.weighted_bce(s, &labels(pairs), 1.0)?;
    let scores = g.value(s);
    let correct = pairs
        .iter()
        .enumerate()
        .filter(|(i, p)| (scores.get(*i, 0) > 0.5) == p.label)
        .count();
    let n = pairs.len() as f64;
    Ok((correct as f64 / n, g.value(l).item() / n))
}

/// Mean encoder cosine over positive and over negative pairs.
pub fn mean_pair_cosine(
    store: &ParamStore,
    encoder: &HashEncoder,
    bank: &DocumentBank,
    pairs: &[PairExample],
) -> (f64, f64) {
    let mut sums = [(0.0, 0usize); 2];
    for p in pairs {
        let a = encoder.encode_value(store, &bank.profiles[p.doctor].features);
        let b = encoder.encode_value(store, &bank.dialogues[p.dialogue].features);
        let slot = &mut sums[p.label as usize];
        slot.0 += cosine(a.data(), b.data()).unwrap_or(0.0);
        slot.1 += 1;
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { f64::NAN } else { s / n as f64 };
    (mean(sums[1]), mean(sums[0]))
}

/// Adds a `cls.*` classifier to `store` and trains it jointly with the
/// encoder. The store keeps the parameters with the lowest held-out loss.
pub fn pretrain(
    store: &mut ParamStore,
    encoder: &HashEncoder,
    bank: &DocumentBank,
    pairs: &[PairExample],
    cfg: &PretrainConfig,
) -> Result<(Mlp, PretrainReport)> {
    cfg.validate()?;
    if !pairs.iter().any(|p| p.label) || pairs.iter().all(|p| p.label) {
        return Err(Error::Data("pretraining needs both positive and negative pairs".into()));
    }
    let classifier = Mlp::init(store, "cls", 2 * encoder.config.dim, cfg.hidden, cfg.seed)?;
    let mut shuffled = pairs.to_vec();
    shuffled.shuffle(&mut stream(cfg.seed, "holdout"));
    let n_held = ((shuffled.len() as f64 * cfg.holdout_fraction).ceil() as usize).min(shuffled.len() - 1);
    let heldout = shuffled.split_off(shuffled.len() - n_held);
    let mut train = shuffled;
    let eval_set: &[PairExample] = if heldout.is_empty() { &train } else { &heldout };
    let eval_set = eval_set.to_vec();

    let (initial_accuracy, _) = pair_accuracy(store, encoder, &classifier, bank, &eval_set)?;
    let mut report = PretrainReport {
        initial_accuracy,
        accuracy: initial_accuracy,
        loss_curve: Vec::new(),
        heldout_loss: Vec::new(),
        best_epoch: 0,
        train_pairs: train.len(),
        heldout_pairs: heldout.len(),
    };
    let mut adam = Adam::new(store, cfg.lr);
    store.zero_grads();
    let mut rng = stream(cfg.seed, "pretrain");
    let mut best: Option<(f64, ParamStore)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        train.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in train.chunks(cfg.batch).enumerate() {
            let mut g = Graph::new();
            let s = pair_scores(&mut g, store, encoder, &classifier, bank, chunk)?;
            let l = g.weighted_bce(s, &labels(chunk), 1.0)?;
            let value = g.value(l).item();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            g.backward(l, store)?;
            adam.step(store);
            total += value;
        }
        report.loss_curve.push(total / train.len() as f64);
        let (accuracy, loss) = pair_accuracy(store, encoder, &classifier, bank, &eval_set)?;
        report.heldout_loss.push(loss);
        if best.as_ref().is_none_or(|(l, _)| loss < *l) {
            best = Some((loss, store.clone()));
            report.best_epoch = epoch;
            report.accuracy = accuracy;
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, snapshot)) = best {
        *store = snapshot;
    }
    Ok((classifier, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EncoderMeta {
    stage: String,
    encoder: EncoderConfig,
}

/// Writes only the `enc.*` parameters, tagged with the stage-1 marker.
pub fn save_encoder<W: Write>(store: &ParamStore, encoder: &HashEncoder, w: W) -> Result<()> {
    let meta = EncoderMeta {
        stage: STAGE.to_string(),
        encoder: encoder.config,
    };
    let Value::Object(map) = serde_json::to_value(meta)? else {
        unreachable!("struct serializes to an object")
    };
    Ok(store.subset("enc.").save_checkpoint(w, map)?)
}

pub fn load_encoder<R: BufRead>(r: R) -> Result<(ParamStore, EncoderConfig)> {
    let (store, header) = ParamStore::load_checkpoint(r)?;
    let meta: EncoderMeta = serde_json::from_value(Value::Object(header.meta))?;
    if meta.stage != STAGE {
        return Err(Error::Config(format!(
            "expected a {STAGE} checkpoint, found stage {:?}",
            meta.stage
        )));
    }
    HashEncoder::attach(&store, meta.encoder)?;
    Ok((store, meta.encoder))
}
