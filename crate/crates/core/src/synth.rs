//! Synthetic forums with planted expertise.
//!
//! Topic `t` owns the dialogue-register vocabulary `t{t}_{i}`; profiles use
//! the disjoint professional-register twin `p_t{t}_{i}`, so the only link
//! between a profile and its doctor's dialogues is learned. A shared noise
//! vocabulary `n{j}` is mixed in at `noise_fraction`.
//!
//! Each doctor also prefers some words of a topic over others: topic words are
//! drawn Zipf-style (exponent `signature_skew`) over a doctor-specific
//! permutation of the vocabulary. This is what separates doctors that share a
//! primary topic; with `signature_skew = 0` they are statistically identical.

use std::collections::BTreeMap;
use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::{Corpus, Dialogue, Doctor, Role, Turn};
use crate::rng::seeded;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_topics: usize,
    pub n_doctors: usize,
    pub dialogues_per_doctor: usize,
    pub turns_per_dialogue: usize,
    pub tokens_per_turn: usize,
    pub vocab_per_topic: usize,
    pub shared_noise_vocab: usize,
    pub noise_fraction: f64,
    pub expertise_concentration: f64,
    pub signature_skew: f64,
    /// Zipf exponent of profile words; 0 draws them uniformly from the topic
    /// vocabulary, so profiles identify the department but not the doctor.
    pub profile_skew: f64,
    pub profile_tokens: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_topics: 5,
            n_doctors: 20,
            dialogues_per_doctor: 40,
            turns_per_dialogue: 4,
            tokens_per_turn: 20,
            vocab_per_topic: 40,
            shared_noise_vocab: 200,
            noise_fraction: 0.3,
            expertise_concentration: 0.9,
            signature_skew: 1.0,
            profile_skew: 0.0,
            profile_tokens: 40,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_topics", self.n_topics),
            ("n_doctors", self.n_doctors),
            ("dialogues_per_doctor", self.dialogues_per_doctor),
            ("turns_per_dialogue", self.turns_per_dialogue),
            ("tokens_per_turn", self.tokens_per_turn),
            ("vocab_per_topic", self.vocab_per_topic),
            ("shared_noise_vocab", self.shared_noise_vocab),
            ("profile_tokens", self.profile_tokens),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return Err(Error::Config("noise_fraction must be in [0, 1)".into()));
        }
        if !(self.expertise_concentration > 0.0 && self.expertise_concentration <= 1.0) {
            return Err(Error::Config("expertise_concentration must be in (0, 1]".into()));
        }
        for (name, v) in [
            ("signature_skew", self.signature_skew),
            ("profile_skew", self.profile_skew),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }

    /// Topic weights for the doctor at position `index`.
    pub fn mixture(&self, index: usize) -> Vec<f64> {
        let primary = index % self.n_topics;
        if self.n_topics == 1 {
            return vec![1.0];
        }
        let rest = (1.0 - self.expertise_concentration) / (self.n_topics - 1) as f64;
        (0..self.n_topics)
            .map(|t| {
                if t == primary {
                    self.expertise_concentration
                } else {
                    rest
                }
            })
            .collect()
    }
}

pub fn topic_token(topic: usize, i: usize) -> String {
    format!("t{topic}_{i}")
}

pub fn profile_token(topic: usize, i: usize) -> String {
    format!("p_t{topic}_{i}")
}

/// Topic of a planted token in either register.
pub fn token_topic(token: &str) -> Option<usize> {
    let rest = token.strip_prefix("p_").unwrap_or(token).strip_prefix('t')?;
    let (topic, idx) = rest.split_once('_')?;
    idx.parse::<usize>().ok()?;
    topic.parse().ok()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub doctor_mixture: BTreeMap<String, Vec<f64>>,
    pub dialogue_topic: BTreeMap<String, usize>,
}

impl GroundTruth {
    /// Flat JSON object: doctor ids map to `{topic: weight}`, dialogue ids to a topic.
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for (id, mix) in &self.doctor_mixture {
            let weights: Map<String, Value> = mix
                .iter()
                .enumerate()
                .map(|(t, w)| (t.to_string(), Value::from(*w)))
                .collect();
            map.insert(id.clone(), Value::Object(weights));
        }
        for (id, t) in &self.dialogue_topic {
            map.insert(id.clone(), Value::from(*t));
        }
        Value::Object(map)
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let bad = || Error::Data("ground truth must be a JSON object".into());
        let mut out = GroundTruth::default();
        for (id, entry) in v.as_object().ok_or_else(bad)? {
            match entry {
                Value::Number(n) => {
                    let t = n.as_u64().ok_or_else(bad)? as usize;
                    out.dialogue_topic.insert(id.clone(), t);
                }
                Value::Object(weights) => {
                    let mut mix = vec![0.0; weights.len()];
                    for (t, w) in weights {
                        let t: usize = t.parse().map_err(|_| bad())?;
                        let w = w.as_f64().ok_or_else(bad)?;
                        if t >= mix.len() {
                            mix.resize(t + 1, 0.0);
                        }
                        mix[t] = w;
                    }
                    out.doctor_mixture.insert(id.clone(), mix);
                }
                _ => return Err(bad()),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub truth: GroundTruth,
}

impl SynthCorpus {
    pub fn write_ground_truth<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, &self.truth.to_json())?;
        Ok(())
    }
}

struct Sampler<'a> {
    cfg: &'a SynthConfig,
    /// Per topic, a doctor-specific ordering of the vocabulary.
    perm: Vec<Vec<usize>>,
    topic: WeightedIndex<f64>,
}

impl Sampler<'_> {
    fn token<R: Rng>(
        &self,
        rng: &mut R,
        topic: usize,
        rank: &WeightedIndex<f64>,
        register: fn(usize, usize) -> String,
    ) -> String {
        if rng.gen::<f64>() < self.cfg.noise_fraction {
            return format!("n{}", rng.gen_range(0..self.cfg.shared_noise_vocab));
        }
        register(topic, self.perm[topic][rank.sample(rng)])
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let width = (cfg.n_doctors.saturating_sub(1)).to_string().len().max(2);
    let zipf = |skew: f64| {
        let w: Vec<f64> = (0..cfg.vocab_per_topic)
            .map(|r| 1.0 / ((r + 1) as f64).powf(skew))
            .collect();
        WeightedIndex::new(w).expect("positive weights")
    };
    let dialogue_rank = zipf(cfg.signature_skew);
    let profile_rank = zipf(cfg.profile_skew);

    let mut samplers = Vec::with_capacity(cfg.n_doctors);
    for i in 0..cfg.n_doctors {
        let perm = (0..cfg.n_topics)
            .map(|_| {
                let mut perm: Vec<usize> = (0..cfg.vocab_per_topic).collect();
                perm.shuffle(&mut rng);
                perm
            })
            .collect();
        let topic = WeightedIndex::new(cfg.mixture(i)).map_err(|e| Error::Config(format!("mixture: {e}")))?;
        samplers.push(Sampler { cfg, perm, topic });
    }

    let mut truth = GroundTruth::default();
    let mut doctors = Vec::with_capacity(cfg.n_doctors);
    let mut dialogues = Vec::new();
    for (i, s) in samplers.iter().enumerate() {
        let doctor_id = format!("d{i:0width$}");
        let profile: Vec<String> = (0..cfg.profile_tokens)
            .map(|_| {
                let t = s.topic.sample(&mut rng);
                s.token(&mut rng, t, &profile_rank, profile_token)
            })
            .collect();
        doctors.push(Doctor {
            doctor_id: doctor_id.clone(),
            department: format!("topic{}", i % cfg.n_topics),
            profile_text: profile.join(" "),
            dialogue_ids: vec![],
        });
        truth.doctor_mixture.insert(doctor_id.clone(), cfg.mixture(i));

        for k in 0..cfg.dialogues_per_doctor {
            let topic = s.topic.sample(&mut rng);
            let dialogue_id = format!("{doctor_id}-x{k:03}");
            let turns = (0..cfg.turns_per_dialogue)
                .map(|j| Turn {
                    role: if j % 2 == 0 { Role::Patient } else { Role::Doctor },
                    text: (0..cfg.tokens_per_turn)
                        .map(|_| s.token(&mut rng, topic, &dialogue_rank, topic_token))
                        .collect::<Vec<_>>()
                        .join(" "),
                })
                .collect();
            truth.dialogue_topic.insert(dialogue_id.clone(), topic);
            dialogues.push(Dialogue {
                dialogue_id,
                doctor_id: doctor_id.clone(),
                turns,
            });
        }
    }
    let corpus = Corpus::new(doctors, dialogues)?;
    Ok(SynthCorpus { corpus, truth })
}
