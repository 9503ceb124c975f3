//! Doctor encoder: the profile embedding queries a doctor's dialogue
//! embeddings through multi-head scaled dot-product attention, and the
//! concatenated heads are projected back to the embedding width.
//!
//! The ablation and comparison modes swap out parts of that pipeline:
//!
//! | mode          | query            | keys / values            |
//! |---------------|------------------|--------------------------|
//! | `full`        | profile          | dialogues                |
//! | `no_profile`  | learned vector   | dialogues                |
//! | `no_dialogue` | profile          | the profile alone        |
//! | `dot_att`     | single-head `e_p·e_d` scores, weighted sum of dialogues |
//! | `cat_att`     | single-head `vᵀ tanh(W [e_p; e_d])` scores, same sum    |

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::Document;
use crate::rng::stream;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Full,
    NoProfile,
    NoDialogue,
    DotAtt,
    CatAtt,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 5] = [
        AttentionMode::Full,
        AttentionMode::NoProfile,
        AttentionMode::NoDialogue,
        AttentionMode::DotAtt,
        AttentionMode::CatAtt,
    ];

    pub fn uses_profile(self) -> bool {
        self != AttentionMode::NoProfile
    }

    pub fn uses_dialogues(self) -> bool {
        self != AttentionMode::NoDialogue
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::Full => "full",
            AttentionMode::NoProfile => "no_profile",
            AttentionMode::NoDialogue => "no_dialogue",
            AttentionMode::DotAtt => "dot_att",
            AttentionMode::CatAtt => "cat_att",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown attention mode {s:?}"))
    }
}

/// Scaled dot-product attention of one query row over `n` keys.
///
/// Returns `(h, weights)` with `weights = softmax(q·kᵀ / √dim)` and
/// `h = weights · v`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var), TensorError> {
    let (n, dim) = g.value(k).shape();
    if n == 0 {
        return Err(TensorError::Invalid {
            op: "attention",
            msg: "no keys (doctor without dialogues)".into(),
        });
    }
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt)?;
    let scaled = g.scale(logits, 1.0 / (dim as f64).sqrt());
    let weights = g.row_softmax(scaled);
    let h = g.matmul(weights, v)?;
    Ok((h, weights))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoctorEmbedding {
    pub vector: Tensor,
    /// One row per head, one column per attended item; rows sum to 1.
    pub attention_maps: Tensor,
}

/// Graph handles produced by [`DoctorEncoder::encode`].
#[derive(Debug, Clone)]
pub struct EncodedDoctor {
    pub embedding: Var,
    pub weights: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoctorEncoder {
    pub mode: AttentionMode,
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wo: Option<ParamId>,
    learned_query: Option<ParamId>,
    cat_w: Option<ParamId>,
    cat_v: Option<ParamId>,
}

fn head_names(j: usize) -> [String; 3] {
    [format!("Wq.{j}"), format!("Wk.{j}"), format!("Wv.{j}")]
}

impl DoctorEncoder {
    fn check_shape(dim: usize, heads: usize) -> Result<usize, TensorError> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Invalid {
                op: "doctor_encoder",
                msg: format!("dim {dim} is not divisible by {heads} heads"),
            });
        }
        Ok(dim / heads)
    }

    fn multi_head(mode: AttentionMode) -> bool {
        matches!(
            mode,
            AttentionMode::Full | AttentionMode::NoProfile | AttentionMode::NoDialogue
        )
    }

    /// Registers Xavier-initialized parameters for `mode` in `store`.
    pub fn init(
        store: &mut ParamStore,
        mode: AttentionMode,
        dim: usize,
        heads: usize,
        seed: u64,
    ) -> Result<Self, TensorError> {
        let mut rng = stream(seed, "doctor-encoder");
        let xavier = |r: usize, c: usize, rng: &mut crate::rng::Rng| Tensor::xavier(r, c, rng);
        if Self::multi_head(mode) {
            let head_dim = Self::check_shape(dim, heads)?;
            for j in 0..heads {
                for name in head_names(j) {
                    store.add(name, xavier(dim, head_dim, &mut rng))?;
                }
            }
            store.add("Wo", xavier(heads * head_dim, dim, &mut rng))?;
            if mode == AttentionMode::NoProfile {
                let bound = (3.0 / dim as f64).sqrt();
                let q = (0..dim).map(|_| rng.gen_range(-bound..=bound)).collect();
                store.add("learned_query", Tensor::row_vector(q))?;
            }
        } else if mode == AttentionMode::CatAtt {
            store.add("cat.W", xavier(2 * dim, dim, &mut rng))?;
            store.add("cat.v", xavier(dim, 1, &mut rng))?;
        }
        Self::attach(store, mode, dim, heads)
    }

    pub fn attach(store: &ParamStore, mode: AttentionMode, dim: usize, heads: usize) -> Result<Self, TensorError> {
        let mut enc = DoctorEncoder {
            mode,
            dim,
            heads: 1,
            head_dim: dim,
            wq: vec![],
            wk: vec![],
            wv: vec![],
            wo: None,
            learned_query: None,
            cat_w: None,
            cat_v: None,
        };
        if Self::multi_head(mode) {
            enc.head_dim = Self::check_shape(dim, heads)?;
            enc.heads = heads;
            for j in 0..heads {
                let [q, k, v] = head_names(j);
                enc.wq.push(store.require(&q)?);
                enc.wk.push(store.require(&k)?);
                enc.wv.push(store.require(&v)?);
            }
            enc.wo = Some(store.require("Wo")?);
            if mode == AttentionMode::NoProfile {
                enc.learned_query = Some(store.require("learned_query")?);
            }
        } else if mode == AttentionMode::CatAtt {
            enc.cat_w = Some(store.require("cat.W")?);
            enc.cat_v = Some(store.require("cat.v")?);
        }
        Ok(enc)
    }

    /// Records the doctor embedding on `g`. `profile` is `1×d`, `dialogues`
    /// is `n×d`; either may be omitted when the mode ignores it.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        profile: Option<Var>,
        dialogues: Option<Var>,
    ) -> Result<EncodedDoctor, TensorError> {
        let need = |v: Option<Var>, what: &str| {
            v.ok_or_else(|| TensorError::Invalid {
                op: "encode_doctor",
                msg: format!("{} mode needs {what}", self.mode),
            })
        };
        match self.mode {
            AttentionMode::Full | AttentionMode::NoProfile | AttentionMode::NoDialogue => {
                let (query, keys) = match self.mode {
                    AttentionMode::Full => (need(profile, "a profile")?, need(dialogues, "dialogues")?),
                    AttentionMode::NoProfile => (
                        g.param(store, self.learned_query.expect("attached")),
                        need(dialogues, "dialogues")?,
                    ),
                    _ => {
                        let p = need(profile, "a profile")?;
                        (p, p)
                    }
                };
                let mut heads = Vec::with_capacity(self.heads);
                let mut weights = Vec::with_capacity(self.heads);
                for j in 0..self.heads {
                    let wq = g.param(store, self.wq[j]);
                    let wk = g.param(store, self.wk[j]);
                    let wv = g.param(store, self.wv[j]);
                    let q = g.matmul(query, wq)?;
                    let k = g.matmul(keys, wk)?;
                    let v = g.matmul(keys, wv)?;
                    let (h, w) = attention(g, q, k, v)?;
                    heads.push(h);
                    weights.push(w);
                }
                let cat = g.concat_cols(&heads)?;
                let wo = g.param(store, self.wo.expect("attached"));
                let embedding = g.matmul(cat, wo)?;
                Ok(EncodedDoctor { embedding, weights })
            }
            AttentionMode::DotAtt | AttentionMode::CatAtt => {
                let p = need(profile, "a profile")?;
                let d = need(dialogues, "dialogues")?;
                let n = g.value(d).rows();
                if n == 0 {
                    return Err(TensorError::Invalid {
                        op: "attention",
                        msg: "no keys (doctor without dialogues)".into(),
                    });
                }
                let scores = if self.mode == AttentionMode::DotAtt {
                    let dt = g.transpose(d);
                    g.matmul(p, dt)?
                } else {
                    let ones = g.constant(Tensor::filled(n, 1, 1.0));
                    let rep = g.matmul(ones, p)?;
                    let pair = g.concat_cols(&[rep, d])?;
                    let w = g.param(store, self.cat_w.expect("attached"));
                    let v = g.param(store, self.cat_v.expect("attached"));
                    let hidden = g.matmul(pair, w)?;
                    let act = g.tanh(hidden);
                    let col = g.matmul(act, v)?;
                    g.transpose(col)
                };
                let w = g.row_softmax(scores);
                let embedding = g.matmul(w, d)?;
                Ok(EncodedDoctor {
                    embedding,
                    weights: vec![w],
                })
            }
        }
    }

    /// Forward-only evaluation.
    pub fn embed(
        &self,
        store: &ParamStore,
        profile: Option<&Tensor>,
        dialogues: Option<&Tensor>,
    ) -> Result<DoctorEmbedding, TensorError> {
        let mut g = Graph::new();
        let p = profile.map(|t| g.constant(t.clone()));
        let d = dialogues.map(|t| g.constant(t.clone()));
        let out = self.encode(&mut g, store, p, d)?;
        let maps: Vec<&Tensor> = out.weights.iter().map(|&w| g.value(w)).collect();
        Ok(DoctorEmbedding {
            vector: g.value(out.embedding).clone(),
            attention_maps: Tensor::concat_rows(&maps)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadExplanation {
    pub head: usize,
    pub weights: Vec<f64>,
    pub top_tokens: Vec<(String, f64)>,
}

/// Per head, ranks tokens by the attention mass of the dialogues containing
/// them. `lexicon`, when given, restricts candidates (e.g. to medical terms).
pub fn explain_heads(
    dialogues: &[&Document],
    attention_maps: &Tensor,
    k: usize,
    lexicon: Option<&HashSet<String>>,
) -> Vec<HeadExplanation> {
    (0..attention_maps.rows())
        .map(|head| {
            let weights = attention_maps.row(head).to_vec();
            let mut mass: BTreeMap<&str, f64> = BTreeMap::new();
            for (doc, &w) in dialogues.iter().zip(&weights) {
                let distinct: HashSet<&str> = doc.tokens.iter().map(String::as_str).collect();
                for t in distinct {
                    if lexicon.is_none_or(|lex| lex.contains(t)) {
                        *mass.entry(t).or_default() += w;
                    }
                }
            }
            let mut ranked: Vec<(String, f64)> = mass.into_iter().map(|(t, m)| (t.to_string(), m)).collect();
            // stable sort keeps the BTreeMap's lexicographic order among ties
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
            ranked.truncate(k);
            HeadExplanation {
                head,
                weights,
                top_tokens: ranked,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::grad_check;
    use rand::seq::SliceRandom;

    fn attend(q: Tensor, k: Tensor, v: Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(q), g.constant(k), g.constant(v));
        let (h, w) = attention(&mut g, q, k, v).unwrap();
        (g.value(h).clone(), g.value(w).clone())
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut rng = seeded(1);
        let row = Tensor::xavier(1, 4, &mut rng);
        let k = Tensor::concat_rows(&[&row, &row, &row]).unwrap();
        let v = Tensor::xavier(3, 4, &mut rng);
        let (h, w) = attend(Tensor::xavier(1, 4, &mut rng), k, v.clone());
        for x in w.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        let mean = v.mean_rows().unwrap();
        for (a, b) in h.data().iter().zip(mean.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut rng = seeded(2);
        let v = Tensor::xavier(1, 3, &mut rng);
        let (h, w) = attend(
            Tensor::xavier(1, 3, &mut rng),
            Tensor::xavier(1, 3, &mut rng),
            v.clone(),
        );
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(h, v);
    }

    #[test]
    fn hand_evaluated_softmax() {
        // softmax([10/√2, 0])
        let q = Tensor::row_vector(vec![1.0, 0.0]);
        let k = Tensor::from_vec(2, 2, vec![10.0, 0.0, 0.0, 10.0]).unwrap();
        let (_, w) = attend(q, k, Tensor::identity(2));
        let z = 10.0 / 2f64.sqrt();
        let expect = 1.0 / (1.0 + (-z).exp());
        assert!((w.get(0, 0) - expect).abs() < 1e-12);
        assert!((w.get(0, 0) - 0.99915).abs() < 5e-6);
        assert!((w.get(0, 1) - 0.00085).abs() < 5e-6);
    }

    #[test]
    fn zero_keys_is_an_error() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(1, 2));
        let k = g.constant(Tensor::zeros(0, 2));
        assert!(attention(&mut g, q, k, k).is_err());
    }

    #[test]
    fn scaling_query_and_key_keeps_argmax() {
        let mut rng = seeded(4);
        for _ in 0..20 {
            let q = Tensor::xavier(1, 6, &mut rng);
            let k = Tensor::xavier(5, 6, &mut rng);
            let v = Tensor::identity(5).gather_rows(&[0, 1, 2, 3, 4]).unwrap();
            let v = Tensor::concat_cols(&[&v, &Tensor::zeros(5, 1)]).unwrap();
            let argmax = |w: &Tensor| {
                (0..w.cols())
                    .max_by(|&a, &b| w.get(0, a).total_cmp(&w.get(0, b)))
                    .unwrap()
            };
            let (_, w1) = attend(q.clone(), k.clone(), v.clone());
            let (_, w2) = attend(q.scale(3.0), k.scale(3.0), v);
            assert_eq!(argmax(&w1), argmax(&w2));
        }
    }

    #[test]
    fn identity_pipeline_returns_dialogue() {
        let d = 4;
        let mut store = ParamStore::new();
        for name in head_names(0) {
            store.add(name, Tensor::identity(d)).unwrap();
        }
        store.add("Wo", Tensor::identity(d)).unwrap();
        let enc = DoctorEncoder::attach(&store, AttentionMode::Full, d, 1).unwrap();
        let mut rng = seeded(8);
        let dlg = Tensor::xavier(1, d, &mut rng);
        let out = enc
            .embed(&store, Some(&Tensor::xavier(1, d, &mut rng)), Some(&dlg))
            .unwrap();
        for (a, b) in out.vector.data().iter().zip(dlg.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn dot_att_orthogonal_profile_is_uniform() {
        let store = ParamStore::new();
        let enc = DoctorEncoder::attach(&store, AttentionMode::DotAtt, 3, 1).unwrap();
        let p = Tensor::row_vector(vec![0.0, 0.0, 1.0]);
        let d = Tensor::from_vec(2, 3, vec![1.0, 2.0, 0.0, -3.0, 0.5, 0.0]).unwrap();
        let out = enc.embed(&store, Some(&p), Some(&d)).unwrap();
        assert_eq!(out.attention_maps.data(), &[0.5, 0.5]);
        let mean = d.mean_rows().unwrap();
        assert_eq!(out.vector, mean);
    }

    #[test]
    fn every_mode_maps_rows_sum_to_one_and_are_permutation_invariant() {
        let d = 8;
        let mut rng = seeded(21);
        let profile = Tensor::xavier(1, d, &mut rng);
        let dialogues = Tensor::xavier(5, d, &mut rng).scale(3.0);
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut rng);
        let permuted = dialogues.gather_rows(&perm).unwrap();
        for mode in AttentionMode::ALL {
            let mut store = ParamStore::new();
            let enc = DoctorEncoder::init(&mut store, mode, d, 2, 7).unwrap();
            let a = enc.embed(&store, Some(&profile), Some(&dialogues)).unwrap();
            let b = enc.embed(&store, Some(&profile), Some(&permuted)).unwrap();
            for r in 0..a.attention_maps.rows() {
                let s: f64 = a.attention_maps.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "{mode}");
            }
            for (x, y) in a.vector.data().iter().zip(b.vector.data()) {
                assert!((x - y).abs() < 1e-9, "{mode}");
            }
            if mode.uses_dialogues() {
                for r in 0..a.attention_maps.rows() {
                    for (i, &p) in perm.iter().enumerate() {
                        let diff = a.attention_maps.get(r, p) - b.attention_maps.get(r, i);
                        assert!(diff.abs() < 1e-12, "{mode}");
                    }
                }
            }
        }
    }

    #[test]
    fn every_mode_passes_grad_check() {
        let d = 6;
        let mut rng = seeded(5);
        let profile = Tensor::xavier(1, d, &mut rng);
        let dialogues = Tensor::xavier(4, d, &mut rng);
        let target = Tensor::xavier(1, d, &mut rng);
        for mode in AttentionMode::ALL {
            let mut store = ParamStore::new();
            let enc = DoctorEncoder::init(&mut store, mode, d, 2, 3).unwrap();
            let p = store.add("input.p", profile.clone()).unwrap();
            let dl = store.add("input.d", dialogues.clone()).unwrap();
            let r = grad_check(&mut store, 1e-5, |g, s| -> Result<Var, TensorError> {
                let (pv, dv) = (g.param(s, p), g.param(s, dl));
                let out = enc.encode(g, s, Some(pv), Some(dv))?;
                let t = g.constant(target.clone());
                let prod = g.mul(out.embedding, t)?;
                let th = g.tanh(prod);
                Ok(g.sum(th))
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-3, "{mode}: {r:?}");
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::new();
        assert!(DoctorEncoder::init(&mut store, AttentionMode::Full, 64, 6, 0).is_err());
        assert!(DoctorEncoder::init(&mut store, AttentionMode::Full, 48, 6, 0).is_ok());
    }

    fn doc(tokens: &[&str]) -> Document {
        Document::new("x".into(), tokens.iter().map(|s| s.to_string()).collect(), 16)
    }

    #[test]
    fn explain_degenerate_attention_returns_that_dialogue() {
        let a = doc(&["fever", "cough", "fever", "rash"]);
        let b = doc(&["knee", "pain"]);
        let maps = Tensor::row_vector(vec![1.0, 0.0]);
        let out = explain_heads(&[&a, &b], &maps, 2, None);
        assert_eq!(out.len(), 1);
        // ties among weight-1 tokens fall back to lexicographic order
        let tokens: Vec<&str> = out[0].top_tokens.iter().map(|(t, _)| t.as_str()).collect();
        assert_eq!(tokens, ["cough", "fever"]);
        let all = explain_heads(&[&a, &b], &maps, 10, None);
        let top: Vec<&str> = all[0]
            .top_tokens
            .iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(t, _)| t.as_str())
            .collect();
        assert_eq!(top, ["cough", "fever", "rash"]);
    }

    #[test]
    fn explain_respects_lexicon() {
        let a = doc(&["fever", "the", "cough"]);
        let lex: HashSet<String> = ["cough".to_string()].into();
        let out = explain_heads(&[&a], &Tensor::row_vector(vec![1.0]), 5, Some(&lex));
        assert_eq!(out[0].top_tokens, vec![("cough".to_string(), 1.0)]);
    }
}
