//! Forum corpus: doctors with profiles, dialogues as ordered turns, and the
//! queries derived from held-out dialogues.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::seeded;

/// Documents are truncated to this many tokens, keeping the head.
pub const MAX_DOC_TOKENS: usize = 512;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}:{line}: malformed record: {msg}")]
    Malformed { file: String, line: usize, msg: String },
    #[error("duplicate doctor_id {0:?}")]
    DuplicateDoctor(String),
    #[error("duplicate dialogue_id {0:?}")]
    DuplicateDialogue(String),
    #[error("dialogue {dialogue_id:?} references unknown doctor {doctor_id:?}")]
    DanglingDoctor { dialogue_id: String, doctor_id: String },
    #[error("dialogue {0:?} has no turns")]
    EmptyDialogue(String),
    #[error("dialogue {0:?} does not start with a patient turn")]
    FirstTurnNotPatient(String),
    #[error("dialogue {dialogue_id:?} turn {index} is empty")]
    EmptyTurn { dialogue_id: String, index: usize },
    #[error("cannot read {path}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Patient,
    Doctor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub doctor_id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// The opening patient turn.
    pub fn query_text(&self) -> &str {
        &self.turns[0].text
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Doctor {
    pub doctor_id: String,
    pub department: String,
    #[serde(rename = "profile")]
    pub profile_text: String,
    #[serde(skip)]
    pub dialogue_ids: Vec<String>,
}

/// Cross-referenced doctors and dialogues, in file order.
#[derive(Debug, Clone)]
pub struct Corpus {
    doctors: Vec<Doctor>,
    dialogues: Vec<Dialogue>,
    doctor_index: HashMap<String, usize>,
    dialogue_index: HashMap<String, usize>,
    doctor_dialogues: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn new(mut doctors: Vec<Doctor>, dialogues: Vec<Dialogue>) -> Result<Self, CorpusError> {
        let mut doctor_index = HashMap::with_capacity(doctors.len());
        for (i, d) in doctors.iter_mut().enumerate() {
            if doctor_index.insert(d.doctor_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateDoctor(d.doctor_id.clone()));
            }
            d.dialogue_ids.clear();
        }
        let mut dialogue_index = HashMap::with_capacity(dialogues.len());
        let mut doctor_dialogues = vec![Vec::new(); doctors.len()];
        for (i, dlg) in dialogues.iter().enumerate() {
            if dialogue_index.insert(dlg.dialogue_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateDialogue(dlg.dialogue_id.clone()));
            }
            validate_turns(dlg)?;
            let Some(&owner) = doctor_index.get(&dlg.doctor_id) else {
                return Err(CorpusError::DanglingDoctor {
                    dialogue_id: dlg.dialogue_id.clone(),
                    doctor_id: dlg.doctor_id.clone(),
                });
            };
            doctors[owner].dialogue_ids.push(dlg.dialogue_id.clone());
            doctor_dialogues[owner].push(i);
        }
        Ok(Self {
            doctors,
            dialogues,
            doctor_index,
            dialogue_index,
            doctor_dialogues,
        })
    }

    pub fn doctors(&self) -> &[Doctor] {
        &self.doctors
    }

    pub fn dialogues(&self) -> &[Dialogue] {
        &self.dialogues
    }

    pub fn doctor_idx(&self, doctor_id: &str) -> Option<usize> {
        self.doctor_index.get(doctor_id).copied()
    }

    pub fn dialogue_idx(&self, dialogue_id: &str) -> Option<usize> {
        self.dialogue_index.get(dialogue_id).copied()
    }

    pub fn doctor(&self, doctor_id: &str) -> Option<&Doctor> {
        self.doctor_idx(doctor_id).map(|i| &self.doctors[i])
    }

    pub fn dialogue(&self, dialogue_id: &str) -> Option<&Dialogue> {
        self.dialogue_idx(dialogue_id).map(|i| &self.dialogues[i])
    }

    /// Indices into [`Corpus::dialogues`] for one doctor, in file order.
    pub fn dialogues_of(&self, doctor_idx: usize) -> &[usize] {
        &self.doctor_dialogues[doctor_idx]
    }

    pub fn write_doctors<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for d in &self.doctors {
            serde_json::to_writer(&mut w, d)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_dialogues<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for d in &self.dialogues {
            serde_json::to_writer(&mut w, d)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, doctors_path: &Path, dialogues_path: &Path) -> Result<(), CorpusError> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| CorpusError::Io { path, source }
        };
        let f = File::create(doctors_path).map_err(io(doctors_path))?;
        self.write_doctors(std::io::BufWriter::new(f))
            .map_err(io(doctors_path))?;
        let f = File::create(dialogues_path).map_err(io(dialogues_path))?;
        self.write_dialogues(std::io::BufWriter::new(f))
            .map_err(io(dialogues_path))
    }
}

fn validate_turns(dlg: &Dialogue) -> Result<(), CorpusError> {
    let Some(first) = dlg.turns.first() else {
        return Err(CorpusError::EmptyDialogue(dlg.dialogue_id.clone()));
    };
    if first.role != Role::Patient {
        return Err(CorpusError::FirstTurnNotPatient(dlg.dialogue_id.clone()));
    }
    if let Some(index) = dlg.turns.iter().position(|t| t.text.trim().is_empty()) {
        return Err(CorpusError::EmptyTurn {
            dialogue_id: dlg.dialogue_id.clone(),
            index,
        });
    }
    Ok(())
}

fn parse_lines<T, R>(reader: R, file: &str) -> Result<Vec<T>, CorpusError>
where
    T: for<'de> Deserialize<'de>,
    R: BufRead,
{
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: file.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            file: file.to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_corpus<A: BufRead, B: BufRead>(doctors: A, dialogues: B) -> Result<Corpus, CorpusError> {
    let docs = parse_lines(doctors, "doctors")?;
    let dlgs = parse_lines(dialogues, "dialogues")?;
    Corpus::new(docs, dlgs)
}

pub fn load_corpus(doctors_path: &Path, dialogues_path: &Path) -> Result<Corpus, CorpusError> {
    let open = |p: &Path| {
        File::open(p).map(BufReader::new).map_err(|source| CorpusError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    let docs = parse_lines(open(doctors_path)?, &doctors_path.display().to_string())?;
    let dlgs = parse_lines(open(dialogues_path)?, &dialogues_path.display().to_string())?;
    Corpus::new(docs, dlgs)
}

/// Stoplist or lexicon file: one term per line, case-folded.
pub fn load_term_list(path: &Path) -> Result<HashSet<String>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

fn is_token_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Lowercased tokens split on whitespace and punctuation. Stoplist members
/// are dropped unless `keep_stopwords` is set.
pub fn tokenize(text: &str, stoplist: &HashSet<String>, keep_stopwords: bool) -> Vec<String> {
    text.split(|c: char| !is_token_char(c))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| keep_stopwords || !stoplist.contains(t))
        .collect()
}

fn capped(mut tokens: Vec<String>) -> Vec<String> {
    tokens.truncate(MAX_DOC_TOKENS);
    tokens
}

pub fn query_tokens(dialogue: &Dialogue) -> Vec<String> {
    capped(tokenize(dialogue.query_text(), &HashSet::new(), true))
}

pub fn profile_tokens(doctor: &Doctor) -> Vec<String> {
    capped(tokenize(&doctor.profile_text, &HashSet::new(), true))
}

/// Turns joined in order; stopwords are removed from every turn but the first.
pub fn dialogue_tokens(dialogue: &Dialogue, stoplist: &HashSet<String>) -> Vec<String> {
    let mut out = Vec::new();
    for (i, turn) in dialogue.turns.iter().enumerate() {
        out.extend(tokenize(&turn.text, stoplist, i == 0));
        if out.len() >= MAX_DOC_TOKENS {
            break;
        }
    }
    capped(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySplit {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub tokens: Vec<String>,
    pub gold_doctor_id: String,
    pub source_dialogue_id: String,
    pub split: QuerySplit,
}

impl Query {
    pub fn from_dialogue(dialogue: &Dialogue, split: QuerySplit) -> Self {
        Self {
            query_id: format!("q-{}", dialogue.dialogue_id),
            tokens: query_tokens(dialogue),
            gold_doctor_id: dialogue.doctor_id.clone(),
            source_dialogue_id: dialogue.dialogue_id.clone(),
            split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_dialogues: BTreeSet<String>,
    pub queries: Vec<Query>,
}

/// `round(0.8 n)` with halves rounded up.
pub fn train_count(n: usize) -> usize {
    (8 * n + 5) / 10
}

/// Per-doctor seeded 80/20 split; held-out first turns become queries, shuffled
/// and halved into validation (gets the odd one) and test.
pub fn split_dataset(corpus: &Corpus, seed: u64) -> SplitSpec {
    let mut rng = seeded(seed);
    let mut train = BTreeSet::new();
    let mut held = Vec::new();
    for doctor in corpus.doctors() {
        let mut ids = doctor.dialogue_ids.clone();
        ids.shuffle(&mut rng);
        let n_train = train_count(ids.len());
        train.extend(ids[..n_train].iter().cloned());
        held.extend(ids[n_train..].iter().cloned());
    }
    held.shuffle(&mut rng);
    let n_val = held.len().div_ceil(2);
    let queries = held
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let dlg = corpus.dialogue(id).expect("id from corpus");
            let split = if i < n_val { QuerySplit::Val } else { QuerySplit::Test };
            Query::from_dialogue(dlg, split)
        })
        .collect();
    SplitSpec {
        seed,
        train_dialogues: train,
        queries,
    }
}

impl SplitSpec {
    pub fn is_train(&self, dialogue_id: &str) -> bool {
        self.train_dialogues.contains(dialogue_id)
    }

    /// A doctor's training dialogue indices in corpus order.
    pub fn train_dialogues_of(&self, corpus: &Corpus, doctor_idx: usize) -> Vec<usize> {
        corpus
            .dialogues_of(doctor_idx)
            .iter()
            .copied()
            .filter(|&i| self.is_train(&corpus.dialogues()[i].dialogue_id))
            .collect()
    }

    pub fn queries(&self, split: QuerySplit) -> impl Iterator<Item = &Query> {
        self.queries.iter().filter(move |q| q.split == split)
    }

    /// First turns of the training dialogues, in corpus order.
    pub fn train_queries(&self, corpus: &Corpus) -> Vec<Query> {
        corpus
            .dialogues()
            .iter()
            .filter(|d| self.is_train(&d.dialogue_id))
            .map(|d| Query::from_dialogue(d, QuerySplit::Train))
            .collect()
    }

    pub fn train_counts(&self, corpus: &Corpus) -> Vec<(String, usize)> {
        corpus
            .doctors()
            .iter()
            .enumerate()
            .map(|(i, d)| (d.doctor_id.clone(), self.train_dialogues_of(corpus, i).len()))
            .collect()
    }
}

/// Doctors by descending training-dialogue count, ties by ascending id.
pub fn candidate_pool(corpus: &Corpus, split: &SplitSpec, size: usize) -> Vec<String> {
    let mut counts = split.train_counts(corpus);
    counts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    counts.into_iter().take(size).map(|(id, _)| id).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `edges[i]..edges[i+1]` is bin `i`; the last bin includes its upper edge.
    pub edges: Vec<usize>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn build(values: &[usize], bins: usize) -> Self {
        let (Some(&min), Some(&max)) = (values.iter().min(), values.iter().max()) else {
            return Self {
                edges: vec![0, 1],
                counts: vec![0],
            };
        };
        let width = (max - min + 1).div_ceil(bins.max(1)).max(1);
        let n_bins = (max - min) / width + 1;
        let edges = (0..=n_bins).map(|i| min + i * width).collect();
        let mut counts = vec![0; n_bins];
        for &v in values {
            counts[(v - min) / width] += 1;
        }
        Self { edges, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub dialogue_count: usize,
    pub doctor_count: usize,
    pub department_count: usize,
    pub avg_tokens_query: f64,
    pub avg_tokens_dialogue: f64,
    pub avg_tokens_profile: f64,
    pub dialogues_per_doctor_histogram: Histogram,
    pub dialogue_length_histogram: Histogram,
    pub medical_term_fraction_profile: f64,
    pub medical_term_fraction_patient_turns: f64,
    pub medical_term_fraction_doctor_turns: f64,
}

const HISTOGRAM_BINS: usize = 10;

pub fn corpus_stats(corpus: &Corpus, medical_lexicon: &HashSet<String>) -> StatsReport {
    let none = HashSet::new();
    let tok = |t: &str| tokenize(t, &none, true);
    let mean = |v: &[usize]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<usize>() as f64 / v.len() as f64
        }
    };
    // (medical, total) counts
    let mut profile_terms = (0usize, 0usize);
    let mut patient_terms = (0usize, 0usize);
    let mut doctor_terms = (0usize, 0usize);
    let tally = |acc: &mut (usize, usize), tokens: &[String]| {
        acc.0 += tokens.iter().filter(|t| medical_lexicon.contains(*t)).count();
        acc.1 += tokens.len();
    };

    let mut profile_lens = Vec::new();
    for d in corpus.doctors() {
        let t = tok(&d.profile_text);
        profile_lens.push(t.len());
        tally(&mut profile_terms, &t);
    }
    let mut query_lens = Vec::new();
    let mut dialogue_lens = Vec::new();
    for dlg in corpus.dialogues() {
        let mut total = 0;
        for (i, turn) in dlg.turns.iter().enumerate() {
            let t = tok(&turn.text);
            if i == 0 {
                query_lens.push(t.len());
            }
            total += t.len();
            match turn.role {
                Role::Patient => tally(&mut patient_terms, &t),
                Role::Doctor => tally(&mut doctor_terms, &t),
            }
        }
        dialogue_lens.push(total);
    }
    let frac = |(m, t): (usize, usize)| if t == 0 { 0.0 } else { m as f64 / t as f64 };
    let per_doctor: Vec<usize> = (0..corpus.doctors().len())
        .map(|i| corpus.dialogues_of(i).len())
        .collect();
    let departments: HashSet<&str> = corpus.doctors().iter().map(|d| d.department.as_str()).collect();

    StatsReport {
        dialogue_count: corpus.dialogues().len(),
        doctor_count: corpus.doctors().len(),
        department_count: departments.len(),
        avg_tokens_query: mean(&query_lens),
        avg_tokens_dialogue: mean(&dialogue_lens),
        avg_tokens_profile: mean(&profile_lens),
        dialogues_per_doctor_histogram: Histogram::build(&per_doctor, HISTOGRAM_BINS),
        dialogue_length_histogram: Histogram::build(&dialogue_lens, HISTOGRAM_BINS),
        medical_term_fraction_profile: frac(profile_terms),
        medical_term_fraction_patient_turns: frac(patient_terms),
        medical_term_fraction_doctor_turns: frac(doctor_terms),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doctor(id: &str, profile: &str) -> Doctor {
        Doctor {
            doctor_id: id.into(),
            department: "neuro".into(),
            profile_text: profile.into(),
            dialogue_ids: vec![],
        }
    }

    fn dialogue(id: &str, doc: &str, texts: &[&str]) -> Dialogue {
        Dialogue {
            dialogue_id: id.into(),
            doctor_id: doc.into(),
            turns: texts
                .iter()
                .enumerate()
                .map(|(i, t)| Turn {
                    role: if i % 2 == 0 { Role::Patient } else { Role::Doctor },
                    text: (*t).into(),
                })
                .collect(),
        }
    }

    fn stop(words: &[&str]) -> HashSet<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        let s = stop(&["and"]);
        assert_eq!(tokenize("Headache and nausea", &s, false), ["headache", "nausea"]);
        assert_eq!(tokenize("Headache and nausea", &s, true), ["headache", "and", "nausea"]);
        assert!(tokenize("", &HashSet::new(), false).is_empty());
        assert_eq!(
            tokenize("Dizzy, tired... p_t3_12!", &HashSet::new(), true),
            ["dizzy", "tired", "p_t3_12"]
        );
        assert_eq!(tokenize("失眠，头晕", &HashSet::new(), true), ["失眠", "头晕"]);
    }

    #[test]
    fn loads_two_doctors_three_dialogues() {
        let docs = r#"{"doctor_id":"d1","department":"neuro","profile":"nerve pain"}
{"doctor_id":"d2","department":"derm","profile":"skin"}
"#;
        let dlgs = r#"{"dialogue_id":"x1","doctor_id":"d1","turns":[{"role":"patient","text":"my head hurts"}]}
{"dialogue_id":"x2","doctor_id":"d2","turns":[{"role":"patient","text":"rash"},{"role":"doctor","text":"cream"}]}
{"dialogue_id":"x3","doctor_id":"d1","turns":[{"role":"patient","text":"numb hands"}]}
"#;
        let c = read_corpus(docs.as_bytes(), dlgs.as_bytes()).unwrap();
        assert_eq!(c.doctors().len(), 2);
        assert_eq!(c.dialogues().len(), 3);
        assert_eq!(c.doctor("d1").unwrap().dialogue_ids, ["x1", "x3"]);
    }

    #[test]
    fn dangling_reference_names_doctor() {
        let docs = r#"{"doctor_id":"d1","department":"a","profile":"p"}"#;
        let dlgs = r#"{"dialogue_id":"x","doctor_id":"d99","turns":[{"role":"patient","text":"hi"}]}"#;
        let err = read_corpus(docs.as_bytes(), dlgs.as_bytes()).unwrap_err();
        assert!(matches!(err, CorpusError::DanglingDoctor { .. }));
        assert!(err.to_string().contains("d99"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let docs = "{\"doctor_id\":\"d1\",\"department\":\"a\",\"profile\":\"p\"}\n\nnot json\n";
        let err = read_corpus(docs.as_bytes(), "".as_bytes()).unwrap_err();
        match err {
            CorpusError::Malformed { line, .. } => assert_eq!(line, 3),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn rejects_bad_dialogues() {
        let d = vec![doctor("d1", "p")];
        let empty = dialogue("x", "d1", &[]);
        assert!(matches!(
            Corpus::new(d.clone(), vec![empty]),
            Err(CorpusError::EmptyDialogue(_))
        ));
        let mut wrong = dialogue("x", "d1", &["a", "b"]);
        wrong.turns.swap(0, 1);
        assert!(matches!(
            Corpus::new(d.clone(), vec![wrong]),
            Err(CorpusError::FirstTurnNotPatient(_))
        ));
        assert!(matches!(
            Corpus::new(d.clone(), vec![dialogue("x", "d1", &["a", "  "])]),
            Err(CorpusError::EmptyTurn { index: 1, .. })
        ));
        assert!(matches!(
            Corpus::new(vec![doctor("d1", "p"), doctor("d1", "q")], vec![]),
            Err(CorpusError::DuplicateDoctor(_))
        ));
        let x = dialogue("x", "d1", &["a"]);
        assert!(matches!(
            Corpus::new(d, vec![x.clone(), x]),
            Err(CorpusError::DuplicateDialogue(_))
        ));
    }

    fn corpus_with_counts(counts: &[(&str, usize)]) -> Corpus {
        let doctors = counts.iter().map(|(id, _)| doctor(id, "p")).collect();
        let mut dialogues = Vec::new();
        for (id, n) in counts {
            for k in 0..*n {
                dialogues.push(dialogue(&format!("{id}-{k}"), id, &["query text", "reply"]));
            }
        }
        Corpus::new(doctors, dialogues).unwrap()
    }

    #[test]
    fn split_counts_follow_eighty_percent() {
        let c = corpus_with_counts(&[("a", 10), ("b", 1), ("c", 3)]);
        let s = split_dataset(&c, 7);
        assert_eq!(s.train_dialogues_of(&c, 0).len(), 8);
        assert_eq!(s.train_dialogues_of(&c, 1).len(), 1);
        assert_eq!(s.train_dialogues_of(&c, 2).len(), 2);
        assert_eq!(s.queries.len(), 3);
        assert_eq!(s.queries(QuerySplit::Val).count(), 2);
        assert_eq!(s.queries(QuerySplit::Test).count(), 1);
        assert!(s.queries.iter().all(|q| q.gold_doctor_id != "b"));
        assert_eq!(s, split_dataset(&c, 7));
    }

    #[test]
    fn train_count_rounds_half_up() {
        assert_eq!(train_count(1), 1);
        assert_eq!(train_count(2), 2);
        assert_eq!(train_count(3), 2);
        assert_eq!(train_count(5), 4);
        assert_eq!(train_count(10), 8);
        assert_eq!(train_count(0), 0);
    }

    #[test]
    fn candidate_pool_sorts_and_truncates() {
        // 5, 3, 3 training dialogues after the split: use counts whose 80% are those
        let c = corpus_with_counts(&[("d3", 4), ("d2", 4), ("d1", 6)]);
        let s = split_dataset(&c, 1);
        // d1: 5, d2: 3, d3: 3
        assert_eq!(candidate_pool(&c, &s, 2), ["d1", "d2"]);
        assert_eq!(candidate_pool(&c, &s, 100), ["d1", "d2", "d3"]);
    }

    #[test]
    fn stats_profile_fraction() {
        let c = Corpus::new(
            vec![doctor("d1", "nerve pain the")],
            vec![dialogue("x", "d1", &["my nerve", "see doctor"])],
        )
        .unwrap();
        let lex = stop(&["nerve", "pain"]);
        let r = corpus_stats(&c, &lex);
        assert!((r.medical_term_fraction_profile - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.medical_term_fraction_patient_turns - 0.5).abs() < 1e-12);
        assert_eq!(r.medical_term_fraction_doctor_turns, 0.0);
        assert_eq!(r.avg_tokens_query, 2.0);
        assert_eq!(r.avg_tokens_dialogue, 4.0);
        assert_eq!(r.avg_tokens_profile, 3.0);
        let empty = corpus_stats(&c, &HashSet::new());
        assert_eq!(empty.medical_term_fraction_profile, 0.0);
        assert_eq!(empty.medical_term_fraction_patient_turns, 0.0);
    }

    #[test]
    fn histograms_cover_population() {
        let h = Histogram::build(&[1, 5, 5, 9, 40, 2], 10);
        assert_eq!(h.total(), 6);
        assert_eq!(h.edges.len(), h.counts.len() + 1);
        assert_eq!(Histogram::build(&[], 10).total(), 0);
    }

    #[test]
    fn dialogue_tokens_drop_stopwords_after_first_turn() {
        let d = dialogue("x", "d1", &["the pain", "the cause", "and more"]);
        let s = stop(&["the", "and"]);
        assert_eq!(dialogue_tokens(&d, &s), ["the", "pain", "cause", "more"]);
    }

    #[test]
    fn documents_are_capped() {
        let long = vec!["w"; 700].join(" ");
        let d = dialogue("x", "d1", &[&long, &long]);
        assert_eq!(dialogue_tokens(&d, &HashSet::new()).len(), MAX_DOC_TOKENS);
        assert_eq!(query_tokens(&d).len(), MAX_DOC_TOKENS);
    }
}
