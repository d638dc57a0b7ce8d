//! User-goal corpora: the annotated patient cases that drive both the
//! simulator and the prototype support sets.
//!
//! On disk a corpus is two files: `vocab.json` holding the ordered symptom and
//! disease names, and `goals.jsonl` holding one goal per line. Every vector in
//! the crate keys off the vocabulary indices, so filtering never touches the
//! vocabulary.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("line {line}: malformed JSON: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: unknown symptom {name:?}")]
    UnknownSymptom { line: usize, name: String },
    #[error("line {line}: unknown disease {name:?}")]
    UnknownDisease { line: usize, name: String },
    #[error("line {line}: unknown split {value:?} (expected \"train\" or \"test\")")]
    UnknownSplit { line: usize, value: String },
    #[error("line {line}: duplicate goal id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: goal {id:?}: overlapping explicit/implicit symptom {symptom:?}")]
    Overlap {
        line: usize,
        id: String,
        symptom: String,
    },
    #[error("line {line}: goal {id:?}: explicit set has no present symptom")]
    NoSelfReport { line: usize, id: String },
    #[error("invalid corpus: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),
    #[error("disease filter must keep at least one disease")]
    EmptyKeep,
    #[error("disease index {0} out of range")]
    DiseaseOutOfRange(usize),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Ordered symptom and disease names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawVocab", into = "RawVocab")]
pub struct Vocabulary {
    symptoms: Vec<String>,
    diseases: Vec<String>,
    symptom_index: HashMap<String, usize>,
    disease_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVocab {
    symptoms: Vec<String>,
    diseases: Vec<String>,
}

impl TryFrom<RawVocab> for Vocabulary {
    type Error = CorpusError;

    fn try_from(raw: RawVocab) -> Result<Self> {
        Vocabulary::new(raw.symptoms, raw.diseases)
    }
}

impl From<Vocabulary> for RawVocab {
    fn from(v: Vocabulary) -> Self {
        RawVocab {
            symptoms: v.symptoms,
            diseases: v.diseases,
        }
    }
}

fn index_names(kind: &str, names: &[String]) -> Result<HashMap<String, usize>> {
    if names.is_empty() {
        return Err(CorpusError::Vocab(format!("{kind} list is empty")));
    }
    let mut index = HashMap::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        if index.insert(name.clone(), i).is_some() {
            return Err(CorpusError::Vocab(format!("duplicate {kind} name {name:?}")));
        }
    }
    Ok(index)
}

impl Vocabulary {
    pub fn new(symptoms: Vec<String>, diseases: Vec<String>) -> Result<Self> {
        let symptom_index = index_names("symptom", &symptoms)?;
        let disease_index = index_names("disease", &diseases)?;
        Ok(Self {
            symptoms,
            diseases,
            symptom_index,
            disease_index,
        })
    }

    pub fn symptoms(&self) -> &[String] {
        &self.symptoms
    }

    pub fn diseases(&self) -> &[String] {
        &self.diseases
    }

    pub fn n_symptoms(&self) -> usize {
        self.symptoms.len()
    }

    pub fn n_diseases(&self) -> usize {
        self.diseases.len()
    }

    pub fn symptom(&self, name: &str) -> Option<usize> {
        self.symptom_index.get(name).copied()
    }

    pub fn disease(&self, name: &str) -> Option<usize> {
        self.disease_index.get(name).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Finding {
    Present,
    Absent,
}

impl Finding {
    fn from_flag(flag: bool) -> Self {
        if flag {
            Finding::Present
        } else {
            Finding::Absent
        }
    }

    fn flag(self) -> bool {
        self == Finding::Present
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One annotated patient case.
///
/// Both finding maps keep annotation order; the implicit order is the order
/// in which a reconstructed doctor trajectory asks about the symptoms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserGoal {
    pub id: String,
    pub disease: usize,
    pub explicit: IndexMap<usize, Finding>,
    pub implicit: IndexMap<usize, Finding>,
    pub split: Split,
}

impl UserGoal {
    /// Annotated finding for a symptom in either map.
    pub fn finding(&self, symptom: usize) -> Option<Finding> {
        self.explicit
            .get(&symptom)
            .or_else(|| self.implicit.get(&symptom))
            .copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub goals: Vec<UserGoal>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGoal {
    id: String,
    disease: String,
    explicit: IndexMap<String, bool>,
    #[serde(default)]
    implicit: IndexMap<String, bool>,
    split: String,
}

#[derive(Serialize)]
struct RawGoalOut<'a> {
    id: &'a str,
    disease: &'a str,
    explicit: IndexMap<&'a str, bool>,
    implicit: IndexMap<&'a str, bool>,
    split: Split,
}

/// Parses a vocabulary file and a goals file into a validated corpus.
pub fn load_corpus(vocab_text: &str, goals_text: &str) -> Result<Corpus> {
    let vocab: Vocabulary =
        serde_json::from_str(vocab_text).map_err(|source| CorpusError::Json { line: 1, source })?;
    let mut goals = Vec::new();
    let mut seen = HashSet::new();
    for (i, text) in goals_text.lines().enumerate() {
        let line = i + 1;
        if text.trim().is_empty() {
            continue;
        }
        let raw: RawGoal =
            serde_json::from_str(text).map_err(|source| CorpusError::Json { line, source })?;
        if !seen.insert(raw.id.clone()) {
            return Err(CorpusError::DuplicateId { line, id: raw.id });
        }
        goals.push(resolve_goal(&vocab, raw, line)?);
    }
    let corpus = Corpus { vocab, goals };
    let report = validate_corpus(&corpus);
    if !report.errors.is_empty() {
        return Err(CorpusError::Invalid(
            report.errors.iter().map(ToString::to_string).collect(),
        ));
    }
    Ok(corpus)
}

fn resolve_goal(vocab: &Vocabulary, raw: RawGoal, line: usize) -> Result<UserGoal> {
    let disease = vocab
        .disease(&raw.disease)
        .ok_or_else(|| CorpusError::UnknownDisease {
            line,
            name: raw.disease.clone(),
        })?;
    let split = match raw.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => {
            return Err(CorpusError::UnknownSplit {
                line,
                value: other.to_string(),
            })
        }
    };
    let resolve = |map: &IndexMap<String, bool>| -> Result<IndexMap<usize, Finding>> {
        map.iter()
            .map(|(name, &flag)| {
                vocab
                    .symptom(name)
                    .map(|k| (k, Finding::from_flag(flag)))
                    .ok_or_else(|| CorpusError::UnknownSymptom {
                        line,
                        name: name.clone(),
                    })
            })
            .collect()
    };
    let explicit = resolve(&raw.explicit)?;
    let implicit = resolve(&raw.implicit)?;
    if let Some(k) = explicit.keys().find(|k| implicit.contains_key(*k)) {
        return Err(CorpusError::Overlap {
            line,
            id: raw.id,
            symptom: vocab.symptoms[*k].clone(),
        });
    }
    if !explicit.values().any(|f| *f == Finding::Present) {
        return Err(CorpusError::NoSelfReport { line, id: raw.id });
    }
    Ok(UserGoal {
        id: raw.id,
        disease,
        explicit,
        implicit,
        split,
    })
}

impl Corpus {
    pub fn train_goals(&self) -> impl Iterator<Item = &UserGoal> {
        self.goals.iter().filter(|g| g.split == Split::Train)
    }

    pub fn test_goals(&self) -> impl Iterator<Item = &UserGoal> {
        self.goals.iter().filter(|g| g.split == Split::Test)
    }

    /// (train, test) goal counts.
    pub fn split_counts(&self) -> (usize, usize) {
        let train = self.train_goals().count();
        (train, self.goals.len() - train)
    }

    /// Train-split goal count per disease index.
    pub fn train_counts_by_disease(&self) -> Vec<usize> {
        let mut counts = vec![0; self.vocab.n_diseases()];
        for g in self.train_goals() {
            counts[g.disease] += 1;
        }
        counts
    }

    pub fn vocab_json(&self) -> String {
        serde_json::to_string(&self.vocab).expect("vocabulary serializes")
    }

    /// JSON-lines text, one goal per line, in corpus order.
    pub fn goals_jsonl(&self) -> String {
        let mut out = String::new();
        for g in &self.goals {
            let names = |map: &IndexMap<usize, Finding>| {
                map.iter()
                    .map(|(&k, f)| (self.vocab.symptoms[k].as_str(), f.flag()))
                    .collect()
            };
            let raw = RawGoalOut {
                id: &g.id,
                disease: &self.vocab.diseases[g.disease],
                explicit: names(&g.explicit),
                implicit: names(&g.implicit),
                split: g.split,
            };
            out.push_str(&serde_json::to_string(&raw).expect("goal serializes"));
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 over the serialized vocabulary and goals.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.vocab_json().as_bytes());
        hasher.update(b"\n");
        hasher.update(self.goals_jsonl().as_bytes());
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Issue {
    DuplicateId(String),
    Overlap { id: String, symptom: usize },
    NoSelfReport(String),
    SymptomOutOfRange { id: String, symptom: usize },
    DiseaseOutOfRange { id: String, disease: usize },
    DiseaseWithoutTrainGoals { disease: usize, name: String },
    SymptomNeverMentioned { symptom: usize, name: String },
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::DuplicateId(id) => write!(f, "duplicate goal id {id:?}"),
            Issue::Overlap { id, symptom } => {
                write!(f, "goal {id:?}: overlapping explicit/implicit symptom {symptom}")
            }
            Issue::NoSelfReport(id) => write!(f, "goal {id:?}: explicit set has no present symptom"),
            Issue::SymptomOutOfRange { id, symptom } => {
                write!(f, "goal {id:?}: symptom index {symptom} out of range")
            }
            Issue::DiseaseOutOfRange { id, disease } => {
                write!(f, "goal {id:?}: disease index {disease} out of range")
            }
            Issue::DiseaseWithoutTrainGoals { disease, name } => {
                write!(f, "disease {disease} ({name}) has no train goals")
            }
            Issue::SymptomNeverMentioned { symptom, name } => {
                write!(f, "symptom {symptom} ({name}) never mentioned by any goal")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

pub fn validate_corpus(corpus: &Corpus) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n_sym = corpus.vocab.n_symptoms();
    let n_dis = corpus.vocab.n_diseases();
    let mut ids = HashSet::new();
    let mut mentioned = vec![false; n_sym];
    let mut has_train = vec![false; n_dis];

    for g in &corpus.goals {
        if !ids.insert(g.id.as_str()) {
            report.errors.push(Issue::DuplicateId(g.id.clone()));
        }
        if g.disease >= n_dis {
            report.errors.push(Issue::DiseaseOutOfRange {
                id: g.id.clone(),
                disease: g.disease,
            });
        } else if g.split == Split::Train {
            has_train[g.disease] = true;
        }
        for &k in g.explicit.keys().chain(g.implicit.keys()) {
            if k >= n_sym {
                report.errors.push(Issue::SymptomOutOfRange {
                    id: g.id.clone(),
                    symptom: k,
                });
            } else {
                mentioned[k] = true;
            }
        }
        if let Some(&k) = g.explicit.keys().find(|k| g.implicit.contains_key(*k)) {
            report.errors.push(Issue::Overlap {
                id: g.id.clone(),
                symptom: k,
            });
        }
        if !g.explicit.values().any(|f| *f == Finding::Present) {
            report.errors.push(Issue::NoSelfReport(g.id.clone()));
        }
    }
    for (d, ok) in has_train.iter().enumerate() {
        if !ok {
            report.warnings.push(Issue::DiseaseWithoutTrainGoals {
                disease: d,
                name: corpus.vocab.diseases[d].clone(),
            });
        }
    }
    for (k, ok) in mentioned.iter().enumerate() {
        if !ok {
            report.warnings.push(Issue::SymptomNeverMentioned {
                symptom: k,
                name: corpus.vocab.symptoms[k].clone(),
            });
        }
    }
    report
}

/// Parameters of a synthetic corpus.
///
/// Every disease gets a signature of `signature_size` symptoms. `overlap`
/// of them come from a pool shared by all diseases, so any two signatures
/// intersect in exactly `overlap` symptoms; the rest are private to the
/// disease.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_diseases: usize,
    pub n_symptoms: usize,
    pub signature_size: usize,
    pub overlap: usize,
    pub explicit_per_goal: usize,
    pub implicit_present_per_goal: usize,
    pub implicit_absent_per_goal: usize,
    pub goals_per_disease_train: usize,
    pub goals_per_disease_test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_diseases: 4,
            n_symptoms: 20,
            signature_size: 5,
            overlap: 0,
            explicit_per_goal: 1,
            implicit_present_per_goal: 2,
            implicit_absent_per_goal: 1,
            goals_per_disease_train: 30,
            goals_per_disease_test: 10,
            seed: 7,
        }
    }
}

impl SynthSpec {
    fn check(&self) -> Result<()> {
        let fail = |msg: String| Err(CorpusError::InfeasibleSpec(msg));
        if self.n_diseases == 0 || self.n_symptoms == 0 {
            return fail("need at least one disease and one symptom".into());
        }
        if self.signature_size > self.n_symptoms {
            return fail(format!(
                "signature size {} exceeds symptom count {}",
                self.signature_size, self.n_symptoms
            ));
        }
        if self.explicit_per_goal == 0 {
            return fail("explicit_per_goal must be at least 1".into());
        }
        if self.overlap > self.signature_size {
            return fail(format!(
                "overlap {} exceeds signature size {}",
                self.overlap, self.signature_size
            ));
        }
        let needed = self.overlap + self.n_diseases * (self.signature_size - self.overlap);
        if needed > self.n_symptoms {
            return fail(format!(
                "{} diseases with signature {} and overlap {} need {needed} symptoms, have {}",
                self.n_diseases, self.signature_size, self.overlap, self.n_symptoms
            ));
        }
        let present = self.explicit_per_goal + self.implicit_present_per_goal;
        if present > self.signature_size {
            return fail(format!(
                "{present} present symptoms per goal exceed signature size {}",
                self.signature_size
            ));
        }
        if self.implicit_absent_per_goal > self.n_symptoms - self.signature_size {
            return fail(format!(
                "{} absent symptoms per goal exceed the {} symptoms outside a signature",
                self.implicit_absent_per_goal,
                self.n_symptoms - self.signature_size
            ));
        }
        Ok(())
    }
}

/// Deterministic synthetic corpus drawn from `spec`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Corpus> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.n_symptoms.to_string().len().max(2);
    let symptoms = (0..spec.n_symptoms)
        .map(|k| format!("symptom_{k:0width$}"))
        .collect();
    let diseases = (0..spec.n_diseases).map(|d| format!("disease_{d}")).collect();
    let vocab = Vocabulary::new(symptoms, diseases)?;

    let mut pool: Vec<usize> = (0..spec.n_symptoms).collect();
    pool.shuffle(&mut rng);
    let private = spec.signature_size - spec.overlap;
    let shared = &pool[..spec.overlap];
    let signatures: Vec<Vec<usize>> = (0..spec.n_diseases)
        .map(|d| {
            let start = spec.overlap + d * private;
            let mut sig = shared.to_vec();
            sig.extend_from_slice(&pool[start..start + private]);
            sig.sort_unstable();
            sig
        })
        .collect();

    let mut goals = Vec::new();
    let mut serial = 0usize;
    for (split, per_disease) in [
        (Split::Train, spec.goals_per_disease_train),
        (Split::Test, spec.goals_per_disease_test),
    ] {
        for _ in 0..per_disease {
            for (d, sig) in signatures.iter().enumerate() {
                let outside: Vec<usize> = (0..spec.n_symptoms)
                    .filter(|k| sig.binary_search(k).is_err())
                    .collect();
                let present: Vec<usize> = sig
                    .choose_multiple(
                        &mut rng,
                        spec.explicit_per_goal + spec.implicit_present_per_goal,
                    )
                    .copied()
                    .collect();
                let absent: Vec<usize> = outside
                    .choose_multiple(&mut rng, spec.implicit_absent_per_goal)
                    .copied()
                    .collect();
                let (explicit, implicit_present) = present.split_at(spec.explicit_per_goal);
                let mut implicit: Vec<(usize, Finding)> = implicit_present
                    .iter()
                    .map(|&k| (k, Finding::Present))
                    .chain(absent.iter().map(|&k| (k, Finding::Absent)))
                    .collect();
                implicit.shuffle(&mut rng);
                goals.push(UserGoal {
                    id: format!("g{serial:05}"),
                    disease: d,
                    explicit: explicit.iter().map(|&k| (k, Finding::Present)).collect(),
                    implicit: implicit.into_iter().collect(),
                    split,
                });
                serial += 1;
            }
        }
    }
    Ok(Corpus { vocab, goals })
}

/// Symptom signature of each disease as generated by [`generate_synthetic`]:
/// the union of symptoms annotated Present across that disease's goals.
pub fn present_symptoms_by_disease(corpus: &Corpus) -> Vec<BTreeSet<usize>> {
    let mut out = vec![BTreeSet::new(); corpus.vocab.n_diseases()];
    for g in &corpus.goals {
        for (&k, f) in g.explicit.iter().chain(g.implicit.iter()) {
            if *f == Finding::Present {
                out[g.disease].insert(k);
            }
        }
    }
    out
}

/// Keeps only goals whose disease is in `keep`; the vocabulary is unchanged.
pub fn filter_by_diseases(corpus: &Corpus, keep: &BTreeSet<usize>) -> Result<Corpus> {
    if keep.is_empty() {
        return Err(CorpusError::EmptyKeep);
    }
    if let Some(&d) = keep.iter().find(|&&d| d >= corpus.vocab.n_diseases()) {
        return Err(CorpusError::DiseaseOutOfRange(d));
    }
    Ok(Corpus {
        vocab: corpus.vocab.clone(),
        goals: corpus
            .goals
            .iter()
            .filter(|g| keep.contains(&g.disease))
            .cloned()
            .collect(),
    })
}

/// Goals grouped by disease, preserving corpus order within each group.
pub fn goals_by_disease<'a>(
    goals: impl IntoIterator<Item = &'a UserGoal>,
) -> BTreeMap<usize, Vec<&'a UserGoal>> {
    let mut out: BTreeMap<usize, Vec<&UserGoal>> = BTreeMap::new();
    for g in goals {
        out.entry(g.disease).or_default().push(g);
    }
    out
}
