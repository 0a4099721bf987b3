//! Answer-choice candidates: dataset label texts, template-tailored tokens
//! and topic-specific words.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FewShotDataset;
use crate::embedder::{cosine, words, Embedder};
use crate::error::{Error, Result};
use crate::lm::ScoringBackend;
use crate::prompt_kb::{Template, TaskSchema};

pub const DEFAULT_TOP_M: usize = 100;
/// Ranked alternatives kept per class in diagnostics.
const DIAGNOSTIC_DEPTH: usize = 5;

/// Kinds in tie-break priority order (earlier wins).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    Dataset,
    TemplateTailored,
    TopicSpecific,
    /// Uniformly sampled training-vocabulary words.
    Random,
    /// Supplied by the user.
    Manual,
}

impl CandidateKind {
    pub fn name(self) -> &'static str {
        match self {
            CandidateKind::Dataset => "dataset",
            CandidateKind::TemplateTailored => "template_tailored",
            CandidateKind::TopicSpecific => "topic_specific",
            CandidateKind::Random => "random",
            CandidateKind::Manual => "manual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub text: String,
    pub score: f64,
}

/// One answer-choice configuration: `mapping[c]` verbalizes class `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceCandidate {
    pub kind: CandidateKind,
    pub mapping: Vec<String>,
    /// Per class, the best-scoring alternatives considered.
    #[serde(default)]
    pub diagnostics: Vec<Vec<ScoredEntry>>,
}

impl ChoiceCandidate {
    pub fn new(kind: CandidateKind, mapping: Vec<String>) -> Result<Self> {
        let c = ChoiceCandidate {
            kind,
            mapping,
            diagnostics: Vec::new(),
        };
        c.check()?;
        Ok(c)
    }

    fn check(&self) -> Result<()> {
        if let Some(e) = self.mapping.iter().find(|m| m.trim().is_empty()) {
            return Err(Error::Validation(format!("empty answer choice {e:?}")));
        }
        let distinct: BTreeSet<&String> = self.mapping.iter().collect();
        if distinct.len() != self.mapping.len() {
            return Err(Error::Validation(format!("answer choices {:?} are not distinct", self.mapping)));
        }
        Ok(())
    }

    /// Check the invariants against a task.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.mapping.len() != num_classes {
            return Err(Error::Validation(format!(
                "{} answer choices for {num_classes} classes",
                self.mapping.len()
            )));
        }
        self.check()
    }
}

/// Built-in English stopwords.
pub fn stopwords() -> &'static BTreeSet<String> {
    static WORDS: OnceLock<BTreeSet<String>> = OnceLock::new();
    WORDS.get_or_init(|| {
        include_str!("../data/stopwords.txt")
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect()
    })
}

/// Label texts from the schema, verbatim.
pub fn dataset_choices(schema: &TaskSchema) -> Result<ChoiceCandidate> {
    let texts = schema
        .dataset_label_texts()
        .ok_or_else(|| Error::Unavailable("the task schema has no label texts".into()))?;
    ChoiceCandidate::new(CandidateKind::Dataset, texts.to_vec())
}

/// `L_c(v)`: summed first-token log-probabilities over class-`c` samples
/// and all templates, for every eligible vocabulary entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodTable {
    /// Eligible token ids, ascending.
    pub tokens: Vec<usize>,
    pub texts: Vec<String>,
    /// `l[c][j]` for token `tokens[j]`.
    pub l: Vec<Vec<f64>>,
}

impl LikelihoodTable {
    pub fn num_classes(&self) -> usize {
        self.l.len()
    }

    /// `s(c, v) = L_c(v) − mean_{c'} L_{c'}(v)`.
    pub fn deviation(&self, c: usize, j: usize) -> f64 {
        let mean = self.l.iter().map(|row| row[j]).sum::<f64>() / self.l.len() as f64;
        self.l[c][j] - mean
    }

    /// Column indices of the `top_m` highest `L_c` entries; ties by token id.
    pub fn top_for_class(&self, c: usize, top_m: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.tokens.len()).collect();
        idx.sort_by(|&a, &b| self.l[c][b].total_cmp(&self.l[c][a]).then(self.tokens[a].cmp(&self.tokens[b])));
        idx.truncate(top_m);
        idx
    }
}

/// Whether a vocabulary entry may serve as a tailored answer choice.
pub fn is_eligible_token(token: &str) -> bool {
    token.chars().any(char::is_alphanumeric) && !stopwords().contains(token)
}

pub fn likelihood_table(
    backend: &dyn ScoringBackend,
    train: &FewShotDataset,
    templates: &[Template],
) -> Result<LikelihoodTable> {
    let vocab = backend
        .vocabulary()
        .ok_or_else(|| Error::Unavailable("template-tailored choices need a backend vocabulary".into()))?;
    let tokens: Vec<usize> = vocab
        .word_ids()
        .filter(|&id| vocab.token(id).is_some_and(is_eligible_token))
        .collect();
    let texts: Vec<String> = tokens.iter().map(|&i| vocab.token(i).unwrap_or_default().to_string()).collect();
    let labels = train.labels()?;
    let mut l = vec![vec![0.0; tokens.len()]; train.num_classes()];
    for (sample, &c) in train.samples().iter().zip(&labels) {
        for t in templates {
            let all = backend.next_token_logprobs(&t.render(sample)?)?;
            for (j, &id) in tokens.iter().enumerate() {
                l[c][j] += all[id];
            }
        }
    }
    Ok(LikelihoodTable { tokens, texts, l })
}

/// Greedy distinct assignment maximizing deviation; returns, per class, the
/// chosen column and its deviation.
pub fn greedy_assign(table: &LikelihoodTable, top_m: usize) -> Result<Vec<(usize, f64)>> {
    let k = table.num_classes();
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for c in 0..k {
        for j in table.top_for_class(c, top_m) {
            let s = table.deviation(c, j);
            if s.is_finite() {
                pairs.push((c, j, s));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.2.total_cmp(&a.2)
            .then(a.0.cmp(&b.0))
            .then(table.tokens[a.1].cmp(&table.tokens[b.1]))
    });
    let mut chosen: Vec<Option<(usize, f64)>> = vec![None; k];
    let mut used = BTreeSet::new();
    for (c, j, s) in pairs {
        if chosen[c].is_none() && !used.contains(&j) {
            chosen[c] = Some((j, s));
            used.insert(j);
        }
    }
    chosen
        .into_iter()
        .enumerate()
        .map(|(c, x)| x.ok_or_else(|| Error::Generation(format!("no eligible token left for class {c}"))))
        .collect()
}

/// Per-class single tokens whose likelihood deviates most from the class mean.
pub fn gen_template_tailored(
    backend: &dyn ScoringBackend,
    train: &FewShotDataset,
    templates: &[Template],
    top_m: usize,
) -> Result<ChoiceCandidate> {
    if train.num_classes() < 2 {
        return Err(Error::contract("answer-choice generation needs ≥ 2 classes"));
    }
    if top_m == 0 {
        return Err(Error::Validation("top_m must be ≥ 1".into()));
    }
    let table = likelihood_table(backend, train, templates)?;
    if table.tokens.len() < train.num_classes() {
        return Err(Error::Generation(format!(
            "{} eligible tokens for {} classes",
            table.tokens.len(),
            train.num_classes()
        )));
    }
    let assignment = greedy_assign(&table, top_m)?;
    let diagnostics = (0..table.num_classes())
        .map(|c| {
            let mut ranked: Vec<(usize, f64)> = table
                .top_for_class(c, top_m)
                .into_iter()
                .map(|j| (j, table.deviation(c, j)))
                .collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(table.tokens[a.0].cmp(&table.tokens[b.0])));
            ranked
                .into_iter()
                .take(DIAGNOSTIC_DEPTH)
                .map(|(j, s)| ScoredEntry {
                    text: table.texts[j].clone(),
                    score: s,
                })
                .collect()
        })
        .collect();
    Ok(ChoiceCandidate {
        kind: CandidateKind::TemplateTailored,
        mapping: assignment.iter().map(|&(j, _)| table.texts[j].clone()).collect(),
        diagnostics,
    })
}

/// Per class, `score(w) = Σ cos(embed_word_in_context(x, w), embed_text(x))`
/// over class samples `x` containing `w`, before the cross-class filter.
pub fn topic_word_scores(
    embedder: &dyn Embedder,
    train: &FewShotDataset,
    stopwords: &BTreeSet<String>,
) -> Result<Vec<BTreeMap<String, f64>>> {
    let labels = train.labels()?;
    let schema = train.schema();
    let mut scores = vec![BTreeMap::new(); train.num_classes()];
    for (sample, &c) in train.samples().iter().zip(&labels) {
        let text = sample.joined_text(schema);
        let sentence = embedder.embed_text(&text);
        let present: BTreeSet<String> = words(&text).into_iter().filter(|w| !stopwords.contains(w)).collect();
        for w in present {
            let v = embedder.embed_word_in_context(&text, &w)?;
            *scores[c].entry(w).or_insert(0.0) += cosine(&v, &sentence)?;
        }
    }
    Ok(scores)
}

/// Per-class words most similar to their sentences, excluding words that
/// occur in more than one class.
pub fn gen_topic_specific(
    embedder: &dyn Embedder,
    train: &FewShotDataset,
    stopwords: &BTreeSet<String>,
) -> Result<ChoiceCandidate> {
    if train.num_classes() < 2 {
        return Err(Error::contract("answer-choice generation needs ≥ 2 classes"));
    }
    let scores = topic_word_scores(embedder, train, stopwords)?;
    let mut occurrences: BTreeMap<&str, usize> = BTreeMap::new();
    for class in &scores {
        for w in class.keys() {
            *occurrences.entry(w.as_str()).or_insert(0) += 1;
        }
    }
    let mut mapping = Vec::with_capacity(scores.len());
    let mut diagnostics = Vec::with_capacity(scores.len());
    for (c, class) in scores.iter().enumerate() {
        let mut ranked: Vec<(&String, f64)> = class
            .iter()
            .filter(|(w, _)| occurrences[w.as_str()] == 1)
            .map(|(w, &s)| (w, s))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
        let (best, _) = ranked
            .first()
            .ok_or_else(|| Error::Generation(format!("class {c} has no class-exclusive candidate word")))?;
        mapping.push((*best).clone());
        diagnostics.push(
            ranked
                .iter()
                .take(DIAGNOSTIC_DEPTH)
                .map(|(w, s)| ScoredEntry {
                    text: (*w).clone(),
                    score: *s,
                })
                .collect(),
        );
    }
    Ok(ChoiceCandidate {
        kind: CandidateKind::TopicSpecific,
        mapping,
        diagnostics,
    })
}

/// Distinct words drawn uniformly from the training texts' vocabulary.
pub fn random_choices(train: &FewShotDataset, seed: u64) -> Result<ChoiceCandidate> {
    let schema = train.schema();
    let vocab: BTreeSet<String> = train
        .samples()
        .iter()
        .flat_map(|s| words(&s.joined_text(schema)))
        .collect();
    let vocab: Vec<String> = vocab.into_iter().collect();
    if vocab.len() < train.num_classes() {
        return Err(Error::Generation(format!(
            "{} distinct training words for {} classes",
            vocab.len(),
            train.num_classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mapping = vocab.choose_multiple(&mut rng, train.num_classes()).cloned().collect();
    ChoiceCandidate::new(CandidateKind::Random, mapping)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::HashedBowEmbedder;
    use crate::lm::BigramBackend;
    use crate::prompt_kb::Sample;

    fn schema(labels: Option<Vec<&str>>) -> TaskSchema {
        TaskSchema::new(vec!["text".into()], 2, labels.map(|l| l.into_iter().map(String::from).collect())).unwrap()
    }

    fn data(rows: &[(&str, usize)]) -> FewShotDataset {
        let samples = rows
            .iter()
            .enumerate()
            .map(|(i, (t, l))| Sample::new(format!("s{i}"), [("text", *t)], Some(*l)))
            .collect();
        FewShotDataset::new(schema(None), samples).unwrap()
    }

    #[test]
    fn dataset_choices_pass_through() {
        let c = dataset_choices(&schema(Some(vec!["entailment", "not_entailment"]))).unwrap();
        assert_eq!(c.mapping, ["entailment", "not_entailment"]);
        assert_eq!(c.kind, CandidateKind::Dataset);
        assert!(matches!(dataset_choices(&schema(None)), Err(Error::Unavailable(_))));
    }

    #[test]
    fn stopword_list_loaded() {
        let s = stopwords();
        assert!(s.contains("the") && s.contains("is") && s.contains("was"));
        assert!(!s.contains("ipod"));
    }

    #[test]
    fn tailored_yes_no_on_bigram_corpus() {
        let corpus = ["a good yes", "a great yes", "a bad no", "an awful no"];
        let backend = BigramBackend::from_corpus(corpus);
        let train = data(&[("a good", 0), ("a great", 0), ("a bad", 1), ("an awful", 1)]);
        let tpl = Template::new("t", "x", "{{text}}", None).unwrap();
        let c = gen_template_tailored(&backend, &train, &[tpl], DEFAULT_TOP_M).unwrap();
        assert_eq!(c.mapping, ["yes", "no"]);
    }

    #[test]
    fn deviations_sum_to_zero() {
        let table = LikelihoodTable {
            tokens: vec![10, 11],
            texts: vec!["a".into(), "b".into()],
            l: vec![vec![-1.0, -5.0], vec![-3.0, -2.0], vec![-2.0, -2.0]],
        };
        for j in 0..2 {
            let s: f64 = (0..3).map(|c| table.deviation(c, j)).sum();
            assert!(s.abs() < 1e-12);
        }
        let a = greedy_assign(&table, 2);
        // s: a → (1, -1, 0), b → (-2, 1, 1); class 0 takes a, then class 1 takes b, class 2 has nothing left
        assert!(matches!(a, Err(Error::Generation(_))));
    }

    #[test]
    fn topic_words_are_class_exclusive() {
        let train = data(&[("the ipod is great", 0), ("the service was slow", 1)]);
        let c = gen_topic_specific(&HashedBowEmbedder::default(), &train, stopwords()).unwrap();
        assert_eq!(c.kind, CandidateKind::TopicSpecific);
        assert!(["ipod", "great"].contains(&c.mapping[0].as_str()));
        assert!(["service", "slow"].contains(&c.mapping[1].as_str()));
    }

    #[test]
    fn random_choices_are_seeded() {
        let train = data(&[("alpha beta gamma", 0), ("delta epsilon", 1)]);
        let a = random_choices(&train, 3).unwrap();
        assert_eq!(a, random_choices(&train, 3).unwrap());
        assert_eq!(a.mapping.len(), 2);
        assert_ne!(a.mapping[0], a.mapping[1]);
    }
}
