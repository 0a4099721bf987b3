//! Query construction and top-R template retrieval.

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dataset::FewShotDataset;
use crate::embedder::{cosine, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::prompt_kb::{PromptKb, TaskSchema, Template};

pub const DEFAULT_R: usize = 5;

/// Field-name tokens that say nothing about the task.
pub const UNINFORMATIVE_FIELD_TOKENS: &[&str] = &["text", "sentence", "sentence1", "sentence2"];

#[derive(Debug, Clone)]
pub struct RetrievalConfig {
    pub r: usize,
    /// Matches the alphabetic runs of a field name that may carry meaning.
    pub informative_field_regexp: Regex,
    pub uninformative_tokens: Vec<String>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            r: DEFAULT_R,
            informative_field_regexp: Regex::new(r"[A-Za-z]{3,}").expect("static regex"),
            uninformative_tokens: UNINFORMATIVE_FIELD_TOKENS
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl RetrievalConfig {
    pub fn with_r(r: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::Validation("R must be at least 1".into()));
        }
        Ok(RetrievalConfig {
            r,
            ..Default::default()
        })
    }

    /// A field name is informative if it is not purely numeric and contains
    /// an alphabetic run of length ≥ 3 outside the uninformative list.
    pub fn is_informative(&self, field_name: &str) -> bool {
        if field_name.chars().all(|c| c.is_ascii_digit() || c == '_') {
            return false;
        }
        self.informative_field_regexp
            .find_iter(field_name)
            .map(|m| m.as_str().to_lowercase())
            .any(|tok| !self.uninformative_tokens.contains(&tok))
    }
}

/// Embed the task: field names when they are all informative, otherwise
/// the renormalized mean of the training samples' text embeddings.
pub fn build_query(
    schema: &TaskSchema,
    train: &FewShotDataset,
    embedder: &dyn Embedder,
    cfg: &RetrievalConfig,
) -> Result<EmbeddingVector> {
    let fields = schema.field_names();
    if fields.is_empty() {
        return Err(Error::contract("schema has no fields"));
    }
    if fields.iter().all(|f| cfg.is_informative(f)) {
        return Ok(embedder.embed_text(&fields.join(" ")));
    }
    if train.is_empty() {
        return Err(Error::contract("cannot build a sample-based query from no samples"));
    }
    let mut sum = vec![0.0; embedder.dim()];
    for s in train.samples() {
        let v = embedder.embed_text(&s.joined_text(schema));
        sum.iter_mut().zip(v.values()).for_each(|(a, b)| *a += b);
    }
    let n = train.len() as f64;
    Ok(EmbeddingVector::normalized(sum.into_iter().map(|x| x / n).collect()))
}

/// Adapted templates in rank order with their query similarities.
#[derive(Debug, Clone)]
pub struct RetrievedTemplates {
    pub templates: Vec<Template>,
    pub similarities: Vec<f64>,
}

impl RetrievedTemplates {
    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Line-delimited records: template fields plus rank and similarity.
    pub fn to_records(&self) -> Vec<RetrievedRecord> {
        self.templates
            .iter()
            .zip(&self.similarities)
            .enumerate()
            .map(|(i, (t, &s))| {
                let r = t.to_record();
                RetrievedRecord {
                    rank: i + 1,
                    similarity: s,
                    id: r.id,
                    task: r.task,
                    template: r.template,
                    answer_choices: r.answer_choices,
                }
            })
            .collect()
    }

    pub fn from_records(records: Vec<RetrievedRecord>) -> Result<Self> {
        let mut templates = Vec::with_capacity(records.len());
        let mut similarities = Vec::with_capacity(records.len());
        for r in records {
            templates.push(Template::new(r.id, r.task, r.template, r.answer_choices)?);
            similarities.push(r.similarity);
        }
        Ok(RetrievedTemplates {
            templates,
            similarities,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedRecord {
    pub rank: usize,
    pub similarity: f64,
    pub id: String,
    pub task: String,
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_choices: Option<Vec<String>>,
}

/// Arity-filter the KB, rank by cosine to `query` (ties by id), keep the
/// top `cfg.r` and adapt each to `schema`.
pub fn retrieve(
    kb: &PromptKb,
    schema: &TaskSchema,
    query: &EmbeddingVector,
    embedder: &dyn Embedder,
    cfg: &RetrievalConfig,
) -> Result<RetrievedTemplates> {
    if kb.is_empty() {
        return Err(Error::contract("prompt knowledge base is empty"));
    }
    if cfg.r == 0 {
        return Err(Error::Validation("R must be at least 1".into()));
    }
    let arity = schema.field_names().len();
    let mut scored = kb
        .templates()
        .iter()
        .filter(|t| t.arity() == arity)
        .map(|t| Ok((cosine(query, &embedder.embed_text(t.body()))?, t)))
        .collect::<Result<Vec<_>>>()?;
    if scored.is_empty() {
        return Err(Error::NoMatchingArity {
            wanted: arity,
            available: kb.arity_index().keys().copied().collect(),
        });
    }
    scored.sort_by(|(sa, ta), (sb, tb)| sb.total_cmp(sa).then_with(|| ta.id().cmp(tb.id())));
    scored.truncate(cfg.r);
    let mut templates = Vec::with_capacity(scored.len());
    let mut similarities = Vec::with_capacity(scored.len());
    for (s, t) in scored {
        templates.push(t.adapt(schema)?);
        similarities.push(s);
    }
    Ok(RetrievedTemplates {
        templates,
        similarities,
    })
}
