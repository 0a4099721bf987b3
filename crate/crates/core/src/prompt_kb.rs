//! Instruction templates and the prompt knowledge base.
//!
//! Templates use double-brace placeholders (`{{premise}}`) whose names match
//! `[A-Za-z_][A-Za-z0-9_]*`. Richer templating constructs (`{% ... %}`,
//! filters, answer-choice placeholders) are rejected when a template is
//! parsed. Answer choices live only in [`Template::answer_choices`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placeholder names reserved for answer choices; bodies may not use them.
const RESERVED_NAMES: &[&str] = &["answer_choices", "answer_choice", "choices"];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot { name: String, raw: String },
}

/// Split a template body into literal text and placeholder slots.
fn parse_body(body: &str) -> Result<Vec<Piece>> {
    if body.contains("{%") || body.contains("%}") {
        return Err(Error::Template(
            "control-flow blocks (`{% ... %}`) are not supported".into(),
        ));
    }
    let mut pieces = Vec::new();
    let mut rest = body;
    loop {
        let open = rest.find("{{");
        let close = rest.find("}}");
        match (open, close) {
            (None, None) => {
                if !rest.is_empty() {
                    pieces.push(Piece::Text(rest.to_string()));
                }
                break;
            }
            (None, Some(_)) => {
                return Err(Error::Template(format!(
                    "unbalanced braces: `}}}}` without opening `{{{{` in {body:?}"
                )))
            }
            (Some(o), c) => {
                if let Some(c) = c {
                    if c < o {
                        return Err(Error::Template(format!(
                            "unbalanced braces: `}}}}` without opening `{{{{` in {body:?}"
                        )));
                    }
                }
                if o > 0 {
                    pieces.push(Piece::Text(rest[..o].to_string()));
                }
                let after = &rest[o + 2..];
                let end = after.find("}}").ok_or_else(|| {
                    Error::Template(format!("unbalanced braces: unclosed `{{{{` in {body:?}"))
                })?;
                let inner = &after[..end];
                if inner.contains("{{") {
                    return Err(Error::Template(format!(
                        "nested placeholder in {body:?}"
                    )));
                }
                let name = inner.trim();
                if !is_identifier(name) {
                    return Err(Error::Template(format!(
                        "unsupported placeholder `{{{{{inner}}}}}`; expected a bare field name"
                    )));
                }
                if RESERVED_NAMES.contains(&name) {
                    return Err(Error::Template(format!(
                        "answer-choice placeholder `{name}` is not allowed in a body"
                    )));
                }
                pieces.push(Piece::Slot {
                    name: name.to_string(),
                    raw: format!("{{{{{inner}}}}}"),
                });
                rest = &after[end + 2..];
            }
        }
    }
    Ok(pieces)
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Distinct placeholder names in order of first appearance.
fn slot_names(pieces: &[Piece]) -> Vec<String> {
    let mut seen = HashSet::new();
    pieces
        .iter()
        .filter_map(|p| match p {
            Piece::Slot { name, .. } if seen.insert(name.clone()) => Some(name.clone()),
            _ => None,
        })
        .collect()
}

/// Count the distinct `{{name}}` placeholders in a body.
pub fn count_arguments(body: &str) -> Result<usize> {
    Ok(slot_names(&parse_body(body)?).len())
}

/// An instruction template with optional per-class answer choices.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    id: String,
    task_name: String,
    body: String,
    answer_choices: Option<Vec<String>>,
    pieces: Vec<Piece>,
    placeholders: Vec<String>,
}

impl Template {
    pub fn new(
        id: impl Into<String>,
        task_name: impl Into<String>,
        body: impl Into<String>,
        answer_choices: Option<Vec<String>>,
    ) -> Result<Self> {
        let id = id.into();
        let body = body.into();
        let pieces = parse_body(&body)?;
        let placeholders = slot_names(&pieces);
        if placeholders.is_empty() {
            return Err(Error::Template(format!(
                "template `{id}` has no placeholders (arity 0)"
            )));
        }
        if let Some(choices) = &answer_choices {
            let mut seen = HashSet::new();
            for c in choices {
                if c.trim().is_empty() {
                    return Err(Error::Template(format!(
                        "template `{id}` has an empty answer choice"
                    )));
                }
                if !seen.insert(c.as_str()) {
                    return Err(Error::Template(format!(
                        "template `{id}` repeats answer choice `{c}`"
                    )));
                }
            }
        }
        Ok(Template {
            id,
            task_name: task_name.into(),
            body,
            answer_choices,
            pieces,
            placeholders,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn task_name(&self) -> &str {
        &self.task_name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn answer_choices(&self) -> Option<&[String]> {
        self.answer_choices.as_deref()
    }

    /// Number of distinct placeholders.
    pub fn arity(&self) -> usize {
        self.placeholders.len()
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> &[String] {
        &self.placeholders
    }

    /// Rename placeholders to the schema's field names, positionally by
    /// first appearance. The id gains an `@adapted` suffix.
    pub fn adapt(&self, schema: &TaskSchema) -> Result<Template> {
        let fields = schema.field_names();
        if self.arity() != fields.len() {
            return Err(Error::contract(format!(
                "template `{}` has arity {} but the schema has {} fields",
                self.id,
                self.arity(),
                fields.len()
            )));
        }
        let mapping: BTreeMap<&str, &str> = self
            .placeholders
            .iter()
            .map(String::as_str)
            .zip(fields.iter().map(String::as_str))
            .collect();
        let body: String = self
            .pieces
            .iter()
            .map(|p| match p {
                Piece::Text(t) => t.clone(),
                Piece::Slot { name, raw } => {
                    let target = mapping[name.as_str()];
                    if target == name {
                        raw.clone()
                    } else {
                        format!("{{{{{target}}}}}")
                    }
                }
            })
            .collect();
        Template::new(
            format!("{}@adapted", self.id),
            self.task_name.clone(),
            body,
            self.answer_choices.clone(),
        )
    }

    /// Substitute every placeholder with the sample's field text.
    pub fn render(&self, sample: &Sample) -> Result<String> {
        let mut out = String::with_capacity(self.body.len() + 64);
        for p in &self.pieces {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot { name, .. } => {
                    let value = sample
                        .fields
                        .get(name)
                        .ok_or_else(|| Error::Render(name.clone()))?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }

    pub fn to_record(&self) -> TemplateRecord {
        TemplateRecord {
            id: self.id.clone(),
            task: self.task_name.clone(),
            template: self.body.clone(),
            answer_choices: self.answer_choices.clone(),
        }
    }
}

/// One line of a KB file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateRecord {
    pub id: String,
    pub task: String,
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_choices: Option<Vec<String>>,
}

impl TryFrom<TemplateRecord> for Template {
    type Error = Error;

    fn try_from(r: TemplateRecord) -> Result<Self> {
        Template::new(r.id, r.task, r.template, r.answer_choices)
    }
}

/// The collection of instruction-tuning templates, immutable after ingest.
#[derive(Debug, Clone, Default)]
pub struct PromptKb {
    templates: Vec<Template>,
    arity_index: BTreeMap<usize, Vec<String>>,
}

impl PromptKb {
    /// Build a KB, rejecting duplicate ids. Templates are ordered by id.
    pub fn from_templates(mut templates: Vec<Template>) -> Result<Self> {
        templates.sort_by(|a, b| a.id.cmp(&b.id));
        let mut arity_index: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (i, t) in templates.iter().enumerate() {
            if i > 0 && templates[i - 1].id == t.id {
                return Err(Error::Conflict(t.id.clone()));
            }
            arity_index.entry(t.arity()).or_default().push(t.id.clone());
        }
        Ok(PromptKb {
            templates,
            arity_index,
        })
    }

    /// Parse a line-delimited KB from any reader. Blank lines are skipped.
    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut templates = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: TemplateRecord =
                serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            let template = Template::try_from(record).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if !seen.insert(template.id.clone()) {
                return Err(Error::Conflict(template.id.clone()));
            }
            templates.push(template);
        }
        Self::from_templates(templates)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for t in &self.templates {
            serde_json::to_writer(&mut w, &t.to_record())?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn get(&self, id: &str) -> Option<&Template> {
        self.templates
            .binary_search_by(|t| t.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.templates[i])
    }

    pub fn arity_index(&self) -> &BTreeMap<usize, Vec<String>> {
        &self.arity_index
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// Read a KB file from disk.
pub fn ingest_kb(path: impl AsRef<Path>) -> Result<PromptKb> {
    let file = std::fs::File::open(path.as_ref())?;
    PromptKb::from_reader(std::io::BufReader::new(file))
}

/// Field layout and label space of a target task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemaRecord", into = "SchemaRecord")]
pub struct TaskSchema {
    field_names: Vec<String>,
    num_classes: usize,
    dataset_label_texts: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct SchemaRecord {
    field_names: Vec<String>,
    num_classes: usize,
    #[serde(default, alias = "dataset_label_texts", skip_serializing_if = "Option::is_none")]
    label_texts: Option<Vec<String>>,
}

impl TryFrom<SchemaRecord> for TaskSchema {
    type Error = Error;

    fn try_from(r: SchemaRecord) -> Result<Self> {
        TaskSchema::new(r.field_names, r.num_classes, r.label_texts)
    }
}

impl From<TaskSchema> for SchemaRecord {
    fn from(s: TaskSchema) -> Self {
        SchemaRecord {
            field_names: s.field_names,
            num_classes: s.num_classes,
            label_texts: s.dataset_label_texts,
        }
    }
}

impl TaskSchema {
    pub fn new(
        field_names: Vec<String>,
        num_classes: usize,
        dataset_label_texts: Option<Vec<String>>,
    ) -> Result<Self> {
        if field_names.is_empty() {
            return Err(Error::Validation("schema has no fields".into()));
        }
        let distinct: BTreeSet<_> = field_names.iter().collect();
        if distinct.len() != field_names.len() {
            return Err(Error::Validation("schema field names repeat".into()));
        }
        if let Some(bad) = field_names.iter().find(|f| !is_identifier(f)) {
            return Err(Error::Validation(format!(
                "field name `{bad}` is not a valid placeholder name"
            )));
        }
        if num_classes < 2 {
            return Err(Error::Validation(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        if let Some(labels) = &dataset_label_texts {
            if labels.len() != num_classes {
                return Err(Error::Validation(format!(
                    "{} label texts for {num_classes} classes",
                    labels.len()
                )));
            }
            let distinct: BTreeSet<_> = labels.iter().collect();
            if distinct.len() != labels.len() {
                return Err(Error::Validation("label texts repeat".into()));
            }
        }
        Ok(TaskSchema {
            field_names,
            num_classes,
            dataset_label_texts,
        })
    }

    pub fn field_names(&self) -> &[String] {
        &self.field_names
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dataset_label_texts(&self) -> Option<&[String]> {
        self.dataset_label_texts.as_deref()
    }
}

/// One input example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub fields: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl Sample {
    pub fn new<K: Into<String>, V: Into<String>>(
        id: impl Into<String>,
        fields: impl IntoIterator<Item = (K, V)>,
        label: Option<usize>,
    ) -> Self {
        Sample {
            id: id.into(),
            fields: fields
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
            label,
        }
    }

    /// Field values joined by spaces, in schema order.
    pub fn joined_text(&self, schema: &TaskSchema) -> String {
        schema
            .field_names()
            .iter()
            .filter_map(|f| self.fields.get(f).map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn validate(&self, schema: &TaskSchema) -> Result<()> {
        let keys: BTreeSet<&str> = self.fields.keys().map(String::as_str).collect();
        let expected: BTreeSet<&str> = schema.field_names().iter().map(String::as_str).collect();
        if keys != expected {
            return Err(Error::Validation(format!(
                "sample `{}` has fields {:?}, schema expects {:?}",
                self.id, keys, expected
            )));
        }
        if let Some(l) = self.label {
            if l >= schema.num_classes() {
                return Err(Error::Validation(format!(
                    "sample `{}` has label {l} outside 0..{}",
                    self.id,
                    schema.num_classes()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(body: &str) -> Result<Template> {
        Template::new("t", "task", body, None)
    }

    #[test]
    fn counts_distinct_placeholders() {
        assert_eq!(count_arguments("{{text}} Overall, the experience is").unwrap(), 1);
        assert_eq!(count_arguments("{{a}} and again {{a}}").unwrap(), 1);
        assert_eq!(
            count_arguments("Sentence 1: {{premise}} Sentence 2: {{hypothesis}}").unwrap(),
            2
        );
        assert_eq!(count_arguments("{{ spaced }} ok").unwrap(), 1);
    }

    #[test]
    fn rejects_unbalanced_and_unsupported() {
        assert!(matches!(count_arguments("{{text"), Err(Error::Template(_))));
        assert!(matches!(count_arguments("text}} {{a}}"), Err(Error::Template(_))));
        assert!(matches!(count_arguments("{{a | upper}}"), Err(Error::Template(_))));
        assert!(matches!(
            count_arguments("{% if x %}{{a}}{% endif %}"),
            Err(Error::Template(_))
        ));
        assert!(matches!(t("pick {{answer_choices}} for {{a}}"), Err(Error::Template(_))));
        assert!(matches!(t("no placeholders"), Err(Error::Template(_))));
    }

    #[test]
    fn single_braces_are_literal() {
        let tpl = t("{json} {{a}}").unwrap();
        assert_eq!(tpl.arity(), 1);
    }

    #[test]
    fn answer_choices_must_be_distinct_and_nonempty() {
        let dup = Template::new("x", "t", "{{a}}", Some(vec!["Yes".into(), "Yes".into()]));
        assert!(dup.is_err());
        let empty = Template::new("x", "t", "{{a}}", Some(vec!["Yes".into(), " ".into()]));
        assert!(empty.is_err());
    }

    #[test]
    fn adapt_renames_by_first_appearance() {
        let schema = TaskSchema::new(vec!["review".into()], 2, None).unwrap();
        let tpl = Template::new(
            "sent_1",
            "sentiment",
            "{{text}} How does the reviewer feel about the movie?",
            Some(vec!["bad".into(), "good".into()]),
        )
        .unwrap();
        let a = tpl.adapt(&schema).unwrap();
        assert_eq!(a.body(), "{{review}} How does the reviewer feel about the movie?");
        assert_eq!(a.id(), "sent_1@adapted");
        assert_eq!(a.answer_choices(), tpl.answer_choices());
    }

    #[test]
    fn adapt_fixed_point_and_mismatch() {
        let schema =
            TaskSchema::new(vec!["premise".into(), "hypothesis".into()], 2, None).unwrap();
        let tpl = t("{{premise}} Question: {{hypothesis}}").unwrap();
        assert_eq!(tpl.adapt(&schema).unwrap().body(), tpl.body());

        let one = TaskSchema::new(vec!["text".into()], 2, None).unwrap();
        assert!(matches!(tpl.adapt(&one), Err(Error::Contract(_))));
    }

    #[test]
    fn adapt_handles_repeats_and_swaps() {
        let schema = TaskSchema::new(vec!["x".into(), "y".into()], 2, None).unwrap();
        let tpl = t("{{b}} then {{a}} then {{b}}").unwrap();
        assert_eq!(tpl.adapt(&schema).unwrap().body(), "{{x}} then {{y}} then {{x}}");
    }

    #[test]
    fn render_substitutes_fields() {
        let tpl = t("{{premise}} Question: {{hypothesis}}").unwrap();
        let s = Sample::new(
            "1",
            [
                ("premise", "Oil prices fall back as Yukos oil threat lifted."),
                ("hypothesis", "Oil prices rise."),
            ],
            None,
        );
        assert_eq!(
            tpl.render(&s).unwrap(),
            "Oil prices fall back as Yukos oil threat lifted. Question: Oil prices rise."
        );
        let empty = Sample::new("2", [("premise", ""), ("hypothesis", "x")], None);
        assert_eq!(tpl.render(&empty).unwrap(), " Question: x");
        let missing = Sample::new("3", [("premise", "p")], None);
        match tpl.render(&missing) {
            Err(Error::Render(name)) => assert_eq!(name, "hypothesis"),
            other => panic!("expected render error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_builds_arity_index_sorted_by_id() {
        let data = r#"{"id":"c","task":"nli","template":"{{premise}} Question: {{hypothesis}}"}
{"id":"a","task":"sent","template":"{{text}} Overall, the experience is","answer_choices":["bad","good"]}

{"id":"b","task":"para","template":"Sentence 1: {{s1}} Sentence 2: {{s2}}"}
"#;
        let kb = PromptKb::from_reader(data.as_bytes()).unwrap();
        let ids: Vec<_> = kb.templates().iter().map(|t| t.id()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(kb.arity_index()[&1], vec!["a".to_string()]);
        assert_eq!(kb.arity_index()[&2], vec!["b".to_string(), "c".to_string()]);
        assert_eq!(kb.get("c").unwrap().arity(), 2);
    }

    #[test]
    fn ingest_reports_line_numbers_and_conflicts() {
        let bad = "{\"id\":\"a\",\"task\":\"t\",\"template\":\"{{x}}\"}\nnot json\n";
        match PromptKb::from_reader(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let zero = "{\"id\":\"a\",\"task\":\"t\",\"template\":\"no placeholders\"}\n";
        assert!(matches!(
            PromptKb::from_reader(zero.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        let dup = "{\"id\":\"a\",\"task\":\"t\",\"template\":\"{{x}}\"}\n{\"id\":\"a\",\"task\":\"u\",\"template\":\"{{y}}\"}\n";
        assert!(matches!(PromptKb::from_reader(dup.as_bytes()), Err(Error::Conflict(_))));
    }

    #[test]
    fn schema_validation() {
        assert!(TaskSchema::new(vec![], 2, None).is_err());
        assert!(TaskSchema::new(vec!["a".into()], 1, None).is_err());
        assert!(TaskSchema::new(vec!["a".into()], 2, Some(vec!["x".into()])).is_err());
        assert!(TaskSchema::new(vec!["a".into()], 2, Some(vec!["x".into(), "x".into()])).is_err());
        let s: TaskSchema = serde_json::from_str(
            r#"{"field_names":["premise","hypothesis"],"num_classes":2,"label_texts":["entailment","not_entailment"]}"#,
        )
        .unwrap();
        assert_eq!(s.dataset_label_texts().unwrap()[1], "not_entailment");
    }
}
