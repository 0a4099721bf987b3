//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes and returns plain strings or numbers; results are
//! JSON. The `*_json` functions hold the logic so native tests can call
//! them without a JavaScript host.

use autfew::dataset::FewShotDataset;
use autfew::embedder::HashedBowEmbedder;
use autfew::inference::{combine, softmax, TemplateWeights};
use autfew::peft_trainer::lr_at;
use autfew::prompt_kb::{Sample, TaskSchema};
use autfew::retrieval::{build_query, retrieve, RetrievalConfig};
use autfew::synth;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn js_err(e: String) -> JsValue {
    JsValue::from_str(&e)
}

/// Retrieve the top `r` templates of the bundled knowledge base for a task
/// given its field names (comma-separated) and example inputs (one per
/// line, fields separated by ` | `).
pub fn rank_templates_json(fields: &str, examples: &str, r: usize) -> Result<String, String> {
    let names: Vec<String> = fields.split(',').map(|f| f.trim().to_string()).filter(|f| !f.is_empty()).collect();
    let schema = TaskSchema::new(names.clone(), 2, None).map_err(|e| e.to_string())?;
    let samples: Vec<Sample> = examples
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let values: Vec<&str> = line.split(" | ").collect();
            if values.len() != names.len() {
                return Err(format!("line {} has {} values for {} fields", i + 1, values.len(), names.len()));
            }
            Ok(Sample::new(i.to_string(), names.iter().cloned().zip(values.iter().map(|v| v.trim())), None))
        })
        .collect::<Result<_, String>>()?;
    let train = FewShotDataset::new(schema.clone(), samples).map_err(|e| e.to_string())?;
    let embedder = HashedBowEmbedder::default();
    let cfg = RetrievalConfig::with_r(r).map_err(|e| e.to_string())?;
    let query = build_query(&schema, &train, &embedder, &cfg).map_err(|e| e.to_string())?;
    let found = retrieve(&synth::knowledge_base(), &schema, &query, &embedder, &cfg).map_err(|e| e.to_string())?;
    let preview = train.samples().first();
    let rows: Vec<Value> = found
        .templates
        .iter()
        .zip(&found.similarities)
        .map(|(t, s)| {
            json!({
                "id": t.id().trim_end_matches("@adapted"),
                "similarity": s,
                "template": t.body(),
                "rendered": preview.and_then(|p| t.render(p).ok()),
            })
        })
        .collect();
    Ok(Value::Array(rows).to_string())
}

#[wasm_bindgen]
pub fn rank_templates(fields: &str, examples: &str, r: usize) -> Result<String, JsValue> {
    rank_templates_json(fields, examples, r).map_err(js_err)
}

/// Learning rate at every step `0..=steps`.
#[wasm_bindgen]
pub fn lr_schedule(steps: usize, base_lr: f64, warmup_ratio: f64) -> Vec<f64> {
    (0..=steps).map(|s| lr_at(s, steps.max(1), base_lr, warmup_ratio)).collect()
}

/// Template-weighted class distribution. `scores` is a JSON matrix of
/// length-normalized log scores `[template][class]`; `masses` holds each
/// template's pool log-probability mass.
pub fn weighted_vote_json(scores: &str, masses: &str, temperature: f64) -> Result<String, String> {
    let scores: Vec<Vec<f64>> = serde_json::from_str(scores).map_err(|e| format!("scores: {e}"))?;
    let masses: Vec<f64> = serde_json::from_str(masses).map_err(|e| format!("masses: {e}"))?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err("temperature must be positive".into());
    }
    if masses.len() != scores.len() {
        return Err(format!("{} masses for {} templates", masses.len(), scores.len()));
    }
    let weights = TemplateWeights::new(softmax(&masses, temperature)).map_err(|e| e.to_string())?;
    let per_template: Vec<Vec<f64>> = scores.iter().map(|s| softmax(s, 1.0)).collect();
    let combined = combine(&scores, &weights).map_err(|e| e.to_string())?;
    Ok(json!({
        "weights": weights.w,
        "per_template": per_template,
        "probabilities": combined.probabilities,
        "argmax": combined.argmax,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn weighted_vote(scores: &str, masses: &str, temperature: f64) -> Result<String, JsValue> {
    weighted_vote_json(scores, masses, temperature).map_err(js_err)
}
