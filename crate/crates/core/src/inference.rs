//! Monte-Carlo weighted inference over retrieved templates.
//!
//! Every (sample, template) pair is scored once into a [`ScoreTable`];
//! template weights and predictions are both derived from it.

use serde::{Deserialize, Serialize};

use crate::choices::ChoiceCandidate;
use crate::dataset::FewShotDataset;
use crate::error::{Error, Result};
use crate::lm::{argmax, ScoringBackend, TokenLogProbs};
use crate::prompt_kb::{Sample, Template};

/// Per-template weights `w_r ≥ 0`, `Σ w_r = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateWeights {
    pub w: Vec<f64>,
}

impl TemplateWeights {
    pub fn uniform(n: usize) -> Self {
        TemplateWeights {
            w: vec![1.0 / n as f64; n],
        }
    }

    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::contract(format!("invalid template weights {w:?}")));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("template weights sum to {s}, not 1")));
        }
        Ok(TemplateWeights { w })
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Averaged class distribution and its argmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub probabilities: Vec<f64>,
    pub argmax: usize,
}

/// Numerically stable `softmax(x / temperature)`.
pub fn softmax(xs: &[f64], temperature: f64) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|&x| ((x - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Length-normalized choice scores, indexed `[sample][template][class]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub scores: Vec<Vec<Vec<f64>>>,
}

impl ScoreTable {
    pub fn compute(
        backend: &dyn ScoringBackend,
        samples: &[Sample],
        templates: &[Template],
        choices: &ChoiceCandidate,
    ) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::contract("inference needs at least one template"));
        }
        let texts: Vec<&str> = choices.mapping.iter().map(String::as_str).collect();
        let scores = samples
            .iter()
            .map(|s| {
                templates
                    .iter()
                    .map(|t| {
                        Ok(backend
                            .score_batch(&t.render(s)?, &texts)?
                            .iter()
                            .map(TokenLogProbs::mean)
                            .collect())
                    })
                    .collect::<Result<Vec<Vec<f64>>>>()
            })
            .collect::<Result<_>>()?;
        Ok(ScoreTable { scores })
    }

    pub fn num_samples(&self) -> usize {
        self.scores.len()
    }

    pub fn num_templates(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    /// `mass_r = Σ_x Σ_y score[x][r][y]` for each template.
    pub fn template_masses(&self) -> Vec<f64> {
        (0..self.num_templates())
            .map(|r| self.scores.iter().map(|s| s[r].iter().sum::<f64>()).sum())
            .collect()
    }

    /// Sum of all entries.
    pub fn total_mass(&self) -> f64 {
        self.template_masses().iter().sum()
    }

    /// `softmax(mass / temperature)` over templates.
    pub fn weights(&self, temperature: f64) -> Result<TemplateWeights> {
        if self.num_samples() == 0 {
            return Err(Error::contract("template weighting needs a non-empty pool"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Validation(format!("temperature {temperature} must be positive")));
        }
        Ok(TemplateWeights {
            w: softmax(&self.template_masses(), temperature),
        })
    }

    pub fn predict(&self, sample: usize, weights: &TemplateWeights) -> Result<ClassScores> {
        combine(&self.scores[sample], weights)
    }
}

/// Per template, softmax over classes; then the `w`-weighted average.
pub fn combine(per_template_scores: &[Vec<f64>], weights: &TemplateWeights) -> Result<ClassScores> {
    if per_template_scores.len() != weights.len() {
        return Err(Error::contract(format!(
            "{} templates but {} weights",
            per_template_scores.len(),
            weights.len()
        )));
    }
    let dists: Vec<Vec<f64>> = per_template_scores.iter().map(|s| softmax(s, 1.0)).collect();
    average(&dists, weights)
}

/// Weighted average of per-template class distributions.
pub fn average(dists: &[Vec<f64>], weights: &TemplateWeights) -> Result<ClassScores> {
    let k = dists.first().map_or(0, Vec::len);
    if k == 0 || dists.len() != weights.len() || dists.iter().any(|d| d.len() != k) {
        return Err(Error::contract("distributions and weights disagree in shape"));
    }
    let mut p = vec![0.0; k];
    for (d, &w) in dists.iter().zip(&weights.w) {
        for (acc, &x) in p.iter_mut().zip(d) {
            *acc += w * x;
        }
    }
    Ok(ClassScores {
        argmax: argmax(&p),
        probabilities: p,
    })
}

/// Per-template pool masses turned into weights at `temperature`.
pub fn compute_template_weights(
    backend: &dyn ScoringBackend,
    templates: &[Template],
    pool: &[Sample],
    choices: &ChoiceCandidate,
    temperature: f64,
) -> Result<TemplateWeights> {
    ScoreTable::compute(backend, pool, templates, choices)?.weights(temperature)
}

pub fn predict(
    backend: &dyn ScoringBackend,
    sample: &Sample,
    templates: &[Template],
    choices: &ChoiceCandidate,
    weights: &TemplateWeights,
) -> Result<ClassScores> {
    let table = ScoreTable::compute(backend, std::slice::from_ref(sample), templates, choices)?;
    table.predict(0, weights)
}

/// One line of the predictions output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mcc: f64,
    /// `confusion[gold][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_labels(gold: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if gold.len() != predicted.len() {
            return Err(Error::contract("gold and predicted labels differ in length"));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&g, &p) in gold.iter().zip(predicted) {
            if g >= num_classes || p >= num_classes {
                return Err(Error::contract(format!("label outside 0..{num_classes}")));
            }
            confusion[g][p] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let k = confusion.len();
        let n: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
        let true_count: Vec<f64> = (0..k).map(|i| confusion[i].iter().sum::<usize>() as f64).collect();
        let pred_count: Vec<f64> = (0..k).map(|j| (0..k).map(|i| confusion[i][j]).sum::<usize>() as f64).collect();
        let f1: f64 = (0..k)
            .map(|i| {
                let tp = confusion[i][i] as f64;
                let denom = true_count[i] + pred_count[i];
                if denom == 0.0 {
                    0.0
                } else {
                    2.0 * tp / denom
                }
            })
            .sum::<f64>()
            / k.max(1) as f64;
        let (c, s) = (correct as f64, n as f64);
        let pt: f64 = (0..k).map(|i| pred_count[i] * true_count[i]).sum();
        let pp: f64 = pred_count.iter().map(|x| x * x).sum();
        let tt: f64 = true_count.iter().map(|x| x * x).sum();
        let denom = ((s * s - pp) * (s * s - tt)).sqrt();
        let mcc = if denom == 0.0 { 0.0 } else { (c * s - pt) / denom };
        Metrics {
            n,
            accuracy: if n == 0 { 0.0 } else { c / s },
            macro_f1: f1,
            mcc,
            confusion,
        }
    }
}

/// Predict every sample of `data` and score against its labels.
pub fn evaluate(
    backend: &dyn ScoringBackend,
    data: &FewShotDataset,
    templates: &[Template],
    choices: &ChoiceCandidate,
    weights: &TemplateWeights,
) -> Result<(Vec<Prediction>, Metrics)> {
    let table = ScoreTable::compute(backend, data.samples(), templates, choices)?;
    evaluate_table(&table, data, weights)
}

/// [`evaluate`] from precomputed scores.
pub fn evaluate_table(
    table: &ScoreTable,
    data: &FewShotDataset,
    weights: &TemplateWeights,
) -> Result<(Vec<Prediction>, Metrics)> {
    let gold = data.labels()?;
    let preds = predictions(table, data.samples(), weights)?;
    let predicted: Vec<usize> = preds.iter().map(|p| p.predicted_class).collect();
    let metrics = Metrics::from_labels(&gold, &predicted, data.num_classes())?;
    Ok((preds, metrics))
}

pub fn predictions(table: &ScoreTable, samples: &[Sample], weights: &TemplateWeights) -> Result<Vec<Prediction>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let c = table.predict(i, weights)?;
            Ok(Prediction {
                id: s.id.clone(),
                probabilities: c.probabilities,
                predicted_class: c.argmax,
            })
        })
        .collect()
}
