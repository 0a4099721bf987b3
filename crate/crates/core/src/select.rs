//! Answer-choice configuration selection by stratified cross-validation.
//!
//! Each candidate is trained on every fold's complement and scored by
//! held-out macro-F1 plus the log-probability mass its fold model assigns
//! to an unlabeled pool; both metrics are min-max normalized across
//! candidates and summed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::choices::{CandidateKind, ChoiceCandidate};
use crate::dataset::FewShotDataset;
use crate::error::{Error, Result};
use crate::inference::{evaluate_table, ScoreTable};
use crate::lm::{Scalar, ScoringBackend, ToyLm};
use crate::peft_trainer::{train_on, TrainConfig};
use crate::prompt_kb::{Sample, Template};

/// `Σ_y Σ_φ Σ_x` of length-normalized choice scores.
pub fn pool_logprob_mass(
    backend: &dyn ScoringBackend,
    candidate: &ChoiceCandidate,
    templates: &[Template],
    pool: &[Sample],
) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::contract("log-probability mass needs a non-empty pool"));
    }
    Ok(ScoreTable::compute(backend, pool, templates, candidate)?.total_mass())
}

/// Seeded stratified split: `folds[f]` lists the sample indices of fold `f`.
pub fn stratified_folds(labels: &[usize], num_classes: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::Validation(format!("cross-validation needs ≥ 2 folds, got {folds}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Vec::new(); folds];
    let mut next = 0;
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < folds {
            return Err(Error::Stratification(format!(
                "class {c} has {} samples, fewer than {folds} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for i in members {
            out[next % folds].push(i);
            next += 1;
        }
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

/// Min-max normalization to `[0, 1]`; an all-equal set maps to 0.5.
pub fn min_max(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    xs.iter()
        .map(|&x| if hi > lo { (x - lo) / (hi - lo) } else { 0.5 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigScore {
    pub kind: CandidateKind,
    pub mapping: Vec<String>,
    pub fold_f1: Vec<f64>,
    pub mean_f1: f64,
    /// Pool mass averaged over fold models.
    pub pool_mass: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Unlabeled evaluation inputs.
    #[default]
    Transductive,
    /// Training inputs with labels hidden.
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub folds: usize,
    pub seed: u64,
    pub temperature: f64,
    pub train: TrainConfig,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            folds: 3,
            seed: 0,
            temperature: 1.0,
            train: TrainConfig::default(),
        }
    }
}

/// Fold F1 scores and mean pool mass of one candidate.
fn cross_validate<F: Scalar>(
    model: &ToyLm<F>,
    cand: &ChoiceCandidate,
    train: &FewShotDataset,
    folds: &[Vec<usize>],
    templates: &[Template],
    pool: &[Sample],
    cfg: &SelectConfig,
) -> Result<(Vec<f64>, f64)> {
    let mut f1 = Vec::with_capacity(folds.len());
    let mut mass = 0.0;
    for (f, held_out) in folds.iter().enumerate() {
        let fit: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect();
        let (peft, _) = train_on(model, &train.subset(&fit), templates, &cand.mapping, &cfg.train)?;
        let fold_model = model.merged(&peft)?;
        let pool_table = ScoreTable::compute(&fold_model, pool, templates, cand)?;
        let weights = pool_table.weights(cfg.temperature)?;
        let valid = train.subset(held_out);
        let table = ScoreTable::compute(&fold_model, valid.samples(), templates, cand)?;
        let (_, metrics) = evaluate_table(&table, &valid, &weights)?;
        log::info!("{} fold {f}: macro-F1 {:.4}", cand.kind.name(), metrics.macro_f1);
        f1.push(metrics.macro_f1);
        mass += pool_table.total_mass();
    }
    Ok((f1, mass / folds.len() as f64))
}

/// Pick the candidate with the highest combined score; ties go to the
/// higher-priority kind. Candidates whose training fails are dropped.
pub fn select_config<F: Scalar>(
    candidates: &[ChoiceCandidate],
    train: &FewShotDataset,
    templates: &[Template],
    model: &ToyLm<F>,
    pool: &[Sample],
    cfg: &SelectConfig,
) -> Result<(ChoiceCandidate, Vec<ConfigScore>)> {
    if candidates.is_empty() {
        return Err(Error::contract("selection needs at least one candidate"));
    }
    if templates.is_empty() || pool.is_empty() {
        return Err(Error::contract("selection needs templates and a non-empty pool"));
    }
    for c in candidates {
        c.validate(train.num_classes())?;
    }
    let folds = stratified_folds(&train.labels()?, train.num_classes(), cfg.folds, cfg.seed)?;
    let mut kept = Vec::new();
    let mut raw = Vec::new();
    for cand in candidates {
        match cross_validate(model, cand, train, &folds, templates, pool, cfg) {
            Ok(r) => {
                kept.push(cand);
                raw.push(r);
            }
            Err(e) => log::warn!("dropping {} candidate {:?}: {e}", cand.kind.name(), cand.mapping),
        }
    }
    if kept.is_empty() {
        return Err(Error::Generation("every candidate failed cross-validation".into()));
    }
    let mean_f1: Vec<f64> = raw.iter().map(|(f, _)| f.iter().sum::<f64>() / f.len() as f64).collect();
    let masses: Vec<f64> = raw.iter().map(|&(_, m)| m).collect();
    let (nf, nm) = (min_max(&mean_f1), min_max(&masses));
    let scores: Vec<ConfigScore> = kept
        .iter()
        .zip(raw)
        .enumerate()
        .map(|(i, (c, (fold_f1, pool_mass)))| ConfigScore {
            kind: c.kind,
            mapping: c.mapping.clone(),
            fold_f1,
            mean_f1: mean_f1[i],
            pool_mass,
            combined: nf[i] + nm[i],
        })
        .collect();
    let best = best_index(&scores);
    Ok((kept[best].clone(), scores))
}

/// Highest combined score, then kind priority, then list order.
pub fn best_index(scores: &[ConfigScore]) -> usize {
    (0..scores.len())
        .min_by(|&a, &b| {
            scores[b]
                .combined
                .total_cmp(&scores[a].combined)
                .then(scores[a].kind.cmp(&scores[b].kind))
                .then(a.cmp(&b))
        })
        .expect("non-empty scores")
}
