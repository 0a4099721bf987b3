use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{batch_loss_and_grad, TrainItem};
use super::schedule::{lr_at, Adam, AdamConfig};
use super::{PeftParams, DEFAULT_RANK};
use crate::dataset::FewShotDataset;
use crate::error::{Error, Result};
use crate::lm::toy::{Grads, Scalar, ToyLm};
use crate::lm::Vocabulary;
use crate::prompt_kb::Template;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateOrder {
    #[default]
    RoundRobin,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub unlikelihood_weight: f64,
    pub rank: usize,
    pub seed: u64,
    pub template_order: TemplateOrder,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 600,
            lr: 1e-3,
            warmup_ratio: 0.06,
            batch_size: 8,
            unlikelihood_weight: 1.0,
            rank: DEFAULT_RANK,
            seed: 0,
            template_order: TemplateOrder::RoundRobin,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio {} must be in [0, 1)", self.warmup_ratio));
        }
        if self.batch_size == 0 || self.rank == 0 {
            return bad("batch_size and rank must be ≥ 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(self.unlikelihood_weight.is_finite() && self.unlikelihood_weight >= 0.0) {
            return bad(format!("unlikelihood_weight {} must be ≥ 0", self.unlikelihood_weight));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Batch loss before each optimizer step.
    pub losses: Vec<f64>,
    /// Tokens whose unlikelihood term hit the `1 − p` clamp.
    pub clamp_warnings: usize,
}

/// Endless seeded reshuffling over `0..n`.
pub(crate) struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    pub fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut c = Cycler {
            order: (0..n).collect(),
            pos: 0,
            rng,
        };
        c.order.shuffle(&mut c.rng);
        c
    }

    pub fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Tokenized training items indexed `[sample][template]`.
pub fn encode_items(
    vocab: &Vocabulary,
    data: &FewShotDataset,
    templates: &[Template],
    choices: &[String],
) -> Result<Vec<Vec<TrainItem>>> {
    if templates.is_empty() {
        return Err(Error::contract("training needs at least one template"));
    }
    if choices.len() != data.num_classes() {
        return Err(Error::contract(format!(
            "{} answer choices for {} classes",
            choices.len(),
            data.num_classes()
        )));
    }
    let encoded = crate::lm::encode_continuations(vocab, &choices.iter().map(String::as_str).collect::<Vec<_>>())?;
    let labels = data.labels()?;
    data.samples()
        .iter()
        .zip(labels)
        .map(|(s, gold)| {
            templates
                .iter()
                .map(|t| {
                    Ok(TrainItem {
                        prompt: vocab.encode(&t.render(s)?),
                        choices: encoded.clone(),
                        gold,
                    })
                })
                .collect()
        })
        .collect()
}

/// Optimize adapters on `items[sample][template]`; the base model stays frozen.
pub fn train<F: Scalar>(
    model: &ToyLm<F>,
    mut peft: PeftParams<F>,
    items: &[Vec<TrainItem>],
    cfg: &TrainConfig,
) -> Result<(PeftParams<F>, TrainReport)> {
    cfg.validate()?;
    let mut report = TrainReport::default();
    if cfg.steps == 0 {
        return Ok((peft, report));
    }
    if items.is_empty() || items.iter().any(Vec::is_empty) {
        return Err(Error::contract("training needs ≥ 1 sample and ≥ 1 template"));
    }
    let n_templates = items[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cycler = Cycler::new(items.len(), ChaCha8Rng::seed_from_u64(rng.gen()));
    let mut adam = Adam::new(
        cfg.adam,
        peft.adapters.iter().flat_map(|a| [a.lambda.len(), a.a.len(), a.b.len()]),
    );
    let mut draws = 0usize;
    for step in 0..cfg.steps {
        let lr = lr_at(step, cfg.steps, cfg.lr, cfg.warmup_ratio);
        let batch: Vec<&TrainItem> = (0..cfg.batch_size)
            .map(|_| {
                let s = cycler.next();
                let r = match cfg.template_order {
                    TemplateOrder::RoundRobin => draws % n_templates,
                    TemplateOrder::Random => rng.gen_range(0..n_templates),
                };
                draws += 1;
                &items[s][r.min(items[s].len() - 1)]
            })
            .collect();
        let mut grads = Grads::for_peft(&peft);
        let parts = batch_loss_and_grad(model, Some(&peft), &batch, cfg.unlikelihood_weight, &mut grads)?;
        if !parts.total.is_finite() {
            return Err(Error::NonFiniteLoss { step, lr });
        }
        if parts.clamps > 0 {
            log::warn!("step {step}: {} unlikelihood terms clamped at 1 − p = 1e-7", parts.clamps);
            report.clamp_warnings += parts.clamps;
        }
        report.losses.push(parts.total);
        let g = grads.peft.expect("peft gradients");
        adam.step(
            lr,
            peft.adapters.iter_mut().flat_map(|a| a.tensors_mut()),
            g.iter().flat_map(|a| a.tensors()),
        );
    }
    Ok((peft, report))
}

/// Encode, initialize adapters from `cfg.seed` and train.
pub fn train_on<F: Scalar>(
    model: &ToyLm<F>,
    data: &FewShotDataset,
    templates: &[Template],
    choices: &[String],
    cfg: &TrainConfig,
) -> Result<(PeftParams<F>, TrainReport)> {
    let items = encode_items(model.vocab(), data, templates, choices)?;
    let peft = PeftParams::init(model, cfg.rank, cfg.seed)?;
    train(model, peft, &items, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            lr: 3e-3,
            warmup_ratio: 0.05,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Full-parameter maximum-likelihood training on `(prompt, target)` pairs.
pub fn pretrain<F: Scalar>(model: &mut ToyLm<F>, pairs: &[(String, String)], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::contract("pretraining corpus is empty"));
    }
    if cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.warmup_ratio) {
        return Err(Error::Validation("pretraining needs batch_size ≥ 1 and warmup_ratio in [0, 1)".into()));
    }
    let vocab = model.vocab().clone();
    let items: Vec<TrainItem> = pairs
        .iter()
        .map(|(p, t)| {
            let target = crate::lm::encode_continuations(&vocab, &[t.as_str()])?.remove(0);
            Ok(TrainItem {
                prompt: vocab.encode(p),
                choices: vec![target],
                gold: 0,
            })
        })
        .collect::<Result<_>>()?;
    let mut cycler = Cycler::new(items.len(), ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut adam = Adam::new(AdamConfig::default(), model.params().iter().map(|p| p.len()));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = lr_at(step, cfg.steps, cfg.lr, cfg.warmup_ratio);
        let batch: Vec<&TrainItem> = (0..cfg.batch_size).map(|_| &items[cycler.next()]).collect();
        let mut grads = Grads::for_base(model);
        let parts = batch_loss_and_grad(model, None, &batch, 0.0, &mut grads)?;
        if !parts.total.is_finite() {
            return Err(Error::NonFiniteLoss { step, lr });
        }
        losses.push(parts.total);
        let g = grads.base.expect("base gradients");
        adam.step(
            lr,
            model.params_mut().iter_mut().map(|p| p.as_slice_mut().expect("contiguous")),
            g.iter().map(|p| p.as_slice().expect("contiguous")),
        );
    }
    Ok(losses)
}
