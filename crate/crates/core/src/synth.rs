//! Synthetic instruction-tuning world for desk-scale experiments.
//!
//! A template collection spanning topic, sentiment, spam, paraphrase and
//! entailment tasks; a pretraining corpus rendered from it; and a 2-topic
//! target task whose samples mix topic words with neutral fillers.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, load_model, save_model};
use crate::dataset::FewShotDataset;
use crate::error::Result;
use crate::lm::{ToyLm, ToyLmConfig, Vocabulary};
use crate::peft_trainer::{pretrain, PretrainConfig};
use crate::prompt_kb::{PromptKb, Sample, TaskSchema, Template};

pub struct Topic {
    pub name: &'static str,
    pub words: &'static [&'static str],
}

pub const TOPICS: &[Topic] = &[
    Topic {
        name: "sports",
        words: &[
            "football", "soccer", "tennis", "goal", "match", "coach", "team", "player", "stadium", "league",
            "referee", "tournament", "striker", "goalkeeper", "basketball", "hockey", "racket", "inning",
            "pitcher", "umpire", "marathon", "sprint", "medal", "olympics", "championship", "halftime",
            "penalty", "dribble", "wicket", "rugby", "golf", "court", "season", "transfer", "derby", "cyclist",
        ],
    },
    Topic {
        name: "music",
        words: &[
            "guitar", "piano", "melody", "concert", "album", "song", "singer", "band", "drum", "violin",
            "chorus", "lyrics", "orchestra", "rhythm", "symphony", "jazz", "tempo", "harmony", "vinyl",
            "playlist", "microphone", "studio", "opera", "ballad", "chord", "bass", "saxophone", "trumpet",
            "rapper", "festival", "encore", "duet", "soprano", "remix", "gig", "tune",
        ],
    },
    Topic {
        name: "food",
        words: &[
            "pasta", "pizza", "recipe", "kitchen", "chef", "flavor", "bread", "cheese", "soup", "salad",
            "dessert", "oven", "spice", "garlic", "butter", "noodle", "grill", "sauce", "bakery", "tomato",
            "menu", "dinner", "breakfast", "lunch", "cookie", "omelet", "curry", "vinegar", "steak", "sushi",
            "taco", "waffle", "yogurt", "pepper", "cinnamon", "broth",
        ],
    },
    Topic {
        name: "science",
        words: &[
            "atom", "molecule", "physics", "chemistry", "experiment", "laboratory", "theory", "electron",
            "gravity", "telescope", "microscope", "genome", "protein", "hypothesis", "quantum", "particle",
            "neutron", "orbit", "fossil", "enzyme", "galaxy", "laser", "isotope", "catalyst", "neuron",
            "bacteria", "velocity", "spectrum", "formula", "reactor", "specimen", "plasma", "comet",
            "asteroid", "photon", "cell",
        ],
    },
    Topic {
        name: "travel",
        words: &[
            "flight", "airport", "hotel", "passport", "luggage", "beach", "tourist", "journey", "cruise",
            "island", "museum", "ticket", "suitcase", "resort", "itinerary", "backpack", "hostel", "visa",
            "sightseeing", "train", "station", "map", "guide", "souvenir", "vacation", "booking",
            "destination", "ferry", "camping", "mountain", "villa", "voyage", "trip", "boarding", "terminal",
            "motel",
        ],
    },
    Topic {
        name: "finance",
        words: &[
            "bank", "loan", "interest", "stock", "market", "investor", "dividend", "budget", "mortgage",
            "credit", "debt", "salary", "tax", "profit", "revenue", "inflation", "currency", "bond",
            "portfolio", "savings", "fund", "broker", "audit", "invoice", "payment", "shares", "asset",
            "equity", "deposit", "pension", "insurance", "trading", "wallet", "cash", "accountant", "economy",
        ],
    },
];

/// Topic-neutral words shared by every task.
pub const FILLERS: &[&str] = &[
    "today", "really", "people", "many", "new", "time", "day", "week", "said", "also", "still", "made",
    "next", "last", "around", "year", "told", "place", "thing", "often", "every", "another", "little",
    "several", "always", "never", "quite", "later", "early", "recent", "small", "large", "usual", "whole",
    "morning", "evening", "city", "local", "friend", "family",
];

pub const POSITIVE: &[&str] = &[
    "great", "excellent", "wonderful", "amazing", "love", "perfect", "fantastic", "superb", "pleasant",
    "delightful", "brilliant", "happy",
];

pub const NEGATIVE: &[&str] = &[
    "awful", "terrible", "horrible", "hate", "broken", "poor", "disappointing", "useless", "annoying",
    "worst", "sad", "rude",
];

pub const SPAM: &[&str] = &[
    "winner", "prize", "free", "click", "offer", "urgent", "claim", "lottery", "bonus", "unsubscribe",
    "guaranteed", "reward",
];

pub const HAM: &[&str] = &[
    "meeting", "agenda", "report", "schedule", "colleague", "attached", "minutes", "review", "deadline",
    "project", "office", "notes",
];

/// `(id, task, body, answer choices)` of the template collection.
pub const KB_TEMPLATES: &[(&str, &str, &str, &[&str])] = &[
    ("topic_about", "topic", "{{text}} What is this article about?", &[]),
    ("topic_category", "topic", "Which category does this article belong to? {{text}}", &[]),
    ("topic_news", "topic", "{{article}} This news article is about", &[]),
    ("topic_subject", "topic", "Article: {{text}} The subject of the article is", &[]),
    ("topic_label", "topic", "{{text}} Label the topic of this article.", &[]),
    ("topic_name", "topic", "Read the article and name its topic. {{article}}", &[]),
    ("sent_like", "sentiment", "{{review}} Did the reviewer like the product?", &["no", "yes"]),
    ("sent_experience", "sentiment", "{{text}} Overall, the experience is", &["bad", "good"]),
    ("sent_feel", "sentiment", "{{text}} How does the reviewer feel about the product?", &["negative", "positive"]),
    ("sent_rating", "sentiment", "Review: {{review}} Is this review positive or negative?", &["negative", "positive"]),
    ("spam_is", "spam", "{{email}} Is this email spam?", &["no", "yes"]),
    ("spam_message", "spam", "Message: {{text}} Should this message be filtered as spam?", &["no", "yes"]),
    ("para_is", "paraphrase", "{{sentence1}} Is that a paraphrase of the following sentence? {{sentence2}}", &["no", "yes"]),
    ("para_same", "paraphrase", "Sentence 1: {{sentence1}} Sentence 2: {{sentence2}} Do these sentences mean the same thing?", &["no", "yes"]),
    ("nli_question", "entailment", "{{premise}} Question: {{hypothesis}}", &["yes", "no"]),
    ("nli_sentence", "entailment", "Sentence 1: {{premise}} Sentence 2: {{hypothesis}}", &["yes", "no"]),
    ("nli_true", "entailment", "{{premise}} Based on that, is it true that {{hypothesis}}?", &["yes", "no"]),
    ("cloze_blank", "cloze", "{{text}} Which word fills the blank?", &[]),
];

/// Cloze pairs per template relative to other tasks, so every word of the
/// synthetic vocabulary is a pretraining target.
pub const CLOZE_MULTIPLIER: usize = 6;

pub fn knowledge_base() -> PromptKb {
    let templates = KB_TEMPLATES
        .iter()
        .map(|(id, task, body, choices)| {
            let choices = (!choices.is_empty()).then(|| choices.iter().map(|c| c.to_string()).collect());
            Template::new(*id, *task, *body, choices).expect("static template")
        })
        .collect();
    PromptKb::from_templates(templates).expect("static knowledge base")
}

/// `n_key` words from `key` and `n_fill` fillers, shuffled.
pub fn mixed_sentence(rng: &mut ChaCha8Rng, key: &[&str], n_key: usize, n_fill: usize) -> String {
    let mut words: Vec<&str> = (0..n_key).map(|_| *key.choose(rng).expect("non-empty")).collect();
    words.extend((0..n_fill).map(|_| *FILLERS.choose(rng).expect("non-empty")));
    words.shuffle(rng);
    words.join(" ")
}

fn render(t: &Template, fields: &[(&str, String)]) -> String {
    let names = t.placeholders().to_vec();
    let sample = Sample::new("x", names.iter().cloned().zip(fields.iter().map(|(_, v)| v.clone())), None);
    t.render(&sample).expect("synthetic fields match placeholders")
}

/// `(prompt, target)` pairs rendered from every template of the KB.
pub fn instruction_corpus(kb: &PromptKb, per_template: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for t in kb.templates() {
        let n = if t.task_name() == "cloze" { CLOZE_MULTIPLIER * per_template } else { per_template };
        for _ in 0..n {
            let pair = match t.task_name() {
                "cloze" => {
                    let lists = [POSITIVE, NEGATIVE, SPAM, HAM, FILLERS];
                    let key = match rng.gen_range(0..TOPICS.len() + lists.len()) {
                        i if i < TOPICS.len() => TOPICS[i].words,
                        i => lists[i - TOPICS.len()],
                    };
                    let text = mixed_sentence(&mut rng, key, 3, 4);
                    let mut words: Vec<&str> = text.split(' ').collect();
                    let i = rng.gen_range(0..words.len());
                    let target = words[i].to_string();
                    words[i] = "blank";
                    (render(t, &[("text", words.join(" "))]), target)
                }
                "topic" => {
                    let topic = TOPICS.choose(&mut rng).expect("topics");
                    let text = mixed_sentence(&mut rng, topic.words, 3, 5);
                    (render(t, &[("text", text)]), topic.name.to_string())
                }
                "sentiment" | "spam" => {
                    let (neg, pos) = if t.task_name() == "sentiment" { (NEGATIVE, POSITIVE) } else { (HAM, SPAM) };
                    let label = rng.gen_range(0..2usize);
                    let text = mixed_sentence(&mut rng, if label == 1 { pos } else { neg }, 2, 5);
                    let choices = t.answer_choices().expect("labeled template");
                    (render(t, &[("text", text)]), choices[label].clone())
                }
                _ => {
                    let topic = rng.gen_range(0..TOPICS.len());
                    let first = mixed_sentence(&mut rng, TOPICS[topic].words, 3, 3);
                    let related = rng.gen_bool(0.5);
                    let second = if related {
                        mixed_sentence(&mut rng, TOPICS[topic].words, 2, 2)
                    } else {
                        let other = (topic + rng.gen_range(1..TOPICS.len())) % TOPICS.len();
                        mixed_sentence(&mut rng, TOPICS[other].words, 2, 2)
                    };
                    let choices = t.answer_choices().expect("labeled template");
                    // choices list the "unrelated" answer first for paraphrase, second for entailment
                    let idx = match (t.task_name(), related) {
                        ("paraphrase", true) | ("entailment", false) => 1,
                        _ => 0,
                    };
                    (render(t, &[("a", first), ("b", second)]), choices[idx].clone())
                }
            };
            out.push(pair);
        }
    }
    out
}

/// Vocabulary over the corpus, every synthetic word list and topic names.
pub fn vocabulary(corpus: &[(String, String)]) -> Vocabulary {
    let mut lines: Vec<String> = corpus.iter().flat_map(|(p, t)| [p.clone(), t.clone()]).collect();
    for topic in TOPICS {
        lines.push(topic.name.to_string());
        lines.push(topic.words.join(" "));
    }
    for list in [FILLERS, POSITIVE, NEGATIVE, SPAM, HAM] {
        lines.push(list.join(" "));
    }
    Vocabulary::build(lines.iter().map(String::as_str))
}

/// Everything that determines a pretrained synthetic upstream model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub per_template: usize,
    pub corpus_seed: u64,
    pub model_seed: u64,
    pub model: ToyLmConfig,
    pub pretrain: PretrainConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            per_template: 300,
            corpus_seed: 1,
            model_seed: 0,
            model: ToyLmConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

/// Instruction-tune a fresh toy LM on the synthetic corpus. With a cache
/// directory, the result is stored under the config hash and reused.
pub fn pretrained_model(cfg: &WorldConfig, cache_dir: Option<&Path>) -> Result<ToyLm<f32>> {
    let cached = match cache_dir {
        Some(dir) => Some(dir.join(format!("toylm-{}.ckpt", &config_hash(cfg)?[..16]))),
        None => None,
    };
    if let Some(path) = cached.as_ref().filter(|p| p.exists()) {
        return load_model(path);
    }
    let corpus = instruction_corpus(&knowledge_base(), cfg.per_template, cfg.corpus_seed);
    let mut model = ToyLm::new(cfg.model.clone(), vocabulary(&corpus), cfg.model_seed)?;
    let losses = pretrain(&mut model, &corpus, &cfg.pretrain)?;
    log::info!("pretraining finished at loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
    if let Some(path) = cached {
        std::fs::create_dir_all(path.parent().expect("cache file has a parent"))?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        save_model(&model, &tmp)?;
        std::fs::rename(&tmp, &path)?;
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopicTaskConfig {
    /// Indices into [`TOPICS`], one per class.
    pub topics: Vec<usize>,
    pub field: String,
    pub label_texts: Option<Vec<String>>,
    pub k_per_class: usize,
    pub n_test: usize,
    pub topic_words_per_sample: usize,
    pub fillers_per_sample: usize,
    /// Words from topics outside the task mixed into every sample.
    pub distractors_per_sample: usize,
    pub seed: u64,
}

impl Default for TopicTaskConfig {
    fn default() -> Self {
        TopicTaskConfig {
            topics: vec![0, 2],
            field: "article".into(),
            label_texts: None,
            k_per_class: 32,
            n_test: 200,
            topic_words_per_sample: 1,
            fillers_per_sample: 5,
            distractors_per_sample: 2,
            seed: 0,
        }
    }
}

/// Balanced few-shot training set and test set for a topic task.
pub fn topic_task(cfg: &TopicTaskConfig) -> Result<(FewShotDataset, FewShotDataset)> {
    let schema = TaskSchema::new(vec![cfg.field.clone()], cfg.topics.len(), cfg.label_texts.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let others: Vec<&str> = (0..TOPICS.len())
        .filter(|t| !cfg.topics.contains(t))
        .flat_map(|t| TOPICS[t].words.iter().copied())
        .collect();
    if cfg.distractors_per_sample > 0 && others.is_empty() {
        return Err(crate::error::Error::Validation("distractors need a topic outside the task".into()));
    }
    let make = |prefix: &str, label: usize, i: usize, rng: &mut ChaCha8Rng| {
        let mut text =
            mixed_sentence(rng, TOPICS[cfg.topics[label]].words, cfg.topic_words_per_sample, cfg.fillers_per_sample);
        if cfg.distractors_per_sample > 0 {
            let mut words: Vec<&str> = text.split(' ').collect();
            words.extend((0..cfg.distractors_per_sample).map(|_| *others.choose(rng).expect("non-empty")));
            words.shuffle(rng);
            text = words.join(" ");
        }
        Sample::new(format!("{prefix}{i}"), [(cfg.field.clone(), text)], Some(label))
    };
    let mut train = Vec::new();
    for label in 0..cfg.topics.len() {
        for i in 0..cfg.k_per_class {
            train.push(make("train", label, label * cfg.k_per_class + i, &mut rng));
        }
    }
    let test = (0..cfg.n_test).map(|i| make("test", i % cfg.topics.len(), i, &mut rng)).collect();
    Ok((FewShotDataset::new(schema.clone(), train)?, FewShotDataset::new(schema, test)?))
}
