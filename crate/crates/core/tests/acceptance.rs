//! Acceptance suite. Prints one PASS/FAIL line per criterion. Failures are
//! reported but only fail the process when `AUTFEW_ACCEPTANCE_STRICT` is set.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::Instant;

use autfew::choices::{
    gen_template_tailored, gen_topic_specific, likelihood_table, random_choices, stopwords, CandidateKind,
    ChoiceCandidate,
};
use autfew::dataset::FewShotDataset;
use autfew::embedder::{Embedder, HashedBowEmbedder};
use autfew::inference::{average, softmax, ScoreTable, TemplateWeights};
use autfew::lm::{length_normalized_score, rank_classes, score_continuation, BigramBackend, ScoringBackend, ToyLm};
use autfew::peft_trainer::{grad_check, lr_at, mle_loss, Adapter, PeftParams, TrainConfig, TrainItem, DEFAULT_EPS};
use autfew::pipeline::{execute, ChoiceMode, PipelineInputs, PipelineOptions};
use autfew::prompt_kb::{count_arguments, PromptKb, Sample, TaskSchema, Template};
use autfew::retrieval::{build_query, retrieve, RetrievalConfig};
use autfew::select::{select_config, SelectConfig};
use autfew::synth::{self, TopicTaskConfig, TOPICS};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use common::{random_text, tiny_model, WORDS};

/// Outcome of one criterion: pass flag plus a one-line measurement.
struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn random_ids(rng: &mut ChaCha8Rng, model: &ToyLm<impl autfew::lm::Scalar>, min: usize, max: usize) -> Vec<usize> {
    let words: Vec<usize> = model.vocab().word_ids().collect();
    (0..rng.gen_range(min..=max)).map(|_| *words.choose(rng).unwrap()).collect()
}

fn perturbed(model: &ToyLm<f64>, seed: u64, scale: f64) -> PeftParams<f64> {
    let init = PeftParams::init(model, 4, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let n = Normal::new(0.0, scale).unwrap();
    let adapters = init
        .adapters
        .iter()
        .map(|ad| {
            let lambda = Array1::from_shape_fn(ad.d_out(), |_| 1.0 + n.sample(&mut rng));
            let a = Array2::from_shape_fn((ad.rank(), ad.d_in()), |_| n.sample(&mut rng));
            let b = Array2::from_shape_fn((ad.d_out(), ad.rank()), |_| n.sample(&mut rng));
            Adapter::new(lambda, a, b).unwrap()
        })
        .collect();
    PeftParams::from_adapters(model, adapters).unwrap()
}

fn c1_peft_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m32 = tiny_model::<f32>(3);
    let p32 = PeftParams::init(&m32, 4, 5).unwrap();
    let m64 = tiny_model::<f64>(3);
    let p64 = PeftParams::init(&m64, 4, 5).unwrap();
    let mut identical = true;
    for _ in 0..100 {
        let prompt = random_ids(&mut rng, &m64, 1, 12);
        let conts = vec![random_ids(&mut rng, &m64, 1, 3), random_ids(&mut rng, &m64, 1, 3)];
        identical &= m32.score_ids(Some(&p32), &prompt, &conts).unwrap() == m32.score_ids(None, &prompt, &conts).unwrap();
        identical &= m64.score_ids(Some(&p64), &prompt, &conts).unwrap() == m64.score_ids(None, &prompt, &conts).unwrap();
    }
    let peft = perturbed(&m64, 21, 0.2);
    let merged = m64.merged(&peft).unwrap();
    let mut worst: f64 = 0.0;
    let mut moved = false;
    for _ in 0..100 {
        let prompt = random_ids(&mut rng, &m64, 1, 12);
        let conts = vec![random_ids(&mut rng, &m64, 1, 4), random_ids(&mut rng, &m64, 1, 4)];
        let adapted = m64.score_ids(Some(&peft), &prompt, &conts).unwrap();
        let folded = merged.score_ids(None, &prompt, &conts).unwrap();
        let frozen = m64.score_ids(None, &prompt, &conts).unwrap();
        moved |= adapted != frozen;
        for (a, b) in adapted.iter().flatten().zip(folded.iter().flatten()) {
            worst = worst.max(rel(*a, *b));
        }
    }
    verdict(
        identical && moved && worst <= 1e-6,
        format!("init outputs bitwise equal: {identical}; merged vs adapted max rel diff {worst:.2e} (≤ 1e-6)"),
    )
}

fn c2_gradients() -> Verdict {
    let model = tiny_model::<f64>(4);
    let peft = perturbed(&model, 8, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch: Vec<TrainItem> = (0..4)
        .map(|i| TrainItem {
            prompt: random_ids(&mut rng, &model, 3, 10),
            choices: vec![random_ids(&mut rng, &model, 1, 2), random_ids(&mut rng, &model, 1, 3)],
            gold: i % 2,
        })
        .collect();
    let report = grad_check(&model, &peft, &batch, 1.0, DEFAULT_EPS, 60, 17).unwrap();
    verdict(
        report.max_rel_error <= 1e-3 && report.coords.len() >= 50,
        format!("max rel error {:.2e} over {} coordinates (≤ 1e-3, ≥ 50)", report.max_rel_error, report.coords.len()),
    )
}

fn c3_scoring_oracle() -> Verdict {
    let b = BigramBackend::from_corpus(["the cat sat on the mat", "the dog sat on the log"]);
    // 3 specials + 256 bytes + {cat, dog, log, mat, on, sat, the}
    let v = 266.0_f64;
    let size_ok = b.vocabulary().unwrap().len() as f64 == v;
    // c(the,·)=4 c(on,·)=2 c(sat,·)=2 c(cat,·)=c(dog,·)=1
    let table: [(&str, &str, Vec<f64>); 6] = [
        ("the", "cat sat", vec![2.0 / (4.0 + v), 2.0 / (1.0 + v)]),
        ("on", "the mat", vec![3.0 / (2.0 + v), 2.0 / (4.0 + v)]),
        ("", "the", vec![1.0 / v]),
        ("a mat", "on", vec![1.0 / v]),
        ("sat on", "the dog sat", vec![3.0 / (2.0 + v), 2.0 / (4.0 + v), 2.0 / (1.0 + v)]),
        ("dog", "sat on the log", vec![2.0 / (1.0 + v), 3.0 / (2.0 + v), 3.0 / (2.0 + v), 2.0 / (4.0 + v)]),
    ];
    let mut exact = size_ok;
    for (prompt, cont, probs) in &table {
        let lps: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let expected = lps.iter().sum::<f64>() / lps.len() as f64;
        exact &= length_normalized_score(&b, prompt, cont).unwrap() == expected;
    }

    let corpus: Vec<String> = {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..30).map(|_| random_text(&mut rng, 3, 9)).collect()
    };
    let bigram = BigramBackend::from_corpus(corpus.iter().map(String::as_str));
    let toy = tiny_model::<f32>(9);
    let backends: [&dyn ScoringBackend; 2] = [&bigram, &toy];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut consistent = 0;
    for i in 0..200 {
        let prompt = random_text(&mut rng, 0, 10);
        let c1 = random_text(&mut rng, 1, 3);
        let c2 = if i % 10 == 0 { "unseenword".to_string() } else { random_text(&mut rng, 1, 3) };
        let backend = backends[i % 2];
        let whole = score_continuation(backend, &prompt, &format!("{c1} {c2}")).unwrap();
        let head = score_continuation(backend, &prompt, &c1).unwrap();
        consistent += usize::from(whole.0[..head.len()] == head.0[..]);
    }
    verdict(
        exact && consistent == 200,
        format!("closed-form table exact: {exact}; prefix-consistent pairs {consistent}/200"),
    )
}

fn toy_kb() -> PromptKb {
    let rows: [(&str, &str); 10] = [
        ("a_nli", "Does {{premise}} imply {{hypothesis}}?"),
        ("b_nli", "{{premise}} Question: is {{hypothesis}} true?"),
        ("c_para", "Is {{sentence1}} a paraphrase of {{sentence2}}?"),
        ("d_topic", "What topic is this article about? {{article}}"),
        ("e_sent", "{{review}} Did the reviewer like the product?"),
        ("f_topic", "{{text}} What is the subject of this article?"),
        ("g_dup", "Does {{premise}} imply {{hypothesis}}?"),
        ("h_spam", "Is this message spam? {{message}}"),
        ("i_same", "Do {{a}} and {{b}} mean the same thing?"),
        ("j_tri", "{{premise}} {{hypothesis}} {{context}} Answer:"),
    ];
    PromptKb::from_templates(rows.iter().map(|(id, body)| Template::new(*id, "toy", *body, None).unwrap()).collect())
        .unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn brute_force_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

fn c4_retrieval() -> Verdict {
    let kb = toy_kb();
    let e = HashedBowEmbedder::default();
    let cases = [
        (vec!["premise", "hypothesis"], vec![("premise", "a man sleeps"), ("hypothesis", "someone rests")]),
        (vec!["text"], vec![("text", "the striker scored a late goal in the match")]),
    ];
    let mut matches = 0;
    let mut total = 0;
    let mut leaks = 0;
    let mut deterministic = true;
    for (fields, values) in &cases {
        let schema = TaskSchema::new(fields.iter().map(|s| s.to_string()).collect(), 2, None).unwrap();
        let train = FewShotDataset::new(
            schema.clone(),
            vec![Sample::new("0", values.clone(), Some(0)), Sample::new("1", values.clone(), Some(1))],
        )
        .unwrap();
        let query = build_query(&schema, &train, &e, &RetrievalConfig::default()).unwrap();
        let mut oracle: Vec<(f64, String)> = kb
            .templates()
            .iter()
            .filter(|t| count_arguments(t.body()).unwrap() == fields.len())
            .map(|t| (brute_force_cosine(query.values(), e.embed_text(t.body()).values()), t.id().to_string()))
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let excluded: BTreeSet<&str> = kb
            .templates()
            .iter()
            .filter(|t| count_arguments(t.body()).unwrap() != fields.len())
            .map(|t| t.id())
            .collect();
        for r in 1..=5 {
            let cfg = RetrievalConfig::with_r(r).unwrap();
            let got = retrieve(&kb, &schema, &query, &e, &cfg).unwrap();
            let again = retrieve(&kb, &schema, &query, &e, &cfg).unwrap();
            deterministic &= got.templates == again.templates && got.similarities == again.similarities;
            let ids: Vec<&str> = got.templates.iter().map(|t| t.id().trim_end_matches("@adapted")).collect();
            let want: Vec<&str> = oracle.iter().take(r).map(|(_, id)| id.as_str()).collect();
            total += 1;
            matches += usize::from(ids == want);
            leaks += ids.iter().filter(|id| excluded.contains(*id)).count();
        }
    }
    verdict(
        matches == total && leaks == 0 && deterministic,
        format!("{matches}/{total} rankings match brute force; {leaks} arity-mismatched templates returned; deterministic: {deterministic}"),
    )
}

/// Brute-force enumeration of every injective class → token assignment,
/// keeping the one whose descending-sorted deviation vector is
/// lexicographically largest (ties by the token ids in class order).
fn brute_force_tailored(dev: &[Vec<f64>], ids: &[usize]) -> Vec<usize> {
    fn rec(dev: &[Vec<f64>], ids: &[usize], c: usize, cur: &mut Vec<usize>, best: &mut Option<(Vec<f64>, Vec<usize>)>) {
        if c == dev.len() {
            let mut s: Vec<f64> = cur.iter().enumerate().map(|(c, &j)| dev[c][j]).collect();
            s.sort_by(|a, b| b.total_cmp(a));
            let key: Vec<usize> = cur.iter().map(|&j| ids[j]).collect();
            let better = match best {
                None => true,
                Some((bs, bk)) => match s.partial_cmp(bs).unwrap() {
                    std::cmp::Ordering::Greater => true,
                    std::cmp::Ordering::Equal => key < *bk,
                    std::cmp::Ordering::Less => false,
                },
            };
            if better {
                *best = Some((s, key));
            }
            return;
        }
        for j in 0..ids.len() {
            if !cur.contains(&j) {
                cur.push(j);
                rec(dev, ids, c + 1, cur, best);
                cur.pop();
            }
        }
    }
    let mut best = None;
    rec(dev, ids, 0, &mut Vec::new(), &mut best);
    best.unwrap().1
}

fn c5_tailored() -> Verdict {
    let model = tiny_model::<f64>(12);
    let vocab = model.vocab().clone();
    let schema = TaskSchema::new(vec!["text".into()], 3, None).unwrap();
    let templates = vec![
        Template::new("t0", "toy", "{{text}} so the answer is", None).unwrap(),
        Template::new("t1", "toy", "classify {{text}} as", None).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let samples: Vec<Sample> = (0..9)
        .map(|i| Sample::new(i.to_string(), [("text", random_text(&mut rng, 2, 6))], Some(i % 3)))
        .collect();
    let train = FewShotDataset::new(schema, samples).unwrap();

    // L_c(v) through per-word continuation scoring instead of one
    // next-token distribution per prompt.
    let stop = stopwords();
    let ids: Vec<usize> = vocab
        .word_ids()
        .filter(|&id| {
            let w = vocab.token(id).unwrap();
            w.chars().any(char::is_alphanumeric) && !stop.contains(w)
        })
        .collect();
    let words: Vec<&str> = ids.iter().map(|&id| vocab.token(id).unwrap()).collect();
    let mut l = vec![vec![0.0; ids.len()]; 3];
    for s in train.samples() {
        for t in &templates {
            let scores = model.score_batch(&t.render(s).unwrap(), &words).unwrap();
            for (j, sc) in scores.iter().enumerate() {
                l[s.label.unwrap()][j] += sc.0[0];
            }
        }
    }
    let dev: Vec<Vec<f64>> = (0..3)
        .map(|c| (0..ids.len()).map(|j| l[c][j] - (l[0][j] + l[1][j] + l[2][j]) / 3.0).collect())
        .collect();
    let oracle: Vec<String> = brute_force_tailored(&dev, &ids).iter().map(|&id| vocab.token(id).unwrap().to_string()).collect();

    let got = gen_template_tailored(&model, &train, &templates, vocab.len()).unwrap();
    let table = likelihood_table(&model, &train, &templates).unwrap();
    let worst_sum = (0..table.tokens.len())
        .map(|j| (0..3).map(|c| table.deviation(c, j)).sum::<f64>().abs())
        .fold(0.0, f64::max);
    let worst_l = (0..3)
        .flat_map(|c| (0..ids.len()).map(move |j| (c, j)))
        .map(|(c, j)| (table.l[c][j] - l[c][j]).abs())
        .fold(0.0, f64::max);
    verdict(
        got.mapping == oracle && worst_sum <= 1e-9 && table.tokens == ids,
        format!(
            "greedy {:?} vs brute force {:?} over |V|={} ({} eligible); max |Σ_c s(c,v)| {worst_sum:.1e}; L table max diff {worst_l:.1e}",
            got.mapping,
            oracle,
            vocab.len(),
            ids.len()
        ),
    )
}

fn brute_force_topic(e: &HashedBowEmbedder, train: &FewShotDataset) -> Vec<(String, BTreeMap<String, f64>)> {
    let stop = stopwords();
    let schema = train.schema();
    let k = train.num_classes();
    let mut vocab: BTreeSet<String> = BTreeSet::new();
    let tokens = |s: &Sample| -> Vec<String> {
        s.joined_text(schema)
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|w| !w.is_empty() && !stop.contains(w))
            .collect()
    };
    for s in train.samples() {
        vocab.extend(tokens(s));
    }
    let mut per_class: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); k];
    for w in &vocab {
        let ew = e.embed_text(w);
        for s in train.samples() {
            if !tokens(s).contains(w) {
                continue;
            }
            let ex = e.embed_text(&s.joined_text(schema));
            let mix: Vec<f64> = ew.values().iter().zip(ex.values()).map(|(a, b)| 0.7 * a + 0.3 * b).collect();
            let score = brute_force_cosine(&mix, ex.values());
            *per_class[s.label.unwrap()].entry(w.clone()).or_insert(0.0) += score;
        }
    }
    (0..k)
        .map(|c| {
            let exclusive: BTreeMap<String, f64> = per_class[c]
                .iter()
                .filter(|(w, _)| (0..k).all(|o| o == c || !per_class[o].contains_key(*w)))
                .map(|(w, s)| (w.clone(), *s))
                .collect();
            let best = exclusive
                .iter()
                .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(w, _)| w.clone())
                .unwrap_or_default();
            (best, exclusive)
        })
        .collect()
}

fn c6_topic() -> Verdict {
    let e = HashedBowEmbedder::default();
    let schema = TaskSchema::new(vec!["text".into()], 2, None).unwrap();
    let mut agree = 0;
    let mut cross = 0;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let shared: Vec<&str> = WORDS[..8].to_vec();
        let own = [&WORDS[8..20], &WORDS[20..32]];
        let samples: Vec<Sample> = (0..10)
            .map(|i| {
                let c = i % 2;
                let mut words: Vec<&str> = (0..rng.gen_range(2..5)).map(|_| *own[c].choose(&mut rng).unwrap()).collect();
                words.extend((0..rng.gen_range(1..4)).map(|_| *shared.choose(&mut rng).unwrap()));
                words.push(["the", "and", "of"][rng.gen_range(0..3)]);
                words.shuffle(&mut rng);
                Sample::new(i.to_string(), [("text", words.join(" "))], Some(c))
            })
            .collect();
        let train = FewShotDataset::new(schema.clone(), samples).unwrap();
        let got = gen_topic_specific(&e, &train, stopwords()).unwrap();
        let oracle = brute_force_topic(&e, &train);
        let same = got.mapping.iter().zip(&oracle).all(|(g, (o, scores))| {
            // Words whose oracle scores tie within rounding are interchangeable.
            g == o || (scores.contains_key(g) && (scores[g] - scores[o]).abs() <= 1e-9)
        });
        agree += usize::from(same);
        for (c, w) in got.mapping.iter().enumerate() {
            let elsewhere = train
                .samples()
                .iter()
                .filter(|s| s.label != Some(c))
                .any(|s| s.joined_text(&schema).split_whitespace().any(|x| x == w));
            cross += usize::from(elsewhere);
        }
    }
    verdict(
        agree == 50 && cross == 0,
        format!("{agree}/50 corpora match brute-force scoring; {cross} output words occur in another class"),
    )
}

fn c7_planted() -> Verdict {
    let model = common::pretrained();
    let kb = synth::knowledge_base();
    let e = HashedBowEmbedder::default();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let task = TopicTaskConfig {
            seed: 1000 + seed,
            ..Default::default()
        };
        let names: Vec<String> = task.topics.iter().map(|&t| TOPICS[t].name.to_string()).collect();
        let (train, test) = synth::topic_task(&task).unwrap();
        let query = build_query(train.schema(), &train, &e, &RetrievalConfig::default()).unwrap();
        let templates = retrieve(&kb, train.schema(), &query, &e, &RetrievalConfig::default()).unwrap().templates;
        let planted = ChoiceCandidate::new(CandidateKind::Manual, names.clone()).unwrap();
        let random = random_choices(&train, seed).unwrap();
        let cfg = SelectConfig {
            seed,
            train: TrainConfig {
                seed,
                ..Default::default()
            },
            ..Default::default()
        };
        let pool = test.without_labels();
        let (winner, scores) = select_config(&[random, planted], &train, &templates, model, pool.samples(), &cfg).unwrap();
        let won = winner.mapping == names;
        wins += usize::from(won);
        lines.push(format!(
            "seed {seed}: random {:?} F1 {:.3} mass {:.1} vs planted F1 {:.3} mass {:.1} -> {}",
            scores[0].mapping,
            scores[0].mean_f1,
            scores[0].pool_mass,
            scores[1].mean_f1,
            scores[1].pool_mass,
            if won { "planted" } else { "random" }
        ));
    }
    for l in &lines {
        eprintln!("    {l}");
    }
    verdict(wins >= 9, format!("planted candidate selected in {wins}/10 seeds (≥ 9)"))
}

fn c8_inference() -> Verdict {
    let model = tiny_model::<f64>(21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let samples: Vec<Sample> = (0..6).map(|i| Sample::new(i.to_string(), [("text", random_text(&mut rng, 2, 8))], None)).collect();
    let templates = vec![
        Template::new("t0", "toy", "{{text}} answer", None).unwrap(),
        Template::new("t1", "toy", "read {{text}} then decide", None).unwrap(),
        Template::new("t2", "toy", "{{text}}", None).unwrap(),
    ];
    let cand = ChoiceCandidate::new(CandidateKind::Manual, vec!["alpha".into(), "bravo zulu".into(), "red".into()]).unwrap();
    let table = ScoreTable::compute(&model, &samples, &templates, &cand).unwrap();
    let mut worst_w: f64 = 0.0;
    for t in [0.1, 1.0, 10.0, 1e4] {
        let w = table.weights(t).unwrap();
        worst_w = worst_w.max((w.w.iter().sum::<f64>() - 1.0).abs());
    }
    let single = ScoreTable::compute(&model, &samples, &templates[1..2], &cand).unwrap();
    let one = TemplateWeights::uniform(1);
    let mut exact = true;
    for (i, s) in samples.iter().enumerate() {
        let mc = single.predict(i, &one).unwrap();
        let ranking = rank_classes(&model, &templates[1].render(s).unwrap(), &cand).unwrap();
        exact &= mc.probabilities == softmax(&ranking.scores, 1.0) && mc.argmax == ranking.argmax;
    }
    let hand = average(&[vec![0.9, 0.1], vec![0.4, 0.6]], &TemplateWeights::new(vec![0.5, 0.5]).unwrap()).unwrap();
    let hand_ok = (hand.probabilities[0] - 0.65).abs() <= 1e-12 && (hand.probabilities[1] - 0.35).abs() <= 1e-12;
    verdict(
        worst_w <= 1e-9 && exact && hand_ok,
        format!(
            "max |Σw − 1| {worst_w:.1e}; R=1 equals single-template prediction: {exact}; hand case {:?}",
            hand.probabilities
        ),
    )
}

fn pipeline_accuracy(choice_mode: ChoiceMode, seed: u64) -> (f64, Vec<String>) {
    let model = common::pretrained();
    let kb = synth::knowledge_base();
    let task = TopicTaskConfig {
        seed: 2000 + seed,
        ..Default::default()
    };
    let (train, test) = synth::topic_task(&task).unwrap();
    let pool = test.without_labels();
    let inputs = PipelineInputs {
        kb: &kb,
        train: &train,
        pool: Some(&pool),
        test: Some(&test),
        handcrafted: None,
        model,
    };
    let opts = PipelineOptions {
        seed,
        choice_mode,
        ..Default::default()
    };
    let out = execute(&inputs, &opts, None, "").unwrap();
    (out.metrics.unwrap().accuracy, out.winner.mapping)
}

fn c9_end_to_end() -> Verdict {
    let seeds = [0u64, 1, 2];
    let mut base = Vec::new();
    let mut auto = Vec::new();
    for &s in &seeds {
        let (acc, mapping) = pipeline_accuracy(ChoiceMode::Random, s);
        eprintln!("    seed {s}: random choices {mapping:?} accuracy {acc:.3}");
        base.push(acc);
        let (acc, mapping) = pipeline_accuracy(ChoiceMode::Auto, s);
        eprintln!("    seed {s}: selected choices {mapping:?} accuracy {acc:.3}");
        auto.push(acc);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (b, a) = (mean(&base), mean(&auto));
    let margin = 100.0 * (a - b);
    verdict(
        margin >= 10.0,
        format!("baseline accuracy {:.1}%, pipeline {:.1}%, margin {margin:.1} points (≥ 10)", 100.0 * b, 100.0 * a),
    )
}

fn c10_schedule_loss() -> Verdict {
    let (steps, lr, ratio) = (600, 1e-3, 0.06);
    // warmup = round(0.06 · 600) = 36
    let checks = [
        (lr_at(0, steps, lr, ratio), 0.0),
        (lr_at(36, steps, lr, ratio), 1e-3),
        (lr_at(18, steps, lr, ratio), 0.5e-3),
        (lr_at(599, steps, lr, ratio), 1e-3 * 0.5 * (1.0 + (std::f64::consts::PI * 563.0 / 564.0).cos())),
        (lr_at(600, steps, lr, ratio), 0.0),
    ];
    let worst = checks.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let loss = mle_loss(&[0.5f64.ln(), 0.25f64.ln()]);
    verdict(
        worst <= 1e-12 && (loss - 1.0397).abs() <= 1e-4,
        format!("lr max abs error {worst:.1e} (≤ 1e-12); MLE example {loss:.6} (1.0397 ± 1e-4)"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("1 PEFT identity and merge equivalence", c1_peft_identity),
        ("2 gradient correctness", c2_gradients),
        ("3 scoring oracle", c3_scoring_oracle),
        ("4 retrieval correctness", c4_retrieval),
        ("5 template-tailored choices oracle", c5_tailored),
        ("6 topic-specific choices oracle", c6_topic),
        ("7 planted configuration selection", c7_planted),
        ("8 Monte-Carlo inference", c8_inference),
        ("9 end-to-end synthetic run", c9_end_to_end),
        ("10 schedule and loss arithmetic", c10_schedule_loss),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("{status} criterion {name}: {} [{:.1}s]", v.detail, start.elapsed().as_secs_f64());
        failed += usize::from(!v.pass);
    }
    if failed == 0 {
        return ExitCode::SUCCESS;
    }
    println!("{failed} criteria failed");
    if std::env::var_os("AUTFEW_ACCEPTANCE_STRICT").is_some() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
