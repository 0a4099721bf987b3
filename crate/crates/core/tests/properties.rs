mod common;

use autfew::choices::{greedy_assign, LikelihoodTable};
use autfew::dataset::FewShotDataset;
use autfew::embedder::{Embedder, HashedBowEmbedder};
use autfew::inference::{average, combine, TemplateWeights};
use autfew::lm::{score_continuation, BigramBackend};
use autfew::peft_trainer::{train_on, TrainConfig};
use autfew::prompt_kb::{count_arguments, PromptKb, Sample, TaskSchema, Template};
use autfew::retrieval::{build_query, retrieve, RetrievalConfig};
use autfew::select::{min_max, stratified_folds};
use proptest::prelude::*;
use proptest::sample::subsequence;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{random_text, tiny_model, WORDS};

const NAMES: &[&str] = &["text", "premise", "hypothesis", "question", "a_b", "x1", "review", "context"];

fn word() -> impl Strategy<Value = String> {
    proptest::sample::select(WORDS).prop_map(str::to_string)
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 0..6).prop_map(|w| w.join(" "))
}

/// Template body over distinct placeholder names, with repeats allowed.
fn body() -> impl Strategy<Value = (String, Vec<String>)> {
    subsequence(NAMES, 1..=3)
        .prop_shuffle()
        .prop_flat_map(|names| {
            let n = names.len();
            (
                Just(names),
                prop::collection::vec((text(), 0..n), 1..6),
                text(),
            )
        })
        .prop_map(|(names, parts, tail)| {
            let mut body = String::new();
            // First appearances in `names` order, then arbitrary repeats.
            for (i, n) in names.iter().enumerate() {
                body.push_str(&format!("w{i} {{{{{n}}}}} "));
            }
            for (t, slot) in parts {
                body.push_str(&format!("{t} {{{{{}}}}} ", names[slot]));
            }
            body.push_str(&tail);
            (body, names.iter().map(|s| s.to_string()).collect())
        })
}

fn choices() -> impl Strategy<Value = Option<Vec<String>>> {
    prop::option::of(subsequence(WORDS, 2..4).prop_map(|v| v.into_iter().map(str::to_string).collect()))
}

fn schema_of(arity: usize) -> TaskSchema {
    let fields = ["sentence1", "sentence2", "extra"][..arity].iter().map(|s| s.to_string()).collect();
    TaskSchema::new(fields, 2, None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kb_round_trip(entries in prop::collection::vec((body(), choices()), 1..6)) {
        let templates: Vec<Template> = entries
            .iter()
            .enumerate()
            .map(|(i, ((b, _), c))| Template::new(format!("t{i}"), "task", b.clone(), c.clone()).unwrap())
            .collect();
        let kb = PromptKb::from_templates(templates).unwrap();
        let mut buf = Vec::new();
        kb.write_to(&mut buf).unwrap();
        let back = PromptKb::from_reader(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), kb.len());
        for (a, b) in kb.templates().iter().zip(back.templates()) {
            prop_assert_eq!(a.id(), b.id());
            prop_assert_eq!(a.body(), b.body());
            prop_assert_eq!(a.answer_choices(), b.answer_choices());
            prop_assert_eq!(a.arity(), b.arity());
        }
    }

    #[test]
    fn adapt_preserves_arity_and_render_fills_every_slot((b, names) in body(), values in prop::collection::vec(text(), 3)) {
        let t = Template::new("t", "task", b, None).unwrap();
        prop_assert_eq!(t.arity(), names.len());
        let schema = schema_of(names.len());
        let adapted = t.adapt(&schema).unwrap();
        prop_assert_eq!(count_arguments(adapted.body()).unwrap(), count_arguments(t.body()).unwrap());
        let sample = Sample::new("s", schema.field_names().iter().cloned().zip(values), None);
        let out = adapted.render(&sample).unwrap();
        prop_assert!(!out.contains("{{"));
    }

    #[test]
    fn embeddings_are_unit_norm_bags(words in prop::collection::vec(word(), 0..12), seed in any::<u64>()) {
        let e = HashedBowEmbedder::default();
        let v = e.embed_text(&words.join(" "));
        if words.is_empty() {
            prop_assert!(v.is_zero());
        } else {
            prop_assert!((v.norm() - 1.0).abs() <= 1e-6);
        }
        let mut shuffled = words.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let w = e.embed_text(&shuffled.join(" "));
        for (a, b) in v.values().iter().zip(w.values()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn retrieval_is_bounded_deterministic_and_renderable(
        bodies in prop::collection::vec(body(), 1..10),
        r in 1usize..6,
        texts in prop::collection::vec(text(), 2..5),
    ) {
        let kb = PromptKb::from_templates(
            bodies.iter().enumerate().map(|(i, (b, _))| Template::new(format!("k{i}"), "task", b.clone(), None).unwrap()).collect(),
        ).unwrap();
        let arity = bodies[0].1.len();
        let schema = schema_of(arity);
        let samples: Vec<Sample> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Sample::new(i.to_string(), schema.field_names().iter().map(|f| (f.clone(), t.clone())), Some(i % 2)))
            .collect();
        let train = FewShotDataset::new(schema.clone(), samples).unwrap();
        let e = HashedBowEmbedder::default();
        let cfg = RetrievalConfig::with_r(r).unwrap();
        let q = build_query(&schema, &train, &e, &cfg).unwrap();
        let got = retrieve(&kb, &schema, &q, &e, &cfg).unwrap();
        let matching = kb.templates().iter().filter(|t| t.arity() == arity).count();
        prop_assert!(got.len() <= r && got.len() <= matching && !got.is_empty());
        prop_assert!(got.similarities.windows(2).all(|w| w[0] >= w[1]));
        let again = retrieve(&kb, &schema, &q, &e, &cfg).unwrap();
        prop_assert_eq!(&got.templates, &again.templates);
        for t in &got.templates {
            prop_assert_eq!(t.arity(), arity);
            for s in train.samples() {
                prop_assert!(t.render(s).is_ok());
            }
        }
    }

    #[test]
    fn bigram_prefix_consistency(prompt in text(), c1 in text(), c2 in text()) {
        prop_assume!(!c1.is_empty() && !c2.is_empty());
        let b = BigramBackend::from_corpus(["alpha bravo charlie alpha", "red green blue red river"]);
        let whole = score_continuation(&b, &prompt, &format!("{c1} {c2}")).unwrap();
        let head = score_continuation(&b, &prompt, &c1).unwrap();
        for (a, b) in whole.0[..head.len()].iter().zip(&head.0) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
        prop_assert!(whole.0.iter().all(|&x| x <= 0.0));
    }

    #[test]
    fn deviations_cancel_and_assignments_are_distinct(
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..0.0, 12), 2..5),
        top_m in 1usize..13,
    ) {
        let k = rows.len();
        let table = LikelihoodTable {
            tokens: (0..12).map(|i| 300 + i).collect(),
            texts: (0..12).map(|i| format!("w{i}")).collect(),
            l: rows,
        };
        for j in 0..12 {
            let s: f64 = (0..k).map(|c| table.deviation(c, j)).sum();
            prop_assert!(s.abs() <= 1e-9);
        }
        if let Ok(assignment) = greedy_assign(&table, top_m) {
            let mut cols: Vec<usize> = assignment.iter().map(|&(j, _)| j).collect();
            cols.sort_unstable();
            cols.dedup();
            prop_assert_eq!(cols.len(), k);
            prop_assert_eq!(&assignment, &greedy_assign(&table, top_m).unwrap());
        } else {
            prop_assert!(top_m < k);
        }
    }

    #[test]
    fn min_max_is_shift_and_scale_invariant(xs in prop::collection::vec(-1e3f64..1e3, 1..8), shift in -1e3f64..1e3, scale in 0.01f64..100.0) {
        let base = min_max(&xs);
        let moved: Vec<f64> = xs.iter().map(|x| x * scale + shift).collect();
        for (a, b) in base.iter().zip(min_max(&moved)) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
        prop_assert!(base.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn folds_partition_the_training_set(counts in prop::collection::vec(3usize..9, 2..4), folds in 2usize..4, seed in any::<u64>()) {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let out = stratified_folds(&labels, counts.len(), folds, seed).unwrap();
        let mut seen = vec![0; labels.len()];
        for f in &out {
            for &i in f {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
        for (c, &n) in counts.iter().enumerate() {
            for f in &out {
                let m = f.iter().filter(|&&i| labels[i] == c).count();
                prop_assert!(m == n / folds || m == n / folds + 1);
            }
        }
    }

    #[test]
    fn weighted_average_is_a_distribution_and_order_free(
        scores in prop::collection::vec(prop::collection::vec(-20.0f64..0.0, 3), 1..6),
        raw in prop::collection::vec(0.01f64..1.0, 6),
        seed in any::<u64>(),
    ) {
        let r = scores.len();
        let total: f64 = raw[..r].iter().sum();
        let w: Vec<f64> = raw[..r].iter().map(|x| x / total).collect();
        let weights = TemplateWeights::new(w.clone()).unwrap();
        let p = combine(&scores, &weights).unwrap();
        prop_assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.probabilities.iter().all(|&x| x >= 0.0));

        let mut order: Vec<usize> = (0..r).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<Vec<f64>> = order.iter().map(|&i| scores[i].clone()).collect();
        let pw = TemplateWeights::new(order.iter().map(|&i| w[i]).collect()).unwrap();
        let q = combine(&permuted, &pw).unwrap();
        for (a, b) in p.probabilities.iter().zip(&q.probabilities) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert_eq!(p.argmax, q.argmax);

        let copies = vec![scores[0].clone(); r];
        let same = combine(&copies, &TemplateWeights::uniform(r)).unwrap();
        let single = combine(&scores[..1], &TemplateWeights::uniform(1)).unwrap();
        for (a, b) in same.probabilities.iter().zip(&single.probabilities) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert_eq!(same.argmax, single.argmax);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn toy_distributions_are_proper_and_prefix_consistent(seed in any::<u64>(), prompt in text(), c1 in text(), c2 in text()) {
        prop_assume!(!c1.is_empty() && !c2.is_empty());
        let model = tiny_model::<f64>(seed % 4);
        let lps = model.first_token_logprobs(None, &model.vocab().encode(&prompt)).unwrap();
        let total: f64 = lps.iter().map(|x| x.exp()).sum();
        prop_assert!((total - 1.0).abs() <= 1e-6);
        let whole = score_continuation(&model, &prompt, &format!("{c1} {c2}"));
        prop_assume!(whole.is_ok());
        let whole = whole.unwrap();
        let head = score_continuation(&model, &prompt, &c1).unwrap();
        for (a, b) in whole.0[..head.len()].iter().zip(&head.0) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
    }
}

#[test]
fn averaging_rejects_mismatched_shapes() {
    assert!(average(&[vec![0.5, 0.5]], &TemplateWeights::uniform(2)).is_err());
    assert!(TemplateWeights::new(vec![0.7, 0.7]).is_err());
}

#[test]
fn training_is_deterministic_given_a_seed() {
    let model = tiny_model::<f32>(1);
    let schema = TaskSchema::new(vec!["text".into()], 2, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples = (0..8).map(|i| Sample::new(i.to_string(), [("text", random_text(&mut rng, 2, 6))], Some(i % 2))).collect();
    let train = FewShotDataset::new(schema, samples).unwrap();
    let templates = vec![Template::new("t", "task", "{{text}} is", None).unwrap()];
    let choices = vec!["red".to_string(), "blue".to_string()];
    let cfg = TrainConfig {
        steps: 20,
        seed: 9,
        ..Default::default()
    };
    let (p1, r1) = train_on(&model, &train, &templates, &choices, &cfg).unwrap();
    let (p2, r2) = train_on(&model, &train, &templates, &choices, &cfg).unwrap();
    assert_eq!(r1.losses, r2.losses);
    assert_eq!(p1, p2);
    let other = TrainConfig { seed: 10, ..cfg };
    let (_, r3) = train_on(&model, &train, &templates, &choices, &other).unwrap();
    assert_ne!(r1.losses, r3.losses);
}

#[test]
fn k_shot_sampling_is_stratified() {
    let schema = TaskSchema::new(vec!["text".into()], 3, None).unwrap();
    let samples = (0..30).map(|i| Sample::new(i.to_string(), [("text", "x")], Some(i % 3))).collect();
    let data = FewShotDataset::new(schema, samples).unwrap();
    let (picked, rest) = data.sample_k_per_class(4, 2).unwrap();
    assert_eq!(picked.len(), 12);
    assert_eq!(rest.len(), 18);
    for c in 0..3 {
        assert_eq!(picked.class_samples(c).count(), 4);
    }
    assert_eq!(picked.samples(), data.sample_k_per_class(4, 2).unwrap().0.samples());
    assert!(data.sample_k_per_class(11, 0).is_err());
}
