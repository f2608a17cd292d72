use super::*;
use crate::bvd::{synthesize_augmented, SynthesisOptions, TemplateTeacher};
use crate::corpus::{split_eval_set, SplitTag};
use crate::eval::{parse_prediction, Side, Transcript};
use crate::minicorpus::{generate_mini_corpus, mini_type_list};
use crate::toymodel::{Vocab, EOS_ID};
use crate::tsft::training_vocab;

fn stub_pair(id: usize, type_index: usize) -> VulnPair {
    VulnPair {
        id: format!("p{id:05}"),
        pre_code: "a".into(),
        post_code: "b".into(),
        code_diff: String::new(),
        cve_id: None,
        cwe_id: None,
        cve_description: None,
        commit_message: None,
        type_index,
    }
}

fn stub_dataset(per_type: usize, types: usize) -> Dataset {
    Dataset::new((0..per_type * types).map(|i| stub_pair(i, i % types)).collect(), SplitTag::Train)
}

struct Fixture {
    train: Dataset,
    eval: Dataset,
    augmented: Vec<AugmentedExample>,
    types: TypeList,
    question: QuestionTemplate,
    policy: ToyPolicy,
}

fn fixture(n: usize) -> Fixture {
    let all = Dataset::new(generate_mini_corpus(n, 3), SplitTag::Train);
    let (train, eval) = split_eval_set(&all, 0.25, 4).unwrap();
    let opts = SynthesisOptions { retry: RetryPolicy::immediate(), ..Default::default() };
    let (augmented, _) = synthesize_augmented(&train, &TemplateTeacher, &opts).unwrap();
    let question = QuestionTemplate::default();
    let extra: Vec<&str> = TaskKind::ALL.iter().map(|t| t.instruction()).collect();
    let vocab = training_vocab(&augmented, &question, &extra, 512).unwrap();
    Fixture { train, eval, augmented, types: mini_type_list(), question, policy: ToyPolicy::random(vocab, 0.1, 8) }
}

fn small_config() -> CopoConfig {
    CopoConfig { learning_rate: 0.01, detection_max_new_tokens: 8, detection_threads: 2, seed: 21, ..Default::default() }
}

fn inputs(f: &Fixture) -> CopoInputs<'_> {
    CopoInputs {
        train: &f.train,
        augmented: &f.augmented,
        eval_set: &f.eval,
        type_list: &f.types,
        question: &f.question,
        backend: None,
    }
}

fn transcript(id: &str, side: Side, text: &str) -> Transcript {
    Transcript { pair_id: id.into(), side, raw_text: text.into(), verdict: parse_prediction(text) }
}

fn detection(id: &str, type_index: usize, pre: &str, post: &str) -> PairDetection {
    PairDetection {
        pair_id: id.into(),
        type_index,
        pre_tokens: 1,
        post_tokens: 1,
        pre: transcript(id, Side::Pre, pre),
        post: transcript(id, Side::Post, post),
    }
}

#[test]
fn always_yes_scores_half_and_empty_types_are_flagged() {
    let dets: Vec<_> = (0..6).map(|i| detection(&format!("d{i}"), i % 2, "YES", "YES")).collect();
    let acc = TypeAccuracy::from_detections(&dets, 3, 0);
    assert_eq!(acc.per_type, vec![0.5, 0.5, 1.0]);
    assert_eq!(acc.zero_support, vec![false, false, true]);
    assert_eq!(acc.support, vec![6, 6, 0]);
    let perfect = [detection("x", 0, "YES", "NO")];
    assert_eq!(TypeAccuracy::from_detections(&perfect, 1, 0).per_type, vec![1.0]);
}

#[test]
fn probabilities_are_complements() {
    let acc = TypeAccuracy { round: 0, per_type: vec![1.0, 0.0, 0.75], support: vec![2; 3], zero_support: vec![false; 3] };
    assert_eq!(selection_probabilities(&acc).per_type, vec![0.0, 1.0, 0.25]);
    let ones = TypeAccuracy { per_type: vec![1.0; 3], ..acc };
    assert_eq!(selection_probabilities(&ones).per_type, vec![0.0; 3]);
}

#[test]
fn sampling_follows_type_probabilities() {
    let train = stub_dataset(3000, 3);
    let probs = SelectionProbabilities::new(vec![0.0, 1.0, 0.25]);
    let picked = sample_instances(&train, &probs, &[], 5, 0);
    let mut counts = [0usize; 3];
    for id in &picked {
        counts[train.get(id).unwrap().type_index] += 1;
    }
    assert_eq!(counts[0], 0);
    assert_eq!(counts[1], 3000);
    assert!((counts[2] as f64 / 3000.0 - 0.25).abs() < 0.03, "{counts:?}");
    assert_eq!(picked, sample_instances(&train, &probs, &[], 5, 0));
}

#[test]
fn zero_probabilities_keep_previous_selection() {
    let train = stub_dataset(10, 2);
    let prev: Vec<String> = ["p00003", "p00008", "p00011"].map(String::from).to_vec();
    let none = SelectionProbabilities::new(vec![0.0, 0.0]);
    assert_eq!(sample_instances(&train, &none, &prev, 1, 2), prev);
    let all = SelectionProbabilities::new(vec![1.0, 1.0]);
    assert_eq!(sample_instances(&train, &all, &prev, 1, 2).len(), 20);
}

#[test]
fn tasks_are_uniform_and_exclusive() {
    let ids: Vec<String> = (0..3000).map(|i| format!("t{i}")).collect();
    let tasks = decompose_tasks(&ids, 9, 1);
    assert_eq!(tasks.len(), ids.len());
    for kind in TaskKind::ALL {
        let share = tasks.iter().filter(|(_, t)| *t == kind).count() as f64 / 3000.0;
        assert!((share - 1.0 / 3.0).abs() < 0.03, "{kind:?} {share}");
    }
    assert!(tasks.iter().zip(&ids).all(|((a, _), b)| a == b));
    assert_eq!(tasks, decompose_tasks(&ids, 9, 1));
    assert_ne!(tasks, decompose_tasks(&ids, 9, 2));
}

#[test]
fn preference_pair_takes_the_task_item() {
    let f = fixture(8);
    let pair = &f.train.pairs[0];
    let aug = f.augmented.iter().find(|a| a.pair_id == pair.id).unwrap();
    let pp = build_preference_pair(pair, Some(aug), TaskKind::TriggerPath, 2, &f.question, None, 1).unwrap();
    assert_eq!(pp.round, 2);
    assert_eq!(pp.y_w, answer_slice(&aug.pre_answer, 2).unwrap());
    assert_eq!(pp.y_l, answer_slice(&aug.post_answer, 2).unwrap());
    assert!(pp.y_w.starts_with("YES") && pp.y_l.starts_with("NO"));
    assert!(pp.prompt_x.contains(&pair.pre_code));
    assert!(pp.prompt_x.ends_with(TaskKind::TriggerPath.instruction()));

    let regenerated = build_preference_pair(pair, None, TaskKind::RootCause, 0, &f.question, Some(&TemplateTeacher), 1).unwrap();
    assert_eq!(regenerated.task, TaskKind::RootCause);
    assert!(matches!(
        build_preference_pair(pair, None, TaskKind::VulnerableLineLocation, 0, &f.question, None, 1),
        Err(CopoError::Regeneration { .. })
    ));

    let same = AugmentedExample { post_answer: aug.pre_answer.clone(), ..aug.clone() };
    assert!(matches!(
        build_preference_pair(pair, Some(&same), TaskKind::VulnerableLineLocation, 0, &f.question, None, 1),
        Err(CopoError::Degenerate { .. })
    ));
}

fn two_word_policy() -> (ToyPolicy, EncodedPreference) {
    let p = ToyPolicy::uniform(Vocab::with_words(&["a", "b"]).unwrap());
    let (a, b) = (p.vocab().id("a").unwrap(), p.vocab().id("b").unwrap());
    (p, EncodedPreference { prompt: vec![], y_w: vec![a, EOS_ID], y_l: vec![b, EOS_ID] })
}

fn with_bias_gap(p: &ToyPolicy, pair: &EncodedPreference, gap: f64) -> ToyPolicy {
    let mut q = p.clone();
    let bias = q.bias_row();
    q.params_mut().unwrap().set(bias, pair.y_w[0] as usize, gap);
    q
}

#[test]
fn ipo_gap_examples() {
    let (reference, pair) = two_word_policy();
    assert_eq!(ipo_h_encoded(&reference, &reference, &pair), 0.0);
    let policy = with_bias_gap(&reference, &pair, 1.0);
    assert!((ipo_h_encoded(&policy, &reference, &pair) - 1.0).abs() < 1e-12);
    let swapped = EncodedPreference { y_w: pair.y_l.clone(), y_l: pair.y_w.clone(), ..pair.clone() };
    assert!((ipo_h_encoded(&policy, &reference, &swapped) + 1.0).abs() < 1e-12);
}

#[test]
fn ipo_loss_examples() {
    let (reference, pair) = two_word_policy();
    let policy = with_bias_gap(&reference, &pair, 4.0);
    let loss = ipo_loss_encoded(&policy, &reference, std::slice::from_ref(&pair), 0.1).unwrap();
    assert!((loss - 1.0).abs() < 1e-12);
    assert!(matches!(ipo_loss_encoded(&policy, &reference, &[], 0.1), Err(CopoError::EmptyBatch)));
    assert_eq!(ipo_target(0.1), 5.0);
}

#[test]
fn ipo_gradient_matches_finite_difference() {
    let (base, pair) = two_word_policy();
    let policy = ToyPolicy::random(base.vocab().clone(), 0.5, 3);
    let reference = ToyPolicy::random(base.vocab().clone(), 0.5, 4).clone_frozen();
    let mut grad = policy.zero_table();
    accumulate_ipo_grad(&policy, &reference, &pair, 0.1, 1.0, &mut grad);
    let (r, c) = (policy.bias_row(), pair.y_w[0] as usize);
    let loss_at = |d: f64| {
        let mut q = policy.clone();
        let x = q.params().get(r, c);
        q.params_mut().unwrap().set(r, c, x + d);
        ipo_loss_encoded(&q, &reference, std::slice::from_ref(&pair), 0.1).unwrap()
    };
    let fd = (loss_at(1e-6) - loss_at(-1e-6)) / 2e-6;
    assert!((fd - grad.get(r, c)).abs() < 1e-5 * fd.abs().max(1.0), "{fd} vs {}", grad.get(r, c));
}

#[test]
fn separable_fixture_margin_grows_over_a_round() {
    // responses differ only in their second token
    let vocab = Vocab::with_words(&["x", "good", "bad", "end"]).unwrap();
    let id = |w: &str| vocab.id(w).unwrap();
    let pairs: Vec<_> = (0..4)
        .map(|_| EncodedPreference {
            prompt: vec![id("x")],
            y_w: vec![id("x"), id("good"), id("end"), EOS_ID],
            y_l: vec![id("x"), id("bad"), id("end"), EOS_ID],
        })
        .collect();
    let mut policy = ToyPolicy::random(vocab.clone(), 0.2, 6);
    let reference = policy.clone_frozen();
    let before: f64 = pairs.iter().map(|p| p.margin(&policy)).sum();
    let mut opt = build_optimizer(&OptimizerConfig::default(), 0.05).unwrap();
    for batch in pairs.chunks(2) {
        let mut grad = policy.zero_table();
        for p in batch {
            accumulate_ipo_grad(&policy, &reference, p, 0.1, 0.5, &mut grad);
        }
        opt.step(&mut policy, &grad).unwrap();
    }
    let after: f64 = pairs.iter().map(|p| p.margin(&policy)).sum();
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn zero_rounds_return_the_policy_unchanged() {
    let f = fixture(8);
    let cfg = CopoConfig { rounds: 0, ..small_config() };
    let out = run_copo(f.policy.clone(), &inputs(&f), &cfg).unwrap();
    assert_eq!(out.policy.params(), f.policy.params());
    assert!(out.report.rounds.is_empty() && out.preference_sets.is_empty());
}

#[test]
fn rounds_are_monotone_reproducible_and_recount_exactly() {
    let f = fixture(24);
    let cfg = small_config();
    let a = run_copo(f.policy.clone(), &inputs(&f), &cfg).unwrap();
    let b = run_copo(f.policy.clone(), &inputs(&f), &cfg).unwrap();
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert_eq!(a.policy.params(), b.policy.params());
    assert_eq!(a.preference_sets, b.preference_sets);

    assert_eq!(a.report.rounds.len(), 3);
    for w in a.report.rounds.windows(2) {
        let later: BTreeSet<_> = w[1].selected_ids.iter().collect();
        assert!(w[0].selected_ids.iter().all(|id| later.contains(id)));
    }
    for w in a.preference_sets.windows(2) {
        assert!(w[0].pairs.iter().all(|p| w[1].pairs.contains(p)));
    }
    let last = a.preference_sets.last().unwrap();
    let mut keys = BTreeSet::new();
    for p in &last.pairs {
        assert!(keys.insert((p.pair_id.clone(), p.round)), "duplicate task for {} in round {}", p.pair_id, p.round);
    }

    let encoded: Vec<_> = last.pairs.iter().map(|p| EncodedPreference::encode(p, &a.policy, cfg.max_sequence_tokens)).collect();
    let wins = encoded
        .iter()
        .filter(|e| a.policy.log_prob(&e.prompt, &e.y_w) > a.policy.log_prob(&e.prompt, &e.y_l))
        .count();
    let expected = if encoded.is_empty() { 0.0 } else { wins as f64 / encoded.len() as f64 };
    assert_eq!(a.report.rounds.last().unwrap().reward_accuracy, expected);
}

#[test]
fn jsonl_has_one_record_per_pair() {
    let mut set = PreferenceSet::default();
    let pp = |id: &str, round| PreferencePair {
        pair_id: id.into(),
        round,
        task: TaskKind::VulnerableLineLocation,
        prompt_x: "x".into(),
        y_w: "YES".into(),
        y_l: "NO".into(),
    };
    assert!(set.insert(pp("a", 0)));
    assert!(!set.insert(pp("a", 0)));
    assert!(set.insert(pp("a", 1)));
    let text = set.to_jsonl();
    assert_eq!(text.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["pair_id", "round", "task", "prompt_x", "y_w", "y_l"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert_eq!(set.round, 1);
}
