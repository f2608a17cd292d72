//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_FAILURES` still print FAIL; they only stop the
//! process from exiting nonzero. One of them passing is reported as an
//! unexpected pass and fails the run, so the list cannot go stale.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdtrain_core::bvd::{synthesize_augmented, AugmentedExample, QuestionTemplate, SynthesisOptions, TemplateTeacher};
use vdtrain_core::copo::{
    accumulate_ipo_grad, build_preference_pair, ipo_h_encoded, ipo_loss_encoded, ipo_target, run_copo,
    sample_instances, CopoConfig, CopoInputs, CopoOutcome, EncodedPreference, SelectionProbabilities, TaskKind,
};
use vdtrain_core::corpus::{split_eval_set, write_corpus, Dataset, SplitTag, TypeList, VulnPair};
use vdtrain_core::eval::{compute_metrics, compute_vp_score, Label, PairOutcome, Verdict};
use vdtrain_core::genclient::RetryPolicy;
use vdtrain_core::minicorpus::{generate_mini_corpus, mini_type_list};
use vdtrain_core::optim::{build_optimizer, OptimizerConfig};
use vdtrain_core::toymodel::{ParamTable, ToyPolicy, Vocab, BOS_ID, EOS_ID};
use vdtrain_core::tsft::{accumulate_tsft_grad, cross_entropy, training_vocab, train_tsft, tsft_loss, Sequence, TripletExample, TsftConfig};

const KNOWN_FAILURES: &[u32] = &[6];
const BIN: &str = env!("CARGO_BIN_EXE_vdtrain");

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Check {
    Check { pass, detail: detail.into() }
}

fn timed(limit: Duration, start: Instant, mut v: Check) -> Check {
    let took = start.elapsed();
    v.detail = format!("{}; {:.1}s (limit {}s)", v.detail, took.as_secs_f64(), limit.as_secs());
    if took > limit {
        v.pass = false;
    }
    v
}

// ---------------------------------------------------------------------------
// 1: analytic gradients against central finite differences

const FD_STEP: f64 = 1e-5;
const FD_RTOL: f64 = 1e-4;
// below this magnitude the comparison is absolute
const FD_FLOOR: f64 = 1e-3;

fn fd_max_error(policy: &ToyPolicy, grad: &ParamTable, loss: impl Fn(&ToyPolicy) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for r in 0..grad.rows() {
        for c in 0..grad.cols() {
            let at = |d: f64| {
                let mut p = policy.clone();
                let x = p.params().get(r, c);
                p.params_mut().unwrap().set(r, c, x + d);
                loss(&p)
            };
            let fd = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            let g = grad.get(r, c);
            worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(FD_FLOOR));
        }
    }
    worst
}

fn random_sequence(rng: &mut ChaCha8Rng, v: u32) -> Sequence {
    let plen = rng.gen_range(1..=7);
    let tlen = rng.gen_range(1..=8);
    let prompt = std::iter::once(BOS_ID).chain((0..plen).map(|_| rng.gen_range(3..v))).collect();
    let target = (0..tlen - 1).map(|_| rng.gen_range(3..v)).chain([EOS_ID]).collect();
    Sequence { prompt, target }
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let (mut ce, mut ts, mut ipo) = (0.0f64, 0.0f64, 0.0f64);
    let seeds = 20u64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words: Vec<String> = (0..rng.gen_range(2..=13)).map(|i| format!("w{i}")).collect();
        let vocab = Vocab::with_words(&words).unwrap();
        assert!(vocab.len() <= 16);
        let v = vocab.len() as u32;
        let policy = ToyPolicy::random(vocab.clone(), 1.0, seed);

        let seq = random_sequence(&mut rng, v);
        let g = policy.grad_log_prob(&seq.prompt, &seq.target);
        let mut neg = policy.zero_table();
        neg.add_scaled(&g, -1.0);
        ce = ce.max(fd_max_error(&policy, &neg, |p| cross_entropy(p, &seq)));

        let ex = TripletExample {
            pair_id: format!("s{seed}"),
            sequences: [random_sequence(&mut rng, v), random_sequence(&mut rng, v), random_sequence(&mut rng, v)],
        };
        let mut g = policy.zero_table();
        accumulate_tsft_grad(&policy, &ex, 1.0, &mut g);
        ts = ts.max(fd_max_error(&policy, &g, |p| tsft_loss(p, &ex)));

        let reference = ToyPolicy::random(vocab, 1.0, seed + 1000).clone_frozen();
        let batch: Vec<EncodedPreference> = (0..2)
            .map(|_| {
                let w = random_sequence(&mut rng, v);
                let l = random_sequence(&mut rng, v);
                EncodedPreference { prompt: w.prompt, y_w: w.target, y_l: l.target }
            })
            .collect();
        let mut g = policy.zero_table();
        for pair in &batch {
            accumulate_ipo_grad(&policy, &reference, pair, 0.1, 1.0 / batch.len() as f64, &mut g);
        }
        ipo = ipo.max(fd_max_error(&policy, &g, |p| ipo_loss_encoded(p, &reference, &batch, 0.1).unwrap()));
    }
    let pass = ce <= FD_RTOL && ts <= FD_RTOL && ipo <= FD_RTOL;
    timed(
        Duration::from_secs(60),
        start,
        check(pass, format!("{seeds} seeds, max rel err cross_entropy {ce:.1e} tsft_loss {ts:.1e} ipo_loss {ipo:.1e}")),
    )
}

// ---------------------------------------------------------------------------
// 2: IPO drives h to 1/(2 tau) on a single pair

struct Mini {
    train: Dataset,
    eval: Dataset,
    augmented: Vec<AugmentedExample>,
    types: TypeList,
    question: QuestionTemplate,
    vocab: Vocab,
}

fn mini(n: usize, seed: u64) -> Mini {
    let all = Dataset::new(generate_mini_corpus(n, seed), SplitTag::Train);
    let (train, eval) = split_eval_set(&all, 0.25, seed).unwrap();
    let opts = SynthesisOptions { retry: RetryPolicy::immediate(), ..Default::default() };
    let (augmented, _) = synthesize_augmented(&train, &TemplateTeacher, &opts).unwrap();
    let question = QuestionTemplate::default();
    let extra: Vec<&str> = TaskKind::ALL.iter().map(|t| t.instruction()).collect();
    let vocab = training_vocab(&augmented, &question, &extra, 512).unwrap();
    Mini { train, eval, augmented, types: mini_type_list(), question, vocab }
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let m = mini(8, 2);
    let pair = &m.train.pairs[0];
    let aug = m.augmented.iter().find(|a| a.pair_id == pair.id);
    let pref = build_preference_pair(pair, aug, TaskKind::RootCause, 0, &m.question, None, 0).unwrap();
    let mut policy = ToyPolicy::random(m.vocab, 0.1, 5);
    let reference = policy.clone_frozen();
    let enc = EncodedPreference::encode(&pref, &policy, usize::MAX);
    let tau = 0.1;
    let sgd = OptimizerConfig { kind: "sgd".into(), ..Default::default() };
    let mut opt = build_optimizer(&sgd, 1e-3).unwrap();
    let mut steps = 0;
    let mut h = ipo_h_encoded(&policy, &reference, &enc);
    while steps < 20_000 {
        let mut g = policy.zero_table();
        accumulate_ipo_grad(&policy, &reference, &enc, tau, 1.0, &mut g);
        opt.step(&mut policy, &g).unwrap();
        steps += 1;
        let next = ipo_h_encoded(&policy, &reference, &enc);
        let converged = (next - h).abs() < 1e-9;
        h = next;
        if converged {
            break;
        }
    }
    let target = ipo_target(tau);
    timed(
        Duration::from_secs(30),
        start,
        check((h - target).abs() <= 0.05, format!("tau {tau}: h = {h:.6} after {steps} steps (target {target} +/- 0.05)")),
    )
}

// ---------------------------------------------------------------------------
// 3: metrics against brute-force recounts

fn random_label(rng: &mut ChaCha8Rng) -> Label {
    [Label::Yes, Label::No, Label::Unknown][rng.gen_range(0..3)]
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut vp_out_of_range = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=50);
        let pairs: Vec<(Label, Label)> = (0..n).map(|_| (random_label(&mut rng), random_label(&mut rng))).collect();
        let snippets: Vec<(Label, bool)> = pairs.iter().flat_map(|&(a, b)| [(a, true), (b, false)]).collect();
        let m = compute_metrics(&snippets).unwrap();

        let (mut tp, mut fp, mut fn_, mut right) = (0usize, 0usize, 0usize, 0usize);
        for &(label, vulnerable) in &snippets {
            match (label, vulnerable) {
                (Label::Yes, true) => {
                    tp += 1;
                    right += 1;
                }
                (Label::Yes, false) => fp += 1,
                (_, true) => fn_ += 1,
                (Label::No, false) => right += 1,
                (Label::Unknown, false) => {}
            }
        }
        let accuracy = right as f64 / snippets.len() as f64;
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };

        let outcomes: Vec<PairOutcome> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| {
                PairOutcome::new(
                    format!("p{i}"),
                    Verdict { label: a, source_span: None },
                    Verdict { label: b, source_span: None },
                )
            })
            .collect();
        let vp = compute_vp_score(&outcomes).unwrap();
        let good = pairs.iter().filter(|p| **p == (Label::Yes, Label::No)).count() as f64;
        let bad = pairs.iter().filter(|p| **p == (Label::No, Label::Yes)).count() as f64;
        let vp_brute = (good - bad) / n as f64;

        if m.accuracy != accuracy || m.f1 != f1 || vp != vp_brute {
            mismatches += 1;
        }
        if !(-1.0..=1.0).contains(&vp) {
            vp_out_of_range += 1;
        }
    }
    check(
        mismatches == 0 && vp_out_of_range == 0,
        format!("1000 sets: {mismatches} mismatches, {vp_out_of_range} VP values outside [-1, 1]"),
    )
}

// ---------------------------------------------------------------------------
// 4: selection rates follow the per-type probabilities

fn stub_pair(i: usize, type_index: usize) -> VulnPair {
    VulnPair {
        id: format!("p{i:06}"),
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

fn criterion_4() -> Check {
    let draws = 10_000;
    let probs = [0.0, 1.0, 0.25];
    let ds = Dataset::new((0..draws * 3).map(|i| stub_pair(i, i % 3)).collect(), SplitTag::Train);
    let picked = sample_instances(&ds, &SelectionProbabilities::new(probs.to_vec()), &[], 4, 0);
    let mut counts = [0usize; 3];
    for id in &picked {
        counts[ds.get(id).unwrap().type_index] += 1;
    }
    let rates: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    let within = rates.iter().zip(probs).all(|(r, p)| (r - p).abs() <= 0.02);
    check(
        within && counts[0] == 0,
        format!("p = {probs:?} over {draws} draws each: rates {rates:?}, p = 0 type selected {} times", counts[0]),
    )
}

// ---------------------------------------------------------------------------
// 5 and 8: COPO runs on a random policy, so every type has work to do

fn copo_config(rounds: usize, seed: u64) -> CopoConfig {
    CopoConfig {
        rounds,
        learning_rate: 0.01,
        detection_max_new_tokens: 8,
        detection_threads: 4,
        seed,
        ..Default::default()
    }
}

fn copo_run(m: &Mini, start: ToyPolicy, rounds: usize, seed: u64) -> CopoOutcome {
    let inputs = CopoInputs {
        train: &m.train,
        augmented: &m.augmented,
        eval_set: &m.eval,
        type_list: &m.types,
        question: &m.question,
        backend: None,
    };
    run_copo(start, &inputs, &copo_config(rounds, seed)).unwrap()
}

/// One short SFT epoch: some types are detected, others not yet.
fn weak_policy(m: &Mini, lr: f64) -> ToyPolicy {
    let mut p = ToyPolicy::uniform(m.vocab.clone());
    let cfg = TsftConfig { epochs: 1, learning_rate: lr, ..Default::default() };
    train_tsft(&mut p, &m.augmented, &m.question, &cfg).unwrap();
    p
}

fn keys(set: &vdtrain_core::copo::PreferenceSet) -> BTreeSet<(String, usize)> {
    set.pairs.iter().map(|p| (p.pair_id.clone(), p.round)).collect()
}

fn criterion_5() -> Check {
    let m = mini(40, 5);
    let mut problems = Vec::new();
    let mut sizes = Vec::new();
    for seed in [1, 2, 3] {
        let out = copo_run(&m, weak_policy(&m, 0.002), 3, seed);
        let rounds = &out.report.rounds;
        for w in rounds.windows(2) {
            let prev: BTreeSet<_> = w[0].selected_ids.iter().collect();
            let next: BTreeSet<_> = w[1].selected_ids.iter().collect();
            if !prev.is_subset(&next) {
                problems.push(format!("seed {seed}: S{} not within S{}", w[0].round, w[1].round));
            }
        }
        for w in out.preference_sets.windows(2) {
            if !keys(&w[0]).is_subset(&keys(&w[1])) {
                problems.push(format!("seed {seed}: preference set shrank after round {}", w[0].round));
            }
        }
        for r in rounds {
            let ids: BTreeSet<_> = r.tasks.iter().map(|(id, _)| id).collect();
            if ids.len() != r.tasks.len() {
                problems.push(format!("seed {seed} round {}: a pair has two tasks", r.round));
            }
        }
        if let Some(last) = out.preference_sets.last() {
            if keys(last).len() != last.pairs.len() {
                problems.push(format!("seed {seed}: duplicate (pair_id, round)"));
            }
        }
        sizes.push(rounds.iter().map(|r| r.selected_ids.len()).collect::<Vec<_>>());
    }
    let nonempty = sizes.iter().all(|s| s.iter().any(|&n| n > 0));
    check(
        problems.is_empty() && nonempty,
        if problems.is_empty() { format!("3 seeds x 3 rounds, |S_r| = {sizes:?}") } else { problems.join("; ") },
    )
}

fn criterion_8() -> Check {
    let m = mini(40, 8);
    let mut details = Vec::new();
    let mut pass = true;
    for rounds in 1..=3 {
        let out = copo_run(&m, ToyPolicy::random(m.vocab.clone(), 0.1, 9), rounds, 9);
        let last = out.report.rounds.last().unwrap();
        let set = out.preference_sets.last().unwrap();
        let mut agree = 0usize;
        for p in &set.pairs {
            let e = EncodedPreference::encode(p, &out.policy, copo_config(rounds, 9).max_sequence_tokens);
            let lw = out.policy.log_prob(&e.prompt, &e.y_w);
            let ll = out.policy.log_prob(&e.prompt, &e.y_l);
            if (lw - ll).signum() > 0.0 {
                agree += 1;
            }
        }
        let recount = if set.pairs.is_empty() { 0.0 } else { agree as f64 / set.pairs.len() as f64 };
        pass &= recount == last.reward_accuracy && !set.pairs.is_empty();
        details.push(format!("round {}: reported {:.4} recount {recount:.4} over {}", last.round, last.reward_accuracy, set.pairs.len()));
    }
    check(pass, details.join(", "))
}

// ---------------------------------------------------------------------------
// 6 and 7: the command-line pipeline on a generated corpus

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

fn workspace(train_pairs: usize, test_pairs: usize) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let all = generate_mini_corpus(train_pairs + test_pairs, 7);
    let (train, test) = all.split_at(train_pairs);
    write_corpus(&root.join("train.jsonl"), train).unwrap();
    write_corpus(&root.join("test.jsonl"), test).unwrap();
    fs::write(root.join("types.json"), serde_json::to_string(&mini_type_list()).unwrap()).unwrap();
    fs::write(
        root.join("run.toml"),
        "seed = 3\n[corpus]\ntrain = \"train.jsonl\"\ntest = \"test.jsonl\"\ntype_list = \"types.json\"\n\
         [tsft]\nepochs = 3\n[copo]\nrounds = 3\ndetection_max_new_tokens = 64\n[eval]\nmax_new_tokens = 64\n",
    )
    .unwrap();
    Workspace { _dir: dir, root }
}

fn vdtrain(ws: &Workspace, run_dir: &Path, args: &[&str]) {
    let out = Command::new(BIN)
        .arg("--config")
        .arg(ws.root.join("run.toml"))
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "vdtrain {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn pipeline(ws: &Workspace, name: &str) -> PathBuf {
    let rd = ws.root.join("runs").join(name);
    vdtrain(ws, &rd, &["--mock-backend", "synthesize"]);
    vdtrain(ws, &rd, &["train-sft"]);
    vdtrain(ws, &rd, &["--mock-backend", "train-copo"]);
    let sft = rd.join("checkpoints/sft.ckpt");
    vdtrain(ws, &rd, &["evaluate", "--untrained"]);
    vdtrain(ws, &rd, &["evaluate", "--checkpoint", sft.to_str().unwrap()]);
    vdtrain(ws, &rd, &["evaluate"]);
    rd
}

fn vp_of(run_dir: &Path, name: &str) -> f64 {
    let text = fs::read_to_string(run_dir.join(format!("reports/metrics_{name}.json"))).unwrap();
    serde_json::from_str::<serde_json::Value>(&text).unwrap()["vp_score"].as_f64().unwrap()
}

fn criterion_6(ws: &Workspace) -> (Check, PathBuf) {
    let start = Instant::now();
    let rd = pipeline(ws, "a");
    let (untrained, sft, copo) = (vp_of(&rd, "untrained"), vp_of(&rd, "sft"), vp_of(&rd, "copo"));
    let v = check(
        copo > untrained && copo > sft,
        format!("held-out VP: untrained {untrained:.4}, SFT only {sft:.4}, SFT+COPO {copo:.4} (needs strictly greater than both)"),
    );
    (timed(Duration::from_secs(300), start, v), rd)
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_file()).collect())
        .unwrap_or_default();
    out.sort();
    out
}

fn criterion_7(ws: &Workspace, first: &Path) -> Check {
    let second = pipeline(ws, "b");
    let mut compared = Vec::new();
    let mut differing = Vec::new();
    let mut targets = vec![PathBuf::from("d_aug/d_aug.jsonl")];
    targets.extend(files_under(&first.join("checkpoints")).iter().map(|p| p.strip_prefix(first).unwrap().to_path_buf()));
    targets.extend(
        files_under(&first.join("reports"))
            .iter()
            .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("metrics_") && p.extension().is_some_and(|e| e == "json"))
            .map(|p| p.strip_prefix(first).unwrap().to_path_buf()),
    );
    for rel in &targets {
        let a = fs::read(first.join(rel)).unwrap_or_default();
        let b = fs::read(second.join(rel)).unwrap_or_default();
        if a.is_empty() || a != b {
            differing.push(rel.display().to_string());
        }
        compared.push(rel.display().to_string());
    }
    check(
        differing.is_empty() && compared.len() >= 6,
        if differing.is_empty() {
            format!("{} artifacts byte-identical across two runs", compared.len())
        } else {
            format!("differ: {}", differing.join(", "))
        },
    )
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            check(false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let names = [
        "gradient finite differences",
        "IPO fixed point",
        "metrics brute force",
        "selection sampling rates",
        "curriculum monotonicity",
        "end-to-end VP improvement",
        "byte-identical reruns",
        "reward accuracy recount",
    ];
    let ws = workspace(100, 40);
    let mut run_a: Option<PathBuf> = None;
    let mut results = Vec::new();
    for id in 1..=8u32 {
        let v = match id {
            1 => guarded(criterion_1),
            2 => guarded(criterion_2),
            3 => guarded(criterion_3),
            4 => guarded(criterion_4),
            5 => guarded(criterion_5),
            6 => guarded(|| {
                let (v, rd) = criterion_6(&ws);
                run_a = Some(rd);
                v
            }),
            7 => match run_a.clone() {
                Some(rd) => guarded(|| criterion_7(&ws, &rd)),
                None => check(false, "first pipeline run did not complete"),
            },
            _ => guarded(criterion_8),
        };
        println!("criterion {id}: {} {} ({})", if v.pass { "PASS" } else { "FAIL" }, names[id as usize - 1], v.detail);
        results.push((id, v.pass));
    }
    let unexpected_fail: Vec<u32> = results.iter().filter(|(id, p)| !p && !KNOWN_FAILURES.contains(id)).map(|r| r.0).collect();
    let unexpected_pass: Vec<u32> = results.iter().filter(|(id, p)| *p && KNOWN_FAILURES.contains(id)).map(|r| r.0).collect();
    let passed = results.iter().filter(|r| r.1).count();
    println!("acceptance: {passed}/8 PASS; known failures {KNOWN_FAILURES:?}");
    if !unexpected_fail.is_empty() || !unexpected_pass.is_empty() {
        println!("acceptance: unexpected failures {unexpected_fail:?}, unexpected passes {unexpected_pass:?}");
        std::process::exit(1);
    }
}
