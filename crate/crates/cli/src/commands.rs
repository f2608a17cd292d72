use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use vdtrain_core::bvd::{load_augmented, synthesize_augmented, write_augmented, BvdError};
use vdtrain_core::copo::{run_copo, CopoError, CopoInputs, TaskKind};
use vdtrain_core::corpus::{load_corpus, split_eval_set, Dataset, TypeList};
use vdtrain_core::eval::{run_detection, transcripts, MetricsReport};
use vdtrain_core::genclient::{GenerationBackend, RetryPolicy};
use vdtrain_core::toymodel::{load_checkpoint, save_checkpoint, CheckpointMeta, ToyPolicy};
use vdtrain_core::tsft::{train_tsft_with, training_vocab, TsftError};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::layout::{write_file, write_meta, ArtifactMeta, RunLayout};
use crate::EvaluateArgs;

pub struct Context {
    pub config: RunConfig,
    pub hash: String,
    pub layout: RunLayout,
    /// Set when the run directory was given with `--run-dir`.
    pub explicit: bool,
    pub mock_backend: bool,
}

impl Context {
    pub fn new(config: RunConfig, run_dir: Option<&Path>, mock_backend: bool) -> Self {
        let hash = config.hash();
        let layout = RunLayout::resolve(run_dir, &config.output_dir, &hash);
        Self { config, hash, layout, explicit: run_dir.is_some(), mock_backend }
    }

    fn meta<'a>(&'a self, stage: &'a str) -> ArtifactMeta<'a> {
        ArtifactMeta { config_hash: &self.hash, seed: self.config.seed, stage }
    }

    fn checkpoint_meta(&self, stage: &str) -> CheckpointMeta {
        CheckpointMeta { config_hash: self.hash.clone(), seed: self.config.seed, stage: stage.into() }
    }

    fn backend(&self) -> Result<Box<dyn GenerationBackend>, CliError> {
        let name = if self.mock_backend { "teacher" } else { self.config.backend.kind.as_str() };
        vdtrain_core::default_registry()
            .create(name, &self.config.backend)
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    fn type_list(&self) -> Result<TypeList, CliError> {
        let p = &self.config.corpus.type_list;
        TypeList::load(p).map_err(|e| CliError::data_at(p, e.to_string()))
    }

    /// The training corpus split into (train, evaluation) parts.
    fn train_split(&self, types: &TypeList) -> Result<(Dataset, Dataset), CliError> {
        let p = &self.config.corpus.train;
        let ds = load_corpus(p, types).map_err(|e| CliError::data_at(p, e.to_string()))?;
        if ds.is_empty() {
            return Err(CliError::data_at(p, format!("training corpus {} is empty", p.display())));
        }
        split_eval_set(&ds, self.config.eval_fraction, self.config.seed).map_err(|e| CliError::data_at(p, e.to_string()))
    }

    fn require(&self, path: &Path, what: &str, hint: &str) -> Result<(), CliError> {
        if path.is_file() {
            Ok(())
        } else {
            Err(CliError::data_at(path, format!("{what} not found at {}; {hint}", path.display())))
        }
    }

    fn load_policy(&self, path: &Path) -> Result<ToyPolicy, CliError> {
        load_checkpoint(path).map(|(p, _)| p).map_err(|e| CliError::data_at(path, e.to_string()))
    }
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s
}

fn print_summary(v: serde_json::Value) {
    println!("{v}");
}

pub fn synthesize(ctx: &Context) -> Result<(), CliError> {
    let types = ctx.type_list()?;
    let (train, _) = ctx.train_split(&types)?;
    let backend = ctx.backend()?;
    let mut options = ctx.config.synthesis_options();
    if ctx.mock_backend {
        options.retry = RetryPolicy::immediate();
    }
    let layout = if ctx.explicit { ctx.layout.clone() } else { RunLayout::fresh(&ctx.config.output_dir, &ctx.hash) };
    let report_path = layout.report("synthesis.json");
    let (aug, report) = match synthesize_augmented(&train, backend.as_ref(), &options) {
        Ok(r) => r,
        Err(BvdError::AllFailed(report)) => {
            write_file(
                &report_path,
                pretty(&json!({"config_hash": ctx.hash, "seed": ctx.config.seed, "report": report})),
            )?;
            return Err(CliError::Backend {
                message: format!("all {} pairs failed synthesis", report.input_pairs),
                endpoint: backend.endpoint(),
            });
        }
        Err(BvdError::EmptyDataset) => return Err(CliError::data("no training pairs to synthesize from")),
        Err(e) => return Err(CliError::data(e.to_string())),
    };
    let d_aug = layout.d_aug();
    crate::layout::ensure_parent(&d_aug)?;
    write_augmented(&d_aug, &aug).map_err(|e| CliError::data_at(&d_aug, e.to_string()))?;
    write_meta(&d_aug, &ctx.meta("synthesize"))?;
    write_file(&report_path, pretty(&json!({"config_hash": ctx.hash, "seed": ctx.config.seed, "report": report})))?;
    print_summary(json!({
        "run_dir": layout.root,
        "input_pairs": report.input_pairs,
        "retained_pairs": report.retained_pairs,
        "dropped": report.dropped.len(),
    }));
    Ok(())
}

fn task_instructions() -> Vec<&'static str> {
    TaskKind::ALL.iter().map(|t| t.instruction()).collect()
}

pub fn train_sft(ctx: &Context) -> Result<(), CliError> {
    let layout = &ctx.layout;
    let d_aug = layout.d_aug();
    ctx.require(&d_aug, "augmented dataset", "run `vdtrain synthesize` first")?;
    let aug = load_augmented(&d_aug).map_err(|e| CliError::data_at(&d_aug, e.to_string()))?;
    if aug.is_empty() {
        return Err(CliError::data_at(&d_aug, format!("augmented dataset {} is empty", d_aug.display())));
    }
    let q = &ctx.config.question;
    let vocab = training_vocab(&aug, q, &task_instructions(), ctx.config.vocab_size)
        .map_err(|e| CliError::data(e.to_string()))?;
    let mut policy = ToyPolicy::uniform(vocab);
    let trace = train_tsft_with(&mut policy, &aug, q, &ctx.config.tsft, |epoch, p| {
        let stage = format!("sft_epoch{epoch}");
        let path = layout.checkpoint(&stage);
        crate::layout::ensure_parent(&path).map_err(|e| io_error(&path, e))?;
        save_checkpoint(&path, p, &ctx.checkpoint_meta(&stage)).map_err(|e| io_error(&path, e))
    })
    .map_err(|e| match e {
        TsftError::Config(m) => CliError::Usage(m),
        e => CliError::data(e.to_string()),
    })?;
    let ckpt = layout.checkpoint("sft");
    save_checkpoint(&ckpt, &policy, &ctx.checkpoint_meta("sft")).map_err(|e| CliError::data_at(&ckpt, e.to_string()))?;
    let csv = layout.report("tsft_loss.csv");
    write_file(&csv, trace.to_csv())?;
    write_meta(&csv, &ctx.meta("sft"))?;
    write_file(
        &layout.report("tsft.json"),
        pretty(&json!({
            "config_hash": ctx.hash,
            "seed": ctx.config.seed,
            "epoch_losses": trace.epoch_losses,
            "truncated_sequences": trace.truncated_sequences,
            "vocab_size": policy.vocab().len(),
        })),
    )?;
    print_summary(json!({"run_dir": layout.root, "checkpoint": ckpt, "epoch_losses": trace.epoch_losses}));
    Ok(())
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> TsftError {
    TsftError::Io { path: path.display().to_string(), source: std::io::Error::other(e.to_string()) }
}

pub fn train_copo(ctx: &Context) -> Result<(), CliError> {
    let layout = &ctx.layout;
    let sft = layout.checkpoint("sft");
    ctx.require(&sft, "SFT checkpoint", "run `vdtrain train-sft` first")?;
    let policy = ctx.load_policy(&sft)?;
    let d_aug = layout.d_aug();
    ctx.require(&d_aug, "augmented dataset", "run `vdtrain synthesize` first")?;
    let aug = load_augmented(&d_aug).map_err(|e| CliError::data_at(&d_aug, e.to_string()))?;
    let types = ctx.type_list()?;
    let (train, eval_set) = ctx.train_split(&types)?;
    let backend = if ctx.mock_backend {
        Some(ctx.backend()?)
    } else {
        ctx.backend().map_err(|e| log::warn!("no regeneration backend: {e}")).ok()
    };
    let q = &ctx.config.question;
    let inputs = CopoInputs {
        train: &train,
        augmented: &aug,
        eval_set: &eval_set,
        type_list: &types,
        question: q,
        backend: backend.as_deref(),
    };
    let outcome = run_copo(policy, &inputs, &ctx.config.copo).map_err(|e| match e {
        CopoError::Config(m) => CliError::Usage(m),
        e => CliError::data(e.to_string()),
    })?;
    for (r, set) in outcome.preference_sets.iter().enumerate() {
        let path = layout.prefs(r);
        write_file(&path, set.to_jsonl())?;
        write_meta(&path, &ctx.meta("copo"))?;
    }
    let ckpt = layout.checkpoint("copo");
    save_checkpoint(&ckpt, &outcome.policy, &ctx.checkpoint_meta("copo"))
        .map_err(|e| CliError::data_at(&ckpt, e.to_string()))?;
    write_file(
        &layout.report("copo.json"),
        pretty(&json!({"config_hash": ctx.hash, "seed": ctx.config.seed, "rounds": outcome.report.rounds})),
    )?;
    let reward: Vec<f64> = outcome.report.rounds.iter().map(|r| r.reward_accuracy).collect();
    print_summary(json!({"run_dir": layout.root, "checkpoint": ckpt, "reward_accuracy": reward}));
    Ok(())
}

pub fn evaluate(ctx: &Context, args: &EvaluateArgs) -> Result<(), CliError> {
    let layout = &ctx.layout;
    let types = ctx.type_list()?;
    let data_path = args
        .dataset
        .clone()
        .or_else(|| ctx.config.corpus.test.clone())
        .ok_or_else(|| CliError::Usage("no evaluation dataset: pass --dataset or set corpus.test".into()))?;
    let dataset = load_corpus(&data_path, &types).map_err(|e| CliError::data_at(&data_path, e.to_string()))?;
    if dataset.is_empty() {
        return Err(CliError::data_at(&data_path, format!("evaluation dataset {} is empty", data_path.display())));
    }
    let checkpoint: Option<PathBuf> = match &args.checkpoint {
        Some(p) => {
            ctx.require(p, "checkpoint", "check the --checkpoint path")?;
            Some(p.clone())
        }
        None => ["copo", "sft"].iter().map(|n| layout.checkpoint(n)).find(|p| p.is_file()),
    };
    let q = &ctx.config.question;
    let (policy, default_name) = match (&checkpoint, args.untrained) {
        (Some(p), false) => (ctx.load_policy(p)?, stem(p)),
        (Some(p), true) => (ToyPolicy::uniform(ctx.load_policy(p)?.vocab().clone()), "untrained".to_string()),
        (None, true) => {
            let texts: Vec<&str> = dataset.pairs.iter().flat_map(|p| [p.pre_code.as_str(), p.post_code.as_str()]).collect();
            let vocab = training_vocab(&[], q, &texts, ctx.config.vocab_size).map_err(|e| CliError::data(e.to_string()))?;
            (ToyPolicy::uniform(vocab), "untrained".to_string())
        }
        (None, false) => {
            let missing = layout.checkpoint("sft");
            return Err(CliError::data_at(
                &missing,
                format!("no checkpoint found at {}; train first or pass --checkpoint", missing.display()),
            ));
        }
    };
    let name = args.name.clone().unwrap_or(default_name);
    if name.is_empty() || name.contains(['/', '\\']) {
        return Err(CliError::Usage(format!("invalid report name `{name}`")));
    }
    let detections = run_detection(&policy, &dataset, q, &ctx.config.eval);
    let report = MetricsReport::build(&detections, types.names(), &ctx.hash, ctx.config.seed)
        .map_err(|e| CliError::data(e.to_string()))?;
    let mut json_text = report.to_json();
    json_text.push('\n');
    write_file(&layout.report(&format!("metrics_{name}.json")), json_text)?;
    write_file(&layout.report(&format!("metrics_{name}.txt")), report.to_table())?;
    let tpath = layout.report(&format!("transcripts_{name}.jsonl"));
    let mut lines = String::new();
    for t in transcripts(&detections) {
        lines.push_str(&serde_json::to_string(&t).expect("transcript serializes"));
        lines.push('\n');
    }
    write_file(&tpath, lines)?;
    write_meta(&tpath, &ctx.meta("evaluate"))?;
    print!("{}", report.to_table());
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint").to_string()
}

/// One row per metrics report plus the COPO round trajectory.
pub fn report_text(layout: &RunLayout) -> Result<String, CliError> {
    let dir = layout.reports_dir();
    let mut names: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| CliError::data_at(&dir, format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.starts_with("metrics_") && n.ends_with(".json"))
        .collect();
    names.sort();
    let mut out = String::new();
    if !names.is_empty() {
        out.push_str(&format!("{:<20} {:>9} {:>9} {:>9} {:>9}\n", "model", "accuracy", "f1", "vp", "pairs"));
    }
    for n in &names {
        let path = dir.join(n);
        let text = fs::read_to_string(&path).map_err(|e| CliError::data_at(&path, e.to_string()))?;
        let m: MetricsReport = serde_json::from_str(&text).map_err(|e| CliError::data_at(&path, e.to_string()))?;
        let model = &n["metrics_".len()..n.len() - ".json".len()];
        out.push_str(&format!(
            "{model:<20} {:>9.4} {:>9.4} {:>9.4} {:>9}\n",
            m.accuracy, m.f1, m.vp_score, m.counts.pairs
        ));
    }
    let copo = dir.join("copo.json");
    if copo.is_file() {
        let text = fs::read_to_string(&copo).map_err(|e| CliError::data_at(&copo, e.to_string()))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::data_at(&copo, e.to_string()))?;
        out.push_str(&format!("\n{:<6} {:>8} {:>10} {:>16}\n", "round", "prefs", "reward_acc", "mean_loss"));
        for r in v["rounds"].as_array().into_iter().flatten() {
            let loss = r["mean_loss"].as_f64().map(|l| format!("{l:.6}")).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{:<6} {:>8} {:>10.4} {:>16}\n",
                r["round"].as_u64().unwrap_or(0),
                r["preference_set_size"].as_u64().unwrap_or(0),
                r["reward_accuracy"].as_f64().unwrap_or(f64::NAN),
                loss
            ));
        }
    }
    if out.is_empty() {
        return Err(CliError::data_at(&dir, format!("no reports in {}", dir.display())));
    }
    Ok(out)
}

pub fn report(ctx: &Context) -> Result<(), CliError> {
    print!("{}", report_text(&ctx.layout)?);
    Ok(())
}
