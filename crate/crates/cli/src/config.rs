//! TOML run configuration. Everything except credentials lives in the file;
//! the API key comes only from `VDTRAIN_API_KEY`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vdtrain_core::bvd::{QuestionTemplate, CODE_PLACEHOLDER};
use vdtrain_core::copo::CopoConfig;
use vdtrain_core::eval::DetectionOptions;
use vdtrain_core::genclient::{BackendConfig, RetryPolicy, DEFAULT_MAX_NEW_TOKENS, DEFAULT_MAX_PROMPT_TOKENS};
use vdtrain_core::toymodel::DEFAULT_VOCAB_SIZE;
use vdtrain_core::tsft::TsftConfig;

use crate::error::CliError;

pub const API_KEY_ENV: &str = "VDTRAIN_API_KEY";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusPaths {
    /// JSON-lines training corpus; the COPO evaluation split is carved from it.
    pub train: PathBuf,
    /// Held-out JSON-lines corpus used by `evaluate` when no dataset is given.
    pub test: Option<PathBuf>,
    /// JSON type list: `{"names": [...], "cwe_to_type": {"CWE-79": 0}}`.
    pub type_list: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSettings {
    /// Temperature-1 regenerations per answer that fails validation.
    pub retry_budget: u32,
    /// Transport attempts per request, with exponential backoff.
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub max_new_tokens: usize,
    pub max_prompt_tokens: usize,
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        Self { retry_budget: 2, max_attempts: 5, backoff_ms: 500, max_new_tokens: DEFAULT_MAX_NEW_TOKENS, max_prompt_tokens: DEFAULT_MAX_PROMPT_TOKENS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every stage; overrides the `seed` fields of `tsft` and `copo`.
    pub seed: u64,
    /// Parent of the `runs/<timestamp>-<hash>/` directories.
    pub output_dir: PathBuf,
    /// Fraction of each type held out of training as the COPO evaluation split.
    pub eval_fraction: f64,
    pub vocab_size: usize,
    pub corpus: CorpusPaths,
    pub backend: BackendConfig,
    pub synthesis: SynthesisSettings,
    pub tsft: TsftConfig,
    pub copo: CopoConfig,
    pub eval: DetectionOptions,
    /// Detection question used for training targets, curriculum evaluation
    /// and reporting. Must keep the `{func}` placeholder.
    pub question: QuestionTemplate,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            eval_fraction: 0.1,
            vocab_size: DEFAULT_VOCAB_SIZE,
            corpus: CorpusPaths::default(),
            backend: BackendConfig::default(),
            synthesis: SynthesisSettings::default(),
            tsft: TsftConfig::default(),
            copo: CopoConfig::default(),
            eval: DetectionOptions::default(),
            question: QuestionTemplate::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Reads `path`, applies the seed override, resolves relative paths
    /// against the config file's directory, and reads the API key from the
    /// environment.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.tsft.seed = cfg.seed;
        cfg.copo.seed = cfg.seed;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        resolve(&mut cfg.corpus.train);
        resolve(&mut cfg.corpus.type_list);
        if let Some(t) = cfg.corpus.test.as_mut() {
            resolve(t);
        }
        cfg.backend.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(CliError::Usage(format!("eval_fraction must be in (0, 1), got {}", self.eval_fraction)));
        }
        if self.vocab_size < 3 {
            return Err(CliError::Usage("vocab_size must be at least 3".into()));
        }
        if !self.question.user.contains(CODE_PLACEHOLDER) {
            return Err(CliError::Usage(format!("question.user must contain {CODE_PLACEHOLDER}")));
        }
        let required = [("corpus.train", Some(&self.corpus.train)), ("corpus.type_list", Some(&self.corpus.type_list))];
        for (key, path) in required.into_iter().chain([("corpus.test", self.corpus.test.as_ref())]) {
            match path {
                Some(p) if p.as_os_str().is_empty() => return Err(CliError::Usage(format!("{key} is not set"))),
                Some(p) if !p.is_file() => return Err(CliError::data_at(p, format!("{key}: {} does not exist", p.display()))),
                _ => {}
            }
        }
        Ok(())
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form. The
    /// API key is never serialized, so it does not enter the hash.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))[..12].to_string()
    }

    pub fn synthesis_options(&self) -> vdtrain_core::bvd::SynthesisOptions {
        vdtrain_core::bvd::SynthesisOptions {
            parallelism: self.backend.parallelism.max(1),
            retry_budget: self.synthesis.retry_budget,
            max_new_tokens: self.synthesis.max_new_tokens,
            max_prompt_tokens: self.synthesis.max_prompt_tokens,
            retry: RetryPolicy {
                max_attempts: self.synthesis.max_attempts.max(1),
                base_delay: Duration::from_millis(self.synthesis.backoff_ms),
                ..RetryPolicy::default()
            },
        }
    }
}
