use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EchoBackend, GenerationBackend, OpenAiBackend};

/// Backend selection and connection settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// Registry name, e.g. `openai`, `echo`, `teacher`.
    pub kind: String,
    pub endpoint: Option<String>,
    /// Never read from or written to config files.
    #[serde(skip)]
    pub api_key: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
    pub parallelism: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: "openai".into(),
            endpoint: None,
            api_key: None,
            model: "teacher".into(),
            timeout_secs: 120,
            parallelism: super::DEFAULT_PARALLELISM,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("unknown backend `{name}` (available: {available})")]
    Unknown { name: String, available: String },
    #[error("backend `{name}`: {message}")]
    Config { name: String, message: String },
}

pub type BackendFactory =
    Box<dyn Fn(&BackendConfig) -> Result<Box<dyn GenerationBackend>, RegistryError> + Send + Sync>;

/// Backend constructors keyed by name.
#[derive(Default)]
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl BackendRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// `openai` and `echo`.
    pub fn with_transport_backends() -> Self {
        let mut r = Self::empty();
        r.register("openai", |cfg| {
            let endpoint = cfg.endpoint.clone().ok_or_else(|| RegistryError::Config {
                name: "openai".into(),
                message: "no endpoint configured".into(),
            })?;
            Ok(Box::new(OpenAiBackend::new(
                endpoint,
                cfg.api_key.clone(),
                cfg.model.clone(),
                Duration::from_secs(cfg.timeout_secs),
            )) as Box<dyn GenerationBackend>)
        });
        r.register("echo", |_| Ok(Box::new(EchoBackend) as Box<dyn GenerationBackend>));
        r
    }

    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn(&BackendConfig) -> Result<Box<dyn GenerationBackend>, RegistryError> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn create(&self, name: &str, config: &BackendConfig) -> Result<Box<dyn GenerationBackend>, RegistryError> {
        let factory = self.factories.get(name).ok_or_else(|| RegistryError::Unknown {
            name: name.to_string(),
            available: self.names().join(", "),
        })?;
        factory(config)
    }
}
