//! Pipeline configuration (TOML).
//!
//! ```toml
//! library_path = "build/libcjson.so"
//! workspace = "work"
//! backend = "http"            # http | replay | scripted
//! parallelism = 2
//! denylist = ["_init", "_fini", "__*"]
//!
//! [backend_params]
//! endpoint = "https://api.example.com/v1/chat/completions"
//! model = "some-model"
//!
//! [compiler]
//! template = "clang++ -g -O1 {sanitize} {source} -o {output} {library_dir}/{library_name}"
//!
//! [budgets]
//! max_analysis_turns = 6
//! max_generation_attempts = 10
//! smoke_run_seconds = 10
//! rate_budget = 10
//! ```
//!
//! Relative paths are resolved against the config file's directory.
//! Credentials are never read from this file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::Denylist;
use crate::disasm::{BuiltinDecoder, DisasmProvider, ExternalAdapter};
use crate::forge::{safe_component, CompileConfig};
use crate::llm::{ChatBackend, HttpBackend, HttpConfig, ReplayBackend, ScriptedBackend};
use crate::orchestrator::{BackendFactory, BackendSetupError, Budgets, TRANSCRIPT_DIR};

/// Overrides `disassembler_cmd`.
pub const DISASM_ENV: &str = "SOFORGE_DISASM_CMD";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Http,
    Replay,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub library_path: PathBuf,
    pub workspace: PathBuf,
    pub backend: BackendKind,
    pub backend_params: BTreeMap<String, String>,
    pub compiler: CompileConfig,
    pub disassembler_cmd: Option<String>,
    pub budgets: Budgets,
    pub parallelism: usize,
    pub denylist: Vec<String>,
    pub prompt_dir: Option<PathBuf>,
    /// Estimated-token ceiling above which older turns are summarized.
    pub context_ceiling: Option<u64>,
    /// Only run the first N fuzzable exports.
    pub max_functions: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            library_path: PathBuf::new(),
            workspace: PathBuf::from("soforge-work"),
            backend: BackendKind::default(),
            backend_params: BTreeMap::new(),
            compiler: CompileConfig::default(),
            disassembler_cmd: None,
            budgets: Budgets::default(),
            parallelism: 2,
            denylist: Denylist::default().patterns().to_vec(),
            prompt_dir: None,
            context_ceiling: None,
            max_functions: None,
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if !p.as_os_str().is_empty() && p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        resolve(base_dir, &mut cfg.library_path);
        resolve(base_dir, &mut cfg.workspace);
        if let Some(p) = cfg.prompt_dir.as_mut() {
            resolve(base_dir, p);
        }
        for key in ["rules", "transcripts"] {
            if let Some(v) = cfg.backend_params.get_mut(key) {
                let mut p = PathBuf::from(&*v);
                resolve(base_dir, &mut p);
                *v = p.to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn apply_env(&mut self) {
        if let Ok(cmd) = std::env::var(DISASM_ENV) {
            self.disassembler_cmd = if cmd.trim().is_empty() { None } else { Some(cmd) };
        }
    }

    /// Checks that do not touch the target library.
    pub fn validate_settings(&self) -> Result<(), ConfigError> {
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be at least 1".into()));
        }
        self.budgets.validate().map_err(ConfigError::Invalid)?;
        if self.compiler.output_cap == 0 {
            return Err(ConfigError::Invalid("compiler.output_cap must be positive".into()));
        }
        if self.compiler.timeout.is_zero() {
            return Err(ConfigError::Invalid("compiler.timeout_secs must be positive".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_settings()?;
        if self.library_path.as_os_str().is_empty() {
            return Err(ConfigError::Invalid("library_path is required".into()));
        }
        if !self.library_path.is_file() {
            return Err(ConfigError::Invalid(format!(
                "library_path {} does not exist",
                self.library_path.display()
            )));
        }
        Ok(())
    }

    pub fn denylist(&self) -> Denylist {
        Denylist::new(self.denylist.iter().cloned())
    }

    /// Text stored in the ledger header.
    pub fn snapshot(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn provider(&self) -> Result<Arc<dyn DisasmProvider>, ConfigError> {
        Ok(match &self.disassembler_cmd {
            Some(cmd) => Arc::new(
                ExternalAdapter::from_command_line(cmd).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            ),
            None => Arc::new(BuiltinDecoder::new()),
        })
    }

    /// Backend constructor for the configured kind. Replay reads
    /// `<transcripts>/<function>.json`, defaulting to the workspace's
    /// transcript directory.
    pub fn backend_factory(&self) -> Result<BackendFactory, ConfigError> {
        match self.backend {
            BackendKind::Scripted => {
                let rules = self
                    .backend_params
                    .get("rules")
                    .ok_or_else(|| ConfigError::Invalid("scripted backend requires backend_params.rules".into()))?;
                let text = std::fs::read_to_string(rules)
                    .map_err(|e| ConfigError::Io(PathBuf::from(rules), e))?;
                ScriptedBackend::from_json_str(&text).map_err(ConfigError::Invalid)?;
                Ok(Arc::new(move |_| {
                    let b = ScriptedBackend::from_json_str(&text).map_err(|e| BackendSetupError::new("SCRIPT_INVALID", e))?;
                    Ok(Box::new(b) as Box<dyn ChatBackend>)
                }))
            }
            BackendKind::Replay => {
                let dir = self
                    .backend_params
                    .get("transcripts")
                    .map(PathBuf::from)
                    .unwrap_or_else(|| self.workspace.join(TRANSCRIPT_DIR));
                Ok(replay_factory(dir))
            }
            BackendKind::Http => {
                let cfg = HttpConfig::from_params(&self.backend_params).map_err(ConfigError::Invalid)?;
                Ok(Arc::new(move |_| Ok(Box::new(HttpBackend::new(cfg.clone())) as Box<dyn ChatBackend>)))
            }
        }
    }
}

pub fn replay_factory(dir: PathBuf) -> BackendFactory {
    Arc::new(move |f| {
        let path = dir.join(format!("{}.json", safe_component(&f.name)));
        if !path.is_file() {
            return Err(BackendSetupError::new(
                "TRANSCRIPT_MISSING",
                format!("no transcript at {}", path.display()),
            ));
        }
        let b = ReplayBackend::from_file(&path).map_err(|e| BackendSetupError::new("TRANSCRIPT_INVALID", e))?;
        Ok(Box::new(b) as Box<dyn ChatBackend>)
    })
}
