//! TOML configuration shared by the CLI and the HTTP service.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, HashEmbedder, HttpEmbedder};
use crate::error::{Error, Result};
use crate::kg::{CaseFold, TransEConfig};
use crate::moe::{ExpertSpec, MoeConfig};
use crate::retriever::RetrievalConfig;
use crate::rlhf::{PpoConfig, QualitativeScale, RewardModel};
use crate::taxonomy::Role;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub service: ServiceConfig,
    pub auth: AuthConfig,
    pub embedder: EmbedderConfig,
    pub retrieval: RetrievalConfig,
    pub moe: MoeConfig,
    pub experts: Vec<ExpertSpec>,
    pub kg: KgConfig,
    pub ppo: PpoConfig,
    pub reward: RewardModel,
    pub qualitative: QualitativeScale,
    pub rlhf: RlhfConfig,
    pub workflow: WorkflowConfig,
    pub data: DataConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            service: ServiceConfig::default(),
            auth: AuthConfig::default(),
            embedder: EmbedderConfig::default(),
            retrieval: RetrievalConfig::default(),
            moe: MoeConfig::default(),
            experts: ExpertSpec::default_set(),
            kg: KgConfig::default(),
            ppo: PpoConfig::default(),
            reward: RewardModel::default(),
            qualitative: QualitativeScale::default(),
            rlhf: RlhfConfig::default(),
            workflow: WorkflowConfig::default(),
            data: DataConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub bind: String,
    /// Write-ahead journal of mutating requests (JSON lines).
    pub journal: Option<PathBuf>,
    /// Snapshot loaded at startup when present.
    pub snapshot: Option<PathBuf>,
    pub max_body_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            journal: None,
            snapshot: None,
            max_body_bytes: 1 << 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuthConfig {
    /// Bearer token to role.
    pub tokens: BTreeMap<String, Role>,
}

impl AuthConfig {
    pub fn role_for(&self, token: &str) -> Option<Role> {
        self.tokens.get(token).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderConfig {
    Hash {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default = "default_seed")]
        seed: u64,
    },
    Http {
        endpoint: String,
        dim: usize,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_dim() -> usize {
    HashEmbedder::default().dim
}
fn default_order() -> usize {
    HashEmbedder::default().order
}
fn default_seed() -> u64 {
    HashEmbedder::default().seed
}
fn default_timeout_ms() -> u64 {
    5_000
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        let h = HashEmbedder::default();
        EmbedderConfig::Hash {
            dim: h.dim,
            order: h.order,
            seed: h.seed,
        }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Arc<dyn Embedder<f64>>> {
        Ok(match self {
            EmbedderConfig::Hash { dim, order, seed } => {
                Arc::new(HashEmbedder::new(*dim, *order, *seed)?)
            }
            EmbedderConfig::Http {
                endpoint,
                dim,
                timeout_ms,
            } => {
                if *dim == 0 {
                    return Err(Error::Configuration("http embedder needs dim > 0".into()));
                }
                Arc::new(HttpEmbedder::new(
                    "http",
                    endpoint.clone(),
                    *dim,
                    Duration::from_millis(*timeout_ms),
                ))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KgConfig {
    pub transe: TransEConfig,
    /// KG facts handed to the experts per question.
    pub max_facts: usize,
    pub case_fold: CaseFold,
}

impl Default for KgConfig {
    fn default() -> Self {
        Self {
            transe: TransEConfig::default(),
            max_facts: 5,
            case_fold: CaseFold::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlhfConfig {
    /// Run a policy update as soon as the buffer qualifies.
    pub auto_update: bool,
    /// Number of recent queries behind the reported abstention rate.
    pub abstention_window: usize,
}

impl Default for RlhfConfig {
    fn default() -> Self {
        Self {
            auto_update: true,
            abstention_window: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkflowConfig {
    pub templates_dir: Option<PathBuf>,
    pub default_template: String,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self {
            templates_dir: None,
            default_template: "default".into(),
        }
    }
}

/// Files loaded into a fresh engine.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub docs: Option<PathBuf>,
    pub triples: Option<PathBuf>,
    pub gazetteer: Option<PathBuf>,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(s).map_err(|e| Error::Configuration(e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative paths inside it are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Configuration(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.service.journal);
        fix(&mut self.service.snapshot);
        fix(&mut self.workflow.templates_dir);
        fix(&mut self.data.docs);
        fix(&mut self.data.triples);
        fix(&mut self.data.gazetteer);
    }

    pub fn validate(&self) -> Result<()> {
        self.retrieval.validate()?;
        self.moe.validate()?;
        self.kg.transe.validate()?;
        self.ppo.validate()?;
        self.reward.validate()?;
        if self.experts.len() != self.moe.experts {
            return Err(Error::Configuration(format!(
                "moe.experts is {} but {} experts are configured",
                self.moe.experts,
                self.experts.len()
            )));
        }
        for (i, e) in self.experts.iter().enumerate() {
            if e.id != i + 1 {
                return Err(Error::Configuration(format!(
                    "expert ids must run 1..=N in order, found {} at {}",
                    e.id,
                    i + 1
                )));
            }
            e.profile()?;
        }
        if self.auth.tokens.keys().any(|t| t.trim().is_empty()) {
            return Err(Error::Configuration("auth tokens must be nonempty".into()));
        }
        if self.rlhf.abstention_window == 0 {
            return Err(Error::Configuration(
                "abstention_window must be positive".into(),
            ));
        }
        self.embedder.build()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        Config::default().validate().unwrap();
        let cfg = Config::from_toml_str("").unwrap();
        assert_eq!(cfg, Config::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml_str("[retrieval]\ntheta = 0.8\nthreshold = 1").is_err());
        assert!(Config::from_toml_str("[nonsense]").is_err());
        assert!(Config::from_toml_str("[embedder]\nkind = \"hash\"\nwidth = 3").is_err());
    }

    #[test]
    fn sections_parse() {
        let cfg = Config::from_toml_str(
            r#"
[service]
bind = "0.0.0.0:9000"
[auth.tokens]
adv-token = "advisor"
para-token = "paralegal"
[embedder]
kind = "hash"
dim = 128
[retrieval]
theta = 0.2
fusion_mode = "text_only"
[ppo]
batch_threshold = 150
"#,
        )
        .unwrap();
        assert_eq!(cfg.auth.role_for("adv-token"), Some(Role::Advisor));
        assert_eq!(cfg.auth.role_for("x"), None);
        assert_eq!(cfg.embedder.build().unwrap().dim(), 128);
        assert_eq!(cfg.ppo.batch_threshold, 150);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::from_toml_str("[retrieval]\ntheta = 1.5").is_err());
        assert!(Config::from_toml_str("[ppo]\nbatch_threshold = 20").is_err());
        assert!(Config::from_toml_str("[moe]\nexperts = 3").is_err());
        assert!(Config::from_toml_str("[auth.tokens]\nt = \"judge\"").is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[data]\ndocs = \"docs.jsonl\"").unwrap();
        let cfg = Config::load(&path).unwrap();
        assert_eq!(cfg.data.docs.unwrap(), dir.path().join("docs.jsonl"));
    }
}
