use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::bench::{BenchSettings, MacpWeights};
use super::tasks::{generate_suite, SuiteCounts, SyntheticTask};
use crate::agents::{
    AgentSpec, AttackSpec, Embedder, HashEmbedder, HttpChatBackend, HttpEmbedder, HttpSettings,
    MockAgent, SharedBackend, Skills, DEFAULT_ADVERSARIAL_PROMPT, DEFAULT_EMBED_DIM,
};
use crate::designer::Dims;
use crate::error::{Error, Result};
use crate::executor::{AggregationStrategy, DialogueOptions, Summarizer, Team};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub id: usize,
    pub base: String,
    pub role: String,
    #[serde(default)]
    pub plugins: Vec<String>,
    /// Mock backend only; falls back to `backend.skills`.
    #[serde(default)]
    pub skills: Option<Skills>,
}

impl AgentConfig {
    pub fn spec(&self) -> AgentSpec {
        AgentSpec {
            id: self.id,
            base: self.base.clone(),
            role: self.role.clone(),
            state: Vec::new(),
            plugins: self.plugins.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub temperature: f64,
    pub max_in_flight: usize,
    /// Default mock skills for agents without their own.
    pub skills: Skills,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            base_url: None,
            model: None,
            temperature: 1.0,
            max_in_flight: 4,
            skills: Skills::default(),
        }
    }
}

impl BackendConfig {
    fn http_settings(&self, what: &str) -> Result<HttpSettings> {
        let base_url = self
            .base_url
            .clone()
            .ok_or_else(|| Error::Config(format!("{what} needs base_url")))?;
        let model = self
            .model
            .clone()
            .ok_or_else(|| Error::Config(format!("{what} needs model")))?;
        let mut s = HttpSettings::new(base_url, model);
        s.temperature = self.temperature;
        s.max_in_flight = self.max_in_flight.max(1);
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Hash,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub base_url: Option<String>,
    pub model: Option<String>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Hash,
            dim: DEFAULT_EMBED_DIM,
            base_url: None,
            model: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateConfig {
    pub kind: Option<AggregationStrategy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummarizerConfig {
    #[serde(default = "default_summarizer_role")]
    pub role: String,
    #[serde(default = "default_summarizer_base")]
    pub base: String,
    #[serde(default)]
    pub skills: Option<Skills>,
}

fn default_summarizer_role() -> String {
    "Summarizer who reads every answer and reports the final one".into()
}

fn default_summarizer_base() -> String {
    "mock".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimsConfig {
    pub hidden: usize,
    pub latent: usize,
    pub ffn: usize,
}

impl Default for DimsConfig {
    fn default() -> Self {
        let d = Dims::default();
        Self {
            hidden: d.hidden,
            latent: d.latent,
            ffn: d.ffn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub seed: u64,
    #[serde(flatten)]
    pub counts: SuiteCounts,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            counts: SuiteCounts {
                arith_easy: 10,
                arith_hard: 10,
                choice: 10,
                relay: 10,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub target_agent: usize,
    #[serde(default)]
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: Option<PathBuf>,
    pub train_log: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

/// Everything a CLI invocation needs, read from one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub agents: Vec<AgentConfig>,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub aggregate: AggregateConfig,
    #[serde(default)]
    pub summarizer: Option<SummarizerConfig>,
    #[serde(default)]
    pub macp: MacpWeights,
    #[serde(default)]
    pub designer: DimsConfig,
    #[serde(default)]
    pub suite: SuiteConfig,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut c: RunConfig = serde_json::from_str(text)?;
        c.train.beta1_cost = c.macp.beta1;
        c.train.beta2_robust = c.macp.beta2;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        crate::agents::validate_agents(&self.agent_specs())?;
        self.train.validate()?;
        if self.embedder.dim == 0 {
            return Err(Error::Config("embedder dim must be positive".into()));
        }
        if self.strategy() == AggregationStrategy::SummarizerAgent && self.summarizer.is_none() {
            return Err(Error::Config(
                "summarizer_agent aggregation requires a summarizer section".into(),
            ));
        }
        if let Some(a) = &self.attack {
            self.attack_spec(a.target_agent)?;
        }
        Ok(())
    }

    pub fn agent_specs(&self) -> Vec<AgentSpec> {
        self.agents.iter().map(AgentConfig::spec).collect()
    }

    /// Configured strategy, else the summarizer when one exists, else majority vote.
    pub fn strategy(&self) -> AggregationStrategy {
        self.aggregate.kind.unwrap_or(if self.summarizer.is_some() {
            AggregationStrategy::SummarizerAgent
        } else {
            AggregationStrategy::MajorityVote
        })
    }

    pub fn dims(&self) -> Dims {
        Dims {
            feature: self.embedder.dim,
            hidden: self.designer.hidden,
            latent: self.designer.latent,
            ffn: self.designer.ffn,
        }
    }

    pub fn embedder(&self) -> Result<Box<dyn Embedder>> {
        match self.embedder.kind {
            EmbedderKind::Hash => Ok(Box::new(HashEmbedder::new(self.embedder.dim)?)),
            EmbedderKind::Http => {
                let base_url = self
                    .embedder
                    .base_url
                    .clone()
                    .ok_or_else(|| Error::Config("http embedder needs base_url".into()))?;
                let model = self
                    .embedder
                    .model
                    .clone()
                    .ok_or_else(|| Error::Config("http embedder needs model".into()))?;
                Ok(Box::new(HttpEmbedder::new(
                    HttpSettings::new(base_url, model),
                    self.embedder.dim,
                )?))
            }
        }
    }

    fn backend_for(&self, skills: Option<&Skills>, http: &Option<SharedBackend>) -> SharedBackend {
        match (self.backend.kind, http) {
            (BackendKind::Http, Some(b)) => b.clone(),
            _ => Arc::new(MockAgent::new(skills.unwrap_or(&self.backend.skills).clone())),
        }
    }

    pub fn team(&self) -> Result<Team> {
        let http: Option<SharedBackend> = match self.backend.kind {
            BackendKind::Http => Some(Arc::new(HttpChatBackend::new(
                self.backend.http_settings("http backend")?,
            )?)),
            BackendKind::Mock => None,
        };
        let backends = self
            .agents
            .iter()
            .map(|a| self.backend_for(a.skills.as_ref(), &http))
            .collect();
        let summarizer = self.summarizer.as_ref().map(|s| Summarizer {
            spec: AgentSpec::new(self.agents.len(), s.base.clone(), s.role.clone()),
            backend: self.backend_for(s.skills.as_ref(), &http),
        });
        let team = Team {
            agents: self.agent_specs(),
            backends,
            summarizer,
        };
        team.validate()?;
        Ok(team)
    }

    pub fn dialogue_options(&self) -> DialogueOptions {
        DialogueOptions {
            k_rounds: self.train.k_rounds,
            strategy: self.strategy(),
            attack: None,
        }
    }

    pub fn bench_settings(&self) -> BenchSettings {
        BenchSettings {
            options: self.dialogue_options(),
            weights: self.macp,
            seed: self.train.seed,
        }
    }

    pub fn suite(&self) -> Vec<SyntheticTask> {
        generate_suite(self.suite.seed, self.suite.counts)
    }

    pub fn attack_spec(&self, target: usize) -> Result<AttackSpec> {
        let prompt = self
            .attack
            .as_ref()
            .and_then(|a| a.prompt.clone())
            .unwrap_or_else(|| DEFAULT_ADVERSARIAL_PROMPT.to_string());
        let spec = AttackSpec {
            target_agent: target,
            adversarial_system_prompt: prompt,
        };
        spec.validate(self.agents.len())?;
        Ok(spec)
    }
}
