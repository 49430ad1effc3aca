use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use echo_agent_core::agent::AgentConfig;
use echo_agent_core::controller::{BackendSpec, RemoteConfig};
use echo_agent_core::executors::RegistryManifest;
use echo_agent_core::grading::ClinicalThresholds;
use echo_agent_core::registry::ToolRegistry;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    /// Backend for sessions that do not choose their own.
    #[serde(default = "default_backend")]
    pub backend: BackendSpec,
    #[serde(default)]
    pub thresholds: ClinicalThresholds,
    /// Registry manifest; the in-process mock suite when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default = "default_t_max")]
    pub t_max_ms: u64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u32,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    /// Shared bearer token. Requests must present it when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}
fn default_backend() -> BackendSpec {
    BackendSpec::Oracle
}
fn default_t_max() -> u64 {
    AgentConfig::default().t_max_ms
}
fn default_max_iterations() -> u32 {
    AgentConfig::default().max_iterations
}
fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

impl Default for ServiceConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Every problem with the configuration, each with a hint.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        if self.bind.parse::<SocketAddr>().is_err() {
            problems.push(format!("bind: {:?} is not an address such as 127.0.0.1:8080", self.bind));
        }
        if self.t_max_ms == 0 {
            problems.push("t_max_ms: must be positive".into());
        }
        if self.max_iterations == 0 {
            problems.push("max_iterations: must be positive".into());
        }
        if let Err(e) = self.thresholds.validate() {
            problems.push(format!("thresholds: {e}"));
        }
        if let Err(e) = check_backend(&self.backend) {
            problems.push(format!("backend: {e}"));
        }
        if let Some(m) = &self.manifest {
            if let Err(e) = RegistryManifest::load(m).and_then(|m| m.build(self.thresholds)) {
                problems.push(format!("manifest: {e}"));
            }
        }
        if self.token.as_deref().is_some_and(|t| t.trim().is_empty()) {
            problems.push("token: must not be blank; omit it to disable authentication".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            t_max_ms: self.t_max_ms,
            max_iterations: self.max_iterations,
            thresholds: self.thresholds,
            ..AgentConfig::default()
        }
    }

    pub fn build_registry(&self) -> anyhow::Result<ToolRegistry> {
        let manifest = match &self.manifest {
            Some(path) => RegistryManifest::load(path)?,
            None => RegistryManifest::default(),
        };
        Ok(manifest.build(self.thresholds)?)
    }
}

/// Checks that a backend can be built, without contacting anything.
pub fn check_backend(backend: &BackendSpec) -> Result<(), String> {
    match backend {
        BackendSpec::Remote => RemoteConfig::from_env().map(|_| ()),
        BackendSpec::Scripted { script } => echo_agent_core::controller::ScriptedPolicy::from_json(script).map(|_| ()),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ServiceConfig::default();
        assert_eq!(c.bind, "127.0.0.1:8080");
        assert_eq!(c.backend, BackendSpec::Oracle);
        c.validate().unwrap();
    }

    #[test]
    fn every_problem_is_listed() {
        let c: ServiceConfig = serde_json::from_value(serde_json::json!({
            "bind": "nowhere", "t_max_ms": 0, "manifest": "/missing/manifest.json",
            "backend": {"kind": "scripted", "script": {"not": "a list"}}
        }))
        .unwrap();
        let problems = c.validate().unwrap_err();
        assert_eq!(problems.len(), 4, "{problems:?}");
        assert!(problems[0].starts_with("bind:"));
        assert!(serde_json::from_str::<ServiceConfig>(r#"{"port": 1}"#).is_err());
    }
}
