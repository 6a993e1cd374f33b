use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use hoproute_core::experiments::write_json;
use hoproute_core::routing::{AlphaMode, RouterConfig};

use crate::config::EffectiveConfig;

/// The deployment rule, repeated in every report.
#[derive(Debug, Clone, Serialize)]
pub struct FrozenRule {
    pub alpha: f64,
    pub tau: f64,
    pub alpha_mode: AlphaMode,
}

impl FrozenRule {
    pub fn new(cfg: &RouterConfig) -> Self {
        FrozenRule {
            alpha: cfg.alpha,
            tau: cfg.tau,
            alpha_mode: cfg.alpha_mode,
        }
    }

    pub fn banner(&self) -> String {
        format!(
            "frozen rule: alpha={} tau={} alpha_mode={}",
            self.alpha,
            self.tau,
            match self.alpha_mode {
                AlphaMode::Frozen => "frozen",
                AlphaMode::PWeighted => "p_weighted",
            }
        )
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    experiment: &'a str,
    dataset: Option<&'a str>,
    tool_version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at_unix: Option<u64>,
    frozen_rule: FrozenRule,
    config: &'a EffectiveConfig,
    result: &'a T,
}

/// First 8 hex digits of the SHA-256 of the effective config.
pub fn config_hash(cfg: &EffectiveConfig) -> anyhow::Result<String> {
    let json = serde_json::to_vec(cfg)?;
    Ok(hex::encode(&Sha256::digest(&json)[..4]))
}

pub struct ReportWriter<'a> {
    pub out_dir: &'a Path,
    pub experiment: &'a str,
    pub dataset: Option<&'a str>,
    pub config: &'a EffectiveConfig,
    pub deterministic: bool,
}

impl ReportWriter<'_> {
    /// `{experiment}-{dataset}-{hash}` plus `suffix`.
    pub fn path(&self, suffix: &str) -> anyhow::Result<PathBuf> {
        let stem = match self.dataset {
            Some(d) => format!("{}-{}-{}", self.experiment, d, config_hash(self.config)?),
            None => format!("{}-{}", self.experiment, config_hash(self.config)?),
        };
        Ok(self.out_dir.join(format!("{stem}{suffix}")))
    }

    pub fn write<T: Serialize>(&self, result: &T) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        let generated_at_unix = (!self.deterministic).then(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        });
        let envelope = Envelope {
            experiment: self.experiment,
            dataset: self.dataset,
            tool_version: env!("CARGO_PKG_VERSION"),
            generated_at_unix,
            frozen_rule: FrozenRule::new(&self.config.router),
            config: self.config,
            result,
        };
        let path = self.path(".json")?;
        write_json(&path, &envelope)?;
        Ok(path)
    }
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::Bool(b) => Some(b.to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::String(s) => Some(s.clone()),
        Value::Null => Some("-".into()),
        _ => None,
    }
}

fn print_value(prefix: &str, v: &Value, depth: usize) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match scalar(child) {
                    Some(s) => println!("  {key}: {s}"),
                    None if depth < 2 => print_value(&key, child, depth + 1),
                    None => println!("  {key}: ..."),
                }
            }
        }
        Value::Array(items) => {
            if items.iter().all(|i| i.get("condition").is_some()) && !items.is_empty() {
                for i in items {
                    let name = i["condition"].as_str().unwrap_or("?");
                    let r = i.get("r_at_k").and_then(scalar).unwrap_or_default();
                    let d = i.get("delta_pp").and_then(scalar).unwrap_or_default();
                    println!("  {prefix}: {name:<28} R@k={r} delta_pp={d}");
                }
            } else {
                println!("  {prefix}: {} items", items.len());
            }
        }
        other => println!("  {prefix}: {}", scalar(other).unwrap_or_default()),
    }
}

pub fn print_summary(path: &Path) -> anyhow::Result<()> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Value = serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
    let name = v["experiment"].as_str().unwrap_or("unknown");
    println!("experiment: {name}");
    if let Some(d) = v["dataset"].as_str() {
        println!("dataset: {d}");
    }
    let rule = &v["frozen_rule"];
    println!(
        "frozen rule: alpha={} tau={} alpha_mode={}",
        scalar(&rule["alpha"]).unwrap_or_default(),
        scalar(&rule["tau"]).unwrap_or_default(),
        scalar(&rule["alpha_mode"]).unwrap_or_default()
    );
    println!("result:");
    print_value("", &v["result"], 0);
    Ok(())
}
