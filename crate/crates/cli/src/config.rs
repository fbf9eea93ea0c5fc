//! The TOML config file: one section per component, unknown keys rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use celldet_core::{EvalConfig, ModelConfig, SynthSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthSpec,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.synth.validate()?;
        let c = self.model.head.num_classes;
        if self.eval.num_classes != c || self.synth.num_classes != c {
            return Err(CliError::validation(format!(
                "class counts disagree: model.head {c}, eval {}, synth {} (set them together with --num-classes)",
                self.eval.num_classes, self.synth.num_classes
            )));
        }
        Ok(())
    }

    /// Sets every section's class count.
    pub fn set_num_classes(&mut self, n: usize) {
        self.model.head.num_classes = n;
        self.eval.num_classes = n;
        if self.synth.num_classes != n {
            self.synth.num_classes = n;
            let (r, c) = (self.synth.blob_radius.clone(), self.synth.class_color_means.clone());
            self.synth.blob_radius = (0..n).map(|i| r[i % r.len()]).collect();
            self.synth.class_color_means = (0..n).map(|i| c[i % c.len()]).collect();
        }
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut String) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            let _ = writeln!(out, "  {prefix} = {other}");
        }
    }
}

/// Every config key with its default, for `--help`.
pub fn key_listing() -> String {
    let v = toml::Value::try_from(CliConfig::default()).expect("config serializes");
    let mut s = String::from(
        "Config file keys (TOML, `[section]` per dotted prefix) and defaults; flags override the file:\n",
    );
    flatten("", &v, &mut s);
    s
}
