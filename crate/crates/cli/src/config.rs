//! Flat `key = value` configuration layered over a preset.
//!
//! Keys address `TrainConfig` fields directly (`epochs`, `seed`, ...), its
//! nested parts as `model.<key>` and `frontend.<key>`, and the synthetic data
//! generator as `synth.<key>`. `preset` picks the starting point.

use std::path::Path;

use dualpath_core::synth::SynthSpec;
use dualpath_core::train::{Preset, TrainConfig};
use serde_json::{Map, Value};

use crate::CliError;

/// Ordered `key = value` pairs; later entries win.
#[derive(Debug, Default, Clone)]
pub struct Overrides(pub Vec<(String, String)>);

impl Overrides {
    pub fn parse_text(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("{origin}:{}: expected key = value", n + 1)))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self(out))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_text(&text, &path.display().to_string())
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.0.push((key.to_string(), value.to_string()));
    }

    pub fn push_assignment(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects key=value, got {kv:?}")))?;
        self.push(k.trim(), v.trim());
        Ok(())
    }

    fn preset(&self) -> Result<Option<Preset>, CliError> {
        self.0
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.parse::<Preset>().map_err(|e| CliError::usage(e.to_string())))
            .transpose()
    }
}

/// Everything a command may need, after layering.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub preset: Preset,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

impl Resolved {
    pub fn build(overrides: &Overrides, default_preset: Preset) -> Result<Self, CliError> {
        let preset = overrides.preset()?.unwrap_or(default_preset);
        let train = TrainConfig::preset(preset);
        // the generator must emit features the preset model can consume
        let synth = SynthSpec {
            d_v: train.model.d_v,
            d_s: train.model.d_s,
            ..SynthSpec::default()
        };

        let mut tree = Value::Object(Map::from_iter([
            ("train".to_string(), serde_json::to_value(&train).expect("config serializes")),
            ("synth".to_string(), serde_json::to_value(&synth).expect("spec serializes")),
        ]));
        for (key, raw) in &overrides.0 {
            if key == "preset" {
                continue;
            }
            let slot = locate(&mut tree, key).ok_or_else(|| CliError::usage(format!("unknown config key {key:?}")))?;
            *slot = coerce(slot, raw);
        }
        let train: TrainConfig = serde_json::from_value(tree["train"].clone())
            .map_err(|e| CliError::usage(format!("invalid config value: {e}")))?;
        let synth: SynthSpec = serde_json::from_value(tree["synth"].clone())
            .map_err(|e| CliError::usage(format!("invalid synth value: {e}")))?;
        Ok(Self { preset, train, synth })
    }

    /// Flat `key = value` text that reproduces this configuration.
    pub fn to_text(&self) -> String {
        let mut lines = vec![format!("preset = {}", preset_name(self.preset))];
        let train = serde_json::to_value(&self.train).expect("config serializes");
        flatten("", &train, &mut lines);
        let synth = serde_json::to_value(&self.synth).expect("spec serializes");
        flatten("synth.", &synth, &mut lines);
        lines.join("\n") + "\n"
    }

    pub fn to_json(&self) -> Value {
        serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "preset": preset_name(self.preset),
            "config_hash": self.train.hash(),
            "train": self.train,
            "synth": self.synth,
        })
    }
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::MrHiSum => "mrhisum",
        Preset::TvSum => "tvsum",
        Preset::Toy => "toy",
    }
}

fn locate<'a>(tree: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    let (root, rest) = match key.split_once('.') {
        Some(("synth", rest)) => ("synth", rest),
        _ => ("train", key),
    };
    let mut node = tree.get_mut(root)?;
    for part in rest.split('.') {
        node = node.as_object_mut()?.get_mut(part)?;
    }
    (!node.is_object()).then_some(node)
}

/// Interprets `raw` in the shape of the value it replaces.
fn coerce(current: &Value, raw: &str) -> Value {
    if current.is_string() {
        return Value::String(raw.trim_matches('"').to_string());
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                flatten(&format!("{prefix}{k}."), child, out);
            }
        }
        Value::String(s) => out.push(format!("{} = {s}", prefix.trim_end_matches('.'))),
        other => out.push(format!("{} = {other}", prefix.trim_end_matches('.'))),
    }
}
