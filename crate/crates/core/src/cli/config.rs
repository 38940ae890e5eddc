use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::data::TaskSpec;
use crate::encoder::{EncoderDims, MaskOptions, PositionPolicy};
use crate::eval::AblationConfig;
use crate::federation::FederationConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    #[default]
    BaseNovel,
    Lodo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub kind: ProtocolKind,
    /// Fraction of classes (lowest ids first) used as base classes.
    pub base_fraction: f64,
    /// Domain held out under `lodo`; every domain in turn when unset.
    pub held_out_domain: Option<usize>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            kind: ProtocolKind::BaseNovel,
            base_fraction: 0.5,
            held_out_domain: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub vocab_size: usize,
    pub text_len: usize,
    pub max_prompt_len: usize,
    pub mlp_ratio: usize,
    pub prompt_len: usize,
    pub lambda: f64,
    pub position_policy: PositionPolicy,
    pub eos_self_attention: bool,
    /// Scale of the random null-space part of the fitted projection head.
    pub head_residual_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            width: 32,
            vocab_size: 64,
            text_len: 8,
            max_prompt_len: 16,
            mlp_ratio: 4,
            prompt_len: 10,
            lambda: 0.5,
            position_policy: PositionPolicy::Fixed,
            eos_self_attention: false,
            head_residual_std: 0.2,
        }
    }
}

impl EncoderConfig {
    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            layers: self.layers,
            heads: self.heads,
            width: self.width,
            vocab_size: self.vocab_size,
            text_len: self.text_len,
            max_prompt_len: self.max_prompt_len,
            mlp_ratio: self.mlp_ratio,
        }
    }

    /// Mask options after applying the ablation switches.
    pub fn mask_options(&self, ablation: &AblationConfig) -> MaskOptions {
        MaskOptions {
            hard_masking: ablation.hard_masking,
            reweight: ablation.reweighting.then_some(self.lambda),
            causal: true,
            eos_self_attention: self.eos_self_attention,
        }
    }
}

/// Everything needed to replay one experiment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Artifact directory; resolved against the output root when relative.
    pub output_dir: Option<PathBuf>,
    pub protocol: ProtocolConfig,
    pub task: TaskSpec,
    pub encoder: EncoderConfig,
    pub federation: FederationConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        self.task.validate().map_err(|e| RunError::Config(e.to_string()))?;
        self.encoder.dims().validate().map_err(|e| RunError::Config(e.to_string()))?;
        self.federation.validate().map_err(|e| RunError::Config(e.to_string()))?;
        if self.encoder.prompt_len > self.encoder.max_prompt_len {
            return bad(format!(
                "encoder.prompt_len {} exceeds encoder.max_prompt_len {}",
                self.encoder.prompt_len, self.encoder.max_prompt_len
            ));
        }
        if !(self.encoder.lambda >= 0.0) || !self.encoder.lambda.is_finite() {
            return bad(format!("encoder.lambda must be >= 0, got {}", self.encoder.lambda));
        }
        if !(self.encoder.head_residual_std >= 0.0) {
            return bad("encoder.head_residual_std must be >= 0".into());
        }
        if self.task.num_classes > self.encoder.width {
            return bad(format!(
                "{} classes cannot be aligned through a width-{} encoder",
                self.task.num_classes, self.encoder.width
            ));
        }
        if self.task.num_classes > crate::encoder::tokens::max_distinct_classes(self.encoder.vocab_size) {
            return bad("vocabulary too small for the class count".into());
        }
        if !(self.protocol.base_fraction > 0.0 && self.protocol.base_fraction < 1.0) {
            return bad("protocol.base_fraction must lie in (0, 1)".into());
        }
        if let Some(d) = self.protocol.held_out_domain {
            if d >= self.task.domains.len() {
                return bad(format!("protocol.held_out_domain {d} does not exist"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Reads an optional TOML file, applies `key.path=value` overrides on top,
/// fills defaults and validates. Unknown keys are rejected.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, RunError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| RunError::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}

pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<RunConfig, RunError> {
    // Parsing the raw text first keeps line/column diagnostics for file errors.
    let mut config: RunConfig = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
    if !overrides.is_empty() {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| RunError::Config(format!("after overrides: {}", e.message())))?;
    }
    config.validate()?;
    Ok(config)
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), RunError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| RunError::Config(format!("override `{item}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(RunError::Config(format!("bad override key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cursor = table;
    for part in path {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| RunError::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

/// TOML literal when it parses as one, bare string otherwise.
fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&probe) {
        Ok(mut t) => t.remove("v").expect("probe key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = parse_config_str("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.federation.local_epochs, 10);
        assert_eq!(c.federation.lr, 0.001);
        assert_eq!(c.federation.batch_size, 32);
    }

    #[test]
    fn overrides_beat_the_file() {
        let text = "seed = 3\n[federation]\nbeta = 0.3\n";
        let c = parse_config_str(text, &["federation.beta=0.1".into(), "ablation.cscr=false".into()]).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.federation.beta, 0.1);
        assert!(!c.ablation.cscr);
    }

    #[test]
    fn string_overrides_need_no_quotes() {
        let c = parse_config_str("", &["protocol.kind=lodo".into()]).unwrap();
        assert_eq!(c.protocol.kind, ProtocolKind::Lodo);
    }

    #[test]
    fn rejects_bad_beta_and_unknown_keys() {
        assert!(parse_config_str("[federation]\nbeta = 0.0\n", &[]).is_err());
        assert!(parse_config_str("", &["federation.beta=-1".into()]).is_err());
        let err = parse_config_str("[federation]\nbetta = 0.5\n", &[]).unwrap_err().to_string();
        assert!(err.contains("betta"), "{err}");
        assert!(err.contains("line 2"), "{err}");
        assert!(parse_config_str("", &["encoder.nope=1".into()]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.seed = 42;
        c.encoder.lambda = 0.7;
        c.protocol.held_out_domain = Some(1);
        c.output_dir = Some("out/x".into());
        let back = parse_config_str(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
    }
}
