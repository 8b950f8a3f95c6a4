use serde::{Deserialize, Serialize};

use crate::corpus::DEFAULT_DESCRIPTION_LEN;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::knowledge::SememeWeighting;
use crate::promptgen::{PromptConfig, PromptMode};

pub const DEFAULT_SEED: u64 = 42;

/// Which parameter groups receive updates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Freezing {
    /// Prompt banks and fusion maps only.
    PromptOnly,
    /// Prompt banks, fusion maps and the tag head.
    #[default]
    PromptAndHead,
    Full,
}

/// Parameter group a name belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Prompt,
    Head,
    Backbone,
}

impl ParamGroup {
    pub fn of(name: &str) -> Result<Self> {
        let prefix = name.split('.').next().unwrap_or_default();
        match prefix {
            "prompt" | "fusion" => Ok(ParamGroup::Prompt),
            "head" => Ok(ParamGroup::Head),
            "embed" | "encoder" => Ok(ParamGroup::Backbone),
            _ => Err(Error::UnknownParam(format!("{name} (no freezing group)"))),
        }
    }
}

impl Freezing {
    pub fn trains(self, group: ParamGroup) -> bool {
        match self {
            Freezing::PromptOnly => group == ParamGroup::Prompt,
            Freezing::PromptAndHead => group != ParamGroup::Backbone,
            Freezing::Full => true,
        }
    }
}

/// Run configuration. The JSON form mirrors these fields one to one and
/// every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub l_p: usize,
    /// Prompt lengths tried per episode; empty means `[l_p]`.
    pub lp_grid: Vec<usize>,
    pub mode: PromptMode,
    pub freezing: Freezing,
    pub seed: u64,
    pub k: usize,
    pub num_seeds: usize,
    pub encoder: EncoderConfig,
    pub sememe_weighting: SememeWeighting,
    pub share_prompt_projection: bool,
    /// Stop after this many epochs without a dev F1 improvement.
    pub patience: Option<usize>,
    /// Words kept per label description.
    pub description_len: usize,
    /// Shots per type in the sampled dev set; `None` uses `k`.
    pub dev_k: Option<usize>,
    /// Select on the whole dev split instead of a k-shot sample.
    pub full_dev: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr: 5e-3,
            dropout: 0.1,
            l_p: 4,
            lp_grid: Vec::new(),
            mode: PromptMode::Tkdp,
            freezing: Freezing::PromptAndHead,
            seed: DEFAULT_SEED,
            k: 5,
            num_seeds: 5,
            encoder: EncoderConfig::default(),
            sememe_weighting: SememeWeighting::Distance,
            share_prompt_projection: true,
            patience: None,
            description_len: DEFAULT_DESCRIPTION_LEN,
            dev_k: None,
            full_dev: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Invalid(format!("{field}: {msg}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be a positive number");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if self.num_seeds == 0 {
            return bad("num_seeds", "must be at least 1");
        }
        if self.description_len == 0 {
            return bad("description_len", "must be positive");
        }
        if self.dev_k == Some(0) {
            return bad("dev_k", "must be positive when set");
        }
        if self.patience == Some(0) {
            return bad("patience", "must be positive when set");
        }
        self.encoder_config().validate()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            dropout: self.dropout,
            ..self.encoder.clone()
        }
    }

    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig {
            mode: self.mode,
            l_p: self.l_p,
            sememe_weighting: self.sememe_weighting,
            share_prompt_projection: self.share_prompt_projection,
        }
    }

    pub fn lengths(&self) -> Vec<usize> {
        if self.lp_grid.is_empty() {
            vec![self.l_p]
        } else {
            let mut v = self.lp_grid.clone();
            v.sort_unstable();
            v.dedup();
            v
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Invalid(format!("config field `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = TrainConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(TrainConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_field_names_path() {
        let err = TrainConfig::from_json(r#"{"encoder": {"d_hh": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("d_hh"), "{err}");
        let err = TrainConfig::from_json(r#"{"batch_size": 0}"#).unwrap_err();
        assert!(err.to_string().contains("batch_size"));
    }

    #[test]
    fn dropout_flows_into_encoder() {
        let cfg = TrainConfig::from_json(r#"{"dropout": 0.3}"#).unwrap();
        assert_eq!(cfg.encoder_config().dropout, 0.3);
    }

    #[test]
    fn groups_and_policies() {
        assert_eq!(ParamGroup::of("fusion.gate_x.w").unwrap(), ParamGroup::Prompt);
        assert_eq!(ParamGroup::of("head.w").unwrap(), ParamGroup::Head);
        assert_eq!(ParamGroup::of("encoder.layer0.ln1.gain").unwrap(), ParamGroup::Backbone);
        assert!(ParamGroup::of("mystery").is_err());
        assert!(!Freezing::PromptOnly.trains(ParamGroup::Head));
        assert!(Freezing::PromptAndHead.trains(ParamGroup::Head));
        assert!(Freezing::Full.trains(ParamGroup::Backbone));
    }

    #[test]
    fn lp_grid_sorted() {
        let cfg = TrainConfig {
            lp_grid: vec![8, 2, 8],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lengths(), [2, 8]);
        assert_eq!(TrainConfig::default().lengths(), [4]);
    }
}
